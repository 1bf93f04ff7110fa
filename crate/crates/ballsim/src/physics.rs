//! Event-driven ball dynamics.
//!
//! Within each unit frame step the simulator repeatedly finds the earliest
//! contact (ball-ball or ball-wall), advances every ball to that instant and
//! resolves it, so balls never interpenetrate regardless of speed.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Guard against pathological configurations (e.g. a ball wedged between
/// two others and a wall) looping forever inside one frame.
const MAX_EVENTS_PER_FRAME: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    /// Side length of the square canvas in pixels.
    pub canvas: f64,
    pub radius: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    /// Extra slack added to the contact distance when flagging collisions.
    pub contact_tolerance: f64,
    pub max_init_attempts: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            canvas: 64.0,
            radius: 6.0,
            speed_min: 1.5,
            speed_max: 3.0,
            contact_tolerance: 0.5,
            max_init_attempts: 10_000,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0 && 2.0 * self.radius < self.canvas) {
            return Err(Error::Config(format!(
                "radius {} does not fit a {} px canvas",
                self.radius, self.canvas
            )));
        }
        if !(self.speed_min >= 0.0 && self.speed_min <= self.speed_max) {
            return Err(Error::Config(format!(
                "bad speed range [{}, {}]",
                self.speed_min, self.speed_max
            )));
        }
        if self.contact_tolerance < 0.0 {
            return Err(Error::Config("contact tolerance must be non-negative".into()));
        }
        Ok(())
    }
}

/// Position and velocity in canvas pixels (origin at the top-left corner,
/// x to the right, y down).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BallState {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
    pub radius: f64,
}

impl BallState {
    pub fn speed(&self) -> f64 {
        self.velocity[0].hypot(self.velocity[1])
    }
}

/// A resolved ball-ball contact.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollisionEvent {
    /// Index of the frame step the contact happened in (between frame
    /// `step` and `step + 1`).
    pub step: usize,
    /// Time within the step, in [0, 1].
    pub time: f64,
    pub pair: (usize, usize),
    pub before: [[f64; 2]; 2],
    pub after: [[f64; 2]; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `states[t][b]` is ball `b` at frame `t`.
    pub states: Vec<Vec<BallState>>,
    pub events: Vec<CollisionEvent>,
}

impl Trajectory {
    pub fn frames(&self) -> usize {
        self.states.len()
    }

    pub fn balls(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }
}

/// `flags[t][b]` is set iff ball `b` is within contact distance of another
/// ball at frame `t`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CollisionAnnotation {
    pub flags: Vec<Vec<bool>>,
}

impl CollisionAnnotation {
    pub fn colliding(&self, frame: usize, ball: usize) -> bool {
        self.flags[frame][ball]
    }

    pub fn any_at(&self, frame: usize) -> bool {
        self.flags[frame].iter().any(|&f| f)
    }
}

/// Flags balls whose centre distance to some other ball is at most
/// `r_b + r_c + tolerance`.
pub fn annotate_collisions(states: &[Vec<BallState>], tolerance: f64) -> CollisionAnnotation {
    let flags = states
        .iter()
        .map(|balls| {
            let mut row = vec![false; balls.len()];
            for i in 0..balls.len() {
                for j in (i + 1)..balls.len() {
                    let dx = balls[i].position[0] - balls[j].position[0];
                    let dy = balls[i].position[1] - balls[j].position[1];
                    let reach = balls[i].radius + balls[j].radius + tolerance;
                    if dx * dx + dy * dy <= reach * reach {
                        row[i] = true;
                        row[j] = true;
                    }
                }
            }
            row
        })
        .collect();
    CollisionAnnotation { flags }
}

/// Random non-overlapping initial state followed by `n_frames - 1` steps.
pub fn simulate(
    n_balls: usize,
    n_frames: usize,
    seed: u64,
    config: &SimConfig,
) -> Result<(Trajectory, CollisionAnnotation)> {
    config.validate()?;
    if n_balls == 0 {
        return Err(Error::Config("need at least one ball".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let initial = initial_state(n_balls, config, &mut rng)?;
    simulate_from(initial, n_frames, config)
}

/// Runs the dynamics from a given state. Frame 0 is `initial` itself.
pub fn simulate_from(
    initial: Vec<BallState>,
    n_frames: usize,
    config: &SimConfig,
) -> Result<(Trajectory, CollisionAnnotation)> {
    let mut balls = initial;
    let mut states = Vec::with_capacity(n_frames);
    let mut events = Vec::new();
    if n_frames > 0 {
        states.push(balls.clone());
    }
    for step in 0..n_frames.saturating_sub(1) {
        advance_frame(&mut balls, config.canvas, step, &mut events);
        states.push(balls.clone());
    }
    let annotation = annotate_collisions(&states, config.contact_tolerance);
    Ok((Trajectory { states, events }, annotation))
}

fn initial_state(n: usize, config: &SimConfig, rng: &mut ChaCha8Rng) -> Result<Vec<BallState>> {
    let r = config.radius;
    let hi = config.canvas - r;
    let mut balls: Vec<BallState> = Vec::with_capacity(n);
    let mut attempts = 0;
    while balls.len() < n {
        if attempts >= config.max_init_attempts {
            return Err(Error::Initialization { balls: n, attempts });
        }
        attempts += 1;
        let p = [rng.random_range(r..hi), rng.random_range(r..hi)];
        let clear = balls.iter().all(|b| {
            let dx = b.position[0] - p[0];
            let dy = b.position[1] - p[1];
            (dx * dx + dy * dy).sqrt() > b.radius + r
        });
        if !clear {
            continue;
        }
        let speed = if config.speed_max > config.speed_min {
            rng.random_range(config.speed_min..config.speed_max)
        } else {
            config.speed_min
        };
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        balls.push(BallState {
            position: p,
            velocity: [speed * angle.cos(), speed * angle.sin()],
            radius: r,
        });
    }
    Ok(balls)
}

#[derive(Debug, Clone, Copy)]
enum Contact {
    Wall { ball: usize, axis: usize },
    Pair(usize, usize),
}

fn advance_frame(balls: &mut [BallState], canvas: f64, step: usize, events: &mut Vec<CollisionEvent>) {
    let mut remaining = 1.0;
    for _ in 0..MAX_EVENTS_PER_FRAME {
        match next_contact(balls, canvas, remaining) {
            None => {
                drift(balls, remaining);
                return;
            }
            Some((tau, contact)) => {
                drift(balls, tau);
                remaining -= tau;
                match contact {
                    Contact::Wall { ball, axis } => {
                        let b = &mut balls[ball];
                        b.velocity[axis] = -b.velocity[axis];
                        b.position[axis] = b.position[axis].clamp(b.radius, canvas - b.radius);
                    }
                    Contact::Pair(i, j) => {
                        let before = [balls[i].velocity, balls[j].velocity];
                        resolve_pair(balls, i, j);
                        events.push(CollisionEvent {
                            step,
                            time: 1.0 - remaining,
                            pair: (i, j),
                            before,
                            after: [balls[i].velocity, balls[j].velocity],
                        });
                    }
                }
            }
        }
    }
    // Event budget exhausted: finish the step without further contacts.
    drift(balls, remaining);
}

fn drift(balls: &mut [BallState], dt: f64) {
    if dt <= 0.0 {
        return;
    }
    for b in balls {
        b.position[0] += b.velocity[0] * dt;
        b.position[1] += b.velocity[1] * dt;
    }
}

fn next_contact(balls: &[BallState], canvas: f64, horizon: f64) -> Option<(f64, Contact)> {
    let mut best: Option<(f64, Contact)> = None;
    let mut consider = |tau: f64, c: Contact| {
        if tau <= horizon && best.is_none_or(|(t, _)| tau < t) {
            best = Some((tau, c));
        }
    };

    for (idx, b) in balls.iter().enumerate() {
        for axis in 0..2 {
            let v = b.velocity[axis];
            let p = b.position[axis];
            let tau = if v > 0.0 {
                (canvas - b.radius - p) / v
            } else if v < 0.0 {
                (b.radius - p) / v
            } else {
                continue;
            };
            consider(tau.max(0.0), Contact::Wall { ball: idx, axis });
        }
    }

    for i in 0..balls.len() {
        for j in (i + 1)..balls.len() {
            let dp = [
                balls[j].position[0] - balls[i].position[0],
                balls[j].position[1] - balls[i].position[1],
            ];
            let dv = [
                balls[j].velocity[0] - balls[i].velocity[0],
                balls[j].velocity[1] - balls[i].velocity[1],
            ];
            let b = dp[0] * dv[0] + dp[1] * dv[1];
            if b >= 0.0 {
                // separating or relatively at rest
                continue;
            }
            let a = dv[0] * dv[0] + dv[1] * dv[1];
            let reach = balls[i].radius + balls[j].radius;
            let c = dp[0] * dp[0] + dp[1] * dp[1] - reach * reach;
            let disc = b * b - a * c;
            if disc < 0.0 {
                continue;
            }
            let tau = (-b - disc.sqrt()) / a;
            consider(tau.max(0.0), Contact::Pair(i, j));
        }
    }
    best
}

/// Equal-mass elastic collision: the velocity components along the line of
/// centres are exchanged, tangential components are kept.
fn resolve_pair(balls: &mut [BallState], i: usize, j: usize) {
    let dx = balls[j].position[0] - balls[i].position[0];
    let dy = balls[j].position[1] - balls[i].position[1];
    let dist = dx.hypot(dy);
    if dist == 0.0 {
        return;
    }
    let n = [dx / dist, dy / dist];
    let vi = balls[i].velocity;
    let vj = balls[j].velocity;
    let ui = vi[0] * n[0] + vi[1] * n[1];
    let uj = vj[0] * n[0] + vj[1] * n[1];
    balls[i].velocity = [vi[0] + (uj - ui) * n[0], vi[1] + (uj - ui) * n[1]];
    balls[j].velocity = [vj[0] + (ui - uj) * n[0], vj[1] + (ui - uj) * n[1]];
}
