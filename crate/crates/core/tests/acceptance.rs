//! Acceptance suite. Prints one PASS/FAIL line per criterion and fails if any
//! gating criterion fails. Criterion 11 is reported only and runs when
//! `RSQAIR_FULL_ACCEPTANCE=1`.

mod common;

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use ballsim::seed::sequence_seed;
use ballsim::{generate_dataset, generate_split, simulate, BallCount, GenerateConfig, SimConfig, SplitSpec};
use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rsqair::air::geometric_logp;
use rsqair::dist::PresenceMode;
use rsqair::eval::{self, EvalConfig, MaskRule, MetricsReport};
use rsqair::glimpse::extract_glimpse;
use rsqair::nn::ParamStore;
use rsqair::noise::Noise;
use rsqair::relational::{count_params, InteractionNet, RelationalModule};
use rsqair::scene::{stack_frames, FrameSequence};
use rsqair::training::*;
use rsqair::{Model, ModelConfig, RelationalKind};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn run(id: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    });
    let secs = start.elapsed().as_secs_f64();
    match &outcome {
        Ok(detail) => println!("criterion {id:>2}: PASS ({detail}; {secs:.1}s)"),
        Err(detail) => println!("criterion {id:>2}: FAIL ({detail}; {secs:.1}s)"),
    }
    outcome.is_ok()
}

fn vec2(t: &Tensor) -> Vec<Vec<f64>> {
    t.to_dtype(DType::F64).unwrap().to_vec2::<f64>().unwrap()
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap()
}

// 1
fn sqair_recovery() -> Outcome {
    let seqs = common::balls_split(11, 100, 3, 4);
    let refs: Vec<&FrameSequence> = seqs.iter().collect();
    let frames = stack_frames(&refs, 4, DType::F32).unwrap();
    let start = Instant::now();
    let mut cfg = ModelConfig::default();
    cfg.relational.kind = RelationalKind::Identity;
    let model = Model::new(cfg, DType::F32, 5).unwrap();
    let mode = PresenceMode::StraightThrough { temperature: 0.5 };
    let a = model.filter_sequence(&frames, &mut Noise::new(3, DType::F32), mode).unwrap();
    let b = model.filter_sequence_baseline(&frames, &mut Noise::new(3, DType::F32), mode).unwrap();
    let (wa, wb) = (flat(&a.log_weights().unwrap()), flat(&b.log_weights().unwrap()));
    let same = wa.iter().zip(&wb).all(|(x, y)| x.to_bits() == y.to_bits());
    check(same && wa.len() == 400, "log-weights differ between the relational and baseline routes")?;
    let secs = start.elapsed().as_secs_f64();
    check(secs < 60.0, format!("took {secs:.1} s"))?;
    Ok(format!("{} log-weights bit-identical", wa.len()))
}

// 2
fn in_equivariance() -> Outcome {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for k in [2usize, 3, 4] {
        let mut cfg = ModelConfig::default();
        cfg.relational.kind = RelationalKind::In;
        let mut ps = ParamStore::new(DType::F32, 20 + k as u64);
        let module = RelationalModule::build(&mut ps, &cfg).unwrap();
        let n = 1000;
        let l = cfg.latent_dim();
        let latents: Vec<f32> = (0..n * k * l).map(|_| rng.random_range(-2.0..2.0)).collect();
        let pres: Vec<f32> = (0..n * k).map(|_| if rng.random_bool(0.7) { 1.0 } else { 0.0 }).collect();
        let mut perm_index = Vec::with_capacity(n * k);
        for row in 0..n {
            let mut p: Vec<u32> = (0..k as u32).collect();
            for i in (1..k).rev() {
                p.swap(i, rng.random_range(0..=i));
            }
            perm_index.extend(p.iter().map(|&j| (row * k) as u32 + j));
        }
        let z = Tensor::from_vec(latents, (n, k, l), &Device::Cpu).unwrap();
        let pr = Tensor::from_vec(pres, (n, k), &Device::Cpu).unwrap();
        let idx = Tensor::new(perm_index.as_slice(), &Device::Cpu).unwrap();
        let permute = |t: &Tensor| {
            let w = t.elem_count() / (n * k);
            t.reshape((n * k, w)).unwrap().index_select(&idx, 0).unwrap()
        };
        let g = module.forward(&z, &pr, None).unwrap().gamma;
        let z_p = permute(&z).reshape((n, k, l)).unwrap();
        let pr_p = permute(&pr.unsqueeze(2).unwrap()).reshape((n, k)).unwrap();
        let g_p = module.forward(&z_p, &pr_p, None).unwrap().gamma;
        let want = permute(&g);
        let got = g_p.reshape(want.shape()).unwrap();
        let dev = flat(&(got - want).unwrap().abs().unwrap()).into_iter().fold(0.0, f64::max);
        worst = worst.max(dev);
    }
    check(worst <= 1e-5, format!("max deviation {worst:e}"))?;
    Ok(format!("3000 sets, max deviation {worst:.1e}"))
}

// 3
fn param_counts() -> Outcome {
    let count = |kind: RelationalKind, k: usize| {
        let mut cfg = ModelConfig { slots: k, ..ModelConfig::default() };
        cfg.relational.kind = kind;
        let model = Model::new(cfg.clone(), DType::F32, 1).unwrap();
        // Run the module at this K so the count is taken from a working instance.
        let latents = Tensor::zeros((1, k, cfg.latent_dim()), DType::F32, &Device::Cpu).unwrap();
        let pres = Tensor::ones((1, k), DType::F32, &Device::Cpu).unwrap();
        let memory = model
            .relational()
            .memory_dim()
            .map(|m| Tensor::zeros((1, k, m), DType::F32, &Device::Cpu).unwrap());
        let out = model.relational().forward(&latents, &pres, memory.as_ref()).unwrap();
        assert_eq!(out.gamma.dims()[1], k);
        count_params(model.params())
    };
    let rmc: Vec<usize> = [2, 4, 8].iter().map(|&k| count(RelationalKind::Rmc, k)).collect();
    let inn: Vec<usize> = [2, 4, 8].iter().map(|&k| count(RelationalKind::In, k)).collect();
    let id = count(RelationalKind::Identity, 4);
    let rc = ModelConfig::default().relational;
    let closed = InteractionNet::expected_params(ModelConfig::default().latent_dim(), rc.in_embed, rc.in_hidden);
    check(rmc.iter().all(|&c| c == rmc[0]) && rmc[0] > 0, format!("rmc counts {rmc:?}"))?;
    check(inn.iter().all(|&c| c == closed), format!("in counts {inn:?}, closed form {closed}"))?;
    check(id == 0, format!("identity count {id}"))?;
    Ok(format!("rmc {} for K=2,4,8; in {closed}; identity 0", rmc[0]))
}

// 4
fn single_object_null_effect() -> Outcome {
    let cfg = ModelConfig::default();
    let mut ps = ParamStore::new(DType::F64, 4);
    let net = InteractionNet::build(&mut ps, "in", cfg.latent_dim(), 5, 32).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let l = cfg.latent_dim();
    let data: Vec<f64> = (0..4 * l).map(|_| rng.random_range(-1.0..1.0)).collect();
    let z = Tensor::from_vec(data.clone(), (1, 4, l), &Device::Cpu).unwrap();
    for present in 0..4 {
        let mut p = vec![0.0f64; 4];
        p[present] = 1.0;
        let pres = Tensor::from_vec(p, (1, 4), &Device::Cpu).unwrap();
        let gamma = net.forward(&z, &pres).unwrap().gamma.get(0).unwrap();
        let row = gamma.get(present).unwrap().to_vec1::<f64>().unwrap();
        check(row[..l] == data[present * l..(present + 1) * l], "latent part altered")?;
        check(row[l..].iter().all(|&e| e == 0.0), format!("effect {:?}", &row[l..]))?;
    }
    Ok("e_k = 0 exactly and γ_k = [z_k; 0] for each of 4 positions".into())
}

/// Central-difference check of `f` along random directions in the space of
/// `vars`. Returns the worst relative error.
fn grad_check(vars: &[Var], f: &dyn Fn() -> Tensor, directions: usize, seed: u64) -> f64 {
    let loss = f();
    let grads = loss.backward().unwrap();
    let base: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().copy().unwrap()).collect();
    let mut noise = Noise::new(seed, DType::F64);
    let eps = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..directions {
        let dirs: Vec<Tensor> = vars.iter().map(|v| noise.normal(v.dims()).unwrap()).collect();
        let analytic: f64 = vars
            .iter()
            .zip(&dirs)
            .map(|(v, d)| match grads.get(v.as_tensor()) {
                Some(g) => (g * d).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap(),
                None => 0.0,
            })
            .sum();
        let eval_at = |sign: f64| {
            for ((v, b), d) in vars.iter().zip(&base).zip(&dirs) {
                v.set(&(b + (d * (sign * eps)).unwrap()).unwrap()).unwrap();
            }
            f().to_scalar::<f64>().unwrap()
        };
        let numeric = (eval_at(1.0) - eval_at(-1.0)) / (2.0 * eps);
        for (v, b) in vars.iter().zip(&base) {
            v.set(b).unwrap();
        }
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    worst
}

fn weights_like(t: &Tensor, seed: u64) -> Tensor {
    Noise::new(seed, DType::F64).normal(t.dims()).unwrap()
}

fn params_with_prefix(ps: &ParamStore, prefix: &str) -> Vec<Var> {
    ps.vars().filter(|(n, _)| n.starts_with(prefix)).map(|(_, v)| v.clone()).collect()
}

// 5
fn gradient_checks() -> Outcome {
    let dirs = 20;
    let mut report = Vec::new();
    let dev = Device::Cpu;
    let cfg = common::tiny_config(RelationalKind::In);

    let mut ps = ParamStore::new(DType::F64, 50);
    let decoder = rsqair::air::Decoder::build(&mut ps, &cfg).unwrap();
    let what = Var::from_tensor(&Noise::new(1, DType::F64).normal(&[3, cfg.what_dim]).unwrap()).unwrap();
    let r = weights_like(&decoder.forward(what.as_tensor()).unwrap(), 2);
    let mut vars = params_with_prefix(&ps, "decoder");
    vars.push(what.clone());
    let e = grad_check(&vars, &|| (decoder.forward(what.as_tensor()).unwrap() * &r).unwrap().sum_all().unwrap(), dirs, 3);
    report.push(("decode_object", e));

    let frames = Var::from_tensor(&common::random_frames(5, (1, 3, 16, 16), DType::F64).squeeze(0).unwrap()).unwrap();
    let wh = Tensor::new(&[[0.6f64, 0.5, 0.1, -0.2], [0.35, 0.8, -0.3, 0.25], [0.9, 0.45, 0.05, 0.0]], &dev).unwrap();
    let wh = Var::from_tensor(&wh).unwrap();
    let r = weights_like(&Tensor::zeros((3, 6, 6), DType::F64, &dev).unwrap(), 6);
    let e = grad_check(
        &[frames.clone(), wh.clone()],
        &|| (extract_glimpse(frames.as_tensor(), wh.as_tensor(), 6).unwrap() * &r).unwrap().sum_all().unwrap(),
        dirs,
        7,
    );
    report.push(("extract_glimpse", e));

    let l = cfg.latent_dim();
    let pres = Tensor::new(&[[1.0f64, 1.0, 0.0, 1.0], [1.0, 0.0, 1.0, 1.0]], &dev).unwrap();
    let latents = Var::from_tensor(&Noise::new(8, DType::F64).normal(&[2, 4, l]).unwrap()).unwrap();
    for kind in [RelationalKind::In, RelationalKind::Rmc] {
        let cfg = common::tiny_config(kind);
        let mut ps = ParamStore::new(DType::F64, 9);
        let module = RelationalModule::build(&mut ps, &cfg).unwrap();
        let memory = module
            .memory_dim()
            .map(|m| Var::from_tensor(&Noise::new(10, DType::F64).normal(&[2, 4, m]).unwrap()).unwrap());
        let out = module.forward(latents.as_tensor(), &pres, memory.as_ref().map(|m| m.as_tensor())).unwrap();
        let rg = weights_like(&out.gamma, 11);
        let rm = out.memory.as_ref().map(|m| weights_like(m, 12));
        let mut vars = params_with_prefix(&ps, "relational");
        vars.push(latents.clone());
        vars.extend(memory.clone());
        let f = || {
            let out = module.forward(latents.as_tensor(), &pres, memory.as_ref().map(|m| m.as_tensor())).unwrap();
            let mut total = (out.gamma * &rg).unwrap().sum_all().unwrap();
            if let (Some(m), Some(r)) = (out.memory, rm.as_ref()) {
                total = (total + (m * r).unwrap().sum_all().unwrap()).unwrap();
            }
            total
        };
        let e = grad_check(&vars, &f, dirs, 13);
        report.push((if kind == RelationalKind::In { "gamma_in" } else { "gamma_rmc" }, e));
    }

    let model = Model::new(common::tiny_config(RelationalKind::In), DType::F64, 14).unwrap();
    let frames = common::random_frames(15, (2, 3, 16, 16), DType::F64);
    let vars: Vec<Var> = model.params().vars().map(|(_, v)| v.clone()).collect();
    let f = || {
        let mut noise = Noise::new(16, DType::F64);
        iwae_bound(&model, &frames, 2, &mut noise, PresenceMode::Relaxed { temperature: 0.5 }).unwrap().bound
    };
    let e = grad_check(&vars, &f, dirs, 17);
    report.push(("iwae_bound", e));

    let text: Vec<String> = report.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    check(report.iter().all(|(_, e)| *e <= 1e-3), format!("worst relative errors: {}", text.join(", ")))?;
    Ok(format!("{dirs} directions each; worst relative errors: {}", text.join(", ")))
}

// 6
fn geometric_normalization() -> Outcome {
    let mut worst = 0.0f64;
    for theta in [0.1, 0.5, 0.9] {
        let total: f64 = (0..=200).map(|n| geometric_logp(n, theta).unwrap().exp()).sum();
        worst = worst.max((total - 1.0).abs());
    }
    check(worst <= 1e-9, format!("max |Σ − 1| = {worst:e}"))?;
    Ok(format!("max |Σ − 1| = {worst:.1e}"))
}

// 7
fn curriculum_and_stopping() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..1_000_000u64 {
        let it = if i < 1000 { i * 10_000 + rng.random_range(0..2) * 9_999 } else { rng.random_range(0..200_000) };
        let want = (3 + it / 10_000).min(10) as usize;
        check(curriculum_length(it) == want, format!("iteration {it}: {} vs {want}", curriculum_length(it)))?;
    }
    let mut es = EarlyStopping::new(10);
    let mut fired_at = None;
    let scores = [-10.0, -8.0, -9.0, -8.0, -8.5, -8.0, -9.0, -8.2, -8.1, -8.0, -8.3, -8.0, -9.9, -8.0];
    for (epoch, &s) in scores.iter().enumerate() {
        if es.update(s) {
            fired_at = Some(epoch);
            break;
        }
    }
    // Best is reached at epoch 1; epochs 2..=11 do not improve on it.
    check(fired_at == Some(11), format!("early stopping fired at {fired_at:?}"))?;
    Ok("10^6 iterations match the closed form; stop after exactly 10 flat epochs".into())
}

/// Upper tail `P(X ≥ k)` of `Binomial(n, 1/2)`.
fn binomial_upper_tail(n: u64, k: u64) -> f64 {
    let ln_choose = |n: u64, r: u64| -> f64 {
        (1..=r).map(|i| ((n - r + i) as f64).ln() - (i as f64).ln()).sum()
    };
    (k..=n).map(|r| (ln_choose(n, r) - n as f64 * 2f64.ln()).exp()).sum()
}

// 8
fn iwae_properties() -> Outcome {
    let model = Model::new(common::tiny_config(RelationalKind::Identity), DType::F64, 8).unwrap();
    let frames = common::random_frames(9, (4, 3, 16, 16), DType::F64);
    let mode = PresenceMode::Hard;
    let one = iwae_bound(&model, &frames, 1, &mut Noise::new(1, DType::F64), mode).unwrap().bound;
    let elbo = model.filter_sequence(&frames, &mut Noise::new(1, DType::F64), mode).unwrap().total().unwrap();
    let (a, b) = (one.to_scalar::<f64>().unwrap(), elbo.mean_all().unwrap().to_scalar::<f64>().unwrap());
    check(a.to_bits() == b.to_bits(), format!("particles=1 bound {a} vs ELBO {b}"))?;

    // Each resample scores the same 4 sequences with 5 particles; the first
    // particle alone is the 1-sample estimate.
    let (resamples, seqs, chunk) = (1000usize, 4usize, 100usize);
    let mut wins = 0u64;
    let mut noise = Noise::new(2, DType::F64);
    for _ in 0..resamples / chunk {
        let tiled = frames.repeat((chunk, 1, 1, 1)).unwrap();
        let lw = vec2(&iwae_bound(&model, &tiled, 5, &mut noise, mode).unwrap().log_weights);
        for r in 0..chunk {
            let rows = &lw[r * seqs..(r + 1) * seqs];
            let iwae5: f64 = rows.iter().map(|w| lme(w)).sum::<f64>() / seqs as f64;
            let iwae1: f64 = rows.iter().map(|w| w[0]).sum::<f64>() / seqs as f64;
            wins += u64::from(iwae5 > iwae1);
        }
    }
    let p = binomial_upper_tail(resamples as u64, wins);
    check(p < 0.01, format!("IWAE_5 > IWAE_1 in {wins}/{resamples} resamples, p = {p:.3}"))?;
    Ok(format!("particles=1 equals ELBO bitwise; IWAE_5 > IWAE_1 in {wins}/{resamples}, sign test p = {p:.1e}"))
}

fn lme(w: &[f64]) -> f64 {
    let m = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + (w.iter().map(|v| (v - m).exp()).sum::<f64>() / w.len() as f64).ln()
}

fn brute_force_flags(positions: &[[f64; 2]], reach: f64) -> Vec<bool> {
    (0..positions.len())
        .map(|b| {
            (0..positions.len()).any(|c| {
                c != b && {
                    let dx = positions[b][0] - positions[c][0];
                    let dy = positions[b][1] - positions[c][1];
                    (dx * dx + dy * dy).sqrt() <= reach
                }
            })
        })
        .collect()
}

// 9
fn simulator_physics() -> Outcome {
    let sim = SimConfig::default();
    let (mut events, mut seed, mut worst) = (0usize, 0u64, 0.0f64);
    while events < 10_000 {
        let (traj, _) = simulate(8, 300, 1000 + seed, &sim).unwrap();
        for ev in &traj.events {
            let ke = |v: &[[f64; 2]; 2]| v.iter().map(|u| u[0] * u[0] + u[1] * u[1]).sum::<f64>();
            worst = worst.max((ke(&ev.before) - ke(&ev.after)).abs());
            for axis in 0..2 {
                worst = worst.max((ev.before[0][axis] + ev.before[1][axis] - ev.after[0][axis] - ev.after[1][axis]).abs());
            }
        }
        events += traj.events.len();
        seed += 1;
    }
    check(worst <= 1e-9, format!("conservation error {worst:e}"))?;

    // Re-simulate every sequence of a generated corpus through the generator's
    // seed rule and compare its stored flags with a pairwise-distance oracle.
    let config = GenerateConfig {
        seed: 9,
        frames: 10,
        splits: vec![SplitSpec { name: "train".into(), sequences: 1000, balls: BallCount::Fixed(4) }],
        physics: sim.clone(),
    };
    let ds = generate_split(&config, 0).unwrap();
    let reach = 2.0 * sim.radius + sim.contact_tolerance;
    let mut frames_checked = 0;
    for (i, rec) in ds.sequences.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(sequence_seed(config.seed, 0, i as u32));
        let (traj, _) = simulate(4, 10, rng.random(), &sim).unwrap();
        for (t, state) in traj.states.iter().enumerate() {
            let positions: Vec<[f64; 2]> = state.iter().map(|b| b.position).collect();
            for (b, &want) in brute_force_flags(&positions, reach).iter().enumerate() {
                check(rec.colliding(&ds.header, t, b) == want, format!("sequence {i} frame {t} ball {b}"))?;
                let stored = rec.ball_state(&ds.header, t, b);
                check(stored[0] == positions[b][0] as f32, format!("sequence {i} does not re-simulate"))?;
            }
            frames_checked += 1;
        }
    }
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let small = GenerateConfig {
        splits: vec![SplitSpec { name: "train".into(), sequences: 50, balls: BallCount::Fixed(4) }],
        ..config
    };
    generate_dataset(&small, a.path(), false).unwrap();
    generate_dataset(&small, b.path(), false).unwrap();
    for file in ["train.rsqb", "manifest.json"] {
        let (x, y) = (std::fs::read(a.path().join(file)).unwrap(), std::fs::read(b.path().join(file)).unwrap());
        check(x == y, format!("{file} differs between runs"))?;
    }
    Ok(format!("{events} collisions conserve to {worst:.1e}; {frames_checked} frames match the oracle; byte-reproducible"))
}

/// Training bound averaged over steps `from..=to` (1-based).
fn window(bounds: &[f64], from: usize, to: usize) -> f64 {
    bounds[from - 1..to].iter().sum::<f64>() / (to - from + 1) as f64
}

/// Smoke configuration shared by criteria 10 and 11.
fn smoke_config(kind: RelationalKind, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig { seed, log_every: 0, checkpoint_every: 0, ..TrainConfig::default() };
    cfg.model.relational.kind = kind;
    cfg.iwae.learning_rate = 1e-3;
    cfg
}

fn smoke_train(kind: RelationalKind, seed: u64, balls: u8, run_dir: &std::path::Path) -> (Trainer, Vec<f64>) {
    let data = common::balls_split(100 + seed, 2064, balls, 3);
    let (train, val) = data.split_at(2000);
    let mut trainer = Trainer::new(smoke_config(kind, seed), train.to_vec(), val.to_vec(), run_dir).unwrap();
    let bounds = (0..3000).map(|_| trainer.step().unwrap().bound).collect();
    (trainer, bounds)
}

// 10. The trained model is also probed with blank frames; that result is
// reported on its own line through `blank`.
fn smoke_training(blank: &mut Option<Outcome>) -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let (trainer, bounds) = smoke_train(RelationalKind::Identity, 0, 2, dir.path());
    let val = common::balls_split(999, 200, 2, 3);
    let refs: Vec<&FrameSequence> = val.iter().collect();
    let model = trainer.model();
    let frames = stack_frames(&refs, 3, model.dtype()).unwrap();
    let out = model.filter_sequence(&frames, &mut Noise::new(5, model.dtype()), PresenceMode::Hard).unwrap();
    let means = Tensor::stack(&out.means, 1).unwrap();
    let mse = flat(&(means - &frames).unwrap().sqr().unwrap().mean_all().unwrap())[0];
    let secs = start.elapsed().as_secs_f64();
    // A trained model should not claim an object in an empty frame. On an
    // empty scene the first discovery step fills slot 0.
    let empty = Tensor::zeros((16, 50, 50), model.dtype(), &Device::Cpu).unwrap();
    let (scene, _, _) = model.infer_scene(&empty, &mut Noise::new(6, model.dtype()), PresenceMode::Hard).unwrap();
    let first = scene.posterior.pres_prob.narrow(1, 0, 1).unwrap().max_all().unwrap();
    let blank_pres = flat(&first)[0];
    let blank_detail = format!("first-step presence probability on blank frames {blank_pres:.3}, limit 0.5");
    *blank = Some(if blank_pres < 0.5 { Ok(blank_detail) } else { Err(blank_detail) });
    let early = window(&bounds, 91, 110);
    let late = window(&bounds, 2901, 3000);
    let gain = (late - early) / early.abs();
    let detail = format!(
        "bound {early:.1} (steps 91-110) → {late:.1} (steps 2901-3000), gain {:.0}%; val MSE {mse:.4}; {:.0} s",
        100.0 * gain,
        secs
    );
    check(gain >= 0.2 && mse <= 0.01 && secs <= 1800.0, detail.clone())?;
    Ok(detail)
}

// 11
fn directional_relational() -> Outcome {
    let test = common::balls_split(777, 300, 3, 3);
    let cfg = EvalConfig::default();
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..3u64 {
        let mut score = HashMap::new();
        for kind in [RelationalKind::In, RelationalKind::Identity] {
            let dir = tempfile::tempdir().unwrap();
            let (trainer, _) = smoke_train(kind, seed, 3, dir.path());
            let v = eval::relational_loglik(trainer.model(), &test, &cfg).unwrap().unwrap_or(f64::NAN);
            score.insert(kind, v);
        }
        let (r, b) = (score[&RelationalKind::In], score[&RelationalKind::Identity]);
        wins += usize::from(r >= b);
        lines.push(format!("seed {seed}: in {r:.2} vs identity {b:.2}"));
    }
    let detail = format!("{}; in ≥ identity in {wins}/3", lines.join("; "));
    check(wins >= 2, detail.clone())?;
    Ok(detail)
}

fn sha_of_dir(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    files.iter().map(|p| (p.display().to_string(), std::fs::read(p).unwrap())).collect()
}

// 12
fn eval_integrity() -> Outcome {
    let seqs = common::balls_split(12, 40, 4, 4);
    let run = tempfile::tempdir().unwrap();
    let mut tcfg = TrainConfig { log_every: 0, checkpoint_every: 0, ..TrainConfig::default() };
    tcfg.model.relational.kind = RelationalKind::In;
    tcfg.iwae.batch_size = 4;
    tcfg.iwae.particles = 2;
    let mut trainer = Trainer::new(tcfg, seqs[..8].to_vec(), seqs[8..12].to_vec(), run.path()).unwrap();
    trainer.step().unwrap();
    let ckpt = trainer.save_checkpoint().unwrap();
    let before = sha_of_dir(&ckpt);

    let (model, manifest) = load_model(&ckpt).unwrap();
    let cfg = EvalConfig { samples: 3, seed: 4, ..EvalConfig::default() };
    let data = eval::data_loglik(&model, &seqs, &cfg).unwrap();
    let full = eval::relational_loglik_with(&model, &seqs, &cfg, MaskRule::All).unwrap().unwrap();
    check(data.to_bits() == full.to_bits(), format!("all-ones mask {full} vs data {data}"))?;

    let (other, _) = load_model(&ckpt).unwrap();
    let info = eval::CheckpointInfo { path: ckpt.display().to_string(), model: manifest.model.clone(), weights_sha256: manifest.weights_sha256.clone() };
    let report = eval::evaluate_protocol(&[(&model, info.clone()), (&other, info)], &seqs, "test", &cfg).unwrap();
    let text = serde_json::to_string(&report).unwrap();
    let parsed: MetricsReport = serde_json::from_str(&text).unwrap();
    for agg in [&parsed.data_ll, &parsed.relational_ll] {
        let v: Vec<f64> = agg.raw.iter().map(|r| r.value).collect();
        if v.is_empty() {
            continue;
        }
        let mut sum = 0.0;
        for x in &v {
            sum += x;
        }
        let mean = sum / v.len() as f64;
        let mut ss = 0.0;
        for x in &v {
            ss += (x - mean) * (x - mean);
        }
        let std = (ss / (v.len() - 1) as f64).sqrt();
        check(Some(mean) == agg.mean && Some(std) == agg.std, "aggregates differ from a recomputation")?;
    }
    check(parsed.data_ll.raw.len() == 6, format!("{} raw values", parsed.data_ll.raw.len()))?;
    check(sha_of_dir(&ckpt) == before, "checkpoint files changed during evaluation")?;
    check(model.params().checksum().unwrap() == manifest.weights_sha256, "weights changed during evaluation")?;
    Ok("all-ones mask equals data LL bitwise; aggregates recomputed from persisted raw values; checkpoint unchanged".into())
}

#[test]
fn acceptance() {
    let full = std::env::var("RSQAIR_FULL_ACCEPTANCE").is_ok_and(|v| v == "1");
    let gating: Vec<(&str, fn() -> Outcome)> = vec![
        ("1", sqair_recovery),
        ("2", in_equivariance),
        ("3", param_counts),
        ("4", single_object_null_effect),
        ("5", gradient_checks),
        ("6", geometric_normalization),
        ("7", curriculum_and_stopping),
        ("8", iwae_properties),
        ("9", simulator_physics),
        ("12", eval_integrity),
    ];
    let mut failed = Vec::new();
    for (id, f) in gating {
        if !run(id, f) {
            failed.push(id);
        }
    }
    let mut blank = None;
    if !run("10", || smoke_training(&mut blank)) {
        failed.push("10");
    }
    let blank = blank.unwrap_or_else(|| Err("smoke training did not finish".into()));
    if !run("10b", || blank) {
        failed.push("10b");
    }
    if full {
        run("11", directional_relational);
    } else {
        println!("criterion 11: SKIP (non-gating; set RSQAIR_FULL_ACCEPTANCE=1 to run)");
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
