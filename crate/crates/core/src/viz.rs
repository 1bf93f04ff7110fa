//! Qualitative rollout strips and bar charts.

use std::fmt::Write as _;

use candle_core::{DType, Tensor};
use image::{Rgb, RgbImage};

use crate::config::WHERE_DIM;
use crate::dist::PresenceMode;
use crate::dynamics::Model;
use crate::error::{Error, Result};
use crate::glimpse::where_to_affine;
use crate::noise::Noise;
use crate::scene::{stack_frames, FrameSequence, SceneBatch};

/// One slot's window in pixel units, corners ordered clockwise from top-left.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotBox {
    pub slot: usize,
    pub corners: [[f64; 2]; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    /// `H × W` intensities.
    pub pixels: Vec<f32>,
    pub boxes: Vec<SlotBox>,
}

/// Two rows of `T` panels: observed frames with the posterior windows, then
/// reconstructions up to `context` frames followed by prior samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Strip {
    pub height: usize,
    pub width: usize,
    pub observed: Vec<Panel>,
    pub predicted: Vec<Panel>,
}

/// Windows of the present slots of row 0 of `scene`.
pub fn slot_boxes(scene: &SceneBatch, height: usize, width: usize) -> Result<Vec<SlotBox>> {
    let wh = scene.r#where.get(0)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let pres = scene.pres.get(0)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    boxes_from(&wh, &pres, height, width)
}

/// Boxes for slots with `pres > 0.5`; absent slots get none.
pub fn boxes_from(wh: &[Vec<f64>], pres: &[f64], height: usize, width: usize) -> Result<Vec<SlotBox>> {
    let mut out = Vec::new();
    for (slot, (w, &p)) in wh.iter().zip(pres).enumerate() {
        if p <= 0.5 {
            continue;
        }
        let z: [f64; WHERE_DIM] = w.as_slice().try_into().map_err(|_| Error::Shape("window width".into()))?;
        out.push(SlotBox { slot, corners: where_to_affine(&z)?.pixel_corners(height, width) });
    }
    Ok(out)
}

fn panel(image: &Tensor, scene: &SceneBatch, h: usize, w: usize) -> Result<Panel> {
    Ok(Panel {
        pixels: image.get(0)?.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?,
        boxes: slot_boxes(scene, h, w)?,
    })
}

pub fn rollout_strip(model: &Model, seq: &FrameSequence, context: usize, seed: u64) -> Result<Strip> {
    let t = seq.len();
    if context == 0 || context > t {
        return Err(Error::InvalidArgument(format!("context {context} must lie in 1..={t}")));
    }
    let (h, w) = (seq.height, seq.width);
    let frames = stack_frames(&[seq], t, model.dtype())?;
    let mut noise = Noise::new(seed, model.dtype());
    let full = model.filter_sequence(&frames, &mut noise, PresenceMode::Hard)?;
    let observed = (0..t)
        .map(|i| panel(&frames.get(0)?.narrow(0, i, 1)?, &full.scenes[i], h, w))
        .collect::<Result<Vec<_>>>()?;
    let prefix = model.filter_sequence(&frames.narrow(1, 0, context)?, &mut noise, PresenceMode::Hard)?;
    let mut predicted = (0..context)
        .map(|i| panel(&prefix.means[i], &prefix.scenes[i], h, w))
        .collect::<Result<Vec<_>>>()?;
    for (scene, mean) in model.rollout_prior(&prefix.scenes[context - 1], t - context, &mut noise)? {
        predicted.push(panel(&mean, &scene, h, w)?);
    }
    Ok(Strip { height: h, width: w, observed, predicted })
}

const PALETTE: [[u8; 3]; 4] = [[230, 60, 60], [60, 200, 80], [70, 120, 240], [240, 200, 40]];
const GAP: u32 = 2;

fn draw_line(img: &mut RgbImage, a: [f64; 2], b: [f64; 2], colour: Rgb<u8>) {
    let steps = ((b[0] - a[0]).abs().max((b[1] - a[1]).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let f = s as f64 / steps as f64;
        let (x, y) = (a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1]));
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, colour);
        }
    }
}

impl Strip {
    /// Renders the strip with each panel upscaled by `scale`.
    pub fn to_image(&self, scale: u32) -> RgbImage {
        let scale = scale.max(1);
        let (pw, ph) = (self.width as u32 * scale, self.height as u32 * scale);
        let cols = self.observed.len().max(self.predicted.len()) as u32;
        let mut img = RgbImage::from_pixel(cols * (pw + GAP), 2 * (ph + GAP), Rgb([40, 40, 40]));
        for (row, panels) in [&self.observed, &self.predicted].into_iter().enumerate() {
            for (col, p) in panels.iter().enumerate() {
                let (x0, y0) = (col as u32 * (pw + GAP), row as u32 * (ph + GAP));
                for y in 0..ph {
                    for x in 0..pw {
                        let v = p.pixels[(y / scale) as usize * self.width + (x / scale) as usize];
                        let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                        img.put_pixel(x0 + x, y0 + y, Rgb([g, g, g]));
                    }
                }
                for b in &p.boxes {
                    let colour = Rgb(PALETTE[b.slot % PALETTE.len()]);
                    let c = b.corners.map(|[x, y]| [x0 as f64 + x * scale as f64, y0 as f64 + y * scale as f64]);
                    for k in 0..4 {
                        draw_line(&mut img, c[k], c[(k + 1) % 4], colour);
                    }
                }
            }
        }
        img
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bar {
    pub label: String,
    pub mean: f64,
    pub std: f64,
}

/// Static SVG bar chart with ±1 std error bars.
pub fn bar_chart_svg(title: &str, bars: &[Bar]) -> String {
    let (w, h, margin) = (120.0 + 90.0 * bars.len() as f64, 320.0, 50.0);
    let lo = bars.iter().map(|b| b.mean - b.std).fold(0.0f64, f64::min);
    let hi = bars.iter().map(|b| b.mean + b.std).fold(0.0f64, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let y = |v: f64| margin + (hi - v) / span * (h - 2.0 * margin);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(s, r#"<line x1="{m}" y1="{z:.2}" x2="{x2}" y2="{z:.2}" stroke="black"/>"#, m = margin, z = y(0.0), x2 = w - 10.0);
    for (i, b) in bars.iter().enumerate() {
        let x = margin + 20.0 + 90.0 * i as f64;
        let (top, bottom) = (y(b.mean.max(0.0)), y(b.mean.min(0.0)));
        let _ = writeln!(
            s,
            r#"<rect x="{x}" y="{top:.2}" width="50" height="{:.2}" fill="{}"/>"#,
            bottom - top,
            ["#4c72b0", "#dd8452", "#55a868", "#c44e52"][i % 4]
        );
        let cx = x + 25.0;
        let (e0, e1) = (y(b.mean + b.std), y(b.mean - b.std));
        let _ = writeln!(s, r#"<line x1="{cx}" y1="{e0:.2}" x2="{cx}" y2="{e1:.2}" stroke="black"/>"#);
        for e in [e0, e1] {
            let _ = writeln!(s, r#"<line x1="{}" y1="{e:.2}" x2="{}" y2="{e:.2}" stroke="black"/>"#, cx - 8.0, cx + 8.0);
        }
        let _ = writeln!(s, r#"<text x="{cx}" y="{}" text-anchor="middle">{}</text>"#, h - 25.0, escape(&b.label));
        let _ = writeln!(s, r#"<text x="{cx}" y="{}" text-anchor="middle">{:.2}</text>"#, h - 10.0, b.mean);
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
