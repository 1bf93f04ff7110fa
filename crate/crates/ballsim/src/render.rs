use crate::error::{Error, Result};
use crate::physics::BallState;

pub const RAW_SIZE: usize = 64;
pub const CROP_SIZE: usize = 50;
/// First kept row/column of the raw frame; the crop spans rows and columns
/// `CROP_OFFSET..CROP_OFFSET + CROP_SIZE` (7..=56).
pub const CROP_OFFSET: usize = (RAW_SIZE - CROP_SIZE) / 2;

/// Coverage values are snapped to this dyadic grid before compositing, which
/// makes the per-pixel sum exact and therefore independent of ball order.
const COVERAGE_GRID: f64 = (1u64 << 20) as f64;

/// Rasterizes white discs on a black `RAW_SIZE`² canvas, row-major.
///
/// Pixel `(row, col)` has its centre at `(col + 0.5, row + 0.5)`. Edge pixels
/// get a linear coverage ramp of one pixel width; overlapping discs add and
/// saturate at 1.
pub fn render_frame(balls: &[BallState]) -> Vec<f64> {
    render_frame_sized(balls, RAW_SIZE)
}

pub fn render_frame_sized(balls: &[BallState], size: usize) -> Vec<f64> {
    let mut canvas = vec![0.0f64; size * size];
    for b in balls {
        let reach = b.radius + 0.5;
        let lo_x = ((b.position[0] - reach).floor().max(0.0)) as usize;
        let hi_x = ((b.position[0] + reach).ceil().max(0.0) as usize).min(size);
        let lo_y = ((b.position[1] - reach).floor().max(0.0)) as usize;
        let hi_y = ((b.position[1] + reach).ceil().max(0.0) as usize).min(size);
        for row in lo_y..hi_y {
            for col in lo_x..hi_x {
                let dx = col as f64 + 0.5 - b.position[0];
                let dy = row as f64 + 0.5 - b.position[1];
                let cover = (reach - dx.hypot(dy)).clamp(0.0, 1.0);
                canvas[row * size + col] += (cover * COVERAGE_GRID).round() / COVERAGE_GRID;
            }
        }
    }
    for v in &mut canvas {
        *v = v.min(1.0);
    }
    canvas
}

/// Keeps the central `CROP_SIZE`² window of a `RAW_SIZE`² frame.
pub fn crop_center(frame: &[f64]) -> Result<Vec<f64>> {
    if frame.len() != RAW_SIZE * RAW_SIZE {
        return Err(Error::FrameShape { expected: RAW_SIZE, len: frame.len() });
    }
    let mut out = Vec::with_capacity(CROP_SIZE * CROP_SIZE);
    for row in CROP_OFFSET..CROP_OFFSET + CROP_SIZE {
        let start = row * RAW_SIZE + CROP_OFFSET;
        out.extend_from_slice(&frame[start..start + CROP_SIZE]);
    }
    Ok(out)
}

/// Embeds a cropped frame back into a zero `RAW_SIZE`² canvas.
pub fn pad_back(crop: &[f64]) -> Result<Vec<f64>> {
    if crop.len() != CROP_SIZE * CROP_SIZE {
        return Err(Error::FrameShape { expected: CROP_SIZE, len: crop.len() });
    }
    let mut out = vec![0.0; RAW_SIZE * RAW_SIZE];
    for row in 0..CROP_SIZE {
        let dst = (row + CROP_OFFSET) * RAW_SIZE + CROP_OFFSET;
        out[dst..dst + CROP_SIZE].copy_from_slice(&crop[row * CROP_SIZE..(row + 1) * CROP_SIZE]);
    }
    Ok(out)
}

/// Intensity quantization used by the dataset container.
pub fn quantize(pixel: f64) -> u8 {
    (255.0 * pixel.clamp(0.0, 1.0)).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ball(x: f64, y: f64, r: f64) -> BallState {
        BallState { position: [x, y], velocity: [0.0, 0.0], radius: r }
    }

    #[test]
    fn empty_scene_is_black() {
        assert!(render_frame(&[]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn centred_disc_area() {
        for r in [3.0, 6.0, 10.0] {
            let frame = render_frame(&[ball(32.0, 32.0, r)]);
            let area: f64 = frame.iter().sum();
            let expected = std::f64::consts::PI * r * r;
            assert!((area - expected).abs() / expected < 0.05, "r={r}: {area} vs {expected}");
        }
    }

    #[test]
    fn ball_order_does_not_matter() {
        let a = ball(20.3, 30.1, 6.0);
        let b = ball(27.9, 33.4, 6.0);
        let c = ball(24.2, 24.8, 6.0);
        assert_eq!(render_frame(&[a, b, c]), render_frame(&[c, a, b]));
        assert_eq!(render_frame(&[a, b, c]), render_frame(&[b, c, a]));
    }

    #[test]
    fn values_in_unit_range() {
        let frame = render_frame(&[ball(30.0, 30.0, 6.0), ball(34.0, 30.0, 6.0)]);
        assert!(frame.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(frame[30 * RAW_SIZE + 32], 1.0);
    }

    #[test]
    fn crop_constant_frame() {
        let crop = crop_center(&vec![0.25; RAW_SIZE * RAW_SIZE]).unwrap();
        assert_eq!(crop.len(), CROP_SIZE * CROP_SIZE);
        assert!(crop.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn crop_moves_delta() {
        let mut frame = vec![0.0; RAW_SIZE * RAW_SIZE];
        frame[31 * RAW_SIZE + 31] = 1.0;
        let crop = crop_center(&frame).unwrap();
        assert_eq!(crop[24 * CROP_SIZE + 24], 1.0);
        assert_eq!(crop.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn crop_rejects_wrong_shape() {
        assert!(matches!(crop_center(&[0.0; 10]), Err(Error::FrameShape { .. })));
        assert!(pad_back(&[0.0; 10]).is_err());
    }

    #[test]
    fn crop_of_padded_is_identity() {
        let crop: Vec<f64> = (0..CROP_SIZE * CROP_SIZE).map(|i| (i % 17) as f64 / 16.0).collect();
        assert_eq!(crop_center(&pad_back(&crop).unwrap()).unwrap(), crop);
    }
}
