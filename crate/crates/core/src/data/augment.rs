use rand::Rng;
use serde::{Deserialize, Serialize};

/// Random training-time transforms. Ranges are inclusive bounds of uniform
/// draws; collapsing every range to its identity disables augmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub rotation_degrees: f64,
    pub flip_probability: f64,
    /// Maximum shift as a fraction of each dimension.
    pub shift: f64,
    pub zoom: [f64; 2],
    pub brightness: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotation_degrees: 25.0,
            flip_probability: 0.5,
            shift: 0.15,
            zoom: [0.8, 1.2],
            brightness: [0.8, 1.2],
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        AugmentConfig {
            rotation_degrees: 0.0,
            flip_probability: 0.0,
            shift: 0.0,
            zoom: [1.0, 1.0],
            brightness: [1.0, 1.0],
        }
    }
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

/// Affine warp (rotation, shift, zoom about the centre, bilinear sampling,
/// nearest-edge fill), then horizontal flip, then brightness scaling clamped
/// to [0, 1]. Every draw is taken on every call, so the RNG advances by the
/// same amount regardless of the configuration.
pub fn augment(x: &[f32], [h, w, c]: [usize; 3], cfg: &AugmentConfig, rng: &mut impl Rng) -> Vec<f32> {
    let theta = uniform(rng, -cfg.rotation_degrees, cfg.rotation_degrees).to_radians();
    let ty = uniform(rng, -cfg.shift, cfg.shift) * h as f64;
    let tx = uniform(rng, -cfg.shift, cfg.shift) * w as f64;
    let zoom = uniform(rng, cfg.zoom[0], cfg.zoom[1]);
    let flip = rng.gen::<f64>() < cfg.flip_probability;
    let bright = uniform(rng, cfg.brightness[0], cfg.brightness[1]);

    let mut out = if theta == 0.0 && tx == 0.0 && ty == 0.0 && zoom == 1.0 {
        x.to_vec()
    } else {
        warp(x, [h, w, c], theta, ty, tx, zoom)
    };
    if flip {
        for row in out.chunks_mut(w * c) {
            for xx in 0..w / 2 {
                for ch in 0..c {
                    row.swap(xx * c + ch, (w - 1 - xx) * c + ch);
                }
            }
        }
    }
    if bright != 1.0 {
        out.iter_mut().for_each(|v| *v = (*v * bright as f32).clamp(0.0, 1.0));
    }
    out
}

/// Inverse-maps each output pixel into the source image.
fn warp(x: &[f32], [h, w, c]: [usize; 3], theta: f64, ty: f64, tx: f64, zoom: f64) -> Vec<f32> {
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = theta.sin_cos();
    let mut out = vec![0f32; h * w * c];
    for oy in 0..h {
        for ox in 0..w {
            let (dy, dx) = (oy as f64 - cy - ty, ox as f64 - cx - tx);
            let sy = (cos * dy - sin * dx) / zoom + cy;
            let sx = (sin * dy + cos * dx) / zoom + cx;
            let sy = sy.clamp(0.0, (h - 1) as f64);
            let sx = sx.clamp(0.0, (w - 1) as f64);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = ((sy - y0 as f64) as f32, (sx - x0 as f64) as f32);
            for ch in 0..c {
                let p = |y: usize, xx: usize| x[(y * w + xx) * c + ch];
                let top = p(y0, x0) + (p(y0, x1) - p(y0, x0)) * fx;
                let bottom = p(y1, x0) + (p(y1, x1) - p(y1, x0)) * fx;
                out[(oy * w + ox) * c + ch] = top + (bottom - top) * fy;
            }
        }
    }
    out
}
