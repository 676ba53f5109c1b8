use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::DataError;

/// Base patterns; every one is distinguishable under small rotations,
/// shifts, zooms and horizontal flips.
const PATTERNS: &[&str] = &["disk", "ring", "hbars", "vbars", "cross", "corners"];

pub fn synth_class_name(k: usize) -> String {
    let base = PATTERNS[k % PATTERNS.len()];
    match k / PATTERNS.len() {
        0 => base.to_string(),
        v => format!("{base}_{v}"),
    }
}

/// Pattern membership at normalized offset `(u, v)` from the shape centre.
fn inside(pattern: usize, u: f64, v: f64, r: f64) -> bool {
    let d = (u * u + v * v).sqrt();
    match pattern {
        0 => d < r,
        1 => (d - r).abs() < 0.12,
        2 => u.abs() < r && v.abs() < r && (v / r * 2.5 * std::f64::consts::PI).cos() > 0.0,
        3 => u.abs() < r && v.abs() < r && (u / r * 2.5 * std::f64::consts::PI).cos() > 0.0,
        4 => d < r * 1.2 && (u.abs() < 0.12 || v.abs() < 0.12),
        _ => [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)]
            .iter()
            .any(|(a, b)| ((u - a * r * 0.7).powi(2) + (v - b * r * 0.7).powi(2)).sqrt() < r * 0.35),
    }
}

fn render(k: usize, size: usize, rng: &mut ChaCha8Rng) -> GrayImage {
    let pattern = k % PATTERNS.len();
    let variant = k / PATTERNS.len();
    let r = rng.gen_range(0.45..0.65);
    let (cx, cy) = (rng.gen_range(-0.12..0.12), rng.gen_range(-0.12..0.12));
    let fg = rng.gen_range(0.65..0.95) - 0.12 * variant as f64;
    let bg = rng.gen_range(0.05..0.2);
    let s = size as f64;
    GrayImage::from_fn(size as u32, size as u32, |x, y| {
        let u = (x as f64 + 0.5) / s * 2.0 - 1.0 - cx;
        let v = (y as f64 + 0.5) / s * 2.0 - 1.0 - cy;
        let base = if inside(pattern, u, v, r) { fg } else { bg };
        let val = base + rng.gen_range(-0.08..0.08);
        Luma([(val.clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}

/// Writes `out/<class>/img_NNNN.png` for `classes` procedurally generated
/// classes of `per_class` grayscale images each.
pub fn synth_dataset(out: impl AsRef<Path>, classes: usize, per_class: usize, size: usize, seed: u64) -> Result<PathBuf, DataError> {
    if classes < 2 {
        return Err(DataError::TooFewClasses(classes));
    }
    let out = out.as_ref();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 0..classes {
        let dir = out.join(synth_class_name(k));
        fs::create_dir_all(&dir).map_err(|source| DataError::Io { path: dir.clone(), source })?;
        for i in 0..per_class {
            let path = dir.join(format!("img_{i:04}.png"));
            render(k, size, &mut rng)
                .save(&path)
                .map_err(|source| DataError::Encode { path, source })?;
        }
    }
    Ok(out.to_path_buf())
}
