use std::path::Path;

use image::DynamicImage;

use super::DataError;

/// Source taps and weight for one output coordinate under half-pixel-centre
/// bilinear sampling.
fn taps(out: usize, in_len: usize, out_len: usize) -> (usize, usize, f32) {
    let scale = in_len as f64 / out_len as f64;
    let src = (out as f64 + 0.5) * scale - 0.5;
    let fl = src.floor();
    let lo = fl.max(0.0) as usize;
    let hi = ((fl + 1.0).max(0.0) as usize).min(in_len - 1);
    (lo.min(in_len - 1), hi, (src - fl) as f32)
}

/// Bilinear resize of an HWC image with half-pixel centres and edge clamping.
pub fn resize_bilinear(x: &[f32], [h, w, c]: [usize; 3], out_h: usize, out_w: usize) -> Vec<f32> {
    if (h, w) == (out_h, out_w) {
        return x.to_vec();
    }
    let ys: Vec<_> = (0..out_h).map(|y| taps(y, h, out_h)).collect();
    let xs: Vec<_> = (0..out_w).map(|x| taps(x, w, out_w)).collect();
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for ch in 0..c {
                let p = |y: usize, xx: usize| x[(y * w + xx) * c + ch];
                let top = p(y0, x0) + (p(y0, x1) - p(y0, x0)) * fx;
                let bottom = p(y1, x0) + (p(y1, x1) - p(y1, x0)) * fx;
                out.push(top + (bottom - top) * fy);
            }
        }
    }
    out
}

/// RGB conversion (grayscale replicated), bilinear resize to `size`x`size`
/// and scaling to [0, 1]. Returns HWC data.
pub fn preprocess(img: &DynamicImage, size: usize) -> Vec<f32> {
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw: Vec<f32> = rgb.as_raw().iter().map(|&v| v as f32).collect();
    resize_bilinear(&raw, [h, w, 3], size, size)
        .into_iter()
        .map(|v| (v / 255.0).clamp(0.0, 1.0))
        .collect()
}

pub fn load_image(path: impl AsRef<Path>, size: usize) -> Result<Vec<f32>, DataError> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| DataError::Decode(vec![(path.to_path_buf(), e.to_string())]))?;
    Ok(preprocess(&img, size))
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, Luma, RgbImage};

    #[test]
    fn same_size_is_raw_over_255() {
        let img = RgbImage::from_fn(4, 4, |x, y| image::Rgb([(x * 60) as u8, (y * 70) as u8, 200]));
        let out = preprocess(&DynamicImage::ImageRgb8(img.clone()), 4);
        let want: Vec<f32> = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        assert_eq!(out, want);
    }

    #[test]
    fn constant_gray_becomes_point_two() {
        let img = GrayImage::from_pixel(10, 10, Luma([51]));
        let out = preprocess(&DynamicImage::ImageLuma8(img), 6);
        assert_eq!(out.len(), 6 * 6 * 3);
        assert!(out.iter().all(|&v| v == 51.0 / 255.0));
    }
}
