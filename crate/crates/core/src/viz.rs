//! Feature maps of the inverse-FFT stage of Fourier Units.

use std::path::Path;

use fcf_tensor::{Scalar, Tape, Tensor};
use image::{GrayImage, Luma};

use crate::error::{FcfError, Result};
use crate::generator::Generator;
use crate::nn::Ctx;

/// Pixels between tiles.
pub const TILE_GAP: u32 = 1;

/// Activations `(C, H, W)` of the first batch item at a Fourier Unit site.
pub fn capture_site<T: Scalar>(
    gen: &Generator<T>,
    images: &Tensor<T>,
    masks: &Tensor<T>,
    z: &Tensor<T>,
    selector: &str,
) -> Result<Tensor<T>> {
    let sites = gen.fourier_sites();
    if !sites.iter().any(|s| s == selector) {
        return Err(FcfError::UnknownSelector {
            selector: selector.to_string(),
            available: sites,
        });
    }
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &gen.params, false).with_capture();
    tape.no_grad(|| gen.forward(&ctx, images, masks, tape.constant(z.clone())))?;
    let mut cap = ctx.take_capture();
    let t = cap
        .values
        .remove(selector)
        .ok_or_else(|| FcfError::Invalid(format!("site `{selector}` was not reached")))?;
    let s = t.shape().to_vec();
    Ok(t.narrow(0, 0, 1).reshape(&s[1..]))
}

/// Each channel min-max scaled to `[0, 1]`; constant channels map to zero.
pub fn normalize_channels<T: Scalar>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    let s = t.shape();
    let hw = s[1] * s[2];
    t.data()
        .chunks(hw)
        .map(|c| {
            let v: Vec<f64> = c.iter().map(|x| x.to_f64_lossy()).collect();
            let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let span = hi - lo;
            v.iter().map(|x| if span > 0.0 { (x - lo) / span } else { 0.0 }).collect()
        })
        .collect()
}

/// Square-ish grayscale grid with one `H x W` tile per channel.
pub fn feature_grid<T: Scalar>(t: &Tensor<T>) -> GrayImage {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1] as u32, s[2] as u32);
    let cols = (c as f64).sqrt().ceil() as u32;
    let rows = (c as u32).div_ceil(cols);
    let mut img = GrayImage::new(cols * (w + TILE_GAP) - TILE_GAP, rows * (h + TILE_GAP) - TILE_GAP);
    for (k, ch) in normalize_channels(t).iter().enumerate() {
        let (ox, oy) = ((k as u32 % cols) * (w + TILE_GAP), (k as u32 / cols) * (h + TILE_GAP));
        for y in 0..h {
            for x in 0..w {
                let v = ch[(y * w + x) as usize];
                img.put_pixel(ox + x, oy + y, Luma([(v * 255.0).round().clamp(0.0, 255.0) as u8]));
            }
        }
    }
    img
}

pub fn write_feature_grid<T: Scalar>(t: &Tensor<T>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| FcfError::file(dir, e))?;
    }
    feature_grid(t).save(path).map_err(|e| FcfError::file(path, e))
}
