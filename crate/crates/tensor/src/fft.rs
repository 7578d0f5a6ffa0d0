//! Real 2-D discrete Fourier transforms over the last two axes.
//!
//! Convention: the forward transform is unnormalized,
//! `X[u,v] = sum_{i,j} x[i,j] exp(-2 pi i (u i / H + v j / W))`, and only the
//! half spectrum `v in 0..W/2+1` is kept. The inverse carries the `1/(HW)`
//! factor and reads the half spectrum as Hermitian: interior columns count
//! twice, the DC column (and the Nyquist column when `W` is even) once, and
//! imaginary parts that cannot survive Hermitian symmetry are dropped.
//!
//! The stacked layout used by the autodiff ops stores a `(B, C, H, W)` map's
//! spectrum as `(B, 2C, H, W/2+1)`: real parts in channels `0..C`, imaginary
//! parts in channels `C..2C`.

use num_complex::Complex;

use crate::{Scalar, Tensor};

pub fn half_width(w: usize) -> usize {
    w / 2 + 1
}

/// Multiplicity of half-spectrum column `v` in the full spectrum.
pub fn column_weight(v: usize, w: usize) -> usize {
    if v == 0 || (w % 2 == 0 && v == w / 2) {
        1
    } else {
        2
    }
}

fn fft_in_place<T: Scalar>(buf: &mut [Complex<T>], len: usize, inverse: bool) {
    if len > 1 {
        T::fft_plan(len, inverse).process(buf);
    }
}

/// Half spectrum of one `h x w` real plane, row-major `h x (w/2+1)`.
pub fn rfft2_plane<T: Scalar>(plane: &[T], h: usize, w: usize) -> Vec<Complex<T>> {
    let wf = half_width(w);
    let mut rows: Vec<Complex<T>> = plane.iter().map(|&v| Complex::new(v, T::zero())).collect();
    for r in rows.chunks_mut(w) {
        fft_in_place(r, w, false);
    }
    let mut out = vec![Complex::new(T::zero(), T::zero()); h * wf];
    let mut col = vec![Complex::new(T::zero(), T::zero()); h];
    for v in 0..wf {
        for u in 0..h {
            col[u] = rows[u * w + v];
        }
        fft_in_place(&mut col, h, false);
        for u in 0..h {
            out[u * wf + v] = col[u];
        }
    }
    out
}

/// Real plane from a half spectrum (`h x (w/2+1)`).
pub fn irfft2_plane<T: Scalar>(spec: &[Complex<T>], h: usize, w: usize) -> Vec<T> {
    let wf = half_width(w);
    debug_assert_eq!(spec.len(), h * wf);
    let zero = Complex::new(T::zero(), T::zero());
    let mut full = vec![zero; h * w];
    let mut col = vec![zero; h];
    for v in 0..wf {
        let m = T::lit(column_weight(v, w) as f64);
        for u in 0..h {
            col[u] = spec[u * wf + v] * m;
        }
        fft_in_place(&mut col, h, true);
        for u in 0..h {
            full[u * w + v] = col[u];
        }
    }
    let scale = T::one() / T::lit((h * w) as f64);
    let mut out = Vec::with_capacity(h * w);
    for r in full.chunks_mut(w) {
        fft_in_place(r, w, true);
        out.extend(r.iter().map(|c| c.re * scale));
    }
    out
}

/// `(B, C, H, W)` real map to `(B, 2C, H, W/2+1)` stacked spectrum.
pub fn rfft2_stacked<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (b, c, h, w) = x.dims4();
    let wf = half_width(w);
    let plane = h * wf;
    let mut out = vec![T::zero(); b * 2 * c * plane];
    for bi in 0..b {
        for ci in 0..c {
            let src = &x.data()[((bi * c + ci) * h) * w..((bi * c + ci + 1) * h) * w];
            let spec = rfft2_plane(src, h, w);
            let re = (bi * 2 * c + ci) * plane;
            let im = (bi * 2 * c + c + ci) * plane;
            for (k, z) in spec.iter().enumerate() {
                out[re + k] = z.re;
                out[im + k] = z.im;
            }
        }
    }
    Tensor::new(&[b, 2 * c, h, wf], out)
}

/// `(B, 2C, H, W/2+1)` stacked spectrum to `(B, C, H, W)` real map.
pub fn irfft2_stacked<T: Scalar>(z: &Tensor<T>, w: usize) -> Tensor<T> {
    let (b, c2, h, wf) = z.dims4();
    assert!(c2 % 2 == 0, "stacked spectrum needs an even channel count");
    assert_eq!(wf, half_width(w), "spectrum width {wf} inconsistent with output width {w}");
    let c = c2 / 2;
    let plane = h * wf;
    let mut out = vec![T::zero(); b * c * h * w];
    let mut spec = vec![Complex::new(T::zero(), T::zero()); plane];
    for bi in 0..b {
        for ci in 0..c {
            let re = &z.data()[(bi * c2 + ci) * plane..(bi * c2 + ci + 1) * plane];
            let im = &z.data()[(bi * c2 + c + ci) * plane..(bi * c2 + c + ci + 1) * plane];
            for k in 0..plane {
                spec[k] = Complex::new(re[k], im[k]);
            }
            let y = irfft2_plane(&spec, h, w);
            out[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w].copy_from_slice(&y);
        }
    }
    Tensor::new(&[b, c, h, w], out)
}

/// Per-column factor tensor shaped like a stacked spectrum.
pub fn column_factor<T: Scalar>(shape: &[usize], w: usize, f: impl Fn(usize) -> f64) -> Tensor<T> {
    let wf = shape[3];
    Tensor::from_fn(shape, |i| T::lit(f(column_weight(i % wf, w))))
}
