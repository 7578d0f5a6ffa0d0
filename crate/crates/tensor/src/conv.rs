//! Direct 2-D convolution kernels (im2col + gemm) and their adjoints.
//!
//! The three kernels share one trilinear form `<conv(x, w), g>`, so each one
//! is the partial derivative of that form with respect to one argument.

use crate::{Scalar, Tensor};

/// Stride, zero padding and dilation of a square-stepped 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvOpts {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for ConvOpts {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }
}

impl ConvOpts {
    pub fn same(kernel: usize) -> Self {
        Self {
            stride: 1,
            padding: kernel / 2,
            dilation: 1,
        }
    }

    pub fn strided(kernel: usize, stride: usize) -> Self {
        Self {
            stride,
            padding: kernel / 2,
            dilation: 1,
        }
    }

    pub fn dilated(kernel: usize, dilation: usize) -> Self {
        Self {
            stride: 1,
            padding: dilation * (kernel / 2),
            dilation,
        }
    }
}

/// Fully resolved geometry of one convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub opts: ConvOpts,
}

impl ConvGeom {
    pub fn resolve(x_shape: &[usize], w_shape: &[usize], opts: ConvOpts) -> Self {
        assert_eq!(x_shape.len(), 4, "conv input must be NCHW, got {x_shape:?}");
        assert_eq!(w_shape.len(), 4, "conv weight must be OIHW, got {w_shape:?}");
        assert_eq!(
            x_shape[1], w_shape[1],
            "conv channel mismatch: input {x_shape:?}, weight {w_shape:?}"
        );
        assert!(opts.stride >= 1 && opts.dilation >= 1);
        let (k_h, k_w) = (w_shape[2], w_shape[3]);
        let span_h = opts.dilation * (k_h - 1) + 1;
        let span_w = opts.dilation * (k_w - 1) + 1;
        let ph = x_shape[2] + 2 * opts.padding;
        let pw = x_shape[3] + 2 * opts.padding;
        assert!(
            ph >= span_h && pw >= span_w,
            "conv kernel {k_h}x{k_w} larger than padded input {ph}x{pw}"
        );
        Self {
            batch: x_shape[0],
            in_ch: x_shape[1],
            out_ch: w_shape[0],
            in_h: x_shape[2],
            in_w: x_shape[3],
            k_h,
            k_w,
            out_h: (ph - span_h) / opts.stride + 1,
            out_w: (pw - span_w) / opts.stride + 1,
            opts,
        }
    }

    pub fn x_shape(&self) -> [usize; 4] {
        [self.batch, self.in_ch, self.in_h, self.in_w]
    }

    pub fn w_shape(&self) -> [usize; 4] {
        [self.out_ch, self.in_ch, self.k_h, self.k_w]
    }

    pub fn y_shape(&self) -> [usize; 4] {
        [self.batch, self.out_ch, self.out_h, self.out_w]
    }

    fn pointwise(&self) -> bool {
        self.k_h == 1 && self.k_w == 1 && self.opts.stride == 1 && self.opts.padding == 0
    }

    fn patch_rows(&self) -> usize {
        self.in_ch * self.k_h * self.k_w
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Output columns `[lo, hi)` whose input column `ox * stride + dx` lies
/// inside `[0, in_w)`.
fn valid_cols(g: &ConvGeom, dx: isize) -> (usize, usize) {
    let s = g.opts.stride as isize;
    let lo = if dx >= 0 { 0 } else { (-dx + s - 1) / s };
    let hi = ((g.in_w as isize - dx + s - 1) / s).clamp(0, g.out_w as isize);
    (lo.min(hi) as usize, hi as usize)
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let n = g.out_plane();
    let pad = g.opts.padding as isize;
    let stride = g.opts.stride;
    for c in 0..g.in_ch {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.k_h {
            for kx in 0..g.k_w {
                let row = (c * g.k_h + ky) * g.k_w + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                let dy = (ky * g.opts.dilation) as isize - pad;
                let dx = (kx * g.opts.dilation) as isize - pad;
                let (lo, hi) = valid_cols(g, dx);
                for oy in 0..g.out_h {
                    let iy = (oy * stride) as isize + dy;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    if lo < hi {
                        let start = (lo * stride) as isize + dx;
                        if stride == 1 {
                            line[lo..hi].copy_from_slice(&src[start as usize..start as usize + hi - lo]);
                        } else {
                            for (k, v) in line[lo..hi].iter_mut().enumerate() {
                                *v = src[start as usize + k * stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let n = g.out_plane();
    let pad = g.opts.padding as isize;
    let stride = g.opts.stride;
    for c in 0..g.in_ch {
        let plane = &mut x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.k_h {
            for kx in 0..g.k_w {
                let row = (c * g.k_h + ky) * g.k_w + kx;
                let src = &cols[row * n..(row + 1) * n];
                let dy = (ky * g.opts.dilation) as isize - pad;
                let dx = (kx * g.opts.dilation) as isize - pad;
                let (lo, hi) = valid_cols(g, dx);
                if lo >= hi {
                    continue;
                }
                let start = ((lo * stride) as isize + dx) as usize;
                for oy in 0..g.out_h {
                    let iy = (oy * stride) as isize + dy;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let base = iy as usize * g.in_w + start;
                    let line = &src[oy * g.out_w + lo..oy * g.out_w + hi];
                    if stride == 1 {
                        for (d, &v) in plane[base..base + line.len()].iter_mut().zip(line) {
                            *d += v;
                        }
                    } else {
                        for (k, &v) in line.iter().enumerate() {
                            plane[base + k * stride] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `y[b,o] = sum_c w[o,c] * x[b,c]` (cross-correlation, no bias).
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, g: &ConvGeom) -> Tensor<T> {
    debug_assert_eq!(x.shape(), g.x_shape());
    debug_assert_eq!(w.shape(), g.w_shape());
    let (kr, n) = (g.patch_rows(), g.out_plane());
    let x_plane = g.in_ch * g.in_h * g.in_w;
    let y_plane = g.out_ch * n;
    let mut y = vec![T::zero(); g.batch * y_plane];
    let mut cols = if g.pointwise() { Vec::new() } else { vec![T::zero(); kr * n] };
    for b in 0..g.batch {
        let xb = &x.data()[b * x_plane..(b + 1) * x_plane];
        let rhs: &[T] = if g.pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        T::gemm(
            g.out_ch,
            kr,
            n,
            T::one(),
            w.data(),
            (kr as isize, 1),
            rhs,
            (n as isize, 1),
            T::zero(),
            &mut y[b * y_plane..(b + 1) * y_plane],
            (n as isize, 1),
        );
    }
    Tensor::new(&g.y_shape(), y)
}

/// Adjoint of `conv2d` in its input argument.
pub fn conv2d_transpose<T: Scalar>(gy: &Tensor<T>, w: &Tensor<T>, g: &ConvGeom) -> Tensor<T> {
    debug_assert_eq!(gy.shape(), g.y_shape());
    let (kr, n) = (g.patch_rows(), g.out_plane());
    let x_plane = g.in_ch * g.in_h * g.in_w;
    let y_plane = g.out_ch * n;
    let mut x = vec![T::zero(); g.batch * x_plane];
    let mut cols = if g.pointwise() { Vec::new() } else { vec![T::zero(); kr * n] };
    for b in 0..g.batch {
        let gb = &gy.data()[b * y_plane..(b + 1) * y_plane];
        let xb = &mut x[b * x_plane..(b + 1) * x_plane];
        if g.pointwise() {
            T::gemm(
                kr,
                g.out_ch,
                n,
                T::one(),
                w.data(),
                (1, kr as isize),
                gb,
                (n as isize, 1),
                T::zero(),
                xb,
                (n as isize, 1),
            );
        } else {
            T::gemm(
                kr,
                g.out_ch,
                n,
                T::one(),
                w.data(),
                (1, kr as isize),
                gb,
                (n as isize, 1),
                T::zero(),
                &mut cols,
                (n as isize, 1),
            );
            col2im_add(&cols, g, xb);
        }
    }
    Tensor::new(&g.x_shape(), x)
}

/// Adjoint of `conv2d` in its weight argument, summed over the batch in
/// index order.
pub fn conv2d_weight_grad<T: Scalar>(x: &Tensor<T>, gy: &Tensor<T>, g: &ConvGeom) -> Tensor<T> {
    let (kr, n) = (g.patch_rows(), g.out_plane());
    let x_plane = g.in_ch * g.in_h * g.in_w;
    let y_plane = g.out_ch * n;
    let mut gw = vec![T::zero(); g.out_ch * kr];
    let mut cols = if g.pointwise() { Vec::new() } else { vec![T::zero(); kr * n] };
    for b in 0..g.batch {
        let xb = &x.data()[b * x_plane..(b + 1) * x_plane];
        let rhs: &[T] = if g.pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        T::gemm(
            g.out_ch,
            n,
            kr,
            T::one(),
            &gy.data()[b * y_plane..(b + 1) * y_plane],
            (n as isize, 1),
            rhs,
            (1, n as isize),
            T::one(),
            &mut gw,
            (kr as isize, 1),
        );
    }
    Tensor::new(&g.w_shape(), gw)
}
