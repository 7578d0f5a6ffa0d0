//! Real 2-D spectral transforms and the Fast Fourier Convolution family:
//! Fourier Unit, Local Fourier Unit, Spectral Transform, the four-path FFC
//! layer and the FaF-Res residual block.

use fcf_tensor::fft::{half_width, irfft2_stacked, rfft2_stacked};
use fcf_tensor::{ConvOpts, Scalar, Tensor, Var};
use num_complex::Complex;
use rand_chacha::ChaCha8Rng;

use crate::error::{FcfError, Result};
use crate::nn::{Conv2d, Ctx, Init, ParamId, ParamStore};

/// Tag describing the transform convention, stored with checkpoints.
pub const FFT_CONVENTION: &str = "rfft2:forward-unnormalized,inverse-1/(HW),half-spectrum-last-axis";

string_enum! {
    /// How the Local Fourier Unit gathers its semi-global context.
    pub enum LfuMode {
        /// Fold 2x2 half-resolution windows into channels, FU, tile back.
        SpatialSplit => "spatial_split",
        /// FU on a quarter of the channels at full resolution.
        ChannelOnly => "channel_only",
    }
}

string_enum! {
    /// Batch-independent normalization used inside FFC layers.
    pub enum NormKind {
        Identity => "identity",
        /// Per-channel scale and shift.
        Affine => "affine",
        /// Per-sample, per-channel standardisation over space, then affine.
        Instance => "instance",
    }
}

string_enum! {
    pub enum Activation {
        Identity => "identity",
        Relu => "relu",
        /// Leaky ReLU with slope 0.2.
        LeakyRelu => "lrelu",
    }
}

impl Activation {
    pub fn apply<'t, T: Scalar>(self, x: Var<'t, T>) -> Var<'t, T> {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.relu(),
            Activation::LeakyRelu => x.leaky_relu(0.2),
        }
    }
}

/// Half spectrum of a real `(B, C, H, W)` map, shape `(B, C, H, W/2+1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralCoefficients<T: Scalar> {
    /// Stacked real/imaginary layout `(B, 2C, H, W/2+1)`.
    stacked: Tensor<T>,
    height: usize,
    width: usize,
}

impl<T: Scalar> SpectralCoefficients<T> {
    pub fn from_stacked(stacked: Tensor<T>, height: usize, width: usize) -> Result<Self> {
        let s = stacked.shape();
        if s.len() != 4 || s[1] % 2 != 0 || s[2] != height || s[3] != half_width(width) {
            return Err(FcfError::shape(
                "irfft2",
                format!("spectrum {s:?} inconsistent with target extents {height}x{width}"),
            ));
        }
        Ok(Self {
            stacked,
            height,
            width,
        })
    }

    pub fn stacked(&self) -> &Tensor<T> {
        &self.stacked
    }

    /// `(batch, channels, H, W/2+1)`.
    pub fn shape(&self) -> [usize; 4] {
        let s = self.stacked.shape();
        [s[0], s[1] / 2, s[2], s[3]]
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, b: usize, c: usize, u: usize, v: usize) -> Complex<T> {
        let ch = self.stacked.shape()[1] / 2;
        Complex::new(self.stacked.at4(b, c, u, v), self.stacked.at4(b, ch + c, u, v))
    }

    /// Energy of the full spectrum, counting mirrored columns.
    pub fn full_energy(&self) -> f64 {
        let [b, c, h, wf] = self.shape();
        let mut e = 0.0;
        for bi in 0..b {
            for ci in 0..c {
                for u in 0..h {
                    for v in 0..wf {
                        let z = self.get(bi, ci, u, v);
                        let m = fcf_tensor::fft::column_weight(v, self.width) as f64;
                        e += m * (z.re.to_f64_lossy().powi(2) + z.im.to_f64_lossy().powi(2));
                    }
                }
            }
        }
        e
    }
}

fn check_finite<T: Scalar>(x: &Tensor<T>, what: &'static str) -> Result<()> {
    if x.all_finite() {
        return Ok(());
    }
    let per = x.len() / x.shape()[0].max(1);
    let batch = x.data().iter().position(|v| !v.is_finite()).unwrap_or(0) / per.max(1);
    Err(FcfError::NonFinite { what, batch })
}

/// Unnormalized forward real 2-D FFT over the last two axes.
pub fn rfft2<T: Scalar>(x: &Tensor<T>) -> Result<SpectralCoefficients<T>> {
    if x.rank() != 4 || x.shape()[2] == 0 || x.shape()[3] == 0 {
        return Err(FcfError::shape("rfft2", format!("expected (B, C, H>=1, W>=1), got {:?}", x.shape())));
    }
    check_finite(x, "rfft2 input")?;
    let (_, _, h, w) = x.dims4();
    Ok(SpectralCoefficients {
        stacked: rfft2_stacked(x),
        height: h,
        width: w,
    })
}

/// Inverse of [`rfft2`], carrying the `1/(HW)` factor.
pub fn irfft2<T: Scalar>(c: &SpectralCoefficients<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = c.stacked.shape();
    if s[2] != h || s[3] != half_width(w) {
        return Err(FcfError::shape(
            "irfft2",
            format!("spectrum {:?} inconsistent with target extents {h}x{w}", c.shape()),
        ));
    }
    Ok(irfft2_stacked(&c.stacked, w))
}

/// Channel-wise normalization with learned scale and shift.
#[derive(Clone, Debug)]
pub struct Norm {
    pub kind: NormKind,
    pub channels: usize,
    pub scale: Option<ParamId>,
    pub shift: Option<ParamId>,
}

pub const INSTANCE_EPS: f64 = 1e-5;

impl Norm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, kind: NormKind, channels: usize) -> Self {
        let (scale, shift) = match kind {
            NormKind::Identity => (None, None),
            NormKind::Affine | NormKind::Instance => (
                Some(store.add(format!("{name}.scale"), Tensor::ones(&[channels]))),
                Some(store.add(format!("{name}.shift"), Tensor::zeros(&[channels]))),
            ),
        };
        Self {
            kind,
            channels,
            scale,
            shift,
        }
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Var<'t, T> {
        let x = match self.kind {
            NormKind::Identity => return x,
            NormKind::Affine => x,
            NormKind::Instance => {
                let centred = x - x.mean_axes(&[2, 3]);
                let var = centred.square().mean_axes(&[2, 3]);
                centred * var.add_scalar(INSTANCE_EPS).rsqrt()
            }
        };
        let c = [1, self.channels, 1, 1];
        let (g, b) = (self.scale.unwrap(), self.shift.unwrap());
        x * ctx.param(g).reshape(&c) + ctx.param(b).reshape(&c)
    }
}

/// FFT, pointwise convolution over stacked real/imaginary channels with
/// normalization and activation, inverse FFT.
#[derive(Clone, Debug)]
pub struct FourierUnit {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub conv: Conv2d,
    pub norm: Norm,
    pub act: Activation,
}

impl FourierUnit {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        norm: NormKind,
        act: Activation,
    ) -> Self {
        let conv = Conv2d::new(
            store,
            rng,
            &format!("{name}.conv"),
            2 * in_ch,
            2 * out_ch,
            1,
            ConvOpts::same(1),
            false,
            Init::EqualizedNormal,
        );
        let norm = Norm::new(store, &format!("{name}.norm"), norm, 2 * out_ch);
        Self {
            name: name.to_string(),
            in_ch,
            out_ch,
            conv,
            norm,
            act,
        }
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.in_ch {
            return Err(FcfError::shape("fourier_unit", format!("expected {} channels, got {s:?}", self.in_ch)));
        }
        if s[2] < 2 || s[3] < 2 {
            return Err(FcfError::shape(
                "fourier_unit",
                format!("spatial extents must be >= 2, got {}x{}", s[2], s[3]),
            ));
        }
        let z = x.rfft2();
        let z = self.act.apply(self.norm.forward(ctx, self.conv.forward(ctx, z)));
        let y = z.irfft2(s[3]);
        ctx.capture(&self.name, y);
        Ok(y)
    }
}

/// Fourier Unit over a quarter of the channels, either on folded 2x2
/// windows (tiled back afterwards) or at full resolution.
#[derive(Clone, Debug)]
pub struct LocalFourierUnit {
    pub channels: usize,
    pub mode: LfuMode,
    pub fu: FourierUnit,
}

impl LocalFourierUnit {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        mode: LfuMode,
        norm: NormKind,
        act: Activation,
    ) -> Result<Self> {
        if channels % 4 != 0 || channels == 0 {
            return Err(FcfError::shape(
                "local_fourier_unit",
                format!("channel count must be a positive multiple of 4, got {channels}"),
            ));
        }
        let fu_in = match mode {
            LfuMode::SpatialSplit => channels,
            LfuMode::ChannelOnly => channels / 4,
        };
        let fu = FourierUnit::new(store, rng, &format!("{name}.fu"), fu_in, channels, norm, act);
        Ok(Self { channels, mode, fu })
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.channels {
            return Err(FcfError::shape(
                "local_fourier_unit",
                format!("expected {} channels, got {s:?}", self.channels),
            ));
        }
        let (h, w) = (s[2], s[3]);
        let q = x.narrow(1, 0, self.channels / 4);
        match self.mode {
            LfuMode::ChannelOnly => self.fu.forward(ctx, q),
            LfuMode::SpatialSplit => {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(FcfError::shape(
                        "local_fourier_unit",
                        format!("spatial extents must be even, got {h}x{w}"),
                    ));
                }
                let rows = Var::concat(&[q.narrow(2, 0, h / 2), q.narrow(2, h / 2, h / 2)], 1);
                let folded = Var::concat(&[rows.narrow(3, 0, w / 2), rows.narrow(3, w / 2, w / 2)], 1);
                let y = self.fu.forward(ctx, folded)?;
                let y = Var::concat(&[y, y], 2);
                Ok(Var::concat(&[y, y], 3))
            }
        }
    }
}

/// Global-to-global path of an FFC layer.
#[derive(Clone, Debug)]
pub struct SpectralTransform {
    pub in_ch: usize,
    pub out_ch: usize,
    pub hidden: usize,
    pub down: Conv2d,
    pub down_norm: Norm,
    pub act: Activation,
    pub fu: FourierUnit,
    pub lfu: Option<LocalFourierUnit>,
    pub up: Conv2d,
}

/// Construction options shared by the FFC family.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FfcOptions {
    pub norm: NormKind,
    /// Spatial-domain activation after each branch.
    pub act: Activation,
    /// Frequency-domain activation inside Fourier Units.
    pub spectral_act: Activation,
    /// `None` disables the Local Fourier Unit.
    pub lfu: Option<LfuMode>,
}

impl Default for FfcOptions {
    fn default() -> Self {
        Self {
            norm: NormKind::Affine,
            act: Activation::LeakyRelu,
            spectral_act: Activation::Relu,
            lfu: Some(LfuMode::SpatialSplit),
        }
    }
}

impl SpectralTransform {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        opts: FfcOptions,
        zero_out: bool,
    ) -> Result<Self> {
        let hidden = out_ch / 2;
        if hidden == 0 || in_ch == 0 {
            return Err(FcfError::shape(
                "spectral_transform",
                format!("needs at least 1 input and 2 output channels, got {in_ch} -> {out_ch}"),
            ));
        }
        let down = Conv2d::new(
            store,
            rng,
            &format!("{name}.down"),
            in_ch,
            hidden,
            1,
            ConvOpts::same(1),
            false,
            Init::EqualizedNormal,
        );
        let down_norm = Norm::new(store, &format!("{name}.down_norm"), opts.norm, hidden);
        let fu = FourierUnit::new(store, rng, &format!("{name}.fu"), hidden, hidden, opts.norm, opts.spectral_act);
        let lfu = match opts.lfu {
            Some(mode) => Some(LocalFourierUnit::new(
                store,
                rng,
                &format!("{name}.lfu"),
                hidden,
                mode,
                opts.norm,
                opts.spectral_act,
            )?),
            None => None,
        };
        let init = if zero_out { Init::Zero } else { Init::EqualizedNormal };
        let up = Conv2d::new(store, rng, &format!("{name}.up"), hidden, out_ch, 1, ConvOpts::same(1), false, init);
        Ok(Self {
            in_ch,
            out_ch,
            hidden,
            down,
            down_norm,
            act: opts.act,
            fu,
            lfu,
            up,
        })
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        if x.shape().get(1) != Some(&self.in_ch) {
            return Err(FcfError::shape(
                "spectral_transform",
                format!("expected {} channels, got {:?}", self.in_ch, x.shape()),
            ));
        }
        let x1 = self.act.apply(self.down_norm.forward(ctx, self.down.forward(ctx, x)));
        let mut y = x1 + self.fu.forward(ctx, x1)?;
        if let Some(lfu) = &self.lfu {
            y = y + lfu.forward(ctx, x1)?;
        }
        Ok(self.up.forward(ctx, y))
    }
}

/// Number of global channels for `channels` at ratio `alpha`.
pub fn global_channels(channels: usize, alpha: f64) -> usize {
    ((alpha * channels as f64).round() as usize).min(channels)
}

/// Feature map split into local and global channel groups. An empty group
/// is `None`.
#[derive(Clone, Copy, Debug)]
pub struct SplitFeatureMap<'t, T: Scalar> {
    pub local: Option<Var<'t, T>>,
    pub global: Option<Var<'t, T>>,
}

impl<'t, T: Scalar> SplitFeatureMap<'t, T> {
    /// First `C - c_g` channels local, last `c_g` global.
    pub fn split(x: Var<'t, T>, c_g: usize) -> Self {
        let c = x.shape()[1];
        assert!(c_g <= c, "global channels {c_g} exceed {c}");
        let c_l = c - c_g;
        Self {
            local: (c_l > 0).then(|| x.narrow(1, 0, c_l)),
            global: (c_g > 0).then(|| x.narrow(1, c_l, c_g)),
        }
    }

    pub fn merge(&self) -> Var<'t, T> {
        match (self.local, self.global) {
            (Some(l), Some(g)) => Var::concat(&[l, g], 1),
            (Some(l), None) => l,
            (None, Some(g)) => g,
            (None, None) => panic!("empty split feature map"),
        }
    }

    /// `(c_l, c_g)`.
    pub fn channels(&self) -> (usize, usize) {
        let c = |v: Option<Var<'t, T>>| v.map(|v| v.shape()[1]).unwrap_or(0);
        (c(self.local), c(self.global))
    }

    pub fn alpha(&self) -> f64 {
        let (l, g) = self.channels();
        g as f64 / (l + g) as f64
    }

    /// Branch-wise sum.
    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.channels() != other.channels() {
            return Err(FcfError::shape(
                "split add",
                format!("channel split {:?} vs {:?}", self.channels(), other.channels()),
            ));
        }
        let add = |a: Option<Var<'t, T>>, b: Option<Var<'t, T>>| match (a, b) {
            (Some(a), Some(b)) => Some(a + b),
            _ => None,
        };
        Ok(Self {
            local: add(self.local, other.local),
            global: add(self.global, other.global),
        })
    }
}

/// Channel counts and ratios of one FFC layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FfcSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub alpha_in: f64,
    pub alpha_out: f64,
    pub kernel: usize,
}

/// Four-path Fast Fourier Convolution layer.
#[derive(Clone, Debug)]
pub struct FfcLayer {
    pub spec: FfcSpec,
    pub in_split: (usize, usize),
    pub out_split: (usize, usize),
    pub l2l: Option<Conv2d>,
    pub l2g: Option<Conv2d>,
    pub g2l: Option<Conv2d>,
    pub g2g: Option<SpectralTransform>,
    pub norm_l: Option<Norm>,
    pub norm_g: Option<Norm>,
    pub act: Activation,
}

impl FfcLayer {
    /// With `zero_out`, every path into the outputs starts at zero.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        spec: FfcSpec,
        opts: FfcOptions,
        zero_out: bool,
    ) -> Result<Self> {
        let in_g = global_channels(spec.in_ch, spec.alpha_in);
        let out_g = global_channels(spec.out_ch, spec.alpha_out);
        let (in_l, out_l) = (spec.in_ch - in_g, spec.out_ch - out_g);
        let init = if zero_out { Init::Zero } else { Init::EqualizedNormal };
        let k = spec.kernel;
        let mut conv = |store: &mut ParamStore<T>, path: &str, i: usize, o: usize| {
            (i > 0 && o > 0).then(|| {
                Conv2d::new(store, rng, &format!("{name}.{path}"), i, o, k, ConvOpts::same(k), false, init)
            })
        };
        let l2l = conv(store, "l2l", in_l, out_l);
        let l2g = conv(store, "l2g", in_l, out_g);
        let g2l = conv(store, "g2l", in_g, out_l);
        let g2g = if in_g > 0 && out_g > 0 {
            Some(SpectralTransform::new(store, rng, &format!("{name}.g2g"), in_g, out_g, opts, zero_out)?)
        } else {
            None
        };
        let norm_l = (out_l > 0).then(|| Norm::new(store, &format!("{name}.norm_l"), opts.norm, out_l));
        let norm_g = (out_g > 0).then(|| Norm::new(store, &format!("{name}.norm_g"), opts.norm, out_g));
        Ok(Self {
            spec,
            in_split: (in_l, in_g),
            out_split: (out_l, out_g),
            l2l,
            l2g,
            g2l,
            g2g,
            norm_l,
            norm_g,
            act: opts.act,
        })
    }

    /// `style`, when given, scales each input channel (local then global),
    /// which is the same as scaling every kernel's input-channel weights.
    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        x: &SplitFeatureMap<'t, T>,
        style: Option<Var<'t, T>>,
    ) -> Result<SplitFeatureMap<'t, T>> {
        if x.channels() != self.in_split {
            return Err(FcfError::shape(
                "ffc_layer",
                format!("input split {:?}, layer expects {:?}", x.channels(), self.in_split),
            ));
        }
        let (in_l, in_g) = self.in_split;
        let (mut xl, mut xg) = (x.local, x.global);
        if let Some(s) = style {
            let b = s.shape()[0];
            if let Some(v) = xl {
                xl = Some(v * s.narrow(1, 0, in_l).reshape(&[b, in_l, 1, 1]));
            }
            if let Some(v) = xg {
                xg = Some(v * s.narrow(1, in_l, in_g).reshape(&[b, in_g, 1, 1]));
            }
        }
        let sum = |a: Option<Var<'t, T>>, b: Option<Var<'t, T>>| match (a, b) {
            (Some(a), Some(b)) => Some(a + b),
            (a, None) => a,
            (None, b) => b,
        };
        let apply = |c: &Option<Conv2d>, v: Option<Var<'t, T>>| match (c, v) {
            (Some(c), Some(v)) => Some(c.forward(ctx, v)),
            _ => None,
        };
        let yl = sum(apply(&self.l2l, xl), apply(&self.g2l, xg));
        let yg_spec = match (&self.g2g, xg) {
            (Some(st), Some(v)) => Some(st.forward(ctx, v)?),
            _ => None,
        };
        let yg = sum(apply(&self.l2g, xl), yg_spec);
        let finish = |n: &Option<Norm>, y: Option<Var<'t, T>>| match (n, y) {
            (Some(n), Some(y)) => Some(self.act.apply(n.forward(ctx, y))),
            _ => None,
        };
        Ok(SplitFeatureMap {
            local: finish(&self.norm_l, yl),
            global: finish(&self.norm_g, yg),
        })
    }
}

/// Residual block of two FFC layers: `x + FFC(FFC(x))`.
#[derive(Clone, Debug)]
pub struct FafResBlock {
    pub first: FfcLayer,
    pub second: FfcLayer,
}

impl FafResBlock {
    /// The second layer starts with zero output kernels, so a fresh block is
    /// the identity.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        alpha: f64,
        opts: FfcOptions,
    ) -> Result<Self> {
        let spec = FfcSpec {
            in_ch: channels,
            out_ch: channels,
            alpha_in: alpha,
            alpha_out: alpha,
            kernel: 3,
        };
        Ok(Self {
            first: FfcLayer::new(store, rng, &format!("{name}.ffc1"), spec, opts, false)?,
            second: FfcLayer::new(store, rng, &format!("{name}.ffc2"), spec, opts, true)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.first.spec.in_ch
    }

    /// `FFC(FFC(x))` alone.
    pub fn residual<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        x: &SplitFeatureMap<'t, T>,
        styles: [Option<Var<'t, T>>; 2],
    ) -> Result<SplitFeatureMap<'t, T>> {
        let h = self.first.forward(ctx, x, styles[0])?;
        self.second.forward(ctx, &h, styles[1])
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        x: &SplitFeatureMap<'t, T>,
        styles: [Option<Var<'t, T>>; 2],
    ) -> Result<SplitFeatureMap<'t, T>> {
        if x.channels() != self.first.in_split {
            return Err(FcfError::shape(
                "faf_res_block",
                format!("input split {:?}, block expects {:?}", x.channels(), self.first.in_split),
            ));
        }
        x.add(&self.residual(ctx, x, styles)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use fcf_tensor::gradcheck::check_gradients;
    use fcf_tensor::Tape;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn randomize_norms(store: &mut ParamStore<f64>, r: &mut ChaCha8Rng) {
        randomize_matching(store, r, &[".scale", ".shift", ".up.weight"]);
    }

    /// Leaves shifts at zero so constant maps stay constant through the
    /// frequency domain.
    fn randomize_scales(store: &mut ParamStore<f64>, r: &mut ChaCha8Rng) {
        randomize_matching(store, r, &[".scale", ".up.weight"]);
    }

    fn randomize_matching(store: &mut ParamStore<f64>, r: &mut ChaCha8Rng, suffixes: &[&str]) {
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            if suffixes.iter().any(|s| name.ends_with(s)) {
                let shape = store.get(id).shape().to_vec();
                store.set(id, Tensor::uniform(&shape, 0.5, 1.5, r));
            }
        }
    }

    #[test]
    fn constant_map_spectrum() {
        let c = rfft2(&Tensor::<f32>::ones(&[1, 1, 4, 4])).unwrap();
        assert_eq!(c.shape(), [1, 1, 4, 3]);
        assert!((c.get(0, 0, 0, 0).re - 16.0).abs() < 1e-6);
        for u in 0..4 {
            for v in 0..3 {
                if (u, v) != (0, 0) {
                    assert!(c.get(0, 0, u, v).norm() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn delta_spectrum_inverts_to_ones() {
        let (h, w) = (3, 5);
        let mut st = Tensor::<f64>::zeros(&[1, 2, h, half_width(w)]);
        st.set4(0, 0, 0, 0, (h * w) as f64);
        let c = SpectralCoefficients::from_stacked(st, h, w).unwrap();
        let y = irfft2(&c, h, w).unwrap();
        assert!(y.max_abs_diff(&Tensor::ones(&[1, 1, h, w])) < 1e-12);
        assert!(irfft2(&c, h, w + 2).is_err());
    }

    #[test]
    fn non_finite_input_names_batch() {
        let mut x = Tensor::<f32>::zeros(&[3, 2, 4, 4]);
        x.set4(2, 1, 0, 3, f32::NAN);
        match rfft2(&x) {
            Err(FcfError::NonFinite { batch, .. }) => assert_eq!(batch, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn fourier_unit_identity_round_trip() {
        let mut store = ParamStore::<f32>::new();
        let fu = FourierUnit::new(&mut store, &mut rng(0), "fu", 3, 3, NormKind::Identity, Activation::Identity);
        let eye = Tensor::from_fn(&[6, 6, 1, 1], |i| if i / 6 == i % 6 { 1.0 } else { 0.0 });
        store.set(fu.conv.weight, fu.conv.raw_weight_for(&eye));
        let x = Tensor::<f32>::randn(&[2, 3, 6, 7], 1.0, &mut rng(1));
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, false);
        let y = fu.forward(&ctx, tape.constant(x.clone())).unwrap();
        assert!(y.value().max_abs_diff(&x) < 1e-5);
    }

    #[test]
    fn fourier_unit_rejects_tiny_extents() {
        let mut store = ParamStore::<f32>::new();
        let fu = FourierUnit::new(&mut store, &mut rng(0), "fu", 1, 1, NormKind::Affine, Activation::Relu);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, false);
        assert!(fu.forward(&ctx, tape.constant(Tensor::zeros(&[1, 1, 1, 8]))).is_err());
    }

    /// Positions of `f(x)` and `f(x + delta e_p)` that differ, for every `p`.
    fn min_coverage(f: impl Fn(&Tensor<f64>) -> Tensor<f64>, x: &Tensor<f64>, channels: std::ops::Range<usize>) -> usize {
        let groups: Vec<Vec<usize>> = channels.map(|c| vec![c]).collect();
        coverage_over(f, x, &groups)
    }

    /// Worst-case number of output positions changed when the channels of
    /// one group are perturbed together at one position.
    fn coverage_over(f: impl Fn(&Tensor<f64>) -> Tensor<f64>, x: &Tensor<f64>, groups: &[Vec<usize>]) -> usize {
        let (_, _, h, w) = x.dims4();
        let base = f(x);
        let (_, co, _, _) = base.dims4();
        let mut worst = usize::MAX;
        for group in groups {
            for p in 0..h * w {
                let mut xp = x.clone();
                for &c in group {
                    let v = xp.at4(0, c, p / w, p % w);
                    xp.set4(0, c, p / w, p % w, v + 1e-3);
                }
                let y = f(&xp);
                let mut hit = 0;
                for q in 0..h * w {
                    if (0..co).any(|o| y.at4(0, o, q / w, q % w) != base.at4(0, o, q / w, q % w)) {
                        hit += 1;
                    }
                }
                worst = worst.min(hit);
            }
        }
        worst
    }

    #[test]
    fn fourier_unit_perturbation_reaches_every_position() {
        let mut store = ParamStore::<f64>::new();
        let fu = FourierUnit::new(&mut store, &mut rng(2), "fu", 2, 2, NormKind::Affine, Activation::Relu);
        let x = Tensor::<f64>::randn(&[1, 2, 8, 8], 1.0, &mut rng(3));
        let f = |x: &Tensor<f64>| {
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &store, false);
            fu.forward(&ctx, tape.constant(x.clone())).unwrap().value().as_ref().clone()
        };
        assert_eq!(min_coverage(f, &x, 0..2), 64);
    }

    fn param_gradcheck(store: &ParamStore<f64>, x: &Tensor<f64>, f: impl for<'t> Fn(&Ctx<'t, '_, f64>, Var<'t, f64>) -> Var<'t, f64>) {
        param_gradcheck_eps(store, x, 1e-3, f)
    }

    fn param_gradcheck_eps(
        store: &ParamStore<f64>,
        x: &Tensor<f64>,
        eps: f64,
        f: impl for<'t> Fn(&Ctx<'t, '_, f64>, Var<'t, f64>) -> Var<'t, f64>,
    ) {
        let ids: Vec<ParamId> = store.ids().collect();
        let mut inputs = vec![x.clone()];
        inputs.extend(ids.iter().map(|&id| store.get(id).clone()));
        let probe = Tensor::<f64>::randn(&f_shape(store, x, &f), 1.0, &mut rng(77));
        let res = check_gradients(
            |tape, v| {
                let ctx = Ctx::new(tape, store, true);
                for (k, &id) in ids.iter().enumerate() {
                    ctx.bind(id, v[k + 1]);
                }
                (f(&ctx, v[0]) * tape.constant(probe.clone())).sum_all()
            },
            &inputs,
            eps,
            1e-6,
            24,
        );
        assert!(res.passes(1e-2), "{res:?}");
    }

    fn f_shape(store: &ParamStore<f64>, x: &Tensor<f64>, f: &impl for<'t> Fn(&Ctx<'t, '_, f64>, Var<'t, f64>) -> Var<'t, f64>) -> Vec<usize> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store, false);
        f(&ctx, tape.constant(x.clone())).shape()
    }

    #[test]
    fn fourier_unit_gradients() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng(4);
        let fu = FourierUnit::new(&mut store, &mut r, "fu", 4, 4, NormKind::Affine, Activation::Relu);
        randomize_norms(&mut store, &mut r);
        let x = Tensor::<f64>::randn(&[1, 4, 8, 8], 1.0, &mut r);
        param_gradcheck(&store, &x, |ctx, x| fu.forward(ctx, x).unwrap());
    }

    #[test]
    fn local_fourier_unit_constant_and_shape() {
        for mode in LfuMode::ALL {
            let mut store = ParamStore::<f64>::new();
            let mut r = rng(5);
            let lfu = LocalFourierUnit::new(&mut store, &mut r, "lfu", 8, *mode, NormKind::Affine, Activation::Relu).unwrap();
            randomize_scales(&mut store, &mut r);
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &store, false);
            let x = Tensor::from_fn(&[2, 8, 8, 6], |i| (i / 48) as f64 * 0.1 - 0.3);
            let y = lfu.forward(&ctx, tape.constant(x)).unwrap().value();
            assert_eq!(y.shape(), &[2, 8, 8, 6]);
            for b in 0..2 {
                for c in 0..8 {
                    let v0 = y.at4(b, c, 0, 0);
                    for p in 0..48 {
                        assert!((y.at4(b, c, p / 6, p % 6) - v0).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn local_fourier_unit_divisibility() {
        let mut store = ParamStore::<f32>::new();
        assert!(LocalFourierUnit::new(&mut store, &mut rng(0), "a", 6, LfuMode::SpatialSplit, NormKind::Affine, Activation::Relu).is_err());
        let lfu = LocalFourierUnit::new(&mut store, &mut rng(0), "b", 4, LfuMode::SpatialSplit, NormKind::Affine, Activation::Relu).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, false);
        let err = lfu.forward(&ctx, tape.constant(Tensor::zeros(&[1, 4, 7, 8]))).unwrap_err();
        assert!(err.to_string().contains("even"));
    }

    #[test]
    fn local_fourier_unit_gradients() {
        for mode in LfuMode::ALL {
            let mut store = ParamStore::<f64>::new();
            let mut r = rng(6);
            let lfu = LocalFourierUnit::new(&mut store, &mut r, "lfu", 4, *mode, NormKind::Affine, Activation::Relu).unwrap();
            randomize_norms(&mut store, &mut r);
            let x = Tensor::<f64>::randn(&[1, 4, 8, 8], 1.0, &mut r);
            param_gradcheck(&store, &x, |ctx, x| lfu.forward(ctx, x).unwrap());
        }
    }

    #[test]
    fn spectral_transform_zero_input_and_shape() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng(7);
        let st = SpectralTransform::new(&mut store, &mut r, "st", 6, 8, FfcOptions::default(), false).unwrap();
        randomize_scales(&mut store, &mut r);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, false);
        let y = st.forward(&ctx, tape.constant(Tensor::zeros(&[2, 6, 8, 8]))).unwrap().value();
        assert_eq!(y.shape(), &[2, 8, 8, 8]);
        for b in 0..2 {
            for c in 0..8 {
                let v0 = y.at4(b, c, 0, 0);
                assert!((0..64).all(|p| (y.at4(b, c, p / 8, p % 8) - v0).abs() < 1e-9));
            }
        }
    }

    #[test]
    fn spectral_transform_is_global() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng(8);
        let st = SpectralTransform::new(&mut store, &mut r, "st", 4, 8, FfcOptions::default(), false).unwrap();
        randomize_norms(&mut store, &mut r);
        let x = Tensor::<f64>::randn(&[1, 4, 8, 8], 1.0, &mut r);
        let f = |x: &Tensor<f64>| {
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &store, false);
            st.forward(&ctx, tape.constant(x.clone())).unwrap().value().as_ref().clone()
        };
        assert_eq!(min_coverage(f, &x, 0..4), 64);
    }

    #[test]
    fn spectral_transform_gradients() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng(9);
        let st = SpectralTransform::new(&mut store, &mut r, "st", 4, 8, FfcOptions::default(), false).unwrap();
        randomize_norms(&mut store, &mut r);
        let x = Tensor::<f64>::randn(&[1, 4, 8, 8], 1.0, &mut r);
        param_gradcheck(&store, &x, |ctx, x| st.forward(ctx, x).unwrap());
    }

    fn ffc_spec(c: usize, alpha: f64) -> FfcSpec {
        FfcSpec {
            in_ch: c,
            out_ch: c,
            alpha_in: alpha,
            alpha_out: alpha,
            kernel: 3,
        }
    }

    #[test]
    fn ffc_alpha_zero_is_plain_conv() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng(10);
        let layer = FfcLayer::new(&mut store, &mut r, "ffc", ffc_spec(5, 0.0), FfcOptions::default(), false).unwrap();
        randomize_norms(&mut store, &mut r);
        assert!(layer.l2g.is_none() && layer.g2l.is_none() && layer.g2g.is_none());
        let x = Tensor::<f64>::randn(&[2, 5, 6, 6], 1.0, &mut r);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, false);
        let xv = tape.constant(x);
        let y = layer.forward(&ctx, &SplitFeatureMap::split(xv, 0), None).unwrap();
        assert!(y.global.is_none());
        let conv = layer.l2l.as_ref().unwrap();
        let norm = layer.norm_l.as_ref().unwrap();
        let want = norm.forward(&ctx, conv.forward(&ctx, xv)).leaky_relu(0.2);
        assert_eq!(y.merge().value().data(), want.value().data());
    }

    #[test]
    fn ffc_split_and_extents() {
        let mut store = ParamStore::<f32>::new();
        let layer = FfcLayer::new(
            &mut store,
            &mut rng(11),
            "ffc",
            FfcSpec { in_ch: 8, out_ch: 16, alpha_in: 0.5, alpha_out: 0.5, kernel: 3 },
            FfcOptions::default(),
            false,
        )
        .unwrap();
        assert_eq!(layer.out_split, (8, 8));
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, false);
        let x = SplitFeatureMap::split(tape.constant(Tensor::ones(&[3, 8, 8, 8])), 4);
        let y = layer.forward(&ctx, &x, None).unwrap();
        assert_eq!(y.merge().shape(), vec![3, 16, 8, 8]);
        assert_eq!(y.channels(), (8, 8));
        let bad = SplitFeatureMap::split(tape.constant(Tensor::ones(&[3, 8, 8, 8])), 2);
        assert!(layer.forward(&ctx, &bad, None).is_err());
    }

    #[test]
    fn ffc_pixel_perturbation_reaches_every_position() {
        for (alpha, seed) in [(0.25, 20), (0.5, 12), (0.75, 21)] {
            let c = 32;
            let mut store = ParamStore::<f64>::new();
            let mut r = rng(seed);
            let layer = FfcLayer::new(&mut store, &mut r, "ffc", ffc_spec(c, alpha), FfcOptions::default(), false).unwrap();
            randomize_norms(&mut store, &mut r);
            let x = Tensor::<f64>::randn(&[1, c, 8, 8], 1.0, &mut r);
            let c_g = layer.in_split.1;
            let f = |x: &Tensor<f64>| {
                let tape = Tape::new();
                let ctx = Ctx::new(&tape, &store, false);
                let s = SplitFeatureMap::split(tape.constant(x.clone()), c_g);
                layer.forward(&ctx, &s, None).unwrap().global.unwrap().value().as_ref().clone()
            };
            assert_eq!(coverage_over(f, &x, &[(0..c).collect()]), 64, "alpha {alpha}");
        }
    }

    #[test]
    fn ffc_local_perturbation_reaches_global_everywhere_after_two_layers() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng(12);
        let opts = FfcOptions::default();
        let a = FfcLayer::new(&mut store, &mut r, "a", ffc_spec(16, 0.5), opts, false).unwrap();
        let b = FfcLayer::new(&mut store, &mut r, "b", ffc_spec(16, 0.5), opts, false).unwrap();
        randomize_norms(&mut store, &mut r);
        let x = Tensor::<f64>::randn(&[1, 16, 8, 8], 1.0, &mut r);
        let f = |x: &Tensor<f64>| {
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &store, false);
            let s = SplitFeatureMap::split(tape.constant(x.clone()), 8);
            let h = a.forward(&ctx, &s, None).unwrap();
            b.forward(&ctx, &h, None).unwrap().global.unwrap().value().as_ref().clone()
        };
        assert_eq!(min_coverage(f, &x, 0..8), 64);
    }

    #[test]
    fn ffc_gradients() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng(13);
        let layer = FfcLayer::new(&mut store, &mut r, "ffc", ffc_spec(16, 0.5), FfcOptions::default(), false).unwrap();
        randomize_norms(&mut store, &mut r);
        let x = Tensor::<f64>::randn(&[1, 16, 8, 8], 1.0, &mut r);
        param_gradcheck(&store, &x, |ctx, x| {
            layer.forward(ctx, &SplitFeatureMap::split(x, 8), None).unwrap().merge()
        });
    }

    #[test]
    fn fresh_faf_res_block_is_identity() {
        let mut store = ParamStore::<f32>::new();
        let block = FafResBlock::new(&mut store, &mut rng(14), "blk", 16, 0.5, FfcOptions::default()).unwrap();
        let x = Tensor::<f32>::randn(&[2, 16, 8, 8], 1.0, &mut rng(15));
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, false);
        let s = SplitFeatureMap::split(tape.constant(x.clone()), 8);
        let y = block.forward(&ctx, &s, [None, None]).unwrap().merge().value();
        assert_eq!(y.data(), x.data());
    }

    fn faf_gradcheck(opts: FfcOptions, eps: f64) {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng(16);
        let block = FafResBlock::new(&mut store, &mut r, "blk", 16, 0.5, opts).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape().to_vec();
            let v = if store.name(id).ends_with(".scale") { Tensor::uniform(&shape, 0.5, 1.5, &mut r) } else { Tensor::randn(&shape, 0.5, &mut r) };
            store.set(id, v);
        }
        let x = Tensor::<f64>::randn(&[1, 16, 8, 8], 1.0, &mut r);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, false);
        let y = block.forward(&ctx, &SplitFeatureMap::split(tape.constant(x.clone()), 8), [None, None]).unwrap();
        assert!(y.merge().value().all_finite());
        param_gradcheck_eps(&store, &x, eps, |ctx, x| {
            block.forward(ctx, &SplitFeatureMap::split(x, 8), [None, None]).unwrap().merge()
        });
    }

    #[test]
    fn faf_res_block_gradients_and_finiteness() {
        faf_gradcheck(FfcOptions::default(), 1e-6);
        let smooth = FfcOptions {
            act: Activation::Identity,
            spectral_act: Activation::Identity,
            ..FfcOptions::default()
        };
        faf_gradcheck(smooth, 1e-3);
    }

    #[test]
    fn deterministic_construction_and_forward() {
        let run = || {
            let mut store = ParamStore::<f32>::new();
            let layer = FfcLayer::new(&mut store, &mut rng(3), "f", ffc_spec(16, 0.5), FfcOptions::default(), false).unwrap();
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &store, false);
            let x = SplitFeatureMap::split(tape.constant(Tensor::randn(&[1, 16, 8, 8], 1.0, &mut rng(4))), 8);
            layer.forward(&ctx, &x, None).unwrap().merge().value().as_ref().clone()
        };
        assert_eq!(run().data(), run().data());
    }
}
