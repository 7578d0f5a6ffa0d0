//! The coarse-to-fine generator: encoder, mapping network, co-modulated
//! synthesis with FaF-Syn modules, and hole composition.

use std::collections::BTreeMap;

use fcf_tensor::{ConvOpts, Scalar, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::GeneratorConfig;
use crate::error::{FcfError, Result};
use crate::masks::check_binary;
use crate::nn::{lrelu, normal_rows, Conv2d, Ctx, Init, Linear, ModConv, ParamId, ParamStore};
use crate::spectral::{global_channels, Activation, FafResBlock, FfcOptions, SplitFeatureMap};

string_enum! {
    /// How FaF-Syn combines generator and encoder features.
    pub enum FafVariant {
        /// FaF-Res chain over `X + X_skip`.
        MergeThenFafres => "merge_then_fafres",
        /// Plain FFC pairs over `X_skip` alone.
        FfcOnSkip => "ffc_on_skip",
        /// FaF-Res chain over `X_skip` alone.
        FafresOnSkip => "fafres_on_skip",
    }
}

string_enum! {
    /// Initial weights of the style affine maps (biases always start at 1).
    pub enum StyleInit {
        Random => "random",
        /// Zero weights, so every style coefficient starts at exactly 1.
        Identity => "identity",
    }
}

/// Channel width at resolution `r`.
pub fn channels_at(cfg: &GeneratorConfig, r: usize) -> usize {
    (cfg.channel_base * cfg.resolution / r).min(cfg.channel_max)
}

/// `[4, 8, ..., resolution]`.
pub fn resolutions(top: usize) -> Vec<usize> {
    let mut out = vec![4];
    while *out.last().unwrap() < top {
        out.push(out.last().unwrap() * 2);
    }
    out
}

/// Four-channel network input `concat(I_org * (1 - M), M)`.
pub fn make_hole_input<T: Scalar>(images: &Tensor<T>, masks: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = images.dims4();
    if c != 3 || masks.shape() != [b, 1, h, w] {
        return Err(FcfError::shape(
            "make_hole_input",
            format!("images {:?} and masks {:?}", images.shape(), masks.shape()),
        ));
    }
    check_binary(masks)?;
    let plane = h * w;
    let mut out = Vec::with_capacity(b * 4 * plane);
    for bi in 0..b {
        let m = &masks.data()[bi * plane..(bi + 1) * plane];
        for ci in 0..3 {
            let src = &images.data()[(bi * 3 + ci) * plane..(bi * 3 + ci + 1) * plane];
            out.extend(src.iter().zip(m).map(|(&v, &mv)| v * (T::one() - mv)));
        }
        out.extend_from_slice(m);
    }
    Ok(Tensor::new(&[b, 4, h, w], out))
}

/// `I_pred` inside the hole, `I_org` elsewhere (selected, not blended, so
/// non-hole pixels are copied bit for bit).
pub fn compose<T: Scalar>(pred: &Tensor<T>, org: &Tensor<T>, masks: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = org.dims4();
    if pred.shape() != org.shape() || masks.shape() != [b, 1, h, w] {
        return Err(FcfError::shape(
            "compose",
            format!("pred {:?}, org {:?}, masks {:?}", pred.shape(), org.shape(), masks.shape()),
        ));
    }
    check_binary(masks)?;
    let plane = h * w;
    Ok(Tensor::from_fn(org.shape(), |i| {
        let (bi, p) = (i / (c * plane), i % plane);
        if masks.data()[bi * plane + p] == T::one() {
            pred.data()[i]
        } else {
            org.data()[i]
        }
    }))
}

/// Differentiable composition; the gradient reaches `pred` through the hole.
pub fn compose_var<'t, T: Scalar>(pred: Var<'t, T>, org: &Tensor<T>, masks: &Tensor<T>) -> Var<'t, T> {
    let tape = pred.tape();
    let full = masks.broadcast_to(org.shape());
    let keep = org.zip_map(&full, |o, m| o * (T::one() - m));
    pred.mul_const(std::sync::Arc::new(full)) + tape.constant(keep)
}

/// Encoder features.
#[derive(Clone, Debug)]
pub struct EncoderOutput<'t, T: Scalar> {
    pub z_enc: Var<'t, T>,
    pub skips: BTreeMap<usize, Var<'t, T>>,
}

#[derive(Clone, Debug)]
struct EncoderLevel {
    res: usize,
    conv: Conv2d,
    down: Option<Conv2d>,
}

#[derive(Clone, Debug)]
struct Encoder {
    from_rgb: Conv2d,
    levels: Vec<EncoderLevel>,
    fc: Linear,
}

/// Modulated convolution with its own style affine.
#[derive(Clone, Debug)]
pub struct StyledConv {
    pub name: String,
    pub affine: Linear,
    pub conv: ModConv,
    noise_strength: Option<ParamId>,
    up: bool,
    activate: bool,
}

impl StyledConv {
    fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>, w: Var<'t, T>) -> Var<'t, T> {
        let x = if self.up { x.upsample2x() } else { x };
        let s = self.affine.forward(ctx, w);
        let mut y = self.conv.forward(ctx, x, s);
        if let Some(id) = self.noise_strength {
            let sh = y.shape();
            if let Some(n) = ctx.noise(&[sh[0], 1, sh[2], sh[3]]) {
                y = y + ctx.tape.constant(n) * ctx.param(id).reshape(&[1, 1, 1, 1]);
            }
        }
        if self.activate {
            lrelu(y)
        } else {
            y
        }
    }
}

/// FaF-Res blocks at one resolution plus the style affines of their FFCs.
#[derive(Clone, Debug)]
pub struct FafSyn {
    pub res: usize,
    pub variant: FafVariant,
    pub global: usize,
    pub blocks: Vec<FafResBlock>,
    pub affines: Vec<[Linear; 2]>,
}

impl FafSyn {
    /// `X + X_faf`, where `X_faf` is the FaF contribution computed from
    /// `X` and `X_skip` according to the variant. With no blocks this is
    /// `X`; with freshly initialised blocks `X_faf` is zero.
    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        x: Var<'t, T>,
        skip: Var<'t, T>,
        w: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        if x.shape() != skip.shape() {
            return Err(FcfError::shape(
                "faf_syn",
                format!("X {:?} vs X_skip {:?}", x.shape(), skip.shape()),
            ));
        }
        if self.blocks.is_empty() {
            return Ok(x);
        }
        let start = match self.variant {
            FafVariant::MergeThenFafres => x + skip,
            FafVariant::FfcOnSkip | FafVariant::FafresOnSkip => skip,
        };
        let mut h = SplitFeatureMap::split(start, self.global);
        for (block, [a1, a2]) in self.blocks.iter().zip(&self.affines) {
            let styles = [Some(a1.forward(ctx, w)), Some(a2.forward(ctx, w))];
            h = match self.variant {
                FafVariant::FfcOnSkip => block.residual(ctx, &h, styles)?,
                _ => block.forward(ctx, &h, styles)?,
            };
        }
        let out = h.merge();
        let delta = match self.variant {
            FafVariant::FfcOnSkip => out,
            _ => out - start,
        };
        Ok(x + delta)
    }
}

#[derive(Clone, Debug)]
struct SynLevel {
    res: usize,
    conv_up: Option<StyledConv>,
    conv: StyledConv,
    torgb: StyledConv,
    faf: FafSyn,
}

#[derive(Clone, Debug)]
struct Mapping {
    layers: Vec<Linear>,
}

/// Generator parameters and architecture.
#[derive(Clone, Debug)]
pub struct Generator<T: Scalar> {
    pub cfg: GeneratorConfig,
    pub params: ParamStore<T>,
    encoder: Encoder,
    mapping: Mapping,
    constant: ParamId,
    levels: Vec<SynLevel>,
}

/// Prediction and intermediate latents of one generator pass.
#[derive(Clone, Debug)]
pub struct GeneratorOutput<'t, T: Scalar> {
    pub pred: Var<'t, T>,
    pub z_enc: Var<'t, T>,
    pub z_w: Var<'t, T>,
}

fn check_config(cfg: &GeneratorConfig) -> Result<()> {
    let bad = |key: &str, reason: String| Err(FcfError::Config(crate::error::ConfigError::invalid(key, reason)));
    if !cfg.resolution.is_power_of_two() || cfg.resolution < 8 {
        return bad("generator.resolution", format!("must be a power of two >= 8, got {}", cfg.resolution));
    }
    if cfg.channel_base == 0 || cfg.channel_max < cfg.channel_base || cfg.z_dim == 0 || cfg.enc_dim == 0 {
        return bad("generator.channel_base", "channel widths and latent sizes must be positive".into());
    }
    for (&r, &l) in &cfg.faf_blocks.0 {
        if !r.is_power_of_two() || r < 4 || r > cfg.resolution {
            return bad("generator.faf_blocks", format!("{r} is not a generator resolution"));
        }
        if l > 0 && r < 32 {
            if !cfg.allow_coarse_faf {
                return bad(
                    "generator.faf_blocks",
                    format!("FaF-Syn at {r}x{r} requires generator.allow_coarse_faf = true"),
                );
            }
            log::warn!("FaF-Syn enabled at {r}x{r}; coarse FFC blocks are known to train unstably");
        }
    }
    Ok(())
}

impl<T: Scalar> Generator<T> {
    /// Builds and initialises the generator; inconsistent configurations
    /// are rejected here rather than at the first forward pass.
    pub fn new(cfg: &GeneratorConfig, seed: u64) -> Result<Self> {
        check_config(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let mut p = ParamStore::new();
        let top = cfg.resolution;
        let ch = |r: usize| channels_at(cfg, r);
        let en = Init::EqualizedNormal;

        let from_rgb = Conv2d::new(&mut p, rng, "enc.from_rgb", 4, ch(top), 1, ConvOpts::same(1), true, en);
        let mut levels = Vec::new();
        for &r in resolutions(top).iter().rev() {
            let conv = Conv2d::new(&mut p, rng, &format!("enc.r{r}.conv"), ch(r), ch(r), 3, ConvOpts::same(3), true, en);
            let down = (r > 4).then(|| {
                Conv2d::new(&mut p, rng, &format!("enc.r{r}.down"), ch(r), ch(r / 2), 3, ConvOpts::strided(3, 2), true, en)
            });
            levels.push(EncoderLevel { res: r, conv, down });
        }
        let fc = Linear::new(&mut p, rng, "enc.fc", ch(4) * 16, cfg.enc_dim, 0.0, 1.0, en);
        let encoder = Encoder { from_rgb, levels, fc };

        let mapping = Mapping {
            layers: (0..cfg.mapping_layers)
                .map(|i| Linear::new(&mut p, rng, &format!("map.fc{i}"), cfg.z_dim, cfg.z_dim, 0.0, cfg.mapping_lr_mul, en))
                .collect(),
        };

        let w_dim = cfg.enc_dim + cfg.z_dim;
        let affine_init = match cfg.style_init {
            StyleInit::Random => Init::EqualizedNormal,
            StyleInit::Identity => Init::Zero,
        };
        let styled = |p: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, i: usize, o: usize, k: usize, up: bool, rgb: bool| {
            StyledConv {
                name: name.to_string(),
                affine: Linear::new(p, rng, &format!("{name}.affine"), w_dim, i, 1.0, 1.0, affine_init),
                conv: ModConv::new(p, rng, name, i, o, k, !rgb, true),
                noise_strength: (cfg.noise && !rgb).then(|| p.add(format!("{name}.noise_strength"), Tensor::zeros(&[1]))),
                up,
                activate: !rgb,
            }
        };
        let constant = p.add("syn.const", Tensor::randn(&[1, ch(4), 4, 4], 1.0, rng));
        let opts = FfcOptions {
            norm: cfg.ffc_norm,
            act: Activation::LeakyRelu,
            spectral_act: Activation::Relu,
            lfu: Some(cfg.lfu_mode),
        };
        let mut syn = Vec::new();
        for &r in &resolutions(top) {
            let c = ch(r);
            let conv_up = (r > 4).then(|| styled(&mut p, rng, &format!("syn.r{r}.conv_up"), ch(r / 2), c, 3, true, false));
            let alpha = cfg.alpha_g_per_res.0.get(&r).copied().unwrap_or(cfg.alpha_g);
            let mut blocks = Vec::new();
            let mut affines = Vec::new();
            for b in 0..cfg.faf_blocks.get(r) {
                let name = format!("syn.r{r}.faf.b{b}");
                blocks.push(FafResBlock::new(&mut p, rng, &name, c, alpha, opts)?);
                let a = |p: &mut ParamStore<T>, rng: &mut ChaCha8Rng, k: usize| {
                    Linear::new(p, rng, &format!("{name}.ffc{k}.affine"), w_dim, c, 1.0, 1.0, affine_init)
                };
                affines.push([a(&mut p, rng, 1), a(&mut p, rng, 2)]);
            }
            let faf = FafSyn {
                res: r,
                variant: cfg.faf_variant,
                global: global_channels(c, alpha),
                blocks,
                affines,
            };
            let conv = styled(&mut p, rng, &format!("syn.r{r}.conv"), c, c, 3, false, false);
            let torgb = styled(&mut p, rng, &format!("syn.r{r}.torgb"), c, 3, 1, false, true);
            syn.push(SynLevel {
                res: r,
                conv_up,
                conv,
                torgb,
                faf,
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            params: p,
            encoder,
            mapping,
            constant,
            levels: syn,
        })
    }

    pub fn resolution(&self) -> usize {
        self.cfg.resolution
    }

    /// `(batch, z_dim)` standard normal latents.
    pub fn sample_z<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Tensor<T> {
        normal_rows(batch, self.cfg.z_dim, rng)
    }

    /// Strided convolution pyramid (no residual connections) and the
    /// flattened 4x4 code.
    pub fn encode<'t>(&self, ctx: &Ctx<'t, '_, T>, input: Var<'t, T>) -> Result<EncoderOutput<'t, T>> {
        let s = input.shape();
        let r = self.cfg.resolution;
        if s.len() != 4 || s[1] != 4 || s[2] != r || s[3] != r {
            return Err(FcfError::shape("encode", format!("expected (B, 4, {r}, {r}), got {s:?}")));
        }
        let mut x = lrelu(self.encoder.from_rgb.forward(ctx, input));
        let mut skips = BTreeMap::new();
        for level in &self.encoder.levels {
            x = lrelu(level.conv.forward(ctx, x));
            skips.insert(level.res, x);
            if let Some(down) = &level.down {
                x = lrelu(down.forward(ctx, x));
            }
        }
        let flat = x.reshape(&[s[0], x.shape()[1] * 16]);
        let z_enc = lrelu(self.encoder.fc.forward(ctx, flat));
        Ok(EncoderOutput { z_enc, skips })
    }

    /// Pixel-normalised latent through the fully connected mapping stack.
    pub fn map_latent<'t>(&self, ctx: &Ctx<'t, '_, T>, z: Var<'t, T>) -> Result<Var<'t, T>> {
        if z.shape().len() != 2 || z.shape()[1] != self.cfg.z_dim {
            return Err(FcfError::shape("map_latent", format!("expected (B, {}), got {:?}", self.cfg.z_dim, z.shape())));
        }
        if !z.value().all_finite() {
            return Err(FcfError::NonFinite { what: "latent z", batch: 0 });
        }
        let mut x = z * z.square().mean_axes(&[1]).add_scalar(1e-8).rsqrt();
        for layer in &self.mapping.layers {
            x = lrelu(layer.forward(ctx, x));
        }
        Ok(x)
    }

    /// `stack(z_enc, z_w)`, the input of every style affine.
    pub fn style_input<'t>(&self, z_enc: Var<'t, T>, z_w: Var<'t, T>) -> Var<'t, T> {
        Var::concat(&[z_enc, z_w], 1)
    }

    /// Style vector of every modulated layer, by layer name.
    pub fn styles<'t>(&self, ctx: &Ctx<'t, '_, T>, z_enc: Var<'t, T>, z_w: Var<'t, T>) -> Vec<(String, Var<'t, T>)> {
        let w = self.style_input(z_enc, z_w);
        let mut out = Vec::new();
        for level in &self.levels {
            if let Some(c) = &level.conv_up {
                out.push((c.name.clone(), c.affine.forward(ctx, w)));
            }
            for (b, [a1, a2]) in level.faf.affines.iter().enumerate() {
                out.push((format!("syn.r{}.faf.b{b}.ffc1", level.res), a1.forward(ctx, w)));
                out.push((format!("syn.r{}.faf.b{b}.ffc2", level.res), a2.forward(ctx, w)));
            }
            for c in [&level.conv, &level.torgb] {
                out.push((c.name.clone(), c.affine.forward(ctx, w)));
            }
        }
        out
    }

    /// Coarse-to-fine synthesis from the learned 4x4 constant.
    pub fn synthesize<'t>(&self, ctx: &Ctx<'t, '_, T>, enc: &EncoderOutput<'t, T>, z_w: Var<'t, T>) -> Result<Var<'t, T>> {
        let b = enc.z_enc.shape()[0];
        for level in &self.levels {
            let want = [b, channels_at(&self.cfg, level.res), level.res, level.res];
            match enc.skips.get(&level.res) {
                Some(s) if s.shape() == want => {}
                other => {
                    return Err(FcfError::shape(
                        "synthesize",
                        format!("skip at {}: expected {want:?}, got {:?}", level.res, other.map(|s| s.shape())),
                    ))
                }
            }
        }
        let w = self.style_input(enc.z_enc, z_w);
        let c4 = channels_at(&self.cfg, 4);
        let mut x = ctx.param(self.constant).broadcast_to(&[b, c4, 4, 4]);
        let mut rgb: Option<Var<'t, T>> = None;
        for level in &self.levels {
            let skip = enc.skips[&level.res];
            if let Some(up) = &level.conv_up {
                x = up.forward(ctx, x, w);
            }
            x = level.faf.forward(ctx, x, skip, w)? + skip;
            x = level.conv.forward(ctx, x, w);
            let tap = level.torgb.forward(ctx, x, w);
            rgb = Some(match rgb {
                Some(prev) => prev.upsample2x() + tap,
                None => tap,
            });
        }
        Ok(rgb.expect("at least one resolution"))
    }

    /// `I_pred` for images, masks and latents `z`.
    pub fn forward<'t>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        images: &Tensor<T>,
        masks: &Tensor<T>,
        z: Var<'t, T>,
    ) -> Result<GeneratorOutput<'t, T>> {
        let input = ctx.tape.constant(make_hole_input(images, masks)?);
        let enc = self.encode(ctx, input)?;
        let z_w = self.map_latent(ctx, z)?;
        let pred = self.synthesize(ctx, &enc, z_w)?;
        Ok(GeneratorOutput {
            pred,
            z_enc: enc.z_enc,
            z_w,
        })
    }

    /// Completed images `I_comp` without recording gradients.
    pub fn inpaint(&self, images: &Tensor<T>, masks: &Tensor<T>, z: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let pred = tape.no_grad(|| {
            let ctx = Ctx::new(&tape, &self.params, false);
            self.forward(&ctx, images, masks, tape.constant(z.clone())).map(|o| o.pred.value())
        })?;
        compose(&pred, images, masks)
    }

    /// Names of every Fourier Unit capture site.
    pub fn fourier_sites(&self) -> Vec<String> {
        let mut out = Vec::new();
        for level in &self.levels {
            for (b, block) in level.faf.blocks.iter().enumerate() {
                for (k, layer) in [&block.first, &block.second].into_iter().enumerate() {
                    if let Some(st) = &layer.g2g {
                        let base = format!("syn.r{}.faf.b{b}.ffc{}.g2g", level.res, k + 1);
                        out.push(format!("{base}.fu"));
                        if st.lfu.is_some() {
                            out.push(format!("{base}.lfu.fu"));
                        }
                    }
                }
            }
        }
        out
    }

    /// FaF-Syn module at resolution `r`.
    pub fn faf_syn(&self, r: usize) -> Option<&FafSyn> {
        self.levels.iter().find(|l| l.res == r).map(|l| &l.faf)
    }
}
