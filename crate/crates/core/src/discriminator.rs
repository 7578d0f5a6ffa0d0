//! Residual discriminator over `stack(M, image)`.

use std::f64::consts::FRAC_1_SQRT_2;

use fcf_tensor::{ConvOpts, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::DiscriminatorConfig;
use crate::error::{FcfError, Result};
use crate::generator::resolutions;
use crate::nn::{lrelu, Conv2d, Ctx, Init, Linear, ParamStore};

#[derive(Clone, Debug)]
struct DBlock {
    conv: Conv2d,
    down: Conv2d,
    skip: Conv2d,
}

#[derive(Clone, Debug)]
pub struct Discriminator<T: Scalar> {
    pub cfg: DiscriminatorConfig,
    pub resolution: usize,
    pub params: ParamStore<T>,
    from_rgb: Conv2d,
    blocks: Vec<DBlock>,
    epilogue: Conv2d,
    fc: Linear,
    out: Linear,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(cfg: &DiscriminatorConfig, resolution: usize, seed: u64) -> Result<Self> {
        if !resolution.is_power_of_two() || resolution < 8 {
            return Err(FcfError::shape("discriminator", format!("resolution {resolution} is not a power of two >= 8")));
        }
        let ch = |r: usize| (cfg.channel_base * resolution / r).min(cfg.channel_max);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let mut p = ParamStore::new();
        let en = Init::EqualizedNormal;
        let from_rgb = Conv2d::new(&mut p, rng, "dis.from_rgb", 4, ch(resolution), 1, ConvOpts::same(1), true, en);
        let mut blocks = Vec::new();
        for &r in resolutions(resolution).iter().rev().filter(|&&r| r > 4) {
            let (ci, co) = (ch(r), ch(r / 2));
            blocks.push(DBlock {
                conv: Conv2d::new(&mut p, rng, &format!("dis.r{r}.conv"), ci, ci, 3, ConvOpts::same(3), true, en),
                down: Conv2d::new(&mut p, rng, &format!("dis.r{r}.down"), ci, co, 3, ConvOpts::strided(3, 2), true, en),
                skip: Conv2d::new(&mut p, rng, &format!("dis.r{r}.skip"), ci, co, 1, ConvOpts::same(1), false, en),
            });
        }
        let c4 = ch(4);
        let extra = usize::from(cfg.mbstd);
        let epilogue = Conv2d::new(&mut p, rng, "dis.r4.conv", c4 + extra, c4, 3, ConvOpts::same(3), true, en);
        let fc = Linear::new(&mut p, rng, "dis.r4.fc", c4 * 16, c4, 0.0, 1.0, en);
        let out = Linear::new(&mut p, rng, "dis.out", c4, 1, 0.0, 1.0, en);
        Ok(Self {
            cfg: cfg.clone(),
            resolution,
            params: p,
            from_rgb,
            blocks,
            epilogue,
            fc,
            out,
        })
    }

    /// One real-vs-fake logit per sample, shape `(B,)`.
    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_, T>, images: Var<'t, T>, masks: &Tensor<T>) -> Result<Var<'t, T>> {
        let s = images.shape();
        let r = self.resolution;
        if s.len() != 4 || s[1] != 3 || s[2] != r || s[3] != r || masks.shape() != [s[0], 1, r, r] {
            return Err(FcfError::shape(
                "discriminate",
                format!("expected images (B, 3, {r}, {r}) and masks (B, 1, {r}, {r}), got {s:?} and {:?}", masks.shape()),
            ));
        }
        let input = Var::concat(&[ctx.tape.constant(masks.clone()), images], 1);
        self.forward_stacked(ctx, input)
    }

    /// Same as [`Self::forward`] on a prepared 4-channel input.
    pub fn forward_stacked<'t>(&self, ctx: &Ctx<'t, '_, T>, input: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = input.shape();
        if s.len() != 4 || s[1] != 4 {
            return Err(FcfError::shape("discriminate", format!("expected 4 input channels, got {s:?}")));
        }
        let b = s[0];
        let mut x = lrelu(self.from_rgb.forward(ctx, input));
        for blk in &self.blocks {
            let y = lrelu(blk.down.forward(ctx, lrelu(blk.conv.forward(ctx, x))));
            let skip = blk.skip.forward(ctx, x.avg_pool2x());
            x = (y + skip).scale(FRAC_1_SQRT_2);
        }
        if self.cfg.mbstd {
            x = minibatch_stddev(x, self.cfg.mbstd_group);
        }
        let x = lrelu(self.epilogue.forward(ctx, x));
        let c = x.shape()[1];
        let x = lrelu(self.fc.forward(ctx, x.reshape(&[b, c * 16])));
        Ok(self.out.forward(ctx, x).reshape(&[b]))
    }
}

/// Appends the average standard deviation over sample groups as one extra
/// channel. Sample `i` belongs to group `i % (B / G)`.
pub fn minibatch_stddev<'t, T: Scalar>(x: Var<'t, T>, group: usize) -> Var<'t, T> {
    let s = x.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut g = group.min(b).max(1);
    while b % g != 0 {
        g -= 1;
    }
    let m = b / g;
    let y = x.reshape(&[g, m, c, h, w]);
    let centred = y - y.mean_axes(&[0]);
    let std = centred.square().mean_axes(&[0]).add_scalar(1e-8).sqrt();
    let feat = std.mean_axes(&[2, 3, 4]).broadcast_to(&[g, m, 1, h, w]).reshape(&[b, 1, h, w]);
    Var::concat(&[x, feat], 1)
}
