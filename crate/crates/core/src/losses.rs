//! Adversarial, gradient-penalty, reconstruction and perceptual losses.

use fcf_tensor::{Scalar, Tape, Var};

use crate::config::LossConfig;
use crate::error::{FcfError, Result};
use crate::extractor::FeatureExtractor;

/// Loss weights and ablation switches.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub rec: f64,
    pub hrfpl: f64,
    pub reg: f64,
    pub use_rec: bool,
    pub use_hrfpl: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::from_config(&LossConfig::default())
    }
}

impl LossWeights {
    pub fn from_config(c: &LossConfig) -> Self {
        Self {
            rec: c.lambda_rec,
            hrfpl: c.lambda_hrfpl,
            reg: c.lambda_reg,
            use_rec: c.use_rec,
            use_hrfpl: c.use_hrfpl,
        }
    }
}

/// Non-saturating generator loss `mean(softplus(-fake))`.
pub fn adv_loss_g<'t, T: Scalar>(fake_logits: Var<'t, T>) -> Var<'t, T> {
    (-fake_logits).softplus().mean_all()
}

/// `mean(softplus(-real)) + mean(softplus(fake))`.
pub fn adv_loss_d<'t, T: Scalar>(real_logits: Var<'t, T>, fake_logits: Var<'t, T>) -> Var<'t, T> {
    (-real_logits).softplus().mean_all() + fake_logits.softplus().mean_all()
}

/// Mean over the batch of the squared norm of `d sum(logits) / d real`.
/// The returned value is differentiable with respect to the parameters
/// that produced `logits`.
pub fn r1_penalty<'t, T: Scalar>(tape: &'t Tape<T>, real: Var<'t, T>, logits: Var<'t, T>) -> Result<Var<'t, T>> {
    if !real.requires_grad() {
        return Err(FcfError::Invalid("R1 penalty needs inputs that track gradients".into()));
    }
    let g = tape.grad(logits.sum_all(), &[real], true)[0];
    let b = real.shape()[0];
    let per_sample = g.square().reshape(&[b, g.value().len() / b]).sum_axes(&[1]);
    Ok(per_sample.mean_all())
}

/// Mean absolute difference.
pub fn rec_loss<'t, T: Scalar>(comp: Var<'t, T>, org: Var<'t, T>) -> Var<'t, T> {
    (comp - org).abs().mean_all()
}

/// Stabiliser of the Euclidean norm at zero.
pub const NORM_EPS: f64 = 1e-10;

/// Per-row Euclidean norm of a `(B, N)` value, written as
/// `s / (sqrt(s + eps^2) + eps)` (equal to `sqrt(s + eps^2) - eps`) so it is
/// exactly zero at zero and has a finite gradient there.
pub fn safe_row_norm<'t, T: Scalar>(x: Var<'t, T>) -> Var<'t, T> {
    let s = x.square().sum_axes(&[1]);
    s / (s.add_scalar(NORM_EPS * NORM_EPS).sqrt().add_scalar(NORM_EPS))
}

/// High-receptive-field perceptual loss: per stage, the Euclidean norm of
/// the feature difference divided by the stage's element count, summed
/// over stages; averaged over the batch.
pub fn hrfpl<'t, T: Scalar>(
    comp: Var<'t, T>,
    org: Var<'t, T>,
    extractor: &dyn FeatureExtractor<T>,
) -> Result<Var<'t, T>> {
    if comp.shape() != org.shape() {
        return Err(FcfError::shape("hrfpl", format!("{:?} vs {:?}", comp.shape(), org.shape())));
    }
    let b = comp.shape()[0];
    let fa = extractor.stages(comp)?;
    let fb = extractor.stages(org)?;
    let mut total: Option<Var<'t, T>> = None;
    for (a, o) in fa.into_iter().zip(fb) {
        let n = o.value().len() / b;
        let term = safe_row_norm((a - o).reshape(&[b, n])).scale(1.0 / n as f64);
        total = Some(match total {
            Some(t) => t + term,
            None => term,
        });
    }
    Ok(total.expect("extractor has stages").mean_all())
}

/// `L_adv + lambda_rec L_rec + lambda_hrfpl L_hrfpl`, with disabled terms
/// contributing nothing.
pub fn total_loss_g(adv: f64, rec: f64, hrfpl: f64, w: &LossWeights) -> f64 {
    let mut t = adv;
    if w.use_rec {
        t += w.rec * rec;
    }
    if w.use_hrfpl {
        t += w.hrfpl * hrfpl;
    }
    t
}

/// [`total_loss_g`] on tape values; `None` terms are skipped.
pub fn total_loss_g_var<'t, T: Scalar>(
    adv: Var<'t, T>,
    rec: Option<Var<'t, T>>,
    hrfpl: Option<Var<'t, T>>,
    w: &LossWeights,
) -> Var<'t, T> {
    let mut t = adv;
    if let (true, Some(r)) = (w.use_rec, rec) {
        t = t + r.scale(w.rec);
    }
    if let (true, Some(h)) = (w.use_hrfpl, hrfpl) {
        t = t + h.scale(w.hrfpl);
    }
    t
}
