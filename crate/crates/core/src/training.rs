//! Alternating adversarial optimisation, metrics logging and the training
//! loop.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use fcf_tensor::{Scalar, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::config::FcfConfig;
use crate::data::{derive_rng, sample_batch, Batch, Dataset};
use crate::discriminator::Discriminator;
use crate::error::{FcfError, Result};
use crate::evaluation::{emit_grid, masked_pixel_metrics};
use crate::extractor::{extractor_from_config, FeatureExtractor};
use crate::generator::{compose_var, Generator};
use crate::losses::{adv_loss_d, adv_loss_g, hrfpl, r1_penalty, rec_loss, total_loss_g_var, LossWeights};
use crate::masks::{masked_ratios, MaskSource};
use crate::nn::{Ctx, ParamId, ParamStore};
use crate::optim::Adam;

const DIS_SEED_SALT: u64 = 0xd15c;
const Z_D_STREAM: u64 = 0x2d;
const Z_G_STREAM: u64 = 0x29;
const NOISE_D_STREAM: u64 = 0x40d;
const NOISE_G_STREAM: u64 = 0x409;
const HOLDOUT_SALT: u64 = 0x401d;
const HOLDOUT_Z_STREAM: u64 = 0x4012;

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState<T: Scalar> {
    pub config: FcfConfig,
    pub gen: Generator<T>,
    pub dis: Discriminator<T>,
    pub g_opt: Adam<T>,
    pub d_opt: Adam<T>,
    /// Exponential moving average of the generator parameters.
    pub ema: Option<ParamStore<T>>,
    /// Completed steps.
    pub step: u64,
    pub images_seen: u64,
}

impl<T: Scalar> TrainState<T> {
    /// Fresh networks and optimisers; rejects invalid configurations with
    /// every field-level problem.
    pub fn new(config: &FcfConfig) -> Result<Self> {
        if let Err(errs) = config.validate() {
            let msg = errs.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; ");
            return Err(FcfError::Invalid(msg));
        }
        let seed = config.train.seed;
        let gen = Generator::new(&config.generator, seed)?;
        let dis = Discriminator::new(&config.discriminator, config.generator.resolution, seed ^ DIS_SEED_SALT)?;
        let g_opt = Adam::new(&gen.params, &config.train);
        let d_opt = Adam::new(&dis.params, &config.train);
        let ema = config.train.ema.then(|| gen.params.clone());
        Ok(Self {
            config: config.clone(),
            gen,
            dis,
            g_opt,
            d_opt,
            ema,
            step: 0,
            images_seen: 0,
        })
    }

    /// Generator used for inference: the moving average when enabled.
    pub fn inference_generator(&self) -> Generator<T> {
        let mut g = self.gen.clone();
        if let Some(ema) = &self.ema {
            g.params = ema.clone();
        }
        g
    }
}

/// Scalar record of one training step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub images_seen: u64,
    pub d_adv: f64,
    /// Raw penalty on steps where the lazy regulariser runs.
    pub r1: Option<f64>,
    /// Regularisation added to the discriminator objective this step.
    pub r1_applied: Option<f64>,
    pub d_total: f64,
    pub g_adv: f64,
    pub g_rec: Option<f64>,
    pub g_hrfpl: Option<f64>,
    pub g_total: f64,
    pub grad_norm_d: f64,
    pub grad_norm_g: f64,
    pub mask_ratio_mean: f64,
    pub mask_ratio_min: f64,
    pub mask_ratio_max: f64,
}

/// Weight of the lazy R1 term at `step`, or `None` when it is skipped.
pub fn r1_weight_at(step: u64, config: &FcfConfig) -> Option<f64> {
    let k = config.train.r1_interval;
    (config.loss.lambda_reg > 0.0 && step % k == 0).then(|| config.loss.lambda_reg * k as f64)
}

fn grads_of<'t, T: Scalar>(tape: &'t Tape<T>, loss: Var<'t, T>, bound: &[(ParamId, Var<'t, T>)]) -> (Vec<(ParamId, Tensor<T>)>, f64) {
    let vars: Vec<Var<'t, T>> = bound.iter().map(|(_, v)| *v).collect();
    let grads = tape.grad(loss, &vars, false);
    let mut sq = 0.0;
    let out = bound
        .iter()
        .zip(grads)
        .map(|((id, _), g)| {
            let g = g.value().as_ref().clone();
            sq += g.data().iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>();
            (*id, g)
        })
        .collect();
    (out, sq.sqrt())
}

fn finite(term: &str, v: f64, step: u64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(FcfError::NonFiniteLoss {
            term: term.to_string(),
            step,
        })
    }
}

/// One discriminator update (with the lazy R1 term on its schedule)
/// followed by one generator update on a fresh latent. On a non-finite loss
/// the state is left unchanged and the offending term is reported.
pub fn train_step<T: Scalar>(
    state: &mut TrainState<T>,
    extractor: &dyn FeatureExtractor<T>,
    batch: &Batch<T>,
) -> Result<StepMetrics> {
    let cfg = state.config.clone();
    let seed = cfg.train.seed;
    let step = state.step;
    let b = batch.images.shape()[0];
    let weights = LossWeights::from_config(&cfg.loss);
    let ratios = masked_ratios(&batch.masks)?;

    // Discriminator phase.
    let (d_adv, r1, r1_applied, d_total, d_grads, grad_norm_d) = {
        let tape = Tape::new();
        let mut gctx = Ctx::new(&tape, &state.gen.params, false);
        if cfg.generator.noise {
            gctx = gctx.with_noise(derive_rng(seed, step, NOISE_D_STREAM));
        }
        let z = state.gen.sample_z(b, &mut derive_rng(seed, step, Z_D_STREAM));
        let fake = tape.no_grad(|| -> Result<_> {
            let out = state.gen.forward(&gctx, &batch.images, &batch.masks, tape.constant(z))?;
            Ok(compose_var(out.pred, &batch.images, &batch.masks).value())
        })?;
        let dctx = Ctx::new(&tape, &state.dis.params, true);
        let r1_weight = r1_weight_at(step, &cfg);
        let real = if r1_weight.is_some() {
            tape.var(batch.images.clone())
        } else {
            tape.constant(batch.images.clone())
        };
        let real_logits = state.dis.forward(&dctx, real, &batch.masks)?;
        let fake_logits = state.dis.forward(&dctx, tape.constant(fake.as_ref().clone()), &batch.masks)?;
        let adv = adv_loss_d(real_logits, fake_logits);
        let d_adv = finite("d_adv", adv.item().to_f64_lossy(), step)?;
        let (total, r1, r1_applied) = match r1_weight {
            Some(w) => {
                let pen = r1_penalty(&tape, real, real_logits)?;
                let r1 = finite("r1", pen.item().to_f64_lossy(), step)?;
                (adv + pen.scale(w), Some(r1), Some(w * r1))
            }
            None => (adv, None, None),
        };
        let d_total = finite("d_total", total.item().to_f64_lossy(), step)?;
        let (grads, norm) = grads_of(&tape, total, &dctx.bind_all());
        (d_adv, r1, r1_applied, d_total, grads, finite("grad_norm_d", norm, step)?)
    };
    let d_backup = (state.dis.params.clone(), state.d_opt.clone());
    state.d_opt.step(&mut state.dis.params, &d_grads);

    // Generator phase.
    let g_phase = (|| -> Result<_> {
        let tape = Tape::new();
        let mut gctx = Ctx::new(&tape, &state.gen.params, true);
        if cfg.generator.noise {
            gctx = gctx.with_noise(derive_rng(seed, step, NOISE_G_STREAM));
        }
        let dctx = Ctx::new(&tape, &state.dis.params, false);
        let z = state.gen.sample_z(b, &mut derive_rng(seed, step, Z_G_STREAM));
        let out = state.gen.forward(&gctx, &batch.images, &batch.masks, tape.constant(z))?;
        let comp = compose_var(out.pred, &batch.images, &batch.masks);
        let org = tape.constant(batch.images.clone());
        let adv = adv_loss_g(state.dis.forward(&dctx, comp, &batch.masks)?);
        let rec = weights.use_rec.then(|| rec_loss(comp, org));
        let perc = if weights.use_hrfpl { Some(hrfpl(comp, org, extractor)?) } else { None };
        let total = total_loss_g_var(adv, rec, perc, &weights);
        let item = |v: Var<'_, T>| v.item().to_f64_lossy();
        let g_adv = finite("g_adv", item(adv), step)?;
        let g_rec = rec.map(|v| finite("g_rec", item(v), step)).transpose()?;
        let g_hrfpl = perc.map(|v| finite("g_hrfpl", item(v), step)).transpose()?;
        let g_total = finite("g_total", item(total), step)?;
        let (grads, norm) = grads_of(&tape, total, &gctx.bind_all());
        Ok((g_adv, g_rec, g_hrfpl, g_total, grads, finite("grad_norm_g", norm, step)?))
    })();
    let (g_adv, g_rec, g_hrfpl, g_total, g_grads, grad_norm_g) = match g_phase {
        Ok(v) => v,
        Err(e) => {
            (state.dis.params, state.d_opt) = d_backup;
            return Err(e);
        }
    };
    state.g_opt.step(&mut state.gen.params, &g_grads);
    if let Some(ema) = &mut state.ema {
        let beta = T::lit(cfg.train.ema_beta);
        for id in state.gen.params.ids().collect::<Vec<_>>() {
            let cur = state.gen.params.get(id);
            let next = ema.get(id).zip_map(cur, |e, p| beta * e + (T::one() - beta) * p);
            ema.set(id, next);
        }
    }
    state.step += 1;
    state.images_seen += b as u64;
    let n = ratios.len() as f64;
    Ok(StepMetrics {
        step,
        images_seen: state.images_seen,
        d_adv,
        r1,
        r1_applied,
        d_total,
        g_adv,
        g_rec,
        g_hrfpl,
        g_total,
        grad_norm_d,
        grad_norm_g,
        mask_ratio_mean: ratios.iter().sum::<f64>() / n,
        mask_ratio_min: ratios.iter().cloned().fold(f64::INFINITY, f64::min),
        mask_ratio_max: ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    })
}

/// Data sources and perceptual extractor derived from a configuration.
pub struct Trainer<T: Scalar> {
    pub extractor: Arc<dyn FeatureExtractor<T>>,
    pub dataset: Dataset,
    pub masks: MaskSource,
}

impl<T: Scalar> Trainer<T> {
    pub fn from_config(config: &FcfConfig) -> Result<Self> {
        let r = config.generator.resolution;
        Ok(Self {
            extractor: extractor_from_config(&config.hrfpl)?,
            dataset: Dataset::from_config(&config.data, r)?,
            masks: MaskSource::from_config(&config.mask, r, r)?,
        })
    }

    /// Training batch of `step`.
    pub fn batch(&self, config: &FcfConfig, step: u64) -> Result<Batch<T>> {
        sample_batch(&self.dataset, &self.masks, config.train.batch, config.train.seed, step)
    }

    /// Fixed batch, never used for updates, for monitoring.
    pub fn holdout(&self, config: &FcfConfig) -> Result<Batch<T>> {
        sample_batch(&self.dataset, &self.masks, config.train.batch, config.train.seed ^ HOLDOUT_SALT, 0)
    }

    /// Masked l1 of the current generator on the holdout batch with a fixed
    /// latent.
    pub fn holdout_masked_l1(&self, state: &TrainState<T>) -> Result<f64> {
        let batch = self.holdout(&state.config)?;
        let g = state.inference_generator();
        let z = g.sample_z(batch.images.shape()[0], &mut derive_rng(state.config.train.seed, 0, HOLDOUT_Z_STREAM));
        let comp = g.inpaint(&batch.images, &batch.masks, &z)?;
        Ok(masked_pixel_metrics(&comp, &batch.images, &batch.masks)?.l1)
    }

    /// `(I_hole, I_comp, I_org)` rows of the holdout batch.
    pub fn sample_rows(&self, state: &TrainState<T>, rows: usize) -> Result<Vec<Vec<Tensor<T>>>> {
        let batch = self.holdout(&state.config)?;
        let g = state.inference_generator();
        let n = rows.min(batch.images.shape()[0]);
        let z = g.sample_z(batch.images.shape()[0], &mut derive_rng(state.config.train.seed, 0, HOLDOUT_Z_STREAM));
        let comp = g.inpaint(&batch.images, &batch.masks, &z)?;
        let hole = crate::generator::make_hole_input(&batch.images, &batch.masks)?;
        Ok((0..n)
            .map(|i| {
                let squeeze = |t: &Tensor<T>| {
                    let s = t.shape();
                    t.narrow(0, i, 1).narrow(1, 0, 3).reshape(&[3, s[2], s[3]])
                };
                vec![squeeze(&hole), squeeze(&comp), squeeze(&batch.images)]
            })
            .collect())
    }
}

/// Where and how a training run writes its artifacts.
#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub out_dir: PathBuf,
    /// Stop after this many completed steps instead of the image budget.
    pub max_steps: Option<u64>,
    /// Adds elapsed seconds to every metrics record.
    pub wallclock: bool,
    /// Writes a holdout sample grid with every checkpoint.
    pub sample_grids: bool,
}

impl TrainOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            out_dir: out_dir.into(),
            max_steps: None,
            wallclock: true,
            sample_grids: true,
        }
    }
}

#[derive(Serialize)]
struct Record<'a> {
    #[serde(flatten)]
    metrics: &'a StepMetrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    wallclock: Option<f64>,
}

pub const METRICS_FILE: &str = "metrics.ndjson";

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("checkpoint-{step:08}.tar"))
}

/// Runs steps from `state.step` until the budget (or `max_steps`),
/// appending to the metrics log and writing checkpoints every
/// `train.snapshot_every` steps and at the end. A non-finite loss writes a
/// diagnostic checkpoint before the error is returned.
pub fn run<T: Scalar>(state: &mut TrainState<T>, trainer: &Trainer<T>, opts: &TrainOptions) -> Result<Vec<StepMetrics>> {
    std::fs::create_dir_all(&opts.out_dir).map_err(|e| FcfError::file(&opts.out_dir, e))?;
    let end = opts.max_steps.unwrap_or_else(|| state.config.total_steps());
    let log_path = opts.out_dir.join(METRICS_FILE);
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| FcfError::file(&log_path, e))?;
    let start = Instant::now();
    let every = state.config.train.snapshot_every;
    let mut out = Vec::new();
    let mut last_saved = None;
    while state.step < end {
        let batch = trainer.batch(&state.config, state.step)?;
        let m = match train_step(state, trainer.extractor.as_ref(), &batch) {
            Ok(m) => m,
            Err(e @ FcfError::NonFiniteLoss { .. }) => {
                let path = opts.out_dir.join(format!("diagnostic-{:08}.tar", state.step));
                save_checkpoint(state, &path)?;
                log::error!("{e}; diagnostic checkpoint at {}", path.display());
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let rec = Record {
            metrics: &m,
            wallclock: opts.wallclock.then(|| start.elapsed().as_secs_f64()),
        };
        let line = serde_json::to_string(&rec).expect("metrics serialise");
        writeln!(log, "{line}").map_err(|e| FcfError::file(&log_path, e))?;
        log::info!(
            "step {} d {:.4} g {:.4} rec {:?} hrfpl {:?}",
            m.step,
            m.d_total,
            m.g_total,
            m.g_rec,
            m.g_hrfpl
        );
        out.push(m);
        if state.step % every == 0 || state.step == end {
            snapshot(state, trainer, opts)?;
            last_saved = Some(state.step);
        }
    }
    if last_saved != Some(state.step) && !out.is_empty() {
        snapshot(state, trainer, opts)?;
    }
    Ok(out)
}

fn snapshot<T: Scalar>(state: &TrainState<T>, trainer: &Trainer<T>, opts: &TrainOptions) -> Result<()> {
    save_checkpoint(state, &checkpoint_path(&opts.out_dir, state.step))?;
    if opts.sample_grids {
        let rows = trainer.sample_rows(state, state.config.eval.grid_rows)?;
        let path = opts.out_dir.join(format!("samples-{:08}.png", state.step));
        emit_grid(&rows, &["hole", "fcf", "original"], &path)?;
    }
    Ok(())
}

/// Fresh run of `config`.
pub fn train(config: &FcfConfig, opts: &TrainOptions) -> Result<TrainState<f32>> {
    let mut state = TrainState::<f32>::new(config)?;
    let trainer = Trainer::from_config(config)?;
    run(&mut state, &trainer, opts)?;
    Ok(state)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::config::ResMap;

    pub(crate) fn tiny_config() -> FcfConfig {
        let mut c = FcfConfig::default();
        c.generator.resolution = 32;
        c.generator.channel_base = 16;
        c.generator.channel_max = 32;
        c.generator.z_dim = 8;
        c.generator.enc_dim = 16;
        c.generator.mapping_layers = 2;
        c.generator.faf_blocks = ResMap::from_pairs(&[(32, 1)]);
        c.discriminator.channel_base = 8;
        c.discriminator.channel_max = 16;
        c.hrfpl.width = 4;
        c.train.batch = 2;
        c.data.stripes_count = 16;
        c
    }

    #[test]
    fn phases_update_only_their_network() {
        let cfg = tiny_config();
        let mut state = TrainState::<f32>::new(&cfg).unwrap();
        let trainer = Trainer::<f32>::from_config(&cfg).unwrap();
        let batch = trainer.batch(&cfg, 0).unwrap();
        let before = state.clone();
        let m = train_step(&mut state, trainer.extractor.as_ref(), &batch).unwrap();
        assert!(m.r1.is_some());
        for id in state.dis.params.ids() {
            assert_eq!(state.dis.params.name(id), before.dis.params.name(id));
        }
        let changed = |a: &ParamStore<f32>, b: &ParamStore<f32>| a.ids().filter(|&id| a.get(id) != b.get(id)).count();
        assert!(changed(&state.dis.params, &before.dis.params) > 0);
        assert!(changed(&state.gen.params, &before.gen.params) > 0);

        // The generator phase alone, with the discriminator update removed,
        // leaves the discriminator untouched.
        let mut only_g = before.clone();
        only_g.d_opt.lr = 0.0;
        train_step(&mut only_g, trainer.extractor.as_ref(), &batch).unwrap();
        assert!(only_g.dis.params.same_values(&before.dis.params));
        let mut only_d = before.clone();
        only_d.g_opt.lr = 0.0;
        train_step(&mut only_d, trainer.extractor.as_ref(), &batch).unwrap();
        assert!(only_d.gen.params.same_values(&before.gen.params));
    }

    #[test]
    fn lazy_r1_schedule() {
        let cfg = FcfConfig::default();
        let applied: Vec<f64> = (0..32).filter_map(|s| r1_weight_at(s, &cfg)).collect();
        assert_eq!(applied, vec![16.0 * 5.0, 16.0 * 5.0]);
    }

    #[test]
    fn disabled_terms_leave_the_adversarial_loss() {
        let mut cfg = tiny_config();
        cfg.loss.use_rec = false;
        cfg.loss.use_hrfpl = false;
        let mut state = TrainState::<f32>::new(&cfg).unwrap();
        let trainer = Trainer::<f32>::from_config(&cfg).unwrap();
        let batch = trainer.batch(&cfg, 0).unwrap();
        let m = train_step(&mut state, trainer.extractor.as_ref(), &batch).unwrap();
        assert_eq!(m.g_total, m.g_adv);
        assert!(m.g_rec.is_none() && m.g_hrfpl.is_none());
    }

    #[test]
    fn non_finite_input_is_reported_and_state_kept() {
        let cfg = tiny_config();
        let mut state = TrainState::<f32>::new(&cfg).unwrap();
        let trainer = Trainer::<f32>::from_config(&cfg).unwrap();
        let mut batch = trainer.batch(&cfg, 0).unwrap();
        batch.images.data_mut()[0] = f32::NAN;
        let before = state.clone();
        let err = train_step(&mut state, trainer.extractor.as_ref(), &batch).unwrap_err();
        assert!(matches!(err, FcfError::NonFiniteLoss { .. }), "{err}");
        assert!(state.gen.params.same_values(&before.gen.params));
        assert!(state.dis.params.same_values(&before.dis.params));
        assert_eq!(state.step, 0);
    }

    #[test]
    fn ema_tracks_the_generator() {
        let mut cfg = tiny_config();
        cfg.train.ema = true;
        cfg.train.ema_beta = 0.5;
        let mut state = TrainState::<f32>::new(&cfg).unwrap();
        let trainer = Trainer::<f32>::from_config(&cfg).unwrap();
        let start = state.gen.params.clone();
        let batch = trainer.batch(&cfg, 0).unwrap();
        train_step(&mut state, trainer.extractor.as_ref(), &batch).unwrap();
        let ema = state.ema.as_ref().unwrap();
        let id = state.gen.params.find("enc.fc.weight").unwrap();
        let want = start.get(id).zip_map(state.gen.params.get(id), |a, b| 0.5 * a + 0.5 * b);
        assert_eq!(ema.get(id), &want);
    }
}
