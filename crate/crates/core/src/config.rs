//! Flat `section.key = value` configuration with presets, overrides and
//! validation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::data::{CropMode, DataSource};
use crate::error::ConfigError;
use crate::generator::{FafVariant, StyleInit};
use crate::masks::MaskStrategy;
use crate::spectral::{LfuMode, NormKind};

/// Per-resolution integer table written as `32:1,64:1`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ResMap(pub BTreeMap<usize, usize>);

/// Per-resolution real table written as `64:0.75`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResFloatMap(pub BTreeMap<usize, f64>);

/// Comma separated reals.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FloatList(pub Vec<f64>);

fn parse_pairs<V: FromStr>(s: &str) -> Result<BTreeMap<usize, V>, String>
where
    V::Err: fmt::Display,
{
    let mut out = BTreeMap::new();
    for item in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = item
            .split_once(':')
            .ok_or_else(|| format!("expected `resolution:value`, got `{item}`"))?;
        let k: usize = k.trim().parse().map_err(|e| format!("resolution `{k}`: {e}"))?;
        let v: V = v.trim().parse().map_err(|e| format!("value `{v}`: {e}"))?;
        out.insert(k, v);
    }
    Ok(out)
}

fn write_pairs<V: fmt::Display>(f: &mut fmt::Formatter<'_>, m: &BTreeMap<usize, V>) -> fmt::Result {
    let parts: Vec<String> = m.iter().map(|(k, v)| format!("{k}:{v}")).collect();
    f.write_str(&parts.join(","))
}

impl FromStr for ResMap {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        parse_pairs(s).map(ResMap)
    }
}

impl fmt::Display for ResMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_pairs(f, &self.0)
    }
}

impl ResMap {
    pub fn get(&self, res: usize) -> usize {
        self.0.get(&res).copied().unwrap_or(0)
    }

    pub fn from_pairs(pairs: &[(usize, usize)]) -> Self {
        Self(pairs.iter().copied().collect())
    }
}

impl FromStr for ResFloatMap {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        parse_pairs(s).map(ResFloatMap)
    }
}

impl fmt::Display for ResFloatMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_pairs(f, &self.0)
    }
}

impl FromStr for FloatList {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        s.split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(|p| p.parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
            .collect::<Result<Vec<_>, _>>()
            .map(FloatList)
    }
}

impl fmt::Display for FloatList {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|v| v.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

config_section! {
    /// Encoder, mapping network and coarse-to-fine synthesis.
    pub struct GeneratorConfig("generator") {
        resolution: usize = 64,
        /// Channels at the output resolution; doubles per halving.
        channel_base: usize = 16,
        channel_max: usize = 128,
        /// Dimension of both the noise latent and the mapped latent.
        z_dim: usize = 64,
        enc_dim: usize = 128,
        mapping_layers: usize = 8,
        mapping_lr_mul: f64 = 0.01,
        faf_blocks: ResMap = ResMap::from_pairs(&[(32, 1), (64, 1)]),
        faf_variant: FafVariant = FafVariant::MergeThenFafres,
        alpha_g: f64 = 0.5,
        alpha_g_per_res: ResFloatMap = ResFloatMap::default(),
        lfu_mode: LfuMode = LfuMode::SpatialSplit,
        ffc_norm: NormKind = NormKind::Affine,
        noise: bool = false,
        /// Permits FaF-Syn below 32x32 (ablation only).
        allow_coarse_faf: bool = false,
        style_init: StyleInit = StyleInit::Random,
    }
}

config_section! {
    /// Residual discriminator.
    pub struct DiscriminatorConfig("discriminator") {
        channel_base: usize = 16,
        channel_max: usize = 128,
        mbstd: bool = false,
        mbstd_group: usize = 4,
    }
}

config_section! {
    /// Loss weights and ablation switches.
    pub struct LossConfig("loss") {
        lambda_rec: f64 = 10.0,
        lambda_hrfpl: f64 = 5.0,
        lambda_reg: f64 = 5.0,
        use_rec: bool = true,
        use_hrfpl: bool = true,
    }
}

config_section! {
    /// Perceptual feature extractor plug-in.
    pub struct HrfplConfig("hrfpl") {
        extractor: String = "random_multiscale".to_string(),
        weights: String = String::new(),
        seed: u64 = 1234,
        width: usize = 16,
    }
}

config_section! {
    /// Optimisation schedule.
    pub struct TrainConfig("train") {
        lr: f64 = 0.001,
        beta1: f64 = 0.0,
        beta2: f64 = 0.99,
        eps: f64 = 1e-8,
        batch: usize = 8,
        total_images: u64 = 16_000,
        r1_interval: u64 = 16,
        snapshot_every: u64 = 500,
        seed: u64 = 0,
        ema: bool = false,
        ema_beta: f64 = 0.999,
    }
}

config_section! {
    /// Training/evaluation image source.
    pub struct DataConfig("data") {
        source: DataSource = DataSource::Stripes,
        root: String = String::new(),
        mode: CropMode = CropMode::RandomCrop,
        /// Size of the generated set when `source = stripes`.
        stripes_count: usize = 512,
        seed: u64 = 0,
    }
}

config_section! {
    /// Hole generation. Geometry is given in pixels at 256x256 and scaled
    /// with the image size.
    pub struct MaskConfig("mask") {
        strategy: MaskStrategy = MaskStrategy::FreeForm,
        folder: String = String::new(),
        strokes_min: usize = 1,
        strokes_max: usize = 5,
        width_min: f64 = 10.0,
        width_max: f64 = 40.0,
        joints_min: usize = 4,
        joints_max: usize = 12,
        rects_min: usize = 0,
        rects_max: usize = 3,
        rect_area_min: f64 = 0.05,
        rect_area_max: f64 = 0.25,
        ratio_min: f64 = 0.1,
        ratio_max: f64 = 0.7,
        max_retries: usize = 200,
        seed: u64 = 0,
    }
}

config_section! {
    /// Evaluation reporting.
    pub struct EvalConfig("eval") {
        bins: FloatList = FloatList(vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 1.0]),
        grid_rows: usize = 4,
    }
}

/// Complete resolved configuration.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FcfConfig {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub loss: LossConfig,
    pub hrfpl: HrfplConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub mask: MaskConfig,
    pub eval: EvalConfig,
}

string_enum! {
    /// Named starting points for a configuration.
    pub enum Preset {
        /// 64x64, small widths, self-contained extractors.
        Desk => "desk",
        /// 256x256 with the published hyperparameters.
        Paper => "paper",
        /// 512x512 variant of the published setup.
        Paper512 => "paper512",
    }
}

impl FcfConfig {
    pub fn preset(p: Preset) -> Self {
        let mut c = Self::default();
        match p {
            Preset::Desk => {}
            Preset::Paper | Preset::Paper512 => {
                let hi = p == Preset::Paper512;
                c.generator.resolution = if hi { 512 } else { 256 };
                c.generator.channel_base = if hi { 32 } else { 64 };
                c.generator.channel_max = 512;
                c.generator.z_dim = 512;
                c.generator.enc_dim = 1024;
                let mut blocks = vec![(32, 1), (64, 1), (128, 1), (256, 1)];
                if hi {
                    blocks.push((512, 1));
                }
                c.generator.faf_blocks = ResMap::from_pairs(&blocks);
                c.discriminator.channel_base = c.generator.channel_base;
                c.discriminator.channel_max = 512;
                c.discriminator.mbstd = true;
                c.train.batch = if hi { 32 } else { 128 };
                c.train.total_images = 25_000_000;
                c.train.snapshot_every = 5_000;
                c.data.source = DataSource::Folder;
                c.hrfpl.width = 64;
            }
        }
        c
    }

    /// Every fully qualified key, in canonical order.
    pub fn keys() -> Vec<String> {
        Self::default().entries().into_iter().map(|(k, _)| k).collect()
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        let mut out = self.generator.entries();
        out.extend(self.discriminator.entries());
        out.extend(self.loss.entries());
        out.extend(self.hrfpl.entries());
        out.extend(self.train.entries());
        out.extend(self.data.entries());
        out.extend(self.mask.entries());
        out.extend(self.eval.entries());
        out
    }

    pub fn get(&self, key: &str) -> Option<String> {
        self.entries().into_iter().find(|(k, _)| k == key).map(|(_, v)| v)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let key = key.trim();
        let known = match key.split_once('.') {
            Some((section, field)) => match section {
                "generator" => self.generator.set(field, value)?,
                "discriminator" => self.discriminator.set(field, value)?,
                "loss" => self.loss.set(field, value)?,
                "hrfpl" => self.hrfpl.set(field, value)?,
                "train" => self.train.set(field, value)?,
                "data" => self.data.set(field, value)?,
                "mask" => self.mask.set(field, value)?,
                "eval" => self.eval.set(field, value)?,
                _ => false,
            },
            None => false,
        };
        if known {
            Ok(())
        } else {
            Err(ConfigError::UnknownKey {
                key: key.to_string(),
                suggestion: nearest_key(key),
            })
        }
    }

    /// Parses `section.key = value` lines on top of `self`. `#` starts a
    /// comment; blank lines are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            s.push_str(&k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        }
        s
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Field-level checks. All problems are reported, not only the first.
    pub fn validate(&self) -> Result<(), Vec<ConfigError>> {
        let mut errs = Vec::new();
        let mut bad = |key: &str, reason: String| errs.push(ConfigError::invalid(key, reason));
        let g = &self.generator;
        if !g.resolution.is_power_of_two() || g.resolution < 8 {
            bad("generator.resolution", format!("must be a power of two >= 8, got {}", g.resolution));
        }
        if g.channel_base == 0 || g.channel_max < g.channel_base {
            bad("generator.channel_max", "must be >= channel_base >= 1".into());
        }
        for (key, v) in [("generator.z_dim", g.z_dim), ("generator.enc_dim", g.enc_dim), ("generator.mapping_layers", g.mapping_layers)] {
            if v == 0 {
                bad(key, "must be positive".into());
            }
        }
        if !(g.mapping_lr_mul > 0.0) {
            bad("generator.mapping_lr_mul", "must be positive".into());
        }
        if !(0.0..=1.0).contains(&g.alpha_g) {
            bad("generator.alpha_g", format!("must lie in [0, 1], got {}", g.alpha_g));
        }
        for (&r, &a) in &g.alpha_g_per_res.0 {
            if !(0.0..=1.0).contains(&a) {
                bad("generator.alpha_g_per_res", format!("ratio at {r} must lie in [0, 1], got {a}"));
            }
        }
        for (&r, &l) in &g.faf_blocks.0 {
            if !r.is_power_of_two() || r < 4 || r > g.resolution {
                bad("generator.faf_blocks", format!("{r} is not a generator resolution"));
            } else if l > 0 && r < 32 && !g.allow_coarse_faf {
                bad(
                    "generator.faf_blocks",
                    format!("FaF-Syn at {r}x{r} is an ablation setting; set generator.allow_coarse_faf = true"),
                );
            }
        }
        let d = &self.discriminator;
        if d.channel_base == 0 || d.channel_max < d.channel_base {
            bad("discriminator.channel_max", "must be >= channel_base >= 1".into());
        }
        if d.mbstd && d.mbstd_group == 0 {
            bad("discriminator.mbstd_group", "must be positive".into());
        }
        let l = &self.loss;
        for (key, v) in [("loss.lambda_rec", l.lambda_rec), ("loss.lambda_hrfpl", l.lambda_hrfpl), ("loss.lambda_reg", l.lambda_reg)] {
            if !(v >= 0.0) || !v.is_finite() {
                bad(key, format!("must be a finite nonnegative number, got {v}"));
            }
        }
        let t = &self.train;
        if !(t.lr > 0.0) {
            bad("train.lr", format!("must be positive, got {}", t.lr));
        }
        if !(0.0..1.0).contains(&t.beta1) {
            bad("train.beta1", "must lie in [0, 1)".into());
        }
        if !(0.0..1.0).contains(&t.beta2) {
            bad("train.beta2", "must lie in [0, 1)".into());
        }
        if t.batch == 0 {
            bad("train.batch", "must be >= 1".into());
        }
        if t.total_images == 0 {
            bad("train.total_images", "must be >= 1".into());
        }
        if t.r1_interval == 0 {
            bad("train.r1_interval", "must be >= 1".into());
        }
        if t.snapshot_every == 0 {
            bad("train.snapshot_every", "must be >= 1".into());
        }
        if !(0.0..1.0).contains(&t.ema_beta) {
            bad("train.ema_beta", "must lie in [0, 1)".into());
        }
        let m = &self.mask;
        if !(0.0 <= m.ratio_min && m.ratio_min <= m.ratio_max && m.ratio_max <= 1.0) {
            bad("mask.ratio_min", format!("ratio bounds [{}, {}] must be ordered inside [0, 1]", m.ratio_min, m.ratio_max));
        }
        if m.strokes_min > m.strokes_max {
            bad("mask.strokes_min", "exceeds mask.strokes_max".into());
        }
        if m.joints_min > m.joints_max || m.joints_min == 0 {
            bad("mask.joints_min", "must be >= 1 and <= mask.joints_max".into());
        }
        if m.rects_min > m.rects_max {
            bad("mask.rects_min", "exceeds mask.rects_max".into());
        }
        if !(m.width_min > 0.0 && m.width_min <= m.width_max) {
            bad("mask.width_min", "must be positive and <= mask.width_max".into());
        }
        if !(0.0 <= m.rect_area_min && m.rect_area_min <= m.rect_area_max && m.rect_area_max <= 1.0) {
            bad("mask.rect_area_min", "rectangle area bounds must be ordered inside [0, 1]".into());
        }
        if m.max_retries == 0 {
            bad("mask.max_retries", "must be >= 1".into());
        }
        let bins = &self.eval.bins.0;
        if bins.len() < 2 || bins[0] != 0.0 || *bins.last().unwrap_or(&0.0) != 1.0 || bins.windows(2).any(|w| w[0] >= w[1]) {
            bad("eval.bins", "edges must increase strictly from 0 to 1".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }

    /// Number of optimisation steps implied by the image budget.
    pub fn total_steps(&self) -> u64 {
        self.train.total_images.div_ceil(self.train.batch.max(1) as u64)
    }
}

fn nearest_key(key: &str) -> Option<String> {
    FcfConfig::keys()
        .into_iter()
        .map(|k| (strsim::levenshtein(key, &k), k))
        .min_by_key(|(d, _)| *d)
        .filter(|(d, k)| *d <= k.len() / 2)
        .map(|(_, k)| k)
}
