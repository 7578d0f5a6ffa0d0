//! Pluggable multi-stage feature extractors used by the perceptual loss
//! and by evaluation embeddings.

use std::path::Path;
use std::sync::Arc;

use fcf_tensor::{ConvOpts, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::HrfplConfig;
use crate::error::{FcfError, Result};

/// Shape metadata of one extractor stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageInfo {
    pub channels: usize,
    pub stride: usize,
}

/// Ordered, differentiable feature stages with fixed weights.
pub trait FeatureExtractor<T: Scalar>: Send + Sync {
    /// Identity tag recorded with every derived metric.
    fn tag(&self) -> String;

    fn stage_info(&self) -> Vec<StageInfo>;

    /// Features of a `(B, 3, H, W)` batch, one value per stage.
    fn stages<'t>(&self, x: Var<'t, T>) -> Result<Vec<Var<'t, T>>>;
}

/// Single stage returning its input.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityExtractor;

impl<T: Scalar> FeatureExtractor<T> for IdentityExtractor {
    fn tag(&self) -> String {
        "identity".into()
    }

    fn stage_info(&self) -> Vec<StageInfo> {
        vec![StageInfo { channels: 0, stride: 1 }]
    }

    fn stages<'t>(&self, x: Var<'t, T>) -> Result<Vec<Var<'t, T>>> {
        Ok(vec![x])
    }
}

/// One dilated 3x3 convolution followed by leaky ReLU, optionally preceded
/// by 2x average pooling.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvStage {
    pub pool: bool,
    pub dilation: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    /// `(out, in, 3, 3)` row-major.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

/// Stack of [`ConvStage`]s with fixed weights; every stage is a feature
/// output.
#[derive(Clone, Debug)]
pub struct ConvStackExtractor<T: Scalar> {
    tag: String,
    stages: Vec<ConvStage>,
    weights: Vec<(Arc<Tensor<T>>, Arc<Tensor<T>>)>,
}

#[derive(Serialize, Deserialize)]
struct ConvStackFile {
    tag: String,
    stages: Vec<ConvStage>,
}

impl<T: Scalar> ConvStackExtractor<T> {
    pub fn new(tag: String, stages: Vec<ConvStage>) -> Result<Self> {
        let mut prev = 3;
        let mut weights = Vec::new();
        for (i, s) in stages.iter().enumerate() {
            if s.in_ch != prev || s.weight.len() != s.out_ch * s.in_ch * 9 || s.bias.len() != s.out_ch || s.dilation == 0 {
                return Err(FcfError::Invalid(format!("extractor `{tag}` stage {i} has inconsistent shapes")));
            }
            prev = s.out_ch;
            let w = Tensor::new(&[s.out_ch, s.in_ch, 3, 3], s.weight.iter().map(|&v| T::lit(v as f64)).collect());
            let b = Tensor::new(&[1, s.out_ch, 1, 1], s.bias.iter().map(|&v| T::lit(v as f64)).collect());
            weights.push((Arc::new(w), Arc::new(b)));
        }
        if stages.is_empty() {
            return Err(FcfError::Invalid(format!("extractor `{tag}` has no stages")));
        }
        Ok(Self { tag, stages, weights })
    }

    /// Four fixed-seed random stages with dilations 1, 2, 4, 8 over three
    /// scales: a self-contained stand-in for a pretrained backbone.
    pub fn random_multiscale(seed: u64, width: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plan = [(false, 1, 3, width), (true, 2, width, 2 * width), (true, 4, 2 * width, 4 * width), (false, 8, 4 * width, 4 * width)];
        let stages = plan
            .iter()
            .map(|&(pool, dilation, in_ch, out_ch)| {
                let std = (2.0 / (in_ch * 9) as f64).sqrt();
                ConvStage {
                    pool,
                    dilation,
                    in_ch,
                    out_ch,
                    weight: Tensor::<f32>::randn(&[out_ch * in_ch * 9], std, &mut rng).into_data(),
                    bias: vec![0.0; out_ch],
                }
            })
            .collect();
        Self::new(format!("random_multiscale(seed={seed},width={width})"), stages).expect("consistent plan")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FcfError::file(path, e))?;
        let f: ConvStackFile = serde_json::from_str(&text).map_err(|e| FcfError::file(path, e))?;
        Self::new(f.tag, f.stages)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = ConvStackFile {
            tag: self.tag.clone(),
            stages: self.stages.clone(),
        };
        let text = serde_json::to_string(&f).map_err(|e| FcfError::file(path, e))?;
        std::fs::write(path, text).map_err(|e| FcfError::file(path, e))
    }
}

impl<T: Scalar> FeatureExtractor<T> for ConvStackExtractor<T> {
    fn tag(&self) -> String {
        self.tag.clone()
    }

    fn stage_info(&self) -> Vec<StageInfo> {
        let mut stride = 1;
        self.stages
            .iter()
            .map(|s| {
                if s.pool {
                    stride *= 2;
                }
                StageInfo { channels: s.out_ch, stride }
            })
            .collect()
    }

    fn stages<'t>(&self, x: Var<'t, T>) -> Result<Vec<Var<'t, T>>> {
        let s = x.shape();
        let stride = self.stage_info().last().map(|i| i.stride).unwrap_or(1);
        if s.len() != 4 || s[1] != 3 || s[2] % stride != 0 || s[3] % stride != 0 || s[2] < 2 * stride {
            return Err(FcfError::shape(
                "feature extractor",
                format!("`{}` needs (B, 3, H, W) with H, W multiples of {stride}, got {s:?}", self.tag),
            ));
        }
        let tape = x.tape();
        let mut h = x;
        let mut out = Vec::with_capacity(self.stages.len());
        for (st, (w, b)) in self.stages.iter().zip(&self.weights) {
            if st.pool {
                h = h.avg_pool2x();
            }
            let y = h.conv2d(tape.constant_shared(w.clone()), ConvOpts::dilated(3, st.dilation));
            h = (y + tape.constant_shared(b.clone())).leaky_relu(0.2);
            out.push(h);
        }
        Ok(out)
    }
}

/// Registered extractor names.
pub const EXTRACTORS: &[&str] = &["random_multiscale", "identity", "conv_stack_file"];

/// Extractor named by `hrfpl.extractor`.
pub fn extractor_from_config<T: Scalar>(c: &HrfplConfig) -> Result<Arc<dyn FeatureExtractor<T>>> {
    match c.extractor.as_str() {
        "random_multiscale" => Ok(Arc::new(ConvStackExtractor::<T>::random_multiscale(c.seed, c.width))),
        "identity" => Ok(Arc::new(IdentityExtractor)),
        "conv_stack_file" => {
            if c.weights.is_empty() {
                return Err(FcfError::Invalid("hrfpl.weights must name the extractor weight file".into()));
            }
            Ok(Arc::new(ConvStackExtractor::<T>::load(Path::new(&c.weights))?))
        }
        other => Err(FcfError::Invalid(format!(
            "unknown extractor `{other}`; available: {}",
            EXTRACTORS.join(", ")
        ))),
    }
}
