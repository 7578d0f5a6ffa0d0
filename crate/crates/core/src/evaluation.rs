//! Quantitative metrics (FID, feature-space perceptual distance, masked
//! pixel metrics), ratio-binned reports and image grids.

use std::path::Path;

use fcf_tensor::{Scalar, Tape, Tensor};
use image::{Rgb, RgbImage};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Serialize, Serializer};

use crate::data::{derive_rng, stack, tensor_to_rgb, Dataset};
use crate::error::{FcfError, Result};
use crate::extractor::FeatureExtractor;
use crate::generator::Generator;
use crate::masks::{check_binary, masked_ratios, MaskSource};

/// Per-image embedding vectors and the identity of the embedder.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub tag: String,
    pub rows: Vec<Vec<f64>>,
}

impl EmbeddingSet {
    pub fn new(tag: impl Into<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        if let Some(first) = rows.first() {
            if rows.iter().any(|r| r.len() != first.len()) {
                return Err(FcfError::Invalid("embedding rows differ in dimension".into()));
            }
        }
        Ok(Self { tag: tag.into(), rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    /// Mean vector and unbiased covariance.
    pub fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let (n, d) = (self.len(), self.dim());
        let x = DMatrix::from_fn(n, d, |i, j| self.rows[i][j]);
        let mu = x.row_mean().transpose();
        let centred = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mu[j]);
        let cov = centred.transpose() * &centred / (n.saturating_sub(1).max(1) as f64);
        (mu, cov)
    }
}

/// Spatially pooled features of every stage, concatenated.
pub fn embed<T: Scalar>(images: &Tensor<T>, extractor: &dyn FeatureExtractor<T>) -> Result<EmbeddingSet> {
    let b = images.shape()[0];
    let tape = Tape::new();
    let stages = tape.no_grad(|| extractor.stages(tape.constant(images.clone())))?;
    let mut rows = vec![Vec::new(); b];
    for s in stages {
        let v = s.value();
        let (_, c, h, w) = v.dims4();
        for (bi, row) in rows.iter_mut().enumerate() {
            for ci in 0..c {
                let plane = &v.data()[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                row.push(plane.iter().map(|x| x.to_f64_lossy()).sum::<f64>() / (h * w) as f64);
            }
        }
    }
    EmbeddingSet::new(extractor.tag(), rows)
}

/// Square root of a symmetric positive semi-definite matrix. Eigenvalues
/// below zero are clamped; values below `-1e-6` (relative to the largest
/// magnitude) are reported.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -1e-6 * scale {
        log::warn!("matrix square root: clamping eigenvalue {min:e}");
    }
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `Tr((s1 s2)^(1/2))` for covariance matrices, through the similar
/// symmetric matrix `s1^(1/2) s2 s1^(1/2)`.
pub fn trace_sqrt_product(s1: &DMatrix<f64>, s2: &DMatrix<f64>) -> f64 {
    let a = sqrtm_psd(s1);
    let m = &a * s2 * &a;
    let eig = SymmetricEigen::new((&m + m.transpose()) * 0.5);
    eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum()
}

/// Frechet distance between two Gaussians.
pub fn fid_from_moments(mu1: &DVector<f64>, s1: &DMatrix<f64>, mu2: &DVector<f64>, s2: &DMatrix<f64>) -> f64 {
    let d = mu1 - mu2;
    let v = d.dot(&d) + s1.trace() + s2.trace() - 2.0 * trace_sqrt_product(s1, s2);
    v.max(0.0)
}

/// Frechet distance between Gaussian fits of two embedding sets.
pub fn fid(real: &EmbeddingSet, fake: &EmbeddingSet) -> Result<f64> {
    if real.tag != fake.tag {
        return Err(FcfError::EmbedderMismatch {
            left: real.tag.clone(),
            right: fake.tag.clone(),
        });
    }
    if real.is_empty() || fake.is_empty() || real.dim() != fake.dim() {
        return Err(FcfError::Invalid(format!(
            "fid needs two nonempty sets of equal dimension, got {}x{} and {}x{}",
            real.len(),
            real.dim(),
            fake.len(),
            fake.dim()
        )));
    }
    if real.len().min(fake.len()) <= real.dim() {
        log::warn!(
            "fid with {} samples in {} dimensions: covariance estimates are rank deficient",
            real.len().min(fake.len()),
            real.dim()
        );
    }
    let (m1, s1) = real.moments();
    let (m2, s2) = fake.moments();
    Ok(fid_from_moments(&m1, &s1, &m2, &s2))
}

/// Per-image distance: channel-normalised feature differences, squared,
/// averaged over positions and summed over stages.
pub fn perceptual_distance<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, extractor: &dyn FeatureExtractor<T>) -> Result<Vec<f64>> {
    if a.shape() != b.shape() {
        return Err(FcfError::shape("perceptual_distance", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let tape = Tape::new();
    let (fa, fb) = tape.no_grad(|| -> Result<_> {
        Ok((extractor.stages(tape.constant(a.clone()))?, extractor.stages(tape.constant(b.clone()))?))
    })?;
    let n = a.shape()[0];
    let mut out = vec![0.0; n];
    for (sa, sb) in fa.iter().zip(&fb) {
        let (va, vb) = (sa.value(), sb.value());
        let (_, c, h, w) = va.dims4();
        let hw = h * w;
        for (bi, acc) in out.iter_mut().enumerate() {
            let mut total = 0.0;
            for p in 0..hw {
                let at = |v: &Tensor<T>, ci: usize| v.data()[(bi * c + ci) * hw + p].to_f64_lossy();
                let na = (0..c).map(|ci| at(&va, ci).powi(2)).sum::<f64>().sqrt() + 1e-10;
                let nb = (0..c).map(|ci| at(&vb, ci).powi(2)).sum::<f64>().sqrt() + 1e-10;
                total += (0..c).map(|ci| (at(&va, ci) / na - at(&vb, ci) / nb).powi(2)).sum::<f64>();
            }
            *acc += total / hw as f64;
        }
    }
    Ok(out)
}

/// Peak-to-peak range of images in [-1, 1].
pub const PSNR_PEAK: f64 = 2.0;

/// Errors over hole pixels only. A perfect fill has `psnr = +inf`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MaskedMetrics {
    pub l1: f64,
    #[serde(serialize_with = "ser_psnr")]
    pub psnr: f64,
}

fn ser_psnr<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str("+inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn masked_sums<T: Scalar>(comp: &Tensor<T>, org: &Tensor<T>, masks: &Tensor<T>, bi: usize) -> (f64, f64, usize) {
    let (_, c, h, w) = comp.dims4();
    let hw = h * w;
    let (mut abs, mut sq, mut n) = (0.0, 0.0, 0);
    for p in 0..hw {
        if masks.data()[bi * hw + p] != T::one() {
            continue;
        }
        for ci in 0..c {
            let i = (bi * c + ci) * hw + p;
            let d = comp.data()[i].to_f64_lossy() - org.data()[i].to_f64_lossy();
            abs += d.abs();
            sq += d * d;
            n += 1;
        }
    }
    (abs, sq, n)
}

fn metrics_from(abs: f64, sq: f64, n: usize) -> MaskedMetrics {
    let mse = sq / n as f64;
    let psnr = if mse == 0.0 { f64::INFINITY } else { 10.0 * (PSNR_PEAK * PSNR_PEAK / mse).log10() };
    MaskedMetrics { l1: abs / n as f64, psnr }
}

fn check_masked_inputs<T: Scalar>(comp: &Tensor<T>, org: &Tensor<T>, masks: &Tensor<T>) -> Result<()> {
    let (b, _, h, w) = org.dims4();
    if comp.shape() != org.shape() || masks.shape() != [b, 1, h, w] {
        return Err(FcfError::shape(
            "masked_pixel_metrics",
            format!("comp {:?}, org {:?}, masks {:?}", comp.shape(), org.shape(), masks.shape()),
        ));
    }
    check_binary(masks)
}

/// Masked metrics pooled over every hole pixel of the batch.
pub fn masked_pixel_metrics<T: Scalar>(comp: &Tensor<T>, org: &Tensor<T>, masks: &Tensor<T>) -> Result<MaskedMetrics> {
    check_masked_inputs(comp, org, masks)?;
    let (mut abs, mut sq, mut n) = (0.0, 0.0, 0);
    for bi in 0..org.shape()[0] {
        let (a, s, k) = masked_sums(comp, org, masks, bi);
        abs += a;
        sq += s;
        n += k;
    }
    if n == 0 {
        return Err(FcfError::InvalidMask("masked metrics are undefined for an empty hole".into()));
    }
    Ok(metrics_from(abs, sq, n))
}

/// Masked metrics of each image; `None` where the hole is empty.
pub fn masked_pixel_metrics_per_image<T: Scalar>(
    comp: &Tensor<T>,
    org: &Tensor<T>,
    masks: &Tensor<T>,
) -> Result<Vec<Option<MaskedMetrics>>> {
    check_masked_inputs(comp, org, masks)?;
    Ok((0..org.shape()[0])
        .map(|bi| {
            let (a, s, n) = masked_sums(comp, org, masks, bi);
            (n > 0).then(|| metrics_from(a, s, n))
        })
        .collect())
}

/// Default bin edges over the masked ratio.
pub const DEFAULT_BINS: [f64; 7] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RatioBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RatioBinReport {
    pub metric: String,
    pub bins: Vec<RatioBin>,
}

/// Bin index of `ratio`: bins are `[lo, hi)` except the last, which is
/// closed.
pub fn bin_index(edges: &[f64], ratio: f64) -> Option<usize> {
    let last = edges.len().checked_sub(2)?;
    if ratio < edges[0] || ratio > edges[last + 1] {
        return None;
    }
    Some((0..=last).find(|&i| ratio < edges[i + 1]).unwrap_or(last))
}

/// Mean and count per bin of `(ratio, value)` samples, accumulated in the
/// order given.
pub fn ratio_binned_report(metric: &str, samples: &[(f64, f64)], edges: &[f64]) -> Result<RatioBinReport> {
    if edges.len() < 2 || edges[0] != 0.0 || edges[edges.len() - 1] != 1.0 || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(FcfError::Invalid(format!("bin edges {edges:?} must increase strictly from 0 to 1")));
    }
    let mut sums = vec![(0usize, 0.0f64); edges.len() - 1];
    for &(r, v) in samples {
        let i = bin_index(edges, r).ok_or_else(|| FcfError::Invalid(format!("masked ratio {r} outside [0, 1]")))?;
        sums[i].0 += 1;
        sums[i].1 += v;
    }
    Ok(RatioBinReport {
        metric: metric.to_string(),
        bins: sums
            .iter()
            .enumerate()
            .map(|(i, &(count, sum))| RatioBin {
                lo: edges[i],
                hi: edges[i + 1],
                count,
                mean: (count > 0).then(|| sum / count as f64),
            })
            .collect(),
    })
}

/// Height of the label band above the tiles.
pub const LABEL_BAND: u32 = 9;

/// Tiles `rows[r][c]` (each `(3, H, W)` in [-1, 1]) into one image with a
/// label band naming the columns.
pub fn render_grid<T: Scalar>(rows: &[Vec<Tensor<T>>], labels: &[&str]) -> Result<RgbImage> {
    let first = rows.first().and_then(|r| r.first()).ok_or_else(|| FcfError::Invalid("empty grid".into()))?;
    let shape = first.shape().to_vec();
    let cols = rows[0].len();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(FcfError::shape("emit_grid", format!("tiles must be (3, H, W), got {shape:?}")));
    }
    if rows.iter().any(|r| r.len() != cols || r.iter().any(|t| t.shape() != shape.as_slice())) {
        return Err(FcfError::shape("emit_grid", "every row needs the same number of equally sized tiles"));
    }
    if labels.len() != cols {
        return Err(FcfError::Invalid(format!("{} labels for {cols} columns", labels.len())));
    }
    let (th, tw) = (shape[1] as u32, shape[2] as u32);
    let mut img = RgbImage::new(tw * cols as u32, LABEL_BAND + th * rows.len() as u32);
    for (c, label) in labels.iter().enumerate() {
        draw_text(&mut img, c as u32 * tw + 2, 2, tw.saturating_sub(2), label);
    }
    for (r, row) in rows.iter().enumerate() {
        for (c, t) in row.iter().enumerate() {
            let tile = tensor_to_rgb(t);
            image::imageops::replace(&mut img, &tile, (c as u32 * tw) as i64, (LABEL_BAND + r as u32 * th) as i64);
        }
    }
    Ok(img)
}

/// [`render_grid`] written as PNG.
pub fn emit_grid<T: Scalar>(rows: &[Vec<Tensor<T>>], labels: &[&str], path: &Path) -> Result<()> {
    let img = render_grid(rows, labels)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| FcfError::file(dir, e))?;
    }
    img.save(path).map_err(|e| FcfError::file(path, e))
}

const GLYPHS: &[(char, [&str; 5])] = &[
    ('A', [".#.", "#.#", "###", "#.#", "#.#"]),
    ('B', ["##.", "#.#", "##.", "#.#", "##."]),
    ('C', [".##", "#..", "#..", "#..", ".##"]),
    ('D', ["##.", "#.#", "#.#", "#.#", "##."]),
    ('E', ["###", "#..", "##.", "#..", "###"]),
    ('F', ["###", "#..", "##.", "#..", "#.."]),
    ('G', [".##", "#..", "#.#", "#.#", ".##"]),
    ('H', ["#.#", "#.#", "###", "#.#", "#.#"]),
    ('I', ["###", ".#.", ".#.", ".#.", "###"]),
    ('J', ["..#", "..#", "..#", "#.#", ".#."]),
    ('K', ["#.#", "#.#", "##.", "#.#", "#.#"]),
    ('L', ["#..", "#..", "#..", "#..", "###"]),
    ('M', ["#.#", "###", "###", "#.#", "#.#"]),
    ('N', ["##.", "#.#", "#.#", "#.#", "#.#"]),
    ('O', [".#.", "#.#", "#.#", "#.#", ".#."]),
    ('P', ["##.", "#.#", "##.", "#..", "#.."]),
    ('Q', [".#.", "#.#", "#.#", "##.", ".##"]),
    ('R', ["##.", "#.#", "##.", "#.#", "#.#"]),
    ('S', [".##", "#..", ".#.", "..#", "##."]),
    ('T', ["###", ".#.", ".#.", ".#.", ".#."]),
    ('U', ["#.#", "#.#", "#.#", "#.#", "###"]),
    ('V', ["#.#", "#.#", "#.#", "#.#", ".#."]),
    ('W', ["#.#", "#.#", "###", "###", "#.#"]),
    ('X', ["#.#", "#.#", ".#.", "#.#", "#.#"]),
    ('Y', ["#.#", "#.#", ".#.", ".#.", ".#."]),
    ('Z', ["###", "..#", ".#.", "#..", "###"]),
    ('0', ["###", "#.#", "#.#", "#.#", "###"]),
    ('1', [".#.", "##.", ".#.", ".#.", "###"]),
    ('2', ["##.", "..#", ".#.", "#..", "###"]),
    ('3', ["##.", "..#", ".#.", "..#", "##."]),
    ('4', ["#.#", "#.#", "###", "..#", "..#"]),
    ('5', ["###", "#..", "##.", "..#", "##."]),
    ('6', [".##", "#..", "###", "#.#", "###"]),
    ('7', ["###", "..#", ".#.", ".#.", ".#."]),
    ('8', ["###", "#.#", "###", "#.#", "###"]),
    ('9', ["###", "#.#", "###", "..#", "##."]),
    ('_', ["...", "...", "...", "...", "###"]),
    ('-', ["...", "...", "###", "...", "..."]),
    ('.', ["...", "...", "...", "...", ".#."]),
    (':', ["...", ".#.", "...", ".#.", "..."]),
    ('/', ["..#", "..#", ".#.", "#..", "#.."]),
    ('?', ["##.", "..#", ".#.", "...", ".#."]),
];

/// 3x5 bitmap text in white, clipped to `max_w` pixels.
fn draw_text(img: &mut RgbImage, x0: u32, y0: u32, max_w: u32, text: &str) {
    for (k, ch) in text.chars().enumerate() {
        let dx = k as u32 * 4;
        if dx + 3 > max_w {
            break;
        }
        let ch = ch.to_ascii_uppercase();
        if ch == ' ' {
            continue;
        }
        let rows = GLYPHS
            .iter()
            .find(|(c, _)| *c == ch)
            .or_else(|| GLYPHS.iter().find(|(c, _)| *c == '?'))
            .map(|(_, g)| g)
            .expect("fallback glyph");
        for (y, row) in rows.iter().enumerate() {
            for (x, b) in row.bytes().enumerate() {
                if b == b'#' {
                    img.put_pixel(x0 + dx + x as u32, y0 + y as u32, Rgb([255, 255, 255]));
                }
            }
        }
    }
}

/// Where an evaluation's inputs came from.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Provenance {
    pub embedder: String,
    pub mask_spec: String,
    pub checkpoint_hash: String,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalMetrics {
    pub fid: f64,
    pub perceptual: f64,
    pub masked: MaskedMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub samples: usize,
    pub metrics: EvalMetrics,
    pub ratio_bins: Vec<RatioBinReport>,
    pub provenance: Provenance,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

/// Every metric family for completions `comp` of `org` under `masks`.
pub fn evaluate_completions<T: Scalar>(
    org: &Tensor<T>,
    comp: &Tensor<T>,
    masks: &Tensor<T>,
    extractor: &dyn FeatureExtractor<T>,
    edges: &[f64],
    provenance: Provenance,
) -> Result<EvalReport> {
    let n = org.shape()[0];
    if n == 0 {
        return Err(FcfError::EmptyDataset("nothing to evaluate".into()));
    }
    let ratios = masked_ratios(masks)?;
    let per_image = masked_pixel_metrics_per_image(comp, org, masks)?;
    let masked = masked_pixel_metrics(comp, org, masks)?;
    let mut perceptual = Vec::with_capacity(n);
    let mut real_rows = Vec::with_capacity(n);
    let mut fake_rows = Vec::with_capacity(n);
    for start in (0..n).step_by(16) {
        let len = 16.min(n - start);
        let (o, c) = (org.narrow(0, start, len), comp.narrow(0, start, len));
        perceptual.extend(perceptual_distance(&c, &o, extractor)?);
        real_rows.extend(embed(&o, extractor)?.rows);
        fake_rows.extend(embed(&c, extractor)?.rows);
    }
    let tag = extractor.tag();
    let fid = fid(&EmbeddingSet::new(tag.clone(), real_rows)?, &EmbeddingSet::new(tag, fake_rows)?)?;
    let l1_samples: Vec<(f64, f64)> = ratios
        .iter()
        .zip(&per_image)
        .filter_map(|(&r, m)| m.map(|m| (r, m.l1)))
        .collect();
    let perc_samples: Vec<(f64, f64)> = ratios.iter().cloned().zip(perceptual.iter().cloned()).collect();
    Ok(EvalReport {
        samples: n,
        metrics: EvalMetrics {
            fid,
            perceptual: perceptual.iter().sum::<f64>() / n as f64,
            masked,
        },
        ratio_bins: vec![
            ratio_binned_report("masked_l1", &l1_samples, edges)?,
            ratio_binned_report("perceptual", &perc_samples, edges)?,
        ],
        provenance,
    })
}

/// Stream ids for evaluation masks and latents.
const EVAL_MASK_STREAM: u64 = 0xe1a5;
const EVAL_Z_STREAM: u64 = 0xe12;

/// Originals, completions and masks for every dataset item. Item `i` uses
/// mask and latent streams derived from `(seed, i)`.
pub fn complete_dataset(
    gen: &Generator<f32>,
    dataset: &Dataset,
    masks: &MaskSource,
    batch: usize,
    seed: u64,
) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
    if dataset.is_empty() {
        return Err(FcfError::EmptyDataset("evaluation set has no items".into()));
    }
    let res = gen.resolution();
    if dataset.resolution() != res {
        return Err(FcfError::shape("evaluate", format!("dataset at {} but model at {res}", dataset.resolution())));
    }
    let (mut orgs, mut comps, mut holes) = (Vec::new(), Vec::new(), Vec::new());
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(batch.max(1)) {
        let mut imgs = Vec::new();
        let mut ms = Vec::new();
        let mut zs = Vec::new();
        for &i in chunk {
            let mut rng = derive_rng(seed, i as u64, EVAL_MASK_STREAM);
            imgs.push(dataset.load(i, &mut rng)?);
            let m = match masks {
                MaskSource::Folder(list) => list[i % list.len()].clone(),
                MaskSource::Generated(_) => masks.sample(res, res, &mut rng)?,
            };
            ms.push(m.to_tensor::<f32>());
            zs.push(gen.sample_z(1, &mut derive_rng(seed, i as u64, EVAL_Z_STREAM)));
        }
        let (imgs, ms) = (stack(&imgs), stack(&ms));
        let z = Tensor::concat(&zs.iter().collect::<Vec<_>>(), 0);
        let comp = gen.inpaint(&imgs, &ms, &z)?;
        for k in 0..chunk.len() {
            orgs.push(imgs.narrow(0, k, 1));
            comps.push(comp.narrow(0, k, 1));
            holes.push(ms.narrow(0, k, 1));
        }
    }
    let cat = |v: &[Tensor<f32>]| Tensor::concat(&v.iter().collect::<Vec<_>>(), 0);
    Ok((cat(&orgs), cat(&comps), cat(&holes)))
}
