//! Hole masks: free-form brush strokes plus rectangles, evaluation presets
//! and mask folders.

use std::path::{Path, PathBuf};

use fcf_tensor::{Scalar, Tensor};
use rand::Rng;

use crate::config::MaskConfig;
use crate::error::{FcfError, Result};

string_enum! {
    pub enum MaskStrategy {
        /// Training masks.
        FreeForm => "free_form",
        /// Free-form geometry with ratio bounds [0.1, 0.3].
        Medium => "medium",
        /// Free-form geometry with ratio bounds [0.3, 0.6].
        Thick => "thick",
        /// Precomputed single-channel images from `mask.folder`.
        FromFolder => "from_folder",
    }
}

/// Binary hole map; 1 marks a pixel to fill.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Self::zeros(height, width);
        for y in 0..height {
            for x in 0..width {
                m.data[y * width + x] = f(y, x) as u8;
            }
        }
        m
    }

    /// Values must be exactly 0 or 1.
    pub fn from_values(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(FcfError::InvalidMask(format!(
                "{} values for a {height}x{width} mask",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(FcfError::InvalidMask(format!("non-binary value {v}")));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn set(&mut self, y: usize, x: usize, hole: bool) {
        self.data[y * self.width + x] = hole as u8;
    }

    pub fn hole_count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    /// `(1, H, W)` tensor of zeros and ones.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[1, self.height, self.width], |i| T::lit(self.data[i] as f64))
    }
}

/// Fraction of hole pixels, computed from the exact integer count.
pub fn masked_ratio(m: &Mask) -> f64 {
    m.hole_count() as f64 / (m.height * m.width) as f64
}

/// Per-sample masked ratio of a `(B, 1, H, W)` binary tensor.
pub fn masked_ratios<T: Scalar>(m: &Tensor<T>) -> Result<Vec<f64>> {
    let (b, c, h, w) = m.dims4();
    if c != 1 {
        return Err(FcfError::shape("masked_ratio", format!("expected one channel, got {c}")));
    }
    check_binary(m)?;
    Ok((0..b)
        .map(|i| {
            let n = m.data()[i * h * w..(i + 1) * h * w].iter().filter(|&&v| v == T::one()).count();
            n as f64 / (h * w) as f64
        })
        .collect())
}

pub fn check_binary<T: Scalar>(m: &Tensor<T>) -> Result<()> {
    match m.data().iter().find(|&&v| v != T::zero() && v != T::one()) {
        Some(v) => Err(FcfError::InvalidMask(format!("non-binary value {v}"))),
        None => Ok(()),
    }
}

/// Free-form geometry. Lengths are in pixels at 256x256 and scale with the
/// mask height.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    pub strokes: (usize, usize),
    pub width: (f64, f64),
    pub joints: (usize, usize),
    /// Length of one stroke segment.
    pub segment: (f64, f64),
    pub rects: (usize, usize),
    /// Area of one rectangle as a fraction of the image.
    pub rect_area: (f64, f64),
    pub ratio: (f64, f64),
    pub max_retries: usize,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self::from_config(&MaskConfig::default())
    }
}

impl MaskSpec {
    pub fn from_config(c: &MaskConfig) -> Self {
        let ratio = match c.strategy {
            MaskStrategy::Medium => (0.1, 0.3),
            MaskStrategy::Thick => (0.3, 0.6),
            MaskStrategy::FreeForm | MaskStrategy::FromFolder => (c.ratio_min, c.ratio_max),
        };
        Self {
            strokes: (c.strokes_min, c.strokes_max),
            width: (c.width_min, c.width_max),
            joints: (c.joints_min, c.joints_max),
            segment: (20.0, 80.0),
            rects: (c.rects_min, c.rects_max),
            rect_area: (c.rect_area_min, c.rect_area_max),
            ratio,
            max_retries: c.max_retries,
        }
    }

    pub fn preset(strategy: MaskStrategy) -> Self {
        Self::from_config(&MaskConfig {
            strategy,
            ..MaskConfig::default()
        })
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

fn count<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (usize, usize)) -> usize {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Paints every pixel whose centre lies within `radius` of segment `a-b`.
fn paint_segment(m: &mut Mask, a: (f64, f64), b: (f64, f64), radius: f64) {
    let (h, w) = (m.height as f64, m.width as f64);
    let y0 = (a.0.min(b.0) - radius).floor().max(0.0) as usize;
    let y1 = ((a.0.max(b.0) + radius).ceil().min(h - 1.0)).max(0.0) as usize;
    let x0 = (a.1.min(b.1) - radius).floor().max(0.0) as usize;
    let x1 = ((a.1.max(b.1) + radius).ceil().min(w - 1.0)).max(0.0) as usize;
    let (dy, dx) = (b.0 - a.0, b.1 - a.1);
    let len2 = dy * dy + dx * dx;
    let r2 = radius * radius;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let t = if len2 > 0.0 {
                (((py - a.0) * dy + (px - a.1) * dx) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (qy, qx) = (a.0 + t * dy - py, a.1 + t * dx - px);
            if qy * qy + qx * qx <= r2 {
                m.set(y, x, true);
            }
        }
    }
}

fn draw_candidate<R: Rng + ?Sized>(h: usize, w: usize, spec: &MaskSpec, rng: &mut R) -> Mask {
    let mut m = Mask::zeros(h, w);
    let scale = h as f64 / 256.0;
    let (hf, wf) = (h as f64, w as f64);
    for _ in 0..count(rng, spec.strokes) {
        let radius = uniform(rng, spec.width) * scale / 2.0;
        let mut p = (rng.random_range(0.0..hf), rng.random_range(0.0..wf));
        let mut angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        for _ in 0..count(rng, spec.joints) {
            angle += rng.random_range(-1.2..1.2);
            let len = uniform(rng, spec.segment) * scale;
            let q = (
                (p.0 + len * angle.sin()).clamp(0.0, hf),
                (p.1 + len * angle.cos()).clamp(0.0, wf),
            );
            paint_segment(&mut m, p, q, radius);
            p = q;
        }
    }
    for _ in 0..count(rng, spec.rects) {
        let area = uniform(rng, spec.rect_area) * hf * wf;
        let aspect: f64 = rng.random_range(0.5..2.0);
        let rw = ((area * aspect).sqrt().round() as usize).clamp(1, w);
        let rh = ((area / rw as f64).round() as usize).clamp(1, h);
        let y0 = rng.random_range(0..=h - rh);
        let x0 = rng.random_range(0..=w - rw);
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                m.set(y, x, true);
            }
        }
    }
    m
}

/// Free-form mask, redrawn until its masked ratio lies in `spec.ratio`.
pub fn generate_free_form_mask<R: Rng + ?Sized>(h: usize, w: usize, spec: &MaskSpec, rng: &mut R) -> Result<Mask> {
    if h < 32 || w < 32 {
        return Err(FcfError::InvalidMask(format!("free-form masks need extents >= 32, got {h}x{w}")));
    }
    let (lo, hi) = spec.ratio;
    let mut histogram = [0usize; 10];
    for _ in 0..spec.max_retries.max(1) {
        let m = draw_candidate(h, w, spec, rng);
        let r = masked_ratio(&m);
        if lo <= r && r <= hi {
            return Ok(m);
        }
        histogram[((r * 10.0) as usize).min(9)] += 1;
    }
    Err(FcfError::UnreachableRatio {
        lo,
        hi,
        tries: spec.max_retries.max(1),
        histogram,
    })
}

/// Reads one single-channel mask image; pixels above 127 are holes.
pub fn load_mask_file(path: &Path, h: usize, w: usize) -> Result<Mask> {
    let img = image::open(path).map_err(|e| FcfError::file(path, e))?.to_luma8();
    let (iw, ih) = img.dimensions();
    if (ih as usize, iw as usize) != (h, w) {
        return Err(FcfError::file(path, format!("mask is {ih}x{iw}, expected {h}x{w}")));
    }
    let data = img.as_raw().iter().map(|&v| (v > 127) as u8).collect();
    Mask::from_values(h, w, data)
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// Image files directly inside or below `dir`, sorted by path.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let entries = std::fs::read_dir(&d).map_err(|e| FcfError::file(&d, e))?;
        for entry in entries {
            let p = entry.map_err(|e| FcfError::file(&d, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else if is_image(&p) {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Every mask image in `dir`, sorted by path.
pub fn load_mask_folder(dir: &Path, h: usize, w: usize) -> Result<Vec<(PathBuf, Mask)>> {
    let files = list_images(dir)?;
    if files.is_empty() {
        return Err(FcfError::EmptyDataset(format!("no mask images in {}", dir.display())));
    }
    files
        .into_iter()
        .map(|p| load_mask_file(&p, h, w).map(|m| (p, m)))
        .collect()
}

/// Where masks come from during training or evaluation.
#[derive(Clone, Debug)]
pub enum MaskSource {
    Generated(MaskSpec),
    Folder(Vec<Mask>),
}

impl MaskSource {
    pub fn from_config(c: &MaskConfig, h: usize, w: usize) -> Result<Self> {
        match c.strategy {
            MaskStrategy::FromFolder => {
                let masks = load_mask_folder(Path::new(&c.folder), h, w)?;
                Ok(MaskSource::Folder(masks.into_iter().map(|(_, m)| m).collect()))
            }
            _ => Ok(MaskSource::Generated(MaskSpec::from_config(c))),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, h: usize, w: usize, rng: &mut R) -> Result<Mask> {
        match self {
            MaskSource::Generated(spec) => generate_free_form_mask(h, w, spec, rng),
            MaskSource::Folder(masks) => Ok(masks[rng.random_range(0..masks.len())].clone()),
        }
    }
}
