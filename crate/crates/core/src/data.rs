//! Image sources (synthetic stripes or an image folder), crop/resize
//! pipelines and seeded batch sampling.

use std::path::{Path, PathBuf};

use fcf_tensor::{Scalar, Tensor};
use image::imageops::FilterType;
use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::DataConfig;
use crate::error::{FcfError, Result};
use crate::masks::{list_images, MaskSource};

/// Environment variable overriding `data.root`.
pub const DATA_ROOT_ENV: &str = "FCF_DATA_ROOT";

string_enum! {
    pub enum DataSource {
        /// Seeded synthetic repeating stripes.
        Stripes => "stripes",
        /// PNG/JPEG files below `data.root`.
        Folder => "folder",
    }
}

string_enum! {
    pub enum CropMode {
        RandomCrop => "random_crop",
        Resize => "resize",
    }
}

/// Independent generator for `(seed, step, stream)`.
pub fn derive_rng(seed: u64, step: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r.set_word_pos((step as u128) << 20);
    let mixed: u64 = r.random();
    ChaCha8Rng::seed_from_u64(mixed ^ step.rotate_left(32) ^ stream)
}

/// `(3, H, W)` tensor in [-1, 1] from 8-bit RGB.
pub fn rgb_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f32 / 127.5 - 1.0
    })
}

/// 8-bit RGB from a `(3, H, W)` tensor in [-1, 1], clamping outside values.
pub fn tensor_to_rgb<T: Scalar>(t: &Tensor<T>) -> RgbImage {
    let s = t.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let d = t.data();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        image::Rgb([0, 1, 2].map(|c| to_u8(d[c * h * w + p].to_f64_lossy())))
    })
}

pub fn to_u8(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path).map_err(|e| FcfError::file(path, e))?.to_rgb8())
}

/// One stripes image: a smooth two-colour sinusoid of random period,
/// orientation and phase.
pub fn stripes_image(resolution: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let colors: [[f64; 3]; 2] = [0, 1].map(|_| [0, 1, 2].map(|_| rng.random_range(-0.9..0.9)));
    let period: f64 = rng.random_range(6.0..16.0) * resolution as f64 / 64.0;
    let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (c, s) = (theta.cos(), theta.sin());
    let n = resolution;
    Tensor::from_fn(&[3, n, n], |i| {
        let (ch, y, x) = (i / (n * n), (i / n) % n, i % n);
        let t = 0.5 + 0.5 * ((x as f64 * c + y as f64 * s) * std::f64::consts::TAU / period + phase).sin();
        (colors[0][ch] * t + colors[1][ch] * (1.0 - t)) as f32
    })
}

/// Indexable collection of training or evaluation images.
#[derive(Clone, Debug)]
pub enum Dataset {
    Stripes {
        resolution: usize,
        count: usize,
        seed: u64,
    },
    Folder {
        files: Vec<PathBuf>,
        resolution: usize,
        mode: CropMode,
    },
}

impl Dataset {
    pub fn from_config(c: &DataConfig, resolution: usize) -> Result<Self> {
        match c.source {
            DataSource::Stripes => Ok(Dataset::Stripes {
                resolution,
                count: c.stripes_count,
                seed: c.seed,
            }),
            DataSource::Folder => {
                let root = std::env::var(DATA_ROOT_ENV).unwrap_or_else(|_| c.root.clone());
                if root.is_empty() {
                    return Err(FcfError::EmptyDataset(format!(
                        "data.root is not set (or set {DATA_ROOT_ENV})"
                    )));
                }
                Self::folder(Path::new(&root), resolution, c.mode)
            }
        }
    }

    pub fn folder(root: &Path, resolution: usize, mode: CropMode) -> Result<Self> {
        let files = list_images(root)?;
        if files.is_empty() {
            return Err(FcfError::EmptyDataset(format!("no images below {}", root.display())));
        }
        Ok(Dataset::Folder {
            files,
            resolution,
            mode,
        })
    }

    pub fn len(&self) -> usize {
        match self {
            Dataset::Stripes { count, .. } => *count,
            Dataset::Folder { files, .. } => files.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn resolution(&self) -> usize {
        match self {
            Dataset::Stripes { resolution, .. } | Dataset::Folder { resolution, .. } => *resolution,
        }
    }

    /// Name of item `index` (file path or synthetic id).
    pub fn item_name(&self, index: usize) -> String {
        match self {
            Dataset::Stripes { .. } => format!("stripes_{index:05}"),
            Dataset::Folder { files, .. } => files[index].display().to_string(),
        }
    }

    /// `(3, R, R)` image in [-1, 1]; `rng` picks the crop window.
    pub fn load(&self, index: usize, rng: &mut ChaCha8Rng) -> Result<Tensor<f32>> {
        match self {
            Dataset::Stripes { resolution, seed, .. } => {
                let mut r = derive_rng(*seed, index as u64, 0x5752);
                Ok(stripes_image(*resolution, &mut r))
            }
            Dataset::Folder {
                files,
                resolution,
                mode,
            } => {
                let img = load_rgb(&files[index])?;
                let n = *resolution as u32;
                let img = match mode {
                    CropMode::Resize => {
                        if img.dimensions() == (n, n) {
                            img
                        } else {
                            image::imageops::resize(&img, n, n, FilterType::Triangle)
                        }
                    }
                    CropMode::RandomCrop => {
                        let (w, h) = img.dimensions();
                        if w < n || h < n {
                            return Err(FcfError::file(
                                &files[index],
                                format!("{w}x{h} is smaller than the {n}x{n} crop"),
                            ));
                        }
                        let x0 = rng.random_range(0..=w - n);
                        let y0 = rng.random_range(0..=h - n);
                        image::imageops::crop_imm(&img, x0, y0, n, n).to_image()
                    }
                };
                Ok(rgb_to_tensor(&img))
            }
        }
    }
}

/// Stacks `(C, H, W)` items into `(B, C, H, W)`.
pub fn stack<T: Scalar>(items: &[Tensor<T>]) -> Tensor<T> {
    let mut shape = vec![items.len()];
    shape.extend_from_slice(items[0].shape());
    let mut data = Vec::with_capacity(items.len() * items[0].len());
    for t in items {
        assert_eq!(t.shape(), items[0].shape(), "stack of mismatched items");
        data.extend_from_slice(t.data());
    }
    Tensor::new(&shape, data)
}

/// Images `(B, 3, R, R)` and masks `(B, 1, R, R)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T: Scalar> {
    pub images: Tensor<T>,
    pub masks: Tensor<T>,
}

/// Stream id separating batch sampling from other uses of a seed.
const BATCH_STREAM: u64 = 0xba7c;

/// Batch for `(seed, step)`. Items that fail to decode are skipped (and
/// logged) in favour of the next index.
pub fn sample_batch<T: Scalar>(
    dataset: &Dataset,
    masks: &MaskSource,
    batch: usize,
    seed: u64,
    step: u64,
) -> Result<Batch<T>> {
    if dataset.is_empty() {
        return Err(FcfError::EmptyDataset("dataset has no items".into()));
    }
    let mut rng = derive_rng(seed, step, BATCH_STREAM);
    let res = dataset.resolution();
    let mut images = Vec::with_capacity(batch);
    let mut holes = Vec::with_capacity(batch);
    let mut failures = 0;
    while images.len() < batch {
        let index = rng.random_range(0..dataset.len());
        match dataset.load(index, &mut rng) {
            Ok(img) => {
                images.push(img.cast::<T>());
                holes.push(masks.sample(res, res, &mut rng)?.to_tensor::<T>());
            }
            Err(e) => {
                log::warn!("skipping {}: {e}", dataset.item_name(index));
                failures += 1;
                if failures > 8 * dataset.len() + batch {
                    return Err(FcfError::EmptyDataset("no item of the dataset could be decoded".into()));
                }
            }
        }
    }
    Ok(Batch {
        images: stack(&images),
        masks: stack(&holes),
    })
}
