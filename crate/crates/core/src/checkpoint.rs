//! Single-file training snapshots: a tar archive holding `manifest.json` and
//! one little-endian blob per tensor.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use fcf_tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::FcfConfig;
use crate::error::{FcfError, Result};
use crate::nn::ParamStore;
use crate::spectral::FFT_CONVENTION;
use crate::training::TrainState;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Flags {
    pub ema: bool,
    pub mbstd: bool,
    pub noise: bool,
    pub rec_reduction: String,
    pub r1_interval: u64,
}

/// Every random draw is a pure function of `(seed, step, stream)`, so the
/// seed and the next step are the whole generator state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub scheme: String,
    pub seed: u64,
    pub next_step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub g_steps: u64,
    pub d_steps: u64,
    pub lr: f64,
    pub betas: [f64; 2],
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: String,
    pub fft_convention: String,
    pub config: String,
    pub config_hash: String,
    pub flags: Flags,
    pub step: u64,
    pub images_seen: u64,
    pub rng: RngState,
    pub optimizer: OptimizerState,
    pub tensors: Vec<TensorEntry>,
}

fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.len() * std::mem::size_of::<T>());
    for v in t.data() {
        let x = v.to_f64_lossy();
        if T::DTYPE == "f32" {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        } else {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

fn decode<T: Scalar>(bytes: &[u8], shape: &[usize], name: &str) -> Result<Tensor<T>> {
    let width = if T::DTYPE == "f32" { 4 } else { 8 };
    let n: usize = shape.iter().product();
    if bytes.len() != n * width {
        return Err(FcfError::Checkpoint(format!(
            "`{name}` holds {} bytes, shape {shape:?} needs {}",
            bytes.len(),
            n * width
        )));
    }
    let data = bytes
        .chunks_exact(width)
        .map(|c| {
            if width == 4 {
                T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64)
            } else {
                T::lit(f64::from_le_bytes(c.try_into().unwrap()))
            }
        })
        .collect();
    Ok(Tensor::new(shape, data))
}

fn groups<T: Scalar>(state: &TrainState<T>) -> Vec<(String, &ParamStore<T>, Option<&[Tensor<T>]>)> {
    let mut g = vec![
        ("generator".to_string(), &state.gen.params, None),
        ("discriminator".to_string(), &state.dis.params, None),
        ("adam.g.m".to_string(), &state.gen.params, Some(state.g_opt.m.as_slice())),
        ("adam.g.v".to_string(), &state.gen.params, Some(state.g_opt.v.as_slice())),
        ("adam.d.m".to_string(), &state.dis.params, Some(state.d_opt.m.as_slice())),
        ("adam.d.v".to_string(), &state.dis.params, Some(state.d_opt.v.as_slice())),
    ];
    if let Some(ema) = &state.ema {
        g.push(("ema".to_string(), ema, None));
    }
    g
}

fn manifest_for<T: Scalar>(state: &TrainState<T>) -> Manifest {
    let c = &state.config;
    Manifest {
        format_version: FORMAT_VERSION,
        dtype: T::DTYPE.to_string(),
        fft_convention: FFT_CONVENTION.to_string(),
        config: c.to_text(),
        config_hash: c.hash(),
        flags: Flags {
            ema: c.train.ema,
            mbstd: c.discriminator.mbstd,
            noise: c.generator.noise,
            rec_reduction: "mean".to_string(),
            r1_interval: c.train.r1_interval,
        },
        step: state.step,
        images_seen: state.images_seen,
        rng: RngState {
            scheme: "chacha8(seed, step, stream)".to_string(),
            seed: c.train.seed,
            next_step: state.step,
        },
        optimizer: OptimizerState {
            g_steps: state.g_opt.steps,
            d_steps: state.d_opt.steps,
            lr: c.train.lr,
            betas: [c.train.beta1, c.train.beta2],
            eps: c.train.eps,
        },
        tensors: Vec::new(),
    }
}

/// Writes `state` atomically: the archive is built next to `path` and
/// renamed into place only once it is complete and synced.
pub fn save_checkpoint<T: Scalar>(state: &TrainState<T>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| FcfError::file(dir, e))?;
    }
    let mut manifest = manifest_for(state);
    let mut blobs = Vec::new();
    for (prefix, store, values) in groups(state) {
        for id in store.ids() {
            let name = format!("{prefix}/{}", store.name(id));
            let t = values.map_or_else(|| store.get(id), |v| &v[id.index()]);
            let file = format!("tensors/{name}.bin");
            manifest.tensors.push(TensorEntry {
                name,
                shape: t.shape().to_vec(),
                file: file.clone(),
            });
            blobs.push((file, encode(t)));
        }
    }
    let tmp = tmp_path(path);
    let write = || -> std::io::Result<()> {
        let f = File::create(&tmp)?;
        let mut ar = tar::Builder::new(BufWriter::new(f));
        let json = serde_json::to_vec_pretty(&manifest).expect("manifest serialises");
        append(&mut ar, MANIFEST, &json)?;
        for (file, bytes) in &blobs {
            append(&mut ar, file, bytes)?;
        }
        let mut w = ar.into_inner()?;
        w.flush()?;
        w.get_ref().sync_all()?;
        Ok(())
    };
    if let Err(e) = write() {
        let _ = std::fs::remove_file(&tmp);
        return Err(FcfError::file(path, e));
    }
    std::fs::rename(&tmp, path).map_err(|e| FcfError::file(path, e))
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".partial");
    path.with_file_name(name)
}

fn append<W: Write>(ar: &mut tar::Builder<W>, name: &str, bytes: &[u8]) -> std::io::Result<()> {
    let mut h = tar::Header::new_gnu();
    h.set_size(bytes.len() as u64);
    h.set_mode(0o644);
    h.set_mtime(0);
    h.set_cksum();
    ar.append_data(&mut h, name, bytes)
}

/// Manifest and raw blobs of an archive.
pub fn read_archive(path: &Path) -> Result<(Manifest, std::collections::HashMap<String, Vec<u8>>)> {
    let f = File::open(path).map_err(|e| FcfError::file(path, e))?;
    let mut ar = tar::Archive::new(f);
    let mut files = std::collections::HashMap::new();
    for entry in ar.entries().map_err(|e| FcfError::file(path, e))? {
        let mut entry = entry.map_err(|e| FcfError::file(path, e))?;
        let name = entry
            .path()
            .map_err(|e| FcfError::file(path, e))?
            .to_string_lossy()
            .into_owned();
        let mut buf = Vec::new();
        entry.read_to_end(&mut buf).map_err(|e| FcfError::file(path, e))?;
        files.insert(name, buf);
    }
    let raw = files
        .remove(MANIFEST)
        .ok_or_else(|| FcfError::Checkpoint(format!("{} has no {MANIFEST}", path.display())))?;
    let manifest: Manifest =
        serde_json::from_slice(&raw).map_err(|e| FcfError::Checkpoint(format!("{}: {e}", path.display())))?;
    Ok((manifest, files))
}

/// Rebuilds a training state from an archive, checking version, dtype,
/// FFT convention, config integrity and every tensor shape.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<TrainState<T>> {
    let (m, mut files) = read_archive(path)?;
    if m.format_version != FORMAT_VERSION {
        return Err(FcfError::Checkpoint(format!(
            "format version {} (supported: {FORMAT_VERSION})",
            m.format_version
        )));
    }
    if m.dtype != T::DTYPE {
        return Err(FcfError::Checkpoint(format!("stored as {}, requested {}", m.dtype, T::DTYPE)));
    }
    if m.fft_convention != FFT_CONVENTION {
        return Err(FcfError::Checkpoint(format!(
            "FFT convention `{}` differs from `{FFT_CONVENTION}`",
            m.fft_convention
        )));
    }
    let config = FcfConfig::from_text(&m.config)?;
    if config.hash() != m.config_hash {
        return Err(FcfError::Checkpoint(format!(
            "config hash {} does not match stored {}",
            config.hash(),
            m.config_hash
        )));
    }
    let mut state = TrainState::<T>::new(&config)?;
    let mut fetch = |name: String, want: &[usize]| -> Result<Tensor<T>> {
        let entry = m
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| FcfError::Checkpoint(format!("missing tensor `{name}`")))?;
        if entry.shape != want {
            return Err(FcfError::Checkpoint(format!(
                "`{name}` has shape {:?}, model expects {want:?}",
                entry.shape
            )));
        }
        let bytes = files
            .remove(&entry.file)
            .ok_or_else(|| FcfError::Checkpoint(format!("missing blob `{}`", entry.file)))?;
        decode(&bytes, want, &name)
    };
    let restore = |store: &mut ParamStore<T>, prefix: &str, fetch: &mut dyn FnMut(String, &[usize]) -> Result<Tensor<T>>| -> Result<()> {
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape().to_vec();
            let t = fetch(format!("{prefix}/{}", store.name(id)), &shape)?;
            store.set(id, t);
        }
        Ok(())
    };
    restore(&mut state.gen.params, "generator", &mut fetch)?;
    restore(&mut state.dis.params, "discriminator", &mut fetch)?;
    if let Some(ema) = &mut state.ema {
        restore(ema, "ema", &mut fetch)?;
    }
    for (prefix, store, slots) in [
        ("adam.g.m", &state.gen.params, &mut state.g_opt.m),
        ("adam.g.v", &state.gen.params, &mut state.g_opt.v),
        ("adam.d.m", &state.dis.params, &mut state.d_opt.m),
        ("adam.d.v", &state.dis.params, &mut state.d_opt.v),
    ] {
        for id in store.ids() {
            slots[id.index()] = fetch(format!("{prefix}/{}", store.name(id)), store.get(id).shape())?;
        }
    }
    state.g_opt.steps = m.optimizer.g_steps;
    state.d_opt.steps = m.optimizer.d_steps;
    state.step = m.step;
    state.images_seen = m.images_seen;
    Ok(state)
}

/// Hex sha256 of a file, used to tag reports with the checkpoint they came
/// from.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| FcfError::file(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}
