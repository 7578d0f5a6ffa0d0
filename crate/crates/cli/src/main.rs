use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fcf_core::checkpoint::{file_hash, load_checkpoint};
use fcf_core::data::{derive_rng, load_rgb, rgb_to_tensor, tensor_to_rgb, CropMode, Dataset};
use fcf_core::evaluation::{complete_dataset, emit_grid, evaluate_completions, Provenance};
use fcf_core::extractor::extractor_from_config;
use fcf_core::masks::{load_mask_folder, Mask, MaskSource};
use fcf_core::training::{run, TrainOptions, TrainState, Trainer};
use fcf_core::viz::{capture_site, write_feature_grid};
use fcf_core::{FcfConfig, FcfError, Preset, Tensor};
use image::imageops::FilterType;
use image::RgbImage;

const INFER_Z_STREAM: u64 = 0x1f;

#[derive(Parser, Debug)]
#[command(
    name = "fcf",
    version,
    about = "Fourier coarse-to-fine image inpainting",
    after_help = "Any configuration key can be overridden as `--section.key value`, e.g. `--loss.lambda_rec 5`."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train from a preset or config file.
    Train(TrainArgs),
    /// Complete one image under one mask.
    Infer(InferArgs),
    /// Complete an image set and write metric reports and grids.
    Eval(EvalArgs),
    /// Render the inverse-FFT features of a Fourier Unit as a grid.
    VizFfc(VizArgs),
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Flat `section.key = value` file, applied on top of the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Starting point: desk, paper or paper512.
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Required to start the full-size presets.
    #[arg(long)]
    i_know_this_is_large: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory for checkpoints, metrics and sample grids.
    #[arg(long, default_value = "runs/fcf")]
    out: PathBuf,
    /// Stop after this many steps instead of the image budget.
    #[arg(long)]
    steps: Option<u64>,
    /// Continue from a checkpoint (its configuration is used).
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Leave elapsed time out of the metrics log.
    #[arg(long)]
    no_wallclock: bool,
    /// Skip the sample grids written with every checkpoint.
    #[arg(long)]
    no_grids: bool,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Grayscale mask; pixels above 127 are holes.
    #[arg(long)]
    mask: PathBuf,
    /// Output PNG; with `--samples k > 1` files are suffixed `-0` .. `-k-1`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    z_seed: u64,
    #[arg(long, default_value_t = 1)]
    samples: usize,
    /// Resize image and mask to the model resolution.
    #[arg(long)]
    resize: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Image folder; defaults to the data source stored in the checkpoint.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Mask folder; defaults to the checkpoint's mask generator.
    #[arg(long)]
    masks: Option<PathBuf>,
    #[arg(long, default_value = "eval")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    /// Score the originals against themselves instead of completions.
    #[arg(long)]
    ground_truth: bool,
}

#[derive(Args, Debug)]
struct VizArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Print the available layer selectors and exit.
    #[arg(long)]
    list: bool,
    #[arg(long, required_unless_present = "list")]
    image: Option<PathBuf>,
    #[arg(long, required_unless_present = "list")]
    mask: Option<PathBuf>,
    /// Selector as printed by `--list`.
    #[arg(long, required_unless_present = "list")]
    layer: Option<String>,
    #[arg(long, required_unless_present = "list")]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    z_seed: u64,
    #[arg(long)]
    resize: bool,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] FcfError),
}

type Result<T> = std::result::Result<T, CliError>;

/// Splits `--section.key value` / `--section.key=value` pairs from the
/// remaining arguments.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let key = a.strip_prefix("--").filter(|k| k.contains('.'));
        match key {
            Some(k) => match k.split_once('=') {
                Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
                None => {
                    let v = it
                        .next()
                        .ok_or_else(|| CliError::Usage(format!("missing value for --{k}")))?;
                    overrides.push((k.to_string(), v));
                }
            },
            None => rest.push(a),
        }
    }
    Ok((rest, overrides))
}

fn resolve_config(c: &ConfigArgs, overrides: &[(String, String)]) -> Result<FcfConfig> {
    let preset: Preset = c
        .preset
        .parse()
        .map_err(|e: String| CliError::Usage(format!("--preset: {e}")))?;
    if preset != Preset::Desk && !c.i_know_this_is_large {
        return Err(CliError::Usage(format!(
            "preset `{}` trains full-size models for millions of images; pass --i-know-this-is-large to proceed",
            c.preset
        )));
    }
    let mut cfg = FcfConfig::preset(preset);
    if let Some(path) = &c.config {
        let text = std::fs::read_to_string(path).map_err(|e| FcfError::file(path, e))?;
        cfg.apply_text(&text).map_err(FcfError::from)?;
    }
    apply_overrides(&mut cfg, overrides)?;
    Ok(cfg)
}

fn apply_overrides(cfg: &mut FcfConfig, overrides: &[(String, String)]) -> Result<()> {
    for (k, v) in overrides {
        cfg.set(k, v).map_err(FcfError::from)?;
    }
    if let Err(errs) = cfg.validate() {
        let msg = errs.iter().map(|e| format!("  {e}")).collect::<Vec<_>>().join("\n");
        return Err(CliError::Usage(format!("invalid configuration:\n{msg}")));
    }
    Ok(())
}

fn no_overrides(cmd: &str, overrides: &[(String, String)]) -> Result<()> {
    match overrides.first() {
        Some((k, _)) => Err(CliError::Usage(format!("`{cmd}` takes no configuration overrides (got --{k})"))),
        None => Ok(()),
    }
}

fn cmd_train(a: &TrainArgs, overrides: &[(String, String)]) -> Result<()> {
    let mut state = match &a.resume {
        Some(path) => {
            no_overrides("train --resume", overrides)?;
            load_checkpoint::<f32>(path)?
        }
        None => TrainState::<f32>::new(&resolve_config(&a.config, overrides)?)?,
    };
    let trainer = Trainer::from_config(&state.config)?;
    let opts = TrainOptions {
        out_dir: a.out.clone(),
        max_steps: a.steps.map(|s| state.step + s),
        wallclock: !a.no_wallclock,
        sample_grids: !a.no_grids,
    };
    std::fs::create_dir_all(&a.out).map_err(|e| FcfError::file(&a.out, e))?;
    let cfg_path = a.out.join("config.txt");
    std::fs::write(&cfg_path, state.config.to_text()).map_err(|e| FcfError::file(&cfg_path, e))?;
    let log = run(&mut state, &trainer, &opts)?;
    println!("trained {} steps; now at step {} ({} images)", log.len(), state.step, state.images_seen);
    Ok(())
}

fn load_image(path: &Path, res: usize, resize: bool) -> Result<RgbImage> {
    let img = load_rgb(path)?;
    if img.dimensions() == (res as u32, res as u32) {
        return Ok(img);
    }
    if !resize {
        return Err(CliError::Usage(format!(
            "{} is {}x{}, the model expects {res}x{res}; pass --resize to rescale",
            path.display(),
            img.width(),
            img.height()
        )));
    }
    Ok(image::imageops::resize(&img, res as u32, res as u32, FilterType::Triangle))
}

fn load_mask(path: &Path, res: usize, resize: bool) -> Result<Tensor<f32>> {
    let mut gray = image::open(path).map_err(|e| FcfError::file(path, e))?.to_luma8();
    if gray.dimensions() != (res as u32, res as u32) {
        if !resize {
            return Err(CliError::Usage(format!(
                "mask {} is {}x{}, the model expects {res}x{res}; pass --resize to rescale",
                path.display(),
                gray.width(),
                gray.height()
            )));
        }
        gray = image::imageops::resize(&gray, res as u32, res as u32, FilterType::Nearest);
    }
    let data = gray.as_raw().iter().map(|&v| (v > 127) as u8).collect();
    Ok(Mask::from_values(res, res, data)?.to_tensor::<f32>())
}

fn batch1(t: Tensor<f32>) -> Tensor<f32> {
    let mut s = vec![1];
    s.extend_from_slice(t.shape());
    t.reshape(&s)
}

fn cmd_infer(a: &InferArgs) -> Result<()> {
    if a.samples == 0 {
        return Err(CliError::Usage("--samples must be at least 1".into()));
    }
    let state = load_checkpoint::<f32>(&a.checkpoint)?;
    let gen = state.inference_generator();
    let res = gen.resolution();
    let img = load_image(&a.image, res, a.resize)?;
    let images = batch1(rgb_to_tensor(&img));
    let masks = batch1(load_mask(&a.mask, res, a.resize)?);
    for k in 0..a.samples {
        let z = gen.sample_z(1, &mut derive_rng(a.z_seed, k as u64, INFER_Z_STREAM));
        let comp = gen.inpaint(&images, &masks, &z)?;
        let mut out = tensor_to_rgb(&comp.reshape(&[3, res, res]));
        // Known pixels are copied from the input bytes.
        let m = masks.data();
        for (i, px) in out.pixels_mut().enumerate() {
            if m[i] == 0.0 {
                *px = *img.get_pixel((i % res) as u32, (i / res) as u32);
            }
        }
        let path = if a.samples == 1 { a.out.clone() } else { suffixed(&a.out, k) };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| FcfError::file(dir, e))?;
        }
        out.save(&path).map_err(|e| FcfError::file(&path, e))?;
        println!("{}", path.display());
    }
    Ok(())
}

fn suffixed(path: &Path, k: usize) -> PathBuf {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    let ext = path.extension().map_or("png".into(), |e| e.to_string_lossy());
    path.with_file_name(format!("{stem}-{k}.{ext}"))
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let state = load_checkpoint::<f32>(&a.checkpoint)?;
    let cfg = &state.config;
    let gen = state.inference_generator();
    let res = gen.resolution();
    let dataset = match &a.data {
        Some(dir) => Dataset::folder(dir, res, CropMode::Resize)?,
        None => Dataset::from_config(&cfg.data, res)?,
    };
    let (masks, mask_spec) = match &a.masks {
        Some(dir) => {
            let list: Vec<_> = load_mask_folder(dir, res, res)?.into_iter().map(|(_, m)| m).collect();
            if list.is_empty() {
                return Err(CliError::Usage(format!("no masks in {}", dir.display())));
            }
            (MaskSource::Folder(list), format!("folder:{}", dir.display()))
        }
        None => {
            let spec = cfg
                .entries()
                .into_iter()
                .filter(|(k, _)| k.starts_with("mask."))
                .map(|(k, v)| format!("{k}={v}"))
                .collect::<Vec<_>>()
                .join(",");
            (MaskSource::from_config(&cfg.mask, res, res)?, spec)
        }
    };
    let extractor = extractor_from_config::<f32>(&cfg.hrfpl)?;
    let (org, mut comp, holes) = complete_dataset(&gen, &dataset, &masks, a.batch, a.seed)?;
    if a.ground_truth {
        comp = org.clone();
    }
    let provenance = Provenance {
        embedder: extractor.tag(),
        mask_spec,
        checkpoint_hash: file_hash(&a.checkpoint)?,
        config_hash: cfg.hash(),
    };
    let report = evaluate_completions(&org, &comp, &holes, extractor.as_ref(), &cfg.eval.bins.0, provenance)?;
    std::fs::create_dir_all(&a.out).map_err(|e| FcfError::file(&a.out, e))?;
    let path = a.out.join("report.json");
    std::fs::write(&path, report.to_json()).map_err(|e| FcfError::file(&path, e))?;
    let rows = (0..cfg.eval.grid_rows.min(org.shape()[0]))
        .map(|i| {
            let pick = |t: &Tensor<f32>| {
                let c = t.shape()[1];
                t.narrow(0, i, 1).reshape(&[c, res, res])
            };
            let hole_view = pick(&org).zip_map(&pick(&holes).broadcast_to(&[3, res, res]), |v, m| v * (1.0 - m));
            vec![hole_view, pick(&comp), pick(&org)]
        })
        .collect::<Vec<_>>();
    emit_grid(&rows, &["hole", "fcf", "original"], &a.out.join("grid.png"))?;
    println!(
        "fid {:.4} perceptual {:.4} masked l1 {:.4} over {} images -> {}",
        report.metrics.fid,
        report.metrics.perceptual,
        report.metrics.masked.l1,
        report.samples,
        path.display()
    );
    Ok(())
}

fn cmd_viz(a: &VizArgs) -> Result<()> {
    let state = load_checkpoint::<f32>(&a.checkpoint)?;
    let gen = state.inference_generator();
    if a.list {
        for s in gen.fourier_sites() {
            println!("{s}");
        }
        return Ok(());
    }
    let (image, mask, layer, out) = match (&a.image, &a.mask, &a.layer, &a.out) {
        (Some(i), Some(m), Some(l), Some(o)) => (i, m, l, o),
        _ => return Err(CliError::Usage("--image, --mask, --layer and --out are required".into())),
    };
    let res = gen.resolution();
    let images = batch1(rgb_to_tensor(&load_image(image, res, a.resize)?));
    let masks = batch1(load_mask(mask, res, a.resize)?);
    let z = gen.sample_z(1, &mut derive_rng(a.z_seed, 0, INFER_Z_STREAM));
    let features = capture_site(&gen, &images, &masks, &z, layer)?;
    write_feature_grid(&features, out)?;
    let s = features.shape();
    println!("{} channels of {}x{} -> {}", s[0], s[1], s[2], out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(args);
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a, &overrides),
        Command::Infer(a) => no_overrides("infer", &overrides).and_then(|_| cmd_infer(a)),
        Command::Eval(a) => no_overrides("eval", &overrides).and_then(|_| cmd_eval(a)),
        Command::VizFfc(a) => no_overrides("viz-ffc", &overrides).and_then(|_| cmd_viz(a)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CliError::Usage(_) | CliError::Core(FcfError::Config(_)) => ExitCode::from(2),
                CliError::Core(_) => ExitCode::FAILURE,
            }
        }
    }
}
