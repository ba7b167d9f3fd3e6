use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use gpic_core::checkpoint::Checkpoint;
use gpic_core::config::RunConfig;
use gpic_core::dataprep::{self, DatasetManifest, ImageBuffer, Palette, Split, BLUE, RED};
use gpic_core::diversity::{pairwise_report, FeatureExtractor};
use gpic_core::fsutil::write_atomic;
use gpic_core::sampler::{MaskedTarget, SamplerRun};
use gpic_core::trainer::{train as run_training, TrainPlan, TrainState};
use gpic_core::{DenoiserModel, Schedule, Tensor};
use rayon::prelude::*;
use serde_json::json;

use crate::{EvalArgs, PrepareArgs, SampleArgs, TrainArgs};

/// Sizes the global pool from `GPIC_THREADS` when it is set.
pub fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("GPIC_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| anyhow!("GPIC_THREADS must be a positive integer, got {raw:?}"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn base_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn palette(name: &str) -> Result<Palette> {
    match name.trim() {
        "red" => Ok(RED),
        "blue" => Ok(BLUE),
        other => bail!("unknown palette {other:?} (expected red or blue)"),
    }
}

pub fn prepare(a: &PrepareArgs) -> Result<String> {
    let palettes = a.palettes.split(',').map(palette).collect::<Result<Vec<_>>>()?;
    let split: Split = a.split.parse()?;
    create_dir(&a.out)?;
    let mut manifest = dataprep::generate_synthetic(&a.out, a.count as usize, a.resolution as usize, a.seed, &palettes)?;
    let path = a.out.join("manifest.tsv");
    if split != manifest.split {
        manifest.split = split;
        manifest.save(&path)?;
    }
    Ok(json!({ "manifest": path.display().to_string(), "pairs": manifest.pairs.len() }).to_string())
}

fn load_manifest(path: &Path, resolution: usize) -> Result<Vec<gpic_core::trainer::Pair<f32>>> {
    let manifest = DatasetManifest::load(path).with_context(|| format!("loading manifest {}", path.display()))?;
    if manifest.resolution != resolution {
        bail!("{} has resolution {}, the model expects {resolution} (set image_size)", path.display(), manifest.resolution);
    }
    Ok(dataprep::load_pairs(&manifest)?)
}

pub fn train(a: &TrainArgs) -> Result<String> {
    let mut cfg = base_config(a.config.as_deref())?;
    for o in &a.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| anyhow!("--set expects KEY=VALUE, got {o:?}"))?;
        cfg.set(k.trim(), v).map_err(|m| anyhow!("--set {o}: {m}"))?;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = a.max_steps {
        cfg.max_steps = Some(s);
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;

    let mut state = match &a.resume {
        Some(p) => TrainState::from_checkpoint(&Checkpoint::load(p)?).with_context(|| format!("resuming from {}", p.display()))?,
        None => TrainState::from_seed(cfg.network.clone(), cfg.train.clone(), cfg.seed)?,
    };
    let size = state.model.config().image_size;
    let data = load_manifest(&a.data, size)?;
    let val = match &a.val {
        Some(p) => load_manifest(p, size)?,
        None => Vec::new(),
    };
    create_dir(&a.out)?;
    write_atomic(&a.out.join("config.txt"), cfg.to_string().as_bytes())?;
    let plan = TrainPlan { epochs: cfg.epochs, max_steps: cfg.max_steps, out_dir: Some(a.out.clone()) };
    let summary = run_training(&mut state, &data, &val, &plan)?;
    Ok(json!({
        "steps": summary.steps,
        "epochs": summary.epochs_run,
        "best_score": summary.best_score,
        "out": a.out.display().to_string(),
    })
    .to_string())
}

fn parse_bias(s: &str) -> Result<[f64; 3]> {
    let v = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| anyhow!("bad bias component {p:?}")))
        .collect::<Result<Vec<_>>>()?;
    <[f64; 3]>::try_from(v).map_err(|v| anyhow!("--bias needs R,G,B, got {} values", v.len()))
}

fn read_sized(path: &Path, size: usize) -> Result<ImageBuffer> {
    let img = dataprep::read_image(path)?;
    if img.width() != size || img.height() != size {
        bail!("{} is {}x{}, the model expects {size}x{size}", path.display(), img.width(), img.height());
    }
    Ok(img)
}

fn load_model(path: &Path) -> Result<(DenoiserModel<f32>, Schedule)> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok((ckpt.to_model()?, ckpt.schedule()?))
}

pub fn sample(a: &SampleArgs) -> Result<String> {
    let cfg = base_config(a.config.as_deref())?;
    let (coarse, mut schedule) = load_model(&a.checkpoint)?;
    if let Some(t) = a.steps {
        schedule = Schedule::new(t as usize, schedule.lambda())?;
    }
    let fine = a.checkpoint_fine.as_deref().map(load_model).transpose()?.map(|(m, _)| m);
    let size = coarse.config().image_size;
    let line: Tensor<f32> = dataprep::to_gray(&read_sized(&a.line, size)?).to_tensor();

    let mut run = match &fine {
        Some(f) => SamplerRun::mixed(schedule, &coarse, f, a.switch_at.unwrap_or(cfg.switch_at), line, a.seed),
        None => SamplerRun::new(schedule, &coarse, line, a.seed),
    };
    run.corrector_steps = a.corrector.unwrap_or(cfg.corrector_steps);
    run.bias = a.bias.as_deref().map(parse_bias).transpose()?;
    if let (Some(rgb), Some(alpha)) = (&a.mask_rgb, &a.mask_alpha) {
        let rgb = read_sized(rgb, size)?.to_rgb().to_tensor();
        let alpha = dataprep::to_gray(&read_sized(alpha, size)?).to_unit_tensor();
        run.mask = Some(MaskedTarget::new(rgb, alpha)?);
    }

    let features = run.encode()?;
    let results = (0..a.n)
        .into_par_iter()
        .map(|i| {
            let mut trace = String::new();
            let image = run.sample_with(&features, i, &mut |e| {
                let event = json!({
                    "sample": i,
                    "t": e.t,
                    "stage": e.stage,
                    "eps_norm": e.eps_norm,
                    "correctors_applied": e.correctors_applied,
                    "correctors_skipped": e.correctors_skipped,
                });
                let _ = writeln!(trace, "{event}");
            })?;
            Ok((ImageBuffer::from_tensor(&image)?, trace))
        })
        .collect::<Result<Vec<_>>>()?;

    create_dir(&a.out)?;
    let mut trace = String::new();
    let mut written = Vec::new();
    for (i, (image, events)) in results.iter().enumerate() {
        let path = a.out.join(format!("sample_{i:04}.png"));
        dataprep::write_image(image, &path)?;
        written.push(path.display().to_string());
        trace.push_str(events);
    }
    write_atomic(&a.out.join("trace.jsonl"), trace.as_bytes())?;
    Ok(json!({ "samples": written }).to_string())
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && dataprep::ImageFormat::from_path(p).is_ok())
        .collect();
    files.sort();
    Ok(files)
}

pub fn eval(a: &EvalArgs) -> Result<String> {
    let cfg = base_config(a.config.as_deref())?;
    let fx = match a.extractor.as_str() {
        "random" => FeatureExtractor::random_conv(a.extractor_seed.unwrap_or(cfg.extractor_seed)),
        "identity" => FeatureExtractor::identity(),
        "trained" => {
            let path = a.checkpoint.as_deref().ok_or_else(|| anyhow!("--extractor trained needs --checkpoint"))?;
            FeatureExtractor::trained(&load_model(path)?.0)?
        }
        other => bail!("unknown extractor {other:?} (expected random, trained or identity)"),
    };
    let files = image_files(&a.images_dir)?;
    let images = files
        .iter()
        .map(|p| Ok(dataprep::read_image(p)?.to_rgb().to_tensor()))
        .collect::<Result<Vec<Tensor<f32>>>>()?;
    let mut report = pairwise_report(&images, &fx, a.bins.unwrap_or(cfg.histogram_bins))?;
    report.ids = files.iter().map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned()).collect();

    create_dir(&a.out)?;
    write_atomic(&a.out.join("distances.csv"), report.to_csv().as_bytes())?;
    write_atomic(&a.out.join("histogram.txt"), report.histogram_table().as_bytes())?;
    write_atomic(&a.out.join("histogram.svg"), report.to_svg().as_bytes())?;
    Ok(json!({ "images": images.len(), "pairs": report.pairs.len(), "mean": report.mean, "std": report.std }).to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bias_parsing() {
        assert_eq!(parse_bias("1,-1,-0.5").unwrap(), [1.0, -1.0, -0.5]);
        assert!(parse_bias("1,2").is_err());
        assert!(parse_bias("1,x,0").is_err());
    }

    #[test]
    fn palette_names() {
        assert_eq!(palette(" blue").unwrap(), BLUE);
        assert!(palette("green").is_err());
    }
}
