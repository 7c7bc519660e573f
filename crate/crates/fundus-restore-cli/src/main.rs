//! Command-line driver for the fundus restoration pipeline.
//!
//! Subcommands cover the full experiment loop: `phantom` generates a
//! clean synthetic dataset, `synth` corrupts it into artifact/clean
//! evaluation pairs, `train` fits the diffusion autoencoder on clean
//! images alone, `restore` inpaints artifact regions with a trained
//! checkpoint, `evaluate` scores restorations, and `ablate` compares
//! latent-conditioning choices.
//!
//! Conventions shared by every command:
//! - `--config` loads an experiment TOML; omitted fields take defaults,
//!   and command-line flags override the loaded values. The fully
//!   resolved config is written next to the outputs as `config.toml`.
//! - outputs go to `--out` when given, otherwise to a per-command
//!   subdirectory of the output root (`FUNDUS_OUTPUT_ROOT` environment
//!   variable when set, else the configured `output_root`).
//! - per-image randomness derives from `seed ^ stable_hash(image id)`,
//!   so parallel (`--jobs N`) and serial runs produce identical bytes.
//! - exit codes: 0 success, 2 validation/usage, 3 I/O, 4 numeric abort.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use fundus_restore::checkpoint::{
    load_checkpoint, save_checkpoint, CheckpointMeta, CheckpointState,
};
use fundus_restore::config::{load_config, save_config, ExperimentConfig};
use fundus_restore::dataset::{load_pairs, save_pair, EvalPair};
use fundus_restore::image::{Image, Mask};
use fundus_restore::inpaint::{restore, LatentSource, RestoreOptions, SamplerKind};
use fundus_restore::io::{
    atomic_write, ensure_dir, read_f32_raster, read_mask_png, read_png, write_f32_raster,
    write_json, write_mask_png, write_png,
};
use fundus_restore::masks::{extract_artifact_mask, synthesize_pair, ExtractParams};
use fundus_restore::metrics::{
    dice, psnr, segment_vessels_default, ssim_default, MetricReport, MetricRow,
};
use fundus_restore::model::Model;
use fundus_restore::phantom::{load_phantoms, make_dataset, save_phantom};
use fundus_restore::rng::stable_hash;
use fundus_restore::train::{log_to_csv, train, OptimizerState};
use fundus_restore::{Error, Result};

const OUTPUT_ROOT_ENV: &str = "FUNDUS_OUTPUT_ROOT";

#[derive(Parser)]
#[command(
    name = "fundus-restore",
    version,
    about = "Unsupervised diffusion restoration of artifact-corrupted fundus images"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset of clean synthetic fundus phantoms.
    Phantom(PhantomArgs),
    /// Build artifact/clean/mask evaluation pairs from phantoms.
    Synth(SynthArgs),
    /// Train the diffusion autoencoder on clean images only.
    Train(TrainArgs),
    /// Restore a directory of artifact images with a trained checkpoint.
    Restore(RestoreArgs),
    /// Score restored images against their clean references.
    Evaluate(EvaluateArgs),
    /// Compare artifact-derived vs interpolated latent conditioning.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment configuration file (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory. Falls back to FUNDUS_OUTPUT_ROOT, then to the
    /// configured output root plus a per-command subdirectory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

fn load_cfg(common: &CommonArgs) -> Result<ExperimentConfig> {
    match &common.config {
        Some(path) => load_config(path),
        None => Ok(ExperimentConfig::default()),
    }
}

fn resolve_out(common: &CommonArgs, cfg: &ExperimentConfig, subdir: &str) -> PathBuf {
    if let Some(out) = &common.out {
        return out.clone();
    }
    let root = std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| cfg.output_root.clone());
    root.join(subdir)
}

/// Validate the resolved config and persist it next to the outputs so
/// the run can be reproduced from that file alone.
fn write_resolved(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    ensure_dir(dir)?;
    save_config(&dir.join("config.toml"), cfg)
}

/// Run `f` over `items` on a bounded worker pool and return the results
/// sorted by id, so output order never depends on scheduling.
fn fan_out<T, U, F>(jobs: usize, items: &[T], f: F) -> Result<Vec<(String, U)>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> Result<(String, U)> + Sync,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Validation(format!("jobs: {e}")))?;
    let mut results: Vec<(String, U)> =
        pool.install(|| items.par_iter().map(&f).collect::<Result<Vec<_>>>())?;
    results.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(results)
}

// ---------------------------------------------------------------- phantom

#[derive(Args)]
struct PhantomArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Number of phantoms to generate.
    #[arg(long)]
    n: Option<usize>,
    /// Base seed; phantom i is generated with seed base + i.
    #[arg(long)]
    seed: Option<u64>,
    /// Square image side length in pixels.
    #[arg(long)]
    size: Option<usize>,
}

fn cmd_phantom(args: &PhantomArgs) -> Result<()> {
    let mut cfg = load_cfg(&args.common)?;
    if let Some(n) = args.n {
        cfg.dataset_size = n;
    }
    if let Some(seed) = args.seed {
        cfg.phantom.seed = seed;
    }
    if let Some(size) = args.size {
        // Keep the config coherent: the model consumes these images.
        cfg.phantom.size = size;
        cfg.model.image_size = size;
    }
    let out = resolve_out(&args.common, &cfg, "phantoms");
    write_resolved(&out, &cfg)?;
    let set = make_dataset(cfg.dataset_size, cfg.phantom.seed, &cfg.phantom)?;
    for p in &set {
        save_phantom(&out, p, &cfg.phantom)?;
    }
    println!("wrote {} phantoms under {}", set.len(), out.display());
    Ok(())
}

// ------------------------------------------------------------------ synth

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Directory of phantom_* subdirectories supplying cleans and donors.
    #[arg(long)]
    dataset: PathBuf,
    /// Number of pairs to synthesize.
    #[arg(long)]
    n: Option<usize>,
    /// Base seed; pair seeds derive as seed ^ stable_hash(pair id).
    #[arg(long)]
    seed: Option<u64>,
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let mut cfg = load_cfg(&args.common)?;
    if let Some(n) = args.n {
        cfg.eval_pairs = n;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let n = cfg.eval_pairs;
    if n == 0 {
        return Err(Error::Validation("eval_pairs: must be at least 1".into()));
    }
    let phantoms = load_phantoms(&args.dataset)?;
    // The loaded data, not the config default, defines the pair size.
    cfg.phantom.size = phantoms[0].image.height;
    cfg.model.image_size = phantoms[0].image.height;
    let out = resolve_out(&args.common, &cfg, "pairs");
    write_resolved(&out, &cfg)?;
    let k = phantoms.len();
    for i in 0..n {
        let clean = &phantoms[i % k];
        // Take donors from the opposite end of the dataset so artifact
        // texture never comes from the image being corrupted (unless the
        // dataset is too small to allow it).
        let mut donor_idx = (i + n) % k;
        if donor_idx == i % k && k > 1 {
            donor_idx = (i + 1) % k;
        }
        let id = format!("{i:03}");
        let pair_seed = cfg.seed ^ stable_hash(&id);
        let sp = synthesize_pair(clean, &phantoms[donor_idx], &cfg.synth, pair_seed)?;
        if sp.mask.is_empty_mask() {
            return Err(Error::Generation(format!("pair {id}: empty artifact mask")));
        }
        let pair = EvalPair {
            id: id.clone(),
            clean: clean.image.clone(),
            artifact: sp.artifact,
            mask: sp.mask,
        };
        let dir = save_pair(&out, &id, &pair)?;
        // Ground-truth vessels ride along for downstream Dice scoring.
        write_mask_png(&dir.join("vessels.png"), &clean.vessel_mask)?;
    }
    println!("wrote {n} pairs under {}", out.display());
    Ok(())
}

// ------------------------------------------------------------------ train

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Directory of clean phantom_* training images.
    #[arg(long)]
    dataset: PathBuf,
    /// Resume from a checkpoint written by an earlier run; the
    /// checkpoint's model, schedule, and training settings take over.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Refresh ckpt_last.bin every this many epochs.
    #[arg(long, default_value_t = 250)]
    checkpoint_every: usize,
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = load_cfg(&args.common)?;
    let mut start_epoch = 0;
    let mut resumed = None;
    if let Some(path) = &args.resume {
        let state = load_checkpoint(path)?;
        cfg.model = state.meta.model.clone();
        cfg.schedule = state.meta.schedule.clone();
        if let Some(tc) = &state.meta.train {
            cfg.train = tc.clone();
        }
        start_epoch = state.meta.epochs_completed;
        resumed = Some(state);
    }
    // Explicit flags override even a resumed checkpoint's settings —
    // that is how a finished run gets extended with more epochs.
    if let Some(v) = args.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = args.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = args.seed {
        cfg.train.seed = v;
    }
    if start_epoch >= cfg.train.epochs {
        return Err(Error::Validation(format!(
            "resume: checkpoint already covers {start_epoch} epochs; raise --epochs past that to continue"
        )));
    }

    let out = resolve_out(&args.common, &cfg, "train");
    write_resolved(&out, &cfg)?;
    let sched = cfg.schedule.build()?;
    let items = fundus_restore::dataset::load_clean_images(&args.dataset)?;
    let images: Vec<&Image> = items.iter().map(|it| &it.image).collect();

    let (mut model, mut opt) = match resumed {
        Some(state) => {
            let model = state.model();
            let step = state.meta.adam_step;
            match (state.adam_m, state.adam_v) {
                (Some(m), Some(v)) => (model, OptimizerState { m, v, step }),
                _ => {
                    return Err(Error::Checkpoint(format!(
                        "{}: no optimizer moments; cannot resume",
                        args.resume.as_ref().unwrap().display()
                    )))
                }
            }
        }
        None => {
            let model = Model::init(&cfg.model)?;
            let opt = OptimizerState::new(&model.params);
            (model, opt)
        }
    };

    let make_state = |m: &Model, o: &OptimizerState<f32>, epochs_done: usize| CheckpointState {
        meta: CheckpointMeta {
            model: cfg.model.clone(),
            schedule: cfg.schedule.clone(),
            train: Some(cfg.train.clone()),
            epochs_completed: epochs_done,
            adam_step: o.step,
        },
        params: m.params.clone(),
        adam_m: Some(o.m.clone()),
        adam_v: Some(o.v.clone()),
    };

    let every = args.checkpoint_every.max(1);
    let report = train(
        &mut model,
        &mut opt,
        &sched,
        &images,
        &cfg.train,
        start_epoch,
        |m, o, done| {
            if done % every == 0 {
                save_checkpoint(&out.join("ckpt_last.bin"), &make_state(m, o, done))?;
            }
            Ok(())
        },
    )?;

    save_checkpoint(
        &out.join("ckpt_final.bin"),
        &make_state(&model, &opt, cfg.train.epochs),
    )?;
    atomic_write(&out.join("loss.csv"), log_to_csv(&report.rows).as_bytes())?;
    println!(
        "trained epochs {}..{} on {} images: loss {:.6} -> {:.6}; wrote {}",
        start_epoch,
        cfg.train.epochs,
        images.len(),
        report.initial_loss,
        report.final_loss,
        out.join("ckpt_final.bin").display()
    );
    Ok(())
}

// ---------------------------------------------------------------- restore

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LatentArg {
    /// Encode the degraded input itself (fully unsupervised).
    Artifact,
    /// Blend the input latent with a reference latent at --lambda.
    Interpolated,
}

#[derive(Args)]
struct RestoreArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Trained checkpoint file.
    #[arg(long)]
    ckpt: PathBuf,
    /// Input directory: pair_* subdirectories from synth, or loose
    /// images (*.f32 or *.png) with <name>.mask.png sidecars.
    #[arg(long)]
    input: PathBuf,
    /// Derive a mask from each image that has no sidecar mask.
    #[arg(long)]
    extract_mask: bool,
    /// Number of reverse diffusion steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Resampling repetitions per step.
    #[arg(long)]
    resample: Option<usize>,
    /// Base seed; per-image seeds derive as seed ^ stable_hash(id).
    #[arg(long)]
    seed: Option<u64>,
    /// Latent conditioning source.
    #[arg(long, value_enum, default_value_t = LatentArg::Artifact)]
    latent: LatentArg,
    /// Blend weight toward the reference latent for --latent interpolated.
    #[arg(long, default_value_t = 0.5)]
    lambda: f32,
    /// Directory of reference images named <id>.f32 or <id>.png for
    /// --latent interpolated; pair inputs default to their own clean.
    #[arg(long)]
    ref_dir: Option<PathBuf>,
    /// Worker threads to fan out across images.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Use the naive direct sampler instead of the posterior sampler.
    #[arg(long)]
    direct: bool,
}

struct RestoreInput {
    id: String,
    image: Image,
    mask: Mask,
    /// Clean counterpart when the input came from a synthesized pair.
    reference: Option<Image>,
    mask_source: &'static str,
}

/// Read an image by id from `dir`, preferring the lossless raster.
fn read_image_by_id(dir: &Path, id: &str) -> Result<Image> {
    let raster = dir.join(format!("{id}.f32"));
    if raster.exists() {
        return read_f32_raster(&raster);
    }
    let png = dir.join(format!("{id}.png"));
    if png.exists() {
        return read_png(&png);
    }
    Err(Error::Validation(format!(
        "no {id}.f32 or {id}.png under {}",
        dir.display()
    )))
}

fn gather_inputs(args: &RestoreArgs) -> Result<Vec<RestoreInput>> {
    let dir = &args.input;
    let has_pairs = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .any(|e| e.path().is_dir() && e.file_name().to_string_lossy().starts_with("pair_"));
    if has_pairs {
        return Ok(load_pairs(dir)?
            .into_iter()
            .map(|p| RestoreInput {
                id: p.id,
                image: p.artifact,
                mask: p.mask,
                reference: Some(p.clean),
                mask_source: "pair",
            })
            .collect());
    }

    // Loose-file layout: every image file is an input; masks are
    // <name>.mask.png sidecars or derived on request.
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if !path.is_file() {
            continue;
        }
        let (Some(stem), Some(ext)) = (
            path.file_stem().map(|s| s.to_string_lossy().into_owned()),
            path.extension().map(|e| e.to_string_lossy().into_owned()),
        ) else {
            continue;
        };
        let is_mask = stem.ends_with(".mask") && ext == "png";
        if is_mask || (ext != "f32" && ext != "png") {
            continue;
        }
        if !ids.contains(&stem) {
            ids.push(stem);
        }
    }
    ids.sort();
    if ids.is_empty() {
        return Err(Error::Validation(format!(
            "no input images (*.f32, *.png) under {}",
            dir.display()
        )));
    }
    ids.into_iter()
        .map(|id| {
            let image = read_image_by_id(dir, &id)?;
            let mask_path = dir.join(format!("{id}.mask.png"));
            let (mask, mask_source) = if mask_path.exists() {
                (read_mask_png(&mask_path)?, "file")
            } else if args.extract_mask {
                (
                    extract_artifact_mask(&image, &ExtractParams::default())?,
                    "extracted",
                )
            } else {
                return Err(Error::Validation(format!(
                    "{}: no mask sidecar; pass --extract-mask to derive one",
                    mask_path.display()
                )));
            };
            let reference = match &args.ref_dir {
                Some(rd) => Some(read_image_by_id(rd, &id)?),
                None => None,
            };
            Ok(RestoreInput {
                id,
                image,
                mask,
                reference,
                mask_source,
            })
        })
        .collect()
}

#[derive(Serialize)]
struct RestoreSidecar {
    id: String,
    seed: u64,
    steps: usize,
    resample_count: usize,
    sampler: String,
    latent: String,
    mask_source: String,
    mask_area_frac: f64,
}

fn cmd_restore(args: &RestoreArgs) -> Result<()> {
    let mut cfg = load_cfg(&args.common)?;
    if let Some(v) = args.steps {
        cfg.restore.steps = v;
    }
    if let Some(v) = args.resample {
        cfg.restore.resample_count = v;
    }
    if let Some(v) = args.seed {
        cfg.restore.seed = v;
    }

    let state = load_checkpoint(&args.ckpt)?;
    // The checkpoint, not the experiment config, defines the model and
    // schedule actually used; reflect that in the resolved config.
    cfg.model = state.meta.model.clone();
    cfg.schedule = state.meta.schedule.clone();
    cfg.phantom.size = cfg.model.image_size;
    let model = state.model();
    let sched = cfg.schedule.build()?;

    let out = resolve_out(&args.common, &cfg, "restored");
    write_resolved(&out, &cfg)?;
    let inputs = gather_inputs(args)?;
    if args.latent == LatentArg::Interpolated {
        if let Some(missing) = inputs.iter().find(|i| i.reference.is_none()) {
            return Err(Error::Validation(format!(
                "{}: --latent interpolated needs a reference; pass --ref-dir or use pair inputs",
                missing.id
            )));
        }
    }

    let sampler = if args.direct {
        SamplerKind::Direct
    } else {
        SamplerKind::Posterior
    };
    let results = fan_out(args.jobs, &inputs, |inp| {
        let latent = match args.latent {
            LatentArg::Artifact => LatentSource::FromArtifact,
            LatentArg::Interpolated => LatentSource::Interpolated {
                a: inp.image.clone(),
                b: inp.reference.clone().unwrap(),
                lambda: args.lambda,
            },
        };
        let opts = RestoreOptions {
            steps: cfg.restore.steps,
            resample_count: cfg.restore.resample_count,
            latent,
            sampler,
            seed: cfg.restore.seed ^ stable_hash(&inp.id),
        };
        let res = restore(&model, &sched, &inp.image, &inp.mask, &opts)?;
        let sidecar = RestoreSidecar {
            id: inp.id.clone(),
            seed: opts.seed,
            steps: opts.steps,
            resample_count: opts.resample_count,
            sampler: format!("{sampler:?}").to_lowercase(),
            latent: match args.latent {
                LatentArg::Artifact => "artifact".into(),
                LatentArg::Interpolated => format!("interpolated(lambda={})", args.lambda),
            },
            mask_source: inp.mask_source.to_string(),
            mask_area_frac: inp.mask.count_ones() as f64
                / (inp.mask.height * inp.mask.width) as f64,
        };
        Ok((inp.id.clone(), (res.image, sidecar)))
    })?;

    for (id, (image, sidecar)) in &results {
        write_f32_raster(&out.join(format!("restored_{id}.f32")), image)?;
        write_png(&out.join(format!("restored_{id}.png")), image)?;
        write_json(&out.join(format!("restored_{id}.json")), sidecar)?;
    }
    println!("restored {} images under {}", results.len(), out.display());
    Ok(())
}

// --------------------------------------------------------------- evaluate

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Directory of pair_* subdirectories holding clean references.
    #[arg(long)]
    pairs: PathBuf,
    /// Directory of restored_<id>.f32 images from restore.
    #[arg(long)]
    restored: PathBuf,
    /// Worker threads to fan out across images.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let cfg = load_cfg(&args.common)?;
    let out = resolve_out(&args.common, &cfg, "eval");
    write_resolved(&out, &cfg)?;

    let pairs = load_pairs(&args.pairs)?;
    let mut restored_ids = Vec::new();
    for entry in std::fs::read_dir(&args.restored).map_err(|e| Error::io(&args.restored, e))? {
        let path = entry.map_err(|e| Error::io(&args.restored, e))?.path();
        let name = path.file_name().map(|s| s.to_string_lossy().into_owned());
        if let Some(name) = name {
            if let Some(id) = name
                .strip_prefix("restored_")
                .and_then(|r| r.strip_suffix(".f32"))
            {
                restored_ids.push(id.to_string());
            }
        }
    }
    restored_ids.sort();
    let pair_ids: Vec<&str> = pairs.iter().map(|p| p.id.as_str()).collect();
    let missing: Vec<&str> = pair_ids
        .iter()
        .filter(|id| !restored_ids.iter().any(|r| r == *id))
        .copied()
        .collect();
    let orphans: Vec<&str> = restored_ids
        .iter()
        .map(|s| s.as_str())
        .filter(|id| !pair_ids.contains(id))
        .collect();
    if !missing.is_empty() || !orphans.is_empty() {
        return Err(Error::Validation(format!(
            "pair/restored sets do not match: missing restorations for [{}], restorations without pairs [{}]",
            missing.join(", "),
            orphans.join(", ")
        )));
    }

    let rows = fan_out(args.jobs, &pairs, |pair| {
        let restored = read_f32_raster(&args.restored.join(format!("restored_{}.f32", pair.id)))?;
        // Prefer the true vessel mask saved by synth; fall back to
        // segmenting the clean reference.
        let gt_path = args.pairs.join(format!("pair_{}", pair.id)).join("vessels.png");
        let gt = if gt_path.exists() {
            read_mask_png(&gt_path)?
        } else {
            segment_vessels_default(&pair.clean)?
        };
        let row = MetricRow {
            id: pair.id.clone(),
            psnr_db: psnr(&restored, &pair.clean, 1.0)?,
            ssim: ssim_default(&restored, &pair.clean)?,
            dice_vessels: Some(dice(&segment_vessels_default(&restored)?, &gt)?),
            mask_area_frac: Some(
                pair.mask.count_ones() as f64 / (pair.mask.height * pair.mask.width) as f64,
            ),
        };
        Ok((pair.id.clone(), row))
    })?;

    let report = MetricReport::from_rows(rows.into_iter().map(|(_, r)| r).collect())?;
    write_json(&out.join("report.json"), &report)?;
    atomic_write(&out.join("report.csv"), report.to_csv().as_bytes())?;
    let a = &report.aggregates;
    println!(
        "evaluated {} images: psnr {:.2} +/- {:.2} dB, ssim {:.4} +/- {:.4}{}",
        a.n,
        a.psnr_db.mean,
        a.psnr_db.std,
        a.ssim.mean,
        a.ssim.std,
        match &a.dice_vessels {
            Some(d) => format!(", vessel dice {:.4} +/- {:.4}", d.mean, d.std),
            None => String::new(),
        }
    );
    println!("wrote {}", out.join("report.json").display());
    Ok(())
}

// ----------------------------------------------------------------- ablate

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Trained checkpoint file.
    #[arg(long)]
    ckpt: PathBuf,
    /// Directory of pair_* subdirectories (clean references required).
    #[arg(long)]
    pairs: PathBuf,
    /// Number of reverse diffusion steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Base seed; both arms of a pair share the same derived seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Blend weight toward the clean-counterpart latent.
    #[arg(long, default_value_t = 0.5)]
    lambda: f32,
    /// Worker threads to fan out across pairs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Serialize)]
struct AblationRow {
    id: String,
    psnr_z1: f64,
    psnr_zinterp: f64,
    delta: f64,
}

#[derive(Serialize)]
struct AblationReport {
    lambda: f32,
    rows: Vec<AblationRow>,
    mean_psnr_z1: f64,
    mean_psnr_zinterp: f64,
    mean_delta: f64,
}

fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let mut cfg = load_cfg(&args.common)?;
    if let Some(v) = args.steps {
        cfg.restore.steps = v;
    }
    if let Some(v) = args.seed {
        cfg.restore.seed = v;
    }
    let state = load_checkpoint(&args.ckpt)?;
    cfg.model = state.meta.model.clone();
    cfg.schedule = state.meta.schedule.clone();
    cfg.phantom.size = cfg.model.image_size;
    let model = state.model();
    let sched = cfg.schedule.build()?;

    let out = resolve_out(&args.common, &cfg, "ablation");
    write_resolved(&out, &cfg)?;
    let pairs = load_pairs(&args.pairs)?;

    let rows = fan_out(args.jobs, &pairs, |pair| {
        let seed = cfg.restore.seed ^ stable_hash(&pair.id);
        let base = RestoreOptions {
            steps: cfg.restore.steps,
            resample_count: cfg.restore.resample_count,
            latent: LatentSource::FromArtifact,
            sampler: SamplerKind::Posterior,
            seed,
        };
        let r1 = restore(&model, &sched, &pair.artifact, &pair.mask, &base)?;
        let interp = RestoreOptions {
            latent: LatentSource::Interpolated {
                a: pair.artifact.clone(),
                b: pair.clean.clone(),
                lambda: args.lambda,
            },
            ..base
        };
        let r2 = restore(&model, &sched, &pair.artifact, &pair.mask, &interp)?;
        let psnr_z1 = psnr(&r1.image, &pair.clean, 1.0)?;
        let psnr_zinterp = psnr(&r2.image, &pair.clean, 1.0)?;
        Ok((
            pair.id.clone(),
            AblationRow {
                id: pair.id.clone(),
                psnr_z1,
                psnr_zinterp,
                delta: psnr_zinterp - psnr_z1,
            },
        ))
    })?;
    let rows: Vec<AblationRow> = rows.into_iter().map(|(_, r)| r).collect();

    let n = rows.len() as f64;
    let mean_psnr_z1 = rows.iter().map(|r| r.psnr_z1).sum::<f64>() / n;
    let mean_psnr_zinterp = rows.iter().map(|r| r.psnr_zinterp).sum::<f64>() / n;
    let report = AblationReport {
        lambda: args.lambda,
        mean_psnr_z1,
        mean_psnr_zinterp,
        mean_delta: mean_psnr_zinterp - mean_psnr_z1,
        rows,
    };
    write_json(&out.join("ablation.json"), &report)?;
    let mut csv = String::from("id,psnr_z1,psnr_zinterp,delta\n");
    for r in &report.rows {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            r.id, r.psnr_z1, r.psnr_zinterp, r.delta
        ));
    }
    atomic_write(&out.join("ablation.csv"), csv.as_bytes())?;
    println!(
        "ablated {} pairs: mean psnr z1 {:.2} dB, z_interp {:.2} dB, delta {:+.2} dB",
        report.rows.len(),
        report.mean_psnr_z1,
        report.mean_psnr_zinterp,
        report.mean_delta
    );
    Ok(())
}

// ------------------------------------------------------------------- main

fn run(command: &Command) -> Result<()> {
    match command {
        Command::Phantom(a) => cmd_phantom(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Restore(a) => cmd_restore(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Ablate(a) => cmd_ablate(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code().clamp(1, 255) as u8)
        }
    }
}
