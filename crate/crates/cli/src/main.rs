use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use maskmap::checkpoint::{write_atomic, Checkpoint};
use maskmap::clip::{FaceClip, Label};
use maskmap::dataset::{load_clip, load_manifest, write_dataset, DatasetConfig, Split};
use maskmap::figures::{histogram_chart, landmark_canvas, load_rgb, mask_overlay, png_bytes};
use maskmap::geometry::{compute_rois, default_margin, load_landmarks, BlockGrid};
use maskmap::mapping::{Mapper, MapperConfig, MAPPER_KIND};
use maskmap::masking::plan_mask;
use maskmap::meta::{split_meta, JsonLinesLog, MetaConfig, MetaItem, MetaTrainer};
use maskmap::metrics::{read_scores, write_scores, EvalReport, DEFAULT_BINS};
use maskmap::pipeline::{recover_clips, score_clips, ExperimentConfig};
use maskmap::recovery::{
    Phase, RecoveryConfig, RecoveryModel, RecoveryTrainer, FINETUNE_KIND, PRETRAIN_KIND,
};

const PRETRAIN_CKPT: &str = "pretrain.ckpt";
const FINETUNE_CKPT: &str = "finetune.ckpt";
const MAPPER_CKPT: &str = "mapper.ckpt";

#[derive(Parser, Debug)]
#[command(
    name = "maskmap",
    version,
    about = "Masked facial-part recovery and mapping for face-forgery detection"
)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set recovery.pretrain.epochs=4`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Global seed; also seeds the dataset.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for data-parallel work (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset (PNG frames, landmarks, manifest).
    Generate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Masked-autoencoder pretraining on the real training clips.
    Pretrain(TrainArgs),
    /// Classifier finetuning from the pretrained model.
    Finetune(TrainArgs),
    /// Episodic training of the mapping network on recovered clips.
    TrainMap(TrainArgs),
    /// Score the test split and write scores.tsv and report.txt.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
    },
    /// Render the mask drawn for one landmark set.
    MaskPreview {
        #[arg(long)]
        landmarks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Frame edge in pixels when no image is given.
        #[arg(long, default_value_t = 224)]
        size: usize,
        #[arg(long, default_value_t = 16)]
        patch: usize,
        /// Face image to draw on.
        #[arg(long)]
        image: Option<PathBuf>,
    },
    /// Histogram figures and overlap values from a scores file.
    Report {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(clap::Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    run: PathBuf,
    /// Continue from the checkpoint in the run directory.
    #[arg(long)]
    resume: bool,
    /// Stop after this many epochs in this invocation.
    #[arg(long)]
    max_epochs: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    seed: u64,
    threads: usize,
    bins: usize,
    dataset: DatasetConfig,
    recovery: RecoveryConfig,
    mapper: MapperConfig,
    meta: MetaConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 0,
            bins: DEFAULT_BINS,
            dataset: DatasetConfig::default(),
            recovery: RecoveryConfig::default(),
            mapper: MapperConfig::default(),
            meta: MetaConfig::default(),
        }
    }
}

impl RunConfig {
    fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            seed: self.seed,
            dataset: self.dataset.clone(),
            recovery: self.recovery.clone(),
            mapper: self.mapper.clone(),
            meta: self.meta.clone(),
            bins: self.bins,
        }
    }
}

/// Bad user input; exits with status 1.
#[derive(Debug)]
struct Invalid(String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts
        .pop()
        .filter(|k| !k.is_empty())
        .ok_or_else(|| invalid(format!("empty override key {key:?}")))?;
    let mut cur = table;
    for p in parts {
        cur = cur
            .entry(p)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| invalid(format!("override {key}: {p} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Overlay `over` onto `base`, descending into tables so a partial nested
/// table keeps the remaining defaults of its parent.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut table = toml::Table::try_from(RunConfig::default()).context("serialising defaults")?;
    if let Some(path) = &cli.config {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        merge(
            &mut table,
            text.parse::<toml::Table>()
                .map_err(|e| invalid(format!("{}: {e}", path.display())))?,
        );
    }
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| invalid(format!("override {o:?} is not KEY=VALUE")))?;
        set_path(&mut table, k.trim(), parse_value(v.trim()))?;
    }
    let mut cfg: RunConfig = table
        .try_into()
        .map_err(|e: toml::de::Error| invalid(format!("config: {e}")))?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.dataset.seed = seed;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    cfg.experiment().validate()?;
    Ok(cfg)
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Generate { .. } => "generate",
        Command::Pretrain(_) => "pretrain",
        Command::Finetune(_) => "finetune",
        Command::TrainMap(_) => "train-map",
        Command::Evaluate { .. } => "evaluate",
        Command::MaskPreview { .. } => "mask-preview",
        Command::Report { .. } => "report",
    }
}

/// Echo the effective config and the run identity into `dir`.
fn record_run(dir: &Path, cfg: &RunConfig, command: &str) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let echo = toml::to_string(cfg).context("serialising config")?;
    write_atomic(&dir.join("config.toml"), echo.as_bytes())?;
    let run = serde_json::json!({
        "command": command,
        "seed": cfg.seed,
        "version": env!("CARGO_PKG_VERSION"),
    });
    write_atomic(&dir.join("run.json"), format!("{run:#}\n").as_bytes())?;
    Ok(())
}

fn load_split(
    data: &Path,
    cfg: &RunConfig,
    split: Split,
    real_only: bool,
) -> Result<Vec<FaceClip>> {
    let manifest = load_manifest(&data.join("manifest.tsv"))?;
    let clips = manifest
        .split(split)
        .filter(|e| !real_only || e.label == Label::Real)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|e| load_clip(&manifest, e))
        .collect::<maskmap::Result<Vec<_>>>()?;
    let want = (
        cfg.recovery.frames,
        cfg.recovery.image_size,
        cfg.recovery.image_size,
    );
    if let Some(c) = clips.iter().find(|c| c.shape() != want) {
        return Err(invalid(format!(
            "clip {} has shape {:?}, config expects {:?}",
            c.id,
            c.shape(),
            want
        )));
    }
    if clips.is_empty() {
        return Err(invalid(format!("no {split} clips in {}", data.display())));
    }
    Ok(clips)
}

fn load_checkpoint(run: &Path, name: &str, kind: &str) -> Result<Checkpoint> {
    let path = run.join(name);
    if !path.exists() {
        bail!("missing checkpoint {}", path.display());
    }
    let ck = Checkpoint::load(&path)?;
    ck.expect_kind(kind)?;
    Ok(ck)
}

fn finished_model(
    run: &Path,
    name: &str,
    kind: &str,
    cfg: &RecoveryConfig,
) -> Result<RecoveryModel> {
    let t = RecoveryTrainer::from_checkpoint(&load_checkpoint(run, name, kind)?, cfg.clone())?;
    if !t.finished() {
        bail!(
            "{} is incomplete (epoch {}); resume it first",
            run.join(name).display(),
            t.epoch
        );
    }
    Ok(t.model)
}

fn run_recovery_phase(args: &TrainArgs, cfg: &RunConfig, phase: Phase) -> Result<()> {
    let (name, kind) = match phase {
        Phase::Pretrain => (PRETRAIN_CKPT, PRETRAIN_KIND),
        Phase::Finetune => (FINETUNE_CKPT, FINETUNE_KIND),
    };
    let clips = load_split(&args.data, cfg, Split::Train, phase == Phase::Pretrain)?;
    let ckpt = args.run.join(name);
    let mut t = if args.resume && ckpt.exists() {
        RecoveryTrainer::from_checkpoint(
            &load_checkpoint(&args.run, name, kind)?,
            cfg.recovery.clone(),
        )?
    } else {
        let model = match phase {
            Phase::Pretrain => RecoveryModel::new(cfg.recovery.clone(), cfg.seed)?,
            Phase::Finetune => {
                finished_model(&args.run, PRETRAIN_CKPT, PRETRAIN_KIND, &cfg.recovery)?
            }
        };
        RecoveryTrainer::new(model, phase, cfg.seed)
    };
    let mut log = open_log(
        &args.run.join(format!("{}.log", command_phase(phase))),
        args.resume,
    )?;
    let stop = (t.epoch as usize).saturating_add(args.max_epochs.unwrap_or(usize::MAX));
    if t.epoch == 0 {
        t.to_checkpoint().save(&ckpt)?;
    }
    while !t.finished() && (t.epoch as usize) < stop {
        let loss = t.run_epoch(&clips)?;
        log::info!("{} epoch {} loss {loss:.6}", t.kind(), t.epoch);
        writeln!(log, "epoch {} loss {loss:.9}", t.epoch)
            .with_context(|| format!("writing {name} log"))?;
        t.to_checkpoint().save(&ckpt)?;
    }
    Ok(())
}

fn command_phase(phase: Phase) -> &'static str {
    match phase {
        Phase::Pretrain => "pretrain",
        Phase::Finetune => "finetune",
    }
}

fn open_log(path: &Path, append: bool) -> Result<fs::File> {
    OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))
}

fn cmd_train_map(args: &TrainArgs, cfg: &RunConfig) -> Result<()> {
    let pre = finished_model(&args.run, PRETRAIN_CKPT, PRETRAIN_KIND, &cfg.recovery)?;
    let fingerprint = pre.params.fingerprint();
    let ckpt = args.run.join(MAPPER_CKPT);
    let mut t = if args.resume && ckpt.exists() {
        let ck = load_checkpoint(&args.run, MAPPER_CKPT, MAPPER_KIND)?;
        if ck.meta("recovery_fingerprint") != Some(fingerprint.as_str()) {
            return Err(invalid(
                "mapper checkpoint was trained on a different recovery model",
            ));
        }
        MetaTrainer::from_checkpoint(&ck, cfg.mapper.clone(), cfg.meta.clone())?
    } else {
        MetaTrainer::new(
            Mapper::new(cfg.mapper.clone(), cfg.seed)?,
            cfg.meta.clone(),
            cfg.seed,
        )?
    };
    let stop = (t.epoch as usize).saturating_add(args.max_epochs.unwrap_or(usize::MAX));
    let clips = load_split(&args.data, cfg, Split::Train, false)?;
    let recovered = recover_clips(&pre, &clips, cfg.seed)?;
    let items: Vec<MetaItem> = clips.iter().map(MetaItem::of).collect();
    let split = split_meta(&items, cfg.meta.policy, t.seed)?;
    let mut log = JsonLinesLog::new(open_log(&args.run.join("mapping.jsonl"), args.resume)?);
    if t.epoch == 0 {
        t.to_checkpoint(&fingerprint).save(&ckpt)?;
    }
    while !t.finished() && (t.epoch as usize) < stop {
        let loss = t.run_epoch(&split, &recovered, |r| log.write(r))?;
        log::info!("mapping epoch {} loss {loss:.6}", t.epoch);
        t.to_checkpoint(&fingerprint).save(&ckpt)?;
    }
    Ok(())
}

fn cmd_evaluate(data: &Path, run: &Path, cfg: &RunConfig) -> Result<()> {
    let pre = finished_model(run, PRETRAIN_CKPT, PRETRAIN_KIND, &cfg.recovery)?;
    let fine = finished_model(run, FINETUNE_CKPT, FINETUNE_KIND, &cfg.recovery)?;
    let ck = load_checkpoint(run, MAPPER_CKPT, MAPPER_KIND)?;
    if ck.meta("recovery_fingerprint") != Some(pre.params.fingerprint().as_str()) {
        return Err(invalid(
            "mapper checkpoint was trained on a different recovery model",
        ));
    }
    let mt = MetaTrainer::from_checkpoint(&ck, cfg.mapper.clone(), cfg.meta.clone())?;
    if !mt.finished() {
        bail!(
            "{} is incomplete (epoch {}); resume it first",
            run.join(MAPPER_CKPT).display(),
            mt.epoch
        );
    }
    let test = load_split(data, cfg, Split::Test, false)?;
    let recovered = recover_clips(&pre, &test, cfg.seed)?;
    let records = score_clips(&fine, &mt.mapper, &test, &recovered)?;
    write_scores(&run.join("scores.tsv"), &records)?;
    let report = EvalReport::from_scores(&records, cfg.bins)?;
    let text = report.to_text();
    write_atomic(&run.join("report.txt"), text.as_bytes())?;
    print!("{text}");
    Ok(())
}

fn cmd_mask_preview(
    landmarks: &Path,
    out: &Path,
    size: usize,
    patch: usize,
    image: Option<&Path>,
    cfg: &RunConfig,
) -> Result<()> {
    let base = match image {
        Some(p) => Some(load_rgb(p)?),
        None => None,
    };
    let edge = match &base {
        Some(img) if img.width() != img.height() => {
            return Err(invalid(format!(
                "{} is not square",
                image.unwrap().display()
            )))
        }
        Some(img) => img.width() as usize,
        None => size,
    };
    let lm = load_landmarks(landmarks, (edge, edge))?;
    let grid = BlockGrid::new(edge, patch)?;
    let plan = plan_mask(&lm, &grid, &cfg.recovery.mask, cfg.seed)?;
    let rois = compute_rois(&lm, default_margin(edge));
    let base = base.unwrap_or_else(|| landmark_canvas(&lm));
    let img = mask_overlay(&base, &grid, &plan, &rois)?;
    write_atomic(out, &png_bytes(&img))?;
    println!("{plan}");
    Ok(())
}

fn cmd_report(scores: &Path, out: &Path, bins: usize) -> Result<()> {
    let records = read_scores(scores)?;
    let report = EvalReport::from_scores(&records, bins)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_atomic(
        &out.join("hist_recovered.png"),
        &png_bytes(&histogram_chart(&report.recovered)),
    )?;
    write_atomic(
        &out.join("hist_mapped.png"),
        &png_bytes(&histogram_chart(&report.mapped)),
    )?;
    let text = report.to_text();
    write_atomic(&out.join("report.txt"), text.as_bytes())?;
    println!("overlap_recovered={}", report.recovered.overlap);
    println!("overlap_mapped={}", report.mapped.overlap);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .context("thread pool")?;
    }
    let name = command_name(&cli.command);
    match &cli.command {
        Command::Generate { out } => {
            record_run(out, &cfg, name)?;
            let manifest = write_dataset(&cfg.dataset, out)?;
            let mut counts = BTreeMap::new();
            for e in &manifest.entries {
                *counts
                    .entry((e.split.to_string(), e.label.to_string()))
                    .or_insert(0usize) += 1;
            }
            for ((split, label), n) in counts {
                println!("{split} {label} {n}");
            }
        }
        Command::Pretrain(a) => {
            record_run(&a.run, &cfg, name)?;
            run_recovery_phase(a, &cfg, Phase::Pretrain)?;
        }
        Command::Finetune(a) => {
            record_run(&a.run, &cfg, name)?;
            run_recovery_phase(a, &cfg, Phase::Finetune)?;
        }
        Command::TrainMap(a) => {
            record_run(&a.run, &cfg, name)?;
            cmd_train_map(a, &cfg)?;
        }
        Command::Evaluate { data, run } => {
            record_run(run, &cfg, name)?;
            cmd_evaluate(data, run, &cfg)?;
        }
        Command::MaskPreview {
            landmarks,
            out,
            size,
            patch,
            image,
        } => {
            cmd_mask_preview(landmarks, out, *size, *patch, image.as_deref(), &cfg)?;
        }
        Command::Report { scores, out } => cmd_report(scores, out, cfg.bins)?,
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<Invalid>() {
            return 1;
        }
        if let Some(err) = cause.downcast_ref::<maskmap::Error>() {
            return if err.is_validation() { 1 } else { 2 };
        }
    }
    2
}

/// The error chain joined with `: `, skipping causes the previous message
/// already quotes.
fn message(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.ends_with(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", message(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
