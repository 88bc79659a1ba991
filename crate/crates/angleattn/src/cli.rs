use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use angleattn_core::attention::ScoreVariant;
use angleattn_core::data::{stratified_split, synth_scene, HyperCube, LabelMap, Split};
use angleattn_core::train::{evaluate, predict_pixels, prepare_scene, train, EpochLog, EvalReport};

use crate::checkpoint::{self, Manifest};
use crate::config::RunConfig;
use crate::npy::{self, NpyData};
use crate::raster::{export_map, load_scene, save_cube, save_labels, write_bytes};
use crate::threads::Threaded;
use crate::{Error, Result};

pub const CSV_HEADER: &str = "variant,seed,epoch_best,oa,aa,kappa,train_seconds";
pub const LOG_FILE: &str = "log.jsonl";

#[derive(Debug, Parser)]
#[command(name = "angleattn", version, about = "Hyperspectral patch transformer with angular attention")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic scene (scene.npy, labels.npy) into --out.
    Synth(SynthArgs),
    /// Train on a cube/label pair and write a checkpoint directory to --out.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the split it was trained with.
    Eval(EvalArgs),
    /// Train and test every variant x seed (x SNR) cell; CSV to --out or stdout.
    Sweep(SweepArgs),
}

/// Flags shared by every subcommand. Each one overrides the config file.
#[derive(Debug, Default, Args)]
pub struct Common {
    /// Flat JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub cube: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub variant: Option<String>,
    /// none, query, key or both.
    #[arg(long)]
    pub norm_mode: Option<String>,
    #[arg(long)]
    pub patch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub wd: Option<f64>,
    #[arg(long)]
    pub clip: Option<f64>,
    /// per-tensor or global.
    #[arg(long)]
    pub clip_mode: Option<String>,
    #[arg(long)]
    pub smoothing: Option<f64>,
    #[arg(long)]
    pub train_frac: Option<f64>,
    #[arg(long)]
    pub val_frac: Option<f64>,
    #[arg(long)]
    pub model_dim: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub mlp_dim: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// none, sinusoidal or learnable.
    #[arg(long)]
    pub positional: Option<String>,
    #[arg(long)]
    pub temperature: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub bands: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub sites: Option<usize>,
    #[arg(long)]
    pub gain_lo: Option<f64>,
    #[arg(long)]
    pub gain_hi: Option<f64>,
    /// Noise added to the raw synthetic spectra.
    #[arg(long)]
    pub snr_db: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Noise added after band normalization.
    #[arg(long)]
    pub snr_db: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Subset {
    Train,
    Val,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Overrides the cube path recorded in the manifest.
    #[arg(long)]
    pub cube: Option<PathBuf>,
    /// Overrides the label path recorded in the manifest.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub subset: Subset,
    /// PPM class map of all labeled pixels; predictions also go to a
    /// sibling `.npy`.
    #[arg(long)]
    pub map: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    /// Comma-separated variant tags (default: the configured variant).
    #[arg(long, value_delimiter = ',')]
    pub variants: Vec<String>,
    /// Comma-separated seeds (default: the configured seed).
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Comma-separated SNR levels; adds an snr_db column.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub snr_db: Vec<f64>,
}

impl Common {
    /// Defaults, then the config file, then flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($field:ident => $target:ident),* $(,)?) => {
                $(if let Some(v) = &self.$field { c.$target = v.clone().into(); })*
            };
        }
        set!(
            cube => cube, labels => labels, out => out, seed => seed, variant => variant,
            norm_mode => norm_mode, patch => patch, epochs => epochs, batch => batch, lr => lr,
            wd => wd, clip => clip, clip_mode => clip_mode, smoothing => smoothing,
            train_frac => train_frac, val_frac => val_frac, model_dim => model_dim,
            depth => depth, heads => heads, mlp_dim => mlp_dim, dropout => dropout,
            positional => positional, temperature => temperature,
        );
        Ok(c)
    }
}

/// Writes one line and flushes, so sweep rows appear as cells finish.
fn say(out: &mut dyn Write, line: &str) -> Result<()> {
    writeln!(out, "{line}")
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(Path::new("<stdout>"), e))
}

fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| Error::Usage(format!("--{flag} is required (flag or config)")))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn cmd_synth(args: &SynthArgs, report: &mut dyn Write) -> Result<()> {
    let mut c = args.common.resolve()?;
    macro_rules! set {
        ($($field:ident),*) => { $(if let Some(v) = args.$field { c.$field = v; })* };
    }
    set!(height, width, bands, classes, sites, gain_lo, gain_hi);
    if args.snr_db.is_some() {
        c.snr_db = args.snr_db;
    }
    let spec = c.synth()?;
    let out = required(&c.out, "out")?;
    let scene = synth_scene(&spec)?;
    create_dir(out)?;
    save_cube(&out.join("scene.npy"), &scene.cube)?;
    let l = &scene.labels;
    save_labels(&out.join("labels.npy"), l.height(), l.width(), l.labels())?;
    for (k, n) in l.class_counts().iter().enumerate().skip(1) {
        say(report, &format!("class {k}: {n} pixels"))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct LogLine {
    epoch: usize,
    loss: f64,
    val_oa: f64,
}

pub fn epoch_log(log: &[EpochLog]) -> String {
    log.iter()
        .map(|l| {
            let line = LogLine {
                epoch: l.epoch,
                loss: l.loss,
                val_oa: l.val_oa,
            };
            serde_json::to_string(&line).expect("log line serializes") + "\n"
        })
        .collect()
}

pub fn cmd_train(args: &TrainArgs, report: &mut dyn Write) -> Result<()> {
    let mut c = args.common.resolve()?;
    if args.snr_db.is_some() {
        c.snr_db = args.snr_db;
    }
    c.validate()?;
    let out = required(&c.out, "out")?.to_path_buf();
    let (cube, labels) = load_scene(required(&c.cube, "cube")?, required(&c.labels, "labels")?)?;
    let classes = labels.num_classes();
    let exp = c.experiment(cube.bands(), classes)?;
    let split = stratified_split(&labels, &c.split()?)?;
    let scene = prepare_scene(&cube, exp.snr_db, c.seed);
    let start = Instant::now();
    let outcome = train(&exp.model, &exp.train, &scene, &labels, &split, &Threaded::from_env())?;
    let secs = start.elapsed().as_secs_f64();
    // The destination is not part of the run; leaving it out keeps
    // checkpoints of equal runs identical wherever they are written.
    let manifest = Manifest {
        config: RunConfig { out: None, ..c },
        bands: cube.bands(),
        classes,
        best_epoch: outcome.best_epoch,
        best_val_oa: outcome.best_val_oa,
        params: Vec::new(),
    };
    checkpoint::save(&out, manifest, &outcome.params)?;
    write_bytes(&out.join(LOG_FILE), epoch_log(&outcome.log).as_bytes())?;
    say(
        report,
        &format!(
            "best epoch {} val OA {:.2} ({} train / {} val pixels, {secs:.1} s)",
            outcome.best_epoch,
            100.0 * outcome.best_val_oa,
            split.train.len(),
            split.val.len()
        ),
    )
}

pub fn csv_row(variant: &str, seed: u64, best_epoch: usize, r: &EvalReport, secs: Option<f64>) -> String {
    let secs = secs.map(|s| format!("{s:.3}")).unwrap_or_default();
    format!(
        "{variant},{seed},{best_epoch},{:.4},{:.4},{:.4},{secs}",
        100.0 * r.oa,
        100.0 * r.aa,
        100.0 * r.kappa
    )
}

fn subset(split: &Split, which: Subset) -> &[usize] {
    match which {
        Subset::Train => &split.train,
        Subset::Val => &split.val,
        Subset::Test => &split.test,
    }
}

fn map_path_npy(map: &Path) -> PathBuf {
    map.with_extension("npy")
}

pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let (manifest, cfg, params) = checkpoint::load(&args.checkpoint)?;
    let c = &manifest.config;
    let cube_path = args.cube.as_ref().or(c.cube.as_ref()).cloned();
    let label_path = args.labels.as_ref().or(c.labels.as_ref()).cloned();
    let (cube, labels) = load_scene(required(&cube_path, "cube")?, required(&label_path, "labels")?)?;
    check_scene(&manifest, &args.checkpoint, &cube, &labels)?;
    let split = stratified_split(&labels, &c.split()?)?;
    let scene = prepare_scene(&cube, c.snr_db, c.seed);
    let exec = Threaded::from_env();
    let report = evaluate(&params, &cfg, &scene, &labels, subset(&split, args.subset), &exec)?;
    say(
        out,
        &format!(
            "OA {:.2}  AA {:.2}  kappa {:.2}\n{CSV_HEADER}\n{}",
            100.0 * report.oa,
            100.0 * report.aa,
            100.0 * report.kappa,
            csv_row(&c.variant, c.seed, manifest.best_epoch, &report, None)
        ),
    )?;

    if let Some(map) = &args.map {
        let labeled: Vec<usize> = (0..labels.labels().len())
            .filter(|&i| labels.labels()[i] != 0)
            .collect();
        let preds = predict_pixels(&params, &cfg, &scene, &labeled, &exec)?;
        let mut ids = vec![0u16; labels.labels().len()];
        for (&i, &p) in labeled.iter().zip(&preds) {
            ids[i] = p;
        }
        let (h, w) = (labels.height(), labels.width());
        export_map(map, h, w, &ids, manifest.classes)?;
        write_bytes(&map_path_npy(map), &npy::encode(&[h, w], &NpyData::U2(ids)))?;
    }
    Ok(())
}

fn check_scene(manifest: &Manifest, dir: &Path, cube: &HyperCube, labels: &LabelMap) -> Result<()> {
    if cube.bands() != manifest.bands || labels.num_classes() != manifest.classes {
        return Err(Error::Manifest {
            path: dir.join(checkpoint::MANIFEST),
            detail: format!(
                "checkpoint expects {} bands and {} classes, scene has {} and {}",
                manifest.bands,
                manifest.classes,
                cube.bands(),
                labels.num_classes()
            ),
        });
    }
    Ok(())
}

/// One sweep cell per variant, seed and SNR level, in that nesting order.
pub fn sweep_rows(
    base: &RunConfig,
    variants: &[String],
    seeds: &[u64],
    snrs: &[f64],
    cube: &HyperCube,
    labels: &LabelMap,
    mut emit: impl FnMut(&str) -> Result<()>,
) -> Result<()> {
    for v in variants {
        v.parse::<ScoreVariant>()?;
    }
    let levels: Vec<Option<f64>> = if snrs.is_empty() {
        vec![base.snr_db]
    } else {
        snrs.iter().copied().map(Some).collect()
    };
    let header = if snrs.is_empty() {
        CSV_HEADER.to_string()
    } else {
        format!("{CSV_HEADER},snr_db")
    };
    emit(&header)?;
    let exec = Threaded::from_env();
    let classes = labels.num_classes();
    for v in variants {
        for &seed in seeds {
            let split_cfg = RunConfig {
                seed,
                ..base.clone()
            };
            let split = stratified_split(labels, &split_cfg.split()?)?;
            for &snr in &levels {
                let c = RunConfig {
                    variant: v.clone(),
                    snr_db: snr,
                    ..split_cfg.clone()
                };
                let exp = c.experiment(cube.bands(), classes)?;
                let scene = prepare_scene(cube, snr, seed);
                let start = Instant::now();
                let outcome = train(&exp.model, &exp.train, &scene, labels, &split, &exec)?;
                let secs = start.elapsed().as_secs_f64();
                let report = evaluate(&outcome.params, &exp.model, &scene, labels, &split.test, &exec)?;
                let mut row = csv_row(v, seed, outcome.best_epoch, &report, Some(secs));
                if !snrs.is_empty() {
                    row.push_str(&format!(",{}", snr.unwrap_or_default()));
                }
                emit(&row)?;
            }
        }
    }
    Ok(())
}

pub fn cmd_sweep(args: &SweepArgs, report: &mut dyn Write) -> Result<()> {
    let base = args.common.resolve()?;
    base.validate()?;
    let variants = if args.variants.is_empty() {
        vec![base.variant.clone()]
    } else {
        args.variants.clone()
    };
    for v in &variants {
        v.parse::<ScoreVariant>()?;
    }
    if let Some(s) = args.snr_db.iter().find(|s| !s.is_finite()) {
        return Err(Error::Usage(format!("snr_db must be finite, got {s}")));
    }
    let seeds = if args.seeds.is_empty() {
        vec![base.seed]
    } else {
        args.seeds.clone()
    };
    let (cube, labels) = load_scene(required(&base.cube, "cube")?, required(&base.labels, "labels")?)?;
    match &base.out {
        Some(path) => {
            let mut text = String::new();
            sweep_rows(&base, &variants, &seeds, &args.snr_db, &cube, &labels, |row| {
                text.push_str(row);
                text.push('\n');
                Ok(())
            })?;
            write_bytes(path, text.as_bytes())
        }
        None => sweep_rows(&base, &variants, &seeds, &args.snr_db, &cube, &labels, |row| {
            say(report, row)
        }),
    }
}

/// Runs the parsed command; progress and results go to `report`.
pub fn execute(cli: &Cli, report: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a, report),
        Command::Train(a) => cmd_train(a, report),
        Command::Eval(a) => cmd_eval(a, report),
        Command::Sweep(a) => cmd_sweep(a, report),
    }
}

/// Parses `args` and runs the command. Exit status 0 on success, 1 for data
/// and runtime errors, 2 for usage and configuration errors.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match execute(&cli, &mut std::io::stdout().lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
