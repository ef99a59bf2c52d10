//! The `vitae` command line. [`run`] parses arguments, dispatches to one
//! command and maps every failure to an exit code.

pub mod sweep;

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use vitae_core::checkpoint::{read_checkpoint, CheckpointError};
use vitae_core::config::{key_table, ConfigError, Precision, RunConfig};
use vitae_core::model::{patchify, MaskedVit3d, ModelError};
use vitae_core::probe::{build_feature_table, nested_cv, FeatureTable, FoldPlan, ProbeError};
use vitae_core::tensor::Real;
use vitae_core::trainer::{load_run, reconstruct, train, TrainError, TrainLog, TrainOptions};
use vitae_core::volume::{
    generate_synthetic, preprocess_volume, read_volume, write_manifest, write_volume, ManifestEntry, SyntheticConfig,
    VolumeDataset, VolumeError,
};

use sweep::{validate_ratios, SweepReport, SweepRow, DEFAULT_RATIOS};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
    Divergence(String),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Data(_) => EXIT_DATA,
            Failure::Divergence(_) => EXIT_DIVERGENCE,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Divergence(m) => f.write_str(m),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<VolumeError> for Failure {
    fn from(e: VolumeError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<ProbeError> for Failure {
    fn from(e: ProbeError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(c) => c.into(),
            TrainError::Divergence { ref rows, .. } => {
                let mut msg = e.to_string();
                msg.push_str("\nlast log rows:\n");
                msg.push_str(&TrainLog { rows: rows.clone() }.to_csv());
                Failure::Divergence(msg)
            }
            other => Failure::Data(other.to_string()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Preset {
    /// Small model and short schedule that run on one CPU core.
    Desk,
    /// Published model size and schedule.
    Paper,
}

#[derive(Parser, Debug)]
#[command(
    name = "vitae",
    version,
    about = "3D masked-autoencoder pretraining and linear probing",
    arg_required_else_help = true
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Configuration file of `[section]` headers and `key = value` lines.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one key, applied after --config. Repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
    /// Seed for training and for the probe's fold assignment.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    precision: Option<PrecisionArg>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Defaults that --config and --set start from.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a labeled two-class synthetic dataset with segmentation masks.
    GenSynthetic {
        /// Number of volumes.
        #[arg(long, default_value_t = 64)]
        n: usize,
        /// Cube side; defaults to data.crop_side + 8.
        #[arg(long)]
        side: Option<usize>,
    },
    /// Crop each masked volume around its mask and rescale to 0–255.
    Preprocess {
        /// Dataset directory with a manifest that lists masks.
        #[arg(long, value_name = "DIR")]
        input: PathBuf,
    },
    /// Pretrain the autoencoder on a dataset.
    Train {
        /// Dataset directory; overrides train.dataset.
        #[arg(long, value_name = "DIR")]
        dataset: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long, value_name = "CKPT")]
        resume: Option<PathBuf>,
        /// Stop before this epoch; the schedule still spans all epochs.
        #[arg(long, value_name = "EPOCH")]
        stop_before: Option<usize>,
    },
    /// Mask one volume and write it together with the model's reconstruction.
    Reconstruct {
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
        /// Preprocessed volume file.
        #[arg(long, value_name = "PATH")]
        volume: PathBuf,
        /// Fraction of patches to hide; defaults to model.mask_ratio.
        #[arg(long)]
        ratio: Option<f64>,
    },
    /// Write the frozen CLS features of every volume to features.csv.
    ExtractFeatures {
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        dataset: PathBuf,
    },
    /// Nested cross-validated linear SVM on a feature table.
    Probe {
        #[arg(long, value_name = "CSV")]
        features: PathBuf,
    },
    /// Train and probe once per (mask ratio, seed) pair.
    SweepMaskRatio {
        #[arg(long, value_name = "DIR")]
        dataset: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_RATIOS)]
        ratios: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64])]
        seeds: Vec<u64>,
    },
    /// Print a checkpoint's metadata and stored configuration.
    InspectCheckpoint {
        #[arg(value_name = "CKPT")]
        checkpoint: PathBuf,
    },
}

fn command() -> clap::Command {
    let table = format!("Configuration keys (desk value, then origin):\n{}", key_table());
    let mut cmd = Cli::command();
    let names: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_string()).collect();
    for name in names {
        let t = table.clone();
        cmd = cmd.mut_subcommand(name, |s| s.after_long_help(t.clone()).after_help(t));
    }
    cmd
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Messages go to stdout, errors to stderr.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return EXIT_USAGE;
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {f}");
            f.code()
        }
    }
}

macro_rules! with_precision {
    ($p:expr, $f:ident($($a:expr),*)) => {
        match $p {
            Precision::F32 => $f::<f32>($($a),*),
            Precision::F64 => $f::<f64>($($a),*),
        }
    };
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    let g = &cli.global;
    let preset = match g.preset {
        Preset::Desk => RunConfig::desk(),
        Preset::Paper => RunConfig::paper(),
    };
    match &cli.command {
        Command::GenSynthetic { n, side } => {
            let cfg = resolve(g, preset)?;
            let out = prepare_out(g, &[VolumeDataset::MANIFEST])?;
            let side = side.unwrap_or(cfg.data.crop_side + 8);
            let syn = SyntheticConfig::new(*n, side, cfg.train.seed);
            let ds = with_precision!(cfg.train.precision, gen_synthetic(&out, &syn))?;
            write_resolved(&out, &cfg)?;
            println!("wrote {} volumes ({side}³) to {}", ds.len(), out.display());
            Ok(())
        }
        Command::Preprocess { input } => {
            let cfg = resolve(g, preset)?;
            let out = prepare_out(g, &[VolumeDataset::MANIFEST])?;
            if same_dir(input, &out) {
                return Err(Failure::Usage("--out must differ from --input".into()));
            }
            let n = with_precision!(cfg.train.precision, preprocess_dataset(input, &out, cfg.data.crop_side))?;
            write_resolved(&out, &cfg)?;
            println!("wrote {n} preprocessed volumes to {}", out.display());
            Ok(())
        }
        Command::Train {
            dataset,
            resume,
            stop_before,
        } => {
            let base = match resume {
                Some(p) => stored_config(p)?,
                None => preset,
            };
            let mut cfg = resolve(g, base)?;
            if let Some(d) = dataset {
                cfg.train.dataset = d.display().to_string();
            }
            if cfg.train.dataset.is_empty() {
                return Err(Failure::Usage("no dataset: pass --dataset DIR or set train.dataset".into()));
            }
            let ds = VolumeDataset::open(Path::new(&cfg.train.dataset))?;
            let out = match resume {
                Some(_) => prepare_out_unchecked(g)?,
                None => {
                    let out = prepare_out(g, &["trainlog.csv", "checkpoints"])?;
                    let ck = out.join("checkpoints");
                    if ck.exists() {
                        fs::remove_dir_all(&ck).map_err(|e| io_failure(&ck, e))?;
                    }
                    out
                }
            };
            write_resolved(&out, &cfg)?;
            let log = with_precision!(
                cfg.train.precision,
                train_command(&cfg, &ds, &out, resume.as_deref(), *stop_before)
            )?;
            match log.rows.last() {
                Some(r) => println!(
                    "trained to epoch {} (step {}): l_rec {:.6} total {:.6}; outputs in {}",
                    r.epoch,
                    r.step,
                    r.l_rec,
                    r.total,
                    out.display()
                ),
                None => println!("nothing to train; outputs in {}", out.display()),
            }
            Ok(())
        }
        Command::Reconstruct {
            checkpoint,
            volume,
            ratio,
        } => {
            let cfg = resolve(g, stored_config(checkpoint)?)?;
            let ratio = ratio.unwrap_or(cfg.model.mask_ratio);
            validate_ratios(&[ratio]).map_err(Failure::Usage)?;
            let out = prepare_out(g, &["masked.vvol", "reconstruction.vvol"])?;
            let (mse, zero) = with_precision!(
                cfg.train.precision,
                reconstruct_command(&cfg, checkpoint, volume, ratio, &out)
            )?;
            write_resolved(&out, &cfg)?;
            println!(
                "hidden-voxel MSE {mse:.3} (zero fill {zero:.3}); wrote masked.vvol and reconstruction.vvol to {}",
                out.display()
            );
            Ok(())
        }
        Command::ExtractFeatures { checkpoint, dataset } => {
            let cfg = resolve(g, stored_config(checkpoint)?)?;
            let ds = VolumeDataset::open(dataset)?;
            let out = prepare_out(g, &["features.csv"])?;
            let table = with_precision!(cfg.train.precision, features_command(&cfg, checkpoint, &ds))?;
            table.write(&out.join("features.csv"))?;
            write_resolved(&out, &cfg)?;
            println!(
                "wrote {} × {} features to {}",
                table.rows.len(),
                table.dim(),
                out.join("features.csv").display()
            );
            Ok(())
        }
        Command::Probe { features } => {
            let cfg = resolve(g, preset)?;
            let table = FeatureTable::read(features)?;
            let out = prepare_out(g, &["probe.json"])?;
            let plan = FoldPlan::new(&table.labels(), cfg.probe.folds, cfg.probe.inner_fraction, cfg.probe.seed)?;
            let result = nested_cv(&table, &plan, &cfg.probe)?;
            let path = out.join("probe.json");
            let json = serde_json::to_string_pretty(&result).expect("probe result serializes");
            fs::write(&path, json + "\n").map_err(|e| io_failure(&path, e))?;
            write_resolved(&out, &cfg)?;
            println!(
                "mean AUC {:.4}, sensitivity {:.4}, specificity {:.4} over {} folds; wrote {}",
                result.mean_auc,
                result.mean_sensitivity,
                result.mean_specificity,
                result.folds.len(),
                path.display()
            );
            Ok(())
        }
        Command::SweepMaskRatio { dataset, ratios, seeds } => {
            validate_ratios(ratios).map_err(Failure::Usage)?;
            if seeds.is_empty() {
                return Err(Failure::Usage("no seeds given".into()));
            }
            let mut cfg = resolve(g, preset)?;
            if let Some(d) = dataset {
                cfg.train.dataset = d.display().to_string();
            }
            if cfg.train.dataset.is_empty() {
                return Err(Failure::Usage("no dataset: pass --dataset DIR or set train.dataset".into()));
            }
            let ds = VolumeDataset::open(Path::new(&cfg.train.dataset))?;
            let out = prepare_out(g, &["sweep.csv"])?;
            write_resolved(&out, &cfg)?;
            let report = with_precision!(cfg.train.precision, sweep_command(&cfg, &ds, ratios, seeds))?;
            let path = out.join("sweep.csv");
            fs::write(&path, report.to_csv()).map_err(|e| io_failure(&path, e))?;
            for (r, auc) in report.means() {
                println!("ratio {r}: mean AUC {auc:.4}");
            }
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::InspectCheckpoint { checkpoint } => {
            let (ck, crc) = read_checkpoint::<f64>(checkpoint)?;
            let cfg = stored_config(checkpoint)?;
            println!("checkpoint {}", checkpoint.display());
            println!("crc32 {crc:08x}");
            println!("next_epoch {}", ck.meta.next_epoch);
            println!("step {}", ck.meta.step);
            let scalars = MaskedVit3d::new(cfg.model.clone())?.layout.scalar_count();
            println!("parameters {} tensors, {scalars} scalars", ck.params.len());
            println!("optimizer state {}", if ck.optimizer.is_some() { "present" } else { "absent" });
            print!("\n{}", cfg.to_text());
            Ok(())
        }
    }
}

/// Preset (or stored config), then --config, --set, --seed and --precision.
fn resolve(g: &Global, base: RunConfig) -> Result<RunConfig, Failure> {
    let mut cfg = base;
    if let Some(p) = &g.config {
        let text = fs::read_to_string(p).map_err(|e| io_failure(p, e))?;
        cfg = RunConfig::from_text(&text, &cfg)?;
    }
    for s in &g.set {
        cfg.apply_override(s)?;
    }
    if let Some(seed) = g.seed {
        cfg.train.seed = seed;
        cfg.probe.seed = seed;
    }
    if let Some(p) = g.precision {
        cfg.train.precision = match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn stored_config(checkpoint: &Path) -> Result<RunConfig, Failure> {
    Ok(load_run::<f64>(checkpoint)?.0)
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Data(format!("{}: {e}", path.display()))
}

fn prepare_out_unchecked(g: &Global) -> Result<PathBuf, Failure> {
    let out = g
        .out
        .clone()
        .ok_or_else(|| Failure::Usage("missing --out DIR".into()))?;
    fs::create_dir_all(&out).map_err(|e| io_failure(&out, e))?;
    Ok(out)
}

/// Creates the output directory, refusing to replace any of `outputs`
/// unless --force was given.
fn prepare_out(g: &Global, outputs: &[&str]) -> Result<PathBuf, Failure> {
    let out = g
        .out
        .clone()
        .ok_or_else(|| Failure::Usage("missing --out DIR".into()))?;
    if !g.force {
        if let Some(p) = outputs.iter().map(|o| out.join(o)).find(|p| p.exists()) {
            return Err(Failure::Usage(format!("{} exists; pass --force to overwrite", p.display())));
        }
    }
    fs::create_dir_all(&out).map_err(|e| io_failure(&out, e))?;
    Ok(out)
}

fn same_dir(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

fn write_resolved(out: &Path, cfg: &RunConfig) -> Result<(), Failure> {
    let path = out.join("config.resolved");
    fs::write(&path, cfg.to_text()).map_err(|e| io_failure(&path, e))
}

fn gen_synthetic<T: Real>(out: &Path, syn: &SyntheticConfig) -> Result<VolumeDataset, Failure> {
    Ok(generate_synthetic::<T>(out, syn)?)
}

fn preprocess_dataset<T: Real>(input: &Path, out: &Path, side: usize) -> Result<usize, Failure> {
    let ds = VolumeDataset::open(input)?;
    let mut entries = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        let e = &ds.entries[i];
        let v = ds.load::<T>(i)?;
        let mask = ds.load_mask(i)?.ok_or_else(|| {
            Failure::Data(format!("{}: record {} has no mask", ds.root.join(&e.path).display(), e.id))
        })?;
        let p = preprocess_volume(&v, &mask, side)?.with_id(e.id.clone()).with_label(e.label);
        let rel = format!("volumes/{}.vvol", e.id);
        write_volume(&out.join(&rel), &p)?;
        entries.push(ManifestEntry {
            id: e.id.clone(),
            path: rel,
            label: e.label,
            mask: None,
        });
    }
    write_manifest(&out.join(VolumeDataset::MANIFEST), &entries)?;
    Ok(entries.len())
}

fn train_command<T: Real>(
    cfg: &RunConfig,
    ds: &VolumeDataset,
    out: &Path,
    resume: Option<&Path>,
    stop_before: Option<usize>,
) -> Result<TrainLog, Failure> {
    let volumes = ds.load_all::<T>()?;
    let (resume, mut log) = match resume {
        Some(p) => {
            let (_, ck) = load_run::<T>(p)?;
            let prior = out.join("trainlog.csv");
            let mut log = if prior.is_file() { TrainLog::read(&prior)? } else { TrainLog::default() };
            log.rows.retain(|r| r.epoch < ck.meta.next_epoch);
            (Some(ck), log)
        }
        None => (None, TrainLog::default()),
    };
    let outcome = train(
        cfg,
        &volumes,
        TrainOptions {
            out_dir: Some(out.to_path_buf()),
            resume,
            stop_before,
        },
    )?;
    log.rows.extend(outcome.log.rows);
    log.write(&out.join("trainlog.csv"))?;
    Ok(log)
}

fn reconstruct_command<T: Real>(
    cfg: &RunConfig,
    checkpoint: &Path,
    volume: &Path,
    ratio: f64,
    out: &Path,
) -> Result<(f64, f64), Failure> {
    let (_, ck) = load_run::<T>(checkpoint)?;
    let model = MaskedVit3d::new(cfg.model.clone())?;
    let v = read_volume::<T>(volume)?;
    let r = reconstruct(&model, &ck.params, &v, ratio, cfg.train.seed)?;
    write_volume(&out.join("masked.vvol"), &r.masked)?;
    write_volume(&out.join("reconstruction.vvol"), &r.reconstruction)?;
    let pv = cfg.model.patch_voxels();
    let orig = patchify(&v, cfg.model.patch_side)?;
    let rec = patchify(&r.reconstruction, cfg.model.patch_side)?;
    let (mut err, mut zero) = (0.0, 0.0);
    for &h in &r.plan.hidden {
        let span = h * pv..(h + 1) * pv;
        for (x, y) in orig.data()[span.clone()].iter().zip(&rec.data()[span]) {
            let (x, y) = (x.to_f64c(), y.to_f64c());
            err += (y - x).powi(2);
            zero += x * x;
        }
    }
    let n = (r.plan.hidden.len() * pv).max(1) as f64;
    Ok((err / n, zero / n))
}

fn features_command<T: Real>(cfg: &RunConfig, checkpoint: &Path, ds: &VolumeDataset) -> Result<FeatureTable, Failure> {
    let (ck, crc) = read_checkpoint::<T>(checkpoint)?;
    let model = MaskedVit3d::new(cfg.model.clone())?;
    ck.params.check_layout(&model.layout)?;
    let volumes = ds.load_all::<T>()?;
    Ok(build_feature_table(&model, &ck.params, &volumes, Some(format!("{crc:08x}")))?)
}

fn sweep_command<T: Real>(
    cfg: &RunConfig,
    ds: &VolumeDataset,
    ratios: &[f64],
    seeds: &[u64],
) -> Result<SweepReport, Failure> {
    let volumes = ds.load_all::<T>()?;
    let mut report = SweepReport::default();
    for &ratio in ratios {
        for &seed in seeds {
            let mut run = cfg.clone();
            run.model.mask_ratio = ratio;
            run.train.seed = seed;
            run.probe.seed = seed;
            run.validate()?;
            let outcome = train(&run, &volumes, TrainOptions::default())?;
            let model = MaskedVit3d::new(run.model.clone())?;
            let table = build_feature_table(&model, &outcome.checkpoint.params, &volumes, None)?;
            let plan = FoldPlan::new(&table.labels(), run.probe.folds, run.probe.inner_fraction, seed)?;
            let auc = nested_cv(&table, &plan, &run.probe)?.mean_auc;
            eprintln!("ratio {ratio} seed {seed}: AUC {auc:.4}");
            report.rows.push(SweepRow { ratio, seed, auc });
        }
    }
    Ok(report)
}
