//! Commands behind the `tempcnn` binary. Each `cmd_*` function does the work
//! of one subcommand and returns a printable summary, so tests can drive them
//! without spawning processes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use tempcnn_core::arch::{Architecture, FC_LAYERS};
use tempcnn_core::eval::{
    carve_validation, confusion, disagreement_map, overall_accuracy, polygon_split, render_map, split_datasets,
};
use tempcnn_core::experiments::{run_study, Protocol, Study, StudyScale, StudySettings, N_FOLDS, TRAIN_FRACTION};
use tempcnn_core::forest::{fit_forest_dataset, ForestConfig};
use tempcnn_core::model::{Classifier, ModelMetadata, SavedModel};
use tempcnn_core::nn::{gradient_check, train, NetworkSpec, Tensor3, TrainConfig};
use tempcnn_core::preprocess::{fit_normalization, normalize_dataset, prepare_dataset, FeatureStrategy, Sampling};
use tempcnn_core::series::{dataset_read, dataset_write, legend_path_for, Dataset};
use tempcnn_core::synth::{default_scene, generate_grid_scene, generate_scene, SceneSpec, ShiftBenchmarkSpec};
use tempcnn_core::{seed, Error};

/// Gradient checks fail above this relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Process exit status of each failure class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitCode {
    Ok = 0,
    Usage = 1,
    Data = 2,
    Numeric = 3,
}

/// Failures that are numeric rather than about the inputs.
#[derive(Debug)]
pub struct NumericFailure(pub String);

impl std::fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericFailure {}

/// Exit status for an error returned by a command.
pub fn exit_code(err: &anyhow::Error) -> ExitCode {
    for cause in err.chain() {
        if cause.downcast_ref::<NumericFailure>().is_some() {
            return ExitCode::Numeric;
        }
        if let Some(Error::Numeric(_)) = cause.downcast_ref::<Error>() {
            return ExitCode::Numeric;
        }
    }
    ExitCode::Data
}

#[derive(Debug, Parser)]
#[command(
    name = "tempcnn",
    version,
    about = "Temporal CNNs for satellite image time series classification"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (CSV plus legend sidecar).
    Synth(SynthArgs),
    /// Train one classifier on the training polygons of one fold.
    Train(TrainArgs),
    /// Confusion matrix and overall accuracy of a saved model on a dataset.
    Eval(EvalArgs),
    /// Run an ablation study over polygon folds.
    Sweep(SweepArgs),
    /// Render land-cover maps and, for two models, their disagreement.
    Map(MapArgs),
    /// Finite-difference gradient check of a tiny instance of an architecture.
    Gradcheck(GradcheckArgs),
}

/// `HxW` raster size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
}

impl FromStr for Grid {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (h, w) = s.split_once(['x', 'X']).ok_or("expected HxW")?;
        let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("bad grid size {s:?}"));
        let grid = Grid {
            height: parse(h)?,
            width: parse(w)?,
        };
        if grid.height == 0 || grid.width == 0 {
            return Err("grid dimensions must be positive".into());
        }
        Ok(grid)
    }
}

/// Keeps the name as given once it parses, so saved models record it verbatim.
fn arch_name(s: &str) -> std::result::Result<String, String> {
    s.parse::<Architecture>()
        .map(|_| s.to_string())
        .map_err(|e| e.to_string())
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Scene config (TOML). Defaults to the built-in 13-class scene.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    /// Generate the shift benchmark with this shift in days instead of a scene.
    #[arg(long, conflicts_with = "scene")]
    pub shift: Option<f64>,
    /// Generate a raster of this size in row-major pixel order.
    #[arg(long)]
    pub grid: Option<Grid>,
    /// Side of the square polygons of a raster.
    #[arg(long, default_value_t = 8)]
    pub block: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Overrides of the training protocol shared by `train` and `sweep`.
#[derive(Debug, Clone, Args)]
pub struct ProtocolArgs {
    /// Feature strategy: ndvi, sb or sb-sf.
    #[arg(long, default_value = "sb")]
    pub strategy: FeatureStrategy,
    /// Temporal sampling: original or 2day.
    #[arg(long, default_value = "2day")]
    pub sampling: Sampling,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long = "batch-size")]
    pub batch_size: Option<usize>,
    /// TOML file of training settings; unknown keys are rejected.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl ProtocolArgs {
    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                toml::from_str(&text).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?
            }
            None => TrainConfig::default(),
        };
        if let Some(e) = self.epochs {
            cfg.max_epochs = e;
        }
        if let Some(b) = self.batch_size {
            if b == 0 {
                return Err(Error::InvalidInput("batch size must be positive".into()).into());
            }
            cfg.batch_size = b;
        }
        cfg.seed = self.seed;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Architecture name, e.g. tempcnn, fc, guidance:temporal, pool:ap+gap:reach=8, rf.
    #[arg(long, default_value = "tempcnn", value_parser = arch_name)]
    pub arch: String,
    #[command(flatten)]
    pub protocol: ProtocolArgs,
    /// Which polygon fold's training set to use.
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
    /// Model file; the history goes next to it as `<out>.history.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Confusion matrix CSV; the accuracy goes to `<out>.summary.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    /// guidance, reach, pooling, width, depth, regularization or batch.
    #[arg(long)]
    pub study: Study,
    #[arg(long)]
    pub dataset: PathBuf,
    #[command(flatten)]
    pub protocol: ProtocolArgs,
    #[arg(long, default_value_t = N_FOLDS)]
    pub folds: usize,
    /// Model sizes: desk or full.
    #[arg(long, default_value = "desk", value_parser = ["desk", "full"])]
    pub scale: String,
    /// Run folds in parallel.
    #[arg(long)]
    pub parallel_folds: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct MapArgs {
    /// One or two model files.
    #[arg(long = "model", required = true, num_args = 1)]
    pub models: Vec<PathBuf>,
    /// Raster dataset in row-major pixel order.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub grid: Grid,
    /// Output directory for `map-1.ppm`, `map-2.ppm` and `disagreement.ppm`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "tempcnn", value_parser = arch_name)]
    pub arch: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a).map(|s| s.to_string()),
        Command::Eval(a) => cmd_eval(&a).map(|s| s.to_string()),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Map(a) => cmd_map(&a).map(|s| s.to_string()),
        Command::Gradcheck(a) => cmd_gradcheck(&a).map(|e| format!("max relative error {e:.3e}")),
    }
}

fn read_dataset(path: &Path) -> Result<Dataset> {
    Ok(dataset_read(path, &legend_path_for(path))?)
}

fn histogram(ds: &Dataset) -> String {
    let mut out = String::from("class,pixels,polygons\n");
    let counts = ds.class_counts();
    let mut polys = vec![0; ds.n_classes()];
    for info in ds.polygons().values() {
        polys[info.label] += 1;
    }
    for c in 0..ds.n_classes() {
        writeln!(out, "{},{},{}", ds.legend().name(c), counts[c], polys[c]).unwrap();
    }
    out
}

/// Writes the dataset and returns its class histogram.
pub fn cmd_synth(args: &SynthArgs) -> Result<String> {
    let scene: SceneSpec = match (&args.scene, args.shift) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            SceneSpec::from_toml(&text)?
        }
        (None, Some(shift)) => ShiftBenchmarkSpec::new(shift).scene(),
        (None, None) => default_scene(),
    };
    let ds = match args.grid {
        Some(g) => generate_grid_scene(&scene, g.height, g.width, args.block, args.seed)?,
        None => generate_scene(&scene, args.seed)?,
    };
    dataset_write(&ds, &args.out)?;
    Ok(histogram(&ds))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub model: PathBuf,
    pub history: Option<PathBuf>,
    pub epochs: usize,
    pub final_val_loss: Option<f64>,
    pub train_samples: usize,
    pub validation_samples: usize,
}

impl std::fmt::Display for TrainSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "trained on {} samples ({} validation), {} epochs",
            self.train_samples, self.validation_samples, self.epochs
        )?;
        if let Some(v) = self.final_val_loss {
            write!(f, ", final validation loss {v}")?;
        }
        write!(f, "; model written to {}", self.model.display())
    }
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Preprocess, split, train and save.
pub fn cmd_train(args: &TrainArgs) -> Result<TrainSummary> {
    let arch: Architecture = args.arch.parse()?;
    let mut cfg = args.protocol.train_config()?;
    let raw = read_dataset(&args.dataset)?;
    let features = prepare_dataset(&raw, args.protocol.sampling, args.protocol.strategy)?;
    let split = polygon_split(&features, TRAIN_FRACTION, args.fold + 1, args.protocol.seed)?;
    for w in &split.warnings {
        eprintln!("warning: {w}");
    }
    let mut split = split.folds[args.fold].clone();
    if !arch.is_forest() && cfg.patience.is_some() {
        split = carve_validation(&split, &features, cfg.val_fraction, args.protocol.seed)?;
        if split.validation_polygons.is_empty() {
            eprintln!("warning: validation set is empty; training without early stopping");
            cfg.patience = None;
        }
    }
    let (train_ds, val_ds, _) = split_datasets(&features, &split);
    let params = fit_normalization(&train_ds)?;
    let train_ds = normalize_dataset(&train_ds, &params)?;
    let val_ds = normalize_dataset(&val_ds, &params)?;
    let metadata = ModelMetadata {
        arch: args.arch.clone(),
        legend: ModelMetadata::legend_entries(raw.legend()),
        strategy: args.protocol.strategy,
        sampling: args.protocol.sampling,
        calendar: raw.calendar().days().to_vec(),
        normalization: params,
        seed: args.protocol.seed,
    };
    let (classifier, history) = if let Architecture::Forest { trees } = arch {
        let forest = fit_forest_dataset(
            &train_ds,
            &ForestConfig {
                n_trees: trees,
                mtry: None,
                seed: seed::derive(args.protocol.seed, "forest", args.fold as u64),
            },
        )?;
        (Classifier::Forest(forest), None)
    } else {
        let spec = arch.network_spec(train_ds.n_timesteps(), train_ds.n_channels(), train_ds.n_classes())?;
        let (net, history) = train(&spec, &train_ds, &val_ds, &cfg)?;
        (Classifier::Network(net), Some(history))
    };
    SavedModel { classifier, metadata }.save(&args.out)?;
    let history_path = match &history {
        Some(h) => {
            let path = suffixed(&args.out, ".history.csv");
            fs::write(&path, h.to_csv()).with_context(|| format!("writing {}", path.display()))?;
            Some(path)
        }
        None => None,
    };
    Ok(TrainSummary {
        model: args.out.clone(),
        history: history_path,
        epochs: history.as_ref().map_or(0, |h| h.epochs.len()),
        final_val_loss: history.as_ref().and_then(|h| h.epochs.last()).and_then(|e| e.val_loss),
        train_samples: train_ds.len(),
        validation_samples: val_ds.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub overall_accuracy: f64,
    pub samples: usize,
    pub confusion_csv: String,
}

impl std::fmt::Display for EvalSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}overall accuracy {:.4} on {} samples",
            self.confusion_csv, self.overall_accuracy, self.samples
        )
    }
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalSummary> {
    let model = SavedModel::load(&args.model)?;
    let raw = read_dataset(&args.dataset)?;
    let predicted = model.predict_raw(&raw)?;
    let cm = confusion(&raw.labels(), &predicted, raw.n_classes())?;
    let summary = EvalSummary {
        overall_accuracy: overall_accuracy(&cm),
        samples: cm.total(),
        confusion_csv: cm.to_csv(raw.legend()),
    };
    if let Some(out) = &args.out {
        fs::write(out, &summary.confusion_csv).with_context(|| format!("writing {}", out.display()))?;
        let path = suffixed(out, ".summary.csv");
        fs::write(
            &path,
            format!(
                "metric,value\noverall_accuracy,{}\nsamples,{}\n",
                summary.overall_accuracy, summary.samples
            ),
        )
        .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(summary)
}

/// Runs the study and writes its table; returns the CSV.
pub fn cmd_sweep(args: &SweepArgs) -> Result<String> {
    let scale = match args.scale.as_str() {
        "desk" => StudyScale::DESK,
        "full" => StudyScale::FULL,
        other => bail!(Error::InvalidInput(format!("unknown scale {other:?} (desk or full)"))),
    };
    let raw = read_dataset(&args.dataset)?;
    let settings = StudySettings {
        sampling: args.protocol.sampling,
        strategy: args.protocol.strategy,
        scale,
        protocol: Protocol {
            train: args.protocol.train_config()?,
            folds: args.folds,
            train_fraction: TRAIN_FRACTION,
            seed: args.protocol.seed,
            parallel_folds: args.parallel_folds,
        },
    };
    let report = run_study(args.study, &raw, &settings)?;
    let csv = report.to_csv();
    fs::write(&args.out, &csv).with_context(|| format!("writing {}", args.out.display()))?;
    Ok(csv)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapSummary {
    pub maps: Vec<PathBuf>,
    pub disagreement: Option<(PathBuf, usize)>,
}

impl std::fmt::Display for MapSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for m in &self.maps {
            writeln!(f, "wrote {}", m.display())?;
        }
        if let Some((p, n)) = &self.disagreement {
            write!(f, "wrote {} ({n} disagreeing pixels)", p.display())?;
        }
        Ok(())
    }
}

pub fn cmd_map(args: &MapArgs) -> Result<MapSummary> {
    if args.models.is_empty() || args.models.len() > 2 {
        bail!(Error::InvalidInput("map takes one or two models".into()));
    }
    let raw = read_dataset(&args.dataset)?;
    let (h, w) = (args.grid.height, args.grid.width);
    if raw.len() != h * w {
        bail!(Error::Shape(format!("{} pixels do not fill a {h}x{w} grid", raw.len())));
    }
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut predictions = Vec::new();
    let mut maps = Vec::new();
    for (i, path) in args.models.iter().enumerate() {
        let model = SavedModel::load(path)?;
        let labels = model.predict_raw(&raw)?;
        let out = args.out.join(format!("map-{}.ppm", i + 1));
        fs::write(&out, render_map(&labels, h, w, raw.legend())?)?;
        maps.push(out);
        predictions.push(labels);
    }
    let disagreement = if let [a, b] = predictions.as_slice() {
        let (img, n) = disagreement_map(a, b, h, w, raw.legend())?;
        let out = args.out.join("disagreement.ppm");
        fs::write(&out, img)?;
        Some((out, n))
    } else {
        None
    };
    Ok(MapSummary { maps, disagreement })
}

/// Input length, channels, classes and conv width of gradient-check instances.
pub const TINY: (usize, usize, usize, usize) = (16, 2, 3, 4);

/// The named architecture shrunk to the gradient-check size.
pub fn tiny_spec(arch: &Architecture) -> Result<NetworkSpec> {
    let (t, d, c, width) = TINY;
    let shrink = |cfg: &tempcnn_core::arch::TempCnnConfig| tempcnn_core::arch::TempCnnConfig {
        width,
        dense: width,
        ..*cfg
    };
    let tiny = match arch {
        Architecture::TempCnn(cfg) => Architecture::TempCnn(shrink(cfg)),
        Architecture::Fc { cfg, .. } => Architecture::Fc {
            units: width,
            layers: FC_LAYERS,
            cfg: shrink(cfg),
        },
        Architecture::Guidance { kind, cfg, .. } => Architecture::Guidance {
            kind: *kind,
            cfg: shrink(cfg),
            fc_units: width,
        },
        Architecture::Pooling {
            variant,
            reach_days,
            cfg,
        } => Architecture::Pooling {
            variant: *variant,
            reach_days: *reach_days,
            cfg: shrink(cfg),
        },
        Architecture::Forest { .. } => {
            bail!(Error::InvalidInput("a random forest has no gradients to check".into()))
        }
    };
    Ok(tiny.network_spec(t, d, c)?)
}

/// Builds the tiny instance and compares analytic and numeric gradients.
pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<f64> {
    let arch: Architecture = args.arch.parse()?;
    let spec = tiny_spec(&arch)?;
    let (t, d, c, _) = TINY;
    let n = 6;
    let mut rng = seed::stream(args.seed, "gradcheck-input", 0);
    let data = (0..n * t * d)
        .map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0))
        .collect();
    let x = Tensor3::from_vec(n, t, d, data)?;
    let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    let report = gradient_check(&spec, &x, &labels, 1e-5, args.seed)?;
    if report.max_rel_error > GRADCHECK_TOLERANCE {
        return Err(anyhow!(NumericFailure(format!(
            "gradient check failed: max relative error {:.3e} at array {}, element {}",
            report.max_rel_error, report.worst.0, report.worst.1
        ))));
    }
    Ok(report.max_rel_error)
}
