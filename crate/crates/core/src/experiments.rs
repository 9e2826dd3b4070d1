//! Fold orchestration and the ablation studies: guidance, reach, pooling,
//! width, depth, regularization and batch size.

use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::arch::{
    filter_for_reach, make_depth_sweep_with, make_width_sweep_with, Architecture, GuidanceKind, PoolingVariant,
    TempCnnConfig, DEPTH_SWEEP_WIDTHS, GRID_STEP_DAYS, SWEEP_WIDTHS,
};
use crate::error::{Error, Result};
use crate::eval::{carve_validation, confusion, mean_sd, polygon_split, split_datasets, subset_accuracy, FoldResult};
use crate::forest::{fit_forest_dataset, ForestConfig};
use crate::nn::{predict, train, NetworkSpec, TrainConfig};
use crate::preprocess::{fit_normalization, normalize_dataset, prepare_dataset, FeatureStrategy, Sampling};
use crate::seed;
use crate::series::{Dataset, MultivariateSeries};

pub const TRAIN_FRACTION: f64 = 0.6;
pub const N_FOLDS: usize = 5;

/// What gets trained in each fold.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Network(NetworkSpec),
    Forest { trees: usize },
}

/// Everything a fold needs besides the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Protocol {
    pub train: TrainConfig,
    pub folds: usize,
    pub train_fraction: f64,
    pub seed: u64,
    /// Runs folds on the rayon pool; results are identical either way.
    pub parallel_folds: bool,
}

impl Default for Protocol {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            folds: N_FOLDS,
            train_fraction: TRAIN_FRACTION,
            seed: 0,
            parallel_folds: false,
        }
    }
}

/// One evaluated fold with its raw predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldRun {
    pub result: FoldResult,
    pub reference: Vec<usize>,
    pub predicted: Vec<usize>,
    /// Mean optimization seconds per epoch; 0 for forests.
    pub epoch_seconds: f64,
    pub epochs: usize,
}

/// Splits `features` by polygon and evaluates `model` on every fold.
pub fn run_folds(features: &Dataset, model: &Model, protocol: &Protocol) -> Result<Vec<FoldRun>> {
    let outcome = polygon_split(features, protocol.train_fraction, protocol.folds, protocol.seed)?;
    let job = |split: &crate::series::SplitAssignment| run_fold(features, split, model, protocol);
    let mut runs = if protocol.parallel_folds {
        outcome.folds.par_iter().map(job).collect::<Result<Vec<_>>>()?
    } else {
        outcome.folds.iter().map(job).collect::<Result<Vec<_>>>()?
    };
    runs.sort_by_key(|r| r.result.fold_id);
    Ok(runs)
}

fn run_fold(
    features: &Dataset,
    split: &crate::series::SplitAssignment,
    model: &Model,
    protocol: &Protocol,
) -> Result<FoldRun> {
    let fold = split.fold_id as u64;
    let uses_validation = matches!(model, Model::Network(_)) && protocol.train.patience.is_some();
    let split = if uses_validation {
        carve_validation(split, features, protocol.train.val_fraction, protocol.seed)?
    } else {
        split.clone()
    };
    let (train_ds, val_ds, test_ds) = split_datasets(features, &split);
    let params = fit_normalization(&train_ds)?;
    let train_ds = normalize_dataset(&train_ds, &params)?;
    let test_ds = normalize_dataset(&test_ds, &params)?;
    let reference = test_ds.labels();
    let start = Instant::now();
    let (predicted, epoch_seconds, epochs) = match model {
        Model::Forest { trees } => {
            let cfg = ForestConfig {
                n_trees: *trees,
                mtry: None,
                seed: seed::derive(protocol.seed, "forest", fold),
            };
            let forest = fit_forest_dataset(&train_ds, &cfg)?;
            (forest.predict_dataset(&test_ds)?, 0.0, 0)
        }
        Model::Network(spec) => {
            let val_ds = normalize_dataset(&val_ds, &params)?;
            let mut cfg = TrainConfig {
                seed: seed::derive(protocol.seed, "train", fold),
                ..protocol.train.clone()
            };
            if val_ds.is_empty() {
                cfg.patience = None;
            }
            let (net, history) = train(spec, &train_ds, &val_ds, &cfg)?;
            let n = history.epochs.len();
            let mean = if n == 0 {
                0.0
            } else {
                history.epochs.iter().map(|e| e.seconds).sum::<f64>() / n as f64
            };
            (predict(&net, &test_ds)?, mean, n)
        }
    };
    let seconds = start.elapsed().as_secs_f64();
    let cm = confusion(&reference, &predicted, features.n_classes())?;
    Ok(FoldRun {
        result: FoldResult::new(split.fold_id, cm, seconds),
        reference,
        predicted,
        epoch_seconds,
        epochs,
    })
}

/// Mean and population sd of fold OA.
pub fn summarize(runs: &[FoldRun]) -> (f64, f64) {
    let oa: Vec<f64> = runs.iter().map(|r| r.result.overall_accuracy).collect();
    mean_sd(&oa)
}

/// Mean and population sd of fold accuracy restricted to `classes`.
pub fn summarize_subset(runs: &[FoldRun], classes: &[usize]) -> (f64, f64) {
    let acc: Vec<f64> = runs
        .iter()
        .map(|r| subset_accuracy(&r.reference, &r.predicted, classes))
        .collect();
    mean_sd(&acc)
}

fn median(mut values: Vec<f64>) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Applies one fixed permutation of time steps to every sample.
pub fn permute_time(dataset: &Dataset, perm: &[usize]) -> Result<Dataset> {
    let t = dataset.n_timesteps();
    let mut seen = vec![false; t];
    if perm.len() != t || perm.iter().any(|&p| p >= t || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::InvalidInput(format!("not a permutation of {t} time steps")));
    }
    dataset.map_series(
        dataset.feature_names().to_vec(),
        std::sync::Arc::clone(dataset.calendar()),
        |s| {
            let d = s.channels();
            let mut values = Vec::with_capacity(t * d);
            let mut mask = Vec::with_capacity(t * d);
            for &src in perm {
                values.extend_from_slice(&s.values()[src * d..(src + 1) * d]);
                mask.extend_from_slice(&s.mask()[src * d..(src + 1) * d]);
            }
            MultivariateSeries::new(std::sync::Arc::clone(s.calendar()), d, values, mask)
        },
    )
}

/// A seeded permutation of `0..t`.
pub fn time_permutation(t: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..t).collect();
    perm.shuffle(&mut seed::stream(seed, "time-permutation", 0));
    perm
}

/// Sizes that keep every study within desk compute.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StudyScale {
    /// Convolution units replacing the full-scale 64.
    pub width: usize,
    /// Dense units replacing the full-scale 256.
    pub dense: usize,
    /// Hidden units of the fully connected baseline.
    pub fc_units: usize,
    pub trees: usize,
    /// Base width the width sweep is divided by.
    pub width_divisor: usize,
    /// Parameter target of the depth sweep.
    pub depth_target: usize,
}

impl StudyScale {
    pub const FULL: StudyScale = StudyScale {
        width: 64,
        dense: 256,
        fc_units: crate::arch::FC_UNITS,
        trees: crate::arch::DEFAULT_TREES,
        width_divisor: 1,
        depth_target: crate::arch::DEPTH_SWEEP_TARGET,
    };

    pub const DESK: StudyScale = StudyScale {
        width: 16,
        dense: 64,
        fc_units: 128,
        trees: 100,
        width_divisor: 8,
        depth_target: 100_000,
    };

    pub fn tempcnn(&self) -> TempCnnConfig {
        TempCnnConfig {
            width: self.width,
            dense: self.dense,
            ..TempCnnConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Study {
    Guidance,
    Reach,
    Pooling,
    Width,
    Depth,
    Regularization,
    Batch,
}

impl Study {
    pub const ALL: [Study; 7] = [
        Study::Guidance,
        Study::Reach,
        Study::Pooling,
        Study::Width,
        Study::Depth,
        Study::Regularization,
        Study::Batch,
    ];
}

impl fmt::Display for Study {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Study::Guidance => "guidance",
            Study::Reach => "reach",
            Study::Pooling => "pooling",
            Study::Width => "width",
            Study::Depth => "depth",
            Study::Regularization => "regularization",
            Study::Batch => "batch",
        })
    }
}

impl FromStr for Study {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Study::ALL
            .into_iter()
            .find(|st| st.to_string() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidInput(format!("unknown study {s:?}")))
    }
}

/// Inputs shared by every configuration of a study.
#[derive(Debug, Clone, PartialEq)]
pub struct StudySettings {
    pub sampling: Sampling,
    /// Strategy for every study except guidance, which covers all three.
    pub strategy: FeatureStrategy,
    pub scale: StudyScale,
    pub protocol: Protocol,
}

impl Default for StudySettings {
    fn default() -> Self {
        Self {
            sampling: Sampling::Original,
            strategy: FeatureStrategy::Sb,
            scale: StudyScale::DESK,
            protocol: Protocol::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyRow {
    pub config: String,
    pub strategy: FeatureStrategy,
    pub mean_oa: f64,
    pub sd_oa: f64,
    /// Trainable scalars; absent for forests.
    pub params: Option<usize>,
    /// Median over folds of the mean epoch time.
    pub epoch_seconds: f64,
    /// Median over folds of the whole fit and predict time.
    pub fold_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyReport {
    pub study: Study,
    pub rows: Vec<StudyRow>,
}

impl StudyReport {
    pub fn row(&self, config: &str, strategy: FeatureStrategy) -> Option<&StudyRow> {
        self.rows.iter().find(|r| r.config == config && r.strategy == strategy)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("study,config,strategy,mean_oa,sd_oa,params,epoch_seconds,fold_seconds\n");
        for r in &self.rows {
            let params = r.params.map(|p| p.to_string()).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{:.6},{:.6},{},{:.6},{:.6}",
                self.study, r.config, r.strategy, r.mean_oa, r.sd_oa, params, r.epoch_seconds, r.fold_seconds
            )
            .unwrap();
        }
        out
    }
}

/// One named configuration of a study.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub name: String,
    pub strategy: FeatureStrategy,
    pub model: Model,
    pub train: TrainConfig,
}

fn network(arch: &Architecture, features: (usize, usize, usize)) -> Result<Model> {
    let (t, d, c) = features;
    Ok(Model::Network(arch.network_spec(t, d, c)?))
}

/// The regularization mechanisms toggled by the regularization study.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Regularization {
    pub dropout: bool,
    pub batchnorm: bool,
    pub weight_decay: bool,
    pub validation: bool,
}

impl Regularization {
    pub const NAMES: [&'static str; 4] = ["dropout", "batchnorm", "weight-decay", "validation"];

    fn from_flags(flags: [bool; 4]) -> Self {
        Self {
            dropout: flags[0],
            batchnorm: flags[1],
            weight_decay: flags[2],
            validation: flags[3],
        }
    }

    /// Nothing, each mechanism alone, all but each mechanism, everything.
    pub fn table() -> Vec<(String, Regularization)> {
        let mut rows = vec![("none".to_string(), Self::from_flags([false; 4]))];
        for (i, name) in Self::NAMES.iter().enumerate() {
            let mut flags = [false; 4];
            flags[i] = true;
            rows.push((format!("only-{name}"), Self::from_flags(flags)));
        }
        for (i, name) in Self::NAMES.iter().enumerate() {
            let mut flags = [true; 4];
            flags[i] = false;
            rows.push((format!("all-but-{name}"), Self::from_flags(flags)));
        }
        rows.push(("all".to_string(), Self::from_flags([true; 4])));
        rows
    }
}

pub const BATCH_SIZES: [usize; 5] = [8, 16, 32, 64, 128];
pub const REACH_DAYS: [u32; 5] = [2, 4, 8, 16, 32];

/// Configurations of `study` for features of `t` steps over `c` classes.
pub fn study_configs(study: Study, settings: &StudySettings, t: usize, c: usize) -> Result<Vec<StudyConfig>> {
    let scale = settings.scale;
    let base = scale.tempcnn();
    let strategy = settings.strategy;
    let d = strategy.channels();
    let train = settings.protocol.train.clone();
    let cfg = |name: String, model: Model| StudyConfig {
        name,
        strategy,
        model,
        train: train.clone(),
    };
    let mut out = Vec::new();
    match study {
        Study::Guidance => {
            for strategy in FeatureStrategy::ALL {
                let d = strategy.channels();
                let mut push = |name: &str, model: Model| {
                    out.push(StudyConfig {
                        name: name.to_string(),
                        strategy,
                        model,
                        train: train.clone(),
                    })
                };
                push("rf", Model::Forest { trees: scale.trees });
                for (name, kind) in [
                    ("fc", GuidanceKind::None),
                    ("temporal", GuidanceKind::Temporal),
                    ("spectral", GuidanceKind::Spectral),
                    ("spectro-temporal", GuidanceKind::SpectroTemporal),
                ] {
                    let arch = Architecture::Guidance {
                        kind,
                        cfg: base,
                        fc_units: scale.fc_units,
                    };
                    push(name, network(&arch, (t, d, c))?);
                }
            }
        }
        Study::Reach => {
            for reach in REACH_DAYS {
                let arch = Architecture::TempCnn(TempCnnConfig {
                    filter: filter_for_reach(reach, GRID_STEP_DAYS),
                    ..base
                });
                out.push(cfg(
                    format!("f={}", filter_for_reach(reach, GRID_STEP_DAYS)),
                    network(&arch, (t, d, c))?,
                ));
            }
        }
        Study::Pooling => {
            out.push(cfg("none".into(), network(&Architecture::TempCnn(base), (t, d, c))?));
            for variant in PoolingVariant::ALL {
                let arch = Architecture::Pooling {
                    variant,
                    reach_days: 4,
                    cfg: base,
                };
                out.push(cfg(variant.to_string(), network(&arch, (t, d, c))?));
            }
        }
        Study::Width => {
            let widths: Vec<usize> = SWEEP_WIDTHS.iter().map(|w| (w / scale.width_divisor).max(1)).collect();
            for (name, spec) in make_width_sweep_with(t, d, c, &base, &widths).members {
                out.push(cfg(name, Model::Network(spec)));
            }
        }
        Study::Depth => {
            let widths: Vec<usize> = DEPTH_SWEEP_WIDTHS
                .iter()
                .map(|w| (w / scale.width_divisor).max(2))
                .collect();
            for (name, spec) in make_depth_sweep_with(t, d, c, &base, &widths, scale.depth_target)?.members {
                out.push(cfg(name, Model::Network(spec)));
            }
        }
        Study::Regularization => {
            for (name, reg) in Regularization::table() {
                let arch = Architecture::TempCnn(TempCnnConfig {
                    dropout: if reg.dropout { base.dropout } else { 0.0 },
                    batchnorm: reg.batchnorm,
                    ..base
                });
                let mut train = train.clone();
                if !reg.weight_decay {
                    train.weight_decay = 0.0;
                }
                if !reg.validation {
                    train.patience = None;
                }
                out.push(StudyConfig {
                    name,
                    strategy,
                    model: network(&arch, (t, d, c))?,
                    train,
                });
            }
        }
        Study::Batch => {
            for batch in BATCH_SIZES {
                out.push(StudyConfig {
                    name: format!("batch={batch}"),
                    strategy,
                    model: network(&Architecture::TempCnn(base), (t, d, c))?,
                    train: TrainConfig {
                        batch_size: batch,
                        ..train.clone()
                    },
                });
            }
        }
    }
    Ok(out)
}

/// Runs every configuration of `study` over the polygon folds of `raw`.
pub fn run_study(study: Study, raw: &Dataset, settings: &StudySettings) -> Result<StudyReport> {
    let strategies: Vec<FeatureStrategy> = match study {
        Study::Guidance => FeatureStrategy::ALL.to_vec(),
        _ => vec![settings.strategy],
    };
    let prepared: Vec<(FeatureStrategy, Dataset)> = strategies
        .into_iter()
        .map(|s| Ok((s, prepare_dataset(raw, settings.sampling, s)?)))
        .collect::<Result<_>>()?;
    let t = prepared[0].1.n_timesteps();
    let configs = study_configs(study, settings, t, raw.n_classes())?;
    let mut rows = Vec::with_capacity(configs.len());
    for config in configs {
        let features = &prepared
            .iter()
            .find(|(s, _)| *s == config.strategy)
            .expect("strategy prepared")
            .1;
        let protocol = Protocol {
            train: config.train.clone(),
            ..settings.protocol.clone()
        };
        let runs = run_folds(features, &config.model, &protocol)?;
        let (mean_oa, sd_oa) = summarize(&runs);
        let params = match &config.model {
            Model::Network(spec) => Some(spec.param_count()?),
            Model::Forest { .. } => None,
        };
        rows.push(StudyRow {
            config: config.name,
            strategy: config.strategy,
            mean_oa,
            sd_oa,
            params,
            epoch_seconds: median(runs.iter().map(|r| r.epoch_seconds).collect()),
            fold_seconds: median(runs.iter().map(|r| r.result.train_seconds).collect()),
        });
    }
    Ok(StudyReport { study, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regularization_table_has_ten_distinct_rows() {
        let rows = Regularization::table();
        assert_eq!(rows.len(), 10);
        let mut flags: Vec<_> = rows
            .iter()
            .map(|(_, r)| (r.dropout, r.batchnorm, r.weight_decay, r.validation))
            .collect();
        flags.sort();
        flags.dedup();
        assert_eq!(flags.len(), 10);
    }

    #[test]
    fn study_names_roundtrip() {
        for s in Study::ALL {
            assert_eq!(s.to_string().parse::<Study>().unwrap(), s);
        }
        assert!("bogus".parse::<Study>().is_err());
    }

    #[test]
    fn permutation_checks() {
        assert_eq!(time_permutation(5, 3).len(), 5);
        let mut p = time_permutation(46, 1);
        p.sort();
        assert_eq!(p, (0..46).collect::<Vec<_>>());
    }
}
