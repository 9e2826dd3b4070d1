//! Temporal convolutional networks for pixel-level classification of
//! satellite image time series, with the preprocessing pipeline, a random
//! forest baseline, a synthetic phenology generator and evaluation tools.

pub mod arch;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod forest;
pub mod model;
pub mod nn;
pub mod preprocess;
pub mod seed;
pub mod series;
pub mod synth;

pub use error::{Error, Result};

pub use arch::{Architecture, TempCnnConfig};
pub use eval::{ConfusionMatrix, FoldResult};
pub use forest::{ForestConfig, ForestModel};
pub use model::{Classifier, ModelMetadata, SavedModel};
pub use nn::{LayerSpec, Network, NetworkSpec, Tensor3, TrainConfig};
pub use preprocess::{FeatureStrategy, NormalizationParams, Sampling};
pub use series::{AcquisitionCalendar, ClassLegend, Dataset, LabeledSample, MultivariateSeries, Rgb, SplitAssignment};
pub use synth::{PhenologyProfile, SceneSpec};
