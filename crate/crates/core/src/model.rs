//! Trained classifiers on disk: a network or a forest plus everything needed
//! to turn a raw dataset into its inputs (legend, sampling, strategy,
//! calendar and normalization bounds).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forest::{ForestModel, FOREST_HEADER};
use crate::nn::{network_from_bytes, network_to_bytes, predict, Network};
use crate::preprocess::{normalize_dataset, prepare_dataset, FeatureStrategy, NormalizationParams, Sampling};
use crate::series::{ClassLegend, Dataset, Rgb};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    /// Architecture name as given on the command line.
    pub arch: String,
    /// `(name, #RRGGBB)` per class index.
    pub legend: Vec<(String, String)>,
    pub strategy: FeatureStrategy,
    pub sampling: Sampling,
    /// Acquisition days of the raw data the model was trained on.
    pub calendar: Vec<i32>,
    pub normalization: NormalizationParams,
    pub seed: u64,
}

impl ModelMetadata {
    pub fn legend(&self) -> Result<ClassLegend> {
        let entries = self
            .legend
            .iter()
            .map(|(n, c)| {
                Rgb::parse_hex(c)
                    .map(|rgb| (n.clone(), rgb))
                    .ok_or_else(|| Error::Format(format!("bad legend color {c:?}")))
            })
            .collect::<Result<_>>()?;
        ClassLegend::new(entries)
    }

    pub fn legend_entries(legend: &ClassLegend) -> Vec<(String, String)> {
        (0..legend.len())
            .map(|c| (legend.name(c).to_string(), legend.color(c).to_hex()))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub enum Classifier {
    Network(Network),
    Forest(ForestModel),
}

#[derive(Debug, Clone)]
pub struct SavedModel {
    pub classifier: Classifier,
    pub metadata: ModelMetadata,
}

impl SavedModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_value(&self.metadata).expect("metadata serializes");
        match &self.classifier {
            Classifier::Network(net) => network_to_bytes(net, &meta),
            Classifier::Forest(forest) => forest.to_text(&meta).into_bytes(),
        }
    }

    /// Dispatches on the file signature.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (classifier, meta) = if bytes.starts_with(FOREST_HEADER.as_bytes()) {
            let text = std::str::from_utf8(bytes).map_err(|_| Error::Format("forest file is not UTF-8".into()))?;
            let (forest, meta) = ForestModel::from_text(text)?;
            (Classifier::Forest(forest), meta)
        } else {
            let (net, meta) = network_from_bytes(bytes)?;
            (Classifier::Network(net), meta)
        };
        let metadata: ModelMetadata =
            serde_json::from_value(meta).map_err(|e| Error::Format(format!("model metadata: {e}")))?;
        Ok(Self { classifier, metadata })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Preprocesses, normalizes and classifies a raw band dataset. Its legend
    /// and calendar must match the training data.
    pub fn predict_raw(&self, raw: &Dataset) -> Result<Vec<usize>> {
        let legend = self.metadata.legend()?;
        if *raw.legend() != legend {
            return Err(Error::InvalidInput(format!(
                "dataset legend [{}] differs from the model's [{}]",
                raw.legend().names().collect::<Vec<_>>().join(", "),
                legend.names().collect::<Vec<_>>().join(", ")
            )));
        }
        if raw.calendar().days() != self.metadata.calendar {
            return Err(Error::InvalidInput(
                "dataset acquisition dates differ from the training calendar".into(),
            ));
        }
        let features = prepare_dataset(raw, self.metadata.sampling, self.metadata.strategy)?;
        let features = normalize_dataset(&features, &self.metadata.normalization)?;
        match &self.classifier {
            Classifier::Network(net) => predict(net, &features),
            Classifier::Forest(forest) => forest.predict_dataset(&features),
        }
    }
}
