use serde::{Deserialize, Serialize};

use super::layers::{ConvKind, PoolKind};
use crate::error::{Error, Result};

/// One entry of a declarative layer stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    /// `same` zero padding, stride 1.
    Conv {
        filter: usize,
        units: usize,
        kind: ConvKind,
    },
    Pool {
        kind: PoolKind,
        window: usize,
    },
    GlobalAvgPool,
    Flatten,
    Dense {
        units: usize,
    },
    BatchNorm,
    Relu,
    Dropout {
        rate: f64,
    },
    /// Dense projection to `classes` logits followed by softmax.
    Softmax {
        classes: usize,
    },
}

impl LayerSpec {
    pub fn conv(filter: usize, units: usize) -> Self {
        LayerSpec::Conv {
            filter,
            units,
            kind: ConvKind::Full,
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. })
    }
}

/// Input shape plus an ordered layer stack ending in a softmax.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_len: usize,
    pub input_channels: usize,
    pub layers: Vec<LayerSpec>,
}

/// `(time, channels)` activation shape per sample.
pub type Shape = (usize, usize);

impl NetworkSpec {
    pub fn new(input_len: usize, input_channels: usize, layers: Vec<LayerSpec>) -> Self {
        Self {
            input_len,
            input_channels,
            layers,
        }
    }

    /// Output shape of every layer, or the first inconsistency.
    pub fn shapes(&self) -> Result<Vec<Shape>> {
        if self.input_len == 0 || self.input_channels == 0 {
            return Err(Error::Shape("network input must be non-empty".into()));
        }
        let mut shape = (self.input_len, self.input_channels);
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let err = |msg: String| Error::Shape(format!("layer {i} ({layer:?}): {msg}"));
            let (t, d) = shape;
            shape = match *layer {
                LayerSpec::Conv { filter, units, .. } => {
                    if filter == 0 || units == 0 {
                        return Err(err("filter and units must be positive".into()));
                    }
                    (t, units)
                }
                LayerSpec::Pool { window, .. } => {
                    if window == 0 || t / window == 0 {
                        return Err(err(format!("window {window} too large for {t} steps")));
                    }
                    (t / window, d)
                }
                LayerSpec::GlobalAvgPool => (1, d),
                LayerSpec::Flatten => (1, t * d),
                LayerSpec::Dense { units } => {
                    if t != 1 {
                        return Err(err("dense layer needs a flattened input".into()));
                    }
                    if units == 0 {
                        return Err(err("units must be positive".into()));
                    }
                    (1, units)
                }
                LayerSpec::BatchNorm | LayerSpec::Relu => (t, d),
                LayerSpec::Dropout { rate } => {
                    if !(0.0..1.0).contains(&rate) {
                        return Err(err(format!("dropout rate {rate} not in [0, 1)")));
                    }
                    (t, d)
                }
                LayerSpec::Softmax { classes } => {
                    if t != 1 {
                        return Err(err("softmax needs a flattened input".into()));
                    }
                    if classes < 2 {
                        return Err(err("softmax needs at least 2 classes".into()));
                    }
                    if i + 1 != self.layers.len() {
                        return Err(err("softmax must be the last layer".into()));
                    }
                    (1, classes)
                }
            };
            out.push(shape);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let shapes = self.shapes()?;
        match self.layers.last() {
            Some(LayerSpec::Softmax { .. }) => Ok(()),
            _ => Err(Error::Shape(format!(
                "network must end with a softmax layer ({} layers)",
                shapes.len()
            ))),
        }
    }

    pub fn classes(&self) -> Option<usize> {
        match self.layers.last() {
            Some(LayerSpec::Softmax { classes }) => Some(*classes),
            _ => None,
        }
    }

    /// Trainable scalars per layer, from the closed-form count of each type.
    pub fn layer_param_counts(&self) -> Result<Vec<usize>> {
        let shapes = self.shapes()?;
        let mut prev = (self.input_len, self.input_channels);
        let mut counts = Vec::with_capacity(self.layers.len());
        for (layer, &shape) in self.layers.iter().zip(&shapes) {
            let (t, d) = prev;
            counts.push(match *layer {
                LayerSpec::Conv {
                    filter,
                    units,
                    kind: ConvKind::Full,
                } => filter * d * units + units,
                LayerSpec::Conv {
                    filter,
                    units,
                    kind: ConvKind::Temporal,
                } => filter * units + units,
                LayerSpec::Dense { units } => t * d * units + units,
                LayerSpec::Softmax { classes } => t * d * classes + classes,
                LayerSpec::BatchNorm => 2 * d,
                _ => 0,
            });
            prev = shape;
        }
        Ok(counts)
    }

    /// Total number of trainable scalars. An empty stack has none.
    pub fn param_count(&self) -> Result<usize> {
        Ok(self.layer_param_counts()?.iter().sum())
    }

    pub fn has_layer(&self, pred: impl Fn(&LayerSpec) -> bool) -> bool {
        self.layers.iter().any(pred)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_counts() {
        let spec = NetworkSpec::new(149, 3, vec![LayerSpec::conv(5, 64)]);
        assert_eq!(spec.param_count().unwrap(), 1024);
        let spec = NetworkSpec::new(1, 256, vec![LayerSpec::Softmax { classes: 13 }]);
        assert_eq!(spec.param_count().unwrap(), 3341);
        assert_eq!(NetworkSpec::new(10, 2, vec![]).param_count().unwrap(), 0);
        let temporal = NetworkSpec::new(
            20,
            3,
            vec![LayerSpec::Conv {
                filter: 5,
                units: 8,
                kind: ConvKind::Temporal,
            }],
        );
        assert_eq!(temporal.param_count().unwrap(), 5 * 8 + 8);
    }

    #[test]
    fn shape_chain_and_errors() {
        let spec = NetworkSpec::new(
            9,
            2,
            vec![
                LayerSpec::conv(3, 4),
                LayerSpec::Pool {
                    kind: PoolKind::Max,
                    window: 2,
                },
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 5 },
                LayerSpec::Softmax { classes: 3 },
            ],
        );
        assert_eq!(spec.shapes().unwrap(), vec![(9, 4), (4, 4), (1, 16), (1, 5), (1, 3)]);
        spec.validate().unwrap();

        let no_flatten = NetworkSpec::new(9, 2, vec![LayerSpec::Dense { units: 3 }]);
        assert!(no_flatten.shapes().is_err());
        let no_softmax = NetworkSpec::new(9, 2, vec![LayerSpec::Flatten]);
        assert!(no_softmax.validate().is_err());
        let softmax_mid = NetworkSpec::new(1, 2, vec![LayerSpec::Softmax { classes: 2 }, LayerSpec::Relu]);
        assert!(softmax_mid.shapes().is_err());
    }

    #[test]
    fn serde_descriptor_roundtrip() {
        let spec = NetworkSpec::new(
            9,
            2,
            vec![
                LayerSpec::conv(3, 4),
                LayerSpec::Dropout { rate: 0.5 },
                LayerSpec::GlobalAvgPool,
                LayerSpec::Softmax { classes: 3 },
            ],
        );
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<NetworkSpec>(&json).unwrap(), spec);
    }
}
