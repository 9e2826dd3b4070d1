//! Binary network container: magic and version, a length-prefixed JSON header
//! (spec, array table, caller metadata), then every array as little-endian
//! `f64` in header order.

use serde::{Deserialize, Serialize};

use super::network::{LayerState, Network};
use super::spec::NetworkSpec;
use crate::error::{Error, Result};

pub const NETWORK_MAGIC: &[u8; 8] = b"TCNNMDL\0";
pub const NETWORK_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    layer: usize,
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    spec: NetworkSpec,
    arrays: Vec<ArrayEntry>,
    batchnorm: Vec<BatchNormMeta>,
    metadata: serde_json::Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BatchNormMeta {
    layer: usize,
    momentum: f64,
    epsilon: f64,
    updates: u64,
}

fn visit_arrays(net: &mut Network, mut f: impl FnMut(usize, &str, Vec<usize>, &mut Vec<f64>)) {
    for (i, layer) in net.layers.iter_mut().enumerate() {
        match layer {
            LayerState::Conv { params, .. } => {
                let shape = match params.kind {
                    super::layers::ConvKind::Full => {
                        vec![params.filter, params.in_channels, params.units]
                    }
                    super::layers::ConvKind::Temporal => vec![params.filter, params.units],
                };
                f(i, "weights", shape, &mut params.weights);
                f(i, "bias", vec![params.units], &mut params.bias);
            }
            LayerState::Dense { params, .. } => {
                f(i, "weights", vec![params.inputs, params.units], &mut params.weights);
                f(i, "bias", vec![params.units], &mut params.bias);
            }
            LayerState::BatchNorm { state, .. } => {
                let d = state.channels();
                f(i, "gamma", vec![d], &mut state.gamma);
                f(i, "beta", vec![d], &mut state.beta);
                f(i, "running_mean", vec![d], &mut state.running_mean);
                f(i, "running_var", vec![d], &mut state.running_var);
            }
            _ => {}
        }
    }
}

/// Serializes parameters and batch-norm statistics. Optimizer state is not kept.
pub fn network_to_bytes(net: &Network, metadata: &serde_json::Value) -> Vec<u8> {
    let mut net = net.clone();
    let mut arrays = Vec::new();
    let mut payload = Vec::new();
    visit_arrays(&mut net, |layer, name, shape, values| {
        arrays.push(ArrayEntry {
            layer,
            name: name.to_string(),
            shape,
        });
        for v in values.iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    });
    let batchnorm = net
        .layers
        .iter()
        .enumerate()
        .filter_map(|(layer, l)| match l {
            LayerState::BatchNorm { state, .. } => Some(BatchNormMeta {
                layer,
                momentum: state.momentum,
                epsilon: state.epsilon,
                updates: state.updates,
            }),
            _ => None,
        })
        .collect();
    let header = Header {
        version: NETWORK_FORMAT_VERSION,
        spec: net.spec().clone(),
        arrays,
        batchnorm,
        metadata: metadata.clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(NETWORK_MAGIC.len() + 8 + json.len() + payload.len());
    out.extend_from_slice(NETWORK_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

/// Inverse of [`network_to_bytes`]. Returns the network and its metadata.
pub fn network_from_bytes(bytes: &[u8]) -> Result<(Network, serde_json::Value)> {
    let rest = bytes
        .strip_prefix(NETWORK_MAGIC.as_slice())
        .ok_or_else(|| format_err("not a network model file (bad magic)"))?;
    if rest.len() < 8 {
        return Err(format_err("truncated header length"));
    }
    let (len, rest) = rest.split_at(8);
    let len = u64::from_le_bytes(len.try_into().expect("8 bytes")) as usize;
    if rest.len() < len {
        return Err(format_err("truncated header"));
    }
    let (json, mut payload) = rest.split_at(len);
    let header: Header = serde_json::from_slice(json).map_err(|e| format_err(format!("bad header: {e}")))?;
    if header.version != NETWORK_FORMAT_VERSION {
        return Err(format_err(format!("unsupported model version {}", header.version)));
    }
    let mut net = Network::new(&header.spec, 0)?;
    let mut entries = header.arrays.iter();
    let mut failure = None;
    visit_arrays(&mut net, |layer, name, shape, values| {
        if failure.is_some() {
            return;
        }
        let expected = ArrayEntry {
            layer,
            name: name.to_string(),
            shape,
        };
        match entries.next() {
            Some(e) if *e == expected => {}
            other => {
                failure = Some(format!("array table mismatch: expected {expected:?}, found {other:?}"));
                return;
            }
        }
        let need = values.len() * 8;
        if payload.len() < need {
            failure = Some("truncated payload".to_string());
            return;
        }
        let (chunk, tail) = payload.split_at(need);
        for (v, b) in values.iter_mut().zip(chunk.chunks_exact(8)) {
            *v = f64::from_le_bytes(b.try_into().expect("8 bytes"));
        }
        payload = tail;
    });
    if let Some(msg) = failure {
        return Err(format_err(msg));
    }
    if entries.next().is_some() || !payload.is_empty() {
        return Err(format_err("trailing arrays or bytes after payload"));
    }
    let mut meta = header.batchnorm.iter();
    for (layer, l) in net.layers.iter_mut().enumerate() {
        if let LayerState::BatchNorm { state, .. } = l {
            let m = meta
                .next()
                .filter(|m| m.layer == layer)
                .ok_or_else(|| format_err("batch-norm table mismatch"))?;
            state.momentum = m.momentum;
            state.epsilon = m.epsilon;
            state.updates = m.updates;
        }
    }
    Ok((net, header.metadata))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::ConvKind;
    use crate::nn::spec::LayerSpec;
    use crate::nn::tensor::Tensor3;

    #[test]
    fn roundtrip_is_bit_exact() {
        let spec = NetworkSpec::new(
            8,
            2,
            vec![
                LayerSpec::Conv {
                    filter: 3,
                    units: 4,
                    kind: ConvKind::Temporal,
                },
                LayerSpec::conv(3, 3),
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::Dropout { rate: 0.5 },
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 5 },
                LayerSpec::Softmax { classes: 3 },
            ],
        );
        let mut net = Network::new(&spec, 9).unwrap();
        let x = Tensor3::from_vec(2, 8, 2, (0..32).map(|v| v as f64 / 7.0).collect()).unwrap();
        net.loss_and_gradients(&x, &[0, 2], 1).unwrap();
        net.clear_caches();
        let meta = serde_json::json!({"note": "x", "pi": std::f64::consts::PI});
        let bytes = network_to_bytes(&net, &meta);
        let (mut back, meta_back) = network_from_bytes(&bytes).unwrap();
        assert_eq!(meta_back, meta);
        assert_eq!(back.snapshot(), net.snapshot());
        assert!(back.batchnorm_states().eq(net.batchnorm_states()));
        assert_eq!(network_to_bytes(&back, &meta), bytes);
        assert_eq!(back.infer(&x).unwrap().data(), net.infer(&x).unwrap().data());
    }

    #[test]
    fn rejects_garbage() {
        assert!(network_from_bytes(b"nope").is_err());
        let mut bytes = NETWORK_MAGIC.to_vec();
        bytes.extend_from_slice(&3u64.to_le_bytes());
        bytes.extend_from_slice(b"{}x");
        assert!(network_from_bytes(&bytes).is_err());
    }
}
