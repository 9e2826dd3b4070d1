use std::collections::BTreeSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::layers::{batch_cross_entropy, softmax};
use super::network::Network;
use super::spec::NetworkSpec;
use super::tensor::Tensor3;
use crate::error::{Error, Result};
use crate::seed;
use crate::series::{flatten, Dataset};

/// Optimization protocol. Dropout rates live in the layer specs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Epochs without validation improvement tolerated before stopping.
    /// `None` trains for `max_epochs` and keeps the last parameters.
    pub patience: Option<usize>,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            max_epochs: 20,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-6,
            patience: Some(0),
            val_fraction: 0.05,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
    /// Wall-clock seconds of the optimization pass, validation excluded.
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept, when validation stopping is on.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl TrainHistory {
    /// CSV with one row per epoch; missing validation values are empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,val_accuracy,seconds\n");
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch,
                e.train_loss,
                opt(e.val_loss),
                opt(e.val_accuracy),
                e.seconds
            ));
        }
        out
    }
}

/// Stacks a fully valid dataset into an `(N, T, D)` tensor plus labels.
pub fn dataset_tensor(dataset: &Dataset) -> Result<(Tensor3, Vec<usize>)> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput(
            "cannot build a tensor from an empty dataset".into(),
        ));
    }
    let (t, d) = (dataset.n_timesteps(), dataset.n_channels());
    let mut data = Vec::with_capacity(dataset.len() * t * d);
    for s in dataset.samples() {
        data.extend(flatten(&s.series)?);
    }
    Ok((Tensor3::from_vec(dataset.len(), t, d, data)?, dataset.labels()))
}

const INFER_CHUNK: usize = 256;

/// Inference logits for every sample, computed in fixed-size chunks.
fn logits(net: &Network, x: &Tensor3) -> Result<Vec<Vec<f64>>> {
    let n = x.batch();
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(INFER_CHUNK) {
        let idx: Vec<usize> = (start..(start + INFER_CHUNK).min(n)).collect();
        let z = net.infer(&x.gather(&idx))?;
        for b in 0..idx.len() {
            out.push(z.sample(b).to_vec());
        }
    }
    Ok(out)
}

/// Class probabilities `N x C`.
pub fn predict_proba_tensor(net: &Network, x: &Tensor3) -> Result<Vec<Vec<f64>>> {
    Ok(logits(net, x)?.iter().map(|z| softmax(z)).collect())
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn predict_tensor(net: &Network, x: &Tensor3) -> Result<Vec<usize>> {
    Ok(predict_proba_tensor(net, x)?.iter().map(|p| argmax(p)).collect())
}

pub fn predict_proba(net: &Network, dataset: &Dataset) -> Result<Vec<Vec<f64>>> {
    predict_proba_tensor(net, &dataset_tensor(dataset)?.0)
}

pub fn predict(net: &Network, dataset: &Dataset) -> Result<Vec<usize>> {
    predict_tensor(net, &dataset_tensor(dataset)?.0)
}

/// Mean cross-entropy and accuracy in inference mode.
pub fn evaluate_tensor(net: &Network, x: &Tensor3, labels: &[usize]) -> Result<(f64, f64)> {
    let z = logits(net, x)?;
    let mut loss = 0.0;
    let mut correct = 0;
    for (row, &y) in z.iter().zip(labels) {
        let t = Tensor3::from_vec(1, 1, row.len(), row.clone())?;
        loss += batch_cross_entropy(&t, &[y])?.0;
        correct += usize::from(argmax(row) == y);
    }
    let n = labels.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Mini-batch Adam on pre-stacked tensors. `val` enables early stopping when
/// `cfg.patience` is set; the best-validation parameters are restored.
pub fn train_tensors(
    spec: &NetworkSpec,
    x: &Tensor3,
    y: &[usize],
    val: Option<(&Tensor3, &[usize])>,
    cfg: &TrainConfig,
) -> Result<(Network, TrainHistory)> {
    if cfg.batch_size == 0 {
        return Err(Error::InvalidInput("batch size must be positive".into()));
    }
    if y.len() != x.batch() {
        return Err(Error::Shape(format!("{} labels for {} samples", y.len(), x.batch())));
    }
    let val = val.filter(|(vx, _)| vx.batch() > 0);
    if cfg.patience.is_some() && val.is_none() && cfg.max_epochs > 0 {
        return Err(Error::InvalidInput(
            "early stopping requested without a validation set".into(),
        ));
    }
    let mut net = Network::new(spec, cfg.seed)?;
    let mut adam = Adam::new(cfg.adam());
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, Network)> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..x.batch()).collect();
    let mut step = 0u64;

    for epoch in 0..cfg.max_epochs {
        let start = Instant::now();
        order.sort_unstable();
        order.shuffle(&mut seed::stream(cfg.seed, "shuffle", epoch as u64));
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let xb = x.gather(batch);
            let yb: Vec<usize> = batch.iter().map(|&i| y[i]).collect();
            let loss = net.loss_and_gradients(&xb, &yb, seed::derive(cfg.seed, "dropout", step))?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite training loss at epoch {epoch}")));
            }
            adam.update(&mut net);
            total += loss * batch.len() as f64;
            step += 1;
        }
        net.clear_caches();
        let seconds = start.elapsed().as_secs_f64();
        let (val_loss, val_accuracy) = match val {
            Some((vx, vy)) => {
                let (l, a) = evaluate_tensor(&net, vx, vy)?;
                (Some(l), Some(a))
            }
            None => (None, None),
        };
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: total / x.batch() as f64,
            val_loss,
            val_accuracy,
            seconds,
        });
        if let (Some(patience), Some(vl)) = (cfg.patience, val_loss) {
            if !vl.is_finite() {
                return Err(Error::Numeric(format!("non-finite validation loss at epoch {epoch}")));
            }
            if best.as_ref().is_none_or(|(b, _)| vl < *b) {
                best = Some((vl, net.clone()));
                history.best_epoch = Some(epoch);
                since_best = 0;
            } else {
                since_best += 1;
                if since_best > patience {
                    history.stopped_early = true;
                    break;
                }
            }
        }
    }
    if let Some((_, kept)) = best {
        net = kept;
    }
    Ok((net, history))
}

/// Trains on `train`, stopping early on `val`. The two must not share polygons.
pub fn train(spec: &NetworkSpec, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<(Network, TrainHistory)> {
    let train_polys: BTreeSet<&str> = train.polygons().into_keys().collect();
    if let Some(p) = val.polygons().into_keys().find(|p| train_polys.contains(p)) {
        return Err(Error::InvalidInput(format!(
            "polygon {p} appears in both training and validation sets"
        )));
    }
    let (x, y) = dataset_tensor(train)?;
    let val_tensors = if val.is_empty() {
        None
    } else {
        Some(dataset_tensor(val)?)
    };
    train_tensors(
        spec,
        &x,
        &y,
        val_tensors.as_ref().map(|(vx, vy)| (vx, vy.as_slice())),
        cfg,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::spec::LayerSpec;

    fn toy(n: usize) -> (Tensor3, Vec<usize>) {
        let mut data = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let c = i % 2;
            let s = if c == 0 { 1.0 } else { -1.0 };
            for t in 0..6 {
                data.push(s * (t as f64 / 5.0) + 0.01 * (i as f64 % 7.0));
            }
            y.push(c);
        }
        (Tensor3::from_vec(n, 6, 1, data).unwrap(), y)
    }

    fn spec() -> NetworkSpec {
        NetworkSpec::new(
            6,
            1,
            vec![
                LayerSpec::conv(3, 4),
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Softmax { classes: 2 },
            ],
        )
    }

    #[test]
    fn zero_epochs_returns_initial_network() {
        let (x, y) = toy(10);
        let cfg = TrainConfig {
            max_epochs: 0,
            patience: None,
            ..TrainConfig::default()
        };
        let (net, hist) = train_tensors(&spec(), &x, &y, None, &cfg).unwrap();
        assert!(hist.epochs.is_empty());
        let mut fresh = Network::new(&spec(), cfg.seed).unwrap();
        let mut net = net;
        assert_eq!(net.snapshot(), fresh.snapshot());
    }

    #[test]
    fn learns_separable_toy_and_is_deterministic() {
        let (x, y) = toy(64);
        let cfg = TrainConfig {
            max_epochs: 15,
            patience: None,
            lr: 1e-2,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let (net, a) = train_tensors(&spec(), &x, &y, None, &cfg).unwrap();
        let pred = predict_tensor(&net, &x).unwrap();
        assert_eq!(pred, y);
        let (_, b) = train_tensors(&spec(), &x, &y, None, &cfg).unwrap();
        let losses = |h: &TrainHistory| h.epochs.iter().map(|e| e.train_loss).collect::<Vec<_>>();
        assert_eq!(losses(&a), losses(&b));
    }

    #[test]
    fn patience_without_validation_is_an_error() {
        let (x, y) = toy(8);
        assert!(train_tensors(&spec(), &x, &y, None, &TrainConfig::default()).is_err());
    }

    #[test]
    fn early_stopping_keeps_best_epoch() {
        let (x, y) = toy(40);
        let (vx, vy) = toy(10);
        let cfg = TrainConfig {
            max_epochs: 20,
            lr: 0.05,
            ..TrainConfig::default()
        };
        let (net, hist) = train_tensors(&spec(), &x, &y, Some((&vx, &vy)), &cfg).unwrap();
        let best = hist.best_epoch.unwrap();
        let best_loss = hist.epochs[best].val_loss.unwrap();
        assert!(hist.epochs.iter().all(|e| e.val_loss.unwrap() >= best_loss));
        let (l, _) = evaluate_tensor(&net, &vx, &vy).unwrap();
        assert_eq!(l, best_loss);
        if hist.stopped_early {
            assert_eq!(hist.epochs.len(), best + 2);
        }
    }

    #[test]
    fn proba_rows_and_argmax() {
        let (x, y) = toy(20);
        let cfg = TrainConfig {
            max_epochs: 1,
            patience: None,
            ..TrainConfig::default()
        };
        let (net, _) = train_tensors(&spec(), &x, &y, None, &cfg).unwrap();
        let p = predict_proba_tensor(&net, &x).unwrap();
        let labels = predict_tensor(&net, &x).unwrap();
        for (row, &l) in p.iter().zip(&labels) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert_eq!(argmax(row), l);
        }
        let singles: Vec<usize> = (0..20)
            .map(|i| predict_tensor(&net, &x.gather(&[i])).unwrap()[0])
            .collect();
        assert_eq!(singles, labels);
        assert_eq!(argmax(&[0.2, 0.5, 0.5]), 1);
    }
}
