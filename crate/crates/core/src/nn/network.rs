use rand::Rng as _;

use super::layers::{
    batch_cross_entropy, batchnorm_backward, batchnorm_forward, batchnorm_infer, conv1d_backward, conv1d_forward,
    dense_backward, dense_forward, dropout_backward, dropout_forward, global_avg_pool, global_avg_pool_backward,
    pool_backward, pool_forward, relu_backward, relu_forward, BatchNormCache, BatchNormState, ConvGrads, ConvKind,
    ConvParams, DenseGrads, DenseParams, Phase, PoolKind,
};
use super::spec::{LayerSpec, NetworkSpec};
use super::tensor::Tensor3;
use crate::error::{Error, Result};
use crate::seed;

/// Forward-pass mode. Training passes carry the seed of their dropout masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train { dropout_seed: u64 },
    Infer,
}

/// What a parameter array is, which decides whether weight decay applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    /// Batch-norm gamma or beta.
    Norm,
}

#[derive(Debug, Clone)]
pub(crate) enum LayerState {
    Conv {
        params: ConvParams,
        grads: ConvGrads,
        input: Option<Tensor3>,
    },
    Dense {
        params: DenseParams,
        grads: DenseGrads,
        input: Option<Tensor3>,
    },
    BatchNorm {
        state: BatchNormState,
        grad_gamma: Vec<f64>,
        grad_beta: Vec<f64>,
        cache: Option<BatchNormCache>,
    },
    Relu {
        input: Option<Tensor3>,
    },
    Dropout {
        rate: f64,
        mask: Option<Vec<f64>>,
    },
    Pool {
        kind: PoolKind,
        window: usize,
        input_time: usize,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        input_time: usize,
    },
    Flatten {
        input_shape: (usize, usize),
    },
}

/// A network spec together with its parameters, batch-norm statistics and
/// the caches of the last training forward pass.
#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    pub(crate) layers: Vec<LayerState>,
}

fn glorot(rng: &mut seed::Rng, values: &mut [f64], fan_in: usize, fan_out: usize) {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for v in values {
        *v = rng.random_range(-limit..limit);
    }
}

impl Network {
    /// Allocates and initializes parameters: Glorot-uniform weights, zero
    /// biases, unit batch-norm scale.
    pub fn new(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.shapes()?;
        let mut prev = (spec.input_len, spec.input_channels);
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (i, (layer, &shape)) in spec.layers.iter().zip(&shapes).enumerate() {
            let mut rng = seed::stream(seed, "init", i as u64);
            let (t, d) = prev;
            layers.push(match *layer {
                LayerSpec::Conv { filter, units, kind } => {
                    let mut params = ConvParams::zeros(filter, d, units, kind);
                    let fan_in = match kind {
                        ConvKind::Full => filter * d,
                        ConvKind::Temporal => filter,
                    };
                    glorot(&mut rng, &mut params.weights, fan_in, filter * units);
                    let grads = ConvGrads {
                        weights: vec![0.0; params.weights.len()],
                        bias: vec![0.0; units],
                    };
                    LayerState::Conv {
                        params,
                        grads,
                        input: None,
                    }
                }
                LayerSpec::Dense { units } | LayerSpec::Softmax { classes: units } => {
                    let mut params = DenseParams::zeros(t * d, units);
                    glorot(&mut rng, &mut params.weights, t * d, units);
                    let grads = DenseGrads {
                        weights: vec![0.0; params.weights.len()],
                        bias: vec![0.0; units],
                    };
                    LayerState::Dense {
                        params,
                        grads,
                        input: None,
                    }
                }
                LayerSpec::BatchNorm => LayerState::BatchNorm {
                    state: BatchNormState::new(d),
                    grad_gamma: vec![0.0; d],
                    grad_beta: vec![0.0; d],
                    cache: None,
                },
                LayerSpec::Relu => LayerState::Relu { input: None },
                LayerSpec::Dropout { rate } => LayerState::Dropout { rate, mask: None },
                LayerSpec::Pool { kind, window } => LayerState::Pool {
                    kind,
                    window,
                    input_time: t,
                    argmax: Vec::new(),
                },
                LayerSpec::GlobalAvgPool => LayerState::GlobalAvgPool { input_time: t },
                LayerSpec::Flatten => LayerState::Flatten { input_shape: (t, d) },
            });
            prev = shape;
        }
        Ok(Self {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn classes(&self) -> usize {
        self.spec.classes().expect("validated spec ends in softmax")
    }

    /// Logits `(n, 1, C)` for a batch `(n, T, D)`.
    pub fn forward(&mut self, x: &Tensor3, mode: Mode) -> Result<Tensor3> {
        let dropout_seed = match mode {
            Mode::Train { dropout_seed } => dropout_seed,
            Mode::Infer => return self.infer(x),
        };
        self.check_input(x)?;
        let phase = Phase::Train;
        let mut act = x.clone();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            act = match layer {
                LayerState::Conv { params, input, .. } => {
                    let out = conv1d_forward(&act, params)?;
                    *input = Some(act);
                    out
                }
                LayerState::Dense { params, input, .. } => {
                    let out = dense_forward(&act, params)?;
                    *input = Some(act);
                    out
                }
                LayerState::BatchNorm { state, cache, .. } => {
                    let (out, c) = batchnorm_forward(&act, state, phase)?;
                    *cache = c;
                    out
                }
                LayerState::Relu { input } => {
                    let out = relu_forward(&act);
                    *input = Some(act);
                    out
                }
                LayerState::Dropout { rate, mask } => {
                    let mut rng = seed::stream(dropout_seed, "dropout", i as u64);
                    let (out, m) = dropout_forward(&act, *rate, phase, &mut rng)?;
                    *mask = m;
                    out
                }
                LayerState::Pool {
                    kind, window, argmax, ..
                } => {
                    let (out, a) = pool_forward(&act, *kind, *window)?;
                    *argmax = a;
                    out
                }
                LayerState::GlobalAvgPool { .. } => global_avg_pool(&act),
                LayerState::Flatten { .. } => {
                    let n = act.batch();
                    let f = act.time() * act.channels();
                    act.reshaped(n, 1, f)?
                }
            };
            act.debug_assert_finite("activation");
        }
        Ok(act)
    }

    /// Inference pass: dropout is the identity and batch norm uses running
    /// statistics. Leaves the network untouched.
    pub fn infer(&self, x: &Tensor3) -> Result<Tensor3> {
        self.check_input(x)?;
        let mut act = x.clone();
        for layer in &self.layers {
            act = match layer {
                LayerState::Conv { params, .. } => conv1d_forward(&act, params)?,
                LayerState::Dense { params, .. } => dense_forward(&act, params)?,
                LayerState::BatchNorm { state, .. } => batchnorm_infer(&act, state)?,
                LayerState::Relu { .. } => relu_forward(&act),
                LayerState::Dropout { .. } => act,
                LayerState::Pool { kind, window, .. } => pool_forward(&act, *kind, *window)?.0,
                LayerState::GlobalAvgPool { .. } => global_avg_pool(&act),
                LayerState::Flatten { .. } => {
                    let n = act.batch();
                    let f = act.time() * act.channels();
                    act.reshaped(n, 1, f)?
                }
            };
        }
        Ok(act)
    }

    fn check_input(&self, x: &Tensor3) -> Result<()> {
        let (_, t, d) = x.dims();
        if (t, d) != (self.spec.input_len, self.spec.input_channels) {
            return Err(Error::Shape(format!(
                "network expects {}x{} inputs, got {t}x{d}",
                self.spec.input_len, self.spec.input_channels
            )));
        }
        Ok(())
    }

    /// Backpropagates `grad_logits` through the cached training pass, storing
    /// parameter gradients. Returns the gradient with respect to the input.
    pub fn backward(&mut self, grad_logits: &Tensor3) -> Result<Tensor3> {
        let missing = || Error::InvalidInput("backward called without a training forward pass".into());
        let mut grad = grad_logits.clone();
        for layer in self.layers.iter_mut().rev() {
            grad = match layer {
                LayerState::Conv { params, grads, input } => {
                    let input = input.as_ref().ok_or_else(missing)?;
                    let (gi, g) = conv1d_backward(input, params, &grad)?;
                    *grads = g;
                    gi
                }
                LayerState::Dense { params, grads, input } => {
                    let input = input.as_ref().ok_or_else(missing)?;
                    let (gi, g) = dense_backward(input, params, &grad)?;
                    *grads = g;
                    gi
                }
                LayerState::BatchNorm {
                    state,
                    grad_gamma,
                    grad_beta,
                    cache,
                } => {
                    let cache = cache.as_ref().ok_or_else(missing)?;
                    let (gi, gg, gb) = batchnorm_backward(&grad, state, cache);
                    *grad_gamma = gg;
                    *grad_beta = gb;
                    gi
                }
                LayerState::Relu { input } => relu_backward(input.as_ref().ok_or_else(missing)?, &grad),
                LayerState::Dropout { mask, .. } => dropout_backward(&grad, mask.as_deref()),
                LayerState::Pool {
                    kind,
                    window,
                    input_time,
                    argmax,
                } => pool_backward(&grad, *kind, *window, *input_time, argmax),
                LayerState::GlobalAvgPool { input_time } => global_avg_pool_backward(&grad, *input_time),
                LayerState::Flatten { input_shape } => {
                    let n = grad.batch();
                    grad.reshaped(n, input_shape.0, input_shape.1)?
                }
            };
        }
        Ok(grad)
    }

    /// Training forward + backward; returns the mean cross-entropy.
    pub fn loss_and_gradients(&mut self, x: &Tensor3, labels: &[usize], dropout_seed: u64) -> Result<f64> {
        let logits = self.forward(x, Mode::Train { dropout_seed })?;
        let (loss, grad) = batch_cross_entropy(&logits, labels)?;
        self.backward(&grad)?;
        Ok(loss)
    }

    /// Visits every trainable array with its latest gradient, in layer order.
    pub fn for_each_param(&mut self, mut f: impl FnMut(ParamRole, &mut [f64], &[f64])) {
        for layer in &mut self.layers {
            match layer {
                LayerState::Conv { params, grads, .. } => {
                    f(ParamRole::Weight, &mut params.weights, &grads.weights);
                    f(ParamRole::Bias, &mut params.bias, &grads.bias);
                }
                LayerState::Dense { params, grads, .. } => {
                    f(ParamRole::Weight, &mut params.weights, &grads.weights);
                    f(ParamRole::Bias, &mut params.bias, &grads.bias);
                }
                LayerState::BatchNorm {
                    state,
                    grad_gamma,
                    grad_beta,
                    ..
                } => {
                    f(ParamRole::Norm, &mut state.gamma, grad_gamma);
                    f(ParamRole::Norm, &mut state.beta, grad_beta);
                }
                _ => {}
            }
        }
    }

    /// Number of trainable scalars actually allocated.
    pub fn allocated_params(&mut self) -> usize {
        let mut n = 0;
        self.for_each_param(|_, p, _| n += p.len());
        n
    }

    /// Copies of every trainable array, in [`Network::for_each_param`] order.
    pub fn snapshot(&mut self) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        self.for_each_param(|_, p, _| out.push(p.to_vec()));
        out
    }

    pub fn restore(&mut self, snapshot: &[Vec<f64>]) {
        let mut it = snapshot.iter();
        self.for_each_param(|_, p, _| p.copy_from_slice(it.next().expect("snapshot layout")));
    }

    pub fn batchnorm_states(&self) -> impl Iterator<Item = &BatchNormState> {
        self.layers.iter().filter_map(|l| match l {
            LayerState::BatchNorm { state, .. } => Some(state),
            _ => None,
        })
    }

    /// Drops the activations cached by the last training pass.
    pub fn clear_caches(&mut self) {
        for layer in &mut self.layers {
            match layer {
                LayerState::Conv { input, .. } | LayerState::Dense { input, .. } | LayerState::Relu { input } => {
                    *input = None
                }
                LayerState::BatchNorm { cache, .. } => *cache = None,
                LayerState::Dropout { mask, .. } => *mask = None,
                LayerState::Pool { argmax, .. } => argmax.clear(),
                _ => {}
            }
        }
    }
}
