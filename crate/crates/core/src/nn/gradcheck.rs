use super::layers::batch_cross_entropy;
use super::network::{Mode, Network};
use super::spec::NetworkSpec;
use super::tensor::Tensor3;
use crate::error::{Error, Result};

/// Denominator floor of the relative error, so that gradients which are zero
/// up to rounding compare in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

/// `|a - b| / max(|a|, |b|, REL_ERROR_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter array, element)` where the maximum occurred.
    pub worst: (usize, usize),
    pub checked: usize,
}

fn loss(net: &mut Network, x: &Tensor3, labels: &[usize], dropout_seed: u64) -> Result<f64> {
    let logits = net.forward(x, Mode::Train { dropout_seed })?;
    Ok(batch_cross_entropy(&logits, labels)?.0)
}

fn nudge(net: &mut Network, array: usize, elem: usize, delta: f64) {
    let mut k = 0;
    net.for_each_param(|_, p, _| {
        if k == array {
            p[elem] += delta;
        }
        k += 1;
    });
}

/// Compares the analytic gradient of the mean batch loss with central
/// differences for every trainable scalar of `net`. Dropout masks are held
/// fixed across evaluations.
pub fn check_network(net: &mut Network, x: &Tensor3, labels: &[usize], step: f64) -> Result<GradCheckReport> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    const DROPOUT_SEED: u64 = 0x5eed;
    net.loss_and_gradients(x, labels, DROPOUT_SEED)?;
    let mut analytic: Vec<Vec<f64>> = Vec::new();
    net.for_each_param(|_, _, g| analytic.push(g.to_vec()));

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for (a, grads) in analytic.iter().enumerate() {
        for (e, &g) in grads.iter().enumerate() {
            nudge(net, a, e, step);
            let plus = loss(net, x, labels, DROPOUT_SEED)?;
            nudge(net, a, e, -2.0 * step);
            let minus = loss(net, x, labels, DROPOUT_SEED)?;
            nudge(net, a, e, step);
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(g, numeric);
            if !err.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient at array {a}, element {e}")));
            }
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (a, e);
            }
            report.checked += 1;
        }
    }
    net.clear_caches();
    Ok(report)
}

/// Builds a network from `spec` with `seed` and checks it on one batch.
pub fn gradient_check(
    spec: &NetworkSpec,
    x: &Tensor3,
    labels: &[usize],
    step: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut net = Network::new(spec, seed)?;
    check_network(&mut net, x, labels, step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::spec::LayerSpec;

    #[test]
    fn zero_step_rejected() {
        let spec = NetworkSpec::new(1, 2, vec![LayerSpec::Softmax { classes: 2 }]);
        let x = Tensor3::from_vec(1, 1, 2, vec![0.1, 0.2]).unwrap();
        assert!(gradient_check(&spec, &x, &[0], 0.0, 1).is_err());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-9) - 1e-4).abs() < 1e-15);
    }
}
