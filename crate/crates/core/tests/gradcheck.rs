use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempcnn_core::arch::*;
use tempcnn_core::nn::gradcheck::gradient_check;
use tempcnn_core::nn::{NetworkSpec, Tensor3};

const T: usize = 16;
const D: usize = 2;
const C: usize = 3;

fn tiny() -> TempCnnConfig {
    TempCnnConfig {
        width: 4,
        dense: 4,
        ..TempCnnConfig::default()
    }
}

fn batch(seed: u64) -> (Tensor3, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 6;
    let data = (0..n * T * D).map(|_| rng.random_range(-1.0..1.0)).collect();
    (
        Tensor3::from_vec(n, T, D, data).unwrap(),
        (0..n).map(|i| i % C).collect(),
    )
}

fn max_error(spec: &NetworkSpec, seed: u64) -> f64 {
    let (x, y) = batch(seed);
    let report = gradient_check(spec, &x, &y, 1e-5, seed).unwrap();
    assert_eq!(report.checked, spec.param_count().unwrap());
    report.max_rel_error
}

#[test]
fn tempcnn_full_network() {
    let spec = build_tempcnn(T, D, C, &tiny());
    for seed in 0..3 {
        let err = max_error(&spec, seed);
        assert!(err < 1e-5, "seed {seed}: {err:e}");
    }
}

#[test]
fn guidance_variants() {
    for kind in [GuidanceKind::None, GuidanceKind::Temporal, GuidanceKind::Spectral] {
        let spec = build_guidance(kind, T, D, C, &tiny(), 5);
        let err = max_error(&spec, 4);
        assert!(err < 1e-5, "{kind:?}: {err:e}");
    }
}

#[test]
fn pooling_variants() {
    for variant in PoolingVariant::ALL {
        let spec = build_pooling_variant(variant, 4, T, D, C, &tiny());
        let err = max_error(&spec, 5);
        assert!(err < 1e-5, "{variant:?}: {err:e}");
    }
}

#[test]
fn without_regularization_layers() {
    let cfg = TempCnnConfig {
        dropout: 0.0,
        batchnorm: false,
        ..tiny()
    };
    let err = max_error(&build_tempcnn(T, D, C, &cfg), 6);
    assert!(err < 1e-5, "{err:e}");
}
