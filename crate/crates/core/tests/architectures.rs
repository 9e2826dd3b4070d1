use tempcnn_core::arch::*;
use tempcnn_core::nn::{LayerSpec, Network, NetworkSpec};

fn allocated(spec: &NetworkSpec) -> usize {
    Network::new(spec, 0).unwrap().allocated_params()
}

/// Conv blocks, dense block and softmax of the reference layout, counted by hand.
fn tempcnn_closed_form(t: usize, d: usize, c: usize, cfg: &TempCnnConfig) -> usize {
    let bn = if cfg.batchnorm { 2 } else { 0 };
    let mut total = 0;
    let mut channels = d;
    for _ in 0..cfg.depth {
        total += cfg.filter * channels * cfg.width + cfg.width + bn * cfg.width;
        channels = cfg.width;
    }
    let flat = t * channels;
    total += flat * cfg.dense + cfg.dense + bn * cfg.dense;
    total + cfg.dense * c + c
}

#[test]
fn tempcnn_matches_closed_form_and_allocation() {
    let cfg = TempCnnConfig::default();
    let spec = build_tempcnn(149, 3, 13, &cfg);
    let n = spec.param_count().unwrap();
    assert_eq!(n, tempcnn_closed_form(149, 3, 13, &cfg));
    assert!((100_000..10_000_000).contains(&n), "{n}");
    assert_eq!(allocated(&spec), n);
    for cfg in [
        TempCnnConfig { depth: 0, ..cfg },
        TempCnnConfig {
            width: 7,
            depth: 5,
            filter: 3,
            dense: 11,
            dropout: 0.0,
            batchnorm: false,
        },
    ] {
        let spec = build_tempcnn(20, 2, 4, &cfg);
        assert_eq!(spec.param_count().unwrap(), tempcnn_closed_form(20, 2, 4, &cfg));
        assert_eq!(allocated(&spec), spec.param_count().unwrap());
    }
    let dense_only = build_tempcnn(20, 2, 4, &TempCnnConfig { depth: 0, ..cfg });
    assert!(!dense_only.has_layer(LayerSpec::is_conv));
}

#[test]
fn every_builder_allocates_what_it_counts() {
    let (t, d, c) = (24, 3, 5);
    let cfg = TempCnnConfig {
        width: 8,
        dense: 16,
        ..TempCnnConfig::default()
    };
    let mut specs = vec![build_tempcnn(t, d, c, &cfg), build_fc(t, d, c, 32, 3, &cfg)];
    for kind in GuidanceKind::ALL {
        specs.push(build_guidance(kind, t, d, c, &cfg, 32));
    }
    for variant in PoolingVariant::ALL {
        for reach in [2, 4, 8, 16, 32] {
            specs.push(build_pooling_variant(variant, reach, t, d, c, &cfg));
        }
    }
    specs.extend(
        make_width_sweep_with(t, d, c, &cfg, &[2, 4, 8, 16])
            .members
            .into_iter()
            .map(|m| m.1),
    );
    specs.extend(
        make_depth_sweep_with(t, d, c, &cfg, &[16, 8, 8, 4, 4, 2], 20_000)
            .unwrap()
            .members
            .into_iter()
            .map(|m| m.1),
    );
    for spec in &specs {
        spec.validate().unwrap();
        assert_eq!(allocated(spec), spec.param_count().unwrap(), "{spec:?}");
    }
}

#[test]
fn fc_baseline_structure() {
    let spec = build_fc_baseline(46, 3, 13);
    assert!(!spec.has_layer(LayerSpec::is_conv));
    let dense: Vec<usize> = spec
        .layers
        .iter()
        .filter_map(|l| match l {
            LayerSpec::Dense { units } => Some(*units),
            _ => None,
        })
        .collect();
    assert_eq!(dense, vec![FC_UNITS; 3]);
    let counts = spec.layer_param_counts().unwrap();
    let first_dense = spec
        .layers
        .iter()
        .position(|l| matches!(l, LayerSpec::Dense { .. }))
        .unwrap();
    assert_eq!(counts[first_dense], 138 * 1024 + 1024);
    let closed = (138 * 1024 + 1024 + 2 * 1024) + 2 * (1024 * 1024 + 1024 + 2 * 1024) + 1024 * 13 + 13;
    assert_eq!(spec.param_count().unwrap(), closed);
}

#[test]
fn guidance_ordering_and_degenerate_spectral() {
    let cfg = TempCnnConfig::default();
    let temporal = build_guidance(GuidanceKind::Temporal, 149, 3, 13, &cfg, FC_UNITS);
    let st = build_guidance(GuidanceKind::SpectroTemporal, 149, 3, 13, &cfg, FC_UNITS);
    assert!(temporal.param_count().unwrap() < st.param_count().unwrap());
    let spectral = build_guidance(GuidanceKind::Spectral, 46, 1, 13, &cfg, FC_UNITS);
    for l in &spectral.layers {
        if let LayerSpec::Conv { filter, .. } = l {
            assert_eq!(*filter, 1);
        }
    }
    // With one input channel the first pointwise convolution sees a single value.
    let first = spectral.layer_param_counts().unwrap()[0];
    assert_eq!(first, cfg.width + cfg.width);
}

#[test]
fn pooling_schedules_and_gap_size() {
    let filters = |spec: &NetworkSpec| -> Vec<usize> {
        spec.layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Conv { filter, .. } => Some(*filter),
                _ => None,
            })
            .collect()
    };
    let cfg = TempCnnConfig::default();
    assert_eq!(
        filters(&build_pooling_variant(PoolingVariant::Mp, 8, 149, 3, 13, &cfg)),
        vec![9, 5, 3]
    );
    assert_eq!(
        filters(&build_pooling_variant(PoolingVariant::Ap, 2, 149, 3, 13, &cfg)),
        vec![3, 3, 3]
    );
    let reach: Vec<usize> = [2, 4, 8, 16, 32]
        .iter()
        .map(|&r| filter_for_reach(r, GRID_STEP_DAYS))
        .collect();
    assert_eq!(reach, vec![3, 5, 9, 17, 33]);
    let gap = build_pooling_variant(PoolingVariant::Gap, 4, 149, 3, 13, &cfg);
    let plain = build_tempcnn(149, 3, 13, &TempCnnConfig { filter: 5, ..cfg });
    assert!(gap.param_count().unwrap() * 10 < plain.param_count().unwrap());
    let local = build_pooling_variant(PoolingVariant::Mp, 4, 149, 3, 13, &cfg);
    assert!(local.param_count().unwrap() < plain.param_count().unwrap());
}

#[test]
fn width_sweep_brackets_reported_range() {
    let grid = make_width_sweep(149, 3, 13);
    assert_eq!(grid.len(), 7);
    let counts: Vec<usize> = grid.members.iter().map(|m| m.1.param_count().unwrap()).collect();
    assert!(counts.windows(2).all(|w| w[0] < w[1]));
    let (lo, hi) = (counts[0] as f64, counts[6] as f64);
    assert!((160_000.0..=640_000.0).contains(&lo), "{lo}");
    assert!((25e6..=100e6).contains(&hi), "{hi}");
}

#[test]
fn depth_sweep_spread() {
    let grid = make_depth_sweep(149, 3, 13).unwrap();
    assert_eq!(grid.len(), 6);
    let mut counts: Vec<f64> = grid.members.iter().map(|m| m.1.param_count().unwrap() as f64).collect();
    let names: std::collections::BTreeSet<&str> = grid.members.iter().map(|m| m.0.as_str()).collect();
    assert_eq!(names.len(), 6);
    counts.sort_by(f64::total_cmp);
    let median = 0.5 * (counts[2] + counts[3]);
    for c in &counts {
        assert!((c / median - 1.0).abs() <= 0.2, "{c} vs {median}");
    }
    for (i, (_, spec)) in grid.members.iter().enumerate() {
        assert_eq!(spec.layers.iter().filter(|l| l.is_conv()).count(), i + 1);
    }
}

#[test]
fn names_select_builders() {
    let (t, d, c) = (46, 3, 13);
    let a: Architecture = "tempcnn".parse().unwrap();
    assert_eq!(
        a.network_spec(t, d, c).unwrap(),
        build_tempcnn(t, d, c, &TempCnnConfig::default())
    );
    let a: Architecture = "fc".parse().unwrap();
    assert_eq!(a.network_spec(t, d, c).unwrap(), build_fc_baseline(t, d, c));
    let a: Architecture = "pool:ap+gap:reach=8".parse().unwrap();
    assert_eq!(
        a.network_spec(t, d, c).unwrap(),
        build_pooling_variant(PoolingVariant::ApGap, 8, t, d, c, &TempCnnConfig::default())
    );
    assert!("rf".parse::<Architecture>().unwrap().network_spec(t, d, c).is_err());
}
