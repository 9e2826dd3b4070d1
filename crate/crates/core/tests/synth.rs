use std::collections::BTreeMap;
use std::sync::Arc;

use tempcnn_core::preprocess::linear_gapfill;
use tempcnn_core::series::{dataset_read, dataset_write, legend_path_for, Dataset};
use tempcnn_core::synth::*;

fn small_scene() -> SceneSpec {
    let mut spec = default_scene();
    spec.classes.truncate(4);
    for (i, c) in spec.classes.iter_mut().enumerate() {
        c.polygons = i + 2;
    }
    spec
}

#[test]
fn class_histogram_matches_spec() {
    let spec = small_scene();
    let ds = generate_scene(&spec, 3).unwrap();
    let polygons = ds.polygons();
    let mut per_class: BTreeMap<usize, usize> = BTreeMap::new();
    for info in polygons.values() {
        *per_class.entry(info.label).or_default() += 1;
        assert!((spec.pixels_per_polygon[0]..=spec.pixels_per_polygon[1]).contains(&info.pixels));
    }
    for (label, class) in spec.classes.iter().enumerate() {
        assert_eq!(per_class[&label], class.polygons);
    }
    let counted: usize = polygons.values().map(|p| p.pixels).sum();
    assert_eq!(counted, ds.len());
    assert_eq!(ds.class_counts().iter().sum::<usize>(), ds.len());
}

#[test]
fn default_scene_shape() {
    let spec = default_scene();
    assert_eq!(spec.classes.len(), 13);
    for (class, (name, n)) in spec.classes.iter().zip(REFERENCE_POLYGONS) {
        assert_eq!(class.name, name);
        assert_eq!(class.polygons, ((n as f64 / 20.0).round() as usize).max(2));
    }
    assert_eq!(spec.noise_sd, 0.02);
    let ds = generate_scene(&spec, 1).unwrap();
    assert_eq!(ds.n_classes(), 13);
    assert_eq!(ds.n_timesteps(), 46);
    assert_eq!(ds.feature_names(), ["G", "R", "NIR"]);
}

#[test]
fn same_seed_same_dataset() {
    let spec = small_scene();
    assert_eq!(generate_scene(&spec, 5).unwrap(), generate_scene(&spec, 5).unwrap());
    assert_ne!(generate_scene(&spec, 5).unwrap(), generate_scene(&spec, 6).unwrap());
    assert_eq!(
        make_shift_benchmark(30.0, 2).unwrap(),
        make_shift_benchmark(30.0, 2).unwrap()
    );
}

#[test]
fn noiseless_polygons_are_uniform() {
    let mut spec = small_scene();
    spec.noise_sd = 0.0;
    spec.cloud_probability = 0.0;
    spec.pixel_timing_jitter_days = 0.0;
    spec.pixel_gain_jitter = 0.0;
    let ds = generate_scene(&spec, 8).unwrap();
    let mut first: BTreeMap<&str, &[f64]> = BTreeMap::new();
    for s in ds.samples() {
        assert!(s.series.is_fully_valid());
        let reference = first.entry(s.polygon_id.as_str()).or_insert(s.series.values());
        assert_eq!(*reference, s.series.values());
    }
}

#[test]
fn zero_pixels_is_an_error() {
    let mut spec = small_scene();
    spec.pixels_per_polygon = [0, 0];
    assert!(generate_scene(&spec, 0).is_err());
    let mut spec = small_scene();
    for c in &mut spec.classes {
        c.polygons = 0;
    }
    assert!(generate_scene(&spec, 0).is_err());
}

#[test]
fn csv_roundtrip_of_generated_data() {
    let ds = generate_scene(&small_scene(), 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scene.csv");
    dataset_write(&ds, &path).unwrap();
    let back = dataset_read(&path, &legend_path_for(&path)).unwrap();
    assert_eq!(back, ds);
}

#[test]
fn cloud_free_gapfill_is_identity() {
    let mut spec = small_scene();
    spec.cloud_probability = 0.0;
    let ds = generate_scene(&spec, 9).unwrap();
    let cal = Arc::clone(ds.calendar());
    for s in ds.samples() {
        assert_eq!(linear_gapfill(&s.series, &cal).unwrap(), s.series);
    }
}

#[test]
fn clouds_hit_whole_polygons() {
    let ds = generate_scene(&small_scene(), 10).unwrap();
    let mut masks: BTreeMap<&str, &[bool]> = BTreeMap::new();
    let mut any_cloud = false;
    for s in ds.samples() {
        any_cloud |= !s.series.is_fully_valid();
        assert!(s.series.mask().iter().any(|&v| v));
        let m = masks.entry(s.polygon_id.as_str()).or_insert(s.series.mask());
        assert_eq!(*m, s.series.mask());
    }
    assert!(any_cloud);
}

#[test]
fn grid_scene_is_row_major_blocks() {
    let ds = generate_grid_scene(&default_scene(), 10, 14, 4, 3).unwrap();
    assert_eq!(ds.len(), 140);
    assert_eq!(ds.samples()[0].polygon_id, ds.samples()[3].polygon_id);
    assert_ne!(ds.samples()[0].polygon_id, ds.samples()[4].polygon_id);
    assert_eq!(ds.samples()[0].polygon_id, ds.samples()[3 * 14].polygon_id);
    assert_ne!(ds.samples()[0].polygon_id, ds.samples()[4 * 14].polygon_id);
    assert_eq!(ds.polygons().len(), 3 * 4);
}

fn class_curve(class: &ClassSpec, day: f64) -> [f64; 3] {
    let a = double_logistic(day, &class.profile);
    [0, 1, 2].map(|b| class.background[b] + (class.canopy[b] - class.background[b]) * a)
}

/// Accuracy on the time-coded pair of assigning each pixel to the nearer
/// noiseless class curve over its valid dates.
fn nearest_profile_accuracy(ds: &Dataset, scene: &SceneSpec) -> f64 {
    let days = ds.calendar().days().to_vec();
    let (mut hit, mut n) = (0, 0);
    for s in ds.samples().iter().filter(|s| SHIFT_PAIR.contains(&s.label)) {
        let dist = |c: usize| -> f64 {
            let mut total = 0.0;
            for (t, &day) in days.iter().enumerate() {
                let curve = class_curve(&scene.classes[c], f64::from(day));
                for (b, v) in curve.iter().enumerate() {
                    if s.series.is_valid(t, b) {
                        total += (s.series.value(t, b) - v).powi(2);
                    }
                }
            }
            total
        };
        let guess = if dist(SHIFT_PAIR[0]) <= dist(SHIFT_PAIR[1]) {
            SHIFT_PAIR[0]
        } else {
            SHIFT_PAIR[1]
        };
        hit += usize::from(guess == s.label);
        n += 1;
    }
    hit as f64 / n as f64
}

#[test]
fn shift_benchmark_pair_separability() {
    let scene30 = ShiftBenchmarkSpec::new(30.0).scene();
    let ds30 = make_shift_benchmark(30.0, 1).unwrap();
    assert!((4000..6000).contains(&ds30.len()), "{}", ds30.len());
    assert_eq!(ds30.n_classes(), 4);
    assert!(nearest_profile_accuracy(&ds30, &scene30) > 0.85);

    let scene0 = ShiftBenchmarkSpec::new(0.0).scene();
    assert_eq!(scene0.classes[0].profile, scene0.classes[1].profile);
    let ds0 = make_shift_benchmark(0.0, 1).unwrap();
    let acc0 = nearest_profile_accuracy(&ds0, &scene0);
    assert!((0.4..=0.6).contains(&acc0), "{acc0}");
}

#[test]
fn calendar_constant() {
    let cal = default_calendar();
    assert_eq!(cal.len(), 46);
    assert!(cal.days().windows(2).all(|w| w[0] < w[1]));
    assert_eq!(cal.resampled(2).unwrap().len(), 149);
}

#[test]
fn scene_config_text_roundtrip() {
    let spec = default_scene();
    assert_eq!(SceneSpec::from_toml(&spec.to_toml()).unwrap(), spec);
    let mut bad = spec.clone();
    bad.cloud_probability = 1.5;
    assert!(SceneSpec::from_toml(&bad.to_toml()).is_err());
}
