//! Gap-filling onto a temporal grid, spectral index computation and
//! percentile min-max normalization.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::{AcquisitionCalendar, Dataset, MultivariateSeries};

/// Denominator magnitude below which a normalized difference is undefined.
pub const INDEX_EPSILON: f64 = 1e-12;

/// Range below which a feature is treated as constant by normalization.
pub const RANGE_EPSILON: f64 = 1e-12;

static DEGENERATE_INDICES: AtomicU64 = AtomicU64::new(0);

/// Number of normalized-difference evaluations that hit a zero denominator.
pub fn degenerate_index_count() -> u64 {
    DEGENERATE_INDICES.load(Ordering::Relaxed)
}

fn normalized_difference(a: f64, b: f64) -> f64 {
    let den = a + b;
    if den.abs() < INDEX_EPSILON {
        DEGENERATE_INDICES.fetch_add(1, Ordering::Relaxed);
        return 0.0;
    }
    (a - b) / den
}

/// Normalized difference vegetation index. Returns 0 when `nir + red` vanishes.
pub fn ndvi(nir: f64, red: f64) -> f64 {
    normalized_difference(nir, red)
}

/// Normalized difference water index. Returns 0 when `green + nir` vanishes.
pub fn ndwi(green: f64, nir: f64) -> f64 {
    normalized_difference(green, nir)
}

/// Brilliance index: Euclidean norm of the band vector.
pub fn brilliance(bands: &[f64]) -> f64 {
    bands.iter().map(|b| b * b).sum::<f64>().sqrt()
}

/// Linear interpolation of each channel onto `target`.
///
/// Interior points are interpolated between the nearest valid observations in
/// time; points outside the observed range take the nearest valid value.
pub fn linear_gapfill(series: &MultivariateSeries, target: &Arc<AcquisitionCalendar>) -> Result<MultivariateSeries> {
    let src_days = series.calendar().days();
    let channels = series.channels();
    let mut out = vec![0.0; target.len() * channels];
    let mut days = Vec::with_capacity(src_days.len());
    let mut vals = Vec::with_capacity(src_days.len());
    for d in 0..channels {
        days.clear();
        vals.clear();
        for (t, &day) in src_days.iter().enumerate() {
            if series.is_valid(t, d) {
                days.push(day);
                vals.push(series.value(t, d));
            }
        }
        if days.is_empty() {
            return Err(Error::NoValidObservation { channel: d });
        }
        for (t, &day) in target.days().iter().enumerate() {
            out[t * channels + d] = interpolate(&days, &vals, day);
        }
    }
    MultivariateSeries::fully_valid(Arc::clone(target), channels, out)
}

fn interpolate(days: &[i32], vals: &[f64], day: i32) -> f64 {
    match days.binary_search(&day) {
        Ok(i) => vals[i],
        Err(0) => vals[0],
        Err(i) if i == days.len() => vals[i - 1],
        Err(i) => {
            let (d0, d1) = (f64::from(days[i - 1]), f64::from(days[i]));
            let w = (f64::from(day) - d0) / (d1 - d0);
            vals[i - 1] + w * (vals[i] - vals[i - 1])
        }
    }
}

/// Which channels are fed to the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureStrategy {
    /// NDVI only (1 channel).
    Ndvi,
    /// The spectral bands G, R, NIR (3 channels).
    Sb,
    /// Bands plus NDVI, NDWI and brilliance (6 channels).
    SbSf,
}

impl FeatureStrategy {
    pub const ALL: [FeatureStrategy; 3] = [Self::Ndvi, Self::Sb, Self::SbSf];

    pub fn channel_names(self) -> Vec<String> {
        let names: &[&str] = match self {
            Self::Ndvi => &["NDVI"],
            Self::Sb => &["G", "R", "NIR"],
            Self::SbSf => &["G", "R", "NIR", "NDVI", "NDWI", "IB"],
        };
        names.iter().map(|s| s.to_string()).collect()
    }

    pub fn channels(self) -> usize {
        match self {
            Self::Ndvi => 1,
            Self::Sb => 3,
            Self::SbSf => 6,
        }
    }
}

impl fmt::Display for FeatureStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ndvi => "ndvi",
            Self::Sb => "sb",
            Self::SbSf => "sb-sf",
        })
    }
}

impl FromStr for FeatureStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ndvi" => Ok(Self::Ndvi),
            "sb" => Ok(Self::Sb),
            "sb-sf" | "sbsf" | "sb+ndvi+ndwi+ib" => Ok(Self::SbSf),
            other => Err(Error::InvalidInput(format!("unknown feature strategy {other:?}"))),
        }
    }
}

/// Raw band order expected by [`assemble_features`].
pub const RAW_BANDS: [&str; 3] = ["G", "R", "NIR"];

/// Builds the classifier channels from a gap-filled G, R, NIR series.
pub fn assemble_features(series: &MultivariateSeries, strategy: FeatureStrategy) -> Result<MultivariateSeries> {
    if series.channels() != 3 {
        return Err(Error::Shape(format!(
            "feature assembly expects 3 bands (G, R, NIR), got {}",
            series.channels()
        )));
    }
    if !series.is_fully_valid() {
        return Err(Error::InvalidInput(
            "spectral features are computed after gap-filling".into(),
        ));
    }
    let out_ch = strategy.channels();
    let mut out = Vec::with_capacity(series.len() * out_ch);
    for t in 0..series.len() {
        let (g, r, nir) = (series.value(t, 0), series.value(t, 1), series.value(t, 2));
        match strategy {
            FeatureStrategy::Ndvi => out.push(ndvi(nir, r)),
            FeatureStrategy::Sb => out.extend([g, r, nir]),
            FeatureStrategy::SbSf => out.extend([g, r, nir, ndvi(nir, r), ndwi(g, nir), brilliance(&[g, r, nir])]),
        }
    }
    MultivariateSeries::fully_valid(Arc::clone(series.calendar()), out_ch, out)
}

/// Temporal sampling applied before feature extraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sampling {
    /// Gap-fill in place on the acquisition dates.
    Original,
    /// Interpolate onto a regular 2-day grid spanning the acquisitions.
    TwoDay,
}

impl Sampling {
    pub fn target(self, source: &Arc<AcquisitionCalendar>) -> Result<Arc<AcquisitionCalendar>> {
        match self {
            Sampling::Original => Ok(Arc::clone(source)),
            Sampling::TwoDay => Ok(Arc::new(source.resampled(2)?)),
        }
    }
}

impl fmt::Display for Sampling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sampling::Original => "original",
            Sampling::TwoDay => "2day",
        })
    }
}

impl FromStr for Sampling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "original" => Ok(Sampling::Original),
            "2day" | "2-day" | "two-day" => Ok(Sampling::TwoDay),
            other => Err(Error::InvalidInput(format!("unknown sampling {other:?}"))),
        }
    }
}

/// Gap-fills every sample onto the chosen grid and assembles features.
pub fn prepare_dataset(raw: &Dataset, sampling: Sampling, strategy: FeatureStrategy) -> Result<Dataset> {
    if raw.feature_names() != RAW_BANDS {
        return Err(Error::Shape(format!(
            "expected raw bands {:?}, dataset has {:?}",
            RAW_BANDS,
            raw.feature_names()
        )));
    }
    let target = sampling.target(raw.calendar())?;
    raw.map_series(strategy.channel_names(), Arc::clone(&target), |s| {
        assemble_features(&linear_gapfill(s, &target)?, strategy)
    })
}

/// Percentile-based min-max bounds for each channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationParams {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

pub const LOW_PERCENTILE: f64 = 2.0;
pub const HIGH_PERCENTILE: f64 = 98.0;

/// Percentile `q` (0..=100) of sorted data, linear interpolation between
/// order statistics at position `q/100 * (n - 1)`.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty data");
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Fits per-channel 2nd/98th percentiles pooled over all valid time stamps of
/// all training samples.
pub fn fit_normalization(train: &Dataset) -> Result<NormalizationParams> {
    if train.is_empty() {
        return Err(Error::InvalidInput("cannot fit normalization on an empty set".into()));
    }
    let channels = train.n_channels();
    let mut low = Vec::with_capacity(channels);
    let mut high = Vec::with_capacity(channels);
    for d in 0..channels {
        let mut pooled: Vec<f64> = train
            .samples()
            .iter()
            .flat_map(|s| {
                (0..s.series.len())
                    .filter(move |&t| s.series.is_valid(t, d))
                    .map(move |t| s.series.value(t, d))
            })
            .collect();
        if pooled.is_empty() {
            return Err(Error::NoValidObservation { channel: d });
        }
        pooled.sort_by(f64::total_cmp);
        low.push(percentile_sorted(&pooled, LOW_PERCENTILE));
        high.push(percentile_sorted(&pooled, HIGH_PERCENTILE));
    }
    Ok(NormalizationParams { low, high })
}

impl NormalizationParams {
    pub fn channels(&self) -> usize {
        self.low.len()
    }

    /// Maps one value of channel `d`; not clipped to [0, 1].
    pub fn scale(&self, d: usize, x: f64) -> f64 {
        let range = self.high[d] - self.low[d];
        if range < RANGE_EPSILON {
            0.0
        } else {
            (x - self.low[d]) / range
        }
    }

    /// `feature_index,low,high` table.
    pub fn to_text(&self) -> String {
        let mut s = String::from("feature_index,low,high\n");
        for (i, (l, h)) in self.low.iter().zip(&self.high).enumerate() {
            s.push_str(&format!("{i},{l},{h}\n"));
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "feature_index,low,high")) => {}
            _ => return Err(Error::parse(path, 1, "expected header feature_index,low,high")),
        }
        let (mut low, mut high) = (Vec::new(), Vec::new());
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::parse(path, i + 1, format!("bad row {line:?}"));
            if f.len() != 3 || f[0].parse::<usize>().ok() != Some(low.len()) {
                return Err(bad());
            }
            low.push(f[1].parse().map_err(|_| bad())?);
            high.push(f[2].parse().map_err(|_| bad())?);
        }
        Ok(Self { low, high })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

/// Applies `x -> (x - low) / (high - low)` channel-wise.
pub fn apply_normalization(series: &MultivariateSeries, params: &NormalizationParams) -> Result<MultivariateSeries> {
    let channels = series.channels();
    if channels != params.channels() {
        return Err(Error::Shape(format!(
            "normalization fitted on {} channels, series has {channels}",
            params.channels()
        )));
    }
    let values = series
        .values()
        .iter()
        .enumerate()
        .map(|(i, &x)| params.scale(i % channels, x))
        .collect();
    MultivariateSeries::new(Arc::clone(series.calendar()), channels, values, series.mask().to_vec())
}

pub fn normalize_dataset(dataset: &Dataset, params: &NormalizationParams) -> Result<Dataset> {
    dataset.map_series(dataset.feature_names().to_vec(), Arc::clone(dataset.calendar()), |s| {
        apply_normalization(s, params)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::series::{ClassLegend, LabeledSample, Rgb};
    use proptest::prelude::*;

    fn cal(days: Vec<i32>) -> Arc<AcquisitionCalendar> {
        Arc::new(AcquisitionCalendar::new(days).unwrap())
    }

    /// Independent evaluator: scans every pair of valid points.
    fn brute_interp(points: &[(i32, f64)], day: i32) -> f64 {
        let first = points.iter().min_by_key(|p| p.0).unwrap();
        let last = points.iter().max_by_key(|p| p.0).unwrap();
        if day <= first.0 {
            return first.1;
        }
        if day >= last.0 {
            return last.1;
        }
        if let Some(p) = points.iter().find(|p| p.0 == day) {
            return p.1;
        }
        let left = points.iter().filter(|p| p.0 < day).max_by_key(|p| p.0).unwrap();
        let right = points.iter().filter(|p| p.0 > day).min_by_key(|p| p.0).unwrap();
        left.1 + (right.1 - left.1) * f64::from(day - left.0) / f64::from(right.0 - left.0)
    }

    #[test]
    fn interpolation_is_linear() {
        let s = MultivariateSeries::new(cal(vec![0, 10]), 1, vec![0.0, 10.0], vec![true; 2]).unwrap();
        let out = linear_gapfill(&s, &cal(vec![0, 4, 10])).unwrap();
        assert_eq!(out.value(1, 0), 4.0);
    }

    #[test]
    fn identity_on_fully_valid_source_grid() {
        let c = cal(vec![3, 7, 8, 20]);
        let s = MultivariateSeries::fully_valid(c.clone(), 2, (0..8).map(f64::from).collect()).unwrap();
        assert_eq!(linear_gapfill(&s, &c).unwrap(), s);
    }

    #[test]
    fn boundaries_clamp_and_empty_channel_errors() {
        let c = cal(vec![0, 5, 10, 15]);
        let s = MultivariateSeries::new(
            c.clone(),
            2,
            vec![9.0, 1.0, 2.0, 0.0, 3.0, 0.0, 9.0, 0.0],
            vec![false, false, true, false, true, false, false, false],
        )
        .unwrap();
        assert!(matches!(
            linear_gapfill(&s, &c),
            Err(Error::NoValidObservation { channel: 1 })
        ));
        let s =
            MultivariateSeries::new(c.clone(), 1, vec![9.0, 2.0, 3.0, 9.0], vec![false, true, true, false]).unwrap();
        let out = linear_gapfill(&s, &c).unwrap();
        assert_eq!(out.values(), &[2.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn index_arithmetic() {
        assert_eq!(ndvi(0.3, 0.3), 0.0);
        assert_eq!(ndvi(1.0, 0.0), 1.0);
        assert!((ndvi(0.4, 0.1) - 0.6).abs() < 1e-15);
        assert_eq!(ndwi(0.5, 0.5), 0.0);
        assert_eq!(ndwi(1.0, 0.0), 1.0);
        assert!((ndwi(0.2, 0.6) + 0.5).abs() < 1e-15);
        assert_eq!(brilliance(&[3.0, 4.0]), 5.0);
        assert_eq!(brilliance(&[0.0, 0.0, 0.0]), 0.0);
    }

    #[test]
    fn zero_denominator_counts() {
        let before = degenerate_index_count();
        assert_eq!(ndvi(0.0, 0.0), 0.0);
        assert_eq!(ndwi(0.0, -0.0), 0.0);
        assert!(degenerate_index_count() >= before + 2);
    }

    fn raw_series(t: usize) -> MultivariateSeries {
        let c = cal((0..t as i32).map(|d| d * 3).collect());
        let vals = (0..t * 3).map(|i| 0.05 + (i % 7) as f64 * 0.03).collect();
        MultivariateSeries::fully_valid(c, 3, vals).unwrap()
    }

    #[test]
    fn feature_counts() {
        for (t, counts) in [(46usize, [46usize, 138, 276]), (149, [149, 447, 894])] {
            for (strategy, expected) in FeatureStrategy::ALL.into_iter().zip(counts) {
                let f = assemble_features(&raw_series(t), strategy).unwrap();
                assert_eq!(f.values().len(), expected, "{strategy} at T={t}");
            }
        }
        let c = cal(vec![0, 1]);
        let two = MultivariateSeries::fully_valid(c, 2, vec![0.0; 4]).unwrap();
        assert!(assemble_features(&two, FeatureStrategy::Sb).is_err());
    }

    #[test]
    fn sbsf_channels_are_bands_then_indices() {
        let f = assemble_features(&raw_series(4), FeatureStrategy::SbSf).unwrap();
        let (g, r, nir) = (f.value(2, 0), f.value(2, 1), f.value(2, 2));
        assert_eq!(f.value(2, 3), ndvi(nir, r));
        assert_eq!(f.value(2, 4), ndwi(g, nir));
        assert_eq!(f.value(2, 5), brilliance(&[g, r, nir]));
    }

    fn one_channel_dataset(values: &[f64]) -> Dataset {
        let c = cal(vec![0, 1]);
        let legend = ClassLegend::new(vec![("a".into(), Rgb(0, 0, 0))]).unwrap();
        let samples = values
            .iter()
            .enumerate()
            .map(|(i, &v)| LabeledSample {
                series: MultivariateSeries::new(c.clone(), 1, vec![v, -1e9], vec![true, false]).unwrap(),
                label: 0,
                polygon_id: format!("p{i}"),
            })
            .collect();
        Dataset::new(samples, legend, vec!["x".into()], c).unwrap()
    }

    #[test]
    fn percentiles_of_uniform_grid() {
        let vals: Vec<f64> = (0..=100).map(f64::from).collect();
        let p = fit_normalization(&one_channel_dataset(&vals)).unwrap();
        assert!((p.low[0] - 2.0).abs() < 1e-12);
        assert!((p.high[0] - 98.0).abs() < 1e-12);
    }

    #[test]
    fn constant_feature_is_degenerate() {
        let p = fit_normalization(&one_channel_dataset(&[0.7; 10])).unwrap();
        assert_eq!((p.low[0], p.high[0]), (0.7, 0.7));
        assert_eq!(p.scale(0, 0.7), 0.0);
        assert_eq!(p.scale(0, 123.0), 0.0);
    }

    #[test]
    fn endpoints_and_no_clipping() {
        let p = NormalizationParams {
            low: vec![0.2],
            high: vec![0.6],
        };
        assert_eq!(p.scale(0, 0.2), 0.0);
        assert_eq!(p.scale(0, 0.6), 1.0);
        assert!(p.scale(0, 1.0) > 1.0);
        assert!(p.scale(0, -1.0) < 0.0);
        let c = cal(vec![0, 1]);
        let s = MultivariateSeries::fully_valid(c, 2, vec![0.0; 4]).unwrap();
        assert!(apply_normalization(&s, &p).is_err());
    }

    #[test]
    fn params_text_roundtrip() {
        let p = NormalizationParams {
            low: vec![0.1, -3.25e-7],
            high: vec![0.9, 1.0 / 3.0],
        };
        let back = NormalizationParams::parse(&p.to_text(), Path::new("n")).unwrap();
        assert_eq!(back, p);
    }

    proptest! {
        #[test]
        fn gapfill_matches_brute_force(
            days in proptest::collection::btree_set(0i32..200, 2..20),
            seed_vals in proptest::collection::vec(-1.0f64..1.0, 20),
            mask in proptest::collection::vec(any::<bool>(), 20),
            step in 1u32..7,
        ) {
            let days: Vec<i32> = days.into_iter().collect();
            let n = days.len();
            let mut valid: Vec<bool> = mask[..n].to_vec();
            valid[n / 2] = true;
            let c = cal(days.clone());
            let s = MultivariateSeries::new(c.clone(), 1, seed_vals[..n].to_vec(), valid.clone())
                .unwrap();
            let step = step.min((days[n - 1] - days[0]) as u32);
            let target = Arc::new(c.resampled(step).unwrap());
            let out = linear_gapfill(&s, &target).unwrap();
            prop_assert!(out.is_fully_valid());
            let points: Vec<(i32, f64)> = (0..n).filter(|&t| valid[t]).map(|t| (days[t], seed_vals[t])).collect();
            for (t, &day) in target.days().iter().enumerate() {
                let expect = brute_interp(&points, day);
                prop_assert!((out.value(t, 0) - expect).abs() < 1e-12);
            }
            // idempotent on the same grid
            prop_assert_eq!(linear_gapfill(&out, &target).unwrap(), out);
        }

        #[test]
        fn indices_scale_invariant(a in 0.01f64..1.0, b in 0.01f64..1.0, k in 0.1f64..100.0) {
            prop_assert!((ndvi(k * a, k * b) - ndvi(a, b)).abs() < 1e-12);
            prop_assert!((ndwi(k * a, k * b) - ndwi(a, b)).abs() < 1e-12);
        }

        #[test]
        fn brilliance_matches_loop(v in proptest::collection::vec(-2.0f64..2.0, 1..8)) {
            let mut acc = 0.0;
            for x in &v { acc += x * x; }
            prop_assert!((brilliance(&v) - acc.sqrt()).abs() < 1e-12);
        }

        #[test]
        fn normalization_affine_and_monotone(
            low in -1.0f64..1.0, range in 0.01f64..2.0, x in -3.0f64..3.0, dx in 1e-6f64..1.0,
        ) {
            let p = NormalizationParams { low: vec![low], high: vec![low + range] };
            let expected = (x - low) / (low + range - low);
            prop_assert!((p.scale(0, x) - expected).abs() < 1e-12);
            prop_assert!(p.scale(0, x + dx) > p.scale(0, x));
        }
    }
}
