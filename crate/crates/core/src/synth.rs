//! Synthetic satellite image time series: double-logistic vegetation activity
//! mixed into three bands (G, R, NIR), grouped in polygons, with per-polygon
//! and per-pixel variability, Gaussian noise and polygon-wide cloud gaps.

use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::RAW_BANDS;
use crate::seed;
use crate::series::{AcquisitionCalendar, ClassLegend, Dataset, LabeledSample, MultivariateSeries, Rgb};

/// Vegetation activity curve; `green_up_day < senescence_day`, rates > 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhenologyProfile {
    pub baseline: f64,
    pub amplitude: f64,
    pub green_up_day: f64,
    pub senescence_day: f64,
    pub green_up_rate: f64,
    pub senescence_rate: f64,
}

impl PhenologyProfile {
    /// Negated comparisons so NaN fields are rejected.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if !(self.green_up_day < self.senescence_day) {
            return Err(Error::InvalidInput("green-up must precede senescence".into()));
        }
        if !(self.green_up_rate > 0.0 && self.senescence_rate > 0.0) {
            return Err(Error::InvalidInput("phenology rates must be positive".into()));
        }
        if !(self.amplitude >= 0.0) {
            return Err(Error::InvalidInput("amplitude must be non-negative".into()));
        }
        Ok(())
    }

    pub fn shifted(mut self, days: f64) -> Self {
        self.green_up_day += days;
        self.senescence_day += days;
        self
    }
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn double_logistic(t: f64, p: &PhenologyProfile) -> f64 {
    p.baseline
        + p.amplitude
            * (logistic(p.green_up_rate * (t - p.green_up_day)) - logistic(p.senescence_rate * (t - p.senescence_day)))
}

/// One class: a vegetation curve mixed between a background and a canopy
/// spectrum, `band = background + (canopy - background) * activity`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    /// `#RRGGBB`.
    pub color: String,
    pub profile: PhenologyProfile,
    /// G, R, NIR reflectance at zero activity.
    pub background: [f64; 3],
    /// G, R, NIR reflectance at full activity.
    pub canopy: [f64; 3],
    pub polygons: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub classes: Vec<ClassSpec>,
    /// Inclusive pixel-count range per polygon.
    pub pixels_per_polygon: [usize; 2],
    /// Per-pixel, per-entry Gaussian noise.
    pub noise_sd: f64,
    /// Chance that one acquisition is clouded over a whole polygon.
    pub cloud_probability: f64,
    /// Day-of-year acquisition dates.
    pub calendar: Vec<i32>,
    /// Per-polygon shift of the curve, sd in days.
    #[serde(default)]
    pub timing_jitter_days: f64,
    /// Per-pixel shift of the curve on top of the polygon shift, sd in days.
    #[serde(default)]
    pub pixel_timing_jitter_days: f64,
    /// Per-polygon relative amplitude change, sd.
    #[serde(default)]
    pub amplitude_jitter: f64,
    /// Per-pixel relative gain on the activity curve, sd.
    #[serde(default)]
    pub pixel_gain_jitter: f64,
    /// Per-polygon additive offset of each band, sd.
    #[serde(default)]
    pub offset_sd: f64,
}

impl SceneSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: SceneSpec = toml::from_str(text).map_err(|e| Error::InvalidInput(format!("scene config: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scene spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::InvalidInput("a scene needs at least 2 classes".into()));
        }
        for c in &self.classes {
            c.profile.validate()?;
            if Rgb::parse_hex(&c.color).is_none() {
                return Err(Error::InvalidInput(format!("bad color {:?} for {}", c.color, c.name)));
            }
        }
        let [lo, hi] = self.pixels_per_polygon;
        if lo > hi {
            return Err(Error::InvalidInput("pixels_per_polygon range is reversed".into()));
        }
        if !(0.0..=1.0).contains(&self.cloud_probability) {
            return Err(Error::InvalidInput("cloud_probability must lie in [0, 1]".into()));
        }
        let sds = [
            self.noise_sd,
            self.timing_jitter_days,
            self.pixel_timing_jitter_days,
            self.amplitude_jitter,
            self.pixel_gain_jitter,
            self.offset_sd,
        ];
        if sds.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(Error::InvalidInput(
                "standard deviations must be finite and non-negative".into(),
            ));
        }
        AcquisitionCalendar::new(self.calendar.clone())?;
        Ok(())
    }

    pub fn legend(&self) -> Result<ClassLegend> {
        ClassLegend::new(
            self.classes
                .iter()
                .map(|c| (c.name.clone(), Rgb::parse_hex(&c.color).expect("validated")))
                .collect(),
        )
    }
}

/// 46 acquisition dates between days 20 and 316, denser in summer.
pub const DEFAULT_CALENDAR: [i32; 46] = [
    20, 33, 45, 58, 70, 80, 89, 97, 104, 110, 116, 121, 126, 131, 136, 141, 146, 151, 156, 161, 166, 171, 176, 181,
    186, 191, 196, 201, 206, 211, 216, 221, 227, 233, 239, 246, 253, 260, 267, 274, 281, 288, 295, 302, 309, 316,
];

pub fn default_calendar() -> AcquisitionCalendar {
    AcquisitionCalendar::new(DEFAULT_CALENDAR.to_vec()).expect("constant calendar is valid")
}

fn profile(baseline: f64, amplitude: f64, up: f64, sen: f64, up_rate: f64, sen_rate: f64) -> PhenologyProfile {
    PhenologyProfile {
        baseline,
        amplitude,
        green_up_day: up,
        senescence_day: sen,
        green_up_rate: up_rate,
        senescence_rate: sen_rate,
    }
}

const SOIL: [f64; 3] = [0.10, 0.14, 0.22];
const LEAF: [f64; 3] = [0.07, 0.04, 0.45];

/// Reference polygon counts of the 13 land-cover classes.
pub const REFERENCE_POLYGONS: [(&str, usize); 13] = [
    ("Wheat", 295),
    ("Barley", 43),
    ("Rapeseed", 55),
    ("Corn", 83),
    ("Soy", 24),
    ("Sunflower", 173),
    ("Sorghum", 22),
    ("Pea", 15),
    ("Grassland", 328),
    ("Deciduous", 24),
    ("Conifer", 18),
    ("Water", 32),
    ("Urban", 307),
];

/// Scale-down factor from the reference polygon counts.
pub const DEFAULT_POLYGON_SCALE: usize = 20;

/// 13 classes with polygon counts `max(2, round(n / 20))`, 10 to 40 pixels per
/// polygon and 0.02 reflectance noise.
pub fn default_scene() -> SceneSpec {
    let curves: [(PhenologyProfile, [f64; 3], [f64; 3], &str); 13] = [
        (profile(0.05, 0.9, 75.0, 165.0, 0.08, 0.10), SOIL, LEAF, "#E6C619"),
        (profile(0.05, 0.85, 65.0, 150.0, 0.09, 0.11), SOIL, LEAF, "#C8A02B"),
        (
            profile(0.05, 0.9, 55.0, 145.0, 0.07, 0.09),
            SOIL,
            [0.12, 0.07, 0.40],
            "#F0F000",
        ),
        (profile(0.03, 0.95, 160.0, 255.0, 0.09, 0.08), SOIL, LEAF, "#F59B00"),
        (profile(0.03, 0.8, 170.0, 250.0, 0.10, 0.09), SOIL, LEAF, "#A0D200"),
        (
            profile(0.03, 0.75, 150.0, 225.0, 0.10, 0.10),
            SOIL,
            [0.08, 0.05, 0.38],
            "#FFFF64",
        ),
        (profile(0.03, 0.8, 175.0, 270.0, 0.08, 0.08), SOIL, LEAF, "#DC6E14"),
        (profile(0.05, 0.7, 80.0, 170.0, 0.10, 0.12), SOIL, LEAF, "#7DBE5A"),
        (
            profile(0.35, 0.45, 70.0, 280.0, 0.05, 0.05),
            SOIL,
            [0.08, 0.06, 0.38],
            "#A0E650",
        ),
        (
            profile(0.15, 0.8, 115.0, 290.0, 0.08, 0.07),
            [0.06, 0.06, 0.18],
            [0.05, 0.03, 0.42],
            "#009600",
        ),
        (
            profile(0.8, 0.1, 110.0, 280.0, 0.05, 0.05),
            [0.05, 0.05, 0.15],
            [0.04, 0.03, 0.28],
            "#005000",
        ),
        (
            profile(0.0, 0.05, 120.0, 250.0, 0.05, 0.05),
            [0.06, 0.04, 0.02],
            [0.07, 0.06, 0.08],
            "#0000FF",
        ),
        (
            profile(0.0, 0.1, 110.0, 260.0, 0.05, 0.05),
            [0.14, 0.16, 0.20],
            [0.10, 0.09, 0.28],
            "#FF00FF",
        ),
    ];
    let classes = REFERENCE_POLYGONS
        .iter()
        .zip(curves)
        .map(|(&(name, n), (profile, background, canopy, color))| ClassSpec {
            name: name.to_string(),
            color: color.to_string(),
            profile,
            background,
            canopy,
            polygons: ((n as f64 / DEFAULT_POLYGON_SCALE as f64).round() as usize).max(2),
        })
        .collect();
    SceneSpec {
        classes,
        pixels_per_polygon: [10, 40],
        noise_sd: 0.02,
        cloud_probability: 0.15,
        calendar: DEFAULT_CALENDAR.to_vec(),
        timing_jitter_days: 5.0,
        pixel_timing_jitter_days: 2.0,
        amplitude_jitter: 0.1,
        pixel_gain_jitter: 0.05,
        offset_sd: 0.01,
    }
}

struct PolygonDraw {
    shift: f64,
    amplitude: f64,
    offset: [f64; 3],
    clouded: Vec<bool>,
}

fn normal(sd: f64) -> Normal<f64> {
    Normal::new(0.0, sd).expect("validated sd")
}

fn draw_polygon(spec: &SceneSpec, rng: &mut seed::Rng) -> PolygonDraw {
    let t = spec.calendar.len();
    let mut clouded: Vec<bool> = (0..t).map(|_| rng.random::<f64>() < spec.cloud_probability).collect();
    if clouded.iter().all(|&c| c) {
        let keep = rng.random_range(0..t);
        clouded[keep] = false;
    }
    PolygonDraw {
        shift: normal(spec.timing_jitter_days).sample(rng),
        amplitude: 1.0 + normal(spec.amplitude_jitter).sample(rng),
        offset: [0; 3].map(|_| normal(spec.offset_sd).sample(rng)),
        clouded,
    }
}

fn draw_pixel(
    spec: &SceneSpec,
    class: &ClassSpec,
    poly: &PolygonDraw,
    calendar: &Arc<AcquisitionCalendar>,
    rng: &mut seed::Rng,
) -> Result<MultivariateSeries> {
    let shift = poly.shift + normal(spec.pixel_timing_jitter_days).sample(rng);
    let gain = (1.0 + normal(spec.pixel_gain_jitter).sample(rng)).max(0.0);
    let mut p = class.profile.shifted(shift);
    p.amplitude = (p.amplitude * poly.amplitude).max(0.0);
    let noise = normal(spec.noise_sd);
    let mut values = Vec::with_capacity(calendar.len() * 3);
    let mut valid = Vec::with_capacity(calendar.len() * 3);
    for (ti, &day) in calendar.days().iter().enumerate() {
        let activity = double_logistic(f64::from(day), &p) * gain;
        for b in 0..3 {
            let v = class.background[b] + (class.canopy[b] - class.background[b]) * activity;
            values.push((v + poly.offset[b] + noise.sample(rng)).max(0.0));
            valid.push(!poly.clouded[ti]);
        }
    }
    MultivariateSeries::new(Arc::clone(calendar), 3, values, valid)
}

fn feature_names() -> Vec<String> {
    RAW_BANDS.iter().map(|s| s.to_string()).collect()
}

/// Deterministic under `seed`; every polygon draws from its own stream.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if spec.pixels_per_polygon[1] == 0 || spec.classes.iter().all(|c| c.polygons == 0) {
        return Err(Error::InvalidInput("scene would contain zero pixels".into()));
    }
    let calendar = Arc::new(AcquisitionCalendar::new(spec.calendar.clone())?);
    let mut samples = Vec::new();
    let mut polygon_index = 0u64;
    for (label, class) in spec.classes.iter().enumerate() {
        for k in 0..class.polygons {
            let mut rng = seed::stream(seed, "polygon", polygon_index);
            polygon_index += 1;
            let [lo, hi] = spec.pixels_per_polygon;
            let n = rng.random_range(lo..=hi);
            let poly = draw_polygon(spec, &mut rng);
            let id = format!("{}-{:03}", class.name, k);
            for _ in 0..n {
                samples.push(LabeledSample {
                    series: draw_pixel(spec, class, &poly, &calendar, &mut rng)?,
                    label,
                    polygon_id: id.clone(),
                });
            }
        }
    }
    if samples.is_empty() {
        return Err(Error::InvalidInput("scene would contain zero pixels".into()));
    }
    Dataset::new(samples, spec.legend()?, feature_names(), calendar)
}

/// An `h x w` raster in row-major order, tiled by `block x block` polygons
/// whose classes are drawn in proportion to the scene's polygon counts.
pub fn generate_grid_scene(spec: &SceneSpec, h: usize, w: usize, block: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if h == 0 || w == 0 || block == 0 {
        return Err(Error::InvalidInput("grid dimensions must be positive".into()));
    }
    let weights: Vec<usize> = spec.classes.iter().map(|c| c.polygons.max(1)).collect();
    let total: usize = weights.iter().sum();
    let calendar = Arc::new(AcquisitionCalendar::new(spec.calendar.clone())?);
    let (bh, bw) = (h.div_ceil(block), w.div_ceil(block));
    let mut blocks = Vec::with_capacity(bh * bw);
    for i in 0..bh * bw {
        let mut rng = seed::stream(seed, "grid-block", i as u64);
        let mut pick = rng.random_range(0..total);
        let mut label = 0;
        while pick >= weights[label] {
            pick -= weights[label];
            label += 1;
        }
        let poly = draw_polygon(spec, &mut rng);
        blocks.push((label, poly, rng));
    }
    let mut samples = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let bi = (r / block) * bw + c / block;
            let (label, poly, rng) = &mut blocks[bi];
            let class = &spec.classes[*label];
            samples.push(LabeledSample {
                series: draw_pixel(spec, class, poly, &calendar, rng)?,
                label: *label,
                polygon_id: format!("block-{bi:04}"),
            });
        }
    }
    Dataset::new(samples, spec.legend()?, feature_names(), calendar)
}

/// Four classes: `early` and `late` share one curve, `late` shifted by
/// `shift_days`; `low` and `high` share timing and differ in amplitude.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftBenchmarkSpec {
    pub shift_days: f64,
    pub polygons_per_class: usize,
    pub pixels_per_polygon: [usize; 2],
    pub noise_sd: f64,
    pub cloud_probability: f64,
    pub timing_jitter_days: f64,
    pub pixel_timing_jitter_days: f64,
    pub amplitude_jitter: f64,
    pub pixel_gain_jitter: f64,
    pub offset_sd: f64,
}

/// Classes of the time-coded pair.
pub const SHIFT_PAIR: [usize; 2] = [0, 1];

impl ShiftBenchmarkSpec {
    /// About 5000 pixels.
    pub fn new(shift_days: f64) -> Self {
        Self {
            shift_days,
            polygons_per_class: 25,
            pixels_per_polygon: [40, 60],
            noise_sd: 0.02,
            cloud_probability: 0.1,
            timing_jitter_days: 4.0,
            pixel_timing_jitter_days: 8.0,
            amplitude_jitter: 0.25,
            pixel_gain_jitter: 0.2,
            offset_sd: 0.03,
        }
    }

    pub fn scene(&self) -> SceneSpec {
        let base = profile(0.05, 0.85, 110.0, 200.0, 0.08, 0.08);
        let amp = profile(0.05, 0.5, 100.0, 230.0, 0.07, 0.07);
        let class = |name: &str, color: &str, p: PhenologyProfile| ClassSpec {
            name: name.to_string(),
            color: color.to_string(),
            profile: p,
            background: SOIL,
            canopy: LEAF,
            polygons: self.polygons_per_class,
        };
        SceneSpec {
            classes: vec![
                class("early", "#1F77B4", base),
                class("late", "#FF7F0E", base.shifted(self.shift_days)),
                class("low", "#2CA02C", amp),
                class("high", "#D62728", PhenologyProfile { amplitude: 0.8, ..amp }),
            ],
            pixels_per_polygon: self.pixels_per_polygon,
            noise_sd: self.noise_sd,
            cloud_probability: self.cloud_probability,
            calendar: DEFAULT_CALENDAR.to_vec(),
            timing_jitter_days: self.timing_jitter_days,
            pixel_timing_jitter_days: self.pixel_timing_jitter_days,
            amplitude_jitter: self.amplitude_jitter,
            pixel_gain_jitter: self.pixel_gain_jitter,
            offset_sd: self.offset_sd,
        }
    }
}

pub fn make_shift_benchmark(shift_days: f64, seed: u64) -> Result<Dataset> {
    generate_scene(&ShiftBenchmarkSpec::new(shift_days).scene(), seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn double_logistic_examples() {
        let flat = profile(0.3, 0.0, 100.0, 200.0, 0.1, 0.1);
        assert_eq!(double_logistic(150.0, &flat), 0.3);
        let steep = profile(0.1, 0.8, 100.0, 200.0, 5.0, 5.0);
        assert!((double_logistic(150.0, &steep) - 0.9).abs() < 1e-12);
        let p = profile(0.1, 0.8, 100.0, 200.0, 0.1, 0.05);
        assert!((double_logistic(-1000.0, &p) - 0.1).abs() < 1e-12);
        assert!((double_logistic(1200.0, &p) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn calendar_constant() {
        let c = default_calendar();
        assert_eq!(c.len(), 46);
        assert_eq!(c.resampled(2).unwrap().len(), 149);
    }

    #[test]
    fn toml_roundtrip_rejects_unknown_keys() {
        let spec = default_scene();
        let text = spec.to_toml();
        assert_eq!(SceneSpec::from_toml(&text).unwrap(), spec);
        assert!(SceneSpec::from_toml(&format!("bogus = 1\n{text}")).is_err());
    }
}
