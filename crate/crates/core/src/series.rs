//! Domain types shared by every stage of the pipeline: acquisition calendars,
//! per-pixel multivariate series, labeled datasets, class legends and
//! polygon-level split assignments.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::error::{Error, Result};

/// Ordered acquisition dates, as day-of-year integers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AcquisitionCalendar {
    days: Vec<i32>,
    step: Option<u32>,
}

impl AcquisitionCalendar {
    /// Builds a calendar from strictly increasing days. Regularity is detected.
    pub fn new(days: Vec<i32>) -> Result<Self> {
        if days.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "calendar needs at least 2 dates, got {}",
                days.len()
            )));
        }
        if let Some(w) = days.windows(2).find(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput(format!(
                "calendar dates must be strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        let first = days[1] - days[0];
        let step = days.windows(2).all(|w| w[1] - w[0] == first).then_some(first as u32);
        Ok(Self { days, step })
    }

    /// Regular grid from `start` with spacing `step`, not exceeding `end`.
    pub fn regular(start: i32, end: i32, step: u32) -> Result<Self> {
        if step == 0 {
            return Err(Error::InvalidInput("grid step must be >= 1".into()));
        }
        let days: Vec<i32> = (start..=end).step_by(step as usize).collect();
        Self::new(days)
    }

    /// Regular grid spanning the first to the last date of `self`.
    pub fn resampled(&self, step: u32) -> Result<Self> {
        Self::regular(self.first(), self.last(), step)
    }

    pub fn days(&self) -> &[i32] {
        &self.days
    }

    pub fn len(&self) -> usize {
        self.days.len()
    }

    pub fn is_empty(&self) -> bool {
        self.days.is_empty()
    }

    pub fn is_regular(&self) -> bool {
        self.step.is_some()
    }

    pub fn step(&self) -> Option<u32> {
        self.step
    }

    pub fn first(&self) -> i32 {
        self.days[0]
    }

    pub fn last(&self) -> i32 {
        self.days[self.days.len() - 1]
    }
}

/// One pixel's time-stamped multi-channel profile with a validity mask.
///
/// Values are stored time-major: entry `(t, d)` lives at `t * channels + d`.
/// Invalid entries hold 0.
#[derive(Debug, Clone, PartialEq)]
pub struct MultivariateSeries {
    calendar: Arc<AcquisitionCalendar>,
    channels: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl MultivariateSeries {
    pub fn new(
        calendar: Arc<AcquisitionCalendar>,
        channels: usize,
        mut values: Vec<f64>,
        valid: Vec<bool>,
    ) -> Result<Self> {
        let expected = calendar.len() * channels;
        if channels == 0 || values.len() != expected || valid.len() != expected {
            return Err(Error::Shape(format!(
                "series expects {} x {} = {expected} entries, got {} values and {} mask entries",
                calendar.len(),
                channels,
                values.len(),
                valid.len()
            )));
        }
        for (v, &ok) in values.iter_mut().zip(&valid) {
            if !ok {
                *v = 0.0;
            }
        }
        Ok(Self {
            calendar,
            channels,
            values,
            valid,
        })
    }

    /// A series whose every entry is valid.
    pub fn fully_valid(calendar: Arc<AcquisitionCalendar>, channels: usize, values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::new(calendar, channels, values, vec![true; n])
    }

    pub fn calendar(&self) -> &Arc<AcquisitionCalendar> {
        &self.calendar
    }

    pub fn len(&self) -> usize {
        self.calendar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn value(&self, t: usize, d: usize) -> f64 {
        self.values[t * self.channels + d]
    }

    pub fn is_valid(&self, t: usize, d: usize) -> bool {
        self.valid[t * self.channels + d]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.valid
    }

    pub fn is_fully_valid(&self) -> bool {
        self.valid.iter().all(|&v| v)
    }

    /// Values of channel `d` in time order.
    pub fn channel(&self, d: usize) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().skip(d).step_by(self.channels).copied()
    }
}

/// Time-major flattening: element `t * D + d` equals `values[t][d]`.
///
/// Fails when any entry is invalid; gap-fill first.
pub fn flatten(series: &MultivariateSeries) -> Result<Vec<f64>> {
    if !series.is_fully_valid() {
        return Err(Error::InvalidInput(
            "cannot flatten a series with invalid entries; gap-fill it first".into(),
        ));
    }
    Ok(series.values.clone())
}

/// Inverse of [`flatten`].
pub fn unflatten(values: Vec<f64>, calendar: Arc<AcquisitionCalendar>, channels: usize) -> Result<MultivariateSeries> {
    MultivariateSeries::fully_valid(calendar, channels, values)
}

/// An RGB display color.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Rgb(pub u8, pub u8, pub u8);

impl Rgb {
    pub fn to_hex(self) -> String {
        format!("#{:02X}{:02X}{:02X}", self.0, self.1, self.2)
    }

    pub fn parse_hex(s: &str) -> Option<Self> {
        let s = s.strip_prefix('#')?;
        if s.len() != 6 || !s.is_ascii() {
            return None;
        }
        let c = |i: usize| u8::from_str_radix(&s[i..i + 2], 16).ok();
        Some(Rgb(c(0)?, c(2)?, c(4)?))
    }
}

/// Ordered class names with display colors; class `i` is the i-th entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassLegend {
    entries: Vec<(String, Rgb)>,
}

impl ClassLegend {
    pub fn new(entries: Vec<(String, Rgb)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidInput("legend has no classes".into()));
        }
        let mut seen = BTreeSet::new();
        for (name, _) in &entries {
            if name.is_empty() || name.contains([',', ':', '\n']) {
                return Err(Error::InvalidInput(format!("invalid class name {name:?}")));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate class name {name:?}")));
            }
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, class: usize) -> &str {
        &self.entries[class].0
    }

    pub fn color(&self, class: usize) -> Rgb {
        self.entries[class].1
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    /// `name:#RRGGBB` lines.
    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(n, c)| format!("{n}:{}\n", c.to_hex()))
            .collect()
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (name, color) = line
                .rsplit_once(':')
                .ok_or_else(|| Error::parse(path, i + 1, "expected `name:#RRGGBB`"))?;
            let rgb = Rgb::parse_hex(color.trim())
                .ok_or_else(|| Error::parse(path, i + 1, format!("bad color {color:?}")))?;
            entries.push((name.trim().to_string(), rgb));
        }
        Self::new(entries).map_err(|e| Error::parse(path, 0, e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// A labeled pixel time series tagged with the polygon it was drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub series: MultivariateSeries,
    pub label: usize,
    pub polygon_id: String,
}

/// A collection of samples sharing one calendar and channel layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<LabeledSample>,
    legend: ClassLegend,
    feature_names: Vec<String>,
    calendar: Arc<AcquisitionCalendar>,
}

impl Dataset {
    pub fn new(
        samples: Vec<LabeledSample>,
        legend: ClassLegend,
        feature_names: Vec<String>,
        calendar: Arc<AcquisitionCalendar>,
    ) -> Result<Self> {
        let channels = feature_names.len();
        if channels == 0 {
            return Err(Error::InvalidInput("dataset needs at least one feature".into()));
        }
        for (i, s) in samples.iter().enumerate() {
            if s.series.channels() != channels || *s.series.calendar() != calendar {
                return Err(Error::Shape(format!(
                    "sample {i} does not share the dataset calendar and channel count"
                )));
            }
            if s.label >= legend.len() {
                return Err(Error::InvalidInput(format!(
                    "sample {i} has label {} but the legend has {} classes",
                    s.label,
                    legend.len()
                )));
            }
            if s.polygon_id.is_empty() || s.polygon_id.contains([',', '\n']) {
                return Err(Error::InvalidInput(format!(
                    "sample {i} has invalid polygon id {:?}",
                    s.polygon_id
                )));
            }
        }
        // Canonicalize so every sample holds the very same calendar object.
        let samples = samples
            .into_iter()
            .map(|mut s| {
                s.series.calendar = Arc::clone(&calendar);
                s
            })
            .collect();
        Ok(Self {
            samples,
            legend,
            feature_names,
            calendar,
        })
    }

    pub fn samples(&self) -> &[LabeledSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn legend(&self) -> &ClassLegend {
        &self.legend
    }

    pub fn n_classes(&self) -> usize {
        self.legend.len()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn calendar(&self) -> &Arc<AcquisitionCalendar> {
        &self.calendar
    }

    pub fn n_timesteps(&self) -> usize {
        self.calendar.len()
    }

    pub fn n_channels(&self) -> usize {
        self.feature_names.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Pixel count and label of every polygon, keyed by polygon id.
    pub fn polygons(&self) -> BTreeMap<&str, PolygonInfo> {
        let mut map: BTreeMap<&str, PolygonInfo> = BTreeMap::new();
        for s in &self.samples {
            map.entry(s.polygon_id.as_str())
                .and_modify(|p| p.pixels += 1)
                .or_insert(PolygonInfo {
                    label: s.label,
                    pixels: 1,
                });
        }
        map
    }

    /// Samples whose polygon is in `polygons`, in original order.
    pub fn subset(&self, polygons: &BTreeSet<String>) -> Dataset {
        self.filter(|s| polygons.contains(&s.polygon_id))
    }

    pub fn filter(&self, mut keep: impl FnMut(&LabeledSample) -> bool) -> Dataset {
        Dataset {
            samples: self.samples.iter().filter(|s| keep(s)).cloned().collect(),
            legend: self.legend.clone(),
            feature_names: self.feature_names.clone(),
            calendar: Arc::clone(&self.calendar),
        }
    }

    /// Replaces every series through `f`, which may change calendar and channels.
    pub fn map_series(
        &self,
        feature_names: Vec<String>,
        calendar: Arc<AcquisitionCalendar>,
        mut f: impl FnMut(&MultivariateSeries) -> Result<MultivariateSeries>,
    ) -> Result<Dataset> {
        let samples = self
            .samples
            .iter()
            .map(|s| {
                Ok(LabeledSample {
                    series: f(&s.series)?,
                    label: s.label,
                    polygon_id: s.polygon_id.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(samples, self.legend.clone(), feature_names, calendar)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PolygonInfo {
    pub label: usize,
    pub pixels: usize,
}

/// Polygon-level partition for one evaluation fold.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitAssignment {
    pub fold_id: usize,
    pub train_polygons: BTreeSet<String>,
    pub validation_polygons: BTreeSet<String>,
    pub test_polygons: BTreeSet<String>,
}

impl SplitAssignment {
    pub fn is_disjoint(&self) -> bool {
        self.train_polygons.is_disjoint(&self.validation_polygons)
            && self.train_polygons.is_disjoint(&self.test_polygons)
            && self.validation_polygons.is_disjoint(&self.test_polygons)
    }
}

const NA: &str = "NA";

/// Default location of the legend sidecar for a dataset CSV.
pub fn legend_path_for(csv: &Path) -> PathBuf {
    csv.with_extension("legend")
}

/// Serializes a dataset to the CSV layout
/// `polygon_id,label,<feature>_t<day>...` (time-major, `NA` for invalid).
pub fn dataset_to_csv(dataset: &Dataset) -> String {
    let mut out = String::from("polygon_id,label");
    for day in dataset.calendar.days() {
        for name in &dataset.feature_names {
            let _ = write!(out, ",{name}_t{day}");
        }
    }
    out.push('\n');
    for s in &dataset.samples {
        out.push_str(&s.polygon_id);
        out.push(',');
        out.push_str(dataset.legend.name(s.label));
        for (v, ok) in s.series.values.iter().zip(&s.series.valid) {
            out.push(',');
            if *ok {
                let _ = write!(out, "{v}");
            } else {
                out.push_str(NA);
            }
        }
        out.push('\n');
    }
    out
}

/// Parses the CSV layout written by [`dataset_to_csv`].
pub fn dataset_from_csv(text: &str, legend: ClassLegend, path: &Path) -> Result<Dataset> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::parse(path, 1, "empty file"))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[0] != "polygon_id" || cols[1] != "label" {
        return Err(Error::parse(
            path,
            1,
            "header must start with `polygon_id,label,` followed by feature columns",
        ));
    }
    let mut parsed = Vec::with_capacity(cols.len() - 2);
    for c in &cols[2..] {
        let (name, day) = c
            .rsplit_once("_t")
            .and_then(|(n, d)| Some((n, d.parse::<i32>().ok()?)))
            .filter(|(n, _)| !n.is_empty())
            .ok_or_else(|| Error::parse(path, 1, format!("bad feature column {c:?}")))?;
        parsed.push((name.to_string(), day));
    }
    let first_day = parsed[0].1;
    let channels = parsed.iter().take_while(|(_, d)| *d == first_day).count();
    if parsed.len() % channels != 0 {
        return Err(Error::parse(path, 1, "feature columns are not a full T x D grid"));
    }
    let feature_names: Vec<String> = parsed[..channels].iter().map(|(n, _)| n.clone()).collect();
    let mut days = Vec::with_capacity(parsed.len() / channels);
    for (t, chunk) in parsed.chunks(channels).enumerate() {
        let day = chunk[0].1;
        for (d, (name, dd)) in chunk.iter().enumerate() {
            if *dd != day || *name != feature_names[d] {
                return Err(Error::parse(
                    path,
                    1,
                    format!("column {} breaks time-major order", 2 + t * channels + d),
                ));
            }
        }
        days.push(day);
    }
    let calendar = Arc::new(AcquisitionCalendar::new(days).map_err(|e| Error::parse(path, 1, e.to_string()))?);

    let width = cols.len();
    let mut samples = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != width {
            return Err(Error::parse(
                path,
                lineno,
                format!("row has {} fields, expected {width}", fields.len()),
            ));
        }
        let label = legend
            .index_of(fields[1])
            .ok_or_else(|| Error::parse(path, lineno, format!("unknown class name {:?}", fields[1])))?;
        if fields[0].is_empty() {
            return Err(Error::parse(path, lineno, "empty polygon id"));
        }
        let mut values = Vec::with_capacity(width - 2);
        let mut valid = Vec::with_capacity(width - 2);
        for f in &fields[2..] {
            if *f == NA {
                values.push(0.0);
                valid.push(false);
            } else {
                let v: f64 = f
                    .parse()
                    .map_err(|_| Error::parse(path, lineno, format!("bad number {f:?}")))?;
                values.push(v);
                valid.push(true);
            }
        }
        let series = MultivariateSeries::new(Arc::clone(&calendar), channels, values, valid)
            .map_err(|e| Error::parse(path, lineno, e.to_string()))?;
        samples.push(LabeledSample {
            series,
            label,
            polygon_id: fields[0].to_string(),
        });
    }
    Dataset::new(samples, legend, feature_names, calendar).map_err(|e| Error::parse(path, 0, e.to_string()))
}

/// Reads a dataset CSV together with its legend sidecar file.
pub fn dataset_read(path: &Path, legend_path: &Path) -> Result<Dataset> {
    let legend = ClassLegend::read(legend_path)?;
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    dataset_from_csv(&text, legend, path)
}

/// Writes the dataset CSV and its legend sidecar ([`legend_path_for`]).
pub fn dataset_write(dataset: &Dataset, path: &Path) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput("refusing to write an empty dataset".into()));
    }
    fs::write(path, dataset_to_csv(dataset)).map_err(|e| Error::io(path, e))?;
    dataset.legend.write(&legend_path_for(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn legend2() -> ClassLegend {
        ClassLegend::new(vec![
            ("wheat".into(), Rgb(200, 180, 0)),
            ("corn".into(), Rgb(0, 120, 0)),
        ])
        .unwrap()
    }

    fn tiny() -> Dataset {
        let cal = Arc::new(AcquisitionCalendar::new(vec![1, 5, 9, 20]).unwrap());
        let mk = |vals: Vec<f64>, label, poly: &str| {
            let valid = vals.iter().map(|v| !v.is_nan()).collect();
            let vals = vals.into_iter().map(|v| if v.is_nan() { 0.0 } else { v }).collect();
            LabeledSample {
                series: MultivariateSeries::new(Arc::clone(&cal), 1, vals, valid).unwrap(),
                label,
                polygon_id: poly.into(),
            }
        };
        Dataset::new(
            vec![
                mk(vec![0.1, 0.2, f64::NAN, 0.4], 0, "p1"),
                mk(vec![0.5, 0.25, 0.125, 1.0], 1, "p2"),
                mk(vec![-0.0, 3.5, 1e-9, 0.3], 1, "p2"),
            ],
            legend2(),
            vec!["NDVI".into()],
            cal,
        )
        .unwrap()
    }

    #[test]
    fn calendar_detects_regularity() {
        let c = AcquisitionCalendar::regular(10, 20, 2).unwrap();
        assert_eq!(c.len(), 6);
        assert_eq!(c.step(), Some(2));
        let c = AcquisitionCalendar::new(vec![1, 2, 4]).unwrap();
        assert!(!c.is_regular());
        assert!(AcquisitionCalendar::new(vec![1]).is_err());
        assert!(AcquisitionCalendar::new(vec![3, 3]).is_err());
    }

    #[test]
    fn csv_minimal_roundtrip() {
        let ds = tiny();
        let text = dataset_to_csv(&ds);
        assert!(text.starts_with("polygon_id,label,NDVI_t1,NDVI_t5,NDVI_t9,NDVI_t20\n"));
        assert!(text.contains("p1,wheat,0.1,0.2,NA,0.4\n"));
        let back = dataset_from_csv(&text, legend2(), Path::new("x.csv")).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back.n_classes(), 2);
        assert_eq!(back, ds);
        assert_eq!(dataset_to_csv(&back), text);
    }

    #[test]
    fn ragged_row_names_the_line() {
        let text = "polygon_id,label,B_t1,B_t2\np,wheat,1,2\np,wheat,1\n";
        let err = dataset_from_csv(text, legend2(), Path::new("f.csv")).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_class_and_bad_header_rejected() {
        let text = "polygon_id,label,B_t1,B_t2\np,barley,1,2\n";
        assert!(matches!(
            dataset_from_csv(text, legend2(), Path::new("f.csv")),
            Err(Error::Parse { line: 2, .. })
        ));
        let text = "id,label,B_t1\n";
        assert!(dataset_from_csv(text, legend2(), Path::new("f.csv")).is_err());
        let text = "polygon_id,label,B_t1,G_t1,B_t2\n";
        assert!(dataset_from_csv(text, legend2(), Path::new("f.csv")).is_err());
    }

    #[test]
    fn write_rejects_empty_and_writes_single_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let empty = tiny().filter(|_| false);
        assert!(dataset_write(&empty, &path).is_err());
        let one = tiny().filter(|s| s.polygon_id == "p1");
        dataset_write(&one, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        let back = dataset_read(&path, &legend_path_for(&path)).unwrap();
        assert_eq!(back, one);
    }

    #[test]
    fn legend_text_roundtrip() {
        let l = legend2();
        assert_eq!(l.to_text(), "wheat:#C8B400\ncorn:#007800\n");
        assert_eq!(ClassLegend::parse(&l.to_text(), Path::new("l")).unwrap(), l);
        assert!(ClassLegend::parse("a:#000000\na:#111111\n", Path::new("l")).is_err());
        assert!(ClassLegend::parse("a:#00000G\n", Path::new("l")).is_err());
    }

    #[test]
    fn flatten_definition_and_invalid_rejected() {
        let cal = Arc::new(AcquisitionCalendar::new(vec![0, 1]).unwrap());
        let s = MultivariateSeries::fully_valid(cal.clone(), 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(flatten(&s).unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
        let masked = MultivariateSeries::new(cal, 2, vec![1.0; 4], vec![true, false, true, true]).unwrap();
        assert!(flatten(&masked).is_err());
    }

    #[test]
    fn dataset_polygons_and_subsets() {
        let ds = tiny();
        let polys = ds.polygons();
        assert_eq!(polys["p2"].pixels, 2);
        assert_eq!(polys["p2"].label, 1);
        let sub = ds.subset(&["p2".to_string()].into_iter().collect());
        assert_eq!(sub.len(), 2);
        assert_eq!(ds.class_counts(), vec![1, 2]);
    }
}
