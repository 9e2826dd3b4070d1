//! Polygon-disjoint splitting, confusion matrices, overall accuracy, fold
//! aggregation and land-cover / disagreement map rendering.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::seed;
use crate::series::{ClassLegend, Dataset, PolygonInfo, Rgb, SplitAssignment};

/// Folds plus the warnings raised while building them.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitOutcome {
    pub folds: Vec<SplitAssignment>,
    pub warnings: Vec<String>,
}

fn polygons_by_class(dataset: &Dataset) -> BTreeMap<usize, Vec<(String, usize)>> {
    let mut by_class: BTreeMap<usize, Vec<(String, usize)>> = BTreeMap::new();
    for (id, PolygonInfo { label, pixels }) in dataset.polygons() {
        by_class.entry(label).or_default().push((id.to_string(), pixels));
    }
    by_class
}

/// Per class, shuffled polygons go to training while that moves the class's
/// training pixel count closer to `train_fraction` of its pixels; each class
/// with two or more polygons keeps at least one on each side.
pub fn polygon_split(dataset: &Dataset, train_fraction: f64, n_folds: usize, seed: u64) -> Result<SplitOutcome> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::InvalidInput(format!(
            "train fraction {train_fraction} not in [0, 1]"
        )));
    }
    if dataset.is_empty() {
        return Err(Error::InvalidInput("cannot split an empty dataset".into()));
    }
    let by_class = polygons_by_class(dataset);
    let mut warnings = Vec::new();
    for (label, polys) in &by_class {
        if polys.len() == 1 {
            warnings.push(format!(
                "class {} has a single polygon ({}); it is always assigned to training",
                dataset.legend().name(*label),
                polys[0].0
            ));
        }
    }
    let mut folds = Vec::with_capacity(n_folds);
    for fold in 0..n_folds {
        let mut rng = seed::stream(seed, "fold", fold as u64);
        let mut split = SplitAssignment {
            fold_id: fold,
            ..SplitAssignment::default()
        };
        for polys in by_class.values() {
            let mut polys = polys.clone();
            polys.shuffle(&mut rng);
            let total: usize = polys.iter().map(|p| p.1).sum();
            let target = train_fraction * total as f64;
            let mut in_train = vec![false; polys.len()];
            let mut train_px = 0usize;
            for (i, (_, px)) in polys.iter().enumerate() {
                let with = (train_px + px) as f64;
                if (with - target).abs() < (train_px as f64 - target).abs() {
                    in_train[i] = true;
                    train_px += px;
                }
            }
            if polys.len() >= 2 {
                if !in_train.contains(&true) {
                    in_train[0] = true;
                }
                if !in_train.contains(&false) {
                    let last = in_train.len() - 1;
                    in_train[last] = false;
                }
            } else {
                in_train[0] = true;
            }
            for ((id, _), t) in polys.into_iter().zip(in_train) {
                if t {
                    split.train_polygons.insert(id);
                } else {
                    split.test_polygons.insert(id);
                }
            }
        }
        folds.push(split);
    }
    Ok(SplitOutcome { folds, warnings })
}

/// Moves whole training polygons into validation, each move bringing the
/// validation pixel count closer to `fraction` of the training pixels. A class
/// never loses its last training polygon.
pub fn carve_validation(
    split: &SplitAssignment,
    dataset: &Dataset,
    fraction: f64,
    seed: u64,
) -> Result<SplitAssignment> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidInput(format!(
            "validation fraction {fraction} not in [0, 1)"
        )));
    }
    let info = dataset.polygons();
    let mut train: Vec<(&str, PolygonInfo)> = split
        .train_polygons
        .iter()
        .filter_map(|id| info.get(id.as_str()).map(|p| (id.as_str(), *p)))
        .collect();
    train.shuffle(&mut seed::stream(seed, "validation", split.fold_id as u64));
    let total: usize = train.iter().map(|(_, p)| p.pixels).sum();
    let target = fraction * total as f64;
    let mut remaining: BTreeMap<usize, usize> = BTreeMap::new();
    for (_, p) in &train {
        *remaining.entry(p.label).or_default() += 1;
    }
    let mut out = split.clone();
    let mut val_px = 0usize;
    for (id, p) in train {
        let closer = ((val_px + p.pixels) as f64 - target).abs() < (val_px as f64 - target).abs();
        if closer && remaining[&p.label] > 1 {
            out.train_polygons.remove(id);
            out.validation_polygons.insert(id.to_string());
            *remaining.get_mut(&p.label).expect("counted") -= 1;
            val_px += p.pixels;
        }
    }
    Ok(out)
}

/// Train, validation and test subsets of `dataset`.
pub fn split_datasets(dataset: &Dataset, split: &SplitAssignment) -> (Dataset, Dataset, Dataset) {
    (
        dataset.subset(&split.train_polygons),
        dataset.subset(&split.validation_polygons),
        dataset.subset(&split.test_polygons),
    )
}

/// `C x C` counts, rows are reference classes and columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<usize>,
}

impl ConfusionMatrix {
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, reference: usize, predicted: usize) -> usize {
        self.counts[reference * self.classes + predicted]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> usize {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    pub fn row_sums(&self) -> Vec<usize> {
        self.counts.chunks(self.classes).map(|r| r.iter().sum()).collect()
    }

    pub fn add(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// CSV with a header of predicted class names and one row per reference class.
    pub fn to_csv(&self, legend: &ClassLegend) -> String {
        let mut out = String::from("reference");
        for c in 0..self.classes {
            write!(out, ",{}", legend.name(c)).unwrap();
        }
        out.push('\n');
        for r in 0..self.classes {
            out.push_str(legend.name(r));
            for p in 0..self.classes {
                write!(out, ",{}", self.get(r, p)).unwrap();
            }
            out.push('\n');
        }
        out
    }
}

pub fn confusion(reference: &[usize], predicted: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if reference.len() != predicted.len() {
        return Err(Error::Shape(format!(
            "{} reference labels but {} predictions",
            reference.len(),
            predicted.len()
        )));
    }
    let mut counts = vec![0; classes * classes];
    for (&r, &p) in reference.iter().zip(predicted) {
        if r >= classes || p >= classes {
            return Err(Error::InvalidInput(format!("label out of range for {classes} classes")));
        }
        counts[r * classes + p] += 1;
    }
    Ok(ConfusionMatrix { classes, counts })
}

/// Trace over total; an empty matrix has accuracy 0.
pub fn overall_accuracy(cm: &ConfusionMatrix) -> f64 {
    match cm.total() {
        0 => 0.0,
        n => cm.trace() as f64 / n as f64,
    }
}

/// Accuracy over the samples whose reference class is in `classes`.
pub fn subset_accuracy(reference: &[usize], predicted: &[usize], classes: &[usize]) -> f64 {
    let (hit, n) = reference
        .iter()
        .zip(predicted)
        .filter(|(r, _)| classes.contains(r))
        .fold((0usize, 0usize), |(h, n), (r, p)| (h + usize::from(r == p), n + 1));
    if n == 0 {
        0.0
    } else {
        hit as f64 / n as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub fold_id: usize,
    pub confusion: ConfusionMatrix,
    pub overall_accuracy: f64,
    pub train_seconds: f64,
}

impl FoldResult {
    pub fn new(fold_id: usize, confusion: ConfusionMatrix, train_seconds: f64) -> Self {
        let overall_accuracy = overall_accuracy(&confusion);
        Self {
            fold_id,
            confusion,
            overall_accuracy,
            train_seconds,
        }
    }
}

/// Mean and population standard deviation. A single value has sd 0.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean overall accuracy and its population standard deviation.
pub fn aggregate_folds(results: &[FoldResult]) -> (f64, f64) {
    let oa: Vec<f64> = results.iter().map(|r| r.overall_accuracy).collect();
    mean_sd(&oa)
}

/// `fold,oa,seconds` rows sorted by fold.
pub fn folds_csv(results: &[FoldResult]) -> String {
    let mut sorted: Vec<&FoldResult> = results.iter().collect();
    sorted.sort_by_key(|r| r.fold_id);
    let mut out = String::from("fold,oa,seconds\n");
    for r in sorted {
        writeln!(out, "{},{},{}", r.fold_id, r.overall_accuracy, r.train_seconds).unwrap();
    }
    out
}

fn check_grid(labels: &[usize], h: usize, w: usize, legend: &ClassLegend) -> Result<()> {
    if h == 0 || w == 0 || labels.len() != h * w {
        return Err(Error::Shape(format!(
            "{} labels do not fill a {h}x{w} grid",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= legend.len()) {
        return Err(Error::InvalidInput(format!("label {bad} has no legend color")));
    }
    Ok(())
}

fn ppm(h: usize, w: usize, pixels: impl Iterator<Item = Rgb>) -> Vec<u8> {
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for Rgb(r, g, b) in pixels {
        out.extend_from_slice(&[r, g, b]);
    }
    out
}

/// Binary PPM of row-major labels in legend colors.
pub fn render_map(labels: &[usize], h: usize, w: usize, legend: &ClassLegend) -> Result<Vec<u8>> {
    check_grid(labels, h, w, legend)?;
    Ok(ppm(h, w, labels.iter().map(|&l| legend.color(l))))
}

pub const DISAGREEMENT: Rgb = Rgb(255, 0, 0);

/// Pure red where `a` and `b` differ, the class color of `a` at half
/// brightness elsewhere. Returns the image and the number of red pixels.
pub fn disagreement_map(
    a: &[usize],
    b: &[usize],
    h: usize,
    w: usize,
    legend: &ClassLegend,
) -> Result<(Vec<u8>, usize)> {
    check_grid(a, h, w, legend)?;
    check_grid(b, h, w, legend)?;
    let differing = a.iter().zip(b).filter(|(x, y)| x != y).count();
    let pixels = a.iter().zip(b).map(|(&x, &y)| {
        if x != y {
            DISAGREEMENT
        } else {
            let Rgb(r, g, bl) = legend.color(x);
            Rgb(r / 2, g / 2, bl / 2)
        }
    });
    Ok((ppm(h, w, pixels), differing))
}

/// Decoded binary PPM.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PpmImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<Rgb>,
}

impl PpmImage {
    pub fn count(&self, color: Rgb) -> usize {
        self.pixels.iter().filter(|&&p| p == color).count()
    }
}

/// Reads a `P6` image with maxval 255 (no comments).
pub fn read_ppm(bytes: &[u8]) -> Result<PpmImage> {
    let bad = |m: &str| Error::Format(format!("PPM: {m}"));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not text"))?);
    }
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(bad("expected P6 with maxval 255"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad dimension"));
    let (width, height) = (num(fields[1])?, num(fields[2])?);
    let data = &bytes[pos + 1..];
    if data.len() != width * height * 3 {
        return Err(bad("pixel data does not match dimensions"));
    }
    let pixels = data.chunks_exact(3).map(|c| Rgb(c[0], c[1], c[2])).collect();
    Ok(PpmImage { width, height, pixels })
}

/// Polygons whose identifiers appear in more than one of the three sets.
pub fn overlapping_polygons(split: &SplitAssignment) -> BTreeSet<String> {
    let sets = [&split.train_polygons, &split.validation_polygons, &split.test_polygons];
    let mut out = BTreeSet::new();
    for i in 0..3 {
        for j in i + 1..3 {
            out.extend(sets[i].intersection(sets[j]).cloned());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_examples() {
        let cm = confusion(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!(overall_accuracy(&cm), 1.0);
        assert_eq!(cm.trace(), 3);
        let cm = confusion(&[0, 0, 1, 1], &[0, 0, 0, 0], 2).unwrap();
        assert_eq!(overall_accuracy(&cm), 0.5);
        assert_eq!(cm.row_sums(), vec![2, 2]);
        assert!(confusion(&[0], &[], 2).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let (m, s) = mean_sd(&[0.9, 1.0]);
        assert!((m - 0.95).abs() < 1e-12 && (s - 0.05).abs() < 1e-12);
        assert_eq!(mean_sd(&[0.7]), (0.7, 0.0));
        assert!(mean_sd(&[0.8, 0.8, 0.8]).1 < 1e-15);
    }

    #[test]
    fn ppm_roundtrip_and_disagreement() {
        let legend = ClassLegend::new(vec![("a".into(), Rgb(10, 200, 30)), ("b".into(), Rgb(255, 0, 0))]).unwrap();
        let a = vec![0, 1, 1, 0, 0, 1];
        let img = read_ppm(&render_map(&a, 2, 3, &legend).unwrap()).unwrap();
        assert_eq!((img.width, img.height), (3, 2));
        assert_eq!(img.pixels[1], Rgb(255, 0, 0));
        let (same, n) = disagreement_map(&a, &a, 2, 3, &legend).unwrap();
        assert_eq!(n, 0);
        assert_eq!(read_ppm(&same).unwrap().count(DISAGREEMENT), 0);
        let mut b = a.clone();
        b[4] = 1;
        let (diff, n) = disagreement_map(&a, &b, 2, 3, &legend).unwrap();
        assert_eq!(n, 1);
        assert_eq!(read_ppm(&diff).unwrap().count(DISAGREEMENT), 1);
        assert!(render_map(&a, 2, 2, &legend).is_err());
    }
}
