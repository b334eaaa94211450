//! Labeled datasets: ingestion, class balancing, stratified splits, and a
//! synthetic Gaussian-blob generator.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simplex::build_target_matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Full,
    Train,
    Val,
    Test,
}

/// Features (one row per example) with dense integer labels in `0..d`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: DMatrix<f64>,
    labels: Vec<usize>,
    classes: usize,
    split: SplitTag,
    provenance: String,
    /// Original label value for each dense label.
    label_map: Vec<i64>,
}

impl LabeledDataset {
    pub fn new(
        features: DMatrix<f64>,
        labels: Vec<usize>,
        classes: usize,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if classes < 2 {
            return Err(Error::InvalidClassCount(classes));
        }
        if features.nrows() != labels.len() {
            return Err(Error::shape("label count", features.nrows(), labels.len()));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::data(format!("label {y} is not below class count {classes}")));
        }
        if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
            let row = pos % features.nrows().max(1);
            return Err(Error::data(format!("non-finite feature in row {row}")));
        }
        Ok(LabeledDataset {
            features,
            labels,
            classes,
            split: SplitTag::Full,
            provenance: provenance.into(),
            label_map: (0..classes as i64).collect(),
        })
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn split(&self) -> SplitTag {
        self.split
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn label_map(&self) -> &[i64] {
        &self.label_map
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Every class present with the same count.
    pub fn is_balanced(&self) -> bool {
        let counts = self.class_counts();
        counts[0] > 0 && counts.iter().all(|&c| c == counts[0])
    }

    pub fn subset(&self, rows: &[usize]) -> LabeledDataset {
        LabeledDataset {
            features: DMatrix::from_fn(rows.len(), self.feature_dim(), |i, j| {
                self.features[(rows[i], j)]
            }),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            classes: self.classes,
            split: self.split,
            provenance: self.provenance.clone(),
            label_map: self.label_map.clone(),
        }
    }

    fn with_split(mut self, split: SplitTag) -> Self {
        self.split = split;
        self
    }

    fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.classes];
        for (i, &y) in self.labels.iter().enumerate() {
            by_class[y].push(i);
        }
        by_class
    }
}

/// Reads a CSV with a header row; every column other than `label_column` is a
/// feature. Labels are remapped to `0..d` in ascending order of their values.
pub fn load_csv(path: impl AsRef<Path>, label_column: &str) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let file = fs::File::open(path)?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| Error::data(format!("cannot read header: {e}")))?
        .clone();
    let label_idx = headers
        .iter()
        .position(|h| h.trim() == label_column)
        .ok_or_else(|| Error::data(format!("label column `{label_column}` not in header")))?;
    let width = headers.len() - 1;
    let mut values = Vec::new();
    let mut raw_labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Data {
            line: e.position().map(|p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line());
        let bad = |message: String| Error::Data { line, message };
        if record.len() != headers.len() {
            return Err(bad(format!("expected {} fields, found {}", headers.len(), record.len())));
        }
        for (j, field) in record.iter().enumerate() {
            let field = field.trim();
            if j == label_idx {
                raw_labels.push(parse_label(field).map_err(bad)?);
            } else {
                let v: f64 = field
                    .parse()
                    .map_err(|_| bad(format!("cannot parse `{field}` as a number")))?;
                if !v.is_finite() {
                    return Err(bad(format!("non-finite value `{field}`")));
                }
                values.push(v);
            }
        }
    }
    let n = raw_labels.len();
    if n == 0 {
        return Err(Error::EmptyInput("csv rows"));
    }
    let distinct: Vec<i64> = {
        let mut v = raw_labels.clone();
        v.sort_unstable();
        v.dedup();
        v
    };
    let index: BTreeMap<i64, usize> = distinct.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    let labels = raw_labels.iter().map(|l| index[l]).collect();
    let features = DMatrix::from_row_slice(n, width, &values);
    let classes = distinct.len();
    if classes < 2 {
        return Err(Error::InvalidClassCount(classes));
    }
    let mut ds = LabeledDataset::new(features, labels, classes, format!("csv:{}", path.display()))?;
    ds.label_map = distinct;
    Ok(ds)
}

fn parse_label(field: &str) -> std::result::Result<i64, String> {
    if let Ok(v) = field.parse::<i64>() {
        return Ok(v);
    }
    match field.parse::<f64>() {
        Ok(v) if v.is_finite() && v.fract() == 0.0 && v.abs() < 9.0e15 => Ok(v as i64),
        _ => Err(format!("label `{field}` is not an integer")),
    }
}

/// Writes the dataset in the format [`load_csv`] reads; floats use the
/// shortest representation that round-trips exactly.
pub fn save_csv(ds: &LabeledDataset, path: impl AsRef<Path>, label_column: &str) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::data(e.to_string()))?;
    let mut header: Vec<String> = (0..ds.feature_dim()).map(|j| format!("x{j}")).collect();
    header.push(label_column.to_string());
    writer.write_record(&header).map_err(|e| Error::data(e.to_string()))?;
    for i in 0..ds.len() {
        let mut row: Vec<String> = (0..ds.feature_dim())
            .map(|j| format!("{:?}", ds.features[(i, j)]))
            .collect();
        row.push(ds.label_map[ds.labels[i]].to_string());
        writer.write_record(&row).map_err(|e| Error::data(e.to_string()))?;
    }
    writer.flush()?;
    Ok(())
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::data("truncated IDX header"))
}

/// Parses IDX image/label buffers; pixels are scaled to `[0, 1]`.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<LabeledDataset> {
    let magic = read_u32(images, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::data(format!("image file magic {magic:#010x}, expected 0x00000803")));
    }
    let magic = read_u32(labels, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::data(format!("label file magic {magic:#010x}, expected 0x00000801")));
    }
    let n = read_u32(images, 4)? as usize;
    let rows = read_u32(images, 8)? as usize;
    let cols = read_u32(images, 12)? as usize;
    let n_labels = read_u32(labels, 4)? as usize;
    if n != n_labels {
        return Err(Error::data(format!("{n} images but {n_labels} labels")));
    }
    let p = rows * cols;
    let pixels = images
        .get(16..16 + n * p)
        .ok_or_else(|| Error::data("image payload shorter than header claims"))?;
    let raw = labels
        .get(8..8 + n)
        .ok_or_else(|| Error::data("label payload shorter than header claims"))?;
    let features = DMatrix::from_fn(n, p, |i, j| pixels[i * p + j] as f64 / 255.0);
    let mut distinct: Vec<u8> = raw.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    let dense: Vec<usize> = raw
        .iter()
        .map(|l| distinct.binary_search(l).expect("present"))
        .collect();
    let mut ds = LabeledDataset::new(features, dense, distinct.len(), "idx")?;
    ds.label_map = distinct.iter().map(|&l| l as i64).collect();
    Ok(ds)
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let images = fs::read(images_path.as_ref())?;
    let labels = fs::read(labels_path.as_ref())?;
    let mut ds = parse_idx(&images, &labels)?;
    ds.provenance = format!("idx:{}", images_path.as_ref().display());
    Ok(ds)
}

/// Classes smaller than this trigger a warning when balancing.
const LOW_DATA_WARNING: usize = 10;

/// Undersamples every class to the smallest class count.
pub fn balance_classes(ds: &LabeledDataset, seed: u64) -> Result<LabeledDataset> {
    let counts = ds.class_counts();
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::data(format!("class {k} has no examples")));
    }
    let min = *counts.iter().min().expect("classes >= 2");
    if min < LOW_DATA_WARNING {
        log::warn!("balancing down to {min} examples per class");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::with_capacity(min * ds.classes);
    for mut idx in ds.indices_by_class() {
        idx.shuffle(&mut rng);
        keep.extend_from_slice(&idx[..min]);
    }
    keep.sort_unstable();
    Ok(ds.subset(&keep))
}

/// Gaussian blobs centered at the simplex class targets, embedded in the first
/// `d - 1` of `dim` coordinates.
pub fn synth_blobs(d: usize, per_class: usize, dim: usize, spread: f64, seed: u64) -> Result<LabeledDataset> {
    if d < 2 {
        return Err(Error::InvalidClassCount(d));
    }
    if per_class < 1 {
        return Err(Error::InvalidParameter("per_class must be >= 1".into()));
    }
    if dim < d - 1 {
        return Err(Error::InvalidParameter(format!(
            "feature dimension {dim} cannot hold {} target coordinates",
            d - 1
        )));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::InvalidParameter(format!("spread must be >= 0, got {spread}")));
    }
    let targets = build_target_matrix(d)?.targets();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = d * per_class;
    let mut features = DMatrix::zeros(n, dim);
    let mut labels = Vec::with_capacity(n);
    for k in 0..d {
        for r in 0..per_class {
            let i = k * per_class + r;
            for j in 0..dim {
                let center = if j < d - 1 { targets[(j, k)] } else { 0.0 };
                let noise: f64 = StandardNormal.sample(&mut rng);
                features[(i, j)] = center + spread * noise;
            }
            labels.push(k);
        }
    }
    LabeledDataset::new(
        features,
        labels,
        d,
        format!("synth_blobs(d={d},per_class={per_class},dim={dim},spread={spread},seed={seed})"),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
}

/// Stratified train/val/test split; every class is split separately.
pub fn split(ds: &LabeledDataset, fractions: [f64; 3], seed: u64) -> Result<Splits> {
    if fractions.iter().any(|f| f.is_nan() || *f <= 0.0) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParameter(format!(
            "split fractions must be positive and sum to 1, got {fractions:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<usize>; 3] = Default::default();
    for (k, mut idx) in ds.indices_by_class().into_iter().enumerate() {
        idx.shuffle(&mut rng);
        let n = idx.len();
        let n_train = (n as f64 * fractions[0]).round() as usize;
        let n_val = ((n as f64 * fractions[1]).round() as usize).min(n.saturating_sub(n_train));
        let n_test = n - n_train - n_val;
        for (name, count) in [("train", n_train), ("val", n_val), ("test", n_test)] {
            if count == 0 {
                return Err(Error::data(format!("{name} split receives no examples of class {k}")));
            }
        }
        parts[0].extend_from_slice(&idx[..n_train]);
        parts[1].extend_from_slice(&idx[n_train..n_train + n_val]);
        parts[2].extend_from_slice(&idx[n_train + n_val..]);
    }
    for p in parts.iter_mut() {
        p.sort_unstable();
    }
    Ok(Splits {
        train: ds.subset(&parts[0]).with_split(SplitTag::Train),
        val: ds.subset(&parts[1]).with_split(SplitTag::Val),
        test: ds.subset(&parts[2]).with_split(SplitTag::Test),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// `{source, d, N, splits, seed}` summary written next to outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub source: String,
    pub d: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub splits: SplitSizes,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn from_splits(splits: &Splits, seed: u64) -> Self {
        DatasetManifest {
            source: splits.train.provenance.clone(),
            d: splits.train.classes,
            n: splits.train.len() + splits.val.len() + splits.test.len(),
            splits: SplitSizes {
                train: splits.train.len(),
                val: splits.val.len(),
                test: splits.test.len(),
            },
            seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn csv_basic_load() {
        let f = write_tmp("a,b,label\n1.0,2.0,0\n3.5,-1,1\n0,0,2\n");
        let ds = load_csv(f.path(), "label").unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.classes(), 3);
        assert_eq!(ds.features()[(1, 0)], 3.5);
    }

    #[test]
    fn csv_label_remap() {
        let f = write_tmp("x,y\n0.1,2\n0.2,5\n0.3,5\n");
        let ds = load_csv(f.path(), "y").unwrap();
        assert_eq!(ds.labels(), &[0, 1, 1]);
        assert_eq!(ds.classes(), 2);
        assert_eq!(ds.label_map(), &[2, 5]);
    }

    #[test]
    fn csv_nan_reports_line() {
        let f = write_tmp("x,y\n0.1,0\nNaN,1\n");
        match load_csv(f.path(), "y") {
            Err(Error::Data { line: Some(3), .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_errors() {
        assert!(matches!(load_csv("/nonexistent/file.csv", "y"), Err(Error::Io(_))));
        let f = write_tmp("x,y\n0.1,0.5\n0.2,1\n");
        assert!(matches!(load_csv(f.path(), "y"), Err(Error::Data { line: Some(2), .. })));
        let f = write_tmp("x,y\n0.1,0\nabc,1\n");
        assert!(matches!(load_csv(f.path(), "y"), Err(Error::Data { line: Some(3), .. })));
    }

    fn idx_bytes(n: u32, labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
        let mut img = vec![0, 0, 8, 3];
        for v in [n, 28, 28] {
            img.extend_from_slice(&v.to_be_bytes());
        }
        for i in 0..n as usize * 784 {
            img.push(if i == 0 { 255 } else { (i % 7) as u8 });
        }
        let mut lab = vec![0, 0, 8, 1];
        lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        lab.extend_from_slice(labels);
        (img, lab)
    }

    #[test]
    fn idx_parsing() {
        let (img, lab) = idx_bytes(2, &[0, 1]);
        let ds = parse_idx(&img, &lab).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.feature_dim(), 784);
        assert_eq!(ds.features()[(0, 0)], 1.0);
        assert_eq!(ds.features()[(0, 1)], 1.0 / 255.0);
    }

    #[test]
    fn idx_errors() {
        let (img, lab) = idx_bytes(2, &[0, 1, 1]);
        assert!(parse_idx(&img, &lab).is_err());
        let (mut img, lab) = idx_bytes(2, &[0, 1]);
        img[3] = 1;
        assert!(parse_idx(&img, &lab).is_err());
    }

    #[test]
    fn balancing_to_minimum() {
        let labels = vec![0, 0, 0, 0, 0, 1, 1, 1, 2, 2, 2];
        let ds = LabeledDataset::new(DMatrix::from_fn(11, 1, |i, _| i as f64), labels, 3, "t").unwrap();
        let b = balance_classes(&ds, 1).unwrap();
        assert_eq!(b.class_counts(), vec![3, 3, 3]);
        assert!(b.is_balanced());

        let skew = LabeledDataset::new(
            DMatrix::from_fn(101, 1, |i, _| i as f64),
            (0..101).map(|i| usize::from(i == 100)).collect(),
            2,
            "t",
        )
        .unwrap();
        assert_eq!(balance_classes(&skew, 0).unwrap().class_counts(), vec![1, 1]);

        let balanced = synth_blobs(3, 5, 2, 1.0, 4).unwrap();
        assert_eq!(balance_classes(&balanced, 9).unwrap(), balanced);

        let missing = LabeledDataset::new(DMatrix::zeros(2, 1), vec![0, 0], 2, "t").unwrap();
        assert!(balance_classes(&missing, 0).is_err());
    }

    #[test]
    fn blobs_basic_properties() {
        let ds = synth_blobs(3, 100, 4, 0.5, 1).unwrap();
        assert_eq!(ds.len(), 300);
        assert!(ds.is_balanced());
        let exact = synth_blobs(4, 3, 5, 0.0, 2).unwrap();
        let t = build_target_matrix(4).unwrap();
        for i in 0..exact.len() {
            let target = t.class_target(exact.labels()[i]).unwrap();
            for j in 0..3 {
                assert_eq!(exact.features()[(i, j)], target[j]);
            }
            assert_eq!(exact.features()[(i, 4)], 0.0);
        }
        assert!(synth_blobs(1, 3, 2, 1.0, 0).is_err());
        assert!(synth_blobs(3, 0, 2, 1.0, 0).is_err());
    }

    #[test]
    fn wide_spread_blobs_have_low_bayes_accuracy() {
        // Bayes rule for equal-variance isotropic blobs: nearest center.
        let d = 3;
        let t = build_target_matrix(d).unwrap().targets();
        let dist = (t.column(0) - t.column(1)).norm();
        let ds = synth_blobs(d, 2000, 2, 3.0 * dist, 5).unwrap();
        let correct = (0..ds.len())
            .filter(|&i| {
                let x = ds.features().row(i).transpose();
                let best = (0..d)
                    .min_by(|&a, &b| {
                        let da = (&x - t.column(a)).norm();
                        let db = (&x - t.column(b)).norm();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                best == ds.labels()[i]
            })
            .count();
        let acc = correct as f64 / ds.len() as f64;
        assert!(acc < 0.6, "bayes accuracy {acc}");
    }

    #[test]
    fn stratified_split_sizes() {
        let ds = synth_blobs(3, 100, 2, 1.0, 0).unwrap();
        let s = split(&ds, [0.8, 0.1, 0.1], 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (240, 30, 30));
        assert!(s.train.is_balanced() && s.val.is_balanced() && s.test.is_balanced());
        assert_eq!(s.test.split(), SplitTag::Test);
        let again = split(&ds, [0.8, 0.1, 0.1], 3).unwrap();
        assert_eq!(s, again);
        assert!(split(&ds, [1.0, 0.0, 0.0], 3).is_err());
        let tiny = synth_blobs(2, 3, 1, 1.0, 0).unwrap();
        assert!(split(&tiny, [0.8, 0.1, 0.1], 0).is_err());
    }

    #[test]
    fn split_ratios_within_one_when_indivisible() {
        let ds = synth_blobs(3, 37, 2, 1.0, 0).unwrap();
        let s = split(&ds, [0.5, 0.25, 0.25], 1).unwrap();
        for (part, frac) in [(&s.train, 0.5), (&s.val, 0.25), (&s.test, 0.25)] {
            for c in part.class_counts() {
                assert!((c as f64 - 37.0 * frac).abs() <= 1.0);
            }
        }
    }

    #[test]
    fn manifest_serializes() {
        let ds = synth_blobs(3, 10, 2, 1.0, 0).unwrap();
        let s = split(&ds, [0.6, 0.2, 0.2], 1).unwrap();
        let m = DatasetManifest::from_splits(&s, 1);
        let json = serde_json::to_string(&m).unwrap();
        assert!(json.contains("\"N\":30"));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn csv_round_trip_is_bit_exact(
                vals in proptest::collection::vec(proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO, 6..30),
                seed in 0u64..1000,
            ) {
                let n = vals.len() / 3;
                let features = DMatrix::from_row_slice(n, 3, &vals[..n * 3]);
                let labels: Vec<usize> = (0..n).map(|i| (i + seed as usize) % 2).collect();
                let ds = LabeledDataset::new(features, labels, 2, "p").unwrap();
                let f = tempfile::NamedTempFile::new().unwrap();
                save_csv(&ds, f.path(), "label").unwrap();
                let back = load_csv(f.path(), "label").unwrap();
                prop_assert_eq!(back.labels(), ds.labels());
                for (a, b) in back.features().iter().zip(ds.features().iter()) {
                    prop_assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
    }
}
