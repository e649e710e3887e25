//! Labels, samples, manifests and the labeled/unlabeled partition.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::seeding::{derived_rng, STREAM_PARTITION};

/// Tolerance for sums and for the certainty test.
pub const LABEL_TOL: f64 = 1e-6;

/// Probability vector over the ground-truth classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelDistribution {
    probs: Vec<f64>,
}

impl LabelDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::invalid("label distribution needs at least one class"));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0 + LABEL_TOL) {
            return Err(Error::invalid(format!("label components must lie in [0,1]: {probs:?}")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > LABEL_TOL {
            return Err(Error::invalid(format!("label distribution sums to {sum}, not 1")));
        }
        Ok(LabelDistribution { probs })
    }

    pub fn one_hot(class: usize, k_gt: usize) -> Self {
        let mut probs = vec![0.0; k_gt];
        probs[class] = 1.0;
        LabelDistribution { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn k_gt(&self) -> usize {
        self.probs.len()
    }

    pub fn is_certain(&self) -> bool {
        is_certain(self)
    }

    pub fn hard_label(&self) -> usize {
        hard_label(self)
    }
}

/// Vote counts of all annotators for one image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotationSet {
    pub votes: Vec<u64>,
}

/// Mean over annotations: `votes / sum(votes)`.
pub fn aggregate_annotations(votes: &AnnotationSet) -> Result<LabelDistribution> {
    let total: u64 = votes.votes.iter().sum();
    if total == 0 {
        return Err(Error::invalid("annotation set has no votes"));
    }
    let probs = votes.votes.iter().map(|&v| v as f64 / total as f64).collect();
    LabelDistribution::new(probs)
}

pub fn is_certain(l: &LabelDistribution) -> bool {
    // the slack absorbs rounding in `1 - p` right at the tolerance edge
    l.probs.iter().any(|&p| (p - 1.0).abs() <= LABEL_TOL + 1e-12)
}

/// Most likely class; ties go to the lowest index.
pub fn hard_label(l: &LabelDistribution) -> usize {
    crate::network::argmax(&l.probs)
}

/// Shared counter of label-value reads. Attach one to samples to prove a
/// phase never looks at labels.
#[derive(Debug, Clone, Default)]
pub struct LabelAudit(Arc<AtomicUsize>);

impl LabelAudit {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reads(&self) -> usize {
        self.0.load(Ordering::SeqCst)
    }

    fn record(&self) {
        self.0.fetch_add(1, Ordering::SeqCst);
    }
}

/// Split requested for a sample by its manifest row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitHint {
    Train,
    Val,
    Unlabeled,
    Auto,
}

impl std::str::FromStr for SplitHint {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "train" => Ok(SplitHint::Train),
            "val" => Ok(SplitHint::Val),
            "unlabeled" => Ok(SplitHint::Unlabeled),
            "auto" => Ok(SplitHint::Auto),
            other => Err(format!("unknown split `{other}` (expected train, val, unlabeled or auto)")),
        }
    }
}

impl SplitHint {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitHint::Train => "train",
            SplitHint::Val => "val",
            SplitHint::Unlabeled => "unlabeled",
            SplitHint::Auto => "auto",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    /// Identity of the sample, the manifest path for on-disk data.
    pub id: String,
    pub image: Image,
    label: Option<LabelDistribution>,
    certain: bool,
    pub split: SplitHint,
    audit: Option<LabelAudit>,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Image, label: Option<LabelDistribution>) -> Self {
        let certain = label.as_ref().is_some_and(is_certain);
        Sample {
            id: id.into(),
            image,
            label,
            certain,
            split: SplitHint::Train,
            audit: None,
        }
    }

    pub fn with_split(mut self, split: SplitHint) -> Self {
        self.split = split;
        self
    }

    pub fn certain(&self) -> bool {
        self.certain
    }

    pub fn has_label(&self) -> bool {
        self.label.is_some()
    }

    /// Label value; every call is counted by an attached audit.
    pub fn label(&self) -> Option<&LabelDistribution> {
        if let Some(a) = &self.audit {
            a.record();
        }
        self.label.as_ref()
    }

    pub fn hard_label(&self) -> Option<usize> {
        self.label().map(hard_label)
    }

    pub fn attach_audit(&mut self, audit: &LabelAudit) {
        self.audit = Some(audit.clone());
    }
}

#[derive(Debug, Clone, Default)]
pub struct DatasetSplit {
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
    pub validation: Vec<Sample>,
}

impl DatasetSplit {
    pub fn attach_audit(&mut self, audit: &LabelAudit) {
        for s in self.all_mut() {
            s.attach_audit(audit);
        }
    }

    fn all_mut(&mut self) -> impl Iterator<Item = &mut Sample> {
        self.labeled
            .iter_mut()
            .chain(self.unlabeled.iter_mut())
            .chain(self.validation.iter_mut())
    }

    pub fn len(&self) -> usize {
        self.labeled.len() + self.unlabeled.len() + self.validation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionConfig {
    /// Share of `auto` certain samples moved to validation, per class.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig {
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

/// Certain samples go to the labeled pool, fuzzy and unlabeled ones to the
/// unlabeled pool. Explicit `val`/`unlabeled` hints win; `auto` certain
/// samples are split into validation by a seeded stratified fraction.
pub fn partition_dataset(samples: Vec<Sample>, cfg: &PartitionConfig) -> Result<DatasetSplit> {
    if !(0.0..1.0).contains(&cfg.val_fraction) {
        return Err(Error::config("val_fraction", "must lie in [0, 1)"));
    }
    let mut split = DatasetSplit::default();
    let mut auto_by_class: BTreeMap<usize, Vec<Sample>> = BTreeMap::new();
    for s in samples {
        match s.split {
            SplitHint::Val => split.validation.push(s),
            SplitHint::Unlabeled => split.unlabeled.push(s),
            SplitHint::Train if s.certain => split.labeled.push(s),
            SplitHint::Auto if s.certain => {
                let class = s.label.as_ref().map(hard_label).expect("certain implies label");
                auto_by_class.entry(class).or_default().push(s);
            }
            SplitHint::Train | SplitHint::Auto => split.unlabeled.push(s),
        }
    }
    for (class, mut group) in auto_by_class {
        let mut rng = derived_rng(cfg.seed, STREAM_PARTITION, class as u64);
        group.shuffle(&mut rng);
        let n_val = (group.len() as f64 * cfg.val_fraction).round() as usize;
        let rest = group.split_off(n_val);
        split.validation.extend(group);
        split.labeled.extend(rest);
    }
    if split.labeled.is_empty() {
        return Err(Error::config(
            "labeled pool",
            "no certain samples left for the labeled pool; training is impossible",
        ));
    }
    Ok(split)
}

/// One parsed manifest row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub path: String,
    pub split: SplitHint,
    pub votes: Vec<u64>,
}

/// Writes a manifest with header `path,split,vote_0..vote_{k-1}`.
pub fn write_manifest(path: &Path, k_gt: usize, rows: &[ManifestRow]) -> Result<()> {
    let io = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let mut header = vec!["path".to_string(), "split".to_string()];
    header.extend((0..k_gt).map(|c| format!("vote_{c}")));
    w.write_record(&header).map_err(io)?;
    for row in rows {
        if row.votes.len() != k_gt {
            return Err(Error::invalid(format!("row `{}` has {} votes, expected {k_gt}", row.path, row.votes.len())));
        }
        let mut rec = vec![row.path.clone(), row.split.as_str().to_string()];
        rec.extend(row.votes.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parses a manifest; returns the class count and the rows. Errors name the
/// offending line of the file (the header is line 1).
pub fn read_manifest(path: &Path) -> Result<(usize, Vec<ManifestRow>)> {
    let row_err = |row: usize, message: String| Error::ManifestRow {
        path: path.to_path_buf(),
        row,
        message,
    };
    let mut r = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Data(format!("{}: {other:?}", path.display())),
        })?;
    let header = r
        .headers()
        .map_err(|e| row_err(1, format!("unreadable header: {e}")))?
        .clone();
    let k_gt = header.len().saturating_sub(2);
    let expected: Vec<String> = ["path".to_string(), "split".to_string()]
        .into_iter()
        .chain((0..k_gt).map(|c| format!("vote_{c}")))
        .collect();
    if k_gt == 0 || header.iter().map(str::trim).ne(expected.iter().map(String::as_str)) {
        return Err(row_err(
            1,
            format!("header must be `path,split,vote_0,...`, found `{}`", header.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| row_err(line, format!("malformed row: {e}")))?;
        if rec.len() != k_gt + 2 {
            return Err(row_err(
                line,
                format!("expected {} vote columns, found {}", k_gt, rec.len().saturating_sub(2)),
            ));
        }
        let path_field = rec[0].trim().to_string();
        if path_field.is_empty() {
            return Err(row_err(line, "empty path".into()));
        }
        let split: SplitHint = rec[1].parse().map_err(|e: String| row_err(line, e))?;
        let votes = rec
            .iter()
            .skip(2)
            .map(|v| v.trim().parse::<u64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| row_err(line, format!("vote counts must be non-negative integers: {e}")))?;
        if !seen.insert(path_field.clone()) {
            return Err(row_err(line, format!("duplicate path `{path_field}`")));
        }
        rows.push(ManifestRow {
            path: path_field,
            split,
            votes,
        });
    }
    Ok((k_gt, rows))
}

/// Loads the images of every manifest row. Rows in the `unlabeled` split may
/// carry all-zero votes, meaning no label at all.
pub fn read_samples(dir: &Path, manifest: &Path) -> Result<(usize, Vec<Sample>)> {
    let (k_gt, rows) = read_manifest(manifest)?;
    let mut samples = Vec::with_capacity(rows.len());
    let mut dims = None;
    for (i, row) in rows.into_iter().enumerate() {
        let line = i + 2;
        let row_err = |message: String| Error::ManifestRow {
            path: manifest.to_path_buf(),
            row: line,
            message,
        };
        let label = if row.votes.iter().all(|&v| v == 0) {
            if row.split != SplitHint::Unlabeled {
                return Err(row_err("all-zero votes are only allowed in the unlabeled split".into()));
            }
            None
        } else {
            Some(aggregate_annotations(&AnnotationSet { votes: row.votes }).map_err(|e| row_err(e.to_string()))?)
        };
        let image_path: PathBuf = dir.join(&row.path);
        if !image_path.is_file() {
            return Err(row_err(format!("missing image file {}", image_path.display())));
        }
        let image = Image::load_png(&image_path).map_err(|e| row_err(e.to_string()))?;
        match dims {
            None => dims = Some(image.dims()),
            Some(d) if d != image.dims() => {
                return Err(row_err(format!(
                    "image shape {:?} differs from earlier rows {:?}",
                    image.dims(),
                    d
                )))
            }
            _ => {}
        }
        samples.push(Sample::new(row.path, image, label).with_split(row.split));
    }
    Ok((k_gt, samples))
}

/// Reads a manifest and partitions it.
pub fn load_manifest(dir: &Path, manifest: &Path, cfg: &PartitionConfig) -> Result<(usize, DatasetSplit)> {
    let (k_gt, samples) = read_samples(dir, manifest)?;
    Ok((k_gt, partition_dataset(samples, cfg)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn votes(v: &[u64]) -> AnnotationSet {
        AnnotationSet { votes: v.to_vec() }
    }

    fn sample(id: &str, probs: &[f64]) -> Sample {
        Sample::new(id, Image::zeros(1, 2, 2), Some(LabelDistribution::new(probs.to_vec()).unwrap()))
    }

    #[test]
    fn aggregation_examples() {
        assert_eq!(aggregate_annotations(&votes(&[4, 0, 0])).unwrap().probs(), &[1.0, 0.0, 0.0]);
        assert_eq!(aggregate_annotations(&votes(&[2, 2, 0])).unwrap().probs(), &[0.5, 0.5, 0.0]);
        assert_eq!(aggregate_annotations(&votes(&[3, 1, 0])).unwrap().probs(), &[0.75, 0.25, 0.0]);
        assert!(aggregate_annotations(&votes(&[0, 0, 0])).is_err());
    }

    #[test]
    fn certainty_and_hard_label() {
        let l = |p: &[f64]| LabelDistribution::new(p.to_vec()).unwrap();
        assert!(l(&[1.0, 0.0, 0.0]).is_certain());
        assert!(!l(&[0.5, 0.5, 0.0]).is_certain());
        assert!(l(&[0.999999, 0.000001, 0.0]).is_certain());
        assert_eq!(l(&[0.1, 0.7, 0.2]).hard_label(), 1);
        assert_eq!(l(&[0.5, 0.5, 0.0]).hard_label(), 0);
        assert_eq!(l(&[0.0, 0.0, 1.0]).hard_label(), 2);
    }

    #[test]
    fn invalid_distributions_rejected() {
        assert!(LabelDistribution::new(vec![0.5, 0.6]).is_err());
        assert!(LabelDistribution::new(vec![-0.1, 1.1]).is_err());
        assert!(LabelDistribution::new(vec![]).is_err());
    }

    #[test]
    fn partition_examples() {
        let mut s: Vec<Sample> = (0..10).map(|i| sample(&format!("c{i}"), &[1.0, 0.0])).collect();
        s.extend((0..5).map(|i| sample(&format!("f{i}"), &[0.5, 0.5])));
        let split = partition_dataset(s, &PartitionConfig::default()).unwrap();
        assert_eq!((split.labeled.len(), split.unlabeled.len()), (10, 5));

        let none: Vec<Sample> = (0..3).map(|i| sample(&format!("f{i}"), &[0.5, 0.5])).collect();
        assert!(matches!(
            partition_dataset(none, &PartitionConfig::default()),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn synce_sized_partition() {
        let mut s: Vec<Sample> = (0..1800).map(|i| sample(&format!("c{i}"), &[0.0, 1.0])).collect();
        s.extend((0..1000).map(|i| sample(&format!("f{i}"), &[0.3, 0.7])));
        let split = partition_dataset(s, &PartitionConfig::default()).unwrap();
        assert_eq!((split.labeled.len(), split.unlabeled.len()), (1800, 1000));
    }

    #[test]
    fn auto_split_is_stratified_and_seeded() {
        let mk = || {
            (0..50)
                .map(|i| {
                    let class = i % 2;
                    sample(&format!("s{i}"), if class == 0 { &[1.0, 0.0] } else { &[0.0, 1.0] })
                        .with_split(SplitHint::Auto)
                })
                .collect::<Vec<_>>()
        };
        let cfg = PartitionConfig { val_fraction: 0.2, seed: 3 };
        let a = partition_dataset(mk(), &cfg).unwrap();
        let b = partition_dataset(mk(), &cfg).unwrap();
        assert_eq!(a.validation.len(), 10);
        assert_eq!(a.labeled.len(), 40);
        let ids = |v: &[Sample]| v.iter().map(|s| s.id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&a.validation), ids(&b.validation));
        let class1 = a.validation.iter().filter(|s| s.hard_label() == Some(1)).count();
        assert_eq!(class1, 5);
    }

    #[test]
    fn audit_counts_label_reads() {
        let audit = LabelAudit::new();
        let mut s = sample("a", &[1.0, 0.0]);
        s.attach_audit(&audit);
        assert!(s.certain());
        assert_eq!(audit.reads(), 0);
        let _ = s.hard_label();
        let _ = s.label();
        assert_eq!(audit.reads(), 2);
    }

    fn write_png(dir: &Path, name: &str, value: f32) {
        let mut img = Image::zeros(1, 4, 4);
        img.data_mut().iter_mut().for_each(|v| *v = value);
        img.save_png(&dir.join(name)).unwrap();
    }

    #[test]
    fn manifest_round_trip_and_partition() {
        let dir = tempfile::tempdir().unwrap();
        write_png(dir.path(), "a.png", 1.0);
        write_png(dir.path(), "b.png", 0.5);
        write_png(dir.path(), "c.png", 0.0);
        let rows = vec![
            ManifestRow { path: "a.png".into(), split: SplitHint::Train, votes: vec![3, 0] },
            ManifestRow { path: "b.png".into(), split: SplitHint::Train, votes: vec![1, 1] },
            ManifestRow { path: "c.png".into(), split: SplitHint::Val, votes: vec![0, 2] },
        ];
        let m = dir.path().join("m.csv");
        write_manifest(&m, 2, &rows).unwrap();
        assert_eq!(read_manifest(&m).unwrap(), (2, rows));
        let (k, split) = load_manifest(dir.path(), &m, &PartitionConfig::default()).unwrap();
        assert_eq!(k, 2);
        assert_eq!(split.labeled.len(), 1);
        assert_eq!(split.unlabeled.len(), 1);
        assert_eq!(split.unlabeled[0].label().unwrap().probs(), &[0.5, 0.5]);
        assert_eq!(split.validation.len(), 1);
        assert_eq!(split.labeled[0].image.get(0, 0, 0), 1.0);
    }

    fn manifest_error(body: &str, files: &[&str]) -> String {
        let dir = tempfile::tempdir().unwrap();
        for f in files {
            write_png(dir.path(), f, 0.2);
        }
        let m = dir.path().join("m.csv");
        std::fs::write(&m, body).unwrap();
        read_samples(dir.path(), &m).unwrap_err().to_string()
    }

    #[test]
    fn manifest_errors_name_the_row() {
        let e = manifest_error("path,split,vote_0,vote_1\na.png,train,1,0\nb.png,train,1,0\n", &["a.png"]);
        assert!(e.contains("row 3") && e.contains("missing image"), "{e}");
        let e = manifest_error("path,split,vote_0,vote_1\na.png,train,1\n", &["a.png"]);
        assert!(e.contains("row 2") && e.contains("vote columns"), "{e}");
        let e = manifest_error("path,split,vote_0,vote_1\na.png,train,x,0\n", &["a.png"]);
        assert!(e.contains("row 2"), "{e}");
        let e = manifest_error("path,split,vote_0,vote_1\na.png,train,1,0\na.png,val,0,1\n", &["a.png"]);
        assert!(e.contains("row 3") && e.contains("duplicate"), "{e}");
        let e = manifest_error("path,split,vote_0,vote_1\na.png,bogus,1,0\n", &["a.png"]);
        assert!(e.contains("row 2") && e.contains("unknown split"), "{e}");
        let e = manifest_error("path,split,vote_0,vote_1\na.png,train,0,0\n", &["a.png"]);
        assert!(e.contains("row 2"), "{e}");
        let e = manifest_error("file,votes\n", &[]);
        assert!(e.contains("row 1"), "{e}");
    }

    proptest! {
        #[test]
        fn aggregation_sums_to_one_and_is_equivariant(
            v in prop::collection::vec(0u64..20, 2..8),
            rot in 0usize..8,
        ) {
            prop_assume!(v.iter().sum::<u64>() > 0);
            let l = aggregate_annotations(&votes(&v)).unwrap();
            prop_assert!((l.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let mut rotated = v.clone();
            rotated.rotate_left(rot % v.len());
            let lr = aggregate_annotations(&votes(&rotated)).unwrap();
            let mut expected = l.probs().to_vec();
            expected.rotate_left(rot % v.len());
            prop_assert_eq!(lr.probs(), &expected[..]);
            let nonzero = v.iter().filter(|&&x| x > 0).count();
            prop_assert_eq!(l.is_certain(), nonzero == 1);
        }

        #[test]
        fn hard_label_ignores_positive_rescaling(
            v in prop::collection::vec(0u64..20, 2..8),
            scale in 1u64..50,
        ) {
            prop_assume!(v.iter().sum::<u64>() > 0);
            let scaled: Vec<u64> = v.iter().map(|x| x * scale).collect();
            prop_assert_eq!(
                aggregate_annotations(&votes(&v)).unwrap().hard_label(),
                aggregate_annotations(&votes(&scaled)).unwrap().hard_label()
            );
        }

        #[test]
        fn partition_never_labels_fuzzy(
            rows in prop::collection::vec((prop::collection::vec(0u64..4, 3), 0u8..4), 1..40),
        ) {
            let hints = [SplitHint::Train, SplitHint::Val, SplitHint::Unlabeled, SplitHint::Auto];
            let mut samples: Vec<Sample> = rows
                .iter()
                .enumerate()
                .filter(|(_, (v, _))| v.iter().sum::<u64>() > 0)
                .map(|(i, (v, h))| {
                    Sample::new(i.to_string(), Image::zeros(1, 1, 1), Some(aggregate_annotations(&votes(v)).unwrap()))
                        .with_split(hints[*h as usize])
                })
                .collect();
            samples.push(sample("anchor", &[1.0, 0.0, 0.0]));
            let split = partition_dataset(samples, &PartitionConfig::default()).unwrap();
            prop_assert!(split.labeled.iter().all(Sample::certain));
            let labeled: HashSet<_> = split.labeled.iter().map(|s| s.id.clone()).collect();
            prop_assert!(split.unlabeled.iter().all(|s| !labeled.contains(&s.id)));
        }
    }
}
