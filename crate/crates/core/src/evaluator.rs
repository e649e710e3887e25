//! Accuracy, macro-F1, cluster-to-class mapping, best-head selection and
//! cluster consistency.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::network::{HeadType, Model, Predictions};
use crate::sampler::AugmentationPolicy;

fn check_aligned(preds: &[usize], truths: &[usize]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::invalid("no predictions to score"));
    }
    if preds.len() != truths.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} ground-truth labels",
            preds.len(),
            truths.len()
        )));
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], truths: &[usize]) -> Result<f64> {
    check_aligned(preds, truths)?;
    let correct = preds.iter().zip(truths).filter(|(p, t)| p == t).count();
    Ok(correct as f64 / preds.len() as f64)
}

/// `2TP / (2TP + FP + FN)` per class; `None` for classes absent from `truths`.
pub fn per_class_f1(preds: &[usize], truths: &[usize], k_gt: usize) -> Result<Vec<Option<f64>>> {
    check_aligned(preds, truths)?;
    let mut tp = vec![0usize; k_gt];
    let mut fp = vec![0usize; k_gt];
    let mut fn_ = vec![0usize; k_gt];
    for (&p, &t) in preds.iter().zip(truths) {
        if p >= k_gt || t >= k_gt {
            return Err(Error::invalid(format!("class id {} out of range for {k_gt} classes", p.max(t))));
        }
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    Ok((0..k_gt)
        .map(|c| {
            (tp[c] + fn_[c] > 0).then(|| 2.0 * tp[c] as f64 / (2 * tp[c] + fp[c] + fn_[c]) as f64)
        })
        .collect())
}

/// Unweighted mean of per-class F1 over the classes present in `truths`.
pub fn macro_f1(preds: &[usize], truths: &[usize], k_gt: usize) -> Result<f64> {
    let scores: Vec<f64> = per_class_f1(preds, truths, k_gt)?.into_iter().flatten().collect();
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Majority class of every cluster.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterMapping {
    pub assignment: Vec<usize>,
    /// Name of the split the mapping was computed on.
    pub source: String,
}

impl ClusterMapping {
    pub fn apply(&self, clusters: &[usize]) -> Vec<usize> {
        clusters.iter().map(|&c| self.assignment[c]).collect()
    }
}

/// Each non-empty cluster maps to its most frequent class (ties to the lowest
/// class); empty clusters map to the globally most frequent class.
pub fn cluster_mapping(
    clusters: &[usize],
    truths: &[usize],
    k: usize,
    k_gt: usize,
    source: &str,
) -> Result<ClusterMapping> {
    check_aligned(clusters, truths)?;
    let mut counts = vec![vec![0usize; k_gt]; k];
    let mut global = vec![0usize; k_gt];
    for (&c, &t) in clusters.iter().zip(truths) {
        if c >= k || t >= k_gt {
            return Err(Error::invalid(format!("cluster {c} or class {t} out of range")));
        }
        counts[c][t] += 1;
        global[t] += 1;
    }
    let majority = |v: &[usize]| {
        let mut best = 0;
        for (i, &n) in v.iter().enumerate() {
            if n > v[best] {
                best = i;
            }
        }
        best
    };
    let fallback = majority(&global);
    let assignment = counts
        .iter()
        .map(|row| if row.iter().all(|&n| n == 0) { fallback } else { majority(row) })
        .collect();
    Ok(ClusterMapping {
        assignment,
        source: source.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterConsistency {
    pub cluster: usize,
    pub size: usize,
    pub consistent: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    /// Consistent images over all images.
    pub overall: f64,
    /// Non-empty clusters only.
    pub per_cluster: Vec<ClusterConsistency>,
    pub mean: f64,
    /// Population standard deviation of the per-cluster fractions.
    pub std: f64,
}

/// Aggregates per-image judgments into overall and per-cluster consistency.
pub fn consistency_score(clusters: &[usize], judgments: &[bool]) -> Result<ConsistencyReport> {
    if clusters.is_empty() || clusters.len() != judgments.len() {
        return Err(Error::invalid(format!(
            "{} cluster ids for {} judgments",
            clusters.len(),
            judgments.len()
        )));
    }
    let mut stats: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (&c, &ok) in clusters.iter().zip(judgments) {
        let e = stats.entry(c).or_default();
        e.0 += 1;
        e.1 += usize::from(ok);
    }
    let per_cluster: Vec<ClusterConsistency> = stats
        .into_iter()
        .map(|(cluster, (size, consistent))| ClusterConsistency {
            cluster,
            size,
            consistent,
            fraction: consistent as f64 / size as f64,
        })
        .collect();
    let total: usize = per_cluster.iter().map(|c| c.consistent).sum();
    let n = per_cluster.len() as f64;
    let mean = per_cluster.iter().map(|c| c.fraction).sum::<f64>() / n;
    let var = per_cluster.iter().map(|c| (c.fraction - mean).powi(2)).sum::<f64>() / n;
    Ok(ConsistencyReport {
        overall: total as f64 / clusters.len() as f64,
        per_cluster,
        mean,
        std: var.sqrt(),
    })
}

/// An image is judged consistent when its class equals the majority class
/// of its cluster.
pub fn proxy_judgments(clusters: &[usize], truths: &[usize], mapping: &ClusterMapping) -> Vec<bool> {
    clusters
        .iter()
        .zip(truths)
        .map(|(&c, &t)| mapping.assignment[c] == t)
        .collect()
}

/// One row of an expert judgment file `path,cluster,consistent`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertJudgment {
    pub path: String,
    pub cluster: usize,
    #[serde(deserialize_with = "parse_flag", serialize_with = "write_flag")]
    pub consistent: bool,
}

fn parse_flag<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<bool, D::Error> {
    let s = String::deserialize(d)?;
    match s.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" => Ok(true),
        "0" | "false" | "no" => Ok(false),
        other => Err(serde::de::Error::custom(format!("not a boolean: `{other}`"))),
    }
}

fn write_flag<S: serde::Serializer>(v: &bool, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(if *v { "1" } else { "0" })
}

pub fn read_expert_judgments(path: &Path) -> Result<Vec<ExpertJudgment>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::ManifestRow {
                path: path.to_path_buf(),
                row: i + 2,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn write_expert_judgments(path: &Path, rows: &[ExpertJudgment]) -> Result<()> {
    let err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for row in rows {
        w.serialize(row).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Consistency from an expert file, using the clusters recorded in it.
pub fn consistency_from_experts(rows: &[ExpertJudgment]) -> Result<ConsistencyReport> {
    let clusters: Vec<usize> = rows.iter().map(|r| r.cluster).collect();
    let judgments: Vec<bool> = rows.iter().map(|r| r.consistent).collect();
    consistency_score(&clusters, &judgments)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadMetrics {
    pub head: usize,
    pub val_accuracy: f64,
    pub val_macro_f1: f64,
    pub accuracy: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestHead {
    pub head: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    /// Scores restricted to target images whose label is not certain.
    pub fuzzy_accuracy: Option<f64>,
    pub fuzzy_macro_f1: Option<f64>,
    pub per_class_f1: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint_sha256: Option<String>,
    pub target_split: String,
    pub target_size: usize,
    pub validation_size: usize,
    pub k_gt: usize,
    pub k: usize,
    pub normal_heads: Vec<HeadMetrics>,
    pub overcluster_heads: Vec<HeadMetrics>,
    pub best_normal: BestHead,
    pub best_overcluster: BestHead,
    /// Mapping of the best overclustering head.
    pub mapping: ClusterMapping,
    /// Proxy consistency of the best overclustering head on the target split.
    pub consistency: ConsistencyReport,
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

/// Hard ground truth of every sample; fuzzy labels reduce to their argmax.
pub fn hard_truths(samples: &[Sample]) -> Result<Vec<usize>> {
    samples
        .iter()
        .map(|s| {
            s.hard_label()
                .ok_or_else(|| Error::Data(format!("sample `{}` has no label to score against", s.id)))
        })
        .collect()
}

/// Predictions of every head on `samples` after the policy's deterministic
/// preprocessing.
pub fn predict_samples(model: &Model, policy: &AugmentationPolicy, samples: &[Sample]) -> Result<Predictions> {
    let images: Vec<Image> = samples.iter().map(|s| policy.preprocess(&s.image)).collect();
    let refs: Vec<&Image> = images.iter().collect();
    model.predict(&refs)
}

/// Named group of samples to evaluate on.
pub struct EvalSet<'a> {
    pub name: &'a str,
    pub samples: &'a [Sample],
}

/// Scores every head, picks the best head of each type on validation and
/// reports it on the target split. Overclustering heads are scored through a
/// majority mapping computed on `mapping_source`.
pub fn evaluate_model(
    model: &Model,
    policy: &AugmentationPolicy,
    validation: &EvalSet<'_>,
    target: &EvalSet<'_>,
    mapping_source: &EvalSet<'_>,
) -> Result<EvalReport> {
    let cfg = model.config();
    let (k_gt, k) = (cfg.k_gt, cfg.k);
    let validation = if validation.samples.is_empty() {
        log::warn!("validation split is empty; selecting best heads on the target split");
        target
    } else {
        validation
    };
    let val_truth = hard_truths(validation.samples)?;
    let target_truth = hard_truths(target.samples)?;
    let val_pred = predict_samples(model, policy, validation.samples)?;
    let target_pred = predict_samples(model, policy, target.samples)?;
    let (map_pred, map_truth) = if std::ptr::eq(mapping_source.samples, target.samples) {
        (None, None)
    } else {
        (
            Some(predict_samples(model, policy, mapping_source.samples)?),
            Some(hard_truths(mapping_source.samples)?),
        )
    };
    let fuzzy_idx: Vec<usize> = (0..target.samples.len()).filter(|&i| !target.samples[i].certain()).collect();

    let mut mappings = Vec::new();
    for j in 0..cfg.heads_per_type {
        let (clusters, truths) = match (&map_pred, &map_truth) {
            (Some(p), Some(t)) => (p.head(HeadType::Overcluster, j), t.as_slice()),
            _ => (target_pred.head(HeadType::Overcluster, j), target_truth.as_slice()),
        };
        mappings.push(cluster_mapping(clusters, truths, k, k_gt, mapping_source.name)?);
    }

    let score = |head_type: HeadType, j: usize| -> Result<(HeadMetrics, Vec<usize>)> {
        let map = |p: &[usize]| match head_type {
            HeadType::Normal => p.to_vec(),
            HeadType::Overcluster => mappings[j].apply(p),
        };
        let vp = map(val_pred.head(head_type, j));
        let tp = map(target_pred.head(head_type, j));
        Ok((
            HeadMetrics {
                head: j,
                val_accuracy: accuracy(&vp, &val_truth)?,
                val_macro_f1: macro_f1(&vp, &val_truth, k_gt)?,
                accuracy: accuracy(&tp, &target_truth)?,
                macro_f1: macro_f1(&tp, &target_truth, k_gt)?,
            },
            tp,
        ))
    };
    let best = |head_type: HeadType| -> Result<(Vec<HeadMetrics>, BestHead)> {
        let scored = (0..cfg.heads_per_type)
            .map(|j| score(head_type, j))
            .collect::<Result<Vec<_>>>()?;
        let mut best_j = 0;
        for (j, (m, _)) in scored.iter().enumerate() {
            if m.val_macro_f1 > scored[best_j].0.val_macro_f1 {
                best_j = j;
            }
        }
        let (m, tp) = &scored[best_j];
        let (fuzzy_accuracy, fuzzy_macro_f1) = if fuzzy_idx.is_empty() {
            (None, None)
        } else {
            let fp: Vec<usize> = fuzzy_idx.iter().map(|&i| tp[i]).collect();
            let ft: Vec<usize> = fuzzy_idx.iter().map(|&i| target_truth[i]).collect();
            (Some(accuracy(&fp, &ft)?), Some(macro_f1(&fp, &ft, k_gt)?))
        };
        let best = BestHead {
            head: best_j,
            accuracy: m.accuracy,
            macro_f1: m.macro_f1,
            fuzzy_accuracy,
            fuzzy_macro_f1,
            per_class_f1: per_class_f1(tp, &target_truth, k_gt)?,
        };
        Ok((scored.into_iter().map(|(m, _)| m).collect(), best))
    };
    let (normal_heads, best_normal) = best(HeadType::Normal)?;
    let (overcluster_heads, best_overcluster) = best(HeadType::Overcluster)?;
    let mapping = mappings[best_overcluster.head].clone();
    let clusters = target_pred.head(HeadType::Overcluster, best_overcluster.head);
    let target_mapping = cluster_mapping(clusters, &target_truth, k, k_gt, target.name)?;
    let consistency = consistency_score(clusters, &proxy_judgments(clusters, &target_truth, &target_mapping))?;
    Ok(EvalReport {
        checkpoint_sha256: None,
        target_split: target.name.to_string(),
        target_size: target.samples.len(),
        validation_size: validation.samples.len(),
        k_gt,
        k,
        normal_heads,
        overcluster_heads,
        best_normal,
        best_overcluster,
        mapping,
        consistency,
    })
}

/// Hex SHA-256 of a file, used to tie reports to checkpoints.
pub fn file_sha256(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[2, 1, 0], &[2, 1, 0]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[0, 1]).unwrap(), 0.5);
        assert_eq!(accuracy(&[0, 1, 2, 2], &[0, 1, 1, 2]).unwrap(), 0.75);
        assert!(accuracy(&[], &[]).is_err());
        assert!(accuracy(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn macro_f1_examples() {
        assert_eq!(macro_f1(&[0, 1, 2], &[0, 1, 2], 3).unwrap(), 1.0);
        assert_abs_diff_eq!(macro_f1(&[0, 0, 1, 1], &[0, 1, 0, 1], 2).unwrap(), 0.5);
        assert_abs_diff_eq!(macro_f1(&[0, 0, 0, 0], &[0, 0, 1, 1], 2).unwrap(), 1.0 / 3.0, epsilon = 1e-12);
        // class 2 never occurs in the truths and is left out
        assert_eq!(macro_f1(&[0, 1], &[0, 1], 3).unwrap(), 1.0);
    }

    #[test]
    fn mapping_examples() {
        let m = cluster_mapping(&[0, 0, 0, 1], &[1, 1, 2, 0], 2, 3, "t").unwrap();
        assert_eq!(m.assignment, vec![1, 0]);
        let m = cluster_mapping(&[0, 0, 0, 0], &[0, 0, 1, 1], 1, 2, "t").unwrap();
        assert_eq!(m.assignment, vec![0]);
        let m = cluster_mapping(&[0, 1, 2, 2], &[2, 2, 2, 1], 4, 3, "t").unwrap();
        assert_eq!(m.assignment[3], 2);
    }

    #[test]
    fn consistency_examples() {
        let mut clusters = vec![0; 10];
        clusters.extend(vec![1; 10]);
        let mut judgments = vec![true; 9];
        judgments.push(false);
        judgments.extend(vec![true; 7]);
        judgments.extend(vec![false; 3]);
        let r = consistency_score(&clusters, &judgments).unwrap();
        assert_abs_diff_eq!(r.overall, 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(r.mean, 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(r.std, 0.1, epsilon = 1e-12);
        let all = consistency_score(&[0, 1, 1], &[true; 3]).unwrap();
        assert_eq!((all.overall, all.std), (1.0, 0.0));
    }

    #[test]
    fn proxy_on_pure_clusters_is_one() {
        let clusters = [0, 0, 1, 1, 2, 3];
        let truths = [1, 1, 0, 0, 1, 2];
        let m = cluster_mapping(&clusters, &truths, 4, 3, "t").unwrap();
        let r = consistency_score(&clusters, &proxy_judgments(&clusters, &truths, &m)).unwrap();
        assert_eq!(r.overall, 1.0);
    }

    #[test]
    fn expert_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("j.csv");
        let rows = vec![
            ExpertJudgment { path: "a.png".into(), cluster: 0, consistent: true },
            ExpertJudgment { path: "b.png".into(), cluster: 0, consistent: false },
            ExpertJudgment { path: "c.png".into(), cluster: 3, consistent: true },
        ];
        write_expert_judgments(&p, &rows).unwrap();
        assert_eq!(read_expert_judgments(&p).unwrap(), rows);
        let r = consistency_from_experts(&rows).unwrap();
        assert_abs_diff_eq!(r.overall, 2.0 / 3.0);
        std::fs::write(&p, "path,cluster,consistent\na.png,0,maybe\n").unwrap();
        let e = read_expert_judgments(&p).unwrap_err().to_string();
        assert!(e.contains("row 2"), "{e}");
    }

    proptest! {
        #[test]
        fn macro_f1_is_label_permutation_invariant(
            pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60),
            perm_seed in 0usize..24,
        ) {
            let mut perm = vec![0, 1, 2, 3];
            // walk the 24 permutations
            let mut s = perm_seed;
            for i in (1..4).rev() {
                perm.swap(i, s % (i + 1));
                s /= i + 1;
            }
            let (p, t): (Vec<usize>, Vec<usize>) = pairs.iter().cloned().unzip();
            let pp: Vec<usize> = p.iter().map(|&x| perm[x]).collect();
            let tp: Vec<usize> = t.iter().map(|&x| perm[x]).collect();
            prop_assert!((macro_f1(&p, &t, 4).unwrap() - macro_f1(&pp, &tp, 4).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn refinement_never_lowers_mapped_accuracy(
            truths in prop::collection::vec(0usize..3, 1..60),
            coarse_seed in prop::collection::vec(0usize..3, 60),
            split_bits in prop::collection::vec(0usize..2, 60),
        ) {
            let n = truths.len();
            let coarse: Vec<usize> = coarse_seed[..n].to_vec();
            let fine: Vec<usize> = (0..n).map(|i| coarse[i] * 2 + split_bits[i]).collect();
            let acc = |clusters: &[usize], k: usize| {
                let m = cluster_mapping(clusters, &truths, k, 3, "t").unwrap();
                accuracy(&m.apply(clusters), &truths).unwrap()
            };
            prop_assert!(acc(&fine, 6) >= acc(&coarse, 3));
        }

        #[test]
        fn overall_is_size_weighted_mean(
            rows in prop::collection::vec((0usize..5, any::<bool>()), 1..80),
        ) {
            let (c, j): (Vec<usize>, Vec<bool>) = rows.into_iter().unzip();
            let r = consistency_score(&c, &j).unwrap();
            let weighted: f64 = r.per_cluster.iter().map(|p| p.fraction * p.size as f64).sum::<f64>()
                / c.len() as f64;
            prop_assert!((weighted - r.overall).abs() < 1e-12);
        }
    }
}
