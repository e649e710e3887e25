use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{HeadType, Phase};

/// One line of the per-epoch metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub phase: Phase,
    pub epoch: usize,
    pub head_type: HeadType,
    /// Mean supervised loss over the epoch's batches of this head type.
    pub loss_s: f64,
    /// Mean unsupervised loss (negated mutual information).
    pub loss_u: f64,
    /// Validation macro-F1 of the best head of this type; blank when labels
    /// were not consulted.
    pub val_f1: Option<f64>,
    pub val_acc: Option<f64>,
}

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(err)?;
    w.write_record(["phase", "epoch", "head_type", "loss_s", "loss_u", "val_f1", "val_acc"])
        .map_err(err)?;
    for row in rows {
        w.serialize(row).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_blank_validation() {
        let rows = vec![
            MetricRow {
                phase: Phase::WarmUp,
                epoch: 0,
                head_type: HeadType::Normal,
                loss_s: 0.0,
                loss_u: -0.123456789012345,
                val_f1: None,
                val_acc: None,
            },
            MetricRow {
                phase: Phase::Main,
                epoch: 3,
                head_type: HeadType::Overcluster,
                loss_s: 1.5,
                loss_u: -2.0,
                val_f1: Some(0.75),
                val_acc: Some(0.8),
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("metrics.csv");
        write_metrics(&p, &rows).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("phase,epoch,head_type,loss_s,loss_u,val_f1,val_acc\nwarm-up,0,normal,"));
        assert_eq!(read_metrics(&p).unwrap(), rows);
    }
}
