use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CcvcError, Result};

/// Losses and learning rate of one optimisation step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    /// 1-based epoch the step belongs to.
    pub epoch: usize,
    pub lr: f64,
    pub sup: f64,
    pub con: f64,
    pub con_cc_frac: f64,
    pub dis: f64,
    pub dis_l: f64,
    pub dis_u: f64,
    pub total: f64,
}

/// Evaluation after `epoch` completed epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub val_miou: f64,
    /// mIoU on the un-augmented labelled training scenes.
    pub train_miou: f64,
    /// Raw branch-1 vs branch-2 features.
    pub mean_feature_cosine: f64,
    /// Branch-1 features vs mapped branch-2 features.
    pub mapped_feature_cosine: f64,
    pub confident_frac: f64,
    pub confident_acc: Option<f64>,
    pub confident_miou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MetricsRecord {
    Step(StepRecord),
    Epoch(EpochRecord),
}

impl MetricsRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("records serialise")
    }
}

pub fn write_metrics(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        writeln!(f, "{}", r.to_line())?;
    }
    f.flush()?;
    Ok(())
}

/// Parses a metrics log; blank lines are skipped and any other
/// unparsable line is reported with its 1-based number.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| CcvcError::MetricsLog {
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}
