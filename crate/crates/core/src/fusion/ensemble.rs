//! Logit tables and the ensemble descriptor written by calibration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FusionConfig, LabelSpace};
use crate::error::{Error, Result};

/// Per-sample logits of one model. CSV layout: `sample_id,label,<class...>`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct LogitTable {
    pub classes: Vec<String>,
    pub ids: Vec<String>,
    /// True label, empty when unknown.
    pub labels: Vec<String>,
    pub logits: Vec<Vec<f64>>,
}

impl LogitTable {
    pub fn new(classes: Vec<String>) -> Self {
        Self { classes, ..Self::default() }
    }

    pub fn push(&mut self, id: String, label: String, logits: Vec<f64>) -> Result<()> {
        if logits.len() != self.classes.len() {
            return Err(Error::Shape(format!("{} logits for {} classes", logits.len(), self.classes.len())));
        }
        self.ids.push(id);
        self.labels.push(label);
        self.logits.push(logits);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Class indices of the true labels; unknown labels are an error.
    pub fn label_indices(&self) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .map(|l| {
                self.classes
                    .iter()
                    .position(|c| c == l)
                    .ok_or_else(|| Error::Label(format!("label '{l}' is not one of {:?}", self.classes)))
            })
            .collect()
    }
}

pub fn write_logit_table(path: &Path, table: &LogitTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["sample_id".to_string(), "label".to_string()];
    header.extend(table.classes.iter().cloned());
    w.write_record(&header)?;
    for ((id, label), z) in table.ids.iter().zip(&table.labels).zip(&table.logits) {
        let mut row = vec![id.clone(), label.clone()];
        row.extend(z.iter().map(|v| format!("{v:.9}")));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_logit_table(path: &Path) -> Result<LogitTable> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.len() < 4 || header[0] != "sample_id" || header[1] != "label" {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            msg: "expected header sample_id,label,<at least two classes>".into(),
        });
    }
    let mut table = LogitTable::new(header[2..].to_vec());
    for rec in r.records() {
        let rec = rec?;
        let z = rec
            .iter()
            .skip(2)
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse { path: path.to_path_buf(), msg: e.to_string() })?;
        table.push(rec[0].to_string(), rec[1].to_string(), z)?;
    }
    Ok(table)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleMember {
    pub name: String,
    /// Checkpoint directory, when logits are computed on the fly.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    /// Precomputed logit table, used when no checkpoint is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<String>,
    pub labels: Vec<String>,
    pub temperature: f64,
    #[serde(default)]
    pub nll_before: f64,
    #[serde(default)]
    pub nll_after: f64,
    #[serde(default)]
    pub n_val: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleDescriptor {
    pub tool_version: String,
    pub config_hash: String,
    pub fusion: FusionConfig,
    pub members: Vec<EnsembleMember>,
}

impl EnsembleDescriptor {
    pub fn label_space(&self) -> Result<LabelSpace> {
        LabelSpace::new(self.members.iter().map(|m| m.labels.clone()).collect())
    }

    pub fn temperatures(&self) -> Vec<f64> {
        self.members.iter().map(|m| m.temperature).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let d: Self = serde_json::from_str(&text)?;
        if d.members.is_empty() {
            return Err(Error::Config(format!("{}: ensemble has no members", path.display())));
        }
        d.fusion.validate()?;
        for m in &d.members {
            if !(m.temperature > 0.0) || !m.temperature.is_finite() {
                return Err(Error::Config(format!("member '{}' has temperature {}", m.name, m.temperature)));
            }
            if m.checkpoint.is_none() && m.logits.is_none() {
                return Err(Error::Config(format!("member '{}' names neither a checkpoint nor a logit table", m.name)));
            }
        }
        Ok(d)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
