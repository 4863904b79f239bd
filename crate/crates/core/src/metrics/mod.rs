//! Classification metrics and seed-sweep aggregation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::mean_std;

/// Probability floor inside the log of [`nll`].
pub const NLL_FLOOR: f64 = 1e-12;

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: Vec<String>) -> Self {
        let c = classes.len();
        Self { classes, counts: vec![vec![0; c]; c] }
    }

    pub fn from_counts(classes: Vec<String>, counts: Vec<Vec<u64>>) -> Result<Self> {
        let c = classes.len();
        if counts.len() != c || counts.iter().any(|r| r.len() != c) {
            return Err(Error::Shape(format!("confusion matrix must be {c}x{c}")));
        }
        Ok(Self { classes, counts })
    }

    /// Builds from index pairs.
    pub fn from_indices(classes: Vec<String>, truth: &[usize], pred: &[usize]) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::Shape(format!("{} labels vs {} predictions", truth.len(), pred.len())));
        }
        let mut cm = Self::new(classes);
        for (&t, &p) in truth.iter().zip(pred) {
            cm.add(t, p)?;
        }
        Ok(cm)
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        let c = self.classes.len();
        if truth >= c || pred >= c {
            return Err(Error::Label(format!("class index out of range for {c} classes")));
        }
        self.counts[truth][pred] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    fn true_count(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    fn pred_count(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }

    /// `(precision, recall, f1)` of class `c`; zero denominators give 0.
    pub fn class_scores(&self, c: usize) -> (f64, f64, f64) {
        let tp = self.counts[c][c] as f64;
        let (t, p) = (self.true_count(c) as f64, self.pred_count(c) as f64);
        let prec = if p > 0.0 { tp / p } else { 0.0 };
        let rec = if t > 0.0 { tp / t } else { 0.0 };
        let f1 = if prec + rec > 0.0 { 2.0 * prec * rec / (prec + rec) } else { 0.0 };
        (prec, rec, f1)
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        (0..self.classes.len()).map(|c| self.counts[c][c]).sum::<u64>() as f64 / total as f64
    }
}

/// Unweighted mean of per-class F1 over classes that occur as a truth or a
/// prediction.
pub fn macro_f1(cm: &ConfusionMatrix) -> f64 {
    let active: Vec<usize> =
        (0..cm.classes.len()).filter(|&c| cm.true_count(c) > 0 || cm.pred_count(c) > 0).collect();
    if active.is_empty() {
        return 0.0;
    }
    active.iter().map(|&c| cm.class_scores(c).2).sum::<f64>() / active.len() as f64
}

/// Mean `-ln p[label]` with `p` floored at [`NLL_FLOOR`].
pub fn nll(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::Shape(format!("{} probability rows for {} labels", probs.len(), labels.len())));
    }
    let mut total = 0.0;
    for (row, &y) in probs.iter().zip(labels) {
        let p = *row.get(y).ok_or_else(|| Error::Label(format!("label {y} outside {} classes", row.len())))?;
        total -= p.max(NLL_FLOOR).ln();
    }
    Ok(total / labels.len() as f64)
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: Vec<ClassReport>,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub nll: Option<f64>,
    pub confusion: ConfusionMatrix,
}

impl EvalReport {
    pub fn new(cm: ConfusionMatrix, nll: Option<f64>) -> Self {
        let per_class = (0..cm.classes.len())
            .map(|c| {
                let (precision, recall, f1) = cm.class_scores(c);
                ClassReport { class: cm.classes[c].clone(), precision, recall, f1, support: cm.true_count(c) }
            })
            .collect();
        Self { per_class, macro_f1: macro_f1(&cm), accuracy: cm.accuracy(), nll, confusion: cm }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSweep {
    pub rows: Vec<SeedRow>,
    /// metric -> (mean, sample std)
    pub summary: BTreeMap<String, (f64, f64)>,
}

/// Runs `eval` once per seed and aggregates every metric it returns.
pub fn seed_sweep<F>(seeds: &[u64], mut eval: F) -> Result<SeedSweep>
where
    F: FnMut(u64) -> Result<BTreeMap<String, f64>>,
{
    if seeds.len() < 2 {
        return Err(Error::Config("a seed sweep needs at least two seeds".into()));
    }
    let rows = seeds
        .iter()
        .map(|&seed| eval(seed).map(|metrics| SeedRow { seed, metrics }))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(rows))
}

/// Mean and sample standard deviation of each metric across rows.
pub fn summarize(rows: Vec<SeedRow>) -> SeedSweep {
    let mut keys: Vec<&String> = rows.iter().flat_map(|r| r.metrics.keys()).collect();
    keys.sort();
    keys.dedup();
    let summary = keys
        .into_iter()
        .map(|k| {
            let vals: Vec<f64> = rows.iter().filter_map(|r| r.metrics.get(k).copied()).collect();
            (k.clone(), mean_std(&vals))
        })
        .collect();
    SeedSweep { rows, summary }
}
