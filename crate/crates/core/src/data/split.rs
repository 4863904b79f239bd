//! Group-aware train/val/test assignment.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{SampleRecord, Split};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    /// Target sample fractions for (train, val, test).
    pub fractions: [f64; 3],
    pub seed: u64,
    pub stratify: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { fractions: [0.7, 0.1, 0.2], seed: 0, stratify: true }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.fractions.iter().any(|&f| !(f > 0.0) || !f.is_finite()) {
            return Err(Error::Config(format!("split fractions must be positive, got {:?}", self.fractions)));
        }
        let sum: f64 = self.fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!("split fractions sum to {sum}, expected 1")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitOutcome {
    pub records: Vec<SampleRecord>,
    /// Stratification warnings, e.g. a class missing from one split.
    pub warnings: Vec<String>,
}

/// Shuffles groups with the spec's seed, then hands each group to the split
/// with the largest remaining sample deficit (per class when stratifying).
/// Once the number of unassigned groups equals the number of still-empty
/// splits, those splits are filled first so none ends up empty.
pub fn group_split(records: &[SampleRecord], spec: &SplitSpec) -> Result<SplitOutcome> {
    spec.validate()?;
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        if r.group.is_empty() {
            return Err(Error::Data(format!("{} has an empty group", r.path)));
        }
        groups.entry(r.group.as_str()).or_default().push(i);
    }
    if groups.len() < 3 {
        return Err(Error::Split(format!("need at least 3 distinct groups, found {}", groups.len())));
    }
    let classes: Vec<&str> = records.iter().map(|r| r.label.as_str()).collect::<BTreeSet<_>>().into_iter().collect();
    let class_idx = |l: &str| classes.binary_search(&l).expect("label collected above");
    let class_totals: Vec<f64> = {
        let mut t = vec![0.0; classes.len()];
        for r in records {
            t[class_idx(&r.label)] += 1.0;
        }
        t
    };
    let n = records.len() as f64;

    let mut order: Vec<(&str, Vec<usize>)> = groups.into_iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));

    let mut assigned = [0.0f64; 3];
    let mut assigned_class = vec![[0.0f64; 3]; classes.len()];
    let mut group_count = [0usize; 3];
    let mut out = records.to_vec();
    let total_groups = order.len();
    for (gi, (_, members)) in order.iter().enumerate() {
        let mut counts = vec![0.0; classes.len()];
        for &m in members {
            counts[class_idx(&records[m].label)] += 1.0;
        }
        let empties: Vec<usize> = (0..3).filter(|&s| group_count[s] == 0).collect();
        let candidates: Vec<usize> = if empties.len() >= total_groups - gi { empties } else { vec![0, 1, 2] };
        let score = |s: usize| -> f64 {
            if spec.stratify {
                counts
                    .iter()
                    .enumerate()
                    .map(|(c, &k)| k * (spec.fractions[s] * class_totals[c] - assigned_class[c][s]))
                    .sum()
            } else {
                spec.fractions[s] * n - assigned[s]
            }
        };
        // first maximum wins, so ties go to train, then val, then test
        let mut best = candidates[0];
        for &s in &candidates[1..] {
            if score(s) > score(best) {
                best = s;
            }
        }
        group_count[best] += 1;
        for &m in members {
            assigned[best] += 1.0;
            assigned_class[class_idx(&records[m].label)][best] += 1.0;
            out[m].split = Split::ASSIGNED[best];
        }
    }

    let mut warnings = Vec::new();
    if spec.stratify {
        for (c, name) in classes.iter().enumerate() {
            for s in 0..3 {
                if assigned_class[c][s] == 0.0 {
                    let msg = format!("class '{name}' is absent from the {} split", Split::ASSIGNED[s]);
                    log::warn!("{msg}");
                    warnings.push(msg);
                }
            }
        }
    }
    Ok(SplitOutcome { records: out, warnings })
}

/// Groups that appear in more than one assigned split, sorted. Unassigned
/// records are ignored.
pub fn verify_no_leakage(records: &[SampleRecord]) -> Vec<String> {
    let mut seen: BTreeMap<&str, BTreeSet<Split>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.split != Split::Unassigned) {
        seen.entry(r.group.as_str()).or_default().insert(r.split);
    }
    seen.into_iter().filter(|(_, s)| s.len() > 1).map(|(g, _)| g.to_string()).collect()
}
