//! Single-sample fusion scenarios with known outcomes, loaded from a JSON
//! fixture. A copy of the bundled fixture is compiled into the library.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{fuse_union, FusionConfig, FusionMode, LabelSpace};
use crate::error::{Error, Result};

pub const BUNDLED_CASES: &str = include_str!("../../fixtures/case_studies.json");

/// Smallest probability handed to the log; keeps unlisted labels finite.
const PROB_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseStudies {
    #[serde(default)]
    pub description: String,
    pub domains: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub aliases: BTreeMap<String, String>,
    pub cases: Vec<CaseFixture>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseModel {
    pub domain: String,
    pub posterior: BTreeMap<String, f64>,
    #[serde(default = "one")]
    pub temperature: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseFixture {
    pub name: String,
    pub true_label: String,
    pub models: Vec<CaseModel>,
    pub expected: String,
    pub expect_correct: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseOutcome {
    pub name: String,
    pub expected: String,
    pub predicted: String,
    pub matched: bool,
    pub correct: bool,
    pub posterior: BTreeMap<String, f64>,
    /// Entropy gate per model domain.
    pub weights: BTreeMap<String, f64>,
    /// Fused argmax with every temperature set to 1.
    pub uncalibrated_predicted: String,
    /// Domains whose top posterior was lowered by calibration.
    pub overconfident: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseReport {
    pub tau: f64,
    pub mode: FusionMode,
    pub calibrated: bool,
    pub outcomes: Vec<CaseOutcome>,
}

impl CaseReport {
    pub fn all_matched(&self) -> bool {
        self.outcomes.iter().all(|o| o.matched)
    }

    /// `Err(CaseStudyFailure)` naming every mismatched case.
    pub fn check(&self) -> Result<()> {
        let bad: Vec<String> = self
            .outcomes
            .iter()
            .filter(|o| !o.matched)
            .map(|o| format!("{}: expected {}, got {}", o.name, o.expected, o.predicted))
            .collect();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::CaseStudyFailure(bad))
        }
    }

    pub fn render(&self) -> String {
        let mut s = format!(
            "case studies (tau = {}, mode = {}, calibration {})\n",
            self.tau,
            self.mode,
            if self.calibrated { "on" } else { "off" }
        );
        for o in &self.outcomes {
            let top = o.posterior.get(&o.predicted).copied().unwrap_or(0.0);
            s.push_str(&format!(
                "  [{}] {:<36} fused -> {} ({:.3}), expected {}{}\n",
                if o.matched { "ok" } else { "MISMATCH" },
                o.name,
                o.predicted,
                top,
                o.expected,
                if o.correct { "" } else { " (known failure mode)" }
            ));
            if !o.overconfident.is_empty() {
                s.push_str(&format!(
                    "      without calibration: {} (overconfident: {})\n",
                    o.uncalibrated_predicted,
                    o.overconfident.join(", ")
                ));
            }
        }
        s
    }
}

impl CaseStudies {
    pub fn bundled() -> Self {
        serde_json::from_str(BUNDLED_CASES).expect("bundled case fixture parses")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    fn canonical<'a>(&'a self, label: &'a str) -> &'a str {
        self.aliases.get(label).map(String::as_str).unwrap_or(label)
    }

    /// Full posterior of one model over its domain labels, as log-probabilities.
    fn model_logits(&self, case: &str, model: &CaseModel) -> Result<(Vec<String>, Vec<f64>)> {
        let labels = self
            .domains
            .get(&model.domain)
            .ok_or_else(|| Error::Config(format!("case '{case}': unknown domain '{}'", model.domain)))?;
        let mut probs = vec![None; labels.len()];
        for (name, &p) in &model.posterior {
            let name = self.canonical(name);
            let j = labels
                .iter()
                .position(|l| l == name)
                .ok_or_else(|| Error::Config(format!("case '{case}': '{name}' is not a {} label", model.domain)))?;
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("case '{case}': probability {p} outside [0, 1]")));
            }
            probs[j] = Some(p);
        }
        let given: f64 = probs.iter().flatten().sum();
        if given > 1.0 + 1e-6 {
            return Err(Error::Config(format!("case '{case}': {} posterior sums to {given}", model.domain)));
        }
        let missing = probs.iter().filter(|p| p.is_none()).count();
        let fill = if missing > 0 { (1.0 - given).max(0.0) / missing as f64 } else { 0.0 };
        let full: Vec<f64> = probs.into_iter().map(|p| p.unwrap_or(fill).max(PROB_FLOOR)).collect();
        let total: f64 = full.iter().sum();
        Ok((labels.clone(), full.into_iter().map(|p| (p / total).ln()).collect()))
    }
}

/// Fuses every case under `cfg`. Temperatures from the fixture are used when
/// `calibrate` is set, otherwise all temperatures are 1.
pub fn run_case_studies(studies: &CaseStudies, cfg: &FusionConfig, calibrate: bool) -> Result<CaseReport> {
    cfg.validate()?;
    let mut outcomes = Vec::with_capacity(studies.cases.len());
    for case in &studies.cases {
        let mut domains = Vec::new();
        let mut logits = Vec::new();
        let mut temps = Vec::new();
        for m in &case.models {
            let (labels, z) = studies.model_logits(&case.name, m)?;
            domains.push(labels);
            logits.push(z);
            temps.push(if calibrate { m.temperature } else { 1.0 });
        }
        let space = LabelSpace::new(domains)?;
        let refs: Vec<&[f64]> = logits.iter().map(Vec::as_slice).collect();
        let fused = fuse_union(&refs, &temps, &space, cfg)?;
        let raw = fuse_union(&refs, &vec![1.0; temps.len()], &space, cfg)?;
        let predicted = space.union[fused.argmax()].clone();
        let expected = studies.canonical(&case.expected).to_string();
        let truth = studies.canonical(&case.true_label);
        let overconfident = case
            .models
            .iter()
            .enumerate()
            .filter(|(k, _)| {
                let top = |p: &[f64]| p.iter().copied().fold(0.0, f64::max);
                top(&fused.model_posteriors[*k]) < top(&raw.model_posteriors[*k]) - 1e-12
            })
            .map(|(_, m)| m.domain.clone())
            .collect();
        outcomes.push(CaseOutcome {
            name: case.name.clone(),
            matched: predicted == expected,
            correct: predicted == truth,
            expected,
            posterior: space.union.iter().cloned().zip(fused.posterior.iter().copied()).collect(),
            weights: case.models.iter().map(|m| m.domain.clone()).zip(fused.weights.iter().copied()).collect(),
            uncalibrated_predicted: space.union[raw.argmax()].clone(),
            overconfident,
            predicted,
        });
    }
    Ok(CaseReport { tau: cfg.tau, mode: cfg.mode, calibrated: calibrate, outcomes })
}
