//! Sample manifests, corpus naming conventions, leakage-safe splits and a
//! synthetic cry-like corpus.

mod manifest;
mod naming;
mod split;
mod synth;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use manifest::{build_manifest, read_manifest, write_manifest, DatasetKind, ManifestBuild};
pub use naming::parse_baby2020_name;
pub use split::{group_split, verify_no_leakage, SplitOutcome, SplitSpec};
pub use synth::{baby_group, synth_clip, synth_corpus, BabyVoice, SynthClass, SynthSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    #[default]
    Unassigned,
}

impl Split {
    pub const ASSIGNED: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
            Self::Unassigned => "unassigned",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            "unassigned" => Ok(Self::Unassigned),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

/// One clip in a manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub path: String,
    pub label: String,
    /// Baby, session or recording identity shared by every clip of one source.
    pub group: String,
    #[serde(default)]
    pub split: Split,
    pub duration_s: f64,
    /// Extracted feature file, once available.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<String>,
}

/// Sorted unique labels of `records`.
pub fn label_space(records: &[SampleRecord]) -> Vec<String> {
    let mut labels: Vec<String> = records.iter().map(|r| r.label.clone()).collect();
    labels.sort();
    labels.dedup();
    labels
}
