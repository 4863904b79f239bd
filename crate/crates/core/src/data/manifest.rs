//! Manifest construction and JSON-lines persistence.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::naming::parse_baby2020_name;
use super::{SampleRecord, Split};
use crate::dsp::wav_duration;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    /// Labels and groups parsed from file names.
    #[default]
    Baby2020,
    /// Labels and groups read from a `labels.csv` sidecar (`filename,label,group`).
    Generic,
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baby2020" => Ok(Self::Baby2020),
            "generic" => Ok(Self::Generic),
            other => Err(Error::Config(format!("unknown dataset kind '{other}' (baby2020|generic)"))),
        }
    }
}

/// Records plus every file that could not be admitted, with the reason.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ManifestBuild {
    pub records: Vec<SampleRecord>,
    pub quarantine: Vec<(String, String)>,
}

fn collect_wavs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_wavs(&path, out)?;
        } else if path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
            out.push(path);
        }
    }
    Ok(())
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

#[derive(Deserialize)]
struct LabelRow {
    filename: String,
    label: String,
    group: String,
}

/// Scans `root` recursively for WAV files. Records come out sorted by path.
pub fn build_manifest(root: &Path, kind: DatasetKind) -> Result<ManifestBuild> {
    let mut wavs = Vec::new();
    collect_wavs(root, &mut wavs)?;
    wavs.sort();

    let mut seen = HashSet::new();
    for w in &wavs {
        let name = file_name(w);
        if !seen.insert(name.clone()) {
            return Err(Error::Data(format!("duplicate file name '{name}' under {}", root.display())));
        }
    }

    let mut labels: BTreeMap<String, (String, String)> = BTreeMap::new();
    if kind == DatasetKind::Generic {
        let csv_path = root.join("labels.csv");
        let file = fs::File::open(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        let mut rdr = csv::Reader::from_reader(file);
        for row in rdr.deserialize::<LabelRow>() {
            let row = row?;
            let key = row.filename.trim().to_string();
            if labels.insert(key.clone(), (row.label.trim().to_string(), row.group.trim().to_string())).is_some() {
                return Err(Error::Data(format!("duplicate file name '{key}' in {}", csv_path.display())));
            }
        }
    }

    let mut out = ManifestBuild::default();
    for path in &wavs {
        let name = file_name(path);
        let shown = path.to_string_lossy().into_owned();
        let parsed = match kind {
            DatasetKind::Baby2020 => parse_baby2020_name(&name).map_err(|e| e.to_string()),
            DatasetKind::Generic => match labels.remove(&name) {
                Some((label, group)) if !label.is_empty() && !group.is_empty() => Ok((label, group)),
                Some(_) => Err("empty label or group in labels.csv".to_string()),
                None => Err("not listed in labels.csv".to_string()),
            },
        };
        let (label, group) = match parsed {
            Ok(v) => v,
            Err(reason) => {
                out.quarantine.push((shown, reason));
                continue;
            }
        };
        match wav_duration(path) {
            Ok(duration_s) => out.records.push(SampleRecord {
                path: shown,
                label,
                group,
                split: Split::Unassigned,
                duration_s,
                features: None,
            }),
            Err(e) => out.quarantine.push((shown, e.to_string())),
        }
    }
    for name in labels.into_keys() {
        out.quarantine.push((root.join(&name).to_string_lossy().into_owned(), "listed in labels.csv but missing".into()));
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<SampleRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { path: path.to_path_buf(), msg: format!("line {}: {e}", i + 1) })?;
        if rec.group.is_empty() {
            return Err(Error::Data(format!("{}: line {} has an empty group", path.display(), i + 1)));
        }
        out.push(rec);
    }
    Ok(out)
}
