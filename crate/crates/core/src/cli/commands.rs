//! Subcommand implementations.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;

use super::*;
use crate::cells::{LmuCell, LmuConfig, LstmCell, LstmConfig, RecurrentParams};
use crate::data::{
    build_manifest, group_split, label_space, read_manifest, synth_corpus, verify_no_leakage, write_manifest,
    DatasetKind, SampleRecord, Split,
};
use crate::dsp::container::{read_cryf, read_sidecar, sidecar_path, write_cryf, write_sidecar, FeatureSidecar};
use crate::dsp::pitch::{read_pitch_sidecar, sidecar_path as pitch_sidecar_path};
use crate::dsp::{load_wav, median_frames, resample_to_16k, FeatureExtractor, FeatureSubset};
use crate::fusion::{
    fit_temperature, fuse_union, read_logit_table, run_case_studies, CaseStudies, EnsembleDescriptor, EnsembleMember,
    FusionMode, LogitTable,
};
use crate::metrics::{argmax, nll, summarize, ConfusionMatrix, EvalReport, SeedRow};
use crate::model::{train, Checkpoint, Dataset};
use crate::util::config_hash;

type CmdResult = anyhow::Result<i32>;

pub(super) fn dispatch(cli: &Cli) -> CmdResult {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match &cli.command {
        Command::Synth(a) => synth(a, cfg),
        Command::Manifest(a) => manifest(a),
        Command::Split(a) => split(a, cfg),
        Command::Extract(a) => extract(a, cfg),
        Command::Train(a) => train_cmd(a, cfg),
        Command::Calibrate(a) => calibrate(a, cfg),
        Command::Fuse(a) => fuse(a, cfg),
        Command::Eval(a) => eval(a, cfg),
        Command::Casestudies(a) => casestudies(a, cfg),
        Command::Report(a) => report(a),
    }
}

#[derive(Serialize)]
struct Meta<'a, T: Serialize> {
    tool_version: &'a str,
    config_hash: &'a str,
    #[serde(flatten)]
    body: T,
}

fn write_json<T: Serialize>(path: &Path, config_hash: &str, body: T) -> anyhow::Result<()> {
    let meta = Meta { tool_version: crate::VERSION, config_hash, body };
    std::fs::write(path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    s.into()
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|v| v.trim().parse::<T>().map_err(|_| Error::Config(format!("bad {what} '{v}'"))))
        .collect()
}

fn synth(a: &SynthArgs, mut cfg: RunConfig) -> CmdResult {
    if let Some(s) = a.seed {
        cfg.synth.seed = s;
    }
    if let Some(s) = a.snr {
        cfg.synth.snr_db = s;
    }
    if let Some(n) = a.clips_per_class {
        cfg.synth.clips_per_class = n;
    }
    if let Some(s) = a.clip_seconds {
        cfg.synth.clip_seconds = s;
    }
    let records = synth_corpus(&cfg.synth, &a.out)?;
    let hash = config_hash(&cfg.synth)?;
    write_json(&meta_path(&a.out.join("manifest.jsonl")), &hash, &cfg.synth)?;
    println!("wrote {} clips to {}", records.len(), a.out.display());
    Ok(EXIT_OK)
}

fn manifest(a: &ManifestArgs) -> CmdResult {
    let kind: DatasetKind = a.dataset.parse()?;
    let built = build_manifest(&a.input, kind)?;
    write_manifest(&a.out, &built.records)?;
    println!("{} records, {} quarantined", built.records.len(), built.quarantine.len());
    for (path, why) in &built.quarantine {
        println!("  quarantined {path}: {why}");
    }
    Ok(EXIT_OK)
}

fn split(a: &SplitArgs, mut cfg: RunConfig) -> CmdResult {
    if let Some(f) = &a.fractions {
        let v: Vec<f64> = parse_list(f, "fraction")?;
        if v.len() != 3 {
            return Err(Error::Config(format!("expected three fractions, got {}", v.len())).into());
        }
        cfg.split.fractions = [v[0], v[1], v[2]];
    }
    if let Some(s) = a.seed {
        cfg.split.seed = s;
    }
    if a.no_stratify {
        cfg.split.stratify = false;
    }
    let records = if a.manifest.is_dir() {
        let built = build_manifest(&a.manifest, a.dataset.parse()?)?;
        if !built.quarantine.is_empty() {
            println!("{} files quarantined", built.quarantine.len());
        }
        built.records
    } else {
        read_manifest(&a.manifest)?
    };
    let out = group_split(&records, &cfg.split)?;
    let leaks = verify_no_leakage(&out.records);
    if !leaks.is_empty() {
        return Err(Error::Leakage(leaks).into());
    }
    for w in &out.warnings {
        println!("warning: {w}");
    }
    let dest = match (&a.out, a.manifest.is_dir()) {
        (Some(p), _) => p.clone(),
        (None, false) => a.manifest.clone(),
        (None, true) => a.manifest.join("manifest.jsonl"),
    };
    write_manifest(&dest, &out.records)?;
    let hash = config_hash(&cfg.split)?;
    write_json(&meta_path(&dest), &hash, &cfg.split)?;
    for s in Split::ASSIGNED {
        let n = out.records.iter().filter(|r| r.split == s).count();
        println!("{s}: {n} records");
    }
    Ok(EXIT_OK)
}

fn resolve(base: Option<&Path>, p: &str) -> PathBuf {
    let path = PathBuf::from(p);
    match base {
        Some(b) if path.is_relative() => b.join(path),
        _ => path,
    }
}

fn extract_one(rec: &SampleRecord, base: Option<&Path>, out_dir: &Path, ex: &FeatureExtractor, hash: &str) -> Result<String> {
    let audio_path = resolve(base, &rec.path);
    let stem = audio_path
        .file_stem()
        .ok_or_else(|| Error::Data(format!("{} has no file name", audio_path.display())))?
        .to_string_lossy()
        .into_owned();
    let cryf = out_dir.join(format!("{stem}.cryf"));
    let side = sidecar_path(&cryf);
    if cryf.exists() {
        if let Ok(s) = read_sidecar(&side) {
            if s.config_hash == hash {
                return Ok(cryf.to_string_lossy().into_owned());
            }
        }
    }
    let clip = load_wav(&audio_path)?;
    let rate = clip.sample_rate;
    let duration = clip.duration_s();
    let clip = resample_to_16k(&clip)?;
    let pitch_file = pitch_sidecar_path(&audio_path);
    let track = if pitch_file.exists() { Some(read_pitch_sidecar(&pitch_file)?) } else { None };
    let tensor = ex.extract(&clip, track.as_ref())?;
    write_cryf(&cryf, &tensor)?;
    write_sidecar(&side, &FeatureSidecar::new(&audio_path, rate, duration, tensor.frames, hash, ex.cfg.subset.names()))?;
    Ok(cryf.to_string_lossy().into_owned())
}

fn extract(a: &ExtractArgs, mut cfg: RunConfig) -> CmdResult {
    if let Some(f) = &a.features {
        cfg.features.subset = f.parse::<FeatureSubset>()?;
    }
    let mut records = read_manifest(&a.manifest)?;
    if cfg.features.median_frames {
        let durations: Vec<f64> = records.iter().map(|r| r.duration_s).collect();
        if let Some(t) = median_frames(&durations) {
            cfg.features.frames = t;
        }
    }
    let hash = config_hash(&cfg.features)?;
    let ex = FeatureExtractor::new(cfg.features.clone())?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;

    let mut stems = std::collections::HashSet::new();
    for r in &records {
        let stem = Path::new(&r.path).file_stem().map(|s| s.to_owned());
        if !stems.insert(stem) {
            return Err(Error::Data(format!("two records share the file stem of {}", r.path)).into());
        }
    }

    // bounded worker pool; results are stored by index so output order is fixed
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(records.len().max(1));
    let base = a.input.as_deref();
    let mut results: Vec<Option<Result<String>>> = (0..records.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let (records, ex, hash, out) = (&records, &ex, &hash, &a.out);
                scope.spawn(move || {
                    (w..records.len())
                        .step_by(workers)
                        .map(|i| (i, extract_one(&records[i], base, out, ex, hash)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("extraction worker panicked") {
                results[i] = Some(r);
            }
        }
    });

    let mut failures = Vec::new();
    for (rec, res) in records.iter_mut().zip(results) {
        match res.expect("every record processed") {
            Ok(p) => rec.features = Some(p),
            Err(e) => failures.push(format!("{}: {e}", rec.path)),
        }
    }
    let dest = a.manifest_out.clone().unwrap_or_else(|| a.out.join("manifest.jsonl"));
    write_manifest(&dest, &records)?;
    write_json(&meta_path(&dest), &hash, &cfg.features)?;
    println!("extracted {} of {} records", records.len() - failures.len(), records.len());
    for f in &failures {
        eprintln!("failed: {f}");
    }
    Ok(if failures.is_empty() { EXIT_OK } else { EXIT_PARTIAL })
}

fn load_features(rec: &SampleRecord) -> Result<(Vec<f32>, usize, usize)> {
    let path = rec
        .features
        .as_ref()
        .ok_or_else(|| Error::Data(format!("{} has no extracted features; run `crylmu extract` first", rec.path)))?;
    let t = read_cryf(Path::new(path))?;
    let (rows, frames) = t.shape();
    Ok((t.data.iter().map(|&v| v as f32).collect(), rows, frames))
}

fn dataset(records: &[&SampleRecord], labels: &[String]) -> Result<Dataset> {
    let mut ds: Option<Dataset> = None;
    for r in records {
        let (x, rows, frames) = load_features(r)?;
        let y = labels
            .binary_search(&r.label)
            .map_err(|_| Error::Label(format!("'{}' is not a known label", r.label)))?;
        ds.get_or_insert_with(|| Dataset::new(rows, frames)).push(x, y)?;
    }
    ds.ok_or_else(|| Error::Data("no records in split".into()))
}

fn train_cmd(a: &TrainArgs, mut cfg: RunConfig) -> CmdResult {
    if let Some(c) = &a.cell {
        cfg.model.cell = c.parse()?;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.train.max_epochs = e;
    }
    if let Some(p) = a.patience {
        cfg.train.patience = p;
    }
    if let Some(lr) = a.lr {
        cfg.train.lr = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(f) = &a.filters {
        let widths: Vec<usize> = parse_list(f, "filter width")?;
        cfg.model = cfg.model.with_filters(&widths);
    }
    if let Some(r) = a.hidden {
        cfg.model.r = r;
    }
    if let Some(f) = &a.features {
        cfg.model.feature_subset = f.parse()?;
    }
    let records = read_manifest(&a.manifest)?;
    let leaks = verify_no_leakage(&records);
    if !leaks.is_empty() {
        return Err(Error::Leakage(leaks).into());
    }
    let labels = label_space(&records);
    let pick = |s: Split| records.iter().filter(|r| r.split == s).collect::<Vec<_>>();
    let (tr, va) = (pick(Split::Train), pick(Split::Val));
    if tr.is_empty() || va.is_empty() {
        return Err(Error::Split("manifest needs non-empty train and val splits; run `crylmu split`".into()).into());
    }
    let train_set = dataset(&tr, &labels).context("loading training features")?;
    let val_set = dataset(&va, &labels).context("loading validation features")?;
    let (ckpt, report) = train(&train_set, &val_set, &labels, &cfg.model, &cfg.train)?;
    ckpt.save(&a.out)?;
    let rp = a.out.join("train_report.jsonl");
    std::fs::write(&rp, report.to_jsonl()?).map_err(|e| Error::io(&rp, e))?;
    let hash = cfg.hash()?;
    write_json(&a.out.join("run.json"), &hash, &cfg)?;
    println!(
        "best val macro-F1 {:.4} at epoch {} of {}{}",
        report.best_val_macro_f1,
        report.best_epoch,
        report.epochs.len(),
        if report.stopped_early { " (early stop)" } else { "" }
    );
    Ok(EXIT_OK)
}

fn split_filter(name: &str) -> Result<Option<Split>> {
    if name == "all" {
        Ok(None)
    } else {
        name.parse().map(Some)
    }
}

fn checkpoint_logits(ckpt: &Checkpoint, records: &[&SampleRecord], batch: usize) -> Result<Vec<Vec<f64>>> {
    let xs = records.iter().map(|r| load_features(r).map(|f| f.0)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&[f32]> = xs.iter().map(Vec::as_slice).collect();
    ckpt.logits(&refs, batch)
}

fn fusion_overrides(cfg: &mut RunConfig, tau: Option<f64>, mode: &Option<String>) -> Result<()> {
    if let Some(t) = tau {
        cfg.fusion.tau = t;
    }
    if let Some(m) = mode {
        cfg.fusion.mode = m.parse::<FusionMode>()?;
    }
    cfg.fusion.validate()
}

fn member_name(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into())
}

fn calibrate(a: &CalibrateArgs, mut cfg: RunConfig) -> CmdResult {
    fusion_overrides(&mut cfg, a.tau, &a.mode)?;
    if a.ckpts.len() != a.manifests.len() {
        return Err(Error::Config(format!("{} checkpoints but {} manifests", a.ckpts.len(), a.manifests.len())).into());
    }
    if a.ckpts.is_empty() && a.logits.is_empty() {
        return Err(Error::Config("nothing to calibrate: pass --ckpt/--manifest pairs or --logits".into()).into());
    }
    let which = split_filter(&a.split)?;
    let mut members = Vec::new();
    for (ck, mf) in a.ckpts.iter().zip(&a.manifests) {
        let ckpt = Checkpoint::load(ck)?;
        let records = read_manifest(mf)?;
        let val: Vec<&SampleRecord> = records.iter().filter(|r| which.is_none_or(|s| r.split == s)).collect();
        let z = checkpoint_logits(&ckpt, &val, cfg.train.eval_batch_size)?;
        let y = val
            .iter()
            .map(|r| {
                ckpt.labels.binary_search(&r.label).map_err(|_| Error::Label(format!("'{}' unknown to {}", r.label, ck.display())))
            })
            .collect::<Result<Vec<_>>>()?;
        let fit = fit_temperature(&z, &y)?;
        members.push(EnsembleMember {
            name: member_name(ck),
            checkpoint: Some(ck.to_string_lossy().into_owned()),
            logits: None,
            labels: ckpt.labels.clone(),
            temperature: fit.temperature,
            nll_before: fit.nll_before,
            nll_after: fit.nll_after,
            n_val: y.len(),
        });
    }
    for lp in &a.logits {
        let table = read_logit_table(lp)?;
        let y = table.label_indices()?;
        let fit = fit_temperature(&table.logits, &y)?;
        members.push(EnsembleMember {
            name: member_name(lp),
            checkpoint: None,
            logits: Some(lp.to_string_lossy().into_owned()),
            labels: table.classes.clone(),
            temperature: fit.temperature,
            nll_before: fit.nll_before,
            nll_after: fit.nll_after,
            n_val: y.len(),
        });
    }
    for m in &members {
        println!("{}: T = {:.4}, val NLL {:.4} -> {:.4} ({} samples)", m.name, m.temperature, m.nll_before, m.nll_after, m.n_val);
    }
    let desc = EnsembleDescriptor { tool_version: crate::VERSION.into(), config_hash: cfg.hash()?, fusion: cfg.fusion, members };
    desc.label_space()?;
    desc.save(&a.out)?;
    Ok(EXIT_OK)
}

fn casestudies_report(fixture: Option<&Path>, cfg: &RunConfig, calibrate: bool, json: Option<&Path>) -> CmdResult {
    let studies = match fixture {
        Some(p) => CaseStudies::from_json(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => CaseStudies::bundled(),
    };
    let report = run_case_studies(&studies, &cfg.fusion, calibrate)?;
    print!("{}", report.render());
    if let Some(p) = json {
        write_json(p, &cfg.hash()?, &report)?;
    }
    report.check()?;
    Ok(EXIT_OK)
}

fn fuse(a: &FuseArgs, mut cfg: RunConfig) -> CmdResult {
    fusion_overrides(&mut cfg, a.tau, &a.mode)?;
    if a.cases {
        return casestudies_report(None, &cfg, !a.no_calibration, None);
    }
    let (Some(ens), Some(mf), Some(out)) = (&a.ensemble, &a.manifest, &a.out) else {
        return Err(Error::Config("fuse needs --ensemble, --manifest and --out (or --cases)".into()).into());
    };
    let mut desc = EnsembleDescriptor::load(ens)?;
    if !a.logits.is_empty() {
        if a.logits.len() != desc.members.len() {
            return Err(Error::Config(format!("{} logit tables for {} members", a.logits.len(), desc.members.len())).into());
        }
        for (m, p) in desc.members.iter_mut().zip(&a.logits) {
            m.checkpoint = None;
            m.logits = Some(p.to_string_lossy().into_owned());
        }
    }
    let space = desc.label_space()?;
    let temps: Vec<f64> = if a.no_calibration { vec![1.0; desc.members.len()] } else { desc.temperatures() };
    let records = read_manifest(mf)?;
    let which = split_filter(&a.split)?;
    let chosen: Vec<&SampleRecord> = records.iter().filter(|r| which.is_none_or(|s| r.split == s)).collect();
    if chosen.is_empty() {
        return Err(Error::Config(format!("no '{}' records in {}", a.split, mf.display())).into());
    }

    // per member, logits for every chosen record
    let mut member_logits: Vec<Vec<Vec<f64>>> = Vec::new();
    for m in &desc.members {
        let z = if let Some(lp) = &m.logits {
            let table: LogitTable = read_logit_table(Path::new(lp))?;
            if table.classes != m.labels {
                return Err(Error::Config(format!("{lp}: classes {:?} differ from member labels {:?}", table.classes, m.labels)).into());
            }
            let index: HashMap<&str, usize> = table.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
            chosen
                .iter()
                .map(|r| {
                    index
                        .get(r.path.as_str())
                        .map(|&i| table.logits[i].clone())
                        .ok_or_else(|| Error::Config(format!("{lp} has no row for {}", r.path)))
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            let ck = m.checkpoint.as_ref().expect("validated on load");
            let ckpt = Checkpoint::load(Path::new(ck))?;
            if ckpt.labels != m.labels {
                return Err(Error::Config(format!("{ck}: labels changed since calibration")).into());
            }
            checkpoint_logits(&ckpt, &chosen, cfg.train.eval_batch_size)?
        };
        member_logits.push(z);
    }

    let mut w = csv::Writer::from_path(out)?;
    let mut header = vec!["sample_id".to_string(), "label".into(), "pred".into()];
    header.extend(space.union.iter().map(|u| format!("p.{u}")));
    for m in &desc.members {
        header.extend(m.labels.iter().map(|l| format!("{}.{l}", m.name)));
    }
    w.write_record(&header)?;
    for (i, r) in chosen.iter().enumerate() {
        let z: Vec<&[f64]> = member_logits.iter().map(|m| m[i].as_slice()).collect();
        let fused = fuse_union(&z, &temps, &space, &cfg.fusion)?;
        let mut row = vec![r.path.clone(), r.label.clone(), space.union[fused.argmax()].clone()];
        row.extend(fused.posterior.iter().map(|p| format!("{p:.9}")));
        for mp in &fused.model_posteriors {
            row.extend(mp.iter().map(|p| format!("{p:.9}")));
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(out, e))?;
    #[derive(Serialize)]
    struct FuseMeta<'a> {
        ensemble: &'a EnsembleDescriptor,
        calibrated: bool,
        fusion: crate::fusion::FusionConfig,
        samples: usize,
    }
    write_json(
        &meta_path(out),
        &cfg.hash()?,
        FuseMeta { ensemble: &desc, calibrated: !a.no_calibration, fusion: cfg.fusion, samples: chosen.len() },
    )?;
    println!("fused {} samples over {} classes -> {}", chosen.len(), space.union.len(), out.display());
    Ok(EXIT_OK)
}

/// True labels, predictions and (when present) posteriors from a preds CSV.
struct Predictions {
    classes: Vec<String>,
    truth: Vec<String>,
    pred: Vec<String>,
    probs: Option<Vec<Vec<f64>>>,
}

fn read_predictions(path: &Path, labels: Option<&HashMap<String, String>>) -> Result<Predictions> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let col = |name: &str| header.iter().position(|h| h == name);
    let (Some(id_col), Some(label_col), Some(pred_col)) = (col("sample_id"), col("label"), col("pred")) else {
        return Err(Error::Data(format!("{}: needs sample_id, label and pred columns", path.display())));
    };
    let prob_cols: Vec<(usize, String)> =
        header.iter().enumerate().filter_map(|(i, h)| h.strip_prefix("p.").map(|c| (i, c.to_string()))).collect();
    let mut truth = Vec::new();
    let mut pred = Vec::new();
    let mut probs = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let id = &rec[id_col];
        let label = match labels {
            Some(map) => match map.get(id) {
                Some(l) => l.clone(),
                None => continue,
            },
            None => rec[label_col].to_string(),
        };
        truth.push(label);
        pred.push(rec[pred_col].to_string());
        if !prob_cols.is_empty() {
            let row = prob_cols
                .iter()
                .map(|(i, _)| rec[*i].trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            probs.push(row);
        }
    }
    if truth.is_empty() {
        return Err(Error::Data(format!("{}: no predictions to evaluate", path.display())));
    }
    let classes = if prob_cols.is_empty() {
        let mut c: Vec<String> = truth.iter().chain(&pred).cloned().collect();
        c.sort();
        c.dedup();
        c
    } else {
        prob_cols.into_iter().map(|(_, c)| c).collect()
    };
    Ok(Predictions { classes, truth, pred, probs: (!probs.is_empty()).then_some(probs) })
}

fn evaluate(p: &Predictions) -> Result<EvalReport> {
    let index = |l: &str| {
        p.classes
            .iter()
            .position(|c| c == l)
            .ok_or_else(|| Error::Label(format!("'{l}' is not one of {:?}", p.classes)))
    };
    let truth = p.truth.iter().map(|l| index(l)).collect::<Result<Vec<_>>>()?;
    let pred = match &p.probs {
        Some(rows) => rows.iter().map(|r| argmax(r)).collect(),
        None => p.pred.iter().map(|l| index(l)).collect::<Result<Vec<_>>>()?,
    };
    let cm = ConfusionMatrix::from_indices(p.classes.clone(), &truth, &pred)?;
    let nll = p.probs.as_ref().map(|rows| nll(rows, &truth)).transpose()?;
    Ok(EvalReport::new(cm, nll))
}

fn eval(a: &EvalArgs, cfg: RunConfig) -> CmdResult {
    let labels: Option<HashMap<String, String>> = match &a.manifest {
        Some(m) => Some(read_manifest(m)?.into_iter().map(|r| (r.path, r.label)).collect()),
        None => None,
    };
    let seeds: Option<Vec<u64>> = a.seeds.as_deref().map(|s| parse_list(s, "seed")).transpose()?;
    if let Some(s) = &seeds {
        if s.len() != a.preds.len() {
            return Err(Error::Config(format!("{} seeds for {} prediction files", s.len(), a.preds.len())).into());
        }
    }
    let mut reports = Vec::new();
    for p in &a.preds {
        let preds = read_predictions(p, labels.as_ref())?;
        reports.push(evaluate(&preds)?);
    }
    let sweep = (reports.len() > 1).then(|| {
        let seeds = seeds.clone().unwrap_or_else(|| (0..reports.len() as u64).collect());
        summarize(
            seeds
                .iter()
                .zip(&reports)
                .map(|(&seed, r)| {
                    let mut metrics = BTreeMap::from([("macro_f1".to_string(), r.macro_f1), ("accuracy".to_string(), r.accuracy)]);
                    if let Some(n) = r.nll {
                        metrics.insert("nll".into(), n);
                    }
                    SeedRow { seed, metrics }
                })
                .collect(),
        )
    });
    #[derive(Serialize)]
    struct EvalOut<'a> {
        reports: &'a [EvalReport],
        #[serde(skip_serializing_if = "Option::is_none")]
        seed_sweep: Option<crate::metrics::SeedSweep>,
    }
    for (p, r) in a.preds.iter().zip(&reports) {
        println!("{}: macro-F1 {:.4}, accuracy {:.4}", p.display(), r.macro_f1, r.accuracy);
    }
    if let Some(s) = &sweep {
        for (k, (m, sd)) in &s.summary {
            println!("{k}: {m:.4} ± {sd:.4} over {} runs", s.rows.len());
        }
    }
    write_json(&a.out, &cfg.hash()?, EvalOut { reports: &reports, seed_sweep: sweep })?;
    Ok(EXIT_OK)
}

fn casestudies(a: &CaseArgs, mut cfg: RunConfig) -> CmdResult {
    fusion_overrides(&mut cfg, a.tau, &a.mode)?;
    let code = casestudies_report(a.fixture.as_deref(), &cfg, !a.no_calibration, a.json.as_deref())?;
    if !a.no_calibration {
        // calibration-off comparison, informational only
        let studies = match &a.fixture {
            Some(p) => CaseStudies::from_json(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
            None => CaseStudies::bundled(),
        };
        let off = run_case_studies(&studies, &cfg.fusion, false)?;
        println!("without calibration:");
        for o in &off.outcomes {
            println!("  {:<36} -> {}", o.name, o.predicted);
        }
    }
    Ok(code)
}

fn report(a: &ReportArgs) -> CmdResult {
    let lmu = LmuCell::<f64>::new(LmuConfig::default())?;
    let lstm = LstmCell::new(LstmConfig::default())?;
    let (nl, ns) = (lmu.count_recurrent_params(), lstm.count_recurrent_params());
    println!(
        "recurrent parameters at p=32, r=64: LMU (d=64, q=1) {nl}, LSTM {ns}, ratio {:.2}%",
        100.0 * nl as f64 / ns as f64
    );
    if let Some(dir) = &a.ckpt {
        let ckpt = Checkpoint::load(dir)?;
        let net = ckpt.network()?;
        println!("checkpoint {}", dir.display());
        println!("  cell: {:?}, filters {:?}, r {}", ckpt.model.cell, ckpt.model.filters, ckpt.model.r);
        println!("  labels: {}", ckpt.labels.join(", "));
        println!("  input: {} x {}", ckpt.n_features, ckpt.frames);
        println!("  trainable parameters: {}", ckpt.store.num_trainable());
        if let Some(c) = &net.cell {
            println!("  learned recurrent parameters: {}", c.count_recurrent_params());
        }
        println!("  best val macro-F1: {:.4}", ckpt.best_val_macro_f1);
        println!("  config hash: {}", ckpt.config_hash);
    }
    Ok(EXIT_OK)
}
