//! The end-to-end commands behind the CLI, as library functions.
//!
//! Every command takes a resolved [`RunConfig`] (seed already fixed), writes
//! its outputs, and copies the resolved config next to them.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::attention::Mode;
use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, RESOLVED_NAME};
use crate::error::{Error, Result};
use crate::ingest::{filter_plausible, make_example, parse_cohort, split_cohort, write_cohort, CohortSplit, PatientRecord, TrainingExample};
use crate::metrics::{evaluate, table_text, write_points, write_table_csv, MetricsReport};
use crate::model::{Ablation, Draw, Model};
use crate::rng::{derive_seed, stream};
use crate::synth::{generate, write_ground_truth};
use crate::train::{split_examples, train_examples, TrainReport};
use crate::uncertainty::{calibration_check, predict_example, prediction_rows, write_predictions};

fn seed(cfg: &RunConfig) -> Result<u64> {
    cfg.seed.ok_or_else(|| Error::Config("seed not resolved".into()))
}

fn require_dir(dir: &Path) -> Result<()> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(Error::Config(format!("output directory {} does not exist", dir.display())))
    }
}

fn parent(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn write_resolved(cfg: &RunConfig, dir: &Path) -> Result<()> {
    fs::write(dir.join(RESOLVED_NAME), cfg.to_text())?;
    Ok(())
}

/// Synthetic cohort CSV plus the ground-truth sidecar.
pub fn cmd_generate(cfg: &RunConfig) -> Result<()> {
    seed(cfg)?;
    for p in [&cfg.paths.data, &cfg.paths.truth] {
        require_dir(&parent(p))?;
    }
    let synth = crate::synth::GeneratorConfig { onset: cfg.onset, ..cfg.synth.clone() };
    let (cohort, truth) = generate(&synth)?;
    let mut w = create(&cfg.paths.data)?;
    write_cohort(&mut w, &cohort)?;
    w.flush()?;
    let mut w = create(&cfg.paths.truth)?;
    write_ground_truth(&mut w, &truth)?;
    w.flush()?;
    write_resolved(cfg, &parent(&cfg.paths.data))
}

pub fn load_cohort(path: &Path) -> Result<Vec<PatientRecord>> {
    let file = File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let cohort = parse_cohort(BufReader::new(file))?;
    if cohort.is_empty() {
        return Err(Error::Data(format!("{}: no patients", path.display())));
    }
    Ok(cohort)
}

/// Filtered cohort and its patient-level split.
pub struct Prepared {
    pub dropped: usize,
    pub split: CohortSplit,
    pub train: Vec<TrainingExample>,
    pub val: Vec<TrainingExample>,
    pub test: Vec<TrainingExample>,
}

pub fn prepare_cohort(cohort: Vec<PatientRecord>, cfg: &RunConfig) -> Result<Prepared> {
    let (kept, dropped) = filter_plausible(cohort, cfg.onset);
    let split = split_cohort(kept, derive_seed(seed(cfg)?, stream::SPLIT))?;
    let (train, val, test) = split_examples(&split, cfg.onset, &cfg.normalizer)?;
    Ok(Prepared { dropped, split, train, val, test })
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    prepare_cohort(load_cohort(&cfg.paths.data)?, cfg)
}

#[derive(Debug, Serialize)]
struct SplitSummary<'a> {
    dropped: usize,
    train: Vec<&'a str>,
    val: Vec<&'a str>,
    test: Vec<&'a str>,
}

fn patient_ids(ps: &[PatientRecord]) -> Vec<&str> {
    ps.iter().map(|p| p.patient_id.as_str()).collect()
}

/// Parse, filter and split; writes the patient ids of each part.
pub fn cmd_ingest(cfg: &RunConfig) -> Result<Prepared> {
    require_dir(&cfg.paths.out)?;
    let prepared = prepare(cfg)?;
    let summary = SplitSummary {
        dropped: prepared.dropped,
        train: patient_ids(&prepared.split.train),
        val: patient_ids(&prepared.split.val),
        test: patient_ids(&prepared.split.test),
    };
    write_json(&cfg.paths.out.join("split.json"), &summary)?;
    write_resolved(cfg, &cfg.paths.out)?;
    Ok(prepared)
}

pub fn train_model(cfg: &RunConfig, prepared: &Prepared) -> Result<(Model, TrainReport)> {
    let train = crate::train::TrainConfig { seed: seed(cfg)?, ..cfg.train.clone() };
    train_examples(&prepared.train, &prepared.val, &cfg.model, &train)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainReport> {
    require_dir(&cfg.paths.out)?;
    require_dir(&parent(&cfg.paths.checkpoint))?;
    let prepared = prepare(cfg)?;
    let (model, report) = train_model(cfg, &prepared)?;
    Checkpoint::from_model(&model, cfg.normalizer, cfg.onset)?.save(&cfg.paths.checkpoint)?;
    write_json(&cfg.paths.out.join("train_report.json"), &report)?;
    write_resolved(cfg, &cfg.paths.out)?;
    Ok(report)
}

/// Loads the checkpoint; `--deterministic` runs force mean weights.
pub fn load_model(cfg: &RunConfig) -> Result<Model> {
    let mut model = Checkpoint::load(&cfg.paths.checkpoint)?.into_model()?;
    if cfg.model.attention.mode == Mode::Deterministic {
        model.config.attention.mode = Mode::Deterministic;
    }
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Calibration {
    pub samples: usize,
    pub z: f64,
    pub coverage: [f64; 4],
}

fn write_metrics(dir: &Path, stem: &str, reports: &[MetricsReport]) -> Result<()> {
    let mut w = create(&dir.join(format!("{stem}_table.csv")))?;
    write_table_csv(&mut w, reports, false)?;
    w.flush()?;
    let mut w = create(&dir.join(format!("{stem}_table_raw.csv")))?;
    write_table_csv(&mut w, reports, true)?;
    w.flush()?;
    let text = format!("{}\n{}", table_text(reports, false), table_text(reports, true));
    fs::write(dir.join(format!("{stem}_table.txt")), text)?;
    Ok(())
}

/// Point metrics, point predictions and band coverage on the test split.
pub fn evaluate_model(cfg: &RunConfig, model: &Model, test: &[TrainingExample], dir: &Path) -> Result<(MetricsReport, Calibration)> {
    let (report, points) = evaluate(model, test, &cfg.normalizer)?;
    let coverage = calibration_check(model, test, cfg.samples, cfg.z, seed(cfg)?)?;
    let calibration = Calibration { samples: cfg.samples, z: cfg.z, coverage };
    write_json(&dir.join("metrics.json"), &report)?;
    write_metrics(dir, "metrics", std::slice::from_ref(&report))?;
    let mut w = create(&dir.join("point_predictions.csv"))?;
    write_points(&mut w, &points)?;
    w.flush()?;
    write_json(&dir.join("calibration.json"), &calibration)?;
    Ok((report, calibration))
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<(MetricsReport, Calibration)> {
    require_dir(&cfg.paths.out)?;
    let model = load_model(cfg)?;
    let prepared = prepare(cfg)?;
    let out = evaluate_model(cfg, &model, &prepared.test, &cfg.paths.out)?;
    write_resolved(cfg, &cfg.paths.out)?;
    Ok(out)
}

/// Example for one patient from the filtered cohort.
fn patient_example(cfg: &RunConfig, id: &str) -> Result<TrainingExample> {
    let (kept, _) = filter_plausible(load_cohort(&cfg.paths.data)?, cfg.onset);
    let patient = kept.iter().find(|p| p.patient_id == id).ok_or_else(|| Error::UnknownPatient(id.into()))?;
    make_example(patient, cfg.onset, &cfg.normalizer)
}

/// Monte-Carlo predictions with uncertainty for the test split, or for one
/// patient of the cohort. Returns the written CSV path.
pub fn cmd_predict(cfg: &RunConfig, patient: Option<&str>) -> Result<PathBuf> {
    require_dir(&cfg.paths.out)?;
    let model = load_model(cfg)?;
    let (examples, name) = match patient {
        Some(id) => (vec![patient_example(cfg, id)?], format!("predictions_{id}.csv")),
        None => (prepare(cfg)?.test, "predictions.csv".to_string()),
    };
    let mut rows = Vec::new();
    for ex in &examples {
        let p = predict_example(&model, ex, cfg.samples, seed(cfg)?)?;
        rows.extend(prediction_rows(&ex.patient_id, &p, cfg.z, &cfg.normalizer));
    }
    let path = cfg.paths.out.join(name);
    let mut w = create(&path)?;
    write_predictions(&mut w, &rows)?;
    w.flush()?;
    write_resolved(cfg, &cfg.paths.out)?;
    Ok(path)
}

/// Trains and evaluates every variant on the same split and seed.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<Vec<MetricsReport>> {
    require_dir(&cfg.paths.out)?;
    let prepared = prepare(cfg)?;
    let mut reports = Vec::new();
    for ablation in Ablation::ALL {
        let mut variant = cfg.clone();
        variant.train.ablation = ablation;
        let dir = cfg.paths.out.join("ablation").join(ablation.as_str());
        fs::create_dir_all(&dir)?;
        let (model, train_report) = train_model(&variant, &prepared)?;
        Checkpoint::from_model(&model, cfg.normalizer, cfg.onset)?.save(&dir.join("checkpoint.json"))?;
        write_json(&dir.join("train_report.json"), &train_report)?;
        let (report, _) = evaluate_model(&variant, &model, &prepared.test, &dir)?;
        reports.push(report);
    }
    write_json(&cfg.paths.out.join("ablation_metrics.json"), &reports)?;
    write_metrics(&cfg.paths.out, "ablation", &reports)?;
    write_resolved(cfg, &cfg.paths.out)?;
    Ok(reports)
}

/// Post-softmax attention per layer and head at the mean weights, one CSV
/// per head with token labels on both axes.
pub fn cmd_attention_dump(cfg: &RunConfig, patient: &str) -> Result<Vec<PathBuf>> {
    require_dir(&cfg.paths.out)?;
    let model = load_model(cfg)?;
    let ex = patient_example(cfg, patient)?;
    let fwd = model.forward(&ex, Draw::Mean)?;
    let labels = fwd.token_labels();
    let dir = cfg.paths.out.join("attention");
    fs::create_dir_all(&dir)?;
    let mut written = Vec::new();
    for (l, heads) in fwd.attention_maps().iter().enumerate() {
        for (h, probs) in heads.iter().enumerate() {
            let path = dir.join(format!("{patient}_layer{l}_head{h}.csv"));
            let mut w = csv::Writer::from_writer(create(&path)?);
            let mut header = vec![String::new()];
            header.extend(labels.iter().cloned());
            w.write_record(&header)?;
            for (label, row) in labels.iter().zip(probs.rows()) {
                let mut rec = vec![label.clone()];
                rec.extend(row.iter().map(|v| v.to_string()));
                w.write_record(&rec)?;
            }
            w.flush()?;
            written.push(path);
        }
    }
    write_resolved(cfg, &cfg.paths.out)?;
    Ok(written)
}
