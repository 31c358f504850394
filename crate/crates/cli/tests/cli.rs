use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_bayesmtr"));
    c.env_remove("BAYESMTR_SEED");
    c
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    /// A small cohort and short training so each command runs in seconds.
    fn new(extra: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("out")).unwrap();
        let cfg = format!(
            "seed = 3\npaths.data = cohort.csv\npaths.truth = truth.csv\npaths.out = out\n\
             paths.checkpoint = out/checkpoint.json\nsynth.n_patients = 40\ntrain.epochs = 2\n\
             uncertainty.samples = 5\n{extra}"
        );
        fs::write(dir.path().join("run.cfg"), cfg).unwrap();
        Workspace { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        let cfg = self.path("run.cfg");
        bin().arg("--config").arg(cfg).args(args).output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        out
    }
}

fn report(ws: &Workspace) -> serde_json::Value {
    serde_json::from_str(&read(&ws.path("out/train_report.json"))).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn read(p: &Path) -> String {
    fs::read_to_string(p).unwrap()
}

#[test]
fn generate_writes_files_deterministically() {
    let ws = Workspace::new("");
    ws.ok(&["generate"]);
    let first = (read(&ws.path("cohort.csv")), read(&ws.path("truth.csv")));
    assert!(first.0.starts_with("patient_id,"));
    assert!(ws.path("resolved_config.txt").exists());
    ws.ok(&["generate"]);
    assert_eq!(first, (read(&ws.path("cohort.csv")), read(&ws.path("truth.csv"))));
}

#[test]
fn missing_output_directory_is_a_config_error() {
    let ws = Workspace::new("");
    let cfg = read(&ws.path("run.cfg")).replace("paths.data = cohort.csv", "paths.data = nowhere/cohort.csv");
    fs::write(ws.path("run.cfg"), cfg).unwrap();
    assert_eq!(code(&ws.run(&["generate"])), 2);
}

#[test]
fn seed_is_required_and_flag_wins() {
    let ws = Workspace::new("");
    let cfg = read(&ws.path("run.cfg")).replace("seed = 3\n", "");
    fs::write(ws.path("run.cfg"), cfg).unwrap();
    assert_eq!(code(&ws.run(&["generate"])), 2);

    let out = bin()
        .arg("--config")
        .arg(ws.path("run.cfg"))
        .arg("generate")
        .env("BAYESMTR_SEED", "12")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(read(&ws.path("resolved_config.txt")).starts_with("seed = 12\n"));

    let out = bin()
        .arg("--config")
        .arg(ws.path("run.cfg"))
        .args(["--seed", "99", "generate"])
        .env("BAYESMTR_SEED", "12")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(read(&ws.path("resolved_config.txt")).starts_with("seed = 99\n"));
}

#[test]
fn config_seed_beats_environment() {
    let ws = Workspace::new("");
    let out = bin().arg("--config").arg(ws.path("run.cfg")).arg("generate").env("BAYESMTR_SEED", "12").output().unwrap();
    assert!(out.status.success());
    assert!(read(&ws.path("resolved_config.txt")).starts_with("seed = 3\n"));
}

#[test]
fn bad_config_key_exits_2() {
    let ws = Workspace::new("train.nonsense = 1\n");
    assert_eq!(code(&ws.run(&["generate"])), 2);
}

#[test]
fn corrupt_csv_exits_3() {
    let ws = Workspace::new("");
    fs::write(ws.path("cohort.csv"), "patient_id,visit_date\nP1,not-a-date\n").unwrap();
    assert_eq!(code(&ws.run(&["train"])), 3);
    assert_eq!(code(&ws.run(&["ingest"])), 3);
    fs::remove_file(ws.path("cohort.csv")).unwrap();
    assert_eq!(code(&ws.run(&["ingest"])), 3);
}

#[test]
fn missing_checkpoint_exits_4() {
    let ws = Workspace::new("");
    ws.ok(&["generate"]);
    assert_eq!(code(&ws.run(&["evaluate"])), 4);
    assert_eq!(code(&ws.run(&["predict"])), 4);
    assert_eq!(code(&ws.run(&["attention-dump", "--patient", "P00000"])), 4);
}

#[test]
fn full_pipeline() {
    let ws = Workspace::new("");
    // Back to the default epoch count: the report carries one entry per epoch.
    let cfg = read(&ws.path("run.cfg")).replace("train.epochs = 2\n", "");
    fs::write(ws.path("run.cfg"), cfg).unwrap();
    ws.ok(&["generate"]);
    let ingest = ws.ok(&["ingest"]);
    assert!(String::from_utf8_lossy(&ingest.stdout).contains("train 24 / val 8 / test 8"));
    ws.ok(&["train"]);
    let r = report(&ws);
    assert_eq!(r["epochs"].as_array().unwrap().len(), 50);
    assert_eq!(r["variant"], "full");
    assert!(read(&ws.path("out/checkpoint.json")).contains("\"format\":\"bayesmtr-checkpoint\""));

    let eval = ws.ok(&["evaluate"]);
    assert!(String::from_utf8_lossy(&eval.stdout).contains("MBT (full)"));
    for f in ["metrics.json", "metrics_table.csv", "metrics_table_raw.csv", "metrics_table.txt", "point_predictions.csv", "calibration.json", "resolved_config.txt"] {
        assert!(ws.path("out").join(f).exists(), "{f}");
    }

    ws.ok(&["predict"]);
    let preds = read(&ws.path("out/predictions.csv"));
    assert!(preds.starts_with("patient_id,biomarker,mean,epistemic_var,aleatoric_var,lower,upper,unit\n"));
    // 8 test patients x 4 biomarkers x {normalized, raw}.
    assert_eq!(preds.lines().count(), 1 + 8 * 4 * 2);

    let first_patient = preds.lines().nth(1).unwrap().split(',').next().unwrap().to_string();
    ws.ok(&["predict", "--patient", &first_patient]);
    assert_eq!(read(&ws.path(&format!("out/predictions_{first_patient}.csv"))).lines().count(), 9);
    assert_eq!(code(&ws.run(&["predict", "--patient", "nobody"])), 5);
    assert_eq!(code(&ws.run(&["attention-dump", "--patient", "nobody"])), 5);

    let dump = ws.ok(&["attention-dump", "--patient", &first_patient]);
    let files: Vec<String> = String::from_utf8_lossy(&dump.stdout).lines().map(str::to_string).collect();
    assert_eq!(files.len(), 4);
    for f in files {
        let text = read(Path::new(&f));
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(header[1], "CLS");
        assert_eq!(header[2], "DEM:gender");
        assert!(header[5].starts_with("V0:sys"));
        for line in lines {
            let cells: Vec<&str> = line.split(',').collect();
            let sum: f64 = cells[1..].iter().map(|c| c.parse::<f64>().unwrap()).sum();
            assert!((sum - 1.0).abs() < 1e-6, "{sum}");
        }
    }
}

#[test]
fn ablation_variant_is_recorded() {
    let ws = Workspace::new("train.ablation = no_deepmtr\n");
    ws.ok(&["generate"]);
    ws.ok(&["train"]);
    let r = report(&ws);
    assert_eq!(r["variant"], "no_deepmtr");
    assert_eq!(r["epochs"].as_array().unwrap().len(), 2);
}

#[test]
fn ablate_emits_three_rows() {
    let ws = Workspace::new("");
    ws.ok(&["generate"]);
    let out = ws.ok(&["ablate"]);
    let table = read(&ws.path("out/ablation_table.csv"));
    assert_eq!(table.lines().count(), 4);
    for label in ["MBT (full)", "w/o Bayesian", "w/o DeepMTR"] {
        assert!(table.contains(label));
        assert!(String::from_utf8_lossy(&out.stdout).contains(label));
    }
    for v in ["full", "no_bayesian", "no_deepmtr"] {
        assert!(ws.path("out/ablation").join(v).join("metrics.json").exists());
    }
}

#[test]
fn train_and_evaluate_are_reproducible() {
    let ws = Workspace::new("");
    ws.ok(&["generate"]);
    let mut runs = Vec::new();
    for _ in 0..2 {
        ws.ok(&["train"]);
        ws.ok(&["evaluate"]);
        runs.push((
            fs::read(ws.path("out/metrics.json")).unwrap(),
            fs::read(ws.path("out/metrics_table.csv")).unwrap(),
            fs::read(ws.path("out/calibration.json")).unwrap(),
            fs::read(ws.path("out/checkpoint.json")).unwrap(),
        ));
    }
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn deterministic_flag_removes_epistemic_spread() {
    let ws = Workspace::new("");
    ws.ok(&["generate"]);
    ws.ok(&["train"]);
    ws.ok(&["--deterministic", "predict"]);
    let preds = read(&ws.path("out/predictions.csv"));
    for line in preds.lines().skip(1) {
        let epistemic: f64 = line.split(',').nth(3).unwrap().parse().unwrap();
        assert_eq!(epistemic, 0.0);
    }
    assert!(read(&ws.path("out/resolved_config.txt")).contains("model.mode = deterministic"));
}
