use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fpgate::baselines::{fit_baseline, score_baseline, BaselineSpec};
use fpgate::dataio::{load_dataset, save_dataset, PayloadFormat};
use fpgate::eval::{roc_auc, ScoredSet};
use fpgate::{EncoderModel, FlowConfig, FlowModel, Pipeline};
use tempfile::TempDir;

fn fpgate(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fpgate"))
        .args(args)
        .arg("--log-level")
        .arg("warn")
        .current_dir(dir)
        .env_remove("FPGATE_OUT")
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], dir: &Path) -> Output {
    let out = fpgate(args, dir);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(args: &[&str], dir: &Path) -> i32 {
    fpgate(args, dir).status.code().expect("exit code")
}

fn small_spec(dir: &Path, d_in: usize, with_fp: bool) -> PathBuf {
    let mut spec = fpgate::dataio::synth::SynthSpec::preset(fpgate::dataio::synth::Preset::Default, 3);
    spec.d_in = d_in;
    spec.tp_count = 200;
    if with_fp {
        for c in &mut spec.fp_classes {
            c.count = 40;
        }
    } else {
        spec.fp_classes.clear();
    }
    let p = dir.join(format!("spec_{d_in}_{with_fp}.json"));
    fs::write(&p, serde_json::to_string(&spec).unwrap()).unwrap();
    p
}

fn synth_small(dir: &Path, name: &str, d_in: usize, with_fp: bool) -> PathBuf {
    let spec = small_spec(dir, d_in, with_fp);
    ok(&["synth", "--spec", spec.to_str().unwrap(), "--out", name], dir);
    dir.join(name).join("dataset.json")
}

fn read_scores(path: &Path) -> BTreeMap<u64, Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let cols: Vec<String> = l.split(',').map(str::to_string).collect();
            (cols[0].parse().unwrap(), cols[1..].to_vec())
        })
        .collect()
}

#[test]
fn synth_default_writes_reloadable_dataset() {
    let tmp = TempDir::new().unwrap();
    ok(&["synth", "--out", "d"], tmp.path());
    let ds = load_dataset(&tmp.path().join("d/dataset.json")).unwrap();
    assert_eq!(ds.len(), 2000 + 3 * 300);
    assert_eq!(ds.d_in(), 16);
    for f in ["config.json", "inputs.json", "run.log", "dataset.csv"] {
        assert!(tmp.path().join("d").join(f).exists(), "missing {f}");
    }
}

#[test]
fn synth_same_seed_is_byte_identical() {
    let tmp = TempDir::new().unwrap();
    for (out, fmt) in [("a", "csv"), ("b", "csv"), ("c", "binary"), ("e", "binary")] {
        ok(&["synth", "--seed", "7", "--format", fmt, "--out", out], tmp.path());
    }
    let read = |p: &str| fs::read(tmp.path().join(p)).unwrap();
    assert_eq!(read("a/dataset.csv"), read("b/dataset.csv"));
    assert_eq!(read("c/dataset.bin"), read("e/dataset.bin"));
    ok(&["synth", "--seed", "8", "--out", "f"], tmp.path());
    assert_ne!(read("a/dataset.csv"), read("f/dataset.csv"));
}

#[test]
fn hardness_presets_span_difficulty() {
    let tmp = TempDir::new().unwrap();
    let mut aucs = Vec::new();
    for h in ["easy", "hard"] {
        ok(&["synth", "--hardness", h, "--out", h], tmp.path());
        let ds = load_dataset(&tmp.path().join(h).join("dataset.json")).unwrap();
        let tp = ds.indices_where(|s| !s.label.is_fp());
        let model = fit_baseline(&BaselineSpec::Gaussian { shrinkage: 0.05 }, &ds.features::<f64>(&tp)).unwrap();
        let all: Vec<usize> = (0..ds.len()).collect();
        let scores = score_baseline(&model, &ds.features::<f64>(&all)).unwrap();
        aucs.push(roc_auc(&ScoredSet::new(scores, ds.labels(&all)).unwrap()).unwrap());
    }
    assert!(aucs[0] - aucs[1] >= 0.2, "easy {} vs hard {}", aucs[0], aucs[1]);
}

#[test]
fn train_mle_writes_loadable_model_and_trace() {
    let tmp = TempDir::new().unwrap();
    let data = synth_small(tmp.path(), "d", 4, true);
    ok(
        &["train", "--data", data.to_str().unwrap(), "--epochs", "3", "--layers", "4", "--out", "t"],
        tmp.path(),
    );
    let run = tmp.path().join("t");
    let model = Pipeline::<f64>::load(&run.join("model.fpg")).unwrap();
    assert_eq!(model.in_dim(), 4);
    let trace = fs::read_to_string(run.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 3);
    for f in ["config.json", "inputs.json", "run.log", "model.json"] {
        assert!(run.join(f).exists(), "missing {f}");
    }

    let inspect = ok(&["inspect-model", run.join("model.fpg").to_str().unwrap()], tmp.path());
    let v: serde_json::Value = serde_json::from_slice(&inspect.stdout).unwrap();
    assert_eq!(v["flow"]["layers"], 4);
    assert_eq!(v["metadata"]["train"]["epochs"], 3);
}

#[test]
fn train_rerun_from_resolved_config_is_identical() {
    let tmp = TempDir::new().unwrap();
    let data = synth_small(tmp.path(), "d", 4, true);
    ok(
        &[
            "train", "--data", data.to_str().unwrap(), "--variant", "frozen", "--epochs", "3", "--layers", "4",
            "--out", "a",
        ],
        tmp.path(),
    );
    ok(&["train", "--config", "a/config.json", "--out", "b"], tmp.path());
    let read = |p: &str| fs::read(tmp.path().join(p)).unwrap();
    assert_eq!(read("a/model.fpg"), read("b/model.fpg"));
    assert_eq!(read("a/config.json"), read("b/config.json"));
}

#[test]
fn paper_hparams_preset_is_applied() {
    let tmp = TempDir::new().unwrap();
    let data = synth_small(tmp.path(), "d", 4, true);
    ok(
        &[
            "train", "--data", data.to_str().unwrap(), "--variant", "finetune", "--paper-hparams", "--epochs", "1",
            "--layers", "2", "--out", "p",
        ],
        tmp.path(),
    );
    let cfg: serde_json::Value = serde_json::from_slice(&fs::read(tmp.path().join("p/config.json")).unwrap()).unwrap();
    assert_eq!(cfg["train"]["lr"], 1e-5);
    assert_eq!(cfg["train"]["batch_tp"], 32);
    assert_eq!(cfg["train"]["epochs"], 1);
    assert_eq!(cfg["flow"]["hidden"], 512);
    assert_eq!(cfg["flow"]["layers"], 2);
}

#[test]
fn error_exit_codes() {
    let tmp = TempDir::new().unwrap();
    let tp_only = synth_small(tmp.path(), "tp", 4, false);
    let with_fp = synth_small(tmp.path(), "fp", 4, true);
    let tp_only = tp_only.to_str().unwrap();
    let with_fp = with_fp.to_str().unwrap();

    assert_eq!(code(&["train", "--data", tp_only, "--variant", "frozen", "--epochs", "1"], tmp.path()), 3);
    assert_eq!(code(&["train", "--data", with_fp, "--epochs", "0"], tmp.path()), 2);
    assert_eq!(code(&["train", "--data", "missing.json", "--epochs", "1"], tmp.path()), 3);
    assert_eq!(code(&["eval"], tmp.path()), 2);

    fs::write(tmp.path().join("bad.json"), r#"{"data": "x", "bogus": 1}"#).unwrap();
    assert_eq!(code(&["train", "--config", "bad.json"], tmp.path()), 2);
    assert_eq!(code(&["train", "--data", with_fp, "--encoder", "nonsense"], tmp.path()), 2);
}

fn identity_model(dir: &Path, d: usize) -> PathBuf {
    let flow = FlowModel::<f64>::new(&FlowConfig::new(d)).unwrap();
    let model = Pipeline::new(EncoderModel::identity(d).unwrap(), flow).unwrap();
    let p = dir.join(format!("identity{d}.fpg"));
    model.save(&p).unwrap();
    p
}

#[test]
fn identity_model_scores_are_gaussian_nll() {
    let tmp = TempDir::new().unwrap();
    let data = synth_small(tmp.path(), "d", 4, true);
    let model = identity_model(tmp.path(), 4);
    ok(
        &["score", "--model", model.to_str().unwrap(), "--data", data.to_str().unwrap(), "--out", "s"],
        tmp.path(),
    );
    let ds = load_dataset(&data).unwrap();
    let scores = read_scores(&tmp.path().join("s/scores.csv"));
    assert_eq!(scores.len(), ds.len());
    for s in ds.samples() {
        let sq: f64 = s.features.iter().map(|v| v * v).sum();
        let nll = 2.0 * (2.0 * std::f64::consts::PI).ln() + sq / 2.0;
        let row = &scores[&s.id];
        let ll: f64 = row[0].parse().unwrap();
        let a: f64 = row[1].parse().unwrap();
        assert!((a - nll).abs() <= 1e-12 * nll.max(1.0), "id {}: {a} vs {nll}", s.id);
        assert_eq!(ll, -a);
    }
}

#[test]
fn threshold_adds_reject_column() {
    let tmp = TempDir::new().unwrap();
    let data = synth_small(tmp.path(), "d", 4, true);
    let model = identity_model(tmp.path(), 4);
    let (m, d) = (model.to_str().unwrap(), data.to_str().unwrap());
    ok(&["score", "--model", m, "--data", d, "--threshold", "10", "--out", "s"], tmp.path());
    let text = fs::read_to_string(tmp.path().join("s/scores.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), "id,log_likelihood,anomaly_score,reject");
    let scores = read_scores(&tmp.path().join("s/scores.csv"));
    let mut seen = [false; 2];
    for row in scores.values() {
        let a: f64 = row[1].parse().unwrap();
        let reject: bool = row[2].parse().unwrap();
        assert_eq!(reject, a > 10.0);
        seen[reject as usize] = true;
    }
    assert_eq!(seen, [true, true]);
}

#[test]
fn scoring_is_order_independent() {
    let tmp = TempDir::new().unwrap();
    let data = synth_small(tmp.path(), "d", 4, true);
    ok(
        &["train", "--data", data.to_str().unwrap(), "--epochs", "2", "--layers", "4", "--out", "t"],
        tmp.path(),
    );
    let ds = load_dataset(&data).unwrap();
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.reverse();
    order.swap(3, 70);
    let shuffled = tmp.path().join("shuffled.json");
    save_dataset(&ds.reordered(&order), &shuffled, PayloadFormat::Csv).unwrap();
    for (input, out) in [(data.as_path(), "a"), (shuffled.as_path(), "b")] {
        ok(&["score", "--model", "t/model.fpg", "--data", input.to_str().unwrap(), "--out", out], tmp.path());
    }
    assert_eq!(
        read_scores(&tmp.path().join("a/scores.csv")),
        read_scores(&tmp.path().join("b/scores.csv"))
    );
}

#[test]
fn score_rejects_dimension_mismatch() {
    let tmp = TempDir::new().unwrap();
    let data = synth_small(tmp.path(), "d", 6, true);
    let model = identity_model(tmp.path(), 4);
    let args = ["score", "--model", model.to_str().unwrap(), "--data", data.to_str().unwrap()];
    assert_eq!(code(&args, tmp.path()), 3);
}

#[test]
fn output_root_comes_from_environment() {
    let tmp = TempDir::new().unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_fpgate"))
        .args(["synth", "--log-level", "warn"])
        .current_dir(tmp.path())
        .env("FPGATE_OUT", tmp.path().join("root"))
        .status()
        .unwrap();
    assert!(status.success());
    assert!(tmp.path().join("root/synth/dataset.json").exists());
}

fn small_eval(tmp: &Path, out: &str) -> PathBuf {
    let data = synth_small(tmp, "d", 4, true);
    ok(
        &[
            "eval",
            "--experiment",
            "comparative",
            "--data",
            data.to_str().unwrap(),
            "--folds",
            "3",
            "--epochs",
            "2",
            "--jobs",
            "2",
            "--out",
            out,
        ],
        tmp,
    );
    tmp.join(out)
}

#[test]
fn eval_report_matches_published_schema() {
    let tmp = TempDir::new().unwrap();
    let run = small_eval(tmp.path(), "e");
    let schema_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schema/experiment_report.schema.json");
    let schema: serde_json::Value = serde_json::from_str(&fs::read_to_string(schema_path).unwrap()).unwrap();
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator.iter_errors(&report).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:#?}");
    assert_eq!(report["reports"].as_array().unwrap().len(), 3 * 4);

    let mut broken = report.clone();
    broken["summary"][0]["auc_mean"] = serde_json::json!(1.5);
    assert!(!validator.is_valid(&broken));

    for f in ["config.json", "inputs.json", "run.log", "summary.csv"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    assert!(run.join("curves/mle_fold0_roc.csv").exists());
}

#[test]
fn eval_rerun_from_resolved_config_reproduces_summary() {
    let tmp = TempDir::new().unwrap();
    let first = small_eval(tmp.path(), "e1");
    ok(&["eval", "--config", "e1/config.json", "--jobs", "1", "--out", "e2"], tmp.path());
    let a = fs::read(first.join("summary.csv")).unwrap();
    let b = fs::read(tmp.path().join("e2/summary.csv")).unwrap();
    assert_eq!(a, b);
    let stdout = ok(&["eval", "--config", "e1/config.json", "--out", "e3"], tmp.path()).stdout;
    assert_eq!(stdout, a);
}
