use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"
[model]
d_model = 16
n_heads = 2
d_ff = 32
n_layers = 1
max_seq_len = 64

[corpus]
n_explicit = 40
n_clean = 40
train = 40
eval_pre = 12
eval_post = 12
comparison = 10
marker_rate_explicit = 0.3
marker_rate_clean = 0.3

[pretrain]
max_epochs = 2

[train]
max_epochs = 4

[refine]
max_epochs = 3
"#;

const SUBCOMMANDS: [&str; 10] = [
    "gen-corpus",
    "pretrain",
    "train",
    "eval",
    "feedback-run",
    "compare",
    "rate",
    "classify",
    "serve",
    "report",
];

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

fn mcar(args: &[&str]) -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mcar"));
    c.args(args);
    for var in ["MCAR_DATA_DIR", "MCAR_SEED", "MCAR_CONFIG", "MCAR_THRESHOLD", "MCAR_TOKEN"] {
        c.env_remove(var);
    }
    c
}

fn run(args: &[&str]) -> Output {
    mcar(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert!(
        o.status.success(),
        "mcar {args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    stdout(&o)
}

#[test]
fn no_arguments_prints_usage_and_exits_2() {
    let o = run(&[]);
    assert_eq!(o.status.code(), Some(2));
    let all = format!("{}{}", stdout(&o), String::from_utf8_lossy(&o.stderr));
    assert!(all.contains("Usage"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = run(&["eval", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn every_subcommand_documents_its_flags() {
    for sub in SUBCOMMANDS {
        let o = run(&[sub, "--help"]);
        assert_eq!(o.status.code(), Some(0), "{sub} --help");
        let help = stdout(&o);
        for flag in ["--data-dir", "--seed", "--config"] {
            assert!(help.contains(flag), "{sub} --help lacks {flag}");
        }
    }
    let eval = stdout(&run(&["eval", "--help"]));
    for flag in ["--split", "--model", "--predictions", "--threshold", "--record"] {
        assert!(eval.contains(flag), "eval --help lacks {flag}");
    }
}

#[test]
fn domain_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().to_str().unwrap();
    let o = run(&["--data-dir", data, "eval"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    let o = run(&["--data-dir", data, "report"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn eval_on_before_feedback_predictions_prints_the_four_metrics() {
    let csv = fixture("before_feedback_predictions.csv");
    let text = ok(&["eval", "--predictions", csv.to_str().unwrap()]);
    for cell in ["83.3%", "85.7%", "80.0%", "86.7%", "12 (TP)", "3 (FN)", "2 (FP)", "13 (TN)"] {
        assert!(text.contains(cell), "missing {cell} in\n{text}");
    }
    let json: Value = serde_json::from_str(&ok(&["eval", "--json", "--predictions", csv.to_str().unwrap()])).unwrap();
    let m = &json["metrics"];
    for (key, want) in [("accuracy", 0.833), ("precision", 0.857), ("recall", 0.800), ("specificity", 0.867)] {
        assert!((m[key].as_f64().unwrap() - want).abs() < 0.005, "{key}");
    }
}

#[test]
fn eval_on_after_feedback_predictions() {
    let csv = fixture("after_feedback_predictions.csv");
    let text = ok(&["eval", "--predictions", csv.to_str().unwrap()]);
    for cell in ["86.7%", "100.0%", "73.3%"] {
        assert!(text.contains(cell), "missing {cell} in\n{text}");
    }
}

#[test]
fn compare_prediction_files() {
    let dir = tempfile::tempdir().unwrap();
    let a = fixture("comparison_customized.csv");
    let b = fixture("comparison_standard.csv");
    let text = ok(&[
        "--data-dir",
        dir.path().to_str().unwrap(),
        "compare",
        "--predictions-a",
        a.to_str().unwrap(),
        "--predictions-b",
        b.to_str().unwrap(),
    ]);
    assert!(text.contains("Comparison on 49 songs"));
    assert!(text.contains("59.2%") && text.contains("55.1%"));
    assert!(text.contains("b=7") && text.contains("c=5"));
    assert!(text.contains("do not reject H0"));
    let metrics: Value = serde_json::from_slice(&std::fs::read(dir.path().join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["comparison"]["stats"]["b"], 7);
}

fn pipeline(data: &Path, config: &Path, seed: &str) {
    let d = data.to_str().unwrap();
    let c = config.to_str().unwrap();
    let base = ["--data-dir", d, "--config", c, "--seed", seed];
    let step = |extra: &[&str]| {
        let args: Vec<&str> = base.iter().copied().chain(extra.iter().copied()).collect();
        ok(&args)
    };
    step(&["gen-corpus"]);
    step(&["pretrain"]);
    step(&["train"]);
    step(&["eval", "--record", "pre"]);
    let fb = step(&["feedback-run"]);
    assert!(fb.contains("harvested"));
    step(&["eval", "--split", "eval-post", "--record", "post"]);
    step(&["compare"]);
    let report = step(&["report"]);
    assert!(report.contains("Confusion matrix: before"));
    assert!(report.contains("Confusion matrix: after"));
    assert!(report.contains("Comparison on 10 songs"));
}

#[test]
fn full_pipeline_is_reproducible_under_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    std::fs::write(&config, TINY).unwrap();
    let one = dir.path().join("one");
    let two = dir.path().join("two");
    pipeline(&one, &config, "11");
    pipeline(&two, &config, "11");

    for file in ["corpus.jsonl", "splits.json", "vocab.txt", "pretrained.ckpt", "model.ckpt", "feedback.jsonl"] {
        let a = std::fs::read(one.join(file)).unwrap();
        let b = std::fs::read(two.join(file)).unwrap();
        assert!(a == b, "{file} differs between identical seeded runs");
    }
    assert_eq!(
        std::fs::read_to_string(one.join("reports/report.txt")).unwrap(),
        std::fs::read_to_string(two.join("reports/report.txt")).unwrap()
    );
    for file in ["report.txt", "metrics-before.csv", "metrics-after.csv", "comparison.csv"] {
        assert!(one.join("reports").join(file).exists(), "missing {file}");
    }

    let d = one.to_str().unwrap();
    let classify: Value = serde_json::from_str(&ok(&["--data-dir", d, "classify", "--lyrics", "perreo en la disco"])).unwrap();
    let p = classify["probability"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&p));
    assert_eq!(classify["label"], if p >= 0.5 { "explicit" } else { "non_explicit" });

    let rated: Value = serde_json::from_str(&ok(&["--data-dir", d, "rate", "--lyrics", "perreo en la disco"])).unwrap();
    assert_eq!(rated["scores"]["sexual"].as_f64().unwrap(), p);
    assert!(rated["tier"].is_string());
}

#[test]
fn seed_precedence_is_flag_then_env_then_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.toml");
    std::fs::write(&config, "seed = 5\n[corpus]\nn_explicit = 20\nn_clean = 20\ntrain = 10\neval_pre = 4\neval_post = 4\ncomparison = 2\n").unwrap();
    let c = config.to_str().unwrap();
    let corpus_for = |name: &str, extra: &[&str], env_seed: Option<&str>| {
        let data = dir.path().join(name);
        let mut args = vec!["--data-dir", data.to_str().unwrap(), "--config", c];
        args.extend_from_slice(extra);
        args.push("gen-corpus");
        let mut cmd = mcar(&args);
        if let Some(s) = env_seed {
            cmd.env("MCAR_SEED", s);
        }
        assert!(cmd.output().unwrap().status.success());
        std::fs::read(data.join("splits.json")).unwrap()
    };
    let from_config = corpus_for("cfg", &[], None);
    let flag5 = corpus_for("flag5", &["--seed", "5"], None);
    let env9 = corpus_for("env9", &[], Some("9"));
    let flag9 = corpus_for("flag9", &["--seed", "9"], None);
    let flag5_env9 = corpus_for("flag5env9", &["--seed", "5"], Some("9"));
    assert_eq!(from_config, flag5);
    assert_eq!(env9, flag9);
    assert_ne!(from_config, env9);
    assert_eq!(flag5_env9, flag5);
}

#[test]
fn serve_answers_health_checks() {
    use std::io::{BufRead, BufReader, Read, Write};
    let dir = tempfile::tempdir().unwrap();
    let mut child = mcar(&["--data-dir", dir.path().to_str().unwrap(), "serve", "--port", "0"])
        .stderr(std::process::Stdio::piped())
        .stdout(std::process::Stdio::null())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stderr.take().unwrap()).lines();
    let addr = loop {
        let line = lines.next().expect("server exited early").unwrap();
        if let Some(rest) = line.strip_prefix("listening on http://") {
            break rest.to_string();
        }
    };
    let mut stream = std::net::TcpStream::connect(&addr).unwrap();
    write!(stream, "GET /health HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n").unwrap();
    let mut response = String::new();
    stream.read_to_string(&mut response).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(response.starts_with("HTTP/1.1 200"), "{response}");
    assert!(response.to_ascii_lowercase().contains("x-model-snapshot: none"));
}
