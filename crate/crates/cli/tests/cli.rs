use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn doe_lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_doe-lab")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr_json(o: &Output) -> Value {
    let text = String::from_utf8(o.stderr.clone()).unwrap();
    serde_json::from_str(text.trim()).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {text}"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small spec that trains in well under a second.
fn quick_spec(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("spec.toml");
    let text = format!(
        "[data]\nn_per_split = 200\n\n[model]\nhidden = [8]\n\n\
         [trainer]\nepochs = 2\nwarmup_epochs = 1\npretrain_epochs = 4\n{extra}\n\n\
         [eval]\nbins = 10\nseeds = [0, 1]\n"
    );
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn train_writes_artifacts_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let spec = quick_spec(dir.path(), "");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = doe_lab(&["train", s(&spec), "--seed", "3", "--out", s(out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let summary: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
        assert_eq!(summary["seed"], 3);
        assert_eq!(summary["variant"], "DOE");
    }
    for f in ["model.ckpt", "history.jsonl", "config.resolved.toml", "eval.json", "data/manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs between runs");
    }
    assert!(fs::read_to_string(a.join("model.ckpt")).unwrap().starts_with("DOE-NET-v1"));
    let history = fs::read_to_string(a.join("history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 4 + 2);
    for line in history.lines() {
        serde_json::from_str::<Value>(line).unwrap();
    }
    let resolved = fs::read_to_string(a.join("config.resolved.toml")).unwrap();
    assert!(resolved.contains("seed = 3") && resolved.contains("id_batch = 32"), "{resolved}");
    assert!(a.join("hist/disjoint.csv").is_file() && a.join("hist/overlap.csv").is_file());

    let c = dir.path().join("c");
    doe_lab(&["train", s(&spec), "--seed", "4", "--out", s(&c)]);
    assert_ne!(fs::read(a.join("model.ckpt")).unwrap(), fs::read(c.join("model.ckpt")).unwrap());
}

#[test]
fn malformed_specs_exit_2_with_a_position() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "[trainer]\nlambda = 1.0\nbeta = = 2\n").unwrap();
    let o = doe_lab(&["train", s(&path), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 2);
    let e = stderr_json(&o);
    assert_eq!(e["error"], "spec");
    assert_eq!(e["line"], 3);
    assert!(e["column"].as_u64().is_some());

    fs::write(&path, "[model]\nhiden = [4]\n").unwrap();
    let o = doe_lab(&["train", s(&path), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 2);
    assert_eq!(stderr_json(&o)["line"], 2);

    fs::write(&path, "[trainer]\nwarmup_epochs = 50\n").unwrap();
    let o = doe_lab(&["train", s(&path), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr_json(&o)["message"].as_str().unwrap().contains("warmup"));
    assert!(!dir.path().join("o").exists(), "nothing is written for an invalid spec");
}

#[test]
fn eval_is_repeatable_and_the_scorer_only_changes_scores() {
    let dir = tempfile::tempdir().unwrap();
    let spec = quick_spec(dir.path(), "");
    let run = dir.path().join("run");
    assert_eq!(code(&doe_lab(&["train", s(&spec), "--out", s(&run)])), 0);
    let ckpt = run.join("model.ckpt");
    let manifest = run.join("data/manifest.json");
    let eval = |scorer: &str| {
        let o = doe_lab(&["eval", s(&ckpt), s(&manifest), "--scorer", scorer, "--bins", "10"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        stdout(&o)
    };
    let first = eval("maxlogit");
    assert_eq!(first, eval("maxlogit"));
    // The train step evaluates with the same settings.
    assert_eq!(first.trim(), fs::read_to_string(run.join("eval.json")).unwrap().trim());

    let ml: Value = serde_json::from_str(&first).unwrap();
    let msp: Value = serde_json::from_str(&eval("msp")).unwrap();
    assert_eq!(ml["variant"], "DOE");
    assert_eq!(msp["scorer"], "msp");
    assert_eq!(ml["id_accuracy"], msp["id_accuracy"]);
    for (a, b) in ml["splits"].as_array().unwrap().iter().zip(msp["splits"].as_array().unwrap()) {
        assert_eq!(a["split"], b["split"]);
        assert_eq!(a["report"]["n_ood"], b["report"]["n_ood"]);
    }

    let o = doe_lab(&["eval", s(&ckpt), s(&manifest), "--scorer", "energy"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn eval_rejects_width_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let spec = quick_spec(dir.path(), "");
    let run = dir.path().join("run");
    assert_eq!(code(&doe_lab(&["train", s(&spec), "--out", s(&run)])), 0);
    let other = dir.path().join("wide");
    let wide_spec = dir.path().join("wide.toml");
    fs::write(&wide_spec, "[data]\nn_per_split = 200\ndim = 3\n").unwrap();
    let o = doe_lab(&["generate", "--spec", s(&wide_spec), "--out", s(&other)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = doe_lab(&["eval", s(&run.join("model.ckpt")), s(&other.join("manifest.json"))]);
    assert_eq!(code(&o), 1);
    let e = stderr_json(&o);
    assert_eq!(e["error"], "runtime");
    assert!(e["message"].as_str().unwrap().contains("features"));
}

#[test]
fn specs_can_read_generated_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&doe_lab(&["generate", "--seed", "2", "--out", s(&data)])), 0);
    let spec = quick_spec(dir.path(), "");
    let text = fs::read_to_string(&spec).unwrap().replace("[data]\n", "[data]\nmanifest = \"data/manifest.json\"\n");
    fs::write(&spec, text).unwrap();
    let o = doe_lab(&["train", s(&spec), "--out", s(&dir.path().join("run"))]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!dir.path().join("run/data").exists());

    fs::remove_file(data.join("manifest.json")).unwrap();
    let o = doe_lab(&["train", s(&spec), "--out", s(&dir.path().join("run2"))]);
    assert_eq!(code(&o), 2);
}

fn rows(csv: &str) -> Vec<Vec<String>> {
    csv.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect()
}

#[test]
fn ablation_cardinality_and_zero_lambda_cell() {
    let dir = tempfile::tempdir().unwrap();
    let spec = quick_spec(dir.path(), "");
    let betas = "beta=0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0";
    let o = doe_lab(&["ablate", s(&spec), "--grid", betas, "--seeds", "0,1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = rows(&stdout(&o));
    for seed in ["0", "1"] {
        for split in ["disjoint", "overlap"] {
            assert_eq!(table.iter().filter(|r| r[1] == split && r[2] == seed).count(), 10);
        }
    }

    let out = dir.path().join("sweep");
    let o = doe_lab(&[
        "ablate",
        s(&spec),
        "--grid",
        "variant=CE,DOE",
        "--grid",
        "lambda=0",
        "--seeds",
        "0",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = rows(&stdout(&o));
    for split in ["disjoint", "overlap"] {
        let pick = |v: &str| table.iter().find(|r| r[0] == v && r[1] == split).unwrap()[3..].to_vec();
        assert_eq!(pick("CE lambda=0"), pick("DOE lambda=0"));
    }
    for f in ["rows.csv", "summary.csv", "summary.md"] {
        assert!(out.join(f).is_file());
    }
}

#[test]
fn ablation_is_thread_count_independent() {
    let dir = tempfile::tempdir().unwrap();
    let spec = quick_spec(dir.path(), "");
    let run = |threads: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_doe-lab"))
            .args(["ablate", s(&spec), "--grid", "variant=OE,DOE,OE-gauss", "--seeds", "0,1"])
            .env("DOE_LAB_THREADS", threads)
            .output()
            .unwrap();
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        stdout(&o)
    };
    assert_eq!(run("1"), run("4"));
    let o = Command::new(env!("CARGO_BIN_EXE_doe-lab"))
        .args(["ablate", s(&spec), "--grid", "beta=0.5"])
        .env("DOE_LAB_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
}

#[test]
fn ablation_rejects_empty_grids_and_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let spec = quick_spec(dir.path(), "");
    assert_eq!(code(&doe_lab(&["ablate", s(&spec)])), 2);
    let o = doe_lab(&["ablate", s(&spec), "--grid", "betta=0.1"]);
    assert_eq!(code(&o), 2);
    assert!(stderr_json(&o)["message"].as_str().unwrap().contains("betta"));
    assert_eq!(code(&doe_lab(&["ablate", s(&spec), "--grid", "beta"])), 2);
}

#[test]
fn verify_passes_and_catches_the_faulty_rule() {
    let o = doe_lab(&["verify", "--trials", "50", "--seed", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["pass"], true);
    assert_eq!(v["checks"].as_array().unwrap().len(), 4);

    let one: Value = serde_json::from_str(&stdout(&doe_lab(&["verify", "--trials", "1"]))).unwrap();
    let keys = |v: &Value| v.as_object().unwrap().keys().cloned().collect::<Vec<_>>();
    assert_eq!(keys(&one), keys(&v));
    assert_eq!(keys(&one["checks"][0]), keys(&v["checks"][0]));

    let o = doe_lab(&["verify", "--trials", "50", "--faulty-rule"]);
    assert_eq!(code(&o), 3);
    assert_eq!(stderr_json(&o)["error"], "verification");
    assert_eq!(serde_json::from_str::<Value>(&stdout(&o)).unwrap()["pass"], false);

    assert_eq!(code(&doe_lab(&["verify", "--trials", "0"])), 2);
}

#[test]
fn report_tables_and_histograms() {
    let dir = tempfile::tempdir().unwrap();
    let spec = quick_spec(dir.path(), "");
    let mut evals = Vec::new();
    for (variant, seed) in [("OE", "0"), ("DOE", "0"), ("DOE", "1")] {
        let out = dir.path().join(format!("{variant}-{seed}"));
        let spec_v = dir.path().join(format!("{variant}.toml"));
        fs::write(&spec_v, fs::read_to_string(&spec).unwrap().replace("[trainer]\n", &format!("[trainer]\nvariant = \"{variant}\"\n")))
            .unwrap();
        assert_eq!(code(&doe_lab(&["train", s(&spec_v), "--seed", seed, "--out", s(&out)])), 0);
        evals.push(out.join("eval.json"));
    }

    // One run: exactly its rows.
    let o = doe_lab(&["report", s(&evals[0])]);
    assert_eq!(code(&o), 0);
    let md = stdout(&o);
    assert_eq!(md.lines().filter(|l| l.starts_with("| OE |")).count(), 2);
    assert!(!md.contains("DOE"));

    let out = dir.path().join("report");
    let mut args = vec!["report"];
    args.extend(evals.iter().map(|p| s(p)));
    args.extend(["--out", s(&out)]);
    let o = doe_lab(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let md = stdout(&o);
    assert!(md.contains("## disjoint") && md.contains("## overlap"));
    let doe_row = md.lines().find(|l| l.starts_with("| DOE |")).unwrap();
    assert!(doe_row.ends_with("| 2 |"), "{doe_row}");
    assert!(md.contains("**"));
    let hist = fs::read_to_string(out.join("hist/DOE__disjoint.csv")).unwrap();
    assert!(hist.starts_with("seed,bin_left"));
    assert_eq!(hist.lines().count(), 1 + 2 * 10);
    assert_eq!(fs::read_to_string(out.join("report.md")).unwrap(), md);

    // Same run twice is fine; a conflicting copy is not.
    assert_eq!(code(&doe_lab(&["report", s(&evals[0]), s(&evals[0])])), 0);
    let tampered = dir.path().join("tampered.json");
    let mut v: Value = serde_json::from_str(&fs::read_to_string(&evals[0]).unwrap()).unwrap();
    v["splits"][0]["report"]["fpr95"] = Value::from(0.123);
    fs::write(&tampered, v.to_string()).unwrap();
    let o = doe_lab(&["report", s(&evals[0]), s(&tampered)]);
    assert_eq!(code(&o), 1);
    assert!(stderr_json(&o)["message"].as_str().unwrap().contains("conflicting"));

    assert_eq!(code(&doe_lab(&["report"])), 1);
    let empty = dir.path().join("empty.csv");
    fs::write(&empty, "variant,test_split,seed,fpr95,auroc\n").unwrap();
    assert_eq!(code(&doe_lab(&["report", s(&empty)])), 1);
}

#[test]
fn presets_are_printed_and_usable() {
    let o = doe_lab(&["preset"]);
    assert_eq!(stdout(&o).lines().collect::<Vec<_>>(), ["gap-desk", "cifar", "imagenet"]);
    let dir = tempfile::tempdir().unwrap();
    for name in ["gap-desk", "cifar", "imagenet"] {
        let text = stdout(&doe_lab(&["preset", name]));
        let path = dir.path().join(format!("{name}.toml"));
        fs::write(&path, text).unwrap();
        let o = doe_lab(&["ablate", s(&path), "--grid", "epochs=2", "--grid", "warmup_epochs=1", "--grid", "pretrain_epochs=1", "--grid", "data.n_per_split=100", "--seeds", "0"]);
        assert_eq!(code(&o), 0, "{name}: {}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(code(&doe_lab(&["preset", "svhn"])), 2);
}

#[test]
fn default_spec_trains_quickly() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.toml");
    fs::write(&spec, stdout(&doe_lab(&["preset", "gap-desk"]))).unwrap();
    let start = std::time::Instant::now();
    let o = doe_lab(&["train", s(&spec), "--out", s(&dir.path().join("run"))]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(start.elapsed().as_secs() < 120);
    let v: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert!(v["id_accuracy"].as_f64().unwrap() >= 0.99);
}
