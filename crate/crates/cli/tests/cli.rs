use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn qraug(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_qraug"));
    cmd.arg("-q").args(args);
    for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("QRAUG_")) {
        cmd.env_remove(k);
    }
    cmd.envs(env.iter().copied());
    cmd.output().expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = qraug(args, &[]);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn lines(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn config_precedence_is_flag_env_file_default() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[corpus]\nn = 30\n").unwrap();
    let out = dir.path().join("pairs.jsonl");
    let run = |extra: &[&str], env: &[(&str, &str)]| {
        let mut args = vec!["gen-corpus", "--out", s(&out)];
        args.extend_from_slice(extra);
        let o = qraug(&args, env);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        lines(&out)
    };
    let env = [("QRAUG_CORPUS__N", "20")];
    assert_eq!(run(&["--config", s(&cfg), "--n", "10"], &env), 10);
    assert_eq!(run(&["--config", s(&cfg)], &env), 20);
    assert_eq!(run(&["--config", s(&cfg)], &[]), 30);
    assert_eq!(run(&[], &[]), 10_000);
}

#[test]
fn bad_configs_and_inputs_fail_with_context() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[train]\nstepz = 3\n").unwrap();
    let out = dir.path().join("p.jsonl");
    let o = qraug(&["gen-corpus", "--config", s(&cfg), "--out", s(&out)], &[]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("stepz"));

    let o = qraug(&["gen-corpus", "--out", s(&out)], &[("QRAUG_CORPUS__N", "\"many\"")]);
    assert!(!o.status.success());

    let missing = dir.path().join("nope.jsonl");
    let o = qraug(&["build-vocab", "--in", s(&missing), "--out", s(&out)], &[]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.jsonl"));

    let o = qraug(&["score-rewards", "--pairs", s(&missing), "--alpha", "1.5", "--out", s(&out)], &[]);
    assert!(!o.status.success());
}

#[test]
fn stages_chain_and_rerun_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    let cfg = p("c.toml");
    fs::write(
        &cfg,
        "[model]\nd_tok = 16\nd_hid = 16\nd_ff = 32\nheads = 2\n\n[train]\nsteps = 30\nlog_every = 10\n\n\
         [encoder]\nsteps = 40\nlog_every = 20\n\n[scst]\nsteps = 4\neval_every = 2\n",
    )
    .unwrap();
    let c = s(&cfg);
    ok(&["gen-corpus", "--n", "300", "--seed", "1", "--out", s(&p("train.jsonl"))]);
    ok(&["gen-corpus", "--n", "60", "--seed", "2", "--out", s(&p("test.jsonl"))]);
    ok(&["build-vocab", "--in", s(&p("train.jsonl")), "--out", s(&p("vocab.txt"))]);
    for name in ["mle.json", "mle2.json"] {
        ok(&["train-mle", "--config", c, "--data", s(&p("train.jsonl")), "--vocab", s(&p("vocab.txt")), "--out-ckpt", s(&p(name)), "--metrics", s(&p("m.jsonl"))]);
    }
    assert_eq!(fs::read(p("mle.json")).unwrap(), fs::read(p("mle2.json")).unwrap());
    assert_eq!(lines(&p("m.jsonl")), 3);

    ok(&["train-scst", "--config", c, "--ckpt", s(&p("mle.json")), "--data", s(&p("train.jsonl")), "--out-ckpt", s(&p("scst.json")), "--reward", "phonetic"]);
    let o = qraug(&["train-scst", "--config", c, "--ckpt", s(&p("mle.json")), "--data", s(&p("train.jsonl")), "--out-ckpt", s(&p("x.json")), "--reward", "semantic"], &[]);
    assert!(!o.status.success(), "semantic reward without an encoder must fail");

    ok(&["augment", "--config", c, "--ckpt", s(&p("scst.json")), "--rewrites", s(&p("test.jsonl")), "--mode", "sample", "--n-per-input", "2", "--out", s(&p("syn.jsonl"))]);
    ok(&["merge", "--a", s(&p("train.jsonl")), "--b", s(&p("syn.jsonl")), "--out", s(&p("merged.jsonl"))]);
    assert!(lines(&p("merged.jsonl")) >= 300);

    ok(&["train-encoder", "--config", c, "--data", s(&p("train.jsonl")), "--out-ckpt", s(&p("enc.json"))]);
    ok(&["score-rewards", "--pairs", s(&p("test.jsonl")), "--encoder", s(&p("enc.json")), "--out", s(&p("scores.jsonl"))]);
    let first: serde_json::Value = serde_json::from_str(fs::read_to_string(p("scores.jsonl")).unwrap().lines().next().unwrap()).unwrap();
    for key in ["r_p", "r_d", "r_c"] {
        let v = first[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{key} = {v}");
    }

    let eval = |index: &Path, report: &Path, extra: &[&str]| {
        let (enc, test) = (p("enc.json"), p("test.jsonl"));
        let mut args = vec!["eval-retrieval", "--encoder", s(&enc), "--index-data", s(index), "--test", s(&test), "--report", s(report)];
        args.extend_from_slice(extra);
        ok(&args);
        fs::read_to_string(report).unwrap()
    };
    let idx = p("index.txt");
    let all: Vec<String> = ["train.jsonl", "test.jsonl"]
        .iter()
        .flat_map(|f| fs::read_to_string(p(f)).unwrap().lines().map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["rewrite"].as_str().unwrap().to_string()).collect::<Vec<_>>())
        .collect();
    fs::write(&idx, all.join("\n")).unwrap();
    let built = eval(&idx, &p("r1.json"), &["--save-index", s(&p("saved"))]);
    let loaded = eval(&p("saved"), &p("r2.json"), &[]);
    assert_eq!(built, loaded);
    let report: serde_json::Value = serde_json::from_str(&built).unwrap();
    let (p1, p5) = (report["p_at_k"]["p@1"].as_f64().unwrap(), report["p_at_k"]["p@5"].as_f64().unwrap());
    assert!(p1 <= p5 && p5 <= 1.0);
    let custom: serde_json::Value = serde_json::from_str(&eval(&idx, &p("r3.json"), &["--ks", "3,1"])).unwrap();
    assert!(custom["p_at_k"]["p@3"].is_number() && custom["p_at_k"].get("p@5").is_none());
}

#[test]
fn experiment_without_augmentation_has_zero_delta() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[experiment]\nn_original = 200\nn_test = 80\nn_dev = 20\n\n[experiment.retriever]\nsteps = 60\n").unwrap();
    let mut reports = Vec::new();
    for name in ["a.json", "b.json"] {
        let report = dir.path().join(name);
        ok(&["run-experiment", "--config", s(&cfg), "--seed", "3", "--no-augmentation", "--report", s(&report)]);
        reports.push(fs::read(&report).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
    let r: serde_json::Value = serde_json::from_slice(&reports[0]).unwrap();
    assert_eq!(r["seed"], 3);
    assert_eq!(r["sizes"]["synthetic"], 0);
    assert_eq!(r["delta"]["p@1"].as_f64().unwrap(), 0.0);
    assert_eq!(r["training_only"], r["training_synthetic"]);
}
