// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;
use std::process::{Command, Output};

use otter_core::checkpoint::{read_manifest, MAGIC};
use otter_core::decoding::read_results;
use otter_core::training::read_metrics;

fn otter(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_otter")).current_dir(dir).env_remove("OTTER_SEED").args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = otter(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// corpus -> base -> insert -> init -> train-reward, all small.
fn pipeline(dir: &Path, seed: &str) {
    ok(dir, &["gen-corpus", "--kind", "preference", "--out", "pref.txt", "--count", "48", "--seed", seed]);
    ok(dir, &["train-base", "--corpus", "pref.txt", "--out", "base.ckpt", "--epochs", "1", "--metrics", "base.jsonl", "--seed", seed]);
    ok(dir, &["insert", "--base", "base.ckpt", "--out", "o.ckpt", "--name", "reward", "--d-ext", "8", "--d-inner-ext", "8"]);
    ok(dir, &["init", "--otter", "o.ckpt", "--strategy", "copy", "--seed", seed]);
    let text = ok(
        dir,
        &[
            "train-reward",
            "--otter",
            "o.ckpt",
            "--corpus",
            "pref.txt",
            "--out",
            "r.ckpt",
            "--epochs",
            "1",
            "--base",
            "base.ckpt",
            "--metrics",
            "reward.jsonl",
            "--seed",
            seed,
        ],
    );
    assert!(text.contains("non-disruption verified"), "{text}");
}

#[test]
fn full_pipeline_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path(), "5");
    pipeline(b.path(), "5");
    for f in ["base.jsonl", "reward.jsonl"] {
        let ra = read_metrics(&a.path().join(f)).unwrap();
        let rb = read_metrics(&b.path().join(f)).unwrap();
        assert_eq!(ra.len(), rb.len());
        assert!(!ra.is_empty());
        assert!(ra.iter().zip(&rb).all(|(x, y)| x.same_values(y)), "{f}");
    }
    for f in ["pref.txt", "base.ckpt", "r.ckpt"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let out = ok(a.path(), &["verify", "--base", "base.ckpt", "--otter", "r.ckpt", "--prompts", "100", "--tol", "1e-5"]);
    assert!(out.contains("max deviation"));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(a.path().join("r.ckpt.verify.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["report"]["per_prompt"].as_array().unwrap().len(), 100);
}

#[test]
fn verification_failure_exits_one_with_report() {
    let d = tempfile::tempdir().unwrap();
    pipeline(d.path(), "1");
    // a base from another seed is not what r.ckpt was built on
    ok(d.path(), &["train-base", "--corpus", "pref.txt", "--out", "other.ckpt", "--epochs", "1", "--seed", "2"]);
    let out = otter(d.path(), &["verify", "--base", "other.ckpt", "--otter", "r.ckpt", "--report", "bad.json"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.json"), "{err}");
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(d.path().join("bad.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], false);
}

#[test]
fn usage_errors_exit_two() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(otter(d.path(), &["decode", "--bogus"]).status.code(), Some(2));
    assert_eq!(otter(d.path(), &["no-such-command"]).status.code(), Some(2));
    assert_eq!(otter(d.path(), &["gen-corpus", "--kind", "poetry", "--out", "x"]).status.code(), Some(2));
}

#[test]
fn dexp_without_mixing_matches_top_p() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(p, &["gen-corpus", "--kind", "toxicity", "--out", "tox.txt", "--count", "24"]);
    ok(p, &["train-base", "--corpus", "tox.txt", "--out", "base.ckpt", "--epochs", "1"]);
    ok(p, &["insert", "--base", "base.ckpt", "--out", "e.ckpt", "--name", "expert", "--d-ext", "8"]);
    ok(p, &["init", "--otter", "e.ckpt"]);
    ok(p, &["train-experts", "--otter", "e.ckpt", "--corpus", "tox.txt", "--split", "clean", "--out", "e.ckpt", "--max-steps", "3"]);
    ok(p, &["insert", "--base", "e.ckpt", "--out", "ea.ckpt", "--name", "anti", "--d-ext", "8"]);
    ok(p, &["init", "--otter", "ea.ckpt"]);
    ok(p, &["train-experts", "--otter", "ea.ckpt", "--corpus", "tox.txt", "--split", "toxic", "--out", "ea.ckpt", "--max-steps", "3"]);
    let common = ["decode", "--otter", "ea.ckpt", "--corpus", "tox.txt", "--n-prompts", "6", "--seed", "7"];
    let run = |extra: &[&str], out: &str| {
        let mut args = common.to_vec();
        args.extend_from_slice(extra);
        args.extend_from_slice(&["--out", out]);
        ok(p, &args);
        read_results(&p.join(out)).unwrap()
    };
    let dexp = run(&["--strategy", "dexp", "--alpha", "0"], "dexp.jsonl");
    let topp = run(&["--strategy", "topp"], "topp.jsonl");
    assert_eq!(dexp.len(), 6);
    assert!(dexp.iter().zip(&topp).all(|(a, b)| a.tokens == b.tokens));
    let mixed = run(&["--strategy", "dexp", "--alpha", "2"], "mixed.jsonl");
    assert!(mixed.iter().all(|r| r.tokens.len() == 32));
}

#[test]
fn args_and_speculative_decoding_from_the_cli() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    pipeline(p, "3");
    let out = ok(
        p,
        &[
            "decode",
            "--otter",
            "r.ckpt",
            "--strategy",
            "args_topk",
            "--w",
            "1.5",
            "--k",
            "10",
            "--tau",
            "1.0",
            "--prompt",
            "the cat",
            "--max-new-tokens",
            "6",
        ],
    );
    assert!(out.starts_with("the cat\t"), "{out}");

    ok(p, &["gen-corpus", "--kind", "speculative", "--out", "spec.txt", "--count", "16"]);
    ok(p, &["train-base", "--corpus", "spec.txt", "--out", "sb.ckpt", "--epochs", "1"]);
    ok(p, &["insert", "--base", "sb.ckpt", "--out", "s.ckpt", "--name", "draft", "--d-ext", "8"]);
    ok(p, &["train-heads", "--otter", "s.ckpt", "--corpus", "spec.txt", "--out", "s.ckpt", "--k", "3", "--max-steps", "2"]);
    let a = ok(p, &["decode", "--otter", "s.ckpt", "--strategy", "speculative", "--corpus", "spec.txt", "--n-prompts", "4"]);
    let b = ok(p, &["decode", "--otter", "s.ckpt", "--strategy", "greedy", "--corpus", "spec.txt", "--n-prompts", "4"]);
    assert_eq!(a, b);
    let bench = ok(
        p,
        &[
            "bench",
            "--workload",
            "overhead",
            "--otter",
            "s.ckpt",
            "--strategy",
            "speculative",
            "--corpus",
            "spec.txt",
            "--n-prompts",
            "2",
            "--max-new-tokens",
            "8",
        ],
    );
    assert!(bench.contains("speedup"), "{bench}");
}

#[test]
fn config_file_values_apply_and_flags_win() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    std::fs::write(p.join("cfg.toml"), "seed = 9\n[toy]\nd_inp = 16\nn_heads = 2\n[train]\nepochs = 1\nmax_steps = 2\n").unwrap();
    ok(p, &["gen-corpus", "--kind", "speculative", "--out", "s.txt", "--count", "16", "--config", "cfg.toml"]);
    let spec = std::fs::read_to_string(p.join("s.txt.spec.toml")).unwrap();
    assert!(spec.contains("seed = 9"), "{spec}");
    ok(p, &["train-base", "--corpus", "s.txt", "--out", "b.ckpt", "--config", "cfg.toml", "--metrics", "m.jsonl", "--max-steps", "1"]);
    assert_eq!(read_metrics(&p.join("m.jsonl")).unwrap().len(), 1);
    let bytes = std::fs::read(p.join("b.ckpt")).unwrap();
    assert_eq!(&bytes[..8], MAGIC);
    assert_eq!(read_manifest(&bytes).unwrap().0.model.d_inp, 16);

    std::fs::write(p.join("bad.toml"), "[toy]\nno_such_key = 1\n").unwrap();
    assert_eq!(otter(p, &["inspect", "--llama7b", "--config", "bad.toml"]).status.code(), Some(2));
}

#[test]
fn seed_from_environment() {
    let d = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_otter"))
        .current_dir(d.path())
        .env("OTTER_SEED", "42")
        .args(["gen-corpus", "--kind", "speculative", "--out", "s.txt", "--count", "4"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(std::fs::read_to_string(d.path().join("s.txt.spec.toml")).unwrap().contains("seed = 42"));
}

#[test]
fn corrupted_checkpoint_names_tensor() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(p, &["gen-corpus", "--kind", "speculative", "--out", "s.txt", "--count", "8"]);
    ok(p, &["train-base", "--corpus", "s.txt", "--out", "b.ckpt", "--max-steps", "1"]);
    let mut bytes = std::fs::read(p.join("b.ckpt")).unwrap();
    let (m, start) = read_manifest(&bytes).unwrap();
    let t = m.tensors.iter().find(|t| t.name == "layers.1.w_up").unwrap();
    bytes[start + t.offset as usize + 7] ^= 1;
    std::fs::write(p.join("bad.ckpt"), &bytes).unwrap();
    let out = otter(p, &["inspect", "--ckpt", "bad.ckpt"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("layers.1.w_up"));
}

#[test]
fn inspect_reports_scale_accounting() {
    let d = tempfile::tempdir().unwrap();
    let out = ok(d.path(), &["inspect", "--llama7b"]);
    assert!(out.contains("8.51B"), "{out}");
}

#[test]
fn study_workloads_need_no_checkpoint() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    std::fs::write(p.join("quick.toml"), "[toy]\nbase_epochs = 1\nn_prompts = 2\nmax_new_tokens = 4\nsamples_per_prompt = 1\n").unwrap();
    let out = ok(p, &["bench", "--workload", "speculative-study", "--config", "quick.toml", "--out-dir", "r"]);
    assert!(out.contains("speedup"), "{out}");
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(p.join("r/speculative-study.json")).unwrap()).unwrap();
    assert_eq!(report["matches_greedy"], true);
    assert!(!read_metrics(&p.join("r/speculative-study.curves.jsonl")).unwrap().is_empty());
    assert_eq!(otter(p, &["bench", "--workload", "overhead"]).status.code(), Some(2));
}
