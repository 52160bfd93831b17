use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn brq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_brq")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

fn synth(dir: &Path, n: &str) {
    let o = brq(&["synth", "--n", n, "--seed", "7", "--duration", "0.5", "--out", s(dir)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn synth_is_reproducible_and_validates_arguments() {
    let t = tempfile::tempdir().unwrap();
    synth(&t.path().join("a"), "8");
    synth(&t.path().join("b"), "8");
    let a = tree(&t.path().join("a"));
    assert_eq!(a.len(), 9);
    assert_eq!(a, tree(&t.path().join("b")));

    let o = brq(&["synth", "--n", "8"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert!(o.stdout.is_empty());
    let o = brq(&["synth", "--n", "0", "--out", s(&t.path().join("c"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn help_exits_zero_everywhere() {
    for sub in ["synth", "cluster", "pretrain", "validate", "quantize", "stats"] {
        let o = brq(&[sub, "--help"]);
        assert_eq!(o.status.code(), Some(0), "{sub}");
        assert!(String::from_utf8_lossy(&o.stdout).contains("--"), "{sub}");
    }
    assert_eq!(brq(&["--version"]).status.code(), Some(0));
}

#[test]
fn cluster_annotates_and_guards_codebook_count() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    synth(&d.join("c"), "12");
    let cluster = |model: &str, manifest: &str| {
        brq(&[
            "cluster",
            "--manifest",
            s(&d.join("c/manifest.jsonl")),
            "--k",
            "6",
            "--seed",
            "3",
            "--out-model",
            s(&d.join(model)),
            "--out-manifest",
            s(&d.join(manifest)),
        ])
    };
    assert!(cluster("m1.json", "c/k1.jsonl").status.success());
    assert!(cluster("m2.json", "c/k2.jsonl").status.success());
    assert_eq!(std::fs::read(d.join("m1.json")).unwrap(), std::fs::read(d.join("m2.json")).unwrap());
    let text = std::fs::read_to_string(d.join("c/k1.jsonl")).unwrap();
    for line in text.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert!(v["cluster"].as_u64().unwrap() < 6);
    }

    let o = brq(&[
        "pretrain",
        "--preset",
        "proposed",
        "--codebooks",
        "4",
        "--manifest",
        s(&d.join("c/k1.jsonl")),
        "--cluster-model",
        s(&d.join("m1.json")),
        "--out",
        s(&d.join("run")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!d.join("run/metrics.jsonl").exists());
}

#[test]
fn presets_dump_their_configuration() {
    let dump = |preset: &str| -> Value {
        let o = brq(&["pretrain", "--preset", preset, "--dump-config"]);
        assert!(o.status.success());
        serde_json::from_slice(&o.stdout).unwrap()
    };
    let b = dump("baseline");
    assert_eq!(b["bank"]["n_codebooks"], 1);
    assert_eq!(b["bank"]["codebook_size"], 8192);
    assert_eq!(b["bank"]["codebook_dim"], 16);
    assert_eq!(b["train"]["loss"]["w_kl"], 0.0);
    assert_eq!(b["train"]["loss"]["cluster_weighting"], false);
    let p = dump("proposed");
    assert_eq!(p["bank"]["n_codebooks"], 6);
    assert_eq!(p["encoder"]["n_heads_out"], 6);
    assert_eq!(p["bank"]["codebook_size"], 8192);
    assert_eq!(p["train"]["loss"]["w_ce"], 1.0);
    assert_eq!(p["train"]["loss"]["w_kl"], 0.1);
    assert_eq!(p["train"]["loss"]["cluster_weighting"], true);

    assert_eq!(brq(&["pretrain", "--preset", "other", "--dump-config"]).status.code(), Some(1));
}

#[test]
fn config_file_with_flag_overrides() {
    let t = tempfile::tempdir().unwrap();
    let o = brq(&["pretrain", "--preset", "proposed", "--dump-config"]);
    std::fs::write(t.path().join("c.json"), &o.stdout).unwrap();
    let o = brq(&["pretrain", "--config", s(&t.path().join("c.json")), "--w-kl", "0.5", "--steps", "7", "--dump-config"]);
    assert!(o.status.success());
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["train"]["loss"]["w_kl"], 0.5);
    assert_eq!(v["train"]["steps"], 7);
    assert_eq!(v["bank"]["n_codebooks"], 6);

    std::fs::write(t.path().join("bad.json"), r#"{"nope": 1}"#).unwrap();
    let o = brq(&["pretrain", "--config", s(&t.path().join("bad.json")), "--dump-config"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn missing_resume_checkpoint_is_a_user_error() {
    let t = tempfile::tempdir().unwrap();
    synth(&t.path().join("c"), "4");
    let o = brq(&[
        "pretrain",
        "--manifest",
        s(&t.path().join("c/manifest.jsonl")),
        "--out",
        s(&t.path().join("run")),
        "--resume",
        s(&t.path().join("nothing.brq")),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn pretrain_validate_and_quantize_from_checkpoint() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    synth(&d.join("c"), "6");
    let o = brq(&[
        "pretrain",
        "--preset",
        "baseline",
        "--vocab",
        "32",
        "--steps",
        "3",
        "--batch",
        "2",
        "--validate-every",
        "2",
        "--manifest",
        s(&d.join("c/manifest.jsonl")),
        "--out",
        s(&d.join("run")),
        "--quiet",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(o.stdout.is_empty());
    let log = std::fs::read_to_string(d.join("run/metrics.jsonl")).unwrap();
    let phases: Vec<(String, u64)> = log
        .lines()
        .map(|l| {
            let v: Value = serde_json::from_str(l).unwrap();
            (v["phase"].as_str().unwrap().to_string(), v["step"].as_u64().unwrap())
        })
        .collect();
    let expect = [("val", 0), ("train", 0), ("train", 1), ("val", 2), ("train", 2), ("val", 3)];
    assert_eq!(phases, expect.map(|(p, s)| (p.to_string(), s)));

    let o = brq(&["validate", "--checkpoint", s(&d.join("run/final.brq")), "--manifest", s(&d.join("c/manifest.jsonl"))]);
    assert!(o.status.success());
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["step"], 3);
    assert_eq!(v["utterances"], 6);
    assert!(v["report"]["total"].as_f64().unwrap().is_finite());

    let o = brq(&["quantize", "--manifest", s(&d.join("c/manifest.jsonl")), "--checkpoint", s(&d.join("run/final.brq"))]);
    assert!(o.status.success());
    for line in String::from_utf8(o.stdout).unwrap().lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["vocab"], 32);
        assert!(v["targets"][0].as_array().unwrap().iter().all(|x| x.as_u64().unwrap() < 32));
    }
    let o = brq(&["validate", "--checkpoint", s(&d.join("missing.brq")), "--manifest", s(&d.join("c/manifest.jsonl"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn quantize_shapes_and_determinism() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    synth(&d.join("c"), "5");
    let run = |out: &str| {
        let o = brq(&[
            "quantize",
            "--manifest",
            s(&d.join("c/manifest.jsonl")),
            "--codebooks",
            "3",
            "--vocab",
            "50",
            "--seed",
            "2",
            "--out",
            s(&d.join(out)),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read_to_string(d.join(out)).unwrap()
    };
    let a = run("a.jsonl");
    assert_eq!(a, run("b.jsonl"));
    assert_eq!(a.lines().count(), 5);
    for line in a.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        let arrays = v["targets"].as_array().unwrap();
        assert_eq!(arrays.len(), 3);
        let len = arrays[0].as_array().unwrap().len();
        assert!(len > 0);
        for arr in arrays {
            let arr = arr.as_array().unwrap();
            assert_eq!(arr.len(), len);
            assert!(arr.iter().all(|x| x.as_u64().unwrap() < 50));
        }
    }
}

#[test]
fn stats_entropy_mask_report_and_empty_input() {
    let t = tempfile::tempdir().unwrap();
    let v = 16usize;
    let line = |i: usize| {
        let toks: Vec<usize> = (0..v).map(|j| (i + j) % v).collect();
        serde_json::json!({"id": format!("u{i}"), "vocab": v, "targets": [toks]}).to_string()
    };
    let text: Vec<String> = (0..4).map(line).collect();
    std::fs::write(t.path().join("u.jsonl"), text.join("\n") + "\n").unwrap();
    let o = brq(&["stats", "--tokens", s(&t.path().join("u.jsonl")), "--mask", "--seeds", "50"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: Value = serde_json::from_slice(&o.stdout).unwrap();
    let h = r["codebooks"][0]["entropy_nats"].as_f64().unwrap();
    assert!((h - (v as f64).ln()).abs() < 1e-6);
    assert_eq!(r["codebooks"][0]["utilization"], 1.0);
    let frac = r["mask"]["mean_fraction"].as_f64().unwrap();
    assert!((frac - (1.0 - 0.85f64.powi(4))).abs() < 0.01);

    std::fs::write(t.path().join("e.jsonl"), "").unwrap();
    assert_eq!(brq(&["stats", "--tokens", s(&t.path().join("e.jsonl"))]).status.code(), Some(1));
    std::fs::write(t.path().join("x.jsonl"), "not json\n").unwrap();
    assert_eq!(brq(&["stats", "--tokens", s(&t.path().join("x.jsonl"))]).status.code(), Some(1));
}
