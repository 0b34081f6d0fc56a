use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn occrec(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_occrec"))
        .current_dir(dir)
        .env_remove("OCCREC_SEED")
        .env("RUST_LOG", "error")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = occrec(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const SMALL: &[&str] = &["--identities", "30", "--images-per-identity", "8"];

fn small_benchmark(dir: &Path, out: &str, seed: &str) {
    let mut args = vec!["gen", "--out", out, "--seed", seed];
    args.extend_from_slice(SMALL);
    ok(dir, &args);
}

#[test]
fn gen_is_reproducible_and_seed_falls_back_to_env() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    small_benchmark(dir, "a", "7");
    small_benchmark(dir, "b", "7");
    let mut env_args = vec!["gen", "--out", "c"];
    env_args.extend_from_slice(SMALL);
    let out = Command::new(env!("CARGO_BIN_EXE_occrec"))
        .current_dir(dir)
        .env("OCCREC_SEED", "7")
        .args(&env_args)
        .output()
        .unwrap();
    assert!(out.status.success());
    small_benchmark(dir, "d", "8");
    for f in ["train.feat", "query.feat", "gallery.feat", "truth.json"] {
        let a = fs::read(dir.join("a").join(f)).unwrap();
        assert_eq!(a, fs::read(dir.join("b").join(f)).unwrap(), "{f}");
        assert_eq!(a, fs::read(dir.join("c").join(f)).unwrap(), "{f}");
        assert_ne!(a, fs::read(dir.join("d").join(f)).unwrap(), "{f}");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("a/manifest.json")).unwrap()).unwrap();
    let outputs = manifest["outputs"].as_array().unwrap();
    assert_eq!(outputs.len(), 4);
    assert!(outputs.iter().all(|o| o["sha256"].as_str().unwrap().len() == 64));
    assert_eq!(manifest["seed"], 7);
}

#[test]
fn exit_codes_follow_the_contract() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    assert_eq!(occrec(dir, &["--help"]).status.code(), Some(0));
    assert_eq!(occrec(dir, &["gen", "--out", "x", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(occrec(dir, &["frobnicate"]).status.code(), Some(1));
    assert_eq!(occrec(dir, &["--theta-infer", "3", "gen", "--out", "x"]).status.code(), Some(1));
    let missing = occrec(dir, &["eval", "--query", "nope.feat", "--gallery", "nope.feat", "--out", "r.json"]);
    assert_eq!(missing.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&missing.stderr);
    assert!(msg.contains("nope.feat") && msg.lines().count() == 1, "{msg}");
    fs::write(dir.join("query.feat"), b"OCCREC1 6 32 5 1\n{\"image_id\":").unwrap();
    let bad = occrec(dir, &["eval", "--query", "query.feat", "--gallery", "query.feat", "--out", "r.json", "--variant", "oan"]);
    assert_eq!(bad.status.code(), Some(2));
    fs::write(dir.join("bad.cfg"), "epochs = lots\n").unwrap();
    assert_eq!(occrec(dir, &["--config", "bad.cfg", "gen", "--out", "x"]).status.code(), Some(1));
}

#[test]
fn flags_override_the_config_file() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    small_benchmark(dir, "d", "1");
    fs::write(dir.join("run.cfg"), "# short run\nepochs = 1\nk_train = 12\n").unwrap();
    ok(
        dir,
        &["--profile", "desk", "--config", "run.cfg", "--epochs", "2", "train-gnn", "--train", "d/train.feat", "--out", "g.bin"],
    );
    let m: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("g.bin.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config"]["epochs"], 2);
    assert_eq!(m["config"]["k_train"], 12);
    assert_eq!(m["config"]["d"], 32);
    assert_eq!(m["extra"]["epoch_losses"].as_array().unwrap().len(), 2);
}

#[test]
fn gradcheck_fails_loudly_when_tolerance_is_impossible() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let pass = occrec(dir, &["gradcheck", "--instances", "2"]);
    assert_eq!(pass.status.code(), Some(0));
    let fail = occrec(dir, &["gradcheck", "--instances", "2", "--tolerance", "1e-15"]);
    assert_ne!(fail.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&fail.stdout).contains("FAIL"));
}

#[test]
fn pipeline_commands_write_their_formats_without_touching_inputs() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let mut gen = vec!["gen", "--out", "d", "--seed", "2", "--raw"];
    gen.extend_from_slice(SMALL);
    ok(dir, &gen);
    let before: Vec<Vec<u8>> = ["d/train.feat", "d/query.feat", "d/gallery.feat"]
        .iter()
        .map(|f| fs::read(dir.join(f)).unwrap())
        .collect();
    let desk = ["--profile", "desk", "--epochs", "2"];
    let run = |args: &[&str]| {
        let mut all: Vec<&str> = desk.to_vec();
        all.extend_from_slice(args);
        ok(dir, &all)
    };

    run(&["neighbors", "--query", "d/query.feat", "--gallery", "d/gallery.feat", "--out", "n.jsonl"]);
    let lines: Vec<serde_json::Value> = fs::read_to_string(dir.join("n.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(!lines.is_empty());
    for l in &lines {
        let obj = l.as_object().unwrap();
        assert_eq!(obj.len(), 3);
        assert!(l["query"].is_string() && l["members"].is_array() && l["fallback"].is_boolean());
        assert_eq!(l["fallback"].as_bool().unwrap(), l["members"].as_array().unwrap().is_empty());
    }

    run(&["index", "--gallery", "d/gallery.feat", "--out", "index.feat"]);
    run(&["train-encoder", "--train", "d/raw_train.feat", "--out", "enc.bin"]);
    assert!(fs::read(dir.join("enc.bin")).unwrap().starts_with(b"OCCENC1 "));
    run(&["encode", "--input", "d/raw_query.feat", "--encoder", "enc.bin", "--out", "enc_query.feat"]);
    assert!(fs::read(dir.join("enc_query.feat")).unwrap().starts_with(b"OCCREC1 6 32 "));

    run(&["train-gnn", "--train", "d/train.feat", "--out", "orgnn.bin"]);
    assert!(fs::read(dir.join("orgnn.bin")).unwrap().starts_with(b"OCCGNN1 6 32 2 "));
    run(&["reconstruct", "--query", "d/query.feat", "--gallery", "d/gallery.feat", "--gnn", "orgnn.bin", "--out", "rec_query.feat"]);
    run(&["eval", "--query", "d/query.feat", "--gallery", "d/gallery.feat", "--orgnn", "orgnn.bin", "--out", "r.json", "--csv", "r.csv"]);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("r.json")).unwrap()).unwrap();
    assert_eq!(report["variant"], "oan+orgnn");

    let csv = run(&["ablate", "--train", "d/train.feat", "--query", "d/query.feat", "--gallery", "d/gallery.feat", "--out", "abl"]);
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "variant,map,rank1,rank5,rank10,fallbacks");
    assert_eq!(rows.len(), 8);
    for r in &rows[1..] {
        let cells: Vec<&str> = r.split(',').collect();
        assert_eq!(cells.len(), 6);
        assert!(cells[1..5].iter().all(|c| (0.0..=1.0).contains(&c.parse::<f64>().unwrap())));
        cells[5].parse::<usize>().unwrap();
    }
    assert_eq!(fs::read_to_string(dir.join("abl/ablation.csv")).unwrap(), csv);

    let after: Vec<Vec<u8>> = ["d/train.feat", "d/query.feat", "d/gallery.feat"]
        .iter()
        .map(|f| fs::read(dir.join(f)).unwrap())
        .collect();
    assert_eq!(before, after);
}

#[test]
fn masks_feed_the_occlusion_estimator() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    ok(dir, &["masks", "--out", "m", "--count", "60", "--seed", "4"]);
    ok(dir, &["occlusion", "m", "--out", "vis.jsonl"]);
    let truth: Vec<serde_json::Value> = fs::read_to_string(dir.join("m/masks.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let est: Vec<serde_json::Value> = fs::read_to_string(dir.join("vis.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(truth.len(), est.len());
    let (mut agree, mut total) = (0, 0);
    for (t, e) in truth.iter().zip(&est) {
        assert_eq!(t["id"], e["mask"]);
        for (a, b) in t["visible"].as_array().unwrap().iter().zip(e["visible"].as_array().unwrap()) {
            agree += usize::from(a == b);
            total += 1;
        }
    }
    assert!(agree as f64 >= 0.95 * total as f64, "{agree}/{total}");
}
