mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use warploc::io::{save_checkpoint, CheckpointMeta, RunConfig};
use warploc::pipeline::MODEL_KIND_REGRESSOR;
use warploc::regressor::RegressorModel;

fn warploc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_warploc"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn expect_ok(args: &[&str]) {
    let out = warploc(args);
    assert!(
        out.status.success(),
        "command {:?} failed\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn save_untrained_regressor(path: &Path) {
    let model = RegressorModel::<f32>::init(0);
    save_checkpoint(
        model.params(),
        &CheckpointMeta {
            model_kind: MODEL_KIND_REGRESSOR.into(),
            config_hash: RunConfig::default().hash(),
        },
        path,
    )
    .unwrap();
}

#[test]
fn usage_errors_exit_1_with_synopsis_on_stderr() {
    // unknown subcommand
    let out = warploc(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("Usage"), "stderr lacks synopsis: {err}");
    assert!(out.stdout.is_empty());

    // missing required flag
    let out = warploc(&["rank", "--manifest", "x.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));

    // bad enum value
    let out = warploc(&["rank", "--mode", "psychic"]);
    assert_eq!(out.status.code(), Some(1));

    // --help exits 0 and prints to stdout
    let out = warploc(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("gen-synth"));
}

#[test]
fn runtime_errors_exit_2() {
    let out = warploc(&[
        "index",
        "--manifest",
        "/nonexistent/manifest.jsonl",
        "--encoder",
        "/nonexistent/enc.ckpt",
        "--out",
        "/tmp/never.json",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("error:"), "stderr: {err}");
}

#[test]
fn gen_synth_is_byte_reproducible_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        expect_ok(&[
            "gen-synth",
            "--out",
            d.to_str().unwrap(),
            "--train-scenes",
            "2",
            "--train-views",
            "2",
            "--test-scenes",
            "2",
            "--test-views",
            "2",
            "--view-size",
            "64",
            "--seed",
            "9",
        ]);
    }
    let ma = fs::read(a.join("manifest.jsonl")).unwrap();
    let mb = fs::read(b.join("manifest.jsonl")).unwrap();
    assert_eq!(ma, mb);
    let mut names: Vec<String> = fs::read_dir(a.join("images"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(names.len(), 8);
    for n in &names {
        let pa = fs::read(a.join("images").join(n)).unwrap();
        let pb = fs::read(b.join("images").join(n)).unwrap();
        assert_eq!(pa, pb, "image {n} differs between identical runs");
    }
}

/// Walks the whole artifact chain once on a small world and checks the
/// command-level contracts along the way.
#[test]
fn cli_pipeline_chain_and_mode_contracts() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    let manifest = data.join("manifest.jsonl");
    let enc = root.join("encoder.ckpt");
    let pairs = root.join("pairs.jsonl");
    let index = root.join("index.json");

    expect_ok(&[
        "gen-synth",
        "--out",
        data.to_str().unwrap(),
        "--train-scenes",
        "2",
        "--train-views",
        "3",
        "--test-scenes",
        "3",
        "--test-views",
        "3",
        "--view-size",
        "64",
        "--seed",
        "41",
    ]);

    expect_ok(&[
        "train-encoder",
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        enc.to_str().unwrap(),
        "--iterations",
        "5",
        "--seed",
        "3",
    ]);

    expect_ok(&[
        "mine-pairs",
        "--manifest",
        manifest.to_str().unwrap(),
        "--encoder",
        enc.to_str().unwrap(),
        "--out",
        pairs.to_str().unwrap(),
    ]);
    assert!(fs::read_to_string(&pairs).unwrap().lines().count() > 0);

    expect_ok(&[
        "index",
        "--manifest",
        manifest.to_str().unwrap(),
        "--encoder",
        enc.to_str().unwrap(),
        "--out",
        index.to_str().unwrap(),
    ]);

    // untrained regressor: warp-mode ranking must equal no-warp ranking
    let reg = root.join("untrained.ckpt");
    save_untrained_regressor(&reg);
    let rank_nw = root.join("rank-no-warp.csv");
    let rank_w = root.join("rank-warp.csv");
    for (mode, out) in [("no-warp", &rank_nw), ("warp", &rank_w)] {
        expect_ok(&[
            "rank",
            "--manifest",
            manifest.to_str().unwrap(),
            "--index",
            index.to_str().unwrap(),
            "--encoder",
            enc.to_str().unwrap(),
            "--regressor",
            reg.to_str().unwrap(),
            "--top",
            "3",
            "--mode",
            mode,
            "--out",
            out.to_str().unwrap(),
        ]);
    }
    let bytes_nw = fs::read(&rank_nw).unwrap();
    assert_eq!(
        bytes_nw,
        fs::read(&rank_w).unwrap(),
        "untrained regressor must leave the warp-mode ranking identical"
    );
    let text = String::from_utf8(bytes_nw).unwrap();
    assert!(text.starts_with("query_id,rank,gallery_id,global_sim,dense_score\n"));
    // 6 test queries x shortlist of 3
    assert_eq!(text.lines().count(), 1 + 6 * 3);

    // warp mode without a regressor is a runtime error
    let out = warploc(&[
        "rank",
        "--manifest",
        manifest.to_str().unwrap(),
        "--index",
        index.to_str().unwrap(),
        "--encoder",
        enc.to_str().unwrap(),
        "--mode",
        "warp",
        "--out",
        root.join("never.csv").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("regressor"));

    // eval: three thresholds, three rows per mode
    let eval_csv = root.join("eval.csv");
    expect_ok(&[
        "eval",
        "--manifest",
        manifest.to_str().unwrap(),
        "--index",
        index.to_str().unwrap(),
        "--encoder",
        enc.to_str().unwrap(),
        "--regressor",
        reg.to_str().unwrap(),
        "--thresholds",
        "10,25,50",
        "--top",
        "3",
        "--out",
        eval_csv.to_str().unwrap(),
    ]);
    let text = fs::read_to_string(&eval_csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "mode,threshold_m,recall_at_1,recall_at_5");
    assert_eq!(lines.len(), 1 + 9, "three rows per mode for three modes");
    for mode in ["global", "no-warp", "warp"] {
        assert_eq!(
            lines.iter().filter(|l| l.starts_with(&format!("{mode},"))).count(),
            3,
            "mode {mode} must have one row per threshold"
        );
    }

    // train-warp short run, then byte-identical re-run with the same seed
    let (w1, w2) = (root.join("w1.ckpt"), root.join("w2.ckpt"));
    let (c1, c2) = (root.join("l1.csv"), root.join("l2.csv"));
    for (ck, cs) in [(&w1, &c1), (&w2, &c2)] {
        expect_ok(&[
            "train-warp",
            "--manifest",
            manifest.to_str().unwrap(),
            "--encoder",
            enc.to_str().unwrap(),
            "--pairs",
            pairs.to_str().unwrap(),
            "--out",
            ck.to_str().unwrap(),
            "--loss-csv",
            cs.to_str().unwrap(),
            "--iterations",
            "2",
            "--batch-ss",
            "1",
            "--batch-ws",
            "1",
            "--seed",
            "6",
        ]);
    }
    assert_eq!(fs::read(&w1).unwrap(), fs::read(&w2).unwrap());
    assert_eq!(fs::read(&c1).unwrap(), fs::read(&c2).unwrap());

    // warp-viz emits deterministically
    let img_dir = data.join("images");
    let a_png = img_dir.join("test-scene000-view1.png");
    let b_png = img_dir.join("test-scene000-view0.png");
    let (v1, v2) = (root.join("v1.png"), root.join("v2.png"));
    for v in [&v1, &v2] {
        expect_ok(&[
            "warp-viz",
            "--query",
            a_png.to_str().unwrap(),
            "--pair",
            b_png.to_str().unwrap(),
            "--encoder",
            enc.to_str().unwrap(),
            "--regressor",
            w1.to_str().unwrap(),
            "--out",
            v.to_str().unwrap(),
        ]);
    }
    let viz = fs::read(&v1).unwrap();
    assert!(!viz.is_empty());
    assert_eq!(viz, fs::read(&v2).unwrap());
}
