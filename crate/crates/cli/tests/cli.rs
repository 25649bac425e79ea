use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use eyedeg::trainer::TrainConfig;

fn eyedeg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eyedeg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect()
}

fn gen(dir: &Path, args: &[&str]) -> Output {
    let mut all = vec!["gen", "--out", p(dir)];
    all.extend_from_slice(args);
    eyedeg(&all)
}

#[test]
fn gen_stratified_syn_writes_one_file_per_state() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("syn");
    let r = gen(
        &out,
        &["--domain", "syn", "--count", "11", "--stratified", "--seed", "4"],
    );
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let files = tree(&out);
    assert_eq!(files.len(), 12);
    assert_eq!(files.keys().filter(|k| k.ends_with(".pgm")).count(), 11);
    let manifest = String::from_utf8(files["manifest.jsonl"].clone()).unwrap();
    let mut labels: Vec<f64> = manifest
        .lines()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["label"]
                .as_f64()
                .unwrap()
        })
        .collect();
    labels.sort_by(f64::total_cmp);
    assert_eq!(labels, (0..=10).map(|i| 10.0 * i as f64).collect::<Vec<_>>());
    let run: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("syn.run.json")).unwrap()).unwrap();
    assert_eq!(run["command"], "gen");
    assert_eq!(run["seeds"]["dataset"], 4);
}

#[test]
fn gen_same_seed_gives_identical_trees() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        assert_eq!(code(&gen(d, &["--domain", "real", "--count", "20", "--seed", "8"])), 0);
    }
    assert_eq!(tree(&a), tree(&b));
}

#[test]
fn gen_refuses_bad_requests() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(
        code(&gen(&tmp.path().join("z"), &["--domain", "real", "--count", "0"])),
        2
    );
    assert_eq!(code(&gen(&tmp.path().join("y"), &["--domain", "moon"])), 2);
    let d = tmp.path().join("x");
    assert_eq!(code(&gen(&d, &["--domain", "syn", "--count", "2"])), 0);
    // Outputs are write-once.
    assert_eq!(code(&gen(&d, &["--domain", "syn", "--count", "2"])), 3);
}

#[test]
fn gen_reads_config_file_and_flags_win() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("gen.cfg");
    fs::write(&cfg, "# dataset\ndomain = syn\ncount = 7\nseed = 2\n").unwrap();
    let out = tmp.path().join("d");
    assert_eq!(code(&gen(&out, &["--config", p(&cfg), "--count", "3"])), 0);
    assert_eq!(tree(&out).len(), 4);
}

#[test]
fn train_mode_requirements() {
    let tmp = tempfile::tempdir().unwrap();
    let syn = tmp.path().join("syn");
    assert_eq!(
        code(&gen(&syn, &["--domain", "syn", "--count", "8", "--stratified"])),
        0
    );
    let ckpt = tmp.path().join("joint.ckpt");
    let r = eyedeg(&[
        "train",
        "--mode",
        "joint",
        "--syn",
        p(&syn),
        "--out",
        p(&ckpt),
        "--net",
        "compact",
    ]);
    assert_eq!(code(&r), 2);
    assert!(!ckpt.exists());

    let ckpt = tmp.path().join("syn.ckpt");
    let r = eyedeg(&[
        "train",
        "--mode",
        "syn",
        "--syn",
        p(&syn),
        "--real",
        "/does/not/exist",
        "--out",
        p(&ckpt),
        "--net",
        "compact",
        "--epochs",
        "2",
        "--batch-size",
        "4",
        "--lr",
        "0.001",
    ]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    assert!(ckpt.exists());
    let log = fs::read_to_string(tmp.path().join("syn.ckpt.log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let run: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("syn.ckpt.run.json")).unwrap()).unwrap();
    assert_eq!(run["config"]["resolved"]["mode"], "syn_only");
    assert_eq!(run["config"]["resolved"]["epochs"], 2);
}

#[test]
fn train_then_eval_infer_curve_and_matrix() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let (syn, real, seq) = (t.join("syn"), t.join("real"), t.join("seq"));
    assert_eq!(
        code(&gen(&syn, &["--domain", "syn", "--count", "24", "--stratified"])),
        0
    );
    assert_eq!(
        code(&gen(&real, &["--domain", "real", "--count", "8", "--stratified"])),
        0
    );
    assert_eq!(
        code(&gen(
            &seq,
            &["--domain", "blink", "--frames", "12", "--pattern", "close-open"]
        )),
        0
    );
    let ckpt = t.join("m.ckpt");
    let r = eyedeg(&[
        "train",
        "--syn",
        p(&syn),
        "--real",
        p(&real),
        "--out",
        p(&ckpt),
        "--net",
        "compact",
        "--epochs",
        "1",
        "--batch-size",
        "8",
    ]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));

    let report = t.join("eval.json");
    assert_eq!(
        code(&eyedeg(&[
            "eval",
            "--ckpt",
            p(&ckpt),
            "--data",
            p(&real),
            "--out",
            p(&report)
        ])),
        0
    );
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert!(v["degree_mse"].is_null());
    assert_eq!(v["counts"]["binary"], 8);

    let prefix = t.join("curve");
    assert_eq!(
        code(&eyedeg(&[
            "curve",
            "--ckpt",
            p(&ckpt),
            "--seq",
            p(&seq),
            "--out",
            p(&prefix)
        ])),
        0
    );
    let csv = fs::read_to_string(t.join("curve.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 12);
    assert!(fs::read_to_string(t.join("curve.svg")).unwrap().starts_with("<svg"));

    let prefix = t.join("table");
    let r = eyedeg(&[
        "matrix",
        "--ckpt",
        &format!("syn={}", p(&ckpt)),
        "--data",
        &format!("syn={}", p(&syn)),
        "--data",
        &format!("real={}", p(&real)),
        "--out",
        p(&prefix),
    ]);
    assert_eq!(code(&r), 0);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(t.join("table.json")).unwrap()).unwrap();
    assert_eq!(m["rows"].as_array().unwrap().len(), 2);

    let image = seq.join(
        fs::read_dir(&seq)
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .find(|n| n.to_string_lossy().ends_with(".pgm"))
            .unwrap(),
    );
    let r = eyedeg(&["infer", "--ckpt", p(&ckpt), "--image", p(&image)]);
    assert_eq!(code(&r), 0);
    let v: serde_json::Value = serde_json::from_slice(&r.stdout).unwrap();
    assert!(v["degree"].as_f64().unwrap() >= 0.0);
    assert!(["open", "closed"].contains(&v["state"].as_str().unwrap()));

    let lm = t.join("lm.json");
    fs::write(&lm, "{\"left\": [1, 2]").unwrap();
    assert_eq!(
        code(&eyedeg(&[
            "infer",
            "--ckpt",
            p(&ckpt),
            "--image",
            p(&image),
            "--landmarks",
            p(&lm)
        ])),
        2
    );

    let bad = t.join("bad.ckpt");
    fs::write(&bad, b"nope").unwrap();
    assert_eq!(code(&eyedeg(&["infer", "--ckpt", p(&bad), "--image", p(&image)])), 3);
}

#[test]
fn finetune_writes_split_and_rejects_binary_labels() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let (syn, prime, real) = (t.join("syn"), t.join("prime"), t.join("real"));
    assert_eq!(code(&gen(&syn, &["--domain", "syn", "--count", "8"])), 0);
    assert_eq!(code(&gen(&prime, &["--domain", "realprime", "--count", "16"])), 0);
    assert_eq!(code(&gen(&real, &["--domain", "real", "--count", "8"])), 0);
    let ckpt = t.join("m.ckpt");
    let base = ["--net", "compact", "--epochs", "1", "--batch-size", "4"];
    let mut args = vec!["train", "--mode", "syn", "--syn", p(&syn), "--out", p(&ckpt)];
    args.extend_from_slice(&base);
    assert_eq!(code(&eyedeg(&args)), 0);

    let ft = t.join("ft.ckpt");
    let r = eyedeg(&[
        "finetune",
        "--ckpt",
        p(&ckpt),
        "--data",
        p(&prime),
        "--out",
        p(&ft),
        "--epochs",
        "1",
        "--batch-size",
        "4",
    ]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let split: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(t.join("ft.ckpt.split.json")).unwrap()).unwrap();
    assert_eq!(split["train"].as_array().unwrap().len(), 12);
    assert_eq!(split["test"].as_array().unwrap().len(), 4);
    let run: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(t.join("ft.ckpt.run.json")).unwrap()).unwrap();
    assert_eq!(run["config"]["resolved"]["net"], "compact");

    let r = eyedeg(&[
        "eval",
        "--ckpt",
        p(&ft),
        "--data",
        p(&prime),
        "--split",
        "test",
        "--out",
        p(&t.join("e.json")),
    ]);
    assert_eq!(code(&r), 0);
    let v: serde_json::Value = serde_json::from_slice(&r.stdout).unwrap();
    assert_eq!(v["counts"]["degree"], 4);

    let r = eyedeg(&[
        "finetune",
        "--ckpt",
        p(&ckpt),
        "--data",
        p(&real),
        "--out",
        p(&t.join("x.ckpt")),
    ]);
    assert_eq!(code(&r), 2);
}

#[test]
fn gradcheck_exits_zero_when_everything_matches() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("gc.json");
    let r = eyedeg(&["gradcheck", "--seed", "3", "--out", p(&out)]);
    assert_eq!(code(&r), 0);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v["passed"], true);
    assert!(tmp.path().join("gc.json.run.json").exists());
}

#[test]
fn help_lists_training_defaults() {
    let cfg = TrainConfig::default();
    for cmd in ["train", "finetune"] {
        let r = eyedeg(&[cmd, "--help"]);
        assert_eq!(code(&r), 0);
        let help = String::from_utf8(r.stdout).unwrap();
        for (flag, value) in [
            ("--lr", cfg.lr.to_string()),
            ("--epochs", cfg.epochs.to_string()),
            ("--batch-size", cfg.batch_size.to_string()),
            ("--real-fraction", cfg.real_fraction.to_string()),
            ("--lambda1", cfg.weights.lambda1.to_string()),
            ("--lambda2", cfg.weights.lambda2.to_string()),
            ("--lambda3", cfg.weights.lambda3.to_string()),
            ("--ot", cfg.weights.ot.to_string()),
            ("--seed", cfg.seed.to_string()),
            ("--beta1", cfg.beta1.to_string()),
            ("--beta2", cfg.beta2.to_string()),
            ("--lr-decay-factor", cfg.lr_decay_factor.to_string()),
            ("--net", cfg.net.clone()),
        ] {
            let line = help
                .lines()
                .skip_while(|l| !l.trim_start().starts_with(flag) || l.trim_start()[flag.len()..].starts_with('-'))
                .take(3)
                .collect::<Vec<_>>()
                .join(" ");
            assert!(
                line.contains(&format!("[default: {value}")),
                "{cmd} {flag}: expected default {value} in {line:?}"
            );
        }
    }
}

#[test]
fn config_file_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("t.cfg");
    fs::write(&cfg, "lr = fast\n").unwrap();
    let r = eyedeg(&[
        "train",
        "--mode",
        "syn",
        "--syn",
        "x",
        "--config",
        p(&cfg),
        "--out",
        p(&tmp.path().join("m")),
    ]);
    assert_eq!(code(&r), 2);
    assert!(String::from_utf8_lossy(&r.stderr).contains("line 1"));
}
