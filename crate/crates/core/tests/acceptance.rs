//! Acceptance suite. Runs every criterion at its stated tolerance, prints one
//! PASS/FAIL line per criterion and exits non-zero if any fails.
//!
//! The desk-scale training runs (criteria 3 to 5) share one set of datasets
//! and models; everything is seeded, so the output is the same on every run.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use eyedeg::losses::{combined_loss, loss1_mse, loss2_binary, loss3_distribution, BatchOutputs, LossWeights};
use eyedeg::metrics::{degree_mse, evaluate, perclos, u_curve, CrossDomainMatrix, EvalReport};
use eyedeg::net::{
    classify_open, load_checkpoint, save_checkpoint, write_checkpoint, EyeState, MfmNet, NetConfig, NetParams,
};
use eyedeg::preprocess::{prepare_crop, read_raster};
use eyedeg::scene::{
    encode_pgm, gaze_horizontal, generate_dataset, openness_histogram, plan_dataset, render_blink_sequence,
    render_eye_crop, BlinkPattern, BlinkSetup, Dataset, Domain, DomainStyle, GridSpec, SceneParams, CAMERA_STEPS,
    GAZE_VERTICAL, OPENNESS_SYN,
};
use eyedeg::tensor::Tensor;
use eyedeg::trainer::{
    finetune, finetune_split, gradcheck_suite, make_mixed_batches, train, TrainConfig, TrainData, TrainMode,
};
use eyedeg::{Error, Result};

const OT: f64 = 15.0;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Result<Verdict> {
    Ok(Verdict {
        passed,
        detail: detail.into(),
    })
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-6
}

fn col(v: &[f64]) -> Tensor<f64> {
    Tensor::new(vec![v.len(), 1], v.to_vec()).unwrap()
}

fn mat(rows: usize, v: &[f64]) -> Tensor<f64> {
    Tensor::new(vec![rows, v.len() / rows], v.to_vec()).unwrap()
}

fn criterion_1() -> Result<Verdict> {
    let started = Instant::now();
    let report = gradcheck_suite(2024);
    let elapsed = started.elapsed();
    let required = [
        "conv2d", "maxpool2", "linear", "mfm", "loss1", "loss2", "loss3", "combined",
    ];
    let covered = required
        .iter()
        .all(|n| report.components.iter().any(|c| c.name == *n && c.points >= 10));
    let worst = report.components.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    verdict(
        report.passed && covered && elapsed < Duration::from_secs(60),
        format!(
            "{} components x >=10 points, max rel err {worst:.2e}, {:.1}s{}",
            report.components.len(),
            elapsed.as_secs_f64(),
            if report.passed {
                String::new()
            } else {
                format!(", failing: {:?}", report.failures())
            }
        ),
    )
}

#[allow(clippy::vec_init_then_push)]
fn criterion_2() -> Result<Verdict> {
    let mut checks: Vec<(&str, bool)> = Vec::new();
    checks.push((
        "loss1([10],[10]) = 0",
        close(loss1_mse(&col(&[10.0]), &[10.0])?.value, 0.0),
    ));
    checks.push((
        "loss1([10,20],[0,10]) = 100",
        close(loss1_mse(&col(&[10.0, 20.0]), &[0.0, 10.0])?.value, 100.0),
    ));
    checks.push((
        "dloss1 at [10] vs [0] = 20",
        close(loss1_mse(&col(&[10.0]), &[0.0])?.grad.data()[0], 20.0),
    ));
    checks.push((
        "loss2([0,20],[0,1]) = 0",
        close(loss2_binary(&col(&[0.0, 20.0]), &[0.0, 1.0], OT)?.value, 0.0),
    ));
    checks.push((
        "loss2([5],closed) = 25",
        close(loss2_binary(&col(&[5.0]), &[0.0], OT)?.value, 25.0),
    ));
    let open = loss2_binary(&col(&[5.0]), &[1.0], OT)?;
    checks.push((
        "loss2([5],open) = 10, grad -1",
        close(open.value, 10.0) && close(open.grad.data()[0], -1.0),
    ));
    let same = mat(2, &[1.0, 2.0, 3.0, 4.0]);
    checks.push(("loss3(X, X) = 0", close(loss3_distribution(&same, &same)?.value, 0.0)));
    checks.push((
        "loss3([[1,3]],[[2,2]]) = 1",
        close(
            loss3_distribution(&mat(1, &[1.0, 3.0]), &mat(1, &[2.0, 2.0]))?.value,
            1.0,
        ),
    ));
    let w = LossWeights::default();
    let feats = mat(1, &[0.5, 1.5]);
    let perfect = combined_loss(
        BatchOutputs {
            o1_syn: &feats,
            o2_syn: &col(&[40.0]),
            labels_syn: &[40.0],
            o1_real: &feats,
            o2_real: &col(&[0.0]),
            labels_real: &[0.0],
        },
        &w,
    )?;
    checks.push(("combined, perfect predictions = 0", close(perfect.total, 0.0)));
    let empty1 = Tensor::<f64>::zeros(&[0, 2]);
    let empty2 = Tensor::<f64>::zeros(&[0, 1]);
    let syn_only = combined_loss(
        BatchOutputs {
            o1_syn: &mat(2, &[0.0, 0.0, 0.0, 0.0]),
            o2_syn: &col(&[10.0, 20.0]),
            labels_syn: &[0.0, 10.0],
            o1_real: &empty1,
            o2_real: &empty2,
            labels_real: &[],
        },
        &w,
    )?;
    checks.push(("combined, synthetic-only loss1 = 100 -> 1", close(syn_only.total, 1.0)));
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    verdict(
        failed.is_empty(),
        if failed.is_empty() {
            format!("{} hand-derived examples within 1e-6", checks.len())
        } else {
            format!("mismatches: {failed:?}")
        },
    )
}

/// Datasets and models shared by criteria 3 to 5.
struct Desk {
    net: MfmNet,
    syn_test: Dataset,
    real_test: Dataset,
    prime: Dataset,
    syn_model: NetParams<f32>,
    joint_model: NetParams<f32>,
    elapsed: Duration,
}

fn desk_config(mode: TrainMode) -> TrainConfig {
    TrainConfig {
        mode,
        net: "compact".into(),
        epochs: 15,
        lr: 1e-3,
        lr_decay_epoch: Some(10),
        batch_size: 64,
        seed: 17,
        ..TrainConfig::default()
    }
}

fn desk_run() -> Result<Desk> {
    let started = Instant::now();
    let strat = GridSpec {
        stratified: true,
        openness: None,
    };
    let syn = generate_dataset(Domain::Syn, 6000, &strat, 101)?;
    let real = generate_dataset(Domain::Real, 1500, &strat, 202)?;
    let syn_test = generate_dataset(Domain::Syn, 1000, &strat, 303)?;
    let real_test = generate_dataset(Domain::Real, 1000, &strat, 404)?;
    let prime = generate_dataset(Domain::Realprime, 2000, &strat, 505)?;
    println!("  datasets rendered in {:.0}s", started.elapsed().as_secs_f64());
    let net = MfmNet::new(NetConfig::compact())?;
    let init = net.init_params::<f32>(7);
    let data = TrainData {
        syn: Some(&syn),
        real: Some(&real),
    };
    let mut models = Vec::new();
    for mode in [TrainMode::SynOnly, TrainMode::Joint] {
        let t = Instant::now();
        let out = train(&net, init.clone(), data, &desk_config(mode), |_| {})?;
        println!(
            "  {} model: final loss {:.4} after {} epochs, {:.0}s",
            mode.name(),
            out.log.last().map_or(f64::NAN, |l| l.total),
            out.log.len(),
            t.elapsed().as_secs_f64()
        );
        models.push(out.params);
    }
    let joint_model = models.pop().unwrap();
    let syn_model = models.pop().unwrap();
    Ok(Desk {
        net,
        syn_test,
        real_test,
        prime,
        syn_model,
        joint_model,
        elapsed: started.elapsed(),
    })
}

fn criterion_3(d: &Desk) -> Result<Verdict> {
    let started = Instant::now();
    let cells: Vec<(&str, &str, EvalReport)> = vec![
        ("syn", "syn", evaluate(&d.net, &d.syn_model, &d.syn_test, OT)?),
        ("syn", "real", evaluate(&d.net, &d.syn_model, &d.real_test, OT)?),
        ("syn+real", "syn", evaluate(&d.net, &d.joint_model, &d.syn_test, OT)?),
        ("syn+real", "real", evaluate(&d.net, &d.joint_model, &d.real_test, OT)?),
    ];
    let mut matrix = CrossDomainMatrix::default();
    for (train, test, r) in &cells {
        matrix.push(train, test, r);
    }
    for line in matrix.to_text().lines() {
        println!("  | {line}");
    }
    let syn_syn = &cells[0].2;
    let mse = syn_syn.degree_mse.unwrap_or(f64::INFINITY);
    let a = mse <= 25.0 && syn_syn.open_close_acc >= 0.99;
    let (syn_real, joint_real) = (cells[1].2.open_close_acc, cells[3].2.open_close_acc);
    let b = joint_real - syn_real >= 0.10;
    let c = joint_real >= 0.95;
    let total = d.elapsed + started.elapsed();
    let budget = total < Duration::from_secs(15 * 60);
    verdict(
        a && b && c && budget,
        format!(
            "(a) syn/syn MSE {mse:.2}, acc {:.4} [{}]; (b) syn/real {syn_real:.4} vs joint/real {joint_real:.4}, gap {:.1} pts [{}]; (c) joint/real {joint_real:.4} [{}]; {:.0}s",
            syn_syn.open_close_acc,
            pf(a),
            100.0 * (joint_real - syn_real),
            pf(b),
            pf(c),
            total.as_secs_f64()
        ),
    )
}

fn criterion_4(d: &Desk) -> Result<Verdict> {
    let split = finetune_split(d.prime.len());
    let test = d.prime.subset(&split.test);
    let before = evaluate(&d.net, &d.joint_model, &test, OT)?
        .degree_mse
        .unwrap_or(f64::NAN);
    let cfg = TrainConfig {
        epochs: 5,
        lr_decay_epoch: None,
        ..desk_config(TrainMode::Finetune)
    };
    let (out, split) = finetune(&d.net, d.joint_model.clone(), &d.prime, None, &cfg, |_| {})?;
    let after = evaluate(&d.net, &out.params, &test, OT)?.degree_mse.unwrap_or(f64::NAN);
    let reduction = 1.0 - after / before;
    verdict(
        split.train.len() == 1500 && reduction >= 0.05,
        format!(
            "pseudo-real' test MSE {before:.2} -> {after:.2} ({:.1}% lower) after fine-tuning on {} samples",
            100.0 * reduction,
            split.train.len()
        ),
    )
}

fn criterion_5(d: &Desk) -> Result<Verdict> {
    let setup = BlinkSetup {
        subject_id: 104,
        gaze: [0.0, 0.0],
        camera: [0.0, 0.0],
        seed: 9,
    };
    let seq = render_blink_sequence(
        &setup,
        BlinkPattern::CloseOpenCloseOpen,
        100,
        &DomainStyle::pseudo_real(),
        "real",
    )?;
    let raw: Vec<f64> = d
        .net
        .predict_raw(&d.joint_model, &seq.all_images()?, 50)?
        .into_iter()
        .map(f64::from)
        .collect();
    let pred: Vec<f64> = raw.iter().map(|r| r.max(0.0)).collect();
    let curve = u_curve(&pred, &seq.labels())?;
    let closed = curve
        .gt_minima
        .iter()
        .all(|&i| classify_open(raw[i], OT) == EyeState::Closed);
    verdict(
        !curve.spearman_degenerate && curve.spearman >= 0.95 && closed && !curve.gt_minima.is_empty(),
        format!(
            "Spearman {:.4}; ground-truth minima {:?} predicted {:?}",
            curve.spearman,
            curve.gt_minima,
            curve
                .gt_minima
                .iter()
                .map(|&i| format!("{:.1}", raw[i]))
                .collect::<Vec<_>>()
        ),
    )
}

/// The single-image path: a rendered closed crop written as PGM, read back
/// and preprocessed the way `eyedeg infer` does it.
fn infer_closed_crop(d: &Desk) -> Result<Verdict> {
    let mut worst = 0.0f64;
    let mut all_closed = true;
    let dir = tempfile::tempdir().map_err(|e| Error::Usage(e.to_string()))?;
    for (i, (subject, style)) in [(100, DomainStyle::synthetic()), (104, DomainStyle::pseudo_real())]
        .into_iter()
        .enumerate()
    {
        let p = SceneParams {
            openness: 0.0,
            gaze: [0.0, 0.0],
            camera: [0.0, 0.0],
            subject_id: subject,
            seed: 3,
        };
        let out = render_eye_crop(&p, &style)?;
        let path = dir.path().join(format!("closed{i}.pgm"));
        std::fs::write(&path, encode_pgm(&out.image, 128, 48)?).map_err(|e| Error::Usage(e.to_string()))?;
        let crop = prepare_crop(&read_raster(&path)?, None)?;
        let est = d.net.infer_degree(&d.joint_model, &crop.to_tensor()?)?;
        worst = worst.max(est.degree);
        all_closed &= classify_open(est.raw, OT) == EyeState::Closed;
    }
    verdict(
        worst < 8.0 && all_closed,
        format!("openness-0 crops (synthetic and pseudo-real style): max degree {worst:.2}, all closed: {all_closed}"),
    )
}

fn criterion_6() -> Result<Verdict> {
    let strat = GridSpec {
        stratified: true,
        openness: None,
    };
    let run = || -> Result<(Vec<u8>, String)> {
        let syn = generate_dataset(Domain::Syn, 192, &strat, 61)?;
        let real = generate_dataset(Domain::Real, 64, &strat, 62)?;
        let test = generate_dataset(Domain::Real, 64, &strat, 63)?;
        let net = MfmNet::new(NetConfig::compact())?;
        let cfg = TrainConfig {
            epochs: 2,
            ..desk_config(TrainMode::Joint)
        };
        let out = train(
            &net,
            net.init_params(3),
            TrainData {
                syn: Some(&syn),
                real: Some(&real),
            },
            &cfg,
            |_| {},
        )?;
        let mut bytes = Vec::new();
        write_checkpoint(&out.params, &mut bytes).map_err(|e| Error::Load(e.to_string()))?;
        Ok((bytes, evaluate(&net, &out.params, &test, OT)?.to_json()))
    };
    let (ck_a, rep_a) = run()?;
    let (ck_b, rep_b) = run()?;
    verdict(
        ck_a == ck_b && rep_a == rep_b,
        format!(
            "checkpoints {} ({} bytes), eval reports {}",
            if ck_a == ck_b { "bit-identical" } else { "differ" },
            ck_a.len(),
            if rep_a == rep_b { "byte-identical" } else { "differ" }
        ),
    )
}

fn criterion_7() -> Result<Verdict> {
    let dir = tempfile::tempdir().map_err(|e| Error::Load(e.to_string()))?;
    let net = MfmNet::new(NetConfig::compact())?;
    let params = net.init_params::<f32>(41);
    let batch = generate_dataset(Domain::Syn, 4, &GridSpec::default(), 42)?.all_images()?;
    let before = net.forward(&params, &batch)?;
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&params, &path)?;
    let loaded = load_checkpoint(&path, &net)?;
    let after = net.forward(&loaded, &batch)?;
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let same = bits(&before.o2) == bits(&after.o2) && bits(&before.o1) == bits(&after.o1);

    let good = std::fs::read(&path).map_err(|e| Error::Load(e.to_string()))?;
    let mut cases: Vec<(&str, Vec<u8>, &str)> = Vec::new();
    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    cases.push(("bad magic", bad_magic, "bad magic"));
    let mut bad_version = good.clone();
    bad_version[4] = 9;
    cases.push(("bad version", bad_version, "version"));
    cases.push(("truncated", good[..good.len() / 2].to_vec(), "truncated"));
    let mut foreign = good.clone();
    foreign[8] ^= 0xff;
    cases.push(("foreign fingerprint", foreign, "fingerprint"));
    let mut rejected = Vec::new();
    for (name, bytes, reason) in &cases {
        let p = dir.path().join(format!("{}.ckpt", name.replace(' ', "_")));
        std::fs::write(&p, bytes).map_err(|e| Error::Load(e.to_string()))?;
        let ok = matches!(load_checkpoint(&p, &net), Err(Error::Load(msg)) if msg.contains(reason));
        rejected.push((name, ok));
    }
    let other = MfmNet::new(NetConfig::tiny())?;
    let cross = matches!(load_checkpoint(&path, &other), Err(Error::Load(msg)) if msg.contains("fingerprint"));
    let all = rejected.iter().all(|r| r.1) && cross;
    verdict(
        same && all,
        format!(
            "round trip {}; corrupted files rejected: {:?}; other network config rejected: {cross}",
            if same { "bit-identical" } else { "DIFFERS" },
            rejected
        ),
    )
}

fn criterion_8() -> Result<Verdict> {
    let mut zero_ok = true;
    let mut grid_ok = true;
    let mut configs = 0;
    let h = gaze_horizontal();
    for subject in (0..13).chain(100..116) {
        for (k, (&gv, &gh)) in GAZE_VERTICAL.iter().zip(h.iter().step_by(2)).enumerate() {
            let camera = [CAMERA_STEPS[k % 7], CAMERA_STEPS[(3 * k + subject as usize) % 7]];
            let p = SceneParams {
                openness: 0.0,
                gaze: [gv, gh],
                camera,
                subject_id: subject,
                seed: k as u64,
            };
            let style = if subject < 100 {
                DomainStyle::synthetic()
            } else {
                DomainStyle::pseudo_real()
            };
            zero_ok &= render_eye_crop(&p, &style)?.aperture_area == [0, 0];
            let mut last = -1i64;
            for &o in &OPENNESS_SYN {
                let a = render_eye_crop(&SceneParams { openness: o, ..p }, &style)?.aperture_area;
                let total = (a[0] + a[1]) as i64;
                grid_ok &= total > last;
                last = total;
            }
            configs += 1;
        }
    }
    let strat = GridSpec {
        stratified: true,
        openness: None,
    };
    let hs = openness_histogram(&plan_dataset(Domain::Syn, 6000, &strat, 101)?);
    let hr = openness_histogram(&plan_dataset(Domain::Real, 1500, &strat, 202)?);
    let worst = hs.iter().zip(&hr).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    verdict(
        zero_ok && grid_ok && worst <= 0.05,
        format!(
            "area 0 at openness 0 [{}], strictly increasing over the grid [{}] for {configs} subject/pose configs; histogram max bin gap {worst:.4}",
            pf(zero_ok),
            pf(grid_ok)
        ),
    )
}

fn criterion_9() -> Result<Verdict> {
    let gts: Vec<f64> = (0..50).map(|i| (i * 7 % 101) as f64).collect();
    let mut zero_iff = degree_mse(&gts, &gts)? == 0.0;
    for i in 0..gts.len() {
        let mut p = gts.clone();
        p[i] += 0.5;
        zero_iff &= degree_mse(&p, &gts)? > 0.0;
    }
    let perclos_ok = perclos(&[100.0, 10.0, 10.0, 100.0], 4, 100.0)? == 0.5;
    let cfg = TrainConfig::default();
    let mut composition = true;
    for epoch in 0..3 {
        let plan = make_mixed_batches(6000, 1500, &cfg, epoch)?;
        composition &= !plan.is_empty() && plan.iter().all(|b| b.real.len() == 64 && b.syn.len() == 192);
    }
    verdict(
        zero_iff && perclos_ok && composition,
        format!(
            "MSE zero iff exact [{}]; PERCLOS([100,10,10,100]) = 0.5 [{}]; 64 real + 192 synthetic per batch of 256 [{}]",
            pf(zero_iff),
            pf(perclos_ok),
            pf(composition)
        ),
    )
}

fn pf(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "FAIL"
    }
}

fn report(results: &mut Vec<bool>, id: usize, name: &str, r: Result<Verdict>) {
    let (passed, detail) = match r {
        Ok(v) => (v.passed, v.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    println!(
        "criterion {id} {}: {name}: {detail}",
        if passed { "PASS" } else { "FAIL" }
    );
    results.push(passed);
}

fn main() -> ExitCode {
    let started = Instant::now();
    let mut results = Vec::new();
    let mut extra_ok = false;
    report(&mut results, 1, "gradient oracle", criterion_1());
    report(&mut results, 2, "loss unit oracles", criterion_2());
    println!("  training desk-scale models (synthetic-only and joint)...");
    match desk_run() {
        Ok(desk) => {
            report(&mut results, 3, "cross-domain trend", criterion_3(&desk));
            report(&mut results, 4, "fine-tuning on pseudo-real'", criterion_4(&desk));
            report(&mut results, 5, "blink U-curve", criterion_5(&desk));
            let v = infer_closed_crop(&desk);
            extra_ok = v.as_ref().is_ok_and(|v| v.passed);
            let detail = v.map_or_else(|e| format!("error: {e}"), |v| v.detail);
            println!(
                "  supplementary {}: infer on a closed crop: {detail}",
                if extra_ok { "PASS" } else { "FAIL" }
            );
        }
        Err(e) => {
            for (id, name) in [
                (3, "cross-domain trend"),
                (4, "fine-tuning on pseudo-real'"),
                (5, "blink U-curve"),
            ] {
                report(
                    &mut results,
                    id,
                    name,
                    Err(Error::Usage(format!("desk run failed: {e}"))),
                );
            }
        }
    }
    report(&mut results, 6, "determinism", criterion_6());
    report(&mut results, 7, "checkpoint round trip", criterion_7());
    report(&mut results, 8, "renderer invariants", criterion_8());
    report(&mut results, 9, "metric invariants", criterion_9());
    let passed = results.iter().filter(|&&p| p).count();
    println!(
        "acceptance: {passed}/{} criteria passed in {:.0}s",
        results.len(),
        started.elapsed().as_secs_f64()
    );
    if passed == results.len() && extra_ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
