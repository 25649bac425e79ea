use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use eyedeg::metrics::{evaluate, state_band, u_curve, CrossDomainMatrix, DEFAULT_BAND_EDGES};
use eyedeg::net::{classify_open, load_any_checkpoint, save_checkpoint, MfmNet, NetConfig, NetParams};
use eyedeg::preprocess::{prepare_crop, read_raster, Landmarks};
use eyedeg::scene::{
    generate_dataset, load_dataset, render_blink_sequence, write_dataset, BlinkPattern, BlinkSetup, Dataset, Domain,
    DomainStyle, GridSpec,
};
use eyedeg::trainer::{self, finetune_split, gradcheck_suite, EpochLog, TrainConfig, TrainData, TrainMode};
use eyedeg::{Error, Result};
use serde::Serialize;

use crate::run::{with_suffix, Run};
use crate::{
    CurveArgs, EvalArgs, FinetuneArgs, GenArgs, GradcheckArgs, InferArgs, MatrixArgs, TrainArgs, TrainOverrides,
};

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

/// Reads a flat `key = value` file into a map; `#` starts a comment.
fn read_kv(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut out = BTreeMap::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| config_err(format!("{} line {}: expected key = value", path.display(), no + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| config_err(format!("{key}: cannot parse {value:?}")))
}

#[derive(Debug, Serialize)]
struct GenSettings {
    domain: String,
    count: usize,
    seed: u64,
    stratified: bool,
    openness: Option<Vec<f64>>,
    pattern: String,
    frames: usize,
    subject: u32,
    style: String,
}

fn parse_openness(s: &str) -> Result<Vec<f64>> {
    s.split(',').map(|v| parse("openness", v.trim())).collect()
}

fn gen_settings(a: &GenArgs) -> Result<GenSettings> {
    let mut s = GenSettings {
        domain: String::new(),
        count: 100,
        seed: 0,
        stratified: false,
        openness: None,
        pattern: "close-open-close-open".into(),
        frames: 100,
        subject: 104,
        style: "real".into(),
    };
    if let Some(path) = &a.config {
        for (k, v) in read_kv(path)? {
            match k.as_str() {
                "domain" => s.domain = v,
                "count" => s.count = parse(&k, &v)?,
                "seed" => s.seed = parse(&k, &v)?,
                "stratified" => s.stratified = parse(&k, &v)?,
                "openness" => s.openness = Some(parse_openness(&v)?),
                "pattern" => s.pattern = v,
                "frames" => s.frames = parse(&k, &v)?,
                "subject" => s.subject = parse(&k, &v)?,
                "style" => s.style = v,
                other => return Err(config_err(format!("unknown gen config key {other:?}"))),
            }
        }
    }
    if let Some(v) = &a.domain {
        s.domain = v.clone();
    }
    if let Some(v) = a.count {
        s.count = v;
    }
    if let Some(v) = a.seed {
        s.seed = v;
    }
    s.stratified |= a.stratified;
    if let Some(v) = &a.openness {
        s.openness = Some(parse_openness(v)?);
    }
    if let Some(v) = &a.pattern {
        s.pattern = v.clone();
    }
    if let Some(v) = a.frames {
        s.frames = v;
    }
    if let Some(v) = a.subject {
        s.subject = v;
    }
    if let Some(v) = &a.style {
        s.style = v.clone();
    }
    if s.domain.is_empty() {
        return Err(config_err("--domain is required (syn, real, realprime or blink)"));
    }
    Ok(s)
}

fn claim_dir(dir: &Path) -> Result<()> {
    if let Ok(mut entries) = fs::read_dir(dir) {
        if entries.next().is_some() {
            return Err(io_err(
                dir,
                std::io::Error::new(std::io::ErrorKind::AlreadyExists, "output directory is not empty"),
            ));
        }
    }
    Ok(())
}

pub fn gen(a: GenArgs) -> Result<u8> {
    let s = gen_settings(&a)?;
    let mut run = Run::new("gen");
    run.seed("dataset", s.seed);
    let manifest = with_suffix(&a.out, ".run.json");
    let dataset = if s.domain == "blink" {
        let pattern = BlinkPattern::parse(&s.pattern)?;
        let style = DomainStyle::named(&s.style)?;
        let setup = BlinkSetup {
            subject_id: s.subject,
            gaze: [0.0, 0.0],
            camera: [0.0, 0.0],
            seed: s.seed,
        };
        claim_dir(&a.out)?;
        run.claim(std::slice::from_ref(&manifest))?;
        render_blink_sequence(&setup, pattern, s.frames, &style, &s.style)?
    } else {
        let domain = Domain::parse(&s.domain)?;
        let grid = GridSpec {
            stratified: s.stratified,
            openness: s.openness.clone(),
        };
        claim_dir(&a.out)?;
        run.claim(std::slice::from_ref(&manifest))?;
        generate_dataset(domain, s.count, &grid, s.seed)?
    };
    write_dataset(&dataset, &a.out)?;
    log::info!("wrote {} samples to {}", dataset.len(), a.out.display());
    run.finish(&manifest, serde_json::json!({ "args": a, "resolved": s }))?;
    Ok(0)
}

fn apply_overrides(cfg: &mut TrainConfig, o: &TrainOverrides) -> Result<()> {
    let pairs: [(&str, Option<String>); 16] = [
        ("lr", o.lr.map(|v| v.to_string())),
        ("epochs", o.epochs.map(|v| v.to_string())),
        ("batch_size", o.batch_size.map(|v| v.to_string())),
        ("real_fraction", o.real_fraction.map(|v| v.to_string())),
        ("lambda1", o.lambda1.map(|v| v.to_string())),
        ("lambda2", o.lambda2.map(|v| v.to_string())),
        ("lambda3", o.lambda3.map(|v| v.to_string())),
        ("ot", o.ot.map(|v| v.to_string())),
        ("seed", o.seed.map(|v| v.to_string())),
        ("beta1", o.beta1.map(|v| v.to_string())),
        ("beta2", o.beta2.map(|v| v.to_string())),
        ("eps", o.eps.map(|v| v.to_string())),
        ("lr_decay_epoch", o.lr_decay_epoch.clone()),
        ("lr_decay_factor", o.lr_decay_factor.map(|v| v.to_string())),
        ("net", o.net.clone()),
        ("finetune_with_syn", o.finetune_with_syn.map(|v| v.to_string())),
    ];
    for (k, v) in pairs {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
    }
    Ok(())
}

fn resolve_config(file: Option<&Path>, mode: Option<&str>, o: &TrainOverrides) -> Result<TrainConfig> {
    let mut cfg = match file {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(m) = mode {
        cfg.set("mode", m)?;
    }
    apply_overrides(&mut cfg, o)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Streams epoch records as JSON Lines.
struct EpochSink {
    path: PathBuf,
    text: String,
}

impl EpochSink {
    fn new(path: PathBuf) -> Self {
        Self {
            path,
            text: String::new(),
        }
    }

    fn push(&mut self, e: &EpochLog) {
        self.text
            .push_str(&serde_json::to_string(e).expect("log entry serializes"));
        self.text.push('\n');
        // Best effort so progress is visible during long runs; the final
        // write below reports errors.
        let _ = fs::write(&self.path, &self.text);
    }

    fn flush(&self, run: &Run) -> Result<()> {
        run.write(&self.path, &self.text)
    }
}

fn load_data(run: &mut Run, name: &str, path: Option<&Path>) -> Result<Option<Dataset>> {
    path.map(|p| {
        run.input(name, p);
        load_dataset(p)
    })
    .transpose()
}

pub fn train(a: TrainArgs) -> Result<u8> {
    let cfg = resolve_config(a.config.as_deref(), a.mode.as_deref(), &a.overrides)?;
    if cfg.mode == TrainMode::Finetune {
        return Err(config_err("use the finetune command for fine-tuning"));
    }
    let need_syn = cfg.mode != TrainMode::RealOnly;
    let need_real = matches!(cfg.mode, TrainMode::Joint | TrainMode::RealOnly);
    if need_syn && a.syn.is_none() {
        return Err(config_err(format!("{} mode needs --syn", cfg.mode.name())));
    }
    if need_real && a.real.is_none() {
        return Err(config_err(format!("{} mode needs --real", cfg.mode.name())));
    }
    let mut run = Run::new("train");
    run.seed("train", cfg.seed);
    let log_path = with_suffix(&a.out, ".log.jsonl");
    let manifest = with_suffix(&a.out, ".run.json");
    run.claim(&[a.out.clone(), log_path.clone()])?;
    if manifest.exists() {
        run.claim(std::slice::from_ref(&manifest))?;
    }
    let syn = load_data(&mut run, "syn", a.syn.as_deref().filter(|_| need_syn))?;
    let real = load_data(&mut run, "real", a.real.as_deref().filter(|_| need_real))?;
    let net = MfmNet::new(NetConfig::preset(&cfg.net)?)?;
    let init = net.init_params::<f32>(cfg.seed);
    let mut sink = EpochSink::new(log_path);
    let out = trainer::train(
        &net,
        init,
        TrainData {
            syn: syn.as_ref(),
            real: real.as_ref(),
        },
        &cfg,
        |e| sink.push(e),
    )?;
    sink.flush(&run)?;
    save_checkpoint(&out.params, &a.out)?;
    log::info!("saved {}", a.out.display());
    run.finish(&manifest, serde_json::json!({ "args": a, "resolved": cfg }))?;
    Ok(0)
}

fn preset_of(net: &MfmNet) -> Option<&'static str> {
    NetConfig::preset_names()
        .iter()
        .copied()
        .find(|n| NetConfig::preset(n).is_ok_and(|c| c.fingerprint() == net.fingerprint()))
}

fn load_model(run: &mut Run, name: &str, path: &Path) -> Result<(MfmNet, NetParams<f32>)> {
    run.input(name, path);
    load_any_checkpoint(path)
}

pub fn finetune(a: FinetuneArgs) -> Result<u8> {
    let mut cfg = resolve_config(a.config.as_deref(), None, &a.overrides)?;
    let mut run = Run::new("finetune");
    let (net, params) = load_model(&mut run, "ckpt", &a.ckpt)?;
    if let Some(name) = preset_of(&net) {
        cfg.net = name.to_string();
    }
    cfg.mode = TrainMode::Finetune;
    run.seed("train", cfg.seed);
    let log_path = with_suffix(&a.out, ".log.jsonl");
    let split_path = with_suffix(&a.out, ".split.json");
    let manifest = with_suffix(&a.out, ".run.json");
    run.claim(&[a.out.clone(), log_path.clone(), split_path.clone()])?;
    if manifest.exists() {
        run.claim(std::slice::from_ref(&manifest))?;
    }
    let data = load_data(&mut run, "data", Some(&a.data))?.expect("path given");
    let syn = load_data(&mut run, "syn", a.syn.as_deref())?;
    let mut sink = EpochSink::new(log_path);
    let (out, split) = trainer::finetune(&net, params, &data, syn.as_ref(), &cfg, |e| sink.push(e))?;
    sink.flush(&run)?;
    run.write(
        &split_path,
        serde_json::to_string_pretty(&split).expect("split serializes") + "\n",
    )?;
    save_checkpoint(&out.params, &a.out)?;
    log::info!(
        "fine-tuned on {} samples ({} held out), saved {}",
        split.train.len(),
        split.test.len(),
        a.out.display()
    );
    run.finish(&manifest, serde_json::json!({ "args": a, "resolved": cfg }))?;
    Ok(0)
}

fn select_split(data: Dataset, split: Option<&str>) -> Result<Dataset> {
    match split {
        None => Ok(data),
        Some(part) => {
            let s = finetune_split(data.len());
            match part {
                "train" => Ok(data.subset(&s.train)),
                "test" => Ok(data.subset(&s.test)),
                other => Err(config_err(format!("unknown split {other:?} (expected train or test)"))),
            }
        }
    }
}

pub fn eval(a: EvalArgs) -> Result<u8> {
    let mut run = Run::new("eval");
    let manifest = with_suffix(&a.out, ".run.json");
    run.claim(&[a.out.clone(), manifest.clone()])?;
    let (net, params) = load_model(&mut run, "ckpt", &a.ckpt)?;
    let data = select_split(
        load_data(&mut run, "data", Some(&a.data))?.expect("path given"),
        a.split.as_deref(),
    )?;
    let report = evaluate(&net, &params, &data, a.ot)?;
    let json = report.to_json();
    println!("{json}");
    run.write(&a.out, json + "\n")?;
    run.finish(&manifest, &a)?;
    Ok(0)
}

fn named(pair: &str, what: &str) -> Result<(String, PathBuf)> {
    let (name, path) = pair
        .split_once('=')
        .filter(|(n, p)| !n.is_empty() && !p.is_empty())
        .ok_or_else(|| config_err(format!("{what} must be NAME=PATH, got {pair:?}")))?;
    Ok((name.to_string(), PathBuf::from(path)))
}

pub fn matrix(a: MatrixArgs) -> Result<u8> {
    let mut run = Run::new("matrix");
    let json_path = with_suffix(&a.out, ".json");
    let text_path = with_suffix(&a.out, ".txt");
    let manifest = with_suffix(&a.out, ".run.json");
    run.claim(&[json_path.clone(), text_path.clone(), manifest.clone()])?;
    let ckpts = a.ckpts.iter().map(|p| named(p, "--ckpt")).collect::<Result<Vec<_>>>()?;
    let sets = a.data.iter().map(|p| named(p, "--data")).collect::<Result<Vec<_>>>()?;
    let mut models = Vec::new();
    for (name, path) in &ckpts {
        run.input(&format!("ckpt:{name}"), path);
        let model = load_any_checkpoint(path).map_err(|e| match e {
            Error::Io { path, source } => Error::Io {
                path,
                source: std::io::Error::new(source.kind(), format!("checkpoint for {name}: {source}")),
            },
            Error::Load(msg) => Error::Load(format!("checkpoint for {name}: {msg}")),
            other => other,
        })?;
        models.push((name, model));
    }
    let mut datasets = Vec::new();
    for (name, path) in &sets {
        datasets.push((
            name,
            load_data(&mut run, &format!("data:{name}"), Some(path))?.expect("path given"),
        ));
    }
    let mut m = CrossDomainMatrix::default();
    for (train_name, (net, params)) in &models {
        for (test_name, data) in &datasets {
            m.push(train_name, test_name, &evaluate(net, params, data, a.ot)?);
        }
    }
    let text = m.to_text();
    print!("{text}");
    run.write(&json_path, m.to_json() + "\n")?;
    run.write(&text_path, text)?;
    run.finish(&manifest, &a)?;
    Ok(0)
}

#[derive(Debug, Serialize)]
struct Inference {
    raw: f64,
    degree: f64,
    state: eyedeg::net::EyeState,
    band: eyedeg::metrics::StateBand,
}

pub fn infer(a: InferArgs) -> Result<u8> {
    let mut run = Run::new("infer");
    let manifest = a.out.as_ref().map(|o| with_suffix(o, ".run.json"));
    if let (Some(out), Some(m)) = (&a.out, &manifest) {
        run.claim(&[out.clone(), m.clone()])?;
    }
    let (net, params) = load_model(&mut run, "ckpt", &a.ckpt)?;
    run.input("image", &a.image);
    let landmarks = match &a.landmarks {
        Some(p) => {
            run.input("landmarks", p);
            Some(Landmarks::load(p)?)
        }
        None => None,
    };
    let raster = read_raster(&a.image)?;
    let crop = prepare_crop(&raster, landmarks.as_ref())?;
    let est = net.infer_degree(&params, &crop.to_tensor()?)?;
    let result = Inference {
        raw: est.raw,
        degree: est.degree,
        state: classify_open(est.raw, a.ot),
        band: state_band(est.degree, &DEFAULT_BAND_EDGES)?,
    };
    let json = serde_json::to_string_pretty(&result).expect("result serializes");
    println!("{json}");
    if let (Some(out), Some(m)) = (&a.out, &manifest) {
        run.write(out, json + "\n")?;
        run.finish(m, &a)?;
    }
    Ok(0)
}

pub fn curve(a: CurveArgs) -> Result<u8> {
    let mut run = Run::new("curve");
    let paths = [".csv", ".svg", ".json"].map(|s| with_suffix(&a.out, s));
    let manifest = with_suffix(&a.out, ".run.json");
    run.claim(&paths)?;
    run.claim(std::slice::from_ref(&manifest))?;
    let (net, params) = load_model(&mut run, "ckpt", &a.ckpt)?;
    let mut seq = load_data(&mut run, "seq", Some(&a.seq))?.expect("path given");
    if seq.samples.iter().any(|s| s.record.frame_index.is_none()) {
        return Err(Error::Data(format!(
            "{} is not a blink sequence (no frame indices)",
            a.seq.display()
        )));
    }
    seq.samples.sort_by_key(|s| s.record.frame_index);
    let raw: Vec<f64> = net
        .predict_raw(&params, &seq.all_images()?, 64)?
        .into_iter()
        .map(f64::from)
        .collect();
    let pred: Vec<f64> = raw.iter().map(|r| r.max(0.0)).collect();
    let report = u_curve(&pred, &seq.labels())?;
    let closed_at_minima = report
        .gt_minima
        .iter()
        .all(|&i| classify_open(raw[i], a.ot) == eyedeg::net::EyeState::Closed);
    println!(
        "frames {}, Spearman {:.4}{}, smoothed monotone segments {} (ground truth {}), ground-truth minima closed: {closed_at_minima}",
        report.frames.len(),
        report.spearman,
        if report.spearman_degenerate { " (undefined)" } else { "" },
        report.monotone_segments,
        report.gt_monotone_segments
    );
    run.write(&paths[0], report.to_csv())?;
    run.write(&paths[1], report.to_svg())?;
    let json = serde_json::json!({ "report": report, "closed_at_minima": closed_at_minima });
    run.write(
        &paths[2],
        serde_json::to_string_pretty(&json).expect("report serializes") + "\n",
    )?;
    run.finish(&manifest, &a)?;
    Ok(0)
}

pub fn gradcheck(a: GradcheckArgs) -> Result<u8> {
    let mut run = Run::new("gradcheck");
    run.seed("gradcheck", a.seed);
    let manifest = a.out.as_ref().map(|o| with_suffix(o, ".run.json"));
    if let (Some(out), Some(m)) = (&a.out, &manifest) {
        run.claim(&[out.clone(), m.clone()])?;
    }
    let report = gradcheck_suite(a.seed);
    for c in &report.components {
        println!(
            "{:<10} {:>3} points  max rel err {:.3e}  {}",
            c.name,
            c.points,
            c.max_rel_err,
            if c.passed { "ok" } else { "FAIL" }
        );
    }
    if let (Some(out), Some(m)) = (&a.out, &manifest) {
        run.write(out, report.to_json() + "\n")?;
        run.finish(m, &a)?;
    }
    Ok(if report.passed { 0 } else { 4 })
}
