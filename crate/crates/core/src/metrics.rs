//! Evaluation: degree error and tolerance accuracy, open/close accuracy,
//! the train-source by test-domain matrix, blink-curve analysis, state bands
//! and PERCLOS.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{data_err, Error, Result};
use crate::net::{classify_open, EyeState, MfmNet, NetParams};
use crate::scene::{Dataset, LabelKind};

pub const DEFAULT_TOLERANCE: f64 = 8.0;

fn check_pair(preds: &[f64], gts: &[f64]) -> Result<()> {
    if preds.len() != gts.len() {
        return Err(data_err!(
            "{} predictions but {} ground-truth values",
            preds.len(),
            gts.len()
        ));
    }
    if preds.is_empty() {
        return Err(data_err!("cannot score an empty set"));
    }
    Ok(())
}

pub fn degree_mse(preds: &[f64], gts: &[f64]) -> Result<f64> {
    check_pair(preds, gts)?;
    Ok(preds.iter().zip(gts).map(|(p, g)| (p - g).powi(2)).sum::<f64>() / preds.len() as f64)
}

/// Fraction of predictions within `tol` (inclusive) of the ground truth.
pub fn degree_accuracy(preds: &[f64], gts: &[f64], tol: f64) -> Result<f64> {
    check_pair(preds, gts)?;
    let hits = preds.iter().zip(gts).filter(|(p, g)| (*p - *g).abs() <= tol).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Fraction of raw outputs whose threshold decision matches the truth.
pub fn open_close_accuracy(raw: &[f64], truth: &[EyeState], ot: f64) -> Result<f64> {
    if raw.len() != truth.len() {
        return Err(data_err!(
            "{} outputs but {} open/closed labels",
            raw.len(),
            truth.len()
        ));
    }
    if raw.is_empty() {
        return Err(data_err!("cannot score an empty set"));
    }
    let hits = raw
        .iter()
        .zip(truth)
        .filter(|(r, t)| classify_open(**r, ot) == **t)
        .count();
    Ok(hits as f64 / raw.len() as f64)
}

/// Open/closed truth for a label: binary labels directly, degrees by the
/// same threshold rule the network output is judged by.
pub fn eye_state_of(kind: LabelKind, label: f64, ot: f64) -> EyeState {
    let open = match kind {
        LabelKind::Binary => label == 1.0,
        LabelKind::Degree => label > ot,
    };
    if open {
        EyeState::Open
    } else {
        EyeState::Closed
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub degree: usize,
    pub binary: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub ot: f64,
    pub tolerance: f64,
    pub network: String,
}

/// Metric bundle for one model on one dataset. Degree metrics are `None`
/// (serialized as `null`) when the set has only binary labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub degree_mse: Option<f64>,
    pub degree_acc_tol8: Option<f64>,
    pub open_close_acc: f64,
    pub counts: EvalCounts,
    pub config: EvalSettings,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Runs the network over `dataset` and scores it.
pub fn evaluate(net: &MfmNet, params: &NetParams<f32>, dataset: &Dataset, ot: f64) -> Result<EvalReport> {
    let kind = dataset.label_kind()?;
    let images = dataset.all_images()?;
    let raw: Vec<f64> = net
        .predict_raw(params, &images, 64)?
        .into_iter()
        .map(f64::from)
        .collect();
    report_from_outputs(&raw, kind, &dataset.labels(), ot, net.fingerprint())
}

pub fn report_from_outputs(
    raw: &[f64],
    kind: LabelKind,
    labels: &[f64],
    ot: f64,
    fingerprint: u64,
) -> Result<EvalReport> {
    let truth: Vec<EyeState> = labels.iter().map(|&l| eye_state_of(kind, l, ot)).collect();
    let open_close_acc = open_close_accuracy(raw, &truth, ot)?;
    let (degree_mse, degree_acc, counts) = match kind {
        LabelKind::Degree => {
            let reported: Vec<f64> = raw.iter().map(|r| r.max(0.0)).collect();
            (
                Some(degree_mse(&reported, labels)?),
                Some(degree_accuracy(&reported, labels, DEFAULT_TOLERANCE)?),
                EvalCounts {
                    degree: labels.len(),
                    binary: 0,
                },
            )
        }
        LabelKind::Binary => (
            None,
            None,
            EvalCounts {
                degree: 0,
                binary: labels.len(),
            },
        ),
    };
    Ok(EvalReport {
        degree_mse,
        degree_acc_tol8: degree_acc,
        open_close_acc,
        counts,
        config: EvalSettings {
            ot,
            tolerance: DEFAULT_TOLERANCE,
            network: format!("{fingerprint:016x}"),
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub train: String,
    pub test: String,
    pub degree_mse: Option<f64>,
    pub open_close_acc: f64,
}

/// Rows of (training source, test domain) results.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CrossDomainMatrix {
    pub rows: Vec<MatrixRow>,
}

impl CrossDomainMatrix {
    pub fn push(&mut self, train: &str, test: &str, report: &EvalReport) {
        self.rows.push(MatrixRow {
            train: train.to_string(),
            test: test.to_string(),
            degree_mse: report.degree_mse,
            open_close_acc: report.open_close_acc,
        });
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("matrix serializes")
    }

    /// Aligned text table; missing degree metrics print as `--`.
    pub fn to_text(&self) -> String {
        let header = ["train", "test", "degree MSE", "open/close acc"];
        let cells: Vec<[String; 4]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.train.clone(),
                    r.test.clone(),
                    r.degree_mse.map_or("--".to_string(), |m| format!("{m:.2}")),
                    format!("{:.2}%", 100.0 * r.open_close_acc),
                ]
            })
            .collect();
        let widths: Vec<usize> = (0..4)
            .map(|c| {
                cells
                    .iter()
                    .map(|r| r[c].len())
                    .chain([header[c].len()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut out = String::new();
        let line = |out: &mut String, row: [&str; 4]| {
            let _ = writeln!(
                out,
                "{:<w0$}  {:<w1$}  {:>w2$}  {:>w3$}",
                row[0],
                row[1],
                row[2],
                row[3],
                w0 = widths[0],
                w1 = widths[1],
                w2 = widths[2],
                w3 = widths[3]
            );
        };
        line(&mut out, header);
        for r in &cells {
            line(&mut out, [&r[0], &r[1], &r[2], &r[3]]);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StateBand {
    Closed,
    NearClosed,
    Tired,
    ModeratelyOpen,
    FullyOpen,
}

impl StateBand {
    pub fn name(self) -> &'static str {
        match self {
            Self::Closed => "closed",
            Self::NearClosed => "near-closed",
            Self::Tired => "tired",
            Self::ModeratelyOpen => "moderately-open",
            Self::FullyOpen => "fully-open",
        }
    }
}

/// Lower edges of near-closed, tired, moderately-open and fully-open.
pub const DEFAULT_BAND_EDGES: [f64; 4] = [10.0, 30.0, 55.0, 80.0];

pub fn state_band(degree: f64, edges: &[f64; 4]) -> Result<StateBand> {
    if !(degree >= 0.0) {
        return Err(Error::Usage(format!(
            "state bands are defined for degrees >= 0, got {degree}"
        )));
    }
    const BANDS: [StateBand; 5] = [
        StateBand::Closed,
        StateBand::NearClosed,
        StateBand::Tired,
        StateBand::ModeratelyOpen,
        StateBand::FullyOpen,
    ];
    Ok(BANDS[edges.iter().filter(|&&e| degree >= e).count()])
}

/// Ranks starting at 1; ties share their average rank.
fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation, or `None` when either series is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let (mut va, mut vb) = (0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    (va > 0.0 && vb > 0.0).then(|| cov / (va * vb).sqrt())
}

/// Centered moving average; the window shrinks at the ends.
pub fn moving_average(x: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    (0..x.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(x.len());
            x[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Number of maximal monotone runs; flat steps neither start nor end a run.
pub fn monotone_segments(x: &[f64]) -> usize {
    let mut count = 0;
    let mut last = 0.0f64;
    for w in x.windows(2) {
        let d = w[1] - w[0];
        if d == 0.0 {
            continue;
        }
        if last == 0.0 || d.signum() != last {
            count += 1;
        }
        last = d.signum();
    }
    count
}

/// Frames where a falling run turns into a rising one (first frame of any
/// flat bottom).
pub fn local_minima(x: &[f64]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut falling_until: Option<usize> = None;
    let mut last = 0.0f64;
    for i in 1..x.len() {
        let d = x[i] - x[i - 1];
        if d < 0.0 {
            falling_until = Some(i);
        } else if d > 0.0 {
            if last < 0.0 {
                if let Some(m) = falling_until {
                    out.push(m);
                }
            }
        } else {
            continue;
        }
        last = d.signum();
    }
    out
}

pub const SMOOTHING_WINDOW: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveFrame {
    pub frame: usize,
    pub pred: f64,
    pub gt: f64,
    pub band: StateBand,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveReport {
    pub frames: Vec<CurveFrame>,
    /// 0 when undefined; see `spearman_degenerate`.
    pub spearman: f64,
    pub spearman_degenerate: bool,
    /// Monotone runs of the smoothed prediction.
    pub monotone_segments: usize,
    pub gt_monotone_segments: usize,
    /// Local minima of the smoothed prediction.
    pub minima: Vec<usize>,
    pub gt_minima: Vec<usize>,
}

/// Analyses predicted degrees (already clamped at 0) of a blink sequence.
pub fn u_curve(pred: &[f64], gt: &[f64]) -> Result<CurveReport> {
    if pred.len() != gt.len() {
        return Err(data_err!(
            "curve has {} predictions but {} ground-truth frames",
            pred.len(),
            gt.len()
        ));
    }
    if pred.len() < 8 {
        return Err(data_err!("curve analysis needs at least 8 frames, got {}", pred.len()));
    }
    let frames = pred
        .iter()
        .zip(gt)
        .enumerate()
        .map(|(i, (&p, &g))| {
            Ok(CurveFrame {
                frame: i,
                pred: p,
                gt: g,
                band: state_band(p.max(0.0), &DEFAULT_BAND_EDGES)?,
            })
        })
        .collect::<Result<_>>()?;
    let rho = spearman(pred, gt);
    let smooth = moving_average(pred, SMOOTHING_WINDOW);
    Ok(CurveReport {
        frames,
        spearman: rho.unwrap_or(0.0),
        spearman_degenerate: rho.is_none(),
        monotone_segments: monotone_segments(&smooth),
        gt_monotone_segments: monotone_segments(gt),
        minima: local_minima(&smooth),
        gt_minima: local_minima(gt),
    })
}

impl CurveReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame,pred,gt,band\n");
        for f in &self.frames {
            let _ = writeln!(out, "{},{:.4},{:.4},{}", f.frame, f.pred, f.gt, f.band.name());
        }
        out
    }

    /// Self-contained SVG line plot of prediction and ground truth.
    pub fn to_svg(&self) -> String {
        let (w, h, m) = (640.0, 320.0, 40.0);
        let n = self.frames.len().max(2) as f64;
        let ymax = self.frames.iter().map(|f| f.pred.max(f.gt)).fold(100.0f64, f64::max);
        let px = |i: usize| m + (w - 2.0 * m) * i as f64 / (n - 1.0);
        let py = |v: f64| h - m - (h - 2.0 * m) * v.max(0.0) / ymax;
        let path = |sel: fn(&CurveFrame) -> f64| {
            self.frames
                .iter()
                .enumerate()
                .map(|(i, f)| format!("{}{:.1},{:.1}", if i == 0 { "M" } else { " L" }, px(i), py(sel(f))))
                .collect::<String>()
        };
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
        );
        let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<path d="M{m},{m} L{m},{} L{},{}" fill="none" stroke="black"/>"#,
            h - m,
            w - m,
            h - m
        );
        for tick in [0.0, 50.0, 100.0] {
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{:.1}" font-size="10" text-anchor="end">{tick}</text>"#,
                m - 4.0,
                py(tick) + 3.0
            );
        }
        let _ = writeln!(
            s,
            r##"<path d="{}" fill="none" stroke="#888" stroke-dasharray="4 3"/>"##,
            path(|f| f.gt)
        );
        let _ = writeln!(
            s,
            r##"<path d="{}" fill="none" stroke="#c33" stroke-width="1.5"/>"##,
            path(|f| f.pred)
        );
        let _ = writeln!(
            s,
            r#"<text x="{m}" y="20" font-size="12">degree of openness (red: predicted, gray: ground truth); Spearman {:.3}</text>"#,
            self.spearman
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="10" text-anchor="middle">frame</text>"#,
            w / 2.0,
            h - 10.0
        );
        s.push_str("</svg>\n");
        s
    }
}

/// Fraction of the last `window` frames at least 80% closed, i.e. with
/// degree at most `0.2 * subject_max`.
pub fn perclos(degrees: &[f64], window: usize, subject_max: f64) -> Result<f64> {
    if !(subject_max > 0.0) {
        return Err(Error::Usage(format!(
            "subject maximum degree must be positive, got {subject_max}"
        )));
    }
    if window == 0 || window > degrees.len() {
        return Err(Error::Usage(format!(
            "window of {window} frames does not fit a series of {}",
            degrees.len()
        )));
    }
    let tail = &degrees[degrees.len() - window..];
    let closed = tail.iter().filter(|&&d| d <= 0.2 * subject_max).count();
    Ok(closed as f64 / window as f64)
}
