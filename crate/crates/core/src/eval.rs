//! Trajectory metrics, meta-action accuracy, explanation fidelity and the
//! on-disk benchmark report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::infer::{explain, predict, write_latency_csv, DecodeMode, LatencyTable};
use crate::layout::{EncodedSample, Vocab};
use crate::model::ModelBundle;
use crate::vq::Codebook;
use crate::world::{extract_meta_action, MetaAction, N_WAYPOINTS, WAYPOINT_DT};

/// Per-waypoint error charged for an unparsable answer: the diagonal of the
/// encodable coordinate square.
pub const FAILURE_ERROR_M: f64 = 64.0 * std::f64::consts::SQRT_2;

/// Horizons reported as separate L2 columns, in seconds.
pub const L2_HORIZONS: [usize; 4] = [1, 2, 3, 4];

/// Euclidean error of each waypoint.
pub fn waypoint_errors(pred: &[[f64; 2]], gt: &[[f64; 2]]) -> Result<Vec<f64>> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Invalid(format!("trajectory lengths {} vs {}", pred.len(), gt.len())));
    }
    pred.iter()
        .zip(gt)
        .map(|(p, g)| {
            let e = ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt();
            if e.is_finite() {
                Ok(e)
            } else {
                Err(Error::Invalid("non-finite trajectory value".into()))
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMetrics {
    /// Mean over waypoints and samples, failures charged [`FAILURE_ERROR_M`].
    pub ade: f64,
    pub fde: f64,
    /// Error at 1, 2, 3, 4 s.
    pub l2_at: [f64; 4],
    /// Mean of the four horizon errors (as opposed to ADE, the waypoint mean).
    pub l2_avg_horizons: f64,
    /// ADE and FDE over parsed predictions only; NaN if none parsed.
    pub ade_parsed: f64,
    pub fde_parsed: f64,
    pub n_samples: usize,
    pub n_decode_failures: usize,
}

fn waypoint_at(seconds: usize) -> usize {
    (seconds as f64 / WAYPOINT_DT).round() as usize - 1
}

/// Aggregates per-sample waypoint errors; `None` marks a decode failure.
pub fn aggregate(per_sample: &[Option<Vec<f64>>]) -> TrajectoryMetrics {
    let n = per_sample.len();
    let failures = per_sample.iter().filter(|e| e.is_none()).count();
    let fail = vec![FAILURE_ERROR_M; N_WAYPOINTS];
    let rows: Vec<&Vec<f64>> = per_sample.iter().map(|e| e.as_ref().unwrap_or(&fail)).collect();
    let mean = |f: &dyn Fn(&Vec<f64>) -> f64, rows: &[&Vec<f64>]| -> f64 {
        if rows.is_empty() {
            f64::NAN
        } else {
            rows.iter().map(|r| f(r)).sum::<f64>() / rows.len() as f64
        }
    };
    let ade_of = |r: &Vec<f64>| r.iter().sum::<f64>() / r.len() as f64;
    let fde_of = |r: &Vec<f64>| *r.last().expect("non-empty");
    let l2_at = L2_HORIZONS.map(|h| mean(&|r: &Vec<f64>| r[waypoint_at(h)], &rows));
    let parsed: Vec<&Vec<f64>> = per_sample.iter().flatten().collect();
    TrajectoryMetrics {
        ade: mean(&ade_of, &rows),
        fde: mean(&fde_of, &rows),
        l2_at,
        l2_avg_horizons: l2_at.iter().sum::<f64>() / 4.0,
        ade_parsed: mean(&ade_of, &parsed),
        fde_parsed: mean(&fde_of, &parsed),
        n_samples: n,
        n_decode_failures: failures,
    }
}

/// Fraction of exact matches; an unparsed prediction counts as wrong.
pub fn meta_action_accuracy(preds: &[Option<MetaAction>], gts: &[MetaAction]) -> f64 {
    if gts.is_empty() {
        return f64::NAN;
    }
    let hits = preds.iter().zip(gts).filter(|(p, g)| **p == Some(**g)).count();
    hits as f64 / gts.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeResult {
    pub mode: DecodeMode,
    pub metrics: TrajectoryMetrics,
    /// Meta-action accuracy of the generated reasoning (explicit mode only).
    pub meta_action_acc: Option<f64>,
}

/// Decodes every sample in `mode` and scores the trajectories.
pub fn evaluate_mode(b: &ModelBundle, vocab: &Vocab, samples: &[EncodedSample], mode: DecodeMode) -> Result<ModeResult> {
    use rayon::prelude::*;
    let preds = samples
        .par_iter()
        .map(|s| predict(b, vocab, s, mode))
        .collect::<Result<Vec<_>>>()?;
    let errs = preds
        .iter()
        .zip(samples)
        .map(|(p, s)| p.trajectory.as_ref().map(|t| waypoint_errors(t, &s.trajectory)).transpose())
        .collect::<Result<Vec<_>>>()?;
    let meta_action_acc = (mode == DecodeMode::ExplicitCot).then(|| {
        let parsed: Vec<Option<MetaAction>> = preds
            .iter()
            .map(|p| p.cot_text.as_deref().and_then(extract_meta_action))
            .collect();
        let gts: Vec<MetaAction> = samples.iter().map(|s| s.meta_action).collect();
        meta_action_accuracy(&parsed, &gts)
    });
    Ok(ModeResult {
        mode,
        metrics: aggregate(&errs),
        meta_action_acc,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fidelity {
    /// Meta-action accuracy of the language decoder's reasoning text.
    pub meta_action_acc: f64,
    pub n_unparsed: usize,
    /// Mean cell-class agreement of decoded future rasters with the truth.
    pub future_cell_acc: f64,
    pub n_samples: usize,
}

/// Scores the auxiliary decoders' explanations against ground truth.
pub fn explanation_fidelity(b: &ModelBundle, vocab: &Vocab, cb: &Codebook, samples: &[EncodedSample]) -> Result<Fidelity> {
    use rayon::prelude::*;
    let ex = samples
        .par_iter()
        .map(|s| explain(b, vocab, cb, s))
        .collect::<Result<Vec<_>>>()?;
    let parsed: Vec<Option<MetaAction>> = ex.iter().map(|e| extract_meta_action(&e.cot_text)).collect();
    let gts: Vec<MetaAction> = samples.iter().map(|s| s.meta_action).collect();
    let mut cell = 0.0;
    for (e, s) in ex.iter().zip(samples) {
        for f in 0..2 {
            cell += e.future_rasters[f].agreement(&s.frame_future[f]);
        }
    }
    Ok(Fidelity {
        meta_action_acc: meta_action_accuracy(&parsed, &gts),
        n_unparsed: parsed.iter().filter(|p| p.is_none()).count(),
        future_cell_acc: cell / (2 * samples.len().max(1)) as f64,
        n_samples: samples.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub variant: String,
    pub result: ModeResult,
}

pub const METRICS_COLUMNS: [&str; 15] = [
    "variant",
    "mode",
    "n_samples",
    "n_decode_failures",
    "ade",
    "fde",
    "l2_1s",
    "l2_2s",
    "l2_3s",
    "l2_4s",
    "l2_avg_horizons",
    "ade_parsed",
    "fde_parsed",
    "meta_action_acc",
    "median_latency_s",
];

fn opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}

pub fn metrics_csv(rows: &[MetricsRow], latency: Option<&LatencyTable>) -> String {
    let mut s = METRICS_COLUMNS.join(",");
    s.push('\n');
    for r in rows {
        let m = &r.result.metrics;
        let lat = latency.and_then(|t| t.get(r.result.mode)).map(|l| l.median_total_s);
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.variant,
            r.result.mode.name(),
            m.n_samples,
            m.n_decode_failures,
            m.ade,
            m.fde,
            m.l2_at[0],
            m.l2_at[1],
            m.l2_at[2],
            m.l2_at[3],
            m.l2_avg_horizons,
            m.ade_parsed,
            m.fde_parsed,
            opt(r.result.meta_action_acc),
            opt(if r.variant == "onevl" { lat } else { None }),
        );
    }
    s
}

/// Parses [`metrics_csv`] output back into rows (latency column ignored).
pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let bad = |line: usize, msg: String| Error::Parse {
        path: "metrics.csv".into(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    if lines.next().map(|(_, h)| h) != Some(METRICS_COLUMNS.join(",").as_str()) {
        return Err(bad(1, "unexpected header".into()));
    }
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != METRICS_COLUMNS.len() {
                return Err(bad(i + 1, format!("{} fields", f.len())));
            }
            let num = |j: usize| f[j].parse::<f64>().map_err(|e| bad(i + 1, e.to_string()));
            let int = |j: usize| f[j].parse::<usize>().map_err(|e| bad(i + 1, e.to_string()));
            Ok(MetricsRow {
                variant: f[0].to_string(),
                result: ModeResult {
                    mode: f[1].parse().map_err(|e: Error| bad(i + 1, e.to_string()))?,
                    metrics: TrajectoryMetrics {
                        n_samples: int(2)?,
                        n_decode_failures: int(3)?,
                        ade: num(4)?,
                        fde: num(5)?,
                        l2_at: [num(6)?, num(7)?, num(8)?, num(9)?],
                        l2_avg_horizons: num(10)?,
                        ade_parsed: num(11)?,
                        fde_parsed: num(12)?,
                    },
                    meta_action_acc: if f[13].is_empty() { None } else { Some(num(13)?) },
                },
            })
        })
        .collect()
}

/// Everything a report directory is rendered from.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub config_hash: String,
    pub rows: Vec<MetricsRow>,
    pub latency: Option<LatencyTable>,
    pub fidelity: Option<Fidelity>,
    /// Loss per step, per stage, for the loss-curve plot.
    pub loss_curves: BTreeMap<String, Vec<f64>>,
}

/// One metrics row per (variant name, model, mode) entry.
pub fn run_benchmark(vocab: &Vocab, test: &[EncodedSample], entries: &[(String, &ModelBundle, DecodeMode)]) -> Result<Vec<MetricsRow>> {
    entries
        .iter()
        .map(|(name, b, m)| {
            Ok(MetricsRow {
                variant: name.clone(),
                result: evaluate_mode(b, vocab, test, *m)?,
            })
        })
        .collect()
}

pub fn summary_text(bench: &Benchmark) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "config hash: {}", bench.config_hash);
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "{:<18} {:<17} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>6}",
        "variant", "mode", "ADE", "FDE", "L2@1s", "L2@2s", "L2@3s", "L2@4s", "fail"
    );
    for r in &bench.rows {
        let m = &r.result.metrics;
        let _ = writeln!(
            s,
            "{:<18} {:<17} {:>8.3} {:>8.3} {:>8.3} {:>8.3} {:>8.3} {:>8.3} {:>6}",
            r.variant,
            r.result.mode.name(),
            m.ade,
            m.fde,
            m.l2_at[0],
            m.l2_at[1],
            m.l2_at[2],
            m.l2_at[3],
            m.n_decode_failures
        );
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "ADE/FDE charge {FAILURE_ERROR_M:.2} m per waypoint for unparsable answers; metrics.csv also has parsed-only values.");
    let _ = writeln!(s, "L2 average: ADE averages all 8 waypoints, l2_avg_horizons averages the 1-4 s columns.");
    if let Some(t) = &bench.latency {
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<17} {:>10} {:>10} {:>10} {:>8}", "mode", "total_s", "prefill_s", "decode_s", "tokens");
        for l in &t.summary {
            let _ = writeln!(
                s,
                "{:<17} {:>10.5} {:>10.5} {:>10.5} {:>8.1}",
                l.mode.name(),
                l.median_total_s,
                l.median_prefill_s,
                l.median_decode_s,
                l.median_decoded_tokens
            );
        }
        let _ = writeln!(s);
        s.push_str(&t.ratio_lines());
    }
    if let Some(f) = &bench.fidelity {
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "explanations: meta-action accuracy {:.3} ({} unparsed of {}), future raster cell accuracy {:.3}",
            f.meta_action_acc, f.n_unparsed, f.n_samples, f.future_cell_acc
        );
    }
    s
}

/// Writes `summary.txt`, `metrics.csv`, `latency.csv` and `plots/*.svg` under `dir`.
pub fn write_report(dir: &Path, bench: &Benchmark) -> Result<()> {
    let plots = dir.join("plots");
    std::fs::create_dir_all(&plots).map_err(io_err(&plots))?;
    let w = |name: &Path, body: String| std::fs::write(name, body).map_err(io_err(name));
    w(&dir.join("summary.txt"), summary_text(bench))?;
    w(&dir.join("metrics.csv"), metrics_csv(&bench.rows, bench.latency.as_ref()))?;
    if let Some(t) = &bench.latency {
        write_latency_csv(&dir.join("latency.csv"), &t.records)?;
        let points: Vec<(String, f64, f64)> = bench
            .rows
            .iter()
            .filter(|r| r.variant == "onevl")
            .filter_map(|r| t.get(r.result.mode).map(|l| (r.result.mode.name().to_string(), l.median_total_s, r.result.metrics.ade)))
            .collect();
        w(&plots.join("accuracy_vs_latency.svg"), scatter_svg(&points, "median latency (s)", "ADE (m)"))?;
    }
    if !bench.loss_curves.is_empty() {
        w(&plots.join("loss_curves.svg"), lines_svg(&bench.loss_curves, "step", "loss"))?;
    }
    Ok(())
}

const W: f64 = 640.0;
const H: f64 = 420.0;
const M: f64 = 60.0;

fn bounds(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.08).max(1e-9);
    (lo - pad, hi + pad)
}

fn frame(xlabel: &str, ylabel: &str, x: (f64, f64), y: (f64, f64)) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <line x1=\"{M}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"{cx}\" y=\"{lb}\" text-anchor=\"middle\">{xlabel}</text>\n\
         <text x=\"16\" y=\"{cy}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {cy})\">{ylabel}</text>\n",
        b = H - M,
        r = W - M,
        cx = W / 2.0,
        lb = H - 15.0,
        cy = H / 2.0,
    );
    for (v, px) in [(x.0, M), (x.1, W - M)] {
        let _ = writeln!(s, "<text x=\"{px}\" y=\"{}\" text-anchor=\"middle\">{v:.4}</text>", H - M + 16.0);
    }
    for (v, py) in [(y.0, H - M), (y.1, M)] {
        let _ = writeln!(s, "<text x=\"{}\" y=\"{py}\" text-anchor=\"end\">{v:.3}</text>", M - 4.0);
    }
    s
}

fn project(v: f64, (lo, hi): (f64, f64), a: f64, b: f64) -> f64 {
    a + (v - lo) / (hi - lo) * (b - a)
}

pub fn scatter_svg(points: &[(String, f64, f64)], xlabel: &str, ylabel: &str) -> String {
    let xb = bounds(points.iter().map(|p| p.1));
    let yb = bounds(points.iter().map(|p| p.2));
    let mut s = frame(xlabel, ylabel, xb, yb);
    for (label, x, y) in points {
        if !(x.is_finite() && y.is_finite()) {
            continue;
        }
        let px = project(*x, xb, M, W - M);
        let py = project(*y, yb, H - M, M);
        let _ = writeln!(s, "<circle cx=\"{px:.1}\" cy=\"{py:.1}\" r=\"5\" fill=\"#1f77b4\"/>");
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\">{label}</text>", px + 8.0, py - 6.0);
    }
    s.push_str("</svg>\n");
    s
}

const PALETTE: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];

pub fn lines_svg(series: &BTreeMap<String, Vec<f64>>, xlabel: &str, ylabel: &str) -> String {
    let total: usize = series.values().map(Vec::len).sum();
    let xb = (0.0, total.max(1) as f64);
    let yb = bounds(series.values().flatten().copied());
    let mut s = frame(xlabel, ylabel, xb, yb);
    let mut offset = 0usize;
    for (i, (name, ys)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = ys
            .iter()
            .enumerate()
            .filter(|(_, y)| y.is_finite())
            .map(|(j, y)| format!("{:.1},{:.1}", project((offset + j) as f64, xb, M, W - M), project(*y, yb, H - M, M)))
            .collect();
        let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{color}\" points=\"{}\"/>", pts.join(" "));
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{name}</text>", W - M - 110.0, M + 14.0 * i as f64);
        offset += ys.len();
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn identical_trajectories_score_zero() {
        let t: Vec<[f64; 2]> = (0..8).map(|i| [i as f64, 0.5]).collect();
        let m = aggregate(&[Some(waypoint_errors(&t, &t).unwrap())]);
        assert_eq!((m.ade, m.fde), (0.0, 0.0));
    }

    #[test]
    fn constant_offset_gives_five_meters() {
        let gt: Vec<[f64; 2]> = (0..8).map(|i| [i as f64, -1.0]).collect();
        let pred: Vec<[f64; 2]> = gt.iter().map(|p| [p[0] + 3.0, p[1] + 4.0]).collect();
        let m = aggregate(&[Some(waypoint_errors(&pred, &gt).unwrap())]);
        assert!((m.ade - 5.0).abs() < 1e-12 && (m.fde - 5.0).abs() < 1e-12);
        assert_eq!(m.fde, m.l2_at[3]);
    }

    #[test]
    fn matches_brute_force_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut all = Vec::new();
        let mut oracle_ade = 0.0;
        let mut oracle_fde = 0.0;
        let mut oracle_2s = 0.0;
        let n = 200;
        for _ in 0..n {
            let a: Vec<[f64; 2]> = (0..8).map(|_| [rng.gen_range(-30.0..30.0), rng.gen_range(-30.0..30.0)]).collect();
            let b: Vec<[f64; 2]> = (0..8).map(|_| [rng.gen_range(-30.0..30.0), rng.gen_range(-30.0..30.0)]).collect();
            let mut s = 0.0;
            for k in 0..8 {
                let dx = a[k][0] - b[k][0];
                let dy = a[k][1] - b[k][1];
                let e = dx.hypot(dy);
                s += e;
                if k == 7 {
                    oracle_fde += e;
                }
                if k == 3 {
                    oracle_2s += e;
                }
            }
            oracle_ade += s / 8.0;
            all.push(Some(waypoint_errors(&a, &b).unwrap()));
        }
        let m = aggregate(&all);
        assert!((m.ade - oracle_ade / n as f64).abs() < 1e-12);
        assert!((m.fde - oracle_fde / n as f64).abs() < 1e-12);
        assert!((m.l2_at[1] - oracle_2s / n as f64).abs() < 1e-12);
    }

    #[test]
    fn failures_are_charged_and_excluded_separately() {
        let zero = vec![0.0; 8];
        let m = aggregate(&[Some(zero), None]);
        assert_eq!(m.n_decode_failures, 1);
        assert!((m.ade - FAILURE_ERROR_M / 2.0).abs() < 1e-12);
        assert_eq!(m.ade_parsed, 0.0);
        assert!(waypoint_errors(&[[f64::NAN, 0.0]], &[[0.0, 0.0]]).is_err());
    }

    #[test]
    fn accuracy_limits() {
        let gts: Vec<MetaAction> = MetaAction::ALL.iter().cycle().take(600).copied().collect();
        let same: Vec<Option<MetaAction>> = gts.iter().map(|&g| Some(g)).collect();
        assert_eq!(meta_action_accuracy(&same, &gts), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut mean = 0.0;
        for _ in 0..1000 {
            let mut sh = same.clone();
            sh.shuffle(&mut rng);
            mean += meta_action_accuracy(&sh, &gts);
        }
        mean /= 1000.0;
        assert!((mean - 1.0 / 6.0).abs() < 0.01, "{mean}");
        let none = vec![None; 600];
        assert_eq!(meta_action_accuracy(&none, &gts), 0.0);
    }

    #[test]
    fn metrics_csv_round_trips() {
        let rows: Vec<MetricsRow> = [DecodeMode::AnswerOnly, DecodeMode::ExplicitCot]
            .into_iter()
            .enumerate()
            .map(|(i, mode)| MetricsRow {
                variant: "onevl".into(),
                result: ModeResult {
                    mode,
                    metrics: aggregate(&[Some(vec![0.1 * (i + 1) as f64 / 3.0; 8]), None]),
                    meta_action_acc: (i == 1).then_some(2.0 / 3.0),
                },
            })
            .collect();
        let back = parse_metrics_csv(&metrics_csv(&rows, None)).unwrap();
        assert_eq!(back, rows);
    }

    #[test]
    fn svg_is_well_formed() {
        let s = scatter_svg(&[("a".into(), 0.1, 2.0), ("b".into(), 0.2, 1.0)], "x", "y");
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert_eq!(s.matches("<circle").count(), 2);
        let mut m = BTreeMap::new();
        m.insert("stage0".to_string(), vec![3.0, 2.0, 1.5]);
        assert_eq!(lines_svg(&m, "step", "loss").matches("<polyline").count(), 1);
    }
}
