//! Greedy decoding in the five serving modes, post-hoc explanations from the
//! auxiliary decoders, and wall-clock latency measurement.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::layout::{build_explicit_cot_prompt, build_prefill_prompt, EncodedSample, TokenLayout, Vocab};
use crate::model::{KvCache, ModelBundle};
use crate::tensor::Tensor;
use crate::vq::{decode, Codebook, FrameTag, VisualTokenGrid};
use crate::world::{Raster, N_WAYPOINTS};

/// Tokens in a well-formed answer: delimiters plus 16 coordinates.
pub const ANSWER_TOKENS: usize = 2 * N_WAYPOINTS + 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    AnswerOnly,
    ExplicitCot,
    LatentPrefill,
    LatentIterative,
    MlpHead,
}

impl DecodeMode {
    pub const ALL: [DecodeMode; 5] = [
        DecodeMode::AnswerOnly,
        DecodeMode::ExplicitCot,
        DecodeMode::LatentPrefill,
        DecodeMode::LatentIterative,
        DecodeMode::MlpHead,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DecodeMode::AnswerOnly => "answer_only",
            DecodeMode::ExplicitCot => "explicit_cot",
            DecodeMode::LatentPrefill => "latent_prefill",
            DecodeMode::LatentIterative => "latent_iterative",
            DecodeMode::MlpHead => "mlp_head",
        }
    }
}

impl FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown decode mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyRecord {
    pub mode: DecodeMode,
    pub sample_id: u64,
    pub prefill_tokens: usize,
    pub decoded_tokens: usize,
    pub wall_prefill_s: f64,
    pub wall_decode_s: f64,
    pub total_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// `None` when the answer region did not parse.
    pub trajectory: Option<Vec<[f64; 2]>>,
    /// Generated answer tokens (empty for the regression head).
    pub answer_ids: Vec<usize>,
    /// Decoded reasoning, explicit mode only.
    pub cot_text: Option<String>,
    pub latency: LatencyRecord,
}

impl Prediction {
    pub fn is_failure(&self) -> bool {
        self.trajectory.is_none()
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Prefill of a prompt: the cache plus the hidden rows of every prompt position.
fn prefill(b: &ModelBundle, prompt: &TokenLayout, raster: &Raster) -> Result<(KvCache, Tensor, Option<Tensor>)> {
    let mut cache = b.new_cache();
    let ext = b.extend(&mut cache, &prompt.ids, Some((prompt.spans.image, raster)))?;
    Ok((cache, ext.hidden, ext.v_embed))
}

/// Greedy generation from `first_logits` until `stop` or `cap` tokens.
fn generate(b: &ModelBundle, cache: &mut KvCache, first_logits: Vec<f64>, stop: usize, cap: usize) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    let mut logits = first_logits;
    loop {
        let tok = argmax(&logits);
        out.push(tok);
        if tok == stop || out.len() >= cap {
            return Ok(out);
        }
        let ext = b.extend(cache, &[tok], None)?;
        logits = b.logits_row(ext.hidden.row(0))?;
    }
}

fn last_row(t: &Tensor) -> &[f64] {
    t.row(t.rows() - 1)
}

fn latent_counts(b: &ModelBundle) -> (usize, usize) {
    (b.config.latent_vis_count, b.config.latent_lang_count)
}

/// The latent-block tokens that follow the image in the latent layout.
fn latent_block(s: &EncodedSample, vocab: &Vocab, c_v: usize, c_t: usize) -> Result<Vec<usize>> {
    let full = build_prefill_prompt(s, vocab, c_v, c_t)?;
    let short = build_prefill_prompt(s, vocab, 0, 0)?;
    Ok(full.ids[short.len()..].to_vec())
}

pub fn predict(b: &ModelBundle, vocab: &Vocab, s: &EncodedSample, mode: DecodeMode) -> Result<Prediction> {
    let (c_v, c_t) = latent_counts(b);
    let t0 = Instant::now();
    let (prefill_tokens, mut decoded, wall_prefill, cot_text, answer_ids, trajectory);
    match mode {
        DecodeMode::MlpHead => {
            let prompt = build_prefill_prompt(s, vocab, c_v, c_t)?;
            let (_, hidden, _) = prefill(b, &prompt, &s.frame_now)?;
            wall_prefill = t0.elapsed().as_secs_f64();
            let row = if prompt.spans.latent_lang.is_empty() {
                prompt.len() - 1
            } else {
                prompt.spans.latent_lang.end - 1
            };
            trajectory = Some(b.head_predict(hidden.row(row))?);
            prefill_tokens = prompt.len();
            decoded = Vec::new();
            answer_ids = Vec::new();
            cot_text = None;
        }
        DecodeMode::AnswerOnly | DecodeMode::LatentPrefill | DecodeMode::LatentIterative => {
            let prompt = match mode {
                DecodeMode::LatentPrefill => build_prefill_prompt(s, vocab, c_v, c_t)?,
                _ => build_prefill_prompt(s, vocab, 0, 0)?,
            };
            let (mut cache, hidden, _) = prefill(b, &prompt, &s.frame_now)?;
            let mut logits = b.logits_row(last_row(&hidden))?;
            wall_prefill = t0.elapsed().as_secs_f64();
            prefill_tokens = prompt.len();
            decoded = Vec::new();
            if mode == DecodeMode::LatentIterative {
                for tok in latent_block(s, vocab, c_v, c_t)? {
                    let ext = b.extend(&mut cache, &[tok], None)?;
                    logits = b.logits_row(ext.hidden.row(0))?;
                    decoded.push(tok);
                }
            }
            let ans = generate(b, &mut cache, logits, vocab.answer_end, ANSWER_TOKENS)?;
            decoded.extend_from_slice(&ans);
            trajectory = vocab.decode_trajectory(&ans);
            answer_ids = ans;
            cot_text = None;
        }
        DecodeMode::ExplicitCot => {
            let prompt = build_explicit_cot_prompt(s, vocab);
            let (mut cache, hidden, _) = prefill(b, &prompt, &s.frame_now)?;
            let logits = b.logits_row(last_row(&hidden))?;
            wall_prefill = t0.elapsed().as_secs_f64();
            prefill_tokens = prompt.len();
            let cap = (b.config.max_seq_len - prompt.len()).min(b.config.max_cot_len + ANSWER_TOKENS);
            decoded = generate(b, &mut cache, logits, vocab.answer_end, cap)?;
            let split = decoded.iter().position(|&t| t == vocab.answer_start).unwrap_or(decoded.len());
            cot_text = Some(vocab.detokenize(&decoded[..split]));
            answer_ids = decoded[split..].to_vec();
            trajectory = vocab.decode_trajectory(&answer_ids);
        }
    }
    let total = t0.elapsed().as_secs_f64();
    Ok(Prediction {
        trajectory,
        answer_ids,
        cot_text,
        latency: LatencyRecord {
            mode,
            sample_id: s.seed,
            prefill_tokens,
            decoded_tokens: decoded.len(),
            wall_prefill_s: wall_prefill,
            wall_decode_s: total - wall_prefill,
            total_s: total,
        },
    })
}

/// Largest deviation, over latent hidden rows and first-answer logits, between
/// one-pass prefill of the latent prompt and feeding the latent tokens one at
/// a time after an answer-only prefill.
pub fn prefill_equivalence_gap(b: &ModelBundle, vocab: &Vocab, s: &EncodedSample) -> Result<f64> {
    let (c_v, c_t) = latent_counts(b);
    let full = build_prefill_prompt(s, vocab, c_v, c_t)?;
    let (_, hidden, _) = prefill(b, &full, &s.frame_now)?;
    let short = build_prefill_prompt(s, vocab, 0, 0)?;
    let (mut cache, _, _) = prefill(b, &short, &s.frame_now)?;
    let mut gap: f64 = 0.0;
    let mut last = Vec::new();
    for (i, &tok) in full.ids[short.len()..].iter().enumerate() {
        let ext = b.extend(&mut cache, &[tok], None)?;
        let row = ext.hidden.row(0);
        for (a, c) in row.iter().zip(hidden.row(short.len() + i)) {
            gap = gap.max((a - c).abs());
        }
        last = row.to_vec();
    }
    let la = b.logits_row(last_row(&hidden))?;
    let lb = b.logits_row(&last)?;
    for (a, c) in la.iter().zip(&lb) {
        gap = gap.max((a - c).abs());
    }
    Ok(gap)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Explanation {
    pub cot_ids: Vec<usize>,
    pub cot_text: String,
    pub future_grids: [VisualTokenGrid; 2],
    pub future_rasters: [Raster; 2],
}

/// Runs the backbone once over the latent prompt and lets both auxiliary
/// decoders read its latent rows. Never touches state used by [`predict`].
pub fn explain(b: &ModelBundle, vocab: &Vocab, cb: &Codebook, s: &EncodedSample) -> Result<Explanation> {
    let (c_v, c_t) = latent_counts(b);
    let prompt = build_prefill_prompt(s, vocab, c_v, c_t)?;
    let (_, hidden, v_embed) = prefill(b, &prompt, &s.frame_now)?;
    let v_embed = v_embed.expect("prompt has an image");
    let rows = |span: crate::layout::Span| -> Result<Option<Tensor>> {
        if span.is_empty() {
            return Ok(None);
        }
        let d = hidden.cols();
        let data = hidden.data()[span.start * d..span.end * d].to_vec();
        Ok(Some(Tensor::matrix(span.len(), d, data)?))
    };
    let h_l = rows(prompt.spans.latent_lang)?;
    let h_v = rows(prompt.spans.latent_vis)?;
    let cot_ids = b.decode_lang(&v_embed, h_l.as_ref())?;
    let [g0, g1] = b.decode_vis(&v_embed, h_v.as_ref())?;
    let (gh, gw) = (b.config.raster_h / b.config.patch, b.config.raster_w / b.config.patch);
    let grid = |ids: Vec<usize>, f: u8| VisualTokenGrid {
        h: gh,
        w: gw,
        ids,
        tag: FrameTag::Future(f),
    };
    let grids = [grid(g0, 0), grid(g1, 1)];
    let rasters = [decode(&grids[0], cb)?, decode(&grids[1], cb)?];
    Ok(Explanation {
        cot_text: vocab.detokenize(&cot_ids),
        cot_ids,
        future_grids: grids,
        future_rasters: rasters,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatencySummary {
    pub mode: DecodeMode,
    pub median_total_s: f64,
    pub median_prefill_s: f64,
    pub median_decode_s: f64,
    pub median_decoded_tokens: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyTable {
    /// One record per (sample, mode): the median-total run.
    pub records: Vec<LatencyRecord>,
    pub summary: Vec<LatencySummary>,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl LatencyTable {
    pub fn get(&self, mode: DecodeMode) -> Option<&LatencySummary> {
        self.summary.iter().find(|s| s.mode == mode)
    }

    /// Median-total ratio `a / b`, if both modes were measured.
    pub fn ratio(&self, a: DecodeMode, b: DecodeMode) -> Option<f64> {
        Some(self.get(a)?.median_total_s / self.get(b)?.median_total_s)
    }

    pub fn ratio_lines(&self) -> String {
        use DecodeMode::*;
        let mut s = String::new();
        for (a, b) in [(ExplicitCot, LatentPrefill), (LatentPrefill, AnswerOnly), (MlpHead, AnswerOnly), (LatentIterative, LatentPrefill)] {
            if let Some(r) = self.ratio(a, b) {
                let _ = writeln!(s, "{}/{}: {r:.3}", a.name(), b.name());
            }
        }
        s
    }
}

/// Runs every mode, each on its own model, `n_runs` times per sample after
/// `warmup` discarded predictions, keeping the median run per (sample, mode).
pub fn measure_latency(modes: &[(DecodeMode, &ModelBundle)], vocab: &Vocab, samples: &[EncodedSample], n_runs: usize, warmup: usize) -> Result<LatencyTable> {
    let n_runs = n_runs.max(1);
    for s in samples.iter().cycle().take(warmup) {
        for &(m, b) in modes {
            predict(b, vocab, s, m)?;
        }
    }
    let mut records = Vec::new();
    for s in samples {
        let mut runs: Vec<Vec<LatencyRecord>> = vec![Vec::new(); modes.len()];
        for _ in 0..n_runs {
            for (i, &(m, b)) in modes.iter().enumerate() {
                runs[i].push(predict(b, vocab, s, m)?.latency);
            }
        }
        for mut r in runs {
            r.sort_by(|a, c| a.total_s.total_cmp(&c.total_s));
            records.push(r.swap_remove(r.len() / 2));
        }
    }
    let summary = modes
        .iter()
        .map(|&(m, _)| {
            let of = |f: fn(&LatencyRecord) -> f64| median(records.iter().filter(|r| r.mode == m).map(f).collect());
            LatencySummary {
                mode: m,
                median_total_s: of(|r| r.total_s),
                median_prefill_s: of(|r| r.wall_prefill_s),
                median_decode_s: of(|r| r.wall_decode_s),
                median_decoded_tokens: of(|r| r.decoded_tokens as f64),
            }
        })
        .collect();
    Ok(LatencyTable { records, summary })
}

pub const LATENCY_COLUMNS: [&str; 7] = [
    "mode",
    "sample_id",
    "prefill_tokens",
    "decoded_tokens",
    "wall_prefill_s",
    "wall_decode_s",
    "total_s",
];

pub fn write_latency_csv(path: &Path, records: &[LatencyRecord]) -> Result<()> {
    let mut s = LATENCY_COLUMNS.join(",");
    s.push('\n');
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{:e},{:e},{:e}",
            r.mode.name(),
            r.sample_id,
            r.prefill_tokens,
            r.decoded_tokens,
            r.wall_prefill_s,
            r.wall_decode_s,
            r.total_s
        );
    }
    std::fs::write(path, s).map_err(io_err(path))
}

pub fn read_latency_csv(path: &Path) -> Result<Vec<LatencyRecord>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines().enumerate();
    let bad = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    match lines.next() {
        Some((_, h)) if h == LATENCY_COLUMNS.join(",") => {}
        _ => return Err(bad(1, "unexpected header".into())),
    }
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != LATENCY_COLUMNS.len() {
                return Err(bad(i + 1, format!("{} fields", f.len())));
            }
            let num = |j: usize| f[j].parse::<f64>().map_err(|e| bad(i + 1, e.to_string()));
            let int = |j: usize| f[j].parse::<u64>().map_err(|e| bad(i + 1, e.to_string()));
            Ok(LatencyRecord {
                mode: f[0].parse().map_err(|e: Error| bad(i + 1, e.to_string()))?,
                sample_id: int(1)?,
                prefill_tokens: int(2)? as usize,
                decoded_tokens: int(3)? as usize,
                wall_prefill_s: num(4)?,
                wall_decode_s: num(5)?,
                total_s: num(6)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::world::{make_sample, Scenario};

    fn setup() -> (ModelBundle, Vocab, Vec<EncodedSample>) {
        let cfg = ModelConfig {
            d: 16,
            n_layers: 2,
            n_heads: 2,
            dec_layers: 1,
            codebook_size: 16,
            ..ModelConfig::default()
        };
        let b = ModelBundle::new(cfg).unwrap();
        let v = Vocab::new(16, 4, 2).unwrap();
        let samples = (0..4u64)
            .map(|seed| {
                let s = make_sample(seed, Scenario::ALL[seed as usize], 32, 32);
                let grid = |o: usize| -> Vec<usize> { (0..64).map(|i| 512 + (i * 3 + o) % 16).collect() };
                EncodedSample {
                    seed,
                    scenario: s.scenario,
                    meta_action: s.meta_action,
                    prompt_ids: v.tokenize_text(&s.ego_state_text).unwrap(),
                    image_ids: grid(0),
                    future_ids: [grid(1), grid(2)],
                    cot_ids: v.tokenize_text(&s.cot_text).unwrap(),
                    answer_ids: v.encode_trajectory(&s.trajectory).unwrap(),
                    trajectory: s.trajectory,
                    frame_now: s.frame_now,
                    frame_future: s.frame_future,
                }
            })
            .collect();
        (b, v, samples)
    }

    #[test]
    fn mode_names_round_trip() {
        for m in DecodeMode::ALL {
            assert_eq!(m.name().parse::<DecodeMode>().unwrap(), m);
        }
        assert!("beam".parse::<DecodeMode>().is_err());
    }

    #[test]
    fn untrained_model_reports_failure_without_panicking() {
        let (b, v, s) = setup();
        for m in [DecodeMode::AnswerOnly, DecodeMode::LatentPrefill, DecodeMode::LatentIterative] {
            let p = predict(&b, &v, &s[0], m).unwrap();
            assert!(p.latency.decoded_tokens >= 1);
            assert_eq!(p.is_failure(), v.decode_trajectory(&p.answer_ids).is_none());
        }
        let h = predict(&b, &v, &s[0], DecodeMode::MlpHead).unwrap();
        assert_eq!(h.latency.decoded_tokens, 0);
        assert_eq!(h.trajectory.unwrap().len(), 8);
    }

    #[test]
    fn latent_prefill_matches_forced_decoding() {
        let (b, v, s) = setup();
        for x in &s {
            assert!(prefill_equivalence_gap(&b, &v, x).unwrap() <= 1e-10);
        }
    }

    #[test]
    fn prefill_token_counts_follow_layout() {
        let (b, v, s) = setup();
        let a = predict(&b, &v, &s[1], DecodeMode::AnswerOnly).unwrap().latency;
        let l = predict(&b, &v, &s[1], DecodeMode::LatentPrefill).unwrap().latency;
        assert_eq!(l.prefill_tokens - a.prefill_tokens, 4 + 2 + 4);
        let it = predict(&b, &v, &s[1], DecodeMode::LatentIterative).unwrap().latency;
        assert_eq!(it.prefill_tokens, a.prefill_tokens);
    }

    #[test]
    fn explain_leaves_predictions_unchanged() {
        let (b, v, s) = setup();
        let cb = Codebook {
            k: 16,
            patch: 4,
            n_classes: crate::world::N_CLASSES,
            codes: (0..16 * 96).map(|i| ((i % 96) / 6 == (i / 96) % 16) as u8 as f64).collect(),
        };
        let before = predict(&b, &v, &s[2], DecodeMode::LatentPrefill).unwrap();
        let e = explain(&b, &v, &cb, &s[2]).unwrap();
        let after = predict(&b, &v, &s[2], DecodeMode::LatentPrefill).unwrap();
        assert_eq!(before.answer_ids, after.answer_ids);
        assert_eq!(e.future_grids[0].ids.len(), 64);
        assert_eq!((e.future_grids[1].h, e.future_grids[1].w), (8, 8));
        assert_eq!(e.future_rasters[0].cells.len(), 32 * 32);
    }

    #[test]
    fn independent_caches_agree() {
        let (b, v, s) = setup();
        let p = build_prefill_prompt(&s[3], &v, 4, 2).unwrap();
        let (mut c1, h, _) = prefill(&b, &p, &s[3].frame_now).unwrap();
        let mut c2 = c1.clone();
        assert_eq!(c1.len(), p.len());
        let lg = b.logits_row(last_row(&h)).unwrap();
        let a = generate(&b, &mut c1, lg.clone(), v.answer_end, 18).unwrap();
        let c = generate(&b, &mut c2, lg, v.answer_end, 18).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn latency_csv_round_trips() {
        let (b, v, s) = setup();
        let modes: Vec<(DecodeMode, &ModelBundle)> = DecodeMode::ALL[..3].iter().map(|&m| (m, &b)).collect();
        let t = measure_latency(&modes, &v, &s[..2], 3, 1).unwrap();
        assert_eq!(t.records.len(), 6);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("latency.csv");
        write_latency_csv(&p, &t.records).unwrap();
        assert_eq!(read_latency_csv(&p).unwrap(), t.records);
        for r in &t.records {
            assert!((r.total_s - r.wall_prefill_s - r.wall_decode_s).abs() < 1e-9);
        }
    }
}
