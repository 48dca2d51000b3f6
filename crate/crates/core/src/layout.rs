//! Word-level tokenizer over the closed template grammar, fixed-point
//! trajectory tokens, and the canonical training / prefill token layouts.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vq::{encode, to_vocab_ids, Codebook, FrameTag};
use crate::world::{MetaAction, Raster, Sample, Scenario, N_WAYPOINTS};

/// Size of the text vocabulary; visual code ids start here.
pub const BASE_VOCAB: usize = 512;
/// Quarter-meter resolution, signed: q ∈ [−127, 127].
pub const COORD_STEP: f64 = 0.25;
pub const COORD_MAX_Q: i64 = 127;
/// Reserved slots set aside for visual latent fillers before language fillers begin.
pub const MAX_LATENT_VIS: usize = 64;

const SPECIALS: [&str; 9] = [
    "<eos>",
    "<|image_start|>",
    "<|image_end|>",
    "<answer>",
    "</answer>",
    "<|start-latent-vis|>",
    "<|end-latent-vis|>",
    "<|start-latent|>",
    "<|end-latent|>",
];

const PUNCT: [&str; 5] = [",", ".", ":", "-", "<pt>"];

/// The closed word list. Appending is compatible; reordering is a format break.
const WORDS: &[&str] = &[
    "a", "accelerate", "acceleration", "ahead", "allows", "and", "are", "at", "attention",
    "based", "behind", "block", "braking", "clear", "close", "closing", "come", "command",
    "cones", "current", "cutting", "decelerate", "direction", "does", "down", "drive",
    "driving", "ego", "enough", "far", "forward", "gap", "history", "i", "in", "information",
    "into", "is", "it", "its", "keep", "lane", "lanes", "large", "left", "limit", "located",
    "maintain", "meters", "middle", "more", "motion", "move", "moving", "narrow",
    "navigation", "need", "no", "not", "nudge", "of", "on", "or", "pay", "pedestrian",
    "pedestrians", "per", "require", "right", "road", "same", "scene", "second", "short",
    "should", "side", "sidewalk", "slightly", "slow", "slower", "slowly", "so", "speed",
    "starting", "state", "stationary", "steadily", "stop", "than", "that", "the", "there",
    "three", "to", "too", "traffic", "understanding", "vehicle", "vehicles", "velocity",
    "walking", "with", "work", "would", "zone", "changing",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Spans {
    pub prompt_text: Span,
    pub image: Span,
    /// Visual latent fillers only (delimiters excluded).
    pub latent_vis: Span,
    /// Language latent fillers only (delimiters excluded).
    pub latent_lang: Span,
    /// Explicit reasoning tokens, empty outside the explicit-CoT layout.
    pub cot: Span,
    /// answer_start, coordinate tokens, answer_end. Empty in prefill prompts.
    pub answer: Span,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenLayout {
    pub ids: Vec<usize>,
    pub spans: Spans,
    /// `loss_mask[t]` marks token `t` as a prediction target.
    pub loss_mask: Vec<bool>,
}

impl TokenLayout {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Next-token targets per position: row `t` predicts `ids[t + 1]`.
    pub fn shifted_targets(&self) -> (Vec<usize>, Vec<bool>) {
        let n = self.ids.len();
        let mut targets = vec![0; n];
        let mut mask = vec![false; n];
        for t in 0..n.saturating_sub(1) {
            targets[t] = self.ids[t + 1];
            mask[t] = self.loss_mask[t + 1];
        }
        (targets, mask)
    }
}

/// Token ids of the text vocabulary plus the visual-code extension.
#[derive(Clone, Debug)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    pub eos: usize,
    pub image_start: usize,
    pub image_end: usize,
    pub answer_start: usize,
    pub answer_end: usize,
    pub start_latent_vis: usize,
    pub end_latent_vis: usize,
    pub start_latent: usize,
    pub end_latent: usize,
    comma: usize,
    period: usize,
    colon: usize,
    minus: usize,
    point: usize,
    digit0: usize,
    coord0: usize,
    reserved0: usize,
    pub latent_vis_ids: Vec<usize>,
    pub latent_ids: Vec<usize>,
    pub visual_offset: usize,
    pub visual_count: usize,
}

#[derive(Serialize, Deserialize, PartialEq, Debug)]
pub struct VocabManifest {
    pub base_size: usize,
    pub tokens: Vec<String>,
    pub specials: Vec<(String, usize)>,
    pub latent_vis_ids: Vec<usize>,
    pub latent_ids: Vec<usize>,
    pub visual_offset: usize,
    pub visual_count: usize,
}

impl Vocab {
    /// End-of-sequence id, fixed across vocabularies.
    pub const EOS: usize = 0;

    /// `k` visual codes, `c_v` visual and `c_t` language latent fillers.
    pub fn new(k: usize, c_v: usize, c_t: usize) -> Result<Self> {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(PUNCT.iter().map(|s| s.to_string()));
        let digit0 = tokens.len();
        tokens.extend((0..10).map(|d| d.to_string()));
        tokens.extend(WORDS.iter().map(|s| s.to_string()));
        let coord0 = tokens.len();
        tokens.extend((-COORD_MAX_Q..=COORD_MAX_Q).map(|q| format!("<q{q:+}>")));
        let reserved0 = tokens.len();
        let mut i = 0;
        while tokens.len() < BASE_VOCAB {
            tokens.push(format!("<reserved_{i}>"));
            i += 1;
        }
        assert_eq!(tokens.len(), BASE_VOCAB, "base vocabulary overflow");
        let reserved = BASE_VOCAB - reserved0;
        if c_v > MAX_LATENT_VIS || MAX_LATENT_VIS + c_t > reserved {
            return Err(Error::Config(format!(
                "latent counts {c_v}/{c_t} exceed the reserved slots ({MAX_LATENT_VIS}/{})",
                reserved - MAX_LATENT_VIS
            )));
        }
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        let p = SPECIALS.len();
        Ok(Self {
            tokens,
            index,
            eos: Self::EOS,
            image_start: 1,
            image_end: 2,
            answer_start: 3,
            answer_end: 4,
            start_latent_vis: 5,
            end_latent_vis: 6,
            start_latent: 7,
            end_latent: 8,
            comma: p,
            period: p + 1,
            colon: p + 2,
            minus: p + 3,
            point: p + 4,
            digit0,
            coord0,
            reserved0,
            latent_vis_ids: (0..c_v).map(|i| reserved0 + i).collect(),
            latent_ids: (0..c_t).map(|i| reserved0 + MAX_LATENT_VIS + i).collect(),
            visual_offset: BASE_VOCAB,
            visual_count: k,
        })
    }

    /// Total vocabulary: text plus visual codes.
    pub fn size(&self) -> usize {
        BASE_VOCAB + self.visual_count
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        if id < BASE_VOCAB {
            Some(&self.tokens[id])
        } else {
            None
        }
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn reserved_start(&self) -> usize {
        self.reserved0
    }

    pub fn is_visual(&self, id: usize) -> bool {
        id >= self.visual_offset && id < self.visual_offset + self.visual_count
    }

    pub fn manifest(&self) -> VocabManifest {
        let specials = SPECIALS
            .iter()
            .enumerate()
            .map(|(i, s)| (s.to_string(), i))
            .collect();
        VocabManifest {
            base_size: BASE_VOCAB,
            tokens: self.tokens.clone(),
            specials,
            latent_vis_ids: self.latent_vis_ids.clone(),
            latent_ids: self.latent_ids.clone(),
            visual_offset: self.visual_offset,
            visual_count: self.visual_count,
        }
    }

    fn is_digitish(&self, id: usize) -> bool {
        (self.digit0..self.digit0 + 10).contains(&id) || id == self.point
    }

    pub fn tokenize_text(&self, s: &str) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for chunk in s.split_whitespace() {
            let b = chunk.as_bytes();
            let mut i = 0;
            while i < b.len() {
                let c = b[i];
                let next_digit = b.get(i + 1).is_some_and(|x| x.is_ascii_digit());
                if c == b'-' && next_digit {
                    out.push(self.minus);
                    i += 1;
                } else if c.is_ascii_digit() {
                    while i < b.len() {
                        if b[i].is_ascii_digit() {
                            out.push(self.digit0 + (b[i] - b'0') as usize);
                        } else if b[i] == b'.' && b.get(i + 1).is_some_and(|x| x.is_ascii_digit()) {
                            out.push(self.point);
                        } else {
                            break;
                        }
                        i += 1;
                    }
                } else if c == b',' {
                    out.push(self.comma);
                    i += 1;
                } else if c == b'.' {
                    out.push(self.period);
                    i += 1;
                } else if c == b':' {
                    out.push(self.colon);
                    i += 1;
                } else {
                    let start = i;
                    while i < b.len() && !matches!(b[i], b',' | b'.' | b':') {
                        i += 1;
                    }
                    let word = &chunk[start..i];
                    match self.index.get(word) {
                        Some(&id) if id < self.coord0 => out.push(id),
                        _ => return Err(Error::OutOfVocabulary(word.to_string())),
                    }
                }
            }
        }
        Ok(out)
    }

    /// Inverse of [`Vocab::tokenize_text`] on grammar-conformant text. Ids outside
    /// the text vocabulary render as `<v:N>`.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        let mut prev: Option<usize> = None;
        for &id in ids {
            let glue = match prev {
                None => true,
                Some(p) => {
                    id == self.comma
                        || id == self.period
                        || id == self.colon
                        || p == self.minus
                        || (self.is_digitish(id) && self.is_digitish(p))
                }
            };
            if !glue {
                out.push(' ');
            }
            match self.token(id) {
                Some(_) if id == self.point => out.push('.'),
                Some(t) => out.push_str(t),
                None => out.push_str(&format!("<v:{id}>")),
            }
            prev = Some(id);
        }
        out
    }

    pub fn coord_id(&self, x: f64) -> Result<usize> {
        if !x.is_finite() {
            return Err(Error::CoordinateRange(x));
        }
        let q = (x / COORD_STEP).round() as i64;
        if q.abs() > COORD_MAX_Q {
            return Err(Error::CoordinateRange(x));
        }
        Ok(self.coord0 + (q + COORD_MAX_Q) as usize)
    }

    pub fn coord_value(&self, id: usize) -> Option<f64> {
        let n = (2 * COORD_MAX_Q + 1) as usize;
        if id >= self.coord0 && id < self.coord0 + n {
            Some((id - self.coord0) as f64 * COORD_STEP - COORD_MAX_Q as f64 * COORD_STEP)
        } else {
            None
        }
    }

    /// answer_start, x₁, y₁, …, x₈, y₈, answer_end.
    pub fn encode_trajectory(&self, w: &[[f64; 2]]) -> Result<Vec<usize>> {
        if w.len() != N_WAYPOINTS {
            return Err(Error::Invalid(format!("expected {N_WAYPOINTS} waypoints, got {}", w.len())));
        }
        let mut ids = vec![self.answer_start];
        for p in w {
            ids.push(self.coord_id(p[0])?);
            ids.push(self.coord_id(p[1])?);
        }
        ids.push(self.answer_end);
        Ok(ids)
    }

    /// Accepts the framed answer; `None` if it is not exactly 16 coordinate
    /// tokens between the answer delimiters.
    pub fn decode_trajectory(&self, ids: &[usize]) -> Option<Vec<[f64; 2]>> {
        if ids.len() != 2 * N_WAYPOINTS + 2
            || ids[0] != self.answer_start
            || ids[ids.len() - 1] != self.answer_end
        {
            return None;
        }
        let vals: Option<Vec<f64>> = ids[1..ids.len() - 1].iter().map(|&i| self.coord_value(i)).collect();
        Some(vals?.chunks(2).map(|c| [c[0], c[1]]).collect())
    }
}

/// Rounds to the nearest representable answer coordinate.
pub fn round_to_lattice(x: f64) -> f64 {
    (x / COORD_STEP).round() * COORD_STEP
}

/// A sample with every token sequence precomputed, so training and
/// evaluation never touch the visual codec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncodedSample {
    pub seed: u64,
    pub scenario: Scenario,
    pub meta_action: MetaAction,
    pub prompt_ids: Vec<usize>,
    /// Visual vocabulary ids of the current frame, row-major.
    pub image_ids: Vec<usize>,
    /// Visual vocabulary ids of the two future frames.
    pub future_ids: [Vec<usize>; 2],
    pub cot_ids: Vec<usize>,
    pub answer_ids: Vec<usize>,
    pub trajectory: Vec<[f64; 2]>,
    pub frame_now: Raster,
    pub frame_future: [Raster; 2],
}

impl EncodedSample {
    /// Inputs for prediction only: the ego-state text and the current frame.
    /// Targets are empty and the scenario/meta-action labels are placeholders.
    pub fn for_inference(ego_state_text: &str, frame_now: Raster, vocab: &Vocab, cb: &Codebook) -> Result<Self> {
        let now = encode(&frame_now, cb, FrameTag::Now)?;
        let blank = Raster::new(frame_now.h, frame_now.w);
        Ok(Self {
            seed: 0,
            scenario: Scenario::Straight,
            meta_action: MetaAction::MaintainKeepLane,
            prompt_ids: vocab.tokenize_text(ego_state_text)?,
            image_ids: to_vocab_ids(&now, vocab.visual_offset),
            future_ids: [Vec::new(), Vec::new()],
            cot_ids: Vec::new(),
            answer_ids: Vec::new(),
            trajectory: Vec::new(),
            frame_now,
            frame_future: [blank.clone(), blank],
        })
    }
}

pub fn encode_sample(s: &Sample, vocab: &Vocab, cb: &Codebook) -> Result<EncodedSample> {
    let now = encode(&s.frame_now, cb, FrameTag::Now)?;
    let f0 = encode(&s.frame_future[0], cb, FrameTag::Future(0))?;
    let f1 = encode(&s.frame_future[1], cb, FrameTag::Future(1))?;
    Ok(EncodedSample {
        seed: s.seed,
        scenario: s.scenario,
        meta_action: s.meta_action,
        prompt_ids: vocab.tokenize_text(&s.ego_state_text)?,
        image_ids: to_vocab_ids(&now, vocab.visual_offset),
        future_ids: [
            to_vocab_ids(&f0, vocab.visual_offset),
            to_vocab_ids(&f1, vocab.visual_offset),
        ],
        cot_ids: vocab.tokenize_text(&s.cot_text)?,
        answer_ids: vocab.encode_trajectory(&s.trajectory)?,
        trajectory: s.trajectory.clone(),
        frame_now: s.frame_now.clone(),
        frame_future: s.frame_future.clone(),
    })
}

struct Builder {
    ids: Vec<usize>,
    mask: Vec<bool>,
}

impl Builder {
    fn push(&mut self, ids: &[usize], target: bool) -> Span {
        let start = self.ids.len();
        self.ids.extend_from_slice(ids);
        self.mask.extend(std::iter::repeat(target).take(ids.len()));
        Span {
            start,
            end: self.ids.len(),
        }
    }
}

fn prefix(s: &EncodedSample, vocab: &Vocab) -> (Builder, Span, Span) {
    let mut b = Builder {
        ids: Vec::new(),
        mask: Vec::new(),
    };
    let prompt = b.push(&s.prompt_ids, false);
    b.push(&[vocab.image_start], false);
    let image = b.push(&s.image_ids, false);
    b.push(&[vocab.image_end], false);
    (b, prompt, image)
}

fn latent_prompt(s: &EncodedSample, vocab: &Vocab, c_v: usize, c_t: usize) -> Result<(Builder, Spans)> {
    if c_v > vocab.latent_vis_ids.len() || c_t > vocab.latent_ids.len() {
        return Err(Error::Config(format!(
            "layout asks for {c_v}/{c_t} latents, vocabulary holds {}/{}",
            vocab.latent_vis_ids.len(),
            vocab.latent_ids.len()
        )));
    }
    let (mut b, prompt_text, image) = prefix(s, vocab);
    let mut latent_vis = Span {
        start: b.ids.len(),
        end: b.ids.len(),
    };
    if c_v > 0 {
        b.push(&[vocab.start_latent_vis], true);
        latent_vis = b.push(&vocab.latent_vis_ids[..c_v], true);
        b.push(&[vocab.end_latent_vis], true);
    }
    let mut latent_lang = Span {
        start: b.ids.len(),
        end: b.ids.len(),
    };
    if c_t > 0 {
        b.push(&[vocab.start_latent], true);
        latent_lang = b.push(&vocab.latent_ids[..c_t], true);
        b.push(&[vocab.end_latent], true);
    }
    let end = b.ids.len();
    let spans = Spans {
        prompt_text,
        image,
        latent_vis,
        latent_lang,
        cot: Span { start: end, end },
        answer: Span { start: end, end },
    };
    Ok((b, spans))
}

/// Prompt text, framed image, optional latent blocks, framed answer.
/// With `c_v = c_t = 0` this is the answer-only sequence.
pub fn build_training_sequence(s: &EncodedSample, vocab: &Vocab, c_v: usize, c_t: usize) -> Result<TokenLayout> {
    let (mut b, mut spans) = latent_prompt(s, vocab, c_v, c_t)?;
    spans.answer = b.push(&s.answer_ids, true);
    Ok(TokenLayout {
        ids: b.ids,
        spans,
        loss_mask: b.mask,
    })
}

/// The training sequence cut right after the last latent block.
pub fn build_prefill_prompt(s: &EncodedSample, vocab: &Vocab, c_v: usize, c_t: usize) -> Result<TokenLayout> {
    let (b, spans) = latent_prompt(s, vocab, c_v, c_t)?;
    Ok(TokenLayout {
        ids: b.ids,
        spans,
        loss_mask: b.mask,
    })
}

/// Prompt text, framed image, reasoning tokens, framed answer.
pub fn build_explicit_cot_sequence(s: &EncodedSample, vocab: &Vocab) -> TokenLayout {
    let (mut b, prompt_text, image) = prefix(s, vocab);
    let cot = b.push(&s.cot_ids, true);
    let answer = b.push(&s.answer_ids, true);
    let spans = Spans {
        prompt_text,
        image,
        latent_vis: Span { start: cot.start, end: cot.start },
        latent_lang: Span { start: cot.start, end: cot.start },
        cot,
        answer,
    };
    TokenLayout {
        ids: b.ids,
        spans,
        loss_mask: b.mask,
    }
}

/// Prompt for explicit-CoT decoding: everything before the reasoning.
pub fn build_explicit_cot_prompt(s: &EncodedSample, vocab: &Vocab) -> TokenLayout {
    let (b, prompt_text, image) = prefix(s, vocab);
    let end = b.ids.len();
    let empty = Span { start: end, end };
    TokenLayout {
        ids: b.ids,
        spans: Spans {
            prompt_text,
            image,
            latent_vis: empty,
            latent_lang: empty,
            cot: empty,
            answer: empty,
        },
        loss_mask: b.mask,
    }
}
