//! The trainable stack: a small causal transformer backbone with a patch
//! embedder for the image span, two adapter MLPs, the language and visual
//! auxiliary decoders, and an optional trajectory regression head.

mod nn;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use nn::KvCache;
use nn::{argmax_in, normal, seeded, Linear, Mlp, Norm, Stack, INIT_STD};

use crate::error::{io_err, Error, Result};
use crate::layout::{Span, TokenLayout, BASE_VOCAB};
use crate::tensor::{read_checkpoint, write_checkpoint, Checkpoint, Graph, ParamId, ParamStore, Tensor, Var};
use crate::world::{Raster, N_CLASSES, N_WAYPOINTS};

/// Parameter groups, in registration order.
pub const GROUPS: [&str; 7] = ["backbone", "patch", "w_l", "w_v", "dec_l", "dec_v", "head"];

/// D_v vocabulary: two frame sentinels, then the codebook.
pub const VIS_START: usize = 0;
pub const VIS_END: usize = 1;
const VIS_CODE0: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub dec_layers: usize,
    pub max_seq_len: usize,
    /// Longest reasoning text the language decoder is sized for.
    pub max_cot_len: usize,
    pub latent_vis_count: usize,
    pub latent_lang_count: usize,
    pub codebook_size: usize,
    pub patch: usize,
    pub raster_h: usize,
    pub raster_w: usize,
    pub mlp_head: bool,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 128,
            n_layers: 4,
            n_heads: 4,
            dec_layers: 2,
            max_seq_len: 320,
            max_cot_len: 160,
            latent_vis_count: 4,
            latent_lang_count: 2,
            codebook_size: 256,
            patch: 4,
            raster_h: 32,
            raster_w: 32,
            mlp_head: true,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn n_visual(&self) -> usize {
        (self.raster_h / self.patch) * (self.raster_w / self.patch)
    }

    pub fn vocab_size(&self) -> usize {
        BASE_VOCAB + self.codebook_size
    }

    /// Length of the visual decoder target: two framed future grids.
    pub fn vis_target_len(&self) -> usize {
        2 * (self.n_visual() + 2)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.n_heads == 0 || self.d % self.n_heads != 0 {
            return bad(format!("d={} must be a positive multiple of n_heads={}", self.d, self.n_heads));
        }
        if self.patch == 0 || self.raster_h % self.patch != 0 || self.raster_w % self.patch != 0 {
            return bad(format!(
                "patch {} must divide the {}×{} raster",
                self.patch, self.raster_h, self.raster_w
            ));
        }
        if self.n_layers == 0 || self.dec_layers == 0 || self.codebook_size == 0 {
            return bad("layer counts and codebook size must be positive".into());
        }
        Ok(())
    }
}

/// One-hot patch features, one row per patch in row-major patch order.
pub fn patch_features(r: &Raster, patch: usize) -> Result<Tensor> {
    if patch == 0 || r.h % patch != 0 || r.w % patch != 0 {
        return Err(Error::Invalid(format!("patch {patch} does not tile a {}×{} raster", r.h, r.w)));
    }
    let (gh, gw) = (r.h / patch, r.w / patch);
    let dim = patch * patch * N_CLASSES;
    let mut data = vec![0.0; gh * gw * dim];
    for pr in 0..gh {
        for pc in 0..gw {
            let row = &mut data[(pr * gw + pc) * dim..(pr * gw + pc + 1) * dim];
            for i in 0..patch {
                for j in 0..patch {
                    let c = r.get(pr * patch + i, pc * patch + j) as usize;
                    row[(i * patch + j) * N_CLASSES + c] = 1.0;
                }
            }
        }
    }
    Ok(Tensor::matrix(gh * gw, dim, data)?)
}

/// Decoder-only network over `[conditioning rows ∥ target tokens]`.
#[derive(Clone, Debug)]
struct AuxDecoder {
    emb: ParamId,
    pos: ParamId,
    stack: Stack,
    out: Linear,
    vocab: usize,
    max_len: usize,
}

impl AuxDecoder {
    #[allow(clippy::too_many_arguments)]
    fn new(store: &mut ParamStore, rng: &mut rand_chacha::ChaCha8Rng, prefix: &str, d: usize, layers: usize, heads: usize, vocab: usize, max_len: usize) -> Self {
        let emb = store.add(format!("{prefix}/tok_emb"), normal(rng, vocab, d, INIT_STD), false);
        let pos = store.add(format!("{prefix}/pos_emb"), normal(rng, max_len, d, INIT_STD), false);
        let stack = Stack::new(store, rng, prefix, d, layers, heads);
        let out = Linear::new(store, rng, &format!("{prefix}/out"), d, vocab, INIT_STD);
        Self { emb, pos, stack, out, vocab, max_len }
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n > self.max_len {
            return Err(Error::Invalid(format!("decoder input of {n} rows exceeds {}", self.max_len)));
        }
        Ok(())
    }

    /// Teacher-forced loss: the last conditioning row predicts `targets[0]`,
    /// each target row predicts the next one.
    fn teacher_forced(&self, g: &mut Graph, store: &ParamStore, z: Var, targets: &[usize]) -> Result<(Var, Var)> {
        if targets.is_empty() {
            return Err(Error::Invalid("empty decoder target".into()));
        }
        if let Some(&id) = targets.iter().find(|&&t| t >= self.vocab) {
            return Err(Error::TokenRange {
                id,
                range: "the decoder vocabulary",
            });
        }
        let nz = g.shape(z)[0];
        let n = targets.len();
        self.check_len(nz + n - 1)?;
        let mut x = z;
        if n > 1 {
            let table = g.param(store, self.emb);
            let tok = g.embed(table, &targets[..n - 1])?;
            x = g.concat_rows(&[z, tok])?;
        }
        let pos_t = g.param(store, self.pos);
        let positions: Vec<usize> = (0..nz + n - 1).collect();
        let pos = g.embed(pos_t, &positions)?;
        let x = g.add(x, pos)?;
        let h = self.stack.forward(g, store, x, None)?;
        let rows = g.slice_rows(h, nz - 1, n)?;
        let logits = self.out.apply(g, store, rows)?;
        let loss = g.cross_entropy(logits, targets, &vec![true; n])?;
        Ok((loss, logits))
    }

    /// Greedy continuation of the conditioning rows `z`. `allowed(step)` bounds
    /// the candidate ids at each step; decoding ends after `stop` or `steps` tokens.
    fn greedy(&self, store: &ParamStore, z: &Tensor, steps: usize, allowed: impl Fn(usize) -> std::ops::Range<usize>, stop: Option<usize>) -> Result<Vec<usize>> {
        let nz = z.rows();
        self.check_len(nz + steps.saturating_sub(1))?;
        let mut cache = self.stack.empty_cache();
        let mut g = Graph::no_grad();
        let x = g.constant(z.clone())?;
        let pos_t = g.param(store, self.pos);
        let positions: Vec<usize> = (0..nz).collect();
        let pos = g.embed(pos_t, &positions)?;
        let x = g.add(x, pos)?;
        let h = self.stack.forward(&mut g, store, x, Some(&mut cache))?;
        let mut last = g.slice_rows(h, nz - 1, 1)?;
        let mut out = Vec::new();
        for step in 0..steps {
            let logits = self.out.apply(&mut g, store, last)?;
            let tok = argmax_in(g.value(logits).data(), allowed(step));
            out.push(tok);
            if Some(tok) == stop || step + 1 == steps {
                break;
            }
            g = Graph::no_grad();
            let table = g.param(store, self.emb);
            let x = g.embed(table, &[tok])?;
            let pos_t = g.param(store, self.pos);
            let pos = g.embed(pos_t, &[nz + step])?;
            let x = g.add(x, pos)?;
            last = self.stack.forward(&mut g, store, x, Some(&mut cache))?;
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
struct Parts {
    tok_emb: ParamId,
    pos_emb: ParamId,
    stack: Stack,
    lm_head: Linear,
    patch_proj: Linear,
    patch_norm: Norm,
    w_l: Mlp,
    w_v: Mlp,
    dec_l: AuxDecoder,
    dec_v: AuxDecoder,
    head: Option<Mlp>,
}

/// Parameters plus the structural handles needed to run every network.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub store: ParamStore,
    /// Provenance strings written into checkpoint metadata.
    pub meta: BTreeMap<String, String>,
    parts: Parts,
}

/// Backbone results needed by the losses.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// Final-layer hidden states, T×d.
    pub hidden: Var,
    /// Patch embeddings before the backbone, N_v×d.
    pub v_embed: Var,
    pub h_v: Option<Var>,
    pub h_l: Option<Var>,
}

/// Incremental backbone result: hidden rows of the new positions and, when an
/// image was part of the input, its patch embeddings.
#[derive(Clone, Debug)]
pub struct Extension {
    pub hidden: Tensor,
    pub v_embed: Option<Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_l: f64,
    pub lambda_v: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_l: 1.0,
            lambda_v: 0.1,
        }
    }
}

/// `l_c + λ_l·l_l + λ_v·l_v` on plain numbers.
pub fn total_loss(l_c: f64, l_l: f64, l_v: f64, w: LossWeights) -> Result<f64> {
    if !(l_c.is_finite() && l_l.is_finite() && l_v.is_finite()) {
        return Err(Error::Invalid(format!("non-finite loss component ({l_c}, {l_l}, {l_v})")));
    }
    Ok(l_c + w.lambda_l * l_l + w.lambda_v * l_v)
}

/// Graph version of [`total_loss`]; absent components contribute nothing.
pub fn total_loss_var(g: &mut Graph, l_c: Option<Var>, l_l: Option<Var>, l_v: Option<Var>, w: LossWeights) -> Result<Var> {
    let mut terms = Vec::new();
    if let Some(c) = l_c {
        terms.push(c);
    }
    if let Some(l) = l_l {
        terms.push(g.scale(l, w.lambda_l)?);
    }
    if let Some(v) = l_v {
        terms.push(g.scale(v, w.lambda_v)?);
    }
    let mut it = terms.into_iter();
    let mut acc = it.next().ok_or_else(|| Error::Invalid("no active loss".into()))?;
    for t in it {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

fn sidecar(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

impl ModelBundle {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let d = c.d;
        let mut rng = seeded(c.init_seed);
        let mut store = ParamStore::new();
        let tok_emb = store.add("backbone/tok_emb", normal(&mut rng, c.vocab_size(), d, INIT_STD), false);
        let pos_emb = store.add("backbone/pos_emb", normal(&mut rng, c.max_seq_len, d, INIT_STD), false);
        let stack = Stack::new(&mut store, &mut rng, "backbone", d, c.n_layers, c.n_heads);
        let lm_head = Linear::new(&mut store, &mut rng, "backbone/lm_head", d, c.vocab_size(), INIT_STD);
        let pdim = c.patch * c.patch * N_CLASSES;
        let patch_proj = Linear::new(&mut store, &mut rng, "patch/proj", pdim, d, INIT_STD);
        let patch_norm = Norm::new(&mut store, "patch/norm", d);
        let w_l = Mlp::new(&mut store, &mut rng, "w_l", d, d, d, INIT_STD);
        let w_v = Mlp::new(&mut store, &mut rng, "w_v", d, d, d, INIT_STD);
        let nv = c.n_visual();
        let dec_l = AuxDecoder::new(
            &mut store,
            &mut rng,
            "dec_l",
            d,
            c.dec_layers,
            c.n_heads,
            BASE_VOCAB,
            nv + c.latent_lang_count + c.max_cot_len + 1,
        );
        let dec_v = AuxDecoder::new(
            &mut store,
            &mut rng,
            "dec_v",
            d,
            c.dec_layers,
            c.n_heads,
            c.codebook_size + VIS_CODE0,
            nv + c.latent_vis_count + c.vis_target_len(),
        );
        let head = c
            .mlp_head
            .then(|| Mlp::new(&mut store, &mut rng, "head", d, d, 2 * N_WAYPOINTS, INIT_STD));
        Ok(Self {
            config,
            store,
            meta: BTreeMap::new(),
            parts: Parts {
                tok_emb,
                pos_emb,
                stack,
                lm_head,
                patch_proj,
                patch_norm,
                w_l,
                w_v,
                dec_l,
                dec_v,
                head,
            },
        })
    }

    pub fn has_head(&self) -> bool {
        self.parts.head.is_some()
    }

    pub fn new_cache(&self) -> KvCache {
        self.parts.stack.empty_cache()
    }

    /// Patch embeddings of a raster (N_v×d), the image rows of the backbone input.
    pub fn patch_embed(&self, g: &mut Graph, raster: &Raster) -> Result<Var> {
        if (raster.h, raster.w) != (self.config.raster_h, self.config.raster_w) {
            return Err(Error::Invalid(format!(
                "raster is {}×{}, model expects {}×{}",
                raster.h, raster.w, self.config.raster_h, self.config.raster_w
            )));
        }
        let f = g.constant(patch_features(raster, self.config.patch)?)?;
        let p = self.parts.patch_proj.apply(g, &self.store, f)?;
        self.parts.patch_norm.apply(g, &self.store, p)
    }

    /// Embeds `ids` starting at absolute position `pos0`, substituting patch
    /// embeddings over `image` (relative to `ids`).
    fn embed_inputs(&self, g: &mut Graph, ids: &[usize], image: Option<(Span, &Raster)>, pos0: usize) -> Result<(Var, Option<Var>)> {
        let n = ids.len();
        if n == 0 {
            return Err(Error::Invalid("empty input".into()));
        }
        if pos0 + n > self.config.max_seq_len {
            return Err(Error::Invalid(format!(
                "sequence of {} positions exceeds max_seq_len {}",
                pos0 + n,
                self.config.max_seq_len
            )));
        }
        let vocab = self.config.vocab_size();
        if let Some(&id) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::TokenRange { id, range: "the vocabulary" });
        }
        let table = g.param(&self.store, self.parts.tok_emb);
        let (x, v_embed) = match image {
            None => (g.embed(table, ids)?, None),
            Some((span, raster)) => {
                if span.end > n || span.len() != self.config.n_visual() {
                    return Err(Error::Invalid(format!(
                        "image span {}..{} does not hold {} patches within {n} ids",
                        span.start,
                        span.end,
                        self.config.n_visual()
                    )));
                }
                let v = self.patch_embed(g, raster)?;
                let mut parts = Vec::new();
                if span.start > 0 {
                    parts.push(g.embed(table, &ids[..span.start])?);
                }
                parts.push(v);
                if span.end < n {
                    parts.push(g.embed(table, &ids[span.end..])?);
                }
                (g.concat_rows(&parts)?, Some(v))
            }
        };
        let pos_t = g.param(&self.store, self.parts.pos_emb);
        let positions: Vec<usize> = (pos0..pos0 + n).collect();
        let pos = g.embed(pos_t, &positions)?;
        Ok((g.add(x, pos)?, v_embed))
    }

    /// Full causal forward over a layout; latent hidden states are sliced by span.
    pub fn backbone_forward(&self, g: &mut Graph, layout: &TokenLayout, raster: &Raster) -> Result<ForwardOutput> {
        let (x, v) = self.embed_inputs(g, &layout.ids, Some((layout.spans.image, raster)), 0)?;
        let hidden = self.parts.stack.forward(g, &self.store, x, None)?;
        let take = |g: &mut Graph, s: Span| -> Result<Option<Var>> {
            if s.is_empty() {
                Ok(None)
            } else {
                Ok(Some(g.slice_rows(hidden, s.start, s.len())?))
            }
        };
        let h_v = take(g, layout.spans.latent_vis)?;
        let h_l = take(g, layout.spans.latent_lang)?;
        Ok(ForwardOutput {
            hidden,
            v_embed: v.expect("image present"),
            h_v,
            h_l,
        })
    }

    /// Vocabulary logits at the given rows of `hidden`.
    pub fn logits_at(&self, g: &mut Graph, hidden: Var, rows: &[usize]) -> Result<Var> {
        let h = g.gather_rows(hidden, rows)?;
        self.parts.lm_head.apply(g, &self.store, h)
    }

    /// Mean next-token cross-entropy over the layout's loss mask.
    pub fn main_loss(&self, g: &mut Graph, out: &ForwardOutput, layout: &TokenLayout) -> Result<Var> {
        let (targets, mask) = layout.shifted_targets();
        let rows: Vec<usize> = (0..mask.len()).filter(|&t| mask[t]).collect();
        let picked: Vec<usize> = rows.iter().map(|&t| targets[t]).collect();
        let logits = self.logits_at(g, out.hidden, &rows)?;
        Ok(g.cross_entropy(logits, &picked, &vec![true; rows.len()])?)
    }

    fn conditioning(&self, g: &mut Graph, adapter: Mlp, v_embed: Var, latents: Option<Var>) -> Result<Var> {
        let x = match latents {
            Some(h) => g.concat_rows(&[v_embed, h])?,
            None => v_embed,
        };
        adapter.apply(g, &self.store, x)
    }

    /// Language decoder loss over `cot_ids` followed by end-of-sequence.
    pub fn lang_aux_forward(&self, g: &mut Graph, v_embed: Var, h_l: Option<Var>, cot_ids: &[usize]) -> Result<(Var, Var)> {
        if cot_ids.len() > self.config.max_cot_len {
            return Err(Error::Invalid(format!(
                "reasoning text of {} tokens exceeds max_cot_len {}",
                cot_ids.len(),
                self.config.max_cot_len
            )));
        }
        let z = self.conditioning(g, self.parts.w_l, v_embed, h_l)?;
        let mut targets = cot_ids.to_vec();
        targets.push(crate::layout::Vocab::EOS);
        self.parts.dec_l.teacher_forced(g, &self.store, z, &targets)
    }

    /// Visual decoder loss. Without `h_v` this is the unconditioned
    /// future-frame objective; with it, the latent-conditioned one.
    pub fn vis_aux_forward(&self, g: &mut Graph, v_embed: Var, h_v: Option<Var>, targets: &[usize]) -> Result<(Var, Var)> {
        let z = self.conditioning(g, self.parts.w_v, v_embed, h_v)?;
        self.parts.dec_v.teacher_forced(g, &self.store, z, targets)
    }

    /// Maps the two future grids (visual vocabulary ids) to the framed visual
    /// decoder target.
    pub fn visual_targets(&self, future_ids: &[Vec<usize>; 2], visual_offset: usize) -> Result<Vec<usize>> {
        let k = self.config.codebook_size;
        let mut out = Vec::with_capacity(self.config.vis_target_len());
        for grid in future_ids {
            if grid.len() != self.config.n_visual() {
                return Err(Error::Invalid(format!("future grid of {} ids", grid.len())));
            }
            out.push(VIS_START);
            for &id in grid {
                if id < visual_offset || id >= visual_offset + k {
                    return Err(Error::TokenRange {
                        id,
                        range: "the visual vocabulary",
                    });
                }
                out.push(id - visual_offset + VIS_CODE0);
            }
            out.push(VIS_END);
        }
        Ok(out)
    }

    /// Regressed waypoints (8×2, meters) from one hidden row.
    pub fn mlp_head_forward(&self, g: &mut Graph, h_last: Var) -> Result<Var> {
        let head = self
            .parts
            .head
            .ok_or_else(|| Error::Invalid("model has no regression head".into()))?;
        let y = head.apply(g, &self.store, h_last)?;
        Ok(g.reshape(y, &[N_WAYPOINTS, 2])?)
    }

    /// Runs new positions through the backbone, extending `cache`.
    pub fn extend(&self, cache: &mut KvCache, ids: &[usize], image: Option<(Span, &Raster)>) -> Result<Extension> {
        let mut g = Graph::no_grad();
        let (x, v) = self.embed_inputs(&mut g, ids, image, cache.len())?;
        let h = self.parts.stack.forward(&mut g, &self.store, x, Some(cache))?;
        Ok(Extension {
            hidden: g.value(h).clone(),
            v_embed: v.map(|v| g.value(v).clone()),
        })
    }

    /// Vocabulary logits of a single hidden row.
    pub fn logits_row(&self, hidden_row: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::no_grad();
        let h = g.constant(Tensor::matrix(1, hidden_row.len(), hidden_row.to_vec())?)?;
        let l = self.parts.lm_head.apply(&mut g, &self.store, h)?;
        Ok(g.value(l).data().to_vec())
    }

    /// Regression head on one hidden row, without gradients.
    pub fn head_predict(&self, hidden_row: &[f64]) -> Result<Vec<[f64; 2]>> {
        let mut g = Graph::no_grad();
        let h = g.constant(Tensor::matrix(1, hidden_row.len(), hidden_row.to_vec())?)?;
        let y = self.mlp_head_forward(&mut g, h)?;
        Ok(g.value(y).data().chunks(2).map(|c| [c[0], c[1]]).collect())
    }

    fn adapt(&self, adapter: Mlp, v_embed: &Tensor, latents: Option<&Tensor>) -> Result<Tensor> {
        let mut g = Graph::no_grad();
        let v = g.constant(v_embed.clone())?;
        let l = latents.map(|t| g.constant(t.clone())).transpose()?;
        let z = self.conditioning(&mut g, adapter, v, l)?;
        Ok(g.value(z).clone())
    }

    /// Greedy reasoning text from the language decoder (ids, end marker excluded).
    pub fn decode_lang(&self, v_embed: &Tensor, h_l: Option<&Tensor>) -> Result<Vec<usize>> {
        let z = self.adapt(self.parts.w_l, v_embed, h_l)?;
        let eos = crate::layout::Vocab::EOS;
        let mut ids = self
            .parts
            .dec_l
            .greedy(&self.store, &z, self.config.max_cot_len + 1, |_| 0..BASE_VOCAB, Some(eos))?;
        if ids.last() == Some(&eos) {
            ids.pop();
        }
        ids.truncate(self.config.max_cot_len);
        Ok(ids)
    }

    /// Greedy future grids from the visual decoder, as codebook indices.
    /// Sentinel positions are forced, so the output always has both grids.
    pub fn decode_vis(&self, v_embed: &Tensor, h_v: Option<&Tensor>) -> Result<[Vec<usize>; 2]> {
        let z = self.adapt(self.parts.w_v, v_embed, h_v)?;
        let frame = self.config.n_visual() + 2;
        let codes = VIS_CODE0..VIS_CODE0 + self.config.codebook_size;
        let ids = self.parts.dec_v.greedy(
            &self.store,
            &z,
            2 * frame,
            |step| match step % frame {
                0 => VIS_START..VIS_START + 1,
                p if p == frame - 1 => VIS_END..VIS_END + 1,
                _ => codes.clone(),
            },
            None,
        )?;
        let grid = |f: usize| ids[f * frame + 1..(f + 1) * frame - 1].iter().map(|&i| i - VIS_CODE0).collect();
        Ok([grid(0), grid(1)])
    }

    fn config_json(&self) -> String {
        serde_json::to_string(&self.config).expect("config serializes")
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::from_store(&self.store);
        c.meta = self.meta.clone();
        c.meta.insert("model.config".into(), self.config_json());
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let cfg = c
            .meta
            .get("model.config")
            .ok_or_else(|| Error::Invalid("checkpoint lacks a model config".into()))?;
        let config: ModelConfig = serde_json::from_str(cfg).map_err(|e| Error::Config(e.to_string()))?;
        let mut b = Self::new(config)?;
        c.load_into(&mut b.store)?;
        b.meta = c.meta.clone();
        b.meta.remove("model.config");
        Ok(b)
    }

    /// Writes the parameter file plus a `.json` sidecar with the config.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        write_checkpoint(path, &self.to_checkpoint())?;
        let side = sidecar(path);
        let body = serde_json::to_string_pretty(&serde_json::json!({
            "model": self.config,
            "meta": self.meta,
        }))
        .expect("sidecar serializes");
        std::fs::write(&side, body + "\n").map_err(io_err(&side))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing {
                artifact: path.to_path_buf(),
                hint: "onevl train",
            });
        }
        Self::from_checkpoint(&read_checkpoint(path)?)
    }
}
