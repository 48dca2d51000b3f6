//! Staged training. A run is a list of [`StagePlan`]s executed in order on
//! one [`ModelBundle`]; each stage picks its trainable groups, its active
//! losses and its schedule.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::evaluate_mode;
use crate::infer::DecodeMode;
use crate::jsonl::write_jsonl;
use crate::layout::{build_explicit_cot_sequence, build_prefill_prompt, build_training_sequence, EncodedSample, TokenLayout, Vocab};
use crate::model::{total_loss_var, LossWeights, ModelBundle};
use crate::tensor::{clip_global_norm, cosine_lr, AdamW, AdamWConfig, Graph, ParamId, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    /// Visual decoder alone, conditioned on the image only.
    Pretrain,
    /// Main model on the latent layout.
    Stage0,
    /// Adapters and decoders against a frozen main model.
    Stage1,
    /// Everything jointly.
    Stage2,
    /// Single joint stage from scratch, without clipping.
    Joint,
    /// Main model on the answer-only layout.
    AnswerOnly,
    /// Main model on the explicit-reasoning layout.
    ExplicitCot,
    /// Regression head on frozen latents.
    Head,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "l_p")]
    Pretrain,
    #[serde(rename = "l_c")]
    Main,
    #[serde(rename = "l_l")]
    Lang,
    #[serde(rename = "l_v")]
    Vis,
    #[serde(rename = "l_h")]
    Head,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutKind {
    Latent,
    AnswerOnly,
    ExplicitCot,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub name: String,
    pub kind: StageKind,
    pub epochs: usize,
    /// Fixed step count; overrides `epochs` when set.
    pub steps: Option<usize>,
    pub lr: f64,
    pub warmup_frac: f64,
    pub batch_size: usize,
    pub trainable: Vec<String>,
    pub losses: Vec<LossKind>,
    pub weights: LossWeights,
    pub clip: Option<f64>,
    pub layout: LayoutKind,
    /// Keep the parameters with the lowest validation main loss seen at an epoch end.
    pub select_best_val: bool,
}

impl StagePlan {
    pub fn has(&self, l: LossKind) -> bool {
        self.losses.contains(&l)
    }

    /// Groups of `b` left untouched by this stage.
    pub fn frozen(&self, b: &ModelBundle) -> Vec<String> {
        b.store.groups().into_iter().filter(|g| !self.trainable.contains(g)).collect()
    }

    pub fn validate(&self, b: &ModelBundle) -> Result<()> {
        let groups = b.store.groups();
        let bad = |m: String| Err(Error::Config(format!("stage {}: {m}", self.name)));
        if let Some(g) = self.trainable.iter().find(|g| !groups.contains(g)) {
            return bad(format!("unknown group {g}"));
        }
        if self.losses.is_empty() {
            return bad("no active loss".into());
        }
        if self.batch_size == 0 {
            return bad("batch size 0".into());
        }
        if self.has(LossKind::Head) && !b.has_head() {
            return bad("regression head requested but the model has none".into());
        }
        if self.has(LossKind::Pretrain) && self.losses.len() > 1 {
            return bad("decoder pretraining runs alone".into());
        }
        if self.layout != LayoutKind::Latent && [LossKind::Lang, LossKind::Vis, LossKind::Head].iter().any(|&l| self.has(l)) {
            return bad("auxiliary decoders and the head need the latent layout".into());
        }
        if !(self.lr > 0.0) {
            return bad(format!("learning rate {}", self.lr));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub pretrain_steps: usize,
    pub stage0_epochs: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub head_epochs: usize,
    pub pretrain_lr: f64,
    pub stage0_lr: f64,
    pub stage1_lr: f64,
    pub stage2_lr: f64,
    pub head_lr: f64,
    pub warmup_frac: f64,
    pub clip_norm: Option<f64>,
    pub lambda_l: f64,
    pub lambda_v: f64,
    /// Validation samples used for best-val selection and stage summaries.
    pub val_subset: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 16,
            pretrain_steps: 2000,
            stage0_epochs: 2,
            stage1_epochs: 1,
            stage2_epochs: 5,
            head_epochs: 2,
            pretrain_lr: 1e-4,
            stage0_lr: 4e-5,
            stage1_lr: 1e-4,
            stage2_lr: 1e-4,
            head_lr: 1e-3,
            warmup_frac: 0.03,
            clip_norm: Some(1.0),
            lambda_l: 1.0,
            lambda_v: 0.1,
            val_subset: 64,
        }
    }
}

impl TrainConfig {
    /// Tiny schedule for CI runs: one pass per stage, a handful of pretrain steps.
    pub fn smoke() -> Self {
        Self {
            batch_size: 4,
            pretrain_steps: 4,
            stage0_epochs: 1,
            stage1_epochs: 1,
            stage2_epochs: 1,
            head_epochs: 1,
            val_subset: 4,
            ..Self::default()
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_l: self.lambda_l,
            lambda_v: self.lambda_v,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Desk,
    Smoke,
}

/// What a training run produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Onevl,
    AnswerOnly,
    NoVis,
    NoLang,
    NoStaging,
    MlpHead,
    /// Decoders trained on the latents of a never-trained main model.
    FrozenLatent,
    /// Baseline that writes its reasoning out before the answer.
    ExplicitCot,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Onevl,
        Variant::AnswerOnly,
        Variant::NoVis,
        Variant::NoLang,
        Variant::NoStaging,
        Variant::MlpHead,
        Variant::FrozenLatent,
        Variant::ExplicitCot,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Onevl => "onevl",
            Variant::AnswerOnly => "answer_only",
            Variant::NoVis => "no_vis",
            Variant::NoLang => "no_lang",
            Variant::NoStaging => "no_staging",
            Variant::MlpHead => "mlp_head",
            Variant::FrozenLatent => "frozen_latent",
            Variant::ExplicitCot => "explicit_cot",
        }
    }

    /// Decode mode this variant is scored in.
    pub fn eval_mode(self) -> DecodeMode {
        match self {
            Variant::AnswerOnly => DecodeMode::AnswerOnly,
            Variant::MlpHead => DecodeMode::MlpHead,
            Variant::ExplicitCot => DecodeMode::ExplicitCot,
            _ => DecodeMode::LatentPrefill,
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
        .find(|v| v.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

pub fn plan_for(kind: StageKind, tc: &TrainConfig) -> StagePlan {
    use LossKind::*;
    let base = StagePlan {
        name: String::new(),
        kind,
        epochs: 1,
        steps: None,
        lr: tc.stage2_lr,
        warmup_frac: tc.warmup_frac,
        batch_size: tc.batch_size,
        trainable: Vec::new(),
        losses: Vec::new(),
        weights: tc.weights(),
        clip: tc.clip_norm,
        layout: LayoutKind::Latent,
        select_best_val: false,
    };
    let main = ["backbone", "patch"];
    let aux = ["w_l", "w_v", "dec_l", "dec_v"];
    let all = ["backbone", "patch", "w_l", "w_v", "dec_l", "dec_v"];
    match kind {
        StageKind::Pretrain => StagePlan {
            name: "pretrain".into(),
            steps: Some(tc.pretrain_steps),
            lr: tc.pretrain_lr,
            trainable: strings(&["dec_v", "w_v"]),
            losses: vec![Pretrain],
            ..base
        },
        StageKind::Stage0 => StagePlan {
            name: "stage0".into(),
            epochs: tc.stage0_epochs,
            lr: tc.stage0_lr,
            trainable: strings(&main),
            losses: vec![Main],
            ..base
        },
        StageKind::Stage1 => StagePlan {
            name: "stage1".into(),
            epochs: tc.stage1_epochs,
            lr: tc.stage1_lr,
            trainable: strings(&aux),
            losses: vec![Lang, Vis],
            ..base
        },
        StageKind::Stage2 => StagePlan {
            name: "stage2".into(),
            epochs: tc.stage2_epochs,
            lr: tc.stage2_lr,
            trainable: strings(&all),
            losses: vec![Main, Lang, Vis],
            select_best_val: true,
            ..base
        },
        StageKind::Joint => StagePlan {
            name: "joint".into(),
            epochs: tc.stage2_epochs,
            lr: tc.stage2_lr,
            trainable: strings(&all),
            losses: vec![Main, Lang, Vis],
            clip: None,
            select_best_val: true,
            ..base
        },
        StageKind::AnswerOnly => StagePlan {
            name: "answer_only".into(),
            epochs: tc.stage2_epochs,
            lr: tc.stage2_lr,
            trainable: strings(&main),
            losses: vec![Main],
            layout: LayoutKind::AnswerOnly,
            select_best_val: true,
            ..base
        },
        StageKind::ExplicitCot => StagePlan {
            name: "explicit_cot".into(),
            epochs: tc.stage2_epochs,
            lr: tc.stage2_lr,
            trainable: strings(&main),
            losses: vec![Main],
            layout: LayoutKind::ExplicitCot,
            select_best_val: true,
            ..base
        },
        StageKind::Head => StagePlan {
            name: "head".into(),
            epochs: tc.head_epochs,
            lr: tc.head_lr,
            trainable: strings(&["head"]),
            losses: vec![Head],
            ..base
        },
    }
}

/// The four-phase curriculum.
pub fn curriculum(tc: &TrainConfig) -> Vec<StagePlan> {
    [StageKind::Pretrain, StageKind::Stage0, StageKind::Stage1, StageKind::Stage2]
        .iter()
        .map(|&k| plan_for(k, tc))
        .collect()
}

pub fn default_curriculum(scale: Scale) -> Vec<StagePlan> {
    match scale {
        Scale::Desk => curriculum(&TrainConfig::default()),
        Scale::Smoke => curriculum(&TrainConfig::smoke()),
    }
}

fn without(mut p: StagePlan, loss: LossKind, groups: &[&str]) -> StagePlan {
    p.losses.retain(|&l| l != loss);
    p.trainable.retain(|g| !groups.contains(&g.as_str()));
    p
}

/// Same main-model budget as the curriculum: a low-rate warmup, then the joint-stage schedule.
fn baseline(kind: StageKind, tc: &TrainConfig) -> Vec<StagePlan> {
    let main = plan_for(kind, tc);
    let warm = StagePlan {
        name: format!("{}_warmup", main.name),
        epochs: tc.stage0_epochs,
        lr: tc.stage0_lr,
        select_best_val: false,
        ..main.clone()
    };
    vec![warm, main]
}

/// Stage list for a variant.
pub fn variant_plans(v: Variant, tc: &TrainConfig) -> Vec<StagePlan> {
    match v {
        Variant::Onevl => curriculum(tc),
        Variant::AnswerOnly => baseline(StageKind::AnswerOnly, tc),
        Variant::ExplicitCot => baseline(StageKind::ExplicitCot, tc),
        Variant::NoVis => curriculum(tc)
            .into_iter()
            .filter(|p| p.kind != StageKind::Pretrain)
            .map(|p| without(p, LossKind::Vis, &["w_v", "dec_v"]))
            .collect(),
        Variant::NoLang => curriculum(tc)
            .into_iter()
            .map(|p| without(p, LossKind::Lang, &["w_l", "dec_l"]))
            .collect(),
        Variant::NoStaging => vec![plan_for(StageKind::Joint, tc)],
        Variant::MlpHead => {
            let mut v = curriculum(tc);
            v.push(plan_for(StageKind::Head, tc));
            v
        }
        Variant::FrozenLatent => curriculum(tc)
            .into_iter()
            .filter(|p| p.kind != StageKind::Stage0)
            .map(|p| without(p, LossKind::Main, &["backbone", "patch"]))
            .collect(),
    }
}

/// Per-component loss values of one sample or the mean over a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Components {
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_c: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_l: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_v: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_h: Option<f64>,
}

impl Components {
    fn fields(&mut self) -> [&mut Option<f64>; 5] {
        [&mut self.l_p, &mut self.l_c, &mut self.l_l, &mut self.l_v, &mut self.l_h]
    }

    fn accumulate(&mut self, o: &Components) {
        self.total += o.total;
        let mut o = *o;
        for (a, b) in self.fields().into_iter().zip(o.fields()) {
            if let Some(x) = *b {
                *a = Some(a.unwrap_or(0.0) + x);
            }
        }
    }

    fn scale(&mut self, s: f64) {
        self.total *= s;
        for f in self.fields() {
            if let Some(x) = f {
                *x *= s;
            }
        }
    }
}

pub struct TrainData<'a> {
    pub vocab: &'a Vocab,
    pub train: &'a [EncodedSample],
    pub val: &'a [EncodedSample],
}

fn training_layout(b: &ModelBundle, layout: LayoutKind, vocab: &Vocab, s: &EncodedSample) -> Result<TokenLayout> {
    match layout {
        LayoutKind::Latent => build_training_sequence(s, vocab, b.config.latent_vis_count, b.config.latent_lang_count),
        LayoutKind::AnswerOnly => build_training_sequence(s, vocab, 0, 0),
        LayoutKind::ExplicitCot => Ok(build_explicit_cot_sequence(s, vocab)),
    }
}

/// Records the plan's active losses for one sample on `g`.
pub fn sample_loss(g: &mut Graph, b: &ModelBundle, plan: &StagePlan, vocab: &Vocab, s: &EncodedSample) -> Result<(Var, Components)> {
    use LossKind::*;
    let mut comp = Components::default();
    let mut extra: Vec<Var> = Vec::new();
    let (mut lc, mut ll, mut lv) = (None, None, None);
    let vis_targets = || b.visual_targets(&s.future_ids, vocab.visual_offset);
    if plan.has(Pretrain) {
        let v = b.patch_embed(g, &s.frame_now)?;
        let (lp, _) = b.vis_aux_forward(g, v, None, &vis_targets()?)?;
        comp.l_p = Some(g.value(lp).item());
        extra.push(lp);
    }
    if plan.has(Main) || plan.has(Lang) || plan.has(Vis) {
        let layout = training_layout(b, plan.layout, vocab, s)?;
        let out = b.backbone_forward(g, &layout, &s.frame_now)?;
        if plan.has(Main) {
            lc = Some(b.main_loss(g, &out, &layout)?);
        }
        if plan.has(Lang) {
            ll = Some(b.lang_aux_forward(g, out.v_embed, out.h_l, &s.cot_ids)?.0);
        }
        if plan.has(Vis) {
            lv = Some(b.vis_aux_forward(g, out.v_embed, out.h_v, &vis_targets()?)?.0);
        }
    }
    if plan.has(Head) {
        let layout = build_prefill_prompt(s, vocab, b.config.latent_vis_count, b.config.latent_lang_count)?;
        let out = b.backbone_forward(g, &layout, &s.frame_now)?;
        let row = if layout.spans.latent_lang.is_empty() {
            layout.len() - 1
        } else {
            layout.spans.latent_lang.end - 1
        };
        let h = g.slice_rows(out.hidden, row, 1)?;
        let y = b.mlp_head_forward(g, h)?;
        let target = Tensor::matrix(s.trajectory.len(), 2, s.trajectory.iter().flatten().copied().collect())?;
        let lh = g.mse(y, &target)?;
        comp.l_h = Some(g.value(lh).item());
        extra.push(lh);
    }
    comp.l_c = lc.map(|v| g.value(v).item());
    comp.l_l = ll.map(|v| g.value(v).item());
    comp.l_v = lv.map(|v| g.value(v).item());
    let mut total = if lc.is_some() || ll.is_some() || lv.is_some() {
        Some(total_loss_var(g, lc, ll, lv, plan.weights)?)
    } else {
        None
    };
    for e in extra {
        total = Some(match total {
            Some(t) => g.add(t, e)?,
            None => e,
        });
    }
    let total = total.ok_or_else(|| Error::Invalid("no active loss".into()))?;
    comp.total = g.value(total).item();
    Ok((total, comp))
}

/// Mean losses and mean parameter gradients over a batch. Samples run in
/// parallel; the reduction is in batch order, so results do not depend on
/// the thread count.
pub fn batch_gradients(b: &ModelBundle, plan: &StagePlan, vocab: &Vocab, batch: &[&EncodedSample]) -> Result<(Components, Vec<(ParamId, Tensor)>)> {
    let per: Vec<(Components, Vec<(ParamId, Tensor)>)> = batch
        .par_iter()
        .map(|s| {
            let mut g = Graph::new();
            let (loss, comp) = sample_loss(&mut g, b, plan, vocab, s)?;
            Ok((comp, g.backward(loss)?.into_param_grads()))
        })
        .collect::<Result<_>>()?;
    let mut comp = Components::default();
    let mut sums: std::collections::BTreeMap<ParamId, Tensor> = std::collections::BTreeMap::new();
    for (c, grads) in &per {
        comp.accumulate(c);
        for (id, t) in grads {
            match sums.get_mut(id) {
                Some(acc) => {
                    for (a, x) in acc.data_mut().iter_mut().zip(t.data()) {
                        *a += x;
                    }
                }
                None => {
                    sums.insert(*id, t.clone());
                }
            }
        }
    }
    let inv = 1.0 / batch.len() as f64;
    comp.scale(inv);
    let grads = sums
        .into_iter()
        .map(|(id, mut t)| {
            t.data_mut().iter_mut().for_each(|x| *x *= inv);
            (id, t)
        })
        .collect();
    Ok((comp, grads))
}

/// Mean main loss over `samples` in the given layout.
pub fn validation_loss(b: &ModelBundle, layout: LayoutKind, vocab: &Vocab, samples: &[EncodedSample]) -> Result<f64> {
    let losses = samples
        .par_iter()
        .map(|s| {
            let mut g = Graph::no_grad();
            let l = training_layout(b, layout, vocab, s)?;
            let out = b.backbone_forward(&mut g, &l, &s.frame_now)?;
            let loss = b.main_loss(&mut g, &out, &l)?;
            Ok(g.value(loss).item())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: String,
    pub step: usize,
    pub lr: f64,
    pub grad_norm: f64,
    #[serde(flatten)]
    pub losses: Components,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: String,
    pub kind: StageKind,
    pub steps: usize,
    pub trainable: Vec<String>,
    pub frozen: Vec<String>,
    /// Mean training loss over the final epoch (or final pass over the steps).
    pub train_loss: f64,
    pub val_l_c: Option<f64>,
    pub val_ade: Option<f64>,
    /// Epoch whose parameters were kept, when best-val selection is on.
    pub best_epoch: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum ReportLine {
    Run {
        variant: String,
        seed: u64,
        config_hash: String,
        plans: Vec<StagePlan>,
    },
    Step(StepRecord),
    Stage(StageSummary),
}

/// Called with every report line as it is produced.
pub type Observer<'a> = Box<dyn FnMut(&ReportLine) + 'a>;

pub struct TrainState<'a> {
    pub seed: u64,
    /// Validation samples scored per stage.
    pub val_subset: usize,
    /// Optimizer of the most recent stage; a fresh one is made per stage.
    pub optimizer: AdamW,
    pub report: Vec<ReportLine>,
    observer: Option<Observer<'a>>,
}

impl<'a> TrainState<'a> {
    pub fn new(seed: u64, val_subset: usize) -> Self {
        Self {
            seed,
            val_subset,
            optimizer: AdamW::new(AdamWConfig::default()),
            report: Vec::new(),
            observer: None,
        }
    }

    pub fn with_observer(mut self, f: Observer<'a>) -> Self {
        self.observer = Some(f);
        self
    }

    fn record(&mut self, line: ReportLine) {
        if let Some(f) = self.observer.as_mut() {
            f(&line);
        }
        self.report.push(line);
    }

    pub fn steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.report.iter().filter_map(|l| match l {
            ReportLine::Step(s) => Some(s),
            _ => None,
        })
    }
}

fn stage_seed(seed: u64, name: &str) -> u64 {
    name.bytes().fold(seed ^ 0x6F6E_6576_6C00_0000, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01B3))
}

/// Runs one stage in place. Only the plan's trainable groups change.
pub fn run_stage(b: &mut ModelBundle, plan: &StagePlan, data: &TrainData, state: &mut TrainState<'_>) -> Result<StageSummary> {
    plan.validate(b)?;
    if data.train.is_empty() {
        return Err(Error::Invalid("empty training split".into()));
    }
    let trainable: Vec<&str> = plan.trainable.iter().map(String::as_str).collect();
    b.store.train_only(&trainable);
    state.optimizer = AdamW::new(AdamWConfig::default());
    let n = data.train.len();
    let per_epoch = n.div_ceil(plan.batch_size);
    let total = plan.steps.unwrap_or(plan.epochs * per_epoch);
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(state.seed, &plan.name));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let val: &[EncodedSample] = &data.val[..data.val.len().min(state.val_subset)];
    let mut best: Option<(f64, usize, Vec<(ParamId, Tensor)>)> = None;
    let mut epoch_losses = Vec::new();
    let mut epoch = 0;
    for step in 0..total {
        if cursor >= n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + plan.batch_size).min(n);
        let batch: Vec<&EncodedSample> = order[cursor..end].iter().map(|&i| &data.train[i]).collect();
        cursor = end;
        let non_finite = || Error::NonFiniteLoss {
            stage: plan.name.clone(),
            step,
        };
        let (comp, mut grads) = match batch_gradients(b, plan, data.vocab, &batch) {
            Err(Error::Tensor(TensorError::NonFinite { .. })) => return Err(non_finite()),
            r => r?,
        };
        if !comp.total.is_finite() {
            return Err(non_finite());
        }
        let grad_norm = clip_global_norm(&mut grads, plan.clip);
        let lr = cosine_lr(plan.lr, step, total, plan.warmup_frac);
        state.optimizer.step(&mut b.store, &grads, lr)?;
        epoch_losses.push(comp.total);
        state.record(ReportLine::Step(StepRecord {
            stage: plan.name.clone(),
            step,
            lr,
            grad_norm,
            losses: comp,
        }));
        let epoch_done = cursor >= n || step + 1 == total;
        if epoch_done && plan.select_best_val && !val.is_empty() {
            let v = validation_loss(b, plan.layout, data.vocab, val)?;
            if best.as_ref().is_none_or(|(bv, _, _)| v < *bv) {
                let snap = b.store.ids().filter(|&id| b.store.is_trainable(id)).map(|id| (id, b.store.value(id).clone())).collect();
                best = Some((v, epoch, snap));
            }
        }
        if epoch_done && step + 1 < total {
            epoch += 1;
            epoch_losses.clear();
        }
    }
    let mut best_epoch = None;
    if let Some((_, e, snap)) = best {
        for (id, t) in snap {
            b.store.set_value(id, t)?;
        }
        best_epoch = Some(e);
    }
    let train_loss = epoch_losses.iter().sum::<f64>() / epoch_losses.len().max(1) as f64;
    let scored = plan.kind != StageKind::Pretrain && !val.is_empty();
    let val_l_c = if scored {
        Some(validation_loss(b, plan.layout, data.vocab, val)?)
    } else {
        None
    };
    let val_ade = if scored {
        let mode = match (plan.kind, plan.layout) {
            (StageKind::Head, _) => DecodeMode::MlpHead,
            (_, LayoutKind::AnswerOnly) => DecodeMode::AnswerOnly,
            (_, LayoutKind::ExplicitCot) => DecodeMode::ExplicitCot,
            _ => DecodeMode::LatentPrefill,
        };
        Some(evaluate_mode(b, data.vocab, val, mode)?.metrics.ade)
    } else {
        None
    };
    let summary = StageSummary {
        stage: plan.name.clone(),
        kind: plan.kind,
        steps: total,
        trainable: plan.trainable.clone(),
        frozen: plan.frozen(b),
        train_loss,
        val_l_c,
        val_ade,
        best_epoch,
    };
    state.record(ReportLine::Stage(summary.clone()));
    Ok(summary)
}

pub struct PipelineOutput {
    pub bundle: ModelBundle,
    pub report: Vec<ReportLine>,
    /// One checkpoint per stage, in order.
    pub checkpoints: Vec<PathBuf>,
}

/// What to run and where to put it.
#[derive(Clone, Debug)]
pub struct PipelineJob {
    pub variant: Variant,
    pub plans: Vec<StagePlan>,
    pub seed: u64,
    pub val_subset: usize,
    pub config_hash: String,
    /// Extra checkpoint metadata, e.g. the schedule name.
    pub meta: Vec<(String, String)>,
    /// With a directory, writes `<stage>.ckpt` after each stage and `report.jsonl` at the end.
    pub out_dir: Option<PathBuf>,
}

impl PipelineJob {
    pub fn new(variant: Variant, tc: &TrainConfig, config_hash: &str) -> Self {
        Self {
            variant,
            plans: variant_plans(variant, tc),
            seed: tc.seed,
            val_subset: tc.val_subset,
            config_hash: config_hash.into(),
            meta: Vec::new(),
            out_dir: None,
        }
    }
}

/// Executes the job's stages in order on `bundle`.
pub fn run_full_pipeline(mut bundle: ModelBundle, data: &TrainData, job: &PipelineJob, observer: Option<Observer<'_>>) -> Result<PipelineOutput> {
    for p in &job.plans {
        p.validate(&bundle)?;
    }
    let mut state = TrainState::new(job.seed, job.val_subset);
    state.observer = observer;
    state.record(ReportLine::Run {
        variant: job.variant.name().into(),
        seed: job.seed,
        config_hash: job.config_hash.clone(),
        plans: job.plans.clone(),
    });
    bundle.meta.insert("config_hash".into(), job.config_hash.clone());
    bundle.meta.insert("variant".into(), job.variant.name().into());
    for (k, v) in &job.meta {
        bundle.meta.insert(k.clone(), v.clone());
    }
    let mut checkpoints = Vec::new();
    for p in &job.plans {
        run_stage(&mut bundle, p, data, &mut state)?;
        if let Some(dir) = &job.out_dir {
            bundle.meta.insert("stage".into(), p.name.clone());
            let path = dir.join(format!("{}.ckpt", p.name));
            bundle.save(&path)?;
            checkpoints.push(path);
        }
    }
    if let Some(dir) = &job.out_dir {
        write_jsonl(&dir.join("report.jsonl"), &state.report)?;
    }
    Ok(PipelineOutput {
        bundle,
        report: state.report,
        checkpoints,
    })
}

#[cfg(test)]
mod tests;
