//! Acceptance run: prints one PASS/FAIL line per criterion and exits nonzero
//! if any fails.
//!
//! By default the trained-model criteria (5 to 8) train the `acceptance`
//! preset on the full synthetic dataset, which takes hours on one core.
//! `ONEVL_ACCEPTANCE_SCALE=smoke` runs them on the smoke preset instead;
//! those lines are labelled and criterion 7 then cannot meet its dataset
//! size. `ONEVL_ACCEPTANCE_DIR=<path>` keeps every artifact.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use onevl::config::RunConfig;
use onevl::eval::{evaluate_mode, explanation_fidelity};
use onevl::infer::{measure_latency, predict, prefill_equivalence_gap, DecodeMode, ANSWER_TOKENS};
use onevl::layout::{encode_sample, EncodedSample};
use onevl::model::{ModelBundle, GROUPS};
use onevl::run::{self, EvalOptions, Prepared, RunDir, StageSelection};
use onevl::tensor::gradcheck::{check_op, OPS};
use onevl::tensor::Graph;
use onevl::train::{plan_for, run_full_pipeline, sample_loss, Components, LossKind, Observer, PipelineJob, ReportLine, StageKind, Variant};
use onevl::vq::{decode, encode, encode_calls, from_vocab_ids, to_vocab_ids, FrameTag, VisualTokenGrid};
use onevl::world::{make_sample, Scenario};

const SEEDS: [u64; 3] = [0, 1, 2];
const LAMBDA_L: f64 = 1.0;
const LAMBDA_V: f64 = 0.1;

type Check = Result<(bool, String), String>;

#[derive(Default)]
struct Tally {
    results: BTreeMap<u8, (bool, String)>,
}

impl Tally {
    fn record(&mut self, id: u8, name: &str, outcome: Check) {
        let (pass, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        let line = format!("criterion {id:>2} {} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        println!("{line}");
        std::io::stdout().flush().ok();
        self.results.insert(id, (pass, line));
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn progress(tag: String) -> Observer<'static> {
    Box::new(move |line: &ReportLine| {
        if let ReportLine::Stage(s) = line {
            let f = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
            println!("    {tag} {}: {} steps, train {:.4}, val L_c {}, val ADE {}", s.stage, s.steps, s.train_loss, f(s.val_l_c), f(s.val_ade));
        }
    })
}

fn c1_gradients() -> Check {
    let t = Instant::now();
    let mut worst = (0.0f64, "");
    let mut failed = Vec::new();
    for (i, op) in OPS.iter().enumerate() {
        let e = check_op(op, 100, 7000 + i as u64);
        if !(e < 1e-4) {
            failed.push(format!("{op}={e:.2e}"));
        }
        if e > worst.0 || e.is_nan() {
            worst = (e, op);
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let detail = format!("{} ops x 100 trials, worst {} at {:.2e}, {secs:.1} s{}", OPS.len(), worst.1, worst.0, if failed.is_empty() { String::new() } else { format!(", over limit: {}", failed.join(" ")) });
    Ok((failed.is_empty() && secs < 60.0, detail))
}

fn report_lines(path: &Path) -> Result<String, String> {
    std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn c10_determinism(root: &Path) -> Check {
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let mut cfg = RunConfig::preset("smoke").map_err(err)?;
        cfg.run_dir = root.join(name);
        let dir = RunDir::new(&cfg.run_dir);
        dir.echo_config(&cfg).map_err(err)?;
        run::build_data(&cfg, &dir).map_err(err)?;
        run::train_vq(&cfg, &dir).map_err(err)?;
        let out = run::train(&cfg, &dir, Variant::Onevl, &StageSelection::All, None).map_err(err)?;
        let opts = EvalOptions {
            latency: false,
            ..EvalOptions::default()
        };
        run::evaluate(&cfg, &dir, &opts).map_err(err)?;
        let mut files = vec![report_lines(&dir.variant(Variant::Onevl).join("report.jsonl"))?, report_lines(&dir.report().join("metrics.csv"))?];
        for ck in &out.checkpoints {
            files.push(format!("{:?}", std::fs::read(ck).map_err(err)?));
        }
        outputs.push(files);
    }
    let same = outputs[0] == outputs[1];
    Ok((same, format!("two smoke runs: run report, metrics and {} checkpoints {}", outputs[0].len() - 2, if same { "byte-identical" } else { "differ" })))
}

fn c2_prefill(cfg: &RunConfig, prep: &Prepared) -> Check {
    let b = ModelBundle::new(cfg.model.clone()).map_err(err)?;
    let (h, w) = (cfg.model.raster_h, cfg.model.raster_w);
    let samples = (0..64u64)
        .map(|i| encode_sample(&make_sample(50_000 + i, Scenario::ALL[i as usize % 4], h, w), &prep.vocab, &prep.codebook))
        .collect::<onevl::Result<Vec<_>>>()
        .map_err(err)?;
    let mut worst = 0.0f64;
    for s in &samples {
        worst = worst.max(prefill_equivalence_gap(&b, &prep.vocab, s).map_err(err)?);
    }
    Ok((samples.len() >= 50 && worst <= 1e-10, format!("{} samples, max |prefill - forced| {worst:.2e}", samples.len())))
}

struct Trained {
    onevl: Vec<ModelBundle>,
    answer_only: Vec<ModelBundle>,
    no_staging: Vec<ModelBundle>,
    explicit: ModelBundle,
    frozen_latent: ModelBundle,
    head: ModelBundle,
    onevl_dir: PathBuf,
    encode_delta: u64,
}

fn train_variant(cfg: &RunConfig, prep: &Prepared, v: Variant, out: PathBuf) -> Result<ModelBundle, String> {
    let mut job = PipelineJob::new(v, &cfg.train, &cfg.hash());
    job.out_dir = Some(out);
    let tag = format!("seed {} {}", cfg.train.seed, v.name());
    let b = ModelBundle::new(cfg.model.clone()).map_err(err)?;
    Ok(run_full_pipeline(b, &prep.data(), &job, Some(progress(tag))).map_err(err)?.bundle)
}

fn train_all(cfg: &RunConfig, prep: &Prepared, root: &Path) -> Result<Trained, String> {
    let before = encode_calls();
    let (mut onevl, mut answer_only, mut no_staging) = (Vec::new(), Vec::new(), Vec::new());
    for s in SEEDS {
        let c = cfg.reseeded(s);
        let d = root.join(format!("seed-{s}"));
        onevl.push(train_variant(&c, prep, Variant::Onevl, d.join("onevl"))?);
        answer_only.push(train_variant(&c, prep, Variant::AnswerOnly, d.join("answer_only"))?);
        no_staging.push(train_variant(&c, prep, Variant::NoStaging, d.join("no_staging"))?);
    }
    let c0 = cfg.reseeded(SEEDS[0]);
    let d0 = root.join(format!("seed-{}", SEEDS[0]));
    let explicit = train_variant(&c0, prep, Variant::ExplicitCot, d0.join("explicit_cot"))?;
    let frozen_latent = train_variant(&c0, prep, Variant::FrozenLatent, d0.join("frozen_latent"))?;
    // The head variant shares the curriculum, so fit its head on the trained OneVL model.
    let mut job = PipelineJob::new(Variant::MlpHead, &c0.train, &c0.hash());
    job.plans = vec![plan_for(StageKind::Head, &c0.train)];
    job.out_dir = Some(d0.join("mlp_head"));
    let head = run_full_pipeline(onevl[0].clone(), &prep.data(), &job, Some(progress("seed 0 mlp_head".into())))
        .map_err(err)?
        .bundle;
    Ok(Trained {
        onevl,
        answer_only,
        no_staging,
        explicit,
        frozen_latent,
        head,
        onevl_dir: d0.join("onevl"),
        encode_delta: encode_calls() - before,
    })
}

fn load(dir: &Path, stage: &str) -> Result<ModelBundle, String> {
    ModelBundle::load(&dir.join(format!("{stage}.ckpt"))).map_err(err)
}

fn changed_groups(a: &ModelBundle, b: &ModelBundle, groups: &[&str]) -> Vec<String> {
    groups
        .iter()
        .filter(|g| {
            let (x, y) = (a.store.snapshot_group(g), b.store.snapshot_group(g));
            x.len() != y.len() || x.iter().zip(&y).any(|((n1, t1), (n2, t2))| n1 != n2 || !t1.bit_eq(t2))
        })
        .map(|g| g.to_string())
        .collect()
}

fn c3_freeze(cfg: &RunConfig, t: &Trained) -> Check {
    let init = ModelBundle::new(cfg.reseeded(SEEDS[0]).model).map_err(err)?;
    let pre = load(&t.onevl_dir, "pretrain")?;
    let s0 = load(&t.onevl_dir, "stage0")?;
    let s1 = load(&t.onevl_dir, "stage1")?;
    let mut bad = Vec::new();
    for g in changed_groups(&s1, &s0, &["backbone", "patch"]) {
        bad.push(format!("stage1 changed {g}"));
    }
    // The visual decoder is pretrained before stage 0; stage 0 must leave both decoders as it found them.
    for g in changed_groups(&s0, &pre, &["w_l", "w_v", "dec_l", "dec_v", "head"]) {
        bad.push(format!("stage0 changed {g}"));
    }
    for g in changed_groups(&s0, &init, &["w_l", "dec_l", "head"]) {
        bad.push(format!("{g} differs from init after stage0"));
    }
    let moved = changed_groups(&s1, &s0, &["dec_l", "dec_v"]).len() == 2 && changed_groups(&s0, &pre, &["backbone"]).len() == 1;
    if !moved {
        bad.push("trainable groups did not move".into());
    }
    let n: usize = GROUPS.iter().map(|g| s0.store.snapshot_group(g).len()).sum();
    Ok((bad.is_empty(), if bad.is_empty() { format!("stage1 kept backbone+patch, stage0 kept both decoders and adapters bit-identical ({n} tensors checked)") } else { bad.join("; ") }))
}

fn c4_loss(cfg: &RunConfig, prep: &Prepared, t: &Trained) -> Check {
    let mut worst = 0.0f64;
    let mut steps = 0;
    let text = report_lines(&t.onevl_dir.join("report.jsonl"))?;
    for line in text.lines() {
        if let ReportLine::Step(s) = serde_json::from_str(line).map_err(err)? {
            if s.stage != "stage2" {
                continue;
            }
            let l = s.losses;
            let (c, ll, lv) = (l.l_c.ok_or("missing l_c")?, l.l_l.ok_or("missing l_l")?, l.l_v.ok_or("missing l_v")?);
            worst = worst.max((l.total - (c + LAMBDA_L * ll + LAMBDA_V * lv)).abs());
            steps += 1;
        }
    }
    // Independent recomputation: each term in its own graph, combined here.
    let b = &t.onevl[0];
    let full = plan_for(StageKind::Stage2, &cfg.train);
    let only = |k: LossKind| {
        let mut p = full.clone();
        p.losses = vec![k];
        p
    };
    let mut worst_recomputed = 0.0f64;
    for s in prep.train.iter().take(16) {
        let run = |p: &onevl::train::StagePlan| -> Result<Components, String> {
            let mut g = Graph::no_grad();
            Ok(sample_loss(&mut g, b, p, &prep.vocab, s).map_err(err)?.1)
        };
        let total = run(&full)?.total;
        let (c, l, v) = (run(&only(LossKind::Main))?.l_c, run(&only(LossKind::Lang))?.l_l, run(&only(LossKind::Vis))?.l_v);
        let expect = c.ok_or("no l_c")? + LAMBDA_L * l.ok_or("no l_l")? + LAMBDA_V * v.ok_or("no l_v")?;
        worst_recomputed = worst_recomputed.max((total - expect).abs());
    }
    let pass = steps > 0 && worst <= 1e-10 && worst_recomputed <= 1e-10;
    Ok((pass, format!("{steps} logged stage2 steps max dev {worst:.2e}; 16 samples recomputed term by term max dev {worst_recomputed:.2e}")))
}

fn decoded(b: &ModelBundle, prep: &Prepared, s: &EncodedSample, m: DecodeMode) -> Result<usize, String> {
    Ok(predict(b, &prep.vocab, s, m).map_err(err)?.latency.decoded_tokens)
}

fn c5_tokens(prep: &Prepared, t: &Trained) -> Check {
    let (mut unequal, mut not_longer) = (0, 0);
    let mut cot = Vec::new();
    for s in &prep.test {
        let p = decoded(&t.onevl[0], prep, s, DecodeMode::LatentPrefill)?;
        let a = decoded(&t.answer_only[0], prep, s, DecodeMode::AnswerOnly)?;
        let e = decoded(&t.explicit, prep, s, DecodeMode::ExplicitCot)?;
        unequal += usize::from(p != a);
        not_longer += usize::from(e <= p.max(a));
        cot.push(e as f64);
    }
    let n = prep.test.len();
    Ok((
        n > 0 && unequal == 0 && not_longer == 0,
        format!("{n} test samples: prefill != answer_only on {unequal}, explicit not longer on {not_longer}; median explicit decode {:.0} tokens", median(cot)),
    ))
}

fn c6_latency(cfg: &RunConfig, prep: &Prepared, t: &Trained) -> Check {
    use DecodeMode::*;
    let start = Instant::now();
    let n = cfg.eval.latency_samples.min(prep.test.len());
    let served = [(AnswerOnly, &t.answer_only[0]), (ExplicitCot, &t.explicit), (LatentPrefill, &t.onevl[0]), (MlpHead, &t.head)];
    let table = measure_latency(&served, &prep.vocab, &prep.test[..n], cfg.eval.latency_runs, cfg.eval.latency_warmup).map_err(err)?;
    let r = |a, b| table.ratio(a, b).unwrap_or(f64::NAN);
    let (ex, pa, mh) = (r(ExplicitCot, LatentPrefill), r(LatentPrefill, AnswerOnly), r(MlpHead, AnswerOnly));
    let cot_len = table.get(ExplicitCot).map_or(0.0, |s| s.median_decoded_tokens) - ANSWER_TOKENS as f64;
    let secs = start.elapsed().as_secs_f64();
    let checks = [
        (ex >= 1.3, format!("explicit/prefill {ex:.3} (>= 1.3)")),
        ((pa - 1.0).abs() <= 0.10, format!("prefill/answer_only {pa:.3} (within 10%)")),
        (mh <= 0.2, format!("mlp_head/answer_only {mh:.3} (<= 0.2)")),
        (cot_len >= 40.0, format!("median CoT {cot_len:.0} tokens (>= 40)")),
        (n >= 100, format!("{n} samples x {} runs, {} warmup", cfg.eval.latency_runs, cfg.eval.latency_warmup)),
        (secs < 600.0, format!("{secs:.0} s")),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.0).map(|c| c.1.as_str()).collect();
    let all: Vec<&str> = checks.iter().map(|c| c.1.as_str()).collect();
    let mut detail = all.join(", ");
    if !failed.is_empty() {
        detail += &format!("; failing: {}", failed.join(", "));
    }
    Ok((failed.is_empty(), detail))
}

fn c7_efficacy(cfg: &RunConfig, prep: &Prepared, t: &Trained, smoke: bool) -> Check {
    let ade = |bs: &[ModelBundle], m: DecodeMode| -> Result<Vec<f64>, String> { bs.iter().map(|b| Ok(evaluate_mode(b, &prep.vocab, &prep.test, m).map_err(err)?.metrics.ade)).collect() };
    let o = ade(&t.onevl, DecodeMode::LatentPrefill)?;
    let a = ade(&t.answer_only, DecodeMode::AnswerOnly)?;
    let ns = ade(&t.no_staging, DecodeMode::LatentPrefill)?;
    let (mo, ma, mn) = (median(o.clone()), median(a.clone()), median(ns.clone()));
    let n = cfg.data.n_samples;
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/");
    let pass = SEEDS.len() >= 3 && n >= 5000 && mo <= ma && mn > mo;
    Ok((
        pass,
        format!(
            "{}{} seeds, {n} samples; median test ADE onevl {mo:.3} [{}], answer_only {ma:.3} [{}], no_staging {mn:.3} [{}]",
            if smoke { "smoke scale, " } else { "" },
            SEEDS.len(),
            fmt(&o),
            fmt(&a),
            fmt(&ns)
        ),
    ))
}

fn c8_fidelity(prep: &Prepared, t: &Trained) -> Check {
    let held: Vec<EncodedSample> = prep.test.iter().filter(|s| matches!(s.scenario, Scenario::Straight | Scenario::SlowLead)).cloned().collect();
    let f = explanation_fidelity(&t.onevl[0], &prep.vocab, &prep.codebook, &held).map_err(err)?;
    let ctl = explanation_fidelity(&t.frozen_latent, &prep.vocab, &prep.codebook, &held).map_err(err)?;
    let pass = !held.is_empty() && f.meta_action_acc > 0.7 && f.meta_action_acc > 1.0 / 6.0 && f.future_cell_acc > ctl.future_cell_acc;
    Ok((
        pass,
        format!(
            "{} straight/slow_lead samples: meta-action acc {:.3} ({} unparsed), future cell acc {:.4} vs frozen-latent {:.4}",
            held.len(),
            f.meta_action_acc,
            f.n_unparsed,
            f.future_cell_acc,
            ctl.future_cell_acc
        ),
    ))
}

fn c9_codec(prep: &Prepared, encode_delta: u64) -> Check {
    let cb = &prep.codebook;
    let base = prep.vocab.visual_offset;
    let all = VisualTokenGrid {
        h: 1,
        w: cb.k,
        ids: (0..cb.k).collect(),
        tag: FrameTag::Now,
    };
    let ids = to_vocab_ids(&all, base);
    let distinct: std::collections::BTreeSet<usize> = ids.iter().copied().collect();
    let bijective = distinct.len() == cb.k
        && ids.iter().all(|&i| prep.vocab.is_visual(i))
        && from_vocab_ids(&ids, base, cb.k, 1, cb.k, FrameTag::Now).map_err(err)? == all
        && from_vocab_ids(&[base - 1], base, cb.k, 1, 1, FrameTag::Now).is_err()
        && from_vocab_ids(&[base + cb.k], base, cb.k, 1, 1, FrameTag::Now).is_err();
    let mut not_idempotent = 0;
    let mut frames = 0;
    for s in &prep.test {
        for r in [&s.frame_now, &s.frame_future[0], &s.frame_future[1]] {
            let g = encode(r, cb, FrameTag::Now).map_err(err)?;
            let again = encode(&decode(&g, cb).map_err(err)?, cb, FrameTag::Now).map_err(err)?;
            not_idempotent += usize::from(again != g);
            frames += 1;
        }
    }
    let before = encode_calls();
    encode(&prep.test[0].frame_now, cb, FrameTag::Now).map_err(err)?;
    let counted = encode_calls() == before + 1;
    let pass = bijective && not_idempotent == 0 && counted && encode_delta == 0;
    Ok((
        pass,
        format!("id map over all {} codes {}; encode(decode(encode)) stable on {}/{frames} frames; {encode_delta} codec calls during training", cb.k, if bijective { "bijective" } else { "NOT bijective" }, frames - not_idempotent),
    ))
}

fn main() {
    let started = Instant::now();
    let smoke = std::env::var("ONEVL_ACCEPTANCE_SCALE").is_ok_and(|s| s == "smoke");
    let keep = std::env::var_os("ONEVL_ACCEPTANCE_DIR").map(PathBuf::from);
    let tmp = tempfile::tempdir().expect("temp dir");
    let root = keep.unwrap_or_else(|| tmp.path().to_path_buf());
    println!("acceptance: scale {}, artifacts in {}", if smoke { "smoke" } else { "full" }, root.display());
    let mut tally = Tally::default();

    tally.record(1, "gradient suite", c1_gradients());
    tally.record(10, "determinism", c10_determinism(&root.join("determinism")));

    let mut cfg = RunConfig::preset(if smoke { "smoke" } else { "acceptance" }).expect("preset");
    cfg.run_dir = root.join("main");
    let dir = RunDir::new(&cfg.run_dir);
    let prep = dir
        .echo_config(&cfg)
        .and_then(|_| run::build_data(&cfg, &dir))
        .and_then(|_| run::train_vq(&cfg, &dir))
        .and_then(|_| run::load_prepared(&cfg, &dir));
    let prep = match prep {
        Ok(p) => p,
        Err(e) => {
            println!("data preparation failed: {e}");
            std::process::exit(1);
        }
    };
    println!("data: {} train / {} val / {} test, config {}", prep.train.len(), prep.val.len(), prep.test.len(), cfg.short_hash());
    tally.record(2, "prefill equivalence", c2_prefill(&cfg, &prep));

    match train_all(&cfg, &prep, &cfg.run_dir.join("train")) {
        Ok(t) => {
            tally.record(3, "freeze soundness", c3_freeze(&cfg, &t));
            tally.record(4, "loss composition", c4_loss(&cfg, &prep, &t));
            tally.record(5, "token-count law", c5_tokens(&prep, &t));
            tally.record(6, "latency ordering", c6_latency(&cfg, &prep, &t));
            tally.record(7, "learning efficacy", c7_efficacy(&cfg, &prep, &t, smoke));
            tally.record(8, "explanation fidelity", c8_fidelity(&prep, &t));
            tally.record(9, "codec suite", c9_codec(&prep, t.encode_delta));
        }
        Err(e) => {
            for (id, name) in [(3, "freeze soundness"), (4, "loss composition"), (5, "token-count law"), (6, "latency ordering"), (7, "learning efficacy"), (8, "explanation fidelity"), (9, "codec suite")] {
                tally.record(id, name, Err(format!("training failed: {e}")));
            }
        }
    }

    println!("\nsummary ({:.0} s):", started.elapsed().as_secs_f64());
    for (_, line) in tally.results.values() {
        println!("{line}");
    }
    let failed = tally.results.values().filter(|(p, _)| !p).count();
    println!("{} passed, {failed} failed", tally.results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
