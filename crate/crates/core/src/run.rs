//! The run directory and the operations behind each CLI command.
//!
//! ```text
//! <run>/config.toml                 resolved config of the last command
//! <run>/data/{train,val,test}.jsonl raw samples, plus manifest.json
//! <run>/vq/codebook.ckpt            visual codebook; vq/vocab.json, vq/manifest.json
//! <run>/encoded/*.jsonl             token-encoded samples
//! <run>/train/<variant>/<stage>.ckpt, report.jsonl
//! <run>/report/                     summary.txt, metrics.csv, latency.csv, plots/
//! <run>/explain/<variant>/test-<i>/ cot.txt, future_0.ppm, future_1.ppm
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{io_err, Error, Result};
use crate::eval::{explanation_fidelity, run_benchmark, write_report, Benchmark};
use crate::infer::{explain as explain_sample, measure_latency, DecodeMode};
use crate::jsonl::{read_jsonl, write_jsonl};
use crate::layout::{encode_sample, EncodedSample, Vocab};
use crate::model::ModelBundle;
use crate::train::{run_full_pipeline, Observer, PipelineOutput, PipelineJob, ReportLine, TrainConfig, TrainData, Variant};
use crate::vq::{train_codebook, Codebook};
use crate::world::{build_dataset, Dataset, Raster};

#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn codebook(&self) -> PathBuf {
        self.root.join("vq/codebook.ckpt")
    }

    pub fn vocab_manifest(&self) -> PathBuf {
        self.root.join("vq/vocab.json")
    }

    pub fn encoded(&self) -> PathBuf {
        self.root.join("encoded")
    }

    pub fn variant(&self, v: Variant) -> PathBuf {
        self.root.join("train").join(v.name())
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }

    pub fn explain(&self, v: Variant) -> PathBuf {
        self.root.join("explain").join(v.name())
    }

    /// Writes the resolved config next to the artifacts.
    pub fn echo_config(&self, cfg: &RunConfig) -> Result<()> {
        std::fs::create_dir_all(&self.root).map_err(io_err(&self.root))?;
        let p = self.root.join("config.toml");
        let body = format!("# config hash {}\n{}", cfg.hash(), cfg.to_toml());
        std::fs::write(&p, body).map_err(io_err(&p))
    }
}

/// Provenance record stored beside generated data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub counts: BTreeMap<String, usize>,
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d).map_err(io_err(d))?;
    }
    let body = serde_json::to_string_pretty(v).expect("serializable");
    std::fs::write(path, body + "\n").map_err(io_err(path))
}

fn split_counts(train: usize, val: usize, test: usize) -> BTreeMap<String, usize> {
    [("train", train), ("val", val), ("test", test)].into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

pub fn build_data(cfg: &RunConfig, dir: &RunDir) -> Result<Dataset> {
    let d = &cfg.data;
    let ds = build_dataset(d.n_samples, d.seed, d.split, cfg.model.raster_h, cfg.model.raster_w)?;
    ds.write(&dir.data())?;
    let m = Manifest {
        config_hash: cfg.hash(),
        counts: split_counts(ds.train.len(), ds.val.len(), ds.test.len()),
    };
    write_json(&dir.data().join("manifest.json"), &m)?;
    Ok(ds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqSummary {
    pub config_hash: String,
    pub k: usize,
    pub patch: usize,
    pub distinct_patches: usize,
    pub final_error: f64,
    pub lloyd_errors: Vec<f64>,
    /// Mean cell agreement of decode(encode(frame)) over the validation frames.
    pub val_cell_accuracy: f64,
}

fn frames(samples: &[crate::world::Sample]) -> Vec<Raster> {
    samples
        .iter()
        .flat_map(|s| std::iter::once(s.frame_now.clone()).chain(s.frame_future.iter().cloned()))
        .collect()
}

pub fn vocab_for(cfg: &RunConfig) -> Result<Vocab> {
    Vocab::new(cfg.model.codebook_size, cfg.model.latent_vis_count, cfg.model.latent_lang_count)
}

/// Fits the codebook on training frames, then tokenizes every split once.
pub fn train_vq(cfg: &RunConfig, dir: &RunDir) -> Result<VqSummary> {
    let ds = Dataset::read(&dir.data())?;
    let (cb, rep) = train_codebook(&frames(&ds.train), cfg.model.codebook_size, cfg.model.patch, cfg.vq.iters, cfg.vq.seed)?;
    let val_frames = frames(&ds.val);
    let acc = val_frames
        .par_iter()
        .map(|r| {
            let g = crate::vq::encode(r, &cb, crate::vq::FrameTag::Now)?;
            Ok(crate::vq::decode(&g, &cb)?.agreement(r))
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut ckpt = cb.to_checkpoint();
    ckpt.meta.insert("config_hash".into(), cfg.hash());
    crate::tensor::write_checkpoint(&dir.codebook(), &ckpt)?;
    let vocab = vocab_for(cfg)?;
    write_json(&dir.vocab_manifest(), &vocab.manifest())?;
    let enc = |split: &[crate::world::Sample]| -> Result<Vec<EncodedSample>> { split.par_iter().map(|s| encode_sample(s, &vocab, &cb)).collect() };
    let out = dir.encoded();
    let (tr, va, te) = (enc(&ds.train)?, enc(&ds.val)?, enc(&ds.test)?);
    for (name, split) in Dataset::FILES.iter().zip([&tr, &va, &te]) {
        write_jsonl(&out.join(name), split)?;
    }
    write_json(
        &out.join("manifest.json"),
        &Manifest {
            config_hash: cfg.hash(),
            counts: split_counts(tr.len(), va.len(), te.len()),
        },
    )?;
    let summary = VqSummary {
        config_hash: cfg.hash(),
        k: cb.k,
        patch: cb.patch,
        distinct_patches: rep.distinct_patches,
        final_error: rep.final_error,
        lloyd_errors: rep.lloyd_errors,
        val_cell_accuracy: acc.iter().sum::<f64>() / acc.len().max(1) as f64,
    };
    write_json(&dir.root().join("vq/manifest.json"), &summary)?;
    Ok(summary)
}

/// Everything training and evaluation read from disk.
pub struct Prepared {
    pub vocab: Vocab,
    pub codebook: Codebook,
    pub train: Vec<EncodedSample>,
    pub val: Vec<EncodedSample>,
    pub test: Vec<EncodedSample>,
}

impl Prepared {
    pub fn data(&self) -> TrainData<'_> {
        TrainData {
            vocab: &self.vocab,
            train: &self.train,
            val: &self.val,
        }
    }
}

pub fn load_prepared(cfg: &RunConfig, dir: &RunDir) -> Result<Prepared> {
    let codebook = Codebook::load(&dir.codebook())?;
    if codebook.k != cfg.model.codebook_size || codebook.patch != cfg.model.patch {
        return Err(Error::Config(format!(
            "codebook on disk has k={} patch={}, config wants k={} patch={}; rerun onevl train-vq",
            codebook.k, codebook.patch, cfg.model.codebook_size, cfg.model.patch
        )));
    }
    let mut splits = Vec::new();
    for name in Dataset::FILES {
        let p = dir.encoded().join(name);
        if !p.exists() {
            return Err(Error::Missing {
                artifact: p,
                hint: "onevl train-vq",
            });
        }
        splits.push(read_jsonl::<EncodedSample>(&p)?);
    }
    let test = splits.pop().unwrap();
    let val = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    Ok(Prepared {
        vocab: vocab_for(cfg)?,
        codebook,
        train,
        val,
        test,
    })
}

/// Which stages `train` runs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StageSelection {
    All,
    /// Every stage on the shrunken CI schedule.
    Smoke,
    /// A contiguous run of named stages, resuming from the checkpoint of the stage before.
    Only(Vec<String>),
}

impl std::str::FromStr for StageSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "all" => StageSelection::All,
            "smoke" => StageSelection::Smoke,
            list => StageSelection::Only(list.split(',').map(|x| x.trim().to_string()).filter(|x| !x.is_empty()).collect()),
        })
    }
}

pub fn schedule(cfg: &RunConfig, sel: &StageSelection) -> TrainConfig {
    match sel {
        StageSelection::Smoke => TrainConfig {
            seed: cfg.train.seed,
            ..TrainConfig::smoke()
        },
        _ => cfg.train.clone(),
    }
}

/// Trains `variant` into `train/<variant>/`.
pub fn train(cfg: &RunConfig, dir: &RunDir, variant: Variant, sel: &StageSelection, observer: Option<Observer<'_>>) -> Result<PipelineOutput> {
    let prep = load_prepared(cfg, dir)?;
    let tc = schedule(cfg, sel);
    let mut job = PipelineJob::new(variant, &tc, &cfg.hash());
    job.out_dir = Some(dir.variant(variant));
    job.meta.push((
        "schedule".into(),
        if *sel == StageSelection::Smoke { "smoke" } else { "config" }.into(),
    ));
    let mut bundle = ModelBundle::new(cfg.model.clone())?;
    if let StageSelection::Only(names) = sel {
        let all = job.plans.clone();
        let first = all
            .iter()
            .position(|p| names.first() == Some(&p.name))
            .ok_or_else(|| Error::Config(format!("variant {} has no stage {:?}", variant.name(), names.first())))?;
        let picked = &all[first..(first + names.len()).min(all.len())];
        if picked.iter().map(|p| &p.name).ne(names.iter()) {
            let known: Vec<&str> = all.iter().map(|p| p.name.as_str()).collect();
            return Err(Error::Config(format!(
                "stages must be a contiguous run of {known:?}, got {names:?}"
            )));
        }
        if first > 0 {
            let prev = dir.variant(variant).join(format!("{}.ckpt", all[first - 1].name));
            if !prev.exists() {
                return Err(Error::Missing {
                    artifact: prev,
                    hint: "onevl train (earlier stages)",
                });
            }
            bundle = ModelBundle::load(&prev)?;
            check_hash(&bundle, cfg, &prev, false)?;
        }
        job.plans = picked.to_vec();
    }
    run_full_pipeline(bundle, &prep.data(), &job, observer)
}

fn check_hash(b: &ModelBundle, cfg: &RunConfig, path: &Path, allow: bool) -> Result<()> {
    let want = cfg.hash();
    match b.meta.get("config_hash") {
        Some(h) if *h == want => Ok(()),
        _ if allow => Ok(()),
        got => Err(Error::Config(format!(
            "{} was produced under config {} but the current config hashes to {}; pass --allow-config-mismatch to use it anyway",
            path.display(),
            got.map(|h| &h[..h.len().min(12)]).unwrap_or("<none>"),
            &want[..12]
        ))),
    }
}

/// Path of the last checkpoint a full run of `v` writes.
pub fn final_checkpoint(cfg: &RunConfig, dir: &RunDir, v: Variant) -> PathBuf {
    let plans = crate::train::variant_plans(v, &cfg.train);
    let last = plans.last().map(|p| p.name.clone()).unwrap_or_default();
    dir.variant(v).join(format!("{last}.ckpt"))
}

pub fn load_variant(cfg: &RunConfig, dir: &RunDir, v: Variant, allow_mismatch: bool) -> Result<ModelBundle> {
    let p = final_checkpoint(cfg, dir, v);
    if !p.exists() {
        return Err(Error::Missing {
            artifact: p,
            hint: if v == Variant::Onevl { "onevl train" } else { "onevl ablate" },
        });
    }
    let b = ModelBundle::load(&p)?;
    check_hash(&b, cfg, &p, allow_mismatch)?;
    Ok(b)
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub allow_config_mismatch: bool,
    pub latency: bool,
    pub fidelity: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            allow_config_mismatch: false,
            latency: true,
            fidelity: true,
        }
    }
}

/// Variant whose checkpoint serves each decode mode.
fn serving_variant(m: DecodeMode) -> Variant {
    match m {
        DecodeMode::AnswerOnly => Variant::AnswerOnly,
        DecodeMode::ExplicitCot => Variant::ExplicitCot,
        DecodeMode::MlpHead => Variant::MlpHead,
        DecodeMode::LatentPrefill | DecodeMode::LatentIterative => Variant::Onevl,
    }
}

const ABLATIONS: [Variant; 4] = [Variant::NoVis, Variant::NoLang, Variant::NoStaging, Variant::FrozenLatent];

/// Scores each configured mode on the model trained for it, plus each
/// ablation, skipping variants without a checkpoint, and writes `report/`.
/// The OneVL model is required.
pub fn evaluate(cfg: &RunConfig, dir: &RunDir, opts: &EvalOptions) -> Result<Benchmark> {
    let prep = load_prepared(cfg, dir)?;
    let test: &[EncodedSample] = match cfg.eval.max_samples {
        Some(n) => &prep.test[..n.min(prep.test.len())],
        None => &prep.test,
    };
    let mut models: BTreeMap<Variant, ModelBundle> = BTreeMap::new();
    models.insert(Variant::Onevl, load_variant(cfg, dir, Variant::Onevl, opts.allow_config_mismatch)?);
    for v in Variant::ALL {
        if !models.contains_key(&v) && final_checkpoint(cfg, dir, v).exists() {
            models.insert(v, load_variant(cfg, dir, v, opts.allow_config_mismatch)?);
        }
    }
    let served: Vec<(DecodeMode, &ModelBundle)> = cfg
        .eval
        .modes
        .iter()
        .filter_map(|&m| models.get(&serving_variant(m)).map(|b| (m, b)))
        .collect();
    let mut entries: Vec<(String, &ModelBundle, DecodeMode)> = served.iter().map(|&(m, b)| (serving_variant(m).name().to_string(), b, m)).collect();
    for v in ABLATIONS {
        if let Some(b) = models.get(&v) {
            entries.push((v.name().to_string(), b, v.eval_mode()));
        }
    }
    let rows = run_benchmark(&prep.vocab, test, &entries)?;
    let latency = if opts.latency {
        let n = cfg.eval.latency_samples.min(test.len());
        Some(measure_latency(&served, &prep.vocab, &test[..n], cfg.eval.latency_runs, cfg.eval.latency_warmup)?)
    } else {
        None
    };
    let fidelity = if opts.fidelity {
        Some(explanation_fidelity(&models[&Variant::Onevl], &prep.vocab, &prep.codebook, test)?)
    } else {
        None
    };
    let mut loss_curves = BTreeMap::new();
    for &v in models.keys() {
        let p = dir.variant(v).join("report.jsonl");
        if !p.exists() {
            continue;
        }
        for line in read_jsonl::<ReportLine>(&p)? {
            if let ReportLine::Step(s) = line {
                loss_curves.entry(format!("{}/{}", v.name(), s.stage)).or_insert_with(Vec::new).push(s.losses.total);
            }
        }
    }
    let bench = Benchmark {
        config_hash: cfg.hash(),
        rows,
        latency,
        fidelity,
        loss_curves,
    };
    write_report(&dir.report(), &bench)?;
    Ok(bench)
}

/// Writes `cot.txt`, `future_0.ppm` and `future_1.ppm` for each test index.
pub fn explain(cfg: &RunConfig, dir: &RunDir, v: Variant, indices: &[usize], allow_mismatch: bool) -> Result<Vec<PathBuf>> {
    let prep = load_prepared(cfg, dir)?;
    let b = load_variant(cfg, dir, v, allow_mismatch)?;
    let mut written = Vec::new();
    for &i in indices {
        let s = prep
            .test
            .get(i)
            .ok_or_else(|| Error::Invalid(format!("test split has {} samples, no index {i}", prep.test.len())))?;
        let ex = explain_sample(&b, &prep.vocab, &prep.codebook, s)?;
        let out = dir.explain(v).join(format!("test-{i}"));
        std::fs::create_dir_all(&out).map_err(io_err(&out))?;
        let txt = out.join("cot.txt");
        std::fs::write(&txt, format!("{}\n", ex.cot_text)).map_err(io_err(&txt))?;
        written.push(txt);
        for (k, r) in ex.future_rasters.iter().enumerate() {
            let p = out.join(format!("future_{k}.ppm"));
            std::fs::write(&p, r.to_ppm(8)).map_err(io_err(&p))?;
            written.push(p);
        }
    }
    Ok(written)
}
