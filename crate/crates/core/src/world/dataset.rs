use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    ego_state_text, generate_scene, rasterize, render_cot, roll_forward, MetaAction, Raster,
    Scenario, FUTURE_HORIZONS, N_WAYPOINTS, WAYPOINT_DT,
};
use crate::error::{io_err, Error, Result};
use crate::jsonl::{read_jsonl, write_jsonl};

/// One training record. Trajectory values are millimeter fixed-point so the
/// in-memory record and its persisted form are identical.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub seed: u64,
    pub scenario: Scenario,
    pub ego_state_text: String,
    pub frame_now: Raster,
    pub frame_future: [Raster; 2],
    pub trajectory: Vec<[f64; 2]>,
    pub cot_text: String,
    pub meta_action: MetaAction,
}

fn mm(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0 + 0.0
}

pub fn make_sample(seed: u64, scenario: Scenario, h: usize, w: usize) -> Sample {
    let scene = generate_scene(seed, scenario);
    let steps = roll_forward(&scene, WAYPOINT_DT, N_WAYPOINTS);
    let [x0, y0] = scene.ego.pos;
    let trajectory = steps
        .iter()
        .map(|s| [mm(s.ego.pos[0] - x0), mm(s.ego.pos[1] - y0)])
        .collect();
    let future = FUTURE_HORIZONS.map(|t| {
        let k = (t / WAYPOINT_DT).round() as usize;
        rasterize(&steps[k - 1], h, w)
    });
    let (cot_text, meta_action) = render_cot(&scene, scene.plan.action);
    Sample {
        seed,
        scenario,
        ego_state_text: ego_state_text(&scene),
        frame_now: rasterize(&scene, h, w),
        frame_future: future,
        trajectory,
        cot_text,
        meta_action,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatio {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatio {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates `n` samples with scenarios interleaved, so every split holds each
/// scenario within one sample of an exact share. Seeds are distinct per index.
pub fn build_dataset(n: usize, seed: u64, ratio: SplitRatio, h: usize, w: usize) -> Result<Dataset> {
    if n < 10 {
        return Err(Error::Invalid(format!("dataset needs at least 10 samples, got {n}")));
    }
    let total = ratio.train + ratio.val + ratio.test;
    if !(total > 0.0) || ratio.train < 0.0 || ratio.val < 0.0 || ratio.test < 0.0 {
        return Err(Error::Invalid("split ratios must be non-negative".into()));
    }
    let base = splitmix(seed);
    let samples: Vec<Sample> = (0..n)
        .into_par_iter()
        .map(|i| {
            let scenario = Scenario::ALL[i % Scenario::ALL.len()];
            make_sample(base.wrapping_add(i as u64), scenario, h, w)
        })
        .collect();
    let n_train = (n as f64 * ratio.train / total).round() as usize;
    let n_val = ((n as f64 * ratio.val / total).round() as usize).min(n - n_train);
    let mut it = samples.into_iter();
    let train = it.by_ref().take(n_train).collect();
    let val = it.by_ref().take(n_val).collect();
    let test = it.collect();
    Ok(Dataset { train, val, test })
}

pub fn write_samples(path: &Path, samples: &[Sample]) -> Result<()> {
    write_jsonl(path, samples)
}

pub fn read_samples(path: &Path) -> Result<Vec<Sample>> {
    read_jsonl(path)
}

impl Dataset {
    pub const FILES: [&'static str; 3] = ["train.jsonl", "val.jsonl", "test.jsonl"];

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        for (name, split) in Self::FILES.iter().zip([&self.train, &self.val, &self.test]) {
            write_samples(&dir.join(name), split)?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let mut parts = Vec::new();
        for name in Self::FILES {
            let p = dir.join(name);
            if !p.exists() {
                return Err(Error::Missing {
                    artifact: p,
                    hint: "onevl build-data",
                });
            }
            parts.push(read_samples(&p)?);
        }
        let test = parts.pop().unwrap();
        let val = parts.pop().unwrap();
        let train = parts.pop().unwrap();
        Ok(Self { train, val, test })
    }

    pub fn all(&self) -> impl Iterator<Item = &Sample> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    #[test]
    fn split_sizes() {
        let d = build_dataset(100, 1, SplitRatio::default(), 32, 32).unwrap();
        assert_eq!((d.train.len(), d.val.len(), d.test.len()), (80, 10, 10));
        assert!(build_dataset(9, 1, SplitRatio::default(), 32, 32).is_err());
    }

    #[test]
    fn splits_are_disjoint_and_stratified() {
        let d = build_dataset(200, 3, SplitRatio::default(), 32, 32).unwrap();
        let train: HashSet<u64> = d.train.iter().map(|s| s.seed).collect();
        assert!(d.test.iter().all(|s| !train.contains(&s.seed)));
        assert!(d.val.iter().all(|s| !train.contains(&s.seed)));
        for sc in Scenario::ALL {
            let c = d.test.iter().filter(|s| s.scenario == sc).count();
            assert!((4..=6).contains(&c));
        }
    }

    #[test]
    fn files_are_byte_identical_across_runs() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        build_dataset(40, 9, SplitRatio::default(), 32, 32).unwrap().write(a.path()).unwrap();
        build_dataset(40, 9, SplitRatio::default(), 32, 32).unwrap().write(b.path()).unwrap();
        for f in Dataset::FILES {
            let x = std::fs::read(a.path().join(f)).unwrap();
            let y = std::fs::read(b.path().join(f)).unwrap();
            assert_eq!(x, y);
        }
        let back = Dataset::read(a.path()).unwrap();
        assert_eq!(back, build_dataset(40, 9, SplitRatio::default(), 32, 32).unwrap());
    }

    #[test]
    fn future_frames_match_rolled_scenes() {
        let s = make_sample(21, Scenario::CutIn, 32, 32);
        let scene = generate_scene(21, Scenario::CutIn);
        let half = &roll_forward(&scene, 0.5, 1)[0];
        assert_eq!(s.frame_future[0], rasterize(half, 32, 32));
        let one = &roll_forward(&scene, 0.5, 2)[1];
        assert_eq!(s.frame_future[1], rasterize(one, 32, 32));
        assert_ne!(s.trajectory[0], [0.0, 0.0]);
        assert_eq!(s.trajectory.len(), 8);
    }
}
