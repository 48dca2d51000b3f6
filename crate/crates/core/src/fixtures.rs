//! Tiny models and encoded samples shared by unit tests.

use crate::layout::{EncodedSample, Vocab};
use crate::model::{ModelBundle, ModelConfig};
use crate::world::{make_sample, Scenario};

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        d: 16,
        n_layers: 2,
        n_heads: 2,
        dec_layers: 1,
        codebook_size: 16,
        ..ModelConfig::default()
    }
}

/// Encoded samples with synthetic visual ids; no codebook involved.
pub fn samples(v: &Vocab, seeds: std::ops::Range<u64>) -> Vec<EncodedSample> {
    seeds
        .map(|seed| {
            let s = make_sample(seed, Scenario::ALL[seed as usize % Scenario::ALL.len()], 32, 32);
            let k = v.visual_count;
            let grid = |o: usize| -> Vec<usize> { (0..64).map(|i| v.visual_offset + (i * 3 + o + seed as usize) % k).collect() };
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
        .collect()
}

pub fn setup(n: u64) -> (ModelBundle, Vocab, Vec<EncodedSample>) {
    let cfg = tiny_config();
    let v = Vocab::new(cfg.codebook_size, cfg.latent_vis_count, cfg.latent_lang_count).unwrap();
    let s = samples(&v, 0..n);
    (ModelBundle::new(cfg).unwrap(), v, s)
}
