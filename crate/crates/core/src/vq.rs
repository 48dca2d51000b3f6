//! Discrete visual codec: k-means over one-hot raster patches.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{read_checkpoint, write_checkpoint, Checkpoint, Tensor};
use crate::world::{Raster, N_CLASSES};

static ENCODE_CALLS: AtomicU64 = AtomicU64::new(0);

/// Number of [`encode`] calls made by this process so far.
pub fn encode_calls() -> u64 {
    ENCODE_CALLS.load(Ordering::SeqCst)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub k: usize,
    pub patch: usize,
    pub n_classes: usize,
    /// k × dim, row-major.
    pub codes: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FrameTag {
    Now,
    Future(u8),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct VisualTokenGrid {
    pub h: usize,
    pub w: usize,
    pub ids: Vec<usize>,
    pub tag: FrameTag,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Weighted mean squared quantization error after each Lloyd iteration.
    pub lloyd_errors: Vec<f64>,
    /// Error of the final (snapped) codebook over the corpus.
    pub final_error: f64,
    pub distinct_patches: usize,
}

impl Codebook {
    pub fn dim(&self) -> usize {
        self.patch * self.patch * self.n_classes
    }

    pub fn code(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.codes[i * d..(i + 1) * d]
    }

    /// Index of the code nearest to a patch of cell classes; ties go to the lowest index.
    pub fn nearest(&self, cells: &[u8]) -> usize {
        // For a one-hot feature f, |f − c|² = |c|² + |f|² − 2·Σ c[cell, class(cell)].
        let d = self.dim();
        let nc = self.n_classes;
        let mut best = (f64::INFINITY, 0);
        for i in 0..self.k {
            let c = &self.codes[i * d..(i + 1) * d];
            let norm: f64 = c.iter().map(|x| x * x).sum();
            let hit: f64 = cells.iter().enumerate().map(|(j, &cls)| c[j * nc + cls as usize]).sum();
            let dist = norm + cells.len() as f64 - 2.0 * hit;
            if dist < best.0 {
                best = (dist, i);
            }
        }
        best.1
    }

    /// Cell classes of code `i`, taking the argmax of each one-hot block
    /// (lowest class on ties).
    pub fn pattern(&self, i: usize) -> Vec<u8> {
        argmax_cells(self.code(i), self.n_classes)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.meta.insert("vq.patch".into(), self.patch.to_string());
        c.meta.insert("vq.n_classes".into(), self.n_classes.to_string());
        c.insert(
            "vq/codes",
            Tensor::matrix(self.k, self.dim(), self.codes.clone()).expect("codebook shape"),
        );
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let meta = |k: &str| -> Result<usize> {
            c.meta
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Codebook(format!("checkpoint lacks {k}")))
        };
        let patch = meta("vq.patch")?;
        let n_classes = meta("vq.n_classes")?;
        let t = c
            .get("vq/codes")
            .ok_or_else(|| Error::Codebook("checkpoint lacks vq/codes".into()))?;
        if t.shape().len() != 2 || t.shape()[1] != patch * patch * n_classes {
            return Err(Error::Codebook(format!("bad code shape {:?}", t.shape())));
        }
        Ok(Self {
            k: t.shape()[0],
            patch,
            n_classes,
            codes: t.data().to_vec(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(write_checkpoint(path, &self.to_checkpoint())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing {
                artifact: path.to_path_buf(),
                hint: "onevl train-vq",
            });
        }
        Self::from_checkpoint(&read_checkpoint(path)?)
    }
}

fn argmax_cells(code: &[f64], nc: usize) -> Vec<u8> {
    code.chunks(nc)
        .map(|b| {
            let mut best = 0;
            for (j, &v) in b.iter().enumerate() {
                if v > b[best] {
                    best = j;
                }
            }
            best as u8
        })
        .collect()
}

fn one_hot(cells: &[u8], nc: usize) -> Vec<f64> {
    let mut f = vec![0.0; cells.len() * nc];
    for (j, &c) in cells.iter().enumerate() {
        f[j * nc + c as usize] = 1.0;
    }
    f
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Patches of a raster in row-major patch order; each patch row-major inside.
pub fn patches(r: &Raster, patch: usize) -> Result<Vec<Vec<u8>>> {
    if r.h % patch != 0 || r.w % patch != 0 {
        return Err(Error::Codebook(format!(
            "raster {}×{} not divisible by patch {patch}",
            r.h, r.w
        )));
    }
    let mut out = Vec::with_capacity((r.h / patch) * (r.w / patch));
    for pr in 0..r.h / patch {
        for pc in 0..r.w / patch {
            let mut cells = Vec::with_capacity(patch * patch);
            for i in 0..patch {
                for j in 0..patch {
                    cells.push(r.get(pr * patch + i, pc * patch + j));
                }
            }
            out.push(cells);
        }
    }
    Ok(out)
}

/// Weighted Lloyd's k-means over the distinct patches of `rasters`, seeded by
/// k-means++. Codes are finally snapped to one-hot patterns (cellwise
/// majority of each cluster) with duplicates replaced by unused corpus
/// patterns, so every code decodes to itself.
pub fn train_codebook(
    rasters: &[Raster],
    k: usize,
    patch: usize,
    iters: usize,
    seed: u64,
) -> Result<(Codebook, TrainReport)> {
    let nc = N_CLASSES;
    let mut counts: BTreeMap<Vec<u8>, usize> = BTreeMap::new();
    for r in rasters {
        for p in patches(r, patch)? {
            *counts.entry(p).or_insert(0) += 1;
        }
    }
    if counts.len() < k {
        return Err(Error::Codebook(format!(
            "only {} distinct patches for {k} codes",
            counts.len()
        )));
    }
    let pats: Vec<Vec<u8>> = counts.keys().cloned().collect();
    let weights: Vec<f64> = counts.values().map(|&c| c as f64).collect();
    let feats: Vec<Vec<f64>> = pats.iter().map(|p| one_hot(p, nc)).collect();
    let dim = patch * patch * nc;
    let total_w: f64 = weights.iter().sum();

    // k-means++ seeding over distinct patterns, weighted by frequency.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    let first = pick(&mut rng, &weights);
    centers.push(feats[first].clone());
    let mut d2: Vec<f64> = feats.iter().map(|f| sq_dist(f, &centers[0])).collect();
    while centers.len() < k {
        let score: Vec<f64> = d2.iter().zip(&weights).map(|(d, w)| d * w).collect();
        let i = pick(&mut rng, &score);
        centers.push(feats[i].clone());
        let c = centers.last().unwrap();
        for (dj, f) in d2.iter_mut().zip(&feats) {
            *dj = dj.min(sq_dist(f, c));
        }
    }

    let assign = |centers: &[Vec<f64>]| -> (Vec<usize>, f64) {
        let mut err = 0.0;
        let a = feats
            .iter()
            .zip(&weights)
            .map(|(f, w)| {
                let mut best = (f64::INFINITY, 0);
                for (i, c) in centers.iter().enumerate() {
                    let d = sq_dist(f, c);
                    if d < best.0 {
                        best = (d, i);
                    }
                }
                err += w * best.0;
                best.1
            })
            .collect();
        (a, err / total_w)
    };

    let mut lloyd_errors = Vec::new();
    let (mut labels, _) = assign(&centers);
    for _ in 0..iters {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut mass = vec![0.0; k];
        for ((f, &w), &l) in feats.iter().zip(&weights).zip(&labels) {
            mass[l] += w;
            for (s, x) in sums[l].iter_mut().zip(f) {
                *s += w * x;
            }
        }
        for i in 0..k {
            if mass[i] > 0.0 {
                centers[i] = sums[i].iter().map(|s| s / mass[i]).collect();
            }
        }
        let (l, err) = assign(&centers);
        lloyd_errors.push(err);
        let done = l == labels;
        labels = l;
        if done {
            break;
        }
    }

    // Snap to distinct one-hot patterns.
    let mut mass = vec![0.0; k];
    for (&l, &w) in labels.iter().zip(&weights) {
        mass[l] += w;
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| mass[b].partial_cmp(&mass[a]).unwrap().then(a.cmp(&b)));
    let mut used: HashSet<Vec<u8>> = HashSet::new();
    let mut snapped: Vec<Option<Vec<u8>>> = vec![None; k];
    for &i in &order {
        let p = argmax_cells(&centers[i], nc);
        if used.insert(p.clone()) {
            snapped[i] = Some(p);
        }
    }
    let mut spare = {
        let mut by_weight: Vec<usize> = (0..pats.len()).collect();
        by_weight.sort_by(|&a, &b| weights[b].partial_cmp(&weights[a]).unwrap().then(a.cmp(&b)));
        by_weight.into_iter()
    };
    for slot in snapped.iter_mut().filter(|s| s.is_none()) {
        for j in spare.by_ref() {
            if used.insert(pats[j].clone()) {
                *slot = Some(pats[j].clone());
                break;
            }
        }
    }
    let mut codes = Vec::with_capacity(k * dim);
    for p in snapped {
        codes.extend(one_hot(&p.expect("enough distinct patterns"), nc));
    }
    let cb = Codebook {
        k,
        patch,
        n_classes: nc,
        codes,
    };
    let final_error = pats
        .iter()
        .zip(&feats)
        .zip(&weights)
        .map(|((p, f), w)| w * sq_dist(f, cb.code(cb.nearest(p))))
        .sum::<f64>()
        / total_w;
    Ok((
        cb,
        TrainReport {
            lloyd_errors,
            final_error,
            distinct_patches: pats.len(),
        },
    ))
}

fn pick(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.gen_range(0.0..total);
    for (i, &w) in weights.iter().enumerate() {
        if x < w {
            return i;
        }
        x -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

pub fn encode(r: &Raster, cb: &Codebook, tag: FrameTag) -> Result<VisualTokenGrid> {
    ENCODE_CALLS.fetch_add(1, Ordering::SeqCst);
    let ids = patches(r, cb.patch)?.iter().map(|p| cb.nearest(p)).collect();
    Ok(VisualTokenGrid {
        h: r.h / cb.patch,
        w: r.w / cb.patch,
        ids,
        tag,
    })
}

pub fn decode(g: &VisualTokenGrid, cb: &Codebook) -> Result<Raster> {
    let p = cb.patch;
    let mut out = Raster::new(g.h * p, g.w * p);
    for (n, &id) in g.ids.iter().enumerate() {
        if id >= cb.k {
            return Err(Error::TokenRange {
                id,
                range: "the codebook",
            });
        }
        let cells = cb.pattern(id);
        let (pr, pc) = (n / g.w, n % g.w);
        for i in 0..p {
            for j in 0..p {
                out.cells[(pr * p + i) * out.w + pc * p + j] = cells[i * p + j];
            }
        }
    }
    Ok(out)
}

pub fn to_vocab_ids(g: &VisualTokenGrid, base: usize) -> Vec<usize> {
    g.ids.iter().map(|&i| base + i).collect()
}

pub fn from_vocab_ids(
    ids: &[usize],
    base: usize,
    k: usize,
    h: usize,
    w: usize,
    tag: FrameTag,
) -> Result<VisualTokenGrid> {
    if ids.len() != h * w {
        return Err(Error::Codebook(format!("{} ids for a {h}×{w} grid", ids.len())));
    }
    let grid = ids
        .iter()
        .map(|&id| {
            if id < base || id >= base + k {
                Err(Error::TokenRange {
                    id,
                    range: "the visual vocabulary",
                })
            } else {
                Ok(id - base)
            }
        })
        .collect::<Result<_>>()?;
    Ok(VisualTokenGrid { h, w, ids: grid, tag })
}
