// Building blocks shared by the backbone and the auxiliary decoders.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::Result;

pub(crate) const INIT_STD: f64 = 0.02;

pub(crate) fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::matrix(rows, cols, data).expect("shape matches data")
}

pub(crate) fn ones(n: usize) -> Tensor {
    Tensor::matrix(1, n, vec![1.0; n]).expect("row vector")
}

pub(crate) fn zeros_row(n: usize) -> Tensor {
    Tensor::zeros(&[1, n])
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Norm {
    g: ParamId,
    b: ParamId,
}

impl Norm {
    pub(crate) fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            g: store.add(format!("{name}.g"), ones(d), false),
            b: store.add(format!("{name}.b"), zeros_row(d), false),
        }
    }

    pub(crate) fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.g);
        let bias = g.param(store, self.b);
        Ok(g.layer_norm(x, gain, bias)?)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub(crate) fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, din: usize, dout: usize, std: f64) -> Self {
        Self {
            w: store.add(format!("{name}.w"), normal(rng, din, dout, std), true),
            b: store.add(format!("{name}.b"), zeros_row(dout), false),
        }
    }

    pub(crate) fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        Ok(g.add_row_bias(y, b)?)
    }
}

/// Two linear layers with a GELU between them.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Mlp {
    l1: Linear,
    l2: Linear,
}

impl Mlp {
    pub(crate) fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, din: usize, hidden: usize, dout: usize, out_std: f64) -> Self {
        Self {
            l1: Linear::new(store, rng, &format!("{name}/fc1"), din, hidden, INIT_STD),
            l2: Linear::new(store, rng, &format!("{name}/fc2"), hidden, dout, out_std),
        }
    }

    pub(crate) fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.l1.apply(g, store, x)?;
        let h = g.gelu(h)?;
        self.l2.apply(g, store, h)
    }
}

#[derive(Clone, Copy, Debug)]
struct Block {
    ln1: Norm,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2: Norm,
    mlp: Mlp,
}

/// Keys and values of every processed position, per layer.
#[derive(Clone, Debug)]
pub struct KvCache {
    keys: Vec<Tensor>,
    values: Vec<Tensor>,
    len: usize,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Pre-LN causal transformer layers followed by a final layer norm.
#[derive(Clone, Debug)]
pub(crate) struct Stack {
    blocks: Vec<Block>,
    ln_f: Norm,
    heads: usize,
}

impl Stack {
    pub(crate) fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d: usize, layers: usize, heads: usize) -> Self {
        let out_std = INIT_STD / (2.0 * layers as f64).sqrt();
        let blocks = (0..layers)
            .map(|i| {
                let p = format!("{prefix}/l{i}");
                let ln1 = Norm::new(store, &format!("{p}/ln1"), d);
                let wq = store.add(format!("{p}/attn.wq"), normal(rng, d, d, INIT_STD), true);
                let wk = store.add(format!("{p}/attn.wk"), normal(rng, d, d, INIT_STD), true);
                let wv = store.add(format!("{p}/attn.wv"), normal(rng, d, d, INIT_STD), true);
                let wo = store.add(format!("{p}/attn.wo"), normal(rng, d, d, out_std), true);
                let ln2 = Norm::new(store, &format!("{p}/ln2"), d);
                let mlp = Mlp::new(store, rng, &format!("{p}/mlp"), d, 4 * d, d, out_std);
                Block { ln1, wq, wk, wv, wo, ln2, mlp }
            })
            .collect();
        let ln_f = Norm::new(store, &format!("{prefix}/ln_f"), d);
        Self { blocks, ln_f, heads }
    }

    pub(crate) fn empty_cache(&self) -> KvCache {
        KvCache {
            keys: vec![Tensor::zeros(&[0, 0]); self.blocks.len()],
            values: vec![Tensor::zeros(&[0, 0]); self.blocks.len()],
            len: 0,
        }
    }

    /// Runs `x` (positions already added) through every layer. With a cache,
    /// `x` continues the cached positions and the cache is extended.
    pub(crate) fn forward(&self, g: &mut Graph, store: &ParamStore, mut x: Var, mut cache: Option<&mut KvCache>) -> Result<Var> {
        let past = cache.as_ref().map_or(0, |c| c.len);
        let n = g.shape(x)[0];
        for (li, b) in self.blocks.iter().enumerate() {
            let h = b.ln1.apply(g, store, x)?;
            let wq = g.param(store, b.wq);
            let wk = g.param(store, b.wk);
            let wv = g.param(store, b.wv);
            let q = g.matmul(h, wq)?;
            let mut k = g.matmul(h, wk)?;
            let mut v = g.matmul(h, wv)?;
            if let Some(c) = cache.as_deref_mut() {
                if past > 0 {
                    let kc = g.constant(c.keys[li].clone())?;
                    let vc = g.constant(c.values[li].clone())?;
                    k = g.concat_rows(&[kc, k])?;
                    v = g.concat_rows(&[vc, v])?;
                }
                c.keys[li] = g.value(k).clone();
                c.values[li] = g.value(v).clone();
            }
            let a = g.attention(q, k, v, self.heads, past)?;
            let wo = g.param(store, b.wo);
            let a = g.matmul(a, wo)?;
            x = g.add(x, a)?;
            let h = b.ln2.apply(g, store, x)?;
            let m = b.mlp.apply(g, store, h)?;
            x = g.add(x, m)?;
        }
        if let Some(c) = cache {
            c.len += n;
        }
        self.ln_f.apply(g, store, x)
    }
}

/// Index of the largest value among `allowed`; ties go to the lowest index.
pub(crate) fn argmax_in(row: &[f64], allowed: std::ops::Range<usize>) -> usize {
    let mut best = allowed.start;
    for i in allowed {
        if row[i] > row[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn seeded(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}
