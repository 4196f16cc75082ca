//! Minimal neural-network substrate: dense layers, a small pre-LN
//! transformer, Adam, and flat parameter access for checkpointing,
//! hashing, and finite-difference gradient checks.
//!
//! Layers are stateless across calls: forward passes return explicit caches
//! and backward passes accumulate into per-layer gradient buffers. Hidden
//! activations are `tanh` so every loss is smooth, which keeps central
//! finite differences meaningful.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Flat access to parameters and gradients in a stable order.
pub trait Parameterized {
    fn visit_params(&self, f: &mut dyn FnMut(&[f64]));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [f64]));
    fn visit_grads(&self, f: &mut dyn FnMut(&[f64]));
    fn visit_grads_mut(&mut self, f: &mut dyn FnMut(&mut [f64]));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.len());
        n
    }

    fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit_params(&mut |p| out.extend_from_slice(p));
        out
    }

    fn set_params_flat(&mut self, src: &[f64]) {
        let mut offset = 0;
        self.visit_params_mut(&mut |p| {
            p.copy_from_slice(&src[offset..offset + p.len()]);
            offset += p.len();
        });
        assert_eq!(offset, src.len(), "parameter vector length mismatch");
    }

    fn grads_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit_grads(&mut |g| out.extend_from_slice(g));
        out
    }

    fn zero_grads(&mut self) {
        self.visit_grads_mut(&mut |g| g.fill(0.0));
    }

    /// SHA-256 of the little-endian parameter bytes; used by freeze checks.
    fn param_hash(&self) -> String {
        let mut hasher = Sha256::new();
        self.visit_params(&mut |p| {
            for x in p {
                hasher.update(x.to_le_bytes());
            }
        });
        hex_digest(hasher)
    }
}

/// Finalize a SHA-256 hasher to lowercase hex.
pub fn hex_digest(hasher: Sha256) -> String {
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn slice1(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("contiguous")
}

fn slice1_mut(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("contiguous")
}

fn slice2(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("contiguous")
}

fn slice2_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("contiguous")
}

/// Dense layer `y = x W^T + b`. Weights are (out, in).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    #[serde(skip)]
    pub gw: Array2<f64>,
    #[serde(skip)]
    pub gb: Array1<f64>,
}

impl Linear {
    pub fn new(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = (6.0 / (input + output) as f64).sqrt();
        let w = Array2::from_shape_fn((output, input), |_| rng.random_range(-scale..scale));
        Linear {
            w,
            b: Array1::zeros(output),
            gw: Array2::zeros((output, input)),
            gb: Array1::zeros(output),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.nrows()
    }

    /// `x` is (batch, in); returns (batch, out).
    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w.t());
        y += &self.b;
        y
    }

    /// Accumulates parameter grads; returns dL/dx.
    pub fn backward(&mut self, x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
        self.gw += &dy.t().dot(x);
        self.gb += &dy.sum_axis(Axis(0));
        dy.dot(&self.w)
    }

    /// Ensure gradient buffers match weight shapes (needed after deserialize).
    fn ensure_grads(&mut self) {
        if self.gw.dim() != self.w.dim() {
            self.gw = Array2::zeros(self.w.dim());
        }
        if self.gb.len() != self.b.len() {
            self.gb = Array1::zeros(self.b.len());
        }
    }
}

impl Parameterized for Linear {
    fn visit_params(&self, f: &mut dyn FnMut(&[f64])) {
        f(slice2(&self.w));
        f(slice1(&self.b));
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(slice2_mut(&mut self.w));
        f(slice1_mut(&mut self.b));
    }
    fn visit_grads(&self, f: &mut dyn FnMut(&[f64])) {
        f(slice2(&self.gw));
        f(slice1(&self.gb));
    }
    fn visit_grads_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(slice2_mut(&mut self.gw));
        f(slice1_mut(&mut self.gb));
    }
}

/// Multi-layer perceptron with tanh hidden activations and a linear head.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

/// Per-call activations needed by `Mlp::backward`.
pub struct MlpCache {
    /// Input to each layer.
    xs: Vec<Array2<f64>>,
    /// tanh outputs of each hidden layer.
    hs: Vec<Array2<f64>>,
}

impl Mlp {
    /// `dims = [input, hidden.., output]`.
    pub fn new(dims: &[usize], rng: &mut ChaCha8Rng) -> Self {
        assert!(dims.len() >= 2, "Mlp needs at least input and output dims");
        let layers = dims.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect();
        Mlp { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().unwrap().in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn infer(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h);
            if i < last {
                h.mapv_inplace(f64::tanh);
            }
        }
        h
    }

    /// Convenience for single vectors.
    pub fn infer_vec(&self, x: &Array1<f64>) -> Array1<f64> {
        let x2 = x.view().insert_axis(Axis(0)).to_owned();
        self.infer(&x2).index_axis(Axis(0), 0).to_owned()
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, MlpCache) {
        let mut cache = MlpCache { xs: Vec::new(), hs: Vec::new() };
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            cache.xs.push(h.clone());
            h = layer.forward(&h);
            if i < last {
                h.mapv_inplace(f64::tanh);
                cache.hs.push(h.clone());
            }
        }
        (h, cache)
    }

    pub fn backward(&mut self, cache: &MlpCache, dy: &Array2<f64>) -> Array2<f64> {
        let mut grad = dy.clone();
        for i in (0..self.layers.len()).rev() {
            if i < self.layers.len() - 1 {
                // through tanh: dz = dh * (1 - h^2)
                grad = &grad * &cache.hs[i].mapv(|h| 1.0 - h * h);
            }
            grad = self.layers[i].backward(&cache.xs[i], &grad);
        }
        grad
    }

    pub fn ensure_grads(&mut self) {
        for l in &mut self.layers {
            l.ensure_grads();
        }
    }
}

impl Parameterized for Mlp {
    fn visit_params(&self, f: &mut dyn FnMut(&[f64])) {
        for l in &self.layers {
            l.visit_params(f);
        }
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        for l in &mut self.layers {
            l.visit_params_mut(f);
        }
    }
    fn visit_grads(&self, f: &mut dyn FnMut(&[f64])) {
        for l in &self.layers {
            l.visit_grads(f);
        }
    }
    fn visit_grads_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        for l in &mut self.layers {
            l.visit_grads_mut(f);
        }
    }
}

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    #[serde(skip)]
    pub ggamma: Array1<f64>,
    #[serde(skip)]
    pub gbeta: Array1<f64>,
}

pub struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            ggamma: Array1::zeros(dim),
            gbeta: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LnCache) {
        let d = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut rstd = Array1::zeros(x.nrows());
        for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.dot(&row) / d;
            *r = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| v * *r);
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, LnCache { xhat, rstd })
    }

    pub fn infer(&self, x: &Array2<f64>) -> Array2<f64> {
        self.forward(x).0
    }

    pub fn backward(&mut self, cache: &LnCache, dy: &Array2<f64>) -> Array2<f64> {
        let d = dy.ncols() as f64;
        self.gbeta += &dy.sum_axis(Axis(0));
        self.ggamma += &(dy * &cache.xhat).sum_axis(Axis(0));
        let g = dy * &self.gamma;
        let mut dx = Array2::zeros(dy.raw_dim());
        for i in 0..dy.nrows() {
            let grow = g.row(i);
            let xh = cache.xhat.row(i);
            let mg = grow.sum() / d;
            let mgx = grow.dot(&xh) / d;
            let rstd = cache.rstd[i];
            for j in 0..dy.ncols() {
                dx[[i, j]] = rstd * (grow[j] - mg - xh[j] * mgx);
            }
        }
        dx
    }

    fn ensure_grads(&mut self) {
        if self.ggamma.len() != self.gamma.len() {
            self.ggamma = Array1::zeros(self.gamma.len());
        }
        if self.gbeta.len() != self.beta.len() {
            self.gbeta = Array1::zeros(self.beta.len());
        }
    }
}

impl Parameterized for LayerNorm {
    fn visit_params(&self, f: &mut dyn FnMut(&[f64])) {
        f(slice1(&self.gamma));
        f(slice1(&self.beta));
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(slice1_mut(&mut self.gamma));
        f(slice1_mut(&mut self.beta));
    }
    fn visit_grads(&self, f: &mut dyn FnMut(&[f64])) {
        f(slice1(&self.ggamma));
        f(slice1(&self.gbeta));
    }
    fn visit_grads_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(slice1_mut(&mut self.ggamma));
        f(slice1_mut(&mut self.gbeta));
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformerLayer {
    ln1: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln2: LayerNorm,
    w1: Linear,
    w2: Linear,
    heads: usize,
}

pub struct TransformerLayerCache {
    x_in: Array2<f64>,
    a: Array2<f64>,
    ln1: LnCache,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    o: Array2<f64>,
    x1: Array2<f64>,
    b: Array2<f64>,
    ln2: LnCache,
    h1: Array2<f64>,
}

impl TransformerLayer {
    fn new(dim: usize, heads: usize, ffn_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        assert_eq!(dim % heads, 0, "dim must be divisible by heads");
        TransformerLayer {
            ln1: LayerNorm::new(dim),
            wq: Linear::new(dim, dim, rng),
            wk: Linear::new(dim, dim, rng),
            wv: Linear::new(dim, dim, rng),
            wo: Linear::new(dim, dim, rng),
            ln2: LayerNorm::new(dim),
            w1: Linear::new(dim, ffn_dim, rng),
            w2: Linear::new(ffn_dim, dim, rng),
            heads,
        }
    }

    fn attention(&self, a: &Array2<f64>) -> (Array2<f64>, Array2<f64>, Array2<f64>, Vec<Array2<f64>>, Array2<f64>) {
        let q = self.wq.forward(a);
        let k = self.wk.forward(a);
        let v = self.wv.forward(a);
        let dh = q.ncols() / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut o = Array2::zeros(q.raw_dim());
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let mut scores = qh.dot(&kh.t());
            scores *= scale;
            let p = softmax_rows(&scores);
            let oh = p.dot(&vh);
            o.slice_mut(cols).assign(&oh);
            probs.push(p);
        }
        (q, k, v, probs, o)
    }

    fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, TransformerLayerCache) {
        let (a, ln1) = self.ln1.forward(x);
        let (q, k, v, probs, o) = self.attention(&a);
        let m = self.wo.forward(&o);
        let x1 = x + &m;
        let (b, ln2) = self.ln2.forward(&x1);
        let mut h1 = self.w1.forward(&b);
        h1.mapv_inplace(f64::tanh);
        let ffn = self.w2.forward(&h1);
        let x2 = &x1 + &ffn;
        let cache =
            TransformerLayerCache { x_in: x.clone(), a, ln1, q, k, v, probs, o, x1, b, ln2, h1 };
        (x2, cache)
    }

    fn infer(&self, x: &Array2<f64>) -> Array2<f64> {
        let a = self.ln1.infer(x);
        let (_, _, _, _, o) = self.attention(&a);
        let x1 = x + &self.wo.forward(&o);
        let b = self.ln2.infer(&x1);
        let mut h1 = self.w1.forward(&b);
        h1.mapv_inplace(f64::tanh);
        &x1 + &self.w2.forward(&h1)
    }

    fn backward(&mut self, cache: &TransformerLayerCache, dx2: &Array2<f64>) -> Array2<f64> {
        // FFN branch
        let dffn = dx2;
        let dh1_post = self.w2.backward(&cache.h1, dffn);
        let dh1 = &dh1_post * &cache.h1.mapv(|h| 1.0 - h * h);
        let db = self.w1.backward(&cache.b, &dh1);
        let mut dx1 = dx2.clone();
        dx1 += &self.ln2.backward(&cache.ln2, &db);

        // Attention branch
        let dm = &dx1;
        let do_ = self.wo.backward(&cache.o, dm);
        let dh = cache.q.ncols() / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let doh = do_.slice(cols);
            let p = &cache.probs[h];
            let vh = cache.v.slice(cols);
            let qh = cache.q.slice(cols);
            let kh = cache.k.slice(cols);
            let dp = doh.dot(&vh.t());
            let dvh = p.t().dot(&doh);
            // softmax rows backward
            let mut dscores = Array2::zeros(p.raw_dim());
            for i in 0..p.nrows() {
                let prow = p.row(i);
                let dprow = dp.row(i);
                let dot = prow.dot(&dprow);
                for j in 0..p.ncols() {
                    dscores[[i, j]] = prow[j] * (dprow[j] - dot);
                }
            }
            dscores *= scale;
            dq.slice_mut(cols).assign(&dscores.dot(&kh));
            dk.slice_mut(cols).assign(&dscores.t().dot(&qh));
            dv.slice_mut(cols).assign(&dvh);
        }
        let mut da = self.wq.backward(&cache.a, &dq);
        da += &self.wk.backward(&cache.a, &dk);
        da += &self.wv.backward(&cache.a, &dv);
        let mut dx = dx1.clone();
        dx += &self.ln1.backward(&cache.ln1, &da);
        dx
    }

    fn ensure_grads(&mut self) {
        self.ln1.ensure_grads();
        self.wq.ensure_grads();
        self.wk.ensure_grads();
        self.wv.ensure_grads();
        self.wo.ensure_grads();
        self.ln2.ensure_grads();
        self.w1.ensure_grads();
        self.w2.ensure_grads();
    }
}

impl Parameterized for TransformerLayer {
    fn visit_params(&self, f: &mut dyn FnMut(&[f64])) {
        self.ln1.visit_params(f);
        self.wq.visit_params(f);
        self.wk.visit_params(f);
        self.wv.visit_params(f);
        self.wo.visit_params(f);
        self.ln2.visit_params(f);
        self.w1.visit_params(f);
        self.w2.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.ln1.visit_params_mut(f);
        self.wq.visit_params_mut(f);
        self.wk.visit_params_mut(f);
        self.wv.visit_params_mut(f);
        self.wo.visit_params_mut(f);
        self.ln2.visit_params_mut(f);
        self.w1.visit_params_mut(f);
        self.w2.visit_params_mut(f);
    }
    fn visit_grads(&self, f: &mut dyn FnMut(&[f64])) {
        self.ln1.visit_grads(f);
        self.wq.visit_grads(f);
        self.wk.visit_grads(f);
        self.wv.visit_grads(f);
        self.wo.visit_grads(f);
        self.ln2.visit_grads(f);
        self.w1.visit_grads(f);
        self.w2.visit_grads(f);
    }
    fn visit_grads_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.ln1.visit_grads_mut(f);
        self.wq.visit_grads_mut(f);
        self.wk.visit_grads_mut(f);
        self.wv.visit_grads_mut(f);
        self.wo.visit_grads_mut(f);
        self.ln2.visit_grads_mut(f);
        self.w1.visit_grads_mut(f);
        self.w2.visit_grads_mut(f);
    }
}

/// Small pre-LN transformer over a fixed-length token sequence with learned
/// position embeddings. Output is the first token's final representation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusionTransformer {
    pub pos: Array2<f64>,
    #[serde(skip)]
    pub gpos: Array2<f64>,
    layers: Vec<TransformerLayer>,
    ln_f: LayerNorm,
}

pub struct FusionCache {
    layer_caches: Vec<TransformerLayerCache>,
    ln_f: LnCache,
}

impl FusionTransformer {
    pub fn new(
        seq_len: usize,
        dim: usize,
        heads: usize,
        layers: usize,
        ffn_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let pos = Array2::from_shape_fn((seq_len, dim), |_| rng.random_range(-0.02..0.02));
        FusionTransformer {
            gpos: Array2::zeros(pos.raw_dim()),
            pos,
            layers: (0..layers).map(|_| TransformerLayer::new(dim, heads, ffn_dim, rng)).collect(),
            ln_f: LayerNorm::new(dim),
        }
    }

    pub fn seq_len(&self) -> usize {
        self.pos.nrows()
    }

    pub fn dim(&self) -> usize {
        self.pos.ncols()
    }

    pub fn infer(&self, tokens: &Array2<f64>) -> Array1<f64> {
        let mut x = tokens + &self.pos;
        for layer in &self.layers {
            x = layer.infer(&x);
        }
        let y = self.ln_f.infer(&x);
        y.index_axis(Axis(0), 0).to_owned()
    }

    pub fn forward(&self, tokens: &Array2<f64>) -> (Array1<f64>, FusionCache) {
        let mut x = tokens + &self.pos;
        let mut layer_caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, cache) = layer.forward(&x);
            layer_caches.push(cache);
            x = next;
        }
        let (y, ln_f) = self.ln_f.forward(&x);
        (y.index_axis(Axis(0), 0).to_owned(), FusionCache { layer_caches, ln_f })
    }

    /// Backward from the gradient of the first-token output.
    pub fn backward(&mut self, cache: &FusionCache, d_out: &Array1<f64>) -> Array2<f64> {
        let mut dy = Array2::zeros((self.seq_len(), self.dim()));
        dy.row_mut(0).assign(d_out);
        let mut dx = self.ln_f.backward(&cache.ln_f, &dy);
        for (layer, lc) in self.layers.iter_mut().zip(&cache.layer_caches).rev() {
            dx = layer.backward(lc, &dx);
        }
        self.gpos += &dx;
        dx
    }

    pub fn ensure_grads(&mut self) {
        if self.gpos.dim() != self.pos.dim() {
            self.gpos = Array2::zeros(self.pos.dim());
        }
        for l in &mut self.layers {
            l.ensure_grads();
        }
        self.ln_f.ensure_grads();
    }
}

impl Parameterized for FusionTransformer {
    fn visit_params(&self, f: &mut dyn FnMut(&[f64])) {
        f(slice2(&self.pos));
        for l in &self.layers {
            l.visit_params(f);
        }
        self.ln_f.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(slice2_mut(&mut self.pos));
        for l in &mut self.layers {
            l.visit_params_mut(f);
        }
        self.ln_f.visit_params_mut(f);
    }
    fn visit_grads(&self, f: &mut dyn FnMut(&[f64])) {
        f(slice2(&self.gpos));
        for l in &self.layers {
            l.visit_grads(f);
        }
        self.ln_f.visit_grads(f);
    }
    fn visit_grads_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(slice2_mut(&mut self.gpos));
        for l in &mut self.layers {
            l.visit_grads_mut(f);
        }
        self.ln_f.visit_grads_mut(f);
    }
}

/// Adam with optional global-norm gradient clipping.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, param_count: usize) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
        }
    }

    pub fn step(&mut self, model: &mut dyn Parameterized) {
        let mut g = model.grads_flat();
        assert_eq!(g.len(), self.m.len(), "optimizer/model size mismatch");
        if let Some(clip) = self.clip_norm {
            let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > clip {
                let scale = clip / norm;
                for x in &mut g {
                    *x *= scale;
                }
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut p = model.params_flat();
        for i in 0..g.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
        model.set_params_flat(&p);
    }
}

pub fn softmax(x: &Array1<f64>) -> Array1<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut e = x.mapv(|v| (v - max).exp());
    let sum = e.sum();
    e /= sum;
    e
}

pub fn log_softmax(x: &Array1<f64>) -> Array1<f64> {
    let lse = logsumexp(x);
    x.mapv(|v| v - lse)
}

pub fn logsumexp(x: &Array1<f64>) -> f64 {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max.is_infinite() {
        return max;
    }
    max + x.mapv(|v| (v - max).exp()).sum().ln()
}

pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        (1.0 + x.exp()).ln()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Sinusoidal embedding of a diffusion step index; `dim` must be even.
pub fn sinusoidal_embedding(step: usize, dim: usize) -> Array1<f64> {
    assert!(dim % 2 == 0, "sinusoidal embedding dim must be even");
    let mut out = Array1::zeros(dim);
    let half = dim / 2;
    for k in 0..half {
        let freq = (10_000f64).powf(-(k as f64) / half as f64);
        out[2 * k] = (step as f64 * freq).sin();
        out[2 * k + 1] = (step as f64 * freq).cos();
    }
    out
}

/// Max relative error between the model's analytic gradient and central
/// finite differences at the given flat-parameter indices.
///
/// `loss_fn(model, accumulate)` must return the loss and, when `accumulate`
/// is true, leave analytic gradients in the model's buffers.
pub fn max_rel_grad_error<M: Parameterized>(
    model: &mut M,
    mut loss_fn: impl FnMut(&mut M, bool) -> f64,
    indices: &[usize],
    h: f64,
) -> f64 {
    model.zero_grads();
    let _ = loss_fn(model, true);
    let analytic = model.grads_flat();
    let mut params = model.params_flat();
    let mut max_err: f64 = 0.0;
    for &i in indices {
        let orig = params[i];
        params[i] = orig + h;
        model.set_params_flat(&params);
        let lp = loss_fn(model, false);
        params[i] = orig - h;
        model.set_params_flat(&params);
        let lm = loss_fn(model, false);
        params[i] = orig;
        model.set_params_flat(&params);
        let fd = (lp - lm) / (2.0 * h);
        let denom = analytic[i].abs().max(fd.abs()).max(1e-6);
        max_err = max_err.max((analytic[i] - fd).abs() / denom);
    }
    max_err
}

/// Deterministically spread `n` probe indices over `count` parameters.
pub fn probe_indices(count: usize, n: usize) -> Vec<usize> {
    (0..n.min(count)).map(|i| i * count / n.min(count)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut lin = Linear::new(4, 3, &mut rng);
        let x = Array2::from_shape_fn((5, 4), |_| rng.random_range(-1.0..1.0));
        let target = Array2::from_shape_fn((5, 3), |_| rng.random_range(-1.0..1.0));
        let loss = |m: &mut Linear, acc: bool| {
            let y = m.forward(&x);
            let diff = &y - &target;
            let l = 0.5 * diff.iter().map(|d| d * d).sum::<f64>();
            if acc {
                m.backward(&x, &diff);
            }
            l
        };
        let n = lin.param_count();
        let err = max_rel_grad_error(&mut lin, loss, &probe_indices(n, 10), 1e-5);
        assert!(err < 1e-6, "linear grad err {err}");
    }

    #[test]
    fn mlp_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut mlp = Mlp::new(&[4, 6, 6, 2], &mut rng);
        let x = Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0));
        let loss = |m: &mut Mlp, acc: bool| {
            let (y, cache) = m.forward(&x);
            let l = y.iter().map(|v| v.tanh()).sum::<f64>();
            if acc {
                let dy = y.mapv(|v| 1.0 - v.tanh().powi(2));
                m.backward(&cache, &dy);
            }
            l
        };
        let n = mlp.param_count();
        let err = max_rel_grad_error(&mut mlp, loss, &probe_indices(n, 24), 1e-5);
        assert!(err < 1e-6, "mlp grad err {err}");
    }

    #[test]
    fn layernorm_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ln = LayerNorm::new(5);
        ln.gamma.mapv_inplace(|_| rng.random_range(0.5..1.5));
        let x = Array2::from_shape_fn((2, 5), |_| rng.random_range(-1.0..1.0));
        let w = Array2::from_shape_fn((2, 5), |_| rng.random_range(-1.0..1.0));
        let loss = |m: &mut LayerNorm, acc: bool| {
            let (y, cache) = m.forward(&x);
            let l = (&y * &w).sum();
            if acc {
                m.backward(&cache, &w);
            }
            l
        };
        let n = ln.param_count();
        let err = max_rel_grad_error(&mut ln, loss, &probe_indices(n, 10), 1e-5);
        assert!(err < 1e-6, "layernorm grad err {err}");
    }

    #[test]
    fn fusion_transformer_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tf = FusionTransformer::new(2, 8, 2, 2, 16, &mut rng);
        let tokens = Array2::from_shape_fn((2, 8), |_| rng.random_range(-1.0..1.0));
        let w = Array1::from_shape_fn(8, |_| rng.random_range(-1.0..1.0));
        let loss = |m: &mut FusionTransformer, acc: bool| {
            if acc {
                let (sp, cache) = m.forward(&tokens);
                let l = sp.dot(&w) + sp.dot(&sp);
                let dsp = &w + &(2.0 * &sp);
                m.backward(&cache, &dsp);
                l
            } else {
                let sp = m.infer(&tokens);
                sp.dot(&w) + sp.dot(&sp)
            }
        };
        let n = tf.param_count();
        let err = max_rel_grad_error(&mut tf, loss, &probe_indices(n, 40), 1e-5);
        assert!(err < 1e-5, "transformer grad err {err}");
    }

    #[test]
    fn transformer_input_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tf = FusionTransformer::new(2, 8, 2, 1, 16, &mut rng);
        let tokens = Array2::from_shape_fn((2, 8), |_| rng.random_range(-1.0..1.0));
        let w = Array1::from_shape_fn(8, |_| rng.random_range(-1.0..1.0));
        let (sp, cache) = tf.forward(&tokens);
        let _ = sp.dot(&w);
        let dtokens = tf.backward(&cache, &w);
        let h = 1e-6;
        for idx in [(0usize, 0usize), (0, 3), (1, 5), (1, 7)] {
            let mut tp = tokens.clone();
            tp[idx] += h;
            let lp = tf.infer(&tp).dot(&w);
            tp[idx] -= 2.0 * h;
            let lm = tf.infer(&tp).dot(&w);
            let fd = (lp - lm) / (2.0 * h);
            let err = (dtokens[idx] - fd).abs() / fd.abs().max(1e-6);
            assert!(err < 1e-4, "input grad err {err} at {idx:?}");
        }
    }

    #[test]
    fn adam_reduces_quadratic_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut lin = Linear::new(3, 1, &mut rng);
        let mut adam = Adam::new(0.05, lin.param_count());
        let x = Array2::from_shape_fn((16, 3), |_| rng.random_range(-1.0..1.0));
        let target: Array2<f64> = x.map_axis(Axis(1), |r| r.sum()).insert_axis(Axis(1)).to_owned();
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..200 {
            lin.zero_grads();
            let y = lin.forward(&x);
            let diff = &y - &target;
            last = 0.5 * diff.iter().map(|d| d * d).sum::<f64>() / 16.0;
            first.get_or_insert(last);
            let dy = diff / 16.0;
            lin.backward(&x, &dy);
            adam.step(&mut lin);
        }
        assert!(last < first.unwrap() * 0.01, "adam failed: {first:?} -> {last}");
    }

    #[test]
    fn param_roundtrip_and_hash() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut mlp = Mlp::new(&[3, 4, 2], &mut rng);
        let p = mlp.params_flat();
        let h1 = mlp.param_hash();
        mlp.set_params_flat(&p);
        assert_eq!(h1, mlp.param_hash());
        let mut p2 = p.clone();
        p2[0] += 1.0;
        mlp.set_params_flat(&p2);
        assert_ne!(h1, mlp.param_hash());
    }

    #[test]
    fn softmax_and_logsumexp_are_stable() {
        let x = Array1::from_vec(vec![1000.0, 1000.0]);
        let p = softmax(&x);
        assert!((p[0] - 0.5).abs() < 1e-12);
        assert!((logsumexp(&x) - (1000.0 + 2f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn sinusoidal_embedding_shapes_and_range() {
        let e = sinusoidal_embedding(500, 32);
        assert_eq!(e.len(), 32);
        assert!(e.iter().all(|v| v.abs() <= 1.0));
        assert_ne!(e, sinusoidal_embedding(501, 32));
    }
}
