//! A small pre-norm decoder-only transformer with hand-written backward pass.
//!
//! Shapes: activations are `T x d` row-major, projection weights are stored
//! `in x out` so a layer is `y = x · W`. The penultimate representation `z`
//! is the output of the final layer norm, i.e. the input of the untied LM head.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::lora::{LoraConfig, LoraPair, LoraWeights};
use super::tokenizer::VOCAB_SIZE;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    /// Feed-forward hidden width as a multiple of `d_model`.
    pub ff_mult: usize,
    pub context: usize,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_blocks: 2,
            n_heads: 4,
            ff_mult: 4,
            context: 128,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_blocks == 0 || self.n_heads == 0 || self.ff_mult == 0 || self.context == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::Config("init_std must be positive".into()));
        }
        Ok(())
    }

    pub fn ff_dim(&self) -> usize {
        self.d_model * self.ff_mult
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
}

impl LayerNorm {
    fn new(d: usize) -> Self {
        LayerNorm {
            gain: Array1::ones(d),
            bias: Array1::zeros(d),
        }
    }

    fn zeros(d: usize) -> Self {
        LayerNorm {
            gain: Array1::zeros(d),
            bias: Array1::zeros(d),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub ln2: LayerNorm,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl Block {
    /// The four attention projections in `q, k, v, o` order.
    pub fn projections(&self) -> [&Array2<f64>; 4] {
        [&self.wq, &self.wk, &self.wv, &self.wo]
    }
}

/// Base (pretrained) parameters. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseWeights {
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    pub lm_head: Array2<f64>,
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

impl BaseWeights {
    pub fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d_model;
        let f = cfg.ff_dim();
        let std = cfg.init_std;
        let tok_emb = normal_matrix(rng, VOCAB_SIZE, d, std);
        let pos_emb = normal_matrix(rng, cfg.context, d, std);
        let blocks = (0..cfg.n_blocks)
            .map(|_| Block {
                ln1: LayerNorm::new(d),
                wq: normal_matrix(rng, d, d, std),
                wk: normal_matrix(rng, d, d, std),
                wv: normal_matrix(rng, d, d, std),
                wo: normal_matrix(rng, d, d, std),
                ln2: LayerNorm::new(d),
                w1: normal_matrix(rng, d, f, std),
                b1: Array1::zeros(f),
                w2: normal_matrix(rng, f, d, std),
                b2: Array1::zeros(d),
            })
            .collect();
        let lm_head = normal_matrix(rng, d, VOCAB_SIZE, std);
        BaseWeights {
            tok_emb,
            pos_emb,
            blocks,
            ln_f: LayerNorm::new(d),
            lm_head,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z2 = |a: &Array2<f64>| Array2::zeros(a.raw_dim());
        let z1 = |a: &Array1<f64>| Array1::zeros(a.raw_dim());
        BaseWeights {
            tok_emb: z2(&self.tok_emb),
            pos_emb: z2(&self.pos_emb),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    ln1: LayerNorm::zeros(b.ln1.gain.len()),
                    wq: z2(&b.wq),
                    wk: z2(&b.wk),
                    wv: z2(&b.wv),
                    wo: z2(&b.wo),
                    ln2: LayerNorm::zeros(b.ln2.gain.len()),
                    w1: z2(&b.w1),
                    b1: z1(&b.b1),
                    w2: z2(&b.w2),
                    b2: z1(&b.b2),
                })
                .collect(),
            ln_f: LayerNorm::zeros(self.ln_f.gain.len()),
            lm_head: z2(&self.lm_head),
        }
    }

    /// Every tensor as `(name, shape, values)` in a fixed order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
        fn p2<'a>(out: &mut Vec<(String, Vec<usize>, &'a [f64])>, name: String, a: &'a Array2<f64>) {
            out.push((name, a.shape().to_vec(), a.as_slice().expect("standard layout")));
        }
        fn p1<'a>(out: &mut Vec<(String, Vec<usize>, &'a [f64])>, name: String, a: &'a Array1<f64>) {
            out.push((name, a.shape().to_vec(), a.as_slice().expect("standard layout")));
        }
        p2(&mut out, "tok_emb".into(), &self.tok_emb);
        p2(&mut out, "pos_emb".into(), &self.pos_emb);
        for (i, b) in self.blocks.iter().enumerate() {
            p1(&mut out, format!("blocks.{i}.ln1.gain"), &b.ln1.gain);
            p1(&mut out, format!("blocks.{i}.ln1.bias"), &b.ln1.bias);
            p2(&mut out, format!("blocks.{i}.wq"), &b.wq);
            p2(&mut out, format!("blocks.{i}.wk"), &b.wk);
            p2(&mut out, format!("blocks.{i}.wv"), &b.wv);
            p2(&mut out, format!("blocks.{i}.wo"), &b.wo);
            p1(&mut out, format!("blocks.{i}.ln2.gain"), &b.ln2.gain);
            p1(&mut out, format!("blocks.{i}.ln2.bias"), &b.ln2.bias);
            p2(&mut out, format!("blocks.{i}.w1"), &b.w1);
            p1(&mut out, format!("blocks.{i}.b1"), &b.b1);
            p2(&mut out, format!("blocks.{i}.w2"), &b.w2);
            p1(&mut out, format!("blocks.{i}.b2"), &b.b2);
        }
        p1(&mut out, "ln_f.gain".into(), &self.ln_f.gain);
        p1(&mut out, "ln_f.bias".into(), &self.ln_f.bias);
        p2(&mut out, "lm_head".into(), &self.lm_head);
        out
    }

    /// Mutable views in the same order as [`BaseWeights::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.tok_emb.as_slice_mut().unwrap(),
            self.pos_emb.as_slice_mut().unwrap(),
        ];
        for b in &mut self.blocks {
            out.push(b.ln1.gain.as_slice_mut().unwrap());
            out.push(b.ln1.bias.as_slice_mut().unwrap());
            out.push(b.wq.as_slice_mut().unwrap());
            out.push(b.wk.as_slice_mut().unwrap());
            out.push(b.wv.as_slice_mut().unwrap());
            out.push(b.wo.as_slice_mut().unwrap());
            out.push(b.ln2.gain.as_slice_mut().unwrap());
            out.push(b.ln2.bias.as_slice_mut().unwrap());
            out.push(b.w1.as_slice_mut().unwrap());
            out.push(b.b1.as_slice_mut().unwrap());
            out.push(b.w2.as_slice_mut().unwrap());
            out.push(b.b2.as_slice_mut().unwrap());
        }
        out.push(self.ln_f.gain.as_slice_mut().unwrap());
        out.push(self.ln_f.bias.as_slice_mut().unwrap());
        out.push(self.lm_head.as_slice_mut().unwrap());
        out
    }
}

/// Linear K-way head on the last-token representation, replacing the LM head
/// in discriminative fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl ClassifierHead {
    pub fn init(d: usize, k: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        ClassifierHead {
            weight: normal_matrix(rng, d, k, std),
            bias: Array1::zeros(k),
        }
    }

    pub fn zeros_like(&self) -> Self {
        ClassifierHead {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn logits(&self, z: &[f64]) -> Vec<f64> {
        let k = self.num_classes();
        (0..k)
            .map(|c| self.bias[c] + z.iter().enumerate().map(|(i, v)| v * self.weight[[i, c]]).sum::<f64>())
            .collect()
    }

    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        vec![
            (
                "head.weight".into(),
                self.weight.shape().to_vec(),
                self.weight.as_slice().unwrap(),
            ),
            (
                "head.bias".into(),
                self.bias.shape().to_vec(),
                self.bias.as_slice().unwrap(),
            ),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.weight.as_slice_mut().unwrap(), self.bias.as_slice_mut().unwrap()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyLm {
    pub config: ModelConfig,
    pub base: BaseWeights,
    pub lora: Option<LoraWeights>,
    pub head: Option<ClassifierHead>,
}

/// Gradients for the trainable parameter groups; a `None` group is frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub base: Option<BaseWeights>,
    pub lora: Option<LoraWeights>,
    pub head: Option<ClassifierHead>,
}

impl Gradients {
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        if let Some(b) = &self.base {
            out.extend(b.tensors());
        }
        if let Some(l) = &self.lora {
            out.extend(l.tensors());
        }
        if let Some(h) = &self.head {
            out.extend(h.tensors());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        if let Some(b) = &mut self.base {
            out.extend(b.tensors_mut());
        }
        if let Some(l) = &mut self.lora {
            out.extend(l.tensors_mut());
        }
        if let Some(h) = &mut self.head {
            out.extend(h.tensors_mut());
        }
        out
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b.2) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= s);
        }
    }
}

struct LnCache {
    xhat: Array2<f64>,
    rstd: Vec<f64>,
}

pub(crate) struct BlockTrace {
    ln1: LnCache,
    h1: Array2<f64>,
    pub(crate) q: Array2<f64>,
    pub(crate) k: Array2<f64>,
    pub(crate) v: Array2<f64>,
    /// `input · A` for each adapted projection (q, k, v, o).
    mid: [Option<Array2<f64>>; 4],
    /// Per head, row `i` holds the causal attention weights over `0..=i`.
    probs: Vec<Vec<Vec<f64>>>,
    ctx: Array2<f64>,
    ln2: LnCache,
    h2: Array2<f64>,
    pre_act: Array2<f64>,
    act: Array2<f64>,
}

/// Everything the backward pass needs from one forward pass.
pub struct Trace {
    tokens: Vec<u32>,
    pub(crate) blocks: Vec<BlockTrace>,
    ln_f: LnCache,
    /// Penultimate representation per position (`T x d`).
    pub z: Array2<f64>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

fn layer_norm(x: &Array2<f64>, ln: &LayerNorm) -> (Array2<f64>, LnCache) {
    let (t, d) = x.dim();
    let mut xhat = Array2::zeros((t, d));
    let mut rstd = Vec::with_capacity(t);
    for (row, mut out) in x.outer_iter().zip(xhat.outer_iter_mut()) {
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(r);
        for (o, v) in out.iter_mut().zip(row) {
            *o = (v - mean) * r;
        }
    }
    let y = &xhat * &ln.gain + &ln.bias;
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward(dy: &Array2<f64>, cache: &LnCache, ln: &LayerNorm, grad: Option<&mut LayerNorm>) -> Array2<f64> {
    if let Some(g) = grad {
        g.gain += &(dy * &cache.xhat).sum_axis(Axis(0));
        g.bias += &dy.sum_axis(Axis(0));
    }
    let d = dy.ncols() as f64;
    let dxhat = dy * &ln.gain;
    let mut dx = Array2::zeros(dy.raw_dim());
    for (i, ((dxh, xh), mut out)) in dxhat
        .outer_iter()
        .zip(cache.xhat.outer_iter())
        .zip(dx.outer_iter_mut())
        .enumerate()
    {
        let mean_d = dxh.sum() / d;
        let mean_dx = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d;
        let r = cache.rstd[i];
        for ((o, a), b) in out.iter_mut().zip(dxh).zip(xh) {
            *o = r * (a - mean_d - b * mean_dx);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

/// `y = x·W + s·(x·A)·B`; returns `y` and `x·A` when adapted.
fn project(x: &Array2<f64>, w: &Array2<f64>, lora: Option<(&LoraPair, f64)>) -> (Array2<f64>, Option<Array2<f64>>) {
    let mut y = x.dot(w);
    match lora {
        Some((pair, s)) => {
            let mid = x.dot(&pair.a);
            y.scaled_add(s, &mid.dot(&pair.b));
            (y, Some(mid))
        }
        None => (y, None),
    }
}

fn project_backward(
    dy: &Array2<f64>,
    x: &Array2<f64>,
    w: &Array2<f64>,
    lora: Option<(&LoraPair, f64)>,
    mid: Option<&Array2<f64>>,
    grad_w: Option<&mut Array2<f64>>,
    grad_lora: Option<&mut LoraPair>,
) -> Array2<f64> {
    if let Some(gw) = grad_w {
        *gw += &x.t().dot(dy);
    }
    let mut dx = dy.dot(&w.t());
    if let (Some((pair, s)), Some(mid)) = (lora, mid) {
        let dmid = dy.dot(&pair.b.t()) * s;
        if let Some(g) = grad_lora {
            g.b.scaled_add(s, &mid.t().dot(dy));
            g.a += &x.t().dot(&dmid);
        }
        dx += &dmid.dot(&pair.a.t());
    }
    dx
}

fn attention(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>, n_heads: usize) -> (Array2<f64>, Vec<Vec<Vec<f64>>>) {
    let (t, d) = q.dim();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = Array2::zeros((t, d));
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = h * dh..(h + 1) * dh;
        let mut head_probs = Vec::with_capacity(t);
        for i in 0..t {
            let qi = &q.row(i).to_slice().unwrap()[cols.clone()];
            let mut row: Vec<f64> = (0..=i)
                .map(|j| {
                    let kj = &k.row(j).to_slice().unwrap()[cols.clone()];
                    qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale
                })
                .collect();
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for p in row.iter_mut() {
                *p = (*p - max).exp();
                sum += *p;
            }
            for p in row.iter_mut() {
                *p /= sum;
            }
            let mut out = vec![0.0; dh];
            for (j, p) in row.iter().enumerate() {
                let vj = &v.row(j).to_slice().unwrap()[cols.clone()];
                for (o, x) in out.iter_mut().zip(vj) {
                    *o += p * x;
                }
            }
            for (c, o) in cols.clone().zip(out) {
                ctx[[i, c]] = o;
            }
            head_probs.push(row);
        }
        probs.push(head_probs);
    }
    (ctx, probs)
}

fn attention_backward(
    dctx: &Array2<f64>,
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    probs: &[Vec<Vec<f64>>],
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let (t, d) = q.dim();
    let n_heads = probs.len();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Array2::zeros((t, d));
    let mut dk = Array2::zeros((t, d));
    let mut dv = Array2::zeros((t, d));
    for (h, head) in probs.iter().enumerate() {
        let c0 = h * dh;
        for i in 0..t {
            let p = &head[i];
            let dci = dctx.row(i);
            let mut dp = vec![0.0; i + 1];
            for j in 0..=i {
                let mut s = 0.0;
                for c in 0..dh {
                    s += dci[c0 + c] * v[[j, c0 + c]];
                    dv[[j, c0 + c]] += p[j] * dci[c0 + c];
                }
                dp[j] = s;
            }
            let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
            for j in 0..=i {
                let ds = p[j] * (dp[j] - dot) * scale;
                if ds == 0.0 {
                    continue;
                }
                for c in 0..dh {
                    dq[[i, c0 + c]] += ds * k[[j, c0 + c]];
                    dk[[j, c0 + c]] += ds * q[[i, c0 + c]];
                }
            }
        }
    }
    (dq, dk, dv)
}

impl ToyLm {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = BaseWeights::init(&config, &mut rng);
        Ok(ToyLm {
            config,
            base,
            lora: None,
            head: None,
        })
    }

    /// Attaches fresh adapters to every attention projection. `B` starts at
    /// zero, so outputs are unchanged until the first update.
    pub fn attach_lora(&mut self, cfg: LoraConfig, seed: u64) -> Result<()> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4c6f_5241);
        self.lora = Some(LoraWeights::init(
            &cfg,
            self.config.d_model,
            self.config.n_blocks,
            &mut rng,
        ));
        Ok(())
    }

    pub fn attach_classifier(&mut self, num_classes: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4865_6164);
        self.head = Some(ClassifierHead::init(
            self.config.d_model,
            num_classes,
            self.config.init_std,
            &mut rng,
        ));
    }

    /// Base weights are trained only when no adapters are attached.
    pub fn base_trainable(&self) -> bool {
        self.lora.is_none()
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients {
            base: self.base_trainable().then(|| self.base.zeros_like()),
            lora: self.lora.as_ref().map(|l| l.zeros_like()),
            head: self.head.as_ref().map(|h| h.zeros_like()),
        }
    }

    /// Trainable tensors, ordered like [`Gradients::tensors`].
    pub fn trainable_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        if self.lora.is_none() {
            out.extend(self.base.tensors_mut());
        }
        if let Some(l) = &mut self.lora {
            out.extend(l.tensors_mut());
        }
        if let Some(h) = &mut self.head {
            out.extend(h.tensors_mut());
        }
        out
    }

    pub fn trainable_tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        if self.lora.is_none() {
            out.extend(self.base.tensors());
        }
        if let Some(l) = &self.lora {
            out.extend(l.tensors());
        }
        if let Some(h) = &self.head {
            out.extend(h.tensors());
        }
        out
    }

    fn lora_for(&self, block: usize, which: usize) -> Option<(&LoraPair, f64)> {
        self.lora.as_ref().map(|l| (&l.blocks[block][which], l.scale()))
    }

    pub fn forward(&self, tokens: &[u32]) -> Result<Trace> {
        let t = tokens.len();
        if t == 0 {
            return Err(Error::EmptyInput("token sequence"));
        }
        if t > self.config.context {
            return Err(Error::ContextOverflow {
                len: t,
                context: self.config.context,
            });
        }
        let d = self.config.d_model;
        let mut x = Array2::zeros((t, d));
        for (i, &tok) in tokens.iter().enumerate() {
            if tok as usize >= VOCAB_SIZE {
                return Err(Error::Config(format!("token id {tok} outside the vocabulary")));
            }
            let mut row = x.row_mut(i);
            row += &self.base.tok_emb.row(tok as usize);
            row += &self.base.pos_emb.row(i);
        }
        let mut blocks = Vec::with_capacity(self.config.n_blocks);
        for (bi, blk) in self.base.blocks.iter().enumerate() {
            let (h1, ln1) = layer_norm(&x, &blk.ln1);
            let (q, mq) = project(&h1, &blk.wq, self.lora_for(bi, 0));
            let (k, mk) = project(&h1, &blk.wk, self.lora_for(bi, 1));
            let (v, mv) = project(&h1, &blk.wv, self.lora_for(bi, 2));
            let (ctx, probs) = attention(&q, &k, &v, self.config.n_heads);
            let (o, mo) = project(&ctx, &blk.wo, self.lora_for(bi, 3));
            x += &o;
            let (h2, ln2) = layer_norm(&x, &blk.ln2);
            let pre_act = h2.dot(&blk.w1) + &blk.b1;
            let act = pre_act.mapv(gelu);
            let ff = act.dot(&blk.w2) + &blk.b2;
            x += &ff;
            blocks.push(BlockTrace {
                ln1,
                h1,
                q,
                k,
                v,
                mid: [mq, mk, mv, mo],
                probs,
                ctx,
                ln2,
                h2,
                pre_act,
                act,
            });
        }
        let (z, ln_f) = layer_norm(&x, &self.base.ln_f);
        Ok(Trace {
            tokens: tokens.to_vec(),
            blocks,
            ln_f,
            z,
        })
    }

    /// Full-vocabulary logits at position `pos`.
    pub fn lm_logits(&self, z_row: &[f64]) -> Vec<f64> {
        let head = &self.base.lm_head;
        let mut out = vec![0.0; VOCAB_SIZE];
        for (i, zi) in z_row.iter().enumerate() {
            let row = head.row(i);
            for (o, w) in out.iter_mut().zip(row) {
                *o += zi * w;
            }
        }
        out
    }

    /// Backpropagates `dz` (gradient w.r.t. the penultimate representation)
    /// through the network into `grads`.
    pub fn backward(&self, trace: &Trace, dz: &Array2<f64>, grads: &mut Gradients) {
        let mut gbase = grads.base.as_mut();
        let mut dx = layer_norm_backward(
            dz,
            &trace.ln_f,
            &self.base.ln_f,
            gbase.as_deref_mut().map(|g| &mut g.ln_f),
        );
        for (bi, (blk, tr)) in self.base.blocks.iter().zip(&trace.blocks).enumerate().rev() {
            let mut gblk = gbase.as_deref_mut().map(|g| &mut g.blocks[bi]);
            let mut glora = grads.lora.as_mut().map(|l| &mut l.blocks[bi]);

            // feed-forward residual branch
            if let Some(g) = gblk.as_deref_mut() {
                g.b2 += &dx.sum_axis(Axis(0));
                g.w2 += &tr.act.t().dot(&dx);
            }
            let dact = dx.dot(&blk.w2.t());
            let mut dpre = dact;
            dpre.zip_mut_with(&tr.pre_act, |g, &u| *g *= gelu_grad(u));
            if let Some(g) = gblk.as_deref_mut() {
                g.b1 += &dpre.sum_axis(Axis(0));
                g.w1 += &tr.h2.t().dot(&dpre);
            }
            let dh2 = dpre.dot(&blk.w1.t());
            dx += &layer_norm_backward(&dh2, &tr.ln2, &blk.ln2, gblk.as_deref_mut().map(|g| &mut g.ln2));

            // attention residual branch
            let dctx = project_backward(
                &dx,
                &tr.ctx,
                &blk.wo,
                self.lora_for(bi, 3),
                tr.mid[3].as_ref(),
                gblk.as_deref_mut().map(|g| &mut g.wo),
                glora.as_deref_mut().map(|l| &mut l[3]),
            );
            let (dq, dk, dv) = attention_backward(&dctx, &tr.q, &tr.k, &tr.v, &tr.probs);
            let mut dh1 = project_backward(
                &dq,
                &tr.h1,
                &blk.wq,
                self.lora_for(bi, 0),
                tr.mid[0].as_ref(),
                gblk.as_deref_mut().map(|g| &mut g.wq),
                glora.as_deref_mut().map(|l| &mut l[0]),
            );
            dh1 += &project_backward(
                &dk,
                &tr.h1,
                &blk.wk,
                self.lora_for(bi, 1),
                tr.mid[1].as_ref(),
                gblk.as_deref_mut().map(|g| &mut g.wk),
                glora.as_deref_mut().map(|l| &mut l[1]),
            );
            dh1 += &project_backward(
                &dv,
                &tr.h1,
                &blk.wv,
                self.lora_for(bi, 2),
                tr.mid[2].as_ref(),
                gblk.as_deref_mut().map(|g| &mut g.wv),
                glora.as_deref_mut().map(|l| &mut l[2]),
            );
            dx += &layer_norm_backward(&dh1, &tr.ln1, &blk.ln1, gblk.as_deref_mut().map(|g| &mut g.ln1));
        }
        if let Some(g) = gbase {
            for (i, &tok) in trace.tokens.iter().enumerate() {
                let row = dx.row(i);
                let mut te = g.tok_emb.row_mut(tok as usize);
                te += &row;
                let mut pe = g.pos_emb.row_mut(i);
                pe += &row;
            }
        }
    }

    /// Mean next-token NLL over `targets` (`(position, next token)` pairs),
    /// with the gradient w.r.t. `z` and the LM head accumulated into `grads`.
    pub fn lm_loss(
        &self,
        trace: &Trace,
        targets: &[(usize, u32)],
        grads: Option<&mut Gradients>,
    ) -> (f64, Array2<f64>) {
        let d = self.config.d_model;
        let mut dz = Array2::zeros((trace.len(), d));
        if targets.is_empty() {
            return (0.0, dz);
        }
        let m = targets.len() as f64;
        let mut rows = Array2::zeros((targets.len(), d));
        for (r, &(pos, _)) in targets.iter().enumerate() {
            rows.row_mut(r).assign(&trace.z.row(pos));
        }
        let logits = rows.dot(&self.base.lm_head);
        let mut dlogits = Array2::zeros(logits.raw_dim());
        let mut loss = 0.0;
        for (r, &(_, target)) in targets.iter().enumerate() {
            let row = logits.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            loss += lse - row[target as usize];
            let mut drow = dlogits.row_mut(r);
            for (o, v) in drow.iter_mut().zip(row) {
                *o = (v - lse).exp() / m;
            }
            drow[target as usize] -= 1.0 / m;
        }
        let drows = dlogits.dot(&self.base.lm_head.t());
        for (r, &(pos, _)) in targets.iter().enumerate() {
            let mut dr = dz.row_mut(pos);
            dr += &drows.row(r);
        }
        if let Some(g) = grads.and_then(|g| g.base.as_mut()) {
            g.lm_head += &rows.t().dot(&dlogits);
        }
        (loss / m, dz)
    }

    /// Cross-entropy of the classifier head on the last position.
    pub fn classifier_loss(
        &self,
        trace: &Trace,
        label: usize,
        grads: Option<&mut Gradients>,
    ) -> Result<(f64, Array2<f64>)> {
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| Error::Config("discriminative loss needs a classifier head".into()))?;
        let k = head.num_classes();
        if label >= k {
            return Err(Error::Config(format!("label {label} out of range for {k} classes")));
        }
        let last = trace.len() - 1;
        let z = trace.z.row(last).to_vec();
        let logits = head.logits(&z);
        let lse = crate::detectors::logsumexp(&logits);
        let loss = lse - logits[label];
        let mut dlogits: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
        dlogits[label] -= 1.0;
        let mut dz = Array2::zeros((trace.len(), self.config.d_model));
        for i in 0..self.config.d_model {
            dz[[last, i]] = (0..k).map(|c| dlogits[c] * head.weight[[i, c]]).sum();
        }
        if let Some(gh) = grads.and_then(|g| g.head.as_mut()) {
            for i in 0..self.config.d_model {
                for c in 0..k {
                    gh.weight[[i, c]] += z[i] * dlogits[c];
                }
            }
            for c in 0..k {
                gh.bias[c] += dlogits[c];
            }
        }
        Ok((loss, dz))
    }

    /// Number of scalar parameters currently being trained.
    pub fn num_trainable(&self) -> usize {
        self.trainable_tensors().iter().map(|(_, _, v)| v.len()).sum()
    }
}

/// Keys and values of every block for the positions processed so far.
pub struct KvCache {
    len: usize,
    keys: Vec<Vec<Vec<f64>>>,
    values: Vec<Vec<Vec<f64>>>,
}

impl KvCache {
    pub fn from_trace(trace: &Trace) -> Self {
        let rows = |a: &Array2<f64>| a.outer_iter().map(|r| r.to_vec()).collect::<Vec<_>>();
        KvCache {
            len: trace.len(),
            keys: trace.blocks.iter().map(|b| rows(&b.k)).collect(),
            values: trace.blocks.iter().map(|b| rows(&b.v)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

impl ToyLm {
    /// Processes one more token against `cache` and returns its `z` row.
    pub fn forward_step(&self, cache: &mut KvCache, token: u32) -> Result<Vec<f64>> {
        let pos = cache.len;
        if pos >= self.config.context {
            return Err(Error::ContextOverflow {
                len: pos + 1,
                context: self.config.context,
            });
        }
        if token as usize >= VOCAB_SIZE {
            return Err(Error::Config(format!("token id {token} outside the vocabulary")));
        }
        let d = self.config.d_model;
        let n_heads = self.config.n_heads;
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut x = (&self.base.tok_emb.row(token as usize) + &self.base.pos_emb.row(pos)).insert_axis(Axis(0));
        for (bi, blk) in self.base.blocks.iter().enumerate() {
            let (h1, _) = layer_norm(&x, &blk.ln1);
            let (q, _) = project(&h1, &blk.wq, self.lora_for(bi, 0));
            let (k, _) = project(&h1, &blk.wk, self.lora_for(bi, 1));
            let (v, _) = project(&h1, &blk.wv, self.lora_for(bi, 2));
            cache.keys[bi].push(k.row(0).to_vec());
            cache.values[bi].push(v.row(0).to_vec());
            let keys = &cache.keys[bi];
            let values = &cache.values[bi];
            let q = q.row(0);
            let mut ctx = Array2::zeros((1, d));
            for h in 0..n_heads {
                let c0 = h * dh;
                let mut w: Vec<f64> = keys
                    .iter()
                    .map(|kj| (0..dh).map(|c| q[c0 + c] * kj[c0 + c]).sum::<f64>() * scale)
                    .collect();
                let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for p in w.iter_mut() {
                    *p = (*p - max).exp();
                    sum += *p;
                }
                for (p, vj) in w.iter().zip(values) {
                    for c in 0..dh {
                        ctx[[0, c0 + c]] += p / sum * vj[c0 + c];
                    }
                }
            }
            let (o, _) = project(&ctx, &blk.wo, self.lora_for(bi, 3));
            x += &o;
            let (h2, _) = layer_norm(&x, &blk.ln2);
            let act = (h2.dot(&blk.w1) + &blk.b1).mapv(gelu);
            x += &(act.dot(&blk.w2) + &blk.b2);
        }
        cache.len += 1;
        let (z, _) = layer_norm(&x, &self.base.ln_f);
        Ok(z.row(0).to_vec())
    }
}

/// Random index helper shared by training code.
pub(crate) fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}
