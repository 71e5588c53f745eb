//! Decoder-only transformer over SID tokens with hand-written backprop.
//!
//! Pre-norm blocks: `x += Attn(LN(x))`, `x += MLP(LN(x))`, followed by a
//! final LayerNorm and an output projection with bias. All arithmetic is
//! f64; parameters are kept at f32-representable values so checkpoints with
//! a float32 payload reload bit-exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::vocab::Vocab;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub context: usize,
    pub ff_mult: usize,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            layers: 2,
            heads: 2,
            context: 128,
            ff_mult: 4,
            init_std: 0.02,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            problems.push(format!(
                "d_model ({}) must be a positive multiple of heads ({})",
                self.d_model, self.heads
            ));
        }
        if self.layers == 0 {
            problems.push("layers must be >= 1".into());
        }
        if self.context < 2 {
            problems.push("context must be >= 2".into());
        }
        if self.ff_mult == 0 {
            problems.push("ff_mult must be >= 1".into());
        }
        problems
    }
}

/// Name, shape and offset of one parameter tensor in the flat buffer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct LayerOffsets {
    ln1_w: usize,
    ln1_b: usize,
    qkv_w: usize,
    qkv_b: usize,
    proj_w: usize,
    proj_b: usize,
    ln2_w: usize,
    ln2_b: usize,
    fc_w: usize,
    fc_b: usize,
    fcp_w: usize,
    fcp_b: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    wte: usize,
    wpe: usize,
    layers: Vec<LayerOffsets>,
    lnf_w: usize,
    lnf_b: usize,
    head_w: usize,
    head_b: usize,
    tensors: Vec<TensorSpec>,
    total: usize,
}

impl Layout {
    fn new(cfg: &ModelConfig, vocab: usize) -> Self {
        let c = cfg.d_model;
        let f = cfg.ff_mult * c;
        let mut tensors = Vec::new();
        let mut next = 0usize;
        let mut add = |name: String, shape: Vec<usize>| {
            let spec = TensorSpec {
                name,
                shape,
                offset: next,
            };
            next += spec.len();
            let off = spec.offset;
            tensors.push(spec);
            off
        };
        let wte = add("wte".into(), vec![vocab, c]);
        let wpe = add("wpe".into(), vec![cfg.context, c]);
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            layers.push(LayerOffsets {
                ln1_w: add(format!("h{l}.ln1.w"), vec![c]),
                ln1_b: add(format!("h{l}.ln1.b"), vec![c]),
                qkv_w: add(format!("h{l}.attn.qkv.w"), vec![3 * c, c]),
                qkv_b: add(format!("h{l}.attn.qkv.b"), vec![3 * c]),
                proj_w: add(format!("h{l}.attn.proj.w"), vec![c, c]),
                proj_b: add(format!("h{l}.attn.proj.b"), vec![c]),
                ln2_w: add(format!("h{l}.ln2.w"), vec![c]),
                ln2_b: add(format!("h{l}.ln2.b"), vec![c]),
                fc_w: add(format!("h{l}.mlp.fc.w"), vec![f, c]),
                fc_b: add(format!("h{l}.mlp.fc.b"), vec![f]),
                fcp_w: add(format!("h{l}.mlp.proj.w"), vec![c, f]),
                fcp_b: add(format!("h{l}.mlp.proj.b"), vec![c]),
            });
        }
        let lnf_w = add("lnf.w".into(), vec![c]);
        let lnf_b = add("lnf.b".into(), vec![c]);
        let head_w = add("head.w".into(), vec![vocab, c]);
        let head_b = add("head.b".into(), vec![vocab]);
        Layout {
            wte,
            wpe,
            layers,
            lnf_w,
            lnf_b,
            head_w,
            head_b,
            tensors,
            total: next,
        }
    }
}

/// Round to the nearest f32 value.
#[inline]
pub(crate) fn to_f32_grid(x: f64) -> f64 {
    x as f32 as f64
}

/// The autoregressive SID generator.
#[derive(Debug, Clone, PartialEq)]
pub struct GenModel {
    config: ModelConfig,
    vocab: Vocab,
    layout: Layout,
    params: Vec<f64>,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
struct LayerCache {
    x_in: Vec<f64>,
    ln1: Vec<f64>,
    ln1_mean: Vec<f64>,
    ln1_rstd: Vec<f64>,
    qkv: Vec<f64>,
    att: Vec<f64>,
    y: Vec<f64>,
    x_mid: Vec<f64>,
    ln2: Vec<f64>,
    ln2_mean: Vec<f64>,
    ln2_rstd: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
}

/// Result of a forward pass: per-position logits plus cached activations.
#[derive(Debug, Clone)]
pub struct Forward {
    tokens: Vec<u32>,
    layers: Vec<LayerCache>,
    x_final: Vec<f64>,
    lnf: Vec<f64>,
    lnf_mean: Vec<f64>,
    lnf_rstd: Vec<f64>,
    /// Row-major logits for positions `first..len`; row t predicts token t + 1.
    pub logits: Vec<f64>,
    first: usize,
    vocab: usize,
}

impl Forward {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// First position that has logits.
    pub fn first(&self) -> usize {
        self.first
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let r = t - self.first;
        &self.logits[r * self.vocab..(r + 1) * self.vocab]
    }
}

fn matmul(out: &mut [f64], inp: &[f64], w: &[f64], b: &[f64], in_dim: usize, out_dim: usize) {
    for (o_row, i_row) in out.chunks_exact_mut(out_dim).zip(inp.chunks_exact(in_dim)) {
        for (o, (w_row, bias)) in o_row.iter_mut().zip(w.chunks_exact(in_dim).zip(b)) {
            *o = bias + w_row.iter().zip(i_row).map(|(a, x)| a * x).sum::<f64>();
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn matmul_backward(
    dinp: &mut [f64],
    dw: &mut [f64],
    db: &mut [f64],
    dout: &[f64],
    inp: &[f64],
    w: &[f64],
    in_dim: usize,
    out_dim: usize,
) {
    for ((d_row, i_row), di_row) in dout
        .chunks_exact(out_dim)
        .zip(inp.chunks_exact(in_dim))
        .zip(dinp.chunks_exact_mut(in_dim))
    {
        for (o, &d) in d_row.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let w_row = &w[o * in_dim..(o + 1) * in_dim];
            let dw_row = &mut dw[o * in_dim..(o + 1) * in_dim];
            for i in 0..in_dim {
                di_row[i] += d * w_row[i];
                dw_row[i] += d * i_row[i];
            }
            db[o] += d;
        }
    }
}

fn layernorm(out: &mut [f64], mean: &mut [f64], rstd: &mut [f64], inp: &[f64], w: &[f64], b: &[f64], c: usize) {
    for (t, (o_row, i_row)) in out.chunks_exact_mut(c).zip(inp.chunks_exact(c)).enumerate() {
        let m = i_row.iter().sum::<f64>() / c as f64;
        let var = i_row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / c as f64;
        let s = 1.0 / (var + LN_EPS).sqrt();
        for i in 0..c {
            o_row[i] = (i_row[i] - m) * s * w[i] + b[i];
        }
        mean[t] = m;
        rstd[t] = s;
    }
}

#[allow(clippy::too_many_arguments)]
fn layernorm_backward(
    dinp: &mut [f64],
    dw: &mut [f64],
    db: &mut [f64],
    dout: &[f64],
    inp: &[f64],
    w: &[f64],
    mean: &[f64],
    rstd: &[f64],
    c: usize,
) {
    for (t, ((d_row, i_row), di_row)) in dout
        .chunks_exact(c)
        .zip(inp.chunks_exact(c))
        .zip(dinp.chunks_exact_mut(c))
        .enumerate()
    {
        let (m, s) = (mean[t], rstd[t]);
        let mut dnorm_mean = 0.0;
        let mut dnorm_norm_mean = 0.0;
        for i in 0..c {
            let norm = (i_row[i] - m) * s;
            let dnorm = w[i] * d_row[i];
            dnorm_mean += dnorm;
            dnorm_norm_mean += dnorm * norm;
        }
        dnorm_mean /= c as f64;
        dnorm_norm_mean /= c as f64;
        for i in 0..c {
            let norm = (i_row[i] - m) * s;
            let dnorm = w[i] * d_row[i];
            db[i] += d_row[i];
            dw[i] += norm * d_row[i];
            di_row[i] += (dnorm - dnorm_mean - norm * dnorm_norm_mean) * s;
        }
    }
}

const GELU_SCALE: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_SCALE * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_SCALE * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let sech2 = 1.0 - th * th;
    0.5 * (1.0 + th) + 0.5 * x * sech2 * GELU_SCALE * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    row.iter().map(|z| z - lse).collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    log_softmax(row).into_iter().map(f64::exp).collect()
}

impl GenModel {
    /// Freshly initialized model: N(0, init_std) weights, residual
    /// projections scaled by 1/sqrt(2 * layers), unit LayerNorm gains.
    pub fn new(config: ModelConfig, vocab: Vocab) -> Result<Self> {
        let problems = config.validate();
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let layout = Layout::new(&config, vocab.size());
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, config.init_std).map_err(|e| Error::Config(vec![e.to_string()]))?;
        let residual_scale = 1.0 / (2.0 * config.layers as f64).sqrt();
        for spec in &layout.tensors {
            let name = spec.name.as_str();
            let fill: Box<dyn Fn(&mut ChaCha8Rng) -> f64> = if name.ends_with(".b") {
                Box::new(|_| 0.0)
            } else if name.contains("ln") {
                Box::new(|_| 1.0)
            } else if name.ends_with("proj.w") {
                Box::new(move |r| normal.sample(r) * residual_scale)
            } else {
                Box::new(move |r| normal.sample(r))
            };
            for p in &mut params[spec.range()] {
                *p = to_f32_grid(fill(&mut rng));
            }
        }
        Ok(GenModel {
            config,
            vocab,
            layout,
            params,
        })
    }

    /// Rebuild from a flat parameter buffer laid out as [`GenModel::tensors`].
    pub fn from_params(config: ModelConfig, vocab: Vocab, params: Vec<f64>) -> Result<Self> {
        let problems = config.validate();
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let layout = Layout::new(&config, vocab.size());
        if params.len() != layout.total {
            return Err(Error::contract(format!(
                "expected {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        Ok(GenModel {
            config,
            vocab,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.layout.tensors
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let spec = self.layout.tensors.iter().find(|t| t.name == name)?.clone();
        Some(&mut self.params[spec.range()])
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    fn slice(&self, off: usize, len: usize) -> &[f64] {
        &self.params[off..off + len]
    }

    /// Run the network over `tokens`.
    pub fn forward(&self, tokens: &[u32]) -> Result<Forward> {
        self.forward_from(tokens, 0)
    }

    /// Forward pass that only projects positions `first..` to logits.
    pub fn forward_from(&self, tokens: &[u32], first: usize) -> Result<Forward> {
        let t_len = tokens.len();
        if t_len == 0 {
            return Err(Error::contract("forward on an empty sequence"));
        }
        if t_len > self.config.context {
            return Err(Error::contract(format!(
                "sequence of {t_len} tokens exceeds context {}",
                self.config.context
            )));
        }
        let v = self.vocab.size();
        if first >= t_len {
            return Err(Error::contract(format!("logit start {first} beyond sequence of {t_len}")));
        }
        if let Some(bad) = tokens.iter().find(|&&t| t as usize >= v) {
            return Err(Error::contract(format!("token {bad} outside vocabulary of {v}")));
        }
        let c = self.config.d_model;
        let f = self.config.ff_mult * c;
        let nh = self.config.heads;
        let hs = c / nh;
        let scale = 1.0 / (hs as f64).sqrt();
        let lo = &self.layout;

        let mut x = vec![0.0; t_len * c];
        for (t, &tok) in tokens.iter().enumerate() {
            let e = self.slice(lo.wte + tok as usize * c, c);
            let p = self.slice(lo.wpe + t * c, c);
            for i in 0..c {
                x[t * c + i] = e[i] + p[i];
            }
        }

        let mut caches = Vec::with_capacity(self.config.layers);
        for off in &lo.layers {
            let mut ln1 = vec![0.0; t_len * c];
            let mut ln1_mean = vec![0.0; t_len];
            let mut ln1_rstd = vec![0.0; t_len];
            layernorm(
                &mut ln1,
                &mut ln1_mean,
                &mut ln1_rstd,
                &x,
                self.slice(off.ln1_w, c),
                self.slice(off.ln1_b, c),
                c,
            );
            let mut qkv = vec![0.0; t_len * 3 * c];
            matmul(&mut qkv, &ln1, self.slice(off.qkv_w, 3 * c * c), self.slice(off.qkv_b, 3 * c), c, 3 * c);

            let mut att = vec![0.0; nh * t_len * t_len];
            let mut y = vec![0.0; t_len * c];
            for h in 0..nh {
                for t in 0..t_len {
                    let q = &qkv[t * 3 * c + h * hs..t * 3 * c + (h + 1) * hs];
                    let row = &mut att[(h * t_len + t) * t_len..(h * t_len + t + 1) * t_len];
                    let mut max = f64::NEG_INFINITY;
                    for u in 0..=t {
                        let k = &qkv[u * 3 * c + c + h * hs..u * 3 * c + c + (h + 1) * hs];
                        let s = q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale;
                        row[u] = s;
                        max = max.max(s);
                    }
                    let mut sum = 0.0;
                    for r in row.iter_mut().take(t + 1) {
                        *r = (*r - max).exp();
                        sum += *r;
                    }
                    for r in row.iter_mut().take(t + 1) {
                        *r /= sum;
                    }
                    let out = &mut y[t * c + h * hs..t * c + (h + 1) * hs];
                    for u in 0..=t {
                        let a = row[u];
                        let val = &qkv[u * 3 * c + 2 * c + h * hs..u * 3 * c + 2 * c + (h + 1) * hs];
                        for i in 0..hs {
                            out[i] += a * val[i];
                        }
                    }
                }
            }
            let mut o = vec![0.0; t_len * c];
            matmul(&mut o, &y, self.slice(off.proj_w, c * c), self.slice(off.proj_b, c), c, c);
            let x_in = x.clone();
            for (xi, oi) in x.iter_mut().zip(&o) {
                *xi += oi;
            }
            let x_mid = x.clone();

            let mut ln2 = vec![0.0; t_len * c];
            let mut ln2_mean = vec![0.0; t_len];
            let mut ln2_rstd = vec![0.0; t_len];
            layernorm(
                &mut ln2,
                &mut ln2_mean,
                &mut ln2_rstd,
                &x,
                self.slice(off.ln2_w, c),
                self.slice(off.ln2_b, c),
                c,
            );
            let mut fpre = vec![0.0; t_len * f];
            matmul(&mut fpre, &ln2, self.slice(off.fc_w, f * c), self.slice(off.fc_b, f), c, f);
            let g: Vec<f64> = fpre.iter().map(|&z| gelu(z)).collect();
            let mut m = vec![0.0; t_len * c];
            matmul(&mut m, &g, self.slice(off.fcp_w, c * f), self.slice(off.fcp_b, c), f, c);
            for (xi, mi) in x.iter_mut().zip(&m) {
                *xi += mi;
            }
            caches.push(LayerCache {
                x_in,
                ln1,
                ln1_mean,
                ln1_rstd,
                qkv,
                att,
                y,
                x_mid,
                ln2,
                ln2_mean,
                ln2_rstd,
                f: fpre,
                g,
            });
        }

        let mut lnf = vec![0.0; t_len * c];
        let mut lnf_mean = vec![0.0; t_len];
        let mut lnf_rstd = vec![0.0; t_len];
        layernorm(
            &mut lnf,
            &mut lnf_mean,
            &mut lnf_rstd,
            &x,
            self.slice(lo.lnf_w, c),
            self.slice(lo.lnf_b, c),
            c,
        );
        let mut logits = vec![0.0; (t_len - first) * v];
        matmul(
            &mut logits,
            &lnf[first * c..],
            self.slice(lo.head_w, v * c),
            self.slice(lo.head_b, v),
            c,
            v,
        );
        Ok(Forward {
            tokens: tokens.to_vec(),
            layers: caches,
            x_final: x,
            lnf,
            lnf_mean,
            lnf_rstd,
            logits,
            first,
            vocab: v,
        })
    }

    /// Logits for the token following `tokens`.
    pub fn next_logits(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        let fwd = self.forward(tokens)?;
        Ok(fwd.row(fwd.len() - 1).to_vec())
    }

    /// Gradient of a scalar loss with respect to every parameter, given the
    /// loss gradient with respect to the logits (same shape as `fwd.logits`).
    pub fn backward(&self, fwd: &Forward, dlogits: &[f64]) -> Vec<f64> {
        let mut grads = vec![0.0; self.params.len()];
        self.backward_into(fwd, dlogits, &mut grads);
        grads
    }

    /// As [`GenModel::backward`], accumulating into `grads`.
    pub fn backward_into(&self, fwd: &Forward, dlogits: &[f64], grads: &mut [f64]) {
        let t_len = fwd.len();
        let c = self.config.d_model;
        let f = self.config.ff_mult * c;
        let nh = self.config.heads;
        let hs = c / nh;
        let scale = 1.0 / (hs as f64).sqrt();
        let v = self.vocab.size();
        let lo = &self.layout;
        let first = fwd.first;
        assert_eq!(dlogits.len(), (t_len - first) * v, "dlogits shape");

        let mut dlnf = vec![0.0; t_len * c];
        {
            let (dw, db) = two_slices(grads, lo.head_w, v * c, lo.head_b, v);
            matmul_backward(
                &mut dlnf[first * c..],
                dw,
                db,
                dlogits,
                &fwd.lnf[first * c..],
                self.slice(lo.head_w, v * c),
                c,
                v,
            );
        }
        let mut dx = vec![0.0; t_len * c];
        {
            let (dw, db) = two_slices(grads, lo.lnf_w, c, lo.lnf_b, c);
            layernorm_backward(
                &mut dx,
                dw,
                db,
                &dlnf,
                &fwd.x_final,
                self.slice(lo.lnf_w, c),
                &fwd.lnf_mean,
                &fwd.lnf_rstd,
                c,
            );
        }

        for (off, cache) in lo.layers.iter().zip(&fwd.layers).rev() {
            // MLP branch: x_out = x_mid + proj(gelu(fc(ln2(x_mid))))
            let mut dg = vec![0.0; t_len * f];
            {
                let (dw, db) = two_slices(grads, off.fcp_w, c * f, off.fcp_b, c);
                matmul_backward(&mut dg, dw, db, &dx, &cache.g, self.slice(off.fcp_w, c * f), f, c);
            }
            let df: Vec<f64> = dg.iter().zip(&cache.f).map(|(d, &z)| d * gelu_grad(z)).collect();
            let mut dln2 = vec![0.0; t_len * c];
            {
                let (dw, db) = two_slices(grads, off.fc_w, f * c, off.fc_b, f);
                matmul_backward(&mut dln2, dw, db, &df, &cache.ln2, self.slice(off.fc_w, f * c), c, f);
            }
            {
                let (dw, db) = two_slices(grads, off.ln2_w, c, off.ln2_b, c);
                layernorm_backward(
                    &mut dx,
                    dw,
                    db,
                    &dln2,
                    &cache.x_mid,
                    self.slice(off.ln2_w, c),
                    &cache.ln2_mean,
                    &cache.ln2_rstd,
                    c,
                );
            }

            // attention branch: x_mid = x_in + proj(attn(ln1(x_in)))
            let mut dy = vec![0.0; t_len * c];
            {
                let (dw, db) = two_slices(grads, off.proj_w, c * c, off.proj_b, c);
                matmul_backward(&mut dy, dw, db, &dx, &cache.y, self.slice(off.proj_w, c * c), c, c);
            }
            let mut dqkv = vec![0.0; t_len * 3 * c];
            for h in 0..nh {
                for t in 0..t_len {
                    let att_row = &cache.att[(h * t_len + t) * t_len..(h * t_len + t + 1) * t_len];
                    let dy_t = &dy[t * c + h * hs..t * c + (h + 1) * hs];
                    let mut datt = vec![0.0; t + 1];
                    for u in 0..=t {
                        let vb = u * 3 * c + 2 * c + h * hs;
                        let mut s = 0.0;
                        for i in 0..hs {
                            s += dy_t[i] * cache.qkv[vb + i];
                            dqkv[vb + i] += att_row[u] * dy_t[i];
                        }
                        datt[u] = s;
                    }
                    let dot: f64 = (0..=t).map(|u| att_row[u] * datt[u]).sum();
                    let qb = t * 3 * c + h * hs;
                    for u in 0..=t {
                        let dpre = att_row[u] * (datt[u] - dot) * scale;
                        if dpre == 0.0 {
                            continue;
                        }
                        let kb = u * 3 * c + c + h * hs;
                        for i in 0..hs {
                            dqkv[qb + i] += dpre * cache.qkv[kb + i];
                            dqkv[kb + i] += dpre * cache.qkv[qb + i];
                        }
                    }
                }
            }
            let mut dln1 = vec![0.0; t_len * c];
            {
                let (dw, db) = two_slices(grads, off.qkv_w, 3 * c * c, off.qkv_b, 3 * c);
                matmul_backward(&mut dln1, dw, db, &dqkv, &cache.ln1, self.slice(off.qkv_w, 3 * c * c), c, 3 * c);
            }
            {
                let (dw, db) = two_slices(grads, off.ln1_w, c, off.ln1_b, c);
                layernorm_backward(
                    &mut dx,
                    dw,
                    db,
                    &dln1,
                    &cache.x_in,
                    self.slice(off.ln1_w, c),
                    &cache.ln1_mean,
                    &cache.ln1_rstd,
                    c,
                );
            }
        }

        for (t, &tok) in fwd.tokens.iter().enumerate() {
            let d = &dx[t * c..(t + 1) * c];
            let te = lo.wte + tok as usize * c;
            let pe = lo.wpe + t * c;
            for i in 0..c {
                grads[te + i] += d[i];
                grads[pe + i] += d[i];
            }
        }
    }
}

/// Two disjoint mutable windows of `buf`; the first must precede the second.
fn two_slices(buf: &mut [f64], a: usize, a_len: usize, b: usize, b_len: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a + a_len <= b);
    let (left, right) = buf.split_at_mut(b);
    (&mut left[a..a + a_len], &mut right[..b_len])
}
