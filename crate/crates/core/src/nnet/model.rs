//! Pre-norm decoder-only transformer with learned absolute positions and
//! hand-written backpropagation.
//!
//! Activations are row-major `[N, C]` with `N = batch * seq_len`. Sequences in
//! a batch are right-padded; causal attention means padding never influences
//! real positions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::scalar::{gemm, Scalar, View};
use crate::rng::{rng_for, stream};
use crate::tokenizer::{Token, PAD};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub ff_dim: usize,
    /// Adds a read-out head on the residual stream entering the last layer.
    pub aux_head: bool,
    pub init_std: f64,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, max_seq_len: usize) -> Self {
        Self {
            vocab_size,
            max_seq_len,
            layers: 8,
            heads: 2,
            dim: 64,
            ff_dim: 256,
            aux_head: false,
            init_std: 0.02,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(ModelError::Config(format!("dim {} not divisible by {} heads", self.dim, self.heads)));
        }
        if self.layers == 0 || self.vocab_size == 0 || self.max_seq_len == 0 || self.ff_dim == 0 {
            return Err(ModelError::Config("sizes must be positive".into()));
        }
        if self.aux_head && self.layers < 2 {
            return Err(ModelError::Config("an auxiliary head needs at least two layers".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("token {token} at position {pos} is outside the vocabulary of {vocab}")]
    TokenOutOfVocab { token: Token, pos: usize, vocab: usize },
    #[error("sequence of {len} tokens exceeds the maximum of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("no positions selected for the loss")]
    EmptyLossMask,
    #[error("position {pos} outside a sequence of {len}")]
    PositionOutOfRange { pos: usize, len: usize },
    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { loss: f64, step: u64 },
    #[error("parameter blob has {got} values, expected {expected}")]
    ParamCount { got: usize, expected: usize },
}

/// Name, offset and shape of one parameter tensor in the flat buffer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamTensor {
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

#[derive(Debug, Clone)]
struct LayerOffsets {
    ln1_g: usize,
    ln1_b: usize,
    w_qkv: usize,
    b_qkv: usize,
    w_o: usize,
    b_o: usize,
    ln2_g: usize,
    ln2_b: usize,
    w_fc: usize,
    b_fc: usize,
    w_proj: usize,
    b_proj: usize,
}

#[derive(Debug, Clone)]
struct AuxOffsets {
    ln_g: usize,
    ln_b: usize,
    w: usize,
}

#[derive(Debug, Clone)]
struct Offsets {
    wte: usize,
    wpe: usize,
    layers: Vec<LayerOffsets>,
    lnf_g: usize,
    lnf_b: usize,
    w_head: usize,
    aux: Option<AuxOffsets>,
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Ones,
    Zeros,
}

fn layout(cfg: &ModelConfig) -> (Offsets, Vec<ParamTensor>, Vec<Init>) {
    let mut tensors = Vec::new();
    let mut inits = Vec::new();
    let mut total = 0;
    let mut add = |name: String, shape: Vec<usize>, init: Init| {
        let t = ParamTensor { name, offset: total, shape };
        total += t.len();
        let off = t.offset;
        tensors.push(t);
        inits.push(init);
        off
    };
    let (v, c, f) = (cfg.vocab_size, cfg.dim, cfg.ff_dim);
    let wte = add("wte".into(), vec![v, c], Init::Normal);
    let wpe = add("wpe".into(), vec![cfg.max_seq_len, c], Init::Normal);
    let layers = (0..cfg.layers)
        .map(|l| LayerOffsets {
            ln1_g: add(format!("h{l}.ln1.g"), vec![c], Init::Ones),
            ln1_b: add(format!("h{l}.ln1.b"), vec![c], Init::Zeros),
            w_qkv: add(format!("h{l}.attn.w_qkv"), vec![c, 3 * c], Init::Normal),
            b_qkv: add(format!("h{l}.attn.b_qkv"), vec![3 * c], Init::Zeros),
            w_o: add(format!("h{l}.attn.w_o"), vec![c, c], Init::Normal),
            b_o: add(format!("h{l}.attn.b_o"), vec![c], Init::Zeros),
            ln2_g: add(format!("h{l}.ln2.g"), vec![c], Init::Ones),
            ln2_b: add(format!("h{l}.ln2.b"), vec![c], Init::Zeros),
            w_fc: add(format!("h{l}.mlp.w_fc"), vec![c, f], Init::Normal),
            b_fc: add(format!("h{l}.mlp.b_fc"), vec![f], Init::Zeros),
            w_proj: add(format!("h{l}.mlp.w_proj"), vec![f, c], Init::Normal),
            b_proj: add(format!("h{l}.mlp.b_proj"), vec![c], Init::Zeros),
        })
        .collect();
    let lnf_g = add("lnf.g".into(), vec![c], Init::Ones);
    let lnf_b = add("lnf.b".into(), vec![c], Init::Zeros);
    let w_head = add("head.w".into(), vec![c, v], Init::Normal);
    let aux = cfg.aux_head.then(|| AuxOffsets {
        ln_g: add("aux.ln.g".into(), vec![c], Init::Ones),
        ln_b: add("aux.ln.b".into(), vec![c], Init::Zeros),
        w: add("aux.w".into(), vec![c, v], Init::Normal),
    });
    (Offsets { wte, wpe, layers, lnf_g, lnf_b, w_head, aux }, tensors, inits)
}

pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub params: Vec<T>,
    tensors: Vec<ParamTensor>,
    off: Offsets,
}

impl<T: Scalar> Clone for Model<T> {
    fn clone(&self) -> Self {
        Self { config: self.config.clone(), params: self.params.clone(), tensors: self.tensors.clone(), off: self.off.clone() }
    }
}

/// Layer-norm cache: normalised-and-scaled output plus row statistics.
struct LnCache<T> {
    out: Vec<T>,
    mean: Vec<T>,
    rstd: Vec<T>,
}

struct LayerCache<T> {
    x_in: Vec<T>,
    ln1: LnCache<T>,
    qkv: Vec<T>,
    /// Attention probabilities `[B, H, T, T]`, zero above the diagonal.
    att: Vec<T>,
    /// Concatenated head outputs before the output projection.
    y: Vec<T>,
    x_mid: Vec<T>,
    ln2: LnCache<T>,
    h: Vec<T>,
    th: Vec<T>,
    g: Vec<T>,
}

/// Cached activations of one forward pass over a padded batch.
pub struct Trace<T: Scalar> {
    pub batch: usize,
    pub seq_len: usize,
    tokens: Vec<Token>,
    layers: Vec<LayerCache<T>>,
    x_final: Vec<T>,
    lnf: LnCache<T>,
    aux_ln: Option<LnCache<T>>,
}

impl<T: Scalar> Trace<T> {
    pub fn rows(&self) -> usize {
        self.batch * self.seq_len
    }

    /// Attention probabilities of `(layer, sequence, head)` as a `T x T`
    /// row-major matrix.
    pub fn attention(&self, layer: usize, b: usize, h: usize, heads: usize) -> &[T] {
        let t = self.seq_len;
        let base = ((b * heads) + h) * t * t;
        &self.layers[layer].att[base..base + t * t]
    }

    /// Residual stream entering the last layer, `[N, C]`.
    pub fn interior_hidden(&self) -> &[T] {
        &self.layers.last().unwrap().x_in
    }
}

/// Per-position logits and interior hidden states for one sequence.
pub struct ForwardTrace<T: Scalar> {
    pub seq_len: usize,
    /// `[seq_len, vocab]`
    pub logits: Vec<T>,
    /// `[seq_len, dim]`, the residual stream entering the last layer.
    pub interior: Vec<T>,
    pub trace: Trace<T>,
}

struct GeluConsts<T> {
    c: T,
    k: T,
    k3: T,
    half: T,
}

impl<T: Scalar> GeluConsts<T> {
    fn new() -> Self {
        let k = T::from_f64_lossy(0.044715);
        Self {
            c: T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt()),
            k,
            k3: T::from_f64_lossy(3.0) * k,
            half: T::from_f64_lossy(0.5),
        }
    }
}

/// Tanh-approximated GELU; returns the activations and the tanh values the
/// backward pass reuses.
fn gelu_forward<T: Scalar>(h: &[T]) -> (Vec<T>, Vec<T>) {
    let gc = GeluConsts::<T>::new();
    let th: Vec<T> = h.iter().map(|&x| (gc.c * (x + gc.k * x * x * x)).tanh_fast()).collect();
    let g = h.iter().zip(&th).map(|(&x, &t)| gc.half * x * (T::one() + t)).collect();
    (g, th)
}

fn gelu_backward<T: Scalar>(dg: &mut [T], h: &[T], th: &[T]) {
    let gc = GeluConsts::<T>::new();
    let one = T::one();
    for ((d, &x), &t) in dg.iter_mut().zip(h).zip(th) {
        let local = gc.half * (one + t) + gc.half * x * (one - t * t) * gc.c * (one + gc.k3 * x * x);
        *d *= local;
    }
}

fn layer_norm<T: Scalar>(x: &[T], g: &[T], b: &[T], c: usize) -> LnCache<T> {
    let n = x.len() / c;
    let mut out = vec![T::zero(); x.len()];
    let mut mean = vec![T::zero(); n];
    let mut rstd = vec![T::zero(); n];
    let inv_c = T::one() / T::from_usize(c).unwrap();
    let eps = T::from_f64_lossy(LN_EPS);
    for r in 0..n {
        let row = &x[r * c..(r + 1) * c];
        let mu = row.iter().fold(T::zero(), |a, &v| a + v) * inv_c;
        let var = row.iter().fold(T::zero(), |a, &v| a + (v - mu) * (v - mu)) * inv_c;
        let rs = T::one() / (var + eps).sqrt();
        let o = &mut out[r * c..(r + 1) * c];
        for i in 0..c {
            o[i] = (row[i] - mu) * rs * g[i] + b[i];
        }
        mean[r] = mu;
        rstd[r] = rs;
    }
    LnCache { out, mean, rstd }
}

/// Accumulates parameter gradients and returns `dx` for a layer norm.
#[allow(clippy::too_many_arguments)]
fn layer_norm_backward<T: Scalar>(
    dout: &[T],
    x: &[T],
    cache: &LnCache<T>,
    g: &[T],
    dg: &mut [T],
    db: &mut [T],
    dx: &mut [T],
    c: usize,
) {
    let n = x.len() / c;
    let inv_c = T::one() / T::from_usize(c).unwrap();
    let mut xhat = vec![T::zero(); c];
    let mut dxhat = vec![T::zero(); c];
    for r in 0..n {
        let d = &dout[r * c..(r + 1) * c];
        if d.iter().all(|v| v.is_zero()) {
            continue;
        }
        let row = &x[r * c..(r + 1) * c];
        let (mu, rs) = (cache.mean[r], cache.rstd[r]);
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for i in 0..c {
            xhat[i] = (row[i] - mu) * rs;
            dxhat[i] = d[i] * g[i];
            dg[i] += d[i] * xhat[i];
            db[i] += d[i];
            mean_dxhat += dxhat[i];
            mean_dxhat_xhat += dxhat[i] * xhat[i];
        }
        mean_dxhat = mean_dxhat * inv_c;
        mean_dxhat_xhat = mean_dxhat_xhat * inv_c;
        let o = &mut dx[r * c..(r + 1) * c];
        for i in 0..c {
            o[i] += rs * (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat);
        }
    }
}

fn add_bias<T: Scalar>(x: &mut [T], bias: &[T]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (a, &b) in row.iter_mut().zip(bias) {
            *a += b;
        }
    }
}

fn col_sum_into<T: Scalar>(x: &[T], out: &mut [T]) {
    for row in x.chunks_exact(out.len()) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

/// Right-pads sequences into one `[B, T]` token block.
pub fn pack<S: AsRef<[Token]>>(seqs: &[S]) -> (Vec<Token>, usize) {
    let t = seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
    let mut out = vec![PAD; seqs.len() * t];
    for (b, s) in seqs.iter().enumerate() {
        out[b * t..b * t + s.as_ref().len()].copy_from_slice(s.as_ref());
    }
    (out, t)
}

impl<T: Scalar> Model<T> {
    /// Fresh model; each tensor draws from its own stream so adding the
    /// auxiliary head never changes the other tensors' initial values.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        use rand_distr::{Distribution, Normal};
        config.validate()?;
        let (off, tensors, inits) = layout(&config);
        let total = tensors.last().map(|t| t.offset + t.len()).unwrap_or(0);
        let mut params = vec![T::zero(); total];
        let normal = Normal::new(0.0, config.init_std).map_err(|e| ModelError::Config(e.to_string()))?;
        for (i, (t, init)) in tensors.iter().zip(&inits).enumerate() {
            let slot = &mut params[t.range()];
            match init {
                Init::Ones => slot.fill(T::one()),
                Init::Zeros => {}
                Init::Normal => {
                    let mut rng = rng_for(seed, stream::INIT, i as u64);
                    for p in slot.iter_mut() {
                        *p = T::from_f64_lossy(normal.sample(&mut rng));
                    }
                }
            }
        }
        Ok(Self { config, params, tensors, off })
    }

    /// Rebuilds a model around an existing parameter blob.
    pub fn from_params(config: ModelConfig, params: Vec<T>) -> Result<Self, ModelError> {
        config.validate()?;
        let (off, tensors, _) = layout(&config);
        let expected = tensors.last().map(|t| t.offset + t.len()).unwrap_or(0);
        if params.len() != expected {
            return Err(ModelError::ParamCount { got: params.len(), expected });
        }
        Ok(Self { config, params, tensors, off })
    }

    pub fn tensors(&self) -> &[ParamTensor] {
        &self.tensors
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn tensor(&self, name: &str) -> Option<&ParamTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    fn p(&self, off: usize, len: usize) -> &[T] {
        &self.params[off..off + len]
    }

    fn check_tokens(&self, tokens: &[Token], t: usize) -> Result<(), ModelError> {
        if t > self.config.max_seq_len {
            return Err(ModelError::SequenceTooLong { len: t, max: self.config.max_seq_len });
        }
        if let Some((i, &tok)) = tokens.iter().enumerate().find(|(_, &x)| x as usize >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfVocab { token: tok, pos: i % t.max(1), vocab: self.config.vocab_size });
        }
        Ok(())
    }

    /// Forward pass over a padded `[batch, seq_len]` token block.
    pub fn forward_batch(&self, tokens: &[Token], batch: usize, seq_len: usize) -> Result<Trace<T>, ModelError> {
        assert_eq!(tokens.len(), batch * seq_len);
        self.check_tokens(tokens, seq_len)?;
        let cfg = &self.config;
        let (c, f, nh, hd) = (cfg.dim, cfg.ff_dim, cfg.heads, cfg.head_dim());
        let n = batch * seq_len;
        let t = seq_len;

        let mut x = vec![T::zero(); n * c];
        for (r, &tok) in tokens.iter().enumerate() {
            let pos = r % t;
            let e = self.p(self.off.wte + tok as usize * c, c);
            let pe = self.p(self.off.wpe + pos * c, c);
            for i in 0..c {
                x[r * c + i] = e[i] + pe[i];
            }
        }

        let scale = T::one() / T::from_usize(hd).unwrap().sqrt();
        let mut layers = Vec::with_capacity(cfg.layers);
        for lo in &self.off.layers {
            let ln1 = layer_norm(&x, self.p(lo.ln1_g, c), self.p(lo.ln1_b, c), c);
            let mut qkv = vec![T::zero(); n * 3 * c];
            gemm(T::one(), &ln1.out, View::dense(n, c), &self.params, View::dense(c, 3 * c).at(lo.w_qkv), T::zero(), &mut qkv, View::dense(n, 3 * c));
            add_bias(&mut qkv, self.p(lo.b_qkv, 3 * c));

            let mut att = vec![T::zero(); batch * nh * t * t];
            let mut y = vec![T::zero(); n * c];
            for b in 0..batch {
                for h in 0..nh {
                    let qo = b * t * 3 * c + h * hd;
                    let a_off = (b * nh + h) * t * t;
                    let q = View::strided(qo, t, hd, 3 * c);
                    let k = View::strided(qo + c, t, hd, 3 * c);
                    gemm(scale, &qkv, q, &qkv, k.t(), T::zero(), &mut att, View::dense(t, t).at(a_off));
                    for i in 0..t {
                        let row = &mut att[a_off + i * t..a_off + (i + 1) * t];
                        let mx = row[..=i].iter().fold(T::neg_infinity(), |a, &v| a.max(v));
                        let mut z = T::zero();
                        for v in row[..=i].iter_mut() {
                            *v = (*v - mx).exp();
                            z += *v;
                        }
                        let inv = T::one() / z;
                        for v in row[..=i].iter_mut() {
                            *v *= inv;
                        }
                        for v in row[i + 1..].iter_mut() {
                            *v = T::zero();
                        }
                    }
                    let v = View::strided(qo + 2 * c, t, hd, 3 * c);
                    gemm(T::one(), &att, View::dense(t, t).at(a_off), &qkv, v, T::zero(), &mut y, View::strided(b * t * c + h * hd, t, hd, c));
                }
            }

            let mut x_mid = x.clone();
            gemm(T::one(), &y, View::dense(n, c), &self.params, View::dense(c, c).at(lo.w_o), T::one(), &mut x_mid, View::dense(n, c));
            add_bias(&mut x_mid, self.p(lo.b_o, c));

            let ln2 = layer_norm(&x_mid, self.p(lo.ln2_g, c), self.p(lo.ln2_b, c), c);
            let mut h = vec![T::zero(); n * f];
            gemm(T::one(), &ln2.out, View::dense(n, c), &self.params, View::dense(c, f).at(lo.w_fc), T::zero(), &mut h, View::dense(n, f));
            add_bias(&mut h, self.p(lo.b_fc, f));
            let (g, th) = gelu_forward(&h);

            let mut x_out = x_mid.clone();
            gemm(T::one(), &g, View::dense(n, f), &self.params, View::dense(f, c).at(lo.w_proj), T::one(), &mut x_out, View::dense(n, c));
            add_bias(&mut x_out, self.p(lo.b_proj, c));

            layers.push(LayerCache { x_in: x, ln1, qkv, att, y, x_mid, ln2, h, th, g });
            x = x_out;
        }
        let lnf = layer_norm(&x, self.p(self.off.lnf_g, c), self.p(self.off.lnf_b, c), c);
        let aux_ln = self.off.aux.as_ref().map(|a| {
            layer_norm(&layers.last().unwrap().x_in, self.p(a.ln_g, c), self.p(a.ln_b, c), c)
        });
        Ok(Trace { batch, seq_len, tokens: tokens.to_vec(), layers, x_final: x, lnf, aux_ln })
    }

    fn read_out(&self, src: &[T], w_off: usize, rows: &[usize]) -> Vec<T> {
        let (c, v) = (self.config.dim, self.config.vocab_size);
        let mut gathered = vec![T::zero(); rows.len() * c];
        for (i, &r) in rows.iter().enumerate() {
            gathered[i * c..(i + 1) * c].copy_from_slice(&src[r * c..(r + 1) * c]);
        }
        let mut out = vec![T::zero(); rows.len() * v];
        gemm(T::one(), &gathered, View::dense(rows.len(), c), &self.params, View::dense(c, v).at(w_off), T::zero(), &mut out, View::dense(rows.len(), v));
        out
    }

    /// Main-head logits `[rows.len(), vocab]` at flat row indices.
    pub fn logits(&self, trace: &Trace<T>, rows: &[usize]) -> Vec<T> {
        self.read_out(&trace.lnf.out, self.off.w_head, rows)
    }

    /// Auxiliary-head scores `[rows.len(), vocab]`.
    pub fn aux_scores(&self, trace: &Trace<T>, rows: &[usize]) -> Vec<T> {
        let aux = self.off.aux.as_ref().expect("model has no auxiliary head");
        self.read_out(&trace.aux_ln.as_ref().unwrap().out, aux.w, rows)
    }

    /// Forward pass for a single sequence with logits at every position.
    pub fn forward(&self, tokens: &[Token]) -> Result<ForwardTrace<T>, ModelError> {
        let t = tokens.len();
        let trace = self.forward_batch(tokens, 1, t)?;
        let rows: Vec<usize> = (0..t).collect();
        let logits = self.logits(&trace, &rows);
        let interior = trace.interior_hidden().to_vec();
        Ok(ForwardTrace { seq_len: t, logits, interior, trace })
    }

    /// Backpropagates output gradients into `grads` (same layout as
    /// `params`). `d_logits` / `d_aux` are `[rows.len(), vocab]`.
    pub fn backward(
        &self,
        trace: &Trace<T>,
        rows: &[usize],
        d_logits: &[T],
        aux: Option<(&[usize], &[T])>,
        grads: &mut [T],
    ) {
        assert_eq!(grads.len(), self.params.len());
        let cfg = &self.config;
        let (c, f, v, nh, hd) = (cfg.dim, cfg.ff_dim, cfg.vocab_size, cfg.heads, cfg.head_dim());
        let (batch, t) = (trace.batch, trace.seq_len);
        let n = batch * t;

        let mut dx = vec![T::zero(); n * c];
        let head_back = |src: &[T], w_off: usize, rows: &[usize], d: &[T], grads: &mut [T]| -> Vec<T> {
            let mut gathered = vec![T::zero(); rows.len() * c];
            for (i, &r) in rows.iter().enumerate() {
                gathered[i * c..(i + 1) * c].copy_from_slice(&src[r * c..(r + 1) * c]);
            }
            gemm(T::one(), &gathered, View::dense(rows.len(), c).t(), d, View::dense(rows.len(), v), T::one(), grads, View::dense(c, v).at(w_off));
            let mut dg = vec![T::zero(); rows.len() * c];
            gemm(T::one(), d, View::dense(rows.len(), v), &self.params, View::dense(c, v).at(w_off).t(), T::zero(), &mut dg, View::dense(rows.len(), c));
            let mut full = vec![T::zero(); n * c];
            for (i, &r) in rows.iter().enumerate() {
                for k in 0..c {
                    full[r * c + k] += dg[i * c + k];
                }
            }
            full
        };

        let dlnf = head_back(&trace.lnf.out, self.off.w_head, rows, d_logits, grads);
        {
            let (gs, rest) = grads.split_at_mut(self.off.lnf_b);
            let dg = &mut gs[self.off.lnf_g..self.off.lnf_g + c];
            let db = &mut rest[..c];
            layer_norm_backward(&dlnf, &trace.x_final, &trace.lnf, self.p(self.off.lnf_g, c), dg, db, &mut dx, c);
        }

        let scale = T::one() / T::from_usize(hd).unwrap().sqrt();
        for (li, (lo, lc)) in self.off.layers.iter().zip(&trace.layers).enumerate().rev() {
            // FFN
            let mut dg = vec![T::zero(); n * f];
            gemm(T::one(), &lc.g, View::dense(n, f).t(), &dx, View::dense(n, c), T::one(), grads, View::dense(f, c).at(lo.w_proj));
            col_sum_into(&dx, &mut grads[lo.b_proj..lo.b_proj + c]);
            gemm(T::one(), &dx, View::dense(n, c), &self.params, View::dense(f, c).at(lo.w_proj).t(), T::zero(), &mut dg, View::dense(n, f));
            gelu_backward(&mut dg, &lc.h, &lc.th);
            gemm(T::one(), &lc.ln2.out, View::dense(n, c).t(), &dg, View::dense(n, f), T::one(), grads, View::dense(c, f).at(lo.w_fc));
            col_sum_into(&dg, &mut grads[lo.b_fc..lo.b_fc + f]);
            let mut dln2 = vec![T::zero(); n * c];
            gemm(T::one(), &dg, View::dense(n, f), &self.params, View::dense(c, f).at(lo.w_fc).t(), T::zero(), &mut dln2, View::dense(n, c));
            {
                let (gs, rest) = grads.split_at_mut(lo.ln2_b);
                layer_norm_backward(&dln2, &lc.x_mid, &lc.ln2, self.p(lo.ln2_g, c), &mut gs[lo.ln2_g..lo.ln2_g + c], &mut rest[..c], &mut dx, c);
            }

            // Attention
            gemm(T::one(), &lc.y, View::dense(n, c).t(), &dx, View::dense(n, c), T::one(), grads, View::dense(c, c).at(lo.w_o));
            col_sum_into(&dx, &mut grads[lo.b_o..lo.b_o + c]);
            let mut dy = vec![T::zero(); n * c];
            gemm(T::one(), &dx, View::dense(n, c), &self.params, View::dense(c, c).at(lo.w_o).t(), T::zero(), &mut dy, View::dense(n, c));

            let mut dqkv = vec![T::zero(); n * 3 * c];
            let mut dp = vec![T::zero(); t * t];
            for b in 0..batch {
                for h in 0..nh {
                    let qo = b * t * 3 * c + h * hd;
                    let a_off = (b * nh + h) * t * t;
                    let yv = View::strided(b * t * c + h * hd, t, hd, c);
                    let vv = View::strided(qo + 2 * c, t, hd, 3 * c);
                    let p = View::dense(t, t).at(a_off);
                    gemm(T::one(), &dy, yv, &lc.qkv, vv.t(), T::zero(), &mut dp, View::dense(t, t));
                    gemm(T::one(), &lc.att, p.t(), &dy, yv, T::one(), &mut dqkv, vv);
                    for i in 0..t {
                        let prow = &lc.att[a_off + i * t..a_off + (i + 1) * t];
                        let drow = &mut dp[i * t..(i + 1) * t];
                        let dot = (0..=i).fold(T::zero(), |a, j| a + prow[j] * drow[j]);
                        for j in 0..=i {
                            drow[j] = prow[j] * (drow[j] - dot) * scale;
                        }
                        for d in drow[i + 1..].iter_mut() {
                            *d = T::zero();
                        }
                    }
                    let qv = View::strided(qo, t, hd, 3 * c);
                    let kv = View::strided(qo + c, t, hd, 3 * c);
                    gemm(T::one(), &dp, View::dense(t, t), &lc.qkv, kv, T::one(), &mut dqkv, qv);
                    gemm(T::one(), &dp, View::dense(t, t).t(), &lc.qkv, qv, T::one(), &mut dqkv, kv);
                }
            }
            gemm(T::one(), &lc.ln1.out, View::dense(n, c).t(), &dqkv, View::dense(n, 3 * c), T::one(), grads, View::dense(c, 3 * c).at(lo.w_qkv));
            col_sum_into(&dqkv, &mut grads[lo.b_qkv..lo.b_qkv + 3 * c]);
            let mut dln1 = vec![T::zero(); n * c];
            gemm(T::one(), &dqkv, View::dense(n, 3 * c), &self.params, View::dense(c, 3 * c).at(lo.w_qkv).t(), T::zero(), &mut dln1, View::dense(n, c));
            {
                let (gs, rest) = grads.split_at_mut(lo.ln1_b);
                layer_norm_backward(&dln1, &lc.x_in, &lc.ln1, self.p(lo.ln1_g, c), &mut gs[lo.ln1_g..lo.ln1_g + c], &mut rest[..c], &mut dx, c);
            }

            // The auxiliary head reads the stream entering the last layer.
            if li == cfg.layers - 1 {
                if let (Some((aux_rows, d_aux)), Some(ao), Some(aux_ln)) = (aux, self.off.aux.as_ref(), trace.aux_ln.as_ref()) {
                    let dln = head_back(&aux_ln.out, ao.w, aux_rows, d_aux, grads);
                    let (gs, rest) = grads.split_at_mut(ao.ln_b);
                    layer_norm_backward(&dln, &lc.x_in, aux_ln, self.p(ao.ln_g, c), &mut gs[ao.ln_g..ao.ln_g + c], &mut rest[..c], &mut dx, c);
                }
            }
        }

        for (r, &tok) in trace.tokens.iter().enumerate() {
            let pos = r % t;
            let d = &dx[r * c..(r + 1) * c];
            let e = self.off.wte + tok as usize * c;
            for i in 0..c {
                grads[e + i] += d[i];
            }
            let pe = self.off.wpe + pos * c;
            for i in 0..c {
                grads[pe + i] += d[i];
            }
        }
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
