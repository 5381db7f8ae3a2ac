//! Decoder-only transformer over interleaved `x, y` tokens, with a
//! hand-written backward pass.
//!
//! A sequence of `m` points is fed as `x_1, y_1, ..., x_{m-1}, y_{m-1}, x_m`
//! (`2m - 1` tokens). The model reads out one scalar at every x-token, which
//! estimates that point's label from the pairs before it.
//!
//! Blocks are pre-LayerNorm with causal multi-head attention and a GELU MLP
//! of width `4D`. All parameters live in one flat buffer; [`Layout`] records
//! where each tensor sits.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, stream};

const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IclConfig {
    pub input_dim: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_context: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for IclConfig {
    fn default() -> Self {
        Self {
            input_dim: 5,
            embed_dim: 64,
            layers: 2,
            heads: 2,
            max_context: 40,
            learning_rate: 1e-3,
            batch_size: 64,
            steps: 5000,
            seed: 0,
        }
    }
}

impl IclConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_dim", self.input_dim),
            ("embed_dim", self.embed_dim),
            ("layers", self.layers),
            ("heads", self.heads),
            ("max_context", self.max_context),
            ("batch_size", self.batch_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be positive")));
        }
        if self.input_dim > 10 {
            return Err(Error::InvalidConfig(format!(
                "input_dim {} exceeds the supported maximum of 10",
                self.input_dim
            )));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning rate must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// Token positions needed for `max_context` pairs plus the query.
    pub fn max_tokens(&self) -> usize {
        2 * self.max_context + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub offset: usize,
    pub len: usize,
}

impl Span {
    fn range(self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone)]
struct LayerLayout {
    ln1_g: Span,
    ln1_b: Span,
    wq: Span,
    bq: Span,
    wk: Span,
    bk: Span,
    wv: Span,
    bv: Span,
    wo: Span,
    bo: Span,
    ln2_g: Span,
    ln2_b: Span,
    w1: Span,
    b1: Span,
    w2: Span,
    b2: Span,
}

/// Kind of initialization a tensor receives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Zero,
    One,
}

#[derive(Debug, Clone)]
pub struct Layout {
    wx: Span,
    bx: Span,
    wy: Span,
    by: Span,
    pos: Span,
    layers: Vec<LayerLayout>,
    lnf_g: Span,
    lnf_b: Span,
    wr: Span,
    br: Span,
    tensors: Vec<(TensorInfo, Span, Init)>,
    total: usize,
}

struct LayoutBuilder {
    tensors: Vec<(TensorInfo, Span, Init)>,
    total: usize,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> Span {
        let len = shape.iter().product();
        let span = Span {
            offset: self.total,
            len,
        };
        self.total += len;
        self.tensors.push((
            TensorInfo {
                name,
                shape: shape.to_vec(),
            },
            span,
            init,
        ));
        span
    }
}

impl Layout {
    pub fn new(cfg: &IclConfig) -> Self {
        let d = cfg.input_dim;
        let e = cfg.embed_dim;
        let mut b = LayoutBuilder {
            tensors: Vec::new(),
            total: 0,
        };
        let wx = b.add("embed_x.weight".into(), &[e, d], Init::Normal);
        let bx = b.add("embed_x.bias".into(), &[e], Init::Zero);
        let wy = b.add("embed_y.weight".into(), &[e, 1], Init::Normal);
        let by = b.add("embed_y.bias".into(), &[e], Init::Zero);
        let pos = b.add("pos_embed".into(), &[cfg.max_tokens(), e], Init::Normal);
        let layers = (0..cfg.layers)
            .map(|l| {
                let p = |n: &str| format!("block{l}.{n}");
                LayerLayout {
                    ln1_g: b.add(p("ln1.gain"), &[e], Init::One),
                    ln1_b: b.add(p("ln1.bias"), &[e], Init::Zero),
                    wq: b.add(p("attn.q.weight"), &[e, e], Init::Normal),
                    bq: b.add(p("attn.q.bias"), &[e], Init::Zero),
                    wk: b.add(p("attn.k.weight"), &[e, e], Init::Normal),
                    bk: b.add(p("attn.k.bias"), &[e], Init::Zero),
                    wv: b.add(p("attn.v.weight"), &[e, e], Init::Normal),
                    bv: b.add(p("attn.v.bias"), &[e], Init::Zero),
                    wo: b.add(p("attn.out.weight"), &[e, e], Init::Normal),
                    bo: b.add(p("attn.out.bias"), &[e], Init::Zero),
                    ln2_g: b.add(p("ln2.gain"), &[e], Init::One),
                    ln2_b: b.add(p("ln2.bias"), &[e], Init::Zero),
                    w1: b.add(p("mlp.fc.weight"), &[4 * e, e], Init::Normal),
                    b1: b.add(p("mlp.fc.bias"), &[4 * e], Init::Zero),
                    w2: b.add(p("mlp.proj.weight"), &[e, 4 * e], Init::Normal),
                    b2: b.add(p("mlp.proj.bias"), &[e], Init::Zero),
                }
            })
            .collect();
        let lnf_g = b.add("ln_f.gain".into(), &[e], Init::One);
        let lnf_b = b.add("ln_f.bias".into(), &[e], Init::Zero);
        let wr = b.add("readout.weight".into(), &[1, e], Init::Normal);
        let br = b.add("readout.bias".into(), &[1], Init::Zero);
        Layout {
            wx,
            bx,
            wy,
            by,
            pos,
            layers,
            lnf_g,
            lnf_b,
            wr,
            br,
            tensors: b.tensors,
            total: b.total,
        }
    }

    pub fn num_params(&self) -> usize {
        self.total
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&TensorInfo, std::ops::Range<usize>)> {
        self.tensors.iter().map(|(t, s, _)| (t, s.range()))
    }
}

/// Adam moments and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
}

#[derive(Debug, Clone)]
pub struct IclModel {
    pub config: IclConfig,
    pub params: Vec<f64>,
    pub adam: AdamState,
    layout: Layout,
}

/// A batch of sequences. Sequence `b` has points `xs[b][i]` with labels
/// `ys[b][i]`; every point's label is a target and all but the last are fed
/// as context tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub xs: Vec<Vec<Vec<f64>>>,
    pub ys: Vec<Vec<f64>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }
}

// ---------------------------------------------------------------------------
// dense kernels

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out[s] = W in[s] + b` with `W` stored row-major as `out_dim x in_dim`.
fn linear_fwd(inp: &[f64], in_dim: usize, w: &[f64], b: &[f64], out: &mut [f64]) {
    let out_dim = b.len();
    let rows = inp.len() / in_dim;
    assert!(out.len() == rows * out_dim && w.len() == out_dim * in_dim);
    for o in out.chunks_exact_mut(out_dim) {
        o.copy_from_slice(b);
    }
    // out (rows x out) += inp (rows x in) * W^T (in x out)
    unsafe {
        matrixmultiply::dgemm(
            rows,
            in_dim,
            out_dim,
            1.0,
            inp.as_ptr(),
            in_dim as isize,
            1,
            w.as_ptr(),
            1,
            in_dim as isize,
            1.0,
            out.as_mut_ptr(),
            out_dim as isize,
            1,
        );
    }
}

/// Accumulates `dW += dout^T inp`, `db += colsum(dout)` and, when given,
/// `din += dout W`.
fn linear_bwd(
    inp: &[f64],
    in_dim: usize,
    w: &[f64],
    dout: &[f64],
    out_dim: usize,
    din: Option<&mut [f64]>,
    dw: &mut [f64],
    db: &mut [f64],
) {
    let rows = dout.len() / out_dim;
    assert!(inp.len() >= rows * in_dim && dw.len() == out_dim * in_dim && w.len() == out_dim * in_dim);
    for g in dout.chunks_exact(out_dim) {
        axpy(1.0, g, db);
    }
    unsafe {
        matrixmultiply::dgemm(
            out_dim,
            rows,
            in_dim,
            1.0,
            dout.as_ptr(),
            1,
            out_dim as isize,
            inp.as_ptr(),
            in_dim as isize,
            1,
            1.0,
            dw.as_mut_ptr(),
            in_dim as isize,
            1,
        );
    }
    if let Some(din) = din {
        assert!(din.len() >= rows * in_dim);
        unsafe {
            matrixmultiply::dgemm(
                rows,
                out_dim,
                in_dim,
                1.0,
                dout.as_ptr(),
                out_dim as isize,
                1,
                w.as_ptr(),
                in_dim as isize,
                1,
                1.0,
                din.as_mut_ptr(),
                in_dim as isize,
                1,
            );
        }
    }
}

struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
    out: Vec<f64>,
}

fn layer_norm_fwd(x: &[f64], dim: usize, g: &[f64], b: &[f64]) -> LnCache {
    let rows = x.len() / dim;
    let mut xhat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * dim..(r + 1) * dim];
        let mean = row.iter().sum::<f64>() / dim as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for j in 0..dim {
            let h = (row[j] - mean) * rs;
            xhat[r * dim + j] = h;
            out[r * dim + j] = g[j] * h + b[j];
        }
    }
    LnCache { xhat, rstd, out }
}

/// Accumulates into `dx`, `dg`, `db`.
fn layer_norm_bwd(
    cache: &LnCache,
    dim: usize,
    g: &[f64],
    dy: &[f64],
    dx: &mut [f64],
    dg: &mut [f64],
    db: &mut [f64],
) {
    let rows = dy.len() / dim;
    let mut dxhat = vec![0.0; dim];
    for r in 0..rows {
        let xh = &cache.xhat[r * dim..(r + 1) * dim];
        let d = &dy[r * dim..(r + 1) * dim];
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for j in 0..dim {
            dg[j] += d[j] * xh[j];
            db[j] += d[j];
            dxhat[j] = d[j] * g[j];
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * xh[j];
        }
        mean_d /= dim as f64;
        mean_dx /= dim as f64;
        let rs = cache.rstd[r];
        for j in 0..dim {
            dx[r * dim + j] += rs * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

// ---------------------------------------------------------------------------
// forward / backward

struct LayerCache {
    ln1: LnCache,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Per head, `S x S` row-major attention weights (zero above the diagonal).
    att: Vec<f64>,
    ctx: Vec<f64>,
    ln2: LnCache,
    pre: Vec<f64>,
    act: Vec<f64>,
}

struct SeqCache {
    tokens: usize,
    layers: Vec<LayerCache>,
    lnf: LnCache,
}

impl IclModel {
    /// Parameters drawn from `N(0, 0.02^2)`, biases zero, LayerNorm gains one.
    pub fn init(config: IclConfig) -> Result<Self> {
        Self::init_with_std(config, INIT_STD)
    }

    pub fn init_with_std(config: IclConfig, std: f64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = rng::seeded(config.seed, stream::INIT);
        let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let mut params = vec![0.0; layout.total];
        for (_, span, init) in &layout.tensors {
            for p in &mut params[span.range()] {
                *p = match init {
                    Init::Normal => normal.sample(&mut rng),
                    Init::Zero => 0.0,
                    Init::One => 1.0,
                };
            }
        }
        let adam = AdamState::new(layout.total);
        Ok(Self {
            config,
            params,
            adam,
            layout,
        })
    }

    /// Rebuilds a model from stored parameters.
    pub fn from_parts(config: IclConfig, params: Vec<f64>, adam: Option<AdamState>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(Error::DimensionMismatch {
                expected: layout.total,
                found: params.len(),
            });
        }
        let adam = adam.unwrap_or_else(|| AdamState::new(layout.total));
        Ok(Self {
            config,
            params,
            adam,
            layout,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    fn p(&self, s: Span) -> &[f64] {
        &self.params[s.range()]
    }

    fn check_sequence(&self, xs: &[Vec<f64>]) -> Result<()> {
        if xs.is_empty() {
            return Err(Error::InvalidConfig("sequence needs at least a query point".into()));
        }
        let pairs = xs.len() - 1;
        if pairs > self.config.max_context {
            return Err(Error::SequenceTooLong {
                len: pairs,
                max: self.config.max_context,
            });
        }
        if let Some(x) = xs.iter().find(|x| x.len() != self.config.input_dim) {
            return Err(Error::DimensionMismatch {
                expected: self.config.input_dim,
                found: x.len(),
            });
        }
        Ok(())
    }

    fn forward_seq(&self, xs: &[Vec<f64>], ys: &[f64]) -> (Vec<f64>, SeqCache) {
        let cfg = &self.config;
        let e = cfg.embed_dim;
        let d = cfg.input_dim;
        let m = xs.len();
        let s_len = 2 * m - 1;
        let lay = &self.layout;

        let mut h = vec![0.0; s_len * e];
        let wx = self.p(lay.wx);
        let bx = self.p(lay.bx);
        let wy = self.p(lay.wy);
        let by = self.p(lay.by);
        let pos = self.p(lay.pos);
        for t in 0..s_len {
            let row = &mut h[t * e..(t + 1) * e];
            let i = t / 2;
            if t % 2 == 0 {
                for j in 0..e {
                    row[j] = bx[j] + dot(&wx[j * d..(j + 1) * d], &xs[i]);
                }
            } else {
                for j in 0..e {
                    row[j] = by[j] + wy[j] * ys[i];
                }
            }
            axpy(1.0, &pos[t * e..(t + 1) * e], row);
        }

        let heads = cfg.heads;
        let hd = cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut layers = Vec::with_capacity(cfg.layers);
        for ll in &lay.layers {
            let x_in = h;
            let ln1 = layer_norm_fwd(&x_in, e, self.p(ll.ln1_g), self.p(ll.ln1_b));
            let mut q = vec![0.0; s_len * e];
            let mut k = vec![0.0; s_len * e];
            let mut v = vec![0.0; s_len * e];
            linear_fwd(&ln1.out, e, self.p(ll.wq), self.p(ll.bq), &mut q);
            linear_fwd(&ln1.out, e, self.p(ll.wk), self.p(ll.bk), &mut k);
            linear_fwd(&ln1.out, e, self.p(ll.wv), self.p(ll.bv), &mut v);

            let mut att = vec![0.0; heads * s_len * s_len];
            let mut ctx = vec![0.0; s_len * e];
            for hh in 0..heads {
                let c0 = hh * hd;
                for i in 0..s_len {
                    let a = &mut att[(hh * s_len + i) * s_len..(hh * s_len + i + 1) * s_len];
                    let qi = &q[i * e + c0..i * e + c0 + hd];
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let sc = dot(qi, &k[j * e + c0..j * e + c0 + hd]) * scale;
                        a[j] = sc;
                        mx = mx.max(sc);
                    }
                    let mut z = 0.0;
                    for aj in a.iter_mut().take(i + 1) {
                        *aj = (*aj - mx).exp();
                        z += *aj;
                    }
                    let out = &mut ctx[i * e + c0..i * e + c0 + hd];
                    for j in 0..=i {
                        a[j] /= z;
                        axpy(a[j], &v[j * e + c0..j * e + c0 + hd], out);
                    }
                }
            }
            let mut x_mid = x_in.clone();
            let mut proj = vec![0.0; s_len * e];
            linear_fwd(&ctx, e, self.p(ll.wo), self.p(ll.bo), &mut proj);
            axpy(1.0, &proj, &mut x_mid);

            let ln2 = layer_norm_fwd(&x_mid, e, self.p(ll.ln2_g), self.p(ll.ln2_b));
            let mut pre = vec![0.0; s_len * 4 * e];
            linear_fwd(&ln2.out, e, self.p(ll.w1), self.p(ll.b1), &mut pre);
            let act: Vec<f64> = pre.iter().map(|&x| gelu(x)).collect();
            let mut mlp = vec![0.0; s_len * e];
            linear_fwd(&act, 4 * e, self.p(ll.w2), self.p(ll.b2), &mut mlp);
            h = x_mid;
            axpy(1.0, &mlp, &mut h);

            layers.push(LayerCache {
                ln1,
                q,
                k,
                v,
                att,
                ctx,
                ln2,
                pre,
                act,
            });
        }

        let lnf = layer_norm_fwd(&h, e, self.p(lay.lnf_g), self.p(lay.lnf_b));
        let wr = self.p(lay.wr);
        let br = self.p(lay.br)[0];
        let preds = (0..m)
            .map(|i| br + dot(wr, &lnf.out[2 * i * e..(2 * i + 1) * e]))
            .collect();
        (
            preds,
            SeqCache {
                tokens: s_len,
                layers,
                lnf,
            },
        )
    }

    fn backward_seq(
        &self,
        xs: &[Vec<f64>],
        ys: &[f64],
        cache: &SeqCache,
        dpred: &[f64],
        grad: &mut [f64],
    ) {
        let cfg = &self.config;
        let e = cfg.embed_dim;
        let d = cfg.input_dim;
        let s_len = cache.tokens;
        let lay = &self.layout;

        // readout and final norm
        let mut dlnf = vec![0.0; s_len * e];
        {
            let wr = self.p(lay.wr);
            for (i, &g) in dpred.iter().enumerate() {
                let t = 2 * i;
                grad[lay.br.offset] += g;
                axpy(g, &cache.lnf.out[t * e..(t + 1) * e], &mut grad[lay.wr.range()]);
                axpy(g, wr, &mut dlnf[t * e..(t + 1) * e]);
            }
        }
        let mut dh = vec![0.0; s_len * e];
        {
            let (dg, db) = two_spans(grad, lay.lnf_g, lay.lnf_b);
            layer_norm_bwd(&cache.lnf, e, self.p(lay.lnf_g), &dlnf, &mut dh, dg, db);
        }

        let heads = cfg.heads;
        let hd = cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        for (ll, lc) in lay.layers.iter().zip(&cache.layers).rev() {
            // MLP branch
            let mut dx_mid = dh.clone();
            let mut dact = vec![0.0; s_len * 4 * e];
            {
                let (dw, db) = two_spans(grad, ll.w2, ll.b2);
                linear_bwd(&lc.act, 4 * e, self.p(ll.w2), &dh, e, Some(&mut dact), dw, db);
            }
            for (g, &x) in dact.iter_mut().zip(&lc.pre) {
                *g *= gelu_grad(x);
            }
            let mut dln2 = vec![0.0; s_len * e];
            {
                let (dw, db) = two_spans(grad, ll.w1, ll.b1);
                linear_bwd(&lc.ln2.out, e, self.p(ll.w1), &dact, 4 * e, Some(&mut dln2), dw, db);
            }
            {
                let (dg, db) = two_spans(grad, ll.ln2_g, ll.ln2_b);
                layer_norm_bwd(&lc.ln2, e, self.p(ll.ln2_g), &dln2, &mut dx_mid, dg, db);
            }

            // attention branch
            let mut dx_in = dx_mid.clone();
            let mut dctx = vec![0.0; s_len * e];
            {
                let (dw, db) = two_spans(grad, ll.wo, ll.bo);
                linear_bwd(&lc.ctx, e, self.p(ll.wo), &dx_mid, e, Some(&mut dctx), dw, db);
            }
            let mut dq = vec![0.0; s_len * e];
            let mut dk = vec![0.0; s_len * e];
            let mut dv = vec![0.0; s_len * e];
            let mut da = vec![0.0; s_len];
            for hh in 0..heads {
                let c0 = hh * hd;
                for i in 0..s_len {
                    let a = &lc.att[(hh * s_len + i) * s_len..(hh * s_len + i + 1) * s_len];
                    let go = &dctx[i * e + c0..i * e + c0 + hd];
                    let mut sum = 0.0;
                    for j in 0..=i {
                        da[j] = dot(go, &lc.v[j * e + c0..j * e + c0 + hd]);
                        sum += a[j] * da[j];
                        axpy(a[j], go, &mut dv[j * e + c0..j * e + c0 + hd]);
                    }
                    for j in 0..=i {
                        let ds = a[j] * (da[j] - sum) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        axpy(ds, &lc.k[j * e + c0..j * e + c0 + hd], &mut dq[i * e + c0..i * e + c0 + hd]);
                        axpy(ds, &lc.q[i * e + c0..i * e + c0 + hd], &mut dk[j * e + c0..j * e + c0 + hd]);
                    }
                }
            }
            let mut dln1 = vec![0.0; s_len * e];
            for (w, b, g) in [(ll.wq, ll.bq, &dq), (ll.wk, ll.bk, &dk), (ll.wv, ll.bv, &dv)] {
                let (dw, db) = two_spans(grad, w, b);
                linear_bwd(&lc.ln1.out, e, self.p(w), g, e, Some(&mut dln1), dw, db);
            }
            {
                let (dg, db) = two_spans(grad, ll.ln1_g, ll.ln1_b);
                layer_norm_bwd(&lc.ln1, e, self.p(ll.ln1_g), &dln1, &mut dx_in, dg, db);
            }
            dh = dx_in;
        }

        // embeddings
        axpy(1.0, &dh, &mut grad[lay.pos.offset..lay.pos.offset + s_len * e]);
        for t in 0..s_len {
            let g = &dh[t * e..(t + 1) * e];
            let i = t / 2;
            if t % 2 == 0 {
                axpy(1.0, g, &mut grad[lay.bx.range()]);
                let dw = &mut grad[lay.wx.range()];
                for (j, &gj) in g.iter().enumerate() {
                    axpy(gj, &xs[i], &mut dw[j * d..(j + 1) * d]);
                }
            } else {
                axpy(1.0, g, &mut grad[lay.by.range()]);
                axpy(ys[i], g, &mut grad[lay.wy.range()]);
            }
        }
    }

    /// Predictions at every x-token for one sequence of points. `ys` must
    /// hold at least `xs.len() - 1` labels; only those are fed.
    pub fn forward(&self, xs: &[Vec<f64>], ys: &[f64]) -> Result<Vec<f64>> {
        self.check_sequence(xs)?;
        if ys.len() + 1 < xs.len() {
            return Err(Error::DimensionMismatch {
                expected: xs.len() - 1,
                found: ys.len(),
            });
        }
        Ok(self.forward_seq(xs, ys).0)
    }

    pub fn forward_batch(&self, batch: &Batch) -> Result<Vec<Vec<f64>>> {
        batch
            .xs
            .iter()
            .zip(&batch.ys)
            .map(|(xs, ys)| self.forward(xs, ys))
            .collect()
    }

    /// Prediction for the last point of `xs` given the preceding pairs.
    pub fn predict_query(&self, context: &[(Vec<f64>, f64)], query: &[f64]) -> Result<f64> {
        let mut xs: Vec<Vec<f64>> = context.iter().map(|(x, _)| x.clone()).collect();
        xs.push(query.to_vec());
        let ys: Vec<f64> = context.iter().map(|(_, y)| *y).collect();
        Ok(*self.forward(&xs, &ys)?.last().expect("query prediction"))
    }

    fn validate_batch(&self, batch: &Batch) -> Result<()> {
        if batch.is_empty() || batch.xs.len() != batch.ys.len() {
            return Err(Error::InvalidConfig("batch is empty or misaligned".into()));
        }
        for (xs, ys) in batch.xs.iter().zip(&batch.ys) {
            self.check_sequence(xs)?;
            if xs.len() != ys.len() {
                return Err(Error::DimensionMismatch {
                    expected: xs.len(),
                    found: ys.len(),
                });
            }
            if ys.iter().chain(xs.iter().flatten()).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { row: 0, col: 0 });
            }
        }
        Ok(())
    }

    /// Mean squared error over every x-position of every sequence.
    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        self.validate_batch(batch)?;
        let preds = self.forward_batch(batch)?;
        Ok(loss_mse(&preds, &batch.ys))
    }

    /// Loss and its gradient with respect to every parameter.
    pub fn loss_and_grad(&self, batch: &Batch) -> Result<(f64, Vec<f64>)> {
        self.validate_batch(batch)?;
        let count: usize = batch.ys.iter().map(Vec::len).sum();
        let norm = 1.0 / count as f64;
        let mut grad = vec![0.0; self.layout.total];
        let mut total = 0.0;
        for (xs, ys) in batch.xs.iter().zip(&batch.ys) {
            let (preds, cache) = self.forward_seq(xs, ys);
            let dpred: Vec<f64> = preds
                .iter()
                .zip(ys)
                .map(|(p, y)| {
                    total += (p - y) * (p - y);
                    2.0 * (p - y) * norm
                })
                .collect();
            self.backward_seq(xs, ys, &cache, &dpred, &mut grad);
        }
        Ok((total * norm, grad))
    }

    /// One Adam step at learning rate `lr`; returns the pre-update loss.
    pub fn train_step(&mut self, batch: &Batch, lr: f64) -> Result<f64> {
        let (loss, grad) = self.loss_and_grad(batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.adam.step as usize,
            });
        }
        let mut adam = std::mem::replace(&mut self.adam, AdamState::new(0));
        adam.update(&mut self.params, &grad, lr);
        self.adam = adam;
        if self.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step: self.adam.step as usize,
            });
        }
        Ok(loss)
    }

    /// Perturbs one parameter; used by gradient checks.
    pub fn param_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.params[i]
    }
}

fn two_spans(buf: &mut [f64], a: Span, b: Span) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a.offset + a.len <= b.offset);
    let (lo, hi) = buf.split_at_mut(b.offset);
    (&mut lo[a.range()], &mut hi[..b.len])
}

/// Mean of squared errors over all positions of all rows.
pub fn loss_mse(predictions: &[Vec<f64>], targets: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (p, t) in predictions.iter().zip(targets) {
        for (a, b) in p.iter().zip(t) {
            total += (a - b) * (a - b);
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Draws a standard-normal batch; test helper and warm-up input.
pub fn random_batch(rng: &mut impl Rng, batch: usize, points: usize, dim: usize) -> Batch {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let xs: Vec<Vec<Vec<f64>>> = (0..batch)
        .map(|_| {
            (0..points)
                .map(|_| (0..dim).map(|_| normal.sample(rng)).collect())
                .collect()
        })
        .collect();
    let ys = (0..batch)
        .map(|_| (0..points).map(|_| normal.sample(rng)).collect())
        .collect();
    Batch { xs, ys }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny(seed: u64) -> IclConfig {
        IclConfig {
            input_dim: 2,
            embed_dim: 8,
            layers: 1,
            heads: 2,
            max_context: 3,
            learning_rate: 1e-3,
            batch_size: 2,
            steps: 1,
            seed,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = IclConfig::default();
        assert_eq!(c.head_dim(), 32);
        assert!(c.validate().is_ok());
        c.embed_dim = 63;
        assert!(matches!(IclModel::init(c.clone()), Err(Error::InvalidConfig(_))));
        c.embed_dim = 64;
        c.input_dim = 11;
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let a = IclModel::init(tiny(4)).unwrap();
        let b = IclModel::init(tiny(4)).unwrap();
        let c = IclModel::init(tiny(5)).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
        assert_eq!(a.num_params(), Layout::new(&tiny(9)).num_params());
    }

    #[test]
    fn loss_examples() {
        assert_eq!(loss_mse(&[vec![1.0, 2.0]], &[vec![1.0, 2.0]]), 0.0);
        assert_eq!(loss_mse(&[vec![1.5, 2.5]], &[vec![1.0, 2.0]]), 0.25);
        assert_eq!(loss_mse(&[vec![2.0]], &[vec![0.0]]), 4.0);
    }

    #[test]
    fn too_long_sequence_rejected() {
        let m = IclModel::init(tiny(0)).unwrap();
        let xs = vec![vec![0.0, 0.0]; 5];
        assert!(matches!(
            m.forward(&xs, &[0.0; 4]),
            Err(Error::SequenceTooLong { len: 4, max: 3 })
        ));
    }

    #[test]
    fn causal_prefix_invariance() {
        let m = IclModel::init_with_std(tiny(1), 0.5).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let b = random_batch(&mut rng, 1, 4, 2);
        let base = m.forward(&b.xs[0], &b.ys[0]).unwrap();
        let mut xs = b.xs[0].clone();
        let mut ys = b.ys[0].clone();
        xs[3] = vec![9.0, -9.0];
        ys[2] = 100.0;
        let out = m.forward(&xs, &ys).unwrap();
        // y_3 is token 5, which only x_4 (token 6) sees
        assert_eq!(out[..3], base[..3]);
        assert_ne!(out[3], base[3]);
    }

    #[test]
    fn identical_rows_identical_outputs() {
        let m = IclModel::init_with_std(tiny(1), 0.3).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let b = random_batch(&mut rng, 1, 3, 2);
        let batch = Batch {
            xs: vec![b.xs[0].clone(); 3],
            ys: vec![b.ys[0].clone(); 3],
        };
        let out = m.forward_batch(&batch).unwrap();
        assert_eq!(out[0], out[1]);
        assert_eq!(out[1], out[2]);
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut m = IclModel::init(tiny(3)).unwrap();
        let before = m.params.clone();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let b = random_batch(&mut rng, 2, 4, 2);
        m.train_step(&b, 0.0).unwrap();
        assert_eq!(m.params, before);
        assert_eq!(m.adam.step, 1);
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for x in [-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
