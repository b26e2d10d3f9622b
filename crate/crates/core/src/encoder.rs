//! A small bidirectional transformer encoder in f64 with hand-written
//! backward passes, so gradients can be finite-difference checked exactly.
//!
//! Pre-norm blocks, learned positions, tanh-approximated GELU, full
//! (unmasked) self-attention. Selected positions can have their token
//! embedding replaced by an injected vector — that is how continuous
//! prompts and virtual demonstration blocks enter the sequence — and the
//! backward pass returns the gradient for each injected vector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    add_assign, matmul_nn, matmul_nt, matmul_tn, softmax_inplace, ParamStore, Tensor,
};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub ff_dim: usize,
    pub init_std: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.num_heads == 0 || self.num_layers == 0 {
            return Err(Error::InvalidConfig("encoder sizes must be >= 1".into()));
        }
        if self.dim % self.num_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "dim {} is not divisible by num_heads {}",
                self.dim, self.num_heads
            )));
        }
        if self.vocab_size == 0 || self.max_len == 0 || self.ff_dim == 0 {
            return Err(Error::InvalidConfig("encoder sizes must be >= 1".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.num_heads
    }

    /// Small config for unit tests.
    pub fn tiny(vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            max_len: 32,
            dim: 8,
            num_heads: 2,
            num_layers: 2,
            ff_dim: 16,
            init_std: 0.05,
        }
    }
}

/// Fresh encoder parameters. Weights are Gaussian with `init_std`, norms
/// start at identity, biases at zero.
pub fn init_params<R: Rng>(cfg: &EncoderConfig, rng: &mut R) -> ParamStore {
    let d = cfg.dim;
    let mut p = ParamStore::new();
    p.insert("tok_emb", Tensor::randn(&[cfg.vocab_size, d], cfg.init_std, rng));
    p.insert("pos_emb", Tensor::randn(&[cfg.max_len, d], cfg.init_std, rng));
    for l in 0..cfg.num_layers {
        p.insert(format!("l{l}.ln1.g"), Tensor::full(&[d], 1.0));
        p.insert(format!("l{l}.ln1.b"), Tensor::zeros(&[d]));
        for name in ["wq", "wk", "wv", "wo"] {
            p.insert(format!("l{l}.{name}"), Tensor::randn(&[d, d], cfg.init_std, rng));
        }
        for name in ["bq", "bk", "bv", "bo"] {
            p.insert(format!("l{l}.{name}"), Tensor::zeros(&[d]));
        }
        p.insert(format!("l{l}.ln2.g"), Tensor::full(&[d], 1.0));
        p.insert(format!("l{l}.ln2.b"), Tensor::zeros(&[d]));
        p.insert(format!("l{l}.w1"), Tensor::randn(&[d, cfg.ff_dim], cfg.init_std, rng));
        p.insert(format!("l{l}.b1"), Tensor::zeros(&[cfg.ff_dim]));
        p.insert(format!("l{l}.w2"), Tensor::randn(&[cfg.ff_dim, d], cfg.init_std, rng));
        p.insert(format!("l{l}.b2"), Tensor::zeros(&[d]));
    }
    p.insert("ln_f.g", Tensor::full(&[d], 1.0));
    p.insert("ln_f.b", Tensor::zeros(&[d]));
    // Untied masked-token output projection.
    p.insert("mlm.w", Tensor::randn(&[d, cfg.vocab_size], cfg.init_std, rng));
    p
}

/// Adds the `[CLS]`-head used by classifier fine-tuning.
pub fn add_classifier_head<R: Rng>(
    params: &mut ParamStore,
    cfg: &EncoderConfig,
    num_classes: usize,
    rng: &mut R,
) {
    params.insert("head.w", Tensor::randn(&[cfg.dim, num_classes], cfg.init_std, rng));
    params.insert("head.b", Tensor::zeros(&[num_classes]));
}

struct LayerCache {
    a_hat: Tensor,
    a_rstd: Vec<f64>,
    a: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    probs: Vec<Tensor>,
    ctx: Tensor,
    b_hat: Tensor,
    b_rstd: Vec<f64>,
    bnorm: Tensor,
    h_pre: Tensor,
    h_act: Tensor,
}

pub struct ForwardCache {
    token_ids: Vec<u32>,
    injections: Vec<(usize, Vec<f64>)>,
    layers: Vec<LayerCache>,
    f_hat: Tensor,
    f_rstd: Vec<f64>,
    /// Final hidden states, one row per position.
    pub hidden: Tensor,
}

fn layer_norm(x: &Tensor, g: &Tensor, b: &Tensor) -> (Tensor, Tensor, Vec<f64>) {
    let (rows, cols) = (x.rows(), x.cols());
    let mut y = Tensor::zeros(&[rows, cols]);
    let mut x_hat = Tensor::zeros(&[rows, cols]);
    let mut rstds = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        rstds.push(rstd);
        for c in 0..cols {
            let xh = (row[c] - mean) * rstd;
            x_hat.row_mut(r)[c] = xh;
            y.row_mut(r)[c] = g.data[c] * xh + b.data[c];
        }
    }
    (y, x_hat, rstds)
}

/// Returns `(dx, dg, db)`.
fn layer_norm_backward(
    dy: &Tensor,
    x_hat: &Tensor,
    rstds: &[f64],
    g: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (rows, cols) = (dy.rows(), dy.cols());
    let mut dx = Tensor::zeros(&[rows, cols]);
    let mut dg = Tensor::zeros(&[cols]);
    let mut db = Tensor::zeros(&[cols]);
    for r in 0..rows {
        let dy_r = dy.row(r);
        let xh_r = x_hat.row(r);
        let mut mean_dxh = 0.0;
        let mut mean_dxh_xh = 0.0;
        for c in 0..cols {
            db.data[c] += dy_r[c];
            dg.data[c] += dy_r[c] * xh_r[c];
            let dxh = dy_r[c] * g.data[c];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh_r[c];
        }
        mean_dxh /= cols as f64;
        mean_dxh_xh /= cols as f64;
        for c in 0..cols {
            let dxh = dy_r[c] * g.data[c];
            dx.row_mut(r)[c] = rstds[r] * (dxh - mean_dxh - xh_r[c] * mean_dxh_xh);
        }
    }
    (dx, dg, db)
}

fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let mut y = matmul_nn(x, w);
    for r in 0..y.rows() {
        add_assign(y.row_mut(r), &b.data);
    }
    y
}

/// Returns `(dx, dw, db)`.
fn linear_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let dw = matmul_tn(x, dy);
    let mut db = Tensor::zeros(&[dy.cols()]);
    for r in 0..dy.rows() {
        add_assign(&mut db.data, dy.row(r));
    }
    (matmul_nt(dy, w), dw, db)
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x.powi(3))).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x.powi(3))).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn head_slice(t: &Tensor, h: usize, dh: usize) -> Tensor {
    let mut out = Tensor::zeros(&[t.rows(), dh]);
    for r in 0..t.rows() {
        out.row_mut(r).copy_from_slice(&t.row(r)[h * dh..(h + 1) * dh]);
    }
    out
}

fn head_add(dst: &mut Tensor, src: &Tensor, h: usize, dh: usize) {
    for r in 0..src.rows() {
        add_assign(&mut dst.row_mut(r)[h * dh..(h + 1) * dh], src.row(r));
    }
}

/// Runs the encoder over one sequence. `injections` replaces the token
/// embedding (not the position embedding) at the given positions.
pub fn forward(
    cfg: &EncoderConfig,
    params: &ParamStore,
    token_ids: &[u32],
    injections: &[(usize, Vec<f64>)],
) -> Result<ForwardCache> {
    let t_len = token_ids.len();
    if t_len == 0 {
        return Err(Error::InvalidConfig("empty input sequence".into()));
    }
    if t_len > cfg.max_len {
        return Err(Error::OverLength {
            length: t_len,
            max: cfg.max_len,
        });
    }
    let d = cfg.dim;
    let tok_emb = params.get("tok_emb");
    let pos_emb = params.get("pos_emb");
    let mut x = Tensor::zeros(&[t_len, d]);
    for (pos, id) in token_ids.iter().enumerate() {
        if *id as usize >= cfg.vocab_size {
            return Err(Error::InvalidConfig(format!(
                "token id {id} is outside the vocabulary"
            )));
        }
        x.row_mut(pos).copy_from_slice(tok_emb.row(*id as usize));
    }
    for (pos, vec) in injections {
        if *pos >= t_len {
            return Err(Error::InvalidConfig(format!(
                "injection position {pos} is outside the sequence"
            )));
        }
        if vec.len() != d {
            return Err(Error::InvalidConfig(format!(
                "injection at {pos} has dim {}, expected {d}",
                vec.len()
            )));
        }
        x.row_mut(*pos).copy_from_slice(vec);
    }
    for pos in 0..t_len {
        add_assign(x.row_mut(pos), pos_emb.row(pos));
    }

    let nh = cfg.num_heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        let x_in = x.clone();
        let (a, a_hat, a_rstd) = layer_norm(
            &x_in,
            params.get(&format!("l{l}.ln1.g")),
            params.get(&format!("l{l}.ln1.b")),
        );
        let q = linear(&a, params.get(&format!("l{l}.wq")), params.get(&format!("l{l}.bq")));
        let k = linear(&a, params.get(&format!("l{l}.wk")), params.get(&format!("l{l}.bk")));
        let v = linear(&a, params.get(&format!("l{l}.wv")), params.get(&format!("l{l}.bv")));
        let mut ctx = Tensor::zeros(&[t_len, d]);
        let mut probs = Vec::with_capacity(nh);
        for h in 0..nh {
            let qh = head_slice(&q, h, dh);
            let kh = head_slice(&k, h, dh);
            let vh = head_slice(&v, h, dh);
            let mut scores = matmul_nt(&qh, &kh);
            for r in 0..t_len {
                let row = scores.row_mut(r);
                for s in row.iter_mut() {
                    *s *= scale;
                }
                softmax_inplace(row);
            }
            let ctx_h = matmul_nn(&scores, &vh);
            head_add(&mut ctx, &ctx_h, h, dh);
            probs.push(scores);
        }
        let o = linear(&ctx, params.get(&format!("l{l}.wo")), params.get(&format!("l{l}.bo")));
        let mut x_mid = x_in.clone();
        add_assign(&mut x_mid.data, &o.data);

        let (bnorm, b_hat, b_rstd) = layer_norm(
            &x_mid,
            params.get(&format!("l{l}.ln2.g")),
            params.get(&format!("l{l}.ln2.b")),
        );
        let h_pre = linear(&bnorm, params.get(&format!("l{l}.w1")), params.get(&format!("l{l}.b1")));
        let mut h_act = h_pre.clone();
        for v in h_act.data.iter_mut() {
            *v = gelu(*v);
        }
        let f2 = linear(&h_act, params.get(&format!("l{l}.w2")), params.get(&format!("l{l}.b2")));
        let mut x_out = x_mid.clone();
        add_assign(&mut x_out.data, &f2.data);

        layers.push(LayerCache {
            a_hat,
            a_rstd,
            a,
            q,
            k,
            v,
            probs,
            ctx,
            b_hat,
            b_rstd,
            bnorm,
            h_pre,
            h_act,
        });
        x = x_out;
    }

    let (hidden, f_hat, f_rstd) = layer_norm(&x, params.get("ln_f.g"), params.get("ln_f.b"));
    Ok(ForwardCache {
        token_ids: token_ids.to_vec(),
        injections: injections.to_vec(),
        layers,
        f_hat,
        f_rstd,
        hidden,
    })
}

/// Backpropagates `d_hidden` (gradient of the loss in the final hidden
/// states) through the cached forward pass. Parameter gradients accumulate
/// into `grads`; the returned list is the gradient for each injected
/// vector, in the order they were passed to [`forward`].
pub fn backward(
    cfg: &EncoderConfig,
    params: &ParamStore,
    cache: &ForwardCache,
    d_hidden: &Tensor,
    grads: &mut ParamStore,
) -> Vec<(usize, Vec<f64>)> {
    let t_len = cache.token_ids.len();
    let nh = cfg.num_heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let acc = |grads: &mut ParamStore, name: &str, t: &Tensor| {
        add_assign(&mut grads.get_mut(name).data, &t.data);
    };

    let (mut dx, dg, db) =
        layer_norm_backward(d_hidden, &cache.f_hat, &cache.f_rstd, params.get("ln_f.g"));
    acc(grads, "ln_f.g", &dg);
    acc(grads, "ln_f.b", &db);

    for l in (0..cfg.num_layers).rev() {
        let cache_l = &cache.layers[l];
        // MLP branch.
        let (mut d_hact, dw2, db2) =
            linear_backward(&cache_l.h_act, params.get(&format!("l{l}.w2")), &dx);
        acc(grads, &format!("l{l}.w2"), &dw2);
        acc(grads, &format!("l{l}.b2"), &db2);
        for (dv, pre) in d_hact.data.iter_mut().zip(cache_l.h_pre.data.iter()) {
            *dv *= gelu_grad(*pre);
        }
        let (d_bnorm, dw1, db1) =
            linear_backward(&cache_l.bnorm, params.get(&format!("l{l}.w1")), &d_hact);
        acc(grads, &format!("l{l}.w1"), &dw1);
        acc(grads, &format!("l{l}.b1"), &db1);
        let (d_xmid_from_ln, dg2, dbeta2) = layer_norm_backward(
            &d_bnorm,
            &cache_l.b_hat,
            &cache_l.b_rstd,
            params.get(&format!("l{l}.ln2.g")),
        );
        acc(grads, &format!("l{l}.ln2.g"), &dg2);
        acc(grads, &format!("l{l}.ln2.b"), &dbeta2);
        let mut d_xmid = dx;
        add_assign(&mut d_xmid.data, &d_xmid_from_ln.data);

        // Attention branch.
        let (d_ctx, dwo, dbo) =
            linear_backward(&cache_l.ctx, params.get(&format!("l{l}.wo")), &d_xmid);
        acc(grads, &format!("l{l}.wo"), &dwo);
        acc(grads, &format!("l{l}.bo"), &dbo);
        let mut dq = Tensor::zeros(&[t_len, cfg.dim]);
        let mut dk = Tensor::zeros(&[t_len, cfg.dim]);
        let mut dv = Tensor::zeros(&[t_len, cfg.dim]);
        for h in 0..nh {
            let d_ctx_h = head_slice(&d_ctx, h, dh);
            let kh = head_slice(&cache_l.k, h, dh);
            let qh = head_slice(&cache_l.q, h, dh);
            let vh = head_slice(&cache_l.v, h, dh);
            let p = &cache_l.probs[h];
            let mut dp = matmul_nt(&d_ctx_h, &vh);
            let dv_h = matmul_tn(p, &d_ctx_h);
            // Softmax rows: ds = p * (dp - sum(dp * p)), then the 1/sqrt(dh)
            // score scaling.
            for r in 0..t_len {
                let p_r = p.row(r);
                let dp_r = dp.row_mut(r);
                let sum: f64 = dp_r.iter().zip(p_r).map(|(a, b)| a * b).sum();
                for c in 0..t_len {
                    dp_r[c] = p_r[c] * (dp_r[c] - sum) * scale;
                }
            }
            let dq_h = matmul_nn(&dp, &kh);
            let dk_h = matmul_tn(&dp, &qh);
            head_add(&mut dq, &dq_h, h, dh);
            head_add(&mut dk, &dk_h, h, dh);
            head_add(&mut dv, &dv_h, h, dh);
        }
        let mut d_a = Tensor::zeros(&[t_len, cfg.dim]);
        for (w_name, b_name, dmat) in [("wq", "bq", &dq), ("wk", "bk", &dk), ("wv", "bv", &dv)] {
            let (d, dw, db) =
                linear_backward(&cache_l.a, params.get(&format!("l{l}.{w_name}")), dmat);
            acc(grads, &format!("l{l}.{w_name}"), &dw);
            acc(grads, &format!("l{l}.{b_name}"), &db);
            add_assign(&mut d_a.data, &d.data);
        }
        let (d_xin_from_ln, dg1, dbeta1) = layer_norm_backward(
            &d_a,
            &cache_l.a_hat,
            &cache_l.a_rstd,
            params.get(&format!("l{l}.ln1.g")),
        );
        acc(grads, &format!("l{l}.ln1.g"), &dg1);
        acc(grads, &format!("l{l}.ln1.b"), &dbeta1);
        let mut d_xin = d_xmid;
        add_assign(&mut d_xin.data, &d_xin_from_ln.data);
        dx = d_xin;
    }

    // dx is now the gradient in x0 = emb + pos.
    {
        let d_pos = grads.get_mut("pos_emb");
        for pos in 0..t_len {
            add_assign(d_pos.row_mut(pos), dx.row(pos));
        }
    }
    let injected: std::collections::HashSet<usize> =
        cache.injections.iter().map(|(p, _)| *p).collect();
    {
        let d_tok = grads.get_mut("tok_emb");
        for (pos, id) in cache.token_ids.iter().enumerate() {
            if !injected.contains(&pos) {
                add_assign(d_tok.row_mut(*id as usize), dx.row(pos));
            }
        }
    }
    cache
        .injections
        .iter()
        .map(|(pos, _)| (*pos, dx.row(*pos).to_vec()))
        .collect()
}

/// Logits over the label words: the masked-token scores at `pos`,
/// restricted to the verbalizer's word ids.
pub fn label_logits(params: &ParamStore, hidden: &Tensor, pos: usize, word_ids: &[u32]) -> Vec<f64> {
    let w = params.get("mlm.w");
    let h = hidden.row(pos);
    let v = w.cols();
    word_ids
        .iter()
        .map(|&id| {
            let col = id as usize;
            h.iter()
                .enumerate()
                .map(|(r, hv)| hv * w.data[r * v + col])
                .sum()
        })
        .collect()
}

/// Softmax over the label-word logits at `pos`.
pub fn label_distribution_from_hidden(
    params: &ParamStore,
    hidden: &Tensor,
    pos: usize,
    word_ids: &[u32],
) -> Vec<f64> {
    let mut logits = label_logits(params, hidden, pos, word_ids);
    softmax_inplace(&mut logits);
    logits
}

/// Cross entropy of `gold` under softmax over `logits`; also returns
/// d loss / d logits.
pub fn ce_from_logits(logits: &[f64], gold: usize) -> (f64, Vec<f64>) {
    let mut p = logits.to_vec();
    softmax_inplace(&mut p);
    let loss = -(p[gold].max(1e-300)).ln();
    let mut dlogits = p;
    dlogits[gold] -= 1.0;
    (loss, dlogits)
}

/// Accumulates the masked-classification backward: `dlogits` (over the
/// label words at `pos`) into the output matrix gradient and the hidden
/// gradient.
pub fn label_logits_backward(
    params: &ParamStore,
    grads: &mut ParamStore,
    hidden: &Tensor,
    pos: usize,
    word_ids: &[u32],
    dlogits: &[f64],
    d_hidden: &mut Tensor,
) {
    let w = params.get("mlm.w");
    let v = w.cols();
    let h = hidden.row(pos).to_vec();
    let dw = grads.get_mut("mlm.w");
    let d_h = d_hidden.row_mut(pos);
    for (c, &id) in word_ids.iter().enumerate() {
        let col = id as usize;
        for r in 0..h.len() {
            dw.data[r * v + col] += h[r] * dlogits[c];
            d_h[r] += dlogits[c] * w.data[r * v + col];
        }
    }
}

/// Classifier-head logits from the `[CLS]` hidden state.
pub fn head_logits(params: &ParamStore, hidden: &Tensor, cls_pos: usize) -> Vec<f64> {
    let w = params.get("head.w");
    let b = params.get("head.b");
    let h = hidden.row(cls_pos);
    let c = w.cols();
    (0..c)
        .map(|j| b.data[j] + h.iter().enumerate().map(|(r, hv)| hv * w.data[r * c + j]).sum::<f64>())
        .collect()
}

pub fn head_logits_backward(
    params: &ParamStore,
    grads: &mut ParamStore,
    hidden: &Tensor,
    cls_pos: usize,
    dlogits: &[f64],
    d_hidden: &mut Tensor,
) {
    let w = params.get("head.w");
    let c = w.cols();
    let h = hidden.row(cls_pos).to_vec();
    let dw = grads.get_mut("head.w");
    for (j, &dl) in dlogits.iter().enumerate() {
        for r in 0..h.len() {
            dw.data[r * c + j] += h[r] * dl;
        }
    }
    let db = grads.get_mut("head.b");
    add_assign(&mut db.data, dlogits);
    let d_h = d_hidden.row_mut(cls_pos);
    for (j, &dl) in dlogits.iter().enumerate() {
        for r in 0..d_h.len() {
            d_h[r] += dl * w.data[r * c + j];
        }
    }
}
