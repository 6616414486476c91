//! Pre-norm causal transformer with a hand-written reverse pass.
//!
//! The forward pass processes one position at a time against a key/value
//! cache. Full-sequence evaluation, incremental decoding and the traced
//! forward used for gradients all run through [`Transformer::step`], so
//! their logits agree bit for bit.

use super::params::{BlockLayout, Layout, ModelConfig, ModelParams};
use crate::error::{NeatError, Result};
use crate::tokens::TokenId;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_K * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + GELU_K * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * u * u)
}

/// `out = b + x W` with `W` row-major `[x.len(), out.len()]`.
fn affine(x: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
    let n_out = out.len();
    out.copy_from_slice(b);
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &w[i * n_out..(i + 1) * n_out];
        for (o, &wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
}

/// Reverse of [`affine`]: accumulates `dW += x^T dy`, `db += dy` and
/// `dx += W dy`.
fn affine_back(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    dx: &mut [f64],
) {
    let n_out = dy.len();
    for (d, &g) in db.iter_mut().zip(dy) {
        *d += g;
    }
    for (i, &xi) in x.iter().enumerate() {
        let row = &w[i * n_out..(i + 1) * n_out];
        let drow = &mut dw[i * n_out..(i + 1) * n_out];
        let mut acc = 0.0;
        for j in 0..n_out {
            drow[j] += xi * dy[j];
            acc += row[j] * dy[j];
        }
        dx[i] += acc;
    }
}

/// Layer norm; returns `(xhat, rstd)` and writes the affine output.
fn layer_norm(x: &[f64], g: &[f64], b: &[f64], out: &mut [f64]) -> (Vec<f64>, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * rstd).collect();
    for i in 0..x.len() {
        out[i] = g[i] * xhat[i] + b[i];
    }
    (xhat, rstd)
}

fn layer_norm_back(
    xhat: &[f64],
    rstd: f64,
    g: &[f64],
    dy: &[f64],
    dg: &mut [f64],
    db: &mut [f64],
    dx: &mut [f64],
) {
    let n = xhat.len() as f64;
    let mut dxhat = vec![0.0; xhat.len()];
    for i in 0..xhat.len() {
        dg[i] += dy[i] * xhat[i];
        db[i] += dy[i];
        dxhat[i] = dy[i] * g[i];
    }
    let mean_d = dxhat.iter().sum::<f64>() / n;
    let mean_dx = dxhat.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / n;
    for i in 0..xhat.len() {
        dx[i] += rstd * (dxhat[i] - mean_d - xhat[i] * mean_dx);
    }
}

/// Cached keys and values, one flat `[len, d]` buffer per block.
#[derive(Clone, Debug)]
pub struct KvCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl KvCache {
    pub fn new(cfg: &ModelConfig) -> Self {
        KvCache {
            keys: vec![Vec::new(); cfg.n_blocks],
            values: vec![Vec::new(); cfg.n_blocks],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Clone, Debug, Default)]
struct BlockTrace {
    ln1_xhat: Vec<f64>,
    ln1_rstd: f64,
    h1: Vec<f64>,
    q: Vec<f64>,
    /// Attention weights per head over positions `0..=p`, heads concatenated.
    attn: Vec<f64>,
    ctx: Vec<f64>,
    ln2_xhat: Vec<f64>,
    ln2_rstd: f64,
    h2: Vec<f64>,
    u: Vec<f64>,
    act: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
struct PositionTrace {
    token: TokenId,
    blocks: Vec<BlockTrace>,
    lnf_xhat: Vec<f64>,
    lnf_rstd: f64,
    hf: Vec<f64>,
}

/// Activations of a full-sequence forward pass, kept for the reverse pass.
#[derive(Clone, Debug)]
pub struct Trace {
    positions: Vec<PositionTrace>,
    cache: KvCache,
    logits: Vec<Vec<f64>>,
}

impl Trace {
    /// Logits after each position; row `p` scores the token at `p + 1`.
    pub fn logits(&self) -> &[Vec<f64>] {
        &self.logits
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Borrowed view of parameters with precomputed tensor offsets.
pub struct Transformer<'a> {
    params: &'a [f64],
    cfg: ModelConfig,
    layout: Layout,
}

impl<'a> Transformer<'a> {
    pub fn new(params: &'a ModelParams) -> Self {
        let cfg = *params.config();
        Transformer {
            params: params.as_slice(),
            cfg,
            layout: cfg.layout(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn t(&self, r: &std::ops::Range<usize>) -> &'a [f64] {
        &self.params[r.clone()]
    }

    fn check_token(&self, token: TokenId) -> Result<()> {
        if token as usize >= self.cfg.vocab {
            return Err(NeatError::Domain(format!(
                "token {token} outside vocabulary of size {}",
                self.cfg.vocab
            )));
        }
        Ok(())
    }

    /// Feeds one token at the next position and returns the next-token
    /// logits.
    pub fn step(&self, token: TokenId, cache: &mut KvCache) -> Result<Vec<f64>> {
        self.step_inner(token, cache, None)
    }

    fn step_inner(
        &self,
        token: TokenId,
        cache: &mut KvCache,
        mut rec: Option<&mut PositionTrace>,
    ) -> Result<Vec<f64>> {
        self.check_token(token)?;
        let pos = cache.len;
        if pos >= self.cfg.max_len {
            return Err(NeatError::Length(format!(
                "position {pos} exceeds context length {}",
                self.cfg.max_len
            )));
        }
        let d = self.cfg.d_model;
        let f = self.cfg.d_ff();
        let n_heads = self.cfg.n_heads;
        let hd = self.cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let lay = &self.layout;

        let tok = &self.t(&lay.tok_emb)[token as usize * d..(token as usize + 1) * d];
        let pe = &self.t(&lay.pos_emb)[pos * d..(pos + 1) * d];
        let mut x: Vec<f64> = tok.iter().zip(pe).map(|(a, b)| a + b).collect();

        if let Some(r) = rec.as_deref_mut() {
            r.token = token;
        }

        for (bi, bl) in lay.blocks.iter().enumerate() {
            let mut h1 = vec![0.0; d];
            let (ln1_xhat, ln1_rstd) = layer_norm(&x, self.t(&bl.ln1_g), self.t(&bl.ln1_b), &mut h1);
            let mut q = vec![0.0; d];
            let mut k = vec![0.0; d];
            let mut v = vec![0.0; d];
            affine(&h1, self.t(&bl.wq), self.t(&bl.bq), &mut q);
            affine(&h1, self.t(&bl.wk), self.t(&bl.bk), &mut k);
            affine(&h1, self.t(&bl.wv), self.t(&bl.bv), &mut v);
            cache.keys[bi].extend_from_slice(&k);
            cache.values[bi].extend_from_slice(&v);
            let keys = &cache.keys[bi];
            let values = &cache.values[bi];
            let n_ctx = pos + 1;

            let mut attn = vec![0.0; n_heads * n_ctx];
            let mut ctx = vec![0.0; d];
            for h in 0..n_heads {
                let qh = &q[h * hd..(h + 1) * hd];
                let row = &mut attn[h * n_ctx..(h + 1) * n_ctx];
                for (j, s) in row.iter_mut().enumerate() {
                    let kj = &keys[j * d + h * hd..j * d + (h + 1) * hd];
                    *s = scale * qh.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                }
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for s in row.iter_mut() {
                    *s = (*s - m).exp();
                    z += *s;
                }
                for s in row.iter_mut() {
                    *s /= z;
                }
                let ch = &mut ctx[h * hd..(h + 1) * hd];
                for (j, &a) in row.iter().enumerate() {
                    let vj = &values[j * d + h * hd..j * d + (h + 1) * hd];
                    for (c, &vv) in ch.iter_mut().zip(vj) {
                        *c += a * vv;
                    }
                }
            }
            let mut o = vec![0.0; d];
            affine(&ctx, self.t(&bl.wo), self.t(&bl.bo), &mut o);
            let x_mid: Vec<f64> = x.iter().zip(&o).map(|(a, b)| a + b).collect();

            let mut h2 = vec![0.0; d];
            let (ln2_xhat, ln2_rstd) =
                layer_norm(&x_mid, self.t(&bl.ln2_g), self.t(&bl.ln2_b), &mut h2);
            let mut u = vec![0.0; f];
            affine(&h2, self.t(&bl.w1), self.t(&bl.b1), &mut u);
            let act: Vec<f64> = u.iter().map(|&z| gelu(z)).collect();
            let mut ff = vec![0.0; d];
            affine(&act, self.t(&bl.w2), self.t(&bl.b2), &mut ff);
            let x_out: Vec<f64> = x_mid.iter().zip(&ff).map(|(a, b)| a + b).collect();

            if let Some(r) = rec.as_deref_mut() {
                r.blocks.push(BlockTrace {
                    ln1_xhat,
                    ln1_rstd,
                    h1,
                    q,
                    attn,
                    ctx,
                    ln2_xhat,
                    ln2_rstd,
                    h2,
                    u,
                    act,
                });
            }
            x = x_out;
        }
        cache.len += 1;

        let mut hf = vec![0.0; d];
        let (lnf_xhat, lnf_rstd) = layer_norm(&x, self.t(&lay.lnf_g), self.t(&lay.lnf_b), &mut hf);
        let mut logits = vec![0.0; self.cfg.vocab];
        affine(&hf, self.t(&lay.w_out), self.t(&lay.b_out), &mut logits);
        if let Some(r) = rec {
            r.lnf_xhat = lnf_xhat;
            r.lnf_rstd = lnf_rstd;
            r.hf = hf;
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(NeatError::Numeric("non-finite logits".into()));
        }
        Ok(logits)
    }

    fn check_sequence(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() {
            return Err(NeatError::Length("empty context".into()));
        }
        if tokens.len() > self.cfg.max_len {
            return Err(NeatError::Length(format!(
                "sequence of {} tokens exceeds context length {}",
                tokens.len(),
                self.cfg.max_len
            )));
        }
        Ok(())
    }

    /// Runs a full sequence and returns the logits after its last token.
    pub fn last_logits(&self, tokens: &[TokenId]) -> Result<Vec<f64>> {
        self.check_sequence(tokens)?;
        let mut cache = KvCache::new(&self.cfg);
        let mut logits = Vec::new();
        for &t in tokens {
            logits = self.step(t, &mut cache)?;
        }
        Ok(logits)
    }

    /// Feeds a prefix into a fresh cache; returns the cache and the logits
    /// after the prefix.
    pub fn prime(&self, tokens: &[TokenId]) -> Result<(KvCache, Vec<f64>)> {
        self.check_sequence(tokens)?;
        let mut cache = KvCache::new(&self.cfg);
        let mut logits = Vec::new();
        for &t in tokens {
            logits = self.step(t, &mut cache)?;
        }
        Ok((cache, logits))
    }

    /// Forward pass that records every activation needed by
    /// [`Transformer::backward`].
    pub fn forward(&self, tokens: &[TokenId]) -> Result<Trace> {
        self.check_sequence(tokens)?;
        let mut cache = KvCache::new(&self.cfg);
        let mut positions = Vec::with_capacity(tokens.len());
        let mut logits = Vec::with_capacity(tokens.len());
        for &t in tokens {
            let mut rec = PositionTrace::default();
            logits.push(self.step_inner(t, &mut cache, Some(&mut rec))?);
            positions.push(rec);
        }
        Ok(Trace {
            positions,
            cache,
            logits,
        })
    }

    /// Accumulates into `grad` the gradient of a scalar whose derivative
    /// with respect to `trace.logits()[p][v]` is `dlogits[p][v]`. Rows of
    /// `dlogits` may be empty to mark positions with no direct contribution.
    pub fn backward(&self, trace: &Trace, dlogits: &[Vec<f64>], grad: &mut [f64]) {
        let d = self.cfg.d_model;
        let f = self.cfg.d_ff();
        let n_heads = self.cfg.n_heads;
        let hd = self.cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let lay = &self.layout;
        let n = trace.positions.len();
        debug_assert_eq!(grad.len(), self.params.len());

        // Residual-stream gradient at the output of the last block.
        let mut dx: Vec<Vec<f64>> = vec![vec![0.0; d]; n];
        {
            let (w_out, b_out) = (lay.w_out.clone(), lay.b_out.clone());
            let (g_f, b_f) = (lay.lnf_g.clone(), lay.lnf_b.clone());
            for p in 0..n {
                let Some(dl) = dlogits.get(p).filter(|r| !r.is_empty()) else {
                    continue;
                };
                let pt = &trace.positions[p];
                let mut dhf = vec![0.0; d];
                backprop_affine(grad, w_out.clone(), b_out.clone(), self.t(&w_out), &pt.hf, dl, &mut dhf);
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                layer_norm_back(
                    &pt.lnf_xhat,
                    pt.lnf_rstd,
                    self.t(&g_f),
                    &dhf,
                    &mut dg,
                    &mut db,
                    &mut dx[p],
                );
                add_into(&mut grad[g_f.clone()], &dg);
                add_into(&mut grad[b_f.clone()], &db);
            }
        }

        for (bi, bl) in lay.blocks.iter().enumerate().rev() {
            let keys = &trace.cache.keys[bi];
            let values = &trace.cache.values[bi];
            let mut dkeys = vec![0.0; n * d];
            let mut dvalues = vec![0.0; n * d];
            let mut dq_all = vec![vec![0.0; d]; n];

            // Feed-forward and output projection run per position; attention
            // couples positions, so key/value gradients are collected first
            // (walking positions from last to first) and projected after.
            for p in (0..n).rev() {
                let bt = &trace.positions[p].blocks[bi];
                // x_out = x_mid + W2 gelu(W1 ln2(x_mid))
                let dx_out = dx[p].clone();
                let mut dact = vec![0.0; f];
                backprop_affine(grad, bl.w2.clone(), bl.b2.clone(), self.t(&bl.w2), &bt.act, &dx_out, &mut dact);
                let du: Vec<f64> = dact.iter().zip(&bt.u).map(|(g, &u)| g * gelu_grad(u)).collect();
                let mut dh2 = vec![0.0; d];
                backprop_affine(grad, bl.w1.clone(), bl.b1.clone(), self.t(&bl.w1), &bt.h2, &du, &mut dh2);
                let mut dx_mid = dx_out;
                backprop_ln(grad, bl, false, self, &bt.ln2_xhat, bt.ln2_rstd, &dh2, &mut dx_mid);

                // x_mid = x_in + Wo ctx
                let mut dctx = vec![0.0; d];
                backprop_affine(grad, bl.wo.clone(), bl.bo.clone(), self.t(&bl.wo), &bt.ctx, &dx_mid, &mut dctx);

                let n_ctx = p + 1;
                let dq = &mut dq_all[p];
                for h in 0..n_heads {
                    let a = &bt.attn[h * n_ctx..(h + 1) * n_ctx];
                    let dch = &dctx[h * hd..(h + 1) * hd];
                    let mut da = vec![0.0; n_ctx];
                    for j in 0..n_ctx {
                        let vj = &values[j * d + h * hd..j * d + (h + 1) * hd];
                        da[j] = dch.iter().zip(vj).map(|(x, y)| x * y).sum();
                        let dvj = &mut dvalues[j * d + h * hd..j * d + (h + 1) * hd];
                        for (dv, &g) in dvj.iter_mut().zip(dch) {
                            *dv += a[j] * g;
                        }
                    }
                    let dot: f64 = a.iter().zip(&da).map(|(x, y)| x * y).sum();
                    let qh = &bt.q[h * hd..(h + 1) * hd];
                    for j in 0..n_ctx {
                        let ds = a[j] * (da[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &keys[j * d + h * hd..j * d + (h + 1) * hd];
                        for i in 0..hd {
                            dq[h * hd + i] += ds * kj[i];
                        }
                        let dkj = &mut dkeys[j * d + h * hd..j * d + (h + 1) * hd];
                        for (dk, &qv) in dkj.iter_mut().zip(qh) {
                            *dk += ds * qv;
                        }
                    }
                }
                dx[p] = dx_mid;
            }

            for p in 0..n {
                let bt = &trace.positions[p].blocks[bi];
                let mut dh1 = vec![0.0; d];
                backprop_affine(grad, bl.wq.clone(), bl.bq.clone(), self.t(&bl.wq), &bt.h1, &dq_all[p], &mut dh1);
                backprop_affine(grad, bl.wk.clone(), bl.bk.clone(), self.t(&bl.wk), &bt.h1, &dkeys[p * d..(p + 1) * d], &mut dh1);
                backprop_affine(grad, bl.wv.clone(), bl.bv.clone(), self.t(&bl.wv), &bt.h1, &dvalues[p * d..(p + 1) * d], &mut dh1);
                let mut dx_in = std::mem::take(&mut dx[p]);
                backprop_ln(grad, bl, true, self, &bt.ln1_xhat, bt.ln1_rstd, &dh1, &mut dx_in);
                dx[p] = dx_in;
            }
        }

        for (p, dxp) in dx.iter().enumerate() {
            let t = trace.positions[p].token as usize;
            add_into(&mut grad[lay.tok_emb.start + t * d..lay.tok_emb.start + (t + 1) * d], dxp);
            add_into(&mut grad[lay.pos_emb.start + p * d..lay.pos_emb.start + (p + 1) * d], dxp);
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

/// Reverse of an affine map whose weight and bias are adjacent ranges of
/// the flat gradient.
fn backprop_affine(
    grad: &mut [f64],
    w: std::ops::Range<usize>,
    b: std::ops::Range<usize>,
    w_val: &[f64],
    x: &[f64],
    dy: &[f64],
    dx: &mut [f64],
) {
    debug_assert_eq!(w.end, b.start);
    let (dw, db) = grad[w.start..b.end].split_at_mut(w.len());
    affine_back(x, w_val, dy, dw, db, dx);
}

#[allow(clippy::too_many_arguments)]
fn backprop_ln(
    grad: &mut [f64],
    bl: &BlockLayout,
    first: bool,
    tf: &Transformer<'_>,
    xhat: &[f64],
    rstd: f64,
    dy: &[f64],
    dx: &mut [f64],
) {
    let (g, b) = if first {
        (bl.ln1_g.clone(), bl.ln1_b.clone())
    } else {
        (bl.ln2_g.clone(), bl.ln2_b.clone())
    };
    debug_assert_eq!(g.end, b.start);
    let (dg, db) = grad[g.start..b.end].split_at_mut(g.len());
    layer_norm_back(xhat, rstd, tf.t(&g), dy, dg, db, dx);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            vocab: 8,
            d_model: 8,
            max_len: 12,
            n_blocks: 2,
            n_heads: 2,
        }
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let p = ModelParams::zeros(ModelConfig::default());
        let logits = Transformer::new(&p).last_logits(&[0, 5, 9]).unwrap();
        assert!(logits.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn traced_forward_matches_incremental() {
        let p = ModelParams::random_dense(small(), 3, 0.3);
        let tf = Transformer::new(&p);
        let seq = [0, 4, 5, 2, 6, 1];
        let trace = tf.forward(&seq).unwrap();
        let mut cache = KvCache::new(tf.config());
        for (i, &t) in seq.iter().enumerate() {
            let l = tf.step(t, &mut cache).unwrap();
            assert_eq!(l, trace.logits()[i]);
        }
    }

    #[test]
    fn overlong_context_is_rejected() {
        let p = ModelParams::zeros(small());
        let tf = Transformer::new(&p);
        assert!(matches!(tf.last_logits(&[0; 13]), Err(NeatError::Length(_))));
        assert!(matches!(tf.last_logits(&[]), Err(NeatError::Length(_))));
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &u in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(u + h) - gelu(u - h)) / (2.0 * h);
            assert!((fd - gelu_grad(u)).abs() < 1e-8);
        }
    }

    #[test]
    fn backward_matches_finite_differences_on_logit_probe() {
        // Scalar probe: fixed random weights on every logit.
        let cfg = small();
        let p = ModelParams::random_dense(cfg, 11, 0.3);
        let seq = [0u32, 3, 7, 2, 5, 1];
        let probe: Vec<Vec<f64>> = (0..seq.len())
            .map(|i| (0..cfg.vocab).map(|v| ((i * 7 + v * 3) % 5) as f64 - 2.0).collect())
            .collect();
        let value = |p: &ModelParams| -> f64 {
            let tr = Transformer::new(p).forward(&seq).unwrap();
            tr.logits()
                .iter()
                .zip(&probe)
                .map(|(l, w)| l.iter().zip(w).map(|(a, b)| a * b).sum::<f64>())
                .sum()
        };
        let tf = Transformer::new(&p);
        let trace = tf.forward(&seq).unwrap();
        let mut g = vec![0.0; p.len()];
        tf.backward(&trace, &probe, &mut g);
        let h = 1e-5;
        for i in 0..p.len() {
            let mut plus = p.clone();
            plus.as_mut_slice()[i] += h;
            let mut minus = p.clone();
            minus.as_mut_slice()[i] -= h;
            let fd = (value(&plus) - value(&minus)) / (2.0 * h);
            let err = (fd - g[i]).abs();
            assert!(
                err < 1e-6 || err / fd.abs().max(g[i].abs()) < 1e-5,
                "param {i}: analytic {} vs fd {fd}",
                g[i]
            );
        }
    }
}
