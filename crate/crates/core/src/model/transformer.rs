use rayon::prelude::*;

use super::{BlockLayout, ModelParams};
use crate::corpus::TokenId;
use crate::error::{GdrtError, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Per-position, per-vocabulary log-probabilities of the next token.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProbMatrix {
    pub vocab_size: usize,
    pub data: Vec<f64>,
}

impl LogProbMatrix {
    pub fn rows(&self) -> usize {
        self.data.len() / self.vocab_size.max(1)
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.vocab_size..(t + 1) * self.vocab_size]
    }
}

// ---- row kernels shared by the full and the incremental pass ----

fn vec_mat(x: &[f64], w: &[f64], cols: usize, out: &mut [f64]) {
    out.fill(0.0);
    for (i, &xi) in x.iter().enumerate() {
        let row = &w[i * cols..(i + 1) * cols];
        for (o, &wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
}

/// `out[i] = sum_j w[i][j] * dy[j]`, i.e. `W · dy`.
fn mat_vec(w: &[f64], cols: usize, dy: &[f64], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        let row = &w[i * cols..(i + 1) * cols];
        *o = row.iter().zip(dy).map(|(a, b)| a * b).sum();
    }
}

fn add_outer(grad: &mut [f64], x: &[f64], dy: &[f64]) {
    let cols = dy.len();
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &mut grad[i * cols..(i + 1) * cols];
        for (g, &d) in row.iter_mut().zip(dy) {
            *g += xi * d;
        }
    }
}

fn add_into(acc: &mut [f64], x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

/// Writes the normalised row into `xhat` and the affine output into `out`;
/// returns the reciprocal standard deviation.
fn layer_norm_row(x: &[f64], gain: &[f64], bias: &[f64], xhat: &mut [f64], out: &mut [f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    for i in 0..x.len() {
        xhat[i] = (x[i] - mean) * rstd;
        out[i] = gain[i] * xhat[i] + bias[i];
    }
    rstd
}

fn layer_norm_backward_row(
    dy: &[f64],
    xhat: &[f64],
    rstd: f64,
    gain: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
    dx: &mut [f64],
) {
    let n = dy.len() as f64;
    let mut mean1 = 0.0;
    let mut mean2 = 0.0;
    for i in 0..dy.len() {
        dgain[i] += dy[i] * xhat[i];
        dbias[i] += dy[i];
        let dxh = dy[i] * gain[i];
        mean1 += dxh;
        mean2 += dxh * xhat[i];
    }
    mean1 /= n;
    mean2 /= n;
    for i in 0..dy.len() {
        let dxh = dy[i] * gain[i];
        dx[i] += rstd * (dxh - mean1 - xhat[i] * mean2);
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Causal attention of one query over `n` cached keys/values. Writes the
/// per-head attention weights (`heads × n`) and the concatenated output.
fn attend_row(q: &[f64], keys: &[f64], values: &[f64], n: usize, heads: usize, probs: &mut [f64], out: &mut [f64]) {
    let d = q.len();
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    out.fill(0.0);
    for h in 0..heads {
        let qh = &q[h * hd..(h + 1) * hd];
        let p = &mut probs[h * n..(h + 1) * n];
        let mut max = f64::NEG_INFINITY;
        for (j, pj) in p.iter_mut().enumerate() {
            let kh = &keys[j * d + h * hd..j * d + (h + 1) * hd];
            let s = qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>() * scale;
            *pj = s;
            max = max.max(s);
        }
        let mut total = 0.0;
        for pj in p.iter_mut() {
            *pj = (*pj - max).exp();
            total += *pj;
        }
        for pj in p.iter_mut() {
            *pj /= total;
        }
        let oh = &mut out[h * hd..(h + 1) * hd];
        for (j, &pj) in p.iter().enumerate() {
            let vh = &values[j * d + h * hd..j * d + (h + 1) * hd];
            for (o, &v) in oh.iter_mut().zip(vh) {
                *o += pj * v;
            }
        }
    }
}

fn log_softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    for l in logits.iter_mut() {
        *l -= lse;
    }
}

fn embed_row(params: &ModelParams, token: TokenId, pos: usize, out: &mut [f64]) {
    let d = params.config.embed_dim;
    let lay = &params.layout;
    let te = &params.data[lay.tok_emb.start + token as usize * d..][..d];
    let pe = &params.data[lay.pos_emb.start + pos * d..][..d];
    for i in 0..d {
        out[i] = te[i] + pe[i];
    }
}

struct HeadRow {
    xhat: Vec<f64>,
    rstd: f64,
    z: Vec<f64>,
    log_probs: Vec<f64>,
}

fn head_row(params: &ModelParams, x: &[f64]) -> HeadRow {
    let d = params.config.embed_dim;
    let v = params.config.vocab_size;
    let lay = &params.layout;
    let p = &params.data;
    let mut xhat = vec![0.0; d];
    let mut z = vec![0.0; d];
    let rstd = layer_norm_row(x, &p[lay.lnf_g.clone()], &p[lay.lnf_b.clone()], &mut xhat, &mut z);
    let mut logits = vec![0.0; v];
    vec_mat(&z, &p[lay.head_w.clone()], v, &mut logits);
    add_into(&mut logits, &p[lay.head_b.clone()]);
    log_softmax_in_place(&mut logits);
    HeadRow {
        xhat,
        rstd,
        z,
        log_probs: logits,
    }
}

struct FfRow {
    ln_xhat: Vec<f64>,
    ln_rstd: f64,
    normed: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
}

/// Second half of a block for one row: `x1 + FF(LN2(x1))`, in place.
fn ff_row(params: &ModelParams, block: &BlockLayout, x1: &mut [f64]) -> FfRow {
    let d = params.config.embed_dim;
    let f = params.config.ff_dim();
    let p = &params.data;
    let mut ln_xhat = vec![0.0; d];
    let mut normed = vec![0.0; d];
    let ln_rstd = layer_norm_row(
        x1,
        &p[block.ln2_g.clone()],
        &p[block.ln2_b.clone()],
        &mut ln_xhat,
        &mut normed,
    );
    let mut pre = vec![0.0; f];
    vec_mat(&normed, &p[block.w1.clone()], f, &mut pre);
    add_into(&mut pre, &p[block.b1.clone()]);
    let act: Vec<f64> = pre.iter().map(|&x| gelu(x)).collect();
    let mut out = vec![0.0; d];
    vec_mat(&act, &p[block.w2.clone()], d, &mut out);
    add_into(&mut out, &p[block.b2.clone()]);
    add_into(x1, &out);
    FfRow {
        ln_xhat,
        ln_rstd,
        normed,
        pre,
        act,
    }
}

struct QkvRow {
    ln_xhat: Vec<f64>,
    ln_rstd: f64,
    normed: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
}

fn qkv_row(params: &ModelParams, block: &BlockLayout, x: &[f64]) -> QkvRow {
    let d = params.config.embed_dim;
    let p = &params.data;
    let mut ln_xhat = vec![0.0; d];
    let mut normed = vec![0.0; d];
    let ln_rstd = layer_norm_row(
        x,
        &p[block.ln1_g.clone()],
        &p[block.ln1_b.clone()],
        &mut ln_xhat,
        &mut normed,
    );
    let mut q = vec![0.0; d];
    let mut k = vec![0.0; d];
    let mut v = vec![0.0; d];
    vec_mat(&normed, &p[block.wq.clone()], d, &mut q);
    vec_mat(&normed, &p[block.wk.clone()], d, &mut k);
    vec_mat(&normed, &p[block.wv.clone()], d, &mut v);
    QkvRow {
        ln_xhat,
        ln_rstd,
        normed,
        q,
        k,
        v,
    }
}

fn check_finite(values: &[f64], layer: impl FnOnce() -> String) -> Result<()> {
    if values.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(GdrtError::NonFinite { layer: layer() })
    }
}

// ---- full forward pass with activations kept for backward ----

struct BlockTrace {
    ln1: Vec<QkvRow>,
    /// Keys and values of every position, row-major `T × d`.
    keys: Vec<f64>,
    values: Vec<f64>,
    /// Attention weights of position `t`: `heads × (t + 1)`.
    probs: Vec<Vec<f64>>,
    attn_out: Vec<Vec<f64>>,
    ff: Vec<FfRow>,
}

/// Activations of one forward pass, with output distributions at the
/// requested positions.
pub struct ForwardTrace {
    tokens: Vec<TokenId>,
    blocks: Vec<BlockTrace>,
    positions: Vec<usize>,
    heads: Vec<HeadRow>,
}

impl ForwardTrace {
    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    /// Next-token log-probabilities at the `k`-th requested position.
    pub fn log_probs(&self, k: usize) -> &[f64] {
        &self.heads[k].log_probs
    }

    pub fn log_prob(&self, k: usize, token: TokenId) -> f64 {
        self.heads[k].log_probs[token as usize]
    }
}

/// Runs the model over `tokens` and keeps everything backward needs. Output
/// distributions are only materialised at `positions`.
pub fn forward_trace(params: &ModelParams, tokens: &[TokenId], positions: &[usize]) -> Result<ForwardTrace> {
    params.check_sequence(tokens)?;
    if let Some(&p) = positions.iter().find(|&&p| p >= tokens.len()) {
        return Err(GdrtError::ShapeMismatch(format!(
            "position {p} outside sequence of length {}",
            tokens.len()
        )));
    }
    let cfg = &params.config;
    let (d, heads, t_len) = (cfg.embed_dim, cfg.num_heads, tokens.len());
    let p = &params.data;

    let mut x = vec![0.0; t_len * d];
    for (t, &tok) in tokens.iter().enumerate() {
        embed_row(params, tok, t, &mut x[t * d..(t + 1) * d]);
    }

    let mut blocks = Vec::with_capacity(cfg.num_layers);
    for (bi, block) in params.layout.blocks.iter().enumerate() {
        let ln1: Vec<QkvRow> = (0..t_len)
            .map(|t| qkv_row(params, block, &x[t * d..(t + 1) * d]))
            .collect();
        let mut keys = Vec::with_capacity(t_len * d);
        let mut values = Vec::with_capacity(t_len * d);
        for row in &ln1 {
            keys.extend_from_slice(&row.k);
            values.extend_from_slice(&row.v);
        }
        let mut probs = Vec::with_capacity(t_len);
        let mut attn_out = Vec::with_capacity(t_len);
        let mut projected = vec![0.0; d];
        for t in 0..t_len {
            let n = t + 1;
            let mut pr = vec![0.0; heads * n];
            let mut o = vec![0.0; d];
            attend_row(&ln1[t].q, &keys[..n * d], &values[..n * d], n, heads, &mut pr, &mut o);
            vec_mat(&o, &p[block.wo.clone()], d, &mut projected);
            add_into(&mut x[t * d..(t + 1) * d], &projected);
            probs.push(pr);
            attn_out.push(o);
        }
        let ff: Vec<FfRow> = (0..t_len)
            .map(|t| ff_row(params, block, &mut x[t * d..(t + 1) * d]))
            .collect();
        check_finite(&x, || format!("block{bi}"))?;
        blocks.push(BlockTrace {
            ln1,
            keys,
            values,
            probs,
            attn_out,
            ff,
        });
    }

    let heads_out: Vec<HeadRow> = positions
        .iter()
        .map(|&t| head_row(params, &x[t * d..(t + 1) * d]))
        .collect();
    for h in &heads_out {
        check_finite(&h.log_probs, || "head".to_string())?;
    }
    Ok(ForwardTrace {
        tokens: tokens.to_vec(),
        blocks,
        positions: positions.to_vec(),
        heads: heads_out,
    })
}

/// Full log-probability matrix, one row per input position.
pub fn forward(params: &ModelParams, tokens: &[TokenId]) -> Result<LogProbMatrix> {
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let trace = forward_trace(params, tokens, &positions)?;
    let mut data = Vec::with_capacity(tokens.len() * params.config.vocab_size);
    for h in &trace.heads {
        data.extend_from_slice(&h.log_probs);
    }
    Ok(LogProbMatrix {
        vocab_size: params.config.vocab_size,
        data,
    })
}

/// `log P(token | tokens[..=position])` for each `(position, token)` pair.
pub fn score_tokens(params: &ModelParams, tokens: &[TokenId], predictions: &[(usize, TokenId)]) -> Result<Vec<f64>> {
    let positions: Vec<usize> = predictions.iter().map(|&(p, _)| p).collect();
    let trace = forward_trace(params, tokens, &positions)?;
    Ok(predictions
        .iter()
        .enumerate()
        .map(|(k, &(_, tok))| trace.log_prob(k, tok))
        .collect())
}

/// Accumulates into `grad` the gradient of `sum_k w_k * (-log p_k(token_k))`,
/// where each term names a requested position by its index in the trace.
pub fn backward_trace(
    params: &ModelParams,
    trace: &ForwardTrace,
    terms: &[(usize, TokenId, f64)],
    grad: &mut [f64],
) -> Result<()> {
    if grad.len() != params.len() {
        return Err(GdrtError::ShapeMismatch(format!(
            "gradient buffer has {} entries, model has {}",
            grad.len(),
            params.len()
        )));
    }
    let cfg = &params.config;
    let (d, v, f, heads) = (cfg.embed_dim, cfg.vocab_size, cfg.ff_dim(), cfg.num_heads);
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let t_len = trace.tokens.len();
    let lay = &params.layout;
    let p = &params.data;

    let mut dlogits: Vec<Option<Vec<f64>>> = vec![None; trace.positions.len()];
    for &(k, tok, w) in terms {
        if w == 0.0 {
            continue;
        }
        let slot = dlogits[k].get_or_insert_with(|| vec![0.0; v]);
        for (s, &lp) in slot.iter_mut().zip(&trace.heads[k].log_probs) {
            *s += w * lp.exp();
        }
        slot[tok as usize] -= w;
    }

    let mut dx = vec![0.0; t_len * d];
    let mut dz = vec![0.0; d];
    for (k, dl) in dlogits.iter().enumerate() {
        let Some(dl) = dl else { continue };
        let h = &trace.heads[k];
        add_outer(&mut grad[lay.head_w.clone()], &h.z, dl);
        add_into(&mut grad[lay.head_b.clone()], dl);
        mat_vec(&p[lay.head_w.clone()], v, dl, &mut dz);
        let t = trace.positions[k];
        let (gpart, bpart) = grad[lay.lnf_g.start..lay.lnf_b.end].split_at_mut(d);
        layer_norm_backward_row(
            &dz,
            &h.xhat,
            h.rstd,
            &p[lay.lnf_g.clone()],
            gpart,
            bpart,
            &mut dx[t * d..(t + 1) * d],
        );
    }
    check_finite(&grad[lay.lnf_g.start..], || "head backward".to_string())?;

    let mut tmp_d = vec![0.0; d];
    let mut tmp_f = vec![0.0; f];
    for (bi, (block, bt)) in lay.blocks.iter().zip(&trace.blocks).enumerate().rev() {
        // feed-forward half; dx is the gradient w.r.t. the block output
        let mut dx1 = dx.clone();
        for t in 0..t_len {
            let dff = &dx[t * d..(t + 1) * d];
            if dff.iter().all(|&g| g == 0.0) {
                continue;
            }
            let row = &bt.ff[t];
            add_outer(&mut grad[block.w2.clone()], &row.act, dff);
            add_into(&mut grad[block.b2.clone()], dff);
            mat_vec(&p[block.w2.clone()], d, dff, &mut tmp_f);
            for (g, &pre) in tmp_f.iter_mut().zip(&row.pre) {
                *g *= gelu_grad(pre);
            }
            add_outer(&mut grad[block.w1.clone()], &row.normed, &tmp_f);
            add_into(&mut grad[block.b1.clone()], &tmp_f);
            mat_vec(&p[block.w1.clone()], f, &tmp_f, &mut tmp_d);
            let (gpart, bpart) = grad[block.ln2_g.start..block.ln2_b.end].split_at_mut(d);
            layer_norm_backward_row(
                &tmp_d,
                &row.ln_xhat,
                row.ln_rstd,
                &p[block.ln2_g.clone()],
                gpart,
                bpart,
                &mut dx1[t * d..(t + 1) * d],
            );
        }

        // attention half; dx1 is the gradient w.r.t. the post-attention residual
        let mut dx0 = dx1.clone();
        let mut d_o = vec![0.0; t_len * d];
        for t in 0..t_len {
            let da = &dx1[t * d..(t + 1) * d];
            if da.iter().all(|&g| g == 0.0) {
                continue;
            }
            add_outer(&mut grad[block.wo.clone()], &bt.attn_out[t], da);
            mat_vec(&p[block.wo.clone()], d, da, &mut d_o[t * d..(t + 1) * d]);
        }
        let mut dq = vec![0.0; t_len * d];
        let mut dk = vec![0.0; t_len * d];
        let mut dv = vec![0.0; t_len * d];
        let mut dp = Vec::new();
        for i in 0..t_len {
            let doi = &d_o[i * d..(i + 1) * d];
            if doi.iter().all(|&g| g == 0.0) {
                continue;
            }
            let n = i + 1;
            let qi = &bt.ln1[i].q;
            for h in 0..heads {
                let pr = &bt.probs[i][h * n..(h + 1) * n];
                let doh = &doi[h * hd..(h + 1) * hd];
                dp.clear();
                let mut weighted = 0.0;
                for (j, &pj) in pr.iter().enumerate() {
                    let vj = &bt.values[j * d + h * hd..j * d + (h + 1) * hd];
                    let g: f64 = doh.iter().zip(vj).map(|(a, b)| a * b).sum();
                    dp.push(g);
                    weighted += pj * g;
                    let dvj = &mut dv[j * d + h * hd..j * d + (h + 1) * hd];
                    for (dvc, &doc) in dvj.iter_mut().zip(doh) {
                        *dvc += pj * doc;
                    }
                }
                for (j, &pj) in pr.iter().enumerate() {
                    let ds = pj * (dp[j] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &bt.keys[j * d + h * hd..j * d + (h + 1) * hd];
                    let dqi = &mut dq[i * d + h * hd..i * d + (h + 1) * hd];
                    for (a, &b) in dqi.iter_mut().zip(kj) {
                        *a += ds * b;
                    }
                    let dkj = &mut dk[j * d + h * hd..j * d + (h + 1) * hd];
                    for (a, &b) in dkj.iter_mut().zip(&qi[h * hd..(h + 1) * hd]) {
                        *a += ds * b;
                    }
                }
            }
        }
        let mut da = vec![0.0; d];
        for t in 0..t_len {
            let row = &bt.ln1[t];
            let (dqt, dkt, dvt) = (
                &dq[t * d..(t + 1) * d],
                &dk[t * d..(t + 1) * d],
                &dv[t * d..(t + 1) * d],
            );
            if dqt.iter().chain(dkt).chain(dvt).all(|&g| g == 0.0) {
                continue;
            }
            add_outer(&mut grad[block.wq.clone()], &row.normed, dqt);
            add_outer(&mut grad[block.wk.clone()], &row.normed, dkt);
            add_outer(&mut grad[block.wv.clone()], &row.normed, dvt);
            mat_vec(&p[block.wq.clone()], d, dqt, &mut da);
            mat_vec(&p[block.wk.clone()], d, dkt, &mut tmp_d);
            add_into(&mut da, &tmp_d);
            mat_vec(&p[block.wv.clone()], d, dvt, &mut tmp_d);
            add_into(&mut da, &tmp_d);
            let (gpart, bpart) = grad[block.ln1_g.start..block.ln1_b.end].split_at_mut(d);
            layer_norm_backward_row(
                &da,
                &row.ln_xhat,
                row.ln_rstd,
                &p[block.ln1_g.clone()],
                gpart,
                bpart,
                &mut dx0[t * d..(t + 1) * d],
            );
        }
        check_finite(&dx0, || format!("block{bi} backward"))?;
        dx = dx0;
    }

    for (t, &tok) in trace.tokens.iter().enumerate() {
        let g = &dx[t * d..(t + 1) * d];
        add_into(&mut grad[lay.tok_emb.start + tok as usize * d..][..d], g);
        add_into(&mut grad[lay.pos_emb.start + t * d..][..d], g);
    }
    Ok(())
}

/// One sequence's contribution to a scalar loss: a weighted sum of target
/// token negative log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerm {
    pub tokens: Vec<TokenId>,
    /// `(position, token, weight)`.
    pub targets: Vec<(usize, TokenId, f64)>,
}

/// A scalar loss that is linear in token NLLs: `constant + sum_terms sum_k w_k * nll_k`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossGraph {
    pub terms: Vec<LossTerm>,
    pub constant: f64,
}

impl LossGraph {
    pub fn scaled(&self, factor: f64) -> LossGraph {
        LossGraph {
            terms: self
                .terms
                .iter()
                .map(|t| LossTerm {
                    tokens: t.tokens.clone(),
                    targets: t.targets.iter().map(|&(p, tok, w)| (p, tok, w * factor)).collect(),
                })
                .collect(),
            constant: self.constant * factor,
        }
    }
}

/// Value and exact gradient of a loss graph. Terms are evaluated in
/// parallel and reduced serially in order, so the result is deterministic.
pub fn backward(params: &ModelParams, graph: &LossGraph) -> Result<(f64, Vec<f64>)> {
    let parts: Vec<Result<(f64, Vec<f64>)>> = graph
        .terms
        .par_iter()
        .map(|term| {
            let positions: Vec<usize> = term.targets.iter().map(|&(p, _, _)| p).collect();
            let trace = forward_trace(params, &term.tokens, &positions)?;
            let loss: f64 = term
                .targets
                .iter()
                .enumerate()
                .map(|(k, &(_, tok, w))| -w * trace.log_prob(k, tok))
                .sum();
            let indexed: Vec<(usize, TokenId, f64)> = term
                .targets
                .iter()
                .enumerate()
                .map(|(k, &(_, tok, w))| (k, tok, w))
                .collect();
            let mut grad = vec![0.0; params.len()];
            backward_trace(params, &trace, &indexed, &mut grad)?;
            Ok((loss, grad))
        })
        .collect();
    let mut total = graph.constant;
    let mut grad = vec![0.0; params.len()];
    for part in parts {
        let (loss, g) = part?;
        total += loss;
        add_into(&mut grad, &g);
    }
    Ok((total, grad))
}

/// Incremental decoding state: cached keys/values for every block, so that
/// extending a prefix by one token costs one row of work. Produces exactly
/// the same numbers as [`forward`] on the full sequence.
#[derive(Debug, Clone)]
pub struct DecodeState {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
    next: Vec<f64>,
}

impl DecodeState {
    pub fn new(params: &ModelParams, prompt: &[TokenId]) -> Result<Self> {
        if prompt.is_empty() {
            return Err(GdrtError::EmptyInput("decode prompt".into()));
        }
        params.check_sequence(prompt)?;
        let blocks = params.config.num_layers;
        let mut state = DecodeState {
            keys: vec![Vec::new(); blocks],
            values: vec![Vec::new(); blocks],
            len: 0,
            next: Vec::new(),
        };
        for &tok in prompt {
            state.push(params, tok)?;
        }
        Ok(state)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Distribution over the token following everything pushed so far.
    pub fn next_log_probs(&self) -> &[f64] {
        &self.next
    }

    pub fn push(&mut self, params: &ModelParams, token: TokenId) -> Result<()> {
        let cfg = &params.config;
        if self.len + 1 > cfg.context_len {
            return Err(GdrtError::SequenceTooLong {
                len: self.len + 1,
                context_len: cfg.context_len,
            });
        }
        if token as usize >= cfg.vocab_size {
            return Err(GdrtError::OutOfVocab {
                id: token,
                vocab_size: cfg.vocab_size,
            });
        }
        let d = cfg.embed_dim;
        let mut x = vec![0.0; d];
        embed_row(params, token, self.len, &mut x);
        let n = self.len + 1;
        let mut projected = vec![0.0; d];
        for (bi, block) in params.layout.blocks.iter().enumerate() {
            let row = qkv_row(params, block, &x);
            self.keys[bi].extend_from_slice(&row.k);
            self.values[bi].extend_from_slice(&row.v);
            let mut pr = vec![0.0; cfg.num_heads * n];
            let mut o = vec![0.0; d];
            attend_row(
                &row.q,
                &self.keys[bi],
                &self.values[bi],
                n,
                cfg.num_heads,
                &mut pr,
                &mut o,
            );
            vec_mat(&o, &params.data[block.wo.clone()], d, &mut projected);
            add_into(&mut x, &projected);
            ff_row(params, block, &mut x);
            check_finite(&x, || format!("block{bi}"))?;
        }
        self.next = head_row(params, &x).log_probs;
        check_finite(&self.next, || "head".to_string())?;
        self.len = n;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny(v: usize, seed: u64) -> ModelParams {
        let config = ModelConfig {
            embed_dim: 8,
            num_heads: 2,
            ..ModelConfig::new(v, 12, seed)
        };
        ModelParams::init(&config).unwrap()
    }

    #[test]
    fn single_token_vocab_is_certain() {
        let params = tiny(1, 3);
        let lp = forward(&params, &[0, 0, 0]).unwrap();
        assert!(lp.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_head_is_uniform() {
        let mut params = tiny(16, 3);
        params.zero_output_head();
        let lp = forward(&params, &[1, 5, 7, 2]).unwrap();
        let expect = -(16f64).ln();
        assert!(lp.data.iter().all(|&x| (x - expect).abs() < 1e-15));
    }

    #[test]
    fn rows_normalised() {
        let params = tiny(20, 11);
        let lp = forward(&params, &[1, 5, 7, 9, 2, 3]).unwrap();
        for t in 0..lp.rows() {
            let lse = lp.row(t).iter().map(|x| x.exp()).sum::<f64>().ln();
            assert!(lse.abs() < 1e-5);
        }
    }

    #[test]
    fn causal_prefix_unchanged() {
        let params = tiny(20, 5);
        let a = forward(&params, &[1, 5, 7, 9, 2, 3]).unwrap();
        let b = forward(&params, &[1, 5, 7, 19, 4, 4]).unwrap();
        for t in 0..3 {
            assert_eq!(a.row(t), b.row(t));
        }
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn rejects_bad_input() {
        let params = tiny(20, 5);
        assert!(matches!(
            forward(&params, &[1; 13]),
            Err(GdrtError::SequenceTooLong { .. })
        ));
        assert!(matches!(
            forward(&params, &[1, 20]),
            Err(GdrtError::OutOfVocab { id: 20, .. })
        ));
    }

    #[test]
    fn non_finite_names_layer() {
        let mut params = tiny(20, 5);
        let r = params.layout.blocks[0].w1.clone();
        params.data[r.start] = f64::NAN;
        match forward(&params, &[1, 5, 6]) {
            Err(GdrtError::NonFinite { layer }) => assert_eq!(layer, "block0"),
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn incremental_matches_full_bitwise() {
        let params = tiny(20, 9);
        let seq = [1, 5, 7, 9, 2, 3, 11];
        let full = forward(&params, &seq).unwrap();
        let mut state = DecodeState::new(&params, &seq[..1]).unwrap();
        assert_eq!(state.next_log_probs(), full.row(0));
        for (t, &tok) in seq.iter().enumerate().skip(1) {
            state.push(&params, tok).unwrap();
            assert_eq!(state.next_log_probs(), full.row(t));
        }
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let params = tiny(20, 9);
        let graph = LossGraph {
            terms: vec![],
            constant: 3.5,
        };
        let (loss, grad) = backward(&params, &graph).unwrap();
        assert_eq!(loss, 3.5);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gradient_is_linear_in_loss_scale() {
        let params = tiny(20, 9);
        let graph = LossGraph {
            terms: vec![LossTerm {
                tokens: vec![1, 5, 7, 9, 2],
                targets: vec![(2, 9, 1.0), (3, 2, 0.5)],
            }],
            constant: 0.0,
        };
        let (l1, g1) = backward(&params, &graph).unwrap();
        let (l3, g3) = backward(&params, &graph.scaled(-2.5)).unwrap();
        assert!((l3 + 2.5 * l1).abs() < 1e-12);
        for (a, b) in g1.iter().zip(&g3) {
            assert!((b + 2.5 * a).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }
}
