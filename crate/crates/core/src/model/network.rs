// Batched forward pass and hand-written backward pass.
//
// All sequences of a batch are stacked row-wise (one row per patch) so every
// dense layer is a single GEMM; attention runs per sequence and per head.

use super::layout::{Linear, Norm};
use super::linalg::{
    add_row_bias, col_sum_acc, gelu, gelu_grad, matmul, matmul_a_bt_acc, matmul_acc, matmul_at_b_acc,
};
use super::{patchify, position_targets, ForecasterState, ModelError, PatchSequence};

const NORM_EPS: f64 = 1e-6;
const SIGMA_FLOOR: f64 = 1e-8;

struct SeqMeta {
    row0: usize,
    len: usize,
    mu: f64,
    sigma: f64,
    mask: Vec<bool>,
    probs_offset: usize,
}

struct Prepared {
    rows: usize,
    feats: Vec<f64>,
    pos_idx: Vec<usize>,
    seqs: Vec<SeqMeta>,
}

/// Mean and standard deviation of the real values in the first patch that
/// holds any, so later patches never influence the scale. A degenerate spread
/// falls back to unit scale.
pub(crate) fn context_scale(seq: &PatchSequence) -> (f64, f64) {
    let li = seq.patch_len();
    let first = seq.first_real_patch();
    let skip = seq.leading_pad - first * li;
    let head = &seq.patches[first][skip..];
    let n = head.len() as f64;
    let mu = head.iter().sum::<f64>() / n;
    let var = head.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    let sigma = var.sqrt();
    (mu, if sigma > SIGMA_FLOOR { sigma } else { 1.0 })
}

fn prepare(state: &ForecasterState, seqs: &[&PatchSequence]) -> Result<Prepared, ModelError> {
    let cfg = state.config();
    let li = cfg.input_patch_len;
    let heads = cfg.num_heads;
    let mut rows = 0;
    let mut probs = 0;
    let mut meta = Vec::with_capacity(seqs.len());
    let mut feats = Vec::new();
    let mut pos_idx = Vec::new();
    for seq in seqs {
        if seq.is_empty() || seq.mask.iter().all(|&m| m) {
            return Err(ModelError::EmptyContext);
        }
        if seq.patch_len() != li || seq.len() > cfg.max_patches() {
            return Err(ModelError::ContextTooLong { len: seq.len() * seq.patch_len(), max: cfg.max_context });
        }
        let (mu, sigma) = context_scale(seq);
        let first_real = seq.first_real_patch();
        for (j, patch) in seq.patches.iter().enumerate() {
            let mut row = vec![0.0; 2 * li];
            for (o, &x) in patch.iter().enumerate() {
                if seq.is_padding(j, o) {
                    row[li + o] = 1.0;
                } else {
                    if !x.is_finite() {
                        return Err(ModelError::NonFiniteActivation { stage: "input" });
                    }
                    row[o] = (x - mu) / sigma;
                }
            }
            feats.extend_from_slice(&row);
            pos_idx.push(j.saturating_sub(first_real).min(cfg.max_patches() - 1));
        }
        meta.push(SeqMeta { row0: rows, len: seq.len(), mu, sigma, mask: seq.mask.clone(), probs_offset: probs });
        rows += seq.len();
        probs += heads * seq.len() * seq.len();
    }
    Ok(Prepared { rows, feats, pos_idx, seqs: meta })
}

struct NormCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

struct LayerCache {
    ln_attn: NormCache,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    attn: Vec<f64>,
    ln_ffn: NormCache,
    b: Vec<f64>,
    h_pre: Vec<f64>,
    h: Vec<f64>,
}

struct Cache {
    prep: Prepared,
    e_pre: Vec<f64>,
    e_act: Vec<f64>,
    layers: Vec<LayerCache>,
    x_final: Vec<f64>,
    g_pre: Vec<f64>,
    g_act: Vec<f64>,
    /// Normalized-space outputs, `[rows, output_patch_len]`.
    out: Vec<f64>,
}

fn linear(x: &[f64], rows: usize, lin: &Linear, p: &[f64]) -> Vec<f64> {
    let mut y = matmul(x, &p[lin.w.clone()], rows, lin.fan_in, lin.fan_out);
    if let Some(b) = &lin.b {
        add_row_bias(&mut y, &p[b.clone()]);
    }
    y
}

fn layer_norm(x: &[f64], d: usize, norm: &Norm, p: &[f64]) -> (Vec<f64>, NormCache) {
    let gain = &p[norm.gain.clone()];
    let bias = &p[norm.bias.clone()];
    let rows = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + NORM_EPS).sqrt();
        rstd[r] = rs;
        for i in 0..d {
            let h = (row[i] - mean) * rs;
            xhat[r * d + i] = h;
            y[r * d + i] = gain[i] * h + bias[i];
        }
    }
    (y, NormCache { xhat, rstd })
}

fn attention(state: &ForecasterState, prep: &Prepared, q: &[f64], k: &[f64], v: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let cfg = state.config();
    let d = cfg.hidden_dim;
    let heads = cfg.num_heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let total_probs = prep.seqs.last().map_or(0, |s| s.probs_offset + heads * s.len * s.len);
    let mut probs = vec![0.0; total_probs];
    let mut out = vec![0.0; prep.rows * d];
    let mut scores = Vec::new();
    for s in &prep.seqs {
        let l = s.len;
        for h in 0..heads {
            let col = h * dh;
            for i in 0..l {
                let qi = &q[(s.row0 + i) * d + col..][..dh];
                scores.clear();
                let mut max = f64::NEG_INFINITY;
                for j in (0..=i).filter(|&j| !s.mask[j]) {
                    let kj = &k[(s.row0 + j) * d + col..][..dh];
                    let sc = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    max = max.max(sc);
                    scores.push((j, sc));
                }
                if scores.is_empty() {
                    continue;
                }
                let mut denom = 0.0;
                for (_, sc) in scores.iter_mut() {
                    *sc = (*sc - max).exp();
                    denom += *sc;
                }
                let prow = s.probs_offset + (h * l + i) * l;
                let oi = (s.row0 + i) * d + col;
                for &(j, e) in &scores {
                    let pij = e / denom;
                    probs[prow + j] = pij;
                    let vj = &v[(s.row0 + j) * d + col..][..dh];
                    for (o, vv) in out[oi..oi + dh].iter_mut().zip(vj) {
                        *o += pij * vv;
                    }
                }
            }
        }
    }
    (out, probs)
}

fn forward_cached(state: &ForecasterState, seqs: &[&PatchSequence]) -> Result<Cache, ModelError> {
    let cfg = state.config();
    let lay = state.layout();
    let p = state.params();
    let d = cfg.hidden_dim;
    let prep = prepare(state, seqs)?;
    let rows = prep.rows;

    let e_pre = linear(&prep.feats, rows, &lay.embed_hidden, p);
    let e_act: Vec<f64> = e_pre.iter().map(|&v| gelu(v)).collect();
    let mut x = linear(&e_act, rows, &lay.embed_out, p);
    let skip = &lay.embed_skip;
    matmul_acc(&prep.feats, &p[skip.w.clone()], &mut x, rows, skip.fan_in, skip.fan_out);
    let pos = &p[lay.pos.clone()];
    for (r, &pi) in prep.pos_idx.iter().enumerate() {
        for (xv, pv) in x[r * d..(r + 1) * d].iter_mut().zip(&pos[pi * d..(pi + 1) * d]) {
            *xv += pv;
        }
    }

    let mut layers = Vec::with_capacity(lay.blocks.len());
    for blk in &lay.blocks {
        let (a, ln_attn) = layer_norm(&x, d, &blk.ln_attn, p);
        let q = linear(&a, rows, &blk.q, p);
        let k = linear(&a, rows, &blk.k, p);
        let v = linear(&a, rows, &blk.v, p);
        let (attn, probs) = attention(state, &prep, &q, &k, &v);
        let o = linear(&attn, rows, &blk.o, p);
        for (xv, ov) in x.iter_mut().zip(&o) {
            *xv += ov;
        }
        let (b, ln_ffn) = layer_norm(&x, d, &blk.ln_ffn, p);
        let h_pre = linear(&b, rows, &blk.ff_in, p);
        let h: Vec<f64> = h_pre.iter().map(|&v| gelu(v)).collect();
        let f = linear(&h, rows, &blk.ff_out, p);
        for (xv, fv) in x.iter_mut().zip(&f) {
            *xv += fv;
        }
        layers.push(LayerCache { ln_attn, a, q, k, v, probs, attn, ln_ffn, b, h_pre, h });
    }

    let g_pre = linear(&x, rows, &lay.head_hidden, p);
    let g_act: Vec<f64> = g_pre.iter().map(|&v| gelu(v)).collect();
    let mut out = linear(&g_act, rows, &lay.head_out, p);
    let hs = &lay.head_skip;
    matmul_acc(&x, &p[hs.w.clone()], &mut out, rows, hs.fan_in, hs.fan_out);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFiniteActivation { stage: "output head" });
    }
    Ok(Cache { prep, e_pre, e_act, layers, x_final: x, g_pre, g_act, out })
}

/// De-normalized per-position outputs for each sequence.
pub(crate) fn forward_batch(
    state: &ForecasterState,
    seqs: &[&PatchSequence],
) -> Result<Vec<Vec<Vec<f64>>>, ModelError> {
    let lo = state.config().output_patch_len;
    let cache = forward_cached(state, seqs)?;
    Ok(cache
        .prep
        .seqs
        .iter()
        .map(|s| {
            (0..s.len)
                .map(|j| {
                    let r = s.row0 + j;
                    cache.out[r * lo..(r + 1) * lo].iter().map(|&o| s.mu + s.sigma * o).collect()
                })
                .collect()
        })
        .collect())
}

struct Batch {
    seqs: Vec<PatchSequence>,
    targets: Vec<Vec<Option<Vec<f64>>>>,
}

fn build_batch(state: &ForecasterState, windows: &[(&[f64], &[f64])]) -> Result<Batch, ModelError> {
    let lo = state.config().output_patch_len;
    let mut seqs = Vec::with_capacity(windows.len());
    let mut targets = Vec::with_capacity(windows.len());
    for (ctx, tgt) in windows {
        let seq = patchify(ctx, state.config())?;
        targets.push(position_targets(&seq, ctx, tgt, lo)?);
        seqs.push(seq);
    }
    Ok(Batch { seqs, targets })
}

/// Returns `weight * Σ_e loss_e` and, when `d_out` is given, fills it with the
/// gradient of that quantity with respect to the normalized outputs.
fn loss_from_cache(
    cache: &Cache,
    batch: &Batch,
    lo: usize,
    weight: f64,
    mut d_out: Option<&mut Vec<f64>>,
) -> Result<f64, ModelError> {
    let mut total = 0.0;
    for (s, targets) in cache.prep.seqs.iter().zip(&batch.targets) {
        let n = targets.iter().filter(|t| t.is_some()).count();
        let coef = weight / (n as f64 * lo as f64);
        let mut acc = 0.0;
        for (j, t) in targets.iter().enumerate() {
            let Some(t) = t else { continue };
            let r = s.row0 + j;
            for (kk, &tv) in t.iter().enumerate() {
                let zhat = s.mu + s.sigma * cache.out[r * lo + kk];
                let diff = zhat - tv;
                acc += diff * diff;
                if let Some(g) = d_out.as_deref_mut() {
                    g[r * lo + kk] = 2.0 * coef * diff * s.sigma;
                }
            }
        }
        total += coef * acc;
    }
    if !total.is_finite() {
        return Err(ModelError::NonFiniteActivation { stage: "loss" });
    }
    Ok(total)
}

pub(crate) fn batch_loss(
    state: &ForecasterState,
    windows: &[(&[f64], &[f64])],
    weight: f64,
) -> Result<f64, ModelError> {
    let batch = build_batch(state, windows)?;
    let refs: Vec<&PatchSequence> = batch.seqs.iter().collect();
    let cache = forward_cached(state, &refs)?;
    loss_from_cache(&cache, &batch, state.config().output_patch_len, weight, None)
}

fn linear_backward(
    x: &[f64],
    dy: &[f64],
    rows: usize,
    lin: &Linear,
    p: &[f64],
    grad: &mut [f64],
    dx: Option<&mut [f64]>,
) {
    matmul_at_b_acc(x, dy, &mut grad[lin.w.clone()], lin.fan_in, rows, lin.fan_out);
    if let Some(b) = &lin.b {
        col_sum_acc(dy, &mut grad[b.clone()]);
    }
    if let Some(dx) = dx {
        matmul_a_bt_acc(dy, &p[lin.w.clone()], dx, rows, lin.fan_out, lin.fan_in);
    }
}

fn norm_backward(dy: &[f64], cache: &NormCache, d: usize, norm: &Norm, p: &[f64], grad: &mut [f64], dx: &mut [f64]) {
    let gain = &p[norm.gain.clone()];
    let rows = dy.len() / d;
    let mut dxhat = vec![0.0; d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        for i in 0..d {
            grad[norm.gain.start + i] += dyr[i] * xh[i];
            grad[norm.bias.start + i] += dyr[i];
            dxhat[i] = dyr[i] * gain[i];
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_xhat = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let rs = cache.rstd[r];
        for i in 0..d {
            dx[r * d + i] += rs * (dxhat[i] - mean_dxhat - xh[i] * mean_dxhat_xhat);
        }
    }
}

fn attention_backward(
    state: &ForecasterState,
    prep: &Prepared,
    lc: &LayerCache,
    d_attn: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let cfg = state.config();
    let d = cfg.hidden_dim;
    let heads = cfg.num_heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; prep.rows * d];
    let mut dk = vec![0.0; prep.rows * d];
    let mut dv = vec![0.0; prep.rows * d];
    let mut dp = Vec::new();
    for s in &prep.seqs {
        let l = s.len;
        for h in 0..heads {
            let col = h * dh;
            for i in 0..l {
                let prow = s.probs_offset + (h * l + i) * l;
                let p_i = &lc.probs[prow..prow + l];
                let doi = &d_attn[(s.row0 + i) * d + col..][..dh];
                dp.clear();
                let mut dot = 0.0;
                for j in (0..=i).filter(|&j| !s.mask[j]) {
                    let vj = &lc.v[(s.row0 + j) * d + col..][..dh];
                    let g = doi.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>();
                    dot += p_i[j] * g;
                    dp.push((j, g));
                    let dvj = &mut dv[(s.row0 + j) * d + col..][..dh];
                    for (t, o) in dvj.iter_mut().zip(doi) {
                        *t += p_i[j] * o;
                    }
                }
                let qi_row = (s.row0 + i) * d + col;
                for &(j, g) in &dp {
                    let ds = p_i[j] * (g - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj_row = (s.row0 + j) * d + col;
                    for t in 0..dh {
                        dq[qi_row + t] += ds * lc.k[kj_row + t];
                        dk[kj_row + t] += ds * lc.q[qi_row + t];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

pub(crate) fn accumulate_gradient(
    state: &ForecasterState,
    windows: &[(&[f64], &[f64])],
    weight: f64,
    grad: &mut [f64],
) -> Result<f64, ModelError> {
    let cfg = state.config();
    let lay = state.layout();
    let p = state.params();
    let d = cfg.hidden_dim;
    let lo = cfg.output_patch_len;

    let batch = build_batch(state, windows)?;
    let refs: Vec<&PatchSequence> = batch.seqs.iter().collect();
    let cache = forward_cached(state, &refs)?;
    let rows = cache.prep.rows;
    let mut d_out = vec![0.0; rows * lo];
    let loss = loss_from_cache(&cache, &batch, lo, weight, Some(&mut d_out))?;

    // head
    let mut dx = vec![0.0; rows * d];
    linear_backward(&cache.x_final, &d_out, rows, &lay.head_skip, p, grad, Some(&mut dx));
    let mut dg = vec![0.0; rows * d];
    linear_backward(&cache.g_act, &d_out, rows, &lay.head_out, p, grad, Some(&mut dg));
    for (g, &pre) in dg.iter_mut().zip(&cache.g_pre) {
        *g *= gelu_grad(pre);
    }
    linear_backward(&cache.x_final, &dg, rows, &lay.head_hidden, p, grad, Some(&mut dx));

    for (blk, lc) in lay.blocks.iter().zip(&cache.layers).rev() {
        // feed-forward residual
        let mut dh = vec![0.0; rows * cfg.ffn_dim()];
        linear_backward(&lc.h, &dx, rows, &blk.ff_out, p, grad, Some(&mut dh));
        for (g, &pre) in dh.iter_mut().zip(&lc.h_pre) {
            *g *= gelu_grad(pre);
        }
        let mut db = vec![0.0; rows * d];
        linear_backward(&lc.b, &dh, rows, &blk.ff_in, p, grad, Some(&mut db));
        norm_backward(&db, &lc.ln_ffn, d, &blk.ln_ffn, p, grad, &mut dx);

        // attention residual
        let mut d_attn = vec![0.0; rows * d];
        linear_backward(&lc.attn, &dx, rows, &blk.o, p, grad, Some(&mut d_attn));
        let (dq, dk, dv) = attention_backward(state, &cache.prep, lc, &d_attn);
        let mut da = vec![0.0; rows * d];
        linear_backward(&lc.a, &dq, rows, &blk.q, p, grad, Some(&mut da));
        linear_backward(&lc.a, &dk, rows, &blk.k, p, grad, Some(&mut da));
        linear_backward(&lc.a, &dv, rows, &blk.v, p, grad, Some(&mut da));
        norm_backward(&da, &lc.ln_attn, d, &blk.ln_attn, p, grad, &mut dx);
    }

    for (r, &pi) in cache.prep.pos_idx.iter().enumerate() {
        let dst = lay.pos.start + pi * d;
        for i in 0..d {
            grad[dst + i] += dx[r * d + i];
        }
    }

    let feats = &cache.prep.feats;
    linear_backward(feats, &dx, rows, &lay.embed_skip, p, grad, None);
    let mut de = vec![0.0; rows * d];
    linear_backward(&cache.e_act, &dx, rows, &lay.embed_out, p, grad, Some(&mut de));
    for (g, &pre) in de.iter_mut().zip(&cache.e_pre) {
        *g *= gelu_grad(pre);
    }
    linear_backward(feats, &de, rows, &lay.embed_hidden, p, grad, None);

    Ok(loss)
}
