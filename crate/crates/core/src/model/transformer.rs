use crate::linalg::{gemm, Op, Scalar};
use crate::par;

use super::params::{BlockOffsets, ModelParams};
use super::{ModelError, TokenBatch};

/// Sequences per work unit. Forward and backward split the batch into chunks
/// of this many sequences; gradients from the chunks are combined by a fixed
/// pairwise tree, so results do not depend on the worker count.
pub const SEQ_CHUNK: usize = 16;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Copy, Debug)]
struct Dims {
    /// Tokens per sequence.
    n: usize,
    n_pairs: usize,
    e: usize,
    heads: usize,
    hd: usize,
    f: usize,
    w: usize,
    n_layers: usize,
}

#[derive(Clone, Debug)]
struct LayerCache<T> {
    xhat1: Vec<T>,
    rstd1: Vec<T>,
    a: Vec<T>,
    qkv: Vec<T>,
    probs: Vec<T>,
    attn: Vec<T>,
    xhat2: Vec<T>,
    rstd2: Vec<T>,
    m: Vec<T>,
    f: Vec<T>,
    g: Vec<T>,
    th: Vec<T>,
}

#[derive(Clone, Debug)]
struct ChunkCache<T> {
    n_seq: usize,
    tokens: Vec<T>,
    layers: Vec<LayerCache<T>>,
    xhatf: Vec<T>,
    rstdf: Vec<T>,
    z: Vec<T>,
}

/// Predictions for a batch plus the activations the backward pass needs.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    n_seq: usize,
    n_pairs: usize,
    predictions: Vec<T>,
    chunks: Vec<ChunkCache<T>>,
}

impl<T: Scalar> ForwardTrace<T> {
    /// `n_seq × K` predictions, row-major; entry `(s, k)` is `f(S_{k+1})`.
    pub fn predictions(&self) -> &[T] {
        &self.predictions
    }

    pub fn row(&self, s: usize) -> &[T] {
        &self.predictions[s * self.n_pairs..(s + 1) * self.n_pairs]
    }

    pub fn n_seq(&self) -> usize {
        self.n_seq
    }

    pub fn n_pairs(&self) -> usize {
        self.n_pairs
    }
}

fn dims<T: Scalar>(params: &ModelParams<T>, tokens: &TokenBatch<T>) -> Result<Dims, ModelError> {
    let cfg = params.config();
    if tokens.width() != cfg.token_width() {
        return Err(ModelError::Shape(format!("token width {} vs model {}", tokens.width(), cfg.token_width())));
    }
    if tokens.n_pairs() > cfg.max_pairs {
        return Err(ModelError::TooLong { pairs: tokens.n_pairs(), capacity: cfg.max_pairs });
    }
    Ok(Dims {
        n: tokens.n_tokens(),
        n_pairs: tokens.n_pairs(),
        e: cfg.d_embed,
        heads: cfg.n_heads,
        hd: cfg.head_dim(),
        f: cfg.mlp_width(),
        w: cfg.token_width(),
        n_layers: cfg.n_layers,
    })
}

fn chunk_count(n_seq: usize) -> usize {
    n_seq.div_ceil(SEQ_CHUNK)
}

fn chunk_span(i: usize, n_seq: usize) -> (usize, usize) {
    let first = i * SEQ_CHUNK;
    (first, SEQ_CHUNK.min(n_seq - first))
}

/// Runs the model and keeps every activation needed by [`backward`].
pub fn forward<T: Scalar>(params: &ModelParams<T>, tokens: &TokenBatch<T>) -> Result<ForwardTrace<T>, ModelError> {
    let d = dims(params, tokens)?;
    let n_seq = tokens.n_seq();
    let results = par::map_range(chunk_count(n_seq), |i| {
        let (first, c) = chunk_span(i, n_seq);
        chunk_forward(params, &d, tokens.seq_rows(first, c), c)
    });
    let mut predictions = Vec::with_capacity(n_seq * d.n_pairs);
    let mut chunks = Vec::with_capacity(results.len());
    for r in results {
        let (p, cache) = r?;
        predictions.extend(p);
        chunks.push(cache);
    }
    Ok(ForwardTrace { n_seq, n_pairs: d.n_pairs, predictions, chunks })
}

/// Predictions only; activations are dropped chunk by chunk.
pub fn predict<T: Scalar>(params: &ModelParams<T>, tokens: &TokenBatch<T>) -> Result<Vec<T>, ModelError> {
    let d = dims(params, tokens)?;
    let n_seq = tokens.n_seq();
    let results = par::map_range(chunk_count(n_seq), |i| {
        let (first, c) = chunk_span(i, n_seq);
        chunk_forward(params, &d, tokens.seq_rows(first, c), c).map(|(p, _)| p)
    });
    let mut out = Vec::with_capacity(n_seq * d.n_pairs);
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// Parameter gradients given `d loss / d prediction` for every `(s, k)`.
pub fn backward<T: Scalar>(
    trace: &ForwardTrace<T>,
    params: &ModelParams<T>,
    dpred: &[T],
) -> Result<ModelParams<T>, ModelError> {
    if dpred.len() != trace.predictions.len() {
        return Err(ModelError::Shape(format!(
            "upstream gradient has {} entries, predictions {}",
            dpred.len(),
            trace.predictions.len()
        )));
    }
    let cfg = params.config();
    let d = Dims {
        n: 2 * trace.n_pairs,
        n_pairs: trace.n_pairs,
        e: cfg.d_embed,
        heads: cfg.n_heads,
        hd: cfg.head_dim(),
        f: cfg.mlp_width(),
        w: cfg.token_width(),
        n_layers: cfg.n_layers,
    };
    if trace.chunks.iter().any(|c| c.layers.len() != d.n_layers) {
        return Err(ModelError::Shape("trace was produced by a different model".into()));
    }
    let parts = par::map_range(trace.chunks.len(), |i| {
        let (first, c) = chunk_span(i, trace.n_seq);
        let mut grad = vec![T::zero(); params.flat().len()];
        let up = &dpred[first * d.n_pairs..(first + c) * d.n_pairs];
        chunk_backward(params, &d, &trace.chunks[i], up, &mut grad);
        grad
    });
    let total = par::tree_reduce(parts, add_into).expect("at least one chunk");
    ModelParams::from_flat(cfg, total)
}

/// Forward then backward chunk by chunk without holding the whole batch's
/// activations. `upstream(first_seq, preds)` returns the chunk's loss
/// contribution and `d loss / d preds` for that chunk.
pub fn forward_backward<T, F>(
    params: &ModelParams<T>,
    tokens: &TokenBatch<T>,
    upstream: F,
) -> Result<(f64, ModelParams<T>), ModelError>
where
    T: Scalar,
    F: Fn(usize, &[T]) -> (f64, Vec<T>) + Sync,
{
    let d = dims(params, tokens)?;
    let n_seq = tokens.n_seq();
    let parts = par::map_range(chunk_count(n_seq), |i| {
        let (first, c) = chunk_span(i, n_seq);
        let (preds, cache) = chunk_forward(params, &d, tokens.seq_rows(first, c), c)?;
        let (loss, dpred) = upstream(first, &preds);
        let mut grad = vec![T::zero(); params.flat().len()];
        chunk_backward(params, &d, &cache, &dpred, &mut grad);
        Ok::<_, ModelError>((loss, grad))
    });
    let mut ok = Vec::with_capacity(parts.len());
    for p in parts {
        ok.push(p?);
    }
    let (loss, grad) = par::tree_reduce(ok, |(la, ga), (lb, gb)| (la + lb, add_into(ga, gb))).expect("nonempty");
    Ok((loss, ModelParams::from_flat(params.config(), grad)?))
}

fn add_into<T: Scalar>(mut a: Vec<T>, b: Vec<T>) -> Vec<T> {
    for (x, y) in a.iter_mut().zip(&b) {
        *x = *x + *y;
    }
    a
}

fn check_finite<T: Scalar>(xs: &[T], layer: usize) -> Result<(), ModelError> {
    if xs.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(ModelError::NonFinite { layer })
    }
}

fn broadcast_rows<T: Scalar>(bias: &[T], rows: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * bias.len());
    for _ in 0..rows {
        out.extend_from_slice(bias);
    }
    out
}

fn add_rows<T: Scalar>(x: &mut [T], bias: &[T]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v = *v + *b;
        }
    }
}

fn col_sum_into<T: Scalar>(x: &[T], cols: usize, out: &mut [T]) {
    for row in x.chunks_exact(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o = *o + *v;
        }
    }
}

fn layer_norm<T: Scalar>(x: &[T], e: usize, gain: &[T], bias: &[T], xhat: &mut [T], rstd: &mut [T], out: &mut [T]) {
    let inv_e = T::of(1.0 / e as f64);
    let eps = T::of(LN_EPS);
    for (r, row) in x.chunks_exact(e).enumerate() {
        let mean = row.iter().copied().sum::<T>() * inv_e;
        let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() * inv_e;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..e {
            let xh = (row[j] - mean) * rs;
            xhat[r * e + j] = xh;
            out[r * e + j] = xh * gain[j] + bias[j];
        }
    }
}

/// Adds the input gradient of a LayerNorm to `dx` and accumulates its
/// gain/bias gradients.
#[allow(clippy::too_many_arguments)]
fn layer_norm_backward<T: Scalar>(
    dy: &[T],
    xhat: &[T],
    rstd: &[T],
    gain: &[T],
    e: usize,
    dgain: &mut [T],
    dbias: &mut [T],
    dx: &mut [T],
) {
    let inv_e = T::of(1.0 / e as f64);
    let mut dxhat = vec![T::zero(); e];
    for r in 0..rstd.len() {
        let dyr = &dy[r * e..(r + 1) * e];
        let xr = &xhat[r * e..(r + 1) * e];
        let mut mean_d = T::zero();
        let mut mean_dx = T::zero();
        for j in 0..e {
            dgain[j] = dgain[j] + dyr[j] * xr[j];
            dbias[j] = dbias[j] + dyr[j];
            dxhat[j] = dyr[j] * gain[j];
            mean_d = mean_d + dxhat[j];
            mean_dx = mean_dx + dxhat[j] * xr[j];
        }
        mean_d = mean_d * inv_e;
        mean_dx = mean_dx * inv_e;
        for j in 0..e {
            let v = &mut dx[r * e + j];
            *v = *v + rstd[r] * (dxhat[j] - mean_d - xr[j] * mean_dx);
        }
    }
}

/// `tanh` through one `exp`; several times faster than the libm call and
/// accurate to a few ulps of 1, which is all the GELU needs.
fn fast_tanh<T: Scalar>(u: T) -> T {
    let two = T::of(2.0);
    T::one() - two / ((two * u).exp() + T::one())
}

/// Tanh-approximated GELU. Returns `(gelu(x), tanh(inner))`; the second value
/// is kept for the backward pass.
fn gelu<T: Scalar>(x: T) -> (T, T) {
    let t = fast_tanh(T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x));
    (T::of(0.5) * x * (T::one() + t), t)
}

fn gelu_grad<T: Scalar>(x: T, t: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

fn gather<T: Scalar>(src: &[T], rows: usize, stride: usize, col: usize, width: usize, dst: &mut [T]) {
    for r in 0..rows {
        dst[r * width..(r + 1) * width].copy_from_slice(&src[r * stride + col..r * stride + col + width]);
    }
}

fn scatter<T: Scalar>(src: &[T], rows: usize, stride: usize, col: usize, width: usize, dst: &mut [T]) {
    for r in 0..rows {
        dst[r * stride + col..r * stride + col + width].copy_from_slice(&src[r * width..(r + 1) * width]);
    }
}

fn attention_forward<T: Scalar>(qkv: &[T], d: &Dims, c: usize, probs: &mut [T], attn: &mut [T]) {
    let (n, e, hd) = (d.n, d.e, d.hd);
    let scale = T::of(1.0 / (hd as f64).sqrt());
    let mut q = vec![T::zero(); n * hd];
    let mut k = vec![T::zero(); n * hd];
    let mut v = vec![T::zero(); n * hd];
    let mut o = vec![T::zero(); n * hd];
    for s in 0..c {
        let rows = &qkv[s * n * 3 * e..(s + 1) * n * 3 * e];
        for h in 0..d.heads {
            gather(rows, n, 3 * e, h * hd, hd, &mut q);
            gather(rows, n, 3 * e, e + h * hd, hd, &mut k);
            gather(rows, n, 3 * e, 2 * e + h * hd, hd, &mut v);
            let p = &mut probs[(s * d.heads + h) * n * n..(s * d.heads + h + 1) * n * n];
            gemm(Op::N, Op::T, n, hd, n, &q, &k, T::zero(), p);
            for i in 0..n {
                let row = &mut p[i * n..(i + 1) * n];
                let mut max = T::neg_infinity();
                for val in row[..=i].iter_mut() {
                    *val = *val * scale;
                    max = max.max(*val);
                }
                let mut sum = T::zero();
                for val in row[..=i].iter_mut() {
                    *val = (*val - max).exp();
                    sum = sum + *val;
                }
                let inv = T::one() / sum;
                for val in row[..=i].iter_mut() {
                    *val = *val * inv;
                }
                for val in row[i + 1..].iter_mut() {
                    *val = T::zero();
                }
            }
            gemm(Op::N, Op::N, n, n, hd, p, &v, T::zero(), &mut o);
            scatter(&o, n, e, h * hd, hd, &mut attn[s * n * e..(s + 1) * n * e]);
        }
    }
}

fn attention_backward<T: Scalar>(qkv: &[T], probs: &[T], dattn: &[T], d: &Dims, c: usize, dqkv: &mut [T]) {
    let (n, e, hd) = (d.n, d.e, d.hd);
    let scale = T::of(1.0 / (hd as f64).sqrt());
    let mut q = vec![T::zero(); n * hd];
    let mut k = vec![T::zero(); n * hd];
    let mut v = vec![T::zero(); n * hd];
    let mut d_o = vec![T::zero(); n * hd];
    let mut dp = vec![T::zero(); n * n];
    let mut dq = vec![T::zero(); n * hd];
    let mut dk = vec![T::zero(); n * hd];
    let mut dv = vec![T::zero(); n * hd];
    for s in 0..c {
        let rows = &qkv[s * n * 3 * e..(s + 1) * n * 3 * e];
        let drows = &mut dqkv[s * n * 3 * e..(s + 1) * n * 3 * e];
        for h in 0..d.heads {
            gather(rows, n, 3 * e, h * hd, hd, &mut q);
            gather(rows, n, 3 * e, e + h * hd, hd, &mut k);
            gather(rows, n, 3 * e, 2 * e + h * hd, hd, &mut v);
            gather(&dattn[s * n * e..(s + 1) * n * e], n, e, h * hd, hd, &mut d_o);
            let p = &probs[(s * d.heads + h) * n * n..(s * d.heads + h + 1) * n * n];
            gemm(Op::N, Op::T, n, hd, n, &d_o, &v, T::zero(), &mut dp);
            gemm(Op::T, Op::N, n, n, hd, p, &d_o, T::zero(), &mut dv);
            for i in 0..n {
                let pr = &p[i * n..(i + 1) * n];
                let dr = &mut dp[i * n..(i + 1) * n];
                let dot: T = pr[..=i].iter().zip(&dr[..=i]).map(|(a, b)| *a * *b).sum();
                for j in 0..=i {
                    dr[j] = pr[j] * (dr[j] - dot) * scale;
                }
                for val in dr[i + 1..].iter_mut() {
                    *val = T::zero();
                }
            }
            gemm(Op::N, Op::N, n, n, hd, &dp, &k, T::zero(), &mut dq);
            gemm(Op::T, Op::N, n, n, hd, &dp, &q, T::zero(), &mut dk);
            scatter(&dq, n, 3 * e, h * hd, hd, drows);
            scatter(&dk, n, 3 * e, e + h * hd, hd, drows);
            scatter(&dv, n, 3 * e, 2 * e + h * hd, hd, drows);
        }
    }
}

fn chunk_forward<T: Scalar>(
    p: &ModelParams<T>,
    d: &Dims,
    tokens: &[T],
    c: usize,
) -> Result<(Vec<T>, ChunkCache<T>), ModelError> {
    let o = &p.layout().offsets;
    let (n, e, f, w) = (d.n, d.e, d.f, d.w);
    let r = c * n;
    let pos = p.at(o.pos, n * e);
    let be = p.at(o.embed_b, e);
    let mut h = vec![T::zero(); r * e];
    for (row, hr) in h.chunks_exact_mut(e).enumerate() {
        let t = row % n;
        for j in 0..e {
            hr[j] = be[j] + pos[t * e + j];
        }
    }
    gemm(Op::N, Op::N, r, w, e, tokens, p.at(o.embed_w, w * e), T::one(), &mut h);
    check_finite(&h, 0)?;

    let mut layers = Vec::with_capacity(d.n_layers);
    for (l, b) in o.blocks.iter().enumerate() {
        let b: &BlockOffsets = b;
        let mut xhat1 = vec![T::zero(); r * e];
        let mut rstd1 = vec![T::zero(); r];
        let mut a = vec![T::zero(); r * e];
        layer_norm(&h, e, p.at(b.ln1_g, e), p.at(b.ln1_b, e), &mut xhat1, &mut rstd1, &mut a);
        let mut qkv = broadcast_rows(p.at(b.qkv_b, 3 * e), r);
        gemm(Op::N, Op::N, r, e, 3 * e, &a, p.at(b.qkv_w, e * 3 * e), T::one(), &mut qkv);
        let mut probs = vec![T::zero(); c * d.heads * n * n];
        let mut attn = vec![T::zero(); r * e];
        attention_forward(&qkv, d, c, &mut probs, &mut attn);
        add_rows(&mut h, p.at(b.proj_b, e));
        gemm(Op::N, Op::N, r, e, e, &attn, p.at(b.proj_w, e * e), T::one(), &mut h);

        let mut xhat2 = vec![T::zero(); r * e];
        let mut rstd2 = vec![T::zero(); r];
        let mut m = vec![T::zero(); r * e];
        layer_norm(&h, e, p.at(b.ln2_g, e), p.at(b.ln2_b, e), &mut xhat2, &mut rstd2, &mut m);
        let mut fa = broadcast_rows(p.at(b.fc_b, f), r);
        gemm(Op::N, Op::N, r, e, f, &m, p.at(b.fc_w, e * f), T::one(), &mut fa);
        let (g, th): (Vec<T>, Vec<T>) = fa.iter().map(|v| gelu(*v)).unzip();
        add_rows(&mut h, p.at(b.mproj_b, e));
        gemm(Op::N, Op::N, r, f, e, &g, p.at(b.mproj_w, f * e), T::one(), &mut h);
        check_finite(&h, l + 1)?;
        layers.push(LayerCache { xhat1, rstd1, a, qkv, probs, attn, xhat2, rstd2, m, f: fa, g, th });
    }

    let mut xhatf = vec![T::zero(); r * e];
    let mut rstdf = vec![T::zero(); r];
    let mut z = vec![T::zero(); r * e];
    layer_norm(&h, e, p.at(o.lnf_g, e), p.at(o.lnf_b, e), &mut xhatf, &mut rstdf, &mut z);
    let wr = p.at(o.readout_w, e);
    let br = p.at(o.readout_b, 1)[0];
    let mut preds = Vec::with_capacity(c * d.n_pairs);
    for s in 0..c {
        for k in 0..d.n_pairs {
            let row = &z[(s * n + 2 * k) * e..(s * n + 2 * k + 1) * e];
            preds.push(row.iter().zip(wr).map(|(a, b)| *a * *b).sum::<T>() + br);
        }
    }
    check_finite(&preds, d.n_layers + 1)?;
    let cache = ChunkCache { n_seq: c, tokens: tokens.to_vec(), layers, xhatf, rstdf, z };
    Ok((preds, cache))
}

fn chunk_backward<T: Scalar>(p: &ModelParams<T>, d: &Dims, cache: &ChunkCache<T>, dpred: &[T], grad: &mut [T]) {
    let o = &p.layout().offsets;
    let (n, e, f, w) = (d.n, d.e, d.f, d.w);
    let c = cache.n_seq;
    let r = c * n;

    // Readout and final norm. Only x-token rows carry upstream gradient.
    let wr = p.at(o.readout_w, e);
    let mut dz = vec![T::zero(); r * e];
    {
        let mut dwr = vec![T::zero(); e];
        let mut dbr = T::zero();
        for s in 0..c {
            for k in 0..d.n_pairs {
                let g = dpred[s * d.n_pairs + k];
                let row = (s * n + 2 * k) * e;
                dbr = dbr + g;
                for j in 0..e {
                    dwr[j] = dwr[j] + cache.z[row + j] * g;
                    dz[row + j] = g * wr[j];
                }
            }
        }
        add_slice(&mut grad[o.readout_w..o.readout_w + e], &dwr);
        grad[o.readout_b] = grad[o.readout_b] + dbr;
    }
    let mut dh = vec![T::zero(); r * e];
    {
        let (dg, db) = two_mut(grad, o.lnf_g, o.lnf_b, e);
        layer_norm_backward(&dz, &cache.xhatf, &cache.rstdf, p.at(o.lnf_g, e), e, dg, db, &mut dh);
    }

    let mut dg = vec![T::zero(); r * f];
    let mut dm = vec![T::zero(); r * e];
    let mut dattn = vec![T::zero(); r * e];
    let mut dqkv = vec![T::zero(); r * 3 * e];
    let mut da = vec![T::zero(); r * e];
    for (b, lc) in o.blocks.iter().zip(&cache.layers).rev() {
        // MLP branch.
        col_sum_into(&dh, e, &mut grad[b.mproj_b..b.mproj_b + e]);
        gemm(Op::T, Op::N, f, r, e, &lc.g, &dh, T::one(), &mut grad[b.mproj_w..b.mproj_w + f * e]);
        gemm(Op::N, Op::T, r, e, f, &dh, p.at(b.mproj_w, f * e), T::zero(), &mut dg);
        for ((dv, x), t) in dg.iter_mut().zip(&lc.f).zip(&lc.th) {
            *dv = *dv * gelu_grad(*x, *t);
        }
        col_sum_into(&dg, f, &mut grad[b.fc_b..b.fc_b + f]);
        gemm(Op::T, Op::N, e, r, f, &lc.m, &dg, T::one(), &mut grad[b.fc_w..b.fc_w + e * f]);
        gemm(Op::N, Op::T, r, f, e, &dg, p.at(b.fc_w, e * f), T::zero(), &mut dm);
        {
            let (gg, gb) = two_mut(grad, b.ln2_g, b.ln2_b, e);
            layer_norm_backward(&dm, &lc.xhat2, &lc.rstd2, p.at(b.ln2_g, e), e, gg, gb, &mut dh);
        }

        // Attention branch.
        col_sum_into(&dh, e, &mut grad[b.proj_b..b.proj_b + e]);
        gemm(Op::T, Op::N, e, r, e, &lc.attn, &dh, T::one(), &mut grad[b.proj_w..b.proj_w + e * e]);
        gemm(Op::N, Op::T, r, e, e, &dh, p.at(b.proj_w, e * e), T::zero(), &mut dattn);
        attention_backward(&lc.qkv, &lc.probs, &dattn, d, c, &mut dqkv);
        col_sum_into(&dqkv, 3 * e, &mut grad[b.qkv_b..b.qkv_b + 3 * e]);
        gemm(Op::T, Op::N, e, r, 3 * e, &lc.a, &dqkv, T::one(), &mut grad[b.qkv_w..b.qkv_w + 3 * e * e]);
        gemm(Op::N, Op::T, r, 3 * e, e, &dqkv, p.at(b.qkv_w, e * 3 * e), T::zero(), &mut da);
        {
            let (gg, gb) = two_mut(grad, b.ln1_g, b.ln1_b, e);
            layer_norm_backward(&da, &lc.xhat1, &lc.rstd1, p.at(b.ln1_g, e), e, gg, gb, &mut dh);
        }
    }

    for (row, hr) in dh.chunks_exact(e).enumerate() {
        let t = row % n;
        add_slice(&mut grad[o.pos + t * e..o.pos + (t + 1) * e], hr);
    }
    col_sum_into(&dh, e, &mut grad[o.embed_b..o.embed_b + e]);
    gemm(Op::T, Op::N, w, r, e, &cache.tokens, &dh, T::one(), &mut grad[o.embed_w..o.embed_w + w * e]);
}

fn add_slice<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a = *a + *b;
    }
}

/// Disjoint mutable views of two `len`-long arrays at `a < b`.
fn two_mut<T>(buf: &mut [T], a: usize, b: usize, len: usize) -> (&mut [T], &mut [T]) {
    debug_assert!(a + len <= b);
    let (lo, hi) = buf.split_at_mut(b);
    (&mut lo[a..a + len], &mut hi[..len])
}
