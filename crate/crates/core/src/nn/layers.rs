//! Forward and backward passes of the transformer sub-layers.

use super::kernels::{acc_at_b, acc_rows, add_row_bias, dot, matmul, matmul_bt, softmax_rows};
use crate::scalar::Scalar;

pub(crate) const LN_EPS: f64 = 1e-5;

pub(crate) type Grads<T> = [Vec<T>];

#[derive(Debug, Clone, Copy)]
pub(crate) struct LnIdx {
    pub g: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnIdx {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct FfnIdx {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

pub(crate) struct LnCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

pub(crate) fn ln_forward<T: Scalar>(x: &[T], g: &[T], b: &[T], d: usize) -> (Vec<T>, LnCache<T>) {
    let n = x.len() / d;
    let inv_d = T::of(1.0 / d as f64);
    let eps = T::of(LN_EPS);
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(n);
    for r in 0..n {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        rstd.push(rs);
        for c in 0..d {
            let h = (row[c] - mean) * rs;
            xhat[r * d + c] = h;
            y[r * d + c] = g[c] * h + b[c];
        }
    }
    (y, LnCache { xhat, rstd })
}

/// Layer-norm forward without a cache (inference).
pub(crate) fn ln_apply<T: Scalar>(x: &[T], g: &[T], b: &[T], d: usize) -> Vec<T> {
    ln_forward(x, g, b, d).0
}

pub(crate) fn ln_backward<T: Scalar>(
    dy: &[T],
    cache: &LnCache<T>,
    g: &[T],
    idx: LnIdx,
    grads: &mut Grads<T>,
    d: usize,
) -> Vec<T> {
    let n = dy.len() / d;
    let inv_d = T::of(1.0 / d as f64);
    {
        let dg = &mut grads[idx.g];
        for r in 0..n {
            for c in 0..d {
                dg[c] += dy[r * d + c] * cache.xhat[r * d + c];
            }
        }
    }
    acc_rows(&mut grads[idx.b], dy, d);
    let mut dx = vec![T::zero(); dy.len()];
    for r in 0..n {
        let mut mean_dh = T::zero();
        let mut mean_dh_h = T::zero();
        for c in 0..d {
            let dh = dy[r * d + c] * g[c];
            mean_dh += dh;
            mean_dh_h += dh * cache.xhat[r * d + c];
        }
        mean_dh *= inv_d;
        mean_dh_h *= inv_d;
        let rs = cache.rstd[r];
        for c in 0..d {
            let dh = dy[r * d + c] * g[c];
            dx[r * d + c] = rs * (dh - mean_dh - cache.xhat[r * d + c] * mean_dh_h);
        }
    }
    dx
}

pub(crate) struct AttnCache<T> {
    xq: Vec<T>,
    xkv: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    ctx: Vec<T>,
    lq: usize,
    lk: usize,
}

/// Scaled dot-product attention of `q[lq,d]` over `k,v[lk,d]`, split into heads.
/// Returns the concatenated context `[lq,d]` and the per-head probabilities.
#[allow(clippy::too_many_arguments)] // raw buffers plus their dimensions
pub(crate) fn attend<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    lq: usize,
    lk: usize,
    d: usize,
    heads: usize,
    causal_offset: Option<usize>,
) -> (Vec<T>, Vec<T>) {
    let dh = d / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut probs = vec![T::zero(); heads * lq * lk];
    let mut ctx = vec![T::zero(); lq * d];
    for h in 0..heads {
        let off = h * dh;
        let p = &mut probs[h * lq * lk..(h + 1) * lq * lk];
        for i in 0..lq {
            let qi = &q[i * d + off..i * d + off + dh];
            for j in 0..lk {
                let masked = causal_offset.is_some_and(|o| j > i + o);
                p[i * lk + j] = if masked {
                    T::neg_infinity()
                } else {
                    dot(qi, &k[j * d + off..j * d + off + dh]) * scale
                };
            }
        }
        softmax_rows(p, lk);
        for i in 0..lq {
            let out = &mut ctx[i * d + off..i * d + off + dh];
            for j in 0..lk {
                let w = p[i * lk + j];
                if w != T::zero() {
                    for (o, &vv) in out.iter_mut().zip(&v[j * d + off..j * d + off + dh]) {
                        *o += w * vv;
                    }
                }
            }
        }
    }
    (ctx, probs)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attn_forward<T: Scalar>(
    params: &[&[T]],
    idx: AttnIdx,
    xq: &[T],
    lq: usize,
    xkv: &[T],
    lk: usize,
    causal: bool,
    d: usize,
    heads: usize,
) -> (Vec<T>, AttnCache<T>) {
    let q = matmul(xq, params[idx.wq], lq, d, d);
    let k = matmul(xkv, params[idx.wk], lk, d, d);
    let v = matmul(xkv, params[idx.wv], lk, d, d);
    let (ctx, probs) = attend(&q, &k, &v, lq, lk, d, heads, causal.then_some(0));
    let out = matmul(&ctx, params[idx.wo], lq, d, d);
    let cache = AttnCache {
        xq: xq.to_vec(),
        xkv: xkv.to_vec(),
        q,
        k,
        v,
        probs,
        ctx,
        lq,
        lk,
    };
    (out, cache)
}

/// Returns `(d xq, d xkv)`.
pub(crate) fn attn_backward<T: Scalar>(
    params: &[&[T]],
    idx: AttnIdx,
    cache: &AttnCache<T>,
    dout: &[T],
    grads: &mut Grads<T>,
    d: usize,
    heads: usize,
) -> (Vec<T>, Vec<T>) {
    let (lq, lk) = (cache.lq, cache.lk);
    let dh = d / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    acc_at_b(&mut grads[idx.wo], &cache.ctx, dout, lq, d, d);
    let dctx = matmul_bt(dout, params[idx.wo], lq, d, d);
    let mut dq = vec![T::zero(); lq * d];
    let mut dk = vec![T::zero(); lk * d];
    let mut dv = vec![T::zero(); lk * d];
    let mut ds = vec![T::zero(); lk];
    for h in 0..heads {
        let off = h * dh;
        let p = &cache.probs[h * lq * lk..(h + 1) * lq * lk];
        for i in 0..lq {
            let dci = &dctx[i * d + off..i * d + off + dh];
            let pi = &p[i * lk..(i + 1) * lk];
            let mut rowdot = T::zero();
            for j in 0..lk {
                let dp = dot(dci, &cache.v[j * d + off..j * d + off + dh]);
                ds[j] = dp;
                rowdot += dp * pi[j];
            }
            for j in 0..lk {
                let pij = pi[j];
                if pij == T::zero() {
                    continue;
                }
                let s = pij * (ds[j] - rowdot) * scale;
                for c in 0..dh {
                    dv[j * d + off + c] += pij * dci[c];
                    dq[i * d + off + c] += s * cache.k[j * d + off + c];
                    dk[j * d + off + c] += s * cache.q[i * d + off + c];
                }
            }
        }
    }
    acc_at_b(&mut grads[idx.wq], &cache.xq, &dq, lq, d, d);
    acc_at_b(&mut grads[idx.wk], &cache.xkv, &dk, lk, d, d);
    acc_at_b(&mut grads[idx.wv], &cache.xkv, &dv, lk, d, d);
    let dxq = matmul_bt(&dq, params[idx.wq], lq, d, d);
    let mut dxkv = matmul_bt(&dk, params[idx.wk], lk, d, d);
    let dxv = matmul_bt(&dv, params[idx.wv], lk, d, d);
    super::kernels::add_into(&mut dxkv, &dxv);
    (dxq, dxkv)
}

pub(crate) struct FfnCache<T> {
    x: Vec<T>,
    pre: Vec<T>,
    act: Vec<T>,
    n: usize,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// tanh-approximated GELU and its derivative.
#[inline]
fn gelu<T: Scalar>(x: T) -> (T, T) {
    let (c, k, half) = (T::of(GELU_C), T::of(GELU_K), T::of(0.5));
    let x2 = x * x;
    let t = (c * (x + k * x2 * x)).tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * k * x2);
    (y, dy)
}

pub(crate) fn ffn_forward<T: Scalar>(
    params: &[&[T]],
    idx: FfnIdx,
    x: &[T],
    n: usize,
    d: usize,
    f: usize,
) -> (Vec<T>, FfnCache<T>) {
    let mut pre = matmul(x, params[idx.w1], n, d, f);
    add_row_bias(&mut pre, params[idx.b1]);
    let act: Vec<T> = pre.iter().map(|&v| gelu(v).0).collect();
    let mut y = matmul(&act, params[idx.w2], n, f, d);
    add_row_bias(&mut y, params[idx.b2]);
    (
        y,
        FfnCache {
            x: x.to_vec(),
            pre,
            act,
            n,
        },
    )
}

pub(crate) fn ffn_backward<T: Scalar>(
    params: &[&[T]],
    idx: FfnIdx,
    cache: &FfnCache<T>,
    dy: &[T],
    grads: &mut Grads<T>,
    d: usize,
    f: usize,
) -> Vec<T> {
    let n = cache.n;
    acc_at_b(&mut grads[idx.w2], &cache.act, dy, n, f, d);
    acc_rows(&mut grads[idx.b2], dy, d);
    let mut dact = matmul_bt(dy, params[idx.w2], n, d, f);
    for (g, &p) in dact.iter_mut().zip(&cache.pre) {
        *g *= gelu(p).1;
    }
    acc_at_b(&mut grads[idx.w1], &cache.x, &dact, n, d, f);
    acc_rows(&mut grads[idx.b1], &dact, f);
    matmul_bt(&dact, params[idx.w1], n, f, d)
}

/// Layer normalization without gain or bias (final encoder/decoder output).
pub(crate) fn norm_forward<T: Scalar>(x: &[T], d: usize) -> (Vec<T>, LnCache<T>) {
    let ones = vec![T::one(); d];
    let zeros = vec![T::zero(); d];
    let (y, cache) = ln_forward(x, &ones, &zeros, d);
    (y, cache)
}

pub(crate) fn norm_backward<T: Scalar>(dy: &[T], cache: &LnCache<T>, d: usize) -> Vec<T> {
    let n = dy.len() / d;
    let inv_d = T::of(1.0 / d as f64);
    let mut dx = vec![T::zero(); dy.len()];
    for r in 0..n {
        let row = &dy[r * d..(r + 1) * d];
        let h = &cache.xhat[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let mean_h = row.iter().zip(h).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
        for c in 0..d {
            dx[r * d + c] = cache.rstd[r] * (row[c] - mean - h[c] * mean_h);
        }
    }
    dx
}
