//! Building blocks of the encoder-decoder with hand-written backward
//! passes. Everything is 64-bit; shapes are [time x features] matrices.
//!
//! Conventions: forward functions return their output plus a cache of the
//! intermediates the matching backward function needs; backward functions
//! take the upstream gradient first and return input gradients followed by
//! parameter gradients in forward-argument order.

use ndarray::{s, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

pub const LN_EPS: f64 = 1e-6;

/// Sinusoidal position encoding added in place: even feature columns get
/// sin(t / 10000^(j/d)), odd columns cos at the previous even exponent.
pub fn add_positions(x: &mut Array2<f64>) {
    let (t_len, d) = x.dim();
    for t in 0..t_len {
        for j in 0..d {
            let exponent = (j - j % 2) as f64 / d as f64;
            let angle = t as f64 / 10000f64.powf(exponent);
            x[[t, j]] += if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
}

pub struct LnCache {
    xhat: Array2<f64>,
    inv: Vec<f64>,
}

/// Row-wise layer normalization with learned gain and bias (shape [1 x d]).
pub fn layer_norm(
    x: &Array2<f64>,
    gain: &Array2<f64>,
    bias: &Array2<f64>,
) -> (Array2<f64>, LnCache) {
    let (t_len, d) = x.dim();
    let mut xhat = Array2::zeros((t_len, d));
    let mut y = Array2::zeros((t_len, d));
    let mut inv = vec![0.0; t_len];
    for r in 0..t_len {
        let mean = x.row(r).mean().unwrap();
        let var = x.row(r).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let iv = 1.0 / (var + LN_EPS).sqrt();
        inv[r] = iv;
        for c in 0..d {
            let h = (x[[r, c]] - mean) * iv;
            xhat[[r, c]] = h;
            y[[r, c]] = h * gain[[0, c]] + bias[[0, c]];
        }
    }
    (y, LnCache { xhat, inv })
}

/// Returns (dx, dgain, dbias).
pub fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    gain: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let (t_len, d) = dy.dim();
    let mut dgain = Array2::zeros((1, d));
    let mut dbias = Array2::zeros((1, d));
    let mut dx = Array2::zeros((t_len, d));
    for r in 0..t_len {
        let mut m1 = 0.0; // mean of dxhat
        let mut m2 = 0.0; // mean of dxhat * xhat
        for c in 0..d {
            let dxhat = dy[[r, c]] * gain[[0, c]];
            dgain[[0, c]] += dy[[r, c]] * cache.xhat[[r, c]];
            dbias[[0, c]] += dy[[r, c]];
            m1 += dxhat;
            m2 += dxhat * cache.xhat[[r, c]];
        }
        m1 /= d as f64;
        m2 /= d as f64;
        for c in 0..d {
            let dxhat = dy[[r, c]] * gain[[0, c]];
            dx[[r, c]] = cache.inv[r] * (dxhat - m1 - cache.xhat[[r, c]] * m2);
        }
    }
    (dx, dgain, dbias)
}

/// Row-wise softmax in place. Rows must contain at least one finite entry;
/// -inf entries become exact zeros.
pub fn softmax_rows(s: &mut Array2<f64>) {
    for mut row in s.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Gradient through a row-wise softmax: dS = A * (dA - rowsum(dA * A)).
pub fn softmax_backward(a: &Array2<f64>, da: &Array2<f64>) -> Array2<f64> {
    let mut ds = Array2::zeros(a.dim());
    for r in 0..a.nrows() {
        let dot: f64 = a.row(r).iter().zip(da.row(r)).map(|(x, y)| x * y).sum();
        for c in 0..a.ncols() {
            ds[[r, c]] = a[[r, c]] * (da[[r, c]] - dot);
        }
    }
    ds
}

/// Projection weights of one attention block (all [d x d], no biases).
pub struct AttnWeights<'a> {
    pub wq: &'a Array2<f64>,
    pub wk: &'a Array2<f64>,
    pub wv: &'a Array2<f64>,
    pub wo: &'a Array2<f64>,
}

pub struct AttnCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Post-softmax attention per head, [tq x tk] each.
    weights: Vec<Array2<f64>>,
    concat: Array2<f64>,
}

/// Scaled dot-product multi-head attention. `q_in` provides queries,
/// `kv_in` keys and values (the same matrix for self-attention). With
/// `causal`, query position i attends only to positions <= i.
pub fn attention(
    q_in: &Array2<f64>,
    kv_in: &Array2<f64>,
    w: &AttnWeights,
    num_heads: usize,
    causal: bool,
) -> (Array2<f64>, AttnCache) {
    let d = q_in.ncols();
    let dk = d / num_heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let q = q_in.dot(w.wq);
    let k = kv_in.dot(w.wk);
    let v = kv_in.dot(w.wv);
    let (tq, tk) = (q.nrows(), k.nrows());

    let mut concat = Array2::zeros((tq, d));
    let mut weights = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let cols = s![.., h * dk..(h + 1) * dk];
        let qh = q.slice(cols);
        let kh = k.slice(cols);
        let vh = v.slice(cols);
        let mut scores = qh.dot(&kh.t());
        scores *= scale;
        if causal {
            for i in 0..tq {
                for j in (i + 1)..tk {
                    scores[[i, j]] = f64::NEG_INFINITY;
                }
            }
        }
        softmax_rows(&mut scores);
        concat.slice_mut(cols).assign(&scores.dot(&vh));
        weights.push(scores);
    }
    let out = concat.dot(w.wo);
    (out, AttnCache { q, k, v, weights, concat })
}

pub struct AttnGrads {
    pub dq_in: Array2<f64>,
    pub dkv_in: Array2<f64>,
    pub dwq: Array2<f64>,
    pub dwk: Array2<f64>,
    pub dwv: Array2<f64>,
    pub dwo: Array2<f64>,
}

pub fn attention_backward(
    dout: &Array2<f64>,
    q_in: &Array2<f64>,
    kv_in: &Array2<f64>,
    w: &AttnWeights,
    cache: &AttnCache,
) -> AttnGrads {
    let d = q_in.ncols();
    let num_heads = cache.weights.len();
    let dk = d / num_heads;
    let scale = 1.0 / (dk as f64).sqrt();

    let dwo = cache.concat.t().dot(dout);
    let dconcat = dout.dot(&w.wo.t());

    let mut dq = Array2::zeros(cache.q.dim());
    let mut dkmat = Array2::zeros(cache.k.dim());
    let mut dv = Array2::zeros(cache.v.dim());
    for h in 0..num_heads {
        let cols = s![.., h * dk..(h + 1) * dk];
        let a = &cache.weights[h];
        let dch = dconcat.slice(cols);
        let vh = cache.v.slice(cols);
        let qh = cache.q.slice(cols);
        let kh = cache.k.slice(cols);

        let da = dch.dot(&vh.t());
        dv.slice_mut(cols).assign(&a.t().dot(&dch));
        // Masked entries have a = 0, so their score gradient vanishes.
        let mut ds = softmax_backward(a, &da);
        ds *= scale;
        dq.slice_mut(cols).assign(&ds.dot(&kh));
        dkmat.slice_mut(cols).assign(&ds.t().dot(&qh));
    }

    AttnGrads {
        dq_in: dq.dot(&w.wq.t()),
        dkv_in: dkmat.dot(&w.wk.t()) + dv.dot(&w.wv.t()),
        dwq: q_in.t().dot(&dq),
        dwk: kv_in.t().dot(&dkmat),
        dwv: kv_in.t().dot(&dv),
        dwo,
    }
}

pub struct FfnCache {
    x: Array2<f64>,
    pre: Array2<f64>,
}

/// Two-layer position-wise network: relu(x W1 + b1) W2 + b2, biases shaped
/// [1 x n] and broadcast over rows.
pub fn ffn(
    x: &Array2<f64>,
    w1: &Array2<f64>,
    b1: &Array2<f64>,
    w2: &Array2<f64>,
    b2: &Array2<f64>,
) -> (Array2<f64>, FfnCache) {
    let mut pre = x.dot(w1);
    for mut row in pre.rows_mut() {
        for (v, b) in row.iter_mut().zip(b1.row(0)) {
            *v += b;
        }
    }
    let act = pre.mapv(|v| v.max(0.0));
    let mut y = act.dot(w2);
    for mut row in y.rows_mut() {
        for (v, b) in row.iter_mut().zip(b2.row(0)) {
            *v += b;
        }
    }
    (y, FfnCache { x: x.clone(), pre })
}

pub struct FfnGrads {
    pub dx: Array2<f64>,
    pub dw1: Array2<f64>,
    pub db1: Array2<f64>,
    pub dw2: Array2<f64>,
    pub db2: Array2<f64>,
}

pub fn ffn_backward(
    dy: &Array2<f64>,
    w1: &Array2<f64>,
    w2: &Array2<f64>,
    cache: &FfnCache,
) -> FfnGrads {
    let act = cache.pre.mapv(|v| v.max(0.0));
    let db2 = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    let dw2 = act.t().dot(dy);
    let mut dpre = dy.dot(&w2.t());
    dpre.zip_mut_with(&cache.pre, |g, &p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
    let db1 = dpre.sum_axis(Axis(0)).insert_axis(Axis(0));
    let dw1 = cache.x.t().dot(&dpre);
    let dx = dpre.dot(&w1.t());
    FfnGrads { dx, dw1, db1, dw2, db2 }
}

/// Inverted dropout applied in place; the returned mask (None when
/// disabled) replays the same scaling in the backward pass. Mask entries
/// are drawn row-major.
pub struct DropMask(Option<Array2<f64>>);

pub fn dropout(x: &mut Array2<f64>, rate: f64, rng: Option<&mut ChaCha12Rng>) -> DropMask {
    let Some(rng) = rng else { return DropMask(None) };
    if rate == 0.0 {
        return DropMask(None);
    }
    let keep = 1.0 - rate;
    let mut mask = Array2::zeros(x.dim());
    for r in 0..x.nrows() {
        for c in 0..x.ncols() {
            let m = if rng.random::<f64>() < rate { 0.0 } else { 1.0 / keep };
            mask[[r, c]] = m;
            x[[r, c]] *= m;
        }
    }
    DropMask(Some(mask))
}

impl DropMask {
    pub fn backward(&self, dx: &mut Array2<f64>) {
        if let Some(mask) = &self.0 {
            *dx *= mask;
        }
    }
}
