//! Differentiable primitives with hand-derived backward passes.
//!
//! Every backward function accumulates (`+=`) into the supplied parameter
//! gradient buffers and returns the gradient with respect to its input, so
//! shared parameters (e.g. the convolution applied per character) sum their
//! contributions naturally.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis, Dimension};

use super::scalar::Scalar;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// y = x · wᵀ + b, with x `[n, in]`, w `[out, in]`.
pub fn linear_forward<F: Scalar>(
    x: ArrayView2<F>,
    w: ArrayView2<F>,
    b: ArrayView1<F>,
) -> Array2<F> {
    x.dot(&w.t()) + &b
}

/// Returns dx; accumulates dw += dyᵀ·x and db += Σ_rows dy.
pub fn linear_backward<F: Scalar>(
    x: ArrayView2<F>,
    w: ArrayView2<F>,
    dy: ArrayView2<F>,
    dw: &mut Array2<F>,
    db: &mut Array1<F>,
) -> Array2<F> {
    *dw += &dy.t().dot(&x);
    *db += &dy.sum_axis(Axis(0));
    dy.dot(&w)
}

pub struct LayerNormCache<F> {
    pub xhat: Array2<F>,
    pub inv_std: Array1<F>,
}

/// Row-wise layer normalization with affine parameters.
pub fn layernorm_forward<F: Scalar>(
    x: ArrayView2<F>,
    gamma: ArrayView1<F>,
    beta: ArrayView1<F>,
) -> (Array2<F>, LayerNormCache<F>) {
    let (n, d) = x.dim();
    let dd = F::from_f64(d as f64);
    let eps = F::from_f64(LAYER_NORM_EPS);
    let mut xhat = Array2::<F>::zeros((n, d));
    let mut inv_std = Array1::<F>::zeros(n);
    for i in 0..n {
        let row = x.row(i);
        let mut mean = F::zero();
        for &v in row {
            mean += v;
        }
        mean /= dd;
        let mut var = F::zero();
        for &v in row {
            let c = v - mean;
            var += c * c;
        }
        var /= dd;
        let inv = F::one() / (var + eps).sqrt();
        inv_std[i] = inv;
        for j in 0..d {
            xhat[[i, j]] = (row[j] - mean) * inv;
        }
    }
    let y = &xhat * &gamma + &beta;
    (y, LayerNormCache { xhat, inv_std })
}

/// Returns dx; accumulates dgamma and dbeta.
pub fn layernorm_backward<F: Scalar>(
    cache: &LayerNormCache<F>,
    gamma: ArrayView1<F>,
    dy: ArrayView2<F>,
    dgamma: &mut Array1<F>,
    dbeta: &mut Array1<F>,
) -> Array2<F> {
    let (n, d) = cache.xhat.dim();
    let dd = F::from_f64(d as f64);
    *dgamma += &(&dy * &cache.xhat).sum_axis(Axis(0));
    *dbeta += &dy.sum_axis(Axis(0));
    let mut dx = Array2::<F>::zeros((n, d));
    for i in 0..n {
        let mut mean_dxhat = F::zero();
        let mut mean_dxhat_xhat = F::zero();
        for j in 0..d {
            let dxhat = dy[[i, j]] * gamma[j];
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * cache.xhat[[i, j]];
        }
        mean_dxhat /= dd;
        mean_dxhat_xhat /= dd;
        for j in 0..d {
            let dxhat = dy[[i, j]] * gamma[j];
            dx[[i, j]] =
                cache.inv_std[i] * (dxhat - mean_dxhat - cache.xhat[[i, j]] * mean_dxhat_xhat);
        }
    }
    dx
}

/// Numerically stable row softmax. Entries may be `-inf` (hard-masked);
/// they map to an exact probability of zero. Each row must contain at least
/// one finite entry.
pub fn softmax_rows<F: Scalar>(scores: ArrayView2<F>) -> Array2<F> {
    let (n, m) = scores.dim();
    let mut probs = Array2::<F>::zeros((n, m));
    for i in 0..n {
        let mut maxv = F::neg_infinity();
        for &v in scores.row(i) {
            maxv = maxv.maximum(v);
        }
        debug_assert!(maxv.is_finite(), "softmax row fully masked");
        let mut sum = F::zero();
        for j in 0..m {
            let e = (scores[[i, j]] - maxv).exp();
            probs[[i, j]] = e;
            sum += e;
        }
        for j in 0..m {
            probs[[i, j]] /= sum;
        }
    }
    probs
}

/// dscores = p ⊙ (dy − Σ_j dy_j p_j) per row; exactly zero where p is zero.
pub fn softmax_backward<F: Scalar>(probs: ArrayView2<F>, dy: ArrayView2<F>) -> Array2<F> {
    let (n, m) = probs.dim();
    let mut dx = Array2::<F>::zeros((n, m));
    for i in 0..n {
        let mut dot = F::zero();
        for j in 0..m {
            dot += dy[[i, j]] * probs[[i, j]];
        }
        for j in 0..m {
            dx[[i, j]] = probs[[i, j]] * (dy[[i, j]] - dot);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_scalar<F: Scalar>(x: F) -> F {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (F::one() + u.tanh())
}

fn gelu_grad_scalar<F: Scalar>(x: F) -> F {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * c * (F::one() + three * a * x * x)
}

/// Smooth GELU (tanh form), elementwise over any dimensionality.
pub fn gelu<F: Scalar, D: Dimension>(x: &ndarray::Array<F, D>) -> ndarray::Array<F, D> {
    x.mapv(gelu_scalar)
}

/// dx = gelu'(x_pre) ⊙ dy.
pub fn gelu_backward<F: Scalar, D: Dimension>(
    x_pre: &ndarray::Array<F, D>,
    dy: &ndarray::Array<F, D>,
) -> ndarray::Array<F, D> {
    let mut dx = x_pre.mapv(gelu_grad_scalar);
    dx *= dy;
    dx
}

fn conv_pad_left(kernel: usize) -> usize {
    (kernel - 1) / 2
}

/// Length-preserving 1-D convolution over the time axis.
/// x `[in_ch, T]`, w `[out_ch, in_ch, K]` → y `[out_ch, T]`, zero padding.
pub fn conv1d_forward<F: Scalar>(
    x: ArrayView2<F>,
    w: ArrayView3<F>,
    b: ArrayView1<F>,
) -> Array2<F> {
    let (in_ch, t_len) = x.dim();
    let (out_ch, w_in, k) = w.dim();
    debug_assert_eq!(in_ch, w_in);
    let pad = conv_pad_left(k);
    let mut y = Array2::<F>::zeros((out_ch, t_len));
    for o in 0..out_ch {
        for t in 0..t_len {
            let mut acc = b[o];
            for c in 0..in_ch {
                for kk in 0..k {
                    let src = t + kk;
                    if src >= pad && src - pad < t_len {
                        acc += w[[o, c, kk]] * x[[c, src - pad]];
                    }
                }
            }
            y[[o, t]] = acc;
        }
    }
    y
}

/// Returns dx; accumulates dw and db.
pub fn conv1d_backward<F: Scalar>(
    x: ArrayView2<F>,
    w: ArrayView3<F>,
    dy: ArrayView2<F>,
    dw: &mut Array3<F>,
    db: &mut Array1<F>,
) -> Array2<F> {
    let (in_ch, t_len) = x.dim();
    let (out_ch, _, k) = w.dim();
    let pad = conv_pad_left(k);
    let mut dx = Array2::<F>::zeros((in_ch, t_len));
    for o in 0..out_ch {
        for t in 0..t_len {
            let g = dy[[o, t]];
            db[o] += g;
            for c in 0..in_ch {
                for kk in 0..k {
                    let src = t + kk;
                    if src >= pad && src - pad < t_len {
                        dw[[o, c, kk]] += g * x[[c, src - pad]];
                        dx[[c, src - pad]] += g * w[[o, c, kk]];
                    }
                }
            }
        }
    }
    dx
}

/// Gathers embedding rows, scaled (the usual √d factor).
pub fn embed_ids<F: Scalar>(table: ArrayView2<F>, ids: &[usize], scale: F) -> Array2<F> {
    let d = table.ncols();
    let mut out = Array2::<F>::zeros((ids.len(), d));
    for (i, &id) in ids.iter().enumerate() {
        for j in 0..d {
            out[[i, j]] = table[[id, j]] * scale;
        }
    }
    out
}

/// Scatter-add of dy rows back into the embedding gradient.
pub fn embed_backward<F: Scalar>(
    dtable: &mut Array2<F>,
    ids: &[usize],
    scale: F,
    dy: ArrayView2<F>,
) {
    for (i, &id) in ids.iter().enumerate() {
        for j in 0..dy.ncols() {
            dtable[[id, j]] += dy[[i, j]] * scale;
        }
    }
}

const NORM_FLOOR: f64 = 1e-12;

/// Returns (v / max(‖v‖, 1e-12), clamped norm).
pub fn l2_normalize<F: Scalar>(v: ArrayView1<F>) -> (Array1<F>, F) {
    let mut sq = F::zero();
    for &x in v {
        sq += x * x;
    }
    let norm = sq.sqrt().maximum(F::from_f64(NORM_FLOOR));
    (v.mapv(|x| x / norm), norm)
}

/// dv = (dy − y · (y·dy)) / norm.
pub fn l2_normalize_backward<F: Scalar>(
    y: ArrayView1<F>,
    norm: F,
    dy: ArrayView1<F>,
) -> Array1<F> {
    let mut dot = F::zero();
    for j in 0..y.len() {
        dot += y[j] * dy[j];
    }
    Array1::from_shape_fn(y.len(), |j| (dy[j] - y[j] * dot) / norm)
}

/// Fixed sinusoidal positional encodings `[len, d]`.
pub fn sinusoidal_pe<F: Scalar>(len: usize, d: usize) -> Array2<F> {
    Array2::from_shape_fn((len, d), |(pos, j)| {
        let i = (j / 2 * 2) as f64; // paired exponent
        let angle = pos as f64 / 10000f64.powf(i / d as f64);
        F::from_f64(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}
