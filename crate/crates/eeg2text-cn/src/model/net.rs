//! Forward and backward passes: per-character convolutional front end,
//! transformer encoder over character positions, causal transformer decoder
//! with cross-attention, ablation classifier head, and contrastive
//! projection head.
//!
//! Masking is hard: masked attention scores are set to `-inf` before the
//! softmax, so masked positions get an exactly-zero probability and exactly
//! zero gradient. Backward passes accumulate into a caller-owned gradient
//! `ModelParams` twin.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::math::{
    conv1d_backward, conv1d_forward, embed_backward, embed_ids, gelu, gelu_backward,
    l2_normalize, l2_normalize_backward, layernorm_backward, layernorm_forward, linear_backward,
    linear_forward, sinusoidal_pe, softmax_backward, softmax_rows, LayerNormCache,
};
use super::params::{Attention, DecoderLayer, EncoderLayer, ModelConfig, ModelParams};
use super::scalar::Scalar;
use crate::error::{Error, Result};
use crate::textcodec::BOS_ID;

/// Encoder output: one d_model row per character slot.
#[derive(Debug, Clone)]
pub struct EncodedSequence<F> {
    pub h: Array2<F>,
    pub src_mask: Vec<bool>,
}

/// Training-time dropout source. `None` (or p = 0) disables dropout.
pub struct Dropout<'a> {
    pub p: f64,
    pub rng: &'a mut ChaCha8Rng,
}

fn apply_dropout<F: Scalar>(
    x: Array2<F>,
    drop: &mut Option<Dropout<'_>>,
) -> (Array2<F>, Option<Array2<F>>) {
    match drop {
        Some(d) if d.p > 0.0 => {
            let keep = 1.0 - d.p;
            let inv = F::from_f64(1.0 / keep);
            let mask = Array2::from_shape_fn(x.dim(), |_| {
                if d.rng.random::<f64>() < keep {
                    inv
                } else {
                    F::zero()
                }
            });
            (&x * &mask, Some(mask))
        }
        _ => (x, None),
    }
}

// ---------------------------------------------------------------------------
// Multi-head attention
// ---------------------------------------------------------------------------

pub(crate) struct MhaCache<F> {
    q_in: Array2<F>,
    kv_in: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    probs: Vec<Array2<F>>,
    ctx: Array2<F>,
}

fn mha_forward<F: Scalar>(
    attn: &Attention<F>,
    n_heads: usize,
    q_in: &Array2<F>,
    kv_in: &Array2<F>,
    key_mask: Option<&[bool]>,
    causal: bool,
) -> (Array2<F>, MhaCache<F>) {
    let (lq, d) = q_in.dim();
    let lk = kv_in.nrows();
    let dh = d / n_heads;
    let scale = F::from_f64(1.0 / (dh as f64).sqrt());

    let q = linear_forward(q_in.view(), attn.wq.w.view(), attn.wq.b.view());
    let k = linear_forward(kv_in.view(), attn.wk.w.view(), attn.wk.b.view());
    let v = linear_forward(kv_in.view(), attn.wv.w.view(), attn.wv.b.view());

    let mut ctx = Array2::<F>::zeros((lq, d));
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let qh = q.slice(cols);
        let kh = k.slice(cols);
        let vh = v.slice(cols);
        let mut scores = qh.dot(&kh.t());
        scores.mapv_inplace(|x| x * scale);
        for i in 0..lq {
            for j in 0..lk {
                let masked = key_mask.is_some_and(|m| !m[j]) || (causal && j > i);
                if masked {
                    scores[[i, j]] = F::neg_infinity();
                }
            }
        }
        let p = softmax_rows(scores.view());
        ctx.slice_mut(cols).assign(&p.dot(&vh));
        probs.push(p);
    }
    let out = linear_forward(ctx.view(), attn.wo.w.view(), attn.wo.b.view());
    (
        out,
        MhaCache {
            q_in: q_in.clone(),
            kv_in: kv_in.clone(),
            q,
            k,
            v,
            probs,
            ctx,
        },
    )
}

/// Returns (d q_in, d kv_in).
fn mha_backward<F: Scalar>(
    attn: &Attention<F>,
    n_heads: usize,
    cache: &MhaCache<F>,
    dy: ArrayView2<F>,
    g: &mut Attention<F>,
) -> (Array2<F>, Array2<F>) {
    let d = cache.q.ncols();
    let dh = d / n_heads;
    let scale = F::from_f64(1.0 / (dh as f64).sqrt());

    let dctx = linear_backward(
        cache.ctx.view(),
        attn.wo.w.view(),
        dy,
        &mut g.wo.w,
        &mut g.wo.b,
    );
    let mut dq = Array2::<F>::zeros(cache.q.dim());
    let mut dk = Array2::<F>::zeros(cache.k.dim());
    let mut dv = Array2::<F>::zeros(cache.v.dim());
    for h in 0..n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let qh = cache.q.slice(cols);
        let kh = cache.k.slice(cols);
        let vh = cache.v.slice(cols);
        let dctx_h = dctx.slice(cols);
        let p = &cache.probs[h];

        dv.slice_mut(cols).assign(&p.t().dot(&dctx_h));
        let dp = dctx_h.dot(&vh.t());
        let dscore = softmax_backward(p.view(), dp.view());
        let mut dqh = dscore.dot(&kh);
        dqh.mapv_inplace(|x| x * scale);
        dq.slice_mut(cols).assign(&dqh);
        let mut dkh = dscore.t().dot(&qh);
        dkh.mapv_inplace(|x| x * scale);
        dk.slice_mut(cols).assign(&dkh);
    }
    let dq_in = linear_backward(
        cache.q_in.view(),
        attn.wq.w.view(),
        dq.view(),
        &mut g.wq.w,
        &mut g.wq.b,
    );
    let mut dkv_in = linear_backward(
        cache.kv_in.view(),
        attn.wk.w.view(),
        dk.view(),
        &mut g.wk.w,
        &mut g.wk.b,
    );
    dkv_in += &linear_backward(
        cache.kv_in.view(),
        attn.wv.w.view(),
        dv.view(),
        &mut g.wv.w,
        &mut g.wv.b,
    );
    (dq_in, dkv_in)
}

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

struct EncLayerCache<F> {
    mha: MhaCache<F>,
    drop1: Option<Array2<F>>,
    ln1: LayerNormCache<F>,
    x1: Array2<F>,
    ffn_pre: Array2<F>,
    ffn_act: Array2<F>,
    drop2: Option<Array2<F>>,
    ln2: LayerNormCache<F>,
}

fn enc_layer_forward<F: Scalar>(
    layer: &EncoderLayer<F>,
    n_heads: usize,
    x: &Array2<F>,
    key_mask: &[bool],
    drop: &mut Option<Dropout<'_>>,
) -> (Array2<F>, EncLayerCache<F>) {
    let (a, mha) = mha_forward(&layer.attn, n_heads, x, x, Some(key_mask), false);
    let (a, drop1) = apply_dropout(a, drop);
    let (x1, ln1) = layernorm_forward((x + &a).view(), layer.ln1.gamma.view(), layer.ln1.beta.view());
    let ffn_pre = linear_forward(x1.view(), layer.ffn1.w.view(), layer.ffn1.b.view());
    let ffn_act = gelu(&ffn_pre);
    let f = linear_forward(ffn_act.view(), layer.ffn2.w.view(), layer.ffn2.b.view());
    let (f, drop2) = apply_dropout(f, drop);
    let (x2, ln2) =
        layernorm_forward((&x1 + &f).view(), layer.ln2.gamma.view(), layer.ln2.beta.view());
    (
        x2,
        EncLayerCache {
            mha,
            drop1,
            ln1,
            x1,
            ffn_pre,
            ffn_act,
            drop2,
            ln2,
        },
    )
}

fn enc_layer_backward<F: Scalar>(
    layer: &EncoderLayer<F>,
    n_heads: usize,
    cache: &EncLayerCache<F>,
    dy: ArrayView2<F>,
    g: &mut EncoderLayer<F>,
) -> Array2<F> {
    let dres2 = layernorm_backward(&cache.ln2, layer.ln2.gamma.view(), dy, &mut g.ln2.gamma, &mut g.ln2.beta);
    let mut df = dres2.clone();
    if let Some(m) = &cache.drop2 {
        df *= m;
    }
    let dact = linear_backward(
        cache.ffn_act.view(),
        layer.ffn2.w.view(),
        df.view(),
        &mut g.ffn2.w,
        &mut g.ffn2.b,
    );
    let dpre = gelu_backward(&cache.ffn_pre, &dact);
    let mut dx1 = linear_backward(
        cache.x1.view(),
        layer.ffn1.w.view(),
        dpre.view(),
        &mut g.ffn1.w,
        &mut g.ffn1.b,
    );
    dx1 += &dres2;
    let dres1 =
        layernorm_backward(&cache.ln1, layer.ln1.gamma.view(), dx1.view(), &mut g.ln1.gamma, &mut g.ln1.beta);
    let mut da = dres1.clone();
    if let Some(m) = &cache.drop1 {
        da *= m;
    }
    let (dq, dkv) = mha_backward(&layer.attn, n_heads, &cache.mha, da.view(), &mut g.attn);
    let mut dx = dres1;
    dx += &dq;
    dx += &dkv;
    dx
}

pub(crate) struct EncoderTrace<F> {
    conv_in: Vec<Array2<F>>,
    conv_pre: Vec<Array2<F>>,
    feat: Array2<F>,
    layers: Vec<EncLayerCache<F>>,
    pub h: Array2<F>,
}

fn check_encoder_inputs<F: Scalar>(
    cfg: &ModelConfig,
    eeg: &ArrayView3<F>,
    src_mask: &[bool],
) -> Result<()> {
    let want = (cfg.max_len_eeg, cfg.segment_time, cfg.segment_components);
    if eeg.dim() != want {
        return Err(Error::Shape(format!(
            "EEG input has shape {:?}, model expects {:?}",
            eeg.dim(),
            want
        )));
    }
    if src_mask.len() != cfg.max_len_eeg {
        return Err(Error::Shape(format!(
            "src_mask has length {}, expected {}",
            src_mask.len(),
            cfg.max_len_eeg
        )));
    }
    if !src_mask.iter().any(|&m| m) {
        return Err(Error::Mask("src_mask has no valid positions".into()));
    }
    Ok(())
}

fn encoder_forward<F: Scalar>(
    params: &ModelParams<F>,
    cfg: &ModelConfig,
    eeg: ArrayView3<F>,
    src_mask: &[bool],
    drop: &mut Option<Dropout<'_>>,
) -> Result<EncoderTrace<F>> {
    check_encoder_inputs(cfg, &eeg, src_mask)?;
    let len = cfg.max_len_eeg;
    let flat = cfg.conv_flat_dim();

    let mut conv_in = Vec::with_capacity(len);
    let mut conv_pre = Vec::with_capacity(len);
    let mut feat = Array2::<F>::zeros((len, flat));
    for i in 0..len {
        // [time, comps] → [comps, time] for the channel-wise convolution.
        let x = eeg.index_axis(Axis(0), i).t().to_owned();
        let pre = conv1d_forward(x.view(), params.conv_w.view(), params.conv_b.view());
        let act = gelu(&pre);
        for (j, v) in act.iter().enumerate() {
            feat[[i, j]] = *v;
        }
        conv_in.push(x);
        conv_pre.push(pre);
    }
    let mut h = linear_forward(feat.view(), params.proj.w.view(), params.proj.b.view());
    h += &sinusoidal_pe::<F>(len, cfg.d_model);

    let mut layers = Vec::with_capacity(params.enc.len());
    for layer in &params.enc {
        let (next, cache) = enc_layer_forward(layer, cfg.n_heads, &h, src_mask, drop);
        layers.push(cache);
        h = next;
    }
    Ok(EncoderTrace {
        conv_in,
        conv_pre,
        feat,
        layers,
        h,
    })
}

// ---------------------------------------------------------------------------
// Decoder
// ---------------------------------------------------------------------------

struct DecLayerCache<F> {
    self_mha: MhaCache<F>,
    drop1: Option<Array2<F>>,
    ln1: LayerNormCache<F>,
    cross_mha: MhaCache<F>,
    drop2: Option<Array2<F>>,
    ln2: LayerNormCache<F>,
    x2: Array2<F>,
    ffn_pre: Array2<F>,
    ffn_act: Array2<F>,
    drop3: Option<Array2<F>>,
    ln3: LayerNormCache<F>,
}

fn dec_layer_forward<F: Scalar>(
    layer: &DecoderLayer<F>,
    n_heads: usize,
    x: &Array2<F>,
    h: &Array2<F>,
    src_mask: &[bool],
    drop: &mut Option<Dropout<'_>>,
) -> (Array2<F>, DecLayerCache<F>) {
    let (a, self_mha) = mha_forward(&layer.self_attn, n_heads, x, x, None, true);
    let (a, drop1) = apply_dropout(a, drop);
    let (x1, ln1) = layernorm_forward((x + &a).view(), layer.ln1.gamma.view(), layer.ln1.beta.view());
    let (c, cross_mha) = mha_forward(&layer.cross_attn, n_heads, &x1, h, Some(src_mask), false);
    let (c, drop2) = apply_dropout(c, drop);
    let (x2, ln2) =
        layernorm_forward((&x1 + &c).view(), layer.ln2.gamma.view(), layer.ln2.beta.view());
    let ffn_pre = linear_forward(x2.view(), layer.ffn1.w.view(), layer.ffn1.b.view());
    let ffn_act = gelu(&ffn_pre);
    let f = linear_forward(ffn_act.view(), layer.ffn2.w.view(), layer.ffn2.b.view());
    let (f, drop3) = apply_dropout(f, drop);
    let (x3, ln3) =
        layernorm_forward((&x2 + &f).view(), layer.ln3.gamma.view(), layer.ln3.beta.view());
    (
        x3,
        DecLayerCache {
            self_mha,
            drop1,
            ln1,
            cross_mha,
            drop2,
            ln2,
            x2,
            ffn_pre,
            ffn_act,
            drop3,
            ln3,
        },
    )
}

/// Returns (dx, dH contribution from this layer's cross-attention).
fn dec_layer_backward<F: Scalar>(
    layer: &DecoderLayer<F>,
    n_heads: usize,
    cache: &DecLayerCache<F>,
    dy: ArrayView2<F>,
    g: &mut DecoderLayer<F>,
) -> (Array2<F>, Array2<F>) {
    let dres3 = layernorm_backward(&cache.ln3, layer.ln3.gamma.view(), dy, &mut g.ln3.gamma, &mut g.ln3.beta);
    let mut df = dres3.clone();
    if let Some(m) = &cache.drop3 {
        df *= m;
    }
    let dact = linear_backward(
        cache.ffn_act.view(),
        layer.ffn2.w.view(),
        df.view(),
        &mut g.ffn2.w,
        &mut g.ffn2.b,
    );
    let dpre = gelu_backward(&cache.ffn_pre, &dact);
    let mut dx2 = linear_backward(
        cache.x2.view(),
        layer.ffn1.w.view(),
        dpre.view(),
        &mut g.ffn1.w,
        &mut g.ffn1.b,
    );
    dx2 += &dres3;

    let dres2 =
        layernorm_backward(&cache.ln2, layer.ln2.gamma.view(), dx2.view(), &mut g.ln2.gamma, &mut g.ln2.beta);
    let mut dc = dres2.clone();
    if let Some(m) = &cache.drop2 {
        dc *= m;
    }
    let (dq_cross, dh) = mha_backward(&layer.cross_attn, n_heads, &cache.cross_mha, dc.view(), &mut g.cross_attn);
    let mut dx1 = dres2;
    dx1 += &dq_cross;

    let dres1 =
        layernorm_backward(&cache.ln1, layer.ln1.gamma.view(), dx1.view(), &mut g.ln1.gamma, &mut g.ln1.beta);
    let mut da = dres1.clone();
    if let Some(m) = &cache.drop1 {
        da *= m;
    }
    let (dq_self, dkv_self) = mha_backward(&layer.self_attn, n_heads, &cache.self_mha, da.view(), &mut g.self_attn);
    let mut dx = dres1;
    dx += &dq_self;
    dx += &dkv_self;
    (dx, dh)
}

pub(crate) struct DecoderTrace<F> {
    ids: Vec<usize>,
    layers: Vec<DecLayerCache<F>>,
    hdec: Array2<F>,
}

fn check_decoder_ids(cfg: &ModelConfig, ids: &[usize]) -> Result<()> {
    if ids.is_empty() || ids.len() > cfg.max_len_text + 2 {
        return Err(Error::Length(format!(
            "decoder input length {} outside 1..={}",
            ids.len(),
            cfg.max_len_text + 2
        )));
    }
    if ids[0] != BOS_ID {
        return Err(Error::Value(format!(
            "decoder input must begin with BOS (id {BOS_ID}), got {}",
            ids[0]
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::Range(format!(
            "token id {bad} out of range for vocab size {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

fn decoder_stack_forward<F: Scalar>(
    params: &ModelParams<F>,
    cfg: &ModelConfig,
    h: &Array2<F>,
    src_mask: &[bool],
    ids: &[usize],
    drop: &mut Option<Dropout<'_>>,
) -> Result<(Array2<F>, DecoderTrace<F>)> {
    check_decoder_ids(cfg, ids)?;
    let scale = F::from_f64((cfg.d_model as f64).sqrt());
    let mut x = embed_ids(params.tok_emb.view(), ids, scale);
    x += &sinusoidal_pe::<F>(ids.len(), cfg.d_model);

    let mut layers = Vec::with_capacity(params.dec.len());
    for layer in &params.dec {
        let (next, cache) = dec_layer_forward(layer, cfg.n_heads, &x, h, src_mask, drop);
        layers.push(cache);
        x = next;
    }
    let logits = linear_forward(x.view(), params.out.w.view(), params.out.b.view());
    Ok((
        logits,
        DecoderTrace {
            ids: ids.to_vec(),
            layers,
            hdec: x,
        },
    ))
}

/// Backward from dlogits; returns the total dH flowing into the encoder.
fn decoder_stack_backward<F: Scalar>(
    params: &ModelParams<F>,
    cfg: &ModelConfig,
    trace: &DecoderTrace<F>,
    dlogits: ArrayView2<F>,
    grads: &mut ModelParams<F>,
) -> Array2<F> {
    let mut dx = linear_backward(
        trace.hdec.view(),
        params.out.w.view(),
        dlogits,
        &mut grads.out.w,
        &mut grads.out.b,
    );
    let mut dh_total: Option<Array2<F>> = None;
    for (i, (layer, cache)) in params.dec.iter().zip(&trace.layers).enumerate().rev() {
        let (dxi, dh) = dec_layer_backward(layer, cfg.n_heads, cache, dx.view(), &mut grads.dec[i]);
        dx = dxi;
        match &mut dh_total {
            Some(t) => *t += &dh,
            None => dh_total = Some(dh),
        }
    }
    let scale = F::from_f64((cfg.d_model as f64).sqrt());
    embed_backward(&mut grads.tok_emb, &trace.ids, scale, dx.view());
    dh_total.expect("at least one decoder layer")
}

// ---------------------------------------------------------------------------
// Contrastive projection head
// ---------------------------------------------------------------------------

pub(crate) struct ProjectionTrace<F> {
    input: Array1<F>,
    pre1: Array1<F>,
    act: Array1<F>,
    pub z: Array1<F>,
    norm: F,
}

fn lin1d_forward<F: Scalar>(x: ArrayView1<F>, w: ArrayView2<F>, b: ArrayView1<F>) -> Array1<F> {
    w.dot(&x) + &b
}

fn lin1d_backward<F: Scalar>(
    x: ArrayView1<F>,
    w: ArrayView2<F>,
    dy: ArrayView1<F>,
    dw: &mut Array2<F>,
    db: &mut Array1<F>,
) -> Array1<F> {
    for o in 0..dy.len() {
        db[o] += dy[o];
        for i in 0..x.len() {
            dw[[o, i]] += dy[o] * x[i];
        }
    }
    w.t().dot(&dy)
}

pub(crate) fn project_forward<F: Scalar>(
    params: &ModelParams<F>,
    v: ArrayView1<F>,
) -> Result<ProjectionTrace<F>> {
    if v.len() != params.con1.w.ncols() {
        return Err(Error::Shape(format!(
            "projection input has dim {}, head expects {}",
            v.len(),
            params.con1.w.ncols()
        )));
    }
    let pre1 = lin1d_forward(v, params.con1.w.view(), params.con1.b.view());
    let act = gelu(&pre1);
    let pre2 = lin1d_forward(act.view(), params.con2.w.view(), params.con2.b.view());
    let (z, norm) = l2_normalize(pre2.view());
    Ok(ProjectionTrace {
        input: v.to_owned(),
        pre1,
        act,
        z,
        norm,
    })
}

pub(crate) fn project_backward<F: Scalar>(
    params: &ModelParams<F>,
    trace: &ProjectionTrace<F>,
    dz: ArrayView1<F>,
    grads: &mut ModelParams<F>,
) -> Array1<F> {
    let dpre2 = l2_normalize_backward(trace.z.view(), trace.norm, dz);
    let dact = lin1d_backward(
        trace.act.view(),
        params.con2.w.view(),
        dpre2.view(),
        &mut grads.con2.w,
        &mut grads.con2.b,
    );
    let dpre1 = gelu_backward(&trace.pre1, &dact);
    lin1d_backward(
        trace.input.view(),
        params.con1.w.view(),
        dpre1.view(),
        &mut grads.con1.w,
        &mut grads.con1.b,
    )
}

/// Two-layer MLP + L2 normalization; the public (eval) entry point.
pub fn contrastive_project<F: Scalar>(
    params: &ModelParams<F>,
    v: ArrayView1<F>,
) -> Result<Array1<F>> {
    Ok(project_forward(params, v)?.z)
}

fn check_contrastive_batches<F: Scalar>(z_eeg: &ArrayView2<F>, z_text: &ArrayView2<F>) -> Result<()> {
    if z_eeg.dim() != z_text.dim() {
        return Err(Error::Shape(format!(
            "batch shapes differ: {:?} vs {:?}",
            z_eeg.dim(),
            z_text.dim()
        )));
    }
    if z_eeg.nrows() < 2 {
        return Err(Error::Config(format!(
            "contrastive batch size {} must be at least 2",
            z_eeg.nrows()
        )));
    }
    for (name, m) in [("z_eeg", z_eeg), ("z_text", z_text)] {
        for (i, row) in m.rows().into_iter().enumerate() {
            let n: f64 = row.iter().map(|v| v.to_f64() * v.to_f64()).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-3 {
                return Err(Error::Value(format!(
                    "{name} row {i} has norm {n}, expected unit norm"
                )));
            }
        }
    }
    Ok(())
}

/// Symmetric InfoNCE over cosine similarities (rows are unit vectors).
pub fn contrastive_loss<F: Scalar>(
    z_eeg: ArrayView2<F>,
    z_text: ArrayView2<F>,
    temperature: f64,
) -> Result<F> {
    Ok(contrastive_loss_grad(z_eeg, z_text, temperature)?.0)
}

/// Returns (loss, dZ_eeg, dZ_text).
pub fn contrastive_loss_grad<F: Scalar>(
    z_eeg: ArrayView2<F>,
    z_text: ArrayView2<F>,
    temperature: f64,
) -> Result<(F, Array2<F>, Array2<F>)> {
    check_contrastive_batches(&z_eeg, &z_text)?;
    let b = z_eeg.nrows();
    let tau = F::from_f64(temperature);
    let mut sim = z_eeg.dot(&z_text.t());
    sim.mapv_inplace(|x| x / tau);

    let p_rows = softmax_rows(sim.view());
    let p_cols = softmax_rows(sim.t());
    let bf = F::from_f64(b as f64);
    let half = F::from_f64(0.5);

    let mut loss = F::zero();
    for i in 0..b {
        loss -= p_rows[[i, i]].ln() + p_cols[[i, i]].ln();
    }
    loss = loss * half / bf;

    // dL/dS = 0.5/B * [(P_rows − I) + (P_cols − I)ᵀ]
    let mut dsim = Array2::<F>::zeros((b, b));
    for i in 0..b {
        for j in 0..b {
            let idm = if i == j { F::one() } else { F::zero() };
            dsim[[i, j]] = half / bf * ((p_rows[[i, j]] - idm) + (p_cols[[j, i]] - idm));
        }
    }
    dsim.mapv_inplace(|x| x / tau);
    let dz_eeg = dsim.dot(&z_text);
    let dz_text = dsim.t().dot(&z_eeg);
    Ok((loss, dz_eeg, dz_text))
}

// ---------------------------------------------------------------------------
// Public forward ops and training traces
// ---------------------------------------------------------------------------

/// Convolutional front end + transformer encoder (no dropout; evaluation).
pub fn encode_eeg<F: Scalar>(
    params: &ModelParams<F>,
    cfg: &ModelConfig,
    eeg: ArrayView3<F>,
    src_mask: &[bool],
) -> Result<EncodedSequence<F>> {
    let trace = encoder_forward(params, cfg, eeg, src_mask, &mut None)?;
    Ok(EncodedSequence {
        h: trace.h,
        src_mask: src_mask.to_vec(),
    })
}

/// Causal decoder over shifted targets with cross-attention on H
/// (no dropout; evaluation). Returns pre-softmax logits `[L, vocab]`.
pub fn decoder_forward<F: Scalar>(
    params: &ModelParams<F>,
    cfg: &ModelConfig,
    enc: &EncodedSequence<F>,
    ids: &[usize],
) -> Result<Array2<F>> {
    if !enc.src_mask.iter().any(|&m| m) {
        return Err(Error::Mask("encoded sequence has no valid positions".into()));
    }
    let (logits, _) = decoder_stack_forward(params, cfg, &enc.h, &enc.src_mask, ids, &mut None)?;
    Ok(logits)
}

/// Ablation head: per-position classification directly off the encoder.
pub fn encoder_only_forward<F: Scalar>(
    params: &ModelParams<F>,
    cfg: &ModelConfig,
    eeg: ArrayView3<F>,
    src_mask: &[bool],
) -> Result<Array2<F>> {
    let trace = encoder_forward(params, cfg, eeg, src_mask, &mut None)?;
    Ok(linear_forward(
        trace.h.view(),
        params.cls.w.view(),
        params.cls.b.view(),
    ))
}

/// Mean of H rows at valid positions.
pub fn masked_mean_pool<F: Scalar>(h: ArrayView2<F>, mask: &[bool]) -> Result<Array1<F>> {
    let n_valid = mask.iter().filter(|&&m| m).count();
    if n_valid == 0 {
        return Err(Error::Mask("cannot pool a fully masked sequence".into()));
    }
    let mut pooled = Array1::<F>::zeros(h.ncols());
    for (i, &m) in mask.iter().enumerate() {
        if m {
            pooled += &h.row(i);
        }
    }
    let inv = F::from_f64(1.0 / n_valid as f64);
    pooled.mapv_inplace(|x| x * inv);
    Ok(pooled)
}

/// Full training trace of one sample through encoder + decoder
/// (+ optional contrastive EEG projection).
pub struct Seq2SeqTrace<F> {
    enc: EncoderTrace<F>,
    dec: DecoderTrace<F>,
    pub logits: Array2<F>,
    proj: Option<ProjectionTrace<F>>,
    src_mask: Vec<bool>,
}

impl<F: Scalar> Seq2SeqTrace<F> {
    pub fn h(&self) -> &Array2<F> {
        &self.enc.h
    }
    pub fn z_eeg(&self) -> Option<&Array1<F>> {
        self.proj.as_ref().map(|p| &p.z)
    }
}

pub fn seq2seq_forward<F: Scalar>(
    params: &ModelParams<F>,
    cfg: &ModelConfig,
    eeg: ArrayView3<F>,
    src_mask: &[bool],
    dec_input: &[usize],
    with_contrastive: bool,
    drop: &mut Option<Dropout<'_>>,
) -> Result<Seq2SeqTrace<F>> {
    let enc = encoder_forward(params, cfg, eeg, src_mask, drop)?;
    let (logits, dec) = decoder_stack_forward(params, cfg, &enc.h, src_mask, dec_input, drop)?;
    let proj = if with_contrastive {
        let pooled = masked_mean_pool(enc.h.view(), src_mask)?;
        Some(project_forward(params, pooled.view())?)
    } else {
        None
    };
    Ok(Seq2SeqTrace {
        enc,
        dec,
        logits,
        proj,
        src_mask: src_mask.to_vec(),
    })
}

/// Backward through decoder, optional contrastive branch, and encoder.
/// `dz_eeg` is the loss gradient w.r.t. this sample's projected EEG vector.
/// Returns d(eeg).
pub fn seq2seq_backward<F: Scalar>(
    params: &ModelParams<F>,
    cfg: &ModelConfig,
    trace: &Seq2SeqTrace<F>,
    dlogits: ArrayView2<F>,
    dz_eeg: Option<ArrayView1<F>>,
    grads: &mut ModelParams<F>,
) -> Result<Array3<F>> {
    let mut dh = decoder_stack_backward(params, cfg, &trace.dec, dlogits, grads);
    if let Some(dz) = dz_eeg {
        let proj = trace
            .proj
            .as_ref()
            .ok_or_else(|| Error::Value("dz_eeg supplied but trace has no projection".into()))?;
        let dpooled = project_backward(params, proj, dz, grads);
        let n_valid = trace.src_mask.iter().filter(|&&m| m).count();
        let inv = F::from_f64(1.0 / n_valid as f64);
        for (i, &m) in trace.src_mask.iter().enumerate() {
            if m {
                for j in 0..dh.ncols() {
                    dh[[i, j]] += dpooled[j] * inv;
                }
            }
        }
    }
    Ok(encoder_backward_impl(params, cfg, &trace.enc, dh, grads))
}

/// Training trace for the encoder-only ablation model.
pub struct AblationTrace<F> {
    enc: EncoderTrace<F>,
    pub logits: Array2<F>,
}

impl<F: Scalar> AblationTrace<F> {
    pub fn h(&self) -> &Array2<F> {
        &self.enc.h
    }
}

pub fn ablation_forward<F: Scalar>(
    params: &ModelParams<F>,
    cfg: &ModelConfig,
    eeg: ArrayView3<F>,
    src_mask: &[bool],
    drop: &mut Option<Dropout<'_>>,
) -> Result<AblationTrace<F>> {
    let enc = encoder_forward(params, cfg, eeg, src_mask, drop)?;
    let logits = linear_forward(enc.h.view(), params.cls.w.view(), params.cls.b.view());
    Ok(AblationTrace { enc, logits })
}

pub fn ablation_backward<F: Scalar>(
    params: &ModelParams<F>,
    cfg: &ModelConfig,
    trace: &AblationTrace<F>,
    dlogits: ArrayView2<F>,
    grads: &mut ModelParams<F>,
) -> Array3<F> {
    let dh = linear_backward(
        trace.enc.h.view(),
        params.cls.w.view(),
        dlogits,
        &mut grads.cls.w,
        &mut grads.cls.b,
    );
    encoder_backward_impl(params, cfg, &trace.enc, dh, grads)
}

fn encoder_backward_impl<F: Scalar>(
    params: &ModelParams<F>,
    cfg: &ModelConfig,
    trace: &EncoderTrace<F>,
    dh: Array2<F>,
    grads: &mut ModelParams<F>,
) -> Array3<F> {
    let mut dx = dh;
    for i in (0..params.enc.len()).rev() {
        dx = enc_layer_backward(
            &params.enc[i],
            cfg.n_heads,
            &trace.layers[i],
            dx.view(),
            &mut grads.enc[i],
        );
    }
    // Positional encoding add is a passthrough.
    let dfeat = linear_backward(
        trace.feat.view(),
        params.proj.w.view(),
        dx.view(),
        &mut grads.proj.w,
        &mut grads.proj.b,
    );
    let (t_len, comps) = (cfg.segment_time, cfg.segment_components);
    let mut deeg = Array3::<F>::zeros((cfg.max_len_eeg, t_len, comps));
    for i in 0..cfg.max_len_eeg {
        let dact = Array2::from_shape_fn((cfg.conv_out_channels, t_len), |(o, t)| {
            dfeat[[i, o * t_len + t]]
        });
        let dpre = gelu_backward(&trace.conv_pre[i], &dact);
        let dxin = conv1d_backward(
            trace.conv_in[i].view(),
            params.conv_w.view(),
            dpre.view(),
            &mut grads.conv_w,
            &mut grads.conv_b,
        );
        // [comps, time] → [time, comps]
        deeg.index_axis_mut(Axis(0), i).assign(&dxin.t());
    }
    deeg
}
