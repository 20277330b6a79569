//! Model configuration and the full parameter tree, with canonical named
//! traversal used by the optimizer, checkpoints, and gradient checks.

use ndarray::{Array1, Array2, Array3, ArrayViewD, ArrayViewMutD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scalar::Scalar;
use crate::error::{Error, Result};

/// Architecture hyperparameters. Desk-scale defaults; every field is a
/// config knob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub conv_out_channels: usize,
    pub conv_kernel: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    /// Set from the vocabulary at train time.
    pub vocab_size: usize,
    pub max_len_eeg: usize,
    pub max_len_text: usize,
    pub segment_time: usize,
    pub segment_components: usize,
    /// Contrastive softmax temperature.
    pub temperature: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            conv_out_channels: 64,
            conv_kernel: 3,
            n_encoder_layers: 4,
            n_decoder_layers: 4,
            n_heads: 8,
            ffn_dim: 256,
            dropout: 0.1,
            vocab_size: 0,
            max_len_eeg: 10,
            max_len_text: 12,
            segment_time: 90,
            segment_components: 8,
            temperature: 0.07,
            seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.d_model == 0
            || self.conv_out_channels == 0
            || self.conv_kernel == 0
            || self.n_encoder_layers == 0
            || self.n_decoder_layers == 0
            || self.n_heads == 0
            || self.ffn_dim == 0
            || self.max_len_eeg == 0
            || self.max_len_text == 0
            || self.segment_time == 0
            || self.segment_components == 0
        {
            return bad("all model dimensions must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.vocab_size < 5 {
            return bad(format!(
                "vocab_size {} too small (4 specials + at least 1 character)",
                self.vocab_size
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0,1)", self.dropout));
        }
        if self.temperature <= 0.0 {
            return bad(format!("temperature {} must be positive", self.temperature));
        }
        Ok(())
    }

    /// Flattened per-character feature size after the convolution.
    pub fn conv_flat_dim(&self) -> usize {
        self.conv_out_channels * self.segment_time
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F> {
    /// `[out, in]`
    pub w: Array2<F>,
    pub b: Array1<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<F> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention<F> {
    pub wq: Linear<F>,
    pub wk: Linear<F>,
    pub wv: Linear<F>,
    pub wo: Linear<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer<F> {
    pub attn: Attention<F>,
    pub ln1: LayerNorm<F>,
    pub ffn1: Linear<F>,
    pub ffn2: Linear<F>,
    pub ln2: LayerNorm<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer<F> {
    pub self_attn: Attention<F>,
    pub ln1: LayerNorm<F>,
    pub cross_attn: Attention<F>,
    pub ln2: LayerNorm<F>,
    pub ffn1: Linear<F>,
    pub ffn2: Linear<F>,
    pub ln3: LayerNorm<F>,
}

/// Every learnable array in the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    /// `[out_ch, in_ch, kernel]`
    pub conv_w: Array3<F>,
    pub conv_b: Array1<F>,
    /// Flattened conv features → d_model.
    pub proj: Linear<F>,
    pub enc: Vec<EncoderLayer<F>>,
    /// `[vocab, d_model]`
    pub tok_emb: Array2<F>,
    pub dec: Vec<DecoderLayer<F>>,
    /// Output projection W_o `[vocab, d_model]`.
    pub out: Linear<F>,
    /// Ablation classifier W_c `[vocab, d_model]`.
    pub cls: Linear<F>,
    /// Contrastive head, two affine layers.
    pub con1: Linear<F>,
    pub con2: Linear<F>,
}

fn xavier_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn draw2<F: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, limit: f64) -> Array2<F> {
    Array2::from_shape_fn((rows, cols), |_| {
        F::from_f64(rng.random_range(-limit..limit))
    })
}

fn init_linear<F: Scalar>(rng: &mut ChaCha8Rng, out: usize, inp: usize) -> Linear<F> {
    Linear {
        w: draw2(rng, out, inp, xavier_limit(inp, out)),
        b: Array1::zeros(out),
    }
}

fn init_layernorm<F: Scalar>(d: usize) -> LayerNorm<F> {
    LayerNorm {
        gamma: Array1::from_elem(d, F::one()),
        beta: Array1::zeros(d),
    }
}

fn init_attention<F: Scalar>(rng: &mut ChaCha8Rng, d: usize) -> Attention<F> {
    Attention {
        wq: init_linear(rng, d, d),
        wk: init_linear(rng, d, d),
        wv: init_linear(rng, d, d),
        wo: init_linear(rng, d, d),
    }
}

fn init_encoder_layer<F: Scalar>(rng: &mut ChaCha8Rng, d: usize, ffn: usize) -> EncoderLayer<F> {
    EncoderLayer {
        attn: init_attention(rng, d),
        ln1: init_layernorm(d),
        ffn1: init_linear(rng, ffn, d),
        ffn2: init_linear(rng, d, ffn),
        ln2: init_layernorm(d),
    }
}

fn init_decoder_layer<F: Scalar>(rng: &mut ChaCha8Rng, d: usize, ffn: usize) -> DecoderLayer<F> {
    DecoderLayer {
        self_attn: init_attention(rng, d),
        ln1: init_layernorm(d),
        cross_attn: init_attention(rng, d),
        ln2: init_layernorm(d),
        ffn1: init_linear(rng, ffn, d),
        ffn2: init_linear(rng, d, ffn),
        ln3: init_layernorm(d),
    }
}

/// Deterministic initialization from `cfg.seed`: Xavier-uniform weight
/// matrices, zero biases, unit layer-norm gains, embeddings uniform in
/// ±d_model^{-1/2}.
pub fn init_params<F: Scalar>(cfg: &ModelConfig) -> Result<ModelParams<F>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.d_model;
    let (o, c, k) = (
        cfg.conv_out_channels,
        cfg.segment_components,
        cfg.conv_kernel,
    );
    let conv_limit = xavier_limit(c * k, o * k);
    let conv_w = Array3::from_shape_fn((o, c, k), |_| {
        F::from_f64(rng.random_range(-conv_limit..conv_limit))
    });
    let conv_b = Array1::zeros(o);
    let proj = init_linear(&mut rng, d, cfg.conv_flat_dim());
    let enc = (0..cfg.n_encoder_layers)
        .map(|_| init_encoder_layer(&mut rng, d, cfg.ffn_dim))
        .collect();
    let emb_limit = 1.0 / (d as f64).sqrt();
    let tok_emb = draw2(&mut rng, cfg.vocab_size, d, emb_limit);
    let dec = (0..cfg.n_decoder_layers)
        .map(|_| init_decoder_layer(&mut rng, d, cfg.ffn_dim))
        .collect();
    let out = init_linear(&mut rng, cfg.vocab_size, d);
    let cls = init_linear(&mut rng, cfg.vocab_size, d);
    let con1 = init_linear(&mut rng, d, d);
    let con2 = init_linear(&mut rng, d, d);
    Ok(ModelParams {
        conv_w,
        conv_b,
        proj,
        enc,
        tok_emb,
        dec,
        out,
        cls,
        con1,
        con2,
    })
}

type Named<'a, F> = (String, ArrayViewD<'a, F>);
type NamedMut<'a, F> = (String, ArrayViewMutD<'a, F>);

impl<F: Scalar> Linear<F> {
    fn named(&self, p: &str) -> Vec<Named<'_, F>> {
        vec![
            (format!("{p}.w"), self.w.view().into_dyn()),
            (format!("{p}.b"), self.b.view().into_dyn()),
        ]
    }
    fn named_mut(&mut self, p: &str) -> Vec<NamedMut<'_, F>> {
        vec![
            (format!("{p}.w"), self.w.view_mut().into_dyn()),
            (format!("{p}.b"), self.b.view_mut().into_dyn()),
        ]
    }
    fn map<T: Scalar>(&self, f: impl Fn(F) -> T + Copy) -> Linear<T> {
        Linear {
            w: self.w.mapv(f),
            b: self.b.mapv(f),
        }
    }
}

impl<F: Scalar> LayerNorm<F> {
    fn named(&self, p: &str) -> Vec<Named<'_, F>> {
        vec![
            (format!("{p}.gamma"), self.gamma.view().into_dyn()),
            (format!("{p}.beta"), self.beta.view().into_dyn()),
        ]
    }
    fn named_mut(&mut self, p: &str) -> Vec<NamedMut<'_, F>> {
        vec![
            (format!("{p}.gamma"), self.gamma.view_mut().into_dyn()),
            (format!("{p}.beta"), self.beta.view_mut().into_dyn()),
        ]
    }
    fn map<T: Scalar>(&self, f: impl Fn(F) -> T + Copy) -> LayerNorm<T> {
        LayerNorm {
            gamma: self.gamma.mapv(f),
            beta: self.beta.mapv(f),
        }
    }
}

impl<F: Scalar> Attention<F> {
    fn named(&self, p: &str) -> Vec<Named<'_, F>> {
        let mut v = self.wq.named(&format!("{p}.wq"));
        v.extend(self.wk.named(&format!("{p}.wk")));
        v.extend(self.wv.named(&format!("{p}.wv")));
        v.extend(self.wo.named(&format!("{p}.wo")));
        v
    }
    fn named_mut(&mut self, p: &str) -> Vec<NamedMut<'_, F>> {
        let mut v = self.wq.named_mut(&format!("{p}.wq"));
        v.extend(self.wk.named_mut(&format!("{p}.wk")));
        v.extend(self.wv.named_mut(&format!("{p}.wv")));
        v.extend(self.wo.named_mut(&format!("{p}.wo")));
        v
    }
    fn map<T: Scalar>(&self, f: impl Fn(F) -> T + Copy) -> Attention<T> {
        Attention {
            wq: self.wq.map(f),
            wk: self.wk.map(f),
            wv: self.wv.map(f),
            wo: self.wo.map(f),
        }
    }
}

impl<F: Scalar> EncoderLayer<F> {
    fn named(&self, p: &str) -> Vec<Named<'_, F>> {
        let mut v = self.attn.named(&format!("{p}.attn"));
        v.extend(self.ln1.named(&format!("{p}.ln1")));
        v.extend(self.ffn1.named(&format!("{p}.ffn1")));
        v.extend(self.ffn2.named(&format!("{p}.ffn2")));
        v.extend(self.ln2.named(&format!("{p}.ln2")));
        v
    }
    fn named_mut(&mut self, p: &str) -> Vec<NamedMut<'_, F>> {
        let mut v = self.attn.named_mut(&format!("{p}.attn"));
        v.extend(self.ln1.named_mut(&format!("{p}.ln1")));
        v.extend(self.ffn1.named_mut(&format!("{p}.ffn1")));
        v.extend(self.ffn2.named_mut(&format!("{p}.ffn2")));
        v.extend(self.ln2.named_mut(&format!("{p}.ln2")));
        v
    }
    fn map<T: Scalar>(&self, f: impl Fn(F) -> T + Copy) -> EncoderLayer<T> {
        EncoderLayer {
            attn: self.attn.map(f),
            ln1: self.ln1.map(f),
            ffn1: self.ffn1.map(f),
            ffn2: self.ffn2.map(f),
            ln2: self.ln2.map(f),
        }
    }
}

impl<F: Scalar> DecoderLayer<F> {
    fn named(&self, p: &str) -> Vec<Named<'_, F>> {
        let mut v = self.self_attn.named(&format!("{p}.self_attn"));
        v.extend(self.ln1.named(&format!("{p}.ln1")));
        v.extend(self.cross_attn.named(&format!("{p}.cross_attn")));
        v.extend(self.ln2.named(&format!("{p}.ln2")));
        v.extend(self.ffn1.named(&format!("{p}.ffn1")));
        v.extend(self.ffn2.named(&format!("{p}.ffn2")));
        v.extend(self.ln3.named(&format!("{p}.ln3")));
        v
    }
    fn named_mut(&mut self, p: &str) -> Vec<NamedMut<'_, F>> {
        let mut v = self.self_attn.named_mut(&format!("{p}.self_attn"));
        v.extend(self.ln1.named_mut(&format!("{p}.ln1")));
        v.extend(self.cross_attn.named_mut(&format!("{p}.cross_attn")));
        v.extend(self.ln2.named_mut(&format!("{p}.ln2")));
        v.extend(self.ffn1.named_mut(&format!("{p}.ffn1")));
        v.extend(self.ffn2.named_mut(&format!("{p}.ffn2")));
        v.extend(self.ln3.named_mut(&format!("{p}.ln3")));
        v
    }
    fn map<T: Scalar>(&self, f: impl Fn(F) -> T + Copy) -> DecoderLayer<T> {
        DecoderLayer {
            self_attn: self.self_attn.map(f),
            ln1: self.ln1.map(f),
            cross_attn: self.cross_attn.map(f),
            ln2: self.ln2.map(f),
            ffn1: self.ffn1.map(f),
            ffn2: self.ffn2.map(f),
            ln3: self.ln3.map(f),
        }
    }
}

impl<F: Scalar> ModelParams<F> {
    /// All tensors in a fixed canonical order (also the init draw order).
    pub fn named_tensors(&self) -> Vec<Named<'_, F>> {
        let mut v: Vec<Named<'_, F>> = vec![
            ("conv.w".into(), self.conv_w.view().into_dyn()),
            ("conv.b".into(), self.conv_b.view().into_dyn()),
        ];
        v.extend(self.proj.named("proj"));
        for (i, l) in self.enc.iter().enumerate() {
            v.extend(l.named(&format!("enc.{i}")));
        }
        v.push(("tok_emb".into(), self.tok_emb.view().into_dyn()));
        for (i, l) in self.dec.iter().enumerate() {
            v.extend(l.named(&format!("dec.{i}")));
        }
        v.extend(self.out.named("out"));
        v.extend(self.cls.named("cls"));
        v.extend(self.con1.named("con1"));
        v.extend(self.con2.named("con2"));
        v
    }

    pub fn named_tensors_mut(&mut self) -> Vec<NamedMut<'_, F>> {
        let mut v: Vec<NamedMut<'_, F>> = vec![
            ("conv.w".into(), self.conv_w.view_mut().into_dyn()),
            ("conv.b".into(), self.conv_b.view_mut().into_dyn()),
        ];
        v.extend(self.proj.named_mut("proj"));
        for (i, l) in self.enc.iter_mut().enumerate() {
            v.extend(l.named_mut(&format!("enc.{i}")));
        }
        v.push(("tok_emb".into(), self.tok_emb.view_mut().into_dyn()));
        for (i, l) in self.dec.iter_mut().enumerate() {
            v.extend(l.named_mut(&format!("dec.{i}")));
        }
        v.extend(self.out.named_mut("out"));
        v.extend(self.cls.named_mut("cls"));
        v.extend(self.con1.named_mut("con1"));
        v.extend(self.con2.named_mut("con2"));
        v
    }

    pub fn map_scalar<T: Scalar>(&self, f: impl Fn(F) -> T + Copy) -> ModelParams<T> {
        ModelParams {
            conv_w: self.conv_w.mapv(f),
            conv_b: self.conv_b.mapv(f),
            proj: self.proj.map(f),
            enc: self.enc.iter().map(|l| l.map(f)).collect(),
            tok_emb: self.tok_emb.mapv(f),
            dec: self.dec.iter().map(|l| l.map(f)).collect(),
            out: self.out.map(f),
            cls: self.cls.map(f),
            con1: self.con1.map(f),
            con2: self.con2.map(f),
        }
    }

    /// Lossless when going f32 → f64; rounds when going the other way.
    pub fn cast<T: Scalar>(&self) -> ModelParams<T> {
        self.map_scalar(|v| T::from_f64(v.to_f64()))
    }

    pub fn zeros_like(&self) -> Self {
        self.map_scalar(|_| F::zero())
    }

    pub fn fill_zero(&mut self) {
        for (_, mut t) in self.named_tensors_mut() {
            t.fill(F::zero());
        }
    }

    /// self += alpha * other, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Self, alpha: F) {
        let theirs = other.named_tensors();
        for ((_, mut a), (_, b)) in self.named_tensors_mut().into_iter().zip(theirs) {
            a.zip_mut_with(&b, |x, &y| *x += alpha * y);
        }
    }

    pub fn n_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Errors with the offending tensor name if any entry is NaN/Inf.
    pub fn assert_finite(&self) -> Result<()> {
        for (name, t) in self.named_tensors() {
            if !t.iter().all(|v| v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "parameter tensor `{name}` contains non-finite values"
                )));
            }
        }
        Ok(())
    }
}
