//! Teacher-forced optimization: masked cross-entropy with mean reduction,
//! adaptive-moment updates with global-norm clipping, greedy decoding,
//! per-epoch validation, best-checkpoint tracking, and a JSONL history.
//!
//! Determinism contract: with a fixed seed the shuffle order, per-sample
//! dropout streams, and gradient reduction order are all independent of
//! thread count, so single- and multi-threaded runs produce identical
//! histories and checkpoints.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array1, Array2, Array3, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bleu::{corpus_report, BleuOptions};
use crate::checkpoint::save_checkpoint;
use crate::error::{Error, Result};
use crate::exec;
use crate::model::net::{project_backward, project_forward, ProjectionTrace};
use crate::model::{
    ablation_backward, ablation_forward, contrastive_loss_grad, decoder_forward, encode_eeg,
    init_params, seq2seq_backward, seq2seq_forward, Dropout, EncodedSequence, ModelConfig,
    ModelParams, Scalar, Seq2SeqTrace,
};
use crate::preprocess::PaddedSample;
use crate::textcodec::{strip_punctuation, Vocab, BOS_ID, EOS_ID, PAD_ID};

// ---------------------------------------------------------------------------
// Configuration and history
// ---------------------------------------------------------------------------

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Maximum global gradient norm before the update.
    pub grad_clip: f64,
    pub seed: u64,
    /// Weight of the auxiliary contrastive objective; 0 disables it.
    pub contrastive_weight: f64,
    pub checkpoint_dir: PathBuf,
    /// Validation BLEU is computed every `eval_every` epochs (and always on
    /// the final epoch). Validation loss is computed every epoch.
    pub eval_every: usize,
    pub parallel: bool,
    /// When false, `wall_time_s` is recorded as 0 so that history files are
    /// byte-comparable across runs (the only nondeterministic field).
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            grad_clip: 1.0,
            seed: 7,
            contrastive_weight: 0.0,
            checkpoint_dir: PathBuf::from("checkpoints"),
            eval_every: 1,
            parallel: true,
            record_wall_time: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        if self.contrastive_weight < 0.0 {
            return Err(Error::Config("contrastive_weight must be nonnegative".into()));
        }
        if self.eval_every < 1 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// One history line; serialized as a JSONL record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_bleu1: Option<f64>,
    pub val_bleu2: Option<f64>,
    pub val_bleu3: Option<f64>,
    pub val_bleu4: Option<f64>,
    /// Wall-clock seconds; the only nondeterministic field.
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    /// Epoch (1-based) with the highest validation BLEU-1; earlier epoch on
    /// ties. `None` when no epoch recorded a BLEU score.
    pub fn best_epoch(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for r in &self.records {
            if let Some(b1) = r.val_bleu1 {
                if best.is_none_or(|(_, bb)| b1 > bb) {
                    best = Some((r.epoch, b1));
                }
            }
        }
        best.map(|(e, _)| e)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: EpochRecord = serde_json::from_str(line).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })?;
            records.push(r);
        }
        Ok(Self { records })
    }
}

/// Which head the loop optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Full encoder–decoder with teacher forcing (the main model).
    Seq2Seq,
    /// Encoder + shared per-position linear classifier; target-independent.
    EncoderOnly,
}

/// One split's samples with their reference texts and subjects, index-aligned.
#[derive(Debug, Clone, Default)]
pub struct SampleSet {
    pub samples: Vec<PaddedSample>,
    pub texts: Vec<String>,
    pub subjects: Vec<String>,
}

impl SampleSet {
    fn validate(&self, name: &str) -> Result<()> {
        if self.samples.len() != self.texts.len() || self.samples.len() != self.subjects.len() {
            return Err(Error::Data(format!(
                "{name} set misaligned: {} samples, {} texts, {} subjects",
                self.samples.len(),
                self.texts.len(),
                self.subjects.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct Datasets {
    pub train: SampleSet,
    pub val: SampleSet,
    /// Held-out subjects; asserted absent from every training batch.
    pub test_subjects: Vec<String>,
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Mean of −log softmax(logits)[t, target_ids[t]] over mask-true positions.
/// Ids at mask-false positions are never read, so changing them cannot
/// change the loss even in the last bit.
pub fn cross_entropy_masked<F: Scalar>(
    logits: ArrayView2<F>,
    target_ids: &[usize],
    tgt_mask: &[bool],
) -> Result<F> {
    Ok(cross_entropy_masked_grad(logits, target_ids, tgt_mask)?.0)
}

/// Returns (loss, dlogits). Gradient rows at mask-false positions are
/// exactly zero.
pub fn cross_entropy_masked_grad<F: Scalar>(
    logits: ArrayView2<F>,
    target_ids: &[usize],
    tgt_mask: &[bool],
) -> Result<(F, Array2<F>)> {
    let (l, v) = logits.dim();
    if target_ids.len() != l || tgt_mask.len() != l {
        return Err(Error::Shape(format!(
            "logits have {l} rows but got {} target ids and {} mask flags",
            target_ids.len(),
            tgt_mask.len()
        )));
    }
    let n_valid = tgt_mask.iter().filter(|&&m| m).count();
    if n_valid == 0 {
        return Err(Error::Mask("loss mask has no valid positions".into()));
    }
    for (t, (&id, &m)) in target_ids.iter().zip(tgt_mask).enumerate() {
        if m && id >= v {
            return Err(Error::Range(format!(
                "target id {id} at position {t} out of range for vocab {v}"
            )));
        }
    }

    let inv = F::from_f64(1.0 / n_valid as f64);
    let mut loss = F::zero();
    let mut dlogits = Array2::<F>::zeros((l, v));
    for t in 0..l {
        if !tgt_mask[t] {
            continue;
        }
        // Stable log-sum-exp.
        let row = logits.row(t);
        let mut maxv = F::neg_infinity();
        for &x in row {
            maxv = maxv.maximum(x);
        }
        let mut sum = F::zero();
        for &x in row {
            sum += (x - maxv).exp();
        }
        let lse = maxv + sum.ln();
        loss += (lse - row[target_ids[t]]) * inv;
        for j in 0..v {
            let p = (row[j] - maxv).exp() / sum;
            let hit = if j == target_ids[t] { F::one() } else { F::zero() };
            dlogits[[t, j]] = (p - hit) * inv;
        }
    }
    Ok((loss, dlogits))
}

/// Decoder input / labels / label mask views for teacher forcing: input is
/// `target_ids[..L−1]`, the label at position t is `target_ids[t+1]`.
pub fn teacher_forcing(sample: &PaddedSample) -> (&[usize], &[usize], &[bool]) {
    let l = sample.target_ids.len();
    (
        &sample.target_ids[..l - 1],
        &sample.target_ids[1..],
        &sample.tgt_mask[1..],
    )
}

/// Per-position labels for the encoder-only head: the i-th displayed
/// (punctuation-free) character for i < n_chars, PAD elsewhere; the mask is
/// true exactly on the first n_chars positions.
pub fn ablation_labels(
    vocab: &Vocab,
    text: &str,
    n_chars: usize,
    max_len_eeg: usize,
) -> Result<(Vec<usize>, Vec<bool>)> {
    let shown = strip_punctuation(text);
    let chars: Vec<char> = shown.chars().collect();
    if chars.len() < n_chars {
        return Err(Error::Length(format!(
            "text has {} displayed characters but {n_chars} EEG segments",
            chars.len()
        )));
    }
    let mut ids = vec![PAD_ID; max_len_eeg];
    let mut mask = vec![false; max_len_eeg];
    for i in 0..n_chars {
        ids[i] = vocab.id_of(chars[i]);
        mask[i] = true;
    }
    Ok((ids, mask))
}

// ---------------------------------------------------------------------------
// Batch engine
// ---------------------------------------------------------------------------

/// Loss terms of one batch.
#[derive(Debug, Clone, Copy)]
pub struct BatchTerms<F> {
    pub total: F,
    pub ce: F,
    pub contrastive: Option<F>,
}

fn eeg_as<F: Scalar>(s: &PaddedSample) -> Array3<F> {
    s.eeg.mapv(|v| F::from_f64(f64::from(v)))
}

fn split_seeds(p: f64, seeds: Option<&[u64]>, i: usize) -> Option<(f64, u64)> {
    seeds.map(|s| (p, s[i]))
}

struct SeqStep<F> {
    trace: Seq2SeqTrace<F>,
    ce: F,
    dlogits: Array2<F>,
}

/// Forward (and optionally backward) pass over one batch of the full
/// encoder–decoder model. `text_embs` must be supplied when
/// `contrastive_weight > 0`; the contrastive term is skipped for batches of
/// one sample (InfoNCE needs at least two pairs). When `grads` is given,
/// per-sample gradients are computed in parallel and reduced sequentially in
/// sample order, keeping the result independent of thread count.
#[allow(clippy::too_many_arguments)]
pub fn seq2seq_batch<F: Scalar>(
    params: &ModelParams<F>,
    mcfg: &ModelConfig,
    samples: &[&PaddedSample],
    text_embs: Option<&[Array1<F>]>,
    contrastive_weight: f64,
    dropout_p: f64,
    dropout_seeds: Option<&[u64]>,
    parallel: bool,
    grads: Option<&mut ModelParams<F>>,
) -> Result<BatchTerms<F>> {
    let b = samples.len();
    if b == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    if let Some(seeds) = dropout_seeds {
        if seeds.len() != b {
            return Err(Error::Shape(format!(
                "{} dropout seeds for {b} samples",
                seeds.len()
            )));
        }
    }
    let with_contrastive = contrastive_weight > 0.0 && b >= 2;
    if with_contrastive {
        match text_embs {
            None => {
                return Err(Error::Config(
                    "contrastive_weight > 0 requires text embeddings".into(),
                ))
            }
            Some(e) if e.len() != b => {
                return Err(Error::Shape(format!(
                    "{} text embeddings for {b} samples",
                    e.len()
                )));
            }
            _ => {}
        }
    }

    let inv_b = F::from_f64(1.0 / b as f64);
    let steps: Vec<SeqStep<F>> = exec::map_indexed(parallel, samples, |i, s| -> Result<_> {
        let eeg = eeg_as::<F>(s);
        let (dec_input, labels, label_mask) = teacher_forcing(s);
        let mut rng;
        let mut drop = match split_seeds(dropout_p, dropout_seeds, i) {
            Some((p, seed)) if p > 0.0 => {
                rng = ChaCha8Rng::seed_from_u64(seed);
                Some(Dropout { p, rng: &mut rng })
            }
            _ => None,
        };
        let trace = seq2seq_forward(
            params,
            mcfg,
            eeg.view(),
            &s.src_mask,
            dec_input,
            with_contrastive,
            &mut drop,
        )?;
        let (ce, mut dlogits) =
            cross_entropy_masked_grad(trace.logits.view(), labels, label_mask)?;
        dlogits.mapv_inplace(|x| x * inv_b);
        Ok(SeqStep { trace, ce, dlogits })
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let mut ce_mean = F::zero();
    for s in &steps {
        ce_mean += s.ce * inv_b;
    }

    let mut total = ce_mean;
    let mut contrastive = None;
    let mut dz: Option<(Array2<F>, Array2<F>, Vec<ProjectionTrace<F>>)> = None;
    if with_contrastive {
        let embs = text_embs.expect("checked above");
        let text_traces: Vec<ProjectionTrace<F>> =
            exec::map_slice(parallel, embs, |e| project_forward(params, e.view()))
                .into_iter()
                .collect::<Result<_>>()?;
        let d = mcfg.d_model;
        let mut ze = Array2::<F>::zeros((b, d));
        let mut zt = Array2::<F>::zeros((b, d));
        for i in 0..b {
            ze.row_mut(i)
                .assign(steps[i].trace.z_eeg().expect("contrastive trace"));
            zt.row_mut(i).assign(&text_traces[i].z);
        }
        let (l_con, dze, dzt) = contrastive_loss_grad(ze.view(), zt.view(), mcfg.temperature)?;
        let w = F::from_f64(contrastive_weight);
        total += w * l_con;
        contrastive = Some(l_con);
        dz = Some((dze, dzt, text_traces));
    }

    if let Some(g) = grads {
        let w = F::from_f64(contrastive_weight);
        let per_sample: Vec<ModelParams<F>> =
            exec::map_indexed(parallel, &steps, |i, step| -> Result<_> {
                let mut gi = params.zeros_like();
                let dz_eeg = dz.as_ref().map(|(dze, _, _)| dze.row(i).mapv(|x| x * w));
                seq2seq_backward(
                    params,
                    mcfg,
                    &step.trace,
                    step.dlogits.view(),
                    dz_eeg.as_ref().map(|v| v.view()),
                    &mut gi,
                )?;
                if let Some((_, dzt, traces)) = dz.as_ref() {
                    let dzi = dzt.row(i).mapv(|x| x * w);
                    project_backward(params, &traces[i], dzi.view(), &mut gi);
                }
                Ok(gi)
            })
            .into_iter()
            .collect::<Result<_>>()?;
        for gi in &per_sample {
            g.add_scaled(gi, F::one());
        }
    }

    Ok(BatchTerms {
        total,
        ce: ce_mean,
        contrastive,
    })
}

/// Forward (and optionally backward) pass over one batch of the
/// encoder-only ablation model with per-position cross-entropy.
#[allow(clippy::too_many_arguments)]
pub fn ablation_batch<F: Scalar>(
    params: &ModelParams<F>,
    mcfg: &ModelConfig,
    samples: &[&PaddedSample],
    labels: &[(Vec<usize>, Vec<bool>)],
    dropout_p: f64,
    dropout_seeds: Option<&[u64]>,
    parallel: bool,
    grads: Option<&mut ModelParams<F>>,
) -> Result<BatchTerms<F>> {
    let b = samples.len();
    if b == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    if labels.len() != b {
        return Err(Error::Shape(format!("{} label rows for {b} samples", labels.len())));
    }

    let inv_b = F::from_f64(1.0 / b as f64);
    struct Step<F> {
        trace: crate::model::AblationTrace<F>,
        ce: F,
        dlogits: Array2<F>,
    }
    let steps: Vec<Step<F>> = exec::map_indexed(parallel, samples, |i, s| -> Result<_> {
        let eeg = eeg_as::<F>(s);
        let mut rng;
        let mut drop = match split_seeds(dropout_p, dropout_seeds, i) {
            Some((p, seed)) if p > 0.0 => {
                rng = ChaCha8Rng::seed_from_u64(seed);
                Some(Dropout { p, rng: &mut rng })
            }
            _ => None,
        };
        let trace = ablation_forward(params, mcfg, eeg.view(), &s.src_mask, &mut drop)?;
        let (ids, mask) = &labels[i];
        let (ce, mut dlogits) = cross_entropy_masked_grad(trace.logits.view(), ids, mask)?;
        dlogits.mapv_inplace(|x| x * inv_b);
        Ok(Step { trace, ce, dlogits })
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let mut ce_mean = F::zero();
    for s in &steps {
        ce_mean += s.ce * inv_b;
    }

    if let Some(g) = grads {
        let per_sample: Vec<ModelParams<F>> = exec::map_slice(parallel, &steps, |step| {
            let mut gi = params.zeros_like();
            ablation_backward(params, mcfg, &step.trace, step.dlogits.view(), &mut gi);
            gi
        });
        for gi in &per_sample {
            g.add_scaled(gi, F::one());
        }
    }

    Ok(BatchTerms {
        total: ce_mean,
        ce: ce_mean,
        contrastive: None,
    })
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Scales gradients in place so the global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm<F: Scalar>(grads: &mut ModelParams<F>, max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for (_, t) in grads.named_tensors() {
        for v in t.iter() {
            let x = v.to_f64();
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = F::from_f64(max_norm / norm);
        for (_, mut t) in grads.named_tensors_mut() {
            t.mapv_inplace(|x| x * scale);
        }
    }
    norm
}

/// Adaptive moment estimation with bias correction.
pub struct Adam<F: Scalar> {
    m: ModelParams<F>,
    v: ModelParams<F>,
    t: u32,
}

impl<F: Scalar> Adam<F> {
    pub fn new(params: &ModelParams<F>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams<F>, grads: &ModelParams<F>, cfg: &TrainConfig) {
        self.t += 1;
        let b1 = F::from_f64(cfg.beta1);
        let b2 = F::from_f64(cfg.beta2);
        let one = F::one();
        let lr = F::from_f64(
            cfg.learning_rate * (1.0 - cfg.beta2.powi(self.t as i32)).sqrt()
                / (1.0 - cfg.beta1.powi(self.t as i32)),
        );
        let eps = F::from_f64(cfg.epsilon);
        let g = grads.named_tensors();
        let mut p = params.named_tensors_mut();
        let mut m = self.m.named_tensors_mut();
        let mut v = self.v.named_tensors_mut();
        for i in 0..g.len() {
            let gt = &g[i].1;
            let pt = &mut p[i].1;
            let mt = &mut m[i].1;
            let vt = &mut v[i].1;
            ndarray::Zip::from(pt)
                .and(mt)
                .and(vt)
                .and(gt)
                .for_each(|pv, mv, vv, &gv| {
                    *mv = b1 * *mv + (one - b1) * gv;
                    *vv = b2 * *vv + (one - b2) * gv * gv;
                    *pv -= lr * *mv / (vv.sqrt() + eps);
                });
        }
    }
}

// ---------------------------------------------------------------------------
// Decoding
// ---------------------------------------------------------------------------

/// Index of the row maximum; ties resolve to the lowest index.
pub fn argmax_lowest<F: Scalar>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Autoregressive greedy decode from BOS over an encoded sequence: appends
/// the argmax token each step (ties to the lowest id) and stops at EOS or
/// after `max_steps` generated tokens. Returns the id sequence including
/// BOS (and EOS when produced).
pub fn greedy_decode_encoded<F: Scalar>(
    params: &ModelParams<F>,
    mcfg: &ModelConfig,
    enc: &EncodedSequence<F>,
    max_steps: usize,
) -> Result<Vec<usize>> {
    let mut ids = vec![BOS_ID];
    for _ in 0..max_steps {
        let logits = decoder_forward(params, mcfg, enc, &ids)?;
        let last = logits.row(logits.nrows() - 1);
        let next = argmax_lowest(last.as_slice().expect("contiguous row"));
        ids.push(next);
        if next == EOS_ID {
            break;
        }
    }
    Ok(ids)
}

/// Encode one padded sample and greedy-decode it.
pub fn greedy_decode<F: Scalar>(
    params: &ModelParams<F>,
    mcfg: &ModelConfig,
    sample: &PaddedSample,
    max_steps: usize,
) -> Result<Vec<usize>> {
    let eeg = eeg_as::<F>(sample);
    let enc = encode_eeg(params, mcfg, eeg.view(), &sample.src_mask)?;
    greedy_decode_encoded(params, mcfg, &enc, max_steps)
}

/// Per-position argmax ids over the first n_chars positions of the
/// encoder-only head; a pure function of the EEG.
pub fn ablation_predict<F: Scalar>(
    params: &ModelParams<F>,
    mcfg: &ModelConfig,
    sample: &PaddedSample,
) -> Result<Vec<usize>> {
    let eeg = eeg_as::<F>(sample);
    let logits = crate::model::encoder_only_forward(params, mcfg, eeg.view(), &sample.src_mask)?;
    Ok((0..sample.n_chars_eeg())
        .map(|i| {
            let row = logits.row(i);
            argmax_lowest(row.as_slice().expect("contiguous row"))
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// SplitMix64 — decorrelates per-sample dropout streams from the single
/// user seed.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sample_seed(seed: u64, epoch: usize, step: usize, idx: usize) -> u64 {
    let mut h = splitmix64(seed ^ 0x5851_F42D_4C95_7F2D);
    h = splitmix64(h ^ epoch as u64);
    h = splitmix64(h ^ step as u64);
    splitmix64(h ^ idx as u64)
}

/// Renders decoded ids as text: specials are stripped for the decoder path.
fn decode_to_text(vocab: &Vocab, ids: &[usize]) -> String {
    vocab.decode_ids(ids).unwrap_or_default()
}

/// Renders per-position ablation ids as text, one character per position
/// (specials render as the unknown glyph so positions stay aligned).
pub fn ablation_ids_to_text(vocab: &Vocab, ids: &[usize]) -> String {
    ids.iter()
        .map(|&id| vocab.char_of(id).unwrap_or(crate::textcodec::UNK_RENDER))
        .collect()
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub history: TrainHistory,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub best_epoch: usize,
}

/// Runs the full loop: shuffled mini-batches, gradient steps with clipping,
/// per-epoch validation loss, periodic validation BLEU via decoding, and
/// best-checkpoint tracking (highest validation BLEU-1, earlier epoch on
/// ties). Writes `history.jsonl`, `best.ckpt`, and `last.ckpt` into
/// `cfg.checkpoint_dir`.
pub fn train(
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    data: &Datasets,
    mode: TrainMode,
    vocab: &Vocab,
    text_embs: Option<&[Array1<f32>]>,
) -> Result<TrainOutcome> {
    mcfg.validate()?;
    tcfg.validate()?;
    data.train.validate("train")?;
    data.val.validate("val")?;
    if data.train.samples.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    if data.val.samples.is_empty() {
        return Err(Error::Data("validation split is empty".into()));
    }
    if tcfg.contrastive_weight > 0.0 {
        match (mode, text_embs) {
            (TrainMode::EncoderOnly, _) => {
                return Err(Error::Config(
                    "contrastive objective applies to the seq2seq mode only".into(),
                ))
            }
            (_, None) => {
                return Err(Error::Config(
                    "contrastive_weight > 0 requires text embeddings".into(),
                ))
            }
            (_, Some(e)) if e.len() != data.train.samples.len() => {
                return Err(Error::Shape(format!(
                    "{} text embeddings for {} training samples",
                    e.len(),
                    data.train.samples.len()
                )));
            }
            _ => {}
        }
    }
    // Loader-level leakage assertion: no held-out subject may feed training
    // or validation.
    for (name, set) in [("train", &data.train), ("val", &data.val)] {
        for subj in &set.subjects {
            if data.test_subjects.contains(subj) {
                return Err(Error::Data(format!(
                    "held-out subject {subj} leaked into the {name} set"
                )));
            }
        }
    }

    fs::create_dir_all(&tcfg.checkpoint_dir).map_err(|e| Error::io(&tcfg.checkpoint_dir, e))?;
    let history_path = tcfg.checkpoint_dir.join("history.jsonl");
    let best_path = tcfg.checkpoint_dir.join("best.ckpt");
    let last_path = tcfg.checkpoint_dir.join("last.ckpt");

    // Precompute ablation labels once.
    let train_labels = match mode {
        TrainMode::EncoderOnly => Some(labels_for(&data.train, vocab, mcfg)?),
        TrainMode::Seq2Seq => None,
    };
    let val_labels = match mode {
        TrainMode::EncoderOnly => Some(labels_for(&data.val, vocab, mcfg)?),
        TrainMode::Seq2Seq => None,
    };
    let train_embs: Option<Vec<Array1<f32>>> = text_embs.map(|e| e.to_vec());

    let mut params = init_params::<f32>(mcfg)?;
    let mut adam = Adam::new(&params);
    let mut grads = params.zeros_like();
    let mut history = TrainHistory::default();
    let mut history_file =
        fs::File::create(&history_path).map_err(|e| Error::io(&history_path, e))?;
    let mut best: Option<(usize, f64)> = None;

    let n = data.train.samples.len();
    for epoch in 1..=tcfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed ^ epoch as u64);
        order.shuffle(&mut rng);

        let mut train_loss_sum = 0.0f64;
        for (step, chunk) in order.chunks(tcfg.batch_size).enumerate() {
            let batch: Vec<&PaddedSample> =
                chunk.iter().map(|&i| &data.train.samples[i]).collect();
            let seeds: Vec<u64> = chunk
                .iter()
                .map(|&i| sample_seed(tcfg.seed, epoch, step, i))
                .collect();
            grads.fill_zero();
            let terms = match mode {
                TrainMode::Seq2Seq => {
                    let embs: Option<Vec<Array1<f32>>> = train_embs
                        .as_ref()
                        .map(|all| chunk.iter().map(|&i| all[i].clone()).collect());
                    seq2seq_batch(
                        &params,
                        mcfg,
                        &batch,
                        embs.as_deref(),
                        tcfg.contrastive_weight,
                        mcfg.dropout,
                        Some(&seeds),
                        tcfg.parallel,
                        Some(&mut grads),
                    )?
                }
                TrainMode::EncoderOnly => {
                    let all = train_labels.as_ref().expect("labels precomputed");
                    let labels: Vec<(Vec<usize>, Vec<bool>)> =
                        chunk.iter().map(|&i| all[i].clone()).collect();
                    ablation_batch(
                        &params,
                        mcfg,
                        &batch,
                        &labels,
                        mcfg.dropout,
                        Some(&seeds),
                        tcfg.parallel,
                        Some(&mut grads),
                    )?
                }
            };
            let total = f64::from(terms.total);
            if !total.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss {total} in epoch {epoch}, step {step} (samples {:?})",
                    chunk
                )));
            }
            train_loss_sum += total * batch.len() as f64;
            clip_global_norm(&mut grads, tcfg.grad_clip);
            adam.step(&mut params, &grads, tcfg);
            params.assert_finite()?;
        }
        let train_loss = train_loss_sum / n as f64;

        // Validation loss over fixed-order batches, no dropout.
        let mut val_loss_sum = 0.0f64;
        let val_order: Vec<usize> = (0..data.val.samples.len()).collect();
        for chunk in val_order.chunks(tcfg.batch_size) {
            let batch: Vec<&PaddedSample> =
                chunk.iter().map(|&i| &data.val.samples[i]).collect();
            let terms = match mode {
                TrainMode::Seq2Seq => seq2seq_batch(
                    &params,
                    mcfg,
                    &batch,
                    None,
                    0.0,
                    0.0,
                    None,
                    tcfg.parallel,
                    None,
                )?,
                TrainMode::EncoderOnly => {
                    let all = val_labels.as_ref().expect("labels precomputed");
                    let labels: Vec<(Vec<usize>, Vec<bool>)> =
                        chunk.iter().map(|&i| all[i].clone()).collect();
                    ablation_batch(
                        &params,
                        mcfg,
                        &batch,
                        &labels,
                        0.0,
                        None,
                        tcfg.parallel,
                        None,
                    )?
                }
            };
            val_loss_sum += f64::from(terms.total) * batch.len() as f64;
        }
        let val_loss = val_loss_sum / data.val.samples.len() as f64;

        let evaluate_bleu = epoch % tcfg.eval_every == 0 || epoch == tcfg.epochs;
        let val_bleu = if evaluate_bleu {
            Some(validation_bleu(&params, mcfg, data, mode, vocab, tcfg.parallel)?)
        } else {
            None
        };

        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_bleu1: val_bleu.map(|b| b[0]),
            val_bleu2: val_bleu.map(|b| b[1]),
            val_bleu3: val_bleu.map(|b| b[2]),
            val_bleu4: val_bleu.map(|b| b[3]),
            wall_time_s: if tcfg.record_wall_time {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        let line = serde_json::to_string(&record).expect("record serializes");
        writeln!(history_file, "{line}").map_err(|e| Error::io(&history_path, e))?;
        history.records.push(record);

        if let Some(b) = val_bleu {
            if best.is_none_or(|(_, bb)| b[0] > bb) {
                best = Some((epoch, b[0]));
                save_checkpoint(&best_path, &params, mcfg)?;
            }
        }
    }
    history_file.flush().map_err(|e| Error::io(&history_path, e))?;
    drop(history_file);

    save_checkpoint(&last_path, &params, mcfg)?;
    let (best_epoch, _) = best.expect("final epoch always evaluates BLEU");
    Ok(TrainOutcome {
        params,
        history,
        best_checkpoint: best_path,
        last_checkpoint: last_path,
        best_epoch,
    })
}

fn labels_for(
    set: &SampleSet,
    vocab: &Vocab,
    mcfg: &ModelConfig,
) -> Result<Vec<(Vec<usize>, Vec<bool>)>> {
    set.samples
        .iter()
        .zip(&set.texts)
        .map(|(s, text)| ablation_labels(vocab, text, s.n_chars_eeg(), mcfg.max_len_eeg))
        .collect()
}

/// Mean validation BLEU-1..4 from decoded predictions.
fn validation_bleu(
    params: &ModelParams<f32>,
    mcfg: &ModelConfig,
    data: &Datasets,
    mode: TrainMode,
    vocab: &Vocab,
    parallel: bool,
) -> Result<[f64; 4]> {
    let preds: Vec<String> = exec::map_slice(parallel, &data.val.samples, |s| -> Result<String> {
        Ok(match mode {
            TrainMode::Seq2Seq => {
                let ids = greedy_decode(params, mcfg, s, mcfg.max_len_text)?;
                decode_to_text(vocab, &ids)
            }
            TrainMode::EncoderOnly => {
                let ids = ablation_predict(params, mcfg, s)?;
                ablation_ids_to_text(vocab, &ids)
            }
        })
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let pairs: Vec<(String, String)> = data
        .val
        .texts
        .iter()
        .cloned()
        .zip(preds)
        .collect();
    let report = corpus_report(&pairs, &BleuOptions { parallel, ..BleuOptions::default() })?;
    Ok(report.mean)
}
