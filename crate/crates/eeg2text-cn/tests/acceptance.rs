//! Shipping acceptance suite.
//!
//! One test per release criterion. Every test routes through [`criterion`],
//! which prints `ACCEPTANCE <name>: PASS` or `ACCEPTANCE <name>: FAIL` so a
//! plain `cargo test --test acceptance -- --nocapture` reads as a checklist.
//! Tolerances are pinned in the assertions themselves.

use std::collections::{HashMap, HashSet};
use std::panic::AssertUnwindSafe;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array1, Array2, Array3, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tempfile::TempDir;

use eeg2text_cn::bleu::{bleu_n_with, modified_precision, sentence_score};
use eeg2text_cn::config::ExperimentConfig;
use eeg2text_cn::corpus::{CorpusEntry, SynthConfig, DTYPE_F32LE};
use eeg2text_cn::model::{decoder_forward, encode_eeg, init_params, ModelConfig, ModelParams};
use eeg2text_cn::pca::{apply_pca, fit_pca, reconstruct};
use eeg2text_cn::pipeline::{run_ablate, run_evaluate, run_prepare, run_synth, run_train};
use eeg2text_cn::preprocess::{pad_and_mask, split_dataset, PaddedSample, SplitSpec};
use eeg2text_cn::textcodec::{Vocab, BOS_ID};
use eeg2text_cn::training::{ablation_batch, ablation_labels, ablation_predict, seq2seq_batch};

/// Runs one acceptance criterion and prints its verdict line.
fn criterion<F: FnOnce()>(name: &str, f: F) {
    match std::panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(()) => println!("ACCEPTANCE {name}: PASS"),
        Err(cause) => {
            println!("ACCEPTANCE {name}: FAIL");
            std::panic::resume_unwind(cause);
        }
    }
}

/// Mid-sized single-layer model used by the structural criteria.
fn small_config(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        conv_out_channels: 8,
        conv_kernel: 3,
        n_encoder_layers: 1,
        n_decoder_layers: 1,
        n_heads: 2,
        ffn_dim: 32,
        dropout: 0.0,
        vocab_size,
        max_len_eeg: 6,
        max_len_text: 8,
        segment_time: 12,
        segment_components: 4,
        temperature: 0.07,
        seed: 7,
    }
}

/// Builds a padded sample whose first `n_eeg` character slots hold seeded
/// Gaussian EEG and whose target side encodes `text`.
fn random_sample(
    mcfg: &ModelConfig,
    vocab: &Vocab,
    text: &str,
    n_eeg: usize,
    seed: u64,
) -> PaddedSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut compressed =
        Array3::<f32>::zeros((n_eeg, mcfg.segment_time, mcfg.segment_components));
    for v in compressed.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
    pad_and_mask(
        compressed.view(),
        text,
        vocab,
        mcfg.max_len_eeg,
        mcfg.max_len_text,
        &format!("sample-{seed}"),
    )
    .unwrap()
}

// ---------------------------------------------------------------------------
// BLEU criteria
// ---------------------------------------------------------------------------

#[test]
fn bleu_fixture_exactness() {
    criterion("bleu_fixture_exactness", || {
        let t0 = Instant::now();
        // Frozen (ground truth, prediction, BLEU-1..4) fixtures; scores must
        // reproduce exactly at four decimal places.
        let decoder_rows: [(&str, &str, [f64; 4]); 8] = [
            ("全世界的狼都有一个共", "在草原东北端一块马蹄甲", [0.0909, 0.0302, 0.0216, 0.0189]),
            ("全世界的狼都有一个共", "石和一块块岩。这样奔跑", [0.0909, 0.0302, 0.0216, 0.0189]),
            ("同的习性，在严寒的冬天", "石。终于草棚上的猎人和", [0.0909, 0.0302, 0.0216, 0.0189]),
            ("同的习性，在严寒的冬天", "在草原东北端一块马蹄甲", [0.0909, 0.0302, 0.0216, 0.0189]),
            ("集合成群，平时单身独处。", "石。终于草棚上的猎人和", [0.0830, 0.0275, 0.0197, 0.0172]),
            ("集合成群，平时单身独处。", "在草原东北端一块马蹄甲", [0.0000, 0.0000, 0.0000, 0.0000]),
            ("眼下正是桃红柳绿的春", "石。终于草棚上的猎人和", [0.0909, 0.0302, 0.0216, 0.0189]),
            ("眼下正是桃红柳绿的春", "在草原东北端一块马蹄甲", [0.0000, 0.0000, 0.0000, 0.0000]),
        ];
        let encoder_only_rows: [(&str, &str, [f64; 4]); 7] = [
            ("1", "的", [0.0000, 0.0000, 0.0000, 0.0000]),
            ("全世界的狼都有一个共", "的的的的的的的的的的", [0.1000, 0.0333, 0.0240, 0.0211]),
            ("同的习性，在严寒的冬天", "的的的的的的的的的的", [0.1810, 0.0427, 0.0274, 0.0227]),
            ("集合成群，平时单身独处。", "的的的的的的的的的的", [0.0000, 0.0000, 0.0000, 0.0000]),
            ("眼下正是桃红柳绿的春", "的的的的的的的的的的", [0.1000, 0.0333, 0.0240, 0.0211]),
            ("天，日曲卡雪山的狼群按", "的的的的的的的的的的", [0.0905, 0.0302, 0.0218, 0.0191]),
            ("自然属性解体了，", "的的的的的的的", [0.0000, 0.0000, 0.0000, 0.0000]),
        ];
        for (i, (gt, pred, want)) in decoder_rows
            .iter()
            .chain(encoder_only_rows.iter())
            .enumerate()
        {
            let s = sentence_score(&format!("row-{i}"), gt, pred, false).unwrap();
            assert_eq!(
                s.bleu, *want,
                "fixture row {i} (gt `{gt}` / pred `{pred}`) scored {:?}",
                s.bleu
            );
        }
        assert!(
            t0.elapsed().as_secs_f64() < 1.0,
            "fixture scoring took {:?}, budget is 1 s",
            t0.elapsed()
        );
    });
}

/// Positional n-gram counter kept deliberately naive: it slides a window,
/// deduplicates in a Vec, and clips by plain filtering, sharing no code with
/// the hash-map implementation under test.
fn brute_counts(pred: &str, gt: &str, n: usize) -> (usize, usize) {
    let p: Vec<char> = pred.chars().collect();
    let g: Vec<char> = gt.chars().collect();
    if p.len() < n {
        return (0, 0);
    }
    let windows = |v: &[char]| -> Vec<String> {
        if v.len() < n {
            return Vec::new();
        }
        (0..=v.len() - n)
            .map(|i| v[i..i + n].iter().collect())
            .collect()
    };
    let pw = windows(&p);
    let gw = windows(&g);
    let mut seen: Vec<&String> = Vec::new();
    let mut matches = 0usize;
    for w in &pw {
        if seen.contains(&w) {
            continue;
        }
        seen.push(w);
        let in_pred = pw.iter().filter(|x| *x == w).count();
        let in_gt = gw.iter().filter(|x| *x == w).count();
        matches += in_pred.min(in_gt);
    }
    (matches, pw.len())
}

#[test]
fn bleu_oracle_equivalence() {
    criterion("bleu_oracle_equivalence", || {
        let alphabet = ['甲', '乙', '丙', '丁', '戊'];
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let rand_text = |rng: &mut ChaCha8Rng, min_len: usize| -> String {
            let len = rng.random_range(min_len..=12);
            (0..len)
                .map(|_| alphabet[rng.random_range(0..alphabet.len())])
                .collect()
        };
        for case in 0..1000 {
            let gt = rand_text(&mut rng, 1);
            let pred = rand_text(&mut rng, 1);
            for n in 1..=4 {
                let got = modified_precision(&pred, &gt, n).unwrap();
                let want = brute_counts(&pred, &gt, n);
                assert_eq!(
                    got, want,
                    "case {case}, order {n}: pred `{pred}` vs gt `{gt}`"
                );
            }
            let s = sentence_score("pair", &gt, &pred, false).unwrap();
            for (k, b) in s.bleu.iter().enumerate() {
                assert!(
                    (0.0..=1.0).contains(b),
                    "case {case}: smoothed BLEU-{} = {b} out of range",
                    k + 1
                );
                let raw = bleu_n_with(&pred, &gt, k + 1, true).unwrap();
                assert!(
                    (0.0..=1.0).contains(&raw),
                    "case {case}: raw BLEU-{} = {raw} out of range",
                    k + 1
                );
            }
        }
        // A sentence compared against itself scores a perfect 1.0 at every
        // order it has n-grams for.
        for _ in 0..100 {
            let text = rand_text(&mut rng, 4);
            let s = sentence_score("identity", &text, &text, false).unwrap();
            assert_eq!(s.bleu, [1.0; 4], "identity pair `{text}`");
        }
        for len in 1..4usize {
            let text: String = alphabet[..len].iter().collect();
            let s = sentence_score("identity", &text, &text, false).unwrap();
            for n in 1..=len {
                assert_eq!(s.bleu[n - 1], 1.0, "identity pair `{text}`, order {n}");
            }
        }
    });
}

#[test]
fn brevity_penalty() {
    criterion("brevity_penalty", || {
        assert_eq!(eeg2text_cn::bleu::brevity_penalty(12, 10), 1.0);
        assert_eq!(eeg2text_cn::bleu::brevity_penalty(10, 10), 1.0);
        let got = eeg2text_cn::bleu::brevity_penalty(10, 11);
        let want = (-0.1f64).exp();
        assert!(
            (got - want).abs() < 1e-9,
            "bp(10, 11) = {got}, expected e^-0.1 = {want}"
        );
    });
}

// ---------------------------------------------------------------------------
// Model structure criteria
// ---------------------------------------------------------------------------

#[test]
fn masking_invariance() {
    criterion("masking_invariance", || {
        let vocab = Vocab::from_chars("早晨空气很新鲜".chars());
        let mcfg = small_config(vocab.size());
        let params = init_params::<f32>(&mcfg).unwrap();
        let sample = random_sample(&mcfg, &vocab, "早晨空", 3, 11);

        // Blast the padded EEG slots with large noise.
        let mut noisy = sample.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for i in sample.n_chars_eeg()..mcfg.max_len_eeg {
            for t in 0..mcfg.segment_time {
                for c in 0..mcfg.segment_components {
                    noisy.eeg[[i, t, c]] = 13.7 + rng.sample::<f32, _>(StandardNormal);
                }
            }
        }
        let enc_base = encode_eeg(&params, &mcfg, sample.eeg.view(), &sample.src_mask).unwrap();
        let enc_noisy = encode_eeg(&params, &mcfg, noisy.eeg.view(), &noisy.src_mask).unwrap();
        let mut worst = 0f32;
        for i in 0..sample.n_chars_eeg() {
            for j in 0..mcfg.d_model {
                worst = worst.max((enc_base.h[[i, j]] - enc_noisy.h[[i, j]]).abs());
            }
        }
        assert!(
            worst <= 1e-6,
            "valid-position encoder outputs moved by {worst} under padded-slot noise"
        );

        let base = seq2seq_batch(&params, &mcfg, &[&sample], None, 0.0, 0.0, None, false, None)
            .unwrap();
        let noisy_loss =
            seq2seq_batch(&params, &mcfg, &[&noisy], None, 0.0, 0.0, None, false, None).unwrap();
        assert!(
            (base.total - noisy_loss.total).abs() <= 1e-6,
            "loss moved from {} to {} under padded-slot noise",
            base.total,
            noisy_loss.total
        );

        // Garbage labels in masked target slots must be invisible: the loss
        // change is required to be exactly zero, so compare bit patterns.
        let mut relabeled = sample.clone();
        for (j, &m) in sample.tgt_mask.iter().enumerate() {
            if !m {
                relabeled.target_ids[j] = 5 + (j % 3);
            }
        }
        let relabeled_loss =
            seq2seq_batch(&params, &mcfg, &[&relabeled], None, 0.0, 0.0, None, false, None)
                .unwrap();
        assert_eq!(
            base.total.to_bits(),
            relabeled_loss.total.to_bits(),
            "masked-slot label change altered the loss: {} vs {}",
            base.total,
            relabeled_loss.total
        );
    });
}

#[test]
fn causality() {
    criterion("causality", || {
        let vocab = Vocab::from_chars("早晨空气很新鲜".chars());
        let mcfg = small_config(vocab.size());
        let params = init_params::<f32>(&mcfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = [("早晨空", 3usize), ("气很", 2), ("新鲜空气很早", 6)];
        for (s, (text, n_eeg)) in batch.iter().enumerate() {
            let sample = random_sample(&mcfg, &vocab, text, *n_eeg, 100 + s as u64);
            let enc = encode_eeg(&params, &mcfg, sample.eeg.view(), &sample.src_mask).unwrap();
            let len = mcfg.max_len_text + 1;
            let n_chars = vocab.size() - 4;
            let ids: Vec<usize> = std::iter::once(BOS_ID)
                .chain((1..len).map(|_| 4 + rng.random_range(0..n_chars)))
                .collect();
            let base = decoder_forward(&params, &mcfg, &enc, &ids).unwrap();
            for t in 0..len - 1 {
                // Rewrite every token strictly after position t.
                let mut tweaked = ids.clone();
                for slot in tweaked.iter_mut().skip(t + 1) {
                    *slot = 4 + (*slot - 4 + 1) % n_chars;
                }
                let out = decoder_forward(&params, &mcfg, &enc, &tweaked).unwrap();
                for row in 0..=t {
                    for v in 0..vocab.size() {
                        let d = (base[[row, v]] - out[[row, v]]).abs();
                        assert!(
                            d <= 1e-6,
                            "sample {s}: logits[{row}] moved by {d} when tokens after {t} changed"
                        );
                    }
                }
            }
        }
    });
}

/// Overwrites one scalar inside the parameter struct, addressed by tensor
/// index and flat element index within that tensor.
fn set_scalar(params: &mut ModelParams<f64>, tensor: usize, elem: usize, value: f64) {
    let mut tensors = params.named_tensors_mut();
    *tensors[tensor].1.iter_mut().nth(elem).unwrap() = value;
}

#[test]
fn gradient_check() {
    criterion("gradient_check", || {
        let t0 = Instant::now();
        let vocab = Vocab::from_chars("一二三四五六七八".chars());
        let mcfg = ModelConfig {
            d_model: 8,
            conv_out_channels: 4,
            conv_kernel: 3,
            n_encoder_layers: 1,
            n_decoder_layers: 1,
            n_heads: 2,
            ffn_dim: 16,
            dropout: 0.0,
            vocab_size: vocab.size(),
            max_len_eeg: 3,
            max_len_text: 4,
            segment_time: 6,
            segment_components: 3,
            temperature: 0.07,
            seed: 7,
        };
        assert_eq!(vocab.size(), 12);
        let mut params = init_params::<f64>(&mcfg).unwrap();

        let texts = ["一二三", "四五六七"];
        let samples = [
            random_sample(&mcfg, &vocab, texts[0], 3, 21),
            random_sample(&mcfg, &vocab, texts[1], 2, 22),
        ];
        let sample_refs: Vec<&PaddedSample> = samples.iter().collect();
        let labels: Vec<(Vec<usize>, Vec<bool>)> = samples
            .iter()
            .zip(texts)
            .map(|(s, t)| ablation_labels(&vocab, t, s.n_chars_eeg(), mcfg.max_len_eeg).unwrap())
            .collect();
        let mut erng = ChaCha8Rng::seed_from_u64(33);
        let embs: Vec<Array1<f64>> = (0..samples.len())
            .map(|_| {
                Array1::from_iter((0..mcfg.d_model).map(|_| erng.sample::<f64, _>(StandardNormal)))
            })
            .collect();

        // Joint objective: sequence loss with a contrastive term plus the
        // encoder-only per-position loss, so one sweep covers every head.
        let loss = |p: &ModelParams<f64>| -> f64 {
            let seq = seq2seq_batch(p, &mcfg, &sample_refs, Some(&embs), 0.5, 0.0, None, false, None)
                .unwrap();
            let abl = ablation_batch(p, &mcfg, &sample_refs, &labels, 0.0, None, false, None)
                .unwrap();
            seq.total + abl.total
        };

        let mut grads = params.zeros_like();
        let seq = seq2seq_batch(
            &params,
            &mcfg,
            &sample_refs,
            Some(&embs),
            0.5,
            0.0,
            None,
            false,
            Some(&mut grads),
        )
        .unwrap();
        let abl = ablation_batch(
            &params,
            &mcfg,
            &sample_refs,
            &labels,
            0.0,
            None,
            false,
            Some(&mut grads),
        )
        .unwrap();
        assert!((seq.total + abl.total).is_finite());

        let h = 1e-5;
        let n_tensors = params.named_tensors().len();
        let mut checked = 0usize;
        for ti in 0..n_tensors {
            let (name, len) = {
                let tensors = params.named_tensors();
                (tensors[ti].0.clone(), tensors[ti].1.len())
            };
            for k in 0..len {
                let orig = params.named_tensors()[ti].1.iter().copied().nth(k).unwrap();
                set_scalar(&mut params, ti, k, orig + h);
                let up = loss(&params);
                set_scalar(&mut params, ti, k, orig - h);
                let down = loss(&params);
                set_scalar(&mut params, ti, k, orig);
                let fd = (up - down) / (2.0 * h);
                let g = grads.named_tensors()[ti].1.iter().copied().nth(k).unwrap();
                checked += 1;
                let scale = g.abs().max(fd.abs());
                if scale < 1e-7 {
                    continue; // both effectively zero
                }
                let rel = (g - fd).abs() / scale;
                assert!(
                    rel < 1e-4,
                    "{name}[{k}]: analytic {g} vs finite-difference {fd} (relative error {rel})"
                );
            }
        }
        assert_eq!(checked, params.n_params());
        assert!(
            t0.elapsed().as_secs_f64() < 60.0,
            "gradient check took {:?}, budget is 60 s",
            t0.elapsed()
        );
    });
}

// ---------------------------------------------------------------------------
// PCA criterion
// ---------------------------------------------------------------------------

#[test]
fn pca_properties() {
    criterion("pca_properties", || {
        let channels = 16usize;
        let k = 8usize;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let basis =
            Array2::<f64>::from_shape_fn((k, channels), |_| rng.sample(StandardNormal));
        let offset =
            Array1::<f64>::from_shape_fn(channels, |_| 3.0 * rng.sample::<f64, _>(StandardNormal));

        // Segments are [n_chars, channels, time]; every (char, time) column
        // lives exactly in the k-dimensional span of `basis`.
        let mut segments: Vec<Array3<f32>> = Vec::new();
        for _ in 0..6 {
            let mut seg = Array3::<f32>::zeros((4, channels, 10));
            for i in 0..4 {
                for t in 0..10 {
                    let coeffs: Vec<f64> =
                        (0..k).map(|_| rng.sample(StandardNormal)).collect();
                    for ch in 0..channels {
                        let mut v = offset[ch];
                        for (j, c) in coeffs.iter().enumerate() {
                            v += c * basis[[j, ch]];
                        }
                        seg[[i, ch, t]] = v as f32;
                    }
                }
            }
            segments.push(seg);
        }

        let model = fit_pca(&segments, k, "train").unwrap();

        // Component rows are orthonormal.
        for a in 0..k {
            for b in 0..k {
                let dot: f64 = (0..channels)
                    .map(|c| model.components[[a, c]] * model.components[[b, c]])
                    .sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!(
                    (dot - want).abs() <= 1e-5,
                    "component rows {a} and {b}: dot = {dot}"
                );
            }
        }

        // Explained variance is a non-increasing sequence and, on rank-k
        // data, the k components capture essentially everything.
        let evr = &model.explained_variance_ratio;
        assert_eq!(evr.len(), k);
        for w in evr.windows(2) {
            assert!(w[0] >= w[1] - 1e-12, "explained variance increased: {w:?}");
        }
        for &e in evr {
            assert!((-1e-12..=1.0 + 1e-12).contains(&e));
        }
        assert!(evr.iter().sum::<f64>() > 0.999);

        // Round-trip through the compressor reconstructs the input.
        let mut worst = 0f64;
        for seg in &segments {
            for i in 0..seg.shape()[0] {
                let x = seg.index_axis(Axis(0), i);
                let z = apply_pca(&model, x).unwrap();
                let back = reconstruct(&model, z.view()).unwrap();
                let mut num = 0f64;
                let mut den = 0f64;
                for (a, b) in x.iter().zip(back.iter()) {
                    num += (f64::from(*a) - f64::from(*b)).powi(2);
                    den += f64::from(*a).powi(2);
                }
                worst = worst.max((num / den).sqrt());
            }
        }
        assert!(
            worst <= 1e-5,
            "relative reconstruction error {worst} on rank-{k} data"
        );
    });
}

// ---------------------------------------------------------------------------
// End-to-end criteria
// ---------------------------------------------------------------------------

/// The frozen desk-scale overfit recipe: tiny synthetic corpus, mid-sized
/// model, 200 epochs. Also reused (shortened) by the ablation criterion.
fn overfit_experiment(root: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.paths.corpus_dir = root.join("corpus");
    cfg.paths.prepared_dir = root.join("prepared");
    cfg.synth = SynthConfig {
        vocab_chars: "冬天雪山很冷风吹树叶".chars().collect(),
        n_sentences: 20,
        min_len: 4,
        max_len: 10,
        noise_sigma: 0.1,
        seed: 7,
        subjects: vec!["sub-01".into()],
    };
    cfg.prepare.k_components = 8;
    cfg.prepare.split = SplitSpec {
        train_subjects: vec!["sub-01".into()],
        test_subjects: vec![],
        val_fraction: 0.2,
        seed: 7,
    };
    cfg.model = ModelConfig {
        d_model: 32,
        conv_out_channels: 16,
        conv_kernel: 3,
        n_encoder_layers: 2,
        n_decoder_layers: 2,
        n_heads: 4,
        ffn_dim: 64,
        dropout: 0.0,
        vocab_size: 0, // resolved from the prepared vocabulary
        max_len_eeg: 10,
        max_len_text: 12,
        segment_time: 90,
        segment_components: 8,
        temperature: 0.07,
        seed: 7,
    };
    cfg.train.epochs = 200;
    cfg.train.batch_size = 4;
    cfg.train.learning_rate = 1e-3;
    cfg.train.seed = 7;
    cfg.train.eval_every = 50;
    cfg.train.checkpoint_dir = root.join("run");
    cfg.eval.checkpoint = "last".into();
    cfg.eval.split = "train".into();
    cfg
}

#[test]
fn end_to_end_overfit() {
    criterion("end_to_end_overfit", || {
        let t0 = Instant::now();
        let dir = TempDir::new().unwrap();
        let cfg = overfit_experiment(dir.path());
        run_synth(&cfg).unwrap();
        run_prepare(&cfg).unwrap();
        let summary = run_train(&cfg).unwrap();
        let records = &summary.outcome.history.records;
        assert_eq!(records.len(), 200);
        let first = records[0].train_loss;
        let last = records.last().unwrap().train_loss;
        assert!(
            last <= 0.1 * first,
            "train loss fell only from {first} to {last}; need a 90% reduction"
        );
        let eval = run_evaluate(&cfg).unwrap();
        assert!(
            eval.report.mean[0] > 0.9,
            "greedy-decode mean BLEU-1 on the training split is {}",
            eval.report.mean[0]
        );
        assert!(
            t0.elapsed().as_secs_f64() < 600.0,
            "overfit run took {:?}, budget is 10 min",
            t0.elapsed()
        );
    });
}

#[test]
fn ablation_contract() {
    criterion("ablation_contract", || {
        // The encoder-only head never sees target tokens, so predictions
        // must be bit-identical under any relabeling.
        let vocab = Vocab::from_chars("早晨空气很新鲜".chars());
        let mcfg = small_config(vocab.size());
        let params = init_params::<f32>(&mcfg).unwrap();
        let sample = random_sample(&mcfg, &vocab, "早晨空气", 4, 55);
        let mut retargeted = sample.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        for j in 0..retargeted.target_ids.len() {
            retargeted.target_ids[j] = rng.random_range(0..vocab.size());
            retargeted.tgt_mask[j] = rng.random_bool(0.5);
        }
        let base = ablation_predict(&params, &mcfg, &sample).unwrap();
        let relabeled = ablation_predict(&params, &mcfg, &retargeted).unwrap();
        assert_eq!(base, relabeled, "predictions depended on target tokens");

        // Desk-scale overfit: per-position train accuracy must clear 0.9.
        let dir = TempDir::new().unwrap();
        let mut cfg = overfit_experiment(dir.path());
        cfg.train.epochs = 100;
        cfg.train.eval_every = 25;
        run_synth(&cfg).unwrap();
        run_prepare(&cfg).unwrap();
        let summary = run_ablate(&cfg, None).unwrap();
        assert!(
            summary.train_accuracy >= 0.9,
            "encoder-only train accuracy {}",
            summary.train_accuracy
        );
    });
}

#[test]
fn split_integrity() {
    criterion("split_integrity", || {
        let train_subjects: Vec<String> = (1..=5).map(|i| format!("sub-0{i}")).collect();
        let all_subjects: Vec<String> = (1..=6).map(|i| format!("sub-0{i}")).collect();
        let mut entries = Vec::new();
        for subj in &all_subjects {
            for s in 0..300u32 {
                entries.push(CorpusEntry {
                    id: format!("{subj}_ch001_{s:04}"),
                    subject: subj.clone(),
                    chapter: 1,
                    segment_index: s,
                    text: "山很冷".into(),
                    n_chars_eeg: 3,
                    eeg_path: format!("eeg/{subj}_{s:04}.f32"),
                    dtype: DTYPE_F32LE.into(),
                    shape: vec![3, 128, 90],
                });
            }
        }
        assert_eq!(entries.len(), 1800);
        let spec = SplitSpec {
            train_subjects,
            test_subjects: vec!["sub-06".into()],
            val_fraction: 0.2,
            seed: 7,
        };
        let splits = split_dataset(&entries, &spec).unwrap();
        assert_eq!(splits.train.len(), 1200);
        assert_eq!(splits.val.len(), 300);
        assert_eq!(splits.test.len(), 300);

        let subject_of: HashMap<&str, &str> = entries
            .iter()
            .map(|e| (e.id.as_str(), e.subject.as_str()))
            .collect();
        let train_ids: HashSet<&str> = splits.train.iter().map(String::as_str).collect();
        let val_ids: HashSet<&str> = splits.val.iter().map(String::as_str).collect();
        let test_ids: HashSet<&str> = splits.test.iter().map(String::as_str).collect();
        assert_eq!(train_ids.len(), 1200);
        assert_eq!(val_ids.len(), 300);
        assert_eq!(test_ids.len(), 300);
        assert!(train_ids.is_disjoint(&val_ids));
        assert!(train_ids.is_disjoint(&test_ids));
        assert!(val_ids.is_disjoint(&test_ids));
        for id in &splits.test {
            assert_eq!(subject_of[id.as_str()], "sub-06");
        }
        for id in splits.train.iter().chain(splits.val.iter()) {
            assert_ne!(
                subject_of[id.as_str()],
                "sub-06",
                "held-out subject leaked into train/val via {id}"
            );
        }
    });
}

/// Runs synth → prepare → train → evaluate sequentially under one root and
/// returns the artifact files whose bytes must be reproducible.
fn deterministic_run(root: &Path) -> Vec<PathBuf> {
    let mut cfg = ExperimentConfig::default();
    cfg.paths.corpus_dir = root.join("corpus");
    cfg.paths.prepared_dir = root.join("prepared");
    cfg.synth = SynthConfig {
        vocab_chars: "冬天雪很冷呀".chars().collect(),
        n_sentences: 12,
        min_len: 4,
        max_len: 8,
        noise_sigma: 0.1,
        seed: 13,
        subjects: vec!["sub-01".into(), "sub-02".into()],
    };
    cfg.prepare.k_components = 4;
    cfg.prepare.split = SplitSpec {
        train_subjects: vec!["sub-01".into()],
        test_subjects: vec!["sub-02".into()],
        val_fraction: 0.34,
        seed: 7,
    };
    cfg.model = ModelConfig {
        d_model: 16,
        conv_out_channels: 8,
        conv_kernel: 3,
        n_encoder_layers: 1,
        n_decoder_layers: 1,
        n_heads: 2,
        ffn_dim: 32,
        dropout: 0.1, // nonzero on purpose: dropout must be seeded
        vocab_size: 0,
        max_len_eeg: 10,
        max_len_text: 12,
        segment_time: 90,
        segment_components: 4,
        temperature: 0.07,
        seed: 7,
    };
    cfg.train.epochs = 3;
    cfg.train.batch_size = 4;
    cfg.train.learning_rate = 1e-3;
    cfg.train.eval_every = 1;
    cfg.train.checkpoint_dir = root.join("run");
    cfg.eval.checkpoint = "best".into();
    cfg.eval.split = "test".into();
    cfg.force_sequential();

    run_synth(&cfg).unwrap();
    run_prepare(&cfg).unwrap();
    run_train(&cfg).unwrap();
    run_evaluate(&cfg).unwrap();
    vec![
        root.join("run/history.jsonl"),
        root.join("run/best.ckpt"),
        root.join("run/last.ckpt"),
        root.join("run/eval/predictions.jsonl"),
        root.join("run/eval/report.json"),
        root.join("run/eval/report.txt"),
    ]
}

#[test]
fn determinism() {
    criterion("determinism", || {
        let d1 = TempDir::new().unwrap();
        let d2 = TempDir::new().unwrap();
        let first = deterministic_run(d1.path());
        let second = deterministic_run(d2.path());
        for (a, b) in first.iter().zip(&second) {
            let bytes_a = std::fs::read(a).unwrap();
            let bytes_b = std::fs::read(b).unwrap();
            assert!(!bytes_a.is_empty(), "{} is empty", a.display());
            assert_eq!(
                bytes_a,
                bytes_b,
                "{} differs between identical runs",
                a.file_name().unwrap().to_string_lossy()
            );
        }
    });
}
