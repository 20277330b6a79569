//! Character-level BLEU-1..4 with brevity penalty and epsilon smoothing.
//!
//! Scoring operates on Unicode characters (punctuation included). Higher-order
//! precisions with zero clipped matches are smoothed as `0.1 / total`, and a
//! candidate with zero unigram overlap scores 0.0 for every order. Corpus
//! scores default to the arithmetic mean of per-sentence scores; a
//! micro-averaged mode pools counts across the corpus instead.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;

/// Epsilon substituted into zero higher-order precisions.
pub const SMOOTHING_EPSILON: f64 = 0.1;

/// How corpus-level scores aggregate sentence scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CorpusMode {
    /// Arithmetic mean of per-sentence BLEU-n.
    #[default]
    Mean,
    /// Pool n-gram counts and lengths across the corpus, then score once.
    Micro,
}

#[derive(Debug, Clone)]
pub struct BleuOptions {
    /// Disable smoothing: any zero precision forces the score to 0.
    pub raw: bool,
    pub corpus_mode: CorpusMode,
    pub parallel: bool,
}

impl Default for BleuOptions {
    fn default() -> Self {
        Self {
            raw: false,
            corpus_mode: CorpusMode::Mean,
            parallel: true,
        }
    }
}

/// One scored (ground truth, prediction) pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SentenceScore {
    #[serde(default)]
    pub id: String,
    pub gt: String,
    pub pred: String,
    /// Modified precisions p1..p4 after smoothing.
    pub p: [f64; 4],
    pub bp: f64,
    /// BLEU-1..BLEU-4, rounded to 4 decimals.
    pub bleu: [f64; 4],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BleuReport {
    pub format_version: u32,
    pub corpus_mode: CorpusMode,
    pub raw: bool,
    pub n: usize,
    /// Corpus BLEU-1..4, rounded to 4 decimals.
    pub mean: [f64; 4],
    pub sentences: Vec<SentenceScore>,
}

/// Input record for corpus scoring, mirroring the predictions JSONL schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredRecord {
    pub id: String,
    pub gt: String,
    pub pred: String,
}

/// Multiset of character n-grams of `text`.
pub fn char_ngrams(text: &str, n: usize) -> Result<HashMap<String, usize>> {
    if n < 1 {
        return Err(Error::Config(format!("n-gram order must be >= 1, got {n}")));
    }
    let chars: Vec<char> = text.chars().collect();
    let mut counts = HashMap::new();
    if chars.len() >= n {
        for window in chars.windows(n) {
            *counts.entry(window.iter().collect::<String>()).or_insert(0) += 1;
        }
    }
    Ok(counts)
}

/// Clipped n-gram matches and candidate n-gram total.
///
/// `matches` sums `min(count_pred, count_gt)` over the candidate's n-gram
/// types; `total` is the candidate's n-gram count. An empty candidate yields
/// the degenerate `(0, 0)`.
pub fn modified_precision(pred: &str, gt: &str, n: usize) -> Result<(usize, usize)> {
    let pred_counts = char_ngrams(pred, n)?;
    let gt_counts = char_ngrams(gt, n)?;
    let matches = pred_counts
        .iter()
        .map(|(g, &c)| c.min(gt_counts.get(g).copied().unwrap_or(0)))
        .sum();
    let total = pred_counts.values().sum();
    Ok((matches, total))
}

/// Brevity penalty: 1 when the candidate is longer than the reference,
/// otherwise `exp(1 - r/c)`. A zero-length candidate is degenerate and
/// returns 0.
pub fn brevity_penalty(c: usize, r: usize) -> f64 {
    if c == 0 {
        return 0.0;
    }
    if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    }
}

/// Round to 4 decimal places, ties to even.
pub fn round4(x: f64) -> f64 {
    (x * 10_000.0).round_ties_even() / 10_000.0
}

struct SentenceCounts {
    /// (matches, total) for orders 1..=4.
    counts: [(usize, usize); 4],
    cand_len: usize,
    ref_len: usize,
}

fn sentence_counts(pred: &str, gt: &str) -> Result<SentenceCounts> {
    let mut counts = [(0usize, 0usize); 4];
    for (i, slot) in counts.iter_mut().enumerate() {
        *slot = modified_precision(pred, gt, i + 1)?;
    }
    Ok(SentenceCounts {
        counts,
        cand_len: pred.chars().count(),
        ref_len: gt.chars().count(),
    })
}

/// Smoothed precisions and BLEU-1..4 from clipped counts.
///
/// Returns `(p, bp, bleu)`. With zero clipped unigram matches every score is
/// 0 and the precisions are reported unsmoothed.
fn score_from_counts(sc: &SentenceCounts, raw: bool) -> ([f64; 4], f64, [f64; 4]) {
    let bp = brevity_penalty(sc.cand_len, sc.ref_len);
    let mut p = [0.0f64; 4];
    let (m1, _) = sc.counts[0];
    if raw {
        for (i, &(m, t)) in sc.counts.iter().enumerate() {
            p[i] = if t > 0 { m as f64 / t as f64 } else { 0.0 };
        }
        let mut bleu = [0.0f64; 4];
        for n in 1..=4 {
            if p[..n].iter().all(|&pi| pi > 0.0) {
                let log_mean = p[..n].iter().map(|pi| pi.ln()).sum::<f64>() / n as f64;
                bleu[n - 1] = bp * log_mean.exp();
            }
        }
        return (p, bp, bleu);
    }
    if m1 == 0 {
        for (i, &(m, t)) in sc.counts.iter().enumerate() {
            p[i] = if t > 0 { m as f64 / t as f64 } else { 0.0 };
        }
        return (p, bp, [0.0; 4]);
    }
    for (i, &(m, t)) in sc.counts.iter().enumerate() {
        p[i] = if m > 0 {
            m as f64 / t as f64
        } else {
            SMOOTHING_EPSILON / t.max(1) as f64
        };
    }
    let mut bleu = [0.0f64; 4];
    for n in 1..=4 {
        let log_mean = p[..n].iter().map(|pi| pi.ln()).sum::<f64>() / n as f64;
        bleu[n - 1] = bp * log_mean.exp();
    }
    (p, bp, bleu)
}

/// BLEU-n for one sentence pair with the default smoothing rule.
pub fn bleu_n(pred: &str, gt: &str, n: usize) -> Result<f64> {
    bleu_n_with(pred, gt, n, false)
}

/// BLEU-n for one sentence pair; `raw` disables smoothing.
pub fn bleu_n_with(pred: &str, gt: &str, n: usize, raw: bool) -> Result<f64> {
    if !(1..=4).contains(&n) {
        return Err(Error::Config(format!("BLEU order must be in 1..=4, got {n}")));
    }
    let sc = sentence_counts(pred, gt)?;
    let (_, _, bleu) = score_from_counts(&sc, raw);
    Ok(bleu[n - 1])
}

/// Full per-sentence score (precisions, brevity penalty, BLEU-1..4).
pub fn sentence_score(id: &str, gt: &str, pred: &str, raw: bool) -> Result<SentenceScore> {
    let sc = sentence_counts(pred, gt)?;
    let (p, bp, bleu) = score_from_counts(&sc, raw);
    Ok(SentenceScore {
        id: id.to_string(),
        gt: gt.to_string(),
        pred: pred.to_string(),
        p,
        bp,
        bleu: [
            round4(bleu[0]),
            round4(bleu[1]),
            round4(bleu[2]),
            round4(bleu[3]),
        ],
    })
}

/// Scores a list of `(gt, pred)` pairs.
pub fn corpus_report(pairs: &[(String, String)], opts: &BleuOptions) -> Result<BleuReport> {
    let records: Vec<PredRecord> = pairs
        .iter()
        .map(|(gt, pred)| PredRecord {
            id: String::new(),
            gt: gt.clone(),
            pred: pred.clone(),
        })
        .collect();
    corpus_report_records(&records, opts)
}

/// Scores prediction records, keeping their ids in the report.
pub fn corpus_report_records(records: &[PredRecord], opts: &BleuOptions) -> Result<BleuReport> {
    if records.is_empty() {
        return Err(Error::Config("corpus report needs at least one pair".into()));
    }
    let scored: Vec<Result<SentenceScore>> = exec::map_slice(opts.parallel, records, |r| {
        sentence_score(&r.id, &r.gt, &r.pred, opts.raw)
    });
    let sentences = scored.into_iter().collect::<Result<Vec<_>>>()?;

    let mean = match opts.corpus_mode {
        CorpusMode::Mean => {
            let mut acc = [0.0f64; 4];
            for s in &sentences {
                for (a, b) in acc.iter_mut().zip(s.bleu.iter()) {
                    *a += b;
                }
            }
            let n = sentences.len() as f64;
            [
                round4(acc[0] / n),
                round4(acc[1] / n),
                round4(acc[2] / n),
                round4(acc[3] / n),
            ]
        }
        CorpusMode::Micro => {
            let mut pooled = SentenceCounts {
                counts: [(0, 0); 4],
                cand_len: 0,
                ref_len: 0,
            };
            for r in records {
                let sc = sentence_counts(&r.pred, &r.gt)?;
                for (acc, got) in pooled.counts.iter_mut().zip(sc.counts.iter()) {
                    acc.0 += got.0;
                    acc.1 += got.1;
                }
                pooled.cand_len += sc.cand_len;
                pooled.ref_len += sc.ref_len;
            }
            let (_, _, bleu) = score_from_counts(&pooled, opts.raw);
            [
                round4(bleu[0]),
                round4(bleu[1]),
                round4(bleu[2]),
                round4(bleu[3]),
            ]
        }
    };

    Ok(BleuReport {
        format_version: 1,
        corpus_mode: opts.corpus_mode,
        raw: opts.raw,
        n: sentences.len(),
        mean,
        sentences,
    })
}

/// Display width of a char for table alignment (CJK and fullwidth count 2).
fn char_width(c: char) -> usize {
    let cp = c as u32;
    let wide = (0x1100..=0x115F).contains(&cp)
        || (0x2E80..=0xA4CF).contains(&cp)
        || (0xAC00..=0xD7A3).contains(&cp)
        || (0xF900..=0xFAFF).contains(&cp)
        || (0xFE30..=0xFE4F).contains(&cp)
        || (0xFF00..=0xFF60).contains(&cp)
        || (0xFFE0..=0xFFE6).contains(&cp);
    if wide {
        2
    } else {
        1
    }
}

fn display_width(s: &str) -> usize {
    s.chars().map(char_width).sum()
}

fn pad_to(s: &str, width: usize) -> String {
    let w = display_width(s);
    let mut out = s.to_string();
    out.extend(std::iter::repeat_n(' ', width.saturating_sub(w)));
    out
}

impl BleuReport {
    /// Plain-text table with one row per sentence and a mean row, columns
    /// GT | PR | BLEU-1..4.
    pub fn to_table(&self) -> String {
        let gt_w = self
            .sentences
            .iter()
            .map(|s| display_width(&s.gt))
            .chain([2])
            .max()
            .unwrap();
        let pr_w = self
            .sentences
            .iter()
            .map(|s| display_width(&s.pred))
            .chain([4])
            .max()
            .unwrap();
        let mut out = String::new();
        out.push_str(&format!(
            "{}  {}  BLEU-1  BLEU-2  BLEU-3  BLEU-4\n",
            pad_to("GT", gt_w),
            pad_to("PR", pr_w)
        ));
        for s in &self.sentences {
            out.push_str(&format!(
                "{}  {}  {:.4}  {:.4}  {:.4}  {:.4}\n",
                pad_to(&s.gt, gt_w),
                pad_to(&s.pred, pr_w),
                s.bleu[0],
                s.bleu[1],
                s.bleu[2],
                s.bleu[3]
            ));
        }
        out.push_str(&format!(
            "{}  {}  {:.4}  {:.4}  {:.4}  {:.4}\n",
            pad_to("mean", gt_w),
            pad_to(&format!("n={}", self.n), pr_w),
            self.mean[0],
            self.mean[1],
            self.mean[2],
            self.mean[3]
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent clipped-count oracle: scans positions directly, no hash
    /// maps, skipping duplicate windows by first occurrence.
    pub(crate) fn brute_force_precision(pred: &str, gt: &str, n: usize) -> (usize, usize) {
        let p: Vec<char> = pred.chars().collect();
        let g: Vec<char> = gt.chars().collect();
        if p.len() < n {
            return (0, 0);
        }
        let total = p.len() - n + 1;
        let mut matches = 0;
        for i in 0..total {
            let win = &p[i..i + n];
            let mut seen_before = false;
            for j in 0..i {
                if &p[j..j + n] == win {
                    seen_before = true;
                    break;
                }
            }
            if seen_before {
                continue;
            }
            let count_pred = (0..total).filter(|&j| &p[j..j + n] == win).count();
            let count_gt = if g.len() >= n {
                (0..=g.len() - n).filter(|&j| &g[j..j + n] == win).count()
            } else {
                0
            };
            matches += count_pred.min(count_gt);
        }
        (matches, total)
    }

    #[test]
    fn ngram_overlap_counting() {
        let g = char_ngrams("的的的", 2).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g["的的"], 2);

        let u = char_ngrams("全世界", 1).unwrap();
        assert_eq!(u.len(), 3);
        assert!(u.values().all(|&c| c == 1));

        assert!(char_ngrams("集", 2).unwrap().is_empty());
        assert!(matches!(char_ngrams("x", 0), Err(Error::Config(_))));
    }

    #[test]
    fn modified_precision_fixtures() {
        // Ten-fold 的 against a reference containing 的 twice.
        assert_eq!(
            modified_precision("的的的的的的的的的的", "同的习性，在严寒的冬天", 1).unwrap(),
            (2, 10)
        );
        // Single character 一 is the only overlap.
        assert_eq!(
            modified_precision("在草原东北端一块马蹄甲", "全世界的狼都有一个共", 1).unwrap(),
            (1, 11)
        );
        // Identity.
        assert_eq!(modified_precision("全世界", "全世界", 2).unwrap(), (2, 2));
        // Empty candidate is degenerate.
        assert_eq!(modified_precision("", "全世界", 1).unwrap(), (0, 0));
    }

    #[test]
    fn brevity_penalty_branches() {
        assert_eq!(brevity_penalty(11, 10), 1.0);
        assert_eq!(brevity_penalty(10, 10), 1.0);
        assert!((brevity_penalty(10, 11) - (-0.1f64).exp()).abs() < 1e-12);
        assert_eq!(brevity_penalty(0, 5), 0.0);
    }

    fn assert_row(gt: &str, pred: &str, expect: [&str; 4]) {
        for (i, want) in expect.iter().enumerate() {
            let got = bleu_n(pred, gt, i + 1).unwrap();
            assert_eq!(
                format!("{:.4}", got),
                *want,
                "BLEU-{} mismatch for gt={gt} pred={pred}",
                i + 1
            );
        }
    }

    #[test]
    fn paper_table_rows() {
        assert_row(
            "全世界的狼都有一个共",
            "在草原东北端一块马蹄甲",
            ["0.0909", "0.0302", "0.0216", "0.0189"],
        );
        assert_row(
            "同的习性，在严寒的冬天",
            "的的的的的的的的的的",
            ["0.1810", "0.0427", "0.0274", "0.0227"],
        );
        assert_row(
            "集合成群，平时单身独处。",
            "在草原东北端一块马蹄甲",
            ["0.0000", "0.0000", "0.0000", "0.0000"],
        );
        assert_row(
            "天，日曲卡雪山的狼群按",
            "的的的的的的的的的的",
            ["0.0905", "0.0302", "0.0218", "0.0191"],
        );
    }

    #[test]
    fn identity_scores_one() {
        let t = "全世界的狼";
        for n in 1..=4 {
            assert_eq!(bleu_n(t, t, n).unwrap(), 1.0);
        }
    }

    #[test]
    fn raw_mode_zeroes_unsmoothed_orders() {
        // One unigram overlap, no bigram overlap: raw BLEU-2 must be 0.
        let gt = "全世界的狼都有一个共";
        let pred = "在草原东北端一块马蹄甲";
        assert!(bleu_n_with(pred, gt, 1, true).unwrap() > 0.0);
        assert_eq!(bleu_n_with(pred, gt, 2, true).unwrap(), 0.0);
    }

    #[test]
    fn corpus_mean_of_two_rows() {
        let pairs = vec![
            (
                "全世界的狼都有一个共".to_string(),
                "的的的的的的的的的的".to_string(),
            ),
            (
                "集合成群，平时单身独处。".to_string(),
                "的的的的的的的的的的".to_string(),
            ),
        ];
        let report = corpus_report(&pairs, &BleuOptions::default()).unwrap();
        assert_eq!(report.n, 2);
        // Row scores are 0.1000 and 0.0000.
        assert_eq!(report.mean[0], 0.05);
    }

    #[test]
    fn corpus_single_pair_mean_equals_row() {
        let pairs = vec![(
            "同的习性，在严寒的冬天".to_string(),
            "的的的的的的的的的的".to_string(),
        )];
        let report = corpus_report(&pairs, &BleuOptions::default()).unwrap();
        assert_eq!(report.mean, report.sentences[0].bleu);
    }

    #[test]
    fn corpus_empty_rejected() {
        assert!(matches!(
            corpus_report(&[], &BleuOptions::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn micro_mode_pools_counts() {
        let pairs = vec![
            ("全世界".to_string(), "全世界".to_string()),
            ("狼群".to_string(), "狼群".to_string()),
        ];
        let opts = BleuOptions {
            corpus_mode: CorpusMode::Micro,
            ..Default::default()
        };
        let report = corpus_report(&pairs, &opts).unwrap();
        assert_eq!(report.mean[0], 1.0);
        assert_eq!(report.mean[1], 1.0);
    }

    #[test]
    fn table_renders_every_row() {
        let pairs = vec![(
            "全世界的狼都有一个共".to_string(),
            "在草原东北端一块马蹄甲".to_string(),
        )];
        let report = corpus_report(&pairs, &BleuOptions::default()).unwrap();
        let table = report.to_table();
        assert!(table.contains("0.0909"));
        assert!(table.contains("BLEU-4"));
    }

    proptest::proptest! {
        #[test]
        fn precision_matches_brute_force(
            pred in proptest::collection::vec(0usize..5, 0..13),
            gt in proptest::collection::vec(0usize..5, 0..13),
            n in 1usize..5,
        ) {
            let alphabet = ['甲', '乙', '丙', '丁', '戊'];
            let pred: String = pred.iter().map(|&i| alphabet[i]).collect();
            let gt: String = gt.iter().map(|&i| alphabet[i]).collect();
            let got = modified_precision(&pred, &gt, n).unwrap();
            let want = brute_force_precision(&pred, &gt, n);
            proptest::prop_assert_eq!(got, want);
        }

        #[test]
        fn scores_in_unit_interval(
            pred in proptest::collection::vec(0usize..5, 1..13),
            gt in proptest::collection::vec(0usize..5, 1..13),
        ) {
            let alphabet = ['甲', '乙', '丙', '丁', '戊'];
            let pred: String = pred.iter().map(|&i| alphabet[i]).collect();
            let gt: String = gt.iter().map(|&i| alphabet[i]).collect();
            for n in 1..=4 {
                let s = bleu_n(&pred, &gt, n).unwrap();
                proptest::prop_assert!((0.0..=1.0).contains(&s));
            }
        }
    }
}
