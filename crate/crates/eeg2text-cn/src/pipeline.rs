//! Stage drivers behind the CLI subcommands. Each function is callable as a
//! library API and returns a summary the binary prints; all file outputs are
//! deterministic functions of the config (timestamps excluded).

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array1;

use crate::bleu::{corpus_report_records, BleuOptions, BleuReport, PredRecord};
use crate::checkpoint::load_checkpoint;
use crate::config::ExperimentConfig;
use crate::corpus::{generate_synthetic_corpus, CorpusEntry};
use crate::error::{Error, Result};
use crate::exec;
use crate::model::{ModelConfig, ModelParams};
use crate::preprocess::{load_prepared, prepare_corpus, PreparedDataset, SplitId};
use crate::textcodec::{embed_text, HashEmbedder, Vocab};
use crate::training::{
    ablation_labels, ablation_predict, greedy_decode, train, Datasets, SampleSet, TrainHistory,
    TrainMode, TrainOutcome,
};

/// Wraps corpus generation; returns the entries written.
pub fn run_synth(cfg: &ExperimentConfig) -> Result<Vec<CorpusEntry>> {
    generate_synthetic_corpus(&cfg.synth, &cfg.paths.corpus_dir)
}

#[derive(Debug, Clone)]
pub struct PrepareSummary {
    pub n_entries: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub vocab_size: usize,
    pub k_components: usize,
    pub out_dir: PathBuf,
}

/// Segments/compresses the raw corpus and writes the prepared directory.
pub fn run_prepare(cfg: &ExperimentConfig) -> Result<PrepareSummary> {
    let ds = prepare_corpus(
        &cfg.paths.corpus_dir,
        &cfg.paths.prepared_dir,
        &cfg.prepare.to_options(),
    )?;
    Ok(PrepareSummary {
        n_entries: ds.corpus.entries.len(),
        n_train: ds.splits.train.len(),
        n_val: ds.splits.val.len(),
        n_test: ds.splits.test.len(),
        vocab_size: ds.vocab.size(),
        k_components: cfg.prepare.k_components,
        out_dir: cfg.paths.prepared_dir.clone(),
    })
}

/// Resolves the model architecture against a prepared dataset: vocabulary
/// size always comes from the prepared vocab, and the per-character segment
/// shape must match the compressed arrays.
fn resolve_model_config(cfg: &ExperimentConfig, ds: &PreparedDataset) -> Result<ModelConfig> {
    let mut mcfg = cfg.model.clone();
    mcfg.vocab_size = ds.vocab.size();
    if let Some(entry) = ds.corpus.entries.first() {
        let (time, comps) = (entry.shape[1], entry.shape[2]);
        if mcfg.segment_time != time || mcfg.segment_components != comps {
            return Err(Error::Config(format!(
                "model expects segments [{} x {}] but prepared data is [{time} x {comps}]; \
                 set model.segment_time / model.segment_components to match",
                mcfg.segment_time, mcfg.segment_components
            )));
        }
    }
    mcfg.validate()?;
    Ok(mcfg)
}

/// Loads one split with its index-aligned texts and subjects.
fn sample_set(ds: &PreparedDataset, split: SplitId, mcfg: &ModelConfig, parallel: bool) -> Result<SampleSet> {
    let entries = ds.entries_for(split)?;
    let samples = ds.padded_split(split, mcfg.max_len_eeg, mcfg.max_len_text, parallel)?;
    Ok(SampleSet {
        samples,
        texts: entries.iter().map(|e| e.text.clone()).collect(),
        subjects: entries.iter().map(|e| e.subject.clone()).collect(),
    })
}

fn load_datasets(ds: &PreparedDataset, mcfg: &ModelConfig, parallel: bool) -> Result<Datasets> {
    let train = sample_set(ds, SplitId::Train, mcfg, parallel)?;
    let val = sample_set(ds, SplitId::Val, mcfg, parallel)?;
    // The held-out subjects are read off the actual test entries, not the
    // config, so a stale prepared directory cannot dodge the leakage check.
    let mut test_subjects: Vec<String> = ds
        .entries_for(SplitId::Test)?
        .iter()
        .map(|e| e.subject.clone())
        .collect();
    test_subjects.sort();
    test_subjects.dedup();
    Ok(Datasets {
        train,
        val,
        test_subjects,
    })
}

#[derive(Debug)]
pub struct TrainSummary {
    pub outcome: TrainOutcome,
    pub n_train: usize,
    pub n_val: usize,
    pub run_dir: PathBuf,
}

impl TrainSummary {
    /// (epoch, val BLEU-1) of the saved best checkpoint.
    pub fn best(&self) -> (usize, f64) {
        let e = self.outcome.best_epoch;
        let b1 = self
            .outcome
            .history
            .records
            .iter()
            .find(|r| r.epoch == e)
            .and_then(|r| r.val_bleu1)
            .unwrap_or(0.0);
        (e, b1)
    }
}

/// Trains the full encoder-decoder on the prepared data.
pub fn run_train(cfg: &ExperimentConfig) -> Result<TrainSummary> {
    let ds = load_prepared(&cfg.paths.prepared_dir)?;
    let mcfg = resolve_model_config(cfg, &ds)?;
    let data = load_datasets(&ds, &mcfg, cfg.train.parallel)?;

    // Frozen text embeddings are only needed for the contrastive term.
    let embs: Option<Vec<Array1<f32>>> = if cfg.train.contrastive_weight > 0.0 {
        let embedder = HashEmbedder::new(mcfg.d_model, mcfg.seed);
        Some(
            data.train
                .texts
                .iter()
                .map(|t| embed_text(&embedder, t).map(Array1::from))
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };

    let outcome = train(
        &mcfg,
        &cfg.train,
        &data,
        TrainMode::Seq2Seq,
        &ds.vocab,
        embs.as_deref(),
    )?;
    Ok(TrainSummary {
        n_train: data.train.samples.len(),
        n_val: data.val.samples.len(),
        run_dir: cfg.train.checkpoint_dir.clone(),
        outcome,
    })
}

#[derive(Debug)]
pub struct AblateSummary {
    pub outcome: TrainOutcome,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub run_dir: PathBuf,
}

/// Fraction of valid EEG positions whose per-position argmax equals the
/// displayed character, over a whole sample set.
pub fn ablation_accuracy(
    params: &ModelParams<f32>,
    mcfg: &ModelConfig,
    set: &SampleSet,
    vocab: &Vocab,
) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (sample, text) in set.samples.iter().zip(&set.texts) {
        let n = sample.n_chars_eeg();
        let (ids, _) = ablation_labels(vocab, text, n, mcfg.max_len_eeg)?;
        let pred = ablation_predict(params, mcfg, sample)?;
        hits += pred.iter().zip(&ids[..n]).filter(|(p, l)| p == l).count();
        total += n;
    }
    if total == 0 {
        return Err(Error::Data("no valid positions to score".into()));
    }
    Ok(hits as f64 / total as f64)
}

/// Trains the encoder-only variant (per-position classifier) and reports
/// its per-position accuracy with the best checkpoint. Outputs default to
/// `<train.checkpoint_dir>/ablation`; pass `out_dir` to redirect them.
pub fn run_ablate(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<AblateSummary> {
    let ds = load_prepared(&cfg.paths.prepared_dir)?;
    let mcfg = resolve_model_config(cfg, &ds)?;
    let data = load_datasets(&ds, &mcfg, cfg.train.parallel)?;

    let mut tcfg = cfg.train.clone();
    tcfg.checkpoint_dir = out_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.train.checkpoint_dir.join("ablation"));
    let outcome = train(&mcfg, &tcfg, &data, TrainMode::EncoderOnly, &ds.vocab, None)?;

    let (best_params, best_cfg) = load_checkpoint(&outcome.best_checkpoint)?;
    let train_accuracy = ablation_accuracy(&best_params, &best_cfg, &data.train, &ds.vocab)?;
    let val_accuracy = ablation_accuracy(&best_params, &best_cfg, &data.val, &ds.vocab)?;

    let summary_path = tcfg.checkpoint_dir.join("ablation_summary.json");
    let summary = serde_json::json!({
        "format_version": 1,
        "best_epoch": outcome.best_epoch,
        "train_accuracy": train_accuracy,
        "val_accuracy": val_accuracy,
    });
    fs::write(
        &summary_path,
        serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n",
    )
    .map_err(|e| Error::io(&summary_path, e))?;

    Ok(AblateSummary {
        outcome,
        train_accuracy,
        val_accuracy,
        run_dir: tcfg.checkpoint_dir,
    })
}

/// Resolves `eval.checkpoint` (`best`, `last`, or a path) against the run
/// directory.
pub fn resolve_checkpoint(cfg: &ExperimentConfig) -> PathBuf {
    match cfg.eval.checkpoint.as_str() {
        "best" => cfg.train.checkpoint_dir.join("best.ckpt"),
        "last" => cfg.train.checkpoint_dir.join("last.ckpt"),
        path => PathBuf::from(path),
    }
}

#[derive(Debug)]
pub struct EvalSummary {
    pub report: BleuReport,
    pub checkpoint: PathBuf,
    pub predictions_path: PathBuf,
    pub report_json_path: PathBuf,
    pub report_table_path: PathBuf,
}

/// Greedy-decodes one split with a trained checkpoint and writes
/// `predictions.jsonl`, `report.json`, and `report.txt`.
pub fn run_evaluate(cfg: &ExperimentConfig) -> Result<EvalSummary> {
    let ds = load_prepared(&cfg.paths.prepared_dir)?;
    let ckpt_path = resolve_checkpoint(cfg);
    let (params, mcfg) = load_checkpoint(&ckpt_path)?;
    if mcfg.vocab_size != ds.vocab.size() {
        return Err(Error::Config(format!(
            "checkpoint was trained with vocab size {} but the prepared data has {}",
            mcfg.vocab_size,
            ds.vocab.size()
        )));
    }

    let split: SplitId = cfg.eval.split.parse()?;
    let entries = ds.entries_for(split)?;
    if entries.is_empty() {
        return Err(Error::Data(format!(
            "split {split} has no samples; nothing to evaluate"
        )));
    }
    let samples = ds.padded_split(split, mcfg.max_len_eeg, mcfg.max_len_text, cfg.eval.parallel)?;

    let preds: Vec<String> = exec::map_slice(cfg.eval.parallel, &samples, |s| -> Result<String> {
        let ids = greedy_decode(&params, &mcfg, s, mcfg.max_len_text)?;
        ds.vocab.decode_ids(&ids)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let records: Vec<PredRecord> = entries
        .iter()
        .zip(preds)
        .map(|(e, pred)| PredRecord {
            id: e.id.clone(),
            gt: e.text.clone(),
            pred,
        })
        .collect();

    let opts = BleuOptions {
        raw: cfg.eval.raw,
        corpus_mode: cfg.eval.corpus_mode,
        parallel: cfg.eval.parallel,
    };
    let report = corpus_report_records(&records, &opts)?;

    let out_dir = cfg
        .eval
        .out_dir
        .clone()
        .unwrap_or_else(|| cfg.train.checkpoint_dir.join("eval"));
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let predictions_path = out_dir.join("predictions.jsonl");
    let mut lines = String::new();
    for r in &records {
        lines.push_str(&serde_json::to_string(r).expect("record serializes"));
        lines.push('\n');
    }
    fs::write(&predictions_path, lines).map_err(|e| Error::io(&predictions_path, e))?;
    let (report_json_path, report_table_path) = write_report(&report, &out_dir)?;

    Ok(EvalSummary {
        report,
        checkpoint: ckpt_path,
        predictions_path,
        report_json_path,
        report_table_path,
    })
}

/// Reads a predictions JSONL file: one `{id, gt, pred}` object per line.
pub fn read_predictions(path: &Path) -> Result<Vec<PredRecord>> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: PredRecord = serde_json::from_str(line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        records.push(r);
    }
    if records.is_empty() {
        return Err(Error::Data(format!(
            "{} contains no prediction records",
            path.display()
        )));
    }
    Ok(records)
}

/// Scores an existing predictions file and writes `report.json` +
/// `report.txt` (defaulting next to the input file).
pub fn run_bleu(
    cfg: &ExperimentConfig,
    pred_path: &Path,
    out_dir: Option<&Path>,
) -> Result<(BleuReport, PathBuf, PathBuf)> {
    let records = read_predictions(pred_path)?;
    let opts = BleuOptions {
        raw: cfg.eval.raw,
        corpus_mode: cfg.eval.corpus_mode,
        parallel: cfg.eval.parallel,
    };
    let report = corpus_report_records(&records, &opts)?;
    let dir = out_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| pred_path.parent().unwrap_or(Path::new(".")).to_path_buf());
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let (json_path, table_path) = write_report(&report, &dir)?;
    Ok((report, json_path, table_path))
}

fn write_report(report: &BleuReport, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let json_path = dir.join("report.json");
    let table_path = dir.join("report.txt");
    fs::write(
        &json_path,
        serde_json::to_string_pretty(report).expect("report serializes") + "\n",
    )
    .map_err(|e| Error::io(&json_path, e))?;
    fs::write(&table_path, report.to_table()).map_err(|e| Error::io(&table_path, e))?;
    Ok((json_path, table_path))
}

/// Loads a run's history file.
pub fn load_history(run_dir: &Path) -> Result<TrainHistory> {
    TrainHistory::load(&run_dir.join("history.jsonl"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SynthConfig;
    use tempfile::TempDir;

    /// A small but learnable end-to-end configuration used by the stage
    /// tests: 6-char vocab, 12 sentences, 2 subjects with one held out.
    fn tiny_experiment(root: &Path) -> ExperimentConfig {
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
        cfg.prepare.split.train_subjects = vec!["sub-01".into()];
        cfg.prepare.split.test_subjects = vec!["sub-02".into()];
        cfg.prepare.split.val_fraction = 0.34;
        cfg.prepare.k_components = 4;
        cfg.model.d_model = 16;
        cfg.model.conv_out_channels = 8;
        cfg.model.n_encoder_layers = 1;
        cfg.model.n_decoder_layers = 1;
        cfg.model.n_heads = 2;
        cfg.model.ffn_dim = 32;
        cfg.model.dropout = 0.0;
        cfg.model.segment_components = 4;
        cfg.train.epochs = 2;
        cfg.train.batch_size = 4;
        cfg.train.learning_rate = 1e-3;
        cfg.train.checkpoint_dir = root.join("run");
        cfg
    }

    #[test]
    fn stages_compose_end_to_end() {
        let dir = TempDir::new().unwrap();
        let mut cfg = tiny_experiment(dir.path());

        let entries = run_synth(&cfg).unwrap();
        assert_eq!(entries.len(), 12);

        let prep = run_prepare(&cfg).unwrap();
        assert_eq!(prep.n_entries, 12);
        assert_eq!(prep.n_train + prep.n_val + prep.n_test, 12);
        assert!(prep.n_test > 0);

        let summary = run_train(&cfg).unwrap();
        assert_eq!(summary.outcome.history.records.len(), 2);
        assert!(summary.outcome.best_checkpoint.is_file());
        assert!(summary.outcome.last_checkpoint.is_file());
        assert!(load_history(&summary.run_dir).is_ok());

        let eval = run_evaluate(&cfg).unwrap();
        assert_eq!(eval.report.n, prep.n_test);
        assert!(eval.predictions_path.is_file());
        assert!(eval.report_json_path.is_file());
        assert!(eval.report_table_path.is_file());

        // Rescoring the written predictions reproduces the same means.
        let (rescored, _, _) = run_bleu(&cfg, &eval.predictions_path, None).unwrap();
        assert_eq!(rescored.mean, eval.report.mean);
        assert_eq!(rescored.n, eval.report.n);

        // The ablation writes into its own subdirectory with a summary.
        cfg.train.epochs = 1;
        let ab = run_ablate(&cfg, None).unwrap();
        assert_eq!(ab.run_dir, cfg.train.checkpoint_dir.join("ablation"));
        assert!(ab.run_dir.join("ablation_summary.json").is_file());
        assert!((0.0..=1.0).contains(&ab.train_accuracy));
        assert!((0.0..=1.0).contains(&ab.val_accuracy));
    }

    #[test]
    fn evaluate_requires_a_checkpoint() {
        let dir = TempDir::new().unwrap();
        let cfg = tiny_experiment(dir.path());
        run_synth(&cfg).unwrap();
        run_prepare(&cfg).unwrap();
        let err = run_evaluate(&cfg).unwrap_err();
        assert!(matches!(err, Error::NotFound(_)));
    }

    #[test]
    fn model_segment_shape_mismatch_is_rejected() {
        let dir = TempDir::new().unwrap();
        let mut cfg = tiny_experiment(dir.path());
        run_synth(&cfg).unwrap();
        run_prepare(&cfg).unwrap();
        cfg.model.segment_components = 8; // prepared data has 4
        let err = run_train(&cfg).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn checkpoint_keywords_resolve_against_run_dir() {
        let mut cfg = ExperimentConfig::default();
        cfg.train.checkpoint_dir = PathBuf::from("runs/x");
        assert_eq!(resolve_checkpoint(&cfg), PathBuf::from("runs/x/best.ckpt"));
        cfg.eval.checkpoint = "last".into();
        assert_eq!(resolve_checkpoint(&cfg), PathBuf::from("runs/x/last.ckpt"));
        cfg.eval.checkpoint = "elsewhere/epoch9.ckpt".into();
        assert_eq!(
            resolve_checkpoint(&cfg),
            PathBuf::from("elsewhere/epoch9.ckpt")
        );
    }

    #[test]
    fn predictions_file_errors_are_precise() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("preds.jsonl");
        assert!(matches!(
            read_predictions(&path).unwrap_err(),
            Error::NotFound(_)
        ));
        fs::write(&path, "{\"id\":\"a\",\"gt\":\"x\",\"pred\":\"y\"}\nnot json\n").unwrap();
        match read_predictions(&path).unwrap_err() {
            Error::Format { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        fs::write(&path, "\n\n").unwrap();
        assert!(matches!(read_predictions(&path).unwrap_err(), Error::Data(_)));
    }
}
