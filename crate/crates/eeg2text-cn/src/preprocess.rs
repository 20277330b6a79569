//! Preprocessing: character segmentation, PCA compression, fixed-length
//! padding with masks, and deterministic subject-aware dataset splits.
//!
//! A prepared directory contains `manifest.jsonl` (same record schema as a
//! raw corpus, but with shape `[n, 90, 8]`), the compressed float32le
//! arrays, `pca.json`, `splits.json`, and `vocab.json`.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, ArrayView2, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    self, read_manifest, write_f32_array, Corpus, CorpusEntry, RawSentenceEEG, DTYPE_F32LE,
};
use crate::error::{Error, Result};
use crate::exec;
use crate::pca::{apply_pca, fit_pca, PcaModel};
use crate::textcodec::Vocab;

pub const SAMPLE_RATE_HZ: usize = 256;
pub const CHAR_DURATION_S: f64 = 0.35;
/// Samples per character window: round(256 Hz x 0.35 s) = 90.
pub const SEGMENT_TIME: usize = 90;
pub const DEFAULT_PCA_COMPONENTS: usize = 8;
pub const DEFAULT_MAX_LEN_EEG: usize = 10;
pub const DEFAULT_MAX_LEN_TEXT: usize = 12;

pub const SPLITS_NAME: &str = "splits.json";
pub const PCA_NAME: &str = "pca.json";
pub const VOCAB_NAME: &str = "vocab.json";

/// Cuts a continuous recording `[channels, n_samples]` into consecutive
/// non-overlapping 90-sample character windows.
pub fn segment_characters(continuous: ArrayView2<f32>, n_chars: usize) -> Result<Array3<f32>> {
    let (channels, n_samples) = continuous.dim();
    let required = n_chars * SEGMENT_TIME;
    if n_samples < required {
        return Err(Error::Length(format!(
            "recording has {n_samples} samples but {n_chars} characters need {required} \
             (deficit {})",
            required - n_samples
        )));
    }
    Ok(Array3::from_shape_fn(
        (n_chars, channels, SEGMENT_TIME),
        |(i, c, t)| continuous[[c, i * SEGMENT_TIME + t]],
    ))
}

/// One training-ready sample: compressed EEG padded to a fixed character
/// count plus the token targets and both masks.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedSample {
    /// `[max_len_eeg, time, components]`; padded rows are exactly zero.
    pub eeg: Array3<f32>,
    /// true = real character position.
    pub src_mask: Vec<bool>,
    /// `[BOS, chars..., EOS, PAD...]`, length `max_len_text + 2`.
    pub target_ids: Vec<usize>,
    /// true exactly where `target_ids` is not PAD.
    pub tgt_mask: Vec<bool>,
    pub entry_id: String,
}

impl PaddedSample {
    pub fn n_chars_eeg(&self) -> usize {
        self.src_mask.iter().filter(|&&m| m).count()
    }
}

/// Pads a compressed sentence `[n, time, components]` and encodes its text.
pub fn pad_and_mask(
    compressed: ArrayView3<f32>,
    text: &str,
    vocab: &Vocab,
    max_len_eeg: usize,
    max_len_text: usize,
    entry_id: &str,
) -> Result<PaddedSample> {
    let (n, time, comps) = compressed.dim();
    if n == 0 {
        return Err(Error::Length("sentence has no EEG characters".into()));
    }
    if n > max_len_eeg {
        return Err(Error::Length(format!(
            "sentence has {n} EEG characters, maximum is {max_len_eeg}"
        )));
    }
    let n_text = text.chars().count();
    if n_text > max_len_text {
        return Err(Error::Length(format!(
            "text has {n_text} characters, maximum is {max_len_text}"
        )));
    }

    let mut eeg = Array3::<f32>::zeros((max_len_eeg, time, comps));
    for i in 0..n {
        eeg.index_axis_mut(Axis(0), i)
            .assign(&compressed.index_axis(Axis(0), i));
    }
    let mut src_mask = vec![false; max_len_eeg];
    src_mask[..n].fill(true);

    let encoded = vocab.encode_chars(text)?; // BOS ... EOS
    let full = max_len_text + 2;
    let mut target_ids = vec![vocab.pad_id; full];
    target_ids[..encoded.len()].copy_from_slice(&encoded);
    let mut tgt_mask = vec![false; full];
    tgt_mask[..encoded.len()].fill(true);

    Ok(PaddedSample {
        eeg,
        src_mask,
        target_ids,
        tgt_mask,
        entry_id: entry_id.to_string(),
    })
}

/// Subject-aware split specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_subjects: Vec<String>,
    pub test_subjects: Vec<String>,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_subjects: vec!["sub-01".into()],
            test_subjects: vec![],
            val_fraction: 0.2,
            seed: 7,
        }
    }
}

/// Entry-id lists per split, each in manifest order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Splits {
    pub fn get(&self, split: SplitId) -> &[String] {
        match split {
            SplitId::Train => &self.train,
            SplitId::Val => &self.val,
            SplitId::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitId {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for SplitId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitId::Train),
            "val" => Ok(SplitId::Val),
            "test" => Ok(SplitId::Test),
            other => Err(Error::Config(format!(
                "unknown split `{other}` (expected train|val|test)"
            ))),
        }
    }
}

impl std::fmt::Display for SplitId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SplitId::Train => "train",
            SplitId::Val => "val",
            SplitId::Test => "test",
        })
    }
}

/// Splits entries into train/val/test ids.
///
/// All test-subject entries go to test (manifest order). The remaining
/// entries are shuffled with `spec.seed`; the first round(val_fraction x n)
/// become validation. Train and val ids are then restored to manifest order.
pub fn split_dataset(entries: &[CorpusEntry], spec: &SplitSpec) -> Result<Splits> {
    if !(spec.val_fraction > 0.0 && spec.val_fraction < 1.0) {
        return Err(Error::Config(format!(
            "val_fraction must lie in (0,1), got {}",
            spec.val_fraction
        )));
    }
    let train_set: HashSet<&str> = spec.train_subjects.iter().map(|s| s.as_str()).collect();
    let test_set: HashSet<&str> = spec.test_subjects.iter().map(|s| s.as_str()).collect();
    if let Some(both) = train_set.intersection(&test_set).next() {
        return Err(Error::Config(format!(
            "subject `{both}` appears in both train_subjects and test_subjects"
        )));
    }

    let mut test = Vec::new();
    let mut rest: Vec<usize> = Vec::new(); // manifest indices
    for (i, e) in entries.iter().enumerate() {
        if test_set.contains(e.subject.as_str()) {
            test.push(e.id.clone());
        } else if train_set.contains(e.subject.as_str()) {
            rest.push(i);
        } else {
            return Err(Error::Data(format!(
                "subject `{}` (entry `{}`) is in neither train_subjects nor test_subjects",
                e.subject, e.id
            )));
        }
    }

    let mut shuffled = rest.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    shuffled.shuffle(&mut rng);
    let n_val = (spec.val_fraction * shuffled.len() as f64).round() as usize;
    let val_idx: HashSet<usize> = shuffled.iter().take(n_val).copied().collect();

    let mut train = Vec::new();
    let mut val = Vec::new();
    for i in rest {
        if val_idx.contains(&i) {
            val.push(entries[i].id.clone());
        } else {
            train.push(entries[i].id.clone());
        }
    }
    Ok(Splits { train, val, test })
}

#[derive(Serialize, Deserialize)]
struct SplitsFile {
    format_version: u32,
    seed: u64,
    val_fraction: f64,
    train: Vec<String>,
    val: Vec<String>,
    test: Vec<String>,
}

pub fn save_splits(path: &Path, splits: &Splits, spec: &SplitSpec) -> Result<()> {
    let file = SplitsFile {
        format_version: 1,
        seed: spec.seed,
        val_fraction: spec.val_fraction,
        train: splits.train.clone(),
        val: splits.val.clone(),
        test: splits.test.clone(),
    };
    let mut s = serde_json::to_string_pretty(&file).expect("serializable splits");
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn load_splits(path: &Path) -> Result<Splits> {
    let raw = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    let file: SplitsFile = serde_json::from_str(&raw).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        line: 0,
        msg: e.to_string(),
    })?;
    Ok(Splits {
        train: file.train,
        val: file.val,
        test: file.test,
    })
}

/// Options for [`prepare_corpus`].
#[derive(Debug, Clone)]
pub struct PrepareOptions {
    pub k_components: usize,
    pub split: SplitSpec,
    pub parallel: bool,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        Self {
            k_components: DEFAULT_PCA_COMPONENTS,
            split: SplitSpec::default(),
            parallel: true,
        }
    }
}

/// A prepared dataset loaded back from disk.
#[derive(Debug, Clone)]
pub struct PreparedDataset {
    pub corpus: Corpus,
    pub pca: PcaModel,
    pub splits: Splits,
    pub vocab: Vocab,
}

impl PreparedDataset {
    /// Entries of one split, in the order recorded in `splits.json`.
    pub fn entries_for(&self, split: SplitId) -> Result<Vec<&CorpusEntry>> {
        self.splits
            .get(split)
            .iter()
            .map(|id| {
                self.corpus.entry_by_id(id).ok_or_else(|| Error::Integrity {
                    id: id.clone(),
                    msg: format!("listed in splits.json ({split}) but missing from manifest"),
                })
            })
            .collect()
    }

    /// Loads one entry's compressed EEG and builds its padded sample.
    pub fn padded_sample(
        &self,
        entry: &CorpusEntry,
        max_len_eeg: usize,
        max_len_text: usize,
    ) -> Result<PaddedSample> {
        let rec = self.corpus.load_recording(entry)?;
        pad_and_mask(
            rec.data.view(),
            &entry.text,
            &self.vocab,
            max_len_eeg,
            max_len_text,
            &entry.id,
        )
    }

    /// All padded samples of a split (parallel across sentences).
    pub fn padded_split(
        &self,
        split: SplitId,
        max_len_eeg: usize,
        max_len_text: usize,
        parallel: bool,
    ) -> Result<Vec<PaddedSample>> {
        let entries = self.entries_for(split)?;
        exec::map_slice(parallel, &entries, |e| {
            self.padded_sample(e, max_len_eeg, max_len_text)
        })
        .into_iter()
        .collect()
    }
}

/// Reads a raw corpus, fits PCA on the train split, writes the compressed
/// corpus plus `pca.json`, `splits.json`, and `vocab.json` into `out_dir`.
pub fn prepare_corpus(
    corpus_dir: &Path,
    out_dir: &Path,
    opts: &PrepareOptions,
) -> Result<PreparedDataset> {
    let raw = read_manifest(corpus_dir)?;
    for e in &raw.entries {
        e.validate_raw()?;
    }
    let splits = split_dataset(&raw.entries, &opts.split)?;

    // Fit PCA on the pooled training sentences only.
    let train_ids: HashSet<&str> = splits.train.iter().map(|s| s.as_str()).collect();
    let train_data: Vec<Array3<f32>> = raw
        .entries
        .iter()
        .filter(|e| train_ids.contains(e.id.as_str()))
        .map(|e| raw.load_recording(e).map(|r| r.data))
        .collect::<Result<_>>()?;
    let pca = fit_pca(&train_data, opts.k_components, "train")?;

    // Compress every sentence (any split) with the train-fitted transform.
    fs::create_dir_all(out_dir.join("eeg")).map_err(|e| Error::io(out_dir, e))?;
    let compressed: Vec<(CorpusEntry, Array3<f32>)> =
        exec::map_slice(opts.parallel, &raw.entries, |entry| -> Result<_> {
            let rec: RawSentenceEEG = raw.load_recording(entry)?;
            let n = rec.data.shape()[0];
            let time = rec.data.shape()[2];
            let mut out = Array3::<f32>::zeros((n, time, opts.k_components));
            for i in 0..n {
                let proj = apply_pca(&pca, rec.data.index_axis(Axis(0), i))?;
                out.index_axis_mut(Axis(0), i).assign(&proj);
            }
            let mut meta = entry.clone();
            meta.shape = vec![n, time, opts.k_components];
            meta.dtype = DTYPE_F32LE.to_string();
            Ok((meta, out))
        })
        .into_iter()
        .collect::<Result<_>>()?;

    let mut manifest = String::new();
    for (meta, data) in &compressed {
        write_f32_array(&out_dir.join(&meta.eeg_path), data)?;
        manifest.push_str(&serde_json::to_string(meta).expect("serializable entry"));
        manifest.push('\n');
    }
    fs::write(out_dir.join(corpus::MANIFEST_NAME), manifest)
        .map_err(|e| Error::io(out_dir, e))?;

    pca.save(&out_dir.join(PCA_NAME))?;
    save_splits(&out_dir.join(SPLITS_NAME), &splits, &opts.split)?;
    // Label space comes from the training split only; out-of-vocabulary
    // characters in val/test map to UNK.
    let texts: Vec<&str> = raw
        .entries
        .iter()
        .filter(|e| train_ids.contains(e.id.as_str()))
        .map(|e| e.text.as_str())
        .collect();
    let vocab = Vocab::build(&texts)?;
    vocab.save(&out_dir.join(VOCAB_NAME))?;

    load_prepared(out_dir)
}

/// Loads a prepared directory produced by [`prepare_corpus`].
pub fn load_prepared(dir: &Path) -> Result<PreparedDataset> {
    let corpus = read_manifest(dir)?;
    let pca = PcaModel::load(&dir.join(PCA_NAME))?;
    let splits = load_splits(&dir.join(SPLITS_NAME))?;
    let vocab = Vocab::load(&dir.join(VOCAB_NAME))?;
    // Every split id must resolve to a manifest entry.
    let ds = PreparedDataset {
        corpus,
        pca,
        splits,
        vocab,
    };
    for split in [SplitId::Train, SplitId::Val, SplitId::Test] {
        ds.entries_for(split)?;
    }
    Ok(ds)
}

pub fn prepared_paths(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    (
        dir.join(PCA_NAME),
        dir.join(SPLITS_NAME),
        dir.join(VOCAB_NAME),
    )
}
