//! Corpus interchange format and synthetic corpus generation.
//!
//! A corpus directory holds `manifest.jsonl` (one JSON record per line) and
//! raw binary EEG files: little-endian float32, row-major, index order
//! (character, channel, time), no header. The layout is documented in
//! `corpus_format.md` at the repository root.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.jsonl";
pub const DTYPE_F32LE: &str = "float32le";
pub const RAW_CHANNELS: usize = 128;
pub const SEGMENT_TIME: usize = 90;

/// Default 30-character synthetic vocabulary (common Chinese characters).
pub const DEFAULT_SYNTH_VOCAB: &str =
    "的一是在不了有和人这中大为上个国我以要他时来用们生到作地于出";

/// One manifest record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub id: String,
    pub subject: String,
    pub chapter: u32,
    pub segment_index: u32,
    pub text: String,
    pub n_chars_eeg: usize,
    pub eeg_path: String,
    pub dtype: String,
    pub shape: Vec<usize>,
}

impl CorpusEntry {
    pub fn n_elements(&self) -> usize {
        self.shape.iter().product()
    }

    /// Checks the invariants every manifest record must satisfy.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Error::Integrity {
            id: self.id.clone(),
            msg,
        };
        if self.chapter < 1 {
            return Err(fail(format!("chapter must be >= 1, got {}", self.chapter)));
        }
        if self.n_chars_eeg < 1 {
            return Err(fail("n_chars_eeg must be >= 1".into()));
        }
        let text_chars = self.text.chars().count();
        if self.n_chars_eeg > text_chars {
            return Err(fail(format!(
                "n_chars_eeg {} exceeds text length {} ",
                self.n_chars_eeg, text_chars
            )));
        }
        if self.dtype != DTYPE_F32LE {
            return Err(fail(format!("unsupported dtype `{}`", self.dtype)));
        }
        if self.shape.len() != 3 {
            return Err(fail(format!("shape must have 3 dims, got {:?}", self.shape)));
        }
        if self.shape[0] != self.n_chars_eeg {
            return Err(fail(format!(
                "shape[0] {} disagrees with n_chars_eeg {}",
                self.shape[0], self.n_chars_eeg
            )));
        }
        Ok(())
    }

    /// Additionally requires the raw-recording shape `[n, 128, 90]`.
    pub fn validate_raw(&self) -> Result<()> {
        self.validate()?;
        if self.shape[1] != RAW_CHANNELS || self.shape[2] != SEGMENT_TIME {
            return Err(Error::Integrity {
                id: self.id.clone(),
                msg: format!(
                    "raw entry must have shape [n, {RAW_CHANNELS}, {SEGMENT_TIME}], got {:?}",
                    self.shape
                ),
            });
        }
        Ok(())
    }
}

/// One sentence's uncompressed EEG plus its manifest record.
#[derive(Debug, Clone)]
pub struct RawSentenceEEG {
    pub entry: CorpusEntry,
    /// `[n_chars_eeg, channels, time]`, microvolts.
    pub data: Array3<f32>,
}

/// A corpus directory with its validated manifest.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub dir: PathBuf,
    pub entries: Vec<CorpusEntry>,
}

/// Reads and validates `manifest.jsonl`, returning entries in file order.
pub fn read_manifest(corpus_dir: &Path) -> Result<Corpus> {
    let manifest_path = corpus_dir.join(MANIFEST_NAME);
    let raw = fs::read_to_string(&manifest_path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(manifest_path.clone()),
        _ => Error::io(&manifest_path, e),
    })?;
    let mut entries = Vec::new();
    let mut seen_ids = HashSet::new();
    for (lineno, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: CorpusEntry = serde_json::from_str(line).map_err(|e| Error::Format {
            path: manifest_path.clone(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        entry.validate()?;
        if !seen_ids.insert(entry.id.clone()) {
            return Err(Error::Integrity {
                id: entry.id.clone(),
                msg: "duplicate id in manifest".into(),
            });
        }
        let eeg_path = corpus_dir.join(&entry.eeg_path);
        let meta = fs::metadata(&eeg_path).map_err(|_| Error::Integrity {
            id: entry.id.clone(),
            msg: format!("missing EEG file {}", entry.eeg_path),
        })?;
        let expected = entry.n_elements() as u64 * 4;
        if meta.len() != expected {
            return Err(Error::Integrity {
                id: entry.id.clone(),
                msg: format!(
                    "EEG file {} has {} bytes, expected {expected} for shape {:?}",
                    entry.eeg_path,
                    meta.len(),
                    entry.shape
                ),
            });
        }
        entries.push(entry);
    }
    Ok(Corpus {
        dir: corpus_dir.to_path_buf(),
        entries,
    })
}

/// Reads a raw float32le array file of the given 3-d shape.
pub fn read_f32_array(path: &Path, shape: [usize; 3]) -> Result<Array3<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let n: usize = shape.iter().product();
    if bytes.len() != n * 4 {
        return Err(Error::Shape(format!(
            "{} has {} bytes, expected {} for shape {:?}",
            path.display(),
            bytes.len(),
            n * 4,
            shape
        )));
    }
    let mut floats = vec![0f32; n];
    LittleEndian::read_f32_into(&bytes, &mut floats);
    Array3::from_shape_vec(shape, floats)
        .map_err(|e| Error::Shape(format!("{}: {e}", path.display())))
}

/// Writes a 3-d array as raw float32le, row-major.
pub fn write_f32_array(path: &Path, data: &Array3<f32>) -> Result<()> {
    let standard = data.as_standard_layout();
    let slice = standard.as_slice().expect("standard layout");
    let mut bytes = vec![0u8; slice.len() * 4];
    LittleEndian::write_f32_into(slice, &mut bytes);
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

impl Corpus {
    /// Loads one entry's EEG array, verifying shape and finiteness.
    pub fn load_recording(&self, entry: &CorpusEntry) -> Result<RawSentenceEEG> {
        let path = self.dir.join(&entry.eeg_path);
        let shape = [entry.shape[0], entry.shape[1], entry.shape[2]];
        let data = read_f32_array(&path, shape)?;
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Integrity {
                id: entry.id.clone(),
                msg: "EEG data contains NaN or Inf".into(),
            });
        }
        Ok(RawSentenceEEG {
            entry: entry.clone(),
            data,
        })
    }

    pub fn entry_by_id(&self, id: &str) -> Option<&CorpusEntry> {
        self.entries.iter().find(|e| e.id == id)
    }
}

/// Writes entries + arrays into `dir` as a complete corpus.
pub fn write_corpus(dir: &Path, items: &[(CorpusEntry, Array3<f32>)]) -> Result<()> {
    fs::create_dir_all(dir.join("eeg")).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for (entry, data) in items {
        entry.validate()?;
        write_f32_array(&dir.join(&entry.eeg_path), data)?;
        manifest.push_str(&serde_json::to_string(entry).expect("serializable entry"));
        manifest.push('\n');
    }
    fs::write(dir.join(MANIFEST_NAME), manifest).map_err(|e| Error::io(dir, e))
}

/// Configuration for deterministic synthetic corpora.
///
/// Each vocabulary character is assigned a fixed 128x90 template drawn once
/// from the seeded generator; every occurrence emits the template plus
/// Gaussian noise of scale `noise_sigma`. Output is a pure function of the
/// config, including the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub vocab_chars: Vec<char>,
    pub n_sentences: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Subjects are assigned round-robin across sentences.
    pub subjects: Vec<String>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            vocab_chars: DEFAULT_SYNTH_VOCAB.chars().collect(),
            n_sentences: 20,
            min_len: 4,
            max_len: 10,
            noise_sigma: 0.5,
            seed: 7,
            subjects: vec!["sub-01".to_string()],
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.vocab_chars.is_empty() {
            return Err(Error::Config("synthetic vocab_chars must be nonempty".into()));
        }
        if self.min_len < 1 || self.max_len > 10 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "need 1 <= min_len <= max_len <= 10, got {}..{}",
                self.min_len, self.max_len
            )));
        }
        if self.n_sentences == 0 {
            return Err(Error::Config("n_sentences must be >= 1".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be nonnegative".into()));
        }
        if self.subjects.is_empty() {
            return Err(Error::Config("subjects must be nonempty".into()));
        }
        Ok(())
    }
}

fn draw_template(rng: &mut ChaCha8Rng) -> Array3<f32> {
    let mut t = Array3::<f32>::zeros((1, RAW_CHANNELS, SEGMENT_TIME));
    for v in t.iter_mut() {
        let x: f64 = StandardNormal.sample(rng);
        *v = x as f32;
    }
    t
}

/// Generates a synthetic corpus under `out_dir` and returns its entries.
pub fn generate_synthetic_corpus(cfg: &SynthConfig, out_dir: &Path) -> Result<Vec<CorpusEntry>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Fixed per-character templates, drawn in vocab order.
    let templates: Vec<Array3<f32>> = cfg.vocab_chars.iter().map(|_| draw_template(&mut rng)).collect();

    let mut per_subject_segments = vec![0u32; cfg.subjects.len()];
    let mut items = Vec::with_capacity(cfg.n_sentences);
    for i in 0..cfg.n_sentences {
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let char_idx: Vec<usize> = (0..len)
            .map(|_| rng.random_range(0..cfg.vocab_chars.len()))
            .collect();
        let text: String = char_idx.iter().map(|&k| cfg.vocab_chars[k]).collect();

        let mut data = Array3::<f32>::zeros((len, RAW_CHANNELS, SEGMENT_TIME));
        for (j, &k) in char_idx.iter().enumerate() {
            for c in 0..RAW_CHANNELS {
                for t in 0..SEGMENT_TIME {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    data[(j, c, t)] =
                        templates[k][(0, c, t)] + (cfg.noise_sigma * noise) as f32;
                }
            }
        }

        let subj_idx = i % cfg.subjects.len();
        let subject = cfg.subjects[subj_idx].clone();
        let segment_index = per_subject_segments[subj_idx];
        per_subject_segments[subj_idx] += 1;
        let id = format!("{subject}-ch01-seg{segment_index:03}");
        let entry = CorpusEntry {
            eeg_path: format!("eeg/{id}.f32"),
            id,
            subject,
            chapter: 1,
            segment_index,
            text,
            n_chars_eeg: len,
            dtype: DTYPE_F32LE.to_string(),
            shape: vec![len, RAW_CHANNELS, SEGMENT_TIME],
        };
        items.push((entry, data));
    }

    write_corpus(out_dir, &items)?;
    Ok(items.into_iter().map(|(e, _)| e).collect())
}
