//! Per-character vocabulary, special tokens, and the frozen text-embedding
//! interface used by the contrastive objective.
//!
//! Tokenization is strictly one id per Unicode character; merges are never
//! produced. The default [`HashEmbedder`] is a deterministic test double so
//! the contrastive path runs offline; a pretrained sentence embedder can be
//! plugged in behind the same trait.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const UNK_RENDER: char = '□';

/// Fixed ids for the special tokens; every [`Vocab`] uses this layout.
pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;

/// Character vocabulary with PAD/BOS/EOS/UNK specials.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    chars: Vec<char>,
    id_of: HashMap<char, usize>,
    pub pad_id: usize,
    pub bos_id: usize,
    pub eos_id: usize,
    pub unk_id: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    format_version: u32,
    pad_id: usize,
    bos_id: usize,
    eos_id: usize,
    unk_id: usize,
    chars: Vec<char>,
}

pub const N_SPECIALS: usize = 4;

/// True for ASCII punctuation, the General Punctuation block (… — curly
/// quotes), CJK symbols and punctuation (、。〈〉…), and fullwidth forms
/// (，！？：；). Displayed stimuli exclude these characters.
pub fn is_punctuation(c: char) -> bool {
    let u = c as u32;
    c.is_ascii_punctuation()
        || c == '·'
        || (0x2000..=0x206F).contains(&u)
        || (0x3000..=0x303F).contains(&u)
        || (0xFF01..=0xFF0F).contains(&u)
        || (0xFF1A..=0xFF20).contains(&u)
        || (0xFF3B..=0xFF40).contains(&u)
        || (0xFF5B..=0xFF65).contains(&u)
}

/// Characters of `text` with punctuation removed, preserving order. The
/// result models the on-screen stimulus sequence: its first `n_chars_eeg`
/// characters line up one-to-one with the recorded EEG segments.
pub fn strip_punctuation(text: &str) -> String {
    text.chars().filter(|&c| !is_punctuation(c)).collect()
}

impl Vocab {
    /// Builds a vocabulary from an ordered character list. Specials take ids
    /// 0..=3; characters follow in the given order, duplicates ignored.
    pub fn from_chars(chars: impl IntoIterator<Item = char>) -> Self {
        let mut ordered = Vec::new();
        let mut id_of = HashMap::new();
        for c in chars {
            if !id_of.contains_key(&c) {
                id_of.insert(c, N_SPECIALS + ordered.len());
                ordered.push(c);
            }
        }
        Vocab {
            chars: ordered,
            id_of,
            pad_id: PAD_ID,
            bos_id: BOS_ID,
            eos_id: EOS_ID,
            unk_id: UNK_ID,
        }
    }

    /// Vocabulary from corpus texts: distinct characters ordered by first
    /// appearance across all texts.
    pub fn build<S: AsRef<str>>(texts: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut seen = false;
        let mut chars = Vec::new();
        let mut present = HashMap::new();
        for text in texts {
            seen = true;
            for c in text.as_ref().chars() {
                if present.insert(c, ()).is_none() {
                    chars.push(c);
                }
            }
        }
        if !seen {
            return Err(Error::Config("cannot build vocabulary from an empty corpus".into()));
        }
        Ok(Vocab::from_chars(chars))
    }

    pub fn size(&self) -> usize {
        N_SPECIALS + self.chars.len()
    }

    pub fn id_of(&self, c: char) -> usize {
        self.id_of.get(&c).copied().unwrap_or(self.unk_id)
    }

    pub fn char_of(&self, id: usize) -> Option<char> {
        id.checked_sub(N_SPECIALS).and_then(|i| self.chars.get(i).copied())
    }

    fn is_special(&self, id: usize) -> bool {
        id < N_SPECIALS
    }

    /// `[BOS] + one id per character + [EOS]`; unknown characters map to UNK.
    pub fn encode_chars(&self, text: &str) -> Result<Vec<usize>> {
        if text.is_empty() {
            return Err(Error::Value("cannot encode empty text".into()));
        }
        let mut ids = Vec::with_capacity(text.chars().count() + 2);
        ids.push(self.bos_id);
        ids.extend(text.chars().map(|c| self.id_of(c)));
        ids.push(self.eos_id);
        Ok(ids)
    }

    /// Drops BOS/EOS/PAD, renders UNK as `□`.
    pub fn decode_ids(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            if id >= self.size() {
                return Err(Error::Range(format!(
                    "token id {id} out of range for vocab of size {}",
                    self.size()
                )));
            }
            if id == self.unk_id {
                out.push(UNK_RENDER);
            } else if !self.is_special(id) {
                out.push(self.char_of(id).unwrap());
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = VocabFile {
            format_version: 1,
            pad_id: self.pad_id,
            bos_id: self.bos_id,
            eos_id: self.eos_id,
            unk_id: self.unk_id,
            chars: self.chars.clone(),
        };
        let json = serde_json::to_string_pretty(&file)
            .map_err(|e| Error::Format {
                path: path.to_path_buf(),
                line: 0,
                msg: e.to_string(),
            })?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        let file: VocabFile = serde_json::from_str(&raw).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        if file.format_version != 1 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                line: 0,
                msg: format!("unsupported vocab format_version {}", file.format_version),
            });
        }
        Ok(Vocab::from_chars(file.chars))
    }
}

/// Frozen sentence-embedding interface. Implementations must be
/// deterministic: the same string always yields the same vector.
pub trait TextEmbedder: Send + Sync {
    fn dim(&self) -> usize;
    /// Raw embedding; normalization is applied by [`embed_text`].
    fn embed(&self, text: &str) -> Result<Vec<f32>>;
}

/// Deterministic hash-to-vector embedder: SHA-256 of (seed, text) seeds a
/// ChaCha stream that fills the vector with standard normal draws.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
    seed: u64,
}

impl HashEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }
}

impl TextEmbedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(text.as_bytes());
        let digest = hasher.finalize();
        let mut seed_bytes = [0u8; 8];
        seed_bytes.copy_from_slice(&digest[..8]);
        let mut rng = ChaCha8Rng::seed_from_u64(u64::from_le_bytes(seed_bytes));
        Ok((0..self.dim)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v as f32
            })
            .collect())
    }
}

/// Embeds `text` and L2-normalizes the result to unit length.
pub fn embed_text(embedder: &dyn TextEmbedder, text: &str) -> Result<Vec<f32>> {
    let mut v = embedder.embed(text)?;
    if v.len() != embedder.dim() {
        return Err(Error::Embedder(format!(
            "embedder returned {} dims, declared {}",
            v.len(),
            embedder.dim()
        )));
    }
    let norm = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if !(norm.is_finite() && norm > 0.0) {
        return Err(Error::Embedder(format!("degenerate embedding norm {norm}")));
    }
    for x in &mut v {
        *x = (*x as f64 / norm) as f32;
    }
    Ok(v)
}
