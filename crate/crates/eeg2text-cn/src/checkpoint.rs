//! Versioned binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "E2TCKPT\0"
//! version    u32
//! cfg_len    u32      followed by cfg_len bytes of ModelConfig JSON
//! n_tensors  u32
//! per tensor (canonical parameter order):
//!   name_len u16      followed by the UTF-8 hierarchical name
//!   ndim     u8       followed by ndim × u32 dimensions
//!   data     f32le    row-major, product(dims) values
//! ```
//!
//! Save followed by load reproduces every parameter bit-exactly: values are
//! written as raw f32 bits and never re-parsed through text.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::model::{init_params, ModelConfig, ModelParams};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"E2TCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        line: 0,
        msg: msg.into(),
    }
}

/// Writes `params` and its architecture config to `path`.
pub fn save_checkpoint(path: &Path, params: &ModelParams<f32>, cfg: &ModelConfig) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);

    w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION).map_err(io)?;
    let cfg_json = serde_json::to_vec(cfg).expect("config serializes");
    w.write_u32::<LittleEndian>(cfg_json.len() as u32).map_err(io)?;
    w.write_all(&cfg_json).map_err(io)?;

    let tensors = params.named_tensors();
    w.write_u32::<LittleEndian>(tensors.len() as u32).map_err(io)?;
    for (name, t) in tensors {
        w.write_u16::<LittleEndian>(name.len() as u16).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        w.write_u8(t.ndim() as u8).map_err(io)?;
        for &d in t.shape() {
            w.write_u32::<LittleEndian>(d as u32).map_err(io)?;
        }
        for &v in t.iter() {
            w.write_f32::<LittleEndian>(v).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Reads a checkpoint written by [`save_checkpoint`]. The tensor list must
/// match the canonical parameter order of the stored config exactly.
pub fn load_checkpoint(path: &Path) -> Result<(ModelParams<f32>, ModelConfig)> {
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    let mut r = BufReader::new(file);
    // Truncation and similar read failures are format errors, not IO errors:
    // the file exists but does not hold a complete checkpoint.
    let fe = |e: std::io::Error| format_err(path, format!("unexpected end of checkpoint: {e}"));

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(fe)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(format_err(path, "bad magic; not a checkpoint file"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(fe)?;
    if version != CHECKPOINT_VERSION {
        return Err(format_err(
            path,
            format!("checkpoint version {version}, expected {CHECKPOINT_VERSION}"),
        ));
    }
    let cfg_len = r.read_u32::<LittleEndian>().map_err(fe)? as usize;
    let mut cfg_json = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_json).map_err(fe)?;
    let cfg: ModelConfig = serde_json::from_slice(&cfg_json)
        .map_err(|e| format_err(path, format!("bad config block: {e}")))?;
    cfg.validate()?;

    let mut params = init_params::<f32>(&cfg)?;
    let n_tensors = r.read_u32::<LittleEndian>().map_err(fe)? as usize;
    let expected = params.named_tensors().len();
    if n_tensors != expected {
        return Err(format_err(
            path,
            format!("checkpoint has {n_tensors} tensors, config implies {expected}"),
        ));
    }
    for (name, mut t) in params.named_tensors_mut() {
        let name_len = r.read_u16::<LittleEndian>().map_err(fe)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(fe)?;
        let got = String::from_utf8(name_bytes)
            .map_err(|_| format_err(path, "tensor name is not UTF-8"))?;
        if got != name {
            return Err(format_err(
                path,
                format!("tensor order mismatch: found `{got}`, expected `{name}`"),
            ));
        }
        let ndim = r.read_u8().map_err(fe)? as usize;
        if ndim != t.ndim() {
            return Err(format_err(
                path,
                format!("tensor `{name}`: {ndim} dims, expected {}", t.ndim()),
            ));
        }
        for (axis, &want) in t.shape().iter().enumerate() {
            let got = r.read_u32::<LittleEndian>().map_err(fe)? as usize;
            if got != want {
                return Err(format_err(
                    path,
                    format!("tensor `{name}` axis {axis}: size {got}, expected {want}"),
                ));
            }
        }
        for v in t.iter_mut() {
            *v = r.read_f32::<LittleEndian>().map_err(fe)?;
        }
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
        return Err(format_err(path, "trailing bytes after final tensor"));
    }
    Ok((params, cfg))
}
