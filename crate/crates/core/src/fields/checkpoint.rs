//! Model checkpoint file: a flat binary container of named parameter arrays
//! behind a text config header.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  b"CANCKPT1"
//! u32      header byte length
//! header   UTF-8 "key = value\n" lines: the ModelConfig fields
//! u32      parameter count
//! per parameter, in registration order:
//!   u16      name length, then the name bytes
//!   u8       shape tag: 1 = vector, 2 = matrix
//!   u64 × n  dimensions (1 for vectors, 2 for matrices)
//!   f64 × k  row-major data
//! u8       1 if optimizer state follows, else 0
//! per parameter (when present, same order):
//!   u64      Adam step count
//!   f64 × k  first-moment buffer
//!   f64 × k  second-moment buffer
//! ```
//!
//! f64 bits are written verbatim, so save/load round-trips are lossless and
//! identical runs produce byte-identical files.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::autodiff::{ParamId, Shape};
use super::{ModelConfig, SceneModel};

const MAGIC: &[u8; 8] = b"CANCKPT1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint/model mismatch: {0}")]
    Mismatch(String),
}

pub fn save_model(
    model: &SceneModel,
    path: &Path,
    include_optimizer: bool,
) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;

    let cfg = &model.cfg;
    let header = format!(
        "n_frames = {}\nfield_layers = {}\nfield_width = {}\nenc_bands = {}\n\
         coupling_layers = {}\ncoupling_hidden = {}\ncoupling_depth = {}\nlatent_dim = {}\n",
        cfg.n_frames,
        cfg.field_layers,
        cfg.field_width,
        cfg.enc_bands,
        cfg.coupling_layers,
        cfg.coupling_hidden,
        cfg.coupling_depth,
        cfg.latent_dim
    );
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(header.as_bytes())?;

    let ids: Vec<ParamId> = model.params.ids().collect();
    w.write_all(&(ids.len() as u32).to_le_bytes())?;
    for &id in &ids {
        let name = model.params.name_of(id);
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        let value = model.params.value(id);
        match value.shape() {
            Shape::Vector(n) => {
                w.write_all(&[1u8])?;
                w.write_all(&(n as u64).to_le_bytes())?;
            }
            Shape::Matrix(r, c) => {
                w.write_all(&[2u8])?;
                w.write_all(&(r as u64).to_le_bytes())?;
                w.write_all(&(c as u64).to_le_bytes())?;
            }
        }
        for v in value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }

    w.write_all(&[include_optimizer as u8])?;
    if include_optimizer {
        for &id in &ids {
            let (m, v, step) = model.params.adam_state(id);
            w.write_all(&step.to_le_bytes())?;
            for x in m {
                w.write_all(&x.to_le_bytes())?;
            }
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<SceneModel, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }

    let header_len = read_u32(&mut r)? as usize;
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header)?;
    let header = String::from_utf8(header)
        .map_err(|_| CheckpointError::Malformed("header is not UTF-8".into()))?;
    let keys = parse_header(&header)?;
    let cfg = ModelConfig {
        n_frames: header_field(&keys, "n_frames")?,
        field_layers: header_field(&keys, "field_layers")?,
        field_width: header_field(&keys, "field_width")?,
        enc_bands: header_field(&keys, "enc_bands")?,
        coupling_layers: header_field(&keys, "coupling_layers")?,
        coupling_hidden: header_field(&keys, "coupling_hidden")?,
        coupling_depth: header_field(&keys, "coupling_depth")?,
        latent_dim: header_field(&keys, "latent_dim")?,
    };

    // Rebuild the parameter skeleton (names, order, shapes are a pure
    // function of the config), then overwrite values from the file.
    let mut model = SceneModel::init(cfg, 0);

    let count = read_u32(&mut r)? as usize;
    if count != model.params.len() {
        return Err(CheckpointError::Mismatch(format!(
            "file has {count} parameters, config implies {}",
            model.params.len()
        )));
    }
    let mut ids = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u16(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| CheckpointError::Malformed("parameter name is not UTF-8".into()))?;
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let shape = match tag[0] {
            1 => Shape::Vector(read_u64(&mut r)? as usize),
            2 => {
                let rows = read_u64(&mut r)? as usize;
                let cols = read_u64(&mut r)? as usize;
                Shape::Matrix(rows, cols)
            }
            t => return Err(CheckpointError::Malformed(format!("bad shape tag {t}"))),
        };
        let id = model
            .params
            .id_of(&name)
            .ok_or_else(|| CheckpointError::Mismatch(format!("unknown parameter `{name}`")))?;
        if model.params.shape(id) != shape {
            return Err(CheckpointError::Mismatch(format!(
                "parameter `{name}` has shape {:?} in file, {:?} in model",
                shape,
                model.params.shape(id)
            )));
        }
        let mut data = vec![0.0f64; shape.len()];
        for slot in &mut data {
            *slot = read_f64(&mut r)?;
        }
        model.params.set_value(id, data);
        ids.push(id);
    }

    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    if flag[0] == 1 {
        for &id in &ids {
            let step = read_u64(&mut r)?;
            let len = model.params.value(id).len();
            let mut m = vec![0.0f64; len];
            for slot in &mut m {
                *slot = read_f64(&mut r)?;
            }
            let mut v = vec![0.0f64; len];
            for slot in &mut v {
                *slot = read_f64(&mut r)?;
            }
            model.params.set_adam_state(id, m, v, step);
        }
    }
    Ok(model)
}

fn parse_header(text: &str) -> Result<BTreeMap<String, String>, CheckpointError> {
    let mut map = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CheckpointError::Malformed(format!("bad header line `{line}`")))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn header_field(map: &BTreeMap<String, String>, key: &str) -> Result<usize, CheckpointError> {
    map.get(key)
        .ok_or_else(|| CheckpointError::Malformed(format!("header missing `{key}`")))?
        .parse()
        .map_err(|_| CheckpointError::Malformed(format!("header `{key}` is not an integer")))
}

fn read_u16(r: &mut impl Read) -> Result<u16, std::io::Error> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32, std::io::Error> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, std::io::Error> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64, std::io::Error> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_bits(u64::from_le_bytes(b)))
}
