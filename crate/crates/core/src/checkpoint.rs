//! Checkpoint persistence.
//!
//! A checkpoint is a directory holding `params.bin` (every named parameter
//! array, concatenated) and `meta.json` (dims, training stage, config
//! snapshot). Arrays are stored as little-endian f64 so a save/load cycle
//! preserves every bit; the layout is plain enough to parse from any
//! language: for each array, a u32 name length, the UTF-8 name, a u32
//! rank, the u32 dims, then the payload.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{JointModel, ModelDims};

pub const PARAMS_FILE: &str = "params.bin";
pub const META_FILE: &str = "meta.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Stage1,
    Stage2,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: Stage,
    pub dims: ModelDims,
    pub config: RunConfig,
}

pub fn save_checkpoint(
    dir: &Path,
    model: &JointModel,
    stage: Stage,
    config: &RunConfig,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta = CheckpointMeta {
        stage,
        dims: model.dims,
        config: config.clone(),
    };
    let meta_text = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::Checkpoint(format!("serialize metadata: {e}")))?;
    fs::write(dir.join(META_FILE), meta_text + "\n")?;

    let mut w = BufWriter::new(File::create(dir.join(PARAMS_FILE))?);
    for (name, array) in model.arrays() {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        let (rows, cols) = array.dim();
        w.write_all(&2u32.to_le_bytes())?;
        w.write_all(&(rows as u32).to_le_bytes())?;
        w.write_all(&(cols as u32).to_le_bytes())?;
        for &v in array.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact_or_eof(r: &mut impl Read, buf: &mut [u8]) -> Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            if filled == 0 {
                return Ok(false);
            }
            return Err(Error::Checkpoint("truncated parameter file".into()));
        }
        filled += n;
    }
    Ok(true)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    if !read_exact_or_eof(r, &mut buf)? {
        return Err(Error::Checkpoint("truncated parameter file".into()));
    }
    Ok(u32::from_le_bytes(buf))
}

fn read_arrays(path: &Path) -> Result<Vec<(String, Array2<f64>)>> {
    let mut r = BufReader::new(File::open(path).map_err(|e| {
        Error::Checkpoint(format!("cannot open {}: {e}", path.display()))
    })?);
    let mut out = Vec::new();
    loop {
        let mut len_buf = [0u8; 4];
        if !read_exact_or_eof(&mut r, &mut len_buf)? {
            break;
        }
        let name_len = u32::from_le_bytes(len_buf) as usize;
        let mut name_buf = vec![0u8; name_len];
        if !read_exact_or_eof(&mut r, &mut name_buf)? {
            return Err(Error::Checkpoint("truncated parameter name".into()));
        }
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        if rank != 2 {
            return Err(Error::Checkpoint(format!(
                "array '{name}' has rank {rank}, expected 2"
            )));
        }
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        let mut payload = vec![0u8; rows * cols * 8];
        if !read_exact_or_eof(&mut r, &mut payload)? {
            return Err(Error::Checkpoint(format!(
                "truncated payload for array '{name}'"
            )));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let array = Array2::from_shape_vec((rows, cols), values)
            .map_err(|e| Error::Checkpoint(format!("array '{name}': {e}")))?;
        out.push((name, array));
    }
    Ok(out)
}

pub fn load_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("bad checkpoint metadata: {e}")))
}

pub fn load_checkpoint(dir: &Path) -> Result<(JointModel, CheckpointMeta)> {
    let meta = load_meta(dir)?;
    let arrays = read_arrays(&dir.join(PARAMS_FILE))?;
    let mut by_name: HashMap<String, Array2<f64>> = HashMap::with_capacity(arrays.len());
    let stored = arrays.len();
    for (name, array) in arrays {
        if by_name.insert(name.clone(), array).is_some() {
            return Err(Error::Checkpoint(format!("duplicate array '{name}'")));
        }
    }

    let mut model = JointModel::init(meta.dims, 0)?;
    let expected = model.arrays().len();
    if stored != expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {stored} arrays, model expects {expected}"
        )));
    }
    for (name, slot) in model.arrays_mut() {
        let stored = by_name.remove(&name).ok_or_else(|| {
            Error::Checkpoint(format!("checkpoint is missing array '{name}'"))
        })?;
        if stored.dim() != slot.dim() {
            return Err(Error::Checkpoint(format!(
                "array '{name}' has shape {:?}, model expects {:?}",
                stored.dim(),
                slot.dim()
            )));
        }
        *slot = stored;
    }
    Ok((model, meta))
}
