//! `R2PM` model checkpoints.
//!
//! Layout (little-endian): magic `"R2PM"`, `u32` version, eight `u64`
//! architecture dims (`n m h1 h2 h3 h4 d1 d2`), `u8` batchnorm flag, loss
//! spec as `u8 d1`, `u8 d2`, `f64 alpha`, `u32` tensor count, then every
//! trainable tensor in declaration order followed by the running mean and
//! variance of each batchnorm layer, all in the `R2PT` tensor format.

use std::fs;
use std::io::{BufWriter, Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{LossSpec, Metric, ModelConfig, R2PModel};
use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, RunningStats, Tensor};

pub const MODEL_MAGIC: &[u8; 4] = b"R2PM";
pub const MODEL_FORMAT_VERSION: u32 = 1;

pub fn write_model<W: Write>(w: &mut W, model: &R2PModel) -> Result<()> {
    let c = &model.config;
    w.write_all(MODEL_MAGIC)?;
    w.write_u32::<LittleEndian>(MODEL_FORMAT_VERSION)?;
    for d in [c.n, c.m, c.h1, c.h2, c.h3, c.h4, c.d1, c.d2] {
        w.write_u64::<LittleEndian>(d as u64)?;
    }
    w.write_u8(c.batchnorm as u8)?;
    w.write_u8(model.loss_spec.d1.code())?;
    w.write_u8(model.loss_spec.d2.code())?;
    w.write_f64::<LittleEndian>(model.loss_spec.alpha)?;

    let params = model.params();
    let mut running = Vec::new();
    for block in [&model.block1, &model.block2] {
        for bn in block.encoder.bn1.iter().chain(block.encoder.bn2.iter()) {
            running.push(Tensor::new(vec![bn.running.mean.len()], bn.running.mean.clone())?);
            running.push(Tensor::new(vec![bn.running.var.len()], bn.running.var.clone())?);
        }
    }
    w.write_u32::<LittleEndian>((params.len() + running.len()) as u32)?;
    for t in params {
        write_tensor(w, t)?;
    }
    for t in &running {
        write_tensor(w, t)?;
    }
    Ok(())
}

fn corrupt(e: Error) -> Error {
    match e {
        Error::Io(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => {
            Error::Checkpoint("file is truncated".into())
        }
        Error::Format(msg) => Error::Checkpoint(msg),
        other => other,
    }
}

/// Reads a complete checkpoint. Nothing is returned unless every tensor
/// matches the architecture recorded in the header.
pub fn read_model<R: Read>(r: &mut R) -> Result<R2PModel> {
    read_model_inner(r).map_err(corrupt)
}

fn read_model_inner<R: Read>(r: &mut R) -> Result<R2PModel> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MODEL_MAGIC {
        return Err(Error::Checkpoint(format!("expected magic R2PM, got {magic:?}")));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != MODEL_FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {MODEL_FORMAT_VERSION})"
        )));
    }
    let mut dims = [0usize; 8];
    for d in &mut dims {
        *d = r.read_u64::<LittleEndian>()? as usize;
    }
    let batchnorm = match r.read_u8()? {
        0 => false,
        1 => true,
        x => return Err(Error::Checkpoint(format!("bad batchnorm flag {x}"))),
    };
    let metric = |c| Metric::from_code(c).ok_or_else(|| Error::Checkpoint(format!("bad metric code {c}")));
    let d1 = metric(r.read_u8()?)?;
    let d2 = metric(r.read_u8()?)?;
    let alpha = r.read_f64::<LittleEndian>()?;
    let config = ModelConfig {
        n: dims[0],
        m: dims[1],
        h1: dims[2],
        h2: dims[3],
        h3: dims[4],
        h4: dims[5],
        d1: dims[6],
        d2: dims[7],
        batchnorm,
    };
    config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("invalid architecture: {e}")))?;

    let mut model = R2PModel::new(config, 0)?;
    model.loss_spec = LossSpec { d1, d2, alpha };
    let bn_layers = model.batchnorms_mut().len();
    let count = r.read_u32::<LittleEndian>()? as usize;
    let expected = model.params().len() + 2 * bn_layers;
    if count != expected {
        return Err(Error::Checkpoint(format!(
            "{count} tensors stored but the architecture needs {expected}"
        )));
    }
    for (i, slot) in model.params_mut().into_iter().enumerate() {
        let t = read_tensor(r)?;
        if t.shape() != slot.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {i} has shape {:?}, expected {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t.with_grad();
    }
    for bn in model.batchnorms_mut() {
        let d = bn.gamma.len();
        let mean = read_tensor(r)?;
        let var = read_tensor(r)?;
        if mean.shape() != [d] || var.shape() != [d] {
            return Err(Error::Checkpoint("batchnorm running stats have the wrong width".into()));
        }
        bn.running = RunningStats {
            mean: mean.into_data(),
            var: var.into_data(),
        };
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after the last tensor".into()));
    }
    Ok(model)
}

pub fn save_model(path: &Path, model: &R2PModel) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_model(&mut w, model)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<R2PModel> {
    let bytes = fs::read(path)?;
    read_model(&mut Cursor::new(bytes))
}
