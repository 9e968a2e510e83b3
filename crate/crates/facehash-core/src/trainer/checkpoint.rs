//! Versioned binary checkpoints: model config, every trainable tensor,
//! batch-norm running statistics, Adam moments, counters, and the loss
//! history, with a trailing FNV-1a-64 checksum. A loaded state continues
//! training bit-for-bit where the saved one would have.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::binio::{
    read_f64, read_string, read_u32, read_u64, write_f64, write_string, write_u32, write_u64,
    ChecksumReader, ChecksumWriter,
};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::netcore::{model_skeleton, BackboneScale, ModelConfig};

use super::{AdamParams, AdamState, LossRecord, TermMask, TrainConfig, TrainState};

const CKPT_MAGIC: [u8; 4] = *b"SGHC";
const CKPT_VERSION: u32 = 1;

fn mask_byte(m: &TermMask) -> u8 {
    (m.sp as u8) | (m.reg as u8) << 1 | (m.sq as u8) << 2 | (m.cls as u8) << 3
}

fn mask_from_byte(b: u8) -> TermMask {
    TermMask {
        sp: b & 1 != 0,
        reg: b & 2 != 0,
        sq: b & 4 != 0,
        cls: b & 8 != 0,
    }
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = ChecksumWriter::new(BufWriter::new(file));
    let io_err = |e| Error::io(path, e);

    w.write_all(&CKPT_MAGIC).map_err(io_err)?;
    write_u32(&mut w, CKPT_VERSION).map_err(io_err)?;

    let mc = &state.params.config;
    let backbone = match mc.backbone {
        BackboneScale::Paper => 0u8,
        BackboneScale::Tiny => 1u8,
    };
    w.write_all(&[backbone]).map_err(io_err)?;
    write_u32(&mut w, mc.input_size as u32).map_err(io_err)?;
    write_u32(&mut w, mc.code_bits as u32).map_err(io_err)?;
    write_u32(&mut w, mc.identity_count as u32).map_err(io_err)?;
    write_u32(&mut w, mc.latent_dim as u32).map_err(io_err)?;
    write_u32(&mut w, mc.projection_dim as u32).map_err(io_err)?;

    let tc = &state.config;
    write_u64(&mut w, tc.epochs as u64).map_err(io_err)?;
    write_u64(&mut w, tc.batch_size as u64).map_err(io_err)?;
    write_f64(&mut w, tc.learning_rate).map_err(io_err)?;
    write_f64(&mut w, tc.lr_decay).map_err(io_err)?;
    write_u64(&mut w, tc.lr_decay_every as u64).map_err(io_err)?;
    write_f64(&mut w, tc.weights.lambda1).map_err(io_err)?;
    write_f64(&mut w, tc.weights.lambda2).map_err(io_err)?;
    write_u64(&mut w, tc.seed).map_err(io_err)?;
    write_f64(&mut w, tc.adam.beta1).map_err(io_err)?;
    write_f64(&mut w, tc.adam.beta2).map_err(io_err)?;
    write_f64(&mut w, tc.adam.epsilon).map_err(io_err)?;
    w.write_all(&[mask_byte(&tc.terms)]).map_err(io_err)?;

    write_u64(&mut w, state.epoch as u64).map_err(io_err)?;
    write_u64(&mut w, state.iteration).map_err(io_err)?;

    let tensors = state.params.trainable();
    write_u32(&mut w, tensors.len() as u32).map_err(io_err)?;
    for (_, name, data) in &tensors {
        write_string(&mut w, name).map_err(io_err)?;
        write_u64(&mut w, data.len() as u64).map_err(io_err)?;
        for &v in *data {
            write_f64(&mut w, v).map_err(io_err)?;
        }
    }

    for v in state.params.bn_hash.running_mean.iter() {
        write_f64(&mut w, *v).map_err(io_err)?;
    }
    for v in state.params.bn_hash.running_var.iter() {
        write_f64(&mut w, *v).map_err(io_err)?;
    }

    write_u64(&mut w, state.adam.t).map_err(io_err)?;
    for (m, v) in state.adam.m.iter().zip(&state.adam.v) {
        for &x in m {
            write_f64(&mut w, x).map_err(io_err)?;
        }
        for &x in v {
            write_f64(&mut w, x).map_err(io_err)?;
        }
    }

    write_u64(&mut w, state.history.len() as u64).map_err(io_err)?;
    for r in &state.history {
        write_u64(&mut w, r.iteration).map_err(io_err)?;
        write_u64(&mut w, r.epoch as u64).map_err(io_err)?;
        for v in [r.lr, r.sp, r.reg, r.sq, r.cls, r.total] {
            write_f64(&mut w, v).map_err(io_err)?;
        }
    }

    let mut inner = w.finalize().map_err(io_err)?;
    inner.flush().map_err(io_err)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = ChecksumReader::new(BufReader::new(file));
    let corrupt = |e: std::io::Error| Error::CorruptFile {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let bad = |reason: String| Error::CorruptFile {
        path: path.to_path_buf(),
        reason,
    };

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(corrupt)?;
    if magic != CKPT_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: CKPT_MAGIC,
        });
    }
    let version = read_u32(&mut r).map_err(corrupt)?;
    if version != CKPT_VERSION {
        return Err(Error::BadVersion {
            path: path.to_path_buf(),
            found: version,
            supported: CKPT_VERSION,
        });
    }

    let mut backbone = [0u8; 1];
    r.read_exact(&mut backbone).map_err(corrupt)?;
    let backbone = match backbone[0] {
        0 => BackboneScale::Paper,
        1 => BackboneScale::Tiny,
        b => return Err(bad(format!("unknown backbone tag {b}"))),
    };
    let model_config = ModelConfig {
        backbone,
        input_size: read_u32(&mut r).map_err(corrupt)? as usize,
        code_bits: read_u32(&mut r).map_err(corrupt)? as usize,
        identity_count: read_u32(&mut r).map_err(corrupt)? as usize,
        latent_dim: read_u32(&mut r).map_err(corrupt)? as usize,
        projection_dim: read_u32(&mut r).map_err(corrupt)? as usize,
    };

    let config = TrainConfig {
        epochs: read_u64(&mut r).map_err(corrupt)? as usize,
        batch_size: read_u64(&mut r).map_err(corrupt)? as usize,
        learning_rate: read_f64(&mut r).map_err(corrupt)?,
        lr_decay: read_f64(&mut r).map_err(corrupt)?,
        lr_decay_every: read_u64(&mut r).map_err(corrupt)? as usize,
        weights: LossWeights {
            lambda1: read_f64(&mut r).map_err(corrupt)?,
            lambda2: read_f64(&mut r).map_err(corrupt)?,
        },
        seed: read_u64(&mut r).map_err(corrupt)?,
        adam: AdamParams {
            beta1: read_f64(&mut r).map_err(corrupt)?,
            beta2: read_f64(&mut r).map_err(corrupt)?,
            epsilon: read_f64(&mut r).map_err(corrupt)?,
        },
        terms: {
            let mut b = [0u8; 1];
            r.read_exact(&mut b).map_err(corrupt)?;
            mask_from_byte(b[0])
        },
    };

    let epoch = read_u64(&mut r).map_err(corrupt)? as usize;
    let iteration = read_u64(&mut r).map_err(corrupt)?;

    let mut params = model_skeleton(&model_config)?;
    let expected: Vec<(String, usize)> = params
        .trainable()
        .iter()
        .map(|(_, name, data)| (name.clone(), data.len()))
        .collect();
    let count = read_u32(&mut r).map_err(corrupt)? as usize;
    if count != expected.len() {
        return Err(bad(format!(
            "tensor count {count} does not match architecture ({} expected)",
            expected.len()
        )));
    }
    let mut buffers: Vec<Vec<f64>> = Vec::with_capacity(count);
    for (name, len) in &expected {
        let got_name = read_string(&mut r).map_err(corrupt)?;
        if got_name != *name {
            return Err(bad(format!("tensor '{got_name}' where '{name}' expected")));
        }
        let got_len = read_u64(&mut r).map_err(corrupt)? as usize;
        if got_len != *len {
            return Err(bad(format!("tensor '{name}' has length {got_len}, expected {len}")));
        }
        let mut buf = Vec::with_capacity(*len);
        for _ in 0..*len {
            buf.push(read_f64(&mut r).map_err(corrupt)?);
        }
        buffers.push(buf);
    }
    for ((_, slot), buf) in params.trainable_mut().iter_mut().zip(&buffers) {
        slot.copy_from_slice(buf);
    }

    for v in params.bn_hash.running_mean.iter_mut() {
        *v = read_f64(&mut r).map_err(corrupt)?;
    }
    for v in params.bn_hash.running_var.iter_mut() {
        *v = read_f64(&mut r).map_err(corrupt)?;
    }

    let t = read_u64(&mut r).map_err(corrupt)?;
    let mut adam = AdamState::new(&params);
    adam.t = t;
    for k in 0..count {
        for i in 0..expected[k].1 {
            adam.m[k][i] = read_f64(&mut r).map_err(corrupt)?;
        }
        for i in 0..expected[k].1 {
            adam.v[k][i] = read_f64(&mut r).map_err(corrupt)?;
        }
    }

    let hist_len = read_u64(&mut r).map_err(corrupt)? as usize;
    let mut history = Vec::with_capacity(hist_len);
    for _ in 0..hist_len {
        let iteration = read_u64(&mut r).map_err(corrupt)?;
        let epoch = read_u64(&mut r).map_err(corrupt)? as usize;
        let mut vals = [0.0f64; 6];
        for v in vals.iter_mut() {
            *v = read_f64(&mut r).map_err(corrupt)?;
        }
        history.push(LossRecord {
            iteration,
            epoch,
            lr: vals[0],
            sp: vals[1],
            reg: vals[2],
            sq: vals[3],
            cls: vals[4],
            total: vals[5],
        });
    }

    if !r.verify().map_err(corrupt)? {
        return Err(Error::ChecksumMismatch(path.to_path_buf()));
    }

    Ok(TrainState {
        config,
        params,
        adam,
        epoch,
        iteration,
        history,
    })
}
