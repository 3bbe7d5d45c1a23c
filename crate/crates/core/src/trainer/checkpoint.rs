//! Binary checkpoint: a magic line, a little-endian `u64` header length,
//! a JSON header, then every tensor as little-endian `f32` in the order
//! model parameters, running statistics, momentum buffers.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EpochRecord, StepRecord, TrainState};
use crate::config::ExperimentConfig;
use crate::error::{shape_err, CcvcError, Result};
use crate::model::{ArchConfig, TwoBranchModel};

pub const CHECKPOINT_MAGIC: &str = "ccvc-ckpt-v1";
const MAGIC_FAMILY: &str = "ccvc-ckpt-";

#[derive(Serialize, Deserialize)]
struct Header {
    arch: ArchConfig,
    config: ExperimentConfig,
    step: u64,
    epoch: usize,
    total_steps: u64,
    history: Vec<StepRecord>,
    epoch_log: Vec<EpochRecord>,
    /// Element count of every stored tensor.
    tensors: Vec<usize>,
    /// How many leading tensors belong to the model state.
    model_tensors: usize,
}

fn corrupt(offset: usize, reason: impl Into<String>) -> CcvcError {
    CcvcError::Checkpoint {
        offset: offset as u64,
        reason: reason.into(),
    }
}

pub fn encode_checkpoint(state: &TrainState) -> Vec<u8> {
    let model_state = state.model.flat_state();
    let tensors: Vec<&Vec<f32>> = model_state.iter().chain(&state.momentum).collect();
    let header = Header {
        arch: state.model.arch.clone(),
        config: state.config.clone(),
        step: state.step,
        epoch: state.epoch,
        total_steps: state.total_steps,
        history: state.history.clone(),
        epoch_log: state.epoch_log.clone(),
        tensors: tensors.iter().map(|t| t.len()).collect(),
        model_tensors: model_state.len(),
    };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::with_capacity(json.len() + 64);
    out.extend_from_slice(CHECKPOINT_MAGIC.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in tensors {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    let nl = bytes
        .iter()
        .take(64)
        .position(|&b| b == b'\n')
        .ok_or_else(|| corrupt(0, "missing magic line"))?;
    let magic = String::from_utf8_lossy(&bytes[..nl]).into_owned();
    if magic != CHECKPOINT_MAGIC {
        if magic.starts_with(MAGIC_FAMILY) {
            return Err(CcvcError::UnsupportedVersion {
                found: magic,
                expected: CHECKPOINT_MAGIC.into(),
            });
        }
        return Err(corrupt(0, format!("bad magic `{magic}`")));
    }
    let mut pos = nl + 1;
    let take = |pos: &mut usize, n: usize, what: &str| -> Result<&[u8]> {
        let end = pos
            .checked_add(n)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| {
                corrupt(
                    *pos,
                    format!(
                        "truncated {what}: need {n} bytes, {} left",
                        bytes.len() - *pos
                    ),
                )
            })?;
        let s = &bytes[*pos..end];
        *pos = end;
        Ok(s)
    };
    let len_bytes = take(&mut pos, 8, "header length")?;
    let hlen = u64::from_le_bytes(len_bytes.try_into().expect("8 bytes")) as usize;
    let hstart = pos;
    let header: Header = serde_json::from_slice(take(&mut pos, hlen, "header")?)
        .map_err(|e| corrupt(hstart, format!("bad header: {e}")))?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for (i, &n) in header.tensors.iter().enumerate() {
        let raw = take(&mut pos, n * 4, &format!("tensor {i}"))?;
        tensors.push(
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect::<Vec<f32>>(),
        );
    }
    if pos != bytes.len() {
        return Err(corrupt(
            pos,
            format!("{} trailing bytes", bytes.len() - pos),
        ));
    }
    if header.arch != header.config.arch() {
        return shape_err("checkpoint arch", header.config.arch(), header.arch);
    }
    let mut model = TwoBranchModel::init(&header.arch, 0)?;
    let momentum = tensors.split_off(header.model_tensors.min(tensors.len()));
    model.load_flat_state(&tensors)?;
    let mut expected = Vec::new();
    model.visit_params(&mut |p| expected.push(p.len()));
    let got: Vec<usize> = momentum.iter().map(Vec::len).collect();
    if got != expected {
        return shape_err("checkpoint momentum", expected, got);
    }
    Ok(TrainState {
        config: header.config,
        model,
        step: header.step,
        epoch: header.epoch,
        total_steps: header.total_steps,
        momentum,
        history: header.history,
        epoch_log: header.epoch_log,
    })
}

/// Writes via a temporary sibling and a rename, so readers never see a
/// partial file.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let tmp = path.with_extension("bin.tmp");
    std::fs::write(&tmp, encode_checkpoint(state))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    decode_checkpoint(&std::fs::read(path)?)
}
