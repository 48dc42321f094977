use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::binio::{format_err, put_f32s, write_atomic, ByteReader};
use crate::error::{Result, SemiseError};
use crate::ndcore::DenseArray;
use crate::nets::Params;
use crate::pipeline::config::parse_key_values;
use crate::pipeline::{Checkpoint, EpochLog, TrainConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SMSE";
pub const CHECKPOINT_VERSION: u32 = 1;
const VELOCITY_PREFIX: &str = "velocity.";

fn state_text(ck: &Checkpoint) -> String {
    let mut s = ck.config.to_text();
    let _ = writeln!(s, "ckpt.phase = {}", ck.phase);
    let _ = writeln!(s, "ckpt.epoch = {}", ck.epoch);
    for l in &ck.history {
        let _ = writeln!(
            s,
            "history = {},{},{},{},{},{},{},{}",
            l.phase, l.epoch, l.loss_total, l.loss_ntxent, l.loss_pro, l.grad_norm_encoder, l.grad_norm_g, l.grad_norm_h
        );
    }
    s
}

fn named_tensors(ck: &Checkpoint) -> Vec<(String, &DenseArray)> {
    let mut out = Vec::new();
    for (group, items) in [("encoder", ck.encoder.named()), ("g", ck.g.named()), ("h", ck.h.named())] {
        out.extend(items.into_iter().map(|(n, t)| (format!("{group}.{n}"), t)));
    }
    out.extend(ck.optimizer.velocities().iter().map(|(k, v)| (format!("{VELOCITY_PREFIX}{k}"), v)));
    out
}

/// SMSE layout: magic, version, length-prefixed config text, tensor count,
/// then name / rank / dims / `f32` payload per tensor.
pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let text = state_text(ck);
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    let tensors = named_tensors(ck);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let nb = name.as_bytes();
        out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        out.extend_from_slice(nb);
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        put_f32s(&mut out, t.data());
    }
    Ok(out)
}

fn parse_history(line: usize, v: &str) -> Result<EpochLog> {
    let bad = || SemiseError::Config(format!("line {line}: malformed history entry '{v}'"));
    let f: Vec<&str> = v.split(',').map(str::trim).collect();
    if f.len() != 8 {
        return Err(bad());
    }
    let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
    Ok(EpochLog {
        phase: f[0].parse().map_err(|_| bad())?,
        epoch: f[1].parse().map_err(|_| bad())?,
        loss_total: num(2)?,
        loss_ntxent: num(3)?,
        loss_pro: num(4)?,
        grad_norm_encoder: num(5)?,
        grad_norm_g: num(6)?,
        grad_norm_h: num(7)?,
    })
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut rd = ByteReader::new(bytes);
    if rd.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(format_err(0, "bad magic, expected SMSE"));
    }
    let version = rd.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let text_len = rd.u32("config length")? as usize;
    let text_at = rd.offset();
    let text = std::str::from_utf8(rd.take(text_len, "config text")?)
        .map_err(|e| format_err(text_at + e.valid_up_to(), "config text is not UTF-8"))?;

    let mut config = TrainConfig::default();
    let (mut phase, mut epoch, mut history) = (None, None, Vec::new());
    for (line, k, v) in parse_key_values(text)? {
        let num_err = || SemiseError::Config(format!("line {line}: invalid value '{v}' for '{k}'"));
        match k.as_str() {
            "ckpt.phase" => phase = Some(v.parse::<u8>().map_err(|_| num_err())?),
            "ckpt.epoch" => epoch = Some(v.parse::<usize>().map_err(|_| num_err())?),
            "history" => history.push(parse_history(line, &v)?),
            _ => config.set(&k, &v).map_err(|e| SemiseError::Config(format!("line {line}: {e}")))?,
        }
    }
    config.validate()?;
    let (phase, epoch) = match (phase, epoch) {
        (Some(p @ 1..=2), Some(e)) => (p, e),
        _ => return Err(format_err(text_at, "config text lacks a valid ckpt.phase / ckpt.epoch")),
    };

    let count = rd.u32("tensor count")? as usize;
    let mut tensors: BTreeMap<String, DenseArray> = BTreeMap::new();
    for _ in 0..count {
        let name_len = rd.u16("tensor name length")? as usize;
        let name_at = rd.offset();
        let name = std::str::from_utf8(rd.take(name_len, "tensor name")?)
            .map_err(|_| format_err(name_at, "tensor name is not UTF-8"))?
            .to_string();
        let rank = rd.u8(&format!("rank of tensor '{name}'"))? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(rd.u32(&format!("dims of tensor '{name}'"))? as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| format_err(rd.offset(), format!("tensor '{name}' has overflowing dims {dims:?}")))?;
        let data = rd.f32s(n, &format!("payload of tensor '{name}' ({n} values)"))?;
        tensors.insert(name, DenseArray::new(dims, data)?);
    }
    rd.expect_end()?;

    let mut ck = Checkpoint::init(&config)?;
    ck.phase = phase;
    ck.epoch = epoch;
    ck.history = history;
    let at = rd.offset();
    for (group, items) in [
        ("encoder", ck.encoder.named_mut()),
        ("g", ck.g.named_mut()),
        ("h", ck.h.named_mut()),
    ] {
        for (n, slot) in items {
            let key = format!("{group}.{n}");
            let t = tensors
                .remove(&key)
                .ok_or_else(|| format_err(at, format!("missing tensor '{key}'")))?;
            if t.shape() != slot.shape() {
                return Err(format_err(
                    at,
                    format!("tensor '{key}' has shape {:?}, expected {:?}", t.shape(), slot.shape()),
                ));
            }
            *slot = t;
        }
    }
    for (k, v) in tensors {
        let Some(vk) = k.strip_prefix(VELOCITY_PREFIX) else {
            return Err(format_err(at, format!("unexpected tensor '{k}'")));
        };
        ck.optimizer.velocities_mut().insert(vk.to_string(), v);
    }
    Ok(ck)
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ck)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}
