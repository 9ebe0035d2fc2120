//! Checkpoint container.
//!
//! ```text
//! repeat { u32 name_len | name (UTF-8) | DST1 tensor }
//! u32 0
//! u64 meta_len | meta (UTF-8 "key = value" lines)
//! ```
//!
//! All integers little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::cam::CamWeights;
use crate::data::{ConvStage, TinyEncoder};
use crate::error::{Error, Result};
use crate::tensor::{encode_tensor, read_tensor_from, Tensor};

use super::{ModelState, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: ModelState,
    pub config: TrainConfig,
}

fn named_tensors(state: &ModelState) -> Vec<(String, &Tensor<f64>)> {
    let mut out = Vec::new();
    for (i, s) in state.encoder.stages.iter().enumerate() {
        out.push((format!("encoder.{i}.weight"), &s.weight));
        out.push((format!("encoder.{i}.bias"), &s.bias));
    }
    out.push(("cam.base".into(), &state.cam.base));
    out.push(("cam.refined".into(), &state.cam.refined));
    for (j, v) in state.velocity.iter().enumerate() {
        out.push((format!("velocity.{j}"), v));
    }
    out
}

pub fn encode_checkpoint(state: &ModelState, cfg: &TrainConfig) -> Vec<u8> {
    let mut out = Vec::new();
    for (name, t) in named_tensors(state) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&encode_tensor(t));
    }
    out.extend_from_slice(&0u32.to_le_bytes());
    let mut meta = format!(
        "step = {}\nencoder.stages = {}\n",
        state.step,
        state.encoder.stages.len()
    );
    for (i, s) in state.encoder.stages.iter().enumerate() {
        meta.push_str(&format!(
            "encoder.{i}.stride = {}\nencoder.{i}.relu = {}\n",
            s.stride, s.relu
        ));
    }
    for (k, v) in cfg.pairs() {
        meta.push_str(&format!("cfg.{k} = {v}\n"));
    }
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    out
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    state: &ModelState,
    cfg: &TrainConfig,
) -> Result<()> {
    fs::write(path, encode_checkpoint(state, cfg))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.bytes.len() as u64,
                format!("truncated {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, "name length")?.try_into().unwrap(),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, "metadata length")?.try_into().unwrap(),
        ))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    let mut tensors = BTreeMap::new();
    loop {
        let at = r.pos as u64;
        let len = r.u32()? as usize;
        if len == 0 {
            break;
        }
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::format(at + 4, "tensor name is not UTF-8"))?
            .to_string();
        let mut rest = &bytes[r.pos..];
        let (t, used) = read_tensor_from(&mut rest, r.pos as u64)?;
        r.pos += used as usize;
        tensors.insert(name, t.into_f64()?);
    }
    let meta_at = r.pos as u64;
    let len = r.u64()? as usize;
    let meta = std::str::from_utf8(r.take(len, "metadata")?)
        .map_err(|_| Error::format(meta_at + 8, "metadata is not UTF-8"))?;
    let mut kv = BTreeMap::new();
    for line in meta.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(meta_at, format!("bad metadata line {line:?}")))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |k: &str| {
        kv.get(k)
            .ok_or_else(|| Error::format(meta_at, format!("metadata lacks {k}")))
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::format(meta_at, format!("bad metadata value for {k}")))
    };
    let mut take = |name: String| {
        tensors
            .remove(&name)
            .ok_or_else(|| Error::format(0, format!("checkpoint lacks tensor {name}")))
    };

    let mut config = TrainConfig::default();
    for (k, v) in &kv {
        if let Some(key) = k.strip_prefix("cfg.") {
            config.set(key, v)?;
        }
    }
    let mut stages = Vec::new();
    for i in 0..num("encoder.stages")? {
        let relu = match get(&format!("encoder.{i}.relu"))?.as_str() {
            "true" => true,
            "false" => false,
            other => return Err(Error::format(meta_at, format!("bad relu flag {other:?}"))),
        };
        stages.push(ConvStage {
            weight: take(format!("encoder.{i}.weight"))?,
            bias: take(format!("encoder.{i}.bias"))?,
            stride: num(&format!("encoder.{i}.stride"))?,
            relu,
        });
    }
    let cam = CamWeights {
        base: take("cam.base".into())?,
        refined: take("cam.refined".into())?,
    };
    let mut velocity = Vec::new();
    for j in 0..2 * stages.len() + 2 {
        velocity.push(take(format!("velocity.{j}"))?);
    }
    let state = ModelState {
        encoder: TinyEncoder { stages },
        cam,
        velocity,
        step: num("step")?,
    };
    Ok(Checkpoint { state, config })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}
