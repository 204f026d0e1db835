//! Binary checkpoint files.
//!
//! Layout: magic `DDEP`, u32 version, u32-length-prefixed UTF-8 config
//! blob (sorted `key = value` lines), u32 tensor count, then per tensor a
//! u32-length-prefixed name, u8 rank, u32 extents and little-endian f32
//! data. Integers are little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use crate::data::NormStats;
use crate::error::{CheckpointFault, Error, Result};
use crate::model::{build_model, Head, Model, ModelConfig};
use crate::optim::{Param, ParamSet};
use crate::tensor::Tensor;

use super::Stage;

pub const MAGIC: &[u8; 4] = b"DDEP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub stage: Stage,
    pub model: Model,
    pub seed: u64,
    pub steps: u64,
    pub config_hash: String,
    pub norm: NormStats,
    /// The producing stage's effective settings, minus `model.*`.
    pub settings: BTreeMap<String, String>,
}

fn floats(v: &[f64; 3]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl Checkpoint {
    fn blob(&self) -> String {
        let mut keys: BTreeMap<String, String> =
            self.settings.iter().filter(|(k, _)| !k.starts_with("model.")).map(|(k, v)| (k.clone(), v.clone())).collect();
        keys.extend(self.model.config.entries());
        for (k, v) in [
            ("stage", self.stage.to_string()),
            ("seed", self.seed.to_string()),
            ("steps", self.steps.to_string()),
            ("config_hash", self.config_hash.clone()),
            ("norm_mean", floats(&self.norm.mean)),
            ("norm_std", floats(&self.norm.std)),
        ] {
            keys.insert(format!("checkpoint.{k}"), v);
        }
        keys.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let blob = self.blob();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
        out.extend_from_slice(blob.as_bytes());
        out.extend_from_slice(&(self.model.params.len() as u32).to_le_bytes());
        for (name, p) in self.model.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(p.value.shape().len() as u8);
            for &e in p.value.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            out.extend_from_slice(&p.value.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::checkpoint(CheckpointFault::BadMagic, "not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::checkpoint(
                CheckpointFault::UnsupportedVersion,
                format!("format version {version}, this build reads {VERSION}"),
            ));
        }
        let blob_len = r.u32()? as usize;
        let blob = std::str::from_utf8(r.take(blob_len)?)
            .map_err(|_| Error::checkpoint(CheckpointFault::Malformed, "config blob is not UTF-8"))?;
        let mut keys = parse_blob(blob)?;

        let config = model_config(&mut keys)?;
        let meta = |keys: &mut BTreeMap<String, String>, k: &str| {
            keys.remove(&format!("checkpoint.{k}"))
                .ok_or_else(|| Error::checkpoint(CheckpointFault::Malformed, format!("missing `checkpoint.{k}`")))
        };
        let stage = Stage::parse(&meta(&mut keys, "stage")?).map_err(|e| malformed(e.to_string()))?;
        let seed = meta(&mut keys, "seed")?.parse().map_err(|_| malformed("bad checkpoint.seed"))?;
        let steps = meta(&mut keys, "steps")?.parse().map_err(|_| malformed("bad checkpoint.steps"))?;
        let config_hash = meta(&mut keys, "config_hash")?;
        let norm = NormStats { mean: triple(&meta(&mut keys, "norm_mean")?)?, std: triple(&meta(&mut keys, "norm_std")?)? };

        let expected = build_model(&config, 0).map_err(|e| malformed(format!("embedded model config: {e}")))?.params;
        let count = r.u32()? as usize;
        let mut params = ParamSet::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| malformed("tensor name is not UTF-8"))?.to_string();
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r.take(n * 4)?.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            let Some(want) = expected.get(&name) else {
                return Err(malformed(format!("unexpected tensor `{name}` for the embedded model config")));
            };
            if want.value.shape() != shape.as_slice() {
                return Err(Error::checkpoint(
                    CheckpointFault::ShapeMismatch,
                    format!("`{name}` is {shape:?} but the embedded model config implies {:?}", want.value.shape()),
                ));
            }
            if params.get(&name).is_some() {
                return Err(malformed(format!("duplicate tensor `{name}`")));
            }
            params.insert(name, Tensor::new(&shape, data)?);
        }
        if let Some(missing) = expected.names().find(|n| params.get(n).is_none()) {
            return Err(malformed(format!("missing tensor `{missing}`")));
        }
        if r.pos != bytes.len() {
            return Err(malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { stage, model: Model { config, params }, seed, steps, config_hash, norm, settings: keys })
    }

    /// Writes via a temporary sibling and a rename, so readers never see a
    /// partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("partial");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint { fault, detail } => Error::Checkpoint { fault, detail: format!("{}: {detail}", path.display()) },
            other => other,
        })
    }

    /// Parameters loaded from a checkpoint start trainable with fresh
    /// optimizer state.
    pub fn into_model(self) -> Model {
        let mut model = self.model;
        model.params.iter_mut().for_each(|(_, p)| *p = Param::new(p.value.clone()));
        model
    }
}

fn malformed(detail: impl Into<String>) -> Error {
    Error::checkpoint(CheckpointFault::Malformed, detail)
}

fn parse_blob(blob: &str) -> Result<BTreeMap<String, String>> {
    blob.lines()
        .map(|line| {
            line.split_once(" = ")
                .or_else(|| line.strip_suffix(" =").map(|k| (k, "")))
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| malformed(format!("bad config line `{line}`")))
        })
        .collect()
}

fn triple(s: &str) -> Result<[f64; 3]> {
    let v: Vec<f64> = s.split(',').map(|x| x.parse().map_err(|_| malformed(format!("bad float `{x}`")))).collect::<Result<_>>()?;
    v.try_into().map_err(|_| malformed(format!("expected three values, got `{s}`")))
}

fn model_config(keys: &mut BTreeMap<String, String>) -> Result<ModelConfig> {
    let mut take = |k: &str| keys.remove(&format!("model.{k}")).ok_or_else(|| malformed(format!("missing `model.{k}`")));
    let int = |s: String| s.parse::<usize>().map_err(|_| malformed(format!("bad integer `{s}`")));
    let list = |s: String| s.split(',').map(|x| x.parse::<usize>().map_err(|_| malformed(format!("bad list `{s}`")))).collect::<Result<Vec<_>>>();
    Ok(ModelConfig {
        in_channels: int(take("in_channels")?)?,
        encoder_widths: list(take("encoder_widths")?)?,
        base_decoder_widths: list(take("decoder_widths")?)?,
        decoder_width_multiplier: int(take("decoder_width_multiplier")?)?,
        bottleneck_attention: take("bottleneck_attention")?.parse().map_err(|_| malformed("bad model.bottleneck_attention"))?,
        num_classes: int(take("num_classes")?)?,
        head: Head::parse(&take("head")?).map_err(|e| malformed(e.to_string()))?,
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::checkpoint(
                CheckpointFault::Truncated,
                format!("needed {n} bytes at offset {}, file has {}", self.pos, self.bytes.len()),
            )
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
