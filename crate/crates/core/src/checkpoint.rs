//! Binary checkpoint container.
//!
//! Layout (little-endian): `b"CFCK"`, u32 version, u32 text_dim,
//! u32 region_dim, u32 config length, config JSON bytes, u32 tensor count,
//! then per tensor: u32 name length, name bytes, u32 rank, rank x u32 shape,
//! product(shape) x f32.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::nn::Parameters;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ModelParams<f32>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint(config: &TrainConfig, params: &ModelParams<f32>) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(config)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut out, params.text_dim())?;
    put_u32(&mut out, params.region_dim())?;
    put_u32(&mut out, json.len())?;
    out.extend_from_slice(&json);
    let layout = params.layout();
    put_u32(&mut out, layout.len())?;
    let mut status = Ok(());
    params.visit("", &mut |name, shape, data| {
        if status.is_err() {
            return;
        }
        status = (|| {
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, shape.len())?;
            for &s in shape {
                put_u32(&mut out, s)?;
            }
            for x in data {
                out.extend_from_slice(&x.to_le_bytes());
            }
            Ok(())
        })();
    });
    status.map(|_| out)
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    config: &TrainConfig,
    params: &ModelParams<f32>,
) -> Result<()> {
    let bytes = encode_checkpoint(config, params)?;
    let mut file = File::create(path)?;
    file.write_all(&bytes)?;
    file.sync_all()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Corrupt(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let text_dim = r.u32()?;
    let region_dim = r.u32()?;
    let json_len = r.u32()?;
    let config: TrainConfig = serde_json::from_slice(r.take(json_len)?)?;
    config.validate()?;

    // fresh parameters give the expected names and shapes; values are replaced
    let mut params: ModelParams<f32> = ModelParams::init(
        &mut ChaCha8Rng::seed_from_u64(0),
        text_dim,
        region_dim,
        &config.dims,
    );
    let layout = params.layout();
    let count = r.u32()?;
    if count != layout.len() {
        return Err(Error::Corrupt(format!(
            "checkpoint holds {count} tensors, model expects {}",
            layout.len()
        )));
    }
    let mut flat = Vec::with_capacity(params.param_count());
    for (name, shape, _) in &layout {
        let name_len = r.u32()?;
        let found = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?;
        if found != name {
            return Err(Error::Corrupt(format!(
                "expected tensor `{name}`, found `{found}`"
            )));
        }
        let rank = r.u32()?;
        let found_shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        if &found_shape != shape {
            return Err(Error::Corrupt(format!(
                "tensor `{name}` has shape {found_shape:?}, expected {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        let payload = r.take(n * 4)?;
        flat.extend(
            payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])),
        );
    }
    if r.pos != bytes.len() {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    params.load_flat(&flat)?;
    if !params.all_finite() {
        return Err(Error::Validation(
            "checkpoint contains non-finite parameters".into(),
        ));
    }
    Ok(Checkpoint { config, params })
}
