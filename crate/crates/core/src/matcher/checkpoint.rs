//! Checkpoint files: the magic `LFM3D-CKPT`, a little-endian `u32` format
//! version and record count, then one record per tensor:
//! `name_len: u32, name: utf-8, rank: u32, dims: u32 × rank, payload: f32 × Π dims`.
//! Architecture settings travel as `config.*` records of shape `[1]`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::model::{MatcherConfig, MatcherWeights};
use super::train::TrainLogEntry;
use super::MatcherError;
use crate::encoding::SignalEncoding;
use crate::nn::Parameters;

pub const MAGIC: &[u8; 10] = b"LFM3D-CKPT";
pub const VERSION: u32 = 1;

struct Record {
    dims: Vec<usize>,
    values: Vec<f32>,
}

fn err(msg: impl Into<String>) -> MatcherError {
    MatcherError::Checkpoint(msg.into())
}

fn config_records(w: &MatcherWeights) -> Vec<(String, f32)> {
    let c = &w.config;
    let mut out = vec![
        ("config.descriptor_dim".to_string(), c.descriptor_dim as f32),
        ("config.num_layers".to_string(), c.num_layers as f32),
        ("config.num_heads".to_string(), c.num_heads as f32),
        ("config.sinkhorn_iterations".to_string(), c.sinkhorn_iterations as f32),
    ];
    if let Some(s) = &w.encoder.mlp3d {
        out.push(("config.signal_dim".to_string(), s.signal_dim as f32));
        let freq = match s.encoding {
            SignalEncoding::Raw => 0,
            SignalEncoding::Positional { frequencies } => frequencies,
        };
        out.push(("config.frequencies".to_string(), freq as f32));
    }
    out
}

pub fn to_bytes(weights: &MatcherWeights) -> Vec<u8> {
    let mut records: Vec<(String, Vec<usize>, Vec<f32>)> = config_records(weights)
        .into_iter()
        .map(|(n, v)| (n, vec![1], vec![v]))
        .collect();
    weights.visit("", &mut |name, shape, values| {
        records.push((name.to_string(), shape.to_vec(), values.iter().map(|&v| v as f32).collect()));
    });
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, dims, values) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], MatcherError> {
        if self.pos + n > self.bytes.len() {
            return Err(err("truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, MatcherError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<MatcherWeights, MatcherError> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(MAGIC.len())? != MAGIC {
        return Err(err("bad magic"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(err(format!("unsupported version {version}")));
    }
    let count = c.u32()? as usize;
    let mut records = BTreeMap::new();
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?).map_err(|_| err("record name is not utf-8"))?.to_string();
        let rank = c.u32()? as usize;
        let dims = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = dims.iter().product();
        let values = c
            .take(4 * n)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        records.insert(name, Record { dims, values });
    }
    if c.pos != bytes.len() {
        return Err(err("trailing bytes after the last record"));
    }

    let scalar = |name: &str| -> Result<Option<usize>, MatcherError> {
        match records.get(name) {
            None => Ok(None),
            Some(r) if r.values.len() == 1 => Ok(Some(r.values[0] as usize)),
            Some(_) => Err(err(format!("{name} must hold one value"))),
        }
    };
    let need = |name: &str| scalar(name)?.ok_or_else(|| err(format!("missing {name}")));
    let config = MatcherConfig {
        descriptor_dim: need("config.descriptor_dim")?,
        num_layers: need("config.num_layers")?,
        num_heads: need("config.num_heads")?,
        sinkhorn_iterations: need("config.sinkhorn_iterations")?,
    };
    let mut weights = MatcherWeights::init(config, 0)?;
    if let Some(signal_dim) = scalar("config.signal_dim")? {
        let encoding = match need("config.frequencies")? {
            0 => SignalEncoding::Raw,
            frequencies => SignalEncoding::Positional { frequencies },
        };
        weights.add_signal_branch(signal_dim, encoding, 0);
    }
    let mut problem = None;
    let mut seen = 0;
    weights.visit_mut("", &mut |name, shape, values| {
        match records.get(name) {
            Some(r) if r.dims == shape => {
                for (dst, src) in values.iter_mut().zip(&r.values) {
                    *dst = *src as f64;
                }
                seen += 1;
            }
            Some(r) => {
                problem.get_or_insert(format!("{name}: stored shape {:?}, expected {shape:?}", r.dims));
            }
            None => {
                problem.get_or_insert(format!("missing tensor {name}"));
            }
        }
    });
    if let Some(p) = problem {
        return Err(err(p));
    }
    let expected = records.keys().filter(|k| !k.starts_with("config.")).count();
    if seen != expected {
        return Err(err(format!("{} unrecognized tensors", expected - seen)));
    }
    Ok(weights)
}

pub fn save(path: &Path, weights: &MatcherWeights) -> std::io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&to_bytes(weights))?;
    f.sync_all()
}

pub fn load(path: &Path) -> Result<MatcherWeights, MatcherError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| err(format!("{}: {e}", path.display())))?;
    from_bytes(&bytes)
}

/// Rounds every tensor to the precision stored on disk.
pub fn quantize(weights: &MatcherWeights) -> MatcherWeights {
    let mut w = weights.clone();
    w.visit_mut("", &mut |_, _, v| v.iter_mut().for_each(|x| *x = *x as f32 as f64));
    w
}

/// Writes `iteration,loss,learning_rate` rows.
pub fn write_training_log(path: &Path, log: &[TrainLogEntry]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iteration", "loss", "learning_rate"])?;
    for e in log {
        w.write_record([e.iteration.to_string(), e.loss.to_string(), e.learning_rate.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
