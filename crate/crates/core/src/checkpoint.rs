//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic, format version (`u32` LE), header length (`u64` LE),
//! a JSON header, then every float array as `f64` LE in header order:
//! parameters, prompt, parameter optimizer moments (`m` then `v` per array),
//! prompt optimizer moments.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, ParamArray, SoftPrompt};
use crate::optim::AdamState;

pub const MAGIC: &[u8; 8] = b"PKDCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

/// Position of a ChaCha stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub prompt: Option<SoftPrompt>,
    pub optimizer: Option<Vec<AdamState>>,
    pub prompt_optimizer: Option<AdamState>,
    pub rng: Option<RngState>,
    pub step: usize,
    pub meta: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    frozen: bool,
    arrays: Vec<(String, Vec<usize>)>,
    prompt: Option<(usize, usize)>,
    optimizer_steps: Option<Vec<u64>>,
    prompt_optimizer_step: Option<u64>,
    rng: Option<RngState>,
    step: usize,
    meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(params: ModelParams) -> Self {
        Self {
            params,
            prompt: None,
            optimizer: None,
            prompt_optimizer: None,
            rng: None,
            step: 0,
            meta: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.params.config.clone(),
            frozen: self.params.frozen,
            arrays: self
                .params
                .arrays
                .iter()
                .map(|a| (a.name.clone(), a.shape.clone()))
                .collect(),
            prompt: self.prompt.as_ref().map(|p| (p.rows, p.dim)),
            optimizer_steps: self.optimizer.as_ref().map(|o| o.iter().map(|s| s.step).collect()),
            prompt_optimizer_step: self.prompt_optimizer.as_ref().map(|s| s.step),
            rng: self.rng,
            step: self.step,
            meta: self.meta.clone(),
        };
        if let Some(opt) = &self.optimizer {
            if opt.len() != self.params.arrays.len()
                || opt.iter().zip(&self.params.arrays).any(|(s, a)| s.m.len() != a.data.len())
            {
                return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
            }
        }
        if let (Some(p), Some(s)) = (&self.prompt, &self.prompt_optimizer) {
            if s.m.len() != p.data.len() {
                return Err(Error::Checkpoint("prompt optimizer does not match prompt".into()));
            }
        }
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |xs: &[f64]| xs.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        self.params.arrays.iter().for_each(|a| put(&a.data));
        if let Some(p) = &self.prompt {
            put(&p.data);
        }
        for s in self.optimizer.iter().flatten().chain(&self.prompt_optimizer) {
            put(&s.m);
            put(&s.v);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..).ok_or_else(|| bad("truncated"))?;
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut reader = Floats {
            bytes: &body[hlen..],
        };
        let arrays = header
            .arrays
            .into_iter()
            .map(|(name, shape)| {
                let n = shape.iter().product();
                Ok(ParamArray {
                    name,
                    shape,
                    data: reader.take(n)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let params = ModelParams::from_arrays(header.config, arrays, header.frozen)?;
        let prompt = header
            .prompt
            .map(|(rows, dim)| SoftPrompt::new(rows, dim, reader.take(rows * dim)?))
            .transpose()?;
        let optimizer = header
            .optimizer_steps
            .map(|steps| {
                steps
                    .iter()
                    .zip(&params.arrays)
                    .map(|(&step, a)| reader.adam(a.data.len(), step))
                    .collect::<Result<Vec<_>>>()
            })
            .transpose()?;
        let prompt_optimizer = match (header.prompt_optimizer_step, &prompt) {
            (Some(step), Some(p)) => Some(reader.adam(p.data.len(), step)?),
            (Some(_), None) => return Err(bad("prompt optimizer without prompt")),
            _ => None,
        };
        if !reader.bytes.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            params,
            prompt,
            optimizer,
            prompt_optimizer,
            rng: header.rng,
            step: header.step,
            meta: header.meta,
        })
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes()?)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Floats<'a> {
    bytes: &'a [u8],
}

impl Floats<'_> {
    fn take(&mut self, n: usize) -> Result<Vec<f64>> {
        if self.bytes.len() < n * 8 {
            return Err(Error::Checkpoint("truncated array data".into()));
        }
        let (head, rest) = self.bytes.split_at(n * 8);
        self.bytes = rest;
        Ok(head
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn adam(&mut self, n: usize, step: u64) -> Result<AdamState> {
        Ok(AdamState {
            m: self.take(n)?,
            v: self.take(n)?,
            step,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> ModelConfig {
        ModelConfig {
            vocab_size: 7,
            d_model: 4,
            n_layers: 1,
            n_heads: 2,
            d_ff: 8,
            max_seq_len: 6,
            tie_embeddings: false,
            seed: 5,
        }
    }

    #[test]
    fn round_trip_with_everything() {
        let params = ModelParams::init(&config()).unwrap();
        let mut ck = Checkpoint::new(params.clone());
        ck.prompt = Some(SoftPrompt::new(2, 4, (0..8).map(|i| i as f64 * 0.1).collect()).unwrap());
        let mut opt = params.optimizer_state();
        opt[0].m[0] = 0.25;
        opt[0].step = 3;
        ck.optimizer = Some(opt);
        ck.prompt_optimizer = Some(AdamState::new(8));
        ck.rng = Some(RngState {
            seed: 1,
            stream: 2,
            word_pos: 99,
        });
        ck.step = 17;
        ck.meta.insert("method".into(), "promptkd".into());
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn rejects_corruption() {
        let ck = Checkpoint::new(ModelParams::init(&config()).unwrap());
        let mut bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        bytes.push(0);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
