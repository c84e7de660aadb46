//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `DF2MCKPT`, a little-endian `u32` version, a
//! little-endian `u64` header length, the UTF-8 JSON header, then every
//! tensor as column-major little-endian `f64` in header order.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Df2mModel, ModelConfig, PARAM_NAMES, TEMPORAL_LS};
use crate::mtgp::InducingGrid;
use crate::seqnets::{EncoderConfig, EncoderParams, NamedTensor};
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 8] = b"DF2MCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Spectrally normalized encoder weight.
    pub is_weight: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub encoder: EncoderConfig,
    pub n: usize,
    pub p: usize,
    /// Variable labels of the training panel.
    pub variables: Vec<String>,
    pub grid: Vec<f64>,
    pub inducing: Vec<f64>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Df2mModel,
    pub train: Option<TrainConfig>,
    pub variables: Vec<String>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    fn tensors(&self) -> impl Iterator<Item = &NamedTensor> {
        self.model.params.iter().chain(self.model.encoder_group())
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let m = &self.model;
        let header = Header {
            model: m.config,
            train: self.train,
            encoder: m.encoder.config,
            n: m.n,
            p: m.p,
            variables: self.variables.clone(),
            grid: m.u.clone(),
            inducing: m.grid.v.clone(),
            tensors: self
                .tensors()
                .map(|t| TensorEntry {
                    name: t.name.clone(),
                    rows: t.value.nrows(),
                    cols: t.value.ncols(),
                    is_weight: t.is_weight,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for t in self.tensors() {
            for x in t.value.iter() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("file too short"))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(|_| bad("truncated version"))?;
        let version = u32::from_le_bytes(word);
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let mut long = [0u8; 8];
        r.read_exact(&mut long).map_err(|_| bad("truncated header length"))?;
        let len = usize::try_from(u64::from_le_bytes(long)).map_err(|_| bad("header too large"))?;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json).map_err(|_| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&json)?;

        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let mut data = vec![0.0; e.rows * e.cols];
            for x in data.iter_mut() {
                r.read_exact(&mut long).map_err(|_| bad(format!("truncated tensor {}", e.name)))?;
                *x = f64::from_le_bytes(long);
            }
            tensors.push(NamedTensor {
                name: e.name.clone(),
                value: DMatrix::from_vec(e.rows, e.cols, data),
                is_weight: e.is_weight,
            });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(bad("trailing bytes after last tensor"));
        }

        let np = PARAM_NAMES.len();
        if tensors.len() < np + 1 {
            return Err(bad("missing tensors"));
        }
        let temporal_ls = tensors.pop().filter(|t| t.name == TEMPORAL_LS).ok_or_else(|| bad("missing temporal lengthscale"))?;
        let encoder_tensors = tensors.split_off(np);
        if let Some((t, want)) = tensors.iter().zip(PARAM_NAMES).find(|(t, want)| t.name != *want) {
            return Err(bad(format!("expected tensor {want}, found {}", t.name)));
        }
        let expected = EncoderParams::init(header.encoder);
        if expected.tensors.len() != encoder_tensors.len()
            || expected
                .tensors
                .iter()
                .zip(&encoder_tensors)
                .any(|(a, b)| a.name != b.name || a.value.shape() != b.value.shape())
        {
            return Err(bad("encoder tensors do not match the encoder config"));
        }
        let model = Df2mModel {
            config: header.model,
            grid: InducingGrid::new(header.inducing)?,
            u: header.grid,
            n: header.n,
            p: header.p,
            params: tensors,
            encoder: EncoderParams {
                config: header.encoder,
                tensors: encoder_tensors,
            },
            temporal_ls,
        };
        model.check_shapes().map_err(|e| bad(e.to_string()))?;
        if header.variables.len() != model.p {
            return Err(bad("one variable label per row required"));
        }
        Ok(Self {
            model,
            train: header.train,
            variables: header.variables,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write(std::io::BufWriter::new(file))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read(std::io::BufReader::new(file))
    }
}
