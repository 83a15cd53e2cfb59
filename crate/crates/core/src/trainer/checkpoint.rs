//! Single-file checkpoints: magic, format version, a JSON metadata block,
//! then every array as little-endian f64 in the order the metadata lists.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::TrainConfig;
use crate::embedding::Background;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::{Tensor, Variable};

pub const MAGIC: &[u8; 8] = b"LSTMFCKP";
pub const FORMAT_VERSION: u32 = 1;

/// Exact position of a ChaCha stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// `u128` word position, as a decimal string.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Config(format!("bad rng word position `{}`", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub best_valid_si_snr: Option<f64>,
    /// Consecutive epochs without validation improvement.
    pub bad_epochs: usize,
    pub rng: Option<RngState>,
    pub train: Option<TrainConfig>,
    /// Embedding background the model was trained with.
    pub background: Option<Background>,
}

#[derive(Serialize, Deserialize)]
struct ArrayMeta {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    model: ModelConfig,
    train: Option<TrainConfig>,
    epoch: usize,
    best_valid_si_snr: Option<f64>,
    bad_epochs: usize,
    rng: Option<RngState>,
    #[serde(default)]
    background: Option<Background>,
    adam: AdamState,
    params: Vec<ArrayMeta>,
}

impl Checkpoint {
    /// A fresh checkpoint around `params` with zeroed optimizer state.
    pub fn initial(params: ModelParams) -> Self {
        let adam = AdamState::new(&params.vars);
        Self {
            params,
            adam,
            epoch: 0,
            best_valid_si_snr: None,
            bad_epochs: 0,
            rng: None,
            train: None,
            background: None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.adam.check(&self.params.vars)?;
        let meta = Meta {
            model: self.params.config().clone(),
            train: self.train.clone(),
            epoch: self.epoch,
            best_valid_si_snr: self.best_valid_si_snr,
            bad_epochs: self.bad_epochs,
            rng: self.rng.clone(),
            background: self.background.clone(),
            adam: self.adam.clone(),
            params: self
                .params
                .vars
                .iter()
                .map(|v| ArrayMeta {
                    name: v.name.clone(),
                    shape: v.value.shape().to_vec(),
                    trainable: v.trainable,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&meta)?;
        let n: usize = self.params.vars.iter().map(Variable::numel).sum();
        let mut out = Vec::with_capacity(20 + json.len() + 24 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let arrays = self
            .params
            .vars
            .iter()
            .map(|v| &v.value)
            .chain(&self.adam.m)
            .chain(&self.adam.v);
        for t in arrays {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Format {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported format version {version}")));
        }
        let json_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..).ok_or_else(|| bad("truncated header"))?;
        if body.len() < json_len {
            return Err(bad("truncated metadata"));
        }
        let mut meta: Meta = serde_json::from_slice(&body[..json_len])
            .map_err(|e| bad(&format!("metadata: {e}")))?;
        let mut data = &body[json_len..];
        let mut take = |shape: &[usize]| -> Result<Tensor> {
            let n: usize = shape.iter().product();
            if data.len() < 8 * n {
                return Err(bad("truncated array data"));
            }
            let values = data[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            data = &data[8 * n..];
            Tensor::new(shape, values)
        };
        let mut vars = Vec::with_capacity(meta.params.len());
        for a in &meta.params {
            let mut v = Variable::new(a.name.clone(), take(&a.shape)?);
            v.trainable = a.trainable;
            vars.push(v);
        }
        meta.adam.m = meta.params.iter().map(|a| take(&a.shape)).collect::<Result<_>>()?;
        meta.adam.v = meta.params.iter().map(|a| take(&a.shape)).collect::<Result<_>>()?;
        if !data.is_empty() {
            return Err(bad("trailing bytes after array data"));
        }
        Ok(Self {
            params: ModelParams::from_vars(meta.model, vars)?,
            adam: meta.adam,
            epoch: meta.epoch,
            best_valid_si_snr: meta.best_valid_si_snr,
            bad_epochs: meta.bad_epochs,
            rng: meta.rng,
            train: meta.train,
            background: meta.background,
        })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
