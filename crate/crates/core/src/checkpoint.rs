//! Model checkpoints: config, vocabulary and every named tensor in one
//! versioned JSON file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::task::TaskConfig;
use crate::tensor::ParamStore;
use crate::vocab::Vocab;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub method: String,
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub task: TaskConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn new(
        method: impl Into<String>,
        seed: u64,
        encoder: EncoderConfig,
        task: TaskConfig,
        vocab: Vocab,
        params: ParamStore,
    ) -> Checkpoint {
        Checkpoint {
            format_version: FORMAT_VERSION,
            method: method.into(),
            seed,
            encoder,
            task,
            vocab,
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path)?;
        let mut ckpt: Checkpoint =
            serde_json::from_str(&text).map_err(|e| Error::InvalidCheckpoint(e.to_string()))?;
        ckpt.vocab.rebuild_index();
        ckpt.validate()?;
        Ok(ckpt)
    }

    /// Structural checks that serialization alone cannot enforce.
    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::InvalidCheckpoint(format!(
                "format version {} (this build reads {FORMAT_VERSION})",
                self.format_version
            )));
        }
        self.encoder.validate()?;
        self.task.validate()?;
        for (name, tensor) in self.params.iter() {
            let numel: usize = tensor.shape.iter().product();
            if numel != tensor.data.len() {
                return Err(Error::InvalidCheckpoint(format!(
                    "tensor {name:?} claims shape {:?} but holds {} values",
                    tensor.shape,
                    tensor.data.len()
                )));
            }
            if !tensor.is_finite() {
                return Err(Error::InvalidCheckpoint(format!(
                    "tensor {name:?} contains non-finite values"
                )));
            }
        }
        for (name, rows, cols) in [
            ("tok_emb", self.vocab.len(), self.encoder.dim),
            ("pos_emb", self.encoder.max_len, self.encoder.dim),
            ("mlm.w", self.encoder.dim, self.encoder.vocab_size),
        ] {
            let tensor = self.params.try_get(name).ok_or_else(|| {
                Error::InvalidCheckpoint(format!("missing tensor {name:?}"))
            })?;
            if tensor.shape != [rows, cols] {
                return Err(Error::InvalidCheckpoint(format!(
                    "tensor {name:?} has shape {:?}, expected [{rows}, {cols}]",
                    tensor.shape
                )));
            }
        }
        if self.encoder.vocab_size != self.vocab.len() {
            return Err(Error::InvalidCheckpoint(format!(
                "encoder vocab_size {} != vocabulary size {}",
                self.encoder.vocab_size,
                self.vocab.len()
            )));
        }
        Ok(())
    }
}
