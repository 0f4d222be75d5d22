//! Self-describing JSON checkpoint of a trained TAM.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::{argmax, LabelSpace};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

use super::model::{forward, ModelSpec, ParamSet, Vocab};
use super::TrainConfig;

pub const CHECKPOINT_FORMAT: &str = "unigen-tam/1";

/// Texts are encoded in chunks of this many to bound tape memory.
const ENCODE_CHUNK: usize = 64;

/// A trained query encoder with everything needed to run it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: TrainConfig,
    pub config_hash: String,
    pub spec: ModelSpec,
    pub label_space: LabelSpace,
    pub vocab: Vocab,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer(&mut w, self).map_err(|e| Error::Validation(e.to_string()))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Validation(format!(
                "unsupported checkpoint format {:?}",
                ckpt.format
            )));
        }
        ckpt.spec.validate()?;
        Ok(ckpt)
    }

    /// Class logits (`n x K`) and unit projections (`n x proj_dim`).
    pub fn encode(&self, texts: &[&str]) -> (Matrix, Matrix) {
        let k = self.spec.num_classes;
        let mut logits = Vec::with_capacity(texts.len() * k);
        let mut proj = Vec::with_capacity(texts.len() * self.spec.proj_dim);
        for chunk in texts.chunks(ENCODE_CHUNK) {
            let batch: Vec<Vec<usize>> = chunk
                .iter()
                .map(|t| self.vocab.encode(t, self.spec.max_len))
                .collect();
            let mut tape = Tape::new();
            let out = forward(&self.spec, &mut tape, &self.params, &batch);
            if let Some(l) = out.logits {
                logits.extend_from_slice(tape.value(l).data());
            }
            proj.extend_from_slice(tape.value(out.projections).data());
        }
        (
            Matrix::from_vec(texts.len(), k, logits),
            Matrix::from_vec(texts.len(), self.spec.proj_dim, proj),
        )
    }

    /// Argmax class per text, ties to the lowest id.
    pub fn predict(&self, texts: &[&str]) -> Vec<usize> {
        let (logits, _) = self.encode(texts);
        (0..logits.rows()).map(|r| argmax(logits.row(r))).collect()
    }
}
