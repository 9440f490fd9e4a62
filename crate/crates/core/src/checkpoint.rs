//! Binary checkpoint format.
//!
//! Little-endian layout:
//!
//! ```text
//! "DSM1" | version u32 | header_len u32 | header (UTF-8 JSON)
//! repeated: name_len u32 | name | rank u32 | dims u32 × rank | f32 × Π dims
//! ```
//!
//! The JSON header carries the encoder hyper-parameters and the id-ordered
//! vocabulary. Tensors appear in the canonical order of
//! [`StyleModel::tensors`].

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::compat::StyleModel;
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::recommend::ByteReader;
use crate::sentmodel::EncoderHyperParams;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DSM1";
pub const CHECKPOINT_VERSION: u32 = 1;
const FORMAT: &str = "DSM1 checkpoint";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub vocab: Vocabulary,
    pub model: StyleModel<f32>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    hyper: EncoderHyperParams,
    vocab: Vec<String>,
}

impl Checkpoint {
    pub fn new(vocab: Vocabulary, model: StyleModel<f32>) -> Result<Self> {
        if vocab.len() != model.vocab_size() {
            return Err(Error::shape(
                "Checkpoint::new vocabulary",
                model.vocab_size(),
                vocab.len(),
            ));
        }
        Ok(Self { vocab, model })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            hyper: self.model.hyper.clone(),
            vocab: self.vocab.tokens().to_vec(),
        })
        .map_err(|e| Error::format(FORMAT, "header", e.to_string()))?;

        let mut out = Vec::with_capacity(12 + header.len() + 4 * self.model.parameter_count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.model.tensors() {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for &d in &t.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, FORMAT);
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::format(FORMAT, "magic", "expected \"DSM1\""));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(
                FORMAT,
                "version",
                format!("unsupported version {version}"),
            ));
        }
        let header_len = r.u32("header length")? as usize;
        let header: Header = serde_json::from_slice(r.take(header_len, "header")?)
            .map_err(|e| Error::format(FORMAT, "header", e.to_string()))?;
        header
            .hyper
            .validate()
            .map_err(|e| Error::format(FORMAT, "header", e.to_string()))?;
        let vocab = Vocabulary::from_tokens(header.vocab)
            .map_err(|e| Error::format(FORMAT, "vocabulary", e.to_string()))?;

        let mut model = StyleModel::<f32>::zeros(header.hyper, vocab.len());
        let expected: Vec<(String, Vec<usize>)> = model
            .tensors()
            .into_iter()
            .map(|t| (t.name, t.dims))
            .collect();
        for ((name, dims), slot) in expected.iter().zip(model.tensors_mut()) {
            let len = r.u32("tensor name length")? as usize;
            let got = std::str::from_utf8(r.take(len, name)?)
                .map_err(|_| Error::format(FORMAT, name.as_str(), "tensor name is not UTF-8"))?;
            if got != name {
                return Err(Error::format(
                    FORMAT,
                    name.as_str(),
                    format!("found tensor {got:?}"),
                ));
            }
            let rank = r.u32(name)? as usize;
            let got_dims = (0..rank)
                .map(|_| r.u32(name).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            if &got_dims != dims {
                return Err(Error::format(
                    FORMAT,
                    name.as_str(),
                    format!("shape {got_dims:?} does not match hyper-parameters {dims:?}"),
                ));
            }
            for v in slot.iter_mut() {
                *v = r.f32(name)?;
            }
        }
        r.finish()?;
        Ok(Self { vocab, model })
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let bytes = checkpoint.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
