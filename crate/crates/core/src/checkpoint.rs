//! Self-describing parameter checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Vocab;
use crate::entailment::StackDims;
use crate::error::{MulteeError, Result};
use crate::tensor::Mat;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    /// `"nli"` for a bare entailment model, `"qa"` for a QA model.
    pub kind: String,
    pub dims: StackDims,
    /// Model configuration for QA checkpoints.
    #[serde(default)]
    pub model: Option<serde_json::Value>,
    pub vocab: Vec<String>,
    pub vocab_hash: String,
    pub params: BTreeMap<String, Mat>,
}

impl Checkpoint {
    pub fn new(
        kind: &str,
        dims: StackDims,
        model: Option<serde_json::Value>,
        vocab: &Vocab,
        params: BTreeMap<String, Mat>,
    ) -> Self {
        Checkpoint {
            format_version: FORMAT_VERSION,
            kind: kind.to_string(),
            dims,
            model,
            vocab: vocab.tokens().to_vec(),
            vocab_hash: vocab.hash(),
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    /// Reads a checkpoint and verifies its version and vocabulary hash.
    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path)
            .map_err(|e| MulteeError::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        let ck: Checkpoint = serde_json::from_slice(&bytes)?;
        if ck.format_version != FORMAT_VERSION {
            return Err(MulteeError::Checkpoint(format!(
                "unsupported format version {} (expected {FORMAT_VERSION})",
                ck.format_version
            )));
        }
        if ck.vocab()?.hash() != ck.vocab_hash {
            return Err(MulteeError::Checkpoint("vocabulary hash does not match stored vocabulary".into()));
        }
        Ok(ck)
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::from_tokens(self.vocab.clone())
    }

    pub fn check_compatible(&self, dims: &StackDims, vocab: &Vocab) -> Result<()> {
        if self.dims != *dims {
            return Err(MulteeError::Checkpoint(format!(
                "checkpoint dims {:?} differ from model dims {dims:?}",
                self.dims
            )));
        }
        if self.vocab_hash != vocab.hash() {
            return Err(MulteeError::Checkpoint(
                "checkpoint was trained with a different vocabulary".into(),
            ));
        }
        Ok(())
    }
}
