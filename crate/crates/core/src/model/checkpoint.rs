//! Single-file JSON checkpoints: configuration plus named parameter tensors.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LossConfig, Model, ModelConfig};
use crate::codec::{SettingSpec, Tokenizer};
use crate::corpus::ErrorTypeRegistry;
use crate::error::{Error, Result};
use crate::tensor::Mat;

const FORMAT: &str = "gecx-checkpoint/1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    #[serde(flatten)]
    pub value: Mat,
}

/// Everything needed to decode with a trained model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub model: ModelConfig,
    pub spec: SettingSpec,
    pub loss: LossConfig,
    pub tokenizer: Tokenizer,
    pub registry: ErrorTypeRegistry,
    pub params: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(model: &Model, spec: SettingSpec, loss: LossConfig, tokenizer: Tokenizer, registry: ErrorTypeRegistry) -> Self {
        let p = model.params();
        Checkpoint {
            format: FORMAT.into(),
            model: model.config().clone(),
            spec,
            loss,
            tokenizer,
            registry,
            params: p
                .names()
                .iter()
                .zip(p.values())
                .map(|(name, value)| NamedTensor {
                    name: name.clone(),
                    value: value.clone(),
                })
                .collect(),
        }
    }

    /// Rebuilds the model, checking every tensor's name and shape.
    pub fn to_model(&self) -> Result<Model> {
        if self.format != FORMAT {
            return Err(Error::Validation(format!("unsupported checkpoint format {:?}", self.format)));
        }
        let mut model = Model::new(self.model.clone())?;
        let store = model.params_mut();
        if store.len() != self.params.len() {
            return Err(Error::Validation(format!(
                "checkpoint has {} tensors, model expects {}",
                self.params.len(),
                store.len()
            )));
        }
        for (id, t) in store.ids().collect::<Vec<_>>().into_iter().zip(&self.params) {
            let (name, slot) = (store.name(id).to_string(), store.get_mut(id));
            if name != t.name || slot.shape() != t.value.shape() || t.value.data.len() != t.value.rows * t.value.cols {
                return Err(Error::Validation(format!(
                    "tensor {} {:?} does not match {} {:?}",
                    t.name,
                    t.value.shape(),
                    name,
                    slot.shape()
                )));
            }
            *slot = t.value.clone();
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer(&mut w, self)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(BufReader::new(file))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{SubwordTokenizer, TokenizerKind};

    #[test]
    fn round_trip_preserves_outputs() {
        let tok = Tokenizer::fit(TokenizerKind::Whitespace, ["a", "b"], 2);
        let model = Model::new(ModelConfig {
            d_model: 8,
            heads: 2,
            ff_dim: 8,
            encoder_layers: 1,
            decoder_layers: 1,
            vocab_size: tok.vocab_size(),
            type_count: 2,
            tagging: true,
            ..ModelConfig::default()
        })
        .unwrap();
        let reg = ErrorTypeRegistry::new(vec!["x".into(), "y".into()]).unwrap();
        let ck = Checkpoint::new(&model, SettingSpec::baseline(), LossConfig::default(), tok, reg);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap().to_model().unwrap();
        assert_eq!(back.params().values(), model.params().values());
        let st = back.encode(&[6, 7]).unwrap();
        assert_eq!(
            back.decode_step(&st, &[]).unwrap(),
            model.decode_step(&model.encode(&[6, 7]).unwrap(), &[]).unwrap()
        );
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let tok = Tokenizer::fit(TokenizerKind::Whitespace, ["a"], 1);
        let cfg = ModelConfig {
            d_model: 4,
            heads: 1,
            ff_dim: 4,
            encoder_layers: 1,
            decoder_layers: 1,
            vocab_size: tok.vocab_size(),
            type_count: 1,
            ..ModelConfig::default()
        };
        let model = Model::new(cfg).unwrap();
        let reg = ErrorTypeRegistry::new(vec!["x".into()]).unwrap();
        let mut ck = Checkpoint::new(&model, SettingSpec::baseline(), LossConfig::default(), tok, reg);
        ck.params[0].value = Mat::zeros(1, 1);
        assert!(ck.to_model().is_err());
    }
}
