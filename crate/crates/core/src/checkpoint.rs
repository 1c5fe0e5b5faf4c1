//! Versioned JSON checkpoints. Parameters are stored by name with their
//! exact f64 values; the frozen encoder is identified, not stored.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::encoder::FeatureExtractor;
use crate::error::{Error, IoContext, Result};
use crate::model::Model;
use crate::tensor::Tensor;
use crate::train::StepRecord;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: RunConfig,
    pub extractor_tag: String,
    pub extractor_fingerprint: String,
    pub dim: usize,
    pub encoder_layers: usize,
    pub categories: Vec<String>,
    pub step: usize,
    /// Digest of every parameter's bits, checked on load.
    pub checksum: String,
    pub params: Vec<NamedArray>,
    pub losses: Vec<StepRecord>,
    /// Evaluation results appended after training, keyed by report name.
    pub metrics: Vec<BTreeMap<String, f64>>,
}

#[derive(Deserialize)]
struct VersionProbe {
    version: u32,
}

impl Checkpoint {
    pub fn new(
        cfg: &RunConfig,
        model: &Model,
        extractor: &dyn FeatureExtractor,
        categories: &[String],
        step: usize,
        losses: Vec<StepRecord>,
    ) -> Self {
        let params = model
            .store
            .ids()
            .map(|id| {
                let t = model.store.get(id);
                NamedArray { name: model.store.name(id).to_string(), shape: t.shape().to_vec(), data: t.data().to_vec() }
            })
            .collect();
        Self {
            version: CHECKPOINT_VERSION,
            config: cfg.clone(),
            extractor_tag: extractor.tag().to_string(),
            extractor_fingerprint: extractor.fingerprint(),
            dim: extractor.dim(),
            encoder_layers: extractor.num_layers(),
            categories: categories.to_vec(),
            step,
            checksum: model.store.checksum(),
            params,
            losses,
            metrics: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let probe: VersionProbe =
            serde_json::from_str(text).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        if probe.version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion { expected: CHECKPOINT_VERSION, found: probe.version });
        }
        let ck: Self = serde_json::from_str(text).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        let found = ck.model()?.store.checksum();
        if found != ck.checksum {
            return Err(Error::CorruptCheckpoint(format!("parameter digest {found} does not match {}", ck.checksum)));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path).at(path)?)
    }

    /// Rebuilds the model with the stored parameter values.
    pub fn model(&self) -> Result<Model> {
        let mut model = Model::init(&self.config, self.dim, self.encoder_layers)?;
        let named = self
            .params
            .iter()
            .map(|a| {
                if a.shape.iter().product::<usize>() != a.data.len() {
                    return Err(Error::CorruptCheckpoint(format!("`{}` data does not fill {:?}", a.name, a.shape)));
                }
                Ok((a.name.clone(), Tensor::new(a.shape.clone(), a.data.clone())))
            })
            .collect::<Result<Vec<_>>>()?;
        model.load_params(&named)?;
        Ok(model)
    }

    /// Builds the frozen encoder from the stored config and checks it is
    /// the one the checkpoint was trained against.
    pub fn extractor(&self) -> Result<Box<dyn FeatureExtractor>> {
        let ex = self.config.extractor.build()?;
        if ex.fingerprint() != self.extractor_fingerprint {
            return Err(Error::CorruptCheckpoint(format!(
                "encoder `{}` differs from the training encoder `{}`",
                ex.tag(),
                self.extractor_tag
            )));
        }
        Ok(ex)
    }
}
