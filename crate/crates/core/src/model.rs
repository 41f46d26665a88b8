//! The complete network: backbone followed by the alignment decoder.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{backbone_forward, init_backbone, BackboneConfig, FeaturePyramid};
use crate::decoder::{decode, init_decoder, DecoderConfig};
use crate::error::{Error, Result};
use crate::params::{ParamBuilder, ParamStore, Scope};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.decoder.validate()
    }

    pub fn num_classes(&self) -> usize {
        self.decoder.num_classes
    }
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub pyramid: FeaturePyramid,
    /// `[N×K×H×W]`
    pub logits: Tensor,
    /// Offset fields for F2, F3 and pooled F4.
    pub offsets: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct FaceParser {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl FaceParser {
    /// Fresh parameters drawn from a ChaCha stream seeded with `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut b = ParamBuilder::new(&mut params, &mut rng);
        b.scoped("backbone", |b| init_backbone(b, &config.backbone))?;
        let widths = [0, 1, 2, 3].map(|s| config.backbone.stage_channels(s));
        b.scoped("decoder", |b| init_decoder(b, &config.decoder, widths))?;
        Ok(FaceParser { config, params })
    }

    /// Runs the network on a normalised `[N×3×H×W]` batch.
    pub fn forward(&self, image: &Tensor) -> Result<ModelOutput> {
        let pyramid = backbone_forward(image, &self.config.backbone, &Scope::new(&self.params, "backbone"))?;
        let out = decode(&pyramid, &self.config.decoder, &Scope::new(&self.params, "decoder"))?;
        Ok(ModelOutput { pyramid, logits: out.logits, offsets: out.offsets })
    }

    /// Checkpoint with the model configuration as JSON metadata.
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_string(&self.config).map_err(|e| Error::json(path, e))?;
        self.params.write_checkpoint(path, &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, params) = ParamStore::read_checkpoint(path)?;
        let config: ModelConfig = serde_json::from_str(&meta).map_err(|e| Error::json(path, e))?;
        config.validate()?;
        let expected = FaceParser::init(config.clone(), 0)?;
        for (name, t) in expected.params.iter() {
            let got = params.get(name).map_err(|_| {
                Error::Data(format!("{}: checkpoint lacks `{name}`", path.display()))
            })?;
            if got.shape() != t.shape() {
                return Err(Error::Data(format!(
                    "{}: `{name}` has shape {:?}, model expects {:?}",
                    path.display(),
                    got.shape(),
                    t.shape()
                )));
            }
        }
        if params.len() != expected.params.len() {
            return Err(Error::Data(format!(
                "{}: checkpoint holds {} tensors, model has {}",
                path.display(),
                params.len(),
                expected.params.len()
            )));
        }
        Ok(FaceParser { config, params })
    }
}
