//! A loaded model of any kind, ready for inference at arbitrary image sizes.

use std::path::Path;

use mmnet_core::arch::{MMNet, ModelWeights};
use mmnet_core::ops::bilinear_resize;
use mmnet_core::qmodel::{PathCounters, QuantModel};
use mmnet_core::{AlphaMatte, Tensor};

use crate::error::{Error, FormatError, Result};
use crate::format::{ModelFile, ModelKind};

#[derive(Clone, Debug)]
pub enum Engine {
    Float(ModelWeights),
    Quantized(QuantModel),
}

#[derive(Clone, Debug)]
pub struct LoadedModel {
    pub net: MMNet,
    pub kind: ModelKind,
    pub engine: Engine,
}

impl LoadedModel {
    pub fn from_file(file: &ModelFile) -> Result<LoadedModel, FormatError> {
        let (net, engine) = match file.kind {
            ModelKind::Quantized => {
                let (net, q) = file.to_quant_model()?;
                (net, Engine::Quantized(q))
            }
            ModelKind::Float | ModelKind::Checkpoint => {
                let (net, w) = file.to_weights()?;
                (net, Engine::Float(w))
            }
        };
        Ok(LoadedModel { net, kind: file.kind, engine })
    }

    pub fn load(path: &Path) -> Result<LoadedModel> {
        LoadedModel::from_file(&ModelFile::load(path)?).map_err(|e| Error::format(path, e))
    }

    pub fn input_size(&self) -> usize {
        self.net.config.input_size
    }

    /// Forward pass on an image already at the model's input size.
    pub fn predict(&self, image: &Tensor) -> Result<(AlphaMatte, PathCounters)> {
        Ok(match &self.engine {
            Engine::Float(w) => (self.net.forward(w, image)?, PathCounters::default()),
            Engine::Quantized(q) => q.forward(&self.net, image)?,
        })
    }

    /// Resizes to the input size, runs the network and, if `original_size`,
    /// resizes the matte back to the image's resolution.
    pub fn infer(&self, image: &Tensor, original_size: bool) -> Result<AlphaMatte> {
        let s = self.input_size();
        let (h, w) = (image.shape().h, image.shape().w);
        let input = if (h, w) == (s, s) { image.clone() } else { bilinear_resize(image, s, s, false)? };
        let (alpha, _) = self.predict(&input)?;
        if !original_size || (h, w) == (s, s) {
            return Ok(alpha);
        }
        Ok(AlphaMatte::clamped(bilinear_resize(alpha.tensor(), h, w, false)?)?)
    }
}
