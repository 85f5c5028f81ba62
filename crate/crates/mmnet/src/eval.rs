//! Gradient error and MAD over a dataset at ground-truth resolution.

use mmnet_core::data::Sample;
use mmnet_core::objectives::{metric_gradient_error, metric_mad};
use mmnet_core::AlphaMatte;
use serde::Serialize;

use crate::error::{Error, Result};

/// Gradient error is reported in units of 1e-3 and MAD in units of 1e-2.
pub const GRADIENT_UNIT: f64 = 1e-3;
pub const MAD_UNIT: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageMetrics {
    pub id: String,
    pub height: usize,
    pub width: usize,
    #[serde(rename = "gradient_error_e-3")]
    pub gradient_error: f64,
    #[serde(rename = "mad_e-2")]
    pub mad: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub count: usize,
    #[serde(rename = "mean_gradient_error_e-3")]
    pub mean_gradient_error: f64,
    #[serde(rename = "mean_mad_e-2")]
    pub mean_mad: f64,
    pub images: Vec<ImageMetrics>,
}

/// `predict` must return a matte at the sample's own resolution.
pub fn evaluate(samples: &[Sample], mut predict: impl FnMut(&Sample) -> Result<AlphaMatte>) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Input("dataset is empty; nothing to evaluate".into()));
    }
    let mut images = Vec::with_capacity(samples.len());
    for s in samples {
        let pred = predict(s)?;
        if pred.shape() != s.alpha.shape() {
            return Err(Error::Input(format!(
                "prediction for `{}` has shape {}, ground truth {}",
                s.id,
                pred.shape(),
                s.alpha.shape()
            )));
        }
        images.push(ImageMetrics {
            id: s.id.clone(),
            height: s.height(),
            width: s.width(),
            gradient_error: metric_gradient_error(&pred, &s.alpha)? / GRADIENT_UNIT,
            mad: metric_mad(&pred, &s.alpha)? / MAD_UNIT,
        });
    }
    let n = images.len() as f64;
    Ok(EvalReport {
        count: images.len(),
        mean_gradient_error: images.iter().map(|m| m.gradient_error).sum::<f64>() / n,
        mean_mad: images.iter().map(|m| m.mad).sum::<f64>() / n,
        images,
    })
}
