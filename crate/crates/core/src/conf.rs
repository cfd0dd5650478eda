//! Per-primitive confidence from semantic entropy and opacity.
//!
//! Default mapping: `C = (1 - min(H / H_max, 1))^p · a`. The sharp sigmoid
//! variant replaces the semantic factor with `σ(-β (H - γ))`. Batch softmax
//! normalization with a temperature is available but off by default.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::gaussian::GaussianPrimitive;
use crate::scalar::{sigmoid, softmax, softmax_with_temperature, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Power,
    SharpSigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalize {
    None,
    Softmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfidenceConfig {
    pub h_max: f64,
    pub sharpness: f64,
    pub transform: Transform,
    pub sigmoid_beta: f64,
    pub sigmoid_gamma: f64,
    pub normalize: Normalize,
    pub softmax_temperature: f64,
}

impl Default for ConfidenceConfig {
    fn default() -> Self {
        Self {
            h_max: 3.0,
            sharpness: 3.0,
            transform: Transform::Power,
            sigmoid_beta: 10.0,
            sigmoid_gamma: 1.5,
            normalize: Normalize::None,
            softmax_temperature: 0.2,
        }
    }
}

impl ConfidenceConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("h_max", self.h_max),
            ("sharpness", self.sharpness),
            ("softmax_temperature", self.softmax_temperature),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return invalid(format!("confidence.{name} must be > 0, got {v}"));
            }
        }
        if !self.sigmoid_beta.is_finite() || !self.sigmoid_gamma.is_finite() {
            return invalid("confidence sigmoid parameters must be finite");
        }
        Ok(())
    }
}

/// Shannon entropy (natural log) of `softmax(logits)`.
pub fn entropy<T: Real>(logits: &[T]) -> T {
    softmax(logits)
        .into_iter()
        .filter(|&p| p > T::zero())
        .fold(T::zero(), |h, p| h - p * p.ln())
}

/// Entropy-to-confidence factor before the opacity product.
pub fn semantic_confidence<T: Real>(h: T, cfg: &ConfidenceConfig) -> T {
    match cfg.transform {
        Transform::Power => {
            let ratio = (h / T::lit(cfg.h_max)).min(T::one());
            (T::one() - ratio).max(T::zero()).powf(T::lit(cfg.sharpness))
        }
        Transform::SharpSigmoid => sigmoid(-T::lit(cfg.sigmoid_beta) * (h - T::lit(cfg.sigmoid_gamma))),
    }
}

/// Unnormalized confidence `C_sem(H) · a` of one primitive.
pub fn confidence<T: Real>(g: &GaussianPrimitive<T>, cfg: &ConfidenceConfig) -> T {
    semantic_confidence(entropy(&g.logits), cfg) * g.opacity
}

/// Confidence of every primitive, softmax-normalized across the batch when
/// `cfg.normalize` asks for it.
pub fn confidence_batch<T: Real>(primitives: &[GaussianPrimitive<T>], cfg: &ConfidenceConfig) -> Result<Vec<T>> {
    let raw: Vec<T> = primitives.iter().map(|g| confidence(g, cfg)).collect();
    match cfg.normalize {
        Normalize::None => Ok(raw),
        Normalize::Softmax => {
            if raw.is_empty() {
                return invalid("softmax-normalized confidence needs a nonempty batch");
            }
            Ok(softmax_with_temperature(&raw, T::lit(cfg.softmax_temperature)))
        }
    }
}
