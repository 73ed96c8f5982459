//! Portable policy checkpoints: layer shapes with row-major weights.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::agent::SacError;
use crate::mlp::Mlp;
use crate::policy::GaussianPolicy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerRecord {
    pub rows: usize,
    pub cols: usize,
    /// Row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyCheckpoint {
    /// Identifies the configuration that produced the policy.
    pub fingerprint: String,
    pub u_low: Vec<f64>,
    pub u_high: Vec<f64>,
    pub layers: Vec<LayerRecord>,
}

impl PolicyCheckpoint {
    pub fn from_policy(policy: &GaussianPolicy, fingerprint: impl Into<String>) -> Self {
        let layers = policy
            .net
            .layers()
            .map(|(w, b)| LayerRecord {
                rows: w.nrows(),
                cols: w.ncols(),
                weights: w.transpose().iter().copied().collect(),
                bias: b.iter().copied().collect(),
            })
            .collect();
        Self {
            fingerprint: fingerprint.into(),
            u_low: policy.u_low().iter().copied().collect(),
            u_high: policy.u_high().iter().copied().collect(),
            layers,
        }
    }

    pub fn to_policy(&self) -> Result<GaussianPolicy, SacError> {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            if l.weights.len() != l.rows * l.cols || l.bias.len() != l.rows {
                return Err(SacError::Param(format!(
                    "layer {i}: array lengths disagree with its shape"
                )));
            }
            weights.push(DMatrix::from_row_slice(l.rows, l.cols, &l.weights));
            biases.push(DVector::from_column_slice(&l.bias));
        }
        let net = Mlp::from_layers(weights, biases)?;
        if self.u_low.len() != self.u_high.len() || net.output_dim() != 2 * self.u_low.len() {
            return Err(SacError::Param("action bounds disagree with the network output".into()));
        }
        Ok(GaussianPolicy::from_parts(
            net,
            DVector::from_column_slice(&self.u_low),
            DVector::from_column_slice(&self.u_high),
        ))
    }

    pub fn to_json(&self) -> Result<String, SacError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, SacError> {
        Ok(serde_json::from_str(s)?)
    }
}
