//! JSON model checkpoints.
//!
//! Weights are stored row-major per layer (`fan_out` rows of `fan_in`
//! values). Floats are written in shortest round-trip form, so a reload
//! reproduces every bit. Field order is fixed and there are no maps or
//! timestamps, so the same model always serializes to the same bytes.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::config::DataConfig;
use crate::error::{Error, Result};
use crate::fvib::{ConfidenceTuning, TrainedFvib};
use crate::net::{DenseNet, Layer, TrainConfig};
use crate::simplex::TargetMatrix;
use crate::vib::{VibEncoder, VibMethod};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Fvib,
    Vib,
    Taylor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub kind: ModelKind,
    pub layer_dims: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub seed: u64,
    pub train_config: TrainConfig,
    pub target_matrix_d: usize,
    pub d: usize,
    pub ct_enabled: bool,
    pub c: f64,
    pub default_samples: usize,
    /// The `β` a baseline was trained at; absent for FVIB.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<usize>,
    /// Baseline classifier, `d x κ` row-major.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classifier: Option<Vec<f64>>,
    /// Where the training data came from, so evaluation can rebuild splits.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataConfig>,
}

fn layers_row_major(net: &DenseNet) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    net.layers()
        .iter()
        .map(|l| {
            let w = l.weight.transpose();
            (w.as_slice().to_vec(), l.bias.as_slice().to_vec())
        })
        .unzip()
}

impl Checkpoint {
    pub fn from_fvib(
        trained: &TrainedFvib,
        train_config: &TrainConfig,
        ct: ConfidenceTuning,
        default_samples: usize,
        data: Option<DataConfig>,
    ) -> Self {
        let (weights, biases) = layers_row_major(&trained.net);
        let d = trained.targets.classes();
        Checkpoint {
            schema_version: SCHEMA_VERSION,
            kind: ModelKind::Fvib,
            layer_dims: trained.net.layer_dims().to_vec(),
            weights,
            biases,
            seed: trained.net.seed(),
            train_config: *train_config,
            target_matrix_d: d,
            d,
            ct_enabled: ct.enabled,
            c: ct.confidence,
            default_samples,
            beta: None,
            kappa: None,
            classifier: None,
            data,
        }
    }

    pub fn from_vib(
        enc: &VibEncoder,
        train_config: &TrainConfig,
        default_samples: usize,
        data: Option<DataConfig>,
    ) -> Self {
        let (weights, biases) = layers_row_major(enc.net());
        let d = enc.classes();
        Checkpoint {
            schema_version: SCHEMA_VERSION,
            kind: match enc.method() {
                VibMethod::Sampled => ModelKind::Vib,
                VibMethod::Taylor => ModelKind::Taylor,
            },
            layer_dims: enc.net().layer_dims().to_vec(),
            weights,
            biases,
            seed: enc.net().seed(),
            train_config: *train_config,
            target_matrix_d: d,
            d,
            ct_enabled: false,
            c: ConfidenceTuning::off().confidence,
            default_samples,
            beta: Some(enc.beta()),
            kappa: Some(enc.kappa()),
            classifier: Some(enc.classifier_weights().transpose().as_slice().to_vec()),
            data,
        }
    }

    pub fn confidence_tuning(&self) -> ConfidenceTuning {
        ConfidenceTuning {
            enabled: self.ct_enabled,
            confidence: self.c,
        }
    }

    pub fn net(&self) -> Result<DenseNet> {
        let n_layers = self.layer_dims.len().saturating_sub(1);
        if self.weights.len() != n_layers || self.biases.len() != n_layers {
            return Err(Error::shape("checkpoint layers", n_layers, self.weights.len()));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for (i, w) in self.layer_dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            if self.weights[i].len() != fan_in * fan_out {
                return Err(Error::shape("checkpoint weights", fan_in * fan_out, self.weights[i].len()));
            }
            if self.biases[i].len() != fan_out {
                return Err(Error::shape("checkpoint biases", fan_out, self.biases[i].len()));
            }
            if self.weights[i].iter().chain(&self.biases[i]).any(|v| !v.is_finite()) {
                return Err(Error::data(format!("checkpoint layer {i} has non-finite values")));
            }
            layers.push(Layer {
                weight: DMatrix::from_row_slice(fan_out, fan_in, &self.weights[i]),
                bias: DVector::from_column_slice(&self.biases[i]),
            });
        }
        DenseNet::from_layers(layers, self.seed)
    }

    pub fn targets(&self) -> Result<TargetMatrix> {
        if self.target_matrix_d != self.d {
            return Err(Error::data(format!(
                "checkpoint target matrix is for {} classes but the model has {}",
                self.target_matrix_d, self.d
            )));
        }
        TargetMatrix::new(self.d)
    }

    pub fn vib_encoder(&self) -> Result<VibEncoder> {
        let method = match self.kind {
            ModelKind::Vib => VibMethod::Sampled,
            ModelKind::Taylor => VibMethod::Taylor,
            ModelKind::Fvib => return Err(Error::State("checkpoint holds an FVIB model".into())),
        };
        let (Some(beta), Some(kappa), Some(w)) = (self.beta, self.kappa, &self.classifier) else {
            return Err(Error::data("baseline checkpoint lacks beta, kappa or classifier"));
        };
        if w.len() != self.d * kappa {
            return Err(Error::shape("checkpoint classifier", self.d * kappa, w.len()));
        }
        VibEncoder::from_parts(self.net()?, DMatrix::from_row_slice(self.d, kappa, w), beta, method)
    }

    /// Pretty JSON with a trailing newline.
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.schema_version != SCHEMA_VERSION {
            return Err(Error::data(format!(
                "unsupported checkpoint schema {} (expected {SCHEMA_VERSION})",
                ck.schema_version
            )));
        }
        // surface shape problems at load time
        ck.net()?;
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;
    use crate::fvib::{train, BalancePolicy};
    use crate::net::LrSchedule;
    use crate::vib::taylor_train;

    fn config() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 8,
            learning_rate: 1e-2,
            lr_schedule: LrSchedule::Constant,
            seed: 4,
        }
    }

    #[test]
    fn fvib_round_trip_is_bit_exact() {
        let ds = synth_blobs(3, 10, 3, 0.5, 1).unwrap();
        let trained = train(&ds, &[6], &config(), BalancePolicy::Strict).unwrap();
        let ck = Checkpoint::from_fvib(&trained, &config(), ConfidenceTuning::default(), 30, None);
        let text = ck.to_json().unwrap();
        let back = Checkpoint::from_json(&text).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.net().unwrap(), trained.net);
        assert_eq!(back.targets().unwrap(), trained.targets);
        assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn weights_are_row_major() {
        let layer = Layer {
            weight: DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
            bias: DVector::from_row_slice(&[0.5, -0.5]),
        };
        let net = DenseNet::from_layers(vec![layer], 0).unwrap();
        let (w, b) = layers_row_major(&net);
        assert_eq!(w[0], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(b[0], vec![0.5, -0.5]);
    }

    #[test]
    fn baseline_round_trip() {
        let ds = synth_blobs(3, 6, 2, 0.5, 2).unwrap();
        let trained = taylor_train(&ds, 0.3, &[4], None, &config()).unwrap();
        let ck = Checkpoint::from_vib(&trained.encoder, &config(), 1, None);
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back.kind, ModelKind::Taylor);
        assert_eq!(back.vib_encoder().unwrap(), trained.encoder);
    }

    #[test]
    fn rejects_bad_schema_and_shapes() {
        let ds = synth_blobs(2, 4, 1, 0.5, 2).unwrap();
        let trained = train(&ds, &[], &config(), BalancePolicy::Strict).unwrap();
        let mut ck = Checkpoint::from_fvib(&trained, &config(), ConfidenceTuning::off(), 1, None);
        ck.schema_version = 99;
        assert!(matches!(Checkpoint::from_json(&ck.to_json().unwrap()), Err(Error::Data { .. })));
        ck.schema_version = SCHEMA_VERSION;
        ck.weights[0].pop();
        assert!(matches!(Checkpoint::from_json(&ck.to_json().unwrap()), Err(Error::Shape { .. })));
        assert!(Checkpoint::from_json("{\"schema_version\": 1}").is_err());
    }
}
