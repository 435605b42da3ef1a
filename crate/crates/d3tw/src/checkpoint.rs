//! Model checkpoint format (`model.json`).
//!
//! A checkpoint stores the linear classifier, the smoothed class prior,
//! and the full optimizer state, so resumed training continues exactly
//! where it stopped. The prior is stored twice: `prior` holds the
//! smoothed probabilities for readers, `prior_counts` plus `prior_alpha`
//! hold the raw accumulator that training keeps updating.

use std::path::Path;

use d3tw_core::model::{AdamState, ClassPrior, ModelParams};
use d3tw_core::Mat;
use serde::{Deserialize, Serialize};

use crate::data::to_json_pretty;
use crate::error::{read_to_string, write_file, Error, Result};

/// The training configuration a checkpoint was produced with, echoed
/// verbatim so a checkpoint is self-describing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainEcho {
    pub seed: u64,
    pub gamma: f64,
    pub beta: f64,
    pub hinge: String,
    pub negatives: usize,
    pub neg_strategy: String,
    pub loss: String,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub subsample: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m_weights: Vec<f64>,
    pub v_weights: Vec<f64>,
    pub m_bias: Vec<f64>,
    pub v_bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub vocab_size: usize,
    pub feature_dim: usize,
    /// Row-major `feature_dim x vocab_size`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    /// Smoothed class probabilities, derived from the counts below.
    pub prior: Vec<f64>,
    pub prior_counts: Vec<f64>,
    pub prior_alpha: f64,
    pub optimizer_state: OptimizerState,
    /// Optimizer step counter; equals the number of batches consumed.
    pub step: u64,
    pub config: Option<TrainEcho>,
}

impl Checkpoint {
    pub fn from_model(
        params: &ModelParams,
        prior: &ClassPrior,
        config: Option<TrainEcho>,
    ) -> Checkpoint {
        let opt = params.optimizer();
        Checkpoint {
            vocab_size: params.classes(),
            feature_dim: params.dim(),
            weights: params.weights().data().to_vec(),
            bias: params.bias().to_vec(),
            prior: prior.probs(),
            prior_counts: prior.counts().to_vec(),
            prior_alpha: prior.alpha(),
            optimizer_state: OptimizerState {
                m_weights: opt.m_weights().data().to_vec(),
                v_weights: opt.v_weights().data().to_vec(),
                m_bias: opt.m_bias().to_vec(),
                v_bias: opt.v_bias().to_vec(),
            },
            step: opt.step(),
            config,
        }
    }

    /// Rebuilds the model and prior, validating every shape and checking
    /// that the stored probabilities match the stored counts. Catches
    /// truncated or hand-edited files before they corrupt a run.
    pub fn into_model(&self) -> Result<(ModelParams, ClassPrior)> {
        let fail = |msg: String| Error::validation(format!("checkpoint: {msg}"));
        let (dim, classes) = (self.feature_dim, self.vocab_size);
        if dim == 0 || classes == 0 {
            return Err(fail("dimensions must be positive".into()));
        }
        let expect = |name: &str, len: usize, want: usize| -> Result<()> {
            if len != want {
                return Err(fail(format!("{name} has {len} values, expected {want}")));
            }
            Ok(())
        };
        expect("weights", self.weights.len(), dim * classes)?;
        expect("bias", self.bias.len(), classes)?;
        expect("prior", self.prior.len(), classes)?;
        expect("prior_counts", self.prior_counts.len(), classes)?;
        expect("optimizer_state.m_weights", self.optimizer_state.m_weights.len(), dim * classes)?;
        expect("optimizer_state.v_weights", self.optimizer_state.v_weights.len(), dim * classes)?;
        expect("optimizer_state.m_bias", self.optimizer_state.m_bias.len(), classes)?;
        expect("optimizer_state.v_bias", self.optimizer_state.v_bias.len(), classes)?;

        let opt = AdamState::from_parts(
            Mat::from_vec(dim, classes, self.optimizer_state.m_weights.clone()),
            Mat::from_vec(dim, classes, self.optimizer_state.v_weights.clone()),
            self.optimizer_state.m_bias.clone(),
            self.optimizer_state.v_bias.clone(),
            self.step,
        )
        .map_err(|e| fail(e.to_string()))?;
        let params = ModelParams::from_parts(
            Mat::from_vec(dim, classes, self.weights.clone()),
            self.bias.clone(),
            opt,
        )
        .map_err(|e| fail(e.to_string()))?;
        let prior = ClassPrior::from_counts(self.prior_counts.clone(), self.prior_alpha)
            .map_err(|e| fail(e.to_string()))?;
        for (k, (&stored, derived)) in self.prior.iter().zip(prior.probs()).enumerate() {
            if (stored - derived).abs() > 1e-9 {
                return Err(fail(format!(
                    "prior[{k}] = {stored} disagrees with its counts (expected {derived})"
                )));
            }
        }
        Ok((params, prior))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &to_json_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::validation(format!("{}: {e}", path.display())))
    }
}

/// Checks a checkpoint against the dataset it is about to run on.
pub fn check_compatible(checkpoint: &Checkpoint, vocab_size: usize, feature_dim: usize) -> Result<()> {
    if checkpoint.vocab_size != vocab_size {
        return Err(Error::validation(format!(
            "checkpoint was trained with {} classes, dataset has {vocab_size}",
            checkpoint.vocab_size
        )));
    }
    if checkpoint.feature_dim != feature_dim {
        return Err(Error::validation(format!(
            "checkpoint expects feature dim {}, dataset has {feature_dim}",
            checkpoint.feature_dim
        )));
    }
    Ok(())
}
