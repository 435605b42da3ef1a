//! Discriminative alignment loss over positive and negative transcripts.
//!
//! The objective ranks alignment costs: the smoothed cost of aligning the true
//! transcript should undercut the cost of sampled wrong transcripts. Each
//! negative contributes a hinge term on the cost difference, and the gradient
//! with respect to the distance matrices is assembled from the expected
//! alignments of the terms whose hinge is on its sloped branch.
//!
//! Two hinge conventions are provided. `PaperLiteral` evaluates
//! `max(diff, beta)`, which floors every term at `beta`; `StandardMargin`
//! evaluates `max(diff + beta, 0)`, the usual margin form. They coincide at
//! `beta = 0`. The literal form is the default; the margin form is the
//! recommended training setting.
//!
//! `generative_loss` is the non-discriminative ablation: the smoothed cost of
//! the positive transcript alone.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::mat::Mat;
use crate::softdp::{backward_gradient, forward_cost, DistanceMatrix, SoftAlignment};
use crate::{Error, Result};

/// Rejection-sampling attempt budget per drawn negative.
const REJECTION_CAP: usize = 10_000;

/// Ordered action ids, the weak supervision for one sequence.
///
/// Adjacent duplicates are allowed and align as distinct rows of the distance
/// matrix; decoding merges them back into one segment.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Transcript {
    actions: Vec<usize>,
}

impl Transcript {
    pub fn new(actions: Vec<usize>) -> Result<Transcript> {
        if actions.is_empty() {
            return Err(Error::InvalidInput("transcript must be nonempty".into()));
        }
        Ok(Transcript { actions })
    }

    pub fn actions(&self) -> &[usize] {
        &self.actions
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Check every id against a vocabulary of `vocab_size` actions.
    pub fn validate_for(&self, vocab_size: usize) -> Result<()> {
        for &a in &self.actions {
            if a >= vocab_size {
                return Err(Error::InvalidInput(alloc::format!(
                    "action id {a} outside vocabulary of size {vocab_size}"
                )));
            }
        }
        Ok(())
    }
}

/// Hinge convention for one ranking term on `diff = psi_pos - psi_neg`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum HingeVariant {
    /// `max(diff, beta)`: floors the term at `beta`.
    #[default]
    PaperLiteral,
    /// `max(diff + beta, 0)`: the conventional margin hinge.
    StandardMargin,
}

impl HingeVariant {
    /// Term value and whether the sloped branch is strictly active.
    ///
    /// At the kink the flat branch wins, so ties carry zero gradient.
    pub fn evaluate(self, diff: f64, beta: f64) -> (f64, bool) {
        match self {
            HingeVariant::PaperLiteral => {
                if diff > beta {
                    (diff, true)
                } else {
                    (beta, false)
                }
            }
            HingeVariant::StandardMargin => {
                let arg = diff + beta;
                if arg > 0.0 {
                    (arg, true)
                } else {
                    (0.0, false)
                }
            }
        }
    }
}

/// How negative transcripts are drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SamplingStrategy {
    /// Uniform over distinct pool transcripts differing from the positive.
    #[default]
    Pool,
    /// Random permutations of the positive's actions.
    Shuffle,
    /// Uniform random action sequences of the positive's length.
    RandomWalk,
}

/// Smoothing, margin, and sampling settings for the discriminative loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub gamma: f64,
    pub beta: f64,
    pub negatives_per_sample: usize,
    pub hinge_variant: HingeVariant,
    pub sampling_strategy: SamplingStrategy,
}

impl LossConfig {
    /// Build a config with one pool-sampled negative and the literal hinge.
    pub fn new(gamma: f64, beta: f64) -> Result<LossConfig> {
        let config = LossConfig {
            gamma,
            beta,
            negatives_per_sample: 1,
            hinge_variant: HingeVariant::default(),
            sampling_strategy: SamplingStrategy::default(),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.gamma.is_finite() || self.gamma <= 0.0 {
            return Err(Error::InvalidInput(alloc::format!(
                "gamma must be a finite positive real, got {}",
                self.gamma
            )));
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::InvalidInput(alloc::format!(
                "beta must be a finite nonnegative real, got {}",
                self.beta
            )));
        }
        if self.negatives_per_sample == 0 {
            return Err(Error::InvalidInput(
                "negatives_per_sample must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Loss value with per-matrix gradients and the active-term mask.
#[derive(Clone, Debug)]
pub struct LossResult {
    /// Total hinge value over all negatives.
    pub value: f64,
    /// d value / d delta_pos: the positive's expected alignment scaled by the
    /// number of active terms.
    pub grad_pos: Mat,
    /// d value / d delta_neg per negative; all-zero for inactive terms.
    pub grad_negs: Vec<Mat>,
    /// Whether each negative's hinge term sits on the sloped branch.
    pub active_mask: Vec<bool>,
}

/// Hinge-ranking loss of one positive distance matrix against its negatives.
///
/// All matrices must share the frame count. A negative whose smoothed cost is
/// `+inf` (every path blocked) lands on the flat branch and contributes no
/// gradient; an infeasible positive is an error.
pub fn d3tw_loss(
    delta_pos: &DistanceMatrix,
    delta_negs: &[DistanceMatrix],
    config: &LossConfig,
) -> Result<LossResult> {
    config.validate()?;
    for neg in delta_negs {
        if neg.cols() != delta_pos.cols() {
            return Err(Error::InvalidInput(alloc::format!(
                "negative has {} frames, positive has {}",
                neg.cols(),
                delta_pos.cols()
            )));
        }
    }

    let pos_cache = forward_cost(delta_pos, config.gamma, None)?;
    let psi_pos = pos_cache.cost();
    if !psi_pos.is_finite() {
        return Err(Error::InvalidPositive);
    }

    let mut value = 0.0;
    let mut grad_negs = Vec::with_capacity(delta_negs.len());
    let mut active_mask = Vec::with_capacity(delta_negs.len());
    let mut active_terms = 0usize;

    for neg in delta_negs {
        let neg_cache = forward_cost(neg, config.gamma, None)?;
        let diff = psi_pos - neg_cache.cost();
        let (term, active) = config.hinge_variant.evaluate(diff, config.beta);
        value += term;
        active_mask.push(active);
        if active {
            active_terms += 1;
            let mut grad = backward_gradient(&neg_cache)?.into_mat();
            grad.scale(-1.0);
            grad_negs.push(grad);
        } else {
            grad_negs.push(Mat::zeros(neg.rows(), neg.cols()));
        }
    }

    let grad_pos = if active_terms > 0 {
        let mut grad = backward_gradient(&pos_cache)?.into_mat();
        grad.scale(active_terms as f64);
        grad
    } else {
        Mat::zeros(delta_pos.rows(), delta_pos.cols())
    };

    Ok(LossResult {
        value,
        grad_pos,
        grad_negs,
        active_mask,
    })
}

/// Non-discriminative ablation: the positive's smoothed cost and its gradient.
pub fn generative_loss(delta_pos: &DistanceMatrix, gamma: f64) -> Result<(f64, SoftAlignment)> {
    if !gamma.is_finite() || gamma <= 0.0 {
        return Err(Error::InvalidInput(alloc::format!(
            "gamma must be a finite positive real, got {gamma}"
        )));
    }
    let cache = forward_cost(delta_pos, gamma, None)?;
    if !cache.cost().is_finite() {
        return Err(Error::InvalidPositive);
    }
    let grad = backward_gradient(&cache)?;
    Ok((cache.cost(), grad))
}

/// Draw `k` negative transcripts for `positive`, deterministically in `seed`.
///
/// `Pool` draws uniformly from the distinct pool members that differ from the
/// positive. `Shuffle` rejection-samples permutations of the positive's
/// actions. `RandomWalk` rejection-samples uniform id sequences of the same
/// length over `vocab_size` actions. Duplicates among the returned negatives
/// are allowed.
pub fn sample_negatives(
    positive: &Transcript,
    pool: &[Transcript],
    k: usize,
    strategy: SamplingStrategy,
    vocab_size: usize,
    seed: u64,
) -> Result<Vec<Transcript>> {
    if k == 0 {
        return Err(Error::InvalidInput("must draw at least one negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut negatives = Vec::with_capacity(k);
    match strategy {
        SamplingStrategy::Pool => {
            let candidates: Vec<&Transcript> = pool
                .iter()
                .collect::<BTreeSet<_>>()
                .into_iter()
                .filter(|t| *t != positive)
                .collect();
            if candidates.is_empty() {
                return Err(Error::EmptyPool);
            }
            for _ in 0..k {
                let idx = rng.gen_range(0..candidates.len());
                negatives.push(candidates[idx].clone());
            }
        }
        SamplingStrategy::Shuffle => {
            let first = positive.actions[0];
            if positive.actions.iter().all(|&a| a == first) {
                return Err(Error::DegeneratePositive);
            }
            for _ in 0..k {
                let mut attempts = 0;
                loop {
                    let mut shuffled = positive.actions.clone();
                    shuffled.shuffle(&mut rng);
                    if shuffled != positive.actions {
                        negatives.push(Transcript { actions: shuffled });
                        break;
                    }
                    attempts += 1;
                    if attempts >= REJECTION_CAP {
                        return Err(Error::SamplingFailure { attempts });
                    }
                }
            }
        }
        SamplingStrategy::RandomWalk => {
            if vocab_size == 0 {
                return Err(Error::InvalidInput("vocabulary must be nonempty".into()));
            }
            if vocab_size == 1 {
                // Every same-length sequence equals the positive.
                return Err(Error::DegeneratePositive);
            }
            for _ in 0..k {
                let mut attempts = 0;
                loop {
                    let drawn: Vec<usize> =
                        (0..positive.len()).map(|_| rng.gen_range(0..vocab_size)).collect();
                    if drawn != positive.actions {
                        negatives.push(Transcript { actions: drawn });
                        break;
                    }
                    attempts += 1;
                    if attempts >= REJECTION_CAP {
                        return Err(Error::SamplingFailure { attempts });
                    }
                }
            }
        }
    }
    Ok(negatives)
}
