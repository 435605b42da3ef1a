//! Frame classifier, emission distances, and the weakly supervised training
//! step.
//!
//! The reference classifier is a per-frame linear map with a softmax output.
//! Its posteriors are converted to alignment costs through the scaled-
//! likelihood rule `p(x|k) ∝ p(k|x) / p(k)`, using a running class prior
//! estimated from the expected frame mass of past alignments. The unknown
//! per-frame proportionality constant is dropped: it shifts every path cost
//! equally, so argmin paths and positive/negative cost differences at equal
//! frame counts are unaffected (entries may be negative because of this).
//!
//! Gradients flow from the alignment loss into the distance matrices, through
//! the log-softmax composition into per-frame logits, and finally into the
//! linear weights and bias. The posterior clamp acts as a stop-gradient.
//! Parameters are updated with adaptive moment estimation.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::loss::{d3tw_loss, generative_loss, sample_negatives, LossConfig, Transcript};
use crate::mat::Mat;
use crate::num;
use crate::softdp::{backward_gradient, forward_cost, DistanceMatrix, SoftAlignment};
use crate::{Error, Result};

/// Posterior floor before the log in [`emission_distance`].
pub const DEFAULT_EMISSION_EPSILON: f64 = 1e-12;

/// First-moment decay of the optimizer.
pub const ADAM_BETA1: f64 = 0.9;
/// Second-moment decay of the optimizer.
pub const ADAM_BETA2: f64 = 0.999;
/// Denominator guard of the optimizer.
pub const ADAM_EPSILON: f64 = 1e-8;

/// Per-frame observations for one sequence, stored frames x dim.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    values: Mat,
}

impl FeatureSequence {
    pub fn new(values: Mat) -> Result<FeatureSequence> {
        if values.rows() == 0 || values.cols() == 0 {
            return Err(Error::InvalidInput(
                "feature sequence needs at least one frame and one dimension".into(),
            ));
        }
        if values.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(
                "feature sequence entries must be finite".into(),
            ));
        }
        Ok(FeatureSequence { values })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<FeatureSequence> {
        FeatureSequence::new(Mat::from_rows(rows))
    }

    pub fn frames(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    #[inline]
    pub fn get(&self, frame: usize, d: usize) -> f64 {
        self.values.get(frame, d)
    }

    pub fn as_mat(&self) -> &Mat {
        &self.values
    }
}

/// Row-stochastic class posteriors, frames x classes.
#[derive(Clone, Debug, PartialEq)]
pub struct Posteriors {
    probs: Mat,
}

impl Posteriors {
    /// Validate probabilities: entries in [0, 1], rows summing to 1 within 1e-6.
    pub fn new(probs: Mat) -> Result<Posteriors> {
        if probs.rows() == 0 || probs.cols() == 0 {
            return Err(Error::InvalidInput("posteriors must be non-empty".into()));
        }
        for t in 0..probs.rows() {
            let row = probs.row(t);
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::InvalidInput(alloc::format!(
                    "posterior row {t} has entries outside [0, 1]"
                )));
            }
            let sum: f64 = row.iter().sum();
            if num::abs(sum - 1.0) > 1e-6 {
                return Err(Error::InvalidInput(alloc::format!(
                    "posterior row {t} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(Posteriors { probs })
    }

    pub fn frames(&self) -> usize {
        self.probs.rows()
    }

    pub fn classes(&self) -> usize {
        self.probs.cols()
    }

    #[inline]
    pub fn get(&self, frame: usize, class: usize) -> f64 {
        self.probs.get(frame, class)
    }

    pub fn as_mat(&self) -> &Mat {
        &self.probs
    }
}

/// Running class prior: smoothed, normalized frame-mass counters.
///
/// Probabilities are `(count_k + alpha) / (total + A * alpha)`. With zero
/// counts the prior is uniform, and any `alpha > 0` keeps it strictly positive
/// forever.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassPrior {
    counts: Vec<f64>,
    alpha: f64,
}

impl ClassPrior {
    /// Uniform prior over `classes` actions with add-one smoothing.
    pub fn uniform(classes: usize) -> ClassPrior {
        ClassPrior {
            counts: vec![0.0; classes],
            alpha: 1.0,
        }
    }

    /// Restore a prior from raw counters.
    pub fn from_counts(counts: Vec<f64>, alpha: f64) -> Result<ClassPrior> {
        if counts.is_empty() {
            return Err(Error::InvalidInput("prior needs at least one class".into()));
        }
        if counts.iter().any(|&c| !c.is_finite() || c < 0.0) {
            return Err(Error::InvalidInput(
                "prior counts must be finite and nonnegative".into(),
            ));
        }
        if !alpha.is_finite() || alpha < 0.0 {
            return Err(Error::InvalidInput(
                "prior smoothing must be finite and nonnegative".into(),
            ));
        }
        if alpha == 0.0 && counts.iter().sum::<f64>() == 0.0 {
            return Err(Error::InvalidInput(
                "unsmoothed prior needs nonzero counts".into(),
            ));
        }
        Ok(ClassPrior { counts, alpha })
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Smoothed probability of one class.
    pub fn prob(&self, class: usize) -> f64 {
        let total: f64 = self.counts.iter().sum();
        let denom = total + self.alpha * self.counts.len() as f64;
        (self.counts[class] + self.alpha) / denom
    }

    /// The full smoothed probability vector.
    pub fn probs(&self) -> Vec<f64> {
        (0..self.counts.len()).map(|k| self.prob(k)).collect()
    }
}

/// Fold one positive soft alignment into the prior's counters.
///
/// Each transcript entry contributes its expected frame mass (the row sum of
/// the alignment) to its action's counter.
pub fn update_prior(
    prior: &mut ClassPrior,
    alignment: &SoftAlignment,
    transcript: &Transcript,
) -> Result<()> {
    if alignment.rows() != transcript.len() {
        return Err(Error::InvalidInput(alloc::format!(
            "alignment has {} rows, transcript has {} entries",
            alignment.rows(),
            transcript.len()
        )));
    }
    transcript.validate_for(prior.classes())?;
    for (i, &action) in transcript.actions().iter().enumerate() {
        let mass: f64 = (0..alignment.cols()).map(|j| alignment.get(i, j)).sum();
        prior.counts[action] += mass;
    }
    Ok(())
}

/// First/second moment accumulators and the step counter of the optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m_weights: Mat,
    v_weights: Mat,
    m_bias: Vec<f64>,
    v_bias: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn fresh(dim: usize, classes: usize) -> AdamState {
        AdamState {
            m_weights: Mat::zeros(dim, classes),
            v_weights: Mat::zeros(dim, classes),
            m_bias: vec![0.0; classes],
            v_bias: vec![0.0; classes],
            step: 0,
        }
    }

    /// Restore optimizer state, checking shapes against `dim` x `classes`.
    pub fn from_parts(
        m_weights: Mat,
        v_weights: Mat,
        m_bias: Vec<f64>,
        v_bias: Vec<f64>,
        step: u64,
    ) -> Result<AdamState> {
        let (dim, classes) = (m_weights.rows(), m_weights.cols());
        if v_weights.rows() != dim
            || v_weights.cols() != classes
            || m_bias.len() != classes
            || v_bias.len() != classes
        {
            return Err(Error::InvalidInput("optimizer state shapes disagree".into()));
        }
        Ok(AdamState {
            m_weights,
            v_weights,
            m_bias,
            v_bias,
            step,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn m_weights(&self) -> &Mat {
        &self.m_weights
    }

    pub fn v_weights(&self) -> &Mat {
        &self.v_weights
    }

    pub fn m_bias(&self) -> &[f64] {
        &self.m_bias
    }

    pub fn v_bias(&self) -> &[f64] {
        &self.v_bias
    }
}

/// Linear-softmax classifier parameters plus optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    weights: Mat,
    bias: Vec<f64>,
    opt: AdamState,
}

impl ModelParams {
    /// Small random weights, zero bias, fresh optimizer state.
    ///
    /// Zero weights would make every posterior row uniform, every distance
    /// matrix constant per column, and every same-length hinge term exactly
    /// tied, so training could never leave the flat branch.
    pub fn init(dim: usize, classes: usize, seed: u64) -> Result<ModelParams> {
        if dim == 0 || classes == 0 {
            return Err(Error::InvalidInput(
                "model needs at least one feature dimension and one class".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Mat::zeros(dim, classes);
        for w in weights.data_mut() {
            *w = (rng.gen::<f64>() - 0.5) * 0.02;
        }
        Ok(ModelParams {
            weights,
            bias: vec![0.0; classes],
            opt: AdamState::fresh(dim, classes),
        })
    }

    /// Exactly zero parameters; useful for probing the uniform-posterior case.
    pub fn zeros(dim: usize, classes: usize) -> Result<ModelParams> {
        if dim == 0 || classes == 0 {
            return Err(Error::InvalidInput(
                "model needs at least one feature dimension and one class".into(),
            ));
        }
        Ok(ModelParams {
            weights: Mat::zeros(dim, classes),
            bias: vec![0.0; classes],
            opt: AdamState::fresh(dim, classes),
        })
    }

    /// Restore parameters from a checkpointed weight matrix, bias, and state.
    pub fn from_parts(weights: Mat, bias: Vec<f64>, opt: AdamState) -> Result<ModelParams> {
        if bias.len() != weights.cols() {
            return Err(Error::InvalidInput(alloc::format!(
                "bias has {} entries, weights have {} columns",
                bias.len(),
                weights.cols()
            )));
        }
        if opt.m_weights.rows() != weights.rows() || opt.m_weights.cols() != weights.cols() {
            return Err(Error::InvalidInput("optimizer state shape mismatch".into()));
        }
        if weights.data().iter().any(|v| !v.is_finite()) || bias.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("parameters must be finite".into()));
        }
        Ok(ModelParams { weights, bias, opt })
    }

    pub fn dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn classes(&self) -> usize {
        self.weights.cols()
    }

    pub fn weights(&self) -> &Mat {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn optimizer(&self) -> &AdamState {
        &self.opt
    }

    pub fn set_bias(&mut self, bias: Vec<f64>) -> Result<()> {
        if bias.len() != self.classes() {
            return Err(Error::InvalidInput("bias length mismatch".into()));
        }
        self.bias = bias;
        Ok(())
    }
}

/// Gradient with the same weight/bias layout as [`ModelParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrad {
    pub weights: Mat,
    pub bias: Vec<f64>,
}

impl ParamGrad {
    pub fn zeros(dim: usize, classes: usize) -> ParamGrad {
        ParamGrad {
            weights: Mat::zeros(dim, classes),
            bias: vec![0.0; classes],
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrad) {
        self.weights.add_assign(&other.weights);
        for (b, o) in self.bias.iter_mut().zip(&other.bias) {
            *b += o;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.weights.scale(factor);
        for b in &mut self.bias {
            *b *= factor;
        }
    }
}

/// Per-frame posteriors from the linear-softmax classifier.
///
/// Logits are shifted by their row maximum before exponentiation, so rows are
/// stochastic for any finite parameters.
pub fn forward(features: &FeatureSequence, params: &ModelParams) -> Result<Posteriors> {
    if features.dim() != params.dim() {
        return Err(Error::InvalidInput(alloc::format!(
            "features have dim {}, model expects {}",
            features.dim(),
            params.dim()
        )));
    }
    let (frames, classes) = (features.frames(), params.classes());
    let mut probs = Mat::zeros(frames, classes);
    for t in 0..frames {
        let row = probs.row_mut(t);
        for k in 0..classes {
            let mut logit = params.bias[k];
            for d in 0..features.dim() {
                logit += features.get(t, d) * params.weights.get(d, k);
            }
            row[k] = logit;
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for p in row.iter_mut() {
            *p = num::exp(*p - max);
            sum += *p;
        }
        for p in row.iter_mut() {
            *p /= sum;
        }
    }
    Ok(Posteriors { probs })
}

/// Alignment costs from posteriors and the class prior.
///
/// `delta[i, j] = -log(max(p(l_i | x_j), epsilon)) + log p(l_i)`. The dropped
/// per-frame constant makes negative entries legitimate.
pub fn emission_distance(
    posteriors: &Posteriors,
    prior: &ClassPrior,
    transcript: &Transcript,
    epsilon: f64,
) -> Result<DistanceMatrix> {
    if !epsilon.is_finite() || epsilon <= 0.0 || epsilon >= 1.0 {
        return Err(Error::InvalidInput(alloc::format!(
            "emission clamp must lie in (0, 1), got {epsilon}"
        )));
    }
    if posteriors.classes() != prior.classes() {
        return Err(Error::InvalidInput(alloc::format!(
            "posteriors cover {} classes, prior covers {}",
            posteriors.classes(),
            prior.classes()
        )));
    }
    transcript.validate_for(prior.classes())?;
    let (rows, cols) = (transcript.len(), posteriors.frames());
    let mut delta = Mat::zeros(rows, cols);
    for (i, &action) in transcript.actions().iter().enumerate() {
        let log_prior = num::ln(prior.prob(action));
        for j in 0..cols {
            let p = posteriors.get(j, action).max(epsilon);
            delta.set(i, j, -num::ln(p) + log_prior);
        }
    }
    DistanceMatrix::new(delta)
}

/// Chain per-matrix loss gradients into weight and bias gradients.
///
/// Each term pairs a d loss / d delta matrix with its transcript. The softmax
/// Jacobian gives `d delta[i, j] / d logit[j, k] = p(k|x_j) - [k = l_i]`;
/// cells whose posterior sits at or below the clamp contribute nothing.
pub fn backprop_to_params(
    features: &FeatureSequence,
    posteriors: &Posteriors,
    terms: &[(&Mat, &Transcript)],
    prior: &ClassPrior,
    params: &ModelParams,
    epsilon: f64,
) -> Result<ParamGrad> {
    let (frames, classes, dim) = (features.frames(), params.classes(), params.dim());
    if posteriors.frames() != frames || posteriors.classes() != classes {
        return Err(Error::InvalidInput(
            "posterior shape disagrees with features and model".into(),
        ));
    }
    if features.dim() != dim || prior.classes() != classes {
        return Err(Error::InvalidInput(
            "feature dim or prior size disagrees with the model".into(),
        ));
    }

    let mut logit_grad = Mat::zeros(frames, classes);
    for (grad, transcript) in terms {
        if grad.rows() != transcript.len() || grad.cols() != frames {
            return Err(Error::InvalidInput(alloc::format!(
                "loss gradient is {}x{}, expected {}x{}",
                grad.rows(),
                grad.cols(),
                transcript.len(),
                frames
            )));
        }
        transcript.validate_for(classes)?;
        for (i, &action) in transcript.actions().iter().enumerate() {
            for j in 0..frames {
                let w = grad.get(i, j);
                if w == 0.0 {
                    continue;
                }
                // Clamped cell: the emission log saturated, stop the gradient.
                if posteriors.get(j, action) <= epsilon {
                    continue;
                }
                for k in 0..classes {
                    let indicator = if k == action { 1.0 } else { 0.0 };
                    logit_grad.set(
                        j,
                        k,
                        logit_grad.get(j, k) + w * (posteriors.get(j, k) - indicator),
                    );
                }
            }
        }
    }

    let mut out = ParamGrad::zeros(dim, classes);
    for t in 0..frames {
        for k in 0..classes {
            let g = logit_grad.get(t, k);
            if g == 0.0 {
                continue;
            }
            out.bias[k] += g;
            for d in 0..dim {
                out.weights.set(d, k, out.weights.get(d, k) + features.get(t, d) * g);
            }
        }
    }
    Ok(out)
}

/// One adaptive-moment update of the parameters in place.
pub fn adam_update(params: &mut ModelParams, grad: &ParamGrad, learning_rate: f64) -> Result<()> {
    if grad.weights.rows() != params.dim()
        || grad.weights.cols() != params.classes()
        || grad.bias.len() != params.classes()
    {
        return Err(Error::InvalidInput("gradient shape mismatch".into()));
    }
    if !learning_rate.is_finite() || learning_rate < 0.0 {
        return Err(Error::InvalidInput(alloc::format!(
            "learning rate must be finite and nonnegative, got {learning_rate}"
        )));
    }
    let opt = &mut params.opt;
    opt.step += 1;
    let t = opt.step as i32;
    let bc1 = 1.0 - num::powi(ADAM_BETA1, t);
    let bc2 = 1.0 - num::powi(ADAM_BETA2, t);

    for idx in 0..grad.weights.data().len() {
        let g = grad.weights.data()[idx];
        let m = &mut opt.m_weights.data_mut()[idx];
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        let m = *m;
        let v = &mut opt.v_weights.data_mut()[idx];
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        let v = *v;
        let update = learning_rate * (m / bc1) / (num::sqrt(v / bc2) + ADAM_EPSILON);
        params.weights.data_mut()[idx] -= update;
    }
    for k in 0..grad.bias.len() {
        let g = grad.bias[k];
        opt.m_bias[k] = ADAM_BETA1 * opt.m_bias[k] + (1.0 - ADAM_BETA1) * g;
        opt.v_bias[k] = ADAM_BETA2 * opt.v_bias[k] + (1.0 - ADAM_BETA2) * g * g;
        let update = learning_rate * (opt.m_bias[k] / bc1)
            / (num::sqrt(opt.v_bias[k] / bc2) + ADAM_EPSILON);
        params.bias[k] -= update;
    }
    Ok(())
}

/// Which objective the training step optimizes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LossKind {
    /// Discriminative hinge over positive and sampled negative transcripts.
    #[default]
    D3tw,
    /// Smoothed positive cost alone (the non-discriminative ablation).
    Generative,
}

/// Everything a training step needs beyond the data.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub loss_kind: LossKind,
    pub learning_rate: f64,
    pub emission_epsilon: f64,
    /// Sampling rounds allowed when negatives keep violating `len <= frames`.
    pub resample_cap: usize,
}

impl TrainConfig {
    pub fn new(loss: LossConfig, learning_rate: f64) -> Result<TrainConfig> {
        let config = TrainConfig {
            loss,
            loss_kind: LossKind::default(),
            learning_rate,
            emission_epsilon: DEFAULT_EMISSION_EPSILON,
            resample_cap: 50,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::InvalidInput(alloc::format!(
                "learning rate must be finite and nonnegative, got {}",
                self.learning_rate
            )));
        }
        if !self.emission_epsilon.is_finite()
            || self.emission_epsilon <= 0.0
            || self.emission_epsilon >= 1.0
        {
            return Err(Error::InvalidInput("emission clamp must lie in (0, 1)".into()));
        }
        if self.resample_cap == 0 {
            return Err(Error::InvalidInput("resample cap must be at least 1".into()));
        }
        Ok(())
    }
}

/// Draw feasible negatives (length at most `frames`) for one positive,
/// retrying whole sampling rounds up to the configured cap.
fn feasible_negatives(
    positive: &Transcript,
    pool: &[Transcript],
    frames: usize,
    config: &TrainConfig,
    classes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Transcript>> {
    let k = config.loss.negatives_per_sample;
    let mut kept = Vec::with_capacity(k);
    let mut attempts = 0;
    while kept.len() < k {
        if attempts >= config.resample_cap {
            return Err(Error::SamplingFailure { attempts });
        }
        attempts += 1;
        let drawn = sample_negatives(
            positive,
            pool,
            k,
            config.loss.sampling_strategy,
            classes,
            rng.next_u64(),
        )?;
        for neg in drawn {
            if neg.len() <= frames {
                kept.push(neg);
                if kept.len() == k {
                    break;
                }
            }
        }
    }
    Ok(kept)
}

/// One optimizer step over a batch of weakly labeled sequences.
///
/// Computes posteriors and emission distances, evaluates the configured
/// objective, averages parameter gradients over the batch, applies the
/// optimizer, and then folds each positive's expected alignment into the
/// prior (once per batch, after the step). Negative transcripts are drawn
/// from `pool`. Deterministic given `seed`. Returns the mean loss.
pub fn train_step(
    batch: &[(&FeatureSequence, &Transcript)],
    pool: &[Transcript],
    params: &mut ModelParams,
    prior: &mut ClassPrior,
    config: &TrainConfig,
    seed: u64,
) -> Result<f64> {
    config.validate()?;
    if batch.is_empty() {
        return Err(Error::InvalidInput("training batch is empty".into()));
    }
    if prior.classes() != params.classes() {
        return Err(Error::InvalidInput("prior size disagrees with the model".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total_loss = 0.0;
    let mut grad_acc = ParamGrad::zeros(params.dim(), params.classes());
    let mut prior_updates: Vec<(SoftAlignment, &Transcript)> = Vec::with_capacity(batch.len());

    for &(features, transcript) in batch {
        transcript.validate_for(params.classes())?;
        if transcript.len() > features.frames() {
            return Err(Error::InfeasibleShape {
                rows: transcript.len(),
                cols: features.frames(),
            });
        }
        let posteriors = forward(features, params)?;
        let delta_pos =
            emission_distance(&posteriors, prior, transcript, config.emission_epsilon)?;

        // Declared before `terms`, which borrows into all three.
        let loss_result;
        let negatives;
        let generative_grad;
        let mut terms: Vec<(&Mat, &Transcript)> = Vec::new();
        match config.loss_kind {
            LossKind::D3tw => {
                negatives = feasible_negatives(
                    transcript,
                    pool,
                    features.frames(),
                    config,
                    params.classes(),
                    &mut rng,
                )?;
                let delta_negs: Vec<DistanceMatrix> = negatives
                    .iter()
                    .map(|neg| {
                        emission_distance(&posteriors, prior, neg, config.emission_epsilon)
                    })
                    .collect::<Result<_>>()?;
                loss_result = d3tw_loss(&delta_pos, &delta_negs, &config.loss)?;
                total_loss += loss_result.value;
                terms.push((&loss_result.grad_pos, transcript));
                for (grad, neg) in loss_result.grad_negs.iter().zip(&negatives) {
                    terms.push((grad, neg));
                }
            }
            LossKind::Generative => {
                let (value, grad) = generative_loss(&delta_pos, config.loss.gamma)?;
                total_loss += value;
                generative_grad = grad.as_mat().clone();
                terms.push((&generative_grad, transcript));
                prior_updates.push((grad, transcript));
            }
        }

        let grad = backprop_to_params(
            features,
            &posteriors,
            &terms,
            prior,
            params,
            config.emission_epsilon,
        )?;
        grad_acc.add_assign(&grad);

        if config.loss_kind == LossKind::D3tw {
            // The prior tracks the expected alignment of the positive whether
            // or not any hinge term was active.
            let cache = forward_cost(&delta_pos, config.loss.gamma, None)?;
            prior_updates.push((backward_gradient(&cache)?, transcript));
        }
    }

    let scale = 1.0 / batch.len() as f64;
    grad_acc.scale(scale);
    adam_update(params, &grad_acc, config.learning_rate)?;

    for (alignment, transcript) in &prior_updates {
        update_prior(prior, alignment, transcript)?;
    }

    Ok(total_loss * scale)
}
