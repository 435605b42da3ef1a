//! Analytic gradients vs. central finite differences.
//!
//! Three layers are checked: the smoothed cost with respect to distance
//! entries, the hinge loss with respect to both distance matrices, and the
//! full pipeline with respect to classifier parameters. Hinge checks skip
//! instances sitting within a safety margin of the kink, where the finite
//! difference would straddle the nondifferentiable point.

mod common;

use common::rel_err;
use d3tw_core::loss::{d3tw_loss, HingeVariant, LossConfig, SamplingStrategy, Transcript};
use d3tw_core::model::{
    backprop_to_params, emission_distance, forward, AdamState, ClassPrior, FeatureSequence,
    ModelParams, DEFAULT_EMISSION_EPSILON,
};
use d3tw_core::softdp::{backward_gradient, forward_cost, DistanceMatrix};
use d3tw_core::Mat;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FD_H: f64 = 1e-5;
// Distance entries move by at most FD_H during a probe (their cost gradient is
// a probability), so anything beyond 10 * FD_H cannot cross the hinge kink.
const KINK_SLACK: f64 = 1e-4;
// Parameter probes scale through features and frames; keep a wider berth.
const E2E_KINK_SLACK: f64 = 1e-3;

fn perturbed(delta: &DistanceMatrix, i: usize, j: usize, by: f64) -> DistanceMatrix {
    let mut m = delta.as_mat().clone();
    m.set(i, j, m.get(i, j) + by);
    DistanceMatrix::new(m).unwrap()
}

fn tiny_delta() -> impl Strategy<Value = DistanceMatrix> {
    (1usize..=3, 0usize..=3)
        .prop_flat_map(|(rows, extra)| {
            let cols = rows + extra;
            prop::collection::vec(-3.0f64..3.0, rows * cols)
                .prop_map(move |data| DistanceMatrix::from_vec(rows, cols, data).unwrap())
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn smoothed_cost_gradient_matches_finite_differences(
        delta in tiny_delta(),
        gamma in prop::sample::select(vec![0.2, 0.6, 1.0]),
    ) {
        let cache = forward_cost(&delta, gamma, None).unwrap();
        let grad = backward_gradient(&cache).unwrap();
        for i in 0..delta.rows() {
            for j in 0..delta.cols() {
                let up = forward_cost(&perturbed(&delta, i, j, FD_H), gamma, None).unwrap().cost();
                let down = forward_cost(&perturbed(&delta, i, j, -FD_H), gamma, None).unwrap().cost();
                let fd = (up - down) / (2.0 * FD_H);
                prop_assert!(
                    rel_err(grad.get(i, j), fd) < 1e-4,
                    "cell ({}, {}): analytic {} vs fd {}", i, j, grad.get(i, j), fd
                );
            }
        }
    }
}

fn loss_config(gamma: f64, beta: f64, variant: HingeVariant) -> LossConfig {
    LossConfig {
        gamma,
        beta,
        negatives_per_sample: 1,
        hinge_variant: variant,
        sampling_strategy: SamplingStrategy::Pool,
    }
}

fn kink_distance(pos: &DistanceMatrix, neg: &DistanceMatrix, config: &LossConfig) -> f64 {
    let psi_pos = forward_cost(pos, config.gamma, None).unwrap().cost();
    let psi_neg = forward_cost(neg, config.gamma, None).unwrap().cost();
    let diff = psi_pos - psi_neg;
    match config.hinge_variant {
        HingeVariant::PaperLiteral => (diff - config.beta).abs(),
        HingeVariant::StandardMargin => (diff + config.beta).abs(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hinge_loss_gradients_match_finite_differences(
        pos in tiny_delta(),
        seed in 0u64..1000,
        beta in prop::sample::select(vec![0.0, 0.4]),
        literal in proptest::bool::ANY,
    ) {
        // Draw the negative with the positive's frame count but its own depth.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = rng.gen_range(1..=pos.cols().min(3));
        let data: Vec<f64> = (0..rows * pos.cols()).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let neg = DistanceMatrix::from_vec(rows, pos.cols(), data).unwrap();

        let variant = if literal { HingeVariant::PaperLiteral } else { HingeVariant::StandardMargin };
        let config = loss_config(0.5, beta, variant);
        prop_assume!(kink_distance(&pos, &neg, &config) > KINK_SLACK);

        let result = d3tw_loss(&pos, &[neg.clone()], &config).unwrap();
        let value_at = |p: &DistanceMatrix, n: &DistanceMatrix| {
            d3tw_loss(p, &[n.clone()], &config).unwrap().value
        };

        for i in 0..pos.rows() {
            for j in 0..pos.cols() {
                let fd = (value_at(&perturbed(&pos, i, j, FD_H), &neg)
                    - value_at(&perturbed(&pos, i, j, -FD_H), &neg)) / (2.0 * FD_H);
                prop_assert!(
                    rel_err(result.grad_pos.get(i, j), fd) < 1e-4,
                    "pos ({}, {}): analytic {} vs fd {}", i, j, result.grad_pos.get(i, j), fd
                );
            }
        }
        for i in 0..neg.rows() {
            for j in 0..neg.cols() {
                let fd = (value_at(&pos, &perturbed(&neg, i, j, FD_H))
                    - value_at(&pos, &perturbed(&neg, i, j, -FD_H))) / (2.0 * FD_H);
                prop_assert!(
                    rel_err(result.grad_negs[0].get(i, j), fd) < 1e-4,
                    "neg ({}, {}): analytic {} vs fd {}", i, j, result.grad_negs[0].get(i, j), fd
                );
            }
        }
    }

    #[test]
    fn active_gradient_steps_shrink_the_cost_difference(
        pos in tiny_delta(),
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = rng.gen_range(1..=pos.cols().min(3));
        let data: Vec<f64> = (0..rows * pos.cols()).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let neg = DistanceMatrix::from_vec(rows, pos.cols(), data).unwrap();

        // A huge margin forces the sloped branch for any finite difference.
        let config = loss_config(0.5, 100.0, HingeVariant::StandardMargin);
        let result = d3tw_loss(&pos, &[neg.clone()], &config).unwrap();
        prop_assert!(result.active_mask[0]);

        let eta = 1e-4;
        let diff_at = |p: &DistanceMatrix, n: &DistanceMatrix| {
            forward_cost(p, config.gamma, None).unwrap().cost()
                - forward_cost(n, config.gamma, None).unwrap().cost()
        };
        let before = diff_at(&pos, &neg);

        let mut stepped_pos = pos.as_mat().clone();
        let mut grad_pos = result.grad_pos.clone();
        grad_pos.scale(-eta);
        stepped_pos.add_assign(&grad_pos);
        let mut stepped_neg = neg.as_mat().clone();
        let mut grad_neg = result.grad_negs[0].clone();
        grad_neg.scale(-eta);
        stepped_neg.add_assign(&grad_neg);
        let after = diff_at(
            &DistanceMatrix::new(stepped_pos).unwrap(),
            &DistanceMatrix::new(stepped_neg).unwrap(),
        );

        prop_assert!(after < before, "difference rose from {} to {}", before, after);

        // First-order prediction: the decrease is eta times the squared
        // gradient norm of the difference.
        let norm2: f64 = result.grad_pos.data().iter().map(|g| g * g).sum::<f64>()
            + result.grad_negs[0].data().iter().map(|g| g * g).sum::<f64>();
        let predicted = eta * norm2;
        prop_assert!(
            rel_err(before - after, predicted) < 1e-3,
            "drop {} vs first-order {}", before - after, predicted
        );
    }
}

struct Instance {
    features: FeatureSequence,
    params: ModelParams,
    prior: ClassPrior,
    positive: Transcript,
    negative: Transcript,
    config: LossConfig,
}

fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = rng.gen_range(2..=4);
    let dim = rng.gen_range(1..=3);
    let frames = rng.gen_range(2..=6);
    let len = rng.gen_range(1..=3.min(frames));

    let feat: Vec<f64> = (0..frames * dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let features = FeatureSequence::new(Mat::from_vec(frames, dim, feat)).unwrap();

    let w: Vec<f64> = (0..dim * classes).map(|_| rng.gen_range(-0.8..0.8)).collect();
    let b: Vec<f64> = (0..classes).map(|_| rng.gen_range(-0.3..0.3)).collect();
    let params =
        ModelParams::from_parts(Mat::from_vec(dim, classes, w), b, AdamState::fresh(dim, classes))
            .unwrap();

    let positive =
        Transcript::new((0..len).map(|_| rng.gen_range(0..classes)).collect()).unwrap();
    let negative = loop {
        let cand: Vec<usize> = (0..len).map(|_| rng.gen_range(0..classes)).collect();
        if cand != positive.actions() {
            break Transcript::new(cand).unwrap();
        }
    };

    let config = loss_config(
        [0.2, 0.5, 1.0][rng.gen_range(0..3)],
        [0.0, 0.3][rng.gen_range(0..2)],
        if rng.gen() { HingeVariant::PaperLiteral } else { HingeVariant::StandardMargin },
    );

    Instance {
        features,
        params,
        prior: ClassPrior::uniform(classes),
        positive,
        negative,
        config,
    }
}

fn pipeline_loss(inst: &Instance, params: &ModelParams) -> f64 {
    let post = forward(&inst.features, params).unwrap();
    let dp = emission_distance(&post, &inst.prior, &inst.positive, DEFAULT_EMISSION_EPSILON).unwrap();
    let dn = emission_distance(&post, &inst.prior, &inst.negative, DEFAULT_EMISSION_EPSILON).unwrap();
    d3tw_loss(&dp, &[dn], &inst.config).unwrap().value
}

fn with_weight(params: &ModelParams, d: usize, k: usize, by: f64) -> ModelParams {
    let mut w = params.weights().clone();
    w.set(d, k, w.get(d, k) + by);
    ModelParams::from_parts(w, params.bias().to_vec(), params.optimizer().clone()).unwrap()
}

fn with_bias(params: &ModelParams, k: usize, by: f64) -> ModelParams {
    let mut b = params.bias().to_vec();
    b[k] += by;
    ModelParams::from_parts(params.weights().clone(), b, params.optimizer().clone()).unwrap()
}

#[test]
fn end_to_end_parameter_gradient_matches_finite_differences() {
    let mut tested = 0;
    let mut seed = 0u64;
    while tested < 20 {
        seed += 1;
        assert!(seed < 400, "ran out of seeds with only {tested} testable instances");
        let inst = random_instance(seed);

        let post = forward(&inst.features, &inst.params).unwrap();
        let dp = emission_distance(&post, &inst.prior, &inst.positive, DEFAULT_EMISSION_EPSILON)
            .unwrap();
        let dn = emission_distance(&post, &inst.prior, &inst.negative, DEFAULT_EMISSION_EPSILON)
            .unwrap();
        if kink_distance(&dp, &dn, &inst.config) <= E2E_KINK_SLACK {
            continue;
        }
        tested += 1;

        let result = d3tw_loss(&dp, &[dn], &inst.config).unwrap();
        let analytic = backprop_to_params(
            &inst.features,
            &post,
            &[
                (&result.grad_pos, &inst.positive),
                (&result.grad_negs[0], &inst.negative),
            ],
            &inst.prior,
            &inst.params,
            DEFAULT_EMISSION_EPSILON,
        )
        .unwrap();

        for d in 0..inst.params.dim() {
            for k in 0..inst.params.classes() {
                let fd = (pipeline_loss(&inst, &with_weight(&inst.params, d, k, FD_H))
                    - pipeline_loss(&inst, &with_weight(&inst.params, d, k, -FD_H)))
                    / (2.0 * FD_H);
                assert!(
                    rel_err(analytic.weights.get(d, k), fd) < 1e-3,
                    "seed {seed} weight ({d}, {k}): analytic {} vs fd {fd}",
                    analytic.weights.get(d, k)
                );
            }
        }
        for k in 0..inst.params.classes() {
            let fd = (pipeline_loss(&inst, &with_bias(&inst.params, k, FD_H))
                - pipeline_loss(&inst, &with_bias(&inst.params, k, -FD_H)))
                / (2.0 * FD_H);
            assert!(
                rel_err(analytic.bias[k], fd) < 1e-3,
                "seed {seed} bias {k}: analytic {} vs fd {fd}",
                analytic.bias[k]
            );
        }
    }
}
