//! Brute-force oracles shared by the integration tests: everything here walks
//! the full set of monotone paths instead of trusting the dynamic program.

// Each test binary pulls in a different subset of these helpers.
#![allow(dead_code)]

use d3tw_core::softdp::{enumerate_alignments, softmin, AlignmentPath, DistanceMatrix};
use d3tw_core::Mat;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Every path with its cost, in enumeration order.
pub fn path_costs(delta: &DistanceMatrix) -> Vec<(AlignmentPath, f64)> {
    enumerate_alignments(delta.rows(), delta.cols())
        .unwrap()
        .into_iter()
        .map(|p| {
            let c = p.cost_in(delta);
            (p, c)
        })
        .collect()
}

/// Smoothed cost computed directly over the enumerated path costs.
pub fn brute_soft_cost(delta: &DistanceMatrix, gamma: f64) -> f64 {
    let costs: Vec<f64> = path_costs(delta).into_iter().map(|(_, c)| c).collect();
    softmin(&costs, gamma).unwrap()
}

/// Exact minimum path cost over the enumeration.
pub fn brute_min_cost(delta: &DistanceMatrix) -> f64 {
    path_costs(delta)
        .into_iter()
        .map(|(_, c)| c)
        .fold(f64::INFINITY, f64::min)
}

/// Expected alignment matrix under the Gibbs distribution over paths,
/// assembled path by path.
pub fn brute_expected_alignment(delta: &DistanceMatrix, gamma: f64) -> Mat {
    let paths = path_costs(delta);
    let min = paths.iter().map(|&(_, c)| c).fold(f64::INFINITY, f64::min);
    let weights: Vec<f64> = paths
        .iter()
        .map(|&(_, c)| (-(c - min) / gamma).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut expected = Mat::zeros(delta.rows(), delta.cols());
    for ((path, _), w) in paths.iter().zip(&weights) {
        for (j, &i) in path.rows().iter().enumerate() {
            expected.set(i, j, expected.get(i, j) + w / total);
        }
    }
    expected
}
