//! Entropy-smoothed alignment dynamic program.
//!
//! A transcript of `L` labels is aligned to `T` frames through monotone paths
//! that start at the top-left cell of an `L x T` distance matrix, end at the
//! bottom-right cell, and advance one frame per step using only "stay on the
//! same label" and "advance to the next label" moves. Each path therefore
//! assigns every frame to exactly one label and visits labels in transcript
//! order.
//!
//! The smoothed cost replaces the minimum over paths with a soft minimum
//! `-gamma * log(sum_i exp(-a_i / gamma))`, which makes the cost differentiable
//! in every distance entry for `gamma > 0`. The gradient with respect to the
//! distance matrix is the expected alignment matrix under the Gibbs
//! distribution over paths, and is obtained by a second dynamic program over
//! the soft-min weights recorded during the forward pass.
//!
//! `+inf` entries mark forbidden cells; they receive zero soft-min weight and
//! are how path constraints and boundary conditions are expressed. `-inf` and
//! NaN are rejected at the [`DistanceMatrix`] boundary.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec;
use alloc::vec::Vec;

use crate::mat::Mat;
use crate::num;
use crate::{Error, Result};

/// Default cap on brute-force path enumeration.
pub const DEFAULT_ENUMERATION_CAP: u128 = 1_000_000;

/// Cost matrix between transcript entries (rows) and frames (columns).
///
/// Entries are extended reals: finite values or `+inf` for forbidden cells.
/// NaN and `-inf` are rejected on construction.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    values: Mat,
}

impl DistanceMatrix {
    /// Validate and wrap a cost matrix.
    pub fn new(values: Mat) -> Result<DistanceMatrix> {
        if values.rows() == 0 || values.cols() == 0 {
            return Err(Error::InvalidInput(alloc::format!(
                "distance matrix must be non-empty, got {}x{}",
                values.rows(),
                values.cols()
            )));
        }
        for &v in values.data() {
            if v.is_nan() {
                return Err(Error::InvalidInput("distance matrix contains NaN".into()));
            }
            if v == f64::NEG_INFINITY {
                return Err(Error::InvalidInput("distance matrix contains -inf".into()));
            }
        }
        Ok(DistanceMatrix { values })
    }

    /// Validate and wrap a row-major buffer.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<DistanceMatrix> {
        if data.len() != rows * cols {
            return Err(Error::InvalidInput(alloc::format!(
                "expected {rows}x{cols} = {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        DistanceMatrix::new(Mat::from_vec(rows, cols, data))
    }

    /// Number of transcript entries (labels).
    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    /// Number of frames.
    pub fn cols(&self) -> usize {
        self.values.cols()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values.get(row, col)
    }

    pub fn as_mat(&self) -> &Mat {
        &self.values
    }

    pub fn into_mat(self) -> Mat {
        self.values
    }
}

/// A hard monotone alignment: one transcript row per frame.
///
/// `rows[j]` is the 0-based transcript row assigned to frame `j`. A valid path
/// starts at row 0, ends at the last row, and steps by 0 or 1 between
/// consecutive frames.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlignmentPath {
    rows: Vec<usize>,
}

impl AlignmentPath {
    /// Wrap a row assignment, checking the path invariants against `rows` labels.
    pub fn new(assignment: Vec<usize>, rows: usize) -> Result<AlignmentPath> {
        let path = AlignmentPath { rows: assignment };
        path.validate(rows)?;
        Ok(path)
    }

    pub(crate) fn from_raw(rows: Vec<usize>) -> AlignmentPath {
        AlignmentPath { rows }
    }

    /// Row index per frame.
    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn frames(&self) -> usize {
        self.rows.len()
    }

    /// Check start/end anchoring and the step rule for a transcript of `rows` labels.
    pub fn validate(&self, rows: usize) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::InvalidInput("empty alignment path".into()));
        }
        if self.rows[0] != 0 {
            return Err(Error::InvalidInput("path must start at row 0".into()));
        }
        if *self.rows.last().unwrap() != rows - 1 {
            return Err(Error::InvalidInput("path must end at the last row".into()));
        }
        for w in self.rows.windows(2) {
            if w[1] != w[0] && w[1] != w[0] + 1 {
                return Err(Error::InvalidInput("path rows must step by 0 or 1".into()));
            }
        }
        Ok(())
    }

    /// Path cost `<Y, delta>`, summed frame by frame in ascending order.
    pub fn cost_in(&self, delta: &DistanceMatrix) -> f64 {
        self.rows
            .iter()
            .enumerate()
            .map(|(j, &i)| delta.get(i, j))
            .sum()
    }

    /// The path as a binary indicator matrix.
    pub fn indicator(&self, rows: usize) -> Mat {
        let mut m = Mat::zeros(rows, self.rows.len());
        for (j, &i) in self.rows.iter().enumerate() {
            m.set(i, j, 1.0);
        }
        m
    }

    /// True if every frame's row is allowed by `constraint`.
    pub fn respects(&self, constraint: &PathConstraint) -> bool {
        self.rows
            .iter()
            .enumerate()
            .all(|(j, &i)| constraint.allows(j, i))
    }
}

/// Expected alignment matrix under the Gibbs distribution over paths.
///
/// Entries lie in `[0, 1]` up to floating-point roundoff and every column sums
/// to 1: each frame distributes a unit of mass over transcript rows.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftAlignment {
    mass: Mat,
}

impl SoftAlignment {
    pub(crate) fn from_mat(mass: Mat) -> SoftAlignment {
        SoftAlignment { mass }
    }

    pub fn rows(&self) -> usize {
        self.mass.rows()
    }

    pub fn cols(&self) -> usize {
        self.mass.cols()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.mass.get(row, col)
    }

    pub fn as_mat(&self) -> &Mat {
        &self.mass
    }

    pub fn into_mat(self) -> Mat {
        self.mass
    }

    /// Per-column mass totals (each should be 1).
    pub fn column_sums(&self) -> Vec<f64> {
        (0..self.mass.cols()).map(|j| self.mass.col_sum(j)).collect()
    }
}

/// Per-frame restriction of the rows an alignment may visit.
///
/// Frames absent from the map are unconstrained. Row sets use 0-based indices.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PathConstraint {
    allowed: BTreeMap<usize, BTreeSet<usize>>,
}

impl PathConstraint {
    pub fn new() -> PathConstraint {
        PathConstraint::default()
    }

    /// Restrict `frame` to the given rows, replacing any previous restriction.
    pub fn restrict(&mut self, frame: usize, rows: impl IntoIterator<Item = usize>) {
        self.allowed.insert(frame, rows.into_iter().collect());
    }

    /// True when no frame is constrained.
    pub fn is_unconstrained(&self) -> bool {
        self.allowed.is_empty()
    }

    /// Whether `row` is allowed at `frame` (unconstrained frames allow everything).
    pub fn allows(&self, frame: usize, row: usize) -> bool {
        match self.allowed.get(&frame) {
            Some(rows) => rows.contains(&row),
            None => true,
        }
    }

    /// Constrained frames with their allowed row sets.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &BTreeSet<usize>)> {
        self.allowed.iter().map(|(&f, rows)| (f, rows))
    }

    /// Check that every restriction fits an `rows x cols` distance matrix.
    pub fn validate(&self, rows: usize, cols: usize) -> Result<()> {
        for (&frame, set) in &self.allowed {
            if frame >= cols {
                return Err(Error::InvalidInput(alloc::format!(
                    "constraint on frame {frame} outside 0..{cols}"
                )));
            }
            if set.is_empty() {
                return Err(Error::InvalidInput(alloc::format!(
                    "constraint on frame {frame} has an empty allowed set"
                )));
            }
            if let Some(&r) = set.iter().next_back() {
                if r >= rows {
                    return Err(Error::InvalidInput(alloc::format!(
                        "constraint on frame {frame} allows row {r} outside 0..{rows}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Forward-pass tables: cost plus the soft-min weights needed for the
/// gradient recursion and the hard backtrace.
#[derive(Clone, Debug)]
pub struct DpCache {
    gamma: f64,
    rows: usize,
    cols: usize,
    /// Weight of the horizontal predecessor (same row, previous frame) per cell.
    weight_stay: Mat,
    /// Weight of the diagonal predecessor (previous row, previous frame) per cell.
    weight_advance: Mat,
    cost: f64,
}

impl DpCache {
    /// The smoothed alignment cost `psi_gamma` (or the hard minimum at gamma = 0).
    pub fn cost(&self) -> f64 {
        self.cost
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma.is_nan() || gamma < 0.0 {
        return Err(Error::InvalidInput(alloc::format!(
            "gamma must be a nonnegative real, got {gamma}"
        )));
    }
    Ok(())
}

/// Entropy-smoothed minimum of `values`.
///
/// At `gamma = 0` this is the exact minimum. For `gamma > 0` it evaluates
/// `-gamma * log(sum_i exp(-a_i / gamma))` with the running minimum subtracted
/// before exponentiating, so path costs in the hundreds do not underflow.
/// `+inf` terms contribute nothing; an all-`+inf` input yields `+inf`.
pub fn softmin(values: &[f64], gamma: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidInput("softmin of an empty sequence".into()));
    }
    check_gamma(gamma)?;
    let mut min = f64::INFINITY;
    for &v in values {
        if v.is_nan() {
            return Err(Error::InvalidInput("softmin input contains NaN".into()));
        }
        min = min.min(v);
    }
    if gamma == 0.0 || min.is_infinite() {
        // min = -inf short-circuits too: the log-sum diverges.
        return Ok(min);
    }
    let sum: f64 = values.iter().map(|&v| num::exp(-(v - min) / gamma)).sum();
    Ok(min - gamma * num::ln(sum))
}

/// Soft-min weights: softmax of the negated, `gamma`-scaled values.
///
/// Weights are nonnegative and sum to 1; `+inf` inputs get exactly 0.
pub fn softmin_weights(values: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::InvalidInput("weights of an empty sequence".into()));
    }
    if gamma.is_nan() || gamma <= 0.0 {
        return Err(Error::InvalidInput(alloc::format!(
            "softmin weights need gamma > 0, got {gamma}"
        )));
    }
    let mut min = f64::INFINITY;
    for &v in values {
        if v.is_nan() || v == f64::NEG_INFINITY {
            return Err(Error::InvalidInput(
                "softmin weights input must be NaN-free and > -inf".into(),
            ));
        }
        min = min.min(v);
    }
    if min == f64::INFINITY {
        return Err(Error::DegenerateInput);
    }
    let raw: Vec<f64> = values.iter().map(|&v| num::exp(-(v - min) / gamma)).collect();
    let sum: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / sum).collect())
}

/// Two-way soft-min used by the forward recursion.
///
/// Returns the value and the (stay, advance) predecessor weights. With both
/// predecessors infinite the weights are (0, 0), which keeps constrained and
/// border cells out of the gradient recursion. At gamma = 0 the weights are a
/// hard indicator preferring the diagonal (advance) move on exact ties.
#[inline]
fn softmin2(stay: f64, advance: f64, gamma: f64) -> (f64, f64, f64) {
    if stay == f64::INFINITY && advance == f64::INFINITY {
        return (f64::INFINITY, 0.0, 0.0);
    }
    if gamma == 0.0 {
        return if advance <= stay {
            (advance, 0.0, 1.0)
        } else {
            (stay, 1.0, 0.0)
        };
    }
    let min = stay.min(advance);
    let ws = num::exp(-(stay - min) / gamma);
    let wa = num::exp(-(advance - min) / gamma);
    let sum = ws + wa;
    (min - gamma * num::ln(sum), ws / sum, wa / sum)
}

/// Smoothed alignment cost over all feasible paths, with the tables needed for
/// gradients and backtraces.
///
/// Constrained cells are masked to `+inf` before the recursion. When no path
/// survives (only possible under constraints, since `cols >= rows` is
/// enforced), the returned cost is `+inf`.
pub fn forward_cost(
    delta: &DistanceMatrix,
    gamma: f64,
    constraint: Option<&PathConstraint>,
) -> Result<DpCache> {
    check_gamma(gamma)?;
    let (rows, cols) = (delta.rows(), delta.cols());
    if cols < rows {
        return Err(Error::InfeasibleShape { rows, cols });
    }
    let masked;
    let delta = match constraint {
        Some(c) if !c.is_unconstrained() => {
            masked = apply_constraint(delta, c)?;
            &masked
        }
        _ => delta,
    };

    // value[i][j] covers transcript rows 0..i aligned to frames 0..j, with a
    // border row/column of +inf and value[0][0] = 0.
    let mut value = Mat::filled(rows + 1, cols + 1, f64::INFINITY);
    value.set(0, 0, 0.0);
    let mut weight_stay = Mat::zeros(rows, cols);
    let mut weight_advance = Mat::zeros(rows, cols);

    for i in 1..=rows {
        for j in 1..=cols {
            let (min, ws, wa) = softmin2(value.get(i, j - 1), value.get(i - 1, j - 1), gamma);
            value.set(i, j, delta.get(i - 1, j - 1) + min);
            weight_stay.set(i - 1, j - 1, ws);
            weight_advance.set(i - 1, j - 1, wa);
        }
    }

    let cost = value.get(rows, cols);
    Ok(DpCache {
        gamma,
        rows,
        cols,
        weight_stay,
        weight_advance,
        cost,
    })
}

/// Gradient of the smoothed cost with respect to the distance matrix: the
/// expected alignment matrix under the Gibbs distribution over paths.
///
/// Requires a cache built with `gamma > 0` and a finite cost; the hard case is
/// served by [`hard_align`] instead.
pub fn backward_gradient(cache: &DpCache) -> Result<SoftAlignment> {
    if cache.gamma == 0.0 {
        return Err(Error::InvalidCache(
            "gradient undefined at gamma = 0; use hard_align",
        ));
    }
    if !cache.cost.is_finite() {
        return Err(Error::InvalidCache("forward cost is not finite"));
    }
    let (rows, cols) = (cache.rows, cache.cols);
    let mut mass = Mat::zeros(rows, cols);
    for j in (0..cols).rev() {
        for i in (0..rows).rev() {
            if i == rows - 1 && j == cols - 1 {
                mass.set(i, j, 1.0);
                continue;
            }
            let mut r = 0.0;
            if j + 1 < cols {
                r += cache.weight_stay.get(i, j + 1) * mass.get(i, j + 1);
                if i + 1 < rows {
                    r += cache.weight_advance.get(i + 1, j + 1) * mass.get(i + 1, j + 1);
                }
            }
            mass.set(i, j, r);
        }
    }
    Ok(SoftAlignment::from_mat(mass))
}

/// Minimum-cost alignment with its path, via the gamma = 0 recursion and a
/// backtrace over the recorded move indicators.
///
/// Exact ties between staying and advancing resolve to the advance (diagonal)
/// move; traced from the end, that defers each row change to the latest frame
/// the tie allows.
pub fn hard_align(
    delta: &DistanceMatrix,
    constraint: Option<&PathConstraint>,
) -> Result<(f64, AlignmentPath)> {
    let cache = forward_cost(delta, 0.0, constraint)?;
    if !cache.cost.is_finite() {
        return Err(Error::Infeasible);
    }
    let (rows, cols) = (cache.rows, cache.cols);
    let mut assignment = vec![0usize; cols];
    let mut i = rows - 1;
    for j in (0..cols).rev() {
        assignment[j] = i;
        if j > 0 && cache.weight_advance.get(i, j) == 1.0 {
            i -= 1;
        }
    }
    debug_assert_eq!(i, 0, "backtrace must finish at the first row");
    Ok((cache.cost(), AlignmentPath::from_raw(assignment)))
}

/// Number of monotone alignments of `rows` labels onto `cols` frames:
/// `C(cols - 1, rows - 1)`. `None` on u128 overflow.
pub fn alignment_count(rows: usize, cols: usize) -> Option<u128> {
    if rows == 0 || cols < rows {
        return Some(0);
    }
    let n = (cols - 1) as u128;
    let mut k = (rows - 1) as u128;
    if k > n - k {
        k = n - k;
    }
    let mut c: u128 = 1;
    for i in 0..k {
        c = c.checked_mul(n - i)?;
        c /= i + 1;
    }
    Some(c)
}

/// Enumerate every monotone alignment, capped at [`DEFAULT_ENUMERATION_CAP`] paths.
///
/// Brute-force oracle for testing the dynamic program; do not use beyond desk
/// scale.
pub fn enumerate_alignments(rows: usize, cols: usize) -> Result<Vec<AlignmentPath>> {
    enumerate_alignments_with_cap(rows, cols, DEFAULT_ENUMERATION_CAP)
}

/// [`enumerate_alignments`] with an explicit path-count cap.
pub fn enumerate_alignments_with_cap(
    rows: usize,
    cols: usize,
    cap: u128,
) -> Result<Vec<AlignmentPath>> {
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidInput("shape must be at least 1x1".into()));
    }
    if cols < rows {
        return Err(Error::InfeasibleShape { rows, cols });
    }
    let count = alignment_count(rows, cols).unwrap_or(u128::MAX);
    if count > cap {
        return Err(Error::OracleTooLarge { paths: count, cap });
    }

    // A path is determined by the ascending frame gaps at which the row
    // advances: choose rows-1 of the cols-1 gaps.
    let picks = rows - 1;
    let gaps = cols - 1;
    let mut paths = Vec::with_capacity(count as usize);
    let mut chosen: Vec<usize> = (0..picks).collect();
    loop {
        let mut assignment = Vec::with_capacity(cols);
        let mut row = 0usize;
        let mut next = 0usize;
        for gap in 0..cols {
            assignment.push(row);
            if next < picks && chosen[next] == gap {
                row += 1;
                next += 1;
            }
        }
        debug_assert_eq!(assignment.len(), cols);
        paths.push(AlignmentPath::from_raw(assignment));

        // Advance to the next combination in lexicographic order; chosen[idx]
        // tops out at idx + gaps - picks.
        if picks == 0 {
            break;
        }
        let mut idx = picks - 1;
        loop {
            if chosen[idx] < idx + gaps - picks {
                break;
            }
            if idx == 0 {
                return Ok(paths);
            }
            idx -= 1;
        }
        chosen[idx] += 1;
        for later in idx + 1..picks {
            chosen[later] = chosen[later - 1] + 1;
        }
    }
    Ok(paths)
}

/// Copy of `delta` with every disallowed (row, frame) cell replaced by `+inf`.
pub fn apply_constraint(delta: &DistanceMatrix, constraint: &PathConstraint) -> Result<DistanceMatrix> {
    constraint.validate(delta.rows(), delta.cols())?;
    let mut masked = delta.as_mat().clone();
    for (frame, allowed) in constraint.iter() {
        for row in 0..delta.rows() {
            if !allowed.contains(&row) {
                masked.set(row, frame, f64::INFINITY);
            }
        }
    }
    Ok(DistanceMatrix { values: masked })
}
