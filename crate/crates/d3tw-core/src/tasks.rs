//! Inference and evaluation on top of the alignment engine.
//!
//! Alignment decodes frame labels for a known transcript; segmentation picks
//! the cheapest transcript from a candidate set first (ranked by the smoothed
//! cost, decoded exactly). Sparse frame annotations become path constraints.
//! The three metrics are frame accuracy, unit accuracy (run-length units
//! compared by edit distance), and IoD (intersection over detection against
//! ground-truth intervals).

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::loss::Transcript;
use crate::model::{
    emission_distance, forward, ClassPrior, FeatureSequence, ModelParams, Posteriors,
    DEFAULT_EMISSION_EPSILON,
};
use crate::softdp::{
    backward_gradient, forward_cost, hard_align, AlignmentPath, PathConstraint, SoftAlignment,
};
use crate::{Error, Result};

/// Half-open frame interval `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Interval {
    start: usize,
    end: usize,
}

impl Interval {
    pub fn new(start: usize, end: usize) -> Result<Interval> {
        if start >= end {
            return Err(Error::InvalidInput(alloc::format!(
                "interval [{start}, {end}) is empty or reversed"
            )));
        }
        Ok(Interval { start, end })
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn end(&self) -> usize {
        self.end
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Number of frames shared with `other`.
    pub fn overlap(&self, other: &Interval) -> usize {
        let lo = self.start.max(other.start);
        let hi = self.end.min(other.end);
        hi.saturating_sub(lo)
    }
}

/// One maximal run of a single action.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub action: usize,
    pub interval: Interval,
}

/// A decoded labeling: per-frame actions plus the merged segment view.
#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation {
    frame_labels: Vec<usize>,
    segments: Vec<Segment>,
    source_transcript: Transcript,
    alignment_cost: f64,
}

impl Segmentation {
    pub(crate) fn from_path(
        path: &AlignmentPath,
        source_transcript: Transcript,
        alignment_cost: f64,
    ) -> Segmentation {
        let frame_labels: Vec<usize> = path
            .rows()
            .iter()
            .map(|&i| source_transcript.actions()[i])
            .collect();
        let segments = labels_to_segments(&frame_labels);
        Segmentation {
            frame_labels,
            segments,
            source_transcript,
            alignment_cost,
        }
    }

    pub fn frame_labels(&self) -> &[usize] {
        &self.frame_labels
    }

    /// Maximal single-action runs tiling `[0, frames)`; adjacent duplicate
    /// transcript entries collapse into one segment here.
    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn source_transcript(&self) -> &Transcript {
        &self.source_transcript
    }

    pub fn alignment_cost(&self) -> f64 {
        self.alignment_cost
    }

    pub fn frames(&self) -> usize {
        self.frame_labels.len()
    }
}

/// Distinct transcripts to rank during segmentation, held in sorted order so
/// argmin ties resolve identically on every platform.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CandidateSet {
    transcripts: Vec<Transcript>,
}

impl CandidateSet {
    /// Sort lexicographically by action ids and drop exact duplicates.
    pub fn new(mut transcripts: Vec<Transcript>) -> Result<CandidateSet> {
        if transcripts.is_empty() {
            return Err(Error::InvalidInput("candidate set is empty".into()));
        }
        transcripts.sort();
        transcripts.dedup();
        Ok(CandidateSet { transcripts })
    }

    pub fn transcripts(&self) -> &[Transcript] {
        &self.transcripts
    }

    pub fn len(&self) -> usize {
        self.transcripts.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transcript> {
        self.transcripts.iter()
    }
}

/// Merge adjacent equal labels into run-length units.
pub fn collapse_labels(labels: &[usize]) -> Vec<usize> {
    let mut units = Vec::new();
    for &l in labels {
        if units.last() != Some(&l) {
            units.push(l);
        }
    }
    units
}

/// Run-length segments of a label sequence, in frame order.
pub fn labels_to_segments(labels: &[usize]) -> Vec<Segment> {
    let mut segments = Vec::new();
    let mut start = 0;
    for j in 1..=labels.len() {
        if j == labels.len() || labels[j] != labels[start] {
            segments.push(Segment {
                action: labels[start],
                interval: Interval {
                    start,
                    end: j,
                },
            });
            start = j;
        }
    }
    segments
}

/// Uniform baseline labeling: entry `i` covers frames
/// `[floor(i * T / L), floor((i + 1) * T / L))`, so earlier entries absorb the
/// remainder last.
pub fn expand_transcript_uniform(transcript: &Transcript, frames: usize) -> Result<Vec<usize>> {
    let len = transcript.len();
    if frames < len {
        return Err(Error::InfeasibleShape {
            rows: len,
            cols: frames,
        });
    }
    let mut labels = Vec::with_capacity(frames);
    for (i, &action) in transcript.actions().iter().enumerate() {
        let start = i * frames / len;
        let end = (i + 1) * frames / len;
        labels.extend(core::iter::repeat(action).take(end - start));
    }
    debug_assert_eq!(labels.len(), frames);
    Ok(labels)
}

/// Unit-cost edit distance between two id sequences.
pub fn levenshtein(a: &[usize], b: &[usize]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Decode frame labels for a known transcript with the exact (unsmoothed)
/// alignment; `alignment_cost` is the decoded path's cost.
pub fn align(
    posteriors: &Posteriors,
    prior: &ClassPrior,
    transcript: &Transcript,
    constraint: Option<&PathConstraint>,
) -> Result<Segmentation> {
    let delta = emission_distance(posteriors, prior, transcript, DEFAULT_EMISSION_EPSILON)?;
    let (cost, path) = hard_align(&delta, constraint)?;
    Ok(Segmentation::from_path(&path, transcript.clone(), cost))
}

/// Expected (soft) alignment of a transcript at smoothing `gamma`, for
/// inspection alongside the hard decode.
pub fn soft_alignment(
    posteriors: &Posteriors,
    prior: &ClassPrior,
    transcript: &Transcript,
    gamma: f64,
    constraint: Option<&PathConstraint>,
) -> Result<SoftAlignment> {
    let delta = emission_distance(posteriors, prior, transcript, DEFAULT_EMISSION_EPSILON)?;
    let cache = forward_cost(&delta, gamma, constraint)?;
    if !cache.cost().is_finite() {
        return Err(Error::Infeasible);
    }
    backward_gradient(&cache)
}

/// Pick the candidate transcript with the least smoothed cost, then decode it.
///
/// Returns the winner, its decoded segmentation, and every candidate's cost in
/// the set's (sorted) order; candidates longer than the sequence report
/// `+inf`. Ties keep the earliest candidate.
pub fn segment(
    posteriors: &Posteriors,
    prior: &ClassPrior,
    candidates: &CandidateSet,
    gamma: f64,
) -> Result<(Transcript, Segmentation, Vec<f64>)> {
    let frames = posteriors.frames();
    let mut costs = Vec::with_capacity(candidates.len());
    let mut best: Option<(usize, f64)> = None;
    for (idx, candidate) in candidates.iter().enumerate() {
        let cost = if candidate.len() > frames {
            f64::INFINITY
        } else {
            let delta =
                emission_distance(posteriors, prior, candidate, DEFAULT_EMISSION_EPSILON)?;
            forward_cost(&delta, gamma, None)?.cost()
        };
        costs.push(cost);
        if cost.is_finite() && best.map_or(true, |(_, c)| cost < c) {
            best = Some((idx, cost));
        }
    }
    let Some((winner_idx, _)) = best else {
        return Err(Error::NoCandidate);
    };
    let winner = candidates.transcripts()[winner_idx].clone();
    let segmentation = align(posteriors, prior, &winner, None)?;
    Ok((winner, segmentation, costs))
}

/// Turn sparse ground-truth frame annotations into a path constraint: an
/// annotated frame may only sit on transcript rows carrying its action.
pub fn constraints_from_annotations(
    transcript: &Transcript,
    annotations: &BTreeMap<usize, usize>,
) -> Result<PathConstraint> {
    let mut constraint = PathConstraint::new();
    for (&frame, &action) in annotations {
        let rows: Vec<usize> = transcript
            .actions()
            .iter()
            .enumerate()
            .filter_map(|(i, &a)| (a == action).then_some(i))
            .collect();
        if rows.is_empty() {
            return Err(Error::InconsistentAnnotation { frame, action });
        }
        constraint.restrict(frame, rows);
    }
    Ok(constraint)
}

/// Fraction of frames labeled correctly.
pub fn frame_accuracy(pred: &[usize], gt: &[usize]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::InvalidInput(alloc::format!(
            "frame label lengths disagree or are empty: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    let matches = pred.iter().zip(gt).filter(|(p, g)| p == g).count();
    Ok(matches as f64 / gt.len() as f64)
}

/// Edit-distance accuracy over run-length units, floored at zero:
/// `max(0, 1 - D / gt_units)`.
pub fn unit_accuracy(pred: &[usize], gt: &[usize]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::InvalidInput(alloc::format!(
            "frame label lengths disagree or are empty: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    let pred_units = collapse_labels(pred);
    let gt_units = collapse_labels(gt);
    let dist = levenshtein(&pred_units, &gt_units);
    Ok((1.0 - dist as f64 / gt_units.len() as f64).max(0.0))
}

fn check_gt_segments(gt: &[Segment]) -> Result<()> {
    for w in gt.windows(2) {
        if w[1].interval.start < w[0].interval.end {
            return Err(Error::InvalidInput(
                "ground-truth intervals overlap or are out of order".into(),
            ));
        }
    }
    Ok(())
}

/// Per-ground-truth-interval IoD scores, in interval order.
///
/// For a ground-truth interval of action `a`, the detection `I` is the
/// predicted segment of action `a` with the largest overlap; the score is
/// `overlap / |I|`, or 0 when the action is never predicted.
pub fn iod_scores(pred: &[Segment], gt: &[Segment]) -> Result<Vec<f64>> {
    if gt.is_empty() {
        return Err(Error::InvalidInput("no ground-truth intervals".into()));
    }
    check_gt_segments(gt)?;
    let mut scores = Vec::with_capacity(gt.len());
    for g in gt {
        let mut best: Option<(usize, &Interval)> = None;
        for p in pred.iter().filter(|p| p.action == g.action) {
            let ov = p.interval.overlap(&g.interval);
            if best.map_or(true, |(b, _)| ov > b) {
                best = Some((ov, &p.interval));
            }
        }
        scores.push(match best {
            Some((overlap, detection)) => overlap as f64 / detection.len() as f64,
            None => 0.0,
        });
    }
    Ok(scores)
}

/// Mean IoD over all ground-truth intervals.
pub fn iod(pred: &[Segment], gt: &[Segment]) -> Result<f64> {
    let scores = iod_scores(pred, gt)?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Whether evaluation decodes the known transcript or searches candidates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    Alignment,
    Segmentation,
}

/// Evaluation settings; `candidates` is required in segmentation mode.
#[derive(Clone, Copy, Debug)]
pub struct EvalOptions<'a> {
    pub mode: EvalMode,
    pub gamma: f64,
    pub candidates: Option<&'a CandidateSet>,
}

/// One sequence to evaluate: features, its transcript, and ground truth.
#[derive(Clone, Copy, Debug)]
pub struct EvalRecord<'a> {
    pub id: &'a str,
    pub features: &'a FeatureSequence,
    pub transcript: &'a Transcript,
    pub gt_labels: &'a [usize],
    pub constraint: Option<&'a PathConstraint>,
}

/// Per-sequence metric components kept alongside the aggregate report.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceMetrics {
    pub id: String,
    pub frames: usize,
    pub frame_matches: usize,
    pub frame_accuracy: f64,
    pub unit_accuracy: f64,
    pub gt_intervals: usize,
    pub iod_sum: f64,
    pub mean_iod: f64,
}

/// Aggregated metrics: frame accuracy is frame-weighted, unit accuracy is
/// sequence-averaged, and IoD is averaged over ground-truth intervals.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub frame_accuracy: f64,
    pub unit_accuracy: f64,
    pub mean_iod: f64,
    pub per_sequence: Vec<SequenceMetrics>,
}

/// Decode every record and aggregate the three metrics.
///
/// Per-sequence failures come back wrapped with the offending sequence id.
pub fn evaluate(
    records: &[EvalRecord<'_>],
    params: &ModelParams,
    prior: &ClassPrior,
    options: &EvalOptions<'_>,
) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::InvalidInput("nothing to evaluate: empty split".into()));
    }
    if options.mode == EvalMode::Segmentation && options.candidates.is_none() {
        return Err(Error::InvalidInput(
            "segmentation mode needs a candidate set".into(),
        ));
    }

    let mut per_sequence = Vec::with_capacity(records.len());
    let mut total_frames = 0usize;
    let mut total_matches = 0usize;
    let mut unit_sum = 0.0;
    let mut iod_total = 0.0;
    let mut iod_intervals = 0usize;

    for record in records {
        let metrics = evaluate_one(record, params, prior, options)
            .map_err(|e| e.in_sequence(record.id))?;
        total_frames += metrics.frames;
        total_matches += metrics.frame_matches;
        unit_sum += metrics.unit_accuracy;
        iod_total += metrics.iod_sum;
        iod_intervals += metrics.gt_intervals;
        per_sequence.push(metrics);
    }

    Ok(MetricsReport {
        frame_accuracy: total_matches as f64 / total_frames as f64,
        unit_accuracy: unit_sum / per_sequence.len() as f64,
        mean_iod: iod_total / iod_intervals as f64,
        per_sequence,
    })
}

fn evaluate_one(
    record: &EvalRecord<'_>,
    params: &ModelParams,
    prior: &ClassPrior,
    options: &EvalOptions<'_>,
) -> Result<SequenceMetrics> {
    if record.gt_labels.len() != record.features.frames() {
        return Err(Error::InvalidInput(alloc::format!(
            "ground truth covers {} frames, features have {}",
            record.gt_labels.len(),
            record.features.frames()
        )));
    }
    let posteriors = forward(record.features, params)?;
    let segmentation = match options.mode {
        EvalMode::Alignment => align(&posteriors, prior, record.transcript, record.constraint)?,
        EvalMode::Segmentation => {
            let candidates = options.candidates.expect("checked by evaluate");
            segment(&posteriors, prior, candidates, options.gamma)?.1
        }
    };

    let pred = segmentation.frame_labels();
    let frame_matches = pred
        .iter()
        .zip(record.gt_labels)
        .filter(|(p, g)| p == g)
        .count();
    let frame_acc = frame_matches as f64 / pred.len() as f64;
    let unit_acc = unit_accuracy(pred, record.gt_labels)?;
    let gt_segments = labels_to_segments(record.gt_labels);
    let scores = iod_scores(segmentation.segments(), &gt_segments)?;
    let iod_sum: f64 = scores.iter().sum();

    Ok(SequenceMetrics {
        id: String::from(record.id),
        frames: pred.len(),
        frame_matches,
        frame_accuracy: frame_acc,
        unit_accuracy: unit_acc,
        gt_intervals: scores.len(),
        iod_sum,
        mean_iod: iod_sum / scores.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mat::Mat;
    use crate::model::AdamState;
    use crate::softdp::{enumerate_alignments, softmin, DistanceMatrix};

    fn t(ids: &[usize]) -> Transcript {
        Transcript::new(ids.to_vec()).unwrap()
    }

    fn post(rows: &[&[f64]]) -> Posteriors {
        Posteriors::new(Mat::from_rows(rows)).unwrap()
    }

    fn seg(action: usize, start: usize, end: usize) -> Segment {
        Segment {
            action,
            interval: Interval::new(start, end).unwrap(),
        }
    }

    #[test]
    fn interval_basics() {
        let a = Interval::new(2, 6).unwrap();
        assert_eq!(a.len(), 4);
        assert!(Interval::new(3, 3).is_err());
        assert!(Interval::new(5, 2).is_err());
        let b = Interval::new(4, 9).unwrap();
        assert_eq!(a.overlap(&b), 2);
        assert_eq!(b.overlap(&a), 2);
        let c = Interval::new(6, 7).unwrap();
        assert_eq!(a.overlap(&c), 0);
    }

    #[test]
    fn collapse_merges_adjacent_runs() {
        assert_eq!(collapse_labels(&[0, 0, 1, 1, 1]), vec![0, 1]);
        assert_eq!(collapse_labels(&[2, 0, 0, 2]), vec![2, 0, 2]);
        assert_eq!(collapse_labels(&[]), Vec::<usize>::new());
    }

    #[test]
    fn segments_tile_the_label_sequence() {
        let segs = labels_to_segments(&[0, 0, 1, 1, 1]);
        assert_eq!(segs, vec![seg(0, 0, 2), seg(1, 2, 5)]);
        assert_eq!(labels_to_segments(&[]), Vec::<Segment>::new());
    }

    #[test]
    fn uniform_expansion_follows_the_block_rule() {
        assert_eq!(expand_transcript_uniform(&t(&[0, 1]), 4).unwrap(), vec![0, 0, 1, 1]);
        assert_eq!(
            expand_transcript_uniform(&t(&[0, 1, 2]), 4).unwrap(),
            vec![0, 1, 2, 2]
        );
        assert!(matches!(
            expand_transcript_uniform(&t(&[0, 1, 2]), 2),
            Err(Error::InfeasibleShape { rows: 3, cols: 2 })
        ));
    }

    #[test]
    fn collapse_inverts_expand_without_adjacent_repeats() {
        for frames in 3..10 {
            let tr = t(&[2, 0, 1]);
            let labels = expand_transcript_uniform(&tr, frames).unwrap();
            assert_eq!(collapse_labels(&labels), tr.actions());
        }
    }

    #[test]
    fn levenshtein_matches_hand_counts() {
        assert_eq!(levenshtein(&[0, 1, 2], &[0, 1, 2]), 0);
        assert_eq!(levenshtein(&[0, 1, 2], &[0, 2]), 1);
        assert_eq!(levenshtein(&[1], &[0]), 1);
        assert_eq!(levenshtein(&[], &[0, 1]), 2);
        assert_eq!(levenshtein(&[0, 1], &[]), 2);
        assert_eq!(levenshtein(&[0, 1, 0, 1], &[1, 0, 1, 0]), 2);
    }

    #[test]
    fn frame_accuracy_counts_matches() {
        assert_eq!(frame_accuracy(&[1, 1, 0], &[1, 1, 0]).unwrap(), 1.0);
        let pred = [0, 0, 0, 1, 1, 1, 2, 2, 2, 2];
        let gt = [0, 0, 0, 1, 1, 0, 0, 2, 2, 0];
        assert!((frame_accuracy(&pred, &gt).unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(frame_accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert!(frame_accuracy(&[0], &[0, 1]).is_err());
        assert!(frame_accuracy(&[], &[]).is_err());
    }

    #[test]
    fn unit_accuracy_uses_run_length_units() {
        assert_eq!(unit_accuracy(&[0, 0, 1], &[0, 1, 1]).unwrap(), 1.0);
        // pred units [0,1,2] vs gt units [0,2]: one deletion, two gt units.
        let pred = [0, 1, 2];
        let gt = [0, 2, 2];
        assert!((unit_accuracy(&pred, &gt).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(unit_accuracy(&[1, 1], &[0, 0]).unwrap(), 0.0);
    }

    #[test]
    fn unit_accuracy_floors_at_zero() {
        let pred = [0, 1, 0, 1, 0];
        let gt = [0, 0, 0, 0, 0];
        assert_eq!(unit_accuracy(&pred, &gt).unwrap(), 0.0);
    }

    #[test]
    fn iod_divides_overlap_by_detection_length() {
        let pred = [seg(3, 0, 10)];
        let gt = [seg(3, 5, 10)];
        assert!((iod(&pred, &gt).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn iod_is_one_for_perfect_predictions() {
        let pred = [seg(0, 0, 4), seg(1, 4, 9)];
        assert_eq!(iod(&pred, &pred).unwrap(), 1.0);
    }

    #[test]
    fn iod_scores_missing_actions_as_zero() {
        let pred = [seg(0, 0, 5)];
        let gt = [seg(0, 0, 5), seg(1, 5, 8)];
        let scores = iod_scores(&pred, &gt).unwrap();
        assert_eq!(scores, vec![1.0, 0.0]);
        assert!((iod(&pred, &gt).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn iod_picks_the_maximal_overlap_detection() {
        // Two predicted runs of action 0; the second overlaps the ground truth.
        let pred = [seg(0, 0, 2), seg(1, 2, 4), seg(0, 4, 10)];
        let gt = [seg(0, 4, 10)];
        assert_eq!(iod(&pred, &gt).unwrap(), 1.0);
    }

    #[test]
    fn iod_rejects_overlapping_ground_truth() {
        let pred = [seg(0, 0, 5)];
        let gt = [seg(0, 0, 5), seg(1, 3, 8)];
        assert!(iod(&pred, &gt).is_err());
        assert!(iod(&pred, &[]).is_err());
    }

    #[test]
    fn candidate_sets_sort_and_dedup() {
        let set = CandidateSet::new(vec![t(&[1, 0]), t(&[0, 1]), t(&[1, 0]), t(&[0])]).unwrap();
        assert_eq!(
            set.transcripts(),
            &[t(&[0]), t(&[0, 1]), t(&[1, 0])]
        );
        assert!(CandidateSet::new(vec![]).is_err());
    }

    #[test]
    fn align_single_action_covers_every_frame() {
        let posteriors = post(&[&[0.9, 0.1], &[0.4, 0.6], &[0.2, 0.8]]);
        let prior = ClassPrior::uniform(2);
        let s = align(&posteriors, &prior, &t(&[1]), None).unwrap();
        assert_eq!(s.frame_labels(), &[1, 1, 1]);
        assert_eq!(s.segments(), &[seg(1, 0, 3)]);
    }

    #[test]
    fn align_square_case_is_the_diagonal() {
        let posteriors = post(&[&[0.8, 0.2], &[0.3, 0.7]]);
        let prior = ClassPrior::uniform(2);
        let s = align(&posteriors, &prior, &t(&[0, 1]), None).unwrap();
        assert_eq!(s.frame_labels(), &[0, 1]);
    }

    #[test]
    fn align_follows_the_posterior_peaks() {
        let posteriors = post(&[&[0.9, 0.1], &[0.2, 0.8], &[0.1, 0.9]]);
        let prior = ClassPrior::uniform(2);
        let s = align(&posteriors, &prior, &t(&[0, 1]), None).unwrap();
        assert_eq!(s.frame_labels(), &[0, 1, 1]);
        assert_eq!(s.segments(), &[seg(0, 0, 1), seg(1, 1, 3)]);
        assert_eq!(s.source_transcript(), &t(&[0, 1]));
        assert!(s.alignment_cost().is_finite());
    }

    #[test]
    fn align_merges_adjacent_duplicate_transcript_entries() {
        let posteriors = post(&[&[0.6, 0.4], &[0.6, 0.4], &[0.6, 0.4]]);
        let prior = ClassPrior::uniform(2);
        let s = align(&posteriors, &prior, &t(&[0, 0]), None).unwrap();
        assert_eq!(s.frame_labels(), &[0, 0, 0]);
        assert_eq!(s.segments(), &[seg(0, 0, 3)]);
        assert_eq!(s.source_transcript().len(), 2);
    }

    #[test]
    fn align_rejects_transcripts_longer_than_the_sequence() {
        let posteriors = post(&[&[0.5, 0.5]]);
        let prior = ClassPrior::uniform(2);
        assert!(matches!(
            align(&posteriors, &prior, &t(&[0, 1]), None),
            Err(Error::InfeasibleShape { rows: 2, cols: 1 })
        ));
    }

    #[test]
    fn soft_alignment_is_column_stochastic() {
        let posteriors = post(&[&[0.9, 0.1], &[0.2, 0.8], &[0.1, 0.9]]);
        let prior = ClassPrior::uniform(2);
        let aln = soft_alignment(&posteriors, &prior, &t(&[0, 1]), 0.5, None).unwrap();
        for sum in aln.column_sums() {
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn constraints_map_annotations_to_matching_rows() {
        let transcript = t(&[0, 1, 0]);
        let mut annotations = BTreeMap::new();
        annotations.insert(5usize, 1usize);
        let c = constraints_from_annotations(&transcript, &annotations).unwrap();
        let allowed: Vec<(usize, Vec<usize>)> = c
            .iter()
            .map(|(f, rows)| (f, rows.iter().copied().collect()))
            .collect();
        assert_eq!(allowed, vec![(5, vec![1])]);

        annotations.insert(2, 0);
        let c = constraints_from_annotations(&transcript, &annotations).unwrap();
        assert!(c.allows(2, 0) && !c.allows(2, 1) && c.allows(2, 2));
    }

    #[test]
    fn annotations_outside_the_transcript_are_inconsistent() {
        let transcript = t(&[0, 1]);
        let mut annotations = BTreeMap::new();
        annotations.insert(3usize, 7usize);
        assert!(matches!(
            constraints_from_annotations(&transcript, &annotations),
            Err(Error::InconsistentAnnotation { frame: 3, action: 7 })
        ));
    }

    #[test]
    fn fully_annotated_frames_pin_the_decode() {
        // Uniform posteriors carry no signal; the constraint alone must fix
        // the labeling.
        let posteriors = post(&[&[0.5, 0.5], &[0.5, 0.5], &[0.5, 0.5]]);
        let prior = ClassPrior::uniform(2);
        let transcript = t(&[0, 1]);
        let mut annotations = BTreeMap::new();
        annotations.insert(0usize, 0usize);
        annotations.insert(1usize, 0usize);
        annotations.insert(2usize, 1usize);
        let constraint = constraints_from_annotations(&transcript, &annotations).unwrap();
        let s = align(&posteriors, &prior, &transcript, Some(&constraint)).unwrap();
        assert_eq!(s.frame_labels(), &[0, 0, 1]);
        for (&frame, &action) in &annotations {
            assert_eq!(s.frame_labels()[frame], action);
        }
    }

    #[test]
    fn contradictory_annotations_make_alignment_infeasible() {
        let posteriors = post(&[&[0.5, 0.5], &[0.5, 0.5]]);
        let prior = ClassPrior::uniform(2);
        let transcript = t(&[0, 1]);
        // Action order is 0 then 1, but the annotations demand the reverse.
        let mut annotations = BTreeMap::new();
        annotations.insert(0usize, 1usize);
        annotations.insert(1usize, 0usize);
        let constraint = constraints_from_annotations(&transcript, &annotations).unwrap();
        assert!(matches!(
            align(&posteriors, &prior, &transcript, Some(&constraint)),
            Err(Error::Infeasible)
        ));
    }

    #[test]
    fn segment_picks_the_cheapest_candidate() {
        let posteriors = post(&[&[0.95, 0.05], &[0.9, 0.1], &[0.15, 0.85]]);
        let prior = ClassPrior::uniform(2);
        let candidates = CandidateSet::new(vec![t(&[0, 1]), t(&[1, 0]), t(&[1])]).unwrap();
        let (winner, segmentation, costs) =
            segment(&posteriors, &prior, &candidates, 0.1).unwrap();
        assert_eq!(winner, t(&[0, 1]));
        assert_eq!(segmentation.frame_labels(), &[0, 0, 1]);
        assert_eq!(costs.len(), 3);
        let winner_idx = candidates
            .iter()
            .position(|c| c == &winner)
            .unwrap();
        for &c in &costs {
            assert!(costs[winner_idx] <= c);
        }
    }

    #[test]
    fn segment_with_one_candidate_returns_it() {
        let posteriors = post(&[&[0.1, 0.9], &[0.2, 0.8]]);
        let prior = ClassPrior::uniform(2);
        let candidates = CandidateSet::new(vec![t(&[0])]).unwrap();
        let (winner, _, costs) = segment(&posteriors, &prior, &candidates, 0.1).unwrap();
        assert_eq!(winner, t(&[0]));
        assert_eq!(costs.len(), 1);
    }

    #[test]
    fn segment_marks_long_candidates_infeasible() {
        let posteriors = post(&[&[0.5, 0.5], &[0.5, 0.5]]);
        let prior = ClassPrior::uniform(2);
        let candidates = CandidateSet::new(vec![t(&[0]), t(&[0, 1, 0])]).unwrap();
        let (_, _, costs) = segment(&posteriors, &prior, &candidates, 0.1).unwrap();
        assert_eq!(costs[1], f64::INFINITY);
        let only_long = CandidateSet::new(vec![t(&[0, 1, 0])]).unwrap();
        assert!(matches!(
            segment(&posteriors, &prior, &only_long, 0.1),
            Err(Error::NoCandidate)
        ));
    }

    #[test]
    fn segment_matches_the_enumeration_oracle() {
        // Rank candidates by brute-force smoothed cost over enumerated paths
        // and check the DP-based search agrees.
        let posteriors = post(&[
            &[0.7, 0.3],
            &[0.6, 0.4],
            &[0.25, 0.75],
            &[0.45, 0.55],
        ]);
        let prior = ClassPrior::uniform(2);
        let gamma = 0.3;
        let candidates =
            CandidateSet::new(vec![t(&[0]), t(&[1]), t(&[0, 1]), t(&[1, 0])]).unwrap();

        let mut oracle_best: Option<(usize, f64)> = None;
        for (idx, cand) in candidates.iter().enumerate() {
            let delta =
                emission_distance(&posteriors, &prior, cand, DEFAULT_EMISSION_EPSILON).unwrap();
            let path_costs: Vec<f64> = enumerate_alignments(cand.len(), 4)
                .unwrap()
                .iter()
                .map(|p| p.cost_in(&delta))
                .collect();
            let cost = softmin(&path_costs, gamma).unwrap();
            if oracle_best.map_or(true, |(_, c)| cost < c) {
                oracle_best = Some((idx, cost));
            }
        }

        let (winner, _, costs) = segment(&posteriors, &prior, &candidates, gamma).unwrap();
        let (oracle_idx, oracle_cost) = oracle_best.unwrap();
        assert_eq!(&winner, &candidates.transcripts()[oracle_idx]);
        assert!((costs[oracle_idx] - oracle_cost).abs() < 1e-9);
    }

    #[test]
    fn segment_breaks_ties_toward_the_earlier_candidate() {
        // Uniform posteriors make every same-length candidate cost identical.
        let posteriors = post(&[&[0.5, 0.5], &[0.5, 0.5], &[0.5, 0.5]]);
        let prior = ClassPrior::uniform(2);
        let candidates = CandidateSet::new(vec![t(&[1, 0]), t(&[0, 1])]).unwrap();
        let (winner, _, costs) = segment(&posteriors, &prior, &candidates, 1.0).unwrap();
        assert_eq!(costs[0], costs[1]);
        assert_eq!(winner, t(&[0, 1]));
    }

    fn separable_model() -> (ModelParams, ClassPrior) {
        let params = ModelParams::from_parts(
            Mat::from_rows(&[&[10.0, -10.0]]),
            vec![0.0, 0.0],
            AdamState::fresh(1, 2),
        )
        .unwrap();
        (params, ClassPrior::uniform(2))
    }

    #[test]
    fn evaluate_scores_a_perfect_model_at_one() {
        let (params, prior) = separable_model();
        let features = FeatureSequence::from_rows(&[&[1.0], &[1.2], &[-1.1], &[-0.9]]).unwrap();
        let transcript = t(&[0, 1]);
        let gt = [0, 0, 1, 1];
        let records = [EvalRecord {
            id: "seq0",
            features: &features,
            transcript: &transcript,
            gt_labels: &gt,
            constraint: None,
        }];
        let report = evaluate(
            &records,
            &params,
            &prior,
            &EvalOptions {
                mode: EvalMode::Alignment,
                gamma: 0.1,
                candidates: None,
            },
        )
        .unwrap();
        assert_eq!(report.frame_accuracy, 1.0);
        assert_eq!(report.unit_accuracy, 1.0);
        assert_eq!(report.mean_iod, 1.0);
        assert_eq!(report.per_sequence.len(), 1);
        assert_eq!(report.per_sequence[0].frames, 4);
    }

    #[test]
    fn evaluate_segmentation_mode_searches_candidates() {
        let (params, prior) = separable_model();
        let features = FeatureSequence::from_rows(&[&[1.0], &[-1.0], &[-1.2]]).unwrap();
        let transcript = t(&[0, 1]);
        let gt = [0, 1, 1];
        let candidates = CandidateSet::new(vec![t(&[0, 1]), t(&[1, 0]), t(&[1])]).unwrap();
        let records = [EvalRecord {
            id: "seq0",
            features: &features,
            transcript: &transcript,
            gt_labels: &gt,
            constraint: None,
        }];
        let report = evaluate(
            &records,
            &params,
            &prior,
            &EvalOptions {
                mode: EvalMode::Segmentation,
                gamma: 0.1,
                candidates: Some(&candidates),
            },
        )
        .unwrap();
        assert_eq!(report.frame_accuracy, 1.0);
    }

    #[test]
    fn evaluate_requires_candidates_for_segmentation() {
        let (params, prior) = separable_model();
        let features = FeatureSequence::from_rows(&[&[1.0]]).unwrap();
        let transcript = t(&[0]);
        let gt = [0];
        let records = [EvalRecord {
            id: "seq0",
            features: &features,
            transcript: &transcript,
            gt_labels: &gt,
            constraint: None,
        }];
        let options = EvalOptions {
            mode: EvalMode::Segmentation,
            gamma: 0.1,
            candidates: None,
        };
        assert!(evaluate(&records, &params, &prior, &options).is_err());
    }

    #[test]
    fn evaluate_rejects_an_empty_split() {
        let (params, prior) = separable_model();
        let options = EvalOptions {
            mode: EvalMode::Alignment,
            gamma: 0.1,
            candidates: None,
        };
        assert!(evaluate(&[], &params, &prior, &options).is_err());
    }

    #[test]
    fn evaluate_names_the_failing_sequence() {
        let (params, prior) = separable_model();
        let features = FeatureSequence::from_rows(&[&[1.0], &[1.0]]).unwrap();
        let transcript = t(&[0]);
        let bad_gt = [0, 0, 0];
        let records = [EvalRecord {
            id: "broken",
            features: &features,
            transcript: &transcript,
            gt_labels: &bad_gt,
            constraint: None,
        }];
        let options = EvalOptions {
            mode: EvalMode::Alignment,
            gamma: 0.1,
            candidates: None,
        };
        match evaluate(&records, &params, &prior, &options) {
            Err(Error::Sequence { id, .. }) => assert_eq!(id, "broken"),
            other => panic!("expected a sequence-tagged error, got {other:?}"),
        }
    }

    #[test]
    fn delta_level_alignment_example() {
        let delta =
            DistanceMatrix::from_vec(2, 3, vec![1.0, 3.0, 4.0, 2.0, 1.0, 1.0]).unwrap();
        let (cost, path) = hard_align(&delta, None).unwrap();
        let s = Segmentation::from_path(&path, t(&[4, 7]), cost);
        assert_eq!(s.frame_labels(), &[4, 7, 7]);
        assert_eq!(s.segments(), &[seg(4, 0, 1), seg(7, 1, 3)]);
        assert_eq!(s.alignment_cost(), 3.0);
    }
}
