//! Prediction files (`<id>.pred.json`) and the evaluation report
//! (`metrics.json`).
//!
//! Predictions are written in vocabulary names rather than ids so they can
//! be read without the dataset at hand; evaluation maps them back through
//! the vocabulary and scores them against stored ground truth.

use std::path::Path;

use d3tw_core::loss::Transcript;
use d3tw_core::tasks::{
    frame_accuracy, iod_scores, labels_to_segments, unit_accuracy, Segmentation,
};
use serde::{Deserialize, Serialize};

use crate::data::{ids_to_names, names_to_ids, to_json_pretty, SequenceRecord, Vocabulary};
use crate::error::{read_to_string, write_file, Error, Result};

/// The inference configuration echoed into every prediction file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionEcho {
    /// "align" or "segment".
    pub mode: String,
    pub gamma: f64,
    /// Whether sparse annotations constrained the decode (align mode).
    pub sparse: bool,
    pub subsample: usize,
    pub checkpoint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// One action name per frame.
    pub frame_labels: Vec<String>,
    /// Maximal runs as `[action, start, end)` triples.
    pub segments: Vec<(String, usize, usize)>,
    /// The transcript the decode followed: the record's own in align mode,
    /// the winning candidate in segment mode.
    pub transcript: Vec<String>,
    /// Cost of the decoded path under the emission distances.
    pub cost: f64,
    /// Smoothed cost that ranked the winning candidate (segment mode).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub candidate_cost: Option<f64>,
    pub config: PredictionEcho,
}

impl Prediction {
    pub fn from_segmentation(
        seg: &Segmentation,
        vocab: &Vocabulary,
        candidate_cost: Option<f64>,
        config: PredictionEcho,
    ) -> Result<Prediction> {
        let segments = seg
            .segments()
            .iter()
            .map(|s| {
                Ok((
                    vocab.name(s.action)?.to_string(),
                    s.interval.start(),
                    s.interval.end(),
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Prediction {
            frame_labels: ids_to_names(seg.frame_labels(), vocab)?,
            segments,
            transcript: ids_to_names(seg.source_transcript().actions(), vocab)?,
            cost: seg.alignment_cost(),
            candidate_cost,
            config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &to_json_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Prediction> {
        let text = read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::validation(format!("{}: {e}", path.display())))
    }

    pub fn frame_label_ids(&self, vocab: &Vocabulary, context: &str) -> Result<Vec<usize>> {
        names_to_ids(&self.frame_labels, vocab, context)
    }

    pub fn transcript_ids(&self, vocab: &Vocabulary, context: &str) -> Result<Transcript> {
        let ids = names_to_ids(&self.transcript, vocab, context)?;
        Transcript::new(ids).map_err(|e| Error::validation(format!("{context}: {e}")))
    }
}

/// Per-sequence scores of one prediction against one record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceScore {
    pub id: String,
    pub frames: usize,
    pub frame_accuracy: f64,
    pub unit_accuracy: f64,
    pub mean_iod: f64,
    #[serde(skip)]
    pub frame_matches: usize,
    #[serde(skip)]
    pub gt_intervals: usize,
    #[serde(skip)]
    pub iod_sum: f64,
}

/// Scores one prediction. The record must carry ground-truth labels; the
/// prediction must be internally consistent and cover every frame.
pub fn score_prediction(
    record: &SequenceRecord,
    prediction: &Prediction,
    vocab: &Vocabulary,
) -> Result<SequenceScore> {
    let context = format!("prediction for {}", record.id);
    let gt = record
        .gt_labels
        .as_ref()
        .ok_or_else(|| Error::validation(format!("{context}: record has no ground-truth labels")))?;
    let pred = prediction.frame_label_ids(vocab, &context)?;
    if pred.len() != gt.len() {
        return Err(Error::validation(format!(
            "{context}: {} predicted frames for {} ground-truth frames",
            pred.len(),
            gt.len()
        )));
    }
    let pred_segments = labels_to_segments(&pred);
    // The stored segment view must agree with the stored frame labels.
    let stored: Result<Vec<(usize, usize, usize)>> = prediction
        .segments
        .iter()
        .map(|(name, start, end)| Ok((vocab.require_id(name, &context)?, *start, *end)))
        .collect();
    let derived: Vec<(usize, usize, usize)> = pred_segments
        .iter()
        .map(|s| (s.action, s.interval.start(), s.interval.end()))
        .collect();
    if stored? != derived {
        return Err(Error::validation(format!(
            "{context}: segments disagree with frame labels"
        )));
    }

    let gt_segments = labels_to_segments(gt);
    let iods = iod_scores(&pred_segments, &gt_segments)
        .map_err(|e| Error::validation(format!("{context}: {e}")))?;
    let frame_acc = frame_accuracy(&pred, gt)
        .map_err(|e| Error::validation(format!("{context}: {e}")))?;
    let unit_acc = unit_accuracy(&pred, gt)
        .map_err(|e| Error::validation(format!("{context}: {e}")))?;
    let matches = pred.iter().zip(gt).filter(|(p, g)| p == g).count();
    let iod_sum: f64 = iods.iter().sum();
    Ok(SequenceScore {
        id: record.id.clone(),
        frames: gt.len(),
        frame_accuracy: frame_acc,
        unit_accuracy: unit_acc,
        mean_iod: iod_sum / iods.len() as f64,
        frame_matches: matches,
        gt_intervals: iods.len(),
        iod_sum,
    })
}

/// The evaluation configuration echoed into `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEcho {
    pub data: String,
    pub predictions: String,
    pub split: String,
    pub subsample: usize,
}

/// Aggregate report: frame accuracy is frame-weighted, unit accuracy is
/// sequence-averaged, IoD is averaged over ground-truth intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub frame_accuracy: f64,
    pub unit_accuracy: f64,
    pub mean_iod: f64,
    pub per_sequence: Vec<SequenceScore>,
    /// Records that could not be scored, with the reason.
    pub errors: Vec<String>,
    pub config: EvalEcho,
}

pub fn aggregate_scores(
    scores: Vec<SequenceScore>,
    errors: Vec<String>,
    config: EvalEcho,
) -> Result<MetricsFile> {
    if scores.is_empty() {
        return Err(Error::runtime("no predictions could be scored"));
    }
    let total_frames: usize = scores.iter().map(|s| s.frames).sum();
    let total_matches: usize = scores.iter().map(|s| s.frame_matches).sum();
    let unit_sum: f64 = scores.iter().map(|s| s.unit_accuracy).sum();
    let iod_sum: f64 = scores.iter().map(|s| s.iod_sum).sum();
    let intervals: usize = scores.iter().map(|s| s.gt_intervals).sum();
    Ok(MetricsFile {
        frame_accuracy: total_matches as f64 / total_frames as f64,
        unit_accuracy: unit_sum / scores.len() as f64,
        mean_iod: iod_sum / intervals as f64,
        per_sequence: scores,
        errors,
        config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::feature_rows;

    fn vocab() -> Vocabulary {
        Vocabulary::new(vec!["a0".into(), "a1".into(), "a2".into()]).unwrap()
    }

    fn record(gt: Vec<usize>) -> SequenceRecord {
        let rows: Vec<Vec<f64>> = gt.iter().map(|&a| vec![a as f64]).collect();
        let transcript = Transcript::new(d3tw_core::tasks::collapse_labels(&gt)).unwrap();
        SequenceRecord {
            id: "r0".into(),
            features: feature_rows(&rows).unwrap(),
            transcript,
            gt_labels: Some(gt),
            sparse: None,
        }
    }

    fn prediction_for(labels: &[usize]) -> Prediction {
        let v = vocab();
        let segs = labels_to_segments(labels);
        Prediction {
            frame_labels: ids_to_names(labels, &v).unwrap(),
            segments: segs
                .iter()
                .map(|s| {
                    (
                        v.name(s.action).unwrap().to_string(),
                        s.interval.start(),
                        s.interval.end(),
                    )
                })
                .collect(),
            transcript: ids_to_names(&d3tw_core::tasks::collapse_labels(labels), &v).unwrap(),
            cost: 1.5,
            candidate_cost: None,
            config: PredictionEcho {
                mode: "align".into(),
                gamma: 0.1,
                sparse: false,
                subsample: 1,
                checkpoint: "model.json".into(),
            },
        }
    }

    #[test]
    fn roundtrip_preserves_prediction() {
        let pred = prediction_for(&[0, 0, 1, 1, 2]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r0.pred.json");
        pred.save(&path).unwrap();
        let loaded = Prediction::load(&path).unwrap();
        assert_eq!(pred, loaded);
    }

    #[test]
    fn segments_serialize_as_triples() {
        let pred = prediction_for(&[0, 0, 1]);
        let json = to_json_pretty(&pred).unwrap();
        let value: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(value["segments"][0][0], "a0");
        assert_eq!(value["segments"][0][1], 0);
        assert_eq!(value["segments"][0][2], 2);
        // An absent candidate cost is omitted, not serialized as null.
        assert!(value.get("candidate_cost").is_none());
    }

    #[test]
    fn perfect_prediction_scores_ones() {
        let gt = vec![0, 0, 1, 1, 2, 2];
        let score = score_prediction(&record(gt.clone()), &prediction_for(&gt), &vocab()).unwrap();
        assert_eq!(score.frame_accuracy, 1.0);
        assert_eq!(score.unit_accuracy, 1.0);
        assert_eq!(score.mean_iod, 1.0);
        assert_eq!(score.frames, 6);
        assert_eq!(score.gt_intervals, 3);
    }

    #[test]
    fn shifted_boundary_scores_partial_credit() {
        let gt = vec![0, 0, 0, 1, 1, 1];
        let pred = [0, 0, 1, 1, 1, 1];
        let score = score_prediction(&record(gt), &prediction_for(&pred), &vocab()).unwrap();
        assert_eq!(score.frame_accuracy, 5.0 / 6.0);
        assert_eq!(score.unit_accuracy, 1.0);
        // IoD divides overlap by the detected segment: the action 0
        // detection [0,2) sits inside its gt interval (1.0), the action 1
        // detection [2,6) overlaps its interval on 3 of 4 frames.
        assert_eq!(score.mean_iod, (1.0 + 3.0 / 4.0) / 2.0);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let gt = vec![0, 0, 1];
        let err = score_prediction(&record(gt), &prediction_for(&[0, 1]), &vocab())
            .unwrap_err()
            .to_string();
        assert!(err.contains("2 predicted frames for 3"), "{err}");
    }

    #[test]
    fn inconsistent_segment_view_is_rejected() {
        let gt = vec![0, 0, 1];
        let mut pred = prediction_for(&[0, 0, 1]);
        pred.segments[0].2 = 1;
        let err = score_prediction(&record(gt), &pred, &vocab())
            .unwrap_err()
            .to_string();
        assert!(err.contains("segments disagree"), "{err}");
    }

    #[test]
    fn aggregation_weights_frames_sequences_and_intervals() {
        let v = vocab();
        let r1 = record(vec![0, 0, 1, 1]);
        let r2 = record(vec![2, 2, 2, 2, 2, 2]);
        let s1 = score_prediction(&r1, &prediction_for(&[0, 1, 1, 1]), &v).unwrap();
        let s2 = score_prediction(&r2, &prediction_for(&[2, 2, 2, 2, 2, 2]), &v).unwrap();
        let config = EvalEcho {
            data: "d".into(),
            predictions: "p".into(),
            split: "test".into(),
            subsample: 1,
        };
        let report = aggregate_scores(vec![s1, s2], vec![], config).unwrap();
        // 3 of 4 plus 6 of 6 matches over 10 frames.
        assert_eq!(report.frame_accuracy, 0.9);
        assert_eq!(report.unit_accuracy, 1.0);
        // Detections: action 0 [0,1) inside its interval, action 1 [1,4)
        // overlaps its interval on 2 of 3 frames, action 2 is exact.
        assert_eq!(report.mean_iod, (1.0 + 2.0 / 3.0 + 1.0) / 3.0);
    }

    #[test]
    fn empty_score_set_is_a_runtime_error() {
        let config = EvalEcho {
            data: "d".into(),
            predictions: "p".into(),
            split: "test".into(),
            subsample: 1,
        };
        let err = aggregate_scores(vec![], vec!["r0: missing".into()], config).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
