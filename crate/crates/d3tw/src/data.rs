//! Dataset model and on-disk formats.
//!
//! A dataset directory looks like:
//!
//! ```text
//! root/
//!   dataset.json              manifest: vocabulary file, splits, feature dim
//!   vocab.txt                 one action name per line, line number = id
//!   train/
//!     train_000.features.csv  T lines of dim comma-separated floats
//!     train_000.transcript.txt  one line of space-separated action names
//!     train_000.labels.txt    optional: T lines, one action name per frame
//!     train_000.sparse.txt    optional: frame_index<TAB>action_name lines
//!   test/
//!     ...
//! ```
//!
//! All parsers report the offending file and line; all writers emit
//! deterministic bytes so repeated runs with the same seed are
//! byte-identical.

use std::collections::BTreeMap;
use std::path::Path;

use d3tw_core::loss::Transcript;
use d3tw_core::model::FeatureSequence;
use d3tw_core::tasks::{collapse_labels, CandidateSet};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{create_dir_all, read_to_string, write_file, Error, Result};

/// Ordered action alphabet; the id of a name is its line number in
/// `vocab.txt`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    names: Vec<String>,
}

impl Vocabulary {
    /// Names must be nonempty, free of whitespace, and pairwise distinct.
    pub fn new(names: Vec<String>) -> Result<Vocabulary> {
        if names.is_empty() {
            return Err(Error::validation("vocabulary must not be empty"));
        }
        for (i, name) in names.iter().enumerate() {
            if name.is_empty() {
                return Err(Error::validation(format!("vocabulary entry {i} is empty")));
            }
            if name.chars().any(char::is_whitespace) {
                return Err(Error::validation(format!(
                    "vocabulary entry {i} ({name:?}) contains whitespace"
                )));
            }
            if names[..i].contains(name) {
                return Err(Error::validation(format!(
                    "vocabulary entry {i} ({name:?}) is a duplicate"
                )));
            }
        }
        Ok(Vocabulary { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: usize) -> Result<&str> {
        self.names
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| {
                Error::validation(format!(
                    "action id {id} out of range for vocabulary of {}",
                    self.names.len()
                ))
            })
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Looks a name up, reporting `context` (typically `file:line`) when the
    /// name is unknown.
    pub fn require_id(&self, name: &str, context: &str) -> Result<usize> {
        self.id(name).ok_or_else(|| {
            Error::validation(format!("{context}: unknown action {name:?}"))
        })
    }
}

/// One sequence: features, its transcript, and optional supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRecord {
    pub id: String,
    pub features: FeatureSequence,
    pub transcript: Transcript,
    /// Per-frame ground-truth labels; present only for evaluation data.
    pub gt_labels: Option<Vec<usize>>,
    /// Sparse frame annotations: frame index to action id.
    pub sparse: Option<BTreeMap<usize, usize>>,
}

impl SequenceRecord {
    /// Internal consistency: label collapse must reproduce the transcript,
    /// sparse annotations must agree with dense ones, all ids in range.
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        let fail = |msg: String| Err(Error::validation(format!("record {}: {msg}", self.id)));
        if self.transcript.validate_for(vocab_size).is_err() {
            return fail(format!(
                "transcript contains action ids outside 0..{vocab_size}"
            ));
        }
        if let Some(gt) = &self.gt_labels {
            if gt.len() != self.features.frames() {
                return fail(format!(
                    "{} labels for {} frames",
                    gt.len(),
                    self.features.frames()
                ));
            }
            if gt.iter().any(|&a| a >= vocab_size) {
                return fail(format!("labels contain action ids outside 0..{vocab_size}"));
            }
            if collapse_labels(gt) != self.transcript.actions() {
                return fail("labels do not collapse to the transcript".to_string());
            }
        }
        if let Some(sparse) = &self.sparse {
            for (&frame, &action) in sparse {
                if frame >= self.features.frames() {
                    return fail(format!(
                        "sparse annotation at frame {frame} beyond {} frames",
                        self.features.frames()
                    ));
                }
                if action >= vocab_size {
                    return fail(format!(
                        "sparse annotation at frame {frame} has action id {action} outside 0..{vocab_size}"
                    ));
                }
                if let Some(gt) = &self.gt_labels {
                    if gt[frame] != action {
                        return fail(format!(
                            "sparse annotation at frame {frame} disagrees with dense label"
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Parameters of the synthetic generator.
///
/// Class means are drawn from an isotropic Gaussian with scale
/// `sigma_between`; frames scatter around their class mean with scale
/// `sigma_within`. Transcripts have uniform length in
/// `[len_min, len_max]`, uniform actions with no immediate repeats, and
/// per-entry segment lengths uniform in `[seg_min, seg_max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    pub dim: usize,
    pub sigma_between: f64,
    pub sigma_within: f64,
    pub len_min: usize,
    pub len_max: usize,
    pub seg_min: usize,
    pub seg_max: usize,
    pub train_count: usize,
    pub test_count: usize,
    /// Fraction of frames given a sparse annotation, sampled uniformly
    /// without replacement. Zero writes no sparse files.
    pub sparse_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> SynthConfig {
        SynthConfig {
            classes: 5,
            dim: 3,
            sigma_between: 4.0,
            sigma_within: 0.5,
            len_min: 3,
            len_max: 6,
            seg_min: 10,
            seg_max: 14,
            train_count: 200,
            test_count: 50,
            sparse_fraction: 0.0,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::validation(format!("generator config: {msg}")));
        if self.classes < 2 {
            return fail("at least two classes are required");
        }
        if self.dim == 0 {
            return fail("feature dimension must be positive");
        }
        if !(self.sigma_between > 0.0) || !self.sigma_between.is_finite() {
            return fail("sigma_between must be positive and finite");
        }
        if !(self.sigma_within >= 0.0) || !self.sigma_within.is_finite() {
            return fail("sigma_within must be nonnegative and finite");
        }
        if self.len_min == 0 || self.len_min > self.len_max {
            return fail("transcript length bounds must satisfy 1 <= len_min <= len_max");
        }
        if self.seg_min == 0 || self.seg_min > self.seg_max {
            return fail("segment length bounds must satisfy 1 <= seg_min <= seg_max");
        }
        if self.train_count == 0 {
            return fail("at least one training sequence is required");
        }
        if !(0.0..=1.0).contains(&self.sparse_fraction) {
            return fail("sparse_fraction must lie in [0, 1]");
        }
        Ok(())
    }
}

/// In-memory dataset: vocabulary, both splits, and the generator config
/// when the data is synthetic.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vocabulary: Vocabulary,
    pub train: Vec<SequenceRecord>,
    pub test: Vec<SequenceRecord>,
    pub generation: Option<SynthConfig>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        let vocab_size = self.vocabulary.len();
        let mut dim = None;
        for record in self.train.iter().chain(&self.test) {
            record.validate(vocab_size)?;
            match dim {
                None => dim = Some(record.features.dim()),
                Some(d) if d != record.features.dim() => {
                    return Err(Error::validation(format!(
                        "record {}: feature dim {} differs from {d}",
                        record.id,
                        record.features.dim()
                    )));
                }
                Some(_) => {}
            }
        }
        let mut seen = BTreeMap::new();
        for record in self.train.iter().chain(&self.test) {
            if seen.insert(&record.id, ()).is_some() {
                return Err(Error::validation(format!(
                    "record id {} appears in more than one split",
                    record.id
                )));
            }
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> Result<usize> {
        self.train
            .iter()
            .chain(&self.test)
            .map(|r| r.features.dim())
            .next()
            .ok_or_else(|| Error::validation("dataset has no records"))
    }

    pub fn split(&self, name: &str) -> Result<&[SequenceRecord]> {
        match name {
            "train" => Ok(&self.train),
            "test" => Ok(&self.test),
            other => Err(Error::validation(format!(
                "unknown split {other:?}; expected train or test"
            ))),
        }
    }

    /// Distinct training transcripts, the candidate universe for
    /// transcript-free segmentation.
    pub fn candidates(&self) -> Result<CandidateSet> {
        let transcripts: Vec<Transcript> =
            self.train.iter().map(|r| r.transcript.clone()).collect();
        CandidateSet::new(transcripts)
            .map_err(|e| Error::validation(format!("candidate set: {e}")))
    }

    /// All training transcripts, with duplicates, for negative sampling.
    pub fn transcript_pool(&self) -> Vec<Transcript> {
        self.train.iter().map(|r| r.transcript.clone()).collect()
    }

    /// Keeps every `every`-th frame of each sequence, resampling labels and
    /// sparse annotations identically. Fails when a segment of some record
    /// vanishes entirely, since its labels would no longer collapse to its
    /// transcript.
    pub fn subsample(&self, every: usize) -> Result<Dataset> {
        if every == 0 {
            return Err(Error::validation("subsample factor must be positive"));
        }
        if every == 1 {
            return Ok(self.clone());
        }
        let thin = |records: &[SequenceRecord]| -> Result<Vec<SequenceRecord>> {
            records
                .iter()
                .map(|record| {
                    let frames = record.features.frames();
                    let kept: Vec<usize> = (0..frames).step_by(every).collect();
                    let mut rows = Vec::with_capacity(kept.len());
                    for &j in &kept {
                        rows.push(record.features.as_mat().row(j).to_vec());
                    }
                    let features = feature_rows(&rows)
                        .map_err(|e| Error::validation(format!("record {}: {e}", record.id)))?;
                    let gt_labels = record
                        .gt_labels
                        .as_ref()
                        .map(|gt| kept.iter().map(|&j| gt[j]).collect());
                    let sparse = record.sparse.as_ref().map(|sparse| {
                        sparse
                            .iter()
                            .filter(|(&frame, _)| frame % every == 0)
                            .map(|(&frame, &action)| (frame / every, action))
                            .collect()
                    });
                    let thinned = SequenceRecord {
                        id: record.id.clone(),
                        features,
                        transcript: record.transcript.clone(),
                        gt_labels,
                        sparse,
                    };
                    thinned.validate(self.vocabulary.len()).map_err(|e| {
                        Error::validation(format!("subsampling by {every}: {e}"))
                    })?;
                    Ok(thinned)
                })
                .collect()
        };
        Ok(Dataset {
            vocabulary: self.vocabulary.clone(),
            train: thin(&self.train)?,
            test: thin(&self.test)?,
            generation: self.generation.clone(),
        })
    }
}

/// Builds a feature sequence from owned rows.
pub fn feature_rows(rows: &[Vec<f64>]) -> Result<FeatureSequence> {
    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    FeatureSequence::from_rows(&refs).map_err(|e| Error::validation(e.to_string()))
}

/// One standard normal draw via Box-Muller; consumes two uniforms so the
/// stream is independent of how callers interleave draws.
fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Generates a dataset of Gaussian-blob sequences per `config`. The whole
/// draw is a pure function of the seed.
pub fn generate_synthetic(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut means = Vec::with_capacity(config.classes);
    for _ in 0..config.classes {
        let mean: Vec<f64> = (0..config.dim)
            .map(|_| config.sigma_between * standard_normal(&mut rng))
            .collect();
        means.push(mean);
    }
    let vocabulary = Vocabulary::new((0..config.classes).map(|k| format!("a{k}")).collect())?;

    let mut generate_split = |name: &str, count: usize| -> Result<Vec<SequenceRecord>> {
        let mut records = Vec::with_capacity(count);
        for index in 0..count {
            let length = rng.gen_range(config.len_min..=config.len_max);
            let mut actions = Vec::with_capacity(length);
            for i in 0..length {
                let action = if i == 0 {
                    rng.gen_range(0..config.classes)
                } else {
                    // Uniform over the other classes: skip the predecessor.
                    let draw = rng.gen_range(0..config.classes - 1);
                    if draw >= actions[i - 1] {
                        draw + 1
                    } else {
                        draw
                    }
                };
                actions.push(action);
            }
            let mut rows = Vec::new();
            let mut gt = Vec::new();
            for &action in &actions {
                let segment_len = rng.gen_range(config.seg_min..=config.seg_max);
                for _ in 0..segment_len {
                    let row: Vec<f64> = (0..config.dim)
                        .map(|d| {
                            means[action][d] + config.sigma_within * standard_normal(&mut rng)
                        })
                        .collect();
                    rows.push(row);
                    gt.push(action);
                }
            }
            let frames = rows.len();
            let sparse = if config.sparse_fraction > 0.0 {
                let wanted =
                    ((config.sparse_fraction * frames as f64).round() as usize).min(frames);
                let mut order: Vec<usize> = (0..frames).collect();
                // Fisher-Yates, driven by the same stream.
                for i in (1..order.len()).rev() {
                    let j = (rng.next_u64() % (i as u64 + 1)) as usize;
                    order.swap(i, j);
                }
                Some(
                    order[..wanted]
                        .iter()
                        .map(|&frame| (frame, gt[frame]))
                        .collect::<BTreeMap<usize, usize>>(),
                )
            } else {
                None
            };
            let features = feature_rows(&rows)
                .map_err(|e| Error::runtime(format!("generator produced bad features: {e}")))?;
            let transcript = Transcript::new(actions)
                .map_err(|e| Error::runtime(format!("generator produced bad transcript: {e}")))?;
            records.push(SequenceRecord {
                id: format!("{name}_{index:03}"),
                features,
                transcript,
                gt_labels: Some(gt),
                sparse,
            });
        }
        Ok(records)
    };

    let train = generate_split("train", config.train_count)?;
    let test = generate_split("test", config.test_count)?;
    let dataset = Dataset {
        vocabulary,
        train,
        test,
        generation: Some(config.clone()),
    };
    dataset.validate()?;
    Ok(dataset)
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    vocab_file: String,
    feature_dim: usize,
    splits: BTreeMap<String, Vec<String>>,
    generation: Option<SynthConfig>,
}

/// Serializes a value as pretty JSON with a trailing newline.
pub fn to_json_pretty<T: Serialize>(value: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::runtime(format!("serializing JSON: {e}")))?;
    text.push('\n');
    Ok(text)
}

/// Writes the dataset directory layout described in the module docs.
pub fn save_dataset(dataset: &Dataset, root: &Path) -> Result<()> {
    dataset.validate()?;
    create_dir_all(root)?;
    let vocab_lines: String = dataset
        .vocabulary
        .names()
        .iter()
        .map(|n| format!("{n}\n"))
        .collect();
    write_file(&root.join("vocab.txt"), &vocab_lines)?;

    let mut splits = BTreeMap::new();
    for (name, records) in [("train", &dataset.train), ("test", &dataset.test)] {
        let dir = root.join(name);
        create_dir_all(&dir)?;
        let mut ids = Vec::with_capacity(records.len());
        for record in records.iter() {
            ids.push(record.id.clone());
            let mut csv = String::new();
            for j in 0..record.features.frames() {
                let row = record.features.as_mat().row(j);
                let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
                csv.push_str(&line.join(","));
                csv.push('\n');
            }
            write_file(&dir.join(format!("{}.features.csv", record.id)), &csv)?;

            let names: Result<Vec<&str>> = record
                .transcript
                .actions()
                .iter()
                .map(|&a| dataset.vocabulary.name(a))
                .collect();
            let mut line = names?.join(" ");
            line.push('\n');
            write_file(&dir.join(format!("{}.transcript.txt", record.id)), &line)?;

            if let Some(gt) = &record.gt_labels {
                let mut text = String::new();
                for &a in gt {
                    text.push_str(dataset.vocabulary.name(a)?);
                    text.push('\n');
                }
                write_file(&dir.join(format!("{}.labels.txt", record.id)), &text)?;
            }
            if let Some(sparse) = &record.sparse {
                let mut text = String::new();
                for (&frame, &action) in sparse {
                    text.push_str(&format!("{frame}\t{}\n", dataset.vocabulary.name(action)?));
                }
                write_file(&dir.join(format!("{}.sparse.txt", record.id)), &text)?;
            }
        }
        splits.insert(name.to_string(), ids);
    }

    let manifest = Manifest {
        vocab_file: "vocab.txt".to_string(),
        feature_dim: dataset.feature_dim()?,
        splits,
        generation: dataset.generation.clone(),
    };
    write_file(&root.join("dataset.json"), &to_json_pretty(&manifest)?)
}

fn parse_features(path: &Path, expected_dim: usize) -> Result<FeatureSequence> {
    let text = read_to_string(path)?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let mut row = Vec::with_capacity(expected_dim);
        for (col, token) in line.split(',').enumerate() {
            let value: f64 = token.trim().parse().map_err(|_| {
                Error::validation(format!(
                    "{}:{lineno}: column {}: invalid float {token:?}",
                    path.display(),
                    col + 1
                ))
            })?;
            row.push(value);
        }
        if row.len() != expected_dim {
            return Err(Error::validation(format!(
                "{}:{lineno}: {} values, expected {expected_dim}",
                path.display(),
                row.len()
            )));
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::validation(format!(
            "{}: no feature rows",
            path.display()
        )));
    }
    feature_rows(&rows).map_err(|e| Error::validation(format!("{}: {e}", path.display())))
}

fn parse_transcript(path: &Path, vocab: &Vocabulary) -> Result<Transcript> {
    let text = read_to_string(path)?;
    let mut content_lines = text.lines().filter(|l| !l.trim().is_empty());
    let line = content_lines.next().ok_or_else(|| {
        Error::validation(format!("{}: empty transcript", path.display()))
    })?;
    if content_lines.next().is_some() {
        return Err(Error::validation(format!(
            "{}: expected a single line",
            path.display()
        )));
    }
    let context = format!("{}:1", path.display());
    let actions: Result<Vec<usize>> = line
        .split_whitespace()
        .map(|name| vocab.require_id(name, &context))
        .collect();
    Transcript::new(actions?).map_err(|e| Error::validation(format!("{}: {e}", path.display())))
}

fn parse_labels(path: &Path, vocab: &Vocabulary, frames: usize) -> Result<Vec<usize>> {
    let text = read_to_string(path)?;
    let mut labels = Vec::with_capacity(frames);
    for (lineno, line) in text.lines().enumerate() {
        let context = format!("{}:{}", path.display(), lineno + 1);
        let name = line.trim();
        if name.is_empty() {
            return Err(Error::validation(format!("{context}: empty label line")));
        }
        labels.push(vocab.require_id(name, &context)?);
    }
    if labels.len() != frames {
        return Err(Error::validation(format!(
            "{}: {} labels for {frames} frames",
            path.display(),
            labels.len()
        )));
    }
    Ok(labels)
}

fn parse_sparse(path: &Path, vocab: &Vocabulary) -> Result<BTreeMap<usize, usize>> {
    let text = read_to_string(path)?;
    let mut sparse = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let context = format!("{}:{}", path.display(), lineno + 1);
        if line.trim().is_empty() {
            continue;
        }
        let (frame_str, name) = line.split_once('\t').ok_or_else(|| {
            Error::validation(format!("{context}: expected frame<TAB>action"))
        })?;
        let frame: usize = frame_str.trim().parse().map_err(|_| {
            Error::validation(format!("{context}: invalid frame index {frame_str:?}"))
        })?;
        let action = vocab.require_id(name.trim(), &context)?;
        if sparse.insert(frame, action).is_some() {
            return Err(Error::validation(format!(
                "{context}: duplicate annotation for frame {frame}"
            )));
        }
    }
    Ok(sparse)
}

/// Loads a dataset directory written by [`save_dataset`] (or assembled by
/// hand in the same layout).
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest_path = root.join("dataset.json");
    let manifest_text = read_to_string(&manifest_path)?;
    let manifest: Manifest = serde_json::from_str(&manifest_text)
        .map_err(|e| Error::validation(format!("{}: {e}", manifest_path.display())))?;

    let vocab_path = root.join(&manifest.vocab_file);
    let vocab_text = read_to_string(&vocab_path)?;
    let names: Vec<String> = vocab_text
        .lines()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect();
    let vocabulary =
        Vocabulary::new(names).map_err(|e| Error::validation(format!("{}: {e}", vocab_path.display())))?;

    let mut dataset = Dataset {
        vocabulary,
        train: Vec::new(),
        test: Vec::new(),
        generation: manifest.generation,
    };
    for (split, ids) in &manifest.splits {
        if split != "train" && split != "test" {
            return Err(Error::validation(format!(
                "{}: unknown split {split:?}",
                manifest_path.display()
            )));
        }
        let dir = root.join(split);
        let mut records = Vec::with_capacity(ids.len());
        for id in ids {
            let features =
                parse_features(&dir.join(format!("{id}.features.csv")), manifest.feature_dim)?;
            let transcript =
                parse_transcript(&dir.join(format!("{id}.transcript.txt")), &dataset.vocabulary)?;
            let labels_path = dir.join(format!("{id}.labels.txt"));
            let gt_labels = if labels_path.exists() {
                Some(parse_labels(&labels_path, &dataset.vocabulary, features.frames())?)
            } else {
                None
            };
            let sparse_path = dir.join(format!("{id}.sparse.txt"));
            let sparse = if sparse_path.exists() {
                Some(parse_sparse(&sparse_path, &dataset.vocabulary)?)
            } else {
                None
            };
            records.push(SequenceRecord {
                id: id.clone(),
                features,
                transcript,
                gt_labels,
                sparse,
            });
        }
        match split.as_str() {
            "train" => dataset.train = records,
            _ => dataset.test = records,
        }
    }
    dataset.validate()?;
    Ok(dataset)
}

/// Renders ids as names, for prediction files and reports.
pub fn ids_to_names(ids: &[usize], vocab: &Vocabulary) -> Result<Vec<String>> {
    ids.iter().map(|&a| vocab.name(a).map(str::to_string)).collect()
}

/// Parses names back to ids, reporting `context` on unknown names.
pub fn names_to_ids(names: &[String], vocab: &Vocabulary, context: &str) -> Result<Vec<usize>> {
    names.iter().map(|n| vocab.require_id(n, context)).collect()
}
