//! Command line interface: `gen`, `train`, `align`, `segment`, `eval`.
//!
//! Every command is deterministic given its flags: randomness flows only
//! through explicit seeds, and every artifact embeds the resolved
//! configuration that produced it. Exit codes: 0 on success, 1 on
//! validation errors (bad flags, malformed inputs), 2 on runtime failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use d3tw_core::loss::{HingeVariant, LossConfig, SamplingStrategy, Transcript};
use d3tw_core::model::{
    forward, train_step, ClassPrior, FeatureSequence, LossKind, ModelParams, TrainConfig,
};
use d3tw_core::tasks::{align, constraints_from_annotations, frame_accuracy, segment};
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{check_compatible, Checkpoint, TrainEcho};
use crate::data::{generate_synthetic, load_dataset, save_dataset, Dataset, SynthConfig};
use crate::error::{create_dir_all, Error, Result};
use crate::predict::{
    aggregate_scores, score_prediction, EvalEcho, Prediction, PredictionEcho, SequenceScore,
};

#[derive(Parser)]
#[command(
    name = "d3tw",
    version,
    about = "Weakly supervised action alignment and segmentation"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of Gaussian-blob action sequences
    Gen(GenArgs),
    /// Train the frame classifier from transcripts alone
    Train(TrainArgs),
    /// Align each sequence to its own transcript
    Align(AlignArgs),
    /// Choose the best candidate transcript per sequence and decode it
    Segment(SegmentArgs),
    /// Score stored predictions against ground-truth labels
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Output dataset directory
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Number of action classes (at least 2)
    #[arg(long, default_value_t = 5)]
    classes: usize,
    /// Feature dimension
    #[arg(long, default_value_t = 3)]
    dim: usize,
    /// Scale of the class-mean Gaussian
    #[arg(long, default_value_t = 4.0)]
    sigma_between: f64,
    /// Scatter of frames around their class mean
    #[arg(long, default_value_t = 0.5)]
    sigma_within: f64,
    /// Training sequences
    #[arg(long, default_value_t = 200)]
    train: usize,
    /// Test sequences
    #[arg(long, default_value_t = 50)]
    test: usize,
    /// Shortest transcript
    #[arg(long, default_value_t = 3)]
    len_min: usize,
    /// Longest transcript
    #[arg(long, default_value_t = 6)]
    len_max: usize,
    /// Shortest segment, in frames
    #[arg(long, default_value_t = 10)]
    seg_min: usize,
    /// Longest segment, in frames
    #[arg(long, default_value_t = 14)]
    seg_max: usize,
    /// Fraction of frames to annotate in sparse files
    #[arg(long, default_value_t = 0.0)]
    sparse_frac: f64,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum HingeArg {
    /// max(difference, beta)
    Paper,
    /// max(difference + beta, 0)
    Margin,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum NegStrategyArg {
    /// Other transcripts observed in training
    Pool,
    /// Shuffles of the positive transcript
    Shuffle,
    /// Uniform random action sequences
    Walk,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LossArg {
    /// Discriminative hinge over positive and negative transcripts
    D3tw,
    /// Smoothed positive alignment cost alone
    Generative,
}

impl HingeArg {
    fn to_core(self) -> HingeVariant {
        match self {
            HingeArg::Paper => HingeVariant::PaperLiteral,
            HingeArg::Margin => HingeVariant::StandardMargin,
        }
    }
    fn echo(self) -> &'static str {
        match self {
            HingeArg::Paper => "paper",
            HingeArg::Margin => "margin",
        }
    }
}

impl NegStrategyArg {
    fn to_core(self) -> SamplingStrategy {
        match self {
            NegStrategyArg::Pool => SamplingStrategy::Pool,
            NegStrategyArg::Shuffle => SamplingStrategy::Shuffle,
            NegStrategyArg::Walk => SamplingStrategy::RandomWalk,
        }
    }
    fn echo(self) -> &'static str {
        match self {
            NegStrategyArg::Pool => "pool",
            NegStrategyArg::Shuffle => "shuffle",
            NegStrategyArg::Walk => "walk",
        }
    }
}

impl LossArg {
    fn to_core(self) -> LossKind {
        match self {
            LossArg::D3tw => LossKind::D3tw,
            LossArg::Generative => LossKind::Generative,
        }
    }
    fn echo(self) -> &'static str {
        match self {
            LossArg::D3tw => "d3tw",
            LossArg::Generative => "generative",
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint file to write
    #[arg(long, default_value = "model.json")]
    out: PathBuf,
    /// Checkpoint to resume from
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Smoothing strength of the soft alignment
    #[arg(long, default_value_t = 0.1)]
    gamma: f64,
    /// Hinge margin
    #[arg(long, default_value_t = 0.0)]
    beta: f64,
    #[arg(long, value_enum, default_value_t = HingeArg::Margin)]
    hinge: HingeArg,
    /// Negative transcripts sampled per sequence
    #[arg(long, default_value_t = 1)]
    negatives: usize,
    #[arg(long, value_enum, default_value_t = NegStrategyArg::Pool)]
    neg_strategy: NegStrategyArg,
    #[arg(long, value_enum, default_value_t = LossArg::D3tw)]
    loss: LossArg,
    /// Adam learning rate
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    /// Sequences per optimizer step
    #[arg(long, default_value_t = 8)]
    batch: usize,
    /// Keep every M-th frame
    #[arg(long, default_value_t = 1, value_name = "M")]
    subsample: usize,
}

#[derive(Args)]
struct AlignArgs {
    /// Dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to decode with
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory for prediction files
    #[arg(long, default_value = "predictions")]
    out: PathBuf,
    /// Smoothing strength, echoed into prediction metadata
    #[arg(long, default_value_t = 0.1)]
    gamma: f64,
    /// Constrain decodes with the records' sparse annotations
    #[arg(long)]
    sparse: bool,
    /// Which split to decode
    #[arg(long, default_value = "test")]
    split: String,
    /// Keep every M-th frame
    #[arg(long, default_value_t = 1, value_name = "M")]
    subsample: usize,
}

#[derive(Args)]
struct SegmentArgs {
    /// Dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to decode with
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory for prediction files
    #[arg(long, default_value = "predictions")]
    out: PathBuf,
    /// Smoothing strength used to rank candidate transcripts
    #[arg(long, default_value_t = 0.1)]
    gamma: f64,
    /// Which split to decode
    #[arg(long, default_value = "test")]
    split: String,
    /// Keep every M-th frame
    #[arg(long, default_value_t = 1, value_name = "M")]
    subsample: usize,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset directory holding the ground truth
    #[arg(long)]
    data: PathBuf,
    /// Directory of prediction files to score
    #[arg(long)]
    pred: PathBuf,
    /// Which split the predictions cover
    #[arg(long, default_value = "test")]
    split: String,
    /// Keep every M-th frame (must match the decode)
    #[arg(long, default_value_t = 1, value_name = "M")]
    subsample: usize,
}

/// Parses the process arguments and runs the selected command, mapping
/// errors to the documented exit codes.
pub fn run_from_args() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes; everything else is
            // a validation failure.
            let code = if e.use_stderr() { 1u8 } else { 0u8 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(args) => cmd_gen(&args),
        Command::Train(args) => cmd_train(&args),
        Command::Align(args) => cmd_align(&args),
        Command::Segment(args) => cmd_segment(&args),
        Command::Eval(args) => cmd_eval(&args),
    }
}

fn runtime_in(id: &str, e: d3tw_core::Error) -> Error {
    Error::runtime(format!("sequence {id}: {e}"))
}

fn cmd_gen(args: &GenArgs) -> Result<()> {
    let config = SynthConfig {
        classes: args.classes,
        dim: args.dim,
        sigma_between: args.sigma_between,
        sigma_within: args.sigma_within,
        len_min: args.len_min,
        len_max: args.len_max,
        seg_min: args.seg_min,
        seg_max: args.seg_max,
        train_count: args.train,
        test_count: args.test,
        sparse_fraction: args.sparse_frac,
        seed: args.seed,
    };
    let dataset = generate_synthetic(&config)?;
    save_dataset(&dataset, &args.out)?;
    let records: Vec<_> = dataset.train.iter().chain(&dataset.test).collect();
    let mean_frames = records
        .iter()
        .map(|r| r.features.frames() as f64)
        .sum::<f64>()
        / records.len() as f64;
    let mean_len = records
        .iter()
        .map(|r| r.transcript.len() as f64)
        .sum::<f64>()
        / records.len() as f64;
    println!(
        "wrote {} records ({} train, {} test) to {}",
        records.len(),
        dataset.train.len(),
        dataset.test.len(),
        args.out.display()
    );
    println!(
        "classes {}, feature dim {}, mean frames {mean_frames:.1}, mean transcript length {mean_len:.1}",
        config.classes, config.dim
    );
    Ok(())
}

/// Loads a dataset and a checkpoint, checking that they fit together.
fn load_model_for(
    data: &Path,
    checkpoint: &Path,
    subsample: usize,
) -> Result<(Dataset, ModelParams, ClassPrior)> {
    let dataset = load_dataset(data)?.subsample(subsample)?;
    let cp = Checkpoint::load(checkpoint)?;
    check_compatible(&cp, dataset.vocabulary.len(), dataset.feature_dim()?)?;
    let (params, prior) = cp.into_model()?;
    Ok((dataset, params, prior))
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let dataset = load_dataset(&args.data)?.subsample(args.subsample)?;
    if dataset.train.is_empty() {
        return Err(Error::validation("dataset has no training records"));
    }
    let dim = dataset.feature_dim()?;
    let vocab_size = dataset.vocabulary.len();
    if args.batch == 0 {
        return Err(Error::validation("batch size must be at least 1"));
    }

    let mut loss_config = LossConfig::new(args.gamma, args.beta)
        .map_err(|e| Error::validation(e.to_string()))?;
    loss_config.negatives_per_sample = args.negatives;
    loss_config.hinge_variant = args.hinge.to_core();
    loss_config.sampling_strategy = args.neg_strategy.to_core();
    let mut config = TrainConfig::new(loss_config, args.lr)
        .map_err(|e| Error::validation(e.to_string()))?;
    config.loss_kind = args.loss.to_core();
    config.validate().map_err(|e| Error::validation(e.to_string()))?;

    let (mut params, mut prior) = match &args.checkpoint {
        Some(path) => {
            let cp = Checkpoint::load(path)?;
            check_compatible(&cp, vocab_size, dim)?;
            cp.into_model()?
        }
        None => (
            ModelParams::init(dim, vocab_size, args.seed)
                .map_err(|e| Error::validation(e.to_string()))?,
            ClassPrior::uniform(vocab_size),
        ),
    };

    let pool = dataset.transcript_pool();
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    for epoch in 1..=args.epochs {
        let mut order: Vec<usize> = (0..dataset.train.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(args.batch) {
            let batch: Vec<(&FeatureSequence, &Transcript)> = chunk
                .iter()
                .map(|&i| (&dataset.train[i].features, &dataset.train[i].transcript))
                .collect();
            let step_seed = rng.next_u64();
            let loss = train_step(&batch, &pool, &mut params, &mut prior, &config, step_seed)
                .map_err(|e| Error::runtime(format!("epoch {epoch}: {e}")))?;
            loss_sum += loss * batch.len() as f64;
        }
        let mean_loss = loss_sum / dataset.train.len() as f64;
        match holdout_accuracy(&dataset, &params, &prior)? {
            Some(acc) => println!(
                "epoch {epoch}/{}: loss {mean_loss:.6}, holdout frame accuracy {acc:.4}",
                args.epochs
            ),
            None => println!("epoch {epoch}/{}: loss {mean_loss:.6}", args.epochs),
        }
    }

    let echo = TrainEcho {
        seed: args.seed,
        gamma: args.gamma,
        beta: args.beta,
        hinge: args.hinge.echo().to_string(),
        negatives: args.negatives,
        neg_strategy: args.neg_strategy.echo().to_string(),
        loss: args.loss.echo().to_string(),
        lr: args.lr,
        epochs: args.epochs,
        batch: args.batch,
        subsample: args.subsample,
    };
    let checkpoint = Checkpoint::from_model(&params, &prior, Some(echo));
    checkpoint.save(&args.out)?;
    println!(
        "wrote checkpoint {} (step {})",
        args.out.display(),
        checkpoint.step
    );
    Ok(())
}

/// Alignment frame accuracy on the first few labeled test records, for
/// progress logging. `None` when no labeled records exist.
fn holdout_accuracy(
    dataset: &Dataset,
    params: &ModelParams,
    prior: &ClassPrior,
) -> Result<Option<f64>> {
    const HOLDOUT: usize = 25;
    let mut matches = 0usize;
    let mut frames = 0usize;
    for record in dataset.test.iter().take(HOLDOUT) {
        let Some(gt) = &record.gt_labels else { continue };
        let posteriors =
            forward(&record.features, params).map_err(|e| runtime_in(&record.id, e))?;
        let seg = align(&posteriors, prior, &record.transcript, None)
            .map_err(|e| runtime_in(&record.id, e))?;
        let acc = frame_accuracy(seg.frame_labels(), gt)
            .map_err(|e| runtime_in(&record.id, e))?;
        matches += (acc * gt.len() as f64).round() as usize;
        frames += gt.len();
    }
    if frames == 0 {
        return Ok(None);
    }
    Ok(Some(matches as f64 / frames as f64))
}

fn cmd_align(args: &AlignArgs) -> Result<()> {
    let (dataset, params, prior) = load_model_for(&args.data, &args.checkpoint, args.subsample)?;
    let records = dataset.split(&args.split)?;
    if records.is_empty() {
        return Err(Error::validation(format!("split {:?} has no records", args.split)));
    }
    create_dir_all(&args.out)?;
    for record in records {
        let posteriors =
            forward(&record.features, &params).map_err(|e| runtime_in(&record.id, e))?;
        let constraint = match (args.sparse, &record.sparse) {
            (true, Some(sparse)) => Some(
                constraints_from_annotations(&record.transcript, sparse)
                    .map_err(|e| runtime_in(&record.id, e))?,
            ),
            _ => None,
        };
        let seg = align(&posteriors, &prior, &record.transcript, constraint.as_ref())
            .map_err(|e| runtime_in(&record.id, e))?;
        let echo = PredictionEcho {
            mode: "align".to_string(),
            gamma: args.gamma,
            sparse: args.sparse,
            subsample: args.subsample,
            checkpoint: args.checkpoint.display().to_string(),
        };
        let pred = Prediction::from_segmentation(&seg, &dataset.vocabulary, None, echo)?;
        pred.save(&args.out.join(format!("{}.pred.json", record.id)))?;
    }
    println!(
        "aligned {} {} records into {}",
        records.len(),
        args.split,
        args.out.display()
    );
    Ok(())
}

fn cmd_segment(args: &SegmentArgs) -> Result<()> {
    let (dataset, params, prior) = load_model_for(&args.data, &args.checkpoint, args.subsample)?;
    let records = dataset.split(&args.split)?;
    if records.is_empty() {
        return Err(Error::validation(format!("split {:?} has no records", args.split)));
    }
    let candidates = dataset.candidates()?;
    create_dir_all(&args.out)?;
    for record in records {
        let posteriors =
            forward(&record.features, &params).map_err(|e| runtime_in(&record.id, e))?;
        let (_, seg, costs) = segment(&posteriors, &prior, &candidates, args.gamma)
            .map_err(|e| runtime_in(&record.id, e))?;
        let winner_cost = costs
            .iter()
            .copied()
            .filter(|c| c.is_finite())
            .fold(f64::INFINITY, f64::min);
        let echo = PredictionEcho {
            mode: "segment".to_string(),
            gamma: args.gamma,
            sparse: false,
            subsample: args.subsample,
            checkpoint: args.checkpoint.display().to_string(),
        };
        let pred =
            Prediction::from_segmentation(&seg, &dataset.vocabulary, Some(winner_cost), echo)?;
        pred.save(&args.out.join(format!("{}.pred.json", record.id)))?;
    }
    println!(
        "segmented {} {} records into {} ({} candidates)",
        records.len(),
        args.split,
        args.out.display(),
        candidates.len()
    );
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let dataset = load_dataset(&args.data)?.subsample(args.subsample)?;
    let records = dataset.split(&args.split)?;
    if records.is_empty() {
        return Err(Error::validation(format!("split {:?} has no records", args.split)));
    }
    let mut scores: Vec<SequenceScore> = Vec::new();
    let mut errors: Vec<String> = Vec::new();
    for record in records {
        let path = args.pred.join(format!("{}.pred.json", record.id));
        if !path.exists() {
            errors.push(format!("{}: missing prediction {}", record.id, path.display()));
            continue;
        }
        match Prediction::load(&path)
            .and_then(|pred| score_prediction(record, &pred, &dataset.vocabulary))
        {
            Ok(score) => scores.push(score),
            Err(e) => errors.push(format!("{}: {e}", record.id)),
        }
    }
    let echo = EvalEcho {
        data: args.data.display().to_string(),
        predictions: args.pred.display().to_string(),
        split: args.split.clone(),
        subsample: args.subsample,
    };
    let error_count = errors.len();
    let report = aggregate_scores(scores, errors, echo)?;

    println!(
        "{:<14} {:>7} {:>11} {:>10} {:>10}",
        "sequence", "frames", "frame_acc", "unit_acc", "mean_iod"
    );
    for row in &report.per_sequence {
        println!(
            "{:<14} {:>7} {:>11.4} {:>10.4} {:>10.4}",
            row.id, row.frames, row.frame_accuracy, row.unit_accuracy, row.mean_iod
        );
    }
    let total_frames: usize = report.per_sequence.iter().map(|s| s.frames).sum();
    println!(
        "{:<14} {:>7} {:>11.4} {:>10.4} {:>10.4}",
        "all", total_frames, report.frame_accuracy, report.unit_accuracy, report.mean_iod
    );
    for error in &report.errors {
        println!("error: {error}");
    }
    report_to_disk(&args.pred, &report)?;
    if error_count > 0 {
        return Err(Error::runtime(format!(
            "{error_count} of {} records could not be scored",
            records.len()
        )));
    }
    Ok(())
}

fn report_to_disk(pred_dir: &Path, report: &crate::predict::MetricsFile) -> Result<()> {
    let path = pred_dir.join("metrics.json");
    crate::error::write_file(&path, &crate::data::to_json_pretty(report)?)?;
    println!("wrote {}", path.display());
    Ok(())
}
