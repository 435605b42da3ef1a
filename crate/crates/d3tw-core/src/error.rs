use alloc::boxed::Box;
use alloc::string::String;

/// Errors reported by the alignment, loss, model, and task layers.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Malformed input: NaN values, shape mismatches, bad parameters.
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// A transcript of `rows` labels cannot tile `cols` frames (needs cols >= rows).
    #[error("infeasible shape: {rows} transcript entries cannot tile {cols} frames")]
    InfeasibleShape { rows: usize, cols: usize },
    /// No alignment path survives the constraints.
    #[error("no feasible alignment path")]
    Infeasible,
    /// Every candidate value was infinite where at least one finite value is required.
    #[error("degenerate input: all values are infinite")]
    DegenerateInput,
    /// Brute-force enumeration would exceed the configured cap.
    #[error("alignment enumeration of {paths} paths exceeds cap {cap}")]
    OracleTooLarge { paths: u128, cap: u128 },
    /// The forward cache cannot produce a gradient.
    #[error("invalid cache: {0}")]
    InvalidCache(&'static str),
    /// The negative pool contains no transcript different from the positive.
    #[error("negative pool has no candidate distinct from the positive transcript")]
    EmptyPool,
    /// Every permutation of the positive transcript equals the positive itself.
    #[error("cannot shuffle a transcript whose actions are all identical")]
    DegeneratePositive,
    /// The positive transcript has no feasible (finite-cost) alignment.
    #[error("positive transcript has no finite alignment cost")]
    InvalidPositive,
    /// Could not draw a feasible negative transcript within the retry budget.
    #[error("failed to sample a feasible negative transcript in {attempts} attempts")]
    SamplingFailure { attempts: usize },
    /// A sparse annotation names an action the transcript does not contain.
    #[error("frame {frame} annotated with action {action} absent from the transcript")]
    InconsistentAnnotation { frame: usize, action: usize },
    /// No candidate transcript is feasible for the sequence.
    #[error("no feasible candidate transcript")]
    NoCandidate,
    /// A per-sequence failure inside a batch evaluation, tagged with the sequence id.
    #[error("sequence {id}: {source}")]
    Sequence {
        id: String,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    pub(crate) fn in_sequence(self, id: &str) -> Error {
        Error::Sequence {
            id: String::from(id),
            source: Box::new(self),
        }
    }
}
