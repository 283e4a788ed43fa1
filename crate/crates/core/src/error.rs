use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid partition: cannot split {dim} indexes into {blocks} blocks")]
    InvalidPartition { dim: usize, blocks: usize },

    #[error("block mismatch: expected block {expected}, found block {found}")]
    BlockMismatch { expected: usize, found: usize },

    #[error("malformed sparse block {block_id}: {reason}")]
    MalformedBlock { block_id: usize, reason: String },

    #[error("index {index} lies outside block range {start}..{end}")]
    IndexOutOfRange {
        index: usize,
        start: usize,
        end: usize,
    },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error(
        "schedule violation: worker {target} targeted by more than one message in round {round}"
    )]
    ScheduleViolation { round: u64, target: usize },

    #[error("unknown worker {worker} (cluster has {workers} workers)")]
    UnknownWorker { worker: usize, workers: usize },

    #[error("invalid group: {0}")]
    InvalidGroup(String),

    #[error("unsupported group size {0}: recursive doubling requires a power of two")]
    UnsupportedGroupSize(usize),

    #[error("invalid k: {k} exceeds gradient dimension {dim}")]
    InvalidK { k: usize, dim: usize },

    #[error(
        "reduce-scatter subset property violated: worker {worker} received block {block} at step {step} but does not hold it"
    )]
    SubsetViolation {
        worker: usize,
        step: usize,
        block: usize,
    },

    #[error("residual store: {0}")]
    ResidualState(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("consistency audit failed: {0}")]
    Inconsistent(String),

    #[error("conservation audit failed: relative error {0:e}")]
    Conservation(f64),
}
