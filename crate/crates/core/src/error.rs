use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("objects {0} and {1} overlap in the initial configuration")]
    Overlap(usize, usize),
    #[error("physics did not settle: {0}")]
    Simulation(String),
    #[error("no physical subject: the mask union is empty")]
    NoPhysicalSubject,
    #[error("{axis} extent {size} is not divisible by factor {factor}")]
    Indivisible {
        axis: &'static str,
        size: usize,
        factor: usize,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("timestep {0} outside [0, 1]")]
    Timestep(f64),
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },
    #[error("no labels: every primitive count is zero")]
    NoLabels,
    #[error("all sampling weights are zero")]
    ZeroWeights,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("mismatched block sets: {0}")]
    BlockSet(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
