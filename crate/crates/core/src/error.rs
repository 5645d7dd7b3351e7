use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("graph error: {0}")]
    Graph(String),
    #[error("invalid environment config: {0}")]
    EnvConfig(String),
    #[error("infeasible placement: {0}")]
    Placement(String),
    #[error("invalid action: {0}")]
    Action(String),
    #[error("episode already finished")]
    EpisodeDone,
    #[error("layout parse error on line {line}: {msg}")]
    Layout { line: usize, msg: String },
    #[error("replay buffer: {0}")]
    Replay(String),
    #[error("not ready to train: {have} episodes stored, {need} needed")]
    NotReady { have: usize, need: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
    #[error("{0}")]
    Failed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::EnvConfig(_) | Error::Layout { .. } => 1,
            _ => 2,
        }
    }
}
