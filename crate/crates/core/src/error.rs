use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("degenerate gates: normalizer denominator {value:e} at token {token}")]
    DegenerateGate { token: usize, value: f64 },

    #[error("degenerate feature map: normalizer denominator {value:e} at token {token}")]
    DegenerateFeature { token: usize, value: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("cannot aggregate an empty shard")]
    EmptyShard,

    #[error("diffusion step {step} outside 1..={steps}")]
    Step { step: usize, steps: usize },

    #[error("tap mismatch: student exposes {student} mixer outputs, teacher {teacher}")]
    Tap { student: usize, teacher: usize },

    #[error("training diverged at step {step}: loss is {loss}")]
    Training { step: usize, loss: f64 },

    #[error("malformed binary data: {0}")]
    Format(String),

    #[error("io: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
