use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("element geometry: {0}")]
    Element(String),

    #[error("material: {0}")]
    Material(String),

    #[error("mesh: {0}")]
    Mesh(String),

    #[error("mesh file (line {line}): {msg}")]
    MeshParse { line: usize, msg: String },

    #[error("assembly: {0}")]
    Assembly(String),

    #[error("linear solve: {0}")]
    LinearSolve(String),

    #[error("step {step} diverged after {iters} Newton iterations (residual {residual:.3e}, initial {initial:.3e})")]
    Divergence {
        step: usize,
        iters: usize,
        residual: f64,
        initial: f64,
    },

    #[error("checkpoint (line {line}): {msg}")]
    CheckpointParse { line: usize, msg: String },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
