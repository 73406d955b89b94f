//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("invalid graph: {kind} requires n >= {min}, got {n}")]
    TooSmall {
        kind: &'static str,
        n: usize,
        min: usize,
    },
    #[error("edge ({a}, {b}) out of range for {n} nodes")]
    EdgeOutOfRange { a: usize, b: usize, n: usize },
    #[error("self-loop ({u}, {u}) is not allowed")]
    SelfLoop { u: usize },
    #[error("node {u} is isolated; degree normalization is undefined")]
    IsolatedNode { u: usize },
    #[error("node {u} out of range for {n} nodes")]
    NodeOutOfRange { u: usize, n: usize },
    #[error("graph parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Error)]
pub enum NumericError {
    #[error("symmetric eigensolver did not converge ({context})")]
    EigenNoConvergence { context: String },
    #[error("smallest eigenvalue is degenerate (gap {gap:.3e} <= {tol:.3e})")]
    DegenerateEigenvalue { gap: f64, tol: f64 },
    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },
}

#[derive(Debug, Error)]
pub enum ShapeError {
    #[error("{op}: shape mismatch, lhs {lhs:?} vs rhs {rhs:?}")]
    Mismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    Bad {
        op: &'static str,
        expected: String,
        got: Vec<usize>,
    },
}

#[derive(Debug, Error)]
pub enum LayerError {
    #[error("filter bank was built for a different graph ({expected} nodes, signal has {got})")]
    GraphMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

#[derive(Debug, Error)]
pub enum RegError {
    #[error("regularization context misaligned at (node {u}, basis {k}): patch size {ctx} vs bank {bank}")]
    Misaligned { u: usize, k: usize, ctx: usize, bank: usize },
    #[error("negative regularization weight {0}")]
    NegativeLambda(f64),
    #[error("patch (node {u}, basis {k}) is not positive definite (lambda_1 = {lambda1:.3e})")]
    NotPositiveDefinite { u: usize, k: usize, lambda1: f64 },
    #[error("patch (node {u}, basis {k}): {source}")]
    Numeric {
        u: usize,
        k: usize,
        source: NumericError,
    },
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad IDX magic: expected {expected:#010x}, got {got:#010x}")]
    BadMagic { expected: u32, got: u32 },
    #[error("truncated IDX file: wanted {wanted} bytes, got {got}")]
    Truncated { wanted: usize, got: usize },
    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("invalid noise spec: {0}")]
    BadNoiseSpec(String),
    #[error("{0} is not divisible by downsampling factor {1}")]
    BadFactor(usize, usize),
    #[error("no node with exactly four grid neighbors; need at least a 3x3 grid")]
    NoInteriorNode,
    #[error("dataset container: {0}")]
    BadContainer(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("missing config key `{0}`")]
    Missing(&'static str),
    #[error("config key `{key}`: {msg}")]
    BadValue { key: String, msg: String },
    #[error("unknown architecture `{0}`")]
    UnknownArchitecture(String),
    #[error("unknown layer kind `{0}`")]
    UnknownLayer(String),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Reg(#[from] RegError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
