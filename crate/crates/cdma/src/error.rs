//! Error types shared across the crate.

use thiserror::Error;

/// Errors raised while building or evaluating compute graphs.
#[derive(Debug, Error)]
pub enum GraphError {
    #[error("shape mismatch at node `{node}`: {detail}")]
    ShapeMismatch { node: String, detail: String },
    #[error("non-finite value produced by node `{node}`")]
    NonFinite { node: String },
    #[error("input `{name}` required by the requested outputs is not bound")]
    UnboundInput { name: String },
    #[error("parameter `{name}` required by the requested outputs is missing")]
    MissingParam { name: String },
    #[error("node `{node}` is not scalar-valued (shape {shape:?}); cannot seed a scalar backward pass")]
    NonScalarLoss { node: String, shape: Vec<usize> },
    #[error("adjoint shape {adjoint:?} does not match node `{node}` shape {node_shape:?}")]
    AdjointMismatch {
        node: String,
        adjoint: Vec<usize>,
        node_shape: Vec<usize>,
    },
    #[error("invalid graph construction: {0}")]
    Invalid(String),
}

/// Errors from optimizer updates.
#[derive(Debug, Error)]
pub enum OptimError {
    #[error("parameter `{name}`: gradient shape {got:?} does not match parameter shape {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("gradient missing for parameter `{name}`")]
    MissingGradient { name: String },
}

/// Errors from noise-schedule construction and diffusion steps.
#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("invalid schedule bounds: beta_start={beta_start}, beta_end={beta_end} (need 0 < start <= end < 1)")]
    InvalidBetaBounds { beta_start: f64, beta_end: f64 },
    #[error("invalid timestep count {0} (need T >= 1)")]
    InvalidTimesteps(usize),
    #[error("timestep {t} out of range [1, {max}]")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("invalid sampling steps {steps} for schedule with T={timesteps} (need 1 <= S <= T)")]
    InvalidSampleSteps { steps: usize, timesteps: usize },
    #[error("non-finite training loss at step {step} (t={t}, loss={loss}, grad norms: {grad_norms})")]
    NonFiniteLoss {
        step: u64,
        t: usize,
        loss: f32,
        grad_norms: String,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Errors from model construction and training.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("input shape {got:?} does not match model input {expected:?}")]
    InputShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

/// Errors from white-box attack generators.
#[derive(Debug, Error)]
pub enum WhiteboxError {
    #[error("invalid attack config: {0}")]
    InvalidConfig(String),
    #[error("pair collection produced no successful adversarial examples ({attempted} inputs attempted, shadow accuracy on them {shadow_acc:.3})")]
    NoPairs { attempted: usize, shadow_acc: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Errors from the black-box attack harness.
#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack config: {0}")]
    InvalidConfig(String),
    #[error("targeted attack requires a target class distinct from the true label (both are {0})")]
    TargetIsTrueLabel(usize),
    #[error("metrics over an empty outcome set")]
    EmptyOutcomes,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
}

/// Errors from input-transformation defenses.
#[derive(Debug, Error)]
pub enum DefenseError {
    #[error("bit depth {0} out of range [1, 7]")]
    BitsOutOfRange(u8),
    #[error("median window {0} must be odd and >= 3")]
    BadWindow(usize),
    #[error("jpeg quality {0} out of range [1, 100]")]
    BadQuality(u8),
    #[error("defense input must be a (C,H,W) image, got shape {0:?}")]
    BadShape(Vec<usize>),
}

/// Errors from dataset generation.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset spec: {0}")]
    Invalid(String),
    #[error("unknown dataset kind `{0}`")]
    UnknownKind(String),
}

/// Errors from the on-disk container format (checkpoints, datasets, pair sets).
#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt header: {0}")]
    BadHeader(String),
    #[error("unsupported container version {found} (supported: {supported})")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("unexpected role `{found}` (expected `{expected}`)")]
    RoleMismatch { found: String, expected: String },
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("loaded data violates an invariant: {0}")]
    Invariant(String),
}

/// Errors from CSV record files.
#[derive(Debug, Error)]
pub enum RecordError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed record file: {0}")]
    Malformed(String),
    #[error("line {line}: {detail}")]
    BadRow { line: usize, detail: String },
    #[error("unsupported schema `{0}`")]
    BadSchema(String),
}

/// Errors from run configuration parsing and validation.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Errors from report aggregation.
#[derive(Debug, Error)]
pub enum ReportError {
    #[error("empty report: no outcome rows to aggregate")]
    Empty,
    #[error("refusing to aggregate mismatched runs: {0}")]
    Mismatched(String),
    #[error(transparent)]
    Record(#[from] RecordError),
}

/// Errors from pipeline orchestration (artifact wiring between subcommands).
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("missing prerequisite `{artifact}`: run `{produced_by}` first")]
    MissingArtifact {
        artifact: String,
        produced_by: String,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Whitebox(#[from] WhiteboxError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Defense(#[from] DefenseError),
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error(transparent)]
    Report(#[from] ReportError),
}
