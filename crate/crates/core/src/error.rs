use std::path::PathBuf;

use crate::arch_map::ProjectionKind;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse grouping of errors, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorFamily {
    /// Bad arguments or invalid user-supplied parameters.
    Usage,
    /// Filesystem access and on-disk format problems.
    Io,
    /// Mapping tensors and configs onto layers failed.
    Resolution,
    /// Statistics could not be computed on the data.
    Numeric,
    /// Content hashes or registry invariants do not hold.
    Integrity,
}

impl ErrorFamily {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorFamily::Usage => 1,
            ErrorFamily::Io => 2,
            ErrorFamily::Resolution => 3,
            ErrorFamily::Numeric => 4,
            ErrorFamily::Integrity => 5,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("no safetensors checkpoint found in {}: {reason}", path.display())]
    MissingIndex { path: PathBuf, reason: String },

    #[error("malformed safetensors header in {context}: {reason}")]
    HeaderMalformed { context: String, reason: String },

    #[error("tensor {name:?} appears in both {first} and {second}")]
    DuplicateTensor {
        name: String,
        first: String,
        second: String,
    },

    #[error("tensor {tensor:?} has unsupported dtype {dtype:?}")]
    UnsupportedDType { tensor: String, dtype: String },

    #[error("tensor {tensor:?}: data offsets span {actual} bytes but shape x dtype requires {expected}")]
    SizeMismatch {
        tensor: String,
        expected: u64,
        actual: u64,
    },

    #[error("tensor {0:?} not found in checkpoint")]
    TensorNotFound(String),

    #[error("invalid row range {start}..{end} for tensor {tensor:?} with {rows} rows")]
    InvalidRegion {
        tensor: String,
        start: usize,
        end: usize,
        rows: usize,
    },

    #[error("tensor {name:?} has {count} selected elements; at least 2 are needed for a standard deviation")]
    DegenerateTensor { name: String, count: u64 },

    #[error("tensor {name:?} contains a non-finite value at flat index {index}")]
    NonFiniteEncountered { name: String, index: u64 },

    #[error("no model config found in {}", path.display())]
    ConfigMissing { path: PathBuf },

    #[error("model config is missing {0}")]
    ConfigFieldMissing(String),

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("invalid tensor-name mapping: {0}")]
    MapInvalid(String),

    #[error("could not resolve {kind} for layers {layers:?}")]
    UnresolvedLayer {
        kind: ProjectionKind,
        layers: Vec<usize>,
    },

    #[error("tensor {tensor:?} is claimed by more than one mapping rule: {rules:?}")]
    AmbiguousPattern { tensor: String, rules: Vec<String> },

    #[error("tensor {tensor:?}: {reason}")]
    ShapeContradiction { tensor: String, reason: String },

    #[error("layer {layer} {kind} has {count} elements; at least 2 are needed")]
    DegenerateLayer {
        layer: usize,
        kind: ProjectionKind,
        count: u64,
    },

    #[error("{context}: sequence is constant (std below 1e-12), nothing to compare")]
    DegenerateSequence { context: String },

    #[error("sequence of length {len} cannot be normalized; at least 2 values are needed")]
    SequenceTooShort { len: usize },

    #[error("unsupported fingerprint schema_version {found} (this build reads {supported})")]
    SchemaVersionUnsupported { found: u32, supported: u32 },

    #[error("{context}: content hash mismatch (recorded {recorded}, computed {computed})")]
    HashMismatch {
        context: String,
        recorded: String,
        computed: String,
    },

    #[error("malformed fingerprint document {context}: {reason}")]
    FingerprintMalformed { context: String, reason: String },

    #[error("interpolation target length {target} is shorter than source length {source_len}")]
    TargetShorterThanSource { source_len: usize, target: usize },

    #[error("correlation input is constant")]
    ConstantInput,

    #[error("sequence lengths differ ({a} vs {b})")]
    LengthMismatch { a: usize, b: usize },

    #[error("p-value needs at least 3 samples, got {0}")]
    TooFewSamples(usize),

    #[error("fingerprint {model} has no {kind} sequence")]
    KindMissing { model: String, kind: ProjectionKind },

    #[error("invalid thresholds: t_low {t_low} must not exceed t_high {t_high}")]
    InvalidThresholds { t_high: f64, t_low: f64 },

    #[error("model_id {0:?} occurs more than once")]
    DuplicateModelId(String),

    #[error("registry {} is locked by another process (remove {} if stale)", root.display(), lock.display())]
    RegistryLocked { root: PathBuf, lock: PathBuf },

    #[error("invalid synthetic model spec: {0}")]
    SpecInvalid(String),

    #[error("{message}")]
    Usage { message: String },

    #[error("comparing {a} with {b}: {source}")]
    Pair {
        a: String,
        b: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(context: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::HeaderMalformed {
            context: context.into(),
            reason: reason.into(),
        }
    }

    pub fn family(&self) -> ErrorFamily {
        use Error::*;
        match self {
            Io { .. }
            | MissingIndex { .. }
            | HeaderMalformed { .. }
            | DuplicateTensor { .. }
            | UnsupportedDType { .. }
            | SizeMismatch { .. }
            | ConfigMissing { .. }
            | SchemaVersionUnsupported { .. }
            | FingerprintMalformed { .. } => ErrorFamily::Io,
            TensorNotFound(_)
            | InvalidRegion { .. }
            | ConfigFieldMissing(_)
            | InvalidConfig(_)
            | MapInvalid(_)
            | UnresolvedLayer { .. }
            | AmbiguousPattern { .. }
            | ShapeContradiction { .. }
            | KindMissing { .. } => ErrorFamily::Resolution,
            DegenerateTensor { .. }
            | NonFiniteEncountered { .. }
            | DegenerateLayer { .. }
            | DegenerateSequence { .. }
            | SequenceTooShort { .. }
            | TargetShorterThanSource { .. }
            | ConstantInput
            | LengthMismatch { .. }
            | TooFewSamples(_) => ErrorFamily::Numeric,
            HashMismatch { .. } | DuplicateModelId(_) | RegistryLocked { .. } => ErrorFamily::Integrity,
            InvalidThresholds { .. } | SpecInvalid(_) | Usage { .. } => ErrorFamily::Usage,
            Pair { source, .. } => source.family(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.family().exit_code()
    }
}
