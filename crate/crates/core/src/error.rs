//! Error type shared across the crate.

use crate::shape::Shape;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch on {dim}: expected {expected}, got {got}")]
    DimMismatch {
        dim: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid shape {0:?}: every dimension must be >= 1")]
    EmptyShape([usize; 4]),
    #[error("data length {got} does not match shape {shape} ({expected} elements)")]
    DataLength {
        shape: Shape,
        expected: usize,
        got: usize,
    },
    #[error("kernel {kernel}x{kernel_w} exceeds padded input {padded_h}x{padded_w}")]
    KernelTooLarge {
        kernel: usize,
        kernel_w: usize,
        padded_h: usize,
        padded_w: usize,
    },
    #[error("degenerate convolution output {out_h}x{out_w}; input {in_h}x{in_w}, kernel {kh}x{kw}, stride {sh}x{sw}")]
    DegenerateOutput {
        out_h: isize,
        out_w: isize,
        in_h: usize,
        in_w: usize,
        kh: usize,
        kw: usize,
        sh: usize,
        sw: usize,
    },
    #[error("stride must be positive, got {0}x{1}")]
    ZeroStride(usize, usize),
    #[error("channel count {channels} not divisible by r^2 = {rsq}")]
    ChannelsNotDivisible { channels: usize, rsq: usize },
    #[error("broadcast requires a [N,1,H,W] map; got shapes {a} and {b}")]
    BroadcastMismatch { a: Shape, b: Shape },
    #[error("concat requires matching N/H/W; part {index} has shape {got}, expected {expected}")]
    ConcatMismatch {
        index: usize,
        expected: Shape,
        got: Shape,
    },
    #[error("concat of an empty part list")]
    ConcatEmpty,
    #[error("backward requires a scalar loss; got shape {0}")]
    NonScalarLoss(Shape),
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,
    #[error("parameter '{0}' has no gradient; run backward and accumulate first")]
    MissingGradient(String),
    #[error("duplicate parameter name '{0}'")]
    DuplicateParameter(String),
    #[error("unknown parameter '{0}'")]
    UnknownParameter(String),
    #[error("learning rate must be positive, got {0}")]
    InvalidLearningRate(f64),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("spatial size {h}x{w} not divisible by {divisor} (required for {what})")]
    NotDivisible {
        h: usize,
        w: usize,
        divisor: usize,
        what: &'static str,
    },
    #[error("weight file: bad magic {0:02x?}, expected \"PAGW\"")]
    BadMagic([u8; 4]),
    #[error("weight file: unsupported format version {0}")]
    BadVersion(u16),
    #[error("weight file truncated: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("weight file: entry '{name}' dims {dims:?} disagree with payload of {payload} floats")]
    EntryDims {
        name: String,
        dims: Vec<usize>,
        payload: usize,
    },
    #[error("weight file: unsupported tensor rank {rank} for entry '{name}'")]
    EntryRank { name: String, rank: u8 },
    #[error("config mismatch: file has (l={file_l}, C={file_c}, D={file_d}, G={file_g}, Cg={file_cg}), model expects (l={want_l}, C={want_c}, D={want_d}, G={want_g}, Cg={want_cg})")]
    ConfigMismatch {
        file_l: u32,
        file_c: u32,
        file_d: u32,
        file_g: u32,
        file_cg: u32,
        want_l: u32,
        want_c: u32,
        want_d: u32,
        want_g: u32,
        want_cg: u32,
    },
    #[error("weight file: missing entry '{0}' required by the model config")]
    MissingEntry(String),
    #[error("weight file: entry '{0}' does not belong to the model config")]
    UnexpectedEntry(String),
    #[error("weight file: entry '{name}' has dims {got:?}, config implies {expected:?}")]
    EntryShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("image: malformed {format} header: {detail}")]
    MalformedImage { format: &'static str, detail: String },
    #[error("image: unsupported bit depth or color type in {path}: {detail}")]
    UnsupportedImage { path: String, detail: String },
    #[error("patch must be square for the flip/rotation orbit; got {h}x{w}")]
    NonSquarePatch { h: usize, w: usize },
    #[error("degradation factor must be one of 2, 4, 8, 16; got {0}")]
    InvalidFactor(u32),
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("loss became non-finite at step {step} (epoch {epoch}, batch {batch})")]
    NonFiniteLoss {
        step: usize,
        epoch: usize,
        batch: usize,
    },
    #[error("no valid ground-truth pixels (all zero) for RMSE")]
    NoValidPixels,
    #[error("{context}: expected {expected}, got {got}")]
    Ratio {
        context: &'static str,
        expected: String,
        got: String,
    },
    #[error("stage index {got} out of range 1..={max}")]
    StageOutOfRange { got: usize, max: usize },
    #[error("config file: {0}")]
    ConfigFile(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
