use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

use crate::spec::{ComputeLevel, ElemType, MemLevel};

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum SpecError {
    #[error("matrix dimensions must be positive")]
    ZeroDim,
    #[error("move shapes differ: {src:?} vs {dst:?}")]
    ShapeMismatch { src: (usize, usize), dst: (usize, usize) },
    #[error("move element types differ: {src:?} vs {dst:?}")]
    ElemMismatch { src: ElemType, dst: ElemType },
    #[error("{spec} matches more than one executable: {candidates:?}")]
    AmbiguousMatch { spec: String, candidates: Vec<String> },
    #[error("micro-kernel `{name}` clashes with `{existing}`")]
    DuplicateMicroKernel { name: String, existing: String },
    #[error("micro-kernel `{kernel}` uses unknown placeholder `${{{name}}}`")]
    UnknownPlaceholder { kernel: String, name: String },
}

/// One reason a decomposition step is illegal.
#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum DecompError {
    #[error("{what} of extent {extent} is not divisible by {by}")]
    NonDivisible { what: &'static str, extent: usize, by: usize },
    #[error("tile size must be positive")]
    ZeroTile,
    #[error("{step} applies only to MatMul specs")]
    NotMatMul { step: &'static str },
    #[error("cannot assign {from:?}-level work to {to:?}")]
    HierarchyViolation { from: ComputeLevel, to: ComputeLevel },
    #[error("{level:?} tiling yields {got} units but {expected} are launched")]
    UnitCountMismatch { level: ComputeLevel, expected: usize, got: usize },
    #[error("cannot load from {from} into {to}")]
    UpwardLoad { from: String, to: String },
    #[error("{step} is not allowed at Kernel level")]
    StagingAtKernelLevel { step: &'static str },
    #[error("register operands cannot be staged at {level:?} level")]
    DistributedLoad { level: ComputeLevel },
    #[error("fragment operands need Warp level, found {level:?}")]
    FragmentLevel { level: ComputeLevel },
    #[error("operand {operand} does not exist for this spec")]
    NoSuchOperand { operand: &'static str },
    #[error("swizzle is not a permutation of [0, {domain})")]
    SwizzleNotBijective { domain: usize },
    #[error("swizzle may only use `id`, found `{var}`")]
    SwizzleFreeVar { var: String },
    #[error("{refinement} requires .to()")]
    RefinementWithoutTo { refinement: &'static str },
    #[error("pad is only legal on SH targets")]
    PadOnNonShared,
    #[error("alignment {align} must be a power of two dividing 256 and at least {min}")]
    InvalidAlign { align: usize, min: usize },
    #[error("split into {chunks} chunks needs an accumulating MatMul (add an epilog first)")]
    SplitNeedsAccumulator { chunks: usize },
    #[error("epilog needs C in GL, found {found}")]
    CNotInGL { found: String },
    #[error("accumulator must be RF or FR, found {found}")]
    InvalidAccumulator { found: String },
    #[error("accumulator element type {given:?} differs from C ({c:?})")]
    AccumulatorElem { given: ElemType, c: ElemType },
    #[error("sequential tile at {level:?} level over an accumulator owned at {owner:?} level")]
    DistributedSequentialTile { level: ComputeLevel, owner: ComputeLevel },
    #[error("mmaTile needs {expected}, found {found}")]
    PatternMismatch { expected: String, found: String },
    #[error("no executable matches {spec}; nearest: {nearest:?}")]
    NoExecutableMatch { spec: String, nearest: Vec<String> },
    #[error("micro-kernel `{name}` does not match {spec}")]
    MicroKernelMismatch { name: String, spec: String },
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("no dead shared buffer available to reuse")]
    NoReusableBuffer,
}

impl DecompError {
    pub fn upward(from: MemLevel, to: MemLevel) -> DecompError {
        DecompError::UpwardLoad { from: from.full(), to: to.full() }
    }
}
