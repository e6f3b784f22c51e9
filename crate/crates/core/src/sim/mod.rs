//! Block-level execution of lowered kernels with race and ownership checks.

mod machine;
pub mod race;

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use thiserror::Error;

use crate::decomp::DecompNode;
use crate::index::EvalError;
use crate::lower::{lower, Kernel, LowerError};
use crate::spec::{Spec, SpecKind};
use crate::validate::WARP_SIZE;
use machine::{Machine, Options, Program};
pub use race::{detect_races, AccessRecord, Race, RaceKind, RaceReport};

/// Dense row-major matrix of logical values.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f32) -> Matrix {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f32 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OwnershipKind {
    /// Register slot never written by this thread.
    Unwritten,
    /// Register slot holds another element.
    Foreign,
    /// Index outside the thread's register allocation.
    OutOfRange,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OwnershipViolation {
    pub block: usize,
    pub thread: usize,
    pub buffer: String,
    /// Logical (column-major) index the thread asked for.
    pub logical: i64,
    pub found: Option<i64>,
    pub kind: OwnershipKind,
}

impl fmt::Display for OwnershipViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "thread {} of block {} reads {}[{}] ({:?}",
            self.thread, self.block, self.buffer, self.logical, self.kind
        )?;
        if let Some(x) = self.found {
            write!(f, ", slot holds {}", x)?;
        }
        f.write_str(")")
    }
}

#[derive(Clone, Debug, PartialEq, Error)]
pub enum SimError {
    #[error(transparent)]
    Lower(#[from] LowerError),
    #[error("residual bound to `{0}` cannot be simulated")]
    UnsimulatableResidual(String),
    #[error("operand {operand} expects shape {expected:?}, got {got:?}")]
    InputShape { operand: String, expected: (usize, usize), got: (usize, usize) },
    #[error("ownership violation: {0}")]
    Ownership(OwnershipViolation),
    #[error("index {index} out of bounds for {buffer} (len {len})")]
    OutOfBounds { buffer: String, index: i64, len: usize },
    #[error("block {block}: {waiting} threads at a barrier while {finished} finished")]
    BarrierDivergence { block: usize, waiting: usize, finished: usize },
    #[error("index evaluation failed: {0}")]
    Index(EvalError),
    #[error("{0}")]
    Unsupported(String),
}

#[derive(Clone, Debug)]
pub struct SimConfig {
    pub record_log: bool,
    pub race_cap: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig { record_log: false, race_cap: 32 }
    }
}

#[derive(Clone, Debug)]
pub struct SimResult {
    pub output: Matrix,
    pub races: RaceReport,
    /// Shared-memory accesses, when requested.
    pub log: Vec<AccessRecord>,
    /// Names and sizes of the shared regions referenced by the log.
    pub regions: Vec<(String, usize)>,
    pub phases: usize,
}

/// Runs a kernel for a MatMul (`inputs` = A, B) or a Move (`inputs` = src).
pub fn run(root: &Spec, tree: &DecompNode, inputs: &[&Matrix]) -> Result<SimResult, SimError> {
    run_with(root, tree, inputs, &SimConfig::default())
}

pub fn run_with(root: &Spec, tree: &DecompNode, inputs: &[&Matrix], cfg: &SimConfig) -> Result<SimResult, SimError> {
    let k = lower(root, tree)?;
    run_kernel(&k, inputs, cfg)
}

pub fn run_kernel(k: &Kernel, inputs: &[&Matrix], cfg: &SimConfig) -> Result<SimResult, SimError> {
    let prog = Program::new(k, false)?;
    let opts = Options { log: cfg.record_log, race_cap: cfg.race_cap, collect_ownership: false, max_blocks: None };
    let out = Machine::new(&prog, k, inputs, opts)?.run(k)?;
    let o = k.output();
    Ok(SimResult {
        output: Matrix { rows: o.rows, cols: o.cols, data: out.output },
        races: out.races,
        log: out.log,
        regions: prog.shared_names().into_iter().zip(prog.shared_sizes()).collect(),
        phases: out.phases,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OwnershipReport {
    pub violations: Vec<OwnershipViolation>,
}

impl OwnershipReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    /// (warp, lane) pairs with at least one violation.
    pub fn violating_lanes(&self) -> BTreeSet<(usize, usize)> {
        self.violations.iter().map(|v| (v.thread / WARP_SIZE, v.thread % WARP_SIZE)).collect()
    }
}

/// Executes block 0 on zero inputs and reports every access to a
/// distributed array by a thread that does not own the element.
pub fn check_ownership(root: &Spec, tree: &DecompNode) -> Result<OwnershipReport, SimError> {
    let k = lower(root, tree)?;
    let prog = Program::new(&k, true)?;
    let opts = Options { log: false, race_cap: 0, collect_ownership: true, max_blocks: Some(1) };
    let zeros: Vec<Matrix> = match &root.kind {
        SpecKind::MatMul { a, b, .. } => vec![Matrix::zeros(a.rows, a.cols), Matrix::zeros(b.rows, b.cols)],
        SpecKind::Move { src, .. } => vec![Matrix::zeros(src.rows, src.cols)],
        SpecKind::LaneMma { .. } => Vec::new(),
    };
    let refs: Vec<&Matrix> = zeros.iter().collect();
    let out = Machine::new(&prog, &k, &refs, opts)?.run(&k)?;
    Ok(OwnershipReport { violations: out.ownership })
}
