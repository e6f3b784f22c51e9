//! Decomposition trees and the spec transformation each step performs.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::error::DecompError;
use crate::index::IndexExpr;
use crate::spec::{
    make_fill_spec, make_move_spec, match_executable, nearest_patterns, spec_short_form,
    ComputeLevel, ElemType, Executable, InstructionSet, Layout, Major, MatrixRef, MemLevel,
    MicroKernel, MicroKernelSet, Spec, SpecKind,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Operand {
    A,
    B,
    Src,
}

impl Operand {
    pub fn name(self) -> &'static str {
        match self {
            Operand::A => "A",
            Operand::B => "B",
            Operand::Src => "SRC",
        }
    }
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct TileRefinements {
    pub to: Option<ComputeLevel>,
    pub unroll: bool,
    pub layout: Option<Major>,
    pub swizzle: Option<IndexExpr>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct SplitRefinements {
    pub unroll: bool,
    pub sync: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct LoadRefinements {
    pub no_sync: bool,
    pub storage_layout: Option<Major>,
    pub pad: usize,
    pub align: Option<usize>,
    pub reuse_buffer: bool,
}

/// One node of a decomposition tree. `None` nested decompositions stand
/// for the default (`_`) decomposition of the induced Move.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum DecompNode {
    Tile { rows: usize, cols: usize, refine: TileRefinements, child: Box<DecompNode> },
    Split { k: usize, refine: SplitRefinements, child: Box<DecompNode> },
    Load {
        operand: Operand,
        target: MemLevel,
        move_decomp: Option<Box<DecompNode>>,
        refine: LoadRefinements,
        child: Box<DecompNode>,
    },
    Epilog {
        acc: MemLevel,
        acc_elem: Option<ElemType>,
        init: Option<Box<DecompNode>>,
        store: Option<Box<DecompNode>>,
        child: Box<DecompNode>,
    },
    MmaTile { child: Box<DecompNode> },
    Done { micro_kernel: Option<MicroKernel> },
}

impl DecompNode {
    pub fn done() -> DecompNode {
        DecompNode::Done { micro_kernel: None }
    }

    pub fn child(&self) -> Option<&DecompNode> {
        match self {
            DecompNode::Tile { child, .. }
            | DecompNode::Split { child, .. }
            | DecompNode::Load { child, .. }
            | DecompNode::Epilog { child, .. }
            | DecompNode::MmaTile { child } => Some(child),
            DecompNode::Done { .. } => None,
        }
    }

    /// Short label used in traces.
    pub fn label(&self) -> String {
        match self {
            DecompNode::Tile { rows, cols, .. } => format!("tile({},{})", rows, cols),
            DecompNode::Split { k, .. } => format!("split({})", k),
            DecompNode::Load { operand, target, .. } => format!("load({},{})", operand, target.short()),
            DecompNode::Epilog { acc, .. } => format!("epilog({})", acc.short()),
            DecompNode::MmaTile { .. } => "mmaTile".into(),
            DecompNode::Done { micro_kernel: Some(mk) } => format!("done({})", mk.name),
            DecompNode::Done { micro_kernel: None } => "done".into(),
        }
    }

    /// Number of nodes on the main chain, `Done` included.
    pub fn chain_len(&self) -> usize {
        1 + self.child().map_or(0, |c| c.chain_len())
    }
}

/// Where a node sits in a tree, as a path of edges from the root.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PathSeg {
    Child,
    MoveDecomp,
    Init,
    Store,
}

#[derive(Clone, Debug)]
enum Step {
    Tile { rows: usize, cols: usize, refine: TileRefinements },
    Split { k: usize, refine: SplitRefinements },
    Load { operand: Operand, target: MemLevel, decomp: Option<DecompNode>, refine: LoadRefinements },
    Epilog { acc: MemLevel, acc_elem: Option<ElemType>, init: Option<DecompNode>, store: Option<DecompNode> },
    MmaTile,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BuildError(pub String);

impl fmt::Display for BuildError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl core::error::Error for BuildError {}

/// Fluent construction of a main chain:
///
/// ```
/// use hiertile_core::decomp::{Chain, Operand};
/// use hiertile_core::spec::{ComputeLevel, MemLevel};
/// let tree = Chain::new()
///     .tile(8, 8).to(ComputeLevel::Block)
///     .epilog(MemLevel::RF)
///     .tile(1, 1).to(ComputeLevel::Thread)
///     .split(1)
///     .load(Operand::A, MemLevel::RF)
///     .load(Operand::B, MemLevel::RF)
///     .done()
///     .unwrap();
/// assert_eq!(tree.chain_len(), 7);
/// ```
#[derive(Clone, Debug, Default)]
pub struct Chain {
    steps: Vec<Step>,
    error: Option<String>,
}

impl Chain {
    pub fn new() -> Chain {
        Chain::default()
    }

    fn fail(mut self, msg: &str) -> Chain {
        if self.error.is_none() {
            self.error = Some(String::from(msg));
        }
        self
    }

    fn push(mut self, s: Step) -> Chain {
        self.steps.push(s);
        self
    }

    pub fn tile(self, rows: usize, cols: usize) -> Chain {
        self.push(Step::Tile { rows, cols, refine: TileRefinements::default() })
    }

    pub fn split(self, k: usize) -> Chain {
        self.push(Step::Split { k, refine: SplitRefinements::default() })
    }

    pub fn load(self, operand: Operand, target: MemLevel) -> Chain {
        self.push(Step::Load { operand, target, decomp: None, refine: LoadRefinements::default() })
    }

    pub fn load_with(self, operand: Operand, target: MemLevel, decomp: DecompNode) -> Chain {
        self.push(Step::Load { operand, target, decomp: Some(decomp), refine: LoadRefinements::default() })
    }

    pub fn epilog(self, acc: MemLevel) -> Chain {
        self.push(Step::Epilog { acc, acc_elem: None, init: None, store: None })
    }

    pub fn epilog_with(
        self,
        acc: MemLevel,
        acc_elem: Option<ElemType>,
        init: Option<DecompNode>,
        store: Option<DecompNode>,
    ) -> Chain {
        self.push(Step::Epilog { acc, acc_elem, init, store })
    }

    pub fn mma_tile(self) -> Chain {
        self.push(Step::MmaTile)
    }

    fn tile_ref(mut self, what: &str, f: impl FnOnce(&mut TileRefinements)) -> Chain {
        match self.steps.last_mut() {
            Some(Step::Tile { refine, .. }) => {
                f(refine);
                self
            }
            _ => self.fail(&format!(".{} must follow tile", what)),
        }
    }

    fn load_ref(mut self, what: &str, f: impl FnOnce(&mut LoadRefinements)) -> Chain {
        match self.steps.last_mut() {
            Some(Step::Load { refine, .. }) => {
                f(refine);
                self
            }
            _ => self.fail(&format!(".{} must follow load", what)),
        }
    }

    pub fn to(self, level: ComputeLevel) -> Chain {
        self.tile_ref("to", |r| r.to = Some(level))
    }

    pub fn layout(self, major: Major) -> Chain {
        self.tile_ref("layout", |r| r.layout = Some(major))
    }

    pub fn swizzle(self, e: IndexExpr) -> Chain {
        self.tile_ref("swizzle", |r| r.swizzle = Some(e))
    }

    /// Unrolls the preceding tile or split.
    pub fn unroll(mut self) -> Chain {
        match self.steps.last_mut() {
            Some(Step::Tile { refine, .. }) => refine.unroll = true,
            Some(Step::Split { refine, .. }) => refine.unroll = true,
            _ => return self.fail(".unroll must follow tile or split"),
        }
        self
    }

    pub fn sync(mut self) -> Chain {
        match self.steps.last_mut() {
            Some(Step::Split { refine, .. }) => {
                refine.sync = true;
                self
            }
            _ => self.fail(".sync must follow split"),
        }
    }

    pub fn no_sync(self) -> Chain {
        self.load_ref("noSync", |r| r.no_sync = true)
    }

    pub fn storage_layout(self, major: Major) -> Chain {
        self.load_ref("storageLayout", |r| r.storage_layout = Some(major))
    }

    pub fn pad(self, n: usize) -> Chain {
        self.load_ref("pad", |r| r.pad = n)
    }

    pub fn align(self, bytes: usize) -> Chain {
        self.load_ref("align", |r| r.align = Some(bytes))
    }

    pub fn reuse_buffer(self) -> Chain {
        self.load_ref("reuseBuffer", |r| r.reuse_buffer = true)
    }

    pub fn done(self) -> Result<DecompNode, BuildError> {
        self.finish(DecompNode::done())
    }

    pub fn done_with(self, mk: MicroKernel) -> Result<DecompNode, BuildError> {
        self.finish(DecompNode::Done { micro_kernel: Some(mk) })
    }

    fn finish(self, leaf: DecompNode) -> Result<DecompNode, BuildError> {
        if let Some(e) = self.error {
            return Err(BuildError(e));
        }
        let mut node = leaf;
        for step in self.steps.into_iter().rev() {
            let child = Box::new(node);
            node = match step {
                Step::Tile { rows, cols, refine } => DecompNode::Tile { rows, cols, refine, child },
                Step::Split { k, refine } => DecompNode::Split { k, refine, child },
                Step::Load { operand, target, decomp, refine } => DecompNode::Load {
                    operand,
                    target,
                    move_decomp: decomp.map(Box::new),
                    refine,
                    child,
                },
                Step::Epilog { acc, acc_elem, init, store } => DecompNode::Epilog {
                    acc,
                    acc_elem,
                    init: init.map(Box::new),
                    store: store.map(Box::new),
                    child,
                },
                Step::MmaTile => DecompNode::MmaTile { child },
            };
        }
        Ok(node)
    }
}

// Spec transformations.

pub fn tile(s: &Spec, r: usize, c: usize) -> Result<Spec, DecompError> {
    if r == 0 || c == 0 {
        return Err(DecompError::ZeroTile);
    }
    let (rows, cols) = s.tiled_shape();
    if rows % r != 0 {
        return Err(DecompError::NonDivisible { what: "rows", extent: rows, by: r });
    }
    if cols % c != 0 {
        return Err(DecompError::NonDivisible { what: "cols", extent: cols, by: c });
    }
    let kind = match &s.kind {
        SpecKind::MatMul { a, b, c: cm, accumulate } => SpecKind::MatMul {
            a: a.with_shape(r, a.cols),
            b: b.with_shape(b.rows, c),
            c: cm.with_shape(r, c),
            accumulate: *accumulate,
        },
        SpecKind::Move { src, dst, zero_fill } => SpecKind::Move {
            src: src.with_shape(r, c),
            dst: dst.with_shape(r, c),
            zero_fill: *zero_fill,
        },
        SpecKind::LaneMma { .. } => return Err(DecompError::NotMatMul { step: "tile" }),
    };
    Ok(Spec { kind, level: s.level })
}

/// Checks the hierarchy rule of a `to()` refinement and returns the spec
/// at the new level. Unit counts are checked by validation.
pub fn assign_to(s: &Spec, level: ComputeLevel) -> Result<Spec, DecompError> {
    if !s.level.may_assign(level) {
        return Err(DecompError::HierarchyViolation { from: s.level, to: level });
    }
    Ok(s.with_level(level))
}

pub fn split(s: &Spec, k: usize) -> Result<Spec, DecompError> {
    let SpecKind::MatMul { a, b, c, accumulate } = &s.kind else {
        return Err(DecompError::NotMatMul { step: "split" });
    };
    if k == 0 {
        return Err(DecompError::ZeroTile);
    }
    if a.cols % k != 0 {
        return Err(DecompError::NonDivisible { what: "K", extent: a.cols, by: k });
    }
    let chunks = a.cols / k;
    if chunks > 1 && !accumulate {
        return Err(DecompError::SplitNeedsAccumulator { chunks });
    }
    Ok(Spec {
        kind: SpecKind::MatMul {
            a: a.with_shape(a.rows, k),
            b: b.with_shape(k, b.cols),
            c: c.clone(),
            accumulate: *accumulate,
        },
        level: s.level,
    })
}

/// The operand a load refers to.
pub fn operand_ref(s: &Spec, operand: Operand) -> Result<&MatrixRef, DecompError> {
    match (&s.kind, operand) {
        (SpecKind::MatMul { a, .. }, Operand::A) => Ok(a),
        (SpecKind::MatMul { b, .. }, Operand::B) => Ok(b),
        (SpecKind::Move { src, zero_fill: false, .. }, Operand::Src) => Ok(src),
        _ => Err(DecompError::NoSuchOperand { operand: operand.name() }),
    }
}

/// Returns the spec after the load and the Move it induces. The staged
/// copy keeps the source major unless `storage_layout` overrides it.
///
/// Loads normally move data down the hierarchy. The one exception is a
/// Move source held in RF or FR, which may be staged through SH on its way
/// out to global memory.
pub fn load(
    s: &Spec,
    operand: Operand,
    target: MemLevel,
    refine: &LoadRefinements,
) -> Result<(Spec, Spec), DecompError> {
    let src = operand_ref(s, operand)?;
    let staging = operand == Operand::Src
        && target == MemLevel::SH
        && (src.mem == MemLevel::RF || src.mem.is_fragment());
    if !src.mem.can_load_into(target) && !staging {
        return Err(DecompError::upward(src.mem, target));
    }
    let major = refine.storage_layout.unwrap_or(src.layout.major);
    let dst = MatrixRef { mem: target, layout: Layout::new(major, refine.pad), ..src.clone() };
    let mv = make_move_spec(src.clone(), dst.clone(), s.level)?;
    let mut kind = s.kind.clone();
    match (&mut kind, operand) {
        (SpecKind::MatMul { a, .. }, Operand::A) => *a = dst,
        (SpecKind::MatMul { b, .. }, Operand::B) => *b = dst,
        (SpecKind::Move { src, .. }, Operand::Src) => *src = dst,
        _ => unreachable!(),
    }
    Ok((Spec { kind, level: s.level }, mv))
}

/// Epilog result plus the induced init and store Moves.
pub struct EpilogSpecs {
    pub inner: Spec,
    pub init: Spec,
    pub store: Spec,
}

pub fn epilog(s: &Spec, acc: MemLevel, acc_elem: Option<ElemType>) -> Result<EpilogSpecs, DecompError> {
    let SpecKind::MatMul { a, b, c, .. } = &s.kind else {
        return Err(DecompError::NotMatMul { step: "epilog" });
    };
    if c.mem != MemLevel::GL {
        return Err(DecompError::CNotInGL { found: c.mem.full() });
    }
    if !matches!(acc, MemLevel::RF | MemLevel::FR { .. }) {
        return Err(DecompError::InvalidAccumulator { found: acc.full() });
    }
    if let Some(e) = acc_elem {
        if e != c.elem {
            return Err(DecompError::AccumulatorElem { given: e, c: c.elem });
        }
    }
    let accm = MatrixRef { mem: acc, layout: Layout::COL, ..c.clone() };
    let init = make_fill_spec(accm.clone(), s.level)?;
    let store = make_move_spec(accm.clone(), c.clone(), s.level)?;
    let inner = Spec {
        kind: SpecKind::MatMul { a: a.clone(), b: b.clone(), c: accm, accumulate: true },
        level: s.level,
    };
    Ok(EpilogSpecs { inner, init, store })
}

pub fn mma_tile(s: &Spec) -> Result<Spec, DecompError> {
    let expected = "MatMul(16,16,4k)(RF,RF,RF)(Warp) with F16 operands";
    let mismatch = || DecompError::PatternMismatch { expected: expected.into(), found: spec_short_form(s) };
    let SpecKind::MatMul { a, b, c, .. } = &s.kind else {
        return Err(mismatch());
    };
    let ok = s.level == ComputeLevel::Warp
        && (c.rows, c.cols) == (16, 16)
        && a.cols % 4 == 0
        && [a, b, c].iter().all(|m| m.mem == MemLevel::RF && m.elem == ElemType::F16);
    if !ok {
        return Err(mismatch());
    }
    let lane = |name: &str, r, cc, major| {
        MatrixRef::new(name, r, cc, ElemType::F16, MemLevel::RF, Layout::new(major, 0))
    };
    Ok(Spec {
        kind: SpecKind::LaneMma {
            a: lane("A", 1, 4, Major::RowMajor),
            b: lane("B", 4, 1, Major::ColMajor),
            c: lane("C", 1, 8, Major::ColMajor),
        },
        level: ComputeLevel::Thread,
    })
}

/// Binds a residual: the supplied micro-kernel when it matches, else a
/// built-in instruction.
pub fn done(
    s: &Spec,
    mk: Option<&MicroKernel>,
    instrs: &InstructionSet,
) -> Result<Executable, DecompError> {
    if let Some(mk) = mk {
        if mk.matches(s) {
            return Ok(Executable::MicroKernel(mk.clone()));
        }
        return Err(DecompError::MicroKernelMismatch { name: mk.name.clone(), spec: spec_short_form(s) });
    }
    match match_executable(s, instrs, &MicroKernelSet::new())? {
        Some(e) => Ok(e),
        None => Err(DecompError::NoExecutableMatch {
            spec: spec_short_form(s),
            nearest: nearest_patterns(s, instrs),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spec::kernel_matmul;

    #[test]
    fn tile_and_split_shapes() {
        let s = kernel_matmul(1024, 1024, 512).unwrap();
        let t = tile(&s, 128, 128).unwrap();
        assert_eq!(t.short_form(), "MatMul(128,128,512)(GL,GL,GL)(Kernel)");
        assert!(matches!(tile(&t, 3, 8), Err(DecompError::NonDivisible { .. })));
        assert!(matches!(split(&t, 8), Err(DecompError::SplitNeedsAccumulator { chunks: 64 })));
        assert_eq!(split(&t, 512).unwrap().short_form(), t.short_form());
    }

    #[test]
    fn load_direction() {
        let s = kernel_matmul(8, 8, 8).unwrap().with_level(ComputeLevel::Block);
        let (t, mv) = load(&s, Operand::A, MemLevel::SH, &LoadRefinements::default()).unwrap();
        assert_eq!(t.short_form(), "MatMul(8,8,8)(SH,GL,GL)(Block)");
        assert_eq!(mv.short_form(), "Move(8x8)(GL->SH)(Block)");
        assert!(matches!(
            load(&t, Operand::A, MemLevel::GL, &LoadRefinements::default()),
            Err(DecompError::UpwardLoad { .. })
        ));
        assert!(load(&t, Operand::Src, MemLevel::RF, &LoadRefinements::default()).is_err());
    }

    #[test]
    fn epilog_rules() {
        let s = kernel_matmul(8, 8, 8).unwrap().with_level(ComputeLevel::Block);
        let e = epilog(&s, MemLevel::RF, None).unwrap();
        assert_eq!(e.inner.short_form(), "MatMul(8,8,8)(GL,GL,RF)(Block)");
        assert_eq!(e.init.short_form(), "Move(8x8)(0->RF)(Block)");
        assert_eq!(e.store.short_form(), "Move(8x8)(RF->GL)(Block)");
        assert!(matches!(epilog(&e.inner, MemLevel::RF, None), Err(DecompError::CNotInGL { .. })));
        assert!(matches!(epilog(&s, MemLevel::SH, None), Err(DecompError::InvalidAccumulator { .. })));
    }

    #[test]
    fn store_source_stages_through_shared() {
        let s = kernel_matmul(8, 8, 8).unwrap().with_level(ComputeLevel::Block);
        let store = epilog(&s, MemLevel::RF, None).unwrap().store;
        let none = LoadRefinements::default();
        let (t, mv) = load(&store, Operand::Src, MemLevel::SH, &none).unwrap();
        assert_eq!(t.short_form(), "Move(8x8)(SH->GL)(Block)");
        assert_eq!(mv.short_form(), "Move(8x8)(RF->SH)(Block)");
        assert!(load(&store, Operand::Src, MemLevel::GL, &none).is_err());
        let rf = load(&s, Operand::A, MemLevel::RF, &none).unwrap().0;
        assert!(load(&rf, Operand::A, MemLevel::SH, &none).is_err());
    }

    #[test]
    fn builder_rejects_misplaced_refinement() {
        assert!(Chain::new().split(4).to(ComputeLevel::Block).done().is_err());
        assert!(Chain::new().tile(1, 1).pad(4).done().is_err());
    }
}
