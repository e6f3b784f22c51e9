//! Tree validation, elaboration traces and launch configuration.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::decomp::{self, DecompNode, LoadRefinements, PathSeg, TileRefinements};
use crate::error::DecompError;
use crate::index::{is_permutation, IndexExpr};
use crate::spec::{ComputeLevel, InstructionSet, Major, MemLevel, Spec, SpecKind};

pub const WARP_SIZE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LaunchConfig {
    /// (x, y) block counts.
    pub grid: (usize, usize),
    pub block_threads: usize,
}

impl LaunchConfig {
    pub fn warps(&self) -> usize {
        self.block_threads.div_ceil(WARP_SIZE)
    }

    pub fn blocks(&self) -> usize {
        self.grid.0 * self.grid.1
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEntry {
    pub depth: usize,
    pub label: String,
    pub spec: Spec,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    /// Index of the trace entry the failing step belongs to.
    pub step: usize,
    pub path: Vec<PathSeg>,
    pub label: String,
    pub error: DecompError,
}

impl core::fmt::Display for Violation {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "step {} ({}): {}", self.step, self.label, self.error)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidationReport {
    pub trace: Vec<TraceEntry>,
    pub violations: Vec<Violation>,
    pub launch: LaunchConfig,
    /// Shared memory per block, set when the tree is valid.
    pub shared_bytes: Option<usize>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

fn is_distributed(mem: MemLevel, level: ComputeLevel) -> Option<ComputeLevel> {
    match mem {
        MemLevel::RF if level > ComputeLevel::Thread => Some(ComputeLevel::Thread),
        MemLevel::FR { .. } if level > ComputeLevel::Warp => Some(ComputeLevel::Warp),
        _ => None,
    }
}

/// Lowest owner level among the spec's distributed operands.
pub fn distributed_owner(s: &Spec) -> Option<ComputeLevel> {
    s.operands().iter().filter_map(|m| is_distributed(m.mem, s.level)).max()
}

/// The decomposition used for a `_` nested Move.
///
/// Moves touching a distributed buffer repeat the parallel tilings of
/// `compute` so each unit only touches the part it owns. Moves into or out
/// of fragments are cut into 16×16 tiles.
pub fn default_move_decomp(mv: &Spec, compute: Option<&DecompNode>) -> DecompNode {
    let SpecKind::Move { src, dst, zero_fill } = &mv.kind else {
        return DecompNode::done();
    };
    let frag = dst.mem.is_fragment() || (!zero_fill && src.mem.is_fragment());
    let frag_tail = |rows: usize, cols: usize| {
        if frag && (rows, cols) != (16, 16) && rows % 16 == 0 && cols % 16 == 0 {
            DecompNode::Tile {
                rows: 16,
                cols: 16,
                refine: TileRefinements::default(),
                child: Box::new(DecompNode::done()),
            }
        } else {
            DecompNode::done()
        }
    };
    let Some(owner) = distributed_owner(mv) else {
        return frag_tail(dst.rows, dst.cols);
    };
    let mut tiles: Vec<(usize, usize, TileRefinements)> = Vec::new();
    let (mut rows, mut cols) = (dst.rows, dst.cols);
    let mut level = mv.level;
    let mut chain_level = compute.map(|_| mv.level);
    let mut node = compute;
    while let (Some(n), Some(cl)) = (node, chain_level) {
        if level <= owner {
            break;
        }
        if let DecompNode::Tile { rows: r, cols: c, refine, .. } = n {
            match refine.to {
                Some(to) if cl == level => {
                    if rows % r != 0 || cols % c != 0 {
                        break;
                    }
                    tiles.push((*r, *c, refine.clone()));
                    rows = *r;
                    cols = *c;
                    level = to;
                    chain_level = Some(to);
                }
                Some(to) => chain_level = Some(to),
                None if cl == level => break,
                None => {}
            }
        }
        node = n.child();
    }
    let mut out = frag_tail(rows, cols);
    for (r, c, refine) in tiles.into_iter().rev() {
        out = DecompNode::Tile { rows: r, cols: c, refine, child: Box::new(out) };
    }
    out
}

struct Walker<'a> {
    instrs: &'a InstructionSet,
    trace: Vec<TraceEntry>,
    violations: Vec<Violation>,
    grid: Option<(usize, usize)>,
    block_threads: Option<usize>,
    /// Main-chain-only pass used to fix the launch shape.
    main_only: bool,
}

struct Ctx<'t> {
    depth: usize,
    traced: bool,
    /// Compute chain mirrored by default moves on distributed buffers.
    compute: Option<&'t DecompNode>,
}

impl<'a> Walker<'a> {
    fn entry(&mut self, traced: bool, depth: usize, label: String, spec: &Spec) {
        if traced {
            self.trace.push(TraceEntry { depth, label, spec: spec.clone() });
        }
    }

    fn fail(&mut self, path: &[PathSeg], label: &str, error: DecompError) {
        if self.main_only {
            return;
        }
        let step = self.trace.len().saturating_sub(1);
        self.violations.push(Violation { step, path: path.to_vec(), label: label.to_string(), error });
    }

    fn check_units(
        &mut self,
        path: &[PathSeg],
        label: &str,
        from: ComputeLevel,
        to: ComputeLevel,
        nr: usize,
        nc: usize,
        refine: &TileRefinements,
    ) {
        let count = nr * nc;
        let major = refine.layout.unwrap_or(Major::RowMajor);
        let mismatch = |expected: usize| DecompError::UnitCountMismatch { level: to, expected, got: count };
        match (from, to) {
            (ComputeLevel::Kernel, ComputeLevel::Block) => {
                let dims = match major {
                    Major::RowMajor => (nr, nc),
                    Major::ColMajor => (nc, nr),
                };
                match self.grid {
                    None => self.grid = Some(dims),
                    Some(g) if g == dims => {}
                    Some(g) if refine.swizzle.is_some() && g.0 * g.1 == count => {}
                    Some(g) => self.fail(path, label, mismatch(g.0 * g.1)),
                }
            }
            (ComputeLevel::Block, ComputeLevel::Warp) => match self.block_threads {
                None => self.block_threads = Some(count * WARP_SIZE),
                Some(t) if t == count * WARP_SIZE => {}
                Some(t) => self.fail(path, label, mismatch(t / WARP_SIZE)),
            },
            (ComputeLevel::Block, ComputeLevel::Thread) => match self.block_threads {
                None => self.block_threads = Some(count),
                Some(t) if t == count => {}
                Some(t) => self.fail(path, label, mismatch(t)),
            },
            (ComputeLevel::Warp, ComputeLevel::Thread) => {
                if count != WARP_SIZE {
                    self.fail(path, label, mismatch(WARP_SIZE));
                }
            }
            _ => {}
        }
        if let Some(sw) = &refine.swizzle {
            if let Some(v) = sw.free_vars().into_iter().find(|v| v != "id") {
                self.fail(path, label, DecompError::SwizzleFreeVar { var: v });
            } else if !matches!(is_permutation(sw, count), Ok(true)) {
                self.fail(path, label, DecompError::SwizzleNotBijective { domain: count });
            }
        }
    }

    fn check_load_refinements(
        &mut self,
        path: &[PathSeg],
        label: &str,
        s: &Spec,
        target: MemLevel,
        r: &LoadRefinements,
        elem_bytes: usize,
    ) {
        if s.level == ComputeLevel::Kernel {
            self.fail(path, label, DecompError::StagingAtKernelLevel { step: "load" });
        }
        if target == MemLevel::RF && s.level > ComputeLevel::Warp {
            self.fail(path, label, DecompError::DistributedLoad { level: s.level });
        }
        if target.is_fragment() && s.level != ComputeLevel::Warp {
            self.fail(path, label, DecompError::FragmentLevel { level: s.level });
        }
        if r.pad > 0 && target != MemLevel::SH {
            self.fail(path, label, DecompError::PadOnNonShared);
        }
        if let Some(a) = r.align {
            if !a.is_power_of_two() || 256 % a != 0 || a < elem_bytes {
                self.fail(path, label, DecompError::InvalidAlign { align: a, min: elem_bytes });
            }
        }
    }

    fn nested(
        &mut self,
        mv: &Spec,
        explicit: Option<&DecompNode>,
        label: &str,
        path: &mut Vec<PathSeg>,
        seg: PathSeg,
        ctx: &Ctx<'_>,
    ) {
        if self.main_only {
            return;
        }
        let traced = ctx.traced && explicit.is_some();
        self.entry(traced, ctx.depth + 1, label.to_string(), mv);
        let default;
        let node = match explicit {
            Some(n) => n,
            None => {
                default = default_move_decomp(mv, ctx.compute);
                &default
            }
        };
        path.push(seg);
        let sub = Ctx { depth: ctx.depth + 1, traced, compute: ctx.compute };
        self.chain(mv.clone(), node, path, &sub);
        path.pop();
    }

    fn chain<'t>(&mut self, spec: Spec, node: &'t DecompNode, path: &mut Vec<PathSeg>, ctx: &Ctx<'t>) {
        let label = node.label();
        match node {
            DecompNode::Tile { rows, cols, refine, child } => {
                let next = match decomp::tile(&spec, *rows, *cols) {
                    Ok(s) => s,
                    Err(e) => return self.fail(path, &label, e),
                };
                self.entry(ctx.traced, ctx.depth, label.clone(), &next);
                let (tr, tc) = spec.tiled_shape();
                let (nr, nc) = (tr / rows, tc / cols);
                let next = match refine.to {
                    None => {
                        if refine.layout.is_some() {
                            self.fail(path, &label, DecompError::RefinementWithoutTo { refinement: "layout" });
                        }
                        if refine.swizzle.is_some() {
                            self.fail(path, &label, DecompError::RefinementWithoutTo { refinement: "swizzle" });
                        }
                        if let Some(owner) = distributed_owner(&spec) {
                            self.fail(
                                path,
                                &label,
                                DecompError::DistributedSequentialTile { level: spec.level, owner },
                            );
                        }
                        next
                    }
                    Some(level) => {
                        let to_label = format!(".to({})", level.name());
                        let moved = match decomp::assign_to(&next, level) {
                            Ok(s) => s,
                            Err(e) => return self.fail(path, &to_label, e),
                        };
                        self.entry(ctx.traced, ctx.depth, format!("  {}", to_label), &moved);
                        if level < ComputeLevel::Warp
                            && moved.operands().iter().any(|m| m.mem.is_fragment())
                        {
                            self.fail(path, &to_label, DecompError::FragmentLevel { level });
                        }
                        self.check_units(path, &to_label, spec.level, level, nr, nc, refine);
                        moved
                    }
                };
                path.push(PathSeg::Child);
                self.chain(next, child, path, ctx);
                path.pop();
            }
            DecompNode::Split { k, child, .. } => {
                let next = match decomp::split(&spec, *k) {
                    Ok(s) => s,
                    Err(e) => return self.fail(path, &label, e),
                };
                self.entry(ctx.traced, ctx.depth, label, &next);
                path.push(PathSeg::Child);
                self.chain(next, child, path, ctx);
                path.pop();
            }
            DecompNode::Load { operand, target, move_decomp, refine, child } => {
                let elem_bytes = decomp::operand_ref(&spec, *operand).map_or(1, |m| m.elem.size_bytes());
                self.check_load_refinements(path, &label, &spec, *target, refine, elem_bytes);
                let (next, mv) = match decomp::load(&spec, *operand, *target, refine) {
                    Ok(p) => p,
                    Err(e) => return self.fail(path, &label, e),
                };
                self.entry(ctx.traced, ctx.depth, label, &next);
                self.nested(&mv, move_decomp.as_deref(), "move", path, PathSeg::MoveDecomp, ctx);
                path.push(PathSeg::Child);
                self.chain(next, child, path, ctx);
                path.pop();
            }
            DecompNode::Epilog { acc, acc_elem, init, store, child } => {
                if spec.level == ComputeLevel::Kernel {
                    self.fail(path, &label, DecompError::StagingAtKernelLevel { step: "epilog" });
                }
                if acc.is_fragment() && spec.level < ComputeLevel::Warp {
                    self.fail(path, &label, DecompError::FragmentLevel { level: spec.level });
                }
                let e = match decomp::epilog(&spec, *acc, *acc_elem) {
                    Ok(e) => e,
                    Err(e) => return self.fail(path, &label, e),
                };
                self.entry(ctx.traced, ctx.depth, label, &e.inner);
                let nctx = Ctx { depth: ctx.depth, traced: ctx.traced, compute: Some(child) };
                self.nested(&e.init, init.as_deref(), "init", path, PathSeg::Init, &nctx);
                self.nested(&e.store, store.as_deref(), "store", path, PathSeg::Store, &nctx);
                path.push(PathSeg::Child);
                self.chain(e.inner, child, path, ctx);
                path.pop();
            }
            DecompNode::MmaTile { child } => {
                let next = match decomp::mma_tile(&spec) {
                    Ok(s) => s,
                    Err(e) => return self.fail(path, &label, e),
                };
                self.entry(ctx.traced, ctx.depth, label, &next);
                path.push(PathSeg::Child);
                self.chain(next, child, path, ctx);
                path.pop();
            }
            DecompNode::Done { micro_kernel } => {
                if let Err(e) = decomp::done(&spec, micro_kernel.as_ref(), self.instrs) {
                    self.fail(path, &label, e);
                }
            }
        }
    }
}

fn walk(root: &Spec, tree: &DecompNode, instrs: &InstructionSet) -> (Vec<TraceEntry>, Vec<Violation>, LaunchConfig) {
    let root_label = if root.is_matmul() { "mm" } else { "mv" };
    let mut first = Walker {
        instrs,
        trace: Vec::new(),
        violations: Vec::new(),
        grid: None,
        block_threads: None,
        main_only: true,
    };
    let ctx = Ctx { depth: 0, traced: false, compute: None };
    first.chain(root.clone(), tree, &mut Vec::new(), &ctx);
    let mut w = Walker { main_only: false, trace: Vec::new(), ..first };
    w.entry(true, 0, root_label.to_string(), root);
    let ctx = Ctx { depth: 0, traced: true, compute: None };
    w.chain(root.clone(), tree, &mut Vec::new(), &ctx);
    let launch = LaunchConfig { grid: w.grid.unwrap_or((1, 1)), block_threads: w.block_threads.unwrap_or(1) };
    (w.trace, w.violations, launch)
}

/// All violations in tree order, plus the launch shape and shared memory
/// footprint when the tree is valid.
pub fn validate(root: &Spec, tree: &DecompNode) -> ValidationReport {
    validate_with(root, tree, &InstructionSet::builtin())
}

pub fn validate_with(root: &Spec, tree: &DecompNode, instrs: &InstructionSet) -> ValidationReport {
    let (trace, mut violations, launch) = walk(root, tree, instrs);
    let mut shared_bytes = None;
    if violations.is_empty() {
        match crate::lower::lower_checked(root, tree, instrs, launch) {
            Ok(k) => shared_bytes = Some(k.buffers.shared_bytes()),
            Err(v) => violations.push(v),
        }
    }
    ValidationReport { trace, violations, launch, shared_bytes }
}

/// The intermediate specs, one per decomposition step.
pub fn elaborate(root: &Spec, tree: &DecompNode) -> Result<Vec<TraceEntry>, Violation> {
    let (trace, violations, _) = walk(root, tree, &InstructionSet::builtin());
    match violations.into_iter().next() {
        Some(v) => Err(v),
        None => Ok(trace),
    }
}

/// Renders a trace as `label // short-form` lines.
pub fn format_trace(trace: &[TraceEntry]) -> String {
    let mut out = String::new();
    for e in trace {
        let indent = "    ".repeat(e.depth);
        let label = format!("{}{}", indent, e.label);
        out.push_str(&format!("{:<18}// {}\n", label, e.spec.short_form()));
    }
    out
}

/// Unit grid coordinates of `unit` for an `nr × nc` parallel tiling.
pub fn tile_coordinates(
    unit: IndexExpr,
    nr: usize,
    nc: usize,
    major: Major,
    swizzle: Option<&IndexExpr>,
) -> (IndexExpr, IndexExpr) {
    use crate::index::cst;
    let u = match swizzle {
        Some(s) => s.substitute("id", &unit),
        None => unit,
    };
    let (r, c) = match major {
        Major::RowMajor => (u.clone().rem(cst(nr as i64)), u.div(cst(nr as i64))),
        Major::ColMajor => (u.clone().div(cst(nc as i64)), u.rem(cst(nc as i64))),
    };
    (r.simplify(), c.simplify())
}
