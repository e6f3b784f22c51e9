//! Lowering of a validated tree to a loop-nest program.
//!
//! Both the C emitter and the simulator consume this form, so whatever the
//! simulator checks is exactly what the emitted kernel does.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::decomp::{self, DecompNode, LoadRefinements, Operand, PathSeg, TileRefinements};
use crate::error::DecompError;
use crate::index::{cst, var, IndexExpr};
use crate::spec::{
    ComputeLevel, ElemType, Executable, InstructionSet, Layout, Major, MatrixRef, MemLevel,
    SimSemantics, Spec, SpecKind,
};
use crate::validate::{default_move_decomp, tile_coordinates, validate, LaunchConfig, Violation, WARP_SIZE};

pub const BLOCK_X: &str = "blockIdx.x";
pub const BLOCK_Y: &str = "blockIdx.y";
pub const THREAD_X: &str = "threadIdx.x";

pub type BufId = usize;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Buffer {
    pub id: BufId,
    pub name: String,
    /// `A`, `B` or `C` for operands of the root MatMul; `S`/`D` for a root Move.
    pub role: char,
    pub mem: MemLevel,
    pub elem: ElemType,
    pub rows: usize,
    pub cols: usize,
    pub layout: Layout,
    pub alloc_level: ComputeLevel,
    /// Kernel parameter index for root operands.
    pub param: Option<usize>,
    /// Owner level for arrays spread across units.
    pub owner: Option<ComputeLevel>,
    /// Elements per replica (SH), per thread (RF) or fragments per warp (FR).
    pub extent: usize,
    /// SH copies: one per unit at the allocation level.
    pub replicas: usize,
    pub replica_index: IndexExpr,
    pub align: usize,
    pub group: Option<usize>,
}

impl Buffer {
    pub fn bytes(&self) -> usize {
        self.extent * self.replicas * self.elem.size_bytes()
    }

    pub fn is_shared(&self) -> bool {
        self.param.is_none() && self.mem == MemLevel::SH
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AliasGroup {
    pub members: Vec<BufId>,
    pub bytes: usize,
    pub align: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BufferPlan {
    pub buffers: Vec<Buffer>,
    pub groups: Vec<AliasGroup>,
}

impl BufferPlan {
    /// Byte offset of each alias group inside the block's shared memory.
    pub fn group_offsets(&self) -> Vec<usize> {
        let mut off = 0usize;
        self.groups
            .iter()
            .map(|g| {
                let o = off.next_multiple_of(g.align);
                off = o + g.bytes;
                o
            })
            .collect()
    }

    pub fn shared_bytes(&self) -> usize {
        let offs = self.group_offsets();
        self.groups.iter().zip(offs).map(|(g, o)| o + g.bytes).max().unwrap_or(0)
    }

    pub fn by_name(&self, name: &str) -> Option<&Buffer> {
        self.buffers.iter().find(|b| b.name == name)
    }
}

/// One element (or fragment) reference.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Access {
    pub buf: BufId,
    /// Physical index into the buffer's storage.
    pub index: IndexExpr,
    /// Column-major logical index into the buffer's full shape.
    pub logical: IndexExpr,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ExecOp {
    Fma { c: Access, a: Access, b: Access },
    Copy { dst: Access, src: Access },
    Zero { dst: Access },
    WmmaLoad { frag: Access, src: Access, ld: usize, major: Major },
    WmmaStore { dst: Access, frag: Access, ld: usize, major: Major },
    WmmaFill { frag: Access },
    WmmaMma { c: Access, a: Access, b: Access },
    Hmma { c: Access, a: Access, b: Access },
    MicroKernel { name: String, dims: (usize, usize, usize), operands: Vec<(char, Access, usize, usize)> },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Exec {
    pub op: ExecOp,
    pub instr: String,
    pub semantics: SimSemantics,
    pub template: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Stmt {
    Loop { var: usize, count: usize, unroll: bool, body: Vec<Stmt> },
    /// `for (var = start; var < end; var += step)`, one iteration stream
    /// per participant.
    Coop { var: usize, start: IndexExpr, step: usize, end: usize, body: Vec<Stmt> },
    Sync,
    Exec(Exec),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Kernel {
    pub root: Spec,
    pub launch: LaunchConfig,
    pub buffers: BufferPlan,
    pub body: Vec<Stmt>,
    /// Variable names by slot. Slots 0..3 are the block and thread ids.
    pub vars: Vec<String>,
}

impl Kernel {
    pub fn slot_of(&self, name: &str) -> Option<usize> {
        self.vars.iter().position(|v| v == name)
    }

    pub fn uses_wmma(&self) -> bool {
        fn any(s: &[Stmt]) -> bool {
            s.iter().any(|s| match s {
                Stmt::Loop { body, .. } | Stmt::Coop { body, .. } => any(body),
                Stmt::Exec(e) => e.instr.starts_with("WMMA"),
                Stmt::Sync => false,
            })
        }
        any(&self.body)
    }

    pub fn params(&self) -> Vec<&Buffer> {
        let mut p: Vec<&Buffer> = self.buffers.buffers.iter().filter(|b| b.param.is_some()).collect();
        p.sort_by_key(|b| b.param);
        p
    }

    pub fn output(&self) -> &Buffer {
        self.params().pop().expect("kernel has parameters")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum LowerError {
    #[error("invalid decomposition: {}", .0.first().map(|v| v.to_string()).unwrap_or_default())]
    Invalid(Vec<Violation>),
    #[error("root spec must be at Kernel level with operands in GL")]
    RootNotGlobal,
}

/// Validates and lowers `tree`.
pub fn lower(root: &Spec, tree: &DecompNode) -> Result<Kernel, LowerError> {
    if root.level != ComputeLevel::Kernel || root.operands().iter().any(|m| m.mem != MemLevel::GL) {
        return Err(LowerError::RootNotGlobal);
    }
    let report = validate(root, tree);
    if !report.is_ok() {
        return Err(LowerError::Invalid(report.violations));
    }
    lower_checked(root, tree, &InstructionSet::builtin(), report.launch).map_err(|v| LowerError::Invalid(vec![v]))
}

#[derive(Clone, Debug)]
struct View {
    buf: BufId,
    row: IndexExpr,
    col: IndexExpr,
    lrow: IndexExpr,
    lcol: IndexExpr,
    footprint: Option<(usize, usize)>,
}

impl View {
    fn root(buf: BufId) -> View {
        View { buf, row: cst(0), col: cst(0), lrow: cst(0), lcol: cst(0), footprint: None }
    }

    fn shift(&mut self, dr: &IndexExpr, dc: &IndexExpr, local: bool) {
        self.row = self.row.clone().add(dr.clone()).simplify();
        self.col = self.col.clone().add(dc.clone()).simplify();
        if local {
            self.lrow = self.lrow.clone().add(dr.clone()).simplify();
            self.lcol = self.lcol.clone().add(dc.clone()).simplify();
        }
    }
}

/// Operand slots: 0 = A / source, 1 = B, 2 = C / destination.
#[derive(Clone, Debug)]
struct Frame {
    spec: Spec,
    views: [Option<View>; 3],
}

#[derive(Clone, Copy, Debug)]
struct GroupPlan {
    pos: usize,
    pre_at: Option<usize>,
    post_at: Option<usize>,
}

struct Lowerer<'a> {
    instrs: &'a InstructionSet,
    launch: LaunchConfig,
    bufs: Vec<Buffer>,
    groups: Vec<AliasGroup>,
    vars: Vec<String>,
    open_loops: Vec<usize>,
    loop_counter: usize,
    loops_used: Vec<BTreeSet<usize>>,
    live: Vec<Vec<BufId>>,
    path: Vec<PathSeg>,
}

fn slot_for(kind: &SpecKind, op: Operand) -> usize {
    match (kind, op) {
        (_, Operand::B) => 1,
        _ => 0,
    }
}

impl<'a> Lowerer<'a> {
    fn new_var(&mut self, prefix: &str) -> usize {
        let name = format!("{}{}", prefix, self.vars.len());
        self.vars.push(name);
        self.vars.len() - 1
    }

    fn var_expr(&self, slot: usize) -> IndexExpr {
        var(&self.vars[slot])
    }

    fn tid(&self) -> IndexExpr {
        if self.launch.block_threads == 1 {
            cst(0)
        } else {
            var(THREAD_X)
        }
    }

    fn warp_id(&self) -> IndexExpr {
        if self.launch.warps() <= 1 {
            cst(0)
        } else {
            self.tid().div(cst(WARP_SIZE as i64))
        }
    }

    fn lane(&self) -> IndexExpr {
        if self.launch.block_threads <= WARP_SIZE {
            self.tid()
        } else {
            self.tid().rem(cst(WARP_SIZE as i64))
        }
    }

    fn block_xy(&self) -> (IndexExpr, IndexExpr) {
        let (gx, gy) = self.launch.grid;
        let bx = if gx > 1 { var(BLOCK_X) } else { cst(0) };
        let by = if gy > 1 { var(BLOCK_Y) } else { cst(0) };
        (bx, by)
    }

    fn block_linear(&self) -> IndexExpr {
        let (bx, by) = self.block_xy();
        bx.add(by.mul(cst(self.launch.grid.0 as i64))).simplify()
    }

    /// (participant id, participant count) for cooperative work at `level`.
    fn participants(&self, level: ComputeLevel) -> (IndexExpr, usize) {
        match level {
            ComputeLevel::Thread => (cst(0), 1),
            ComputeLevel::Warp => (self.lane(), self.launch.block_threads.min(WARP_SIZE)),
            ComputeLevel::Block => (self.tid(), self.launch.block_threads),
            ComputeLevel::Kernel => {
                let bt = self.launch.block_threads;
                (
                    self.block_linear().mul(cst(bt as i64)).add(self.tid()).simplify(),
                    bt * self.launch.blocks(),
                )
            }
        }
    }

    fn units_at(&self, level: ComputeLevel) -> (usize, IndexExpr) {
        match level {
            ComputeLevel::Warp => (self.launch.warps(), self.warp_id()),
            ComputeLevel::Thread => (self.launch.block_threads, self.tid()),
            _ => (1, cst(0)),
        }
    }

    fn distributed(mem: MemLevel, level: ComputeLevel) -> Option<ComputeLevel> {
        match mem {
            MemLevel::RF if level > ComputeLevel::Thread => Some(ComputeLevel::Thread),
            MemLevel::FR { .. } if level > ComputeLevel::Warp => Some(ComputeLevel::Warp),
            _ => None,
        }
    }

    fn alloc(
        &mut self,
        role: char,
        m: &MatrixRef,
        level: ComputeLevel,
        align: usize,
    ) -> BufId {
        let id = self.bufs.len();
        let name = format!("{}_{}_{}", role, m.mem.short(), id);
        let owner = Self::distributed(m.mem, level);
        let (replicas, replica_index, extent) = match m.mem {
            MemLevel::SH => {
                let (n, idx) = self.units_at(level);
                (n, idx, m.layout.extent(m.rows, m.cols))
            }
            MemLevel::FR { .. } => (1, cst(0), if owner.is_some() { 0 } else { (m.rows / 16) * (m.cols / 16) }),
            _ => (1, cst(0), if owner.is_some() { 0 } else { m.rows * m.cols }),
        };
        self.bufs.push(Buffer {
            id,
            name,
            role,
            mem: m.mem,
            elem: m.elem,
            rows: m.rows,
            cols: m.cols,
            layout: m.layout,
            alloc_level: level,
            param: None,
            owner,
            extent,
            replicas,
            replica_index,
            align,
            group: None,
        });
        self.loops_used.push(BTreeSet::new());
        id
    }

    fn touch(&mut self, buf: BufId) {
        let open = self.open_loops.clone();
        self.loops_used[buf].extend(open);
    }

    fn is_dead(&self, buf: BufId) -> bool {
        !self.live.iter().any(|f| f.contains(&buf))
            && !self.open_loops.iter().any(|l| self.loops_used[buf].contains(l))
    }

    fn assign_group(&mut self, buf: BufId, reuse: bool) -> Result<(), DecompError> {
        let bytes = self.bufs[buf].bytes();
        let align = self.bufs[buf].align;
        let gid = if reuse {
            let found = self.groups.iter().position(|g| g.members.iter().all(|&m| self.is_dead(m)));
            let Some(g) = found else {
                return Err(DecompError::NoReusableBuffer);
            };
            g
        } else {
            self.groups.push(AliasGroup { members: Vec::new(), bytes: 0, align: 1 });
            self.groups.len() - 1
        };
        let g = &mut self.groups[gid];
        g.members.push(buf);
        g.bytes = g.bytes.max(bytes);
        g.align = g.align.max(align);
        self.bufs[buf].group = Some(gid);
        Ok(())
    }

    fn err(&self, label: String, error: DecompError) -> Violation {
        Violation { step: 0, path: self.path.clone(), label, error }
    }

    /// Builds the reference to element (`dr`, `dc`) of `view`.
    fn access(
        &mut self,
        view: &View,
        dr: &IndexExpr,
        dc: &IndexExpr,
        level: ComputeLevel,
        coop: Option<(&IndexExpr, usize, usize)>,
    ) -> Access {
        self.touch(view.buf);
        let b = &self.bufs[view.buf];
        let row = view.row.clone().add(dr.clone()).simplify();
        let col = view.col.clone().add(dc.clone()).simplify();
        let logical = row.clone().add(col.clone().mul(cst(b.rows as i64))).simplify();
        let layout_index = |l: Layout, rows: usize, cols: usize, r: IndexExpr, c: IndexExpr| {
            let ld = cst(l.stride(rows, cols) as i64);
            match l.major {
                Major::RowMajor => r.mul(ld).add(c),
                Major::ColMajor => c.mul(ld).add(r),
            }
        };
        let mut grow = None;
        let index = match (b.mem, b.owner) {
            (MemLevel::FR { .. }, owner) => {
                let (r, c, fr) = match (owner, view.footprint) {
                    (Some(_), Some((fr, _))) => (
                        view.lrow.clone().add(dr.clone()),
                        view.lcol.clone().add(dc.clone()),
                        fr,
                    ),
                    _ => (row.clone(), col.clone(), b.rows),
                };
                let idx = r.div(cst(16)).add(c.div(cst(16)).mul(cst((fr / 16) as i64)));
                if let (Some(_), Some((fr, fc))) = (owner, view.footprint) {
                    grow = Some((fr / 16) * (fc / 16));
                }
                idx
            }
            (MemLevel::RF, Some(owner)) => {
                if level <= owner {
                    let (fr, fc) = view.footprint.unwrap_or((1, 1));
                    grow = Some(fr * fc);
                    view.lrow.clone().add(dr.clone()).add(view.lcol.clone().add(dc.clone()).mul(cst(fr as i64)))
                } else if let Some((e, p, total)) = coop {
                    grow = Some(total.div_ceil(p));
                    e.clone().div(cst(p as i64))
                } else {
                    grow = Some(b.rows * b.cols);
                    logical.clone()
                }
            }
            (MemLevel::SH, _) if b.param.is_none() => {
                let base = b.replica_index.clone().mul(cst(b.extent as i64));
                layout_index(b.layout, b.rows, b.cols, row.clone(), col.clone()).add(base)
            }
            _ => layout_index(b.layout, b.rows, b.cols, row.clone(), col.clone()),
        };
        if let Some(g) = grow {
            let b = &mut self.bufs[view.buf];
            b.extent = b.extent.max(g);
        }
        Access { buf: view.buf, index: index.simplify(), logical }
    }

    fn chain(
        &mut self,
        frame: Frame,
        node: &DecompNode,
        compute: Option<&DecompNode>,
        group: Option<GroupPlan>,
        out: &mut Vec<Stmt>,
    ) -> Result<(), Violation> {
        let ids: Vec<BufId> = frame.views.iter().flatten().map(|v| v.buf).collect();
        self.live.push(ids);
        let r = self.chain_inner(frame, node, compute, group, out);
        self.live.pop();
        r
    }

    fn child(
        &mut self,
        frame: Frame,
        node: &DecompNode,
        compute: Option<&DecompNode>,
        group: Option<GroupPlan>,
        out: &mut Vec<Stmt>,
    ) -> Result<(), Violation> {
        self.path.push(PathSeg::Child);
        let r = self.chain(frame, node, compute, group, out);
        self.path.pop();
        r
    }

    fn chain_inner(
        &mut self,
        frame: Frame,
        node: &DecompNode,
        compute: Option<&DecompNode>,
        group: Option<GroupPlan>,
        out: &mut Vec<Stmt>,
    ) -> Result<(), Violation> {
        let bad = |e: DecompError| Violation { step: 0, path: Vec::new(), label: node.label(), error: e };
        match node {
            DecompNode::Tile { rows, cols, refine, child } => {
                let next = decomp::tile(&frame.spec, *rows, *cols).map_err(bad)?;
                self.tile(frame, next, *rows, *cols, refine, child, compute, out)
            }
            DecompNode::Split { k, refine, child } => {
                let next = decomp::split(&frame.spec, *k).map_err(bad)?;
                let (_, _, kk) = frame.spec.matmul_dims().expect("split on MatMul");
                let chunks = kk / k;
                let (kv, body_target) = if chunks > 1 {
                    let v = self.new_var("k");
                    (self.var_expr(v), Some(v))
                } else {
                    (cst(0), None)
                };
                let off = kv.mul(cst(*k as i64));
                let mut f = Frame { spec: next, views: frame.views.clone() };
                if let Some(a) = &mut f.views[0] {
                    a.shift(&cst(0), &off, false);
                }
                if let Some(b) = &mut f.views[1] {
                    b.shift(&off, &cst(0), false);
                }
                let mut body = Vec::new();
                if let Some(v) = body_target {
                    self.loop_counter += 1;
                    self.open_loops.push(self.loop_counter);
                    self.child(f, child, compute, None, &mut body)?;
                    self.open_loops.pop();
                    if refine.sync {
                        body.push(Stmt::Sync);
                    }
                    out.push(Stmt::Loop { var: v, count: chunks, unroll: refine.unroll, body });
                } else {
                    self.child(f, child, compute, None, out)?;
                    if refine.sync {
                        out.push(Stmt::Sync);
                    }
                }
                Ok(())
            }
            DecompNode::Load { operand, target, move_decomp, refine, child } => {
                self.load(frame, *operand, *target, move_decomp.as_deref(), refine, child, compute, group, out)
            }
            DecompNode::Epilog { acc, acc_elem, init, store, child } => {
                let e = decomp::epilog(&frame.spec, *acc, *acc_elem).map_err(bad)?;
                let SpecKind::MatMul { c: accm, .. } = &e.inner.kind else { unreachable!() };
                let elem = accm.elem;
                let acc_buf = self.alloc('C', accm, frame.spec.level, elem.size_bytes());
                let acc_view = View::root(acc_buf);
                let c_view = frame.views[2].clone();
                let init_frame = Frame { spec: e.init.clone(), views: [None, None, Some(acc_view.clone())] };
                let store_frame = Frame { spec: e.store.clone(), views: [Some(acc_view.clone()), None, c_view] };
                self.nested(init_frame, init.as_deref(), Some(child), PathSeg::Init, out)?;
                let inner = Frame {
                    spec: e.inner,
                    views: [frame.views[0].clone(), frame.views[1].clone(), Some(acc_view)],
                };
                self.child(inner, child, compute, None, out)?;
                self.nested(store_frame, store.as_deref(), Some(child), PathSeg::Store, out)
            }
            DecompNode::MmaTile { child } => {
                let next = decomp::mma_tile(&frame.spec).map_err(bad)?;
                let (_, _, kk) = frame.spec.matmul_dims().expect("mmaTile on MatMul");
                let exe = decomp::done(&next, None, self.instrs).map_err(bad)?;
                let _ = child;
                let (steps, kv) = if kk > 4 {
                    let v = self.new_var("k");
                    (Some(v), self.var_expr(v))
                } else {
                    (None, cst(0))
                };
                let (pid, p) = self.participants(frame.spec.level);
                let [Some(a), Some(b), Some(c)] = frame.views.clone() else { unreachable!() };
                let ka = kv.clone().mul(cst(4));
                let aa = self.access(&a, &cst(0), &ka, frame.spec.level, Some((&pid, p, 16 * kk)));
                let bb = self.access(&b, &ka, &cst(0), frame.spec.level, Some((&pid, p, 16 * kk)));
                let cc = self.access(&c, &cst(0), &cst(0), frame.spec.level, Some((&pid, p, 256)));
                // per lane: a 1x4 A row and 4x1 B column for every k-step, a 1x8 C row
                for (acc, n) in [(&aa, kk), (&bb, kk), (&cc, 8)] {
                    let buf = &mut self.bufs[acc.buf];
                    buf.extent = buf.extent.max(n);
                }
                let aa = Access { index: kv.clone().mul(cst(4)).simplify(), ..aa };
                let bb = Access { index: kv.clone().mul(cst(4)).simplify(), ..bb };
                let cc = Access { index: cst(0), ..cc };
                let stmt = self.exec(&exe, ExecOp::Hmma { c: cc, a: aa, b: bb });
                match steps {
                    Some(v) => out.push(Stmt::Loop { var: v, count: kk / 4, unroll: false, body: vec![stmt] }),
                    None => out.push(stmt),
                }
                Ok(())
            }
            DecompNode::Done { micro_kernel } => {
                let exe = decomp::done(&frame.spec, micro_kernel.as_ref(), self.instrs).map_err(bad)?;
                self.done(&frame, &exe, out);
                Ok(())
            }
        }
    }

    fn nested(
        &mut self,
        frame: Frame,
        explicit: Option<&DecompNode>,
        compute: Option<&DecompNode>,
        seg: PathSeg,
        out: &mut Vec<Stmt>,
    ) -> Result<(), Violation> {
        let default;
        let node = match explicit {
            Some(n) => n,
            None => {
                default = default_move_decomp(&frame.spec, compute);
                &default
            }
        };
        self.path.push(seg);
        let r = self.chain(frame, node, compute, None, out);
        self.path.pop();
        r
    }

    #[allow(clippy::too_many_arguments)]
    fn tile(
        &mut self,
        frame: Frame,
        mut next: Spec,
        r: usize,
        c: usize,
        refine: &TileRefinements,
        child: &DecompNode,
        compute: Option<&DecompNode>,
        out: &mut Vec<Stmt>,
    ) -> Result<(), Violation> {
        let (tr, tc) = frame.spec.tiled_shape();
        let (nr, nc) = (tr / r, tc / c);
        let is_mm = frame.spec.is_matmul();
        let mut views = frame.views.clone();
        let shift_all = |views: &mut [Option<View>; 3], dr: &IndexExpr, dc: &IndexExpr, local: bool| {
            for (i, v) in views.iter_mut().enumerate() {
                let Some(v) = v else { continue };
                let (vr, vc) = match (is_mm, i) {
                    (true, 0) => (dr.clone(), cst(0)),
                    (true, 1) => (cst(0), dc.clone()),
                    _ => (dr.clone(), dc.clone()),
                };
                v.shift(&vr, &vc, local);
            }
        };
        match refine.to {
            Some(level) => {
                let major = refine.layout.unwrap_or(Major::RowMajor);
                let (row_t, col_t) = if frame.spec.level == ComputeLevel::Kernel && refine.swizzle.is_none() {
                    let (bx, by) = self.block_xy();
                    match major {
                        Major::RowMajor => (bx, by),
                        Major::ColMajor => (by, bx),
                    }
                } else {
                    let unit = match (frame.spec.level, level) {
                        (ComputeLevel::Kernel, _) => self.block_linear(),
                        (ComputeLevel::Block, ComputeLevel::Warp) => self.warp_id(),
                        (ComputeLevel::Block, _) => self.tid(),
                        _ => self.lane(),
                    };
                    tile_coordinates(unit, nr, nc, major, refine.swizzle.as_ref())
                };
                let dr = row_t.mul(cst(r as i64)).simplify();
                let dc = col_t.mul(cst(c as i64)).simplify();
                shift_all(&mut views, &dr, &dc, false);
                next.level = level;
                for (i, v) in views.iter_mut().enumerate() {
                    let Some(v) = v else { continue };
                    let b = &self.bufs[v.buf];
                    if let Some(owner) = b.owner {
                        if level <= owner && v.footprint.is_none() {
                            let m = next.operands()[if is_mm { i } else { i.min(1) }].clone();
                            v.footprint = Some((m.rows, m.cols));
                        }
                    }
                }
                self.child(Frame { spec: next, views }, child, compute, None, out)
            }
            None => {
                let rv = (nr > 1).then(|| self.new_var("r"));
                let cv = (nc > 1).then(|| self.new_var("c"));
                let dr = rv.map_or(cst(0), |v| self.var_expr(v).mul(cst(r as i64)));
                let dc = cv.map_or(cst(0), |v| self.var_expr(v).mul(cst(c as i64)));
                shift_all(&mut views, &dr, &dc, true);
                let looping = rv.is_some() || cv.is_some();
                if looping {
                    self.loop_counter += 1;
                    self.open_loops.push(self.loop_counter);
                }
                let mut body = Vec::new();
                self.child(Frame { spec: next, views }, child, compute, None, &mut body)?;
                if looping {
                    self.open_loops.pop();
                }
                if let Some(v) = cv {
                    body = vec![Stmt::Loop { var: v, count: nc, unroll: refine.unroll, body }];
                }
                if let Some(v) = rv {
                    body = vec![Stmt::Loop { var: v, count: nr, unroll: refine.unroll, body }];
                }
                out.extend(body);
                Ok(())
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn load(
        &mut self,
        frame: Frame,
        operand: Operand,
        target: MemLevel,
        move_decomp: Option<&DecompNode>,
        refine: &LoadRefinements,
        child: &DecompNode,
        compute: Option<&DecompNode>,
        group: Option<GroupPlan>,
        out: &mut Vec<Stmt>,
    ) -> Result<(), Violation> {
        let label = format!("load({},{})", operand, target.short());
        let (next, mv) = decomp::load(&frame.spec, operand, target, refine)
            .map_err(|e| self.err(label.clone(), e))?;
        let slot = slot_for(&frame.spec.kind, operand);
        let src_view = frame.views[slot].clone().expect("operand view");
        let src_role = self.bufs[src_view.buf].role;
        let SpecKind::Move { dst, .. } = &mv.kind else { unreachable!() };
        let align = refine.align.unwrap_or(dst.elem.size_bytes());
        let buf = self.alloc(src_role, dst, frame.spec.level, align);

        let group = if target == MemLevel::SH {
            let mut plan = group.unwrap_or_else(|| self.group_plan(target, refine, child));
            if group.is_some() {
                plan.pos += 1;
            }
            Some(plan)
        } else {
            None
        };
        if target == MemLevel::SH {
            self.assign_group(buf, refine.reuse_buffer).map_err(|e| self.err(label.clone(), e))?;
        }
        if let Some(p) = group {
            if p.pre_at == Some(p.pos) && out.last() != Some(&Stmt::Sync) {
                out.push(Stmt::Sync);
            }
        }
        let dst_view = View::root(buf);
        let move_frame = Frame { spec: mv.clone(), views: [Some(src_view), None, Some(dst_view.clone())] };
        self.live.push(vec![buf]);
        let r = self.nested(move_frame, move_decomp, compute, PathSeg::MoveDecomp, out);
        self.live.pop();
        r?;
        if let Some(p) = group {
            if p.post_at == Some(p.pos) {
                out.push(Stmt::Sync);
            }
        }
        let mut views = frame.views.clone();
        views[slot] = Some(dst_view);
        let pass = match child {
            DecompNode::Load { target: MemLevel::SH, .. } => group,
            _ => None,
        };
        self.child(Frame { spec: next, views }, child, compute, pass, out)
    }

    /// Barrier placement for a run of directly nested SH loads: one barrier
    /// after the last synchronised copy, and one before the first when the
    /// run sits in a sequential loop or reuses a buffer.
    fn group_plan(&self, target: MemLevel, head: &LoadRefinements, child: &DecompNode) -> GroupPlan {
        let mut members = vec![*head];
        let mut node = child;
        let _ = target;
        while let DecompNode::Load { target: MemLevel::SH, refine, child, .. } = node {
            members.push(*refine);
            node = child;
        }
        let synced: Vec<usize> = (0..members.len()).filter(|&i| !members[i].no_sync).collect();
        let needs_pre = !self.open_loops.is_empty() || members.iter().any(|m| m.reuse_buffer);
        GroupPlan {
            pos: 0,
            pre_at: if needs_pre { synced.first().copied() } else { None },
            post_at: synced.last().copied(),
        }
    }

    fn exec(&self, exe: &Executable, op: ExecOp) -> Stmt {
        let (instr, semantics, template) = match exe {
            Executable::Instruction(i) => (i.name.clone(), i.semantics, i.emission.clone()),
            Executable::MicroKernel(m) => (m.name.clone(), SimSemantics::Opaque, m.body.clone()),
        };
        Stmt::Exec(Exec { op, instr, semantics, template })
    }

    fn done(&mut self, frame: &Frame, exe: &Executable, out: &mut Vec<Stmt>) {
        let level = frame.spec.level;
        let z = cst(0);
        if let Executable::MicroKernel(mk) = exe {
            let mut operands = Vec::new();
            let dims = match &frame.spec.kind {
                SpecKind::MatMul { c, a, .. } => (c.rows, c.cols, a.cols),
                other => {
                    let (r, c) = match other {
                        SpecKind::Move { dst, .. } => (dst.rows, dst.cols),
                        _ => (0, 0),
                    };
                    (r, c, 0)
                }
            };
            let roles = if frame.spec.is_matmul() { ['A', 'B', 'C'] } else { ['S', '-', 'D'] };
            for (i, v) in frame.views.iter().enumerate() {
                let Some(v) = v else { continue };
                let acc = self.access(v, &z, &z, level, None);
                let b = &self.bufs[v.buf];
                let ld = b.layout.stride(b.rows, b.cols);
                let (rs, cs) = match b.layout.major {
                    Major::RowMajor => (ld, 1),
                    Major::ColMajor => (1, ld),
                };
                operands.push((roles[i], acc, rs, cs));
            }
            let name = mk.name.clone();
            out.push(self.exec(exe, ExecOp::MicroKernel { name, dims, operands }));
            return;
        }
        let Executable::Instruction(ins) = exe else { unreachable!() };
        match ins.semantics {
            SimSemantics::Fma => {
                let [Some(a), Some(b), Some(c)] = frame.views.clone() else { unreachable!() };
                let aa = self.access(&a, &z, &z, level, None);
                let bb = self.access(&b, &z, &z, level, None);
                let cc = self.access(&c, &z, &z, level, None);
                out.push(self.exec(exe, ExecOp::Fma { c: cc, a: aa, b: bb }));
            }
            SimSemantics::WmmaMma => {
                let [Some(a), Some(b), Some(c)] = frame.views.clone() else { unreachable!() };
                let aa = self.access(&a, &z, &z, level, None);
                let bb = self.access(&b, &z, &z, level, None);
                let cc = self.access(&c, &z, &z, level, None);
                out.push(self.exec(exe, ExecOp::WmmaMma { c: cc, a: aa, b: bb }));
            }
            SimSemantics::WmmaLoad => {
                let [Some(s), _, Some(d)] = frame.views.clone() else { unreachable!() };
                let src = self.access(&s, &z, &z, level, None);
                let frag = self.access(&d, &z, &z, level, None);
                let b = &self.bufs[s.buf];
                let (ld, major) = (b.layout.stride(b.rows, b.cols), b.layout.major);
                out.push(self.exec(exe, ExecOp::WmmaLoad { frag, src, ld, major }));
            }
            SimSemantics::WmmaStore => {
                let [Some(s), _, Some(d)] = frame.views.clone() else { unreachable!() };
                let frag = self.access(&s, &z, &z, level, None);
                let dst = self.access(&d, &z, &z, level, None);
                let b = &self.bufs[d.buf];
                let (ld, major) = (b.layout.stride(b.rows, b.cols), b.layout.major);
                out.push(self.exec(exe, ExecOp::WmmaStore { dst, frag, ld, major }));
            }
            SimSemantics::WmmaFill => {
                let d = frame.views[2].clone().expect("fill destination");
                let frag = self.access(&d, &z, &z, level, None);
                out.push(self.exec(exe, ExecOp::WmmaFill { frag }));
            }
            SimSemantics::Copy | SimSemantics::Zero => {
                let (rows, cols) = frame.spec.tiled_shape();
                let total = rows * cols;
                let (pid, p) = self.participants(level);
                let ev = if total > 1 { Some(self.new_var("e")) } else { None };
                let e = ev.map_or(cst(0), |v| self.var_expr(v));
                let dr = e.clone().rem(cst(rows as i64)).simplify();
                let dc = e.clone().div(cst(rows as i64)).simplify();
                let coop_e = if p > 1 || ev.is_some() { e.clone() } else { cst(0) };
                let coop = Some((&coop_e, p, total));
                let d = frame.views[2].clone().expect("move destination");
                let dst = self.access(&d, &dr, &dc, level, coop);
                let op = match (&frame.views[0], ins.semantics) {
                    (Some(s), SimSemantics::Copy) => {
                        let src = self.access(s, &dr, &dc, level, coop);
                        ExecOp::Copy { dst, src }
                    }
                    _ => ExecOp::Zero { dst },
                };
                let stmt = self.exec(exe, op);
                match ev {
                    Some(v) if p > 1 => out.push(Stmt::Coop { var: v, start: pid, step: p, end: total, body: vec![stmt] }),
                    Some(v) => out.push(Stmt::Loop { var: v, count: total, unroll: false, body: vec![stmt] }),
                    None if p > 1 => {
                        let v = self.new_var("e");
                        out.push(Stmt::Coop { var: v, start: pid, step: p, end: 1, body: vec![stmt] })
                    }
                    None => out.push(stmt),
                }
            }
            SimSemantics::Opaque => {
                let z = cst(0);
                let views: Vec<View> = frame.views.iter().flatten().cloned().collect();
                let acc: Vec<Access> = views.iter().map(|v| self.access(v, &z, &z, level, None)).collect();
                let op = ExecOp::Hmma { a: acc[0].clone(), b: acc[1].clone(), c: acc[2].clone() };
                out.push(self.exec(exe, op));
            }
        }
    }
}

/// Lowers a tree that has already passed the validation walk.
pub fn lower_checked(
    root: &Spec,
    tree: &DecompNode,
    instrs: &InstructionSet,
    launch: LaunchConfig,
) -> Result<Kernel, Violation> {
    let mut l = Lowerer {
        instrs,
        launch,
        bufs: Vec::new(),
        groups: Vec::new(),
        vars: vec![BLOCK_X.to_string(), BLOCK_Y.to_string(), THREAD_X.to_string()],
        open_loops: Vec::new(),
        loop_counter: 0,
        loops_used: Vec::new(),
        live: Vec::new(),
        path: Vec::new(),
    };
    let roles: &[char] = if root.is_matmul() { &['A', 'B', 'C'] } else { &['S', 'D'] };
    let mut views: [Option<View>; 3] = [None, None, None];
    for (i, (m, role)) in root.operands().into_iter().zip(roles).enumerate() {
        let id = l.bufs.len();
        l.bufs.push(Buffer {
            id,
            name: role.to_string(),
            role: *role,
            mem: m.mem,
            elem: m.elem,
            rows: m.rows,
            cols: m.cols,
            layout: m.layout,
            alloc_level: root.level,
            param: Some(i),
            owner: None,
            extent: m.layout.extent(m.rows, m.cols),
            replicas: 1,
            replica_index: cst(0),
            align: m.elem.size_bytes(),
            group: None,
        });
        l.loops_used.push(BTreeSet::new());
        let slot = if root.is_matmul() { i } else { [0, 2][i] };
        views[slot] = Some(View::root(id));
    }
    if let SpecKind::Move { zero_fill: true, .. } = root.kind {
        views[0] = None;
    }
    let mut body = Vec::new();
    l.chain(Frame { spec: root.clone(), views }, tree, None, None, &mut body)?;
    Ok(Kernel {
        root: root.clone(),
        launch,
        buffers: BufferPlan { buffers: l.bufs, groups: l.groups },
        body,
        vars: l.vars,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomp::Chain;
    use crate::spec::kernel_matmul;
    use ComputeLevel::*;

    fn count_syncs(s: &[Stmt]) -> usize {
        s.iter()
            .map(|s| match s {
                Stmt::Sync => 1,
                Stmt::Loop { body, .. } | Stmt::Coop { body, .. } => count_syncs(body),
                Stmt::Exec(_) => 0,
            })
            .sum()
    }

    fn listing2(no_sync_a: bool) -> DecompNode {
        let c = Chain::new()
            .tile(128, 128)
            .to(Block)
            .epilog(MemLevel::RF)
            .split(8)
            .load(Operand::A, MemLevel::SH);
        let c = if no_sync_a { c.no_sync() } else { c };
        c.load(Operand::B, MemLevel::SH)
            .tile(64, 32)
            .to(Warp)
            .tile(8, 8)
            .to(Thread)
            .split(1)
            .load(Operand::A, MemLevel::RF)
            .load(Operand::B, MemLevel::RF)
            .tile(1, 1)
            .done()
            .unwrap()
    }

    #[test]
    fn listing2_barriers_and_buffers() {
        let k = lower(&kernel_matmul(128, 128, 32).unwrap(), &listing2(false)).unwrap();
        assert_eq!(count_syncs(&k.body), 2);
        let a_sh = k.buffers.buffers.iter().find(|b| b.mem == MemLevel::SH && b.role == 'A').unwrap();
        assert_eq!(a_sh.extent, 128 * 8);
        let acc = k.buffers.buffers.iter().find(|b| b.mem == MemLevel::RF && b.role == 'C').unwrap();
        assert_eq!(acc.owner, Some(Thread));
        assert_eq!(acc.extent, 64);
        assert_eq!(k.buffers.shared_bytes(), 2 * 128 * 8 * 4);
    }

    #[test]
    fn no_sync_drops_pre_barrier() {
        let k = lower(&kernel_matmul(128, 128, 32).unwrap(), &listing2(true)).unwrap();
        assert_eq!(count_syncs(&k.body), 2);
    }

    #[test]
    fn root_must_be_global() {
        let s = kernel_matmul(8, 8, 8).unwrap().with_level(Block);
        assert_eq!(lower(&s, &DecompNode::done()), Err(LowerError::RootNotGlobal));
    }
}
