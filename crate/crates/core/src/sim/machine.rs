//! Interpreter for lowered kernels.
//!
//! Blocks run one after another. Inside a block every thread runs until it
//! reaches a barrier or finishes; when all threads have stopped the phase
//! ends and the next one starts. Threads within a phase run in id order.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use half::f16;

use super::race::{AccessRecord, RaceDetector, RaceReport};
use super::{Matrix, OwnershipKind, OwnershipViolation, SimError};
use crate::index::{cst, var, CompiledExpr, IndexExpr};
use crate::lower::{Access, ExecOp, Kernel, Stmt, BLOCK_X, BLOCK_Y, THREAD_X};
use crate::spec::{ElemType, Major, MemLevel, SimSemantics};
use crate::validate::WARP_SIZE;

#[derive(Clone, Copy, Debug)]
enum Store {
    Global(usize),
    Shared(usize),
    /// Offset inside a thread's register file, and its length.
    Reg(usize, usize),
    /// Offset inside a warp's fragment file, and its length.
    Frag(usize, usize),
}

#[derive(Clone, Debug)]
struct BufInfo {
    store: Store,
    f16: bool,
    name: String,
}

#[derive(Clone, Debug)]
struct SAccess {
    buf: usize,
    index: CompiledExpr,
    logical: CompiledExpr,
}

#[derive(Clone, Debug)]
enum SOp {
    Fma { c: SAccess, a: SAccess, b: SAccess },
    Copy { dst: SAccess, src: SAccess },
    Zero { dst: SAccess },
    WLoad { frag: SAccess, src: SAccess, ld: usize, major: Major },
    WStore { dst: SAccess, frag: SAccess, ld: usize, major: Major },
    WFill { frag: SAccess },
    WMma { c: SAccess, a: SAccess, b: SAccess },
    Skip,
}

#[derive(Clone, Debug)]
enum SStmt {
    Loop { slot: usize, start: CompiledExpr, step: i64, end: i64, body: Vec<SStmt> },
    Sync,
    Exec(SOp),
}

pub(crate) struct Program {
    body: Vec<SStmt>,
    nslots: usize,
    /// Thread-invariant expressions stored after the kernel's own slots.
    hoisted: Vec<CompiledExpr>,
    bufs: Vec<BufInfo>,
    regs_per_thread: usize,
    frags_per_warp: usize,
    shared_sizes: Vec<usize>,
    shared_names: Vec<String>,
    threads: usize,
    grid: (usize, usize),
}

/// Compiles kernel statements. Subexpressions that depend only on the
/// block and thread ids are hoisted into extra slots filled once per thread.
struct Compiler<'k> {
    k: &'k Kernel,
    skip_opaque: bool,
    hoisted: Vec<IndexExpr>,
}

fn thread_invariant(e: &IndexExpr) -> bool {
    match e {
        IndexExpr::Const(_) => true,
        IndexExpr::Var(v) => [BLOCK_X, BLOCK_Y, THREAD_X].contains(&v.as_str()),
        IndexExpr::Bin(_, a, b) => thread_invariant(a) && thread_invariant(b),
    }
}

impl Compiler<'_> {
    fn hoist(&mut self, e: &IndexExpr) -> IndexExpr {
        match e {
            IndexExpr::Bin(op, a, b) => {
                if thread_invariant(e) && e.as_const().is_none() {
                    let i = match self.hoisted.iter().position(|h| h == e) {
                        Some(i) => i,
                        None => {
                            self.hoisted.push(e.clone());
                            self.hoisted.len() - 1
                        }
                    };
                    return var(&format!("$h{i}"));
                }
                IndexExpr::bin(*op, self.hoist(a), self.hoist(b))
            }
            _ => e.clone(),
        }
    }

    fn slot(&self, n: &str) -> Option<usize> {
        match n.strip_prefix("$h") {
            Some(i) => i.parse::<usize>().ok().map(|i| self.k.vars.len() + i),
            None => self.k.slot_of(n),
        }
    }

    fn expr(&mut self, e: &IndexExpr) -> Result<CompiledExpr, SimError> {
        let h = self.hoist(&e.simplify());
        CompiledExpr::compile(&h, &|n| self.slot(n)).map_err(SimError::Index)
    }

    fn access(&mut self, a: &Access) -> Result<SAccess, SimError> {
        Ok(SAccess { buf: a.buf, index: self.expr(&a.index)?, logical: self.expr(&a.logical)? })
    }

    fn stmts(&mut self, stmts: &[Stmt]) -> Result<Vec<SStmt>, SimError> {
        let mut out = Vec::with_capacity(stmts.len());
        for s in stmts {
            out.push(match s {
                Stmt::Loop { var, count, body, .. } => SStmt::Loop {
                    slot: *var,
                    start: self.expr(&cst(0))?,
                    step: 1,
                    end: *count as i64,
                    body: self.stmts(body)?,
                },
                Stmt::Coop { var, start, step, end, body } => SStmt::Loop {
                    slot: *var,
                    start: self.expr(start)?,
                    step: *step as i64,
                    end: *end as i64,
                    body: self.stmts(body)?,
                },
                Stmt::Sync => SStmt::Sync,
                Stmt::Exec(e) => SStmt::Exec(match &e.op {
                    ExecOp::Fma { c, a, b } => SOp::Fma { c: self.access(c)?, a: self.access(a)?, b: self.access(b)? },
                    ExecOp::Copy { dst, src } => SOp::Copy { dst: self.access(dst)?, src: self.access(src)? },
                    ExecOp::Zero { dst } => SOp::Zero { dst: self.access(dst)? },
                    ExecOp::WmmaLoad { frag, src, ld, major } => {
                        SOp::WLoad { frag: self.access(frag)?, src: self.access(src)?, ld: *ld, major: *major }
                    }
                    ExecOp::WmmaStore { dst, frag, ld, major } => {
                        SOp::WStore { dst: self.access(dst)?, frag: self.access(frag)?, ld: *ld, major: *major }
                    }
                    ExecOp::WmmaFill { frag } => SOp::WFill { frag: self.access(frag)? },
                    ExecOp::WmmaMma { c, a, b } => {
                        SOp::WMma { c: self.access(c)?, a: self.access(a)?, b: self.access(b)? }
                    }
                    ExecOp::Hmma { .. } | ExecOp::MicroKernel { .. } => {
                        if self.skip_opaque || e.semantics != SimSemantics::Opaque {
                            SOp::Skip
                        } else {
                            return Err(SimError::UnsimulatableResidual(e.instr.clone()));
                        }
                    }
                }),
            });
        }
        Ok(out)
    }
}

impl Program {
    pub(crate) fn new(k: &Kernel, skip_opaque: bool) -> Result<Program, SimError> {
        let mut cc = Compiler { k, skip_opaque, hoisted: Vec::new() };
        let body = cc.stmts(&k.body)?;
        let hoisted = cc
            .hoisted
            .iter()
            .map(|h| CompiledExpr::compile(h, &|n| k.slot_of(n)).map_err(SimError::Index))
            .collect::<Result<Vec<_>, _>>()?;
        let mut regs = 0;
        let mut frags = 0;
        let mut bufs = Vec::new();
        for b in &k.buffers.buffers {
            let store = if let Some(p) = b.param {
                Store::Global(p)
            } else {
                match b.mem {
                    MemLevel::SH => Store::Shared(b.group.expect("shared buffer has a group")),
                    MemLevel::FR { .. } => {
                        frags += b.extent;
                        Store::Frag(frags - b.extent, b.extent)
                    }
                    _ => {
                        regs += b.extent;
                        Store::Reg(regs - b.extent, b.extent)
                    }
                }
            };
            bufs.push(BufInfo { store, f16: b.elem == ElemType::F16, name: b.name.clone() });
        }
        let shared_sizes = k
            .buffers
            .groups
            .iter()
            .map(|g| g.members.iter().map(|&m| k.buffers.buffers[m].extent * k.buffers.buffers[m].replicas).max().unwrap_or(0))
            .collect();
        let shared_names = k
            .buffers
            .groups
            .iter()
            .map(|g| {
                let names: Vec<&str> = g.members.iter().map(|&m| k.buffers.buffers[m].name.as_str()).collect();
                names.join("|")
            })
            .collect();
        Ok(Program {
            body,
            nslots: k.vars.len() + hoisted.len(),
            hoisted,
            bufs,
            regs_per_thread: regs,
            frags_per_warp: frags,
            shared_sizes,
            shared_names,
            threads: k.launch.block_threads,
            grid: k.launch.grid,
        })
    }

    pub(crate) fn shared_names(&self) -> Vec<String> {
        self.shared_names.clone()
    }

    pub(crate) fn shared_sizes(&self) -> Vec<usize> {
        self.shared_sizes.clone()
    }
}

#[derive(Clone, Copy, Debug)]
struct Reg {
    logical: i64,
    value: f32,
}

#[derive(Clone, Debug)]
struct Frag {
    logical: i64,
    data: Box<[f32; 256]>,
}

struct Frame<'p> {
    body: &'p [SStmt],
    pc: usize,
    lp: Option<(usize, i64, i64)>,
}

struct Thread<'p> {
    tid: usize,
    env: Vec<i64>,
    stack: Vec<Frame<'p>>,
}

enum Status {
    Barrier,
    Finished,
}

pub(crate) struct Options {
    pub log: bool,
    pub race_cap: usize,
    pub collect_ownership: bool,
    pub max_blocks: Option<usize>,
}

pub(crate) struct Outcome {
    pub output: Vec<f32>,
    pub races: RaceReport,
    pub log: Vec<AccessRecord>,
    pub ownership: Vec<OwnershipViolation>,
    pub phases: usize,
}

pub(crate) struct Machine<'p> {
    prog: &'p Program,
    opts: Options,
    global: Vec<Vec<f32>>,
    shared: Vec<Vec<f32>>,
    regs: Vec<Option<Reg>>,
    frags: Vec<Option<Frag>>,
    races: RaceDetector,
    log: Vec<AccessRecord>,
    ownership: Vec<OwnershipViolation>,
    block: usize,
    phase: usize,
}

fn round(v: f32, half: bool) -> f32 {
    if half {
        f16::from_f32(v).to_f32()
    } else {
        v
    }
}

impl<'p> Machine<'p> {
    pub(crate) fn new(prog: &'p Program, kernel: &Kernel, inputs: &[&Matrix], opts: Options) -> Result<Self, SimError> {
        let mut global = Vec::new();
        for (i, b) in kernel.params().into_iter().enumerate() {
            let mut data = vec![0f32; b.extent];
            if let Some(m) = inputs.get(i) {
                if (m.rows, m.cols) != (b.rows, b.cols) {
                    return Err(SimError::InputShape { operand: b.name.clone(), expected: (b.rows, b.cols), got: (m.rows, m.cols) });
                }
                for r in 0..b.rows {
                    for c in 0..b.cols {
                        data[b.layout.offset(b.rows, b.cols, r, c)] = round(m.get(r, c), b.elem == ElemType::F16);
                    }
                }
            }
            global.push(data);
        }
        let races = RaceDetector::new(&prog.shared_sizes, prog.shared_names.clone(), opts.race_cap);
        Ok(Machine {
            prog,
            opts,
            global,
            shared: prog.shared_sizes.iter().map(|&n| vec![0f32; n]).collect(),
            regs: Vec::new(),
            frags: Vec::new(),
            races,
            log: Vec::new(),
            ownership: Vec::new(),
            block: 0,
            phase: 0,
        })
    }

    pub(crate) fn run(mut self, kernel: &Kernel) -> Result<Outcome, SimError> {
        let (gx, gy) = self.prog.grid;
        let blocks = self.opts.max_blocks.map_or(gx * gy, |m| m.min(gx * gy));
        for lin in 0..blocks {
            self.run_block(lin % gx, lin / gx, lin)?;
        }
        let out = kernel.output();
        let data = &self.global[out.param.unwrap_or(0)];
        let mut output = vec![0f32; out.rows * out.cols];
        for r in 0..out.rows {
            for c in 0..out.cols {
                output[r * out.cols + c] = data[out.layout.offset(out.rows, out.cols, r, c)];
            }
        }
        Ok(Outcome {
            output,
            races: self.races.finish(),
            log: self.log,
            ownership: self.ownership,
            phases: self.phase,
        })
    }

    fn run_block(&mut self, bx: usize, by: usize, lin: usize) -> Result<(), SimError> {
        let prog = self.prog;
        let n = prog.threads;
        self.block = lin;
        self.regs = vec![None; n * prog.regs_per_thread];
        self.frags = vec![None; n.div_ceil(WARP_SIZE) * prog.frags_per_warp];
        for s in &mut self.shared {
            s.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut threads: Vec<Thread<'p>> = Vec::with_capacity(n);
        for tid in 0..n {
            let mut env = vec![0i64; prog.nslots];
            env[0] = bx as i64;
            env[1] = by as i64;
            env[2] = tid as i64;
            let base = env.len() - prog.hoisted.len();
            for (i, h) in prog.hoisted.iter().enumerate() {
                env[base + i] = h.eval(&env).map_err(SimError::Index)?;
            }
            threads.push(Thread { tid, env, stack: vec![Frame { body: &prog.body, pc: 0, lp: None }] });
        }
        loop {
            self.races.set_position(lin, self.phase);
            let mut at_barrier = 0;
            for t in threads.iter_mut() {
                if t.stack.is_empty() {
                    continue;
                }
                if let Status::Barrier = self.step(t)? {
                    at_barrier += 1;
                }
            }
            self.phase += 1;
            let finished = threads.iter().filter(|t| t.stack.is_empty()).count();
            if finished == n {
                return Ok(());
            }
            if at_barrier != n {
                return Err(SimError::BarrierDivergence { block: lin, waiting: at_barrier, finished });
            }
        }
    }

    fn step(&mut self, t: &mut Thread<'p>) -> Result<Status, SimError> {
        loop {
            let Some(frame) = t.stack.last_mut() else {
                return Ok(Status::Finished);
            };
            if frame.pc == frame.body.len() {
                if let Some((slot, step, end)) = frame.lp {
                    let next = t.env[slot] + step;
                    if next < end {
                        t.env[slot] = next;
                        frame.pc = 0;
                        continue;
                    }
                }
                t.stack.pop();
                continue;
            }
            let stmt = &frame.body[frame.pc];
            frame.pc += 1;
            match stmt {
                SStmt::Loop { slot, start, step, end, body } => {
                    let s = start.eval(&t.env).map_err(SimError::Index)?;
                    if s < *end {
                        t.env[*slot] = s;
                        t.stack.push(Frame { body, pc: 0, lp: Some((*slot, *step, *end)) });
                    }
                }
                SStmt::Sync => return Ok(Status::Barrier),
                SStmt::Exec(op) => self.exec(op, t)?,
            }
        }
    }

    fn idx(a: &SAccess, t: &Thread<'_>) -> Result<i64, SimError> {
        a.index.eval(&t.env).map_err(SimError::Index)
    }

    fn violation(&mut self, t: usize, buf: usize, expected: i64, found: Option<i64>, kind: OwnershipKind) -> Result<(), SimError> {
        let v = OwnershipViolation {
            block: self.block,
            thread: t,
            buffer: self.prog.bufs[buf].name.clone(),
            logical: expected,
            found,
            kind,
        };
        if self.opts.collect_ownership {
            self.ownership.push(v);
            Ok(())
        } else {
            Err(SimError::Ownership(v))
        }
    }

    fn bounds(&self, buf: usize, i: i64, len: usize) -> Result<usize, SimError> {
        if i < 0 || i as usize >= len {
            return Err(SimError::OutOfBounds { buffer: self.prog.bufs[buf].name.clone(), index: i, len });
        }
        Ok(i as usize)
    }

    fn shared_access(&mut self, g: usize, i: usize, t: usize, write: bool) {
        self.races.access(g, i, t, write);
        if self.opts.log {
            self.log.push(AccessRecord { phase: self.phase, block: self.block, thread: t, write, region: g, index: i });
        }
    }

    fn read(&mut self, a: &SAccess, t: &Thread<'_>) -> Result<f32, SimError> {
        let i = Self::idx(a, t)?;
        let info = &self.prog.bufs[a.buf];
        match info.store {
            Store::Global(p) => {
                let i = self.bounds(a.buf, i, self.global[p].len())?;
                Ok(self.global[p][i])
            }
            Store::Shared(g) => {
                let i = self.bounds(a.buf, i, self.shared[g].len())?;
                self.shared_access(g, i, t.tid, false);
                Ok(self.shared[g][i])
            }
            Store::Reg(off, len) => {
                let logical = a.logical.eval(&t.env).map_err(SimError::Index)?;
                if i < 0 || i as usize >= len {
                    self.violation(t.tid, a.buf, logical, None, OwnershipKind::OutOfRange)?;
                    return Ok(0.0);
                }
                match self.regs[t.tid * self.prog.regs_per_thread + off + i as usize] {
                    Some(r) if r.logical == logical => Ok(r.value),
                    Some(r) => {
                        self.violation(t.tid, a.buf, logical, Some(r.logical), OwnershipKind::Foreign)?;
                        Ok(0.0)
                    }
                    None => {
                        self.violation(t.tid, a.buf, logical, None, OwnershipKind::Unwritten)?;
                        Ok(0.0)
                    }
                }
            }
            Store::Frag(..) => unreachable!("fragments are not scalar-addressable"),
        }
    }

    fn write(&mut self, a: &SAccess, t: &Thread<'_>, v: f32) -> Result<(), SimError> {
        let i = Self::idx(a, t)?;
        let info = &self.prog.bufs[a.buf];
        let v = round(v, info.f16);
        match info.store {
            Store::Global(p) => {
                let i = self.bounds(a.buf, i, self.global[p].len())?;
                self.global[p][i] = v;
            }
            Store::Shared(g) => {
                let i = self.bounds(a.buf, i, self.shared[g].len())?;
                self.shared_access(g, i, t.tid, true);
                self.shared[g][i] = v;
            }
            Store::Reg(off, len) => {
                let logical = a.logical.eval(&t.env).map_err(SimError::Index)?;
                if i < 0 || i as usize >= len {
                    return self.violation(t.tid, a.buf, logical, None, OwnershipKind::OutOfRange);
                }
                self.regs[t.tid * self.prog.regs_per_thread + off + i as usize] = Some(Reg { logical, value: v });
            }
            Store::Frag(..) => unreachable!("fragments are not scalar-addressable"),
        }
        Ok(())
    }

    fn frag_slot(&mut self, a: &SAccess, t: &Thread<'_>) -> Result<(Option<usize>, i64), SimError> {
        let i = Self::idx(a, t)?;
        let logical = a.logical.eval(&t.env).map_err(SimError::Index)?;
        let Store::Frag(off, len) = self.prog.bufs[a.buf].store else {
            unreachable!("fragment access to a non-fragment buffer")
        };
        if i < 0 || i as usize >= len {
            self.violation(t.tid, a.buf, logical, None, OwnershipKind::OutOfRange)?;
            return Ok((None, logical));
        }
        Ok((Some((t.tid / WARP_SIZE) * self.prog.frags_per_warp + off + i as usize), logical))
    }

    fn frag_read(&mut self, a: &SAccess, t: &Thread<'_>) -> Result<[f32; 256], SimError> {
        let (slot, logical) = self.frag_slot(a, t)?;
        let Some(slot) = slot else { return Ok([0.0; 256]) };
        match &self.frags[slot] {
            Some(f) if f.logical == logical => Ok(*f.data),
            Some(f) => {
                let found = f.logical;
                self.violation(t.tid, a.buf, logical, Some(found), OwnershipKind::Foreign)?;
                Ok([0.0; 256])
            }
            None => {
                self.violation(t.tid, a.buf, logical, None, OwnershipKind::Unwritten)?;
                Ok([0.0; 256])
            }
        }
    }

    fn frag_write(&mut self, a: &SAccess, t: &Thread<'_>, mut data: [f32; 256]) -> Result<(), SimError> {
        let (slot, logical) = self.frag_slot(a, t)?;
        if self.prog.bufs[a.buf].f16 {
            data.iter_mut().for_each(|v| *v = round(*v, true));
        }
        if let Some(slot) = slot {
            self.frags[slot] = Some(Frag { logical, data: Box::new(data) });
        }
        Ok(())
    }

    fn tile_offset(major: Major, ld: usize, i: usize, j: usize) -> i64 {
        (match major {
            Major::RowMajor => i * ld + j,
            Major::ColMajor => j * ld + i,
        }) as i64
    }

    fn element(&mut self, a: &SAccess, base: i64, write: Option<f32>, t: &Thread<'_>) -> Result<f32, SimError> {
        let info = &self.prog.bufs[a.buf];
        let half = info.f16;
        match info.store {
            Store::Global(p) => {
                let i = self.bounds(a.buf, base, self.global[p].len())?;
                if let Some(v) = write {
                    self.global[p][i] = round(v, half);
                }
                Ok(self.global[p][i])
            }
            Store::Shared(g) => {
                let i = self.bounds(a.buf, base, self.shared[g].len())?;
                self.shared_access(g, i, t.tid, write.is_some());
                if let Some(v) = write {
                    self.shared[g][i] = round(v, half);
                }
                Ok(self.shared[g][i])
            }
            _ => Err(SimError::Unsupported("wmma operand must be in GL or SH".to_string())),
        }
    }

    fn exec(&mut self, op: &SOp, t: &Thread<'_>) -> Result<(), SimError> {
        let lane0 = t.tid % WARP_SIZE == 0;
        match op {
            SOp::Fma { c, a, b } => {
                let av = self.read(a, t)?;
                let bv = self.read(b, t)?;
                let cv = self.read(c, t)?;
                self.write(c, t, cv + av * bv)
            }
            SOp::Copy { dst, src } => {
                let v = self.read(src, t)?;
                self.write(dst, t, v)
            }
            SOp::Zero { dst } => self.write(dst, t, 0.0),
            SOp::WLoad { frag, src, ld, major } if lane0 => {
                let base = Self::idx(src, t)?;
                let mut data = [0f32; 256];
                for i in 0..16 {
                    for j in 0..16 {
                        data[i * 16 + j] = self.element(src, base + Self::tile_offset(*major, *ld, i, j), None, t)?;
                    }
                }
                self.frag_write(frag, t, data)
            }
            SOp::WStore { dst, frag, ld, major } if lane0 => {
                let base = Self::idx(dst, t)?;
                let data = self.frag_read(frag, t)?;
                for i in 0..16 {
                    for j in 0..16 {
                        self.element(dst, base + Self::tile_offset(*major, *ld, i, j), Some(data[i * 16 + j]), t)?;
                    }
                }
                Ok(())
            }
            SOp::WFill { frag } if lane0 => self.frag_write(frag, t, [0.0; 256]),
            SOp::WMma { c, a, b } if lane0 => {
                let av = self.frag_read(a, t)?;
                let bv = self.frag_read(b, t)?;
                let mut cv = self.frag_read(c, t)?;
                for i in 0..16 {
                    for j in 0..16 {
                        let mut s = cv[i * 16 + j];
                        for k in 0..16 {
                            s += av[i * 16 + k] * bv[k * 16 + j];
                        }
                        cv[i * 16 + j] = s;
                    }
                }
                self.frag_write(c, t, cv)
            }
            _ => Ok(()),
        }
    }
}
