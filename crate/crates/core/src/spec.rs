//! Specs: what has to be computed, where the operands live, and which level
//! of the compute hierarchy is responsible for it.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::error::SpecError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ElemType {
    F32,
    F16,
}

impl ElemType {
    pub fn bit_width(self) -> usize {
        match self {
            ElemType::F32 => 32,
            ElemType::F16 => 16,
        }
    }

    pub fn size_bytes(self) -> usize {
        self.bit_width() / 8
    }

    pub fn c_type(self) -> &'static str {
        match self {
            ElemType::F32 => "float",
            ElemType::F16 => "half",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ElemType::F32 => "F32",
            ElemType::F16 => "F16",
        }
    }

    pub fn parse(s: &str) -> Option<ElemType> {
        match s {
            "F32" | "Float" | "float" | "f32" => Some(ElemType::F32),
            "F16" | "Half" | "half" | "f16" => Some(ElemType::F16),
            _ => None,
        }
    }
}

/// Memory hierarchy level. `FR` carries the tensor-core fragment shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MemLevel {
    GL,
    SH,
    RF,
    FR { m: usize, n: usize, k: usize },
}

impl MemLevel {
    pub const WMMA_FR: MemLevel = MemLevel::FR { m: 16, n: 16, k: 16 };

    pub fn rank(self) -> u8 {
        match self {
            MemLevel::GL => 2,
            MemLevel::SH => 1,
            MemLevel::RF | MemLevel::FR { .. } => 0,
        }
    }

    /// True when data may be staged from `self` into `target`.
    pub fn can_load_into(self, target: MemLevel) -> bool {
        target.rank() < self.rank()
    }

    pub fn is_fragment(self) -> bool {
        matches!(self, MemLevel::FR { .. })
    }

    pub fn short(self) -> &'static str {
        match self {
            MemLevel::GL => "GL",
            MemLevel::SH => "SH",
            MemLevel::RF => "RF",
            MemLevel::FR { .. } => "FR",
        }
    }

    /// Long form, with fragment parameters spelled out.
    pub fn full(self) -> String {
        match self {
            MemLevel::FR { m, n, k } => format!("FR<{},{},{}>", m, n, k),
            other => other.short().to_string(),
        }
    }

    pub fn parse(s: &str) -> Option<MemLevel> {
        let s = s.trim();
        match s {
            "GL" => return Some(MemLevel::GL),
            "SH" => return Some(MemLevel::SH),
            "RF" => return Some(MemLevel::RF),
            "FR" => return Some(MemLevel::WMMA_FR),
            _ => {}
        }
        let inner = s.strip_prefix("FR<")?.strip_suffix('>')?;
        let dims: Vec<usize> = inner
            .split(',')
            .map(|p| p.trim().parse().ok())
            .collect::<Option<Vec<_>>>()?;
        match dims.as_slice() {
            [m, n, k] if *m > 0 && *n > 0 && *k > 0 => Some(MemLevel::FR { m: *m, n: *n, k: *k }),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ComputeLevel {
    Thread,
    Warp,
    Block,
    Kernel,
}

impl ComputeLevel {
    pub fn name(self) -> &'static str {
        match self {
            ComputeLevel::Thread => "Thread",
            ComputeLevel::Warp => "Warp",
            ComputeLevel::Block => "Block",
            ComputeLevel::Kernel => "Kernel",
        }
    }

    pub fn parse(s: &str) -> Option<ComputeLevel> {
        match s.trim() {
            "Thread" => Some(ComputeLevel::Thread),
            "Warp" => Some(ComputeLevel::Warp),
            "Block" => Some(ComputeLevel::Block),
            "Kernel" => Some(ComputeLevel::Kernel),
            _ => None,
        }
    }

    /// Levels a `to()` tiling may assign to from here.
    pub fn may_assign(self, to: ComputeLevel) -> bool {
        matches!(
            (self, to),
            (ComputeLevel::Kernel, ComputeLevel::Block)
                | (ComputeLevel::Block, ComputeLevel::Warp)
                | (ComputeLevel::Block, ComputeLevel::Thread)
                | (ComputeLevel::Warp, ComputeLevel::Thread)
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Major {
    RowMajor,
    ColMajor,
}

impl Major {
    pub fn name(self) -> &'static str {
        match self {
            Major::RowMajor => "RowMajor",
            Major::ColMajor => "ColMajor",
        }
    }

    pub fn parse(s: &str) -> Option<Major> {
        match s.trim() {
            "RowMajor" | "Row" => Some(Major::RowMajor),
            "ColMajor" | "Col" => Some(Major::ColMajor),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Layout {
    pub major: Major,
    pub pad: usize,
}

impl Layout {
    pub const ROW: Layout = Layout { major: Major::RowMajor, pad: 0 };
    pub const COL: Layout = Layout { major: Major::ColMajor, pad: 0 };

    pub fn new(major: Major, pad: usize) -> Layout {
        Layout { major, pad }
    }

    /// Leading dimension in elements.
    pub fn stride(self, rows: usize, cols: usize) -> usize {
        match self.major {
            Major::RowMajor => cols + self.pad,
            Major::ColMajor => rows + self.pad,
        }
    }

    /// Allocation size in elements, padding included.
    pub fn extent(self, rows: usize, cols: usize) -> usize {
        match self.major {
            Major::RowMajor => rows * (cols + self.pad),
            Major::ColMajor => cols * (rows + self.pad),
        }
    }

    pub fn offset(self, rows: usize, cols: usize, r: usize, c: usize) -> usize {
        match self.major {
            Major::RowMajor => r * self.stride(rows, cols) + c,
            Major::ColMajor => c * self.stride(rows, cols) + r,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MatrixRef {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub elem: ElemType,
    pub mem: MemLevel,
    pub layout: Layout,
}

impl MatrixRef {
    pub fn new(name: &str, rows: usize, cols: usize, elem: ElemType, mem: MemLevel, layout: Layout) -> Self {
        MatrixRef { name: name.to_string(), rows, cols, elem, mem, layout }
    }

    pub fn with_shape(&self, rows: usize, cols: usize) -> MatrixRef {
        MatrixRef { rows, cols, ..self.clone() }
    }

    pub fn with_mem(&self, mem: MemLevel) -> MatrixRef {
        MatrixRef { mem, ..self.clone() }
    }

    pub fn elements(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum SpecKind {
    /// `C = A·B`, or `C += A·B` when `accumulate` is set.
    MatMul { a: MatrixRef, b: MatrixRef, c: MatrixRef, accumulate: bool },
    /// Copy `src` into `dst`; with `zero_fill` the source is the constant 0.
    Move { src: MatrixRef, dst: MatrixRef, zero_fill: bool },
    /// Per-lane residual of a warp-level mma tile. Shapes are the lane's
    /// register slices, not a consistent matrix product.
    LaneMma { a: MatrixRef, b: MatrixRef, c: MatrixRef },
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Spec {
    pub kind: SpecKind,
    pub level: ComputeLevel,
}

impl Spec {
    pub fn matmul_dims(&self) -> Option<(usize, usize, usize)> {
        match &self.kind {
            SpecKind::MatMul { a, c, .. } => Some((c.rows, c.cols, a.cols)),
            _ => None,
        }
    }

    /// Shape tiled by `tile`: `C` for MatMul, the moved tile for Move.
    pub fn tiled_shape(&self) -> (usize, usize) {
        match &self.kind {
            SpecKind::MatMul { c, .. } | SpecKind::LaneMma { c, .. } => (c.rows, c.cols),
            SpecKind::Move { dst, .. } => (dst.rows, dst.cols),
        }
    }

    pub fn is_matmul(&self) -> bool {
        matches!(self.kind, SpecKind::MatMul { .. })
    }

    pub fn with_level(&self, level: ComputeLevel) -> Spec {
        Spec { kind: self.kind.clone(), level }
    }

    pub fn operands(&self) -> Vec<&MatrixRef> {
        match &self.kind {
            SpecKind::MatMul { a, b, c, .. } | SpecKind::LaneMma { a, b, c } => alloc::vec![a, b, c],
            SpecKind::Move { src, dst, .. } => alloc::vec![src, dst],
        }
    }

    pub fn short_form(&self) -> String {
        spec_short_form(self)
    }
}

impl fmt::Display for Spec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&spec_short_form(self))
    }
}

pub fn make_matmul_spec(
    m: usize,
    n: usize,
    k: usize,
    elems: [ElemType; 3],
    mems: [MemLevel; 3],
    layouts: [Layout; 3],
    level: ComputeLevel,
) -> Result<Spec, SpecError> {
    if m == 0 || n == 0 || k == 0 {
        return Err(SpecError::ZeroDim);
    }
    Ok(Spec {
        kind: SpecKind::MatMul {
            a: MatrixRef::new("A", m, k, elems[0], mems[0], layouts[0]),
            b: MatrixRef::new("B", k, n, elems[1], mems[1], layouts[1]),
            c: MatrixRef::new("C", m, n, elems[2], mems[2], layouts[2]),
            accumulate: false,
        },
        level,
    })
}

/// F32 operands in global memory, column-major, at kernel level.
pub fn kernel_matmul(m: usize, n: usize, k: usize) -> Result<Spec, SpecError> {
    make_matmul_spec(
        m,
        n,
        k,
        [ElemType::F32; 3],
        [MemLevel::GL; 3],
        [Layout::COL; 3],
        ComputeLevel::Kernel,
    )
}

pub fn make_move_spec(src: MatrixRef, dst: MatrixRef, level: ComputeLevel) -> Result<Spec, SpecError> {
    if src.rows == 0 || src.cols == 0 {
        return Err(SpecError::ZeroDim);
    }
    if (src.rows, src.cols) != (dst.rows, dst.cols) {
        return Err(SpecError::ShapeMismatch {
            src: (src.rows, src.cols),
            dst: (dst.rows, dst.cols),
        });
    }
    if src.elem != dst.elem {
        return Err(SpecError::ElemMismatch { src: src.elem, dst: dst.elem });
    }
    Ok(Spec { kind: SpecKind::Move { src, dst, zero_fill: false }, level })
}

/// A Move that writes zeros into `dst`.
pub fn make_fill_spec(dst: MatrixRef, level: ComputeLevel) -> Result<Spec, SpecError> {
    if dst.rows == 0 || dst.cols == 0 {
        return Err(SpecError::ZeroDim);
    }
    Ok(Spec { kind: SpecKind::Move { src: dst.clone(), dst, zero_fill: true }, level })
}

pub fn spec_short_form(s: &Spec) -> String {
    match &s.kind {
        SpecKind::MatMul { a, b, c, .. } => format!(
            "MatMul({},{},{})({},{},{})({})",
            c.rows,
            c.cols,
            a.cols,
            a.mem.short(),
            b.mem.short(),
            c.mem.short(),
            s.level.name()
        ),
        SpecKind::Move { src, dst, zero_fill } => format!(
            "Move({}x{})({}->{})({})",
            dst.rows,
            dst.cols,
            if *zero_fill { "0" } else { src.mem.short() },
            dst.mem.short(),
            s.level.name()
        ),
        SpecKind::LaneMma { a, b, c } => format!(
            "MmaLane({}x{},{}x{},{}x{})({},{},{})({})",
            a.rows,
            a.cols,
            b.rows,
            b.cols,
            c.rows,
            c.cols,
            a.mem.short(),
            b.mem.short(),
            c.mem.short(),
            s.level.name()
        ),
    }
}

/// Memory constraint inside a [`SpecPattern`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MemPattern {
    Any,
    Exact(MemLevel),
    /// GL or SH.
    Addressable,
    /// GL, SH or RF.
    Staged,
}

impl MemPattern {
    pub fn matches(self, m: MemLevel) -> bool {
        match self {
            MemPattern::Any => true,
            MemPattern::Exact(x) => x == m,
            MemPattern::Addressable => matches!(m, MemLevel::GL | MemLevel::SH),
            MemPattern::Staged => matches!(m, MemLevel::GL | MemLevel::SH | MemLevel::RF),
        }
    }

    fn describe(self) -> String {
        match self {
            MemPattern::Any => "*".into(),
            MemPattern::Exact(m) => m.short().into(),
            MemPattern::Addressable => "GL|SH".into(),
            MemPattern::Staged => "GL|SH|RF".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct OperandPattern {
    pub rows: Option<usize>,
    pub cols: Option<usize>,
    pub elem: Option<ElemType>,
    pub mem: MemPattern,
    pub major: Option<Major>,
}

impl OperandPattern {
    pub const ANY: OperandPattern =
        OperandPattern { rows: None, cols: None, elem: None, mem: MemPattern::Any, major: None };

    pub fn exact(m: &MatrixRef) -> OperandPattern {
        OperandPattern {
            rows: Some(m.rows),
            cols: Some(m.cols),
            elem: Some(m.elem),
            mem: MemPattern::Exact(m.mem),
            major: Some(m.layout.major),
        }
    }

    pub fn shaped(rows: usize, cols: usize, elem: ElemType, mem: MemPattern) -> OperandPattern {
        OperandPattern { rows: Some(rows), cols: Some(cols), elem: Some(elem), mem, major: None }
    }

    pub fn with_major(mut self, major: Major) -> OperandPattern {
        self.major = Some(major);
        self
    }

    /// Number of failing constraints; 0 means the operand matches.
    fn misses(&self, m: &MatrixRef) -> usize {
        let mut n = 0;
        n += usize::from(self.rows.is_some_and(|r| r != m.rows));
        n += usize::from(self.cols.is_some_and(|c| c != m.cols));
        n += usize::from(self.elem.is_some_and(|e| e != m.elem));
        n += usize::from(!self.mem.matches(m.mem));
        n += usize::from(self.major.is_some_and(|j| j != m.layout.major));
        n
    }

    fn describe(&self) -> String {
        let dim = |d: Option<usize>| d.map_or_else(|| "*".to_string(), |v| v.to_string());
        let mut s = format!(
            "{}x{} {} {}",
            dim(self.rows),
            dim(self.cols),
            self.elem.map_or("*", |e| e.name()),
            self.mem.describe()
        );
        if let Some(j) = self.major {
            s.push(' ');
            s.push_str(j.name());
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum PatternKind {
    MatMul { a: OperandPattern, b: OperandPattern, c: OperandPattern, accumulate: Option<bool> },
    Move { src: OperandPattern, dst: OperandPattern, zero_fill: bool },
    LaneMma { a: OperandPattern, b: OperandPattern, c: OperandPattern },
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SpecPattern {
    pub kind: PatternKind,
    pub level: Option<ComputeLevel>,
}

impl SpecPattern {
    /// Pattern matching exactly `spec` (layouts compare by major only).
    pub fn exact(spec: &Spec) -> SpecPattern {
        let kind = match &spec.kind {
            SpecKind::MatMul { a, b, c, .. } => PatternKind::MatMul {
                a: OperandPattern::exact(a),
                b: OperandPattern::exact(b),
                c: OperandPattern::exact(c),
                accumulate: None,
            },
            SpecKind::Move { src, dst, zero_fill } => PatternKind::Move {
                src: if *zero_fill { OperandPattern::ANY } else { OperandPattern::exact(src) },
                dst: OperandPattern::exact(dst),
                zero_fill: *zero_fill,
            },
            SpecKind::LaneMma { a, b, c } => PatternKind::LaneMma {
                a: OperandPattern::exact(a),
                b: OperandPattern::exact(b),
                c: OperandPattern::exact(c),
            },
        };
        SpecPattern { kind, level: Some(spec.level) }
    }

    /// Constraint misses; `None` when the spec kind differs.
    pub fn distance(&self, spec: &Spec) -> Option<usize> {
        let lvl = usize::from(self.level.is_some_and(|l| l != spec.level));
        match (&self.kind, &spec.kind) {
            (
                PatternKind::MatMul { a: pa, b: pb, c: pc, accumulate },
                SpecKind::MatMul { a, b, c, accumulate: acc },
            ) => Some(
                lvl + pa.misses(a)
                    + pb.misses(b)
                    + pc.misses(c)
                    + usize::from(accumulate.is_some_and(|x| x != *acc)),
            ),
            (
                PatternKind::Move { src: ps, dst: pd, zero_fill: pz },
                SpecKind::Move { src, dst, zero_fill },
            ) => {
                if pz != zero_fill {
                    return None;
                }
                let s = if *zero_fill { 0 } else { ps.misses(src) };
                Some(lvl + s + pd.misses(dst))
            }
            (PatternKind::LaneMma { a: pa, b: pb, c: pc }, SpecKind::LaneMma { a, b, c }) => {
                Some(lvl + pa.misses(a) + pb.misses(b) + pc.misses(c))
            }
            _ => None,
        }
    }

    pub fn matches(&self, spec: &Spec) -> bool {
        self.distance(spec) == Some(0)
    }

    pub fn describe(&self) -> String {
        let lvl = self.level.map_or("*", |l| l.name());
        match &self.kind {
            PatternKind::MatMul { a, b, c, accumulate } => format!(
                "MatMul{}[A {}; B {}; C {}]({})",
                match accumulate {
                    Some(true) => "+",
                    _ => "",
                },
                a.describe(),
                b.describe(),
                c.describe(),
                lvl
            ),
            PatternKind::Move { src, dst, zero_fill } => format!(
                "Move[{} -> {}]({})",
                if *zero_fill { "0".to_string() } else { src.describe() },
                dst.describe(),
                lvl
            ),
            PatternKind::LaneMma { a, b, c } => format!(
                "MmaLane[A {}; B {}; C {}]({})",
                a.describe(),
                b.describe(),
                c.describe(),
                lvl
            ),
        }
    }
}

/// How the simulator executes a bound residual.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SimSemantics {
    Fma,
    Copy,
    Zero,
    WmmaLoad,
    WmmaStore,
    WmmaFill,
    WmmaMma,
    Opaque,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Instruction {
    pub name: String,
    pub pattern: SpecPattern,
    /// Emission template; `${NAME}` placeholders are filled by codegen.
    pub emission: String,
    pub semantics: SimSemantics,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MicroKernel {
    pub name: String,
    pub pattern: Spec,
    pub body: String,
    pub declared_vars: Vec<String>,
}

const MATMUL_PLACEHOLDERS: &[&str] = &[
    "M", "N", "K", "A", "B", "C", "LDA", "LDB", "LDC", "A_RS", "A_CS", "B_RS", "B_CS", "C_RS", "C_CS",
];
const MOVE_PLACEHOLDERS: &[&str] =
    &["ROWS", "COLS", "SRC", "DST", "LDSRC", "LDDST", "SRC_RS", "SRC_CS", "DST_RS", "DST_CS"];

/// Names of `${NAME}` placeholders in order of first appearance.
pub fn placeholders(body: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let mut rest = body;
    while let Some(i) = rest.find("${") {
        let after = &rest[i + 2..];
        let Some(j) = after.find('}') else { break };
        let name = &after[..j];
        if !out.iter().any(|n| n == name) {
            out.push(name.to_string());
        }
        rest = &after[j + 1..];
    }
    out
}

impl MicroKernel {
    pub fn new(name: &str, pattern: Spec, body: &str) -> Result<MicroKernel, SpecError> {
        let known: &[&str] = match pattern.kind {
            SpecKind::Move { .. } => MOVE_PLACEHOLDERS,
            _ => MATMUL_PLACEHOLDERS,
        };
        let declared_vars = placeholders(body);
        if let Some(bad) = declared_vars.iter().find(|v| !known.contains(&v.as_str())) {
            return Err(SpecError::UnknownPlaceholder { kernel: name.to_string(), name: bad.clone() });
        }
        Ok(MicroKernel { name: name.to_string(), pattern, body: body.to_string(), declared_vars })
    }

    pub fn spec_pattern(&self) -> SpecPattern {
        SpecPattern::exact(&self.pattern)
    }

    pub fn matches(&self, spec: &Spec) -> bool {
        self.spec_pattern().matches(spec)
    }
}

/// Registered micro-kernels. Patterns must be distinct.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MicroKernelSet {
    kernels: Vec<MicroKernel>,
}

impl MicroKernelSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, mk: MicroKernel) -> Result<(), SpecError> {
        if let Some(prev) = self
            .kernels
            .iter()
            .find(|k| k.name == mk.name || k.spec_pattern() == mk.spec_pattern())
        {
            return Err(SpecError::DuplicateMicroKernel { name: mk.name, existing: prev.name.clone() });
        }
        self.kernels.push(mk);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&MicroKernel> {
        self.kernels.iter().find(|k| k.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &MicroKernel> {
        self.kernels.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstructionSet {
    pub instrs: Vec<Instruction>,
}

fn instr(name: &str, pattern: SpecPattern, emission: &str, semantics: SimSemantics) -> Instruction {
    Instruction { name: name.to_string(), pattern, emission: emission.to_string(), semantics }
}

impl InstructionSet {
    pub fn builtin() -> InstructionSet {
        use ComputeLevel::*;
        use ElemType::*;
        let rf = MemPattern::Exact(MemLevel::RF);
        let fr = MemPattern::Exact(MemLevel::WMMA_FR);
        let scalar = |e| OperandPattern::shaped(1, 1, e, rf);
        let tile16 = |e, m| OperandPattern::shaped(16, 16, e, m);
        let mut instrs = Vec::new();
        for (name, e) in [("FMA", F32), ("HFMA", F16)] {
            instrs.push(instr(
                name,
                SpecPattern {
                    kind: PatternKind::MatMul {
                        a: scalar(e),
                        b: scalar(e),
                        c: scalar(e),
                        accumulate: Some(true),
                    },
                    level: Some(Thread),
                },
                "${C} += ${A} * ${B};",
                SimSemantics::Fma,
            ));
        }
        for (name, e) in [("WMMA_MMA_F32", F32), ("WMMA_MMA_F16", F16)] {
            instrs.push(instr(
                name,
                SpecPattern {
                    kind: PatternKind::MatMul {
                        a: tile16(F16, fr),
                        b: tile16(F16, fr),
                        c: tile16(e, fr),
                        accumulate: Some(true),
                    },
                    level: Some(Warp),
                },
                "wmma::mma_sync(${C}, ${A}, ${B}, ${C});",
                SimSemantics::WmmaMma,
            ));
        }
        instrs.push(instr(
            "WMMA_LOAD",
            SpecPattern {
                kind: PatternKind::Move {
                    src: tile16(F16, MemPattern::Addressable),
                    dst: tile16(F16, fr),
                    zero_fill: false,
                },
                level: Some(Warp),
            },
            "wmma::load_matrix_sync(${DST}, ${SRC}, ${LDSRC});",
            SimSemantics::WmmaLoad,
        ));
        for (name, e) in [("WMMA_STORE_F32", F32), ("WMMA_STORE_F16", F16)] {
            instrs.push(instr(
                name,
                SpecPattern {
                    kind: PatternKind::Move {
                        src: tile16(e, fr),
                        dst: tile16(e, MemPattern::Addressable),
                        zero_fill: false,
                    },
                    level: Some(Warp),
                },
                "wmma::store_matrix_sync(${DST}, ${SRC}, ${LDDST}, ${DST_LAYOUT});",
                SimSemantics::WmmaStore,
            ));
        }
        instrs.push(instr(
            "WMMA_FILL",
            SpecPattern {
                kind: PatternKind::Move {
                    src: OperandPattern::ANY,
                    dst: OperandPattern { rows: Some(16), cols: Some(16), elem: None, mem: fr, major: None },
                    zero_fill: true,
                },
                level: Some(Warp),
            },
            "for (int t = 0; t < ${DST}.num_elements; t++) { ${DST}.x[t] = ${ZERO}; }",
            SimSemantics::WmmaFill,
        ));
        let staged = OperandPattern { mem: MemPattern::Staged, ..OperandPattern::ANY };
        instrs.push(instr(
            "COPY",
            SpecPattern {
                kind: PatternKind::Move { src: staged, dst: staged, zero_fill: false },
                level: None,
            },
            "${DST} = ${SRC};",
            SimSemantics::Copy,
        ));
        instrs.push(instr(
            "ZERO",
            SpecPattern {
                kind: PatternKind::Move { src: OperandPattern::ANY, dst: staged, zero_fill: true },
                level: None,
            },
            "${DST} = ${ZERO};",
            SimSemantics::Zero,
        ));
        instrs.push(instr(
            "HMMA_884",
            SpecPattern {
                kind: PatternKind::LaneMma {
                    a: OperandPattern::shaped(1, 4, F16, rf).with_major(Major::RowMajor),
                    b: OperandPattern::shaped(4, 1, F16, rf).with_major(Major::ColMajor),
                    c: OperandPattern::shaped(1, 8, F16, rf).with_major(Major::ColMajor),
                },
                level: Some(Thread),
            },
            HMMA_884_TEXT,
            SimSemantics::Opaque,
        ));
        InstructionSet { instrs }
    }

    pub fn get(&self, name: &str) -> Option<&Instruction> {
        self.instrs.iter().find(|i| i.name == name)
    }
}

const HMMA_884_TEXT: &str = "asm volatile(\"mma.sync.aligned.m8n8k4.row.col.f16.f16.f16.f16 \"
             \"{%0,%1,%2,%3}, {%4,%5}, {%6,%7}, {%0,%1,%2,%3};\"
             : \"+r\"(${C0}), \"+r\"(${C1}), \"+r\"(${C2}), \"+r\"(${C3})
             : \"r\"(${A0}), \"r\"(${A1}), \"r\"(${B0}), \"r\"(${B1}));";

/// What a residual spec was bound to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Executable {
    Instruction(Instruction),
    MicroKernel(MicroKernel),
}

impl Executable {
    pub fn name(&self) -> &str {
        match self {
            Executable::Instruction(i) => &i.name,
            Executable::MicroKernel(m) => &m.name,
        }
    }
}

/// Finds the executable for `spec`. Micro-kernels win over instructions;
/// two matches within the same class are ambiguous.
pub fn match_executable(
    spec: &Spec,
    instrs: &InstructionSet,
    kernels: &MicroKernelSet,
) -> Result<Option<Executable>, SpecError> {
    let mks: Vec<&MicroKernel> = kernels.iter().filter(|k| k.matches(spec)).collect();
    match mks.as_slice() {
        [one] => return Ok(Some(Executable::MicroKernel((*one).clone()))),
        [a, b, ..] => {
            return Err(SpecError::AmbiguousMatch {
                spec: spec_short_form(spec),
                candidates: alloc::vec![a.name.clone(), b.name.clone()],
            })
        }
        [] => {}
    }
    let hits: Vec<&Instruction> = instrs.instrs.iter().filter(|i| i.pattern.matches(spec)).collect();
    match hits.as_slice() {
        [] => Ok(None),
        [one] => Ok(Some(Executable::Instruction((*one).clone()))),
        many => Err(SpecError::AmbiguousMatch {
            spec: spec_short_form(spec),
            candidates: many.iter().map(|i| i.name.clone()).collect(),
        }),
    }
}

/// Up to three instruction patterns closest to `spec`, for diagnostics.
pub fn nearest_patterns(spec: &Spec, instrs: &InstructionSet) -> Vec<String> {
    let mut scored: Vec<(usize, &Instruction)> = instrs
        .instrs
        .iter()
        .filter_map(|i| i.pattern.distance(spec).map(|d| (d, i)))
        .collect();
    scored.sort_by_key(|(d, _)| *d);
    scored
        .into_iter()
        .take(3)
        .map(|(_, i)| format!("{} {}", i.name, i.pattern.describe()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_1x1(level: ComputeLevel, acc: bool) -> Spec {
        let mut s = make_matmul_spec(
            1,
            1,
            1,
            [ElemType::F32; 3],
            [MemLevel::RF; 3],
            [Layout::COL; 3],
            level,
        )
        .unwrap();
        if let SpecKind::MatMul { accumulate, .. } = &mut s.kind {
            *accumulate = acc;
        }
        s
    }

    #[test]
    fn short_forms() {
        let s = kernel_matmul(128, 128, 8).unwrap();
        assert_eq!(spec_short_form(&s), "MatMul(128,128,8)(GL,GL,GL)(Kernel)");
        let src = MatrixRef::new("A", 16, 16, ElemType::F16, MemLevel::SH, Layout::COL);
        let dst = src.with_mem(MemLevel::WMMA_FR);
        let mv = make_move_spec(src, dst.clone(), ComputeLevel::Warp).unwrap();
        assert_eq!(spec_short_form(&mv), "Move(16x16)(SH->FR)(Warp)");
        let fill = make_fill_spec(dst, ComputeLevel::Warp).unwrap();
        assert_eq!(spec_short_form(&fill), "Move(16x16)(0->FR)(Warp)");
    }

    #[test]
    fn zero_dims_rejected() {
        assert_eq!(kernel_matmul(0, 4, 4), Err(SpecError::ZeroDim));
    }

    #[test]
    fn move_shape_and_elem_checked() {
        let a = MatrixRef::new("A", 4, 4, ElemType::F32, MemLevel::GL, Layout::COL);
        assert!(matches!(
            make_move_spec(a.clone(), a.with_shape(4, 2), ComputeLevel::Block),
            Err(SpecError::ShapeMismatch { .. })
        ));
        let mut h = a.clone();
        h.elem = ElemType::F16;
        assert!(matches!(
            make_move_spec(a, h, ComputeLevel::Block),
            Err(SpecError::ElemMismatch { .. })
        ));
    }

    #[test]
    fn fma_matches_accumulating_scalar() {
        let set = InstructionSet::builtin();
        let mks = MicroKernelSet::new();
        let hit = match_executable(&spec_1x1(ComputeLevel::Thread, true), &set, &mks).unwrap();
        assert_eq!(hit.unwrap().name(), "FMA");
        assert!(match_executable(&spec_1x1(ComputeLevel::Thread, false), &set, &mks)
            .unwrap()
            .is_none());
        assert!(match_executable(&spec_1x1(ComputeLevel::Warp, true), &set, &mks)
            .unwrap()
            .is_none());
    }

    #[test]
    fn micro_kernel_precedence_and_duplicates() {
        let set = InstructionSet::builtin();
        let s = spec_1x1(ComputeLevel::Thread, true);
        let mk = MicroKernel::new("mine", s.clone(), "${C} += ${A} * ${B};").unwrap();
        let mut mks = MicroKernelSet::new();
        mks.register(mk.clone()).unwrap();
        assert_eq!(match_executable(&s, &set, &mks).unwrap().unwrap().name(), "mine");
        let again = MicroKernel { name: "other".into(), ..mk };
        assert!(matches!(mks.register(again), Err(SpecError::DuplicateMicroKernel { .. })));
    }

    #[test]
    fn unknown_placeholder() {
        let s = spec_1x1(ComputeLevel::Thread, true);
        assert!(MicroKernel::new("x", s, "${Q} = 0;").is_err());
    }

    #[test]
    fn builtins_are_disjoint_on_examples() {
        let set = InstructionSet::builtin();
        let mks = MicroKernelSet::new();
        let src = MatrixRef::new("A", 16, 16, ElemType::F16, MemLevel::GL, Layout::COL);
        let mv = make_move_spec(src.clone(), src.with_mem(MemLevel::WMMA_FR), ComputeLevel::Warp).unwrap();
        assert_eq!(match_executable(&mv, &set, &mks).unwrap().unwrap().name(), "WMMA_LOAD");
        let cp = make_move_spec(src.clone(), src.with_mem(MemLevel::SH), ComputeLevel::Block).unwrap();
        assert_eq!(match_executable(&cp, &set, &mks).unwrap().unwrap().name(), "COPY");
        let z = make_fill_spec(src.with_mem(MemLevel::RF), ComputeLevel::Thread).unwrap();
        assert_eq!(match_executable(&z, &set, &mks).unwrap().unwrap().name(), "ZERO");
    }
}
