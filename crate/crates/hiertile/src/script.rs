//! Text format for decomposition scripts.
//!
//! ```text
//! spec matmul 128 128 32 A:f32:col
//! tile 128 128 .to Block
//! epilog RF
//! split 8
//! load A SH
//! load B SH .pad 4
//! tile 64 32 .to Warp
//! tile 8 8 .to Thread
//! split 1
//! load A RF
//! load B RF
//! tile 1 1
//! done
//! ```
//!
//! One step per line, refinements as dotted suffixes, nested chains in
//! braces. `M`, `N` and `K` may stand in for the root dimensions anywhere a
//! size is expected. Micro-kernels are declared with a pattern line followed
//! by a fenced body. `#` and `//` start comments.

use std::fmt::{self, Write as _};

use hiertile_core::decomp::{DecompNode, LoadRefinements, Operand, PathSeg, SplitRefinements, TileRefinements};
use hiertile_core::index::{BinOp, IndexExpr};
use hiertile_core::spec::{
    make_matmul_spec, make_move_spec, ComputeLevel, ElemType, Layout, Major, MatrixRef, MemLevel, MicroKernel,
    MicroKernelSet, Spec,
};
use hiertile_core::validate::{validate, ValidationReport, Violation};
use thiserror::Error;

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum ScriptError {
    #[error("{line}:{col}: {msg}")]
    Parse { line: usize, col: usize, msg: String },
    #[error("line {line}: {msg}")]
    Resolve { line: usize, msg: String },
    #[error("{}: {violation}", line.map_or_else(|| "script".to_string(), |l| format!("line {l}")))]
    Invalid { line: Option<usize>, violation: Violation },
}

/// A size that is either literal or one of the root dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dim {
    Num(usize),
    M,
    N,
    K,
}

impl fmt::Display for Dim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dim::Num(n) => write!(f, "{n}"),
            Dim::M => f.write_str("M"),
            Dim::N => f.write_str("N"),
            Dim::K => f.write_str("K"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeDecl {
    MatMul { m: Dim, n: Dim, k: Dim },
    Move { rows: Dim, cols: Dim },
}

/// Element type and major order of one operand.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OperandDecl {
    pub elem: ElemType,
    pub major: Major,
}

impl Default for OperandDecl {
    fn default() -> Self {
        OperandDecl { elem: ElemType::F32, major: Major::ColMajor }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Header {
    pub shape: ShapeDecl,
    /// A, B, C for MatMul; SRC, DST for Move.
    pub operands: Vec<OperandDecl>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KernelDef {
    pub line: usize,
    pub name: String,
    pub shape: ShapeDecl,
    pub mems: Vec<MemLevel>,
    pub level: ComputeLevel,
    pub operands: Vec<OperandDecl>,
    pub body: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Step {
    pub line: usize,
    pub kind: StepKind,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StepKind {
    Tile { rows: Dim, cols: Dim, refine: TileRefinements },
    Split { k: Dim, refine: SplitRefinements },
    Load { operand: Operand, target: MemLevel, refine: LoadRefinements, nested: Option<Vec<Step>> },
    Epilog { acc: MemLevel, elem: Option<ElemType>, init: Option<Vec<Step>>, store: Option<Vec<Step>> },
    MmaTile,
    Done { kernel: Option<String> },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Script {
    pub header: Header,
    pub steps: Vec<Step>,
    pub kernels: Vec<KernelDef>,
}

/// Root dimension overrides applied before resolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DimOverrides {
    pub m: Option<usize>,
    pub n: Option<usize>,
    pub k: Option<usize>,
}

/// A parsed, resolved and validated script.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub script: Script,
    pub root: Spec,
    pub tree: DecompNode,
    pub report: ValidationReport,
}

pub fn parse(text: &str) -> Result<Script, ScriptError> {
    let toks = lex(text)?;
    Parser { toks, pos: 0 }.script()
}

/// Parses, resolves and validates.
pub fn load(text: &str, dims: DimOverrides) -> Result<Loaded, ScriptError> {
    let script = parse(text)?;
    let (root, tree) = script.resolve(dims)?;
    let report = validate(&root, &tree);
    if let Some(v) = report.violations.first() {
        return Err(ScriptError::Invalid { line: script.line_of(&v.path), violation: v.clone() });
    }
    Ok(Loaded { script, root, tree, report })
}

// ---------------------------------------------------------------- lexer

#[derive(Clone, Debug, PartialEq, Eq)]
enum Tok {
    Word(String),
    Num(i64),
    Sym(&'static str),
    Fence(String),
    Newline,
    Eof,
}

#[derive(Clone, Debug)]
struct Token {
    tok: Tok,
    line: usize,
    col: usize,
}

const SYMBOLS: [&str; 15] = ["<<", ">>", "{", "}", "(", ")", ".", ":", "+", "*", "/", "%", "&", "|", ","];

fn lex(text: &str) -> Result<Vec<Token>, ScriptError> {
    let mut out = Vec::new();
    let lines: Vec<&str> = text.lines().collect();
    let mut li = 0;
    while li < lines.len() {
        let line = lines[li];
        let lno = li + 1;
        if line.trim_start().starts_with("```") {
            let mut body = Vec::new();
            li += 1;
            loop {
                let Some(l) = lines.get(li) else {
                    return Err(ScriptError::Parse { line: lno, col: 1, msg: "unterminated fenced block".into() });
                };
                if l.trim_start().starts_with("```") {
                    break;
                }
                body.push(*l);
                li += 1;
            }
            out.push(Token { tok: Tok::Fence(body.join("\n")), line: lno, col: 1 });
            out.push(Token { tok: Tok::Newline, line: li + 1, col: 1 });
            li += 1;
            continue;
        }
        let b = line.as_bytes();
        let mut i = 0;
        while i < b.len() {
            let c = b[i] as char;
            let col = i + 1;
            if c.is_whitespace() {
                i += 1;
            } else if c == '#' || line[i..].starts_with("//") {
                break;
            } else if c.is_ascii_digit() {
                let start = i;
                let (radix, digits) = if line[i..].starts_with("0x") || line[i..].starts_with("0X") {
                    i += 2;
                    (16, i)
                } else {
                    (10, i)
                };
                while i < b.len() && (b[i] as char).is_ascii_alphanumeric() {
                    i += 1;
                }
                let v = i64::from_str_radix(&line[digits..i], radix).map_err(|_| ScriptError::Parse {
                    line: lno,
                    col,
                    msg: format!("bad number `{}`", &line[start..i]),
                })?;
                out.push(Token { tok: Tok::Num(v), line: lno, col });
            } else if c.is_ascii_alphabetic() || c == '_' {
                let start = i;
                while i < b.len() && ((b[i] as char).is_ascii_alphanumeric() || b[i] == b'_') {
                    i += 1;
                }
                if &line[start..i] == "FR" && b.get(i) == Some(&b'<') {
                    match line[i..].find('>') {
                        Some(j) => i += j + 1,
                        None => {
                            return Err(ScriptError::Parse { line: lno, col, msg: "unterminated `FR<`".into() })
                        }
                    }
                }
                out.push(Token { tok: Tok::Word(line[start..i].to_string()), line: lno, col });
            } else if let Some(s) = SYMBOLS.iter().find(|s| line[i..].starts_with(**s)) {
                out.push(Token { tok: Tok::Sym(s), line: lno, col });
                i += s.len();
            } else {
                return Err(ScriptError::Parse { line: lno, col, msg: format!("unexpected character `{c}`") });
            }
        }
        out.push(Token { tok: Tok::Newline, line: lno, col: line.len() + 1 });
        li += 1;
    }
    out.push(Token { tok: Tok::Eof, line: lines.len() + 1, col: 1 });
    Ok(out)
}

// ---------------------------------------------------------------- parser

struct Parser {
    toks: Vec<Token>,
    pos: usize,
}

type PResult<T> = Result<T, ScriptError>;

fn parse_major(s: &str) -> Option<Major> {
    match s {
        "row" => Some(Major::RowMajor),
        "col" => Some(Major::ColMajor),
        _ => Major::parse(s),
    }
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.toks[self.pos]
    }

    fn bump(&mut self) -> Token {
        let t = self.toks[self.pos].clone();
        if t.tok != Tok::Eof {
            self.pos += 1;
        }
        t
    }

    fn skip_newlines(&mut self) {
        while self.peek().tok == Tok::Newline {
            self.pos += 1;
        }
    }

    fn err<T>(&self, t: &Token, msg: impl Into<String>) -> PResult<T> {
        Err(ScriptError::Parse { line: t.line, col: t.col, msg: msg.into() })
    }

    fn word(&mut self, what: &str) -> PResult<(String, Token)> {
        let t = self.bump();
        match &t.tok {
            Tok::Word(w) => Ok((w.clone(), t.clone())),
            _ => self.err(&t, format!("expected {what}")),
        }
    }

    fn expect_sym(&mut self, s: &str) -> PResult<()> {
        let t = self.bump();
        if matches!(t.tok, Tok::Sym(x) if x == s) {
            Ok(())
        } else {
            self.err(&t, format!("expected `{s}`"))
        }
    }

    fn at_sym(&self, s: &str) -> bool {
        matches!(self.peek().tok, Tok::Sym(x) if x == s)
    }

    fn number(&mut self, what: &str) -> PResult<usize> {
        let t = self.bump();
        match t.tok {
            Tok::Num(v) if v >= 0 => Ok(v as usize),
            _ => self.err(&t, format!("expected {what}")),
        }
    }

    fn dim(&mut self) -> PResult<Dim> {
        let t = self.bump();
        match &t.tok {
            Tok::Num(v) if *v >= 0 => Ok(Dim::Num(*v as usize)),
            Tok::Word(w) if w == "M" => Ok(Dim::M),
            Tok::Word(w) if w == "N" => Ok(Dim::N),
            Tok::Word(w) if w == "K" => Ok(Dim::K),
            _ => self.err(&t, "expected a size or M, N, K"),
        }
    }

    fn end_of_line(&mut self) -> PResult<()> {
        let t = self.bump();
        match t.tok {
            Tok::Newline | Tok::Eof => Ok(()),
            _ => self.err(&t, "unexpected token at end of step"),
        }
    }

    fn mem(&mut self) -> PResult<MemLevel> {
        let (w, t) = self.word("a memory level")?;
        MemLevel::parse(&w).map_or_else(|| self.err(&t, format!("unknown memory level `{w}`")), Ok)
    }

    fn level(&mut self) -> PResult<ComputeLevel> {
        let (w, t) = self.word("a compute level")?;
        ComputeLevel::parse(&w).map_or_else(|| self.err(&t, format!("unknown compute level `{w}`")), Ok)
    }

    fn major(&mut self) -> PResult<Major> {
        let (w, t) = self.word("row or col")?;
        parse_major(&w).map_or_else(|| self.err(&t, format!("unknown layout `{w}`")), Ok)
    }

    fn shape(&mut self) -> PResult<ShapeDecl> {
        let (w, t) = self.word("matmul or move")?;
        match w.as_str() {
            "matmul" => Ok(ShapeDecl::MatMul { m: self.dim()?, n: self.dim()?, k: self.dim()? }),
            "move" => Ok(ShapeDecl::Move { rows: self.dim()?, cols: self.dim()? }),
            _ => self.err(&t, format!("expected matmul or move, found `{w}`")),
        }
    }

    /// `NAME:elem:major` clauses.
    fn operand_clauses(&mut self, shape: ShapeDecl) -> PResult<Vec<OperandDecl>> {
        let names: &[&str] = match shape {
            ShapeDecl::MatMul { .. } => &["A", "B", "C"],
            ShapeDecl::Move { .. } => &["SRC", "DST"],
        };
        let mut decls = vec![OperandDecl::default(); names.len()];
        while let Tok::Word(w) = &self.peek().tok {
            if self.toks[self.pos + 1].tok != Tok::Sym(":") {
                break;
            }
            let w = w.clone();
            let t = self.bump();
            let Some(i) = names.iter().position(|n| *n == w) else {
                return self.err(&t, format!("unknown operand `{w}`"));
            };
            self.expect_sym(":")?;
            let (e, et) = self.word("an element type")?;
            decls[i].elem = ElemType::parse(&e).map_or_else(|| self.err(&et, format!("unknown element type `{e}`")), Ok)?;
            self.expect_sym(":")?;
            decls[i].major = self.major()?;
        }
        Ok(decls)
    }

    fn script(mut self) -> PResult<Script> {
        self.skip_newlines();
        let (w, t) = self.word("`spec`")?;
        if w != "spec" {
            return self.err(&t, "script must start with `spec`");
        }
        let shape = self.shape()?;
        let operands = self.operand_clauses(shape)?;
        self.end_of_line()?;
        let header = Header { shape, operands };
        let mut steps = Vec::new();
        let mut kernels = Vec::new();
        let mut finished = false;
        loop {
            self.skip_newlines();
            let t = self.peek().clone();
            match &t.tok {
                Tok::Eof => break,
                Tok::Word(w) if w == "microkernel" => kernels.push(self.kernel()?),
                _ if finished => return self.err(&t, "steps after `done`"),
                _ => {
                    let s = self.step()?;
                    finished = matches!(s.kind, StepKind::Done { .. });
                    steps.push(s);
                }
            }
        }
        if !finished {
            let t = self.peek().clone();
            return self.err(&t, "chain does not end with `done`");
        }
        Ok(Script { header, steps, kernels })
    }

    fn kernel(&mut self) -> PResult<KernelDef> {
        let (_, t) = self.word("microkernel")?;
        let (name, _) = self.word("a kernel name")?;
        let shape = self.shape()?;
        let n = match shape {
            ShapeDecl::MatMul { .. } => 3,
            ShapeDecl::Move { .. } => 2,
        };
        let mut mems = Vec::new();
        for _ in 0..n {
            mems.push(self.mem()?);
        }
        let level = self.level()?;
        let operands = self.operand_clauses(shape)?;
        self.end_of_line()?;
        self.skip_newlines();
        let f = self.bump();
        let Tok::Fence(body) = f.tok else {
            return self.err(&f, "expected a fenced kernel body");
        };
        Ok(KernelDef { line: t.line, name, shape, mems, level, operands, body })
    }

    /// Steps up to and including `done`, inside braces.
    fn nested_chain(&mut self) -> PResult<Vec<Step>> {
        let mut steps = Vec::new();
        loop {
            self.skip_newlines();
            if self.at_sym("}") {
                let t = self.peek().clone();
                return self.err(&t, "nested chain does not end with `done`");
            }
            let s = self.step()?;
            let done = matches!(s.kind, StepKind::Done { .. });
            steps.push(s);
            if done {
                self.skip_newlines();
                self.expect_sym("}")?;
                return Ok(steps);
            }
        }
    }

    fn step(&mut self) -> PResult<Step> {
        let (w, t) = self.word("a step")?;
        let line = t.line;
        let kind = match w.as_str() {
            "tile" => {
                let (rows, cols) = (self.dim()?, self.dim()?);
                let mut refine = TileRefinements::default();
                while self.at_sym(".") {
                    self.bump();
                    let (r, rt) = self.word("a refinement")?;
                    match r.as_str() {
                        "to" => refine.to = Some(self.level()?),
                        "unroll" => refine.unroll = true,
                        "layout" => refine.layout = Some(self.major()?),
                        "swizzle" => {
                            self.expect_sym("(")?;
                            let e = self.expr()?;
                            self.expect_sym(")")?;
                            refine.swizzle = Some(e);
                        }
                        _ => return self.err(&rt, format!("`{r}` does not refine a tile")),
                    }
                }
                StepKind::Tile { rows, cols, refine }
            }
            "split" => {
                let k = self.dim()?;
                let mut refine = SplitRefinements::default();
                while self.at_sym(".") {
                    self.bump();
                    let (r, rt) = self.word("a refinement")?;
                    match r.as_str() {
                        "unroll" => refine.unroll = true,
                        "sync" => refine.sync = true,
                        _ => return self.err(&rt, format!("`{r}` does not refine a split")),
                    }
                }
                StepKind::Split { k, refine }
            }
            "load" => {
                let (o, ot) = self.word("A, B or SRC")?;
                let operand = match o.as_str() {
                    "A" => Operand::A,
                    "B" => Operand::B,
                    "SRC" => Operand::Src,
                    _ => return self.err(&ot, format!("unknown operand `{o}`")),
                };
                let target = self.mem()?;
                let mut refine = LoadRefinements::default();
                while self.at_sym(".") {
                    self.bump();
                    let (r, rt) = self.word("a refinement")?;
                    match r.as_str() {
                        "noSync" => refine.no_sync = true,
                        "storageLayout" => refine.storage_layout = Some(self.major()?),
                        "pad" => refine.pad = self.number("a pad amount")?,
                        "align" => refine.align = Some(self.number("an alignment")?),
                        "reuseBuffer" => refine.reuse_buffer = true,
                        _ => return self.err(&rt, format!("`{r}` does not refine a load")),
                    }
                }
                let nested = if self.at_sym("{") {
                    self.bump();
                    Some(self.nested_chain()?)
                } else {
                    None
                };
                StepKind::Load { operand, target, refine, nested }
            }
            "epilog" => {
                let acc = self.mem()?;
                let elem = match &self.peek().tok {
                    Tok::Word(e) => {
                        let e = e.clone();
                        let et = self.bump();
                        Some(ElemType::parse(&e).map_or_else(|| self.err(&et, format!("unknown element type `{e}`")), Ok)?)
                    }
                    _ => None,
                };
                let (mut init, mut store) = (None, None);
                while self.at_sym("{") {
                    self.bump();
                    let (which, wt) = self.word("init or store")?;
                    self.expect_sym(":")?;
                    let chain = self.nested_chain()?;
                    match which.as_str() {
                        "init" if init.is_none() && store.is_none() => init = Some(chain),
                        "store" if store.is_none() => store = Some(chain),
                        _ => return self.err(&wt, format!("unexpected `{which}` block")),
                    }
                }
                StepKind::Epilog { acc, elem, init, store }
            }
            "mmaTile" => StepKind::MmaTile,
            "done" => {
                let kernel = match &self.peek().tok {
                    Tok::Word(k) => {
                        let k = k.clone();
                        self.bump();
                        Some(k)
                    }
                    _ => None,
                };
                StepKind::Done { kernel }
            }
            _ => return self.err(&t, format!("unknown step `{w}`")),
        };
        if !matches!(self.peek().tok, Tok::Sym("}")) {
            self.end_of_line()?;
        }
        Ok(Step { line, kind })
    }

    // `|` and `&` associate to the right, everything else to the left.
    fn expr(&mut self) -> PResult<IndexExpr> {
        let lhs = self.and_expr()?;
        if self.skip_at("|") {
            return Ok(IndexExpr::bin(BinOp::BitOr, lhs, self.expr()?));
        }
        Ok(lhs)
    }

    fn and_expr(&mut self) -> PResult<IndexExpr> {
        let lhs = self.shift_expr()?;
        if self.skip_at("&") {
            return Ok(IndexExpr::bin(BinOp::BitAnd, lhs, self.and_expr()?));
        }
        Ok(lhs)
    }

    fn skip_at(&mut self, s: &str) -> bool {
        self.skip_newlines();
        if self.at_sym(s) {
            self.bump();
            self.skip_newlines();
            true
        } else {
            false
        }
    }

    fn shift_expr(&mut self) -> PResult<IndexExpr> {
        let mut e = self.add_expr()?;
        loop {
            if self.skip_at("<<") {
                e = IndexExpr::bin(BinOp::Shl, e, self.add_expr()?);
            } else if self.skip_at(">>") {
                e = IndexExpr::bin(BinOp::Shr, e, self.add_expr()?);
            } else {
                return Ok(e);
            }
        }
    }

    fn add_expr(&mut self) -> PResult<IndexExpr> {
        let mut e = self.mul_expr()?;
        while self.skip_at("+") {
            e = IndexExpr::bin(BinOp::Add, e, self.mul_expr()?);
        }
        Ok(e)
    }

    fn mul_expr(&mut self) -> PResult<IndexExpr> {
        let mut e = self.atom()?;
        loop {
            let op = if self.skip_at("*") {
                BinOp::Mul
            } else if self.skip_at("/") {
                BinOp::Div
            } else if self.skip_at("%") {
                BinOp::Mod
            } else {
                return Ok(e);
            };
            e = IndexExpr::bin(op, e, self.atom()?);
        }
    }

    fn atom(&mut self) -> PResult<IndexExpr> {
        self.skip_newlines();
        let t = self.bump();
        match &t.tok {
            Tok::Num(v) => Ok(IndexExpr::Const(*v)),
            Tok::Word(w) => Ok(IndexExpr::Var(w.clone())),
            Tok::Sym("(") => {
                let e = self.expr()?;
                self.skip_newlines();
                self.expect_sym(")")?;
                Ok(e)
            }
            _ => self.err(&t, "expected an expression"),
        }
    }
}

// ---------------------------------------------------------------- resolution

impl Script {
    fn root_dims(&self, o: DimOverrides) -> (usize, usize, usize) {
        let num = |d: Dim| match d {
            Dim::Num(n) => n,
            _ => 0,
        };
        match self.header.shape {
            ShapeDecl::MatMul { m, n, k } => {
                (o.m.unwrap_or(num(m)), o.n.unwrap_or(num(n)), o.k.unwrap_or(num(k)))
            }
            ShapeDecl::Move { rows, cols } => (o.m.unwrap_or(num(rows)), o.n.unwrap_or(num(cols)), 0),
        }
    }

    /// Builds the root spec and tree. `M`, `N`, `K` resolve to the
    /// (overridden) root dimensions.
    pub fn resolve(&self, o: DimOverrides) -> Result<(Spec, DecompNode), ScriptError> {
        let dims = self.root_dims(o);
        let at = |d: Dim| match d {
            Dim::Num(n) => n,
            Dim::M => dims.0,
            Dim::N => dims.1,
            Dim::K => dims.2,
        };
        let bad = |line: usize, msg: String| ScriptError::Resolve { line, msg };
        let literal = match self.header.shape {
            ShapeDecl::MatMul { m, n, k } => vec![m, n, k],
            ShapeDecl::Move { rows, cols } => vec![rows, cols],
        };
        if literal.iter().any(|d| !matches!(d, Dim::Num(_))) {
            return Err(bad(1, "root dimensions must be literal".into()));
        }
        let shape = match self.header.shape {
            ShapeDecl::MatMul { .. } => ShapeDecl::MatMul { m: Dim::M, n: Dim::N, k: Dim::K },
            ShapeDecl::Move { .. } => ShapeDecl::Move { rows: Dim::M, cols: Dim::N },
        };
        let root = build_spec(shape, &[MemLevel::GL; 3], ComputeLevel::Kernel, &self.header.operands, at)
            .map_err(|e| bad(1, e))?;
        let mut set = MicroKernelSet::new();
        for k in &self.kernels {
            let pattern = build_spec(k.shape, &k.mems, k.level, &k.operands, at).map_err(|e| bad(k.line, e))?;
            let mk = MicroKernel::new(&k.name, pattern, &k.body).map_err(|e| bad(k.line, e.to_string()))?;
            set.register(mk).map_err(|e| bad(k.line, e.to_string()))?;
        }
        let tree = build_chain(&self.steps, &set, &at)?;
        Ok((root, tree))
    }

    /// Script line of the step a validation path points at.
    pub fn line_of(&self, path: &[PathSeg]) -> Option<usize> {
        let mut chain = &self.steps;
        let mut idx = 0;
        for seg in path {
            let nested = match (seg, &chain.get(idx)?.kind) {
                (PathSeg::Child, _) => {
                    idx += 1;
                    continue;
                }
                (PathSeg::MoveDecomp, StepKind::Load { nested, .. }) => nested.as_ref(),
                (PathSeg::Init, StepKind::Epilog { init, .. }) => init.as_ref(),
                (PathSeg::Store, StepKind::Epilog { store, .. }) => store.as_ref(),
                _ => None,
            };
            match nested {
                Some(n) => {
                    chain = n;
                    idx = 0;
                }
                None => return chain.get(idx).map(|s| s.line),
            }
        }
        chain.get(idx).map(|s| s.line)
    }
}

fn build_spec(
    shape: ShapeDecl,
    mems: &[MemLevel],
    level: ComputeLevel,
    ops: &[OperandDecl],
    at: impl Fn(Dim) -> usize,
) -> Result<Spec, String> {
    let layout = |d: &OperandDecl| Layout::new(d.major, 0);
    match shape {
        ShapeDecl::MatMul { m, n, k } => make_matmul_spec(
            at(m),
            at(n),
            at(k),
            [ops[0].elem, ops[1].elem, ops[2].elem],
            [mems[0], mems[1], mems[2]],
            [layout(&ops[0]), layout(&ops[1]), layout(&ops[2])],
            level,
        )
        .map_err(|e| e.to_string()),
        ShapeDecl::Move { rows, cols } => {
            let (r, c) = (at(rows), at(cols));
            let src = MatrixRef::new("SRC", r, c, ops[0].elem, mems[0], layout(&ops[0]));
            let dst = MatrixRef::new("DST", r, c, ops[1].elem, mems[1], layout(&ops[1]));
            make_move_spec(src, dst, level).map_err(|e| e.to_string())
        }
    }
}

fn build_chain(steps: &[Step], set: &MicroKernelSet, at: &dyn Fn(Dim) -> usize) -> Result<DecompNode, ScriptError> {
    let nested = |s: &Option<Vec<Step>>| -> Result<Option<Box<DecompNode>>, ScriptError> {
        s.as_ref().map(|c| build_chain(c, set, at).map(Box::new)).transpose()
    };
    let mut node: Option<DecompNode> = None;
    for s in steps.iter().rev() {
        let child = || Box::new(node.clone().expect("chain ends with done"));
        node = Some(match &s.kind {
            StepKind::Done { kernel } => {
                let micro_kernel = match kernel {
                    Some(name) => Some(set.get(name).cloned().ok_or_else(|| ScriptError::Resolve {
                        line: s.line,
                        msg: format!("no micro-kernel named `{name}`"),
                    })?),
                    None => None,
                };
                DecompNode::Done { micro_kernel }
            }
            StepKind::Tile { rows, cols, refine } => {
                DecompNode::Tile { rows: at(*rows), cols: at(*cols), refine: refine.clone(), child: child() }
            }
            StepKind::Split { k, refine } => DecompNode::Split { k: at(*k), refine: *refine, child: child() },
            StepKind::Load { operand, target, refine, nested: n } => DecompNode::Load {
                operand: *operand,
                target: *target,
                move_decomp: nested(n)?,
                refine: *refine,
                child: child(),
            },
            StepKind::Epilog { acc, elem, init, store } => DecompNode::Epilog {
                acc: *acc,
                acc_elem: *elem,
                init: nested(init)?,
                store: nested(store)?,
                child: child(),
            },
            StepKind::MmaTile => DecompNode::MmaTile { child: child() },
        });
    }
    node.ok_or(ScriptError::Resolve { line: 1, msg: "empty chain".into() })
}

// ---------------------------------------------------------------- printer

fn major_word(m: Major) -> &'static str {
    match m {
        Major::RowMajor => "row",
        Major::ColMajor => "col",
    }
}

fn shape_text(s: ShapeDecl) -> String {
    match s {
        ShapeDecl::MatMul { m, n, k } => format!("matmul {m} {n} {k}"),
        ShapeDecl::Move { rows, cols } => format!("move {rows} {cols}"),
    }
}

fn clauses_text(shape: ShapeDecl, ops: &[OperandDecl]) -> String {
    let names: &[&str] = match shape {
        ShapeDecl::MatMul { .. } => &["A", "B", "C"],
        ShapeDecl::Move { .. } => &["SRC", "DST"],
    };
    let mut s = String::new();
    for (n, d) in names.iter().zip(ops) {
        if *d != OperandDecl::default() {
            let _ = write!(s, " {n}:{}:{}", d.elem.name().to_lowercase(), major_word(d.major));
        }
    }
    s
}

fn mem_text(m: MemLevel) -> String {
    if m == MemLevel::WMMA_FR {
        "FR".into()
    } else {
        m.full()
    }
}

fn print_chain(out: &mut String, steps: &[Step], depth: usize) {
    let pad = "    ".repeat(depth);
    for s in steps {
        out.push_str(&pad);
        match &s.kind {
            StepKind::Tile { rows, cols, refine } => {
                let _ = write!(out, "tile {rows} {cols}");
                if let Some(l) = refine.to {
                    let _ = write!(out, " .to {}", l.name());
                }
                if refine.unroll {
                    out.push_str(" .unroll");
                }
                if let Some(m) = refine.layout {
                    let _ = write!(out, " .layout {}", major_word(m));
                }
                if let Some(e) = &refine.swizzle {
                    let c = e.emit_c();
                    if c.starts_with('(') {
                        let _ = write!(out, " .swizzle {c}");
                    } else {
                        let _ = write!(out, " .swizzle ({c})");
                    }
                }
            }
            StepKind::Split { k, refine } => {
                let _ = write!(out, "split {k}");
                if refine.unroll {
                    out.push_str(" .unroll");
                }
                if refine.sync {
                    out.push_str(" .sync");
                }
            }
            StepKind::Load { operand, target, refine, nested } => {
                let _ = write!(out, "load {} {}", operand.name(), mem_text(*target));
                if refine.no_sync {
                    out.push_str(" .noSync");
                }
                if let Some(m) = refine.storage_layout {
                    let _ = write!(out, " .storageLayout {}", major_word(m));
                }
                if refine.pad > 0 {
                    let _ = write!(out, " .pad {}", refine.pad);
                }
                if let Some(a) = refine.align {
                    let _ = write!(out, " .align {a}");
                }
                if refine.reuse_buffer {
                    out.push_str(" .reuseBuffer");
                }
                if let Some(n) = nested {
                    out.push_str(" {\n");
                    print_chain(out, n, depth + 1);
                    out.push_str(&pad);
                    out.push('}');
                }
            }
            StepKind::Epilog { acc, elem, init, store } => {
                let _ = write!(out, "epilog {}", mem_text(*acc));
                if let Some(e) = elem {
                    let _ = write!(out, " {}", e.name().to_lowercase());
                }
                for (name, chain) in [("init", init), ("store", store)] {
                    if let Some(c) = chain {
                        let _ = writeln!(out, " {{ {name}:");
                        print_chain(out, c, depth + 1);
                        out.push_str(&pad);
                        out.push('}');
                    }
                }
            }
            StepKind::MmaTile => out.push_str("mmaTile"),
            StepKind::Done { kernel } => {
                out.push_str("done");
                if let Some(k) = kernel {
                    let _ = write!(out, " {k}");
                }
            }
        }
        out.push('\n');
    }
}

impl fmt::Display for Script {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let h = &self.header;
        let mut out = format!("spec {}{}\n", shape_text(h.shape), clauses_text(h.shape, &h.operands));
        print_chain(&mut out, &self.steps, 0);
        for k in &self.kernels {
            let mems: Vec<String> = k.mems.iter().map(|m| mem_text(*m)).collect();
            let _ = writeln!(
                out,
                "\nmicrokernel {} {} {} {}{}",
                k.name,
                shape_text(k.shape),
                mems.join(" "),
                k.level.name(),
                clauses_text(k.shape, &k.operands)
            );
            let _ = writeln!(out, "```\n{}\n```", k.body);
        }
        f.write_str(&out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const L2: &str = "spec matmul 128 128 32
tile 128 128 .to Block
epilog RF
split 8
load A SH
load B SH
tile 64 32 .to Warp
tile 8 8 .to Thread
split 1
load A RF
load B RF
tile 1 1
done
";

    #[test]
    fn round_trip() {
        let s = parse(L2).unwrap();
        assert_eq!(s.to_string(), L2);
        assert_eq!(s.steps.len(), 12);
        assert_eq!(s.steps[11].line, 13);
    }

    #[test]
    fn nested_blocks_round_trip() {
        let text = "spec matmul 64 64 16 A:f16:row B:f16:col
tile 64 64 .to Block
epilog FR f32 { init:
    tile 16 16 .to Warp
    done
} { store:
    tile 16 16 .to Warp
    done
}
split 16
tile 16 16 .to Warp
load A FR {
    done
}
load B FR {
    done
}
done
";
        let s = parse(text).unwrap();
        assert_eq!(s.to_string(), text);
    }

    #[test]
    fn swizzle_expression() {
        let text = "spec matmul 1024 1024 8\ntile 128 128 .to Block .swizzle (((id >> 1) & 7) | ((id & 48) | ((id & 1) << 3)))\ndone\n";
        let s = parse(text).unwrap();
        let StepKind::Tile { refine, .. } = &s.steps[0].kind else { panic!() };
        assert_eq!(refine.swizzle, Some(hiertile_core::index::maxwell_swizzle()));
        assert_eq!(s.to_string(), text);
        let loose = parse("spec matmul 8 8 8\ntile 8 8 .swizzle (id >> 1 & 7 | id & 48 | (id & 1) << 3)\ndone\n").unwrap();
        let StepKind::Tile { refine: r2, .. } = &loose.steps[0].kind else { panic!() };
        assert_eq!(r2.swizzle, Some(hiertile_core::index::maxwell_swizzle()));
    }

    #[test]
    fn errors_carry_positions() {
        let e = parse("spec matmul 8 8 8\ntile 8 8 .bogus\ndone\n").unwrap_err();
        assert_eq!(e, ScriptError::Parse { line: 2, col: 11, msg: "`bogus` does not refine a tile".into() });
        let e = parse("spec matmul 8 8 8\ntile 8 8\n").unwrap_err();
        assert!(matches!(e, ScriptError::Parse { line: 3, .. }));
    }

    #[test]
    fn validation_error_points_at_line() {
        let e = load("spec matmul 8 8 8\ntile 3 8\ndone\n", DimOverrides::default()).unwrap_err();
        assert!(matches!(e, ScriptError::Invalid { line: Some(2), .. }), "{e:?}");
    }

    #[test]
    fn kernel_dims_follow_overrides() {
        let text = "spec matmul 8 8 8
tile 8 8 .to Block
tile 1 1 .to Thread
load A RF
load B RF
done dot

microkernel dot matmul 1 1 K RF RF GL Thread
```
float acc = 0.0f;
for (int k = 0; k < ${K}; k++) { acc += ${A}[k * ${A_CS}] * ${B}[k * ${B_RS}]; }
*${C} = acc;
```
";
        let s = parse(text).unwrap();
        assert_eq!(s.to_string(), text);
        let (root, tree) = s.resolve(DimOverrides { k: Some(16), ..Default::default() }).unwrap();
        assert_eq!(root.matmul_dims(), Some((8, 8, 16)));
        let mut n = &tree;
        while let Some(c) = n.child() {
            n = c;
        }
        let DecompNode::Done { micro_kernel: Some(mk) } = n else { panic!() };
        assert_eq!(mk.pattern.matmul_dims(), Some((1, 1, 16)));
    }
}
