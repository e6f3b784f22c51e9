//! CUDA-flavoured C emission for lowered kernels.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write;

use thiserror::Error;

use crate::decomp::DecompNode;
use crate::index::{cst, IndexExpr};
use crate::lower::{lower, Access, Buffer, ExecOp, Kernel, LowerError, Stmt};
use crate::spec::{ElemType, Major, MemLevel, Spec, SpecKind};
use crate::validate::LaunchConfig;

/// Default per-block shared memory budget.
pub const SHARED_LIMIT: usize = 48 * 1024;

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum CodegenError {
    #[error(transparent)]
    Lower(#[from] LowerError),
    #[error("shared memory plan needs {bytes} bytes, limit is {limit}")]
    SharedCapacity { bytes: usize, limit: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KernelSource {
    pub source: String,
    pub entry: String,
    pub launch: LaunchConfig,
    pub shared_bytes: usize,
}

pub fn generate(root: &Spec, tree: &DecompNode) -> Result<KernelSource, CodegenError> {
    let k = lower(root, tree)?;
    emit_kernel(&k)
}

pub fn emit_kernel(k: &Kernel) -> Result<KernelSource, CodegenError> {
    let bytes = k.buffers.shared_bytes();
    if bytes > SHARED_LIMIT {
        return Err(CodegenError::SharedCapacity { bytes, limit: SHARED_LIMIT });
    }
    let entry = entry_name(&k.root);
    let mut e = Emitter { k, out: String::new(), depth: 0 };
    e.header(&entry);
    e.depth = 1;
    e.declarations();
    let mut map = BTreeMap::new();
    e.stmts(&k.body, &mut map);
    e.out.push_str("}\n");
    Ok(KernelSource { source: e.out, entry, launch: k.launch, shared_bytes: bytes })
}

pub fn entry_name(root: &Spec) -> String {
    match &root.kind {
        SpecKind::MatMul { a, c, .. } => format!("matmul_{}x{}x{}", c.rows, c.cols, a.cols),
        SpecKind::Move { dst, .. } => format!("move_{}x{}", dst.rows, dst.cols),
        SpecKind::LaneMma { .. } => "mma_lane".to_string(),
    }
}

/// Drops one pair of parentheses around the whole expression.
fn bare(s: String) -> String {
    let b = s.as_bytes();
    if b.first() != Some(&b'(') || b.last() != Some(&b')') {
        return s;
    }
    let mut depth = 0;
    for (i, &c) in b.iter().enumerate() {
        match c {
            b'(' => depth += 1,
            b')' => {
                depth -= 1;
                if depth == 0 && i != b.len() - 1 {
                    return s;
                }
            }
            _ => {}
        }
    }
    s[1..s.len() - 1].to_string()
}

fn zero(elem: ElemType) -> &'static str {
    match elem {
        ElemType::F32 => "0.0f",
        ElemType::F16 => "__float2half(0.0f)",
    }
}

/// Substitutes `${NAME}` placeholders. Unit factors and zero terms written
/// directly next to a placeholder are dropped along with it.
fn fill(template: &str, vals: &BTreeMap<&str, String>) -> String {
    let mut s = template.to_string();
    for (k, v) in vals {
        let p = format!("${{{}}}", k);
        let op = match v.as_str() {
            "1" => Some('*'),
            "0" => Some('+'),
            _ => None,
        };
        if let Some(op) = op {
            s = drop_identity(&s, &p, op);
        }
        s = s.replace(&p, v);
    }
    s
}

/// Removes ` op P` and `P op ` where that cannot change how the
/// surrounding expression groups.
fn drop_identity(s: &str, p: &str, op: char) -> String {
    let binds_tighter = |t: &str| ["*", "/", "%"].iter().any(|o| t == *o);
    let mut out = String::new();
    let mut rest = s;
    while let Some(i) = rest.find(p) {
        let (head, tail) = (&rest[..i], &rest[i + p.len()..]);
        let before = head.strip_suffix(' ').and_then(|h| h.strip_suffix(op)).and_then(|h| h.strip_suffix(' '));
        let after = tail.strip_prefix(' ').and_then(|t| t.strip_prefix(op)).and_then(|t| t.strip_prefix(' '));
        let next_op = tail.trim_start().get(..1).unwrap_or("");
        let prev_op = head.trim_end().get(head.trim_end().len().saturating_sub(1)..).unwrap_or("");
        match (before, after) {
            (Some(h), _) if op == '*' || !binds_tighter(next_op) => {
                out.push_str(h);
                rest = tail;
            }
            (_, Some(t)) if !(prev_op == "/" || prev_op == "%" || (op == '+' && (prev_op == "*" || prev_op == "-"))) => {
                out.push_str(head);
                rest = t;
            }
            _ => {
                out.push_str(head);
                out.push_str(p);
                rest = tail;
            }
        }
    }
    out.push_str(rest);
    out
}

struct Emitter<'k> {
    k: &'k Kernel,
    out: String,
    depth: usize,
}

type Subst = BTreeMap<String, IndexExpr>;

impl Emitter<'_> {
    fn line(&mut self, s: &str) {
        for _ in 0..self.depth {
            self.out.push_str("    ");
        }
        self.out.push_str(s);
        self.out.push('\n');
    }

    fn header(&mut self, entry: &str) {
        let k = self.k;
        let _ = writeln!(self.out, "// {}", k.root.short_form());
        self.out.push_str("#include <cuda_fp16.h>\n");
        if k.uses_wmma() {
            self.out.push_str("#include <mma.h>\nusing namespace nvcuda;\n");
        }
        self.out.push('\n');
        match &k.root.kind {
            SpecKind::MatMul { a, c, .. } => {
                let _ = writeln!(self.out, "constexpr int M = {};", c.rows);
                let _ = writeln!(self.out, "constexpr int N = {};", c.cols);
                let _ = writeln!(self.out, "constexpr int K = {};", a.cols);
            }
            SpecKind::Move { dst, .. } => {
                let _ = writeln!(self.out, "constexpr int ROWS = {};", dst.rows);
                let _ = writeln!(self.out, "constexpr int COLS = {};", dst.cols);
            }
            SpecKind::LaneMma { .. } => {}
        }
        let l = k.launch;
        let _ = writeln!(self.out, "\n// launch: grid({}, {}), block({})", l.grid.0, l.grid.1, l.block_threads);
        let params = k.params();
        let last = params.len().saturating_sub(1);
        let args: Vec<String> = params
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let cv = if i == last { "" } else { "const " };
                format!("{}{}* __restrict__ {}", cv, b.elem.c_type(), b.name)
            })
            .collect();
        let _ = writeln!(self.out, "extern \"C\" __global__ void {}({}) {{", entry, args.join(", "));
    }

    fn declarations(&mut self) {
        let k = self.k;
        let bufs = &k.buffers.buffers;
        for (gi, g) in k.buffers.groups.iter().enumerate() {
            if let [only] = g.members[..] {
                let b = &bufs[only];
                self.line(&format!(
                    "__shared__ __align__({}) {} {}[{}];",
                    g.align,
                    b.elem.c_type(),
                    b.name,
                    b.extent * b.replicas
                ));
            } else {
                self.line(&format!("__shared__ __align__({}) unsigned char smem{}[{}];", g.align, gi, g.bytes));
                for &m in &g.members {
                    let b = &bufs[m];
                    let t = b.elem.c_type();
                    self.line(&format!("{t}* {} = reinterpret_cast<{t}*>(smem{gi});", b.name));
                }
            }
        }
        for b in bufs.iter().filter(|b| b.param.is_none()) {
            match b.mem {
                MemLevel::RF => self.line(&format!("{} {}[{}];", b.elem.c_type(), b.name, b.extent)),
                MemLevel::FR { m, n, k: kk } => {
                    let ty = match b.role {
                        'A' | 'B' => format!(
                            "wmma::fragment<wmma::matrix_{}, {m}, {n}, {kk}, {}, wmma::{}>",
                            b.role.to_ascii_lowercase(),
                            b.elem.c_type(),
                            match b.layout.major {
                                Major::RowMajor => "row_major",
                                Major::ColMajor => "col_major",
                            }
                        ),
                        _ => format!("wmma::fragment<wmma::accumulator, {m}, {n}, {kk}, {}>", b.elem.c_type()),
                    };
                    self.line(&format!("{} {}[{}];", ty, b.name, b.extent));
                }
                _ => {}
            }
        }
    }

    fn expr(&self, e: &IndexExpr, map: &Subst) -> String {
        bare(e.substitute_all(map).simplify().emit_c())
    }

    fn buf(&self, a: &Access) -> &Buffer {
        &self.k.buffers.buffers[a.buf]
    }

    fn elem_ref(&self, a: &Access, map: &Subst) -> String {
        format!("{}[{}]", self.buf(a).name, self.expr(&a.index, map))
    }

    fn offset_ref(&self, a: &Access, off: i64, map: &Subst) -> String {
        let e = a.index.clone().add(cst(off));
        format!("{}[{}]", self.buf(a).name, self.expr(&e, map))
    }

    fn ptr(&self, a: &Access, map: &Subst) -> String {
        let idx = a.index.substitute_all(map).simplify();
        if idx.as_const() == Some(0) {
            self.buf(a).name.clone()
        } else {
            format!("&{}", self.elem_ref(a, map))
        }
    }

    fn stmts(&mut self, body: &[Stmt], map: &mut Subst) {
        for s in body {
            self.stmt(s, map);
        }
    }

    fn stmt(&mut self, s: &Stmt, map: &mut Subst) {
        let vars = &self.k.vars;
        match s {
            Stmt::Loop { var, count, unroll, body } => {
                let name = vars[*var].clone();
                if *unroll || *count == 1 {
                    for i in 0..*count {
                        map.insert(name.clone(), cst(i as i64));
                        self.stmts(body, map);
                    }
                    map.remove(&name);
                } else {
                    self.line(&format!("for (int {name} = 0; {name} < {count}; {name}++) {{"));
                    self.depth += 1;
                    self.stmts(body, map);
                    self.depth -= 1;
                    self.line("}");
                }
            }
            Stmt::Coop { var, start, step, end, body } => {
                let name = vars[*var].clone();
                let start = start.substitute_all(map).simplify();
                if *end == *step {
                    map.insert(name.clone(), start);
                    self.stmts(body, map);
                    map.remove(&name);
                } else if *end < *step {
                    self.line(&format!("if ({} < {end}) {{", self.expr(&start, map)));
                    self.depth += 1;
                    map.insert(name.clone(), start);
                    self.stmts(body, map);
                    map.remove(&name);
                    self.depth -= 1;
                    self.line("}");
                } else {
                    let st = self.expr(&start, map);
                    self.line(&format!("for (int {name} = {st}; {name} < {end}; {name} += {step}) {{"));
                    self.depth += 1;
                    self.stmts(body, map);
                    self.depth -= 1;
                    self.line("}");
                }
            }
            Stmt::Sync => {
                if !self.out.ends_with("__syncthreads();\n") {
                    self.line("__syncthreads();");
                }
            }
            Stmt::Exec(x) => {
                let mut v: BTreeMap<&str, String> = BTreeMap::new();
                match &x.op {
                    ExecOp::Fma { c, a, b } => {
                        v.insert("A", self.elem_ref(a, map));
                        v.insert("B", self.elem_ref(b, map));
                        v.insert("C", self.elem_ref(c, map));
                    }
                    ExecOp::Copy { dst, src } => {
                        v.insert("DST", self.elem_ref(dst, map));
                        v.insert("SRC", self.elem_ref(src, map));
                    }
                    ExecOp::Zero { dst } => {
                        v.insert("DST", self.elem_ref(dst, map));
                        v.insert("ZERO", zero(self.buf(dst).elem).to_string());
                    }
                    ExecOp::WmmaLoad { frag, src, ld, .. } => {
                        v.insert("DST", self.elem_ref(frag, map));
                        v.insert("SRC", self.ptr(src, map));
                        v.insert("LDSRC", ld.to_string());
                    }
                    ExecOp::WmmaStore { dst, frag, ld, major } => {
                        v.insert("DST", self.ptr(dst, map));
                        v.insert("SRC", self.elem_ref(frag, map));
                        v.insert("LDDST", ld.to_string());
                        let l = match major {
                            Major::RowMajor => "wmma::mem_row_major",
                            Major::ColMajor => "wmma::mem_col_major",
                        };
                        v.insert("DST_LAYOUT", l.to_string());
                    }
                    ExecOp::WmmaFill { frag } => {
                        v.insert("DST", self.elem_ref(frag, map));
                        v.insert("ZERO", zero(self.buf(frag).elem).to_string());
                    }
                    ExecOp::WmmaMma { c, a, b } => {
                        v.insert("A", self.elem_ref(a, map));
                        v.insert("B", self.elem_ref(b, map));
                        v.insert("C", self.elem_ref(c, map));
                    }
                    ExecOp::Hmma { c, a, b } => {
                        let reg = |acc: &Access, i: i64| {
                            format!("*reinterpret_cast<unsigned*>(&{})", self.offset_ref(acc, 2 * i, map))
                        };
                        let names = [("C0", c, 0), ("C1", c, 1), ("C2", c, 2), ("C3", c, 3)];
                        let more = [("A0", a, 0), ("A1", a, 1), ("B0", b, 0), ("B1", b, 1)];
                        for (n, acc, i) in names.into_iter().chain(more) {
                            v.insert(n, reg(acc, i));
                        }
                    }
                    ExecOp::MicroKernel { dims, operands, .. } => {
                        let is_move = operands.iter().any(|o| o.0 == 'D');
                        if is_move {
                            v.insert("ROWS", dims.0.to_string());
                            v.insert("COLS", dims.1.to_string());
                        } else {
                            v.insert("M", dims.0.to_string());
                            v.insert("N", dims.1.to_string());
                            v.insert("K", dims.2.to_string());
                        }
                        for (role, acc, rs, cs) in operands {
                            let key = match role {
                                'S' => "SRC",
                                'D' => "DST",
                                'A' => "A",
                                'B' => "B",
                                _ => "C",
                            };
                            let p = self.ptr(acc, map);
                            let p = if p.starts_with('&') { format!("({p})") } else { p };
                            let ld = match self.buf(acc).layout.major {
                                Major::RowMajor => *rs,
                                Major::ColMajor => *cs,
                            };
                            v.insert(key, p);
                            let (ldk, rsk, csk): (&str, &str, &str) = match key {
                                "SRC" => ("LDSRC", "SRC_RS", "SRC_CS"),
                                "DST" => ("LDDST", "DST_RS", "DST_CS"),
                                "A" => ("LDA", "A_RS", "A_CS"),
                                "B" => ("LDB", "B_RS", "B_CS"),
                                _ => ("LDC", "C_RS", "C_CS"),
                            };
                            v.insert(ldk, ld.to_string());
                            v.insert(rsk, rs.to_string());
                            v.insert(csk, cs.to_string());
                        }
                    }
                }
                let text = fill(&x.template, &v);
                for l in text.lines() {
                    self.line(l.trim_end());
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    extern crate std;
    use super::*;
    use crate::decomp::{Chain, Operand};
    use crate::spec::{kernel_matmul, ComputeLevel::*};

    fn listing2() -> DecompNode {
        Chain::new()
            .tile(128, 128)
            .to(Block)
            .epilog(MemLevel::RF)
            .split(8)
            .load(Operand::A, MemLevel::SH)
            .load(Operand::B, MemLevel::SH)
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
    fn trivial_kernel_has_no_loops() {
        let root = kernel_matmul(1, 1, 1).unwrap();
        let tree = Chain::new()
            .tile(1, 1)
            .to(Block)
            .tile(1, 1)
            .to(Thread)
            .epilog(MemLevel::RF)
            .load(Operand::A, MemLevel::RF)
            .load(Operand::B, MemLevel::RF)
            .done()
            .unwrap();
        let src = generate(&root, &tree).unwrap().source;
        assert!(!src.contains("for ("), "{src}");
        assert!(!src.contains("__syncthreads"));
        assert_eq!(src.matches("+=").count(), 1);
    }

    #[test]
    fn listing2_text() {
        let src = generate(&kernel_matmul(128, 128, 32).unwrap(), &listing2()).unwrap();
        let s = &src.source;
        assert!(s.starts_with("// MatMul(128,128,32)(GL,GL,GL)(Kernel)\n"));
        assert_eq!(s.matches("__syncthreads();").count(), 2);
        assert!(s.contains("+= "));
        assert_eq!(src.entry, "matmul_128x128x32");
        assert_eq!(src.shared_bytes, 8192);
        std::println!("{s}");
        assert_eq!(s, &generate(&kernel_matmul(128, 128, 32).unwrap(), &listing2()).unwrap().source);
    }

    #[test]
    fn fill_drops_unit_strides() {
        let v: BTreeMap<&str, String> = [("A", "X".to_string()), ("S", "1".into()), ("O", "0".into())].into();
        assert_eq!(fill("${A}[k * ${S}] + ${O};", &v), "X[k];");
        assert_eq!(fill("${A}[${S} * k + ${O} + 2]", &v), "X[k + 2]");
        assert_eq!(fill("f(${S}, ${O})", &v), "f(1, 0)");
        assert_eq!(fill("a + ${O} * b", &v), "a + 0 * b");
        assert_eq!(fill("a * ${O} + b", &v), "a * 0 + b");
        assert_eq!(fill("a - ${O} + b", &v), "a - 0 + b");
        assert_eq!(fill("a / ${S} * b", &v), "a / 1 * b");
        assert_eq!(fill("a - ${S} * b", &v), "a - b");
    }

    #[test]
    fn bare_strips_only_outer_pair() {
        assert_eq!(bare("(a + b)".into()), "a + b");
        assert_eq!(bare("(a) + (b)".into()), "(a) + (b)");
        assert_eq!(bare("x".into()), "x");
    }

    #[test]
    fn hmma_register_pairs_in_bounds() {
        use crate::spec::{make_matmul_spec, Layout};
        use ElemType::F16;
        for k in [4, 8, 16] {
            let root = make_matmul_spec(32, 32, 32, [F16; 3], [MemLevel::GL; 3], [Layout::ROW, Layout::COL, Layout::ROW], Kernel)
                .unwrap();
            let tree = Chain::new()
                .tile(32, 32)
                .to(Block)
                .epilog(MemLevel::RF)
                .tile(16, 16)
                .to(Warp)
                .split(k)
                .load(Operand::A, MemLevel::RF)
                .load(Operand::B, MemLevel::RF)
                .mma_tile()
                .done()
                .unwrap();
            let src = generate(&root, &tree).unwrap().source;
            assert!(src.contains("mma.sync.aligned.m8n8k4"));
            let size = |name: &str| -> usize {
                let decl = src.lines().find(|l| l.trim_start().starts_with("half ") && l.contains(name)).unwrap();
                decl.split('[').nth(1).unwrap().trim_end_matches("];").parse().unwrap()
            };
            for (name, want) in [("A_RF", k), ("B_RF", k), ("C_RF", 8)] {
                assert_eq!(size(name), want, "{name}");
            }
            // every 32-bit register read covers two halves inside the array
            for piece in src.split("reinterpret_cast<unsigned*>(&").skip(1) {
                let (name, rest) = piece.split_once('[').unwrap();
                let idx: &str = rest.split(']').next().unwrap();
                // terms are literals or `kN * 4` with kN < k / 4
                let hi: usize = idx
                    .replace(['(', ')'], "")
                    .split(" + ")
                    .map(|t| t.parse::<usize>().unwrap_or((k / 4 - 1) * 4))
                    .sum::<usize>()
                    + 1;
                let base = &name[..4];
                assert!(hi < size(base), "{name}[{idx}] in\n{src}");
            }
        }
    }
}
