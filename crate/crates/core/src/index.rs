//! Symbolic integer index expressions.
//!
//! Values are non-negative in every expression the compiler builds, and
//! division and remainder only ever see positive constant divisors. The
//! evaluator still checks for overflow and zero divisors so that arbitrary
//! trees can be evaluated without panicking.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BinOp {
    Add,
    Mul,
    Div,
    Mod,
    Shr,
    Shl,
    BitAnd,
    BitOr,
}

impl BinOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Mod => "%",
            BinOp::Shr => ">>",
            BinOp::Shl => "<<",
            BinOp::BitAnd => "&",
            BinOp::BitOr => "|",
        }
    }

    pub const ALL: [BinOp; 8] = [
        BinOp::Add,
        BinOp::Mul,
        BinOp::Div,
        BinOp::Mod,
        BinOp::Shr,
        BinOp::Shl,
        BinOp::BitAnd,
        BinOp::BitOr,
    ];

    /// Applies the operator with checked arithmetic.
    pub fn apply(self, a: i64, b: i64) -> Result<i64, EvalError> {
        match self {
            BinOp::Add => a.checked_add(b).ok_or(EvalError::Overflow),
            BinOp::Mul => a.checked_mul(b).ok_or(EvalError::Overflow),
            BinOp::Div => {
                if b == 0 {
                    Err(EvalError::DivisionByZero)
                } else {
                    a.checked_div_euclid(b).ok_or(EvalError::Overflow)
                }
            }
            BinOp::Mod => {
                if b == 0 {
                    Err(EvalError::DivisionByZero)
                } else {
                    a.checked_rem_euclid(b).ok_or(EvalError::Overflow)
                }
            }
            BinOp::Shr => {
                if !(0..63).contains(&b) {
                    return Err(EvalError::BadShift(b));
                }
                Ok(a >> b)
            }
            BinOp::Shl => {
                if !(0..63).contains(&b) {
                    return Err(EvalError::BadShift(b));
                }
                a.checked_mul(1i64 << b).ok_or(EvalError::Overflow)
            }
            BinOp::BitAnd => Ok(a & b),
            BinOp::BitOr => Ok(a | b),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum IndexExpr {
    Const(i64),
    Var(String),
    Bin(BinOp, Box<IndexExpr>, Box<IndexExpr>),
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("unbound variable `{0}`")]
    UnboundVar(String),
    #[error("division by zero")]
    DivisionByZero,
    #[error("integer overflow")]
    Overflow,
    #[error("shift amount {0} out of range")]
    BadShift(i64),
}

/// Variable lookup used by [`IndexExpr::eval`].
pub trait VarEnv {
    fn lookup(&self, name: &str) -> Option<i64>;
}

impl VarEnv for BTreeMap<String, i64> {
    fn lookup(&self, name: &str) -> Option<i64> {
        self.get(name).copied()
    }
}

impl VarEnv for [(&str, i64)] {
    fn lookup(&self, name: &str) -> Option<i64> {
        self.iter().find(|(n, _)| *n == name).map(|(_, v)| *v)
    }
}

impl<const N: usize> VarEnv for [(&str, i64); N] {
    fn lookup(&self, name: &str) -> Option<i64> {
        self.as_slice().lookup(name)
    }
}

pub fn cst(v: i64) -> IndexExpr {
    IndexExpr::Const(v)
}

pub fn var(name: &str) -> IndexExpr {
    IndexExpr::Var(name.to_string())
}

impl IndexExpr {
    pub fn bin(op: BinOp, a: IndexExpr, b: IndexExpr) -> IndexExpr {
        IndexExpr::Bin(op, Box::new(a), Box::new(b))
    }

    pub fn add(self, rhs: IndexExpr) -> IndexExpr {
        Self::bin(BinOp::Add, self, rhs)
    }

    pub fn mul(self, rhs: IndexExpr) -> IndexExpr {
        Self::bin(BinOp::Mul, self, rhs)
    }

    pub fn div(self, rhs: IndexExpr) -> IndexExpr {
        Self::bin(BinOp::Div, self, rhs)
    }

    pub fn rem(self, rhs: IndexExpr) -> IndexExpr {
        Self::bin(BinOp::Mod, self, rhs)
    }

    pub fn shr(self, rhs: IndexExpr) -> IndexExpr {
        Self::bin(BinOp::Shr, self, rhs)
    }

    pub fn shl(self, rhs: IndexExpr) -> IndexExpr {
        Self::bin(BinOp::Shl, self, rhs)
    }

    pub fn and(self, rhs: IndexExpr) -> IndexExpr {
        Self::bin(BinOp::BitAnd, self, rhs)
    }

    pub fn or(self, rhs: IndexExpr) -> IndexExpr {
        Self::bin(BinOp::BitOr, self, rhs)
    }

    pub fn as_const(&self) -> Option<i64> {
        match self {
            IndexExpr::Const(c) => Some(*c),
            _ => None,
        }
    }

    pub fn eval<E: VarEnv + ?Sized>(&self, env: &E) -> Result<i64, EvalError> {
        match self {
            IndexExpr::Const(c) => Ok(*c),
            IndexExpr::Var(n) => env.lookup(n).ok_or_else(|| EvalError::UnboundVar(n.clone())),
            IndexExpr::Bin(op, a, b) => op.apply(a.eval(env)?, b.eval(env)?),
        }
    }

    pub fn free_vars(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars(&self, out: &mut BTreeSet<String>) {
        match self {
            IndexExpr::Const(_) => {}
            IndexExpr::Var(n) => {
                out.insert(n.clone());
            }
            IndexExpr::Bin(_, a, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
        }
    }

    pub fn substitute(&self, name: &str, with: &IndexExpr) -> IndexExpr {
        match self {
            IndexExpr::Var(n) if n == name => with.clone(),
            IndexExpr::Const(_) | IndexExpr::Var(_) => self.clone(),
            IndexExpr::Bin(op, a, b) => {
                IndexExpr::bin(*op, a.substitute(name, with), b.substitute(name, with))
            }
        }
    }

    /// Substitutes every variable found in `map`.
    pub fn substitute_all(&self, map: &BTreeMap<String, IndexExpr>) -> IndexExpr {
        if map.is_empty() {
            return self.clone();
        }
        match self {
            IndexExpr::Var(n) => map.get(n).cloned().unwrap_or_else(|| self.clone()),
            IndexExpr::Const(_) => self.clone(),
            IndexExpr::Bin(op, a, b) => {
                IndexExpr::bin(*op, a.substitute_all(map), b.substitute_all(map))
            }
        }
    }

    pub fn node_count(&self) -> usize {
        match self {
            IndexExpr::Bin(_, a, b) => 1 + a.node_count() + b.node_count(),
            _ => 1,
        }
    }

    /// Rewrites to a fixpoint under the local rules in [`simplify_node`].
    pub fn simplify(&self) -> IndexExpr {
        let mut cur = simplify_once(self);
        loop {
            let next = simplify_once(&cur);
            if next == cur {
                return cur;
            }
            cur = next;
        }
    }

    /// Fully parenthesized C text. Constants print in decimal.
    pub fn emit_c(&self) -> String {
        let mut s = String::new();
        self.write_c(&mut s);
        s
    }

    fn write_c(&self, out: &mut String) {
        match self {
            IndexExpr::Const(c) => out.push_str(&c.to_string()),
            IndexExpr::Var(n) => out.push_str(n),
            IndexExpr::Bin(op, a, b) => {
                out.push('(');
                a.write_c(out);
                out.push(' ');
                out.push_str(op.symbol());
                out.push(' ');
                b.write_c(out);
                out.push(')');
            }
        }
    }
}

impl fmt::Display for IndexExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.emit_c())
    }
}

/// Evaluates a swizzle body with `id` bound.
pub fn apply_swizzle(swizzle: &IndexExpr, id: i64) -> Result<i64, EvalError> {
    swizzle.eval(&[("id", id)])
}

/// Checks that `swizzle` permutes `[0, domain)`.
pub fn is_permutation(swizzle: &IndexExpr, domain: usize) -> Result<bool, EvalError> {
    let mut seen = alloc::vec![false; domain];
    for id in 0..domain {
        let v = apply_swizzle(swizzle, id as i64)?;
        if v < 0 || v as usize >= domain || seen[v as usize] {
            return Ok(false);
        }
        seen[v as usize] = true;
    }
    Ok(true)
}

fn simplify_once(e: &IndexExpr) -> IndexExpr {
    match e {
        IndexExpr::Bin(op, a, b) => simplify_node(*op, simplify_once(a), simplify_once(b)),
        _ => e.clone(),
    }
}

/// True when `e` is provably a multiple of `c` for every binding.
fn is_multiple_of(e: &IndexExpr, c: i64) -> bool {
    if c == 1 {
        return true;
    }
    match e {
        IndexExpr::Const(k) => k % c == 0,
        IndexExpr::Var(_) => false,
        IndexExpr::Bin(BinOp::Mul, a, b) => match (a.as_const(), b.as_const()) {
            (_, Some(k)) if k % c == 0 => true,
            (Some(k), _) if k % c == 0 => true,
            _ => false,
        },
        IndexExpr::Bin(BinOp::Add, a, b) => is_multiple_of(a, c) && is_multiple_of(b, c),
        IndexExpr::Bin(BinOp::Shl, _, b) => match b.as_const() {
            Some(s) if (0..62).contains(&s) => (1i64 << s) % c == 0,
            _ => false,
        },
        _ => false,
    }
}

/// Divides a term proven to be a multiple of `c`.
fn divide_exact(e: &IndexExpr, c: i64) -> Option<IndexExpr> {
    match e {
        IndexExpr::Const(k) if k % c == 0 => Some(cst(k / c)),
        IndexExpr::Bin(BinOp::Mul, a, b) => match (a.as_const(), b.as_const()) {
            (_, Some(k)) if k % c == 0 => Some(a.as_ref().clone().mul(cst(k / c))),
            (Some(k), _) if k % c == 0 => Some(b.as_ref().clone().mul(cst(k / c))),
            _ => None,
        },
        IndexExpr::Bin(BinOp::Add, a, b) => {
            Some(divide_exact(a, c)?.add(divide_exact(b, c)?))
        }
        _ => None,
    }
}

/// `(x / c) * c` and `x % c` recombine to `x`.
fn div_mod_pair(q: &IndexExpr, r: &IndexExpr) -> Option<IndexExpr> {
    let IndexExpr::Bin(BinOp::Mul, d, c) = q else { return None };
    let IndexExpr::Bin(BinOp::Div, x, c1) = d.as_ref() else { return None };
    let IndexExpr::Bin(BinOp::Mod, x2, c2) = r else { return None };
    let c = c.as_const().filter(|c| *c > 0)?;
    (x == x2 && c1.as_const() == Some(c) && c2.as_const() == Some(c)).then(|| x.as_ref().clone())
}

fn simplify_node(op: BinOp, a: IndexExpr, b: IndexExpr) -> IndexExpr {
    use IndexExpr::Const;
    if let (Const(x), Const(y)) = (&a, &b) {
        if let Ok(v) = op.apply(*x, *y) {
            return Const(v);
        }
        return IndexExpr::bin(op, a, b);
    }
    match op {
        BinOp::Add => {
            if a == Const(0) {
                return b;
            }
            if b == Const(0) {
                return a;
            }
            if a.as_const().is_some() {
                return IndexExpr::bin(op, b, a);
            }
            if let Some(x) = div_mod_pair(&a, &b).or_else(|| div_mod_pair(&b, &a)) {
                return x;
            }
            if let (IndexExpr::Bin(BinOp::Add, x, c1), Some(c2)) = (&a, b.as_const()) {
                if let Some(c1) = c1.as_const() {
                    if let Some(s) = c1.checked_add(c2) {
                        return x.as_ref().clone().add(cst(s));
                    }
                }
            }
            IndexExpr::bin(op, a, b)
        }
        BinOp::Mul => {
            if a == Const(0) || b == Const(0) {
                return Const(0);
            }
            if a == Const(1) {
                return b;
            }
            if b == Const(1) {
                return a;
            }
            if a.as_const().is_some() {
                return IndexExpr::bin(op, b, a);
            }
            if let (IndexExpr::Bin(BinOp::Mul, x, c1), Some(c2)) = (&a, b.as_const()) {
                if let Some(c1) = c1.as_const() {
                    if let Some(p) = c1.checked_mul(c2) {
                        return x.as_ref().clone().mul(cst(p));
                    }
                }
            }
            IndexExpr::bin(op, a, b)
        }
        BinOp::Div => {
            let Some(c) = b.as_const().filter(|c| *c > 0) else {
                return IndexExpr::bin(op, a, b);
            };
            if c == 1 {
                return a;
            }
            if a == Const(0) {
                return Const(0);
            }
            if let Some(q) = divide_exact(&a, c) {
                return q;
            }
            if let IndexExpr::Bin(BinOp::Div, x, c1) = &a {
                if let Some(c1) = c1.as_const().filter(|c1| *c1 > 0) {
                    if let Some(p) = c1.checked_mul(c) {
                        return x.as_ref().clone().div(cst(p));
                    }
                }
            }
            if let IndexExpr::Bin(BinOp::Add, x, y) = &a {
                if is_multiple_of(x, c) {
                    if let Some(q) = divide_exact(x, c) {
                        return q.add(y.as_ref().clone().div(cst(c)));
                    }
                }
                if is_multiple_of(y, c) {
                    if let Some(q) = divide_exact(y, c) {
                        return x.as_ref().clone().div(cst(c)).add(q);
                    }
                }
            }
            IndexExpr::bin(op, a, b)
        }
        BinOp::Mod => {
            let Some(c) = b.as_const().filter(|c| *c > 0) else {
                return IndexExpr::bin(op, a, b);
            };
            if c == 1 || is_multiple_of(&a, c) {
                return Const(0);
            }
            if let IndexExpr::Bin(BinOp::Add, x, y) = &a {
                if is_multiple_of(x, c) {
                    return y.as_ref().clone().rem(cst(c));
                }
                if is_multiple_of(y, c) {
                    return x.as_ref().clone().rem(cst(c));
                }
            }
            if let IndexExpr::Bin(BinOp::Mod, x, c1) = &a {
                if let Some(c1) = c1.as_const().filter(|c1| *c1 > 0) {
                    if c1 % c == 0 {
                        return x.as_ref().clone().rem(cst(c));
                    }
                }
            }
            IndexExpr::bin(op, a, b)
        }
        BinOp::Shr | BinOp::Shl => {
            if b == Const(0) {
                return a;
            }
            if a == Const(0) && matches!(b.as_const(), Some(s) if (0..63).contains(&s)) {
                return Const(0);
            }
            IndexExpr::bin(op, a, b)
        }
        BinOp::BitAnd => {
            if a == Const(0) || b == Const(0) {
                return Const(0);
            }
            IndexExpr::bin(op, a, b)
        }
        BinOp::BitOr => {
            if a == Const(0) {
                return b;
            }
            if b == Const(0) {
                return a;
            }
            IndexExpr::bin(op, a, b)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Op {
    Const(i64),
    Slot(u16),
    Bin(BinOp),
    /// Binary operator with a constant right operand.
    BinK(BinOp, i64),
}

/// Postfix form of an [`IndexExpr`] with variables resolved to slots.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CompiledExpr {
    ops: Vec<Op>,
    depth: usize,
}

impl CompiledExpr {
    pub fn compile(
        e: &IndexExpr,
        slot_of: &dyn Fn(&str) -> Option<usize>,
    ) -> Result<CompiledExpr, EvalError> {
        fn walk(
            e: &IndexExpr,
            slot_of: &dyn Fn(&str) -> Option<usize>,
            ops: &mut Vec<Op>,
            depth: usize,
            max: &mut usize,
        ) -> Result<(), EvalError> {
            *max = (*max).max(depth + 1);
            match e {
                IndexExpr::Const(c) => ops.push(Op::Const(*c)),
                IndexExpr::Var(n) => {
                    let s = slot_of(n).ok_or_else(|| EvalError::UnboundVar(n.clone()))?;
                    ops.push(Op::Slot(s as u16));
                }
                IndexExpr::Bin(op, a, b) => {
                    walk(a, slot_of, ops, depth, max)?;
                    match b.as_const() {
                        Some(k) => ops.push(Op::BinK(*op, k)),
                        None => {
                            walk(b, slot_of, ops, depth + 1, max)?;
                            ops.push(Op::Bin(*op));
                        }
                    }
                }
            }
            Ok(())
        }
        let mut ops = Vec::new();
        let mut depth = 0;
        walk(e, slot_of, &mut ops, 0, &mut depth)?;
        Ok(CompiledExpr { ops, depth })
    }

    pub fn as_const(&self) -> Option<i64> {
        match self.ops.as_slice() {
            [Op::Const(c)] => Some(*c),
            _ => None,
        }
    }

    pub fn eval(&self, slots: &[i64]) -> Result<i64, EvalError> {
        if let [op] = self.ops.as_slice() {
            return Ok(match op {
                Op::Const(c) => *c,
                Op::Slot(s) => slots[*s as usize],
                Op::Bin(_) | Op::BinK(..) => unreachable!(),
            });
        }
        let mut small = [0i64; 16];
        let mut big;
        let stack: &mut [i64] = if self.depth <= small.len() {
            &mut small
        } else {
            big = alloc::vec![0i64; self.depth];
            &mut big
        };
        let mut sp = 0usize;
        for op in &self.ops {
            match op {
                Op::Const(c) => {
                    stack[sp] = *c;
                    sp += 1;
                }
                Op::Slot(s) => {
                    stack[sp] = slots[*s as usize];
                    sp += 1;
                }
                Op::Bin(b) => {
                    sp -= 1;
                    let rhs = stack[sp];
                    stack[sp - 1] = b.apply(stack[sp - 1], rhs)?;
                }
                Op::BinK(b, k) => stack[sp - 1] = b.apply(stack[sp - 1], *k)?,
            }
        }
        Ok(stack[0])
    }
}

/// The shared-memory permutation used by hand-tuned Maxwell SGEMM kernels.
pub fn maxwell_swizzle() -> IndexExpr {
    let id = || var("id");
    id().shr(cst(1))
        .and(cst(7))
        .or(id().and(cst(48)).or(id().and(cst(1)).shl(cst(3))))
}

pub fn describe_expr(e: &IndexExpr) -> String {
    format!("{}", e)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn emit_tile_offset() {
        let e = var("blockIdx.x").mul(cst(128)).add(var("row"));
        assert_eq!(e.emit_c(), "((blockIdx.x * 128) + row)");
    }

    #[test]
    fn emit_maxwell() {
        assert_eq!(
            maxwell_swizzle().emit_c(),
            "(((id >> 1) & 7) | ((id & 48) | ((id & 1) << 3)))"
        );
        assert_eq!(maxwell_swizzle().simplify(), maxwell_swizzle());
    }

    #[test]
    fn zero_times_anything() {
        assert_eq!(cst(0).mul(var("N")).simplify(), cst(0));
        assert_eq!(var("k").mul(cst(8)).mul(cst(0)).simplify(), cst(0));
    }

    #[test]
    fn nested_products_fold() {
        let e = var("t").mul(cst(4)).mul(cst(8));
        let s = e.simplify();
        assert_eq!(s, var("t").mul(cst(32)));
        for t in 0..100 {
            assert_eq!(s.eval(&[("t", t)]).unwrap(), t * 32);
        }
    }

    #[test]
    fn swizzle_values() {
        let s = maxwell_swizzle();
        assert_eq!(apply_swizzle(&s, 1).unwrap(), 8);
        assert_eq!(apply_swizzle(&s, 2).unwrap(), 1);
        assert!(is_permutation(&s, 64).unwrap());
        assert!(is_permutation(&s, 32).unwrap());
        assert!(!is_permutation(&cst(0), 32).unwrap());
    }

    #[test]
    fn unbound_var() {
        assert_eq!(var("x").eval(&[("y", 1)]), Err(EvalError::UnboundVar("x".into())));
    }

    #[test]
    fn div_mod_rules() {
        let x = var("x");
        assert_eq!(x.clone().mul(cst(64)).div(cst(32)).simplify(), x.clone().mul(cst(2)));
        assert_eq!(x.clone().mul(cst(64)).rem(cst(32)).simplify(), cst(0));
        assert_eq!(x.clone().div(cst(1)).simplify(), x.clone());
        assert_eq!(x.clone().rem(cst(1)).simplify(), cst(0));
        let e = x.clone().mul(cst(8)).add(var("y")).div(cst(8)).simplify();
        assert_eq!(e, x.clone().add(var("y").div(cst(8))));
        assert_eq!(cst(3).add(x.clone()).add(cst(4)).simplify(), x.clone().add(cst(7)));
        let q = x.clone().div(cst(16)).mul(cst(16));
        assert_eq!(q.clone().add(x.clone().rem(cst(16))).simplify(), x.clone());
        assert_eq!(x.clone().rem(cst(16)).add(q).simplify(), x.clone());
        let skew = x.clone().div(cst(16)).mul(cst(8)).add(x.clone().rem(cst(8)));
        assert_ne!(skew.simplify(), x);
    }

    #[test]
    fn compiled_matches_tree() {
        let e = maxwell_swizzle().add(var("k").mul(cst(3)));
        let slot = |n: &str| match n {
            "id" => Some(0),
            "k" => Some(1),
            _ => None,
        };
        let c = CompiledExpr::compile(&e, &slot).unwrap();
        for id in 0..64 {
            for k in 0..4 {
                assert_eq!(c.eval(&[id, k]).unwrap(), e.eval(&[("id", id), ("k", k)]).unwrap());
            }
        }
    }
}
