use std::collections::{BTreeMap, BTreeSet};

use hiertile_core::decomp::{epilog, split, tile};
use hiertile_core::index::{cst, is_permutation, maxwell_swizzle, var, BinOp, IndexExpr};
use hiertile_core::spec::kernel_matmul;
use hiertile_core::validate::tile_coordinates;
use hiertile_core::{Layout, Major, MemLevel};
use proptest::prelude::*;

const VARS: [&str; 3] = ["x", "y", "z"];

fn leaf() -> impl Strategy<Value = IndexExpr> {
    prop_oneof![
        (0i64..=64).prop_map(cst),
        prop::sample::select(&VARS[..]).prop_map(var),
        prop::sample::select(vec![0i64, 1, 2, 4, 8, 16, 128]).prop_map(cst),
    ]
}

/// Non-negative index expressions. Divisors are positive constants and
/// shift amounts are small, which matches everything the lowering emits.
fn expr() -> impl Strategy<Value = IndexExpr> {
    leaf().prop_recursive(5, 48, 2, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone()).prop_map(|(a, b)| a.add(b)),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| a.mul(b)),
            (inner.clone(), 1i64..=32).prop_map(|(a, c)| a.div(cst(c))),
            (inner.clone(), 1i64..=32).prop_map(|(a, c)| a.rem(cst(c))),
            (inner.clone(), 0i64..=4).prop_map(|(a, s)| a.shl(cst(s))),
            (inner.clone(), 0i64..=4).prop_map(|(a, s)| a.shr(cst(s))),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| a.and(b)),
            (inner.clone(), inner).prop_map(|(a, b)| a.or(b)),
            // (e / c) * c + e % c, the shape tiling produces
            (leaf(), 1i64..=16).prop_map(|(e, c)| e.clone().div(cst(c)).mul(cst(c)).add(e.rem(cst(c)))),
        ]
    })
}

fn env() -> impl Strategy<Value = BTreeMap<String, i64>> {
    (0i64..=1000, 0i64..=1000, 0i64..=1000)
        .prop_map(|(x, y, z)| VARS.iter().map(|v| v.to_string()).zip([x, y, z]).collect())
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn has_identity_op(e: &IndexExpr) -> bool {
    match e {
        IndexExpr::Bin(op, a, b) => {
            let bad = match op {
                BinOp::Add | BinOp::BitOr => *a.as_ref() == cst(0) || *b.as_ref() == cst(0),
                BinOp::Mul => [a, b].iter().any(|x| matches!(x.as_const(), Some(0 | 1))),
                _ => false,
            };
            bad || has_identity_op(a) || has_identity_op(b)
        }
        _ => false,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn simplify_preserves_value(e in expr(), env in env()) {
        if let Ok(v) = e.eval(&env) {
            prop_assert_eq!(e.simplify().eval(&env), Ok(v), "{} => {}", e, e.simplify());
        }
    }

    #[test]
    fn simplify_is_idempotent(e in expr()) {
        let s = e.simplify();
        prop_assert_eq!(s.simplify(), s);
    }
}

proptest! {
    #[test]
    fn simplify_leaves_no_identity_ops(e in expr()) {
        let s = e.simplify();
        prop_assert!(!has_identity_op(&s), "{}", s);
    }

    #[test]
    fn simplify_never_grows(e in expr()) {
        prop_assert!(e.simplify().node_count() <= e.node_count());
    }

    #[test]
    fn lanes_cover_the_grid(nr_log in 0u32..=5, major_row in any::<bool>(), rot in 0i64..32) {
        let (nr, nc) = (1usize << nr_log, 32usize >> nr_log);
        let major = if major_row { Major::RowMajor } else { Major::ColMajor };
        let sw = var("id").add(cst(rot)).rem(cst(32));
        for swizzle in [None, Some(&sw)] {
            let (r, c) = tile_coordinates(var("lane"), nr, nc, major, swizzle);
            let seen: BTreeSet<(i64, i64)> = (0..32)
                .map(|l| {
                    let env = [("lane", l)];
                    (r.eval(&env).unwrap(), c.eval(&env).unwrap())
                })
                .collect();
            prop_assert_eq!(seen.len(), 32);
            prop_assert!(seen.iter().all(|&(i, j)| (0..nr as i64).contains(&i) && (0..nc as i64).contains(&j)));
        }
    }

    #[test]
    fn affine_swizzle_permutes_iff_coprime(a in 0i64..64, b in 0i64..64, n in 1usize..=64) {
        let s = var("id").mul(cst(a)).add(cst(b)).rem(cst(n as i64));
        prop_assert_eq!(is_permutation(&s, n).unwrap(), gcd(a, n as i64) == 1);
    }

    #[test]
    fn padded_layout_is_injective(rows in 1usize..24, cols in 1usize..24, pad in 0usize..6, row in any::<bool>()) {
        let l = Layout::new(if row { Major::RowMajor } else { Major::ColMajor }, pad);
        let mut seen = BTreeSet::new();
        for r in 0..rows {
            for c in 0..cols {
                let o = l.offset(rows, cols, r, c);
                prop_assert!(o < l.extent(rows, cols));
                prop_assert!(seen.insert(o));
            }
        }
        prop_assert_eq!(l.extent(rows, cols), rows * cols + pad * if row { rows } else { cols });
    }

    #[test]
    fn tile_and_split_keep_the_rest(
        mlog in 0u32..8, nlog in 0u32..8, klog in 0u32..8,
        rlog in 0u32..8, clog in 0u32..8, slog in 0u32..8,
    ) {
        let (m, n, k) = (1usize << mlog, 1usize << nlog, 1usize << klog);
        let s = kernel_matmul(m, n, k).unwrap();
        let (r, c, ks) = (1usize << rlog, 1usize << clog, 1usize << slog);
        match tile(&s, r, c) {
            Ok(t) => prop_assert_eq!(t.matmul_dims(), Some((r, c, k))),
            Err(_) => prop_assert!(r > m || c > n),
        }
        prop_assert_eq!(split(&s, ks).is_ok(), ks == k);
        let acc = epilog(&s, MemLevel::RF, None).unwrap().inner;
        match split(&acc, ks) {
            Ok(t) => prop_assert_eq!(t.matmul_dims(), Some((m, n, ks))),
            Err(_) => prop_assert!(ks > k),
        }
    }
}

#[test]
fn maxwell_swizzle_permutes_64() {
    let s = maxwell_swizzle();
    assert!(is_permutation(&s, 64).unwrap());
    let image: BTreeSet<i64> = (0..64).map(|id| s.eval(&[("id", id)]).unwrap()).collect();
    assert_eq!(image, (0..64).collect());
    assert!(!is_permutation(&cst(3), 64).unwrap());
}
