//! Straightforward reference results.

use half::f16;
use hiertile_core::sim::Matrix;
use hiertile_core::spec::{ElemType, Spec, SpecKind};

fn round(v: f64, e: ElemType) -> f32 {
    match e {
        ElemType::F32 => v as f32,
        ElemType::F16 => f16::from_f64(v).to_f32(),
    }
}

/// Triple loop in f64. Inputs are first rounded to their declared element
/// types and the result to C's.
pub fn matmul(root: &Spec, a: &Matrix, b: &Matrix) -> Matrix {
    let SpecKind::MatMul { a: ma, b: mb, c: mc, .. } = &root.kind else {
        panic!("matmul oracle needs a MatMul spec");
    };
    assert_eq!((a.rows, a.cols), (ma.rows, ma.cols));
    assert_eq!((b.rows, b.cols), (mb.rows, mb.cols));
    Matrix::from_fn(a.rows, b.cols, |i, j| {
        let s: f64 = (0..a.cols)
            .map(|k| round(a.get(i, k) as f64, ma.elem) as f64 * round(b.get(k, j) as f64, mb.elem) as f64)
            .sum();
        round(s, mc.elem)
    })
}

/// Element-wise copy with destination rounding.
pub fn copy(root: &Spec, src: &Matrix) -> Matrix {
    let SpecKind::Move { dst, zero_fill, .. } = &root.kind else {
        panic!("copy oracle needs a Move spec");
    };
    if *zero_fill {
        return Matrix::zeros(dst.rows, dst.cols);
    }
    Matrix::from_fn(src.rows, src.cols, |r, c| round(src.get(r, c) as f64, dst.elem))
}
