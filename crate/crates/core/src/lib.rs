//! Hierarchical tiling schedules for GPU matrix kernels.
//!
//! A [`spec::Spec`] describes a matrix multiplication or a copy together with
//! where its operands live and which part of the GPU is responsible for it.
//! A [`decomp::DecompNode`] tree breaks a spec down step by step until every
//! leaf is something the hardware can execute. The tree is validated,
//! lowered to a loop-nest program, and then either printed as CUDA-flavoured
//! C ([`codegen`]) or executed by a block-level simulator ([`sim`]).

#![no_std]

extern crate alloc;

pub mod codegen;
pub mod decomp;
pub mod error;
pub mod index;
pub mod lower;
pub mod sim;
pub mod spec;
pub mod validate;

pub use decomp::{Chain, DecompNode, Operand};
pub use error::{DecompError, SpecError};
pub use index::IndexExpr;
pub use spec::{ComputeLevel, ElemType, Layout, Major, MemLevel, Spec};
