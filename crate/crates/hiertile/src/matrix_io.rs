//! Plain-text matrices and seeded input generation.
//!
//! The text format is a `rows cols` header followed by the values in row
//! order, separated by any whitespace.

use std::fmt::Write as _;

use hiertile_core::sim::Matrix;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum MatrixIoError {
    #[error("missing `rows cols` header")]
    MissingHeader,
    #[error("bad value `{0}`")]
    BadValue(String),
    #[error("expected {expected} values, found {found}")]
    Count { expected: usize, found: usize },
}

pub fn read_matrix(text: &str) -> Result<Matrix, MatrixIoError> {
    let mut words = text.split_whitespace();
    let mut dim = || -> Result<usize, MatrixIoError> {
        let w = words.next().ok_or(MatrixIoError::MissingHeader)?;
        w.parse().map_err(|_| MatrixIoError::MissingHeader)
    };
    let (rows, cols) = (dim()?, dim()?);
    let data = words
        .map(|w| w.parse::<f32>().map_err(|_| MatrixIoError::BadValue(w.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    if data.len() != rows * cols {
        return Err(MatrixIoError::Count { expected: rows * cols, found: data.len() });
    }
    Ok(Matrix { rows, cols, data })
}

pub fn write_matrix(m: &Matrix) -> String {
    let mut s = format!("{} {}\n", m.rows, m.cols);
    for r in 0..m.rows {
        let row: Vec<String> = (0..m.cols).map(|c| m.get(r, c).to_string()).collect();
        let _ = writeln!(s, "{}", row.join(" "));
    }
    s
}

/// Value distribution for generated inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Values {
    /// Integers in `[-3, 3]`; products and sums stay exact in F32 and F16.
    Integer,
    /// Uniform in `[-1, 1]`.
    Float,
}

pub struct InputGen {
    rng: ChaCha8Rng,
    values: Values,
}

impl InputGen {
    pub fn new(seed: u64, values: Values) -> InputGen {
        InputGen { rng: ChaCha8Rng::seed_from_u64(seed), values }
    }

    pub fn matrix(&mut self, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols)
            .map(|_| match self.values {
                Values::Integer => self.rng.gen_range(-3i32..=3) as f32,
                Values::Float => self.rng.gen_range(-1.0f32..=1.0),
            })
            .collect();
        Matrix { rows, cols, data }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let m = Matrix { rows: 2, cols: 3, data: vec![1.0, -2.5, 0.0, 4.0, 5.0, 6.25] };
        assert_eq!(write_matrix(&m), "2 3\n1 -2.5 0\n4 5 6.25\n");
        assert_eq!(read_matrix(&write_matrix(&m)).unwrap(), m);
        assert_eq!(read_matrix("2 2 1 2 3"), Err(MatrixIoError::Count { expected: 4, found: 3 }));
        assert_eq!(read_matrix(""), Err(MatrixIoError::MissingHeader));
    }

    #[test]
    fn generation_is_seeded() {
        let a = InputGen::new(7, Values::Integer).matrix(4, 4);
        let b = InputGen::new(7, Values::Integer).matrix(4, 4);
        assert_eq!(a, b);
        assert!(a.data.iter().all(|v| v.fract() == 0.0 && v.abs() <= 3.0));
        let f = InputGen::new(1, Values::Float).matrix(8, 8);
        assert!(f.data.iter().all(|v| v.abs() <= 1.0));
    }
}
