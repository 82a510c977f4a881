//! JSON encoding of complex arrays as `[re, im]` pairs in row-major order.

use crate::error::{Error, Result};
use crate::tensor::{CMatrix, C64};

pub type Pair = [f64; 2];

pub fn to_pairs(values: &[C64]) -> Vec<Pair> {
    values.iter().map(|z| [z.re, z.im]).collect()
}

pub fn from_pairs(pairs: &[Pair]) -> Result<Vec<C64>> {
    pairs
        .iter()
        .map(|&[re, im]| {
            if re.is_finite() && im.is_finite() {
                Ok(C64::new(re, im))
            } else {
                Err(Error::Validation("non-finite complex value".into()))
            }
        })
        .collect()
}

pub fn matrix_to_pairs(m: &CMatrix) -> Vec<Pair> {
    to_pairs(&crate::tensor::vec_rows(m))
}

pub fn matrix_from_pairs(pairs: &[Pair], rows: usize, cols: usize) -> Result<CMatrix> {
    if pairs.len() != rows * cols {
        return Err(Error::Validation(format!(
            "expected {} entries for a {rows}x{cols} matrix, got {}",
            rows * cols,
            pairs.len()
        )));
    }
    Ok(CMatrix::from_row_slice(rows, cols, &from_pairs(pairs)?))
}

/// Reads a square matrix whose side is inferred from the entry count.
pub fn square_from_pairs(pairs: &[Pair]) -> Result<CMatrix> {
    let n = (pairs.len() as f64).sqrt().round() as usize;
    if n * n != pairs.len() || n == 0 {
        return Err(Error::Validation(format!(
            "{} entries do not form a square matrix",
            pairs.len()
        )));
    }
    matrix_from_pairs(pairs, n, n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_roundtrip() {
        let m = CMatrix::from_fn(2, 3, |i, j| C64::new(i as f64, -(j as f64) * 0.1));
        let p = matrix_to_pairs(&m);
        assert_eq!(p[1], [0.0, -0.1]);
        assert_eq!(matrix_from_pairs(&p, 2, 3).unwrap(), m);
    }

    #[test]
    fn rejects_wrong_count() {
        assert!(square_from_pairs(&[[1.0, 0.0]; 3]).is_err());
        assert!(from_pairs(&[[f64::NAN, 0.0]]).is_err());
    }
}
