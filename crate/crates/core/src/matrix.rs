use alloc::vec;
use alloc::vec::Vec;

use crate::bf16::{bf16_encode, Bf16};
use crate::{Error, Result};

/// Row-major bfloat16 matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bf16Matrix {
    rows: usize,
    cols: usize,
    data: Vec<Bf16>,
}

impl Bf16Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<Bf16>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DataLength {
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Bf16Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Bf16Matrix {
            rows,
            cols,
            data: vec![Bf16::ZERO; rows * cols],
        }
    }

    /// Round every entry of `values` to bf16.
    pub fn from_f32(rows: usize, cols: usize, values: &[f32]) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::DataLength {
                expected: rows * cols,
                got: values.len(),
            });
        }
        Ok(Bf16Matrix {
            rows,
            cols,
            data: values.iter().map(|&x| bf16_encode(x)).collect(),
        })
    }

    pub(crate) fn from_f32_unchecked(rows: usize, cols: usize, values: &[f32]) -> Self {
        debug_assert_eq!(values.len(), rows * cols);
        Bf16Matrix {
            rows,
            cols,
            data: values.iter().map(|&x| bf16_encode(x)).collect(),
        }
    }

    pub fn filled(rows: usize, cols: usize, value: Bf16) -> Self {
        Bf16Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[Bf16] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [Bf16] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> Bf16 {
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: Bf16) {
        self.data[row * self.cols + col] = value;
    }

    #[inline]
    pub fn row(&self, row: usize) -> &[Bf16] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        self.data.iter().map(|v| v.to_f32()).collect()
    }

    pub fn transpose(&self) -> Bf16Matrix {
        let mut out = Vec::with_capacity(self.data.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                out.push(self.data[r * self.cols + c]);
            }
        }
        Bf16Matrix {
            rows: self.cols,
            cols: self.rows,
            data: out,
        }
    }

    /// Copy of the block `rows x cols` starting at (`row0`, `col0`).
    pub fn block(&self, row0: usize, col0: usize, rows: usize, cols: usize) -> Bf16Matrix {
        let mut out = Vec::with_capacity(rows * cols);
        for r in row0..row0 + rows {
            out.extend_from_slice(&self.data[r * self.cols + col0..r * self.cols + col0 + cols]);
        }
        Bf16Matrix {
            rows,
            cols,
            data: out,
        }
    }

    /// Write `src` into the block starting at (`row0`, `col0`).
    pub fn set_block(&mut self, row0: usize, col0: usize, src: &Bf16Matrix) {
        for r in 0..src.rows {
            let dst = (row0 + r) * self.cols + col0;
            self.data[dst..dst + src.cols].copy_from_slice(src.row(r));
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn length_is_checked() {
        assert!(Bf16Matrix::new(2, 3, vec![Bf16::ZERO; 5]).is_err());
        assert!(Bf16Matrix::new(2, 3, vec![Bf16::ZERO; 6]).is_ok());
    }

    #[test]
    fn transpose_and_blocks() {
        let m = Bf16Matrix::from_f32(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let t = m.transpose();
        assert_eq!(t.shape(), (3, 2));
        assert_eq!(t.to_f32_vec(), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let b = m.block(0, 1, 2, 2);
        assert_eq!(b.to_f32_vec(), vec![2.0, 3.0, 5.0, 6.0]);
        let mut z = Bf16Matrix::zeros(2, 3);
        z.set_block(0, 1, &b);
        assert_eq!(z.to_f32_vec(), vec![0.0, 2.0, 3.0, 0.0, 5.0, 6.0]);
    }
}
