//! Dense 64-bit float tensors (rank 0..=2) used by every kernel in the crate.
//!
//! Storage is a flat row-major `Vec<f64>`. Rank-1 tensors have shape `[n]`,
//! matrices `[rows, cols]`, and scalars `[1]`. The `requires_grad` flag only
//! matters when a tensor is registered on a [`crate::numerics::tape::Tape`];
//! it marks parameters whose gradients must be accumulated.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n], requires_grad: false }
    }

    pub fn filled(shape: &[usize], value: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n], requires_grad: false }
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor { shape: vec![1], data: vec![value], requires_grad: false }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data, requires_grad: false })
    }

    /// Build a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Tensor> {
        if rows.is_empty() {
            return Err(Error::Dimension("from_rows needs at least one row".into()));
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Dimension(format!(
                    "row {} has {} columns, expected {}",
                    i,
                    r.len(),
                    cols
                )));
            }
            data.extend_from_slice(r);
        }
        Tensor::from_vec(&[rows.len(), cols], data)
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Tensor {
        self.requires_grad = flag;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn is_vector(&self) -> bool {
        self.shape.len() == 1
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Scalar value; errors on anything with more than one element.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Dimension(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => 1,
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        debug_assert!(self.is_matrix());
        self.data[r * self.shape[1] + c]
    }

    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        debug_assert!(self.is_matrix());
        let cols = self.shape[1];
        &mut self.data[r * cols + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        debug_assert!(self.is_matrix());
        let cols = self.shape[1];
        &self.data[r * cols..(r + 1) * cols]
    }

    /// Copy of the half-open row range [start, stop) as a new matrix.
    pub fn row_range(&self, start: usize, stop: usize) -> Result<Tensor> {
        if !self.is_matrix() {
            return Err(Error::Dimension(format!("row_range on shape {:?}", self.shape)));
        }
        if start > stop || stop > self.shape[0] {
            return Err(Error::Index(format!(
                "row range {start}..{stop} out of {} rows",
                self.shape[0]
            )));
        }
        let cols = self.shape[1];
        Ok(Tensor {
            shape: vec![stop - start, cols],
            data: self.data[start * cols..stop * cols].to_vec(),
            requires_grad: false,
        })
    }

    /// New matrix whose rows are the given rows of `self`, in order
    /// (repeats allowed — used for bootstrap-style sampling).
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        if !self.is_matrix() {
            return Err(Error::Dimension(format!("gather_rows on shape {:?}", self.shape)));
        }
        let cols = self.shape[1];
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= self.shape[0] {
                return Err(Error::Index(format!("row {i} out of {} rows", self.shape[0])));
            }
            data.extend_from_slice(&self.data[i * cols..(i + 1) * cols]);
        }
        Ok(Tensor { shape: vec![indices.len(), cols], data, requires_grad: false })
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} ({} elems) to {:?}",
                self.shape, self.data.len(), shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
            requires_grad: self.requires_grad,
        })
    }

    pub fn transposed(&self) -> Result<Tensor> {
        if !self.is_matrix() {
            return Err(Error::Dimension("transpose needs a matrix".into()));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::from_vec(&[n, m], out)
    }

    /// Error if any element is NaN or infinite.
    pub fn validate_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric(format!("{what} contains a non-finite value")))
        }
    }

    /// Order-sensitive FNV-1a hash over the shape and the raw bit patterns of
    /// the elements. Used to assert buffers were not mutated.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for &d in &self.shape {
            for b in (d as u64).to_le_bytes() {
                eat(b);
            }
        }
        for &x in &self.data {
            for b in x.to_bits().to_le_bytes() {
                eat(b);
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor::from_vec(&[2, 3], vec![1.0; 5]).is_err());
        assert!(Tensor::from_vec(&[2, 3], vec![1.0; 6]).is_ok());
    }

    #[test]
    fn row_and_element_access() {
        let t = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(t.at(1, 0), 3.0);
        assert_eq!(t.row_slice(0), &[1.0, 2.0]);
        assert_eq!(t.rows(), 2);
        assert_eq!(t.cols(), 2);
    }

    #[test]
    fn checksum_changes_with_data_and_shape() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut c = a.clone();
        assert_ne!(a.checksum(), b.checksum());
        assert_eq!(a.checksum(), c.checksum());
        c.data_mut()[0] = 1.5;
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn validate_finite_catches_nan_and_inf() {
        let mut t = Tensor::zeros(&[3]);
        assert!(t.validate_finite("t").is_ok());
        t.data_mut()[1] = f64::NAN;
        assert!(t.validate_finite("t").is_err());
        t.data_mut()[1] = f64::INFINITY;
        assert!(t.validate_finite("t").is_err());
    }

    #[test]
    fn transpose_round_trip() {
        let t = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let tt = t.transposed().unwrap().transposed().unwrap();
        assert_eq!(t, tt.with_requires_grad(false));
    }
}
