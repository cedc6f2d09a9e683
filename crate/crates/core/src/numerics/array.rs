//! Dense row-major arrays with finiteness and shape invariants.

use crate::error::{Error, Result};

/// Dense array of `f64` values in row-major order.
///
/// Invariants: `dims.iter().product() == data.len()` and every value is
/// finite. Public constructors enforce both.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseArray {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl DenseArray {
    /// Builds an array after validating shape and finiteness.
    pub fn from_vec(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = dims.iter().product();
        if expect != data.len() {
            return Err(Error::DimMismatch(format!(
                "dims {:?} imply {} elements, got {}",
                dims,
                expect,
                data.len()
            )));
        }
        let arr = Self { dims, data };
        arr.check_finite("DenseArray::from_vec")?;
        Ok(arr)
    }

    /// One-dimensional array from a plain vector.
    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::from_vec(vec![n], data)
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n: usize = dims.iter().product();
        Self {
            dims,
            data: vec![0.0; n],
        }
    }

    /// Internal constructor for values already known to be valid.
    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self { dims, data }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Element of a 2-d array at (row, col).
    pub fn at(&self, row: usize, col: usize) -> f64 {
        debug_assert_eq!(self.dims.len(), 2);
        self.data[row * self.dims[1] + col]
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    pub fn same_dims(&self, other: &Self) -> bool {
        self.dims == other.dims
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_shape_mismatch() {
        assert!(DenseArray::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(DenseArray::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn zero_row_batch_is_representable() {
        let a = DenseArray::from_vec(vec![0, 4], Vec::new()).unwrap();
        assert_eq!(a.dims(), [0, 4]);
        assert!(a.is_empty());
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        assert!(DenseArray::vector(vec![1.0, f64::NAN]).is_err());
        assert!(DenseArray::vector(vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn row_major_indexing() {
        let a = DenseArray::from_vec(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(a.at(0, 2), 3.0);
        assert_eq!(a.at(1, 0), 4.0);
    }
}
