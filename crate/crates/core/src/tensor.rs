use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major `f64` array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expect} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    /// Builds an `n x d` matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("rows of unequal length".into()));
        }
        Ok(Self {
            shape: vec![rows.len(), d],
            data: rows.concat(),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn map_inplace(&mut self, f: impl Fn(f64) -> f64) {
        self.data.iter_mut().for_each(|v| *v = f(*v));
    }

    pub fn fill(&mut self, value: f64) {
        self.data.fill(value);
    }

    /// `self (n x k) * other^T (m x k) -> n x m`.
    pub fn matmul_transposed(&self, other: &Tensor) -> Tensor {
        let (n, k) = (self.rows(), self.cols());
        let m = other.rows();
        debug_assert_eq!(other.cols(), k);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let a = self.row(i);
            for j in 0..m {
                let b = other.row(j);
                out[i * m + j] = a.iter().zip(b).map(|(x, y)| x * y).sum();
            }
        }
        Tensor {
            shape: vec![n, m],
            data: out,
        }
    }

    /// `self (n x k) * other (k x m) -> n x m`.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (n, k) = (self.rows(), self.cols());
        let m = other.cols();
        debug_assert_eq!(other.rows(), k);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let a = self.row(i);
            let o = &mut out[i * m..(i + 1) * m];
            for (p, &av) in a.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                for (ov, bv) in o.iter_mut().zip(other.row(p)) {
                    *ov += av * bv;
                }
            }
        }
        Tensor {
            shape: vec![n, m],
            data: out,
        }
    }

    /// `self^T (k x n) * other (n x m) -> k x m`.
    pub fn transposed_matmul(&self, other: &Tensor) -> Tensor {
        let (n, k) = (self.rows(), self.cols());
        let m = other.cols();
        debug_assert_eq!(other.rows(), n);
        let mut out = vec![0.0; k * m];
        for r in 0..n {
            let a = self.row(r);
            let b = other.row(r);
            for (p, &av) in a.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                for (ov, bv) in out[p * m..(p + 1) * m].iter_mut().zip(b) {
                    *ov += av * bv;
                }
            }
        }
        Tensor {
            shape: vec![k, m],
            data: out,
        }
    }

    /// Adds `bias` to every row.
    pub fn add_row_vector(&mut self, bias: &Tensor) {
        let c = self.cols();
        debug_assert_eq!(bias.len(), c);
        for row in self.data.chunks_mut(c) {
            row.iter_mut().zip(&bias.data).for_each(|(v, b)| *v += b);
        }
    }

    /// Column sums of a matrix.
    pub fn sum_rows(&self) -> Tensor {
        let c = self.cols();
        let mut out = vec![0.0; c];
        for row in self.data.chunks(c) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        Tensor {
            shape: vec![c],
            data: out,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap().len(), 6);
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0, 0.0, -1.0], vec![2.0, 1.0, 0.5]]).unwrap();
        let ab = a.matmul(&b);
        assert_eq!(ab.shape(), &[3, 3]);
        assert_eq!(ab.row(0), &[5.0, 2.0, 0.0]);
        let bt = Tensor::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0], vec![-1.0, 0.5]]).unwrap();
        assert_eq!(a.matmul_transposed(&bt), ab);
        let at_a = a.transposed_matmul(&a);
        assert_eq!(at_a.data(), &[35.0, 44.0, 44.0, 56.0]);
    }
}
