//! Dense row-major tensors over a generic real element type.
//!
//! Training runs in `f32`; gradient verification runs the same code in `f64`.

use num_traits::{Float, NumCast};

/// Element type for all numeric kernels. `f32` and `f64` satisfy this.
pub trait Real:
    Float + NumCast + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self {
        <Self as NumCast>::from(x).expect("f64 -> Real conversion")
    }
    fn to_f64_(self) -> f64 {
        <f64 as NumCast>::from(self).expect("Real -> f64 conversion")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Dense tensor with row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(
            n,
            data.len(),
            "tensor shape {:?} needs {} values, got {}",
            shape,
            n,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Self {
        Tensor::new(shape, data.iter().map(|&x| T::from_f64(x)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of len {}", self.len());
        self.data[0]
    }

    /// Rows of a 2-d tensor (a 1-d tensor counts as a single row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => panic!("rows() on tensor of rank {}", self.shape.len()),
        }
    }

    /// Columns of a 2-d tensor (or length of a 1-d tensor).
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            _ => panic!("cols() on tensor of rank {}", self.shape.len()),
        }
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn get2(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols() + c]
    }

    pub fn set2(&mut self, r: usize, c: usize, v: T) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64_()).collect()
    }

    /// Cast elementwise into another real type.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor::new(
            self.shape.clone(),
            self.data
                .iter()
                .map(|&v| U::from_f64(v.to_f64_()))
                .collect(),
        )
    }

    /// Squared Euclidean norm of all elements.
    pub fn sq_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| {
                let x = v.to_f64_();
                x * x
            })
            .sum()
    }
}

/// C = A · B for row-major 2-d tensors, panics on rank > 2.
/// Treats 1-d tensors as single rows.
pub(crate) fn matmul_raw<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    assert_eq!(k, k2, "matmul inner dims {} vs {}", k, k2);
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let a_row = a.row(i);
        let o_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let b_row = b.row(p);
            for (o, &bv) in o_row.iter_mut().zip(b_row.iter()) {
                *o = *o + av * bv;
            }
        }
    }
    let shape = if a.shape().len() == 1 && m == 1 {
        vec![n]
    } else {
        vec![m, n]
    };
    Tensor::new(shape, out)
}

/// C = A · Bᵀ.
pub(crate) fn matmul_nt_raw<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, k) = (a.rows(), a.cols());
    let (n, k2) = (b.rows(), b.cols());
    assert_eq!(k, k2, "matmul_nt inner dims {} vs {}", k, k2);
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let a_row = a.row(i);
        for j in 0..n {
            let b_row = b.row(j);
            let mut acc = T::zero();
            for (&av, &bv) in a_row.iter().zip(b_row.iter()) {
                acc = acc + av * bv;
            }
            out[i * n + j] = acc;
        }
    }
    let shape = if a.shape().len() == 1 && m == 1 {
        vec![n]
    } else {
        vec![m, n]
    };
    Tensor::new(shape, out)
}

/// C = Aᵀ · B.
pub(crate) fn matmul_tn_raw<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (k, m) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    assert_eq!(k, k2, "matmul_tn inner dims {} vs {}", k, k2);
    let mut out = vec![T::zero(); m * n];
    for p in 0..k {
        let a_row = a.row(p);
        let b_row = b.row(p);
        for (i, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let o_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row.iter()) {
                *o = *o + av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let i2: Tensor<f64> = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b = Tensor::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]);
        assert_eq!(matmul_raw(&i2, &b).data(), b.data());
    }

    #[test]
    fn matmul_forced_value() {
        let a: Tensor<f64> = Tensor::new(vec![1, 2], vec![1.0, 2.0]);
        let b = Tensor::new(vec![2, 1], vec![3.0, 4.0]);
        let c = matmul_raw(&a, &b);
        assert_eq!(c.data(), &[11.0]);
    }

    #[test]
    #[should_panic(expected = "matmul inner dims")]
    fn matmul_shape_mismatch_panics() {
        let a: Tensor<f64> = Tensor::zeros(vec![2, 3]);
        let b: Tensor<f64> = Tensor::zeros(vec![2, 2]);
        matmul_raw(&a, &b);
    }

    #[test]
    fn transposed_variants_agree() {
        let a: Tensor<f64> = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::new(vec![4, 3], (0..12).map(|i| i as f64 * 0.5).collect());
        // A·Bᵀ elementwise against direct dot products
        let c = matmul_nt_raw(&a, &b);
        for i in 0..2 {
            for j in 0..4 {
                let direct: f64 = (0..3).map(|k| a.get2(i, k) * b.get2(j, k)).sum();
                assert!((c.get2(i, j) - direct).abs() < 1e-12);
            }
        }
        // Aᵀ·A
        let d = matmul_tn_raw(&a, &a);
        assert_eq!(d.shape(), &[3, 3]);
        for i in 0..3 {
            for j in 0..3 {
                let direct: f64 = (0..2).map(|k| a.get2(k, i) * a.get2(k, j)).sum();
                assert!((d.get2(i, j) - direct).abs() < 1e-12);
            }
        }
    }
}
