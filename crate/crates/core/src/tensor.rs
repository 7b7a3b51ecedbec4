//! Dense row-major tensors and the eager kernels the tape builds on.

use crate::error::{Error, Result};
use crate::float::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F = f32> {
    dims: Vec<usize>,
    data: Vec<F>,
}

/// Pointwise operations accepted by [`Tensor::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pointwise {
    Add,
    Sub,
    Hadamard,
    Relu,
    Scale,
}

/// Right-hand operand of a pointwise op: a tensor of identical dims or a scalar.
#[derive(Clone, Copy, Debug)]
pub enum Operand<'a, F> {
    Tensor(&'a Tensor<F>),
    Scalar(F),
}

impl<F: Scalar> Tensor<F> {
    pub fn new(dims: Vec<usize>, data: Vec<F>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "tensor dims must be positive, got {dims:?}"
            )));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::InvalidArgument(format!(
                "dims {dims:?} need {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    /// Construct without validation; callers guarantee `product(dims) == data.len()`.
    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<F>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Tensor { dims, data }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, F::zero())
    }

    pub fn ones(dims: &[usize]) -> Self {
        Self::full(dims, F::one())
    }

    pub fn full(dims: &[usize], value: F) -> Self {
        let n = dims.iter().product();
        Tensor::from_parts(dims.to_vec(), vec![value; n])
    }

    pub fn scalar(value: F) -> Self {
        Tensor::from_parts(vec![1], vec![value])
    }

    pub fn from_f64(dims: &[usize], values: &[f64]) -> Result<Self> {
        Tensor::new(dims.to_vec(), values.iter().map(|&v| F::of(v)).collect())
    }

    /// Stack equally sized rows into a `[rows × cols]` matrix.
    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.is_empty() || cols == 0 {
            return Err(Error::InvalidArgument(
                "from_rows needs a non-empty matrix".into(),
            ));
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::dims("from_rows", &[cols], &[r.len()]));
            }
            data.extend_from_slice(r);
        }
        Ok(Tensor::from_parts(vec![rows.len(), cols], data))
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension of a matrix.
    pub fn rows(&self) -> usize {
        self.dims[0]
    }

    /// Trailing extent of a matrix (everything after the first axis).
    pub fn cols(&self) -> usize {
        self.dims[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[F] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    /// Gather rows by index into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor<F> {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        let mut dims = self.dims.clone();
        dims[0] = idx.len();
        Tensor::from_parts(dims, data)
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        if dims.iter().product::<usize>() != self.data.len() {
            return Err(Error::dims("reshape", &self.dims, dims));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element-wise conversion to another precision.
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor::from_parts(
            self.dims.clone(),
            self.data.iter().map(|v| G::of(v.as_f64())).collect(),
        )
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> F {
        self.data.iter().fold(F::zero(), |m, v| m.max(v.abs()))
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Tensor<F> {
        Tensor::from_parts(self.dims.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor<F>, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        if self.dims != other.dims {
            return Err(Error::dims("zip_map", &self.dims, &other.dims));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor::from_parts(self.dims.clone(), data))
    }

    /// `self += alpha * other`, in place.
    pub fn axpy(&mut self, alpha: F, other: &Tensor<F>) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::dims("axpy", &self.dims, &other.dims));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    /// `[m×k] · [k×n] → [m×n]`.
    pub fn matmul(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        if self.dims.len() != 2 || other.dims.len() != 2 || self.dims[1] != other.dims[0] {
            return Err(Error::dims("matmul", &self.dims, &other.dims));
        }
        let (m, k, n) = (self.dims[0], self.dims[1], other.dims[1]);
        let mut out = vec![F::zero(); m * n];
        gemm_nn(&self.data, &other.data, &mut out, m, k, n);
        let out = Tensor::from_parts(vec![m, n], out);
        debug_assert!(out.is_finite(), "matmul produced a non-finite value");
        Ok(out)
    }

    /// `selfᵀ · other` for `self: [k×m]`, `other: [k×n]`.
    pub fn matmul_tn(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        if self.dims.len() != 2 || other.dims.len() != 2 || self.dims[0] != other.dims[0] {
            return Err(Error::dims("matmul_tn", &self.dims, &other.dims));
        }
        let (k, m, n) = (self.dims[0], self.dims[1], other.dims[1]);
        let mut out = vec![F::zero(); m * n];
        for p in 0..k {
            let a_row = &self.data[p * m..(p + 1) * m];
            let b_row = &other.data[p * n..(p + 1) * n];
            for (i, &a) in a_row.iter().enumerate() {
                if a == F::zero() {
                    continue;
                }
                let o = &mut out[i * n..(i + 1) * n];
                for (o, &b) in o.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    /// `self · otherᵀ` for `self: [m×k]`, `other: [n×k]`.
    pub fn matmul_nt(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        if self.dims.len() != 2 || other.dims.len() != 2 || self.dims[1] != other.dims[1] {
            return Err(Error::dims("matmul_nt", &self.dims, &other.dims));
        }
        let (m, k, n) = (self.dims[0], self.dims[1], other.dims[0]);
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &other.data[j * k..(j + 1) * k];
                out[i * n + j] = dot(a_row, b_row);
            }
        }
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    pub fn transpose(&self) -> Result<Tensor<F>> {
        if self.dims.len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "transpose needs a matrix, got {:?}",
                self.dims
            )));
        }
        let (m, n) = (self.dims[0], self.dims[1]);
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor::from_parts(vec![n, m], out))
    }

    /// Pointwise op with exact-match or scalar broadcasting.
    pub fn elementwise(&self, op: Pointwise, rhs: Operand<'_, F>) -> Result<Tensor<F>> {
        let out = match (op, rhs) {
            (Pointwise::Relu, _) => self.map(|v| v.max(F::zero())),
            (Pointwise::Add, Operand::Tensor(b)) => self.zip_map(b, |x, y| x + y)?,
            (Pointwise::Sub, Operand::Tensor(b)) => self.zip_map(b, |x, y| x - y)?,
            (Pointwise::Hadamard | Pointwise::Scale, Operand::Tensor(b)) => {
                self.zip_map(b, |x, y| x * y)?
            }
            (Pointwise::Add, Operand::Scalar(s)) => self.map(|x| x + s),
            (Pointwise::Sub, Operand::Scalar(s)) => self.map(|x| x - s),
            (Pointwise::Hadamard | Pointwise::Scale, Operand::Scalar(s)) => self.map(|x| x * s),
        };
        debug_assert!(out.is_finite(), "{op:?} produced a non-finite value");
        Ok(out)
    }

    pub fn add(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        self.elementwise(Pointwise::Add, Operand::Tensor(other))
    }

    pub fn sub(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        self.elementwise(Pointwise::Sub, Operand::Tensor(other))
    }

    pub fn hadamard(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        self.elementwise(Pointwise::Hadamard, Operand::Tensor(other))
    }

    pub fn scale(&self, s: F) -> Tensor<F> {
        self.map(|x| x * s)
    }

    pub fn relu(&self) -> Tensor<F> {
        self.map(|x| x.max(F::zero()))
    }

    pub fn sum_squares(&self) -> F {
        self.data.iter().map(|&v| v * v).sum()
    }
}

#[inline]
pub(crate) fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    let mut acc = F::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Row-major `out += a · b` with `a: [m×k]`, `b: [k×n]`.
fn gemm_nn<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let o = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in o.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    fn naive(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
        let (m, k, n) = (a.dims()[0], a.dims()[1], b.dims()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn identity_matmul() {
        let eye = Tensor::<f64>::from_f64(&[2, 2], &[1., 0., 0., 1.]).unwrap();
        let m = Tensor::<f64>::from_f64(&[2, 2], &[1., 2., 3., 4.]).unwrap();
        assert_eq!(eye.matmul(&m).unwrap(), m);
    }

    #[test]
    fn row_times_column() {
        let a = Tensor::<f64>::from_f64(&[1, 2], &[1., 2.]).unwrap();
        let b = Tensor::<f64>::from_f64(&[2, 1], &[3., 4.]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = RngState::new(7);
        let a: Tensor<f64> = rng.gaussian(&[5, 7]);
        let b: Tensor<f64> = rng.gaussian(&[7, 3]);
        let got = a.matmul(&b).unwrap();
        for (g, e) in got.data().iter().zip(naive(&a, &b)) {
            assert!((g - e).abs() <= 1e-12);
        }
        let tn = a.transpose().unwrap().matmul_tn(&b).unwrap();
        let nt = a.matmul_nt(&b.transpose().unwrap()).unwrap();
        for ((x, y), z) in got.data().iter().zip(tn.data()).zip(nt.data()) {
            assert!((x - y).abs() <= 1e-12 && (x - z).abs() <= 1e-12);
        }
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn pointwise_examples() {
        let a = Tensor::<f64>::from_f64(&[3], &[1., 2., 3.]).unwrap();
        let z = Tensor::<f64>::zeros(&[3]);
        assert_eq!(a.hadamard(&z).unwrap().data(), &[0., 0., 0.]);
        let r = Tensor::<f64>::from_f64(&[3], &[-1., 0., 2.]).unwrap();
        assert_eq!(r.relu().data(), &[0., 0., 2.]);
        assert_eq!(
            a.elementwise(Pointwise::Add, Operand::Scalar(0.0)).unwrap(),
            a
        );
        assert_eq!(a.add(&z).unwrap(), a);
        assert!(a.add(&Tensor::zeros(&[4])).is_err());
    }

    #[test]
    fn new_validates_length() {
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new(vec![0], vec![]).is_err());
    }
}
