//! Dense row-major tensors and the handful of numeric kernels the metric needs.
//!
//! Kernels are written against the [`Real`] trait so the same code runs in
//! 32-bit for production and in 64-bit for gradient checking.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

/// Floating point element type usable by the kernels.
pub trait Real: Float + FromPrimitive + Sum + Default + Debug + Send + Sync + 'static {
    /// General strided product `c = a · b (+ c when accumulate)` with `a`
    /// logically `[m × k]`, `b` logically `[k × n]`, `c` logically `[m × n]`.
    /// Strides are in elements; panics when a view reaches past its slice.
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        a: (&[Self], usize, usize),
        b: (&[Self], usize, usize),
        c: (&mut [Self], usize, usize),
        accumulate: bool,
    );

    /// Contiguous product. A transposed operand is stored in the transposed
    /// shape (`[k × m]` for `a`, `[n × k]` for `b`).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_trans: bool,
        b: &[Self],
        b_trans: bool,
        c: &mut [Self],
        accumulate: bool,
    ) {
        let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
        let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
        Self::gemm_strided(m, k, n, (a, rsa, csa), (b, rsb, csb), (c, n, 1), accumulate);
    }

    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("constant representable")
    }
}

fn reach(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    (rows - 1) * rs + (cols - 1) * cs + 1
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm_strided(
                m: usize,
                k: usize,
                n: usize,
                (a, rsa, csa): (&[Self], usize, usize),
                (b, rsb, csb): (&[Self], usize, usize),
                (c, rsc, csc): (&mut [Self], usize, usize),
                accumulate: bool,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                assert!(reach(m, n, rsc, csc) <= c.len(), "gemm: output view out of bounds");
                if k == 0 {
                    if !accumulate {
                        for i in 0..m {
                            for j in 0..n {
                                c[i * rsc + j * csc] = 0.0;
                            }
                        }
                    }
                    return;
                }
                assert!(reach(m, k, rsa, csa) <= a.len(), "gemm: lhs view out of bounds");
                assert!(reach(k, n, rsb, csb) <= b.len(), "gemm: rhs view out of bounds");
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: the asserts above bound every element reached by the
                // three strided views inside their slices.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        beta,
                        c.as_mut_ptr(),
                        rsc as isize,
                        csc as isize,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Dense row-major `f32` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    name: Option<String>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            name: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
            name: None,
        }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("ragged rows"));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn vector(data: Vec<f32>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
            name: None,
        }
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    pub fn name(&self) -> Option<&str> {
        self.name.as_deref()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// `(rows, cols)` of a 2-D tensor; vectors count as a single row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            [c] => Ok((1, *c)),
            s => Err(Error::dim(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let (_, c) = self.dims2().expect("row() on a matrix");
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul inner dimensions disagree: [{m}×{k}] · [{k2}×{n}]"
        )));
    }
    let mut out = vec![0.0f32; m * n];
    f32::gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
    Tensor::new(vec![m, n], out)
}

/// Numerically stable softmax of a vector.
pub fn softmax(v: &Tensor) -> Result<Tensor> {
    if v.numel() == 0 {
        return Err(Error::dim("softmax of an empty vector"));
    }
    let mut out = v.data().to_vec();
    softmax_in_place(&mut out);
    Ok(Tensor::vector(out))
}

pub fn softmax_in_place<T: Real>(v: &mut [T]) {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = 0.0f64;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += x.to_f64().unwrap_or(0.0);
    }
    let inv = T::c(1.0 / sum);
    v.iter_mut().for_each(|x| *x = *x * inv);
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    let n = x.numel();
    if gamma.numel() != n || beta.numel() != n {
        return Err(Error::dim(format!(
            "layer_norm shapes disagree: x {}, gamma {}, beta {}",
            n,
            gamma.numel(),
            beta.numel()
        )));
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::config("layer_norm eps must be positive"));
    }
    let mut out = vec![0.0f32; n];
    layer_norm_row(x.data(), gamma.data(), beta.data(), eps, &mut out);
    Tensor::new(x.shape().to_vec(), out)
}

/// Normalizes one row and returns the reciprocal standard deviation.
pub fn layer_norm_row<T: Real>(x: &[T], gamma: &[T], beta: &[T], eps: f32, out: &mut [T]) -> T {
    let n = T::c(x.len() as f64);
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let rstd = T::one() / (var + T::c(eps as f64)).sqrt();
    for i in 0..x.len() {
        out[i] = gamma[i] * ((x[i] - mean) * rstd) + beta[i];
    }
    rstd
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<T: Real>(x: T) -> T {
    let inner = T::c(GELU_K) * (x + T::c(GELU_C) * x * x * x);
    T::c(0.5) * x * (T::one() + inner.tanh())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let x2 = x * x;
    let inner = T::c(GELU_K) * (x + T::c(GELU_C) * x2 * x);
    let t = inner.tanh();
    let dinner = T::c(GELU_K) * (T::one() + T::c(3.0 * GELU_C) * x2);
    T::c(0.5) * (T::one() + t) + T::c(0.5) * x * (T::one() - t * t) * dinner
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_pcg::Pcg64;

    fn triple_loop(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k) = a.dims2().unwrap();
        let (_, n) = b.dims2().unwrap();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for t in 0..k {
                    out[i * n + j] += a.data()[i * k + t] as f64 * b.data()[t * n + j] as f64;
                }
            }
        }
        out
    }

    fn random(rng: &mut Pcg64, r: usize, c: usize) -> Tensor {
        let data = (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(vec![r, c], data).unwrap()
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let b = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let eye =
            Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]])
                .unwrap();
        assert_eq!(matmul(&eye, &b).unwrap().data(), b.data());
        let s = matmul(
            &Tensor::from_rows(&[vec![2.0]]).unwrap(),
            &Tensor::from_rows(&[vec![3.0]]).unwrap(),
        )
        .unwrap();
        assert_eq!(s.data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Pcg64::seed_from_u64(3);
        for _ in 0..20 {
            let a = random(&mut rng, 3, 3);
            let b = random(&mut rng, 3, 3);
            let c = matmul(&a, &b).unwrap();
            for (x, y) in c.data().iter().zip(triple_loop(&a, &b)) {
                assert!((*x as f64 - y).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn gemm_transposed_operands() {
        let mut rng = Pcg64::seed_from_u64(9);
        let a = random(&mut rng, 4, 5);
        let b = random(&mut rng, 5, 3);
        let expect = triple_loop(&a, &b);
        let at = a.transpose().unwrap();
        let bt = b.transpose().unwrap();
        let mut c = vec![0.0f32; 12];
        f32::gemm(4, 5, 3, at.data(), true, bt.data(), true, &mut c, false);
        for (x, y) in c.iter().zip(&expect) {
            assert!((*x as f64 - y).abs() < 1e-5);
        }
        f32::gemm(4, 5, 3, a.data(), false, bt.data(), true, &mut c, true);
        for (x, y) in c.iter().zip(&expect) {
            assert!((*x as f64 - 2.0 * y).abs() < 1e-5);
        }
    }

    #[test]
    fn softmax_cases() {
        let s = softmax(&Tensor::vector(vec![0.0, 0.0])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&Tensor::vector(vec![0.0, 3.0f32.ln()])).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-6 && (s.data()[1] - 0.75).abs() < 1e-6);
        let v = Tensor::vector(vec![0.3, -1.2, 2.5, 0.0]);
        let shifted = Tensor::vector(v.data().iter().map(|x| x + 17.0).collect());
        assert!(softmax(&v).unwrap().max_abs_diff(&softmax(&shifted).unwrap()) < 1e-6);
        assert!(softmax(&Tensor::vector(vec![])).is_err());
    }

    #[test]
    fn layer_norm_cases() {
        let ones = Tensor::vector(vec![1.0; 4]);
        let zeros = Tensor::vector(vec![0.0; 4]);
        let y = layer_norm(&Tensor::vector(vec![3.0; 4]), &ones, &zeros, 1e-5).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));

        let y = layer_norm(
            &Tensor::vector(vec![-1.0, 1.0]),
            &Tensor::vector(vec![1.0; 2]),
            &Tensor::vector(vec![0.0; 2]),
            1e-12,
        )
        .unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-6 && (y.data()[1] - 1.0).abs() < 1e-6);

        let mut rng = Pcg64::seed_from_u64(5);
        let x: Vec<f32> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
        let g: Vec<f32> = (0..8).map(|_| rng.random_range(0.5..1.5)).collect();
        let b: Vec<f32> = (0..8).map(|_| rng.random_range(-0.5..0.5)).collect();
        let y = layer_norm(
            &Tensor::vector(x.clone()),
            &Tensor::vector(g.clone()),
            &Tensor::vector(b.clone()),
            1e-5,
        )
        .unwrap();
        let mean = x.iter().map(|v| *v as f64).sum::<f64>() / 8.0;
        let var = x.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / 8.0;
        for i in 0..8 {
            let expect = g[i] as f64 * (x[i] as f64 - mean) / (var + 1e-5).sqrt() + b[i] as f64;
            assert!((y.data()[i] as f64 - expect).abs() < 1e-6);
        }
        assert!(layer_norm(&ones, &Tensor::vector(vec![1.0; 3]), &zeros, 1e-5).is_err());
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.2] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_grad(x) - fd).abs() < 1e-8);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn matmul_associative(seed in 0u64..10_000, m in 1usize..6, k in 1usize..6, n in 1usize..6, p in 1usize..6) {
                let mut rng = Pcg64::seed_from_u64(seed);
                let a = random(&mut rng, m, k);
                let b = random(&mut rng, k, n);
                let c = random(&mut rng, n, p);
                let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
                let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
                prop_assert!(left.max_abs_diff(&right) <= 1e-4);
            }

            #[test]
            fn softmax_sums_to_one(v in proptest::collection::vec(-50.0f32..50.0, 1..4096)) {
                let s = softmax(&Tensor::vector(v)).unwrap();
                let total: f64 = s.data().iter().map(|x| *x as f64).sum();
                prop_assert!((total - 1.0).abs() <= 1e-6);
                prop_assert!(s.data().iter().all(|x| *x >= 0.0));
            }
        }
    }
}
