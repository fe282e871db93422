use crate::error::{Error, Result};

/// Dense row-major tensor of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape("tensor", format!("invalid shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// A `[1, n]` row vector.
    pub fn row(values: &[f64]) -> Self {
        Self {
            shape: vec![1, values.len().max(1)],
            data: if values.is_empty() {
                vec![0.0]
            } else {
                values.to_vec()
            },
        }
    }

    /// Stacks equal-length rows into an `[rows, cols]` matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::shape("from_rows", "no rows"));
        };
        let cols = first.as_ref().len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape(
                    "from_rows",
                    format!("row {i} has {} columns, expected {cols}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows and columns when viewed as a matrix; 1-D tensors are a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => (s[0], s[1..].iter().product()),
        }
    }

    pub fn row_slice(&self, i: usize) -> &[f64] {
        let (_, c) = self.dims2();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        let (_, c) = self.dims2();
        self.data.chunks_exact(c)
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

// Dense kernels. All matrices are row-major slices.

fn gemm(
    (n, k, m): (usize, usize, usize),
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
) -> Vec<f64> {
    assert!(
        a.len() >= n * k && b.len() >= k * m,
        "gemm operand too short"
    );
    let mut out = vec![0.0; n * m];
    if n == 0 || m == 0 {
        return out;
    }
    // SAFETY: the asserts above bound every index the strides can reach, and
    // `out` is an exclusively borrowed n*m buffer.
    unsafe {
        matrixmultiply::dgemm(
            n,
            k,
            m,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            out.as_mut_ptr(),
            m as isize,
            1,
        );
    }
    out
}

/// out[n,m] = a[n,k] · b[k,m]
pub(crate) fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    gemm((n, k, m), a, (k, 1), b, (m, 1))
}

/// out[k,m] = a[n,k]ᵀ · g[n,m]
pub(crate) fn matmul_at_b(a: &[f64], g: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    gemm((k, n, m), a, (1, k), g, (m, 1))
}

/// out[n,k] = g[n,m] · b[k,m]ᵀ
pub(crate) fn matmul_a_bt(g: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    gemm((n, m, k), g, (m, 1), b, (1, m))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn matmul_kernels_agree_with_naive() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.5).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect(); // 3x4
        let c = matmul(&a, &b, 2, 3, 4);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert!((c[i * 4 + j] - want).abs() < 1e-14);
            }
        }
        // aᵀ g with g 2x4 -> 3x4
        let atg = matmul_at_b(&a, &c, 2, 3, 4);
        for p in 0..3 {
            for j in 0..4 {
                let want: f64 = (0..2).map(|i| a[i * 3 + p] * c[i * 4 + j]).sum();
                assert!((atg[p * 4 + j] - want).abs() < 1e-12);
            }
        }
        // g bᵀ with g 2x4, b 3x4 -> 2x3
        let gbt = matmul_a_bt(&c, &b, 2, 3, 4);
        for i in 0..2 {
            for p in 0..3 {
                let want: f64 = (0..4).map(|j| c[i * 4 + j] * b[p * 4 + j]).sum();
                assert!((gbt[i * 3 + p] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kernels_agree_with_naive_on_blocked_sizes() {
        let (n, k, m) = (37, 70, 19);
        let a: Vec<f64> = (0..n * k)
            .map(|v| ((v * 7 % 13) as f64 - 6.0) / 5.0)
            .collect();
        let b: Vec<f64> = (0..k * m)
            .map(|v| ((v * 5 % 11) as f64 - 5.0) / 3.0)
            .collect();
        let c = matmul(&a, &b, n, k, m);
        for i in 0..n {
            for j in 0..m {
                let want: f64 = (0..k).map(|p| a[i * k + p] * b[p * m + j]).sum();
                assert!((c[i * m + j] - want).abs() < 1e-10);
            }
        }
        let atg = matmul_at_b(&a, &c, n, k, m);
        for p in 0..k {
            for j in 0..m {
                let want: f64 = (0..n).map(|i| a[i * k + p] * c[i * m + j]).sum();
                assert!((atg[p * m + j] - want).abs() < 1e-8);
            }
        }
        let gbt = matmul_a_bt(&c, &b, n, k, m);
        for i in 0..n {
            for p in 0..k {
                let want: f64 = (0..m).map(|j| c[i * m + j] * b[p * m + j]).sum();
                assert!((gbt[i * k + p] - want).abs() < 1e-8);
            }
        }
    }
}
