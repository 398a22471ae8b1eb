//! Dense `f32` kernels for the encoder.

/// Row-major `f32` matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl std::fmt::Debug for Matrix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(
            rows * cols,
            data.len(),
            "{rows}x{cols} matrix from {} values",
            data.len()
        );
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self::new(rows, cols, data)
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Columns `start..start + width` as a new matrix.
    pub fn columns(&self, start: usize, width: usize) -> Matrix {
        Matrix::from_fn(self.rows, width, |r, c| self.get(r, start + c))
    }

    /// `self @ other`.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul {:?} @ {:?}", self, other);
        gemm(self, other, false)
    }

    /// `self @ other^T`.
    pub fn matmul_t(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "matmul_t {:?} @ {:?}^T", self, other);
        gemm(self, other, true)
    }

    /// Adds `bias` to every row.
    pub fn add_row(&mut self, bias: &[f32]) {
        assert_eq!(bias.len(), self.cols);
        for row in self.data.chunks_exact_mut(self.cols) {
            for (x, b) in row.iter_mut().zip(bias) {
                *x += b;
            }
        }
    }

    pub fn add(&mut self, other: &Matrix) {
        assert_eq!(self.shape(), other.shape());
        for (x, y) in self.data.iter_mut().zip(&other.data) {
            *x += y;
        }
    }

    pub fn map(mut self, f: impl Fn(f32) -> f32) -> Matrix {
        for x in self.data.iter_mut() {
            *x = f(*x);
        }
        self
    }
}

fn gemm(a: &Matrix, b: &Matrix, transpose_b: bool) -> Matrix {
    let (m, k) = a.shape();
    let n = if transpose_b { b.rows } else { b.cols };
    let mut c = vec![0.0f32; m * n];
    let (rsb, csb) = if transpose_b {
        (1, b.cols as isize)
    } else {
        (b.cols as isize, 1)
    };
    if m > 0 && n > 0 && k > 0 {
        // SAFETY: slices hold m*k, k*n and m*n elements and the strides
        // describe row-major layouts (or the transpose of one) within them.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.data.as_ptr(),
                k as isize,
                1,
                b.data.as_ptr(),
                rsb,
                csb,
                0.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    Matrix::new(m, n, c)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(mut m: Matrix) -> Matrix {
    let cols = m.cols;
    if cols == 0 {
        return m;
    }
    for row in m.data.chunks_exact_mut(cols) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    m
}

/// `softmax(Q K^T / sqrt(d_k))`, one row per query.
pub fn attention_weights(q: &Matrix, k: &Matrix) -> Matrix {
    let scale = 1.0 / (q.cols as f32).sqrt();
    softmax_rows(q.matmul_t(k).map(|x| x * scale))
}

/// Scaled dot-product attention.
pub fn sdpa(q: &Matrix, k: &Matrix, v: &Matrix) -> Matrix {
    assert_eq!(k.rows, v.rows, "keys and values disagree");
    attention_weights(q, k).matmul(v)
}

/// Tanh approximation of GELU.
pub fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2 / pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// Per-row layer normalization with population variance.
pub fn layer_norm(x: &Matrix, gamma: &[f32], beta: &[f32], eps: f32) -> Matrix {
    assert_eq!(gamma.len(), x.cols);
    assert_eq!(beta.len(), x.cols);
    let d = x.cols as f32;
    let mut out = x.clone();
    for row in out.data.chunks_exact_mut(x.cols) {
        let mean = row.iter().sum::<f32>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d;
        let inv = 1.0 / (var + eps).sqrt();
        for ((v, g), b) in row.iter_mut().zip(gamma).zip(beta) {
            *v = (*v - mean) * inv * g + b;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Matrix::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Matrix::new(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        assert_eq!(a.matmul(&b).data(), &[58.0, 64.0, 139.0, 154.0]);
        let bt = Matrix::new(2, 3, vec![7.0, 9.0, 11.0, 8.0, 10.0, 12.0]);
        assert_eq!(a.matmul_t(&bt).data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn single_token_attention_returns_value() {
        let q = Matrix::new(1, 4, vec![0.3, -1.0, 2.0, 0.5]);
        let k = Matrix::new(1, 4, vec![1.0, 1.0, -3.0, 0.0]);
        let v = Matrix::new(1, 4, vec![9.0, -8.0, 7.5, 0.25]);
        assert_eq!(sdpa(&q, &k, &v), v);
    }

    #[test]
    fn zero_queries_average_values() {
        let q = Matrix::zeros(3, 2);
        let k = Matrix::from_fn(4, 2, |r, c| (r * 2 + c) as f32);
        let v = Matrix::from_fn(4, 2, |r, c| (r as f32) * if c == 0 { 1.0 } else { -2.0 });
        let out = sdpa(&q, &k, &v);
        for r in 0..3 {
            assert!((out.get(r, 0) - 1.5).abs() < 1e-6);
            assert!((out.get(r, 1) + 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn gelu_at_zero() {
        assert_eq!(gelu(0.0), 0.0);
    }

    #[test]
    fn layer_norm_standardizes() {
        let x = Matrix::new(1, 4, vec![1.0, 2.0, 3.0, 4.0]);
        let y = layer_norm(&x, &[1.0; 4], &[0.0; 4], 0.0);
        let mean: f32 = y.row(0).iter().sum::<f32>() / 4.0;
        let var: f32 = y.row(0).iter().map(|v| v * v).sum::<f32>() / 4.0;
        assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-5);
    }
}
