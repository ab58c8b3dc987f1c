//! Dense row-major tensors, seeded random streams and spectral-norm estimation.
//!
//! Everything downstream (the tape, the denoiser, the learner) works on
//! [`Tensor`]: a matrix of `f64` with an explicit shape. Vectors are stored
//! as `n x 1` tensors.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(
                "Tensor::new",
                format!("{} entries", rows * cols),
                data.len(),
            ));
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Column vector holding `values`.
    pub fn vector(values: Vec<f64>) -> Self {
        Tensor {
            rows: values.len(),
            cols: 1,
            data: values,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::dim("Tensor::from_rows", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(rows.len(), cols, data)
    }

    /// Builds a matrix whose `c`-th column is `columns[c]`.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let rows = columns.first().map_or(0, Vec::len);
        let mut t = Tensor::zeros(rows, columns.len());
        for (c, col) in columns.iter().enumerate() {
            if col.len() != rows {
                return Err(Error::dim("Tensor::from_columns", rows, col.len()));
            }
            t.set_column(c, col);
        }
        Ok(t)
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn set_column(&mut self, c: usize, values: &[f64]) {
        for (r, &v) in values.iter().enumerate() {
            self.set(r, c, v);
        }
    }

    pub fn transpose(&self) -> Tensor {
        let mut t = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| c * v)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with("add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with("sub", other, |a, b| a - b)
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        self.check_same("axpy", other)?;
        axpy(alpha, &other.data, &mut self.data);
        Ok(())
    }

    fn zip_with(&self, op: &'static str, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check_same(op, other)?;
        Ok(Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub(crate) fn check_same(&self, op: &'static str, other: &Tensor) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dim(
                op,
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        Ok(())
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.check_same("dot", other)?;
        Ok(dot(&self.data, &other.data))
    }

    pub fn sq_norm(&self) -> f64 {
        dot(&self.data, &self.data)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.sq_norm().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        linf_norm(self)
    }

    pub fn l1_norm(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn is_all_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sum of each column.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for row in self.data.chunks_exact(self.cols.max(1)) {
            for (s, v) in sums.iter_mut().zip(row) {
                *s += v;
            }
        }
        sums
    }

    /// New matrix whose columns are `self`'s columns in the order `perm`.
    pub fn permute_columns(&self, perm: &[usize]) -> Tensor {
        let mut out = Tensor::zeros(self.rows, perm.len());
        for r in 0..self.rows {
            for (c_new, &c_old) in perm.iter().enumerate() {
                out.data[r * perm.len() + c_new] = self.data[r * self.cols + c_old];
            }
        }
        out
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out = A x` for row-major `A`.
pub(crate) fn gemv(a: &Tensor, x: &[f64], out: &mut [f64]) {
    for (o, row) in out.iter_mut().zip(a.data.chunks_exact(a.cols)) {
        *o = dot(row, x);
    }
}

/// `out = A^T x` for row-major `A`.
pub(crate) fn gemv_t(a: &Tensor, x: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for (xi, row) in x.iter().zip(a.data.chunks_exact(a.cols)) {
        axpy(*xi, row, out);
    }
}

/// `acc += u v^T` where `acc` is row-major `u.len() x v.len()`.
pub(crate) fn add_outer(acc: &mut [f64], u: &[f64], v: &[f64]) {
    for (ui, row) in u.iter().zip(acc.chunks_exact_mut(v.len())) {
        if *ui != 0.0 {
            axpy(*ui, v, row);
        }
    }
}

/// Matrix-vector product `A x`; `x` must be a vector of length `A.cols`.
pub fn matvec(a: &Tensor, x: &Tensor) -> Result<Tensor> {
    if x.cols != 1 || x.rows != a.cols {
        return Err(Error::dim(
            "matvec",
            format!("({}, 1)", a.cols),
            format!("{:?}", x.shape()),
        ));
    }
    let mut out = vec![0.0; a.rows];
    gemv(a, &x.data, &mut out);
    Ok(Tensor::vector(out))
}

/// Transposed matrix-vector product `A^T x`.
pub fn matvec_t(a: &Tensor, x: &Tensor) -> Result<Tensor> {
    if x.cols != 1 || x.rows != a.rows {
        return Err(Error::dim(
            "matvec_t",
            format!("({}, 1)", a.rows),
            format!("{:?}", x.shape()),
        ));
    }
    let mut out = vec![0.0; a.cols];
    gemv_t(a, &x.data, &mut out);
    Ok(Tensor::vector(out))
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols != b.rows {
        return Err(Error::dim(
            "matmul",
            format!("{} rows on the right", a.cols),
            b.rows,
        ));
    }
    let mut out = Tensor::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            axpy(aik, &b.data[k * b.cols..(k + 1) * b.cols], out_row);
        }
    }
    Ok(out)
}

/// Largest absolute entry; 0 for an empty tensor.
pub fn linf_norm(v: &Tensor) -> f64 {
    v.data.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Purpose tag of a random stream. Streams with different tags never
/// share draws even under the same seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    Data,
    Init,
    Batch,
    Baseline,
    Eval,
    Power,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Data => 1,
            Stream::Init => 2,
            Stream::Batch => 3,
            Stream::Baseline => 4,
            Stream::Eval => 5,
            Stream::Power => 6,
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seeded, counter-based random stream.
///
/// `(seed, stream)` fully determines the draw sequence. [`Rng::derive`]
/// splits off independent child streams, e.g. one per batch item, so that
/// parallel workers never share a generator.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    stream: Stream,
    path: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64, stream: Stream) -> Self {
        Self::at(seed, stream, 0)
    }

    fn at(seed: u64, stream: Stream, path: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(splitmix64(stream.tag() ^ splitmix64(path)));
        Rng {
            seed,
            stream,
            path,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> Stream {
        self.stream
    }

    /// Independent child stream number `index`.
    pub fn derive(&self, index: u64) -> Rng {
        Self::at(
            self.seed,
            self.stream,
            splitmix64(self.path.rotate_left(17) ^ splitmix64(index.wrapping_add(1))),
        )
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    pub(crate) fn core(&mut self) -> &mut ChaCha8Rng {
        &mut self.inner
    }
}

/// Tensor with iid `N(mean, std^2)` entries.
pub fn gaussian(rows: usize, cols: usize, mean: f64, std: f64, rng: &mut Rng) -> Tensor {
    debug_assert!(std >= 0.0);
    let data = (0..rows * cols).map(|_| mean + std * rng.normal()).collect();
    Tensor { rows, cols, data }
}

pub const POWER_TOL: f64 = 1e-9;
pub const POWER_MAX_ITER: usize = 10_000;

/// Estimates `||D^T D||_2` (the squared spectral norm of `D`) by power
/// iteration on `D^T D` from a fixed pseudo-random unit start.
///
/// The returned Rayleigh quotient never exceeds the true value. Iteration
/// stops once successive estimates differ by less than `tol` relative.
pub fn spectral_norm_sq(d: &Tensor, tol: f64, max_iter: usize) -> Result<f64> {
    if d.is_all_zero() {
        return Err(Error::ZeroOperator);
    }
    let (p, m) = d.shape();
    let mut rng = Rng::new(0x5eed_0f_90e5, Stream::Power);
    let mut v: Vec<f64> = (0..m).map(|_| rng.normal()).collect();
    let n = dot(&v, &v).sqrt();
    v.iter_mut().for_each(|x| *x /= n);

    let mut dv = vec![0.0; p];
    let mut u = vec![0.0; m];
    let mut estimate = 0.0;
    for _ in 0..max_iter.max(1) {
        gemv(d, &v, &mut dv);
        gemv_t(d, &dv, &mut u);
        let next = dot(&v, &u);
        let norm = dot(&u, &u).sqrt();
        if norm == 0.0 {
            // start landed in the null space; nothing better to report
            return Ok(next.max(estimate));
        }
        let done = (next - estimate).abs() <= tol * next.abs();
        estimate = next;
        for (vi, ui) in v.iter_mut().zip(&u) {
            *vi = ui / norm;
        }
        if done {
            break;
        }
    }
    Ok(estimate)
}
