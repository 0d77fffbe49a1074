//! Dense f64 primitives shared by every stage of the model.
//!
//! Everything here is a pure function of its inputs. Matrices are row-major
//! and always carry their shape; vectors are plain slices.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to probabilities before taking a logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Stacks equal-length rows. An empty slice gives a `0 x width` matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R], width: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * width);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != width {
                return Err(Error::invalid(format!(
                    "row {i} has length {}, expected {width}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols: width,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Same data, new shape.
    pub fn reshaped(mut self, rows: usize, cols: usize) -> Result<Self> {
        if rows * cols != self.data.len() {
            return Err(Error::invalid(format!(
                "cannot reshape {}x{} into {rows}x{cols}",
                self.rows, self.cols
            )));
        }
        self.rows = rows;
        self.cols = cols;
        Ok(self)
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// `self * rhs`; panics on inner-dimension mismatch (internal invariant).
    pub fn matmul(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(
            self.cols, rhs.rows,
            "matmul shape mismatch: {:?} x {:?}",
            self.shape(),
            rhs.shape()
        );
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        matmul_into(
            &self.data,
            &rhs.data,
            &mut out.data,
            self.rows,
            self.cols,
            rhs.cols,
        );
        out
    }

    /// `self^T * rhs` without materializing the transpose.
    pub fn t_matmul(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.rows, rhs.rows, "t_matmul shape mismatch");
        let (n, k, m) = (self.rows, self.cols, rhs.cols);
        let mut out = Matrix::zeros(k, m);
        for r in 0..n {
            let a = &self.data[r * k..(r + 1) * k];
            let b = &rhs.data[r * m..(r + 1) * m];
            for (i, &av) in a.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let o = &mut out.data[i * m..(i + 1) * m];
                for (ov, &bv) in o.iter_mut().zip(b) {
                    *ov += av * bv;
                }
            }
        }
        out
    }

    /// `self * rhs^T` without materializing the transpose.
    pub fn matmul_t(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.cols, rhs.cols, "matmul_t shape mismatch");
        let (n, k, m) = (self.rows, self.cols, rhs.rows);
        let mut out = Matrix::zeros(n, m);
        for i in 0..n {
            let a = &self.data[i * k..(i + 1) * k];
            for j in 0..m {
                out.data[i * m + j] = dot(a, &rhs.data[j * k..(j + 1) * k]);
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, c: f64) -> Matrix {
        self.map(|x| x * c)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Row-major `out += a(n x k) * b(k x m)`, accumulated in index order.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let o = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (ov, &bv) in o.iter_mut().zip(brow) {
                *ov += av * bv;
            }
        }
    }
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn l2_norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln sigmoid(x) = -softplus(-x)` without underflow.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{what} contains a non-finite value")))
    }
}

fn ensure_same_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::invalid(format!("{what}: length {a} vs {b}")))
    }
}

/// Nonnegative entries summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    pub const SUM_TOLERANCE: f64 = 1e-9;

    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("probability vector is empty"));
        }
        if values.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::invalid("probability outside [0, 1]"));
        }
        let total: f64 = values.iter().sum();
        if (total - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(Error::invalid(format!("probabilities sum to {total}")));
        }
        Ok(Self(values))
    }

    /// Divides nonnegative weights by their sum.
    pub fn normalize(weights: &[f64]) -> Result<Self> {
        if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid("weights must be finite and nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::Degenerate("weights sum to zero".into()));
        }
        Ok(Self(weights.iter().map(|w| w / total).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Index<usize> for ProbabilityVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Diagonal Gaussian parameterized by mean and per-dimension standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagonalGaussian {
    mean: Vec<f64>,
    stddev: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn new(mean: Vec<f64>, stddev: Vec<f64>) -> Result<Self> {
        ensure_same_len(mean.len(), stddev.len(), "gaussian mean/stddev")?;
        ensure_finite(&mean, "gaussian mean")?;
        if stddev.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid("gaussian stddev must be finite and > 0"));
        }
        Ok(Self { mean, stddev })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            stddev: vec![1.0; dim],
        }
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn stddev(&self) -> &[f64] {
        &self.stddev
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Temperature-scaled softmax with max-subtraction.
pub fn softmax(logits: &[f64], temperature: f64) -> Result<ProbabilityVector> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if logits.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    ensure_finite(logits, "logits")?;
    Ok(ProbabilityVector(softmax_unchecked(logits, temperature)))
}

pub(crate) fn softmax_unchecked(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .map(|&l| ((l - max) / temperature).exp())
        .collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    out
}

/// Vector-Jacobian product of [`softmax`]: given `p = softmax(l / tau)` and
/// `dL/dp`, returns `dL/dl`.
pub fn softmax_backward(p: &[f64], upstream: &[f64], temperature: f64) -> Vec<f64> {
    let inner = dot(p, upstream);
    p.iter()
        .zip(upstream)
        .map(|(&pi, &gi)| pi * (gi - inner) / temperature)
        .collect()
}

/// Cosine similarity clamped to `[-1, 1]`.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    ensure_same_len(u.len(), v.len(), "cosine similarity")?;
    ensure_finite(u, "cosine lhs")?;
    ensure_finite(v, "cosine rhs")?;
    let (nu, nv) = (l2_norm(u), l2_norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Degenerate("cosine similarity of a zero vector".into()));
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Gradients of the (unclamped) cosine similarity with respect to both inputs.
pub fn cosine_similarity_grad(u: &[f64], v: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let c = cosine_similarity(u, v)?;
    let (nu, nv) = (l2_norm(u), l2_norm(v));
    let du = u
        .iter()
        .zip(v)
        .map(|(&a, &b)| b / (nu * nv) - c * a / (nu * nu))
        .collect();
    let dv = u
        .iter()
        .zip(v)
        .map(|(&a, &b)| a / (nu * nv) - c * b / (nv * nv))
        .collect();
    Ok((du, dv))
}

/// `sum_i p_i ln(p_i / q_i)`, with `0 ln 0 = 0` and `q` floored at [`LOG_FLOOR`].
pub fn kl_discrete(p: &ProbabilityVector, q: &ProbabilityVector) -> Result<f64> {
    ensure_same_len(p.len(), q.len(), "discrete KL")?;
    Ok(kl_discrete_raw(p.as_slice(), q.as_slice()))
}

pub(crate) fn kl_discrete_raw(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.max(LOG_FLOOR).ln()))
        .sum::<f64>()
        .max(0.0)
}

/// Gradient of [`kl_discrete`] with respect to `p` (treating `p` as free
/// coordinates, each strictly positive).
pub fn kl_discrete_grad_p(p: &[f64], q: &[f64]) -> Vec<f64> {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| pi.ln() + 1.0 - qi.max(LOG_FLOOR).ln())
        .collect()
}

/// Closed-form KL divergence between diagonal Gaussians, summed over dimensions.
pub fn kl_diag_gaussian(p: &DiagonalGaussian, q: &DiagonalGaussian) -> Result<f64> {
    ensure_same_len(p.dim(), q.dim(), "gaussian KL")?;
    let mut total = 0.0;
    for k in 0..p.dim() {
        let (mp, sp) = (p.mean[k], p.stddev[k]);
        let (mq, sq) = (q.mean[k], q.stddev[k]);
        total += (sq / sp).ln() + (sp * sp + (mp - mq) * (mp - mq)) / (2.0 * sq * sq) - 0.5;
    }
    Ok(total.max(0.0))
}

/// Partial derivatives of [`kl_diag_gaussian`] with respect to each parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianKlGrad {
    pub p_mean: Vec<f64>,
    pub p_stddev: Vec<f64>,
    pub q_mean: Vec<f64>,
    pub q_stddev: Vec<f64>,
}

pub fn kl_diag_gaussian_grad(p: &DiagonalGaussian, q: &DiagonalGaussian) -> Result<GaussianKlGrad> {
    ensure_same_len(p.dim(), q.dim(), "gaussian KL")?;
    let z = p.dim();
    let mut g = GaussianKlGrad {
        p_mean: Vec::with_capacity(z),
        p_stddev: Vec::with_capacity(z),
        q_mean: Vec::with_capacity(z),
        q_stddev: Vec::with_capacity(z),
    };
    for k in 0..z {
        let (mp, sp) = (p.mean[k], p.stddev[k]);
        let (mq, sq) = (q.mean[k], q.stddev[k]);
        let diff = mp - mq;
        g.p_mean.push(diff / (sq * sq));
        g.q_mean.push(-diff / (sq * sq));
        g.p_stddev.push(-1.0 / sp + sp / (sq * sq));
        g.q_stddev.push(1.0 / sq - (sp * sp + diff * diff) / (sq * sq * sq));
    }
    Ok(g)
}

pub fn outer_product(u: &[f64], v: &[f64]) -> Result<Matrix> {
    ensure_finite(u, "outer product lhs")?;
    ensure_finite(v, "outer product rhs")?;
    let mut data = Vec::with_capacity(u.len() * v.len());
    for &a in u {
        data.extend(v.iter().map(|&b| a * b));
    }
    Matrix::from_vec(u.len(), v.len(), data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` with `fan_in` = rows.
    UniformScaled,
    Zeros,
    Ones,
}

impl std::str::FromStr for InitScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform-scaled" => Ok(InitScheme::UniformScaled),
            "zeros" => Ok(InitScheme::Zeros),
            "ones" => Ok(InitScheme::Ones),
            other => Err(Error::invalid(format!("unknown init scheme `{other}`"))),
        }
    }
}

/// Deterministic initialization of a `rows x cols` tensor. `rows` is the fan-in.
pub fn seeded_init(rows: usize, cols: usize, scheme: InitScheme, seed: u64) -> Matrix {
    match scheme {
        InitScheme::Zeros => Matrix::zeros(rows, cols),
        InitScheme::Ones => Matrix::filled(rows, cols, 1.0),
        InitScheme::UniformScaled => {
            let bound = 1.0 / (rows.max(1) as f64).sqrt();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = (0..rows * cols)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            Matrix {
                rows,
                cols,
                data,
            }
        }
    }
}
