//! Dense double-precision kernel shared by the encoder, experts and head.
//!
//! Every differentiable operation comes as a forward/backward pair with
//! hand-derived gradients. Trainable tensors are exposed to optimizers,
//! checkpoints and [`grad_check`] through the [`Parameters`] trait.

use std::ops::{Deref, DerefMut};

use rand::Rng;

use crate::error::{Error, Result};

/// Dense vector of `f64`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(data: Vec<f64>) -> Self {
        Vector(data)
    }

    pub fn zeros(dim: usize) -> Self {
        Vector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn fill(&mut self, value: f64) {
        self.0.iter_mut().for_each(|x| *x = value);
    }

    /// `self += scale * other`
    pub fn axpy(&mut self, scale: f64, other: &[f64]) {
        debug_assert_eq!(self.0.len(), other.len());
        for (a, b) in self.0.iter_mut().zip(other) {
            *a += scale * b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

impl Deref for Vector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for Vector {
    fn from(data: Vec<f64>) -> Self {
        Vector(data)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-major dense matrix.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::shape(format!(
                "ragged rows: expected {cols} columns, found {}",
                bad.len()
            )));
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, and a 0-column matrix has no meaningful rows anyway
        let cols = self.cols.max(1);
        self.data.chunks_exact(cols).take(self.rows)
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|x| *x *= factor);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `self · x`
    pub fn matvec(&self, x: &[f64]) -> Result<Vector> {
        if x.len() != self.cols {
            return Err(Error::Dimension {
                what: "matrix-vector product input".into(),
                expected: self.cols,
                found: x.len(),
            });
        }
        Ok(self
            .row_iter()
            .map(|r| dot(r, x))
            .collect::<Vec<_>>()
            .into())
    }

    /// `selfᵀ · y`
    pub fn matvec_t(&self, y: &[f64]) -> Vector {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &yi) in self.row_iter().zip(y) {
            for (o, w) in out.iter_mut().zip(r) {
                *o += yi * w;
            }
        }
        out.into()
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Matrix) -> Matrix {
        debug_assert_eq!(self.cols, other.cols);
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out[(i, j)] = dot(a, other.row(j));
            }
        }
        out
    }

    /// `self · other`
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        debug_assert_eq!(self.cols, other.rows);
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let src = other.row(k);
                for (o, b) in out.row_mut(i).iter_mut().zip(src) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &Matrix) -> Matrix {
        debug_assert_eq!(self.rows, other.rows);
        let mut out = Matrix::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            let a = self.row(r);
            let b = other.row(r);
            for (i, &ai) in a.iter().enumerate() {
                if ai == 0.0 {
                    continue;
                }
                for (o, bj) in out.row_mut(i).iter_mut().zip(b) {
                    *o += ai * bj;
                }
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
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

/// Borrowed view of one trainable tensor and its gradient buffer.
pub struct ParamView<'a> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub value: &'a [f64],
    pub grad: &'a [f64],
}

pub struct ParamViewMut<'a> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub value: &'a mut [f64],
    pub grad: &'a mut [f64],
}

/// Anything that owns trainable tensors.
///
/// Both methods must list the same tensors in the same order; optimizer
/// state and checkpoints rely on it.
pub trait Parameters {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a>>);
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a>>);
}

pub fn join_path(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn param_views<M: Parameters + ?Sized>(model: &M) -> Vec<ParamView<'_>> {
    let mut out = Vec::new();
    model.params("", &mut out);
    out
}

pub fn param_views_mut<M: Parameters + ?Sized>(model: &mut M) -> Vec<ParamViewMut<'_>> {
    let mut out = Vec::new();
    model.params_mut("", &mut out);
    out
}

pub fn zero_grads<M: Parameters + ?Sized>(model: &mut M) {
    for p in param_views_mut(model) {
        p.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

pub fn param_count<M: Parameters + ?Sized>(model: &M) -> usize {
    param_views(model).iter().map(|p| p.value.len()).sum()
}

/// Standalone trainable matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixParam {
    pub value: Matrix,
    pub grad: Matrix,
}

impl MatrixParam {
    pub fn new(value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        MatrixParam { value, grad }
    }
}

impl Parameters for MatrixParam {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a>>) {
        out.push(ParamView {
            name: prefix.to_string(),
            rows: self.value.rows(),
            cols: self.value.cols(),
            value: self.value.as_slice(),
            grad: self.grad.as_slice(),
        });
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a>>) {
        out.push(ParamViewMut {
            name: prefix.to_string(),
            rows: self.value.rows(),
            cols: self.value.cols(),
            value: self.value.as_mut_slice(),
            grad: self.grad.as_mut_slice(),
        });
    }
}

/// Standalone trainable vector.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorParam {
    pub value: Vector,
    pub grad: Vector,
}

impl VectorParam {
    pub fn new(value: Vector) -> Self {
        let grad = Vector::zeros(value.dim());
        VectorParam { value, grad }
    }
}

impl Parameters for VectorParam {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a>>) {
        out.push(ParamView {
            name: prefix.to_string(),
            rows: 1,
            cols: self.value.dim(),
            value: &self.value,
            grad: &self.grad,
        });
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a>>) {
        out.push(ParamViewMut {
            name: prefix.to_string(),
            rows: 1,
            cols: self.value.dim(),
            value: &mut self.value,
            grad: &mut self.grad,
        });
    }
}

/// Affine map `weight · x + bias` with gradient accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams {
    pub weight: Matrix,
    pub bias: Vector,
    pub grad_weight: Matrix,
    pub grad_bias: Vector,
}

impl LinearParams {
    pub fn new(weight: Matrix, bias: Vector) -> Result<Self> {
        if bias.dim() != weight.rows() {
            return Err(Error::Dimension {
                what: "linear bias".into(),
                expected: weight.rows(),
                found: bias.dim(),
            });
        }
        let grad_weight = Matrix::zeros(weight.rows(), weight.cols());
        let grad_bias = Vector::zeros(bias.dim());
        Ok(LinearParams {
            weight,
            bias,
            grad_weight,
            grad_bias,
        })
    }

    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        LinearParams {
            weight: Matrix::zeros(out_dim, in_dim),
            bias: Vector::zeros(out_dim),
            grad_weight: Matrix::zeros(out_dim, in_dim),
            grad_bias: Vector::zeros(out_dim),
        }
    }

    /// Weights drawn from uniform(±1/√in_dim), biases zero.
    pub fn init(out_dim: usize, in_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        let mut p = LinearParams::zeros(out_dim, in_dim);
        p.weight = Matrix::uniform(out_dim, in_dim, bound, rng);
        p
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vector> {
        let mut y = self.weight.matvec(x)?;
        y.axpy(1.0, &self.bias);
        Ok(y)
    }

    /// Accumulates parameter gradients for input `x` and returns `∂L/∂x`.
    pub fn backward(&mut self, x: &[f64], grad_out: &[f64]) -> Vector {
        debug_assert_eq!(grad_out.len(), self.out_dim());
        for (i, &g) in grad_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            self.grad_bias[i] += g;
            for (gw, xi) in self.grad_weight.row_mut(i).iter_mut().zip(x) {
                *gw += g * xi;
            }
        }
        self.weight.matvec_t(grad_out)
    }

    /// Row-wise application: `Y = X Wᵀ + 1 bᵀ`.
    pub fn forward_rows(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.in_dim() {
            return Err(Error::Dimension {
                what: "linear input width".into(),
                expected: self.in_dim(),
                found: x.cols(),
            });
        }
        let mut y = x.matmul_t(&self.weight);
        for i in 0..y.rows() {
            for (v, b) in y.row_mut(i).iter_mut().zip(self.bias.iter()) {
                *v += b;
            }
        }
        Ok(y)
    }

    pub fn backward_rows(&mut self, x: &Matrix, grad_out: &Matrix) -> Matrix {
        self.grad_weight.add_assign(&grad_out.t_matmul(x));
        for r in grad_out.row_iter() {
            self.grad_bias.axpy(1.0, r);
        }
        grad_out.matmul(&self.weight)
    }

    pub fn zero_grads(&mut self) {
        self.grad_weight.fill(0.0);
        self.grad_bias.fill(0.0);
    }
}

impl Parameters for LinearParams {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a>>) {
        out.push(ParamView {
            name: join_path(prefix, "weight"),
            rows: self.weight.rows(),
            cols: self.weight.cols(),
            value: self.weight.as_slice(),
            grad: self.grad_weight.as_slice(),
        });
        out.push(ParamView {
            name: join_path(prefix, "bias"),
            rows: 1,
            cols: self.bias.dim(),
            value: &self.bias,
            grad: &self.grad_bias,
        });
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a>>) {
        out.push(ParamViewMut {
            name: join_path(prefix, "weight"),
            rows: self.weight.rows(),
            cols: self.weight.cols(),
            value: self.weight.as_mut_slice(),
            grad: self.grad_weight.as_mut_slice(),
        });
        out.push(ParamViewMut {
            name: join_path(prefix, "bias"),
            rows: 1,
            cols: self.bias.dim(),
            value: &mut self.bias,
            grad: &mut self.grad_bias,
        });
    }
}

pub fn affine(p: &LinearParams, x: &[f64]) -> Result<Vector> {
    p.forward(x)
}

/// Numerically stable softmax.
pub fn softmax(z: &[f64]) -> Result<Vector> {
    if z.is_empty() {
        return Err(Error::shape("softmax of an empty vector"));
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    Ok(out.into())
}

/// Given `s = softmax(z)` and `∂L/∂s`, returns `∂L/∂z`.
pub fn softmax_backward(s: &[f64], grad_s: &[f64]) -> Vector {
    let inner = dot(s, grad_s);
    s.iter()
        .zip(grad_s)
        .map(|(si, gi)| si * (gi - inner))
        .collect::<Vec<_>>()
        .into()
}

/// `log Σ exp(z)` computed without overflow.
pub fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate().skip(1) {
        if v > x[best] {
            best = i;
        }
    }
    best
}

/// Valid 1-D convolution over the rows of `h` (T×d) with a k×d kernel.
pub fn conv1d_valid(h: &Matrix, kernel: &Matrix, bias: f64) -> Result<Vector> {
    let (t, k) = (h.rows(), kernel.rows());
    if kernel.cols() != h.cols() {
        return Err(Error::Dimension {
            what: "convolution kernel width".into(),
            expected: h.cols(),
            found: kernel.cols(),
        });
    }
    if k == 0 || t < k {
        return Err(Error::shape(format!(
            "sequence of length {t} is shorter than kernel size {k}"
        )));
    }
    let out = (0..=t - k)
        .map(|start| {
            bias + (0..k)
                .map(|j| dot(kernel.row(j), h.row(start + j)))
                .sum::<f64>()
        })
        .collect::<Vec<_>>();
    Ok(out.into())
}

/// Backward of [`conv1d_valid`]. Accumulates into `grad_h` and `grad_kernel`
/// and returns the bias gradient.
pub fn conv1d_valid_backward(
    h: &Matrix,
    kernel: &Matrix,
    grad_out: &[f64],
    grad_h: &mut Matrix,
    grad_kernel: &mut Matrix,
) -> f64 {
    let k = kernel.rows();
    for (start, &g) in grad_out.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        for j in 0..k {
            for (gk, hv) in grad_kernel.row_mut(j).iter_mut().zip(h.row(start + j)) {
                *gk += g * hv;
            }
            for (gh, kv) in grad_h.row_mut(start + j).iter_mut().zip(kernel.row(j)) {
                *gh += g * kv;
            }
        }
    }
    grad_out.iter().sum()
}

/// Outcome of a finite-difference gradient comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Parameter name and flat index with the largest relative error.
    pub worst: Option<(String, usize)>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Writes one scalar parameter and returns its previous value.
fn set_param<M: Parameters>(model: &mut M, tensor: usize, index: usize, value: f64) -> f64 {
    let mut views = param_views_mut(model);
    let slot = &mut views[tensor].value[index];
    std::mem::replace(slot, value)
}

/// Compares analytic gradients against central differences
/// `(f(θ+h) − f(θ−h)) / 2h` for every scalar parameter of `model`.
///
/// `analytic` must evaluate the loss and accumulate gradients into the
/// model's buffers (grads are zeroed beforehand). `loss` evaluates the
/// loss only.
pub fn grad_check<M, F, G>(
    model: &mut M,
    loss: F,
    analytic: G,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    M: Parameters,
    F: Fn(&M) -> Result<f64>,
    G: Fn(&mut M) -> Result<f64>,
{
    if step <= 0.0 {
        return Err(Error::config("finite-difference step must be positive"));
    }
    zero_grads(model);
    analytic(model)?;
    let (names, grads): (Vec<String>, Vec<Vec<f64>>) = param_views(model)
        .into_iter()
        .map(|p| (p.name, p.grad.to_vec()))
        .unzip();

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        tolerance: tol,
    };
    for (t, tensor_grads) in grads.iter().enumerate() {
        for (i, &a) in tensor_grads.iter().enumerate() {
            let orig = set_param(model, t, i, 0.0);
            set_param(model, t, i, orig + step);
            let plus = loss(model);
            set_param(model, t, i, orig - step);
            let minus = loss(model);
            set_param(model, t, i, orig);
            let (plus, minus) = (plus?, minus?);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Probe {
                    name: names[t].clone(),
                    index: i,
                });
            }
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((names[t].clone(), i));
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}
