//! The six pooling experts mapping `(H, C, D)` to expert vectors in `R^d`.
//!
//! Order is fixed: mean, max, self-attention, multi-kernel CNN, lexical
//! cue, contrast. Each forward returns a cache consumed by the matching
//! backward, which accumulates parameter gradients and `∂L/∂H`.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{
    conv1d_valid, conv1d_valid_backward, dot, join_path, relu, softmax, softmax_backward,
    LinearParams, Matrix, MatrixParam, ParamView, ParamViewMut, Parameters, Vector, VectorParam,
};

pub const NUM_EXPERTS: usize = 6;
pub const CNN_KERNEL_SIZES: [usize; 4] = [2, 3, 4, 5];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertKind {
    Mean,
    Max,
    SelfAttention,
    Cnn,
    Cue,
    Contrast,
}

impl ExpertKind {
    pub const ALL: [ExpertKind; NUM_EXPERTS] = [
        ExpertKind::Mean,
        ExpertKind::Max,
        ExpertKind::SelfAttention,
        ExpertKind::Cnn,
        ExpertKind::Cue,
        ExpertKind::Contrast,
    ];

    /// Zero-based slot in the fixed expert order.
    pub fn slot(self) -> usize {
        self as usize
    }

    pub fn key(self) -> &'static str {
        match self {
            ExpertKind::Mean => "mean",
            ExpertKind::Max => "max",
            ExpertKind::SelfAttention => "self_attention",
            ExpertKind::Cnn => "cnn",
            ExpertKind::Cue => "cue",
            ExpertKind::Contrast => "contrast",
        }
    }

    /// Name used in ablation tables.
    pub fn display_name(self) -> &'static str {
        match self {
            ExpertKind::Mean => "Mean",
            ExpertKind::Max => "Max",
            ExpertKind::SelfAttention => "Self-Attention",
            ExpertKind::Cnn => "CNN",
            ExpertKind::Cue => "Lexical-cue",
            ExpertKind::Contrast => "Contrastive",
        }
    }
}

impl fmt::Display for ExpertKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

/// Which experts participate; serialized as a list of expert keys.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ExpertMask([bool; NUM_EXPERTS]);

impl Default for ExpertMask {
    fn default() -> Self {
        ExpertMask::all()
    }
}

impl ExpertMask {
    pub fn all() -> Self {
        ExpertMask([true; NUM_EXPERTS])
    }

    pub fn none() -> Self {
        ExpertMask([false; NUM_EXPERTS])
    }

    pub fn from_flags(flags: [bool; NUM_EXPERTS]) -> Self {
        ExpertMask(flags)
    }

    pub fn only(kind: ExpertKind) -> Self {
        ExpertMask::none().with(kind, true)
    }

    pub fn without(kind: ExpertKind) -> Self {
        ExpertMask::all().with(kind, false)
    }

    pub fn with(mut self, kind: ExpertKind, on: bool) -> Self {
        self.0[kind.slot()] = on;
        self
    }

    pub fn contains(&self, kind: ExpertKind) -> bool {
        self.0[kind.slot()]
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn is_full(&self) -> bool {
        self.count() == NUM_EXPERTS
    }

    pub fn active(&self) -> impl Iterator<Item = ExpertKind> + '_ {
        ExpertKind::ALL.into_iter().filter(|k| self.contains(*k))
    }

    pub fn flags(&self) -> [bool; NUM_EXPERTS] {
        self.0
    }
}

impl Serialize for ExpertMask {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(self.active())
    }
}

impl<'de> Deserialize<'de> for ExpertMask {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let kinds = Vec::<ExpertKind>::deserialize(d)?;
        Ok(kinds
            .into_iter()
            .fold(ExpertMask::none(), |m, k| m.with(k, true)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelfAttentionExpert {
    /// Trainable scoring vector `v`.
    pub attention: VectorParam,
    pub proj: LinearParams,
}

/// `n_f` kernels of one width with their biases.
#[derive(Clone, Debug, PartialEq)]
pub struct CnnBranch {
    pub size: usize,
    pub kernels: Vec<MatrixParam>,
    pub bias: VectorParam,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CnnExpert {
    pub branches: Vec<CnnBranch>,
    /// Maps the `4·n_f` pooled features to `d`.
    pub inner: LinearParams,
    pub proj: LinearParams,
}

impl CnnExpert {
    pub fn filters(&self) -> usize {
        self.branches.first().map_or(0, |b| b.kernels.len())
    }
}

/// Parameters for the active experts. Inactive experts hold no weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertBank {
    pub dim: usize,
    /// Amplification applied to contrast-token rows.
    pub contrast_factor: f64,
    pub epsilon: f64,
    pub mean: Option<LinearParams>,
    pub max: Option<LinearParams>,
    pub self_attention: Option<SelfAttentionExpert>,
    pub cnn: Option<CnnExpert>,
    pub cue: Option<LinearParams>,
    pub contrast: Option<LinearParams>,
}

#[derive(Clone, Debug)]
pub struct ExpertOutputs {
    outputs: Vec<(ExpertKind, Vector)>,
}

impl ExpertOutputs {
    pub fn new(outputs: Vec<(ExpertKind, Vector)>) -> Self {
        ExpertOutputs { outputs }
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    pub fn get(&self, kind: ExpertKind) -> Option<&Vector> {
        self.outputs
            .iter()
            .find(|(k, _)| *k == kind)
            .map(|(_, v)| v)
    }

    pub fn kinds(&self) -> impl Iterator<Item = ExpertKind> + '_ {
        self.outputs.iter().map(|(k, _)| *k)
    }

    pub fn vectors(&self) -> impl Iterator<Item = &Vector> {
        self.outputs.iter().map(|(_, v)| v)
    }

    pub fn iter(&self) -> impl Iterator<Item = &(ExpertKind, Vector)> {
        self.outputs.iter()
    }
}

/// Per-expert intermediate values for the backward pass.
#[derive(Clone, Debug)]
pub enum ExpertCache {
    Mean {
        pooled: Vector,
    },
    Max {
        pooled: Vector,
        argmax: Vec<usize>,
    },
    SelfAttention {
        pooled: Vector,
        alpha: Vector,
        scores: Vector,
    },
    Cnn {
        /// Pre-activation convolution outputs per branch and filter;
        /// `None` for branches wider than the sequence.
        conv: Vec<Option<Vec<Vector>>>,
        features: Vector,
        inner: Vector,
    },
    Cue {
        pooled: Vector,
    },
    Contrast {
        pooled: Option<Vector>,
    },
}

fn check_rows(h: &Matrix, dim: usize) -> Result<()> {
    if h.rows() == 0 {
        return Err(Error::shape("expert input has no rows"));
    }
    if h.cols() != dim {
        return Err(Error::Dimension {
            what: "expert input width".into(),
            expected: dim,
            found: h.cols(),
        });
    }
    Ok(())
}

fn check_positions(positions: &[usize], t: usize, what: &str) -> Result<()> {
    match positions.iter().find(|&&p| p >= t) {
        Some(p) => Err(Error::shape(format!(
            "{what} position {p} is outside a sequence of length {t}"
        ))),
        None => Ok(()),
    }
}

fn missing(kind: ExpertKind) -> Error {
    Error::config(format!("expert '{kind}' is not active in this bank"))
}

pub fn mean_rows(h: &Matrix) -> Vector {
    let mut acc = Vector::zeros(h.cols());
    for r in h.row_iter() {
        acc.axpy(1.0, r);
    }
    let t = h.rows() as f64;
    acc.iter_mut().for_each(|v| *v /= t);
    acc
}

impl ExpertBank {
    pub fn new(
        dim: usize,
        filters: usize,
        contrast_factor: f64,
        epsilon: f64,
        mask: ExpertMask,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if mask.count() == 0 {
            return Err(Error::config("at least one expert must be active"));
        }
        if contrast_factor <= 0.0 || epsilon <= 0.0 {
            return Err(Error::config(
                "contrast factor and epsilon must be positive",
            ));
        }
        if mask.contains(ExpertKind::Cnn) && filters == 0 {
            return Err(Error::config(
                "CNN expert needs at least one filter per kernel size",
            ));
        }
        let linear = |on: bool, rng: &mut _| on.then(|| LinearParams::init(dim, dim, rng));
        let mean = linear(mask.contains(ExpertKind::Mean), rng);
        let max = linear(mask.contains(ExpertKind::Max), rng);
        let self_attention = mask.contains(ExpertKind::SelfAttention).then(|| {
            let bound = 1.0 / (dim as f64).sqrt();
            let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-bound..=bound)).collect();
            SelfAttentionExpert {
                attention: VectorParam::new(v.into()),
                proj: LinearParams::init(dim, dim, rng),
            }
        });
        let cnn = mask.contains(ExpertKind::Cnn).then(|| {
            let branches = CNN_KERNEL_SIZES
                .iter()
                .map(|&k| {
                    let bound = 1.0 / ((k * dim) as f64).sqrt();
                    CnnBranch {
                        size: k,
                        kernels: (0..filters)
                            .map(|_| MatrixParam::new(Matrix::uniform(k, dim, bound, rng)))
                            .collect(),
                        bias: VectorParam::new(Vector::zeros(filters)),
                    }
                })
                .collect();
            CnnExpert {
                branches,
                inner: LinearParams::init(dim, CNN_KERNEL_SIZES.len() * filters, rng),
                proj: LinearParams::init(dim, dim, rng),
            }
        });
        let cue = linear(mask.contains(ExpertKind::Cue), rng);
        let contrast = linear(mask.contains(ExpertKind::Contrast), rng);
        Ok(ExpertBank {
            dim,
            contrast_factor,
            epsilon,
            mean,
            max,
            self_attention,
            cnn,
            cue,
            contrast,
        })
    }

    pub fn mask(&self) -> ExpertMask {
        ExpertMask::from_flags([
            self.mean.is_some(),
            self.max.is_some(),
            self.self_attention.is_some(),
            self.cnn.is_some(),
            self.cue.is_some(),
            self.contrast.is_some(),
        ])
    }

    pub fn forward_mean(&self, h: &Matrix) -> Result<(Vector, ExpertCache)> {
        let w = self
            .mean
            .as_ref()
            .ok_or_else(|| missing(ExpertKind::Mean))?;
        check_rows(h, self.dim)?;
        let pooled = mean_rows(h);
        Ok((w.forward(&pooled)?, ExpertCache::Mean { pooled }))
    }

    pub fn forward_max(&self, h: &Matrix) -> Result<(Vector, ExpertCache)> {
        let w = self.max.as_ref().ok_or_else(|| missing(ExpertKind::Max))?;
        check_rows(h, self.dim)?;
        let mut argmax = vec![0usize; h.cols()];
        let mut pooled = h.row(0).to_vec();
        for i in 1..h.rows() {
            for (j, &v) in h.row(i).iter().enumerate() {
                // strict comparison keeps ties on the lowest row
                if v > pooled[j] {
                    pooled[j] = v;
                    argmax[j] = i;
                }
            }
        }
        let pooled: Vector = pooled.into();
        Ok((w.forward(&pooled)?, ExpertCache::Max { pooled, argmax }))
    }

    pub fn forward_self_attention(&self, h: &Matrix) -> Result<(Vector, ExpertCache)> {
        let sa = self
            .self_attention
            .as_ref()
            .ok_or_else(|| missing(ExpertKind::SelfAttention))?;
        check_rows(h, self.dim)?;
        let scores: Vector = h
            .row_iter()
            .map(|r| dot(r, &sa.attention.value).tanh())
            .collect::<Vec<_>>()
            .into();
        let alpha = softmax(&scores)?;
        let mut pooled = Vector::zeros(self.dim);
        for (r, &a) in h.row_iter().zip(alpha.iter()) {
            pooled.axpy(a, r);
        }
        Ok((
            sa.proj.forward(&pooled)?,
            ExpertCache::SelfAttention {
                pooled,
                alpha,
                scores,
            },
        ))
    }

    pub fn forward_cnn(&self, h: &Matrix) -> Result<(Vector, ExpertCache)> {
        let cnn = self.cnn.as_ref().ok_or_else(|| missing(ExpertKind::Cnn))?;
        check_rows(h, self.dim)?;
        let nf = cnn.filters();
        let mut features = Vector::zeros(cnn.branches.len() * nf);
        let mut conv = Vec::with_capacity(cnn.branches.len());
        for (b, branch) in cnn.branches.iter().enumerate() {
            if h.rows() < branch.size {
                conv.push(None);
                continue;
            }
            let mut outs = Vec::with_capacity(nf);
            for (f, kernel) in branch.kernels.iter().enumerate() {
                let c = conv1d_valid(h, &kernel.value, branch.bias.value[f])?;
                features[b * nf + f] = c.iter().map(|&v| relu(v)).sum::<f64>() / c.dim() as f64;
                outs.push(c);
            }
            conv.push(Some(outs));
        }
        let inner = cnn.inner.forward(&features)?;
        Ok((
            cnn.proj.forward(&inner)?,
            ExpertCache::Cnn {
                conv,
                features,
                inner,
            },
        ))
    }

    pub fn forward_cue(&self, h: &Matrix, cue: &[usize]) -> Result<(Vector, ExpertCache)> {
        let w = self.cue.as_ref().ok_or_else(|| missing(ExpertKind::Cue))?;
        check_rows(h, self.dim)?;
        check_positions(cue, h.rows(), "cue")?;
        let mut pooled = Vector::zeros(self.dim);
        for &i in cue {
            pooled.axpy(1.0, h.row(i));
        }
        let denom = cue.len() as f64 + self.epsilon;
        pooled.iter_mut().for_each(|v| *v /= denom);
        Ok((w.forward(&pooled)?, ExpertCache::Cue { pooled }))
    }

    pub fn forward_contrast(
        &self,
        h: &Matrix,
        contrast: &[usize],
    ) -> Result<(Vector, ExpertCache)> {
        let w = self
            .contrast
            .as_ref()
            .ok_or_else(|| missing(ExpertKind::Contrast))?;
        check_rows(h, self.dim)?;
        check_positions(contrast, h.rows(), "contrast")?;
        if contrast.is_empty() {
            log::debug!("no contrast markers; contrast expert emits zeros");
            return Ok((
                Vector::zeros(w.out_dim()),
                ExpertCache::Contrast { pooled: None },
            ));
        }
        let mut pooled = Vector::zeros(self.dim);
        for (i, r) in h.row_iter().enumerate() {
            let scale = if contrast.contains(&i) {
                self.contrast_factor
            } else {
                1.0
            };
            pooled.axpy(scale, r);
        }
        let denom = contrast.len() as f64 + self.epsilon;
        pooled.iter_mut().for_each(|v| *v /= denom);
        Ok((
            w.forward(&pooled)?,
            ExpertCache::Contrast {
                pooled: Some(pooled),
            },
        ))
    }

    pub fn forward_expert(
        &self,
        kind: ExpertKind,
        h: &Matrix,
        cue: &[usize],
        contrast: &[usize],
    ) -> Result<(Vector, ExpertCache)> {
        match kind {
            ExpertKind::Mean => self.forward_mean(h),
            ExpertKind::Max => self.forward_max(h),
            ExpertKind::SelfAttention => self.forward_self_attention(h),
            ExpertKind::Cnn => self.forward_cnn(h),
            ExpertKind::Cue => self.forward_cue(h, cue),
            ExpertKind::Contrast => self.forward_contrast(h, contrast),
        }
    }

    /// Runs every expert in `active`, in the fixed order.
    pub fn forward(
        &self,
        h: &Matrix,
        cue: &[usize],
        contrast: &[usize],
        active: ExpertMask,
    ) -> Result<(ExpertOutputs, Vec<ExpertCache>)> {
        if active.count() == 0 {
            return Err(Error::config("at least one expert must be active"));
        }
        let mut outputs = Vec::with_capacity(active.count());
        let mut caches = Vec::with_capacity(active.count());
        for kind in active.active() {
            let (e, c) = self.forward_expert(kind, h, cue, contrast)?;
            outputs.push((kind, e));
            caches.push(c);
        }
        Ok((ExpertOutputs::new(outputs), caches))
    }

    /// Backward for one expert: accumulates parameter grads and adds the
    /// contribution to `grad_h`.
    pub fn backward_expert(
        &mut self,
        h: &Matrix,
        cue: &[usize],
        contrast: &[usize],
        cache: &ExpertCache,
        grad_out: &[f64],
        grad_h: &mut Matrix,
    ) -> Result<()> {
        let t = h.rows();
        match cache {
            ExpertCache::Mean { pooled } => {
                let w = self
                    .mean
                    .as_mut()
                    .ok_or_else(|| missing(ExpertKind::Mean))?;
                let gp = w.backward(pooled, grad_out);
                for i in 0..t {
                    for (g, p) in grad_h.row_mut(i).iter_mut().zip(gp.iter()) {
                        *g += p / t as f64;
                    }
                }
            }
            ExpertCache::Max { pooled, argmax } => {
                let w = self.max.as_mut().ok_or_else(|| missing(ExpertKind::Max))?;
                let gp = w.backward(pooled, grad_out);
                for (j, &row) in argmax.iter().enumerate() {
                    grad_h[(row, j)] += gp[j];
                }
            }
            ExpertCache::SelfAttention {
                pooled,
                alpha,
                scores,
            } => {
                let sa = self
                    .self_attention
                    .as_mut()
                    .ok_or_else(|| missing(ExpertKind::SelfAttention))?;
                let gp = sa.proj.backward(pooled, grad_out);
                // pooled = Σ α_i h_i
                let grad_alpha: Vec<f64> = h.row_iter().map(|r| dot(r, &gp)).collect();
                let grad_tanh = softmax_backward(alpha, &grad_alpha);
                for i in 0..t {
                    // d tanh(u)/du = 1 − tanh²(u), u = h_i · v
                    let gu = grad_tanh[i] * (1.0 - scores[i] * scores[i]);
                    for (j, g) in grad_h.row_mut(i).iter_mut().enumerate() {
                        *g += alpha[i] * gp[j] + gu * sa.attention.value[j];
                    }
                    sa.attention.grad.axpy(gu, h.row(i));
                }
            }
            ExpertCache::Cnn {
                conv,
                features,
                inner,
            } => {
                let cnn = self.cnn.as_mut().ok_or_else(|| missing(ExpertKind::Cnn))?;
                let g_inner = cnn.proj.backward(inner, grad_out);
                let g_feat = cnn.inner.backward(features, &g_inner);
                let nf = cnn.filters();
                for (b, (branch, outs)) in cnn.branches.iter_mut().zip(conv).enumerate() {
                    let Some(outs) = outs else { continue };
                    for (f, c) in outs.iter().enumerate() {
                        let scale = g_feat[b * nf + f] / c.dim() as f64;
                        let gc: Vec<f64> = c
                            .iter()
                            .map(|&v| if v > 0.0 { scale } else { 0.0 })
                            .collect();
                        let kernel = &mut branch.kernels[f];
                        branch.bias.grad[f] +=
                            conv1d_valid_backward(h, &kernel.value, &gc, grad_h, &mut kernel.grad);
                    }
                }
            }
            ExpertCache::Cue { pooled } => {
                let w = self.cue.as_mut().ok_or_else(|| missing(ExpertKind::Cue))?;
                let gp = w.backward(pooled, grad_out);
                let denom = cue.len() as f64 + self.epsilon;
                for &i in cue {
                    for (g, p) in grad_h.row_mut(i).iter_mut().zip(gp.iter()) {
                        *g += p / denom;
                    }
                }
            }
            ExpertCache::Contrast { pooled } => {
                let Some(pooled) = pooled else { return Ok(()) };
                let factor = self.contrast_factor;
                let w = self
                    .contrast
                    .as_mut()
                    .ok_or_else(|| missing(ExpertKind::Contrast))?;
                let gp = w.backward(pooled, grad_out);
                let denom = contrast.len() as f64 + self.epsilon;
                for i in 0..t {
                    let scale = if contrast.contains(&i) { factor } else { 1.0 } / denom;
                    for (g, p) in grad_h.row_mut(i).iter_mut().zip(gp.iter()) {
                        *g += p * scale;
                    }
                }
            }
        }
        Ok(())
    }

    /// Backward over every expert run by [`ExpertBank::forward`]; returns `∂L/∂H`.
    pub fn backward(
        &mut self,
        h: &Matrix,
        cue: &[usize],
        contrast: &[usize],
        caches: &[ExpertCache],
        grads: &[Vector],
    ) -> Result<Matrix> {
        if caches.len() != grads.len() {
            return Err(Error::shape("one gradient per expert output is required"));
        }
        let mut grad_h = Matrix::zeros(h.rows(), h.cols());
        for (cache, g) in caches.iter().zip(grads) {
            self.backward_expert(h, cue, contrast, cache, g, &mut grad_h)?;
        }
        Ok(grad_h)
    }
}

impl Parameters for ExpertBank {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a>>) {
        let p = |name: &str| join_path(prefix, name);
        if let Some(w) = &self.mean {
            w.params(&p("mean"), out);
        }
        if let Some(w) = &self.max {
            w.params(&p("max"), out);
        }
        if let Some(sa) = &self.self_attention {
            sa.attention.params(&p("self_attention.vector"), out);
            sa.proj.params(&p("self_attention"), out);
        }
        if let Some(cnn) = &self.cnn {
            for b in &cnn.branches {
                for (f, k) in b.kernels.iter().enumerate() {
                    k.params(&p(&format!("cnn.k{}.kernel{f}", b.size)), out);
                }
                b.bias.params(&p(&format!("cnn.k{}.bias", b.size)), out);
            }
            cnn.inner.params(&p("cnn.inner"), out);
            cnn.proj.params(&p("cnn"), out);
        }
        if let Some(w) = &self.cue {
            w.params(&p("cue"), out);
        }
        if let Some(w) = &self.contrast {
            w.params(&p("contrast"), out);
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a>>) {
        let p = |name: &str| join_path(prefix, name);
        if let Some(w) = &mut self.mean {
            w.params_mut(&p("mean"), out);
        }
        if let Some(w) = &mut self.max {
            w.params_mut(&p("max"), out);
        }
        if let Some(sa) = &mut self.self_attention {
            sa.attention.params_mut(&p("self_attention.vector"), out);
            sa.proj.params_mut(&p("self_attention"), out);
        }
        if let Some(cnn) = &mut self.cnn {
            for b in &mut cnn.branches {
                for (f, k) in b.kernels.iter_mut().enumerate() {
                    k.params_mut(&p(&format!("cnn.k{}.kernel{f}", b.size)), out);
                }
                b.bias.params_mut(&p(&format!("cnn.k{}.bias", b.size)), out);
            }
            cnn.inner.params_mut(&p("cnn.inner"), out);
            cnn.proj.params_mut(&p("cnn"), out);
        }
        if let Some(w) = &mut self.cue {
            w.params_mut(&p("cue"), out);
        }
        if let Some(w) = &mut self.contrast {
            w.params_mut(&p("contrast"), out);
        }
    }
}

pub fn expert_mean(bank: &ExpertBank, h: &Matrix) -> Result<Vector> {
    bank.forward_mean(h).map(|(v, _)| v)
}

pub fn expert_max(bank: &ExpertBank, h: &Matrix) -> Result<Vector> {
    bank.forward_max(h).map(|(v, _)| v)
}

pub fn expert_selfattn(bank: &ExpertBank, h: &Matrix) -> Result<Vector> {
    bank.forward_self_attention(h).map(|(v, _)| v)
}

pub fn expert_cnn(bank: &ExpertBank, h: &Matrix) -> Result<Vector> {
    bank.forward_cnn(h).map(|(v, _)| v)
}

pub fn expert_cue(bank: &ExpertBank, h: &Matrix, cue: &[usize]) -> Result<Vector> {
    bank.forward_cue(h, cue).map(|(v, _)| v)
}

pub fn expert_contrast(bank: &ExpertBank, h: &Matrix, contrast: &[usize]) -> Result<Vector> {
    bank.forward_contrast(h, contrast).map(|(v, _)| v)
}

pub fn run_all_experts(
    bank: &ExpertBank,
    h: &Matrix,
    cue: &[usize],
    contrast: &[usize],
    active: ExpertMask,
) -> Result<ExpertOutputs> {
    bank.forward(h, cue, contrast, active).map(|(o, _)| o)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::grad_check;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rows(r: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&r.iter().map(|x| x.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    /// Bank with identity projections and zero biases.
    fn identity_bank(dim: usize) -> ExpertBank {
        let mut bank = ExpertBank::new(dim, 1, 3.0, 1e-8, ExpertMask::all(), &mut rng(0)).unwrap();
        for w in [
            &mut bank.mean,
            &mut bank.max,
            &mut bank.cue,
            &mut bank.contrast,
        ]
        .into_iter()
        .flatten()
        {
            *w = LinearParams::new(Matrix::identity(dim), Vector::zeros(dim)).unwrap();
        }
        bank.self_attention.as_mut().unwrap().proj =
            LinearParams::new(Matrix::identity(dim), Vector::zeros(dim)).unwrap();
        bank
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn mean_examples() {
        let bank = identity_bank(2);
        assert_eq!(
            expert_mean(&bank, &rows(&[&[1.0, 3.0], &[3.0, 1.0]]))
                .unwrap()
                .as_slice(),
            &[2.0, 2.0]
        );
        assert_eq!(
            expert_mean(&bank, &rows(&[&[4.0, -1.0]]))
                .unwrap()
                .as_slice(),
            &[4.0, -1.0]
        );
    }

    #[test]
    fn mean_matches_direct_formula() {
        let bank = ExpertBank::new(2, 1, 3.0, 1e-8, ExpertMask::all(), &mut rng(11)).unwrap();
        let h = Matrix::uniform(3, 2, 1.0, &mut rng(12));
        let w = bank.mean.as_ref().unwrap();
        let got = expert_mean(&bank, &h).unwrap();
        for i in 0..2 {
            let mut want = w.bias[i];
            for j in 0..2 {
                let m = (h[(0, j)] + h[(1, j)] + h[(2, j)]) / 3.0;
                want += w.weight[(i, j)] * m;
            }
            assert!((got[i] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn max_examples() {
        let bank = identity_bank(2);
        assert_eq!(
            expert_max(&bank, &rows(&[&[1.0, 5.0], &[4.0, 2.0]]))
                .unwrap()
                .as_slice(),
            &[4.0, 5.0]
        );
        assert_eq!(
            expert_max(&bank, &rows(&[&[7.0, 8.0], &[7.0, 8.0]]))
                .unwrap()
                .as_slice(),
            &[7.0, 8.0]
        );
        assert_eq!(
            expert_max(&bank, &rows(&[&[-3.0, -1.0], &[-2.0, -4.0]]))
                .unwrap()
                .as_slice(),
            &[-2.0, -1.0]
        );
    }

    #[test]
    fn max_ties_route_to_lowest_row() {
        let bank = identity_bank(1);
        let h = rows(&[&[2.0], &[2.0], &[1.0]]);
        let (_, cache) = bank.forward_max(&h).unwrap();
        let ExpertCache::Max { argmax, .. } = cache else {
            unreachable!()
        };
        assert_eq!(argmax, vec![0]);
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn self_attention_examples() {
        let mut bank = identity_bank(2);
        bank.self_attention
            .as_mut()
            .unwrap()
            .attention
            .value
            .fill(0.0);
        let h = Matrix::uniform(4, 2, 1.0, &mut rng(3));
        assert!(close(
            &expert_selfattn(&bank, &h).unwrap(),
            &mean_rows(&h),
            1e-15
        ));

        let mut bank = identity_bank(2);
        bank.self_attention.as_mut().unwrap().attention.value = vec![0.3, -0.8].into();
        let same = rows(&[&[0.5, 1.5], &[0.5, 1.5], &[0.5, 1.5]]);
        assert!(close(
            &expert_selfattn(&bank, &same).unwrap(),
            &[0.5, 1.5],
            1e-15
        ));

        // d = 1, v = [1], h = [0], [1]: scores tanh(0) = 0, tanh(1) = 0.761594...
        let mut bank = identity_bank(1);
        bank.self_attention.as_mut().unwrap().attention.value = vec![1.0].into();
        let (out, cache) = bank
            .forward_self_attention(&rows(&[&[0.0], &[1.0]]))
            .unwrap();
        let ExpertCache::SelfAttention { alpha, scores, .. } = cache else {
            unreachable!()
        };
        assert!((scores[1] - 0.7616).abs() < 1e-4);
        assert!(close(&alpha, &[0.3183, 0.6817], 1e-4));
        assert!((out[0] - 0.6817).abs() < 1e-4);
    }

    #[test]
    fn cnn_examples() {
        let mut bank = identity_bank(2);
        {
            let cnn = bank.cnn.as_mut().unwrap();
            for b in &mut cnn.branches {
                b.kernels.iter_mut().for_each(|k| k.value.fill(0.0));
                b.bias.value.fill(0.0);
            }
        }
        let h = Matrix::uniform(6, 2, 1.0, &mut rng(8));
        let out = expert_cnn(&bank, &h).unwrap();
        let cnn = bank.cnn.as_ref().unwrap();
        let want = cnn.proj.forward(&cnn.inner.bias).unwrap();
        assert!(close(&out, &want, 1e-15));

        // constant H with a single all-ones width-2 kernel
        let mut bank = identity_bank(2);
        let cnn = bank.cnn.as_mut().unwrap();
        for b in &mut cnn.branches {
            b.kernels.iter_mut().for_each(|k| k.value.fill(0.0));
        }
        cnn.branches[0].kernels[0].value.fill(1.0);
        let h = Matrix::new(5, 2, vec![0.7; 10]).unwrap();
        let (_, cache) = bank.forward_cnn(&h).unwrap();
        let ExpertCache::Cnn { features, conv, .. } = cache else {
            unreachable!()
        };
        assert!((features[0] - 2.0 * 0.7 * 2.0).abs() < 1e-12);
        let c0 = &conv[0].as_ref().unwrap()[0];
        assert!(c0.iter().all(|&v| (v - c0[0]).abs() < 1e-12));
    }

    #[test]
    fn cnn_short_sequence_zero_blocks() {
        let bank = ExpertBank::new(3, 2, 3.0, 1e-8, ExpertMask::all(), &mut rng(21)).unwrap();
        let h = Matrix::uniform(3, 3, 1.0, &mut rng(22));
        let (_, cache) = bank.forward_cnn(&h).unwrap();
        let ExpertCache::Cnn { conv, features, .. } = cache else {
            unreachable!()
        };
        assert!(conv[0].is_some() && conv[1].is_some());
        assert!(conv[2].is_none() && conv[3].is_none());
        assert!(features[4..].iter().all(|&v| v == 0.0));
        // a single-token input still works
        assert!(expert_cnn(&bank, &Matrix::uniform(1, 3, 1.0, &mut rng(23))).is_ok());
    }

    #[test]
    fn cue_examples() {
        let bank = identity_bank(2);
        let h = rows(&[&[1.0, 0.0], &[9.0, 9.0], &[3.0, 2.0]]);
        assert!(close(
            &expert_cue(&bank, &h, &[0, 2]).unwrap(),
            &[2.0, 1.0],
            1e-7
        ));
        let mut bank = identity_bank(2);
        bank.cue.as_mut().unwrap().bias = vec![0.25, -0.5].into();
        assert_eq!(
            expert_cue(&bank, &h, &[]).unwrap().as_slice(),
            &[0.25, -0.5]
        );
        let bank = identity_bank(2);
        assert!(close(
            &expert_cue(&bank, &h, &[0, 1, 2]).unwrap(),
            &mean_rows(&h),
            1e-7
        ));
        assert!(expert_cue(&bank, &h, &[3]).is_err());
    }

    #[test]
    fn contrast_examples() {
        let bank = identity_bank(2);
        let h = rows(&[&[1.0, 1.0], &[2.0, 2.0], &[3.0, 3.0]]);
        let out = expert_contrast(&bank, &h, &[1]).unwrap();
        assert!(close(&out, &[10.0 / (1.0 + 1e-8); 2], 1e-12));
        assert!(close(&out, &[10.0, 10.0], 1e-6));

        let mut bank = identity_bank(2);
        bank.contrast.as_mut().unwrap().bias = vec![1.0, 1.0].into();
        assert_eq!(
            expert_contrast(&bank, &h, &[]).unwrap().as_slice(),
            &[0.0, 0.0]
        );

        let mut bank = identity_bank(2);
        bank.contrast_factor = 1.0;
        let out = expert_contrast(&bank, &h, &[0, 1, 2]).unwrap();
        assert!(close(&out, &mean_rows(&h), 1e-7));
    }

    #[test]
    fn run_all_respects_mask() {
        let bank = identity_bank(2);
        let h = rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(
            run_all_experts(&bank, &h, &[1], &[1], ExpertMask::all())
                .unwrap()
                .len(),
            6
        );
        let only =
            run_all_experts(&bank, &h, &[], &[], ExpertMask::only(ExpertKind::Mean)).unwrap();
        assert_eq!(only.kinds().collect::<Vec<_>>(), vec![ExpertKind::Mean]);
        let wo = run_all_experts(
            &bank,
            &h,
            &[],
            &[],
            ExpertMask::without(ExpertKind::SelfAttention),
        )
        .unwrap();
        assert_eq!(wo.len(), 5);
        assert!(wo.get(ExpertKind::SelfAttention).is_none());
        assert!(matches!(
            run_all_experts(&bank, &h, &[], &[], ExpertMask::none()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn bank_without_expert_has_no_weights() {
        let bank = ExpertBank::new(
            4,
            2,
            3.0,
            1e-8,
            ExpertMask::without(ExpertKind::Cnn),
            &mut rng(1),
        )
        .unwrap();
        assert!(bank.cnn.is_none());
        assert_eq!(bank.mask(), ExpertMask::without(ExpertKind::Cnn));
        let h = Matrix::zeros(3, 4);
        assert!(expert_cnn(&bank, &h).is_err());
    }

    #[test]
    fn mask_serializes_as_names() {
        let m = ExpertMask::without(ExpertKind::Cue);
        let s = serde_json::to_string(&m).unwrap();
        assert_eq!(s, r#"["mean","max","self_attention","cnn","contrast"]"#);
        assert_eq!(serde_json::from_str::<ExpertMask>(&s).unwrap(), m);
    }

    /// Bank + H packaged so grad_check can perturb both.
    struct Probe {
        bank: ExpertBank,
        h: MatrixParam,
    }

    impl Parameters for Probe {
        fn params<'a>(&'a self, _: &str, out: &mut Vec<ParamView<'a>>) {
            self.h.params("h", out);
            self.bank.params("experts", out);
        }
        fn params_mut<'a>(&'a mut self, _: &str, out: &mut Vec<ParamViewMut<'a>>) {
            self.h.params_mut("h", out);
            self.bank.params_mut("experts", out);
        }
    }

    #[test]
    fn every_expert_passes_grad_check() {
        let (t, d) = (6, 4);
        let cue = vec![1, 4];
        let contrast = vec![2];
        let coeffs: Vec<Vector> = (0..6)
            .map(|i| {
                (0..d)
                    .map(|j| ((i * d + j) as f64 * 0.37).sin())
                    .collect::<Vec<_>>()
                    .into()
            })
            .collect();
        for kind in ExpertKind::ALL {
            let mut probe = Probe {
                bank: ExpertBank::new(d, 2, 3.0, 1e-8, ExpertMask::only(kind), &mut rng(31))
                    .unwrap(),
                h: MatrixParam::new(Matrix::uniform(t, d, 1.0, &mut rng(32))),
            };
            let c = &coeffs[kind.slot()];
            let loss = |p: &Probe| -> Result<f64> {
                let (e, _) = p.bank.forward_expert(kind, &p.h.value, &cue, &contrast)?;
                Ok(e.iter().zip(c.iter()).map(|(a, b)| (a * b).sin()).sum())
            };
            let analytic = |p: &mut Probe| -> Result<f64> {
                let (e, cache) = p.bank.forward_expert(kind, &p.h.value, &cue, &contrast)?;
                let g: Vec<f64> = e
                    .iter()
                    .zip(c.iter())
                    .map(|(a, b)| (a * b).cos() * b)
                    .collect();
                let h = p.h.value.clone();
                let mut gh = Matrix::zeros(t, d);
                p.bank
                    .backward_expert(&h, &cue, &contrast, &cache, &g, &mut gh)?;
                p.h.grad.add_assign(&gh);
                Ok(0.0)
            };
            let report = grad_check(&mut probe, loss, analytic, 1e-4, 1e-3).unwrap();
            assert!(report.passed(), "{kind}: {report:?}");
        }
    }

    fn arb_matrix(max_t: usize, d: usize) -> impl Strategy<Value = Matrix> {
        (1..=max_t).prop_flat_map(move |t| {
            prop::collection::vec(-5f64..5.0, t * d)
                .prop_map(move |v| Matrix::new(t, d, v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn pooling_is_permutation_invariant(h in arb_matrix(8, 3), seed in 0u64..1000) {
            let bank = ExpertBank::new(3, 1, 3.0, 1e-8, ExpertMask::all(), &mut rng(seed)).unwrap();
            let mut order: Vec<usize> = (0..h.rows()).collect();
            order.reverse();
            order.rotate_left(seed as usize % h.rows());
            let permuted = Matrix::from_rows(&order.iter().map(|&i| h.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
            for f in [expert_mean, expert_max, expert_selfattn] {
                prop_assert!(close(&f(&bank, &h).unwrap(), &f(&bank, &permuted).unwrap(), 1e-12));
            }
        }

        #[test]
        fn attention_weights_on_simplex(h in arb_matrix(10, 4), seed in 0u64..1000) {
            let bank = ExpertBank::new(4, 1, 3.0, 1e-8, ExpertMask::all(), &mut rng(seed)).unwrap();
            let (_, cache) = bank.forward_self_attention(&h).unwrap();
            let ExpertCache::SelfAttention { alpha, .. } = cache else { unreachable!() };
            prop_assert!((alpha.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(alpha.iter().all(|&a| a >= 0.0));
        }

        #[test]
        fn cue_is_homogeneous(h in arb_matrix(8, 3), s in -4f64..4.0, seed in 0u64..1000) {
            let mut bank = ExpertBank::new(3, 1, 3.0, 1e-8, ExpertMask::all(), &mut rng(seed)).unwrap();
            bank.cue.as_mut().unwrap().bias.fill(0.0);
            let cue: Vec<usize> = (0..h.rows()).step_by(2).collect();
            let mut scaled = h.clone();
            scaled.scale(s);
            let a = expert_cue(&bank, &h, &cue).unwrap();
            let b = expert_cue(&bank, &scaled, &cue).unwrap();
            let want: Vec<f64> = a.iter().map(|v| v * s).collect();
            prop_assert!(close(&b, &want, 1e-12));
        }

        #[test]
        fn max_pool_is_monotone(h in arb_matrix(8, 3), bump in 0f64..3.0, idx in 0usize..24) {
            let bank = identity_bank(3);
            let i = idx % (h.rows() * 3);
            let mut bumped = h.clone();
            bumped.as_mut_slice()[i] += bump;
            let before = expert_max(&bank, &h).unwrap();
            let after = expert_max(&bank, &bumped).unwrap();
            prop_assert!(after[i % 3] >= before[i % 3]);
        }

        #[test]
        fn contrast_identity_factor_is_mean(h in arb_matrix(8, 3)) {
            let mut bank = identity_bank(3);
            bank.contrast_factor = 1.0;
            let all: Vec<usize> = (0..h.rows()).collect();
            let mean = mean_rows(&h);
            let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
            let out = expert_contrast(&bank, &h, &all).unwrap();
            let diff = out.iter().zip(mean.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            prop_assert!(diff <= 2.0 * bank.epsilon * norm + 1e-15);
        }
    }
}
