//! Contextual token representations.
//!
//! Two sources produce the `(H, h_cls)` pair consumed by the experts: a
//! small trainable self-attention encoder over word embeddings, or frozen
//! embeddings read from an SMEB1 store written by an external model.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{
    join_path, softmax, softmax_backward, LinearParams, Matrix, MatrixParam, ParamView,
    ParamViewMut, Parameters, Vector,
};
use crate::textpipe::{TokenizedExample, UNK_ID};

/// Token matrix `H` (T×d) and the CLS row `h_cls = H₀`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub hidden: Matrix,
    pub cls: Vector,
}

impl EncoderOutput {
    pub fn from_hidden(hidden: Matrix) -> Result<Self> {
        if hidden.rows() == 0 {
            return Err(Error::shape("encoder output needs at least the CLS row"));
        }
        let cls = hidden.row(0).to_vec().into();
        Ok(EncoderOutput { hidden, cls })
    }

    pub fn len(&self) -> usize {
        self.hidden.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.hidden.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.hidden.cols()
    }
}

/// `P[p][2i] = sin(p / 10000^(2i/d))`, `P[p][2i+1] = cos(…)`.
pub fn sinusoidal_positions(max_len: usize, dim: usize) -> Matrix {
    let mut table = Matrix::zeros(max_len, dim);
    for p in 0..max_len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = p as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            table[(p, i)] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    table
}

/// Embedding lookup plus one scaled dot-product self-attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyEncoder {
    pub embedding: MatrixParam,
    /// Fixed sinusoidal table; `None` disables positional information.
    pub positions: Option<Matrix>,
    pub query: LinearParams,
    pub key: LinearParams,
    pub value: LinearParams,
}

/// Intermediate values kept for the backward pass.
#[derive(Clone, Debug)]
pub struct EncoderCache {
    ids: Vec<usize>,
    input: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    attn: Matrix,
}

impl ToyEncoder {
    pub fn new(
        vocab_size: usize,
        dim: usize,
        max_len: usize,
        use_positions: bool,
        rng: &mut impl Rng,
    ) -> Self {
        // Embedding rows are looked up by one-hot input, so fan-in is 1.
        let embedding = MatrixParam::new(Matrix::uniform(vocab_size, dim, 1.0, rng));
        ToyEncoder {
            embedding,
            positions: use_positions.then(|| sinusoidal_positions(max_len, dim)),
            query: LinearParams::init(dim, dim, rng),
            key: LinearParams::init(dim, dim, rng),
            value: LinearParams::init(dim, dim, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.embedding.value.cols()
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.value.rows()
    }

    fn lookup(&self, ids: &[usize]) -> Result<(Vec<usize>, Matrix)> {
        let d = self.dim();
        let ids: Vec<usize> = ids
            .iter()
            .map(|&i| {
                if i < self.vocab_size() {
                    i
                } else {
                    UNK_ID.min(self.vocab_size() - 1)
                }
            })
            .collect();
        if let Some(pos) = &self.positions {
            if ids.len() > pos.rows() {
                return Err(Error::shape(format!(
                    "sequence of {} tokens exceeds the position table ({} rows)",
                    ids.len(),
                    pos.rows()
                )));
            }
        }
        let mut x = Matrix::zeros(ids.len(), d);
        for (t, &id) in ids.iter().enumerate() {
            let row = x.row_mut(t);
            row.copy_from_slice(self.embedding.value.row(id));
            if let Some(pos) = &self.positions {
                for (v, p) in row.iter_mut().zip(pos.row(t)) {
                    *v += p;
                }
            }
        }
        Ok((ids, x))
    }

    /// Pre-attention inputs `embed(token) + pos`, one row per token.
    pub fn embed(&self, ids: &[usize]) -> Result<Matrix> {
        self.lookup(ids).map(|(_, x)| x)
    }

    pub fn forward(&self, ids: &[usize]) -> Result<(EncoderOutput, EncoderCache)> {
        if ids.is_empty() {
            return Err(Error::shape("cannot encode an empty token sequence"));
        }
        let (ids, input) = self.lookup(ids)?;
        let q = self.query.forward_rows(&input)?;
        let k = self.key.forward_rows(&input)?;
        let v = self.value.forward_rows(&input)?;
        let mut attn = q.matmul_t(&k);
        let scale = 1.0 / (self.dim() as f64).sqrt();
        for t in 0..attn.rows() {
            let row = attn.row_mut(t);
            row.iter_mut().for_each(|s| *s *= scale);
            let probs = softmax(row)?;
            row.copy_from_slice(&probs);
        }
        let hidden = attn.matmul(&v);
        let out = EncoderOutput::from_hidden(hidden)?;
        Ok((
            out,
            EncoderCache {
                ids,
                input,
                q,
                k,
                v,
                attn,
            },
        ))
    }

    pub fn encode(&self, example: &TokenizedExample) -> Result<EncoderOutput> {
        self.forward(&example.token_ids).map(|(out, _)| out)
    }

    /// Accumulates parameter gradients given `∂L/∂H`. Gradient w.r.t.
    /// `h_cls` must already be folded into row 0 of `grad_hidden`.
    pub fn backward(&mut self, cache: &EncoderCache, grad_hidden: &Matrix) {
        let scale = 1.0 / (self.dim() as f64).sqrt();
        // H = A V
        let grad_attn = grad_hidden.matmul_t(&cache.v);
        let grad_v = cache.attn.t_matmul(grad_hidden);
        // A = softmax(S) row-wise, S = scale · Q Kᵀ
        let mut grad_scores = Matrix::zeros(grad_attn.rows(), grad_attn.cols());
        for t in 0..grad_attn.rows() {
            let g = softmax_backward(cache.attn.row(t), grad_attn.row(t));
            for (dst, src) in grad_scores.row_mut(t).iter_mut().zip(g.iter()) {
                *dst = src * scale;
            }
        }
        let grad_q = grad_scores.matmul(&cache.k);
        let grad_k = grad_scores.t_matmul(&cache.q);

        let mut grad_input = self.query.backward_rows(&cache.input, &grad_q);
        grad_input.add_assign(&self.key.backward_rows(&cache.input, &grad_k));
        grad_input.add_assign(&self.value.backward_rows(&cache.input, &grad_v));
        for (t, &id) in cache.ids.iter().enumerate() {
            for (g, d) in self
                .embedding
                .grad
                .row_mut(id)
                .iter_mut()
                .zip(grad_input.row(t))
            {
                *g += d;
            }
        }
    }
}

impl Parameters for ToyEncoder {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a>>) {
        self.embedding.params(&join_path(prefix, "embedding"), out);
        self.query.params(&join_path(prefix, "query"), out);
        self.key.params(&join_path(prefix, "key"), out);
        self.value.params(&join_path(prefix, "value"), out);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a>>) {
        self.embedding
            .params_mut(&join_path(prefix, "embedding"), out);
        self.query.params_mut(&join_path(prefix, "query"), out);
        self.key.params_mut(&join_path(prefix, "key"), out);
        self.value.params_mut(&join_path(prefix, "value"), out);
    }
}

pub const SMEB_MAGIC: &[u8; 6] = b"SMEB1\0";

/// In-memory SMEB1 embedding store.
///
/// Layout (little-endian): magic `SMEB1\0`, u32 d, u32 record count; then
/// per record u16 id length, id bytes (UTF-8), u32 T and T×d `f32` values
/// row-major with row 0 the CLS vector.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    order: Vec<String>,
    records: HashMap<String, EncoderOutput>,
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Format(format!(
                    "truncated file: wanted {n} bytes at offset {}, {} available",
                    self.pos,
                    self.bytes.len() - self.pos
                ))
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn string(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Format("record key is not valid UTF-8".into()))
    }

    pub(crate) fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Self {
        EmbeddingStore {
            dim,
            ..Default::default()
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.order
    }

    pub fn insert(&mut self, id: &str, hidden: Matrix) -> Result<()> {
        if hidden.cols() != self.dim {
            return Err(Error::Dimension {
                what: format!("embedding for '{id}'"),
                expected: self.dim,
                found: hidden.cols(),
            });
        }
        if id.len() > u16::MAX as usize {
            return Err(Error::Format(format!(
                "example id of {} bytes is too long",
                id.len()
            )));
        }
        let out = EncoderOutput::from_hidden(hidden)?;
        if self.records.insert(id.to_string(), out).is_none() {
            self.order.push(id.to_string());
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&EncoderOutput> {
        self.records
            .get(id)
            .ok_or_else(|| Error::MissingEmbedding(id.to_string()))
    }

    /// Fails with a dimension error naming both widths unless the store is `dim` wide.
    pub fn expect_dim(&self, dim: usize) -> Result<()> {
        if self.dim != dim {
            return Err(Error::Dimension {
                what: "embedding store width vs configured model dimension".into(),
                expected: dim,
                found: self.dim,
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(SMEB_MAGIC);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.order.len() as u32).to_le_bytes());
        for id in &self.order {
            let rec = &self.records[id];
            out.extend_from_slice(&(id.len() as u16).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            out.extend_from_slice(&(rec.len() as u32).to_le_bytes());
            for v in rec.hidden.as_slice() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(SMEB_MAGIC.len()).ok() != Some(SMEB_MAGIC.as_slice()) {
            return Err(Error::Format(
                "not an SMEB1 embedding store (bad magic)".into(),
            ));
        }
        let dim = r.u32()? as usize;
        let count = r.u32()? as usize;
        let mut store = EmbeddingStore::new(dim);
        for _ in 0..count {
            let id_len = r.u16()? as usize;
            let id = r.string(id_len)?;
            let t = r.u32()? as usize;
            if t == 0 {
                return Err(Error::Format(format!("record '{id}' has no rows")));
            }
            let n = t
                .checked_mul(dim)
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::Format("record size overflows".into()))?;
            let raw = r.take(n)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            store.insert(&id, Matrix::new(t, dim, data)?)?;
        }
        if !r.is_done() {
            return Err(Error::Format("trailing bytes after last record".into()));
        }
        Ok(store)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        EmbeddingStore::from_bytes(&bytes)
    }
}

/// Reads one example's embeddings from an SMEB1 file, optionally checking
/// the stored width against the model dimension.
pub fn load_precomputed(
    path: &Path,
    example_id: &str,
    dim: Option<usize>,
) -> Result<EncoderOutput> {
    let store = EmbeddingStore::read(path)?;
    if let Some(d) = dim {
        store.expect_dim(d)?;
    }
    store.get(example_id).cloned()
}
