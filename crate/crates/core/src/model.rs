//! Full classifier: encoder → experts → head, with one forward/backward pair.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderCache, EncoderOutput, ToyEncoder};
use crate::error::{Error, Result};
use crate::experts::{ExpertBank, ExpertCache, ExpertMask, ExpertOutputs};
use crate::head::{Head, HeadCache, HeadOutput, HeadVariant};
use crate::numcore::{Matrix, ParamView, ParamViewMut, Parameters, Vector};
use crate::textpipe::TokenizedExample;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    /// Trainable embedding + self-attention encoder.
    #[default]
    Toy,
    /// Frozen embeddings from an SMEB1 store.
    Precomputed,
}

/// Architecture hyperparameters needed to rebuild a model skeleton.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub dim: usize,
    pub filters: usize,
    pub contrast_factor: f64,
    pub epsilon: f64,
    pub experts: ExpertMask,
    pub head: HeadVariant,
    pub encoder: EncoderMode,
    pub vocab_size: usize,
    pub max_len: usize,
    pub use_positions: bool,
    pub freeze_encoder: bool,
}

/// Everything the model reads for one example.
#[derive(Clone, Copy, Debug)]
pub struct ModelInput<'a> {
    pub token_ids: &'a [usize],
    pub cue: &'a [usize],
    pub contrast: &'a [usize],
    pub embedding: Option<&'a EncoderOutput>,
}

impl<'a> ModelInput<'a> {
    pub fn from_example(
        example: &'a TokenizedExample,
        embedding: Option<&'a EncoderOutput>,
    ) -> Self {
        ModelInput {
            token_ids: &example.token_ids,
            cue: &example.cue_positions,
            contrast: &example.contrast_positions,
            embedding,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StanceModel {
    pub spec: ModelSpec,
    pub encoder: Option<ToyEncoder>,
    pub experts: ExpertBank,
    pub head: Head,
}

pub struct ModelCache {
    encoder: Option<EncoderCache>,
    hidden: Matrix,
    cls: Vector,
    cue: Vec<usize>,
    contrast: Vec<usize>,
    outputs: ExpertOutputs,
    expert_caches: Vec<ExpertCache>,
    head: HeadCache,
}

impl ModelCache {
    pub fn hidden(&self) -> &Matrix {
        &self.hidden
    }

    pub fn expert_outputs(&self) -> &ExpertOutputs {
        &self.outputs
    }
}

impl StanceModel {
    /// Draws initial weights from `rng` in a fixed order: encoder, experts, head.
    pub fn new(spec: ModelSpec, rng: &mut impl Rng) -> Result<Self> {
        if spec.dim == 0 {
            return Err(Error::config("model dimension must be positive"));
        }
        let encoder = match spec.encoder {
            EncoderMode::Toy => {
                if spec.vocab_size < 3 {
                    return Err(Error::config("vocabulary must contain the reserved tokens"));
                }
                Some(ToyEncoder::new(
                    spec.vocab_size,
                    spec.dim,
                    spec.max_len,
                    spec.use_positions,
                    rng,
                ))
            }
            EncoderMode::Precomputed => None,
        };
        let experts = ExpertBank::new(
            spec.dim,
            spec.filters,
            spec.contrast_factor,
            spec.epsilon,
            spec.experts,
            rng,
        )?;
        let head = Head::new(spec.head, spec.dim, spec.experts, rng)?;
        Ok(StanceModel {
            spec,
            encoder,
            experts,
            head,
        })
    }

    pub fn forward(&self, input: &ModelInput<'_>) -> Result<(HeadOutput, ModelCache)> {
        let (enc, encoder_cache) = match (&self.encoder, input.embedding) {
            (_, Some(pre)) => {
                if pre.dim() != self.spec.dim {
                    return Err(Error::Dimension {
                        what: "precomputed embedding width vs model dimension".into(),
                        expected: self.spec.dim,
                        found: pre.dim(),
                    });
                }
                (pre.clone(), None)
            }
            (Some(encoder), None) => {
                let (out, cache) = encoder.forward(input.token_ids)?;
                (out, Some(cache))
            }
            (None, None) => {
                return Err(Error::config(
                    "model uses precomputed embeddings but none were supplied",
                ))
            }
        };
        let (outputs, expert_caches) =
            self.experts
                .forward(&enc.hidden, input.cue, input.contrast, self.spec.experts)?;
        let (out, head) = self.head.forward(&outputs, &enc.cls)?;
        Ok((
            out,
            ModelCache {
                encoder: encoder_cache,
                hidden: enc.hidden,
                cls: enc.cls,
                cue: input.cue.to_vec(),
                contrast: input.contrast.to_vec(),
                outputs,
                expert_caches,
                head,
            },
        ))
    }

    pub fn predict(&self, input: &ModelInput<'_>) -> Result<HeadOutput> {
        self.forward(input).map(|(o, _)| o)
    }

    /// Accumulates gradients of all parameters given `∂L/∂logits`.
    pub fn backward(&mut self, cache: &ModelCache, grad_logits: &[f64]) -> Result<()> {
        let (grad_experts, grad_cls) =
            self.head
                .backward(&cache.head, &cache.outputs, &cache.cls, grad_logits);
        let mut grad_hidden = self.experts.backward(
            &cache.hidden,
            &cache.cue,
            &cache.contrast,
            &cache.expert_caches,
            &grad_experts,
        )?;
        if self.spec.freeze_encoder {
            return Ok(());
        }
        if let (Some(encoder), Some(enc_cache)) = (&mut self.encoder, &cache.encoder) {
            // h_cls is row 0 of H
            for (g, c) in grad_hidden.row_mut(0).iter_mut().zip(grad_cls.iter()) {
                *g += c;
            }
            encoder.backward(enc_cache, &grad_hidden);
        }
        Ok(())
    }

    /// Parameters the optimizer updates; excludes a frozen encoder.
    pub fn trainable_params_mut(&mut self) -> Vec<ParamViewMut<'_>> {
        let mut out = Vec::new();
        if !self.spec.freeze_encoder {
            if let Some(e) = &mut self.encoder {
                e.params_mut("encoder", &mut out);
            }
        }
        self.experts.params_mut("experts", &mut out);
        self.head.params_mut("head", &mut out);
        out
    }
}

impl Parameters for StanceModel {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a>>) {
        let p = |n: &str| crate::numcore::join_path(prefix, n);
        if let Some(e) = &self.encoder {
            e.params(&p("encoder"), out);
        }
        self.experts.params(&p("experts"), out);
        self.head.params(&p("head"), out);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a>>) {
        let p = |n: &str| crate::numcore::join_path(prefix, n);
        if let Some(e) = &mut self.encoder {
            e.params_mut(&p("encoder"), out);
        }
        self.experts.params_mut(&p("experts"), out);
        self.head.params_mut(&p("head"), out);
    }
}
