//! SMCK1 ensemble checkpoints.
//!
//! Layout (little-endian): magic `SMCK1\0`, u32 metadata length and that
//! many bytes of JSON metadata, u32 tensor count, then per tensor u16 key
//! length, key bytes, u32 rows, u32 cols and rows×cols `f64` values.
//! Keys are `fold{j}.<parameter path>`.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::Reader;
use crate::error::{Error, Result};
use crate::evaluation::MetricsReport;
use crate::model::{ModelSpec, StanceModel};
use crate::numcore::param_views;
use crate::textpipe::{CueLexicon, Vocab};
use crate::training::{EnsembleModel, FoldArtifact, TrainConfig};

pub const SMCK_MAGIC: &[u8; 6] = b"SMCK1\0";

/// A trained ensemble with everything needed to tokenize new text.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub vocab: Vocab,
    pub lexicon: CueLexicon,
    pub ensemble: EnsembleModel,
}

#[derive(Serialize, Deserialize)]
struct FoldMeta {
    fold: usize,
    weight: f64,
    val_macro_f1: f64,
    val_report: MetricsReport,
    epoch_losses: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: TrainConfig,
    spec: ModelSpec,
    vocab: Vec<String>,
    cue_lexicon: BTreeSet<String>,
    contrast_lexicon: BTreeSet<String>,
    folds: Vec<FoldMeta>,
}

fn fold_prefix(j: usize) -> String {
    format!("fold{j}")
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = Meta {
            config: self.config.clone(),
            spec: self.ensemble.spec().clone(),
            vocab: self.vocab.tokens().to_vec(),
            cue_lexicon: self.lexicon.cue_tokens.clone(),
            contrast_lexicon: self.lexicon.contrast_tokens.clone(),
            folds: self
                .ensemble
                .folds
                .iter()
                .zip(self.ensemble.weights.iter())
                .map(|(f, &weight)| FoldMeta {
                    fold: f.fold,
                    weight,
                    val_macro_f1: f.val_macro_f1,
                    val_report: f.val_report.clone(),
                    epoch_losses: f.epoch_losses.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(SMCK_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let views: Vec<_> = self
            .ensemble
            .folds
            .iter()
            .enumerate()
            .flat_map(|(j, f)| {
                let mut v = Vec::new();
                crate::numcore::Parameters::params(&f.model, &fold_prefix(j), &mut v);
                v
            })
            .collect();
        out.extend_from_slice(&(views.len() as u32).to_le_bytes());
        for p in views {
            let key = p.name.as_bytes();
            let key_len = u16::try_from(key.len())
                .map_err(|_| Error::Format(format!("tensor key too long: {}", p.name)))?;
            out.extend_from_slice(&key_len.to_le_bytes());
            out.extend_from_slice(key);
            out.extend_from_slice(&(p.rows as u32).to_le_bytes());
            out.extend_from_slice(&(p.cols as u32).to_le_bytes());
            for v in p.value {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(SMCK_MAGIC.len())? != SMCK_MAGIC {
            return Err(Error::Format("not an SMCK1 checkpoint (bad magic)".into()));
        }
        let meta_len = r.u32()? as usize;
        let meta: Meta = serde_json::from_slice(r.take(meta_len)?)?;
        let vocab = Vocab::from_tokens(meta.vocab)?;
        if vocab.len() != meta.spec.vocab_size {
            return Err(Error::Format(format!(
                "checkpoint vocabulary has {} tokens but the model expects {}",
                vocab.len(),
                meta.spec.vocab_size
            )));
        }
        let lexicon = CueLexicon::new(meta.cue_lexicon, meta.contrast_lexicon)?;

        let count = r.u32()? as usize;
        let mut tensors: HashMap<String, (usize, usize, Vec<f64>)> = HashMap::with_capacity(count);
        for _ in 0..count {
            let klen = r.u16()? as usize;
            let key = r.string(klen)?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let raw = r.take(
                rows.checked_mul(cols)
                    .and_then(|n| n.checked_mul(8))
                    .ok_or_else(|| Error::Format("tensor too large".into()))?,
            )?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if tensors.insert(key.clone(), (rows, cols, values)).is_some() {
                return Err(Error::Format(format!("duplicate tensor '{key}'")));
            }
        }
        if !r.is_done() {
            return Err(Error::Format("trailing bytes after the last tensor".into()));
        }

        // the RNG only fills a skeleton that is overwritten below
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut folds = Vec::with_capacity(meta.folds.len());
        let mut weights = Vec::with_capacity(meta.folds.len());
        for (j, fm) in meta.folds.into_iter().enumerate() {
            let mut model = StanceModel::new(meta.spec.clone(), &mut rng)?;
            let prefix = fold_prefix(j);
            let mut views = Vec::new();
            crate::numcore::Parameters::params_mut(&mut model, &prefix, &mut views);
            for p in views {
                let (rows, cols, values) = tensors.remove(&p.name).ok_or_else(|| {
                    Error::Format(format!("checkpoint is missing tensor '{}'", p.name))
                })?;
                if (rows, cols) != (p.rows, p.cols) {
                    return Err(Error::Format(format!(
                        "tensor '{}' is {rows}x{cols}, expected {}x{}",
                        p.name, p.rows, p.cols
                    )));
                }
                p.value.copy_from_slice(&values);
            }
            weights.push(fm.weight);
            folds.push(FoldArtifact {
                fold: fm.fold,
                model,
                val_report: fm.val_report,
                val_macro_f1: fm.val_macro_f1,
                epoch_losses: fm.epoch_losses,
            });
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Format(format!("unexpected tensor '{extra}'")));
        }
        Ok(Checkpoint {
            config: meta.config,
            vocab,
            lexicon,
            ensemble: EnsembleModel::with_weights(folds, weights.into())?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

/// Total scalar parameters across all folds.
pub fn ensemble_param_count(ensemble: &EnsembleModel) -> usize {
    ensemble
        .folds
        .iter()
        .map(|f| {
            param_views(&f.model)
                .iter()
                .map(|p| p.value.len())
                .sum::<usize>()
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{synthetic_corpus, SyntheticSpec};
    use crate::training::run_kfold;

    fn trained() -> (Checkpoint, crate::training::Corpus) {
        let (corpus, vocab) = synthetic_corpus(&SyntheticSpec {
            per_class: 6,
            seed: 3,
            ..Default::default()
        });
        let config = TrainConfig {
            dim: 6,
            filters: 2,
            epochs: 1,
            k: 2,
            batch_size: 4,
            ..Default::default()
        };
        let ensemble = run_kfold(&config, &corpus, vocab.len(), 1).unwrap();
        (
            Checkpoint {
                config,
                vocab,
                lexicon: CueLexicon::default(),
                ensemble,
            },
            corpus,
        )
    }

    #[test]
    fn roundtrip_reproduces_predictions() {
        let (ck, corpus) = trained();
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..6], SMCK_MAGIC);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        for i in 0..corpus.len() {
            let input = corpus.input(i).unwrap();
            assert_eq!(
                back.ensemble.predict(&input).unwrap(),
                ck.ensemble.predict(&input).unwrap()
            );
        }
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rejects_damage() {
        let (ck, _) = trained();
        let bytes = ck.to_bytes().unwrap();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Format(_))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::Format(_))
        ));
        let mut longer = bytes;
        longer.push(0);
        assert!(Checkpoint::from_bytes(&longer).is_err());
    }
}
