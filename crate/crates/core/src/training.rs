//! Label-smoothed cross-entropy, Adam, per-fold training, k-fold
//! orchestration and F1-weighted logit ensembling.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EmbeddingStore, EncoderOutput};
use crate::error::{Error, Result};
use crate::evaluation::{confusion, macro_metrics, MetricsReport};
use crate::experts::ExpertMask;
use crate::head::HeadVariant;
use crate::model::{EncoderMode, ModelInput, ModelSpec, StanceModel};
use crate::numcore::{
    argmax, grad_check, log_sum_exp, softmax, GradCheckReport, ParamViewMut, Vector,
};
use crate::textpipe::{stratified_kfold, Label, TokenizedExample, NUM_CLASSES};

/// Training hyperparameters. Defaults follow the reference setup.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_len: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub k: usize,
    pub label_smoothing: f64,
    pub seed: u64,
    pub dim: usize,
    /// Filters per CNN kernel width.
    pub filters: usize,
    pub contrast_factor: f64,
    pub epsilon: f64,
    pub encoder: EncoderMode,
    pub freeze_encoder: bool,
    pub use_positions: bool,
    pub experts: ExpertMask,
    pub head: HeadVariant,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    /// Decoupled weight decay; 0 disables.
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables.
    pub grad_clip: Option<f64>,
    /// Linear learning-rate warmup steps; 0 disables.
    pub warmup_steps: usize,
    pub cue_lexicon: Option<PathBuf>,
    pub contrast_lexicon: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_len: 128,
            batch_size: 16,
            epochs: 10,
            learning_rate: 5e-5,
            k: 10,
            label_smoothing: 0.25,
            seed: 42,
            dim: 64,
            filters: 8,
            contrast_factor: 3.0,
            epsilon: 1e-8,
            encoder: EncoderMode::Toy,
            freeze_encoder: false,
            use_positions: true,
            experts: ExpertMask::all(),
            head: HeadVariant::Moe,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            weight_decay: 0.0,
            grad_clip: None,
            warmup_steps: 0,
            cue_lexicon: None,
            contrast_lexicon: None,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)
            .map_err(|e| Error::config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TrainConfig::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::config(m));
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return fail("label_smoothing must lie in [0, 1)");
        }
        if self.k < 2 {
            return fail("k must be at least 2");
        }
        if self.epochs < 1 {
            return fail("epochs must be at least 1");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be a finite non-negative number");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if self.max_len < 2 {
            return fail("max_len must be at least 2");
        }
        if self.dim == 0 {
            return fail("dim must be positive");
        }
        if self.experts.count() == 0 {
            return fail("at least one expert must be active");
        }
        if self.contrast_factor <= 0.0 || self.epsilon <= 0.0 {
            return fail("contrast_factor and epsilon must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("Adam betas must lie in [0, 1)");
        }
        if self.grad_clip.is_some_and(|c| c <= 0.0) {
            return fail("grad_clip must be positive when set");
        }
        Ok(())
    }

    pub fn model_spec(&self, vocab_size: usize) -> ModelSpec {
        ModelSpec {
            dim: self.dim,
            filters: self.filters,
            contrast_factor: self.contrast_factor,
            epsilon: self.epsilon,
            experts: self.experts,
            head: self.head,
            encoder: self.encoder,
            vocab_size,
            max_len: self.max_len,
            use_positions: self.use_positions,
            freeze_encoder: self.freeze_encoder || self.encoder == EncoderMode::Precomputed,
        }
    }
}

/// `(1 − α)·onehot(gold) + α/C`
pub fn smoothed_target(gold: Label, alpha: f64) -> [f64; NUM_CLASSES] {
    let mut y = [alpha / NUM_CLASSES as f64; NUM_CLASSES];
    y[gold.index()] += 1.0 - alpha;
    y
}

/// Label-smoothed cross-entropy evaluated in logit space, with its
/// gradient `probs − y_s` w.r.t. the logits.
pub fn label_smoothed_ce_with_grad(
    logits: &[f64],
    gold: Label,
    alpha: f64,
) -> Result<(f64, Vector)> {
    if logits.len() != NUM_CLASSES {
        return Err(Error::Dimension {
            what: "class logits".into(),
            expected: NUM_CLASSES,
            found: logits.len(),
        });
    }
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::config("label smoothing must lie in [0, 1)"));
    }
    let y = smoothed_target(gold, alpha);
    let lse = log_sum_exp(logits);
    let loss = y.iter().zip(logits).map(|(yc, z)| yc * (lse - z)).sum();
    let probs = softmax(logits)?;
    let grad = probs
        .iter()
        .zip(y)
        .map(|(p, yc)| p - yc)
        .collect::<Vec<_>>();
    Ok((loss, grad.into()))
}

pub fn label_smoothed_ce(logits: &[f64], gold: Label, alpha: f64) -> Result<f64> {
    label_smoothed_ce_with_grad(logits, gold, alpha).map(|(l, _)| l)
}

/// Plain cross-entropy `−log softmax(z)[gold]`.
pub fn cross_entropy(logits: &[f64], gold: Label) -> f64 {
    log_sum_exp(logits) - logits[gold.index()]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Bias-corrected Adam with optional decoupled weight decay.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            ..Default::default()
        }
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.first, &self.second)
    }

    /// One update over `params` (in a stable order); gradients are zeroed
    /// afterwards. A non-finite gradient aborts the step before any write.
    pub fn step(&mut self, mut params: Vec<ParamViewMut<'_>>, lr: f64) -> Result<()> {
        if let Some(bad) = params
            .iter()
            .find(|p| p.grad.iter().any(|g| !g.is_finite()))
        {
            return Err(Error::NonFiniteGradient(bad.name.clone()));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len()
            || self
                .first
                .iter()
                .zip(&params)
                .any(|(m, p)| m.len() != p.value.len())
        {
            return Err(Error::shape(
                "optimizer state does not match parameter layout",
            ));
        }
        self.step += 1;
        let AdamConfig {
            beta1,
            beta2,
            epsilon,
            weight_decay,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p.value[i] -= lr * (m_hat / (v_hat.sqrt() + epsilon) + weight_decay * p.value[i]);
                p.grad[i] = 0.0;
            }
        }
        Ok(())
    }
}

pub fn optimizer_step(params: Vec<ParamViewMut<'_>>, state: &mut Adam, lr: f64) -> Result<()> {
    state.step(params, lr)
}

fn clip_global_norm(params: &mut [ParamViewMut<'_>], max_norm: f64) {
    let norm = params
        .iter()
        .flat_map(|p| p.grad.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for p in params.iter_mut() {
            p.grad.iter_mut().for_each(|g| *g *= scale);
        }
    }
}

/// Examples plus, in precomputed mode, their embedding store.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub examples: Vec<TokenizedExample>,
    pub embeddings: Option<EmbeddingStore>,
}

impl Corpus {
    pub fn new(examples: Vec<TokenizedExample>) -> Self {
        Corpus {
            examples,
            embeddings: None,
        }
    }

    pub fn with_embeddings(examples: Vec<TokenizedExample>, store: EmbeddingStore) -> Result<Self> {
        for ex in &examples {
            let rec = store.get(&ex.id)?;
            check_positions_fit(ex, rec)?;
        }
        Ok(Corpus {
            examples,
            embeddings: Some(store),
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> Vec<Label> {
        self.examples.iter().map(|e| e.label).collect()
    }

    pub fn embedding(&self, i: usize) -> Result<Option<&EncoderOutput>> {
        match &self.embeddings {
            Some(store) => store.get(&self.examples[i].id).map(Some),
            None => Ok(None),
        }
    }

    pub fn input(&self, i: usize) -> Result<ModelInput<'_>> {
        Ok(ModelInput::from_example(
            &self.examples[i],
            self.embedding(i)?,
        ))
    }

    pub fn subset(&self, idx: &[usize]) -> Corpus {
        Corpus {
            examples: idx.iter().map(|&i| self.examples[i].clone()).collect(),
            embeddings: self.embeddings.clone(),
        }
    }
}

fn check_positions_fit(ex: &TokenizedExample, rec: &EncoderOutput) -> Result<()> {
    let t = rec.len();
    if let Some(p) = ex
        .cue_positions
        .iter()
        .chain(&ex.contrast_positions)
        .find(|&&p| p >= t)
    {
        return Err(Error::shape(format!(
            "example '{}': marker position {p} is outside its {t} stored embedding rows",
            ex.id
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldArtifact {
    pub fold: usize,
    pub model: StanceModel,
    pub val_report: MetricsReport,
    pub val_macro_f1: f64,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Predictions of one model over a corpus subset.
pub fn predict_indices(model: &StanceModel, corpus: &Corpus, idx: &[usize]) -> Result<Vec<Vector>> {
    idx.iter()
        .map(|&i| model.predict(&corpus.input(i)?).map(|o| o.logits))
        .collect()
}

pub fn evaluate_model(
    model: &StanceModel,
    corpus: &Corpus,
    idx: &[usize],
) -> Result<MetricsReport> {
    let logits = predict_indices(model, corpus, idx)?;
    let golds: Vec<Label> = idx.iter().map(|&i| corpus.examples[i].label).collect();
    let preds: Vec<Label> = logits.iter().map(|l| class_of(l)).collect();
    Ok(macro_metrics(&confusion(&golds, &preds)?))
}

fn class_of(logits: &[f64]) -> Label {
    Label::from_index(argmax(logits)).expect("three class logits")
}

/// Trains one model on `train` and validates it on `val`.
///
/// Initialization and per-epoch shuffling draw from one PRNG seeded with
/// `config.seed + fold`.
pub fn train_fold(
    config: &TrainConfig,
    spec: &ModelSpec,
    corpus: &Corpus,
    train: &[usize],
    val: &[usize],
    fold: usize,
) -> Result<FoldArtifact> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::config("train and validation sets must be non-empty"));
    }
    let val_labels: std::collections::BTreeSet<Label> =
        val.iter().map(|&i| corpus.examples[i].label).collect();
    if val_labels.len() < NUM_CLASSES {
        log::warn!("fold {fold}: validation set is missing a class; its F1 counts as 0");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(fold as u64));
    let mut model = StanceModel::new(spec.clone(), &mut rng)?;
    let mut adam = Adam::new(AdamConfig {
        beta1: config.beta1,
        beta2: config.beta2,
        epsilon: config.adam_epsilon,
        weight_decay: config.weight_decay,
    });
    let mut order = train.to_vec();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let input = corpus.input(i)?;
                let (out, cache) = model.forward(&input)?;
                let (loss, mut grad) = label_smoothed_ce_with_grad(
                    &out.logits,
                    corpus.examples[i].label,
                    config.label_smoothing,
                )?;
                total += loss;
                grad.iter_mut().for_each(|g| *g *= scale);
                model.backward(&cache, &grad)?;
            }
            step += 1;
            let lr = if config.warmup_steps > 0 && step <= config.warmup_steps {
                config.learning_rate * step as f64 / config.warmup_steps as f64
            } else {
                config.learning_rate
            };
            let mut params = model.trainable_params_mut();
            if let Some(clip) = config.grad_clip {
                clip_global_norm(&mut params, clip);
            }
            adam.step(params, lr)?;
        }
        let mean = total / order.len() as f64;
        log::debug!("fold {fold} epoch {}: loss {mean:.5}", epoch + 1);
        epoch_losses.push(mean);
    }
    // a frozen encoder still accumulates nothing, but clear any stray grads
    crate::numcore::zero_grads(&mut model);
    let val_report = evaluate_model(&model, corpus, val)?;
    log::info!(
        "fold {fold}: val accuracy {:.4}, macro-F1 {:.4}",
        val_report.accuracy,
        val_report.macro_f1
    );
    Ok(FoldArtifact {
        fold,
        val_macro_f1: val_report.macro_f1,
        val_report,
        model,
        epoch_losses,
    })
}

/// `w_j = f1_j / Σ f1`, uniform when every F1 is zero.
pub fn fold_weights(f1s: &[f64]) -> Vector {
    let sum: f64 = f1s.iter().sum();
    if f1s.is_empty() {
        return Vector::zeros(0);
    }
    if sum <= 0.0 {
        return Vector::new(vec![1.0 / f1s.len() as f64; f1s.len()]);
    }
    f1s.iter().map(|f| f / sum).collect::<Vec<_>>().into()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleModel {
    pub folds: Vec<FoldArtifact>,
    pub weights: Vector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsemblePrediction {
    pub logits: Vector,
    pub probs: Vector,
    pub class: Label,
    /// Weighted mean of the fold gates.
    pub gate_weights: Vector,
}

impl EnsembleModel {
    pub fn new(folds: Vec<FoldArtifact>) -> Self {
        let f1s: Vec<f64> = folds.iter().map(|f| f.val_macro_f1).collect();
        let weights = fold_weights(&f1s);
        EnsembleModel { folds, weights }
    }

    pub fn with_weights(folds: Vec<FoldArtifact>, weights: Vector) -> Result<Self> {
        if folds.is_empty() || weights.dim() != folds.len() {
            return Err(Error::Dimension {
                what: "ensemble weights".into(),
                expected: folds.len(),
                found: weights.dim(),
            });
        }
        Ok(EnsembleModel { folds, weights })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.folds[0].model.spec
    }

    /// Per-fold logits for one input, in fold order.
    pub fn fold_logits(&self, input: &ModelInput<'_>) -> Result<Vec<Vector>> {
        self.folds
            .iter()
            .map(|f| f.model.predict(input).map(|o| o.logits))
            .collect()
    }

    pub fn predict(&self, input: &ModelInput<'_>) -> Result<EnsemblePrediction> {
        if self.folds.is_empty() {
            return Err(Error::config("ensemble has no folds"));
        }
        let mut logits = Vector::zeros(NUM_CLASSES);
        let mut gate = Vector::zeros(self.folds[0].model.head.gate_dim());
        for (fold, &w) in self.folds.iter().zip(self.weights.iter()) {
            let out = fold.model.predict(input)?;
            logits.axpy(w, &out.logits);
            gate.axpy(w, &out.gate_weights);
        }
        let probs = softmax(&logits)?;
        Ok(EnsemblePrediction {
            class: class_of(&logits),
            logits,
            probs,
            gate_weights: gate,
        })
    }
}

pub fn ensemble_predict(
    ensemble: &EnsembleModel,
    input: &ModelInput<'_>,
) -> Result<EnsemblePrediction> {
    ensemble.predict(input)
}

pub fn evaluate_ensemble(ensemble: &EnsembleModel, corpus: &Corpus) -> Result<MetricsReport> {
    let mut golds = Vec::with_capacity(corpus.len());
    let mut preds = Vec::with_capacity(corpus.len());
    for i in 0..corpus.len() {
        golds.push(corpus.examples[i].label);
        preds.push(ensemble.predict(&corpus.input(i)?)?.class);
    }
    Ok(macro_metrics(&confusion(&golds, &preds)?))
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::config(format!("cannot start worker pool: {e}")))
}

/// Trains one model per stratified fold and weights them by validation macro-F1.
/// Folds run on up to `jobs` threads; results do not depend on `jobs`.
pub fn run_kfold(
    config: &TrainConfig,
    corpus: &Corpus,
    vocab_size: usize,
    jobs: usize,
) -> Result<EnsembleModel> {
    config.validate()?;
    let splits = stratified_kfold(&corpus.labels(), config.k, config.seed)?;
    let spec = config.model_spec(vocab_size);
    let train = |(j, split): (usize, &crate::textpipe::FoldSplit)| {
        train_fold(config, &spec, corpus, &split.train, &split.val, j)
    };
    let folds: Result<Vec<FoldArtifact>> = if jobs <= 1 {
        splits.iter().enumerate().map(train).collect()
    } else {
        use rayon::prelude::*;
        thread_pool(jobs)?.install(|| splits.par_iter().enumerate().map(train).collect())
    };
    Ok(EnsembleModel::new(folds?))
}

/// Full-model finite-difference check on a random instance: toy encoder,
/// all six experts, gated head, label-smoothed loss.
pub fn model_grad_check(
    dim: usize,
    tokens: usize,
    seed: u64,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    use rand::Rng;
    if tokens < 2 {
        return Err(Error::config("gradient check needs at least two tokens"));
    }
    let vocab_size = 12;
    let config = TrainConfig {
        dim,
        filters: 2,
        max_len: tokens,
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = StanceModel::new(config.model_spec(vocab_size), &mut rng)?;
    let mut ids = vec![crate::textpipe::CLS_ID];
    ids.extend((1..tokens).map(|_| rng.random_range(3..vocab_size)));
    let cue: Vec<usize> = vec![1.min(tokens - 1)];
    let contrast: Vec<usize> = (tokens > 3).then_some(tokens - 2).into_iter().collect();
    let gold = Label::from_index(rng.random_range(0..NUM_CLASSES)).expect("class index");
    let alpha = config.label_smoothing;
    let input = ModelInput {
        token_ids: &ids,
        cue: &cue,
        contrast: &contrast,
        embedding: None,
    };
    let loss = |m: &StanceModel| -> Result<f64> {
        label_smoothed_ce(&m.predict(&input)?.logits, gold, alpha)
    };
    let analytic = |m: &mut StanceModel| -> Result<f64> {
        let (out, cache) = m.forward(&input)?;
        let (l, grad) = label_smoothed_ce_with_grad(&out.logits, gold, alpha)?;
        m.backward(&cache, &grad)?;
        Ok(l)
    };
    grad_check(&mut model, loss, analytic, step, tol)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub val_accuracy: f64,
    pub val_macro_f1: f64,
    pub weight: f64,
}

/// JSON training report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub folds: Vec<FoldSummary>,
    /// Which data the ensemble metrics were computed on: "train" or "eval".
    pub ensemble_split: String,
    pub ensemble: MetricsReport,
}

impl TrainingReport {
    pub fn new(ensemble: &EnsembleModel, metrics: MetricsReport, split: &str) -> Self {
        TrainingReport {
            folds: ensemble
                .folds
                .iter()
                .zip(ensemble.weights.iter())
                .map(|(f, &w)| FoldSummary {
                    fold: f.fold,
                    val_accuracy: f.val_report.accuracy,
                    val_macro_f1: f.val_macro_f1,
                    weight: w,
                })
                .collect(),
            ensemble_split: split.to_string(),
            ensemble: metrics,
        }
    }
}
