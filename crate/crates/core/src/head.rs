//! Context-aware gating over expert outputs and the linear classifier,
//! plus the stacked (additive chain) and fusion (concat + projection)
//! baseline heads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::{ExpertBank, ExpertMask, ExpertOutputs, NUM_EXPERTS};
use crate::numcore::{
    dot, join_path, softmax, softmax_backward, LinearParams, Matrix, ParamView, ParamViewMut,
    Parameters, Vector,
};
use crate::textpipe::NUM_CLASSES;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadVariant {
    #[default]
    Moe,
    Stacked,
    Fusion,
}

/// `W_g`, `b_g`: maps `h_cls` to one logit per active expert.
#[derive(Clone, Debug, PartialEq)]
pub struct GateParams {
    pub linear: LinearParams,
}

/// `W_o`, `b_o`: maps the fused vector to class logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    pub linear: LinearParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput {
    pub gate_weights: Vector,
    pub fused: Vector,
    pub logits: Vector,
    pub probs: Vector,
}

pub fn gate_forward(gp: &GateParams, h_cls: &[f64]) -> Result<Vector> {
    softmax(&gp.linear.forward(h_cls)?)
}

/// `h_moe = Σ g_i e_i`
pub fn fuse(g: &[f64], outputs: &ExpertOutputs) -> Result<Vector> {
    if g.len() != outputs.len() || outputs.is_empty() {
        return Err(Error::Dimension {
            what: "gate weights vs expert outputs".into(),
            expected: outputs.len(),
            found: g.len(),
        });
    }
    let dim = outputs.vectors().next().map_or(0, |v| v.dim());
    let mut fused = Vector::zeros(dim);
    for (&w, e) in g.iter().zip(outputs.vectors()) {
        if e.dim() != dim {
            return Err(Error::Dimension {
                what: "expert output width".into(),
                expected: dim,
                found: e.dim(),
            });
        }
        fused.axpy(w, e);
    }
    Ok(fused)
}

pub fn classify(cp: &ClassifierParams, h: &[f64]) -> Result<(Vector, Vector)> {
    let logits = cp.linear.forward(h)?;
    let probs = softmax(&logits)?;
    Ok((logits, probs))
}

#[derive(Clone, Debug, PartialEq)]
pub enum Head {
    Moe {
        gate: GateParams,
        classifier: ClassifierParams,
    },
    Stacked {
        classifier: ClassifierParams,
    },
    Fusion {
        projection: LinearParams,
        classifier: ClassifierParams,
    },
}

/// Values the head backward pass needs beyond the expert outputs.
#[derive(Clone, Debug)]
pub struct HeadCache {
    gate_weights: Vector,
    fused: Vector,
    concat: Option<Vector>,
}

fn uniform(n: usize) -> Vector {
    Vector::new(vec![1.0 / n as f64; n])
}

impl Head {
    pub fn new(
        variant: HeadVariant,
        dim: usize,
        active: ExpertMask,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let n = active.count();
        if n == 0 {
            return Err(Error::config("at least one expert must be active"));
        }
        if variant != HeadVariant::Moe && !active.is_full() {
            return Err(Error::config(format!(
                "{variant:?} head consumes all six experts; {n} are active"
            )));
        }
        Ok(match variant {
            HeadVariant::Moe => {
                let gate = GateParams {
                    linear: LinearParams::init(n, dim, rng),
                };
                let classifier = ClassifierParams {
                    linear: LinearParams::init(NUM_CLASSES, dim, rng),
                };
                Head::Moe { gate, classifier }
            }
            HeadVariant::Stacked => Head::Stacked {
                classifier: ClassifierParams {
                    linear: LinearParams::init(NUM_CLASSES, dim, rng),
                },
            },
            HeadVariant::Fusion => {
                let projection = LinearParams::init(dim, NUM_EXPERTS * dim, rng);
                let classifier = ClassifierParams {
                    linear: LinearParams::init(NUM_CLASSES, dim, rng),
                };
                Head::Fusion {
                    projection,
                    classifier,
                }
            }
        })
    }

    pub fn variant(&self) -> HeadVariant {
        match self {
            Head::Moe { .. } => HeadVariant::Moe,
            Head::Stacked { .. } => HeadVariant::Stacked,
            Head::Fusion { .. } => HeadVariant::Fusion,
        }
    }

    pub fn classifier(&self) -> &ClassifierParams {
        match self {
            Head::Moe { classifier, .. }
            | Head::Stacked { classifier }
            | Head::Fusion { classifier, .. } => classifier,
        }
    }

    /// Number of gate outputs; baselines report a uniform placeholder over six.
    pub fn gate_dim(&self) -> usize {
        match self {
            Head::Moe { gate, .. } => gate.linear.out_dim(),
            _ => NUM_EXPERTS,
        }
    }

    pub fn forward(
        &self,
        outputs: &ExpertOutputs,
        h_cls: &[f64],
    ) -> Result<(HeadOutput, HeadCache)> {
        let (gate_weights, fused, concat) = match self {
            Head::Moe { gate, .. } => {
                let g = gate_forward(gate, h_cls)?;
                let fused = fuse(&g, outputs)?;
                (g, fused, None)
            }
            Head::Stacked { .. } => {
                if outputs.len() != NUM_EXPERTS {
                    return Err(Error::config("stacked head needs all six expert outputs"));
                }
                // s_0 = 0, s_j = s_{j-1} + e_j
                let dim = outputs.vectors().next().map_or(0, |v| v.dim());
                let mut state = Vector::zeros(dim);
                for e in outputs.vectors() {
                    state.axpy(1.0, e);
                }
                (uniform(NUM_EXPERTS), state, None)
            }
            Head::Fusion { projection, .. } => {
                if outputs.len() != NUM_EXPERTS {
                    return Err(Error::config("fusion head needs all six expert outputs"));
                }
                let concat: Vector = outputs
                    .vectors()
                    .flat_map(|v| v.iter().copied())
                    .collect::<Vec<_>>()
                    .into();
                let fused = projection.forward(&concat)?;
                (uniform(NUM_EXPERTS), fused, Some(concat))
            }
        };
        let (logits, probs) = classify(self.classifier(), &fused)?;
        let cache = HeadCache {
            gate_weights: gate_weights.clone(),
            fused: fused.clone(),
            concat,
        };
        Ok((
            HeadOutput {
                gate_weights,
                fused,
                logits,
                probs,
            },
            cache,
        ))
    }

    /// Returns `∂L/∂e_i` for each expert output and `∂L/∂h_cls`.
    pub fn backward(
        &mut self,
        cache: &HeadCache,
        outputs: &ExpertOutputs,
        h_cls: &[f64],
        grad_logits: &[f64],
    ) -> (Vec<Vector>, Vector) {
        let dim = cache.fused.dim();
        match self {
            Head::Moe { gate, classifier } => {
                let g_fused = classifier.linear.backward(&cache.fused, grad_logits);
                let g = &cache.gate_weights;
                let grad_experts = g.iter().map(|&w| {
                    let mut v = g_fused.clone();
                    v.iter_mut().for_each(|x| *x *= w);
                    v
                });
                let grad_experts: Vec<Vector> = grad_experts.collect();
                let grad_g: Vec<f64> = outputs.vectors().map(|e| dot(e, &g_fused)).collect();
                let grad_z = softmax_backward(g, &grad_g);
                let grad_cls = gate.linear.backward(h_cls, &grad_z);
                (grad_experts, grad_cls)
            }
            Head::Stacked { classifier } => {
                let g_fused = classifier.linear.backward(&cache.fused, grad_logits);
                (vec![g_fused; outputs.len()], Vector::zeros(h_cls.len()))
            }
            Head::Fusion {
                projection,
                classifier,
            } => {
                let g_fused = classifier.linear.backward(&cache.fused, grad_logits);
                let concat = cache
                    .concat
                    .as_ref()
                    .expect("fusion cache holds concat input");
                let g_concat = projection.backward(concat, &g_fused);
                let grads = g_concat
                    .chunks(dim)
                    .map(|c| Vector::new(c.to_vec()))
                    .collect();
                (grads, Vector::zeros(h_cls.len()))
            }
        }
    }
}

impl Parameters for Head {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a>>) {
        match self {
            Head::Moe { gate, classifier } => {
                gate.linear.params(&join_path(prefix, "gate"), out);
                classifier
                    .linear
                    .params(&join_path(prefix, "classifier"), out);
            }
            Head::Stacked { classifier } => {
                classifier
                    .linear
                    .params(&join_path(prefix, "classifier"), out);
            }
            Head::Fusion {
                projection,
                classifier,
            } => {
                projection.params(&join_path(prefix, "fusion"), out);
                classifier
                    .linear
                    .params(&join_path(prefix, "classifier"), out);
            }
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a>>) {
        match self {
            Head::Moe { gate, classifier } => {
                gate.linear.params_mut(&join_path(prefix, "gate"), out);
                classifier
                    .linear
                    .params_mut(&join_path(prefix, "classifier"), out);
            }
            Head::Stacked { classifier } => {
                classifier
                    .linear
                    .params_mut(&join_path(prefix, "classifier"), out);
            }
            Head::Fusion {
                projection,
                classifier,
            } => {
                projection.params_mut(&join_path(prefix, "fusion"), out);
                classifier
                    .linear
                    .params_mut(&join_path(prefix, "classifier"), out);
            }
        }
    }
}

fn forward_baseline(
    head: &Head,
    bank: &ExpertBank,
    h: &Matrix,
    cue: &[usize],
    contrast: &[usize],
    h_cls: &[f64],
) -> Result<HeadOutput> {
    if !bank.mask().is_full() {
        return Err(Error::config("baseline heads need all six experts active"));
    }
    let (outputs, _) = bank.forward(h, cue, contrast, ExpertMask::all())?;
    head.forward(&outputs, h_cls).map(|(o, _)| o)
}

/// Residual additive chain `s_j = s_{j-1} + e_j` over the six experts, then the classifier.
pub fn stacked_forward(
    head: &Head,
    bank: &ExpertBank,
    h: &Matrix,
    cue: &[usize],
    contrast: &[usize],
    h_cls: &[f64],
) -> Result<HeadOutput> {
    if head.variant() != HeadVariant::Stacked {
        return Err(Error::config("stacked_forward needs a stacked head"));
    }
    forward_baseline(head, bank, h, cue, contrast, h_cls)
}

/// Concatenation of the six experts, one linear projection, then the classifier.
pub fn fusion_forward(
    head: &Head,
    bank: &ExpertBank,
    h: &Matrix,
    cue: &[usize],
    contrast: &[usize],
    h_cls: &[f64],
) -> Result<HeadOutput> {
    if head.variant() != HeadVariant::Fusion {
        return Err(Error::config("fusion_forward needs a fusion head"));
    }
    forward_baseline(head, bank, h, cue, contrast, h_cls)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experts::ExpertKind;
    use crate::numcore::argmax;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn outputs(vs: &[Vec<f64>]) -> ExpertOutputs {
        ExpertOutputs::new(
            ExpertKind::ALL
                .iter()
                .zip(vs)
                .map(|(&k, v)| (k, Vector::new(v.clone())))
                .collect(),
        )
    }

    fn zero_gate(n: usize, dim: usize) -> GateParams {
        GateParams {
            linear: LinearParams::zeros(n, dim),
        }
    }

    #[test]
    fn gate_examples() {
        let g = gate_forward(&zero_gate(6, 4), &[0.3, -1.0, 2.0, 0.0]).unwrap();
        assert!(g.iter().all(|&w| (w - 1.0 / 6.0).abs() < 1e-15));

        let mut gp = zero_gate(6, 4);
        gp.linear.bias[0] = 2f64.ln();
        let g = gate_forward(&gp, &[1.0; 4]).unwrap();
        assert!((g[0] - 2.0 / 7.0).abs() < 1e-12);
        assert!((g[0] - 0.2857).abs() < 1e-4);
        assert!(g[1..].iter().all(|&w| (w - 1.0 / 7.0).abs() < 1e-12));

        let g = gate_forward(&zero_gate(5, 4), &[1.0; 4]).unwrap();
        assert_eq!(g.dim(), 5);
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        assert!(gate_forward(&zero_gate(6, 4), &[1.0; 3]).is_err());
    }

    #[test]
    fn fuse_examples() {
        let es: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, -(i as f64)]).collect();
        let out = outputs(&es);
        let mut g = vec![0.0; 6];
        g[2] = 1.0;
        assert_eq!(fuse(&g, &out).unwrap().as_slice(), &[2.0, -2.0]);

        let same = outputs(&vec![vec![0.4, 1.5]; 6]);
        let g = [0.1, 0.2, 0.3, 0.15, 0.05, 0.2];
        let f = fuse(&g, &same).unwrap();
        assert!((f[0] - 0.4).abs() < 1e-15 && (f[1] - 1.5).abs() < 1e-15);

        let two = ExpertOutputs::new(vec![
            (ExpertKind::Mean, vec![2.0, 0.0].into()),
            (ExpertKind::Max, vec![0.0, 2.0].into()),
        ]);
        assert_eq!(fuse(&[0.5, 0.5], &two).unwrap().as_slice(), &[1.0, 1.0]);
        assert!(fuse(&[1.0], &two).is_err());
    }

    #[test]
    fn classify_examples() {
        let cp = ClassifierParams {
            linear: LinearParams::zeros(3, 4),
        };
        let (_, p) = classify(&cp, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(p.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));

        let mut cp = cp;
        cp.linear.bias = vec![10.0, 0.0, 0.0].into();
        let (logits, p) = classify(&cp, &[0.0; 4]).unwrap();
        assert_eq!(argmax(&logits), 0);
        assert!(p[0] > 0.9999);

        let shifted: Vec<f64> = logits.iter().map(|v| v + 123.0).collect();
        let p2 = softmax(&shifted).unwrap();
        assert!(p.iter().zip(p2.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(classify(&cp, &[0.0; 3]).is_err());
    }

    fn full_bank(dim: usize, seed: u64) -> ExpertBank {
        ExpertBank::new(dim, 2, 3.0, 1e-8, ExpertMask::all(), &mut rng(seed)).unwrap()
    }

    #[test]
    fn stacked_examples() {
        let mut head = Head::new(HeadVariant::Stacked, 3, ExpertMask::all(), &mut rng(1)).unwrap();
        if let Head::Stacked { classifier } = &mut head {
            classifier.linear.bias.fill(0.0);
        }
        let zeros = outputs(&vec![vec![0.0; 3]; 6]);
        let (o, _) = head.forward(&zeros, &[0.0; 3]).unwrap();
        assert!(o.probs.iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));

        let mut es = vec![vec![0.0; 3]; 6];
        es[0] = vec![1.0, -2.0, 0.5];
        let (o, _) = head.forward(&outputs(&es), &[0.0; 3]).unwrap();
        assert_eq!(o.fused.as_slice(), &[1.0, -2.0, 0.5]);

        let bank = full_bank(3, 2);
        let h = Matrix::uniform(5, 3, 1.0, &mut rng(3));
        let (cue, con) = (vec![1], vec![2]);
        let o = stacked_forward(&head, &bank, &h, &cue, &con, h.row(0)).unwrap();
        let all = run_all(&bank, &h, &cue, &con);
        let mut sum = [0.0; 3];
        for e in all.vectors() {
            for j in 0..3 {
                sum[j] += e[j];
            }
        }
        assert!(o.fused.iter().zip(sum).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(o
            .gate_weights
            .iter()
            .all(|&w| (w - 1.0 / 6.0).abs() < 1e-15));
    }

    fn run_all(bank: &ExpertBank, h: &Matrix, cue: &[usize], con: &[usize]) -> ExpertOutputs {
        crate::experts::run_all_experts(bank, h, cue, con, ExpertMask::all()).unwrap()
    }

    #[test]
    fn fusion_examples() {
        let mut head = Head::new(HeadVariant::Fusion, 2, ExpertMask::all(), &mut rng(4)).unwrap();
        let zeros = outputs(&vec![vec![0.0; 2]; 6]);
        let (o, _) = head.forward(&zeros, &[0.0; 2]).unwrap();
        let Head::Fusion { projection, .. } = &head else {
            unreachable!()
        };
        assert_eq!(o.fused.as_slice(), projection.bias.as_slice());

        // block-identity averaging = uniform-gate MoE
        if let Head::Fusion { projection, .. } = &mut head {
            let mut w = Matrix::zeros(2, 12);
            for block in 0..6 {
                for i in 0..2 {
                    w[(i, block * 2 + i)] = 1.0 / 6.0;
                }
            }
            *projection = LinearParams::new(w, Vector::zeros(2)).unwrap();
        }
        let es: Vec<Vec<f64>> = (0..6)
            .map(|i| vec![i as f64 * 0.5, 1.0 - i as f64])
            .collect();
        let out = outputs(&es);
        let (o, _) = head.forward(&out, &[0.0; 2]).unwrap();
        let moe = fuse(&[1.0 / 6.0; 6], &out).unwrap();
        assert!(o
            .fused
            .iter()
            .zip(moe.iter())
            .all(|(a, b)| (a - b).abs() < 1e-12));

        // straight-line concat + project
        let head = Head::new(HeadVariant::Fusion, 3, ExpertMask::all(), &mut rng(5)).unwrap();
        let bank = full_bank(3, 6);
        let h = Matrix::uniform(4, 3, 1.0, &mut rng(7));
        let o = fusion_forward(&head, &bank, &h, &[1], &[], h.row(0)).unwrap();
        let all = run_all(&bank, &h, &[1], &[]);
        let concat: Vec<f64> = all.vectors().flat_map(|v| v.iter().copied()).collect();
        let Head::Fusion { projection, .. } = &head else {
            unreachable!()
        };
        for i in 0..3 {
            let mut want = projection.bias[i];
            for (j, c) in concat.iter().enumerate() {
                want += projection.weight[(i, j)] * c;
            }
            assert!((o.fused[i] - want).abs() < 1e-12);
        }
        assert!(stacked_forward(&head, &bank, &h, &[], &[], h.row(0)).is_err());
    }

    #[test]
    fn baselines_need_all_experts() {
        let mask = ExpertMask::without(ExpertKind::Max);
        assert!(Head::new(HeadVariant::Stacked, 3, mask, &mut rng(1)).is_err());
        assert!(Head::new(HeadVariant::Fusion, 3, mask, &mut rng(1)).is_err());
        let moe = Head::new(HeadVariant::Moe, 3, mask, &mut rng(1)).unwrap();
        assert_eq!(moe.gate_dim(), 5);
    }

    proptest! {
        #[test]
        fn one_hot_gate_selects_expert(seed in 0u64..500, pick in 0usize..6) {
            let dim = 4;
            let mut r = rng(seed);
            let es: Vec<Vec<f64>> = (0..6).map(|_| (0..dim).map(|_| r.random_range(-2.0..2.0)).collect()).collect();
            let out = outputs(&es);
            let mut g = vec![0.0; 6];
            g[pick] = 1.0;
            let cp = ClassifierParams { linear: LinearParams::init(3, dim, &mut r) };
            let (via_moe, _) = classify(&cp, &fuse(&g, &out).unwrap()).unwrap();
            let (direct, _) = classify(&cp, &es[pick]).unwrap();
            prop_assert_eq!(via_moe, direct);
        }

        #[test]
        fn fused_in_convex_hull(seed in 0u64..500) {
            let mut r = rng(seed);
            let es: Vec<Vec<f64>> = (0..6).map(|_| (0..3).map(|_| r.random_range(-5.0..5.0)).collect()).collect();
            let gp = GateParams { linear: LinearParams::init(6, 3, &mut r) };
            let cls: Vec<f64> = (0..3).map(|_| r.random_range(-3.0..3.0)).collect();
            let g = gate_forward(&gp, &cls).unwrap();
            let f = fuse(&g, &outputs(&es)).unwrap();
            for j in 0..3 {
                let lo = es.iter().map(|e| e[j]).fold(f64::INFINITY, f64::min);
                let hi = es.iter().map(|e| e[j]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(f[j] >= lo - 1e-12 && f[j] <= hi + 1e-12);
            }
        }

        #[test]
        fn logit_shift_keeps_argmax(logits in prop::collection::vec(-20f64..20.0, 3), c in -1e3f64..1e3) {
            let shifted: Vec<f64> = logits.iter().map(|v| v + c).collect();
            let a = softmax(&logits).unwrap();
            let b = softmax(&shifted).unwrap();
            prop_assert_eq!(argmax(&a), argmax(&b));
        }
    }
}
