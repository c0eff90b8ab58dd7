//! Total training objective with its analytic parameter gradient.

use serde::Serialize;

use super::{
    adaptive_gradient_scalar, class_prototypes, cross_entropy, fr_class_weight, fs_weights,
    gradient_means, gradient_scalar, kl_divergence, relationship_label, GradientStats,
};
use crate::distill::{pod_feature_grad, pooled_signature, signature_distance, PooledSignature};
use crate::error::{FissError, Result};
use crate::model::{ForwardTrace, ModelParams, ProbMap, TraceGrad, PROB_FLOOR};
use crate::pseudo_label::{
    constant_threshold_pseudo_labels, generate_pseudo_labels, ProvenanceCounts, PseudoLabelMap,
    ThresholdTable,
};
use crate::synth_data::{Image, LabelMap};

/// Upper edges of the semantic weight histogram; the last bin is open.
pub const WEIGHT_BINS: [f64; 4] = [0.5, 1.0, 1.5, 2.0];

/// How background pixels are turned into old-class pseudo labels.
#[derive(Clone, Debug, PartialEq)]
pub enum PseudoLabeling {
    /// Per-class entropy thresholds.
    Adaptive(ThresholdTable),
    /// Fixed old-model confidence.
    Constant(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveSpec {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Reweight the semantic term by gradient scalars; plain cross-entropy
    /// on pseudo labels otherwise.
    pub balanced: bool,
    pub labeling: PseudoLabeling,
    /// Classes the client learned before its current task.
    pub local_old: usize,
    /// Classes in the client's current label space.
    pub local_new: usize,
}

/// Old-model outputs for one sample; computed once per round.
#[derive(Clone, Debug, PartialEq)]
pub struct OldOutputs {
    pub probs: ProbMap,
    pub signature: PooledSignature,
}

impl OldOutputs {
    pub fn from_trace(trace: &ForwardTrace) -> Self {
        Self {
            probs: trace.probs.clone(),
            signature: pooled_signature(trace),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BatchItem<'a> {
    pub image: &'a Image,
    pub train_label: &'a LabelMap,
    pub old: Option<&'a OldOutputs>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Segmentation or compensated semantic term.
    pub semantic: f64,
    pub relation: f64,
    pub distill: f64,
    pub provenance: ProvenanceCounts,
    /// Pixel counts per [`WEIGHT_BINS`] bucket of the semantic weights.
    pub weight_histogram: [usize; 5],
}

/// Quantities held constant while differentiating, exposed so gradients can
/// be checked against finite differences.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenTerms {
    pub pseudo_labels: Vec<LabelMap>,
    pub scalars: Vec<Vec<f64>>,
    pub stats: GradientStats,
    pub relationship_labels: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct ObjectiveEval {
    pub breakdown: LossBreakdown,
    pub gradient: Vec<f64>,
    /// `None` for the plain segmentation branch.
    pub frozen: Option<FrozenTerms>,
}

fn histogram(weights: &[Vec<f64>]) -> [usize; 5] {
    let mut h = [0usize; 5];
    for w in weights.iter().flatten() {
        let bin = WEIGHT_BINS.iter().position(|edge| w < edge).unwrap_or(4);
        h[bin] += 1;
    }
    h
}

/// Adds `scale * w_j * d(-ln p_y)/dz` to the logit gradient.
fn add_ce_grad(grad: &mut [f64], probs: &ProbMap, labels: &LabelMap, weights: &[f64], scale: f64) {
    let c = probs.classes;
    for (j, &y) in labels.data.iter().enumerate() {
        let p = probs.pixel(j);
        let w = weights[j] * scale;
        let g = &mut grad[j * c..(j + 1) * c];
        for k in 0..c {
            g[k] += w * p[k];
        }
        g[y as usize] -= w;
    }
}

/// Plain segmentation loss on the training labels, with gradient.
fn segmentation_branch(params: &ModelParams, batch: &[BatchItem]) -> Result<ObjectiveEval> {
    let b = batch.len() as f64;
    let mut gradient = vec![0.0; params.param_count()];
    let mut loss = 0.0;
    let mut pixels = 0;
    for item in batch {
        let trace = params.forward(item.image)?;
        let probs = &trace.probs;
        if item.train_label.data.len() != probs.num_pixels() {
            return Err(FissError::shape("label map and image differ in size"));
        }
        for (j, &y) in item.train_label.data.iter().enumerate() {
            if y as usize >= probs.classes {
                return Err(FissError::Data(format!("label {y} outside the model head")));
            }
            loss += cross_entropy(probs.pixel(j)[y as usize]);
        }
        pixels += probs.num_pixels();
        let mut tg = TraceGrad::zeros_like(&trace);
        let ones = vec![1.0; probs.num_pixels()];
        add_ce_grad(&mut tg.logits, probs, item.train_label, &ones, 1.0 / b);
        params.backward_into(item.image, &trace, &tg, &mut gradient)?;
    }
    let semantic = loss / b;
    Ok(ObjectiveEval {
        breakdown: LossBreakdown {
            total: semantic,
            semantic,
            weight_histogram: [0, pixels, 0, 0, 0],
            ..Default::default()
        },
        gradient,
        frozen: None,
    })
}

/// Value and parameter gradient of the training objective on one batch.
///
/// Task 1 uses cross-entropy on the training labels. Later tasks use the
/// compensated semantic term on pseudo labels plus `lambda1` times the
/// relation term and `lambda2` times feature distillation, which needs old
/// outputs for every item.
pub fn total_objective(
    params: &ModelParams,
    batch: &[BatchItem],
    task_index: usize,
    spec: &ObjectiveSpec,
) -> Result<ObjectiveEval> {
    if batch.is_empty() {
        return Err(FissError::Data("empty batch".into()));
    }
    if task_index <= 1 {
        return segmentation_branch(params, batch);
    }
    let olds: Vec<&OldOutputs> = batch
        .iter()
        .map(|it| {
            it.old.ok_or_else(|| {
                FissError::Protocol(format!("task {task_index} objective needs the old model"))
            })
        })
        .collect::<Result<_>>()?;
    let shape = params.shape();
    let classes = params.num_classes();
    let num_old = olds[0].probs.classes - 1;
    if olds.iter().any(|o| o.probs.classes != num_old + 1) || num_old + 1 > classes {
        return Err(FissError::shape(
            "old model outputs do not fit the current head",
        ));
    }

    let traces: Vec<ForwardTrace> = batch
        .iter()
        .map(|it| params.forward(it.image))
        .collect::<Result<_>>()?;
    let probs: Vec<ProbMap> = traces.iter().map(|t| t.probs.clone()).collect();

    let mut provenance = ProvenanceCounts::default();
    let mut pseudo = Vec::with_capacity(batch.len());
    for ((it, old), p) in batch.iter().zip(&olds).zip(&probs) {
        let map: PseudoLabelMap = match &spec.labeling {
            PseudoLabeling::Adaptive(table) => {
                generate_pseudo_labels(it.train_label, &old.probs, p, table)?
            }
            PseudoLabeling::Constant(th) => {
                constant_threshold_pseudo_labels(it.train_label, &old.probs, *th)?
            }
        };
        provenance += map.counts();
        pseudo.push(map.labels);
    }

    let mut scalars = Vec::with_capacity(batch.len());
    for (p, l) in probs.iter().zip(&pseudo) {
        let mut s = Vec::with_capacity(l.data.len());
        for (j, &y) in l.data.iter().enumerate() {
            if y as usize >= classes {
                return Err(FissError::Data(format!("label {y} outside the model head")));
            }
            let is_old = y != 0 && (y as usize) <= num_old;
            if is_old && spec.local_old == 0 {
                return Err(FissError::Protocol(
                    "old-class pixel on a client without previously learned classes".into(),
                ));
            }
            let gamma = gradient_scalar(p.pixel(j)[y as usize]);
            s.push(adaptive_gradient_scalar(
                gamma,
                y,
                num_old,
                spec.local_old,
                spec.local_new,
            ));
        }
        scalars.push(s);
    }
    let stats = gradient_means(&scalars, &pseudo, shape)?;

    let weights: Vec<Vec<f64>> = if spec.balanced {
        scalars
            .iter()
            .zip(&pseudo)
            .map(|(s, l)| fs_weights(s, l, &stats, shape))
            .collect()
    } else {
        pseudo.iter().map(|l| vec![1.0; l.data.len()]).collect()
    };

    let relationship_labels: Vec<Vec<f64>> = pseudo
        .iter()
        .zip(&olds)
        .map(|(l, old)| {
            l.data
                .iter()
                .enumerate()
                .flat_map(|(j, &y)| relationship_label(y, old.probs.pixel(j), classes))
                .collect()
        })
        .collect();

    let b = batch.len() as f64;
    let mut logit_grads: Vec<Vec<f64>> = traces.iter().map(|t| vec![0.0; t.logits.len()]).collect();

    let mut semantic = 0.0;
    for (((p, l), w), g) in probs
        .iter()
        .zip(&pseudo)
        .zip(&weights)
        .zip(logit_grads.iter_mut())
    {
        for (j, &y) in l.data.iter().enumerate() {
            semantic += w[j] * cross_entropy(p.pixel(j)[y as usize]);
        }
        add_ce_grad(g, p, l, w, 1.0 / b);
    }
    semantic /= b;

    let mut relation = 0.0;
    if spec.lambda1 != 0.0 {
        let protos = class_prototypes(&probs, &relationship_labels, &pseudo)?;
        let k_total = shape.num_foreground().max(1) as f64;
        // Upstream gradient on each prototype, already divided by Z_k.
        let mut proto_grads = vec![None; classes];
        for (&k, proto) in &protos.classes {
            let w = fr_class_weight(k, &stats, shape);
            relation += w * kl_divergence(&proto.prob, &proto.label);
            let coef = spec.lambda1 * w / (k_total * proto.count as f64);
            let psum: f64 = proto.prob.iter().map(|v| v.max(PROB_FLOOR)).sum();
            let qf: Vec<f64> = proto.label.iter().map(|v| v.max(PROB_FLOOR)).collect();
            let qsum: f64 = qf.iter().sum();
            let g: Vec<f64> = proto
                .prob
                .iter()
                .zip(&qf)
                .map(|(pv, qv)| coef * ((pv.max(PROB_FLOOR) / psum) / (qv / qsum)).ln())
                .collect();
            proto_grads[k as usize] = Some(g);
        }
        relation /= k_total;
        for ((p, l), g) in probs.iter().zip(&pseudo).zip(logit_grads.iter_mut()) {
            let c = p.classes;
            for (j, &y) in l.data.iter().enumerate() {
                let Some(up) = &proto_grads[y as usize] else {
                    continue;
                };
                let pj = p.pixel(j);
                let dot: f64 = up.iter().zip(pj).map(|(a, b)| a * b).sum();
                for k in 0..c {
                    g[j * c + k] += pj[k] * (up[k] - dot);
                }
            }
        }
    }

    let mut distill = 0.0;
    let mut feature_grads: Vec<[Option<Vec<f64>>; 2]> = vec![[None, None]; batch.len()];
    if spec.lambda2 != 0.0 {
        for ((t, old), fg) in traces.iter().zip(&olds).zip(feature_grads.iter_mut()) {
            distill += signature_distance(&pooled_signature(t), &old.signature)?;
            let mut grads = pod_feature_grad(t, &old.signature, spec.lambda2 / b)?.into_iter();
            *fg = [grads.next(), grads.next()];
        }
        distill /= b;
    }

    let mut gradient = vec![0.0; params.param_count()];
    for (((it, t), lg), fg) in batch
        .iter()
        .zip(&traces)
        .zip(logit_grads)
        .zip(feature_grads)
    {
        let tg = TraceGrad {
            logits: lg,
            features: fg,
        };
        params.backward_into(it.image, t, &tg, &mut gradient)?;
    }

    let total = semantic + spec.lambda1 * relation + spec.lambda2 * distill;
    Ok(ObjectiveEval {
        breakdown: LossBreakdown {
            total,
            semantic,
            relation,
            distill,
            provenance,
            weight_histogram: histogram(&weights),
        },
        gradient,
        frozen: Some(FrozenTerms {
            pseudo_labels: pseudo,
            scalars,
            stats,
            relationship_labels,
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{fs_loss, seg_loss};
    use crate::model::ModelShape;
    use crate::synth_data::{GridSize, LabelMap};

    fn image(seed: u64) -> Image {
        let grid = GridSize::new(4, 4);
        let mut img = Image::zeros(grid, 3);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (((i as u64 + 1) * (seed + 7)) % 13) as f64 / 13.0;
        }
        img
    }

    fn setup() -> (ModelParams, ModelParams, Vec<Image>, Vec<LabelMap>) {
        let old = ModelParams::init(ModelShape::new(3, [3, 4], 2), 5).unwrap();
        let cur = old.extend_head(1, 0.3, 9).unwrap();
        let imgs = vec![image(1), image(2)];
        let mut l = LabelMap::filled(GridSize::new(4, 4), 0);
        l.data[5] = 3;
        l.data[6] = 3;
        (old, cur, imgs, vec![l.clone(), l])
    }

    fn spec(l1: f64, l2: f64) -> ObjectiveSpec {
        ObjectiveSpec {
            lambda1: l1,
            lambda2: l2,
            balanced: true,
            labeling: PseudoLabeling::Constant(0.0),
            local_old: 2,
            local_new: 1,
        }
    }

    #[test]
    fn task_one_equals_seg_loss() {
        let (_, cur, imgs, labels) = setup();
        let batch: Vec<BatchItem> = imgs
            .iter()
            .zip(&labels)
            .map(|(i, l)| BatchItem {
                image: i,
                train_label: l,
                old: None,
            })
            .collect();
        let eval = total_objective(&cur, &batch, 1, &spec(0.5, 0.0005)).unwrap();
        let probs: Vec<ProbMap> = imgs.iter().map(|i| cur.forward(i).unwrap().probs).collect();
        assert_eq!(eval.breakdown.total, seg_loss(&probs, &labels).unwrap());
    }

    #[test]
    fn missing_old_model_is_a_protocol_error() {
        let (_, cur, imgs, labels) = setup();
        let batch = [BatchItem {
            image: &imgs[0],
            train_label: &labels[0],
            old: None,
        }];
        assert!(matches!(
            total_objective(&cur, &batch, 2, &spec(0.5, 0.0005)),
            Err(FissError::Protocol(_))
        ));
    }

    #[test]
    fn zero_lambdas_reduce_to_fs_loss() {
        let (old, cur, imgs, labels) = setup();
        let olds: Vec<OldOutputs> = imgs
            .iter()
            .map(|i| OldOutputs::from_trace(&old.forward(i).unwrap()))
            .collect();
        let batch: Vec<BatchItem> = imgs
            .iter()
            .zip(&labels)
            .zip(&olds)
            .map(|((i, l), o)| BatchItem {
                image: i,
                train_label: l,
                old: Some(o),
            })
            .collect();
        let eval = total_objective(&cur, &batch, 2, &spec(0.0, 0.0)).unwrap();
        let frozen = eval.frozen.unwrap();
        let probs: Vec<ProbMap> = imgs.iter().map(|i| cur.forward(i).unwrap().probs).collect();
        let fs = fs_loss(
            &probs,
            &frozen.pseudo_labels,
            &frozen.scalars,
            &frozen.stats,
            cur.shape(),
        )
        .unwrap();
        assert!((eval.breakdown.total - fs).abs() < 1e-12);
        // threshold 0 turns every background pixel into its old argmax class
        assert_eq!(eval.breakdown.provenance.kept, 4);
        let hist: usize = eval.breakdown.weight_histogram.iter().sum();
        assert_eq!(hist, 32);
    }

    #[test]
    fn client_without_old_classes_rejects_old_pixels() {
        let (old, cur, imgs, labels) = setup();
        let o = OldOutputs::from_trace(&old.forward(&imgs[0]).unwrap());
        let batch = [BatchItem {
            image: &imgs[0],
            train_label: &labels[0],
            old: Some(&o),
        }];
        let mut s = spec(0.5, 0.0);
        s.local_old = 0;
        let r = total_objective(&cur, &batch, 2, &s);
        // an old model with random weights labels some background as old classes
        if o.probs.argmax_map().data.iter().any(|&k| k != 0) {
            assert!(matches!(r, Err(FissError::Protocol(_))));
        }
    }
}
