//! Central finite differences against the analytic objective gradient.
//!
//! Statistics that the objective treats as constants (pseudo labels,
//! gradient scalars and their means, relationship labels) are taken from the
//! unperturbed evaluation and held fixed while the loss is re-evaluated
//! through the public value functions.

use fiss_core::distill::pod_loss;
use fiss_core::losses::{
    class_prototypes, fr_loss, fs_loss, seg_loss, total_objective, BatchItem, FrozenTerms,
    ObjectiveSpec, OldOutputs, PseudoLabeling,
};
use fiss_core::model::{ForwardTrace, ModelParams, ModelShape};
use fiss_core::pseudo_label::compute_thresholds;
use fiss_core::synth_data::{GridSize, Image, LabelMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-4;
/// Denominator floor of the per-entry relative error.
pub const REL_FLOOR: f64 = 1e-6;

pub struct Toy {
    pub old: ModelParams,
    pub current: ModelParams,
    pub images: Vec<Image>,
    pub labels: Vec<LabelMap>,
    pub old_outputs: Vec<OldOutputs>,
    pub old_traces: Vec<ForwardTrace>,
    pub spec: ObjectiveSpec,
}

/// 6x6x3 images; the old model knows background and class 1, the current
/// head adds class 2.
pub fn toy(seed: u64) -> Toy {
    let grid = GridSize::new(6, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let old = ModelParams::init(ModelShape::new(3, [4, 5], 1), seed + 1).unwrap();
    let extended = old.extend_head(1, 0.5, seed + 2).unwrap();
    // drift away from the old model, as local training would
    let drifted: Vec<f64> = extended
        .flatten()
        .into_iter()
        .map(|v| v + rng.random_range(-0.2..0.2))
        .collect();
    let current = ModelParams::unflatten(&drifted, extended.shape()).unwrap();
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..2 {
        let mut img = Image::zeros(grid, 3);
        img.data
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-1.0..1.0));
        let mut l = LabelMap::filled(grid, 0);
        for j in 0..grid.pixels() {
            if rng.random_bool(0.3) {
                l.data[j] = 2;
            }
        }
        images.push(img);
        labels.push(l);
    }
    let old_traces: Vec<ForwardTrace> = images.iter().map(|i| old.forward(i).unwrap()).collect();
    let old_outputs = old_traces.iter().map(OldOutputs::from_trace).collect();
    let refs: Vec<&Image> = images.iter().collect();
    let table = compute_thresholds(&refs, &old, &current, 0.8).unwrap();
    let spec = ObjectiveSpec {
        lambda1: 0.5,
        lambda2: 0.0005,
        balanced: true,
        labeling: PseudoLabeling::Adaptive(table),
        local_old: 1,
        local_new: 1,
    };
    Toy {
        old,
        current,
        images,
        labels,
        old_outputs,
        old_traces,
        spec,
    }
}

impl Toy {
    pub fn batch(&self) -> Vec<BatchItem<'_>> {
        self.images
            .iter()
            .zip(&self.labels)
            .zip(&self.old_outputs)
            .map(|((image, train_label), old)| BatchItem {
                image,
                train_label,
                old: Some(old),
            })
            .collect()
    }

    fn eval(&self, task: usize, l1: f64, l2: f64) -> (Vec<f64>, Option<FrozenTerms>) {
        let spec = ObjectiveSpec {
            lambda1: l1,
            lambda2: l2,
            ..self.spec.clone()
        };
        let e = total_objective(&self.current, &self.batch(), task, &spec).unwrap();
        (e.gradient, e.frozen)
    }

    fn traces(&self, params: &ModelParams) -> Vec<ForwardTrace> {
        self.images
            .iter()
            .map(|i| params.forward(i).unwrap())
            .collect()
    }
}

pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR))
        .fold(0.0, f64::max)
}

fn numeric_gradient(base: &ModelParams, f: impl Fn(&ModelParams) -> f64) -> Vec<f64> {
    let theta = base.flatten();
    let shape = base.shape().clone();
    (0..theta.len())
        .map(|i| {
            let mut p = theta.clone();
            p[i] = theta[i] + EPS;
            let up = f(&ModelParams::unflatten(&p, &shape).unwrap());
            p[i] = theta[i] - EPS;
            let down = f(&ModelParams::unflatten(&p, &shape).unwrap());
            (up - down) / (2.0 * EPS)
        })
        .collect()
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Maximum relative errors for `(seg, fs, fr, pod, total)`.
pub fn check_all(toy: &Toy) -> [(&'static str, f64); 5] {
    let shape = toy.current.shape().clone();

    let (g_seg, _) = toy.eval(1, 0.0, 0.0);
    let n_seg = numeric_gradient(&toy.current, |p| {
        let probs: Vec<_> = toy.traces(p).into_iter().map(|t| t.probs).collect();
        seg_loss(&probs, &toy.labels).unwrap()
    });

    let (g_fs, frozen) = toy.eval(2, 0.0, 0.0);
    let frozen = frozen.unwrap();
    let fs_value = |p: &ModelParams| {
        let probs: Vec<_> = toy.traces(p).into_iter().map(|t| t.probs).collect();
        fs_loss(
            &probs,
            &frozen.pseudo_labels,
            &frozen.scalars,
            &frozen.stats,
            &shape,
        )
        .unwrap()
    };
    let fr_value = |p: &ModelParams| {
        let probs: Vec<_> = toy.traces(p).into_iter().map(|t| t.probs).collect();
        let protos =
            class_prototypes(&probs, &frozen.relationship_labels, &frozen.pseudo_labels).unwrap();
        fr_loss(&protos, &frozen.stats, &shape)
    };
    let pod_value = |p: &ModelParams| pod_loss(&toy.traces(p), &toy.old_traces).unwrap();
    let n_fs = numeric_gradient(&toy.current, fs_value);

    let (g_fr1, _) = toy.eval(2, 1.0, 0.0);
    let g_fr = diff(&g_fr1, &g_fs);
    let n_fr = numeric_gradient(&toy.current, fr_value);

    let (g_pod1, _) = toy.eval(2, 0.0, 1.0);
    let g_pod = diff(&g_pod1, &g_fs);
    let n_pod = numeric_gradient(&toy.current, pod_value);

    let (l1, l2) = (toy.spec.lambda1, toy.spec.lambda2);
    let (g_total, _) = toy.eval(2, l1, l2);
    let n_total = numeric_gradient(&toy.current, |p| {
        fs_value(p) + l1 * fr_value(p) + l2 * pod_value(p)
    });

    [
        ("seg_loss", max_rel_error(&g_seg, &n_seg)),
        ("fs_loss", max_rel_error(&g_fs, &n_fs)),
        ("fr_loss", max_rel_error(&g_fr, &n_fr)),
        ("pod_loss", max_rel_error(&g_pod, &n_pod)),
        ("total_objective", max_rel_error(&g_total, &n_total)),
    ]
}
