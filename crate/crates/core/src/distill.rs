//! Pooled-feature distillation between the current and the old model.
//!
//! Each feature map is summarised by its channel means along the width
//! (one vector per row) and along the height (one vector per column). The
//! loss is the squared Euclidean distance between the two models'
//! summaries, summed over layers and averaged over the batch.

use crate::error::{FissError, Result};
use crate::model::ForwardTrace;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSignature {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Mean over the width: `height x channels`.
    pub width_pooled: Vec<f64>,
    /// Mean over the height: `width x channels`.
    pub height_pooled: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PooledSignature {
    pub layers: Vec<LayerSignature>,
}

fn pool_layer(features: &[f64], height: usize, width: usize) -> LayerSignature {
    let channels = features.len() / (height * width);
    let mut width_pooled = vec![0.0; height * channels];
    let mut height_pooled = vec![0.0; width * channels];
    for y in 0..height {
        for x in 0..width {
            let at = (y * width + x) * channels;
            for c in 0..channels {
                let v = features[at + c];
                width_pooled[y * channels + c] += v;
                height_pooled[x * channels + c] += v;
            }
        }
    }
    width_pooled.iter_mut().for_each(|v| *v /= width as f64);
    height_pooled.iter_mut().for_each(|v| *v /= height as f64);
    LayerSignature {
        height,
        width,
        channels,
        width_pooled,
        height_pooled,
    }
}

pub fn pooled_signature(trace: &ForwardTrace) -> PooledSignature {
    let grid = trace.probs.grid;
    PooledSignature {
        layers: trace
            .features
            .iter()
            .map(|f| pool_layer(f, grid.height, grid.width))
            .collect(),
    }
}

fn check_compatible(a: &PooledSignature, b: &PooledSignature) -> Result<()> {
    if a.layers.len() != b.layers.len() {
        return Err(FissError::shape("signatures have different layer counts"));
    }
    for (x, y) in a.layers.iter().zip(&b.layers) {
        if (x.height, x.width, x.channels) != (y.height, y.width, y.channels) {
            return Err(FissError::shape("signature layers differ in size"));
        }
    }
    Ok(())
}

/// Squared distance between two signatures, summed over layers.
pub fn signature_distance(current: &PooledSignature, old: &PooledSignature) -> Result<f64> {
    check_compatible(current, old)?;
    let sq =
        |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum() };
    Ok(current
        .layers
        .iter()
        .zip(&old.layers)
        .map(|(c, o)| sq(&c.width_pooled, &o.width_pooled) + sq(&c.height_pooled, &o.height_pooled))
        .sum())
}

/// Batch mean of [`signature_distance`] between paired traces.
pub fn pod_loss(current: &[ForwardTrace], old: &[ForwardTrace]) -> Result<f64> {
    if current.len() != old.len() {
        return Err(FissError::shape(
            "pod_loss needs one old trace per current trace",
        ));
    }
    if current.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (c, o) in current.iter().zip(old) {
        total += signature_distance(&pooled_signature(c), &pooled_signature(o))?;
    }
    Ok(total / current.len() as f64)
}

/// Gradient of `scale * signature_distance(sig(trace), old)` with respect to
/// each feature map of `trace`.
pub fn pod_feature_grad(
    trace: &ForwardTrace,
    old: &PooledSignature,
    scale: f64,
) -> Result<Vec<Vec<f64>>> {
    let current = pooled_signature(trace);
    check_compatible(&current, old)?;
    let mut grads = Vec::with_capacity(current.layers.len());
    for (cur, o) in current.layers.iter().zip(&old.layers) {
        let (h, w, ch) = (cur.height, cur.width, cur.channels);
        let mut g = vec![0.0; h * w * ch];
        for y in 0..h {
            for x in 0..w {
                let at = (y * w + x) * ch;
                for c in 0..ch {
                    let dw = cur.width_pooled[y * ch + c] - o.width_pooled[y * ch + c];
                    let dh = cur.height_pooled[x * ch + c] - o.height_pooled[x * ch + c];
                    g[at + c] = scale * (2.0 * dw / w as f64 + 2.0 * dh / h as f64);
                }
            }
        }
        grads.push(g);
    }
    Ok(grads)
}
