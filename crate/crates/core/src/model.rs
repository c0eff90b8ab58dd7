//! Tiny per-pixel segmentation network: two 3x3 tanh convolutions followed by
//! a 1x1 linear head that grows by one block of output neurons per task.
//!
//! Parameter order used by [`ModelParams::flatten`]:
//!
//! 1. `conv1.weight` `[c1][ky][kx][in]`
//! 2. `conv1.bias` `[c1]`
//! 3. `conv2.weight` `[c2][ky][kx][c1]`
//! 4. `conv2.bias` `[c2]`
//! 5. `head.weight` `[outputs][c2]`
//! 6. `head.bias` `[outputs]`
//!
//! Convolutions use zero padding, so every feature map keeps the input grid.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{FissError, Result};
use crate::synth_data::{ClassId, GridSize, Image, LabelMap};

pub const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

/// Probability floor applied before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Architecture description; together with a flat vector it fully
/// determines a model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub in_channels: usize,
    pub hidden: [usize; 2],
    /// Number of foreground classes introduced by each head extension.
    pub head_segments: Vec<usize>,
}

impl ModelShape {
    pub fn new(in_channels: usize, hidden: [usize; 2], base_classes: usize) -> Self {
        Self {
            in_channels,
            hidden,
            head_segments: vec![base_classes],
        }
    }

    /// Background plus every foreground class.
    pub fn num_outputs(&self) -> usize {
        1 + self.num_foreground()
    }

    pub fn num_foreground(&self) -> usize {
        self.head_segments.iter().sum()
    }

    /// Task index the head has reached.
    pub fn version(&self) -> usize {
        self.head_segments.len()
    }

    /// 1-based task that introduced `class`; `None` for background or
    /// classes outside the head.
    pub fn task_of_class(&self, class: ClassId) -> Option<usize> {
        if class == 0 {
            return None;
        }
        let mut upper = 0usize;
        for (i, &n) in self.head_segments.iter().enumerate() {
            upper += n;
            if (class as usize) <= upper {
                return Some(i + 1);
            }
        }
        None
    }

    fn block_lens(&self) -> [usize; 6] {
        let [c1, c2] = self.hidden;
        let k = self.num_outputs();
        [
            c1 * TAPS * self.in_channels,
            c1,
            c2 * TAPS * c1,
            c2,
            k * c2,
            k,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.block_lens().iter().sum()
    }
}

/// Per-pixel class distribution, row-major `H x W x classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    pub grid: GridSize,
    pub classes: usize,
    pub data: Vec<f64>,
}

impl ProbMap {
    pub fn pixel(&self, j: usize) -> &[f64] {
        &self.data[j * self.classes..(j + 1) * self.classes]
    }

    pub fn num_pixels(&self) -> usize {
        self.grid.pixels()
    }

    pub fn argmax(&self, j: usize) -> ClassId {
        argmax(self.pixel(j)) as ClassId
    }

    pub fn argmax_map(&self) -> LabelMap {
        LabelMap {
            grid: self.grid,
            data: (0..self.num_pixels()).map(|j| self.argmax(j)).collect(),
        }
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax.
pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Everything a loss may need from one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    /// Post-activation feature maps of both convolutions, `H x W x c`.
    pub features: [Vec<f64>; 2],
    pub logits: Vec<f64>,
    pub probs: ProbMap,
}

/// Upstream gradient of a scalar loss with respect to a forward trace.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceGrad {
    pub logits: Vec<f64>,
    /// Direct gradient on the feature maps (feature distillation).
    pub features: [Option<Vec<f64>>; 2],
}

impl TraceGrad {
    pub fn zeros_like(trace: &ForwardTrace) -> Self {
        Self {
            logits: vec![0.0; trace.logits.len()],
            features: [None, None],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    shape: ModelShape,
    conv1_w: Vec<f64>,
    conv1_b: Vec<f64>,
    conv2_w: Vec<f64>,
    conv2_b: Vec<f64>,
    head_w: Vec<f64>,
    head_b: Vec<f64>,
}

fn gaussian(n: usize, std: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if std == 0.0 {
        return vec![0.0; n];
    }
    let normal = Normal::new(0.0, std).expect("finite positive std");
    (0..n).map(|_| normal.sample(rng)).collect()
}

impl ModelParams {
    /// Gaussian `1/sqrt(fan_in)` weights, zero biases.
    pub fn init(shape: ModelShape, seed: u64) -> Result<Self> {
        validate_shape(&shape)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [c1, c2] = shape.hidden;
        let k = shape.num_outputs();
        let fan1 = (TAPS * shape.in_channels) as f64;
        let fan2 = (TAPS * c1) as f64;
        Ok(Self {
            conv1_w: gaussian(c1 * TAPS * shape.in_channels, fan1.sqrt().recip(), &mut rng),
            conv1_b: vec![0.0; c1],
            conv2_w: gaussian(c2 * TAPS * c1, fan2.sqrt().recip(), &mut rng),
            conv2_b: vec![0.0; c2],
            head_w: gaussian(k * c2, (c2 as f64).sqrt().recip(), &mut rng),
            head_b: vec![0.0; k],
            shape,
        })
    }

    pub fn zeros(shape: ModelShape) -> Result<Self> {
        validate_shape(&shape)?;
        let n = shape.param_count();
        Self::unflatten(&vec![0.0; n], &shape)
    }

    pub fn shape(&self) -> &ModelShape {
        &self.shape
    }

    pub fn num_classes(&self) -> usize {
        self.shape.num_outputs()
    }

    pub fn param_count(&self) -> usize {
        self.shape.param_count()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for block in self.blocks() {
            out.extend_from_slice(block);
        }
        out
    }

    pub fn unflatten(values: &[f64], shape: &ModelShape) -> Result<Self> {
        validate_shape(shape)?;
        if values.len() != shape.param_count() {
            return Err(FissError::shape(format!(
                "flat vector has {} entries, shape needs {}",
                values.len(),
                shape.param_count()
            )));
        }
        let mut rest = values;
        let mut take = |n: usize| {
            let (head, tail) = rest.split_at(n);
            rest = tail;
            head.to_vec()
        };
        let [l0, l1, l2, l3, l4, l5] = shape.block_lens();
        Ok(Self {
            conv1_w: take(l0),
            conv1_b: take(l1),
            conv2_w: take(l2),
            conv2_b: take(l3),
            head_w: take(l4),
            head_b: take(l5),
            shape: shape.clone(),
        })
    }

    fn blocks(&self) -> [&[f64]; 6] {
        [
            &self.conv1_w,
            &self.conv1_b,
            &self.conv2_w,
            &self.conv2_b,
            &self.head_w,
            &self.head_b,
        ]
    }

    /// Appends `k_new` output neurons with `N(0, init_scale^2)` weights and
    /// zero bias. Existing parameters are copied bit for bit.
    pub fn extend_head(&self, k_new: usize, init_scale: f64, seed: u64) -> Result<Self> {
        if k_new == 0 {
            return Err(FissError::config(
                "k_new",
                "head extension needs at least one class",
            ));
        }
        if !(init_scale >= 0.0 && init_scale.is_finite()) {
            return Err(FissError::config(
                "init_scale",
                "must be finite and non-negative",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c2 = self.shape.hidden[1];
        let mut next = self.clone();
        next.shape.head_segments.push(k_new);
        next.head_w
            .extend(gaussian(k_new * c2, init_scale, &mut rng));
        next.head_b.extend(std::iter::repeat_n(0.0, k_new));
        Ok(next)
    }

    pub fn forward(&self, image: &Image) -> Result<ForwardTrace> {
        if image.channels != self.shape.in_channels {
            return Err(FissError::shape(format!(
                "image has {} channels, model expects {}",
                image.channels, self.shape.in_channels
            )));
        }
        if image.data.len() != image.grid.pixels() * image.channels {
            return Err(FissError::shape("image buffer does not match its grid"));
        }
        let grid = image.grid;
        let [c1, c2] = self.shape.hidden;
        let k = self.num_classes();

        let mut a1 = conv_forward(
            &image.data,
            grid,
            image.channels,
            &self.conv1_w,
            &self.conv1_b,
            c1,
        );
        a1.iter_mut().for_each(|v| *v = v.tanh());
        let mut a2 = conv_forward(&a1, grid, c1, &self.conv2_w, &self.conv2_b, c2);
        a2.iter_mut().for_each(|v| *v = v.tanh());

        let px = grid.pixels();
        let mut logits = vec![0.0; px * k];
        let mut probs = vec![0.0; px * k];
        for j in 0..px {
            let feat = &a2[j * c2..(j + 1) * c2];
            let out = &mut logits[j * k..(j + 1) * k];
            for (o, z) in out.iter_mut().enumerate() {
                *z = self.head_b[o] + dot(&self.head_w[o * c2..(o + 1) * c2], feat);
            }
            softmax_into(&logits[j * k..(j + 1) * k], &mut probs[j * k..(j + 1) * k]);
        }
        Ok(ForwardTrace {
            features: [a1, a2],
            logits,
            probs: ProbMap {
                grid,
                classes: k,
                data: probs,
            },
        })
    }

    /// Per-pixel argmax segmentation.
    pub fn predict(&self, image: &Image) -> Result<LabelMap> {
        Ok(self.forward(image)?.probs.argmax_map())
    }

    /// Gradient of a scalar loss with respect to the flat parameter vector,
    /// given the loss's gradient on a trace produced by `forward(image)`.
    pub fn backward(
        &self,
        image: &Image,
        trace: &ForwardTrace,
        grad: &TraceGrad,
    ) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.param_count()];
        self.backward_into(image, trace, grad, &mut out)?;
        Ok(out)
    }

    /// Accumulating form of [`backward`](Self::backward).
    pub fn backward_into(
        &self,
        image: &Image,
        trace: &ForwardTrace,
        grad: &TraceGrad,
        out: &mut [f64],
    ) -> Result<()> {
        let grid = image.grid;
        let px = grid.pixels();
        let [c1, c2] = self.shape.hidden;
        let k = self.num_classes();
        if out.len() != self.param_count() {
            return Err(FissError::shape(
                "gradient buffer length differs from parameter count",
            ));
        }
        if grad.logits.len() != px * k || trace.logits.len() != px * k {
            return Err(FissError::shape("logit gradient does not match the trace"));
        }
        for (layer, g) in grad.features.iter().enumerate() {
            if let Some(g) = g {
                if g.len() != trace.features[layer].len() {
                    return Err(FissError::shape(
                        "feature gradient does not match the trace",
                    ));
                }
            }
        }
        let [l0, l1, l2, l3, l4, _] = self.shape.block_lens();
        let (g_c1w, rest) = out.split_at_mut(l0);
        let (g_c1b, rest) = rest.split_at_mut(l1);
        let (g_c2w, rest) = rest.split_at_mut(l2);
        let (g_c2b, rest) = rest.split_at_mut(l3);
        let (g_hw, g_hb) = rest.split_at_mut(l4);

        let [a1, a2] = &trace.features;
        let mut d_a2 = match &grad.features[1] {
            Some(g) => g.clone(),
            None => vec![0.0; px * c2],
        };
        for j in 0..px {
            let dz = &grad.logits[j * k..(j + 1) * k];
            let feat = &a2[j * c2..(j + 1) * c2];
            let d_feat = &mut d_a2[j * c2..(j + 1) * c2];
            for (o, &g) in dz.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                g_hb[o] += g;
                let row = &self.head_w[o * c2..(o + 1) * c2];
                let g_row = &mut g_hw[o * c2..(o + 1) * c2];
                for c in 0..c2 {
                    g_row[c] += g * feat[c];
                    d_feat[c] += g * row[c];
                }
            }
        }
        for (d, a) in d_a2.iter_mut().zip(a2) {
            *d *= 1.0 - a * a;
        }
        let mut d_a1 = match &grad.features[0] {
            Some(g) => g.clone(),
            None => vec![0.0; px * c1],
        };
        conv_backward(
            a1,
            grid,
            c1,
            &self.conv2_w,
            c2,
            &d_a2,
            g_c2w,
            g_c2b,
            Some(&mut d_a1),
        );
        for (d, a) in d_a1.iter_mut().zip(a1) {
            *d *= 1.0 - a * a;
        }
        conv_backward(
            &image.data,
            grid,
            image.channels,
            &self.conv1_w,
            c1,
            &d_a1,
            g_c1w,
            g_c1b,
            None,
        );
        Ok(())
    }

    /// SHA-256 over the shape header and the little-endian parameters.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&self.shape).expect("shape serializes"));
        for block in self.blocks() {
            for v in block {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    /// Checkpoint layout: `b"FISSCKPT"`, `u32` LE header length, JSON header,
    /// `u64` LE parameter count, then the parameters as `f64` LE.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        let header = CheckpointHeader {
            format: 1,
            version: self.shape.version(),
            param_count: self.param_count(),
            shape: self.shape.clone(),
        };
        let header = serde_json::to_vec(&header)?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        let flat = self.flatten();
        w.write_all(&(flat.len() as u64).to_le_bytes())?;
        for v in flat {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(FissError::Data("not a model checkpoint".into()));
        }
        let mut len4 = [0u8; 4];
        r.read_exact(&mut len4)?;
        let mut header = vec![0u8; u32::from_le_bytes(len4) as usize];
        r.read_exact(&mut header)?;
        let header: CheckpointHeader = serde_json::from_slice(&header)?;
        let mut len8 = [0u8; 8];
        r.read_exact(&mut len8)?;
        let n = u64::from_le_bytes(len8) as usize;
        if n != header.param_count || n != header.shape.param_count() {
            return Err(FissError::shape(
                "checkpoint parameter count disagrees with its shape",
            ));
        }
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)?;
        let flat: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
            .collect();
        Self::unflatten(&flat, &header.shape)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_checkpoint(std::fs::File::open(path)?)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"FISSCKPT";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: u32,
    version: usize,
    param_count: usize,
    shape: ModelShape,
}

fn validate_shape(shape: &ModelShape) -> Result<()> {
    if shape.in_channels == 0 || shape.hidden.contains(&0) {
        return Err(FissError::config(
            "model",
            "channel counts must be positive",
        ));
    }
    if shape.head_segments.is_empty() || shape.head_segments.contains(&0) {
        return Err(FissError::config(
            "model.head_segments",
            "every head segment needs a class",
        ));
    }
    Ok(())
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Copies the zero-padded 3x3 neighbourhood of `(y, x)` in `(ky, kx, c)` order.
#[inline]
fn gather_patch(input: &[f64], grid: GridSize, cin: usize, y: usize, x: usize, patch: &mut [f64]) {
    let mut at = 0;
    for ky in 0..KERNEL {
        let sy = y as isize + ky as isize - 1;
        for kx in 0..KERNEL {
            let sx = x as isize + kx as isize - 1;
            let dst = &mut patch[at..at + cin];
            if sy < 0 || sx < 0 || sy >= grid.height as isize || sx >= grid.width as isize {
                dst.fill(0.0);
            } else {
                let src = (sy as usize * grid.width + sx as usize) * cin;
                dst.copy_from_slice(&input[src..src + cin]);
            }
            at += cin;
        }
    }
}

fn conv_forward(
    input: &[f64],
    grid: GridSize,
    cin: usize,
    w: &[f64],
    b: &[f64],
    cout: usize,
) -> Vec<f64> {
    let plen = TAPS * cin;
    let mut patch = vec![0.0; plen];
    let mut out = vec![0.0; grid.pixels() * cout];
    for y in 0..grid.height {
        for x in 0..grid.width {
            gather_patch(input, grid, cin, y, x, &mut patch);
            let j = y * grid.width + x;
            let dst = &mut out[j * cout..(j + 1) * cout];
            for (o, d) in dst.iter_mut().enumerate() {
                *d = b[o] + dot(&w[o * plen..(o + 1) * plen], &patch);
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    input: &[f64],
    grid: GridSize,
    cin: usize,
    w: &[f64],
    cout: usize,
    d_pre: &[f64],
    g_w: &mut [f64],
    g_b: &mut [f64],
    mut d_input: Option<&mut [f64]>,
) {
    let plen = TAPS * cin;
    let mut patch = vec![0.0; plen];
    let mut d_patch = vec![0.0; plen];
    for y in 0..grid.height {
        for x in 0..grid.width {
            let j = y * grid.width + x;
            let dz = &d_pre[j * cout..(j + 1) * cout];
            if dz.iter().all(|v| *v == 0.0) {
                continue;
            }
            gather_patch(input, grid, cin, y, x, &mut patch);
            d_patch.fill(0.0);
            for (o, &g) in dz.iter().enumerate() {
                g_b[o] += g;
                let g_row = &mut g_w[o * plen..(o + 1) * plen];
                for (gw, p) in g_row.iter_mut().zip(&patch) {
                    *gw += g * p;
                }
                if d_input.is_some() {
                    for (dp, wv) in d_patch.iter_mut().zip(&w[o * plen..(o + 1) * plen]) {
                        *dp += g * wv;
                    }
                }
            }
            if let Some(d_in) = d_input.as_deref_mut() {
                let mut at = 0;
                for ky in 0..KERNEL {
                    let sy = y as isize + ky as isize - 1;
                    for kx in 0..KERNEL {
                        let sx = x as isize + kx as isize - 1;
                        if sy >= 0
                            && sx >= 0
                            && sy < grid.height as isize
                            && sx < grid.width as isize
                        {
                            let dst = (sy as usize * grid.width + sx as usize) * cin;
                            for c in 0..cin {
                                d_in[dst + c] += d_patch[at + c];
                            }
                        }
                        at += cin;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth_data::{generate_dataset, IMAGE_CHANNELS};

    fn shape(classes: usize) -> ModelShape {
        ModelShape::new(IMAGE_CHANNELS, [4, 5], classes)
    }

    fn image(seed: u64) -> Image {
        generate_dataset(3, GridSize::new(8, 8), 1, seed).unwrap()[0]
            .image
            .clone()
    }

    #[test]
    fn zero_head_gives_uniform_probabilities() {
        let p = ModelParams::init(shape(3), 1).unwrap();
        let mut flat = p.flatten();
        let n = flat.len();
        let head = p.shape().num_outputs() * (p.shape().hidden[1] + 1);
        flat[n - head..].fill(0.0);
        let p = ModelParams::unflatten(&flat, p.shape()).unwrap();
        let trace = p.forward(&image(0)).unwrap();
        assert!(trace.probs.data.iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn probabilities_normalize_and_are_deterministic() {
        let p = ModelParams::init(shape(4), 3).unwrap();
        let img = image(2);
        let a = p.forward(&img).unwrap();
        let b = p.forward(&img).unwrap();
        assert_eq!(a, b);
        for j in 0..a.probs.num_pixels() {
            let s: f64 = a.probs.pixel(j).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(a.probs.pixel(j).iter().all(|v| *v > 0.0 && *v < 1.0));
        }
    }

    #[test]
    fn forward_rejects_wrong_channels() {
        let p = ModelParams::init(shape(2), 0).unwrap();
        let img = Image::zeros(GridSize::new(8, 8), 1);
        assert!(matches!(p.forward(&img), Err(FissError::Shape(_))));
    }

    #[test]
    fn flatten_round_trips_bit_exactly() {
        let p = ModelParams::init(shape(3), 9)
            .unwrap()
            .extend_head(2, 0.01, 4)
            .unwrap();
        let flat = p.flatten();
        assert_eq!(flat.len(), p.param_count());
        let q = ModelParams::unflatten(&flat, p.shape()).unwrap();
        assert_eq!(q, p);
        let other = ModelParams::init(p.shape().clone(), 10).unwrap();
        assert_eq!(other.flatten().len(), flat.len());
        assert!(ModelParams::unflatten(&flat[1..], p.shape()).is_err());
    }

    #[test]
    fn head_extension_keeps_old_logits() {
        let p = ModelParams::init(shape(3), 5).unwrap();
        let q = p.extend_head(2, 0.01, 7).unwrap();
        assert_eq!(q.num_classes(), 1 + 3 + 2);
        assert_eq!(q.shape().head_segments, vec![3, 2]);
        let img = image(1);
        let a = p.forward(&img).unwrap();
        let b = q.forward(&img).unwrap();
        for j in 0..a.probs.num_pixels() {
            assert_eq!(&a.logits[j * 4..j * 4 + 4], &b.logits[j * 6..j * 6 + 4]);
        }
        let z = p.extend_head(2, 0.0, 7).unwrap();
        let t = z.forward(&img).unwrap();
        for j in 0..t.probs.num_pixels() {
            assert_eq!(&t.logits[j * 6 + 4..j * 6 + 6], &[0.0, 0.0]);
        }
        let twice = p
            .extend_head(1, 0.01, 1)
            .unwrap()
            .extend_head(1, 0.01, 2)
            .unwrap();
        assert_eq!(twice.num_classes(), q.num_classes());
        assert!(p.extend_head(0, 0.01, 1).is_err());
    }

    #[test]
    fn class_to_task_mapping() {
        let s = ModelShape {
            in_channels: 3,
            hidden: [2, 2],
            head_segments: vec![4, 1, 2],
        };
        assert_eq!(s.task_of_class(0), None);
        assert_eq!(s.task_of_class(4), Some(1));
        assert_eq!(s.task_of_class(5), Some(2));
        assert_eq!(s.task_of_class(7), Some(3));
        assert_eq!(s.task_of_class(8), None);
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradient() {
        let p = ModelParams::init(shape(3), 2).unwrap();
        let img = image(3);
        let trace = p.forward(&img).unwrap();
        let g = p
            .backward(&img, &trace, &TraceGrad::zeros_like(&trace))
            .unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = ModelParams::init(shape(3), 2)
            .unwrap()
            .extend_head(1, 0.01, 3)
            .unwrap();
        let mut buf = Vec::new();
        p.write_checkpoint(&mut buf).unwrap();
        let q = ModelParams::read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.fingerprint(), q.fingerprint());
        buf[0] = b'X';
        assert!(ModelParams::read_checkpoint(buf.as_slice()).is_err());
    }
}
