//! Synthetic segmentation data: class rendering, incremental task pools,
//! background-shift relabeling and Non-IID client partitioning.
//!
//! Every foreground class is drawn as a parametric shape with a per-class
//! colour signature. Images carry one to three foreground objects over a
//! dim, noisy background. Everything here is a pure function of its
//! arguments and seed.

use std::collections::BTreeSet;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FissError, Result};

pub type ClassId = u16;

/// Number of input channels of every generated image.
pub const IMAGE_CHANNELS: usize = 3;

/// Largest class id the renderer can produce.
pub const MAX_CLASSES: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridSize {
    pub height: usize,
    pub width: usize,
}

impl GridSize {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// Row-major `H x W x C` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub grid: GridSize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(grid: GridSize, channels: usize) -> Self {
        Self {
            grid,
            channels,
            data: vec![0.0; grid.pixels() * channels],
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let at = (y * self.grid.width + x) * self.channels;
        &self.data[at..at + self.channels]
    }
}

/// Row-major `H x W` integer label map. Class 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub grid: GridSize,
    pub data: Vec<ClassId>,
}

impl LabelMap {
    pub fn filled(grid: GridSize, value: ClassId) -> Self {
        Self {
            grid,
            data: vec![value; grid.pixels()],
        }
    }

    /// Distinct classes present in the map, background included.
    pub fn classes(&self) -> BTreeSet<ClassId> {
        self.data.iter().copied().collect()
    }

    pub fn contains(&self, class: ClassId) -> bool {
        self.data.contains(&class)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    /// Full annotation over `{0..K_total}`.
    pub gt_label: LabelMap,
    /// Annotation as seen by a training client: invisible classes are 0.
    pub train_label: LabelMap,
}

/// One incremental task: its index (1-based) and the classes it introduces.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub index: usize,
    pub new_classes: Vec<ClassId>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSchedule {
    pub tasks: Vec<TaskSpec>,
}

impl TaskSchedule {
    /// Consecutive class ids: `[4, 1, 1]` gives `{1..4}`, `{5}`, `{6}`.
    pub fn from_counts(counts: &[usize]) -> Result<Self> {
        if counts.is_empty() {
            return Err(FissError::config(
                "schedule",
                "at least one task is required",
            ));
        }
        let total: usize = counts.iter().sum();
        if total > MAX_CLASSES {
            return Err(FissError::config(
                "schedule",
                format!("{total} classes exceed the generator budget of {MAX_CLASSES}"),
            ));
        }
        let mut next: ClassId = 1;
        let mut tasks = Vec::with_capacity(counts.len());
        for (i, &count) in counts.iter().enumerate() {
            if count == 0 {
                return Err(FissError::config(
                    format!("schedule[{i}]"),
                    "every task must introduce at least one class",
                ));
            }
            let new_classes = (next..next + count as ClassId).collect();
            next += count as ClassId;
            tasks.push(TaskSpec {
                index: i + 1,
                new_classes,
            });
        }
        Ok(Self { tasks })
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn total_classes(&self) -> usize {
        self.tasks.iter().map(|t| t.new_classes.len()).sum()
    }

    /// 1-based task lookup.
    pub fn task(&self, index: usize) -> &TaskSpec {
        &self.tasks[index - 1]
    }

    /// Foreground classes introduced in tasks `1..=index`.
    pub fn seen_classes(&self, index: usize) -> BTreeSet<ClassId> {
        self.tasks[..index]
            .iter()
            .flat_map(|t| t.new_classes.iter().copied())
            .collect()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.tasks.iter().map(|t| t.new_classes.len()).collect()
    }
}

/// The private training data of one client for one task.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientShard {
    pub client_id: usize,
    pub task_id: usize,
    pub samples: Vec<Sample>,
    pub label_space: BTreeSet<ClassId>,
}

impl ClientShard {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Clone, Copy, Debug)]
enum ShapeKind {
    Rectangle,
    Disk,
    Diamond,
    Cross,
}

/// Per-class rendering parameters.
#[derive(Clone, Copy, Debug)]
struct ClassStyle {
    color: [f64; 3],
    shape: ShapeKind,
}

// Hand-picked signatures for the first classes. A few pairs are deliberately
// close in colour (2/6, 1/7) so classes are not uniformly easy.
const PALETTE: [[f64; 3]; 12] = [
    [0.90, 0.20, 0.20],
    [0.20, 0.85, 0.25],
    [0.25, 0.30, 0.90],
    [0.90, 0.85, 0.20],
    [0.85, 0.25, 0.85],
    [0.25, 0.80, 0.60],
    [0.95, 0.50, 0.20],
    [0.60, 0.60, 0.60],
    [0.55, 0.30, 0.15],
    [0.50, 0.20, 0.70],
    [0.20, 0.60, 0.95],
    [0.95, 0.70, 0.75],
];

fn class_style(class: ClassId) -> ClassStyle {
    let idx = class as usize - 1;
    let color = if idx < PALETTE.len() {
        PALETTE[idx]
    } else {
        // golden-angle hue walk for the long tail
        let hue = (idx as f64 * 0.618_033_988_75).fract();
        let value = 0.65 + 0.3 * ((idx % 3) as f64 / 2.0);
        hsv_to_rgb(hue, 0.75, value)
    };
    let shape = match idx % 4 {
        0 => ShapeKind::Rectangle,
        1 => ShapeKind::Disk,
        2 => ShapeKind::Diamond,
        _ => ShapeKind::Cross,
    };
    ClassStyle { color, shape }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match i as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn check_grid(grid: GridSize) -> Result<()> {
    if grid.height < 8 || grid.width < 8 {
        return Err(FissError::config(
            "grid",
            format!(
                "grid must be at least 8x8, got {}x{}",
                grid.height, grid.width
            ),
        ));
    }
    Ok(())
}

/// Paints one object and writes `label` under it.
fn paint_shape(
    image: &mut Image,
    labels: &mut LabelMap,
    style: ClassStyle,
    label: ClassId,
    rng: &mut ChaCha8Rng,
) {
    let grid = image.grid;
    let min_side = grid.height.min(grid.width) as f64;
    let radius = rng.random_range(min_side / 8.0..=min_side / 4.0);
    let cy = rng.random_range(radius * 0.5..grid.height as f64 - radius * 0.5);
    let cx = rng.random_range(radius * 0.5..grid.width as f64 - radius * 0.5);
    let jitter: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.05..0.05));

    for y in 0..grid.height {
        for x in 0..grid.width {
            let dy = y as f64 + 0.5 - cy;
            let dx = x as f64 + 0.5 - cx;
            let inside = match style.shape {
                ShapeKind::Rectangle => dy.abs() <= radius * 0.8 && dx.abs() <= radius,
                ShapeKind::Disk => dy * dy + dx * dx <= radius * radius,
                ShapeKind::Diamond => dy.abs() + dx.abs() <= radius * 1.2,
                ShapeKind::Cross => {
                    let arm = (radius * 0.4).max(1.0);
                    (dy.abs() <= arm && dx.abs() <= radius)
                        || (dx.abs() <= arm && dy.abs() <= radius)
                }
            };
            if !inside {
                continue;
            }
            let at = (y * grid.width + x) * image.channels;
            let pixel = &mut image.data[at..at + image.channels];
            for ((v, base), j) in pixel.iter_mut().zip(&style.color).zip(&jitter) {
                let noise = rng.random_range(-0.06..0.06);
                *v = (base + j + noise).clamp(0.0, 1.0);
            }
            labels.data[y * grid.width + x] = label;
        }
    }
}

/// Renders one sample. Objects are painted in order, so the last class in
/// `classes` is always fully visible.
fn render_sample(grid: GridSize, classes: &[ClassId], rng: &mut ChaCha8Rng) -> Sample {
    let mut image = Image::zeros(grid, IMAGE_CHANNELS);
    for v in image.data.iter_mut() {
        *v = 0.12 + rng.random_range(0.0..0.12);
    }
    let mut labels = LabelMap::filled(grid, 0);
    for &class in classes {
        paint_shape(&mut image, &mut labels, class_style(class), class, rng);
    }
    Sample {
        image,
        train_label: labels.clone(),
        gt_label: labels,
    }
}

fn render_with_extras(
    grid: GridSize,
    primary: ClassId,
    companions: &[ClassId],
    rng: &mut ChaCha8Rng,
) -> Sample {
    let max_extra = companions.len().min(2);
    let n_extra = rng.random_range(0..=max_extra);
    let mut order: Vec<ClassId> = companions.choose_multiple(rng, n_extra).copied().collect();
    order.push(primary);
    render_sample(grid, &order, rng)
}

/// Generates `samples_per_class` images per foreground class `1..=num_classes`.
/// Each image has the class on top plus up to two other random classes.
/// `train_label` equals `gt_label` (no class is hidden yet).
pub fn generate_dataset(
    num_classes: usize,
    grid: GridSize,
    samples_per_class: usize,
    seed: u64,
) -> Result<Vec<Sample>> {
    if !(2..=MAX_CLASSES).contains(&num_classes) {
        return Err(FissError::config(
            "num_classes",
            format!("must lie in 2..={MAX_CLASSES}, got {num_classes}"),
        ));
    }
    check_grid(grid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all: Vec<ClassId> = (1..=num_classes as ClassId).collect();
    let mut out = Vec::with_capacity(num_classes * samples_per_class);
    for &primary in &all {
        let companions: Vec<ClassId> = all.iter().copied().filter(|&c| c != primary).collect();
        for _ in 0..samples_per_class {
            out.push(render_with_extras(grid, primary, &companions, &mut rng));
        }
    }
    Ok(out)
}

/// Training pool of one task: `samples_per_class` images per new class, whose
/// companion objects are drawn only from classes seen up to this task.
pub fn generate_task_pool(
    schedule: &TaskSchedule,
    task_index: usize,
    grid: GridSize,
    samples_per_class: usize,
    seed: u64,
) -> Result<Vec<Sample>> {
    check_grid(grid)?;
    if task_index == 0 || task_index > schedule.num_tasks() {
        return Err(FissError::config(
            "task_index",
            format!(
                "no task {task_index} in a {}-task schedule",
                schedule.num_tasks()
            ),
        ));
    }
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (task_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let seen = schedule.seen_classes(task_index);
    let task = schedule.task(task_index);
    let mut out = Vec::with_capacity(task.new_classes.len() * samples_per_class);
    for &primary in &task.new_classes {
        let companions: Vec<ClassId> = seen.iter().copied().filter(|&c| c != primary).collect();
        for _ in 0..samples_per_class {
            out.push(render_with_extras(grid, primary, &companions, &mut rng));
        }
    }
    Ok(out)
}

/// Hides every class outside `visible` as background.
pub fn apply_background_shift(gt_label: &LabelMap, visible: &BTreeSet<ClassId>) -> LabelMap {
    let data = gt_label
        .data
        .iter()
        .map(|&c| if c != 0 && visible.contains(&c) { c } else { 0 })
        .collect();
    LabelMap {
        grid: gt_label.grid,
        data,
    }
}

const MAX_COVERAGE_RETRIES: usize = 100;

fn ceil_fraction(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n.max(1))
}

/// Non-IID split of one task's pool. Each client draws
/// `ceil(class_fraction * K^t)` of the task's classes and receives
/// `ceil(sample_fraction * n)` of the `n` pool samples containing any of
/// them, relabeled so only its own classes stay visible. Class draws are
/// repeated until the clients jointly cover the task.
pub fn partition_non_iid(
    samples: &[Sample],
    clients: &[usize],
    task: &TaskSpec,
    class_fraction: f64,
    sample_fraction: f64,
    seed: u64,
) -> Result<Vec<ClientShard>> {
    if clients.is_empty() {
        return Err(FissError::config("clients", "client list is empty"));
    }
    if !(class_fraction > 0.0 && class_fraction <= 1.0) {
        return Err(FissError::config("class_fraction", "must lie in (0, 1]"));
    }
    if !(sample_fraction > 0.0 && sample_fraction <= 1.0) {
        return Err(FissError::config("sample_fraction", "must lie in (0, 1]"));
    }
    if task.new_classes.is_empty() {
        return Err(FissError::config("task", "task has no classes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all: BTreeSet<ClassId> = task.new_classes.iter().copied().collect();
    let per_client = ceil_fraction(class_fraction, all.len());

    let mut spaces: Option<Vec<BTreeSet<ClassId>>> = None;
    for _ in 0..MAX_COVERAGE_RETRIES {
        let draw: Vec<BTreeSet<ClassId>> = clients
            .iter()
            .map(|_| {
                task.new_classes
                    .choose_multiple(&mut rng, per_client)
                    .copied()
                    .collect()
            })
            .collect();
        let union: BTreeSet<ClassId> = draw.iter().flatten().copied().collect();
        if union == all {
            spaces = Some(draw);
            break;
        }
    }
    let spaces = spaces.ok_or_else(|| {
        FissError::config(
            "class_fraction",
            format!("no covering class assignment found after {MAX_COVERAGE_RETRIES} draws"),
        )
    })?;

    let mut shards = Vec::with_capacity(clients.len());
    for (&client_id, space) in clients.iter().zip(spaces) {
        let candidates: Vec<usize> = samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.gt_label.data.iter().any(|c| space.contains(c)))
            .map(|(i, _)| i)
            .collect();
        let take = if candidates.is_empty() {
            0
        } else {
            ceil_fraction(sample_fraction, candidates.len())
        };
        let mut picked = candidates;
        picked.shuffle(&mut rng);
        picked.truncate(take);
        picked.sort_unstable();
        let shard_samples = picked
            .into_iter()
            .map(|i| {
                let s = &samples[i];
                Sample {
                    image: s.image.clone(),
                    gt_label: s.gt_label.clone(),
                    train_label: apply_background_shift(&s.gt_label, &space),
                }
            })
            .collect();
        shards.push(ClientShard {
            client_id,
            task_id: task.index,
            samples: shard_samples,
            label_space: space,
        });
    }
    Ok(shards)
}

/// Manifest of an on-disk dataset dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_samples: usize,
    pub class_ids: Vec<ClassId>,
    pub seed: u64,
    /// `f64` little-endian, sample-major, each image `H*W*C` values.
    pub images_file: String,
    /// `u16` little-endian, sample-major, each map `H*W` values.
    pub gt_labels_file: String,
    pub train_labels_file: String,
}

/// Writes samples as flat binary grids plus `manifest.json`.
pub fn dump_dataset(dir: &Path, samples: &[Sample], seed: u64) -> Result<DatasetManifest> {
    let first = samples
        .first()
        .ok_or_else(|| FissError::Data("cannot dump an empty dataset".into()))?;
    let grid = first.image.grid;
    let channels = first.image.channels;
    fs::create_dir_all(dir)?;

    let mut images = Vec::with_capacity(samples.len() * grid.pixels() * channels * 8);
    let mut gt = Vec::with_capacity(samples.len() * grid.pixels() * 2);
    let mut train = Vec::with_capacity(samples.len() * grid.pixels() * 2);
    let mut classes = BTreeSet::new();
    for s in samples {
        if s.image.grid != grid || s.image.channels != channels {
            return Err(FissError::shape("dataset mixes image dimensions"));
        }
        images.extend(s.image.data.iter().flat_map(|v| v.to_le_bytes()));
        gt.extend(s.gt_label.data.iter().flat_map(|v| v.to_le_bytes()));
        train.extend(s.train_label.data.iter().flat_map(|v| v.to_le_bytes()));
        classes.extend(s.gt_label.data.iter().copied());
    }
    let manifest = DatasetManifest {
        height: grid.height,
        width: grid.width,
        channels,
        num_samples: samples.len(),
        class_ids: classes.into_iter().collect(),
        seed,
        images_file: "images.f64".into(),
        gt_labels_file: "gt_labels.u16".into(),
        train_labels_file: "train_labels.u16".into(),
    };
    fs::File::create(dir.join(&manifest.images_file))?.write_all(&images)?;
    fs::File::create(dir.join(&manifest.gt_labels_file))?.write_all(&gt)?;
    fs::File::create(dir.join(&manifest.train_labels_file))?.write_all(&train)?;
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<Sample>)> {
    let manifest: DatasetManifest = serde_json::from_slice(&read_all(&dir.join("manifest.json"))?)?;
    let grid = GridSize::new(manifest.height, manifest.width);
    let px = grid.pixels();
    let img_len = px * manifest.channels;
    let images = read_all(&dir.join(&manifest.images_file))?;
    let gt = read_all(&dir.join(&manifest.gt_labels_file))?;
    let train = read_all(&dir.join(&manifest.train_labels_file))?;
    let n = manifest.num_samples;
    if images.len() != n * img_len * 8 || gt.len() != n * px * 2 || train.len() != n * px * 2 {
        return Err(FissError::shape("dataset files do not match the manifest"));
    }
    let f64s: Vec<f64> = images
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
        .collect();
    let u16s = |bytes: &[u8]| -> Vec<ClassId> {
        bytes
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]))
            .collect()
    };
    let gt = u16s(&gt);
    let train = u16s(&train);
    let samples = (0..n)
        .map(|i| Sample {
            image: Image {
                grid,
                channels: manifest.channels,
                data: f64s[i * img_len..(i + 1) * img_len].to_vec(),
            },
            gt_label: LabelMap {
                grid,
                data: gt[i * px..(i + 1) * px].to_vec(),
            },
            train_label: LabelMap {
                grid,
                data: train[i * px..(i + 1) * px].to_vec(),
            },
        })
        .collect();
    Ok((manifest, samples))
}
