//! Federated incremental training.
//!
//! Clients fall into three groups per task: `Old` clients keep their past
//! experience but receive no new data, `Continuing` clients receive data of
//! the current task, and `New` clients join with current-task data only.
//! Every round the server broadcasts the global model, every client with data
//! checks it for an entropy jump, `w` clients with data are sampled, train
//! locally and upload their parameters, and the server averages them.
//!
//! The server only ever sees client ids, flat parameter vectors and the
//! averaging weight of each upload; [`Server::inbound`] records exactly
//! what it received.

use std::collections::BTreeSet;

use log::{debug, info};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FissError, Result};
use crate::losses::{
    total_objective, BatchItem, LossBreakdown, ObjectiveSpec, OldOutputs, PseudoLabeling,
};
use crate::metrics::{mean_present, ConfusionMatrix, TaskEvaluation};
use crate::model::{ModelParams, ModelShape};
use crate::monitor::{average_entropy, EntropyMode, MonitorState};
use crate::pseudo_label::{compute_thresholds_from_maps, entropy_map, RhoSchedule};
use crate::synth_data::{
    apply_background_shift, generate_dataset, generate_task_pool, partition_non_iid, ClassId,
    ClientShard, GridSize, Image, LabelMap, Sample, TaskSchedule, IMAGE_CHANNELS,
};

/// Training recipe of a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Full forgetting-balanced learning.
    #[default]
    Fbl,
    /// Cross-entropy on the shifted training labels only.
    Finetune,
    /// Constant-confidence pseudo labels instead of entropy thresholds.
    FblNoApl,
    /// Unweighted cross-entropy on pseudo labels instead of the compensated loss.
    FblNoFsc,
    /// No relation consistency term.
    FblNoFrc,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Fbl,
        Method::Finetune,
        Method::FblNoApl,
        Method::FblNoFsc,
        Method::FblNoFrc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Fbl => "fbl",
            Method::Finetune => "finetune",
            Method::FblNoApl => "fbl-no-apl",
            Method::FblNoFsc => "fbl-no-fsc",
            Method::FblNoFrc => "fbl-no-frc",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == name)
            .ok_or_else(|| FissError::config("method", format!("unknown method `{name}`")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregationMode {
    /// Weighted by each client's sample count.
    #[default]
    SampleWeighted,
    Uniform,
}

/// Everything the simulation needs besides the schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct FederationSettings {
    pub schedule: Vec<usize>,
    pub grid: GridSize,
    pub hidden: [usize; 2],
    pub samples_per_class: usize,
    pub test_samples_per_class: usize,
    pub initial_clients: usize,
    pub new_clients_per_task: usize,
    pub old_client_fraction: f64,
    pub class_fraction: f64,
    pub sample_fraction: f64,
    pub clients_per_round: usize,
    pub local_epochs: usize,
    pub rounds_per_task: usize,
    pub batch_size: usize,
    pub lr_base: f64,
    pub lr_incremental: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
    pub entropy_mode: EntropyMode,
    pub rho: RhoSchedule,
    pub apl_threshold: f64,
    pub head_init_scale: f64,
    pub aggregation: AggregationMode,
    pub method: Method,
    pub seed: u64,
}

/// Deterministic sub-seed for a named purpose.
pub fn derive_seed(seed: u64, tag: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    for v in [a, b] {
        z = z
            .wrapping_add(v.wrapping_mul(0xBF58_476D_1CE4_E5B9))
            .wrapping_add(0x94D0_49BB_1331_11EB);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

const TAG_INIT: u64 = 1;
pub(crate) const TAG_POOL: u64 = 2;
pub(crate) const TAG_TEST: u64 = 3;
const TAG_GROUPS: u64 = 4;
const TAG_PARTITION: u64 = 5;
const TAG_HEAD: u64 = 6;
const TAG_SERVER: u64 = 7;
const TAG_LOCAL: u64 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClientGroup {
    /// Past experience, no current-task data.
    Old,
    /// Past experience and current-task data.
    Continuing,
    /// Joined this task.
    New,
}

#[derive(Clone, Debug)]
pub struct ClientState {
    pub id: usize,
    pub group: ClientGroup,
    pub shard: Option<ClientShard>,
    pub monitor: MonitorState,
    /// Classes of the tasks this client has moved past.
    pub learned_classes: BTreeSet<ClassId>,
    /// Label space of the shard seen at the previous entropy check.
    pub observed_label_space: Option<BTreeSet<ClassId>>,
    pub rounds_participated: usize,
}

impl ClientState {
    fn new(id: usize, group: ClientGroup) -> Self {
        Self {
            id,
            group,
            shard: None,
            monitor: MonitorState::new(1),
            learned_classes: BTreeSet::new(),
            observed_label_space: None,
            rounds_participated: 0,
        }
    }
}

/// Group membership for `task_index`. Task 1 creates `initial` continuing
/// clients; later tasks turn a random `old_fraction` of the existing clients
/// into old clients, the rest into continuing ones, and add `per_task` new
/// clients with fresh ids. Shards are cleared.
pub fn evolve_clients(
    task_index: usize,
    prev: Vec<ClientState>,
    initial: usize,
    per_task: usize,
    old_fraction: f64,
    seed: u64,
) -> Vec<ClientState> {
    if task_index <= 1 && prev.is_empty() {
        return (0..initial)
            .map(|id| ClientState::new(id, ClientGroup::Continuing))
            .collect();
    }
    let mut clients = prev;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_GROUPS, task_index as u64, 0));
    let mut order: Vec<usize> = (0..clients.len()).collect();
    order.shuffle(&mut rng);
    let n_old = (old_fraction * clients.len() as f64 + 1e-9).floor() as usize;
    for (rank, &i) in order.iter().enumerate() {
        clients[i].group = if rank < n_old {
            ClientGroup::Old
        } else {
            ClientGroup::Continuing
        };
        clients[i].shard = None;
    }
    let next_id = clients.iter().map(|c| c.id + 1).max().unwrap_or(0);
    clients.extend((0..per_task).map(|k| ClientState::new(next_id + k, ClientGroup::New)));
    clients
}

/// What the server received, stripped of payload values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum InboundMessage {
    Availability {
        client_ids: Vec<usize>,
    },
    Upload {
        client_id: usize,
        params_len: usize,
        weight: f64,
    },
}

/// A client's contribution to aggregation.
#[derive(Clone, Debug)]
pub struct Upload {
    pub client_id: usize,
    pub params: Vec<f64>,
    pub weight: f64,
}

/// Weighted mean of flat parameter vectors. Inputs are put in a canonical
/// order and averaged as offsets from the first, so permuting the inputs or
/// averaging identical vectors is exact.
pub fn aggregate(models: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>> {
    if models.is_empty() || models.len() != weights.len() {
        return Err(FissError::shape("aggregate needs one weight per model"));
    }
    let n = models[0].len();
    if models.iter().any(|m| m.len() != n) {
        return Err(FissError::shape("models differ in parameter count"));
    }
    if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
        return Err(FissError::config(
            "weights",
            "must be finite and nonnegative",
        ));
    }
    if weights.iter().sum::<f64>() <= 0.0 {
        return Err(FissError::config("weights", "must have a positive sum"));
    }
    let mut order: Vec<usize> = (0..models.len()).collect();
    order.sort_by(|&a, &b| {
        weights[a].total_cmp(&weights[b]).then_with(|| {
            models[a]
                .iter()
                .zip(&models[b])
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    let total: f64 = order.iter().map(|&i| weights[i]).sum();
    let base = &models[order[0]];
    let mut acc = vec![0.0; n];
    for &i in &order {
        for ((a, x), b) in acc.iter_mut().zip(&models[i]).zip(base) {
            *a += weights[i] * (x - b);
        }
    }
    Ok(base.iter().zip(acc).map(|(b, a)| b + a / total).collect())
}

/// Server side of the protocol.
#[derive(Debug)]
pub struct Server {
    rng: ChaCha8Rng,
    mode: AggregationMode,
    inbound: Vec<InboundMessage>,
}

impl Server {
    pub fn new(seed: u64, mode: AggregationMode) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_SERVER, 0, 0)),
            mode,
            inbound: Vec::new(),
        }
    }

    /// Samples `w` of the clients that reported available, in id order.
    pub fn select(&mut self, available: Vec<usize>, w: usize) -> Result<Vec<usize>> {
        self.inbound.push(InboundMessage::Availability {
            client_ids: available.clone(),
        });
        if w == 0 || w > available.len() {
            return Err(FissError::config(
                "clients_per_round",
                format!("cannot select {w} of {} clients with data", available.len()),
            ));
        }
        let mut picked: Vec<usize> = available
            .choose_multiple(&mut self.rng, w)
            .copied()
            .collect();
        picked.sort_unstable();
        Ok(picked)
    }

    pub fn aggregate(&mut self, uploads: Vec<Upload>) -> Result<Vec<f64>> {
        for u in &uploads {
            self.inbound.push(InboundMessage::Upload {
                client_id: u.client_id,
                params_len: u.params.len(),
                weight: u.weight,
            });
        }
        let weights: Vec<f64> = match self.mode {
            AggregationMode::SampleWeighted => uploads.iter().map(|u| u.weight).collect(),
            AggregationMode::Uniform => vec![1.0; uploads.len()],
        };
        let models: Vec<Vec<f64>> = uploads.into_iter().map(|u| u.params).collect();
        aggregate(&models, &weights)
    }

    pub fn inbound(&self) -> &[InboundMessage] {
        &self.inbound
    }
}

/// One client's entropy check in one round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonitorEvent {
    pub client_id: usize,
    pub entropy: f64,
    pub detected: bool,
    /// Client's task estimate after the check.
    pub task_estimate: usize,
    /// Schedule task of the client's shard. Simulation ground truth, never
    /// visible to the monitor.
    pub shard_task: usize,
    /// Set on detection: fingerprint of the stored old model.
    pub snapshot_hash: Option<String>,
    /// Set on detection: fingerprint of the previous-round broadcast.
    pub previous_broadcast_hash: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClientRoundLog {
    pub client_id: usize,
    pub task_estimate: usize,
    pub samples: usize,
    pub batches: usize,
    /// Mean over batches.
    pub losses: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoundRecord {
    pub round: usize,
    pub task: usize,
    pub round_in_task: usize,
    pub selected: Vec<usize>,
    pub model_hash: String,
    pub clients: Vec<ClientRoundLog>,
    pub monitor: Vec<MonitorEvent>,
}

/// Per-round inputs shared by every client.
#[derive(Clone, Debug)]
pub struct RoundContext<'a> {
    pub settings: &'a FederationSettings,
    pub task: usize,
    pub round: usize,
    pub round_in_task: usize,
}

struct LocalResult {
    params: Vec<f64>,
    log: ClientRoundLog,
}

fn objective_spec(
    settings: &FederationSettings,
    client: &ClientState,
    table: Option<crate::pseudo_label::ThresholdTable>,
) -> ObjectiveSpec {
    let method = settings.method;
    let labeling = match (method, table) {
        (Method::FblNoApl, _) | (_, None) => PseudoLabeling::Constant(settings.apl_threshold),
        (_, Some(t)) => PseudoLabeling::Adaptive(t),
    };
    ObjectiveSpec {
        lambda1: if method == Method::FblNoFrc {
            0.0
        } else {
            settings.lambda1
        },
        lambda2: settings.lambda2,
        balanced: method != Method::FblNoFsc,
        labeling,
        local_old: client.learned_classes.len(),
        local_new: client.shard.as_ref().map_or(0, |s| s.label_space.len()),
    }
}

fn add_breakdown(acc: &mut LossBreakdown, b: &LossBreakdown) {
    acc.total += b.total;
    acc.semantic += b.semantic;
    acc.relation += b.relation;
    acc.distill += b.distill;
    acc.provenance += b.provenance;
    for (a, v) in acc.weight_histogram.iter_mut().zip(b.weight_histogram) {
        *a += v;
    }
}

/// Local SGD of one selected client starting from `broadcast`.
fn train_client(
    ctx: &RoundContext,
    client: &ClientState,
    broadcast: &ModelParams,
) -> Result<LocalResult> {
    let s = ctx.settings;
    let shard = client.shard.as_ref().ok_or_else(|| {
        FissError::Protocol(format!("client {} was selected without data", client.id))
    })?;
    let images: Vec<&Image> = shard.samples.iter().map(|x| &x.image).collect();
    let labels: Vec<&LabelMap> = shard.samples.iter().map(|x| &x.train_label).collect();
    let task = if s.method == Method::Finetune {
        1
    } else {
        client.monitor.task
    };
    let lr = if ctx.task == 1 {
        s.lr_base
    } else {
        s.lr_incremental
    };

    let snapshot = if task >= 2 {
        Some(client.monitor.snapshot.as_ref().ok_or_else(|| {
            FissError::Protocol(format!(
                "client {} is past task 1 without an old model",
                client.id
            ))
        })?)
    } else {
        None
    };
    let old_outputs: Vec<OldOutputs> = match snapshot {
        Some(m) => images
            .iter()
            .map(|i| m.forward(i).map(|t| OldOutputs::from_trace(&t)))
            .collect::<Result<_>>()?,
        None => Vec::new(),
    };
    let old_argmax: Vec<LabelMap> = old_outputs.iter().map(|o| o.probs.argmax_map()).collect();

    let mut params = broadcast.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        s.seed,
        TAG_LOCAL,
        ctx.round as u64,
        client.id as u64,
    ));
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut acc = LossBreakdown::default();
    let mut batches = 0usize;
    for epoch in 0..s.local_epochs {
        let table = match (snapshot, s.method) {
            (Some(old), Method::Fbl | Method::FblNoFsc | Method::FblNoFrc) => {
                let rho = s.rho.at(client.monitor.epochs_since_transition + epoch);
                let entropies: Vec<Vec<f64>> = images
                    .iter()
                    .map(|i| params.forward(i).map(|t| entropy_map(&t.probs)))
                    .collect::<Result<_>>()?;
                Some(compute_thresholds_from_maps(
                    &entropies,
                    &old_argmax,
                    old.num_classes() - 1,
                    rho,
                )?)
            }
            _ => None,
        };
        let spec = objective_spec(s, client, table);
        order.shuffle(&mut rng);
        for chunk in order.chunks(s.batch_size.max(1)) {
            let batch: Vec<BatchItem> = chunk
                .iter()
                .map(|&i| BatchItem {
                    image: images[i],
                    train_label: labels[i],
                    old: old_outputs.get(i),
                })
                .collect();
            let eval = total_objective(&params, &batch, task, &spec)?;
            let mut flat = params.flatten();
            for (p, g) in flat.iter_mut().zip(&eval.gradient) {
                *p -= lr * g;
            }
            params = ModelParams::unflatten(&flat, params.shape())?;
            add_breakdown(&mut acc, &eval.breakdown);
            batches += 1;
        }
    }
    if batches > 0 {
        let n = batches as f64;
        acc.total /= n;
        acc.semantic /= n;
        acc.relation /= n;
        acc.distill /= n;
    }
    Ok(LocalResult {
        params: params.flatten(),
        log: ClientRoundLog {
            client_id: client.id,
            task_estimate: client.monitor.task,
            samples: images.len(),
            batches,
            losses: acc,
        },
    })
}

/// One global round: entropy checks on every client with data, sampling,
/// local training of the selected clients and aggregation.
pub fn run_round(
    ctx: &RoundContext,
    global: &ModelParams,
    clients: &mut [ClientState],
    server: &mut Server,
) -> Result<(ModelParams, RoundRecord)> {
    let s = ctx.settings;
    let entropies: Vec<Option<f64>> = clients
        .par_iter()
        .map(|c| match &c.shard {
            Some(shard) => {
                let images: Vec<&Image> = shard.samples.iter().map(|x| &x.image).collect();
                average_entropy(global, &images, s.entropy_mode).map(Some)
            }
            None => Ok(None),
        })
        .collect::<Result<_>>()?;

    let mut monitor = Vec::new();
    for (c, h) in clients.iter_mut().zip(entropies) {
        if let (Some(h), Some(shard)) = (h, &c.shard) {
            let previous_hash = c
                .monitor
                .previous_global
                .as_ref()
                .map(ModelParams::fingerprint);
            let detected = c.monitor.observe(ctx.round, h, s.tau)?;
            if detected {
                if let Some(seen) = c.observed_label_space.take() {
                    c.learned_classes.extend(seen);
                }
            }
            c.observed_label_space = Some(shard.label_space.clone());
            monitor.push(MonitorEvent {
                client_id: c.id,
                entropy: h,
                detected,
                task_estimate: c.monitor.task,
                shard_task: shard.task_id,
                snapshot_hash: detected
                    .then(|| c.monitor.snapshot.as_ref().map(ModelParams::fingerprint))
                    .flatten(),
                previous_broadcast_hash: if detected { previous_hash } else { None },
            });
        }
        c.monitor.retain_broadcast(global);
    }

    let available: Vec<usize> = clients
        .iter()
        .filter(|c| c.shard.is_some())
        .map(|c| c.id)
        .collect();
    let selected = server.select(available, s.clients_per_round)?;
    let chosen: Vec<usize> = clients
        .iter()
        .enumerate()
        .filter(|(_, c)| selected.binary_search(&c.id).is_ok())
        .map(|(i, _)| i)
        .collect();

    let results: Vec<LocalResult> = chosen
        .par_iter()
        .map(|&i| train_client(ctx, &clients[i], global))
        .collect::<Result<_>>()?;

    let mut uploads = Vec::with_capacity(results.len());
    let mut logs = Vec::with_capacity(results.len());
    for (&i, r) in chosen.iter().zip(results) {
        let c = &mut clients[i];
        c.rounds_participated += 1;
        c.monitor.epochs_since_transition += s.local_epochs;
        uploads.push(Upload {
            client_id: c.id,
            params: r.params,
            weight: r.log.samples as f64,
        });
        logs.push(r.log);
    }
    let flat = server.aggregate(uploads)?;
    let next = ModelParams::unflatten(&flat, global.shape())?;
    let record = RoundRecord {
        round: ctx.round,
        task: ctx.task,
        round_in_task: ctx.round_in_task,
        selected,
        model_hash: next.fingerprint(),
        clients: logs,
        monitor,
    };
    Ok((next, record))
}

/// Confusion-matrix evaluation of `model` on `test`, with classes outside
/// `seen` folded into background.
pub fn evaluate(
    model: &ModelParams,
    test: &[Sample],
    seen: &BTreeSet<ClassId>,
    task: usize,
) -> Result<TaskEvaluation> {
    let classes = model.num_classes();
    let matrices: Vec<ConfusionMatrix> = test
        .par_iter()
        .map(|s| {
            let mut cm = ConfusionMatrix::new(classes);
            let gt = apply_background_shift(&s.gt_label, seen);
            cm.accumulate(&gt, &model.predict(&s.image)?)?;
            Ok(cm)
        })
        .collect::<Result<_>>()?;
    let mut cm = ConfusionMatrix::new(classes);
    for m in &matrices {
        cm.merge(m)?;
    }
    let iou = cm.per_class_iou();
    let miou = mean_present(&iou)?;
    Ok(TaskEvaluation { task, iou, miou })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub method: Method,
    pub seed: u64,
    pub schedule: Vec<usize>,
    pub tasks: Vec<TaskEvaluation>,
    pub final_miou: f64,
    /// Mean IoU of foreground classes introduced before the last task.
    pub old_class_miou: Option<f64>,
    /// Mean IoU of the last task's classes.
    pub new_class_miou: Option<f64>,
    pub detected_transitions: usize,
}

/// Everything a run produces.
#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub result: ExperimentResult,
    pub rounds: Vec<RoundRecord>,
    /// Global model after each task.
    pub task_models: Vec<ModelParams>,
    pub server_inbound: Vec<InboundMessage>,
}

pub fn run_experiment(settings: &FederationSettings) -> Result<ExperimentOutcome> {
    let schedule = TaskSchedule::from_counts(&settings.schedule)?;
    let seed = settings.seed;
    let test = generate_dataset(
        schedule.total_classes(),
        settings.grid,
        settings.test_samples_per_class,
        derive_seed(seed, TAG_TEST, 0, 0),
    )?;
    let shape = ModelShape::new(
        IMAGE_CHANNELS,
        settings.hidden,
        schedule.task(1).new_classes.len(),
    );
    let mut global = ModelParams::init(shape, derive_seed(seed, TAG_INIT, 0, 0))?;
    let mut server = Server::new(seed, settings.aggregation);
    let mut clients: Vec<ClientState> = Vec::new();
    let mut rounds = Vec::new();
    let mut evaluations = Vec::new();
    let mut task_models = Vec::new();
    let mut round = 0usize;

    for t in 1..=schedule.num_tasks() {
        let spec = schedule.task(t);
        if t > 1 {
            global = global.extend_head(
                spec.new_classes.len(),
                settings.head_init_scale,
                derive_seed(seed, TAG_HEAD, t as u64, 0),
            )?;
        }
        clients = evolve_clients(
            t,
            clients,
            settings.initial_clients,
            settings.new_clients_per_task,
            settings.old_client_fraction,
            seed,
        );
        let pool = generate_task_pool(
            &schedule,
            t,
            settings.grid,
            settings.samples_per_class,
            derive_seed(seed, TAG_POOL, 0, 0),
        )?;
        let with_data: Vec<usize> = clients
            .iter()
            .filter(|c| c.group != ClientGroup::Old)
            .map(|c| c.id)
            .collect();
        let shards = partition_non_iid(
            &pool,
            &with_data,
            spec,
            settings.class_fraction,
            settings.sample_fraction,
            derive_seed(seed, TAG_PARTITION, t as u64, 0),
        )?;
        for shard in shards {
            if let Some(c) = clients.iter_mut().find(|c| c.id == shard.client_id) {
                c.shard = Some(shard);
            }
        }
        info!(
            "task {t}: {} clients ({} with data), classes {:?}",
            clients.len(),
            with_data.len(),
            spec.new_classes
        );

        for r in 0..settings.rounds_per_task {
            round += 1;
            let ctx = RoundContext {
                settings,
                task: t,
                round,
                round_in_task: r + 1,
            };
            let (next, record) = run_round(&ctx, &global, &mut clients, &mut server)?;
            debug!(
                "round {round} (task {t}): selected {:?}, detections {}",
                record.selected,
                record.monitor.iter().filter(|m| m.detected).count()
            );
            global = next;
            rounds.push(record);
        }
        let eval = evaluate(&global, &test, &schedule.seen_classes(t), t)?;
        info!("task {t}: mIoU {:.4}", eval.miou);
        evaluations.push(eval);
        task_models.push(global.clone());
    }

    let last = evaluations.last().expect("schedule has at least one task");
    let final_task = schedule.num_tasks();
    let group_mean = |pick: &dyn Fn(usize) -> bool| -> Option<f64> {
        let v: Vec<Option<f64>> = last
            .iter_classes()
            .filter(|(c, _)| *c > 0 && pick(*c))
            .map(|(_, v)| v)
            .collect();
        mean_present(&v).ok()
    };
    let final_shape = global.shape().clone();
    let old_class_miou =
        group_mean(&|c| final_shape.task_of_class(c as ClassId) != Some(final_task));
    let new_class_miou =
        group_mean(&|c| final_shape.task_of_class(c as ClassId) == Some(final_task));
    let detected_transitions = clients.iter().map(|c| c.monitor.transitions).sum();
    let result = ExperimentResult {
        method: settings.method,
        seed,
        schedule: settings.schedule.clone(),
        final_miou: last.miou,
        tasks: evaluations,
        old_class_miou,
        new_class_miou,
        detected_transitions,
    };
    Ok(ExperimentOutcome {
        result,
        rounds,
        task_models,
        server_inbound: server.inbound().to_vec(),
    })
}

impl TaskEvaluation {
    fn iter_classes(&self) -> impl Iterator<Item = (usize, Option<f64>)> + '_ {
        self.iou.iter().copied().enumerate()
    }
}
