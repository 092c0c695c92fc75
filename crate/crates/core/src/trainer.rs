//! Camera-by-camera training: association, distillation training with
//! memory momentum updates, and memory evolution at the camera boundary.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::association::{
    argmax_assign, association_precision, augment_dataset, cycle_match_with, AssociationMap, AssociationPrecision,
    MatchOptions,
};
use crate::encoder::{Encoder, ForwardTrace};
use crate::error::{IkeError, Result};
use crate::eval::{evaluate_map, GalleryRule, MetricsReport};
use crate::losses::{loss_total, IkdBatch, LossBreakdown, TermSwitches};
use crate::memory::{init_memory, iku_merge, momentum_update, IdentityMemory};
use crate::optim::{Adam, StepDecay};
use crate::seeding::{self, Purpose};
use crate::synth::{shuffled_indices, CameraDataset, StreamData};

/// Method variant; each one switches components of the full method off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Variant {
    /// Fine-tuning with the identity loss only.
    Baseline,
    /// Full method without middle-layer distillation.
    IkeD,
    /// One-directional argmax association instead of cycle matching.
    IkeA,
    /// Historical memory replaced by the current memory after each camera.
    IkeU,
    /// Distillation terms applied to every sample, matched or not.
    IkeStar,
    Ike,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Baseline,
        Variant::IkeD,
        Variant::IkeA,
        Variant::IkeU,
        Variant::IkeStar,
        Variant::Ike,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "BASELINE",
            Variant::IkeD => "IKE_D",
            Variant::IkeA => "IKE_A",
            Variant::IkeU => "IKE_U",
            Variant::IkeStar => "IKE_STAR",
            Variant::Ike => "IKE",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(name) || (name == "IKE*" && *v == Variant::IkeStar))
    }

    fn switches(self) -> TermSwitches {
        match self {
            Variant::Baseline => TermSwitches::ID_ONLY,
            Variant::IkeD => TermSwitches {
                mkd: false,
                ..TermSwitches::ALL
            },
            _ => TermSwitches::ALL,
        }
    }

    /// True when the historical memory is merged/expanded after training.
    pub fn evolves_memory(self) -> bool {
        self != Variant::IkeU
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    pub tau: f64,
    pub omega: f64,
    pub lambda: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_decay: f64,
    pub lr_step_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Optional cosine floor for accepting a cycle match. Off by default.
    pub min_match_score: Option<f64>,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            tau: 0.05,
            omega: 0.1,
            lambda: 0.25,
            lr: 3.5e-4,
            weight_decay: 5e-4,
            lr_decay: 0.1,
            lr_step_epochs: 15,
            epochs: 30,
            batch_size: 64,
            min_match_score: None,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(IkeError::Config(m));
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return fail(format!("tau must be positive, got {}", self.tau));
        }
        if !(0.0..=1.0).contains(&self.omega) {
            return fail(format!("omega must lie in [0, 1], got {}", self.omega));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return fail(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0 && self.lr_decay > 0.0) {
            return fail("lr and weight_decay must be non-negative, lr_decay positive".into());
        }
        if self.batch_size == 0 || self.lr_step_epochs == 0 {
            return fail("batch_size and lr_step_epochs must be at least 1".into());
        }
        Ok(())
    }

    pub fn schedule(&self) -> StepDecay {
        StepDecay {
            base: self.lr,
            gamma: self.lr_decay,
            every: self.lr_step_epochs,
        }
    }

    fn match_options(&self) -> MatchOptions {
        MatchOptions {
            min_score: self.min_match_score,
        }
    }
}

/// Desk-scale encoder widths after the input layer.
pub const DEFAULT_WIDTHS: [usize; 4] = [32, 32, 32, 64];

/// Everything carried from one camera to the next.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub historical_encoder: Encoder,
    pub historical_memory: IdentityMemory,
    pub hyper: Hyperparams,
    pub seed: u64,
    /// Number of cameras trained so far.
    pub step: usize,
}

impl TrainState {
    /// Fresh state with a seeded random encoder and an empty memory.
    /// `widths` lists block output sizes, the last being the embedding size.
    pub fn new(input_dim: usize, widths: &[usize], hyper: Hyperparams, seed: u64) -> Result<Self> {
        hyper.validate()?;
        let all: Vec<usize> = std::iter::once(input_dim).chain(widths.iter().copied()).collect();
        let encoder = Encoder::new(&all, &mut seeding::stream(seed, Purpose::Init, 0))?;
        let dim = encoder.embedding_dim();
        Ok(Self {
            historical_encoder: encoder,
            historical_memory: IdentityMemory::empty(dim),
            hyper,
            seed,
            step: 0,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean over the epoch's batches.
    pub loss: LossBreakdown,
}

/// What happened while training one camera.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraOutcome {
    pub camera_id: usize,
    /// Association used to build the augmented dataset.
    pub association: AssociationMap,
    pub association_precision: Option<AssociationPrecision>,
    pub epochs: Vec<EpochRecord>,
    pub batches: Vec<LossBreakdown>,
    /// Historical memory size after the update.
    pub n_historical: usize,
}

fn history_features(encoder: &Encoder, dataset: &CameraDataset, needed: bool) -> Result<Option<ForwardTrace>> {
    if !needed {
        return Ok(None);
    }
    encoder.forward_batch(dataset.inputs().view()).map(Some)
}

/// Trains one camera on top of `state` and evolves the state in place.
pub fn train_camera(state: &mut TrainState, dataset: &CameraDataset, variant: Variant) -> Result<CameraOutcome> {
    let hyper = state.hyper.clone();
    hyper.validate()?;
    if dataset.is_empty() {
        return Err(IkeError::Config(format!("camera {} has no samples", dataset.camera_id())));
    }
    let historical = &state.historical_encoder;
    let mut current = historical.clone();
    let mut current_memory = init_memory(historical, dataset)?;
    let hist_memory = &state.historical_memory;
    let has_history = !hist_memory.is_empty();

    let association = match variant {
        Variant::Baseline => AssociationMap::unmatched(dataset.n_ids()),
        Variant::IkeA => argmax_assign(&current_memory, hist_memory)?,
        _ => cycle_match_with(&current_memory, hist_memory, hyper.match_options())?,
    };
    let association_precision = match (current_memory.provenance(), hist_memory.provenance()) {
        (Some(c), Some(h)) if has_history => Some(association_precision(&association, Some(c), Some(h))?),
        _ => None,
    };
    let samples = augment_dataset(dataset, &association)?;
    let hist_labels: Vec<Option<usize>> = samples.iter().map(|s| s.hist_label).collect();
    let gates: Vec<f64> = samples
        .iter()
        .map(|s| {
            if variant == Variant::IkeStar || s.hist_label.is_some() {
                1.0
            } else {
                0.0
            }
        })
        .collect();

    // With an empty history every history term is identically zero.
    let switches = if has_history {
        variant.switches()
    } else {
        TermSwitches::ID_ONLY
    };
    let hist_trace = history_features(historical, dataset, switches.kd || switches.mkd)?;
    let empty = Array2::<f64>::zeros((0, 0));

    let schedule = hyper.schedule();
    let mut adam = Adam::new(current.n_params(), hyper.weight_decay);
    let mut rng = seeding::stream(state.seed, Purpose::Shuffle, state.step as u64);
    let mut epochs = Vec::with_capacity(hyper.epochs);
    let mut batches = Vec::new();
    let labels = dataset.labels();

    for epoch in 0..hyper.epochs {
        let lr = schedule.lr_at(epoch);
        let order = shuffled_indices(&mut rng, dataset.len());
        let mut epoch_loss = LossBreakdown::default();
        let mut n_batches = 0usize;
        for idx in order.chunks(hyper.batch_size) {
            let x = dataset.inputs().select(Axis(0), idx);
            let trace = current.forward_batch(x.view())?;
            let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let batch_hist: Vec<Option<usize>> = idx.iter().map(|&i| hist_labels[i]).collect();
            let batch_gates: Vec<f64> = idx.iter().map(|&i| gates[i]).collect();
            let (hist_emb, hist_mid) = match &hist_trace {
                Some(t) => (
                    t.embedding().select(Axis(0), idx),
                    [t.middle(0).select(Axis(0), idx), t.middle(1).select(Axis(0), idx)],
                ),
                None => (empty.clone(), [empty.clone(), empty.clone()]),
            };
            let out = loss_total(
                &IkdBatch {
                    embedding: trace.embedding(),
                    middle: [trace.middle(0), trace.middle(1)],
                    hist_embedding: hist_emb.view(),
                    hist_middle: [hist_mid[0].view(), hist_mid[1].view()],
                    labels: &batch_labels,
                    hist_labels: &batch_hist,
                    distill_gates: &batch_gates,
                    current_memory: &current_memory,
                    historical_memory: hist_memory,
                    tau: hyper.tau,
                },
                switches,
            )?;
            let grad_mid = out.grad_middle.as_ref().map(|g| [g[0].view(), g[1].view()]);
            let grads = current.backward(&trace, out.grad_embedding.view(), grad_mid)?;
            adam.step(&mut current, &grads, lr);
            for (k, &y) in batch_labels.iter().enumerate() {
                momentum_update(&mut current_memory, y, trace.embedding().row(k), hyper.omega)?;
            }
            epoch_loss.accumulate(&out.breakdown);
            batches.push(out.breakdown);
            n_batches += 1;
        }
        epochs.push(EpochRecord {
            epoch,
            lr,
            loss: epoch_loss.scaled(1.0 / n_batches.max(1) as f64),
        });
    }

    let final_memory = init_memory(&current, dataset)?;
    let next_memory = match variant {
        Variant::IkeU => final_memory,
        Variant::Baseline => iku_merge(
            hist_memory,
            &final_memory,
            &AssociationMap::unmatched(final_memory.len()),
            hyper.lambda,
        )?,
        _ => {
            let assoc = cycle_match_with(&final_memory, hist_memory, hyper.match_options())?;
            iku_merge(hist_memory, &final_memory, &assoc, hyper.lambda)?
        }
    };
    state.historical_memory = next_memory;
    state.historical_encoder = current;
    state.step += 1;

    Ok(CameraOutcome {
        camera_id: dataset.camera_id(),
        association,
        association_precision,
        epochs,
        batches,
        n_historical: state.historical_memory.len(),
    })
}

/// One sequential run over an ordered list of cameras.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceConfig {
    pub run_id: String,
    pub variant: Variant,
    /// Indices into the dataset's camera list, in training order.
    pub order: Vec<usize>,
    pub order_name: Option<String>,
    pub hyper: Hyperparams,
    pub widths: Vec<usize>,
    pub seed: u64,
    pub gallery: GalleryRule,
}

#[derive(Debug, Clone)]
pub struct SequenceOutcome {
    pub report: MetricsReport,
    pub cameras: Vec<CameraOutcome>,
    pub state: TrainState,
}

fn check_order(order: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for &c in order {
        if c >= n || std::mem::replace(&mut seen[c], true) {
            return Err(IkeError::Config(format!("order {order:?} is not a permutation of 0..{n}")));
        }
    }
    if order.len() != n {
        return Err(IkeError::Config(format!("order {order:?} is not a permutation of 0..{n}")));
    }
    Ok(())
}

/// Trains the cameras in order, evaluating on the test split after each.
/// `observer` sees the state after every camera (for checkpoints).
pub fn run_sequence_with(
    data: &StreamData,
    config: &SequenceConfig,
    observer: &mut dyn FnMut(usize, &TrainState) -> Result<()>,
) -> Result<SequenceOutcome> {
    check_order(&config.order, data.train.len())?;
    let mut state = TrainState::new(data.input_dim(), &config.widths, config.hyper.clone(), config.seed)?;
    let mut cameras = Vec::with_capacity(config.order.len());
    let mut per_camera_map = Vec::with_capacity(config.order.len());
    let mut nh = Vec::with_capacity(config.order.len());
    let mut precision = Vec::with_capacity(config.order.len());
    for (k, &c) in config.order.iter().enumerate() {
        let outcome = train_camera(&mut state, &data.train[c], config.variant)?;
        per_camera_map.push(evaluate_map(&state.historical_encoder, &data.test, config.gallery)?);
        nh.push(outcome.n_historical);
        precision.push(outcome.association_precision.and_then(|p| p.precision));
        cameras.push(outcome);
        observer(k, &state)?;
    }
    let (fmap, mean_map) = MetricsReport::summarize(&per_camera_map);
    let report = MetricsReport {
        run_id: config.run_id.clone(),
        seed: config.seed,
        variant: config.variant,
        order: config.order.clone(),
        order_name: config.order_name.clone(),
        hyper: config.hyper.clone(),
        per_camera_map,
        fmap,
        mean_map,
        nh_trajectory: nh,
        assoc_precision: precision,
        forgetting: None,
    };
    Ok(SequenceOutcome { report, cameras, state })
}

pub fn run_sequence(data: &StreamData, config: &SequenceConfig) -> Result<SequenceOutcome> {
    run_sequence_with(data, config, &mut |_, _| Ok(()))
}

/// Joint training on every camera under global labels with the identity
/// loss only. Returns the encoder and its test mAP.
pub fn train_joint_upperbound(
    data: &StreamData,
    hyper: &Hyperparams,
    widths: &[usize],
    seed: u64,
    gallery: GalleryRule,
) -> Result<(Encoder, f64)> {
    let joint = CameraDataset::union_by_global(&data.train)?;
    let mut state = TrainState::new(data.input_dim(), widths, hyper.clone(), seed)?;
    train_camera(&mut state, &joint, Variant::Baseline)?;
    let map = evaluate_map(&state.historical_encoder, &data.test, gallery)?;
    Ok((state.historical_encoder, map))
}
