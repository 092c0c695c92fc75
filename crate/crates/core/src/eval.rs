//! Retrieval metrics and run-level reports.
//!
//! Every test image is a query against the test images of the other cameras.
//! Ranking is by cosine similarity, ties broken by gallery index.

use std::cmp::Ordering;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::association::{association_precision, cycle_match};
use crate::encoder::Encoder;
use crate::error::{IkeError, Result};
use crate::memory::init_memory;
use crate::synth::{StreamData, TestSplit};
use crate::trainer::{train_camera, Hyperparams, TrainState, Variant};

/// Which gallery items a query is compared against.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GalleryRule {
    /// Drop every item from the query's camera.
    #[default]
    CrossCamera,
    /// Drop only same-camera items of the query's identity (Market-style junk).
    SameCameraSameId,
    /// Drop only the query itself. The one rule a single-camera stream can
    /// be scored under.
    ExcludeSelf,
}

/// AP of a ranked relevance list: mean of precision@k over relevant ranks.
pub fn average_precision(relevance: &[bool], n_relevant: usize) -> Result<f64> {
    if n_relevant == 0 {
        return Err(IkeError::NoRelevant);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &rel) in relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    Ok(sum / n_relevant as f64)
}

/// mAP from precomputed unit embeddings (one per row). Queries without a
/// relevant gallery item are skipped.
pub fn map_from_embeddings(
    embeddings: ArrayView2<f64>,
    cameras: &[usize],
    globals: &[usize],
    rule: GalleryRule,
) -> Result<f64> {
    let n = embeddings.nrows();
    if cameras.len() != n || globals.len() != n {
        return Err(IkeError::ShapeMismatch(format!(
            "{n} embeddings, {} cameras, {} identities",
            cameras.len(),
            globals.len()
        )));
    }
    let sims = embeddings.dot(&embeddings.t());
    let mut total = 0.0;
    let mut scored = 0usize;
    let mut gallery: Vec<usize> = Vec::with_capacity(n);
    for q in 0..n {
        gallery.clear();
        gallery.extend((0..n).filter(|&g| {
            g != q
                && match rule {
                    GalleryRule::CrossCamera => cameras[g] != cameras[q],
                    GalleryRule::SameCameraSameId => !(cameras[g] == cameras[q] && globals[g] == globals[q]),
                    GalleryRule::ExcludeSelf => true,
                }
        }));
        let n_relevant = gallery.iter().filter(|&&g| globals[g] == globals[q]).count();
        if n_relevant == 0 {
            continue;
        }
        let row = sims.row(q);
        gallery.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
        let relevance: Vec<bool> = gallery.iter().map(|&g| globals[g] == globals[q]).collect();
        total += average_precision(&relevance, n_relevant)?;
        scored += 1;
    }
    if scored == 0 {
        return Err(IkeError::EmptyGallery);
    }
    Ok(total / scored as f64)
}

/// mAP of `encoder` on the test split.
pub fn evaluate_map(encoder: &Encoder, test: &TestSplit, rule: GalleryRule) -> Result<f64> {
    if test.is_empty() {
        return Err(IkeError::EmptyGallery);
    }
    let emb = encoder.embed(test.inputs.view())?;
    map_from_embeddings(emb.view(), &test.cameras, &test.globals, rule)
}

/// Gap to the upper bound after each camera step.
pub fn forgetting_curve(per_camera_map: &[f64], upper_bound: f64) -> Vec<f64> {
    per_camera_map.iter().map(|m| upper_bound - m).collect()
}

/// Results of one camera sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub run_id: String,
    pub seed: u64,
    pub variant: Variant,
    pub order: Vec<usize>,
    pub order_name: Option<String>,
    pub hyper: Hyperparams,
    pub per_camera_map: Vec<f64>,
    pub fmap: f64,
    pub mean_map: f64,
    pub nh_trajectory: Vec<usize>,
    pub assoc_precision: Vec<Option<f64>>,
    pub forgetting: Option<Vec<f64>>,
}

impl MetricsReport {
    /// Recomputes fmAP and mean-mAP from the per-camera values.
    pub fn summarize(per_camera_map: &[f64]) -> (f64, f64) {
        let fmap = per_camera_map.last().copied().unwrap_or(f64::NAN);
        let mean = per_camera_map.iter().sum::<f64>() / per_camera_map.len() as f64;
        (fmap, mean)
    }

    pub fn is_consistent(&self) -> bool {
        let (fmap, mean) = Self::summarize(&self.per_camera_map);
        fmap.to_bits() == self.fmap.to_bits()
            && mean.to_bits() == self.mean_map.to_bits()
            && self.nh_trajectory.len() == self.per_camera_map.len()
            && self.assoc_precision.len() == self.per_camera_map.len()
    }

    pub fn with_upper_bound(mut self, upper_bound: f64) -> Self {
        self.forgetting = Some(forgetting_curve(&self.per_camera_map, upper_bound));
        self
    }
}

/// Pairwise association precision: entry `[i][j]` trains a fresh model on
/// camera `i`, then associates camera `j` against the resulting memory.
/// The diagonal is `None`, as is any pair with no discovered match.
pub fn precision_matrix(
    data: &StreamData,
    hyper: &Hyperparams,
    hidden: &[usize],
    seed: u64,
) -> Result<Vec<Vec<Option<f64>>>> {
    let c = data.train.len();
    let mut out = vec![vec![None; c]; c];
    for i in 0..c {
        let mut state = TrainState::new(data.input_dim(), hidden, hyper.clone(), seed)?;
        train_camera(&mut state, &data.train[i], Variant::Ike)?;
        let hist_tags = state.historical_memory.provenance().ok_or(IkeError::MissingProvenance)?;
        for j in (0..c).filter(|&j| j != i) {
            let current = init_memory(&state.historical_encoder, &data.train[j])?;
            let assoc = cycle_match(&current, &state.historical_memory)?;
            let cur_tags = data.train[j].label_globals().ok_or(IkeError::MissingProvenance)?;
            out[i][j] = association_precision(&assoc, Some(&cur_tags), Some(hist_tags))?.precision;
        }
    }
    Ok(out)
}

/// Mean of the defined off-diagonal entries.
pub fn off_diagonal_mean(matrix: &[Vec<Option<f64>>]) -> Option<f64> {
    let vals: Vec<f64> = matrix
        .iter()
        .enumerate()
        .flat_map(|(i, row)| row.iter().enumerate().filter(move |(j, _)| *j != i).filter_map(|(_, v)| *v))
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}
