//! Identity memory: one unit-norm embedding per identity.
//!
//! The same structure holds the current-camera memory, which acts as the
//! classifier of the contrastive loss, and the historical memory that is
//! carried from camera to camera and grows through [`iku_merge`].

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::association::AssociationMap;
use crate::encoder::Encoder;
use crate::error::{IkeError, Result};
use crate::synth::CameraDataset;

/// Norm below which a per-identity mean is considered cancelled out.
pub const DEGENERATE_NORM: f64 = 1e-9;

/// Returns `v / ‖v‖₂`, or `None` when the norm is below [`DEGENERATE_NORM`].
pub fn normalized(v: ArrayView1<f64>) -> Option<Array1<f64>> {
    let norm = v.dot(&v).sqrt();
    if norm < DEGENERATE_NORM || !norm.is_finite() {
        return None;
    }
    Some(v.mapv(|x| x / norm))
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityMemory {
    rows: Array2<f64>,
    provenance: Option<Vec<usize>>,
}

impl IdentityMemory {
    /// Empty memory of the given embedding dimension.
    pub fn empty(dim: usize) -> Self {
        Self {
            rows: Array2::zeros((0, dim)),
            provenance: None,
        }
    }

    /// Builds a memory from rows that are normalized on the way in.
    pub fn from_rows(rows: Array2<f64>) -> Result<Self> {
        let mut rows = rows;
        for (i, mut row) in rows.axis_iter_mut(Axis(0)).enumerate() {
            let unit = normalized(row.view())
                .ok_or(IkeError::DegenerateMean { label: i, norm: row.dot(&row).sqrt() })?;
            row.assign(&unit);
        }
        Ok(Self {
            rows,
            provenance: None,
        })
    }

    pub fn with_provenance(mut self, tags: Vec<usize>) -> Result<Self> {
        if tags.len() != self.len() {
            return Err(IkeError::ShapeMismatch(format!(
                "{} provenance tags for {} rows",
                tags.len(),
                self.len()
            )));
        }
        self.provenance = Some(tags);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn rows(&self) -> ArrayView2<'_, f64> {
        self.rows.view()
    }

    pub fn row(&self, idx: usize) -> ArrayView1<'_, f64> {
        self.rows.row(idx)
    }

    /// Global-identity tags of each row, used only for diagnostics.
    pub fn provenance(&self) -> Option<&[usize]> {
        self.provenance.as_deref()
    }

    /// Largest deviation of any row norm from one.
    pub fn max_norm_error(&self) -> f64 {
        self.rows
            .axis_iter(Axis(0))
            .map(|r| (r.dot(&r).sqrt() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn snapshot(&self) -> MemorySnapshot {
        MemorySnapshot {
            dim: self.dim(),
            rows: self.rows.outer_iter().map(|r| r.to_vec()).collect(),
            provenance: self.provenance.clone(),
        }
    }

    pub fn from_snapshot(snap: &MemorySnapshot) -> Result<Self> {
        let n = snap.rows.len();
        let mut rows = Array2::zeros((n, snap.dim));
        for (i, r) in snap.rows.iter().enumerate() {
            if r.len() != snap.dim {
                return Err(IkeError::ShapeMismatch(format!(
                    "row {i} has {} values, expected {}",
                    r.len(),
                    snap.dim
                )));
            }
            rows.row_mut(i).assign(&ArrayView1::from(r.as_slice()));
        }
        let memory = Self {
            rows,
            provenance: None,
        };
        match &snap.provenance {
            Some(tags) => memory.with_provenance(tags.clone()),
            None => Ok(memory),
        }
    }
}

/// On-disk form of an [`IdentityMemory`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorySnapshot {
    pub dim: usize,
    pub rows: Vec<Vec<f64>>,
    pub provenance: Option<Vec<usize>>,
}

/// Cosine score of `f` against every row of `memory` (rows are unit, so the
/// dot product is the cosine). Higher means more similar.
pub fn cosine_scores(f: ArrayView1<f64>, memory: &IdentityMemory) -> Result<Array1<f64>> {
    if memory.is_empty() {
        return Err(IkeError::EmptyMemory);
    }
    if f.len() != memory.dim() {
        return Err(IkeError::ShapeMismatch(format!(
            "feature dim {} vs memory dim {}",
            f.len(),
            memory.dim()
        )));
    }
    Ok(memory.rows.dot(&f))
}

/// Builds a memory whose row `y` is the normalized mean of `features` rows
/// labelled `y`. Labels must cover `0..n_ids` without gaps.
pub fn memory_from_features(
    features: ArrayView2<f64>,
    labels: &[usize],
    n_ids: usize,
) -> Result<IdentityMemory> {
    if features.nrows() != labels.len() {
        return Err(IkeError::ShapeMismatch(format!(
            "{} features for {} labels",
            features.nrows(),
            labels.len()
        )));
    }
    let mut sums = Array2::<f64>::zeros((n_ids, features.ncols()));
    let mut counts = vec![0usize; n_ids];
    for (f, &y) in features.outer_iter().zip(labels) {
        if y >= n_ids {
            return Err(IkeError::LabelOutOfRange { label: y, n_ids });
        }
        let mut row = sums.row_mut(y);
        row += &f;
        counts[y] += 1;
    }
    if let Some(label) = counts.iter().position(|&c| c == 0) {
        return Err(IkeError::MissingLabel { label, n_ids });
    }
    for (y, mut row) in sums.axis_iter_mut(Axis(0)).enumerate() {
        row /= counts[y] as f64;
        let norm = row.dot(&row).sqrt();
        let unit = normalized(row.view()).ok_or(IkeError::DegenerateMean { label: y, norm })?;
        row.assign(&unit);
    }
    Ok(IdentityMemory {
        rows: sums,
        provenance: None,
    })
}

/// Memory of `dataset` under `encoder`: row `y` is the normalized mean
/// embedding of the images labelled `y`. Rows carry global tags when the
/// dataset knows them.
pub fn init_memory(encoder: &Encoder, dataset: &CameraDataset) -> Result<IdentityMemory> {
    if dataset.is_empty() {
        return Err(IkeError::EmptyBatch);
    }
    let emb = encoder.embed(dataset.inputs().view())?;
    let memory = memory_from_features(emb.view(), dataset.labels(), dataset.n_ids())?;
    match dataset.label_globals() {
        Some(tags) => memory.with_provenance(tags),
        None => Ok(memory),
    }
}

/// Blends `f` into row `idx`: `row ← normalize(ω·row + (1−ω)·f)`.
pub fn momentum_update(
    memory: &mut IdentityMemory,
    idx: usize,
    f: ArrayView1<f64>,
    omega: f64,
) -> Result<()> {
    if idx >= memory.len() {
        return Err(IkeError::IndexOutOfRange {
            index: idx,
            len: memory.len(),
        });
    }
    if f.len() != memory.dim() {
        return Err(IkeError::ShapeMismatch(format!(
            "feature dim {} vs memory dim {}",
            f.len(),
            memory.dim()
        )));
    }
    let mut row = memory.rows.row_mut(idx);
    row.zip_mut_with(&f, |m, &x| *m = omega * *m + (1.0 - omega) * x);
    let norm = row.dot(&row).sqrt();
    let unit = normalized(row.view()).ok_or(IkeError::DegenerateMean { label: idx, norm })?;
    row.assign(&unit);
    Ok(())
}

/// Evolves the historical memory after a camera: matched rows become
/// `normalize(λ·Mh[j] + (1−λ)·Mc[i])`, unmatched current rows are appended in
/// ascending order.
pub fn iku_merge(
    historical: &IdentityMemory,
    current: &IdentityMemory,
    assoc: &AssociationMap,
    lambda: f64,
) -> Result<IdentityMemory> {
    if assoc.len() != current.len() {
        return Err(IkeError::ShapeMismatch(format!(
            "association of length {} for {} current identities",
            assoc.len(),
            current.len()
        )));
    }
    if !historical.is_empty() && historical.dim() != current.dim() {
        return Err(IkeError::ShapeMismatch(format!(
            "historical dim {} vs current dim {}",
            historical.dim(),
            current.dim()
        )));
    }
    let dim = current.dim();
    let unmatched: Vec<usize> = (0..current.len()).filter(|&i| assoc.get(i).is_none()).collect();
    let n_h = historical.len();
    let mut rows = Array2::zeros((n_h + unmatched.len(), dim));
    rows.slice_mut(ndarray::s![..n_h, ..]).assign(&historical.rows);

    for (i, matched) in assoc.iter().enumerate() {
        if let Some(j) = matched {
            if j >= n_h {
                return Err(IkeError::IndexOutOfRange { index: j, len: n_h });
            }
            let blended = &historical.rows.row(j) * lambda + &current.rows.row(i) * (1.0 - lambda);
            let norm = blended.dot(&blended).sqrt();
            let unit = normalized(blended.view()).ok_or(IkeError::DegenerateMean { label: j, norm })?;
            rows.row_mut(j).assign(&unit);
        }
    }
    for (k, &i) in unmatched.iter().enumerate() {
        rows.row_mut(n_h + k).assign(&current.rows.row(i));
    }

    let provenance = match (&historical.provenance, &current.provenance) {
        (Some(h), Some(c)) => Some(h.iter().copied().chain(unmatched.iter().map(|&i| c[i])).collect()),
        (None, Some(c)) if n_h == 0 => Some(unmatched.iter().map(|&i| c[i]).collect()),
        _ => None,
    };
    Ok(IdentityMemory { rows, provenance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn mem(rows: Array2<f64>) -> IdentityMemory {
        IdentityMemory::from_rows(rows).unwrap()
    }

    #[test]
    fn scores_on_orthonormal_basis() {
        let m = mem(array![[1.0, 0.0], [0.0, 1.0]]);
        let s = cosine_scores(array![1.0, 0.0].view(), &m).unwrap();
        assert_eq!(s.to_vec(), vec![1.0, 0.0]);
    }

    #[test]
    fn scores_reject_empty_memory() {
        let m = IdentityMemory::empty(3);
        assert!(matches!(
            cosine_scores(array![1.0, 0.0, 0.0].view(), &m),
            Err(IkeError::EmptyMemory)
        ));
    }

    #[test]
    fn self_similarity_is_unique_max() {
        let m = mem(array![[1.0, 0.0, 0.0], [0.6, 0.8, 0.0], [0.0, 0.6, 0.8]]);
        let s = cosine_scores(m.row(1), &m).unwrap();
        assert!((s[1] - 1.0).abs() < 1e-15);
        assert!(s[0] < s[1] && s[2] < s[1]);
    }

    #[test]
    fn momentum_degenerate_factors() {
        let mut m = mem(array![[1.0, 0.0], [0.0, 1.0]]);
        let before = m.clone();
        momentum_update(&mut m, 0, array![0.0, 1.0].view(), 1.0).unwrap();
        assert_eq!(m, before);
        momentum_update(&mut m, 0, array![0.0, 1.0].view(), 0.0).unwrap();
        assert_eq!(m.row(0).to_vec(), vec![0.0, 1.0]);
    }

    #[test]
    fn momentum_default_factor_hand_algebra() {
        let mut m = mem(array![[1.0, 0.0]]);
        momentum_update(&mut m, 0, array![0.0, 1.0].view(), 0.1).unwrap();
        let n = (0.1f64 * 0.1 + 0.9 * 0.9).sqrt();
        assert!((m.row(0)[0] - 0.1 / n).abs() < 1e-15);
        assert!((m.row(0)[1] - 0.9 / n).abs() < 1e-15);
        assert!((m.row(0)[0] - 0.11043).abs() < 1e-5);
        assert!((m.row(0)[1] - 0.99388).abs() < 1e-5);
    }

    #[test]
    fn momentum_out_of_range() {
        let mut m = mem(array![[1.0, 0.0]]);
        assert!(matches!(
            momentum_update(&mut m, 1, array![0.0, 1.0].view(), 0.5),
            Err(IkeError::IndexOutOfRange { index: 1, len: 1 })
        ));
    }

    #[test]
    fn mean_of_single_image_is_the_image() {
        let f = array![[0.6, 0.8]];
        let m = memory_from_features(f.view(), &[0], 1).unwrap();
        assert_eq!(m.row(0).to_vec(), vec![0.6, 0.8]);
    }

    #[test]
    fn cancelling_features_are_degenerate() {
        let f = array![[0.6, 0.8], [-0.6, -0.8]];
        assert!(matches!(
            memory_from_features(f.view(), &[0, 0], 1),
            Err(IkeError::DegenerateMean { label: 0, .. })
        ));
    }

    #[test]
    fn gap_in_labels_is_reported() {
        let f = array![[0.6, 0.8], [1.0, 0.0]];
        assert!(matches!(
            memory_from_features(f.view(), &[0, 2], 3),
            Err(IkeError::MissingLabel { label: 1, n_ids: 3 })
        ));
    }

    #[test]
    fn merge_all_unmatched_concatenates() {
        let h = mem(array![[1.0, 0.0]]).with_provenance(vec![7]).unwrap();
        let c = mem(array![[0.0, 1.0], [0.6, 0.8]]).with_provenance(vec![3, 4]).unwrap();
        let out = iku_merge(&h, &c, &AssociationMap::unmatched(2), 0.25).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(out.row(1).to_vec(), vec![0.0, 1.0]);
        assert_eq!(out.provenance(), Some(&[7, 3, 4][..]));
    }

    #[test]
    fn merge_lambda_one_keeps_history() {
        let h = mem(array![[1.0, 0.0], [0.0, 1.0]]);
        let c = mem(array![[0.6, 0.8], [0.8, 0.6]]);
        let assoc = AssociationMap::new(vec![Some(1), Some(0)]);
        let out = iku_merge(&h, &c, &assoc, 1.0).unwrap();
        assert_eq!(out, h);
        let out = iku_merge(&h, &c, &assoc, 0.0).unwrap();
        assert_eq!(out.row(1).to_vec(), c.row(0).to_vec());
        assert_eq!(out.row(0).to_vec(), c.row(1).to_vec());
    }

    #[test]
    fn merge_dimension_mismatch() {
        let h = mem(array![[1.0, 0.0]]);
        let c = mem(array![[1.0, 0.0, 0.0]]);
        assert!(matches!(
            iku_merge(&h, &c, &AssociationMap::unmatched(1), 0.5),
            Err(IkeError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn snapshot_round_trip() {
        let m = mem(array![[0.3, 0.4], [1.0, 1.0]]).with_provenance(vec![1, 2]).unwrap();
        let text = crate::json::to_string(&m.snapshot()).unwrap();
        let back: MemorySnapshot = serde_json::from_str(&text).unwrap();
        assert_eq!(IdentityMemory::from_snapshot(&back).unwrap(), m);
    }
}
