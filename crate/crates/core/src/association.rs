//! Identity association between the current and historical memories.
//!
//! A current identity `i` and a historical identity `j` form a pair when each
//! is the other's highest-scoring row (mutual argmax). Exact ties go to the
//! lowest index in both directions.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{IkeError, Result};
use crate::memory::IdentityMemory;
use crate::synth::CameraDataset;

/// Per-current-identity historical index, or `None` for unique identities.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssociationMap {
    matches: Vec<Option<usize>>,
}

impl AssociationMap {
    pub fn new(matches: Vec<Option<usize>>) -> Self {
        Self { matches }
    }

    pub fn unmatched(n: usize) -> Self {
        Self {
            matches: vec![None; n],
        }
    }

    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<usize> {
        self.matches[i]
    }

    /// `sgn(y')`: 1 when matched, 0 otherwise.
    pub fn gate(&self, i: usize) -> f64 {
        if self.matches[i].is_some() {
            1.0
        } else {
            0.0
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Option<usize>> + '_ {
        self.matches.iter().copied()
    }

    pub fn as_slice(&self) -> &[Option<usize>] {
        &self.matches
    }

    pub fn n_matched(&self) -> usize {
        self.matches.iter().filter(|m| m.is_some()).count()
    }

    /// True when no two current identities share a historical index.
    pub fn is_injective(&self) -> bool {
        let mut seen = std::collections::HashSet::new();
        self.matches.iter().flatten().all(|j| seen.insert(*j))
    }
}

/// Options for [`cycle_match_with`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchOptions {
    /// Reject mutual pairs whose cosine is below this value. Off by default.
    pub min_score: Option<f64>,
}

fn check_dims(current: &IdentityMemory, historical: &IdentityMemory) -> Result<()> {
    if current.dim() != historical.dim() {
        return Err(IkeError::ShapeMismatch(format!(
            "current dim {} vs historical dim {}",
            current.dim(),
            historical.dim()
        )));
    }
    Ok(())
}

fn argmax(values: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (k, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = k;
        }
    }
    best
}

fn score_matrix(current: &IdentityMemory, historical: &IdentityMemory) -> Array2<f64> {
    current.rows().dot(&historical.rows().t())
}

/// Mutual-argmax matching of `current` rows against `historical` rows.
pub fn cycle_match(current: &IdentityMemory, historical: &IdentityMemory) -> Result<AssociationMap> {
    cycle_match_with(current, historical, MatchOptions::default())
}

pub fn cycle_match_with(
    current: &IdentityMemory,
    historical: &IdentityMemory,
    options: MatchOptions,
) -> Result<AssociationMap> {
    if historical.is_empty() {
        return Ok(AssociationMap::unmatched(current.len()));
    }
    check_dims(current, historical)?;
    let scores = score_matrix(current, historical);
    let backward: Vec<usize> = scores.columns().into_iter().map(argmax).collect();
    let matches = scores
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, row)| {
            let j = argmax(row);
            let accepted = backward[j] == i && options.min_score.is_none_or(|t| row[j] >= t);
            accepted.then_some(j)
        })
        .collect();
    Ok(AssociationMap { matches })
}

/// One-directional assignment: every current identity takes its best
/// historical row, with no mutual check (used by the IKE-A ablation).
pub fn argmax_assign(current: &IdentityMemory, historical: &IdentityMemory) -> Result<AssociationMap> {
    if historical.is_empty() {
        return Ok(AssociationMap::unmatched(current.len()));
    }
    check_dims(current, historical)?;
    let scores = score_matrix(current, historical);
    Ok(AssociationMap {
        matches: scores.rows().into_iter().map(|r| Some(argmax(r))).collect(),
    })
}

/// One training sample carrying both its current label and its historical
/// label (if any).
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSample {
    pub index: usize,
    pub local_label: usize,
    pub hist_label: Option<usize>,
    pub global_id: Option<usize>,
}

/// Attaches `assoc[local_label]` to every sample of `dataset`. Inputs stay in
/// the dataset; samples refer to them by `index`.
pub fn augment_dataset(dataset: &CameraDataset, assoc: &AssociationMap) -> Result<Vec<AugmentedSample>> {
    dataset
        .labels()
        .iter()
        .enumerate()
        .map(|(index, &y)| {
            if y >= assoc.len() {
                return Err(IkeError::LabelOutOfRange {
                    label: y,
                    n_ids: assoc.len(),
                });
            }
            Ok(AugmentedSample {
                index,
                local_label: y,
                hist_label: assoc.get(y),
                global_id: dataset.globals()[index],
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssociationPrecision {
    pub precision: Option<f64>,
    pub discovered: usize,
    pub correct: usize,
}

/// Fraction of discovered matches whose global identities agree.
pub fn association_precision(
    assoc: &AssociationMap,
    current_globals: Option<&[usize]>,
    historical_globals: Option<&[usize]>,
) -> Result<AssociationPrecision> {
    let (cur, hist) = match (current_globals, historical_globals) {
        (Some(c), Some(h)) => (c, h),
        _ => return Err(IkeError::MissingProvenance),
    };
    if cur.len() != assoc.len() {
        return Err(IkeError::ShapeMismatch(format!(
            "{} current tags for association of length {}",
            cur.len(),
            assoc.len()
        )));
    }
    let mut discovered = 0;
    let mut correct = 0;
    for (i, m) in assoc.iter().enumerate() {
        if let Some(j) = m {
            let tag = *hist.get(j).ok_or(IkeError::IndexOutOfRange {
                index: j,
                len: hist.len(),
            })?;
            discovered += 1;
            if cur[i] == tag {
                correct += 1;
            }
        }
    }
    Ok(AssociationPrecision {
        precision: (discovered > 0).then(|| correct as f64 / discovered as f64),
        discovered,
        correct,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn mem(rows: Array2<f64>) -> IdentityMemory {
        IdentityMemory::from_rows(rows).unwrap()
    }

    #[test]
    fn empty_history_matches_nothing() {
        let c = mem(array![[1.0, 0.0], [0.0, 1.0]]);
        let a = cycle_match(&c, &IdentityMemory::empty(2)).unwrap();
        assert_eq!(a, AssociationMap::unmatched(2));
    }

    #[test]
    fn identical_memories_self_match() {
        let c = mem(array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let a = cycle_match(&c, &c).unwrap();
        assert_eq!(a.as_slice(), &[Some(0), Some(1), Some(2)]);
    }

    #[test]
    fn non_mutual_best_is_rejected() {
        // Both current rows prefer historical row 0, which prefers current row 0.
        let c = mem(array![[1.0, 0.0], [0.8, 0.6]]);
        let h = mem(array![[1.0, 0.0], [-0.6, 0.8]]);
        let a = cycle_match(&c, &h).unwrap();
        assert_eq!(a.as_slice(), &[Some(0), None]);
        let one_way = argmax_assign(&c, &h).unwrap();
        assert_eq!(one_way.as_slice(), &[Some(0), Some(0)]);
        assert!(!one_way.is_injective());
    }

    #[test]
    fn ties_break_to_lowest_index() {
        let c = mem(array![[1.0, 0.0]]);
        let h = mem(array![[0.6, 0.8], [0.6, -0.8]]);
        let a = cycle_match(&c, &h).unwrap();
        assert_eq!(a.as_slice(), &[Some(0)]);
    }

    #[test]
    fn min_score_filter() {
        let c = mem(array![[1.0, 0.0]]);
        let h = mem(array![[0.6, 0.8]]);
        let opts = MatchOptions { min_score: Some(0.7) };
        assert_eq!(cycle_match_with(&c, &h, opts).unwrap().as_slice(), &[None]);
        assert_eq!(cycle_match(&c, &h).unwrap().as_slice(), &[Some(0)]);
    }

    #[test]
    fn dimension_mismatch() {
        let c = mem(array![[1.0, 0.0]]);
        let h = mem(array![[1.0, 0.0, 0.0]]);
        assert!(matches!(cycle_match(&c, &h), Err(IkeError::ShapeMismatch(_))));
    }

    #[test]
    fn precision_counts() {
        let a = AssociationMap::new(vec![Some(0), Some(1), None, Some(2), Some(3)]);
        let p = association_precision(&a, Some(&[5, 6, 7, 8, 9]), Some(&[5, 6, 7, 0])).unwrap();
        assert_eq!(p.discovered, 4);
        assert_eq!(p.correct, 2);
        assert_eq!(p.precision, Some(0.5));

        let a = AssociationMap::new(vec![Some(0), Some(1), None, Some(2), Some(3)]);
        let p = association_precision(&a, Some(&[5, 6, 7, 8, 9]), Some(&[5, 6, 8, 9])).unwrap();
        assert_eq!(p.precision, Some(1.0));

        let p = association_precision(&AssociationMap::unmatched(2), Some(&[1, 2]), Some(&[1])).unwrap();
        assert_eq!(p.precision, None);
        assert_eq!(p.discovered, 0);

        assert!(matches!(
            association_precision(&a, None, Some(&[1])),
            Err(IkeError::MissingProvenance)
        ));
    }

    #[test]
    fn map_json_shape() {
        let a = AssociationMap::new(vec![Some(3), None]);
        assert_eq!(serde_json::to_string(&a).unwrap(), r#"{"matches":[3,null]}"#);
    }
}
