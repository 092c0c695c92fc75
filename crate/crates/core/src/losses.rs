//! The four distillation-training loss terms and their sum.
//!
//! Every term is a batch mean and returns its gradient with respect to the
//! current model's features. Memories and historical features are constants.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{IkeError, Result};
use crate::memory::IdentityMemory;

/// Value of one loss term and its gradient on the features it consumed.
#[derive(Debug, Clone, PartialEq)]
pub struct TermOutput {
    pub value: f64,
    pub grad: Array2<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub id: f64,
    pub id_hist: f64,
    pub kd: f64,
    pub mkd: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Unweighted sum; disabled terms are passed as `None` and recorded as 0.
    pub fn new(id: f64, id_hist: Option<f64>, kd: Option<f64>, mkd: Option<f64>) -> Self {
        let id_hist = id_hist.unwrap_or(0.0);
        let kd = kd.unwrap_or(0.0);
        let mkd = mkd.unwrap_or(0.0);
        Self {
            id,
            id_hist,
            kd,
            mkd,
            total: id + id_hist + kd + mkd,
        }
    }

    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.id += other.id;
        self.id_hist += other.id_hist;
        self.kd += other.kd;
        self.mkd += other.mkd;
        self.total += other.total;
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            id: self.id * s,
            id_hist: self.id_hist * s,
            kd: self.kd * s,
            mkd: self.mkd * s,
            total: self.total * s,
        }
    }
}

fn check_features(features: ArrayView2<f64>, memory: &IdentityMemory) -> Result<()> {
    if features.nrows() == 0 {
        return Err(IkeError::EmptyBatch);
    }
    if !memory.is_empty() && features.ncols() != memory.dim() {
        return Err(IkeError::ShapeMismatch(format!(
            "feature dim {} vs memory dim {}",
            features.ncols(),
            memory.dim()
        )));
    }
    Ok(())
}

/// Softmax cross-entropy of `features · memoryᵀ / τ` for the rows that carry
/// a label, normalized by the full batch size.
fn memory_contrast(
    features: ArrayView2<f64>,
    labels: &[Option<usize>],
    memory: &IdentityMemory,
    tau: f64,
) -> Result<TermOutput> {
    let batch = features.nrows();
    let n = memory.len();
    let mut grad = Array2::zeros(features.raw_dim());
    if labels.iter().all(Option::is_none) {
        return Ok(TermOutput { value: 0.0, grad });
    }
    if let Some(&label) = labels.iter().flatten().find(|&&y| y >= n) {
        return Err(IkeError::LabelOutOfRange { label, n_ids: n });
    }
    let scale = 1.0 / (tau * batch as f64);
    let mut logits = features.dot(&memory.rows().t());
    logits.mapv_inplace(|s| s / tau);
    let mut value = 0.0;
    // Rows of `logits` become (softmax − onehot) in place, zero when unlabelled.
    for (mut row, label) in logits.axis_iter_mut(Axis(0)).zip(labels) {
        let Some(y) = *label else {
            row.fill(0.0);
            continue;
        };
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let target = row[y] - max;
        let mut sum = 0.0;
        row.mapv_inplace(|v| {
            let e = (v - max).exp();
            sum += e;
            e
        });
        value += sum.ln() - target;
        row.mapv_inplace(|e| e / sum);
        row[y] -= 1.0;
    }
    grad.assign(&logits.dot(&memory.rows()));
    grad *= scale;
    Ok(TermOutput {
        value: value / batch as f64,
        grad,
    })
}

/// Contrastive identity loss of the current camera against its memory.
pub fn loss_id(features: ArrayView2<f64>, labels: &[usize], memory: &IdentityMemory, tau: f64) -> Result<TermOutput> {
    check_features(features, memory)?;
    if labels.len() != features.nrows() {
        return Err(IkeError::ShapeMismatch(format!(
            "{} labels for batch of {}",
            labels.len(),
            features.nrows()
        )));
    }
    let labels: Vec<Option<usize>> = labels.iter().map(|&y| Some(y)).collect();
    memory_contrast(features, &labels, memory, tau)
}

/// Contrastive loss against the frozen historical memory; samples without
/// a historical label contribute nothing.
pub fn loss_id_hist(
    features: ArrayView2<f64>,
    hist_labels: &[Option<usize>],
    memory: &IdentityMemory,
    tau: f64,
) -> Result<TermOutput> {
    check_features(features, memory)?;
    if hist_labels.len() != features.nrows() {
        return Err(IkeError::ShapeMismatch(format!(
            "{} labels for batch of {}",
            hist_labels.len(),
            features.nrows()
        )));
    }
    memory_contrast(features, hist_labels, memory, tau)
}

fn squared_gap(current: ArrayView2<f64>, historical: ArrayView2<f64>, gates: &[f64], weight: f64) -> Result<TermOutput> {
    if current.raw_dim() != historical.raw_dim() || gates.len() != current.nrows() {
        return Err(IkeError::ShapeMismatch(format!(
            "current {:?}, historical {:?}, {} gates",
            current.shape(),
            historical.shape(),
            gates.len()
        )));
    }
    let batch = current.nrows();
    if batch == 0 {
        return Err(IkeError::EmptyBatch);
    }
    let mut grad = &current - &historical;
    let mut value = 0.0;
    for (mut row, &g) in grad.axis_iter_mut(Axis(0)).zip(gates) {
        value += g * row.dot(&row);
        let s = 2.0 * weight * g / batch as f64;
        row.mapv_inplace(|d| s * d);
    }
    Ok(TermOutput {
        value: weight * value / batch as f64,
        grad,
    })
}

/// Gated squared distance between current and historical embeddings.
pub fn loss_kd(current: ArrayView2<f64>, historical: ArrayView2<f64>, gates: &[f64]) -> Result<TermOutput> {
    squared_gap(current, historical, gates, 1.0)
}

/// Gated squared distance between middle features at both taps, halved.
/// Returns the value and one gradient per tap.
pub fn loss_mkd(
    current: [ArrayView2<f64>; 2],
    historical: [ArrayView2<f64>; 2],
    gates: &[f64],
) -> Result<(f64, [Array2<f64>; 2])> {
    let a = squared_gap(current[0], historical[0], gates, 0.5)?;
    let b = squared_gap(current[1], historical[1], gates, 0.5)?;
    Ok((a.value + b.value, [a.grad, b.grad]))
}

/// Which of the history-dependent terms take part in the total.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TermSwitches {
    pub id_hist: bool,
    pub kd: bool,
    pub mkd: bool,
}

impl TermSwitches {
    pub const ID_ONLY: Self = Self {
        id_hist: false,
        kd: false,
        mkd: false,
    };
    pub const ALL: Self = Self {
        id_hist: true,
        kd: true,
        mkd: true,
    };
}

/// Everything the combined loss needs for one batch.
#[derive(Debug, Clone, Copy)]
pub struct IkdBatch<'a> {
    pub embedding: ArrayView2<'a, f64>,
    pub middle: [ArrayView2<'a, f64>; 2],
    pub hist_embedding: ArrayView2<'a, f64>,
    pub hist_middle: [ArrayView2<'a, f64>; 2],
    pub labels: &'a [usize],
    pub hist_labels: &'a [Option<usize>],
    pub distill_gates: &'a [f64],
    pub current_memory: &'a IdentityMemory,
    pub historical_memory: &'a IdentityMemory,
    pub tau: f64,
}

/// Combined loss with gradients on the current embedding and middle taps.
#[derive(Debug, Clone)]
pub struct IkdOutput {
    pub breakdown: LossBreakdown,
    pub grad_embedding: Array2<f64>,
    pub grad_middle: Option<[Array2<f64>; 2]>,
}

/// Sum of the enabled terms. Disabled terms are not evaluated at all, so a
/// run with every history term off is arithmetically identical to `L_id`.
pub fn loss_total(batch: &IkdBatch<'_>, switches: TermSwitches) -> Result<IkdOutput> {
    let id = loss_id(batch.embedding, batch.labels, batch.current_memory, batch.tau)?;
    let mut grad_embedding = id.grad;

    let id_hist = if switches.id_hist {
        let t = loss_id_hist(batch.embedding, batch.hist_labels, batch.historical_memory, batch.tau)?;
        grad_embedding += &t.grad;
        Some(t.value)
    } else {
        None
    };
    let kd = if switches.kd {
        let t = loss_kd(batch.embedding, batch.hist_embedding, batch.distill_gates)?;
        grad_embedding += &t.grad;
        Some(t.value)
    } else {
        None
    };
    let (mkd, grad_middle) = if switches.mkd {
        let (v, g) = loss_mkd(batch.middle, batch.hist_middle, batch.distill_gates)?;
        (Some(v), Some(g))
    } else {
        (None, None)
    };
    Ok(IkdOutput {
        breakdown: LossBreakdown::new(id.value, id_hist, kd, mkd),
        grad_embedding,
        grad_middle,
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
    fn single_class_has_zero_loss() {
        let m = mem(array![[1.0, 0.0]]);
        let f = array![[0.6, 0.8]];
        let t = loss_id(f.view(), &[0], &m, 0.05).unwrap();
        assert!(t.value.abs() < 1e-15);
        assert!(t.grad.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn equal_scores_give_log_n() {
        let m = mem(array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let s = 1.0 / 3f64.sqrt();
        let f = array![[s, s, s]];
        let t = loss_id(f.view(), &[2], &m, 0.05).unwrap();
        assert!((t.value - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_and_bad_label() {
        let m = mem(array![[1.0, 0.0]]);
        let f = Array2::<f64>::zeros((0, 2));
        assert!(matches!(loss_id(f.view(), &[], &m, 0.05), Err(IkeError::EmptyBatch)));
        let f = array![[1.0, 0.0]];
        assert!(matches!(
            loss_id(f.view(), &[1], &m, 0.05),
            Err(IkeError::LabelOutOfRange { label: 1, n_ids: 1 })
        ));
    }

    #[test]
    fn fully_gated_history_is_zero() {
        let m = mem(array![[1.0, 0.0], [0.0, 1.0]]);
        let f = array![[0.6, 0.8], [1.0, 0.0]];
        let t = loss_id_hist(f.view(), &[None, None], &m, 0.05).unwrap();
        assert_eq!(t.value, 0.0);
        assert!(t.grad.iter().all(|&g| g == 0.0));
        // Also fine against an empty historical memory.
        let t = loss_id_hist(f.view(), &[None, None], &IdentityMemory::empty(2), 0.05).unwrap();
        assert_eq!(t.value, 0.0);
    }

    #[test]
    fn single_history_row_is_zero() {
        let m = mem(array![[0.0, 1.0]]);
        let f = array![[0.6, 0.8], [1.0, 0.0]];
        let t = loss_id_hist(f.view(), &[Some(0), None], &m, 0.05).unwrap();
        assert!(t.value.abs() < 1e-15);
    }

    #[test]
    fn kd_forced_values() {
        let fc = array![[1.0, 0.0]];
        let fh = array![[0.0, 1.0]];
        let t = loss_kd(fc.view(), fh.view(), &[1.0]).unwrap();
        assert_eq!(t.value, 2.0);
        assert_eq!(t.grad.row(0).to_vec(), vec![2.0, -2.0]);
        let t = loss_kd(fc.view(), fh.view(), &[0.0]).unwrap();
        assert_eq!(t.value, 0.0);
        let t = loss_kd(fc.view(), fc.view(), &[1.0]).unwrap();
        assert_eq!(t.value, 0.0);
        assert!(matches!(
            loss_kd(fc.view(), array![[1.0, 0.0, 0.0]].view(), &[1.0]),
            Err(IkeError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn mkd_single_layer_difference() {
        let h2c = array![[1.0, 2.0, 3.0]];
        let h2h = array![[0.0, 2.0, 1.0]];
        let h3 = array![[0.5, 0.5]];
        let (v, g) = loss_mkd([h2c.view(), h3.view()], [h2h.view(), h3.view()], &[1.0]).unwrap();
        // v = (1, 0, 2): ½‖v‖² = 2.5, gradient v on the first tap.
        assert_eq!(v, 2.5);
        assert_eq!(g[0].row(0).to_vec(), vec![1.0, 0.0, 2.0]);
        assert!(g[1].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn breakdown_sums_terms() {
        let b = LossBreakdown::new(1.5, Some(0.25), None, Some(0.125));
        assert_eq!(b.total, 1.875);
        assert_eq!(b.kd, 0.0);
        let zero = LossBreakdown::new(0.0, Some(0.0), Some(0.0), Some(0.0));
        assert_eq!(zero.total, 0.0);
    }
}
