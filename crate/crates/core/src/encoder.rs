//! Small tanh multilayer encoder with exact reverse-mode gradients.
//!
//! Block `l` computes `h_l = tanh(W_l h_{l-1} + b_l)`, except the last block
//! which is affine. The final output is L2-normalized into the embedding.
//! Outputs of blocks 2 and 3 (1-based) are exposed as middle features for
//! layer-wise distillation.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{IkeError, Result};
use crate::memory::DEGENERATE_NORM;

/// 1-based indices of the blocks whose outputs are the middle taps.
pub const TAPS: [usize; 2] = [2, 3];

static STAMPS: AtomicU64 = AtomicU64::new(1);

fn next_stamp() -> u64 {
    STAMPS.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    #[serde(rename = "W")]
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Block {
    fn zeros_like(other: &Block) -> Self {
        Self {
            weight: Array2::zeros(other.weight.raw_dim()),
            bias: Array1::zeros(other.bias.raw_dim()),
        }
    }

    fn n_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[derive(Debug)]
pub struct Encoder {
    blocks: Vec<Block>,
    // Identifies the exact parameter values a trace was computed with.
    stamp: u64,
}

impl Clone for Encoder {
    fn clone(&self) -> Self {
        Self {
            blocks: self.blocks.clone(),
            stamp: next_stamp(),
        }
    }
}

impl PartialEq for Encoder {
    fn eq(&self, other: &Self) -> bool {
        self.blocks == other.blocks
    }
}

/// Middle features and the unit embedding of one input.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePack {
    pub middle: [Array1<f64>; 2],
    pub embedding: Array1<f64>,
}

/// Cached intermediates of a batch forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    stamp: u64,
    inputs: Array2<f64>,
    outputs: Vec<Array2<f64>>,
    norms: Array1<f64>,
    embedding: Array2<f64>,
}

impl ForwardTrace {
    pub fn embedding(&self) -> ArrayView2<'_, f64> {
        self.embedding.view()
    }

    /// Middle feature batch for tap `k` (0 for block 2, 1 for block 3).
    pub fn middle(&self, k: usize) -> ArrayView2<'_, f64> {
        self.outputs[TAPS[k] - 1].view()
    }

    pub fn batch_size(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn inputs(&self) -> ArrayView2<'_, f64> {
        self.inputs.view()
    }
}

/// Parameter gradients, shaped like the encoder blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub blocks: Vec<Block>,
}

impl EncoderGrads {
    pub fn zeros_like(encoder: &Encoder) -> Self {
        Self {
            blocks: encoder.blocks.iter().map(Block::zeros_like).collect(),
        }
    }

    /// Parameters flattened block by block, weights row-major then bias.
    pub fn flatten(&self) -> Vec<f64> {
        self.blocks
            .iter()
            .flat_map(|b| b.weight.iter().chain(b.bias.iter()).copied())
            .collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.flatten().iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSnapshot {
    pub widths: Vec<usize>,
    pub blocks: Vec<BlockSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSnapshot {
    #[serde(rename = "W")]
    pub weight: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl Encoder {
    /// Randomly initialized encoder. `widths` lists the input dimension
    /// followed by each block's output dimension; at least three blocks.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        Self::check_widths(widths)?;
        let blocks = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weight = Array2::from_shape_simple_fn((fan_out, fan_in), || rng.random_range(-limit..=limit));
                Block {
                    weight,
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Ok(Self {
            blocks,
            stamp: next_stamp(),
        })
    }

    pub fn from_blocks(blocks: Vec<Block>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(IkeError::Config("encoder needs at least three blocks".into()));
        }
        let mut widths = vec![blocks[0].weight.ncols()];
        for (l, b) in blocks.iter().enumerate() {
            if b.weight.ncols() != *widths.last().unwrap() || b.bias.len() != b.weight.nrows() {
                return Err(IkeError::ShapeMismatch(format!("block {} has inconsistent shape", l + 1)));
            }
            widths.push(b.weight.nrows());
        }
        Self::check_widths(&widths)?;
        Ok(Self {
            blocks,
            stamp: next_stamp(),
        })
    }

    fn check_widths(widths: &[usize]) -> Result<()> {
        if widths.len() < 4 {
            return Err(IkeError::Config(format!(
                "encoder needs at least three blocks, got widths {widths:?}"
            )));
        }
        if widths.contains(&0) {
            return Err(IkeError::Config(format!("zero width in {widths:?}")));
        }
        Ok(())
    }

    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.blocks.iter().map(|b| b.weight.nrows()))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.blocks[0].weight.ncols()
    }

    pub fn embedding_dim(&self) -> usize {
        self.blocks.last().unwrap().weight.nrows()
    }

    pub fn middle_dims(&self) -> [usize; 2] {
        TAPS.map(|t| self.blocks[t - 1].weight.nrows())
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    /// Mutable access to the parameters. Invalidates outstanding traces.
    pub fn blocks_mut(&mut self) -> &mut [Block] {
        self.stamp = next_stamp();
        &mut self.blocks
    }

    pub fn n_params(&self) -> usize {
        self.blocks.iter().map(Block::n_params).sum()
    }

    fn locate(&self, mut k: usize) -> (usize, usize) {
        for (l, b) in self.blocks.iter().enumerate() {
            if k < b.n_params() {
                return (l, k);
            }
            k -= b.n_params();
        }
        panic!("parameter index out of range");
    }

    /// Parameter `k` in [`EncoderGrads::flatten`] order.
    pub fn param(&self, k: usize) -> f64 {
        let (l, k) = self.locate(k);
        let b = &self.blocks[l];
        match k.checked_sub(b.weight.len()) {
            None => b.weight.as_slice().expect("standard layout")[k],
            Some(j) => b.bias[j],
        }
    }

    pub fn set_param(&mut self, k: usize, value: f64) {
        let (l, k) = self.locate(k);
        let b = &mut self.blocks_mut()[l];
        match k.checked_sub(b.weight.len()) {
            None => b.weight.as_slice_mut().expect("standard layout")[k] = value,
            Some(j) => b.bias[j] = value,
        }
    }

    pub fn forward(&self, x: ArrayView1<f64>) -> Result<FeaturePack> {
        let batch = x.insert_axis(Axis(0));
        let trace = self.forward_batch(batch)?;
        Ok(FeaturePack {
            middle: [trace.middle(0).row(0).to_owned(), trace.middle(1).row(0).to_owned()],
            embedding: trace.embedding.row(0).to_owned(),
        })
    }

    /// Forward pass over a batch (one input per row), keeping what
    /// [`Encoder::backward`] needs.
    pub fn forward_batch(&self, inputs: ArrayView2<f64>) -> Result<ForwardTrace> {
        if inputs.ncols() != self.input_dim() {
            return Err(IkeError::ShapeMismatch(format!(
                "input dim {} vs encoder input dim {}",
                inputs.ncols(),
                self.input_dim()
            )));
        }
        let last = self.blocks.len() - 1;
        let mut outputs: Vec<Array2<f64>> = Vec::with_capacity(self.blocks.len());
        for (l, b) in self.blocks.iter().enumerate() {
            let prev = if l == 0 { inputs } else { outputs[l - 1].view() };
            let mut out = prev.dot(&b.weight.t());
            out += &b.bias;
            if l < last {
                out.mapv_inplace(f64::tanh);
            }
            outputs.push(out);
        }
        let z = &outputs[last];
        let norms: Array1<f64> = z.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
        if let Some(&bad) = norms.iter().find(|n| !(**n >= DEGENERATE_NORM)) {
            return Err(IkeError::DegenerateEmbedding(bad));
        }
        let embedding = z / &norms.view().insert_axis(Axis(1));
        Ok(ForwardTrace {
            stamp: self.stamp,
            inputs: inputs.to_owned(),
            outputs,
            norms,
            embedding,
        })
    }

    /// Unit embeddings of a batch of inputs.
    pub fn embed(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_batch(inputs)?.embedding)
    }

    /// Reverse-mode gradients of a loss whose upstream gradients are given
    /// on the embedding and, optionally, on both middle taps. Gradients are
    /// summed over the batch.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        grad_embedding: ArrayView2<f64>,
        grad_middle: Option<[ArrayView2<f64>; 2]>,
    ) -> Result<EncoderGrads> {
        if trace.stamp != self.stamp {
            return Err(IkeError::StaleCache);
        }
        if grad_embedding.raw_dim() != trace.embedding.raw_dim() {
            return Err(IkeError::ShapeMismatch("embedding gradient shape".into()));
        }
        if let Some(gm) = &grad_middle {
            for (k, g) in gm.iter().enumerate() {
                if g.raw_dim() != trace.middle(k).raw_dim() {
                    return Err(IkeError::ShapeMismatch(format!("middle gradient shape at tap {}", TAPS[k])));
                }
            }
        }

        // d/dz of z/‖z‖ applied to the upstream gradient: (g − f·(fᵀg)) / ‖z‖.
        let f = &trace.embedding;
        let proj = (f * &grad_embedding).sum_axis(Axis(1));
        let mut grad_out = Array2::zeros(f.raw_dim());
        Zip::from(grad_out.rows_mut())
            .and(grad_embedding.rows())
            .and(f.rows())
            .and(&proj)
            .and(&trace.norms)
            .for_each(|mut out, g, f, &p, &n| {
                Zip::from(&mut out).and(&g).and(&f).for_each(|o, &g, &f| *o = (g - f * p) / n);
            });

        let last = self.blocks.len() - 1;
        let mut grads = Vec::with_capacity(self.blocks.len());
        for l in (0..self.blocks.len()).rev() {
            if let Some(gm) = &grad_middle {
                for (k, &tap) in TAPS.iter().enumerate() {
                    if tap - 1 == l {
                        grad_out += &gm[k];
                    }
                }
            }
            let grad_pre = if l < last {
                let h = &trace.outputs[l];
                let mut g = grad_out;
                Zip::from(&mut g).and(h).for_each(|g, &h| *g *= 1.0 - h * h);
                g
            } else {
                grad_out
            };
            let prev = if l == 0 {
                trace.inputs.view()
            } else {
                trace.outputs[l - 1].view()
            };
            let weight = grad_pre.t().dot(&prev);
            let bias = grad_pre.sum_axis(Axis(0));
            grad_out = grad_pre.dot(&self.blocks[l].weight);
            grads.push(Block { weight, bias });
        }
        grads.reverse();
        Ok(EncoderGrads { blocks: grads })
    }

    pub fn snapshot(&self) -> EncoderSnapshot {
        EncoderSnapshot {
            widths: self.widths(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockSnapshot {
                    weight: b.weight.outer_iter().map(|r| r.to_vec()).collect(),
                    b: b.bias.to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_snapshot(snap: &EncoderSnapshot) -> Result<Self> {
        let blocks = snap
            .blocks
            .iter()
            .map(|b| {
                let rows = b.weight.len();
                let cols = b.weight.first().map_or(0, Vec::len);
                let flat: Vec<f64> = b.weight.iter().flatten().copied().collect();
                let weight = Array2::from_shape_vec((rows, cols), flat)
                    .map_err(|e| IkeError::ShapeMismatch(e.to_string()))?;
                Ok(Block {
                    weight,
                    bias: Array1::from(b.b.clone()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let encoder = Self::from_blocks(blocks)?;
        if encoder.widths() != snap.widths {
            return Err(IkeError::ShapeMismatch(format!(
                "snapshot widths {:?} disagree with blocks {:?}",
                snap.widths,
                encoder.widths()
            )));
        }
        Ok(encoder)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_encoder(widths: &[usize], seed: u64) -> Encoder {
        Encoder::new(widths, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn zero_weights_give_normalized_bias() {
        let mut e = random_encoder(&[3, 4, 4, 4, 2], 1);
        for b in e.blocks_mut() {
            b.weight.fill(0.0);
        }
        e.blocks_mut()[3].bias = array![3.0, 4.0];
        let fp = e.forward(array![0.5, -1.0, 2.0].view()).unwrap();
        assert_eq!(fp.embedding.to_vec(), vec![0.6, 0.8]);
        assert!(fp.middle.iter().all(|m| m.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn embedding_is_unit() {
        let e = random_encoder(&[4, 4, 4, 2], 9);
        let fp = e.forward(array![0.1, 0.2, -0.3, 0.4].view()).unwrap();
        assert!((fp.embedding.dot(&fp.embedding).sqrt() - 1.0).abs() < 1e-12);
        // With three blocks, the second tap is the raw final block output.
        assert_eq!(fp.middle[1].len(), 2);
    }

    #[test]
    fn all_zero_output_is_degenerate() {
        let mut e = random_encoder(&[2, 3, 3, 2], 2);
        for b in e.blocks_mut() {
            b.weight.fill(0.0);
            b.bias.fill(0.0);
        }
        assert!(matches!(
            e.forward(array![1.0, 1.0].view()),
            Err(IkeError::DegenerateEmbedding(_))
        ));
    }

    #[test]
    fn too_shallow_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(Encoder::new(&[4, 4, 2], &mut rng), Err(IkeError::Config(_))));
    }

    #[test]
    fn seeded_init_is_reproducible() {
        assert_eq!(random_encoder(&[5, 6, 6, 6, 3], 42), random_encoder(&[5, 6, 6, 6, 3], 42));
        assert_ne!(random_encoder(&[5, 6, 6, 6, 3], 42), random_encoder(&[5, 6, 6, 6, 3], 43));
    }

    #[test]
    fn stale_trace_is_detected() {
        let mut e = random_encoder(&[3, 4, 4, 4, 2], 3);
        let x = array![[0.1, 0.2, 0.3]];
        let trace = e.forward_batch(x.view()).unwrap();
        let g = Array2::zeros((1, 2));
        assert!(e.backward(&trace, g.view(), None).is_ok());
        let other = e.clone();
        assert!(matches!(other.backward(&trace, g.view(), None), Err(IkeError::StaleCache)));
        e.set_param(0, 0.5);
        assert!(matches!(e.backward(&trace, g.view(), None), Err(IkeError::StaleCache)));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let e = random_encoder(&[3, 4, 4, 4, 2], 4);
        let x = array![[0.1, 0.2, 0.3], [-0.4, 0.0, 0.9]];
        let trace = e.forward_batch(x.view()).unwrap();
        let g = e.backward(&trace, Array2::zeros((2, 2)).view(), None).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn param_indexing_matches_flatten_order() {
        let mut e = random_encoder(&[2, 3, 3, 3, 2], 5);
        let flat = EncoderGrads { blocks: e.blocks().to_vec() }.flatten();
        assert_eq!(flat.len(), e.n_params());
        for (k, v) in flat.iter().enumerate() {
            assert_eq!(e.param(k), *v);
        }
        e.set_param(flat.len() - 1, 7.0);
        assert_eq!(e.blocks()[3].bias[1], 7.0);
    }

    #[test]
    fn snapshot_round_trip() {
        let e = random_encoder(&[3, 4, 5, 4, 2], 6);
        let text = crate::json::to_string(&e.snapshot()).unwrap();
        assert!(text.contains("\"widths\"") && text.contains("\"W\""));
        let back: EncoderSnapshot = serde_json::from_str(&text).unwrap();
        assert_eq!(Encoder::from_snapshot(&back).unwrap(), e);
    }
}
