//! Adam with coupled L2 weight decay and a step learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderGrads};

#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: i32,
}

impl Adam {
    pub fn new(n_params: usize, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            first: vec![0.0; n_params],
            second: vec![0.0; n_params],
            steps: 0,
        }
    }

    pub fn step(&mut self, encoder: &mut Encoder, grads: &EncoderGrads, lr: f64) {
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps);
        let c2 = 1.0 - self.beta2.powi(self.steps);
        let mut k = 0;
        for (block, grad) in encoder.blocks_mut().iter_mut().zip(&grads.blocks) {
            let params = block.weight.iter_mut().chain(block.bias.iter_mut());
            let gs = grad.weight.iter().chain(grad.bias.iter());
            for (p, &g) in params.zip(gs) {
                let g = g + self.weight_decay * *p;
                let m = &mut self.first[k];
                let v = &mut self.second[k];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                k += 1;
            }
        }
    }
}

/// Learning rate multiplied by `gamma` every `every` epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDecay {
    pub base: f64,
    pub gamma: f64,
    pub every: usize,
}

impl StepDecay {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.base * self.gamma.powi((epoch / self.every.max(1)) as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_steps_down() {
        let s = StepDecay {
            base: 3.5e-4,
            gamma: 0.1,
            every: 15,
        };
        assert_eq!(s.lr_at(0), 3.5e-4);
        assert_eq!(s.lr_at(14), 3.5e-4);
        assert!((s.lr_at(15) - 3.5e-5).abs() < 1e-18);
        assert!((s.lr_at(29) - 3.5e-5).abs() < 1e-18);
    }

    #[test]
    fn first_step_moves_by_lr_against_the_gradient() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut e = Encoder::new(&[2, 2, 2, 2], &mut rng).unwrap();
        let before = e.clone();
        let mut g = EncoderGrads::zeros_like(&e);
        g.blocks[0].bias[0] = 3.0;
        g.blocks[0].bias[1] = -0.5;
        let mut adam = Adam::new(e.n_params(), 0.0);
        adam.step(&mut e, &g, 0.01);
        assert!((e.blocks()[0].bias[0] - (before.blocks()[0].bias[0] - 0.01)).abs() < 1e-9);
        assert!((e.blocks()[0].bias[1] - (before.blocks()[0].bias[1] + 0.01)).abs() < 1e-9);
        assert_eq!(e.blocks()[1], before.blocks()[1]);
    }
}
