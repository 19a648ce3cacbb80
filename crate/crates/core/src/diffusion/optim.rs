//! Adaptive-moment optimizer with decoupled weight decay.

use crate::tensor::Tensor;
use std::collections::BTreeMap;

/// Moments are keyed by parameter name so the state survives checkpointing
/// and parameter maps can be iterated in any consistent order.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub step_count: u64,
    pub m: BTreeMap<String, Vec<f32>>,
    pub v: BTreeMap<String, Vec<f32>>,
}

impl AdamW {
    pub fn new(lr: f32) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
            step_count: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update over every (parameter, gradient) pair. Decay is decoupled:
    /// it scales the parameter directly and never enters the moments.
    pub fn step(&mut self, params: &mut BTreeMap<String, Tensor>, grads: &BTreeMap<String, Vec<f32>>) {
        self.step_count += 1;
        let t = self.step_count as f64;
        let b1 = f64::from(self.beta1);
        let b2 = f64::from(self.beta2);
        let bc1 = 1.0 - b1.powf(t);
        let bc2 = 1.0 - b2.powf(t);
        let lr = f64::from(self.lr);
        let eps = f64::from(self.eps);
        let wd = f64::from(self.weight_decay);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("gradient for unknown parameter");
            assert_eq!(p.data.len(), g.len(), "{name}: gradient length");
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                let gi = f64::from(g[i]);
                let mi = b1 * f64::from(m[i]) + (1.0 - b1) * gi;
                let vi = b2 * f64::from(v[i]) + (1.0 - b2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                let x = f64::from(p.data[i]);
                p.data[i] = (x - lr * (mhat / (vhat.sqrt() + eps) + wd * x)) as f32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_a_hand_computed_trajectory() {
        // single scalar parameter, constant gradient 0.5, three steps in f64
        let mut params = BTreeMap::new();
        params.insert("w".to_string(), Tensor::new(vec![1.0], vec![1]));
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![0.5f32]);
        let mut opt = AdamW::new(1e-2);

        let (b1, b2, eps, wd, lr) = (0.9f64, 0.999f64, 1e-8f64, 1e-2f64, 1e-2f64);
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 1.0f64);
        for t in 1..=3u32 {
            let g = 0.5f64;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mhat = m / (1.0 - b1.powi(t as i32));
            let vhat = v / (1.0 - b2.powi(t as i32));
            x -= lr * (mhat / (vhat.sqrt() + eps) + wd * x);
            opt.step(&mut params, &grads);
            let got = f64::from(params["w"].data[0]);
            assert!((got - x).abs() < 1e-6, "step {t}: {got} vs {x}");
        }
    }

    #[test]
    fn skips_parameters_without_gradients() {
        let mut params = BTreeMap::new();
        params.insert("a".to_string(), Tensor::new(vec![2.0], vec![1]));
        params.insert("b".to_string(), Tensor::new(vec![3.0], vec![1]));
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), vec![1.0f32]);
        let mut opt = AdamW::new(1e-3);
        opt.step(&mut params, &grads);
        assert_ne!(params["a"].data[0], 2.0);
        assert_eq!(params["b"].data[0], 3.0);
    }

    #[test]
    fn weight_decay_shrinks_even_with_zero_gradient() {
        let mut params = BTreeMap::new();
        params.insert("w".to_string(), Tensor::new(vec![4.0], vec![1]));
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![0.0f32]);
        let mut opt = AdamW::new(1e-2);
        opt.step(&mut params, &grads);
        let got = params["w"].data[0];
        assert!((got - (4.0 - 1e-2 * 1e-2 * 4.0)).abs() < 1e-7);
    }
}
