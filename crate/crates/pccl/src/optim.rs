//! Stochastic gradient descent with momentum and L2 weight decay.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::Result;
use crate::nn::ParamStore;

/// Same update rule as the usual deep-learning frameworks:
/// `g = ∇ + wd·p; v = μ·v + g (v = g on the first step); p -= lr·v`.
pub struct Sgd {
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    vars: Vec<Var>,
    velocity: Vec<Option<Tensor>>,
}

impl Sgd {
    pub fn new(store: &ParamStore, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        let vars = store.param_vars();
        let velocity = vec![None; vars.len()];
        Self { lr, momentum, weight_decay, vars, velocity }
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    /// Updates every parameter that received a gradient; the others are
    /// left untouched, momentum included.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        for (var, vel) in self.vars.iter().zip(self.velocity.iter_mut()) {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let p = var.as_tensor().detach();
            let mut g = g.detach();
            if self.weight_decay != 0.0 {
                g = (g + (&p * self.weight_decay)?)?;
            }
            let v = match vel.take() {
                Some(prev) if self.momentum != 0.0 => ((prev * self.momentum)? + g)?,
                _ => g,
            };
            var.set(&(p - (&v * self.lr)?)?)?;
            *vel = Some(v);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_rng, Builder, Init};
    use candle_core::Device;

    #[test]
    fn momentum_matches_hand_iteration() {
        let mut store = ParamStore::new(&Device::Cpu);
        let mut rng = init_rng(0);
        let w = Builder::new(&mut store, &mut rng).param("w", &[1], Init::Ones).unwrap();
        let mut opt = Sgd::new(&store, 0.1, 0.9, 0.01);
        // loss = w², gradient 2w
        let (mut p, mut v) = (1.0f64, 0.0f64);
        for step in 0..3 {
            let grads = w.sqr().unwrap().sum_all().unwrap().backward().unwrap();
            opt.step(&grads).unwrap();
            let g = 2.0 * p + 0.01 * p;
            v = if step == 0 { g } else { 0.9 * v + g };
            p -= 0.1 * v;
            let got = w.to_vec1::<f32>().unwrap()[0] as f64;
            assert!((got - p).abs() < 1e-6, "step {step}: {got} vs {p}");
        }
    }
}
