use crate::{ParamSet, Tensor};

/// Adam with decoupled weight decay.
///
/// Decay applies to arrays of rank two or more; biases, norms and scalars are
/// left undecayed.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: ParamSet,
    v: ParamSet,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: ParamSet::new(),
            v: ParamSet::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps, wd) = (self.beta1, self.beta2, self.lr, self.eps, self.weight_decay);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            if !self.m.contains(name) {
                self.m.insert(name.clone(), Tensor::zeros(p.raw_dim()));
                self.v.insert(name.clone(), Tensor::zeros(p.raw_dim()));
            }
            let m = self.m.get_mut(name).unwrap();
            m.zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            let v = self.v.get_mut(name).unwrap();
            v.zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let m = self.m.get(name).unwrap();
            let v = self.v.get(name).unwrap();
            let decay = if p.ndim() >= 2 { lr * wd } else { 0.0 };
            ndarray::Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
                *p -= decay * *p;
                *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
            });
        }
    }

    /// Moment estimates and step count, for checkpointing.
    pub fn state(&self) -> (u64, &ParamSet, &ParamSet) {
        (self.step, &self.m, &self.v)
    }

    pub fn restore_state(&mut self, step: u64, m: ParamSet, v: ParamSet) {
        self.step = step;
        self.m = m;
        self.v = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_learning_rate_leaves_params_untouched() {
        let mut p = ParamSet::new();
        p.insert("w", array![[1.0, -2.0]].into_dyn());
        let before = p.clone();
        let mut g = ParamSet::new();
        g.insert("w", array![[0.3, 0.1]].into_dyn());
        let mut opt = AdamW::new(0.0, 0.1);
        opt.step(&mut p, &g);
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = ParamSet::new();
        p.insert("b", array![0.0, 0.0].into_dyn());
        let mut g = ParamSet::new();
        g.insert("b", array![2.0, -0.5].into_dyn());
        let mut opt = AdamW::new(0.01, 0.0);
        opt.step(&mut p, &g);
        let b = p.get("b").unwrap();
        assert!((b[[0]] + 0.01).abs() < 1e-8);
        assert!((b[[1]] - 0.01).abs() < 1e-8);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = ParamSet::new();
        p.insert("x", array![[3.0, -4.0]].into_dyn());
        let mut opt = AdamW::new(0.1, 0.0);
        for _ in 0..500 {
            let g: ParamSet = [("x".to_string(), p.get("x").unwrap() * 2.0)].into_iter().collect();
            opt.step(&mut p, &g);
        }
        assert!(p.get("x").unwrap().iter().all(|v| v.abs() < 1e-2));
    }
}
