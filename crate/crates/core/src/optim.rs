//! Adaptive-moment optimizer with decoupled weight decay.

use ndarray::{Array2, Zip};

use crate::tensor::{Family, Gradients, ParamStore, Real};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-8 }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW<F> {
    pub config: AdamWConfig,
    first: Vec<Option<Array2<F>>>,
    second: Vec<Option<Array2<F>>>,
    steps: u64,
}

impl<F: Real> AdamW<F> {
    pub fn new(config: AdamWConfig, param_count: usize) -> Self {
        Self { config, first: vec![None; param_count], second: vec![None; param_count], steps: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn first_moment(&self, index: usize) -> Option<&Array2<F>> {
        self.first.get(index).and_then(Option::as_ref)
    }

    pub fn second_moment(&self, index: usize) -> Option<&Array2<F>> {
        self.second.get(index).and_then(Option::as_ref)
    }

    /// One update. `learning_rate` maps a parameter family to its rate, or
    /// `None` to keep that family frozen. Parameters without a gradient are
    /// left untouched.
    pub fn step(
        &mut self,
        store: &mut ParamStore<F>,
        grads: &Gradients<F>,
        learning_rate: impl Fn(Family) -> Option<f64>,
    ) {
        self.steps += 1;
        let t = self.steps as i32;
        let c = &self.config;
        let (b1, b2) = (F::lit(c.beta1), F::lit(c.beta2));
        let (one_b1, one_b2) = (F::lit(1.0 - c.beta1), F::lit(1.0 - c.beta2));
        let correct1 = F::lit(1.0 - c.beta1.powi(t));
        let correct2 = F::lit(1.0 - c.beta2.powi(t));
        let eps = F::lit(c.eps);
        for (id, param) in store.iter_mut() {
            let Some(lr) = learning_rate(param.family) else { continue };
            let Some(grad) = grads.get(id) else { continue };
            let lr = F::lit(lr);
            let decay = F::one() - lr * F::lit(c.weight_decay);
            let m = self.first[id.0].get_or_insert_with(|| Array2::zeros(grad.dim()));
            let v = self.second[id.0].get_or_insert_with(|| Array2::zeros(grad.dim()));
            Zip::from(&mut param.value).and(m).and(v).and(grad).for_each(|p, m, v, &g| {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let m_hat = *m / correct1;
                let v_hat = *v / correct2;
                *p = *p * decay - lr * m_hat / (v_hat.sqrt() + eps);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn matches_hand_rolled_update() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Family::Encoder, array![[1.0, -2.0]]);
        let b = store.add("b", Family::LabelTokens, array![[0.5]]);
        let cfg = AdamWConfig { weight_decay: 0.01, ..AdamWConfig::default() };
        let mut opt = AdamW::new(cfg.clone(), store.len());
        let gs = [array![[0.5, -0.1]], array![[0.3, 0.2]]];

        // reference: scalar loop of the textbook recurrences
        let (mut p, mut m, mut v) = ([1.0f64, -2.0], [0.0f64; 2], [0.0f64; 2]);
        for (t, g) in gs.iter().enumerate() {
            let mut grads = Gradients::new(store.len());
            grads.accumulate(a, g);
            grads.accumulate(b, &array![[1.0]]);
            opt.step(&mut store, &grads, |f| (f == Family::Encoder).then_some(0.1));
            for i in 0..2 {
                m[i] = 0.9 * m[i] + 0.1 * g[[0, i]];
                v[i] = 0.999 * v[i] + 0.001 * g[[0, i]] * g[[0, i]];
                let mh = m[i] / (1.0 - 0.9f64.powi(t as i32 + 1));
                let vh = v[i] / (1.0 - 0.999f64.powi(t as i32 + 1));
                p[i] = p[i] - 0.1 * 0.01 * p[i] - 0.1 * mh / (vh.sqrt() + 1e-8);
            }
        }
        for i in 0..2 {
            assert!((store.value(a)[[0, i]] - p[i]).abs() < 1e-12);
        }
        // frozen family untouched
        assert_eq!(store.value(b)[[0, 0]], 0.5);
        // first step moves by about lr against the gradient sign
        assert!(opt.first_moment(a.0).is_some() && opt.second_moment(b.0).is_none());
    }

    #[test]
    fn first_step_is_sign_sized() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Family::Encoder, array![[0.0, 0.0]]);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() }, 1);
        let mut grads = Gradients::new(1);
        grads.accumulate(a, &array![[3.0, -0.002]]);
        opt.step(&mut store, &grads, |_| Some(0.01));
        assert!((store.value(a)[[0, 0]] + 0.01).abs() < 1e-8);
        assert!((store.value(a)[[0, 1]] - 0.01).abs() < 1e-7);
    }
}
