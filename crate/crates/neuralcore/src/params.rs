use std::collections::HashMap;

use rand::Rng;

use crate::{Error, Real, Result, Tensor};

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// Named trainable tensors together with their Adam moments.
///
/// Entries keep insertion order, which fixes the checkpoint layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T: Real = f32> {
    names: Vec<String>,
    index: HashMap<String, usize>,
    values: Vec<Tensor<T>>,
    first_moment: Vec<Tensor<T>>,
    second_moment: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            index: HashMap::new(),
            values: Vec::new(),
            first_moment: Vec::new(),
            second_moment: Vec::new(),
            step: 0,
        }
    }

    /// Adds a tensor; panics on a duplicate name.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let idx = self.values.len();
        self.first_moment.push(Tensor::zeros(value.shape()));
        self.second_moment.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        self.index.insert(name.clone(), idx);
        self.names.push(name);
        idx
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> usize {
        self.insert(name, Tensor::zeros(shape))
    }

    /// Uniform initialization on `[-bound, bound]`.
    pub fn insert_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut R,
    ) -> usize {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of_f64(rng.gen_range(-bound..=bound))).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("shape"))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn value(&self, idx: usize) -> &Tensor<T> {
        &self.values[idx]
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut Tensor<T> {
        &mut self.values[idx]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index_of(name).map(move |i| &mut self.values[i])
    }

    pub fn moments(&self, idx: usize) -> (&Tensor<T>, &Tensor<T>) {
        (&self.first_moment[idx], &self.second_moment[idx])
    }

    pub(crate) fn set_state(&mut self, idx: usize, m: Tensor<T>, v: Tensor<T>) {
        self.first_moment[idx] = m;
        self.second_moment[idx] = v;
    }

    pub(crate) fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    /// Zeroes optimizer moments and the step counter, keeping the values.
    pub fn reset_optimizer(&mut self) {
        for (m, v) in self.first_moment.iter_mut().zip(self.second_moment.iter_mut()) {
            *m = Tensor::zeros(m.shape());
            *v = Tensor::zeros(v.shape());
        }
        self.step = 0;
    }

    /// Copies values into another precision; optimizer state is reset.
    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        let mut out = ParamSet::new();
        for (name, value) in self.names.iter().zip(&self.values) {
            out.insert(name.clone(), value.cast());
        }
        out
    }

    /// Applies one Adam update. Fails without touching any parameter when a
    /// gradient is non-finite.
    pub fn adam_step(&mut self, grads: &Grads<T>, cfg: &AdamConfig) -> Result<()> {
        if grads.len() != self.values.len() {
            return Err(Error::Contract(format!(
                "gradient set has {} entries, parameter set has {}",
                grads.len(),
                self.values.len()
            )));
        }
        for (idx, g) in grads.iter() {
            if g.shape() != self.values[idx].shape() {
                return Err(Error::Contract(format!(
                    "gradient shape {:?} does not match parameter {} {:?}",
                    g.shape(),
                    self.names[idx],
                    self.values[idx].shape()
                )));
            }
            if !g.all_finite() {
                return Err(Error::Training(format!(
                    "non-finite gradient for parameter {}",
                    self.names[idx]
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (idx, g) in grads.iter() {
            let p = self.values[idx].data_mut();
            let m = self.first_moment[idx].data_mut();
            let v = self.second_moment[idx].data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i].as_f64();
                let mi = cfg.beta1 * m[i].as_f64() + (1.0 - cfg.beta1) * gi;
                let vi = cfg.beta2 * v[i].as_f64() + (1.0 - cfg.beta2) * gi * gi;
                m[i] = T::of_f64(mi);
                v[i] = T::of_f64(vi);
                let update = cfg.lr * (mi / bc1) / ((vi / bc2).sqrt() + cfg.eps);
                p[i] = T::of_f64(p[i].as_f64() - update);
            }
        }
        Ok(())
    }
}

/// Gradients aligned with the entries of a [`ParamSet`]. Parameters the loss
/// does not depend on have no entry.
#[derive(Clone, Debug)]
pub struct Grads<T: Real = f32> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub(crate) fn new(n: usize) -> Self {
        Self { slots: vec![None; n] }
    }

    pub(crate) fn accumulate(&mut self, idx: usize, g: &Tensor<T>) {
        match &mut self.slots[idx] {
            Some(acc) => {
                for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn get(&self, idx: usize) -> Option<&Tensor<T>> {
        self.slots[idx].as_ref()
    }

    pub fn by_name<'a>(&'a self, params: &ParamSet<T>, name: &str) -> Option<&'a Tensor<T>> {
        params.index_of(name).and_then(|i| self.get(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor<T>)> {
        self.slots.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|g| (i, g)))
    }

    pub fn global_norm(&self) -> f64 {
        self.iter()
            .flat_map(|(_, g)| g.data().iter())
            .map(|x| x.as_f64() * x.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`; returns the
    /// norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm.is_finite() {
            let s = T::of_f64(max_norm / norm);
            for g in self.slots.iter_mut().flatten() {
                for x in g.data_mut() {
                    *x *= s;
                }
            }
        }
        norm
    }

    /// Adds `other` into `self`, slot by slot.
    pub fn merge(&mut self, other: &Grads<T>) {
        for (i, g) in other.iter() {
            self.accumulate(i, g);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_set(w: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(w));
        p
    }

    fn grad_of(g: f64) -> Grads<f64> {
        let mut grads = Grads::new(1);
        grads.accumulate(0, &Tensor::scalar(g));
        grads
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = scalar_set(0.7);
        for _ in 0..5 {
            p.adam_step(&grad_of(0.0), &AdamConfig::default()).unwrap();
        }
        assert_eq!(p.get("w").unwrap().item(), 0.7);
        assert_eq!(p.step(), 5);
    }

    #[test]
    fn first_step_is_bias_corrected() {
        // m = 0.1, v = 0.001; corrected both to 1, so the step is lr / (1 + eps).
        let mut p = scalar_set(0.0);
        p.adam_step(&grad_of(1.0), &AdamConfig::with_lr(0.1)).unwrap();
        let w = p.get("w").unwrap().item();
        assert!((w + 0.1 / (1.0 + 1e-8)).abs() < 1e-12, "{w}");
    }

    #[test]
    fn constant_gradient_moves_against_its_sign() {
        let mut p = scalar_set(1.0);
        for _ in 0..50 {
            p.adam_step(&grad_of(-2.5), &AdamConfig::default()).unwrap();
        }
        assert!(p.get("w").unwrap().item() > 1.0);
        let mut q = scalar_set(1.0);
        for _ in 0..50 {
            q.adam_step(&grad_of(0.3), &AdamConfig::default()).unwrap();
        }
        assert!(q.get("w").unwrap().item() < 1.0);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut p = scalar_set(0.0);
        let err = p.adam_step(&grad_of(f64::NAN), &AdamConfig::default()).unwrap_err();
        match err {
            Error::Training(msg) => assert!(msg.contains('w')),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(p.step(), 0);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = Grads::<f64>::new(1);
        g.accumulate(0, &Tensor::vector(vec![3.0, 4.0]));
        let before = g.clip_global_norm(1.0);
        assert_eq!(before, 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
    }
}
