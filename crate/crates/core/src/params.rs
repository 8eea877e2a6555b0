//! Named parameter store with ADAM moment state.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::Gradients;
use crate::tensor::Tensor;

/// One trainable tensor with its optimizer state.
///
/// `dims` keeps the logical rank for serialization (rank 1 for biases,
/// rank 4 for convolution kernels); the in-memory value is always a 4-D
/// tensor.
pub struct Parameter<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub dims: Vec<usize>,
    pub grad: Option<Vec<S>>,
    pub adam_m: Vec<S>,
    pub adam_v: Vec<S>,
    pub step_count: u64,
}

impl<S: Scalar> Parameter<S> {
    fn new(name: String, value: Tensor<S>, dims: Vec<usize>) -> Self {
        let n = value.numel();
        Parameter {
            name,
            value: value.with_grad(),
            dims,
            grad: None,
            adam_m: vec![S::zero(); n],
            adam_v: vec![S::zero(); n],
            step_count: 0,
        }
    }
}

/// Ordered collection of uniquely named parameters. Iteration order is
/// insertion order, which makes serialization and seeded initialization
/// deterministic.
pub struct ParamStore<S> {
    params: Vec<Parameter<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<S>, dims: Vec<usize>) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::DuplicateParameter(name.to_string()));
        }
        debug_assert_eq!(dims.iter().product::<usize>(), value.numel());
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Parameter::new(name.to_string(), value, dims));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Parameter<S>> {
        self.index
            .get(name)
            .map(|&i| &self.params[i])
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter<S>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.params[i]),
            None => Err(Error::UnknownParameter(name.to_string())),
        }
    }

    /// The value tensor for a name; the common lookup during forward passes.
    pub fn value(&self, name: &str) -> Result<&Tensor<S>> {
        self.get(name).map(|p| &p.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<S>> {
        self.params.iter()
    }

    /// Total number of scalar elements across all parameters.
    pub fn element_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.all_finite())
    }

    /// Add tape gradients into the per-parameter accumulation buffers.
    /// Accumulation is additive; buffers persist until [`Self::adam_step`]
    /// or [`Self::zero_grads`] clears them.
    pub fn accumulate(&mut self, grads: &Gradients<S>) {
        for p in &mut self.params {
            if let Some(g) = grads.by_id(p.value.id()) {
                match &mut p.grad {
                    Some(acc) => {
                        for (a, &v) in acc.iter_mut().zip(g.iter()) {
                            *a = *a + v;
                        }
                    }
                    None => p.grad = Some(g.to_vec()),
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// One ADAM update with bias correction; increments each parameter's
    /// step count and clears gradients afterwards. Every parameter must
    /// have an accumulated gradient.
    pub fn adam_step(&mut self, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<()> {
        if lr <= 0.0 {
            return Err(Error::InvalidLearningRate(lr));
        }
        for p in &self.params {
            if p.grad.is_none() {
                return Err(Error::MissingGradient(p.name.clone()));
            }
        }
        let (b1, b2) = (S::from_f64(beta1), S::from_f64(beta2));
        let (lr_s, eps_s) = (S::from_f64(lr), S::from_f64(eps));
        let one = S::one();
        for p in &mut self.params {
            let grad = p.grad.take().expect("checked above");
            let t = p.step_count + 1;
            let bc1 = one - S::from_f64(beta1.powi(t as i32));
            let bc2 = one - S::from_f64(beta2.powi(t as i32));
            let values = p.value.data_mut();
            for i in 0..values.len() {
                let g = grad[i];
                p.adam_m[i] = b1 * p.adam_m[i] + (one - b1) * g;
                p.adam_v[i] = b2 * p.adam_v[i] + (one - b2) * g * g;
                let m_hat = p.adam_m[i] / bc1;
                let v_hat = p.adam_v[i] / bc2;
                values[i] = values[i] - lr_s * m_hat / (v_hat.sqrt() + eps_s);
            }
            p.step_count = t;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shape::Shape;

    fn scalar_store(value: f64) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        store
            .insert("p", Tensor::scalar(value), vec![1])
            .unwrap();
        store
    }

    fn set_grad(store: &mut ParamStore<f64>, name: &str, g: Vec<f64>) {
        store.get_mut(name).unwrap().grad = Some(g);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f64>::new();
        store.insert("a", Tensor::scalar(0.0), vec![1]).unwrap();
        assert!(matches!(
            store.insert("a", Tensor::scalar(0.0), vec![1]),
            Err(Error::DuplicateParameter(_))
        ));
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut store = scalar_store(1.5);
        set_grad(&mut store, "p", vec![0.0]);
        store.adam_step(1e-4, 0.9, 0.99, 1e-8).unwrap();
        assert_eq!(store.get("p").unwrap().value.item(), 1.5);
        assert_eq!(store.get("p").unwrap().adam_m[0], 0.0);
        assert_eq!(store.get("p").unwrap().adam_v[0], 0.0);
    }

    #[test]
    fn single_step_matches_reference_recurrence() {
        // independently hand-coded ADAM single step
        let (lr, b1, b2, eps) = (1e-4, 0.9, 0.99, 1e-8);
        let (p0, g) = (1.0_f64, 1.0_f64);
        let m = (1.0 - b1) * g;
        let v = (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1);
        let v_hat = v / (1.0 - b2);
        let expected = p0 - lr * m_hat / (v_hat.sqrt() + eps);

        let mut store = scalar_store(p0);
        set_grad(&mut store, "p", vec![g]);
        store.adam_step(lr, b1, b2, eps).unwrap();
        let got = store.get("p").unwrap().value.item();
        assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
        // with g = 1 the bias-corrected update is lr / (1 + eps)-ish
        assert!((got - (p0 - 1e-4)).abs() < 1e-9);
    }

    #[test]
    fn constant_gradient_moments_follow_closed_form() {
        let (b1, b2) = (0.9, 0.99);
        let g = 0.35;
        let mut store = scalar_store(2.0);
        for t in 1..=2u32 {
            set_grad(&mut store, "p", vec![g]);
            store.adam_step(1e-4, b1, b2, 1e-8).unwrap();
            let p = store.get("p").unwrap();
            let want_m = (1.0 - b1.powi(t as i32)) * g;
            let want_v = (1.0 - b2.powi(t as i32)) * g * g;
            assert!((p.adam_m[0] - want_m).abs() < 1e-15);
            assert!((p.adam_v[0] - want_v).abs() < 1e-15);
            assert_eq!(p.step_count, t as u64);
        }
    }

    #[test]
    fn missing_gradient_names_the_parameter() {
        let mut store = ParamStore::<f64>::new();
        store.insert("a", Tensor::scalar(0.0), vec![1]).unwrap();
        store
            .insert("b.conv.weight", Tensor::scalar(0.0), vec![1])
            .unwrap();
        set_grad(&mut store, "a", vec![1.0]);
        match store.adam_step(1e-4, 0.9, 0.99, 1e-8) {
            Err(Error::MissingGradient(name)) => assert_eq!(name, "b.conv.weight"),
            other => panic!("expected missing gradient, got {other:?}"),
        }
    }

    #[test]
    fn step_size_is_bounded() {
        // |delta| <= 2 * lr for any gradient history
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let lr = 1e-3;
        let mut store = scalar_store(0.0);
        let mut prev = 0.0;
        for _ in 0..50 {
            set_grad(&mut store, "p", vec![rng.gen_range(-5.0..5.0)]);
            store.adam_step(lr, 0.9, 0.99, 1e-8).unwrap();
            let now = store.get("p").unwrap().value.item();
            assert!((now - prev).abs() <= 2.0 * lr + 1e-12);
            prev = now;
        }
    }

    #[test]
    fn accumulate_adds_across_backward_passes() {
        let mut store = scalar_store(1.0);
        let value = store.get("p").unwrap().value.clone();
        let mut tape = crate::tape::Tape::new();
        let loss = tape.sum(&value);
        let grads = tape.backward(&loss).unwrap();
        store.accumulate(&grads);
        store.accumulate(&grads);
        assert_eq!(store.get("p").unwrap().grad.as_deref(), Some(&[2.0][..]));
        let shape = Shape::new(1, 1, 1, 1).unwrap();
        assert_eq!(value.shape(), shape);
    }
}
