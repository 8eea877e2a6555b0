//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Forward operations are recorded in execution order whenever gradient
//! tracking is live (the tape is recording and some input either is a
//! gradient leaf or was itself produced on the tape). `backward` replays
//! the records in reverse, accumulating gradients additively across
//! fan-out, and returns them keyed by tensor identity.
//!
//! A tape is confined to one logical thread and can be consumed by
//! `backward` exactly once.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::ops;
use crate::scalar::Scalar;
use crate::shape::Shape;
use crate::tensor::{Tensor, TensorId};

enum Record<S> {
    Conv2d {
        input: Tensor<S>,
        weight: Tensor<S>,
        bias: Tensor<S>,
        stride: (usize, usize),
        padding: (usize, usize),
    },
    PixelShuffle {
        input: Tensor<S>,
        r: usize,
    },
    Sigmoid {
        input: Tensor<S>,
    },
    Relu {
        input: Tensor<S>,
    },
    Add {
        lhs: Tensor<S>,
        rhs: Tensor<S>,
    },
    MulBroadcast {
        features: Tensor<S>,
        map: Tensor<S>,
    },
    Concat {
        parts: Vec<Tensor<S>>,
    },
    Sum {
        input: Tensor<S>,
    },
    Mean {
        input: Tensor<S>,
    },
    SqDiffMean {
        pred: Tensor<S>,
        target: Tensor<S>,
    },
    AbsDiffMean {
        pred: Tensor<S>,
        target: Tensor<S>,
    },
}

struct Node<S> {
    record: Record<S>,
    output: Tensor<S>,
}

/// Gradients produced by one backward pass, keyed by tensor identity.
pub struct Gradients<S> {
    by_id: HashMap<TensorId, Vec<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, tensor: &Tensor<S>) -> Option<&[S]> {
        self.by_id.get(&tensor.id()).map(|v| v.as_slice())
    }

    pub fn by_id(&self, id: TensorId) -> Option<&[S]> {
        self.by_id.get(&id).map(|v| v.as_slice())
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }

    fn accumulate(&mut self, id: TensorId, contribution: Vec<S>) {
        match self.by_id.entry(id) {
            std::collections::hash_map::Entry::Occupied(mut e) => {
                for (acc, c) in e.get_mut().iter_mut().zip(contribution) {
                    *acc = *acc + c;
                }
            }
            std::collections::hash_map::Entry::Vacant(e) => {
                e.insert(contribution);
            }
        }
    }
}

pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    tracked: HashSet<TensorId>,
    recording: bool,
    consumed: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    /// A recording tape for training and gradient checks.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            tracked: HashSet::new(),
            recording: true,
            consumed: false,
        }
    }

    /// A non-recording tape for pure inference.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            tracked: HashSet::new(),
            recording: false,
            consumed: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn num_ops(&self) -> usize {
        self.nodes.len()
    }

    fn needs_grad(&self, t: &Tensor<S>) -> bool {
        t.requires_grad() || self.tracked.contains(&t.id())
    }

    fn push(&mut self, record: Record<S>, output: &Tensor<S>) {
        self.tracked.insert(output.id());
        self.nodes.push(Node {
            record,
            output: output.clone(),
        });
    }

    fn debug_check_finite(inputs: &[&Tensor<S>], output: &Tensor<S>) {
        if cfg!(debug_assertions) {
            if inputs.iter().all(|t| t.all_finite()) {
                debug_assert!(
                    output.all_finite(),
                    "forward op produced non-finite values from finite inputs"
                );
            }
        }
    }

    pub fn conv2d(
        &mut self,
        input: &Tensor<S>,
        weight: &Tensor<S>,
        bias: &Tensor<S>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Tensor<S>> {
        let out = ops::conv2d_forward(input, weight, bias, stride, padding)?;
        Self::debug_check_finite(&[input, weight, bias], &out);
        if self.recording
            && (self.needs_grad(input) || self.needs_grad(weight) || self.needs_grad(bias))
        {
            self.push(
                Record::Conv2d {
                    input: input.clone(),
                    weight: weight.clone(),
                    bias: bias.clone(),
                    stride,
                    padding,
                },
                &out,
            );
        }
        Ok(out)
    }

    pub fn pixel_shuffle(&mut self, input: &Tensor<S>, r: usize) -> Result<Tensor<S>> {
        let out = ops::pixel_shuffle_forward(input, r)?;
        if self.recording && self.needs_grad(input) {
            self.push(
                Record::PixelShuffle {
                    input: input.clone(),
                    r,
                },
                &out,
            );
        }
        Ok(out)
    }

    pub fn sigmoid(&mut self, input: &Tensor<S>) -> Tensor<S> {
        let out = ops::sigmoid_forward(input);
        Self::debug_check_finite(&[input], &out);
        if self.recording && self.needs_grad(input) {
            self.push(
                Record::Sigmoid {
                    input: input.clone(),
                },
                &out,
            );
        }
        out
    }

    pub fn relu(&mut self, input: &Tensor<S>) -> Tensor<S> {
        let out = ops::relu_forward(input);
        if self.recording && self.needs_grad(input) {
            self.push(
                Record::Relu {
                    input: input.clone(),
                },
                &out,
            );
        }
        out
    }

    pub fn add(&mut self, lhs: &Tensor<S>, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        let out = ops::add_forward(lhs, rhs)?;
        Self::debug_check_finite(&[lhs, rhs], &out);
        if self.recording && (self.needs_grad(lhs) || self.needs_grad(rhs)) {
            self.push(
                Record::Add {
                    lhs: lhs.clone(),
                    rhs: rhs.clone(),
                },
                &out,
            );
        }
        Ok(out)
    }

    /// Multiply features by a single-channel spatial map, broadcast across
    /// channels.
    pub fn mul_broadcast(&mut self, features: &Tensor<S>, map: &Tensor<S>) -> Result<Tensor<S>> {
        let out = ops::mul_broadcast_forward(features, map)?;
        Self::debug_check_finite(&[features, map], &out);
        if self.recording && (self.needs_grad(features) || self.needs_grad(map)) {
            self.push(
                Record::MulBroadcast {
                    features: features.clone(),
                    map: map.clone(),
                },
                &out,
            );
        }
        Ok(out)
    }

    pub fn concat_channels(&mut self, parts: &[Tensor<S>]) -> Result<Tensor<S>> {
        let out = ops::concat_channels_forward(parts)?;
        if self.recording && parts.iter().any(|p| self.needs_grad(p)) {
            self.push(
                Record::Concat {
                    parts: parts.to_vec(),
                },
                &out,
            );
        }
        Ok(out)
    }

    pub fn sum(&mut self, input: &Tensor<S>) -> Tensor<S> {
        let out = Tensor::scalar(ops::sum_all(input));
        if self.recording && self.needs_grad(input) {
            self.push(
                Record::Sum {
                    input: input.clone(),
                },
                &out,
            );
        }
        out
    }

    pub fn mean(&mut self, input: &Tensor<S>) -> Tensor<S> {
        let out = Tensor::scalar(ops::mean_all(input));
        if self.recording && self.needs_grad(input) {
            self.push(
                Record::Mean {
                    input: input.clone(),
                },
                &out,
            );
        }
        out
    }

    /// The two terms of the training objective: per-element mean squared
    /// error and mean absolute error, as scalar tensors `(l2, l1)`.
    pub fn loss_terms(
        &mut self,
        pred: &Tensor<S>,
        target: &Tensor<S>,
    ) -> Result<(Tensor<S>, Tensor<S>)> {
        if pred.shape() != target.shape() {
            return Err(Error::BroadcastMismatch {
                a: pred.shape(),
                b: target.shape(),
            });
        }
        if pred.numel() == 0 {
            return Err(Error::EmptyShape(pred.shape().as_array()));
        }
        let l2 = Tensor::scalar(ops::sq_diff_mean(pred, target));
        let l1 = Tensor::scalar(ops::abs_diff_mean(pred, target));
        if self.recording && (self.needs_grad(pred) || self.needs_grad(target)) {
            self.push(
                Record::SqDiffMean {
                    pred: pred.clone(),
                    target: target.clone(),
                },
                &l2,
            );
            self.push(
                Record::AbsDiffMean {
                    pred: pred.clone(),
                    target: target.clone(),
                },
                &l1,
            );
        }
        Ok((l2, l1))
    }

    /// Populate gradients of `loss` with respect to every tracked tensor.
    /// The tape is consumed; a second call is an error.
    pub fn backward(&mut self, loss: &Tensor<S>) -> Result<Gradients<S>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if !loss.shape().is_scalar() {
            return Err(Error::NonScalarLoss(loss.shape()));
        }
        self.consumed = true;

        let mut grads = Gradients {
            by_id: HashMap::new(),
        };
        grads.by_id.insert(loss.id(), vec![S::one()]);

        for node in self.nodes.iter().rev() {
            let Some(g) = grads.by_id.get(&node.output.id()) else {
                continue; // not on the path to the loss
            };
            let g = g.clone();
            match &node.record {
                Record::Conv2d {
                    input,
                    weight,
                    bias,
                    stride,
                    padding,
                } => {
                    let need_i = self.needs_grad(input);
                    let need_w = self.needs_grad(weight);
                    let need_b = self.needs_grad(bias);
                    let got = ops::conv2d_backward(
                        input, weight, &g, *stride, *padding, need_i, need_w, need_b,
                    );
                    if let Some(di) = got.d_input {
                        grads.accumulate(input.id(), di);
                    }
                    if let Some(dw) = got.d_weight {
                        grads.accumulate(weight.id(), dw);
                    }
                    if let Some(db) = got.d_bias {
                        grads.accumulate(bias.id(), db);
                    }
                }
                Record::PixelShuffle { input, r } => {
                    grads.accumulate(
                        input.id(),
                        ops::pixel_shuffle_backward(&g, input.shape(), *r),
                    );
                }
                Record::Sigmoid { input } => {
                    grads.accumulate(input.id(), ops::sigmoid_backward(&node.output, &g));
                }
                Record::Relu { input } => {
                    grads.accumulate(input.id(), ops::relu_backward(input, &g));
                }
                Record::Add { lhs, rhs } => {
                    if self.needs_grad(lhs) {
                        grads.accumulate(lhs.id(), g.clone());
                    }
                    if self.needs_grad(rhs) {
                        grads.accumulate(rhs.id(), g.clone());
                    }
                }
                Record::MulBroadcast { features, map } => {
                    let (df, dm) = ops::mul_broadcast_backward(
                        features,
                        map,
                        &g,
                        self.needs_grad(features),
                        self.needs_grad(map),
                    );
                    if let Some(df) = df {
                        grads.accumulate(features.id(), df);
                    }
                    if let Some(dm) = dm {
                        grads.accumulate(map.id(), dm);
                    }
                }
                Record::Concat { parts } => {
                    let split = ops::concat_channels_backward(parts, &g);
                    for (part, dp) in parts.iter().zip(split) {
                        if self.needs_grad(part) {
                            grads.accumulate(part.id(), dp);
                        }
                    }
                }
                Record::Sum { input } => {
                    let gv = g[0];
                    grads.accumulate(input.id(), vec![gv; input.numel()]);
                }
                Record::Mean { input } => {
                    let gv = g[0] / S::from_f64(input.numel() as f64);
                    grads.accumulate(input.id(), vec![gv; input.numel()]);
                }
                Record::SqDiffMean { pred, target } => {
                    let scale = g[0] * S::from_f64(2.0 / pred.numel() as f64);
                    if self.needs_grad(pred) {
                        let dp: Vec<S> = pred
                            .data()
                            .iter()
                            .zip(target.data().iter())
                            .map(|(&p, &t)| scale * (p - t))
                            .collect();
                        grads.accumulate(pred.id(), dp);
                    }
                    if self.needs_grad(target) {
                        let dt: Vec<S> = pred
                            .data()
                            .iter()
                            .zip(target.data().iter())
                            .map(|(&p, &t)| -scale * (p - t))
                            .collect();
                        grads.accumulate(target.id(), dt);
                    }
                }
                Record::AbsDiffMean { pred, target } => {
                    let scale = g[0] / S::from_f64(pred.numel() as f64);
                    let sign = |d: S| {
                        if d > S::zero() {
                            S::one()
                        } else if d < S::zero() {
                            -S::one()
                        } else {
                            S::zero()
                        }
                    };
                    if self.needs_grad(pred) {
                        let dp: Vec<S> = pred
                            .data()
                            .iter()
                            .zip(target.data().iter())
                            .map(|(&p, &t)| scale * sign(p - t))
                            .collect();
                        grads.accumulate(pred.id(), dp);
                    }
                    if self.needs_grad(target) {
                        let dt: Vec<S> = pred
                            .data()
                            .iter()
                            .zip(target.data().iter())
                            .map(|(&p, &t)| -scale * sign(p - t))
                            .collect();
                        grads.accumulate(target.id(), dt);
                    }
                }
            }
        }
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(shape: Shape, seed: u64) -> Tensor<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data = (0..shape.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap().with_grad()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let x = leaf(Shape::new(2, 3, 2, 2).unwrap(), 1);
        let mut tape = Tape::new();
        let loss = tape.sum(&x);
        let grads = tape.backward(&loss).unwrap();
        let gx = grads.get(&x).unwrap();
        assert_eq!(gx.len(), 24);
        assert!(gx.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn chain_rule_at_symmetric_point() {
        // loss = mean(sigmoid(x)^2) at x = 0 -> grad = 0.25 / numel per element
        let x = Tensor::<f64>::zeros(Shape::new(2, 1, 3, 3).unwrap()).with_grad();
        let mut tape = Tape::new();
        let y = tape.sigmoid(&x);
        let sq = tape.mul_broadcast(&y, &y).unwrap();
        let loss = tape.mean(&sq);
        let grads = tape.backward(&loss).unwrap();
        let gx = grads.get(&x).unwrap();
        let want = 0.25 / 18.0;
        for &v in gx {
            assert!((v - want).abs() < 1e-15, "{v} vs {want}");
        }
    }

    #[test]
    fn fanout_accumulates_additively() {
        // loss = sum(x + x) -> grad 2 per element
        let x = leaf(Shape::new(1, 1, 2, 2).unwrap(), 2);
        let mut tape = Tape::new();
        let y = tape.add(&x, &x).unwrap();
        let loss = tape.sum(&y);
        let grads = tape.backward(&loss).unwrap();
        assert!(grads.get(&x).unwrap().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn backward_requires_scalar() {
        let x = leaf(Shape::new(1, 1, 2, 2).unwrap(), 3);
        let mut tape = Tape::new();
        let y = tape.relu(&x);
        assert!(matches!(tape.backward(&y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn second_backward_errors() {
        let x = leaf(Shape::new(1, 1, 1, 1).unwrap(), 4);
        let mut tape = Tape::new();
        let loss = tape.sum(&x);
        tape.backward(&loss).unwrap();
        assert!(matches!(tape.backward(&loss), Err(Error::TapeConsumed)));
    }

    #[test]
    fn untracked_inputs_get_no_gradient() {
        let x = leaf(Shape::new(1, 1, 2, 2).unwrap(), 5);
        let c = Tensor::<f64>::filled(Shape::new(1, 1, 2, 2).unwrap(), 3.0);
        let mut tape = Tape::new();
        let y = tape.add(&x, &c).unwrap();
        let loss = tape.sum(&y);
        let grads = tape.backward(&loss).unwrap();
        assert!(grads.get(&x).is_some());
        assert!(grads.get(&c).is_none());
    }

    #[test]
    fn inference_tape_records_nothing() {
        let x = leaf(Shape::new(1, 1, 2, 2).unwrap(), 6);
        let mut tape = Tape::inference();
        let y = tape.relu(&x);
        assert_eq!(tape.num_ops(), 0);
        assert_eq!(y.numel(), 4);
    }
}
