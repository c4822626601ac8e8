//! Reverse-mode autodiff.
//!
//! A [`Tape`] records every primitive executed through it, in order, with
//! whatever each op needs for its backward pass. [`Tape::backward`] walks
//! the record in exact reverse execution order and accumulates (`+=`)
//! gradients for every registered value, so tensors feeding several
//! consumers receive the sum of their contributions.
//!
//! A non-recording tape executes the same kernels without retaining
//! anything, which is how inference runs.

use crate::error::{bail_shape, Error, Result};
use crate::ops::{self, BnSaved, ConvSpec};
use crate::tensor::{Scalar, Tensor};

/// Index of a value registered on its tape. Handles are only meaningful
/// on the tape that created them.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub struct ValueId(pub(crate) usize);

/// A tensor registered on a tape, returned by every tape operation.
#[derive(Clone, Debug)]
pub struct Value<T> {
    id: ValueId,
    tensor: Tensor<T>,
}

impl<T: Scalar> Value<T> {
    pub fn id(&self) -> ValueId {
        self.id
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn dims(&self) -> crate::tensor::Dims {
        self.tensor.dims()
    }
}

enum OpRecord<T> {
    Conv2d {
        spec: ConvSpec,
        x: ValueId,
        w: ValueId,
        b: Option<ValueId>,
    },
    ConvTranspose2d {
        x: ValueId,
        w: ValueId,
    },
    BnTrain {
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        saved: BnSaved<T>,
    },
    BnEval {
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        running_mean: Tensor<T>,
        running_var: Tensor<T>,
        eps: T,
    },
    Relu {
        x: ValueId,
    },
    Sigmoid {
        x: ValueId,
    },
    MaxPool {
        x: ValueId,
        argmax: Vec<u32>,
    },
    Gap {
        x: ValueId,
    },
    Concat {
        xs: Vec<ValueId>,
    },
    Linear {
        x: ValueId,
        w: ValueId,
        b: Option<ValueId>,
    },
    ScaleChannels {
        x: ValueId,
        s: ValueId,
    },
}

struct Node<T> {
    op: OpRecord<T>,
    output: ValueId,
}

pub struct Tape<T> {
    recording: bool,
    values: Vec<Tensor<T>>,
    nodes: Vec<Node<T>>,
    next_id: usize,
}

impl<T: Scalar> Tape<T> {
    pub fn new(recording: bool) -> Tape<T> {
        Tape {
            recording,
            values: Vec::new(),
            nodes: Vec::new(),
            next_id: 0,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn num_ops(&self) -> usize {
        self.nodes.len()
    }

    /// Kinds of the recorded ops, in execution order. Empty unless the
    /// tape is recording.
    pub fn op_kinds(&self) -> Vec<&'static str> {
        self.nodes
            .iter()
            .map(|n| match n.op {
                OpRecord::Conv2d { .. } => "conv2d",
                OpRecord::ConvTranspose2d { .. } => "conv_transpose2d",
                OpRecord::BnTrain { .. } => "batchnorm_train",
                OpRecord::BnEval { .. } => "batchnorm_eval",
                OpRecord::Relu { .. } => "relu",
                OpRecord::Sigmoid { .. } => "sigmoid",
                OpRecord::MaxPool { .. } => "maxpool2d",
                OpRecord::Gap { .. } => "global_avg_pool",
                OpRecord::Concat { .. } => "concat_channels",
                OpRecord::Linear { .. } => "linear",
                OpRecord::ScaleChannels { .. } => "scale_channels",
            })
            .collect()
    }

    fn register(&mut self, tensor: Tensor<T>) -> Value<T> {
        let id = ValueId(self.next_id);
        self.next_id += 1;
        if self.recording {
            self.values.push(tensor.clone());
        }
        Value { id, tensor }
    }

    fn record(&mut self, op: OpRecord<T>, output: ValueId) {
        if self.recording {
            self.nodes.push(Node { op, output });
        }
    }

    fn value(&self, id: ValueId) -> &Tensor<T> {
        &self.values[id.0]
    }

    /// Registers an input or parameter tensor as a differentiable leaf.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Value<T> {
        self.register(tensor)
    }

    pub fn conv2d(
        &mut self,
        x: &Value<T>,
        w: &Value<T>,
        b: Option<&Value<T>>,
        spec: &ConvSpec,
    ) -> Result<Value<T>> {
        let y = ops::conv2d(&x.tensor, &w.tensor, b.map(|v| &v.tensor), spec)?;
        let out = self.register(y);
        self.record(
            OpRecord::Conv2d {
                spec: *spec,
                x: x.id,
                w: w.id,
                b: b.map(|v| v.id),
            },
            out.id,
        );
        Ok(out)
    }

    /// Depthwise stage then pointwise stage, recorded as two convolutions
    /// so the gradient falls out of the composition.
    pub fn conv2d_depthwise_separable(
        &mut self,
        x: &Value<T>,
        w_depth: &Value<T>,
        b_depth: Option<&Value<T>>,
        w_point: &Value<T>,
        b_point: Option<&Value<T>>,
        spec: &ConvSpec,
    ) -> Result<Value<T>> {
        let (depth_spec, point_spec) =
            ops::separable_parts(spec, b_depth.is_some(), b_point.is_some());
        let mid = self.conv2d(x, w_depth, b_depth, &depth_spec)?;
        self.conv2d(&mid, w_point, b_point, &point_spec)
    }

    pub fn conv_transpose2d(&mut self, x: &Value<T>, w: &Value<T>) -> Result<Value<T>> {
        let y = ops::conv_transpose2d(&x.tensor, &w.tensor)?;
        let out = self.register(y);
        self.record(OpRecord::ConvTranspose2d { x: x.id, w: w.id }, out.id);
        Ok(out)
    }

    /// Training-mode batch norm. Returns the normalised value plus the
    /// updated running statistics, which the caller owns (they are state,
    /// not part of the differentiable graph).
    pub fn batchnorm2d_train(
        &mut self,
        x: &Value<T>,
        gamma: &Value<T>,
        beta: &Value<T>,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: T,
        momentum: T,
    ) -> Result<(Value<T>, Tensor<T>, Tensor<T>)> {
        let (y, new_rm, new_rv, saved) = ops::batchnorm2d_train(
            &x.tensor,
            &gamma.tensor,
            &beta.tensor,
            running_mean,
            running_var,
            eps,
            momentum,
        )?;
        let out = self.register(y);
        self.record(
            OpRecord::BnTrain {
                x: x.id,
                gamma: gamma.id,
                beta: beta.id,
                saved,
            },
            out.id,
        );
        Ok((out, new_rm, new_rv))
    }

    pub fn batchnorm2d_eval(
        &mut self,
        x: &Value<T>,
        gamma: &Value<T>,
        beta: &Value<T>,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: T,
    ) -> Result<Value<T>> {
        let y = ops::batchnorm2d_eval(
            &x.tensor,
            &gamma.tensor,
            &beta.tensor,
            running_mean,
            running_var,
            eps,
        )?;
        let out = self.register(y);
        self.record(
            OpRecord::BnEval {
                x: x.id,
                gamma: gamma.id,
                beta: beta.id,
                running_mean: running_mean.clone(),
                running_var: running_var.clone(),
                eps,
            },
            out.id,
        );
        Ok(out)
    }

    pub fn relu(&mut self, x: &Value<T>) -> Value<T> {
        let y = ops::relu(&x.tensor);
        let out = self.register(y);
        self.record(OpRecord::Relu { x: x.id }, out.id);
        out
    }

    pub fn sigmoid(&mut self, x: &Value<T>) -> Value<T> {
        let y = ops::sigmoid(&x.tensor);
        let out = self.register(y);
        self.record(OpRecord::Sigmoid { x: x.id }, out.id);
        out
    }

    pub fn maxpool2d(&mut self, x: &Value<T>) -> Result<Value<T>> {
        let (y, argmax) = ops::maxpool2d(&x.tensor)?;
        let out = self.register(y);
        self.record(OpRecord::MaxPool { x: x.id, argmax }, out.id);
        Ok(out)
    }

    pub fn global_avg_pool(&mut self, x: &Value<T>) -> Result<Value<T>> {
        let y = ops::global_avg_pool(&x.tensor)?;
        let out = self.register(y);
        self.record(OpRecord::Gap { x: x.id }, out.id);
        Ok(out)
    }

    pub fn concat_channels(&mut self, xs: &[&Value<T>]) -> Result<Value<T>> {
        let tensors: Vec<&Tensor<T>> = xs.iter().map(|v| &v.tensor).collect();
        let y = ops::concat_channels(&tensors)?;
        let out = self.register(y);
        self.record(
            OpRecord::Concat {
                xs: xs.iter().map(|v| v.id).collect(),
            },
            out.id,
        );
        Ok(out)
    }

    pub fn linear(&mut self, x: &Value<T>, w: &Value<T>, b: Option<&Value<T>>) -> Result<Value<T>> {
        let y = ops::linear(&x.tensor, &w.tensor, b.map(|v| &v.tensor))?;
        let out = self.register(y);
        self.record(
            OpRecord::Linear {
                x: x.id,
                w: w.id,
                b: b.map(|v| v.id),
            },
            out.id,
        );
        Ok(out)
    }

    pub fn scale_channels(&mut self, x: &Value<T>, s: &Value<T>) -> Result<Value<T>> {
        let y = ops::scale_channels(&x.tensor, &s.tensor)?;
        let out = self.register(y);
        self.record(OpRecord::ScaleChannels { x: x.id, s: s.id }, out.id);
        Ok(out)
    }

    /// Replays the tape in reverse, seeding `output` with `seed`.
    /// Every value reached by the backward sweep ends up with a gradient
    /// in the returned set; query leaves by their [`ValueId`].
    pub fn backward(&self, output: &Value<T>, seed: &Tensor<T>) -> Result<Gradients<T>> {
        if !self.recording || self.nodes.is_empty() {
            return Err(Error::Train("backward on an empty tape".into()));
        }
        if output.id.0 >= self.values.len() {
            return Err(Error::Train("output value not on this tape".into()));
        }
        if seed.dims() != self.value(output.id).dims() {
            bail_shape!(
                "seed dims {} do not match output dims {}",
                seed.dims(),
                self.value(output.id).dims()
            );
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.values.len()];
        grads[output.id.0] = Some(seed.clone());

        for node in self.nodes.iter().rev() {
            let g = match &grads[node.output.0] {
                Some(g) => g.clone(),
                None => continue,
            };
            match &node.op {
                OpRecord::Conv2d { spec, x, w, b } => {
                    let (dx, dw, db) =
                        ops::conv2d_backward(self.value(*x), self.value(*w), spec, &g)?;
                    add_grad(&mut grads, *x, dx)?;
                    add_grad(&mut grads, *w, dw)?;
                    if let (Some(bid), Some(db)) = (b, db) {
                        add_grad(&mut grads, *bid, db)?;
                    }
                }
                OpRecord::ConvTranspose2d { x, w } => {
                    let (dx, dw) =
                        ops::conv_transpose2d_backward(self.value(*x), self.value(*w), &g)?;
                    add_grad(&mut grads, *x, dx)?;
                    add_grad(&mut grads, *w, dw)?;
                }
                OpRecord::BnTrain {
                    x,
                    gamma,
                    beta,
                    saved,
                } => {
                    let (dx, dgamma, dbeta) = ops::batchnorm2d_train_backward(
                        self.value(*x),
                        self.value(*gamma),
                        saved,
                        &g,
                    )?;
                    add_grad(&mut grads, *x, dx)?;
                    add_grad(&mut grads, *gamma, dgamma)?;
                    add_grad(&mut grads, *beta, dbeta)?;
                }
                OpRecord::BnEval {
                    x,
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    eps,
                } => {
                    let (dx, dgamma, dbeta) = ops::batchnorm2d_eval_backward(
                        self.value(*x),
                        self.value(*gamma),
                        running_mean,
                        running_var,
                        *eps,
                        &g,
                    )?;
                    add_grad(&mut grads, *x, dx)?;
                    add_grad(&mut grads, *gamma, dgamma)?;
                    add_grad(&mut grads, *beta, dbeta)?;
                }
                OpRecord::Relu { x } => {
                    let dx = ops::relu_backward(self.value(*x), &g)?;
                    add_grad(&mut grads, *x, dx)?;
                }
                OpRecord::Sigmoid { x } => {
                    let dx = ops::sigmoid_backward(self.value(node.output), &g)?;
                    add_grad(&mut grads, *x, dx)?;
                }
                OpRecord::MaxPool { x, argmax } => {
                    let dx = ops::maxpool2d_backward(self.value(*x).dims(), argmax, &g)?;
                    add_grad(&mut grads, *x, dx)?;
                }
                OpRecord::Gap { x } => {
                    let dx = ops::global_avg_pool_backward(self.value(*x).dims(), &g)?;
                    add_grad(&mut grads, *x, dx)?;
                }
                OpRecord::Concat { xs } => {
                    let part_dims: Vec<_> = xs.iter().map(|id| self.value(*id).dims()).collect();
                    let parts = ops::concat_channels_backward(&part_dims, &g)?;
                    for (id, dpart) in xs.iter().zip(parts) {
                        add_grad(&mut grads, *id, dpart)?;
                    }
                }
                OpRecord::Linear { x, w, b } => {
                    let (dx, dw, db) =
                        ops::linear_backward(self.value(*x), self.value(*w), b.is_some(), &g)?;
                    add_grad(&mut grads, *x, dx)?;
                    add_grad(&mut grads, *w, dw)?;
                    if let (Some(bid), Some(db)) = (b, db) {
                        add_grad(&mut grads, *bid, db)?;
                    }
                }
                OpRecord::ScaleChannels { x, s } => {
                    let (dx, ds) =
                        ops::scale_channels_backward(self.value(*x), self.value(*s), &g)?;
                    add_grad(&mut grads, *x, dx)?;
                    add_grad(&mut grads, *s, ds)?;
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn add_grad<T: Scalar>(
    grads: &mut [Option<Tensor<T>>],
    id: ValueId,
    g: Tensor<T>,
) -> Result<()> {
    match &mut grads[id.0] {
        Some(t) => t.accumulate(&g)?,
        slot @ None => *slot = Some(g),
    }
    Ok(())
}

/// Gradient per tape value, indexed by [`ValueId`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ValueId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a leaf, or zeros when the leaf never influenced the
    /// output (a valid gradient: zero).
    pub fn get_or_zeros(&self, id: ValueId, dims: crate::tensor::Dims) -> Tensor<T> {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(dims),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::dims;
    use crate::testutil::rand_tensor;

    #[test]
    fn backward_on_empty_tape_is_an_error() {
        let mut tape = Tape::<f64>::new(true);
        let x = tape.leaf(Tensor::zeros(dims(1, 1, 2, 2)));
        let seed = Tensor::zeros(dims(1, 1, 2, 2));
        assert!(tape.backward(&x, &seed).is_err());
    }

    #[test]
    fn doubling_conv_has_gradient_two_everywhere() {
        // y = conv1x1(x) with weight 2: dL/dx = 2 * seed.
        let mut tape = Tape::<f64>::new(true);
        let x = tape.leaf(rand_tensor(dims(1, 1, 3, 3), 1));
        let w = tape.leaf(Tensor::from_vec(dims(1, 1, 1, 1), vec![2.0]).unwrap());
        let spec = crate::ops::ConvSpec::k1(1, 1).with_bias(false);
        let y = tape.conv2d(&x, &w, None, &spec).unwrap();
        let seed = Tensor::filled(dims(1, 1, 3, 3), 1.0);
        let grads = tape.backward(&y, &seed).unwrap();
        assert!(grads.get(x.id()).unwrap().data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn zero_seed_produces_zero_gradients() {
        let mut tape = Tape::<f64>::new(true);
        let x = tape.leaf(rand_tensor(dims(1, 2, 4, 4), 2));
        let y = tape.relu(&x);
        let seed = Tensor::zeros(dims(1, 2, 4, 4));
        let grads = tape.backward(&y, &seed).unwrap();
        assert!(grads.get(x.id()).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn value_feeding_two_consumers_accumulates() {
        // y = concat(x, x): each copy contributes its own gradient.
        let mut tape = Tape::<f64>::new(true);
        let x = tape.leaf(rand_tensor(dims(1, 2, 2, 2), 3));
        let y = tape.concat_channels(&[&x, &x]).unwrap();
        let seed = Tensor::filled(y.dims(), 1.0);
        let grads = tape.backward(&y, &seed).unwrap();
        assert!(grads.get(x.id()).unwrap().data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn non_recording_tape_runs_but_cannot_backprop() {
        let mut tape = Tape::<f64>::new(false);
        let x = tape.leaf(rand_tensor(dims(1, 1, 4, 4), 4));
        let y = tape.relu(&x);
        assert_eq!(y.dims(), dims(1, 1, 4, 4));
        assert_eq!(tape.num_ops(), 0);
        let seed = Tensor::zeros(dims(1, 1, 4, 4));
        assert!(tape.backward(&y, &seed).is_err());
    }

    #[test]
    fn untouched_leaf_reads_back_as_zeros() {
        let mut tape = Tape::<f64>::new(true);
        let x = tape.leaf(rand_tensor(dims(1, 1, 2, 2), 5));
        let unused = tape.leaf(rand_tensor(dims(1, 3, 1, 1), 6));
        let y = tape.relu(&x);
        let grads = tape.backward(&y, &Tensor::filled(dims(1, 1, 2, 2), 1.0)).unwrap();
        assert!(grads.get(unused.id()).is_none());
        let z = grads.get_or_zeros(unused.id(), unused.dims());
        assert!(z.data().iter().all(|&v| v == 0.0));
    }
}
