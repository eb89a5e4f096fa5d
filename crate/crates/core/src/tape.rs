//! Reverse-mode automatic differentiation over a recorded op list.
//!
//! Forward calls append ops to the tape; `backward` replays them in exact
//! reverse execution order, accumulating gradients additively wherever a
//! value fans out. Parameters are tape leaves registered per forward pass;
//! a parameter the loss never touches gets an exactly-zero gradient.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::float::Float;
use crate::ops;
use crate::ops::BatchStats;
use crate::tensor::Tensor;

/// Handle to a value recorded on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ValId(usize);

impl ValId {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Node<T: Float> {
    Leaf {
        requires_grad: bool,
    },
    Conv2d {
        x: ValId,
        w: ValId,
        b: ValId,
        stride: usize,
        pad: usize,
    },
    BatchNormTrain {
        x: ValId,
        gamma: ValId,
        beta: ValId,
        stats: BatchStats<T>,
    },
    BatchNormEval {
        x: ValId,
        gamma: ValId,
        beta: ValId,
        mean: Tensor<T>,
        var: Tensor<T>,
        eps: T,
    },
    Relu {
        x: ValId,
    },
    MaxPool {
        x: ValId,
        argmax: Vec<usize>,
    },
    Concat {
        a: ValId,
        b: ValId,
        a_channels: usize,
        b_channels: usize,
    },
    GlobalAvgPool {
        x: ValId,
    },
    Dense {
        x: ValId,
        w: ValId,
        b: ValId,
    },
    SoftmaxCrossEntropy {
        logits: ValId,
        probs: Tensor<T>,
        labels: Vec<usize>,
    },
    Sum {
        x: ValId,
    },
    WeightedSum {
        x: ValId,
        weights: Tensor<T>,
    },
}

/// Gradient tape: the ordered op record plus all intermediate values.
pub struct Tape<T: Float> {
    nodes: Vec<Node<T>>,
    vals: Vec<Tensor<T>>,
}

/// Per-value gradients produced by `Tape::backward`.
pub struct Gradients<T: Float> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    /// Gradient for a tape value; `None` for values off the loss path that
    /// were not registered as parameters.
    pub fn get(&self, id: ValId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            vals: Vec::new(),
        }
    }

    fn push(&mut self, node: Node<T>, value: Tensor<T>) -> ValId {
        self.nodes.push(node);
        self.vals.push(value);
        ValId(self.nodes.len() - 1)
    }

    /// Register a non-trainable input.
    pub fn input(&mut self, value: Tensor<T>) -> ValId {
        self.push(
            Node::Leaf {
                requires_grad: false,
            },
            value,
        )
    }

    /// Register a trainable parameter leaf.
    pub fn param(&mut self, value: Tensor<T>) -> ValId {
        self.push(
            Node::Leaf {
                requires_grad: true,
            },
            value,
        )
    }

    pub fn value(&self, id: ValId) -> &Tensor<T> {
        &self.vals[id.0]
    }

    pub fn conv2d(
        &mut self,
        x: ValId,
        w: ValId,
        b: ValId,
        stride: usize,
        pad: usize,
    ) -> Result<ValId> {
        let y = ops::conv2d_forward(
            &self.vals[x.0],
            &self.vals[w.0],
            &self.vals[b.0],
            stride,
            pad,
        )?;
        Ok(self.push(
            Node::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            y,
        ))
    }

    /// Train-mode batchnorm; returns the new value and the batch statistics
    /// so the caller can update running estimates.
    pub fn batchnorm_train(
        &mut self,
        x: ValId,
        gamma: ValId,
        beta: ValId,
        eps: T,
    ) -> Result<(ValId, Tensor<T>, Tensor<T>)> {
        let (y, stats) = ops::batchnorm_train_forward(
            &self.vals[x.0],
            &self.vals[gamma.0],
            &self.vals[beta.0],
            eps,
        )?;
        let (mean, var) = (stats.mean.clone(), stats.var.clone());
        let id = self.push(
            Node::BatchNormTrain {
                x,
                gamma,
                beta,
                stats,
            },
            y,
        );
        Ok((id, mean, var))
    }

    pub fn batchnorm_eval(
        &mut self,
        x: ValId,
        gamma: ValId,
        beta: ValId,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: T,
    ) -> Result<ValId> {
        let y = ops::batchnorm_eval_forward(
            &self.vals[x.0],
            &self.vals[gamma.0],
            &self.vals[beta.0],
            running_mean,
            running_var,
            eps,
        )?;
        Ok(self.push(
            Node::BatchNormEval {
                x,
                gamma,
                beta,
                mean: running_mean.clone(),
                var: running_var.clone(),
                eps,
            },
            y,
        ))
    }

    pub fn relu(&mut self, x: ValId) -> ValId {
        let y = ops::relu_forward(&self.vals[x.0]);
        self.push(Node::Relu { x }, y)
    }

    pub fn maxpool(&mut self, x: ValId, kernel: usize, stride: usize) -> Result<ValId> {
        let (y, argmax) = ops::maxpool_forward(&self.vals[x.0], kernel, stride)?;
        Ok(self.push(Node::MaxPool { x, argmax }, y))
    }

    pub fn concat_channels(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        let y = ops::concat_channels_forward(&self.vals[a.0], &self.vals[b.0])?;
        let a_channels = self.vals[a.0].shape()[1];
        let b_channels = self.vals[b.0].shape()[1];
        Ok(self.push(
            Node::Concat {
                a,
                b,
                a_channels,
                b_channels,
            },
            y,
        ))
    }

    pub fn global_avg_pool(&mut self, x: ValId) -> Result<ValId> {
        let y = ops::global_avg_pool_forward(&self.vals[x.0])?;
        Ok(self.push(Node::GlobalAvgPool { x }, y))
    }

    pub fn dense(&mut self, x: ValId, w: ValId, b: ValId) -> Result<ValId> {
        let y = ops::dense_forward(&self.vals[x.0], &self.vals[w.0], &self.vals[b.0])?;
        Ok(self.push(Node::Dense { x, w, b }, y))
    }

    /// Mean cross-entropy loss over the batch (scalar output).
    pub fn softmax_cross_entropy(&mut self, logits: ValId, labels: &[usize]) -> Result<ValId> {
        let (loss, probs) = ops::softmax_cross_entropy_forward(&self.vals[logits.0], labels)?;
        Ok(self.push(
            Node::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            Tensor::scalar(loss),
        ))
    }

    /// Sum of all elements (scalar output).
    pub fn sum(&mut self, x: ValId) -> ValId {
        let mut acc = T::ZERO;
        for v in self.vals[x.0].data() {
            acc += *v;
        }
        self.push(Node::Sum { x }, Tensor::scalar(acc))
    }

    /// sum(weights .* x) against a constant weight tensor (scalar output).
    pub fn weighted_sum(&mut self, x: ValId, weights: &Tensor<T>) -> Result<ValId> {
        let acc = ops::weighted_sum_forward(&self.vals[x.0], weights)?;
        Ok(self.push(
            Node::WeightedSum {
                x,
                weights: weights.clone(),
            },
            Tensor::scalar(acc),
        ))
    }

    fn accumulate(slot: &mut Option<Tensor<T>>, grad: Tensor<T>) {
        match slot {
            Some(existing) => {
                for (e, g) in existing.data_mut().iter_mut().zip(grad.data()) {
                    *e += *g;
                }
            }
            None => *slot = Some(grad),
        }
    }

    /// Reverse pass from a scalar loss. Every parameter leaf receives a
    /// gradient tensor of its own shape; unused parameters get exact zeros.
    pub fn backward(&self, loss: ValId) -> Result<Gradients<T>> {
        if !self.nodes.iter().any(|n| !matches!(n, Node::Leaf { .. })) {
            return Err(Error::EmptyTape);
        }
        let loss_val = &self.vals[loss.0];
        if !loss_val.is_scalar() {
            return Err(Error::NotScalar {
                elements: loss_val.elements(),
            });
        }

        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(T::ONE));

        for idx in (0..self.nodes.len()).rev() {
            let dy = match &grads[idx] {
                Some(g) => g.clone(),
                None => continue,
            };
            match &self.nodes[idx] {
                Node::Leaf { .. } => {}
                Node::Conv2d {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                } => {
                    let (dx, dw, db) = ops::conv2d_backward(
                        &self.vals[x.0],
                        &self.vals[w.0],
                        &self.vals[b.0],
                        *stride,
                        *pad,
                        &dy,
                    )?;
                    Self::accumulate(&mut grads[x.0], dx);
                    Self::accumulate(&mut grads[w.0], dw);
                    Self::accumulate(&mut grads[b.0], db);
                }
                Node::BatchNormTrain {
                    x,
                    gamma,
                    beta,
                    stats,
                } => {
                    let (dx, dgamma, dbeta) = ops::batchnorm_train_backward(
                        &self.vals[x.0],
                        &self.vals[gamma.0],
                        stats,
                        &dy,
                    )?;
                    Self::accumulate(&mut grads[x.0], dx);
                    Self::accumulate(&mut grads[gamma.0], dgamma);
                    Self::accumulate(&mut grads[beta.0], dbeta);
                }
                Node::BatchNormEval {
                    x,
                    gamma,
                    beta,
                    mean,
                    var,
                    eps,
                } => {
                    let (dx, dgamma, dbeta) = ops::batchnorm_eval_backward(
                        &self.vals[x.0],
                        &self.vals[gamma.0],
                        mean,
                        var,
                        *eps,
                        &dy,
                    )?;
                    Self::accumulate(&mut grads[x.0], dx);
                    Self::accumulate(&mut grads[gamma.0], dgamma);
                    Self::accumulate(&mut grads[beta.0], dbeta);
                }
                Node::Relu { x } => {
                    let dx = ops::relu_backward(&self.vals[x.0], &dy);
                    Self::accumulate(&mut grads[x.0], dx);
                }
                Node::MaxPool { x, argmax } => {
                    let dx = ops::maxpool_backward(self.vals[x.0].shape(), argmax, &dy);
                    Self::accumulate(&mut grads[x.0], dx);
                }
                Node::Concat {
                    a,
                    b,
                    a_channels,
                    b_channels,
                } => {
                    let (da, db) = ops::concat_channels_backward(&dy, *a_channels, *b_channels)?;
                    Self::accumulate(&mut grads[a.0], da);
                    Self::accumulate(&mut grads[b.0], db);
                }
                Node::GlobalAvgPool { x } => {
                    let dx = ops::global_avg_pool_backward(self.vals[x.0].shape(), &dy);
                    Self::accumulate(&mut grads[x.0], dx);
                }
                Node::Dense { x, w, b } => {
                    let (dx, dw, dbias) =
                        ops::dense_backward(&self.vals[x.0], &self.vals[w.0], &dy)?;
                    Self::accumulate(&mut grads[x.0], dx);
                    Self::accumulate(&mut grads[w.0], dw);
                    Self::accumulate(&mut grads[b.0], dbias);
                }
                Node::SoftmaxCrossEntropy {
                    logits,
                    probs,
                    labels,
                } => {
                    let dlogits =
                        ops::softmax_cross_entropy_backward(probs, labels, dy.scalar_value());
                    Self::accumulate(&mut grads[logits.0], dlogits);
                }
                Node::Sum { x } => {
                    let dx = Tensor::filled(self.vals[x.0].shape(), dy.scalar_value());
                    Self::accumulate(&mut grads[x.0], dx);
                }
                Node::WeightedSum { x, weights } => {
                    let g = dy.scalar_value();
                    let dx = Tensor::from_vec(
                        weights.shape(),
                        weights.data().iter().map(|w| *w * g).collect(),
                    )?;
                    Self::accumulate(&mut grads[x.0], dx);
                }
            }
        }

        // Unused parameters get exact zeros.
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Node::Leaf {
                requires_grad: true,
            } = node
            {
                if grads[idx].is_none() {
                    grads[idx] = Some(Tensor::zeros(self.vals[idx].shape()));
                }
            }
        }
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_param_gives_ones() {
        let mut tape = Tape::<f64>::new();
        let p = tape.param(Tensor::filled(&[2, 3], 1.5));
        let loss = tape.sum(p);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[1.0; 6][..]);
    }

    #[test]
    fn unused_param_gets_exact_zero() {
        let mut tape = Tape::<f64>::new();
        let used = tape.param(Tensor::filled(&[3], 2.0));
        let unused = tape.param(Tensor::filled(&[4], 2.0));
        let loss = tape.sum(used);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0; 4][..]);
    }

    #[test]
    fn backward_on_empty_tape_errors() {
        let mut tape = Tape::<f64>::new();
        let p = tape.param(Tensor::scalar(1.0));
        assert!(matches!(tape.backward(p), Err(Error::EmptyTape)));
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::<f64>::new();
        let p = tape.param(Tensor::filled(&[2, 2, 2, 2], 1.0));
        let y = tape.relu(p);
        assert!(matches!(
            tape.backward(y),
            Err(Error::NotScalar { elements: 16 })
        ));
    }

    #[test]
    fn fanout_gradients_accumulate_additively() {
        // x feeds both sides of a concat; the loss sums everything, so d/dx = 2.
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::filled(&[1, 2, 2, 2], 3.0));
        let cat = tape.concat_channels(x, x).unwrap();
        let loss = tape.sum(cat);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0; 8][..]);
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut tape = Tape::<f32>::new();
            let mut rng = crate::rng::Rng::new(99);
            let data: Vec<f32> = (0..48).map(|_| rng.normal()).collect();
            let x = tape.input(Tensor::from_vec(&[1, 3, 4, 4], data).unwrap());
            let w = tape.param(Tensor::filled(&[2, 3, 3, 3], 0.1));
            let b = tape.param(Tensor::zeros(&[2]));
            let c = tape.conv2d(x, w, b, 1, 1).unwrap();
            let r = tape.relu(c);
            let g = tape.global_avg_pool(r).unwrap();
            let dw = tape.param(Tensor::filled(&[2, 2], 0.5));
            let db = tape.param(Tensor::zeros(&[2]));
            let d = tape.dense(g, dw, db).unwrap();
            let loss = tape.softmax_cross_entropy(d, &[1]).unwrap();
            let grads = tape.backward(loss).unwrap();
            (
                tape.value(loss).scalar_value().to_bits(),
                grads
                    .get(w)
                    .unwrap()
                    .data()
                    .iter()
                    .map(|v| v.to_bits())
                    .collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }
}
