//! Reverse-mode differentiation over the operator set of [`crate::nnops`].
//!
//! A [`Tape`] records every operation applied during a forward pass together
//! with the context its backward rule needs. [`Tape::backward`] walks the
//! records in exact reverse order and returns gradients for every recorded
//! value, which covers both parameters and intermediate activations (the
//! latter are what Grad-CAM consumes).

mod gradcheck;

pub use gradcheck::{
    check_fragment, grad_check, kink_free_tensor, primitive_fragments, random_tensor,
    relative_error, Fragment, GradCheckReport, ParamCheck, MAX_COORDS_PER_TENSOR,
};

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::nnops::{self, BatchStats, ConvGeometry, PoolGeometry};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        geo: ConvGeometry,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: BatchStats<T>,
    },
    /// Running statistics are constants: no gradient flows into them.
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Var,
        var: Var,
        epsilon: f64,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    SliceChannels {
        x: Var,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
    },
    GlobalAvgPool {
        x: Var,
    },
    AvgPool {
        x: Var,
        geo: PoolGeometry,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    ChannelScale {
        x: Var,
        scale: Var,
    },
    Sum {
        x: Var,
    },
    WeightedSum {
        x: Var,
        coeffs: Tensor<T>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Single-writer record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Batch statistics saved by a train-mode batch norm.
    pub fn batch_stats(&self, v: Var) -> Option<&BatchStats<T>> {
        match &self.nodes[v.0].op {
            Op::BatchNormTrain { stats, .. } => Some(stats),
            _ => None,
        }
    }

    pub fn conv2d(&mut self, x: Var, w: Var, geo: ConvGeometry) -> Result<Var> {
        let y = nnops::conv2d(self.value(x), self.value(w), geo)?;
        Ok(self.push(y, Op::Conv2d { x, w, geo }))
    }

    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, epsilon: f64) -> Result<Var> {
        let (y, stats) = nnops::batch_norm_train(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            epsilon,
        )?;
        Ok(self.push(
            y,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                stats,
            },
        ))
    }

    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Var,
        var: Var,
        epsilon: f64,
    ) -> Result<Var> {
        let y = nnops::batch_norm_eval(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            self.value(mean).data(),
            self.value(var).data(),
            epsilon,
        )?;
        Ok(self.push(
            y,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                var,
                epsilon,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = nnops::relu(self.value(x));
        self.push(y, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = nnops::sigmoid(self.value(x));
        self.push(y, Op::Sigmoid { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        Ok(self.push(y, Op::Add { a, b }))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let y = self.value(x).slice_channels(start, len)?;
        Ok(self.push(y, Op::SliceChannels { x, start }))
    }

    pub fn split_channels(&mut self, x: Var, parts: usize) -> Result<Vec<Var>> {
        let c = self.value(x).channels();
        if parts == 0 || !c.is_multiple_of(parts) {
            return Err(Error::NonDivisibleChannels {
                channels: c,
                divisor: parts,
            });
        }
        let each = c / parts;
        (0..parts)
            .map(|i| self.slice_channels(x, i * each, each))
            .collect()
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<Tensor<T>> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let y = Tensor::concat_channels(&values)?;
        Ok(self.push(
            y,
            Op::Concat {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let y = nnops::global_avg_pool(self.value(x))?;
        Ok(self.push(y, Op::GlobalAvgPool { x }))
    }

    pub fn avg_pool2d(&mut self, x: Var, geo: PoolGeometry) -> Result<Var> {
        let y = nnops::avg_pool2d(self.value(x), geo)?;
        Ok(self.push(y, Op::AvgPool { x, geo }))
    }

    pub fn max_pool2d(&mut self, x: Var, geo: PoolGeometry) -> Result<Var> {
        let (y, argmax) = nnops::max_pool2d(self.value(x), geo)?;
        Ok(self.push(y, Op::MaxPool { x, argmax }))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = nnops::fully_connected(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(y, Op::Linear { x, w, b }))
    }

    pub fn channel_scale(&mut self, x: Var, scale: Var) -> Result<Var> {
        let y = nnops::channel_scale(self.value(x), self.value(scale))?;
        Ok(self.push(y, Op::ChannelScale { x, scale }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::Sum { x })
    }

    /// `Σ coeffs ⊙ x`, a scalar. Used to project a tensor output onto a fixed
    /// direction (gradient checks) or pick a single element (one-hot coeffs).
    pub fn weighted_sum(&mut self, x: Var, coeffs: Tensor<T>) -> Result<Var> {
        let xv = self.value(x);
        xv.expect_same_shape(&coeffs)?;
        let s = xv
            .data()
            .iter()
            .zip(coeffs.data())
            .map(|(&a, &b)| a * b)
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, coeffs }))
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = nnops::softmax_cross_entropy(self.value(logits), labels)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Hash of every piecewise-linear branch taken during the forward pass
    /// (ReLU sign masks and max-pool winners). Two evaluations with equal
    /// signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => {
                    for &v in self.value(*x).data() {
                        (v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Propagates from the scalar `loss` back to every recorded value.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NotScalarLoss(lv.shape()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let mut acc = |v: Var, d: Tensor<T>| -> Result<()> {
            match &mut grads[v.0] {
                Some(existing) => existing.accumulate(&d),
                slot @ None => {
                    *slot = Some(d);
                    Ok(())
                }
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, geo } => {
                let (dx, dw) = nnops::conv2d_backward(self.value(*x), self.value(*w), *geo, g)?;
                acc(*x, dx)?;
                acc(*w, dw)?;
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                stats,
            } => {
                let gv = self.value(*gamma);
                let (dx, dg, db) =
                    nnops::batch_norm_train_backward(self.value(*x), gv.data(), stats, g)?;
                acc(*x, dx)?;
                acc(*gamma, Tensor::new(gv.shape(), dg)?)?;
                acc(*beta, Tensor::new(self.value(*beta).shape(), db)?)?;
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                var,
                epsilon,
            } => {
                let gv = self.value(*gamma);
                let (dx, dg, db) = nnops::batch_norm_eval_backward(
                    self.value(*x),
                    gv.data(),
                    self.value(*mean).data(),
                    self.value(*var).data(),
                    *epsilon,
                    g,
                )?;
                acc(*x, dx)?;
                acc(*gamma, Tensor::new(gv.shape(), dg)?)?;
                acc(*beta, Tensor::new(self.value(*beta).shape(), db)?)?;
            }
            Op::Relu { x } => acc(*x, nnops::relu_backward(self.value(*x), g)?)?,
            Op::Sigmoid { x } => acc(*x, nnops::sigmoid_backward(&self.nodes[i].value, g)?)?,
            Op::Add { a, b } => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::SliceChannels { x, start } => {
                let src = self.value(*x);
                let [n, c, h, w] = src.shape();
                let len = g.channels();
                let plane = h * w;
                let mut d = Tensor::zeros(src.shape());
                for b in 0..n {
                    let to = (b * c + start) * plane;
                    let from = b * len * plane;
                    d.data_mut()[to..to + len * plane]
                        .copy_from_slice(&g.data()[from..from + len * plane]);
                }
                acc(*x, d)?;
            }
            Op::Concat { parts } => {
                let mut start = 0;
                for &p in parts {
                    let len = self.value(p).channels();
                    acc(p, g.slice_channels(start, len)?)?;
                    start += len;
                }
            }
            Op::GlobalAvgPool { x } => {
                acc(*x, nnops::global_avg_pool_backward(self.value(*x), g)?)?
            }
            Op::AvgPool { x, geo } => {
                acc(*x, nnops::avg_pool2d_backward(self.value(*x), *geo, g)?)?
            }
            Op::MaxPool { x, argmax } => {
                acc(*x, nnops::max_pool2d_backward(self.value(*x), argmax, g)?)?
            }
            Op::Linear { x, w, b } => {
                let (dx, dw, db) = nnops::fully_connected_backward(
                    self.value(*x),
                    self.value(*w),
                    self.value(*b),
                    g,
                )?;
                acc(*x, dx)?;
                acc(*w, dw)?;
                acc(*b, db)?;
            }
            Op::ChannelScale { x, scale } => {
                let (dx, ds) =
                    nnops::channel_scale_backward(self.value(*x), self.value(*scale), g)?;
                acc(*x, dx)?;
                acc(*scale, ds)?;
            }
            Op::Sum { x } => acc(*x, Tensor::full(self.value(*x).shape(), g.data()[0]))?,
            Op::WeightedSum { x, coeffs } => acc(*x, coeffs.scale(g.data()[0]))?,
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let d = nnops::softmax_cross_entropy_backward(probs, labels, g.data()[0]);
                acc(*logits, d.reshape(self.value(*logits).shape())?)?;
            }
        }
        Ok(())
    }
}

/// Gradients of a scalar with respect to every value on a tape.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<crate::tensor::Shape>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` when no path connects `v` to the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Like [`Gradients::get`] but unreachable values get explicit zeros.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0]))
    }
}
