//! Reverse-mode differentiation over a per-forward-pass tape.
//!
//! A `Tape` is built fresh for every forward pass: leaves are pushed for the
//! batch and for every trainable parameter, ops record enough context to run
//! their backward kernel, and `backward` walks the nodes in reverse creation
//! order. Gradients are overwritten on every call, never accumulated across
//! calls.

use crate::batchnorm::{self, BnCache};
use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: BnCache,
    },
    Relu {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    GlobalAvgPool {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Sum {
        x: Var,
    },
    Blend {
        a: Var,
        b: Var,
        alpha: Var,
    },
    Concat {
        a: Var,
        b: Var,
        da: usize,
        db: usize,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
}

struct Node {
    value: Tensor,
    grad: Tensor,
    op: Op,
}

/// Records a forward pass and differentiates it.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let grad = Tensor::zeros(value.shape());
        self.nodes.push(Node { value, grad, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target w.r.t. `v`.
    pub fn grad(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].grad
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let y = ops::conv2d_forward(
            self.value(x),
            self.value(w),
            self.value(b),
            stride,
            padding,
        )?;
        Ok(self.push(y, Op::Conv2d { x, w, b, stride, padding }))
    }

    /// Train-mode batch norm. The running-stat update is the caller's job;
    /// the returned cache carries the batch mean/var it needs.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BnCache)> {
        let (y, cache) = batchnorm::bn_train_kernel(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        )?;
        let out_cache = cache.clone();
        Ok((
            self.push(y, Op::BatchNorm { x, gamma, beta, cache }),
            out_cache,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = ops::relu_forward(self.value(x));
        self.push(y, Op::Relu { x })
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = ops::linear_forward(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(y, Op::Linear { x, w, b }))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let y = ops::global_avg_pool_forward(self.value(x))?;
        Ok(self.push(y, Op::GlobalAvgPool { x }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if !self.value(a).same_shape(self.value(b)) {
            return Err(Error::Shape {
                context: "tape add",
                expected: format!("{:?}", self.value(a).shape()),
                found: format!("{:?}", self.value(b).shape()),
            });
        }
        let y = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a)
                .iter()
                .zip(self.value(b).iter())
                .map(|(u, v)| u + v)
                .collect(),
        )?;
        Ok(self.push(y, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if !self.value(a).same_shape(self.value(b)) {
            return Err(Error::Shape {
                context: "tape mul",
                expected: format!("{:?}", self.value(a).shape()),
                found: format!("{:?}", self.value(b).shape()),
            });
        }
        let y = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a)
                .iter()
                .zip(self.value(b).iter())
                .map(|(u, v)| u * v)
                .collect(),
        )?;
        Ok(self.push(y, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let y = self.value(x).map(|v| v * factor);
        self.push(y, Op::Scale { x, factor })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.value(x).iter().sum();
        self.push(Tensor::scalar(total), Op::Sum { x })
    }

    /// Per-channel convex-style blend `alpha*a + (1-alpha)*b` (alpha rank-1).
    pub fn blend(&mut self, a: Var, b: Var, alpha: Var) -> Result<Var> {
        if !self.value(a).same_shape(self.value(b)) {
            return Err(Error::Shape {
                context: "tape blend",
                expected: format!("{:?}", self.value(a).shape()),
                found: format!("{:?}", self.value(b).shape()),
            });
        }
        if self.value(alpha).len() != self.value(a).dim(1) {
            return Err(Error::Shape {
                context: "tape blend",
                expected: format!("alpha of length {}", self.value(a).dim(1)),
                found: format!("{}", self.value(alpha).len()),
            });
        }
        let y = batchnorm::blend_channels(self.value(a), self.value(b), self.value(alpha).data());
        Ok(self.push(y, Op::Blend { a, b, alpha }))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let da = self.value(a).dim(1);
        let db = self.value(b).dim(1);
        let y = ops::concat_cols(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Concat { a, b, da, db }))
    }

    /// Mean cross-entropy loss; also returns the per-sample true-class
    /// confidences from this forward pass.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<(Var, Vec<f64>)> {
        let (loss, confidence, probs) =
            ops::softmax_cross_entropy_forward(self.value(logits), labels)?;
        let v = self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        );
        Ok((v, confidence))
    }

    /// Reverse pass from a scalar loss. Every node's grad is overwritten.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::contract(format!(
                "backward target must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        for node in self.nodes.iter_mut() {
            node.grad = Tensor::zeros(node.value.shape());
        }
        self.nodes[loss.0].grad = Tensor::scalar(1.0);

        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.iter().all(|&g| g == 0.0) {
                continue;
            }
            let grad = self.nodes[i].grad.clone();
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Conv2d { x, w, b, stride, padding } => {
                    let (x, w, b, stride, padding) = (*x, *w, *b, *stride, *padding);
                    let (dx, dw, db) = ops::conv2d_backward(
                        &grad,
                        &self.nodes[x.0].value,
                        &self.nodes[w.0].value,
                        stride,
                        padding,
                    );
                    self.accumulate(x, &dx);
                    self.accumulate(w, &dw);
                    self.accumulate(b, &db);
                }
                Op::BatchNorm { x, gamma, beta, cache } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let (dx, dgamma, dbeta) = batchnorm::bn_backward_kernel(
                        &grad,
                        cache,
                        self.nodes[gamma.0].value.data(),
                    )?;
                    self.accumulate(x, &dx);
                    self.accumulate_slice(gamma, &dgamma);
                    self.accumulate_slice(beta, &dbeta);
                }
                Op::Relu { x } => {
                    let x = *x;
                    let dx = ops::relu_backward(&grad, &self.nodes[x.0].value);
                    self.accumulate(x, &dx);
                }
                Op::Linear { x, w, b } => {
                    let (x, w, b) = (*x, *w, *b);
                    let (dx, dw, db) =
                        ops::linear_backward(&grad, &self.nodes[x.0].value, &self.nodes[w.0].value);
                    self.accumulate(x, &dx);
                    self.accumulate(w, &dw);
                    self.accumulate(b, &db);
                }
                Op::GlobalAvgPool { x } => {
                    let x = *x;
                    let dx = ops::global_avg_pool_backward(&grad, self.nodes[x.0].value.shape());
                    self.accumulate(x, &dx);
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    self.accumulate(a, &grad);
                    self.accumulate(b, &grad);
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    let da = Tensor::new(
                        grad.shape().to_vec(),
                        grad.iter()
                            .zip(self.nodes[b.0].value.iter())
                            .map(|(g, v)| g * v)
                            .collect(),
                    )?;
                    let db = Tensor::new(
                        grad.shape().to_vec(),
                        grad.iter()
                            .zip(self.nodes[a.0].value.iter())
                            .map(|(g, v)| g * v)
                            .collect(),
                    )?;
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::Scale { x, factor } => {
                    let (x, factor) = (*x, *factor);
                    let dx = grad.map(|g| g * factor);
                    self.accumulate(x, &dx);
                }
                Op::Sum { x } => {
                    let x = *x;
                    let dx = Tensor::full(self.nodes[x.0].value.shape(), grad.item());
                    self.accumulate(x, &dx);
                }
                Op::Blend { a, b, alpha } => {
                    let (a, b, alpha) = (*a, *b, *alpha);
                    let (da, db, dalpha) = batchnorm::blend_channels_backward(
                        &grad,
                        &self.nodes[a.0].value,
                        &self.nodes[b.0].value,
                        self.nodes[alpha.0].value.data(),
                    );
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                    self.accumulate_slice(alpha, &dalpha);
                }
                Op::Concat { a, b, da, db } => {
                    let (a, b, da, db) = (*a, *b, *da, *db);
                    let (ga, gb) = ops::concat_cols_backward(&grad, da, db);
                    self.accumulate(a, &ga);
                    self.accumulate(b, &gb);
                }
                Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                    let logits = *logits;
                    let dz = ops::softmax_cross_entropy_backward(probs, labels, grad.item());
                    self.accumulate(logits, &dz);
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: &Tensor) {
        let g = self.nodes[v.0].grad.data_mut();
        for (gi, di) in g.iter_mut().zip(delta.iter()) {
            *gi += di;
        }
    }

    fn accumulate_slice(&mut self, v: Var, delta: &[f64]) {
        let g = self.nodes[v.0].grad.data_mut();
        for (gi, di) in g.iter_mut().zip(delta.iter()) {
            *gi += di;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_check, max_rel_error};
    use crate::rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng::stream(seed, &[3131]);
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng::normal(&mut r)).collect()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![2.0, -1.0, 7.0]));
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn quadratic_gradient_is_identity() {
        // loss = sum(x^2)/2 at x = [1, -2, 3] -> grad = x
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, -2.0, 3.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let loss = tape.scale(s, 0.5);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn grads_are_overwritten_not_accumulated() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![4.0]));
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).data(), &[1.0]);
    }

    #[test]
    fn shared_subexpression_accumulates_within_pass() {
        // loss = sum(x + x) -> grad 2
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.5]));
        let two_x = tape.add(x, x).unwrap();
        let loss = tape.sum(two_x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).data(), &[2.0]);
    }

    /// Full three-layer Conv-BN-ReLU net against central finite differences.
    #[test]
    fn conv_bn_relu_net_matches_finite_differences() {
        let batch = rand_tensor(&[2, 1, 6, 6], 1);
        let labels = [0usize, 2];
        let channels = [2usize, 3, 4];
        let eps = 1e-5;

        // parameters, flattened into one vector for the finite-difference probe
        let mut params: Vec<Tensor> = Vec::new();
        let mut c_in = 1;
        for (i, &c_out) in channels.iter().enumerate() {
            params.push(rand_tensor(&[c_out, c_in, 3, 3], 100 + i as u64)); // conv w
            params.push(rand_tensor(&[c_out], 200 + i as u64)); // conv b
            params.push(Tensor::full(&[c_out], 1.0)); // gamma
            params.push(Tensor::zeros(&[c_out])); // beta
            c_in = c_out;
        }
        params.push(rand_tensor(&[3, channels[2]], 300)); // head w
        params.push(rand_tensor(&[3], 301)); // head b

        let forward = |params: &[Tensor], tape: &mut Tape| -> (Var, Vec<Var>) {
            let mut vars = Vec::new();
            for p in params {
                vars.push(tape.leaf(p.clone()));
            }
            let x0 = tape.leaf(batch.clone());
            let mut h = x0;
            for b in 0..3 {
                let w = vars[b * 4];
                let bb = vars[b * 4 + 1];
                let g = vars[b * 4 + 2];
                let be = vars[b * 4 + 3];
                let c = tape.conv2d(h, w, bb, 1, 1).unwrap();
                let (bn, _) = tape.batch_norm(c, g, be, eps).unwrap();
                h = tape.relu(bn);
            }
            let pooled = tape.global_avg_pool(h).unwrap();
            let logits = tape.linear(pooled, vars[12], vars[13]).unwrap();
            let (loss, _) = tape.softmax_cross_entropy(logits, &labels).unwrap();
            (loss, vars)
        };

        let mut tape = Tape::new();
        let (loss, vars) = forward(&params, &mut tape);
        tape.backward(loss).unwrap();

        for (pi, p) in params.iter().enumerate() {
            let objective = |probe: &Tensor| {
                let mut trial = params.clone();
                trial[pi] = probe.clone();
                let mut t = Tape::new();
                let (l, _) = forward(&trial, &mut t);
                t.value(l).item()
            };
            let numeric = finite_diff_check(objective, p, 1e-5);
            let err = max_rel_error(tape.grad(vars[pi]), &numeric);
            assert!(err < 1e-6, "param {pi}: rel err {err}");
        }
    }

    #[test]
    fn blend_routes_gradients_to_both_branches_and_alpha() {
        // the reactivation path: gamma_ori = 0 still leaves x reachable
        let x = rand_tensor(&[3, 2, 2, 2], 7);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let g_ori = tape.leaf(Tensor::zeros(&[2])); // dead original
        let b_ori = tape.leaf(Tensor::zeros(&[2]));
        let g_add = tape.leaf(Tensor::full(&[2], 1.0));
        let b_add = tape.leaf(Tensor::zeros(&[2]));
        let alpha = tape.leaf(Tensor::full(&[2], 0.5));
        let (y_ori, _) = tape.batch_norm(xv, g_ori, b_ori, 1e-5).unwrap();
        let (y_add, _) = tape.batch_norm(xv, g_add, b_add, 1e-5).unwrap();
        let blended = tape.blend(y_ori, y_add, alpha).unwrap();
        let r = tape.relu(blended);
        let loss = tape.sum(r);
        tape.backward(loss).unwrap();

        assert!(tape.grad(alpha).iter().any(|&g| g != 0.0));
        assert!(tape.grad(g_add).iter().any(|&g| g != 0.0));
        assert!(tape.grad(xv).iter().any(|&g| g != 0.0));
    }
}
