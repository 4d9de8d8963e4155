use super::ops::{self, BnCache, Padding};
use super::{AutodiffError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Identity(Var),
    Conv2d { x: Var, k: Var, b: Option<Var>, pad: Padding },
    UpConv { x: Var, k: Var, b: Option<Var> },
    MaxPool { x: Var, argmax: Vec<u32> },
    BatchNormTrain { x: Var, gamma: Var, beta: Var, cache: BnCache },
    BatchNormInfer { x: Var, gamma: Var, beta: Var, mean: Tensor, var: Tensor },
    Relu(Var),
    MaskedRelu { x: Var, mask: Vec<bool> },
    Concat(Vec<Var>),
    PadReplicate { x: Var },
    Crop { x: Var },
    NearestUp(Var),
    Sum(Var),
    DotSum { x: Var, weights: Vec<f32> },
    RobustLoss { x: Var, grad: Vec<f32> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics produced by a train-mode batch-norm node.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

/// A piecewise choice made by a relu (input sign) or max-pool (winner index).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Branch {
    Relu(Vec<bool>),
    MaxPool(Vec<u32>),
}

/// Records operations in execution order; [`Tape::backward`] replays them in
/// exact reverse order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    frozen: Option<FrozenBranches>,
}

/// Branches replayed in order instead of being decided from the inputs.
#[derive(Debug)]
struct FrozenBranches {
    branches: Vec<Branch>,
    next: usize,
    mismatch: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A tape whose relu and max-pool nodes replay `branches` in recording
    /// order, so the recorded function stays on one smooth piece.
    pub fn with_frozen_branches(branches: Vec<Branch>) -> Self {
        Self { nodes: Vec::new(), frozen: Some(FrozenBranches { branches, next: 0, mismatch: false }) }
    }

    /// Every piecewise choice taken so far, in recording order.
    pub fn branches(&self) -> Vec<Branch> {
        self.nodes
            .iter()
            .filter_map(|node| match &node.op {
                Op::Relu(x) => Some(Branch::Relu(self.nodes[x.0].value.data().iter().map(|&v| v > 0.0).collect())),
                Op::MaskedRelu { mask, .. } => Some(Branch::Relu(mask.clone())),
                Op::MaxPool { argmax, .. } => Some(Branch::MaxPool(argmax.clone())),
                _ => None,
            })
            .collect()
    }

    /// False when a frozen tape met a branch that does not fit the recorded
    /// sequence; its values are then not meaningful.
    pub fn frozen_replay_ok(&self) -> bool {
        self.frozen.as_ref().is_none_or(|f| !f.mismatch && f.next == f.branches.len())
    }

    fn next_frozen(&mut self, len: usize, relu: bool) -> Option<Branch> {
        let f = self.frozen.as_mut()?;
        let b = f.branches.get(f.next).cloned();
        f.next += 1;
        match b {
            Some(Branch::Relu(m)) if relu && m.len() == len => Some(Branch::Relu(m)),
            Some(Branch::MaxPool(a)) if !relu && a.len() == len => Some(Branch::MaxPool(a)),
            _ => {
                f.mismatch = true;
                None
            }
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        debug_assert!(value.all_finite(), "non-finite values produced by {op:?}");
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf whose gradient is collected.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn identity(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.push(v, Op::Identity(x), &[x])
    }

    pub fn conv2d(&mut self, x: Var, k: Var, b: Option<Var>, pad: Padding) -> Result<Var, AutodiffError> {
        let y = ops::conv2d(self.value(x), self.value(k), b.map(|b| self.value(b)), pad)?;
        let mut inputs = vec![x, k];
        inputs.extend(b);
        Ok(self.push(y, Op::Conv2d { x, k, b, pad }, &inputs))
    }

    pub fn transposed_conv2x2(&mut self, x: Var, k: Var, b: Option<Var>) -> Result<Var, AutodiffError> {
        let y = ops::transposed_conv2x2(self.value(x), self.value(k), b.map(|b| self.value(b)))?;
        let mut inputs = vec![x, k];
        inputs.extend(b);
        Ok(self.push(y, Op::UpConv { x, k, b }, &inputs))
    }

    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let (mut y, mut argmax) = ops::maxpool2x2(self.value(x))?;
        if let Some(Branch::MaxPool(frozen)) = self.next_frozen(argmax.len(), false) {
            let src = self.value(x).data();
            for (o, &i) in y.data_mut().iter_mut().zip(&frozen) {
                *o = src[i as usize];
            }
            argmax = frozen;
        }
        Ok(self.push(y, Op::MaxPool { x, argmax }, &[x]))
    }

    /// Train-mode batch norm; returns the output and the batch statistics
    /// the caller folds into its running averages.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats), AutodiffError> {
        let out = ops::batchnorm_train(self.value(x), self.value(gamma), self.value(beta))?;
        let stats = BatchStats { mean: out.batch_mean, var: out.batch_var };
        let v = self.push(out.y, Op::BatchNormTrain { x, gamma, beta, cache: out.cache }, &[x, gamma, beta]);
        Ok((v, stats))
    }

    pub fn batchnorm_infer(&mut self, x: Var, gamma: Var, beta: Var, mean: Tensor, var: Tensor) -> Result<Var, AutodiffError> {
        let y = ops::batchnorm_infer(self.value(x), self.value(gamma), self.value(beta), &mean, &var)?;
        Ok(self.push(y, Op::BatchNormInfer { x, gamma, beta, mean, var }, &[x, gamma, beta]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        if let Some(Branch::Relu(mask)) = self.next_frozen(self.value(x).len(), true) {
            let mut y = self.value(x).clone();
            for (v, &keep) in y.data_mut().iter_mut().zip(&mask) {
                if !keep {
                    *v = 0.0;
                }
            }
            return self.push(y, Op::MaskedRelu { x, mask }, &[x]);
        }
        let y = ops::relu(self.value(x));
        self.push(y, Op::Relu(x), &[x])
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var, AutodiffError> {
        let values: Vec<&Tensor> = xs.iter().map(|&v| self.value(v)).collect();
        let y = ops::concat_channels(&values)?;
        Ok(self.push(y, Op::Concat(xs.to_vec()), xs))
    }

    pub fn pad_replicate(&mut self, x: Var, pad_h: usize, pad_w: usize) -> Result<Var, AutodiffError> {
        let y = ops::pad_replicate(self.value(x), pad_h, pad_w)?;
        Ok(self.push(y, Op::PadReplicate { x }, &[x]))
    }

    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Result<Var, AutodiffError> {
        let y = ops::crop(self.value(x), h, w)?;
        Ok(self.push(y, Op::Crop { x }, &[x]))
    }

    pub fn nearest_upsample2x(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let y = ops::nearest_upsample2x(self.value(x))?;
        Ok(self.push(y, Op::NearestUp(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        self.push(Tensor::scalar(s as f32), Op::Sum(x), &[x])
    }

    /// `Σ weights[i] * x[i]`, accumulated in f64.
    pub fn dot_sum(&mut self, x: Var, weights: Vec<f32>) -> Result<Var, AutodiffError> {
        if weights.len() != self.value(x).len() {
            return Err(AutodiffError::shape(format!(
                "dot_sum weights {} for tensor {:?}",
                weights.len(),
                self.value(x).dims()
            )));
        }
        let s: f64 = self.value(x).data().iter().zip(&weights).map(|(&a, &b)| a as f64 * b as f64).sum();
        Ok(self.push(Tensor::scalar(s as f32), Op::DotSum { x, weights }, &[x]))
    }

    /// Records a scalar loss node whose value and gradient with respect to
    /// `x` were computed externally.
    pub fn custom_loss(&mut self, x: Var, value: f32, grad: Vec<f32>) -> Result<Var, AutodiffError> {
        if grad.len() != self.value(x).len() {
            return Err(AutodiffError::shape("loss gradient length differs from its input"));
        }
        Ok(self.push(Tensor::scalar(value), Op::RobustLoss { x, grad }, &[x]))
    }

    /// Reverse pass from a scalar node. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients, AutodiffError> {
        let Some(node) = self.nodes.get(loss.0) else {
            return Err(AutodiffError::NoTape);
        };
        if node.value.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(node.value.dims().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(node.value.dims(), 1.0));

        for (idx, node) in self.nodes.iter().enumerate().take(loss.0 + 1).rev() {
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let mut send = |v: Var, t: Tensor| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(t),
                }
            };
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::Identity(x) => send(*x, g),
                Op::Conv2d { x, k, b, pad } => {
                    let r = ops::conv2d_backward(val(*x), val(*k), *pad, &g)?;
                    send(*x, r.dx);
                    send(*k, r.dk);
                    if let Some(b) = b {
                        send(*b, r.db);
                    }
                }
                Op::UpConv { x, k, b } => {
                    let r = ops::transposed_conv2x2_backward(val(*x), val(*k), &g)?;
                    send(*x, r.dx);
                    send(*k, r.dk);
                    if let Some(b) = b {
                        send(*b, r.db);
                    }
                }
                Op::MaxPool { x, argmax } => {
                    send(*x, ops::maxpool2x2_backward(val(*x).dims(), argmax, &g));
                }
                Op::BatchNormTrain { x, gamma, beta, cache } => {
                    let (dx, dg, db) = ops::batchnorm_train_backward(cache, val(*gamma), &g)?;
                    send(*x, dx);
                    send(*gamma, dg);
                    send(*beta, db);
                }
                Op::BatchNormInfer { x, gamma, beta, mean, var } => {
                    let (dx, dg, db) = ops::batchnorm_infer_backward(val(*x), val(*gamma), mean, var, &g)?;
                    send(*x, dx);
                    send(*gamma, dg);
                    send(*beta, db);
                }
                Op::Relu(x) => send(*x, ops::relu_backward(&node.value, &g)),
                Op::MaskedRelu { x, mask } => {
                    let mut dx = g;
                    for (v, &keep) in dx.data_mut().iter_mut().zip(mask) {
                        if !keep {
                            *v = 0.0;
                        }
                    }
                    send(*x, dx)
                }
                Op::Concat(xs) => {
                    let channels: Vec<usize> = xs.iter().map(|&v| val(v).dims()[1]).collect();
                    for (v, part) in xs.iter().zip(ops::split_channels(&g, &channels)?) {
                        send(*v, part);
                    }
                }
                Op::PadReplicate { x } => {
                    let [_, _, h, w] = val(*x).shape4()?;
                    send(*x, ops::pad_replicate_backward(&g, h, w)?);
                }
                Op::Crop { x } => {
                    let [_, _, h, w] = val(*x).shape4()?;
                    send(*x, ops::crop_backward(&g, h, w)?);
                }
                Op::NearestUp(x) => send(*x, ops::nearest_upsample2x_backward(&g)?),
                Op::Sum(x) => {
                    let s = g.data()[0];
                    send(*x, Tensor::full(val(*x).dims(), s));
                }
                Op::DotSum { x, weights } => {
                    let s = g.data()[0];
                    let d = weights.iter().map(|w| w * s).collect();
                    send(*x, Tensor::from_vec(val(*x).dims(), d)?);
                }
                Op::RobustLoss { x, grad } => {
                    let s = g.data()[0];
                    let d = grad.iter().map(|w| w * s).collect();
                    send(*x, Tensor::from_vec(val(*x).dims(), d)?);
                }
            }
        }
        Ok(Gradients { grads })
    }
}
