//! Reverse-mode differentiation over a linear tape of tensor operations.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward pass. [`Tape::backward`] walks the nodes in reverse
//! and accumulates gradients into every node that (transitively) depends on a
//! leaf created with `requires_grad`.

use std::borrow::Cow;

use super::conv::{self, ConvGeometry, Padding};
use super::{Scalar, Tensor, TensorError};

/// Variance epsilon used by batch normalization.
pub const BN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// How batch normalization obtains its statistics.
#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a, T> {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with externally tracked running statistics.
    Infer {
        running_mean: &'a [T],
        running_var: &'a [T],
    },
}

/// Per-channel statistics observed by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Population (biased) variance.
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Dense {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Mse {
        pred: Var,
        target: Var,
    },
}

struct Node<'p, T: Scalar> {
    value: Cow<'p, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of a forward computation.
///
/// Parameters can be borrowed for the lifetime `'p` so that a forward pass
/// does not copy model weights.
pub struct Tape<'p, T: Scalar> {
    nodes: Vec<Node<'p, T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn mismatch(msg: String) -> TensorError {
    TensorError::ShapeMismatch(msg)
}

impl<'p, T: Scalar> Default for Tape<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'p, Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Option<Var>]) -> bool {
        vars.iter().flatten().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Adds an owned input tensor.
    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, requires_grad)
    }

    /// Adds a borrowed tensor (usually a model parameter).
    pub fn borrowed(&mut self, t: &'p Tensor<T>, requires_grad: bool) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// `y = x · w + b` for `x: [B, in]`, `w: [in, out]`, `b: [out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.rank() != 2 || wv.rank() != 2 || xv.shape()[1] != wv.shape()[0] {
            return Err(mismatch(format!(
                "dense input {:?} against weight {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let (batch, n_in, n_out) = (xv.shape()[0], wv.shape()[0], wv.shape()[1]);
        let mut y = vec![T::zero(); batch * n_out];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [n_out] {
                return Err(mismatch(format!("dense bias {:?} for width {n_out}", bv.shape())));
            }
            for row in y.chunks_exact_mut(n_out) {
                row.copy_from_slice(bv.data());
            }
        }
        T::gemm(
            batch, n_in, n_out, T::one(), xv.data(), n_in, 1, wv.data(), n_out, 1, T::one(), &mut y,
            n_out, 1,
        );
        let out = Tensor::new(vec![batch, n_out], y)?;
        let rg = self.needs(&[Some(x), Some(w), b]);
        Ok(self.push(Cow::Owned(out), Op::Dense { x, w, b }, rg))
    }

    /// Cross-correlation of `x: [B, C, H, W]` with `w: [O, C, kh, kw]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<Var, TensorError> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.rank() != 4 || wv.rank() != 4 || xv.shape()[1] != wv.shape()[1] {
            return Err(mismatch(format!(
                "conv2d input {:?} against weight {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let xs = xv.shape();
        let ws = wv.shape();
        let geom = ConvGeometry::new([xs[1], xs[2], xs[3]], ws[0], (ws[2], ws[3]), stride, padding)?;
        let bias = self.bias_slice(b, geom.out_channels)?;
        let y = conv::conv2d_forward(&geom, xs[0], xv.data(), wv.data(), bias);
        let out = Tensor::new(vec![xs[0], geom.out_channels, geom.out_h, geom.out_w], y)?;
        let rg = self.needs(&[Some(x), Some(w), b]);
        Ok(self.push(Cow::Owned(out), Op::Conv2d { x, w, b, geom }, rg))
    }

    /// Transposed convolution producing exactly `target_chw`.
    ///
    /// `w: [C_in, C_out, kh, kw]`. The output is the adjoint of a
    /// same-padded convolution with the given stride applied to a
    /// `target_chw` input; the target is unreachable unless that convolution
    /// would produce `x`'s spatial shape.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize),
        target_chw: [usize; 3],
    ) -> Result<Var, TensorError> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.rank() != 4 || wv.rank() != 4 || xv.shape()[1] != wv.shape()[0] {
            return Err(mismatch(format!(
                "conv_transpose2d input {:?} against weight {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        if target_chw[0] != wv.shape()[1] {
            return Err(mismatch(format!(
                "target channels {} but weight produces {}",
                target_chw[0],
                wv.shape()[1]
            )));
        }
        let xs = xv.shape().to_vec();
        let ws = wv.shape();
        let geom = ConvGeometry::new(target_chw, ws[0], (ws[2], ws[3]), stride, Padding::Same)
            .map_err(|e| TensorError::UnreachableTargetShape(e.to_string()))?;
        if geom.out_h != xs[2] || geom.out_w != xs[3] {
            return Err(TensorError::UnreachableTargetShape(format!(
                "input {}x{} cannot be upsampled to {}x{} with stride {:?}",
                xs[2], xs[3], target_chw[1], target_chw[2], stride
            )));
        }
        let bias = self.bias_slice(b, target_chw[0])?;
        let y = conv::conv_transpose2d_forward(&geom, xs[0], xv.data(), wv.data(), bias);
        let out = Tensor::new(vec![xs[0], target_chw[0], target_chw[1], target_chw[2]], y)?;
        let rg = self.needs(&[Some(x), Some(w), b]);
        Ok(self.push(Cow::Owned(out), Op::ConvTranspose2d { x, w, b, geom }, rg))
    }

    fn bias_slice(&self, b: Option<Var>, width: usize) -> Result<Option<&[T]>, TensorError> {
        match b {
            None => Ok(None),
            Some(b) => {
                let bv = self.value(b);
                if bv.shape() != [width] {
                    return Err(mismatch(format!("bias {:?} for {width} channels", bv.shape())));
                }
                Ok(Some(bv.data()))
            }
        }
    }

    /// Per-channel batch normalization of `x: [B, C, ...]`.
    ///
    /// In training mode the batch statistics are returned so the caller can
    /// update its running averages.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>), TensorError> {
        let xv = self.value(x);
        if xv.rank() < 2 {
            return Err(mismatch(format!("batch_norm input {:?}", xv.shape())));
        }
        let batch = xv.shape()[0];
        let channels = xv.shape()[1];
        let plane: usize = xv.shape()[2..].iter().product();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.shape() != [channels] || bv.shape() != [channels] {
            return Err(mismatch(format!(
                "batch_norm gamma {:?} / beta {:?} for {channels} channels",
                gv.shape(),
                bv.shape()
            )));
        }
        let eps = T::from_f64_lossy(BN_EPS);
        let count = T::from_usize(batch * plane).expect("count fits");
        let data = xv.data();
        let at = |b: usize, c: usize| (b * channels + c) * plane;

        let (mean, var, stats) = match mode {
            BnMode::Train => {
                if batch < 2 {
                    return Err(TensorError::BatchTooSmall(batch));
                }
                let mut mean = vec![T::zero(); channels];
                let mut var = vec![T::zero(); channels];
                for c in 0..channels {
                    let mut s = T::zero();
                    for b in 0..batch {
                        s = s + data[at(b, c)..at(b, c) + plane].iter().copied().sum::<T>();
                    }
                    let m = s / count;
                    let mut sq = T::zero();
                    for b in 0..batch {
                        for &v in &data[at(b, c)..at(b, c) + plane] {
                            sq = sq + (v - m) * (v - m);
                        }
                    }
                    mean[c] = m;
                    var[c] = sq / count;
                }
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                };
                (mean, var, Some(stats))
            }
            BnMode::Infer {
                running_mean,
                running_var,
            } => {
                if running_mean.len() != channels || running_var.len() != channels {
                    return Err(mismatch(format!(
                        "running statistics of length {} for {channels} channels",
                        running_mean.len()
                    )));
                }
                (running_mean.to_vec(), running_var.to_vec(), None)
            }
        };

        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); data.len()];
        let mut y = vec![T::zero(); data.len()];
        for b in 0..batch {
            for c in 0..channels {
                let (g, sh) = (gv.data()[c], bv.data()[c]);
                let range = at(b, c)..at(b, c) + plane;
                for ((h, out), &v) in xhat[range.clone()]
                    .iter_mut()
                    .zip(&mut y[range.clone()])
                    .zip(&data[range])
                {
                    *h = (v - mean[c]) * inv_std[c];
                    *out = g * *h + sh;
                }
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), y)?;
        let rg = self.needs(&[Some(x), Some(gamma), Some(beta)]);
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats: stats.is_some(),
        };
        Ok((self.push(Cow::Owned(out), op, rg), stats))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let y = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect(),
        )
        .expect("same shape");
        let rg = self.needs(&[Some(x)]);
        self.push(Cow::Owned(y), Op::Relu { x }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let y = self.value(x).clone().reshape(shape)?;
        let rg = self.needs(&[Some(x)]);
        Ok(self.push(Cow::Owned(y), Op::Reshape { x }, rg))
    }

    /// Mean over all elements of the squared difference; a scalar node.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var, TensorError> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(mismatch(format!("mse {:?} vs {:?}", p.shape(), t.shape())));
        }
        if p.is_empty() {
            return Err(mismatch("mse of empty tensors".into()));
        }
        let sum: T = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        let n = T::from_usize(p.len()).expect("count fits");
        let rg = self.needs(&[Some(pred), Some(target)]);
        Ok(self.push(Cow::Owned(Tensor::scalar(sum / n)), Op::Mse { pred, target }, rg))
    }

    /// Back-propagates from a single-element node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(mismatch(format!("backward from non-scalar {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(lv.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            let mut contributions: Vec<(Var, Vec<T>)> = Vec::new();
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(dy);
                    continue;
                }
                Op::Dense { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (batch, n_in, n_out) = (xv.shape()[0], wv.shape()[0], wv.shape()[1]);
                    if self.nodes[x.0].requires_grad {
                        let mut dx = vec![T::zero(); batch * n_in];
                        T::gemm(
                            batch, n_out, n_in, T::one(), dy.data(), n_out, 1, wv.data(), 1, n_out,
                            T::zero(), &mut dx, n_in, 1,
                        );
                        contributions.push((*x, dx));
                    }
                    if self.nodes[w.0].requires_grad {
                        let mut dw = vec![T::zero(); n_in * n_out];
                        T::gemm(
                            n_in, batch, n_out, T::one(), xv.data(), 1, n_in, dy.data(), n_out, 1,
                            T::zero(), &mut dw, n_out, 1,
                        );
                        contributions.push((*w, dw));
                    }
                    if let Some(b) = b.filter(|b| self.nodes[b.0].requires_grad) {
                        let mut db = vec![T::zero(); n_out];
                        for row in dy.data().chunks_exact(n_out) {
                            for (acc, &g) in db.iter_mut().zip(row) {
                                *acc = *acc + g;
                            }
                        }
                        contributions.push((b, db));
                    }
                }
                Op::Conv2d { x, w, b, geom } => {
                    let batch = self.value(*x).shape()[0];
                    let (dx, dw, db) = conv::conv2d_backward(
                        geom,
                        batch,
                        self.value(*x).data(),
                        self.value(*w).data(),
                        dy.data(),
                    );
                    contributions.push((*x, dx));
                    contributions.push((*w, dw));
                    if let Some(b) = b {
                        contributions.push((*b, db));
                    }
                }
                Op::ConvTranspose2d { x, w, b, geom } => {
                    let batch = self.value(*x).shape()[0];
                    let (dx, dw, db) = conv::conv_transpose2d_backward(
                        geom,
                        batch,
                        self.value(*x).data(),
                        self.value(*w).data(),
                        dy.data(),
                    );
                    contributions.push((*x, dx));
                    contributions.push((*w, dw));
                    if let Some(b) = b {
                        contributions.push((*b, db));
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let shape = self.value(*x).shape();
                    let (batch, channels) = (shape[0], shape[1]);
                    let plane: usize = shape[2..].iter().product();
                    let count = T::from_usize(batch * plane).expect("count fits");
                    let gv = self.value(*gamma).data();
                    let g = dy.data();
                    let at = |b: usize, c: usize| (b * channels + c) * plane;
                    let mut dgamma = vec![T::zero(); channels];
                    let mut dbeta = vec![T::zero(); channels];
                    for b in 0..batch {
                        for c in 0..channels {
                            for k in at(b, c)..at(b, c) + plane {
                                dbeta[c] = dbeta[c] + g[k];
                                dgamma[c] = dgamma[c] + g[k] * xhat[k];
                            }
                        }
                    }
                    let mut dx = vec![T::zero(); g.len()];
                    for b in 0..batch {
                        for c in 0..channels {
                            let scale = gv[c] * inv_std[c];
                            for k in at(b, c)..at(b, c) + plane {
                                dx[k] = if *batch_stats {
                                    scale
                                        * (g[k]
                                            - dbeta[c] / count
                                            - xhat[k] * dgamma[c] / count)
                                } else {
                                    scale * g[k]
                                };
                            }
                        }
                    }
                    contributions.push((*x, dx));
                    contributions.push((*gamma, dgamma));
                    contributions.push((*beta, dbeta));
                }
                Op::Relu { x } => {
                    let xv = self.value(*x).data();
                    let dx = dy
                        .data()
                        .iter()
                        .zip(xv)
                        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                        .collect();
                    contributions.push((*x, dx));
                }
                Op::Reshape { x } => {
                    contributions.push((*x, dy.data().to_vec()));
                }
                Op::Mse { pred, target } => {
                    let (p, t) = (self.value(*pred), self.value(*target));
                    let scale = dy.data()[0] * T::from_f64_lossy(2.0)
                        / T::from_usize(p.len()).expect("count fits");
                    let dp: Vec<T> = p
                        .data()
                        .iter()
                        .zip(t.data())
                        .map(|(&a, &b)| (a - b) * scale)
                        .collect();
                    if self.nodes[target.0].requires_grad {
                        contributions.push((*target, dp.iter().map(|&v| -v).collect()));
                    }
                    contributions.push((*pred, dp));
                }
            }
            for (v, g) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                let shape = self.value(v).shape();
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, d) in acc.data_mut().iter_mut().zip(&g) {
                            *a = *a + *d;
                        }
                    }
                    slot @ None => *slot = Some(Tensor::new(shape.to_vec(), g)?),
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
    fn scalar_dense_chain_rule() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![1, 1], vec![2.0]).unwrap(), false);
        let w = tape.leaf(Tensor::new(vec![1, 1], vec![3.0]).unwrap(), true);
        let b = tape.leaf(Tensor::new(vec![1], vec![1.0]).unwrap(), true);
        let y = tape.dense(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[7.0]);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[2.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[1.0]);
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn identity_dense_passes_input_through() {
        let mut tape = Tape::<f32>::new();
        let data: Vec<f32> = (0..12).map(|i| i as f32 - 5.0).collect();
        let x = tape.leaf(Tensor::new(vec![4, 3], data.clone()).unwrap(), false);
        let w = tape.leaf(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }), false);
        let b = tape.leaf(Tensor::zeros(&[3]), false);
        let y = tape.dense(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
    }

    #[test]
    fn dense_rejects_width_mismatch() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[2, 3]), false);
        let w = tape.leaf(Tensor::zeros(&[4, 2]), false);
        assert!(matches!(tape.dense(x, w, None), Err(TensorError::ShapeMismatch(_))));
    }

    #[test]
    fn relu_values_and_mask() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap(), true);
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let t = tape.leaf(Tensor::zeros(&[3]), false);
        let l = tape.mse(y, t).unwrap();
        let g = tape.backward(l).unwrap();
        // d/dx of mean(relu(x)^2) = 2 relu(x) / 3 masked by x > 0; zero at 0
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 4.0 / 3.0]);
    }

    #[test]
    fn mse_examples() {
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap(), true);
        let t = tape.leaf(Tensor::new(vec![2], vec![2.0, 0.0]).unwrap(), false);
        let l = tape.mse(p, t).unwrap();
        assert_eq!(tape.value(l).data(), &[2.0]);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[-2.0, 0.0]);
        let same = tape.mse(t, t).unwrap();
        assert_eq!(tape.value(same).data(), &[0.0]);
        let bad = tape.leaf(Tensor::zeros(&[3]), false);
        assert!(tape.mse(p, bad).is_err());
    }

    #[test]
    fn batch_norm_constant_batch_yields_beta() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::filled(&[4, 2], 3.5), false);
        let g = tape.leaf(Tensor::filled(&[2], 1.7), false);
        let b = tape.leaf(Tensor::new(vec![2], vec![0.25, -0.5]).unwrap(), false);
        let (y, stats) = tape.batch_norm(x, g, b, BnMode::Train).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25, -0.5, 0.25, -0.5, 0.25, -0.5, 0.25, -0.5]);
        assert_eq!(stats.unwrap().var, vec![0.0, 0.0]);
    }

    #[test]
    fn batch_norm_standardized_batch_is_near_identity() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![4, 1], vec![-1.0, 1.0, -1.0, 1.0]).unwrap(), false);
        let g = tape.leaf(Tensor::filled(&[1], 1.0), false);
        let b = tape.leaf(Tensor::zeros(&[1]), false);
        let (y, _) = tape.batch_norm(x, g, b, BnMode::Train).unwrap();
        for (a, e) in tape.value(y).data().iter().zip([-1.0, 1.0, -1.0, 1.0]) {
            assert!((a - e).abs() < 1e-5);
        }
    }

    #[test]
    fn batch_norm_needs_two_rows_in_training() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[1, 3]), false);
        let g = tape.leaf(Tensor::filled(&[3], 1.0), false);
        let b = tape.leaf(Tensor::zeros(&[3]), false);
        assert!(matches!(
            tape.batch_norm(x, g, b, BnMode::Train),
            Err(TensorError::BatchTooSmall(1))
        ));
        let rm = [0.0f32; 3];
        let rv = [1.0f32; 3];
        let infer = BnMode::Infer {
            running_mean: &rm,
            running_var: &rv,
        };
        assert!(tape.batch_norm(x, g, b, infer).is_ok());
    }

    #[test]
    fn transposed_conv_rejects_unreachable_target() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[1, 2, 4, 4]), false);
        let w = tape.leaf(Tensor::zeros(&[2, 1, 3, 3]), false);
        assert!(tape.conv_transpose2d(x, w, None, (2, 2), [1, 8, 8]).is_ok());
        assert!(tape.conv_transpose2d(x, w, None, (2, 2), [1, 7, 8]).is_ok());
        assert!(matches!(
            tape.conv_transpose2d(x, w, None, (2, 2), [1, 10, 8]),
            Err(TensorError::UnreachableTargetShape(_))
        ));
    }
}
