//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Each operation appends a node holding its value and a backward closure
//! that scatters the node's gradient to its parents. The tape is its own
//! topological order, so the backward pass is a single reverse sweep that
//! visits every node exactly once. Gradients accumulate per node; leaves
//! keep theirs so callers can read parameter gradients after [`Tape::backward`].

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

type BackFn<S> = Box<dyn Fn(&[Tensor<S>], &Tensor<S>, &mut Grads<S>)>;

/// Per-node gradient accumulators produced by the backward pass.
pub struct Grads<S> {
    slots: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Grads<S> {
    fn new(n: usize) -> Self {
        Grads {
            slots: (0..n).map(|_| None).collect(),
        }
    }

    pub fn accumulate(&mut self, id: NodeId, contribution: Tensor<S>) {
        match &mut self.slots[id.0] {
            Some(g) => g.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    pub fn get(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.slots[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<S>> {
        self.slots[id.0].take()
    }
}

/// Batch statistics a train-mode batch-norm produced, for running-stat updates.
#[derive(Debug, Clone)]
pub struct BatchStats<S> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

pub struct Tape<S: Scalar> {
    values: Vec<Tensor<S>>,
    backs: Vec<Option<BackFn<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            backs: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.values[id.0]
    }

    fn push(&mut self, value: Tensor<S>, back: Option<BackFn<S>>) -> NodeId {
        self.values.push(value);
        self.backs.push(back);
        NodeId(self.values.len() - 1)
    }

    /// Insert a leaf. Leaves receive gradients but propagate nothing.
    pub fn leaf(&mut self, value: Tensor<S>) -> NodeId {
        self.push(value, None)
    }

    /// `y = x · wᵀ (+ b)` with `x: (n, in)`, `w: (out, in)`, `b: (1, out)`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let (n, d_in) = self.values[x.0].shape();
        let (d_out, w_in) = self.values[w.0].shape();
        assert_eq!(d_in, w_in, "linear: input width vs weight");
        if let Some(b) = b {
            assert_eq!(self.values[b.0].shape(), (1, d_out), "linear: bias shape");
        }
        let mut y = Tensor::zeros(n, d_out);
        {
            let xv = &self.values[x.0];
            let wv = &self.values[w.0];
            for r in 0..n {
                let xr = xv.row(r);
                let yr = y.row_mut(r);
                for o in 0..d_out {
                    let wr = wv.row(o);
                    let mut acc = S::ZERO;
                    for i in 0..d_in {
                        acc += xr[i] * wr[i];
                    }
                    yr[o] = acc;
                }
            }
            if let Some(b) = b {
                let bv = self.values[b.0].row(0).to_vec();
                for r in 0..n {
                    let yr = y.row_mut(r);
                    for o in 0..d_out {
                        yr[o] += bv[o];
                    }
                }
            }
        }
        let back: BackFn<S> = Box::new(move |values, dy, grads| {
            let xv = &values[x.0];
            let wv = &values[w.0];
            let mut dx = Tensor::zeros(n, d_in);
            let mut dw = Tensor::zeros(d_out, d_in);
            for r in 0..n {
                let dyr = dy.row(r);
                let xr = xv.row(r);
                let dxr = dx.row_mut(r);
                for o in 0..d_out {
                    let g = dyr[o];
                    if g == S::ZERO {
                        continue;
                    }
                    let wr = wv.row(o);
                    for i in 0..d_in {
                        dxr[i] += g * wr[i];
                    }
                    let dwr = dw.row_mut(o);
                    for i in 0..d_in {
                        dwr[i] += g * xr[i];
                    }
                }
            }
            if let Some(b) = b {
                let mut db = Tensor::zeros(1, d_out);
                for r in 0..n {
                    let dyr = dy.row(r);
                    let dbr = db.row_mut(0);
                    for o in 0..d_out {
                        dbr[o] += dyr[o];
                    }
                }
                grads.accumulate(b, db);
            }
            grads.accumulate(x, dx);
            grads.accumulate(w, dw);
        });
        self.push(y, Some(back))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(
            self.values[a.0].shape(),
            self.values[b.0].shape(),
            "add: shapes"
        );
        let mut y = self.values[a.0].clone();
        y.add_assign(&self.values[b.0]);
        let back: BackFn<S> = Box::new(move |_values, dy, grads| {
            grads.accumulate(a, dy.clone());
            grads.accumulate(b, dy.clone());
        });
        self.push(y, Some(back))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (rows, cols) = self.values[a.0].shape();
        assert_eq!((rows, cols), self.values[b.0].shape(), "mul: shapes");
        let mut y = Tensor::zeros(rows, cols);
        for ((yv, av), bv) in y
            .data_mut()
            .iter_mut()
            .zip(self.values[a.0].data())
            .zip(self.values[b.0].data())
        {
            *yv = *av * *bv;
        }
        let back: BackFn<S> = Box::new(move |values, dy, grads| {
            let av = &values[a.0];
            let bv = &values[b.0];
            let mut da = Tensor::zeros(rows, cols);
            let mut db = Tensor::zeros(rows, cols);
            for i in 0..rows * cols {
                da.data_mut()[i] = dy.data()[i] * bv.data()[i];
                db.data_mut()[i] = dy.data()[i] * av.data()[i];
            }
            grads.accumulate(a, da);
            grads.accumulate(b, db);
        });
        self.push(y, Some(back))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let s = S::from_f64(slope);
        let y = self.values[x.0].map(|v| if v > S::ZERO { v } else { s * v });
        let back: BackFn<S> = Box::new(move |values, dy, grads| {
            let xv = &values[x.0];
            let mut dx = dy.clone();
            for (g, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                if v <= S::ZERO {
                    *g = *g * s;
                }
            }
            grads.accumulate(x, dx);
        });
        self.push(y, Some(back))
    }

    /// Concatenate along the feature axis.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (n, ca) = self.values[a.0].shape();
        let (nb, cb) = self.values[b.0].shape();
        assert_eq!(n, nb, "concat_cols: row counts");
        let mut y = Tensor::zeros(n, ca + cb);
        for r in 0..n {
            y.row_mut(r)[..ca].copy_from_slice(self.values[a.0].row(r));
            y.row_mut(r)[ca..].copy_from_slice(self.values[b.0].row(r));
        }
        let back: BackFn<S> = Box::new(move |_values, dy, grads| {
            let mut da = Tensor::zeros(n, ca);
            let mut db = Tensor::zeros(n, cb);
            for r in 0..n {
                da.row_mut(r).copy_from_slice(&dy.row(r)[..ca]);
                db.row_mut(r).copy_from_slice(&dy.row(r)[ca..]);
            }
            grads.accumulate(a, da);
            grads.accumulate(b, db);
        });
        self.push(y, Some(back))
    }

    /// `y[r, :] = x[idx[r], :]`; rows may repeat.
    pub fn gather_rows(&mut self, x: NodeId, idx: &[u32]) -> NodeId {
        let (n_in, cols) = self.values[x.0].shape();
        let mut y = Tensor::zeros(idx.len(), cols);
        for (r, &i) in idx.iter().enumerate() {
            debug_assert!((i as usize) < n_in);
            y.row_mut(r).copy_from_slice(self.values[x.0].row(i as usize));
        }
        let idx: Vec<u32> = idx.to_vec();
        let back: BackFn<S> = Box::new(move |_values, dy, grads| {
            let mut dx = Tensor::zeros(n_in, cols);
            for (r, &i) in idx.iter().enumerate() {
                let dst = dx.row_mut(i as usize);
                let src = dy.row(r);
                for c in 0..cols {
                    dst[c] += src[c];
                }
            }
            grads.accumulate(x, dx);
        });
        self.push(y, Some(back))
    }

    /// Per-column softmax across each consecutive group of `group` rows.
    /// Input rows must be a multiple of `group`.
    pub fn softmax_groups(&mut self, x: NodeId, group: usize) -> NodeId {
        let (rows, cols) = self.values[x.0].shape();
        assert!(group >= 1 && rows % group == 0, "softmax_groups: grouping");
        let n_groups = rows / group;
        let mut y = Tensor::zeros(rows, cols);
        {
            let xv = &self.values[x.0];
            for t in 0..n_groups {
                let base = t * group;
                for c in 0..cols {
                    let mut m = xv.at(base, c);
                    for j in 1..group {
                        m = m.maximum(xv.at(base + j, c));
                    }
                    let mut denom = S::ZERO;
                    for j in 0..group {
                        let e = (xv.at(base + j, c) - m).exp();
                        *y.at_mut(base + j, c) = e;
                        denom += e;
                    }
                    for j in 0..group {
                        *y.at_mut(base + j, c) = y.at(base + j, c) / denom;
                    }
                }
            }
        }
        let s_cached = y.clone();
        let back: BackFn<S> = Box::new(move |_values, dy, grads| {
            let mut dx = Tensor::zeros(rows, cols);
            for t in 0..n_groups {
                let base = t * group;
                for c in 0..cols {
                    let mut dot = S::ZERO;
                    for j in 0..group {
                        dot += dy.at(base + j, c) * s_cached.at(base + j, c);
                    }
                    for j in 0..group {
                        let s = s_cached.at(base + j, c);
                        *dx.at_mut(base + j, c) = s * (dy.at(base + j, c) - dot);
                    }
                }
            }
            grads.accumulate(x, dx);
        });
        self.push(y, Some(back))
    }

    /// Sum each consecutive group of `group` rows: `(n*group, c) -> (n, c)`.
    pub fn sum_groups(&mut self, x: NodeId, group: usize) -> NodeId {
        let (rows, cols) = self.values[x.0].shape();
        assert!(group >= 1 && rows % group == 0, "sum_groups: grouping");
        let n_groups = rows / group;
        let mut y = Tensor::zeros(n_groups, cols);
        for t in 0..n_groups {
            for j in 0..group {
                let src = self.values[x.0].row(t * group + j);
                let dst = y.row_mut(t);
                for c in 0..cols {
                    dst[c] += src[c];
                }
            }
        }
        let back: BackFn<S> = Box::new(move |_values, dy, grads| {
            let mut dx = Tensor::zeros(rows, cols);
            for t in 0..n_groups {
                let src = dy.row(t);
                for j in 0..group {
                    dx.row_mut(t * group + j).copy_from_slice(src);
                }
            }
            grads.accumulate(x, dx);
        });
        self.push(y, Some(back))
    }

    /// Train-mode batch norm: normalize per column with the batch's own
    /// statistics (biased variance). Returns the batch statistics so the
    /// caller can fold them into running estimates.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> (NodeId, BatchStats<S>) {
        let (n, cols) = self.values[x.0].shape();
        assert!(n > 0, "batch_norm_train: empty batch");
        assert_eq!(self.values[gamma.0].shape(), (1, cols));
        assert_eq!(self.values[beta.0].shape(), (1, cols));
        let eps = S::from_f64(eps);
        let inv_n = S::ONE / S::from_f64(n as f64);

        let mut mean = vec![S::ZERO; cols];
        let mut var = vec![S::ZERO; cols];
        {
            let xv = &self.values[x.0];
            for r in 0..n {
                let row = xv.row(r);
                for c in 0..cols {
                    mean[c] += row[c];
                }
            }
            for m in mean.iter_mut() {
                *m = *m * inv_n;
            }
            for r in 0..n {
                let row = xv.row(r);
                for c in 0..cols {
                    let d = row[c] - mean[c];
                    var[c] += d * d;
                }
            }
            for v in var.iter_mut() {
                *v = *v * inv_n;
            }
        }
        let inv_std: Vec<S> = var.iter().map(|&v| S::ONE / (v + eps).sqrt()).collect();

        let mut x_hat = Tensor::zeros(n, cols);
        for r in 0..n {
            let src = self.values[x.0].row(r);
            let dst = x_hat.row_mut(r);
            for c in 0..cols {
                dst[c] = (src[c] - mean[c]) * inv_std[c];
            }
        }
        let mut y = Tensor::zeros(n, cols);
        {
            let g = self.values[gamma.0].row(0);
            let b = self.values[beta.0].row(0);
            for r in 0..n {
                let xh = x_hat.row(r);
                let dst = y.row_mut(r);
                for c in 0..cols {
                    dst[c] = g[c] * xh[c] + b[c];
                }
            }
        }

        let stats = BatchStats {
            mean: mean.clone(),
            var: var.clone(),
        };
        let x_hat_cached = x_hat;
        let inv_std_cached = inv_std;
        let back: BackFn<S> = Box::new(move |values, dy, grads| {
            let gv = values[gamma.0].row(0).to_vec();
            let mut dgamma = Tensor::zeros(1, cols);
            let mut dbeta = Tensor::zeros(1, cols);
            let mut sum_dy = vec![S::ZERO; cols];
            let mut sum_dy_xhat = vec![S::ZERO; cols];
            for r in 0..n {
                let dyr = dy.row(r);
                let xh = x_hat_cached.row(r);
                for c in 0..cols {
                    sum_dy[c] += dyr[c];
                    sum_dy_xhat[c] += dyr[c] * xh[c];
                }
            }
            for c in 0..cols {
                *dgamma.at_mut(0, c) = sum_dy_xhat[c];
                *dbeta.at_mut(0, c) = sum_dy[c];
            }
            let mut dx = Tensor::zeros(n, cols);
            let inv_n = S::ONE / S::from_f64(n as f64);
            for r in 0..n {
                let dyr = dy.row(r);
                let xh = x_hat_cached.row(r);
                let dst = dx.row_mut(r);
                for c in 0..cols {
                    dst[c] = gv[c]
                        * inv_std_cached[c]
                        * (dyr[c] - sum_dy[c] * inv_n - xh[c] * sum_dy_xhat[c] * inv_n);
                }
            }
            grads.accumulate(x, dx);
            grads.accumulate(gamma, dgamma);
            grads.accumulate(beta, dbeta);
        });
        let id = self.push(y, Some(back));
        (id, stats)
    }

    /// Eval-mode batch norm: normalize with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[S],
        running_var: &[S],
        eps: f64,
    ) -> NodeId {
        let (n, cols) = self.values[x.0].shape();
        assert_eq!(running_mean.len(), cols);
        assert_eq!(running_var.len(), cols);
        let eps = S::from_f64(eps);
        let inv_std: Vec<S> = running_var
            .iter()
            .map(|&v| S::ONE / (v + eps).sqrt())
            .collect();
        let mean: Vec<S> = running_mean.to_vec();
        let mut y = Tensor::zeros(n, cols);
        {
            let g = self.values[gamma.0].row(0);
            let b = self.values[beta.0].row(0);
            for r in 0..n {
                let src = self.values[x.0].row(r);
                let dst = y.row_mut(r);
                for c in 0..cols {
                    dst[c] = g[c] * (src[c] - mean[c]) * inv_std[c] + b[c];
                }
            }
        }
        let back: BackFn<S> = Box::new(move |values, dy, grads| {
            let gv = values[gamma.0].row(0).to_vec();
            let xv = &values[x.0];
            let mut dx = Tensor::zeros(n, cols);
            let mut dgamma = Tensor::zeros(1, cols);
            let mut dbeta = Tensor::zeros(1, cols);
            for r in 0..n {
                let dyr = dy.row(r);
                let xr = xv.row(r);
                let dst = dx.row_mut(r);
                for c in 0..cols {
                    let xhat = (xr[c] - mean[c]) * inv_std[c];
                    dst[c] = dyr[c] * gv[c] * inv_std[c];
                    *dgamma.at_mut(0, c) += dyr[c] * xhat;
                    *dbeta.at_mut(0, c) += dyr[c];
                }
            }
            grads.accumulate(x, dx);
            grads.accumulate(gamma, dgamma);
            grads.accumulate(beta, dbeta);
        });
        self.push(y, Some(back))
    }

    /// Inverted dropout with keep-scaling; the mask is drawn from `rng` at
    /// construction and reused by the backward pass.
    pub fn dropout(&mut self, x: NodeId, rate: f64, rng: &mut Rng) -> NodeId {
        assert!((0.0..1.0).contains(&rate), "dropout rate in [0,1)");
        let (rows, cols) = self.values[x.0].shape();
        if rate == 0.0 {
            // Nothing to drop; pass through without a mask.
            let y = self.values[x.0].clone();
            let back: BackFn<S> = Box::new(move |_v, dy, grads| {
                grads.accumulate(x, dy.clone());
            });
            return self.push(y, Some(back));
        }
        let scale = S::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<S> = (0..rows * cols)
            .map(|_| {
                if rng.uniform_f64() < rate {
                    S::ZERO
                } else {
                    scale
                }
            })
            .collect();
        let mut y = self.values[x.0].clone();
        for (v, m) in y.data_mut().iter_mut().zip(&mask) {
            *v = *v * *m;
        }
        let back: BackFn<S> = Box::new(move |_values, dy, grads| {
            let mut dx = dy.clone();
            for (g, m) in dx.data_mut().iter_mut().zip(&mask) {
                *g = *g * *m;
            }
            grads.accumulate(x, dx);
        });
        self.push(y, Some(back))
    }

    /// Sum of every element, as a `(1, 1)` scalar node.
    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let (rows, cols) = self.values[x.0].shape();
        let mut total = S::ZERO;
        for &v in self.values[x.0].data() {
            total += v;
        }
        let back: BackFn<S> = Box::new(move |_values, dy, grads| {
            let g = dy.at(0, 0);
            let mut dx = Tensor::zeros(rows, cols);
            for v in dx.data_mut() {
                *v = g;
            }
            grads.accumulate(x, dx);
        });
        self.push(Tensor::scalar(total), Some(back))
    }

    /// Mean weighted softmax cross-entropy over rows. Returns a `(1, 1)`
    /// scalar node. `weights[c]` scales rows whose true class is `c`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[u8],
        weights: &[S],
    ) -> Result<NodeId> {
        let (n, classes) = self.values[logits.0].shape();
        if labels.len() != n {
            return Err(Error::ShapeMismatch(alloc::format!(
                "{} labels for {n} logit rows",
                labels.len()
            )));
        }
        if weights.len() != classes {
            return Err(Error::ShapeMismatch(alloc::format!(
                "{} class weights for {classes} classes",
                weights.len()
            )));
        }
        for (i, &l) in labels.iter().enumerate() {
            if l as usize >= classes {
                return Err(Error::LabelOutOfRange {
                    index: i,
                    label: l as u32,
                    class_count: classes,
                });
            }
        }
        let inv_n = S::ONE / S::from_f64(n as f64);
        let mut probs = Tensor::zeros(n, classes);
        let mut loss = S::ZERO;
        {
            let z = &self.values[logits.0];
            for r in 0..n {
                let row = z.row(r);
                let mut m = row[0];
                for &v in &row[1..] {
                    m = m.maximum(v);
                }
                let mut denom = S::ZERO;
                for c in 0..classes {
                    let e = (row[c] - m).exp();
                    *probs.at_mut(r, c) = e;
                    denom += e;
                }
                let lse = denom.ln() + m;
                for c in 0..classes {
                    *probs.at_mut(r, c) = probs.at(r, c) / denom;
                }
                let y = labels[r] as usize;
                loss += weights[y] * (lse - row[y]);
            }
            loss = loss * inv_n;
        }
        let labels: Vec<u8> = labels.to_vec();
        let weights: Vec<S> = weights.to_vec();
        let back: BackFn<S> = Box::new(move |_values, dy, grads| {
            let g = dy.at(0, 0);
            let mut dz = Tensor::zeros(n, classes);
            for r in 0..n {
                let y = labels[r] as usize;
                let w = weights[y] * inv_n * g;
                let pr = probs.row(r);
                let dst = dz.row_mut(r);
                for c in 0..classes {
                    let indicator = if c == y { S::ONE } else { S::ZERO };
                    dst[c] = w * (pr[c] - indicator);
                }
            }
            grads.accumulate(logits, dz);
        });
        Ok(self.push(Tensor::scalar(loss), Some(back)))
    }

    /// Reverse sweep from a scalar node; returns every node's gradient.
    pub fn backward(&self, loss: NodeId) -> Grads<S> {
        assert_eq!(
            self.values[loss.0].shape(),
            (1, 1),
            "backward: loss must be scalar"
        );
        let mut grads = Grads::new(self.values.len());
        grads.accumulate(loss, Tensor::scalar(S::ONE));
        for id in (0..=loss.0).rev() {
            if self.backs[id].is_none() {
                continue;
            }
            if let Some(g) = grads.take(NodeId(id)) {
                (self.backs[id].as_ref().unwrap())(&self.values, &g, &mut grads);
            }
        }
        grads
    }
}

/// Finite-difference verification utilities.
pub mod check {
    use super::*;

    /// Max relative error between analytic and central-difference gradients
    /// of a scalar-valued tape program over a set of input tensors.
    ///
    /// `build` must construct its whole graph from the supplied leaves and
    /// return the scalar loss node. It is re-run for every perturbed input,
    /// so it has to be deterministic.
    pub fn max_grad_rel_error<F>(inputs: &[Tensor<f64>], h: f64, build: F) -> f64
    where
        F: Fn(&mut Tape<f64>, &[NodeId]) -> NodeId,
    {
        // Analytic gradients.
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &ids);
        let mut grads = tape.backward(loss);
        let analytic: Vec<Tensor<f64>> = ids
            .iter()
            .map(|&id| {
                grads
                    .take(id)
                    .unwrap_or_else(|| Tensor::zeros(tape.value(id).rows(), tape.value(id).cols()))
            })
            .collect();

        let eval = |perturbed: &[Tensor<f64>]| -> f64 {
            let mut tape = Tape::new();
            let ids: Vec<NodeId> = perturbed.iter().map(|t| tape.leaf(t.clone())).collect();
            let loss = build(&mut tape, &ids);
            tape.value(loss).at(0, 0)
        };

        let mut worst = 0.0f64;
        let mut work: Vec<Tensor<f64>> = inputs.to_vec();
        for (ti, input) in inputs.iter().enumerate() {
            for e in 0..input.len() {
                let orig = input.data()[e];
                work[ti].data_mut()[e] = orig + h;
                let fp = eval(&work);
                work[ti].data_mut()[e] = orig - h;
                let fm = eval(&work);
                work[ti].data_mut()[e] = orig;
                let fd = (fp - fm) / (2.0 * h);
                let an = analytic[ti].data()[e];
                let denom = an.abs().max(fd.abs()).max(1e-6);
                let rel = (an - fd).abs() / denom;
                if rel > worst {
                    worst = rel;
                }
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::check::max_grad_rel_error;
    use super::*;

    fn rand_tensor(rng: &mut Rng, rows: usize, cols: usize) -> Tensor<f64> {
        Tensor::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.range_f64(-1.5, 1.5)).collect(),
        )
    }

    #[test]
    fn linear_forward_matches_hand_computation() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let w = tape.leaf(Tensor::from_vec(2, 3, vec![1.0, 0.0, -1.0, 0.5, 0.5, 0.5]));
        let b = tape.leaf(Tensor::from_vec(1, 2, vec![10.0, -10.0]));
        let y = tape.linear(x, w, Some(b));
        assert_eq!(tape.value(y).row(0), &[1.0 - 3.0 + 10.0, 3.0 - 10.0]);
        assert_eq!(tape.value(y).row(1), &[4.0 - 6.0 + 10.0, 7.5 - 10.0]);
    }

    #[test]
    fn gradients_match_finite_differences_per_op() {
        let mut rng = Rng::new(99);
        // linear + bias + leaky relu chain
        let inputs = vec![
            rand_tensor(&mut rng, 4, 3),
            rand_tensor(&mut rng, 5, 3),
            rand_tensor(&mut rng, 1, 5),
        ];
        let err = max_grad_rel_error(&inputs, 1e-6, |tape, ids| {
            let y = tape.linear(ids[0], ids[1], Some(ids[2]));
            let a = tape.leaky_relu(y, 0.2);
            let sq = tape.mul(a, a);
            tape.sum_all(sq)
        });
        assert!(err < 1e-6, "linear chain rel err {err}");
    }

    #[test]
    fn softmax_groups_rows_sum_to_one_and_grads_check() {
        let mut rng = Rng::new(4);
        let x = rand_tensor(&mut rng, 6, 4);
        let mut tape = Tape::new();
        let id = tape.leaf(x.clone());
        let s = tape.softmax_groups(id, 3);
        for t in 0..2 {
            for c in 0..4 {
                let total: f64 = (0..3).map(|j| tape.value(s).at(t * 3 + j, c)).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
        let err = max_grad_rel_error(&[x], 1e-6, |tape, ids| {
            let s = tape.softmax_groups(ids[0], 3);
            let sq = tape.mul(s, s);
            tape.sum_all(sq)
        });
        assert!(err < 1e-6, "softmax rel err {err}");
    }

    #[test]
    fn batch_norm_train_grads_check() {
        // The loss mixes the normalized output with fixed coefficients;
        // a plain sum of squares is nearly invariant to the input because
        // of the normalization and leaves nothing to check.
        let mut rng = Rng::new(12);
        let inputs = vec![
            rand_tensor(&mut rng, 7, 3),
            rand_tensor(&mut rng, 1, 3),
            rand_tensor(&mut rng, 1, 3),
            rand_tensor(&mut rng, 7, 3),
        ];
        let err = max_grad_rel_error(&inputs, 1e-6, |tape, ids| {
            let (y, _) = tape.batch_norm_train(ids[0], ids[1], ids[2], 1e-5);
            let mixed = tape.mul(y, ids[3]);
            tape.sum_all(mixed)
        });
        assert!(err < 1e-5, "bn rel err {err}");
    }

    #[test]
    fn batch_norm_eval_grads_check() {
        let mut rng = Rng::new(13);
        let inputs = vec![
            rand_tensor(&mut rng, 5, 3),
            rand_tensor(&mut rng, 1, 3),
            rand_tensor(&mut rng, 1, 3),
            rand_tensor(&mut rng, 5, 3),
        ];
        let mean = [0.3, -0.2, 0.9];
        let var = [1.4, 0.6, 2.0];
        let err = max_grad_rel_error(&inputs, 1e-6, |tape, ids| {
            let y = tape.batch_norm_eval(ids[0], ids[1], ids[2], &mean, &var, 1e-5);
            let mixed = tape.mul(y, ids[3]);
            tape.sum_all(mixed)
        });
        assert!(err < 1e-6, "bn eval rel err {err}");
    }

    #[test]
    fn gather_and_concat_grads_check() {
        let mut rng = Rng::new(21);
        let inputs = vec![rand_tensor(&mut rng, 4, 2), rand_tensor(&mut rng, 6, 3)];
        let idx = vec![0u32, 0, 3, 2, 1, 3];
        let err = max_grad_rel_error(&inputs, 1e-6, |tape, ids| {
            let g = tape.gather_rows(ids[0], &idx);
            let cat = tape.concat_cols(g, ids[1]);
            let sq = tape.mul(cat, cat);
            tape.sum_all(sq)
        });
        assert!(err < 1e-6, "gather/concat rel err {err}");
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_k() {
        let mut tape: Tape<f64> = Tape::new();
        let logits = tape.leaf(Tensor::zeros(3, 5));
        let loss = tape
            .softmax_cross_entropy(logits, &[0, 2, 4], &[1.0; 5])
            .unwrap();
        let expected = libm::log(5.0);
        assert!((tape.value(loss).at(0, 0) - expected).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_grads_check() {
        let mut rng = Rng::new(31);
        let logits = rand_tensor(&mut rng, 6, 4);
        let labels = [0u8, 1, 3, 2, 2, 0];
        let weights = [1.0, 0.5, 2.0, 1.25];
        let err = max_grad_rel_error(&[logits], 1e-6, |tape, ids| {
            tape.softmax_cross_entropy(ids[0], &labels, &weights).unwrap()
        });
        assert!(err < 1e-6, "ce rel err {err}");
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let mut tape: Tape<f64> = Tape::new();
        let logits = tape.leaf(Tensor::zeros(1, 3));
        assert!(matches!(
            tape.softmax_cross_entropy(logits, &[3], &[1.0; 3]),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn dropout_scales_and_masks() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::from_vec(1, 8, vec![1.0; 8]));
        let mut rng = Rng::new(5);
        let y = tape.dropout(x, 0.5, &mut rng);
        for &v in tape.value(y).data() {
            assert!(v == 0.0 || (v - 2.0).abs() < 1e-12);
        }
    }
}
