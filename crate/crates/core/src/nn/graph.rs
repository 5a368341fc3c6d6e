//! Tape-based reverse-mode autodiff over flat row-major tensors.
//!
//! A [`Graph`] is rebuilt per step: leaves hold inputs and parameters, ops
//! append nodes, and [`Graph::backward`] walks the tape once in reverse
//! creation order (which is a topological order, since ops only reference
//! earlier nodes).
//!
//! Layout convention: `[N, C, L]` tensors are row-major with index
//! `(n * C + c) * L + l`. Parallel kernels only ever write disjoint output
//! rows and keep every reduction in a fixed order, so results are
//! bit-identical with and without the `parallel` feature.

use super::{NnError, Scalar};
use crate::spectral::{self, Cx, FftPlan};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type NodeId = usize;

/// Per-channel batch statistics produced by train-mode batch normalization,
/// for the caller's running-average update.
#[derive(Debug, Clone)]
pub struct BatchStats<S> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

pub enum Op<S> {
    Leaf,
    Add(NodeId, NodeId),
    Scale(NodeId, S),
    SubConst(NodeId, Vec<S>),
    Abs(NodeId),
    Mean(NodeId),
    Relu(NodeId),
    Reshape(NodeId),
    Dense {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Conv1d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<S>,
        inv_std: Vec<S>,
        train: bool,
    },
    Dropout {
        x: NodeId,
        mult: Vec<S>,
    },
    MaxPool2 {
        x: NodeId,
        argmax: Vec<u8>,
    },
    Upsample2(NodeId),
    RfftMag {
        x: NodeId,
        bins: Vec<Cx<S>>,
    },
    StftMag {
        x: NodeId,
        /// Saved frame spectra, layout `(n, c, frame, bin)`.
        bins: Vec<Cx<S>>,
    },
    BandSelect {
        x: NodeId,
        lo: usize,
        hi: usize,
    },
    ScalePerWindow {
        x: NodeId,
        mult: Vec<S>,
    },
}

struct Node<S> {
    shape: Vec<usize>,
    values: Vec<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Gradients per node id, populated by [`Graph::backward`].
pub struct Grads<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Grads<S> {
    pub fn get(&self, id: NodeId) -> Option<&[S]> {
        self.grads[id].as_deref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Vec<S>> {
        self.grads[id].take()
    }
}

pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn values(&self, id: NodeId) -> &[S] {
        &self.nodes[id].values
    }

    pub fn scalar_value(&self, id: NodeId) -> S {
        debug_assert_eq!(self.nodes[id].values.len(), 1);
        self.nodes[id].values[0]
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<S>, op: Op<S>, needs_grad: bool) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.nodes.push(Node {
            shape,
            values,
            op,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    /// Input or parameter node. Only `requires_grad` leaves receive
    /// gradients.
    pub fn leaf(&mut self, shape: Vec<usize>, values: Vec<S>, requires_grad: bool) -> NodeId {
        self.push(shape, values, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<S>) -> NodeId {
        self.leaf(shape, values, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(NnError::ShapeMismatch(format!(
                "add: {:?} vs {:?}",
                self.nodes[a].shape, self.nodes[b].shape
            )));
        }
        let values: Vec<S> = self.nodes[a]
            .values
            .iter()
            .zip(&self.nodes[b].values)
            .map(|(&x, &y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(self.nodes[a].shape.clone(), values, Op::Add(a, b), needs))
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        let k = S::from_f64(k);
        let values: Vec<S> = self.nodes[x].values.iter().map(|&v| v * k).collect();
        let needs = self.needs(x);
        self.push(self.nodes[x].shape.clone(), values, Op::Scale(x, k), needs)
    }

    pub fn sub_const(&mut self, x: NodeId, c: &[S]) -> Result<NodeId, NnError> {
        if self.nodes[x].values.len() != c.len() {
            return Err(NnError::ShapeMismatch(format!(
                "sub_const: node holds {} values, constant holds {}",
                self.nodes[x].values.len(),
                c.len()
            )));
        }
        let values: Vec<S> = self.nodes[x]
            .values
            .iter()
            .zip(c)
            .map(|(&a, &b)| a - b)
            .collect();
        let needs = self.needs(x);
        Ok(self.push(
            self.nodes[x].shape.clone(),
            values,
            Op::SubConst(x, c.to_vec()),
            needs,
        ))
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let values: Vec<S> = self.nodes[x].values.iter().map(|v| v.abs()).collect();
        let needs = self.needs(x);
        self.push(self.nodes[x].shape.clone(), values, Op::Abs(x), needs)
    }

    /// Mean over every element, yielding a scalar. Accumulates in f64.
    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x].values.len();
        let sum: f64 = self.nodes[x].values.iter().map(|v| v.into_f64()).sum();
        let needs = self.needs(x);
        self.push(
            Vec::new(),
            vec![S::from_f64(sum / n as f64)],
            Op::Mean(x),
            needs,
        )
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let values: Vec<S> = self.nodes[x]
            .values
            .iter()
            .map(|&v| v.max(S::zero()))
            .collect();
        let needs = self.needs(x);
        self.push(self.nodes[x].shape.clone(), values, Op::Relu(x), needs)
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId, NnError> {
        let count: usize = shape.iter().product();
        if count != self.nodes[x].values.len() {
            return Err(NnError::ShapeMismatch(format!(
                "reshape: {:?} holds {} values, target {shape:?} needs {count}",
                self.nodes[x].shape,
                self.nodes[x].values.len()
            )));
        }
        let values = self.nodes[x].values.clone();
        let needs = self.needs(x);
        Ok(self.push(shape, values, Op::Reshape(x), needs))
    }

    /// Affine map: `x [N, Din] * w [Dout, Din]^T + b [Dout] -> [N, Dout]`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (xs, ws, bs) = (
            self.nodes[x].shape.clone(),
            self.nodes[w].shape.clone(),
            self.nodes[b].shape.clone(),
        );
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[1] || ws[0] != bs[0] {
            return Err(NnError::ShapeMismatch(format!(
                "dense: x {xs:?}, w {ws:?}, b {bs:?}"
            )));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let xv = &self.nodes[x].values;
        let wv = &self.nodes[w].values;
        let bv = &self.nodes[b].values;
        let mut out = vec![S::zero(); n * dout];
        for_each_chunk_mut(&mut out, dout, |row_n, out_row| {
            let x_row = &xv[row_n * din..(row_n + 1) * din];
            for (o, out_v) in out_row.iter_mut().enumerate() {
                let w_row = &wv[o * din..(o + 1) * din];
                let mut acc = bv[o];
                for (wi, xi) in w_row.iter().zip(x_row) {
                    acc += *wi * *xi;
                }
                *out_v = acc;
            }
        });
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(vec![n, dout], out, Op::Dense { x, w, b }, needs))
    }

    /// Same-padded stride-1 cross-correlation:
    /// `x [N, Cin, L] * w [Cout, Cin, K] + b [Cout] -> [N, Cout, L]`,
    /// odd `K`, zero padding of `(K - 1) / 2` on each side.
    pub fn conv1d_same(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (xs, ws, bs) = (
            self.nodes[x].shape.clone(),
            self.nodes[w].shape.clone(),
            self.nodes[b].shape.clone(),
        );
        if xs.len() != 3 || ws.len() != 3 || bs.len() != 1 || xs[1] != ws[1] || ws[0] != bs[0] {
            return Err(NnError::ShapeMismatch(format!(
                "conv1d: x {xs:?}, w {ws:?}, b {bs:?}"
            )));
        }
        let (n, cin, l) = (xs[0], xs[1], xs[2]);
        let (cout, k) = (ws[0], ws[2]);
        if k % 2 == 0 {
            return Err(NnError::ShapeMismatch(format!(
                "conv1d: kernel size {k} must be odd for same padding"
            )));
        }
        let pad = (k - 1) / 2;
        let xv = &self.nodes[x].values;
        let wv = &self.nodes[w].values;
        let bv = &self.nodes[b].values;
        let mut out = vec![S::zero(); n * cout * l];
        for_each_chunk_mut(&mut out, l, |row, out_row| {
            let (ni, co) = (row / cout, row % cout);
            out_row.fill(bv[co]);
            for ci in 0..cin {
                let x_row = &xv[(ni * cin + ci) * l..(ni * cin + ci + 1) * l];
                for dk in 0..k {
                    let wv_k = wv[(co * cin + ci) * k + dk];
                    axpy_shifted(out_row, x_row, wv_k, dk as isize - pad as isize);
                }
            }
        });
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(vec![n, cout, l], out, Op::Conv1d { x, w, b }, needs))
    }

    /// Train-mode batch normalization over `[N, C, L]`, statistics per
    /// channel across N x L. Returns the batch statistics so the caller can
    /// update its running buffers.
    pub fn batchnorm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, BatchStats<S>), NnError> {
        let xs = self.nodes[x].shape.clone();
        let c = check_bn_shapes(&xs, &self.nodes[gamma].shape, &self.nodes[beta].shape)?;
        let (n, l) = (xs[0], xs[2]);
        let m = n * l;
        if m < 2 {
            return Err(NnError::DegenerateBatch);
        }
        let xv = &self.nodes[x].values;
        let mut mean = vec![S::zero(); c];
        let mut var = vec![S::zero(); c];
        for ci in 0..c {
            let mut sum = 0.0f64;
            let mut sq = 0.0f64;
            for ni in 0..n {
                for &v in &xv[(ni * c + ci) * l..(ni * c + ci + 1) * l] {
                    let v = v.into_f64();
                    sum += v;
                    sq += v * v;
                }
            }
            let mu = sum / m as f64;
            mean[ci] = S::from_f64(mu);
            var[ci] = S::from_f64((sq / m as f64 - mu * mu).max(0.0));
        }
        let id = self.batchnorm_apply(x, gamma, beta, &mean, &var, eps, true)?;
        Ok((id, BatchStats { mean, var }))
    }

    /// Eval-mode batch normalization using running statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[S],
        running_var: &[S],
        eps: f64,
    ) -> Result<NodeId, NnError> {
        let xs = self.nodes[x].shape.clone();
        check_bn_shapes(&xs, &self.nodes[gamma].shape, &self.nodes[beta].shape)?;
        self.batchnorm_apply(x, gamma, beta, running_mean, running_var, eps, false)
    }

    fn batchnorm_apply(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[S],
        var: &[S],
        eps: f64,
        train: bool,
    ) -> Result<NodeId, NnError> {
        let xs = self.nodes[x].shape.clone();
        let (n, c, l) = (xs[0], xs[1], xs[2]);
        let xv = &self.nodes[x].values;
        let gv = &self.nodes[gamma].values;
        let bv = &self.nodes[beta].values;
        let inv_std: Vec<S> = var
            .iter()
            .map(|&v| S::one() / (v + S::from_f64(eps)).sqrt())
            .collect();
        let mut xhat = vec![S::zero(); xv.len()];
        let mut out = vec![S::zero(); xv.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * l;
                for t in 0..l {
                    let h = (xv[base + t] - mean[ci]) * inv_std[ci];
                    xhat[base + t] = h;
                    out[base + t] = gv[ci] * h + bv[ci];
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            xs,
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            needs,
        ))
    }

    /// Inverted dropout: zero with probability `rate`, scale survivors by
    /// `1 / (1 - rate)`. Identity when `rate == 0`; eval callers simply skip
    /// the op.
    pub fn dropout(&mut self, x: NodeId, rate: f64, rng: &mut ChaCha8Rng) -> NodeId {
        assert!((0.0..1.0).contains(&rate), "dropout rate {rate} outside [0, 1)");
        if rate == 0.0 {
            return x;
        }
        let keep_scale = S::from_f64(1.0 / (1.0 - rate));
        let mult: Vec<S> = self.nodes[x]
            .values
            .iter()
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    S::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        let values: Vec<S> = self.nodes[x]
            .values
            .iter()
            .zip(&mult)
            .map(|(&v, &m)| v * m)
            .collect();
        let needs = self.needs(x);
        self.push(self.nodes[x].shape.clone(), values, Op::Dropout { x, mult }, needs)
    }

    /// Max pooling with size 2, stride 2 over the last axis of `[N, C, L]`.
    /// Ties route the gradient to the first element of the pair.
    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        let xs = self.nodes[x].shape.clone();
        let l = *xs.last().expect("maxpool needs at least rank 1");
        if l % 2 != 0 {
            return Err(NnError::OddLength(l));
        }
        let xv = &self.nodes[x].values;
        let mut values = Vec::with_capacity(xv.len() / 2);
        let mut argmax = Vec::with_capacity(xv.len() / 2);
        for pair in xv.chunks_exact(2) {
            if pair[1] > pair[0] {
                values.push(pair[1]);
                argmax.push(1u8);
            } else {
                values.push(pair[0]);
                argmax.push(0u8);
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = l / 2;
        let needs = self.needs(x);
        Ok(self.push(shape, values, Op::MaxPool2 { x, argmax }, needs))
    }

    /// Nearest-neighbor upsampling by 2 along the last axis.
    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        let mut shape = self.nodes[x].shape.clone();
        let l = *shape.last().expect("upsample needs at least rank 1");
        *shape.last_mut().unwrap() = l * 2;
        let mut values = Vec::with_capacity(self.nodes[x].values.len() * 2);
        for &v in &self.nodes[x].values {
            values.push(v);
            values.push(v);
        }
        let needs = self.needs(x);
        self.push(shape, values, Op::Upsample2(x), needs)
    }

    /// One-sided DFT magnitudes per channel: `[N, C, T] -> [N, C, T/2 + 1]`.
    pub fn rfft_mag(&mut self, x: NodeId) -> NodeId {
        let xs = self.nodes[x].shape.clone();
        let (n, c, t) = (xs[0], xs[1], xs[2]);
        let bins = spectral::rfft_bins(t);
        let plan = FftPlan::new(t);
        let xv = &self.nodes[x].values;
        let mut all_bins = Vec::with_capacity(n * c * bins);
        let mut values = Vec::with_capacity(n * c * bins);
        for row in 0..n * c {
            let spectrum = plan.rfft(&xv[row * t..(row + 1) * t]);
            values.extend(spectrum.iter().map(|b| b.magnitude()));
            all_bins.extend(spectrum);
        }
        let needs = self.needs(x);
        self.push(vec![n, c, bins], values, Op::RfftMag { x, bins: all_bins }, needs)
    }

    /// Hann-windowed STFT magnitudes: `[N, C, T] -> [N, C, bins, frames]`.
    pub fn stft_mag(&mut self, x: NodeId) -> NodeId {
        let xs = self.nodes[x].shape.clone();
        let (n, c, t) = (xs[0], xs[1], xs[2]);
        let frames = spectral::stft_frames(t);
        let bins = spectral::rfft_bins(spectral::STFT_WINDOW);
        let plan = FftPlan::new(spectral::STFT_WINDOW);
        let hann = spectral::hann_window::<S>(spectral::STFT_WINDOW);
        let xv = &self.nodes[x].values;
        let mut all_bins = vec![Cx::zero(); n * c * frames * bins];
        let mut values = vec![S::zero(); n * c * bins * frames];
        let mut frame_buf = vec![S::zero(); spectral::STFT_WINDOW];
        for row in 0..n * c {
            let x_row = &xv[row * t..(row + 1) * t];
            for m in 0..frames {
                let start = m * spectral::STFT_HOP;
                for (i, f) in frame_buf.iter_mut().enumerate() {
                    *f = x_row[start + i] * hann[i];
                }
                let spectrum = plan.rfft(&frame_buf);
                for (k, bin) in spectrum.iter().enumerate() {
                    values[(row * bins + k) * frames + m] = bin.magnitude();
                    all_bins[(row * frames + m) * bins + k] = *bin;
                }
            }
        }
        let needs = self.needs(x);
        self.push(
            vec![n, c, bins, frames],
            values,
            Op::StftMag { x, bins: all_bins },
            needs,
        )
    }

    /// Extract inclusive bins `lo..=hi` along the last axis of `[N, C, B]`.
    pub fn band_select(&mut self, x: NodeId, lo: usize, hi: usize) -> Result<NodeId, NnError> {
        let xs = self.nodes[x].shape.clone();
        let b = *xs.last().expect("band_select needs at least rank 1");
        if lo > hi || hi >= b {
            return Err(NnError::ShapeMismatch(format!(
                "band mask [{lo}, {hi}] out of range for {b} bins"
            )));
        }
        let width = hi - lo + 1;
        let rows = self.nodes[x].values.len() / b;
        let xv = &self.nodes[x].values;
        let mut values = Vec::with_capacity(rows * width);
        for row in 0..rows {
            values.extend_from_slice(&xv[row * b + lo..row * b + hi + 1]);
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = width;
        let needs = self.needs(x);
        Ok(self.push(shape, values, Op::BandSelect { x, lo, hi }, needs))
    }

    /// Multiply window `i` (leading axis) by `mult[i]`; used to divide a
    /// batch by per-window normalization scalars.
    pub fn scale_per_window(&mut self, x: NodeId, mult: &[S]) -> Result<NodeId, NnError> {
        let xs = self.nodes[x].shape.clone();
        let n = xs.first().copied().unwrap_or(1);
        if n != mult.len() {
            return Err(NnError::ShapeMismatch(format!(
                "scale_per_window: {n} windows vs {} scalars",
                mult.len()
            )));
        }
        let stride = self.nodes[x].values.len() / n;
        let values: Vec<S> = self.nodes[x]
            .values
            .iter()
            .enumerate()
            .map(|(i, &v)| v * mult[i / stride])
            .collect();
        let needs = self.needs(x);
        Ok(self.push(
            xs,
            values,
            Op::ScalePerWindow {
                x,
                mult: mult.to_vec(),
            },
            needs,
        ))
    }

    /// Reverse pass from `loss` (a scalar node). Visits each node exactly
    /// once in reverse creation order and accumulates gradients additively.
    pub fn backward(&self, loss: NodeId) -> Grads<S> {
        assert_eq!(
            self.nodes[loss].values.len(),
            1,
            "backward starts from a scalar node"
        );
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(vec![S::one()]);

        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Grads { grads }
    }

    fn backward_node(&self, id: NodeId, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &input in [a, b].iter() {
                    if self.needs(*input) {
                        let buf = grad_buf(grads, *input, self.nodes[*input].values.len());
                        for (o, &gi) in buf.iter_mut().zip(g) {
                            *o += gi;
                        }
                    }
                }
            }
            Op::Scale(x, k) => {
                if self.needs(*x) {
                    let buf = grad_buf(grads, *x, self.nodes[*x].values.len());
                    for (o, &gi) in buf.iter_mut().zip(g) {
                        *o += gi * *k;
                    }
                }
            }
            Op::SubConst(x, _) | Op::Reshape(x) => {
                if self.needs(*x) {
                    let buf = grad_buf(grads, *x, self.nodes[*x].values.len());
                    for (o, &gi) in buf.iter_mut().zip(g) {
                        *o += gi;
                    }
                }
            }
            Op::Abs(x) => {
                if self.needs(*x) {
                    let xv = &self.nodes[*x].values;
                    let buf = grad_buf(grads, *x, xv.len());
                    for ((o, &gi), &v) in buf.iter_mut().zip(g).zip(xv) {
                        // subgradient 0 at v == 0
                        if v > S::zero() {
                            *o += gi;
                        } else if v < S::zero() {
                            *o -= gi;
                        }
                    }
                }
            }
            Op::Mean(x) => {
                if self.needs(*x) {
                    let n = self.nodes[*x].values.len();
                    let share = g[0] / S::from_f64(n as f64);
                    let buf = grad_buf(grads, *x, n);
                    for o in buf.iter_mut() {
                        *o += share;
                    }
                }
            }
            Op::Relu(x) => {
                if self.needs(*x) {
                    let xv = &self.nodes[*x].values;
                    let buf = grad_buf(grads, *x, xv.len());
                    for ((o, &gi), &v) in buf.iter_mut().zip(g).zip(xv) {
                        if v > S::zero() {
                            *o += gi;
                        }
                    }
                }
            }
            Op::Dense { x, w, b } => self.backward_dense(*x, *w, *b, id, g, grads),
            Op::Conv1d { x, w, b } => self.backward_conv(*x, *w, *b, id, g, grads),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => self.backward_batchnorm(*x, *gamma, *beta, xhat, inv_std, *train, g, grads),
            Op::Dropout { x, mult } => {
                if self.needs(*x) {
                    let buf = grad_buf(grads, *x, mult.len());
                    for ((o, &gi), &m) in buf.iter_mut().zip(g).zip(mult) {
                        *o += gi * m;
                    }
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if self.needs(*x) {
                    let buf = grad_buf(grads, *x, self.nodes[*x].values.len());
                    for (i, (&gi, &arg)) in g.iter().zip(argmax).enumerate() {
                        buf[2 * i + arg as usize] += gi;
                    }
                }
            }
            Op::Upsample2(x) => {
                if self.needs(*x) {
                    let buf = grad_buf(grads, *x, self.nodes[*x].values.len());
                    for (i, o) in buf.iter_mut().enumerate() {
                        *o += g[2 * i] + g[2 * i + 1];
                    }
                }
            }
            Op::RfftMag { x, bins } => {
                if self.needs(*x) {
                    let t = *self.nodes[*x].shape.last().unwrap();
                    let nbins = spectral::rfft_bins(t);
                    let rows = self.nodes[*x].values.len() / t;
                    let plan = FftPlan::new(t);
                    let buf = grad_buf(grads, *x, self.nodes[*x].values.len());
                    for row in 0..rows {
                        let drow = plan.rfft_magnitude_vjp(
                            &bins[row * nbins..(row + 1) * nbins],
                            &g[row * nbins..(row + 1) * nbins],
                        );
                        for (o, d) in buf[row * t..(row + 1) * t].iter_mut().zip(drow) {
                            *o += d;
                        }
                    }
                }
            }
            Op::StftMag { x, bins } => {
                if self.needs(*x) {
                    let t = *self.nodes[*x].shape.last().unwrap();
                    let frames = spectral::stft_frames(t);
                    let nbins = spectral::rfft_bins(spectral::STFT_WINDOW);
                    let rows = self.nodes[*x].values.len() / t;
                    let plan = FftPlan::new(spectral::STFT_WINDOW);
                    let hann = spectral::hann_window::<S>(spectral::STFT_WINDOW);
                    let buf = grad_buf(grads, *x, self.nodes[*x].values.len());
                    let mut g_frame = vec![S::zero(); nbins];
                    for row in 0..rows {
                        for m in 0..frames {
                            for (k, gf) in g_frame.iter_mut().enumerate() {
                                *gf = g[(row * nbins + k) * frames + m];
                            }
                            let start = m * spectral::STFT_HOP;
                            let dframe = plan.rfft_magnitude_vjp(
                                &bins[(row * frames + m) * nbins..(row * frames + m + 1) * nbins],
                                &g_frame,
                            );
                            let out = &mut buf[row * t + start..row * t + start + spectral::STFT_WINDOW];
                            for ((o, d), &h) in out.iter_mut().zip(dframe).zip(&hann) {
                                *o += d * h;
                            }
                        }
                    }
                }
            }
            Op::BandSelect { x, lo, hi } => {
                if self.needs(*x) {
                    let b = *self.nodes[*x].shape.last().unwrap();
                    let width = hi - lo + 1;
                    let rows = self.nodes[*x].values.len() / b;
                    let buf = grad_buf(grads, *x, self.nodes[*x].values.len());
                    for row in 0..rows {
                        for k in 0..width {
                            buf[row * b + lo + k] += g[row * width + k];
                        }
                    }
                }
            }
            Op::ScalePerWindow { x, mult } => {
                if self.needs(*x) {
                    let stride = self.nodes[*x].values.len() / mult.len();
                    let buf = grad_buf(grads, *x, self.nodes[*x].values.len());
                    for (i, (o, &gi)) in buf.iter_mut().zip(g).enumerate() {
                        *o += gi * mult[i / stride];
                    }
                }
            }
        }
    }

    fn backward_dense(
        &self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        _out: NodeId,
        g: &[S],
        grads: &mut [Option<Vec<S>>],
    ) {
        let (n, din) = (self.nodes[x].shape[0], self.nodes[x].shape[1]);
        let dout = self.nodes[w].shape[0];
        let xv = &self.nodes[x].values;
        let wv = &self.nodes[w].values;
        if self.needs(x) {
            let buf = grad_buf(grads, x, xv.len());
            for_each_chunk_mut(buf, din, |ni, dx_row| {
                let g_row = &g[ni * dout..(ni + 1) * dout];
                for (o, &go) in g_row.iter().enumerate() {
                    let w_row = &wv[o * din..(o + 1) * din];
                    for (dx, &wi) in dx_row.iter_mut().zip(w_row) {
                        *dx += go * wi;
                    }
                }
            });
        }
        if self.needs(w) {
            let buf = grad_buf(grads, w, wv.len());
            for_each_chunk_mut(buf, din, |o, dw_row| {
                for ni in 0..n {
                    let go = g[ni * dout + o];
                    let x_row = &xv[ni * din..(ni + 1) * din];
                    for (dw, &xi) in dw_row.iter_mut().zip(x_row) {
                        *dw += go * xi;
                    }
                }
            });
        }
        if self.needs(b) {
            let buf = grad_buf(grads, b, dout);
            for (o, db) in buf.iter_mut().enumerate() {
                let mut acc = S::zero();
                for ni in 0..n {
                    acc += g[ni * dout + o];
                }
                *db += acc;
            }
        }
    }

    fn backward_conv(
        &self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        _out: NodeId,
        g: &[S],
        grads: &mut [Option<Vec<S>>],
    ) {
        let (n, cin, l) = (
            self.nodes[x].shape[0],
            self.nodes[x].shape[1],
            self.nodes[x].shape[2],
        );
        let (cout, k) = (self.nodes[w].shape[0], self.nodes[w].shape[2]);
        let pad = (k - 1) / 2;
        let xv = &self.nodes[x].values;
        let wv = &self.nodes[w].values;

        if self.needs(x) {
            let buf = grad_buf(grads, x, xv.len());
            for_each_chunk_mut(buf, l, |row, dx_row| {
                let (ni, ci) = (row / cin, row % cin);
                for co in 0..cout {
                    let g_row = &g[(ni * cout + co) * l..(ni * cout + co + 1) * l];
                    for dk in 0..k {
                        let wv_k = wv[(co * cin + ci) * k + dk];
                        // forward read x[t + shift]; adjoint scatters into
                        // dx[t + shift], i.e. an axpy with the same shift
                        // applied to the destination.
                        axpy_shifted_dst(dx_row, g_row, wv_k, dk as isize - pad as isize);
                    }
                }
            });
        }
        if self.needs(w) {
            let buf = grad_buf(grads, w, wv.len());
            for_each_chunk_mut(buf, cin * k, |co, dw_block| {
                for ci in 0..cin {
                    for dk in 0..k {
                        let shift = dk as isize - pad as isize;
                        let mut acc = S::zero();
                        for ni in 0..n {
                            let g_row = &g[(ni * cout + co) * l..(ni * cout + co + 1) * l];
                            let x_row = &xv[(ni * cin + ci) * l..(ni * cin + ci + 1) * l];
                            let (t0, t1) = shifted_range(l, shift);
                            let src = &x_row[(t0 as isize + shift) as usize
                                ..(t1 as isize + shift) as usize];
                            for (&gt, &xt) in g_row[t0..t1].iter().zip(src) {
                                acc += gt * xt;
                            }
                        }
                        dw_block[ci * k + dk] += acc;
                    }
                }
            });
        }
        if self.needs(b) {
            let buf = grad_buf(grads, b, cout);
            for (co, db) in buf.iter_mut().enumerate() {
                let mut acc = S::zero();
                for ni in 0..n {
                    for &gt in &g[(ni * cout + co) * l..(ni * cout + co + 1) * l] {
                        acc += gt;
                    }
                }
                *db += acc;
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_batchnorm(
        &self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: &[S],
        inv_std: &[S],
        train: bool,
        g: &[S],
        grads: &mut [Option<Vec<S>>],
    ) {
        let (n, c, l) = (
            self.nodes[x].shape[0],
            self.nodes[x].shape[1],
            self.nodes[x].shape[2],
        );
        let m = (n * l) as f64;
        let gv = &self.nodes[gamma].values;

        // Per-channel reductions, fixed order.
        let mut sum_g = vec![S::zero(); c];
        let mut sum_g_xhat = vec![S::zero(); c];
        for ci in 0..c {
            let mut a = 0.0f64;
            let mut bsum = 0.0f64;
            for ni in 0..n {
                let base = (ni * c + ci) * l;
                for t in 0..l {
                    let gi = g[base + t].into_f64();
                    a += gi;
                    bsum += gi * xhat[base + t].into_f64();
                }
            }
            sum_g[ci] = S::from_f64(a);
            sum_g_xhat[ci] = S::from_f64(bsum);
        }

        if self.needs(gamma) {
            let buf = grad_buf(grads, gamma, c);
            for (o, &v) in buf.iter_mut().zip(&sum_g_xhat) {
                *o += v;
            }
        }
        if self.needs(beta) {
            let buf = grad_buf(grads, beta, c);
            for (o, &v) in buf.iter_mut().zip(&sum_g) {
                *o += v;
            }
        }
        if self.needs(x) {
            let buf = grad_buf(grads, x, self.nodes[x].values.len());
            let m_s = S::from_f64(m);
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * l;
                    let scale = gv[ci] * inv_std[ci];
                    if train {
                        let inv_m = S::one() / m_s;
                        for t in 0..l {
                            let term = g[base + t]
                                - inv_m * (sum_g[ci] + xhat[base + t] * sum_g_xhat[ci]);
                            buf[base + t] += scale * term;
                        }
                    } else {
                        for t in 0..l {
                            buf[base + t] += scale * g[base + t];
                        }
                    }
                }
            }
        }
    }
}

fn check_bn_shapes(xs: &[usize], gs: &[usize], bs: &[usize]) -> Result<usize, NnError> {
    if xs.len() != 3 || gs.len() != 1 || bs.len() != 1 || gs[0] != xs[1] || bs[0] != xs[1] {
        return Err(NnError::ShapeMismatch(format!(
            "batchnorm: x {xs:?}, gamma {gs:?}, beta {bs:?}"
        )));
    }
    Ok(xs[1])
}

/// Valid destination range for `dst[t] (+)= src[t + shift]`.
fn shifted_range(l: usize, shift: isize) -> (usize, usize) {
    let t0 = if shift < 0 { (-shift) as usize } else { 0 };
    let t1 = if shift > 0 { l - shift as usize } else { l };
    (t0, t1.max(t0))
}

/// `dst[t] += a * src[t + shift]` over the valid range.
fn axpy_shifted<S: Scalar>(dst: &mut [S], src: &[S], a: S, shift: isize) {
    let l = dst.len();
    let (t0, t1) = shifted_range(l, shift);
    let src = &src[(t0 as isize + shift) as usize..(t1 as isize + shift) as usize];
    for (d, &s) in dst[t0..t1].iter_mut().zip(src) {
        *d += a * s;
    }
}

/// `dst[t + shift] += a * src[t]` over the valid range.
fn axpy_shifted_dst<S: Scalar>(dst: &mut [S], src: &[S], a: S, shift: isize) {
    let l = dst.len();
    let (t0, t1) = shifted_range(l, shift);
    let dst = &mut dst[(t0 as isize + shift) as usize..(t1 as isize + shift) as usize];
    for (d, &s) in dst.iter_mut().zip(&src[t0..t1]) {
        *d += a * s;
    }
}

fn grad_buf<S: Scalar>(grads: &mut [Option<Vec<S>>], id: NodeId, len: usize) -> &mut [S] {
    grads[id]
        .get_or_insert_with(|| vec![S::zero(); len])
        .as_mut_slice()
}

#[cfg(feature = "parallel")]
fn for_each_chunk_mut<S: Send, F: Fn(usize, &mut [S]) + Sync>(data: &mut [S], chunk: usize, f: F) {
    use rayon::prelude::*;
    data.par_chunks_mut(chunk)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

#[cfg(not(feature = "parallel"))]
fn for_each_chunk_mut<S, F: Fn(usize, &mut [S])>(data: &mut [S], chunk: usize, f: F) {
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Naive triple-loop convolution oracle.
    fn conv_oracle(
        x: &[f64],
        w: &[f64],
        b: &[f64],
        n: usize,
        cin: usize,
        l: usize,
        cout: usize,
        k: usize,
    ) -> Vec<f64> {
        let pad = (k - 1) / 2;
        let mut out = vec![0.0; n * cout * l];
        for ni in 0..n {
            for co in 0..cout {
                for t in 0..l {
                    let mut acc = b[co];
                    for ci in 0..cin {
                        for dk in 0..k {
                            let src = t as isize + dk as isize - pad as isize;
                            if src >= 0 && (src as usize) < l {
                                acc += w[(co * cin + ci) * k + dk]
                                    * x[(ni * cin + ci) * l + src as usize];
                            }
                        }
                    }
                    out[(ni * cout + co) * l + t] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(vec![1, 1, 6], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], false);
        let w = g.leaf(vec![1, 1, 1], vec![1.0], true);
        let b = g.leaf(vec![1], vec![0.0], true);
        let y = g.conv1d_same(x, w, b).unwrap();
        assert_eq!(g.values(y), g.values(x));
    }

    #[test]
    fn conv_all_ones_edges() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(vec![1, 1, 8], vec![1.0; 8], false);
        let w = g.leaf(vec![1, 1, 3], vec![1.0; 3], true);
        let b = g.leaf(vec![1], vec![0.0], true);
        let y = g.conv1d_same(x, w, b).unwrap();
        let v = g.values(y);
        assert_eq!(v[0], 2.0);
        assert_eq!(v[7], 2.0);
        for &interior in &v[1..7] {
            assert_eq!(interior, 3.0);
        }
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let mut r = rng(1);
        let (n, cin, l, cout, k) = (2, 3, 11, 4, 5);
        let xv = random_vec(&mut r, n * cin * l);
        let wv = random_vec(&mut r, cout * cin * k);
        let bv = random_vec(&mut r, cout);
        let mut g = Graph::<f64>::new();
        let x = g.leaf(vec![n, cin, l], xv.clone(), false);
        let w = g.leaf(vec![cout, cin, k], wv.clone(), true);
        let b = g.leaf(vec![cout], bv.clone(), true);
        let y = g.conv1d_same(x, w, b).unwrap();
        let oracle = conv_oracle(&xv, &wv, &bv, n, cin, l, cout, k);
        for (a, o) in g.values(y).iter().zip(&oracle) {
            assert!((a - o).abs() < 1e-12, "{a} vs {o}");
        }
    }

    #[test]
    fn even_kernel_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(vec![1, 1, 4], vec![0.0; 4], false);
        let w = g.leaf(vec![1, 1, 2], vec![0.0; 2], true);
        let b = g.leaf(vec![1], vec![0.0], true);
        assert!(matches!(
            g.conv1d_same(x, w, b),
            Err(NnError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn maxpool_and_ties() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(vec![1, 1, 4], vec![1.0, 3.0, 2.0, 4.0], true);
        let y = g.maxpool2(x).unwrap();
        assert_eq!(g.values(y), &[3.0, 4.0]);

        let c = g.leaf(vec![1, 1, 4], vec![7.0; 4], true);
        let yc = g.maxpool2(c).unwrap();
        let m = g.mean(yc);
        let grads = g.backward(m);
        // ties route to the first element of each pair
        assert_eq!(grads.get(c).unwrap(), &[0.5, 0.0, 0.5, 0.0]);

        let odd = g.leaf(vec![1, 1, 3], vec![0.0; 3], false);
        assert!(matches!(g.maxpool2(odd), Err(NnError::OddLength(3))));
    }

    #[test]
    fn upsample_then_pool_is_identity() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(vec![1, 1, 2], vec![1.0, 2.0], true);
        let up = g.upsample2(x);
        assert_eq!(g.values(up), &[1.0, 1.0, 2.0, 2.0]);
        let down = g.maxpool2(up).unwrap();
        assert_eq!(g.values(down), g.values(x));
    }

    #[test]
    fn dense_identity_and_scalar_case() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(vec![1, 3], vec![1.0, 2.0, 3.0], false);
        let w = g.leaf(
            vec![3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            true,
        );
        let b = g.leaf(vec![3], vec![0.0; 3], true);
        let y = g.dense(x, w, b).unwrap();
        assert_eq!(g.values(y), g.values(x));

        let x1 = g.leaf(vec![1, 1], vec![3.0], false);
        let w1 = g.leaf(vec![1, 1], vec![2.0], true);
        let b1 = g.leaf(vec![1], vec![0.5], true);
        let y1 = g.dense(x1, w1, b1).unwrap();
        assert_eq!(g.scalar_value(y1), 6.5);
    }

    #[test]
    fn batchnorm_normalizes_in_train_mode() {
        let mut r = rng(2);
        let (n, c, l) = (4, 3, 16);
        let xv: Vec<f64> = (0..n * c * l).map(|_| r.gen_range(-5.0..9.0)).collect();
        let mut g = Graph::<f64>::new();
        let x = g.leaf(vec![n, c, l], xv, false);
        let gamma = g.leaf(vec![c], vec![1.0; c], true);
        let beta = g.leaf(vec![c], vec![0.0; c], true);
        let (y, stats) = g.batchnorm_train(x, gamma, beta, 1e-5).unwrap();
        let yv = g.values(y);
        for ci in 0..c {
            let mut vals = Vec::new();
            for ni in 0..n {
                vals.extend_from_slice(&yv[(ni * c + ci) * l..(ni * c + ci + 1) * l]);
            }
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-6, "channel {ci} mean {m}");
            assert!((v - 1.0).abs() < 1e-4, "channel {ci} var {v}");
            assert!(stats.var[ci] > 0.0);
        }
    }

    #[test]
    fn batchnorm_affine_output() {
        let mut r = rng(3);
        let (n, c, l) = (8, 2, 8);
        let xv: Vec<f64> = (0..n * c * l).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::<f64>::new();
        let x = g.leaf(vec![n, c, l], xv, false);
        let gamma = g.leaf(vec![c], vec![2.0; c], true);
        let beta = g.leaf(vec![c], vec![3.0; c], true);
        let (y, _) = g.batchnorm_train(x, gamma, beta, 1e-12).unwrap();
        let yv = g.values(y);
        let m = yv.iter().sum::<f64>() / yv.len() as f64;
        let sd = (yv.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / yv.len() as f64).sqrt();
        assert!((m - 3.0).abs() < 1e-6);
        assert!((sd - 2.0).abs() < 1e-4);
    }

    #[test]
    fn batchnorm_rejects_single_value_batch() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(vec![1, 2, 1], vec![1.0, 2.0], false);
        let gamma = g.leaf(vec![2], vec![1.0; 2], true);
        let beta = g.leaf(vec![2], vec![0.0; 2], true);
        assert!(matches!(
            g.batchnorm_train(x, gamma, beta, 1e-5),
            Err(NnError::DegenerateBatch)
        ));
    }

    #[test]
    fn dropout_statistics() {
        let mut r = rng(4);
        let n = 1_000_000;
        let mut g = Graph::<f64>::new();
        let x = g.leaf(vec![n], vec![1.0; n], false);
        let y = g.dropout(x, 0.2, &mut r);
        let yv = g.values(y);
        let survivors = yv.iter().filter(|&&v| v != 0.0).count() as f64 / n as f64;
        assert!((survivors - 0.8).abs() < 0.002, "survivor rate {survivors}");
        let mean = yv.iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.005, "inverted scaling keeps mean, got {mean}");

        // rate 0 is the identity node
        let z = g.dropout(x, 0.0, &mut r);
        assert_eq!(z, x);
    }

    #[test]
    fn backward_of_sum_adds_gradients() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(vec![3], vec![1.0, -2.0, 3.0], true);
        let a = g.scale(x, 2.0);
        let b = g.scale(x, 3.0);
        let s = g.add(a, b).unwrap();
        let m = g.mean(s);
        let grads = g.backward(m);
        for &v in grads.get(x).unwrap() {
            assert!((v - 5.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rfft_and_band_ops_forward_match_spectral_module() {
        let mut r = rng(5);
        let (n, c, t) = (2, 3, 64);
        let xv = random_vec(&mut r, n * c * t);
        let mut g = Graph::<f64>::new();
        let x = g.leaf(vec![n, c, t], xv.clone(), false);
        let mag = g.rfft_mag(x);
        assert_eq!(g.shape(mag), &[n, c, 33]);
        for ni in 0..n {
            let window = &xv[ni * c * t..(ni + 1) * c * t];
            let expect = spectral::rfft_magnitude(window, c, 256.0);
            let got = &g.values(mag)[ni * c * 33..(ni + 1) * c * 33];
            for (a, b) in got.iter().zip(&expect.magnitudes) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        let band = g.band_select(mag, 4, 10).unwrap();
        assert_eq!(g.shape(band), &[n, c, 7]);
    }

    #[test]
    fn determinism_two_identical_runs() {
        let build = || {
            let mut r = rng(99);
            let mut g = Graph::<f32>::new();
            let x = g.leaf(vec![2, 2, 8], (0..32).map(|i| i as f32 / 32.0).collect(), false);
            let w = g.leaf(vec![2, 2, 3], random_vec(&mut r, 12).iter().map(|&v| v as f32).collect(), true);
            let b = g.leaf(vec![2], vec![0.1, -0.1], true);
            let y = g.conv1d_same(x, w, b).unwrap();
            let dropped = g.dropout(y, 0.5, &mut r);
            let m = g.mean(dropped);
            let grads = g.backward(m);
            (
                g.scalar_value(m).to_bits(),
                grads.get(w).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            )
        };
        assert_eq!(build(), build());
    }
}
