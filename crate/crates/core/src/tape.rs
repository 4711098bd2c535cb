//! Reverse-mode automatic differentiation on an arena tape.
//!
//! Every operation appends a node holding the forward value plus whatever
//! context its backward pass needs. Nodes are identified by [`TensorId`]
//! (their creation index), so iterating ids in reverse is already a reverse
//! topological order of the graph. [`Tape::backward`] seeds the loss with
//! gradient 1 and accumulates into every node that transitively requires
//! gradients; everything else is skipped.

use crate::error::{Error, Result};
use crate::ops::norm::BnBatchStats;
use crate::ops::{conv, norm, pointwise, pool, reduce};
use crate::rng::Rng;
use crate::tensor::{num, Element, Tensor};

/// Handle to a tensor stored on a [`Tape`]; the index doubles as the
/// topological order of creation.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct TensorId(pub usize);

/// Recorded operation: which inputs produced a node, plus saved context for
/// the backward pass.
enum Op<E> {
    Leaf,
    Conv2d { input: TensorId, kernel: TensorId, pad: usize, stride: usize },
    CrossConv2d { features: TensorId, kernels: TensorId },
    BatchNorm { input: TensorId, gamma: TensorId, beta: TensorId, xhat: Vec<E>, inv_std: Vec<E>, train: bool },
    MaxPool2x2 { input: TensorId, argmax: Vec<u32> },
    UpsampleNearest { input: TensorId, factor: usize },
    DownscaleNearest { input: TensorId, factor: usize },
    Relu { input: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { input: TensorId, factor: E },
    Clamp { input: TensorId, lo: E, hi: E },
    Reshape { input: TensorId },
    ConcatDim1 { inputs: Vec<TensorId> },
    SliceDim1 { input: TensorId, lo: usize },
    BiasAdd { input: TensorId, bias: TensorId },
    L2Loss { pred: TensorId, target: TensorId },
    GaussianKl { mu: TensorId, log_var: TensorId },
    Reparameterize { mu: TensorId, log_var: TensorId, eps: Vec<E> },
    MeanAll { input: TensorId },
    SumAll { input: TensorId },
}

/// Gradient tape. Holds forward values, recorded ops and (after
/// [`Tape::backward`]) accumulated gradients.
pub struct Tape<E: Element> {
    vals: Vec<Tensor<E>>,
    ops: Vec<Op<E>>,
    needs: Vec<bool>,
    grads: Vec<Option<Vec<E>>>,
    /// When set, every op output is scanned for NaN/inf and the offending op
    /// reported. On by default in builds with debug assertions.
    pub check_finite: bool,
}

fn prep<'a, E: Element>(
    slot: &'a mut Option<Vec<E>>,
    len: usize,
    want: bool,
) -> Option<&'a mut [E]> {
    if !want {
        return None;
    }
    Some(slot.get_or_insert_with(|| vec![E::zero(); len]).as_mut_slice())
}

/// Disjoint mutable access to two gradient slots.
fn two_slots<E>(
    grads: &mut [Option<Vec<E>>],
    a: usize,
    b: usize,
) -> (&mut Option<Vec<E>>, &mut Option<Vec<E>>) {
    debug_assert_ne!(a, b);
    if a < b {
        let (lo, hi) = grads.split_at_mut(b);
        (&mut lo[a], &mut hi[0])
    } else {
        let (lo, hi) = grads.split_at_mut(a);
        (&mut hi[0], &mut lo[b])
    }
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape {
            vals: Vec::new(),
            ops: Vec::new(),
            needs: Vec::new(),
            grads: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    /// Registers an input tensor. Its `requires_grad` flag decides whether
    /// backward accumulates a gradient for it.
    pub fn leaf(&mut self, t: Tensor<E>) -> TensorId {
        let needs = t.requires_grad;
        self.push_unchecked(t, Op::Leaf, needs)
    }

    pub fn val(&self, id: TensorId) -> &Tensor<E> {
        &self.vals[id.0]
    }

    /// Gradient of the last `backward` call; `None` means the tensor was not
    /// reached (its gradient is identically zero) or grads were not wanted.
    pub fn grad(&self, id: TensorId) -> Option<&[E]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Moves the gradient out of the tape (for the optimizer step).
    pub fn take_grad(&mut self, id: TensorId) -> Option<Vec<E>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }

    fn push_unchecked(&mut self, t: Tensor<E>, op: Op<E>, needs: bool) -> TensorId {
        self.vals.push(t);
        self.ops.push(op);
        self.needs.push(needs);
        self.grads.push(None);
        TensorId(self.vals.len() - 1)
    }

    fn push(&mut self, name: &'static str, t: Tensor<E>, op: Op<E>, needs: bool) -> Result<TensorId> {
        if self.check_finite && !t.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        Ok(self.push_unchecked(t, op, needs))
    }

    fn needs_of(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.needs[id.0])
    }

    fn want_rank(&self, op: &'static str, id: TensorId, rank: usize) -> Result<()> {
        let got = self.vals[id.0].rank();
        if got != rank {
            return Err(Error::Shape {
                op,
                detail: format!("expected rank {rank}, got shape {:?}", self.vals[id.0].shape()),
            });
        }
        Ok(())
    }

    fn want_same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        if self.vals[a.0].shape() != self.vals[b.0].shape() {
            return Err(Error::Shape {
                op,
                detail: format!(
                    "operands differ: {:?} vs {:?}",
                    self.vals[a.0].shape(),
                    self.vals[b.0].shape()
                ),
            });
        }
        Ok(())
    }

    /// 2D convolution (correlation convention) with zero padding and stride.
    /// Requires `(H + 2*pad - kh)` and `(W + 2*pad - kw)` to be exact
    /// multiples of `stride` so no input column is silently dropped.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        kernel: TensorId,
        pad: usize,
        stride: usize,
    ) -> Result<TensorId> {
        self.want_rank("conv2d", input, 4)?;
        self.want_rank("conv2d", kernel, 4)?;
        let x = &self.vals[input.0];
        let k = &self.vals[kernel.0];
        if stride == 0 {
            return Err(Error::InvalidArgument { op: "conv2d", detail: "stride must be >= 1".into() });
        }
        if x.dim(1) != k.dim(1) {
            return Err(Error::Shape {
                op: "conv2d",
                detail: format!(
                    "input channels (axis 1) {} != kernel channels (axis 1) {}",
                    x.dim(1),
                    k.dim(1)
                ),
            });
        }
        for (axis, (inp, ker)) in [(2, (x.dim(2), k.dim(2))), (3, (x.dim(3), k.dim(3)))] {
            let padded = inp + 2 * pad;
            if ker == 0 || padded < ker {
                return Err(Error::Shape {
                    op: "conv2d",
                    detail: format!("kernel axis {axis} size {ker} exceeds padded input {padded}"),
                });
            }
            if (padded - ker) % stride != 0 {
                return Err(Error::InvalidArgument {
                    op: "conv2d",
                    detail: format!(
                        "axis {axis}: (input {inp} + 2*pad {pad} - kernel {ker}) not divisible by stride {stride}"
                    ),
                });
            }
        }
        let out = conv::conv2d_forward(x, k, pad, stride);
        let needs = self.needs_of(&[input, kernel]);
        self.push("conv2d", out, Op::Conv2d { input, kernel, pad, stride }, needs)
    }

    /// Depthwise convolution whose kernels are activations: one odd square
    /// kernel per (sample, channel), padding `(k-1)/2`, output shape equals
    /// the feature shape. Differentiable in both operands.
    pub fn cross_conv2d(&mut self, features: TensorId, kernels: TensorId) -> Result<TensorId> {
        self.want_rank("cross_conv2d", features, 4)?;
        self.want_rank("cross_conv2d", kernels, 4)?;
        let f = &self.vals[features.0];
        let k = &self.vals[kernels.0];
        if f.dim(0) != k.dim(0) || f.dim(1) != k.dim(1) {
            return Err(Error::Shape {
                op: "cross_conv2d",
                detail: format!(
                    "features [B={}, C={}] vs kernels [B={}, C={}] must match on batch and channels",
                    f.dim(0),
                    f.dim(1),
                    k.dim(0),
                    k.dim(1)
                ),
            });
        }
        if k.dim(2) != k.dim(3) || k.dim(2) % 2 == 0 {
            return Err(Error::InvalidArgument {
                op: "cross_conv2d",
                detail: format!("kernels must be odd squares, got {}x{}", k.dim(2), k.dim(3)),
            });
        }
        let out = conv::cross_conv2d_forward(f, k);
        let needs = self.needs_of(&[features, kernels]);
        self.push("cross_conv2d", out, Op::CrossConv2d { features, kernels }, needs)
    }

    /// Batch normalization over `[B, C, H, W]`. In training mode it uses
    /// batch statistics (needs at least 2 values per channel) and returns
    /// them for the caller's running-average update; in eval mode it uses
    /// the provided running statistics and accepts any batch size.
    pub fn batch_norm_train(
        &mut self,
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
    ) -> Result<(TensorId, BnBatchStats<E>)> {
        self.validate_bn(input, gamma, beta)?;
        let x = &self.vals[input.0];
        let n = x.dim(0) * x.dim(2) * x.dim(3);
        if n < 2 {
            return Err(Error::DegenerateBatch { count: n });
        }
        let (out, xhat, inv_std, stats) =
            norm::batch_norm_train_forward(x, self.vals[gamma.0].data(), self.vals[beta.0].data());
        let needs = self.needs_of(&[input, gamma, beta]);
        let id = self.push(
            "batch_norm",
            out,
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, train: true },
            needs,
        )?;
        Ok((id, stats))
    }

    pub fn batch_norm_eval(
        &mut self,
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
        running_mean: &[E],
        running_var: &[E],
    ) -> Result<TensorId> {
        self.validate_bn(input, gamma, beta)?;
        let c = self.vals[input.0].dim(1);
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::Shape {
                op: "batch_norm",
                detail: format!(
                    "running stats have {} / {} entries for {} channels",
                    running_mean.len(),
                    running_var.len(),
                    c
                ),
            });
        }
        let (out, xhat, inv_std) = norm::batch_norm_eval_forward(
            &self.vals[input.0],
            self.vals[gamma.0].data(),
            self.vals[beta.0].data(),
            running_mean,
            running_var,
        );
        let needs = self.needs_of(&[input, gamma, beta]);
        self.push(
            "batch_norm",
            out,
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, train: false },
            needs,
        )
    }

    fn validate_bn(&self, input: TensorId, gamma: TensorId, beta: TensorId) -> Result<()> {
        self.want_rank("batch_norm", input, 4)?;
        let c = self.vals[input.0].dim(1);
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            let t = &self.vals[id.0];
            if t.rank() != 1 || t.dim(0) != c {
                return Err(Error::Shape {
                    op: "batch_norm",
                    detail: format!("{name} must be [C={c}], got {:?}", t.shape()),
                });
            }
        }
        Ok(())
    }

    /// 2x2 max pooling with stride 2; spatial dims must be even. Ties route
    /// the gradient to the first maximal element in row-major block order.
    pub fn max_pool2x2(&mut self, input: TensorId) -> Result<TensorId> {
        self.want_rank("max_pool2x2", input, 4)?;
        let x = &self.vals[input.0];
        if x.dim(2) % 2 != 0 || x.dim(3) % 2 != 0 {
            return Err(Error::InvalidArgument {
                op: "max_pool2x2",
                detail: format!("spatial dims must be even, got {}x{}", x.dim(2), x.dim(3)),
            });
        }
        let (out, argmax) = pool::max_pool2x2_forward(x);
        let needs = self.needs[input.0];
        self.push("max_pool2x2", out, Op::MaxPool2x2 { input, argmax }, needs)
    }

    pub fn upsample_nearest(&mut self, input: TensorId, factor: usize) -> Result<TensorId> {
        self.want_rank("upsample_nearest", input, 4)?;
        if factor == 0 {
            return Err(Error::InvalidArgument {
                op: "upsample_nearest",
                detail: "factor must be >= 1".into(),
            });
        }
        let out = pool::upsample_nearest_forward(&self.vals[input.0], factor);
        let needs = self.needs[input.0];
        self.push("upsample_nearest", out, Op::UpsampleNearest { input, factor }, needs)
    }

    pub fn downscale_nearest(&mut self, input: TensorId, factor: usize) -> Result<TensorId> {
        self.want_rank("downscale_nearest", input, 4)?;
        let x = &self.vals[input.0];
        if factor == 0 || x.dim(2) % factor != 0 || x.dim(3) % factor != 0 {
            return Err(Error::InvalidArgument {
                op: "downscale_nearest",
                detail: format!(
                    "factor {factor} must divide spatial dims {}x{}",
                    x.dim(2),
                    x.dim(3)
                ),
            });
        }
        let out = pool::downscale_nearest_forward(x, factor);
        let needs = self.needs[input.0];
        self.push("downscale_nearest", out, Op::DownscaleNearest { input, factor }, needs)
    }

    pub fn relu(&mut self, input: TensorId) -> Result<TensorId> {
        let out = pointwise::relu_forward(&self.vals[input.0]);
        let needs = self.needs[input.0];
        self.push("relu", out, Op::Relu { input }, needs)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.want_same_shape("add", a, b)?;
        let out = pointwise::binary_forward(&self.vals[a.0], &self.vals[b.0], |x, y| x + y);
        let needs = self.needs_of(&[a, b]);
        self.push("add", out, Op::Add { a, b }, needs)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.want_same_shape("sub", a, b)?;
        let out = pointwise::binary_forward(&self.vals[a.0], &self.vals[b.0], |x, y| x - y);
        let needs = self.needs_of(&[a, b]);
        self.push("sub", out, Op::Sub { a, b }, needs)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.want_same_shape("mul", a, b)?;
        let out = pointwise::binary_forward(&self.vals[a.0], &self.vals[b.0], |x, y| x * y);
        let needs = self.needs_of(&[a, b]);
        self.push("mul", out, Op::Mul { a, b }, needs)
    }

    pub fn scale(&mut self, input: TensorId, factor: f64) -> Result<TensorId> {
        let f = num::<E>(factor);
        let out = pointwise::scale_forward(&self.vals[input.0], f);
        let needs = self.needs[input.0];
        self.push("scale", out, Op::Scale { input, factor: f }, needs)
    }

    pub fn clamp(&mut self, input: TensorId, lo: f64, hi: f64) -> Result<TensorId> {
        if !(lo <= hi) {
            return Err(Error::InvalidArgument {
                op: "clamp",
                detail: format!("lo {lo} must not exceed hi {hi}"),
            });
        }
        let (lo, hi) = (num::<E>(lo), num::<E>(hi));
        let out = pointwise::clamp_forward(&self.vals[input.0], lo, hi);
        let needs = self.needs[input.0];
        self.push("clamp", out, Op::Clamp { input, lo, hi }, needs)
    }

    pub fn reshape(&mut self, input: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let out = self.vals[input.0].clone().reshaped(shape)?;
        let needs = self.needs[input.0];
        self.push("reshape", out, Op::Reshape { input }, needs)
    }

    /// Concatenates along axis 1 (channels); all other axes must agree.
    pub fn concat_dim1(&mut self, inputs: &[TensorId]) -> Result<TensorId> {
        if inputs.is_empty() {
            return Err(Error::InvalidArgument {
                op: "concat_dim1",
                detail: "no inputs".into(),
            });
        }
        let first = self.vals[inputs[0].0].shape().to_vec();
        if first.len() < 2 {
            return Err(Error::Shape {
                op: "concat_dim1",
                detail: format!("need rank >= 2, got {first:?}"),
            });
        }
        let mut c_total = 0;
        for &id in inputs {
            let s = self.vals[id.0].shape();
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(ax, (a, b))| ax == 1 || a == b);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat_dim1",
                    detail: format!("shape {s:?} incompatible with {first:?} outside axis 1"),
                });
            }
            c_total += s[1];
        }
        let outer = first[0];
        let inner: usize = first[2..].iter().product();
        let mut shape = first.clone();
        shape[1] = c_total;
        let mut out = Tensor::zeros(&shape);
        let mut offset = 0;
        for &id in inputs {
            let t = &self.vals[id.0];
            let c = t.dim(1);
            for b in 0..outer {
                let src = &t.data()[b * c * inner..(b + 1) * c * inner];
                let dst = &mut out.data_mut()
                    [(b * c_total + offset) * inner..(b * c_total + offset + c) * inner];
                dst.copy_from_slice(src);
            }
            offset += c;
        }
        let needs = self.needs_of(inputs);
        self.push("concat_dim1", out, Op::ConcatDim1 { inputs: inputs.to_vec() }, needs)
    }

    /// Takes channels `[lo, hi)` along axis 1.
    pub fn slice_dim1(&mut self, input: TensorId, lo: usize, hi: usize) -> Result<TensorId> {
        let t = &self.vals[input.0];
        if t.rank() < 2 {
            return Err(Error::Shape {
                op: "slice_dim1",
                detail: format!("need rank >= 2, got {:?}", t.shape()),
            });
        }
        let c = t.dim(1);
        if lo >= hi || hi > c {
            return Err(Error::InvalidArgument {
                op: "slice_dim1",
                detail: format!("range {lo}..{hi} invalid for axis 1 of size {c}"),
            });
        }
        let outer = t.dim(0);
        let inner: usize = t.shape()[2..].iter().product();
        let mut shape = t.shape().to_vec();
        shape[1] = hi - lo;
        let mut out = Tensor::zeros(&shape);
        for b in 0..outer {
            let src = &t.data()[(b * c + lo) * inner..(b * c + hi) * inner];
            out.data_mut()[b * (hi - lo) * inner..(b + 1) * (hi - lo) * inner]
                .copy_from_slice(src);
        }
        let needs = self.needs[input.0];
        self.push("slice_dim1", out, Op::SliceDim1 { input, lo }, needs)
    }

    pub fn bias_add(&mut self, input: TensorId, bias: TensorId) -> Result<TensorId> {
        let t = &self.vals[input.0];
        let b = &self.vals[bias.0];
        if !(t.rank() == 4 || t.rank() == 2) || b.rank() != 1 || b.dim(0) != t.dim(1) {
            return Err(Error::Shape {
                op: "bias_add",
                detail: format!(
                    "input {:?} (rank 2 or 4) with bias {:?} matching axis 1",
                    t.shape(),
                    b.shape()
                ),
            });
        }
        let out = pointwise::bias_add_forward(t, b.data());
        let needs = self.needs_of(&[input, bias]);
        self.push("bias_add", out, Op::BiasAdd { input, bias }, needs)
    }

    /// `0.5 * sum((pred - target)^2) / B`, scalar output.
    pub fn l2_loss(&mut self, pred: TensorId, target: TensorId) -> Result<TensorId> {
        self.want_same_shape("l2_loss", pred, target)?;
        if self.vals[pred.0].rank() == 0 || self.vals[pred.0].dim(0) == 0 {
            return Err(Error::InvalidArgument {
                op: "l2_loss",
                detail: "needs a non-empty batch axis".into(),
            });
        }
        let out = reduce::l2_loss_forward(&self.vals[pred.0], &self.vals[target.0]);
        let needs = self.needs_of(&[pred, target]);
        self.push("l2_loss", out, Op::L2Loss { pred, target }, needs)
    }

    /// Per-row KL divergence of `N(mu, diag(exp(log_var)))` from `N(0, I)`.
    pub fn gaussian_kl(&mut self, mu: TensorId, log_var: TensorId) -> Result<TensorId> {
        self.want_rank("gaussian_kl", mu, 2)?;
        self.want_same_shape("gaussian_kl", mu, log_var)?;
        let out = reduce::gaussian_kl_forward(&self.vals[mu.0], &self.vals[log_var.0]);
        let needs = self.needs_of(&[mu, log_var]);
        self.push("gaussian_kl", out, Op::GaussianKl { mu, log_var }, needs)
    }

    /// Draws `z = mu + exp(log_var/2) * eps` with `eps ~ N(0, I)` from `rng`.
    pub fn reparameterize(
        &mut self,
        mu: TensorId,
        log_var: TensorId,
        rng: &mut Rng,
    ) -> Result<TensorId> {
        let mut eps = vec![E::zero(); self.vals[mu.0].numel()];
        rng.fill_normal(&mut eps);
        self.reparameterize_with(mu, log_var, eps)
    }

    /// Reparameterization with caller-provided noise, so the same draw can be
    /// replayed regardless of how a batch is split across threads.
    pub fn reparameterize_with(
        &mut self,
        mu: TensorId,
        log_var: TensorId,
        eps: Vec<E>,
    ) -> Result<TensorId> {
        self.want_rank("reparameterize", mu, 2)?;
        self.want_same_shape("reparameterize", mu, log_var)?;
        if eps.len() != self.vals[mu.0].numel() {
            return Err(Error::Shape {
                op: "reparameterize",
                detail: format!(
                    "noise has {} values for {} latents",
                    eps.len(),
                    self.vals[mu.0].numel()
                ),
            });
        }
        let out = reduce::reparameterize_forward(&self.vals[mu.0], &self.vals[log_var.0], &eps);
        let needs = self.needs_of(&[mu, log_var]);
        self.push("reparameterize", out, Op::Reparameterize { mu, log_var, eps }, needs)
    }

    pub fn mean_all(&mut self, input: TensorId) -> Result<TensorId> {
        if self.vals[input.0].numel() == 0 {
            return Err(Error::InvalidArgument { op: "mean_all", detail: "empty tensor".into() });
        }
        let out = reduce::mean_all_forward(&self.vals[input.0]);
        let needs = self.needs[input.0];
        self.push("mean_all", out, Op::MeanAll { input }, needs)
    }

    pub fn sum_all(&mut self, input: TensorId) -> Result<TensorId> {
        let out = reduce::sum_all_forward(&self.vals[input.0]);
        let needs = self.needs[input.0];
        self.push("sum_all", out, Op::SumAll { input }, needs)
    }

    /// Reverse pass from a scalar loss. Gradients accumulate only into nodes
    /// that (transitively) require them; query results with [`Tape::grad`].
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.vals[loss.0].numel() != 1 {
            return Err(Error::InvalidArgument {
                op: "backward",
                detail: format!("loss must be scalar, got shape {:?}", self.vals[loss.0].shape()),
            });
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![E::one()]);

        // Split borrows: ops/vals/needs are read-only below, grads is written.
        let Tape { vals, ops, needs, grads, .. } = self;
        for i in (0..=loss.0).rev() {
            if !needs[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &ops[i] {
                Op::Leaf => {}
                Op::Conv2d { input, kernel, pad, stride } => {
                    let (x, k) = (&vals[input.0], &vals[kernel.0]);
                    if input == kernel {
                        if let Some(d) = prep(&mut grads[input.0], x.numel(), needs[input.0]) {
                            conv::conv2d_backward(x, k, *pad, *stride, &g, Some(d), None);
                        }
                        if let Some(d) = prep(&mut grads[kernel.0], k.numel(), needs[kernel.0]) {
                            conv::conv2d_backward(x, k, *pad, *stride, &g, None, Some(d));
                        }
                    } else {
                        let (si, sk) = two_slots(grads, input.0, kernel.0);
                        conv::conv2d_backward(
                            x,
                            k,
                            *pad,
                            *stride,
                            &g,
                            prep(si, x.numel(), needs[input.0]),
                            prep(sk, k.numel(), needs[kernel.0]),
                        );
                    }
                }
                Op::CrossConv2d { features, kernels } => {
                    let (f, k) = (&vals[features.0], &vals[kernels.0]);
                    if features == kernels {
                        if let Some(d) = prep(&mut grads[features.0], f.numel(), needs[features.0]) {
                            conv::cross_conv2d_backward(f, k, &g, Some(d), None);
                        }
                        if let Some(d) = prep(&mut grads[kernels.0], k.numel(), needs[kernels.0]) {
                            conv::cross_conv2d_backward(f, k, &g, None, Some(d));
                        }
                    } else {
                        let (sf, sk) = two_slots(grads, features.0, kernels.0);
                        conv::cross_conv2d_backward(
                            f,
                            k,
                            &g,
                            prep(sf, f.numel(), needs[features.0]),
                            prep(sk, k.numel(), needs[kernels.0]),
                        );
                    }
                }
                Op::BatchNorm { input, gamma, beta, xhat, inv_std, train } => {
                    let shape = vals[input.0].shape().to_vec();
                    let c = shape[1];
                    let gamma_vals = vals[gamma.0].data().to_vec();
                    // input, gamma and beta have pairwise distinct ranks or
                    // roles; gamma == beta is the only aliasing worth guarding.
                    let want_in = needs[input.0];
                    let want_gamma = needs[gamma.0];
                    let want_beta = needs[beta.0] && beta != gamma;
                    let numel = vals[input.0].numel();
                    if gamma == beta {
                        if let Some(dg) = prep(&mut grads[gamma.0], c, want_gamma) {
                            norm::batch_norm_backward::<E>(
                                &shape, xhat, inv_std, &gamma_vals, &g, *train, None, Some(dg),
                                None,
                            );
                            norm::batch_norm_backward::<E>(
                                &shape, xhat, inv_std, &gamma_vals, &g, *train, None, None,
                                Some(dg),
                            );
                        }
                        if let Some(di) = prep(&mut grads[input.0], numel, want_in) {
                            norm::batch_norm_backward::<E>(
                                &shape, xhat, inv_std, &gamma_vals, &g, *train, Some(di), None,
                                None,
                            );
                        }
                    } else {
                        if let Some(di) = prep(&mut grads[input.0], numel, want_in) {
                            norm::batch_norm_backward::<E>(
                                &shape, xhat, inv_std, &gamma_vals, &g, *train, Some(di), None,
                                None,
                            );
                        }
                        if let Some(dg) = prep(&mut grads[gamma.0], c, want_gamma) {
                            norm::batch_norm_backward::<E>(
                                &shape, xhat, inv_std, &gamma_vals, &g, *train, None, Some(dg),
                                None,
                            );
                        }
                        if let Some(db) = prep(&mut grads[beta.0], c, want_beta) {
                            norm::batch_norm_backward::<E>(
                                &shape, xhat, inv_std, &gamma_vals, &g, *train, None, None,
                                Some(db),
                            );
                        }
                    }
                }
                Op::MaxPool2x2 { input, argmax } => {
                    let numel = vals[input.0].numel();
                    if let Some(di) = prep(&mut grads[input.0], numel, needs[input.0]) {
                        pool::max_pool2x2_backward(argmax, &g, di);
                    }
                }
                Op::UpsampleNearest { input, factor } => {
                    let shape = vals[input.0].shape().to_vec();
                    let numel = vals[input.0].numel();
                    if let Some(di) = prep(&mut grads[input.0], numel, needs[input.0]) {
                        pool::upsample_nearest_backward(&shape, *factor, &g, di);
                    }
                }
                Op::DownscaleNearest { input, factor } => {
                    let shape = vals[input.0].shape().to_vec();
                    let numel = vals[input.0].numel();
                    if let Some(di) = prep(&mut grads[input.0], numel, needs[input.0]) {
                        pool::downscale_nearest_backward(&shape, *factor, &g, di);
                    }
                }
                Op::Relu { input } => {
                    let numel = vals[input.0].numel();
                    let (x, slot) = (&vals[input.0], &mut grads[input.0]);
                    if let Some(di) = prep(slot, numel, needs[input.0]) {
                        pointwise::relu_backward(x.data(), &g, di);
                    }
                }
                Op::Add { a, b } => {
                    for id in [*a, *b] {
                        let numel = vals[id.0].numel();
                        if let Some(d) = prep(&mut grads[id.0], numel, needs[id.0]) {
                            for (dv, gv) in d.iter_mut().zip(&g) {
                                *dv = *dv + *gv;
                            }
                        }
                    }
                }
                Op::Sub { a, b } => {
                    let numel = vals[a.0].numel();
                    if let Some(d) = prep(&mut grads[a.0], numel, needs[a.0]) {
                        for (dv, gv) in d.iter_mut().zip(&g) {
                            *dv = *dv + *gv;
                        }
                    }
                    if let Some(d) = prep(&mut grads[b.0], numel, needs[b.0]) {
                        for (dv, gv) in d.iter_mut().zip(&g) {
                            *dv = *dv - *gv;
                        }
                    }
                }
                Op::Mul { a, b } => {
                    // Sequential accumulation keeps mul(x, x) correct.
                    let bv = vals[b.0].data().to_vec();
                    let numel = vals[a.0].numel();
                    if let Some(d) = prep(&mut grads[a.0], numel, needs[a.0]) {
                        for ((dv, gv), xv) in d.iter_mut().zip(&g).zip(&bv) {
                            *dv = *dv + *gv * *xv;
                        }
                    }
                    let av = vals[a.0].data().to_vec();
                    if let Some(d) = prep(&mut grads[b.0], numel, needs[b.0]) {
                        for ((dv, gv), xv) in d.iter_mut().zip(&g).zip(&av) {
                            *dv = *dv + *gv * *xv;
                        }
                    }
                }
                Op::Scale { input, factor } => {
                    let numel = vals[input.0].numel();
                    if let Some(d) = prep(&mut grads[input.0], numel, needs[input.0]) {
                        for (dv, gv) in d.iter_mut().zip(&g) {
                            *dv = *dv + *gv * *factor;
                        }
                    }
                }
                Op::Clamp { input, lo, hi } => {
                    let numel = vals[input.0].numel();
                    let (x, slot) = (&vals[input.0], &mut grads[input.0]);
                    if let Some(d) = prep(slot, numel, needs[input.0]) {
                        pointwise::clamp_backward(x.data(), *lo, *hi, &g, d);
                    }
                }
                Op::Reshape { input } => {
                    let numel = vals[input.0].numel();
                    if let Some(d) = prep(&mut grads[input.0], numel, needs[input.0]) {
                        for (dv, gv) in d.iter_mut().zip(&g) {
                            *dv = *dv + *gv;
                        }
                    }
                }
                Op::ConcatDim1 { inputs } => {
                    let out_shape = vals[i].shape().to_vec();
                    let outer = out_shape[0];
                    let inner: usize = out_shape[2..].iter().product();
                    let c_total = out_shape[1];
                    let mut offset = 0;
                    for &id in inputs {
                        let c = vals[id.0].dim(1);
                        let numel = vals[id.0].numel();
                        if let Some(d) = prep(&mut grads[id.0], numel, needs[id.0]) {
                            for b in 0..outer {
                                let src =
                                    &g[(b * c_total + offset) * inner..(b * c_total + offset + c) * inner];
                                let dst = &mut d[b * c * inner..(b + 1) * c * inner];
                                for (dv, gv) in dst.iter_mut().zip(src) {
                                    *dv = *dv + *gv;
                                }
                            }
                        }
                        offset += c;
                    }
                }
                Op::SliceDim1 { input, lo } => {
                    let in_shape = vals[input.0].shape().to_vec();
                    let out_c = vals[i].dim(1);
                    let outer = in_shape[0];
                    let c = in_shape[1];
                    let inner: usize = in_shape[2..].iter().product();
                    let numel = vals[input.0].numel();
                    if let Some(d) = prep(&mut grads[input.0], numel, needs[input.0]) {
                        for b in 0..outer {
                            let src = &g[b * out_c * inner..(b + 1) * out_c * inner];
                            let dst = &mut d[(b * c + lo) * inner..(b * c + lo + out_c) * inner];
                            for (dv, gv) in dst.iter_mut().zip(src) {
                                *dv = *dv + *gv;
                            }
                        }
                    }
                }
                Op::BiasAdd { input, bias } => {
                    let shape = vals[input.0].shape().to_vec();
                    let numel = vals[input.0].numel();
                    if let Some(d) = prep(&mut grads[input.0], numel, needs[input.0]) {
                        for (dv, gv) in d.iter_mut().zip(&g) {
                            *dv = *dv + *gv;
                        }
                    }
                    let blen = vals[bias.0].numel();
                    if let Some(db) = prep(&mut grads[bias.0], blen, needs[bias.0]) {
                        pointwise::bias_add_backward(&shape, &g, db);
                    }
                }
                Op::L2Loss { pred, target } => {
                    let (p, t) = (&vals[pred.0], &vals[target.0]);
                    let g0 = g[0];
                    if pred == target {
                        // d/dp of 0 is 0; nothing to do.
                    } else {
                        let (sp, st) = two_slots(grads, pred.0, target.0);
                        reduce::l2_loss_backward(
                            p,
                            t,
                            g0,
                            prep(sp, p.numel(), needs[pred.0]),
                            prep(st, t.numel(), needs[target.0]),
                        );
                    }
                }
                Op::GaussianKl { mu, log_var } => {
                    let (m, lv) = (&vals[mu.0], &vals[log_var.0]);
                    if mu == log_var {
                        if let Some(d) = prep(&mut grads[mu.0], m.numel(), needs[mu.0]) {
                            reduce::gaussian_kl_backward(m, lv, &g, Some(d), None);
                        }
                        if let Some(d) = prep(&mut grads[log_var.0], lv.numel(), needs[log_var.0]) {
                            reduce::gaussian_kl_backward(m, lv, &g, None, Some(d));
                        }
                    } else {
                        let (sm, sl) = two_slots(grads, mu.0, log_var.0);
                        reduce::gaussian_kl_backward(
                            m,
                            lv,
                            &g,
                            prep(sm, m.numel(), needs[mu.0]),
                            prep(sl, lv.numel(), needs[log_var.0]),
                        );
                    }
                }
                Op::Reparameterize { mu, log_var, eps } => {
                    let lv = &vals[log_var.0];
                    if mu == log_var {
                        if let Some(d) = prep(&mut grads[mu.0], lv.numel(), needs[mu.0]) {
                            reduce::reparameterize_backward(lv, eps, &g, Some(d), None);
                        }
                        if let Some(d) = prep(&mut grads[log_var.0], lv.numel(), needs[log_var.0]) {
                            reduce::reparameterize_backward(lv, eps, &g, None, Some(d));
                        }
                    } else {
                        let (sm, sl) = two_slots(grads, mu.0, log_var.0);
                        reduce::reparameterize_backward(
                            lv,
                            eps,
                            &g,
                            prep(sm, lv.numel(), needs[mu.0]),
                            prep(sl, lv.numel(), needs[log_var.0]),
                        );
                    }
                }
                Op::MeanAll { input } => {
                    let numel = vals[input.0].numel();
                    let gv = g[0] / num::<E>(numel as f64);
                    if let Some(d) = prep(&mut grads[input.0], numel, needs[input.0]) {
                        for dv in d.iter_mut() {
                            *dv = *dv + gv;
                        }
                    }
                }
                Op::SumAll { input } => {
                    let numel = vals[input.0].numel();
                    let gv = g[0];
                    if let Some(d) = prep(&mut grads[input.0], numel, needs[input.0]) {
                        for dv in d.iter_mut() {
                            *dv = *dv + gv;
                        }
                    }
                }
            }
            // Keep the gradient available for inspection after backward.
            grads[i] = Some(g);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::conv;

    #[test]
    fn sum_backward_is_ones() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3], |i| i as f64).with_grad());
        let s = tape.sum_all(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn mean_backward_is_uniform() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[4], |i| i as f64).with_grad());
        let m = tape.mean_all(x).unwrap();
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.25; 4]);
    }

    #[test]
    fn unreached_tensor_has_no_gradient() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[3], |i| i as f64).with_grad());
        let y = tape.leaf(Tensor::from_fn(&[3], |i| i as f64 + 1.0).with_grad());
        let s = tape.sum_all(x).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(x).is_some());
        assert!(tape.grad(y).is_none());
    }

    #[test]
    fn no_grad_leaf_is_skipped() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::full(&[2], 3.0));
        let s = tape.sum_all(x).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn grad_accumulates_over_multiple_uses() {
        // y = sum(x + x) -> dy/dx = 2
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::full(&[3], 1.0).with_grad());
        let d = tape.add(x, x).unwrap();
        let s = tape.sum_all(d).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0; 3]);
    }

    #[test]
    fn mul_self_squares_gradient() {
        // y = sum(x * x) -> dy/dx = 2x
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap().with_grad());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum_all(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]).with_grad());
        let y = tape.relu(x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::InvalidArgument { .. })));
    }

    #[test]
    fn shape_mismatch_names_operation_and_axes() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 3, 8, 8]));
        let k = tape.leaf(Tensor::zeros(&[4, 2, 3, 3]));
        let err = tape.conv2d(x, k, 1, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("conv2d"), "{msg}");
        assert!(msg.contains("axis 1"), "{msg}");
        assert!(msg.contains('3') && msg.contains('2'), "{msg}");
    }

    #[test]
    fn non_finite_guard_reports_op() {
        let mut tape: Tape<f32> = Tape::new();
        tape.check_finite = true;
        let x = tape.leaf(Tensor::full(&[1, 1], f32::MAX));
        let err = tape.mul(x, x).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "mul" }));
    }

    #[test]
    fn slice_concat_round_trip() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 4, 2, 2], |i| i as f64).with_grad());
        let a = tape.slice_dim1(x, 0, 1).unwrap();
        let b = tape.slice_dim1(x, 1, 4).unwrap();
        let back = tape.concat_dim1(&[a, b]).unwrap();
        assert_eq!(tape.val(back).data(), tape.val(x).data());
        let s = tape.sum_all(back).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 32]);
    }

    /// Perf probe for sizing training defaults on the host; run manually:
    /// `cargo test -p framesynth-core bench_conv_layers -- --ignored --nocapture`
    #[test]
    #[ignore]
    fn bench_conv_layers() {
        use std::time::Instant;
        let mut rng = Rng::new(1);
        let b = 16usize;
        // (name, cin, cout, hw, k, pad, stride)
        let layers: &[(&str, usize, usize, usize, usize, usize, usize)] = &[
            ("me1", 6, 24, 32, 5, 2, 1),
            ("me2", 24, 24, 32, 5, 2, 1),
            ("me3", 24, 48, 16, 5, 2, 1),
            ("me4", 48, 48, 16, 5, 2, 1),
            ("me5", 48, 50, 8, 5, 2, 1),
            ("me6s2", 50, 50, 8, 5, 2, 2),
            ("ie1", 3, 24, 32, 5, 2, 1),
            ("ie2", 24, 24, 32, 5, 2, 1),
            ("ie3", 24, 24, 16, 5, 2, 1),
            ("ie4", 24, 8, 16, 5, 2, 1),
            ("kd1", 16, 16, 5, 5, 2, 1),
            ("md9x9", 16, 32, 32, 9, 4, 1),
            ("md1x1a", 32, 32, 32, 1, 0, 1),
            ("md1x1b", 32, 3, 32, 1, 0, 1),
        ];
        let mut total_f = 0.0;
        let mut total_b = 0.0;
        for &(name, cin, cout, hw, k, pad, stride) in layers {
            let x = Tensor::from_fn(&[b, cin, hw, hw], |_| rng.uniform(-1.0, 1.0) as f32);
            let w = Tensor::from_fn(&[cout, cin, k, k], |_| rng.uniform(-0.1, 0.1) as f32);
            let reps = 5;
            let t0 = Instant::now();
            let mut out = conv::conv2d_forward(&x, &w, pad, stride);
            for _ in 1..reps {
                out = conv::conv2d_forward(&x, &w, pad, stride);
            }
            let fwd_ms = t0.elapsed().as_secs_f64() * 1000.0 / reps as f64;
            let g = vec![1.0f32; out.numel()];
            let mut di = vec![0.0f32; x.numel()];
            let mut dk = vec![0.0f32; w.numel()];
            let t1 = Instant::now();
            for _ in 0..reps {
                conv::conv2d_backward(&x, &w, pad, stride, &g, Some(&mut di), Some(&mut dk));
            }
            let bwd_ms = t1.elapsed().as_secs_f64() * 1000.0 / reps as f64;
            total_f += fwd_ms;
            total_b += bwd_ms;
            println!("{name:8} fwd {fwd_ms:7.2} ms  bwd {bwd_ms:7.2} ms");
        }
        println!("TOTAL    fwd {total_f:7.2} ms  bwd {total_b:7.2} ms  step~{:.0} ms", total_f + total_b);
    }

    /// Probe for GEMM stride sensitivity; run manually with --ignored.
    #[test]
    #[ignore]
    fn bench_gemm_orientation() {
        use std::time::Instant;
        let mut rng = Rng::new(2);
        let (m, k, n) = (2592usize, 32usize, 1024usize);
        let a: Vec<f32> = (0..m * k).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
        let b: Vec<f32> = (0..k * n).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
        let mut c = vec![0.0f32; m * n];
        let reps = 20;
        let flop = (2 * m * k * n * reps) as f64;

        // A natural [m,k]
        let t0 = Instant::now();
        for _ in 0..reps {
            f32::gemm(m, k, n, 1.0, &a, k as isize, 1, &b, n as isize, 1, 0.0, &mut c, n as isize, 1);
        }
        println!("A natural   : {:6.1} GFLOPS", flop / t0.elapsed().as_secs_f64() / 1e9);

        // A transposed view of [k,m] stored row-major => strides (1, m)... same data reinterpreted
        let t0 = Instant::now();
        for _ in 0..reps {
            f32::gemm(m, k, n, 1.0, &a, 1, m as isize, &b, n as isize, 1, 0.0, &mut c, n as isize, 1);
        }
        println!("A transposed: {:6.1} GFLOPS", flop / t0.elapsed().as_secs_f64() / 1e9);

        // dkernel shape: m2=32, k2=1024, n2=2592 with B transposed
        let (m2, k2, n2) = (32usize, 1024usize, 2592usize);
        let a2: Vec<f32> = (0..m2 * k2).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
        let b2: Vec<f32> = (0..k2 * n2).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
        let mut c2 = vec![0.0f32; m2 * n2];
        let flop2 = (2 * m2 * k2 * n2 * reps) as f64;
        let t0 = Instant::now();
        for _ in 0..reps {
            f32::gemm(m2, k2, n2, 1.0, &a2, k2 as isize, 1, &b2, n2 as isize, 1, 1.0, &mut c2, n2 as isize, 1);
        }
        println!("B natural   : {:6.1} GFLOPS", flop2 / t0.elapsed().as_secs_f64() / 1e9);
        let t0 = Instant::now();
        for _ in 0..reps {
            f32::gemm(m2, k2, n2, 1.0, &a2, k2 as isize, 1, &b2, 1, k2 as isize, 1.0, &mut c2, n2 as isize, 1);
        }
        println!("B transposed: {:6.1} GFLOPS", flop2 / t0.elapsed().as_secs_f64() / 1e9);

        // Forward reference shape m=32,k=2592,n=1024 all natural
        let t0 = Instant::now();
        for _ in 0..reps {
            f32::gemm(32, 2592, 1024, 1.0, &a, 2592, 1, &b2, 1024, 1, 0.0, &mut c2, 1024, 1);
        }
        println!("fwd shape   : {:6.1} GFLOPS", flop / t0.elapsed().as_secs_f64() / 1e9);
    }

    #[test]
    fn graph_rebuild_is_deterministic() {
        let build = || {
            let mut rng = Rng::new(77);
            let mut tape: Tape<f32> = Tape::new();
            let x = tape.leaf(Tensor::from_fn(&[2, 8], |_| rng.uniform(-1.0, 1.0) as f32));
            let lv = tape.leaf(Tensor::from_fn(&[2, 8], |_| rng.uniform(-1.0, 0.0) as f32));
            let z = tape.reparameterize(x, lv, &mut rng).unwrap();
            tape.val(z).data().to_vec()
        };
        assert_eq!(build(), build());
    }
}
