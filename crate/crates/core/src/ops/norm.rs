use crate::tensor::{num, Element, Tensor};

pub const BN_EPS: f64 = 1e-5;

/// Per-channel batch statistics produced by a training-mode forward pass,
/// used by the optimizer step to update running statistics with momentum.
#[derive(Clone, Debug)]
pub struct BnBatchStats<E> {
    pub mean: Vec<E>,
    /// Unbiased variance (divides by n-1), the convention for running stats.
    pub var: Vec<E>,
    /// Number of values per channel that produced these statistics.
    pub count: usize,
}

/// Training-mode batch normalization over `[B, C, H, W]` using batch
/// statistics. Returns the output plus the normalized input and per-channel
/// inverse standard deviation (both needed by the backward pass) and the
/// batch statistics for the running-average update.
pub fn batch_norm_train_forward<E: Element>(
    input: &Tensor<E>,
    gamma: &[E],
    beta: &[E],
) -> (Tensor<E>, Vec<E>, Vec<E>, BnBatchStats<E>) {
    let (b, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let n = b * h * w;
    debug_assert!(n >= 2);
    let plane = h * w;
    let inv_n = E::one() / num::<E>(n as f64);
    let mut mean = vec![E::zero(); c];
    let mut var = vec![E::zero(); c];
    for ci in 0..c {
        let mut sum = E::zero();
        let mut sumsq = E::zero();
        for bi in 0..b {
            let s = &input.data()[(bi * c + ci) * plane..(bi * c + ci + 1) * plane];
            for &v in s {
                sum = sum + v;
                sumsq = sumsq + v * v;
            }
        }
        let m = sum * inv_n;
        mean[ci] = m;
        // Biased variance for normalization; clamp tiny negatives from
        // cancellation.
        var[ci] = (sumsq * inv_n - m * m).max(E::zero());
    }
    let inv_std: Vec<E> =
        var.iter().map(|&v| E::one() / (v + num::<E>(BN_EPS)).sqrt()).collect();
    let mut out = Tensor::zeros(input.shape());
    let mut xhat = vec![E::zero(); input.numel()];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * plane;
            let (m, is, g, bt) = (mean[ci], inv_std[ci], gamma[ci], beta[ci]);
            for k in 0..plane {
                let xh = (input.data()[base + k] - m) * is;
                xhat[base + k] = xh;
                out.data_mut()[base + k] = g * xh + bt;
            }
        }
    }
    let unbias = num::<E>(n as f64 / (n as f64 - 1.0));
    let stats = BnBatchStats {
        mean,
        var: var.iter().map(|&v| v * unbias).collect(),
        count: n,
    };
    (out, xhat, inv_std, stats)
}

/// Inference-mode batch normalization using running statistics; valid for
/// any batch size including 1. Returns output, normalized input and
/// per-channel inverse std (for the backward pass).
pub fn batch_norm_eval_forward<E: Element>(
    input: &Tensor<E>,
    gamma: &[E],
    beta: &[E],
    running_mean: &[E],
    running_var: &[E],
) -> (Tensor<E>, Vec<E>, Vec<E>) {
    let (b, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let plane = h * w;
    let inv_std: Vec<E> = running_var
        .iter()
        .map(|&v| E::one() / (v.max(E::zero()) + num::<E>(BN_EPS)).sqrt())
        .collect();
    let mut out = Tensor::zeros(input.shape());
    let mut xhat = vec![E::zero(); input.numel()];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * plane;
            let (m, is, g, bt) = (running_mean[ci], inv_std[ci], gamma[ci], beta[ci]);
            for k in 0..plane {
                let xh = (input.data()[base + k] - m) * is;
                xhat[base + k] = xh;
                out.data_mut()[base + k] = g * xh + bt;
            }
        }
    }
    (out, xhat, inv_std)
}

/// Backward pass shared by both modes. In training mode the batch statistics
/// depend on the input, which couples every value in a channel; in eval mode
/// the statistics are constants and the pass is elementwise.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm_backward<E: Element>(
    shape: &[usize],
    xhat: &[E],
    inv_std: &[E],
    gamma: &[E],
    grad_out: &[E],
    train: bool,
    mut dinput: Option<&mut [E]>,
    mut dgamma: Option<&mut [E]>,
    mut dbeta: Option<&mut [E]>,
) {
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let plane = h * w;
    let n = b * plane;
    let inv_n = E::one() / num::<E>(n as f64);
    for ci in 0..c {
        // Channel-wise reductions of the output gradient.
        let mut sum_g = E::zero();
        let mut sum_g_xhat = E::zero();
        for bi in 0..b {
            let base = (bi * c + ci) * plane;
            for k in 0..plane {
                let gv = grad_out[base + k];
                sum_g = sum_g + gv;
                sum_g_xhat = sum_g_xhat + gv * xhat[base + k];
            }
        }
        if let Some(dg) = dgamma.as_deref_mut() {
            dg[ci] = dg[ci] + sum_g_xhat;
        }
        if let Some(db) = dbeta.as_deref_mut() {
            db[ci] = db[ci] + sum_g;
        }
        if let Some(di) = dinput.as_deref_mut() {
            let coeff = gamma[ci] * inv_std[ci];
            for bi in 0..b {
                let base = (bi * c + ci) * plane;
                for k in 0..plane {
                    let gv = grad_out[base + k];
                    let dx = if train {
                        // d/dx of (x - mean(x)) * inv_std(x): each value also
                        // moves the channel mean and variance.
                        coeff * (gv - inv_n * sum_g - xhat[base + k] * inv_n * sum_g_xhat)
                    } else {
                        coeff * gv
                    };
                    di[base + k] = di[base + k] + dx;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn normalizes_to_zero_mean_unit_var() {
        let mut rng = Rng::new(21);
        let input = Tensor::from_fn(&[4, 3, 5, 5], |_| rng.uniform(-2.0, 5.0));
        let gamma = vec![1.0f64; 3];
        let beta = vec![0.0f64; 3];
        let (out, _, _, stats) = batch_norm_train_forward(&input, &gamma, &beta);
        let plane = 25;
        let n = 4 * plane;
        for ci in 0..3 {
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            for bi in 0..4 {
                let base = (bi * 3 + ci) * plane;
                for k in 0..plane {
                    sum += out.data()[base + k];
                    sumsq += out.data()[base + k].powi(2);
                }
            }
            let mean = sum / n as f64;
            let var = sumsq / n as f64 - mean * mean;
            assert!(mean.abs() < 1e-4, "channel {ci} mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "channel {ci} var {var}");
            assert!(stats.count == n);
        }
    }

    #[test]
    fn constant_input_maps_to_beta() {
        let input = Tensor::full(&[2, 2, 3, 3], 7.0f64);
        let (out, _, _, _) = batch_norm_train_forward(&input, &[2.0, 2.0], &[0.5, -0.5]);
        for bi in 0..2 {
            for ci in 0..2 {
                let want = if ci == 0 { 0.5 } else { -0.5 };
                for k in 0..9 {
                    let v = out.data()[(bi * 2 + ci) * 9 + k];
                    assert!((v - want).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn gamma_zero_gives_beta_everywhere() {
        let mut rng = Rng::new(23);
        let input = Tensor::from_fn(&[2, 1, 4, 4], |_| rng.uniform(-1.0, 1.0));
        let (out, _, _, _) = batch_norm_train_forward(&input, &[0.0], &[0.3]);
        assert!(out.data().iter().all(|&v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn eval_mode_uses_running_stats() {
        let input = Tensor::new(vec![1, 1, 1, 2], vec![3.0f64, 5.0]).unwrap();
        // running mean 1, var 4 -> xhat = (x-1)/2 (up to eps)
        let (out, _, _) = batch_norm_eval_forward(&input, &[1.0], &[0.0], &[1.0], &[4.0]);
        assert!((out.data()[0] - 1.0).abs() < 1e-4);
        assert!((out.data()[1] - 2.0).abs() < 1e-4);
    }

    #[test]
    fn batch_stats_are_unbiased() {
        // Values 0, 2 in one channel: mean 1, biased var 1, unbiased 2.
        let input = Tensor::new(vec![2, 1, 1, 1], vec![0.0f64, 2.0]).unwrap();
        let (_, _, _, stats) = batch_norm_train_forward(&input, &[1.0], &[0.0]);
        assert!((stats.mean[0] - 1.0).abs() < 1e-12);
        assert!((stats.var[0] - 2.0).abs() < 1e-12);
    }
}
