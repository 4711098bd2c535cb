use crate::tensor::{num, Element, Tensor};

/// Reconstruction loss: `0.5 * sum((pred - target)^2) / B` where `B` is the
/// leading dimension of `pred`. Returns a scalar tensor.
pub fn l2_loss_forward<E: Element>(pred: &Tensor<E>, target: &Tensor<E>) -> Tensor<E> {
    let b = num::<E>(pred.dim(0) as f64);
    let mut acc = E::zero();
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let d = p - t;
        acc = acc + d * d;
    }
    Tensor::scalar(acc * num::<E>(0.5) / b)
}

pub fn l2_loss_backward<E: Element>(
    pred: &Tensor<E>,
    target: &Tensor<E>,
    grad_out: E,
    mut dpred: Option<&mut [E]>,
    mut dtarget: Option<&mut [E]>,
) {
    let inv_b = E::one() / num::<E>(pred.dim(0) as f64);
    for (i, (&p, &t)) in pred.data().iter().zip(target.data()).enumerate() {
        let g = grad_out * (p - t) * inv_b;
        if let Some(dp) = dpred.as_deref_mut() {
            dp[i] = dp[i] + g;
        }
        if let Some(dt) = dtarget.as_deref_mut() {
            dt[i] = dt[i] - g;
        }
    }
}

/// KL divergence of a diagonal Gaussian `N(mu, diag(exp(log_var)))` from the
/// standard normal, one value per batch row:
/// `0.5 * sum_d(exp(lv) + mu^2 - 1 - lv)`.
pub fn gaussian_kl_forward<E: Element>(mu: &Tensor<E>, log_var: &Tensor<E>) -> Tensor<E> {
    let (b, d) = (mu.dim(0), mu.dim(1));
    let half = num::<E>(0.5);
    let mut out = Tensor::zeros(&[b]);
    for bi in 0..b {
        let mut acc = E::zero();
        for di in 0..d {
            let m = mu.data()[bi * d + di];
            let lv = log_var.data()[bi * d + di];
            acc = acc + lv.exp() + m * m - E::one() - lv;
        }
        out.data_mut()[bi] = acc * half;
    }
    out
}

pub fn gaussian_kl_backward<E: Element>(
    mu: &Tensor<E>,
    log_var: &Tensor<E>,
    grad_out: &[E],
    mut dmu: Option<&mut [E]>,
    mut dlog_var: Option<&mut [E]>,
) {
    let (b, d) = (mu.dim(0), mu.dim(1));
    let half = num::<E>(0.5);
    for bi in 0..b {
        let g = grad_out[bi];
        for di in 0..d {
            let i = bi * d + di;
            if let Some(dm) = dmu.as_deref_mut() {
                dm[i] = dm[i] + g * mu.data()[i];
            }
            if let Some(dlv) = dlog_var.as_deref_mut() {
                dlv[i] = dlv[i] + g * half * (log_var.data()[i].exp() - E::one());
            }
        }
    }
}

/// Reparameterized Gaussian sample `z = mu + exp(log_var / 2) * eps`.
pub fn reparameterize_forward<E: Element>(
    mu: &Tensor<E>,
    log_var: &Tensor<E>,
    eps: &[E],
) -> Tensor<E> {
    let half = num::<E>(0.5);
    let mut out = mu.clone();
    for ((o, &lv), &e) in out.data_mut().iter_mut().zip(log_var.data()).zip(eps) {
        *o = *o + (lv * half).exp() * e;
    }
    out
}

pub fn reparameterize_backward<E: Element>(
    log_var: &Tensor<E>,
    eps: &[E],
    grad_out: &[E],
    mut dmu: Option<&mut [E]>,
    mut dlog_var: Option<&mut [E]>,
) {
    let half = num::<E>(0.5);
    for (i, (&lv, &e)) in log_var.data().iter().zip(eps).enumerate() {
        let g = grad_out[i];
        if let Some(dm) = dmu.as_deref_mut() {
            dm[i] = dm[i] + g;
        }
        if let Some(dlv) = dlog_var.as_deref_mut() {
            // dz/dlv = 0.5 * exp(lv/2) * eps
            dlv[i] = dlv[i] + g * half * (lv * half).exp() * e;
        }
    }
}

pub fn mean_all_forward<E: Element>(input: &Tensor<E>) -> Tensor<E> {
    let n = num::<E>(input.numel() as f64);
    let mut acc = E::zero();
    for &v in input.data() {
        acc = acc + v;
    }
    Tensor::scalar(acc / n)
}

pub fn sum_all_forward<E: Element>(input: &Tensor<E>) -> Tensor<E> {
    let mut acc = E::zero();
    for &v in input.data() {
        acc = acc + v;
    }
    Tensor::scalar(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn l2_loss_zero_for_equal_tensors() {
        let t = Tensor::full(&[2, 3], 0.7f64);
        assert_eq!(l2_loss_forward(&t, &t).item(), 0.0);
    }

    #[test]
    fn l2_loss_known_value() {
        // Residuals 3 and 4 with batch 1: 0.5 * (9 + 16) = 12.5
        let p = Tensor::new(vec![1, 2], vec![3.0f64, 4.0]).unwrap();
        let t = Tensor::zeros(&[1, 2]);
        assert!((l2_loss_forward(&p, &t).item() - 12.5).abs() < 1e-12);
        // Batch 2 divides by 2.
        let p = Tensor::new(vec![2, 1], vec![3.0f64, 4.0]).unwrap();
        let t = Tensor::zeros(&[2, 1]);
        assert!((l2_loss_forward(&p, &t).item() - 6.25).abs() < 1e-12);
    }

    #[test]
    fn l2_grad_is_scaled_residual() {
        let p = Tensor::new(vec![2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let t = Tensor::full(&[2, 2], 1.0f64);
        let mut dp = vec![0.0; 4];
        l2_loss_backward(&p, &t, 1.0, Some(&mut dp), None);
        assert_eq!(dp, vec![0.0, 0.5, 1.0, 1.5]);
    }

    #[test]
    fn kl_zero_at_standard_normal() {
        let mu = Tensor::zeros(&[3, 4]);
        let lv = Tensor::zeros(&[3, 4]);
        let kl = gaussian_kl_forward::<f64>(&mu, &lv);
        assert!(kl.data().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn kl_single_dim_known_value() {
        // mu = 1, lv = 0: 0.5 * (1 + 1 - 1 - 0) = 0.5
        let mu = Tensor::new(vec![1, 1], vec![1.0f64]).unwrap();
        let lv = Tensor::zeros(&[1, 1]);
        assert!((gaussian_kl_forward(&mu, &lv).data()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kl_matches_monte_carlo_single_dim() {
        // KL(q || p) estimated as E_q[log q(z) - log p(z)] with q = N(1, e^0.5).
        let mu = 1.0f64;
        let lv = 0.5f64;
        let var = lv.exp();
        let closed = 0.5 * (var + mu * mu - 1.0 - lv);
        let mut rng = Rng::new(99);
        let n = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let z = mu + var.sqrt() * rng.normal();
            let log_q = -0.5 * ((z - mu).powi(2) / var + lv + (2.0 * std::f64::consts::PI).ln());
            let log_p = -0.5 * (z * z + (2.0 * std::f64::consts::PI).ln());
            acc += log_q - log_p;
        }
        let mc = acc / n as f64;
        assert!((mc - closed).abs() < 1e-2, "mc {mc} closed {closed}");
    }

    #[test]
    fn reparameterize_collapses_to_mu_at_tiny_variance() {
        let mu = Tensor::new(vec![1, 3], vec![0.3f64, -0.7, 1.1]).unwrap();
        let lv = Tensor::full(&[1, 3], -30.0f64);
        let z = reparameterize_forward(&mu, &lv, &[5.0, -5.0, 5.0]);
        for (a, b) in z.data().iter().zip(mu.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn reparameterize_sample_statistics() {
        let mu = 0.5f64;
        let lv = (2.0f64).ln(); // variance 2
        let mut rng = Rng::new(31);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let z = mu + (lv / 2.0f64).exp() * rng.normal();
            sum += z;
            sumsq += z * z;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        assert!((mean - mu).abs() < 0.02);
        assert!((var - 2.0).abs() < 0.05);
    }
}
