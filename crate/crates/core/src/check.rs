//! Verification utilities: central finite-difference gradient checking,
//! naive reference implementations of the structured ops, and a Monte Carlo
//! estimator for the Gaussian KL term. Production code never calls these;
//! tests use them as independent oracles for the fast implementations.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{Tape, TensorId};
use crate::tensor::{Element, Tensor};

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Number of coordinates compared.
    pub checked: usize,
    /// Worst relative error across all compared coordinates.
    pub max_rel_err: f64,
    /// Human-readable location of the worst coordinate.
    pub worst: String,
}

/// Compares analytic gradients against central finite differences.
///
/// `build` must deterministically construct a scalar loss from the leaves it
/// is handed (same graph, same constants, same noise on every call — seed
/// any RNG inside the closure). Gradients are checked for every input
/// tensor; `coords_per_tensor` limits how many coordinates of each input are
/// probed (`None` probes all of them).
///
/// A coordinate where both the analytic and numeric values are below `atol`
/// counts as clean; elsewhere the relative difference (with an `atol` floor
/// in the denominator) feeds the report's `max_rel_err`, against which the
/// caller asserts its own tolerance.
pub fn check_gradients<E, F>(
    inputs: &[Tensor<E>],
    h: f64,
    atol: f64,
    coords_per_tensor: Option<usize>,
    build: F,
) -> Result<GradCheckReport>
where
    E: Element,
    F: Fn(&mut Tape<E>, &[TensorId]) -> Result<TensorId>,
{
    // Analytic pass.
    let mut tape: Tape<E> = Tape::new();
    let ids: Vec<TensorId> =
        inputs.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
    let loss = build(&mut tape, &ids)?;
    if tape.val(loss).numel() != 1 {
        return Err(Error::InvalidArgument {
            op: "check_gradients",
            detail: format!("loss must be scalar, got {:?}", tape.val(loss).shape()),
        });
    }
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| match tape.grad(id) {
            Some(g) => g.iter().map(|v| v.to_f64().unwrap()).collect(),
            None => vec![0.0; t.numel()],
        })
        .collect();

    // Loss as a plain function of the inputs, for probing.
    let eval = |probe: &[Tensor<E>]| -> Result<f64> {
        let mut tape: Tape<E> = Tape::new();
        let ids: Vec<TensorId> = probe.iter().map(|t| {
            let mut t = t.clone();
            t.requires_grad = false;
            tape.leaf(t)
        }).collect();
        let loss = build(&mut tape, &ids)?;
        Ok(tape.val(loss).item().to_f64().unwrap())
    };

    let mut probe: Vec<Tensor<E>> = inputs.to_vec();
    let mut checked = 0usize;
    let mut max_rel_err = 0.0f64;
    let mut worst = String::from("no coordinates checked");
    let mut coord_rng = Rng::new(0x5eed_c0de);
    for ti in 0..inputs.len() {
        let numel = inputs[ti].numel();
        let coords: Vec<usize> = match coords_per_tensor {
            Some(k) if k < numel => {
                (0..k).map(|_| coord_rng.below(numel)).collect()
            }
            _ => (0..numel).collect(),
        };
        for ci in coords {
            let orig = probe[ti].data()[ci];
            let step = E::from_f64(h).unwrap();
            probe[ti].data_mut()[ci] = orig + step;
            let up = eval(&probe)?;
            probe[ti].data_mut()[ci] = orig - step;
            let down = eval(&probe)?;
            probe[ti].data_mut()[ci] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = analytic[ti][ci];
            checked += 1;
            if an.abs() < atol && fd.abs() < atol {
                continue;
            }
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(atol);
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = format!(
                    "input {ti} coord {ci}: analytic {an:.6e} vs finite-diff {fd:.6e}"
                );
            }
        }
    }
    Ok(GradCheckReport { checked, max_rel_err, worst })
}

/// Direct-loop 2D convolution (correlation convention, zero padding).
/// Input `[B, Cin, H, W]`, kernel `[Cout, Cin, kh, kw]`.
pub fn naive_conv2d<E: Element>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    pad: usize,
    stride: usize,
) -> Tensor<E> {
    let (b, c_in, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let (c_out, kh, kw) = (kernel.dim(0), kernel.dim(2), kernel.dim(3));
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[b, c_out, ho, wo]);
    for bi in 0..b {
        for co in 0..c_out {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = E::zero();
                    for ci in 0..c_in {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let y = (oy * stride + ky) as isize - pad as isize;
                                let x = (ox * stride + kx) as isize - pad as isize;
                                if y < 0 || y >= h as isize || x < 0 || x >= w as isize {
                                    continue;
                                }
                                let iv = input.data()
                                    [((bi * c_in + ci) * h + y as usize) * w + x as usize];
                                let kv =
                                    kernel.data()[((co * c_in + ci) * kh + ky) * kw + kx];
                                acc = acc + iv * kv;
                            }
                        }
                    }
                    out.data_mut()[((bi * c_out + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

/// Direct-loop cross-convolution: per-(sample, channel) kernels, padding
/// `(k-1)/2`, output shape equal to the feature shape.
pub fn naive_cross_conv2d<E: Element>(features: &Tensor<E>, kernels: &Tensor<E>) -> Tensor<E> {
    let (b, c, h, w) = (features.dim(0), features.dim(1), features.dim(2), features.dim(3));
    let (kh, kw) = (kernels.dim(2), kernels.dim(3));
    let pad = (kh - 1) / 2;
    let mut out = Tensor::zeros(&[b, c, h, w]);
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..h {
                for ox in 0..w {
                    let mut acc = E::zero();
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let y = (oy + ky) as isize - pad as isize;
                            let x = (ox + kx) as isize - pad as isize;
                            if y < 0 || y >= h as isize || x < 0 || x >= w as isize {
                                continue;
                            }
                            let fv =
                                features.data()[((bi * c + ci) * h + y as usize) * w + x as usize];
                            let kv = kernels.data()[((bi * c + ci) * kh + ky) * kw + kx];
                            acc = acc + fv * kv;
                        }
                    }
                    out.data_mut()[((bi * c + ci) * h + oy) * w + ox] = acc;
                }
            }
        }
    }
    out
}

/// Direct-loop 2x2 max pooling with stride 2.
pub fn naive_max_pool2x2<E: Element>(input: &Tensor<E>) -> Tensor<E> {
    let (b, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[b, c, ho, wo]);
    for bc in 0..b * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = input.data()[bc * h * w + (2 * oy) * w + 2 * ox];
                for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                    let v = input.data()[bc * h * w + (2 * oy + dy) * w + 2 * ox + dx];
                    if v > best {
                        best = v;
                    }
                }
                out.data_mut()[bc * ho * wo + oy * wo + ox] = best;
            }
        }
    }
    out
}

/// Monte Carlo estimate of `KL(N(mu, diag(exp(log_var))) || N(0, I))` for a
/// single latent row, with its standard error: draws `z ~ q` and averages
/// `log q(z) - log p(z)`. Used to validate the closed-form KL.
pub fn mc_gaussian_kl(mu: &[f64], log_var: &[f64], samples: usize, rng: &mut Rng) -> (f64, f64) {
    assert_eq!(mu.len(), log_var.len());
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for _ in 0..samples {
        let mut term = 0.0;
        for (&m, &lv) in mu.iter().zip(log_var) {
            let std = (lv / 2.0).exp();
            let z = m + std * rng.normal();
            // log q - log p; the 2*pi normalizers cancel.
            let log_q = -0.5 * (((z - m) / std).powi(2) + lv);
            let log_p = -0.5 * z * z;
            term += log_q - log_p;
        }
        sum += term;
        sumsq += term * term;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = (sumsq / n - mean * mean).max(0.0);
    (mean, (var / n).sqrt())
}
