use crate::tensor::{Element, Tensor};

/// Output spatial size of a convolution along one axis, assuming the tape
/// already checked exact divisibility.
pub fn conv_out_len(input: usize, kernel: usize, pad: usize, stride: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Gathers one sample's receptive fields into a `[C*kh*kw, Ho*Wo]` row-major
/// matrix (zero padding outside the image).
#[allow(clippy::too_many_arguments)]
fn im2col<E: Element>(
    sample: &[E],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    stride: usize,
    ho: usize,
    wo: usize,
    cols: &mut [E],
) {
    debug_assert_eq!(sample.len(), c_in * h * w);
    debug_assert_eq!(cols.len(), c_in * kh * kw * ho * wo);
    let n = ho * wo;
    for c in 0..c_in {
        let plane = &sample[c * h * w..(c + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let row = &mut cols[((c * kh + i) * kw + j) * n..][..n];
                for oy in 0..ho {
                    let y = (oy * stride + i) as isize - pad as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if y < 0 || y >= h as isize {
                        dst.fill(E::zero());
                        continue;
                    }
                    let src = &plane[y as usize * w..(y as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let x = (ox * stride + j) as isize - pad as isize;
                        *d = if x < 0 || x >= w as isize { E::zero() } else { src[x as usize] };
                    }
                }
            }
        }
    }
}

/// Scatter-adds a `[C*kh*kw, Ho*Wo]` column-gradient matrix back onto one
/// sample's input gradient (the transpose of [`im2col`]).
#[allow(clippy::too_many_arguments)]
fn col2im_add<E: Element>(
    dcols: &[E],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    stride: usize,
    ho: usize,
    wo: usize,
    dsample: &mut [E],
) {
    let n = ho * wo;
    for c in 0..c_in {
        let dplane = &mut dsample[c * h * w..(c + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let row = &dcols[((c * kh + i) * kw + j) * n..][..n];
                for oy in 0..ho {
                    let y = (oy * stride + i) as isize - pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    let drow = &mut dplane[y as usize * w..(y as usize + 1) * w];
                    for ox in 0..wo {
                        let x = (ox * stride + j) as isize - pad as isize;
                        if x >= 0 && x < w as isize {
                            drow[x as usize] = drow[x as usize] + row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2D convolution (correlation convention: kernels are not flipped) with
/// zero padding. Input `[B, Cin, H, W]`, kernel `[Cout, Cin, kh, kw]`,
/// output `[B, Cout, Ho, Wo]`. Implemented as im2col plus one GEMM per
/// sample.
pub fn conv2d_forward<E: Element>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    pad: usize,
    stride: usize,
) -> Tensor<E> {
    let (b, c_in, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let (c_out, kh, kw) = (kernel.dim(0), kernel.dim(2), kernel.dim(3));
    let ho = conv_out_len(h, kh, pad, stride);
    let wo = conv_out_len(w, kw, pad, stride);
    let k = c_in * kh * kw;
    let n = ho * wo;
    let mut out = Tensor::zeros(&[b, c_out, ho, wo]);
    let mut cols = vec![E::zero(); k * n];
    for bi in 0..b {
        im2col(
            &input.data()[bi * c_in * h * w..(bi + 1) * c_in * h * w],
            c_in,
            h,
            w,
            kh,
            kw,
            pad,
            stride,
            ho,
            wo,
            &mut cols,
        );
        E::gemm(
            c_out,
            k,
            n,
            E::one(),
            kernel.data(),
            k as isize,
            1,
            &cols,
            n as isize,
            1,
            E::zero(),
            &mut out.data_mut()[bi * c_out * n..(bi + 1) * c_out * n],
            n as isize,
            1,
        );
    }
    out
}

/// Backward pass of [`conv2d_forward`]. Accumulates into `dinput` and
/// `dkernel` when provided; either may be `None` to skip that branch.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<E: Element>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    pad: usize,
    stride: usize,
    grad_out: &[E],
    mut dinput: Option<&mut [E]>,
    mut dkernel: Option<&mut [E]>,
) {
    if dinput.is_none() && dkernel.is_none() {
        return;
    }
    let (b, c_in, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let (c_out, kh, kw) = (kernel.dim(0), kernel.dim(2), kernel.dim(3));
    let ho = conv_out_len(h, kh, pad, stride);
    let wo = conv_out_len(w, kw, pad, stride);
    let k = c_in * kh * kw;
    let n = ho * wo;
    let mut cols = vec![E::zero(); k * n];
    let mut dcols = vec![E::zero(); k * n];
    let mut g_t = vec![E::zero(); c_out * n];
    for bi in 0..b {
        let g = &grad_out[bi * c_out * n..(bi + 1) * c_out * n];
        if dkernel.is_some() {
            im2col(
                &input.data()[bi * c_in * h * w..(bi + 1) * c_in * h * w],
                c_in,
                h,
                w,
                kh,
                kw,
                pad,
                stride,
                ho,
                wo,
                &mut cols,
            );
            // dW += g @ cols^T, computed as dW^T += cols @ g^T so both GEMM
            // operands stay row-major contiguous (a transposed B operand is
            // several times slower to pack). g^T is tiny; the transposed
            // output view costs nothing because C is only written, not
            // streamed.
            for co in 0..c_out {
                for ni in 0..n {
                    g_t[ni * c_out + co] = g[co * n + ni];
                }
            }
            E::gemm(
                k,
                n,
                c_out,
                E::one(),
                &cols,
                n as isize,
                1,
                &g_t,
                c_out as isize,
                1,
                E::one(),
                dkernel.as_deref_mut().unwrap(),
                1,
                k as isize,
            );
        }
        if let Some(di) = dinput.as_deref_mut() {
            // dcols = W^T @ g : [K, Cout] x [Cout, N]
            E::gemm(
                k,
                c_out,
                n,
                E::one(),
                kernel.data(),
                1,
                k as isize,
                g,
                n as isize,
                1,
                E::zero(),
                &mut dcols,
                n as isize,
                1,
            );
            col2im_add(
                &dcols,
                c_in,
                h,
                w,
                kh,
                kw,
                pad,
                stride,
                ho,
                wo,
                &mut di[bi * c_in * h * w..(bi + 1) * c_in * h * w],
            );
        }
    }
}

/// Cross-convolution: a depthwise convolution whose kernels are themselves
/// activations, one `kh x kw` kernel per (sample, channel). Features
/// `[B, C, H, W]`, kernels `[B, C, kh, kw]` with odd `kh == kw`; padding
/// `(kh-1)/2` preserves the spatial size. Channel `c` of sample `b` is
/// correlated with kernel `(b, c)`; nothing mixes across channels or
/// samples. Gradients flow to both operands.
pub fn cross_conv2d_forward<E: Element>(features: &Tensor<E>, kernels: &Tensor<E>) -> Tensor<E> {
    let (b, c, h, w) = (features.dim(0), features.dim(1), features.dim(2), features.dim(3));
    let (kh, kw) = (kernels.dim(2), kernels.dim(3));
    let pad = (kh - 1) / 2;
    let mut out = Tensor::zeros(&[b, c, h, w]);
    for bc in 0..b * c {
        let f = &features.data()[bc * h * w..(bc + 1) * h * w];
        let kn = &kernels.data()[bc * kh * kw..(bc + 1) * kh * kw];
        let o = &mut out.data_mut()[bc * h * w..(bc + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let kv = kn[i * kw + j];
                if kv == E::zero() {
                    continue;
                }
                // out[y][x] += f[y+i-pad][x+j-pad] * kv over in-bounds rows/cols
                let y_lo = pad.saturating_sub(i);
                let y_hi = (h + pad).saturating_sub(i).min(h);
                let x_lo = pad.saturating_sub(j);
                let x_hi = (w + pad).saturating_sub(j).min(w);
                if x_lo >= x_hi {
                    continue;
                }
                for y in y_lo..y_hi {
                    let sy = y + i - pad;
                    let src = &f[sy * w + (x_lo + j - pad)..sy * w + (x_hi + j - pad)];
                    let dst = &mut o[y * w + x_lo..y * w + x_hi];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d = *d + *s * kv;
                    }
                }
            }
        }
    }
    out
}

/// Backward pass of [`cross_conv2d_forward`], accumulating into `dfeatures`
/// and/or `dkernels`.
pub fn cross_conv2d_backward<E: Element>(
    features: &Tensor<E>,
    kernels: &Tensor<E>,
    grad_out: &[E],
    mut dfeatures: Option<&mut [E]>,
    mut dkernels: Option<&mut [E]>,
) {
    let (b, c, h, w) = (features.dim(0), features.dim(1), features.dim(2), features.dim(3));
    let (kh, kw) = (kernels.dim(2), kernels.dim(3));
    let pad = (kh - 1) / 2;
    for bc in 0..b * c {
        let f = &features.data()[bc * h * w..(bc + 1) * h * w];
        let kn = &kernels.data()[bc * kh * kw..(bc + 1) * kh * kw];
        let g = &grad_out[bc * h * w..(bc + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let y_lo = pad.saturating_sub(i);
                let y_hi = (h + pad).saturating_sub(i).min(h);
                let x_lo = pad.saturating_sub(j);
                let x_hi = (w + pad).saturating_sub(j).min(w);
                if x_lo >= x_hi {
                    continue;
                }
                if let Some(dk) = dkernels.as_deref_mut() {
                    // dK[i][j] = sum_{y,x} g[y][x] * f[y+i-pad][x+j-pad]
                    let mut acc = E::zero();
                    for y in y_lo..y_hi {
                        let sy = y + i - pad;
                        let grow = &g[y * w + x_lo..y * w + x_hi];
                        let frow = &f[sy * w + (x_lo + j - pad)..sy * w + (x_hi + j - pad)];
                        for (gv, fv) in grow.iter().zip(frow) {
                            acc = acc + *gv * *fv;
                        }
                    }
                    let slot = &mut dk[bc * kh * kw + i * kw + j];
                    *slot = *slot + acc;
                }
                if let Some(df) = dfeatures.as_deref_mut() {
                    // dF[y+i-pad][x+j-pad] += g[y][x] * K[i][j]
                    let kv = kn[i * kw + j];
                    if kv == E::zero() {
                        continue;
                    }
                    let dfs = &mut df[bc * h * w..(bc + 1) * h * w];
                    for y in y_lo..y_hi {
                        let sy = y + i - pad;
                        for x in x_lo..x_hi {
                            let sx = x + j - pad;
                            dfs[sy * w + sx] = dfs[sy * w + sx] + g[y * w + x] * kv;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{naive_conv2d, naive_cross_conv2d};
    use crate::rng::Rng;

    fn random_tensor(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.uniform(-1.0, 1.0))
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let input = Tensor::new(
            vec![1, 1, 3, 3],
            vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        )
        .unwrap();
        let kernel = Tensor::new(vec![1, 1, 1, 1], vec![1.0f32]).unwrap();
        let out = conv2d_forward(&input, &kernel, 0, 1);
        assert_eq!(out.shape(), &[1, 1, 3, 3]);
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn zero_kernel_gives_zero_output() {
        let mut rng = Rng::new(3);
        let input = random_tensor(&[2, 3, 6, 6], &mut rng);
        let kernel = Tensor::zeros(&[4, 3, 3, 3]);
        let out = conv2d_forward(&input, &kernel, 1, 1);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_naive_reference() {
        let mut rng = Rng::new(5);
        for &(pad, stride) in &[(0usize, 1usize), (2, 1), (1, 2), (2, 3)] {
            let input = random_tensor(&[2, 3, 9, 9], &mut rng);
            let kernel = random_tensor(&[4, 3, 3, 3], &mut rng);
            if (9 + 2 * pad - 3) % stride != 0 {
                continue;
            }
            let fast = conv2d_forward(&input, &kernel, pad, stride);
            let slow = naive_conv2d(&input, &kernel, pad, stride);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-10, "pad={pad} stride={stride}");
            }
        }
    }

    #[test]
    fn backward_matches_naive_via_dot_trick() {
        // <dL/dx, e> computed by the backward kernel must equal the forward
        // difference of <g, conv(x)> under x += e, exactly in the linear case.
        let mut rng = Rng::new(7);
        let input = random_tensor(&[1, 2, 5, 5], &mut rng);
        let kernel = random_tensor(&[3, 2, 3, 3], &mut rng);
        let g: Vec<f64> = (0..3 * 5 * 5).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let mut dinput = vec![0.0; input.numel()];
        let mut dkernel = vec![0.0; kernel.numel()];
        conv2d_backward(&input, &kernel, 1, 1, &g, Some(&mut dinput), Some(&mut dkernel));

        // Convolution is linear in both arguments, so directional derivatives
        // are exact: conv(x + e) - conv(x) = conv(e).
        let e_in = random_tensor(&[1, 2, 5, 5], &mut rng);
        let delta = conv2d_forward(&e_in, &kernel, 1, 1);
        let lhs: f64 = dinput.iter().zip(e_in.data()).map(|(d, e)| d * e).sum();
        let rhs: f64 = g.iter().zip(delta.data()).map(|(gv, dv)| gv * dv).sum();
        assert!((lhs - rhs).abs() < 1e-9, "dinput {lhs} vs {rhs}");

        let e_k = random_tensor(&[3, 2, 3, 3], &mut rng);
        let delta = conv2d_forward(&input, &e_k, 1, 1);
        let lhs: f64 = dkernel.iter().zip(e_k.data()).map(|(d, e)| d * e).sum();
        let rhs: f64 = g.iter().zip(delta.data()).map(|(gv, dv)| gv * dv).sum();
        assert!((lhs - rhs).abs() < 1e-9, "dkernel {lhs} vs {rhs}");
    }

    #[test]
    fn cross_conv_delta_kernel_is_identity() {
        let mut rng = Rng::new(9);
        let features = random_tensor(&[2, 3, 6, 6], &mut rng);
        // Kernel with a single 1 at the center acts as identity.
        let mut kdata = vec![0.0f64; 2 * 3 * 25];
        for bc in 0..6 {
            kdata[bc * 25 + 12] = 1.0;
        }
        let kernels = Tensor::new(vec![2, 3, 5, 5], kdata).unwrap();
        let out = cross_conv2d_forward(&features, &kernels);
        for (a, b) in out.data().iter().zip(features.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_conv_matches_naive() {
        let mut rng = Rng::new(11);
        let features = random_tensor(&[3, 4, 7, 7], &mut rng);
        let kernels = random_tensor(&[3, 4, 5, 5], &mut rng);
        let fast = cross_conv2d_forward(&features, &kernels);
        let slow = naive_cross_conv2d(&features, &kernels);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn cross_conv_zero_features_zero_everything() {
        let mut rng = Rng::new(13);
        let features = Tensor::zeros(&[2, 2, 4, 4]);
        let kernels = random_tensor(&[2, 2, 3, 3], &mut rng);
        let out = cross_conv2d_forward(&features, &kernels);
        assert!(out.data().iter().all(|&v| v == 0.0));
        // With zero features the kernel gradient must also vanish.
        let g = vec![1.0; out.numel()];
        let mut dk = vec![0.0; kernels.numel()];
        cross_conv2d_backward(&features, &kernels, &g, None, Some(&mut dk));
        assert!(dk.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_conv_is_per_sample_and_per_channel() {
        // Changing sample 1's kernels must not affect sample 0's output.
        let mut rng = Rng::new(15);
        let features = random_tensor(&[2, 2, 5, 5], &mut rng);
        let k1 = random_tensor(&[2, 2, 3, 3], &mut rng);
        let mut k2 = k1.clone();
        for v in &mut k2.data_mut()[2 * 9..] {
            *v += 1.0;
        }
        let o1 = cross_conv2d_forward(&features, &k1);
        let o2 = cross_conv2d_forward(&features, &k2);
        assert_eq!(&o1.data()[..50], &o2.data()[..50]);
        assert_ne!(&o1.data()[50..], &o2.data()[50..]);
    }
}
