use crate::tensor::{Element, Tensor};

/// 2x2 max pooling with stride 2 over `[B, C, H, W]` (H, W even). Returns
/// the pooled tensor and, per output element, the flat index of the winning
/// input element; ties go to the first element in row-major block order.
pub fn max_pool2x2_forward<E: Element>(input: &Tensor<E>) -> (Tensor<E>, Vec<u32>) {
    let (b, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[b, c, ho, wo]);
    let mut argmax = vec![0u32; out.numel()];
    let data = input.data();
    for bc in 0..b * c {
        let base = bc * h * w;
        let obase = bc * ho * wo;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best_idx = base + (2 * oy) * w + 2 * ox;
                let mut best = data[best_idx];
                for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if data[idx] > best {
                        best = data[idx];
                        best_idx = idx;
                    }
                }
                out.data_mut()[obase + oy * wo + ox] = best;
                argmax[obase + oy * wo + ox] = best_idx as u32;
            }
        }
    }
    (out, argmax)
}

/// Routes each output gradient to the input element that won the max.
pub fn max_pool2x2_backward<E: Element>(argmax: &[u32], grad_out: &[E], dinput: &mut [E]) {
    for (g, &idx) in grad_out.iter().zip(argmax) {
        let slot = &mut dinput[idx as usize];
        *slot = *slot + *g;
    }
}

/// Nearest-neighbor upsampling by an integer factor: every input pixel is
/// replicated into an `f x f` block.
pub fn upsample_nearest_forward<E: Element>(input: &Tensor<E>, factor: usize) -> Tensor<E> {
    let (b, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let (ho, wo) = (h * factor, w * factor);
    let mut out = Tensor::zeros(&[b, c, ho, wo]);
    for bc in 0..b * c {
        let src = &input.data()[bc * h * w..(bc + 1) * h * w];
        let dst = &mut out.data_mut()[bc * ho * wo..(bc + 1) * ho * wo];
        for oy in 0..ho {
            let sy = oy / factor;
            for ox in 0..wo {
                dst[oy * wo + ox] = src[sy * w + ox / factor];
            }
        }
    }
    out
}

/// Each input pixel's gradient is the sum over its replicated block.
pub fn upsample_nearest_backward<E: Element>(
    shape_in: &[usize],
    factor: usize,
    grad_out: &[E],
    dinput: &mut [E],
) {
    let (b, c, h, w) = (shape_in[0], shape_in[1], shape_in[2], shape_in[3]);
    let (ho, wo) = (h * factor, w * factor);
    for bc in 0..b * c {
        let g = &grad_out[bc * ho * wo..(bc + 1) * ho * wo];
        let di = &mut dinput[bc * h * w..(bc + 1) * h * w];
        for oy in 0..ho {
            let sy = oy / factor;
            for ox in 0..wo {
                let slot = &mut di[sy * w + ox / factor];
                *slot = *slot + g[oy * wo + ox];
            }
        }
    }
}

/// Downscaling by an integer factor, nearest-neighbor convention: each output
/// pixel copies the top-left pixel of its `f x f` source block.
pub fn downscale_nearest_forward<E: Element>(input: &Tensor<E>, factor: usize) -> Tensor<E> {
    let (b, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let (ho, wo) = (h / factor, w / factor);
    let mut out = Tensor::zeros(&[b, c, ho, wo]);
    for bc in 0..b * c {
        let src = &input.data()[bc * h * w..(bc + 1) * h * w];
        let dst = &mut out.data_mut()[bc * ho * wo..(bc + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                dst[oy * wo + ox] = src[oy * factor * w + ox * factor];
            }
        }
    }
    out
}

pub fn downscale_nearest_backward<E: Element>(
    shape_in: &[usize],
    factor: usize,
    grad_out: &[E],
    dinput: &mut [E],
) {
    let (b, c, h, w) = (shape_in[0], shape_in[1], shape_in[2], shape_in[3]);
    let (ho, wo) = (h / factor, w / factor);
    for bc in 0..b * c {
        let g = &grad_out[bc * ho * wo..(bc + 1) * ho * wo];
        let di = &mut dinput[bc * h * w..(bc + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let slot = &mut di[oy * factor * w + ox * factor];
                *slot = *slot + g[oy * wo + ox];
            }
        }
    }
}
