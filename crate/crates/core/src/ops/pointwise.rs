use crate::tensor::{Element, Tensor};

pub fn relu_forward<E: Element>(input: &Tensor<E>) -> Tensor<E> {
    let mut out = input.clone();
    for v in out.data_mut() {
        if *v < E::zero() {
            *v = E::zero();
        }
    }
    out
}

/// ReLU routes gradients only where the input was strictly positive; the
/// subgradient at 0 is taken to be 0.
pub fn relu_backward<E: Element>(input: &[E], grad_out: &[E], dinput: &mut [E]) {
    for ((d, &x), &g) in dinput.iter_mut().zip(input).zip(grad_out) {
        if x > E::zero() {
            *d = *d + g;
        }
    }
}

pub fn clamp_forward<E: Element>(input: &Tensor<E>, lo: E, hi: E) -> Tensor<E> {
    let mut out = input.clone();
    for v in out.data_mut() {
        *v = (*v).max(lo).min(hi);
    }
    out
}

/// Clamp passes gradients only strictly inside the interval; clipped values
/// get zero gradient.
pub fn clamp_backward<E: Element>(input: &[E], lo: E, hi: E, grad_out: &[E], dinput: &mut [E]) {
    for ((d, &x), &g) in dinput.iter_mut().zip(input).zip(grad_out) {
        if x > lo && x < hi {
            *d = *d + g;
        }
    }
}

pub fn binary_forward<E: Element>(a: &Tensor<E>, b: &Tensor<E>, f: impl Fn(E, E) -> E) -> Tensor<E> {
    let mut out = a.clone();
    for (o, &bv) in out.data_mut().iter_mut().zip(b.data()) {
        *o = f(*o, bv);
    }
    out
}

pub fn scale_forward<E: Element>(input: &Tensor<E>, factor: E) -> Tensor<E> {
    let mut out = input.clone();
    for v in out.data_mut() {
        *v = *v * factor;
    }
    out
}

/// Adds a per-channel bias: rank-4 input `[B, C, H, W]` with bias `[C]`, or
/// rank-2 input `[B, D]` with bias `[D]`.
pub fn bias_add_forward<E: Element>(input: &Tensor<E>, bias: &[E]) -> Tensor<E> {
    let mut out = input.clone();
    match input.rank() {
        4 => {
            let (b, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
            let plane = h * w;
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * plane;
                    let bv = bias[ci];
                    for v in &mut out.data_mut()[base..base + plane] {
                        *v = *v + bv;
                    }
                }
            }
        }
        2 => {
            let d = input.dim(1);
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                *v = *v + bias[i % d];
            }
        }
        _ => unreachable!("bias_add validated to rank 2 or 4"),
    }
    out
}

/// Gradient of the bias is the reduction of the output gradient over every
/// axis the bias was broadcast across.
pub fn bias_add_backward<E: Element>(shape: &[usize], grad_out: &[E], dbias: &mut [E]) {
    match shape.len() {
        4 => {
            let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
            let plane = h * w;
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * plane;
                    let mut acc = E::zero();
                    for &g in &grad_out[base..base + plane] {
                        acc = acc + g;
                    }
                    dbias[ci] = dbias[ci] + acc;
                }
            }
        }
        2 => {
            let d = shape[1];
            for (i, &g) in grad_out.iter().enumerate() {
                dbias[i % d] = dbias[i % d] + g;
            }
        }
        _ => unreachable!(),
    }
}
