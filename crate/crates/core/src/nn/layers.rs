//! Per-sample layer kernels. Inputs are in the storage type; weights arrive
//! pre-converted to `f64` and every sum accumulates in `f64`.

use super::Real;

/// Gathers the zero-padded 3x3 neighbourhood of `(y, x)` into `patch`,
/// laid out `[ky][kx][channel]` to match the weight layout.
#[inline]
fn gather_patch<T: Real>(
    input: &[T],
    height: usize,
    width: usize,
    channels: usize,
    y: usize,
    x: usize,
    patch: &mut [f64],
) {
    for ky in 0..3 {
        let iy = y as isize + ky as isize - 1;
        for kx in 0..3 {
            let ix = x as isize + kx as isize - 1;
            let dst = &mut patch[(ky * 3 + kx) * channels..(ky * 3 + kx + 1) * channels];
            if iy < 0 || ix < 0 || iy >= height as isize || ix >= width as isize {
                dst.fill(0.0);
            } else {
                let src = ((iy as usize * width) + ix as usize) * channels;
                for (d, s) in dst.iter_mut().zip(&input[src..src + channels]) {
                    *d = s.to_f64();
                }
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// 3x3, stride 1, pad 1 convolution. `weight` is `[out][3][3][in]`.
pub(crate) fn conv_forward<T: Real>(
    input: &[T],
    height: usize,
    width: usize,
    in_channels: usize,
    weight: &[f64],
    bias: &[f64],
    output: &mut [T],
) {
    let out_channels = bias.len();
    let k = 9 * in_channels;
    let mut patch = vec![0.0f64; k];
    for y in 0..height {
        for x in 0..width {
            gather_patch(input, height, width, in_channels, y, x, &mut patch);
            let out = &mut output[(y * width + x) * out_channels..(y * width + x + 1) * out_channels];
            for (oc, o) in out.iter_mut().enumerate() {
                *o = T::from_f64(bias[oc] + dot(&weight[oc * k..(oc + 1) * k], &patch));
            }
        }
    }
}

/// Accumulates weight and bias gradients and, when `input_grad` is given,
/// the gradient with respect to the input.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Real>(
    input: &[T],
    height: usize,
    width: usize,
    in_channels: usize,
    weight: &[f64],
    out_channels: usize,
    output_grad: &[f64],
    weight_grad: Option<(&mut [f64], &mut [f64])>,
    input_grad: Option<&mut [f64]>,
) {
    let k = 9 * in_channels;
    let mut patch = vec![0.0f64; k];
    let mut dpatch = vec![0.0f64; k];
    let (mut wg, mut bg) = match weight_grad {
        Some((w, b)) => (Some(w), Some(b)),
        None => (None, None),
    };
    let mut ig = input_grad;
    for y in 0..height {
        for x in 0..width {
            let g = &output_grad[(y * width + x) * out_channels..(y * width + x + 1) * out_channels];
            if let (Some(wg), Some(bg)) = (wg.as_deref_mut(), bg.as_deref_mut()) {
                gather_patch(input, height, width, in_channels, y, x, &mut patch);
                for (oc, &go) in g.iter().enumerate() {
                    if go == 0.0 {
                        continue;
                    }
                    bg[oc] += go;
                    for (w, p) in wg[oc * k..(oc + 1) * k].iter_mut().zip(&patch) {
                        *w += go * p;
                    }
                }
            }
            if let Some(ig) = ig.as_deref_mut() {
                dpatch.fill(0.0);
                for (oc, &go) in g.iter().enumerate() {
                    if go == 0.0 {
                        continue;
                    }
                    for (d, w) in dpatch.iter_mut().zip(&weight[oc * k..(oc + 1) * k]) {
                        *d += go * w;
                    }
                }
                for ky in 0..3 {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= height as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = x as isize + kx as isize - 1;
                        if ix < 0 || ix >= width as isize {
                            continue;
                        }
                        let dst = ((iy as usize * width) + ix as usize) * in_channels;
                        let src = (ky * 3 + kx) * in_channels;
                        for c in 0..in_channels {
                            ig[dst + c] += dpatch[src + c];
                        }
                    }
                }
            }
        }
    }
}

/// 2x2, stride 2 max pooling. Records the flat input index of each maximum;
/// ties go to the first element in row-major window order.
pub(crate) fn maxpool_forward<T: Real>(
    input: &[T],
    height: usize,
    width: usize,
    channels: usize,
    output: &mut [T],
    argmax: &mut [u32],
) {
    let (oh, ow) = (height / 2, width / 2);
    for y in 0..oh {
        for x in 0..ow {
            for c in 0..channels {
                let mut best_idx = ((2 * y) * width + 2 * x) * channels + c;
                let mut best = input[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = ((2 * y + dy) * width + 2 * x + dx) * channels + c;
                    if input[idx] > best {
                        best = input[idx];
                        best_idx = idx;
                    }
                }
                let o = (y * ow + x) * channels + c;
                output[o] = best;
                argmax[o] = best_idx as u32;
            }
        }
    }
}

pub(crate) fn maxpool_backward(output_grad: &[f64], argmax: &[u32], input_grad: &mut [f64]) {
    for (g, &idx) in output_grad.iter().zip(argmax) {
        input_grad[idx as usize] += g;
    }
}

pub(crate) fn relu_forward<T: Real>(input: &[T], output: &mut [T]) {
    for (o, &v) in output.iter_mut().zip(input) {
        *o = if v > T::default() { v } else { T::default() };
    }
}

pub(crate) fn relu_backward<T: Real>(input: &[T], output_grad: &[f64], input_grad: &mut [f64]) {
    for ((ig, &g), &v) in input_grad.iter_mut().zip(output_grad).zip(input) {
        *ig = if v > T::default() { g } else { 0.0 };
    }
}

/// `out = W x + b` with `W` stored `[out][in]`.
pub(crate) fn dense_forward<T: Real>(input: &[T], weight: &[f64], bias: &[f64], output: &mut [T]) {
    let n_in = input.len();
    let x: Vec<f64> = input.iter().map(|v| v.to_f64()).collect();
    for (o, out) in output.iter_mut().enumerate() {
        *out = T::from_f64(bias[o] + dot(&weight[o * n_in..(o + 1) * n_in], &x));
    }
}

pub(crate) fn dense_backward<T: Real>(
    input: &[T],
    weight: &[f64],
    output_grad: &[f64],
    weight_grad: Option<(&mut [f64], &mut [f64])>,
    input_grad: Option<&mut [f64]>,
) {
    let n_in = input.len();
    if let Some((wg, bg)) = weight_grad {
        for (o, &g) in output_grad.iter().enumerate() {
            bg[o] += g;
            if g == 0.0 {
                continue;
            }
            for (w, x) in wg[o * n_in..(o + 1) * n_in].iter_mut().zip(input) {
                *w += g * x.to_f64();
            }
        }
    }
    if let Some(ig) = input_grad {
        for (o, &g) in output_grad.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            for (d, w) in ig.iter_mut().zip(&weight[o * n_in..(o + 1) * n_in]) {
                *d += g * w;
            }
        }
    }
}
