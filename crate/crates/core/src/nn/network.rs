use rayon::prelude::*;

use super::layers;
use super::{Layer, NetworkSpec, NnError, ParameterSet, Real, Shape, Tensor};

/// Everything `backward` needs from the matching `forward` call.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    /// Input activation of every layer.
    inputs: Vec<Tensor<T>>,
    /// Max-pool winner indices, per layer.
    argmax: Vec<Option<Vec<u32>>>,
    /// Weights and biases widened to f64, per layer.
    weights: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Parameter gradients, one entry per spec layer. Entries are `None` for
/// parameterless and frozen layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Option<LayerGrad>>,
}

impl Gradients {
    pub fn zeros_like<T: Real>(spec: &NetworkSpec, params: &ParameterSet<T>) -> Self {
        Self {
            layers: spec
                .layers
                .iter()
                .zip(&params.layers)
                .map(|(l, p)| match p {
                    Some(p) if l.trainable => Some(LayerGrad {
                        weight: vec![0.0; p.weight.len()],
                        bias: vec![0.0; p.bias.len()],
                    }),
                    _ => None,
                })
                .collect(),
        }
    }

    /// Adds `other` into `self`, entry by entry.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if let (Some(a), Some(b)) = (a, b) {
                a.weight.iter_mut().zip(&b.weight).for_each(|(x, y)| *x += y);
                a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .flatten()
            .all(|g| g.weight.iter().chain(&g.bias).all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flatten()
            .flat_map(|g| g.weight.iter().chain(&g.bias))
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

fn spatial(shape: Shape) -> (usize, usize, usize) {
    match shape {
        Shape::Spatial {
            height,
            width,
            channels,
        } => (height, width, channels),
        Shape::Flat(n) => (1, 1, n),
    }
}

/// Runs the network on `batch`. Outputs are unbounded (linear head).
pub fn forward<T: Real>(
    spec: &NetworkSpec,
    params: &ParameterSet<T>,
    batch: &Tensor<T>,
) -> Result<(Tensor<T>, ForwardCache<T>), NnError> {
    if batch.shape != spec.input_shape() || batch.data.len() != batch.batch * batch.shape.len() {
        return Err(NnError::InputShape {
            expected: format!("N x {}", spec.input_shape()),
            actual: format!("{} x {} ({} values)", batch.batch, batch.shape, batch.data.len()),
        });
    }
    params.check_against(spec)?;
    let shapes = spec.shapes()?;
    let n = batch.batch;

    let mut cache = ForwardCache {
        inputs: Vec::with_capacity(spec.layers.len()),
        argmax: Vec::with_capacity(spec.layers.len()),
        weights: Vec::with_capacity(spec.layers.len()),
    };
    let mut current = batch.clone();
    for (i, l) in spec.layers.iter().enumerate() {
        let in_shape = shapes[i];
        let out_shape = shapes[i + 1];
        let (in_len, out_len) = (in_shape.len(), out_shape.len());
        let mut out = Tensor::zeros(n, out_shape);
        let mut argmax = None;
        let weights = params.layers[i].as_ref().map(|p| (p.weight_f64(), p.bias_f64()));
        match l.layer {
            Layer::Conv2d { .. } => {
                let (h, w, c) = spatial(in_shape);
                let (wt, b) = weights.as_ref().expect("checked parameters");
                out.data
                    .par_chunks_mut(out_len)
                    .zip(current.data.par_chunks(in_len))
                    .for_each(|(o, x)| layers::conv_forward(x, h, w, c, wt, b, o));
            }
            Layer::Relu => layers::relu_forward(&current.data, &mut out.data),
            Layer::MaxPool => {
                let (h, w, c) = spatial(in_shape);
                let mut idx = vec![0u32; n * out_len];
                out.data
                    .par_chunks_mut(out_len)
                    .zip(idx.par_chunks_mut(out_len))
                    .zip(current.data.par_chunks(in_len))
                    .for_each(|((o, a), x)| layers::maxpool_forward(x, h, w, c, o, a));
                argmax = Some(idx);
            }
            Layer::Flatten => out.data.copy_from_slice(&current.data),
            Layer::Dense { .. } | Layer::LinearOutput { .. } => {
                let (wt, b) = weights.as_ref().expect("checked parameters");
                out.data
                    .par_chunks_mut(out_len)
                    .zip(current.data.par_chunks(in_len))
                    .for_each(|(o, x)| layers::dense_forward(x, wt, b, o));
            }
        }
        cache.inputs.push(std::mem::replace(&mut current, out));
        cache.argmax.push(argmax);
        cache.weights.push(weights);
    }
    Ok((current, cache))
}

/// Backpropagates `output_grad` (`N x 2`, dL/d output) to parameter
/// gradients. Frozen layers pass gradients through but get no entry; nothing
/// is propagated below the lowest trainable layer.
pub fn backward<T: Real>(
    spec: &NetworkSpec,
    params: &ParameterSet<T>,
    cache: &ForwardCache<T>,
    output_grad: &[f64],
) -> Gradients {
    let shapes = spec.shapes().expect("spec validated in forward");
    let n = cache.inputs.first().map_or(0, |t| t.batch);
    assert_eq!(
        output_grad.len(),
        n * shapes.last().map_or(0, Shape::len),
        "output gradient shape"
    );

    let mut grads = Gradients::zeros_like(spec, params);
    let lowest = spec.layers.iter().position(|l| l.trainable && l.layer.has_parameters());
    let Some(lowest) = lowest else {
        return grads;
    };

    let mut upstream = output_grad.to_vec();
    for i in (lowest..spec.layers.len()).rev() {
        let l = spec.layers[i];
        let in_shape = shapes[i];
        let (in_len, out_len) = (in_shape.len(), shapes[i + 1].len());
        let input = &cache.inputs[i].data;
        let need_input_grad = i > lowest;
        let mut down = if need_input_grad {
            vec![0.0f64; n * in_len]
        } else {
            Vec::new()
        };
        match l.layer {
            Layer::Conv2d { out_channels } => {
                let (h, w, c) = spatial(in_shape);
                let (wt, _) = cache.weights[i].as_ref().expect("cached weights");
                let mut grad = grads.layers[i].take();
                for s in 0..n {
                    layers::conv_backward(
                        &input[s * in_len..(s + 1) * in_len],
                        h,
                        w,
                        c,
                        wt,
                        out_channels,
                        &upstream[s * out_len..(s + 1) * out_len],
                        grad.as_mut().map(|g| (&mut g.weight[..], &mut g.bias[..])),
                        need_input_grad.then(|| &mut down[s * in_len..(s + 1) * in_len]),
                    );
                }
                grads.layers[i] = grad;
            }
            Layer::Dense { .. } | Layer::LinearOutput { .. } => {
                let (wt, _) = cache.weights[i].as_ref().expect("cached weights");
                let mut grad = grads.layers[i].take();
                for s in 0..n {
                    layers::dense_backward(
                        &input[s * in_len..(s + 1) * in_len],
                        wt,
                        &upstream[s * out_len..(s + 1) * out_len],
                        grad.as_mut().map(|g| (&mut g.weight[..], &mut g.bias[..])),
                        need_input_grad.then(|| &mut down[s * in_len..(s + 1) * in_len]),
                    );
                }
                grads.layers[i] = grad;
            }
            Layer::Relu => {
                if need_input_grad {
                    layers::relu_backward(input, &upstream, &mut down);
                }
            }
            Layer::MaxPool => {
                if need_input_grad {
                    let idx = cache.argmax[i].as_ref().expect("cached argmax");
                    for s in 0..n {
                        layers::maxpool_backward(
                            &upstream[s * out_len..(s + 1) * out_len],
                            &idx[s * out_len..(s + 1) * out_len],
                            &mut down[s * in_len..(s + 1) * in_len],
                        );
                    }
                }
            }
            Layer::Flatten => {
                if need_input_grad {
                    down.copy_from_slice(&upstream);
                }
            }
        }
        upstream = down;
    }
    grads
}

/// Mean over all `2N` entries of `(pred - target)^2`, and its gradient
/// `2 (pred - target) / (2N)`.
pub fn mse_loss<T: Real>(pred: &Tensor<T>, target: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(pred.data.len(), target.len(), "prediction/target shape");
    let count = target.len().max(1) as f64;
    let residual: Vec<f64> = pred.data.iter().zip(target).map(|(p, t)| p.to_f64() - t).collect();
    let loss = residual.iter().map(|r| r * r).sum::<f64>() / count;
    let grad = residual.iter().map(|r| 2.0 * r / count).collect();
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::super::init_parameters;
    use super::*;

    fn tiny() -> NetworkSpec {
        NetworkSpec::parse(8, 8, "conv3 relu pool conv4 relu pool flatten dense5 relu out2").unwrap()
    }

    fn input<T: Real>(n: usize, seed: u64) -> Tensor<T> {
        let shape = tiny().input_shape();
        let data = (0..n * shape.len())
            .map(|i| T::from_f64(((i as f64 + 1.0) * 0.618 + seed as f64).fract()))
            .collect();
        Tensor::new(n, shape, data).unwrap()
    }

    #[test]
    fn zero_input_and_zero_bias_give_zero_output() {
        let spec = tiny();
        let params: ParameterSet<f32> = init_parameters(&spec, 1).unwrap();
        let x = Tensor::zeros(2, spec.input_shape());
        let (out, _) = forward(&spec, &params, &x).unwrap();
        assert_eq!(out.shape, Shape::Flat(2));
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicated_rows_give_duplicated_outputs() {
        let spec = tiny();
        let params: ParameterSet<f32> = init_parameters(&spec, 1).unwrap();
        let one = input::<f32>(1, 0);
        let mut data = one.data.clone();
        data.extend_from_slice(&one.data);
        let two = Tensor::new(2, one.shape, data).unwrap();
        let (a, _) = forward(&spec, &params, &one).unwrap();
        let (b, _) = forward(&spec, &params, &two).unwrap();
        assert_eq!(b.sample(0), a.sample(0));
        assert_eq!(b.sample(1), a.sample(0));
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let spec = NetworkSpec::reference(32);
        let params: ParameterSet<f32> = init_parameters(&spec, 4).unwrap();
        let x = Tensor::new(
            3,
            spec.input_shape(),
            (0..3 * 32 * 32 * 3)
                .map(|i| ((i * 7919) % 255) as f32 / 255.0)
                .collect(),
        )
        .unwrap();
        let (a, _) = forward(&spec, &params, &x).unwrap();
        let (b, _) = forward(&spec, &params, &x).unwrap();
        assert!(a.data.iter().zip(&b.data).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let spec = tiny();
        let params: ParameterSet<f32> = init_parameters(&spec, 1).unwrap();
        let x = Tensor::zeros(
            1,
            Shape::Spatial {
                height: 4,
                width: 8,
                channels: 3,
            },
        );
        assert!(matches!(forward(&spec, &params, &x), Err(NnError::InputShape { .. })));
    }

    #[test]
    fn mse_cases() {
        let pred = Tensor::new(2, Shape::Flat(2), vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let (loss, grad) = mse_loss(&pred, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));

        let n = 5;
        let pred = Tensor::new(n, Shape::Flat(2), vec![1.0f64; 2 * n]).unwrap();
        let (loss, grad) = mse_loss(&pred, &vec![0.0; 2 * n]);
        assert_eq!(loss, 1.0);
        assert!(grad.iter().all(|&g| (g - 2.0 / (2.0 * n as f64)).abs() < 1e-15));

        let pred = Tensor::new(1, Shape::Flat(2), vec![0.3f64, -0.2]).unwrap();
        let scaled = Tensor::new(1, Shape::Flat(2), vec![0.9f64, -0.6]).unwrap();
        let (l1, _) = mse_loss(&pred, &[0.0, 0.0]);
        let (l3, _) = mse_loss(&scaled, &[0.0, 0.0]);
        assert!((l3 - 9.0 * l1).abs() < 1e-12);
    }

    #[test]
    fn zero_output_grad_gives_zero_parameter_grads() {
        let spec = tiny();
        let params: ParameterSet<f64> = init_parameters(&spec, 1).unwrap();
        let (_, cache) = forward(&spec, &params, &input(2, 0)).unwrap();
        let grads = backward(&spec, &params, &cache, &[0.0; 4]);
        assert_eq!(grads.max_abs(), 0.0);
        assert_eq!(grads.layers.iter().flatten().count(), 4);
    }

    #[test]
    fn frozen_layers_have_no_gradient_entry() {
        let spec = tiny().freeze_first(3);
        let params: ParameterSet<f64> = init_parameters(&spec, 1).unwrap();
        let (_, cache) = forward(&spec, &params, &input(1, 0)).unwrap();
        let grads = backward(&spec, &params, &cache, &[1.0, -1.0]);
        assert!(grads.layers[0].is_none());
        assert!(grads.layers[3].is_some());
        assert!(grads.layers[9].is_some());
    }
}
