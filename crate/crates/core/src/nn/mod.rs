//! A small VGG-style convolutional regressor written from scratch.
//!
//! Layers are 3x3/stride-1/pad-1 convolutions, ReLU, 2x2/stride-2 max
//! pooling, flatten, fully connected layers and a final linear output layer.
//! Activations are NHWC. Storage is generic over [`Real`] (`f32` for
//! training and serving, `f64` for gradient checks); every dot product
//! accumulates in `f64`.

mod layers;
mod network;
mod params;

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

pub use network::{backward, forward, mse_loss, ForwardCache, Gradients, LayerGrad};
pub use params::{
    init_parameters, load_parameters, read_checkpoint, save_parameters, write_parameters, Checkpoint, LayerParams,
    ParameterSet, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("input shape mismatch: network expects {expected}, got {actual}")]
    InputShape { expected: String, actual: String },
    #[error("parameter shape mismatch at layer {layer} ({kind}): {detail}")]
    ParameterShape { layer: usize, kind: String, detail: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// Storage scalar for tensors and parameters.
pub trait Real: Copy + Send + Sync + PartialOrd + Default + fmt::Debug + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Conv2d { out_channels: usize },
    Relu,
    MaxPool,
    Flatten,
    Dense { out_features: usize },
    LinearOutput { outputs: usize },
}

impl Layer {
    pub fn has_parameters(&self) -> bool {
        matches!(
            self,
            Layer::Conv2d { .. } | Layer::Dense { .. } | Layer::LinearOutput { .. }
        )
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Layer::Conv2d { out_channels } => write!(f, "conv{out_channels}"),
            Layer::Relu => f.write_str("relu"),
            Layer::MaxPool => f.write_str("pool"),
            Layer::Flatten => f.write_str("flatten"),
            Layer::Dense { out_features } => write!(f, "dense{out_features}"),
            Layer::LinearOutput { outputs } => write!(f, "out{outputs}"),
        }
    }
}

impl FromStr for Layer {
    type Err = NnError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let count = |prefix: &str| -> Result<usize, NnError> {
            s[prefix.len()..]
                .parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| NnError::InvalidSpec(format!("bad layer token `{s}`")))
        };
        match s {
            "relu" => Ok(Layer::Relu),
            "pool" => Ok(Layer::MaxPool),
            "flatten" => Ok(Layer::Flatten),
            _ if s.starts_with("conv") => Ok(Layer::Conv2d {
                out_channels: count("conv")?,
            }),
            _ if s.starts_with("dense") => Ok(Layer::Dense {
                out_features: count("dense")?,
            }),
            _ if s.starts_with("out") => Ok(Layer::LinearOutput { outputs: count("out")? }),
            _ => Err(NnError::InvalidSpec(format!(
                "unknown layer `{s}` (expected convN, relu, pool, flatten, denseN or out2)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub layer: Layer,
    pub trainable: bool,
}

/// Per-sample activation shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Spatial {
        height: usize,
        width: usize,
        channels: usize,
    },
    Flat(usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Spatial {
                height,
                width,
                channels,
            } => height * width * channels,
            Shape::Flat(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Spatial {
                height,
                width,
                channels,
            } => write!(f, "{height}x{width}x{channels}"),
            Shape::Flat(n) => write!(f, "{n}"),
        }
    }
}

/// Batch of activations, `batch x shape`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub batch: usize,
    pub shape: Shape,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(batch: usize, shape: Shape, data: Vec<T>) -> Result<Self, NnError> {
        if data.len() != batch * shape.len() {
            return Err(NnError::InputShape {
                expected: format!("{batch} x {shape} = {} values", batch * shape.len()),
                actual: format!("{} values", data.len()),
            });
        }
        Ok(Self { batch, shape, data })
    }

    pub fn zeros(batch: usize, shape: Shape) -> Self {
        Self {
            batch,
            shape,
            data: vec![T::default(); batch * shape.len()],
        }
    }

    pub fn sample(&self, i: usize) -> &[T] {
        let n = self.shape.len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.to_f64().is_finite())
    }
}

/// Ordered layer list over a fixed `height x width x 3` input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub input_height: usize,
    pub input_width: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub const INPUT_CHANNELS: usize = 3;

    pub fn new(
        input_height: usize,
        input_width: usize,
        layers: impl IntoIterator<Item = Layer>,
    ) -> Result<Self, NnError> {
        let spec = Self {
            input_height,
            input_width,
            layers: layers
                .into_iter()
                .map(|layer| LayerSpec { layer, trainable: true })
                .collect(),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Parses a whitespace- or comma-separated layer list such as
    /// `conv8 relu pool flatten dense64 relu out2`.
    pub fn parse(input_height: usize, input_width: usize, layers: &str) -> Result<Self, NnError> {
        let layers = layers
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty())
            .map(str::parse)
            .collect::<Result<Vec<Layer>, _>>()?;
        Self::new(input_height, input_width, layers)
    }

    /// The desk-scale regressor:
    /// `conv8 pool conv16 pool conv32 pool conv32 pool flatten dense64 out2`
    /// with ReLU after every convolution and the hidden dense layer.
    pub fn reference(input_size: usize) -> Self {
        Self::parse(input_size, input_size, REFERENCE_LAYERS).expect("reference spec is valid")
    }

    /// VGG-16 with its last dense layer replaced by two linear outputs,
    /// on 224x224 input.
    pub fn vgg16() -> Self {
        let mut layers = Vec::new();
        for (channels, repeats) in [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)] {
            for _ in 0..repeats {
                layers.push(Layer::Conv2d { out_channels: channels });
                layers.push(Layer::Relu);
            }
            layers.push(Layer::MaxPool);
        }
        layers.push(Layer::Flatten);
        for _ in 0..2 {
            layers.push(Layer::Dense { out_features: 4096 });
            layers.push(Layer::Relu);
        }
        layers.push(Layer::LinearOutput { outputs: 2 });
        Self::new(224, 224, layers).expect("vgg16 spec is valid")
    }

    /// Marks the first `count` layers as frozen.
    pub fn freeze_first(mut self, count: usize) -> Self {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.trainable = i >= count;
        }
        self
    }

    pub fn frozen_count(&self) -> usize {
        self.layers.iter().take_while(|l| !l.trainable).count()
    }

    pub fn input_shape(&self) -> Shape {
        Shape::Spatial {
            height: self.input_height,
            width: self.input_width,
            channels: Self::INPUT_CHANNELS,
        }
    }

    pub fn layer_string(&self) -> String {
        self.layers
            .iter()
            .map(|l| l.layer.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Input shape of every layer followed by the output shape.
    pub fn shapes(&self) -> Result<Vec<Shape>, NnError> {
        let mut shapes = vec![self.input_shape()];
        let mut current = self.input_shape();
        for (i, l) in self.layers.iter().enumerate() {
            current = match (l.layer, current) {
                (Layer::Conv2d { out_channels }, Shape::Spatial { height, width, .. }) => Shape::Spatial {
                    height,
                    width,
                    channels: out_channels,
                },
                (Layer::Conv2d { .. }, Shape::Flat(_)) => {
                    return Err(NnError::InvalidSpec(format!("layer {i}: convolution after flatten")))
                }
                (
                    Layer::MaxPool,
                    Shape::Spatial {
                        height,
                        width,
                        channels,
                    },
                ) => {
                    if height < 2 || width < 2 {
                        return Err(NnError::InvalidSpec(format!(
                            "layer {i}: cannot pool a {height}x{width} map"
                        )));
                    }
                    Shape::Spatial {
                        height: height / 2,
                        width: width / 2,
                        channels,
                    }
                }
                (Layer::MaxPool, Shape::Flat(_)) => {
                    return Err(NnError::InvalidSpec(format!("layer {i}: pooling after flatten")))
                }
                (Layer::Relu, s) => s,
                (Layer::Flatten, s) => Shape::Flat(s.len()),
                (Layer::Dense { out_features }, _) => Shape::Flat(out_features),
                (Layer::LinearOutput { outputs }, _) => Shape::Flat(outputs),
            };
            shapes.push(current);
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.input_height == 0 || self.input_width == 0 {
            return Err(NnError::InvalidSpec("input size must be nonzero".into()));
        }
        match self.layers.last() {
            Some(LayerSpec {
                layer: Layer::LinearOutput { outputs: 2 },
                ..
            }) => {}
            _ => {
                return Err(NnError::InvalidSpec(
                    "last layer must be out2 (two linear outputs)".into(),
                ))
            }
        }
        if let Some(i) = self.layers[..self.layers.len() - 1]
            .iter()
            .position(|l| matches!(l.layer, Layer::LinearOutput { .. }))
        {
            return Err(NnError::InvalidSpec(format!(
                "layer {i}: linear output must be the last layer"
            )));
        }
        self.shapes().map(|_| ())
    }

    /// `(weight dims, bias len)` for a parameterised layer given its input.
    pub(crate) fn parameter_dims(layer: Layer, input: Shape) -> Option<(Vec<usize>, usize)> {
        match (layer, input) {
            (Layer::Conv2d { out_channels }, Shape::Spatial { channels, .. }) => {
                Some((vec![out_channels, 3, 3, channels], out_channels))
            }
            (Layer::Dense { out_features: out }, s) | (Layer::LinearOutput { outputs: out }, s) => {
                Some((vec![out, s.len()], out))
            }
            _ => None,
        }
    }
}

pub const REFERENCE_LAYERS: &str =
    "conv8 relu pool conv16 relu pool conv32 relu pool conv32 relu pool flatten dense64 relu out2";
