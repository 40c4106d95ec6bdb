//! A small plain CNN classifier.
//!
//! Each convolutional block is `conv 3x3 (same padding) -> ReLU -> 2x2 max-pool`
//! (the pool is skipped once the feature map is smaller than 2x2). The conv
//! stack is flattened into one hidden dense layer with ReLU and a final dense
//! classifier producing logits. There are no normalisation layers.

mod backprop;
pub(crate) mod ops;
pub mod persist;
mod train;

pub use backprop::{
    accuracy, cross_entropy, forward, grad_wrt_input, grad_wrt_params, loss_and_grads,
    per_sample_cross_entropy, predict, BackpropOutput, Gradients, LayerGrad, Reduction, INPUT_CENTER,
};
pub use train::{sgd_train, EpochLog, Sgd, TrainConfig, Trainable};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{Scalar, Tensor};

/// Layer widths for [`build_model_with`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub hidden: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            conv_channels: vec![8, 16, 32, 32],
            kernel: 3,
            hidden: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub out_filters: usize,
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    /// Position among all parameterised layers.
    pub index_in_model: usize,
    /// Whether a 2x2 max-pool follows the ReLU.
    pub pool: bool,
}

impl ConvLayerSpec {
    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_filters, self.in_channels, self.kernel_h, self.kernel_w]
    }

    /// Weights per output filter.
    pub fn filter_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseLayerSpec {
    pub out_features: usize,
    pub in_features: usize,
    pub index_in_model: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv(ConvLayerSpec),
    Dense(DenseLayerSpec),
}

impl LayerSpec {
    pub fn weight_shape(&self) -> Vec<usize> {
        match self {
            LayerSpec::Conv(c) => c.weight_shape().to_vec(),
            LayerSpec::Dense(d) => vec![d.out_features, d.in_features],
        }
    }

    pub fn fan_in(&self) -> usize {
        match self {
            LayerSpec::Conv(c) => c.filter_len(),
            LayerSpec::Dense(d) => d.in_features,
        }
    }

    pub fn outputs(&self) -> usize {
        match self {
            LayerSpec::Conv(c) => c.out_filters,
            LayerSpec::Dense(d) => d.out_features,
        }
    }
}

/// Distribution weights are drawn from at build time; re-used by filter resets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum InitScheme {
    /// `U(-bound, bound)` with `bound = sqrt(6 / fan_in)`.
    FanInUniform { fan_in: usize, bound: f64 },
}

impl InitScheme {
    pub fn fan_in_uniform(fan_in: usize) -> Self {
        InitScheme::FanInUniform {
            fan_in,
            bound: (6.0 / fan_in as f64).sqrt(),
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        match *self {
            InitScheme::FanInUniform { bound, .. } => (rng.random::<f64>() * 2.0 - 1.0) * bound,
        }
    }

    pub fn mean(&self) -> f64 {
        0.0
    }

    pub fn std(&self) -> f64 {
        match *self {
            InitScheme::FanInUniform { bound, .. } => bound / 3f64.sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer<S: Scalar = f32> {
    pub spec: LayerSpec,
    pub init: InitScheme,
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> Layer<S> {
    /// Stable identifier, e.g. `conv0` or `dense1`.
    pub fn id(&self, kind_index: usize) -> String {
        match self.spec {
            LayerSpec::Conv(_) => format!("conv{kind_index}"),
            LayerSpec::Dense(_) => format!("dense{kind_index}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState<S: Scalar = f32> {
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub init_seed: u64,
    pub layers: Vec<Layer<S>>,
}

/// Builds the default architecture. See [`build_model_with`].
pub fn build_model(num_classes: usize, image_shape: [usize; 3], init_seed: u64) -> Result<ModelState> {
    build_model_with(&ArchConfig::default(), num_classes, image_shape, init_seed)
}

pub fn build_model_with(
    arch: &ArchConfig,
    num_classes: usize,
    image_shape: [usize; 3],
    init_seed: u64,
) -> Result<ModelState> {
    let [c, h, w] = image_shape;
    if num_classes < 2 {
        return Err(Error::config(format!("need at least 2 classes, got {num_classes}")));
    }
    if c == 0 || h < 8 || w < 8 {
        return Err(Error::config(format!(
            "image shape must have >= 1 channel and be at least 8x8, got {image_shape:?}"
        )));
    }
    if arch.conv_channels.len() < 3 {
        return Err(Error::config("architecture needs at least 3 conv layers"));
    }
    if arch.conv_channels.iter().any(|&f| f < 2) || arch.hidden == 0 {
        return Err(Error::config("every conv layer needs >= 2 filters and hidden >= 1"));
    }
    if arch.kernel == 0 || arch.kernel % 2 == 0 {
        return Err(Error::config("kernel size must be odd"));
    }

    let mut specs = Vec::new();
    let (mut ch, mut hh, mut ww) = (c, h, w);
    for &f in &arch.conv_channels {
        let pool = hh >= 2 && ww >= 2;
        specs.push(LayerSpec::Conv(ConvLayerSpec {
            out_filters: f,
            in_channels: ch,
            kernel_h: arch.kernel,
            kernel_w: arch.kernel,
            index_in_model: specs.len(),
            pool,
        }));
        ch = f;
        if pool {
            hh /= 2;
            ww /= 2;
        }
    }
    let flat = ch * hh * ww;
    specs.push(LayerSpec::Dense(DenseLayerSpec {
        out_features: arch.hidden,
        in_features: flat,
        index_in_model: specs.len(),
    }));
    specs.push(LayerSpec::Dense(DenseLayerSpec {
        out_features: num_classes,
        in_features: arch.hidden,
        index_in_model: specs.len(),
    }));

    let layers = specs
        .into_iter()
        .enumerate()
        .map(|(i, spec)| {
            let init = InitScheme::fan_in_uniform(spec.fan_in());
            let mut rng = seed::rng_for(init_seed, i as u64);
            let shape = spec.weight_shape();
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| init.sample(&mut rng) as f32).collect();
            Layer {
                weight: Tensor::new(shape, data).expect("shape product matches"),
                bias: Tensor::zeros(&[spec.outputs()]),
                spec,
                init,
            }
        })
        .collect();

    Ok(ModelState {
        input_shape: image_shape,
        num_classes,
        init_seed,
        layers,
    })
}

impl<S: Scalar> ModelState<S> {
    /// Indices into `layers` of the convolutional layers, with their specs.
    pub fn conv_layers(&self) -> impl Iterator<Item = (usize, &ConvLayerSpec)> {
        self.layers.iter().enumerate().filter_map(|(i, l)| match &l.spec {
            LayerSpec::Conv(c) => Some((i, c)),
            LayerSpec::Dense(_) => None,
        })
    }

    pub fn num_conv_layers(&self) -> usize {
        self.conv_layers().count()
    }

    /// Layer identifiers in model order (`conv0`, ..., `dense0`, `dense1`).
    pub fn layer_ids(&self) -> Vec<String> {
        let (mut nc, mut nd) = (0, 0);
        self.layers
            .iter()
            .map(|l| match l.spec {
                LayerSpec::Conv(_) => {
                    nc += 1;
                    l.id(nc - 1)
                }
                LayerSpec::Dense(_) => {
                    nd += 1;
                    l.id(nd - 1)
                }
            })
            .collect()
    }

    /// Architecture this model was built from.
    pub fn arch(&self) -> ArchConfig {
        let conv_channels: Vec<usize> = self.conv_layers().map(|(_, c)| c.out_filters).collect();
        let kernel = self.conv_layers().next().map(|(_, c)| c.kernel_h).unwrap_or(3);
        let hidden = self
            .layers
            .iter()
            .find_map(|l| match &l.spec {
                LayerSpec::Dense(d) => Some(d.out_features),
                LayerSpec::Conv(_) => None,
            })
            .unwrap_or(0);
        ArchConfig {
            conv_channels,
            kernel,
            hidden,
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn cast<T: Scalar>(&self) -> ModelState<T> {
        ModelState {
            input_shape: self.input_shape,
            num_classes: self.num_classes,
            init_seed: self.init_seed,
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    spec: l.spec.clone(),
                    init: l.init.clone(),
                    weight: l.weight.cast(),
                    bias: l.bias.cast(),
                })
                .collect(),
        }
    }

    /// SHA-256 over all parameters in layer order.
    pub fn checksum(&self) -> String {
        let mut bytes = Vec::with_capacity(self.num_parameters() * 4);
        for l in &self.layers {
            for t in [&l.weight, &l.bias] {
                for &v in t.data() {
                    v.extend_le_bytes(&mut bytes);
                }
            }
        }
        crate::checksum::sha256_hex(&bytes)
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.is_finite() && l.bias.is_finite())
    }
}
