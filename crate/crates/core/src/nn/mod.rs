//! Layer stack, loss, optimizer and verification utilities.

mod checkpoint;
mod gradcheck;
mod loss;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded, TAG_INIT};
use crate::tensor::{
    self, activation, activation_backward, conv2d_forward, dense_forward, maxpool2_backward,
    maxpool2_forward, pad_to_even, pad_to_even_backward, Activation, ConvGeometry, Scalar, Tensor,
};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use gradcheck::{grad_check, grad_check_with, relative_error, standard_checks, GradCheckOptions, GradCheckReport, LossKind};
pub use loss::{accuracy, bce_loss, squared_error_loss, BCE_CLAMP};

pub use tensor::PoolIndices;

/// Index of the first layer that runs on the server in [`small_vgg`]
/// (the client keeps the first convolution and its ReLU).
pub const DEFAULT_CUT: usize = 2;

/// Default `[C, H, W]` input: one grayscale 64×64 channel.
pub const INPUT_SHAPE: [usize; 3] = [1, 64, 64];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv(ConvGeometry),
    MaxPool2,
    /// Zero-pads odd spatial dims on the bottom/right so a following pool is legal.
    PadToEven,
    Flatten,
    Dense { inputs: usize, outputs: usize },
    Relu,
    Sigmoid,
}

impl LayerSpec {
    pub fn is_parameterized(&self) -> bool {
        matches!(self, LayerSpec::Conv(_) | LayerSpec::Dense { .. })
    }

    /// Per-sample output shape for a per-sample input shape.
    fn output_shape(&self, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
        match *self {
            LayerSpec::Conv(g) => {
                let [c, h, w] = <[usize; 3]>::try_from(input)
                    .map_err(|_| format!("conv needs a [C, H, W] input, got {input:?}"))?;
                if c != g.in_channels {
                    return Err(format!("conv expects {} channels, input is {input:?}", g.in_channels));
                }
                let (oh, ow) = g.output_hw(h, w).map_err(|e| e.to_string())?;
                Ok(vec![g.out_channels, oh, ow])
            }
            LayerSpec::MaxPool2 => match input {
                [c, h, w] if h % 2 == 0 && w % 2 == 0 => Ok(vec![*c, h / 2, w / 2]),
                _ => Err(format!("maxpool2 needs [C, even H, even W], got {input:?}")),
            },
            LayerSpec::PadToEven => match input {
                [c, h, w] => Ok(vec![*c, h + h % 2, w + w % 2]),
                _ => Err(format!("pad-to-even needs [C, H, W], got {input:?}")),
            },
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Dense { inputs, outputs } => match input {
                [d] if *d == inputs => Ok(vec![outputs]),
                _ => Err(format!("dense expects [{inputs}], got {input:?}")),
            },
            LayerSpec::Relu | LayerSpec::Sigmoid => Ok(input.to_vec()),
        }
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Conv(g) => vec![g.kernel_shape().to_vec(), vec![g.out_channels]],
            LayerSpec::Dense { inputs, outputs } => vec![vec![inputs, outputs], vec![outputs]],
            _ => Vec::new(),
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Conv(g) => g.in_channels * g.kernel_h * g.kernel_w,
            LayerSpec::Dense { inputs, .. } => inputs,
            _ => 0,
        }
    }
}

/// The fixed VGG-style stand-in architecture for a `[1, 64, 64]` input:
///
/// ```text
/// conv 1→8 3×3 → relu | → maxpool2 → conv 8→16 3×3 → relu → pad-to-even
///   → maxpool2 → flatten → dense 3600→64 → relu → dense 64→1 → sigmoid
/// ```
///
/// `|` marks [`DEFAULT_CUT`].
pub fn small_vgg() -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv(ConvGeometry::simple(1, 8, 3)),
        LayerSpec::Relu,
        LayerSpec::MaxPool2,
        LayerSpec::Conv(ConvGeometry::simple(8, 16, 3)),
        LayerSpec::Relu,
        LayerSpec::PadToEven,
        LayerSpec::MaxPool2,
        LayerSpec::Flatten,
        LayerSpec::Dense { inputs: 16 * 15 * 15, outputs: 64 },
        LayerSpec::Relu,
        LayerSpec::Dense { inputs: 64, outputs: 1 },
        LayerSpec::Sigmoid,
    ]
}

/// Parameter initialization scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Weights `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, zero biases.
    HeUniform,
    /// Everything zero.
    Zeros,
    /// Square dense layers get the identity matrix, everything else is zero.
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T: Scalar = f32> {
    spec: LayerSpec,
    params: Vec<Tensor<T>>,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
}

impl<T: Scalar> Layer<T> {
    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }
}

/// An instantiated layer stack. Shapes here are per sample; batches add a
/// leading axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Scalar = f32> {
    input_shape: Vec<usize>,
    layers: Vec<Layer<T>>,
}

/// Per-layer state saved by [`Model::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T: Scalar = f32> {
    entries: Vec<CacheEntry<T>>,
}

impl<T: Scalar> ForwardCache<T> {
    pub fn batch_size(&self) -> usize {
        self.entries.first().map_or(0, |e| e.input.shape()[0])
    }
}

#[derive(Debug, Clone)]
struct CacheEntry<T: Scalar> {
    input: Tensor<T>,
    output: Option<Tensor<T>>,
    pool: Option<PoolIndices>,
}

/// Result of [`Model::backward`]: parameter gradients in [`Model::params`]
/// order, plus the input gradient when requested.
#[derive(Debug, Clone)]
pub struct Gradients<T: Scalar = f32> {
    pub params: Vec<Tensor<T>>,
    pub input: Option<Tensor<T>>,
}

/// Builds the full classifier. The chain must end in a single sigmoid unit.
pub fn build_model<T: Scalar>(specs: &[LayerSpec], input_shape: &[usize], seed: u64) -> Result<Model<T>> {
    Model::build(specs, input_shape, seed)
}

impl<T: Scalar> Model<T> {
    pub fn build(specs: &[LayerSpec], input_shape: &[usize], seed: u64) -> Result<Self> {
        let model = Self::build_with(specs, input_shape, seed, Init::HeUniform)?;
        let last = specs.len() - 1;
        if specs[last] != LayerSpec::Sigmoid || model.output_shape() != [1] {
            return Err(Error::Build {
                layer: last,
                detail: format!(
                    "classifier must end in a sigmoid over one unit, got {:?} with output {:?}",
                    specs[last],
                    model.output_shape()
                ),
            });
        }
        Ok(model)
    }

    /// Builds any shape-compatible stack without the classifier-head check.
    pub fn build_with(specs: &[LayerSpec], input_shape: &[usize], seed: u64, init: Init) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::Build {
                layer: 0,
                detail: "empty layer list".into(),
            });
        }
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::Build {
                layer: 0,
                detail: format!("invalid input shape {input_shape:?}"),
            });
        }
        let mut rng = seeded(derive_seed(seed, &[TAG_INIT]));
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let out = spec
                .output_shape(&shape)
                .map_err(|detail| Error::Build { layer: i, detail })?;
            let params = spec
                .param_shapes()
                .into_iter()
                .enumerate()
                .map(|(j, s)| init_param(spec, j == 0, &s, init, &mut rng))
                .collect();
            layers.push(Layer {
                spec: *spec,
                params,
                input_shape: shape,
                output_shape: out.clone(),
            });
            shape = out;
        }
        Ok(Model {
            input_shape: input_shape.to_vec(),
            layers,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.layers.last().expect("model has layers").output_shape
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    /// Every parameter tensor, layer by layer (weights before bias).
    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(|l| l.params.iter()).collect()
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.params().iter().map(|p| p.shape().to_vec()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|l| l.params.iter_mut())
    }

    /// Replaces all parameters; shapes must match exactly.
    pub fn set_params(&mut self, params: Vec<Tensor<T>>) -> Result<()> {
        let expected = self.param_shapes();
        let got: Vec<Vec<usize>> = params.iter().map(|p| p.shape().to_vec()).collect();
        if expected != got {
            return Err(Error::dim(
                "set_params",
                format!("expected parameter shapes {expected:?}, got {got:?}"),
            ));
        }
        for (slot, p) in self.params_mut().zip(params) {
            p.ensure_finite("set_params")?;
            *slot = p;
        }
        Ok(())
    }

    /// SHA-256 over every parameter value widened to f64, little-endian.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for p in self.params() {
            for &v in p.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            input_shape: self.input_shape.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    spec: l.spec,
                    params: l.params.iter().map(|p| p.cast()).collect(),
                    input_shape: l.input_shape.clone(),
                    output_shape: l.output_shape.clone(),
                })
                .collect(),
        }
    }

    /// Moves layers `[0, cut)` into a front model and `[cut, end)` into a back model.
    pub fn split_at(self, cut: usize) -> Result<(Model<T>, Model<T>)> {
        if cut == 0 || cut >= self.layers.len() {
            return Err(Error::Invalid(format!(
                "cut index {cut} must be in 1..{}",
                self.layers.len()
            )));
        }
        let mut front = self.layers;
        let back = front.split_off(cut);
        let back_input = back[0].input_shape.clone();
        Ok((
            Model {
                input_shape: self.input_shape,
                layers: front,
            },
            Model {
                input_shape: back_input,
                layers: back,
            },
        ))
    }

    /// Reassembles a front and back produced by [`Model::split_at`].
    pub fn join(front: Model<T>, back: Model<T>) -> Result<Model<T>> {
        if front.output_shape() != back.input_shape() {
            return Err(Error::dim(
                "join",
                format!("front output {:?} != back input {:?}", front.output_shape(), back.input_shape()),
            ));
        }
        let mut layers = front.layers;
        layers.extend(back.layers);
        Ok(Model {
            input_shape: front.input_shape,
            layers,
        })
    }

    fn check_batch(&self, batch: &Tensor<T>) -> Result<()> {
        if batch.ndim() != self.input_shape.len() + 1 || batch.shape()[1..] != self.input_shape[..] {
            return Err(Error::dim(
                "forward",
                format!("batch {:?} does not match input shape [N, {:?}]", batch.shape(), self.input_shape),
            ));
        }
        Ok(())
    }

    /// Forward pass without keeping activations.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_batch(batch)?;
        let mut x = batch.clone();
        for layer in &self.layers {
            x = layer_forward(layer, &x)?.0;
        }
        Ok(x)
    }

    pub fn forward(&self, batch: &Tensor<T>) -> Result<(Tensor<T>, ForwardCache<T>)> {
        self.check_batch(batch)?;
        let mut entries = Vec::with_capacity(self.layers.len());
        let mut x = batch.clone();
        for layer in &self.layers {
            let (y, pool) = layer_forward(layer, &x)?;
            let output = (layer.spec == LayerSpec::Sigmoid).then(|| y.clone());
            entries.push(CacheEntry { input: x, output, pool });
            x = y;
        }
        Ok((x, ForwardCache { entries }))
    }

    /// Backpropagates `grad_out` through every layer. The input gradient is
    /// computed only when `want_input` is set.
    pub fn backward(&self, cache: &ForwardCache<T>, grad_out: &Tensor<T>, want_input: bool) -> Result<Gradients<T>> {
        if cache.entries.len() != self.layers.len() {
            return Err(Error::Corrupt {
                op: "backward",
                detail: format!("cache has {} entries for {} layers", cache.entries.len(), self.layers.len()),
            });
        }
        let n = cache.batch_size();
        let mut expected = vec![n];
        expected.extend_from_slice(self.output_shape());
        if grad_out.shape() != expected {
            return Err(Error::dim(
                "backward",
                format!("gradient {:?} != output shape {expected:?}", grad_out.shape()),
            ));
        }
        let mut per_layer: Vec<Vec<Tensor<T>>> = vec![Vec::new(); self.layers.len()];
        let mut g = grad_out.clone();
        for (i, (layer, entry)) in self.layers.iter().zip(&cache.entries).enumerate().rev() {
            let need_input = want_input || i > 0;
            let (gi, pg) = layer_backward(layer, entry, &g, need_input)?;
            per_layer[i] = pg;
            match gi {
                Some(next) => g = next,
                None => break,
            }
        }
        Ok(Gradients {
            params: per_layer.into_iter().flatten().collect(),
            input: want_input.then_some(g),
        })
    }

    /// Applies one SGD step with the given gradients.
    pub fn apply_gradients(&mut self, grads: &[Tensor<T>], learning_rate: T) -> Result<()> {
        let mut params: Vec<&mut Tensor<T>> = self.params_mut().collect();
        sgd_step(&mut params, grads, learning_rate)
    }

    /// Forward, BCE, backward and one SGD step; returns the batch loss.
    pub fn train_step(&mut self, batch: &Tensor<T>, labels: &Tensor<T>, learning_rate: T) -> Result<f64> {
        let (loss, grads) = self.loss_and_gradients(batch, labels)?;
        self.apply_gradients(&grads, learning_rate)?;
        Ok(loss)
    }

    pub fn loss_and_gradients(&self, batch: &Tensor<T>, labels: &Tensor<T>) -> Result<(f64, Vec<Tensor<T>>)> {
        let (pred, cache) = self.forward(batch)?;
        let (loss, grad) = bce_loss(&pred, labels)?;
        Ok((loss, self.backward(&cache, &grad, false)?.params))
    }
}

fn init_param<T: Scalar>(spec: &LayerSpec, is_weight: bool, shape: &[usize], init: Init, rng: &mut crate::rng::Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data: Vec<T> = match (init, is_weight) {
        (Init::HeUniform, true) => {
            let limit = (6.0 / spec.fan_in() as f64).sqrt();
            (0..n).map(|_| T::from_f64(rng.gen_range(-limit..limit))).collect()
        }
        (Init::Identity, true) if matches!(spec, LayerSpec::Dense { inputs, outputs } if inputs == outputs) => {
            let k = shape[1];
            (0..n).map(|i| if i / k == i % k { T::one() } else { T::zero() }).collect()
        }
        _ => vec![T::zero(); n],
    };
    Tensor::from_parts(shape.to_vec(), data)
}

fn batch_shape(n: usize, per_sample: &[usize]) -> Vec<usize> {
    let mut s = vec![n];
    s.extend_from_slice(per_sample);
    s
}

fn layer_forward<T: Scalar>(layer: &Layer<T>, x: &Tensor<T>) -> Result<(Tensor<T>, Option<PoolIndices>)> {
    Ok(match layer.spec {
        LayerSpec::Conv(g) => (conv2d_forward(x, &layer.params[0], &layer.params[1], &g)?, None),
        LayerSpec::MaxPool2 => {
            let (y, idx) = maxpool2_forward(x)?;
            (y, Some(idx))
        }
        LayerSpec::PadToEven => (pad_to_even(x)?, None),
        LayerSpec::Flatten => {
            let n = x.shape()[0];
            (x.clone().reshape(batch_shape(n, &layer.output_shape))?, None)
        }
        LayerSpec::Dense { .. } => (dense_forward(x, &layer.params[0], &layer.params[1])?, None),
        LayerSpec::Relu => (activation(x, Activation::Relu)?, None),
        LayerSpec::Sigmoid => (activation(x, Activation::Sigmoid)?, None),
    })
}

type LayerGrads<T> = (Option<Tensor<T>>, Vec<Tensor<T>>);

fn layer_backward<T: Scalar>(
    layer: &Layer<T>,
    entry: &CacheEntry<T>,
    g: &Tensor<T>,
    need_input: bool,
) -> Result<LayerGrads<T>> {
    let x = &entry.input;
    Ok(match layer.spec {
        LayerSpec::Conv(geom) => {
            let (gi, gk, gb) = tensor::conv::conv2d_backward_impl(x, &layer.params[0], g, &geom, need_input)?;
            (gi, vec![gk, gb])
        }
        LayerSpec::Dense { .. } => {
            let (gi, gw, gb) = tensor::dense::dense_backward_impl(x, &layer.params[0], g, need_input)?;
            (gi, vec![gw, gb])
        }
        LayerSpec::MaxPool2 => {
            let idx = entry.pool.as_ref().ok_or_else(|| Error::Corrupt {
                op: "backward",
                detail: "missing pooling indices".into(),
            })?;
            (Some(maxpool2_backward(g, idx)?), Vec::new())
        }
        LayerSpec::PadToEven => {
            let s = x.shape();
            (Some(pad_to_even_backward(g, s[2], s[3])?), Vec::new())
        }
        LayerSpec::Flatten => (Some(g.clone().reshape(x.shape().to_vec())?), Vec::new()),
        LayerSpec::Relu => (Some(activation_backward(Activation::Relu, x, x, g)?), Vec::new()),
        LayerSpec::Sigmoid => {
            let y = entry.output.as_ref().ok_or_else(|| Error::Corrupt {
                op: "backward",
                detail: "missing sigmoid output".into(),
            })?;
            (Some(activation_backward(Activation::Sigmoid, x, y, g)?), Vec::new())
        }
    })
}

/// `p ← p − lr·g` for every parameter.
pub fn sgd_step<T: Scalar>(params: &mut [&mut Tensor<T>], grads: &[Tensor<T>], learning_rate: T) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::dim(
            "sgd_step",
            format!("{} parameters but {} gradients", params.len(), grads.len()),
        ));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::dim(
                "sgd_step",
                format!("parameter {:?} vs gradient {:?}", p.shape(), g.shape()),
            ));
        }
        g.ensure_finite("sgd_step")?;
    }
    for (p, g) in params.iter_mut().zip(grads) {
        for (v, &d) in p.data_mut().iter_mut().zip(g.data()) {
            *v -= learning_rate * d;
        }
    }
    Ok(())
}

/// Training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 32,
            learning_rate: 0.05,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be a positive finite number"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::testutil::random;

    fn vgg(seed: u64) -> Model<f32> {
        build_model(&small_vgg(), &INPUT_SHAPE, seed).unwrap()
    }

    #[test]
    fn small_vgg_shapes() {
        let m = vgg(42);
        let shapes: Vec<Vec<usize>> = m.layers().iter().map(|l| l.output_shape().to_vec()).collect();
        assert_eq!(
            shapes,
            vec![
                vec![8, 62, 62],
                vec![8, 62, 62],
                vec![8, 31, 31],
                vec![16, 29, 29],
                vec![16, 29, 29],
                vec![16, 30, 30],
                vec![16, 15, 15],
                vec![3600],
                vec![64],
                vec![64],
                vec![1],
                vec![1],
            ]
        );
        assert_eq!(m.param_count(), 8 * 9 + 8 + 16 * 72 + 16 + 3600 * 64 + 64 + 64 + 1);
    }

    #[test]
    fn build_is_deterministic() {
        assert_eq!(vgg(42), vgg(42));
        assert_ne!(vgg(42).digest(), vgg(43).digest());
    }

    #[test]
    fn he_uniform_bounds_and_zero_bias() {
        let m = vgg(1);
        let k = m.params()[0];
        let limit = (6.0f32 / 9.0).sqrt();
        assert!(k.data().iter().all(|v| v.abs() <= limit));
        assert!(m.params()[1].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn f64_build_is_cast_of_f32() {
        let a: Model<f64> = build_model(&small_vgg(), &INPUT_SHAPE, 5).unwrap();
        let b = vgg(5).cast::<f64>();
        for (x, y) in a.params().iter().zip(b.params()) {
            assert!(x.max_abs_diff(y).unwrap() < 1e-7);
        }
    }

    #[test]
    fn incompatible_chain_names_layer() {
        let specs = [
            LayerSpec::Conv(ConvGeometry::simple(1, 4, 3)),
            LayerSpec::Flatten,
            LayerSpec::Dense { inputs: 10, outputs: 1 },
            LayerSpec::Sigmoid,
        ];
        match build_model::<f32>(&specs, &[1, 8, 8], 0) {
            Err(Error::Build { layer, .. }) => assert_eq!(layer, 2),
            other => panic!("unexpected {other:?}"),
        }
        let odd = [LayerSpec::MaxPool2];
        assert!(matches!(Model::<f32>::build_with(&odd, &[1, 3, 3], 0, Init::Zeros), Err(Error::Build { layer: 0, .. })));
    }

    #[test]
    fn headless_chain_rejected_by_build() {
        let specs = [LayerSpec::Flatten, LayerSpec::Dense { inputs: 4, outputs: 1 }];
        assert!(build_model::<f32>(&specs, &[4], 0).is_err());
        assert!(Model::<f32>::build_with(&specs, &[4], 0, Init::HeUniform).is_ok());
    }

    #[test]
    fn identity_dense_is_identity() {
        let specs = [LayerSpec::Dense { inputs: 5, outputs: 5 }];
        let m = Model::<f32>::build_with(&specs, &[5], 0, Init::Identity).unwrap();
        let x = random::<f32>(&[3, 5], 2);
        assert_eq!(m.predict(&x).unwrap(), x);
    }

    #[test]
    fn zero_model_predicts_half() {
        let m = Model::<f32>::build_with(&small_vgg(), &INPUT_SHAPE, 0, Init::Zeros).unwrap();
        let x = random::<f32>(&[3, 1, 64, 64], 1);
        assert!(m.predict(&x).unwrap().data().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn batch_independent_predictions() {
        let m = vgg(3);
        let x = random::<f32>(&[4, 1, 64, 64], 4).map(|v| v.abs());
        let all = m.predict(&x).unwrap();
        for i in 0..4 {
            let one = Tensor::new(vec![1, 1, 64, 64], x.outer(i).to_vec()).unwrap();
            let p = m.predict(&one).unwrap();
            assert!((p.data()[0] - all.data()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn predictions_in_open_unit_interval() {
        let m = vgg(8);
        let (p, cache) = m.forward(&random::<f32>(&[5, 1, 64, 64], 9)).unwrap();
        assert_eq!(p.shape(), &[5, 1]);
        assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(cache.batch_size(), 5);
    }

    #[test]
    fn forward_rejects_wrong_shape() {
        assert!(vgg(1).predict(&Tensor::zeros(&[2, 1, 32, 32])).is_err());
    }

    #[test]
    fn split_and_join_round_trip() {
        let m = vgg(11);
        let (front, back) = m.clone().split_at(DEFAULT_CUT).unwrap();
        assert_eq!(front.output_shape(), &[8, 62, 62]);
        assert_eq!(back.input_shape(), &[8, 62, 62]);
        let joined = Model::join(front, back).unwrap();
        assert_eq!(joined, m);
        assert!(m.clone().split_at(0).is_err());
        assert!(m.split_at(12).is_err());
    }

    #[test]
    fn sgd_basics() {
        let mut p = Tensor::<f32>::zeros(&[2]);
        sgd_step(&mut [&mut p], &[Tensor::full(&[2], 1.0)], 1.0).unwrap();
        assert_eq!(p.data(), &[-1.0, -1.0]);

        let before = random::<f32>(&[4], 1);
        let mut q = before.clone();
        sgd_step(&mut [&mut q], &[Tensor::zeros(&[4])], 0.3).unwrap();
        assert_eq!(q, before);

        assert!(sgd_step(&mut [&mut q], &[Tensor::zeros(&[3])], 0.3).is_err());
    }

    #[test]
    fn sgd_step_is_linear_in_learning_rate() {
        let p = random::<f64>(&[16], 3);
        let g = random::<f64>(&[16], 4);
        let lr = 0.05;
        let mut one = p.clone();
        sgd_step(&mut [&mut one], std::slice::from_ref(&g), lr).unwrap();
        let two: Vec<f64> = p.data().iter().zip(g.data()).map(|(&pv, &gv)| pv - 2.0 * (lr / 2.0) * gv).collect();
        for (a, b) in one.data().iter().zip(&two) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn sgd_reduces_quadratic() {
        // loss(p) = (p - 3)^2, grad = 2(p - 3)
        for lr in [0.1, 0.05, 0.01] {
            let mut p = Tensor::<f64>::full(&[1], 0.0);
            let loss = |v: f64| (v - 3.0).powi(2);
            let before = loss(p.data()[0]);
            let g = Tensor::full(&[1], 2.0 * (p.data()[0] - 3.0));
            sgd_step(&mut [&mut p], &[g], lr).unwrap();
            assert!(loss(p.data()[0]) < before);
        }
    }

    #[test]
    fn train_config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig { learning_rate: 0.0, ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "learning_rate"));
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
    }
}
