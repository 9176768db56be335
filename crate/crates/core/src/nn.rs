//! Layers, architecture specs, and the trainable [`Model`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvGeom, Graph, Var};
use crate::error::{Error, Result};
use crate::sparsity::InitSnapshot;
use crate::tensor::Tensor;

/// Activation applied after a layer (and after its dendritic gate, if any).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    None,
    Relu,
    Kwta {
        k: usize,
    },
}

/// One entry of an [`ArchitectureSpec`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        out: usize,
        #[serde(default)]
        activation: Activation,
        /// Fraction of weights kept by a fixed random connectivity mask.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weight_density: Option<f64>,
        /// Number of dendritic segments per neuron.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dendrites: Option<usize>,
    },
    Conv {
        out_channels: usize,
        #[serde(default = "default_stride")]
        stride: usize,
        #[serde(default)]
        pad: usize,
        #[serde(default)]
        activation: Activation,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dendrites: Option<usize>,
    },
    MaxPool,
    Flatten,
}

fn default_stride() -> usize {
    1
}

/// Named layer sequence with input extents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub name: String,
    /// Per-sample input shape, `[C, H, W]`.
    pub input: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    /// Length of the context vector fed to dendritic segments.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_dim: Option<usize>,
}

/// Knobs shared by the preset architectures. Densities are fractions ACTIVE:
/// `1.0` means a plain ReLU layer or a fully connected weight matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PresetOptions {
    #[serde(default = "one")]
    pub conv_activation_density: f64,
    #[serde(default = "one")]
    pub ff_activation_density: f64,
    #[serde(default = "one")]
    pub ff_weight_density: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dendrites: Option<DendriteOptions>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DendriteOptions {
    pub segments: usize,
    pub context_dim: usize,
}

fn one() -> f64 {
    1.0
}

impl Default for PresetOptions {
    fn default() -> Self {
        PresetOptions {
            conv_activation_density: 1.0,
            ff_activation_density: 1.0,
            ff_weight_density: 1.0,
            dendrites: None,
        }
    }
}

/// Activation for a layer of `width` units at the given active fraction.
pub fn activation_for_density(density: f64, width: usize) -> Activation {
    if density >= 1.0 {
        Activation::Relu
    } else {
        let k = ((density * width as f64).round() as usize).clamp(1, width.saturating_sub(1).max(1));
        Activation::Kwta { k }
    }
}

impl ArchitectureSpec {
    /// Fully connected net: flatten, hidden layers, then the classifier head.
    pub fn fc(name: &str, input: &[usize], hidden: &[usize], classes: usize, opts: &PresetOptions) -> Self {
        let mut layers = vec![LayerSpec::Flatten];
        for &width in hidden {
            layers.push(LayerSpec::Dense {
                out: width,
                activation: activation_for_density(opts.ff_activation_density, width),
                weight_density: (opts.ff_weight_density < 1.0).then_some(opts.ff_weight_density),
                dendrites: opts.dendrites.as_ref().map(|d| d.segments),
            });
        }
        layers.push(LayerSpec::Dense {
            out: classes,
            activation: Activation::None,
            weight_density: None,
            dendrites: None,
        });
        ArchitectureSpec {
            name: name.to_string(),
            input: input.to_vec(),
            layers,
            context_dim: opts.dendrites.as_ref().map(|d| d.context_dim),
        }
    }

    /// 784→300→10.
    pub fn fc_mnist() -> Self {
        Self::fc("fc-300", &[1, 28, 28], &[300], 10, &PresetOptions::default())
    }

    /// 784→300→100→10.
    pub fn fc_300_100() -> Self {
        Self::fc("fc-300-100", &[1, 28, 28], &[300, 100], 10, &PresetOptions::default())
    }

    /// Two padded 3×3 conv layers with 64 maps, each followed by 2×2 max pooling,
    /// then three dense layers (120, 84, classes).
    pub fn lenet5(input: &[usize], classes: usize, opts: &PresetOptions) -> Self {
        let (h, w) = (input[1], input[2]);
        let mut layers = Vec::new();
        let mut spatial = (h, w);
        for _ in 0..2 {
            let width = 64 * spatial.0 * spatial.1;
            layers.push(LayerSpec::Conv {
                out_channels: 64,
                stride: 1,
                pad: 1,
                activation: activation_for_density(opts.conv_activation_density, width),
                dendrites: opts.dendrites.as_ref().map(|d| d.segments),
            });
            layers.push(LayerSpec::MaxPool);
            spatial = (spatial.0 / 2, spatial.1 / 2);
        }
        layers.push(LayerSpec::Flatten);
        for width in [120, 84] {
            layers.push(LayerSpec::Dense {
                out: width,
                activation: activation_for_density(opts.ff_activation_density, width),
                weight_density: (opts.ff_weight_density < 1.0).then_some(opts.ff_weight_density),
                dendrites: opts.dendrites.as_ref().map(|d| d.segments),
            });
        }
        layers.push(LayerSpec::Dense {
            out: classes,
            activation: Activation::None,
            weight_density: None,
            dendrites: None,
        });
        ArchitectureSpec {
            name: "lenet5".to_string(),
            input: input.to_vec(),
            layers,
            context_dim: opts.dendrites.as_ref().map(|d| d.context_dim),
        }
    }

    /// Output shape (per sample) of every layer, validating extents on the way.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input.is_empty() || self.input.contains(&0) {
            return Err(Error::config(format!("invalid input shape {:?}", self.input)));
        }
        if self.layers.is_empty() {
            return Err(Error::config("architecture has no layers"));
        }
        let mut shape = self.input.clone();
        let mut shapes = Vec::with_capacity(self.layers.len());
        let uses_dendrites = self.layers.iter().any(|l| {
            matches!(
                l,
                LayerSpec::Dense { dendrites: Some(_), .. } | LayerSpec::Conv { dendrites: Some(_), .. }
            )
        });
        if uses_dendrites && self.context_dim.unwrap_or(0) == 0 {
            return Err(Error::config("dendritic layers need a positive context_dim"));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match layer {
                LayerSpec::Flatten => vec![shape.iter().product()],
                LayerSpec::MaxPool => {
                    if shape.len() != 3 || shape[1] < 2 || shape[2] < 2 {
                        return Err(Error::config(format!("layer {i}: maxpool needs [C,H,W] input, got {shape:?}")));
                    }
                    vec![shape[0], shape[1] / 2, shape[2] / 2]
                }
                LayerSpec::Conv { out_channels, stride, pad, .. } => {
                    if shape.len() != 3 {
                        return Err(Error::config(format!("layer {i}: conv needs [C,H,W] input, got {shape:?}")));
                    }
                    let geom = ConvGeom::new(
                        &[1, shape[0], shape[1], shape[2]],
                        &[*out_channels, shape[0], 3, 3],
                        *stride,
                        *pad,
                    )
                    .map_err(|e| Error::config(format!("layer {i}: {e}")))?;
                    vec![*out_channels, geom.out_height, geom.out_width]
                }
                LayerSpec::Dense { out, weight_density, .. } => {
                    if shape.len() != 1 {
                        return Err(Error::config(format!(
                            "layer {i}: dense layer needs flat input, got {shape:?} (add a flatten layer)"
                        )));
                    }
                    if *out == 0 {
                        return Err(Error::config(format!("layer {i}: dense layer with zero outputs")));
                    }
                    if let Some(d) = weight_density {
                        if !(*d > 0.0 && *d <= 1.0) {
                            return Err(Error::config(format!("layer {i}: weight density {d} outside (0,1]")));
                        }
                    }
                    vec![*out]
                }
            };
            let activation = match layer {
                LayerSpec::Dense { activation, dendrites, .. } | LayerSpec::Conv { activation, dendrites, .. } => {
                    if *dendrites == Some(0) {
                        return Err(Error::config(format!("layer {i}: dendrites need at least one segment")));
                    }
                    Some(*activation)
                }
                _ => None,
            };
            if let Some(Activation::Kwta { k }) = activation {
                let width: usize = shape.iter().product();
                if k == 0 || k >= width {
                    return Err(Error::config(format!("layer {i}: kwta k={k} must satisfy 1 <= k < {width}")));
                }
            }
            shapes.push(shape.clone());
        }
        if shape.len() != 1 {
            return Err(Error::config("architecture must end in a flat classifier head"));
        }
        Ok(shapes)
    }

    pub fn num_classes(&self) -> Result<usize> {
        Ok(self.layer_shapes()?.last().map(|s| s[0]).unwrap_or(0))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    DenseWeight,
    ConvKernel,
    Bias,
    Segments,
}

/// A trainable tensor with its gradient buffer and optional connectivity mask.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub role: ParamRole,
    pub value: Tensor,
    pub grad: Tensor,
    /// Binary overlay; zero entries are pruned connections.
    pub mask: Option<Tensor>,
}

impl Parameter {
    fn new(name: String, role: ParamRole, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            name,
            role,
            value,
            grad,
            mask: None,
        }
    }

    pub fn is_weight(&self) -> bool {
        matches!(self.role, ParamRole::DenseWeight | ParamRole::ConvKernel)
    }

    /// Force masked entries to exactly zero.
    pub fn apply_mask(&mut self) {
        if let Some(mask) = &self.mask {
            for (v, m) in self.value.data_mut().iter_mut().zip(mask.data()) {
                if *m == 0.0 {
                    *v = 0.0;
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Layer {
    Dense {
        weight: usize,
        bias: usize,
        activation: Activation,
        segments: Option<usize>,
    },
    Conv {
        kernel: usize,
        bias: usize,
        stride: usize,
        pad: usize,
        activation: Activation,
        segments: Option<usize>,
    },
    MaxPool,
    Flatten,
}

/// Output of [`Model::forward`]: the logits node and which graph leaf holds each parameter.
#[derive(Debug)]
pub struct ForwardPass {
    pub logits: Var,
    pub bindings: Vec<(usize, Var)>,
    /// Gate node per dendritic layer, in layer order.
    pub gates: Vec<Var>,
    /// Pre-activation output (after gating) of each weighted layer, in layer order.
    pub pre_activations: Vec<Var>,
}

/// Trainable network compiled from an [`ArchitectureSpec`].
#[derive(Clone, Debug)]
pub struct Model {
    spec: ArchitectureSpec,
    layers: Vec<Layer>,
    params: Vec<Parameter>,
    init: InitSnapshot,
    seed: u64,
}

fn weight_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

fn small_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

/// Binary mask keeping exactly `round(density·n)` positions, chosen uniformly.
fn random_connectivity(shape: &[usize], density: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let keep = ((density * n as f64).round() as usize).clamp(1, n);
    let mut mask = Tensor::zeros(shape);
    for i in rand::seq::index::sample(rng, n, keep).into_iter() {
        mask.data_mut()[i] = 1.0;
    }
    mask
}

impl Model {
    /// Initialize parameters deterministically from `seed`.
    pub fn build(spec: &ArchitectureSpec, seed: u64) -> Result<Self> {
        let shapes = spec.layer_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mask_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d61_736b_5f72_6e67);
        let context_dim = spec.context_dim.unwrap_or(0);
        let mut params = Vec::new();
        let mut layers = Vec::new();
        let mut in_shape = spec.input.clone();
        for (i, (layer, out_shape)) in spec.layers.iter().zip(&shapes).enumerate() {
            let compiled = match layer {
                LayerSpec::Flatten => Layer::Flatten,
                LayerSpec::MaxPool => Layer::MaxPool,
                LayerSpec::Dense { out, activation, weight_density, dendrites } => {
                    let fan_in = in_shape[0];
                    let mut w = Parameter::new(
                        format!("layer{i}.weight"),
                        ParamRole::DenseWeight,
                        Tensor::uniform(&[*out, fan_in], weight_bound(fan_in), &mut rng),
                    );
                    if let Some(d) = weight_density.filter(|d| *d < 1.0) {
                        w.mask = Some(random_connectivity(&[*out, fan_in], d, &mut mask_rng));
                        w.apply_mask();
                    }
                    let b = Parameter::new(
                        format!("layer{i}.bias"),
                        ParamRole::Bias,
                        Tensor::uniform(&[*out], small_bound(fan_in), &mut rng),
                    );
                    let weight = params.len();
                    params.push(w);
                    params.push(b);
                    let segments = dendrites.map(|j| {
                        params.push(Parameter::new(
                            format!("layer{i}.segments"),
                            ParamRole::Segments,
                            Tensor::uniform(&[*out, j, context_dim], weight_bound(context_dim), &mut rng),
                        ));
                        params.len() - 1
                    });
                    Layer::Dense {
                        weight,
                        bias: weight + 1,
                        activation: *activation,
                        segments,
                    }
                }
                LayerSpec::Conv { out_channels, stride, pad, activation, dendrites } => {
                    let fan_in = in_shape[0] * 9;
                    params.push(Parameter::new(
                        format!("layer{i}.kernel"),
                        ParamRole::ConvKernel,
                        Tensor::uniform(&[*out_channels, in_shape[0], 3, 3], weight_bound(fan_in), &mut rng),
                    ));
                    params.push(Parameter::new(
                        format!("layer{i}.bias"),
                        ParamRole::Bias,
                        Tensor::uniform(&[*out_channels], small_bound(fan_in), &mut rng),
                    ));
                    let kernel = params.len() - 2;
                    let segments = dendrites.map(|j| {
                        params.push(Parameter::new(
                            format!("layer{i}.segments"),
                            ParamRole::Segments,
                            Tensor::uniform(&[*out_channels, j, context_dim], weight_bound(context_dim), &mut rng),
                        ));
                        params.len() - 1
                    });
                    Layer::Conv {
                        kernel,
                        bias: kernel + 1,
                        stride: *stride,
                        pad: *pad,
                        activation: *activation,
                        segments,
                    }
                }
            };
            layers.push(compiled);
            in_shape = out_shape.clone();
        }
        let init = InitSnapshot::capture(&params);
        Ok(Model {
            spec: spec.clone(),
            layers,
            params,
            init,
            seed,
        })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    /// Parameters exactly as initialized.
    pub fn init_snapshot(&self) -> &InitSnapshot {
        &self.init
    }

    pub fn needs_context(&self) -> bool {
        self.spec.context_dim.is_some()
            && self
                .layers
                .iter()
                .any(|l| matches!(l, Layer::Dense { segments: Some(_), .. } | Layer::Conv { segments: Some(_), .. }))
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn num_weights(&self) -> usize {
        self.params.iter().filter(|p| p.is_weight()).map(|p| p.value.numel()).sum()
    }

    /// Copy of every parameter value, in order.
    pub fn values(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn load_values(&mut self, values: &[Tensor]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Integrity(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                values.len()
            )));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(Error::Integrity(format!(
                    "{}: shape {:?} vs {:?}",
                    p.name,
                    p.value.shape(),
                    v.shape()
                )));
            }
            p.value = v.clone();
        }
        Ok(())
    }

    /// Build the forward graph for a batch `[N×C×H×W]`.
    ///
    /// With `trainable` set, parameters become gradient leaves; otherwise constants.
    pub fn forward(
        &self,
        g: &mut Graph,
        input: &Tensor,
        context: Option<&Tensor>,
        trainable: bool,
    ) -> Result<ForwardPass> {
        if input.shape().len() != self.spec.input.len() + 1 || input.shape()[1..] != self.spec.input[..] {
            return Err(Error::Dimension {
                op: "forward",
                lhs: input.shape().to_vec(),
                rhs: self.spec.input.clone(),
            });
        }
        if self.needs_context() && context.is_none() {
            return Err(Error::usage("model has dendritic layers but no context was given"));
        }
        let mut bindings = Vec::new();
        let mut gates = Vec::new();
        let mut pre_activations = Vec::new();
        let bind = |g: &mut Graph, idx: usize, bindings: &mut Vec<(usize, Var)>| -> Result<Var> {
            let p = &self.params[idx];
            let leaf = if trainable {
                g.param(p.value.clone())
            } else {
                g.constant(p.value.clone())
            };
            bindings.push((idx, leaf));
            match (&p.mask, trainable) {
                (Some(mask), true) => g.mul_const(leaf, mask.clone()),
                _ => Ok(leaf),
            }
        };
        let mut x = g.constant(input.clone());
        for layer in &self.layers {
            x = match layer {
                Layer::Flatten => g.flatten(x)?,
                Layer::MaxPool => g.maxpool2(x)?,
                Layer::Dense { weight, bias, activation, segments } => {
                    let w = bind(g, *weight, &mut bindings)?;
                    let b = bind(g, *bias, &mut bindings)?;
                    let mut y = g.linear(x, w, Some(b))?;
                    if let Some(s) = segments {
                        let u = bind(g, *s, &mut bindings)?;
                        y = g.gate(y, u, context.expect("checked above"))?;
                        gates.push(y);
                    }
                    pre_activations.push(y);
                    apply_activation(g, y, *activation)?
                }
                Layer::Conv { kernel, bias, stride, pad, activation, segments } => {
                    let k = bind(g, *kernel, &mut bindings)?;
                    let b = bind(g, *bias, &mut bindings)?;
                    let mut y = g.conv2d(x, k, Some(b), *stride, *pad)?;
                    if let Some(s) = segments {
                        let u = bind(g, *s, &mut bindings)?;
                        y = g.gate(y, u, context.expect("checked above"))?;
                        gates.push(y);
                    }
                    pre_activations.push(y);
                    apply_activation(g, y, *activation)?
                }
            };
        }
        Ok(ForwardPass {
            logits: x,
            bindings,
            gates,
            pre_activations,
        })
    }

    /// Add graph gradients of every bound parameter into `Parameter::grad`.
    pub fn accumulate_grads(&mut self, g: &Graph, pass: &ForwardPass) -> Result<()> {
        for &(idx, var) in &pass.bindings {
            if let Some(grad) = g.grad(var) {
                self.params[idx].grad.add_assign(grad)?;
            }
        }
        Ok(())
    }

    /// Logits for a batch, without gradient bookkeeping.
    pub fn logits(&self, input: &Tensor, context: Option<&Tensor>) -> Result<Tensor> {
        let mut g = Graph::new();
        let pass = self.forward(&mut g, input, context, false)?;
        Ok(g.value(pass.logits).clone())
    }

    /// Arg-max class per sample (lowest index on ties).
    pub fn predict(&self, input: &Tensor, context: Option<&Tensor>) -> Result<Vec<usize>> {
        let logits = self.logits(input, context)?;
        let classes = logits.shape()[1];
        Ok(logits
            .data()
            .chunks(classes)
            .map(|row| {
                let mut best = 0;
                for (i, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect())
    }

    /// Copy of `spec` with `f(activation, output width)` applied to every non-linear layer.
    pub fn spec_with_activation(spec: &ArchitectureSpec, f: impl Fn(Activation, usize) -> Activation) -> Result<ArchitectureSpec> {
        let shapes = spec.layer_shapes()?;
        let mut out = spec.clone();
        for (layer, shape) in out.layers.iter_mut().zip(&shapes) {
            let width: usize = shape.iter().product();
            match layer {
                LayerSpec::Dense { activation, .. } | LayerSpec::Conv { activation, .. } => {
                    if *activation != Activation::None {
                        *activation = f(*activation, width);
                    }
                }
                _ => {}
            }
        }
        Ok(out)
    }
}

fn apply_activation(g: &mut Graph, y: Var, activation: Activation) -> Result<Var> {
    Ok(match activation {
        Activation::None => y,
        Activation::Relu => g.relu(y),
        Activation::Kwta { k } => g.kwta(y, k)?,
    })
}

/// Standalone kWTA on a `[batch×n]` (or `[N×C×H×W]`) tensor.
pub fn kwta(y: &Tensor, k: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(y.clone());
    let out = g.kwta(v, k)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kwta_examples() {
        let y = Tensor::from_vec(vec![1, 5], vec![3.0, 1.0, 4.0, 1.0, 5.0]).unwrap();
        assert_eq!(kwta(&y, 2).unwrap().data(), &[0.0, 0.0, 4.0, 0.0, 5.0]);
        assert_eq!(kwta(&y, 5).unwrap(), y);
        let ties = Tensor::from_vec(vec![1, 4], vec![2.0, 2.0, 2.0, 1.0]).unwrap();
        assert_eq!(kwta(&ties, 2).unwrap().data(), &[2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn kwta_k_out_of_range() {
        let y = Tensor::zeros(&[1, 3]);
        assert!(matches!(kwta(&y, 0), Err(Error::Config(_))));
        assert!(matches!(kwta(&y, 4), Err(Error::Config(_))));
    }

    #[test]
    fn kwta_conv_single_winner() {
        let mut y = Tensor::zeros(&[1, 2, 2, 2]);
        y.data_mut()[5] = 0.7;
        let out = kwta(&y, 1).unwrap();
        assert_eq!(out, y);
        assert_eq!(kwta(&y, 8).unwrap(), y);
    }

    #[test]
    fn fc_mnist_extents() {
        let spec = ArchitectureSpec::fc_mnist();
        let shapes = spec.layer_shapes().unwrap();
        assert_eq!(shapes, vec![vec![784], vec![300], vec![10]]);
        let model = Model::build(&spec, 1).unwrap();
        let w: Vec<_> = model.params().iter().filter(|p| p.is_weight()).map(|p| p.value.shape().to_vec()).collect();
        assert_eq!(w, vec![vec![300, 784], vec![10, 300]]);
    }

    #[test]
    fn lenet5_extents() {
        let spec = ArchitectureSpec::lenet5(&[1, 28, 28], 10, &PresetOptions::default());
        let shapes = spec.layer_shapes().unwrap();
        assert_eq!(shapes[0], vec![64, 28, 28]);
        assert_eq!(shapes[2], vec![64, 14, 14]);
        assert_eq!(shapes[4], vec![3136]);
        assert_eq!(shapes.last().unwrap(), &vec![10]);
        let model = Model::build(&spec, 0).unwrap();
        let kernels: Vec<_> = model
            .params()
            .iter()
            .filter(|p| p.role == ParamRole::ConvKernel)
            .map(|p| p.value.shape().to_vec())
            .collect();
        assert_eq!(kernels, vec![vec![64, 1, 3, 3], vec![64, 64, 3, 3]]);
        let dense = model.params().iter().filter(|p| p.role == ParamRole::DenseWeight).count();
        assert_eq!(dense, 3);
    }

    #[test]
    fn same_seed_same_weights() {
        let spec = ArchitectureSpec::fc_300_100();
        let a = Model::build(&spec, 42).unwrap();
        let b = Model::build(&spec, 42).unwrap();
        for (x, y) in a.params().iter().zip(b.params()) {
            assert!(x.value.bit_eq(&y.value));
        }
        let c = Model::build(&spec, 43).unwrap();
        assert!(!a.params()[0].value.bit_eq(&c.params()[0].value));
    }

    #[test]
    fn incompatible_extents_rejected() {
        let spec = ArchitectureSpec {
            name: "bad".into(),
            input: vec![1, 4, 4],
            layers: vec![LayerSpec::Dense {
                out: 3,
                activation: Activation::None,
                weight_density: None,
                dendrites: None,
            }],
            context_dim: None,
        };
        assert!(matches!(Model::build(&spec, 0), Err(Error::Config(_))));
        let mut spec = ArchitectureSpec::fc_mnist();
        spec.layers[1] = LayerSpec::Dense {
            out: 300,
            activation: Activation::Kwta { k: 300 },
            weight_density: None,
            dendrites: None,
        };
        assert!(spec.layer_shapes().is_err());
    }

    #[test]
    fn spec_json_roundtrip() {
        let opts = PresetOptions {
            conv_activation_density: 0.2,
            ff_activation_density: 0.3,
            ff_weight_density: 0.5,
            dendrites: Some(DendriteOptions { segments: 10, context_dim: 10 }),
        };
        let spec = ArchitectureSpec::lenet5(&[3, 32, 32], 10, &opts);
        let back = ArchitectureSpec::from_json(&spec.to_json().unwrap()).unwrap();
        assert_eq!(spec, back);
    }

    #[test]
    fn relu_kwta_swap_preserves_shapes() {
        let opts = PresetOptions { ff_activation_density: 0.1, conv_activation_density: 0.2, ..Default::default() };
        for spec in [
            ArchitectureSpec::fc_mnist(),
            ArchitectureSpec::fc_300_100(),
            ArchitectureSpec::lenet5(&[1, 28, 28], 10, &opts),
            ArchitectureSpec::lenet5(&[3, 32, 32], 10, &PresetOptions::default()),
            ArchitectureSpec::fc("mlp", &[1, 28, 28], &[256, 256], 10, &opts),
        ] {
            let swapped = Model::spec_with_activation(&spec, |a, w| match a {
                Activation::Relu => activation_for_density(0.25, w),
                _ => Activation::Relu,
            })
            .unwrap();
            assert_eq!(spec.layer_shapes().unwrap(), swapped.layer_shapes().unwrap());
        }
    }

    #[test]
    fn static_weight_density_is_exact() {
        let opts = PresetOptions { ff_weight_density: 0.5, ..Default::default() };
        let spec = ArchitectureSpec::fc("sc", &[1, 4, 4], &[8], 3, &opts);
        let model = Model::build(&spec, 3).unwrap();
        let w = &model.params()[0];
        let mask = w.mask.as_ref().unwrap();
        assert_eq!(mask.sum(), 64.0);
        for (v, m) in w.value.data().iter().zip(mask.data()) {
            if *m == 0.0 {
                assert_eq!(*v, 0.0);
            }
        }
    }
}
