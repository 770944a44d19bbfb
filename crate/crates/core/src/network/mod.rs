//! Layer chains, T-step simulation and backpropagation through time.
//!
//! A network is a linear chain of convolution, fully-connected and spiking
//! neuron layers ending in a fully-connected head. Inputs are presented
//! unchanged at every timestep; the head's pre-activations are averaged over
//! the timesteps to give the logits. Simulation runs layer by layer over all
//! timesteps, and layers that only ever see the constant input are evaluated
//! once.

mod train;

pub use train::{evaluate, predict, train, train_with, EpochRecord, OptimizerKind, RunHeader, RunReport, Schedule, TrainConfig};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuron::{self, CoefficientTensor, Firing, Granularity, NeuronConfig};
use crate::tensor::{self, ConvGeometry, ConvKernel, LocalKernel, Tensor};

/// Architecture-level description of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv {
        kernel: usize,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        padding: usize,
        /// Unshared (per-output-position) kernels.
        #[serde(default)]
        local: bool,
    },
    Neuron {
        config: NeuronConfig,
        granularity: Option<Granularity>,
    },
    Linear {
        inputs: usize,
        outputs: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    /// Two stride-2 convolutions with spiking neurons and a linear head, for
    /// 28x28 single-channel images.
    pub fn mnist_small(granularity: Option<Granularity>, config: NeuronConfig) -> Self {
        Self {
            input_shape: vec![28, 28, 1],
            layers: vec![
                LayerSpec::Conv {
                    kernel: 3,
                    in_channels: 1,
                    out_channels: 8,
                    stride: 2,
                    padding: 1,
                    local: false,
                },
                LayerSpec::Neuron {
                    config,
                    granularity,
                },
                LayerSpec::Conv {
                    kernel: 3,
                    in_channels: 8,
                    out_channels: 16,
                    stride: 2,
                    padding: 1,
                    local: false,
                },
                LayerSpec::Neuron {
                    config,
                    granularity,
                },
                LayerSpec::Linear {
                    inputs: 7 * 7 * 16,
                    outputs: 10,
                },
            ],
        }
    }

    /// A small two-conv network on 8x8 single-channel inputs with 4 classes.
    pub fn tiny(granularity: Option<Granularity>, config: NeuronConfig) -> Self {
        Self {
            input_shape: vec![8, 8, 1],
            layers: vec![
                LayerSpec::Conv {
                    kernel: 3,
                    in_channels: 1,
                    out_channels: 4,
                    stride: 2,
                    padding: 1,
                    local: false,
                },
                LayerSpec::Neuron {
                    config,
                    granularity,
                },
                LayerSpec::Conv {
                    kernel: 3,
                    in_channels: 4,
                    out_channels: 4,
                    stride: 1,
                    padding: 1,
                    local: false,
                },
                LayerSpec::Neuron {
                    config,
                    granularity,
                },
                LayerSpec::Linear {
                    inputs: 4 * 4 * 4,
                    outputs: 4,
                },
            ],
        }
    }

    pub fn by_name(name: &str, granularity: Option<Granularity>, config: NeuronConfig) -> Result<Self> {
        match name {
            "mnist-small" => Ok(Self::mnist_small(granularity, config)),
            "tiny" => Ok(Self::tiny(granularity, config)),
            other => Err(Error::Input(format!(
                "unknown architecture `{other}` (expected mnist-small or tiny)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ConvWeights {
    Shared(ConvKernel),
    Local(LocalKernel),
}

impl ConvWeights {
    pub fn weights(&self) -> &Tensor {
        match self {
            ConvWeights::Shared(k) => k.weights(),
            ConvWeights::Local(k) => k.weights(),
        }
    }

    fn weights_mut(&mut self) -> &mut Tensor {
        match self {
            ConvWeights::Shared(k) => k.weights_mut(),
            ConvWeights::Local(k) => k.weights_mut(),
        }
    }

    pub fn stride(&self) -> usize {
        match self {
            ConvWeights::Shared(k) => k.stride(),
            ConvWeights::Local(k) => k.stride(),
        }
    }

    pub fn padding(&self) -> usize {
        match self {
            ConvWeights::Shared(k) => k.padding(),
            ConvWeights::Local(k) => k.padding(),
        }
    }

    pub fn ksize(&self) -> usize {
        match self {
            ConvWeights::Shared(k) => k.ksize(),
            ConvWeights::Local(k) => k.ksize(),
        }
    }

    pub fn in_channels(&self) -> usize {
        match self {
            ConvWeights::Shared(k) => k.in_channels(),
            ConvWeights::Local(k) => k.in_channels(),
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            ConvWeights::Shared(k) => k.out_channels(),
            ConvWeights::Local(k) => k.out_channels(),
        }
    }

    pub(crate) fn geometry(&self, input_shape: &[usize]) -> Result<ConvGeometry> {
        match self {
            ConvWeights::Shared(k) => k.geometry(input_shape),
            ConvWeights::Local(k) => k.geometry(input_shape),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub weights: ConvWeights,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearLayer {
    /// `[P, Q]`
    pub weights: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronLayer {
    pub config: NeuronConfig,
    /// `None` emits plain binary spikes.
    pub coefficient: Option<CoefficientTensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Conv(ConvLayer),
    Neuron(NeuronLayer),
    Linear(LinearLayer),
}

/// A validated layer chain together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    /// Output shape of every layer.
    shapes: Vec<Vec<usize>>,
    folded: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    pub timesteps: usize,
    pub firing: Firing,
    pub record: bool,
}

impl ForwardOptions {
    pub fn new(timesteps: usize) -> Self {
        Self {
            timesteps,
            firing: Firing::Heaviside,
            record: false,
        }
    }

    pub fn recording(mut self) -> Self {
        self.record = true;
        self
    }

    pub fn with_firing(mut self, firing: Firing) -> Self {
        self.firing = firing;
        self
    }
}

/// Per-timestep activity of one neuron layer.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuronTrace {
    pub layer: usize,
    /// Charged potential before reset.
    pub potentials: Vec<Tensor>,
    pub spikes: Vec<Tensor>,
    pub scaled: Vec<Tensor>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    pub neurons: Vec<NeuronTrace>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub trace: Option<Trace>,
}

/// Gradients aligned with [`Network::parameters`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Tensor>,
}

impl Gradients {
    pub fn norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data())
            .map(|&g| g as f64 * g as f64)
            .sum::<f64>()
            .sqrt()
    }
}

impl Network {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>, folded: bool) -> Result<Self> {
        let shapes = validate_chain(&input_shape, &layers, folded)?;
        Ok(Self {
            input_shape,
            layers,
            shapes,
            folded,
        })
    }

    /// Fan-in scaled uniform weights `U(-sqrt(6/fan_in), sqrt(6/fan_in))`,
    /// zero biases and unit coefficients.
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shape = arch.input_shape.clone();
        let mut layers = Vec::with_capacity(arch.layers.len());
        for (idx, spec) in arch.layers.iter().enumerate() {
            let layer = match spec {
                LayerSpec::Conv {
                    kernel,
                    in_channels,
                    out_channels,
                    stride,
                    padding,
                    local,
                } => {
                    let fan_in = kernel * kernel * in_channels;
                    let w = uniform(&[*kernel, *kernel, *in_channels, *out_channels], fan_in, &mut rng);
                    let k = ConvKernel::new(w, *stride, *padding)?;
                    let weights = if *local {
                        ConvWeights::Local(LocalKernel::broadcast(&k, &shape)?)
                    } else {
                        ConvWeights::Shared(k)
                    };
                    Layer::Conv(ConvLayer {
                        weights,
                        bias: Tensor::zeros(&[*out_channels]),
                    })
                }
                LayerSpec::Neuron {
                    config,
                    granularity,
                } => {
                    config.validate()?;
                    let coefficient = granularity
                        .map(|g| CoefficientTensor::ones(g, &shape))
                        .transpose()?;
                    Layer::Neuron(NeuronLayer {
                        config: *config,
                        coefficient,
                    })
                }
                LayerSpec::Linear { inputs, outputs } => Layer::Linear(LinearLayer {
                    weights: uniform(&[*inputs, *outputs], *inputs, &mut rng),
                    bias: Tensor::zeros(&[*outputs]),
                }),
            };
            shape = output_shape(idx, &layer, &shape)?;
            layers.push(layer);
        }
        Self::new(arch.input_shape.clone(), layers, false)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Input shape of layer `idx`.
    pub fn layer_input_shape(&self, idx: usize) -> &[usize] {
        if idx == 0 {
            &self.input_shape
        } else {
            &self.shapes[idx - 1]
        }
    }

    pub fn layer_output_shape(&self, idx: usize) -> &[usize] {
        &self.shapes[idx]
    }

    pub fn num_classes(&self) -> usize {
        self.shapes.last().map_or(0, |s| s[0])
    }

    pub fn is_folded(&self) -> bool {
        self.folded
    }

    pub fn architecture(&self) -> Architecture {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => LayerSpec::Conv {
                    kernel: c.weights.ksize(),
                    in_channels: c.weights.in_channels(),
                    out_channels: c.weights.out_channels(),
                    stride: c.weights.stride(),
                    padding: c.weights.padding(),
                    local: matches!(c.weights, ConvWeights::Local(_)),
                },
                Layer::Neuron(n) => LayerSpec::Neuron {
                    config: n.config,
                    granularity: n.coefficient.as_ref().map(|a| a.granularity()),
                },
                Layer::Linear(l) => LayerSpec::Linear {
                    inputs: l.weights.shape()[0],
                    outputs: l.weights.shape()[1],
                },
            })
            .collect();
        Architecture {
            input_shape: self.input_shape.clone(),
            layers,
        }
    }

    /// Named parameter tensors in declaration order.
    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv(c) => {
                    out.push((format!("layers.{i}.weight"), c.weights.weights()));
                    out.push((format!("layers.{i}.bias"), &c.bias));
                }
                Layer::Neuron(n) => {
                    if let Some(a) = &n.coefficient {
                        out.push((format!("layers.{i}.coefficient"), a.values()));
                    }
                }
                Layer::Linear(l) => {
                    out.push((format!("layers.{i}.weight"), &l.weights));
                    out.push((format!("layers.{i}.bias"), &l.bias));
                }
            }
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(c) => {
                    out.push(c.weights.weights_mut());
                    out.push(&mut c.bias);
                }
                Layer::Neuron(n) => {
                    if let Some(a) = &mut n.coefficient {
                        out.push(a.values_mut());
                    }
                }
                Layer::Linear(l) => {
                    out.push(&mut l.weights);
                    out.push(&mut l.bias);
                }
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.len()).sum()
    }

    /// Rebuilds a network of the same architecture from tensors listed in
    /// [`Network::parameters`] order.
    pub fn from_parameters(arch: &Architecture, tensors: Vec<Tensor>, folded: bool) -> Result<Self> {
        let mut it = tensors.into_iter();
        let mut next = |what: &str| {
            it.next()
                .ok_or_else(|| Error::Format(format!("missing tensor for {what}")))
        };
        let mut layers = Vec::with_capacity(arch.layers.len());
        for spec in &arch.layers {
            let layer = match spec {
                LayerSpec::Conv {
                    stride,
                    padding,
                    local,
                    ..
                } => {
                    let w = next("conv weights")?;
                    let weights = if *local {
                        ConvWeights::Local(LocalKernel::new(w, *stride, *padding)?)
                    } else {
                        ConvWeights::Shared(ConvKernel::new(w, *stride, *padding)?)
                    };
                    Layer::Conv(ConvLayer {
                        weights,
                        bias: next("conv bias")?,
                    })
                }
                LayerSpec::Neuron {
                    config,
                    granularity,
                } => Layer::Neuron(NeuronLayer {
                    config: *config,
                    coefficient: match granularity {
                        Some(g) => Some(CoefficientTensor::new(*g, next("coefficient")?)?),
                        None => None,
                    },
                }),
                LayerSpec::Linear { .. } => Layer::Linear(LinearLayer {
                    weights: next("linear weights")?,
                    bias: next("linear bias")?,
                }),
            };
            layers.push(layer);
        }
        if it.next().is_some() {
            return Err(Error::Format("more tensors than the architecture declares".into()));
        }
        let net = Self::new(arch.input_shape.clone(), layers, folded)?;
        if net.architecture() != *arch {
            return Err(Error::Format("tensor shapes disagree with the architecture".into()));
        }
        Ok(net)
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub(crate) fn set_folded(&mut self) {
        self.folded = true;
    }

    pub fn forward(&self, input: &Tensor, opts: &ForwardOptions) -> Result<ForwardOutput> {
        self.check_input(input.data().len(), input.shape())?;
        check_timesteps(opts.timesteps)?;
        let scales = self.expanded_coefficients()?;
        let mut cache = opts.record.then(|| Cache::new(self.layers.len()));
        let logits = self.simulate(input.data(), opts.timesteps, opts.firing, &scales, cache.as_mut());
        let trace = cache.map(|c| c.into_trace(self));
        Ok(ForwardOutput {
            logits: Tensor::new(vec![self.num_classes()], logits)?,
            trace,
        })
    }

    pub(crate) fn logits_raw(&self, input: &[f32], timesteps: usize, scales: &[Option<Vec<f32>>]) -> Vec<f32> {
        self.simulate(input, timesteps, Firing::Heaviside, scales, None)
    }

    /// Mean softmax cross-entropy over a batch and its exact gradient with
    /// respect to every parameter (surrogate derivative for firing, detached
    /// resets).
    pub fn loss_and_grad(
        &self,
        inputs: &[Tensor],
        labels: &[usize],
        timesteps: usize,
        firing: Firing,
    ) -> Result<(f64, Gradients)> {
        for x in inputs {
            self.check_input(x.len(), x.shape())?;
        }
        let slices: Vec<&[f32]> = inputs.iter().map(|t| t.data()).collect();
        let out = self.batch_loss_and_grad(&slices, labels, timesteps, firing)?;
        Ok((out.loss, out.gradients))
    }

    pub(crate) fn batch_loss_and_grad(
        &self,
        inputs: &[&[f32]],
        labels: &[usize],
        timesteps: usize,
        firing: Firing,
    ) -> Result<BatchResult> {
        if self.folded {
            return Err(Error::Input("folded networks cannot be trained".into()));
        }
        if self
            .layers
            .iter()
            .any(|l| matches!(l, Layer::Conv(ConvLayer { weights: ConvWeights::Local(_), .. })))
        {
            return Err(Error::Input("training unshared convolution kernels is not supported".into()));
        }
        if inputs.is_empty() || inputs.len() != labels.len() {
            return Err(Error::Input(format!(
                "batch needs matching nonempty inputs and labels ({} vs {})",
                inputs.len(),
                labels.len()
            )));
        }
        check_timesteps(timesteps)?;
        let classes = self.num_classes();
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Input(format!("label {bad} out of range for {classes} classes")));
        }
        let scales = self.expanded_coefficients()?;
        let n = inputs.len() as f64;

        // Fixed chunking keeps the reduction order independent of the thread count.
        const CHUNK: usize = 16;
        let partials: Vec<Accumulator> = inputs
            .par_chunks(CHUNK)
            .zip(labels.par_chunks(CHUNK))
            .map(|(xs, ys)| {
                let mut acc = Accumulator::new(self);
                for (x, &y) in xs.iter().zip(ys) {
                    let mut cache = Cache::new(self.layers.len());
                    let logits = self.simulate(x, timesteps, firing, &scales, Some(&mut cache));
                    let (loss, mut dlogits) = softmax_cross_entropy(&logits, y);
                    dlogits.iter_mut().for_each(|g| *g /= n);
                    acc.loss += loss;
                    if argmax(&logits) == y {
                        acc.correct += 1;
                    }
                    acc.record_rates(&cache);
                    self.backward(&cache, &dlogits, timesteps, &scales, &mut acc);
                }
                acc
            })
            .collect();
        let mut total = Accumulator::new(self);
        for p in &partials {
            total.merge(p);
        }
        Ok(BatchResult {
            loss: total.loss / n,
            correct: total.correct,
            spike_counts: total.spike_counts.clone(),
            spike_totals: total.spike_totals.clone(),
            gradients: total.finish(self)?,
        })
    }

    fn check_input(&self, len: usize, shape: &[usize]) -> Result<()> {
        if len != self.input_shape.iter().product::<usize>() {
            return Err(Error::dim("network input", shape, &self.input_shape));
        }
        Ok(())
    }

    pub(crate) fn expanded_coefficients(&self) -> Result<Vec<Option<Vec<f32>>>> {
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| match l {
                Layer::Neuron(NeuronLayer {
                    coefficient: Some(a),
                    ..
                }) => a.expand(self.layer_input_shape(i)).map(Some),
                _ => Ok(None),
            })
            .collect()
    }

    fn simulate(
        &self,
        input: &[f32],
        timesteps: usize,
        firing: Firing,
        scales: &[Option<Vec<f32>>],
        mut cache: Option<&mut Cache>,
    ) -> Vec<f32> {
        let mut cur = Seq::Static(input.to_vec());
        for (idx, layer) in self.layers.iter().enumerate() {
            let in_shape = self.layer_input_shape(idx);
            let next = match layer {
                Layer::Conv(c) => {
                    let g = c
                        .weights
                        .geometry(in_shape)
                        .expect("validated conv geometry");
                    cur.map(|x| {
                        let mut out = vec![0.0f32; g.output_len()];
                        match &c.weights {
                            ConvWeights::Shared(k) => tensor::conv_forward_raw(
                                &g,
                                x,
                                k.weights().data(),
                                Some(c.bias.data()),
                                &mut out,
                            ),
                            ConvWeights::Local(k) => tensor::local_conv_forward_raw(
                                &g,
                                x,
                                k.weights().data(),
                                Some(c.bias.data()),
                                &mut out,
                            ),
                        }
                        out
                    })
                }
                Layer::Linear(l) => {
                    let (p, q) = (l.weights.shape()[0], l.weights.shape()[1]);
                    cur.map(|x| {
                        let mut out = vec![0.0f32; q];
                        tensor::linear_forward_raw(p, q, x, l.weights.data(), Some(l.bias.data()), &mut out);
                        out
                    })
                }
                Layer::Neuron(n) => {
                    let len = self.shapes[idx].iter().product();
                    let scale = scales[idx].as_deref();
                    let mut u = vec![n.config.u_rest; len];
                    let mut u_next = vec![0.0f32; len];
                    let mut scaled_steps = Vec::with_capacity(timesteps);
                    let mut potentials = Vec::new();
                    let mut outs = Vec::new();
                    for t in 0..timesteps {
                        let mut potential = vec![0.0f32; len];
                        let mut o = vec![0.0f32; len];
                        neuron::lif_step_raw(&n.config, firing, &u, cur.at(t), &mut potential, &mut o, &mut u_next);
                        std::mem::swap(&mut u, &mut u_next);
                        let scaled = match scale {
                            Some(s) => o.iter().zip(s).map(|(&o, &a)| a * o).collect(),
                            None => o.clone(),
                        };
                        scaled_steps.push(scaled);
                        if cache.is_some() {
                            potentials.push(potential);
                            outs.push(o);
                        }
                    }
                    if let Some(c) = cache.as_deref_mut() {
                        c.neurons[idx] = Some(NeuronCache { potentials, outs });
                    }
                    Seq::Steps(scaled_steps)
                }
            };
            if let Some(c) = cache.as_deref_mut() {
                c.inputs[idx] = Some(cur);
            }
            cur = next;
        }
        match cur {
            Seq::Static(x) => x,
            Seq::Steps(steps) => {
                let q = steps[0].len();
                let mut sum = vec![0.0f64; q];
                for s in &steps {
                    for (acc, &v) in sum.iter_mut().zip(s) {
                        *acc += v as f64;
                    }
                }
                let t = steps.len() as f64;
                sum.into_iter().map(|v| (v / t) as f32).collect()
            }
        }
    }

    fn backward(
        &self,
        cache: &Cache,
        dlogits: &[f64],
        timesteps: usize,
        scales: &[Option<Vec<f32>>],
        acc: &mut Accumulator,
    ) {
        let last = self.layers.len() - 1;
        let output_is_static = matches!(cache.inputs[last], Some(Seq::Static(_)));
        let mut grad = if output_is_static {
            GradSeq::Static(dlogits.to_vec())
        } else {
            let per_step: Vec<f64> = dlogits.iter().map(|g| g / timesteps as f64).collect();
            GradSeq::Steps(vec![per_step; timesteps])
        };
        for idx in (0..self.layers.len()).rev() {
            let input = cache.inputs[idx].as_ref().expect("cached layer input");
            let need_input_grad = idx > 0;
            grad = match &self.layers[idx] {
                Layer::Conv(c) => {
                    let ConvWeights::Shared(k) = &c.weights else {
                        unreachable!("unshared kernels are rejected before backward");
                    };
                    let g = k.geometry(self.layer_input_shape(idx)).expect("validated");
                    let buf = &mut acc.grads[idx];
                    let grad = grad.collapse_if(input.is_static());
                    let step = |x: &[f32], go: &[f64], w: &mut Vec<f64>, b: &mut Vec<f64>| {
                        for chunk in go.chunks(g.out_c) {
                            for (bb, &v) in b.iter_mut().zip(chunk) {
                                *bb += v;
                            }
                        }
                        if need_input_grad {
                            let mut gi = vec![0.0f64; g.input_len()];
                            tensor::conv_backward_raw(&g, x, k.weights().data(), go, w, Some(&mut gi));
                            Some(gi)
                        } else {
                            tensor::conv_backward_raw(&g, x, k.weights().data(), go, w, None);
                            None
                        }
                    };
                    let (w, b) = buf.split_at_mut(1);
                    backprop_linear_map(input, grad, |x, go| step(x, go, &mut w[0], &mut b[0]))
                }
                Layer::Linear(l) => {
                    let (p, q) = (l.weights.shape()[0], l.weights.shape()[1]);
                    let buf = &mut acc.grads[idx];
                    let grad = grad.collapse_if(input.is_static());
                    let (w, b) = buf.split_at_mut(1);
                    backprop_linear_map(input, grad, |x, go| {
                        for (bb, &v) in b[0].iter_mut().zip(go) {
                            *bb += v;
                        }
                        if need_input_grad {
                            let mut gi = vec![0.0f64; p];
                            tensor::linear_backward_raw(p, q, x, l.weights.data(), go, &mut w[0], Some(&mut gi));
                            Some(gi)
                        } else {
                            tensor::linear_backward_raw(p, q, x, l.weights.data(), go, &mut w[0], None);
                            None
                        }
                    })
                }
                Layer::Neuron(n) => {
                    let saved = cache.neurons[idx].as_ref().expect("cached neuron state");
                    let GradSeq::Steps(steps) = grad else {
                        unreachable!("neuron outputs vary over time");
                    };
                    let len = saved.potentials[0].len();
                    let scale = scales[idx].as_deref();
                    let mut carried = vec![0.0f64; len];
                    let mut grad_scale = vec![0.0f64; len];
                    let mut out_steps = vec![Vec::new(); timesteps];
                    for t in (0..timesteps).rev() {
                        let mut gp = vec![0.0f64; len];
                        neuron::lif_backward_raw(
                            &n.config,
                            &saved.potentials[t],
                            &saved.outs[t],
                            scale,
                            &steps[t],
                            &carried,
                            &mut gp,
                            &mut grad_scale,
                        );
                        if scale.is_some() {
                            let total = &mut acc.grads[idx][0];
                            for (a, &g) in total.iter_mut().zip(&grad_scale) {
                                *a += g;
                            }
                        }
                        for (c, &g) in carried.iter_mut().zip(&gp) {
                            *c = n.config.tau as f64 * g;
                        }
                        out_steps[t] = gp;
                    }
                    GradSeq::Steps(out_steps)
                }
            };
        }
    }
}

fn backprop_linear_map(
    input: &Seq,
    grad: GradSeq,
    mut step: impl FnMut(&[f32], &[f64]) -> Option<Vec<f64>>,
) -> GradSeq {
    match (input, grad) {
        (Seq::Static(x), GradSeq::Static(g)) => GradSeq::Static(step(x, &g).unwrap_or_default()),
        (Seq::Steps(xs), GradSeq::Steps(gs)) => GradSeq::Steps(
            xs.iter()
                .zip(&gs)
                .map(|(x, g)| step(x, g).unwrap_or_default())
                .collect(),
        ),
        _ => unreachable!("gradient and activation sequences disagree"),
    }
}

fn check_timesteps(t: usize) -> Result<()> {
    if t == 0 {
        return Err(Error::Input("timesteps must be at least 1".into()));
    }
    Ok(())
}

fn uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt() as f32;
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

fn output_shape(idx: usize, layer: &Layer, input: &[usize]) -> Result<Vec<usize>> {
    match layer {
        Layer::Conv(c) => {
            if c.bias.shape() != [c.weights.out_channels()] {
                return Err(Error::dim("conv bias", c.bias.shape(), &[c.weights.out_channels()]));
            }
            Ok(c.weights.geometry(input)?.output_shape().to_vec())
        }
        Layer::Linear(l) => {
            let ws = l.weights.shape();
            let p: usize = input.iter().product();
            if ws.len() != 2 || ws[0] != p {
                return Err(Error::dim("linear", input, ws));
            }
            if l.bias.shape() != [ws[1]] {
                return Err(Error::dim("linear bias", l.bias.shape(), &[ws[1]]));
            }
            Ok(vec![ws[1]])
        }
        Layer::Neuron(n) => {
            n.config.validate()?;
            neuron::feature_dims(input).map_err(|e| Error::Topology {
                layer: idx,
                reason: e.to_string(),
            })?;
            if let Some(a) = &n.coefficient {
                a.check(input)?;
            }
            Ok(input.to_vec())
        }
    }
}

fn validate_chain(input_shape: &[usize], layers: &[Layer], folded: bool) -> Result<Vec<Vec<usize>>> {
    if layers.is_empty() {
        return Err(Error::Input("network has no layers".into()));
    }
    if !matches!(layers.last(), Some(Layer::Linear(_))) {
        return Err(Error::Topology {
            layer: layers.len() - 1,
            reason: "the final layer must be a linear head".into(),
        });
    }
    let mut shapes = Vec::with_capacity(layers.len());
    let mut shape = input_shape.to_vec();
    for (idx, layer) in layers.iter().enumerate() {
        if let Layer::Neuron(n) = layer {
            if !matches!(layers.get(idx + 1), Some(Layer::Conv(_) | Layer::Linear(_))) {
                return Err(Error::Topology {
                    layer: idx,
                    reason: "a spiking layer must feed a convolution or linear layer".into(),
                });
            }
            if folded && n.coefficient.is_some() {
                return Err(Error::Topology {
                    layer: idx,
                    reason: "folded networks carry no spike coefficients".into(),
                });
            }
        }
        shape = output_shape(idx, layer, &shape)?;
        shapes.push(shape.clone());
    }
    Ok(shapes)
}

pub(crate) fn softmax_cross_entropy(logits: &[f32], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let exps: Vec<f64> = logits.iter().map(|&v| (v as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() + max - logits[label] as f64;
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    (loss, grad)
}

/// Index of the first maximal logit.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug)]
enum Seq {
    Static(Vec<f32>),
    Steps(Vec<Vec<f32>>),
}

impl Seq {
    fn at(&self, t: usize) -> &[f32] {
        match self {
            Seq::Static(x) => x,
            Seq::Steps(s) => &s[t],
        }
    }

    fn is_static(&self) -> bool {
        matches!(self, Seq::Static(_))
    }

    fn map(&self, mut f: impl FnMut(&[f32]) -> Vec<f32>) -> Seq {
        match self {
            Seq::Static(x) => Seq::Static(f(x)),
            Seq::Steps(s) => Seq::Steps(s.iter().map(|x| f(x)).collect()),
        }
    }
}

enum GradSeq {
    Static(Vec<f64>),
    Steps(Vec<Vec<f64>>),
}

impl GradSeq {
    /// Sums per-step adjoints when the matching activation was time-invariant.
    fn collapse_if(self, input_static: bool) -> GradSeq {
        match self {
            GradSeq::Steps(steps) if input_static => {
                let mut sum = vec![0.0f64; steps[0].len()];
                for s in &steps {
                    for (a, &g) in sum.iter_mut().zip(s) {
                        *a += g;
                    }
                }
                GradSeq::Static(sum)
            }
            other => other,
        }
    }
}

struct NeuronCache {
    potentials: Vec<Vec<f32>>,
    outs: Vec<Vec<f32>>,
}

struct Cache {
    inputs: Vec<Option<Seq>>,
    neurons: Vec<Option<NeuronCache>>,
}

impl Cache {
    fn new(layers: usize) -> Self {
        Self {
            inputs: (0..layers).map(|_| None).collect(),
            neurons: (0..layers).map(|_| None).collect(),
        }
    }

    fn into_trace(self, net: &Network) -> Trace {
        let mut neurons = Vec::new();
        for (idx, saved) in self.neurons.into_iter().enumerate() {
            let Some(saved) = saved else { continue };
            let shape = net.layer_output_shape(idx).to_vec();
            let scaled = match self.inputs.get(idx + 1).and_then(|s| s.as_ref()) {
                Some(Seq::Steps(s)) => s.clone(),
                _ => saved.outs.clone(),
            };
            let wrap = |v: Vec<Vec<f32>>| -> Vec<Tensor> {
                v.into_iter()
                    .map(|d| Tensor::new(shape.clone(), d).expect("trace shape"))
                    .collect()
            };
            neurons.push(NeuronTrace {
                layer: idx,
                potentials: wrap(saved.potentials),
                spikes: wrap(saved.outs),
                scaled: wrap(scaled),
            });
        }
        Trace { neurons }
    }
}

pub(crate) struct BatchResult {
    pub loss: f64,
    pub correct: usize,
    /// Per neuron layer (in layer order): summed outputs and element counts.
    pub spike_counts: Vec<f64>,
    pub spike_totals: Vec<f64>,
    pub gradients: Gradients,
}

/// Per-layer f64 gradient buffers in activation layout for coefficients.
struct Accumulator {
    grads: Vec<Vec<Vec<f64>>>,
    loss: f64,
    correct: usize,
    spike_counts: Vec<f64>,
    spike_totals: Vec<f64>,
}

impl Accumulator {
    fn new(net: &Network) -> Self {
        let grads = net
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| match l {
                Layer::Conv(c) => vec![vec![0.0; c.weights.weights().len()], vec![0.0; c.bias.len()]],
                Layer::Linear(lin) => vec![vec![0.0; lin.weights.len()], vec![0.0; lin.bias.len()]],
                Layer::Neuron(n) => match n.coefficient {
                    Some(_) => vec![vec![0.0; net.shapes[i].iter().product()]],
                    None => Vec::new(),
                },
            })
            .collect();
        let neurons = net.layers.iter().filter(|l| matches!(l, Layer::Neuron(_))).count();
        Self {
            grads,
            loss: 0.0,
            correct: 0,
            spike_counts: vec![0.0; neurons],
            spike_totals: vec![0.0; neurons],
        }
    }

    fn record_rates(&mut self, cache: &Cache) {
        for (slot, saved) in cache.neurons.iter().flatten().enumerate() {
            for o in &saved.outs {
                self.spike_counts[slot] += o.iter().map(|&v| v as f64).sum::<f64>();
                self.spike_totals[slot] += o.len() as f64;
            }
        }
    }

    fn merge(&mut self, other: &Accumulator) {
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            for (a, b) in mine.iter_mut().zip(theirs) {
                for (x, &y) in a.iter_mut().zip(b) {
                    *x += y;
                }
            }
        }
        self.loss += other.loss;
        self.correct += other.correct;
        for (a, b) in self.spike_counts.iter_mut().zip(&other.spike_counts) {
            *a += b;
        }
        for (a, b) in self.spike_totals.iter_mut().zip(&other.spike_totals) {
            *a += b;
        }
    }

    fn finish(&self, net: &Network) -> Result<Gradients> {
        let mut tensors = Vec::new();
        for (idx, layer) in net.layers.iter().enumerate() {
            let bufs = &self.grads[idx];
            match layer {
                Layer::Conv(c) => {
                    tensors.push(Tensor::new(c.weights.weights().shape().to_vec(), tensor::to_f32(&bufs[0]))?);
                    tensors.push(Tensor::new(c.bias.shape().to_vec(), tensor::to_f32(&bufs[1]))?);
                }
                Layer::Linear(l) => {
                    tensors.push(Tensor::new(l.weights.shape().to_vec(), tensor::to_f32(&bufs[0]))?);
                    tensors.push(Tensor::new(l.bias.shape().to_vec(), tensor::to_f32(&bufs[1]))?);
                }
                Layer::Neuron(n) => {
                    if let Some(a) = &n.coefficient {
                        let reduced = a.reduce(net.layer_input_shape(idx), &bufs[0])?;
                        tensors.push(Tensor::new(a.values().shape().to_vec(), tensor::to_f32(&reduced))?);
                    }
                }
            }
        }
        Ok(Gradients { tensors })
    }
}
