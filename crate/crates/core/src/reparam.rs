//! Re-parameterization: folding spike coefficients into the consumer layer.
//!
//! A neuron layer emitting `a * o` feeds a convolution `K`. Because the
//! convolution is linear in its input, `conv(a * o, K)` equals a convolution of
//! the binary spikes `o` with kernels whose taps absorb the coefficient of the
//! input element they read:
//!
//! * layer-wise `a`: `K' = a * K`, still shared;
//! * channel-wise `a`: `K'[i,j,m,n] = a[m] * K[i,j,m,n]`, still shared;
//! * element-wise `a`: the coefficient depends on the input position, so every
//!   output position `(k, l)` gets its own kernel
//!   `K'[k,l,i,j,m,n] = a[m, k*s+i-pad, l*s+j-pad] * K[i,j,m,n]`. Taps that
//!   read the padding band keep the unscaled entry; they multiply zero.
//!
//! Linear consumers absorb the coefficient into the matching weight rows.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{argmax, ConvLayer, ConvWeights, Layer, LinearLayer, Network};
use crate::neuron::{feature_dims, CoefficientTensor, Granularity};
use crate::tensor::{ConvKernel, LocalKernel, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub enum FoldedKernel {
    Shared(ConvKernel),
    Local(LocalKernel),
}

/// Folds coefficients over a consumer's input maps into a shared kernel.
pub fn fold_pair(a: &CoefficientTensor, kernel: &ConvKernel) -> Result<FoldedKernel> {
    let m = kernel.in_channels();
    let values = a.values().data();
    match a.granularity() {
        Granularity::Layer => {
            let s = values[0];
            let w = kernel.weights().map(|k| s * k);
            Ok(FoldedKernel::Shared(ConvKernel::new(w, kernel.stride(), kernel.padding())?))
        }
        Granularity::Channel => {
            if a.values().shape()[0] != m {
                return Err(Error::dim("fold_pair", a.values().shape(), kernel.weights().shape()));
            }
            let n = kernel.out_channels();
            let w = Tensor::from_fn(kernel.weights().shape(), |idx| {
                let ch = (idx / n) % m;
                values[ch] * kernel.weights().data()[idx]
            });
            Ok(FoldedKernel::Shared(ConvKernel::new(w, kernel.stride(), kernel.padding())?))
        }
        Granularity::Element => {
            let s = a.values().shape();
            if s[0] != m {
                return Err(Error::dim("fold_pair", s, kernel.weights().shape()));
            }
            let input_shape = [s[1], s[2], s[0]];
            let local = LocalKernel::broadcast(kernel, &input_shape)?;
            Ok(FoldedKernel::Local(scale_local(a, local, &input_shape)?))
        }
    }
}

/// Scales an unshared kernel by coefficients over its `[H, W, M]` input.
fn scale_local(a: &CoefficientTensor, mut local: LocalKernel, input_shape: &[usize]) -> Result<LocalKernel> {
    a.check(input_shape)?;
    let g = local.geometry(input_shape)?;
    let (kk, m, n) = (g.ksize, g.in_c, g.out_c);
    let per_position = kk * kk * m * n;
    let w = local.weights_mut().data_mut();
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let base = (oy * g.out_w + ox) * per_position;
            for i in 0..kk {
                let Some(iy) = g.source(oy, i, g.in_h) else { continue };
                for j in 0..kk {
                    let Some(ix) = g.source(ox, j, g.in_w) else { continue };
                    for ch in 0..m {
                        let coeff = a.at(iy, ix, ch);
                        let row = base + ((i * kk + j) * m + ch) * n;
                        for v in &mut w[row..row + n] {
                            *v *= coeff;
                        }
                    }
                }
            }
        }
    }
    Ok(local)
}

/// Scales the rows of a `[P, Q]` weight matrix by coefficients over the
/// flattened `[H, W, C]` activation feeding it.
pub fn fold_linear(a: &CoefficientTensor, weights: &Tensor, activation_shape: &[usize]) -> Result<Tensor> {
    let scale = a.expand(activation_shape)?;
    let ws = weights.shape();
    if ws.len() != 2 || ws[0] != scale.len() {
        return Err(Error::dim("fold_linear", activation_shape, ws));
    }
    let q = ws[1];
    Ok(Tensor::from_fn(ws, |idx| scale[idx / q] * weights.data()[idx]))
}

/// An inference network: binary spikes everywhere, coefficients folded away.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldedNetwork(Network);

impl FoldedNetwork {
    pub fn network(&self) -> &Network {
        &self.0
    }

    pub fn into_network(self) -> Network {
        self.0
    }
}

impl TryFrom<Network> for FoldedNetwork {
    type Error = Error;

    fn try_from(net: Network) -> Result<Self> {
        if !net.is_folded() {
            return Err(Error::Input("network has not been folded".into()));
        }
        Ok(Self(net))
    }
}

/// Folds every neuron layer's coefficient into its consumer. The first layer
/// reads raw inputs and is left untouched.
pub fn fold_network(net: &Network) -> Result<FoldedNetwork> {
    let mut folded = net.clone();
    let n = folded.layers().len();
    for idx in 0..n {
        let coefficient = match &folded.layers()[idx] {
            Layer::Neuron(neuron) => neuron.coefficient.clone(),
            _ => continue,
        };
        let Some(a) = coefficient else { continue };
        let act_shape = net.layer_output_shape(idx).to_vec();
        let layers = folded.layers_mut();
        let (head, tail) = layers.split_at_mut(idx + 1);
        let consumer = tail.first_mut().ok_or_else(|| Error::Topology {
            layer: idx,
            reason: "folding precondition violated: spiking layer has no consumer".into(),
        })?;
        match consumer {
            Layer::Conv(ConvLayer { weights, .. }) => {
                let replaced = match weights {
                    ConvWeights::Shared(k) => match fold_pair(&a, k)? {
                        FoldedKernel::Shared(k) => ConvWeights::Shared(k),
                        FoldedKernel::Local(k) => ConvWeights::Local(k),
                    },
                    ConvWeights::Local(k) => ConvWeights::Local(scale_local(&a, k.clone(), &act_shape)?),
                };
                *weights = replaced;
            }
            Layer::Linear(LinearLayer { weights, .. }) => {
                *weights = fold_linear(&a, weights, &act_shape)?;
            }
            Layer::Neuron(_) => {
                return Err(Error::Topology {
                    layer: idx,
                    reason: "folding precondition violated: consumer is another spiking layer".into(),
                })
            }
        }
        if let Layer::Neuron(neuron) = &mut head[idx] {
            neuron.coefficient = None;
        }
    }
    folded.set_folded();
    Network::new(folded.input_shape().to_vec(), folded.layers().to_vec(), true).map(FoldedNetwork)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub samples: usize,
    pub max_abs_diff: f64,
    pub argmax_agreement: f64,
}

impl EquivalenceReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_abs_diff <= tol && self.argmax_agreement == 1.0
    }
}

/// Runs both networks on every input and compares their logits.
pub fn verify_equivalence(
    source: &Network,
    folded: &Network,
    inputs: &[&[f32]],
    timesteps: usize,
) -> Result<EquivalenceReport> {
    if timesteps == 0 {
        return Err(Error::Input("timesteps must be at least 1".into()));
    }
    if source.input_shape() != folded.input_shape() || source.num_classes() != folded.num_classes() {
        return Err(Error::dim("verify_equivalence", source.input_shape(), folded.input_shape()));
    }
    let expected: usize = source.input_shape().iter().product();
    if let Some(bad) = inputs.iter().find(|x| x.len() != expected) {
        return Err(Error::dim("verify_equivalence", &[bad.len()], source.input_shape()));
    }
    let sa = source.expanded_coefficients()?;
    let sb = folded.expanded_coefficients()?;
    let per: Vec<(f64, bool)> = inputs
        .par_iter()
        .map(|x| {
            let la = source.logits_raw(x, timesteps, &sa);
            let lb = folded.logits_raw(x, timesteps, &sb);
            let diff = la
                .iter()
                .zip(&lb)
                .map(|(&p, &q)| (p as f64 - q as f64).abs())
                .fold(0.0, f64::max);
            (diff, argmax(&la) == argmax(&lb))
        })
        .collect();
    let agree = per.iter().filter(|(_, same)| *same).count();
    Ok(EquivalenceReport {
        samples: inputs.len(),
        max_abs_diff: per.iter().map(|(d, _)| *d).fold(0.0, f64::max),
        argmax_agreement: if inputs.is_empty() {
            1.0
        } else {
            agree as f64 / inputs.len() as f64
        },
    })
}

/// Deployment cost of one synaptic layer under a one-to-one neuron and
/// synapse mapping.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer: usize,
    pub kind: String,
    /// Stored weight entries (biases excluded).
    pub params_before: usize,
    pub params_after: usize,
    /// Coefficient entries of the spiking layer feeding this one.
    pub coefficients_before: usize,
    /// Physical connections: summed non-padding fan-in over all outputs.
    pub synapses_before: usize,
    pub synapses_after: usize,
    /// Per-timestep multiplications. Binary spike inputs need none.
    pub multiplies_before: usize,
    pub multiplies_after: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
}

impl CostReport {
    pub fn total_params_before(&self) -> usize {
        self.layers.iter().map(|l| l.params_before + l.coefficients_before).sum()
    }

    pub fn total_params_after(&self) -> usize {
        self.layers.iter().map(|l| l.params_after).sum()
    }

    pub fn total_synapses_before(&self) -> usize {
        self.layers.iter().map(|l| l.synapses_before).sum()
    }

    pub fn total_synapses_after(&self) -> usize {
        self.layers.iter().map(|l| l.synapses_after).sum()
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<6} {:<7} {:>12} {:>12} {:>8} {:>12} {:>12} {:>12} {:>12}",
            "layer", "kind", "params", "params'", "coeffs", "synapses", "synapses'", "mults/t", "mults'/t"
        )?;
        for l in &self.layers {
            writeln!(
                f,
                "{:<6} {:<7} {:>12} {:>12} {:>8} {:>12} {:>12} {:>12} {:>12}",
                l.layer,
                l.kind,
                l.params_before,
                l.params_after,
                l.coefficients_before,
                l.synapses_before,
                l.synapses_after,
                l.multiplies_before,
                l.multiplies_after
            )?;
        }
        write!(
            f,
            "total  params {} -> {}, synapses {} -> {}",
            self.total_params_before(),
            self.total_params_after(),
            self.total_synapses_before(),
            self.total_synapses_after()
        )
    }
}

struct SynapticLayer {
    params: usize,
    synapses: usize,
    /// Input is real-valued (raw data or scaled spikes).
    real_input: bool,
    coefficients: usize,
    kind: &'static str,
}

fn synaptic_layers(net: &Network) -> Result<Vec<(usize, SynapticLayer)>> {
    let layers = net.layers();
    let mut out = Vec::new();
    for (idx, layer) in layers.iter().enumerate() {
        let feeding = if idx == 0 { None } else { Some(&layers[idx - 1]) };
        let (real_input, coefficients) = match feeding {
            None => (true, 0),
            Some(Layer::Neuron(n)) => match &n.coefficient {
                Some(a) => (true, a.values().len()),
                None => (false, 0),
            },
            Some(_) => (true, 0),
        };
        let entry = match layer {
            Layer::Conv(c) => {
                let g = c.weights.geometry(net.layer_input_shape(idx))?;
                let mut synapses = 0;
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        synapses += g.fan_in(oy, ox) * g.out_c;
                    }
                }
                SynapticLayer {
                    params: c.weights.weights().len(),
                    synapses,
                    real_input,
                    coefficients,
                    kind: match c.weights {
                        ConvWeights::Shared(_) => "conv",
                        ConvWeights::Local(_) => "local",
                    },
                }
            }
            Layer::Linear(l) => SynapticLayer {
                params: l.weights.len(),
                synapses: l.weights.len(),
                real_input,
                coefficients,
                kind: "linear",
            },
            Layer::Neuron(n) => {
                feature_dims(net.layer_input_shape(idx))?;
                let _ = n;
                continue;
            }
        };
        out.push((idx, entry));
    }
    Ok(out)
}

/// Compares storage, connectivity and arithmetic before and after folding.
pub fn cost_report(source: &Network, folded: &Network) -> Result<CostReport> {
    let before = synaptic_layers(source)?;
    let after = synaptic_layers(folded)?;
    if before.len() != after.len() || before.iter().zip(&after).any(|(a, b)| a.0 != b.0) {
        return Err(Error::Input("networks do not share a layer topology".into()));
    }
    let layers = before
        .into_iter()
        .zip(after)
        .map(|((idx, b), (_, a))| {
            let mults = |l: &SynapticLayer| {
                if l.real_input {
                    // one multiply per connection, plus scaling each spike by its coefficient
                    l.synapses + if l.coefficients > 0 { scaled_neurons(source, idx) } else { 0 }
                } else {
                    0
                }
            };
            LayerCost {
                layer: idx,
                kind: if b.kind == a.kind {
                    b.kind.to_string()
                } else {
                    format!("{}>{}", b.kind, a.kind)
                },
                params_before: b.params,
                params_after: a.params,
                coefficients_before: b.coefficients,
                synapses_before: b.synapses,
                synapses_after: a.synapses,
                multiplies_before: mults(&b),
                multiplies_after: mults(&a),
            }
        })
        .collect();
    Ok(CostReport { layers })
}

fn scaled_neurons(net: &Network, consumer: usize) -> usize {
    net.layer_input_shape(consumer).iter().product()
}
