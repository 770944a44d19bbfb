//! Iterative leaky integrate-and-fire neurons with a rectangular surrogate
//! gradient, and learnable spike-scaling coefficients.
//!
//! Activations handed to a neuron layer use the feature-map layout `[H, W, C]`
//! (a rank-1 activation `[P]` is treated as `[1, 1, P]`). Coefficient tensors
//! keep their own `[C, H, W]` layout; [`CoefficientTensor::expand`] and
//! [`CoefficientTensor::reduce`] translate between the two.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronConfig {
    pub tau: f32,
    pub v_th: f32,
    pub u_rest: f32,
}

impl Default for NeuronConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            v_th: 0.5,
            u_rest: 0.0,
        }
    }
}

impl NeuronConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Input(format!("tau must lie in (0, 1], got {}", self.tau)));
        }
        if self.v_th.is_nan() || self.u_rest.is_nan() || self.v_th <= self.u_rest {
            return Err(Error::Input(format!(
                "v_th ({}) must exceed u_rest ({})",
                self.v_th, self.u_rest
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Layer,
    Channel,
    Element,
}

impl Granularity {
    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::Layer => "layer",
            Granularity::Channel => "channel",
            Granularity::Element => "element",
        }
    }

    /// Coefficient shape for a `[C, H, W]` feature map.
    pub fn coefficient_shape(self, channels: usize, height: usize, width: usize) -> [usize; 3] {
        match self {
            Granularity::Layer => [1, 1, 1],
            Granularity::Channel => [channels, 1, 1],
            Granularity::Element => [channels, height, width],
        }
    }
}

impl std::str::FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layer" => Ok(Granularity::Layer),
            "channel" => Ok(Granularity::Channel),
            "element" => Ok(Granularity::Element),
            other => Err(Error::Input(format!("unknown granularity `{other}`"))),
        }
    }
}

/// Splits an activation shape into `(H, W, C)`.
pub fn feature_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [h, w, c] => Ok((h, w, c)),
        [p] => Ok((1, 1, p)),
        _ => Err(Error::Input(format!(
            "neuron activations must be [H, W, C] or [P], got {shape:?}"
        ))),
    }
}

/// The learnable spike scale `a`, time-invariant and shared across a batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientTensor {
    granularity: Granularity,
    values: Tensor,
}

impl CoefficientTensor {
    pub fn new(granularity: Granularity, values: Tensor) -> Result<Self> {
        let ok = match *values.shape() {
            [1, 1, 1] => true,
            [_, 1, 1] => granularity != Granularity::Layer,
            [_, _, _] => granularity == Granularity::Element,
            _ => false,
        };
        if !ok {
            return Err(Error::Input(format!(
                "{}-wise coefficients cannot have shape {:?}",
                granularity.as_str(),
                values.shape()
            )));
        }
        Ok(Self {
            granularity,
            values,
        })
    }

    /// All-ones coefficients for an activation of the given shape.
    pub fn ones(granularity: Granularity, activation_shape: &[usize]) -> Result<Self> {
        let (h, w, c) = feature_dims(activation_shape)?;
        let shape = granularity.coefficient_shape(c, h, w);
        Self::new(granularity, Tensor::full(&shape, 1.0))
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Tensor {
        &mut self.values
    }

    pub fn is_identity(&self) -> bool {
        self.values.data().iter().all(|&v| v == 1.0)
    }

    /// Checks that this coefficient can scale an activation of `shape`.
    pub fn check(&self, shape: &[usize]) -> Result<()> {
        let (h, w, c) = feature_dims(shape)?;
        let expected = self.granularity.coefficient_shape(c, h, w);
        if self.values.shape() != expected {
            return Err(Error::dim("coefficient", self.values.shape(), &expected));
        }
        Ok(())
    }

    /// Coefficient for activation element `(h, w, c)`.
    #[inline]
    pub fn at(&self, h: usize, w: usize, c: usize) -> f32 {
        let s = self.values.shape();
        let v = self.values.data();
        match self.granularity {
            Granularity::Layer => v[0],
            Granularity::Channel => v[c],
            Granularity::Element => v[(c * s[1] + h) * s[2] + w],
        }
    }

    /// Broadcasts to a dense buffer in activation layout.
    pub fn expand(&self, shape: &[usize]) -> Result<Vec<f32>> {
        self.check(shape)?;
        let (h, w, c) = feature_dims(shape)?;
        let mut out = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out.push(self.at(y, x, ch));
                }
            }
        }
        Ok(out)
    }

    /// Sums an activation-layout buffer over the dimensions this coefficient
    /// broadcasts along, returning values in coefficient layout.
    pub fn reduce(&self, shape: &[usize], grad: &[f64]) -> Result<Vec<f64>> {
        self.check(shape)?;
        let (h, w, c) = feature_dims(shape)?;
        let s = self.values.shape();
        let mut out = vec![0.0f64; self.values.len()];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let g = grad[(y * w + x) * c + ch];
                    let at = match self.granularity {
                        Granularity::Layer => 0,
                        Granularity::Channel => ch,
                        Granularity::Element => (ch * s[1] + y) * s[2] + x,
                    };
                    out[at] += g;
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeuronState {
    pub u: Tensor,
}

impl NeuronState {
    pub fn resting(shape: &[usize], cfg: &NeuronConfig) -> Self {
        Self {
            u: Tensor::full(shape, cfg.u_rest),
        }
    }
}

/// How the forward pass turns a membrane potential into an output.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Firing {
    /// Binary spikes, `o = [u >= v_th]`.
    #[default]
    Heaviside,
    /// `o = clamp(u, 0, 1)`, with the reset still triggered by `u >= v_th`.
    /// Its derivative equals the rectangular surrogate almost everywhere,
    /// which makes surrogate BPTT checkable by finite differences.
    ClampProxy,
}

impl Firing {
    #[inline]
    pub fn output(self, u: f32, v_th: f32) -> f32 {
        match self {
            Firing::Heaviside => {
                if u >= v_th {
                    1.0
                } else {
                    0.0
                }
            }
            Firing::ClampProxy => u.clamp(0.0, 1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LifStep {
    pub spikes: Tensor,
    /// Charged potential before reset.
    pub potential: Tensor,
    pub state: NeuronState,
}

pub fn lif_step(
    state: &NeuronState,
    input_current: &Tensor,
    cfg: &NeuronConfig,
) -> Result<(Tensor, NeuronState)> {
    let step = lif_step_traced(state, input_current, cfg, Firing::Heaviside)?;
    Ok((step.spikes, step.state))
}

pub fn lif_step_traced(
    state: &NeuronState,
    input_current: &Tensor,
    cfg: &NeuronConfig,
    firing: Firing,
) -> Result<LifStep> {
    input_current.expect_shape("lif_step", state.u.shape())?;
    let n = input_current.len();
    let mut spikes = vec![0.0f32; n];
    let mut potential = vec![0.0f32; n];
    let mut next = vec![0.0f32; n];
    lif_step_raw(
        cfg,
        firing,
        state.u.data(),
        input_current.data(),
        &mut potential,
        &mut spikes,
        &mut next,
    );
    let shape = input_current.shape().to_vec();
    Ok(LifStep {
        spikes: Tensor::new(shape.clone(), spikes)?,
        potential: Tensor::new(shape.clone(), potential)?,
        state: NeuronState {
            u: Tensor::new(shape, next)?,
        },
    })
}

#[inline]
pub(crate) fn lif_step_raw(
    cfg: &NeuronConfig,
    firing: Firing,
    u_prev: &[f32],
    current: &[f32],
    potential: &mut [f32],
    out: &mut [f32],
    u_next: &mut [f32],
) {
    for i in 0..current.len() {
        let u = cfg.tau * u_prev[i] + current[i];
        potential[i] = u;
        out[i] = firing.output(u, cfg.v_th);
        u_next[i] = if u >= cfg.v_th { cfg.u_rest } else { u };
    }
}

/// Rectangular pseudo-derivative: 1 on `[0, 1]` inclusive, 0 elsewhere.
#[inline]
pub fn surrogate(u: f32) -> f32 {
    if (0.0..=1.0).contains(&u) {
        1.0
    } else {
        0.0
    }
}

pub fn surrogate_grad(u: &Tensor) -> Tensor {
    u.map(surrogate)
}

pub fn apply_real_spike(spikes: &Tensor, a: &CoefficientTensor) -> Result<Tensor> {
    let scale = a.expand(spikes.shape())?;
    let data = spikes
        .data()
        .iter()
        .zip(&scale)
        .map(|(&o, &s)| s * o)
        .collect();
    Tensor::new(spikes.shape().to_vec(), data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LifGrads {
    pub grad_input_current: Tensor,
    /// Adjoint with respect to the carried (post-reset) potential of the
    /// previous step.
    pub grad_u_prev: Tensor,
    /// In coefficient layout; `None` when no coefficient was supplied.
    pub grad_a_partial: Option<Tensor>,
}

/// One reverse step of BPTT through a neuron layer.
///
/// `saved_u` is the charged potential and `saved_o` the output of the matching
/// forward step. `grad_out_scaled` is the adjoint of the scaled output
/// `a * o`, and `grad_u_next` the adjoint of the carried potential flowing back
/// from the following step. The reset is detached: `grad_u_next` is blocked at
/// positions that fired.
pub fn lif_backward_step(
    saved_u: &Tensor,
    saved_o: &Tensor,
    a: Option<&CoefficientTensor>,
    grad_out_scaled: &Tensor,
    grad_u_next: &Tensor,
    cfg: &NeuronConfig,
) -> Result<LifGrads> {
    let shape = saved_u.shape();
    saved_o.expect_shape("lif_backward_step", shape)?;
    grad_out_scaled.expect_shape("lif_backward_step", shape)?;
    grad_u_next.expect_shape("lif_backward_step", shape)?;
    let scale = match a {
        Some(a) => Some(a.expand(shape)?),
        None => None,
    };
    let n = saved_u.len();
    let mut grad_in = vec![0.0f64; n];
    let mut grad_a_act = vec![0.0f64; n];
    lif_backward_raw(
        cfg,
        saved_u.data(),
        saved_o.data(),
        scale.as_deref(),
        grad_out_scaled.data(),
        grad_u_next.data(),
        &mut grad_in,
        &mut grad_a_act,
    );
    let grad_a_partial = match a {
        Some(a) => {
            let reduced = a.reduce(shape, &grad_a_act)?;
            Some(Tensor::new(
                a.values().shape().to_vec(),
                crate::tensor::to_f32(&reduced),
            )?)
        }
        None => None,
    };
    let grad_u_prev = grad_in.iter().map(|&g| (cfg.tau as f64 * g) as f32).collect();
    Ok(LifGrads {
        grad_input_current: Tensor::new(shape.to_vec(), crate::tensor::to_f32(&grad_in))?,
        grad_u_prev: Tensor::new(shape.to_vec(), grad_u_prev)?,
        grad_a_partial,
    })
}

/// Writes the adjoint of the charged potential into `grad_potential` and
/// `grad_out * o` (the per-element coefficient adjoint) into `grad_scale`.
#[allow(clippy::too_many_arguments)]
#[inline]
pub(crate) fn lif_backward_raw<G: Copy + Into<f64>>(
    cfg: &NeuronConfig,
    potential: &[f32],
    out: &[f32],
    scale: Option<&[f32]>,
    grad_out: &[G],
    grad_u_next: &[G],
    grad_potential: &mut [f64],
    grad_scale: &mut [f64],
) {
    for i in 0..potential.len() {
        let g: f64 = grad_out[i].into();
        let a = scale.map_or(1.0, |s| s[i] as f64);
        let carried = if potential[i] >= cfg.v_th {
            0.0
        } else {
            grad_u_next[i].into()
        };
        grad_potential[i] = a * g * surrogate(potential[i]) as f64 + carried;
        grad_scale[i] = g * out[i] as f64;
    }
}
