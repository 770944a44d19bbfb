//! Entropy and spike statistics.
//!
//! The representation capacity of a code is the largest entropy it can
//! attain: one bit for a binary spike, `b` bits for a `b`-bit real value.
//! [`capacity_bound`] gives that maximum and [`empirical_entropy`] measures
//! what a given sample set actually uses.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Layer, Network, Trace};
use crate::neuron::feature_dims;
use crate::tensor::Tensor;

/// How samples are grouped before counting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Binning {
    /// One bin per distinct value. Suited to spikes and quantized codes.
    Exact,
    /// Equal-width bins spanning the observed range.
    Bins(usize),
}

impl Default for Binning {
    fn default() -> Self {
        Binning::Bins(256)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValueHistogram {
    /// Bin lower edges, or the exact values for [`Binning::Exact`].
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub total: u64,
}

impl ValueHistogram {
    pub fn build(samples: &[f32], binning: Binning) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Input("entropy of an empty sample set".into()));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("samples must be finite".into()));
        }
        let total = samples.len() as u64;
        match binning {
            Binning::Exact => {
                let mut map: BTreeMap<u32, u64> = BTreeMap::new();
                for &v in samples {
                    // -0.0 and 0.0 are the same value
                    let key = if v == 0.0 { 0.0f32 } else { v };
                    *map.entry(ordered_bits(key)).or_default() += 1;
                }
                let (edges, counts) = map
                    .into_iter()
                    .map(|(k, c)| (unordered(k) as f64, c))
                    .unzip();
                Ok(Self { edges, counts, total })
            }
            Binning::Bins(n) => {
                if n == 0 {
                    return Err(Error::Input("bin count must be positive".into()));
                }
                let lo = samples.iter().copied().fold(f32::INFINITY, f32::min) as f64;
                let hi = samples.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
                let width = (hi - lo) / n as f64;
                let mut counts = vec![0u64; n];
                for &v in samples {
                    let idx = if width > 0.0 {
                        (((v as f64 - lo) / width) as usize).min(n - 1)
                    } else {
                        0
                    };
                    counts[idx] += 1;
                }
                let edges = (0..n).map(|i| lo + i as f64 * width).collect();
                Ok(Self { edges, counts, total })
            }
        }
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64 / self.total as f64).collect()
    }

    pub fn entropy(&self) -> f64 {
        entropy_of(&self.probabilities())
    }
}

// Maps f32 bits to an order-preserving u32 so the BTreeMap sorts by value.
fn ordered_bits(v: f32) -> u32 {
    let b = v.to_bits();
    if b >> 31 == 1 {
        !b
    } else {
        b | 0x8000_0000
    }
}

fn unordered(k: u32) -> f32 {
    if k >> 31 == 1 {
        f32::from_bits(k & 0x7fff_ffff)
    } else {
        f32::from_bits(!k)
    }
}

/// Shannon entropy in bits. Zero-probability entries contribute nothing.
pub fn entropy_of(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.log2())
        .sum::<f64>()
}

pub fn empirical_entropy(samples: &Tensor, binning: Binning) -> Result<f64> {
    Ok(ValueHistogram::build(samples.data(), binning)?.entropy())
}

/// Maximum entropy of a `bit_width`-bit code.
pub fn capacity_bound(bit_width: u32) -> Result<f64> {
    if bit_width == 0 {
        return Err(Error::Input("bit width must be at least 1".into()));
    }
    Ok(bit_width as f64)
}

/// Draws `trials` random distributions over `n` outcomes and checks that none
/// has more entropy than the uniform one.
pub fn uniformity_maximizes(n: usize, trials: usize, seed: u64) -> bool {
    assert!(n >= 2, "need at least two outcomes");
    let uniform = entropy_of(&vec![1.0 / n as f64; n]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..trials).all(|t| {
        let mut p: Vec<f64> = (0..n)
            .map(|_| {
                let u: f64 = rng.gen();
                // mix flat draws with peaked ones so low-entropy cases appear
                if t % 2 == 0 {
                    u
                } else {
                    u.powi(8)
                }
            })
            .collect();
        let s: f64 = p.iter().sum();
        if s == 0.0 {
            p[0] = 1.0;
        } else {
            p.iter_mut().for_each(|v| *v /= s);
        }
        uniform + 1e-12 >= entropy_of(&p)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpikeStats {
    pub layer: usize,
    /// Spikes per neuron per timestep.
    pub firing_rate: f64,
    /// Mean coefficient magnitude; 1 for plain binary layers.
    pub mean_abs_coefficient: f64,
    pub negative_fraction: f64,
    /// Entropy of the binary spikes and of the scaled outputs.
    pub spike_entropy: f64,
    pub scaled_entropy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpikeStats {
    pub layers: Vec<LayerSpikeStats>,
}

/// Summarizes a recorded forward pass of `net`.
pub fn spike_stats(trace: &Trace, net: &Network) -> Result<SpikeStats> {
    let mut layers = Vec::with_capacity(trace.neurons.len());
    for nt in &trace.neurons {
        let Some(Layer::Neuron(neuron)) = net.layers().get(nt.layer) else {
            return Err(Error::Input(format!("trace layer {} is not a spiking layer", nt.layer)));
        };
        let mut fired = 0.0;
        let mut slots = 0usize;
        for s in &nt.spikes {
            fired += s.data().iter().map(|&v| v as f64).sum::<f64>();
            slots += s.len();
        }
        let (mean_abs, negative) = match &neuron.coefficient {
            Some(a) => {
                let v = a.values().data();
                (
                    v.iter().map(|x| x.abs() as f64).sum::<f64>() / v.len() as f64,
                    v.iter().filter(|&&x| x < 0.0).count() as f64 / v.len() as f64,
                )
            }
            None => (1.0, 0.0),
        };
        let concat = |ts: &[Tensor]| -> Vec<f32> { ts.iter().flat_map(|t| t.data().iter().copied()).collect() };
        let spikes = concat(&nt.spikes);
        let scaled = concat(&nt.scaled);
        layers.push(LayerSpikeStats {
            layer: nt.layer,
            firing_rate: if slots > 0 { fired / slots as f64 } else { 0.0 },
            mean_abs_coefficient: mean_abs,
            negative_fraction: negative,
            spike_entropy: if spikes.is_empty() {
                0.0
            } else {
                ValueHistogram::build(&spikes, Binning::Exact)?.entropy()
            },
            scaled_entropy: if scaled.is_empty() {
                0.0
            } else {
                ValueHistogram::build(&scaled, Binning::default())?.entropy()
            },
        });
    }
    Ok(SpikeStats { layers })
}

/// Writes an `[H, W, C]` map as CSV: one row per spatial position, one column
/// per channel.
pub fn write_channel_csv(w: impl Write, map: &Tensor) -> Result<()> {
    let (h, wd, c) = feature_dims(map.shape())?;
    let to_err = |e: csv::Error| Error::Io(e.into());
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["h".to_string(), "w".to_string()];
    header.extend((0..c).map(|ch| format!("c{ch}")));
    out.write_record(&header).map_err(to_err)?;
    for y in 0..h {
        for x in 0..wd {
            let row = &map.data()[(y * wd + x) * c..(y * wd + x + 1) * c];
            let mut record = vec![y.to_string(), x.to_string()];
            record.extend(row.iter().map(|v| v.to_string()));
            out.write_record(&record).map_err(to_err)?;
        }
    }
    out.flush()?;
    Ok(())
}
