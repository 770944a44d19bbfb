//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.
//!
//! MNIST is read from `$RSPK_MNIST_DIR`, falling back to `data/mnist` at the
//! workspace root. `RSPK_CRITERIA=1,3` restricts the run to some criteria.

use std::path::PathBuf;
use std::process::{Command, ExitCode};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use realspike::analysis::{capacity_bound, empirical_entropy, uniformity_maximizes, Binning};
use realspike::data_io::{load_idx, parse_idx_images, parse_idx_labels, read_model, write_idx_images, write_idx_labels, write_model, IdxDataset};
use realspike::network::{train, Schedule, TrainConfig};
use realspike::neuron::apply_real_spike;
use realspike::reparam::{cost_report, fold_network, fold_pair, verify_equivalence, FoldedKernel};
use realspike::tensor::{conv2d_forward, local_conv_forward};
use realspike::{
    Architecture, CoefficientTensor, ConvKernel, Firing, ForwardOptions, Granularity, LayerSpec, Network, NeuronConfig,
    Tensor,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn mnist_dir() -> PathBuf {
    std::env::var_os("RSPK_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

fn mnist() -> Result<&'static (IdxDataset, IdxDataset), String> {
    static DATA: OnceLock<Result<(IdxDataset, IdxDataset), String>> = OnceLock::new();
    DATA.get_or_init(|| {
        let dir = mnist_dir();
        let load = |images: &str, labels: &str| {
            load_idx(dir.join(images), dir.join(labels))
                .map_err(|e| format!("MNIST not found under {} ({e}); set RSPK_MNIST_DIR", dir.display()))
        };
        Ok((
            load("train-images-idx3-ubyte", "train-labels-idx1-ubyte")?,
            load("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?,
        ))
    })
    .as_ref()
    .map_err(Clone::clone)
}

/// MNIST hyper-parameters shared by the training criteria.
fn mnist_config(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        timesteps: 4,
        epochs,
        batch_size: 32,
        learning_rate: 2e-3,
        schedule: Schedule::Cosine,
        seed,
        ..Default::default()
    }
}

fn random_coefficient(g: Granularity, shape: [usize; 3], rng: &mut ChaCha8Rng) -> CoefficientTensor {
    let [h, w, c] = shape;
    let values = Tensor::from_fn(&g.coefficient_shape(c, h, w), |_| rng.gen_range(-2.0..2.0));
    CoefficientTensor::new(g, values).unwrap()
}

// 1. folded kernels reproduce conv(a * B, K) elementwise
fn fold_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let grans = [Granularity::Layer, Granularity::Channel, Granularity::Element];
    let mut worst = 0.0f64;
    let mut count = 0;
    for trial in 0..200 {
        let g = grans[trial % 3];
        let stride = 1 + (trial / 3) % 2;
        let padding = (trial / 6) % 2;
        let k = rng.gen_range(1..=3usize);
        let h = rng.gen_range(k.max(2)..=7);
        let w = rng.gen_range(k.max(2)..=7);
        let m = rng.gen_range(1..=3);
        let n = rng.gen_range(1..=3);
        let a = random_coefficient(g, [h, w, m], &mut rng);
        let kernel =
            ConvKernel::new(Tensor::from_fn(&[k, k, m, n], |_| rng.gen_range(-1.0..1.0)), stride, padding).unwrap();
        let b = Tensor::from_fn(&[h, w, m], |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
        let train_path = conv2d_forward(&apply_real_spike(&b, &a).unwrap(), &kernel).unwrap();
        let infer = match fold_pair(&a, &kernel).unwrap() {
            FoldedKernel::Shared(kk) => conv2d_forward(&b, &kk).unwrap(),
            FoldedKernel::Local(lk) => local_conv_forward(&b, &lk).unwrap(),
        };
        worst = worst.max(train_path.max_abs_diff(&infer).unwrap());
        count += 1;
    }
    outcome(worst <= 1e-6, format!("{count} triples, max |diff| {worst:.2e} (tol 1e-6)"))
}

// 2. trained element-wise network folds without changing its logits
fn end_to_end() -> Outcome {
    let (train_set, test_set) = match mnist() {
        Ok(d) => d,
        Err(e) => return outcome(false, e.clone()),
    };
    let arch = Architecture::mnist_small(Some(Granularity::Element), NeuronConfig::default());
    let net = Network::init(&arch, 0).unwrap();
    let (trained, report) = train(&net, train_set, None, &mnist_config(2, 0)).unwrap();
    let folded = fold_network(&trained).unwrap();
    let probe = test_set.take(1000);
    let inputs: Vec<&[f32]> = (0..probe.len()).map(|i| probe.image(i)).collect();
    let eq = verify_equivalence(&trained, folded.network(), &inputs, 4).unwrap();
    let pass = eq.argmax_agreement == 1.0 && eq.max_abs_diff <= 1e-4;
    outcome(
        pass,
        format!(
            "{} images, agreement {:.4}, max |logit diff| {:.2e} (tol 1e-4), final train loss {:.4}",
            eq.samples,
            eq.argmax_agreement,
            eq.max_abs_diff,
            report.epochs.last().unwrap().train_loss
        ),
    )
}

/// Independent f64 simulation of a clamp-proxy network, processed time-major.
mod reference {
    use super::*;

    pub struct Eval {
        pub loss: f64,
        pub logits: Vec<Vec<f64>>,
        /// Region of every charged potential: below 0, below threshold,
        /// below 1, or above.
        pub regions: Vec<u8>,
    }

    pub fn evaluate(
        arch: &Architecture,
        params: &[Vec<f64>],
        inputs: &[Vec<f64>],
        labels: &[usize],
        timesteps: usize,
    ) -> Eval {
        let mut regions = Vec::new();
        let mut all_logits = Vec::new();
        let mut loss = 0.0;
        for (x, &y) in inputs.iter().zip(labels) {
            let mut states: Vec<Vec<f64>> = vec![Vec::new(); arch.layers.len()];
            let mut sum = Vec::new();
            for _ in 0..timesteps {
                let mut act = x.clone();
                let mut shape = [arch.input_shape[0], arch.input_shape[1], arch.input_shape[2]];
                let mut p = 0;
                for (li, spec) in arch.layers.iter().enumerate() {
                    match spec {
                        LayerSpec::Conv {
                            kernel,
                            in_channels,
                            out_channels,
                            stride,
                            padding,
                            ..
                        } => {
                            let (w, b) = (&params[p], &params[p + 1]);
                            p += 2;
                            let (h_in, w_in) = (shape[0] as isize, shape[1] as isize);
                            let oh = (shape[0] + 2 * padding - kernel) / stride + 1;
                            let ow = (shape[1] + 2 * padding - kernel) / stride + 1;
                            let (m_, n_) = (*in_channels, *out_channels);
                            let mut out = vec![0.0; oh * ow * n_];
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    for n in 0..n_ {
                                        let mut s = b[n];
                                        for i in 0..*kernel {
                                            for j in 0..*kernel {
                                                let iy = (oy * stride + i) as isize - *padding as isize;
                                                let ix = (ox * stride + j) as isize - *padding as isize;
                                                if iy < 0 || ix < 0 || iy >= h_in || ix >= w_in {
                                                    continue;
                                                }
                                                for m in 0..m_ {
                                                    let xv = act[((iy as usize) * shape[1] + ix as usize) * m_ + m];
                                                    s += xv * w[((i * kernel + j) * m_ + m) * n_ + n];
                                                }
                                            }
                                        }
                                        out[(oy * ow + ox) * n_ + n] = s;
                                    }
                                }
                            }
                            act = out;
                            shape = [oh, ow, n_];
                        }
                        LayerSpec::Neuron { config, granularity } => {
                            let coeff = granularity.map(|_| {
                                p += 1;
                                &params[p - 1]
                            });
                            let u = &mut states[li];
                            if u.is_empty() {
                                *u = vec![config.u_rest as f64; act.len()];
                            }
                            let (tau, vth, rest) = (config.tau as f64, config.v_th as f64, config.u_rest as f64);
                            for (idx, v) in act.iter_mut().enumerate() {
                                let charged = tau * u[idx] + *v;
                                regions.push(if charged < 0.0 {
                                    0
                                } else if charged < vth {
                                    1
                                } else if charged < 1.0 {
                                    2
                                } else {
                                    3
                                });
                                let o = charged.clamp(0.0, 1.0);
                                u[idx] = if charged >= vth { rest } else { charged };
                                let scale = match (coeff, granularity) {
                                    (Some(a), Some(g)) => {
                                        let c = idx % shape[2];
                                        let hw = idx / shape[2];
                                        let (hh, ww) = (hw / shape[1], hw % shape[1]);
                                        match g {
                                            Granularity::Layer => a[0],
                                            Granularity::Channel => a[c],
                                            Granularity::Element => a[(c * shape[0] + hh) * shape[1] + ww],
                                        }
                                    }
                                    _ => 1.0,
                                };
                                *v = scale * o;
                            }
                        }
                        LayerSpec::Linear { inputs: pp, outputs: q } => {
                            let (w, b) = (&params[p], &params[p + 1]);
                            p += 2;
                            let mut out = b.clone();
                            for i in 0..*pp {
                                for (j, o) in out.iter_mut().enumerate() {
                                    *o += act[i] * w[i * q + j];
                                }
                            }
                            act = out;
                            shape = [1, 1, *q];
                        }
                    }
                }
                if sum.is_empty() {
                    sum = vec![0.0; act.len()];
                }
                for (s, v) in sum.iter_mut().zip(&act) {
                    *s += v / timesteps as f64;
                }
            }
            let max = sum.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = sum.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            loss += lse - sum[y];
            all_logits.push(sum);
        }
        Eval {
            loss: loss / inputs.len() as f64,
            logits: all_logits,
            regions,
        }
    }
}

fn gradcheck_arch(first: Granularity, second: Granularity) -> Architecture {
    let cfg = NeuronConfig::default();
    Architecture {
        input_shape: vec![6, 6, 1],
        layers: vec![
            LayerSpec::Conv {
                kernel: 3,
                in_channels: 1,
                out_channels: 3,
                stride: 2,
                padding: 1,
                local: false,
            },
            LayerSpec::Neuron {
                config: cfg,
                granularity: Some(first),
            },
            LayerSpec::Conv {
                kernel: 3,
                in_channels: 3,
                out_channels: 3,
                stride: 1,
                padding: 1,
                local: false,
            },
            LayerSpec::Neuron {
                config: cfg,
                granularity: Some(second),
            },
            LayerSpec::Linear { inputs: 27, outputs: 3 },
        ],
    }
}

struct GradCheck {
    params: usize,
    checked: usize,
    worst: f64,
    forward_gap: f64,
    groups_missing: Vec<String>,
    draw: u64,
}

/// Checks every parameter at one random point. Parameters whose probes
/// straddle a clamp kink or a reset are skipped.
fn gradient_case(first: Granularity, second: Granularity, seed: u64, draw: u64) -> GradCheck {
    const T: usize = 3;
    const EPS: f64 = 1e-3;
    const FLOOR: f64 = 1e-4;
    let arch = gradcheck_arch(first, second);
    let mut net = Network::init(&arch, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed * 1000 + draw);
    let names: Vec<String> = net.parameters().into_iter().map(|(n, _)| n).collect();
    for (name, p) in names.iter().zip(net.parameters_mut()) {
        let range = if name.ends_with("coefficient") {
            -1.5..2.0
        } else if name.ends_with("bias") {
            -0.1..0.3
        } else {
            -0.5..0.5
        };
        for v in p.data_mut() {
            *v = rng.gen_range(range.clone());
        }
    }
    let batch = 4;
    let inputs: Vec<Tensor> = (0..batch)
        .map(|_| Tensor::from_fn(&[6, 6, 1], |_| rng.gen_range(0.05..1.0)))
        .collect();
    let labels: Vec<usize> = (0..batch).map(|i| i % 3).collect();

    let (_, grads) = net.loss_and_grad(&inputs, &labels, T, Firing::ClampProxy).unwrap();
    let params: Vec<Vec<f64>> = net
        .parameters()
        .iter()
        .map(|(_, t)| t.data().iter().map(|&v| v as f64).collect())
        .collect();
    let xs: Vec<Vec<f64>> = inputs.iter().map(|t| t.data().iter().map(|&v| v as f64).collect()).collect();

    let base = reference::evaluate(&arch, &params, &xs, &labels, T);
    let mut forward_gap = 0.0f64;
    let opts = ForwardOptions::new(T).with_firing(Firing::ClampProxy);
    for (x, want) in inputs.iter().zip(&base.logits) {
        let got = net.forward(x, &opts).unwrap().logits;
        for (g, w) in got.data().iter().zip(want) {
            forward_gap = forward_gap.max((*g as f64 - w).abs());
        }
    }

    let mut checked = 0;
    let mut total = 0;
    let mut worst = 0.0f64;
    let mut groups_missing = Vec::new();
    for (ti, tensor) in params.iter().enumerate() {
        let mut group_checked = 0;
        for k in 0..tensor.len() {
            total += 1;
            let mut plus = params.clone();
            plus[ti][k] += EPS;
            let mut minus = params.clone();
            minus[ti][k] -= EPS;
            let ep = reference::evaluate(&arch, &plus, &xs, &labels, T);
            let em = reference::evaluate(&arch, &minus, &xs, &labels, T);
            // a kink or reset between the two probes invalidates the difference
            if ep.regions != base.regions || em.regions != base.regions {
                continue;
            }
            let fd = (ep.loss - em.loss) / (2.0 * EPS);
            let analytic = grads.tensors[ti].data()[k] as f64;
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(FLOOR);
            worst = worst.max(rel);
            checked += 1;
            group_checked += 1;
        }
        if group_checked == 0 {
            groups_missing.push(names[ti].clone());
        }
    }
    GradCheck {
        params: total,
        checked,
        worst,
        forward_gap,
        groups_missing,
        draw,
    }
}

// 3. surrogate BPTT against central differences of an independent simulator
fn gradient_correctness() -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for (first, second, seed) in [
        (Granularity::Element, Granularity::Channel, 3),
        (Granularity::Layer, Granularity::Element, 4),
        (Granularity::Channel, Granularity::Layer, 5),
    ] {
        // redraw until every tensor has entries clear of kinks
        let mut r = gradient_case(first, second, seed, 0);
        for draw in 1..20 {
            if r.groups_missing.is_empty() {
                break;
            }
            r = gradient_case(first, second, seed, draw);
        }
        let ok = r.params <= 500
            && r.worst <= 1e-3
            && r.forward_gap <= 1e-5
            && r.groups_missing.is_empty()
            && r.checked * 2 >= r.params;
        pass &= ok;
        parts.push(format!(
            "{}/{} (draw {}): {} of {} params checked, max rel err {:.2e}, forward gap {:.1e}{}",
            first.as_str(),
            second.as_str(),
            r.draw,
            r.checked,
            r.params,
            r.worst,
            r.forward_gap,
            if r.groups_missing.is_empty() {
                String::new()
            } else {
                format!(", unchecked groups {:?}", r.groups_missing)
            }
        ));
    }
    outcome(pass, format!("{} (tol 1e-3)", parts.join("; ")))
}

struct SweepRow {
    label: &'static str,
    accuracies: Vec<f64>,
}

impl SweepRow {
    fn mean(&self) -> f64 {
        self.accuracies.iter().sum::<f64>() / self.accuracies.len() as f64
    }

    fn std(&self) -> f64 {
        let m = self.mean();
        (self.accuracies.iter().map(|a| (a - m).powi(2)).sum::<f64>() / self.accuracies.len() as f64).sqrt()
    }
}

const SEEDS: [u64; 3] = [0, 1, 2];

fn sweep() -> &'static Result<(Vec<SweepRow>, Duration), String> {
    static SWEEP: OnceLock<Result<(Vec<SweepRow>, Duration), String>> = OnceLock::new();
    SWEEP.get_or_init(|| {
        let (train_set, test_set) = mnist()?;
        let start = Instant::now();
        let variants: [(&'static str, Option<Granularity>); 4] = [
            ("vanilla", None),
            ("layer", Some(Granularity::Layer)),
            ("channel", Some(Granularity::Channel)),
            ("element", Some(Granularity::Element)),
        ];
        let mut rows = Vec::new();
        for (label, g) in variants {
            let mut accuracies = Vec::new();
            for seed in SEEDS {
                let arch = Architecture::mnist_small(g, NeuronConfig::default());
                let net = Network::init(&arch, seed).map_err(|e| e.to_string())?;
                let (_, report) =
                    train(&net, train_set, Some(test_set), &mnist_config(5, seed)).map_err(|e| e.to_string())?;
                let acc = report.final_test_accuracy().expect("test set given");
                eprintln!("  sweep {label} seed {seed}: {acc:.4}");
                accuracies.push(acc);
            }
            rows.push(SweepRow { label, accuracies });
        }
        Ok((rows, start.elapsed()))
    })
}

// 4. element-wise real spikes do not trail the binary baseline on MNIST
fn desk_scale_trend() -> Outcome {
    match sweep() {
        Err(e) => outcome(false, e.clone()),
        Ok((rows, elapsed)) => {
            let vanilla = rows.iter().find(|r| r.label == "vanilla").unwrap().mean();
            let element = rows.iter().find(|r| r.label == "element").unwrap().mean();
            let in_time = *elapsed < Duration::from_secs(3600);
            outcome(
                element >= vanilla && vanilla >= 0.97 && in_time,
                format!(
                    "mean over seeds {:?}: element {:.4} vs vanilla {:.4} (need >= and vanilla >= 0.9700), sweep {:.0} s (limit 3600 s)",
                    SEEDS,
                    element,
                    vanilla,
                    elapsed.as_secs_f64()
                ),
            )
        }
    }
}

// 5. accuracy table over all four variants
fn granularity_report() -> Outcome {
    match sweep() {
        Err(e) => outcome(false, e.clone()),
        Ok((rows, _)) => {
            println!("  {:<8} {:>8} {:>8}   per seed", "variant", "mean", "std");
            for r in rows {
                let per: Vec<String> = r.accuracies.iter().map(|a| format!("{a:.4}")).collect();
                println!("  {:<8} {:>8.4} {:>8.4}   {}", r.label, r.mean(), r.std(), per.join(" "));
            }
            let vanilla = rows[0].mean();
            let element = rows[3].mean();
            outcome(
                rows.len() == 4 && element >= vanilla,
                format!("element {element:.4} >= vanilla {vanilla:.4}; layer/channel order reported only"),
            )
        }
    }
}

// 6. unit coefficients leave the network unchanged
fn identity_at_init() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let vanilla = Network::init(&Architecture::mnist_small(None, NeuronConfig::default()), 21).unwrap();
    let variants: Vec<Network> = [Granularity::Layer, Granularity::Channel, Granularity::Element]
        .into_iter()
        .map(|g| Network::init(&Architecture::mnist_small(Some(g), NeuronConfig::default()), 21).unwrap())
        .collect();
    let mut mismatches = 0;
    for _ in 0..100 {
        let x = Tensor::from_fn(&[28, 28, 1], |_| rng.gen_range(0.0..1.0));
        let base = vanilla.forward(&x, &ForwardOptions::new(4)).unwrap().logits;
        let bits: Vec<u32> = base.data().iter().map(|v| v.to_bits()).collect();
        for net in &variants {
            let other = net.forward(&x, &ForwardOptions::new(4)).unwrap().logits;
            if other.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>() != bits {
                mismatches += 1;
            }
        }
    }
    outcome(mismatches == 0, format!("100 inputs x 3 granularities, {mismatches} bitwise mismatches"))
}

// 7. entropy bounds and the uniform maximum
fn entropy_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let net = Network::init(&Architecture::mnist_small(Some(Granularity::Element), NeuronConfig::default()), 7).unwrap();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for _ in 0..20 {
        let x = Tensor::from_fn(&[28, 28, 1], |_| rng.gen_range(0.0..1.0));
        let trace = net.forward(&x, &ForwardOptions::new(4).recording()).unwrap().trace.unwrap();
        for nt in trace.neurons {
            for s in nt.spikes {
                let h = empirical_entropy(&s, Binning::Exact).unwrap();
                lo = lo.min(h);
                hi = hi.max(h);
            }
        }
    }
    let uniform = (2..=16).all(|n| uniformity_maximizes(n, 1000, n as u64));
    let c1 = capacity_bound(1).unwrap();
    let c32 = capacity_bound(32).unwrap();
    outcome(
        lo >= 0.0 && hi <= 1.0 && uniform && c1 == 1.0 && c32 == 32.0,
        format!(
            "binary spike entropy in [{lo:.3}, {hi:.3}] bits, uniform maximal for n=2..16 over 1000 draws: {uniform}, capacity(1)={c1}, capacity(32)={c32}"
        ),
    )
}

/// Counts parameters and connections by walking every output position and
/// kernel tap.
fn count_by_enumeration(arch: &Architecture) -> Vec<(usize, usize, usize)> {
    let mut rows = Vec::new();
    let (mut h, mut w) = (arch.input_shape[0], arch.input_shape[1]);
    let mut element_before = false;
    for spec in &arch.layers {
        match spec {
            LayerSpec::Conv {
                kernel,
                in_channels,
                out_channels,
                stride,
                padding,
                ..
            } => {
                let oh = (h + 2 * padding - kernel) / stride + 1;
                let ow = (w + 2 * padding - kernel) / stride + 1;
                let mut synapses = 0;
                for oy in 0..oh {
                    for ox in 0..ow {
                        for i in 0..*kernel {
                            for j in 0..*kernel {
                                let iy = (oy * stride + i) as isize - *padding as isize;
                                let ix = (ox * stride + j) as isize - *padding as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    synapses += in_channels * out_channels;
                                }
                            }
                        }
                    }
                }
                let shared = kernel * kernel * in_channels * out_channels;
                let folded = if element_before { shared * oh * ow } else { shared };
                rows.push((shared, folded, synapses));
                h = oh;
                w = ow;
            }
            LayerSpec::Neuron { granularity, .. } => {
                element_before = *granularity == Some(Granularity::Element);
            }
            LayerSpec::Linear { inputs, outputs } => {
                rows.push((inputs * outputs, inputs * outputs, inputs * outputs));
            }
        }
    }
    rows
}

// 8. cost report agrees with direct enumeration
fn cost_arithmetic() -> Outcome {
    let mut pass = true;
    let mut notes = Vec::new();
    for g in [None, Some(Granularity::Layer), Some(Granularity::Channel), Some(Granularity::Element)] {
        let arch = Architecture::mnist_small(g, NeuronConfig::default());
        let net = Network::init(&arch, 0).unwrap();
        let folded = fold_network(&net).unwrap();
        let report = cost_report(&net, folded.network()).unwrap();
        let expected = count_by_enumeration(&arch);
        let got: Vec<(usize, usize, usize)> = report
            .layers
            .iter()
            .map(|l| (l.params_before, l.params_after, l.synapses_before))
            .collect();
        let same_synapses = report.layers.iter().all(|l| l.synapses_before == l.synapses_after);
        pass &= got == expected && same_synapses;
        notes.push(format!(
            "{}: params {} -> {}, synapses {} -> {}",
            g.map_or("vanilla", |g| g.as_str()),
            got.iter().map(|r| r.0).sum::<usize>(),
            got.iter().map(|r| r.1).sum::<usize>(),
            report.total_synapses_before(),
            report.total_synapses_after()
        ));
    }
    outcome(pass, notes.join("; "))
}

// 9. container round trip, IDX golden bytes, rejection exit codes
fn formats() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut exact = 0;
    let grans = [None, Some(Granularity::Layer), Some(Granularity::Channel), Some(Granularity::Element)];
    for i in 0..50 {
        let g = grans[i % 4];
        let arch = if i % 3 == 0 {
            Architecture::mnist_small(g, NeuronConfig::default())
        } else {
            Architecture::tiny(g, NeuronConfig::default())
        };
        let mut net = Network::init(&arch, rng.gen()).unwrap();
        for p in net.parameters_mut() {
            for v in p.data_mut() {
                *v = rng.gen_range(-3.0..3.0);
            }
        }
        if i % 2 == 1 {
            net = fold_network(&net).unwrap().into_network();
        }
        let timesteps = rng.gen_bool(0.5).then(|| rng.gen_range(1..8));
        let mut bytes = Vec::new();
        write_model(&mut bytes, &net, timesteps).unwrap();
        let back = read_model(&bytes).unwrap();
        let bits = |n: &Network| -> Vec<u32> {
            n.parameters()
                .iter()
                .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()))
                .collect()
        };
        let mut again = Vec::new();
        write_model(&mut again, &back.network, back.timesteps).unwrap();
        if back.network == net && bits(&back.network) == bits(&net) && back.timesteps == timesteps && again == bytes {
            exact += 1;
        }
    }

    // two 2x2 images and their labels, byte by byte
    let images: Vec<u8> = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2, 0, 255, 51, 102, 204, 153, 1, 254];
    let labels: Vec<u8> = vec![0, 0, 8, 1, 0, 0, 0, 2, 9, 4];
    let parsed = parse_idx_images(&images).unwrap();
    let pixels_ok = parsed.shape() == [2, 2, 2]
        && parsed.data().iter().zip(&images[16..]).all(|(&v, &b)| v == b as f32 / 255.0);
    let labels_ok = parse_idx_labels(&labels).unwrap() == vec![9, 4];
    let mut img_out = Vec::new();
    write_idx_images(&mut img_out, 2, 2, 2, &images[16..]).unwrap();
    let mut lab_out = Vec::new();
    write_idx_labels(&mut lab_out, &[9, 4]).unwrap();
    let idx_ok = pixels_ok && labels_ok && img_out == images && lab_out == labels;

    let dir = tempfile::tempdir().unwrap();
    let net = Network::init(&Architecture::tiny(Some(Granularity::Element), NeuronConfig::default()), 1).unwrap();
    let mut good = Vec::new();
    write_model(&mut good, &net, Some(3)).unwrap();
    let mut cases: Vec<(&str, Vec<u8>)> = Vec::new();
    let mut flip = good.clone();
    let at = good.len() - 40;
    flip[at] ^= 0x80;
    cases.push(("bit flip", flip));
    cases.push(("truncated", good[..good.len() / 2].to_vec()));
    let mut magic = good.clone();
    magic[0] = b'X';
    cases.push(("bad magic", magic));
    let mut version = good.clone();
    version[4] = 7;
    cases.push(("bad version", version));
    cases.push(("empty", Vec::new()));
    let mut rejected = 0;
    for (name, bytes) in &cases {
        let path = dir.path().join(format!("{}.rspk", name.replace(' ', "_")));
        std::fs::write(&path, bytes).unwrap();
        let status = Command::new(env!("CARGO_BIN_EXE_realspike"))
            .args(["cost-report", &path.to_string_lossy()])
            .output()
            .unwrap()
            .status;
        if status.code() == Some(2) {
            rejected += 1;
        }
    }
    let good_path = dir.path().join("good.rspk");
    std::fs::write(&good_path, &good).unwrap();
    let good_ok = Command::new(env!("CARGO_BIN_EXE_realspike"))
        .args(["cost-report", &good_path.to_string_lossy()])
        .output()
        .unwrap()
        .status
        .success();
    outcome(
        exact == 50 && idx_ok && rejected == cases.len() && good_ok,
        format!(
            "{exact}/50 models bit-exact, IDX fixture exact: {idx_ok}, {rejected}/{} damaged files exit 2, intact file accepted: {good_ok}",
            cases.len()
        ),
    )
}

type Criterion = (u32, &'static str, Duration, fn() -> Outcome);

fn main() -> ExitCode {
    // `cargo test` passes harness flags such as --nocapture; a name filter
    // that matches nothing here skips the suite.
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !filters.is_empty() && !filters.iter().any(|f| "acceptance".contains(f.as_str())) {
        return ExitCode::SUCCESS;
    }
    let criteria: [Criterion; 9] = [
        (1, "fold equivalence", Duration::from_secs(30), fold_equivalence),
        (2, "end-to-end fold", Duration::from_secs(600), end_to_end),
        (3, "gradient check", Duration::from_secs(120), gradient_correctness),
        (4, "desk-scale trend", Duration::from_secs(3600), desk_scale_trend),
        (5, "granularity table", Duration::MAX, granularity_report),
        (6, "identity at init", Duration::MAX, identity_at_init),
        (7, "entropy", Duration::MAX, entropy_properties),
        (8, "cost arithmetic", Duration::MAX, cost_arithmetic),
        (9, "formats", Duration::MAX, formats),
    ];
    // RSPK_CRITERIA=1,3 runs a subset while iterating locally
    let only: Option<Vec<u32>> = std::env::var("RSPK_CRITERIA")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut failed = 0;
    let mut ran = 0;
    for (id, name, limit, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let result = check();
        let elapsed = start.elapsed();
        let pass = result.pass && elapsed <= limit;
        if !pass {
            failed += 1;
        }
        let budget = if limit == Duration::MAX {
            String::new()
        } else {
            format!(", limit {} s", limit.as_secs())
        };
        println!(
            "criterion {id} {name}: {} ({}; {:.1} s{budget})",
            if pass { "PASS" } else { "FAIL" },
            result.detail,
            elapsed.as_secs_f64()
        );
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
