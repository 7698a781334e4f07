//! Central finite-difference verification of every backward function and of
//! the assembled network, in 64-bit arithmetic.

use rand::Rng;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    conv3d_backward, conv3d_forward, dropout_backward, dropout_forward, maxpool3d_backward,
    maxpool3d_forward, relu_backward, relu_forward, softmax_voxelwise, upconv3d_backward,
    upconv3d_forward, weighted_cross_entropy, ConvKernel, KernelShape,
};
use crate::rng;
use crate::tensor::{DType, LabelVolume, Shape, Volume};
use crate::unet::{Model, ModelConfig};

/// Denominator floor of [`relative_error`].
pub const REL_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub op_tolerance: f64,
    pub network_tolerance: f64,
    pub seeds: u64,
    pub network_samples: usize,
    pub network: ModelConfig,
    /// Per-axis input extent for the network check; `None` picks the
    /// smallest valid tile with an output extent of at least 4.
    pub network_input: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            op_tolerance: 1e-4,
            network_tolerance: 1e-3,
            seeds: 20,
            network_samples: 30,
            network: ModelConfig {
                in_channels: 1,
                num_classes: 2,
                base_channels: 2,
                depth: 1,
                dtype: DType::F64,
                ..ModelConfig::default()
            },
            network_input: None,
        }
    }
}

/// Outcome of one check (one operation, one seed).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub seed: u64,
    pub checked: usize,
    /// Network entries whose perturbation crossed a ReLU or pooling boundary.
    pub skipped: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error < self.tolerance
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub results: Vec<CheckResult>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        !self.results.is_empty() && self.results.iter().all(CheckResult::passed)
    }

    /// Per check name: (name, seeds run, worst error, tolerance, all passed).
    pub fn summary(&self) -> Vec<(String, usize, f64, f64, bool)> {
        let mut out: Vec<(String, usize, f64, f64, bool)> = Vec::new();
        for r in &self.results {
            match out.iter_mut().find(|s| s.0 == r.name) {
                Some(s) => {
                    s.1 += 1;
                    s.2 = s.2.max(r.max_rel_error);
                    s.4 &= r.passed();
                }
                None => out.push((r.name.clone(), 1, r.max_rel_error, r.tolerance, r.passed())),
            }
        }
        out
    }
}

/// Compares `analytic[i]` against central differences of `loss` for every
/// `i` in `entries`, perturbing `x` in place and restoring it afterwards.
fn compare(
    x: &mut [f64],
    analytic: &[f64],
    entries: impl IntoIterator<Item = usize>,
    eps: f64,
    mut loss: impl FnMut(&[f64]) -> f64,
) -> (usize, f64) {
    let mut worst = 0.0f64;
    let mut n = 0;
    for i in entries {
        let orig = x[i];
        x[i] = orig + eps;
        let plus = loss(x);
        x[i] = orig - eps;
        let minus = loss(x);
        x[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i], numeric));
        n += 1;
    }
    (n, worst)
}

fn uniform_vec(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn result(name: &str, seed: u64, tol: f64, (checked, err): (usize, f64)) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        seed,
        checked,
        skipped: 0,
        max_rel_error: err,
        tolerance: tol,
    }
}

fn vol(shape: Shape, data: &[f64]) -> Volume<f64> {
    Volume::from_vec(shape, data.to_vec()).expect("shape matches data")
}

/// Loss `Σ r·f(input, kernel)` for a layer with parameters; the probe vector
/// packs input, weights and bias.
fn check_layer(
    name: &str,
    seed: u64,
    opts: &GradCheckOptions,
    in_shape: Shape,
    kshape: KernelShape,
    forward: fn(&Volume<f64>, &ConvKernel<f64>) -> Result<Volume<f64>>,
    backward: fn(&Volume<f64>, &ConvKernel<f64>, &Volume<f64>) -> Result<(Volume<f64>, ConvKernel<f64>)>,
) -> Result<CheckResult> {
    let mut r = rng::stream(seed, 0);
    let (ni, nw, nb) = (in_shape.len(), kshape.weight_len(), kshape.out_channels);
    let mut x = uniform_vec(&mut r, ni + nw + nb, -1.0, 1.0);
    let split = |x: &[f64]| -> Result<(Volume<f64>, ConvKernel<f64>)> {
        Ok((
            vol(in_shape, &x[..ni]),
            ConvKernel::from_parts(kshape, x[ni..ni + nw].to_vec(), x[ni + nw..].to_vec())?,
        ))
    };
    let (input, kernel) = split(&x)?;
    let out = forward(&input, &kernel)?;
    let probe = uniform_vec(&mut r, out.shape().len(), -1.0, 1.0);
    let (gi, gk) = backward(&input, &kernel, &vol(out.shape(), &probe))?;
    let analytic: Vec<f64> = gi.data().iter().chain(&gk.weights).chain(&gk.bias).copied().collect();
    let n = x.len();
    let cmp = compare(&mut x, &analytic, 0..n, opts.eps, |x| {
        let (i, k) = split(x).expect("valid split");
        dot(forward(&i, &k).expect("forward").data(), &probe)
    });
    Ok(result(name, seed, opts.op_tolerance, cmp))
}

pub fn check_conv(seed: u64, opts: &GradCheckOptions) -> Result<CheckResult> {
    let kshape = KernelShape {
        out_channels: 2,
        in_channels: 1,
        k: 3,
    };
    check_layer("conv3d", seed, opts, Shape::new(1, 6, 6, 6)?, kshape, conv3d_forward, conv3d_backward)
}

pub fn check_upconv(seed: u64, opts: &GradCheckOptions) -> Result<CheckResult> {
    let kshape = KernelShape {
        out_channels: 2,
        in_channels: 3,
        k: 2,
    };
    check_layer("upconv3d", seed, opts, Shape::new(3, 3, 3, 3)?, kshape, upconv3d_forward, upconv3d_backward)
}

pub fn check_relu(seed: u64, opts: &GradCheckOptions) -> Result<CheckResult> {
    let mut r = rng::stream(seed, 1);
    let shape = Shape::new(2, 4, 4, 4)?;
    let mut x: Vec<f64> = (0..shape.len())
        .map(|_| loop {
            let v: f64 = r.random_range(-1.0..1.0);
            if v.abs() > 1e-3 {
                break v;
            }
        })
        .collect();
    let probe = uniform_vec(&mut r, shape.len(), -1.0, 1.0);
    let g = relu_backward(&vol(shape, &x), &vol(shape, &probe))?;
    let cmp = compare(&mut x, g.data(), 0..shape.len(), opts.eps, |x| {
        dot(relu_forward(&vol(shape, x)).data(), &probe)
    });
    Ok(result("relu", seed, opts.op_tolerance, cmp))
}

pub fn check_maxpool(seed: u64, opts: &GradCheckOptions) -> Result<CheckResult> {
    let mut r = rng::stream(seed, 2);
    let shape = Shape::new(2, 4, 6, 4)?;
    let n = shape.len();
    // Distinct ranks spaced 1/n apart keep every window untied under ±eps.
    let mut ranks: Vec<usize> = (0..n).collect();
    ranks.shuffle(&mut r);
    let mut x: Vec<f64> = ranks
        .iter()
        .map(|&k| (k as f64 + r.random_range(0.25..0.75)) / n as f64)
        .collect();
    let (out, idx) = maxpool3d_forward(&vol(shape, &x), 2)?;
    let probe = uniform_vec(&mut r, out.shape().len(), -1.0, 1.0);
    let g = maxpool3d_backward(&idx, &vol(out.shape(), &probe))?;
    let cmp = compare(&mut x, g.data(), 0..n, opts.eps, |x| {
        dot(maxpool3d_forward(&vol(shape, x), 2).expect("pool").0.data(), &probe)
    });
    Ok(result("maxpool3d", seed, opts.op_tolerance, cmp))
}

pub fn check_dropout(seed: u64, opts: &GradCheckOptions) -> Result<CheckResult> {
    let mut r = rng::stream(seed, 3);
    let shape = Shape::new(3, 4, 4, 4)?;
    let mut x = uniform_vec(&mut r, shape.len(), -1.0, 1.0);
    let probe = uniform_vec(&mut r, shape.len(), -1.0, 1.0);
    let (_, mask) = dropout_forward(&vol(shape, &x), 0.3, seed, true)?;
    let g = dropout_backward(&mask, &vol(shape, &probe))?;
    let cmp = compare(&mut x, g.data(), 0..shape.len(), opts.eps, |x| {
        dot(dropout_forward(&vol(shape, x), 0.3, seed, true).expect("dropout").0.data(), &probe)
    });
    Ok(result("dropout", seed, opts.op_tolerance, cmp))
}

pub fn check_softmax_cross_entropy(seed: u64, opts: &GradCheckOptions) -> Result<CheckResult> {
    let mut r = rng::stream(seed, 4);
    let shape = Shape::new(3, 3, 3, 3)?;
    let mut x = uniform_vec(&mut r, shape.len(), -3.0, 3.0);
    let labels = LabelVolume::from_vec(
        shape.extents(),
        (0..shape.channel_len()).map(|_| r.random_range(0..3u8)).collect(),
    )?;
    let weights = vol(labels.shape(), &uniform_vec(&mut r, labels.len(), 0.1, 2.0));
    let loss = |x: &[f64]| -> Result<(f64, Volume<f64>)> {
        weighted_cross_entropy(&softmax_voxelwise(&vol(shape, x))?, &labels, &weights)
    };
    let (_, g) = loss(&x)?;
    let cmp = compare(&mut x, g.data(), 0..shape.len(), opts.eps, |x| loss(x).expect("loss").0);
    Ok(result("softmax+cross_entropy", seed, opts.op_tolerance, cmp))
}

/// Whole-network check: softmax cross-entropy of the training-mode forward,
/// differentiated with respect to `network_samples` randomly chosen
/// parameters. Entries whose ±eps evaluations change any ReLU sign or pooling
/// argmax are skipped, since the loss is not differentiable across them.
pub fn check_network(seed: u64, opts: &GradCheckOptions) -> Result<CheckResult> {
    let cfg = ModelConfig {
        dtype: DType::F64,
        ..opts.network.clone()
    };
    cfg.validate()?;
    let s = match opts.network_input {
        Some(s) => s,
        None => {
            cfg.smallest_input_covering(4)
                .ok_or_else(|| Error::Tiling("no valid tile for the gradient check".into()))?
                .0
        }
    };
    cfg.check_tile([s; 3])?;
    let mut model = Model::<f64>::build(&cfg, seed)?;
    let mut r = rng::stream(seed, 5);
    let input = Volume::from_vec(
        Shape::new(cfg.in_channels, s, s, s)?,
        uniform_vec(&mut r, cfg.in_channels * s * s * s, 0.0, 1.0),
    )?;
    let out_ext = cfg.check_tile([s; 3])?;
    let n_out: usize = out_ext.iter().product();
    let labels = LabelVolume::from_vec(
        out_ext,
        (0..n_out).map(|_| r.random_range(0..cfg.num_classes as u8)).collect(),
    )?;
    let weights = vol(labels.shape(), &uniform_vec(&mut r, n_out, 0.5, 1.5));
    let drop_seed = rng::derive_seed(seed, 6);

    let eval = |m: &Model<f64>| -> Result<(f64, Volume<f64>, crate::unet::Tape<f64>)> {
        let (logits, tape) = m.forward(&input, true, drop_seed)?;
        let (loss, g) = weighted_cross_entropy(&softmax_voxelwise(&logits)?, &labels, &weights)?;
        Ok((loss, g, tape))
    };
    let (_, grad_logits, tape) = eval(&model)?;
    let base_pattern = tape.branch_pattern();
    let grads = model.backward(&tape, &grad_logits)?;

    let mut slots = Vec::new();
    for (li, k) in model.kernels().iter().enumerate() {
        slots.extend((0..k.weights.len()).map(|i| (li, false, i)));
        slots.extend((0..k.bias.len()).map(|i| (li, true, i)));
    }
    slots.shuffle(&mut r);
    slots.truncate(opts.network_samples);

    let mut out = result("network", seed, opts.network_tolerance, (0, 0.0));
    for (li, is_bias, i) in slots {
        let analytic = if is_bias {
            grads.kernels[li].bias[i]
        } else {
            grads.kernels[li].weights[i]
        };
        let at = |delta: Option<f64>, m: &mut Model<f64>| -> Result<(f64, Vec<u64>)> {
            let k = &mut m.kernels_mut()[li];
            let slot = if is_bias { &mut k.bias[i] } else { &mut k.weights[i] };
            let orig = *slot;
            if let Some(d) = delta {
                *slot = orig + d;
            }
            let res = eval(m);
            let k = &mut m.kernels_mut()[li];
            let slot = if is_bias { &mut k.bias[i] } else { &mut k.weights[i] };
            *slot = orig;
            let (loss, _, tape) = res?;
            Ok((loss, tape.branch_pattern()))
        };
        let (plus, pp) = at(Some(opts.eps), &mut model)?;
        let (minus, pm) = at(Some(-opts.eps), &mut model)?;
        if pp != base_pattern || pm != base_pattern {
            out.skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * opts.eps);
        out.max_rel_error = out.max_rel_error.max(relative_error(analytic, numeric));
        out.checked += 1;
    }
    Ok(out)
}

type CheckFn = fn(u64, &GradCheckOptions) -> Result<CheckResult>;

/// Every per-operation check plus the network check over `opts.seeds` seeds.
pub fn run_suite(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let checks: [CheckFn; 7] = [
        check_conv,
        check_relu,
        check_maxpool,
        check_upconv,
        check_dropout,
        check_softmax_cross_entropy,
        check_network,
    ];
    let jobs: Vec<(CheckFn, u64)> = checks
        .iter()
        .flat_map(|&f| (0..opts.seeds).map(move |s| (f, s)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(f, s)| f(s, opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradCheckReport { results })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!(relative_error(1e-12, 0.0) < 1e-5);
    }

    #[test]
    fn detects_wrong_gradient() {
        let mut x = vec![1.0, 2.0];
        let (n, err) = compare(&mut x, &[2.0, 5.0], 0..2, 1e-5, |x| x[0] * x[0] + x[1] * x[1]);
        assert_eq!(n, 2);
        assert!(err > 0.1);
        assert_eq!(x, vec![1.0, 2.0]);
    }

    #[test]
    fn single_seed_of_each_check_passes() {
        let opts = GradCheckOptions::default();
        for f in [check_conv, check_relu, check_maxpool, check_upconv, check_dropout, check_softmax_cross_entropy] {
            let r = f(3, &opts).unwrap();
            assert!(r.passed(), "{r:?}");
        }
        let r = check_network(3, &opts).unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.checked + r.skipped, 30);
    }
}
