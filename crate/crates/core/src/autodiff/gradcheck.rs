//! Central finite-difference checks of tape gradients.
//!
//! The scalar probed is `L = Σ r_i · out_i` for a fixed random projection `r`,
//! accumulated in f64. Each perturbed coordinate uses the step actually
//! representable in f32, `(x + h) - (x - h)`, as the divisor, so a linear map
//! is recovered to f64 precision.
//!
//! The error reported per input tensor is
//! `max_i |analytic_i - numeric_i| / max(max_j |analytic_j|, max_i |numeric_i|)`
//! with `i` over the probed coordinates and `j` over the whole tensor.
//!
//! Relu and max-pool make a function piecewise smooth. By default a probe
//! whose `x ± h` evaluation takes a different branch than the unperturbed
//! input straddles a non-differentiable point; it is skipped and counted.
//! With [`GradCheckOptions::freeze_branches`] the perturbed evaluations
//! instead replay the unperturbed branches, so every probe measures the
//! derivative of the piece the analytic gradient belongs to.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::ops::Padding;
use super::{AutodiffError, Tape, Tensor, Var};

pub const FD_STEP: f32 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Probed coordinates per input tensor; smaller tensors are probed fully.
    /// Half go to the largest analytic gradients, half are random.
    pub max_checks: usize,
    pub step: f32,
    pub freeze_branches: bool,
}

impl GradCheckOptions {
    pub fn new(max_checks: usize) -> Self {
        Self { max_checks, step: FD_STEP, freeze_branches: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub per_input: Vec<f64>,
    pub checked: usize,
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.per_input.iter().copied().fold(0.0, f64::max)
    }
}

fn projected(values: &Tensor, weights: &[f32]) -> f64 {
    values.data().iter().zip(weights).map(|(&a, &b)| a as f64 * b as f64).sum()
}

/// Compares tape gradients of `f` against central differences for every
/// input tensor, probing up to `max_checks` coordinates per input.
pub fn grad_check<F>(inputs: &[Tensor], seed: u64, max_checks: usize, f: F) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    grad_check_with(inputs, seed, GradCheckOptions::new(max_checks), f)
}

fn probe_coords(rng: &mut ChaCha8Rng, analytic: &Tensor, max_checks: usize) -> Vec<usize> {
    let n = analytic.len();
    if n <= max_checks {
        return (0..n).collect();
    }
    let mut by_size: Vec<usize> = (0..n).collect();
    by_size.sort_by(|&a, &b| analytic.data()[b].abs().total_cmp(&analytic.data()[a].abs()).then(a.cmp(&b)));
    let mut coords: Vec<usize> = by_size[..max_checks / 2].to_vec();
    while coords.len() < max_checks {
        let j = index::sample(rng, n, 1).index(0);
        if !coords.contains(&j) {
            coords.push(j);
        }
    }
    coords
}

pub fn grad_check_with<F>(inputs: &[Tensor], seed: u64, opts: GradCheckOptions, f: F) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let base_branches = tape.branches();
    let weights: Vec<f32> = (0..tape.value(out).len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let loss = tape.dot_sum(out, weights.clone())?;
    let grads = tape.backward(loss)?;

    // (projected loss, whether the evaluation stayed on the base branches)
    let eval = |xs: &[Tensor]| -> Result<(f64, bool), AutodiffError> {
        let mut tape =
            if opts.freeze_branches { Tape::with_frozen_branches(base_branches.clone()) } else { Tape::new() };
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        if opts.freeze_branches && !tape.frozen_replay_ok() {
            return Err(AutodiffError::shape("function recorded a different op sequence on replay"));
        }
        Ok((projected(tape.value(out), &weights), tape.branches() == base_branches))
    };

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut checked = 0;
    let mut skipped = 0;
    let mut probe = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].dims()));
        let coords = probe_coords(&mut rng, &analytic, opts.max_checks);
        let mut max_diff = 0.0f64;
        let mut scale = analytic.data().iter().fold(0.0f64, |m, &a| m.max(a.abs() as f64));
        for &j in &coords {
            let x = inputs[i].data()[j];
            let (xp, xm) = (x + opts.step, x - opts.step);
            probe[i].data_mut()[j] = xp;
            let (lp, same_p) = eval(&probe)?;
            probe[i].data_mut()[j] = xm;
            let (lm, same_m) = eval(&probe)?;
            probe[i].data_mut()[j] = x;
            if !(same_p && same_m) {
                skipped += 1;
                continue;
            }
            checked += 1;
            let numeric = (lp - lm) / (xp as f64 - xm as f64);
            let a = analytic.data()[j] as f64;
            max_diff = max_diff.max((a - numeric).abs());
            scale = scale.max(numeric.abs());
        }
        per_input.push(if scale > 0.0 { max_diff / scale } else { 0.0 });
    }
    Ok(GradCheckReport { per_input, checked, skipped })
}

pub fn random_tensor(rng: &mut impl Rng, dims: &[usize]) -> Tensor {
    let n = dims.iter().product();
    let data = (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    Tensor::from_vec(dims, data).expect("matching length")
}

/// Values bounded away from zero, so a finite-difference step never crosses
/// a relu kink.
fn away_from_zero(rng: &mut impl Rng, dims: &[usize]) -> Tensor {
    let n = dims.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f32 = rng.random_range(0.1..2.0);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::from_vec(dims, data).expect("matching length")
}

/// Distinct values spaced well beyond the step, so block maxima stay put.
fn well_separated(rng: &mut impl Rng, dims: &[usize]) -> Tensor {
    let n: usize = dims.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let data = order.iter().map(|&k| k as f32 * 0.1 - n as f32 * 0.05).collect();
    Tensor::from_vec(dims, data).expect("matching length")
}

/// Gradient check of each differentiable op on random inputs for one seed.
pub fn op_suite(seed: u64) -> Result<Vec<(&'static str, f64)>, AutodiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    let checks = 64;

    let x = random_tensor(&mut rng, &[1, 2, 6, 6]);
    let k = random_tensor(&mut rng, &[3, 2, 3, 3]);
    let b = random_tensor(&mut rng, &[3]);
    let r = grad_check(&[x, k, b], seed, checks, |t, v| t.conv2d(v[0], v[1], Some(v[2]), Padding::Same))?;
    results.push(("conv2d_3x3", r.worst()));

    let x = random_tensor(&mut rng, &[2, 5, 3, 4]);
    let k = random_tensor(&mut rng, &[4, 5, 1, 1]);
    let b = random_tensor(&mut rng, &[4]);
    let r = grad_check(&[x, k, b], seed, checks, |t, v| t.conv2d(v[0], v[1], Some(v[2]), Padding::Same))?;
    results.push(("conv2d_1x1", r.worst()));

    let x = random_tensor(&mut rng, &[1, 2, 5, 5]);
    let k = random_tensor(&mut rng, &[2, 2, 2, 2]);
    let r = grad_check(&[x, k], seed, checks, |t, v| t.conv2d(v[0], v[1], None, Padding::Valid))?;
    results.push(("conv2d_2x2_valid", r.worst()));

    let x = random_tensor(&mut rng, &[2, 3, 3, 2]);
    let k = random_tensor(&mut rng, &[3, 2, 2, 2]);
    let b = random_tensor(&mut rng, &[2]);
    let r = grad_check(&[x, k, b], seed, checks, |t, v| t.transposed_conv2x2(v[0], v[1], Some(v[2])))?;
    results.push(("transposed_conv2x2", r.worst()));

    let x = well_separated(&mut rng, &[2, 2, 4, 6]);
    let r = grad_check(&[x], seed, checks, |t, v| t.maxpool2x2(v[0]))?;
    results.push(("maxpool2x2", r.worst()));

    let x = random_tensor(&mut rng, &[4, 3, 5, 5]);
    let gamma = random_tensor(&mut rng, &[3]);
    let beta = random_tensor(&mut rng, &[3]);
    let r = grad_check(&[x, gamma, beta], seed, checks, |t, v| Ok(t.batchnorm_train(v[0], v[1], v[2])?.0))?;
    results.push(("batchnorm_train", r.worst()));

    let x = random_tensor(&mut rng, &[2, 3, 4, 4]);
    let gamma = random_tensor(&mut rng, &[3]);
    let beta = random_tensor(&mut rng, &[3]);
    let mean = random_tensor(&mut rng, &[3]);
    let var = Tensor::from_vec(&[3], (0..3).map(|_| rng.random_range(0.5..2.0)).collect())?;
    let r = grad_check(&[x, gamma, beta], seed, checks, |t, v| {
        t.batchnorm_infer(v[0], v[1], v[2], mean.clone(), var.clone())
    })?;
    results.push(("batchnorm_infer", r.worst()));

    let x = away_from_zero(&mut rng, &[2, 3, 4, 4]);
    let r = grad_check(&[x], seed, checks, |t, v| Ok(t.relu(v[0])))?;
    results.push(("relu", r.worst()));

    let a = random_tensor(&mut rng, &[2, 3, 3, 3]);
    let b = random_tensor(&mut rng, &[2, 2, 3, 3]);
    let r = grad_check(&[a, b], seed, checks, |t, v| t.concat_channels(&[v[0], v[1], v[0]]))?;
    results.push(("concat_channels", r.worst()));

    let x = random_tensor(&mut rng, &[1, 2, 3, 5]);
    let r = grad_check(&[x], seed, checks, |t, v| t.pad_replicate(v[0], 3, 2))?;
    results.push(("pad_replicate", r.worst()));

    let x = random_tensor(&mut rng, &[1, 2, 5, 6]);
    let r = grad_check(&[x], seed, checks, |t, v| t.crop(v[0], 3, 4))?;
    results.push(("crop", r.worst()));

    let x = random_tensor(&mut rng, &[2, 2, 3, 3]);
    let r = grad_check(&[x], seed, checks, |t, v| t.nearest_upsample2x(v[0]))?;
    results.push(("nearest_upsample2x", r.worst()));

    let x = random_tensor(&mut rng, &[1, 3, 4, 4]);
    let r = grad_check(&[x], seed, checks, |t, v| Ok(t.identity(v[0])))?;
    results.push(("identity", r.worst()));

    Ok(results)
}
