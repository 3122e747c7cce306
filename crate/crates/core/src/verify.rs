//! Self-checks run by `img verify` and the acceptance tests: shift
//! equivalence, finite-difference gradients, and structural properties of
//! CMEM and CLIM.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::clim::{self, Clim};
use crate::cmem::{Cmem, CmemConfig};
use crate::error::{Error, Result};
use crate::gradcheck::{gradient_check, DEFAULT_EPS};
use crate::network::{ImgBlock, Network, NetworkConfig};
use crate::nn::{uniform, Forward, Mode, ParamStore};
use crate::shift::{adaptive_shift, make_tsm_kernel, tsm_shift, ShiftMode};
use crate::tensor::{Element, Tensor};

/// Outcome of one check: `passed` iff `measured <= threshold`.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub measured: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl CheckResult {
    pub fn at_most(name: impl Into<String>, measured: f64, threshold: f64) -> Self {
        CheckResult { name: name.into(), measured, threshold, passed: measured <= threshold }
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status} {}: measured {:e}, threshold {:e}", self.name, self.measured, self.threshold)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    ShiftEquivalence,
    Gradients,
    Cmem,
    Clim,
    All,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "shift-equivalence" => Suite::ShiftEquivalence,
            "gradients" => Suite::Gradients,
            "cmem" => Suite::Cmem,
            "clim" => Suite::Clim,
            "all" => Suite::All,
            _ => return Err(Error::Config(format!("unknown suite {s:?} (shift-equivalence|gradients|cmem|clim|all)"))),
        })
    }
}

pub fn run_suite(suite: Suite) -> Result<Vec<CheckResult>> {
    Ok(match suite {
        Suite::ShiftEquivalence => shift_equivalence(100, 0)?,
        Suite::Gradients => gradients(0)?,
        Suite::Cmem => cmem_invariants(0)?,
        Suite::Clim => clim_structure(0)?,
        Suite::All => {
            let mut all = shift_equivalence(100, 0)?;
            all.extend(gradients(0)?);
            all.extend(cmem_invariants(0)?);
            all.extend(clim_structure(0)?);
            all
        }
    })
}

fn random<T: Element>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    uniform(shape, 1.0, rng)
}

fn max_shift_diff<T: Element>(x: &Tensor<T>) -> Result<f64> {
    let reference = tsm_shift(x)?;
    let tape = Tape::new();
    let kernel = tape.constant(make_tsm_kernel(x.shape()[2])?);
    let y = adaptive_shift(tape.constant(x.clone()), kernel)?.value();
    Ok(y.max_abs_diff(&reference).as_f64())
}

/// Adaptive shift with the TSM kernel against the fixed shift on `count`
/// random `[2, 8, 32, 7, 7]` tensors.
pub fn shift_equivalence(count: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut d64, mut d32) = (0f64, 0f64);
    for _ in 0..count {
        let x: Tensor<f64> = random(&[2, 8, 32, 7, 7], &mut rng);
        d64 = d64.max(max_shift_diff(&x)?);
        d32 = d32.max(max_shift_diff(&x.cast::<f32>())?);
    }
    Ok(vec![
        CheckResult::at_most("shift-equivalence f64 max abs diff", d64, 0.0),
        CheckResult::at_most("shift-equivalence f32 max abs diff", d32, 1e-6),
    ])
}

const GRAD_TOL: f64 = 1e-5;
const GRAD_SHAPE: [usize; 5] = [2, 4, 32, 5, 5];

/// Finite-difference check of `forward` with respect to its input and every
/// trainable tensor in `store`. The scalar is a fixed random projection of
/// the output, or the output itself when it is already a scalar.
fn check_module(
    name: &str,
    mode: Mode,
    store: &ParamStore<f64>,
    input: Tensor<f64>,
    rng: &mut ChaCha8Rng,
    forward: impl for<'t> Fn(&Forward<'t, '_, f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
) -> Result<Vec<CheckResult>> {
    let ids: Vec<_> = store.ids().filter(|&id| store.entry(id).trainable).collect();
    let out_shape = {
        let tape = Tape::new();
        let ctx = Forward::new(&tape, store, mode, 0);
        forward(&ctx, tape.constant(input.clone()))?.shape()
    };
    let projection: Option<Tensor<f64>> =
        (out_shape.iter().product::<usize>() > 1).then(|| random(&out_shape, rng));
    let mut inputs = vec![input];
    inputs.extend(ids.iter().map(|&id| store.value(id).clone()));
    let report = gradient_check(&inputs, DEFAULT_EPS, |tape, vars| {
        let ctx = Forward::new(tape, store, mode, 0);
        for (&id, &v) in ids.iter().zip(&vars[1..]) {
            ctx.bind(id, v)?;
        }
        let out = forward(&ctx, vars[0])?;
        match &projection {
            Some(p) => Ok(out.mul(tape.constant(p.clone()))?.sum()),
            None => Ok(out),
        }
    })?;
    let names = std::iter::once("input".to_string()).chain(ids.iter().map(|&id| store.entry(id).name.clone()));
    Ok(report
        .groups
        .iter()
        .zip(names)
        .map(|(g, group)| CheckResult::at_most(format!("gradients {name} {group}"), g.max_rel_error, GRAD_TOL))
        .collect())
}

/// Sets each channel's head normalization offset so that the ReLU
/// threshold sits in the middle of a wide gap between pre-activations,
/// keeping finite differences away from the kink.
fn center_relu_thresholds(block: &ImgBlock, store: &mut ParamStore<f64>, input: &Tensor<f64>) -> Result<()> {
    let scaled = {
        let tape = Tape::new();
        let ctx = Forward::new(&tape, store, Mode::Eval, 0);
        let h = block.head.forward(&ctx, tape.constant(input.clone()))?;
        block.head_norm.forward(&ctx, h)?.value()
    };
    let [n, t, c, hh, ww] = scaled.dims5()?;
    let beta = store.value(block.head_norm.beta).clone();
    let mut offsets = Vec::with_capacity(c);
    for ch in 0..c {
        let mut vals = Vec::with_capacity(n * t * hh * ww);
        for ni in 0..n {
            for ti in 0..t {
                let o = scaled.offset5(ni, ti, ch, 0, 0);
                vals.extend(scaled.data()[o..o + hh * ww].iter().map(|v| v - beta.data()[ch]));
            }
        }
        vals.sort_by(f64::total_cmp);
        let (lo, hi) = (vals.len() / 4, 3 * vals.len() / 4);
        let i = (lo..hi).max_by(|&a, &b| (vals[a + 1] - vals[a]).total_cmp(&(vals[b + 1] - vals[b]))).unwrap_or(lo);
        offsets.push(-(vals[i] + vals[i + 1]) / 2.0);
    }
    store.set(block.head_norm.beta, Tensor::new(&[c], offsets)?)
}

/// Gradient checks of CMEM, CLIM, one IMG block and the classifier head.
pub fn gradients(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    let c = GRAD_SHAPE[2];

    let mut store = ParamStore::<f64>::new();
    let cmem = Cmem::new(&mut store, "cmem", c, CmemConfig::default(), &mut rng)?;
    let x = random(&GRAD_SHAPE, &mut rng);
    results.extend(check_module("cmem", Mode::Train, &store, x, &mut rng, |ctx, x| cmem.forward(ctx, x))?);

    let mut store = ParamStore::<f64>::new();
    let clim = Clim::new(&mut store, "clim", c, [ShiftMode::Pretrained; 3], &mut rng)?;
    let x = random(&GRAD_SHAPE, &mut rng);
    results.extend(check_module("clim", Mode::Train, &store, x, &mut rng, |ctx, x| clim.forward(ctx, x))?);

    let mut store = ParamStore::<f64>::new();
    let cfg = NetworkConfig { blocks: vec![c], stem_width: c, ..NetworkConfig::default() };
    let block = ImgBlock::new(&mut store, "block", c, c, &cfg, &mut rng)?;
    // Normalization uses running statistics here: with batch statistics
    // the last slice's bias only shifts whole channels, which the tail
    // normalization removes, so its true gradient is zero and a relative
    // error is meaningless. Nonzero tail scale keeps upstream gradients alive.
    for bn in [&block.head_norm, &block.tail_norm] {
        let mean = Tensor::from_fn(&[c], |_| rng.random_range(-0.5..0.5));
        store.set(bn.running_mean, mean)?;
        for id in [bn.running_var, bn.gamma, bn.beta] {
            store.set(id, Tensor::from_fn(&[c], |_| rng.random_range(0.5..1.5)))?;
        }
    }
    let x = random(&GRAD_SHAPE, &mut rng);
    center_relu_thresholds(&block, &mut store, &x)?;
    results.extend(check_module("img-block", Mode::Eval, &store, x, &mut rng, |ctx, x| block.forward(ctx, x))?);

    let mut store = ParamStore::<f64>::new();
    let cfg = NetworkConfig { blocks: vec![], stem_width: c, num_classes: 5, ..NetworkConfig::default() };
    let net = Network::new(cfg, &mut store, seed)?;
    let labels: Vec<usize> = (0..GRAD_SHAPE[0]).map(|i| (3 * i + 1) % 5).collect();
    let x = random(&GRAD_SHAPE, &mut rng);
    let head_store = restrict_to_head(&store, &net);
    results.extend(check_module("loss-head", Mode::Train, &head_store, x, &mut rng, |ctx, x| {
        net.classify(ctx, x, 0.0)?.cross_entropy(&labels)
    })?);
    Ok(results)
}

/// Copy of `store` in which only the classifier is trainable.
fn restrict_to_head(store: &ParamStore<f64>, net: &Network) -> ParamStore<f64> {
    let mut s = store.clone();
    let head = [net.classifier.weight, net.classifier.bias];
    for id in store.ids() {
        if !head.contains(&id) {
            s.set_trainable(id, false);
        }
    }
    s
}

/// Frames `[n, t, c, h, w]` with every frame equal to the first.
fn static_clip(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let frame: Tensor<f64> = random(&[shape[0], 1, shape[2], shape[3], shape[4]], rng);
    let per_frame = shape[2] * shape[3] * shape[4];
    Tensor::from_fn(shape, |i| {
        let n = i / (shape[1] * per_frame);
        frame.data()[n * per_frame + i % per_frame]
    })
}

pub fn reverse_time<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, t, c, h, w] = x.dims5()?;
    let frame = c * h * w;
    let mut out = Vec::with_capacity(x.len());
    for ni in 0..n {
        for ti in (0..t).rev() {
            let o = (ni * t + ti) * frame;
            out.extend_from_slice(&x.data()[o..o + frame]);
        }
    }
    Tensor::new(x.shape(), out)
}

/// CMEM on a static clip, with a zeroed expansion, and under time reversal.
pub fn cmem_invariants(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [2, 6, 32, 6, 6];
    let mut store = ParamStore::<f64>::new();
    let cmem = Cmem::new(&mut store, "cmem", 32, CmemConfig::default(), &mut rng)?;
    let t = shape[1];

    let x = static_clip(&shape, &mut rng);
    let tape = Tape::new();
    let ctx = Forward::new(&tape, &store, Mode::Eval, 0);
    let tr = cmem.trace(&ctx, tape.constant(x.clone()))?;
    let diff = tr.difference.value();
    let m_max = diff.data().iter().fold(0f64, |a, v| a.max(v.abs()));
    let cos = tr.cosine.value();
    let [_, _, cr, _, _] = cos.dims5()?;
    let mut p_dev = 0f64;
    for (i, v) in cos.data().iter().enumerate() {
        let ti = (i / cr) % t;
        if ti + 1 < t {
            p_dev = p_dev.max((v - 1.0).abs());
        }
    }

    let mut zeroed = store.clone();
    cmem.conv_exp.zero(&mut zeroed);
    let x = random(&shape, &mut rng);
    let identity_dev = cmem_output(&cmem, &zeroed, &x)?.max_abs_diff(&x);

    let x = random(&shape, &mut rng);
    let forward = cmem_difference(&cmem, &store, &x)?;
    let backward = cmem_difference(&cmem, &store, &reverse_time(&x)?)?;
    let [n, _, c, h, w] = forward.dims5()?;
    let mut rev_dev = 0f64;
    for ni in 0..n {
        for ti in 0..t - 1 {
            for ci in 0..c {
                for yi in 0..h {
                    for xi in 0..w {
                        let a = forward.at5(ni, ti, ci, yi, xi);
                        let b = backward.at5(ni, t - 2 - ti, ci, yi, xi);
                        rev_dev = rev_dev.max((a + b).abs());
                    }
                }
            }
        }
    }

    Ok(vec![
        CheckResult::at_most("cmem static clip max |M|", m_max, 0.0),
        CheckResult::at_most("cmem static clip max |P - 1| (valid slots)", p_dev, 0.0),
        CheckResult::at_most("cmem zero expansion max |output - input|", identity_dev, 0.0),
        CheckResult::at_most("cmem time reversal max |M + M_reversed|", rev_dev, 1e-6),
    ])
}

fn cmem_output(cmem: &Cmem, store: &ParamStore<f64>, x: &Tensor<f64>) -> Result<Tensor<f64>> {
    let tape = Tape::new();
    let ctx = Forward::new(&tape, store, Mode::Eval, 0);
    Ok((*cmem.forward(&ctx, tape.constant(x.clone()))?.value()).clone())
}

fn cmem_difference(cmem: &Cmem, store: &ParamStore<f64>, x: &Tensor<f64>) -> Result<Tensor<f64>> {
    let tape = Tape::new();
    let ctx = Forward::new(&tape, store, Mode::Eval, 0);
    let xr = cmem.reduce_channels(&ctx, tape.constant(x.clone()))?;
    Ok((*cmem.motion_difference(&ctx, xr)?.value()).clone())
}

/// Slice-0 passthrough and the dependency windows of each CLIM slice.
pub fn clim_structure(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let clim = Clim::new(&mut store, "clim", 32, [ShiftMode::Pretrained; 3], &mut rng)?;
    let x: Tensor<f64> = random(&[1, 9, 32, 9, 9], &mut rng);

    let tape = Tape::new();
    let ctx = Forward::new(&tape, &store, Mode::Eval, 0);
    let y = clim.forward(&ctx, tape.constant(x.clone()))?.value();
    let mut passthrough = 0f64;
    for (i, (a, b)) in x.data().iter().zip(y.data()).enumerate() {
        if (i / 81) % 32 < 8 {
            passthrough = passthrough.max((a - b).abs());
        }
    }
    let mut results = vec![CheckResult::at_most("clim slice 0 passthrough max abs diff", passthrough, 0.0)];

    let temporal = clim::temporal_dependency_probe(&clim, &store, &x, 4)?;
    for (i, frames) in temporal.iter().enumerate() {
        let name = format!("clim slice {i} temporal window (frames)");
        results.push(CheckResult::at_most(name, frames.len() as f64, (2 * i + 1) as f64));
    }
    let spatial = clim::spatial_dependency_probe(&clim, &store, &x, (4, 4))?;
    for (i, extent) in spatial.iter().enumerate() {
        let name = format!("clim slice {i} spatial window (pixels)");
        results.push(CheckResult::at_most(name, *extent as f64, (2 * i + 1) as f64));
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_parse() {
        assert_eq!("all".parse::<Suite>().unwrap(), Suite::All);
        assert!("everything".parse::<Suite>().is_err());
    }

    #[test]
    fn reverse_time_is_an_involution() {
        let x = Tensor::from_fn(&[2, 3, 1, 2, 1], |i| i as f64);
        let r = reverse_time(&x).unwrap();
        assert_eq!(r.at5(1, 0, 0, 1, 0), x.at5(1, 2, 0, 1, 0));
        assert_eq!(reverse_time(&r).unwrap(), x);
    }

    #[test]
    fn display_marks_failures() {
        let r = CheckResult::at_most("x", 2.0, 1.0);
        assert!(r.to_string().starts_with("FAIL x"));
    }
}
