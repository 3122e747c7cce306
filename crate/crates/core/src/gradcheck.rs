//! Central finite-difference gradient checking in `f64`.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default central-difference step.
pub const DEFAULT_EPS: f64 = 1e-4;

/// Relative error floor in the denominator.
const REL_FLOOR: f64 = 1e-8;

/// Agreement between analytic and numeric gradients for one input.
#[derive(Clone, Debug)]
pub struct GroupReport {
    pub max_rel_error: f64,
    /// Flat coordinate where the maximum occurred.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares reverse-mode gradients of the scalar `f` with central
/// differences, one report per entry of `inputs`.
///
/// `f` receives a fresh tape and one leaf per input (all requiring
/// gradients) and must return a scalar on that tape.
pub fn gradient_check<F>(inputs: &[Tensor<f64>], eps: f64, mut f: F) -> Result<GradCheckReport>
where
    F: for<'t> FnMut(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let analytic: Vec<Tensor<f64>> = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
        let out = f(&tape, &vars)?;
        let grads = tape.backward(out)?;
        vars.iter().map(|v| grads.get_or_zeros(*v)).collect()
    };

    let mut eval = |values: &[Tensor<f64>], group: usize, index: usize| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = values.iter().map(|x| tape.leaf(x.clone(), false)).collect();
        let v = f(&tape, &vars)?.value().item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite { context: format!("input {group}, coordinate {index}") })
        }
    };

    let mut values = inputs.to_vec();
    let mut groups = Vec::with_capacity(inputs.len());
    for (gi, grad) in analytic.iter().enumerate() {
        let mut report = GroupReport { max_rel_error: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0 };
        for i in 0..values[gi].len() {
            let orig = values[gi].data()[i];
            values[gi].data_mut()[i] = orig + eps;
            let plus = eval(&values, gi, i)?;
            values[gi].data_mut()[i] = orig - eps;
            let minus = eval(&values, gi, i)?;
            values[gi].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[i];
            let err = relative_error(a, numeric);
            if err > report.max_rel_error || i == 0 {
                report = GroupReport { max_rel_error: err, worst_index: i, analytic: a, numeric };
            }
        }
        groups.push(report);
    }
    Ok(GradCheckReport { groups })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn linear_function_is_exact() {
        let x = random(&[2, 3, 4], 1);
        let r = gradient_check(&[x], DEFAULT_EPS, |_, v| Ok(v[0].sum())).unwrap();
        assert!(r.max_rel_error() <= 1e-10, "{r:?}");
    }

    #[test]
    fn sigmoid_sum_within_tolerance() {
        let x = random(&[3, 5], 2);
        let r = gradient_check(&[x], DEFAULT_EPS, |_, v| Ok(v[0].sigmoid().sum())).unwrap();
        assert!(r.max_rel_error() <= 1e-6, "{r:?}");
    }

    #[test]
    fn non_finite_reports_coordinate() {
        let x = Tensor::new(&[2], vec![1.0, 0.0]).unwrap();
        let err = gradient_check(&[x], DEFAULT_EPS, |tape, v| {
            // log of a value that crosses zero at coordinate 1
            let _ = tape;
            let y = v[0].value().map(|a| if a < 0.0 { f64::NAN } else { a });
            let c = tape.constant(y);
            Ok(v[0].mul(c)?.sum())
        })
        .unwrap_err();
        assert!(err.to_string().contains("coordinate 1"), "{err}");
    }
}
