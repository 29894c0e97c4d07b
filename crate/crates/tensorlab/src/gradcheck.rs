//! Central-difference gradient checking against the tape.

use crate::error::Result;
use crate::params::ParamStore;
use crate::rng::SplitMix64;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Step used by the acceptance suite.
pub const DEFAULT_STEP: f64 = 1e-4;

/// ReLU inputs closer than this many steps to zero count as a kink.
const KINK_STEPS: f64 = 100.0;
const MAX_JITTERS: usize = 32;
const JITTER: f64 = 1e-2;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Number of re-draws needed to move the point off ReLU kinks.
    pub jitters: usize,
    pub components: usize,
}

/// `|a−b| / max(1e-8, |a|+|b|)`.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

/// Compares the tape gradient of the scalar `f(x)` with central differences.
///
/// Returns the maximum relative error over all components of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    Ok(grad_check_report(f, x, h)?.max_rel_error)
}

pub fn grad_check_report<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |x: &Tensor| -> Result<f64> {
        let mut tape = Tape::inference();
        let v = tape.constant(x.clone());
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).item())
    };
    let mut rng = SplitMix64::new(0x6772_6164);
    let mut point = x.clone();
    let mut jitters = 0;
    loop {
        let mut tape = Tape::new();
        let v = tape.leaf(point.clone());
        let out = f(&mut tape, v)?;
        if tape.relu_margin() < KINK_STEPS * h && jitters < MAX_JITTERS {
            point = Tensor::from_fn(x.shape(), |i| x.data()[i] + rng.uniform(-JITTER, JITTER));
            jitters += 1;
            continue;
        }
        let analytic = tape.backward(out)?.get(v);
        let max_rel_error = compare(&point, analytic.data(), h, &eval)?;
        return Ok(GradCheckReport {
            max_rel_error,
            jitters,
            components: point.numel(),
        });
    }
}

/// Same check with respect to the named parameter of `store`.
///
/// `f` must bind the parameter through [`Tape::param`].
pub fn grad_check_param<F>(f: F, store: &ParamStore, name: &str, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let grads = tape.backward(out)?.params();
    let base = store
        .get(name)
        .ok_or_else(|| crate::error::TensorError::UnknownParam(name.into()))?
        .clone();
    let analytic = grads.get(name).cloned().unwrap_or_else(|| Tensor::zeros(base.shape()));
    let eval = |p: &Tensor| -> Result<f64> {
        let mut s = store.clone();
        s.insert(name, p.clone());
        let mut tape = Tape::inference();
        let out = f(&mut tape, &s)?;
        Ok(tape.value(out).item())
    };
    compare(&base, analytic.data(), h, &eval)
}

fn compare(point: &Tensor, analytic: &[f64], h: f64, eval: &dyn Fn(&Tensor) -> Result<f64>) -> Result<f64> {
    let mut worst: f64 = 0.0;
    let mut probe = point.clone();
    for (i, &a) in analytic.iter().enumerate().take(point.numel()) {
        let x0 = point.data()[i];
        probe.data_mut()[i] = x0 + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = x0 - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = x0;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(rel_error(a, numeric));
    }
    Ok(worst)
}

/// Fixed random projection so checks see non-degenerate output gradients.
pub fn probe_weights(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = SplitMix64::new(seed ^ 0x005E_ED0F_F00D);
    rng.tensor(shape, -1.0, 1.0)
}
