//! Central finite-difference check of tape gradients.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many evenly spaced entries per input tensor.
    pub max_entries: Option<usize>,
    /// Op whose backward rule is corrupted in the analytic pass (negative control).
    pub fault: Option<String>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            max_entries: None,
            fault: None,
        }
    }
}

impl GradCheckConfig {
    pub fn tolerance(mut self, t: f64) -> Self {
        self.tolerance = t;
        self
    }

    pub fn max_entries(mut self, n: usize) -> Self {
        self.max_entries = Some(n);
        self
    }

    pub fn fault(mut self, op: Option<String>) -> Self {
        self.fault = op;
        self
    }
}

#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    /// Entries re-measured at a smaller step after a suspected kink.
    pub refined: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        // NaN compares false, so a NaN error fails.
        self.tensors
            .iter()
            .all(|t| t.max_rel_error <= self.tolerance)
    }

    pub fn checked(&self) -> usize {
        self.tensors.iter().map(|t| t.checked).sum()
    }

    pub fn refined(&self) -> usize {
        self.tensors.iter().map(|t| t.refined).sum()
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_floor(analytic, numeric, 1e-8)
}

/// Denominator floor for a central difference of a function of magnitude
/// `f` at step `h`. Rounding alone perturbs the estimate by about ε·|f|/h;
/// gradients below 1e5 times that cannot be resolved to 1e-4 relative, so an
/// absolute disagreement within ten times the rounding bound still passes.
pub fn noise_floor(f: f64, h: f64) -> f64 {
    (1e5 * f64::EPSILON * f.abs().max(1.0) / h).max(1e-8)
}

fn indices(n: usize, cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(k) if k < n => (0..k).map(|i| i * n / k).collect(),
        _ => (0..n).collect(),
    }
}

/// Smaller steps tried when the one-sided differences disagree, which
/// signals a kink (ReLU, max) inside [x − h, x + h].
const KINK_RETRIES: usize = 2;

/// Compares the tape gradient of `build` against central differences for
/// every named input. `build` receives one leaf per input, in order, and must
/// return a scalar.
pub fn grad_check<F>(
    inputs: &[(String, Tensor<f64>)],
    build: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone())).collect();
        let root = build(&mut g, &vars)?;
        Ok(g.value(root).data()[0])
    };

    let mut g = Graph::<f64>::new();
    if let Some(op) = &cfg.fault {
        g.inject_backward_fault(op);
    }
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| g.leaf(t.clone())).collect();
    let root = build(&mut g, &vars)?;
    let base = g.value(root).data()[0];
    let grads = g.backward(root)?;

    let mut values: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut tensors = Vec::with_capacity(inputs.len());
    for (k, (name, _)) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]);
        let mut check = TensorCheck {
            name: name.clone(),
            checked: 0,
            refined: 0,
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in indices(values[k].numel(), cfg.max_entries) {
            let orig = values[k].data()[i];
            let mut h = cfg.step;
            let mut numeric;
            let mut tries = 0;
            loop {
                values[k].data_mut()[i] = orig + h;
                let plus = eval(&values)?;
                values[k].data_mut()[i] = orig - h;
                let minus = eval(&values)?;
                values[k].data_mut()[i] = orig;
                numeric = (plus - minus) / (2.0 * h);
                let (fwd, bwd) = ((plus - base) / h, (base - minus) / h);
                let floor = noise_floor(base, h);
                if relative_error_floor(fwd, bwd, floor) <= cfg.tolerance || tries == KINK_RETRIES {
                    break;
                }
                tries += 1;
                h /= 10.0;
            }
            if tries > 0 {
                check.refined += 1;
            }
            let a = analytic.data()[i];
            let err = relative_error_floor(a, numeric, noise_floor(base, h));
            check.checked += 1;
            if err > check.max_rel_error || err.is_nan() {
                check.max_rel_error = err;
                check.worst_index = i;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        tensors.push(check);
    }
    Ok(GradCheckReport {
        tensors,
        tolerance: cfg.tolerance,
    })
}
