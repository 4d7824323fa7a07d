//! Central finite-difference verification of tape gradients (64-bit only).

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    /// Finite-difference step `h`.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Lower bound of the relative-error denominator, so that near-zero
    /// gradients are compared absolutely.
    pub floor: f64,
    /// Check at most this many evenly spaced elements per leaf.
    pub max_elements_per_leaf: Option<usize>,
    /// When the one-sided slopes `(f(x+h) - f(x)) / h` and
    /// `(f(x) - f(x-h)) / h` disagree by more than `tol` (relative), the
    /// step straddles a kink; retry that element with `h / 10`, at most
    /// this many times.
    pub kink_retries: usize,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            floor: 1e-3,
            max_elements_per_leaf: None,
            kink_retries: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeafReport {
    pub leaf: usize,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_element: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Elements whose step was refined because of a kink.
    pub refined: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub leaves: Vec<LeafReport>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn checked(&self) -> usize {
        self.leaves.iter().map(|l| l.checked).sum()
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn sample_indices(numel: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(k) if k < numel => (0..k).map(|i| i * numel / k).collect(),
        _ => (0..numel).collect(),
    }
}

/// Compares the tape gradient of the scalar `f(leaves)` against central
/// differences `(f(x + h) - f(x - h)) / 2h`, element by element.
pub fn gradcheck<F>(f: F, leaves: &[Tensor<f64>], opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<f64>> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = f(&tape, &vars)?;
    let grads = tape.backward(&root)?;

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::inference();
        let vars: Vec<Var<f64>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let v = f(&tape, &vars)?.value().item()?;
        if !v.is_finite() {
            return Err(TensorError::Gradcheck(
                "non-finite loss at perturbation".to_string(),
            ));
        }
        Ok(v)
    };

    let mut reports = Vec::with_capacity(leaves.len());
    let mut inputs: Vec<Tensor<f64>> = leaves.to_vec();
    let f0 = eval(&inputs)?;
    for (li, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(var);
        let base = leaves[li].to_vec();
        let mut report = LeafReport {
            leaf: li,
            checked: 0,
            max_rel_err: 0.0,
            worst_element: 0,
            analytic: 0.0,
            numeric: 0.0,
            refined: 0,
        };
        for idx in sample_indices(base.len(), opts.max_elements_per_leaf) {
            let mut step = opts.step;
            let mut numeric;
            let mut attempt = 0;
            loop {
                let mut plus = base.clone();
                plus[idx] += step;
                inputs[li] = Tensor::new(leaves[li].shape(), plus)?;
                let fp = eval(&inputs)?;
                let mut minus = base.clone();
                minus[idx] -= step;
                inputs[li] = Tensor::new(leaves[li].shape(), minus)?;
                let fm = eval(&inputs)?;
                numeric = (fp - fm) / (2.0 * step);
                let (right, left) = ((fp - f0) / step, (f0 - fm) / step);
                let kink = relative_error(right, left, opts.floor) > opts.tol;
                if !kink || attempt == opts.kink_retries {
                    break;
                }
                attempt += 1;
                step /= 10.0;
            }
            if attempt > 0 {
                report.refined += 1;
            }
            let a = analytic.data()[idx];
            let err = relative_error(a, numeric, opts.floor);
            if err > report.max_rel_err || report.checked == 0 {
                report.max_rel_err = err;
                report.worst_element = idx;
                report.analytic = a;
                report.numeric = numeric;
            }
            report.checked += 1;
        }
        inputs[li] = leaves[li].clone();
        reports.push(report);
    }
    let max_rel_err = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    Ok(GradcheckReport {
        leaves: reports,
        max_rel_err,
        tol: opts.tol,
        passed: max_rel_err <= opts.tol,
    })
}
