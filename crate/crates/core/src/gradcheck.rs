//! Central-difference verification of analytic gradients.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, OpKind, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Corrupt one op's backward rule (checker self-test).
    pub fault: Option<OpKind>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            fault: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(param index, flat element index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    /// Analytic and numeric derivative at the worst entry.
    pub worst_values: (f64, f64),
    pub entries: usize,
}

/// Compares reverse-mode gradients of a scalar function with central
/// differences over every entry of every parameter.
///
/// `f` builds the function on a fresh graph given one `param` leaf per
/// tensor in `params` and must return a `1 x 1` node. The error for each
/// entry is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(f: F, params: &[Tensor], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(opts.step > 0.0) {
        return Err(Error::Contract(format!(
            "grad_check step must be > 0, got {}",
            opts.step
        )));
    }
    let mut g = Graph::new();
    if let Some(kind) = opts.fault {
        g.inject_fault(kind);
    }
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.rows(), p.cols())))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|p| g.param(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out);
        if v.shape() != (1, 1) {
            return Err(Error::Contract("grad_check function must return a scalar".into()));
        }
        let v = v.data()[0];
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        Ok(v)
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        entries: 0,
    };
    for pi in 0..params.len() {
        for ei in 0..params[pi].len() {
            let orig = params[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + opts.step;
            let plus = eval(&work)?;
            work[pi].data_mut()[ei] = orig - opts.step;
            let minus = eval(&work)?;
            work[pi].data_mut()[ei] = orig;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[pi].data()[ei];
            let denom = f64::max(f64::max(libm::fabs(a), libm::fabs(numeric)), 1e-8);
            let rel = libm::fabs(a - numeric) / denom;
            report.entries += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((pi, ei));
                report.worst_values = (a, numeric);
            }
        }
    }
    Ok(report)
}
