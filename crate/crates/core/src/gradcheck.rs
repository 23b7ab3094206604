//! Central finite-difference gradient checks against the autodiff graph.

use crate::autodiff::{Fault, Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tol: f64,
    /// Relative errors are measured against `max(|analytic|, |numeric|, floor)`.
    pub floor: f64,
    pub fault: Option<Fault>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max relative error for each input, in argument order.
    pub per_param: Vec<f64>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Compares reverse-mode gradients of `f` with central differences.
///
/// `f` builds a scalar loss from trainable leaves holding `params`. It must be
/// deterministic: it is re-run twice per perturbed element.
pub fn grad_check<F>(f: F, params: &[Tensor], cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut graph = Graph::with_fault(cfg.fault);
    let leaves: Vec<Var> = params.iter().map(|p| graph.leaf(p.clone())).collect();
    let loss = f(&mut graph, &leaves)?;
    let grads = graph.backward(loss)?;

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let leaves: Vec<Var> = inputs.iter().map(|p| g.constant(p.clone())).collect();
        let loss = f(&mut g, &leaves)?;
        g.value(loss).item()
    };

    let mut per_param = Vec::with_capacity(params.len());
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, leaf) in leaves.iter().enumerate() {
        let analytic = grads
            .get(*leaf)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; params[pi].len()]);
        let mut worst: f64 = 0.0;
        for (k, &a) in analytic.iter().enumerate() {
            let orig = work[pi].data()[k];
            work[pi].data_mut()[k] = orig + cfg.step;
            let up = eval(&work)?;
            work[pi].data_mut()[k] = orig - cfg.step;
            let down = eval(&work)?;
            work[pi].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            let denom = a.abs().max(numeric.abs()).max(cfg.floor);
            worst = worst.max((a - numeric).abs() / denom);
        }
        per_param.push(worst);
    }
    let max_rel_error = per_param.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_param,
        max_rel_error,
        tol: cfg.tol,
        passed: max_rel_error <= cfg.tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::OpKind;

    #[test]
    fn identity_sum_is_exact() {
        let cfg = GradCheckConfig {
            step: 2f64.powi(-16),
            ..Default::default()
        };
        let params = [Tensor::from_vec(vec![0.0, 1.0, -2.0, 3.0]).unwrap()];
        let report = grad_check(|g, v| g.sum(v[0]), &params, cfg).unwrap();
        assert_eq!(report.max_rel_error, 0.0);
        assert!(report.passed);
    }

    #[test]
    fn corrupted_backward_is_flagged() {
        let cfg = GradCheckConfig {
            fault: Some(Fault {
                op: OpKind::Scale,
                factor: 1.01,
            }),
            ..Default::default()
        };
        let params = [Tensor::from_vec(vec![0.3, -0.7]).unwrap()];
        let report = grad_check(
            |g, v| {
                let y = g.scale(v[0], 3.0)?;
                g.sum(y)
            },
            &params,
            cfg,
        )
        .unwrap();
        assert!(!report.passed);
        assert!(report.max_rel_error > 5e-3);
    }
}
