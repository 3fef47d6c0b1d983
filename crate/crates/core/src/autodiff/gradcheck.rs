//! Central finite-difference validation of analytic gradients.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Entries whose analytic and numeric gradients are both below this magnitude
/// are compared on an absolute rather than relative scale.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub index: usize,
    pub frozen: bool,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Analytic gradient as returned by backward (all zeros for frozen tensors).
    pub analytic: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error <= self.tol)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn evaluate<F>(f: &F, params: &[Tensor], track: bool) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| {
            let t = p.clone();
            if track {
                g.leaf(t)
            } else {
                g.constant(t)
            }
        })
        .collect();
    let root = f(&mut g, &vars)?;
    let value = g.scalar(root);
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss evaluated to {value}")));
    }
    Ok((g, vars, root))
}

/// Compare backward against central differences `(f(x+h) − f(x−h)) / 2h` for
/// every element of every tensor with `requires_grad`. Frozen tensors are
/// reported with their (zero) analytic gradient and no numeric comparison.
pub fn check_gradients<F>(f: F, params: &[Tensor], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::Config(format!("finite-difference step must be positive, got {step}")));
    }
    let (mut g, vars, root) = evaluate(&f, params, true)?;
    g.backward(root)?;
    let mut report = GradCheckReport {
        params: Vec::with_capacity(params.len()),
        tol,
    };
    let mut probe: Vec<Tensor> = params.to_vec();
    for (index, (p, &v)) in params.iter().zip(&vars).enumerate() {
        let analytic = g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.numel()]);
        let mut check = ParamCheck {
            index,
            frozen: !p.requires_grad(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            analytic,
        };
        if !check.frozen {
            for e in 0..p.numel() {
                let orig = p.data()[e];
                probe[index].data_mut()[e] = orig + step;
                let (gp, _, rp) = evaluate(&f, &probe, false)?;
                probe[index].data_mut()[e] = orig - step;
                let (gm, _, rm) = evaluate(&f, &probe, false)?;
                probe[index].data_mut()[e] = orig;
                let numeric = (gp.scalar(rp) - gm.scalar(rm)) / (2.0 * step);
                let a = check.analytic[e];
                check.max_abs_error = check.max_abs_error.max((a - numeric).abs());
                check.max_rel_error = check.max_rel_error.max(relative_error(a, numeric));
            }
        }
        report.params.push(check);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact() {
        let p = Tensor::vector(vec![0.3, -1.2, 2.5]).with_requires_grad(true);
        let report = check_gradients(
            |g, v| {
                let sq = g.l2_norm(v[0], 0.0);
                let prod = g.matmul_nt(sq, sq)?;
                Ok(prod)
            },
            &[p],
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_error());
        for (a, e) in report.params[0].analytic.iter().zip([0.6, -2.4, 5.0]) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_parameter_reports_zero_gradient() {
        let a = Tensor::vector(vec![1.0, 2.0]).with_requires_grad(true);
        let b = Tensor::vector(vec![3.0, 4.0]);
        let report = check_gradients(
            |g, v| {
                let s = g.add(v[0], v[1])?;
                Ok(g.l2_norm(s, 0.0))
            },
            &[a, b],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.params[1].frozen);
        assert!(report.params[1].analytic.iter().all(|&x| x == 0.0));
        assert!(report.passed());
    }

    #[test]
    fn non_finite_loss_is_numeric_error() {
        let a = Tensor::vector(vec![f64::NAN]).with_requires_grad(true);
        let err = check_gradients(|g, v| Ok(g.l2_norm(v[0], 0.0)), &[a], 1e-5, 1e-6).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }
}
