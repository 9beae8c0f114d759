//! Central-difference verification of reverse-mode gradients.

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{CstpError, Result};

/// Gradients smaller than this are compared in absolute terms; central
/// differences of a non-trivial loss carry roundoff near `1e-11`.
pub const REL_FLOOR: f64 = 1e-6;

/// Worst disagreement found by [`finite_diff_report`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

/// Which coordinates to probe.
#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    /// Probe at most this many evenly spaced coordinates per parameter.
    pub max_coords_per_param: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-5,
            max_coords_per_param: None,
        }
    }
}

fn eval<F>(params: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&Graph) -> Result<Var>,
{
    let g = Graph::inference(params);
    f(&g)?.value().item()
}

/// Maximum relative error between analytic and central-difference gradients
/// of the scalar `f` over every coordinate of every parameter.
pub fn finite_diff_check<F>(params: &ParamStore, h: f64, f: F) -> Result<f64>
where
    F: Fn(&Graph) -> Result<Var>,
{
    let opts = GradCheckOptions {
        h,
        max_coords_per_param: None,
    };
    Ok(finite_diff_report(params, opts, f)?.max_rel_err)
}

pub fn finite_diff_report<F>(params: &ParamStore, opts: GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&Graph) -> Result<Var>,
{
    if !(opts.h > 0.0) {
        return Err(CstpError::invalid(format!("step h must be positive, got {}", opts.h)));
    }
    let grads = {
        let g = Graph::new(params, true);
        let loss = f(&g)?;
        g.backward(&loss)?
    };
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
    };
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let n = params.get(&name).map_or(0, |t| t.numel());
        let stride = match opts.max_coords_per_param {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for i in (0..n).step_by(stride) {
            let orig = params.get(&name).unwrap().data()[i];
            work.get_mut(&name).unwrap().data_mut()[i] = orig + opts.h;
            let fp = eval(&work, &f)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig - opts.h;
            let fm = eval(&work, &f)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * opts.h);
            let analytic = grads.get(&name).map_or(0.0, |g| g.data()[i]);
            let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
            let rel = (analytic - numeric).abs() / denom;
            report.coords_checked += 1;
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = rel;
                report.worst = Some((name.clone(), i));
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn linear_function_is_exact() {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::from_vec(vec![0.3, -1.2, 2.0])).unwrap();
        let err = finite_diff_check(&s, 1e-5, |g| {
            let p = g.param("p")?;
            let w = g.constant(Tensor::from_vec(vec![1.0, 2.0, -3.0]));
            Ok(g.sum(&g.mul(&p, &w)?))
        })
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn quadratic_function_within_taylor_bound() {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::from_vec(vec![0.7, -0.4, 1.9, 3.0])).unwrap();
        let err = finite_diff_check(&s, 1e-5, |g| {
            let p = g.param("p")?;
            Ok(g.sum(&g.square(&p)))
        })
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn rejects_non_positive_step() {
        let s = ParamStore::new();
        assert!(finite_diff_check(&s, 0.0, |g| Ok(g.constant(Tensor::scalar(1.0)))).is_err());
    }
}
