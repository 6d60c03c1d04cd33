//! Central finite-difference oracle for checking recorded gradients.

use super::{Graph, NodeId, ParamStore};
use crate::error::{contract, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Central-difference step.
    pub step: f64,
    /// Magnitudes below this are compared absolutely rather than relatively.
    pub floor: f64,
    /// Check at most this many entries per parameter (evenly strided). `None` checks all.
    pub max_entries_per_param: Option<usize>,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-6,
            max_entries_per_param: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries_checked: usize,
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Relative error with an absolute floor on the denominator.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `backward` against central differences of the scalar built by `build`.
pub fn check_gradients<F>(store: &ParamStore, cfg: GradCheck, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<NodeId>,
{
    let analytic = {
        let mut g = Graph::new(store);
        let loss = build(&mut g)?;
        g.backward(loss)?
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(s);
        let loss = build(&mut g)?;
        g.check_finite()?;
        contract!(g.dim(loss) == 1, "loss must be scalar");
        Ok(g.scalar(loss))
    };

    let mut work = store.clone();
    let mut report = GradCheckReport {
        entries_checked: 0,
        max_rel_error: 0.0,
        worst: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for id in store.ids() {
        let n = store.get(id).len();
        let stride = match cfg.max_entries_per_param {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for k in (0..n).step_by(stride) {
            let orig = store.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + cfg.step;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig - cfg.step;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig;

            let numeric = (up - down) / (2.0 * cfg.step);
            let a = analytic.get(id).data()[k];
            let err = relative_error(a, numeric, cfg.floor);
            report.entries_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((store.name(id).to_string(), k));
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}
