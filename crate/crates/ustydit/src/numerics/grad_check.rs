use std::collections::HashMap;

use super::param_store::ParamStore;
use crate::util::par_map;
use crate::{Error, Result};

/// Analytic gradients keyed by parameter name.
pub type GradMap = HashMap<String, Vec<f64>>;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max relative error per parameter group, in store order
    pub per_param: Vec<(String, f64)>,
    pub max_rel_err: f64,
    pub worst_param: String,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-6);
    (a - b).abs() / denom
}

/// Compare analytic gradients against central finite differences.
///
/// `eval` computes the loss for a given store, plus analytic gradients
/// when asked. Runs should be 64-bit; finite differences at f32 are
/// meaningless. Perturbed evaluations fan out over `parallelism` threads,
/// each on its own store clone.
pub fn grad_check<F>(
    store: &ParamStore,
    eval: F,
    h: f64,
    tolerance: f64,
    parallelism: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, bool) -> Result<(f64, Option<GradMap>)> + Sync + Send,
{
    let (_, grads) = eval(store, true)?;
    let grads = grads.ok_or_else(|| Error::CheckFailed("eval returned no gradients".into()))?;

    let n = store.num_scalars();
    let fd: Vec<Result<f64>> = par_map((0..n).collect(), parallelism, |flat| {
        let mut s = store.clone();
        let x = s.get_flat(flat).unwrap();
        s.set_flat(flat, x + h);
        let (lp, _) = eval(&s, false)?;
        s.set_flat(flat, x - h);
        let (lm, _) = eval(&s, false)?;
        Ok((lp - lm) / (2.0 * h))
    });

    let mut per_param: Vec<(String, f64)> = Vec::new();
    let mut max_rel = 0.0_f64;
    let mut worst = String::new();
    for (flat, fd_g) in fd.into_iter().enumerate() {
        let fd_g = fd_g?;
        let (name, off) = store.locate(flat).unwrap();
        let analytic = grads
            .get(name)
            .map(|g| g[off])
            .unwrap_or(0.0);
        let e = rel_err(analytic, fd_g);
        match per_param.last_mut() {
            Some((last, emax)) if last == name => *emax = emax.max(e),
            _ => per_param.push((name.to_string(), e)),
        }
        if e > max_rel {
            max_rel = e;
            worst = format!("{name}[{off}]");
        }
    }

    let report = GradCheckReport {
        per_param,
        max_rel_err: max_rel,
        worst_param: worst,
    };
    if !report.passes(tolerance) {
        return Err(Error::CheckFailed(format!(
            "max relative error {:.3e} at {} exceeds tolerance {:.1e}",
            report.max_rel_err, report.worst_param, tolerance
        )));
    }
    Ok(report)
}
