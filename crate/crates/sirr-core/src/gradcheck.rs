//! Central finite-difference verification of analytic gradients.
//!
//! Every differentiable block and loss in the crate is validated against
//! this checker; it rebuilds the graph per probe, so the closure must be a
//! pure function of the provided tensors.

use crate::graph::{Graph, ValueId};
use crate::tensor::Tensor;
use std::fmt;

#[derive(Debug, Clone)]
pub struct GradCheckSettings {
    /// Central-difference step.
    pub eps: f64,
    /// Relative tolerance (scaled by max(|analytic|, |numeric|, 1)).
    pub rtol: f64,
    /// Absolute floor below which disagreement is ignored.
    pub atol: f64,
    /// Cap on probed coordinates per tensor; evenly strided when set.
    pub max_coords_per_tensor: Option<usize>,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings {
            eps: 1e-5,
            rtol: 1e-4,
            atol: 1e-7,
            max_coords_per_tensor: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub worst_rel: f64,
    pub worst_abs: f64,
    pub worst_site: String,
    pub coords_checked: usize,
    pub failures: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} coords, {} failures, worst rel {:.3e} abs {:.3e} at {}",
            self.coords_checked, self.failures, self.worst_rel, self.worst_abs, self.worst_site
        )
    }
}

/// Compare analytic gradients of a scalar-valued graph function against
/// central finite differences.
///
/// `build` receives a fresh graph plus leaves created from `inputs` (in
/// order, all with `requires_grad`) and must return the scalar loss id.
pub fn check_gradients(
    inputs: &[(&str, Tensor)],
    build: impl Fn(&mut Graph, &[ValueId]) -> ValueId,
    settings: &GradCheckSettings,
) -> GradCheckReport {
    let eval = |tensors: &[Tensor]| -> f64 {
        let mut g = Graph::new(false);
        let ids: Vec<ValueId> = tensors.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let loss = build(&mut g, &ids);
        g.value(loss).item()
    };

    // analytic pass
    let tensors: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut g = Graph::new(true);
    let ids: Vec<ValueId> = tensors.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = build(&mut g, &ids);
    g.backward(loss);
    let analytic: Vec<Tensor> = ids
        .iter()
        .zip(&tensors)
        .map(|(id, t)| g.grad(*id).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut report = GradCheckReport {
        worst_rel: 0.0,
        worst_abs: 0.0,
        worst_site: String::new(),
        coords_checked: 0,
        failures: 0,
    };

    let mut probe = tensors.clone();
    for (ti, (name, _)) in inputs.iter().enumerate() {
        let n = probe[ti].numel();
        let stride = match settings.max_coords_per_tensor {
            Some(cap) if n > cap => (n + cap - 1) / cap,
            _ => 1,
        };
        let mut k = 0;
        while k < n {
            let orig = probe[ti].data()[k];
            probe[ti].data_mut()[k] = orig + settings.eps;
            let up = eval(&probe);
            probe[ti].data_mut()[k] = orig - settings.eps;
            let down = eval(&probe);
            probe[ti].data_mut()[k] = orig;

            let numeric = (up - down) / (2.0 * settings.eps);
            let a = analytic[ti].data()[k];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(1.0);
            report.coords_checked += 1;
            if rel > report.worst_rel {
                report.worst_rel = rel;
                report.worst_abs = abs;
                report.worst_site = format!("{name}[{k}] analytic={a:.6e} numeric={numeric:.6e}");
            }
            if abs > settings.atol && rel > settings.rtol {
                report.failures += 1;
            }
            k += stride;
        }
    }
    report
}
