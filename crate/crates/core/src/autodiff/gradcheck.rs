//! Central finite-difference verification of reverse-mode gradients.

use super::{ParamId, ParamStore, Result, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    /// Entries that were perturbed.
    pub probed: usize,
    /// `max |analytic − numeric| / max(max |analytic|, max |numeric|, floor)`
    /// over the probed entries; errors are scaled by the largest gradient of
    /// the parameter so entries that are zero up to round-off do not
    /// dominate.
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn worst(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for p in &self.params {
            writeln!(
                f,
                "{:<40} probed {:>5}  max rel err {:.3e}  {}",
                p.name,
                p.probed,
                p.max_rel_err,
                if p.passed { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

/// Compares the gradient of the scalar `loss(store)` with central
/// differences of step `eps` for every entry of the listed parameters.
pub fn grad_check(
    store: &mut ParamStore<f64>,
    params: &[ParamId],
    eps: f64,
    tol: f64,
    loss: impl Fn(&ParamStore<f64>) -> Result<Tensor<f64>>,
) -> Result<GradCheckReport> {
    grad_check_sampled(store, params, eps, tol, usize::MAX, loss)
}

/// Like [`grad_check`] but probes at most `max_entries` evenly spaced
/// entries per parameter.
pub fn grad_check_sampled(
    store: &mut ParamStore<f64>,
    params: &[ParamId],
    eps: f64,
    tol: f64,
    max_entries: usize,
    loss: impl Fn(&ParamStore<f64>) -> Result<Tensor<f64>>,
) -> Result<GradCheckReport> {
    grad_check_floored(store, params, eps, tol, max_entries, 0.0, loss)
}

/// Like [`grad_check_sampled`] with errors of parameters whose gradient is
/// smaller than `floor` measured against `floor` instead. Central
/// differences carry round-off of order `ε_mach·|loss| / eps`, which swamps
/// gradients near that size.
pub fn grad_check_floored(
    store: &mut ParamStore<f64>,
    params: &[ParamId],
    eps: f64,
    tol: f64,
    max_entries: usize,
    floor: f64,
    loss: impl Fn(&ParamStore<f64>) -> Result<Tensor<f64>>,
) -> Result<GradCheckReport> {
    store.zero_grad();
    let out = loss(store)?;
    store.accumulate(&out.backward()?);
    let mut report = GradCheckReport {
        tol,
        params: Vec::with_capacity(params.len()),
    };
    for &id in params {
        let n = store.data(id).len();
        let analytic = store.grad(id).to_vec();
        let stride = n.div_ceil(max_entries.max(1)).max(1);
        let mut max_diff: f64 = 0.0;
        let mut scale: f64 = 0.0;
        let mut probed = 0;
        for i in (0..n).step_by(stride) {
            let orig = store.data(id)[i];
            store.data_mut(id)[i] = orig + eps;
            let fp = loss(store)?.item();
            store.data_mut(id)[i] = orig - eps;
            let fm = loss(store)?.item();
            store.data_mut(id)[i] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            max_diff = max_diff.max((analytic[i] - numeric).abs());
            scale = scale.max(analytic[i].abs()).max(numeric.abs());
            probed += 1;
        }
        let scale = scale.max(floor);
        let max_rel_err = if scale > 0.0 { max_diff / scale } else { 0.0 };
        report.params.push(ParamCheck {
            name: store.name(id).to_string(),
            probed,
            max_rel_err,
            passed: max_rel_err <= tol && max_rel_err.is_finite(),
        });
    }
    store.zero_grad();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::super::Tensor;
    use super::*;

    #[test]
    fn corrupted_adjoint_is_reported() {
        let mut s = ParamStore::new();
        let x = s.register("x", &[4], vec![0.3, -0.7, 1.1, 0.2]).unwrap();
        let good = grad_check(&mut s, &[x], 1e-5, 1e-6, |s| Ok(s.leaf(x).square().sum())).unwrap();
        assert!(good.passed(), "{good}");

        // Forward is x², backward claims 3x.
        let bad = grad_check(&mut s, &[x], 1e-5, 1e-4, |s| {
            let t = s.leaf(x);
            let data: Vec<f64> = t.data().iter().map(|v| v * v).collect();
            let tc = t.clone();
            Ok(Tensor::from_op("bad_square", vec![4], data, vec![t], move |g, _| {
                vec![Some(g.iter().zip(tc.data()).map(|(g, v)| 3.0 * g * v).collect())]
            })
            .sum())
        })
        .unwrap();
        assert!(!bad.passed());
        assert!(bad.worst() > 0.3);
    }
}
