//! Central-finite-difference verification of tape gradients.

use crate::error::Result;
use crate::numkernel::{Matrix, NodeId, Tape};

/// Builds a scalar loss on the given tape from named parameter leaves.
/// The same builder is reused for the analytic pass and every perturbed
/// evaluation, so it must be deterministic in the parameter values.
pub trait LossBuilder {
    fn build(&self, tape: &mut Tape, params: &[(String, NodeId)]) -> Result<NodeId>;
}

impl<F> LossBuilder for F
where
    F: Fn(&mut Tape, &[(String, NodeId)]) -> Result<NodeId>,
{
    fn build(&self, tape: &mut Tape, params: &[(String, NodeId)]) -> Result<NodeId> {
        self(tape, params)
    }
}

#[derive(Debug, Clone)]
pub struct ParamReport {
    pub name: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct FiniteDiffReport {
    pub per_param: Vec<ParamReport>,
    pub tol: f64,
    pub pass: bool,
}

impl FiniteDiffReport {
    pub fn worst(&self) -> f64 {
        self.per_param
            .iter()
            .map(|p| p.max_rel_err)
            .fold(0.0, f64::max)
    }
}

/// Guard for the relative-error denominator: differences between two
/// near-zero gradients are measured against this floor instead of each
/// other.
const DENOM_GUARD: f64 = 1e-4;

fn eval_loss(builder: &impl LossBuilder, params: &[(String, Matrix)]) -> Result<f64> {
    let mut tape = Tape::new();
    let mut ids = Vec::with_capacity(params.len());
    for (name, value) in params {
        let id = tape.param(name, value.clone())?;
        ids.push((name.clone(), id));
    }
    let loss = builder.build(&mut tape, &ids)?;
    Ok(tape.scalar(loss))
}

/// Compares the tape gradient of `builder` against central finite
/// differences `(f(x+h) - f(x-h)) / 2h`, elementwise, for every
/// parameter. Passes iff all per-parameter max relative errors are
/// within `tol`.
pub fn finite_diff_check(
    builder: &impl LossBuilder,
    params: &[(String, Matrix)],
    h: f64,
    tol: f64,
) -> Result<FiniteDiffReport> {
    let mut tape = Tape::new();
    let mut ids = Vec::with_capacity(params.len());
    for (name, value) in params {
        let id = tape.param(name, value.clone())?;
        ids.push((name.clone(), id));
    }
    let loss = builder.build(&mut tape, &ids)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<(String, Matrix)> = params
        .iter()
        .map(|(name, _)| (name.clone(), grads.expect(name).clone()))
        .collect();
    finite_diff_compare(builder, params, &analytic, h, tol)
}

/// Same comparison with an externally supplied analytic gradient, mostly
/// useful for verifying that a corrupted gradient is in fact rejected.
pub fn finite_diff_compare(
    builder: &impl LossBuilder,
    params: &[(String, Matrix)],
    analytic: &[(String, Matrix)],
    h: f64,
    tol: f64,
) -> Result<FiniteDiffReport> {
    let mut per_param = Vec::with_capacity(params.len());
    for (pi, (name, value)) in params.iter().enumerate() {
        let grad = &analytic
            .iter()
            .find(|(n, _)| n == name)
            .expect("analytic gradient for every parameter")
            .1;
        let mut max_rel = 0.0f64;
        for idx in 0..value.data().len() {
            let mut plus = params.to_vec();
            plus[pi].1.data_mut()[idx] += h;
            let mut minus = params.to_vec();
            minus[pi].1.data_mut()[idx] -= h;
            let fd = (eval_loss(builder, &plus)? - eval_loss(builder, &minus)?) / (2.0 * h);
            let a = grad.data()[idx];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(DENOM_GUARD);
            max_rel = max_rel.max(rel);
        }
        per_param.push(ParamReport {
            name: name.clone(),
            max_rel_err: max_rel,
        });
    }
    let pass = per_param.iter().all(|p| p.max_rel_err <= tol);
    Ok(FiniteDiffReport {
        per_param,
        tol,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(tape: &mut Tape, params: &[(String, NodeId)]) -> Result<NodeId> {
        let p = params[0].1;
        let sq = tape.hadamard(p, p)?;
        let s = tape.sum(sq);
        Ok(tape.scale(s, 0.5))
    }

    fn seeded_param() -> Vec<(String, Matrix)> {
        // Entries bounded away from zero keep the relative check tight.
        let m = Matrix::from_rows(&[vec![0.7, -1.2, 1.9], vec![0.5, 2.0, -0.8]]).unwrap();
        vec![("p".to_string(), m)]
    }

    #[test]
    fn quadratic_passes_across_step_sizes() {
        for h in [1e-6, 1e-5, 1e-4] {
            let report = finite_diff_check(&quadratic, &seeded_param(), h, 1e-6).unwrap();
            assert!(report.pass, "h={h}: worst {}", report.worst());
        }
    }

    #[test]
    fn report_lists_every_parameter() {
        let mut params = seeded_param();
        params.push(("q".to_string(), Matrix::filled(1, 2, 0.9)));
        let both = |tape: &mut Tape, ps: &[(String, NodeId)]| -> Result<NodeId> {
            let a = tape.hadamard(ps[0].1, ps[0].1)?;
            let b = tape.hadamard(ps[1].1, ps[1].1)?;
            let sa = tape.sum(a);
            let sb = tape.sum(b);
            tape.add(sa, sb)
        };
        let report = finite_diff_check(&both, &params, 1e-5, 1e-6).unwrap();
        assert_eq!(report.per_param.len(), 2);
        assert!(report.pass);
    }

    #[test]
    fn corrupted_gradient_fails() {
        let params = seeded_param();
        let corrupted: Vec<(String, Matrix)> = params
            .iter()
            .map(|(n, m)| (n.clone(), m.scale(1.01)))
            .collect();
        let report = finite_diff_compare(&quadratic, &params, &corrupted, 1e-5, 1e-4).unwrap();
        assert!(!report.pass, "corruption went undetected: {report:?}");
    }
}
