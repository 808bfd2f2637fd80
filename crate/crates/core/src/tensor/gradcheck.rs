//! Central finite-difference gradient verification.
//!
//! The probe evaluations are independent (one fresh tape per evaluation),
//! so they run through the data-parallel map. Relative error uses a small
//! floor so that near-zero gradients are compared on an absolute scale
//! instead of amplifying finite-difference round-off.

use super::{Tape, Tensor, TensorId};
use crate::error::Result;
use crate::par;

const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub points: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

/// Compare analytic gradients of `f` against central differences.
///
/// `f` builds a scalar loss on the given tape from the registered inputs.
/// Every element of every input is probed with a ±`step` perturbation.
pub fn grad_check<F>(f: &F, inputs: &[Tensor], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId> + Sync,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs.iter().map(|t| tape.param_from(t)).collect();
    let loss = f(&mut tape, &ids)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| {
            tape.grad(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    // Numeric pass: one probe per input element.
    let probes: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(ti, t)| (0..t.numel()).map(move |ei| (ti, ei)))
        .collect();

    let eval = |ti: usize, ei: usize, delta: f64| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut c = t.clone();
                c.requires_grad = false;
                c.grad = None;
                if i == ti {
                    c.data[ei] += delta;
                }
                tape.input(c)
            })
            .collect();
        let loss = f(&mut tape, &ids)?;
        Ok(tape.scalar_value(loss))
    };

    let numeric: Vec<Result<f64>> = par::map_indexed(probes.len(), |p| {
        let (ti, ei) = probes[p];
        let hi = eval(ti, ei, step)?;
        let lo = eval(ti, ei, -step)?;
        Ok((hi - lo) / (2.0 * step))
    });

    let mut max_rel_err = 0.0f64;
    for (p, num) in numeric.into_iter().enumerate() {
        let num = num?;
        let (ti, ei) = probes[p];
        let ana = analytic[ti][ei];
        let denom = ana.abs().max(num.abs()).max(REL_FLOOR);
        max_rel_err = max_rel_err.max((ana - num).abs() / denom);
    }

    Ok(GradCheckReport {
        max_rel_err,
        points: probes.len(),
        tol,
    })
}
