//! Finite-difference verification of tape gradients.
//!
//! The numeric side only ever calls the forward pass, so it stays an
//! independent oracle for the backward pass it checks.

use crate::error::Result;
use crate::grid::Grid;
use crate::model::SegNet;
use crate::tape::{NodeId, Tape};

/// One parameter coordinate compared against the central difference.
#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Outcome of a whole-net gradient check. Failures are reported, never
/// thrown.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

/// Relative error with a floor so near-zero gradient pairs compare sanely.
pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Compare backward-pass gradients of `loss_fn(forward(net, input))` against
/// central finite differences over every parameter coordinate.
pub fn grad_check<L>(
    net: &SegNet,
    input: &Grid,
    loss_fn: &L,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    L: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    assert!(h > 0.0, "step size must be positive");

    let eval = |candidate: &SegNet| -> Result<f64> {
        let mut tape = Tape::new();
        let reg = candidate.register(&mut tape);
        let out = reg.forward(&mut tape, input)?;
        let loss = loss_fn(&mut tape, out)?;
        tape.tensor(loss).item()
    };

    // analytic gradients, one backward pass
    let mut tape = Tape::new();
    let reg = net.register(&mut tape);
    let out = reg.forward(&mut tape, input)?;
    let loss = loss_fn(&mut tape, out)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = reg
        .param_ids()
        .iter()
        .zip(net.params())
        .map(|(&id, p)| grads.wrt(id, p.values.len()))
        .collect();

    let mut scratch = net.clone();
    let mut entries = Vec::new();
    let mut max_rel_err: f64 = 0.0;
    for (pi, param) in net.params().iter().enumerate() {
        for j in 0..param.values.len() {
            let orig = param.values[j];
            scratch.params_mut()[pi].values[j] = orig + h;
            let up = eval(&scratch)?;
            scratch.params_mut()[pi].values[j] = orig - h;
            let down = eval(&scratch)?;
            scratch.params_mut()[pi].values[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[pi][j];
            let rel_err = relative_error(a, numeric);
            max_rel_err = max_rel_err.max(rel_err);
            entries.push(GradCheckEntry {
                param: param.name.clone(),
                index: j,
                analytic: a,
                numeric,
                rel_err,
            });
        }
    }
    Ok(GradCheckReport {
        entries,
        max_rel_err,
        tol,
    })
}

/// Central difference of a scalar function of one coordinate.
pub fn central_difference<F>(mut f: F, x: f64, h: f64) -> f64
where
    F: FnMut(f64) -> f64,
{
    (f(x + h) - f(x - h)) / (2.0 * h)
}
