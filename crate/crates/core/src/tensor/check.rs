//! Central-difference gradient verification.
//!
//! The oracle always evaluates the function in 64-bit; the gradient under
//! test may come from an f32 or f64 backward pass.

use super::graph::{Graph, NodeId};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct FiniteDiffReport {
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Compare `analytic` (dL/dx) against central differences of `f` at `x`,
/// with per-coordinate step h = 1e-5 * (1 + |x_i|). The relative error for a
/// coordinate uses max(|fd|, |analytic|, 1e-6) as denominator; the report
/// carries the worst coordinate.
pub fn finite_diff_check<Ff>(
    f: Ff,
    x: &Tensor<f64>,
    analytic: &Tensor<f64>,
    tol: f64,
) -> Result<FiniteDiffReport>
where
    Ff: Fn(&Tensor<f64>) -> Result<f64>,
{
    if x.shape() != analytic.shape() {
        return Err(Error::Shape(format!(
            "finite_diff_check: x {:?} vs gradient {:?}",
            x.shape(),
            analytic.shape()
        )));
    }
    let mut probe = x.clone();
    let mut max_rel = 0.0f64;
    for i in 0..x.numel() {
        let xi = x.data()[i];
        let h = 1e-5 * (1.0 + xi.abs());
        probe.data_mut()[i] = xi + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = xi - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = xi;
        let fd = (fp - fm) / (2.0 * h);
        let an = analytic.data()[i];
        let denom = fd.abs().max(an.abs()).max(1e-6);
        let rel = (fd - an).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(FiniteDiffReport {
        max_rel_err: max_rel,
        pass: max_rel <= tol,
    })
}

/// Self-checking variant: `build` maps (graph, x-leaf) to a scalar loss; the
/// same builder supplies both the backward gradient and the 64-bit forward
/// for the differences.
pub fn finite_diff_check_backward<B>(
    build: B,
    x: &Tensor<f64>,
    tol: f64,
) -> Result<FiniteDiffReport>
where
    B: Fn(&mut Graph<f64>, NodeId) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let xid = g.leaf(x.clone(), true);
    let loss = build(&mut g, xid)?;
    g.backward(loss)?;
    let grad = g
        .grad(xid)
        .ok_or_else(|| Error::Graph("no gradient for checked leaf".into()))?;
    finite_diff_check(
        |probe| {
            let mut g2 = Graph::new();
            let id = g2.leaf(probe.clone(), false);
            let l = build(&mut g2, id)?;
            Ok(g2.value(l).item())
        },
        x,
        &grad,
        tol,
    )
}
