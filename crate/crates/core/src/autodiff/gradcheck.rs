//! Central finite-difference verification of reverse-mode gradients.

use std::sync::Arc;

use crate::{Error, Result};

use super::array::Array;
use super::tape::{NodeId, Tape};

/// Maximum relative error between analytic and central-difference gradients
/// of a scalar-valued graph `f` over every element of every input.
///
/// `f` receives a tape plus one leaf per input (all requiring grad) and must
/// return a scalar node. Relative error uses `|a - d| / (|a| + |d| + 1e-12)`;
/// when both gradients are below 1e-7 the absolute difference is reported
/// instead, so true zero gradients are not drowned by roundoff in the
/// finite-difference probe.
pub fn grad_check<F>(inputs: &[Array], f: F, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let eval = |xs: &[Array]| -> Result<f64> {
        let mut tape = Tape::inference();
        let ids: Vec<NodeId> = xs
            .iter()
            .map(|x| tape.leaf(Arc::new(x.clone()), true))
            .collect();
        let out = f(&mut tape, &ids)?;
        if !tape.value(out).is_scalar() {
            return Err(Error::Autodiff("grad_check: output must be scalar".into()));
        }
        Ok(tape.value(out).item())
    };

    // analytic gradients
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|x| tape.leaf(Arc::new(x.clone()), true))
        .collect();
    let out = f(&mut tape, &ids)?;
    tape.backward(out)?;
    let analytic: Vec<Array> = ids
        .iter()
        .zip(inputs)
        .map(|(id, x)| {
            tape.grad(*id)
                .cloned()
                .unwrap_or_else(|| Array::zeros(x.shape()))
        })
        .collect();

    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        for j in 0..x.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let d = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            let a = analytic[i].data()[j];
            let err = if a.abs().max(d.abs()) < 1e-7 {
                (a - d).abs()
            } else {
                (a - d).abs() / (a.abs() + d.abs() + 1e-12)
            };
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}
