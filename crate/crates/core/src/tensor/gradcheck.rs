//! Central-difference gradient checking.
//!
//! Runs a recorded computation in `f64`, compares analytic gradients against
//! `(f(x+eps) - f(x-eps)) / 2eps` elementwise, and reports the worst relative
//! error with denominator `max(|analytic|, |numeric|, 1e-8)`. Only inputs
//! with `requires_grad` are perturbed.

use crate::error::{Error, Result};

use super::{Graph, NodeId, Tensor};

pub fn grad_check<F>(inputs: &[Tensor<f64>], eps: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t)).collect();
    let loss = f(&mut g, &ids)?;
    if g.numel(loss) != 1 {
        return Err(Error::invalid(format!(
            "grad_check needs a scalar-valued computation, got shape {:?}",
            g.shape(loss)
        )));
    }
    let grads = g.backward(loss)?;

    let eval = |ts: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ts.iter().map(|t| g.leaf(t)).collect();
        let loss = f(&mut g, &ids)?;
        Ok(g.scalar_value(loss))
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut max_rel = 0.0f64;
    for (i, t) in inputs.iter().enumerate() {
        if !t.requires_grad() {
            continue;
        }
        let analytic: Vec<f64> = match grads.get(ids[i]) {
            Some(s) => s.to_vec(),
            None => vec![0.0; t.numel()],
        };
        for j in 0..t.numel() {
            let orig = t.data()[j];
            work[i].data_mut()[j] = orig + eps;
            let fp = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let fm = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let rel = (numeric - analytic[j]).abs() / numeric.abs().max(analytic[j].abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
