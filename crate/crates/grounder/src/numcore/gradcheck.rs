use crate::error::Result;
use crate::numcore::{Matrix, NodeId, Tape};

/// Central-difference check of reverse-mode gradients with respect to `x`.
///
/// `build` constructs a scalar loss from a leaf holding `x`. Returns the
/// maximum relative error over all entries, with denominator
/// max(|analytic|, 1e-8).
pub fn fd_check<F>(build: F, x: &Matrix, eps: f64) -> Result<f64>
where
    F: Fn(&Tape, NodeId) -> Result<NodeId>,
{
    let tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let loss = build(&tape, leaf)?;
    let analytic = tape.backward(loss)?.wrt(&tape, leaf);

    let eval = |m: &Matrix| -> Result<f64> {
        let t = Tape::new();
        let l = t.leaf(m.clone());
        let node = build(&t, l)?;
        Ok(t.value(node).as_scalar())
    };

    let mut max_rel = 0.0f64;
    for i in 0..x.data.len() {
        let mut plus = x.clone();
        plus.data[i] += eps;
        let mut minus = x.clone();
        minus.data[i] -= eps;
        let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
        let g = analytic.data[i];
        let rel = (fd - g).abs() / g.abs().max(1e-8);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}
