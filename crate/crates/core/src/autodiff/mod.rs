//! Dense `f64` tensors, a recording tape for reverse-mode gradients, and a
//! finite-difference checker for validating them.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{check_gradients, relative_error, GradCheckReport, ParamCheck, REL_ERROR_FLOOR};
pub use graph::{Graph, Var};
pub use tensor::{kernels, Tensor};

/// Variance epsilon used by every layer norm in the crate.
pub const LN_EPS: f64 = 1e-5;

/// Stable softmax of a vector. Errors on non-finite input.
pub fn softmax(logits: &[f64]) -> crate::Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(crate::Error::Domain("softmax of an empty vector".into()));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(crate::Error::Numeric("softmax input is not finite".into()));
    }
    let mut out = logits.to_vec();
    kernels::softmax_in_place(&mut out);
    Ok(out)
}

/// Layer norm over the trailing dimension of `x`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> crate::Result<Tensor> {
    let mut g = Graph::new();
    let (xv, gv, bv) = (g.constant(x.clone()), g.constant(gain.clone()), g.constant(bias.clone()));
    let y = g.layer_norm(xv, gv, bv, LN_EPS)?;
    Ok(g.value(y).clone())
}
