use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `sum_{i,j} ||Cov(v_i, v_j)||_F^2` over all ordered pairs, `i == j` included.
///
/// Each `[c, d]` value is centered over its `c` tokens; the cross-covariance
/// uses divisor `c - 1`.
pub fn decor_loss<T: Scalar>(g: &mut Graph<T>, values: &[Var]) -> Result<Var> {
    if values.is_empty() {
        return Err(Error::EmptyInput("decor_loss values"));
    }
    let c = g.value(values[0]).rows();
    if c < 2 {
        return Err(Error::InvalidArgument(format!("decor_loss needs c >= 2, got {c}")));
    }
    let mut terms = Vec::with_capacity(values.len() * values.len());
    for &a in values {
        for &b in values {
            let cov = g.covariance(a, b)?;
            terms.push((1.0, g.frobenius_sq(cov)?));
        }
    }
    g.weighted_sum(&terms)
}

/// `|1 - value_norm_sum / query_norm_sum|`.
pub fn align_loss<T: Scalar>(g: &mut Graph<T>, value_norm_sum: Var, query_norm_sum: Var) -> Result<Var> {
    let q = g.value(query_norm_sum).item();
    if q == T::zero() {
        return Err(Error::InvalidArgument("align_loss: query norm sum is zero".into()));
    }
    let ratio = g.div(value_norm_sum, query_norm_sum)?;
    let ratio = g.reshape(ratio, vec![1])?;
    let one = g.constant(Tensor::ones(vec![1]));
    let diff = g.sub(one, ratio)?;
    let a = g.abs(diff)?;
    g.sum(a)
}

/// Sum of Frobenius norms of the given nodes, as a scalar node.
pub fn norm_sum<T: Scalar>(g: &mut Graph<T>, xs: &[Var]) -> Result<Var> {
    let mut terms = Vec::with_capacity(xs.len());
    for &x in xs {
        terms.push((1.0, g.l2_norm(x)?));
    }
    g.weighted_sum(&terms)
}
