use rand::Rng;
use serde::Serialize;

use crate::autodiff::{Graph, Var};
use crate::encoders::Query;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Per-term loss values of one step, as plain numbers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub prefix_lm: f64,
    pub contra: f64,
    pub decor: f64,
    pub align: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `prefix_lm + w_contra*contra + w_decor*decor + w_align*align`.
    pub fn combine(prefix_lm: f64, contra: f64, decor: f64, align: f64, weights: (f64, f64, f64)) -> Self {
        Self {
            prefix_lm,
            contra,
            decor,
            align,
            total: prefix_lm + weights.0 * contra + weights.1 * decor + weights.2 * align,
        }
    }

    pub fn all_finite(&self) -> bool {
        [self.prefix_lm, self.contra, self.decor, self.align, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Warm-start training pair: a query and the id of its pseudo ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoPair {
    pub query: Query,
    pub gt_item_id: String,
}

/// Splits at a prefix length drawn uniformly from `1..len`; a single token
/// yields an empty suffix.
pub fn prefix_split<R: Rng>(tokens: &[usize], rng: &mut R) -> Result<(Vec<usize>, Vec<usize>)> {
    match tokens.len() {
        0 => Err(Error::EmptyInput("token list")),
        1 => Ok((tokens.to_vec(), Vec::new())),
        n => {
            let tp = rng.gen_range(1..n);
            Ok((tokens[..tp].to_vec(), tokens[tp..].to_vec()))
        }
    }
}

/// Mean over the batch of `-log softmax(Q K^T / t)[i, i]`: row `i` scores
/// query `i` against every ground-truth key of the batch.
///
/// `queries` and `keys` are `[B, d]`; the other `B - 1` keys act as negatives.
pub fn contrastive_loss<T: Scalar>(g: &mut Graph<T>, queries: Var, keys: Var, temperature: f64) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("contrastive temperature must be positive, got {temperature}")));
    }
    let b = g.value(queries).rows();
    if b == 0 {
        return Err(Error::EmptyInput("contrastive batch"));
    }
    if g.value(keys).rows() != b {
        return Err(Error::Shape {
            op: "contrastive_loss",
            lhs: g.value(queries).shape().to_vec(),
            rhs: g.value(keys).shape().to_vec(),
        });
    }
    let kt = g.transpose(keys)?;
    let logits = g.matmul(queries, kt)?;
    let logits = if temperature == 1.0 { logits } else { g.scale(logits, 1.0 / temperature)? };
    let ce = g.cross_entropy(logits, (0..b).collect())?;
    g.scale(ce, 1.0 / b as f64)
}

/// Ids appearing more than once in a batch (their pairs see false negatives).
pub fn duplicate_targets(pairs: &[PseudoPair]) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    let mut dups: Vec<String> = pairs
        .iter()
        .filter(|p| !seen.insert(p.gt_item_id.as_str()))
        .map(|p| p.gt_item_id.clone())
        .collect();
    dups.sort();
    dups.dedup();
    dups
}
