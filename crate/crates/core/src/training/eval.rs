use rayon::prelude::*;
use serde::Serialize;

use super::config::Ablation;
use super::step::{retrieve, TrainExample};
use crate::autodiff::{Graph, Tensor};
use crate::encoders::Query;
use crate::error::{Error, Result};
use crate::fusion::build_attention_mask;
use crate::memory::{build_snapshot, KnowledgeItem, MemorySnapshot};
use crate::model::Model;
use crate::retriever::RetrievedSet;
use crate::scalar::Scalar;

/// Splits a query into the evaluation prefix (all but the last `suffix_len`
/// tokens, plus the image) and the suffix to be generated.
pub fn eval_split(query: &Query, suffix_len: usize) -> Result<(Query, Vec<usize>)> {
    let n = query.text_tokens.len();
    if n <= suffix_len {
        return Err(Error::InvalidArgument(format!(
            "query {:?} has {n} tokens, cannot hold out {suffix_len}",
            query.id
        )));
    }
    let prefix = Query::new(query.id.clone(), query.text_tokens[..n - suffix_len].to_vec(), query.patches.clone());
    Ok((prefix, query.text_tokens[n - suffix_len..].to_vec()))
}

/// Retrieves for `input` and runs the fusion stack with frozen parameters.
pub fn fuse<T: Scalar>(
    model: &Model<T>,
    snapshot: &MemorySnapshot<T>,
    input: &Query,
    k: usize,
    ablation: Ablation,
) -> Result<(RetrievedSet<T>, Tensor<T>)> {
    let retrieved = retrieve(model, snapshot, input, k)?;
    let mut g = Graph::no_grad();
    let base = model.encoders.base_encode(&mut g, &model.params, input)?;
    let values: Vec<_> = retrieved.entries.iter().map(|e| g.constant(e.value.clone())).collect();
    let mask = match ablation {
        Ablation::NoMask => None,
        _ => {
            let query_len = g.value(base).rows();
            let m = build_attention_mask(&retrieved.topk_probs, query_len, model.config.c)?;
            Some(g.constant(Tensor::vector(m)))
        }
    };
    let fused = model.fusion.attentive_fusion(&mut g, &model.params, base, &values, mask)?;
    Ok((retrieved, g.value(fused).clone()))
}

/// Greedy continuation of `input` of length `len`.
pub fn generate<T: Scalar>(
    model: &Model<T>,
    snapshot: &MemorySnapshot<T>,
    input: &Query,
    k: usize,
    len: usize,
    ablation: Ablation,
) -> Result<(RetrievedSet<T>, Vec<usize>)> {
    let (retrieved, fused) = fuse(model, snapshot, input, k, ablation)?;
    let out = model.fusion.greedy_decode(&model.params, &fused, len, None)?;
    Ok((retrieved, out))
}

/// Retrieval and generation quality over a query set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct EvalReport {
    pub queries: usize,
    pub acc_at_1: f64,
    pub acc_at_k: f64,
    pub k: usize,
    pub suffix_acc: f64,
}

struct Outcome {
    rank: Option<usize>,
    has_gold: bool,
    correct: usize,
    total: usize,
}

/// Gold-entry Acc@1 / Acc@K and greedy suffix-token accuracy, holding out
/// the last `suffix_len` tokens of each query.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    snapshot: &MemorySnapshot<T>,
    examples: &[&TrainExample],
    k: usize,
    suffix_len: usize,
    ablation: Ablation,
) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::EmptyInput("evaluation queries"));
    }
    let outcomes: Vec<Outcome> = examples
        .par_iter()
        .map(|ex| {
            let (input, suffix) = eval_split(&ex.query, suffix_len)?;
            let (retrieved, out) = generate(model, snapshot, &input, k, suffix.len(), ablation)?;
            let rank = ex.gold.as_deref().and_then(|id| retrieved.rank_of(id));
            Ok(Outcome {
                rank,
                has_gold: ex.gold.is_some(),
                correct: out.iter().zip(&suffix).filter(|(a, b)| a == b).count(),
                total: suffix.len(),
            })
        })
        .collect::<Result<_>>()?;
    let with_gold = outcomes.iter().filter(|o| o.has_gold).count().max(1) as f64;
    let total: usize = outcomes.iter().map(|o| o.total).sum();
    Ok(EvalReport {
        queries: outcomes.len(),
        acc_at_1: outcomes.iter().filter(|o| o.rank == Some(0)).count() as f64 / with_gold,
        acc_at_k: outcomes.iter().filter(|o| o.rank.is_some()).count() as f64 / with_gold,
        k,
        suffix_acc: outcomes.iter().map(|o| o.correct).sum::<usize>() as f64 / total.max(1) as f64,
    })
}

/// Fraction of queries whose gold entry is among the `k` best by gated score
/// over all of `snapshot`.
pub fn gold_acc_at<T: Scalar>(model: &Model<T>, snapshot: &MemorySnapshot<T>, queries: &[(Query, String)], k: usize) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::EmptyInput("retrieval queries"));
    }
    let hits = queries
        .par_iter()
        .map(|(q, gold)| Ok(retrieve(model, snapshot, q, k)?.contains(gold)))
        .collect::<Result<Vec<bool>>>()?;
    Ok(hits.iter().filter(|h| **h).count() as f64 / queries.len() as f64)
}

/// Suffix accuracy with a reduced memory and after restoring the removed
/// items, parameters unchanged.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct KnowledgeUpdate {
    pub acc_removed: f64,
    pub acc_restored: f64,
    pub reduced_entries: usize,
    pub restored_entries: usize,
}

pub fn knowledge_update_eval<T: Scalar>(
    model: &Model<T>,
    full_corpus: &[KnowledgeItem],
    removed: &[String],
    queries: &[&TrainExample],
    k: usize,
    shards: usize,
    ablation: Ablation,
) -> Result<KnowledgeUpdate> {
    let removed_set: std::collections::HashSet<&str> = removed.iter().map(String::as_str).collect();
    let reduced: Vec<KnowledgeItem> = full_corpus
        .iter()
        .filter(|i| !removed_set.contains(i.id.as_str()))
        .cloned()
        .collect();
    let small = build_snapshot(&reduced, model, shards)?;
    let full = build_snapshot(full_corpus, model, shards)?;
    let before = evaluate(model, &small, queries, k.min(small.len()), 1, ablation)?;
    let after = evaluate(model, &full, queries, k, 1, ablation)?;
    Ok(KnowledgeUpdate {
        acc_removed: before.suffix_acc,
        acc_restored: after.suffix_acc,
        reduced_entries: small.len(),
        restored_entries: full.len(),
    })
}
