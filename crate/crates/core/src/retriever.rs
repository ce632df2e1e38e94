//! Corpus-gated relevance scoring and sharded exact top-K retrieval.
//!
//! Two probability views are provided. [`entry_probability`] is the
//! full-memory distribution: the corpus gate times a temperature softmax over
//! the entry's own corpus. [`topk_renormalize`] is the fusion-time view: one
//! softmax over the retrieved K with the gate folded into the exponent,
//! `Gate[corpus(z)] * Rel(x, z) / tau`.
//!
//! Ranking uses the gated score `Gate[corpus(z)] * Rel(x, z)`, ties broken by
//! ascending item id.

use std::cmp::Ordering;

use rand::Rng;
use rayon::prelude::*;

use crate::autodiff::{softmax_in_place, Graph, ParamGroup, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::memory::{MemoryEntry, MemorySnapshot};
use crate::model::ModelConfig;
use crate::nn::Builder;
use crate::scalar::Scalar;

/// Softmax gate over corpora: `softmax(W q + b)`, `W` is `[S, d]`.
#[derive(Clone, Debug)]
pub struct GateParams {
    pub w: ParamId,
    pub b: ParamId,
    pub tau: f64,
}

impl GateParams {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, cfg: &ModelConfig) -> Self {
        assert!(cfg.tau > 0.0, "temperature must be positive");
        let mut b = Builder {
            store,
            rng,
            group: ParamGroup::Gate,
            bound: cfg.init_bound(),
        };
        Self {
            w: b.weight("gate.w", &[cfg.num_corpora, cfg.d]),
            b: b.zeros("gate.b", &[cfg.num_corpora]),
            tau: cfg.tau,
        }
    }

    pub fn num_corpora<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        store.get(self.b).len()
    }

    /// Differentiable gate probabilities `[S]` for a `[1, d]` query node.
    pub fn scores_var<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, q: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let wt = g.transpose(w)?;
        let logits = g.matmul(q, wt)?;
        let b = g.param(store, self.b);
        let logits = g.add_row(logits, b)?;
        let s = g.value(logits).len();
        let logits = g.reshape(logits, vec![s])?;
        g.softmax(logits)
    }

    pub fn scores<T: Scalar>(&self, store: &ParamStore<T>, q: &[T]) -> Vec<T> {
        gate_scores(q, store.get(self.w).data(), store.get(self.b).data())
    }
}

/// `softmax(W q + b)` with `W` row-major `[S, d]`.
pub fn gate_scores<T: Scalar>(q: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let d = q.len();
    let mut logits: Vec<T> = b
        .iter()
        .enumerate()
        .map(|(j, bj)| *bj + w[j * d..(j + 1) * d].iter().zip(q).map(|(x, y)| *x * *y).sum::<T>())
        .collect();
    softmax_in_place(&mut logits);
    logits
}

/// `Rel(x, z) = q . key`.
pub fn relevance<T: Scalar>(q: &[T], key: &[T]) -> T {
    q.iter().zip(key).map(|(a, b)| *a * *b).sum()
}

fn gated_score<T: Scalar>(q: &[T], gates: &[T], e: &MemoryEntry<T>) -> T {
    gates[e.corpus_id] * relevance(q, &e.key)
}

/// Full-memory probabilities for every entry of `snapshot`, in entry order:
/// `Gate[j] * softmax_{corpus j}(Rel / tau)`.
pub fn memory_distribution<T: Scalar>(q: &[T], gates: &[T], snapshot: &MemorySnapshot<T>, tau: f64) -> Result<Vec<T>> {
    let tau = T::lit(tau);
    let mut out = vec![T::zero(); snapshot.len()];
    for j in 0..snapshot.num_corpora() {
        let members = snapshot.corpus(j);
        if members.is_empty() {
            return Err(Error::EmptyCorpus(j));
        }
        let mut logits: Vec<T> = members
            .iter()
            .map(|&i| relevance(q, &snapshot.entry(i).key) / tau)
            .collect();
        softmax_in_place(&mut logits);
        for (&i, p) in members.iter().zip(logits) {
            out[i] = gates[j] * p;
        }
    }
    Ok(out)
}

/// `p(m | x)` for the entry at `index`.
pub fn entry_probability<T: Scalar>(
    q: &[T],
    gates: &[T],
    snapshot: &MemorySnapshot<T>,
    index: usize,
    tau: f64,
) -> Result<T> {
    let e = snapshot.entry(index);
    let members = snapshot.corpus(e.corpus_id);
    if members.is_empty() {
        return Err(Error::EmptyCorpus(e.corpus_id));
    }
    let tau = T::lit(tau);
    let mut logits: Vec<T> = members
        .iter()
        .map(|&i| relevance(q, &snapshot.entry(i).key) / tau)
        .collect();
    softmax_in_place(&mut logits);
    let pos = members.iter().position(|&i| i == index).expect("entry listed in its corpus");
    Ok(gates[e.corpus_id] * logits[pos])
}

/// Candidate produced by a shard search: entry index and gated score.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate<T> {
    pub index: usize,
    pub score: T,
}

/// Descending score, then ascending item id.
fn rank_order<T: Scalar>(snapshot: &MemorySnapshot<T>, a: &Candidate<T>, b: &Candidate<T>) -> Ordering {
    b.score
        .as_f64()
        .total_cmp(&a.score.as_f64())
        .then_with(|| snapshot.entry(a.index).item_id.cmp(&snapshot.entry(b.index).item_id))
}

/// Per-shard search kernel. [`ExactSearch`] is the only implementation; an
/// approximate kernel can be substituted behind this trait.
pub trait ShardSearch<T: Scalar>: Sync {
    fn search(&self, q: &[T], gates: &[T], snapshot: &MemorySnapshot<T>, shard: &[usize], k: usize) -> Vec<Candidate<T>>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ExactSearch;

impl<T: Scalar> ShardSearch<T> for ExactSearch {
    fn search(&self, q: &[T], gates: &[T], snapshot: &MemorySnapshot<T>, shard: &[usize], k: usize) -> Vec<Candidate<T>> {
        local_topk(q, gates, snapshot, shard, k)
    }
}

/// Exact top-`min(k, |shard|)` of `shard` by gated score.
pub fn local_topk<T: Scalar>(
    q: &[T],
    gates: &[T],
    snapshot: &MemorySnapshot<T>,
    shard: &[usize],
    k: usize,
) -> Vec<Candidate<T>> {
    let mut cands: Vec<Candidate<T>> = shard
        .iter()
        .map(|&i| Candidate {
            index: i,
            score: gated_score(q, gates, snapshot.entry(i)),
        })
        .collect();
    let cmp = |a: &Candidate<T>, b: &Candidate<T>| rank_order(snapshot, a, b);
    if k < cands.len() {
        cands.select_nth_unstable_by(k, cmp);
        cands.truncate(k);
    }
    cands.sort_by(cmp);
    cands
}

/// Top-K entries with their scores and fusion probabilities.
#[derive(Clone, Debug)]
pub struct RetrievedSet<T> {
    /// Snapshot indices, best first.
    pub indices: Vec<usize>,
    pub entries: Vec<MemoryEntry<T>>,
    pub rel_scores: Vec<T>,
    /// Gate probabilities over all corpora.
    pub gate_scores: Vec<T>,
    pub topk_probs: Vec<T>,
    pub snapshot_version: u32,
}

impl<T: Scalar> RetrievedSet<T> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn item_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.item_id.as_str())
    }

    pub fn contains(&self, item_id: &str) -> bool {
        self.item_ids().any(|id| id == item_id)
    }

    /// Rank (0-based) of `item_id`, if retrieved.
    pub fn rank_of(&self, item_id: &str) -> Option<usize> {
        self.item_ids().position(|id| id == item_id)
    }
}

/// Per-shard search, gather, exact global top-K.
pub fn distributed_topk<T: Scalar>(
    q: &[T],
    gates: &[T],
    snapshot: &MemorySnapshot<T>,
    k: usize,
    tau: f64,
) -> Result<RetrievedSet<T>> {
    distributed_topk_with(&ExactSearch, q, gates, snapshot, k, tau)
}

pub fn distributed_topk_with<T: Scalar, S: ShardSearch<T>>(
    kernel: &S,
    q: &[T],
    gates: &[T],
    snapshot: &MemorySnapshot<T>,
    k: usize,
    tau: f64,
) -> Result<RetrievedSet<T>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if k > snapshot.len() {
        return Err(Error::KTooLarge {
            k,
            total: snapshot.len(),
        });
    }
    if gates.len() != snapshot.num_corpora() {
        return Err(Error::DimensionMismatch {
            what: "gate width",
            expected: snapshot.num_corpora(),
            found: gates.len(),
        });
    }
    if q.len() != snapshot.dims().0 {
        return Err(Error::DimensionMismatch {
            what: "query width",
            expected: snapshot.dims().0,
            found: q.len(),
        });
    }
    let mut merged: Vec<Candidate<T>> = (0..snapshot.num_shards())
        .into_par_iter()
        .map(|s| kernel.search(q, gates, snapshot, &snapshot.shard(s), k))
        .flatten()
        .collect();
    merged.sort_by(|a, b| rank_order(snapshot, a, b));
    merged.truncate(k);
    Ok(assemble(q, gates, snapshot, merged.iter().map(|c| c.index).collect(), tau))
}

/// Builds a [`RetrievedSet`] for an explicit list of snapshot indices.
pub fn assemble<T: Scalar>(q: &[T], gates: &[T], snapshot: &MemorySnapshot<T>, indices: Vec<usize>, tau: f64) -> RetrievedSet<T> {
    let entries: Vec<MemoryEntry<T>> = indices.iter().map(|&i| snapshot.entry(i).clone()).collect();
    let rel_scores: Vec<T> = entries.iter().map(|e| relevance(q, &e.key)).collect();
    let tau_t = T::lit(tau);
    let exps: Vec<T> = entries
        .iter()
        .zip(&rel_scores)
        .map(|(e, r)| gates[e.corpus_id] * *r / tau_t)
        .collect();
    RetrievedSet {
        indices,
        entries,
        rel_scores,
        gate_scores: gates.to_vec(),
        topk_probs: topk_renormalize(&exps),
        snapshot_version: snapshot.version(),
    }
}

/// Softmax over already tempered, gated exponents.
pub fn topk_renormalize<T: Scalar>(gated_exponents: &[T]) -> Vec<T> {
    let mut p = gated_exponents.to_vec();
    if !p.is_empty() {
        softmax_in_place(&mut p);
    }
    p
}

/// Brute-force full scan: sort every entry by gated score, take `k`.
pub fn brute_force_topk<T: Scalar>(q: &[T], gates: &[T], snapshot: &MemorySnapshot<T>, k: usize) -> Vec<usize> {
    let mut all: Vec<Candidate<T>> = (0..snapshot.len())
        .map(|i| Candidate {
            index: i,
            score: gated_score(q, gates, snapshot.entry(i)),
        })
        .collect();
    all.sort_by(|a, b| rank_order(snapshot, a, b));
    all.into_iter().take(k).map(|c| c.index).collect()
}
