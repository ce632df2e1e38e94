//! One optimization step, split in two phases.
//!
//! [`plan_step`] does everything non-differentiable: prefix sampling,
//! retrieval against the (stale) snapshot, ground-truth injection and the
//! choice of entries to re-encode. [`step_loss`] then builds the
//! differentiable graph for a fixed plan, so the selected top-K set stays
//! fixed under finite-difference perturbation.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use super::config::{Ablation, TrainConfig};
use super::losses::{contrastive_loss, prefix_split, LossBreakdown};
use crate::autodiff::{Gradients, Graph, Tensor, Var};
use crate::encoders::Query;
use crate::error::{Error, Result};
use crate::fusion::mask_var;
use crate::memory::{align_loss, decor_loss, KnowledgeItem, MemorySnapshot};
use crate::model::Model;
use crate::retriever::{assemble, distributed_topk, RetrievedSet};
use crate::scalar::Scalar;

/// A training query: its full token sequence (prefix and suffix), optional
/// image, and the id of its gold knowledge item when known.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub query: Query,
    pub gold: Option<String>,
}

/// Raw knowledge items addressable by id.
#[derive(Clone, Debug)]
pub struct ItemIndex {
    items: Arc<Vec<KnowledgeItem>>,
    by_id: HashMap<String, usize>,
}

impl ItemIndex {
    pub fn new(items: Arc<Vec<KnowledgeItem>>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            if by_id.insert(item.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(item.id.clone()));
            }
        }
        Ok(Self { items, by_id })
    }

    pub fn items(&self) -> &Arc<Vec<KnowledgeItem>> {
        &self.items
    }

    pub fn get(&self, id: &str) -> Result<&KnowledgeItem> {
        self.by_id
            .get(id)
            .map(|&i| &self.items[i])
            .ok_or_else(|| Error::UnknownId(id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Non-differentiable decisions for one example.
#[derive(Clone, Debug)]
pub struct ExamplePlan<T> {
    /// Prefix tokens plus the image, as fed to the encoders.
    pub input: Query,
    pub suffix: Vec<usize>,
    /// Retrieved entries in rank order, after ground-truth injection.
    pub retrieved: RetrievedSet<T>,
    /// Per slot: re-encode from the raw item with gradient tracking.
    pub reencode: Vec<bool>,
    pub gold: Option<String>,
    pub injected: bool,
}

#[derive(Clone, Debug)]
pub struct StepPlan<T> {
    pub examples: Vec<ExamplePlan<T>>,
    pub snapshot_version: u32,
}

impl<T: Scalar> StepPlan<T> {
    /// Fraction of examples with a gold id whose gold entry was retrieved.
    pub fn gold_recall(&self) -> Option<f64> {
        let with_gold: Vec<&ExamplePlan<T>> = self.examples.iter().filter(|e| e.gold.is_some()).collect();
        if with_gold.is_empty() {
            return None;
        }
        let hits = with_gold
            .iter()
            .filter(|e| e.retrieved.contains(e.gold.as_deref().unwrap()))
            .count();
        Some(hits as f64 / with_gold.len() as f64)
    }
}

fn check_dims<T: Scalar>(model: &Model<T>, snapshot: &MemorySnapshot<T>) -> Result<()> {
    let (d, c) = snapshot.dims();
    if d != model.config.d {
        return Err(Error::DimensionMismatch {
            what: "snapshot d",
            expected: model.config.d,
            found: d,
        });
    }
    if c != model.config.c {
        return Err(Error::DimensionMismatch {
            what: "snapshot c",
            expected: model.config.c,
            found: c,
        });
    }
    if snapshot.num_corpora() != model.config.num_corpora {
        return Err(Error::DimensionMismatch {
            what: "snapshot corpus count",
            expected: model.config.num_corpora,
            found: snapshot.num_corpora(),
        });
    }
    Ok(())
}

/// Retrieves top-K for `input` from `snapshot` under the current parameters.
pub fn retrieve<T: Scalar>(model: &Model<T>, snapshot: &MemorySnapshot<T>, input: &Query, k: usize) -> Result<RetrievedSet<T>> {
    let q = model.encoders.query_vector(&model.params, input)?;
    let gates = model.gate.scores(&model.params, &q);
    distributed_topk(&q, &gates, snapshot, k, model.config.tau)
}

/// Samples prefixes, retrieves, injects ground truth and marks re-encoding.
pub fn plan_step<T: Scalar, R: Rng>(
    model: &Model<T>,
    snapshot: &MemorySnapshot<T>,
    batch: &[&TrainExample],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<StepPlan<T>> {
    check_dims(model, snapshot)?;
    if batch.is_empty() {
        return Err(Error::EmptyInput("training batch"));
    }
    let n_reencode = cfg.reencode_count().min(cfg.k);
    let mut examples = Vec::with_capacity(batch.len());
    for ex in batch {
        let (prefix, suffix) = prefix_split(&ex.query.text_tokens, rng)?;
        let input = Query::new(ex.query.id.clone(), prefix, ex.query.patches.clone());
        let mut retrieved = retrieve(model, snapshot, &input, cfg.k)?;
        let mut injected = false;
        if cfg.gt_injection_prob > 0.0 && rng.gen_bool(cfg.gt_injection_prob) {
            if let Some(gold) = ex.gold.as_deref() {
                let gi = snapshot.index_of(gold).ok_or_else(|| Error::UnknownId(gold.to_string()))?;
                if !retrieved.indices.contains(&gi) {
                    let mut idx = retrieved.indices.clone();
                    *idx.last_mut().expect("k >= 1") = gi;
                    let q = model.encoders.query_vector(&model.params, &input)?;
                    retrieved = assemble(&q, &retrieved.gate_scores, snapshot, idx, model.config.tau);
                    injected = true;
                }
            }
        }
        let reencode = (0..retrieved.len()).map(|s| s < n_reencode).collect();
        examples.push(ExamplePlan {
            input,
            suffix,
            retrieved,
            reencode,
            gold: ex.gold.clone(),
            injected,
        });
    }
    Ok(StepPlan {
        examples,
        snapshot_version: snapshot.version(),
    })
}

/// Scalar nodes of one step's loss.
#[derive(Clone, Copy, Debug)]
pub struct StepVars {
    pub total: Var,
    pub prefix_lm: Var,
    pub contra: Var,
    pub decor: Var,
    pub align: Var,
}

impl StepVars {
    pub fn breakdown<T: Scalar>(&self, g: &Graph<T>, cfg: &TrainConfig) -> LossBreakdown {
        let v = |x: Var| g.value(x).item().as_f64();
        let mut b = LossBreakdown::combine(
            v(self.prefix_lm),
            v(self.contra),
            v(self.decor),
            v(self.align),
            (cfg.w_contra, cfg.w_decor, cfg.w_align),
        );
        b.total = v(self.total);
        b
    }
}

fn zero<T: Scalar>(g: &mut Graph<T>) -> Var {
    g.constant(Tensor::zeros(vec![1]))
}

/// Per-example fused retrieval probabilities, filled by [`step_loss`].
pub type SlotProbs = Vec<Vec<f64>>;

/// Differentiable loss of a fixed plan against `store`.
///
/// `store` must be laid out like `model.params`; passing a perturbed copy is
/// how finite-difference checks probe this function.
pub fn step_loss<T: Scalar>(
    model: &Model<T>,
    store: &crate::autodiff::ParamStore<T>,
    plan: &StepPlan<T>,
    items: &ItemIndex,
    cfg: &TrainConfig,
) -> Result<(Graph<T>, StepVars, SlotProbs)> {
    let mut g = Graph::new();
    let mcfg = &model.config;
    let b = plan.examples.len();
    if b == 0 {
        return Err(Error::EmptyInput("step plan"));
    }
    let mut nll_terms = Vec::with_capacity(b);
    let mut decor_terms = Vec::with_capacity(b);
    let mut value_norm_terms = Vec::new();
    let mut query_norm_terms = Vec::with_capacity(b);
    let mut contra_q = Vec::new();
    let mut contra_k = Vec::new();
    let mut slot_probs = Vec::with_capacity(b);

    for ex in &plan.examples {
        let base = model.encoders.base_encode(&mut g, store, &ex.input)?;
        let q = model.encoders.query_embed_from_base(&mut g, store, base)?;
        let gates = model.gate.scores_var(&mut g, store, q)?;

        let k = ex.retrieved.len();
        let mut keys = Vec::with_capacity(k);
        let mut values = Vec::with_capacity(k);
        let mut corpora = Vec::with_capacity(k);
        for (slot, entry) in ex.retrieved.entries.iter().enumerate() {
            corpora.push(entry.corpus_id);
            if ex.reencode[slot] {
                let z = items.get(&entry.item_id)?.featurize(mcfg);
                let (key, value, _) = model.encode_knowledge(&mut g, store, &z)?;
                keys.push(key);
                values.push(value);
            } else {
                keys.push(g.constant(Tensor::new(vec![1, mcfg.d], entry.key.clone())?));
                values.push(g.constant(entry.value.clone()));
            }
        }
        let key_mat = g.concat(&keys, 0)?;
        let qt = g.transpose(q)?;
        let rel = g.matmul(key_mat, qt)?;
        let rel = g.reshape(rel, vec![k])?;
        let slot_gates = g.gather(gates, corpora)?;
        let gated = g.mul(slot_gates, rel)?;
        let exps = g.scale(gated, 1.0 / mcfg.tau)?;
        let probs = g.softmax(exps)?;
        slot_probs.push(g.value(probs).data().iter().map(|p| p.as_f64()).collect());

        let query_len = g.value(base).rows();
        let mask = match cfg.ablation {
            Ablation::NoMask => None,
            _ => Some(mask_var(&mut g, probs, query_len, mcfg.c)?),
        };
        let fused = model.fusion.attentive_fusion(&mut g, store, base, &values, mask)?;
        if !ex.suffix.is_empty() {
            nll_terms.push((1.0 / b as f64, model.fusion.sequence_nll(&mut g, store, fused, &ex.suffix)?));
        }
        decor_terms.push((1.0 / b as f64, decor_loss(&mut g, &values)?));
        for &v in &values {
            value_norm_terms.push((1.0 / k as f64, g.l2_norm(v)?));
        }
        query_norm_terms.push((1.0, g.l2_norm(base)?));

        if let Some(gold) = ex.gold.as_deref() {
            let z = items.get(gold)?.featurize(mcfg);
            contra_q.push(q);
            contra_k.push(model.encoders.key_embed(&mut g, store, &z)?);
        }
    }

    let prefix_lm = if nll_terms.is_empty() {
        zero(&mut g)
    } else {
        g.weighted_sum(&nll_terms)?
    };
    let contra = if contra_q.is_empty() {
        zero(&mut g)
    } else {
        let qm = g.concat(&contra_q, 0)?;
        let km = g.concat(&contra_k, 0)?;
        let l = contrastive_loss(&mut g, qm, km, cfg.contra_temperature)?;
        g.reshape(l, vec![1])?
    };
    let decor = g.weighted_sum(&decor_terms)?;
    let value_norms = g.weighted_sum(&value_norm_terms)?;
    let query_norms = g.weighted_sum(&query_norm_terms)?;
    let align = align_loss(&mut g, value_norms, query_norms)?;
    let align = g.reshape(align, vec![1])?;
    let total = g.weighted_sum(&[
        (1.0, prefix_lm),
        (cfg.w_contra, contra),
        (cfg.w_decor, decor),
        (cfg.w_align, align),
    ])?;
    Ok((
        g,
        StepVars {
            total,
            prefix_lm,
            contra,
            decor,
            align,
        },
        slot_probs,
    ))
}

/// Result of [`train_step`].
#[derive(Clone, Debug)]
pub struct StepOutput<T> {
    pub losses: LossBreakdown,
    pub grads: Gradients<T>,
    pub plan: StepPlan<T>,
    /// Fused retrieval probabilities per example under the current parameters.
    pub probs: SlotProbs,
}

/// Plans, evaluates and differentiates one step. Parameters are not updated.
pub fn train_step<T: Scalar, R: Rng>(
    model: &Model<T>,
    snapshot: &MemorySnapshot<T>,
    items: &ItemIndex,
    batch: &[&TrainExample],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<StepOutput<T>> {
    let plan = plan_step(model, snapshot, batch, cfg, rng)?;
    let (g, vars, probs) = step_loss(model, &model.params, &plan, items, cfg)?;
    let losses = vars.breakdown(&g, cfg);
    let grads = g.backward(vars.total)?;
    Ok(StepOutput {
        losses,
        grads,
        plan,
        probs,
    })
}
