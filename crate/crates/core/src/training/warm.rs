use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::TrainConfig;
use super::eval::gold_acc_at;
use super::losses::{contrastive_loss, PseudoPair};
use super::step::ItemIndex;
use crate::autodiff::{Graph, ParamGroup};
use crate::encoders::Query;
use crate::error::{Error, Result};
use crate::memory::{build_snapshot, KnowledgeItem};
use crate::model::{Model, ModelConfig};
use crate::optim::{Optimizer, OptimizerKind};
use crate::scalar::Scalar;

/// Probability of dropping the query image during warm start.
pub const IMAGE_DROP_PROB: f64 = 0.5;
/// Half-width of the uniform noise added to each patch feature.
pub const PATCH_NOISE: f64 = 0.1;
/// Steps between held-out evaluations.
pub const EVAL_EVERY: usize = 25;

#[derive(Clone, Debug, Default, Serialize)]
pub struct WarmStartReport {
    pub steps: usize,
    /// `(step, held-out Acc@1)` at every evaluation.
    pub accuracy: Vec<(usize, f64)>,
    pub losses: Vec<f64>,
}

impl WarmStartReport {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.accuracy.last().map(|a| a.1)
    }
}

/// Image drop plus patch noise.
pub fn augment<R: Rng>(q: &Query, rng: &mut R) -> Query {
    if q.patches.is_some() && q.text_tokens.len() > 0 && rng.gen_bool(IMAGE_DROP_PROB) {
        return q.without_image();
    }
    let mut out = q.clone();
    if let Some(patches) = out.patches.as_mut() {
        for p in patches.iter_mut() {
            for v in p.iter_mut() {
                *v += rng.gen_range(-PATCH_NOISE..PATCH_NOISE);
            }
        }
    }
    out
}

/// Self-supervised pairs over the knowledge corpus: each item, with every
/// text token dropped independently with probability `drop` (at least one is
/// kept), is a query whose gold entry is the item itself.
pub fn corpus_pairs(items: &[KnowledgeItem], cfg: &ModelConfig, drop: f64, seed: u64) -> Vec<PseudoPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    items
        .iter()
        .map(|item| {
            let z = item.featurize(cfg);
            let mut kept: Vec<usize> = z.text_tokens.iter().copied().filter(|_| !rng.gen_bool(drop)).collect();
            if kept.is_empty() && !z.text_tokens.is_empty() {
                kept.push(z.text_tokens[rng.gen_range(0..z.text_tokens.len())]);
            }
            PseudoPair {
                query: Query::new(format!("self-{}", item.id), kept, z.patches.clone()),
                gt_item_id: item.id.clone(),
            }
        })
        .collect()
}

fn is_encoder(g: ParamGroup) -> bool {
    matches!(
        g,
        ParamGroup::TokenEmbedding
            | ParamGroup::ImageProjection
            | ParamGroup::BaseEncoder
            | ParamGroup::QueryHead
            | ParamGroup::KeyHead
    )
}

/// Contrastive training of the encoders on pseudo ground-truth pairs.
///
/// Runs `cfg.warm_start_steps` steps of in-batch-negative contrastive loss
/// with Adam, evaluating held-out Acc@1 every [`EVAL_EVERY`] steps against a
/// freshly encoded memory and stopping once it reaches
/// `cfg.warm_start_target`. Only encoder parameters change.
pub fn warm_start<T: Scalar>(
    model: &mut Model<T>,
    items: &ItemIndex,
    train: &[PseudoPair],
    held_out: &[PseudoPair],
    cfg: &TrainConfig,
) -> Result<WarmStartReport> {
    if train.is_empty() {
        return Err(Error::EmptyInput("warm-start pairs"));
    }
    for p in train.iter().chain(held_out) {
        items.get(&p.gt_item_id)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5741_524d);
    let mut opt = Optimizer::new(OptimizerKind::Adam, cfg.warm_start_lr);
    let mut report = WarmStartReport::default();
    let eval_queries: Vec<(Query, String)> = held_out.iter().map(|p| (p.query.clone(), p.gt_item_id.clone())).collect();
    let evaluate = |model: &Model<T>| -> Result<f64> {
        let snap = build_snapshot(items.items(), model, cfg.shards)?;
        gold_acc_at(model, &snap, &eval_queries, 1)
    };

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let bsz = cfg.warm_start_batch.min(train.len());
    for step in 1..=cfg.warm_start_steps {
        let mut batch = Vec::with_capacity(bsz);
        while batch.len() < bsz {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&train[order[cursor]]);
            cursor += 1;
        }
        let queries: Vec<Query> = batch.iter().map(|p| augment(&p.query, &mut rng)).collect();

        let mut g = Graph::new();
        let mut qs = Vec::with_capacity(bsz);
        let mut ks = Vec::with_capacity(bsz);
        for (q, p) in queries.iter().zip(&batch) {
            qs.push(model.encoders.query_embed(&mut g, &model.params, q)?);
            let z = items.get(&p.gt_item_id)?.featurize(&model.config);
            ks.push(model.encoders.key_embed(&mut g, &model.params, &z)?);
        }
        let qm = g.concat(&qs, 0)?;
        let km = g.concat(&ks, 0)?;
        let loss = contrastive_loss(&mut g, qm, km, cfg.contra_temperature)?;
        let value = g.value(loss).item().as_f64();
        if !value.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("warm-start contrastive loss is {value}"),
            });
        }
        report.losses.push(value);
        let grads = g.backward(loss)?;
        let params = &model.params;
        let frozen: Vec<bool> = params.ids().map(|id| !is_encoder(params.group(id))).collect();
        opt.step(&mut model.params, &grads, &|id| frozen[id.0]);
        report.steps = step;

        if !held_out.is_empty() && (step % EVAL_EVERY == 0 || step == cfg.warm_start_steps) {
            let acc = evaluate(model)?;
            report.accuracy.push((step, acc));
            if acc >= cfg.warm_start_target {
                break;
            }
        }
    }
    Ok(report)
}
