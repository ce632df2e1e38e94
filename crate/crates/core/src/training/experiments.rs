//! End-to-end runs on the synthetic task, shared by the CLI and the
//! acceptance tests.

use std::collections::HashSet;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::TrainConfig;
use super::eval::{evaluate, gold_acc_at, knowledge_update_eval, EvalReport, KnowledgeUpdate};
use super::pretrain::pretrain_loop;
use super::step::{ItemIndex, TrainExample};
use super::synthetic::{SyntheticConfig, SyntheticTask};
use super::warm::{warm_start, WarmStartReport};
use crate::encoders::Query;
use crate::error::Result;
use crate::memory::{build_snapshot, KnowledgeItem};
use crate::model::Model;

/// Outcome of [`run_synthetic`].
#[derive(Clone, Debug, Serialize)]
pub struct SyntheticReport {
    pub warm_start: Option<WarmStartReport>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub refreshes: usize,
    /// Held-out queries, evaluated with `k = cfg.k`.
    pub held_out: EvalReport,
    /// The same metrics on the training queries.
    pub train: EvalReport,
    /// Held-out gold-entry Acc@5 over the whole memory.
    pub held_out_acc_at_5: f64,
    /// Gold-entry Acc@1 over every query of the task.
    pub all_queries_acc_at_1: f64,
    pub chance_acc_at_1: f64,
    pub seconds: f64,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

/// Average of the first and last `n` losses, to smooth per-batch noise.
fn loss_ends(losses: &[f64], n: usize) -> (f64, f64) {
    let n = n.min(losses.len()).max(1);
    (mean(&losses[..n.min(losses.len())]), mean(&losses[losses.len().saturating_sub(n)..]))
}

fn retrieval_queries(task: &SyntheticTask, which: &[usize]) -> Vec<(Query, String)> {
    task.pairs(which).into_iter().map(|p| (p.query, p.gt_item_id)).collect()
}

/// Optional warm start, then `cfg.steps` pretraining steps, then evaluation
/// against a memory refreshed under the final parameters.
pub fn run_synthetic(cfg: &TrainConfig, task_cfg: &SyntheticConfig, with_warm_start: bool) -> Result<SyntheticReport> {
    let started = Instant::now();
    let mcfg = cfg.model_config();
    let task = SyntheticTask::generate(task_cfg, &mcfg)?;
    let items = ItemIndex::new(Arc::new(task.items.clone()))?;
    let mut model = Model::<f64>::new(mcfg);

    let warm = if with_warm_start {
        Some(warm_start(&mut model, &items, &task.pairs(&task.train), &task.pairs(&task.held_out), cfg)?)
    } else {
        None
    };

    let report = pretrain_loop(&mut model, &items, &task.train_examples(), cfg)?;
    let (initial_loss, final_loss) = loss_ends(&report.losses(), 20);

    let snapshot = build_snapshot(&task.items, &model, cfg.shards)?;
    let held = task.held_out_examples();
    let held_out = evaluate(&model, &snapshot, &held, cfg.k, 1, cfg.ablation)?;
    let train_refs: Vec<&TrainExample> = task.train.iter().map(|&i| &task.examples[i]).collect();
    let train = evaluate(&model, &snapshot, &train_refs, cfg.k, 1, cfg.ablation)?;
    let held_out_acc_at_5 = gold_acc_at(&model, &snapshot, &retrieval_queries(&task, &task.held_out), 5)?;
    let all: Vec<usize> = (0..task.examples.len()).collect();
    let all_queries_acc_at_1 = gold_acc_at(&model, &snapshot, &retrieval_queries(&task, &all), 1)?;
    Ok(SyntheticReport {
        warm_start: warm,
        initial_loss,
        final_loss,
        refreshes: report.refresh_steps.len(),
        held_out,
        train,
        held_out_acc_at_5,
        all_queries_acc_at_1,
        chance_acc_at_1: 1.0 / task.items.len() as f64,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Outcome of [`run_knowledge_update`].
#[derive(Clone, Debug, Serialize)]
pub struct KnowledgeUpdateReport {
    pub removed_fraction: f64,
    pub removed_items: usize,
    /// Held-out queries whose gold item was withheld.
    pub affected: KnowledgeUpdate,
    pub affected_queries: usize,
    /// Training queries whose gold item was withheld. They were trained on
    /// without a gold label, so their answers can be memorized.
    pub affected_train: KnowledgeUpdate,
    pub affected_train_queries: usize,
    pub seconds: f64,
}

impl KnowledgeUpdateReport {
    pub fn gain(&self) -> f64 {
        self.affected.acc_restored - self.affected.acc_removed
    }
}

/// Withholds `removed_fraction` of the items from the memory for the whole
/// of training, then measures answer accuracy on the held-out queries whose
/// gold was withheld, before and after putting those items back.
pub fn run_knowledge_update(cfg: &TrainConfig, task_cfg: &SyntheticConfig, removed_fraction: f64) -> Result<KnowledgeUpdateReport> {
    let started = Instant::now();
    let mcfg = cfg.model_config();
    let task = SyntheticTask::generate(task_cfg, &mcfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x4b55_5044);
    let mut ids: Vec<String> = task.items.iter().map(|i| i.id.clone()).collect();
    ids.shuffle(&mut rng);
    let n_removed = (removed_fraction * ids.len() as f64).round() as usize;
    let removed: Vec<String> = ids[..n_removed].to_vec();
    let removed_set: HashSet<&str> = removed.iter().map(String::as_str).collect();

    let kept: Vec<KnowledgeItem> = task
        .items
        .iter()
        .filter(|i| !removed_set.contains(i.id.as_str()))
        .cloned()
        .collect();
    let items = ItemIndex::new(Arc::new(kept))?;
    let present = |i: &usize| !removed_set.contains(task.examples[*i].gold.as_deref().unwrap());
    let warm_train: Vec<usize> = task.train.iter().copied().filter(present).collect();
    let warm_eval: Vec<usize> = task.held_out.iter().copied().filter(present).collect();

    let mut model = Model::<f64>::new(mcfg);
    warm_start(&mut model, &items, &task.pairs(&warm_train), &task.pairs(&warm_eval), cfg)?;

    // The training set is fixed; a query whose gold is not in the memory is
    // still trained on, without a gold label.
    let train: Vec<TrainExample> = task
        .train
        .iter()
        .map(|&i| {
            let mut ex = task.examples[i].clone();
            if !present(&i) {
                ex.gold = None;
            }
            ex
        })
        .collect();
    pretrain_loop(&mut model, &items, &train, cfg)?;

    let withheld = |split: &[usize]| -> Vec<&TrainExample> {
        split.iter().filter(|i| !present(i)).map(|&i| &task.examples[i]).collect()
    };
    let affected = withheld(&task.held_out);
    let affected_train = withheld(&task.train);
    let eval = |qs: &[&TrainExample]| knowledge_update_eval(&model, &task.items, &removed, qs, cfg.k, cfg.shards, cfg.ablation);
    Ok(KnowledgeUpdateReport {
        removed_fraction,
        removed_items: n_removed,
        affected: eval(&affected)?,
        affected_queries: affected.len(),
        affected_train: eval(&affected_train)?,
        affected_train_queries: affected_train.len(),
        seconds: started.elapsed().as_secs_f64(),
    })
}
