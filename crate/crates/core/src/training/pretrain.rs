use std::fs::File;
use std::io::{BufWriter, Write};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::TrainConfig;
use super::losses::LossBreakdown;
use super::step::{train_step, ItemIndex, TrainExample};
use crate::error::{Error, Result};
use crate::memory::{build_snapshot, MemorySnapshot, RefreshHandle, SnapshotStore};
use crate::model::Model;
use crate::optim::Optimizer;
use crate::scalar::Scalar;

/// One line of the metrics stream.
#[derive(Clone, Debug, Serialize)]
pub struct StepRecord {
    pub step: usize,
    #[serde(flatten)]
    pub losses: LossBreakdown,
    /// Fraction of batch examples whose gold entry was among the K retrieved.
    pub acc_at_k: Option<f64>,
    pub snapshot_version: u32,
}

#[derive(Debug)]
pub struct TrainReport<T> {
    pub history: Vec<StepRecord>,
    /// Steps after which a refresh was started.
    pub refresh_steps: Vec<usize>,
    pub snapshot: Arc<MemorySnapshot<T>>,
}

impl<T> TrainReport<T> {
    pub fn losses(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.losses.total).collect()
    }
}

/// Runs `cfg.steps` optimization steps over `examples`.
///
/// Batches are drawn by reshuffling `examples` each epoch. After the update
/// of every step that is a multiple of `cfg.refresh_interval`, a full
/// re-encode is started on a worker thread from a copy of the parameters; it
/// is published once the following step has finished, so the run is
/// deterministic while the refresh overlaps with training.
pub fn pretrain_loop<T: Scalar>(
    model: &mut Model<T>,
    items: &ItemIndex,
    examples: &[TrainExample],
    cfg: &TrainConfig,
) -> Result<TrainReport<T>> {
    if examples.is_empty() {
        return Err(Error::EmptyInput("training examples"));
    }
    let store = SnapshotStore::new(build_snapshot(items.items(), model, cfg.shards)?);
    let mut metrics = match &cfg.metrics {
        Some(path) => Some(BufWriter::new(File::create(path)?)),
        None => None,
    };
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate).with_weight_decay(cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5052_4554);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut cursor = order.len();
    let bsz = cfg.batch_size.min(examples.len());

    let mut history = Vec::with_capacity(cfg.steps);
    let mut refresh_steps = Vec::new();
    let mut pending: Option<RefreshHandle<T>> = None;

    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(bsz);
        while batch.len() < bsz {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&examples[order[cursor]]);
            cursor += 1;
        }
        let snapshot = store.current();
        let out = train_step(model, &snapshot, items, &batch, cfg, &mut rng)?;
        if !out.losses.all_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("{:?}", out.losses),
            });
        }
        opt.step(&mut model.params, &out.grads, &|_| false);
        if !model.params.all_finite() {
            return Err(Error::Diverged {
                step,
                detail: "non-finite parameter after update".into(),
            });
        }
        let record = StepRecord {
            step,
            losses: out.losses,
            acc_at_k: out.plan.gold_recall(),
            snapshot_version: out.plan.snapshot_version,
        };
        if let Some(w) = metrics.as_mut() {
            serde_json::to_writer(&mut *w, &record).map_err(|e| Error::Io(e.into()))?;
            w.write_all(b"\n")?;
        }
        history.push(record);

        if let Some(h) = pending.take() {
            h.publish_into(&store)?;
        }
        if step % cfg.refresh_interval == 0 {
            refresh_steps.push(step);
            pending = Some(store.spawn_refresh(Arc::clone(items.items()), model.clone())?);
        }
    }
    if let Some(h) = pending.take() {
        h.publish_into(&store)?;
    }
    if let Some(mut w) = metrics {
        w.flush()?;
    }
    Ok(TrainReport {
        history,
        refresh_steps,
        snapshot: store.current(),
    })
}
