//! Self-checks over a complete train step, shared by the CLI and the
//! acceptance tests.

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{Ablation, TrainConfig};
use super::step::{plan_step, step_loss, train_step, ItemIndex, TrainExample};
use crate::autodiff::{GradCheck, GradCheckReport, ParamGroup};
use crate::encoders::Query;
use crate::error::Result;
use crate::memory::{build_snapshot, KnowledgeItem};
use crate::model::Model;

const WORDS: [&str; 12] = [
    "river", "stone", "lamp", "cloud", "maple", "harbor", "violin", "copper", "falcon", "meadow", "candle", "orbit",
];

/// Step-check configuration: d=16, c=4, K=3, two corpora, single layers.
pub fn check_config(seed: u64) -> TrainConfig {
    TrainConfig {
        d: 16,
        c: 4,
        k: 3,
        d_img: 4,
        vocab: 61,
        heads: 2,
        ff_mult: 2,
        base_layers: 1,
        head_layers: 1,
        perceiver_layers: 1,
        fusion_layers: 1,
        decoder_layers: 1,
        num_corpora: 2,
        patches: 1,
        shards: 2,
        batch_size: 2,
        // ceil(0.5 * 3) = 2 re-encoded slots.
        reencode_fraction: 0.5,
        w_contra: 0.5,
        w_decor: 0.5,
        w_align: 0.5,
        seed,
        ..TrainConfig::default()
    }
}

/// `n` short random items alternating between passage and captioned image.
pub fn check_corpus(n: usize, seed: u64) -> Vec<KnowledgeItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let text: Vec<&str> = (0..3).map(|_| WORDS[rng.gen_range(0..WORDS.len())]).collect();
            if i % 2 == 0 {
                KnowledgeItem::passage(format!("n{i:02}"), 0, text.join(" "))
            } else {
                KnowledgeItem::caption(format!("n{i:02}"), 1, text.join(" "), format!("pic-{i}"))
            }
        })
        .collect()
}

/// One query per item: its first two words, its image and itself as gold.
pub fn check_examples(items: &[KnowledgeItem], cfg: &TrainConfig) -> Vec<TrainExample> {
    let mcfg = cfg.model_config();
    items
        .iter()
        .map(|it| {
            let words: Vec<&str> = it.text.split_whitespace().take(2).collect();
            TrainExample {
                query: Query::from_raw(format!("q-{}", it.id), &words.join(" "), it.image_descriptor.as_deref(), &mcfg),
                gold: Some(it.id.clone()),
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct GradFlowReport {
    pub check: GradCheckReport,
    pub entries: usize,
    /// Longest fused query length `I` in the checked batch.
    pub max_query_len: usize,
    pub seconds: f64,
}

/// Finite-difference check of the whole train-step loss (all four terms,
/// re-encoded and stale slots, gate and mask) over every parameter tensor of
/// a 32-entry memory. `entries_per_param` samples that many entries per
/// tensor; `None` checks every entry.
pub fn gradient_flow_check(seed: u64, entries_per_param: Option<usize>) -> Result<GradFlowReport> {
    let started = Instant::now();
    let cfg = check_config(seed);
    let raw = check_corpus(32, seed);
    let examples = check_examples(&raw, &cfg);
    let model = Model::<f64>::new(cfg.model_config());
    let items = ItemIndex::new(Arc::new(raw))?;
    let snap = build_snapshot(items.items(), &model, cfg.shards)?;
    let batch: Vec<&TrainExample> = examples.iter().take(cfg.batch_size).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4746_4c57);
    let plan = plan_step(&model, &snap, &batch, &cfg, &mut rng)?;
    let max_query_len = plan.examples.iter().map(|e| e.input.seq_len()).max().unwrap_or(0);
    let ids: Vec<_> = model.params.ids().collect();
    let check = GradCheck {
        max_entries_per_param: entries_per_param,
        seed,
        ..GradCheck::default()
    }
    .run(
        |s| {
            let (g, vars, _) = step_loss(&model, s, &plan, &items, &cfg)?;
            Ok((g, vars.total))
        },
        &model.params,
        &ids,
    )?;
    Ok(GradFlowReport {
        check,
        entries: snap.len(),
        max_query_len,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Largest gradient magnitude reaching the gate and the query head from one
/// train step with the contrastive term off, so their only route to the loss
/// is the retrieval-probability mask.
pub fn mask_gradient_probe(seed: u64, ablation: Ablation) -> Result<(f64, f64)> {
    let mut cfg = check_config(seed);
    cfg.ablation = ablation;
    cfg.w_contra = 0.0;
    let raw = check_corpus(32, seed);
    let examples = check_examples(&raw, &cfg);
    let model = Model::<f64>::new(cfg.model_config());
    let items = ItemIndex::new(Arc::new(raw))?;
    let snap = build_snapshot(items.items(), &model, cfg.shards)?;
    let batch: Vec<&TrainExample> = examples.iter().take(cfg.batch_size).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = train_step(&model, &snap, &items, &batch, &cfg, &mut rng)?;
    Ok((
        out.grads.group_max_abs(&model.params, ParamGroup::Gate),
        out.grads.group_max_abs(&model.params, ParamGroup::QueryHead),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_flow_passes_on_a_few_entries() {
        let r = gradient_flow_check(1, Some(2)).unwrap();
        assert_eq!(r.entries, 32);
        assert!(r.max_query_len <= 8);
        assert!(r.check.passed, "{:?}", r.check.worst());
    }

    #[test]
    fn mask_is_the_only_route_to_gate_and_query_head() {
        let (g, q) = mask_gradient_probe(3, Ablation::NoMask).unwrap();
        assert_eq!((g, q), (0.0, 0.0));
        let (g, q) = mask_gradient_probe(3, Ablation::None).unwrap();
        assert!(g > 0.0 && q > 0.0);
    }
}
