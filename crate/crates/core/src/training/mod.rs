//! Objectives, the train step, warm start, the pretraining loop and the
//! synthetic experiments built on them.

mod checks;
mod config;
mod eval;
mod experiments;
mod losses;
mod pretrain;
mod step;
mod synthetic;
mod warm;

pub use checks::{check_config, check_corpus, check_examples, gradient_flow_check, mask_gradient_probe, GradFlowReport};
pub use config::{Ablation, TrainConfig};
pub use eval::{eval_split, evaluate, fuse, generate, gold_acc_at, knowledge_update_eval, EvalReport, KnowledgeUpdate};
pub use experiments::{run_knowledge_update, run_synthetic, KnowledgeUpdateReport, SyntheticReport};
pub use losses::{contrastive_loss, duplicate_targets, prefix_split, LossBreakdown, PseudoPair};
pub use pretrain::{pretrain_loop, StepRecord, TrainReport};
pub use step::{
    plan_step, retrieve, step_loss, train_step, ExamplePlan, ItemIndex, SlotProbs, StepOutput, StepPlan, StepVars,
    TrainExample,
};
pub use synthetic::{SyntheticConfig, SyntheticTask, ANSWER_POOL, NUM_ANSWERS};
pub use warm::{augment, corpus_pairs, warm_start, WarmStartReport};
