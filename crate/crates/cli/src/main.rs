use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Parser, ValueEnum};
use kvrag::checkpoint::{load_params_into, save_params};
use kvrag::encoders::Query;
use kvrag::memory::{build_snapshot, load_snapshot, load_snapshot_for, parse_manifest, read_header_from, save_snapshot, KnowledgeItem};
use kvrag::retriever::distributed_topk;
use kvrag::training::{
    corpus_pairs, gradient_flow_check, mask_gradient_probe, pretrain_loop, run_knowledge_update, run_synthetic, warm_start,
    Ablation, ItemIndex, SyntheticConfig, TrainConfig, TrainExample,
};
use kvrag::Model;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Verb {
    Ingest,
    BuildMemory,
    Retrieve,
    Train,
    GradCheck,
    EvalSynthetic,
    KnowledgeUpdate,
    Info,
}

/// Retrieval-augmented generation over a multi-corpus key/value memory.
#[derive(Parser, Debug)]
#[command(name = "kvrag", version)]
struct Cli {
    verb: Verb,
    /// `key = value` training config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// JSON-lines corpus manifest, one per corpus, in corpus order.
    #[arg(long)]
    manifest: Vec<PathBuf>,
    #[arg(long)]
    snapshot: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    shards: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Query text for `retrieve`.
    #[arg(long)]
    text: Option<String>,
    /// Query image descriptor for `retrieve`.
    #[arg(long)]
    image: Option<String>,
    #[arg(long, value_parser = ["none", "no-mask", "first-c-tokens"])]
    ablation: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Any other config field, as KEY=VALUE (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

/// Bad invocation: exit code 1.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// A self-check ran and failed: exit code 3.
#[derive(Debug)]
struct CheckFailed(String);

impl fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<Usage>() {
                ExitCode::from(1)
            } else if e.is::<CheckFailed>() {
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

/// Config file, then flag overrides, then validation.
fn effective_config(cli: &Cli, base: TrainConfig) -> Result<TrainConfig> {
    let mut cfg = match &cli.config {
        Some(p) => TrainConfig::load(p).with_context(|| format!("config {}", p.display()))?,
        None => base,
    };
    let mut apply = |key: &str, value: &str| cfg.set(key, value).map_err(|m| usage(format!("--{key}: {m}")));
    if let Some(k) = cli.k {
        apply("k", &k.to_string())?;
    }
    if let Some(s) = cli.shards {
        apply("shards", &s.to_string())?;
    }
    if let Some(s) = cli.seed {
        apply("seed", &s.to_string())?;
    }
    if let Some(a) = &cli.ablation {
        apply("ablation", a)?;
    }
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k, v).map_err(|m| usage(format!("--set {kv}: {m}")))?;
    }
    if !cli.manifest.is_empty() {
        cfg.num_corpora = cli.manifest.len();
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn banner(cfg: &TrainConfig) {
    eprintln!("# effective config");
    for line in cfg.render().lines() {
        eprintln!("# {line}");
    }
}

fn require<'a, T>(v: &'a Option<T>, flag: &str, verb: &str) -> Result<&'a T> {
    v.as_ref().ok_or_else(|| usage(format!("{verb} requires --{flag}")))
}

fn manifests(cli: &Cli, verb: &str) -> Result<Vec<KnowledgeItem>> {
    if cli.manifest.is_empty() {
        return Err(usage(format!("{verb} requires at least one --manifest")));
    }
    let mut all = Vec::new();
    for (corpus, path) in cli.manifest.iter().enumerate() {
        let src = fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        let items = parse_manifest(&src, corpus, cli.manifest.len()).with_context(|| format!("manifest {}", path.display()))?;
        all.extend(items);
    }
    let mut ids: Vec<&str> = all.iter().map(|i| i.id.as_str()).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        anyhow::bail!("duplicate item id {:?} across manifests", w[0]);
    }
    Ok(all)
}

fn params_path(snapshot: &Path) -> PathBuf {
    let mut s = snapshot.as_os_str().to_owned();
    s.push(".params");
    PathBuf::from(s)
}

/// Fresh model from the config seed, overwritten by the checkpoint stored
/// next to `snapshot` when there is one.
fn model_for(cfg: &TrainConfig, snapshot: Option<&Path>) -> Result<Model<f64>> {
    let mut model = Model::new(cfg.model_config());
    if let Some(p) = snapshot.map(params_path).filter(|p| p.exists()) {
        load_params_into(&mut model.params, &p).with_context(|| format!("parameters {}", p.display()))?;
    }
    Ok(model)
}

fn write_outputs(model: &Model<f64>, items: &[KnowledgeItem], cfg: &TrainConfig, out: &Path) -> Result<usize> {
    let snap = build_snapshot(items, model, cfg.shards)?;
    save_snapshot(&snap, out).with_context(|| format!("writing {}", out.display()))?;
    let pp = params_path(out);
    save_params(&model.params, &pp).with_context(|| format!("writing {}", pp.display()))?;
    Ok(snap.len())
}

fn run(cli: &Cli) -> Result<()> {
    match cli.verb {
        Verb::Ingest => ingest(cli),
        Verb::BuildMemory => build_memory(cli),
        Verb::Retrieve => retrieve(cli),
        Verb::Train => train(cli),
        Verb::GradCheck => grad_check(cli),
        Verb::EvalSynthetic => eval_synthetic(cli),
        Verb::KnowledgeUpdate => knowledge_update(cli),
        Verb::Info => info(cli),
    }
}

fn ingest(cli: &Cli) -> Result<()> {
    let items = manifests(cli, "ingest")?;
    println!("corpus\tmanifest\titems");
    for (j, path) in cli.manifest.iter().enumerate() {
        let n = items.iter().filter(|i| i.corpus_id == j).count();
        println!("{j}\t{}\t{n}", path.display());
    }
    println!("total\t\t{}", items.len());
    Ok(())
}

fn build_memory(cli: &Cli) -> Result<()> {
    let out = require(&cli.out, "out", "build-memory")?;
    let cfg = effective_config(cli, TrainConfig::default())?;
    banner(&cfg);
    let items = manifests(cli, "build-memory")?;
    let model = Model::<f64>::new(cfg.model_config());
    let n = write_outputs(&model, &items, &cfg, out)?;
    println!("entries\t{n}");
    println!("snapshot\t{}", out.display());
    Ok(())
}

fn retrieve(cli: &Cli) -> Result<()> {
    let path = require(&cli.snapshot, "snapshot", "retrieve")?;
    if cli.text.is_none() && cli.image.is_none() {
        return Err(usage("retrieve requires --text and/or --image"));
    }
    let header = read_header_from(path).with_context(|| format!("snapshot {}", path.display()))?;
    let mut cfg = effective_config(cli, TrainConfig::default())?;
    cfg.num_corpora = header.corpus_counts.len();
    banner(&cfg);
    let snap = load_snapshot_for::<f64>(path, cfg.d, cfg.c).with_context(|| format!("snapshot {}", path.display()))?;
    let snap = if snap.num_shards() == cfg.shards { snap } else { snap.resharded(cfg.shards)? };
    let model = model_for(&cfg, Some(path))?;
    let q = Query::from_raw("cli", cli.text.as_deref().unwrap_or(""), cli.image.as_deref(), &model.config);
    let qv = model.encoders.query_vector(&model.params, &q)?;
    let gates = model.gate.scores(&model.params, &qv);
    let r = distributed_topk(&qv, &gates, &snap, cfg.k, cfg.tau)?;
    println!("rank\tid\tcorpus\trel\tgate\tprob");
    for (rank, e) in r.entries.iter().enumerate() {
        println!(
            "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}",
            rank + 1,
            e.item_id,
            e.corpus_id,
            r.rel_scores[rank],
            r.gate_scores[e.corpus_id],
            r.topk_probs[rank]
        );
    }
    Ok(())
}

fn train(cli: &Cli) -> Result<()> {
    let out = require(&cli.out, "out", "train")?;
    let cfg = effective_config(cli, TrainConfig::default())?;
    banner(&cfg);
    let raw = manifests(cli, "train")?;
    let mut model = Model::<f64>::new(cfg.model_config());
    // Each item is a training query whose gold entry is itself.
    let examples: Vec<TrainExample> = raw
        .iter()
        .map(|it| TrainExample {
            query: it.featurize(&model.config),
            gold: Some(it.id.clone()),
        })
        .filter(|e| !e.query.text_tokens.is_empty())
        .collect();
    if examples.is_empty() {
        anyhow::bail!("no item has text to train on");
    }
    let items = ItemIndex::new(Arc::new(raw.clone()))?;
    if cfg.warm_start_steps > 0 {
        let pairs = corpus_pairs(&raw, &model.config, 0.5, cfg.seed);
        let w = warm_start(&mut model, &items, &pairs, &[], &cfg)?;
        println!("warm_start_steps\t{}", w.steps);
    }
    let report = pretrain_loop(&mut model, &items, &examples, &cfg)?;
    let losses = report.losses();
    let n = write_outputs(&model, &raw, &cfg, out)?;
    println!("steps\t{}", losses.len());
    println!("first_loss\t{:.6}", losses.first().copied().unwrap_or(f64::NAN));
    println!("last_loss\t{:.6}", losses.last().copied().unwrap_or(f64::NAN));
    println!("refreshes\t{}", report.refresh_steps.len());
    println!("entries\t{n}");
    println!("snapshot\t{}", out.display());
    Ok(())
}

fn grad_check(cli: &Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    eprintln!("# seed = {seed}");
    let r = gradient_flow_check(seed, Some(4))?;
    println!("param\tgroup\tentries\tmax_rel_err\tmax_abs_err");
    for p in &r.check.params {
        println!(
            "{}\t{}\t{}\t{:.3e}\t{:.3e}",
            p.name,
            p.group.name(),
            p.entries_checked,
            p.max_rel_err,
            p.max_abs_err
        );
    }
    let (gate_off, query_off) = mask_gradient_probe(seed, Ablation::NoMask)?;
    let (gate_on, query_on) = mask_gradient_probe(seed, Ablation::None)?;
    println!("max_rel_err\t{:.3e}", r.check.max_rel_err);
    println!("no_mask_gate_grad\t{gate_off:.3e}");
    println!("no_mask_query_head_grad\t{query_off:.3e}");
    println!("mask_gate_grad\t{gate_on:.3e}");
    println!("mask_query_head_grad\t{query_on:.3e}");
    println!("seconds\t{:.2}", r.seconds);
    let mut failures = Vec::new();
    if !r.check.passed {
        let w = r.check.worst().map(|w| w.name.clone()).unwrap_or_default();
        failures.push(format!("finite differences disagree (worst {w}: {:.3e})", r.check.max_rel_err));
    }
    if gate_off != 0.0 || query_off != 0.0 {
        failures.push("gradient reaches gate or query head without the mask".into());
    }
    if gate_on == 0.0 || query_on == 0.0 {
        failures.push("no gradient reaches gate or query head through the mask".into());
    }
    if failures.is_empty() {
        println!("result\tPASS");
        Ok(())
    } else {
        println!("result\tFAIL");
        Err(CheckFailed(failures.join("; ")).into())
    }
}

fn write_json<T: serde::Serialize>(out: Option<&PathBuf>, value: &T) -> Result<()> {
    if let Some(p) = out {
        fs::write(p, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn eval_synthetic(cli: &Cli) -> Result<()> {
    let cfg = effective_config(cli, TrainConfig::synthetic())?;
    banner(&cfg);
    let task = SyntheticConfig::default();
    let r = run_synthetic(&cfg, &task, true)?;
    println!("metric\tvalue");
    if let Some(w) = &r.warm_start {
        println!("warm_start_steps\t{}", w.steps);
        println!("warm_start_acc_at_1\t{:.4}", w.final_accuracy().unwrap_or(f64::NAN));
    }
    println!("initial_loss\t{:.4}", r.initial_loss);
    println!("final_loss\t{:.4}", r.final_loss);
    println!("held_out_queries\t{}", r.held_out.queries);
    println!("acc_at_1\t{:.4}", r.held_out.acc_at_1);
    println!("acc_at_{}\t{:.4}", r.held_out.k, r.held_out.acc_at_k);
    println!("acc_at_5_full_memory\t{:.4}", r.held_out_acc_at_5);
    println!("suffix_acc\t{:.4}", r.held_out.suffix_acc);
    println!("seconds\t{:.1}", r.seconds);
    write_json(cli.out.as_ref(), &r)
}

fn knowledge_update(cli: &Cli) -> Result<()> {
    let cfg = effective_config(cli, TrainConfig::synthetic())?;
    banner(&cfg);
    let r = run_knowledge_update(&cfg, &SyntheticConfig::default(), 0.5)?;
    println!("metric\tvalue");
    println!("removed_items\t{}", r.removed_items);
    println!("affected_queries\t{}", r.affected_queries);
    println!("acc_removed\t{:.4}", r.affected.acc_removed);
    println!("acc_restored\t{:.4}", r.affected.acc_restored);
    println!("gain\t{:.4}", r.gain());
    println!("train_affected_queries\t{}", r.affected_train_queries);
    println!("train_acc_removed\t{:.4}", r.affected_train.acc_removed);
    println!("train_acc_restored\t{:.4}", r.affected_train.acc_restored);
    println!("seconds\t{:.1}", r.seconds);
    write_json(cli.out.as_ref(), &r)
}

fn info(cli: &Cli) -> Result<()> {
    let path = require(&cli.snapshot, "snapshot", "info")?;
    let h = read_header_from(path).with_context(|| format!("snapshot {}", path.display()))?;
    let snap = load_snapshot::<f32>(path).with_context(|| format!("snapshot {}", path.display()))?;
    println!("field\tvalue");
    println!("format\t{}", h.format);
    println!("d\t{}", h.d);
    println!("c\t{}", h.c);
    println!("corpora\t{}", h.corpus_counts.len());
    for (j, n) in h.corpus_counts.iter().enumerate() {
        println!("corpus_{j}\t{n}");
    }
    println!("entries\t{}", snap.len());
    println!("version\t{}", snap.version());
    println!("shards\t{}", snap.num_shards());
    println!("params\t{}", params_path(path).exists());
    Ok(())
}
