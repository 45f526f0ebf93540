use std::path::Path;

use log::info;
use serde_json::{json, Value};
use stgraph::features::{load_embeddings, Embeddings};
use stgraph::graph::{build_coarse, build_fine, load_graph, write_graph, Graph, GraphMode};
use stgraph::models::{load_checkpoint, write_checkpoint, Arch};
use stgraph::records::{balance_undersample, parse_records, write_records, CrashRecord};
use stgraph::synth::{generate, write_truth};
use stgraph::training::{
    compare_models, evaluate, grid_search, train, write_comparison, write_history, write_results, TrainConfig,
};
use stgraph::{Error, Result};

use crate::config::PipelineConfig;
use crate::output::Outputs;
use crate::{BuildArgs, Command, CompareArgs, EvaluateArgs, GridArgs, Hyper, IngestArgs, SynthArgs, TrainArgs};

/// Runs one subcommand and returns its stdout summary.
pub fn run(command: &Command, config: PipelineConfig, out: &mut Outputs) -> Result<Value> {
    match command {
        Command::Synth(a) => synth(a, config, out),
        Command::Ingest(a) => ingest(a, config, out),
        Command::BuildGraph(a) => build_graph(a, config, out),
        Command::Train(a) => train_cmd(a, config, out),
        Command::GridSearch(a) => grid(a, config, out),
        Command::Compare(a) => compare(a, config, out),
        Command::Evaluate(a) => evaluate_cmd(a, out),
    }
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn class_counts(records: &[CrashRecord]) -> [usize; 2] {
    let injured = records.iter().filter(|r| r.severity.label() == 1).count();
    [records.len() - injured, injured]
}

fn synth(a: &SynthArgs, mut config: PipelineConfig, out: &mut Outputs) -> Result<Value> {
    if let Some(n) = a.n_records {
        config.synth.n_records = n;
    }
    if let Some(s) = a.seed {
        config.synth.seed = s;
    }
    let generated = generate(&config.synth)?;
    info!(target: "synth", "generated {} records", generated.records.len());
    out.write(&a.out, |w| write_records(w, &generated.records))?;
    if let Some(t) = &a.truth {
        out.write(t, |w| write_truth(w, &generated.truth))?;
    }
    Ok(json!({
        "command": "synth",
        "records": generated.records.len(),
        "class_counts": class_counts(&generated.records),
        "out": path_str(&a.out),
    }))
}

fn ingest(a: &IngestArgs, config: PipelineConfig, out: &mut Outputs) -> Result<Value> {
    let seed = a.seed.unwrap_or(config.seed);
    let report = parse_records(&a.input)?;
    for r in &report.rejected {
        info!(target: "ingest", "row {} rejected: {}", r.row, r.reason);
    }
    if report.records.is_empty() {
        return Err(Error::Schema(format!("{}: no valid records", a.input.display())));
    }
    let before = class_counts(&report.records);
    let kept = if a.no_balance {
        report.records.clone()
    } else {
        balance_undersample(&report.records, seed)?
    };
    let after = class_counts(&kept);
    info!(
        target: "ingest",
        "{} rows accepted, {} rejected, kept {} ({} not injured, {} injured)",
        report.records.len(),
        report.rejected.len(),
        kept.len(),
        after[0],
        after[1]
    );
    out.write(&a.out, |w| write_records(w, &kept))?;
    let summary = json!({
        "command": "ingest",
        "input": path_str(&a.input),
        "rows_accepted": report.records.len(),
        "rows_rejected": report.rejected.len(),
        "class_counts_before": before,
        "class_counts_after": after,
        "balanced": !a.no_balance,
        "seed": seed,
        "out": path_str(&a.out),
    });
    if let Some(p) = &a.report {
        let mut full = summary.clone();
        full["rejected"] = serde_json::to_value(&report.rejected)?;
        out.write_json(p, &full)?;
    }
    Ok(summary)
}

fn embeddings_for(records: &[CrashRecord], file: Option<&Path>) -> Result<Embeddings> {
    match file {
        Some(p) => load_embeddings(p),
        None => Ok(Embeddings::hashed(records)),
    }
}

fn build(
    records: &[CrashRecord],
    emb: &Embeddings,
    mode: GraphMode,
    config: &PipelineConfig,
    seed: u64,
) -> Result<Graph> {
    let g = &config.graph;
    let graph = match mode {
        GraphMode::Fine => build_fine(records, emb, g.dist_km, g.window_h)?,
        GraphMode::Coarse => build_coarse(records, emb, g.resolution)?,
    };
    graph.with_split(g.ratios(), seed, g.stratified)
}

fn graph_summary(g: &Graph) -> Value {
    json!({
        "mode": g.meta.mode.as_str(),
        "nodes": g.num_nodes(),
        "edges": g.num_edges(),
        "features": g.feature_dim(),
        "split": g.masks.sizes(),
    })
}

fn build_graph(a: &BuildArgs, mut config: PipelineConfig, out: &mut Outputs) -> Result<Value> {
    let g = &mut config.graph;
    if let Some(v) = a.dist_km {
        g.dist_km = v;
    }
    if let Some(v) = a.window_h {
        g.window_h = v;
    }
    if let Some(v) = a.resolution {
        g.resolution = v;
    }
    if let Some(p) = &a.embeddings {
        g.embeddings = Some(p.clone());
    }
    config.validate()?;
    let seed = a.seed.unwrap_or(config.seed);
    let report = parse_records(&a.input)?;
    if !report.rejected.is_empty() {
        log::warn!(target: "build-graph", "{} rows rejected while reading {}", report.rejected.len(), a.input.display());
    }
    let emb = embeddings_for(&report.records, config.graph.embeddings.as_deref())?;
    let graph = build(&report.records, &emb, a.mode, &config, seed)?;
    info!(
        target: "build-graph",
        "{} graph: N = {}, F = {}, {} directed edges",
        a.mode.as_str(),
        graph.num_nodes(),
        graph.feature_dim(),
        graph.num_edges()
    );
    out.write(&a.out, |w| write_graph(w, &graph))?;
    let mut summary = graph_summary(&graph);
    summary["command"] = json!("build-graph");
    summary["out"] = json!(path_str(&a.out));
    Ok(summary)
}

fn apply_hyper(h: &Hyper, config: &mut PipelineConfig) -> Result<()> {
    let t = &mut config.train;
    if let Some(v) = h.arch {
        t.arch = v;
    }
    if let Some(v) = h.hidden_dim {
        t.hidden_dim = v;
    }
    if let Some(v) = h.dropout {
        t.dropout = v;
    }
    if let Some(v) = h.lr {
        t.lr = v;
    }
    if let Some(v) = h.weight_decay {
        t.weight_decay = v;
    }
    if let Some(v) = h.epochs {
        t.epochs = v;
    }
    if let Some(v) = h.seed {
        config.seed = v;
    }
    config.validate()
}

fn train_cmd(a: &TrainArgs, mut config: PipelineConfig, out: &mut Outputs) -> Result<Value> {
    apply_hyper(&a.hyper, &mut config)?;
    let graph = load_graph(&a.graph)?;
    let cfg = config.train.to_config().seeded_from(config.seed);
    info!(target: "train", "training {} on {} nodes", cfg.label(), graph.num_nodes());
    let history = train(&graph, &cfg)?;
    let best = history.best();
    info!(target: "train", "best epoch {} with validation F1 {:.4}", history.best_epoch, best.val_f1);
    let history_path = a.out_dir.join("history.csv");
    let checkpoint_path = a.out_dir.join("checkpoint.json");
    out.write(&history_path, |w| write_history(w, &history))?;
    out.write(&checkpoint_path, |w| write_checkpoint(w, &history.best_model))?;
    Ok(json!({
        "command": "train",
        "arch": cfg.model.arch,
        "seed": cfg.seed,
        "num_params": history.best_model.params().count(),
        "best_epoch": history.best_epoch,
        "best_val_f1": best.val_f1,
        "history": path_str(&history_path),
        "checkpoint": path_str(&checkpoint_path),
    }))
}

fn grid(a: &GridArgs, mut config: PipelineConfig, out: &mut Outputs) -> Result<Value> {
    if let Some(v) = a.arch {
        config.train.arch = v;
    }
    if let Some(v) = a.epochs {
        config.grid.epochs = v;
    }
    if let Some(v) = a.seed {
        config.seed = v;
    }
    config.validate()?;
    let graph = load_graph(&a.graph)?;
    let configs = config.grid.to_grid(&config.train).configs(config.seed);
    info!(target: "grid-search", "{} configurations of {}", configs.len(), config.train.arch);
    let results = grid_search(&graph, &configs)?;
    let best = results
        .best()
        .ok_or_else(|| Error::Numeric(format!("all {} grid runs failed", configs.len())))?;
    let history = best.outcome.as_ref().expect("best run succeeded");
    info!(
        target: "grid-search",
        "best run {} ({}) validation F1 {:.4}, {} failed",
        best.index,
        best.config.label(),
        history.best_val_f1(),
        results.failures()
    );
    out.write(&a.out, |w| write_results(w, &results))?;
    if let Some(p) = &a.checkpoint {
        out.write(p, |w| write_checkpoint(w, &history.best_model))?;
    }
    Ok(json!({
        "command": "grid-search",
        "runs": configs.len(),
        "failures": results.failures(),
        "best": {
            "index": best.index,
            "config": best.config.label(),
            "num_params": best.num_params,
            "val_f1": history.best_val_f1(),
        },
        "out": path_str(&a.out),
    }))
}

fn compare(a: &CompareArgs, mut config: PipelineConfig, out: &mut Outputs) -> Result<Value> {
    apply_hyper(&a.hyper, &mut config)?;
    let archs: Vec<Arch> = if a.archs.is_empty() {
        Arch::ALL.to_vec()
    } else {
        a.archs.clone()
    };
    let (fine, coarse) = match (&a.fine, &a.coarse) {
        (Some(f), Some(c)) => (load_graph(f)?, load_graph(c)?),
        _ => {
            info!(target: "compare", "building both graphs from synthetic records");
            let generated = generate(&config.synth)?;
            let records = balance_undersample(&generated.records, config.seed)?;
            let emb = Embeddings::hashed(&records);
            (
                build(&records, &emb, GraphMode::Fine, &config, config.seed)?,
                build(&records, &emb, GraphMode::Coarse, &config, config.seed)?,
            )
        }
    };
    for g in [&fine, &coarse] {
        info!(target: "compare", "{} graph: N = {}, F = {}", g.meta.mode.as_str(), g.num_nodes(), g.feature_dim());
    }
    let template: TrainConfig = config.train.to_config();
    let rows = compare_models(&fine, &coarse, &archs, &template, config.seed)?;
    for r in &rows {
        info!(target: "compare", "{}: fine {:.4}, coarse {:.4}", r.arch, r.fine_f1, r.coarse_f1);
    }
    out.write(&a.out, |w| write_comparison(w, &rows))?;
    Ok(json!({
        "command": "compare",
        "fine": graph_summary(&fine),
        "coarse": graph_summary(&coarse),
        "rows": rows,
        "out": path_str(&a.out),
    }))
}

fn evaluate_cmd(a: &EvaluateArgs, out: &mut Outputs) -> Result<Value> {
    let model = load_checkpoint(&a.checkpoint)?;
    let graph = load_graph(&a.graph)?;
    if model.input_dim() != graph.feature_dim() {
        return Err(Error::Shape(format!(
            "checkpoint expects {} input features, graph {} has {}",
            model.input_dim(),
            a.graph.display(),
            graph.feature_dim()
        )));
    }
    let report = evaluate(&model, &graph, a.split)?;
    info!(
        target: "evaluate",
        "{:?} split: accuracy {:.4}, weighted F1 {:.4}, AUC {:.4}",
        a.split,
        report.accuracy,
        report.weighted_f1,
        report.auc()
    );
    let metrics = a.out_dir.join("metrics.json");
    let roc = a.out_dir.join("roc.csv");
    let pr = a.out_dir.join("pr.csv");
    out.write_json(&metrics, &report)?;
    out.write(&roc, |w| report.write_roc_points(w))?;
    out.write(&pr, |w| report.write_pr_points(w))?;
    Ok(json!({
        "command": "evaluate",
        "split": a.split,
        "num_evaluated": report.num_evaluated,
        "accuracy": report.accuracy,
        "weighted_f1": report.weighted_f1,
        "auc": report.auc(),
        "average_precision": report.pr.average_precision,
        "metrics": path_str(&metrics),
        "roc": path_str(&roc),
        "pr": path_str(&pr),
    }))
}
