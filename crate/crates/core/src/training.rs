//! Full-batch training with best-validation checkpointing, grid search and
//! the fine-vs-coarse architecture comparison.
//!
//! Training code paths never see test labels: they work on a copy of the
//! labels with every test node's label withheld.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, softmax_xent, AdamState, Matrix, Tape};
use crate::codec;
use crate::error::{Error, Result};
use crate::eval::{confusion, MetricsReport};
use crate::graph::Graph;
use crate::models::{predict, Arch, GraphContext, Mode, Model, ModelConfig};
use crate::par;

pub const DEFAULT_HIDDEN: usize = 32;
pub const DEFAULT_DROPOUT: f64 = 0.30;
pub const DEFAULT_LR: f64 = 0.05;
pub const DEFAULT_WEIGHT_DECAY: f64 = 0.005;
pub const DEFAULT_EPOCHS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Uniform defaults: hidden 32, dropout 0.3, lr 0.05, weight decay
    /// 0.005, 30 epochs.
    pub fn defaults(arch: Arch, seed: u64) -> Self {
        Self {
            model: ModelConfig::new(arch, DEFAULT_HIDDEN, DEFAULT_DROPOUT),
            lr: DEFAULT_LR,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            epochs: DEFAULT_EPOCHS,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be non-negative", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight decay {} must be non-negative",
                self.weight_decay
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        Ok(())
    }

    /// Canonical description of everything except the seed; used to derive
    /// per-run seeds.
    pub fn label(&self) -> String {
        let m = &self.model;
        format!(
            "arch={} hidden={} blocks={} dropout={:?} kernel={} lr={:?} wd={:?} epochs={}",
            m.arch, m.hidden_dim, m.num_blocks, m.dropout, m.temporal_kernel, self.lr, self.weight_decay, self.epochs
        )
    }

    /// This config with its seed derived from `master` and [`label`](Self::label).
    pub fn seeded_from(mut self, master: u64) -> Self {
        self.seed = codec::derive_seed(master, &self.label());
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub train_f1: f64,
    pub val_f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub config: TrainConfig,
    pub epochs: Vec<EpochMetrics>,
    /// Earliest epoch with the highest validation F1.
    pub best_epoch: usize,
    /// Parameters as they were at `best_epoch`.
    pub best_model: Model,
}

impl TrainHistory {
    pub fn best(&self) -> &EpochMetrics {
        &self.epochs[self.best_epoch]
    }

    pub fn best_val_f1(&self) -> f64 {
        self.best().val_f1
    }
}

/// Labels, with test labels withheld, plus train and validation indices.
struct TrainingView {
    labels: Vec<u8>,
    train: Vec<usize>,
    val: Vec<usize>,
}

impl TrainingView {
    fn of(graph: &Graph) -> Result<Self> {
        let train = graph.masks.train_indices();
        let val = graph.masks.val_indices();
        if train.is_empty() || val.is_empty() {
            return Err(Error::Shape(
                "graph needs non-empty train and validation masks; build a split first".into(),
            ));
        }
        let labels = graph
            .labels
            .iter()
            .zip(&graph.masks.test)
            .map(|(&y, &is_test)| if is_test { 0 } else { y })
            .collect();
        Ok(Self { labels, train, val })
    }
}

fn split_metrics(logits: &Matrix, predicted: &[u8], labels: &[u8], index: &[usize]) -> Result<(f64, f64, f64)> {
    let (loss, _) = softmax_xent(logits, labels, index)?;
    let truth: Vec<u8> = index.iter().map(|&i| labels[i]).collect();
    let pred: Vec<u8> = index.iter().map(|&i| predicted[i]).collect();
    let c = confusion(&truth, &pred)?;
    Ok((loss, c.accuracy(), c.weighted_f1()))
}

/// Trains one model for `config.epochs` full-batch Adam steps.
pub fn train(graph: &Graph, config: &TrainConfig) -> Result<TrainHistory> {
    config.validate()?;
    let ctx = GraphContext::from_graph(graph)?;
    train_on(&ctx, graph, config)
}

/// As [`train`], reusing prebuilt graph operators.
pub fn train_on(ctx: &GraphContext, graph: &Graph, config: &TrainConfig) -> Result<TrainHistory> {
    config.validate()?;
    if ctx.num_nodes() != graph.num_nodes() {
        return Err(Error::Shape("context and graph disagree on node count".into()));
    }
    let view = TrainingView::of(graph)?;
    let mut model = Model::new(config.model, graph.feature_dim(), config.seed)?;
    let mut adam = AdamState::new(model.params().values());
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, Model)> = None;

    for epoch in 0..config.epochs {
        let mut tape = Tape::new();
        let seed = codec::derive_seed(config.seed, &format!("epoch{epoch}"));
        let f = model.forward(&mut tape, ctx, Mode::Train { seed })?;
        let loss = tape.softmax_xent(f.logits, &view.labels, &view.train)?;
        let loss_value = tape.value(loss).get(0, 0);
        if !loss_value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite training loss {loss_value} at epoch {epoch} ({})",
                config.label()
            )));
        }
        let grads = tape.backward(loss)?;
        let grads: Vec<Matrix> = f.params.iter().map(|&v| grads.get_or_zeros(&tape, v)).collect();
        adam_step(
            model.params_mut().values_mut(),
            &grads,
            &mut adam,
            config.lr,
            config.weight_decay,
        )?;

        let logits = model.logits(ctx)?;
        if !logits.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite logits after epoch {epoch} ({})",
                config.label()
            )));
        }
        let (_, predicted) = predict(&logits)?;
        let (train_loss, train_acc, train_f1) = split_metrics(&logits, &predicted, &view.labels, &view.train)?;
        let (val_loss, val_acc, val_f1) = split_metrics(&logits, &predicted, &view.labels, &view.val)?;
        let m = EpochMetrics {
            epoch,
            train_loss,
            val_loss,
            train_acc,
            val_acc,
            train_f1,
            val_f1,
        };
        log::debug!("epoch {epoch}: train_loss {train_loss:.4} val_loss {val_loss:.4} val_f1 {val_f1:.4}");
        if best.as_ref().is_none_or(|(_, f1, _)| val_f1 > *f1) {
            best = Some((epoch, val_f1, model.clone()));
        }
        epochs.push(m);
    }
    let (best_epoch, _, best_model) = best.expect("at least one epoch");
    Ok(TrainHistory {
        config: *config,
        epochs,
        best_epoch,
        best_model,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    All,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "all" => Ok(Split::All),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// Metrics of a trained model on one split of a graph.
pub fn evaluate(model: &Model, graph: &Graph, split: Split) -> Result<MetricsReport> {
    let index = match split {
        Split::Train => graph.masks.train_indices(),
        Split::Val => graph.masks.val_indices(),
        Split::Test => graph.masks.test_indices(),
        Split::All => (0..graph.num_nodes()).collect(),
    };
    if index.is_empty() {
        return Err(Error::Shape(format!("split {split:?} selects no nodes")));
    }
    let ctx = GraphContext::from_graph(graph)?;
    let (probs, predicted) = predict(&model.logits(&ctx)?)?;
    let truth: Vec<u8> = index.iter().map(|&i| graph.labels[i]).collect();
    let pred: Vec<u8> = index.iter().map(|&i| predicted[i]).collect();
    let scores: Vec<f64> = index.iter().map(|&i| probs.get(i, 1)).collect();
    MetricsReport::compute(&truth, &pred, &scores)
}

/// Cartesian hyperparameter grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub arch: Arch,
    pub hidden_dim: Vec<usize>,
    pub dropout: Vec<f64>,
    pub lr: Vec<f64>,
    pub weight_decay: Vec<f64>,
    pub epochs: usize,
    #[serde(default = "default_blocks")]
    pub num_blocks: usize,
    #[serde(default = "default_kernel")]
    pub temporal_kernel: usize,
}

fn default_blocks() -> usize {
    2
}

fn default_kernel() -> usize {
    3
}

impl Grid {
    /// hidden {32, 64} × dropout {0.3, 0.4} × lr {0.10, 0.07, 0.04, 0.001}
    /// × weight decay {5e-3, 5e-4, 5e-5}, 30 epochs.
    pub fn default_for(arch: Arch) -> Self {
        Self {
            arch,
            hidden_dim: vec![32, 64],
            dropout: vec![0.3, 0.4],
            lr: vec![0.10, 0.07, 0.04, 0.001],
            weight_decay: vec![5e-3, 5e-4, 5e-5],
            epochs: DEFAULT_EPOCHS,
            num_blocks: default_blocks(),
            temporal_kernel: default_kernel(),
        }
    }

    /// Every combination in nested order hidden → dropout → lr → weight
    /// decay, each seeded from `master`.
    pub fn configs(&self, master: u64) -> Vec<TrainConfig> {
        let mut out = Vec::new();
        for &hidden_dim in &self.hidden_dim {
            for &dropout in &self.dropout {
                for &lr in &self.lr {
                    for &weight_decay in &self.weight_decay {
                        let c = TrainConfig {
                            model: ModelConfig {
                                arch: self.arch,
                                hidden_dim,
                                num_blocks: self.num_blocks,
                                dropout,
                                temporal_kernel: self.temporal_kernel,
                            },
                            lr,
                            weight_decay,
                            epochs: self.epochs,
                            seed: 0,
                        };
                        out.push(c.seeded_from(master));
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    /// Position in the submitted config list.
    pub index: usize,
    pub config: TrainConfig,
    pub num_params: usize,
    pub outcome: std::result::Result<TrainHistory, String>,
}

impl RunResult {
    pub fn best_val_f1(&self) -> Option<f64> {
        self.outcome.as_ref().ok().map(TrainHistory::best_val_f1)
    }
}

#[derive(Debug, Clone)]
pub struct GridResults {
    /// Successful runs by validation F1 (desc), then parameter count
    /// (asc), then submission order; failed runs last.
    pub ranked: Vec<RunResult>,
}

impl GridResults {
    pub fn best(&self) -> Option<&RunResult> {
        self.ranked.first().filter(|r| r.outcome.is_ok())
    }

    pub fn failures(&self) -> usize {
        self.ranked.iter().filter(|r| r.outcome.is_err()).count()
    }
}

/// Trains every config on the same graph and split. A failing run is
/// recorded and the search continues.
pub fn grid_search(graph: &Graph, configs: &[TrainConfig]) -> Result<GridResults> {
    if configs.is_empty() {
        return Err(Error::Config("empty grid".into()));
    }
    TrainingView::of(graph)?;
    let ctx = GraphContext::from_graph(graph)?;
    let indexed: Vec<(usize, TrainConfig)> = configs.iter().copied().enumerate().collect();
    let mut runs = par::map_slice(&indexed, |&(index, config)| {
        let num_params = crate::models::ModelParams::zeros(&config.model, graph.feature_dim())
            .map(|p| p.count())
            .unwrap_or(0);
        let outcome = train_on(&ctx, graph, &config).map_err(|e| e.to_string());
        if let Err(e) = &outcome {
            log::warn!("run {index} ({}) failed: {e}", config.label());
        }
        RunResult {
            index,
            config,
            num_params,
            outcome,
        }
    });
    runs.sort_by(|a, b| match (a.best_val_f1(), b.best_val_f1()) {
        (Some(x), Some(y)) => y
            .total_cmp(&x)
            .then(a.num_params.cmp(&b.num_params))
            .then(a.index.cmp(&b.index)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.index.cmp(&b.index),
    });
    Ok(GridResults { ranked: runs })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub arch: Arch,
    pub fine_f1: f64,
    pub coarse_f1: f64,
}

/// Best validation F1 of each architecture on both graphs, trained with
/// `template` (its arch is replaced and its seed derived per run).
pub fn compare_models(
    fine: &Graph,
    coarse: &Graph,
    archs: &[Arch],
    template: &TrainConfig,
    master_seed: u64,
) -> Result<Vec<ComparisonRow>> {
    let fine_ctx = GraphContext::from_graph(fine)?;
    let coarse_ctx = GraphContext::from_graph(coarse)?;
    let jobs: Vec<(Arch, bool)> = archs.iter().flat_map(|&a| [(a, false), (a, true)]).collect();
    let scores = par::map_slice(&jobs, |&(arch, is_coarse)| {
        let mut c = *template;
        c.model.arch = arch;
        let c = c.seeded_from(master_seed);
        let h = if is_coarse {
            train_on(&coarse_ctx, coarse, &c)
        } else {
            train_on(&fine_ctx, fine, &c)
        };
        h.map(|h| h.best_val_f1())
    });
    let scores = scores.into_iter().collect::<Result<Vec<f64>>>()?;
    Ok(archs
        .iter()
        .enumerate()
        .map(|(k, &arch)| ComparisonRow {
            arch,
            fine_f1: scores[2 * k],
            coarse_f1: scores[2 * k + 1],
        })
        .collect())
}

fn float(x: f64) -> String {
    format!("{x:?}")
}

fn finish<W: Write>(w: csv::Writer<W>, what: &str) -> Result<()> {
    w.into_inner()
        .map_err(|e| Error::io(what, std::io::Error::other(e.to_string())))?
        .flush()
        .map_err(|e| Error::io(what, e))
}

pub fn write_history<W: Write>(writer: W, history: &TrainHistory) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "epoch",
        "train_loss",
        "val_loss",
        "train_acc",
        "val_acc",
        "train_f1",
        "val_f1",
    ])?;
    for m in &history.epochs {
        w.write_record([
            m.epoch.to_string(),
            float(m.train_loss),
            float(m.val_loss),
            float(m.train_acc),
            float(m.val_acc),
            float(m.train_f1),
            float(m.val_f1),
        ])?;
    }
    finish(w, "<history>")
}

pub fn write_results<W: Write>(writer: W, results: &GridResults) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "rank",
        "index",
        "arch",
        "hidden_dim",
        "num_blocks",
        "dropout",
        "lr",
        "weight_decay",
        "epochs",
        "seed",
        "num_params",
        "best_epoch",
        "best_val_f1",
        "status",
    ])?;
    for (rank, r) in results.ranked.iter().enumerate() {
        let c = &r.config;
        let (best_epoch, f1, status) = match &r.outcome {
            Ok(h) => (h.best_epoch.to_string(), float(h.best_val_f1()), "ok".to_string()),
            Err(e) => (String::new(), String::new(), format!("failed: {e}")),
        };
        w.write_record([
            (rank + 1).to_string(),
            r.index.to_string(),
            c.model.arch.to_string(),
            c.model.hidden_dim.to_string(),
            c.model.num_blocks.to_string(),
            float(c.model.dropout),
            float(c.lr),
            float(c.weight_decay),
            c.epochs.to_string(),
            c.seed.to_string(),
            r.num_params.to_string(),
            best_epoch,
            f1,
            status,
        ])?;
    }
    finish(w, "<results>")
}

pub fn write_comparison<W: Write>(writer: W, rows: &[ComparisonRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["arch", "fine_f1", "coarse_f1"])?;
    for r in rows {
        w.write_record([r.arch.to_string(), float(r.fine_f1), float(r.coarse_f1)])?;
    }
    finish(w, "<comparison>")
}
