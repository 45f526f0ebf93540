//! GCN, single-head GAT, mean-aggregator SAGE and DSTGCN node classifiers
//! sharing a linear two-class head.
//!
//! Every architecture stacks `num_blocks` blocks with dropout between
//! consecutive blocks, then applies `logits = H·W_out + b_out`.

use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, OnceLock};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    closed_neighborhoods, mean_adjacency, normalize_adjacency, softmax_rows, spmm, CsrMatrix, Matrix, SparseOp, Tape,
    Var,
};
use crate::codec::{self, Checksum};
use crate::error::{Error, Result};
use crate::graph::Graph;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const NUM_CLASSES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Gcn,
    Gat,
    Sage,
    Dstgcn,
}

impl Arch {
    pub const ALL: [Arch; 4] = [Arch::Gcn, Arch::Gat, Arch::Sage, Arch::Dstgcn];

    pub fn as_str(self) -> &'static str {
        match self {
            Arch::Gcn => "gcn",
            Arch::Gat => "gat",
            Arch::Sage => "sage",
            Arch::Dstgcn => "dstgcn",
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arch::ALL
            .into_iter()
            .find(|a| a.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown architecture {s:?} (expected gcn, gat, sage or dstgcn)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    pub hidden_dim: usize,
    #[serde(default = "default_blocks")]
    pub num_blocks: usize,
    pub dropout: f64,
    #[serde(default = "default_kernel")]
    pub temporal_kernel: usize,
}

fn default_blocks() -> usize {
    2
}

fn default_kernel() -> usize {
    3
}

impl ModelConfig {
    pub fn new(arch: Arch, hidden_dim: usize, dropout: f64) -> Self {
        Self {
            arch,
            hidden_dim,
            num_blocks: default_blocks(),
            dropout,
            temporal_kernel: default_kernel(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 {
            return Err(Error::Config("hidden_dim must be positive".into()));
        }
        if self.num_blocks == 0 {
            return Err(Error::Config("num_blocks must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if self.temporal_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "temporal_kernel {} must be odd and positive",
                self.temporal_kernel
            )));
        }
        Ok(())
    }
}

/// Parameter names and shapes, in initialization order.
fn layout(config: &ModelConfig, input_dim: usize) -> Vec<(String, usize, usize)> {
    let h = config.hidden_dim;
    let mut out = Vec::new();
    for l in 0..config.num_blocks {
        let fan_in = if l == 0 { input_dim } else { h };
        match config.arch {
            Arch::Gcn => out.push((format!("block{l}.w"), fan_in, h)),
            Arch::Gat => {
                out.push((format!("block{l}.w"), fan_in, h));
                out.push((format!("block{l}.att"), 1, 2 * h));
            }
            Arch::Sage => {
                out.push((format!("block{l}.w_self"), fan_in, h));
                out.push((format!("block{l}.w_neigh"), fan_in, h));
            }
            Arch::Dstgcn => {
                out.push((format!("block{l}.w_spatial"), fan_in, h));
                out.push((format!("block{l}.kernel"), 1, config.temporal_kernel));
            }
        }
    }
    out.push(("head.w".into(), h, NUM_CLASSES));
    out.push(("head.b".into(), 1, NUM_CLASSES));
    out
}

/// Named parameter matrices in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases, drawn in layout order from
    /// `seed`. Attention vectors use `fan_in = hidden, fan_out = 1`;
    /// temporal kernels start at the identity (unit center tap) plus a small
    /// Glorot perturbation scaled by 0.1.
    pub fn init(config: &ModelConfig, input_dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 {
            return Err(Error::Shape("input_dim must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut values = Vec::new();
        for (name, r, c) in layout(config, input_dim) {
            let m = if name == "head.b" {
                Matrix::zeros(r, c)
            } else if name.ends_with(".att") {
                Matrix::glorot(r, c, config.hidden_dim, 1, &mut rng)
            } else if name.ends_with(".kernel") {
                let mut k = Matrix::glorot(r, c, c, c, &mut rng);
                k.data_mut().iter_mut().for_each(|v| *v *= 0.1);
                k.set(0, c / 2, k.get(0, c / 2) + 1.0);
                k
            } else {
                Matrix::glorot(r, c, r, c, &mut rng)
            };
            names.push(name);
            values.push(m);
        }
        Ok(Self { names, values })
    }

    /// Same layout with every entry zero.
    pub fn zeros(config: &ModelConfig, input_dim: usize) -> Result<Self> {
        config.validate()?;
        let (names, values) = layout(config, input_dim)
            .into_iter()
            .map(|(n, r, c)| (n, Matrix::zeros(r, c)))
            .unzip();
        Ok(Self { names, values })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    /// Replaces a parameter, keeping its shape.
    pub fn set(&mut self, name: &str, value: Matrix) -> Result<()> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Shape(format!("no parameter named {name:?}")))?;
        if self.values[i].shape() != value.shape() {
            return Err(Error::Shape(format!(
                "{name}: expected {:?}, got {:?}",
                self.values[i].shape(),
                value.shape()
            )));
        }
        self.values[i] = value;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.values.iter().map(|m| m.data().len()).sum()
    }

    fn check_layout(&self, config: &ModelConfig, input_dim: usize) -> Result<()> {
        let expect = layout(config, input_dim);
        let ok = expect.len() == self.names.len()
            && expect
                .iter()
                .zip(self.names.iter().zip(&self.values))
                .all(|((n, r, c), (name, m))| n == name && m.shape() == (*r, *c));
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "parameters do not match a {} model with input_dim {input_dim}",
                config.arch
            )))
        }
    }
}

/// Graph-derived operators shared by every forward pass over one graph.
pub struct GraphContext {
    features: Matrix,
    a_hat: SparseOp,
    mean_adj: SparseOp,
    nbhd: Arc<CsrMatrix>,
    a_hat_x: OnceLock<Matrix>,
    mean_x: OnceLock<Matrix>,
}

impl GraphContext {
    pub fn new(features: Matrix, edges: &[(usize, usize)]) -> Result<Self> {
        let n = features.rows();
        Ok(Self {
            a_hat: SparseOp::symmetric(normalize_adjacency(edges, n)?.into_matrix()),
            mean_adj: SparseOp::new(mean_adjacency(edges, n)?),
            nbhd: Arc::new(closed_neighborhoods(edges, n)?),
            features,
            a_hat_x: OnceLock::new(),
            mean_x: OnceLock::new(),
        })
    }

    pub fn from_graph(g: &Graph) -> Result<Self> {
        Self::new(g.node_features.clone(), &g.edges)
    }

    pub fn num_nodes(&self) -> usize {
        self.features.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn closed_neighborhoods(&self) -> &Arc<CsrMatrix> {
        &self.nbhd
    }

    // The first block's aggregation of the raw features is constant across
    // passes, so it is computed once.
    fn a_hat_x(&self) -> Result<&Matrix> {
        if self.a_hat_x.get().is_none() {
            let _ = self.a_hat_x.set(spmm(self.a_hat.matrix(), &self.features)?);
        }
        Ok(self.a_hat_x.get().expect("just set"))
    }

    fn mean_x(&self) -> Result<&Matrix> {
        if self.mean_x.get().is_none() {
            let _ = self.mean_x.set(spmm(self.mean_adj.matrix(), &self.features)?);
        }
        Ok(self.mean_x.get().expect("just set"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout active, masks derived from `seed`.
    Train {
        seed: u64,
    },
}

/// Logits recorded on a tape, plus the parameter variables (in
/// [`ModelParams`] order) for backpropagation.
pub struct Forward {
    pub logits: Var,
    pub params: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    input_dim: usize,
    params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, input_dim: usize, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, input_dim, seed)?;
        Ok(Self {
            config,
            input_dim,
            params,
        })
    }

    pub fn with_params(config: ModelConfig, input_dim: usize, params: ModelParams) -> Result<Self> {
        config.validate()?;
        params.check_layout(&config, input_dim)?;
        Ok(Self {
            config,
            input_dim,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    /// Records a forward pass on `tape`.
    pub fn forward(&self, tape: &mut Tape, ctx: &GraphContext, mode: Mode) -> Result<Forward> {
        if ctx.input_dim() != self.input_dim {
            return Err(Error::Shape(format!(
                "model expects {} input features, graph has {}",
                self.input_dim,
                ctx.input_dim()
            )));
        }
        let params: Vec<Var> = self.params.values.iter().map(|m| tape.param(m.clone())).collect();
        let mut h: Option<Var> = None;
        let mut k = 0;
        let mut next = || {
            k += 1;
            params[k - 1]
        };
        for l in 0..self.config.num_blocks {
            let out = match self.config.arch {
                Arch::Gcn => {
                    let w = next();
                    let agg = aggregate(tape, ctx, &ctx.a_hat, h, GraphContext::a_hat_x)?;
                    let z = tape.matmul(agg, w)?;
                    tape.relu(z)
                }
                Arch::Gat => {
                    let (w, att) = (next(), next());
                    let x = h.unwrap_or_else(|| tape.constant(ctx.features.clone()));
                    let wh = tape.matmul(x, w)?;
                    let z = tape.attention(wh, att, &ctx.nbhd)?;
                    tape.relu(z)
                }
                Arch::Sage => {
                    let (w_self, w_neigh) = (next(), next());
                    let x = h.unwrap_or_else(|| tape.constant(ctx.features.clone()));
                    let agg = aggregate(tape, ctx, &ctx.mean_adj, h, GraphContext::mean_x)?;
                    let a = tape.matmul(x, w_self)?;
                    let b = tape.matmul(agg, w_neigh)?;
                    let z = tape.add(a, b)?;
                    tape.relu(z)
                }
                Arch::Dstgcn => {
                    let (w, kernel) = (next(), next());
                    let agg = aggregate(tape, ctx, &ctx.a_hat, h, GraphContext::a_hat_x)?;
                    let z = tape.matmul(agg, w)?;
                    let spatial = tape.relu(z);
                    let t = tape.conv1d_same(spatial, kernel)?;
                    tape.relu(t)
                }
            };
            let out = match mode {
                Mode::Train { seed } if l + 1 < self.config.num_blocks => {
                    let s = codec::derive_seed(seed, &format!("dropout{l}"));
                    tape.dropout(out, self.config.dropout, s, true)?
                }
                _ => out,
            };
            h = Some(out);
        }
        let (w_out, b_out) = (next(), next());
        let h = h.expect("at least one block");
        let z = tape.matmul(h, w_out)?;
        let logits = tape.add_row(z, b_out)?;
        Ok(Forward { logits, params })
    }

    /// Evaluation-mode logits, N × 2.
    pub fn logits(&self, ctx: &GraphContext) -> Result<Matrix> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, ctx, Mode::Eval)?;
        Ok(tape.value(f.logits).clone())
    }
}

/// `op · H`, using the cached `op · X` when `h` is the raw input.
fn aggregate(
    tape: &mut Tape,
    ctx: &GraphContext,
    op: &SparseOp,
    h: Option<Var>,
    cached: fn(&GraphContext) -> Result<&Matrix>,
) -> Result<Var> {
    match h {
        Some(h) => tape.spmm(op, h),
        None => Ok(tape.constant(cached(ctx)?.clone())),
    }
}

/// Row probabilities and argmax labels (ties go to class 0).
pub fn predict(logits: &Matrix) -> Result<(Matrix, Vec<u8>)> {
    if logits.cols() != NUM_CLASSES {
        return Err(Error::Shape(format!("expected 2 logit columns, got {}", logits.cols())));
    }
    let probs = softmax_rows(logits);
    let labels = (0..probs.rows())
        .map(|i| u8::from(probs.get(i, 1) > probs.get(i, 0)))
        .collect();
    Ok((probs, labels))
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    rows: usize,
    cols: usize,
    #[serde(
        serialize_with = "codec::serialize_f64s",
        deserialize_with = "codec::deserialize_f64s"
    )]
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    config: ModelConfig,
    input_dim: usize,
    params: Vec<ParamEntry>,
    checksum: String,
}

fn checkpoint_checksum(config: &ModelConfig, input_dim: usize, params: &[ParamEntry]) -> Result<String> {
    let mut c = Checksum::new();
    c.u64(u64::from(CHECKPOINT_VERSION))
        .str(&serde_json::to_string(config)?)
        .u64(input_dim as u64);
    for p in params {
        c.str(&p.name).u64(p.rows as u64).u64(p.cols as u64).f64s(&p.values);
    }
    Ok(c.finish())
}

pub fn write_checkpoint<W: Write>(writer: W, model: &Model) -> Result<()> {
    let params: Vec<ParamEntry> = model
        .params
        .names
        .iter()
        .zip(&model.params.values)
        .map(|(name, m)| ParamEntry {
            name: name.clone(),
            rows: m.rows(),
            cols: m.cols(),
            values: m.data().to_vec(),
        })
        .collect();
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        config: model.config,
        input_dim: model.input_dim,
        checksum: checkpoint_checksum(&model.config, model.input_dim, &params)?,
        params,
    };
    serde_json::to_writer(writer, &file)?;
    Ok(())
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_checkpoint(&mut w, model)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint<R: std::io::Read>(reader: R) -> Result<Model> {
    let file: CheckpointFile = serde_json::from_reader(reader)?;
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::Domain(format!(
            "checkpoint version {} (expected {CHECKPOINT_VERSION})",
            file.version
        )));
    }
    if checkpoint_checksum(&file.config, file.input_dim, &file.params)? != file.checksum {
        return Err(Error::Domain("checksum mismatch".into()));
    }
    let mut names = Vec::new();
    let mut values = Vec::new();
    for p in file.params {
        values.push(Matrix::from_vec(p.rows, p.cols, p.values)?);
        names.push(p.name);
    }
    Model::with_params(file.config, file.input_dim, ModelParams { names, values })
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(f)).map_err(|e| match e {
        Error::Io { .. } => e,
        other => Error::format(path, other.to_string()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn random_graph(n: usize, f: usize, p: f64, seed: u64) -> (Matrix, Vec<(usize, usize)>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Matrix::random_uniform(n, f, -1.0, 1.0, seed ^ 0xabc);
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if rng.random_bool(p) {
                    edges.push((i, j));
                    edges.push((j, i));
                }
            }
        }
        edges.sort_unstable();
        (x, edges)
    }

    fn config(arch: Arch) -> ModelConfig {
        ModelConfig {
            arch,
            hidden_dim: 6,
            num_blocks: 2,
            dropout: 0.3,
            temporal_kernel: 3,
        }
    }

    #[test]
    fn parameter_layouts() {
        let m = Model::new(config(Arch::Dstgcn), 5, 1).unwrap();
        let shapes: Vec<(&str, (usize, usize))> = m
            .params()
            .names()
            .iter()
            .map(String::as_str)
            .zip(m.params().values().iter().map(Matrix::shape))
            .collect();
        assert_eq!(
            shapes,
            vec![
                ("block0.w_spatial", (5, 6)),
                ("block0.kernel", (1, 3)),
                ("block1.w_spatial", (6, 6)),
                ("block1.kernel", (1, 3)),
                ("head.w", (6, 2)),
                ("head.b", (1, 2)),
            ]
        );
        assert!(m.params().get("head.b").unwrap().data().iter().all(|&v| v == 0.0));
        let k = m.params().get("block0.kernel").unwrap();
        assert!((k.get(0, 1) - 1.0).abs() <= 0.1);
        assert!(k.get(0, 0).abs() <= 0.1 && k.get(0, 2).abs() <= 0.1);
        assert_eq!(Model::new(config(Arch::Dstgcn), 5, 1).unwrap(), m);
        assert_ne!(Model::new(config(Arch::Dstgcn), 5, 2).unwrap(), m);
    }

    #[test]
    fn config_validation() {
        let mut c = config(Arch::Gcn);
        c.temporal_kernel = 4;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c = config(Arch::Gcn);
        c.dropout = 1.0;
        assert!(c.validate().is_err());
        c = config(Arch::Gcn);
        c.hidden_dim = 0;
        assert!(c.validate().is_err());
        assert_eq!("SAGE".parse::<Arch>().unwrap(), Arch::Sage);
        assert!("stgcn".parse::<Arch>().is_err());
    }

    #[test]
    fn every_arch_is_permutation_equivariant() {
        let (x, edges) = random_graph(15, 4, 0.3, 3);
        let mut order: Vec<usize> = (0..15).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(4));
        let mut inverse = vec![0; 15];
        for (k, &o) in order.iter().enumerate() {
            inverse[o] = k;
        }
        let px = x.select_rows(&order);
        let pe: Vec<(usize, usize)> = edges.iter().map(|&(s, d)| (inverse[s], inverse[d])).collect();
        for arch in Arch::ALL {
            let m = Model::new(config(arch), 4, 9).unwrap();
            let a = m.logits(&GraphContext::new(x.clone(), &edges).unwrap()).unwrap();
            let b = m.logits(&GraphContext::new(px.clone(), &pe).unwrap()).unwrap();
            assert!(a.select_rows(&order).max_abs_diff(&b) < 1e-12, "{arch}");
        }
    }

    #[test]
    fn delta_kernel_reduces_dstgcn_to_gcn() {
        let (x, edges) = random_graph(12, 5, 0.4, 8);
        let ctx = GraphContext::new(x, &edges).unwrap();
        let gcn = Model::new(config(Arch::Gcn), 5, 10).unwrap();
        let mut p = ModelParams::init(&config(Arch::Dstgcn), 5, 0).unwrap();
        for l in 0..2 {
            p.set(
                &format!("block{l}.w_spatial"),
                gcn.params().get(&format!("block{l}.w")).unwrap().clone(),
            )
            .unwrap();
            p.set(
                &format!("block{l}.kernel"),
                Matrix::from_vec(1, 3, vec![0.0, 1.0, 0.0]).unwrap(),
            )
            .unwrap();
        }
        p.set("head.w", gcn.params().get("head.w").unwrap().clone()).unwrap();
        let dst = Model::with_params(config(Arch::Dstgcn), 5, p).unwrap();
        assert_eq!(dst.logits(&ctx).unwrap(), gcn.logits(&ctx).unwrap());
    }

    #[test]
    fn zero_weights_give_even_odds() {
        let (x, edges) = random_graph(8, 3, 0.5, 1);
        let ctx = GraphContext::new(x, &edges).unwrap();
        for arch in Arch::ALL {
            let m = Model::with_params(config(arch), 3, ModelParams::zeros(&config(arch), 3).unwrap()).unwrap();
            let (probs, labels) = predict(&m.logits(&ctx).unwrap()).unwrap();
            assert!(probs.data().iter().all(|&p| p == 0.5));
            assert!(labels.iter().all(|&y| y == 0));
        }
    }

    fn relu_v(v: Vec<f64>) -> Vec<f64> {
        v.into_iter().map(|x| x.max(0.0)).collect()
    }

    fn vec_mat(v: &[f64], m: &Matrix) -> Vec<f64> {
        (0..m.cols())
            .map(|c| (0..m.rows()).map(|r| v[r] * m.get(r, c)).sum())
            .collect()
    }

    #[test]
    fn isolated_node_is_an_mlp() {
        let x = Matrix::from_rows(&[vec![0.5, -1.0, 2.0]]).unwrap();
        let ctx = GraphContext::new(x.clone(), &[]).unwrap();
        for arch in [Arch::Gcn, Arch::Gat] {
            let m = Model::new(config(arch), 3, 21).unwrap();
            let p = m.params();
            let h1 = relu_v(vec_mat(x.row(0), p.get("block0.w").unwrap()));
            let h2 = relu_v(vec_mat(&h1, p.get("block1.w").unwrap()));
            let out = vec_mat(&h2, p.get("head.w").unwrap());
            let got = m.logits(&ctx).unwrap();
            assert!((got.get(0, 0) - out[0]).abs() < 1e-12 && (got.get(0, 1) - out[1]).abs() < 1e-12);
        }
        // SAGE: an empty neighborhood contributes nothing.
        let m = Model::new(config(Arch::Sage), 3, 21).unwrap();
        let p = m.params();
        let h1 = relu_v(vec_mat(x.row(0), p.get("block0.w_self").unwrap()));
        let h2 = relu_v(vec_mat(&h1, p.get("block1.w_self").unwrap()));
        let out = vec_mat(&h2, p.get("head.w").unwrap());
        let got = m.logits(&ctx).unwrap();
        assert!((got.get(0, 0) - out[0]).abs() < 1e-12 && (got.get(0, 1) - out[1]).abs() < 1e-12);
    }

    #[test]
    fn dstgcn_single_node_by_hand() {
        let cfg = ModelConfig {
            arch: Arch::Dstgcn,
            hidden_dim: 4,
            num_blocks: 1,
            dropout: 0.0,
            temporal_kernel: 3,
        };
        let x = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let mut p = ModelParams::zeros(&cfg, 2).unwrap();
        p.set(
            "block0.w_spatial",
            Matrix::from_rows(&[vec![1.0, -1.0, 0.5, 2.0], vec![0.0, 1.0, -1.0, 1.0]]).unwrap(),
        )
        .unwrap();
        p.set("block0.kernel", Matrix::from_rows(&[vec![0.5, 1.0, -1.0]]).unwrap())
            .unwrap();
        p.set(
            "head.w",
            Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0], vec![-1.0, 2.0]]).unwrap(),
        )
        .unwrap();
        p.set("head.b", Matrix::from_rows(&[vec![0.1, -0.2]]).unwrap()).unwrap();
        let m = Model::with_params(cfg, 2, p).unwrap();
        // Â = [1]; x·W = [1, 1, -1.5, 4] → relu [1, 1, 0, 4].
        // Conv y[c] = 0.5·h[c-1] + h[c] - h[c+1]:
        //   [1 - 1, 0.5 + 1 - 0, 0.5 + 0 - 4, 0 + 4] = [0, 1.5, -3.5, 4] → relu [0, 1.5, 0, 4].
        // Head: [0 + 0 - 4 + 0.1, 1.5 + 0 + 8 - 0.2] = [-3.9, 9.3].
        let got = m.logits(&GraphContext::new(x, &[]).unwrap()).unwrap();
        assert!((got.get(0, 0) + 3.9).abs() < 1e-12, "{got:?}");
        assert!((got.get(0, 1) - 9.3).abs() < 1e-12, "{got:?}");
    }

    #[test]
    fn gat_with_zero_attention_is_closed_mean() {
        let (x, edges) = random_graph(10, 3, 0.4, 6);
        let ctx = GraphContext::new(x.clone(), &edges).unwrap();
        let cfg = ModelConfig {
            num_blocks: 1,
            ..config(Arch::Gat)
        };
        let mut m = Model::new(cfg, 3, 2).unwrap();
        m.params_mut().set("block0.att", Matrix::zeros(1, 12)).unwrap();
        let w = m.params().get("block0.w").unwrap();
        let wh = crate::autodiff::matmul(&x, w).unwrap();
        let nb = ctx.closed_neighborhoods();
        let got = m.logits(&ctx).unwrap();
        for i in 0..10 {
            let members: Vec<usize> = nb.row(i).map(|(j, _)| j).collect();
            let h: Vec<f64> = (0..6)
                .map(|c| members.iter().map(|&j| wh.get(j, c)).sum::<f64>() / members.len() as f64)
                .map(|v| v.max(0.0))
                .collect();
            let out = vec_mat(&h, m.params().get("head.w").unwrap());
            assert!((got.get(i, 0) - out[0]).abs() < 1e-12 && (got.get(i, 1) - out[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn sage_with_identical_nodes_is_uniform() {
        let x = Matrix::from_rows(&vec![vec![0.3, -0.7, 1.1]; 7]).unwrap();
        let (_, edges) = random_graph(7, 1, 0.5, 4);
        let ctx = GraphContext::new(x, &edges).unwrap();
        // Isolated nodes see a zero neighbor mean, so connect everything.
        let full: Vec<(usize, usize)> = (0..7)
            .flat_map(|i| (0..7).filter(move |&j| j != i).map(move |j| (i, j)))
            .collect();
        let ctx_full = GraphContext::new(ctx.features().clone(), &full).unwrap();
        let m = Model::new(config(Arch::Sage), 3, 5).unwrap();
        let l = m.logits(&ctx_full).unwrap();
        for i in 1..7 {
            assert_eq!(l.row(i), l.row(0));
        }
    }

    #[test]
    fn predict_ties_and_shift_invariance() {
        let l = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 3.0], vec![-2.0, 5.0]]).unwrap();
        let (p, y) = predict(&l).unwrap();
        assert_eq!(y, vec![0, 1, 1]);
        assert_eq!(p.row(0), &[0.5, 0.5]);
        let shifted = Matrix::from_rows(&[vec![7.0, 7.0], vec![-9.0, -7.0], vec![98.0, 105.0]]).unwrap();
        assert!(predict(&shifted).unwrap().0.max_abs_diff(&p) < 1e-12);
        assert!(predict(&Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn eval_mode_is_deterministic_and_train_mode_drops() {
        let (x, edges) = random_graph(20, 4, 0.2, 2);
        let ctx = GraphContext::new(x, &edges).unwrap();
        for arch in Arch::ALL {
            let m = Model::new(config(arch), 4, 3).unwrap();
            let a = m.logits(&ctx).unwrap();
            assert_eq!(a, m.logits(&ctx).unwrap());
            let mut t = Tape::new();
            let f = m.forward(&mut t, &ctx, Mode::Train { seed: 1 }).unwrap();
            assert_ne!(t.value(f.logits), &a);
        }
    }

    #[test]
    fn input_dim_mismatch_is_shape_error() {
        let (x, edges) = random_graph(5, 4, 0.5, 2);
        let ctx = GraphContext::new(x, &edges).unwrap();
        let m = Model::new(config(Arch::Gcn), 5, 0).unwrap();
        assert!(matches!(m.logits(&ctx), Err(Error::Shape(_))));
    }

    /// Central-difference check of every parameter coordinate.
    fn max_relative_error(arch: Arch) -> f64 {
        let (x, edges) = random_graph(12, 5, 0.35, 31);
        let ctx = GraphContext::new(x, &edges).unwrap();
        let cfg = ModelConfig {
            hidden_dim: 4,
            ..config(arch)
        };
        let labels: Vec<u8> = (0..12).map(|i| (i % 2) as u8).collect();
        let mask: Vec<usize> = (0..12).collect();
        let mode = Mode::Train { seed: 77 };
        let loss_of = |m: &Model| -> f64 {
            let mut t = Tape::new();
            let f = m.forward(&mut t, &ctx, mode).unwrap();
            let l = t.softmax_xent(f.logits, &labels, &mask).unwrap();
            t.value(l).get(0, 0)
        };
        let mut m = Model::new(cfg, 5, 13).unwrap();
        m.params_mut()
            .set("head.b", Matrix::from_vec(1, 2, vec![0.1, -0.2]).unwrap())
            .unwrap();
        let mut t = Tape::new();
        let f = m.forward(&mut t, &ctx, mode).unwrap();
        let l = t.softmax_xent(f.logits, &labels, &mask).unwrap();
        let grads = t.backward(l).unwrap();
        let analytic: Vec<Matrix> = f.params.iter().map(|&v| grads.get_or_zeros(&t, v)).collect();
        let mut worst: f64 = 0.0;
        for p in 0..analytic.len() {
            for k in 0..analytic[p].data().len() {
                let orig = m.params().values()[p].data()[k];
                let step = 1e-5;
                m.params_mut().values_mut()[p].data_mut()[k] = orig + step;
                let up = loss_of(&m);
                m.params_mut().values_mut()[p].data_mut()[k] = orig - step;
                let down = loss_of(&m);
                m.params_mut().values_mut()[p].data_mut()[k] = orig;
                let numeric = (up - down) / (2.0 * step);
                let a = analytic[p].data()[k];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                if (a - numeric).abs() > 1e-9 {
                    worst = worst.max(err);
                }
            }
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        for arch in Arch::ALL {
            let e = max_relative_error(arch);
            assert!(e < 1e-4, "{arch}: {e}");
        }
    }

    #[test]
    fn checkpoint_round_trip_and_tamper() {
        let m = Model::new(config(Arch::Gat), 7, 4).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &m).unwrap();
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, m);
        let mut v: serde_json::Value = serde_json::from_slice(&buf).unwrap();
        v["params"][0]["values"][0] = 0.123.into();
        let err = read_checkpoint(serde_json::to_vec(&v).unwrap().as_slice()).unwrap_err();
        assert!(err.to_string().contains("checksum"));
    }
}
