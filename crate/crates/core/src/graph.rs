//! Fine (one node per crash) and coarse (one node per occupied hexagon
//! cell) graphs with features, labels, split masks and a checksummed JSON
//! container.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::codec::{self, Checksum};
use crate::error::{Error, Result};
use crate::features::{fine_node_features, Embeddings, EMBEDDING_DIM, FINE_FEATURE_DIM};
use crate::geo::{haversine_km, GeoPoint, HexGrid, SpatialIndex};
use crate::par;
use crate::records::{CrashRecord, Severity};

pub const GRAPH_FORMAT_VERSION: u32 = 1;
pub const FEATURE_LAYOUT_VERSION: u32 = 1;

pub const SAE_BINS: usize = 6;
pub const COARSE_FEATURE_DIM: usize = SAE_BINS + 2 + 24 + 7 + EMBEDDING_DIM;

pub const DEFAULT_DIST_KM: f64 = 30.0;
pub const DEFAULT_WINDOW_H: f64 = 24.0;
pub const DEFAULT_SPLIT: (f64, f64, f64) = (0.70, 0.20, 0.10);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphMode {
    Fine,
    Coarse,
}

impl GraphMode {
    pub fn as_str(self) -> &'static str {
        match self {
            GraphMode::Fine => "fine",
            GraphMode::Coarse => "coarse",
        }
    }

    pub fn feature_dim(self) -> usize {
        match self {
            GraphMode::Fine => FINE_FEATURE_DIM,
            GraphMode::Coarse => COARSE_FEATURE_DIM,
        }
    }
}

impl std::str::FromStr for GraphMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fine" => Ok(GraphMode::Fine),
            "coarse" => Ok(GraphMode::Coarse),
            other => Err(Error::Config(format!("unknown graph mode {other:?}"))),
        }
    }
}

/// How a graph was built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphMeta {
    pub mode: GraphMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dist_km: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window_h: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolution: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<GeoPoint>,
    pub layout_version: u32,
    pub provider: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_seed: Option<u64>,
    /// Coarse only: cells whose injury and not-injured counts were equal.
    #[serde(default)]
    pub tie_cells: usize,
    /// Coarse only: the cell behind each node, in node order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cell_ids: Vec<String>,
}

/// Train/validation/test membership, one flag per node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Masks {
    pub train: Vec<bool>,
    pub val: Vec<bool>,
    pub test: Vec<bool>,
}

impl Masks {
    /// No node in any split.
    pub fn empty(n: usize) -> Self {
        Self {
            train: vec![false; n],
            val: vec![false; n],
            test: vec![false; n],
        }
    }

    fn indices(mask: &[bool]) -> Vec<usize> {
        mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        Self::indices(&self.train)
    }

    pub fn val_indices(&self) -> Vec<usize> {
        Self::indices(&self.val)
    }

    pub fn test_indices(&self) -> Vec<usize> {
        Self::indices(&self.test)
    }

    /// (train, val, test) counts.
    pub fn sizes(&self) -> (usize, usize, usize) {
        let count = |m: &[bool]| m.iter().filter(|&&x| x).count();
        (count(&self.train), count(&self.val), count(&self.test))
    }

    pub fn is_empty(&self) -> bool {
        self.sizes() == (0, 0, 0)
    }

    fn validate(&self, n: usize) -> Result<()> {
        if self.train.len() != n || self.val.len() != n || self.test.len() != n {
            return Err(Error::Shape(format!("masks must have length {n}")));
        }
        for i in 0..n {
            let hits = u8::from(self.train[i]) + u8::from(self.val[i]) + u8::from(self.test[i]);
            if hits > 1 {
                return Err(Error::Domain(format!("node {i} is in more than one split")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    /// N × F, row i = node i.
    pub node_features: Matrix,
    /// Directed edges sorted by (src, dst); every edge appears in both
    /// directions.
    pub edges: Vec<(usize, usize)>,
    pub labels: Vec<u8>,
    pub masks: Masks,
    pub meta: GraphMeta,
}

impl Graph {
    pub fn num_nodes(&self) -> usize {
        self.labels.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.node_features.cols()
    }

    /// Checks every structural invariant; the feature width must match the
    /// mode.
    pub fn validate(&self) -> Result<()> {
        let n = self.num_nodes();
        if self.node_features.rows() != n {
            return Err(Error::Shape(format!(
                "{} feature rows for {n} labels",
                self.node_features.rows()
            )));
        }
        let expect = self.meta.mode.feature_dim();
        if self.feature_dim() != expect {
            return Err(Error::Shape(format!(
                "{} graph must have {expect} features per node, found {}",
                self.meta.mode.as_str(),
                self.feature_dim()
            )));
        }
        if !self.node_features.is_finite() {
            return Err(Error::Domain("non-finite node feature".into()));
        }
        if let Some(bad) = self.labels.iter().find(|&&y| y > 1) {
            return Err(Error::Domain(format!("label {bad} not in {{0,1}}")));
        }
        let set: HashSet<(usize, usize)> = self.edges.iter().copied().collect();
        for &(s, d) in &self.edges {
            if s >= n || d >= n {
                return Err(Error::Domain(format!("edge ({s}, {d}) outside 0..{n}")));
            }
            if s == d {
                return Err(Error::Domain(format!("self-loop at node {s}")));
            }
            if !set.contains(&(d, s)) {
                return Err(Error::Domain(format!("edge ({s}, {d}) has no reverse")));
            }
        }
        if set.len() != self.edges.len() {
            return Err(Error::Domain("duplicate edges".into()));
        }
        self.masks.validate(n)
    }

    /// Replaces the masks with a fresh seeded split.
    pub fn with_split(mut self, ratios: (f64, f64, f64), seed: u64, stratified: bool) -> Result<Self> {
        self.masks = if stratified {
            split_masks_stratified(&self.labels, ratios, seed)?
        } else {
            split_masks(self.num_nodes(), ratios, seed)?
        };
        self.meta.split_seed = Some(seed);
        Ok(self)
    }

    /// Reorders nodes so that new node `k` is old node `order[k]`.
    pub fn relabeled(&self, order: &[usize]) -> Result<Graph> {
        let n = self.num_nodes();
        let mut inverse = vec![usize::MAX; n];
        for (k, &old) in order.iter().enumerate() {
            if old >= n || inverse[old] != usize::MAX {
                return Err(Error::Domain("order is not a permutation".into()));
            }
            inverse[old] = k;
        }
        if order.len() != n {
            return Err(Error::Domain("order is not a permutation".into()));
        }
        let pick = |v: &[bool]| order.iter().map(|&o| v[o]).collect::<Vec<_>>();
        let mut edges: Vec<(usize, usize)> = self.edges.iter().map(|&(s, d)| (inverse[s], inverse[d])).collect();
        edges.sort_unstable();
        let mut meta = self.meta.clone();
        if !meta.cell_ids.is_empty() {
            meta.cell_ids = order.iter().map(|&o| self.meta.cell_ids[o].clone()).collect();
        }
        Ok(Graph {
            node_features: self.node_features.select_rows(order),
            edges,
            labels: order.iter().map(|&o| self.labels[o]).collect(),
            masks: Masks {
                train: pick(&self.masks.train),
                val: pick(&self.masks.val),
                test: pick(&self.masks.test),
            },
            meta,
        })
    }
}

fn symmetric_sorted(pairs: impl IntoIterator<Item = (usize, usize)>) -> Vec<(usize, usize)> {
    let mut edges: Vec<(usize, usize)> = pairs.into_iter().flat_map(|(a, b)| [(a, b), (b, a)]).collect();
    edges.sort_unstable();
    edges.dedup();
    edges
}

fn check_records(records: &[CrashRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Domain("no records to build a graph from".into()));
    }
    records.iter().try_for_each(CrashRecord::validate)
}

/// Undirected pairs `(i, j)`, `i < j`, within `dist_km` and `window_h`
/// (both inclusive). Pairs are pruned by a timestamp sort.
pub fn fine_pairs(records: &[CrashRecord], dist_km: f64, window_h: f64) -> Vec<(usize, usize)> {
    let window_s = window_h * 3600.0;
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by_key(|&i| (records[i].timestamp, i));
    let points: Vec<GeoPoint> = records
        .iter()
        .map(|r| GeoPoint {
            latitude: r.latitude,
            longitude: r.longitude,
        })
        .collect();
    let chunks = par::map_range(order.len(), |a| {
        let i = order[a];
        let mut out = Vec::new();
        for &j in &order[a + 1..] {
            if (records[j].timestamp - records[i].timestamp) as f64 > window_s {
                break;
            }
            if haversine_km(points[i], points[j]) <= dist_km {
                out.push((i.min(j), i.max(j)));
            }
        }
        out
    });
    chunks.into_iter().flatten().collect()
}

/// One node per record, in input order.
pub fn build_fine(records: &[CrashRecord], embeddings: &Embeddings, dist_km: f64, window_h: f64) -> Result<Graph> {
    check_records(records)?;
    if !(dist_km >= 0.0 && window_h >= 0.0) {
        return Err(Error::Config(format!(
            "thresholds must be non-negative (dist_km {dist_km}, window_h {window_h})"
        )));
    }
    let mut data = Vec::with_capacity(records.len() * FINE_FEATURE_DIM);
    for r in records {
        data.extend(fine_node_features(r, embeddings.get(&r.id)?)?);
    }
    let node_features = Matrix::from_vec(records.len(), FINE_FEATURE_DIM, data)?;
    let edges = symmetric_sorted(fine_pairs(records, dist_km, window_h));
    log::debug!("fine graph: {} nodes, {} directed edges", records.len(), edges.len());
    Ok(Graph {
        node_features,
        edges,
        labels: records.iter().map(|r| r.severity.label()).collect(),
        masks: Masks::empty(records.len()),
        meta: GraphMeta {
            mode: GraphMode::Fine,
            dist_km: Some(dist_km),
            window_h: Some(window_h),
            resolution: None,
            origin: None,
            layout_version: FEATURE_LAYOUT_VERSION,
            provider: embeddings.provider().as_str().into(),
            split_seed: None,
            tie_cells: 0,
            cell_ids: Vec::new(),
        },
    })
}

/// Per-cell summary of the crashes it holds.
#[derive(Debug, Clone, PartialEq)]
pub struct CellAggregate {
    pub sae_hist: [u32; SAE_BINS],
    /// (not injured, injury)
    pub severity_counts: [u32; 2],
    pub hour_hist: [u32; 24],
    pub weekday_hist: [u32; 7],
    pub mean_embedding: Vec<f64>,
}

impl CellAggregate {
    pub fn new(members: &[&CrashRecord], embeddings: &Embeddings) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Domain("empty cell".into()));
        }
        let mut agg = CellAggregate {
            sae_hist: [0; SAE_BINS],
            severity_counts: [0; 2],
            hour_hist: [0; 24],
            weekday_hist: [0; 7],
            mean_embedding: vec![0.0; EMBEDDING_DIM],
        };
        for r in members {
            agg.sae_hist[usize::from(r.sae_level)] += 1;
            agg.severity_counts[usize::from(r.severity.label())] += 1;
            agg.hour_hist[r.hour() as usize] += 1;
            agg.weekday_hist[r.weekday() as usize] += 1;
            for (m, e) in agg.mean_embedding.iter_mut().zip(embeddings.get(&r.id)?.values()) {
                *m += e;
            }
        }
        let k = members.len() as f64;
        agg.mean_embedding.iter_mut().for_each(|m| *m /= k);
        Ok(agg)
    }

    pub fn count(&self) -> u32 {
        self.severity_counts.iter().sum()
    }

    /// 1 only when injuries strictly outnumber non-injuries.
    pub fn label(&self) -> u8 {
        u8::from(self.severity_counts[1] > self.severity_counts[0])
    }

    pub fn is_tie(&self) -> bool {
        self.severity_counts[0] == self.severity_counts[1]
    }

    /// `[sae_hist, severity_counts, hour_hist, weekday_hist, mean_embedding]`.
    pub fn features(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(COARSE_FEATURE_DIM);
        let counts = self
            .sae_hist
            .iter()
            .chain(&self.severity_counts)
            .chain(&self.hour_hist)
            .chain(&self.weekday_hist);
        out.extend(counts.map(|&c| f64::from(c)));
        out.extend_from_slice(&self.mean_embedding);
        out
    }
}

/// One node per occupied cell of a grid centered on the records.
pub fn build_coarse(records: &[CrashRecord], embeddings: &Embeddings, resolution: u8) -> Result<Graph> {
    check_records(records)?;
    let points: Vec<GeoPoint> = records
        .iter()
        .map(|r| GeoPoint::new(r.latitude, r.longitude))
        .collect::<Result<_>>()?;
    let grid = HexGrid::centered_on(&points, resolution)?;
    let mut g = build_coarse_with(records, embeddings, &grid)?;
    g.meta.resolution = Some(resolution);
    g.meta.origin = Some(grid.origin());
    Ok(g)
}

/// Coarse graph over any spatial index. Nodes are ordered by the cell id
/// string.
pub fn build_coarse_with(records: &[CrashRecord], embeddings: &Embeddings, index: &dyn SpatialIndex) -> Result<Graph> {
    check_records(records)?;
    let mut cells: BTreeMap<String, (crate::geo::CellId, Vec<&CrashRecord>)> = BTreeMap::new();
    for r in records {
        let cell = index
            .cell_of(GeoPoint {
                latitude: r.latitude,
                longitude: r.longitude,
            })
            .map_err(|e| Error::Domain(format!("record {:?}: {e}", r.id)))?;
        cells
            .entry(cell.to_string())
            .or_insert_with(|| (cell, Vec::new()))
            .1
            .push(r);
    }
    let position: std::collections::HashMap<crate::geo::CellId, usize> =
        cells.values().enumerate().map(|(i, (c, _))| (*c, i)).collect();

    let mut data = Vec::with_capacity(cells.len() * COARSE_FEATURE_DIM);
    let mut labels = Vec::with_capacity(cells.len());
    let mut pairs = Vec::new();
    let mut ties = 0;
    for (i, (key, (cell, members))) in cells.iter().enumerate() {
        let agg = CellAggregate::new(members, embeddings)?;
        if agg.is_tie() {
            ties += 1;
            log::info!("cell {key}: tie of {} crashes, labeled 0", agg.count());
        }
        data.extend(agg.features());
        labels.push(agg.label());
        for nb in index.neighbors(*cell) {
            if let Some(&j) = position.get(&nb) {
                if i < j {
                    pairs.push((i, j));
                }
            }
        }
    }
    let n = labels.len();
    let edges = symmetric_sorted(pairs);
    log::debug!("coarse graph: {n} cells, {} directed edges, {ties} ties", edges.len());
    Ok(Graph {
        node_features: Matrix::from_vec(n, COARSE_FEATURE_DIM, data)?,
        edges,
        labels,
        masks: Masks::empty(n),
        meta: GraphMeta {
            mode: GraphMode::Coarse,
            dist_km: None,
            window_h: None,
            resolution: None,
            origin: None,
            layout_version: FEATURE_LAYOUT_VERSION,
            provider: embeddings.provider().as_str().into(),
            split_seed: None,
            tie_cells: ties,
            cell_ids: cells.into_keys().collect(),
        },
    })
}

fn split_sizes(n: usize, ratios: (f64, f64, f64)) -> Result<(usize, usize)> {
    let (a, b, c) = ratios;
    if !(a > 0.0 && b > 0.0 && c > 0.0) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios {a}, {b}, {c} must be positive and sum to 1"
        )));
    }
    let cut = |x: f64| ((n as f64) * x + 1e-9).floor() as usize;
    Ok((cut(a), cut(a + b)))
}

/// Seeded uniform split: a shuffled node order cut at
/// `floor(n·r_train)` and `floor(n·(r_train + r_val))`.
pub fn split_masks(n: usize, ratios: (f64, f64, f64), seed: u64) -> Result<Masks> {
    if n < 3 {
        return Err(Error::Config(format!("cannot split {n} nodes three ways")));
    }
    let (c1, c2) = split_sizes(n, ratios)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut masks = Masks::empty(n);
    for (k, &i) in order.iter().enumerate() {
        match k {
            k if k < c1 => masks.train[i] = true,
            k if k < c2 => masks.val[i] = true,
            _ => masks.test[i] = true,
        }
    }
    Ok(masks)
}

/// Splits each class separately with the same ratios.
pub fn split_masks_stratified(labels: &[u8], ratios: (f64, f64, f64), seed: u64) -> Result<Masks> {
    if labels.len() < 3 {
        return Err(Error::Config(format!("cannot split {} nodes three ways", labels.len())));
    }
    let mut masks = Masks::empty(labels.len());
    for class in 0..=1u8 {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        let (c1, c2) = split_sizes(members.len(), ratios)?;
        let mut order = members;
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(codec::derive_seed(
            seed,
            &format!("class{class}"),
        )));
        for (k, &i) in order.iter().enumerate() {
            match k {
                k if k < c1 => masks.train[i] = true,
                k if k < c2 => masks.val[i] = true,
                _ => masks.test[i] = true,
            }
        }
    }
    Ok(masks)
}

#[derive(Serialize, Deserialize)]
struct GraphFile {
    version: u32,
    mode: GraphMode,
    meta: GraphMeta,
    num_nodes: usize,
    feature_dim: usize,
    #[serde(
        serialize_with = "codec::serialize_f64s",
        deserialize_with = "codec::deserialize_f64s"
    )]
    features: Vec<f64>,
    edges: Vec<(usize, usize)>,
    labels: Vec<u8>,
    masks: Masks,
    checksum: String,
}

fn graph_checksum(
    version: u32,
    meta: &GraphMeta,
    num_nodes: usize,
    feature_dim: usize,
    features: &[f64],
    edges: &[(usize, usize)],
    labels: &[u8],
    masks: &Masks,
) -> Result<String> {
    let mut c = Checksum::new();
    c.u64(u64::from(version))
        .str(&serde_json::to_string(meta)?)
        .u64(num_nodes as u64)
        .u64(feature_dim as u64)
        .f64s(features)
        .u64(edges.len() as u64);
    for &(s, d) in edges {
        c.u64(s as u64).u64(d as u64);
    }
    c.bytes(labels);
    for m in [&masks.train, &masks.val, &masks.test] {
        let bytes: Vec<u8> = m.iter().map(|&b| u8::from(b)).collect();
        c.bytes(&bytes);
    }
    Ok(c.finish())
}

/// Content checksum of a graph, as stored in its file.
pub fn checksum(g: &Graph) -> Result<String> {
    graph_checksum(
        GRAPH_FORMAT_VERSION,
        &g.meta,
        g.num_nodes(),
        g.feature_dim(),
        g.node_features.data(),
        &g.edges,
        &g.labels,
        &g.masks,
    )
}

pub fn write_graph<W: Write>(writer: W, g: &Graph) -> Result<()> {
    g.validate()?;
    let file = GraphFile {
        version: GRAPH_FORMAT_VERSION,
        mode: g.meta.mode,
        meta: g.meta.clone(),
        num_nodes: g.num_nodes(),
        feature_dim: g.feature_dim(),
        features: g.node_features.data().to_vec(),
        edges: g.edges.clone(),
        labels: g.labels.clone(),
        masks: g.masks.clone(),
        checksum: checksum(g)?,
    };
    serde_json::to_writer(writer, &file)?;
    Ok(())
}

pub fn save_graph(g: &Graph, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_graph(&mut w, g)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_graph<R: std::io::Read>(reader: R) -> Result<Graph> {
    let file: GraphFile = serde_json::from_reader(reader)?;
    if file.version != GRAPH_FORMAT_VERSION {
        return Err(Error::Domain(format!(
            "graph format version {} (expected {GRAPH_FORMAT_VERSION})",
            file.version
        )));
    }
    if file.mode != file.meta.mode {
        return Err(Error::Domain("mode disagrees with meta.mode".into()));
    }
    if file.features.len() != file.num_nodes * file.feature_dim {
        return Err(Error::Shape(format!(
            "{} feature values for {} × {}",
            file.features.len(),
            file.num_nodes,
            file.feature_dim
        )));
    }
    let expect = graph_checksum(
        file.version,
        &file.meta,
        file.num_nodes,
        file.feature_dim,
        &file.features,
        &file.edges,
        &file.labels,
        &file.masks,
    )?;
    if expect != file.checksum {
        return Err(Error::Domain("checksum mismatch".into()));
    }
    let g = Graph {
        node_features: Matrix::from_vec(file.num_nodes, file.feature_dim, file.features)?,
        edges: file.edges,
        labels: file.labels,
        masks: file.masks,
        meta: file.meta,
    };
    g.validate()?;
    Ok(g)
}

pub fn load_graph(path: &Path) -> Result<Graph> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_graph(BufReader::new(f)).map_err(|e| match e {
        Error::Io { .. } => e,
        other => Error::format(path, other.to_string()),
    })
}

/// Severity of a coarse label, for display.
pub fn label_name(label: u8) -> &'static str {
    match Severity::from_label(label) {
        Ok(Severity::Injury) => "injury",
        _ => "not_injured",
    }
}
