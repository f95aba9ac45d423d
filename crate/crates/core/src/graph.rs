//! Snapshot-based dynamic graph: ingestion, binning, adjacency.
//!
//! A [`DynamicGraph`] is an ordered sequence of undirected [`Snapshot`]s over a
//! fixed node universe. Every node carries a unit self-loop in every snapshot
//! so attention rows and random walks are never empty.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("line {line}: {message}")]
    ParseLine { line: usize, message: String },
    #[error("line {line}: weight {weight} is not positive")]
    BadWeight { line: usize, weight: f64 },
    #[error("no edge records")]
    NoRecords,
    #[error("need at least 2 snapshots, got {steps}")]
    TooFewSteps { steps: usize },
    #[error("all timestamps are identical; cannot form {steps} bins")]
    DegenerateTimeRange { steps: usize },
    #[error("time step {t} out of range 1..={steps}")]
    StepOutOfRange { t: usize, steps: usize },
    #[error("node {node} out of range for {count} nodes")]
    NodeOutOfRange { node: usize, count: usize },
}

/// Dense node index, bijective with the original string labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// One parsed interaction line.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeRecord {
    pub u: String,
    pub v: String,
    pub weight: f64,
    pub timestamp: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SnapshotMode {
    Binned,
    Cumulative,
}

impl FromStr for SnapshotMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "binned" => Ok(Self::Binned),
            "cumulative" => Ok(Self::Cumulative),
            other => Err(format!("unknown snapshot mode '{other}'")),
        }
    }
}

impl fmt::Display for SnapshotMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Binned => f.write_str("binned"),
            Self::Cumulative => f.write_str("cumulative"),
        }
    }
}

/// One static graph; undirected, weights positive, self-loops everywhere.
#[derive(Debug, Clone)]
pub struct Snapshot {
    time_index: usize,
    edges: Vec<(NodeId, NodeId, f64)>,
    adjacency: Vec<Vec<(NodeId, f64)>>,
}

impl Snapshot {
    fn build(time_index: usize, node_count: usize, merged: &HashMap<(usize, usize), f64>) -> Self {
        let mut edges: Vec<(NodeId, NodeId, f64)> = merged
            .iter()
            .map(|(&(u, v), &w)| (NodeId(u), NodeId(v), w))
            .collect();
        edges.sort_by_key(|&(u, v, _)| (u, v));
        let mut adjacency: Vec<Vec<(NodeId, f64)>> = (0..node_count)
            .map(|v| vec![(NodeId(v), 1.0)])
            .collect();
        for &(u, v, w) in &edges {
            adjacency[u.0].push((v, w));
            adjacency[v.0].push((u, w));
        }
        for list in &mut adjacency {
            list.sort_by_key(|&(n, _)| n);
        }
        Self {
            time_index,
            edges,
            adjacency,
        }
    }

    /// 1-based position in the snapshot sequence.
    pub fn time_index(&self) -> usize {
        self.time_index
    }

    /// Canonical (u < v) edges, excluding the injected self-loops.
    pub fn edges(&self) -> &[(NodeId, NodeId, f64)] {
        &self.edges
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.len()
    }

    /// Neighbors in ascending node order, self-loop included.
    pub fn neighbors(&self, v: NodeId) -> Result<&[(NodeId, f64)], GraphError> {
        self.adjacency
            .get(v.0)
            .map(|list| list.as_slice())
            .ok_or(GraphError::NodeOutOfRange {
                node: v.0,
                count: self.adjacency.len(),
            })
    }

    /// Link weight between u and v excluding self-loops; 0 when absent.
    pub fn link_weight(&self, u: NodeId, v: NodeId) -> f64 {
        if u == v {
            return 0.0;
        }
        match self.adjacency[u.0].binary_search_by_key(&v, |&(n, _)| n) {
            Ok(pos) => self.adjacency[u.0][pos].1,
            Err(_) => 0.0,
        }
    }

    pub fn has_link(&self, u: NodeId, v: NodeId) -> bool {
        self.link_weight(u, v) > 0.0
    }

    /// Nodes incident to at least one real link.
    pub fn active_nodes(&self) -> Vec<NodeId> {
        let mut active = vec![false; self.adjacency.len()];
        for &(u, v, _) in &self.edges {
            active[u.0] = true;
            active[v.0] = true;
        }
        active
            .iter()
            .enumerate()
            .filter_map(|(i, &a)| a.then_some(NodeId(i)))
            .collect()
    }

    /// Degree excluding the self-loop.
    pub fn degree(&self, v: NodeId) -> usize {
        self.adjacency[v.0].len() - 1
    }

    /// Total edge weight excluding self-loops.
    pub fn total_weight(&self) -> f64 {
        self.edges.iter().map(|&(_, _, w)| w).sum()
    }
}

/// The full snapshot sequence plus the label map.
#[derive(Debug, Clone)]
pub struct DynamicGraph {
    node_count: usize,
    snapshots: Vec<Snapshot>,
    labels: Vec<String>,
    label_index: HashMap<String, usize>,
}

impl DynamicGraph {
    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn steps(&self) -> usize {
        self.snapshots.len()
    }

    /// 1-based snapshot access.
    pub fn snapshot(&self, t: usize) -> Result<&Snapshot, GraphError> {
        if t == 0 || t > self.snapshots.len() {
            return Err(GraphError::StepOutOfRange {
                t,
                steps: self.snapshots.len(),
            });
        }
        Ok(&self.snapshots[t - 1])
    }

    pub fn snapshots(&self) -> &[Snapshot] {
        &self.snapshots
    }

    pub fn neighbors(&self, t: usize, v: NodeId) -> Result<&[(NodeId, f64)], GraphError> {
        self.snapshot(t)?.neighbors(v)
    }

    pub fn label(&self, v: NodeId) -> Option<&str> {
        self.labels.get(v.0).map(String::as_str)
    }

    pub fn node_by_label(&self, label: &str) -> Option<NodeId> {
        self.label_index.get(label).copied().map(NodeId)
    }

    /// Builds a graph directly from per-step undirected edge lists; node ids
    /// double as labels. Duplicate pairs merge by weight; self-pairs are dropped.
    pub fn from_step_edges(
        node_count: usize,
        steps: Vec<Vec<(usize, usize, f64)>>,
    ) -> Result<Self, GraphError> {
        if steps.len() < 2 {
            return Err(GraphError::TooFewSteps { steps: steps.len() });
        }
        let mut snapshots = Vec::with_capacity(steps.len());
        for (i, list) in steps.iter().enumerate() {
            let mut merged: HashMap<(usize, usize), f64> = HashMap::new();
            for &(u, v, w) in list {
                let hi = u.max(v);
                if hi >= node_count {
                    return Err(GraphError::NodeOutOfRange {
                        node: hi,
                        count: node_count,
                    });
                }
                if u == v {
                    continue;
                }
                *merged.entry((u.min(v), u.max(v))).or_insert(0.0) += w;
            }
            snapshots.push(Snapshot::build(i + 1, node_count, &merged));
        }
        let labels: Vec<String> = (0..node_count).map(|i| i.to_string()).collect();
        let label_index = labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i))
            .collect();
        Ok(Self {
            node_count,
            snapshots,
            labels,
            label_index,
        })
    }
}

/// Parses "u v [weight] timestamp" lines; '#' starts a comment line.
pub fn parse_edge_list(text: &str) -> Result<Vec<EdgeRecord>, GraphError> {
    let mut records = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let (u, v, weight_str, ts_str) = match fields.as_slice() {
            [u, v, ts] => (*u, *v, None, *ts),
            [u, v, w, ts] => (*u, *v, Some(*w), *ts),
            _ => {
                return Err(GraphError::ParseLine {
                    line: line_no,
                    message: format!("expected 3 or 4 fields, got {}", fields.len()),
                })
            }
        };
        let weight = match weight_str {
            None => 1.0,
            Some(w) => w.parse::<f64>().map_err(|e| GraphError::ParseLine {
                line: line_no,
                message: format!("bad weight '{w}': {e}"),
            })?,
        };
        if !weight.is_finite() || weight <= 0.0 {
            return Err(GraphError::BadWeight {
                line: line_no,
                weight,
            });
        }
        let timestamp = ts_str.parse::<f64>().map_err(|e| GraphError::ParseLine {
            line: line_no,
            message: format!("bad timestamp '{ts_str}': {e}"),
        })?;
        if !timestamp.is_finite() {
            return Err(GraphError::ParseLine {
                line: line_no,
                message: format!("non-finite timestamp '{ts_str}'"),
            });
        }
        records.push(EdgeRecord {
            u: u.to_string(),
            v: v.to_string(),
            weight,
            timestamp,
        });
    }
    Ok(records)
}

/// Splits the time range into `steps` equal-width bins (half-open, last bin
/// closed) and assembles one snapshot per bin.
pub fn build_snapshots(
    records: &[EdgeRecord],
    steps: usize,
    mode: SnapshotMode,
) -> Result<DynamicGraph, GraphError> {
    if records.is_empty() {
        return Err(GraphError::NoRecords);
    }
    if steps < 2 {
        return Err(GraphError::TooFewSteps { steps });
    }
    let min = records.iter().map(|r| r.timestamp).fold(f64::INFINITY, f64::min);
    let max = records
        .iter()
        .map(|r| r.timestamp)
        .fold(f64::NEG_INFINITY, f64::max);
    if min == max {
        return Err(GraphError::DegenerateTimeRange { steps });
    }
    let width = (max - min) / steps as f64;

    // Labels are assigned in order of first appearance.
    let mut labels: Vec<String> = Vec::new();
    let mut label_index: HashMap<String, usize> = HashMap::new();
    let intern = |label: &str, labels: &mut Vec<String>, idx: &mut HashMap<String, usize>| {
        if let Some(&i) = idx.get(label) {
            return i;
        }
        let i = labels.len();
        labels.push(label.to_string());
        idx.insert(label.to_string(), i);
        i
    };

    let mut binned: Vec<Vec<(usize, usize, f64)>> = vec![Vec::new(); steps];
    for r in records {
        let u = intern(&r.u, &mut labels, &mut label_index);
        let v = intern(&r.v, &mut labels, &mut label_index);
        let mut bin = ((r.timestamp - min) / width).floor() as usize;
        if bin >= steps {
            bin = steps - 1;
        }
        if u != v {
            binned[bin].push((u, v, r.weight));
        }
    }
    let node_count = labels.len();

    let mut snapshots = Vec::with_capacity(steps);
    let mut cumulative: HashMap<(usize, usize), f64> = HashMap::new();
    for (i, bin) in binned.iter().enumerate() {
        let merged: HashMap<(usize, usize), f64> = match mode {
            SnapshotMode::Binned => {
                let mut m = HashMap::new();
                for &(u, v, w) in bin {
                    *m.entry((u.min(v), u.max(v))).or_insert(0.0) += w;
                }
                m
            }
            SnapshotMode::Cumulative => {
                for &(u, v, w) in bin {
                    *cumulative.entry((u.min(v), u.max(v))).or_insert(0.0) += w;
                }
                cumulative.clone()
            }
        };
        snapshots.push(Snapshot::build(i + 1, node_count, &merged));
    }

    Ok(DynamicGraph {
        node_count,
        snapshots,
        labels,
        label_index,
    })
}
