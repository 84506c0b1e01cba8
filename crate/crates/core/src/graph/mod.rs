//! Dynamic graph data model: a fixed vertex universe, per-task graph
//! snapshots over subsets of it, and ordered task streams.

mod io;
mod synth;

use std::collections::HashSet;
use std::sync::Arc;

use thiserror::Error;

use crate::autodiff::Tensor;

pub use io::{load_stream, save_stream, stream_from_json, stream_to_json, StreamError};
pub use synth::{synth_verg_stream, SynthConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("vertex id {id} at position {position} is outside the universe of size {size}")]
    VertexOutOfUniverse { position: usize, id: usize, size: usize },
    #[error("vertex ids must be strictly increasing (position {position})")]
    UnorderedVertices { position: usize },
    #[error("edge {edge} references position {endpoint} but the graph has {vertices} vertices")]
    DanglingEdge {
        edge: usize,
        endpoint: usize,
        vertices: usize,
    },
    #[error("edge {edge} duplicates an earlier edge ({src}, {dst})")]
    DuplicateEdge { edge: usize, src: usize, dst: usize },
    #[error("shape mismatch in {what}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        what: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("non-finite value in {what} at ({row}, {col})")]
    NonFiniteValue {
        what: &'static str,
        row: usize,
        col: usize,
    },
    #[error("task {task}: {msg}")]
    InvalidTask { task: usize, msg: String },
    #[error("invalid stream: {0}")]
    InvalidStream(String),
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VertexUniverse {
    pub size: usize,
    pub feature_dim: usize,
    /// 0 means edges carry a constant scalar weight of 1.0.
    pub edge_feature_dim: usize,
}

impl VertexUniverse {
    /// Width of the stored edge feature matrix.
    pub fn edge_width(&self) -> usize {
        self.edge_feature_dim.max(1)
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        if self.size == 0 || self.feature_dim == 0 {
            return Err(GraphError::InvalidStream(
                "universe size and feature_dim must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Objective {
    NodeClassification,
    GraphClassification,
}

impl Objective {
    pub fn as_str(self) -> &'static str {
        match self {
            Objective::NodeClassification => "node_classification",
            Objective::GraphClassification => "graph_classification",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "node_classification" => Some(Objective::NodeClassification),
            "graph_classification" => Some(Objective::GraphClassification),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Labels {
    PerVertex(Vec<usize>),
    Graph(usize),
}

/// One `(x, phi)` graph over a subset of the universe.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSnapshot {
    pub vertex_ids: Vec<usize>,
    /// Directed `(src, dst)` pairs over positions in `vertex_ids`.
    pub edges: Vec<(usize, usize)>,
    pub vertex_features: Tensor,
    pub edge_features: Tensor,
    pub labels: Labels,
    pub mask: Vec<bool>,
}

impl GraphSnapshot {
    pub fn num_vertices(&self) -> usize {
        self.vertex_ids.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Class of the vertex at `position`, or of the whole graph.
    pub fn label_of(&self, position: Option<usize>) -> usize {
        match (&self.labels, position) {
            (Labels::PerVertex(l), Some(p)) => l[p],
            (Labels::Graph(c), _) => *c,
            (Labels::PerVertex(l), None) => l[0],
        }
    }
}

/// Checks every snapshot invariant and reports the first violation.
pub fn validate_snapshot(s: &GraphSnapshot, universe: &VertexUniverse) -> Result<(), GraphError> {
    let nv = s.vertex_ids.len();
    for (position, &id) in s.vertex_ids.iter().enumerate() {
        if id >= universe.size {
            return Err(GraphError::VertexOutOfUniverse {
                position,
                id,
                size: universe.size,
            });
        }
        if position > 0 && s.vertex_ids[position - 1] >= id {
            return Err(GraphError::UnorderedVertices { position });
        }
    }
    let expect = [nv, universe.feature_dim];
    if s.vertex_features.shape() != expect {
        return Err(GraphError::ShapeMismatch {
            what: "vertex_features",
            expected: expect.to_vec(),
            found: s.vertex_features.shape().to_vec(),
        });
    }
    let mut seen = HashSet::with_capacity(s.edges.len());
    for (edge, &(src, dst)) in s.edges.iter().enumerate() {
        for endpoint in [src, dst] {
            if endpoint >= nv {
                return Err(GraphError::DanglingEdge {
                    edge,
                    endpoint,
                    vertices: nv,
                });
            }
        }
        if !seen.insert((src, dst)) {
            return Err(GraphError::DuplicateEdge { edge, src, dst });
        }
    }
    let expect = [s.edges.len(), universe.edge_width()];
    if s.edge_features.shape() != expect {
        return Err(GraphError::ShapeMismatch {
            what: "edge_features",
            expected: expect.to_vec(),
            found: s.edge_features.shape().to_vec(),
        });
    }
    if let Labels::PerVertex(l) = &s.labels {
        if l.len() != nv {
            return Err(GraphError::ShapeMismatch {
                what: "labels",
                expected: vec![nv],
                found: vec![l.len()],
            });
        }
    }
    if s.mask.len() != nv {
        return Err(GraphError::ShapeMismatch {
            what: "mask",
            expected: vec![nv],
            found: vec![s.mask.len()],
        });
    }
    for (what, t) in [("vertex_features", &s.vertex_features), ("edge_features", &s.edge_features)] {
        if let Some(i) = t.data().iter().position(|v| !v.is_finite()) {
            let c = t.cols().max(1);
            return Err(GraphError::NonFiniteValue {
                what,
                row: i / c,
                col: i % c,
            });
        }
    }
    Ok(())
}

/// Identifies one snapshot across a stream: `(task_id, graph index)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SnapshotKey {
    pub task_id: usize,
    pub graph: usize,
}

/// A labeled item: a vertex of a graph (node tasks) or a whole graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ItemRef {
    pub graph: usize,
    pub vertex: Option<usize>,
}

impl ItemRef {
    pub fn vertex(graph: usize, vertex: usize) -> Self {
        Self {
            graph,
            vertex: Some(vertex),
        }
    }

    pub fn graph(graph: usize) -> Self {
        Self {
            graph,
            vertex: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Split {
    pub train: Vec<ItemRef>,
    pub test: Vec<ItemRef>,
    /// Held-out items not used for training or scoring; may be empty.
    pub validation: Vec<ItemRef>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub task_id: usize,
    pub objective: Objective,
    /// Sorted, distinct class indices.
    pub classes: Vec<usize>,
    pub graphs: Vec<Arc<GraphSnapshot>>,
    pub split: Split,
}

impl Task {
    /// Every labeled item of the task in canonical order.
    pub fn labeled_items(&self) -> Vec<ItemRef> {
        let mut out = Vec::new();
        for (g, s) in self.graphs.iter().enumerate() {
            match self.objective {
                Objective::NodeClassification => {
                    out.extend(
                        s.mask
                            .iter()
                            .enumerate()
                            .filter(|(_, &m)| m)
                            .map(|(v, _)| ItemRef::vertex(g, v)),
                    );
                }
                Objective::GraphClassification => out.push(ItemRef::graph(g)),
            }
        }
        out
    }

    pub fn label_of(&self, item: ItemRef) -> usize {
        self.graphs[item.graph].label_of(item.vertex)
    }

    pub fn validate(&self, universe: &VertexUniverse) -> Result<(), GraphError> {
        let bad = |msg: String| GraphError::InvalidTask {
            task: self.task_id,
            msg,
        };
        if self.graphs.is_empty() {
            return Err(bad("task has no graphs".into()));
        }
        if self.classes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(bad("classes must be sorted and distinct".into()));
        }
        for s in &self.graphs {
            validate_snapshot(s, universe)?;
            match (self.objective, &s.labels) {
                (Objective::NodeClassification, Labels::PerVertex(_))
                | (Objective::GraphClassification, Labels::Graph(_)) => {}
                _ => return Err(bad("label layout does not match the objective".into())),
            }
        }
        let labeled = self.labeled_items();
        for &item in &labeled {
            let y = self.label_of(item);
            if self.classes.binary_search(&y).is_err() {
                return Err(bad(format!("label {y} of {item:?} is not an active class")));
            }
        }
        let mut parts = HashSet::new();
        for item in self
            .split
            .train
            .iter()
            .chain(&self.split.test)
            .chain(&self.split.validation)
        {
            if !parts.insert(*item) {
                return Err(bad(format!("split item {item:?} appears twice")));
            }
        }
        let all: HashSet<ItemRef> = labeled.into_iter().collect();
        if parts != all {
            return Err(bad("split does not cover exactly the labeled items".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub universe: VertexUniverse,
    pub objective: Objective,
    pub num_classes_total: usize,
    pub tasks: Vec<Task>,
}

impl TaskStream {
    pub fn validate(&self) -> Result<(), GraphError> {
        self.universe.validate()?;
        if self.num_classes_total == 0 {
            return Err(GraphError::InvalidStream("num_classes_total must be positive".into()));
        }
        for (k, task) in self.tasks.iter().enumerate() {
            if task.task_id != k {
                return Err(GraphError::InvalidStream(format!(
                    "task ids must increase from 0; position {k} holds task {}",
                    task.task_id
                )));
            }
            if task.objective != self.objective {
                return Err(GraphError::InvalidStream(format!(
                    "task {k} objective differs from the stream objective"
                )));
            }
            if let Some(&c) = task.classes.iter().find(|&&c| c >= self.num_classes_total) {
                return Err(GraphError::InvalidStream(format!(
                    "task {k} class {c} exceeds num_classes_total {}",
                    self.num_classes_total
                )));
            }
            task.validate(&self.universe)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn universe() -> VertexUniverse {
        VertexUniverse {
            size: 10,
            feature_dim: 2,
            edge_feature_dim: 0,
        }
    }

    fn single() -> GraphSnapshot {
        GraphSnapshot {
            vertex_ids: vec![3],
            edges: vec![],
            vertex_features: Tensor::from_rows(&[vec![0.5, -1.0]]).unwrap(),
            edge_features: Tensor::zeros(&[0, 1]),
            labels: Labels::PerVertex(vec![0]),
            mask: vec![true],
        }
    }

    #[test]
    fn minimal_graph_is_valid() {
        assert_eq!(validate_snapshot(&single(), &universe()), Ok(()));
    }

    #[test]
    fn off_by_one_edge_is_dangling() {
        let mut s = single();
        s.edges.push((0, 1));
        s.edge_features = Tensor::filled(&[1, 1], 1.0);
        assert_eq!(
            validate_snapshot(&s, &universe()),
            Err(GraphError::DanglingEdge {
                edge: 0,
                endpoint: 1,
                vertices: 1
            })
        );
    }

    #[test]
    fn nan_feature_is_reported() {
        let mut s = single();
        s.vertex_features.data_mut()[0] = f64::NAN;
        assert_eq!(
            validate_snapshot(&s, &universe()),
            Err(GraphError::NonFiniteValue {
                what: "vertex_features",
                row: 0,
                col: 0
            })
        );
    }

    #[test]
    fn duplicate_edges_rejected_self_loops_allowed() {
        let mut s = single();
        s.edges = vec![(0, 0), (0, 0)];
        s.edge_features = Tensor::filled(&[2, 1], 1.0);
        assert!(matches!(
            validate_snapshot(&s, &universe()),
            Err(GraphError::DuplicateEdge { edge: 1, .. })
        ));
        s.edges.pop();
        s.edge_features = Tensor::filled(&[1, 1], 1.0);
        assert_eq!(validate_snapshot(&s, &universe()), Ok(()));
    }

    #[test]
    fn vertex_outside_universe() {
        let mut s = single();
        s.vertex_ids = vec![10];
        assert!(matches!(
            validate_snapshot(&s, &universe()),
            Err(GraphError::VertexOutOfUniverse { id: 10, .. })
        ));
    }

    #[test]
    fn feature_shape_checked() {
        let mut s = single();
        s.vertex_features = Tensor::zeros(&[1, 3]);
        assert!(matches!(
            validate_snapshot(&s, &universe()),
            Err(GraphError::ShapeMismatch { what: "vertex_features", .. })
        ));
    }

    #[test]
    fn task_split_must_cover_labels() {
        let task = Task {
            task_id: 0,
            objective: Objective::NodeClassification,
            classes: vec![0],
            graphs: vec![Arc::new(single())],
            split: Split::default(),
        };
        assert!(matches!(task.validate(&universe()), Err(GraphError::InvalidTask { .. })));
        let mut ok = task.clone();
        ok.split.train.push(ItemRef::vertex(0, 0));
        assert_eq!(ok.validate(&universe()), Ok(()));
    }
}
