//! Task-stream JSON files.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{GraphError, GraphSnapshot, ItemRef, Labels, Objective, Split, Task, TaskStream, VertexUniverse};
use crate::autodiff::Tensor;
use crate::canonical::to_canonical_string;

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}, column {column}: {msg}")]
    Parse { line: usize, column: usize, msg: String },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("invariant violated: {0}")]
    Invariant(#[from] GraphError),
}

#[derive(Serialize, Deserialize)]
struct RawUniverse {
    size: usize,
    feature_dim: usize,
    edge_feature_dim: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RawLabels {
    PerVertex(Vec<usize>),
    Graph(usize),
}

#[derive(Serialize, Deserialize, Clone, Copy)]
#[serde(untagged)]
enum RawItem {
    Vertex([usize; 2]),
    Graph(usize),
}

#[derive(Serialize, Deserialize)]
struct RawGraph {
    vertex_ids: Vec<usize>,
    edges: Vec<[usize; 2]>,
    vertex_features: Vec<Vec<f64>>,
    edge_features: Vec<Vec<f64>>,
    labels: RawLabels,
    mask: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct RawSplit {
    train: Vec<RawItem>,
    test: Vec<RawItem>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    validation: Vec<RawItem>,
}

#[derive(Serialize, Deserialize)]
struct RawTask {
    task_id: usize,
    classes: Vec<usize>,
    graphs: Vec<RawGraph>,
    split: RawSplit,
}

#[derive(Serialize, Deserialize)]
struct RawStream {
    universe: RawUniverse,
    objective: String,
    num_classes_total: usize,
    tasks: Vec<RawTask>,
    /// When set, every edge is mirrored at load time.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    undirected: bool,
}

fn matrix(rows: Vec<Vec<f64>>, width: usize, what: &str) -> Result<Tensor, StreamError> {
    if rows.is_empty() {
        return Ok(Tensor::zeros(&[0, width]));
    }
    Tensor::from_rows(&rows).map_err(|_| StreamError::Schema(format!("{what} rows have unequal lengths")))
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn item_from_raw(i: RawItem) -> ItemRef {
    match i {
        RawItem::Vertex([g, v]) => ItemRef::vertex(g, v),
        RawItem::Graph(g) => ItemRef::graph(g),
    }
}

fn item_to_raw(i: &ItemRef) -> RawItem {
    match i.vertex {
        Some(v) => RawItem::Vertex([i.graph, v]),
        None => RawItem::Graph(i.graph),
    }
}

fn symmetrize(g: &mut RawGraph) {
    let mut present: std::collections::HashSet<[usize; 2]> = g.edges.iter().copied().collect();
    let n = g.edges.len();
    for e in 0..n {
        let [s, d] = g.edges[e];
        if present.insert([d, s]) {
            g.edges.push([d, s]);
            let f = g.edge_features.get(e).cloned().unwrap_or_default();
            g.edge_features.push(f);
        }
    }
}

fn from_raw(raw: RawStream) -> Result<TaskStream, StreamError> {
    let objective = Objective::parse(&raw.objective)
        .ok_or_else(|| StreamError::Schema(format!("unknown objective {:?}", raw.objective)))?;
    let universe = VertexUniverse {
        size: raw.universe.size,
        feature_dim: raw.universe.feature_dim,
        edge_feature_dim: raw.universe.edge_feature_dim,
    };
    for (k, t) in raw.tasks.iter().enumerate() {
        if t.task_id != k {
            return Err(StreamError::Schema(format!(
                "tasks out of order: position {k} holds task_id {}",
                t.task_id
            )));
        }
    }
    let mut tasks = Vec::with_capacity(raw.tasks.len());
    for t in raw.tasks {
        let mut graphs = Vec::with_capacity(t.graphs.len());
        for mut g in t.graphs {
            if raw.undirected {
                symmetrize(&mut g);
            }
            let labels = match (objective, g.labels) {
                (Objective::NodeClassification, RawLabels::PerVertex(l)) => Labels::PerVertex(l),
                (Objective::GraphClassification, RawLabels::Graph(c)) => Labels::Graph(c),
                _ => {
                    return Err(StreamError::Schema(format!(
                        "task {}: label layout does not match objective",
                        t.task_id
                    )))
                }
            };
            graphs.push(Arc::new(GraphSnapshot {
                vertex_ids: g.vertex_ids,
                edges: g.edges.into_iter().map(|[s, d]| (s, d)).collect(),
                vertex_features: matrix(g.vertex_features, universe.feature_dim, "vertex_features")?,
                edge_features: matrix(g.edge_features, universe.edge_width(), "edge_features")?,
                labels,
                mask: g.mask,
            }));
        }
        tasks.push(Task {
            task_id: t.task_id,
            objective,
            classes: t.classes,
            graphs,
            split: Split {
                train: t.split.train.into_iter().map(item_from_raw).collect(),
                test: t.split.test.into_iter().map(item_from_raw).collect(),
                validation: t.split.validation.into_iter().map(item_from_raw).collect(),
            },
        });
    }
    let stream = TaskStream {
        universe,
        objective,
        num_classes_total: raw.num_classes_total,
        tasks,
    };
    stream.validate()?;
    Ok(stream)
}

fn to_raw(s: &TaskStream) -> RawStream {
    RawStream {
        universe: RawUniverse {
            size: s.universe.size,
            feature_dim: s.universe.feature_dim,
            edge_feature_dim: s.universe.edge_feature_dim,
        },
        objective: s.objective.as_str().to_string(),
        num_classes_total: s.num_classes_total,
        undirected: false,
        tasks: s
            .tasks
            .iter()
            .map(|t| RawTask {
                task_id: t.task_id,
                classes: t.classes.clone(),
                graphs: t
                    .graphs
                    .iter()
                    .map(|g| RawGraph {
                        vertex_ids: g.vertex_ids.clone(),
                        edges: g.edges.iter().map(|&(a, b)| [a, b]).collect(),
                        vertex_features: rows_of(&g.vertex_features),
                        edge_features: rows_of(&g.edge_features),
                        labels: match &g.labels {
                            Labels::PerVertex(l) => RawLabels::PerVertex(l.clone()),
                            Labels::Graph(c) => RawLabels::Graph(*c),
                        },
                        mask: g.mask.clone(),
                    })
                    .collect(),
                split: RawSplit {
                    train: t.split.train.iter().map(item_to_raw).collect(),
                    test: t.split.test.iter().map(item_to_raw).collect(),
                    validation: t.split.validation.iter().map(item_to_raw).collect(),
                },
            })
            .collect(),
    }
}

/// Parses and validates a stream document.
pub fn stream_from_json(text: &str) -> Result<TaskStream, StreamError> {
    let raw: RawStream = serde_json::from_str(text).map_err(|e| {
        use serde_json::error::Category;
        match e.classify() {
            Category::Data => StreamError::Schema(e.to_string()),
            _ => StreamError::Parse {
                line: e.line(),
                column: e.column(),
                msg: e.to_string(),
            },
        }
    })?;
    from_raw(raw)
}

/// Canonical text of a valid stream.
pub fn stream_to_json(stream: &TaskStream) -> Result<String, StreamError> {
    stream.validate()?;
    to_canonical_string(&to_raw(stream)).map_err(|e| StreamError::Schema(e.to_string()))
}

pub fn load_stream(path: impl AsRef<Path>) -> Result<TaskStream, StreamError> {
    let text = std::fs::read_to_string(path)?;
    stream_from_json(&text)
}

pub fn save_stream(stream: &TaskStream, path: impl AsRef<Path>) -> Result<(), StreamError> {
    let text = stream_to_json(stream)?;
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const TINY: &str = r#"{"universe":{"size":4,"feature_dim":1,"edge_feature_dim":0},
        "objective":"node_classification","num_classes_total":2,
        "tasks":[{"task_id":0,"classes":[0,1],
          "graphs":[{"vertex_ids":[0,2],"edges":[[0,1]],"vertex_features":[[1.5],[-2]],
                     "edge_features":[[1]],"labels":[0,1],"mask":[true,true]}],
          "split":{"train":[[0,0]],"test":[[0,1]]}}]}"#;

    #[test]
    fn parses_and_canonicalizes() {
        let s = stream_from_json(TINY).unwrap();
        let text = stream_to_json(&s).unwrap();
        assert!(text.contains("1.5000000000000000e0"));
        let again = stream_from_json(&text).unwrap();
        assert_eq!(again, s);
        assert_eq!(stream_to_json(&again).unwrap(), text);
    }

    #[test]
    fn undirected_input_is_symmetrized() {
        let text = TINY.replacen("\"objective\"", "\"undirected\":true,\"objective\"", 1);
        let s = stream_from_json(&text).unwrap();
        assert_eq!(s.tasks[0].graphs[0].edges, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn out_of_order_tasks_are_schema_errors() {
        let text = TINY.replace("\"task_id\":0", "\"task_id\":1");
        assert!(matches!(stream_from_json(&text), Err(StreamError::Schema(_))));
    }

    #[test]
    fn truncated_file_is_parse_error() {
        let text = &TINY[..TINY.len() / 2];
        assert!(matches!(stream_from_json(text), Err(StreamError::Parse { .. })));
    }

    #[test]
    fn missing_field_is_schema_error() {
        let text = TINY.replace("\"num_classes_total\":2,", "");
        assert!(matches!(stream_from_json(&text), Err(StreamError::Schema(_))));
    }

    #[test]
    fn invariant_violation_on_load() {
        let text = TINY.replace("\"edges\":[[0,1]]", "\"edges\":[[0,2]]");
        assert!(matches!(
            stream_from_json(&text),
            Err(StreamError::Invariant(GraphError::DanglingEdge { .. }))
        ));
    }

    #[test]
    fn save_refuses_invalid_stream() {
        let mut s = stream_from_json(TINY).unwrap();
        s.tasks[0].split.test.clear();
        assert!(matches!(stream_to_json(&s), Err(StreamError::Invariant(_))));
    }
}
