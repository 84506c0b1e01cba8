//! Small random cost instances shared by the property and acceptance tests.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::game::{GameConfig, PlayerU};
use crate::gnn::{init_params, BatchGraph, ModelConfig};
use crate::graph::{GraphSnapshot, Labels, Objective, SnapshotKey};

fn uniform(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-scale..scale)).collect()
}

/// A model, a two-snapshot batch and a point `(w, u)` inside the balls.
#[derive(Debug, Clone)]
pub struct CostCase {
    pub cfg: ModelConfig,
    pub batch: Vec<BatchGraph>,
    pub w: Vec<f64>,
    pub u: PlayerU,
    pub betas: [f64; 3],
}

impl CostCase {
    /// Game settings with this case's weights and dropout off.
    pub fn game_config(&self) -> GameConfig {
        with_betas(self.betas)
    }
}

pub fn with_betas(betas: [f64; 3]) -> GameConfig {
    GameConfig {
        beta1: betas[0],
        beta2: betas[1],
        beta3: betas[2],
        dropout: false,
        ..GameConfig::default()
    }
}

fn snapshot(rng: &mut ChaCha8Rng, n: usize, in_dim: usize, edge_dim: usize, classes: usize, graph: bool) -> GraphSnapshot {
    let mut edges = Vec::new();
    for s in 0..n {
        for d in 0..n {
            if rng.gen_bool(0.4) {
                edges.push((s, d));
            }
        }
    }
    let x = Tensor::new(vec![n, in_dim], uniform(rng, n * in_dim, 1.5)).expect("shape");
    let phi = Tensor::new(vec![edges.len(), edge_dim], uniform(rng, edges.len() * edge_dim, 1.5)).expect("shape");
    let labels = if graph {
        Labels::Graph(rng.gen_range(0..classes))
    } else {
        Labels::PerVertex((0..n).map(|_| rng.gen_range(0..classes)).collect())
    };
    GraphSnapshot {
        vertex_ids: (0..n).collect(),
        edges,
        vertex_features: x,
        edge_features: phi,
        labels,
        mask: vec![true; n],
    }
}

/// Up to 8 vertices per snapshot, 1 or 2 layers, node or graph labels.
pub fn cost_case(seed: u64) -> CostCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let in_dim = rng.gen_range(1..=3);
    let edge_dim = rng.gen_range(1..=2);
    let classes = rng.gen_range(2..=3);
    let graph = rng.gen_bool(0.3);
    let objective = if graph {
        Objective::GraphClassification
    } else {
        Objective::NodeClassification
    };
    let cfg = ModelConfig {
        nlays: rng.gen_range(1..=2),
        hc: rng.gen_range(1..=3),
        ..ModelConfig::new(in_dim, classes, edge_dim)
    };
    let mut batch = Vec::new();
    let mut u = PlayerU::default();
    for g in 0..2 {
        let n = rng.gen_range(1..=8);
        let s = snapshot(&mut rng, n, in_dim, edge_dim, classes, graph);
        let key = SnapshotKey { task_id: g, graph: 0 };
        let dx = Tensor::new(s.vertex_features.shape().to_vec(), uniform(&mut rng, s.vertex_features.len(), 0.2))
            .expect("shape");
        let dphi =
            Tensor::new(s.edge_features.shape().to_vec(), uniform(&mut rng, s.edge_features.len(), 0.2)).expect("shape");
        u.delta_x.insert(key, dx);
        u.delta_phi.insert(key, dphi);
        batch.push(BatchGraph::full(key, Arc::new(s), objective));
    }
    let w: Vec<f64> = init_params(&cfg, rng.gen())
        .expect("valid model")
        .values
        .into_iter()
        .map(|v| v + rng.gen_range(-0.1..0.1))
        .collect();
    u.delta_w = uniform(&mut rng, w.len(), 0.05);
    let betas = [rng.gen_range(0.1..1.0), rng.gen_range(0.1..1.0), rng.gen_range(0.1..1.0)];
    CostCase {
        cfg,
        batch,
        w,
        u,
        betas,
    }
}
