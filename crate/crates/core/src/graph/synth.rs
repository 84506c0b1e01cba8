//! Synthetic task streams: a stochastic block model with Gaussian
//! class-conditional vertex features, a per-task additive mean shift and
//! a partially resampled vertex set between consecutive tasks.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{GraphError, GraphSnapshot, ItemRef, Labels, Objective, Split, Task, TaskStream, VertexUniverse};
use crate::autodiff::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub objective: Objective,
    pub num_tasks: usize,
    pub classes_per_task: usize,
    pub universe_size: usize,
    pub vertices_per_task: usize,
    pub feature_dim: usize,
    pub edge_feature_dim: usize,
    /// Explicit per-slot class means (`classes_per_task` rows of
    /// `feature_dim`); drawn from the seed when absent.
    pub class_means: Option<Vec<Vec<f64>>>,
    /// Scale of generated class means.
    pub class_separation: f64,
    pub feature_noise: f64,
    pub p_in: f64,
    pub p_out: f64,
    /// Length of the random mean shift added at every new task.
    pub drift: f64,
    /// Fraction of the previous task's vertices replaced at each task.
    pub resample_fraction: f64,
    pub edge_noise: f64,
    /// Node tasks: train share of labeled vertices (rest is test).
    pub train_fraction: f64,
    pub graphs_per_task: usize,
    pub graph_size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            objective: Objective::NodeClassification,
            num_tasks: 3,
            classes_per_task: 2,
            universe_size: 200,
            vertices_per_task: 60,
            feature_dim: 8,
            edge_feature_dim: 0,
            class_means: None,
            class_separation: 1.0,
            feature_noise: 1.0,
            p_in: 0.15,
            p_out: 0.03,
            drift: 1.0,
            resample_fraction: 0.3,
            edge_noise: 0.1,
            train_fraction: 0.8,
            graphs_per_task: 30,
            graph_size: 8,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), GraphError> {
        let bad = |m: &str| Err(GraphError::InvalidConfig(m.to_string()));
        if self.num_tasks == 0 {
            return bad("num_tasks must be positive");
        }
        if self.classes_per_task == 0 {
            return bad("classes_per_task must be positive");
        }
        if self.universe_size == 0 || self.vertices_per_task == 0 || self.feature_dim == 0 {
            return bad("universe_size, vertices_per_task and feature_dim must be positive");
        }
        for (name, p) in [
            ("p_in", self.p_in),
            ("p_out", self.p_out),
            ("resample_fraction", self.resample_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(GraphError::InvalidConfig(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction must lie in (0, 1)");
        }
        for (name, v) in [
            ("drift", self.drift),
            ("feature_noise", self.feature_noise),
            ("edge_noise", self.edge_noise),
            ("class_separation", self.class_separation),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(GraphError::InvalidConfig(format!("{name} must be finite and nonnegative")));
            }
        }
        let m = self.vertices_per_task;
        let fresh = m - self.kept(m);
        if self.universe_size < m + fresh {
            return bad("universe_size too small for vertices_per_task plus resampled vertices");
        }
        if let Some(means) = &self.class_means {
            if means.len() != self.classes_per_task || means.iter().any(|r| r.len() != self.feature_dim) {
                return bad("class_means must be classes_per_task rows of feature_dim");
            }
        }
        if self.objective == Objective::GraphClassification {
            if self.graphs_per_task < 3 {
                return bad("graphs_per_task must be at least 3");
            }
            if self.graph_size == 0 || self.graph_size > m {
                return bad("graph_size must lie in [1, vertices_per_task]");
            }
        } else if m < 2 {
            return bad("node tasks need at least two vertices for a train/test split");
        }
        Ok(())
    }

    fn kept(&self, m: usize) -> usize {
        ((1.0 - self.resample_fraction) * m as f64).round() as usize
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

struct Generator<'a> {
    cfg: &'a SynthConfig,
    rng: ChaCha8Rng,
    means: Vec<Vec<f64>>,
}

impl Generator<'_> {
    fn features(&mut self, slots: &[usize], shift: &[f64]) -> Tensor {
        let n = self.cfg.feature_dim;
        let mut data = Vec::with_capacity(slots.len() * n);
        for &s in slots {
            for d in 0..n {
                let v = self.means[s][d] + shift[d] + self.cfg.feature_noise * gaussian(&mut self.rng);
                data.push(v);
            }
        }
        Tensor::new(vec![slots.len(), n], data).expect("shape by construction")
    }

    /// Symmetric block-model edges plus their feature rows.
    fn edges(&mut self, slots: &[usize], same_class_p: f64, cross_class_p: f64) -> (Vec<(usize, usize)>, Tensor) {
        let width = self.cfg.edge_feature_dim.max(1);
        let mut edges = Vec::new();
        let mut feats = Vec::new();
        for i in 0..slots.len() {
            for j in (i + 1)..slots.len() {
                let same = slots[i] == slots[j];
                let p = if same { same_class_p } else { cross_class_p };
                if self.rng.gen::<f64>() >= p {
                    continue;
                }
                let row: Vec<f64> = if self.cfg.edge_feature_dim == 0 {
                    vec![1.0]
                } else {
                    (0..width)
                        .map(|d| {
                            let base = if d == 0 && same { 1.0 } else { 0.0 };
                            base + self.cfg.edge_noise * gaussian(&mut self.rng)
                        })
                        .collect()
                };
                edges.push((i, j));
                feats.extend_from_slice(&row);
                edges.push((j, i));
                feats.extend_from_slice(&row);
            }
        }
        let t = Tensor::new(vec![edges.len(), width], feats).expect("shape by construction");
        (edges, t)
    }
}

/// Deterministic synthetic stream for `(config, seed)`. Task `k` uses the
/// classes `k*c .. k*c + c - 1`.
pub fn synth_verg_stream(config: &SynthConfig, seed: u64) -> Result<TaskStream, GraphError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = config.classes_per_task;
    let n = config.feature_dim;
    let means = match &config.class_means {
        Some(m) => m.clone(),
        None => (0..c)
            .map(|_| (0..n).map(|_| config.class_separation * gaussian(&mut rng)).collect())
            .collect(),
    };
    let mut gen = Generator { cfg: config, rng, means };

    let universe = VertexUniverse {
        size: config.universe_size,
        feature_dim: n,
        edge_feature_dim: config.edge_feature_dim,
    };
    let m = config.vertices_per_task;
    let all: Vec<usize> = (0..config.universe_size).collect();
    let mut current: BTreeSet<usize> = all.choose_multiple(&mut gen.rng, m).copied().collect();
    let mut shift = vec![0.0; n];
    let mut tasks = Vec::with_capacity(config.num_tasks);

    for k in 0..config.num_tasks {
        if k > 0 {
            if config.drift > 0.0 {
                let dir = random_unit(&mut gen.rng, n);
                for (s, d) in shift.iter_mut().zip(dir) {
                    *s += config.drift * d;
                }
            }
            let prev: Vec<usize> = current.iter().copied().collect();
            let keep = config.kept(m);
            let kept: BTreeSet<usize> = prev.choose_multiple(&mut gen.rng, keep).copied().collect();
            let pool: Vec<usize> = all.iter().copied().filter(|v| !current.contains(v)).collect();
            let fresh: Vec<usize> = pool.choose_multiple(&mut gen.rng, m - keep).copied().collect();
            current = kept.into_iter().chain(fresh).collect();
        }
        let ids: Vec<usize> = current.iter().copied().collect();
        let classes: Vec<usize> = (k * c..k * c + c).collect();
        let task = match config.objective {
            Objective::NodeClassification => node_task(&mut gen, k, &ids, &classes, &shift),
            Objective::GraphClassification => graph_task(&mut gen, k, &ids, &classes, &shift),
        };
        tasks.push(task);
    }

    let stream = TaskStream {
        universe,
        objective: config.objective,
        num_classes_total: config.num_tasks * c,
        tasks,
    };
    stream.validate()?;
    Ok(stream)
}

fn node_task(gen: &mut Generator<'_>, k: usize, ids: &[usize], classes: &[usize], shift: &[f64]) -> Task {
    let c = classes.len();
    let m = ids.len();
    // balanced slot assignment in random order
    let mut slots: Vec<usize> = (0..m).map(|i| i % c).collect();
    slots.shuffle(&mut gen.rng);
    let x = gen.features(&slots, shift);
    let (edges, phi) = gen.edges(&slots, gen.cfg.p_in, gen.cfg.p_out);
    let labels: Vec<usize> = slots.iter().map(|&s| classes[s]).collect();
    let snapshot = GraphSnapshot {
        vertex_ids: ids.to_vec(),
        edges,
        vertex_features: x,
        edge_features: phi,
        labels: Labels::PerVertex(labels),
        mask: vec![true; m],
    };
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut gen.rng);
    let n_train = ((gen.cfg.train_fraction * m as f64).round() as usize).clamp(1, m - 1);
    let mut train: Vec<ItemRef> = order[..n_train].iter().map(|&v| ItemRef::vertex(0, v)).collect();
    let mut test: Vec<ItemRef> = order[n_train..].iter().map(|&v| ItemRef::vertex(0, v)).collect();
    train.sort();
    test.sort();
    Task {
        task_id: k,
        objective: Objective::NodeClassification,
        classes: classes.to_vec(),
        graphs: vec![Arc::new(snapshot)],
        split: Split {
            train,
            test,
            validation: Vec::new(),
        },
    }
}

fn graph_task(gen: &mut Generator<'_>, k: usize, ids: &[usize], classes: &[usize], shift: &[f64]) -> Task {
    let c = classes.len();
    let count = gen.cfg.graphs_per_task;
    let mut graphs = Vec::with_capacity(count);
    for g in 0..count {
        let slot = g % c;
        let mut members: Vec<usize> = ids.choose_multiple(&mut gen.rng, gen.cfg.graph_size).copied().collect();
        members.sort_unstable();
        let slots = vec![slot; members.len()];
        let x = gen.features(&slots, shift);
        let (edges, phi) = gen.edges(&slots, gen.cfg.p_in, gen.cfg.p_out);
        graphs.push(Arc::new(GraphSnapshot {
            vertex_ids: members,
            edges,
            vertex_features: x,
            edge_features: phi,
            labels: Labels::Graph(classes[slot]),
            mask: vec![true; gen.cfg.graph_size],
        }));
    }
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut gen.rng);
    // 60 / 20 / 20 train / test / validation
    let n_train = ((0.6 * count as f64).round() as usize).max(1);
    let n_test = ((0.2 * count as f64).round() as usize).max(1).min(count - n_train);
    let pick = |r: &[usize]| {
        let mut v: Vec<ItemRef> = r.iter().map(|&g| ItemRef::graph(g)).collect();
        v.sort();
        v
    };
    Task {
        task_id: k,
        objective: Objective::GraphClassification,
        classes: classes.to_vec(),
        graphs,
        split: Split {
            train: pick(&order[..n_train]),
            test: pick(&order[n_train..n_train + n_test]),
            validation: pick(&order[n_train + n_test..]),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_two_way_tasks() {
        let s = synth_verg_stream(&SynthConfig::default(), 1).unwrap();
        let classes: Vec<Vec<usize>> = s.tasks.iter().map(|t| t.classes.clone()).collect();
        assert_eq!(classes, vec![vec![0, 1], vec![2, 3], vec![4, 5]]);
        assert_eq!(s.num_classes_total, 6);
    }

    #[test]
    fn zero_drift_zero_resample_keeps_vertex_set() {
        let cfg = SynthConfig {
            drift: 0.0,
            resample_fraction: 0.0,
            ..SynthConfig::default()
        };
        let s = synth_verg_stream(&cfg, 5).unwrap();
        let first = &s.tasks[0].graphs[0].vertex_ids;
        assert!(s.tasks.iter().all(|t| &t.graphs[0].vertex_ids == first));
    }

    #[test]
    fn deterministic() {
        let cfg = SynthConfig::default();
        assert_eq!(synth_verg_stream(&cfg, 9).unwrap(), synth_verg_stream(&cfg, 9).unwrap());
        assert_ne!(synth_verg_stream(&cfg, 9).unwrap(), synth_verg_stream(&cfg, 10).unwrap());
    }

    #[test]
    fn rejects_bad_probability() {
        let cfg = SynthConfig {
            p_in: 1.5,
            ..SynthConfig::default()
        };
        assert!(matches!(synth_verg_stream(&cfg, 0), Err(GraphError::InvalidConfig(_))));
        let cfg = SynthConfig {
            num_tasks: 0,
            ..SynthConfig::default()
        };
        assert!(synth_verg_stream(&cfg, 0).is_err());
    }

    #[test]
    fn graph_objective_stream_is_valid() {
        let cfg = SynthConfig {
            objective: Objective::GraphClassification,
            edge_feature_dim: 2,
            ..SynthConfig::default()
        };
        let s = synth_verg_stream(&cfg, 2).unwrap();
        assert_eq!(s.tasks[0].graphs.len(), 30);
        assert_eq!(s.tasks[0].split.train.len(), 18);
        assert_eq!(s.tasks[0].split.test.len(), 6);
        assert_eq!(s.tasks[0].split.validation.len(), 6);
    }
}
