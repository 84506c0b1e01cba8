//! Replay buffers: `D_P` holds items of earlier tasks under a reservoir
//! policy, `D_N` is the training split of the task being learned.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::seq::index::sample;
use rand::Rng;
use thiserror::Error;

use crate::gnn::BatchGraph;
use crate::graph::{
    GraphSnapshot, ItemRef, Labels, Objective, SnapshotKey, Split, Task, TaskStream, VertexUniverse,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ReplayError {
    #[error("new-task data is empty")]
    EmptyNewData,
    #[error("batch size must be at least 1")]
    ZeroBatch,
}

/// One stored sample: a labeled vertex of a snapshot, or a whole graph.
#[derive(Debug, Clone)]
pub struct ReplayItem {
    pub task_id: usize,
    pub objective: Objective,
    pub item: ItemRef,
    pub snapshot: Arc<GraphSnapshot>,
}

impl ReplayItem {
    pub fn key(&self) -> SnapshotKey {
        SnapshotKey {
            task_id: self.task_id,
            graph: self.item.graph,
        }
    }

    pub fn label(&self) -> usize {
        self.snapshot.label_of(self.item.vertex)
    }
}

impl PartialEq for ReplayItem {
    fn eq(&self, other: &Self) -> bool {
        self.task_id == other.task_id && self.item == other.item
    }
}

/// Items of one part of a task's split.
pub fn task_items(task: &Task, part: &[ItemRef]) -> Vec<ReplayItem> {
    part.iter()
        .map(|&item| ReplayItem {
            task_id: task.task_id,
            objective: task.objective,
            item,
            snapshot: Arc::clone(&task.graphs[item.graph]),
        })
        .collect()
}

/// The new-task dataset `D_N`: the full training split.
pub fn new_task_data(task: &Task) -> Vec<ReplayItem> {
    task_items(task, &task.split.train)
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<ReplayItem>,
    seen: u64,
}

impl ReplayBuffer {
    pub const DEFAULT_CAPACITY: usize = 500;

    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: Vec::with_capacity(capacity.min(4096)),
            seen: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[ReplayItem] {
        &self.items
    }

    /// Number of items offered to the buffer so far.
    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn per_task_counts(&self) -> BTreeMap<usize, usize> {
        let mut out = BTreeMap::new();
        for it in &self.items {
            *out.entry(it.task_id).or_insert(0) += 1;
        }
        out
    }

    /// Reservoir merge: the n-th offered item is kept with probability
    /// `capacity / n`, evicting a uniformly chosen resident.
    pub fn update<R: Rng + ?Sized>(&mut self, incoming: &[ReplayItem], rng: &mut R) {
        for it in incoming {
            self.seen += 1;
            if self.items.len() < self.capacity {
                self.items.push(it.clone());
            } else if self.capacity > 0 {
                let j = rng.gen_range(0..self.seen);
                if j < self.capacity as u64 {
                    self.items[j as usize] = it.clone();
                }
            }
        }
        debug_assert!(self.items.len() <= self.capacity);
    }

    /// Resident items as a task stream, one task per stored task id in
    /// increasing order (renumbered from 0). Each snapshot keeps only the
    /// stored vertices labeled; every stored item goes to the train split.
    pub fn dump(&self, universe: &VertexUniverse, num_classes_total: usize) -> Option<TaskStream> {
        let objective = self.items.first()?.objective;
        let mut by_task: BTreeMap<usize, BTreeMap<usize, Vec<&ReplayItem>>> = BTreeMap::new();
        for it in &self.items {
            by_task
                .entry(it.task_id)
                .or_default()
                .entry(it.item.graph)
                .or_default()
                .push(it);
        }
        let mut tasks = Vec::with_capacity(by_task.len());
        for (k, (_, graphs)) in by_task.into_iter().enumerate() {
            let mut snaps = Vec::new();
            let mut train = Vec::new();
            let mut classes = BTreeSet::new();
            for (g, items) in graphs.into_values().enumerate() {
                let mut snap = (*items[0].snapshot).clone();
                if let Labels::PerVertex(_) = snap.labels {
                    snap.mask = vec![false; snap.num_vertices()];
                }
                for it in &items {
                    classes.insert(it.label());
                    match it.item.vertex {
                        Some(v) => {
                            snap.mask[v] = true;
                            train.push(ItemRef::vertex(g, v));
                        }
                        None => train.push(ItemRef::graph(g)),
                    }
                }
                train.sort();
                train.dedup();
                snaps.push(Arc::new(snap));
            }
            tasks.push(Task {
                task_id: k,
                objective,
                classes: classes.into_iter().collect(),
                graphs: snaps,
                split: Split {
                    train,
                    test: Vec::new(),
                    validation: Vec::new(),
                },
            });
        }
        Some(TaskStream {
            universe: universe.clone(),
            objective,
            num_classes_total,
            tasks,
        })
    }
}

fn pick<R: Rng + ?Sized>(src: &[ReplayItem], n: usize, rng: &mut R) -> Vec<ReplayItem> {
    sample(rng, src.len(), n).into_iter().map(|i| src[i].clone()).collect()
}

/// Joint minibatch `b_PN = b_P ∪ b_N`: up to `⌈b/2⌉` from the buffer, the
/// rest from the new task, each drawn uniformly without replacement and
/// clamped to what is available.
pub fn sample_joint<R: Rng + ?Sized>(
    buffer: &ReplayBuffer,
    new_data: &[ReplayItem],
    b: usize,
    rng: &mut R,
) -> Result<Vec<ReplayItem>, ReplayError> {
    if new_data.is_empty() {
        return Err(ReplayError::EmptyNewData);
    }
    if b == 0 {
        return Err(ReplayError::ZeroBatch);
    }
    let prev = buffer.items();
    let mut n_p = b.div_ceil(2).min(prev.len());
    let n_n = (b - n_p).min(new_data.len());
    if n_p + n_n < b {
        n_p = (b - n_n).min(prev.len());
    }
    let mut out = pick(prev, n_p, rng);
    out.extend(pick(new_data, n_n, rng));
    Ok(out)
}

/// Groups items by snapshot into masked batch entries, ordered by key.
pub fn to_batch(items: &[ReplayItem]) -> Vec<BatchGraph> {
    let mut groups: BTreeMap<SnapshotKey, (Arc<GraphSnapshot>, Objective, Vec<bool>)> = BTreeMap::new();
    for it in items {
        let (_, _, mask) = groups.entry(it.key()).or_insert_with(|| {
            let len = match it.objective {
                Objective::NodeClassification => it.snapshot.num_vertices(),
                Objective::GraphClassification => 1,
            };
            (Arc::clone(&it.snapshot), it.objective, vec![false; len])
        });
        mask[it.item.vertex.unwrap_or(0)] = true;
    }
    groups
        .into_iter()
        .map(|(key, (snapshot, objective, mask))| BatchGraph {
            key,
            snapshot,
            objective,
            mask: mask.into(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn items(task_id: usize, n: usize) -> Vec<ReplayItem> {
        let snap = Arc::new(GraphSnapshot {
            vertex_ids: (0..n).collect(),
            edges: vec![],
            vertex_features: Tensor::zeros(&[n, 1]),
            edge_features: Tensor::zeros(&[0, 1]),
            labels: Labels::PerVertex(vec![2 * task_id; n]),
            mask: vec![true; n],
        });
        (0..n)
            .map(|v| ReplayItem {
                task_id,
                objective: Objective::NodeClassification,
                item: ItemRef::vertex(0, v),
                snapshot: Arc::clone(&snap),
            })
            .collect()
    }

    #[test]
    fn under_capacity_stores_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut buf = ReplayBuffer::new(500);
        buf.update(&items(0, 100), &mut rng);
        assert_eq!(buf.len(), 100);
    }

    #[test]
    fn capacity_enforced() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut buf = ReplayBuffer::new(2);
        buf.update(&items(0, 1000), &mut rng);
        assert_eq!(buf.len(), 2);
        assert_eq!(buf.seen(), 1000);
    }

    #[test]
    fn zero_capacity_stays_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut buf = ReplayBuffer::new(0);
        buf.update(&items(0, 10), &mut rng);
        assert!(buf.is_empty());
    }

    #[test]
    fn first_task_batch_is_all_new() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = sample_joint(&ReplayBuffer::new(5), &items(0, 10), 4, &mut rng).unwrap();
        assert_eq!(b.len(), 4);
        assert!(b.iter().all(|i| i.task_id == 0));
    }

    #[test]
    fn availability_clamp() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut buf = ReplayBuffer::new(5);
        buf.update(&items(0, 1), &mut rng);
        let b = sample_joint(&buf, &items(1, 10), 4, &mut rng).unwrap();
        assert_eq!(b.iter().filter(|i| i.task_id == 0).count(), 1);
        assert_eq!(b.iter().filter(|i| i.task_id == 1).count(), 3);
    }

    #[test]
    fn empty_new_data_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(
            sample_joint(&ReplayBuffer::new(5), &[], 4, &mut rng).unwrap_err(),
            ReplayError::EmptyNewData
        );
    }

    #[test]
    fn batch_groups_by_snapshot() {
        let its = items(0, 5);
        let batch = to_batch(&[its[3].clone(), its[1].clone()]);
        assert_eq!(batch.len(), 1);
        assert_eq!(&*batch[0].mask, &[false, true, false, true, false]);
    }

    #[test]
    fn dump_is_a_valid_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut buf = ReplayBuffer::new(4);
        buf.update(&items(0, 6), &mut rng);
        buf.update(&items(1, 6), &mut rng);
        let u = VertexUniverse {
            size: 6,
            feature_dim: 1,
            edge_feature_dim: 0,
        };
        let s = buf.dump(&u, 4).unwrap();
        s.validate().unwrap();
        let stored: usize = s.tasks.iter().map(|t| t.split.train.len()).sum();
        assert_eq!(stored, 4);
    }
}
