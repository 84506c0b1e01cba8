//! A small single-head graph-attention network `g(x, phi, w)` and the
//! flat parameter vector the game operates on.
//!
//! Each layer computes `W h` per vertex, scores every in-edge with
//! `leaky_relu(a_src . Wh_src + a_dst . Wh_dst + a_edge . phi_e)`,
//! normalizes the scores with a softmax over each destination's in-edges
//! and sums the weighted messages. Hidden layers use ELU. Vertices with no
//! in-edges get an implicit self-loop so the softmax is always defined.

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::canonical::to_canonical_string;
use crate::graph::{GraphSnapshot, Labels, Objective, SnapshotKey};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GnnError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("parameter layout mismatch: expected {expected} values, found {found}")]
    LayoutMismatch { expected: usize, found: usize },
    #[error("snapshot shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, GnnError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub nlays: usize,
    pub hc: usize,
    pub drop: f64,
    pub leaky_slope: f64,
    pub in_dim: usize,
    pub out_dim: usize,
    /// Width of the edge feature rows (at least 1).
    pub edge_dim: usize,
}

impl ModelConfig {
    pub fn new(in_dim: usize, out_dim: usize, edge_dim: usize) -> Self {
        Self {
            nlays: 2,
            hc: 16,
            drop: 0.0,
            leaky_slope: 0.2,
            in_dim,
            out_dim,
            edge_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nlays == 0 || self.hc == 0 || self.in_dim == 0 || self.out_dim == 0 || self.edge_dim == 0 {
            return Err(GnnError::InvalidConfig("all extents must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.drop) {
            return Err(GnnError::InvalidConfig(format!("dropout {} outside [0, 1)", self.drop)));
        }
        if !self.leaky_slope.is_finite() {
            return Err(GnnError::InvalidConfig("leaky_slope must be finite".into()));
        }
        Ok(())
    }

    fn layer_dims(&self, layer: usize) -> (usize, usize) {
        let input = if layer == 0 { self.in_dim } else { self.hc };
        let output = if layer + 1 == self.nlays { self.out_dim } else { self.hc };
        (input, output)
    }
}

/// Names of the per-layer parameters in layout order.
pub const PARAM_NAMES: [&str; 5] = ["weight", "att_src", "att_dst", "att_edge", "bias"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub layer: usize,
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub segments: Vec<Segment>,
}

impl ParamLayout {
    pub fn for_model(cfg: &ModelConfig) -> Self {
        let mut segments = Vec::with_capacity(cfg.nlays * PARAM_NAMES.len());
        let mut offset = 0;
        for layer in 0..cfg.nlays {
            let (i, o) = cfg.layer_dims(layer);
            let shapes = [vec![i, o], vec![o, 1], vec![o, 1], vec![cfg.edge_dim, 1], vec![1, o]];
            for (name, shape) in PARAM_NAMES.iter().zip(shapes) {
                let seg = Segment {
                    layer,
                    name: name.to_string(),
                    shape,
                    offset,
                };
                offset += seg.len();
                segments.push(seg);
            }
        }
        Self { segments }
    }

    pub fn total_len(&self) -> usize {
        self.segments.last().map_or(0, |s| s.offset + s.len())
    }
}

/// Flat policy vector `w` plus the layout that gives it structure.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub layout: Arc<ParamLayout>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, layout: Arc<ParamLayout>) -> Result<Self> {
        let expected = layout.total_len();
        if values.len() != expected {
            return Err(GnnError::LayoutMismatch {
                expected,
                found: values.len(),
            });
        }
        Ok(Self { values, layout })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            values: vec![0.0; self.values.len()],
            layout: Arc::clone(&self.layout),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Parameters of one attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub att_src: Tensor,
    pub att_dst: Tensor,
    pub att_edge: Tensor,
    pub bias: Tensor,
}

impl LayerParams {
    fn parts(&self) -> [&Tensor; 5] {
        [&self.weight, &self.att_src, &self.att_dst, &self.att_edge, &self.bias]
    }
}

pub fn unflatten(params: &ParamVector, cfg: &ModelConfig) -> Result<Vec<LayerParams>> {
    let layout = ParamLayout::for_model(cfg);
    if *params.layout != layout || params.values.len() != layout.total_len() {
        return Err(GnnError::LayoutMismatch {
            expected: layout.total_len(),
            found: params.values.len(),
        });
    }
    let mut out = Vec::with_capacity(cfg.nlays);
    for chunk in layout.segments.chunks(PARAM_NAMES.len()) {
        let mut t: Vec<Tensor> = chunk
            .iter()
            .map(|s| Tensor::new(s.shape.clone(), params.values[s.offset..s.offset + s.len()].to_vec()))
            .collect::<std::result::Result<_, _>>()?;
        let bias = t.pop().expect("five parts");
        let att_edge = t.pop().expect("five parts");
        let att_dst = t.pop().expect("five parts");
        let att_src = t.pop().expect("five parts");
        let weight = t.pop().expect("five parts");
        out.push(LayerParams {
            weight,
            att_src,
            att_dst,
            att_edge,
            bias,
        });
    }
    Ok(out)
}

pub fn flatten(layers: &[LayerParams], cfg: &ModelConfig) -> Result<ParamVector> {
    let layout = ParamLayout::for_model(cfg);
    if layers.len() != cfg.nlays {
        return Err(GnnError::LayoutMismatch {
            expected: cfg.nlays,
            found: layers.len(),
        });
    }
    let mut values = Vec::with_capacity(layout.total_len());
    for (layer, seg) in layers.iter().flat_map(|l| l.parts()).zip(&layout.segments) {
        if layer.shape() != seg.shape.as_slice() {
            return Err(GnnError::LayoutMismatch {
                expected: seg.len(),
                found: layer.len(),
            });
        }
        values.extend_from_slice(layer.data());
    }
    ParamVector::new(values, Arc::new(layout))
}

/// Glorot-uniform weights and attention vectors, zero biases.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamVector> {
    cfg.validate()?;
    let layout = ParamLayout::for_model(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0; layout.total_len()];
    for seg in &layout.segments {
        if seg.name == "bias" {
            continue;
        }
        let (fan_in, fan_out) = (seg.shape[0], seg.shape[1]);
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for v in &mut values[seg.offset..seg.offset + seg.len()] {
            *v = rng.gen_range(-bound..=bound);
        }
    }
    ParamVector::new(values, Arc::new(layout))
}

/// Edge index arrays with implicit self-loops for vertices lacking in-edges.
#[derive(Debug, Clone)]
pub struct GraphIndex {
    pub vertices: usize,
    pub real_edges: usize,
    pub src: Arc<[usize]>,
    pub dst: Arc<[usize]>,
    pub self_loops: usize,
}

impl GraphIndex {
    pub fn new(s: &GraphSnapshot) -> Self {
        let n = s.num_vertices();
        let mut has_in = vec![false; n];
        let mut src = Vec::with_capacity(s.edges.len() + n);
        let mut dst = Vec::with_capacity(s.edges.len() + n);
        for &(a, b) in &s.edges {
            src.push(a);
            dst.push(b);
            has_in[b] = true;
        }
        let mut loops = 0;
        for (v, h) in has_in.iter().enumerate() {
            if !h {
                src.push(v);
                dst.push(v);
                loops += 1;
            }
        }
        Self {
            vertices: n,
            real_edges: s.edges.len(),
            src: src.into(),
            dst: dst.into(),
            self_loops: loops,
        }
    }
}

/// Tape handles for one layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub weight: Var,
    pub att_src: Var,
    pub att_dst: Var,
    pub att_edge: Var,
    pub bias: Var,
}

/// Registers every parameter segment of `values` as a differentiable leaf.
pub fn param_vars(tape: &mut Tape, values: &[f64], layout: &ParamLayout) -> Vec<Var> {
    layout
        .segments
        .iter()
        .map(|s| {
            let t = Tensor::new(s.shape.clone(), values[s.offset..s.offset + s.len()].to_vec())
                .expect("segment shape");
            tape.var(t)
        })
        .collect()
}

/// Groups flat segment handles into layers.
pub fn layer_vars(segments: &[Var]) -> Vec<LayerVars> {
    segments
        .chunks(PARAM_NAMES.len())
        .map(|c| LayerVars {
            weight: c[0],
            att_src: c[1],
            att_dst: c[2],
            att_edge: c[3],
            bias: c[4],
        })
        .collect()
}

/// Gathers per-segment adjoints back into one flat vector.
pub fn flat_grad(grads: &crate::autodiff::Gradients, segments: &[Var], total: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(total);
    for &v in segments {
        out.extend_from_slice(grads.get(v).data());
    }
    out
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the combined inputs
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Forward pass on an existing tape. `x` is `|V| x in_dim`, `phi` is
/// `|E| x edge_dim`. Returns per-vertex logits, or `1 x out_dim` for
/// graph-level objectives.
#[allow(clippy::too_many_arguments)]
pub fn forward_on_tape(
    tape: &mut Tape,
    layers: &[LayerVars],
    cfg: &ModelConfig,
    index: &GraphIndex,
    objective: Objective,
    x: Var,
    phi: Var,
    dropout_seed: Option<u64>,
) -> Result<Var> {
    let phi_all = if index.self_loops > 0 {
        let pad = tape.constant(Tensor::zeros(&[index.self_loops, cfg.edge_dim]));
        tape.concat(phi, pad, 0)?
    } else {
        phi
    };
    let mut h = x;
    for (l, p) in layers.iter().enumerate() {
        let h_in = match dropout_seed {
            Some(seed) if cfg.drop > 0.0 => tape.dropout(h, cfg.drop, mix_seed(seed, l as u64, 1))?,
            _ => h,
        };
        let out_dim = tape.value(p.weight).cols();
        let wh = tape.matmul(h_in, p.weight)?;
        let s_src = tape.matmul(wh, p.att_src)?;
        let s_dst = tape.matmul(wh, p.att_dst)?;
        let e_src = tape.gather_rows(s_src, Arc::clone(&index.src))?;
        let e_dst = tape.gather_rows(s_dst, Arc::clone(&index.dst))?;
        let e_edge = tape.matmul(phi_all, p.att_edge)?;
        let s = tape.add(e_src, e_dst)?;
        let s = tape.add(s, e_edge)?;
        let s = tape.leaky_relu(s, cfg.leaky_slope)?;
        let alpha = tape.segment_softmax(s, Arc::clone(&index.dst), index.vertices)?;
        let ones = tape.constant(Tensor::filled(&[1, out_dim], 1.0));
        let alpha_wide = tape.matmul(alpha, ones)?;
        let msg = tape.gather_rows(wh, Arc::clone(&index.src))?;
        let msg = tape.mul(msg, alpha_wide)?;
        let agg = tape.segment_sum(msg, Arc::clone(&index.dst), index.vertices)?;
        let out = tape.add_row(agg, p.bias)?;
        h = if l + 1 < layers.len() { tape.elu(out)? } else { out };
    }
    match objective {
        Objective::NodeClassification => Ok(h),
        Objective::GraphClassification => {
            let n = index.vertices;
            let pool = tape.constant(Tensor::filled(&[1, n], 1.0 / n as f64));
            Ok(tape.matmul(pool, h)?)
        }
    }
}

fn check_snapshot(cfg: &ModelConfig, s: &GraphSnapshot) -> Result<()> {
    if s.vertex_features.cols() != cfg.in_dim || s.vertex_features.rows() != s.num_vertices() {
        return Err(GnnError::ShapeMismatch(format!(
            "vertex features {:?} vs in_dim {}",
            s.vertex_features.shape(),
            cfg.in_dim
        )));
    }
    if s.edge_features.cols() != cfg.edge_dim || s.edge_features.rows() != s.num_edges() {
        return Err(GnnError::ShapeMismatch(format!(
            "edge features {:?} vs edge_dim {}",
            s.edge_features.shape(),
            cfg.edge_dim
        )));
    }
    if s.num_vertices() == 0 {
        return Err(GnnError::ShapeMismatch("snapshot has no vertices".into()));
    }
    Ok(())
}

/// Logits for one snapshot. Dropout is active only when a seed is given.
pub fn forward(
    params: &ParamVector,
    cfg: &ModelConfig,
    snapshot: &GraphSnapshot,
    objective: Objective,
    dropout_seed: Option<u64>,
) -> Result<Tensor> {
    cfg.validate()?;
    check_layout(params, cfg)?;
    check_snapshot(cfg, snapshot)?;
    let mut tape = Tape::new();
    let segs = param_vars(&mut tape, &params.values, &params.layout);
    let layers = layer_vars(&segs);
    let index = GraphIndex::new(snapshot);
    let x = tape.constant(snapshot.vertex_features.clone());
    let phi = tape.constant(snapshot.edge_features.clone());
    let out = forward_on_tape(&mut tape, &layers, cfg, &index, objective, x, phi, dropout_seed)?;
    Ok(tape.value(out).clone())
}

fn check_layout(params: &ParamVector, cfg: &ModelConfig) -> Result<()> {
    let layout = ParamLayout::for_model(cfg);
    if *params.layout != layout || params.values.len() != layout.total_len() {
        return Err(GnnError::LayoutMismatch {
            expected: layout.total_len(),
            found: params.values.len(),
        });
    }
    Ok(())
}

/// One snapshot of a minibatch with the items it contributes.
#[derive(Debug, Clone)]
pub struct BatchGraph {
    pub key: SnapshotKey,
    pub snapshot: Arc<GraphSnapshot>,
    pub objective: Objective,
    /// Node tasks: selected vertices. Graph tasks: a single `true`.
    pub mask: Arc<[bool]>,
}

impl BatchGraph {
    /// All labeled vertices (node tasks) or the whole graph.
    pub fn full(key: SnapshotKey, snapshot: Arc<GraphSnapshot>, objective: Objective) -> Self {
        let mask: Arc<[bool]> = match objective {
            Objective::NodeClassification => snapshot.mask.clone().into(),
            Objective::GraphClassification => Arc::from(vec![true]),
        };
        Self {
            key,
            snapshot,
            objective,
            mask,
        }
    }

    pub fn item_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn labels(&self) -> Arc<[usize]> {
        match &self.snapshot.labels {
            Labels::PerVertex(l) => l.clone().into(),
            Labels::Graph(c) => Arc::from(vec![*c]),
        }
    }
}

/// Mean cross-entropy over every selected item of `batch`, built on `tape`.
/// `xs` and `phis` hold the (possibly perturbed) features per batch entry.
pub fn batch_loss_on_tape(
    tape: &mut Tape,
    layers: &[LayerVars],
    cfg: &ModelConfig,
    batch: &[BatchGraph],
    indices: &[GraphIndex],
    xs: &[Var],
    phis: &[Var],
    dropout_seed: Option<u64>,
) -> Result<Var> {
    let total: usize = batch.iter().map(BatchGraph::item_count).sum();
    if batch.is_empty() || total == 0 {
        return Err(GnnError::EmptyBatch);
    }
    let mut acc: Option<Var> = None;
    for (i, entry) in batch.iter().enumerate() {
        let count = entry.item_count();
        if count == 0 {
            continue;
        }
        let seed = dropout_seed.map(|s| mix_seed(s, entry.key.task_id as u64, entry.key.graph as u64 + 1));
        let logits = forward_on_tape(tape, layers, cfg, &indices[i], entry.objective, xs[i], phis[i], seed)?;
        let ce = tape.cross_entropy(logits, entry.labels(), Arc::clone(&entry.mask))?;
        let part = tape.scale(ce, count as f64 / total as f64)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, part)?,
            None => part,
        });
    }
    acc.ok_or(GnnError::EmptyBatch)
}

/// Loss value and gradients with respect to the parameters, the vertex
/// features and the edge features of every batch entry.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub value: f64,
    pub grad_w: Vec<f64>,
    pub grad_x: Vec<Tensor>,
    pub grad_phi: Vec<Tensor>,
}

/// Which adjoints [`loss_with_inputs`] should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradRequest {
    pub params: bool,
    pub inputs: bool,
}

impl GradRequest {
    pub const NONE: Self = Self {
        params: false,
        inputs: false,
    };
    pub const ALL: Self = Self {
        params: true,
        inputs: true,
    };
    pub const PARAMS: Self = Self {
        params: true,
        inputs: false,
    };
}

/// Batch loss at parameter values `values` with per-entry vertex features
/// `xs` and edge features `phis` standing in for the snapshots' own.
/// Gradients not requested come back empty.
#[allow(clippy::too_many_arguments)]
pub fn loss_with_inputs(
    values: &[f64],
    layout: &ParamLayout,
    cfg: &ModelConfig,
    batch: &[BatchGraph],
    xs: &[&Tensor],
    phis: &[&Tensor],
    want: GradRequest,
    dropout_seed: Option<u64>,
) -> Result<LossGrad> {
    if values.len() != layout.total_len() {
        return Err(GnnError::LayoutMismatch {
            expected: layout.total_len(),
            found: values.len(),
        });
    }
    if xs.len() != batch.len() || phis.len() != batch.len() {
        return Err(GnnError::ShapeMismatch("one input pair per batch entry".into()));
    }
    let mut tape = Tape::new();
    let segs: Vec<Var> = if want.params {
        param_vars(&mut tape, values, layout)
    } else {
        layout
            .segments
            .iter()
            .map(|s| {
                tape.constant(
                    Tensor::new(s.shape.clone(), values[s.offset..s.offset + s.len()].to_vec())
                        .expect("segment shape"),
                )
            })
            .collect()
    };
    let layers = layer_vars(&segs);
    let mut indices = Vec::with_capacity(batch.len());
    let mut xv = Vec::with_capacity(batch.len());
    let mut pv = Vec::with_capacity(batch.len());
    for (i, b) in batch.iter().enumerate() {
        let (x, phi) = (xs[i], phis[i]);
        if x.shape() != b.snapshot.vertex_features.shape() || phi.shape() != b.snapshot.edge_features.shape() {
            return Err(GnnError::ShapeMismatch(format!(
                "batch entry {i}: inputs {:?}/{:?} vs snapshot {:?}/{:?}",
                x.shape(),
                phi.shape(),
                b.snapshot.vertex_features.shape(),
                b.snapshot.edge_features.shape()
            )));
        }
        check_snapshot(cfg, &b.snapshot)?;
        indices.push(GraphIndex::new(&b.snapshot));
        if want.inputs {
            xv.push(tape.var(x.clone()));
            pv.push(tape.var(phi.clone()));
        } else {
            xv.push(tape.constant(x.clone()));
            pv.push(tape.constant(phi.clone()));
        }
    }
    let loss = batch_loss_on_tape(&mut tape, &layers, cfg, batch, &indices, &xv, &pv, dropout_seed)?;
    let value = tape.value(loss).item();
    if want == GradRequest::NONE {
        return Ok(LossGrad {
            value,
            grad_w: Vec::new(),
            grad_x: Vec::new(),
            grad_phi: Vec::new(),
        });
    }
    let mut grads = tape.backward(loss)?;
    Ok(LossGrad {
        value,
        grad_w: if want.params {
            flat_grad(&grads, &segs, values.len())
        } else {
            Vec::new()
        },
        grad_x: if want.inputs {
            xv.iter().map(|&v| grads.take(v)).collect()
        } else {
            Vec::new()
        },
        grad_phi: if want.inputs {
            pv.iter().map(|&v| grads.take(v)).collect()
        } else {
            Vec::new()
        },
    })
}

fn own_inputs(batch: &[BatchGraph]) -> (Vec<&Tensor>, Vec<&Tensor>) {
    (
        batch.iter().map(|b| &b.snapshot.vertex_features).collect(),
        batch.iter().map(|b| &b.snapshot.edge_features).collect(),
    )
}

pub fn loss_and_grad(
    params: &ParamVector,
    cfg: &ModelConfig,
    batch: &[BatchGraph],
    dropout_seed: Option<u64>,
) -> Result<LossGrad> {
    check_layout(params, cfg)?;
    let (xs, phis) = own_inputs(batch);
    loss_with_inputs(&params.values, &params.layout, cfg, batch, &xs, &phis, GradRequest::ALL, dropout_seed)
}

/// Mean masked cross-entropy of the batch (eval mode, no gradients).
pub fn loss(params: &ParamVector, cfg: &ModelConfig, batch: &[BatchGraph]) -> Result<f64> {
    check_layout(params, cfg)?;
    let (xs, phis) = own_inputs(batch);
    Ok(loss_with_inputs(&params.values, &params.layout, cfg, batch, &xs, &phis, GradRequest::NONE, None)?.value)
}

/// Parameter checkpoint document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub layout: ParamLayout,
    pub values: Vec<f64>,
}

pub fn save_checkpoint(params: &ParamVector, cfg: &ModelConfig, path: impl AsRef<Path>) -> std::io::Result<()> {
    let doc = Checkpoint {
        config: cfg.clone(),
        layout: (*params.layout).clone(),
        values: params.values.clone(),
    };
    let text = to_canonical_string(&doc).map_err(std::io::Error::other)?;
    std::fs::write(path, text)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> std::io::Result<(ParamVector, ModelConfig)> {
    let text = std::fs::read_to_string(path)?;
    let doc: Checkpoint = serde_json::from_str(&text).map_err(std::io::Error::other)?;
    let params = ParamVector::new(doc.values, Arc::new(doc.layout)).map_err(std::io::Error::other)?;
    check_layout(&params, &doc.config).map_err(std::io::Error::other)?;
    Ok((params, doc.config))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            nlays: 2,
            hc: 3,
            drop: 0.0,
            leaky_slope: 0.2,
            in_dim: 2,
            out_dim: 2,
            edge_dim: 1,
        }
    }

    #[test]
    fn one_by_one_weight_within_glorot_bound() {
        let c = ModelConfig {
            nlays: 1,
            hc: 1,
            drop: 0.0,
            leaky_slope: 0.2,
            in_dim: 1,
            out_dim: 1,
            edge_dim: 1,
        };
        for seed in 0..50 {
            let p = init_params(&c, seed).unwrap();
            assert!(p.values[0].abs() <= 3f64.sqrt());
        }
    }

    #[test]
    fn init_is_seeded_and_biases_zero() {
        let a = init_params(&cfg(), 4).unwrap();
        assert_eq!(a, init_params(&cfg(), 4).unwrap());
        for s in a.layout.segments.iter().filter(|s| s.name == "bias") {
            assert!(a.values[s.offset..s.offset + s.len()].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn segments_are_contiguous() {
        let layout = ParamLayout::for_model(&cfg());
        let mut expect = 0;
        for s in &layout.segments {
            assert_eq!(s.offset, expect);
            expect += s.len();
        }
        assert_eq!(expect, layout.total_len());
    }

    #[test]
    fn flatten_roundtrip_is_bitwise() {
        let p = init_params(&cfg(), 11).unwrap();
        let layers = unflatten(&p, &cfg()).unwrap();
        assert_eq!(flatten(&layers, &cfg()).unwrap(), p);
    }

    #[test]
    fn length_mismatch_detected() {
        let p = init_params(&cfg(), 1).unwrap();
        let short = ParamVector {
            values: p.values[1..].to_vec(),
            layout: p.layout.clone(),
        };
        assert!(matches!(unflatten(&short, &cfg()), Err(GnnError::LayoutMismatch { .. })));
        assert!(matches!(
            ParamVector::new(vec![0.0; 3], p.layout.clone()),
            Err(GnnError::LayoutMismatch { .. })
        ));
    }

    #[test]
    fn single_vertex_self_loop_gives_wx() {
        let c = ModelConfig {
            nlays: 1,
            hc: 2,
            drop: 0.0,
            leaky_slope: 0.2,
            in_dim: 2,
            out_dim: 2,
            edge_dim: 1,
        };
        let mut layers = unflatten(&init_params(&c, 0).unwrap(), &c).unwrap();
        layers[0].weight = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let p = flatten(&layers, &c).unwrap();
        let s = GraphSnapshot {
            vertex_ids: vec![0],
            edges: vec![(0, 0)],
            vertex_features: Tensor::from_rows(&[vec![0.7, -1.3]]).unwrap(),
            edge_features: Tensor::filled(&[1, 1], 1.0),
            labels: Labels::PerVertex(vec![0]),
            mask: vec![true],
        };
        let out = forward(&p, &c, &s, Objective::NodeClassification, None).unwrap();
        assert_eq!(out.data(), &[0.7, -1.3]);
    }

    #[test]
    fn uniform_logits_loss_is_ln_c() {
        let c = ModelConfig {
            nlays: 1,
            hc: 1,
            drop: 0.0,
            leaky_slope: 0.2,
            in_dim: 1,
            out_dim: 3,
            edge_dim: 1,
        };
        let p = init_params(&c, 0).unwrap();
        let zero = p.zeros_like();
        let s = Arc::new(GraphSnapshot {
            vertex_ids: vec![0, 1],
            edges: vec![(0, 1)],
            vertex_features: Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap(),
            edge_features: Tensor::filled(&[1, 1], 1.0),
            labels: Labels::PerVertex(vec![0, 2]),
            mask: vec![true, true],
        });
        let b = BatchGraph::full(SnapshotKey { task_id: 0, graph: 0 }, s, Objective::NodeClassification);
        let l = loss(&zero, &c, &[b]).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn eval_mode_is_deterministic_and_dropout_seeded() {
        let mut c = cfg();
        c.drop = 0.5;
        let p = init_params(&c, 2).unwrap();
        let s = GraphSnapshot {
            vertex_ids: vec![0, 1, 2],
            edges: vec![(0, 1), (1, 2), (2, 0)],
            vertex_features: Tensor::from_rows(&[vec![1.0, 0.5], vec![-1.0, 0.2], vec![0.3, 0.3]]).unwrap(),
            edge_features: Tensor::filled(&[3, 1], 1.0),
            labels: Labels::PerVertex(vec![0, 1, 0]),
            mask: vec![true; 3],
        };
        let nc = Objective::NodeClassification;
        assert_eq!(forward(&p, &c, &s, nc, None).unwrap(), forward(&p, &c, &s, nc, None).unwrap());
        assert_eq!(
            forward(&p, &c, &s, nc, Some(5)).unwrap(),
            forward(&p, &c, &s, nc, Some(5)).unwrap()
        );
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let p = init_params(&cfg(), 8).unwrap();
        save_checkpoint(&p, &cfg(), &path).unwrap();
        let (q, c) = load_checkpoint(&path).unwrap();
        assert_eq!(q, p);
        assert_eq!(c, cfg());
    }
}
