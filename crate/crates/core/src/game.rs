//! The min-max cost `H = J(x,φ,w) + β₁J(x+Δx,φ,w) + β₂J(x,φ+Δφ,w) + β₃J(x,φ,w+Δw)`,
//! the pooled maximizing player `u = (Δx, Δφ, Δw)`, norm-ball projection and
//! the nested ascent/descent trainer.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::canonical::format_float;
use crate::gnn::{loss_with_inputs, BatchGraph, GnnError, GradRequest, ModelConfig, ParamLayout, ParamVector};
use crate::graph::{SnapshotKey, Task};
use crate::replay::{new_task_data, sample_joint, to_batch, ReplayBuffer, ReplayError, ReplayItem};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GameError {
    #[error("invalid game config: {0}")]
    InvalidConfig(String),
    #[error("task {0} has no training items")]
    EmptyTask(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite cost in task {task_id} at outer iteration {outer_j}, inner step {inner_i}")]
    NonFinite {
        task_id: usize,
        outer_j: usize,
        inner_i: usize,
    },
    #[error(transparent)]
    Model(#[from] GnnError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
}

pub type Result<T> = std::result::Result<T, GameError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Optimizer {
    /// Plain SGDA with rates `α_u/√ζ` and `α_w/√ρ`.
    Sgd,
    /// Adam on `w` at the base rate `α_w`; the ascent stays plain SGA.
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    /// Ascent steps per outer iteration. Zero switches the ascent off.
    pub zeta: usize,
    pub rho: usize,
    pub alpha_u: f64,
    pub alpha_w: f64,
    pub r_x: f64,
    pub r_phi: f64,
    pub r_w: f64,
    pub batch_b: usize,
    pub buffer_capacity: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// False once the edge-feature player has been removed.
    pub phi_player: bool,
    /// Seeded training-mode dropout inside the cost.
    pub dropout: bool,
}

impl Default for GameConfig {
    fn default() -> Self {
        Self {
            beta1: 1.0,
            beta2: 1.0,
            beta3: 1.0,
            zeta: 10,
            rho: 1000,
            alpha_u: 1e-7,
            alpha_w: 1e-3,
            r_x: 1.0,
            r_phi: 1.0,
            r_w: 1.0,
            batch_b: 32,
            buffer_capacity: ReplayBuffer::DEFAULT_CAPACITY,
            seed: 0,
            optimizer: Optimizer::Sgd,
            phi_player: true,
            dropout: true,
        }
    }
}

impl GameConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GameError::InvalidConfig(m));
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2), ("beta3", self.beta3)] {
            if !(0.0..=1.0).contains(&b) {
                return bad(format!("{name} = {b} outside [0, 1]"));
            }
        }
        if self.rho == 0 {
            return bad("rho must be at least 1".into());
        }
        for (name, v) in [("alpha_u", self.alpha_u), ("alpha_w", self.alpha_w)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be positive"));
            }
        }
        for (name, v) in [("r_x", self.r_x), ("r_phi", self.r_phi), ("r_w", self.r_w)] {
            if !(v > 0.0) {
                return bad(format!("{name} = {v} must be positive"));
            }
        }
        if self.batch_b < 2 {
            return bad(format!("batch_b = {} must be at least 2", self.batch_b));
        }
        Ok(())
    }

    pub fn betas(&self) -> Betas {
        Betas {
            b1: self.beta1,
            b2: if self.phi_player { self.beta2 } else { 0.0 },
            b3: self.beta3,
        }
    }

    pub fn beta_max(&self) -> f64 {
        let b = self.betas();
        b.b1.max(b.b2).max(b.b3)
    }

    pub fn radii(&self) -> Radii {
        Radii {
            r_x: self.r_x,
            r_phi: self.r_phi,
            r_w: self.r_w,
        }
    }

    /// Constant ascent rate for one inner loop.
    pub fn ascent_rate(&self) -> f64 {
        self.alpha_u / (self.zeta.max(1) as f64).sqrt()
    }

    /// Constant descent rate within a task.
    pub fn descent_rate(&self) -> f64 {
        match self.optimizer {
            Optimizer::Sgd => self.alpha_w / (self.rho as f64).sqrt(),
            Optimizer::Adam => self.alpha_w,
        }
    }
}

/// Removes the edge-feature player: `β₂ = 0` and `Δφ` never moves.
pub fn reduce_no_edge(config: &GameConfig) -> GameConfig {
    GameConfig {
        beta2: 0.0,
        phi_player: false,
        ..config.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Betas {
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
}

impl Betas {
    pub const ZERO: Self = Self {
        b1: 0.0,
        b2: 0.0,
        b3: 0.0,
    };

    pub fn as_array(&self) -> [f64; 3] {
        [self.b1, self.b2, self.b3]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Radii {
    pub r_x: f64,
    pub r_phi: f64,
    pub r_w: f64,
}

impl Radii {
    pub fn uniform(r: f64) -> Self {
        Self {
            r_x: r,
            r_phi: r,
            r_w: r,
        }
    }
}

/// The maximizing player. `Δx` and `Δφ` hold one tensor per snapshot that
/// has appeared in a minibatch; missing entries are zero.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlayerU {
    pub delta_x: BTreeMap<SnapshotKey, Tensor>,
    pub delta_phi: BTreeMap<SnapshotKey, Tensor>,
    pub delta_w: Vec<f64>,
}

fn map_norm_sq(m: &BTreeMap<SnapshotKey, Tensor>) -> f64 {
    m.values().map(Tensor::norm_sq).sum()
}

fn map_axpy(dst: &mut BTreeMap<SnapshotKey, Tensor>, a: f64, src: &BTreeMap<SnapshotKey, Tensor>) -> Result<()> {
    for (k, g) in src {
        match dst.get_mut(k) {
            Some(t) => t
                .add_assign_scaled(a, g)
                .map_err(|e| GameError::ShapeMismatch(format!("{k:?}: {e}")))?,
            None => {
                dst.insert(*k, g.scaled(a));
            }
        }
    }
    Ok(())
}

impl PlayerU {
    pub fn zeros(w_len: usize) -> Self {
        Self {
            delta_x: BTreeMap::new(),
            delta_phi: BTreeMap::new(),
            delta_w: vec![0.0; w_len],
        }
    }

    /// Euclidean norms of the `Δx`, `Δφ` and `Δw` blocks.
    pub fn block_norms(&self) -> [f64; 3] {
        [
            map_norm_sq(&self.delta_x).sqrt(),
            map_norm_sq(&self.delta_phi).sqrt(),
            self.delta_w.iter().map(|v| v * v).sum::<f64>().sqrt(),
        ]
    }

    pub fn norm_sq(&self) -> f64 {
        self.block_norms().iter().map(|n| n * n).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// `self += a * other`, creating entries absent from `self`.
    pub fn axpy(&mut self, a: f64, other: &PlayerU) -> Result<()> {
        map_axpy(&mut self.delta_x, a, &other.delta_x)?;
        map_axpy(&mut self.delta_phi, a, &other.delta_phi)?;
        if self.delta_w.is_empty() {
            self.delta_w = vec![0.0; other.delta_w.len()];
        }
        if !other.delta_w.is_empty() {
            if other.delta_w.len() != self.delta_w.len() {
                return Err(GameError::ShapeMismatch(format!(
                    "delta_w lengths {} vs {}",
                    self.delta_w.len(),
                    other.delta_w.len()
                )));
            }
            for (d, s) in self.delta_w.iter_mut().zip(&other.delta_w) {
                *d += a * s;
            }
        }
        Ok(())
    }

    /// `‖self − other‖`, treating missing entries as zero.
    pub fn distance(&self, other: &PlayerU) -> Result<f64> {
        let mut d = self.clone();
        d.axpy(-1.0, other)?;
        Ok(d.norm())
    }
}

fn ball_factor(norm: f64, radius: f64) -> f64 {
    if norm <= radius {
        1.0
    } else {
        radius / norm
    }
}

fn shrink_into_ball(values: &mut [f64], radius: f64) {
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut f = ball_factor(norm, radius);
    if f == 1.0 {
        return;
    }
    let orig = values.to_vec();
    loop {
        for (v, o) in values.iter_mut().zip(&orig) {
            *v = o * f;
        }
        if values.iter().map(|v| v * v).sum::<f64>().sqrt() <= radius {
            break;
        }
        // rounding left the block a hair outside; shrink by one ulp-ish step
        f *= 1.0 - f64::EPSILON;
    }
}

fn shrink_map(m: &mut BTreeMap<SnapshotKey, Tensor>, radius: f64) {
    let mut flat: Vec<f64> = m.values().flat_map(|t| t.data().iter().copied()).collect();
    shrink_into_ball(&mut flat, radius);
    let mut at = 0;
    for t in m.values_mut() {
        let n = t.len();
        t.data_mut().copy_from_slice(&flat[at..at + n]);
        at += n;
    }
}

/// Euclidean projection of each block onto its norm ball: scaling by
/// `min(1, r/‖block‖)`. Blocks inside their ball are returned unchanged.
pub fn project(u: &PlayerU, radii: &Radii) -> PlayerU {
    let mut out = u.clone();
    shrink_map(&mut out.delta_x, radii.r_x);
    shrink_map(&mut out.delta_phi, radii.r_phi);
    shrink_into_ball(&mut out.delta_w, radii.r_w);
    out
}

/// Value and gradients of `H` at one `(u, w)` on one minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub h: f64,
    /// `J` at the unperturbed point and under each of the three perturbations.
    pub terms: [f64; 4],
    pub grad_u: PlayerU,
    pub grad_w: Vec<f64>,
    /// `‖∇_{Δx} J(x+Δx)‖`, `‖∇_{Δφ} J(φ+Δφ)‖`, `‖∇_{Δw} J(w+Δw)‖`, unscaled by β.
    pub u_term_norms: [f64; 3],
    /// `‖∇_w J_t‖` for each of the four terms, unscaled by β.
    pub w_term_norms: [f64; 4],
    pub betas: Betas,
}

impl Evaluation {
    pub fn g_u_norm(&self) -> f64 {
        self.grad_u.norm()
    }

    pub fn g_w_norm(&self) -> f64 {
        norm(&self.grad_w)
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// A min-max problem the trainer can play: `u` ascends, `w` descends.
pub trait SaddleProblem {
    type Batch;

    fn sample_batch<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Self::Batch>;

    /// The whole dataset as one batch.
    fn full_batch(&self) -> Result<Self::Batch>;

    /// `H` and its gradients; `seed` drives any stochastic layers.
    fn evaluate(&self, w: &[f64], u: &PlayerU, batch: &Self::Batch, seed: u64) -> Result<Evaluation>;

    /// `H` alone.
    fn value(&self, w: &[f64], u: &PlayerU, batch: &Self::Batch, seed: u64) -> Result<f64> {
        Ok(self.evaluate(w, u, batch, seed)?.h)
    }

    /// The starting point of every inner loop.
    fn zero_u(&self, w_len: usize) -> PlayerU {
        PlayerU::zeros(w_len)
    }
}

/// `H` over GNN minibatches.
#[derive(Debug, Clone)]
pub struct GnnCost {
    pub model: ModelConfig,
    pub layout: Arc<ParamLayout>,
    pub betas: Betas,
    pub dropout: bool,
}

impl GnnCost {
    pub fn new(model: &ModelConfig, config: &GameConfig) -> Self {
        Self {
            model: model.clone(),
            layout: Arc::new(ParamLayout::for_model(model)),
            betas: config.betas(),
            dropout: config.dropout,
        }
    }

    fn dropout_seed(&self, seed: u64) -> Option<u64> {
        (self.dropout && self.model.drop > 0.0).then_some(seed)
    }

    /// Value and gradients of `H`. Terms whose β is zero are not evaluated.
    pub fn evaluate(&self, w: &[f64], u: &PlayerU, batch: &[BatchGraph], seed: u64) -> Result<Evaluation> {
        self.run(w, u, batch, seed, true)
    }

    pub fn value(&self, w: &[f64], u: &PlayerU, batch: &[BatchGraph], seed: u64) -> Result<f64> {
        Ok(self.run(w, u, batch, seed, false)?.h)
    }

    fn run(&self, w: &[f64], u: &PlayerU, batch: &[BatchGraph], seed: u64, grads: bool) -> Result<Evaluation> {
        let drop = self.dropout_seed(seed);
        let xs0: Vec<&Tensor> = batch.iter().map(|b| &b.snapshot.vertex_features).collect();
        let phis0: Vec<&Tensor> = batch.iter().map(|b| &b.snapshot.edge_features).collect();
        let (mode_w, mode_all) = if grads {
            (GradRequest::PARAMS, GradRequest::ALL)
        } else {
            (GradRequest::NONE, GradRequest::NONE)
        };
        let run = |vals: &[f64], xs: &[&Tensor], phis: &[&Tensor], want| {
            loss_with_inputs(vals, &self.layout, &self.model, batch, xs, phis, want, drop)
        };
        let Betas { b1, b2, b3 } = self.betas;
        let mut grad_u = PlayerU::zeros(if grads { w.len() } else { 0 });
        let mut terms = [0.0; 4];
        let mut u_norms = [0.0; 3];
        let mut w_norms = [0.0; 4];

        let t0 = run(w, &xs0, &phis0, mode_w)?;
        terms[0] = t0.value;
        let mut grad_w = t0.grad_w;
        w_norms[0] = norm(&grad_w);
        let mut h = t0.value;

        let perturbed = |m: &BTreeMap<SnapshotKey, Tensor>, own: &[&Tensor]| -> Result<Vec<Tensor>> {
            batch
                .iter()
                .zip(own)
                .map(|(b, &t)| match m.get(&b.key) {
                    Some(d) => t.axpy(1.0, d).map_err(|e| GameError::ShapeMismatch(format!("{:?}: {e}", b.key))),
                    None => Ok(t.clone()),
                })
                .collect()
        };

        if b1 != 0.0 {
            let xs1 = perturbed(&u.delta_x, &xs0)?;
            let xr: Vec<&Tensor> = xs1.iter().collect();
            let t1 = run(w, &xr, &phis0, mode_all)?;
            terms[1] = t1.value;
            h += b1 * t1.value;
            if grads {
                add_scaled(&mut grad_w, b1, &t1.grad_w);
                w_norms[1] = norm(&t1.grad_w);
                u_norms[0] = t1.grad_x.iter().map(Tensor::norm_sq).sum::<f64>().sqrt();
                for (b, g) in batch.iter().zip(t1.grad_x) {
                    grad_u.delta_x.insert(b.key, g.scaled(b1));
                }
            }
        }
        if b2 != 0.0 {
            let phis2 = perturbed(&u.delta_phi, &phis0)?;
            let pr: Vec<&Tensor> = phis2.iter().collect();
            let t2 = run(w, &xs0, &pr, mode_all)?;
            terms[2] = t2.value;
            h += b2 * t2.value;
            if grads {
                add_scaled(&mut grad_w, b2, &t2.grad_w);
                w_norms[2] = norm(&t2.grad_w);
                u_norms[1] = t2.grad_phi.iter().map(Tensor::norm_sq).sum::<f64>().sqrt();
                for (b, g) in batch.iter().zip(t2.grad_phi) {
                    grad_u.delta_phi.insert(b.key, g.scaled(b2));
                }
            }
        }
        if b3 != 0.0 {
            let shifted: Vec<f64> = if u.delta_w.is_empty() {
                w.to_vec()
            } else {
                if u.delta_w.len() != w.len() {
                    return Err(GameError::ShapeMismatch(format!(
                        "delta_w has {} entries, w has {}",
                        u.delta_w.len(),
                        w.len()
                    )));
                }
                w.iter().zip(&u.delta_w).map(|(a, d)| a + d).collect()
            };
            let t3 = run(&shifted, &xs0, &phis0, mode_w)?;
            terms[3] = t3.value;
            h += b3 * t3.value;
            if grads {
                add_scaled(&mut grad_w, b3, &t3.grad_w);
                w_norms[3] = norm(&t3.grad_w);
                u_norms[2] = w_norms[3];
                grad_u.delta_w = t3.grad_w.iter().map(|g| b3 * g).collect();
            }
        }
        Ok(Evaluation {
            h,
            terms,
            grad_u,
            grad_w,
            u_term_norms: u_norms,
            w_term_norms: w_norms,
            betas: self.betas,
        })
    }
}

fn add_scaled(dst: &mut [f64], a: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

/// `H` on a GNN minibatch.
pub fn h_cost(
    w: &ParamVector,
    u: &PlayerU,
    batch: &[BatchGraph],
    model: &ModelConfig,
    config: &GameConfig,
    dropout_seed: u64,
) -> Result<f64> {
    GnnCost::new(model, config).value(&w.values, u, batch, dropout_seed)
}

/// The game of one task: minibatches mix replayed items with the new task.
pub struct GnnGame<'a> {
    pub cost: GnnCost,
    pub buffer: &'a ReplayBuffer,
    pub new_data: &'a [ReplayItem],
    pub batch_b: usize,
}

impl SaddleProblem for GnnGame<'_> {
    type Batch = Vec<BatchGraph>;

    fn sample_batch<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Self::Batch> {
        Ok(to_batch(&sample_joint(self.buffer, self.new_data, self.batch_b, rng)?))
    }

    fn full_batch(&self) -> Result<Self::Batch> {
        let mut all = self.buffer.items().to_vec();
        all.extend_from_slice(self.new_data);
        Ok(to_batch(&all))
    }

    fn evaluate(&self, w: &[f64], u: &PlayerU, batch: &Self::Batch, seed: u64) -> Result<Evaluation> {
        self.cost.evaluate(w, u, batch, seed)
    }

    fn value(&self, w: &[f64], u: &PlayerU, batch: &Self::Batch, seed: u64) -> Result<f64> {
        self.cost.value(w, u, batch, seed)
    }
}

/// A fixed set of GNN batch entries played with uniform minibatches of
/// items, without replay. Used by the diagnostics on small snapshots.
pub struct FixedGnnGame {
    pub cost: GnnCost,
    pub items: Vec<ReplayItem>,
    pub batch_b: usize,
}

impl SaddleProblem for FixedGnnGame {
    type Batch = Vec<BatchGraph>;

    fn sample_batch<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Self::Batch> {
        let empty = ReplayBuffer::new(0);
        Ok(to_batch(&sample_joint(&empty, &self.items, self.batch_b, rng)?))
    }

    fn full_batch(&self) -> Result<Self::Batch> {
        Ok(to_batch(&self.items))
    }

    fn evaluate(&self, w: &[f64], u: &PlayerU, batch: &Self::Batch, seed: u64) -> Result<Evaluation> {
        self.cost.evaluate(w, u, batch, seed)
    }

    fn value(&self, w: &[f64], u: &PlayerU, batch: &Self::Batch, seed: u64) -> Result<f64> {
        self.cost.value(w, u, batch, seed)
    }
}

fn sample_indices<R: Rng + ?Sized>(n: usize, b: usize, rng: &mut R) -> Vec<usize> {
    let mut idx = rand::seq::index::sample(rng, n, b.min(n)).into_vec();
    idx.sort_unstable();
    idx
}

/// `J(x, w) = ½‖w − c‖² + mean_i x_iᵀw` over samples `x_i` (no edge
/// features). `Δx_i` lives under key `(0, i)` as a `1 × d` row.
#[derive(Debug, Clone)]
pub struct QuadraticToy {
    pub c: Vec<f64>,
    pub xs: Vec<Vec<f64>>,
    pub betas: Betas,
    pub batch_b: usize,
}

impl QuadraticToy {
    fn key(i: usize) -> SnapshotKey {
        SnapshotKey { task_id: 0, graph: i }
    }

    fn dx(&self, u: &PlayerU, i: usize) -> Vec<f64> {
        u.delta_x
            .get(&Self::key(i))
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; self.c.len()])
    }

    /// `J` at `w` with sample features shifted by `shift(i)`.
    fn j(&self, w: &[f64], batch: &[usize], shift: impl Fn(usize) -> Vec<f64>) -> (f64, Vec<f64>) {
        let n = batch.len() as f64;
        let d = self.c.len();
        let mut xbar = vec![0.0; d];
        for &i in batch {
            let s = shift(i);
            for k in 0..d {
                xbar[k] += (self.xs[i][k] + s[k]) / n;
            }
        }
        let quad: f64 = 0.5 * w.iter().zip(&self.c).map(|(a, c)| (a - c) * (a - c)).sum::<f64>();
        let lin: f64 = w.iter().zip(&xbar).map(|(a, x)| a * x).sum();
        let grad = (0..d).map(|k| w[k] - self.c[k] + xbar[k]).collect();
        (quad + lin, grad)
    }
}

impl SaddleProblem for QuadraticToy {
    type Batch = Vec<usize>;

    fn sample_batch<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Self::Batch> {
        Ok(sample_indices(self.xs.len(), self.batch_b, rng))
    }

    fn full_batch(&self) -> Result<Self::Batch> {
        Ok((0..self.xs.len()).collect())
    }

    fn evaluate(&self, w: &[f64], u: &PlayerU, batch: &Self::Batch, _seed: u64) -> Result<Evaluation> {
        let d = self.c.len();
        if w.len() != d {
            return Err(GameError::ShapeMismatch(format!("w has {} entries, expected {d}", w.len())));
        }
        let zero = |_| vec![0.0; d];
        let Betas { b1, b2, b3 } = self.betas;
        let (j0, g0) = self.j(w, batch, zero);
        let (j1, g1) = self.j(w, batch, |i| self.dx(u, i));
        let dw = if u.delta_w.is_empty() { vec![0.0; d] } else { u.delta_w.clone() };
        let shifted: Vec<f64> = w.iter().zip(&dw).map(|(a, b)| a + b).collect();
        let (j3, g3) = self.j(&shifted, batch, zero);
        let mut grad_u = PlayerU::zeros(d);
        let n = batch.len() as f64;
        let per_sample: Vec<f64> = w.iter().map(|v| v / n).collect();
        for &i in batch {
            let t = Tensor::new(vec![1, d], per_sample.iter().map(|v| b1 * v).collect()).expect("row shape");
            grad_u.delta_x.insert(Self::key(i), t);
        }
        grad_u.delta_w = g3.iter().map(|g| b3 * g).collect();
        let grad_w: Vec<f64> = (0..d).map(|k| g0[k] + b1 * g1[k] + b2 * g0[k] + b3 * g3[k]).collect();
        Ok(Evaluation {
            h: j0 + b1 * j1 + b2 * j0 + b3 * j3,
            terms: [j0, j1, j0, j3],
            grad_u,
            grad_w,
            u_term_norms: [norm(&per_sample) * n.sqrt(), 0.0, norm(&g3)],
            w_term_norms: [norm(&g0), norm(&g1), norm(&g0), norm(&g3)],
            betas: self.betas,
        })
    }
}

/// `h(u, w) = β(−½‖u − s(w)‖²) + ½‖w − c‖²` with `s(w) = A w + s0`.
/// `u` lives in the `Δx` block under key `(0, 0)`. The Stackelberg point
/// is `w* = c`, `u* = s(c)`.
#[derive(Debug, Clone)]
pub struct SaddleToy {
    pub beta: f64,
    pub a: Vec<Vec<f64>>,
    pub s0: Vec<f64>,
    pub c: Vec<f64>,
}

impl SaddleToy {
    pub const KEY: SnapshotKey = SnapshotKey { task_id: 0, graph: 0 };

    pub fn s(&self, w: &[f64]) -> Vec<f64> {
        self.a
            .iter()
            .zip(&self.s0)
            .map(|(row, s)| s + row.iter().zip(w).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    }

    pub fn u_of(&self, v: Vec<f64>) -> PlayerU {
        let mut u = PlayerU::zeros(0);
        let n = v.len();
        u.delta_x.insert(Self::KEY, Tensor::new(vec![1, n], v).expect("row shape"));
        u
    }

    pub fn u_vec(&self, u: &PlayerU) -> Vec<f64> {
        u.delta_x
            .get(&Self::KEY)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; self.s0.len()])
    }

    pub fn analytic_saddle(&self) -> (Vec<f64>, Vec<f64>) {
        (self.s(&self.c), self.c.clone())
    }
}

impl SaddleProblem for SaddleToy {
    type Batch = ();

    fn sample_batch<R: Rng + ?Sized>(&self, _rng: &mut R) -> Result<()> {
        Ok(())
    }

    fn full_batch(&self) -> Result<()> {
        Ok(())
    }

    fn zero_u(&self, _w_len: usize) -> PlayerU {
        self.u_of(vec![0.0; self.s0.len()])
    }

    fn evaluate(&self, w: &[f64], u: &PlayerU, _batch: &(), _seed: u64) -> Result<Evaluation> {
        let uv = self.u_vec(u);
        let s = self.s(w);
        let r: Vec<f64> = uv.iter().zip(&s).map(|(a, b)| a - b).collect();
        let quad: f64 = 0.5 * w.iter().zip(&self.c).map(|(a, c)| (a - c) * (a - c)).sum::<f64>();
        let adv = -0.5 * r.iter().map(|v| v * v).sum::<f64>();
        let grad_u_vec: Vec<f64> = r.iter().map(|v| -self.beta * v).collect();
        // d/dw of −½‖u − Aw − s0‖² is Aᵀ(u − s(w))
        let mut grad_w: Vec<f64> = w.iter().zip(&self.c).map(|(a, c)| a - c).collect();
        for (row, rv) in self.a.iter().zip(&r) {
            for (g, a) in grad_w.iter_mut().zip(row) {
                *g += self.beta * a * rv;
            }
        }
        let g_quad: Vec<f64> = w.iter().zip(&self.c).map(|(a, c)| a - c).collect();
        let u_norm = norm(&r);
        Ok(Evaluation {
            h: self.beta * adv + quad,
            terms: [quad, adv, 0.0, 0.0],
            grad_u: self.u_of(grad_u_vec),
            w_term_norms: [norm(&g_quad), norm(&grad_w), 0.0, 0.0],
            grad_w,
            u_term_norms: [u_norm, 0.0, 0.0],
            betas: Betas {
                b1: self.beta,
                b2: 0.0,
                b3: 0.0,
            },
        })
    }
}

/// Adds `−λ/2 ‖u‖² + μ/2 ‖w‖²` to the wrapped cost, making the inner
/// maximum interior and the outer minimum attained.
pub struct PenalizedAdversary<P> {
    pub inner: P,
    pub lambda: f64,
    pub mu: f64,
}

impl<P: SaddleProblem> SaddleProblem for PenalizedAdversary<P> {
    type Batch = P::Batch;

    fn sample_batch<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Self::Batch> {
        self.inner.sample_batch(rng)
    }

    fn full_batch(&self) -> Result<Self::Batch> {
        self.inner.full_batch()
    }

    fn zero_u(&self, w_len: usize) -> PlayerU {
        self.inner.zero_u(w_len)
    }

    fn evaluate(&self, w: &[f64], u: &PlayerU, batch: &Self::Batch, seed: u64) -> Result<Evaluation> {
        let mut e = self.inner.evaluate(w, u, batch, seed)?;
        e.h += 0.5 * (self.mu * norm(w).powi(2) - self.lambda * u.norm_sq());
        e.grad_u.axpy(-self.lambda, u)?;
        e.grad_w.iter_mut().zip(w).for_each(|(g, x)| *g += self.mu * x);
        Ok(e)
    }

    fn value(&self, w: &[f64], u: &PlayerU, batch: &Self::Batch, seed: u64) -> Result<f64> {
        Ok(self.inner.value(w, u, batch, seed)? + 0.5 * (self.mu * norm(w).powi(2) - self.lambda * u.norm_sq()))
    }
}

/// `u' = project(u + lr · ĝ_u)`.
pub fn ascent_update(u: &PlayerU, grad_u: &PlayerU, lr: f64, radii: &Radii) -> Result<PlayerU> {
    let mut next = u.clone();
    next.axpy(lr, grad_u)?;
    Ok(project(&next, radii))
}

/// `w' = w − lr · ĝ_w`.
pub fn descent_update(w: &[f64], grad_w: &[f64], lr: f64) -> Vec<f64> {
    w.iter().zip(grad_w).map(|(a, g)| a - lr * g).collect()
}

/// One projected ascent step on `u` with `w` held fixed.
pub fn ascent_step<P: SaddleProblem>(
    problem: &P,
    u: &PlayerU,
    w: &[f64],
    batch: &P::Batch,
    lr: f64,
    radii: &Radii,
    seed: u64,
) -> Result<(PlayerU, Evaluation)> {
    let e = problem.evaluate(w, u, batch, seed)?;
    Ok((ascent_update(u, &e.grad_u, lr, radii)?, e))
}

/// One descent step on `w` with `u` held fixed.
pub fn descent_step<P: SaddleProblem>(
    problem: &P,
    w: &[f64],
    u: &PlayerU,
    batch: &P::Batch,
    lr: f64,
    seed: u64,
) -> Result<(Vec<f64>, Evaluation)> {
    let e = problem.evaluate(w, u, batch, seed)?;
    Ok((descent_update(w, &e.grad_w, lr), e))
}

/// Standard Adam moments for the descent player.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, w: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..w.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            w[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

/// One logged evaluation. Ascent rows have `inner_i < ζ`; the descent row
/// of each outer iteration has `inner_i = ζ`.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub task_id: usize,
    pub outer_j: usize,
    pub inner_i: usize,
    pub descent: bool,
    pub h_cost: f64,
    pub g_u_norm: f64,
    pub g_w_norm: f64,
    pub u_term_norms: [f64; 3],
    pub w_term_norms: [f64; 4],
    pub betas: Betas,
    /// Full-batch `‖g_u‖²` / `‖g_w‖²` at the same point, when probing.
    pub probe_g_u_sq: Option<f64>,
    pub probe_g_w_sq: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
}

impl TrainTrace {
    pub fn inner_records(&self) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter().filter(|r| !r.descent)
    }

    pub fn outer_records(&self) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter().filter(|r| r.descent)
    }

    /// Running minimum of `‖ĝ_u‖²` over the ascent rows.
    pub fn running_min_g_u_sq(&self) -> Vec<f64> {
        running_min(self.inner_records().map(|r| r.g_u_norm * r.g_u_norm))
    }

    /// Running minimum of `‖ĝ_w‖²` over the descent rows.
    pub fn running_min_g_w_sq(&self) -> Vec<f64> {
        running_min(self.outer_records().map(|r| r.g_w_norm * r.g_w_norm))
    }

    pub fn extend(&mut self, other: TrainTrace) {
        self.records.extend(other.records);
    }

    /// CSV with columns `task_id,outer_j,inner_i,h_cost,g_u_norm,g_w_norm`.
    pub fn write_csv<W: Write>(&self, out: W) -> std::result::Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["task_id", "outer_j", "inner_i", "h_cost", "g_u_norm", "g_w_norm"])?;
        for r in &self.records {
            w.write_record([
                r.task_id.to_string(),
                r.outer_j.to_string(),
                r.inner_i.to_string(),
                format_float(r.h_cost),
                format_float(r.g_u_norm),
                format_float(r.g_w_norm),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn running_min(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut best = f64::INFINITY;
    values
        .map(|v| {
            best = best.min(v);
            best
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SgdaOutcome {
    pub w: Vec<f64>,
    pub u: PlayerU,
    pub trace: TrainTrace,
}

fn record(task_id: usize, outer_j: usize, inner_i: usize, descent: bool, e: &Evaluation) -> TraceRecord {
    TraceRecord {
        task_id,
        outer_j,
        inner_i,
        descent,
        h_cost: e.h,
        g_u_norm: e.g_u_norm(),
        g_w_norm: e.g_w_norm(),
        u_term_norms: e.u_term_norms,
        w_term_norms: e.w_term_norms,
        betas: e.betas,
        probe_g_u_sq: None,
        probe_g_w_sq: None,
    }
}

/// Which trace rows also record full-batch gradient norms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Probe {
    Off,
    Ascent,
    Descent,
    All,
}

impl Probe {
    fn ascent(self) -> bool {
        matches!(self, Probe::Ascent | Probe::All)
    }

    fn descent(self) -> bool {
        matches!(self, Probe::Descent | Probe::All)
    }
}

/// Runs ρ outer iterations: reset `u` to zero, take ζ projected ascent steps
/// on fresh minibatches, then one descent step on another fresh minibatch
/// with `u` fixed. Probed rows also record the full-batch gradient norms at
/// the same point. The ascent draws from its own generator, seeded once per
/// outer iteration, so `rng` advances the same way for every ζ.
pub fn run_sgda<P: SaddleProblem, R: Rng + ?Sized>(
    problem: &P,
    w0: &[f64],
    config: &GameConfig,
    task_id: usize,
    rng: &mut R,
    probe: Probe,
) -> Result<SgdaOutcome> {
    let mut w = w0.to_vec();
    let radii = config.radii();
    let lr_u = config.ascent_rate();
    let lr_w = config.descent_rate();
    let mut adam = (config.optimizer == Optimizer::Adam).then(|| Adam::new(w.len()));
    let full = if probe == Probe::Off { None } else { Some(problem.full_batch()?) };
    let mut trace = TrainTrace::default();
    let mut u = problem.zero_u(w.len());
    let check = |e: &Evaluation, outer_j, inner_i| {
        if e.h.is_finite() {
            Ok(())
        } else {
            Err(GameError::NonFinite {
                task_id,
                outer_j,
                inner_i,
            })
        }
    };
    for j in 0..config.rho {
        u = problem.zero_u(w.len());
        let mut inner = ChaCha8Rng::seed_from_u64(rng.gen());
        for i in 0..config.zeta {
            let batch = problem.sample_batch(&mut inner)?;
            let seed = inner.gen::<u64>();
            let e = problem.evaluate(&w, &u, &batch, seed)?;
            check(&e, j, i)?;
            let mut rec = record(task_id, j, i, false, &e);
            if let (Some(fb), true) = (&full, probe.ascent()) {
                let pe = problem.evaluate(&w, &u, fb, seed)?;
                rec.probe_g_u_sq = Some(pe.grad_u.norm_sq());
                rec.probe_g_w_sq = Some(norm(&pe.grad_w).powi(2));
            }
            trace.records.push(rec);
            u = ascent_update(&u, &e.grad_u, lr_u, &radii)?;
        }
        let batch = problem.sample_batch(rng)?;
        let seed = rng.gen::<u64>();
        let e = problem.evaluate(&w, &u, &batch, seed)?;
        check(&e, j, config.zeta)?;
        let mut rec = record(task_id, j, config.zeta, true, &e);
        if let (Some(fb), true) = (&full, probe.descent()) {
            let pe = problem.evaluate(&w, &u, fb, seed)?;
            rec.probe_g_u_sq = Some(pe.grad_u.norm_sq());
            rec.probe_g_w_sq = Some(norm(&pe.grad_w).powi(2));
        }
        trace.records.push(rec);
        match adam.as_mut() {
            Some(a) => a.step(&mut w, &e.grad_w, lr_w),
            None => w = descent_update(&w, &e.grad_w, lr_w),
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(GameError::NonFinite {
                task_id,
                outer_j: j,
                inner_i: config.zeta,
            });
        }
    }
    Ok(SgdaOutcome { w, u, trace })
}

#[derive(Debug, Clone)]
pub struct TaskOutcome {
    pub w_final: ParamVector,
    pub u_final: PlayerU,
    pub trace: TrainTrace,
}

/// Trains one task against the replay buffer, then merges the task's
/// training items into the buffer.
pub fn train_task<R: Rng + ?Sized>(
    w_init: &ParamVector,
    task: &Task,
    replay: &mut ReplayBuffer,
    model: &ModelConfig,
    config: &GameConfig,
    rng: &mut R,
) -> Result<TaskOutcome> {
    config.validate()?;
    model.validate()?;
    let new_data = new_task_data(task);
    if new_data.is_empty() {
        return Err(GameError::EmptyTask(task.task_id));
    }
    let out = {
        let game = GnnGame {
            cost: GnnCost::new(model, config),
            buffer: replay,
            new_data: &new_data,
            batch_b: config.batch_b,
        };
        run_sgda(&game, &w_init.values, config, task.task_id, rng, Probe::Off)?
    };
    replay.update(&new_data, rng);
    Ok(TaskOutcome {
        w_final: ParamVector::new(out.w, Arc::clone(&w_init.layout))?,
        u_final: out.u,
        trace: out.trace,
    })
}
