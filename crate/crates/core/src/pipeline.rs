//! The continual loop over a task stream: train each task, then score every
//! task seen so far.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::game::{train_task, GameConfig, GameError, TrainTrace};
use crate::gnn::{init_params, GnnError, ModelConfig, ParamVector};
use crate::graph::TaskStream;
use crate::metrics::{evaluate_task, matrix_from_log, AccuracyMatrix, EvalRecord, MetricsError, ScoreKind};
use crate::replay::ReplayBuffer;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error(transparent)]
    Game(#[from] GameError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Model(#[from] GnnError),
    #[error("stream has no tasks")]
    EmptyStream,
}

/// Training variants compared by the ablation and baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    /// All four cost terms with the ascent loop.
    Game,
    /// No replay, no perturbation terms, no ascent.
    Finetune,
    /// Replay with the plain loss only.
    Replay,
    /// The first three terms without the ascent loop or the weight term.
    NoGame,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Game, Method::Finetune, Method::Replay, Method::NoGame];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Game => "game",
            Method::Finetune => "finetune",
            Method::Replay => "replay",
            Method::NoGame => "nogame",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }

    /// The game configuration this variant actually runs.
    pub fn apply(self, base: &GameConfig) -> GameConfig {
        let mut c = base.clone();
        match self {
            Method::Game => {}
            Method::Finetune => {
                c.beta1 = 0.0;
                c.beta2 = 0.0;
                c.beta3 = 0.0;
                c.zeta = 0;
                c.buffer_capacity = 0;
            }
            Method::Replay => {
                c.beta1 = 0.0;
                c.beta2 = 0.0;
                c.beta3 = 0.0;
                c.zeta = 0;
            }
            Method::NoGame => {
                c.beta3 = 0.0;
                c.zeta = 0;
            }
        }
        c
    }
}

/// Model dimensions implied by a stream.
pub fn model_for_stream(stream: &TaskStream, nlays: usize, hc: usize, drop: f64) -> ModelConfig {
    ModelConfig {
        nlays,
        hc,
        drop,
        leaky_slope: 0.2,
        in_dim: stream.universe.feature_dim,
        out_dim: stream.num_classes_total,
        edge_dim: stream.universe.edge_width(),
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub matrix: AccuracyMatrix,
    pub log: Vec<EvalRecord>,
    pub trace: TrainTrace,
    pub params: ParamVector,
}

/// Runs `method` over every task of `stream`. Everything random is drawn
/// from one generator seeded with `seed`.
pub fn run_continual(
    stream: &TaskStream,
    model: &ModelConfig,
    base: &GameConfig,
    method: Method,
    seed: u64,
) -> Result<RunResult, PipelineError> {
    if stream.tasks.is_empty() {
        return Err(PipelineError::EmptyStream);
    }
    let config = method.apply(base);
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = init_params(model, rng.gen())?;
    let mut buffer = ReplayBuffer::new(config.buffer_capacity);
    let mut trace = TrainTrace::default();
    let mut log = Vec::new();
    let kind = ScoreKind::for_objective(stream.objective);
    for (k, task) in stream.tasks.iter().enumerate() {
        let out = train_task(&params, task, &mut buffer, model, &config, &mut rng)?;
        params = out.w_final;
        trace.extend(out.trace);
        for earlier in &stream.tasks[..=k] {
            log.push(evaluate_task(&params, model, earlier, k)?);
        }
    }
    let matrix = matrix_from_log(&log, stream.tasks.len(), kind)?;
    Ok(RunResult {
        matrix,
        log,
        trace,
        params,
    })
}
