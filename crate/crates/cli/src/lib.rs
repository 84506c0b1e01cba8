//! Command-line front end: stream generation, training, ablation,
//! diagnostics, hyperparameter search and reporting.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use gclgame::diagnostics::{self, DiagnosticsError, ResidualOptions, SamplingRegion, StreamSource};
use gclgame::game::{run_sgda, GameConfig, GameError, Optimizer, Probe};
use gclgame::gnn::{save_checkpoint, GnnError, ModelConfig};
use gclgame::graph::{load_stream, save_stream, synth_verg_stream, Objective, StreamError, SynthConfig, TaskStream};
use gclgame::hpo::{self, DimKind, HpoError, HpoSpace, Hyper, TrialRecord};
use gclgame::metrics::{read_metrics_csv, write_metrics_csv, MetricsReport};
use gclgame::pipeline::{model_for_stream, run_continual, Method, PipelineError};
use gclgame::plot;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

impl From<GameError> for CliError {
    fn from(e: GameError) -> Self {
        match e {
            GameError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Game(g) => g.into(),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<DiagnosticsError> for CliError {
    fn from(e: DiagnosticsError) -> Self {
        match e {
            DiagnosticsError::Game(g) => g.into(),
            DiagnosticsError::Pipeline(p) => p.into(),
            DiagnosticsError::BoundViolation { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<HpoError> for CliError {
    fn from(e: HpoError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<GnnError> for CliError {
    fn from(e: GnnError) -> Self {
        CliError::Usage(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "gclgame", version, about = "Graph continual learning as a generalization/forgetting game")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic task stream.
    Gen(GenArgs),
    /// Train one method over a stream and write metrics, trace and checkpoint.
    Train(TrainArgs),
    /// Compare the full game, the game switched off, and plain replay.
    Ablate(AblateArgs),
    /// Gradient bounds, constants, rate fits and equilibrium residuals.
    Diagnose(DiagnoseArgs),
    /// Random search, top quantile, copula fit, resampling and re-evaluation.
    Hpo(HpoArgs),
    /// Summarize the CSVs in a directory into tables and plots.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ObjectiveArg {
    Node,
    Graph,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 3)]
    pub tasks: usize,
    #[arg(long, default_value_t = 2)]
    pub classes_per_task: usize,
    #[arg(long, value_enum, default_value_t = ObjectiveArg::Node)]
    pub objective: ObjectiveArg,
    #[arg(long, default_value_t = 60)]
    pub vertices: usize,
    #[arg(long, default_value_t = 200)]
    pub universe: usize,
    #[arg(long, default_value_t = 8)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 0)]
    pub edge_dim: usize,
    #[arg(long, default_value_t = 1.0)]
    pub drift: f64,
    #[arg(long, default_value_t = 1.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
    /// Train share of labeled vertices for node streams.
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
    #[arg(long, default_value_t = 30)]
    pub graphs_per_task: usize,
    #[arg(long, default_value_t = 8)]
    pub graph_size: usize,
}

impl SynthArgs {
    pub fn resolve(&self) -> Result<SynthConfig> {
        if self.tasks == 0 {
            return Err(CliError::Usage("--tasks must be at least 1".into()));
        }
        if self.classes_per_task == 0 {
            return Err(CliError::Usage("--classes-per-task must be at least 1".into()));
        }
        let cfg = SynthConfig {
            objective: match self.objective {
                ObjectiveArg::Node => Objective::NodeClassification,
                ObjectiveArg::Graph => Objective::GraphClassification,
            },
            num_tasks: self.tasks,
            classes_per_task: self.classes_per_task,
            universe_size: self.universe,
            vertices_per_task: self.vertices,
            feature_dim: self.feature_dim,
            edge_feature_dim: self.edge_dim,
            class_separation: self.separation,
            feature_noise: self.noise,
            drift: self.drift,
            train_fraction: self.train_fraction,
            graphs_per_task: self.graphs_per_task,
            graph_size: self.graph_size,
            ..SynthConfig::default()
        };
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub synth: SynthArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(short = 'o', long = "output")]
    pub output: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OptimizerArg {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Game,
    Finetune,
    Replay,
    Nogame,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Game => Method::Game,
            MethodArg::Finetune => Method::Finetune,
            MethodArg::Replay => Method::Replay,
            MethodArg::Nogame => Method::NoGame,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct GameArgs {
    #[arg(long, default_value_t = 1000)]
    pub rho: usize,
    #[arg(long, default_value_t = 10)]
    pub zeta: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub alpha_w: f64,
    #[arg(long, default_value_t = 1e-7)]
    pub alpha_u: f64,
    #[arg(long, default_value_t = 1.0)]
    pub beta1: f64,
    #[arg(long, default_value_t = 1.0)]
    pub beta2: f64,
    #[arg(long, default_value_t = 1.0)]
    pub beta3: f64,
    #[arg(long, default_value_t = 500)]
    pub buffer: usize,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    /// Radius of each of the three perturbation balls.
    #[arg(long, default_value_t = 1.0)]
    pub radius: f64,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    pub optimizer: OptimizerArg,
    /// Switch dropout off inside the training cost.
    #[arg(long)]
    pub no_dropout: bool,
}

impl GameArgs {
    pub fn resolve(&self, seed: u64) -> Result<GameConfig> {
        let cfg = GameConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            beta3: self.beta3,
            zeta: self.zeta,
            rho: self.rho,
            alpha_u: self.alpha_u,
            alpha_w: self.alpha_w,
            r_x: self.radius,
            r_phi: self.radius,
            r_w: self.radius,
            batch_b: self.batch,
            buffer_capacity: self.buffer,
            seed,
            optimizer: match self.optimizer {
                OptimizerArg::Sgd => Optimizer::Sgd,
                OptimizerArg::Adam => Optimizer::Adam,
            },
            phi_player: true,
            dropout: !self.no_dropout,
        };
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 2)]
    pub nlays: usize,
    #[arg(long, default_value_t = 16)]
    pub hc: usize,
    #[arg(long, default_value_t = 0.0)]
    pub drop: f64,
}

impl ModelArgs {
    pub fn resolve(&self, stream: &TaskStream) -> Result<ModelConfig> {
        let m = model_for_stream(stream, self.nlays, self.hc, self.drop);
        m.validate()?;
        Ok(m)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub stream: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = MethodArg::Game)]
    pub method: MethodArg,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    pub print_config: bool,
    #[command(flatten)]
    pub game: GameArgs,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// A fixed stream for every seed; without it each seed draws its own
    /// synthetic stream from the generator flags.
    #[arg(long)]
    pub stream: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    /// First seed; runs use `seed..seed+seeds`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    /// Use the drift-heavy stream with the tuned ablation settings; the
    /// generator, game and model flags are ignored.
    #[arg(long)]
    pub preset: bool,
    #[command(flatten)]
    pub synth: SynthArgs,
    #[command(flatten)]
    pub game: GameArgs,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    /// Stream for the gradient-bound audit; skipped when absent.
    #[arg(long)]
    pub stream: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    /// Iteration counts for both rate sweeps, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = diagnostics::RATE_GRID.to_vec())]
    pub grid: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    pub rate_seeds: u64,
    #[arg(long)]
    pub skip_rates: bool,
    /// Sampled points for constants and residuals.
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    #[arg(long, default_value_t = 0.01)]
    pub delta: f64,
    #[command(flatten)]
    pub game: GameArgs,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct HpoArgs {
    #[arg(long)]
    pub stream: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    #[arg(long, default_value_t = 0.3)]
    pub quantile: f64,
    #[arg(long, default_value_t = 1000)]
    pub copula_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub max_nlays: i64,
    #[arg(long, default_value_t = 64)]
    pub max_hc: i64,
    #[arg(long, default_value_t = 4000)]
    pub max_rho: i64,
    #[arg(long, default_value_t = 64)]
    pub max_zeta: i64,
    #[command(flatten)]
    pub game: GameArgs,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub in_dir: PathBuf,
    /// Defaults to the input directory.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code.
pub fn run_from<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Gen(a) => cmd_gen(&a, out),
        Command::Train(a) => cmd_train(&a, out),
        Command::Ablate(a) => cmd_ablate(&a, out),
        Command::Diagnose(a) => cmd_diagnose(&a, out),
        Command::Hpo(a) => cmd_hpo(&a, out),
        Command::Report(a) => cmd_report(&a, out),
    }
}

fn say(out: &mut dyn Write, line: String) {
    let _ = writeln!(out, "{line}");
}

fn read_stream(path: &Path) -> Result<TaskStream> {
    load_stream(path).map_err(|e| match e {
        StreamError::Io(io) => io_err(path, io),
        other => CliError::Usage(format!("{}: {other}", path.display())),
    })
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| io_err(path, e))
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).unwrap_or_default();
    s.push('\n');
    s
}

pub fn cmd_gen(a: &GenArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = a.synth.resolve()?;
    let stream = synth_verg_stream(&cfg, a.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    save_stream(&stream, &a.output).map_err(|e| io_err(&a.output, e))?;
    let vertices: usize = stream
        .tasks
        .iter()
        .flat_map(|t| t.graphs.iter())
        .map(|g| g.num_vertices())
        .sum();
    say(
        out,
        format!(
            "wrote {}: {} tasks, {} vertices, {} classes",
            a.output.display(),
            stream.tasks.len(),
            vertices,
            stream.num_classes_total
        ),
    );
    Ok(())
}

fn print_config(cfg: &GameConfig, method: Method, model: &ModelArgs, out: &mut dyn Write) {
    let lines = [
        ("method", method.as_str().to_string()),
        ("rho", cfg.rho.to_string()),
        ("zeta", cfg.zeta.to_string()),
        ("alpha_w", format!("{:e}", cfg.alpha_w)),
        ("alpha_u", format!("{:e}", cfg.alpha_u)),
        ("beta1", cfg.beta1.to_string()),
        ("beta2", cfg.beta2.to_string()),
        ("beta3", cfg.beta3.to_string()),
        ("buffer", cfg.buffer_capacity.to_string()),
        ("batch", cfg.batch_b.to_string()),
        ("radius_x", cfg.r_x.to_string()),
        ("radius_phi", cfg.r_phi.to_string()),
        ("radius_w", cfg.r_w.to_string()),
        ("optimizer", format!("{:?}", cfg.optimizer).to_lowercase()),
        ("dropout", cfg.dropout.to_string()),
        ("nlays", model.nlays.to_string()),
        ("hc", model.hc.to_string()),
        ("drop", model.drop.to_string()),
        ("seed", cfg.seed.to_string()),
    ];
    for (k, v) in lines {
        say(out, format!("{k}={v}"));
    }
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let method: Method = a.method.into();
    let base = a.game.resolve(a.seed)?;
    if a.print_config {
        print_config(&method.apply(&base), method, &a.model, out);
        return Ok(());
    }
    let path = a
        .stream
        .as_ref()
        .ok_or_else(|| CliError::Usage("--stream is required".into()))?;
    let stream = read_stream(path)?;
    let model = a.model.resolve(&stream)?;
    ensure_dir(&a.out_dir)?;
    let run = run_continual(&stream, &model, &base, method, a.seed)?;
    let report = MetricsReport {
        run_id: format!("{}-s{}", method.as_str(), a.seed),
        seed: a.seed,
        method: method.as_str().to_string(),
        matrix: run.matrix.clone(),
    };
    let metrics_path = a.out_dir.join("metrics.csv");
    write_metrics_csv(create(&metrics_path)?, &[report.clone()]).map_err(|e| io_err(&metrics_path, e))?;
    let trace_path = a.out_dir.join("trace.csv");
    run.trace.write_csv(create(&trace_path)?).map_err(|e| io_err(&trace_path, e))?;
    let ckpt = a.out_dir.join("checkpoint.json");
    save_checkpoint(&run.params, &model, &ckpt).map_err(|e| io_err(&ckpt, e))?;
    let pm = report.pm().map(|v| format!("{v:.4}")).unwrap_or_else(|_| "n/a".into());
    let fm = report.fm().map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into());
    say(out, format!("{} seed {}: PM {pm} FM {fm}", method.as_str(), a.seed));
    Ok(())
}

pub fn cmd_ablate(a: &AblateArgs, out: &mut dyn Write) -> Result<()> {
    let base = if a.preset {
        GameConfig {
            seed: a.seed,
            ..diagnostics::ablation_game_config()
        }
    } else {
        a.game.resolve(a.seed)?
    };
    let source = match &a.stream {
        Some(p) => StreamSource::Fixed(read_stream(p)?),
        None if a.preset => StreamSource::Synth(diagnostics::drift_stream_config()),
        None => StreamSource::Synth(a.synth.resolve()?),
    };
    let first = source.stream(a.seed)?;
    let model = if a.preset {
        let (nlays, hc, drop) = diagnostics::ABLATION_MODEL;
        model_for_stream(&first, nlays, hc, drop)
    } else {
        a.model.resolve(&first)?
    };
    ensure_dir(&a.out_dir)?;
    let seeds: Vec<u64> = (a.seed..a.seed + a.seeds).collect();
    let report = diagnostics::run_ablation(&source, &model, &base, &seeds)?;
    let path = a.out_dir.join("ablation.csv");
    report.write_csv(create(&path)?).map_err(|e| io_err(&path, e))?;
    for s in &report.summaries {
        say(
            out,
            format!(
                "{:<8} FM {:.4} ± {:.4}  PM {:.4} ± {:.4}",
                s.method, s.fm_mean, s.fm_std, s.pm_mean, s.pm_std
            ),
        );
    }
    for (x, y) in [(Method::Game, Method::NoGame), (Method::Game, Method::Replay), (Method::NoGame, Method::Replay)] {
        say(out, format!("{} beats {}: {:.2}", x.as_str(), y.as_str(), report.win_rate(x, y)));
    }
    Ok(())
}

pub fn cmd_diagnose(a: &DiagnoseArgs, out: &mut dyn Write) -> Result<()> {
    ensure_dir(&a.out_dir)?;
    if let Some(p) = &a.stream {
        let stream = read_stream(p)?;
        let model = a.model.resolve(&stream)?;
        let base = a.game.resolve(a.seed)?;
        let run = run_continual(&stream, &model, &base, Method::Game, a.seed)?;
        let rep = diagnostics::gradient_bound_report(&run.trace);
        write_file(&a.out_dir.join("bounds.json"), &to_json(&rep))?;
        say(
            out,
            format!(
                "gradient bounds: {} steps, {} violations, max ratios u {:.6} w {:.6}",
                rep.steps, rep.violations, rep.max_ratio_u, rep.max_ratio_w
            ),
        );
        if rep.violations > 0 {
            return Err(CliError::Numeric(format!("{} gradient-bound violations", rep.violations)));
        }
    }

    let toy = diagnostics::rate_toy(a.seed)?;
    let n = toy.problem.inner.items.len();
    let region = SamplingRegion {
        w0: toy.w0.clone(),
        r_w: 1.0,
        radii: toy.config.radii(),
        b: toy.problem.inner.batch_b,
        n,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let constants = diagnostics::estimate_constants(&toy.problem.inner, &region, a.samples.max(2), &mut rng)?;
    write_file(&a.out_dir.join("constants.json"), &to_json(&constants))?;
    say(
        out,
        format!(
            "constants: M {:.4} L_w {:.4} G {:.4} G_bar {:.4}",
            constants.m, constants.l_w, constants.g, constants.g_bar
        ),
    );

    let saddle = diagnostics::saddle_toy();
    let scfg = diagnostics::saddle_toy_config();
    let trained = run_sgda(&saddle, &[0.0, 0.0], &scfg, 0, &mut rng, Probe::Off)?;
    let toy_constants = diagnostics::estimate_constants(
        &saddle,
        &SamplingRegion {
            w0: trained.w.clone(),
            r_w: 1.0,
            radii: scfg.radii(),
            b: 1,
            n: 1,
        },
        a.samples.max(2),
        &mut rng,
    )?;
    let opts = ResidualOptions {
        delta_u: a.delta,
        delta_w: a.delta,
        sample_count: a.samples,
        inner_steps: scfg.zeta,
        inner_lr: scfg.ascent_rate(),
    };
    let res = diagnostics::equilibrium_residual(
        &saddle,
        &trained.w,
        &trained.u,
        &scfg.radii(),
        &toy_constants,
        &opts,
        &mut rng,
    )?;
    write_file(&a.out_dir.join("residual.json"), &to_json(&res))?;
    say(
        out,
        format!(
            "residual at delta {}: u {:.3e} (bound {:.3e}) w {:.3e} (bound {:.3e})",
            a.delta, res.res_u, res.first_order_u, res.res_w, res.first_order_w
        ),
    );

    if !a.skip_rates {
        let seeds: Vec<u64> = (0..a.rate_seeds).collect();
        for (name, fit) in [
            (
                "zeta",
                diagnostics::ascent_rate_sweep(&toy.problem, &toy.w0, &toy.ascent_config(), &a.grid, &seeds)?,
            ),
            (
                "rho",
                diagnostics::descent_rate_sweep(&toy.problem, &toy.w0, &toy.descent_config(), &a.grid, &seeds)?,
            ),
        ] {
            let csv_path = a.out_dir.join(format!("rate_{name}.csv"));
            fit.write_csv(create(&csv_path)?).map_err(|e| io_err(&csv_path, e))?;
            write_file(
                &a.out_dir.join(format!("rate_{name}.svg")),
                &fit.svg(&format!("running-min squared gradient vs {name}"), name),
            )?;
            say(out, format!("rate over {name}: slope {:.3} ± {:.3}", fit.slope, fit.half_width));
        }
    }
    Ok(())
}

fn space_from(a: &HpoArgs) -> Result<HpoSpace> {
    let mut space = HpoSpace::default();
    space.set(Hyper::Nlays, DimKind::Int { lo: 1, hi: a.max_nlays });
    space.set(Hyper::Hc, DimKind::Int { lo: 4, hi: a.max_hc });
    space.set(Hyper::Rho, DimKind::Int { lo: 1, hi: a.max_rho });
    space.set(Hyper::Zeta, DimKind::Int { lo: 1, hi: a.max_zeta });
    space.validate()?;
    Ok(space)
}

fn write_trials(path: &Path, records: &[TrialRecord]) -> Result<()> {
    hpo::write_trials_csv(records, create(path)?).map_err(|e| io_err(path, e))
}

pub fn cmd_hpo(a: &HpoArgs, out: &mut dyn Write) -> Result<()> {
    let space = space_from(a)?;
    let stream = read_stream(&a.stream)?;
    let model = a.model.resolve(&stream)?;
    let base = a.game.resolve(a.seed)?;
    ensure_dir(&a.out_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let trials = hpo::random_search(&space, a.trials, &stream, &model, &base, &mut rng)?;
    write_trials(&a.out_dir.join("trials.csv"), &trials)?;
    let top = hpo::top_quantile(&trials, a.quantile)?;
    write_trials(&a.out_dir.join("top.csv"), &top)?;
    let copula = hpo::copula_fit_records(&top, &space)?;
    let samples = hpo::copula_sample(&copula, a.copula_samples, &mut rng);
    let mut resampled = Vec::with_capacity(samples.len());
    for (i, values) in samples.into_iter().enumerate() {
        let seed = rand::Rng::gen::<u64>(&mut rng);
        let (m, g) = HpoSpace::apply(&values, &model, &base);
        let start = std::time::Instant::now();
        let scored = run_continual(&stream, &m, &g, Method::Game, seed)
            .ok()
            .and_then(|r| Some((gclgame::metrics::fm(&r.matrix).ok()?, gclgame::metrics::pm(&r.matrix).ok()?)));
        let (fm, pm) = scored.unwrap_or((f64::INFINITY, f64::NAN));
        resampled.push(TrialRecord {
            trial: i,
            values,
            fm,
            pm,
            seed,
            runtime_s: start.elapsed().as_secs_f64(),
        });
    }
    write_trials(&a.out_dir.join("copula_samples.csv"), &resampled)?;
    for (k, h) in Hyper::ALL.iter().enumerate() {
        let vals: Vec<f64> = resampled.iter().map(|r| r.values[k]).collect();
        write_file(
            &a.out_dir.join(format!("hist_{}.svg", h.name())),
            &plot::histogram_svg(h.name(), &vals, 20),
        )?;
    }
    let ok: Vec<f64> = resampled.iter().filter(|r| r.succeeded()).map(|r| r.fm).collect();
    let mean = if ok.is_empty() { f64::NAN } else { ok.iter().sum::<f64>() / ok.len() as f64 };
    say(
        out,
        format!(
            "{} trials, {} in top quantile, {} copula samples re-evaluated ({} succeeded, mean FM {:.4})",
            trials.len(),
            top.len(),
            resampled.len(),
            ok.len(),
            mean
        ),
    );
    Ok(())
}

fn csv_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| io_err(dir, e))?;
    let mut files: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    Ok(files)
}

fn first_line(path: &Path) -> Result<String> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(text.lines().next().unwrap_or("").to_string())
}

pub fn cmd_report(a: &ReportArgs, out: &mut dyn Write) -> Result<()> {
    let files = csv_files(&a.in_dir)?;
    let out_dir = a.out_dir.clone().unwrap_or_else(|| a.in_dir.clone());
    let mut summary = String::from("source,kind,label,n,fm_mean,pm_mean\n");
    let mut seen = 0;
    for path in &files {
        let name = path.file_name().and_then(|s| s.to_str()).unwrap_or("").to_string();
        let header = first_line(path)?;
        if header.starts_with("run_id,") {
            let rows = read_metrics_csv(fs::File::open(path).map_err(|e| io_err(path, e))?)
                .map_err(|e| CliError::Usage(format!("{name}: {e}")))?;
            let mut by_run: std::collections::BTreeMap<String, (Option<f64>, Option<f64>)> = Default::default();
            for r in rows {
                by_run.insert(r.run_id.clone(), (r.fm, r.pm));
            }
            for (run, (fm, pm)) in by_run {
                let f = fm.map(|v| format!("{v}")).unwrap_or_default();
                let p = pm.map(|v| format!("{v}")).unwrap_or_default();
                summary.push_str(&format!("{name},metrics,{run},1,{f},{p}\n"));
            }
            seen += 1;
        } else if header.starts_with("method,seed,fm,pm") {
            let mut rd = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
            let mut acc: std::collections::BTreeMap<String, (usize, f64, f64)> = Default::default();
            for row in rd.records() {
                let row = row.map_err(|e| CliError::Usage(format!("{name}: {e}")))?;
                let num = |s: &str| s.parse::<f64>().map_err(|e| CliError::Usage(format!("{name}: {e}")));
                let e = acc.entry(row[0].to_string()).or_default();
                e.0 += 1;
                e.1 += num(&row[2])?;
                e.2 += num(&row[3])?;
            }
            for (m, (n, f, p)) in acc {
                summary.push_str(&format!("{name},ablation,{m},{n},{},{}\n", f / n as f64, p / n as f64));
            }
            seen += 1;
        } else if header.starts_with("trial,") {
            let recs = hpo::read_trials_csv(fs::File::open(path).map_err(|e| io_err(path, e))?)?;
            let ok: Vec<&TrialRecord> = recs.iter().filter(|r| r.succeeded()).collect();
            let fm_mean = ok.iter().map(|r| r.fm).sum::<f64>() / ok.len().max(1) as f64;
            let pm_mean = ok.iter().map(|r| r.pm).sum::<f64>() / ok.len().max(1) as f64;
            summary.push_str(&format!("{name},trials,all,{},{fm_mean},{pm_mean}\n", ok.len()));
            let fms: Vec<f64> = ok.iter().map(|r| r.fm).collect();
            let stem = name.trim_end_matches(".csv");
            write_file(
                &out_dir.join(format!("{stem}_fm_hist.svg")),
                &plot::histogram_svg(&format!("FM ({stem})"), &fms, 20),
            )?;
            seen += 1;
        } else if header.starts_with("grid,min_sq") {
            let mut rd = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
            let (mut xs, mut ys, mut slope, mut icpt) = (Vec::new(), Vec::new(), 0.0, 0.0);
            for row in rd.records() {
                let row = row.map_err(|e| CliError::Usage(format!("{name}: {e}")))?;
                let num = |s: &str| s.parse::<f64>().map_err(|e| CliError::Usage(format!("{name}: {e}")));
                xs.push(num(&row[0])?);
                ys.push(num(&row[1])?);
                slope = num(&row[2])?;
                icpt = num(&row[3])?;
            }
            let stem = name.trim_end_matches(".csv");
            write_file(
                &out_dir.join(format!("{stem}_loglog.svg")),
                &plot::loglog_svg(stem, &xs, &ys, slope, icpt, "iterations", "min ||g||^2"),
            )?;
            summary.push_str(&format!("{name},rate,slope,{},{slope},\n", xs.len()));
            seen += 1;
        }
    }
    if seen == 0 {
        return Err(CliError::Usage(format!("no recognizable CSV files in {}", a.in_dir.display())));
    }
    ensure_dir(&out_dir)?;
    write_file(&out_dir.join("summary.csv"), &summary)?;
    say(out, format!("summarized {seen} files into {}", out_dir.join("summary.csv").display()));
    Ok(())
}
