//! Empirical checks of the theory: Lipschitz and gradient-norm constants,
//! the triangle bounds on the stochastic gradients, equilibrium residuals,
//! convergence-rate fits and the three-way ablation.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::canonical::format_float;
use crate::game::{
    ascent_update, norm, project, run_sgda, FixedGnnGame, GameConfig, GameError, GnnCost, Optimizer,
    PenalizedAdversary, PlayerU, Probe, Radii, SaddleProblem, SaddleToy, TrainTrace,
};
use crate::gnn::{init_params, ModelConfig};
use crate::replay::task_items;
use crate::graph::{synth_verg_stream, GraphError, SynthConfig, TaskStream};
use crate::metrics::{fm, pm, MetricsError};
use crate::pipeline::{run_continual, Method, PipelineError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagnosticsError {
    #[error("insufficient grid: {0}")]
    InsufficientGrid(String),
    #[error("gradient bound violated at record {index} ({side}): ratio {ratio}")]
    BoundViolation { index: usize, side: &'static str, ratio: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Game(#[from] GameError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

pub type Result<T> = std::result::Result<T, DiagnosticsError>;

/// Empirical constants. Every entry is a maximum over sampled points, so it
/// is a lower bound on the corresponding supremum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TheoryConstants {
    pub m: f64,
    pub l_w: f64,
    pub g: f64,
    pub g_x: f64,
    pub g_phi: f64,
    pub g_w: f64,
    pub g_bar: f64,
    pub beta: f64,
    pub b: usize,
    pub n: usize,
}

/// Where constants are sampled: a ball of radius `r_w` around `w0` for the
/// weights, and the projection balls for `u`.
#[derive(Debug, Clone)]
pub struct SamplingRegion {
    pub w0: Vec<f64>,
    pub r_w: f64,
    pub radii: Radii,
    pub b: usize,
    pub n: usize,
}

fn random_in_ball<R: Rng + ?Sized>(dim: usize, r: f64, rng: &mut R) -> Vec<f64> {
    if dim == 0 {
        return Vec::new();
    }
    let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let n = norm(&v);
    let scale = if n > 0.0 {
        r * rng.gen::<f64>().powf(1.0 / dim as f64) / n
    } else {
        0.0
    };
    v.iter_mut().for_each(|x| *x *= scale);
    v
}

/// Splits a flat vector back into the tensors of a map-valued block.
fn refill<'a>(
    template: impl Iterator<Item = (&'a crate::graph::SnapshotKey, &'a Tensor)>,
    flat: &[f64],
) -> std::collections::BTreeMap<crate::graph::SnapshotKey, Tensor> {
    let mut out = std::collections::BTreeMap::new();
    let mut at = 0;
    for (k, t) in template {
        let len = t.len();
        let data = flat[at..at + len].to_vec();
        at += len;
        out.insert(*k, Tensor::new(t.shape().to_vec(), data).expect("template shape"));
    }
    out
}

/// A uniformly random point of the product of the three balls, shaped
/// like `template`.
pub fn random_u<R: Rng + ?Sized>(template: &PlayerU, radii: &Radii, rng: &mut R) -> PlayerU {
    let dx: usize = template.delta_x.values().map(Tensor::len).sum();
    let dp: usize = template.delta_phi.values().map(Tensor::len).sum();
    let vx = random_in_ball(dx, radii.r_x, rng);
    let vp = random_in_ball(dp, radii.r_phi, rng);
    let vw = random_in_ball(template.delta_w.len(), radii.r_w, rng);
    PlayerU {
        delta_x: refill(template.delta_x.iter(), &vx),
        delta_phi: refill(template.delta_phi.iter(), &vp),
        delta_w: vw,
    }
}

/// Zero `u` covering every block the full-batch gradient touches.
pub fn u_template<P: SaddleProblem>(problem: &P, w0: &[f64]) -> Result<PlayerU> {
    let full = problem.full_batch()?;
    let mut t = problem.zero_u(w0.len());
    let e = problem.evaluate(w0, &t, &full, 0)?;
    t.axpy(0.0, &e.grad_u)?;
    if t.delta_w.len() != e.grad_u.delta_w.len() && !e.grad_u.delta_w.is_empty() {
        t.delta_w = vec![0.0; e.grad_u.delta_w.len()];
    }
    Ok(t)
}

fn u_diff_norm(a: &PlayerU, b: &PlayerU) -> Result<f64> {
    let mut d = a.clone();
    d.axpy(-1.0, b)?;
    Ok(d.norm())
}

fn w_diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Samples `sample_count` points on the full batch. `M` and `L_w` come from
/// consecutive pairs (`u` varied at `w0`, `w` varied at `u = 0`), the `G`
/// constants from the per-term gradient norms at joint samples. Terms
/// switched off by a zero β do not enter `G`.
pub fn estimate_constants<P: SaddleProblem, R: Rng + ?Sized>(
    problem: &P,
    region: &SamplingRegion,
    sample_count: usize,
    rng: &mut R,
) -> Result<TheoryConstants> {
    if sample_count < 2 {
        return Err(DiagnosticsError::InvalidArgument("sample_count must be at least 2".into()));
    }
    let full = problem.full_batch()?;
    let template = u_template(problem, &region.w0)?;
    let zero = problem.zero_u(region.w0.len());
    let e0 = problem.evaluate(&region.w0, &zero, &full, 0)?;
    let b = e0.betas;
    let mut c = TheoryConstants {
        m: 0.0,
        l_w: 0.0,
        g: 0.0,
        g_x: 0.0,
        g_phi: 0.0,
        g_w: 0.0,
        g_bar: 0.0,
        beta: b.b1.max(b.b2).max(b.b3),
        b: region.b,
        n: region.n,
    };
    let mut prev: Option<(PlayerU, PlayerU, Vec<f64>, Vec<f64>)> = None;
    for _ in 0..sample_count {
        let u = random_u(&template, &region.radii, rng);
        let dw = random_in_ball(region.w0.len(), region.r_w, rng);
        let w: Vec<f64> = region.w0.iter().zip(&dw).map(|(a, d)| a + d).collect();

        let joint = problem.evaluate(&w, &u, &full, 0)?;
        c.g_x = c.g_x.max(joint.u_term_norms[0]);
        c.g_phi = c.g_phi.max(joint.u_term_norms[1]);
        c.g_w = c.g_w.max(joint.u_term_norms[2]);
        let active = [1.0, b.b1, b.b2, b.b3];
        for (n, beta) in joint.w_term_norms.iter().zip(active) {
            if beta > 0.0 {
                c.g = c.g.max(*n);
            }
        }

        let gu = problem.evaluate(&region.w0, &u, &full, 0)?.grad_u;
        let gw = problem.evaluate(&w, &zero, &full, 0)?.grad_w;
        if let Some((pu, pgu, pw, pgw)) = &prev {
            c.m = c.m.max(ratio(u_diff_norm(&gu, pgu)?, u_diff_norm(&u, pu)?));
            c.l_w = c.l_w.max(ratio(w_diff_norm(&gw, pgw), w_diff_norm(&w, pw)));
        }
        prev = Some((u, gu, w, gw));
    }
    c.g_bar = c.g_phi + c.g_x + c.g_w;
    Ok(c)
}

/// Both printed variants of the equilibrium tolerance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpsilonReport {
    pub main_u: f64,
    pub main_uw: f64,
    pub supplement_u: f64,
    pub supplement_uw: f64,
}

pub fn epsilon(c: &TheoryConstants, delta_u: f64, delta_w: f64) -> EpsilonReport {
    let b = c.b as f64;
    let n = c.n as f64;
    let beta2 = c.beta * c.beta;
    let gb2 = c.g_bar * c.g_bar;
    let k2 = (1.0 + 3.0 * c.beta).powi(2);
    let u_part = (c.m + 1.0) / 2.0 * delta_u * delta_u;
    let w_part = (c.l_w + 1.0) / 2.0 * delta_w * delta_w;
    let var_u = 2.0 * b * beta2 * (n * n + b * b) / n.powi(3);

    let main_u = u_part + gb2 * (0.5 * (b * c.g_bar / n).powi(2) + var_u);
    let main_uw = w_part
        + c.g * c.g * (k2 / 2.0 + (b * n * n + b.powi(3)) / n.powi(3) * k2)
        + u_part
        + gb2 * (0.5 * (b / n).powi(2) + var_u);

    let supp_tail = gb2 * (2.0 * b * beta2 / n + b * b / (2.0 * n * n) + 2.0 * b.powi(3) * beta2 / n.powi(3));
    let supplement_u = u_part + supp_tail;
    let supplement_uw = w_part + k2 * c.g * c.g * (0.5 + b / n + b.powi(3) / n.powi(3)) + u_part + supp_tail;

    EpsilonReport {
        main_u,
        main_uw,
        supplement_u,
        supplement_uw,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundReport {
    pub steps: usize,
    pub max_ratio_u: f64,
    pub max_ratio_w: f64,
    pub violations: usize,
}

pub const BOUND_SLACK: f64 = 1e-12;

/// Ratios `‖ĝ_u‖ / Σ β_t‖∇J_t‖` and `‖ĝ_w‖ / ((1+3β)·max_t ‖∇_w J_t‖)`.
/// A zero right side with a zero left side counts as ratio 0.
pub fn bound_ratios(r: &crate::game::TraceRecord) -> (f64, f64) {
    let b = r.betas.as_array();
    let rhs_u: f64 = b.iter().zip(&r.u_term_norms).map(|(b, n)| b * n).sum();
    let beta = b.iter().fold(0.0f64, |a, &v| a.max(v));
    let rhs_w = (1.0 + 3.0 * beta) * r.w_term_norms.iter().fold(0.0f64, |a, &v| a.max(v));
    let side = |lhs: f64, rhs: f64| {
        if rhs > 0.0 {
            lhs / rhs
        } else if lhs == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    };
    (side(r.g_u_norm, rhs_u), side(r.g_w_norm, rhs_w))
}

/// Tallies both triangle bounds over every record without failing.
pub fn gradient_bound_report(trace: &TrainTrace) -> BoundReport {
    let mut rep = BoundReport {
        steps: trace.records.len(),
        max_ratio_u: 0.0,
        max_ratio_w: 0.0,
        violations: 0,
    };
    for r in &trace.records {
        let (ru, rw) = bound_ratios(r);
        rep.max_ratio_u = rep.max_ratio_u.max(ru);
        rep.max_ratio_w = rep.max_ratio_w.max(rw);
        if ru > 1.0 + BOUND_SLACK || rw > 1.0 + BOUND_SLACK || ru.is_nan() || rw.is_nan() {
            rep.violations += 1;
        }
    }
    rep
}

/// Like [`gradient_bound_report`] but fails on the first violating record.
pub fn check_gradient_bounds(trace: &TrainTrace) -> Result<BoundReport> {
    if trace.records.is_empty() {
        return Err(DiagnosticsError::InvalidArgument("empty trace".into()));
    }
    for (index, r) in trace.records.iter().enumerate() {
        let (ru, rw) = bound_ratios(r);
        if !(ru <= 1.0 + BOUND_SLACK) {
            return Err(DiagnosticsError::BoundViolation { index, side: "u", ratio: ru });
        }
        if !(rw <= 1.0 + BOUND_SLACK) {
            return Err(DiagnosticsError::BoundViolation { index, side: "w", ratio: rw });
        }
    }
    Ok(gradient_bound_report(trace))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateFit {
    pub grid: Vec<f64>,
    /// Minimum over iterates of the seed-averaged squared gradient norm.
    pub min_sq: Vec<f64>,
    pub slope: f64,
    /// Intercept of the log10-log10 line.
    pub intercept: f64,
    /// Half-width of the 95% interval on the slope.
    pub half_width: f64,
}

impl RateFit {
    pub fn slope_within(&self, lo: f64, hi: f64) -> bool {
        self.slope >= lo && self.slope <= hi
    }

    pub fn svg(&self, title: &str, x_label: &str) -> String {
        crate::plot::loglog_svg(title, &self.grid, &self.min_sq, self.slope, self.intercept, x_label, "min ||g||^2")
    }

    pub fn write_csv<W: Write>(&self, out: W) -> std::result::Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["grid", "min_sq", "slope", "intercept", "half_width"])?;
        for (g, m) in self.grid.iter().zip(&self.min_sq) {
            w.write_record([
                format_float(*g),
                format_float(*m),
                format_float(self.slope),
                format_float(self.intercept),
                format_float(self.half_width),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Ordinary least squares of `log10 min_sq` on `log10 grid`.
pub fn fit_rate(grid: &[f64], min_sq: &[f64]) -> Result<RateFit> {
    let bad = |m: String| Err(DiagnosticsError::InsufficientGrid(m));
    if grid.len() != min_sq.len() {
        return bad(format!("{} grid points but {} values", grid.len(), min_sq.len()));
    }
    if grid.len() < 4 {
        return bad(format!("{} grid points, need at least 4", grid.len()));
    }
    if grid.windows(2).any(|p| !(p[1] > p[0])) || grid[0] <= 0.0 {
        return bad("grid must be positive and strictly increasing".into());
    }
    if grid[grid.len() - 1] / grid[0] < 100.0 * (1.0 - 1e-12) {
        return bad("grid must span at least two decades".into());
    }
    if min_sq.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return bad("values must be positive and finite".into());
    }
    let xs: Vec<f64> = grid.iter().map(|g| g.log10()).collect();
    let ys: Vec<f64> = min_sq.iter().map(|v| v.log10()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let dof = n - 2.0;
    let se = (sse / dof / sxx).sqrt();
    let t = StudentsT::new(0.0, 1.0, dof).map(|d| d.inverse_cdf(0.975)).unwrap_or(f64::NAN);
    Ok(RateFit {
        grid: grid.to_vec(),
        min_sq: min_sq.to_vec(),
        slope,
        intercept,
        half_width: t * se,
    })
}

/// Running minimum of the per-iterate average of several equal-length curves.
pub fn averaged_running_min(curves: &[Vec<f64>]) -> Vec<f64> {
    let len = curves.iter().map(Vec::len).min().unwrap_or(0);
    let mean = (0..len).map(|i| curves.iter().map(|c| c[i]).sum::<f64>() / curves.len() as f64);
    crate::game::running_min(mean)
}

/// For each `ζ` in `grid`: one outer iteration per seed with full-batch
/// probes on the ascent rows, averaged per iterate over seeds, then
/// minimized over iterates.
pub fn ascent_rate_sweep<P: SaddleProblem>(
    problem: &P,
    w0: &[f64],
    base: &GameConfig,
    grid: &[usize],
    seeds: &[u64],
) -> Result<RateFit> {
    check_seeds(seeds)?;
    let mut mins = Vec::with_capacity(grid.len());
    for &zeta in grid {
        let cfg = GameConfig {
            zeta,
            rho: 1,
            ..base.clone()
        };
        let mut curves = Vec::with_capacity(seeds.len());
        for &s in seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let out = run_sgda(problem, w0, &cfg, 0, &mut rng, Probe::Ascent)?;
            curves.push(out.trace.inner_records().map(|r| r.probe_g_u_sq.unwrap_or(f64::NAN)).collect());
        }
        mins.push(*averaged_running_min(&curves).last().unwrap_or(&f64::NAN));
    }
    fit_rate(&grid.iter().map(|&g| g as f64).collect::<Vec<_>>(), &mins)
}

/// The same protocol over `ρ`, probing `‖g_w‖²` on the descent rows.
pub fn descent_rate_sweep<P: SaddleProblem>(
    problem: &P,
    w0: &[f64],
    base: &GameConfig,
    grid: &[usize],
    seeds: &[u64],
) -> Result<RateFit> {
    check_seeds(seeds)?;
    let mut mins = Vec::with_capacity(grid.len());
    for &rho in grid {
        let cfg = GameConfig { rho, ..base.clone() };
        let mut curves = Vec::with_capacity(seeds.len());
        for &s in seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let out = run_sgda(problem, w0, &cfg, 0, &mut rng, Probe::Descent)?;
            curves.push(out.trace.outer_records().map(|r| r.probe_g_w_sq.unwrap_or(f64::NAN)).collect());
        }
        mins.push(*averaged_running_min(&curves).last().unwrap_or(&f64::NAN));
    }
    fit_rate(&grid.iter().map(|&g| g as f64).collect::<Vec<_>>(), &mins)
}

fn check_seeds(seeds: &[u64]) -> Result<()> {
    if seeds.is_empty() {
        return Err(DiagnosticsError::InsufficientGrid("no seeds".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResidualReport {
    /// Largest gain any sampled `u` near `u*` achieves over `H(u*, w*)`.
    pub res_u: f64,
    /// Largest amount by which `H(u*, w*)` exceeds the inner-maximized cost
    /// at a sampled `w` near `w*`.
    pub res_w: f64,
    /// `δ_u‖∇_u H‖ + (M+1)/2·δ_u²` at the candidate point.
    pub first_order_u: f64,
    /// `δ_w‖∇_w H‖ + (L_w+1)/2·δ_w²` at the candidate point.
    pub first_order_w: f64,
    pub grad_u_norm: f64,
    pub grad_w_norm: f64,
    pub epsilon: EpsilonReport,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualOptions {
    pub delta_u: f64,
    pub delta_w: f64,
    pub sample_count: usize,
    /// Ascent steps approximating the inner maximum at each sampled `w`.
    pub inner_steps: usize,
    pub inner_lr: f64,
}

/// Samples deviations of each player around `(u*, w*)` on the full batch.
/// Besides uniform samples in each `δ` ball, the points `±δ·∇/‖∇‖` are
/// always tried.
pub fn equilibrium_residual<P: SaddleProblem, R: Rng + ?Sized>(
    problem: &P,
    w_star: &[f64],
    u_star: &PlayerU,
    radii: &Radii,
    constants: &TheoryConstants,
    opts: &ResidualOptions,
    rng: &mut R,
) -> Result<ResidualReport> {
    if opts.delta_u < 0.0 || opts.delta_w < 0.0 {
        return Err(DiagnosticsError::InvalidArgument("deltas must be nonnegative".into()));
    }
    let full = problem.full_batch()?;
    let e = problem.evaluate(w_star, u_star, &full, 0)?;
    let h_star = e.h;
    let gu = e.g_u_norm();
    let gw = e.g_w_norm();

    let mut res_u = 0.0f64;
    if opts.delta_u > 0.0 {
        let mut template = u_star.clone();
        template.axpy(0.0, &e.grad_u)?;
        let mut candidates = Vec::with_capacity(opts.sample_count + 2);
        if gu > 0.0 {
            for s in [1.0, -1.0] {
                let mut u = u_star.clone();
                u.axpy(s * opts.delta_u / gu, &e.grad_u)?;
                candidates.push(u);
            }
        }
        for _ in 0..opts.sample_count {
            let d = random_u(&template, &Radii::uniform(1.0), rng);
            let d = scale_to_joint_ball(d, opts.delta_u, rng);
            let mut u = u_star.clone();
            u.axpy(1.0, &d)?;
            candidates.push(u);
        }
        for u in candidates {
            let u = project(&u, radii);
            let h = problem.value(w_star, &u, &full, 0)?;
            res_u = res_u.max(h - h_star);
        }
    }

    let mut res_w = 0.0f64;
    if opts.delta_w > 0.0 {
        let mut candidates = Vec::with_capacity(opts.sample_count + 2);
        if gw > 0.0 {
            for s in [1.0, -1.0] {
                candidates.push(w_star.iter().zip(&e.grad_w).map(|(w, g)| w + s * opts.delta_w * g / gw).collect());
            }
        }
        for _ in 0..opts.sample_count {
            let d = random_in_ball(w_star.len(), opts.delta_w, rng);
            candidates.push(w_star.iter().zip(&d).map(|(w, d)| w + d).collect::<Vec<f64>>());
        }
        for w in candidates {
            let mut u = u_star.clone();
            let mut best = f64::NEG_INFINITY;
            for _ in 0..opts.inner_steps {
                let ev = problem.evaluate(&w, &u, &full, 0)?;
                best = best.max(ev.h);
                u = ascent_update(&u, &ev.grad_u, opts.inner_lr, radii)?;
            }
            best = best.max(problem.value(&w, &u, &full, 0)?);
            res_w = res_w.max(h_star - best);
        }
    }

    Ok(ResidualReport {
        res_u,
        res_w,
        first_order_u: opts.delta_u * gu + (constants.m + 1.0) / 2.0 * opts.delta_u * opts.delta_u,
        first_order_w: opts.delta_w * gw + (constants.l_w + 1.0) / 2.0 * opts.delta_w * opts.delta_w,
        grad_u_norm: gu,
        grad_w_norm: gw,
        epsilon: epsilon(constants, opts.delta_u, opts.delta_w),
    })
}

/// Rescales a random direction to a uniform point of the joint ball of
/// radius `r` across all blocks.
fn scale_to_joint_ball<R: Rng + ?Sized>(mut d: PlayerU, r: f64, rng: &mut R) -> PlayerU {
    let dim = d.delta_x.values().map(Tensor::len).sum::<usize>()
        + d.delta_phi.values().map(Tensor::len).sum::<usize>()
        + d.delta_w.len();
    let n = d.norm();
    if n == 0.0 || dim == 0 {
        return d;
    }
    let s = r * rng.gen::<f64>().powf(1.0 / dim as f64) / n;
    for t in d.delta_x.values_mut().chain(d.delta_phi.values_mut()) {
        t.data_mut().iter_mut().for_each(|v| *v *= s);
    }
    d.delta_w.iter_mut().for_each(|v| *v *= s);
    d
}

/// The smooth nonconvex problem used for rate fits: a two-layer GNN on one
/// fixed 8-vertex snapshot with edge features, dropout off, all three
/// perturbation terms on, and quadratic penalties on both players.
pub struct RateToy {
    pub problem: PenalizedAdversary<FixedGnnGame>,
    pub w0: Vec<f64>,
    pub config: GameConfig,
    pub model: ModelConfig,
}

pub const RATE_TOY_LAMBDA: f64 = 50.0;
pub const RATE_TOY_MU: f64 = 1.0;
pub const RATE_GRID: [usize; 4] = [100, 1_000, 10_000, 100_000];

impl RateToy {
    /// Settings for the sweep over `ζ` (one outer iteration each).
    pub fn ascent_config(&self) -> GameConfig {
        GameConfig {
            alpha_u: 0.2,
            ..self.config.clone()
        }
    }

    /// Settings for the sweep over `ρ`: one ascent step per outer iteration.
    pub fn descent_config(&self) -> GameConfig {
        GameConfig {
            zeta: 1,
            alpha_u: 0.02,
            alpha_w: 0.5,
            ..self.config.clone()
        }
    }
}

pub fn rate_toy(seed: u64) -> Result<RateToy> {
    let synth = SynthConfig {
        num_tasks: 1,
        universe_size: 16,
        vertices_per_task: 8,
        feature_dim: 4,
        edge_feature_dim: 2,
        p_in: 0.5,
        p_out: 0.2,
        ..SynthConfig::default()
    };
    let stream = synth_verg_stream(&synth, seed)?;
    let task = &stream.tasks[0];
    let model = ModelConfig {
        nlays: 2,
        hc: 4,
        drop: 0.0,
        leaky_slope: 0.2,
        in_dim: stream.universe.feature_dim,
        out_dim: stream.num_classes_total,
        edge_dim: stream.universe.edge_width(),
    };
    let config = GameConfig {
        zeta: 10,
        rho: 10,
        alpha_u: 0.2,
        alpha_w: 0.5,
        batch_b: 2,
        optimizer: Optimizer::Sgd,
        dropout: false,
        seed,
        ..GameConfig::default()
    };
    let items = task_items(task, &task.labeled_items());
    let w0 = init_params(&model, seed).map_err(GameError::from)?.values;
    Ok(RateToy {
        problem: PenalizedAdversary {
            inner: FixedGnnGame {
                cost: GnnCost::new(&model, &config),
                items,
                batch_b: config.batch_b,
            },
            lambda: RATE_TOY_LAMBDA,
            mu: RATE_TOY_MU,
        },
        w0,
        config,
        model,
    })
}

/// The bilinear-quadratic toy with a closed-form saddle at `w = c`,
/// `u = s(c)`.
pub fn saddle_toy() -> SaddleToy {
    SaddleToy {
        beta: 1.0,
        a: vec![vec![0.5, 0.2], vec![-0.1, 0.4]],
        s0: vec![0.3, -0.2],
        c: vec![0.6, -0.4],
    }
}

/// Rates under which the trainer reaches the toy's saddle: ascent rate 0.5
/// per step, descent rate 0.1 per step.
pub fn saddle_toy_config() -> GameConfig {
    let zeta = 50;
    GameConfig {
        beta1: 1.0,
        beta2: 1.0,
        beta3: 1.0,
        zeta,
        rho: 400,
        alpha_u: 0.5 * (zeta as f64).sqrt(),
        alpha_w: 2.0,
        r_x: 10.0,
        r_phi: 10.0,
        r_w: 10.0,
        batch_b: 2,
        optimizer: Optimizer::Sgd,
        dropout: false,
        ..GameConfig::default()
    }
}

/// Stream used by each ablation seed.
#[derive(Debug, Clone)]
pub enum StreamSource {
    Fixed(TaskStream),
    /// A fresh synthetic stream per seed.
    Synth(SynthConfig),
}

impl StreamSource {
    pub fn stream(&self, seed: u64) -> Result<TaskStream> {
        match self {
            StreamSource::Fixed(s) => Ok(s.clone()),
            StreamSource::Synth(c) => Ok(synth_verg_stream(c, seed)?),
        }
    }
}

pub const ABLATION_VARIANTS: [Method; 3] = [Method::Game, Method::NoGame, Method::Replay];

/// Three two-way node tasks whose class means move at every task.
pub fn drift_stream_config() -> SynthConfig {
    SynthConfig {
        num_tasks: 3,
        classes_per_task: 2,
        vertices_per_task: 60,
        universe_size: 240,
        drift: 1.0,
        ..SynthConfig::default()
    }
}

/// Game settings for the ablation on [`drift_stream_config`]: small
/// feature balls, a unit weight ball and a buffer of 20 items.
pub fn ablation_game_config() -> GameConfig {
    GameConfig {
        beta1: 1.0,
        beta2: 1.0,
        beta3: 1.0,
        rho: 200,
        zeta: 5,
        alpha_u: 1.0,
        alpha_w: 0.01,
        r_x: 0.05,
        r_phi: 0.05,
        r_w: 1.0,
        batch_b: 32,
        buffer_capacity: 20,
        optimizer: Optimizer::Adam,
        ..GameConfig::default()
    }
}

/// Layers, hidden width and dropout used with [`ablation_game_config`].
pub const ABLATION_MODEL: (usize, usize, f64) = (2, 16, 0.0);

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub method: &'static str,
    pub seed: u64,
    pub fm: f64,
    pub pm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VariantSummary {
    pub method: &'static str,
    pub fm_mean: f64,
    pub fm_std: f64,
    pub pm_mean: f64,
    pub pm_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub summaries: Vec<VariantSummary>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

impl AblationReport {
    pub fn fm_of(&self, method: Method) -> Vec<f64> {
        self.rows.iter().filter(|r| r.method == method.as_str()).map(|r| r.fm).collect()
    }

    pub fn summary(&self, method: Method) -> Option<&VariantSummary> {
        self.summaries.iter().find(|s| s.method == method.as_str())
    }

    /// Fraction of seeds where `a` forgets strictly less than `b`.
    pub fn win_rate(&self, a: Method, b: Method) -> f64 {
        let fa = self.fm_of(a);
        let fb = self.fm_of(b);
        if fa.is_empty() {
            return 0.0;
        }
        fa.iter().zip(&fb).filter(|(x, y)| x < y).count() as f64 / fa.len() as f64
    }

    /// Rows as `method,seed,fm,pm`.
    pub fn write_csv<W: Write>(&self, out: W) -> std::result::Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["method", "seed", "fm", "pm"])?;
        for r in &self.rows {
            w.write_record([r.method.to_string(), r.seed.to_string(), format_float(r.fm), format_float(r.pm)])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs the full game, the game with the weight player and ascent switched
/// off, and plain replay, once per seed on the seed's stream.
pub fn run_ablation(
    source: &StreamSource,
    model: &ModelConfig,
    base: &GameConfig,
    seeds: &[u64],
) -> Result<AblationReport> {
    if seeds.len() < 2 {
        return Err(DiagnosticsError::InvalidArgument("ablation needs at least two seeds".into()));
    }
    let mut rows = Vec::with_capacity(3 * seeds.len());
    for &seed in seeds {
        let stream = source.stream(seed)?;
        if stream.tasks.len() < 2 {
            return Err(DiagnosticsError::InvalidArgument("ablation needs at least two tasks".into()));
        }
        for m in ABLATION_VARIANTS {
            let run = run_continual(&stream, model, base, m, seed)?;
            rows.push(AblationRow {
                method: m.as_str(),
                seed,
                fm: fm(&run.matrix)?,
                pm: pm(&run.matrix)?,
            });
        }
    }
    let summaries = ABLATION_VARIANTS
        .iter()
        .map(|m| {
            let fms: Vec<f64> = rows.iter().filter(|r| r.method == m.as_str()).map(|r| r.fm).collect();
            let pms: Vec<f64> = rows.iter().filter(|r| r.method == m.as_str()).map(|r| r.pm).collect();
            let (fm_mean, fm_std) = mean_std(&fms);
            let (pm_mean, pm_std) = mean_std(&pms);
            VariantSummary {
                method: m.as_str(),
                fm_mean,
                fm_std,
                pm_mean,
                pm_std,
            }
        })
        .collect();
    Ok(AblationReport { rows, summaries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::QuadraticToy;

    #[test]
    fn exact_law_gives_exact_slope() {
        let grid = [1e2, 1e3, 1e4, 1e5];
        let v: Vec<f64> = grid.iter().map(|z: &f64| 3.0 / z.sqrt()).collect();
        let f = fit_rate(&grid, &v).unwrap();
        assert!((f.slope + 0.5).abs() < 1e-10);
        assert!(f.half_width.abs() < 1e-8);
    }

    #[test]
    fn constant_data_has_zero_slope() {
        let f = fit_rate(&[1.0, 10.0, 100.0, 1000.0], &[2.0; 4]).unwrap();
        assert!(f.slope.abs() < 1e-12);
        assert!(!f.slope_within(-1.2, -0.3));
    }

    #[test]
    fn short_grids_are_rejected() {
        assert!(matches!(fit_rate(&[1.0, 10.0, 100.0], &[1.0; 3]), Err(DiagnosticsError::InsufficientGrid(_))));
        assert!(matches!(fit_rate(&[1.0, 2.0, 3.0, 4.0], &[1.0; 4]), Err(DiagnosticsError::InsufficientGrid(_))));
        assert!(matches!(fit_rate(&[1.0, 10.0, 10.0, 100.0], &[1.0; 4]), Err(DiagnosticsError::InsufficientGrid(_))));
    }

    #[test]
    fn epsilon_variants_reduce_to_quadratic_terms_without_gradients() {
        let c = TheoryConstants {
            m: 1.0,
            l_w: 3.0,
            g: 0.0,
            g_x: 0.0,
            g_phi: 0.0,
            g_w: 0.0,
            g_bar: 0.0,
            beta: 0.5,
            b: 4,
            n: 16,
        };
        let e = epsilon(&c, 0.1, 0.2);
        assert!((e.main_u - 0.01).abs() < 1e-15);
        assert!((e.supplement_u - 0.01).abs() < 1e-15);
        assert!((e.main_uw - (2.0 * 0.04 + 0.01)).abs() < 1e-15);
        assert!((e.supplement_uw - e.main_uw).abs() < 1e-15);
    }

    #[test]
    fn identity_gradient_constants() {
        let toy = QuadraticToy {
            c: vec![0.0; 3],
            xs: vec![vec![0.0; 3]; 4],
            betas: crate::game::Betas::ZERO,
            batch_b: 2,
        };
        let region = SamplingRegion {
            w0: vec![0.0; 3],
            r_w: 1.0,
            radii: Radii::uniform(1.0),
            b: 2,
            n: 4,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = estimate_constants(&toy, &region, 2000, &mut rng).unwrap();
        assert!((c.l_w - 1.0).abs() < 1e-9, "{}", c.l_w);
        assert!(c.g <= 1.0 && c.g > 0.9, "{}", c.g);
        assert_eq!(c.m, 0.0);
        assert_eq!(c.g_bar, c.g_x + c.g_phi + c.g_w);
    }

    #[test]
    fn residual_vanishes_at_analytic_saddle() {
        let toy = SaddleToy {
            beta: 1.0,
            a: vec![vec![0.5, 0.0], vec![0.0, -0.3]],
            s0: vec![0.1, 0.2],
            c: vec![0.3, -0.4],
        };
        let (u, w) = toy.analytic_saddle();
        let u = toy.u_of(u);
        let c = TheoryConstants {
            m: 1.0,
            l_w: 1.0,
            g: 1.0,
            g_x: 1.0,
            g_phi: 0.0,
            g_w: 0.0,
            g_bar: 1.0,
            beta: 1.0,
            b: 1,
            n: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut prev = f64::INFINITY;
        for d in [0.1, 0.05, 0.01] {
            let opts = ResidualOptions {
                delta_u: d,
                delta_w: d,
                sample_count: 200,
                inner_steps: 50,
                inner_lr: 0.5,
            };
            let r = equilibrium_residual(&toy, &w, &u, &Radii::uniform(10.0), &c, &opts, &mut rng).unwrap();
            assert!(r.res_u <= 2.0 * d * d + 1e-12 && r.res_w <= 2.0 * d * d + 1e-12, "{r:?}");
            assert!(r.res_u <= r.first_order_u && r.res_w <= r.first_order_w);
            assert!(r.res_u.max(r.res_w) <= prev + 1e-12);
            prev = r.res_u.max(r.res_w);
        }
    }

    #[test]
    fn residual_is_zero_for_zero_delta_u() {
        let toy = SaddleToy {
            beta: 1.0,
            a: vec![vec![1.0]],
            s0: vec![0.0],
            c: vec![0.0],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let opts = ResidualOptions {
            delta_u: 0.0,
            delta_w: 0.1,
            sample_count: 10,
            inner_steps: 5,
            inner_lr: 0.5,
        };
        let c = estimate_constants(
            &toy,
            &SamplingRegion {
                w0: vec![0.0],
                r_w: 1.0,
                radii: Radii::uniform(1.0),
                b: 1,
                n: 1,
            },
            10,
            &mut rng,
        )
        .unwrap();
        let r = equilibrium_residual(&toy, &[2.0], &toy.u_of(vec![2.0]), &Radii::uniform(5.0), &c, &opts, &mut rng)
            .unwrap();
        assert_eq!(r.res_u, 0.0);
        assert!(r.res_w > r.grad_w_norm * 0.1 / 2.0, "{r:?}");
    }

    #[test]
    fn trainer_reaches_the_toy_saddle() {
        let toy = saddle_toy();
        let cfg = saddle_toy_config();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = run_sgda(&toy, &[0.0, 0.0], &cfg, 0, &mut rng, Probe::Off).unwrap();
        let (u_star, w_star) = toy.analytic_saddle();
        assert!(w_diff_norm(&out.w, &w_star) < 1e-3);
        assert!(w_diff_norm(&toy.u_vec(&out.u), &u_star) < 1e-3);
    }
}
