//! Random hyperparameter search, top-quantile selection and a Gaussian
//! copula over the selected configurations.

use std::io::{Read, Write};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::canonical::format_float;
use crate::game::GameConfig;
use crate::gnn::ModelConfig;
use crate::graph::TaskStream;
use crate::metrics::{fm, pm};
use crate::pipeline::{run_continual, Method};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HpoError {
    #[error("invalid search space: {0}")]
    InvalidSpace(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("no successful trials")]
    NoSuccessfulTrials,
    #[error("trial log: {0}")]
    Csv(String),
}

pub type Result<T> = std::result::Result<T, HpoError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Hyper {
    Nlays,
    Drop,
    Hc,
    AlphaW,
    AlphaU,
    Rho,
    Zeta,
    Beta,
}

impl Hyper {
    pub const ALL: [Hyper; 8] = [
        Hyper::Nlays,
        Hyper::Drop,
        Hyper::Hc,
        Hyper::AlphaW,
        Hyper::AlphaU,
        Hyper::Rho,
        Hyper::Zeta,
        Hyper::Beta,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Hyper::Nlays => "nlays",
            Hyper::Drop => "drop",
            Hyper::Hc => "hc",
            Hyper::AlphaW => "alpha_w",
            Hyper::AlphaU => "alpha_u",
            Hyper::Rho => "rho",
            Hyper::Zeta => "zeta",
            Hyper::Beta => "beta",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DimKind {
    Int { lo: i64, hi: i64 },
    Real { lo: f64, hi: f64 },
    LogReal { lo: f64, hi: f64 },
}

impl DimKind {
    fn validate(&self) -> std::result::Result<(), String> {
        match *self {
            DimKind::Int { lo, hi } if lo > hi => Err(format!("empty integer range [{lo}, {hi}]")),
            DimKind::Real { lo, hi } if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() => {
                Err(format!("bad real range [{lo}, {hi}]"))
            }
            DimKind::LogReal { lo, hi } if !(lo > 0.0 && lo <= hi) || !hi.is_finite() => {
                Err(format!("bad log range [{lo}, {hi}]"))
            }
            _ => Ok(()),
        }
    }

    fn bounds(&self) -> (f64, f64) {
        match *self {
            DimKind::Int { lo, hi } => (lo as f64, hi as f64),
            DimKind::Real { lo, hi } | DimKind::LogReal { lo, hi } => (lo, hi),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            DimKind::Int { lo, hi } => rng.gen_range(lo..=hi) as f64,
            DimKind::Real { lo, hi } => {
                if lo == hi {
                    lo
                } else {
                    rng.gen_range(lo..hi)
                }
            }
            DimKind::LogReal { lo, hi } => {
                if lo == hi {
                    lo
                } else {
                    10f64.powf(rng.gen_range(lo.log10()..hi.log10())).clamp(lo, hi)
                }
            }
        }
    }

    /// Rounds integer dimensions and clamps everything to the bounds.
    pub fn snap(&self, v: f64) -> f64 {
        let (lo, hi) = self.bounds();
        let v = match self {
            DimKind::Int { .. } => v.round(),
            _ => v,
        };
        v.clamp(lo, hi)
    }

    pub fn contains(&self, v: f64) -> bool {
        let (lo, hi) = self.bounds();
        let int_ok = !matches!(self, DimKind::Int { .. }) || v.fract() == 0.0;
        v >= lo && v <= hi && int_ok
    }
}

/// One range per hyperparameter, in the order of [`Hyper::ALL`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HpoSpace {
    pub dims: [DimKind; 8],
}

impl Default for HpoSpace {
    fn default() -> Self {
        Self {
            dims: [
                DimKind::Int { lo: 1, hi: 4 },
                DimKind::Real { lo: 0.0, hi: 0.8 },
                DimKind::Int { lo: 4, hi: 64 },
                DimKind::LogReal { lo: 1e-7, hi: 1e-1 },
                DimKind::LogReal { lo: 1e-7, hi: 1e-1 },
                DimKind::Int { lo: 1, hi: 4000 },
                DimKind::Int { lo: 1, hi: 64 },
                DimKind::Real { lo: 0.0, hi: 1.0 },
            ],
        }
    }
}

impl HpoSpace {
    pub fn validate(&self) -> Result<()> {
        for (h, d) in Hyper::ALL.iter().zip(&self.dims) {
            d.validate().map_err(|m| HpoError::InvalidSpace(format!("{}: {m}", h.name())))?;
        }
        Ok(())
    }

    pub fn dim(&self, h: Hyper) -> &DimKind {
        &self.dims[h as usize]
    }

    pub fn set(&mut self, h: Hyper, kind: DimKind) {
        self.dims[h as usize] = kind;
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.dims.iter().map(|d| d.sample(rng)).collect()
    }

    pub fn contains(&self, values: &[f64]) -> bool {
        values.len() == 8 && self.dims.iter().zip(values).all(|(d, v)| d.contains(*v))
    }

    /// The model and game configurations a sampled point stands for.
    pub fn apply(values: &[f64], model: &ModelConfig, game: &GameConfig) -> (ModelConfig, GameConfig) {
        let get = |h: Hyper| values[h as usize];
        let model = ModelConfig {
            nlays: get(Hyper::Nlays) as usize,
            drop: get(Hyper::Drop),
            hc: get(Hyper::Hc) as usize,
            ..model.clone()
        };
        let beta = get(Hyper::Beta);
        let game = GameConfig {
            alpha_w: get(Hyper::AlphaW),
            alpha_u: get(Hyper::AlphaU),
            rho: get(Hyper::Rho) as usize,
            zeta: get(Hyper::Zeta) as usize,
            beta1: beta,
            beta2: beta,
            beta3: beta,
            ..game.clone()
        };
        (model, game)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    /// One value per [`Hyper::ALL`] entry.
    pub values: Vec<f64>,
    /// Forgetting mean; `+∞` for a failed trial.
    pub fm: f64,
    pub pm: f64,
    pub seed: u64,
    pub runtime_s: f64,
}

impl TrialRecord {
    pub fn succeeded(&self) -> bool {
        self.fm.is_finite()
    }
}

/// Samples `n_trials` points and runs the game on `stream` for each. A
/// trial that errors is kept with `fm = +∞`.
pub fn random_search<R: Rng + ?Sized>(
    space: &HpoSpace,
    n_trials: usize,
    stream: &TaskStream,
    model: &ModelConfig,
    base: &GameConfig,
    rng: &mut R,
) -> Result<Vec<TrialRecord>> {
    space.validate()?;
    if n_trials == 0 {
        return Err(HpoError::InvalidArgument("n_trials must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(n_trials);
    for trial in 0..n_trials {
        let values = space.sample(rng);
        let seed: u64 = rng.gen();
        let (m, g) = HpoSpace::apply(&values, model, base);
        let start = Instant::now();
        let scored = run_continual(stream, &m, &g, Method::Game, seed)
            .ok()
            .and_then(|r| Some((fm(&r.matrix).ok()?, pm(&r.matrix).ok()?)));
        let (f, p) = scored.unwrap_or((f64::INFINITY, f64::NAN));
        out.push(TrialRecord {
            trial,
            values,
            fm: f,
            pm: p,
            seed,
            runtime_s: start.elapsed().as_secs_f64(),
        });
    }
    Ok(out)
}

/// The `⌈q·n⌉` successful records with the smallest FM, `n` counting
/// successful records only. Ties keep trial order.
pub fn top_quantile(records: &[TrialRecord], q: f64) -> Result<Vec<TrialRecord>> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(HpoError::InvalidArgument(format!("quantile {q} outside (0, 1]")));
    }
    let mut ok: Vec<&TrialRecord> = records.iter().filter(|r| r.succeeded()).collect();
    if ok.is_empty() {
        return Err(HpoError::NoSuccessfulTrials);
    }
    ok.sort_by(|a, b| a.fm.total_cmp(&b.fm).then(a.trial.cmp(&b.trial)));
    let k = ((q * ok.len() as f64).ceil() as usize).clamp(1, ok.len());
    Ok(ok.into_iter().take(k).cloned().collect())
}

pub const COPULA_SHRINKAGE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct CopulaModel {
    pub kinds: Vec<DimKind>,
    /// Sorted observations per dimension.
    pub marginals: Vec<Vec<f64>>,
    /// The constant of a degenerate dimension.
    pub point_mass: Vec<Option<f64>>,
    /// Shrunk correlation of the normal scores.
    pub correlation: DMatrix<f64>,
    pub cholesky: DMatrix<f64>,
}

/// Average ranks (1-based), ties sharing the midpoint rank.
pub fn midranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// Fits the copula to `rows` (one value per dimension each). A constant
/// dimension becomes a point mass with no correlation to the others.
pub fn copula_fit(rows: &[Vec<f64>], kinds: &[DimKind]) -> Result<CopulaModel> {
    let n = rows.len();
    let d = kinds.len();
    if n < 3 {
        return Err(HpoError::InvalidArgument(format!("copula needs at least 3 records, got {n}")));
    }
    if d == 0 {
        return Err(HpoError::InvalidArgument("copula needs at least one dimension".into()));
    }
    if rows.iter().any(|r| r.len() != d) {
        return Err(HpoError::InvalidArgument("rows differ in length from the dimension list".into()));
    }
    let normal = std_normal();
    let mut marginals = Vec::with_capacity(d);
    let mut point_mass = Vec::with_capacity(d);
    let mut scores: Vec<Vec<f64>> = Vec::with_capacity(d);
    for k in 0..d {
        let col: Vec<f64> = rows.iter().map(|r| r[k]).collect();
        let mut sorted = col.clone();
        sorted.sort_by(f64::total_cmp);
        let constant = sorted[0] == sorted[n - 1];
        point_mass.push(constant.then_some(sorted[0]));
        let z: Vec<f64> = if constant {
            vec![0.0; n]
        } else {
            midranks(&col)
                .iter()
                .map(|r| normal.inverse_cdf(r / (n as f64 + 1.0)))
                .collect()
        };
        scores.push(z);
        marginals.push(sorted);
    }
    let mut corr = DMatrix::<f64>::identity(d, d);
    for a in 0..d {
        for b in (a + 1)..d {
            if point_mass[a].is_some() || point_mass[b].is_some() {
                continue;
            }
            let c = pearson(&scores[a], &scores[b]);
            corr[(a, b)] = c;
            corr[(b, a)] = c;
        }
    }
    let shrunk = corr.scale(1.0 - COPULA_SHRINKAGE) + DMatrix::<f64>::identity(d, d).scale(COPULA_SHRINKAGE);
    let cholesky = shrunk
        .clone()
        .cholesky()
        .ok_or_else(|| HpoError::InvalidArgument("correlation not positive definite".into()))?
        .l();
    Ok(CopulaModel {
        kinds: kinds.to_vec(),
        marginals,
        point_mass,
        correlation: shrunk,
        cholesky,
    })
}

pub fn copula_fit_records(records: &[TrialRecord], space: &HpoSpace) -> Result<CopulaModel> {
    let rows: Vec<Vec<f64>> = records.iter().map(|r| r.values.clone()).collect();
    copula_fit(&rows, &space.dims)
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

/// Spearman rank correlation with midranks.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&midranks(a), &midranks(b))
}

/// Linear interpolation between order statistics placed at `k/(n+1)`.
fn invert_marginal(sorted: &[f64], u: f64) -> f64 {
    let n = sorted.len();
    let pos = (u * (n as f64 + 1.0) - 1.0).clamp(0.0, (n - 1) as f64);
    let i = pos.floor() as usize;
    if i + 1 >= n {
        return sorted[n - 1];
    }
    let t = pos - i as f64;
    sorted[i] + t * (sorted[i + 1] - sorted[i])
}

pub fn copula_sample<R: Rng + ?Sized>(model: &CopulaModel, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let d = model.kinds.len();
    let normal = std_normal();
    (0..n)
        .map(|_| {
            let e = nalgebra::DVector::<f64>::from_iterator(d, (0..d).map(|_| rng.sample(StandardNormal)));
            let z = &model.cholesky * e;
            (0..d)
                .map(|k| match model.point_mass[k] {
                    Some(c) => c,
                    None => model.kinds[k].snap(invert_marginal(&model.marginals[k], normal.cdf(z[k]))),
                })
                .collect()
        })
        .collect()
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (n, m) = (x.len() as f64, y.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < x.len() && j < y.len() {
        let v = x[i].min(y[j]);
        while i < x.len() && x[i] <= v {
            i += 1;
        }
        while j < y.len() && y[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    d
}

const TRIAL_COLUMNS: [&str; 13] = [
    "trial", "nlays", "drop", "hc", "alpha_w", "alpha_u", "rho", "zeta", "beta", "FM", "PM", "seed", "runtime_s",
];

pub fn write_trials_csv<W: Write>(records: &[TrialRecord], out: W) -> Result<()> {
    let err = |e: csv::Error| HpoError::Csv(e.to_string());
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRIAL_COLUMNS).map_err(err)?;
    for r in records {
        let mut row = vec![r.trial.to_string()];
        row.extend(r.values.iter().map(|v| format_float(*v)));
        row.push(format_float(r.fm));
        row.push(format_float(r.pm));
        row.push(r.seed.to_string());
        row.push(format_float(r.runtime_s));
        w.write_record(&row).map_err(err)?;
    }
    w.flush().map_err(|e| HpoError::Csv(e.to_string()))
}

pub fn read_trials_csv<R: Read>(input: R) -> Result<Vec<TrialRecord>> {
    let mut rd = csv::Reader::from_reader(input);
    let headers = rd.headers().map_err(|e| HpoError::Csv(e.to_string()))?.clone();
    if headers.iter().ne(TRIAL_COLUMNS.iter().copied()) {
        return Err(HpoError::Csv(format!("unexpected header {headers:?}")));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|e| HpoError::Csv(format!("{s}: {e}")));
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row.map_err(|e| HpoError::Csv(e.to_string()))?;
        out.push(TrialRecord {
            trial: row[0].parse().map_err(|e| HpoError::Csv(format!("trial: {e}")))?,
            values: (1..9).map(|i| num(&row[i])).collect::<Result<_>>()?,
            fm: num(&row[9])?,
            pm: num(&row[10])?,
            seed: row[11].parse().map_err(|e| HpoError::Csv(format!("seed: {e}")))?,
            runtime_s: num(&row[12])?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rec(trial: usize, fm: f64) -> TrialRecord {
        TrialRecord {
            trial,
            values: vec![1.0; 8],
            fm,
            pm: 0.5,
            seed: 0,
            runtime_s: 0.0,
        }
    }

    #[test]
    fn top_quantile_by_hand() {
        let r = vec![rec(0, 0.3), rec(1, 0.1), rec(2, 0.2)];
        let t = top_quantile(&r, 0.33).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].fm, 0.1);
        assert_eq!(top_quantile(&r, 1.0).unwrap().len(), 3);
        assert_eq!(top_quantile(&r, 0.34).unwrap().len(), 2);
    }

    #[test]
    fn failed_trials_are_excluded() {
        let r = vec![rec(0, f64::INFINITY), rec(1, 0.2)];
        let t = top_quantile(&r, 1.0).unwrap();
        assert_eq!(t.len(), 1);
        assert!(matches!(top_quantile(&[rec(0, f64::INFINITY)], 0.5), Err(HpoError::NoSuccessfulTrials)));
    }

    #[test]
    fn ties_keep_trial_order() {
        let r = vec![rec(3, 0.1), rec(1, 0.1), rec(2, 0.1)];
        let t = top_quantile(&r, 0.5).unwrap();
        assert_eq!(t.iter().map(|r| r.trial).collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn midranks_share_ties() {
        assert_eq!(midranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn ks_of_identical_samples_is_zero() {
        let a = [0.3, 0.1, 0.2];
        assert_eq!(ks_statistic(&a, &a), 0.0);
        assert_eq!(ks_statistic(&[0.0, 0.1], &[1.0, 2.0]), 1.0);
    }

    #[test]
    fn comonotone_pair_is_fully_correlated() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rows: Vec<Vec<f64>> = (0..200)
            .map(|_| {
                let x: f64 = rng.gen();
                vec![x, x]
            })
            .collect();
        let kinds = [DimKind::Real { lo: 0.0, hi: 1.0 }; 2];
        let m = copula_fit(&rows, &kinds).unwrap();
        assert!(m.correlation[(0, 1)] >= 0.99);
    }

    #[test]
    fn constant_dimension_is_a_point_mass() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64 / 10.0, 3.0]).collect();
        let kinds = [DimKind::Real { lo: 0.0, hi: 1.0 }, DimKind::Int { lo: 1, hi: 4 }];
        let m = copula_fit(&rows, &kinds).unwrap();
        assert_eq!(m.point_mass[1], Some(3.0));
        assert_eq!(m.correlation[(0, 1)], 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(copula_sample(&m, 100, &mut rng).iter().all(|r| r[1] == 3.0));
    }

    #[test]
    fn single_point_space_gives_that_config() {
        let mut space = HpoSpace::default();
        for d in space.dims.iter_mut() {
            *d = match d {
                DimKind::Int { lo, .. } => DimKind::Int { lo: *lo, hi: *lo },
                DimKind::Real { lo, .. } => DimKind::Real { lo: *lo, hi: *lo },
                DimKind::LogReal { hi, .. } => DimKind::LogReal { lo: *hi, hi: *hi },
            };
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = space.sample(&mut rng);
        assert_eq!(v, vec![1.0, 0.0, 4.0, 0.1, 0.1, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn trial_csv_round_trip() {
        let r = vec![rec(0, 0.25), rec(1, f64::INFINITY)];
        let mut buf = Vec::new();
        write_trials_csv(&r, &mut buf).unwrap();
        let back = read_trials_csv(buf.as_slice()).unwrap();
        assert_eq!(back[0], r[0]);
        assert!(back[1].fm.is_infinite());
    }
}
