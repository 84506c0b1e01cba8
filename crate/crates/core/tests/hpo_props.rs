use gclgame::hpo::{
    copula_fit, copula_sample, ks_statistic, spearman, top_quantile, DimKind, HpoSpace, Hyper, TrialRecord,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};

/// Asymptotic Kolmogorov tail, `P(sqrt(n) D > t)`.
fn kolmogorov_p(d: f64, n: usize) -> f64 {
    let t = (n as f64).sqrt() * d;
    let s: f64 = (1..100)
        .map(|k| {
            let k = k as f64;
            (-1f64).powf(k - 1.0) * (-2.0 * k * k * t * t).exp()
        })
        .sum();
    (2.0 * s).clamp(0.0, 1.0)
}

fn record(trial: usize, fm: f64) -> TrialRecord {
    TrialRecord {
        trial,
        values: vec![0.0; 8],
        fm,
        pm: 0.0,
        seed: 0,
        runtime_s: 0.0,
    }
}

#[test]
fn log_real_exponents_are_uniform() {
    let kind = DimKind::LogReal { lo: 1e-7, hi: 1e-3 };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 5000;
    let mut logs: Vec<f64> = (0..n).map(|_| kind.sample(&mut rng).log10()).collect();
    logs.sort_by(f64::total_cmp);
    let d = logs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = (x + 7.0) / 4.0;
            (f - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - f).abs())
        })
        .fold(0.0, f64::max);
    let p = kolmogorov_p(d, n);
    assert!(p > 0.01, "KS D = {d}, p = {p}");
}

#[test]
fn sampled_configs_stay_in_bounds() {
    let space = HpoSpace::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10_000 {
        let v = space.sample(&mut rng);
        assert!(space.contains(&v), "{v:?}");
    }
    assert_eq!(Hyper::ALL.len(), space.dims.len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn top_quantile_is_idempotent(fms in prop::collection::vec(prop_oneof![0.0f64..1.0, Just(f64::INFINITY), Just(0.5)], 1..40), q in 0.01f64..=1.0) {
        let records: Vec<TrialRecord> = fms.iter().enumerate().map(|(i, &f)| record(i, f)).collect();
        let ok = records.iter().filter(|r| r.succeeded()).count();
        prop_assume!(ok > 0);
        let top = top_quantile(&records, q).unwrap();
        prop_assert_eq!(top.len(), ((q * ok as f64).ceil() as usize).clamp(1, ok));
        prop_assert_eq!(top_quantile(&top, 1.0).unwrap(), top.clone());
        let worst_kept = top.iter().map(|r| r.fm).fold(f64::NEG_INFINITY, f64::max);
        let dropped = records.iter().filter(|r| r.succeeded() && !top.contains(r));
        for r in dropped {
            prop_assert!(r.fm >= worst_kept);
        }
    }
}

/// Correlated data with mixed marginals: a gaussian pair, a skewed one and
/// an integer dimension.
fn mixed_rows(n: usize, rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<DimKind>) {
    let rows = (0..n)
        .map(|_| {
            let e: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(&mut *rng));
            let z0 = e[0];
            let z1 = 0.7 * z0 + 0.71 * e[1];
            let z2 = -0.5 * z0 + 0.87 * e[2];
            let normal = Normal::new(0.0, 1.0).unwrap();
            vec![
                normal.cdf(z0) * 0.8,
                10f64.powf(-7.0 + 6.0 * normal.cdf(z1)),
                (1.0 + 63.0 * normal.cdf(z2)).round(),
            ]
        })
        .collect();
    let kinds = vec![
        DimKind::Real { lo: 0.0, hi: 0.8 },
        DimKind::LogReal { lo: 1e-7, hi: 1e-1 },
        DimKind::Int { lo: 1, hi: 64 },
    ];
    (rows, kinds)
}

fn column(rows: &[Vec<f64>], j: usize) -> Vec<f64> {
    rows.iter().map(|r| r[j]).collect()
}

#[test]
fn copula_round_trip_keeps_marginals_and_ranks() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..5 {
        let (rows, kinds) = mixed_rows(60, &mut rng);
        let model = copula_fit(&rows, &kinds).unwrap();
        let samples = copula_sample(&model, 1000, &mut rng);
        for (j, kind) in kinds.iter().enumerate() {
            let fitted = column(&rows, j);
            let drawn = column(&samples, j);
            assert!(drawn.iter().all(|v| kind.contains(*v)));
            let d = ks_statistic(&fitted, &drawn);
            assert!(d <= 0.08, "dimension {j}: KS {d}");
        }
        for a in 0..kinds.len() {
            for b in a + 1..kinds.len() {
                let want = spearman(&column(&rows, a), &column(&rows, b));
                let got = spearman(&column(&samples, a), &column(&samples, b));
                assert!((want - got).abs() <= 0.1, "pair ({a}, {b}): {got} vs {want}");
            }
        }
    }
}

#[test]
fn independent_data_gives_small_correlation() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let rows: Vec<Vec<f64>> = (0..1000).map(|_| vec![rng.gen(), rng.gen()]).collect();
    let model = copula_fit(&rows, &[DimKind::Real { lo: 0.0, hi: 1.0 }; 2]).unwrap();
    assert!(model.correlation[(0, 1)].abs() <= 0.08, "{}", model.correlation[(0, 1)]);
    assert!((model.correlation[(0, 0)] - 1.0).abs() < 1e-12);
}

#[test]
fn spearman_sees_only_ranks() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a: Vec<f64> = (0..50).map(|_| rng.gen()).collect();
    let b: Vec<f64> = a.iter().map(|x| (5.0 * x).exp()).collect();
    assert!((spearman(&a, &b) - 1.0).abs() < 1e-12);
    let neg: Vec<f64> = a.iter().map(|x| -x).collect();
    assert!((spearman(&a, &neg) + 1.0).abs() < 1e-12);
}
