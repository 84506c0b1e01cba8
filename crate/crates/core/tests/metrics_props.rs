use gclgame::metrics::{accuracy, fm, matrix_from_log, micro_f1, pm, AccuracyMatrix, EvalRecord, ScoreKind};
use proptest::prelude::*;

/// Lower-triangular rows of size `t`.
fn triangle(t: usize, values: &[f64]) -> Vec<Vec<f64>> {
    let mut it = values.iter().copied();
    (0..t).map(|i| (0..=i).map(|_| it.next().unwrap()).collect()).collect()
}

/// Multiples of 1/1024 keep sums and differences exact.
fn dyadic(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((0u32..=1024).prop_map(|k| k as f64 / 1024.0), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn micro_f1_equals_accuracy(classes in 1usize..6, pairs in prop::collection::vec((0usize..6, 0usize..6), 1..60)) {
        let preds: Vec<usize> = pairs.iter().map(|p| p.0 % classes).collect();
        let labels: Vec<usize> = pairs.iter().map(|p| p.1 % classes).collect();
        let set: Vec<usize> = (0..classes).collect();
        prop_assert_eq!(micro_f1(&preds, &labels, &set).unwrap(), accuracy(&preds, &labels).unwrap());
    }

    #[test]
    fn fm_ignores_a_common_shift(t in 2usize..7, values in dyadic(28), shift in (-512i32..=512).prop_map(|k| k as f64 / 1024.0)) {
        let rows = triangle(t, &values);
        let shifted: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v + shift).collect()).collect();
        let a = fm(&AccuracyMatrix::from_rows(&rows, ScoreKind::Accuracy).unwrap()).unwrap();
        let b = fm(&AccuracyMatrix::from_rows(&shifted, ScoreKind::Accuracy).unwrap()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn pm_of_constant_diagonal(t in 1usize..9, k in 0u32..=1024, values in prop::collection::vec(0.0f64..1.0, 45), d in 0.0f64..1.0) {
        let exact = k as f64 / 1024.0;
        let mut rows = triangle(t, &values);
        for (i, r) in rows.iter_mut().enumerate() {
            r[i] = exact;
        }
        prop_assert_eq!(pm(&AccuracyMatrix::from_rows(&rows, ScoreKind::Accuracy).unwrap()).unwrap(), exact);
        for (i, r) in rows.iter_mut().enumerate() {
            r[i] = d;
        }
        let got = pm(&AccuracyMatrix::from_rows(&rows, ScoreKind::Accuracy).unwrap()).unwrap();
        prop_assert!((got - d).abs() <= 1e-15);
    }

    #[test]
    fn identical_rows_do_not_forget(t in 2usize..8, row in prop::collection::vec(0.0f64..1.0, 8)) {
        let rows: Vec<Vec<f64>> = (0..t).map(|i| row[..=i].to_vec()).collect();
        prop_assert_eq!(fm(&AccuracyMatrix::from_rows(&rows, ScoreKind::Accuracy).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn pm_fm_from_logs_match_brute_force(
        t in 2usize..6,
        n in 1usize..30,
        seed_preds in prop::collection::vec(0usize..4, 600),
        seed_labels in prop::collection::vec(0usize..4, 600),
    ) {
        let mut log = Vec::new();
        let mut cursor = 0;
        for after in 0..t {
            for task in 0..=after {
                let predictions = seed_preds[cursor..cursor + n].to_vec();
                let labels = seed_labels[cursor..cursor + n].to_vec();
                cursor = (cursor + n) % (600 - n);
                log.push(EvalRecord { after, task, predictions, labels, classes: (0..4).collect() });
            }
        }
        let m = matrix_from_log(&log, t, ScoreKind::Accuracy).unwrap();
        // brute force: count hits into a dense table, then the double loops
        let mut r = vec![vec![0.0; t]; t];
        for rec in &log {
            let mut hits = 0usize;
            for i in 0..rec.labels.len() {
                if rec.predictions[i] == rec.labels[i] {
                    hits += 1;
                }
            }
            r[rec.after][rec.task] = hits as f64 / rec.labels.len() as f64;
        }
        let mut diag = 0.0;
        for (k, row) in r.iter().enumerate() {
            diag += row[k];
        }
        let mut forget = 0.0;
        for k in 1..t {
            let mut s = 0.0;
            for j in 0..k {
                s += r[k - 1][j] - r[k][j];
            }
            forget += s / k as f64;
        }
        prop_assert_eq!(pm(&m).unwrap().to_bits(), (diag / t as f64).to_bits());
        prop_assert_eq!(fm(&m).unwrap().to_bits(), (forget / (t - 1) as f64).to_bits());
    }
}

#[test]
fn hand_checked_examples() {
    let m = AccuracyMatrix::from_rows(&[vec![0.9], vec![0.6, 0.8]], ScoreKind::Accuracy).unwrap();
    assert!((fm(&m).unwrap() - 0.3).abs() < 1e-15);
    assert!((pm(&m).unwrap() - 0.85).abs() < 1e-15);
    let flat = AccuracyMatrix::from_rows(&triangle(4, &[0.5; 10]), ScoreKind::Accuracy).unwrap();
    assert_eq!(fm(&flat).unwrap(), 0.0);
}
