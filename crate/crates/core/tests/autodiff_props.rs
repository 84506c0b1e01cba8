use std::sync::Arc;

use gclgame::autodiff::{dropout_mask, fd_gradient, relative_error, Tape, Tensor, Var};
use proptest::prelude::*;

const H: f64 = 1e-6;
const TOL: f64 = 1e-6;

type Build<'a> = dyn Fn(&mut Tape, Var, Var) -> Var + 'a;

fn tensor(rows: usize, cols: usize, data: &[f64]) -> Tensor {
    Tensor::new(vec![rows, cols], data[..rows * cols].to_vec()).unwrap()
}

/// `sum(build(a, b) ⊙ r)` for a fixed weighting `r`, so every output entry
/// reaches the scalar with its own coefficient.
fn weighted(build: &Build<'_>, a: &Tensor, b: &Tensor, r: &[f64], grads: bool) -> (f64, Tensor, Tensor) {
    let mut tape = Tape::new();
    let va = tape.var(a.clone());
    let vb = tape.var(b.clone());
    let y = build(&mut tape, va, vb);
    let shape = tape.value(y).shape().to_vec();
    let n = tape.value(y).len();
    let w = tape.constant(Tensor::new(shape, r[..n].to_vec()).unwrap());
    let prod = tape.mul(y, w).unwrap();
    let s = tape.sum(prod).unwrap();
    let value = tape.value(s).item();
    if !grads {
        return (value, Tensor::zeros(a.shape()), Tensor::zeros(b.shape()));
    }
    let g = tape.backward(s).unwrap();
    (value, g.get(va), g.get(vb))
}

fn check(build: &Build<'_>, a: &Tensor, b: &Tensor, r: &[f64]) -> (f64, f64) {
    let (_, ga, gb) = weighted(build, a, b, r, true);
    let fa = fd_gradient(|p| weighted(build, p, b, r, false).0, a, H);
    let fb = fd_gradient(|p| weighted(build, a, p, r, false).0, b, H);
    (relative_error(ga.data(), fa.data()), relative_error(gb.data(), fb.data()))
}

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_matches_fd(m in 1usize..=8, k in 1usize..=8, n in 1usize..=8, a in values(64), b in values(64), r in values(64)) {
        let (ea, eb) = check(&|t, x, y| t.matmul(x, y).unwrap(), &tensor(m, k, &a), &tensor(k, n, &b), &r);
        prop_assert!(ea < TOL && eb < TOL, "{ea} {eb}");
    }

    #[test]
    fn elementwise_binaries_match_fd(m in 1usize..=8, n in 1usize..=8, a in values(64), b in values(64), r in values(64)) {
        let (x, y) = (tensor(m, n, &a), tensor(m, n, &b));
        for build in [
            Box::new(|t: &mut Tape, x, y| t.add(x, y).unwrap()) as Box<Build>,
            Box::new(|t: &mut Tape, x, y| t.sub(x, y).unwrap()),
            Box::new(|t: &mut Tape, x, y| t.mul(x, y).unwrap()),
        ] {
            let (ea, eb) = check(&*build, &x, &y, &r);
            prop_assert!(ea < TOL && eb < TOL, "{ea} {eb}");
        }
    }

    #[test]
    fn add_row_and_concat_match_fd(m in 1usize..=8, n in 1usize..=8, a in values(64), b in values(64), r in values(128)) {
        let x = tensor(m, n, &a);
        let (ea, eb) = check(&|t, x, y| t.add_row(x, y).unwrap(), &x, &tensor(1, n, &b), &r);
        prop_assert!(ea < TOL && eb < TOL, "add_row {ea} {eb}");
        let (ea, eb) = check(&|t, x, y| t.concat(x, y, 0).unwrap(), &x, &tensor(m, n, &b), &r);
        prop_assert!(ea < TOL && eb < TOL, "concat rows {ea} {eb}");
        let (ea, eb) = check(&|t, x, y| t.concat(x, y, 1).unwrap(), &x, &tensor(m, n, &b), &r);
        prop_assert!(ea < TOL && eb < TOL, "concat cols {ea} {eb}");
    }

    #[test]
    fn unary_maps_match_fd(m in 1usize..=8, n in 1usize..=8, a in values(64), r in values(64), c in -3.0f64..3.0) {
        let x = tensor(m, n, &a);
        let dummy = Tensor::zeros(&[1, 1]);
        let positive = Tensor::new(vec![m, n], x.data().iter().map(|v| v.abs() + 0.5).collect()).unwrap();
        let cases: Vec<(&str, Box<Build>, &Tensor)> = vec![
            ("scale", Box::new(move |t, x, _| t.scale(x, c).unwrap()), &x),
            ("leaky_relu", Box::new(|t, x, _| t.leaky_relu(x, 0.2).unwrap()), &x),
            ("elu", Box::new(|t, x, _| t.elu(x).unwrap()), &x),
            ("exp", Box::new(|t, x, _| t.exp(x).unwrap()), &x),
            ("log", Box::new(|t, x, _| t.log(x).unwrap()), &positive),
            ("softmax_rows", Box::new(|t, x, _| t.softmax_rows(x).unwrap()), &x),
            ("mean", Box::new(|t, x, _| t.mean(x).unwrap()), &x),
            ("dropout", Box::new(|t, x, _| t.dropout(x, 0.3, 7).unwrap()), &x),
        ];
        for (name, build, input) in cases {
            let (ea, _) = check(&*build, input, &dummy, &r);
            prop_assert!(ea < TOL, "{name}: {ea}");
        }
    }

    #[test]
    fn gather_and_segments_match_fd(
        m in 1usize..=8,
        n in 1usize..=8,
        picks in prop::collection::vec(0usize..8, 1..=8),
        a in values(64),
        r in values(64),
    ) {
        let x = tensor(m, n, &a);
        let dummy = Tensor::zeros(&[1, 1]);
        let idx: Arc<[usize]> = picks.iter().map(|p| p % m).collect();
        let (e, _) = check(&|t, x, _| t.gather_rows(x, Arc::clone(&idx)).unwrap(), &x, &dummy, &r);
        prop_assert!(e < TOL, "gather {e}");
        // rows of x assigned to segments; every segment index below `segs`
        let segs = m.div_ceil(2);
        let seg: Arc<[usize]> = (0..m).map(|i| i % segs).collect();
        let (e, _) = check(&|t, x, _| t.segment_sum(x, Arc::clone(&seg), segs).unwrap(), &x, &dummy, &r);
        prop_assert!(e < TOL, "segment_sum {e}");
        let (e, _) = check(&|t, x, _| t.segment_softmax(x, Arc::clone(&seg), segs).unwrap(), &x, &dummy, &r);
        prop_assert!(e < TOL, "segment_softmax {e}");
    }

    #[test]
    fn cross_entropy_matches_fd(m in 1usize..=8, n in 2usize..=8, a in values(64), labels in prop::collection::vec(0usize..8, 8), first in any::<bool>()) {
        let x = tensor(m, n, &a);
        let labels: Arc<[usize]> = labels[..m].iter().map(|l| l % n).collect();
        let mut mask: Vec<bool> = (0..m).map(|i| i % 2 == 0).collect();
        mask[0] = first || m == 1;
        if !mask.iter().any(|&b| b) {
            mask[0] = true;
        }
        let mask: Arc<[bool]> = mask.into();
        let f = |p: &Tensor, grads: bool| {
            let mut tape = Tape::new();
            let v = tape.var(p.clone());
            let ce = tape.cross_entropy(v, Arc::clone(&labels), Arc::clone(&mask)).unwrap();
            let value = tape.value(ce).item();
            let g = if grads { Some(tape.backward(ce).unwrap().get(v)) } else { None };
            (value, g)
        };
        let analytic = f(&x, true).1.unwrap();
        let numeric = fd_gradient(|p| f(p, false).0, &x, H);
        let e = relative_error(analytic.data(), numeric.data());
        prop_assert!(e < TOL, "{e}");
    }

    #[test]
    fn adjoint_is_linear(m in 1usize..=6, n in 1usize..=6, a in values(36), ca in -3.0f64..3.0, cb in -3.0f64..3.0) {
        let x = tensor(m, n, &a);
        let grad = |build: &dyn Fn(&mut Tape, Var) -> Var| {
            let mut tape = Tape::new();
            let v = tape.var(x.clone());
            let out = build(&mut tape, v);
            tape.backward(out).unwrap().get(v)
        };
        let f = |t: &mut Tape, v: Var| {
            let e = t.exp(v).unwrap();
            t.sum(e).unwrap()
        };
        let g = |t: &mut Tape, v: Var| {
            let s = t.softmax_rows(v).unwrap();
            let sq = t.mul(s, v).unwrap();
            t.mean(sq).unwrap()
        };
        let combined = grad(&|t, v| {
            let fv = f(t, v);
            let gv = g(t, v);
            let a = t.scale(fv, ca).unwrap();
            let b = t.scale(gv, cb).unwrap();
            t.add(a, b).unwrap()
        });
        let (gf, gg) = (grad(&f), grad(&g));
        for i in 0..x.len() {
            let expect = ca * gf.data()[i] + cb * gg.data()[i];
            prop_assert!((combined.data()[i] - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(m in 1usize..=8, n in 1usize..=8, a in values(64), shifts in values(8)) {
        let x = tensor(m, n, &a);
        let mut shifted = x.clone();
        for r in 0..m {
            for c in 0..n {
                shifted.data_mut()[r * n + c] += shifts[r];
            }
        }
        let run = |t: &Tensor| {
            let mut tape = Tape::new();
            let v = tape.constant(t.clone());
            let s = tape.softmax_rows(v).unwrap();
            tape.value(s).clone()
        };
        let (y, ys) = (run(&x), run(&shifted));
        for r in 0..m {
            let total: f64 = y.row(r).iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
        }
        prop_assert!(relative_error(y.data(), ys.data()) < 1e-12);
    }

    #[test]
    fn dropout_masks_are_seeded(len in 1usize..200, rate in 0.0f64..0.9, seed in any::<u64>()) {
        prop_assert_eq!(dropout_mask(len, rate, seed), dropout_mask(len, rate, seed));
        let x = Tensor::new(vec![1, len], (0..len).map(|i| i as f64 - 3.5).collect()).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let d = tape.dropout(v, 0.0, seed).unwrap();
        prop_assert_eq!(tape.value(d), &x);
    }
}
