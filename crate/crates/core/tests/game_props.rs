use std::sync::Arc;

use gclgame::autodiff::{fd_gradient_refined, relative_error, Tensor, REFINE_STEPS};
use gclgame::diagnostics::check_gradient_bounds;
use gclgame::game::{
    project, run_sgda, train_task, Betas, GameConfig, GnnCost, PlayerU, Probe, QuadraticToy, Radii, SaddleToy,
};
use gclgame::gnn::{init_params, loss, ParamLayout, ParamVector};
use gclgame::graph::{synth_verg_stream, SynthConfig};
use gclgame::pipeline::{model_for_stream, run_continual, Method};
use gclgame::replay::ReplayBuffer;
use gclgame::testkit::{cost_case, with_betas};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Relative error against the FD oracle. A block the oracle sees as exactly
/// flat (a saturated attention softmax, say) only has to stay below what the
/// largest step could resolve.
fn fd_mismatch(analytic: &[f64], fd: &[f64], h: f64) -> Option<String> {
    if fd.iter().all(|v| *v == 0.0) {
        let resolution = f64::EPSILON * h.abs().max(1.0) / REFINE_STEPS[0];
        let n = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
        return (n > resolution).then(|| format!("flat to FD but analytic norm {n:e}"));
    }
    let err = relative_error(analytic, fd);
    (err >= 1e-6).then(|| format!("relative error {err:e}"))
}

fn uniform(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-scale..scale)).collect()
}

fn as_row(v: &[f64]) -> Tensor {
    Tensor::new(vec![1, v.len()], v.to_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn cost_gradients_match_fd(seed in any::<u64>()) {
        let c = cost_case(seed);
        let cost = GnnCost::new(&c.cfg, &c.game_config());
        let e = cost.evaluate(&c.w, &c.u, &c.batch, 0).unwrap();
        let value = |w: &[f64], u: &PlayerU| cost.value(w, u, &c.batch, 0).unwrap();

        let fw = fd_gradient_refined(|p| value(p.data(), &c.u), &as_row(&c.w));
        if let Some(m) = fd_mismatch(&e.grad_w, fw.data(), e.h) {
            prop_assert!(false, "w: {m}");
        }

        let fdw = fd_gradient_refined(|p| {
            let mut u = c.u.clone();
            u.delta_w = p.data().to_vec();
            value(&c.w, &u)
        }, &as_row(&c.u.delta_w));
        if let Some(m) = fd_mismatch(&e.grad_u.delta_w, fdw.data(), e.h) {
            prop_assert!(false, "dw: {m}");
        }

        for b in &c.batch {
            let k = b.key;
            let fdx = fd_gradient_refined(|p| {
                let mut u = c.u.clone();
                u.delta_x.insert(k, p.clone());
                value(&c.w, &u)
            }, &c.u.delta_x[&k]);
            if let Some(m) = fd_mismatch(e.grad_u.delta_x[&k].data(), fdx.data(), e.h) {
                prop_assert!(false, "dx {k:?}: {m}");
            }
            if c.u.delta_phi[&k].is_empty() {
                continue;
            }
            let fdp = fd_gradient_refined(|p| {
                let mut u = c.u.clone();
                u.delta_phi.insert(k, p.clone());
                value(&c.w, &u)
            }, &c.u.delta_phi[&k]);
            if let Some(m) = fd_mismatch(e.grad_u.delta_phi[&k].data(), fdp.data(), e.h) {
                prop_assert!(false, "dphi {k:?}: {m}");
            }
        }
    }

    #[test]
    fn cost_identities(seed in any::<u64>()) {
        let c = cost_case(seed);
        let params = ParamVector::new(c.w.clone(), Arc::new(ParamLayout::for_model(&c.cfg))).unwrap();
        let j = loss(&params, &c.cfg, &c.batch).unwrap();

        let off = GnnCost::new(&c.cfg, &with_betas([0.0; 3]));
        let h = off.value(&c.w, &c.u, &c.batch, 0).unwrap();
        prop_assert!((h - j).abs() <= 1e-12 * j.abs().max(1.0), "beta = 0: {h} vs {j}");

        let on = GnnCost::new(&c.cfg, &c.game_config());
        let zero = PlayerU::zeros(c.w.len());
        let h = on.value(&c.w, &zero, &c.batch, 0).unwrap();
        let expect = (1.0 + c.betas.iter().sum::<f64>()) * j;
        prop_assert!((h - expect).abs() <= 1e-12 * expect.abs().max(1.0), "u = 0: {h} vs {expect}");

        let reduced = GnnCost::new(&c.cfg, &with_betas([c.betas[0], 0.0, c.betas[2]]));
        let mut moved = c.u.clone();
        for t in moved.delta_phi.values_mut() {
            *t = t.scaled(-3.0);
        }
        let a = reduced.value(&c.w, &c.u, &c.batch, 0).unwrap();
        let b = reduced.value(&c.w, &moved, &c.batch, 0).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "beta2 = 0: {a} vs {b}");
    }

    #[test]
    fn projection_is_idempotent(seed in any::<u64>(), r in 0.01f64..5.0) {
        let mut c = cost_case(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in c.u.delta_x.values_mut() {
            *t = t.scaled(rng.gen_range(0.0..40.0));
        }
        c.u.delta_w.iter_mut().for_each(|v| *v *= rng.gen_range(0.0..400.0));
        let radii = Radii { r_x: r, r_phi: r * 0.5, r_w: r * 2.0 };
        let once = project(&c.u, &radii);
        let twice = project(&once, &radii);
        prop_assert_eq!(&once, &twice);
        let [nx, np, nw] = once.block_norms();
        prop_assert!(nx <= r * (1.0 + 1e-12) && np <= r * 0.5 * (1.0 + 1e-12) && nw <= r * 2.0 * (1.0 + 1e-12));
    }

    #[test]
    fn full_batch_ascent_never_decreases_cost(seed in any::<u64>(), beta in 0.05f64..1.0, lr in 0.05f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 3;
        let n = 5;
        let quad = QuadraticToy {
            c: uniform(&mut rng, d, 1.0),
            xs: (0..n).map(|_| uniform(&mut rng, d, 1.0)).collect(),
            betas: Betas { b1: beta, b2: 0.0, b3: 0.0 },
            batch_b: n,
        };
        let saddle = SaddleToy {
            beta,
            a: (0..2).map(|_| uniform(&mut rng, 2, 0.5)).collect(),
            s0: uniform(&mut rng, 2, 1.0),
            c: uniform(&mut rng, 2, 1.0),
        };
        let config = GameConfig {
            zeta: 12,
            rho: 4,
            alpha_u: lr * 12f64.sqrt(),
            alpha_w: 0.1,
            r_x: 0.7,
            r_phi: 0.7,
            r_w: 0.7,
            batch_b: n,
            ..with_betas([beta, 0.0, 0.0])
        };
        let traces = [
            run_sgda(&quad, &uniform(&mut rng, d, 1.0), &config, 0, &mut rng, Probe::Off).unwrap().trace,
            run_sgda(&saddle, &uniform(&mut rng, 2, 1.0), &config, 0, &mut rng, Probe::Off).unwrap().trace,
        ];
        for trace in traces {
            for j in 0..config.rho {
                let hs: Vec<f64> = trace.records.iter().filter(|r| r.outer_j == j).map(|r| r.h_cost).collect();
                for pair in hs.windows(2) {
                    // rounding once u sits at its fixed point; h is a sum of
                    // terms that may cancel, so the slack is not relative to h alone
                    let slack = 1e-13 * (1.0 + pair[0].abs());
                    prop_assert!(pair[1] >= pair[0] - slack, "outer {j}: {} then {}", pair[0], pair[1]);
                }
            }
        }
    }
}

fn small_stream(seed: u64) -> gclgame::graph::TaskStream {
    let cfg = SynthConfig {
        num_tasks: 3,
        universe_size: 60,
        vertices_per_task: 16,
        feature_dim: 4,
        p_in: 0.3,
        p_out: 0.05,
        ..SynthConfig::default()
    };
    synth_verg_stream(&cfg, seed).unwrap()
}

#[test]
fn zero_betas_make_the_ascent_irrelevant() {
    let stream = small_stream(3);
    let model = model_for_stream(&stream, 2, 4, 0.0);
    let w0 = init_params(&model, 11).unwrap();
    let run = |zeta| {
        let config = GameConfig {
            zeta,
            rho: 20,
            alpha_u: 0.5,
            alpha_w: 0.05,
            batch_b: 6,
            ..with_betas([0.0; 3])
        };
        let mut buffer = ReplayBuffer::new(10);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut w = w0.clone();
        for task in &stream.tasks {
            w = train_task(&w, task, &mut buffer, &model, &config, &mut rng).unwrap().w_final;
        }
        w.values
    };
    let base = run(0);
    for zeta in [1, 3, 7] {
        assert_eq!(run(zeta), base, "zeta = {zeta}");
    }
}

#[test]
fn logged_steps_respect_gradient_bounds() {
    let stream = small_stream(8);
    let model = model_for_stream(&stream, 2, 4, 0.0);
    let config = GameConfig {
        zeta: 4,
        rho: 15,
        alpha_u: 0.5,
        alpha_w: 0.05,
        batch_b: 6,
        buffer_capacity: 10,
        ..with_betas([1.0, 0.5, 0.8])
    };
    let run = run_continual(&stream, &model, &config, Method::Game, 2).unwrap();
    let report = check_gradient_bounds(&run.trace).unwrap();
    assert_eq!(report.violations, 0);
    assert_eq!(report.steps, run.trace.records.len());
}
