use adamsep_core::instrument::{compute_ledger, delta_split};
use adamsep_core::kernel::{stage, RngStream};
use adamsep_core::lemmas::{calibrated_case, gen_beta_case, run_pathwise_check, CheckId};
use adamsep_core::lowerbound::{build_const_instance, natural_case, shocked_trajectory, sign_choice, ShockCase};
use adamsep_core::optimizers::{run_trajectory, AdamParams, OptimizerSpec};
use adamsep_core::tailstudy::{quantile_index, QuantileCurve};
use adamsep_core::{Noise, Objective, Oracle};
use proptest::prelude::*;

fn objective_strategy() -> impl Strategy<Value = Objective> {
    prop_oneof![
        prop::collection::vec(0.1f64..5.0, 1..6).prop_map(|l| Objective::quadratic_diag(l).unwrap()),
        (1usize..6).prop_map(|d| Objective::quadratic_cosine(d).unwrap()),
    ]
}

fn point(d: usize, seed: u64) -> Vec<f64> {
    let mut s = RngStream::derive(seed, 0, "point");
    (0..d).map(|_| 4.0 * s.std_gaussian()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stream_replay_is_identical(seed in any::<u64>(), run in any::<u64>()) {
        let mut a = RngStream::derive(seed, run, stage::NOISE);
        let mut b = RngStream::derive(seed, run, stage::NOISE);
        for _ in 0..64 {
            prop_assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn central_differences_match_gradient(f in objective_strategy(), seed in any::<u64>()) {
        let x = point(f.dim(), seed);
        let g = f.grad(&x).unwrap();
        let h = 1e-5;
        for i in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += h;
            xm[i] -= h;
            let fd = (f.value(&xp).unwrap() - f.value(&xm).unwrap()) / (2.0 * h);
            prop_assert!((fd - g[i]).abs() <= 1e-6 * (1.0 + g[i].abs()),
                "coordinate {}: fd {} vs {}", i, fd, g[i]);
        }
    }

    #[test]
    fn smoothness_certificate(f in objective_strategy(), s1 in any::<u64>(), s2 in any::<u64>()) {
        let (x, y) = (point(f.dim(), s1), point(f.dim(), s2));
        let (gx, gy) = (f.grad(&x).unwrap(), f.grad(&y).unwrap());
        let dg: f64 = gx.iter().zip(gy.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let dx: f64 = x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        prop_assert!(dg <= f.smoothness() * dx * (1.0 + 1e-12));
    }

    #[test]
    fn gradient_lower_bound(f in objective_strategy(), seed in any::<u64>()) {
        let x = point(f.dim(), seed);
        let g = f.grad(&x).unwrap();
        let lhs = g.norm_sq();
        let rhs = 2.0 * f.smoothness() * (f.value(&x).unwrap() - f.f_star());
        prop_assert!(lhs <= rhs * (1.0 + 1e-12) + 1e-300);
    }

    #[test]
    fn adam_invariants(
        f in objective_strategy(),
        beta1 in prop::sample::select(vec![0.0, 0.5, 0.9]),
        beta2 in 0.0f64..0.999,
        gamma in 1e-3f64..1.0,
        seed in any::<u64>(),
    ) {
        let d = f.dim();
        let oracle = Oracle::new(f, Noise::Gaussian { sigma: 1.0 }).unwrap();
        let horizon = 40;
        let p = AdamParams::new(gamma, beta1, beta2, 1e-8, 0.7, horizon).unwrap();
        let mut s = RngStream::derive(seed, 0, stage::NOISE);
        let tr = run_trajectory(&OptimizerSpec::Adam(p), &oracle, &point(d, seed), horizon, &mut s).unwrap();
        for t in 1..=horizon {
            let (x, xn, m, gm, v) = (tr.x(t), tr.x(t + 1), tr.m(t), tr.gamma(t), tr.v(t));
            for i in 0..d {
                prop_assert!(v[i] >= beta2.powi(t as i32) * 0.7 * (1.0 - 1e-15));
                prop_assert_eq!(xn[i], x[i] - gm[i] * m[i]);
            }
        }
        // Ledger definition consistency.
        let l = compute_ledger(&tr).unwrap();
        let direct: f64 = (1..=horizon).map(|t| tr.record(t).grad.norm_sq()).sum();
        prop_assert!((l.avg_gsq * horizon as f64 - direct).abs() <= 1e-12 * direct.max(1e-300));
        for t in 1..=horizon {
            let inc = l.S[t] - l.S[t - 1];
            let g2 = tr.record(t).g.norm_sq();
            prop_assert!((inc - g2).abs() <= 4.0 * f64::EPSILON * l.S[t]);
        }
    }

    #[test]
    fn rmsprop_equivalence(f in objective_strategy(), beta2 in 0.0f64..0.999, seed in any::<u64>()) {
        let d = f.dim();
        let oracle = Oracle::new(f, Noise::Gaussian { sigma: 0.5 }).unwrap();
        let (gamma, eps, v0, horizon) = (0.05, 1e-6, 1.0, 30);
        let p = AdamParams::new(gamma, 0.0, beta2, eps, v0, horizon).unwrap();
        let x1 = point(d, seed);
        let mut s = RngStream::derive(seed, 1, stage::NOISE);
        let tr = run_trajectory(&OptimizerSpec::Adam(p), &oracle, &x1, horizon, &mut s).unwrap();
        // Hand-rolled RMSProp fed the recorded gradients.
        let mut x = x1;
        let mut v = vec![v0; d];
        for t in 1..=horizon {
            let g = &tr.record(t).g;
            for i in 0..d {
                v[i] = beta2 * v[i] + (1.0 - beta2) * (g[i] * g[i]);
                x[i] -= gamma / (v[i].sqrt() + eps) * g[i];
            }
            prop_assert_eq!(x.as_slice(), tr.x(t + 1));
        }
    }

    #[test]
    fn calibrated_suite_checks(seed in 0u64..1000, index in 0u64..1_000_000) {
        let case = calibrated_case(seed, index);
        let tr = case.run().unwrap();
        for id in CheckId::CALIBRATED {
            let r = run_pathwise_check(id, &tr).unwrap();
            prop_assert!(r.holds, "{:?} failed: {:?}", id, r);
        }
        for t in 1..=tr.len() {
            for i in 0..tr.dim() {
                let ds = delta_split(&tr, t, i).unwrap();
                prop_assert!(ds.delta1 >= 0.0 && ds.delta2 <= 0.0);
            }
        }
    }

    #[test]
    fn gen_beta_for_any_gamma(seed in 0u64..1000, index in 0u64..1_000_000) {
        let tr = gen_beta_case(seed, index).run().unwrap();
        let r = run_pathwise_check(CheckId::GenBeta, &tr).unwrap();
        prop_assert!(r.holds, "{:?}", r);
    }

    #[test]
    fn sign_choice_separates(a in -1e6f64..1e6, b in 0.0f64..1e6) {
        let s = sign_choice(a, b);
        prop_assert!((a - s * b).abs() >= b);
    }

    #[test]
    fn const_instance_invariants(
        gamma in 0.05f64..3.0,
        horizon in 10usize..400,
        log_delta in -9.0f64..-2.0,
        x_init in -5.0f64..5.0,
    ) {
        let delta = 10f64.powf(log_delta);
        let Ok(inst) = build_const_instance(gamma, horizon, delta, x_init) else {
            return Ok(());
        };
        prop_assert!(inst.amplitude >= 1.0);
        prop_assert!((inst.p * inst.amplitude * inst.amplitude - 1.0).abs() < 1e-12);
        let a2 = inst.amplitude * inst.amplitude;
        match natural_case(&inst) {
            ShockCase::Signed => {
                let r = inst.response.unwrap();
                for j in 1..=inst.m {
                    let x_j = (1.0 - gamma).powi(j as i32 - 1) * x_init;
                    let sigma = sign_choice((1.0 - gamma) * x_j, gamma * inst.amplitude);
                    let (_, e) = shocked_trajectory(&inst, j, sigma).unwrap();
                    prop_assert!(e >= a2 * r * (1.0 - 1e-12));
                }
            }
            ShockCase::Unsigned => {
                for j in 1..=inst.m {
                    for sigma in [1.0, -1.0] {
                        let (tr, _) = shocked_trajectory(&inst, j, sigma).unwrap();
                        let pair = tr.x(j)[0].powi(2) + tr.x(j + 1)[0].powi(2);
                        prop_assert!(pair >= a2 / 2.0 * (1.0 - 1e-12));
                    }
                }
            }
        }
    }

    #[test]
    fn quantile_curves_are_monotone(samples in prop::collection::vec(-1e3f64..1e3, 10..400)) {
        let deltas = [0.5, 0.2, 0.1, 0.05, 0.01];
        let c = QuantileCurve::from_samples(&samples, &deltas).unwrap();
        prop_assert!(c.is_monotone());
    }

    #[test]
    fn quantile_index_in_range(level in 0.0001f64..0.9999, n in 1usize..100_000) {
        let k = quantile_index(level, n);
        prop_assert!((1..=n).contains(&k));
        prop_assert!(k as f64 >= level * n as f64 - 1e-6 * n as f64);
    }
}
