//! Independent reference computations checked against the library.

use adamsep_core::lowerbound::{
    build_const_instance, build_tv_instance, one_shock_probability, response_factor, response_quantities,
    shocked_trajectory, ShockCase,
};
use adamsep_core::optimizers::{d_beta1, max_eta};
use adamsep_core::tailstudy::{empirical_quantile, fit_exponent, QuantileCurve, QuantilePoint};

/// Brute-force sup of the truncated geometric sums by direct accumulation.
fn d_beta1_by_summation(beta1: f64, t_max: usize) -> f64 {
    let mut best = 0.0f64;
    for t in 10..=t_max {
        let rho = t as f64 * beta1 / (t as f64 - 1.0);
        let (mut s, mut pow) = (0.0, 1.0);
        for _ in 0..t {
            s += pow;
            pow *= rho;
        }
        best = best.max(s);
    }
    (4.0 * (1.0 - beta1) * best).sqrt()
}

#[test]
fn d_beta1_matches_direct_scan() {
    for beta1 in [0.1, 0.5, 0.9] {
        let fast = d_beta1(beta1).unwrap();
        let slow = d_beta1_by_summation(beta1, 3000);
        assert!((fast - slow).abs() <= 1e-12 * slow, "beta1 = {beta1}: {fast} vs {slow}");
    }
}

#[test]
fn max_eta_zero_momentum_hand_value() {
    // d = 1, v0 = 1, eps = 0: 1/max{8, 0, 1} = 1/8.
    assert_eq!(max_eta(1, 1.0, 0.0, 0.0, 1.0).unwrap(), 0.125);
}

/// Probability that exactly one of the first `m` noises among `T − 1` is
/// nonzero, with the prescribed sign when `signed`, by walking all `3^{T−1}`
/// patterns.
fn enumerate_one_shock(horizon: usize, p: f64, signed: bool) -> f64 {
    let n = horizon - 1;
    let m = horizon / 2;
    let mut total = 0.0;
    for code in 0..3usize.pow(n as u32) {
        let mut c = code;
        let mut prob = 1.0;
        let mut shocks = Vec::new();
        for k in 0..n {
            let digit = c % 3;
            c /= 3;
            prob *= match digit {
                0 => 1.0 - p,
                _ => p / 2.0,
            };
            if digit != 0 {
                shocks.push((k + 1, digit));
            }
        }
        let hit = match shocks.as_slice() {
            [(j, sign)] => *j <= m && (!signed || *sign == 1),
            _ => false,
        };
        if hit {
            total += prob;
        }
    }
    total
}

#[test]
fn one_shock_probability_matches_enumeration() {
    for horizon in [4, 5, 6] {
        for p in [0.05, 0.2, 0.37] {
            for (case, signed) in [(ShockCase::Signed, true), (ShockCase::Unsigned, false)] {
                let exact = one_shock_probability(horizon, p, horizon / 2, case);
                let brute = enumerate_one_shock(horizon, p, signed);
                assert!((exact / brute - 1.0).abs() < 1e-12, "T={horizon} p={p} {case:?}");
            }
        }
    }
}

#[test]
fn unsigned_doubles_signed() {
    let s = one_shock_probability(20, 0.01, 10, ShockCase::Signed);
    let u = one_shock_probability(20, 0.01, 10, ShockCase::Unsigned);
    assert!((u / (2.0 * s) - 1.0).abs() < 1e-15);
}

#[test]
fn small_delta_ratio_limit() {
    let t = 10;
    let delta = 1e-9;
    let p = 16.0 * delta / t as f64;
    let ratio = one_shock_probability(t, p, t / 2, ShockCase::Signed) / delta;
    assert!((ratio - 8.0 * 5.0 / 10.0).abs() < 1e-6);
    assert!(ratio > 40.0 / 11.0);
}

/// `γ² (1 − q^n)/(1 − q)` with `q = (1−γ)²`, `n = T − ⌊T/2⌋`.
fn response_closed(gamma: f64, horizon: usize) -> f64 {
    let q = (1.0 - gamma) * (1.0 - gamma);
    let n = (horizon - horizon / 2) as i32;
    gamma * gamma * (1.0 - q.powi(n)) / (1.0 - q)
}

#[test]
fn response_factor_geometric_form() {
    for gamma in [0.1, 0.3, 0.5, 0.77] {
        for horizon in [10, 11, 57, 100, 1000] {
            let a = response_factor(gamma, horizon);
            let b = response_closed(gamma, horizon);
            assert!((a / b - 1.0).abs() < 1e-12, "gamma={gamma} T={horizon}");
        }
    }
}

#[test]
fn tv_response_on_constant_schedule() {
    for gamma in [0.1, 0.5, 0.9] {
        for horizon in [11, 20, 100] {
            let tv = build_tv_instance(vec![gamma; horizon], horizon, 0.1).unwrap();
            let r = response_factor(gamma, horizon);
            assert!((tv.r_t / r - 1.0).abs() < 1e-12);
            assert!((tv.q_t / (gamma * r) - 1.0).abs() < 1e-12);
        }
    }
    let (r, q) = response_quantities(&[0.0; 12]);
    assert_eq!((r, q), (0.0, 0.0));
}

#[test]
fn shocked_energy_closed_form() {
    let inst = build_const_instance(0.3, 40, 1e-4, 0.0).unwrap();
    let a2 = inst.amplitude * inst.amplitude;
    for j in 1..=inst.m {
        let (_, sum_sq) = shocked_trajectory(&inst, j, 1.0).unwrap();
        let q = 0.49f64;
        let n = (40 - j) as i32;
        let closed = 0.09 * a2 * (1.0 - q.powi(n)) / (1.0 - q);
        assert!((sum_sq / closed - 1.0).abs() < 1e-12, "j={j}");
    }
}

#[test]
fn quantile_of_uniform_grid() {
    let samples: Vec<f64> = (1..=1000).rev().map(f64::from).collect();
    for level in [0.5, 0.9, 0.99, 0.999] {
        let q = empirical_quantile(&samples, level).unwrap();
        assert_eq!(q, (level * 1000.0_f64).round());
    }
}

#[test]
fn fit_recovers_noisy_power_law_slope() {
    let deltas = [0.1, 0.03, 0.01, 0.003, 0.001];
    let pts = deltas
        .iter()
        .enumerate()
        .map(|(k, &d)| QuantilePoint { delta: d, q: 2.0 * d.powf(-0.7) * (1.0 + 0.01 * (k as f64 - 2.0)), n_exceed: 0 })
        .collect();
    let fit = fit_exponent(&QuantileCurve::new(pts).unwrap()).unwrap();
    // Reference least squares done by hand on the same pairs.
    let xs: Vec<f64> = deltas.iter().map(|d| (1.0 / d).ln()).collect();
    let ys: Vec<f64> = deltas
        .iter()
        .enumerate()
        .map(|(k, d)| (2.0 * d.powf(-0.7) * (1.0 + 0.01 * (k as f64 - 2.0))).ln())
        .collect();
    let n = 5.0;
    let sx: f64 = xs.iter().sum();
    let sy: f64 = ys.iter().sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| x * y).sum();
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    assert!((fit.slope - slope).abs() < 1e-10);
}
