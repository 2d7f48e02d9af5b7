use super::*;
use crate::designs::BoundaryPolicy;
use crate::dist::registry;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rules() -> Vec<DesignRule> {
    vec![
        DesignRule::sud(),
        DesignRule::bcd(0.3).unwrap(),
        DesignRule::bcd(0.2929).unwrap(),
        DesignRule::kr(2).unwrap(),
        DesignRule::kr(3).unwrap(),
        DesignRule::gud(2, 0, 1).unwrap(),
        DesignRule::gud(3, 0, 2).unwrap(),
        DesignRule::gud(3, 1, 2).unwrap(),
        DesignRule::kr(2).unwrap().above_median(),
        DesignRule::bcd(0.25).unwrap().above_median(),
    ]
}

fn random_f(rng: &mut ChaCha8Rng, m: usize) -> Vec<f64> {
    let mut f: Vec<f64> = (0..m).map(|_| rng.random_range(0.01..0.99)).collect();
    f.sort_by(f64::total_cmp);
    f
}

#[test]
fn flat_median_profile_is_uniform() {
    let p = stationary_profile(&DesignRule::sud(), &[0.5; 6]).unwrap();
    assert!(p.gamma.iter().all(|g| (g - 1.0).abs() < 1e-15));
    assert!(p.pi.iter().all(|x| (x - 1.0 / 6.0).abs() < 1e-15));
}

#[test]
fn degenerate_f_rejected() {
    let e = stationary_profile(&DesignRule::sud(), &[0.0, 0.5, 0.9]).unwrap_err();
    assert!(matches!(e, Error::Degenerate(_)));
    assert!(stationary_profile(&DesignRule::sud(), &[0.4, 0.3]).is_err());
}

#[test]
fn kr_up_equals_down_at_target() {
    for k in 1..=5 {
        let rule = DesignRule::kr(k).unwrap();
        let p = rule.target();
        let (up, down) = marginal_moves(&rule, p);
        assert!((up - down).abs() < 1e-12, "k={k}");
    }
}

#[test]
fn gamma_matches_closed_forms() {
    let f = [0.1, 0.25, 0.4, 0.6, 0.85];
    let sud = stationary_profile(&DesignRule::sud(), &f).unwrap();
    let bcd = stationary_profile(&DesignRule::bcd(0.3).unwrap(), &f).unwrap();
    let kr = stationary_profile(&DesignRule::kr(3).unwrap(), &f).unwrap();
    for u in 0..4 {
        let g = (1.0 - f[u]) / f[u + 1];
        assert!((sud.gamma[u] - g).abs() < 1e-12);
        assert!((bcd.gamma[u] - g * 0.3 / 0.7).abs() < 1e-12);
        let q = (1.0 - f[u]).powi(3);
        assert!((kr.gamma[u] - f[u] * q / (f[u + 1] * (1.0 - q))).abs() < 1e-12);
    }
    for p in [&sud, &bcd, &kr] {
        assert!((p.pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for u in 0..4 {
            assert!((p.pi[u + 1] / p.pi[u] - p.gamma[u]).abs() < 1e-10);
        }
    }
}

#[test]
fn analytic_matches_matrix_stationary() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..40 {
        let m = rng.random_range(3..10);
        let f = random_f(&mut rng, m);
        for rule in rules() {
            let prof = stationary_profile(&rule, &f).unwrap();
            let tpm = build_tpm(&rule, &f, BoundaryPolicy::Reflecting).unwrap();
            let marg = tpm.level_marginal(&stationary_vector(&tpm).unwrap());
            for (a, b) in prof.pi.iter().zip(&marg) {
                assert!((a - b).abs() < 1e-9, "{} {a} vs {b}", rule.label());
            }
        }
    }
}

#[test]
fn internal_states_are_geometric() {
    let s = internal_state_profile(3, &[0.5; 4]).unwrap();
    for row in &s {
        assert!((row[1] / row[0] - 0.5).abs() < 1e-14);
        assert!((row[2] / row[0] - 0.25).abs() < 1e-14);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let k = rng.random_range(1..5);
        let m = rng.random_range(3..9);
        let f = random_f(&mut rng, m);
        let s = internal_state_profile(k, &f).unwrap();
        let marg = stationary_profile(&DesignRule::kr(k).unwrap(), &f).unwrap();
        for (row, p) in s.iter().zip(&marg.pi) {
            assert!((row.iter().sum::<f64>() - p).abs() < 1e-12);
        }
        let tpm = build_tpm(&DesignRule::kr(k).unwrap(), &f, BoundaryPolicy::Reflecting).unwrap();
        let v = stationary_vector(&tpm).unwrap();
        for (i, &(u, t)) in tpm.labels().iter().enumerate() {
            assert!((v[i] - s[u][t as usize]).abs() < 1e-9);
        }
    }
}

#[test]
fn base_states_follow_cohort_design() {
    let f = [0.05, 0.15, 0.3, 0.5, 0.7, 0.9];
    for k in 2..=4 {
        let base = base_state_profile(k, &f).unwrap();
        let gud = stationary_profile(&DesignRule::gud(k, 0, 1).unwrap(), &f).unwrap();
        for (a, b) in base.pi.iter().zip(&gud.pi) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn kr_profile_is_unimodal() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let families = ["logistic", "normal", "weibull", "lognormal", "gamma"];
    for draw in 0..500 {
        let k = [2, 3, 4][draw % 3];
        let m = rng.random_range(5..=12);
        let fam = families[draw % families.len()];
        let lo: f64 = rng.random_range(0.5..2.0);
        let model = match fam {
            "logistic" => ThresholdModel::logistic(rng.random_range(2.0..8.0), rng.random_range(0.3..3.0)),
            "normal" => ThresholdModel::normal(rng.random_range(2.0..8.0), rng.random_range(0.3..3.0)),
            "weibull" => ThresholdModel::weibull(rng.random_range(1.0..5.0), rng.random_range(2.0..8.0)),
            "lognormal" => ThresholdModel::lognormal(rng.random_range(0.5..2.0), rng.random_range(0.1..0.8)),
            _ => ThresholdModel::gamma(rng.random_range(1.0..6.0), rng.random_range(0.5..2.0)),
        }
        .unwrap();
        let grid = TreatmentGrid::uniform(lo, 10.0 / m as f64, m, BoundaryPolicy::Reflecting).unwrap();
        let f: Vec<f64> = grid.levels().iter().map(|&x| model.cdf(x)).collect();
        if f.iter().any(|&x| !(x > 1e-9 && x < 1.0 - 1e-9)) {
            continue;
        }
        let g = stationary_profile(&DesignRule::kr(k).unwrap(), &f).unwrap().gamma;
        for u in 1..g.len() {
            if f[u + 1] > f[u] && f[u] > f[u - 1] {
                assert!(g[u] < g[u - 1], "draw {draw}: gamma not decreasing");
            }
        }
    }
}

#[test]
fn mode_rule_and_mode_near_target() {
    let specs = registry::builtin();
    for spec in &specs {
        let f = spec.f_values();
        if f.iter().any(|&x| !(x > 0.0 && x < 1.0)) {
            continue;
        }
        for rule in rules() {
            let prof = stationary_profile(&rule, &f).unwrap();
            let q = match spec.model.quantile(rule.target()) {
                Ok(q) => q,
                Err(_) => continue,
            };
            let levels = spec.levels();
            let s = spec.spacing();
            if q < levels[0] + s || q > levels[levels.len() - 1] - s {
                continue;
            }
            let mode = prof.mode[0];
            let mx = prof.pi.iter().cloned().fold(0.0, f64::max);
            assert!((prof.pi[mode] - mx).abs() <= 1e-12 * mx);
            if mode > 0 && mode + 1 < f.len() {
                assert!(prof.gamma[mode - 1] >= 1.0 - 1e-12 && prof.gamma[mode] <= 1.0 + 1e-12);
            }
            let nearest = prof.mode.iter().map(|&u| (levels[u] - q).abs()).fold(f64::MAX, f64::min);
            assert!(nearest <= s + 1e-9, "{} on {}", rule.label(), spec.name);
        }
    }
}

#[test]
fn reversal_factors() {
    let sud = DesignRule::sud();
    assert!((reversal_factor(&sud, 0.5).unwrap() - 0.5).abs() < 1e-15);
    let bcd = DesignRule::bcd(0.25).unwrap();
    let r0 = reversal_factor(&bcd, 0.0).unwrap();
    for i in 1..100 {
        assert!(reversal_factor(&bcd, i as f64 / 100.0).unwrap() >= r0);
    }
    let bcd = DesignRule::bcd(0.4).unwrap();
    let fmin = (4.0 * 0.4 - 1.0) / 1.6;
    let at = reversal_factor(&bcd, fmin).unwrap();
    for d in [-0.05, -0.01, 0.01, 0.05] {
        assert!(reversal_factor(&bcd, fmin + d).unwrap() > at);
    }
    let kr1 = DesignRule::kr(1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let f: f64 = rng.random_range(0.001..0.999);
        let a = reversal_factor(&kr1, f).unwrap();
        let b = reversal_factor(&sud, f).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
    let v = reversal_stationary(&DesignRule::kr(2).unwrap(), &[0.1, 0.3, 0.5, 0.8]).unwrap();
    assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(reversal_stationary(&DesignRule::gud(3, 0, 1).unwrap(), &[0.1, 0.5]).is_err());
}

#[test]
fn first_reversal_geometric() {
    let fr = first_reversal_distribution(&DesignRule::sud(), &[0.5; 12], 0).unwrap();
    for (u, p) in fr.pmf.iter().enumerate() {
        assert!((p - 0.5f64.powi(u as i32 + 1)).abs() < 1e-15);
    }
    assert!((fr.residual - 0.5f64.powi(12)).abs() < 1e-15);
    assert!((fr.pmf.iter().sum::<f64>() + fr.residual - 1.0).abs() < 1e-12);
}

#[test]
fn first_reversal_monte_carlo() {
    use crate::designs::{Response, WalkState};
    let model = ThresholdModel::logistic(5.0, 1.2).unwrap();
    let grid = TreatmentGrid::uniform(1.0, 1.0, 8, BoundaryPolicy::Unbounded).unwrap();
    let f: Vec<f64> = grid.levels().iter().map(|&x| model.cdf(x)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for rule in [DesignRule::sud(), DesignRule::kr(2).unwrap(), DesignRule::bcd(0.3).unwrap()] {
        let theory = first_reversal_distribution(&rule, &f, 0).unwrap();
        let n = 100_000;
        let mut counts = vec![0usize; f.len() + 1];
        for _ in 0..n {
            let mut w = WalkState::new(grid.clone(), rule, 0).unwrap();
            loop {
                let lvl = w.current_level();
                if lvl as usize >= f.len() {
                    counts[f.len()] += 1;
                    break;
                }
                let r = Response::from_bool(rng.random::<f64>() < f[lvl as usize]);
                if r.is_yes() {
                    counts[lvl as usize] += 1;
                    break;
                }
                let draw = w.needs_draw(r).then(|| rng.random::<f64>());
                w.next_allocation(r, draw).unwrap();
            }
        }
        let probs: Vec<f64> = theory.pmf.iter().cloned().chain([theory.residual]).collect();
        for (c, p) in counts.iter().zip(&probs) {
            let sd = (p * (1.0 - p) / n as f64).sqrt();
            assert!((*c as f64 / n as f64 - p).abs() <= 3.0 * sd + 1e-9, "{}", rule.label());
        }
    }
}

#[test]
fn kr_more_peaked_than_bcd() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let kr = DesignRule::kr(2).unwrap();
    let bcd = DesignRule::bcd(kr.target()).unwrap();
    for _ in 0..50 {
        let f = random_f(&mut rng, 8);
        assert_eq!(peakedness_compare(&kr, &bcd, &f).unwrap(), Peakedness::AMorePeaked);
    }
    let gud = DesignRule::gud(2, 0, 1).unwrap();
    let f = [0.02, 0.08, 0.2, 0.35, 0.55, 0.75, 0.9];
    assert_eq!(peakedness_compare(&kr, &gud, &f).unwrap(), Peakedness::Mixed);
    assert!(peakedness_compare(&kr, &DesignRule::sud(), &f).is_err());
}

#[test]
fn kr_bcd_ratio_is_one_on_target() {
    let kr = DesignRule::kr(3).unwrap();
    let p = kr.target();
    let bcd = DesignRule::bcd(p).unwrap();
    let f = [p / 2.0, p, (1.0 + p) / 2.0];
    let a = stationary_profile(&kr, &f).unwrap();
    let b = stationary_profile(&bcd, &f).unwrap();
    // gamma_1 involves F_1 = p on its numerator side and F_2 on both.
    let num_ratio = (a.gamma[1] / b.gamma[1]) - 1.0;
    assert!(num_ratio.abs() < 1e-12);
}

#[test]
fn median_cohort_peakedness_increases_as_a_decreases() {
    let f = [0.05, 0.15, 0.3, 0.45, 0.6, 0.75, 0.9, 0.97];
    let g40 = DesignRule::gud(4, 0, 4).unwrap();
    let g41 = DesignRule::gud(4, 1, 3).unwrap();
    assert_eq!(peakedness_compare(&g40, &g41, &f).unwrap(), Peakedness::AMorePeaked);
}

#[test]
fn bias_terms() {
    let grid = TreatmentGrid::uniform(0.0, 0.5, 10, BoundaryPolicy::Reflecting).unwrap();
    let sym = ThresholdModel::logistic(2.0, 1.0).unwrap();
    let b = stationary_bias_approx(&DesignRule::sud(), &sym, &grid).unwrap();
    assert_eq!(b.first_order, 0.0);
    assert!(b.second_order.abs() < 1e-6);
    assert!(b.exact_pair.abs() < 1e-12);

    let kr = DesignRule::kr(2).unwrap();
    let bk = stationary_bias_approx(&kr, &sym, &grid).unwrap();
    assert!(bk.first_order < 0.0);
    let bcd = DesignRule::bcd(kr.target()).unwrap();
    let bb = stationary_bias_approx(&bcd, &sym, &grid).unwrap();
    assert!((bb.first_order / bk.first_order - 1.707).abs() < 1e-3);

    // Leading term tracks the exact pair as spacing shrinks.
    for s in [0.2, 0.1, 0.05] {
        let g = TreatmentGrid::uniform(0.0, s, 10, BoundaryPolicy::Reflecting).unwrap();
        let b = stationary_bias_approx(&kr, &sym, &g).unwrap();
        assert!(((b.exact_pair - b.first_order) / b.first_order).abs() < 3.0 * s);
        assert!(b.mean_bias < 0.0);
    }
}

#[test]
fn basin_ratios() {
    let r = |rule: DesignRule| mode_basin_ratio(&rule).unwrap();
    assert!((r(DesignRule::kr(2).unwrap()) - 1.52).abs() < 0.01);
    assert!((r(DesignRule::kr(3).unwrap()) - 1.79).abs() < 0.01);
    let p2 = DesignRule::kr(2).unwrap().target();
    let p3 = DesignRule::kr(3).unwrap().target();
    assert!((r(DesignRule::bcd(p2).unwrap()) - 2.41).abs() < 0.01);
    assert!((r(DesignRule::bcd(p3).unwrap()) - 3.85).abs() < 0.01);
    assert_eq!(r(DesignRule::sud()), 1.0);
}

/// Eigenvalues from the characteristic polynomial (Faddeev-LeVerrier),
/// real roots located by sign changes plus bisection.
fn charpoly_second_eigenvalue(t: &TransitionMatrix) -> f64 {
    let n = t.dim();
    let a: Vec<Vec<f64>> = (0..n).map(|i| t.row(i).to_vec()).collect();
    let mul = |x: &Vec<Vec<f64>>, y: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| (0..n).map(|j| (0..n).map(|k| x[i][k] * y[k][j]).sum()).collect())
            .collect()
    };
    let mut coeffs = vec![1.0];
    let mut mk = vec![vec![0.0; n]; n];
    for k in 1..=n {
        let mut next = mul(&a, &mk);
        for i in 0..n {
            next[i][i] += coeffs[k - 1];
        }
        mk = next;
        let am = mul(&a, &mk);
        let tr: f64 = (0..n).map(|i| am[i][i]).sum();
        coeffs.push(-tr / k as f64);
    }
    let poly = |x: f64| coeffs.iter().fold(0.0, |acc, c| acc * x + c);
    let mut roots = vec![];
    let steps = 200_000;
    let mut prev = poly(-1.0 - 1e-9);
    for i in 1..=steps {
        let x = -1.0 - 1e-9 + (2.0 + 2e-9) * i as f64 / steps as f64;
        let v = poly(x);
        if v == 0.0 || v.signum() != prev.signum() {
            let (mut lo, mut hi) = (x - (2.0 + 2e-9) / steps as f64, x);
            for _ in 0..100 {
                let mid = 0.5 * (lo + hi);
                if poly(mid).signum() == poly(lo).signum() {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            roots.push(0.5 * (lo + hi));
        }
        prev = v;
    }
    roots.sort_by(|a, b| b.abs().total_cmp(&a.abs()));
    roots
        .into_iter()
        .filter(|r| (r - 1.0).abs() > 1e-7)
        .map(f64::abs)
        .fold(0.0, f64::max)
}

#[test]
fn eigenvalue_matches_charpoly() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..30 {
        let m = rng.random_range(3..=8);
        let f = random_f(&mut rng, m);
        for rule in [DesignRule::sud(), DesignRule::bcd(0.3).unwrap(), DesignRule::gud(2, 0, 1).unwrap()] {
            let t = build_tpm(&rule, &f, BoundaryPolicy::Reflecting).unwrap();
            let a = second_eigenvalue(&t).unwrap();
            let b = charpoly_second_eigenvalue(&t);
            assert!((a - b).abs() < 1e-8, "{} {a} vs {b}", rule.label());
        }
        let t = kr_marginal_tpm(2, &f).unwrap();
        assert!((second_eigenvalue(&t).unwrap() - charpoly_second_eigenvalue(&t)).abs() < 1e-8);
    }
}

#[test]
fn decay_rate_matches_eigenvalue() {
    let f = [0.05, 0.12, 0.25, 0.42, 0.6, 0.76, 0.88, 0.95];
    let t = build_tpm(&DesignRule::sud(), &f, BoundaryPolicy::Reflecting).unwrap();
    let lam = second_eigenvalue(&t).unwrap();
    let pi = stationary_vector(&t).unwrap();
    let mu: f64 = pi.iter().enumerate().map(|(u, p)| u as f64 * p).sum();
    let traj = mean_trajectory(&t, &t.point_mass(0), 200);
    // Least-squares fit of log distance over a late window.
    let pts: Vec<(f64, f64)> = (60..120)
        .map(|i| (i as f64, (traj[i] - mu).abs().ln()))
        .collect();
    let n = pts.len() as f64;
    let (sx, sy) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
    let (mx, my) = (sx / n, sy / n);
    let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
        / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    assert!((slope.exp() - lam).abs() / lam < 0.05);
}

#[test]
fn convergence_orderings() {
    for spec in registry::suite("conv_") {
        let f = spec.f_values();
        let count = |rule: DesignRule| {
            let t = build_tpm(&rule, &f, BoundaryPolicy::Reflecting).unwrap();
            trials_to_convergence(&t, &t.point_mass(0), 0.99).unwrap()
        };
        let kr = DesignRule::kr(2).unwrap();
        let bcd = DesignRule::bcd(kr.target()).unwrap();
        assert!(count(kr) < count(bcd), "{}", spec.name);
        let g = DesignRule::gud(3, 0, 2).unwrap();
        let bcd = DesignRule::bcd(g.target()).unwrap();
        assert!(count(bcd) < count(g), "{}", spec.name);
    }
}

proptest! {
    #[test]
    fn progression_tends_to_stationary(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = random_f(&mut rng, 6);
        let t = build_tpm(&DesignRule::kr(2).unwrap(), &f, BoundaryPolicy::Reflecting).unwrap();
        let far = progression(&t, &t.point_mass(0), 5000).unwrap();
        let pi = stationary_vector(&t).unwrap();
        let tv: f64 = far.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0;
        prop_assert!(tv < 1e-6);
    }
}
