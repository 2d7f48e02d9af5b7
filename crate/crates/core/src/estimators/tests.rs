use approx::assert_abs_diff_eq;
use proptest::prelude::*;

use super::*;
use crate::designs::{BoundaryPolicy, DesignRule, Response, TreatmentGrid, WalkState};
use crate::numeric::{binom_cdf, pois_cdf};

const X5: [f64; 5] = [0.17, 0.33, 0.50, 0.67, 0.83];

fn rates(yes: &[u32], no: &[u32]) -> (Vec<f64>, Vec<f64>) {
    let y = yes.iter().zip(no).map(|(&a, &b)| a as f64 / (a + b) as f64).collect();
    let w = yes.iter().zip(no).map(|(&a, &b)| (a + b) as f64).collect();
    (y, w)
}

fn chain_of(x: &[f64], resp: &str) -> ChainData {
    let r = resp
        .chars()
        .map(|c| Response::from_bool(c == '1'))
        .collect();
    ChainData::new(x.to_vec(), r).unwrap()
}

#[test]
fn cir_pools_run14_violator() {
    let (y, w) = rates(&[0, 3, 3, 1, 1], &[4, 9, 7, 3, 1]);
    let fit = cir(&y, &X5, &w).unwrap();
    let k = fit.x.iter().position(|&v| (v - 0.5486).abs() < 1e-3).expect("pooled point");
    assert_abs_diff_eq!(fit.y[k], 0.2857, epsilon = 1e-4);
    assert_abs_diff_eq!(fit.w[k], 14.0, epsilon = 1e-12);
    assert!(fit.y.windows(2).all(|p| p[1] > p[0]));
}

#[test]
fn cir_and_ir_on_run9() {
    let (y, w) = rates(&[1, 4, 2, 4], &[7, 8, 6, 0]);
    let x = &X5[..4];
    let fit = cir(&y, x, &w).unwrap();
    let k = fit.x.iter().position(|&v| (v - 0.398).abs() < 1e-3).expect("pooled point");
    assert_abs_diff_eq!(fit.y[k], 0.30, epsilon = 1e-12);
    assert_abs_diff_eq!(fit.w[k], 20.0, epsilon = 1e-12);
    let ir = pava(&y, x, &w).unwrap();
    assert_abs_diff_eq!(ir.y[1], 0.30, epsilon = 1e-12);
    assert_abs_diff_eq!(ir.y[2], 0.30, epsilon = 1e-12);
    assert_eq!(ir.x, x.to_vec());
}

#[test]
fn titration_poisson_interval() {
    let table = ResponseTable::new(vec![60.0, 70.0, 80.0], vec![0, 4, 2], vec![12, 11, 3]).unwrap();
    let est = cir_confidence(&table, 0.2, &CirOptions::default()).unwrap();
    assert_abs_diff_eq!(est.point, 67.5, epsilon = 1e-9);
    let (lo, hi) = est.interval().unwrap();
    assert_abs_diff_eq!(lo, 55.9, epsilon = 0.06);
    assert_abs_diff_eq!(hi, 79.1, epsilon = 0.06);
    assert_eq!(est.df, 11.0);
}

#[test]
fn t_linearization_matches_table() {
    let v = linearized_quantile(CiOption::TDist, 0.975, 5.0, 0.5).unwrap();
    assert_abs_diff_eq!(v, 3.104, epsilon = 1e-3);
}

#[test]
fn binomial_linearization_hits_jump_points() {
    // At an exact cdf value p = P(X <= q) the linear interpolation returns q
    // before the tail offsets are applied.
    let (n, prob) = (12usize, 0.3);
    for q in 1..n as i64 {
        let p = binom_cdf(q, n, prob);
        if p > 0.5 {
            let v = linearized_quantile(CiOption::Binomial, p, n as f64, prob).unwrap();
            assert_abs_diff_eq!(v, q as f64 + 2.0, epsilon = 1e-9);
        }
    }
}

#[test]
fn poisson_linearization_is_symmetric() {
    for &lam in &[0.7, 2.4, 9.0] {
        for &p in &[0.6, 0.8, 0.975] {
            let hi = linearized_quantile(CiOption::Poisson, p, lam / 0.5, 0.5).unwrap();
            let lo = linearized_quantile(CiOption::Poisson, 1.0 - p, lam / 0.5, 0.5).unwrap();
            assert_abs_diff_eq!(hi - lam, lam - lo, epsilon = 1e-9);
        }
    }
    // Median branch sits at the mean.
    let m = linearized_quantile(CiOption::Poisson, 0.5, 6.0, 0.4).unwrap();
    assert_abs_diff_eq!(m, 2.4, epsilon = 1e-12);
    assert!(pois_cdf(2, 2.4) > 0.0);
}

#[test]
fn autodetect_example_chain() {
    let out = ad_mean(&[5.0, 4.0, 3.0, 3.0, 4.0, 3.0], true, 6.0).unwrap();
    assert_eq!(out.cutoff, 2);
    assert_abs_diff_eq!(out.mean, 3.4, epsilon = 1e-12);
    let after = ad_mean(&[5.0, 4.0, 3.0, 3.0, 4.0, 3.0], false, 6.0).unwrap();
    assert_eq!(after.cutoff, 3);
    assert_abs_diff_eq!(after.mean, 3.25, epsilon = 1e-12);
}

#[test]
fn autodetect_searches_to_crossing() {
    let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 5.0, 6.0, 5.0, 6.0, 5.0, 6.0];
    // Tail means stay above until the walk reaches the plateau.
    let out = ad_mean(&x, false, 6.0).unwrap();
    assert_eq!(out.cutoff, 6);
    assert_abs_diff_eq!(out.mean, mean_of(&x[5..]), epsilon = 1e-12);
    assert!(out.se >= out.se1 && out.se >= out.se2);
}

fn mean_of(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn wbar_equals_reversal_mean_for_sud_even_count() {
    // For SU&D, reversal pairs straddle each reversal; with an even number
    // of reversals the midpoint average equals the reversal average.
    let x = [3.0, 4.0, 5.0, 4.0, 3.0, 4.0, 5.0, 4.0];
    let c = chain_of(&x, "00110010");
    let rev = crate::designs::detect_reversals(&c.responses);
    assert_eq!(rev.count() % 2, 0);
    let wbar = averaging_estimate(&c, &Averaging::Wbar, &[0.025, 0.975]).unwrap();
    let w = averaging_estimate(&c, &Averaging::ReversalOnly { r: 1 }, &[0.025, 0.975]).unwrap();
    assert_abs_diff_eq!(wbar.point, w.point, epsilon = 1e-12);
    assert_abs_diff_eq!(wbar.point, 4.25, epsilon = 1e-12);
}

#[test]
fn constant_chain_has_zero_se_and_warning() {
    let c = chain_of(&[2.0, 3.0, 3.0, 3.0, 3.0], "01010");
    let est = averaging_estimate(&c, &Averaging::AllFromReversal { r: 1 }, &[0.05, 0.95]).unwrap();
    assert_eq!(est.se, 0.0);
    assert_eq!(est.bounds, vec![3.0, 3.0]);
    assert!(est.warning.is_some());
}

#[test]
fn too_few_reversals_is_an_error() {
    let c = chain_of(&[1.0, 2.0, 3.0], "000");
    assert!(averaging_estimate(&c, &Averaging::ReversalOnly { r: 1 }, &[0.5]).is_err());
    assert!(averaging_estimate(&c, &Averaging::Wbar, &[0.5]).is_err());
}

#[test]
fn geometric_weighting_degenerates_to_tail_mean() {
    // A single visited level gives a zero rate, so all tail weights are one.
    let c = chain_of(&[4.0, 4.0, 4.0, 4.0], "0101");
    let est = averaging_estimate(
        &c,
        &Averaging::GeomWeighted { accel: 1.2, rule: DesignRule::sud() },
        &[0.025, 0.975],
    )
    .unwrap();
    assert_abs_diff_eq!(est.point, 4.0, epsilon = 1e-12);
}

#[test]
fn geometric_weighting_discounts_early_trials() {
    let x = [1.0, 2.0, 3.0, 4.0, 5.0, 4.0, 5.0, 4.0, 5.0, 4.0, 5.0, 4.0, 5.0, 4.0];
    let c = chain_of(&x, "00001010101010");
    let gw = averaging_estimate(
        &c,
        &Averaging::GeomWeighted { accel: 1.2, rule: DesignRule::sud() },
        &[0.025, 0.975],
    )
    .unwrap();
    let plain = mean_of(&x[1..]);
    assert!(gw.point > plain, "{} vs {}", gw.point, plain);
    assert!(gw.point <= 5.0);
}

#[test]
fn imputation_adds_virtual_visits_at_boundaries() {
    let grid = TreatmentGrid::uniform(1.0, 1.0, 3, BoundaryPolicy::Reflecting).unwrap();
    let mut s = WalkState::new(grid, DesignRule::sud(), 0).unwrap();
    // Yes at the bottom is blocked, then No at the top is blocked.
    for r in [Response::Yes, Response::No, Response::No, Response::No, Response::Yes] {
        s.next_allocation(r, None).unwrap();
    }
    let c = imputed_chain(&s).unwrap();
    assert_eq!(c.x, vec![1.0, 0.0, 1.0, 2.0, 3.0, 4.0, 3.0]);
    assert_eq!(c.responses[1], Response::No);
    assert_eq!(c.responses[5], Response::Yes);
}

#[test]
fn imputation_kr_bottom_visit_length() {
    let grid = TreatmentGrid::uniform(1.0, 1.0, 3, BoundaryPolicy::Reflecting).unwrap();
    let mut s = WalkState::new(grid, DesignRule::kr(2).unwrap(), 0).unwrap();
    for r in [Response::Yes, Response::No] {
        s.next_allocation(r, None).unwrap();
    }
    let c = imputed_chain(&s).unwrap();
    assert_eq!(c.x, vec![1.0, 0.0, 0.0, 1.0]);
}

#[test]
fn imputation_requires_reflecting() {
    let grid = TreatmentGrid::uniform(1.0, 1.0, 3, BoundaryPolicy::Layover).unwrap();
    let s = WalkState::new(grid, DesignRule::sud(), 0).unwrap();
    assert!(imputed_chain(&s).is_err());
}

#[test]
fn table_csv_round_trip() {
    let t = ResponseTable::new(vec![0.5, 1.0], vec![1, 2], vec![3, 0]).unwrap();
    let back = ResponseTable::read_csv(t.to_csv_string().as_bytes()).unwrap();
    assert_eq!(t, back);
}

#[test]
fn inverse_estimate_out_of_range_target() {
    let fit = cir(&[0.1, 0.2], &[1.0, 2.0], &[5.0, 5.0]).unwrap();
    assert!(inverse_estimate(&fit, 1.2, (0.0, 3.0), (0.0, 1.0)).is_err());
    // Target above the fit interpolates towards the upper anchor.
    let v = inverse_estimate(&fit, 0.6, (0.0, 3.0), (0.0, 1.0)).unwrap();
    assert_abs_diff_eq!(v, 2.5, epsilon = 1e-12);
}

fn arb_table() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
    (2usize..9).prop_flat_map(|m| {
        (
            prop::collection::vec(0.0f64..1.0, m),
            prop::collection::vec(1.0f64..20.0, m),
            prop::collection::vec(0.1f64..2.0, m),
        )
            .prop_map(|(y, w, gaps)| {
                let mut x = Vec::with_capacity(gaps.len());
                let mut acc = 0.0;
                for g in gaps {
                    acc += g;
                    x.push(acc);
                }
                (y, x, w)
            })
    })
}

proptest! {
    #[test]
    fn pava_is_monotone_and_preserves_weighted_sum((y, x, w) in arb_table()) {
        let fit = pava(&y, &x, &w).unwrap();
        prop_assert!(fit.y.windows(2).all(|p| p[1] >= p[0] - 1e-12));
        let s0: f64 = y.iter().zip(&w).map(|(a, b)| a * b).sum();
        let s1: f64 = fit.y.iter().zip(&w).map(|(a, b)| a * b).sum();
        prop_assert!((s0 - s1).abs() < 1e-9);
    }

    #[test]
    fn cir_values_are_ir_values((y, x, w) in arb_table()) {
        let ir = pava(&y, &x, &w).unwrap();
        let c = cir(&y, &x, &w).unwrap();
        prop_assert!(c.y.windows(2).all(|p| p[1] > p[0]));
        for v in &c.y {
            prop_assert!(ir.y.iter().any(|u| (u - v).abs() < 1e-9));
        }
        let tw: f64 = w.iter().sum();
        prop_assert!((c.w.iter().sum::<f64>() - tw).abs() < 1e-9);
    }

    #[test]
    fn averaging_is_translation_equivariant(
        steps in prop::collection::vec(any::<bool>(), 8..60),
        shift in (-50i32..50).prop_map(f64::from),
    ) {
        let mut x = vec![0.0];
        for &s in &steps[..steps.len() - 1] {
            let last = *x.last().unwrap();
            x.push(if s { last - 1.0 } else { last + 1.0 });
        }
        let resp: Vec<Response> = steps.iter().map(|&b| Response::from_bool(b)).collect();
        let base = ChainData::new(x.clone(), resp.clone()).unwrap();
        let moved = ChainData::new(x.iter().map(|v| v + shift).collect(), resp).unwrap();
        for kind in [
            Averaging::Wbar,
            Averaging::AllFromReversal { r: 1 },
            Averaging::AutoDetect { safe_fraction: 0.25, before: false },
        ] {
            if let (Ok(a), Ok(b)) = (
                averaging_estimate(&base, &kind, &[0.1, 0.9]),
                averaging_estimate(&moved, &kind, &[0.1, 0.9]),
            ) {
                prop_assert!((a.point + shift - b.point).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn cir_point_inside_interval(
        yes in prop::collection::vec(0u32..10, 3..7),
        extra in prop::collection::vec(1u32..10, 3..7),
    ) {
        let m = yes.len().min(extra.len());
        let levels: Vec<f64> = (0..m).map(|i| 0.1 * (i + 1) as f64).collect();
        let no: Vec<u32> = (0..m).map(|i| extra[i]).collect();
        let t = ResponseTable::new(levels, yes[..m].to_vec(), no).unwrap();
        let est = cir_confidence(&t, 0.3, &CirOptions::default()).unwrap();
        let (lo, hi) = est.interval().unwrap();
        prop_assert!(lo <= est.point + 1e-12 && est.point <= hi + 1e-12);
    }
}
