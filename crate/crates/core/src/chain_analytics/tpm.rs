//! Transition matrices, exact progression and spectral convergence rates.

use crate::designs::{BoundaryPolicy, DesignRule, Orientation, Variant};
use crate::error::{Error, Result};

use super::{check_f, marginal_moves, mirrored};

/// Row-stochastic matrix over walk states.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    dim: usize,
    data: Vec<f64>,
    /// (level, internal counter) for each state.
    labels: Vec<(usize, u32)>,
    /// Trials covered by one step of the chain (cohort size for GU&D).
    trials_per_step: usize,
}

impl TransitionMatrix {
    /// Builds a matrix from dense rows; every row must sum to one.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let dim = rows.len();
        let mut data = Vec::with_capacity(dim * dim);
        for r in &rows {
            if r.len() != dim {
                return Err(Error::LengthMismatch("matrix must be square".into()));
            }
            if r.iter().any(|&x| !(x >= 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidParameter {
                    field: "rows",
                    reason: "rows must be nonnegative and sum to 1".into(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(TransitionMatrix {
            dim,
            data,
            labels: (0..dim).map(|i| (i, 0)).collect(),
            trials_per_step: 1,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn labels(&self) -> &[(usize, u32)] {
        &self.labels
    }

    pub fn trials_per_step(&self) -> usize {
        self.trials_per_step
    }

    /// Number of distinct levels the states cover.
    pub fn levels(&self) -> usize {
        self.labels.iter().map(|l| l.0).max().map_or(0, |m| m + 1)
    }

    /// Collapses a state distribution onto levels.
    pub fn level_marginal(&self, rho: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.levels()];
        for (i, &(u, _)) in self.labels.iter().enumerate() {
            out[u] += rho[i];
        }
        out
    }

    /// State distribution with all mass on `(level, 0)`.
    pub fn point_mass(&self, level: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        if let Some(i) = self.labels.iter().position(|&l| l == (level, 0)) {
            v[i] = 1.0;
        }
        v
    }

    fn step(&self, rho: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (i, &r) in rho.iter().enumerate() {
            if r == 0.0 {
                continue;
            }
            for (o, &p) in out.iter_mut().zip(self.row(i)) {
                *o += r * p;
            }
        }
        out
    }

    fn mean_level(&self, rho: &[f64]) -> f64 {
        self.labels
            .iter()
            .zip(rho)
            .map(|(&(u, _), &r)| u as f64 * r)
            .sum()
    }

    pub fn is_irreducible(&self) -> bool {
        let reach = |forward: bool| {
            let mut seen = vec![false; self.dim];
            let mut stack = vec![0usize];
            seen[0] = true;
            while let Some(i) = stack.pop() {
                for j in 0..self.dim {
                    let p = if forward { self.get(i, j) } else { self.get(j, i) };
                    if p > 0.0 && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
            seen.into_iter().all(|s| s)
        };
        self.dim > 0 && reach(true) && reach(false)
    }
}

fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

/// Transition matrix of a design on levels with response probabilities `f`.
///
/// KR chains carry the internal counter, giving `m*k` states labelled
/// `(level, tau)`. GU&D chains step once per cohort. Only reflecting
/// boundaries give a finite chain.
pub fn build_tpm(rule: &DesignRule, f: &[f64], policy: BoundaryPolicy) -> Result<TransitionMatrix> {
    let rule = rule.validated()?;
    check_f(f)?;
    if policy != BoundaryPolicy::Reflecting {
        return Err(Error::Unsupported(
            "finite transition matrices need reflecting boundaries".into(),
        ));
    }
    if rule.orientation == Orientation::AboveMedian {
        let below = DesignRule {
            orientation: Orientation::BelowMedian,
            ..rule
        };
        let inner = build_tpm(&below, &mirrored(f), policy)?;
        return Ok(relabel_mirror(inner, f.len()));
    }
    let m = f.len();
    match rule.variant {
        Variant::Kr { k } => {
            let k = k as usize;
            let dim = m * k;
            let mut data = vec![0.0; dim * dim];
            let idx = |u: usize, t: usize| u * k + t;
            for u in 0..m {
                for t in 0..k {
                    let row = idx(u, t) * dim;
                    data[row + idx(u.saturating_sub(1), 0)] += f[u];
                    let no = 1.0 - f[u];
                    if t + 1 < k {
                        data[row + idx(u, t + 1)] += no;
                    } else {
                        data[row + idx((u + 1).min(m - 1), 0)] += no;
                    }
                }
            }
            let labels = (0..m)
                .flat_map(|u| (0..k as u32).map(move |t| (u, t)))
                .collect();
            Ok(TransitionMatrix {
                dim,
                data,
                labels,
                trials_per_step: 1,
            })
        }
        _ => {
            let mut tpm = birth_death(&rule, f);
            tpm.trials_per_step = rule.cohort_size();
            Ok(tpm)
        }
    }
}

fn birth_death(rule: &DesignRule, f: &[f64]) -> TransitionMatrix {
    let m = f.len();
    let mut data = vec![0.0; m * m];
    for u in 0..m {
        let (up, down) = marginal_moves(rule, f[u]);
        let row = u * m;
        data[row + (u + 1).min(m - 1)] += up;
        data[row + u.saturating_sub(1)] += down;
        data[row + u] += 1.0 - up - down;
    }
    TransitionMatrix {
        dim: m,
        data,
        labels: (0..m).map(|u| (u, 0)).collect(),
        trials_per_step: 1,
    }
}

fn relabel_mirror(inner: TransitionMatrix, m: usize) -> TransitionMatrix {
    let dim = inner.dim;
    let labels: Vec<(usize, u32)> = inner.labels.iter().map(|&(u, t)| (m - 1 - u, t)).collect();
    // Reorder states so that labels are sorted by (level, tau).
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by_key(|&i| labels[i]);
    let mut data = vec![0.0; dim * dim];
    for (ni, &oi) in order.iter().enumerate() {
        for (nj, &oj) in order.iter().enumerate() {
            data[ni * dim + nj] = inner.get(oi, oj);
        }
    }
    TransitionMatrix {
        dim,
        data,
        labels: order.iter().map(|&i| labels[i]).collect(),
        trials_per_step: inner.trials_per_step,
    }
}

/// The m x m chain of KR marginal moves (up-probability per level).
pub fn kr_marginal_tpm(k: u32, f: &[f64]) -> Result<TransitionMatrix> {
    check_f(f)?;
    let rule = DesignRule::kr(k)?;
    Ok(birth_death(&rule, f))
}

/// Left stationary vector by power iteration (accelerated by squaring
/// the lazy chain).
pub fn stationary_vector(tpm: &TransitionMatrix) -> Result<Vec<f64>> {
    if !tpm.is_irreducible() {
        return Err(Error::Degenerate("reducible transition matrix".into()));
    }
    let n = tpm.dim;
    let mut a: Vec<f64> = tpm.data.iter().map(|p| 0.5 * p).collect();
    for i in 0..n {
        a[i * n + i] += 0.5;
    }
    for _ in 0..60 {
        a = matmul(&a, &a, n);
        for row in a.chunks_mut(n) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= s);
        }
    }
    let mut rho: Vec<f64> = vec![1.0 / n as f64; n];
    let mut next = vec![0.0; n];
    for (i, &r) in rho.iter().enumerate() {
        for j in 0..n {
            next[j] += r * a[i * n + j];
        }
    }
    rho = next;
    for _ in 0..10_000 {
        let s: f64 = rho.iter().sum();
        rho.iter_mut().for_each(|r| *r /= s);
        let nxt = tpm.step(&rho);
        let diff: f64 = nxt.iter().zip(&rho).map(|(a, b)| (a - b).abs()).sum();
        rho = nxt;
        if diff < 1e-15 {
            break;
        }
    }
    let s: f64 = rho.iter().sum();
    Ok(rho.into_iter().map(|r| r / s).collect())
}

/// Distribution at step `i` (one-based) from `initial`.
pub fn progression(tpm: &TransitionMatrix, initial: &[f64], i: usize) -> Result<Vec<f64>> {
    if initial.len() != tpm.dim {
        return Err(Error::LengthMismatch("initial vector vs matrix".into()));
    }
    if (initial.iter().sum::<f64>() - 1.0).abs() > 1e-9 || initial.iter().any(|&x| x < 0.0) {
        return Err(Error::InvalidParameter {
            field: "initial",
            reason: "must be a probability vector".into(),
        });
    }
    let mut rho = initial.to_vec();
    for _ in 1..i.max(1) {
        rho = tpm.step(&rho);
    }
    Ok(rho)
}

/// Mean-level trajectory `mean(rho^(1..=steps))`.
pub fn mean_trajectory(tpm: &TransitionMatrix, initial: &[f64], steps: usize) -> Vec<f64> {
    let mut rho = initial.to_vec();
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        out.push(tpm.mean_level(&rho));
        rho = tpm.step(&rho);
    }
    out
}

/// Trials until the ensemble mean covers `fraction` of its initial
/// distance to the stationary mean. Cohort chains report whole cohorts.
pub fn trials_to_convergence(tpm: &TransitionMatrix, initial: &[f64], fraction: f64) -> Result<usize> {
    let pi = stationary_vector(tpm)?;
    let mu = tpm.mean_level(&pi);
    let mut rho = progression(tpm, initial, 1)?;
    let d0 = (tpm.mean_level(&rho) - mu).abs();
    if d0 < 1e-12 {
        return Err(Error::Degenerate(
            "initial mean equals the stationary mean".into(),
        ));
    }
    let tol = (1.0 - fraction) * d0;
    for i in 1..=10_000_000usize {
        if (tpm.mean_level(&rho) - mu).abs() <= tol {
            return Ok(i * tpm.trials_per_step);
        }
        rho = tpm.step(&rho);
    }
    Err(Error::Degenerate("no convergence within 10^7 steps".into()))
}

/// Second-largest eigenvalue modulus, `max(lambda_1, |lambda_{m-1}|)`,
/// for a reversible chain: symmetrize, deflate the stationary direction
/// and run power iteration.
pub fn second_eigenvalue(tpm: &TransitionMatrix) -> Result<f64> {
    let pi = stationary_vector(tpm)?;
    let n = tpm.dim;
    if n == 1 {
        return Ok(0.0);
    }
    for i in 0..n {
        for j in 0..n {
            let a = pi[i] * tpm.get(i, j);
            let b = pi[j] * tpm.get(j, i);
            if (a - b).abs() > 1e-10 * (a + b).max(1e-300) && (a - b).abs() > 1e-14 {
                return Err(Error::Unsupported(
                    "eigenvalue routine needs a reversible chain".into(),
                ));
            }
        }
    }
    let sq: Vec<f64> = pi.iter().map(|p| p.sqrt()).collect();
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            s[i * n + j] = sq[i] * tpm.get(i, j) / sq[j] - sq[i] * sq[j];
        }
    }
    // Power iteration on S^2 via repeated squaring, then Rayleigh refinement.
    let s2 = matmul(&s, &s, n);
    let mut b = s2.clone();
    for _ in 0..40 {
        let mx = b.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        if mx == 0.0 {
            return Ok(0.0);
        }
        b.iter_mut().for_each(|x| *x /= mx);
        b = matmul(&b, &b, n);
    }
    let col = (0..n)
        .max_by(|&a, &c| {
            let na: f64 = (0..n).map(|i| b[i * n + a].powi(2)).sum();
            let nc: f64 = (0..n).map(|i| b[i * n + c].powi(2)).sum();
            na.total_cmp(&nc)
        })
        .unwrap();
    let mut x: Vec<f64> = (0..n).map(|i| b[i * n + col]).collect();
    let mut lambda2 = 0.0;
    for _ in 0..200 {
        let dot: f64 = x.iter().zip(&sq).map(|(a, b)| a * b).sum();
        x.iter_mut().zip(&sq).for_each(|(a, b)| *a -= dot * b);
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Ok(0.0);
        }
        x.iter_mut().for_each(|v| *v /= norm);
        let y: Vec<f64> = (0..n)
            .map(|i| (0..n).map(|j| s2[i * n + j] * x[j]).sum())
            .collect();
        let next: f64 = y.iter().zip(&x).map(|(a, b)| a * b).sum();
        let done = (next - lambda2).abs() < 1e-16;
        lambda2 = next;
        x = y;
        if done {
            break;
        }
    }
    Ok(lambda2.max(0.0).sqrt())
}

/// Convergence rate for a design: KR uses its marginal m x m chain.
pub fn design_eigenvalue(rule: &DesignRule, f: &[f64]) -> Result<f64> {
    match (rule.variant, rule.orientation) {
        (Variant::Kr { k }, Orientation::BelowMedian) => second_eigenvalue(&kr_marginal_tpm(k, f)?),
        (Variant::Kr { k }, Orientation::AboveMedian) => {
            second_eigenvalue(&kr_marginal_tpm(k, &mirrored(f))?)
        }
        _ => second_eigenvalue(&build_tpm(rule, f, BoundaryPolicy::Reflecting)?),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_state_symmetric_chain() {
        let t = TransitionMatrix::from_rows(vec![vec![0.7, 0.3], vec![0.3, 0.7]]).unwrap();
        assert!((second_eigenvalue(&t).unwrap() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn rows_sum_to_one() {
        let f = [0.1, 0.3, 0.5, 0.7, 0.9];
        for rule in [
            DesignRule::sud(),
            DesignRule::bcd(0.3).unwrap(),
            DesignRule::kr(3).unwrap(),
            DesignRule::gud(3, 0, 2).unwrap(),
            DesignRule::kr(2).unwrap().above_median(),
        ] {
            let t = build_tpm(&rule, &f, BoundaryPolicy::Reflecting).unwrap();
            for i in 0..t.dim() {
                assert!((t.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        let kr = build_tpm(&DesignRule::kr(2).unwrap(), &f, BoundaryPolicy::Reflecting).unwrap();
        assert_eq!(kr.dim(), 10);
    }

    #[test]
    fn progression_first_steps() {
        let f = [0.2, 0.4, 0.6, 0.8];
        let t = build_tpm(&DesignRule::sud(), &f, BoundaryPolicy::Reflecting).unwrap();
        let init = t.point_mass(0);
        assert_eq!(progression(&t, &init, 1).unwrap(), init);
        assert_eq!(progression(&t, &init, 2).unwrap(), t.row(0).to_vec());
    }

    #[test]
    fn reducible_rejected() {
        let t = TransitionMatrix::from_rows(vec![vec![1.0, 0.0], vec![0.5, 0.5]]).unwrap();
        assert!(matches!(second_eigenvalue(&t), Err(Error::Degenerate(_))));
    }

    #[test]
    fn layover_matrix_unsupported() {
        assert!(build_tpm(&DesignRule::sud(), &[0.2, 0.8], BoundaryPolicy::Layover).is_err());
    }

    #[test]
    fn convergence_limit_and_error() {
        let f = [0.1, 0.3, 0.5, 0.7, 0.9];
        let t = build_tpm(&DesignRule::sud(), &f, BoundaryPolicy::Reflecting).unwrap();
        assert_eq!(trials_to_convergence(&t, &t.point_mass(0), 0.0).unwrap(), 1);
        assert!(trials_to_convergence(&t, &t.point_mass(2), 0.99).is_err());
    }
}
