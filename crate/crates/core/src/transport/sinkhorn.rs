//! Entropically regularized transport by alternating marginal scaling.
//!
//! The reported distance is the transport cost `<plan, c>` of the regularized
//! plan after it has been rounded onto the transportation polytope, so it
//! never falls below the exact optimum.

use super::{checked_marginals, CostMatrix, OTResult, TransportError, TransportPlan};

pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 10_000;

const ANNEAL_FACTOR: f64 = 0.5;
const STAGE_ITERATIONS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SinkhornMode {
    /// Scaling in the log domain; stable for small epsilon.
    #[default]
    LogDomain,
    /// Classic kernel scaling with `exp(-c / epsilon)`.
    Kernel,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornParams {
    pub epsilon: f64,
    /// L1 tolerance on each marginal violation.
    pub tol: f64,
    pub max_iter: usize,
    pub mode: SinkhornMode,
}

impl SinkhornParams {
    pub fn new(epsilon: f64) -> Self {
        SinkhornParams {
            epsilon,
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            mode: SinkhornMode::LogDomain,
        }
    }

    /// Epsilon set to `relative * median(c)`, falling back to the maximum and
    /// then to `relative` itself when the costs are mostly zero.
    pub fn relative_to(c: &CostMatrix, relative: f64) -> Self {
        let median = c.median();
        let scale = if median > 0.0 {
            median
        } else if c.max() > 0.0 {
            c.max()
        } else {
            1.0
        };
        Self::new(relative * scale)
    }

    pub fn run(&self, wa: &[f64], wb: &[f64], c: &CostMatrix) -> Result<OTResult, TransportError> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(TransportError::InvalidEpsilon(self.epsilon));
        }
        let (a, b) = checked_marginals(wa, wb, c)?;
        let (raw, iterations, converged) = match self.mode {
            SinkhornMode::LogDomain => log_domain(&a, &b, c, self),
            SinkhornMode::Kernel => kernel(&a, &b, c, self)?,
        };
        let mass = round_to_polytope(raw, &a, &b);
        let plan = TransportPlan::new(mass, wa, wb);
        Ok(OTResult {
            distance: plan.cost(c),
            plan,
            iterations,
            converged,
            duals: None,
        })
    }
}

/// Log-domain Sinkhorn with the given regularization.
pub fn sinkhorn(
    wa: &[f64],
    wb: &[f64],
    c: &CostMatrix,
    epsilon: f64,
    tol: f64,
    max_iter: usize,
) -> Result<OTResult, TransportError> {
    SinkhornParams {
        epsilon,
        tol,
        max_iter,
        mode: SinkhornMode::LogDomain,
    }
    .run(wa, wb, c)
}

/// Kernel-domain Sinkhorn; fails when the Gibbs kernel underflows.
pub fn sinkhorn_kernel(
    wa: &[f64],
    wb: &[f64],
    c: &CostMatrix,
    epsilon: f64,
    tol: f64,
    max_iter: usize,
) -> Result<OTResult, TransportError> {
    SinkhornParams {
        epsilon,
        tol,
        max_iter,
        mode: SinkhornMode::Kernel,
    }
    .run(wa, wb, c)
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn log_domain(a: &[f64], b: &[f64], c: &CostMatrix, p: &SinkhornParams) -> (Vec<f64>, usize, bool) {
    let (m, n) = (a.len(), b.len());
    let log_a: Vec<f64> = a.iter().map(|x| x.ln()).collect();
    let log_b: Vec<f64> = b.iter().map(|x| x.ln()).collect();
    let mut f = vec![0.0; m];
    let mut g = vec![0.0; n];
    let plan = |f: &[f64], g: &[f64], eps: f64| -> Vec<f64> {
        let mut mass = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                mass.push(((f[i] + g[j] - c.get(i, j)) / eps).exp());
            }
        }
        mass
    };

    // Epsilon scaling: warm-start the potentials on a geometric schedule
    // from the cost scale down to the target epsilon.
    let mut schedule = Vec::new();
    let mut stage = c.max();
    while stage > p.epsilon {
        schedule.push(stage);
        stage *= ANNEAL_FACTOR;
    }
    schedule.push(p.epsilon);

    let mut iterations = 0;
    let mut converged = false;
    let last = schedule.len() - 1;
    for (k, &eps) in schedule.iter().enumerate() {
        let budget = if k == last { p.max_iter } else { STAGE_ITERATIONS };
        let mut stage_iterations = 0;
        converged = false;
        while stage_iterations < budget && iterations < p.max_iter {
            iterations += 1;
            stage_iterations += 1;
            for i in 0..m {
                let lse = log_sum_exp((0..n).map(|j| (g[j] - c.get(i, j)) / eps));
                f[i] = eps * (log_a[i] - lse);
            }
            for j in 0..n {
                let lse = log_sum_exp((0..m).map(|i| (f[i] - c.get(i, j)) / eps));
                g[j] = eps * (log_b[j] - lse);
            }
            // Columns match exactly after the g update; only rows can drift.
            let row_violation: f64 = (0..m)
                .map(|i| {
                    let s: f64 = (0..n).map(|j| ((f[i] + g[j] - c.get(i, j)) / eps).exp()).sum();
                    (s - a[i]).abs()
                })
                .sum();
            if row_violation < p.tol {
                converged = true;
                break;
            }
        }
    }
    (plan(&f, &g, p.epsilon), iterations, converged)
}

fn kernel(
    a: &[f64],
    b: &[f64],
    c: &CostMatrix,
    p: &SinkhornParams,
) -> Result<(Vec<f64>, usize, bool), TransportError> {
    let (m, n) = (a.len(), b.len());
    let k: Vec<f64> = c.as_slice().iter().map(|x| (-x / p.epsilon).exp()).collect();
    let underflow = (0..m).any(|i| k[i * n..(i + 1) * n].iter().all(|&x| x == 0.0))
        || (0..n).any(|j| (0..m).all(|i| k[i * n + j] == 0.0));
    if underflow {
        return Err(TransportError::KernelUnderflow { epsilon: p.epsilon });
    }
    let mut u = vec![1.0; m];
    let mut v = vec![1.0; n];
    let plan = |u: &[f64], v: &[f64]| -> Vec<f64> {
        (0..m * n).map(|idx| u[idx / n] * k[idx] * v[idx % n]).collect()
    };
    let mut iterations = 0;
    let mut converged = false;
    while iterations < p.max_iter {
        iterations += 1;
        for i in 0..m {
            let kv: f64 = (0..n).map(|j| k[i * n + j] * v[j]).sum();
            u[i] = a[i] / kv;
        }
        for j in 0..n {
            let ktu: f64 = (0..m).map(|i| k[i * n + j] * u[i]).sum();
            v[j] = b[j] / ktu;
        }
        if u.iter().chain(&v).any(|x| !x.is_finite()) {
            return Err(TransportError::KernelUnderflow { epsilon: p.epsilon });
        }
        if violations(&plan(&u, &v), a, b) < p.tol {
            converged = true;
            break;
        }
    }
    Ok((plan(&u, &v), iterations, converged))
}

/// Max of the L1 row and column marginal violations.
fn violations(mass: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let n = b.len();
    let row: f64 = mass
        .chunks(n)
        .zip(a)
        .map(|(r, w)| (r.iter().sum::<f64>() - w).abs())
        .sum();
    let mut cols = vec![0.0; n];
    for r in mass.chunks(n) {
        for (s, x) in cols.iter_mut().zip(r) {
            *s += x;
        }
    }
    let col: f64 = cols.iter().zip(b).map(|(s, w)| (s - w).abs()).sum();
    row.max(col)
}

/// Projects an approximately feasible plan onto the transportation polytope:
/// scale down overfull rows, then overfull columns, then distribute the
/// remaining deficits as a rank-one correction.
fn round_to_polytope(mut mass: Vec<f64>, a: &[f64], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    for (row, &w) in mass.chunks_mut(n).zip(a) {
        let s: f64 = row.iter().sum();
        if s > w {
            let scale = w / s;
            row.iter_mut().for_each(|x| *x *= scale);
        }
    }
    let mut cols = vec![0.0; n];
    for row in mass.chunks(n) {
        for (s, x) in cols.iter_mut().zip(row) {
            *s += x;
        }
    }
    for (j, (&s, &w)) in cols.iter().zip(b).enumerate() {
        if s > w {
            let scale = w / s;
            for row in mass.chunks_mut(n) {
                row[j] *= scale;
            }
        }
    }
    let row_deficit: Vec<f64> = mass
        .chunks(n)
        .zip(a)
        .map(|(r, w)| (w - r.iter().sum::<f64>()).max(0.0))
        .collect();
    let mut col_sum = vec![0.0; n];
    for row in mass.chunks(n) {
        for (s, x) in col_sum.iter_mut().zip(row) {
            *s += x;
        }
    }
    let col_deficit: Vec<f64> = col_sum.iter().zip(b).map(|(s, w)| (w - s).max(0.0)).collect();
    let total: f64 = row_deficit.iter().sum();
    if total > 0.0 {
        for (row, dr) in mass.chunks_mut(n).zip(&row_deficit) {
            for (x, dc) in row.iter_mut().zip(&col_deficit) {
                *x += dr * dc / total;
            }
        }
    }
    mass
}

#[cfg(test)]
mod tests {
    use super::super::emd_exact;
    use super::*;

    fn cm(rows: &[&[f64]]) -> CostMatrix {
        CostMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn approaches_exact_on_two_by_two() {
        let c = cm(&[&[0.0, 2.0], &[1.0, 1.0]]);
        let w = [0.5, 0.5];
        let r = sinkhorn(&w, &w, &c, 0.01, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert!(r.converged);
        assert!((r.distance - 0.5).abs() < 0.01, "{}", r.distance);
        assert!(r.distance >= 0.5 - 1e-9);
        assert!(r.plan.max_marginal_violation() < 1e-9);
    }

    #[test]
    fn large_epsilon_gives_independent_coupling() {
        let c = cm(&[&[0.0, 2.0, 1.0], &[1.0, 1.0, 3.0]]);
        let (wa, wb) = ([0.3, 0.7], [0.2, 0.5, 0.3]);
        let r = sinkhorn(&wa, &wb, &c, 1e6 * c.max(), DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        let mut expected = 0.0;
        for i in 0..2 {
            for j in 0..3 {
                assert!((r.plan.get(i, j) - wa[i] * wb[j]).abs() < 1e-5);
                expected += wa[i] * wb[j] * c.get(i, j);
            }
        }
        assert!((r.distance - expected).abs() < 1e-5);
    }

    #[test]
    fn identical_documents_are_close_to_zero() {
        let c = cm(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let w = [0.4, 0.6];
        let r = sinkhorn(&w, &w, &c, 0.01, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert!(r.distance >= 0.0);
        assert!(r.distance < 0.01);
    }

    #[test]
    fn kernel_mode_matches_log_domain_at_moderate_epsilon() {
        let c = cm(&[&[0.0, 2.0], &[1.0, 1.0]]);
        let w = [0.5, 0.5];
        let a = sinkhorn(&w, &w, &c, 0.2, 1e-9, DEFAULT_MAX_ITER).unwrap();
        let b = sinkhorn_kernel(&w, &w, &c, 0.2, 1e-9, DEFAULT_MAX_ITER).unwrap();
        assert!((a.distance - b.distance).abs() < 1e-8);
    }

    #[test]
    fn kernel_underflow_is_reported() {
        let c = cm(&[&[1000.0, 2000.0], &[1500.0, 1000.0]]);
        let w = [0.5, 0.5];
        let err = sinkhorn_kernel(&w, &w, &c, 1e-3, DEFAULT_TOL, 100).unwrap_err();
        assert!(matches!(err, TransportError::KernelUnderflow { .. }));
        assert!(err.to_string().contains("log-domain"));
        // Log domain handles the same instance.
        let r = sinkhorn(&w, &w, &c, 1e-3, DEFAULT_TOL, 100).unwrap();
        assert!((r.distance - 1000.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_epsilon() {
        let c = cm(&[&[1.0]]);
        assert_eq!(
            sinkhorn(&[1.0], &[1.0], &c, 0.0, 1e-6, 10).unwrap_err(),
            TransportError::InvalidEpsilon(0.0)
        );
    }

    #[test]
    fn not_converged_flag() {
        let c = cm(&[&[0.0, 5.0, 1.0], &[3.0, 0.0, 2.0], &[1.0, 4.0, 0.0]]);
        let (wa, wb) = ([0.2, 0.3, 0.5], [0.5, 0.3, 0.2]);
        let r = sinkhorn(&wa, &wb, &c, 1e-3, 1e-12, 1).unwrap();
        assert!(!r.converged);
        assert_eq!(r.iterations, 1);
        // Even unconverged, the rounded plan is feasible and bounded by the optimum.
        assert!(r.plan.max_marginal_violation() < 1e-12);
        let exact = emd_exact(&wa, &wb, &c).unwrap().distance;
        assert!(r.distance >= exact - 1e-9);
    }

    #[test]
    fn relative_epsilon_uses_median() {
        let c = cm(&[&[0.0, 2.0], &[4.0, 6.0]]);
        assert_eq!(SinkhornParams::relative_to(&c, 0.05).epsilon, 0.05 * 3.0);
        let zero = cm(&[&[0.0, 0.0], &[0.0, 0.0]]);
        assert_eq!(SinkhornParams::relative_to(&zero, 0.05).epsilon, 0.05);
    }
}
