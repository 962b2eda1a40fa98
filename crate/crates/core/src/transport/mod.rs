//! Optimal transport between normalized bag-of-words documents.
//!
//! [`emd_exact`] solves the transportation problem exactly with a network
//! simplex and returns dual potentials that certify optimality. [`sinkhorn`]
//! computes an entropically regularized plan, used as a cheap prefilter.
//! [`wmd`] and [`wrd`] wire documents and embeddings into the exact solver.

mod simplex;
mod sinkhorn;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embeddings::{euclidean, EmbeddingTable};
use crate::textproc::Document;

pub use simplex::emd_exact;
pub use sinkhorn::{
    sinkhorn, sinkhorn_kernel, SinkhornMode, SinkhornParams, DEFAULT_MAX_ITER as SINKHORN_MAX_ITER,
    DEFAULT_TOL as SINKHORN_TOL,
};

/// Tolerance on `|sum(a) - sum(b)|` accepted by the solvers.
pub const MARGINAL_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("marginal sums differ: {left} vs {right}")]
    MarginalMismatch { left: f64, right: f64 },
    #[error("invalid cost matrix: {0}")]
    InvalidCost(String),
    #[error("epsilon must be positive and finite, got {0}")]
    InvalidEpsilon(f64),
    #[error(
        "kernel exp(-c/epsilon) underflowed at epsilon = {epsilon}; use a larger epsilon or the log-domain mode"
    )]
    KernelUnderflow { epsilon: f64 },
    #[error("token {0:?} missing from the embedding table")]
    MissingToken(String),
    #[error("token {0:?} has a zero-norm embedding")]
    ZeroNorm(String),
    #[error("network simplex did not terminate after {0} pivots")]
    PivotLimit(usize),
}

/// Dense row-major matrix of non-negative transport costs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    costs: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, costs: Vec<f64>) -> Result<Self, TransportError> {
        if rows == 0 || cols == 0 {
            return Err(TransportError::InvalidCost("empty matrix".into()));
        }
        if costs.len() != rows * cols {
            return Err(TransportError::DimensionMismatch(format!(
                "{} costs for a {rows}x{cols} matrix",
                costs.len()
            )));
        }
        if let Some(bad) = costs.iter().find(|c| !c.is_finite() || **c < 0.0) {
            return Err(TransportError::InvalidCost(format!(
                "entries must be finite and non-negative, found {bad}"
            )));
        }
        Ok(CostMatrix { rows, cols, costs })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TransportError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TransportError::DimensionMismatch("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.costs[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.costs
    }

    pub fn max(&self) -> f64 {
        self.costs.iter().copied().fold(0.0, f64::max)
    }

    /// Median entry (mean of the two middle entries for even counts).
    pub fn median(&self) -> f64 {
        let mut sorted = self.costs.clone();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        }
    }
}

/// A coupling between two weight vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportPlan {
    rows: usize,
    cols: usize,
    mass: Vec<f64>,
    row_marginals: Vec<f64>,
    col_marginals: Vec<f64>,
}

impl TransportPlan {
    pub(crate) fn new(mass: Vec<f64>, row_marginals: &[f64], col_marginals: &[f64]) -> Self {
        TransportPlan {
            rows: row_marginals.len(),
            cols: col_marginals.len(),
            mass,
            row_marginals: row_marginals.to_vec(),
            col_marginals: col_marginals.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.mass[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.mass
    }

    pub fn row_marginals(&self) -> &[f64] {
        &self.row_marginals
    }

    pub fn col_marginals(&self) -> &[f64] {
        &self.col_marginals
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.mass.chunks(self.cols).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for row in self.mass.chunks(self.cols) {
            for (s, m) in sums.iter_mut().zip(row) {
                *s += m;
            }
        }
        sums
    }

    pub fn total_mass(&self) -> f64 {
        self.mass.iter().sum()
    }

    /// Largest absolute deviation of any row or column sum from its marginal.
    pub fn max_marginal_violation(&self) -> f64 {
        let rows = self.row_sums().into_iter().zip(&self.row_marginals);
        let cols = self.col_sums().into_iter().zip(&self.col_marginals);
        rows.chain(cols).map(|(s, w)| (s - w).abs()).fold(0.0, f64::max)
    }

    /// `sum_ij mass_ij * cost_ij`.
    pub fn cost(&self, c: &CostMatrix) -> f64 {
        self.mass.iter().zip(c.as_slice()).map(|(m, c)| m * c).sum()
    }
}

/// Dual variables of the transportation LP: `row[i] + col[j] <= c[i][j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualPotentials {
    pub row: Vec<f64>,
    pub col: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OTResult {
    pub distance: f64,
    pub plan: TransportPlan,
    /// Scaling iterations; always 0 for the exact solver.
    pub iterations: usize,
    pub converged: bool,
    /// Optimal duals, present for exact solutions.
    pub duals: Option<DualPotentials>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CertificateViolation {
    #[error("dual infeasible at ({i}, {j}): reduced cost {reduced_cost}")]
    DualInfeasible { i: usize, j: usize, reduced_cost: f64 },
    #[error("complementary slackness fails at ({i}, {j}): mass {mass}, reduced cost {reduced_cost}")]
    Slackness {
        i: usize,
        j: usize,
        mass: f64,
        reduced_cost: f64,
    },
    #[error("marginal violation {0}")]
    Marginals(f64),
    #[error("no dual potentials attached")]
    MissingDuals,
}

/// Checks primal feasibility, dual feasibility (`c - u - v >= -tol`) and
/// complementary slackness (`|c - u - v| <= tol` wherever mass is positive).
pub fn verify_certificate(
    result: &OTResult,
    c: &CostMatrix,
    tol: f64,
) -> Result<(), CertificateViolation> {
    let duals = result.duals.as_ref().ok_or(CertificateViolation::MissingDuals)?;
    let plan = &result.plan;
    let violation = plan.max_marginal_violation();
    if violation > tol {
        return Err(CertificateViolation::Marginals(violation));
    }
    for i in 0..c.rows() {
        for j in 0..c.cols() {
            let reduced_cost = c.get(i, j) - duals.row[i] - duals.col[j];
            if reduced_cost < -tol {
                return Err(CertificateViolation::DualInfeasible { i, j, reduced_cost });
            }
            let mass = plan.get(i, j);
            if mass > 0.0 && reduced_cost.abs() > tol {
                return Err(CertificateViolation::Slackness {
                    i,
                    j,
                    mass,
                    reduced_cost,
                });
            }
        }
    }
    Ok(())
}

/// Euclidean distances between the embeddings of the two supports.
pub fn cost_matrix(
    a: &Document,
    b: &Document,
    table: &EmbeddingTable,
) -> Result<CostMatrix, TransportError> {
    let left = vectors(a, table)?;
    let right = vectors(b, table)?;
    let mut costs = Vec::with_capacity(left.len() * right.len());
    for u in &left {
        for v in &right {
            let d = euclidean(u, v)
                .map_err(|e| TransportError::DimensionMismatch(e.to_string()))?;
            costs.push(d);
        }
    }
    CostMatrix::new(left.len(), right.len(), costs)
}

fn vectors<'t>(doc: &Document, table: &'t EmbeddingTable) -> Result<Vec<&'t [f64]>, TransportError> {
    doc.tokens()
        .iter()
        .map(|t| table.lookup(t).ok_or_else(|| TransportError::MissingToken(t.clone())))
        .collect()
}

/// Exact transport between two documents, with the plan and duals.
pub fn wmd_result(
    a: &Document,
    b: &Document,
    table: &EmbeddingTable,
) -> Result<OTResult, TransportError> {
    let c = cost_matrix(a, b, table)?;
    emd_exact(a.weights(), b.weights(), &c)
}

/// Word mover's distance.
pub fn wmd(a: &Document, b: &Document, table: &EmbeddingTable) -> Result<f64, TransportError> {
    Ok(wmd_result(a, b, table)?.distance)
}

/// Word rotator's distance: mass proportional to `weight * norm`, cost
/// `1 - cos` between word vectors.
pub fn wrd(a: &Document, b: &Document, table: &EmbeddingTable) -> Result<f64, TransportError> {
    let (left, wa) = norm_weighted(a, table)?;
    let (right, wb) = norm_weighted(b, table)?;
    let mut costs = Vec::with_capacity(left.len() * right.len());
    for (ta, u, nu) in &left {
        for (tb, v, nv) in &right {
            let cost = if ta == tb {
                0.0
            } else {
                let dot: f64 = u.iter().zip(v.iter()).map(|(x, y)| x * y).sum();
                (1.0 - dot / (nu * nv)).max(0.0)
            };
            costs.push(cost);
        }
    }
    let c = CostMatrix::new(left.len(), right.len(), costs)?;
    Ok(emd_exact(&wa, &wb, &c)?.distance)
}

type NormedWord<'a> = (&'a str, &'a [f64], f64);

fn norm_weighted<'a>(
    doc: &'a Document,
    table: &'a EmbeddingTable,
) -> Result<(Vec<NormedWord<'a>>, Vec<f64>), TransportError> {
    let mut words = Vec::with_capacity(doc.support_len());
    let mut mass = Vec::with_capacity(doc.support_len());
    for (token, weight) in doc.iter() {
        let v = table
            .lookup(token)
            .ok_or_else(|| TransportError::MissingToken(token.to_string()))?;
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(TransportError::ZeroNorm(token.to_string()));
        }
        words.push((token, v, norm));
        mass.push(weight * norm);
    }
    let total: f64 = mass.iter().sum();
    mass.iter_mut().for_each(|m| *m /= total);
    Ok((words, mass))
}

/// Validates a marginal pair and returns copies with `b` rescaled to `sum(a)`.
pub(crate) fn checked_marginals(
    wa: &[f64],
    wb: &[f64],
    c: &CostMatrix,
) -> Result<(Vec<f64>, Vec<f64>), TransportError> {
    if wa.len() != c.rows() || wb.len() != c.cols() {
        return Err(TransportError::DimensionMismatch(format!(
            "weights {}x{} against a {}x{} cost matrix",
            wa.len(),
            wb.len(),
            c.rows(),
            c.cols()
        )));
    }
    for w in wa.iter().chain(wb) {
        if !w.is_finite() || *w <= 0.0 {
            return Err(TransportError::InvalidWeights(format!(
                "weights must be finite and strictly positive, found {w}"
            )));
        }
    }
    let sa: f64 = wa.iter().sum();
    let sb: f64 = wb.iter().sum();
    if (sa - sb).abs() > MARGINAL_SUM_TOLERANCE {
        return Err(TransportError::MarginalMismatch { left: sa, right: sb });
    }
    let scale = sa / sb;
    Ok((wa.to_vec(), wb.iter().map(|w| w * scale).collect()))
}
