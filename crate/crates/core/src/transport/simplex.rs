//! Network simplex on the bipartite transportation graph.
//!
//! Nodes `0..m` are supply rows and `m..m+n` demand columns. A basis is a
//! spanning tree with `m + n - 1` cells; flows on tree cells are determined
//! by the marginals and node potentials by `u_i + v_j = c_ij` on the tree.

use std::collections::VecDeque;

use super::{checked_marginals, CostMatrix, DualPotentials, OTResult, TransportError, TransportPlan};

/// Consecutive degenerate pivots tolerated before switching to Bland's rule.
const DEGENERATE_SWITCH: usize = 32;

/// Exact optimal transport cost and plan.
///
/// Weights must be strictly positive with sums agreeing within
/// [`super::MARGINAL_SUM_TOLERANCE`].
pub fn emd_exact(wa: &[f64], wb: &[f64], c: &CostMatrix) -> Result<OTResult, TransportError> {
    let (supply, demand) = checked_marginals(wa, wb, c)?;
    let mut solver = Simplex::new(&supply, &demand, c);
    solver.solve()?;
    let (row, col) = solver.potentials();
    let mut mass = vec![0.0; c.rows() * c.cols()];
    for cell in &solver.basis {
        mass[cell.i * c.cols() + cell.j] = cell.flow.max(0.0);
    }
    let plan = TransportPlan::new(mass, wa, wb);
    Ok(OTResult {
        distance: plan.cost(c),
        plan,
        iterations: 0,
        converged: true,
        duals: Some(DualPotentials { row, col }),
    })
}

#[derive(Debug, Clone, Copy)]
struct BasicCell {
    i: usize,
    j: usize,
    flow: f64,
}

struct Simplex<'a> {
    m: usize,
    n: usize,
    c: &'a CostMatrix,
    basis: Vec<BasicCell>,
    in_basis: Vec<bool>,
    // Tree scratch, rebuilt after each pivot.
    adjacency: Vec<Vec<usize>>,
    parent_edge: Vec<usize>,
    parent: Vec<usize>,
    depth: Vec<usize>,
    potential: Vec<f64>,
    price_tol: f64,
}

impl<'a> Simplex<'a> {
    fn new(supply: &[f64], demand: &[f64], c: &'a CostMatrix) -> Self {
        let (m, n) = (supply.len(), demand.len());
        let mut solver = Simplex {
            m,
            n,
            c,
            basis: Vec::with_capacity(m + n - 1),
            in_basis: vec![false; m * n],
            adjacency: vec![Vec::new(); m + n],
            parent_edge: vec![usize::MAX; m + n],
            parent: vec![usize::MAX; m + n],
            depth: vec![0; m + n],
            potential: vec![0.0; m + n],
            price_tol: 1e-12 * c.max().max(1.0),
        };
        solver.initial_basis(supply, demand);
        solver
    }

    /// Least-cost start: visit cells by increasing cost, saturate one line per
    /// allocation. Produces exactly `m + n - 1` cells forming a spanning tree.
    fn initial_basis(&mut self, supply: &[f64], demand: &[f64]) {
        let (m, n) = (self.m, self.n);
        let mut order: Vec<usize> = (0..m * n).collect();
        order.sort_by(|&x, &y| self.c.as_slice()[x].total_cmp(&self.c.as_slice()[y]).then(x.cmp(&y)));
        let mut rem_row = supply.to_vec();
        let mut rem_col = demand.to_vec();
        let mut row_alive = vec![true; m];
        let mut col_alive = vec![true; n];
        let (mut rows_left, mut cols_left) = (m, n);
        for cell in order {
            if rows_left + cols_left == 0 {
                break;
            }
            let (i, j) = (cell / n, cell % n);
            if !row_alive[i] || !col_alive[j] {
                continue;
            }
            let flow = rem_row[i].min(rem_col[j]).max(0.0);
            self.push_basic(i, j, flow);
            rem_row[i] -= flow;
            rem_col[j] -= flow;
            let close_row = if rows_left == 1 && cols_left == 1 {
                // Final cell closes both lines.
                row_alive[i] = false;
                col_alive[j] = false;
                rows_left = 0;
                cols_left = 0;
                continue;
            } else if rows_left == 1 {
                false
            } else if cols_left == 1 {
                true
            } else {
                rem_row[i] <= rem_col[j]
            };
            if close_row {
                row_alive[i] = false;
                rows_left -= 1;
            } else {
                col_alive[j] = false;
                cols_left -= 1;
            }
        }
        debug_assert_eq!(self.basis.len(), m + n - 1);
    }

    fn push_basic(&mut self, i: usize, j: usize, flow: f64) {
        self.in_basis[i * self.n + j] = true;
        self.basis.push(BasicCell { i, j, flow });
    }

    /// Rebuilds parent pointers, depths and potentials from the basis tree.
    fn rebuild_tree(&mut self) {
        let nodes = self.m + self.n;
        for adj in &mut self.adjacency {
            adj.clear();
        }
        for (e, cell) in self.basis.iter().enumerate() {
            self.adjacency[cell.i].push(e);
            self.adjacency[self.m + cell.j].push(e);
        }
        self.parent[..nodes].fill(usize::MAX);
        self.parent[0] = 0;
        self.parent_edge[0] = usize::MAX;
        self.depth[0] = 0;
        self.potential[0] = 0.0;
        let mut queue = VecDeque::with_capacity(nodes);
        queue.push_back(0);
        while let Some(node) = queue.pop_front() {
            for &e in &self.adjacency[node] {
                let cell = self.basis[e];
                let other = if node < self.m { self.m + cell.j } else { cell.i };
                if self.parent[other] != usize::MAX {
                    continue;
                }
                self.parent[other] = node;
                self.parent_edge[other] = e;
                self.depth[other] = self.depth[node] + 1;
                let cost = self.c.get(cell.i, cell.j);
                self.potential[other] = cost - self.potential[node];
                queue.push_back(other);
            }
        }
    }

    fn reduced_cost(&self, i: usize, j: usize) -> f64 {
        self.c.get(i, j) - self.potential[i] - self.potential[self.m + j]
    }

    /// Dantzig pricing (most negative reduced cost, lowest index on ties), or
    /// Bland's first-improving rule when `bland` is set.
    fn entering(&self, bland: bool) -> Option<(usize, usize)> {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..self.m {
            for j in 0..self.n {
                if self.in_basis[i * self.n + j] {
                    continue;
                }
                let rc = self.reduced_cost(i, j);
                if rc >= -self.price_tol {
                    continue;
                }
                if bland {
                    return Some((i, j));
                }
                if best.map_or(true, |(_, _, b)| rc < b) {
                    best = Some((i, j, rc));
                }
            }
        }
        best.map(|(i, j, _)| (i, j))
    }

    /// Tree edges on the cycle closed by `(i, j)`, in order starting from the
    /// column end. Even positions lose flow, odd positions gain it.
    fn cycle(&self, i: usize, j: usize) -> Vec<usize> {
        let mut from_col = Vec::new();
        let mut from_row = Vec::new();
        let (mut a, mut b) = (self.m + j, i);
        while self.depth[a] > self.depth[b] {
            from_col.push(self.parent_edge[a]);
            a = self.parent[a];
        }
        while self.depth[b] > self.depth[a] {
            from_row.push(self.parent_edge[b]);
            b = self.parent[b];
        }
        while a != b {
            from_col.push(self.parent_edge[a]);
            a = self.parent[a];
            from_row.push(self.parent_edge[b]);
            b = self.parent[b];
        }
        from_col.extend(from_row.into_iter().rev());
        from_col
    }

    fn solve(&mut self) -> Result<(), TransportError> {
        let limit = 50 * (self.m * self.n) + 1000;
        let mut degenerate_run = 0usize;
        for _ in 0..limit {
            self.rebuild_tree();
            let Some((i, j)) = self.entering(degenerate_run >= DEGENERATE_SWITCH) else {
                return Ok(());
            };
            let cycle = self.cycle(i, j);
            let mut leaving = usize::MAX;
            let mut theta = f64::INFINITY;
            for &e in cycle.iter().step_by(2) {
                let cell = self.basis[e];
                let better = cell.flow < theta
                    || (cell.flow == theta && self.cell_index(e) < self.cell_index(leaving));
                if better {
                    theta = cell.flow;
                    leaving = e;
                }
            }
            let theta = theta.max(0.0);
            if theta == 0.0 {
                degenerate_run += 1;
            } else {
                degenerate_run = 0;
            }
            for (k, &e) in cycle.iter().enumerate() {
                let cell = &mut self.basis[e];
                if k % 2 == 0 {
                    cell.flow = (cell.flow - theta).max(0.0);
                } else {
                    cell.flow += theta;
                }
            }
            let out = self.basis[leaving];
            self.in_basis[out.i * self.n + out.j] = false;
            self.in_basis[i * self.n + j] = true;
            self.basis[leaving] = BasicCell { i, j, flow: theta };
        }
        Err(TransportError::PivotLimit(limit))
    }

    fn cell_index(&self, e: usize) -> usize {
        if e == usize::MAX {
            return usize::MAX;
        }
        let cell = self.basis[e];
        cell.i * self.n + cell.j
    }

    /// Row and column potentials of the final basis.
    fn potentials(&mut self) -> (Vec<f64>, Vec<f64>) {
        self.rebuild_tree();
        (
            self.potential[..self.m].to_vec(),
            self.potential[self.m..self.m + self.n].to_vec(),
        )
    }
}
