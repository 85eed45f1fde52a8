//! Balanced transportation problems and the exact transportation simplex.
//!
//! North-west-corner start, u-v (MODI) duals on the basis tree, Bland's
//! rule for both the entering and the leaving cell.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Relative tolerance on `|sum(s) - sum(d)|`.
pub const BALANCE_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct TransportProblem {
    pub cost: Array2<f64>,
    pub supplies: Vec<f64>,
    pub demands: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    pub flow: Array2<f64>,
    pub objective: f64,
    pub row_potentials: Vec<f64>,
    pub col_potentials: Vec<f64>,
}

impl TransportProblem {
    pub fn new(cost: Array2<f64>, supplies: Vec<f64>, demands: Vec<f64>) -> Result<Self> {
        let p = TransportProblem {
            cost,
            supplies,
            demands,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn num_sources(&self) -> usize {
        self.supplies.len()
    }

    pub fn num_destinations(&self) -> usize {
        self.demands.len()
    }

    pub fn total_supply(&self) -> f64 {
        self.supplies.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let (ns, nd) = (self.supplies.len(), self.demands.len());
        if ns == 0 || nd == 0 {
            return Err(Error::Transport("empty marginals".into()));
        }
        if self.cost.dim() != (ns, nd) {
            return Err(Error::Transport(format!(
                "cost is {:?}, marginals are {ns} x {nd}",
                self.cost.dim()
            )));
        }
        if let Some(c) = self.cost.iter().find(|c| !c.is_finite()) {
            return Err(Error::Transport(format!("non-finite cost {c}")));
        }
        for (name, xs) in [("supply", &self.supplies), ("demand", &self.demands)] {
            if let Some(x) = xs.iter().find(|x| !x.is_finite() || **x < 0.0) {
                return Err(Error::Transport(format!("invalid {name} {x}")));
            }
        }
        let (s, d) = (self.total_supply(), self.demands.iter().sum::<f64>());
        if (s - d).abs() > BALANCE_TOL * s.max(d).max(1.0) {
            return Err(Error::Unbalanced {
                supply: s,
                demand: d,
            });
        }
        Ok(())
    }
}

/// Objective of an arbitrary flow under the problem's cost.
pub fn plan_cost(cost: &Array2<f64>, flow: &Array2<f64>) -> f64 {
    cost.iter().zip(flow.iter()).map(|(c, f)| c * f).sum()
}

/// Exact optimal vertex of the transportation polytope with its duals.
pub fn solve_transport(problem: &TransportProblem) -> Result<TransportPlan> {
    problem.validate()?;
    let (ns, nd) = (problem.num_sources(), problem.num_destinations());
    let total_s = problem.total_supply();
    let total_d: f64 = problem.demands.iter().sum();

    // Zero rows and columns carry no flow; solve on the positive core.
    let rows: Vec<usize> = (0..ns).filter(|&i| problem.supplies[i] > 0.0).collect();
    let cols: Vec<usize> = (0..nd).filter(|&j| problem.demands[j] > 0.0).collect();

    let mut flow = Array2::zeros((ns, nd));
    let mut u = vec![0.0; ns];
    let mut v = vec![0.0; nd];

    if !rows.is_empty() && !cols.is_empty() {
        let supplies: Vec<f64> = rows.iter().map(|&i| problem.supplies[i]).collect();
        // Rescale demands so the core is exactly balanced.
        let ratio = total_s / total_d;
        let demands: Vec<f64> = cols.iter().map(|&j| problem.demands[j] * ratio).collect();
        let cost = Array2::from_shape_fn((rows.len(), cols.len()), |(a, b)| {
            problem.cost[[rows[a], cols[b]]]
        });
        let core = simplex(&cost, &supplies, &demands)?;
        for (a, &i) in rows.iter().enumerate() {
            u[i] = core.u[a];
            for (b, &j) in cols.iter().enumerate() {
                flow[[i, j]] = core.flow[[a, b]];
            }
        }
        for (b, &j) in cols.iter().enumerate() {
            v[j] = core.v[b];
        }
    }

    // Dual-feasible potentials for the dropped rows and columns.
    let kept_row = |i: usize| problem.supplies[i] > 0.0;
    let kept_col = |j: usize| problem.demands[j] > 0.0;
    for i in (0..ns).filter(|&i| !kept_row(i)) {
        u[i] = (0..nd)
            .filter(|&j| kept_col(j))
            .map(|j| problem.cost[[i, j]] - v[j])
            .fold(f64::INFINITY, f64::min);
        if !u[i].is_finite() {
            u[i] = 0.0;
        }
    }
    for j in (0..nd).filter(|&j| !kept_col(j)) {
        v[j] = (0..ns)
            .map(|i| problem.cost[[i, j]] - u[i])
            .fold(f64::INFINITY, f64::min);
    }

    let objective = plan_cost(&problem.cost, &flow);
    Ok(TransportPlan {
        flow,
        objective,
        row_potentials: u,
        col_potentials: v,
    })
}

struct Core {
    flow: Array2<f64>,
    u: Vec<f64>,
    v: Vec<f64>,
}

fn north_west_corner(supplies: &[f64], demands: &[f64]) -> (Array2<f64>, Vec<(usize, usize)>) {
    let (m, n) = (supplies.len(), demands.len());
    let mut flow = Array2::zeros((m, n));
    let mut basis = Vec::with_capacity(m + n - 1);
    let mut rs = supplies.to_vec();
    let mut rd = demands.to_vec();
    let (mut i, mut j) = (0, 0);
    loop {
        let q = rs[i].min(rd[j]);
        flow[[i, j]] = q;
        basis.push((i, j));
        rs[i] -= q;
        rd[j] -= q;
        if i == m - 1 && j == n - 1 {
            break;
        }
        if i == m - 1 {
            j += 1;
        } else if j == n - 1 || rs[i] <= rd[j] {
            i += 1;
        } else {
            j += 1;
        }
    }
    debug_assert_eq!(basis.len(), m + n - 1);
    (flow, basis)
}

/// Potentials with `u[0] = 0` and `u_i + v_j = c_ij` on every basic cell.
fn potentials(cost: &Array2<f64>, basis: &[(usize, usize)]) -> (Vec<f64>, Vec<f64>) {
    let (m, n) = cost.dim();
    let mut row_adj = vec![Vec::new(); m];
    let mut col_adj = vec![Vec::new(); n];
    for &(i, j) in basis {
        row_adj[i].push(j);
        col_adj[j].push(i);
    }
    let mut u = vec![f64::NAN; m];
    let mut v = vec![f64::NAN; n];
    u[0] = 0.0;
    // Stack of (is_row, index).
    let mut stack = vec![(true, 0usize)];
    while let Some((is_row, k)) = stack.pop() {
        if is_row {
            for &j in &row_adj[k] {
                if v[j].is_nan() {
                    v[j] = cost[[k, j]] - u[k];
                    stack.push((false, j));
                }
            }
        } else {
            for &i in &col_adj[k] {
                if u[i].is_nan() {
                    u[i] = cost[[i, k]] - v[k];
                    stack.push((true, i));
                }
            }
        }
    }
    (u, v)
}

/// Basic cells on the tree path from row `start` to column `goal`, in order
/// from the column end back to the row end.
fn tree_path(
    m: usize,
    n: usize,
    basis: &[(usize, usize)],
    start: usize,
    goal: usize,
) -> Vec<usize> {
    // Nodes: rows 0..m, columns m..m+n. Edge k joins basis[k].
    let mut adj = vec![Vec::new(); m + n];
    for (k, &(i, j)) in basis.iter().enumerate() {
        adj[i].push((m + j, k));
        adj[m + j].push((i, k));
    }
    let mut parent: Vec<Option<(usize, usize)>> = vec![None; m + n];
    let mut seen = vec![false; m + n];
    let mut queue = std::collections::VecDeque::new();
    seen[start] = true;
    queue.push_back(start);
    while let Some(node) = queue.pop_front() {
        if node == m + goal {
            break;
        }
        for &(next, edge) in &adj[node] {
            if !seen[next] {
                seen[next] = true;
                parent[next] = Some((node, edge));
                queue.push_back(next);
            }
        }
    }
    let mut path = Vec::new();
    let mut node = m + goal;
    while node != start {
        let (prev, edge) = parent[node].expect("basis is a spanning tree");
        path.push(edge);
        node = prev;
    }
    path
}

fn simplex(cost: &Array2<f64>, supplies: &[f64], demands: &[f64]) -> Result<Core> {
    let (m, n) = cost.dim();
    let (mut flow, mut basis) = north_west_corner(supplies, demands);
    let scale = cost.iter().fold(0.0f64, |a, c| a.max(c.abs()));
    let tol = 1e-12 * (1.0 + scale);
    let max_pivots = 50 * (m + n) * (m + n) + 1000;

    let mut in_basis = Array2::from_elem((m, n), false);
    for &(i, j) in &basis {
        in_basis[[i, j]] = true;
    }

    for _ in 0..max_pivots {
        let (u, v) = potentials(cost, &basis);

        // Bland: first improving cell in row-major order.
        let entering = (0..m)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .find(|&(i, j)| !in_basis[[i, j]] && cost[[i, j]] - u[i] - v[j] < -tol);
        let Some((ei, ej)) = entering else {
            return Ok(Core { flow, u, v });
        };

        let path = tree_path(m, n, &basis, ei, ej);
        // path[0] shares column ej with the entering cell and loses flow;
        // signs alternate from there.
        let mut theta = f64::INFINITY;
        let mut leaving: Option<usize> = None;
        for (step, &k) in path.iter().enumerate() {
            if step % 2 == 0 {
                let (i, j) = basis[k];
                let f = flow[[i, j]];
                let better = match leaving {
                    None => true,
                    Some(l) => {
                        let (li, lj) = basis[l];
                        f < theta || (f == theta && i * n + j < li * n + lj)
                    }
                };
                if better {
                    theta = f;
                    leaving = Some(k);
                }
            }
        }
        let leaving = leaving.expect("cycle has a donor cell");

        for (step, &k) in path.iter().enumerate() {
            let (i, j) = basis[k];
            if step % 2 == 0 {
                flow[[i, j]] -= theta;
            } else {
                flow[[i, j]] += theta;
            }
        }
        flow[[ei, ej]] = theta;
        let (li, lj) = basis[leaving];
        flow[[li, lj]] = 0.0;
        in_basis[[li, lj]] = false;
        in_basis[[ei, ej]] = true;
        basis[leaving] = (ei, ej);
    }
    Err(Error::Transport(format!(
        "simplex did not converge within {max_pivots} pivots"
    )))
}
