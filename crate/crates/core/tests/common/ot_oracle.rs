//! Brute-force optimum of a balanced transportation problem.
//!
//! Every vertex of the transportation polytope is the basic solution of a
//! spanning tree of the complete bipartite source/destination graph. We
//! enumerate all spanning trees, peel each one from its leaves to get the
//! unique flow it supports, keep the feasible ones and take the cheapest.

pub fn brute_force_objective(cost: &[Vec<f64>], supplies: &[f64], demands: &[f64]) -> f64 {
    let m = supplies.len();
    let n = demands.len();
    let edges: Vec<(usize, usize)> = (0..m).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
    let mut best = f64::INFINITY;
    let mut chosen = Vec::with_capacity(m + n - 1);
    let parent: Vec<usize> = (0..m + n).collect();
    enumerate(&edges, 0, m, &mut chosen, parent, &mut |tree| {
        if let Some(obj) = tree_objective(tree, cost, supplies, demands) {
            best = best.min(obj);
        }
    });
    best
}

fn find(parent: &[usize], mut x: usize) -> usize {
    while parent[x] != x {
        x = parent[x];
    }
    x
}

fn enumerate(
    edges: &[(usize, usize)],
    at: usize,
    m: usize,
    chosen: &mut Vec<(usize, usize)>,
    parent: Vec<usize>,
    visit: &mut dyn FnMut(&[(usize, usize)]),
) {
    let need = parent.len() - 1;
    if chosen.len() == need {
        visit(chosen);
        return;
    }
    if edges.len() - at < need - chosen.len() {
        return;
    }
    let (i, j) = edges[at];
    let (ri, rj) = (find(&parent, i), find(&parent, m + j));
    if ri != rj {
        let mut merged = parent.clone();
        merged[ri] = rj;
        chosen.push((i, j));
        enumerate(edges, at + 1, m, chosen, merged, visit);
        chosen.pop();
    }
    enumerate(edges, at + 1, m, chosen, parent, visit);
}

fn tree_objective(
    tree: &[(usize, usize)],
    cost: &[Vec<f64>],
    supplies: &[f64],
    demands: &[f64],
) -> Option<f64> {
    let m = supplies.len();
    let nodes = m + demands.len();
    let mut remaining: Vec<f64> = supplies.iter().chain(demands.iter()).cloned().collect();
    let mut degree = vec![0usize; nodes];
    for &(i, j) in tree {
        degree[i] += 1;
        degree[m + j] += 1;
    }
    let mut used = vec![false; tree.len()];
    let mut objective = 0.0;
    for _ in 0..tree.len() {
        // A leaf fixes the flow on its only remaining edge.
        let (k, leaf) = tree
            .iter()
            .enumerate()
            .filter(|(k, _)| !used[*k])
            .find_map(|(k, &(i, j))| {
                if degree[i] == 1 {
                    Some((k, i))
                } else if degree[m + j] == 1 {
                    Some((k, m + j))
                } else {
                    None
                }
            })?;
        let (i, j) = tree[k];
        let other = if leaf == i { m + j } else { i };
        let flow = remaining[leaf];
        if flow < -1e-12 {
            return None;
        }
        remaining[leaf] = 0.0;
        remaining[other] -= flow;
        degree[i] -= 1;
        degree[m + j] -= 1;
        used[k] = true;
        objective += cost[i][j] * flow;
    }
    Some(objective)
}
