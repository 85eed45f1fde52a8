//! Entropic approximation, log-domain Sinkhorn iterations.

use ndarray::Array2;

use super::transport::{plan_cost, TransportPlan, TransportProblem};
use crate::error::Result;
use crate::nn::log_sum_exp;

pub fn solve_sinkhorn(
    problem: &TransportProblem,
    epsilon: f64,
    iterations: usize,
) -> Result<TransportPlan> {
    problem.validate()?;
    let (ns, nd) = (problem.num_sources(), problem.num_destinations());
    let total = problem.total_supply();
    let mut flow = Array2::zeros((ns, nd));
    let mut f = vec![0.0; ns];
    let mut g = vec![0.0; nd];
    if total <= 0.0 {
        return Ok(TransportPlan {
            flow,
            objective: 0.0,
            row_potentials: f,
            col_potentials: g,
        });
    }
    let total_d: f64 = problem.demands.iter().sum();
    let log_a: Vec<f64> = problem.supplies.iter().map(|s| (s / total).ln()).collect();
    let log_b: Vec<f64> = problem.demands.iter().map(|d| (d / total_d).ln()).collect();
    let c = &problem.cost;

    let mut buf_row = vec![0.0; nd];
    let mut buf_col = vec![0.0; ns];
    for _ in 0..iterations {
        for i in 0..ns {
            if log_a[i] == f64::NEG_INFINITY {
                f[i] = f64::NEG_INFINITY;
                continue;
            }
            for j in 0..nd {
                buf_row[j] = (g[j] - c[[i, j]]) / epsilon;
            }
            f[i] = epsilon * (log_a[i] - log_sum_exp(&buf_row));
        }
        for j in 0..nd {
            if log_b[j] == f64::NEG_INFINITY {
                g[j] = f64::NEG_INFINITY;
                continue;
            }
            for i in 0..ns {
                buf_col[i] = (f[i] - c[[i, j]]) / epsilon;
            }
            g[j] = epsilon * (log_b[j] - log_sum_exp(&buf_col));
        }
    }
    for i in 0..ns {
        for j in 0..nd {
            let e = (f[i] + g[j] - c[[i, j]]) / epsilon;
            flow[[i, j]] = if e.is_finite() { total * e.exp() } else { 0.0 };
        }
    }
    let clean = |x: f64| if x.is_finite() { x } else { 0.0 };
    Ok(TransportPlan {
        objective: plan_cost(c, &flow),
        flow,
        row_potentials: f.into_iter().map(clean).collect(),
        col_potentials: g.into_iter().map(clean).collect(),
    })
}
