//! Earth mover's distance between the two branches of a query-key swapped
//! cross-attention, and the disentangling regularizer built from it.
//!
//! The similarity of a transport problem is `sum_ij (1 - c_ij) f_ij` for the
//! optimal flow `f`. Because total flow equals total supply this is
//! `sum(s) - objective`. Its gradient with respect to the cost is `-f` at a
//! non-degenerate optimum; the plan is treated as a constant when
//! backpropagating and supplies/demands receive no gradient.

pub mod sinkhorn;
pub mod transport;

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::attention::AttentionResult;
use crate::error::{Error, Result};
pub use transport::{plan_cost, solve_transport, TransportPlan, TransportProblem};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Solver {
    Exact,
    Sinkhorn { epsilon: f64, iterations: usize },
}

impl Default for Solver {
    fn default() -> Self {
        Solver::Exact
    }
}

impl Solver {
    pub fn sinkhorn_default() -> Self {
        Solver::Sinkhorn {
            epsilon: 0.05,
            iterations: 200,
        }
    }

    pub fn solve(&self, problem: &TransportProblem) -> Result<TransportPlan> {
        match *self {
            Solver::Exact => solve_transport(problem),
            Solver::Sinkhorn {
                epsilon,
                iterations,
            } => sinkhorn::solve_sinkhorn(problem, epsilon, iterations),
        }
    }
}

/// Which attention quantity feeds the transport problem.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmdInput {
    /// Post-softmax weights, head-averaged.
    #[default]
    Weights,
    /// Pre-softmax logits, head-averaged; supplies are re-softmaxed over the
    /// patch columns and the cost is min-max rescaled into [0, 1].
    Logits,
}

/// `sum_ij (1 - c_ij) f_ij` for a given flow.
pub fn similarity_with_plan(problem: &TransportProblem, flow: &Array2<f64>) -> f64 {
    problem
        .cost
        .iter()
        .zip(flow.iter())
        .map(|(c, f)| (1.0 - c) * f)
        .sum()
}

pub fn emd_similarity(problem: &TransportProblem) -> Result<f64> {
    emd_similarity_with(problem, &Solver::Exact)
}

pub fn emd_similarity_with(problem: &TransportProblem, solver: &Solver) -> Result<f64> {
    let plan = solver.solve(problem)?;
    Ok(similarity_with_plan(problem, &plan.flow))
}

/// The transport instance derived from a swapped pair of attention results,
/// plus what backward needs.
#[derive(Clone, Debug)]
pub struct AttentionTransport {
    pub problem: TransportProblem,
    pub plan: TransportPlan,
    pub similarity: f64,
    input: EmdInput,
    heads: usize,
    tokens: usize,
    /// d(1 - c_ij) / d(mean patch map entry).
    cost_slope: f64,
}

fn patch_count(r: &AttentionResult) -> Result<usize> {
    let (_, tq, tk) = r.weights.dim();
    if tq != tk || tq < 2 {
        return Err(Error::Shape(format!(
            "attention EMD needs square maps with patches, got {tq} x {tk}"
        )));
    }
    Ok(tq - 1)
}

fn normalize_or_uniform(xs: Vec<f64>) -> Vec<f64> {
    let sum: f64 = xs.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        xs.into_iter().map(|x| x / sum).collect()
    } else {
        vec![1.0 / xs.len() as f64; xs.len()]
    }
}

fn softmax_vec(mut xs: Vec<f64>) -> Vec<f64> {
    crate::nn::softmax_in_place(&mut xs);
    xs
}

/// Builds the transport problem of the attention-level EMD.
///
/// Supplies are branch 1's class-token row over patch columns, demands the
/// same row of branch 2, both head-averaged and normalized to sum 1. The
/// cost is one minus the mean of branch 1's patch-to-patch map and the
/// transpose of branch 2's.
pub fn attention_problem(
    first: &AttentionResult,
    second: &AttentionResult,
    input: EmdInput,
) -> Result<(TransportProblem, f64)> {
    let p = patch_count(first)?;
    let p2 = patch_count(second)?;
    if p != p2 {
        return Err(Error::Shape(format!("patch counts differ: {p} vs {p2}")));
    }
    let (m1, m2) = match input {
        EmdInput::Weights => (first.head_mean_weights(), second.head_mean_weights()),
        EmdInput::Logits => (
            first.logits.mean_axis(Axis(0)).expect("heads"),
            second.logits.mean_axis(Axis(0)).expect("heads"),
        ),
    };
    let row1: Vec<f64> = (1..=p).map(|j| m1[[0, j]]).collect();
    let row2: Vec<f64> = (1..=p).map(|j| m2[[0, j]]).collect();
    let mean = Array2::from_shape_fn((p, p), |(i, j)| {
        0.5 * (m1[[1 + i, 1 + j]] + m2[[1 + j, 1 + i]])
    });

    let (supplies, demands, cost, slope) = match input {
        EmdInput::Weights => (
            normalize_or_uniform(row1),
            normalize_or_uniform(row2),
            mean.mapv(|x| 1.0 - x),
            1.0,
        ),
        EmdInput::Logits => {
            let lo = mean.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = mean.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let range = hi - lo;
            let (cost, slope) = if range > 1e-12 {
                (mean.mapv(|x| 1.0 - (x - lo) / range), 1.0 / range)
            } else {
                (Array2::from_elem((p, p), 0.5), 0.0)
            };
            (softmax_vec(row1), softmax_vec(row2), cost, slope)
        }
    };
    Ok((TransportProblem::new(cost, supplies, demands)?, slope))
}

/// Adapted EMD of a query-key swapped attention pair.
pub fn attention_emd(first: &AttentionResult, second: &AttentionResult) -> Result<f64> {
    attention_emd_with(first, second, EmdInput::Weights, &Solver::Exact).map(|t| t.similarity)
}

pub fn attention_emd_with(
    first: &AttentionResult,
    second: &AttentionResult,
    input: EmdInput,
    solver: &Solver,
) -> Result<AttentionTransport> {
    let (problem, cost_slope) = attention_problem(first, second, input)?;
    let plan = solver.solve(&problem)?;
    let similarity = similarity_with_plan(&problem, &plan.flow);
    Ok(AttentionTransport {
        problem,
        plan,
        similarity,
        input,
        heads: first.weights.dim().0,
        tokens: first.weights.dim().1,
        cost_slope,
    })
}

impl AttentionTransport {
    /// The similarity of a swapped pair under a given flow instead of the
    /// optimal one.
    pub fn with_flow(
        first: &AttentionResult,
        second: &AttentionResult,
        input: EmdInput,
        flow: &Array2<f64>,
    ) -> Result<Self> {
        let (problem, cost_slope) = attention_problem(first, second, input)?;
        if flow.dim() != problem.cost.dim() {
            return Err(Error::Shape(format!(
                "flow {:?} does not match cost {:?}",
                flow.dim(),
                problem.cost.dim()
            )));
        }
        let similarity = similarity_with_plan(&problem, flow);
        let plan = TransportPlan {
            objective: transport::plan_cost(&problem.cost, flow),
            flow: flow.clone(),
            row_potentials: Vec::new(),
            col_potentials: Vec::new(),
        };
        Ok(AttentionTransport {
            problem,
            plan,
            similarity,
            input,
            heads: first.weights.dim().0,
            tokens: first.weights.dim().1,
            cost_slope,
        })
    }

    pub fn input(&self) -> EmdInput {
        self.input
    }

    /// Gradients of `upstream * similarity` with respect to the two
    /// branches' weight (or logit) maps, holding the plan fixed.
    pub fn backward(&self, upstream: f64) -> (Array3<f64>, Array3<f64>) {
        self.backward_with_flow(&self.plan.flow, upstream)
    }

    pub fn backward_with_flow(
        &self,
        flow: &Array2<f64>,
        upstream: f64,
    ) -> (Array3<f64>, Array3<f64>) {
        let t = self.tokens;
        let p = t - 1;
        let mut d1 = Array3::zeros((self.heads, t, t));
        let mut d2 = Array3::zeros((self.heads, t, t));
        let k = upstream * 0.5 * self.cost_slope / self.heads as f64;
        if k == 0.0 {
            return (d1, d2);
        }
        for h in 0..self.heads {
            for i in 0..p {
                for j in 0..p {
                    let g = k * flow[[i, j]];
                    d1[[h, 1 + i, 1 + j]] = g;
                    d2[[h, 1 + j, 1 + i]] = g;
                }
            }
        }
        (d1, d2)
    }
}

/// The four adapted EMDs of one training triple. `attr_on_obj` is the
/// attribute disentangler applied to the object-sharing pair, and so on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegTerms {
    pub attr_on_attr: f64,
    pub attr_on_obj: f64,
    pub obj_on_attr: f64,
    pub obj_on_obj: f64,
}

/// Wrong-concept similarities minus right-concept similarities.
pub fn regularization_loss(terms: &RegTerms) -> f64 {
    terms.attr_on_obj + terms.obj_on_attr - terms.attr_on_attr - terms.obj_on_obj
}

/// Mean of the per-pair regularizer over a batch.
pub fn batch_regularization_loss(terms: &[RegTerms]) -> f64 {
    if terms.is_empty() {
        return 0.0;
    }
    terms.iter().map(regularization_loss).sum::<f64>() / terms.len() as f64
}
