//! Central-difference gradient checks shared by the gradient and acceptance
//! suites.

use ade::embedding::{ConceptVocabulary, Pair};
use ade::emd::{emd_similarity, solve_transport, TransportPlan, TransportProblem};
use ade::model::{AttentionMode, Model, ModelConfig, ObjectiveOptions, Triple, TriplePlans};
use ade::nn::Params;
use ade::rng::keyed_rng;
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-3;

pub fn gaussian(seed: u64, tag: &str, shape: (usize, usize)) -> Array2<f64> {
    let mut rng = keyed_rng(seed, tag, &[]);
    Array2::from_shape_fn(shape, |_| StandardNormal.sample(&mut rng))
}

/// Relative error of `analytic` against central differences of `f` around
/// `params`, one entry per named tensor.
pub fn group_errors<P: Params + Clone>(
    params: &P,
    analytic: &P,
    f: impl Fn(&P) -> f64,
) -> Vec<(String, f64)> {
    let base = params.to_flat();
    let grad = analytic.to_flat();
    let mut probe = params.clone();
    let mut out = Vec::new();
    for (name, shape, offset) in params.layout() {
        let n: usize = shape.iter().product();
        let mut num = 0.0;
        let mut den_a = 0.0;
        let mut den_f = 0.0;
        for i in offset..offset + n {
            let mut x = base.clone();
            x[i] = base[i] + STEP;
            probe.set_flat(&x);
            let up = f(&probe);
            x[i] = base[i] - STEP;
            probe.set_flat(&x);
            let down = f(&probe);
            let fd = (up - down) / (2.0 * STEP);
            num += (fd - grad[i]).powi(2);
            den_a += grad[i].powi(2);
            den_f += fd.powi(2);
        }
        // Key biases have an exactly zero gradient; the floor keeps their
        // finite-difference noise from reading as a relative error.
        let scale = den_a.sqrt().max(den_f.sqrt()).max(1e-6);
        out.push((name, num.sqrt() / scale));
    }
    out
}

pub fn worst(errors: &[(String, f64)]) -> (String, f64) {
    errors
        .iter()
        .cloned()
        .fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a })
}

pub struct Toy {
    pub model: Model,
    pub config: ModelConfig,
    pub candidates: Vec<Pair>,
    pub tokens: Vec<Array2<f64>>,
}

/// P=4 patches, D=16, 2 heads, 2x2 vocabulary.
pub fn toy(mode: AttentionMode) -> Toy {
    let vocab = ConceptVocabulary::new(
        vec!["red".into(), "blue".into()],
        vec!["bus".into(), "wall".into()],
    )
    .unwrap();
    let config = ModelConfig {
        heads: 2,
        word_dim: 8,
        attention: mode,
        seed: 11,
        ..ModelConfig::default()
    };
    let model = Model::init(&config, 16, &vocab).unwrap();
    let tokens = (0..5).map(|i| gaussian(i, "toy-tokens", (5, 16))).collect();
    Toy {
        model,
        config,
        candidates: vocab.open_world_pairs(),
        tokens,
    }
}

impl Toy {
    pub fn batch(&self) -> Vec<Triple<'_>> {
        let t = &self.tokens;
        vec![
            Triple {
                target: t[0].view(),
                attr_partner: t[1].view(),
                obj_partner: t[2].view(),
                attr: 0,
                obj: 0,
                comp: 0,
            },
            Triple {
                target: t[3].view(),
                attr_partner: t[4].view(),
                obj_partner: t[0].view(),
                attr: 1,
                obj: 0,
                comp: 2,
            },
        ]
    }
}

/// Per-tensor errors of the whole objective's gradient, transport plans
/// held at their solved values.
pub fn full_graph_errors(mode: AttentionMode, reg_weight: f64) -> Vec<(String, f64)> {
    let toy = toy(mode);
    let batch = toy.batch();
    let opts = ObjectiveOptions {
        reg_weight,
        fixed_plans: None,
        compute_grad: true,
    };
    let out = toy
        .model
        .objective(&toy.config, &batch, &toy.candidates, &opts)
        .unwrap();
    let plans: Option<Vec<TriplePlans>> = out.plans.iter().cloned().collect();
    let fixed = plans.as_deref();
    let loss = |m: &Model| {
        let o = ObjectiveOptions {
            reg_weight,
            fixed_plans: fixed,
            compute_grad: false,
        };
        m.objective(&toy.config, &batch, &toy.candidates, &o)
            .unwrap()
            .loss
            .total
    };
    assert!((loss(&toy.model) - out.loss.total).abs() < 1e-12);
    group_errors(&toy.model, out.grad.as_ref().unwrap(), loss)
}

/// Unique optimum: basis of full size with strictly positive flows and
/// strictly positive reduced costs off the basis.
pub fn non_degenerate(p: &TransportProblem, plan: &TransportPlan) -> bool {
    let (m, n) = p.cost.dim();
    let positive = plan.flow.iter().filter(|f| **f > 1e-9).count();
    if positive != m + n - 1 {
        return false;
    }
    (0..m).all(|i| {
        (0..n).all(|j| {
            plan.flow[[i, j]] > 1e-9
                || p.cost[[i, j]] - plan.row_potentials[i] - plan.col_potentials[j] > 1e-6
        })
    })
}

/// Relative error between central differences of the similarity in the
/// cost and the negated plan, on `count` non-degenerate instances.
pub fn similarity_cost_errors(count: usize) -> Vec<f64> {
    let mut errors = Vec::with_capacity(count);
    let mut seed = 0;
    while errors.len() < count {
        seed += 1;
        let mut rng = keyed_rng(seed, "emd-grad", &[]);
        let (m, n) = (rng.gen_range(2..=5), rng.gen_range(2..=5));
        let s: Vec<f64> = (0..m).map(|_| rng.gen_range(0.1..1.0)).collect();
        let d: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
        let (ts, td) = (s.iter().sum::<f64>(), d.iter().sum::<f64>());
        let s: Vec<f64> = s.iter().map(|x| x / ts).collect();
        let d: Vec<f64> = d.iter().map(|x| x / td).collect();
        let cost = Array2::from_shape_fn((m, n), |_| rng.gen::<f64>());
        let p = TransportProblem::new(cost.clone(), s.clone(), d.clone()).unwrap();
        let plan = solve_transport(&p).unwrap();
        if !non_degenerate(&p, &plan) {
            continue;
        }
        let h = 1e-7;
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..m {
            for j in 0..n {
                let at = |delta: f64| {
                    let mut c = cost.clone();
                    c[[i, j]] += delta;
                    emd_similarity(&TransportProblem::new(c, s.clone(), d.clone()).unwrap())
                        .unwrap()
                };
                let fd = (at(h) - at(-h)) / (2.0 * h);
                let analytic = -plan.flow[[i, j]];
                num += (fd - analytic).powi(2);
                den += analytic.powi(2);
            }
        }
        errors.push(num.sqrt() / den.sqrt());
    }
    errors
}
