mod common;

use std::collections::BTreeSet;

use ade::backbone::TokenStore;
use ade::data::{CandidateSet, Dataset, ImageRecord, Split, World};
use ade::embedding::Pair;
use ade::evaluation::evaluate;
use ade::inference::{
    argmax, read_score_dump, score_images, score_split, select_beta, write_score_dump,
    ComponentScores, ImageScores, ScoreTable, Scorer, BETA_GRID,
};
use ade::model::{Model, ModelConfig};
use ade::rng::keyed_rng;
use common::fixtures::{synth_with_tokens, tiny_synth, tokens_of};
use ndarray::Array1;
use rand::Rng;

struct Setup {
    _dir: tempfile::TempDir,
    dataset: Dataset,
    store: TokenStore,
    model: Model,
    config: ModelConfig,
}

fn setup() -> Setup {
    let dir = tempfile::tempdir().unwrap();
    let (dataset, store) = synth_with_tokens(&tiny_synth(), dir.path());
    let config = ModelConfig::default();
    let model = Model::init(&config, store.dim, &dataset.vocab).unwrap();
    Setup {
        _dir: dir,
        dataset,
        store,
        model,
        config,
    }
}

#[test]
fn beta_zero_is_composition_argmax() {
    let s = setup();
    for world in [World::Closed, World::Open] {
        let candidates = s
            .dataset
            .split
            .candidates(&s.dataset.vocab, world, Split::Test);
        let scorer = Scorer::new(&s.model, &s.config, &candidates).unwrap();
        for (_, r) in s.dataset.split_records(Split::Test) {
            let tokens = tokens_of(&s.store, &r.id);
            let p = scorer.predict(tokens.view(), 0.0).unwrap();
            assert_eq!(p.prediction, argmax(p.components.comp.view()));
            assert_eq!(p.prediction, argmax(p.components.comp_logits.view()));
        }
    }
}

#[test]
fn blend_matches_hand_computation() {
    let c = ComponentScores {
        comp_logits: Array1::zeros(3),
        comp: ndarray::array![0.5, 0.3, 0.2],
        attr: ndarray::array![0.7, 0.3],
        obj: ndarray::array![0.4, 0.6],
    };
    let pairs = [Pair::new(0, 1), Pair::new(1, 0), Pair::new(1, 1)];
    let b = c.blend(&pairs, 0.5);
    let want = [0.5 + 0.5 * 0.42, 0.3 + 0.5 * 0.12, 0.2 + 0.5 * 0.18];
    for (x, y) in b.iter().zip(want) {
        assert!((x - y).abs() < 1e-15);
    }
}

fn random_table(seed: u64, uniform: bool) -> ScoreTable {
    let mut rng = keyed_rng(seed, "blend-table", &[]);
    let (na, no) = (3, 3);
    let pairs: Vec<Pair> = (0..na)
        .flat_map(|a| (0..no).map(move |o| Pair::new(a, o)))
        .collect();
    let seen: BTreeSet<Pair> = pairs.iter().copied().filter(|p| p.attr != p.obj).collect();
    let candidates = CandidateSet::new(pairs.clone(), &seen);
    let simplex = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| {
        let v: Array1<f64> = (0..n).map(|_| rng.gen::<f64>() + 1e-3).collect();
        let s = v.sum();
        v / s
    };
    let images = (0..24)
        .map(|i| {
            let truth = i % pairs.len();
            let (attr, obj) = if uniform {
                (
                    Array1::from_elem(na, 1.0 / na as f64),
                    Array1::from_elem(no, 1.0 / no as f64),
                )
            } else {
                (simplex(&mut rng, na), simplex(&mut rng, no))
            };
            ImageScores {
                id: format!("img{i:02}"),
                truth,
                attr: pairs[truth].attr,
                obj: pairs[truth].obj,
                components: ComponentScores {
                    comp_logits: Array1::zeros(pairs.len()),
                    comp: simplex(&mut rng, pairs.len()),
                    attr,
                    obj,
                },
            }
        })
        .collect();
    ScoreTable { candidates, images }
}

#[test]
fn ranking_is_the_blend_shifted_per_image() {
    let c = ComponentScores {
        comp_logits: Array1::zeros(3),
        comp: ndarray::array![0.5, 0.3, 0.2],
        attr: ndarray::array![0.7, 0.3],
        obj: ndarray::array![0.4, 0.6],
    };
    let pairs = [Pair::new(0, 1), Pair::new(1, 0), Pair::new(1, 1)];
    let (b, r) = (c.blend(&pairs, 0.5), c.ranking(&pairs, 0.5));
    let shift = b[0] - r[0];
    assert!((shift - 0.5 * 0.12).abs() < 1e-15);
    for (x, y) in b.iter().zip(&r) {
        assert!((x - y - shift).abs() < 1e-15);
    }
}

#[test]
fn uniform_concepts_keep_tiny_probabilities_apart() {
    // Low-temperature softmax tails sit far below any concept product.
    let c = ComponentScores {
        comp_logits: Array1::zeros(3),
        comp: ndarray::array![1.0 - 3e-18, 1e-18, 2e-18],
        attr: Array1::from_elem(2, 0.5),
        obj: Array1::from_elem(2, 0.5),
    };
    let pairs = [Pair::new(0, 0), Pair::new(0, 1), Pair::new(1, 0)];
    for &beta in &BETA_GRID {
        assert_eq!(c.ranking(&pairs, beta), c.comp);
    }
    // The literal sum cannot tell the two tails apart.
    let b = c.blend(&pairs, 1.0);
    assert_eq!(b[1], b[2]);
}

#[test]
fn uniform_concepts_make_beta_irrelevant() {
    for seed in 0..10 {
        let table = random_table(seed, true);
        let base = evaluate(&table, 0.0).unwrap();
        for &beta in &BETA_GRID {
            let e = evaluate(&table, beta).unwrap();
            assert_eq!(e.curve.points.len(), base.curve.points.len());
            for (p, q) in e.curve.points.iter().zip(&base.curve.points) {
                assert_eq!(
                    (p.seen, p.unseen),
                    (q.seen, q.unseen),
                    "seed {seed} beta {beta}"
                );
                assert!((p.gamma - q.gamma).abs() < 1e-12);
            }
            assert_eq!(e.report.auc, base.report.auc);
        }
        let sel = select_beta(&table).unwrap();
        assert_eq!(sel.grid.len(), 11);
        assert_eq!(sel.beta, 0.0);
        let betas: Vec<f64> = sel.grid.iter().map(|p| p.beta).collect();
        assert_eq!(betas, BETA_GRID);
    }
}

#[test]
fn selected_beta_has_the_best_grid_auc() {
    for seed in 0..10 {
        let sel = select_beta(&random_table(seed, false)).unwrap();
        let best = sel.grid.iter().map(|p| p.auc).fold(f64::MIN, f64::max);
        let first = sel.grid.iter().find(|p| p.auc == best).unwrap();
        assert_eq!(sel.beta, first.beta);
    }
}

#[test]
fn prediction_is_piecewise_constant_in_beta() {
    // Each candidate's blended score is linear in beta, so the argmax walks
    // the upper envelope: at most C - 1 changes and never back.
    for seed in 0..20 {
        let table = random_table(seed, false);
        let c = table.candidates.len();
        for img in &table.images {
            let mut seen_preds = vec![argmax(
                img.components.blend(&table.candidates.pairs, 0.0).view(),
            )];
            for k in 1..=2000 {
                let beta = k as f64 / 200.0;
                let p = argmax(img.components.blend(&table.candidates.pairs, beta).view());
                if p != *seen_preds.last().unwrap() {
                    assert!(!seen_preds.contains(&p), "prediction returned to {p}");
                    seen_preds.push(p);
                }
            }
            assert!(seen_preds.len() <= c);
        }
    }
}

#[test]
fn closed_and_open_logits_agree_on_shared_candidates() {
    let s = setup();
    let closed = s
        .dataset
        .split
        .candidates(&s.dataset.vocab, World::Closed, Split::Test);
    let open = s
        .dataset
        .split
        .candidates(&s.dataset.vocab, World::Open, Split::Test);
    assert_eq!(open.len(), 9);
    assert!(closed.len() < open.len());
    let sc = Scorer::new(&s.model, &s.config, &closed).unwrap();
    let so = Scorer::new(&s.model, &s.config, &open).unwrap();
    for (_, r) in s.dataset.split_records(Split::Test).take(6) {
        let t = tokens_of(&s.store, &r.id);
        let (a, b) = (
            sc.components(t.view()).unwrap(),
            so.components(t.view()).unwrap(),
        );
        for (i, p) in closed.pairs.iter().enumerate() {
            let j = open.index_of(*p).unwrap();
            assert!((a.comp_logits[i] - b.comp_logits[j]).abs() < 1e-12);
        }
        assert_eq!(a.attr, b.attr);
        assert_eq!(a.obj, b.obj);
    }
}

#[test]
fn score_split_rows_match_single_predictions() {
    let s = setup();
    let table = score_split(
        &s.model,
        &s.config,
        &s.dataset,
        &s.store,
        Split::Val,
        World::Closed,
    )
    .unwrap();
    let n = s.dataset.split_records(Split::Val).count();
    assert_eq!(table.images.len(), n);
    let scorer = Scorer::new(&s.model, &s.config, &table.candidates).unwrap();
    for img in &table.images {
        let t = tokens_of(&s.store, &img.id);
        assert_eq!(scorer.components(t.view()).unwrap(), img.components);
    }
}

#[test]
fn unknown_composition_is_rejected() {
    let s = setup();
    let seen_only = CandidateSet::new(
        s.dataset.split.seen.iter().copied().collect(),
        &s.dataset.split.seen,
    );
    let records: Vec<&ImageRecord> = s
        .dataset
        .split_records(Split::Test)
        .map(|(_, r)| r)
        .collect();
    let unseen_rec: Vec<&ImageRecord> = records
        .into_iter()
        .filter(|r| !s.dataset.split.seen.contains(&r.pair()))
        .take(1)
        .collect();
    let tokens = s
        .store
        .gather(unseen_rec.iter().map(|r| r.id.as_str()))
        .unwrap();
    assert!(score_images(&s.model, &s.config, &seen_only, &unseen_rec, &tokens).is_err());
    let empty = CandidateSet::new(vec![], &BTreeSet::new());
    assert!(Scorer::new(&s.model, &s.config, &empty).is_err());
}

#[test]
fn score_dump_round_trips_through_evaluation() {
    let s = setup();
    let table = score_split(
        &s.model,
        &s.config,
        &s.dataset,
        &s.store,
        Split::Test,
        World::Closed,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scores.jsonl");
    write_score_dump(
        &table,
        &s.dataset.vocab.attributes,
        &s.dataset.vocab.objects,
        0.3,
        &path,
    )
    .unwrap();
    let (back, beta) = read_score_dump(&path).unwrap();
    assert_eq!(beta, 0.3);
    let (a, b) = (
        evaluate(&table, 0.3).unwrap(),
        evaluate(&back, 0.3).unwrap(),
    );
    assert_eq!(a.report, b.report);
}
