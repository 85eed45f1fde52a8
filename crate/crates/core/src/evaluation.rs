//! Generalized zero-shot protocol: a calibration bias added to unseen
//! candidates traces a seen/unseen accuracy curve, summarized by its area,
//! the best harmonic mean and the extreme accuracies.

use std::fmt::Write as _;

use ndarray::{ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{argmax, ScoreTable};

/// Interior calibration values kept when the list is longer.
pub const CURVE_POINTS: usize = 100;
/// Offset of the two extreme calibration values past the observed range.
pub const GAMMA_MARGIN: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub gamma: f64,
    /// Fractions in [0, 1].
    pub seen: f64,
    pub unseen: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvaluationCurve {
    /// Ascending in `gamma`.
    pub points: Vec<CurvePoint>,
}

/// Curve summaries in percent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub best_hm: f64,
    pub best_seen: f64,
    pub best_unseen: f64,
    /// Top-1 accuracy of the independent attribute distribution.
    pub attr_acc: f64,
    pub obj_acc: f64,
    /// Attribute of the unbiased blended composition prediction.
    pub attr_acc_marginal: f64,
    pub obj_acc_marginal: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub beta: f64,
    pub curve: EvaluationCurve,
    pub report: MetricsReport,
}

fn check_shapes(scores: ArrayView2<f64>, truth: &[usize], unseen: &[bool]) -> Result<()> {
    if scores.nrows() != truth.len() || scores.ncols() != unseen.len() {
        return Err(Error::Shape(format!(
            "scores {:?} with {} labels and {} candidates",
            scores.dim(),
            truth.len(),
            unseen.len()
        )));
    }
    if let Some(t) = truth.iter().find(|&&t| t >= unseen.len()) {
        return Err(Error::Evaluation(format!("label {t} out of range")));
    }
    Ok(())
}

/// One value per unseen-composition image: the best seen score minus the
/// true composition's score. Sorted, with one value just below the smallest
/// and one just above the largest appended.
pub fn calibration_gammas(
    scores: ArrayView2<f64>,
    truth: &[usize],
    unseen: &[bool],
) -> Result<Vec<f64>> {
    check_shapes(scores, truth, unseen)?;
    if unseen.iter().all(|u| *u) {
        return Err(Error::Evaluation("no seen candidates".into()));
    }
    let mut gammas: Vec<f64> = truth
        .iter()
        .enumerate()
        .filter(|(_, &t)| unseen[t])
        .map(|(i, &t)| {
            let row = scores.row(i);
            let best_seen = row
                .iter()
                .zip(unseen)
                .filter(|(_, u)| !**u)
                .map(|(s, _)| *s)
                .fold(f64::NEG_INFINITY, f64::max);
            best_seen - row[t]
        })
        .collect();
    if gammas.is_empty() {
        return Err(Error::Evaluation("no unseen-composition images".into()));
    }
    gammas.sort_by(f64::total_cmp);
    let (lo, hi) = (gammas[0], gammas[gammas.len() - 1]);
    gammas.insert(0, lo - GAMMA_MARGIN);
    gammas.push(hi + GAMMA_MARGIN);
    Ok(gammas)
}

/// Argmax after adding `gamma` to every unseen candidate.
pub fn biased_argmax(scores: ArrayView1<f64>, gamma: f64, unseen: &[bool]) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, (&s, &u)) in scores.iter().zip(unseen).enumerate() {
        let v = if u { s + gamma } else { s };
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Keeps the two extremes and at most `CURVE_POINTS` interior values at
/// evenly spaced ranks, then adds zero.
fn curve_gammas(gammas: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = if gammas.len() > CURVE_POINTS + 2 {
        let interior = &gammas[1..gammas.len() - 1];
        let n = interior.len();
        let mut v = vec![gammas[0]];
        v.extend((0..CURVE_POINTS).map(|k| {
            let r = (k as f64 * (n - 1) as f64 / (CURVE_POINTS - 1) as f64).round() as usize;
            interior[r]
        }));
        v.push(gammas[gammas.len() - 1]);
        v
    } else {
        gammas.to_vec()
    };
    out.push(0.0);
    out.sort_by(f64::total_cmp);
    out.dedup();
    out
}

/// Seen-image and unseen-image accuracy at each calibration value (plus
/// zero), subsampled when the list is long.
pub fn build_curve(
    scores: ArrayView2<f64>,
    truth: &[usize],
    unseen: &[bool],
    gammas: &[f64],
) -> Result<EvaluationCurve> {
    check_shapes(scores, truth, unseen)?;
    let n_unseen = truth.iter().filter(|&&t| unseen[t]).count();
    let n_seen = truth.len() - n_unseen;
    if n_seen == 0 || n_unseen == 0 {
        return Err(Error::Evaluation(format!(
            "need both seen and unseen images, have {n_seen} and {n_unseen}"
        )));
    }
    let points = curve_gammas(gammas)
        .into_par_iter()
        .map(|gamma| {
            let (mut hit_s, mut hit_u) = (0usize, 0usize);
            for (i, &t) in truth.iter().enumerate() {
                if biased_argmax(scores.row(i), gamma, unseen) == t {
                    if unseen[t] {
                        hit_u += 1;
                    } else {
                        hit_s += 1;
                    }
                }
            }
            CurvePoint {
                gamma,
                seen: hit_s as f64 / n_seen as f64,
                unseen: hit_u as f64 / n_unseen as f64,
            }
        })
        .collect();
    Ok(EvaluationCurve { points })
}

/// Trapezoidal area under unseen-vs-seen accuracy, over points ordered by
/// seen accuracy, times 100.
pub fn auc(curve: &EvaluationCurve) -> f64 {
    let mut pts: Vec<(f64, f64)> = curve.points.iter().map(|p| (p.seen, p.unseen)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let area: f64 = pts
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum();
    area * 100.0
}

pub fn harmonic_mean(seen: f64, unseen: f64) -> f64 {
    if seen + unseen == 0.0 {
        0.0
    } else {
        2.0 * seen * unseen / (seen + unseen)
    }
}

/// Concept accuracies in percent, measured at zero calibration.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ConceptAccuracy {
    pub attr: f64,
    pub obj: f64,
    pub attr_marginal: f64,
    pub obj_marginal: f64,
}

pub fn summarize(curve: &EvaluationCurve, concepts: ConceptAccuracy) -> Result<MetricsReport> {
    if curve.points.is_empty() {
        return Err(Error::Evaluation("empty curve".into()));
    }
    let max = |f: &dyn Fn(&CurvePoint) -> f64| curve.points.iter().map(f).fold(0.0, f64::max);
    Ok(MetricsReport {
        auc: auc(curve),
        best_hm: 100.0 * max(&|p| harmonic_mean(p.seen, p.unseen)),
        best_seen: 100.0 * max(&|p| p.seen),
        best_unseen: 100.0 * max(&|p| p.unseen),
        attr_acc: concepts.attr,
        obj_acc: concepts.obj,
        attr_acc_marginal: concepts.attr_marginal,
        obj_acc_marginal: concepts.obj_marginal,
    })
}

fn concept_accuracy(table: &ScoreTable, beta: f64) -> ConceptAccuracy {
    let n = table.images.len().max(1) as f64;
    let pairs = &table.candidates.pairs;
    let mut acc = ConceptAccuracy::default();
    for img in &table.images {
        let c = &img.components;
        acc.attr += f64::from(u8::from(argmax(c.attr.view()) == img.attr));
        acc.obj += f64::from(u8::from(argmax(c.obj.view()) == img.obj));
        let pred = pairs[argmax(c.ranking(pairs, beta).view())];
        acc.attr_marginal += f64::from(u8::from(pred.attr == img.attr));
        acc.obj_marginal += f64::from(u8::from(pred.obj == img.obj));
    }
    ConceptAccuracy {
        attr: 100.0 * acc.attr / n,
        obj: 100.0 * acc.obj / n,
        attr_marginal: 100.0 * acc.attr_marginal / n,
        obj_marginal: 100.0 * acc.obj_marginal / n,
    }
}

/// The whole protocol on blended scores at `beta`.
pub fn evaluate(table: &ScoreTable, beta: f64) -> Result<Evaluation> {
    let scores = table.blended(beta);
    let truth = table.truth();
    let unseen = &table.candidates.unseen;
    let gammas = calibration_gammas(scores.view(), &truth, unseen)?;
    let curve = build_curve(scores.view(), &truth, unseen, &gammas)?;
    let report = summarize(&curve, concept_accuracy(table, beta))?;
    Ok(Evaluation {
        beta,
        curve,
        report,
    })
}

pub fn curve_csv(curve: &EvaluationCurve) -> String {
    let mut s = String::from("gamma,seen,unseen\n");
    for p in &curve.points {
        let _ = writeln!(s, "{},{},{}", p.gamma, p.seen, p.unseen);
    }
    s
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

/// Unseen (y) against seen (x) accuracy, one polyline per labelled curve.
pub fn curves_svg(series: &[(String, &EvaluationCurve)]) -> Result<String> {
    if series.is_empty() || series.iter().any(|(_, c)| c.points.is_empty()) {
        return Err(Error::Evaluation("nothing to plot".into()));
    }
    let (w, h, m) = (480.0, 400.0, 50.0);
    let x = |v: f64| m + v * (w - 2.0 * m);
    let y = |v: f64| h - m - v * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{} {} L{} {} L{} {}" fill="none" stroke="black"/>"#,
        x(0.0),
        y(1.0),
        x(0.0),
        y(0.0),
        x(1.0),
        y(0.0)
    );
    for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{t}</text><text x="{}" y="{}" text-anchor="end">{t}</text>"#,
            x(t),
            y(0.0) + 16.0,
            x(0.0) - 6.0,
            y(t) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">seen accuracy</text>"#,
        w / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text transform="translate(14 {}) rotate(-90)" text-anchor="middle">unseen accuracy</text>"#,
        h / 2.0
    );
    for (k, (label, curve)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let mut pts: Vec<(f64, f64)> = curve.points.iter().map(|p| (p.seen, p.unseen)).collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
        let path: Vec<String> = pts
            .iter()
            .map(|(sx, uy)| format!("{:.2},{:.2}", x(*sx), y(*uy)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            path.join(" ")
        );
        let ly = m + 16.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            w - m - 110.0,
            w - m - 90.0,
            w - m - 84.0,
            ly + 4.0,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn curve(points: &[(f64, f64)]) -> EvaluationCurve {
        EvaluationCurve {
            points: points
                .iter()
                .map(|&(seen, unseen)| CurvePoint {
                    gamma: 0.0,
                    seen,
                    unseen,
                })
                .collect(),
        }
    }

    #[test]
    fn unit_triangle_and_flat_point() {
        assert_eq!(auc(&curve(&[(1.0, 0.0), (0.0, 1.0)])), 50.0);
        let r = summarize(&curve(&[(0.6, 0.6)]), ConceptAccuracy::default()).unwrap();
        assert!((r.best_hm - 60.0).abs() < 1e-12);
        assert_eq!(r.auc, 0.0);
    }

    #[test]
    fn gammas_are_differences_to_the_best_seen_score() {
        let unseen = [false, false, true];
        let scores = array![[0.8, 0.1, 0.5], [0.1, 0.3, 0.5], [0.9, 0.0, 0.1]];
        let g = calibration_gammas(scores.view(), &[2, 2, 0], &unseen).unwrap();
        assert_eq!(g.len(), 4);
        assert!((g[1] + 0.2).abs() < 1e-12);
        assert!((g[2] - 0.3).abs() < 1e-12);
        assert!(g[0] < g[1] && g[3] > g[2]);
        assert!(calibration_gammas(scores.view(), &[0, 1, 0], &unseen).is_err());
    }

    #[test]
    fn bias_extremes() {
        let unseen = [false, true, false, true];
        let s = array![0.5, 0.2, 0.4, 0.3];
        assert_eq!(biased_argmax(s.view(), 0.0, &unseen), 0);
        assert_eq!(biased_argmax(s.view(), 1e6, &unseen), 3);
        assert_eq!(biased_argmax(s.view(), 0.2, &unseen), 0);
        assert_eq!(biased_argmax(s.view(), 0.2 + 1e-9, &unseen), 3);
    }

    #[test]
    fn long_gamma_lists_are_subsampled() {
        let g: Vec<f64> = (0..1000).map(|i| i as f64 / 1000.0 - 0.5).collect();
        let c = curve_gammas(&g);
        assert!(c.len() <= CURVE_POINTS + 3);
        assert_eq!(c[0], g[0]);
        assert_eq!(*c.last().unwrap(), g[999]);
        assert!(c.contains(&0.0));
        assert!(c.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn fixed_seen_prediction_has_no_unseen_accuracy() {
        let unseen = [false, true];
        let scores = array![[0.9, 0.1], [0.9, 0.1], [0.9, 0.1]];
        let truth = [0, 1, 1];
        let g = calibration_gammas(scores.view(), &truth, &unseen).unwrap();
        let c = build_curve(scores.view(), &truth, &unseen, &g).unwrap();
        for p in c.points.iter().filter(|p| p.gamma <= 0.0) {
            assert_eq!(p.unseen, 0.0);
        }
        assert_eq!(c.points.last().unwrap().unseen, 1.0);
    }
}
