//! Brute-force recomputation of the calibrated seen/unseen protocol with
//! plain loops, for comparison against the library.

use ade::rng::keyed_rng;
use ndarray::Array2;
use rand::Rng;

pub struct OraclePoint {
    pub gamma: f64,
    pub seen: f64,
    pub unseen: f64,
}

pub struct OracleResult {
    pub points: Vec<OraclePoint>,
    pub auc: f64,
    pub best_hm: f64,
}

fn predict(row: &[f64], gamma: f64, unseen: &[bool]) -> usize {
    // Strictly larger wins, so the first maximum is kept.
    let mut best = 0;
    for c in 1..row.len() {
        let v = row[c] + if unseen[c] { gamma } else { 0.0 };
        let b = row[best] + if unseen[best] { gamma } else { 0.0 };
        if v > b {
            best = c;
        }
    }
    best
}

/// Every calibration value (one per unseen image, the two margins and
/// zero) with its accuracies, then the area and best harmonic mean.
pub fn protocol(
    scores: &[Vec<f64>],
    truth: &[usize],
    unseen: &[bool],
    margin: f64,
) -> OracleResult {
    let mut gammas = Vec::new();
    for (i, &t) in truth.iter().enumerate() {
        if unseen[t] {
            let mut best_seen = f64::NEG_INFINITY;
            for c in 0..unseen.len() {
                if !unseen[c] && scores[i][c] > best_seen {
                    best_seen = scores[i][c];
                }
            }
            gammas.push(best_seen - scores[i][t]);
        }
    }
    let lo = gammas.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = gammas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    gammas.push(lo - margin);
    gammas.push(hi + margin);
    gammas.push(0.0);
    gammas.sort_by(|a, b| a.partial_cmp(b).unwrap());
    gammas.dedup();

    let n_seen = truth.iter().filter(|&&t| !unseen[t]).count() as f64;
    let n_unseen = truth.iter().filter(|&&t| unseen[t]).count() as f64;
    let points: Vec<OraclePoint> = gammas
        .iter()
        .map(|&g| {
            let (mut s, mut u) = (0.0, 0.0);
            for (i, &t) in truth.iter().enumerate() {
                if predict(&scores[i], g, unseen) == t {
                    if unseen[t] {
                        u += 1.0;
                    } else {
                        s += 1.0;
                    }
                }
            }
            OraclePoint {
                gamma: g,
                seen: s / n_seen,
                unseen: u / n_unseen,
            }
        })
        .collect();

    // Curve as a step-free polyline through points sorted by seen accuracy,
    // integrated one segment at a time.
    let mut xy: Vec<(f64, f64)> = points.iter().map(|p| (p.seen, p.unseen)).collect();
    xy.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut auc = 0.0;
    for k in 1..xy.len() {
        let width = xy[k].0 - xy[k - 1].0;
        auc += width * 0.5 * (xy[k].1 + xy[k - 1].1);
    }
    let mut best_hm: f64 = 0.0;
    for p in &points {
        if p.seen + p.unseen > 0.0 {
            best_hm = best_hm.max(2.0 * p.seen * p.unseen / (p.seen + p.unseen));
        }
    }
    OracleResult {
        points,
        auc: auc * 100.0,
        best_hm: best_hm * 100.0,
    }
}

/// Random table with at least one seen and one unseen candidate and at
/// least one seen and one unseen image.
pub fn random_score_table(
    seed: u64,
    max_c: usize,
    max_n: usize,
) -> (Array2<f64>, Vec<usize>, Vec<bool>) {
    let mut rng = keyed_rng(seed, "score-table", &[]);
    let c = rng.gen_range(2..=max_c);
    let n = rng.gen_range(2..=max_n);
    let mut unseen: Vec<bool> = (0..c).map(|_| rng.gen_bool(0.5)).collect();
    unseen[0] = false;
    unseen[c - 1] = true;
    let seen_idx: Vec<usize> = (0..c).filter(|&k| !unseen[k]).collect();
    let unseen_idx: Vec<usize> = (0..c).filter(|&k| unseen[k]).collect();
    let truth: Vec<usize> = (0..n)
        .map(|i| match i {
            0 => seen_idx[rng.gen_range(0..seen_idx.len())],
            1 => unseen_idx[rng.gen_range(0..unseen_idx.len())],
            _ => rng.gen_range(0..c),
        })
        .collect();
    // Coarse values make exact ties common.
    let scores = Array2::from_shape_fn((n, c), |_| rng.gen_range(0..8) as f64 / 8.0);
    (scores, truth, unseen)
}
