//! Sampling discrete architectures from the trained distribution, scoring
//! them with the shared supernetwork weights and extracting the
//! cost/accuracy Pareto frontier.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost_model::CostTable;
use crate::error::{Error, Result};
use crate::gumbel::{derive_rng, sample_categorical, ThetaMatrix};
use crate::search_space::ArchPath;
use crate::supernet::Supernet;
use crate::tensor::Scalar;
use crate::toy::{argmax_classes, miou, ToyDataset};

/// Number of architectures drawn for frontier estimation.
pub const DEFAULT_SAMPLES: usize = 200;
/// Images per inference batch during scoring.
pub const EVAL_BATCH: usize = 32;

/// One scored architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub path: ArchPath,
    pub cost: f64,
    /// Validation mIOU.
    pub score: f64,
}

/// Draws `n` paths; each superblock's choice is independent and follows the
/// softmax of its logits.
pub fn sample_paths<R: Rng + ?Sized>(theta: &ThetaMatrix, n: usize, rng: &mut R) -> Result<Vec<ArchPath>> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be at least 1".into()));
    }
    let probs = theta.probs();
    Ok((0..n)
        .map(|_| ArchPath::new(probs.iter().map(|p| sample_categorical(p, rng)).collect()))
        .collect())
}

/// Validation mIOU of a discrete path: hard selection, no noise, running
/// normalization statistics.
pub fn evaluate_path<T: Scalar>(net: &Supernet<T>, path: &ArchPath, val: &ToyDataset) -> Result<f64> {
    net.arch().validate_path(path)?;
    score(val, |idx| {
        let (x, _) = val.batch::<T>(idx);
        net.predict_path(&x, path)
    })
}

/// Validation mIOU of the Gumbel-Softmax mixture at temperature `t`.
pub fn evaluate_soft<T: Scalar>(net: &Supernet<T>, val: &ToyDataset, t: f64, seed: u64) -> Result<f64> {
    let mut rng = derive_rng(seed, 0x50f7, 0);
    score(val, |idx| {
        let (x, _) = val.batch::<T>(idx);
        net.predict_soft(&x, t, &mut rng)
    })
}

fn score<T: Scalar>(val: &ToyDataset, mut predict: impl FnMut(&[usize]) -> Result<crate::tensor::Tensor<T>>) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::InvalidArgument("validation set is empty".into()));
    }
    let mut preds = Vec::with_capacity(val.labels.len());
    let all: Vec<usize> = (0..val.len()).collect();
    for chunk in all.chunks(EVAL_BATCH) {
        preds.extend(argmax_classes(&predict(chunk)?));
    }
    let labels: Vec<usize> = val.labels.iter().map(|&l| l as usize).collect();
    miou(&preds, &labels, val.num_classes)
}

/// Costs and scores for `paths`; each distinct path is evaluated once, in
/// parallel, and results keep the input order.
pub fn score_paths<T: Scalar>(net: &Supernet<T>, paths: &[ArchPath], table: &CostTable, val: &ToyDataset) -> Result<Vec<ParetoPoint>> {
    let mut unique: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
    for p in paths {
        unique.entry(p.choices.clone()).or_insert(f64::NAN);
    }
    let keys: Vec<Vec<usize>> = unique.keys().cloned().collect();
    let scores: Vec<Result<f64>> = keys
        .par_iter()
        .map(|k| evaluate_path(net, &ArchPath::new(k.clone()), val))
        .collect();
    for (k, s) in keys.into_iter().zip(scores) {
        unique.insert(k, s?);
    }
    paths
        .iter()
        .map(|p| {
            Ok(ParetoPoint {
                path: p.clone(),
                cost: table.path_cost(p)?,
                score: unique[&p.choices],
            })
        })
        .collect()
}

/// Points not dominated by any other (cost no higher and score no lower,
/// one of them strictly), sorted by cost. Of several identical
/// (cost, score) pairs only the first in input order survives.
pub fn pareto_frontier(points: &[ParetoPoint]) -> Vec<ParetoPoint> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        let (pa, pb) = (&points[a], &points[b]);
        pa.cost
            .total_cmp(&pb.cost)
            .then(pb.score.total_cmp(&pa.score))
            .then(a.cmp(&b))
    });
    let mut best = f64::NEG_INFINITY;
    let mut out = Vec::new();
    for k in order {
        if points[k].score > best {
            best = points[k].score;
            out.push(points[k].clone());
        }
    }
    out
}

/// Result of a budgeted pick from a frontier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub point: ParetoPoint,
    /// False when nothing met the budget and the cheapest point was taken.
    pub within_budget: bool,
}

/// Best-scoring point with cost at most `target_cost`, or the cheapest
/// point (flagged) when none qualifies.
pub fn select(frontier: &[ParetoPoint], target_cost: f64) -> Result<Selection> {
    if frontier.is_empty() {
        return Err(Error::InvalidArgument("cannot select from an empty frontier".into()));
    }
    let best = frontier
        .iter()
        .filter(|p| p.cost <= target_cost)
        .min_by(|a, b| b.score.total_cmp(&a.score).then(a.cost.total_cmp(&b.cost)));
    Ok(match best {
        Some(p) => Selection {
            point: p.clone(),
            within_budget: true,
        },
        None => Selection {
            point: frontier
                .iter()
                .min_by(|a, b| a.cost.total_cmp(&b.cost))
                .expect("nonempty")
                .clone(),
            within_budget: false,
        },
    })
}

/// `cost,score,path` rows with the compact path notation.
pub fn write_csv<W: Write>(points: &[ParetoPoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["cost", "score", "path"])?;
    for p in points {
        w.write_record([format!("{}", p.cost), format!("{:.6}", p.score), p.path.to_compact()])?;
    }
    w.flush()?;
    Ok(())
}

/// Scatter plot of every sampled point with the frontier drawn on top.
pub fn render_svg(points: &[ParetoPoint], frontier: &[ParetoPoint], cost_label: &str) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const LEFT: f64 = 70.0;
    const RIGHT: f64 = 20.0;
    const TOP: f64 = 20.0;
    const BOTTOM: f64 = 50.0;
    let (lo, hi) = points
        .iter()
        .chain(frontier)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.cost), hi.max(p.cost)));
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 1.0) };
    let span = if hi > lo { hi - lo } else { 1.0 };
    let x = |c: f64| LEFT + (c - lo) / span * (W - LEFT - RIGHT);
    let y = |s: f64| TOP + (1.0 - s.clamp(0.0, 1.0)) * (H - TOP - BOTTOM);
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(svg, r##"<rect width="{W}" height="{H}" fill="#ffffff"/>"##);
    let (x0, x1, y0, y1) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
    let _ = writeln!(svg, r##"<path d="M{x0} {y0} L{x0} {y1} L{x1} {y1}" stroke="#000" fill="none"/>"##);
    for k in 0..=4 {
        let s = k as f64 / 4.0;
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{s:.2}</text>"#, LEFT - 6.0, y(s) + 4.0);
        let c = lo + span * s;
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{c:.4e}</text>"#, x(c), H - BOTTOM + 16.0);
    }
    let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{cost_label}</text>"#, (x0 + x1) / 2.0, H - 10.0);
    let _ = writeln!(svg, r#"<text x="14" y="{:.1}" transform="rotate(-90 14 {:.1})" text-anchor="middle">mIOU</text>"#, (y0 + y1) / 2.0, (y0 + y1) / 2.0);
    for p in points {
        let _ = writeln!(svg, r##"<circle cx="{:.2}" cy="{:.2}" r="3" fill="#9aa4b1" fill-opacity="0.6"/>"##, x(p.cost), y(p.score));
    }
    if !frontier.is_empty() {
        let pts: Vec<String> = frontier.iter().map(|p| format!("{:.2},{:.2}", x(p.cost), y(p.score))).collect();
        let _ = writeln!(svg, r##"<polyline points="{}" stroke="#c0392b" stroke-width="1.5" fill="none"/>"##, pts.join(" "));
        for p in frontier {
            let _ = writeln!(
                svg,
                r##"<circle cx="{:.2}" cy="{:.2}" r="4" fill="#c0392b"><title>{}</title></circle>"##,
                x(p.cost),
                y(p.score),
                p.path.to_compact()
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;

    fn pt(cost: f64, score: f64) -> ParetoPoint {
        ParetoPoint {
            path: ArchPath::new(vec![0]),
            cost,
            score,
        }
    }

    fn brute_force(points: &[ParetoPoint]) -> Vec<ParetoPoint> {
        let dominated = |a: &ParetoPoint, b: &ParetoPoint| {
            b.cost <= a.cost && b.score >= a.score && (b.cost < a.cost || b.score > a.score)
        };
        let mut keep: Vec<ParetoPoint> = points
            .iter()
            .enumerate()
            .filter(|(i, a)| {
                !points.iter().any(|b| dominated(a, b))
                    && !points[..*i].iter().any(|b| b.cost == a.cost && b.score == a.score)
            })
            .map(|(_, a)| a.clone())
            .collect();
        keep.sort_by(|a, b| a.cost.total_cmp(&b.cost));
        keep
    }

    #[test]
    fn small_cases() {
        assert_eq!(pareto_frontier(&[pt(1.0, 0.5)]), vec![pt(1.0, 0.5)]);
        assert_eq!(pareto_frontier(&[pt(1.0, 0.5), pt(2.0, 0.4)]), vec![pt(1.0, 0.5)]);
        assert_eq!(pareto_frontier(&[pt(2.0, 0.6), pt(1.0, 0.5)]), vec![pt(1.0, 0.5), pt(2.0, 0.6)]);
        assert!(pareto_frontier(&[]).is_empty());
    }

    #[test]
    fn ties_keep_first_in_input_order() {
        let mut a = pt(1.0, 0.5);
        a.path = ArchPath::new(vec![3]);
        let mut b = pt(1.0, 0.5);
        b.path = ArchPath::new(vec![4]);
        assert_eq!(pareto_frontier(&[a.clone(), b.clone()]), vec![a.clone()]);
        assert_eq!(pareto_frontier(&[b.clone(), a]), vec![b]);
    }

    #[test]
    fn thousand_random_points_match_brute_force() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            // Coarse grid values force many ties.
            let points: Vec<ParetoPoint> = (0..1000)
                .map(|_| pt(rng.gen_range(0..50) as f64, rng.gen_range(0..40) as f64 / 40.0))
                .collect();
            let f = pareto_frontier(&points);
            assert_eq!(f, brute_force(&points));
            assert_eq!(pareto_frontier(&f), f);
        }
    }

    proptest! {
        #[test]
        fn frontier_properties(raw in prop::collection::vec((0u8..20, 0u8..20), 1..60), extra in (0u8..20, 0u8..20)) {
            let points: Vec<ParetoPoint> = raw.iter().map(|&(c, s)| pt(c as f64, s as f64 / 20.0)).collect();
            let f = pareto_frontier(&points);
            prop_assert_eq!(&f, &brute_force(&points));
            prop_assert_eq!(&pareto_frontier(&f), &f);
            for w in f.windows(2) {
                prop_assert!(w[0].cost < w[1].cost && w[0].score < w[1].score);
            }
            // A dominated addition leaves the frontier unchanged.
            let e = pt(extra.0 as f64, extra.1 as f64 / 20.0);
            if f.iter().any(|q| q.cost <= e.cost && q.score >= e.score && (q.cost < e.cost || q.score > e.score)) {
                let mut more = points.clone();
                more.push(e);
                prop_assert_eq!(pareto_frontier(&more), f);
            }
        }
    }

    #[test]
    fn select_budget_rules() {
        let frontier = vec![pt(1.0, 0.3), pt(2.0, 0.5), pt(4.0, 0.7)];
        let all = select(&frontier, 10.0).unwrap();
        assert_eq!((all.point.clone(), all.within_budget), (pt(4.0, 0.7), true));
        let below = select(&frontier, 0.5).unwrap();
        assert_eq!((below.point.clone(), below.within_budget), (pt(1.0, 0.3), false));
        let between = select(&frontier, 3.0).unwrap();
        assert_eq!(between.point, pt(2.0, 0.5));
        assert!(select(&[], 1.0).is_err());
    }

    #[test]
    fn sampling_frequencies_follow_probabilities() {
        let theta = ThetaMatrix::from_logits(vec![
            (0..13).map(|j| (j as f64 * 0.37).sin() * 2.0).collect(),
            (0..13).map(|j| (j as f64 * 1.1).cos()).collect(),
        ])
        .unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let n = 100_000;
        let paths = sample_paths(&theta, n, &mut rng).unwrap();
        for i in 0..2 {
            let p = theta.probs_row(i);
            for (j, pj) in p.iter().enumerate() {
                let freq = paths.iter().filter(|q| q.choices[i] == j).count() as f64 / n as f64;
                assert!((freq - pj).abs() < 0.01, "row {i} col {j}: {freq} vs {pj}");
            }
        }
        assert!(sample_paths(&theta, 0, &mut rng).is_err());
    }

    #[test]
    fn one_hot_theta_gives_identical_paths() {
        let mut row = vec![-1e3; 13];
        row[5] = 0.0;
        let theta = ThetaMatrix::from_logits(vec![row.clone(), row]).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let paths = sample_paths(&theta, DEFAULT_SAMPLES, &mut rng).unwrap();
        assert_eq!(paths.len(), 200);
        assert!(paths.iter().all(|p| p.choices == vec![5, 5]));
    }

    #[test]
    fn csv_and_svg_are_deterministic() {
        let pts = vec![pt(2.0, 0.25), pt(1.0, 0.5)];
        let f = pareto_frontier(&pts);
        let mut buf = Vec::new();
        write_csv(&f, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "cost,score,path\n1,0.500000,k3_d1_e1_g2\n");
        let svg = render_svg(&pts, &f, "MACs");
        assert_eq!(svg, render_svg(&pts, &f, "MACs"));
        assert!(svg.starts_with("<svg") && svg.contains("polyline"));
    }
}
