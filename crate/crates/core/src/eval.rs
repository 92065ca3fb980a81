//! Retrieval scoring and the reports built on top of it.
//!
//! Ranking follows the standard cross-camera protocol: gallery items that
//! share both identity and camera with the query are excluded, the rest are
//! ranked by cosine similarity, and AP averages precision at each relevant
//! rank. Ties break by gallery index so duplicate features stay
//! reproducible.

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::selector::similarity;
use crate::stats::GaussianStats;
use rayon::prelude::*;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankScore {
    pub map: f64,
    pub rank1: f64,
    /// Queries that entered the averages.
    pub evaluated: usize,
    /// Queries dropped for lack of any valid relevant gallery item.
    pub skipped: usize,
}

fn l2_normalized_f64(feats: &Matrix<f32>) -> Matrix<f64> {
    let mut out = Matrix::zeros(feats.rows(), feats.cols());
    for r in 0..feats.rows() {
        let row = feats.row(r);
        let norm = row
            .iter()
            .map(|&x| (x as f64) * (x as f64))
            .sum::<f64>()
            .sqrt()
            .max(1e-12);
        for (o, &x) in out.row_mut(r).iter_mut().zip(row) {
            *o = x as f64 / norm;
        }
    }
    out
}

/// Score queries against a gallery; cosine ranking with the
/// same-identity-same-camera exclusion rule.
pub fn rank_and_score(
    query_feats: &Matrix<f32>,
    query_ids: &[u32],
    query_cams: &[u32],
    gallery_feats: &Matrix<f32>,
    gallery_ids: &[u32],
    gallery_cams: &[u32],
) -> Result<RankScore> {
    let nq = query_feats.rows();
    let ng = gallery_feats.rows();
    if query_ids.len() != nq || query_cams.len() != nq {
        return Err(Error::Dim("query metadata length mismatch".into()));
    }
    if gallery_ids.len() != ng || gallery_cams.len() != ng {
        return Err(Error::Dim("gallery metadata length mismatch".into()));
    }
    if nq == 0 || ng == 0 {
        return Err(Error::Empty("rank_and_score".into()));
    }
    if query_feats.cols() != gallery_feats.cols() {
        return Err(Error::Dim(format!(
            "query dim {} vs gallery dim {}",
            query_feats.cols(),
            gallery_feats.cols()
        )));
    }

    let q = l2_normalized_f64(query_feats);
    let g = l2_normalized_f64(gallery_feats);

    let per_query: Vec<Option<(f64, f64)>> = (0..nq)
        .into_par_iter()
        .map(|qi| {
            let qrow = q.row(qi);
            // (similarity, gallery index) over valid items
            let mut ranked: Vec<(f64, usize)> = (0..ng)
                .filter(|&gi| {
                    !(gallery_ids[gi] == query_ids[qi] && gallery_cams[gi] == query_cams[qi])
                })
                .map(|gi| {
                    let sim: f64 = qrow.iter().zip(g.row(gi)).map(|(&a, &b)| a * b).sum();
                    (sim, gi)
                })
                .collect();
            ranked.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .expect("finite similarity")
                    .then(a.1.cmp(&b.1))
            });
            let total_relevant = ranked
                .iter()
                .filter(|&&(_, gi)| gallery_ids[gi] == query_ids[qi])
                .count();
            if total_relevant == 0 {
                return None;
            }
            let mut hits = 0usize;
            let mut ap = 0.0;
            for (rank0, &(_, gi)) in ranked.iter().enumerate() {
                if gallery_ids[gi] == query_ids[qi] {
                    hits += 1;
                    ap += hits as f64 / (rank0 + 1) as f64;
                }
            }
            ap /= total_relevant as f64;
            let rank1 = if gallery_ids[ranked[0].1] == query_ids[qi] {
                1.0
            } else {
                0.0
            };
            Some((ap, rank1))
        })
        .collect();

    let mut map = 0.0;
    let mut rank1 = 0.0;
    let mut evaluated = 0usize;
    let mut skipped = 0usize;
    for entry in per_query {
        match entry {
            Some((ap, r1)) => {
                map += ap;
                rank1 += r1;
                evaluated += 1;
            }
            None => skipped += 1,
        }
    }
    if evaluated == 0 {
        return Err(Error::Data("every query lacked a valid relevant match".into()));
    }
    Ok(RankScore {
        map: map / evaluated as f64,
        rank1: rank1 / evaluated as f64,
        evaluated,
        skipped,
    })
}

/// Row-stochastic knowledge-similarity matrix: row i holds the mixing
/// weights of test distribution i against every stored domain at the given
/// reference temperature.
pub fn similarity_matrix(
    stored: &[GaussianStats],
    test_stats: &[GaussianStats],
    tau: f64,
) -> Result<Matrix<f64>> {
    if stored.is_empty() {
        return Err(Error::State("no stored domain statistics".into()));
    }
    let mut m = Matrix::zeros(test_stats.len(), stored.len());
    for (i, t) in test_stats.iter().enumerate() {
        let distances: Vec<f64> = stored
            .iter()
            .map(|s| crate::stats::w2_distance(t, s))
            .collect::<Result<_>>()?;
        let w = similarity(&distances, tau)?;
        m.row_mut(i).copy_from_slice(w.weights());
    }
    Ok(m)
}

// ---------------------------------------------------------------------------
// Report types and CSV output
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ScoreRow {
    /// Lifelong step after which the evaluation ran (1-based).
    pub step: usize,
    pub domain: String,
    pub map: f64,
    pub rank1: f64,
}

/// Arithmetic mean of per-domain scores; the definition of "seen average".
pub fn average_scores(rows: &[ScoreRow]) -> (f64, f64) {
    if rows.is_empty() {
        return (0.0, 0.0);
    }
    let n = rows.len() as f64;
    (
        rows.iter().map(|r| r.map).sum::<f64>() / n,
        rows.iter().map(|r| r.rank1).sum::<f64>() / n,
    )
}

pub fn write_scores_csv(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    let mut out = String::from("step,domain,map,rank1\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.step, r.domain, r.map, r.rank1));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_similarity_csv(
    path: &Path,
    stored_names: &[String],
    test_names: &[String],
    matrix: &Matrix<f64>,
) -> Result<()> {
    if matrix.rows() != test_names.len() || matrix.cols() != stored_names.len() {
        return Err(Error::Dim("similarity matrix shape vs names".into()));
    }
    let mut out = String::from("domain");
    for n in stored_names {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    for (i, name) in test_names.iter().enumerate() {
        out.push_str(name);
        for v in matrix.row(i) {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ForgettingEntry {
    pub domain: String,
    pub introduced_step: usize,
    /// (step, mAP) from the introduction step onward.
    pub trajectory: Vec<(usize, f64)>,
    pub peak: f64,
    pub final_score: f64,
    /// peak − final; 0 means no forgetting.
    pub drop: f64,
}

/// Per-domain score trajectories across lifelong steps. Input: for each
/// step (in order), the per-domain scores evaluated after that step.
pub fn forgetting_report(per_step: &[Vec<ScoreRow>]) -> Vec<ForgettingEntry> {
    let mut order: Vec<String> = Vec::new();
    for step_rows in per_step {
        for r in step_rows {
            if !order.contains(&r.domain) {
                order.push(r.domain.clone());
            }
        }
    }
    order
        .into_iter()
        .map(|domain| {
            let mut trajectory = Vec::new();
            for rows in per_step {
                for r in rows {
                    if r.domain == domain {
                        trajectory.push((r.step, r.map));
                    }
                }
            }
            let introduced_step = trajectory.first().map(|&(s, _)| s).unwrap_or(0);
            let peak = trajectory.iter().map(|&(_, m)| m).fold(f64::NEG_INFINITY, f64::max);
            let final_score = trajectory.last().map(|&(_, m)| m).unwrap_or(0.0);
            ForgettingEntry {
                domain,
                introduced_step,
                trajectory,
                peak,
                final_score,
                drop: peak - final_score,
            }
        })
        .collect()
}

pub fn write_forgetting_csv(path: &Path, entries: &[ForgettingEntry]) -> Result<()> {
    let mut out = String::from("domain,introduced_step,step,map,peak,final,drop\n");
    for e in entries {
        for &(step, map) in &e.trajectory {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                e.domain, e.introduced_step, step, map, e.peak, e.final_score, e.drop
            ));
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Features on the unit circle at given angles (radians).
    fn angled(angles: &[f64]) -> Matrix<f32> {
        let rows: Vec<Vec<f32>> = angles
            .iter()
            .map(|&a| vec![a.cos() as f32, a.sin() as f32])
            .collect();
        Matrix::from_rows(&rows).unwrap()
    }

    #[test]
    fn perfect_retrieval_scores_one() {
        // each query's nearest gallery item carries its identity
        let q = angled(&[0.0, 1.0]);
        let g = angled(&[0.05, 1.05, 2.5]);
        let score = rank_and_score(&q, &[1, 2], &[0, 0], &g, &[1, 2, 3], &[1, 1, 1]).unwrap();
        assert_eq!(score.map, 1.0);
        assert_eq!(score.rank1, 1.0);
        assert_eq!(score.evaluated, 2);
        assert_eq!(score.skipped, 0);
    }

    #[test]
    fn hand_computed_average_precision() {
        // single query; ranked gallery relevance [0,1,1] → AP=(1/2+2/3)/2
        let q = angled(&[0.0]);
        let g = angled(&[0.1, 0.2, 0.3]);
        let score = rank_and_score(&q, &[7], &[0], &g, &[9, 7, 7], &[1, 1, 1]).unwrap();
        assert!((score.map - 7.0 / 12.0).abs() < 1e-9);
        assert!((score.map - 0.58333).abs() < 1e-5);
        assert_eq!(score.rank1, 0.0);
    }

    #[test]
    fn same_id_same_camera_excluded() {
        let q = angled(&[0.0]);
        // nearest item shares id AND camera → excluded, next is a distractor
        let g = angled(&[0.01, 0.2, 0.4]);
        let score = rank_and_score(&q, &[5], &[2], &g, &[5, 8, 5], &[2, 0, 1]).unwrap();
        // remaining ranked: idx1 (id 8), idx2 (id 5) → AP = 1/2, rank1 = 0
        assert!((score.map - 0.5).abs() < 1e-12);
        assert_eq!(score.rank1, 0.0);
    }

    #[test]
    fn queries_without_valid_match_are_skipped_with_count() {
        let q = angled(&[0.0, 1.0]);
        let g = angled(&[0.1, 1.1]);
        // query 0's only same-id item shares its camera → skipped
        let score = rank_and_score(&q, &[1, 2], &[0, 0], &g, &[1, 2], &[0, 1]).unwrap();
        assert_eq!(score.skipped, 1);
        assert_eq!(score.evaluated, 1);
        assert_eq!(score.map, 1.0);
    }

    #[test]
    fn ties_break_by_gallery_index() {
        let q = angled(&[0.0]);
        // two identical gallery features, different ids; lower index wins
        let g = Matrix::from_rows(&[vec![1.0f32, 0.0], vec![1.0, 0.0]]).unwrap();
        let a = rank_and_score(&q, &[3], &[0], &g, &[3, 4], &[1, 1]).unwrap();
        assert_eq!(a.rank1, 1.0);
        let b = rank_and_score(&q, &[4], &[0], &g, &[3, 4], &[1, 1]).unwrap();
        assert_eq!(b.rank1, 0.0);
    }

    #[test]
    fn matches_brute_force_oracle_exactly() {
        let mut rng = crate::rng::rng_from_seed(77);
        for _ in 0..200 {
            let ng = rng.gen_range(2..=20);
            let nq = rng.gen_range(1..=4);
            let dim = rng.gen_range(2..5);
            let rand_feats = |rng: &mut rand_chacha::ChaCha12Rng, n: usize| {
                Matrix::from_vec(
                    n,
                    dim,
                    (0..n * dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
                )
                .unwrap()
            };
            let q = rand_feats(&mut rng, nq);
            let g = rand_feats(&mut rng, ng);
            let q_ids: Vec<u32> = (0..nq).map(|_| rng.gen_range(0..4)).collect();
            let g_ids: Vec<u32> = (0..ng).map(|_| rng.gen_range(0..4)).collect();
            let q_cams: Vec<u32> = (0..nq).map(|_| rng.gen_range(0..3)).collect();
            let g_cams: Vec<u32> = (0..ng).map(|_| rng.gen_range(0..3)).collect();

            let ours = rank_and_score(&q, &q_ids, &q_cams, &g, &g_ids, &g_cams);

            // oracle: direct definition, computed independently
            let qn = l2_normalized_f64(&q);
            let gn = l2_normalized_f64(&g);
            let mut maps = Vec::new();
            let mut r1s = Vec::new();
            let mut skipped = 0;
            for qi in 0..nq {
                let mut items: Vec<(f64, usize)> = (0..ng)
                    .filter(|&gi| !(g_ids[gi] == q_ids[qi] && g_cams[gi] == q_cams[qi]))
                    .map(|gi| {
                        (
                            qn.row(qi).iter().zip(gn.row(gi)).map(|(&a, &b)| a * b).sum(),
                            gi,
                        )
                    })
                    .collect();
                items.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
                let rel: Vec<bool> = items.iter().map(|&(_, gi)| g_ids[gi] == q_ids[qi]).collect();
                let total: usize = rel.iter().filter(|&&r| r).count();
                if total == 0 {
                    skipped += 1;
                    continue;
                }
                let mut ap = 0.0;
                let mut hits = 0;
                for (k, &is_rel) in rel.iter().enumerate() {
                    if is_rel {
                        hits += 1;
                        ap += hits as f64 / (k + 1) as f64;
                    }
                }
                maps.push(ap / total as f64);
                r1s.push(if rel[0] { 1.0 } else { 0.0 });
            }
            match ours {
                Ok(score) => {
                    let expect_map = maps.iter().sum::<f64>() / maps.len() as f64;
                    let expect_r1 = r1s.iter().sum::<f64>() / r1s.len() as f64;
                    assert_eq!(score.map, expect_map);
                    assert_eq!(score.rank1, expect_r1);
                    assert_eq!(score.skipped, skipped);
                }
                Err(_) => assert!(maps.is_empty()),
            }
        }
    }

    #[test]
    fn invariant_under_rotation_and_scaling() {
        let mut rng = crate::rng::rng_from_seed(5);
        let q = Matrix::from_vec(3, 2, (0..6).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            .unwrap();
        let g = Matrix::from_vec(8, 2, (0..16).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            .unwrap();
        let q_ids = [0u32, 1, 2];
        let g_ids: Vec<u32> = (0..8).map(|i| (i % 4) as u32).collect();
        let q_cams = [0u32, 0, 0];
        let g_cams: Vec<u32> = (0..8).map(|i| (i % 2 + 1) as u32).collect();
        let base = rank_and_score(&q, &q_ids, &q_cams, &g, &g_ids, &g_cams).unwrap();

        let theta = 0.83f32;
        let rotate = |m: &Matrix<f32>| {
            let mut out = m.clone();
            for r in 0..m.rows() {
                let (x, y) = (m[(r, 0)], m[(r, 1)]);
                out[(r, 0)] = theta.cos() * x - theta.sin() * y;
                out[(r, 1)] = theta.sin() * x + theta.cos() * y;
            }
            out
        };
        let rotated = rank_and_score(&rotate(&q), &q_ids, &q_cams, &rotate(&g), &g_ids, &g_cams)
            .unwrap();
        assert!((base.map - rotated.map).abs() < 1e-9);
        assert!((base.rank1 - rotated.rank1).abs() < 1e-9);

        let scaled =
            rank_and_score(&q.scale(37.5), &q_ids, &q_cams, &g.scale(37.5), &g_ids, &g_cams)
                .unwrap();
        assert_eq!(base.map, scaled.map);
        assert_eq!(base.rank1, scaled.rank1);
    }

    #[test]
    fn similarity_matrix_rows_sum_to_one() {
        let mk = |seed: u64| {
            let mut rng = crate::rng::rng_from_seed(seed);
            let f = Matrix::from_vec(
                40,
                4,
                (0..160).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            GaussianStats::fit(&f).unwrap()
        };
        let stored = [mk(1), mk(2), mk(3)];
        let tests = [mk(4), mk(5)];
        let m = similarity_matrix(&stored, &tests, 0.5).unwrap();
        for r in 0..m.rows() {
            let sum: f64 = m.row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
        assert!(matches!(
            similarity_matrix(&[], &tests, 0.5),
            Err(Error::State(_))
        ));
        // single stored domain: every row is exactly [1.0]
        let single = similarity_matrix(&stored[..1], &tests[..1], 0.5).unwrap();
        assert_eq!(single[(0, 0)], 1.0);
    }

    #[test]
    fn forgetting_trajectories_and_drops() {
        let rows = |step: usize, scores: &[(&str, f64)]| -> Vec<ScoreRow> {
            scores
                .iter()
                .map(|&(d, m)| ScoreRow {
                    step,
                    domain: d.into(),
                    map: m,
                    rank1: m,
                })
                .collect()
        };
        let per_step = vec![
            rows(1, &[("a", 0.9)]),
            rows(2, &[("a", 0.8), ("b", 0.7)]),
            rows(3, &[("a", 0.85), ("b", 0.6), ("c", 0.95)]),
        ];
        let report = forgetting_report(&per_step);
        assert_eq!(report.len(), 3);
        let a = &report[0];
        assert_eq!(a.introduced_step, 1);
        assert!((a.peak - 0.9).abs() < 1e-12);
        assert!((a.drop - 0.05).abs() < 1e-12);
        let c = &report[2];
        assert_eq!(c.introduced_step, 3);
        assert_eq!(c.trajectory.len(), 1);
        assert_eq!(c.drop, 0.0);
    }

    #[test]
    fn averages_recompute_exactly() {
        let rows: Vec<ScoreRow> = (0..5)
            .map(|i| ScoreRow {
                step: 1,
                domain: format!("d{i}"),
                map: 0.1 * i as f64,
                rank1: 0.2 * i as f64,
            })
            .collect();
        let (am, ar) = average_scores(&rows);
        let manual_m: f64 = rows.iter().map(|r| r.map).sum::<f64>() / 5.0;
        let manual_r: f64 = rows.iter().map(|r| r.rank1).sum::<f64>() / 5.0;
        assert!((am - manual_m).abs() < 1e-12);
        assert!((ar - manual_r).abs() < 1e-12);
    }
}
