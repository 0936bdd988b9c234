use std::cmp::Ordering;

use super::MatchDirection;
use crate::numerics::{cosine_distance, Tensor};

/// Token-to-key affinities and their top-K binarization.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// `A[m][k]`: cosine distance between token `m` and key `k`.
    pub affinity: Tensor,
    /// `Â`: 0/1 matrix, same shape as `affinity`; empty until binarized.
    pub binarized: Option<Tensor>,
    /// Per row, the chosen pool indices in rank order.
    pub selected: Vec<Vec<usize>>,
}

impl MatchResult {
    pub fn rows(&self) -> usize {
        self.affinity.rows()
    }

    pub fn pool_size(&self) -> usize {
        self.affinity.cols()
    }

    /// `(row, key)` pairs of every selection.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.selected
            .iter()
            .enumerate()
            .flat_map(|(m, ks)| ks.iter().map(move |&k| (m, k)))
            .collect()
    }
}

/// Cosine distances between every token row and every key row. Works on
/// plain values: nothing here is differentiated.
pub fn build_affinity(tokens: &Tensor, keys: &Tensor) -> MatchResult {
    let (rows, pool) = (tokens.rows(), keys.rows());
    let mut a = Vec::with_capacity(rows * pool);
    for m in 0..rows {
        let t = tokens.row(m);
        for k in 0..pool {
            a.push(cosine_distance(t, keys.row(k)));
        }
    }
    MatchResult {
        affinity: Tensor::matrix(rows, pool, a),
        binarized: None,
        selected: Vec::new(),
    }
}

/// Marks `top_k` entries per row; ties go to the lowest pool index.
pub fn binarize_topk(
    mut result: MatchResult,
    top_k: usize,
    direction: MatchDirection,
) -> MatchResult {
    let pool = result.pool_size();
    assert!(
        (1..=pool).contains(&top_k),
        "top_k {top_k} outside [1, {pool}]"
    );
    let mut bits = vec![0.0; result.affinity.numel()];
    let mut selected = Vec::with_capacity(result.rows());
    for m in 0..result.rows() {
        let row = result.affinity.row(m);
        let mut order: Vec<usize> = (0..pool).collect();
        order.sort_by(|&a, &b| {
            let by_value = match direction {
                MatchDirection::MostSimilar => row[a].total_cmp(&row[b]),
                MatchDirection::LargestDistance => row[b].total_cmp(&row[a]),
            };
            match by_value {
                Ordering::Equal => a.cmp(&b),
                o => o,
            }
        });
        order.truncate(top_k);
        for &k in &order {
            bits[m * pool + k] = 1.0;
        }
        selected.push(order);
    }
    result.binarized = Some(Tensor::matrix(result.rows(), pool, bits));
    result.selected = selected;
    result
}

#[cfg(test)]
mod tests {
    use super::*;

    fn from_distances(row: &[f64]) -> MatchResult {
        MatchResult {
            affinity: Tensor::matrix(1, row.len(), row.to_vec()),
            binarized: None,
            selected: Vec::new(),
        }
    }

    #[test]
    fn single_token_against_two_keys() {
        let tokens = Tensor::from_rows(&[vec![2.0, 0.0]]);
        let keys = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 3.0]]);
        assert_eq!(build_affinity(&tokens, &keys).affinity.data(), &[0.0, 1.0]);
    }

    #[test]
    fn positive_scaling_leaves_affinity_unchanged() {
        let tokens = Tensor::from_rows(&[vec![1.0, 2.0, -1.0], vec![0.5, -3.0, 2.0]]);
        let scaled = Tensor::from_rows(&[vec![4.0, 8.0, -4.0], vec![2.0, -12.0, 8.0]]);
        let keys = Tensor::from_rows(&[vec![1.0, 0.0, 1.0], vec![-2.0, 1.0, 0.5]]);
        let a = build_affinity(&tokens, &keys).affinity;
        let b = build_affinity(&scaled, &keys).affinity;
        assert!(a.max_abs_diff(&b) < 1e-15);
    }

    #[test]
    fn affinity_matches_pairwise_loop() {
        let mut rng = crate::rng::Rng::new(17);
        let mut draw =
            |r: usize| Tensor::matrix(r, 5, (0..r * 5).map(|_| rng.normal(0.0, 1.0)).collect());
        let tokens = draw(3);
        let keys = draw(4);
        let a = build_affinity(&tokens, &keys).affinity;
        for m in 0..3 {
            for k in 0..4 {
                let (u, v) = (tokens.row(m), keys.row(k));
                let dot: f64 = u.iter().zip(v).map(|(x, y)| x * y).sum();
                let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((a.at(m, k) - (1.0 - dot / (nu * nv))).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn binarize_directions_and_ties() {
        let r = binarize_topk(
            from_distances(&[0.9, 0.1, 0.5]),
            2,
            MatchDirection::MostSimilar,
        );
        assert_eq!(r.binarized.unwrap().data(), &[0.0, 1.0, 1.0]);
        assert_eq!(r.selected, vec![vec![1, 2]]);

        let r = binarize_topk(
            from_distances(&[0.9, 0.1, 0.5]),
            2,
            MatchDirection::LargestDistance,
        );
        assert_eq!(r.binarized.unwrap().data(), &[1.0, 0.0, 1.0]);

        for dir in [MatchDirection::MostSimilar, MatchDirection::LargestDistance] {
            let r = binarize_topk(from_distances(&[0.3, 0.3, 0.3]), 1, dir);
            assert_eq!(r.selected, vec![vec![0]]);
        }
    }
}
