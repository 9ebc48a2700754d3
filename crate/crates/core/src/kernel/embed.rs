//! Randomized Bourgain embedding of a finite metric into Euclidean space.
//!
//! Each coordinate is the distance from a point to a random landmark subset,
//! `min_{a in A} d(i, a)`. Subsets of size `2^q` are drawn for
//! `q = 1..=ceil(log2 n)`, `ceil(2 ln n)` times each, and coordinates are
//! scaled by `1/sqrt(k)`. Every coordinate is 1-Lipschitz, so embedded
//! distances never exceed the original ones.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::KernelError;

/// Landmark subsets and the coordinates of the points they were drawn for.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    landmarks: Vec<Vec<usize>>,
    coords: Vec<Vec<f64>>,
}

impl Embedding {
    pub fn dim(&self) -> usize {
        self.landmarks.len()
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[Vec<f64>] {
        &self.coords
    }

    pub fn landmarks(&self) -> &[Vec<usize>] {
        &self.landmarks
    }

    /// Coordinates of an extra point given its distances to the embedded
    /// points. Landmarks stay the ones drawn for the embedded set, so the
    /// existing rows do not move.
    pub fn place(&self, dists: &[f64]) -> Vec<f64> {
        debug_assert_eq!(dists.len(), self.len());
        let scale = 1.0 / (self.dim().max(1) as f64).sqrt();
        self.landmarks
            .iter()
            .map(|set| set.iter().map(|&a| dists[a]).fold(f64::INFINITY, f64::min) * scale)
            .collect()
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Rejects asymmetric, negative, non-zero-diagonal or triangle-violating
/// matrices (tolerance 1e-9).
pub fn check_metric(dist: &[Vec<f64>]) -> Result<(), KernelError> {
    let n = dist.len();
    for i in 0..n {
        if dist[i].len() != n {
            return Err(KernelError::NotMetric(format!("row {i} has length {}", dist[i].len())));
        }
        if dist[i][i] != 0.0 {
            return Err(KernelError::NotMetric(format!("d({i},{i}) = {}", dist[i][i])));
        }
        for j in 0..n {
            let d = dist[i][j];
            if !d.is_finite() || d < 0.0 || d != dist[j][i] {
                return Err(KernelError::NotMetric(format!("d({i},{j}) = {d}")));
            }
        }
    }
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                if dist[i][j] > dist[i][k] + dist[k][j] + 1e-9 {
                    return Err(KernelError::NotMetric(format!(
                        "triangle inequality fails for ({i},{j}) via {k}"
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Landmark subsets for `n` points. For `n <= 2` a single subset `{0}` is used.
fn draw_landmarks(n: usize, seed: u64) -> Vec<Vec<usize>> {
    if n <= 2 {
        return if n == 0 { Vec::new() } else { vec![vec![0]] };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let levels = (n as f64).log2().ceil() as u32;
    let trials = (2.0 * (n as f64).ln()).ceil() as usize;
    let mut out = Vec::with_capacity(levels as usize * trials);
    for q in 1..=levels {
        let size = (1usize << q).min(n);
        for _ in 0..trials {
            let mut set = sample(&mut rng, n, size).into_vec();
            set.sort_unstable();
            out.push(set);
        }
    }
    out
}

/// Embeds the metric `dist` (validated first).
pub fn bourgain_embed(dist: &[Vec<f64>], seed: u64) -> Result<Embedding, KernelError> {
    check_metric(dist)?;
    let n = dist.len();
    let landmarks = draw_landmarks(n, seed);
    let scale = 1.0 / (landmarks.len().max(1) as f64).sqrt();
    let coords = (0..n)
        .map(|i| {
            landmarks
                .iter()
                .map(|set| set.iter().map(|&a| dist[i][a]).fold(f64::INFINITY, f64::min) * scale)
                .collect()
        })
        .collect();
    Ok(Embedding { landmarks, coords })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_metric(n: usize, seed: u64) -> Vec<Vec<f64>> {
        // Points on a line plus an L1 component: always a metric.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng.random_range(0.0..5.0), rng.random_range(0.0..5.0)))
            .collect();
        (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| (pts[i].0 - pts[j].0).abs() + (pts[i].1 - pts[j].1).abs())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn tiny_inputs() {
        let e = bourgain_embed(&[vec![0.0]], 1).unwrap();
        assert_eq!(e.coords(), &[vec![0.0]]);
        let e = bourgain_embed(&[vec![0.0, 0.8], vec![0.8, 0.0]], 1).unwrap();
        assert!((euclidean(&e.coords()[0], &e.coords()[1]) - 0.8).abs() < 1e-9);
        assert!(bourgain_embed(&[], 1).unwrap().is_empty());
    }

    #[test]
    fn contracts_and_reports_distortion() {
        let d = random_metric(20, 4);
        let e = bourgain_embed(&d, 7).unwrap();
        assert_eq!(e.dim(), 5 * 6);
        let mut worst: f64 = 1.0;
        for i in 0..20 {
            for j in 0..20 {
                let r = euclidean(&e.coords()[i], &e.coords()[j]);
                assert!(r <= d[i][j] + 1e-9);
                if i != j && d[i][j] > 0.0 {
                    worst = worst.max(d[i][j] / r);
                }
            }
        }
        // Distortion is O(log n) in expectation; a generous sanity bound.
        assert!(worst.is_finite() && worst < 20.0 * (20f64).ln(), "distortion {worst}");
    }

    #[test]
    fn deterministic_per_seed() {
        let d = random_metric(12, 5);
        assert_eq!(bourgain_embed(&d, 3).unwrap(), bourgain_embed(&d, 3).unwrap());
        assert_ne!(bourgain_embed(&d, 3).unwrap(), bourgain_embed(&d, 4).unwrap());
    }

    #[test]
    fn place_matches_joint_rows() {
        let d = random_metric(10, 6);
        let e = bourgain_embed(&d, 2).unwrap();
        for i in 0..10 {
            assert_eq!(e.place(&d[i]), e.coords()[i]);
        }
    }

    #[test]
    fn rejects_non_metric() {
        let d = vec![
            vec![0.0, 1.0, 5.0],
            vec![1.0, 0.0, 1.0],
            vec![5.0, 1.0, 0.0],
        ];
        assert!(matches!(bourgain_embed(&d, 0), Err(KernelError::NotMetric(_))));
        let asym = vec![vec![0.0, 1.0], vec![2.0, 0.0]];
        assert!(check_metric(&asym).is_err());
    }
}
