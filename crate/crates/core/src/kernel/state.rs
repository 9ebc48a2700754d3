use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::embed::{bourgain_embed, euclidean, Embedding};
use super::{arch_distance, kernel_value, KernelError};
use crate::graph::StructuralSummary;

/// Pairwise distances over the search history and their embedding.
///
/// `extend` returns a new state; the embedding is recomputed from scratch
/// with the stored seed on every extension.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceState {
    seed: u64,
    lambda: f64,
    archive: Vec<StructuralSummary>,
    dist: Vec<Vec<f64>>,
    embedding: Embedding,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateDoc {
    seed: u64,
    lambda: f64,
    archive: Vec<StructuralSummary>,
    /// Strict lower triangle, row-major: d(1,0), d(2,0), d(2,1), ...
    dist: Vec<f64>,
}

impl DistanceState {
    pub fn new(seed: u64, lambda: f64) -> Self {
        DistanceState {
            seed,
            lambda,
            archive: Vec::new(),
            dist: Vec::new(),
            embedding: bourgain_embed(&[], seed).expect("empty metric"),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn len(&self) -> usize {
        self.archive.len()
    }

    pub fn is_empty(&self) -> bool {
        self.archive.is_empty()
    }

    pub fn archive(&self) -> &[StructuralSummary] {
        &self.archive
    }

    pub fn dist(&self) -> &[Vec<f64>] {
        &self.dist
    }

    pub fn embedding(&self) -> &Embedding {
        &self.embedding
    }

    /// Raw distances from `s` to every archived summary.
    pub fn distances_to(&self, s: &StructuralSummary) -> Vec<f64> {
        self.archive
            .iter()
            .map(|a| arch_distance(a, s, self.lambda))
            .collect()
    }

    pub fn extend(&self, s: StructuralSummary) -> Result<DistanceState, KernelError> {
        let row = self.distances_to(&s);
        self.extend_with_row(s, row)
    }

    fn extend_with_row(&self, s: StructuralSummary, row: Vec<f64>) -> Result<DistanceState, KernelError> {
        let mut dist = self.dist.clone();
        for (r, &d) in dist.iter_mut().zip(&row) {
            r.push(d);
        }
        let mut last = row;
        last.push(0.0);
        dist.push(last);
        let embedding = bourgain_embed(&dist, self.seed)?;
        let mut archive = self.archive.clone();
        archive.push(s);
        Ok(DistanceState {
            seed: self.seed,
            lambda: self.lambda,
            archive,
            dist,
            embedding,
        })
    }

    /// The state over the first `m` archived summaries, re-embedded.
    pub fn truncated(&self, m: usize) -> Result<DistanceState, KernelError> {
        let m = m.min(self.len());
        if m == self.len() {
            return Ok(self.clone());
        }
        let dist: Vec<Vec<f64>> = self.dist[..m].iter().map(|r| r[..m].to_vec()).collect();
        Ok(DistanceState {
            seed: self.seed,
            lambda: self.lambda,
            archive: self.archive[..m].to_vec(),
            embedding: bourgain_embed(&dist, self.seed)?,
            dist,
        })
    }

    /// `K[i][j] = exp(-|e_i - e_j|^2)` over the archive.
    pub fn kernel_matrix(&self) -> DMatrix<f64> {
        let c = self.embedding.coords();
        let n = c.len();
        DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                1.0
            } else {
                kernel_value(euclidean(&c[i], &c[j]))
            }
        })
    }

    /// Embeds a candidate jointly with the archive from its raw distances,
    /// returning its coordinates and its kernel row against the archive.
    pub fn candidate(&self, dists: &[f64]) -> (Vec<f64>, DVector<f64>) {
        let e = self.embedding.place(dists);
        let k = DVector::from_iterator(
            self.len(),
            self.embedding
                .coords()
                .iter()
                .map(|row| kernel_value(euclidean(row, &e))),
        );
        (e, k)
    }

    pub fn to_json(&self) -> String {
        let n = self.len();
        let mut lower = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for i in 1..n {
            lower.extend_from_slice(&self.dist[i][..i]);
        }
        let doc = StateDoc {
            seed: self.seed,
            lambda: self.lambda,
            archive: self.archive.clone(),
            dist: lower,
        };
        serde_json::to_string(&doc).expect("kernel state serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, KernelError> {
        let doc: StateDoc = serde_json::from_str(text).map_err(|e| KernelError::State(e.to_string()))?;
        let n = doc.archive.len();
        let expected = n * n.saturating_sub(1) / 2;
        if doc.dist.len() != expected {
            return Err(KernelError::State(format!(
                "{} archived summaries need {expected} distances, found {}",
                n,
                doc.dist.len()
            )));
        }
        let mut dist = vec![vec![0.0; n]; n];
        let mut it = doc.dist.iter();
        for i in 1..n {
            for j in 0..i {
                let d = *it.next().expect("length checked");
                dist[i][j] = d;
                dist[j][i] = d;
            }
        }
        let embedding = bourgain_embed(&dist, doc.seed)?;
        Ok(DistanceState {
            seed: doc.seed,
            lambda: doc.lambda,
            archive: doc.archive,
            dist,
            embedding,
        })
    }
}
