//! Point clouds and the spatial kernels used between network stages.

use std::cmp::Ordering;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// `N` points with xyz coordinates, optional per-point attribute channels
/// and optional integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    coords: Vec<[f64; 3]>,
    channels: usize,
    attrs: Vec<f64>,
    labels: Option<Vec<usize>>,
}

impl PointCloud {
    pub fn new(coords: Vec<[f64; 3]>) -> Result<Self> {
        if coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "point cloud" });
        }
        Ok(PointCloud {
            coords,
            channels: 0,
            attrs: Vec::new(),
            labels: None,
        })
    }

    /// Attaches `channels` attribute values per point (row-major `N × channels`).
    pub fn with_attrs(mut self, channels: usize, attrs: Vec<f64>) -> Result<Self> {
        if attrs.len() != channels * self.len() {
            return Err(Error::DataLength {
                shape: vec![self.len(), channels],
                expected: channels * self.len(),
                actual: attrs.len(),
            });
        }
        self.channels = channels;
        self.attrs = attrs;
        Ok(self)
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::DataLength {
                shape: vec![self.len()],
                expected: self.len(),
                actual: labels.len(),
            });
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[[f64; 3]] {
        &self.coords
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn attrs(&self) -> &[f64] {
        &self.attrs
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// The sub-cloud at `index` (attributes and labels follow their points).
    pub fn select(&self, index: &[usize]) -> PointCloud {
        let c = self.channels;
        PointCloud {
            coords: index.iter().map(|&i| self.coords[i]).collect(),
            channels: c,
            attrs: index.iter().flat_map(|&i| &self.attrs[i * c..(i + 1) * c]).copied().collect(),
            labels: self.labels.as_ref().map(|l| index.iter().map(|&i| l[i]).collect()),
        }
    }
}

/// Row `i` holds the `k` nearest points to point `i`, self first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborIndex {
    k: usize,
    indices: Vec<usize>,
}

impl NeighborIndex {
    pub fn new(k: usize, indices: Vec<usize>) -> Result<Self> {
        if k == 0 || indices.len() % k != 0 {
            return Err(Error::DataLength {
                shape: vec![indices.len() / k.max(1), k],
                expected: k,
                actual: indices.len(),
            });
        }
        Ok(NeighborIndex { k, indices })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn rows(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    /// Flattened `N·K` indices.
    pub fn as_slice(&self) -> &[usize] {
        &self.indices
    }
}

pub fn squared_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Brute-force `k` nearest neighbors of every point.
///
/// Each row starts with the point itself; the remaining entries are sorted
/// by ascending distance, ties going to the lower point index.
pub fn knn(coords: &[[f64; 3]], k: usize) -> Result<NeighborIndex> {
    let n = coords.len();
    if k > n || k == 0 {
        return Err(Error::TooFewPoints { k, n });
    }
    let mut indices = Vec::with_capacity(n * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    let by_distance = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    for (i, p) in coords.iter().enumerate() {
        cand.clear();
        cand.extend(
            coords
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, q)| (squared_distance(p, q), j)),
        );
        let rest = k - 1;
        if rest > 0 && rest < cand.len() {
            cand.select_nth_unstable_by(rest - 1, by_distance);
            cand.truncate(rest);
        }
        cand.sort_unstable_by(by_distance);
        indices.push(i);
        indices.extend(cand.iter().take(rest).map(|&(_, j)| j));
    }
    NeighborIndex::new(k, indices)
}

/// `⌈n / ratio⌉` distinct indices drawn uniformly without replacement,
/// returned in ascending order. `ratio == 1` selects everything.
pub fn random_subsample(n: usize, ratio: usize, seed: u64) -> Vec<usize> {
    let ratio = ratio.max(1);
    if ratio == 1 {
        return (0..n).collect();
    }
    let count = n.div_ceil(ratio);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, n, count).into_vec();
    picked.sort_unstable();
    picked
}

/// For each fine point, the index of its nearest coarse point (ties to
/// the lowest index).
pub fn nearest_upsample(coarse: &[[f64; 3]], fine: &[[f64; 3]]) -> Result<Vec<usize>> {
    if coarse.is_empty() {
        return Err(Error::Empty("coarse cloud"));
    }
    Ok(fine
        .iter()
        .map(|p| {
            let mut best = 0;
            let mut best_d = squared_distance(p, &coarse[0]);
            for (j, q) in coarse.iter().enumerate().skip(1) {
                let d = squared_distance(p, q);
                if d.total_cmp(&best_d) == Ordering::Less {
                    best = j;
                    best_d = d;
                }
            }
            best
        })
        .collect())
}

/// `out[i, k] = coords[i] − coords[nbr[i, k]]`, flattened to `N·K·3`.
pub fn relative_offsets(coords: &[[f64; 3]], nbr: &NeighborIndex) -> Vec<f64> {
    let mut out = Vec::with_capacity(nbr.as_slice().len() * 3);
    for i in 0..nbr.rows() {
        for &j in nbr.row(i) {
            out.extend((0..3).map(|d| coords[i][d] - coords[j][d]));
        }
    }
    out
}
