//! Station proximity graph: pairwise haversine distances, a thresholded
//! Gaussian-kernel adjacency, and the symmetrically normalized self-looped
//! propagation operator the spatial convolution applies per time step.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ingest::StationRegistry;

/// Mean Earth radius in kilometers (IUGG).
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

/// Great-circle distance between two points given in degrees.
pub fn haversine_km(lat1: f64, lng1: f64, lat2: f64, lng2: f64) -> f64 {
    let (phi1, phi2) = (lat1.to_radians(), lat2.to_radians());
    let dphi = (lat2 - lat1).to_radians();
    let dlambda = (lng2 - lng1).to_radians();
    let a = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * a.sqrt().min(1.0).asin()
}

/// Symmetric N x N matrix of pairwise station distances in kilometers.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    d: Vec<f64>,
}

impl DistanceMatrix {
    pub fn from_parts(n: usize, d: Vec<f64>) -> Result<Self> {
        if d.len() != n * n {
            return Err(Error::Data(format!(
                "distance matrix: {} entries for n = {n}",
                d.len()
            )));
        }
        Ok(DistanceMatrix { n, d })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.n + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.d
    }

    /// Standard deviation of the off-diagonal entries; zero for n = 1.
    pub fn off_diagonal_std(&self) -> f64 {
        let n = self.n;
        if n < 2 {
            return 0.0;
        }
        let count = (n * n - n) as f64;
        let mut sum = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    sum += self.get(i, j);
                }
            }
        }
        let mean = sum / count;
        let mut var = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let dev = self.get(i, j) - mean;
                    var += dev * dev;
                }
            }
        }
        (var / count).sqrt()
    }
}

/// Pairwise distances between all registry stations. Computed for i < j and
/// mirrored, so symmetry is exact.
pub fn distance_matrix(registry: &StationRegistry) -> DistanceMatrix {
    let n = registry.len();
    let coords: Vec<(f64, f64)> = registry
        .iter()
        .map(|s| (s.latitude, s.longitude))
        .collect();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut row = vec![0.0; n];
            let (lat_i, lng_i) = coords[i];
            for (j, &(lat_j, lng_j)) in coords.iter().enumerate().skip(i + 1) {
                row[j] = haversine_km(lat_i, lng_i, lat_j, lng_j);
            }
            row
        })
        .collect();
    let mut d = vec![0.0; n * n];
    for (i, row) in rows.iter().enumerate() {
        for j in i + 1..n {
            d[i * n + j] = row[j];
            d[j * n + i] = row[j];
        }
    }
    DistanceMatrix { n, d }
}

/// Thresholded Gaussian-kernel adjacency: weights in [0, 1], zero diagonal,
/// entries below `epsilon` zeroed out.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedAdjacency {
    n: usize,
    w: Vec<f64>,
    pub sigma_sq: f64,
    pub epsilon: f64,
}

impl WeightedAdjacency {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.w[i * self.n + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.w
    }
}

/// `w[i][j] = exp(-d[i][j]^2 / sigma_sq)` when that value clears `epsilon`;
/// zero otherwise and on the diagonal.
pub fn gaussian_adjacency(
    d: &DistanceMatrix,
    sigma_sq: f64,
    epsilon: f64,
) -> Result<WeightedAdjacency> {
    if sigma_sq <= 0.0 {
        return Err(Error::Param(format!(
            "gaussian adjacency: sigma_sq must be positive, got {sigma_sq}"
        )));
    }
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::Param(format!(
            "gaussian adjacency: epsilon must lie in [0, 1), got {epsilon}"
        )));
    }
    let n = d.n();
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let dist = d.get(i, j);
            let weight = (-dist * dist / sigma_sq).exp();
            if weight >= epsilon {
                w[i * n + j] = weight;
            }
        }
    }
    Ok(WeightedAdjacency {
        n,
        w,
        sigma_sq,
        epsilon,
    })
}

/// Symmetrically normalized, self-looped adjacency; the graph operator the
/// spatial convolution applies at every time step.
#[derive(Clone, Debug, PartialEq)]
pub struct PropagationOperator {
    n: usize,
    p: Vec<f64>,
}

impl PropagationOperator {
    pub fn from_parts(n: usize, p: Vec<f64>) -> Result<Self> {
        if p.len() != n * n {
            return Err(Error::Data(format!(
                "propagation operator: {} entries for n = {n}",
                p.len()
            )));
        }
        Ok(PropagationOperator { n, p })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.p[i * self.n + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.p
    }

    /// Largest-magnitude eigenvalue estimate by power iteration; the
    /// operator's spectral radius never exceeds 1.
    pub fn spectral_radius_estimate(&self, iterations: usize) -> f64 {
        let n = self.n;
        let mut v = vec![1.0 / (n as f64).sqrt(); n];
        let mut lambda = 0.0;
        for _ in 0..iterations {
            let mut next = vec![0.0; n];
            for i in 0..n {
                let row = &self.p[i * n..(i + 1) * n];
                let mut acc = 0.0;
                for j in 0..n {
                    acc += row[j] * v[j];
                }
                next[i] = acc;
            }
            let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            lambda = norm;
            for x in next.iter_mut() {
                *x /= norm;
            }
            v = next;
        }
        lambda
    }
}

/// `p = D^(-1/2) (W + I) D^(-1/2)` with D the diagonal degree of `W + I`.
/// Self-loops keep every degree at least 1, so no division can fail; an
/// isolated node's row comes out as the matching identity row.
pub fn normalize(w: &WeightedAdjacency) -> PropagationOperator {
    let n = w.n();
    let mut degree = vec![1.0; n]; // self loop
    for i in 0..n {
        for j in 0..n {
            degree[i] += w.get(i, j);
        }
    }
    let inv_sqrt: Vec<f64> = degree.iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let a = if i == j { 1.0 } else { w.get(i, j) };
            if a != 0.0 {
                p[i * n + j] = inv_sqrt[i] * a * inv_sqrt[j];
            }
        }
    }
    PropagationOperator { n, p }
}
