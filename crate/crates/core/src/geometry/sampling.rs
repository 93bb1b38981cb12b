use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use super::{sq_dist, Mesh, PointCloud, Point3};
use crate::error::{Error, Result};

pub const DEFAULT_OVERSAMPLE: usize = 3;

/// Greedy farthest point sampling starting at `start`. Each step picks the
/// unselected point with the largest distance to the selected set, lowest
/// index on ties.
pub fn farthest_point_sample(points: &[Point3], m: usize, start: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if m < 1 || m > n {
        return Err(Error::invalid(format!(
            "farthest point sampling needs 1 <= m <= {n}, got {m}"
        )));
    }
    if start >= n {
        return Err(Error::IndexOutOfBounds {
            op: "farthest_point_sample",
            index: start,
            extent: n,
        });
    }
    let mut selected = Vec::with_capacity(m);
    let mut taken = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut current = start;
    for _ in 0..m {
        selected.push(current);
        taken[current] = true;
        let c = points[current];
        let mut best = f64::NEG_INFINITY;
        let mut next = usize::MAX;
        for (i, (p, d)) in points.iter().zip(min_d.iter_mut()).enumerate() {
            let s = sq_dist(*p, c);
            if s < *d {
                *d = s;
            }
            if !taken[i] && *d > best {
                best = *d;
                next = i;
            }
        }
        current = next;
    }
    Ok(selected)
}

/// Uniform sample of `m` distinct indices.
pub fn random_subsample<R: Rng + ?Sized>(n: usize, m: usize, rng: &mut R) -> Result<Vec<usize>> {
    if m > n {
        return Err(Error::invalid(format!("cannot draw {m} of {n} points")));
    }
    Ok(rand::seq::index::sample(rng, n, m).into_vec())
}

/// Area-weighted triangle choice, then a uniform barycentric point.
pub fn sample_mesh_uniform<R: Rng + ?Sized>(mesh: &Mesh, m: usize, rng: &mut R) -> Result<PointCloud> {
    let areas: Vec<f64> = (0..mesh.triangles().len()).map(|t| mesh.triangle_area(t)).collect();
    let total: f64 = areas.iter().sum();
    if !(total > 0.0) || m == 0 {
        return Err(Error::invalid("mesh sampling needs positive total area and m >= 1"));
    }
    let pick = WeightedIndex::new(&areas).map_err(|e| Error::invalid(e.to_string()))?;
    let points = (0..m)
        .map(|_| {
            let [a, b, c] = mesh.corners(pick.sample(rng));
            let mut u: f64 = rng.gen();
            let mut v: f64 = rng.gen();
            if u + v > 1.0 {
                u = 1.0 - u;
                v = 1.0 - v;
            }
            [0, 1, 2].map(|k| a[k] + u * (b[k] - a[k]) + v * (c[k] - a[k]))
        })
        .collect();
    PointCloud::new(points)
}

/// Blue-noise-like surface sampling: draw `oversample · m` uniform points and
/// thin them to `m` with farthest point sampling.
pub fn poisson_like_sample<R: Rng + ?Sized>(
    mesh: &Mesh,
    m: usize,
    oversample: usize,
    rng: &mut R,
) -> Result<PointCloud> {
    if oversample < 2 {
        return Err(Error::invalid("oversample factor must be at least 2"));
    }
    let dense = sample_mesh_uniform(mesh, m * oversample, rng)?;
    let keep = farthest_point_sample(dense.points(), m, 0)?;
    Ok(dense.select(&keep))
}
