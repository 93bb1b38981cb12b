use super::{sq_dist, Point3};
use crate::error::{Error, Result};
use crate::tensor::select_k_smallest;

/// Reference sets at least this large go through the uniform grid.
pub const GRID_THRESHOLD: usize = 2048;

/// The `k` nearest reference points of every query, ascending by distance,
/// ties broken by lower index.
pub fn knn(reference: &[Point3], queries: &[Point3], k: usize) -> Result<Vec<Vec<usize>>> {
    check_k(reference.len(), k)?;
    if reference.len() < GRID_THRESHOLD {
        Ok(knn_brute_force_unchecked(reference, queries, k))
    } else {
        let grid = Grid::build(reference);
        Ok(queries.iter().map(|q| grid.query(reference, *q, k)).collect())
    }
}

pub fn knn_brute_force(reference: &[Point3], queries: &[Point3], k: usize) -> Result<Vec<Vec<usize>>> {
    check_k(reference.len(), k)?;
    Ok(knn_brute_force_unchecked(reference, queries, k))
}

fn check_k(m: usize, k: usize) -> Result<()> {
    if k == 0 || k > m {
        return Err(Error::invalid(format!(
            "knn needs 1 <= k <= {m} reference rows, got k={k}"
        )));
    }
    Ok(())
}

fn knn_brute_force_unchecked(reference: &[Point3], queries: &[Point3], k: usize) -> Vec<Vec<usize>> {
    let mut cand = Vec::with_capacity(reference.len());
    queries
        .iter()
        .map(|&q| {
            cand.clear();
            cand.extend(reference.iter().enumerate().map(|(i, &p)| (sq_dist(q, p), i)));
            select_k_smallest(&mut cand, k);
            cand[..k].iter().map(|c| c.1).collect()
        })
        .collect()
}

/// Brute-force kNN over feature rows of width `dim`.
pub fn knn_rows(reference: &[f64], queries: &[f64], dim: usize, k: usize) -> Result<Vec<Vec<usize>>> {
    if dim == 0 || !reference.len().is_multiple_of(dim) || !queries.len().is_multiple_of(dim) {
        return Err(Error::invalid("knn_rows: row width does not divide the data"));
    }
    let m = reference.len() / dim;
    check_k(m, k)?;
    let mut cand = Vec::with_capacity(m);
    Ok(queries
        .chunks_exact(dim)
        .map(|q| {
            cand.clear();
            cand.extend(
                reference
                    .chunks_exact(dim)
                    .enumerate()
                    .map(|(i, r)| (crate::tensor::sq_dist(q, r), i)),
            );
            select_k_smallest(&mut cand, k);
            cand[..k].iter().map(|c| c.1).collect()
        })
        .collect())
}

struct Grid {
    origin: Point3,
    cell: f64,
    dims: [usize; 3],
    starts: Vec<usize>,
    order: Vec<usize>,
}

impl Grid {
    fn build(points: &[Point3]) -> Grid {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
        let per_axis = (points.len() as f64 / 2.0).cbrt().ceil().max(1.0);
        let cell = if extent > 0.0 { extent / per_axis } else { 1.0 };
        let dims = [0, 1, 2].map(|a| ((hi[a] - lo[a]) / cell).floor() as usize + 1);
        let mut grid = Grid {
            origin: lo,
            cell,
            dims,
            starts: Vec::new(),
            order: Vec::new(),
        };
        let ncells = dims[0] * dims[1] * dims[2];
        let keys: Vec<usize> = points.iter().map(|&p| grid.flat(grid.cell_of(p))).collect();
        let mut counts = vec![0usize; ncells + 1];
        for &key in &keys {
            counts[key + 1] += 1;
        }
        for i in 0..ncells {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut order = vec![0; points.len()];
        for (i, &key) in keys.iter().enumerate() {
            order[fill[key]] = i;
            fill[key] += 1;
        }
        grid.starts = counts;
        grid.order = order;
        grid
    }

    fn cell_of(&self, p: Point3) -> [usize; 3] {
        [0, 1, 2].map(|a| {
            let c = ((p[a] - self.origin[a]) / self.cell).floor();
            if c <= 0.0 {
                0
            } else {
                (c as usize).min(self.dims[a] - 1)
            }
        })
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        (c[0] * self.dims[1] + c[1]) * self.dims[2] + c[2]
    }

    fn query(&self, points: &[Point3], q: Point3, k: usize) -> Vec<usize> {
        let qc = self.cell_of(q).map(|v| v as i64);
        let dims = self.dims.map(|v| v as i64);
        let mut cand: Vec<(f64, usize)> = Vec::new();
        let mut r: i64 = 0;
        loop {
            for dx in -r..=r {
                for dy in -r..=r {
                    for dz in -r..=r {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                            continue;
                        }
                        let c = [qc[0] + dx, qc[1] + dy, qc[2] + dz];
                        if (0..3).any(|a| c[a] < 0 || c[a] >= dims[a]) {
                            continue;
                        }
                        let key = self.flat(c.map(|v| v as usize));
                        for &i in &self.order[self.starts[key]..self.starts[key + 1]] {
                            cand.push((sq_dist(q, points[i]), i));
                        }
                    }
                }
            }
            // Distance from q to the nearest cell outside the visited block.
            let mut bound = f64::INFINITY;
            for a in 0..3 {
                if qc[a] - r > 0 {
                    let face = self.origin[a] + (qc[a] - r) as f64 * self.cell;
                    bound = bound.min(q[a] - face);
                }
                if qc[a] + r < dims[a] - 1 {
                    let face = self.origin[a] + (qc[a] + r + 1) as f64 * self.cell;
                    bound = bound.min(face - q[a]);
                }
            }
            if bound == f64::INFINITY {
                break;
            }
            if cand.len() >= k && bound > 0.0 {
                select_k_smallest(&mut cand, k);
                let kth = cand[k - 1].0.sqrt();
                if kth * (1.0 + 1e-9) + 1e-12 < bound {
                    break;
                }
            }
            r += 1;
        }
        select_k_smallest(&mut cand, k);
        cand[..k].iter().map(|c| c.1).collect()
    }
}
