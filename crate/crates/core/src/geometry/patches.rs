use super::{farthest_point_sample, knn, PointCloud};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    /// Index of the seed point in the source cloud.
    pub seed: usize,
    /// Source indices of the patch points, nearest to the seed first.
    pub indices: Vec<usize>,
    pub cloud: PointCloud,
}

/// Seed count giving roughly three-fold overlap: `ceil(3·M / patch_size)`.
pub fn default_num_seeds(m: usize, patch_size: usize) -> usize {
    (3 * m).div_ceil(patch_size).max(1)
}

/// FPS seeds (start 0), each grown into its `patch_size` nearest neighbours.
pub fn extract_patches(cloud: &PointCloud, patch_size: usize, num_seeds: usize) -> Result<Vec<Patch>> {
    let m = cloud.len();
    if patch_size == 0 || patch_size > m {
        return Err(Error::invalid(format!(
            "patch size {patch_size} must be in 1..={m}"
        )));
    }
    if num_seeds < 1 {
        return Err(Error::invalid("at least one patch seed is required"));
    }
    let seeds = farthest_point_sample(cloud.points(), num_seeds.min(m), 0)?;
    let queries: Vec<_> = seeds.iter().map(|&s| cloud.points()[s]).collect();
    let neighbours = knn(cloud.points(), &queries, patch_size)?;
    Ok(seeds
        .into_iter()
        .zip(neighbours)
        .map(|(seed, indices)| Patch {
            seed,
            cloud: cloud.select(&indices),
            indices,
        })
        .collect())
}

/// Fraction of the `m` source points that appear in at least one patch.
pub fn patch_coverage(patches: &[Patch], m: usize) -> f64 {
    let mut seen = vec![false; m];
    for p in patches {
        for &i in &p.indices {
            seen[i] = true;
        }
    }
    seen.iter().filter(|&&s| s).count() as f64 / m as f64
}

/// Concatenates patch outputs and thins them to `target` points with FPS.
pub fn merge_patches(upsampled: &[PointCloud], target: usize) -> Result<PointCloud> {
    let all: Vec<_> = upsampled.iter().flat_map(|c| c.points().iter().copied()).collect();
    if all.len() < target || target == 0 {
        return Err(Error::invalid(format!(
            "cannot merge {} points down to {target}",
            all.len()
        )));
    }
    let keep = farthest_point_sample(&all, target, 0)?;
    PointCloud::new(keep.into_iter().map(|i| all[i]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{poisson_like_sample, sq_dist, Mesh, DEFAULT_OVERSAMPLE};
    use crate::rng::rng_from;
    use rand::Rng;

    #[test]
    fn single_seed_full_size_is_whole_cloud() {
        let mut rng = rng_from(1);
        let c = PointCloud::new((0..30).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect()).unwrap();
        let p = extract_patches(&c, 30, 1).unwrap();
        assert_eq!(p.len(), 1);
        let mut idx = p[0].indices.clone();
        idx.sort();
        assert_eq!(idx, (0..30).collect::<Vec<_>>());
        assert!(extract_patches(&c, 31, 1).is_err());
    }

    #[test]
    fn sphere_patches_cover_every_point() {
        let sphere = Mesh::icosphere(3);
        let c = poisson_like_sample(&sphere, 1024, DEFAULT_OVERSAMPLE, &mut rng_from(2)).unwrap();
        let patches = extract_patches(&c, 256, 8).unwrap();
        assert_eq!(patches.len(), 8);
        for p in &patches {
            assert_eq!(p.cloud.len(), 256);
            assert!(p.indices.contains(&p.seed));
        }
        assert_eq!(patch_coverage(&patches, c.len()), 1.0);
    }

    #[test]
    fn merge_contracts() {
        let mut rng = rng_from(3);
        let a: Vec<_> = (0..100).map(|_| [rng.gen::<f64>(), rng.gen(), rng.gen()]).collect();
        let b: Vec<_> = (0..100).map(|_| [100.0 + rng.gen::<f64>(), rng.gen(), rng.gen()]).collect();
        let ca = PointCloud::new(a).unwrap();
        let cb = PointCloud::new(b).unwrap();
        let merged = merge_patches(&[ca.clone(), cb], 2).unwrap();
        assert_eq!(merged.len(), 2);
        assert!(merged.points()[0][0] < 1.0 && merged.points()[1][0] >= 100.0);

        let same = merge_patches(std::slice::from_ref(&ca), 100).unwrap();
        let mut x: Vec<_> = same.points().to_vec();
        let mut y: Vec<_> = ca.points().to_vec();
        x.sort_by(|p, q| p.partial_cmp(q).unwrap());
        y.sort_by(|p, q| p.partial_cmp(q).unwrap());
        assert_eq!(x, y);
        assert!(merge_patches(&[ca], 101).is_err());
    }

    #[test]
    fn merge_has_no_duplicates() {
        let mut rng = rng_from(4);
        let parts: Vec<PointCloud> = (0..3)
            .map(|_| PointCloud::new((0..50).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect()).unwrap())
            .collect();
        let m = merge_patches(&parts, 120).unwrap();
        let p = m.points();
        for i in 0..p.len() {
            for j in i + 1..p.len() {
                assert!(sq_dist(p[i], p[j]) > 0.0);
            }
        }
    }
}
