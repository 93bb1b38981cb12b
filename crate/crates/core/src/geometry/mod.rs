//! Point-set kernels and the patch machinery used for training and inference.

mod augment;
pub mod io;
mod knn;
mod mesh;
mod patches;
mod sampling;

pub use augment::{augment, AugmentConfig};
pub use knn::{knn, knn_brute_force, knn_rows, GRID_THRESHOLD};
pub use mesh::{closest_point_on_triangle, Mesh};
pub use patches::{default_num_seeds, extract_patches, merge_patches, patch_coverage, Patch};
pub use sampling::{
    farthest_point_sample, poisson_like_sample, random_subsample, sample_mesh_uniform,
    DEFAULT_OVERSAMPLE,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type Point3 = [f64; 3];

#[inline]
pub fn sub(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn dot(a: Point3, b: Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: Point3, b: Point3) -> Point3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm(a: Point3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn sq_dist(a: Point3, b: Point3) -> f64 {
    let d = sub(a, b);
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// A non-empty set of finite 3D points.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("point cloud must contain at least one point"));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("point cloud contains non-finite coordinates"));
        }
        Ok(PointCloud { points })
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn into_points(self) -> Vec<Point3> {
        self.points
    }

    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
        }
    }

    /// `[M, 3]` tensor of the coordinates.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.points.len(), 3],
            self.points.iter().flatten().copied().collect(),
        )
        .expect("point cloud is non-empty")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.shape().len() != 2 || t.shape()[1] != 3 {
            return Err(Error::ShapeMismatch {
                op: "point cloud from tensor",
                left: t.shape().to_vec(),
                right: vec![0, 3],
            });
        }
        PointCloud::new(t.data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn centroid(&self) -> Point3 {
        let n = self.points.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for a in 0..3 {
                c[a] += p[a];
            }
        }
        c.map(|v| v / n)
    }
}

/// Centre and radius used to map a patch into the unit ball and back.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormRecord {
    pub center: Point3,
    pub radius: f64,
}

impl NormRecord {
    pub fn apply(&self, cloud: &PointCloud) -> PointCloud {
        PointCloud {
            points: cloud
                .points
                .iter()
                .map(|&p| sub(p, self.center).map(|v| v / self.radius))
                .collect(),
        }
    }

    pub fn invert(&self, cloud: &PointCloud) -> PointCloud {
        PointCloud {
            points: cloud
                .points
                .iter()
                .map(|p| {
                    [
                        p[0] * self.radius + self.center[0],
                        p[1] * self.radius + self.center[1],
                        p[2] * self.radius + self.center[2],
                    ]
                })
                .collect(),
        }
    }
}

/// Translates the centroid to the origin and scales the farthest point onto
/// the unit sphere. A cloud of identical points keeps radius 1.
pub fn normalize_to_unit_sphere(cloud: &PointCloud) -> (PointCloud, NormRecord) {
    let center = cloud.centroid();
    let radius = cloud
        .points
        .iter()
        .map(|&p| norm(sub(p, center)))
        .fold(0.0, f64::max);
    let radius = if radius > 0.0 { radius } else { 1.0 };
    let record = NormRecord { center, radius };
    (record.apply(cloud), record)
}
