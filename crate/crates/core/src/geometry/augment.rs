use rand::Rng;

use super::{PointCloud, Point3};
use crate::error::{Error, Result};

/// Ranges for the joint random similarity transform applied to training pairs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub rotate: bool,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Per-axis shift is drawn from `[-shift, shift]`.
    pub shift: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotate: true,
            scale_min: 0.8,
            scale_max: 1.2,
            shift: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        AugmentConfig {
            rotate: false,
            scale_min: 1.0,
            scale_max: 1.0,
            shift: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale_min > 0.0) || !(self.scale_max >= self.scale_min) || !self.scale_max.is_finite() {
            return Err(Error::invalid(format!(
                "augmentation scale range [{}, {}] is invalid",
                self.scale_min, self.scale_max
            )));
        }
        if !(self.shift >= 0.0) || !self.shift.is_finite() {
            return Err(Error::invalid("augmentation shift bound must be >= 0"));
        }
        Ok(())
    }
}

/// Uniformly distributed rotation matrix from a random unit quaternion.
fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> [[f64; 3]; 3] {
    let (u1, u2, u3): (f64, f64, f64) = (rng.gen(), rng.gen(), rng.gen());
    let tau = std::f64::consts::TAU;
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let (w, x, y, z) = (
        a * (tau * u2).sin(),
        a * (tau * u2).cos(),
        b * (tau * u3).sin(),
        b * (tau * u3).cos(),
    );
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - z * w), 2.0 * (x * z + y * w)],
        [2.0 * (x * y + z * w), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - x * w)],
        [2.0 * (x * z - y * w), 2.0 * (y * z + x * w), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Draws one rotation, scale and translation and applies the same transform
/// to both clouds.
pub fn augment<R: Rng + ?Sized>(
    input: &PointCloud,
    gt: &PointCloud,
    rng: &mut R,
    cfg: &AugmentConfig,
) -> Result<(PointCloud, PointCloud)> {
    cfg.validate()?;
    let rot = if cfg.rotate {
        Some(random_rotation(rng))
    } else {
        None
    };
    let scale = if cfg.scale_max > cfg.scale_min {
        rng.gen_range(cfg.scale_min..=cfg.scale_max)
    } else {
        cfg.scale_min
    };
    let shift: Point3 = if cfg.shift > 0.0 {
        [0, 1, 2].map(|_| rng.gen_range(-cfg.shift..=cfg.shift))
    } else {
        [0.0; 3]
    };
    let apply = |p: &Point3| -> Point3 {
        let r = match rot {
            Some(m) => [0, 1, 2].map(|i| m[i][0] * p[0] + m[i][1] * p[1] + m[i][2] * p[2]),
            None => *p,
        };
        [0, 1, 2].map(|i| r[i] * scale + shift[i])
    };
    if rot.is_none() && scale == 1.0 && shift == [0.0; 3] {
        return Ok((input.clone(), gt.clone()));
    }
    Ok((
        PointCloud::new(input.points().iter().map(apply).collect())?,
        PointCloud::new(gt.points().iter().map(apply).collect())?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::sq_dist;
    use crate::rng::rng_from;

    fn cloud(seed: u64, n: usize) -> PointCloud {
        let mut rng = rng_from(seed);
        PointCloud::new((0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect()).unwrap()
    }

    fn distances(c: &PointCloud) -> Vec<f64> {
        let p = c.points();
        let mut out = Vec::new();
        for i in 0..p.len() {
            for j in i + 1..p.len() {
                out.push(sq_dist(p[i], p[j]).sqrt());
            }
        }
        out
    }

    #[test]
    fn identity_config_is_noop() {
        let a = cloud(1, 10);
        let b = cloud(2, 30);
        let (x, y) = augment(&a, &b, &mut rng_from(0), &AugmentConfig::identity()).unwrap();
        assert_eq!((x, y), (a, b));
    }

    #[test]
    fn rotation_is_an_isometry() {
        let a = cloud(3, 20);
        let cfg = AugmentConfig {
            rotate: true,
            ..AugmentConfig::identity()
        };
        let (x, _) = augment(&a, &a, &mut rng_from(5), &cfg).unwrap();
        for (d0, d1) in distances(&a).iter().zip(distances(&x)) {
            assert!((d0 - d1).abs() < 1e-12);
        }
    }

    #[test]
    fn distances_scale_by_drawn_factor_jointly() {
        let a = cloud(3, 12);
        let b = cloud(4, 12);
        let (x, y) = augment(&a, &b, &mut rng_from(6), &AugmentConfig::default()).unwrap();
        let ratio = distances(&x)[0] / distances(&a)[0];
        assert!((0.8..=1.2).contains(&ratio));
        for (d0, d1) in distances(&a).iter().zip(distances(&x)) {
            assert!((d1 - ratio * d0).abs() < 1e-12);
        }
        for (d0, d1) in distances(&b).iter().zip(distances(&y)) {
            assert!((d1 - ratio * d0).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_ranges_rejected() {
        let a = cloud(3, 4);
        let bad = AugmentConfig {
            scale_min: 0.0,
            ..AugmentConfig::default()
        };
        assert!(augment(&a, &a, &mut rng_from(0), &bad).is_err());
        let bad = AugmentConfig {
            shift: -1.0,
            ..AugmentConfig::default()
        };
        assert!(augment(&a, &a, &mut rng_from(0), &bad).is_err());
    }
}
