//! Coordinate regression heads, the multi-scale training loss and the
//! evaluation metrics (Chamfer, Hausdorff, point-to-surface).

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{knn, sq_dist, Mesh, Point3};
use crate::nn::{Linear, ParamBuilder};
use crate::tensor::{Tape, Var};

/// `C2 -> hidden -> 3` regression head for one output scale.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl HeadParams {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, channels: usize, hidden: usize) -> Self {
        b.scoped(name, |b| HeadParams {
            fc1: Linear::new(b, "fc1", channels, hidden, true),
            fc2: Linear::new(b, "fc2", hidden, 3, true),
        })
    }
}

/// Features `[M, C2]` to coordinates `[M, 3]`; no output activation.
pub fn reconstruct(tape: &mut Tape, vars: &[Var], features: Var, head: &HeadParams) -> Result<Var> {
    let h = head.fc1.forward(tape, vars, features)?;
    let h = tape.relu(h);
    head.fc2.forward(tape, vars, h)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Per-scale weights, finest scale last.
    pub alphas: Vec<f64>,
    pub lambda: f64,
    pub repulsion_k: usize,
    pub repulsion_h: f64,
}

impl LossConfig {
    /// `[1.0]` for one level, `[0.6, 1.0]` for two; deeper pyramids weight the
    /// top three scales `0.6, 0.8, 1.0` and leave the coarser ones at 0.
    pub fn default_alphas(levels: usize) -> Vec<f64> {
        match levels {
            0 => Vec::new(),
            1 => vec![1.0],
            2 => vec![0.6, 1.0],
            l => {
                let mut a = vec![0.0; l - 3];
                a.extend_from_slice(&[0.6, 0.8, 1.0]);
                a
            }
        }
    }

    pub fn for_levels(levels: usize) -> Self {
        LossConfig {
            alphas: Self::default_alphas(levels),
            lambda: 0.02,
            repulsion_k: 5,
            repulsion_h: 0.03,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if self.alphas.is_empty() || !self.alphas.iter().all(|&a| unit(a)) || !unit(self.lambda) {
            return Err(Error::Config(format!(
                "loss weights must lie in [0, 1]: alphas {:?}, lambda {}",
                self.alphas, self.lambda
            )));
        }
        if self.repulsion_k == 0 || !(self.repulsion_h > 0.0) {
            return Err(Error::Config("repulsion needs K > 0 and h > 0".into()));
        }
        Ok(())
    }
}

pub struct JointLoss {
    pub total: Var,
    /// Chamfer distance of every scale against the ground truth.
    pub chamfer: Vec<Var>,
}

/// `Σ_i α_i · (CD(Q, Q̂_i) + λ · L_rep(Q̂_i))`; every scale is compared with
/// the full-resolution ground truth.
pub fn joint_loss(tape: &mut Tape, gt: Var, preds: &[Var], cfg: &LossConfig) -> Result<JointLoss> {
    if preds.len() != cfg.alphas.len() || preds.is_empty() {
        return Err(Error::invalid(format!(
            "{} predictions but {} scale weights",
            preds.len(),
            cfg.alphas.len()
        )));
    }
    let mut total: Option<Var> = None;
    let mut chamfer = Vec::with_capacity(preds.len());
    for (&pred, &alpha) in preds.iter().zip(&cfg.alphas) {
        let cd = tape.chamfer(gt, pred)?;
        chamfer.push(cd);
        if alpha == 0.0 {
            continue;
        }
        let mut term = cd;
        if cfg.lambda != 0.0 {
            let rep = tape.repulsion(pred, cfg.repulsion_k, cfg.repulsion_h)?;
            let rep = tape.scale(rep, cfg.lambda);
            term = tape.add(term, rep)?;
        }
        let term = tape.scale(term, alpha);
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    let total = match total {
        Some(t) => t,
        None => tape.scale(chamfer[0], 0.0),
    };
    Ok(JointLoss { total, chamfer })
}

fn nonempty(a: &[Point3], b: &[Point3]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("metric needs two non-empty point sets"));
    }
    Ok(())
}

/// Squared distance from every point of `from` to its nearest point in `to`.
fn nearest_sq(from: &[Point3], to: &[Point3]) -> Result<Vec<f64>> {
    let nn = knn(to, from, 1)?;
    Ok(from.iter().zip(nn).map(|(p, i)| sq_dist(*p, to[i[0]])).collect())
}

/// Mean squared nearest-neighbour distance in each direction, summed.
pub fn chamfer_distance(a: &[Point3], b: &[Point3]) -> Result<f64> {
    nonempty(a, b)?;
    let ab: f64 = nearest_sq(a, b)?.iter().sum();
    let ba: f64 = nearest_sq(b, a)?.iter().sum();
    Ok(ab / a.len() as f64 + ba / b.len() as f64)
}

/// Symmetric Hausdorff distance (unsquared).
pub fn hausdorff_distance(a: &[Point3], b: &[Point3]) -> Result<f64> {
    nonempty(a, b)?;
    let ab = nearest_sq(a, b)?.into_iter().fold(0.0, f64::max);
    let ba = nearest_sq(b, a)?.into_iter().fold(0.0, f64::max);
    Ok(ab.max(ba).sqrt())
}

/// Mean Euclidean distance from the points to the mesh surface.
pub fn point_to_surface(points: &[Point3], mesh: &Mesh) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::invalid("point-to-surface needs at least one point"));
    }
    if mesh.triangles().is_empty() {
        return Err(Error::invalid("point-to-surface needs a non-empty mesh"));
    }
    let d: Vec<f64> = points
        .par_iter()
        .map(|&p| mesh.distance_to(p))
        .collect::<Result<_>>()?;
    Ok(d.iter().sum::<f64>() / points.len() as f64)
}
