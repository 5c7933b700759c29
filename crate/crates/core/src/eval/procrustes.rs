//! Similarity (Umeyama) alignment and the rest-pose shape error.

use nalgebra::{Matrix3, Vector3};

use crate::bodymodel::{rest_joints, Joints3D, ShapeParams, NUM_KEYPOINTS};
use crate::error::{Error, Result};

/// Rotation, uniform scale and translation mapping one point set onto another.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub rotation: Matrix3<f64>,
    pub scale: f64,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p * self.scale + self.translation
    }
}

/// Least-squares similarity taking `source` onto `target`, reflections excluded.
pub fn align(source: &[Vector3<f64>], target: &[Vector3<f64>]) -> Result<Similarity> {
    if source.len() != target.len() {
        return Err(Error::DimensionMismatch(format!("{} vs {} points", source.len(), target.len())));
    }
    if source.len() < 3 {
        return Err(Error::DegenerateGeometry("fewer than three points"));
    }
    let n = source.len() as f64;
    let mu_s = source.iter().sum::<Vector3<f64>>() / n;
    let mu_t = target.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, t) in source.iter().zip(target) {
        let (ds, dt) = (s - mu_s, t - mu_t);
        cov += dt * ds.transpose();
        var_s += ds.norm_squared();
    }
    cov /= n;
    var_s /= n;

    let spread = |pts: &[Vector3<f64>], mu: &Vector3<f64>| {
        let mut m = Matrix3::zeros();
        for p in pts {
            m += (p - mu) * (p - mu).transpose();
        }
        let mut sv = m.symmetric_eigenvalues();
        sv.as_mut_slice().sort_by(|a, b| b.total_cmp(a));
        sv
    };
    for (pts, mu) in [(source, &mu_s), (target, &mu_t)] {
        let ev = spread(pts, mu);
        if ev[0] <= 1e-18 {
            return Err(Error::DegenerateGeometry("coincident points"));
        }
        if ev[1] <= 1e-12 * ev[0] {
            return Err(Error::DegenerateGeometry("collinear points"));
        }
    }

    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if u.determinant() * v_t.determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rotation = u * d * v_t;
    let scale = (svd.singular_values.component_mul(&d.diagonal())).sum() / var_s;
    let translation = mu_t - rotation * mu_s * scale;
    Ok(Similarity {
        rotation,
        scale,
        translation,
    })
}

/// Root-mean-square per-point distance after aligning `fitted` onto `truth`.
pub fn procrustes_points(fitted: &[Vector3<f64>], truth: &[Vector3<f64>]) -> Result<f64> {
    let sim = align(fitted, truth)?;
    let sum: f64 = fitted
        .iter()
        .zip(truth)
        .map(|(f, t)| (sim.apply(f) - t).norm_squared())
        .sum();
    Ok((sum / fitted.len() as f64).sqrt())
}

/// Procrustes error over the observable joints, in cm.
pub fn procrustes_error(fitted: &Joints3D, truth: &Joints3D) -> Result<f64> {
    procrustes_points(&fitted.points[..NUM_KEYPOINTS], &truth.points[..NUM_KEYPOINTS])
}

/// Pose-independent shape error: Procrustes error between rest-pose joints.
pub fn shape_error(beta_fit: &ShapeParams, beta_gt: &ShapeParams) -> Result<f64> {
    procrustes_error(&rest_joints(beta_fit), &rest_joints(beta_gt))
}
