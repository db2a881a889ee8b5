//! Similarity alignment and reconstruction error metrics.

use log::warn;
use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvaluationError {
    #[error("point sets differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("point configuration is degenerate (collinear or coincident)")]
    Degenerate,
    #[error("non-finite input")]
    NonFinite,
}

/// Similarity transform `x ↦ s R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Alignment {
    pub rotation: Matrix3<f64>,
    pub scale: f64,
    pub translation: Vector3<f64>,
}

impl Alignment {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            scale: 1.0,
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * x) + self.translation
    }

    /// `Σ ‖s R p + t - g‖²`
    pub fn objective(&self, recon: &[Vector3<f64>], gt: &[Vector3<f64>]) -> f64 {
        recon
            .iter()
            .zip(gt)
            .map(|(p, g)| (self.apply(p) - g).norm_squared())
            .sum()
    }
}

fn centroid(points: &[Vector3<f64>]) -> Vector3<f64> {
    points.iter().sum::<Vector3<f64>>() / points.len() as f64
}

/// Closed-form least-squares similarity taking `recon` onto `gt`, with a
/// proper rotation (det = +1).
pub fn absor_align(
    recon: &[Vector3<f64>],
    gt: &[Vector3<f64>],
) -> Result<Alignment, EvaluationError> {
    if recon.len() != gt.len() {
        return Err(EvaluationError::LengthMismatch(recon.len(), gt.len()));
    }
    if recon.len() < 3 {
        return Err(EvaluationError::TooFewPoints(recon.len()));
    }
    if recon
        .iter()
        .chain(gt)
        .any(|p| !p.iter().all(|c| c.is_finite()))
    {
        return Err(EvaluationError::NonFinite);
    }
    let (mr, mg) = (centroid(recon), centroid(gt));
    let mut cov = Matrix3::zeros();
    let mut var_r = 0.0;
    for (p, g) in recon.iter().zip(gt) {
        let (a, b) = (p - mr, g - mg);
        cov += b * a.transpose();
        var_r += a.norm_squared();
    }
    for set in [recon, gt] {
        let m = centroid(set);
        let spread: Matrix3<f64> = set.iter().map(|p| (p - m) * (p - m).transpose()).sum();
        let eig = spread.symmetric_eigenvalues();
        let mut ev: Vec<f64> = eig.iter().copied().collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        if !(ev[0] > 0.0) || ev[1] <= 1e-12 * ev[0] {
            return Err(EvaluationError::Degenerate);
        }
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rotation = u * d * vt;
    let trace: f64 = (0..3).map(|i| svd.singular_values[i] * d[(i, i)]).sum();
    let scale = trace / var_r;
    if !(scale > 0.0) {
        return Err(EvaluationError::Degenerate);
    }
    let translation = mg - scale * rotation * mr;
    Ok(Alignment {
        rotation,
        scale,
        translation,
    })
}

/// `100 · RMSE / RMS(‖g - centroid(g)‖)` after similarity alignment.
pub fn percent_3d_error(
    recon: &[Vector3<f64>],
    gt: &[Vector3<f64>],
) -> Result<f64, EvaluationError> {
    let a = absor_align(recon, gt)?;
    let n = gt.len() as f64;
    let rmse = (a.objective(recon, gt) / n).sqrt();
    let mg = centroid(gt);
    let spread = (gt.iter().map(|g| (g - mg).norm_squared()).sum::<f64>() / n).sqrt();
    Ok(100.0 * rmse / spread)
}

/// Mean of `arccos |n_r · n_g|` in degrees. Non-unit inputs are normalised.
pub fn shape_error(recon: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<f64, EvaluationError> {
    if recon.len() != gt.len() {
        return Err(EvaluationError::LengthMismatch(recon.len(), gt.len()));
    }
    if recon.is_empty() {
        return Err(EvaluationError::TooFewPoints(0));
    }
    let mut renormalised = 0;
    let mut unit = |n: &Vector3<f64>| -> Result<Vector3<f64>, EvaluationError> {
        let len = n.norm();
        if !(len > 0.0 && len.is_finite()) {
            return Err(EvaluationError::NonFinite);
        }
        if (len - 1.0).abs() > 1e-10 {
            renormalised += 1;
        }
        Ok(n / len)
    };
    let mut total = 0.0;
    for (r, g) in recon.iter().zip(gt) {
        let c = unit(r)?.dot(&unit(g)?).abs().min(1.0);
        total += c.acos().to_degrees();
    }
    if renormalised > 0 {
        warn!("{renormalised} non-unit normals were renormalised");
    }
    Ok(total / recon.len() as f64)
}
