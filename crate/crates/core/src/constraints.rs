//! Residual equations linking a surface point seen in two frames.
//!
//! With `J` the warp Jacobian from the source pixel `p` to the destination
//! pixel `η(p)`, `J3 = diag(J, det J)` and `Λ = diag(λ, λ, λ²)`, a conformal
//! deformation satisfies
//!
//! * metric preservation: `G_src = λ² Jᵀ G_dst J` with `G = (e1 e2)ᵀ(e1 e2)`;
//! * connection transport, for each source axis `k`:
//!   `J3 Λ Γ_k(src) Λ⁻¹ = (Γ_u(dst) J[0,k] + Γ_v(dst) J[1,k]) J3 + ∂J3/∂p_k`.
//!
//! λ is the ratio of source to destination length, so two balls of radii
//! `R_src` and `R_dst` are related by `λ = R_src / R_dst`.

use nalgebra::{Matrix2, Matrix3};
use thiserror::Error;

use crate::geometry::{connection, moving_frame, DepthJet, GeometryError, PixelPoint};
use crate::spline::WarpJet;

/// Terms of the closed-form λ with smaller denominators are dropped.
pub const SCALE_DENOMINATOR_TOLERANCE: f64 = 1e-10;
/// Added to `|LHS|` before normalising a residual.
pub const LHS_NORMALIZER_FLOOR: f64 = 1e-6;
/// Number of metric residuals per (point, edge).
pub const METRIC_LEN: usize = 3;
/// Number of connection residuals per (point, edge).
pub const CONNECTION_LEN: usize = 18;
/// Total residuals per (point, edge).
pub const BLOCK_LEN: usize = METRIC_LEN + CONNECTION_LEN;

/// Flattened connection entries whose value does not depend on λ: the
/// upper-left 2×2 block and the (3,3) entry of both identities.
pub const LAMBDA_FREE_ENTRIES: [usize; 10] = [0, 1, 3, 4, 8, 9, 10, 12, 13, 17];
/// The remaining connection entries.
pub const LAMBDA_SENSITIVE_ENTRIES: [usize; 8] = [2, 5, 6, 7, 11, 14, 15, 16];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConstraintError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("conformal scale must be positive and finite, got {0}")]
    InvalidScale(f64),
    #[error("every closed-form scale term is degenerate")]
    DegenerateScale,
}

#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct ConformalScale(f64);

impl ConformalScale {
    pub const ONE: ConformalScale = ConformalScale(1.0);

    pub fn new(lambda: f64) -> Result<Self, ConstraintError> {
        if lambda.is_finite() && lambda > 0.0 {
            Ok(Self(lambda))
        } else {
            Err(ConstraintError::InvalidScale(lambda))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Both frames' data at one matched point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgePoint<'a> {
    /// Pixel in the source frame.
    pub pixel: PixelPoint,
    pub jet_src: &'a DepthJet,
    /// Jet at the warped pixel in the destination frame.
    pub jet_dst: &'a DepthJet,
    pub warp: &'a WarpJet,
}

/// The 21 weighted residuals of one (point, edge) pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgePointResidual {
    pub metric: [f64; METRIC_LEN],
    pub connection: [f64; CONNECTION_LEN],
    pub weight: f64,
}

impl EdgePointResidual {
    pub fn to_array(&self) -> [f64; BLOCK_LEN] {
        let mut out = [0.0; BLOCK_LEN];
        out[..METRIC_LEN].copy_from_slice(&self.metric);
        out[METRIC_LEN..].copy_from_slice(&self.connection);
        out
    }

    pub fn norm(&self) -> f64 {
        self.to_array().iter().map(|r| r * r).sum::<f64>().sqrt()
    }
}

fn first_fundamental_form(p: &PixelPoint, jet: &DepthJet) -> Matrix2<f64> {
    let f = moving_frame(p, jet);
    Matrix2::new(
        f.e1.dot(&f.e1),
        f.e1.dot(&f.e2),
        f.e2.dot(&f.e1),
        f.e2.dot(&f.e2),
    )
}

/// `(G_src, Jᵀ G_dst J)`
fn metric_pair(ep: &EdgePoint) -> (Matrix2<f64>, Matrix2<f64>) {
    let g_src = first_fundamental_form(&ep.pixel, ep.jet_src);
    let g_dst = first_fundamental_form(&ep.warp.warped, ep.jet_dst);
    let j = ep.warp.jacobian;
    (g_src, j.transpose() * g_dst * j)
}

pub fn metric_residuals(ep: &EdgePoint, lambda: ConformalScale) -> [f64; METRIC_LEN] {
    let (g_src, g_dst) = metric_pair(ep);
    let d = g_src - lambda.value().powi(2) * g_dst;
    [d[(0, 0)], d[(0, 1)], d[(1, 1)]]
}

/// Ingredients of both connection identities, kept apart so that entries
/// can be assembled with λ applied exactly where it belongs.
struct ConnectionTerms {
    gamma_src: [Matrix3<f64>; 2],
    /// `Γ_u(dst) J[0,k] + Γ_v(dst) J[1,k]`
    transported: [Matrix3<f64>; 2],
    jacobian: Matrix2<f64>,
    det: f64,
    rhs: [Matrix3<f64>; 2],
}

impl ConnectionTerms {
    fn new(ep: &EdgePoint) -> Result<Self, ConstraintError> {
        let gamma_src = connection(&ep.pixel, ep.jet_src)?.blocks();
        let [gu, gv] = connection(&ep.warp.warped, ep.jet_dst)?.blocks();
        let j = ep.warp.jacobian;
        let transported = [
            gu * j[(0, 0)] + gv * j[(1, 0)],
            gu * j[(0, 1)] + gv * j[(1, 1)],
        ];
        let lifted = ep.warp.lifted;
        let rhs = [
            transported[0] * lifted + ep.warp.d_lifted[0],
            transported[1] * lifted + ep.warp.d_lifted[1],
        ];
        Ok(Self {
            gamma_src,
            transported,
            jacobian: j,
            det: ep.warp.determinant(),
            rhs,
        })
    }

    /// `J3 Λ Γ_k Λ⁻¹`, evaluated blockwise so that λ-free entries never
    /// touch λ.
    fn lhs(&self, k: usize, lambda: f64) -> Matrix3<f64> {
        let g = &self.gamma_src[k];
        let j = &self.jacobian;
        let mut out = Matrix3::zeros();
        for r in 0..2 {
            for c in 0..2 {
                out[(r, c)] = j[(r, 0)] * g[(0, c)] + j[(r, 1)] * g[(1, c)];
            }
            out[(r, 2)] = (j[(r, 0)] * g[(0, 2)] + j[(r, 1)] * g[(1, 2)]) / lambda;
        }
        out[(2, 0)] = self.det * g[(2, 0)] * lambda;
        out[(2, 1)] = self.det * g[(2, 1)] * lambda;
        out[(2, 2)] = self.det * g[(2, 2)];
        out
    }

    fn residuals(&self, lambda: f64) -> [f64; CONNECTION_LEN] {
        let mut out = [0.0; CONNECTION_LEN];
        for k in 0..2 {
            let d = self.lhs(k, lambda) - self.rhs[k];
            for r in 0..3 {
                for c in 0..3 {
                    out[9 * k + 3 * r + c] = d[(r, c)];
                }
            }
        }
        out
    }

    /// The eight single-entry λ estimates; `None` where the denominator is
    /// degenerate.
    fn lambda_terms(&self) -> [Option<f64>; 8] {
        let mut out = [None; 8];
        let j = &self.jacobian;
        let ok = |d: f64| d.abs() >= SCALE_DENOMINATOR_TOLERANCE;
        for k in 0..2 {
            let g = &self.gamma_src[k];
            let m = &self.transported[k];
            for c in 0..2 {
                // row 3: det λ Γ[2,c] = (M[2,0:2] J)[c]
                let num = m[(2, 0)] * j[(0, c)] + m[(2, 1)] * j[(1, c)];
                let den = self.det * g[(2, c)];
                out[4 * k + c] = ok(den).then(|| num / den);
            }
            for r in 0..2 {
                // column 3: (J Γ[0:2,2])[r] / λ = M[r,2] det
                let num = j[(r, 0)] * g[(0, 2)] + j[(r, 1)] * g[(1, 2)];
                let den = m[(r, 2)] * self.det;
                out[4 * k + 2 + r] = ok(den).then(|| num / den);
            }
        }
        out
    }
}

/// Left- and right-hand sides of both connection identities.
pub fn connection_sides(
    ep: &EdgePoint,
    lambda: ConformalScale,
) -> Result<[(Matrix3<f64>, Matrix3<f64>); 2], ConstraintError> {
    let t = ConnectionTerms::new(ep)?;
    Ok([0, 1].map(|k| (t.lhs(k, lambda.value()), t.rhs[k])))
}

pub fn connection_residuals(
    ep: &EdgePoint,
    lambda: ConformalScale,
) -> Result<[f64; CONNECTION_LEN], ConstraintError> {
    Ok(ConnectionTerms::new(ep)?.residuals(lambda.value()))
}

/// Metric and connection residuals scaled by `sqrt(omega)`.
pub fn residual_block(
    ep: &EdgePoint,
    lambda: ConformalScale,
    omega: f64,
) -> Result<EdgePointResidual, ConstraintError> {
    let w = omega.max(0.0).sqrt();
    let mut metric = metric_residuals(ep, lambda);
    let mut conn = connection_residuals(ep, lambda)?;
    metric
        .iter_mut()
        .chain(conn.iter_mut())
        .for_each(|r| *r *= w);
    Ok(EdgePointResidual {
        metric,
        connection: conn,
        weight: omega,
    })
}

/// `1 / (|LHS| + 1e-6)` for each of the 21 residuals, with the left-hand
/// sides taken at the given state. Multiplying residuals by these factors
/// puts entries of different units on a common relative scale.
pub fn lhs_normalizers(
    ep: &EdgePoint,
    lambda: ConformalScale,
) -> Result<[f64; BLOCK_LEN], ConstraintError> {
    let (g_src, _) = metric_pair(ep);
    let t = ConnectionTerms::new(ep)?;
    let mut out = [0.0; BLOCK_LEN];
    out[0] = g_src[(0, 0)];
    out[1] = g_src[(0, 1)];
    out[2] = g_src[(1, 1)];
    for k in 0..2 {
        let l = t.lhs(k, lambda.value());
        for r in 0..3 {
            for c in 0..3 {
                out[METRIC_LEN + 9 * k + 3 * r + c] = l[(r, c)];
            }
        }
    }
    Ok(out.map(|v| 1.0 / (v.abs() + LHS_NORMALIZER_FLOOR)))
}

/// The λ-free connection entries, in [`LAMBDA_FREE_ENTRIES`] order. The
/// λ argument is accepted for symmetry with the other residuals and has no
/// influence on the result.
pub fn corollary1_invariants(
    ep: &EdgePoint,
    lambda: ConformalScale,
) -> Result<[f64; 10], ConstraintError> {
    let all = connection_residuals(ep, lambda)?;
    Ok(LAMBDA_FREE_ENTRIES.map(|i| all[i]))
}

/// Metric residuals followed by the λ-sensitive connection entries.
pub fn lambda_sensitive_residuals(
    ep: &EdgePoint,
    lambda: ConformalScale,
) -> Result<[f64; METRIC_LEN + 8], ConstraintError> {
    let metric = metric_residuals(ep, lambda);
    let conn = connection_residuals(ep, lambda)?;
    let mut out = [0.0; METRIC_LEN + 8];
    out[..METRIC_LEN].copy_from_slice(&metric);
    for (o, i) in out[METRIC_LEN..].iter_mut().zip(LAMBDA_SENSITIVE_ENTRIES) {
        *o = conn[i];
    }
    Ok(out)
}

/// Average of the eight single-entry solutions of the λ-sensitive
/// connection equations. Degenerate terms are skipped.
pub fn closed_form_lambda(ep: &EdgePoint) -> Result<ConformalScale, ConstraintError> {
    let terms = ConnectionTerms::new(ep)?.lambda_terms();
    let valid: Vec<f64> = terms.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(ConstraintError::DegenerateScale);
    }
    ConformalScale::new(valid.iter().sum::<f64>() / valid.len() as f64)
        .map_err(|_| ConstraintError::DegenerateScale)
}

/// λ² estimates from the metric: ratios of matching entries of the two
/// first fundamental forms, square-rooted.
fn metric_lambda_terms(ep: &EdgePoint) -> [Option<f64>; 3] {
    let (g_src, g_dst) = metric_pair(ep);
    let scale = g_src.abs().max().max(g_dst.abs().max());
    [(0, 0), (0, 1), (1, 1)].map(|ix| {
        let (a, b) = (g_src[ix], g_dst[ix]);
        let ratio = a / b;
        (b.abs() > 1e-8 * scale && ratio > 0.0 && ratio.is_finite()).then(|| ratio.sqrt())
    })
}

/// Mean of up to eleven λ estimates: three from the metric and eight from
/// the connection. Degenerate or non-positive estimates are skipped.
pub fn prestep_lambda(ep: &EdgePoint) -> Result<ConformalScale, ConstraintError> {
    let metric = metric_lambda_terms(ep);
    let conn = match ConnectionTerms::new(ep) {
        Ok(t) => t.lambda_terms(),
        Err(_) => [None; 8],
    };
    let valid: Vec<f64> = metric
        .iter()
        .chain(conn.iter())
        .flatten()
        .copied()
        .filter(|l| l.is_finite() && *l > 0.0)
        .collect();
    if valid.is_empty() {
        return Err(ConstraintError::DegenerateScale);
    }
    ConformalScale::new(valid.iter().sum::<f64>() / valid.len() as f64)
}
