//! Depth up to scale from the normalised depth gradient, and unit normals.
//!
//! Since `y1 = ∂ ln β / ∂u` and `y2 = ∂ ln β / ∂v`, integrating the field
//! `(y1, y2)` gives `ln β` up to an additive constant. The constant is fixed
//! by requiring the mean log-depth over the input points to be zero.

use nalgebra::Vector3;
use thiserror::Error;

use crate::geometry::{moving_frame, DepthJet, GeometryError, PixelPoint};
use crate::spline::{fit_gradient_surface, SplineError, SplineGrid, SurfaceJet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DepthError {
    #[error("normal is undefined (|e3| = {0:.3e})")]
    DegenerateNormal(f64),
    #[error("need at least 3 non-collinear points, got {0}")]
    TooFewPoints(usize),
    #[error("input points are collinear")]
    Collinear,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error("no candidate grid and smoothing gives a well-posed fit")]
    NoValidSettings,
}

/// Unit normal `e3 / |e3|` of the surface described by `jet` at `p`.
pub fn normal_from_jet(p: &PixelPoint, jet: &DepthJet) -> Result<Vector3<f64>, DepthError> {
    jet.validate()?;
    let e3 = moving_frame(p, jet).e3;
    let n = e3.norm();
    if !(n >= 1e-12) {
        return Err(DepthError::DegenerateNormal(n));
    }
    Ok(e3 / n)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormalField {
    pub entries: Vec<(PixelPoint, Vector3<f64>)>,
}

impl NormalField {
    pub fn from_jets<'a>(
        samples: impl IntoIterator<Item = (PixelPoint, &'a DepthJet)>,
    ) -> Result<Self, DepthError> {
        let entries = samples
            .into_iter()
            .map(|(p, j)| Ok((p, normal_from_jet(&p, j)?)))
            .collect::<Result<_, DepthError>>()?;
        Ok(Self { entries })
    }
}

/// Result of [`integrate_log_depth`].
#[derive(Clone, Debug, PartialEq)]
pub struct IntegratedDepth {
    /// Depth per input point, with mean log-depth zero.
    pub beta: Vec<f64>,
    /// RMS mismatch between the fitted and the input gradient.
    pub gradient_residual: f64,
    /// Fitted log-depth and its derivatives at each input point.
    pub log_depth: Vec<SurfaceJet>,
}

fn check_spread(points: &[(PixelPoint, f64, f64)]) -> Result<(), DepthError> {
    if points.len() < 3 {
        return Err(DepthError::TooFewPoints(points.len()));
    }
    let n = points.len() as f64;
    let (mu, mv) = points
        .iter()
        .fold((0.0, 0.0), |(a, b), (p, _, _)| (a + p.u / n, b + p.v / n));
    let (mut suu, mut suv, mut svv) = (0.0, 0.0, 0.0);
    for (p, _, _) in points {
        let (du, dv) = (p.u - mu, p.v - mv);
        suu += du * du;
        suv += du * dv;
        svv += dv * dv;
    }
    let det = suu * svv - suv * suv;
    let tr = suu + svv;
    if !(det > 1e-12 * tr * tr) {
        return Err(DepthError::Collinear);
    }
    Ok(())
}

/// Fits `L(u, v)` with `∇L ≈ (y1, y2)` at the samples and returns
/// `β = exp(L - mean L)` at each sample.
pub fn integrate_log_depth(
    points: &[(PixelPoint, f64, f64)],
    grid: SplineGrid,
    smoothing: f64,
) -> Result<IntegratedDepth, DepthError> {
    check_spread(points)?;
    integrate_weighted(points, &vec![1.0; points.len()], grid, smoothing)
}

fn integrate_weighted(
    points: &[(PixelPoint, f64, f64)],
    weights: &[f64],
    grid: SplineGrid,
    smoothing: f64,
) -> Result<IntegratedDepth, DepthError> {
    let fit = fit_gradient_surface(points, weights, grid, smoothing)?;
    let log_depth: Vec<SurfaceJet> = points
        .iter()
        .map(|(p, _, _)| fit.surface.evaluate_unchecked(p))
        .collect();
    let mean = log_depth.iter().map(|l| l.value).sum::<f64>() / log_depth.len() as f64;
    Ok(IntegratedDepth {
        beta: log_depth.iter().map(|l| (l.value - mean).exp()).collect(),
        gradient_residual: fit.residual_rms,
        log_depth,
    })
}

/// Picks the grid and smoothing of the depth integration by k-fold cross
/// validation, scoring each candidate by the median held-out gradient
/// misfit so that a minority of wrong gradients cannot steer the choice.
///
/// Folds are assigned round-robin. Candidates whose fit is ill-posed on
/// some fold are skipped; ties keep the earlier candidate.
pub fn cross_validate_integration(
    points: &[(PixelPoint, f64, f64)],
    grids: &[SplineGrid],
    smoothings: &[f64],
    folds: usize,
) -> Result<(SplineGrid, f64), DepthError> {
    check_spread(points)?;
    let folds = folds.clamp(2, points.len());
    let mut best: Option<(f64, SplineGrid, f64)> = None;
    for &grid in grids {
        for &smoothing in smoothings {
            let mut misfit = Vec::with_capacity(points.len());
            let ok = (0..folds).all(|k| {
                let train: Vec<_> = points
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| i % folds != k)
                    .map(|(_, p)| *p)
                    .collect();
                if check_spread(&train).is_err() {
                    return false;
                }
                let Ok(fit) =
                    fit_gradient_surface(&train, &vec![1.0; train.len()], grid, smoothing)
                else {
                    return false;
                };
                for (_, (p, gu, gv)) in points.iter().enumerate().filter(|(i, _)| i % folds == k) {
                    let j = fit.surface.evaluate_unchecked(p);
                    misfit.push((j.du - gu).hypot(j.dv - gv));
                }
                true
            });
            if !ok {
                continue;
            }
            misfit.sort_by(f64::total_cmp);
            let score = misfit[misfit.len() / 2];
            if best.is_none_or(|(b, _, _)| score < b) {
                best = Some((score, grid, smoothing));
            }
        }
    }
    best.map(|(_, g, s)| (g, s))
        .ok_or(DepthError::NoValidSettings)
}

/// Huber threshold, in robust standard deviations.
const HUBER_K: f64 = 1.345;
/// Tukey biweight cutoff, in robust standard deviations.
const TUKEY_C: f64 = 4.685;
const ROBUST_PASSES: usize = 4;

/// Like [`integrate_log_depth`], but iteratively reweights the samples so
/// that a few wrong gradients cannot bend the whole surface.
///
/// The residual scale is `1.4826 · median` of the gradient misfits, never
/// below `scale_floor`. Two Huber passes give a stable start for the Tukey
/// passes, which reject gross outliers outright. The returned weights are
/// those of the final fit, in `[0, 1]`.
pub fn integrate_log_depth_robust(
    points: &[(PixelPoint, f64, f64)],
    grid: SplineGrid,
    smoothing: f64,
    scale_floor: f64,
) -> Result<(IntegratedDepth, Vec<f64>), DepthError> {
    check_spread(points)?;
    let mut weights = vec![1.0; points.len()];
    let mut out = integrate_weighted(points, &weights, grid, smoothing)?;
    for pass in 0..ROBUST_PASSES {
        let misfit: Vec<f64> = points
            .iter()
            .zip(&out.log_depth)
            .map(|((_, gu, gv), l)| (l.du - gu).hypot(l.dv - gv))
            .collect();
        let mut sorted = misfit.clone();
        sorted.sort_by(f64::total_cmp);
        let scale = (1.4826 * sorted[sorted.len() / 2]).max(scale_floor);
        let tukey = pass >= 2;
        let candidate: Vec<f64> = misfit
            .iter()
            .map(|r| {
                let z = r / scale;
                if tukey {
                    if z < TUKEY_C {
                        (1.0 - (z / TUKEY_C).powi(2)).powi(2)
                    } else {
                        0.0
                    }
                } else if z <= HUBER_K {
                    1.0
                } else {
                    HUBER_K / z
                }
            })
            .collect();
        // Keep enough support for a well-posed fit.
        let kept: Vec<(PixelPoint, f64, f64)> = points
            .iter()
            .zip(&candidate)
            .filter(|(_, w)| **w > 0.0)
            .map(|(p, _)| *p)
            .collect();
        if check_spread(&kept).is_err() {
            break;
        }
        match integrate_weighted(points, &candidate, grid, smoothing) {
            Ok(next) => {
                weights = candidate;
                out = next;
            }
            Err(_) => break,
        }
    }
    Ok((out, weights))
}
