//! Uniform bicubic B-spline surfaces fitted by regularised least squares,
//! and the pairwise image warps built on them.
//!
//! The fitting engine accepts arbitrary linear observations of the surface
//! (values or gradients at scattered points) and adds a thin-plate bending
//! energy `smoothing * integral(f_uu^2 + 2 f_uv^2 + f_vv^2)`. The same engine
//! backs both the image warps and the log-depth integration.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3};
use thiserror::Error;

use crate::geometry::PixelPoint;

/// Minimum number of correspondences accepted by [`CorrespondenceSet`].
pub const MIN_CORRESPONDENCES: usize = 16;
/// Fraction of the data extent added on each side of the spline domain.
pub const DOMAIN_PADDING: f64 = 0.05;
/// Below this `|det J|` a warp is treated as folded.
pub const MIN_WARP_DETERMINANT: f64 = 1e-8;

const GAUSS_NODES: [f64; 4] = [
    0.069_431_844_202_973_71,
    0.330_009_478_207_571_87,
    0.669_990_521_792_428_1,
    0.930_568_155_797_026_3,
];
const GAUSS_WEIGHTS: [f64; 4] = [
    0.173_927_422_568_726_93,
    0.326_072_577_431_273_07,
    0.326_072_577_431_273_07,
    0.173_927_422_568_726_93,
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SplineError {
    #[error("need at least {required} samples, got {got}")]
    TooFewSamples { required: usize, got: usize },
    #[error("control grid {0}x{1} is smaller than 4x4")]
    GridTooSmall(usize, usize),
    #[error("smoothing weight must be finite and non-negative, got {0}")]
    InvalidSmoothing(f64),
    #[error("duplicate source pixel at ({0}, {1})")]
    DuplicateSource(f64, f64),
    #[error("non-finite sample")]
    NonFinite,
    #[error("samples span a degenerate domain")]
    DegenerateDomain,
    #[error("normal equations are rank deficient; increase smoothing (try >= {suggested_smoothing:.1e})")]
    IllPosed { suggested_smoothing: f64 },
    #[error("query ({0:.4}, {1:.4}) lies outside the fitted domain")]
    OutOfDomain(f64, f64),
    #[error("warp folds at the query point (det J = {0:.3e})")]
    Folded(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplineGrid {
    pub n_u: usize,
    pub n_v: usize,
}

impl SplineGrid {
    pub const fn new(n_u: usize, n_v: usize) -> Self {
        Self { n_u, n_v }
    }

    fn validate(&self) -> Result<(), SplineError> {
        if self.n_u < 4 || self.n_v < 4 {
            return Err(SplineError::GridTooSmall(self.n_u, self.n_v));
        }
        Ok(())
    }
}

impl Default for SplineGrid {
    fn default() -> Self {
        Self::new(8, 8)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingBox {
    pub u_min: f64,
    pub u_max: f64,
    pub v_min: f64,
    pub v_max: f64,
}

impl BoundingBox {
    pub fn around<'a>(points: impl IntoIterator<Item = &'a PixelPoint>) -> Option<Self> {
        let mut b = BoundingBox {
            u_min: f64::INFINITY,
            u_max: f64::NEG_INFINITY,
            v_min: f64::INFINITY,
            v_max: f64::NEG_INFINITY,
        };
        let mut any = false;
        for p in points {
            any = true;
            b.u_min = b.u_min.min(p.u);
            b.u_max = b.u_max.max(p.u);
            b.v_min = b.v_min.min(p.v);
            b.v_max = b.v_max.max(p.v);
        }
        any.then_some(b)
    }

    /// Grows each side by `fraction` of the larger extent.
    pub fn padded(&self, fraction: f64) -> Self {
        let pad = fraction * (self.u_max - self.u_min).max(self.v_max - self.v_min);
        Self {
            u_min: self.u_min - pad,
            u_max: self.u_max + pad,
            v_min: self.v_min - pad,
            v_max: self.v_max + pad,
        }
    }

    pub fn contains(&self, p: &PixelPoint) -> bool {
        p.u >= self.u_min && p.u <= self.u_max && p.v >= self.v_min && p.v <= self.v_max
    }

    pub fn width(&self) -> f64 {
        self.u_max - self.u_min
    }

    pub fn height(&self) -> f64 {
        self.v_max - self.v_min
    }
}

/// Value and derivatives of a scalar surface at one point.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct SurfaceJet {
    pub value: f64,
    pub du: f64,
    pub dv: f64,
    pub duu: f64,
    pub duv: f64,
    pub dvv: f64,
}

/// Uniform cubic B-spline basis on one span: values and first/second
/// derivatives with respect to the local parameter `s` in `[0, 1]`.
fn basis(s: f64) -> [[f64; 4]; 3] {
    let t = 1.0 - s;
    let s2 = s * s;
    let s3 = s2 * s;
    [
        [
            t * t * t / 6.0,
            (3.0 * s3 - 6.0 * s2 + 4.0) / 6.0,
            (-3.0 * s3 + 3.0 * s2 + 3.0 * s + 1.0) / 6.0,
            s3 / 6.0,
        ],
        [
            -0.5 * t * t,
            0.5 * (3.0 * s2 - 4.0 * s),
            0.5 * (-3.0 * s2 + 2.0 * s + 1.0),
            0.5 * s2,
        ],
        [t, 3.0 * s - 2.0, 1.0 - 3.0 * s, s],
    ]
}

/// One axis of a uniform knot layout.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Axis {
    min: f64,
    step: f64,
    spans: usize,
}

impl Axis {
    fn new(min: f64, max: f64, n_ctrl: usize) -> Self {
        let spans = n_ctrl - 3;
        Self {
            min,
            step: (max - min) / spans as f64,
            spans,
        }
    }

    /// First control index and per-derivative basis weights (already scaled
    /// to the physical coordinate).
    fn locate(&self, x: f64) -> (usize, [[f64; 4]; 3]) {
        let t = (x - self.min) / self.step;
        let span = (t.floor().max(0.0) as usize).min(self.spans - 1);
        let mut b = basis(t - span as f64);
        let inv = 1.0 / self.step;
        for w in &mut b[1] {
            *w *= inv;
        }
        for w in &mut b[2] {
            *w *= inv * inv;
        }
        (span, b)
    }

    /// Gram matrices of the 0th, 1st and 2nd basis derivatives over the
    /// whole axis, integrated exactly with 4-point Gauss-Legendre per span.
    fn gram(&self, n_ctrl: usize) -> [DMatrix<f64>; 3] {
        let mut g = [
            DMatrix::zeros(n_ctrl, n_ctrl),
            DMatrix::zeros(n_ctrl, n_ctrl),
            DMatrix::zeros(n_ctrl, n_ctrl),
        ];
        for span in 0..self.spans {
            for (node, weight) in GAUSS_NODES.iter().zip(GAUSS_WEIGHTS) {
                let x = self.min + (span as f64 + node) * self.step;
                let (first, b) = self.locate(x);
                let w = weight * self.step;
                for (d, gd) in g.iter_mut().enumerate() {
                    for a in 0..4 {
                        for c in 0..4 {
                            gd[(first + a, first + c)] += w * b[d][a] * b[d][c];
                        }
                    }
                }
            }
        }
        g
    }
}

/// A scalar tensor-product cubic B-spline surface.
#[derive(Clone, Debug, PartialEq)]
pub struct SplineSurface {
    domain: BoundingBox,
    grid: SplineGrid,
    /// Control coefficients, index `iu * n_v + iv`.
    coefficients: Vec<f64>,
}

impl SplineSurface {
    pub fn from_coefficients(
        domain: BoundingBox,
        grid: SplineGrid,
        coefficients: Vec<f64>,
    ) -> Result<Self, SplineError> {
        grid.validate()?;
        if coefficients.len() != grid.n_u * grid.n_v {
            return Err(SplineError::TooFewSamples {
                required: grid.n_u * grid.n_v,
                got: coefficients.len(),
            });
        }
        if !(domain.width() > 0.0 && domain.height() > 0.0) {
            return Err(SplineError::DegenerateDomain);
        }
        Ok(Self {
            domain,
            grid,
            coefficients,
        })
    }

    pub fn domain(&self) -> &BoundingBox {
        &self.domain
    }

    pub fn grid(&self) -> SplineGrid {
        self.grid
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    fn axes(&self) -> (Axis, Axis) {
        axes_for(&self.domain, self.grid)
    }

    pub fn evaluate(&self, p: &PixelPoint) -> Result<SurfaceJet, SplineError> {
        if !self.domain.contains(p) {
            return Err(SplineError::OutOfDomain(p.u, p.v));
        }
        Ok(self.evaluate_unchecked(p))
    }

    /// Evaluates without the domain check (the polynomial of the nearest
    /// span is extended).
    pub fn evaluate_unchecked(&self, p: &PixelPoint) -> SurfaceJet {
        let (au, av) = self.axes();
        let (iu, bu) = au.locate(p.u);
        let (iv, bv) = av.locate(p.v);
        let mut out = SurfaceJet::default();
        for a in 0..4 {
            for c in 0..4 {
                let coef = self.coefficients[(iu + a) * self.grid.n_v + iv + c];
                out.value += coef * bu[0][a] * bv[0][c];
                out.du += coef * bu[1][a] * bv[0][c];
                out.dv += coef * bu[0][a] * bv[1][c];
                out.duu += coef * bu[2][a] * bv[0][c];
                out.duv += coef * bu[1][a] * bv[1][c];
                out.dvv += coef * bu[0][a] * bv[2][c];
            }
        }
        out
    }
}

fn axes_for(domain: &BoundingBox, grid: SplineGrid) -> (Axis, Axis) {
    (
        Axis::new(domain.u_min, domain.u_max, grid.n_u),
        Axis::new(domain.v_min, domain.v_max, grid.n_v),
    )
}

/// Which linear functional of the surface a fitting row observes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Observe {
    Value,
    DerivU,
    DerivV,
}

/// Accumulates regularised normal equations for one or more output channels
/// sharing the same design.
pub(crate) struct SplineFitter {
    domain: BoundingBox,
    grid: SplineGrid,
    normal: DMatrix<f64>,
    rhs: Vec<DVector<f64>>,
}

impl SplineFitter {
    pub(crate) fn new(domain: BoundingBox, grid: SplineGrid, channels: usize) -> Self {
        let n = grid.n_u * grid.n_v;
        Self {
            domain,
            grid,
            normal: DMatrix::zeros(n, n),
            rhs: vec![DVector::zeros(n); channels],
        }
    }

    fn row(&self, p: &PixelPoint, what: Observe) -> ([usize; 16], [f64; 16]) {
        let (au, av) = axes_for(&self.domain, self.grid);
        let (iu, bu) = au.locate(p.u);
        let (iv, bv) = av.locate(p.v);
        let (du, dv) = match what {
            Observe::Value => (0, 0),
            Observe::DerivU => (1, 0),
            Observe::DerivV => (0, 1),
        };
        let mut idx = [0usize; 16];
        let mut val = [0.0; 16];
        for a in 0..4 {
            for c in 0..4 {
                idx[a * 4 + c] = (iu + a) * self.grid.n_v + iv + c;
                val[a * 4 + c] = bu[du][a] * bv[dv][c];
            }
        }
        (idx, val)
    }

    pub(crate) fn add(&mut self, p: &PixelPoint, what: Observe, targets: &[f64], weight: f64) {
        let (idx, val) = self.row(p, what);
        for a in 0..16 {
            for c in 0..16 {
                self.normal[(idx[a], idx[c])] += weight * val[a] * val[c];
            }
            for (rhs, t) in self.rhs.iter_mut().zip(targets) {
                rhs[idx[a]] += weight * val[a] * t;
            }
        }
    }

    /// Adds `weight * (sum of the observed functionals)^2` with zero target,
    /// used to pin the additive constant of gradient-only fits.
    pub(crate) fn add_sum_constraint(&mut self, rows: &[(PixelPoint, Observe)], weight: f64) {
        let n = self.normal.nrows();
        let mut dense = DVector::zeros(n);
        for (p, what) in rows {
            let (idx, val) = self.row(p, *what);
            for k in 0..16 {
                dense[idx[k]] += val[k];
            }
        }
        self.normal += weight * &dense * dense.transpose();
    }

    pub(crate) fn solve(mut self, smoothing: f64) -> Result<Vec<SplineSurface>, SplineError> {
        if smoothing > 0.0 {
            let (au, av) = axes_for(&self.domain, self.grid);
            let gu = au.gram(self.grid.n_u);
            let gv = av.gram(self.grid.n_v);
            let nv = self.grid.n_v;
            for a in 0..self.grid.n_u {
                for b in 0..nv {
                    for c in 0..self.grid.n_u {
                        for d in 0..nv {
                            let e = gu[2][(a, c)] * gv[0][(b, d)]
                                + 2.0 * gu[1][(a, c)] * gv[1][(b, d)]
                                + gu[0][(a, c)] * gv[2][(b, d)];
                            self.normal[(a * nv + b, c * nv + d)] += smoothing * e;
                        }
                    }
                }
            }
        }
        let scale = self.normal.diagonal().max();
        let suggested = (smoothing * 10.0).max(1e-6);
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(SplineError::IllPosed {
                suggested_smoothing: suggested,
            });
        }
        let chol = self
            .normal
            .clone()
            .cholesky()
            .ok_or(SplineError::IllPosed {
                suggested_smoothing: suggested,
            })?;
        let min_pivot = chol.l_dirty().diagonal().min();
        if min_pivot * min_pivot < 1e-13 * scale {
            return Err(SplineError::IllPosed {
                suggested_smoothing: suggested,
            });
        }
        self.rhs
            .iter()
            .map(|rhs| {
                let coef = chol.solve(rhs);
                SplineSurface::from_coefficients(self.domain, self.grid, coef.as_slice().to_vec())
            })
            .collect()
    }
}

fn check_smoothing(smoothing: f64) -> Result<(), SplineError> {
    if smoothing.is_finite() && smoothing >= 0.0 {
        Ok(())
    } else {
        Err(SplineError::InvalidSmoothing(smoothing))
    }
}

fn fit_domain<'a>(
    points: impl IntoIterator<Item = &'a PixelPoint>,
) -> Result<BoundingBox, SplineError> {
    let bbox = BoundingBox::around(points).ok_or(SplineError::DegenerateDomain)?;
    if !(bbox.width() > 0.0 || bbox.height() > 0.0) {
        return Err(SplineError::DegenerateDomain);
    }
    // keep the domain square-ish so a collinear-looking sample set still
    // yields a well-defined 2D domain
    let extent = bbox.width().max(bbox.height());
    let (cu, cv) = (
        0.5 * (bbox.u_min + bbox.u_max),
        0.5 * (bbox.v_min + bbox.v_max),
    );
    let hu = 0.5 * bbox.width().max(0.25 * extent);
    let hv = 0.5 * bbox.height().max(0.25 * extent);
    Ok(BoundingBox {
        u_min: cu - hu,
        u_max: cu + hu,
        v_min: cv - hv,
        v_max: cv + hv,
    }
    .padded(DOMAIN_PADDING))
}

/// Matched pixels between frames `source_frame` and `target_frame`.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrespondenceSet {
    pub source_frame: usize,
    pub target_frame: usize,
    pairs: Vec<(PixelPoint, PixelPoint)>,
}

impl CorrespondenceSet {
    pub fn new(
        source_frame: usize,
        target_frame: usize,
        pairs: Vec<(PixelPoint, PixelPoint)>,
    ) -> Result<Self, SplineError> {
        Self::with_minimum(source_frame, target_frame, pairs, MIN_CORRESPONDENCES)
    }

    /// Like [`CorrespondenceSet::new`] with a caller-chosen minimum size.
    pub fn with_minimum(
        source_frame: usize,
        target_frame: usize,
        pairs: Vec<(PixelPoint, PixelPoint)>,
        minimum: usize,
    ) -> Result<Self, SplineError> {
        let minimum = minimum.max(3);
        if pairs.len() < minimum {
            return Err(SplineError::TooFewSamples {
                required: minimum,
                got: pairs.len(),
            });
        }
        if pairs.iter().any(|(a, b)| !a.is_finite() || !b.is_finite()) {
            return Err(SplineError::NonFinite);
        }
        let mut sorted: Vec<_> = pairs.iter().map(|(a, _)| (a.u, a.v)).collect();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
            return Err(SplineError::DuplicateSource(w[0].0, w[0].1));
        }
        Ok(Self {
            source_frame,
            target_frame,
            pairs,
        })
    }

    pub fn pairs(&self) -> &[(PixelPoint, PixelPoint)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn swapped(&self) -> Self {
        Self {
            source_frame: self.target_frame,
            target_frame: self.source_frame,
            pairs: self.pairs.iter().map(|&(a, b)| (b, a)).collect(),
        }
    }
}

/// A smooth 2D-to-2D image warp: one spline per target coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpModel {
    pub u: SplineSurface,
    pub v: SplineSurface,
    pub smoothing: f64,
    /// RMS of the fitted target residuals.
    pub residual_rms: f64,
}

impl WarpModel {
    pub fn domain(&self) -> &BoundingBox {
        self.u.domain()
    }

    pub fn grid(&self) -> SplineGrid {
        self.u.grid()
    }

    pub fn apply(&self, p: &PixelPoint) -> Result<PixelPoint, SplineError> {
        Ok(PixelPoint::new(
            self.u.evaluate(p)?.value,
            self.v.evaluate(p)?.value,
        ))
    }

    pub fn jacobian(&self, p: &PixelPoint) -> Result<Matrix2<f64>, SplineError> {
        let (a, b) = (self.u.evaluate(p)?, self.v.evaluate(p)?);
        Ok(Matrix2::new(a.du, a.dv, b.du, b.dv))
    }
}

pub fn fit_warp(
    c: &CorrespondenceSet,
    grid: SplineGrid,
    smoothing: f64,
) -> Result<WarpModel, SplineError> {
    let domain = fit_domain(c.pairs().iter().map(|(s, _)| s))?;
    fit_warp_on(domain, c.pairs(), grid, smoothing)
}

fn fit_warp_on(
    domain: BoundingBox,
    pairs: &[(PixelPoint, PixelPoint)],
    grid: SplineGrid,
    smoothing: f64,
) -> Result<WarpModel, SplineError> {
    grid.validate()?;
    check_smoothing(smoothing)?;
    let mut fitter = SplineFitter::new(domain, grid, 2);
    for (s, t) in pairs {
        fitter.add(s, Observe::Value, &[t.u, t.v], 1.0);
    }
    let mut surfaces = fitter.solve(smoothing)?;
    let v = surfaces.pop().unwrap();
    let u = surfaces.pop().unwrap();
    let model = WarpModel {
        u,
        v,
        smoothing,
        residual_rms: 0.0,
    };
    let residual_rms = (squared_error(&model, pairs) / pairs.len() as f64).sqrt();
    Ok(WarpModel {
        residual_rms,
        ..model
    })
}

fn squared_error(model: &WarpModel, pairs: &[(PixelPoint, PixelPoint)]) -> f64 {
    pairs
        .iter()
        .map(|(s, t)| {
            let du = model.u.evaluate_unchecked(s).value - t.u;
            let dv = model.v.evaluate_unchecked(s).value - t.v;
            du * du + dv * dv
        })
        .sum()
}

/// Picks the (grid, smoothing) candidate with the lowest `folds`-fold
/// cross-validated warp error. Folds are assigned round-robin, so the
/// choice is deterministic. Candidates whose fits are ill-posed are
/// skipped; ties keep the earlier candidate.
pub fn cross_validate_warp(
    c: &CorrespondenceSet,
    grids: &[SplineGrid],
    smoothings: &[f64],
    folds: usize,
) -> Result<(SplineGrid, f64), SplineError> {
    let domain = fit_domain(c.pairs().iter().map(|(s, _)| s))?;
    let folds = folds.clamp(2, c.len());
    let split = |k: usize| {
        let (held, train): (Vec<_>, Vec<_>) = c
            .pairs()
            .iter()
            .enumerate()
            .partition(|(n, _)| n % folds == k);
        let strip = |v: Vec<(usize, &(PixelPoint, PixelPoint))>| {
            v.into_iter().map(|(_, p)| *p).collect::<Vec<_>>()
        };
        (strip(train), strip(held))
    };
    let splits: Vec<_> = (0..folds).map(split).collect();
    let mut best: Option<(SplineGrid, f64, f64)> = None;
    for &grid in grids {
        'candidates: for &smoothing in smoothings {
            check_smoothing(smoothing)?;
            let mut total = 0.0;
            for (train, held) in &splits {
                match fit_warp_on(domain, train, grid, smoothing) {
                    Ok(model) => total += squared_error(&model, held),
                    Err(SplineError::IllPosed { .. }) => continue 'candidates,
                    Err(e) => return Err(e),
                }
            }
            if best.is_none_or(|(_, _, b)| total < b) {
                best = Some((grid, smoothing, total));
            }
        }
    }
    best.map(|(g, s, _)| (g, s)).ok_or(SplineError::IllPosed {
        suggested_smoothing: smoothings.iter().copied().fold(0.0, f64::max) * 10.0,
    })
}

/// A fitted scalar surface with its data residual.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarFit {
    pub surface: SplineSurface,
    pub residual_rms: f64,
}

pub fn fit_scalar_surface(
    points: &[(PixelPoint, f64)],
    grid: SplineGrid,
    smoothing: f64,
) -> Result<ScalarFit, SplineError> {
    grid.validate()?;
    check_smoothing(smoothing)?;
    if points.len() < 3 {
        return Err(SplineError::TooFewSamples {
            required: 3,
            got: points.len(),
        });
    }
    if points.iter().any(|(p, z)| !p.is_finite() || !z.is_finite()) {
        return Err(SplineError::NonFinite);
    }
    let domain = fit_domain(points.iter().map(|(p, _)| p))?;
    let mut fitter = SplineFitter::new(domain, grid, 1);
    for (p, z) in points {
        fitter.add(p, Observe::Value, &[*z], 1.0);
    }
    let surface = fitter.solve(smoothing)?.pop().unwrap();
    let sq: f64 = points
        .iter()
        .map(|(p, z)| (surface.evaluate_unchecked(p).value - z).powi(2))
        .sum();
    Ok(ScalarFit {
        surface,
        residual_rms: (sq / points.len() as f64).sqrt(),
    })
}

/// Fits a surface whose gradient matches the given samples, with the
/// additive constant fixed so that the surface averages zero over the
/// sample points. `weights` scales each sample's squared gradient misfit.
pub(crate) fn fit_gradient_surface(
    samples: &[(PixelPoint, f64, f64)],
    weights: &[f64],
    grid: SplineGrid,
    smoothing: f64,
) -> Result<ScalarFit, SplineError> {
    grid.validate()?;
    check_smoothing(smoothing)?;
    let domain = fit_domain(samples.iter().map(|(p, _, _)| p))?;
    let mut fitter = SplineFitter::new(domain, grid, 1);
    for ((p, gu, gv), &w) in samples.iter().zip(weights) {
        fitter.add(p, Observe::DerivU, &[*gu], w);
        fitter.add(p, Observe::DerivV, &[*gv], w);
    }
    let rows: Vec<_> = samples
        .iter()
        .map(|(p, _, _)| (*p, Observe::Value))
        .collect();
    fitter.add_sum_constraint(&rows, 1.0 / samples.len() as f64);
    let surface = fitter.solve(smoothing)?.pop().unwrap();
    let sq: f64 = samples
        .iter()
        .map(|(p, gu, gv)| {
            let j = surface.evaluate_unchecked(p);
            (j.du - gu).powi(2) + (j.dv - gv).powi(2)
        })
        .sum();
    Ok(ScalarFit {
        surface,
        residual_rms: (sq / samples.len() as f64).sqrt(),
    })
}

/// Everything the connection constraints need to know about a warp at one
/// source pixel.
///
/// `jacobian[(r, c)]` is the derivative of target coordinate `r` with
/// respect to source coordinate `c`, so its columns are
/// `(du/dū, dv/dū)` and `(du/dv̄, dv/dv̄)` where `(ū, v̄)` are source and
/// `(u, v)` target pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarpJet {
    pub warped: PixelPoint,
    pub jacobian: Matrix2<f64>,
    /// `diag(J, det J)`
    pub lifted: Matrix3<f64>,
    /// Partials of the lifted Jacobian along the source u and v axes.
    pub d_lifted: [Matrix3<f64>; 2],
    /// Jacobian of the inverse warp evaluated at the warped point.
    pub inverse_jacobian: Matrix2<f64>,
}

impl WarpJet {
    /// Builds the jet from the warp Jacobian and its source-space partials
    /// `d_jacobian[k] = dJ/d(source_k)`.
    pub fn from_parts(
        warped: PixelPoint,
        jacobian: Matrix2<f64>,
        d_jacobian: [Matrix2<f64>; 2],
        inverse_jacobian: Matrix2<f64>,
    ) -> Result<Self, SplineError> {
        let det = jacobian.determinant();
        if !(det.abs() >= MIN_WARP_DETERMINANT) {
            return Err(SplineError::Folded(det));
        }
        let lift = |m: &Matrix2<f64>, d: f64| {
            Matrix3::new(
                m[(0, 0)],
                m[(0, 1)],
                0.0,
                m[(1, 0)],
                m[(1, 1)],
                0.0,
                0.0,
                0.0,
                d,
            )
        };
        let j = &jacobian;
        let d_det = |dj: &Matrix2<f64>| {
            dj[(0, 0)] * j[(1, 1)] + j[(0, 0)] * dj[(1, 1)]
                - dj[(0, 1)] * j[(1, 0)]
                - j[(0, 1)] * dj[(1, 0)]
        };
        Ok(Self {
            warped,
            jacobian,
            lifted: lift(&jacobian, det),
            d_lifted: [
                lift(&d_jacobian[0], d_det(&d_jacobian[0])),
                lift(&d_jacobian[1], d_det(&d_jacobian[1])),
            ],
            inverse_jacobian,
        })
    }

    pub fn identity(p: PixelPoint) -> Self {
        Self::from_parts(
            p,
            Matrix2::identity(),
            [Matrix2::zeros(); 2],
            Matrix2::identity(),
        )
        .unwrap()
    }

    pub fn determinant(&self) -> f64 {
        self.lifted[(2, 2)]
    }

    /// `(du/dū, dv/dū, du/dv̄, dv/dv̄)`: how the target pixel moves along
    /// each source axis.
    pub fn chain(&self) -> [f64; 4] {
        let j = &self.jacobian;
        [j[(0, 0)], j[(1, 0)], j[(0, 1)], j[(1, 1)]]
    }
}

pub fn warp_jet(
    forward: &WarpModel,
    inverse: &WarpModel,
    p: &PixelPoint,
) -> Result<WarpJet, SplineError> {
    let a = forward.u.evaluate(p)?;
    let b = forward.v.evaluate(p)?;
    let warped = PixelPoint::new(a.value, b.value);
    let inverse_jacobian = inverse.jacobian(&warped)?;
    WarpJet::from_parts(
        warped,
        Matrix2::new(a.du, a.dv, b.du, b.dv),
        [
            Matrix2::new(a.duu, a.duv, b.duu, b.duv),
            Matrix2::new(a.duv, a.dvv, b.duv, b.dvv),
        ],
        inverse_jacobian,
    )
}
