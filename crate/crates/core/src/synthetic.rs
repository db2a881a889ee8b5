//! Analytic ball scenes with exact ground truth.
//!
//! Every frame shows one ball. A surface point `X` on ball `i` corresponds
//! to `(R_j / R_i)(X - c_i) + c_j` on ball `j`, a conformal map with scale
//! `λ_ij = R_i / R_j`. Depths, their derivatives and the pixel warps are
//! evaluated with [`Jet2`], so all ground truth is exact up to rounding.
//!
//! The same machinery handles any ellipsoid and any affine deformation,
//! which is how the non-conformal counterexamples are built.

use log::warn;
use nalgebra::{Matrix2, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::constraints::{connection_sides, ConformalScale, ConstraintError, EdgePoint};
use crate::geometry::{DepthJet, GeometryError, Intrinsics, PixelPoint};
use crate::jet2::Jet2;
use crate::spline::{SplineError, WarpJet};

/// Half-width of the retinal box points are sampled in.
pub const RETINAL_HALF_WIDTH: f64 = 0.5;
/// Minimum cosine between the surface normal and the viewing ray for a
/// point to count as visible.
pub const VISIBILITY_COSINE: f64 = 0.5;
const MAX_ATTEMPTS_PER_POINT: usize = 20_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SyntheticError {
    #[error("invalid ball: radius {radius}, center z {z}")]
    InvalidScene { radius: f64, z: f64 },
    #[error("viewing ray through ({0:.4}, {1:.4}) misses the surface")]
    OffSurface(f64, f64),
    #[error("could only place {placed} of {requested} points on the visible cap")]
    SamplingExhausted { placed: usize, requested: usize },
    #[error("missing rate must lie in [0, 1), got {0}")]
    InvalidRate(f64),
    #[error("noise sigma must be finite and non-negative, got {0}")]
    InvalidNoise(f64),
    #[error("need at least {0} frames")]
    TooFewFrames(usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Warp(#[from] SplineError),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BallScene {
    pub center: Vector3<f64>,
    pub radius: f64,
}

impl BallScene {
    pub fn new(center: Vector3<f64>, radius: f64) -> Result<Self, SyntheticError> {
        if !(radius > 0.0 && radius.is_finite() && center.iter().all(|c| c.is_finite()))
            || center.z <= radius
        {
            return Err(SyntheticError::InvalidScene {
                radius,
                z: center.z,
            });
        }
        Ok(Self { center, radius })
    }

    pub fn quadric(&self) -> Quadric {
        Quadric {
            center: self.center,
            shape: Matrix3::identity() / (self.radius * self.radius),
        }
    }

    /// Scale `R_i / R_j` of the map from this ball onto `other`.
    pub fn lambda_to(&self, other: &BallScene) -> f64 {
        self.radius / other.radius
    }

    /// The similarity sending this ball onto `other`.
    pub fn deformation_to(&self, other: &BallScene) -> Deformation {
        Deformation {
            linear: Matrix3::identity() * (other.radius / self.radius),
            from: self.center,
            to: other.center,
        }
    }
}

/// Which intersection of a viewing ray with a closed surface.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sheet {
    Near,
    Far,
}

/// The ellipsoid `(X - c)ᵀ M (X - c) = 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quadric {
    pub center: Vector3<f64>,
    pub shape: Matrix3<f64>,
}

impl Quadric {
    /// Depth along the ray `(u, v, 1)` as a jet in the pixel coordinates.
    pub fn depth(&self, p: &PixelPoint, sheet: Sheet) -> Result<Jet2, SyntheticError> {
        let d = [Jet2::var_u(p.u), Jet2::var_v(p.v), Jet2::constant(1.0)];
        let m = &self.shape;
        let c = &self.center;
        let mc = m * c;
        let mut a = Jet2::constant(0.0);
        for r in 0..3 {
            for s in 0..3 {
                a = a + d[r] * d[s] * m[(r, s)];
            }
        }
        let b = d[0] * mc.x + d[1] * mc.y + d[2] * mc.z;
        let k = c.dot(&mc) - 1.0;
        let disc = b * b - a * k;
        if !(disc.value > 0.0) {
            return Err(SyntheticError::OffSurface(p.u, p.v));
        }
        let root = disc.sqrt();
        let beta = match sheet {
            Sheet::Near => (b - root) / a,
            Sheet::Far => (b + root) / a,
        };
        if !(beta.value > 0.0) {
            return Err(SyntheticError::OffSurface(p.u, p.v));
        }
        Ok(beta)
    }

    pub fn depth_jet(&self, p: &PixelPoint, sheet: Sheet) -> Result<DepthJet, SyntheticError> {
        Ok(jet_from_depth(&self.depth(p, sheet)?)?)
    }

    /// Outward unit normal at a surface point.
    pub fn normal(&self, x: &Vector3<f64>) -> Vector3<f64> {
        (self.shape * (x - self.center)).normalize()
    }

    /// The sheet whose depth at the projection of `x` is closest to `x.z`.
    pub fn sheet_of(&self, x: &Vector3<f64>) -> Sheet {
        let p = PixelPoint::new(x.x / x.z, x.y / x.z);
        let gap = |s| {
            self.depth(&p, s)
                .map(|b| (b.value - x.z).abs())
                .unwrap_or(f64::INFINITY)
        };
        if gap(Sheet::Near) <= gap(Sheet::Far) {
            Sheet::Near
        } else {
            Sheet::Far
        }
    }
}

fn jet_from_depth(beta: &Jet2) -> Result<DepthJet, GeometryError> {
    let b = beta.value;
    DepthJet::new(
        b,
        beta.grad[0] / b,
        beta.grad[1] / b,
        beta.hess[0] / b,
        beta.hess[1] / b,
        beta.hess[2] / b,
    )
}

/// Affine surface map `X ↦ A (X - from) + to`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Deformation {
    pub linear: Matrix3<f64>,
    pub from: Vector3<f64>,
    pub to: Vector3<f64>,
}

impl Deformation {
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.linear * (x - self.from) + self.to
    }

    fn apply_jet(&self, x: &[Jet2; 3]) -> [Jet2; 3] {
        let a = &self.linear;
        let shifted = [x[0] - self.from.x, x[1] - self.from.y, x[2] - self.from.z];
        [0, 1, 2].map(|r| {
            shifted[0] * a[(r, 0)] + shifted[1] * a[(r, 1)] + shifted[2] * a[(r, 2)] + self.to[r]
        })
    }

    /// Image of `q` under the deformation.
    pub fn image_of(&self, q: &Quadric) -> Option<Quadric> {
        let inv = self.linear.try_inverse()?;
        Some(Quadric {
            center: self.to,
            shape: inv.transpose() * q.shape * inv,
        })
    }
}

/// A source surface, its deformation, and the deformed surface.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfacePair {
    pub src: Quadric,
    pub deformation: Deformation,
    pub dst: Quadric,
}

/// Exact data for one point of a [`SurfacePair`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairSample {
    pub pixel: PixelPoint,
    pub jet_src: DepthJet,
    pub jet_dst: DepthJet,
    pub warp: WarpJet,
}

impl PairSample {
    pub fn edge_point(&self) -> EdgePoint<'_> {
        EdgePoint {
            pixel: self.pixel,
            jet_src: &self.jet_src,
            jet_dst: &self.jet_dst,
            warp: &self.warp,
        }
    }
}

impl SurfacePair {
    pub fn new(src: Quadric, deformation: Deformation) -> Option<Self> {
        Some(Self {
            src,
            deformation,
            dst: deformation.image_of(&src)?,
        })
    }

    pub fn balls(a: &BallScene, b: &BallScene) -> Self {
        Self {
            src: a.quadric(),
            deformation: a.deformation_to(b),
            dst: b.quadric(),
        }
    }

    /// Warp value and derivatives at a source pixel on the near sheet.
    pub fn warp_jet(&self, p: &PixelPoint) -> Result<WarpJet, SyntheticError> {
        Ok(self.sample(p)?.warp)
    }

    pub fn sample(&self, p: &PixelPoint) -> Result<PairSample, SyntheticError> {
        let beta = self.src.depth(p, Sheet::Near)?;
        let x = [beta * Jet2::var_u(p.u), beta * Jet2::var_v(p.v), beta];
        let y = self.deformation.apply_jet(&x);
        if !(y[2].value > 0.0) {
            return Err(GeometryError::BehindCamera(y[2].value).into());
        }
        let wu = y[0] / y[2];
        let wv = y[1] / y[2];
        let warped = PixelPoint::new(wu.value, wv.value);
        let jac = Matrix2::new(wu.grad[0], wu.grad[1], wv.grad[0], wv.grad[1]);
        let d_jac = [
            Matrix2::new(wu.hess[0], wu.hess[1], wv.hess[0], wv.hess[1]),
            Matrix2::new(wu.hess[1], wu.hess[2], wv.hess[1], wv.hess[2]),
        ];
        let inverse = jac
            .try_inverse()
            .ok_or(SplineError::Folded(jac.determinant()))?;
        let warp = WarpJet::from_parts(warped, jac, d_jac, inverse)?;
        let y_point = Vector3::new(y[0].value, y[1].value, y[2].value);
        let jet_dst = self.dst.depth_jet(&warped, self.dst.sheet_of(&y_point))?;
        Ok(PairSample {
            pixel: *p,
            jet_src: jet_from_depth(&beta)?,
            jet_dst,
            warp,
        })
    }
}

/// Convenience wrapper for two balls.
pub fn analytic_warp_jet(
    scene_i: &BallScene,
    scene_j: &BallScene,
    p: &PixelPoint,
) -> Result<WarpJet, SyntheticError> {
    SurfacePair::balls(scene_i, scene_j).warp_jet(p)
}

/// Tracks and ground truth of a ball sequence. Indexing is
/// `[point][frame]` throughout.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub scenes: Vec<BallScene>,
    /// Observed pixels; `None` where the observation is missing.
    pub tracks: Vec<Vec<Option<PixelPoint>>>,
    /// Noise-free pixels.
    pub gt_pixels: Vec<Vec<PixelPoint>>,
    pub gt_jets: Vec<Vec<DepthJet>>,
    pub gt_points: Vec<Vec<Vector3<f64>>>,
    /// Outward unit normals.
    pub gt_normals: Vec<Vec<Vector3<f64>>>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticDataset {
    pub fn n_frames(&self) -> usize {
        self.scenes.len()
    }

    pub fn n_points(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_visible(&self, point: usize, frame: usize) -> bool {
        self.tracks[point][frame].is_some()
    }

    pub fn visibility(&self) -> Vec<Vec<bool>> {
        self.tracks
            .iter()
            .map(|row| row.iter().map(Option::is_some).collect())
            .collect()
    }

    pub fn gt_lambda(&self, i: usize, j: usize) -> f64 {
        self.scenes[i].lambda_to(&self.scenes[j])
    }

    pub fn observation_count(&self) -> usize {
        self.tracks.iter().flatten().filter(|t| t.is_some()).count()
    }
}

/// Samples `n_points` on the visible cap of the first ball and maps them
/// onto every other ball.
pub fn generate_balls(
    n_points: usize,
    scenes: &[BallScene],
    seed: u64,
) -> Result<SyntheticDataset, SyntheticError> {
    if scenes.is_empty() {
        return Err(SyntheticError::TooFewFrames(1));
    }
    for s in scenes {
        BallScene::new(s.center, s.radius)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = &scenes[0];
    let maps: Vec<Deformation> = scenes.iter().map(|s| first.deformation_to(s)).collect();
    let mut gt_pixels = Vec::with_capacity(n_points);
    let mut gt_jets = Vec::with_capacity(n_points);
    let mut gt_points = Vec::with_capacity(n_points);
    let mut gt_normals = Vec::with_capacity(n_points);
    let mut attempts = 0;
    while gt_pixels.len() < n_points {
        attempts += 1;
        if attempts > MAX_ATTEMPTS_PER_POINT * n_points.max(1) {
            return Err(SyntheticError::SamplingExhausted {
                placed: gt_pixels.len(),
                requested: n_points,
            });
        }
        let n = random_direction(&mut rng);
        let x0 = first.center + n * first.radius;
        let p0 = PixelPoint::new(x0.x / x0.z, x0.y / x0.z);
        if p0.u.abs() > RETINAL_HALF_WIDTH || p0.v.abs() > RETINAL_HALF_WIDTH {
            continue;
        }
        let points: Vec<Vector3<f64>> = maps.iter().map(|m| m.apply(&x0)).collect();
        // the similarity maps keep normals fixed
        if !points
            .iter()
            .all(|x| -n.dot(x) / x.norm() >= VISIBILITY_COSINE)
        {
            continue;
        }
        let pixels: Vec<PixelPoint> = points
            .iter()
            .map(|x| PixelPoint::new(x.x / x.z, x.y / x.z))
            .collect();
        let jets = scenes
            .iter()
            .zip(&pixels)
            .map(|(s, p)| s.quadric().depth_jet(p, Sheet::Near))
            .collect::<Result<Vec<_>, _>>()?;
        gt_pixels.push(pixels);
        gt_jets.push(jets);
        gt_normals.push(vec![n; scenes.len()]);
        gt_points.push(points);
    }
    Ok(SyntheticDataset {
        scenes: scenes.to_vec(),
        tracks: gt_pixels
            .iter()
            .map(|row| row.iter().copied().map(Some).collect())
            .collect(),
        gt_pixels,
        gt_jets,
        gt_points,
        gt_normals,
        noise_sigma: 0.0,
        seed,
    })
}

fn random_direction(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n: f64 = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

/// Radius of the reference ball of [`ball_sequence`].
pub const REFERENCE_RADIUS: f64 = 1.25;
/// Center depth of the reference ball of [`ball_sequence`].
pub const REFERENCE_DEPTH: f64 = 4.5;

/// A reference ball followed by `n - 1` moderately deformed copies: each
/// is rescaled by `1 ± [0.05, 0.15]`, shifted laterally by `[0.2, 0.3]`
/// and in depth by at most `0.15`.
pub fn ball_sequence(n: usize, seed: u64) -> Vec<BallScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reference = BallScene {
        center: Vector3::new(0.0, 0.0, REFERENCE_DEPTH),
        radius: REFERENCE_RADIUS,
    };
    std::iter::once(reference)
        .chain((1..n).map(|_| {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let scale = 1.0 + sign * rng.random_range(0.05..=0.15);
            let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let shift = rng.random_range(0.2..=0.3);
            let dz = rng.random_range(-0.15..=0.15);
            BallScene {
                center: Vector3::new(
                    shift * angle.cos(),
                    shift * angle.sin(),
                    REFERENCE_DEPTH + dz,
                ),
                radius: REFERENCE_RADIUS * scale,
            }
        }))
        .collect()
}

/// Seven-ball scene used for the reconstruction experiments.
pub fn default_reconstruction_scenes(seed: u64) -> Vec<BallScene> {
    ball_sequence(7, seed)
}

/// One reference ball followed by ten matched balls.
pub fn default_verification_scenes(seed: u64) -> Vec<BallScene> {
    ball_sequence(11, seed)
}

/// Mean normalised gap between both sides of the first connection identity
/// for each pair `(0, j)`, in percent. With `use_second_order = false` the
/// second-order depth terms are dropped before building the connections.
pub fn verification_index(
    dataset: &SyntheticDataset,
    use_second_order: bool,
) -> Result<Vec<f64>, SyntheticError> {
    if dataset.n_frames() < 2 {
        return Err(SyntheticError::TooFewFrames(2));
    }
    (1..dataset.n_frames())
        .map(|j| {
            let pair = SurfacePair::balls(&dataset.scenes[0], &dataset.scenes[j]);
            let lambda = ConformalScale::new(dataset.gt_lambda(0, j))?;
            let mut sides = Vec::with_capacity(dataset.n_points());
            for row in &dataset.gt_pixels {
                let mut s = pair.sample(&row[0])?;
                if !use_second_order {
                    s.jet_src = s.jet_src.first_order_only();
                    s.jet_dst = s.jet_dst.first_order_only();
                }
                sides.push(connection_sides(&s.edge_point(), lambda)?[0]);
            }
            Ok(index_of(&sides, j))
        })
        .collect()
}

fn index_of(sides: &[(Matrix3<f64>, Matrix3<f64>)], pair: usize) -> f64 {
    let mut total = 0.0;
    let mut entries = 0usize;
    for r in 0..3 {
        for c in 0..3 {
            let (lo, hi) = sides
                .iter()
                .map(|(l, _)| l[(r, c)])
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| {
                    (lo.min(x), hi.max(x))
                });
            let range = hi - lo;
            let scale = lo.abs().max(hi.abs());
            if !(range > 1e-12 * scale.max(1e-300)) {
                warn!("pair {pair}: entry ({r}, {c}) has zero range and is skipped");
                continue;
            }
            entries += 1;
            total += sides
                .iter()
                .map(|(l, rh)| (l[(r, c)] - rh[(r, c)]).abs())
                .sum::<f64>()
                / range;
        }
    }
    if entries == 0 {
        0.0
    } else {
        100.0 * total / (entries * sides.len()) as f64
    }
}

/// Adds isotropic Gaussian noise of `sigma_px` image pixels to every
/// observed track. Ground truth is untouched.
pub fn add_noise(
    dataset: &SyntheticDataset,
    sigma_px: f64,
    intrinsics: &Intrinsics,
    seed: u64,
) -> Result<SyntheticDataset, SyntheticError> {
    if !(sigma_px.is_finite() && sigma_px >= 0.0) {
        return Err(SyntheticError::InvalidNoise(sigma_px));
    }
    let mut out = dataset.clone();
    out.noise_sigma = sigma_px;
    if sigma_px == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for row in &mut out.tracks {
        for p in row.iter_mut().flatten() {
            let du: f64 = StandardNormal.sample(&mut rng);
            let dv: f64 = StandardNormal.sample(&mut rng);
            p.u += sigma_px * du / intrinsics.fx;
            p.v += sigma_px * dv / intrinsics.fy;
        }
    }
    Ok(out)
}

/// Outcome of [`apply_missing`].
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct MissingReport {
    /// Observations removed.
    pub masked: usize,
    /// Removals skipped because the point would have kept fewer than two
    /// views.
    pub protected: usize,
}

/// Removes `rate` of the observations of every frame, chosen uniformly at
/// random, while keeping each point visible in at least two frames.
pub fn apply_missing(
    dataset: &SyntheticDataset,
    rate: f64,
    seed: u64,
) -> Result<(SyntheticDataset, MissingReport), SyntheticError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(SyntheticError::InvalidRate(rate));
    }
    let mut out = dataset.clone();
    let mut report = MissingReport::default();
    let n_points = out.n_points();
    let target = (rate * n_points as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut views: Vec<usize> = out
        .tracks
        .iter()
        .map(|r| r.iter().flatten().count())
        .collect();
    for f in 0..out.n_frames() {
        let mut order: Vec<usize> = (0..n_points).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mut removed = 0;
        for &p in &order {
            if removed == target {
                break;
            }
            if out.tracks[p][f].is_none() {
                continue;
            }
            if views[p] <= 2 {
                report.protected += 1;
                continue;
            }
            out.tracks[p][f] = None;
            views[p] -= 1;
            removed += 1;
        }
        report.masked += removed;
    }
    Ok((out, report))
}
