//! Perspective projection, image embedding, moving frames and the exact
//! connection matrix of a depth-parameterised surface.
//!
//! All pixels are calibration-normalised retinal coordinates. A surface is
//! described locally by its [`DepthJet`]: the depth `beta` at a pixel and
//! the normalised first and second derivatives `y_a = beta_a / beta`,
//! `y_ab = beta_ab / beta`.

use nalgebra::{Matrix3, SMatrix, Vector3};
use thiserror::Error;

/// Condition number of the moving-frame matrix above which the connection
/// is considered degenerate.
pub const MAX_FRAME_CONDITION: f64 = 1e10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point lies on or behind the camera plane (z = {0})")]
    BehindCamera(f64),
    #[error("depth must be positive and finite, got {0}")]
    InvalidDepth(f64),
    #[error("non-finite depth jet component")]
    NonFinite,
    #[error("moving frame is degenerate (condition number {0:.3e})")]
    DegenerateFrame(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct PixelPoint {
    pub u: f64,
    pub v: f64,
}

impl PixelPoint {
    pub const fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn is_finite(&self) -> bool {
        self.u.is_finite() && self.v.is_finite()
    }

    pub fn distance(&self, other: &PixelPoint) -> f64 {
        (self.u - other.u).hypot(self.v - other.v)
    }
}

/// Pinhole intrinsics mapping retinal coordinates to image pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    /// Identity calibration: pixels are already retinal coordinates.
    pub const NORMALIZED: Intrinsics = Intrinsics {
        fx: 1.0,
        fy: 1.0,
        cx: 0.0,
        cy: 0.0,
    };

    pub fn to_retinal(&self, x: f64, y: f64) -> PixelPoint {
        PixelPoint::new((x - self.cx) / self.fx, (y - self.cy) / self.fy)
    }

    pub fn to_image(&self, p: &PixelPoint) -> (f64, f64) {
        (p.u * self.fx + self.cx, p.v * self.fy + self.cy)
    }
}

/// Depth and its normalised derivatives at one pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthJet {
    pub beta: f64,
    pub y1: f64,
    pub y2: f64,
    pub y11: f64,
    pub y12: f64,
    pub y22: f64,
}

/// Raw (unnormalised) depth derivatives `beta_1 = beta * y1` and so on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawDepthDerivatives {
    pub beta: f64,
    pub b1: f64,
    pub b2: f64,
    pub b11: f64,
    pub b12: f64,
    pub b22: f64,
}

impl DepthJet {
    pub fn new(
        beta: f64,
        y1: f64,
        y2: f64,
        y11: f64,
        y12: f64,
        y22: f64,
    ) -> Result<Self, GeometryError> {
        let jet = Self {
            beta,
            y1,
            y2,
            y11,
            y12,
            y22,
        };
        jet.validate()?;
        Ok(jet)
    }

    /// Fronto-parallel plane at depth `beta`.
    pub const fn flat(beta: f64) -> Self {
        Self {
            beta,
            y1: 0.0,
            y2: 0.0,
            y11: 0.0,
            y12: 0.0,
            y22: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(GeometryError::InvalidDepth(self.beta));
        }
        let rest = [self.y1, self.y2, self.y11, self.y12, self.y22];
        if rest.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(GeometryError::NonFinite)
        }
    }

    pub fn raw(&self) -> RawDepthDerivatives {
        let b = self.beta;
        RawDepthDerivatives {
            beta: b,
            b1: b * self.y1,
            b2: b * self.y2,
            b11: b * self.y11,
            b12: b * self.y12,
            b22: b * self.y22,
        }
    }

    /// Same surface with the second-order terms dropped (local planarity).
    pub fn first_order_only(&self) -> Self {
        Self {
            y11: 0.0,
            y12: 0.0,
            y22: 0.0,
            ..*self
        }
    }

    pub fn with_beta(&self, beta: f64) -> Self {
        Self { beta, ..*self }
    }

    /// `[beta, y1, y2, y11, y12, y22]`
    pub fn to_array(&self) -> [f64; 6] {
        [self.beta, self.y1, self.y2, self.y11, self.y12, self.y22]
    }
}

/// `E = (e1, e2, e3)` with `e1 = dPhi/du`, `e2 = dPhi/dv`, `e3 = e1 x e2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MovingFrame {
    pub e1: Vector3<f64>,
    pub e2: Vector3<f64>,
    pub e3: Vector3<f64>,
}

impl MovingFrame {
    /// The frame as a matrix with `e1, e2, e3` as columns.
    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::from_columns(&[self.e1, self.e2, self.e3])
    }
}

/// Connection coefficients `Gamma^i_{jk}`: row `i`, column `j`, block `k`
/// (`k = 0` for the u-derivative, `k = 1` for the v-derivative).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConnectionMatrix {
    pub gamma: SMatrix<f64, 3, 6>,
}

impl ConnectionMatrix {
    /// The 3x3 block for derivative direction `k` (0 = u, 1 = v), so that
    /// `dE/du_k = E * block(k)`.
    pub fn block(&self, k: usize) -> Matrix3<f64> {
        assert!(k < 2);
        self.gamma.fixed_view::<3, 3>(0, 3 * k).into_owned()
    }

    pub fn blocks(&self) -> [Matrix3<f64>; 2] {
        [self.block(0), self.block(1)]
    }
}

pub fn project(z: &Vector3<f64>) -> Result<PixelPoint, GeometryError> {
    if !(z[2] > 0.0) {
        return Err(GeometryError::BehindCamera(z[2]));
    }
    Ok(PixelPoint::new(z[0] / z[2], z[1] / z[2]))
}

pub fn embed(p: &PixelPoint, beta: f64) -> Result<Vector3<f64>, GeometryError> {
    if !(beta.is_finite() && beta > 0.0) {
        return Err(GeometryError::InvalidDepth(beta));
    }
    Ok(Vector3::new(beta * p.u, beta * p.v, beta))
}

pub fn moving_frame(p: &PixelPoint, jet: &DepthJet) -> MovingFrame {
    let (u, v, b) = (p.u, p.v, jet.beta);
    let (y1, y2) = (jet.y1, jet.y2);
    MovingFrame {
        e1: Vector3::new(y1 * u + 1.0, y1 * v, y1) * b,
        e2: Vector3::new(y2 * u, y2 * v + 1.0, y2) * b,
        e3: Vector3::new(-y1, -y2, y1 * u + y2 * v + 1.0) * (b * b),
    }
}

/// Partial derivatives of the moving frame, `(dE/du, dE/dv)`, assembled
/// side by side as the 3x6 right factor.
pub fn frame_derivatives(p: &PixelPoint, jet: &DepthJet) -> SMatrix<f64, 3, 6> {
    let (u, v) = (p.u, p.v);
    let RawDepthDerivatives {
        beta: b,
        b1,
        b2,
        b11,
        b12,
        b22,
    } = jet.raw();
    let t1 = 3.0 * b * b1 + u * b1 * b1 + u * b * b11 + v * b12 * b + v * b1 * b2;
    let t2 = u * b2 * b1 + u * b * b12 + 3.0 * b * b2 + v * b2 * b2 + v * b * b22;
    #[rustfmt::skip]
    let right = SMatrix::<f64, 3, 6>::from_row_slice(&[
        b11 * u + 2.0 * b1, b2 + b12 * u, -b1 * b1 - b * b11,   b12 * u + b2, b22 * u,            -b * b12 - b1 * b2,
        b11 * v,            b12 * v + b1, -b1 * b2 - b * b12,   b12 * v + b1, b22 * v + 2.0 * b2, -b * b22 - b2 * b2,
        b11,                b12,          t1,                   b12,          b22,                t2,
    ]);
    right
}

/// 1-norm condition number of a 3x3 matrix, `None` when singular.
fn condition_1(m: &Matrix3<f64>) -> Option<(f64, Matrix3<f64>)> {
    let inv = m.try_inverse()?;
    let norm1 = |a: &Matrix3<f64>| (0..3).map(|c| a.column(c).abs().sum()).fold(0.0, f64::max);
    Some((norm1(m) * norm1(&inv), inv))
}

pub fn connection(p: &PixelPoint, jet: &DepthJet) -> Result<ConnectionMatrix, GeometryError> {
    jet.validate()?;
    let left = moving_frame(p, jet).matrix();
    let (cond, inv) = condition_1(&left).ok_or(GeometryError::DegenerateFrame(f64::INFINITY))?;
    if !(cond <= MAX_FRAME_CONDITION) {
        return Err(GeometryError::DegenerateFrame(cond));
    }
    Ok(ConnectionMatrix {
        gamma: inv * frame_derivatives(p, jet),
    })
}
