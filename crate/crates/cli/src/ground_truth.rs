//! JSON sidecar holding the ground truth of a generated dataset.

use connrsfm_core::geometry::{DepthJet, PixelPoint};
use connrsfm_core::synthetic::{BallScene, SyntheticDataset};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub center: [f64; 3],
    pub radius: f64,
}

/// Noise-free observation of one point in one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Observation {
    pub pixel: [f64; 2],
    /// `[β, y1, y2, y11, y12, y22]`
    pub jet: [f64; 6],
    pub position: [f64; 3],
    pub normal: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub version: u32,
    pub seed: u64,
    pub noise_sigma_px: f64,
    pub missing_rate: f64,
    pub scenes: Vec<Scene>,
    /// `lambda[i][j] = R_i / R_j`
    pub lambda: Vec<Vec<f64>>,
    /// `[point][frame]`, every frame present.
    pub points: Vec<Vec<Observation>>,
}

fn arr3(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

impl GroundTruth {
    pub fn from_dataset(ds: &SyntheticDataset, missing_rate: f64) -> Self {
        let n = ds.n_frames();
        Self {
            version: VERSION,
            seed: ds.seed,
            noise_sigma_px: ds.noise_sigma,
            missing_rate,
            scenes: ds
                .scenes
                .iter()
                .map(|s| Scene {
                    center: arr3(&s.center),
                    radius: s.radius,
                })
                .collect(),
            lambda: (0..n)
                .map(|i| (0..n).map(|j| ds.gt_lambda(i, j)).collect())
                .collect(),
            points: (0..ds.n_points())
                .map(|p| {
                    (0..n)
                        .map(|f| Observation {
                            pixel: [ds.gt_pixels[p][f].u, ds.gt_pixels[p][f].v],
                            jet: ds.gt_jets[p][f].to_array(),
                            position: arr3(&ds.gt_points[p][f]),
                            normal: arr3(&ds.gt_normals[p][f]),
                        })
                        .collect()
                })
                .collect(),
        }
    }

    pub fn n_frames(&self) -> usize {
        self.scenes.len()
    }

    pub fn n_points(&self) -> usize {
        self.points.len()
    }

    pub fn position(&self, p: usize, f: usize) -> Vector3<f64> {
        Vector3::from(self.points[p][f].position)
    }

    pub fn normal(&self, p: usize, f: usize) -> Vector3<f64> {
        Vector3::from(self.points[p][f].normal)
    }

    pub fn jet(&self, p: usize, f: usize) -> DepthJet {
        let [beta, y1, y2, y11, y12, y22] = self.points[p][f].jet;
        DepthJet {
            beta,
            y1,
            y2,
            y11,
            y12,
            y22,
        }
    }

    pub fn pixel(&self, p: usize, f: usize) -> PixelPoint {
        let [u, v] = self.points[p][f].pixel;
        PixelPoint::new(u, v)
    }

    pub fn ball_scenes(&self) -> Result<Vec<BallScene>, CliError> {
        self.scenes
            .iter()
            .map(|s| BallScene::new(Vector3::from(s.center), s.radius))
            .collect::<Result<_, _>>()
            .map_err(|e| CliError::GroundTruth(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("ground truth serializes");
        text.push('\n');
        text
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let gt: Self =
            serde_json::from_str(text).map_err(|e| CliError::GroundTruth(e.to_string()))?;
        gt.validate()?;
        Ok(gt)
    }

    fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::GroundTruth(m));
        if self.version != VERSION {
            return bad(format!("unsupported version {}", self.version));
        }
        let n = self.n_frames();
        if n == 0 {
            return bad("no frames".into());
        }
        if self.lambda.len() != n || self.lambda.iter().any(|row| row.len() != n) {
            return bad(format!("lambda table is not {n} × {n}"));
        }
        if let Some(p) = self.points.iter().position(|row| row.len() != n) {
            return bad(format!("point {p} does not have {n} frames"));
        }
        let finite = self.points.iter().flatten().all(|o| {
            o.pixel
                .iter()
                .chain(&o.jet)
                .chain(&o.position)
                .chain(&o.normal)
                .all(|x| x.is_finite())
        });
        if !finite {
            return bad("non-finite ground-truth value".into());
        }
        self.ball_scenes().map(|_| ())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use connrsfm_core::synthetic::{ball_sequence, generate_balls};

    #[test]
    fn json_round_trips_exactly() {
        let ds = generate_balls(5, &ball_sequence(3, 2), 2).unwrap();
        let gt = GroundTruth::from_dataset(&ds, 0.0);
        let back = GroundTruth::parse(&gt.to_json()).unwrap();
        assert_eq!(back, gt);
        assert_eq!(back.jet(3, 2), ds.gt_jets[3][2]);
        assert_eq!(back.ball_scenes().unwrap(), ds.scenes);
    }

    #[test]
    fn inconsistent_tables_are_rejected() {
        let ds = generate_balls(3, &ball_sequence(2, 2), 2).unwrap();
        let mut gt = GroundTruth::from_dataset(&ds, 0.0);
        gt.points[1].pop();
        assert!(GroundTruth::parse(&gt.to_json()).is_err());
        let mut gt = GroundTruth::from_dataset(&ds, 0.0);
        gt.scenes[0].radius = -1.0;
        assert!(GroundTruth::parse(&gt.to_json()).is_err());
    }
}
