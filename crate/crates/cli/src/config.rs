//! Run configuration, read from a TOML file. Every section and key is
//! optional; unknown keys are rejected.

use std::path::{Path, PathBuf};

use connrsfm_core::solver::{Initialization, ResidualScaling, SolverConfig, WarpOptions};
use connrsfm_core::spline::SplineGrid;
use serde::Deserialize;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Source of every random draw; sub-streams are derived from it.
    pub seed: u64,
    /// Solver worker threads, 0 for one per core.
    pub threads: usize,
    pub scene: SceneConfig,
    pub camera: CameraConfig,
    pub edges: EdgesConfig,
    pub warp: WarpConfig,
    pub solver: SolverSection,
    pub noise: NoiseConfig,
    pub missing: MissingConfig,
    pub sweep: SweepConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            threads: 0,
            scene: SceneConfig::default(),
            camera: CameraConfig::default(),
            edges: EdgesConfig::default(),
            warp: WarpConfig::default(),
            solver: SolverSection::default(),
            noise: NoiseConfig::default(),
            missing: MissingConfig::default(),
            sweep: SweepConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// Frames of the generated sequence, one ball each.
    pub balls: usize,
    pub points: usize,
    /// Ball pairs of the verification report.
    pub verification_pairs: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            balls: 7,
            points: 100,
            verification_pairs: 10,
        }
    }
}

/// Focal length used to express noise in image pixels. Generated tracks
/// are always written in retinal coordinates.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraConfig {
    pub focal_px: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self { focal_px: 500.0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EdgesConfig {
    /// Edges added to the maximum spanning tree; absent adds all.
    pub extra_k: Option<usize>,
    /// Fewest co-visible points per edge.
    pub min_pairs: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WarpSource {
    /// Spline warps fitted to the tracks.
    Fitted,
    /// Closed-form warps of the generating balls, read from the
    /// ground-truth file.
    Analytic,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarpConfig {
    pub source: WarpSource,
    /// Control points per side; the largest tried under cross validation.
    pub grid: usize,
    pub smoothing: f64,
    pub cross_validate: bool,
}

impl Default for WarpConfig {
    fn default() -> Self {
        let w = WarpOptions::default();
        Self {
            source: WarpSource::Fitted,
            grid: w.grid.n_u,
            smoothing: w.smoothing,
            cross_validate: w.cross_validate,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitKind {
    Zero,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalingKind {
    Raw,
    /// Residuals divided by their left-hand sides at the start of each solve.
    Lhs,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    #[serde(rename = "N_t")]
    pub n_t: usize,
    /// Absent uses `1e-4` per unknown.
    pub sigma: Option<f64>,
    pub max_outer: usize,
    pub init: InitKind,
    pub init_amplitude: f64,
    pub scaling: ScalingKind,
}

impl Default for SolverSection {
    fn default() -> Self {
        let s = SolverConfig::default();
        Self {
            n_t: s.inner_iterations,
            sigma: s.sigma,
            max_outer: s.max_outer,
            init: InitKind::Zero,
            init_amplitude: 0.1,
            scaling: ScalingKind::Raw,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub sigma_px: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MissingConfig {
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub rates: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            rates: (0..8).map(|k| k as f64 / 10.0).collect(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub tracks: Option<PathBuf>,
    pub ground_truth: Option<PathBuf>,
    pub reconstruction: Option<PathBuf>,
}

/// Stream identifiers mixed into the seed.
#[derive(Clone, Copy, Debug)]
pub enum Stream {
    Scene,
    Noise,
    Missing,
    Init,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.scene.balls < 2 {
            return bad(format!(
                "scene.balls must be at least 2, got {}",
                self.scene.balls
            ));
        }
        if self.scene.points < 3 || self.scene.verification_pairs == 0 {
            return bad(
                "scene.points must be at least 3 and scene.verification_pairs positive".into(),
            );
        }
        if !(self.camera.focal_px.is_finite() && self.camera.focal_px > 0.0) {
            return bad(format!(
                "camera.focal_px must be positive, got {}",
                self.camera.focal_px
            ));
        }
        if self.warp.grid < 4 {
            return bad(format!(
                "warp.grid must be at least 4, got {}",
                self.warp.grid
            ));
        }
        if !(self.warp.smoothing.is_finite() && self.warp.smoothing >= 0.0) {
            return bad(format!(
                "warp.smoothing must be non-negative, got {}",
                self.warp.smoothing
            ));
        }
        if self.solver.n_t == 0 || self.solver.max_outer == 0 {
            return bad("solver.N_t and solver.max_outer must be positive".into());
        }
        if let Some(s) = self.solver.sigma {
            if !(s.is_finite() && s > 0.0) {
                return bad(format!("solver.sigma must be positive, got {s}"));
            }
        }
        if !(self.solver.init_amplitude.is_finite() && self.solver.init_amplitude >= 0.0) {
            return bad("solver.init_amplitude must be non-negative".into());
        }
        if !(self.noise.sigma_px.is_finite() && self.noise.sigma_px >= 0.0) {
            return bad(format!(
                "noise.sigma_px must be non-negative, got {}",
                self.noise.sigma_px
            ));
        }
        for &r in std::iter::once(&self.missing.rate).chain(&self.sweep.rates) {
            if !(0.0..1.0).contains(&r) {
                return bad(format!("missing rates must lie in [0, 1), got {r}"));
            }
        }
        if self.sweep.rates.is_empty() {
            return bad("sweep.rates is empty".into());
        }
        Ok(())
    }

    /// Seed of one random stream, derived from the single config seed.
    pub fn stream_seed(&self, stream: Stream) -> u64 {
        let k: u64 = match stream {
            Stream::Scene => 0,
            Stream::Noise => 1,
            Stream::Missing => 2,
            Stream::Init => 3,
        };
        // splitmix64 step keeps the streams apart
        let mut z = self
            .seed
            .wrapping_add(k.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    pub fn warp_options(&self) -> WarpOptions {
        let defaults = WarpOptions::default();
        WarpOptions {
            grid: SplineGrid::new(self.warp.grid, self.warp.grid),
            smoothing: self.warp.smoothing,
            cross_validate: self.warp.cross_validate,
            extra_edges: self.edges.extra_k,
            min_pairs: self.edges.min_pairs.unwrap_or(defaults.min_pairs),
        }
    }

    pub fn solver_config(&self) -> SolverConfig {
        let init = match self.solver.init {
            InitKind::Zero => Initialization::Zero,
            InitKind::Random => Initialization::Random {
                amplitude: self.solver.init_amplitude,
                seed: self.stream_seed(Stream::Init),
            },
        };
        SolverConfig {
            inner_iterations: self.solver.n_t,
            sigma: self.solver.sigma,
            max_outer: self.solver.max_outer,
            threads: self.threads,
            init,
            scaling: match self.solver.scaling {
                ScalingKind::Raw => ResidualScaling::Raw,
                ScalingKind::Lhs => ResidualScaling::LhsNormalized,
            },
            ..SolverConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn documented_keys_parse() {
        let cfg = RunConfig::from_toml(
            "seed = 9\nthreads = 2\n[edges]\nextra_k = 4\n[warp]\ngrid = 6\nsmoothing = 1e-6\n\
             [solver]\nN_t = 5\nsigma = 1e-3\nmax_outer = 7\nscaling = \"lhs\"\n[noise]\nsigma_px = 1.0\n[missing]\nrate = 0.3\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.edges.extra_k, Some(4));
        assert_eq!(cfg.solver.n_t, 5);
        assert_eq!(cfg.solver_config().inner_iterations, 5);
        assert_eq!(cfg.solver_config().scaling, ResidualScaling::LhsNormalized);
        assert_eq!(cfg.warp_options().grid, SplineGrid::new(6, 6));
        assert_eq!(cfg.missing.rate, 0.3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            RunConfig::from_toml("sead = 1"),
            Err(CliError::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_toml("[solver]\nnt = 3"),
            Err(CliError::Config(_))
        ));
    }

    #[test]
    fn out_of_range_values_are_rejected() {
        for text in [
            "[missing]\nrate = 1.0",
            "[warp]\ngrid = 2",
            "[solver]\nN_t = 0",
            "[noise]\nsigma_px = -1.0",
        ] {
            assert!(RunConfig::from_toml(text).is_err(), "{text}");
        }
    }

    #[test]
    fn streams_differ() {
        let cfg = RunConfig::default();
        let seeds = [Stream::Scene, Stream::Noise, Stream::Missing, Stream::Init]
            .map(|s| cfg.stream_seed(s));
        for a in 0..4 {
            for b in a + 1..4 {
                assert_ne!(seeds[a], seeds[b]);
            }
        }
    }
}
