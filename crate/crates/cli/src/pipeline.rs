//! In-memory pipeline stages shared by the commands.

use connrsfm_core::evaluation::{percent_3d_error, shape_error};
use connrsfm_core::geometry::Intrinsics;
use connrsfm_core::solver::{run, ConvergenceTrace, ProblemState};
use connrsfm_core::synthetic::{
    add_noise, analytic_warp_jet, apply_missing, ball_sequence, generate_balls, verification_index,
    BallScene, SyntheticDataset,
};
use log::info;
use nalgebra::Vector3;

use crate::config::{RunConfig, Stream, WarpSource};
use crate::ground_truth::GroundTruth;
use crate::tracks::TrackFile;
use crate::CliError;

/// Generated sequence with noise and missing observations applied to the
/// tracks. Ground truth stays noise-free and complete.
pub fn generate(cfg: &RunConfig) -> Result<SyntheticDataset, CliError> {
    let scene_seed = cfg.stream_seed(Stream::Scene);
    let scenes = ball_sequence(cfg.scene.balls, scene_seed);
    let ds = generate_balls(cfg.scene.points, &scenes, scene_seed)?;
    let f = cfg.camera.focal_px;
    let camera = Intrinsics {
        fx: f,
        fy: f,
        cx: 0.0,
        cy: 0.0,
    };
    let ds = add_noise(
        &ds,
        cfg.noise.sigma_px,
        &camera,
        cfg.stream_seed(Stream::Noise),
    )?;
    if cfg.missing.rate == 0.0 {
        return Ok(ds);
    }
    let (ds, report) = apply_missing(&ds, cfg.missing.rate, cfg.stream_seed(Stream::Missing))?;
    info!(
        "masked {} observations, {} kept to preserve two views",
        report.masked, report.protected
    );
    Ok(ds)
}

pub fn tracks_of(ds: &SyntheticDataset) -> TrackFile {
    TrackFile {
        n_frames: ds.n_frames(),
        tracks: ds.tracks.clone(),
    }
}

/// Graph selection, warps and the solver.
pub fn reconstruct(
    tracks: &TrackFile,
    cfg: &RunConfig,
    scenes: Option<&[BallScene]>,
) -> Result<(ProblemState, ConvergenceTrace), CliError> {
    let options = cfg.warp_options();
    let pixels = tracks.tracks.clone();
    let state = match cfg.warp.source {
        WarpSource::Fitted => ProblemState::from_tracks(pixels, tracks.n_frames, &options)?,
        WarpSource::Analytic => {
            let scenes = scenes.ok_or(CliError::MissingInput(
                "analytic warps need the ground-truth file",
            ))?;
            if scenes.len() != tracks.n_frames {
                return Err(CliError::FrameMismatch {
                    expected: scenes.len(),
                    found: tracks.n_frames,
                });
            }
            ProblemState::from_tracks_with_jets(pixels, tracks.n_frames, &options, |_, i, j, p| {
                analytic_warp_jet(&scenes[i], &scenes[j], p).ok()
            })?
        }
    };
    info!(
        "{} edges, {} of {} points reconstructable",
        state.warps.len(),
        state.reconstructable_points(),
        state.n_points()
    );
    let (state, trace) = run(state, &cfg.solver_config())?;
    info!(
        "{} outer iterations, converged: {}",
        trace.entries.len(),
        trace.converged
    );
    Ok((state, trace))
}

/// One reconstructed observation.
#[derive(Clone, Debug, PartialEq)]
pub struct Recovered {
    pub point: usize,
    pub frame: usize,
    pub position: Vector3<f64>,
    pub normal: Option<Vector3<f64>>,
}

pub fn recovered(state: &ProblemState) -> Vec<Recovered> {
    let mut out = Vec::new();
    for p in 0..state.n_points() {
        for f in 0..state.n_frames {
            if let Some(position) = state.point3(p, f) {
                out.push(Recovered {
                    point: p,
                    frame: f,
                    position,
                    normal: state.normal(p, f),
                });
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameMetrics {
    pub frame: usize,
    pub points: usize,
    pub pct3d: f64,
    pub shape_deg: f64,
}

/// Per-frame errors against ground truth. Frames with fewer than three
/// reconstructed points are skipped.
pub fn frame_metrics(
    recovered: &[Recovered],
    gt: &GroundTruth,
) -> Result<Vec<FrameMetrics>, CliError> {
    let mut out = Vec::new();
    for f in 0..gt.n_frames() {
        let rows: Vec<&Recovered> = recovered.iter().filter(|r| r.frame == f).collect();
        if let Some(r) = rows.iter().find(|r| r.point >= gt.n_points()) {
            return Err(CliError::PointMismatch {
                expected: gt.n_points(),
                found: r.point + 1,
            });
        }
        if rows.len() < 3 {
            continue;
        }
        let recon: Vec<Vector3<f64>> = rows.iter().map(|r| r.position).collect();
        let truth: Vec<Vector3<f64>> = rows.iter().map(|r| gt.position(r.point, f)).collect();
        let (n_rec, n_gt): (Vec<_>, Vec<_>) = rows
            .iter()
            .filter_map(|r| Some((r.normal?, gt.normal(r.point, f))))
            .unzip();
        let shape_deg = if n_rec.is_empty() {
            f64::NAN
        } else {
            shape_error(&n_rec, &n_gt)?
        };
        out.push(FrameMetrics {
            frame: f,
            points: rows.len(),
            pct3d: percent_3d_error(&recon, &truth)?,
            shape_deg,
        });
    }
    Ok(out)
}

/// Mean `(pct3d, shape_deg)` over frames.
pub fn mean_metrics(frames: &[FrameMetrics]) -> (f64, f64) {
    let n = frames.len() as f64;
    let pct = frames.iter().map(|m| m.pct3d).sum::<f64>() / n;
    let shape = frames.iter().map(|m| m.shape_deg).sum::<f64>() / n;
    (pct, shape)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub rate: f64,
    pub pct3d: f64,
    pub shape_deg: f64,
}

/// Generates, reconstructs and evaluates the configured sequence at every
/// sweep rate.
pub fn missing_rate_sweep(cfg: &RunConfig) -> Result<Vec<SweepRow>, CliError> {
    cfg.sweep
        .rates
        .iter()
        .map(|&rate| {
            let mut at = cfg.clone();
            at.missing.rate = rate;
            let ds = generate(&at)?;
            let gt = GroundTruth::from_dataset(&ds, rate);
            let (state, _) = reconstruct(&tracks_of(&ds), &at, Some(&ds.scenes))?;
            let (pct3d, shape_deg) = mean_metrics(&frame_metrics(&recovered(&state), &gt)?);
            info!("rate {rate}: {pct3d:.3}% 3D, {shape_deg:.3} deg");
            Ok(SweepRow {
                rate,
                pct3d,
                shape_deg,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerificationReport {
    pub second_order: Vec<f64>,
    pub first_order: Vec<f64>,
}

/// Identity gap of a reference ball against each matched ball, with and
/// without the second-order depth terms.
pub fn verify_theorem(cfg: &RunConfig) -> Result<VerificationReport, CliError> {
    let seed = cfg.stream_seed(Stream::Scene);
    let scenes = ball_sequence(cfg.scene.verification_pairs + 1, seed);
    let ds = generate_balls(cfg.scene.points, &scenes, seed)?;
    Ok(VerificationReport {
        second_order: verification_index(&ds, true)?,
        first_order: verification_index(&ds, false)?,
    })
}
