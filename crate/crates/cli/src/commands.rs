//! The four commands. Each one reads and validates all of its inputs and
//! computes every result before the first file is written.

use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::ground_truth::GroundTruth;
use crate::output::{self, Rendered};
use crate::pipeline;
use crate::tracks::TrackFile;
use crate::CliError;

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn load_tracks(path: &Path) -> Result<TrackFile, CliError> {
    TrackFile::parse(&read(path)?)
}

pub fn load_ground_truth(path: &Path) -> Result<GroundTruth, CliError> {
    GroundTruth::parse(&read(path)?)
}

/// Writes `tracks.csv` and `ground_truth.json`.
pub fn generate(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let files = render_generate(cfg)?;
    output::write_all(out, &files)
}

pub fn render_generate(cfg: &RunConfig) -> Result<Vec<Rendered>, CliError> {
    let ds = pipeline::generate(cfg)?;
    Ok(vec![
        (
            output::TRACKS_FILE.into(),
            pipeline::tracks_of(&ds).to_text(),
        ),
        (
            output::GROUND_TRUTH_FILE.into(),
            GroundTruth::from_dataset(&ds, cfg.missing.rate).to_json(),
        ),
    ])
}

/// Writes one PLY per frame plus the jet, scale, edge, trace and timing
/// tables. The ground truth is only read for analytic warps.
pub fn reconstruct(
    cfg: &RunConfig,
    tracks: &Path,
    ground_truth: Option<&Path>,
    out: &Path,
) -> Result<Vec<PathBuf>, CliError> {
    let files = render_reconstruct(cfg, tracks, ground_truth)?;
    output::write_all(out, &files)
}

pub fn render_reconstruct(
    cfg: &RunConfig,
    tracks: &Path,
    ground_truth: Option<&Path>,
) -> Result<Vec<Rendered>, CliError> {
    let tracks = load_tracks(tracks)?;
    let scenes = match ground_truth {
        Some(path) => {
            let gt = load_ground_truth(path)?;
            if gt.n_frames() != tracks.n_frames {
                return Err(CliError::FrameMismatch {
                    expected: gt.n_frames(),
                    found: tracks.n_frames,
                });
            }
            Some(gt.ball_scenes()?)
        }
        None => None,
    };
    let (state, trace) = pipeline::reconstruct(&tracks, cfg, scenes.as_deref())?;
    Ok(output::render_reconstruction(&state, &trace))
}

/// Writes per-frame and mean errors of a reconstruction directory.
pub fn evaluate(recon: &Path, ground_truth: &Path, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let gt = load_ground_truth(ground_truth)?;
    let recovered = output::read_recovered(recon)?;
    let frames_in_recon = recovered.iter().map(|r| r.frame + 1).max().unwrap_or(0);
    if frames_in_recon > gt.n_frames() {
        return Err(CliError::FrameMismatch {
            expected: gt.n_frames(),
            found: frames_in_recon,
        });
    }
    let frames = pipeline::frame_metrics(&recovered, &gt)?;
    if frames.is_empty() {
        return Err(CliError::Reconstruction(
            "no frame has three reconstructed points".into(),
        ));
    }
    output::write_all(
        out,
        &output::render_metrics(&frames, pipeline::mean_metrics(&frames)),
    )
}

/// Writes `error_vs_rate.csv` over the configured missing rates.
pub fn sweep(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let rows = pipeline::missing_rate_sweep(cfg)?;
    output::write_all(out, &output::render_sweep(&rows))
}

/// Writes the verification indexes with and without second-order terms.
pub fn verify_theorem(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let report = pipeline::verify_theorem(cfg)?;
    output::write_all(out, &output::render_verification(&report))
}
