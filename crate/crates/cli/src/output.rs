//! Rendering of result files and their all-or-nothing placement.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use connrsfm_core::solver::{ConvergenceTrace, ProblemState};
use nalgebra::Vector3;
use serde::Deserialize;

use crate::pipeline::{FrameMetrics, Recovered, SweepRow, VerificationReport};
use crate::CliError;

pub const JETS_FILE: &str = "jets.csv";
pub const LAMBDAS_FILE: &str = "lambdas.csv";
pub const EDGES_FILE: &str = "edges.csv";
pub const TRACE_FILE: &str = "trace.csv";
/// Wall-clock times live apart from the other outputs, which are
/// reproducible to the byte.
pub const TIMING_FILE: &str = "timing.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const FRAME_SERIES_FILE: &str = "error_vs_frame.csv";
pub const RATE_SERIES_FILE: &str = "error_vs_rate.csv";
pub const VERIFICATION_FILE: &str = "verification.csv";
pub const TRACKS_FILE: &str = "tracks.csv";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";

pub fn ply_name(frame: usize) -> String {
    format!("frame_{frame:03}.ply")
}

/// File name and contents.
pub type Rendered = (String, String);

fn push_line(out: &mut String, args: std::fmt::Arguments) {
    out.write_fmt(args).expect("writing to a string");
    out.push('\n');
}

macro_rules! line {
    ($out:expr, $($arg:tt)*) => { push_line($out, format_args!($($arg)*)) };
}

/// Optional value as a CSV field; absent values stay empty.
fn field(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn render_ply(frame: usize, points: &[&Recovered]) -> String {
    let mut out = String::new();
    line!(&mut out, "ply\nformat ascii 1.0\ncomment frame {frame}");
    line!(&mut out, "element vertex {}", points.len());
    line!(
        &mut out,
        "property int point\nproperty double x\nproperty double y\nproperty double z"
    );
    line!(
        &mut out,
        "property double nx\nproperty double ny\nproperty double nz\nend_header"
    );
    for r in points {
        let (x, n) = (r.position, r.normal.unwrap_or_else(Vector3::zeros));
        line!(
            &mut out,
            "{} {} {} {} {} {} {}",
            r.point,
            x.x,
            x.y,
            x.z,
            n.x,
            n.y,
            n.z
        );
    }
    out
}

pub fn render_reconstruction(state: &ProblemState, trace: &ConvergenceTrace) -> Vec<Rendered> {
    let recovered = crate::pipeline::recovered(state);
    let mut files = Vec::new();
    for f in 0..state.n_frames {
        let in_frame: Vec<&Recovered> = recovered.iter().filter(|r| r.frame == f).collect();
        files.push((ply_name(f), render_ply(f, &in_frame)));
    }

    let mut jets = String::from("point,frame,beta,y1,y2,y11,y12,y22,x,y,z,nx,ny,nz\n");
    for r in &recovered {
        let j = state.jets[r.point][r.frame].expect("recovered observations have jets");
        let n = r.normal;
        line!(
            &mut jets,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.point,
            r.frame,
            j.beta,
            j.y1,
            j.y2,
            j.y11,
            j.y12,
            j.y22,
            r.position.x,
            r.position.y,
            r.position.z,
            field(n.map(|n| n.x)),
            field(n.map(|n| n.y)),
            field(n.map(|n| n.z))
        );
    }
    files.push((JETS_FILE.into(), jets));

    let mut lambdas = String::from("point,edge,src,dst,lambda\n");
    for (p, row) in state.lambdas.iter().enumerate() {
        for (e, l) in row.iter().enumerate() {
            if let Some(l) = l {
                line!(
                    &mut lambdas,
                    "{p},{e},{},{},{l}",
                    state.warps[e].i,
                    state.warps[e].j
                );
            }
        }
    }
    files.push((LAMBDAS_FILE.into(), lambdas));

    let mut edges = String::from("edge,src,dst,matches,omega\n");
    for (e, (w, g)) in state.warps.iter().zip(&state.graph.edges).enumerate() {
        line!(&mut edges, "{e},{},{},{},{}", w.i, w.j, g.weight, w.omega);
    }
    files.push((EDGES_FILE.into(), edges));

    let mut tr = String::from("iteration,terminal,residual_norm\n");
    let mut timing = String::from("iteration,wall_seconds\n");
    for t in &trace.entries {
        line!(
            &mut tr,
            "{},{},{}",
            t.iteration,
            t.terminal,
            t.residual_norm
        );
        line!(&mut timing, "{},{}", t.iteration, t.wall_time.as_secs_f64());
    }
    files.push((TRACE_FILE.into(), tr));
    files.push((TIMING_FILE.into(), timing));
    files
}

pub fn render_metrics(frames: &[FrameMetrics], mean: (f64, f64)) -> Vec<Rendered> {
    let mut metrics = String::from("frame,points,pct3d,shape_deg\n");
    let mut series = String::from("frame,pct3d,shape_deg\n");
    for m in frames {
        line!(
            &mut metrics,
            "{},{},{},{}",
            m.frame,
            m.points,
            m.pct3d,
            m.shape_deg
        );
        line!(&mut series, "{},{},{}", m.frame, m.pct3d, m.shape_deg);
    }
    let points: usize = frames.iter().map(|m| m.points).sum();
    line!(&mut metrics, "mean,{points},{},{}", mean.0, mean.1);
    vec![
        (METRICS_FILE.into(), metrics),
        (FRAME_SERIES_FILE.into(), series),
    ]
}

pub fn render_sweep(rows: &[SweepRow]) -> Vec<Rendered> {
    let mut out = String::from("rate,pct3d,shape_deg\n");
    for r in rows {
        line!(&mut out, "{},{},{}", r.rate, r.pct3d, r.shape_deg);
    }
    vec![(RATE_SERIES_FILE.into(), out)]
}

pub fn render_verification(report: &VerificationReport) -> Vec<Rendered> {
    let mut out = String::from("pair,second_order_pct,first_order_pct\n");
    for (k, (s, f)) in report
        .second_order
        .iter()
        .zip(&report.first_order)
        .enumerate()
    {
        line!(&mut out, "{},{s},{f}", k + 1);
    }
    vec![(VERIFICATION_FILE.into(), out)]
}

#[derive(Deserialize)]
struct JetRow {
    point: usize,
    frame: usize,
    x: f64,
    y: f64,
    z: f64,
    nx: Option<f64>,
    ny: Option<f64>,
    nz: Option<f64>,
}

/// Reads the observations back from a reconstruction directory.
pub fn read_recovered(dir: &Path) -> Result<Vec<Recovered>, CliError> {
    let path = dir.join(JETS_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    reader
        .deserialize::<JetRow>()
        .map(|row| {
            let r = row.map_err(|e| CliError::Reconstruction(format!("{JETS_FILE}: {e}")))?;
            let normal = match (r.nx, r.ny, r.nz) {
                (Some(a), Some(b), Some(c)) => Some(Vector3::new(a, b, c)),
                _ => None,
            };
            Ok(Recovered {
                point: r.point,
                frame: r.frame,
                position: Vector3::new(r.x, r.y, r.z),
                normal,
            })
        })
        .collect()
}

/// Writes every file into a staging directory inside `out` and only then
/// moves them into place, so a failure leaves no partial result behind.
pub fn write_all(out: &Path, files: &[Rendered]) -> Result<Vec<PathBuf>, CliError> {
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let staging = tempfile::Builder::new()
        .prefix(".staging-")
        .tempdir_in(out)
        .map_err(|e| CliError::io(out, e))?;
    for (name, contents) in files {
        let path = staging.path().join(name);
        std::fs::write(&path, contents).map_err(|e| CliError::io(&path, e))?;
    }
    files
        .iter()
        .map(|(name, _)| {
            let target = out.join(name);
            std::fs::rename(staging.path().join(name), &target)
                .map_err(|e| CliError::io(&target, e))?;
            Ok(target)
        })
        .collect()
}
