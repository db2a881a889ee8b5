//! Track files: a short header followed by one CSV row per observation.
//!
//! ```text
//! connrsfm-tracks 1
//! frames 7
//! points 100
//! intrinsics normalized
//! point,frame,u,v
//! 0,0,0.0123,-0.0456
//! ```
//!
//! `intrinsics fx fy cx cy` marks image-pixel rows; they are converted to
//! retinal coordinates on reading.

use std::collections::HashSet;
use std::fmt::Write as _;

use connrsfm_core::geometry::{Intrinsics, PixelPoint};
use serde::Deserialize;

use crate::CliError;

pub const MAGIC: &str = "connrsfm-tracks";
pub const VERSION: u32 = 1;

/// Observed tracks in retinal coordinates, `[point][frame]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackFile {
    pub n_frames: usize,
    pub tracks: Vec<Vec<Option<PixelPoint>>>,
}

#[derive(Deserialize)]
struct Row {
    point: usize,
    frame: usize,
    u: f64,
    v: f64,
}

fn header_value<'a>(line: Option<&'a str>, key: &str, line_no: usize) -> Result<&'a str, CliError> {
    let line = line.ok_or_else(|| CliError::tracks(line_no, format!("missing `{key}` line")))?;
    line.strip_prefix(key)
        .and_then(|rest| rest.strip_prefix(' '))
        .map(str::trim)
        .ok_or_else(|| CliError::tracks(line_no, format!("expected `{key} ...`, found `{line}`")))
}

fn parse_count(text: &str, key: &str, line_no: usize) -> Result<usize, CliError> {
    text.parse()
        .map_err(|_| CliError::tracks(line_no, format!("`{key}` is not a count: `{text}`")))
}

fn parse_intrinsics(text: &str) -> Result<Intrinsics, CliError> {
    if text == "normalized" {
        return Ok(Intrinsics::NORMALIZED);
    }
    let values: Vec<f64> = text
        .split_whitespace()
        .map(str::parse)
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::tracks(4, format!("bad intrinsics `{text}`")))?;
    match values[..] {
        [fx, fy, cx, cy]
            if fx.is_finite()
                && fy.is_finite()
                && fx != 0.0
                && fy != 0.0
                && cx.is_finite()
                && cy.is_finite() =>
        {
            Ok(Intrinsics { fx, fy, cx, cy })
        }
        _ => Err(CliError::tracks(
            4,
            format!("intrinsics need four finite values and non-zero focals, got `{text}`"),
        )),
    }
}

impl TrackFile {
    pub fn n_points(&self) -> usize {
        self.tracks.len()
    }

    pub fn row_count(&self) -> usize {
        self.tracks.iter().flatten().filter(|t| t.is_some()).count()
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut lines = text.lines();
        let magic = lines.next().unwrap_or_default();
        let version = magic.strip_prefix(MAGIC).map(str::trim).ok_or_else(|| {
            CliError::tracks(
                1,
                format!("not a track file (expected `{MAGIC} {VERSION}`)"),
            )
        })?;
        if version != VERSION.to_string() {
            return Err(CliError::tracks(
                1,
                format!("unsupported version `{version}`"),
            ));
        }
        let n_frames = parse_count(header_value(lines.next(), "frames", 2)?, "frames", 2)?;
        let n_points = parse_count(header_value(lines.next(), "points", 3)?, "points", 3)?;
        let intrinsics = parse_intrinsics(header_value(lines.next(), "intrinsics", 4)?)?;
        if n_frames == 0 || n_points == 0 {
            return Err(CliError::tracks(
                3,
                "frames and points must be positive".into(),
            ));
        }

        let body: String = lines.collect::<Vec<_>>().join("\n");
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(body.as_bytes());
        let header_ok = reader
            .headers()
            .map(|h| h.iter().eq(["point", "frame", "u", "v"]))
            .unwrap_or(false);
        if !header_ok {
            return Err(CliError::tracks(
                5,
                "expected column header `point,frame,u,v`".into(),
            ));
        }
        let mut tracks = vec![vec![None; n_frames]; n_points];
        let mut seen = HashSet::new();
        for (k, row) in reader.deserialize::<Row>().enumerate() {
            let line_no = 6 + k;
            let row = row.map_err(|e| CliError::tracks(line_no, e.to_string()))?;
            if row.point >= n_points || row.frame >= n_frames {
                return Err(CliError::tracks(
                    line_no,
                    format!(
                        "id ({}, {}) outside {n_points} points × {n_frames} frames",
                        row.point, row.frame
                    ),
                ));
            }
            if !(row.u.is_finite() && row.v.is_finite()) {
                return Err(CliError::tracks(line_no, "non-finite coordinate".into()));
            }
            if !seen.insert((row.point, row.frame)) {
                return Err(CliError::tracks(
                    line_no,
                    format!("duplicate row for ({}, {})", row.point, row.frame),
                ));
            }
            tracks[row.point][row.frame] = Some(intrinsics.to_retinal(row.u, row.v));
        }
        if let Some(p) = tracks
            .iter()
            .position(|row| row.iter().all(Option::is_none))
        {
            return Err(CliError::tracks(
                0,
                format!("point ids are not dense: point {p} has no rows"),
            ));
        }
        Ok(Self { n_frames, tracks })
    }

    /// Text in retinal coordinates. Floats use the shortest representation
    /// that reads back to the same value.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{MAGIC} {VERSION}\nframes {}\npoints {}\nintrinsics normalized\npoint,frame,u,v\n",
            self.n_frames,
            self.n_points()
        );
        for (p, row) in self.tracks.iter().enumerate() {
            for (f, px) in row.iter().enumerate() {
                if let Some(px) = px {
                    writeln!(out, "{p},{f},{},{}", px.u, px.v).expect("writing to a string");
                }
            }
        }
        out
    }
}
