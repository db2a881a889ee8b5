//! Separable, parallel reconstruction of depth jets and conformal scales.
//!
//! The unknowns are a [`DepthJet`] per visible (point, frame) and a
//! conformal scale per (point, edge). They are refined by alternating
//! small independent least-squares problems:
//!
//! * pre-step: first-order terms under an isometric assumption, with a
//!   per-edge depth ratio as nuisance variable;
//! * step 1: second-order terms from the connection residuals;
//! * step 2: first-order terms from all residuals;
//! * step 3: depth per frame by integrating the first-order terms;
//! * step 4: conformal scales from the λ-dependent residuals.
//!
//! Steps 1, 2 and 4 run one task per point, step 3 one task per frame.
//! Tasks only read shared state and write their own output slots, and all
//! results are gathered in a fixed order, so runs are bit-identical for
//! any worker count.

use std::time::{Duration, Instant};

use log::{debug, warn};
use nalgebra::{DMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::constraints::{
    connection_residuals, lambda_sensitive_residuals, lhs_normalizers, prestep_lambda,
    residual_block, ConformalScale, EdgePoint, BLOCK_LEN, CONNECTION_LEN, LAMBDA_SENSITIVE_ENTRIES,
    METRIC_LEN,
};
use crate::depth::{
    cross_validate_integration, integrate_log_depth, integrate_log_depth_robust, normal_from_jet,
};
use crate::geometry::{DepthJet, PixelPoint};
use crate::graph::{greedy_k_esp, max_spanning_tree, GraphError, MatchGraph, SelectedSubgraph};
use crate::nlls::{fd_step, nlls_solve, Bounds, LeastSquaresProblem, NllsOptions};
use crate::spline::{
    cross_validate_warp, fit_warp, warp_jet, CorrespondenceSet, SplineError, SplineGrid,
    SurfaceJet, WarpJet, WarpModel,
};

/// Lower bound on conformal scales.
const LAMBDA_MIN: f64 = 1e-6;
/// Smoothing is raised by this factor when a warp fit is ill-posed.
const SMOOTHING_ESCALATION: f64 = 10.0;
const MAX_SMOOTHING_ESCALATIONS: usize = 8;
/// Per-correspondence smoothing weights tried by cross-validation.
pub const CV_SMOOTHING_CANDIDATES: [f64; 9] =
    [1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2];
const CV_FOLDS: usize = 5;
const MIN_CV_GRID: usize = 4;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("warp for edge ({i}, {j}) failed: {source}")]
    Warp {
        i: usize,
        j: usize,
        source: SplineError,
    },
    #[error("edge ({i}, {j}) has only {got} co-visible points, need {required}")]
    TooFewMatches {
        i: usize,
        j: usize,
        got: usize,
        required: usize,
    },
    #[error("no point can be reconstructed")]
    NothingReconstructable,
    #[error("track table is inconsistent: {0}")]
    InvalidTracks(String),
    #[error("thread pool: {0}")]
    ThreadPool(String),
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
}

/// How the first-order terms are seeded before the pre-step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Initialization {
    Zero,
    /// `y1, y2` uniform in `[-amplitude, amplitude]`.
    Random {
        amplitude: f64,
        seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    /// Iteration cap of every inner least-squares solve.
    pub inner_iterations: usize,
    /// Iteration cap of the pre-step solves.
    pub prestep_iterations: usize,
    /// Convergence threshold on `Terminal(k)`; `None` uses
    /// `1e-4 × variable count`.
    pub sigma: Option<f64>,
    pub max_outer: usize,
    pub damping_init: f64,
    pub beta_min: f64,
    /// Worker threads; 0 lets the pool choose.
    pub threads: usize,
    pub init: Initialization,
    /// Spline settings of the depth integration.
    pub depth_grid: SplineGrid,
    /// Depth smoothing per integrated point.
    pub depth_smoothing: f64,
    /// Raw by default: weights frozen at a random start pull the solve
    /// into a distorted basin.
    pub scaling: ResidualScaling,
    /// Choose the integration grid (up to `depth_grid`) and smoothing per
    /// frame by cross validation instead of using them as given.
    pub depth_cross_validate: bool,
    /// Residual-scale floor of the outlier-resistant depth integration;
    /// `None` integrates by plain least squares.
    pub depth_robust_floor: Option<f64>,
    /// Which jet terms the depth integration writes back.
    pub depth_feedback: DepthFeedback,
    /// Re-solve each pre-step point from the surface-fused jets and keep
    /// the lower-cost solution.
    pub prestep_restart: bool,
}

/// Jet terms refreshed from the integrated log-depth surface of each frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DepthFeedback {
    /// Only `β`.
    Depth,
    /// `β`, `y1` and `y2`.
    FirstOrder,
    /// The whole jet.
    Full,
}

/// Per-residual scaling inside the least-squares solves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResidualScaling {
    /// Residuals as they are, times `sqrt(ω_e)`.
    Raw,
    /// Each residual divided by `|LHS| + 1e-6`, with the left-hand side
    /// evaluated at the state the solve starts from.
    LhsNormalized,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            inner_iterations: 3,
            prestep_iterations: 50,
            sigma: None,
            max_outer: 20,
            damping_init: 1e-3,
            beta_min: 1e-3,
            threads: 0,
            init: Initialization::Zero,
            depth_grid: SplineGrid::default(),
            depth_smoothing: 1e-8,
            scaling: ResidualScaling::Raw,
            depth_cross_validate: true,
            depth_robust_floor: Some(0.02),
            depth_feedback: DepthFeedback::Depth,
            prestep_restart: true,
        }
    }
}

impl SolverConfig {
    fn validate(&self) -> Result<(), SolverError> {
        let bad = |m: &str| Err(SolverError::InvalidConfig(m.to_owned()));
        if self.inner_iterations == 0 || self.prestep_iterations == 0 || self.max_outer == 0 {
            return bad("iteration caps must be positive");
        }
        if !(self.damping_init > 0.0 && self.beta_min > 0.0 && self.depth_smoothing >= 0.0) {
            return bad("damping, beta_min must be positive and smoothing non-negative");
        }
        if let Some(s) = self.sigma {
            if !(s > 0.0) {
                return bad("sigma must be positive");
            }
        }
        Ok(())
    }

    fn nlls(&self, cap: usize) -> NllsOptions {
        NllsOptions {
            damping_init: self.damping_init,
            ..NllsOptions::default()
        }
        .with_max_iterations(cap)
    }

    fn pool(&self) -> Result<rayon::ThreadPool, SolverError> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.threads)
            .build()
            .map_err(|e| SolverError::ThreadPool(e.to_string()))
    }
}

/// How warps and the view graph are built from tracks.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpOptions {
    /// Control grid; with cross-validation, the largest grid tried.
    pub grid: SplineGrid,
    /// Smoothing weight per correspondence, used without cross-validation.
    pub smoothing: f64,
    /// Choose grid and smoothing per warp by cross-validation over square
    /// grids from 4 up to `grid` and [`CV_SMOOTHING_CANDIDATES`].
    pub cross_validate: bool,
    /// Edges added beyond the maximum spanning tree; `None` adds every
    /// available edge.
    pub extra_edges: Option<usize>,
    /// Fewest co-visible points an edge may have.
    pub min_pairs: usize,
}

impl Default for WarpOptions {
    fn default() -> Self {
        Self {
            grid: SplineGrid::default(),
            smoothing: 1e-8,
            cross_validate: true,
            extra_edges: None,
            min_pairs: 5,
        }
    }
}

/// One selected edge, oriented from `i` to `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeWarp {
    pub i: usize,
    pub j: usize,
    pub omega: f64,
    /// `None` when the warp jets were supplied directly.
    pub fitted: Option<FittedWarp>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FittedWarp {
    pub forward: WarpModel,
    pub inverse: WarpModel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProblemState {
    pub n_frames: usize,
    /// Observed pixels, `[point][frame]`.
    pub pixels: Vec<Vec<Option<PixelPoint>>>,
    pub graph: SelectedSubgraph,
    pub warps: Vec<EdgeWarp>,
    /// Warp jet at the source pixel, `[point][edge]`; `None` when the edge
    /// cannot be used for this point.
    pub warp_jets: Vec<Vec<Option<WarpJet>>>,
    /// `[point][frame]`; `None` for observations that take part in no
    /// usable edge.
    pub jets: Vec<Vec<Option<DepthJet>>>,
    /// `[point][edge]`
    pub lambdas: Vec<Vec<Option<f64>>>,
    pub initialized: bool,
}

impl ProblemState {
    /// Selects edges, fits warps and lays out the unknowns.
    pub fn from_tracks(
        pixels: Vec<Vec<Option<PixelPoint>>>,
        n_frames: usize,
        options: &WarpOptions,
    ) -> Result<Self, SolverError> {
        let graph = select_edges(&pixels, n_frames, options, options.min_pairs.max(3))?;
        let warps = graph
            .edges
            .iter()
            .enumerate()
            .map(|(e, edge)| fit_edge(&pixels, edge.i, edge.j, graph.omega(e), options))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::with_warps(pixels, n_frames, graph, warps))
    }

    /// Selects edges like [`ProblemState::from_tracks`] but takes the warp
    /// jets from `jet(point, i, j, source pixel)` instead of fitting them,
    /// for data whose warps are known in closed form.
    pub fn from_tracks_with_jets(
        pixels: Vec<Vec<Option<PixelPoint>>>,
        n_frames: usize,
        options: &WarpOptions,
        jet: impl Fn(usize, usize, usize, &PixelPoint) -> Option<WarpJet>,
    ) -> Result<Self, SolverError> {
        let graph = select_edges(&pixels, n_frames, options, options.min_pairs.max(1))?;
        let warps: Vec<EdgeWarp> = graph
            .edges
            .iter()
            .enumerate()
            .map(|(e, edge)| EdgeWarp {
                i: edge.i,
                j: edge.j,
                omega: graph.omega(e),
                fitted: None,
            })
            .collect();
        let warp_jets = pixels
            .iter()
            .enumerate()
            .map(|(p, row)| {
                warps
                    .iter()
                    .map(|w| {
                        let (src, dst) = (row[w.i]?, row[w.j]?);
                        let mut wj = jet(p, w.i, w.j, &src)?;
                        wj.warped = dst;
                        Some(wj)
                    })
                    .collect()
            })
            .collect();
        Ok(Self::with_warp_jets(
            pixels, n_frames, graph, warps, warp_jets,
        ))
    }

    /// Lays out the unknowns for already fitted warps.
    pub fn with_warps(
        pixels: Vec<Vec<Option<PixelPoint>>>,
        n_frames: usize,
        graph: SelectedSubgraph,
        warps: Vec<EdgeWarp>,
    ) -> Self {
        let warp_jets: Vec<Vec<Option<WarpJet>>> = pixels
            .iter()
            .map(|row| {
                warps
                    .iter()
                    .map(|w| {
                        let (src, dst) = (row[w.i]?, row[w.j]?);
                        let fitted = w.fitted.as_ref()?;
                        let mut jet = warp_jet(&fitted.forward, &fitted.inverse, &src).ok()?;
                        // the unknowns live at the tracked pixel
                        jet.warped = dst;
                        Some(jet)
                    })
                    .collect()
            })
            .collect();
        Self::with_warp_jets(pixels, n_frames, graph, warps, warp_jets)
    }

    /// Lays out the unknowns for given per-point warp jets.
    pub fn with_warp_jets(
        pixels: Vec<Vec<Option<PixelPoint>>>,
        n_frames: usize,
        graph: SelectedSubgraph,
        warps: Vec<EdgeWarp>,
        warp_jets: Vec<Vec<Option<WarpJet>>>,
    ) -> Self {
        let edges: Vec<(usize, usize)> = graph.edges.iter().map(|e| (e.i, e.j)).collect();
        let jets = warp_jets
            .iter()
            .map(|row| {
                let mut used = vec![false; n_frames];
                for (wj, &(i, j)) in row.iter().zip(&edges) {
                    if wj.is_some() {
                        used[i] = true;
                        used[j] = true;
                    }
                }
                used.iter()
                    .map(|&u| u.then(|| DepthJet::flat(1.0)))
                    .collect()
            })
            .collect();
        let lambdas = warp_jets
            .iter()
            .map(|row| row.iter().map(|w| w.map(|_| 1.0)).collect())
            .collect();
        Self {
            n_frames,
            pixels,
            graph,
            warps,
            warp_jets,
            jets,
            lambdas,
            initialized: false,
        }
    }

    pub fn n_points(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_reconstructable(&self, point: usize) -> bool {
        self.warp_jets[point].iter().any(Option::is_some)
    }

    pub fn reconstructable_points(&self) -> usize {
        (0..self.n_points())
            .filter(|&p| self.is_reconstructable(p))
            .count()
    }

    /// Jets, scales and depth unknowns currently active.
    pub fn variable_count(&self) -> usize {
        let jets = self.jets.iter().flatten().flatten().count();
        let lambdas = self.lambdas.iter().flatten().flatten().count();
        6 * jets + lambdas
    }

    fn edge_frames(&self, e: usize) -> (usize, usize) {
        (self.graph.edges[e].i, self.graph.edges[e].j)
    }

    /// Usable edges of a point.
    fn point_edges(&self, p: usize) -> Vec<usize> {
        (0..self.warps.len())
            .filter(|&e| self.warp_jets[p][e].is_some())
            .collect()
    }

    /// Frames with an unknown jet for a point.
    fn point_frames(&self, p: usize) -> Vec<usize> {
        (0..self.n_frames)
            .filter(|&f| self.jets[p][f].is_some())
            .collect()
    }

    fn edge_point<'a>(
        &'a self,
        p: usize,
        e: usize,
        jet_src: &'a DepthJet,
        jet_dst: &'a DepthJet,
    ) -> EdgePoint<'a> {
        let (i, _) = self.edge_frames(e);
        EdgePoint {
            pixel: self.pixels[p][i].expect("edge endpoints are visible"),
            jet_src,
            jet_dst,
            warp: self.warp_jets[p][e].as_ref().expect("edge is usable"),
        }
    }

    /// Weighted 21-residual norm summed over all (point, edge) pairs.
    pub fn residual_norm(&self) -> f64 {
        let mut total = 0.0;
        for p in 0..self.n_points() {
            for e in self.point_edges(p) {
                let (i, j) = self.edge_frames(e);
                let (Some(a), Some(b), Some(l)) =
                    (self.jets[p][i], self.jets[p][j], self.lambdas[p][e])
                else {
                    continue;
                };
                let ep = self.edge_point(p, e, &a, &b);
                let Ok(scale) = ConformalScale::new(l) else {
                    continue;
                };
                if let Ok(r) = residual_block(&ep, scale, self.warps[e].omega) {
                    total += r.norm().powi(2);
                }
            }
        }
        total.sqrt()
    }

    /// 3D point of an observation, `None` when it was not reconstructed.
    pub fn point3(&self, p: usize, f: usize) -> Option<Vector3<f64>> {
        let jet = self.jets[p][f]?;
        let px = self.pixels[p][f]?;
        Some(Vector3::new(px.u, px.v, 1.0) * jet.beta)
    }

    /// Unit surface normal of an observation.
    pub fn normal(&self, p: usize, f: usize) -> Option<Vector3<f64>> {
        normal_from_jet(&self.pixels[p][f]?, &self.jets[p][f]?).ok()
    }

    /// `(point, 3D position)` of every reconstructed observation in frame `f`.
    pub fn frame_points(&self, f: usize) -> Vec<(usize, Vector3<f64>)> {
        (0..self.n_points())
            .filter_map(|p| Some((p, self.point3(p, f)?)))
            .collect()
    }
}

fn fit_edge(
    pixels: &[Vec<Option<PixelPoint>>],
    i: usize,
    j: usize,
    omega: f64,
    options: &WarpOptions,
) -> Result<EdgeWarp, SolverError> {
    let pairs: Vec<(PixelPoint, PixelPoint)> = pixels
        .iter()
        .filter_map(|row| Some((row[i]?, row[j]?)))
        .collect();
    let required = options.min_pairs.max(3);
    if pairs.len() < required {
        return Err(SolverError::TooFewMatches {
            i,
            j,
            got: pairs.len(),
            required,
        });
    }
    let warp_err = |source| SolverError::Warp { i, j, source };
    let set = CorrespondenceSet::with_minimum(i, j, pairs, required).map_err(warp_err)?;
    let fit = |c: &CorrespondenceSet| -> Result<WarpModel, SplineError> {
        let n = c.len() as f64;
        let (grid, mut smoothing) = if options.cross_validate {
            let smallest = MIN_CV_GRID.min(options.grid.n_u).min(options.grid.n_v);
            let grids: Vec<SplineGrid> = (smallest..=options.grid.n_u.max(options.grid.n_v))
                .map(|g| SplineGrid::new(g.min(options.grid.n_u), g.min(options.grid.n_v)))
                .collect();
            let candidates = CV_SMOOTHING_CANDIDATES.map(|s| s * n);
            cross_validate_warp(c, &grids, &candidates, CV_FOLDS)?
        } else {
            (options.grid, options.smoothing * n)
        };
        let mut attempt = 0;
        loop {
            match fit_warp(c, grid, smoothing) {
                Err(SplineError::IllPosed {
                    suggested_smoothing,
                }) if attempt < MAX_SMOOTHING_ESCALATIONS => {
                    attempt += 1;
                    smoothing = (smoothing * SMOOTHING_ESCALATION).max(suggested_smoothing);
                    warn!(
                        "warp ({}, {}) ill-posed, retrying with smoothing {smoothing:.1e}",
                        c.source_frame, c.target_frame
                    );
                }
                other => return other,
            }
        }
    };
    Ok(EdgeWarp {
        i,
        j,
        omega,
        fitted: Some(FittedWarp {
            forward: fit(&set).map_err(warp_err)?,
            inverse: fit(&set.swapped()).map_err(warp_err)?,
        }),
    })
}

/// Maximum spanning tree of the co-visibility graph plus the greedy extra
/// edges. Pairs seeing fewer than `min_pairs` common points are dropped.
fn select_edges(
    pixels: &[Vec<Option<PixelPoint>>],
    n_frames: usize,
    options: &WarpOptions,
    min_pairs: usize,
) -> Result<SelectedSubgraph, SolverError> {
    if pixels.iter().any(|row| row.len() != n_frames) {
        return Err(SolverError::InvalidTracks(format!(
            "every row needs {n_frames} frames"
        )));
    }
    let visible: Vec<Vec<bool>> = pixels
        .iter()
        .map(|r| r.iter().map(Option::is_some).collect())
        .collect();
    let covisible = MatchGraph::from_visibility(&visible, n_frames)?;
    let min_pairs = min_pairs as u64;
    let rows: Vec<Vec<u64>> = (0..n_frames)
        .map(|a| {
            (0..n_frames)
                .map(|b| {
                    let w = covisible.weight(a, b);
                    if w >= min_pairs {
                        w
                    } else {
                        0
                    }
                })
                .collect()
        })
        .collect();
    let match_graph = MatchGraph::from_weights(&rows)?;
    let tree = max_spanning_tree(&match_graph)?;
    let available = match_graph.edges().len() - tree.n_edges();
    let extra = options.extra_edges.map_or(available, |k| k.min(available));
    Ok(greedy_k_esp(&match_graph, &tree, extra)?)
}

/// One block of residuals depending on a few parameters.
struct Block {
    params: Vec<usize>,
}

/// A least-squares problem made of equally sized blocks; the Jacobian is
/// assembled blockwise by central differences.
struct BlockProblem<F: Fn(usize, &[f64], &mut [f64])> {
    n_params: usize,
    block_len: usize,
    blocks: Vec<Block>,
    eval: F,
}

impl<F: Fn(usize, &[f64], &mut [f64])> LeastSquaresProblem for BlockProblem<F> {
    fn n_params(&self) -> usize {
        self.n_params
    }

    fn n_residuals(&self) -> usize {
        self.block_len * self.blocks.len()
    }

    fn residuals(&self, x: &[f64], out: &mut [f64]) {
        for (b, chunk) in out.chunks_mut(self.block_len).enumerate() {
            (self.eval)(b, x, chunk);
        }
    }

    fn jacobian(&self, x: &[f64], jac: &mut DMatrix<f64>) {
        jac.fill(0.0);
        let mut xp = x.to_vec();
        let mut plus = vec![0.0; self.block_len];
        let mut minus = vec![0.0; self.block_len];
        for (b, block) in self.blocks.iter().enumerate() {
            for &c in &block.params {
                let h = fd_step(x[c]);
                xp[c] = x[c] + h;
                (self.eval)(b, &xp, &mut plus);
                xp[c] = x[c] - h;
                (self.eval)(b, &xp, &mut minus);
                xp[c] = x[c];
                for r in 0..self.block_len {
                    jac[(b * self.block_len + r, c)] = (plus[r] - minus[r]) / (2.0 * h);
                }
            }
        }
    }
}

/// Residual factors of one (point, edge) block at the given jets.
fn block_scales(scaling: ResidualScaling, ep: &EdgePoint, lambda: f64) -> [f64; BLOCK_LEN] {
    match scaling {
        ResidualScaling::Raw => [1.0; BLOCK_LEN],
        ResidualScaling::LhsNormalized => ConformalScale::new(lambda)
            .ok()
            .and_then(|l| lhs_normalizers(ep, l).ok())
            .unwrap_or([1.0; BLOCK_LEN]),
    }
}

fn state_scales(
    state: &ProblemState,
    scaling: ResidualScaling,
    p: usize,
    e: usize,
) -> [f64; BLOCK_LEN] {
    let (i, j) = state.edge_frames(e);
    match (state.jets[p][i], state.jets[p][j], state.lambdas[p][e]) {
        (Some(a), Some(b), Some(l)) => block_scales(scaling, &state.edge_point(p, e, &a, &b), l),
        _ => [1.0; BLOCK_LEN],
    }
}

fn scale_into(out: &mut [f64], values: &[f64], weight: f64, scales: &[f64]) {
    for ((o, v), s) in out.iter_mut().zip(values).zip(scales) {
        *o = weight * v * s;
    }
}

fn fill_nan(out: &mut [f64]) {
    out.iter_mut().for_each(|r| *r = f64::NAN);
}

/// First-order seed values per (point, frame).
fn initial_first_order(state: &ProblemState, init: Initialization) -> Vec<Vec<(f64, f64)>> {
    match init {
        Initialization::Zero => vec![vec![(0.0, 0.0); state.n_frames]; state.n_points()],
        Initialization::Random { amplitude, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..state.n_points())
                .map(|_| {
                    (0..state.n_frames)
                        .map(|_| {
                            let a = rng.random_range(-amplitude..=amplitude);
                            let b = rng.random_range(-amplitude..=amplitude);
                            (a, b)
                        })
                        .collect()
                })
                .collect()
        }
    }
}

/// Isometric initialisation followed by depth integration and the initial
/// conformal scales.
pub fn prestep(state: &mut ProblemState, config: &SolverConfig) -> Result<(), SolverError> {
    config.validate()?;
    let pool = config.pool()?;
    pool.install(|| prestep_in_pool(state, config))
}

fn prestep_in_pool(state: &mut ProblemState, config: &SolverConfig) -> Result<(), SolverError> {
    if state.reconstructable_points() == 0 {
        return Err(SolverError::NothingReconstructable);
    }
    let seeds: Vec<Vec<[f64; PRESTEP_TERMS]>> = initial_first_order(state, config.init)
        .into_iter()
        .map(|row| {
            row.into_iter()
                .map(|(a, b)| [a, b, 0.0, 0.0, 0.0])
                .collect()
        })
        .collect();
    let opts = config.nlls(config.prestep_iterations);
    let solved: Vec<Option<PrestepSolution>> = (0..state.n_points())
        .into_par_iter()
        .map(|p| prestep_point(state, p, &seeds[p], &opts, config))
        .collect();
    write_prestep(state, &solved);
    if config.prestep_restart {
        // A point seen along few edges can settle in a wrong basin. Its
        // neighbours, fused by the depth integration, give a second start.
        let consensus = consensus_jets(state, config);
        let solved: Vec<Option<PrestepSolution>> = solved
            .into_par_iter()
            .enumerate()
            .map(|(p, first)| {
                let first = first?;
                let seed: Vec<[f64; PRESTEP_TERMS]> = (0..state.n_frames)
                    .map(|f| {
                        consensus[p][f]
                            .map_or([0.0; PRESTEP_TERMS], |j| [j.y1, j.y2, j.y11, j.y12, j.y22])
                    })
                    .collect();
                match prestep_point(state, p, &seed, &opts, config) {
                    Some(second) if second.cost < first.cost => Some(second),
                    _ => Some(first),
                }
            })
            .collect();
        write_prestep(state, &solved);
    }
    step3_in_pool(state, config);
    let lambdas: Vec<Vec<Option<f64>>> = (0..state.n_points())
        .into_par_iter()
        .map(|p| {
            (0..state.warps.len())
                .map(|e| {
                    state.warp_jets[p][e]?;
                    let (i, j) = state.edge_frames(e);
                    let (a, b) = (state.jets[p][i]?, state.jets[p][j]?);
                    let ep = state.edge_point(p, e, &a, &b);
                    Some(prestep_lambda(&ep).map(|l| l.value()).unwrap_or(1.0))
                })
                .collect()
        })
        .collect();
    state.lambdas = lambdas;
    state.initialized = true;
    Ok(())
}

fn write_prestep(state: &mut ProblemState, solved: &[Option<PrestepSolution>]) {
    for (p, result) in solved.iter().enumerate() {
        let Some(solution) = result else { continue };
        for &(f, [y1, y2, y11, y12, y22]) in &solution.terms {
            state.jets[p][f] = Some(DepthJet {
                beta: 1.0,
                y1,
                y2,
                y11,
                y12,
                y22,
            });
        }
    }
}

/// Jets implied by the integrated log-depth surface of each frame.
fn consensus_jets(state: &ProblemState, config: &SolverConfig) -> Vec<Vec<Option<DepthJet>>> {
    let mut fused = state.clone();
    step3_in_pool(
        &mut fused,
        &SolverConfig {
            depth_feedback: DepthFeedback::Full,
            ..config.clone()
        },
    );
    fused.jets
}

/// Number of jet terms solved per frame in the pre-step.
const PRESTEP_TERMS: usize = 5;

/// Returns `(frame, [y1, y2, y11, y12, y22])` for every frame of the point.
///
/// The second-order terms are solved alongside the first-order ones.
/// Pinning them at zero biases the first-order terms badly on curved
/// surfaces, while leaving them free makes the ground truth an exact zero
/// of this cost: with `λ = 1`, unit source depth and the depth ratio free,
/// every block equals the true residual up to a scale.
fn prestep_point(
    state: &ProblemState,
    p: usize,
    seed: &[[f64; PRESTEP_TERMS]],
    opts: &NllsOptions,
    config: &SolverConfig,
) -> Option<PrestepSolution> {
    const T: usize = PRESTEP_TERMS;
    let frames = state.point_frames(p);
    let edges = state.point_edges(p);
    if edges.is_empty() {
        return None;
    }
    let slot = |f: usize| {
        frames
            .iter()
            .position(|&g| g == f)
            .expect("edge frame is active")
    };
    let nf = frames.len();
    let blocks: Vec<Block> = edges
        .iter()
        .enumerate()
        .map(|(k, &e)| {
            let (i, j) = state.edge_frames(e);
            let mut params: Vec<usize> = (T * slot(i)..T * slot(i) + T)
                .chain(T * slot(j)..T * slot(j) + T)
                .collect();
            params.push(T * nf + k);
            Block { params }
        })
        .collect();
    let jet_at = |beta: f64, x: &[f64]| DepthJet {
        beta,
        y1: x[0],
        y2: x[1],
        y11: x[2],
        y12: x[3],
        y22: x[4],
    };
    let mut x0: Vec<f64> = frames.iter().flat_map(|&f| seed[f]).collect();
    x0.extend(std::iter::repeat_n(1.0, edges.len()));
    let scales: Vec<[f64; BLOCK_LEN]> = edges
        .iter()
        .enumerate()
        .map(|(b, &e)| {
            let (i, j) = state.edge_frames(e);
            let (si, sj) = (T * slot(i), T * slot(j));
            let src = jet_at(1.0, &x0[si..si + T]);
            let dst = jet_at(x0[T * nf + b], &x0[sj..sj + T]);
            block_scales(config.scaling, &state.edge_point(p, e, &src, &dst), 1.0)
        })
        .collect();
    let problem = BlockProblem {
        n_params: T * nf + edges.len(),
        block_len: BLOCK_LEN,
        blocks,
        eval: |b: usize, x: &[f64], out: &mut [f64]| {
            let e = edges[b];
            let (i, j) = state.edge_frames(e);
            let (si, sj) = (T * slot(i), T * slot(j));
            let src = jet_at(1.0, &x[si..si + T]);
            let dst = jet_at(x[T * nf + b], &x[sj..sj + T]);
            let ep = state.edge_point(p, e, &src, &dst);
            match residual_block(&ep, ConformalScale::ONE, state.warps[e].omega) {
                Ok(r) => scale_into(out, &r.to_array(), 1.0, &scales[b]),
                Err(_) => fill_nan(out),
            }
        },
    };
    let mut bounds = Bounds::unbounded(x0.len());
    for k in 0..edges.len() {
        bounds = bounds.with_lower(T * nf + k, config.beta_min);
    }
    let x = match nlls_solve(&problem, &x0, &bounds, opts) {
        Ok(r) => r.x,
        Err(e) => {
            debug!("pre-step for point {p} kept its seed: {e}");
            x0
        }
    };
    // Unscaled cost, comparable across starts whose scalings differ.
    let cost = edges
        .iter()
        .enumerate()
        .map(|(b, &e)| {
            let (i, j) = state.edge_frames(e);
            let (si, sj) = (T * slot(i), T * slot(j));
            let (src, dst) = (
                jet_at(1.0, &x[si..si + T]),
                jet_at(x[T * nf + b], &x[sj..sj + T]),
            );
            let ep = state.edge_point(p, e, &src, &dst);
            residual_block(&ep, ConformalScale::ONE, state.warps[e].omega)
                .map_or(f64::INFINITY, |r| r.norm().powi(2))
        })
        .sum();
    Some(PrestepSolution {
        terms: frames
            .iter()
            .enumerate()
            .map(|(k, &f)| (f, std::array::from_fn(|t| x[T * k + t])))
            .collect(),
        cost,
    })
}

/// Pre-step result of one point: `(frame, [y1, y2, y11, y12, y22])` for
/// every active frame, and the unscaled residual cost.
struct PrestepSolution {
    terms: Vec<(usize, [f64; PRESTEP_TERMS])>,
    cost: f64,
}

/// Refines the second-order terms from the connection residuals.
pub fn step1_second_order(
    state: &mut ProblemState,
    config: &SolverConfig,
) -> Result<(), SolverError> {
    config.validate()?;
    config.pool()?.install(|| step1_in_pool(state, config));
    Ok(())
}

fn step1_in_pool(state: &mut ProblemState, config: &SolverConfig) {
    let opts = config.nlls(config.inner_iterations);
    let updates: Vec<Option<Vec<(usize, [f64; 3])>>> = (0..state.n_points())
        .into_par_iter()
        .map(|p| step1_point(state, p, &opts, config.scaling))
        .collect();
    for (p, update) in updates.into_iter().enumerate() {
        for (f, [a, b, c]) in update.into_iter().flatten() {
            if let Some(jet) = state.jets[p][f].as_mut() {
                jet.y11 = a;
                jet.y12 = b;
                jet.y22 = c;
            }
        }
    }
}

fn step1_point(
    state: &ProblemState,
    p: usize,
    opts: &NllsOptions,
    scaling: ResidualScaling,
) -> Option<Vec<(usize, [f64; 3])>> {
    let frames = state.point_frames(p);
    let edges = state.point_edges(p);
    if edges.is_empty() {
        return None;
    }
    let slot = |f: usize| {
        frames
            .iter()
            .position(|&g| g == f)
            .expect("edge frame is active")
    };
    let jet_at = |f: usize, x: &[f64]| {
        let s = slot(f);
        let base = state.jets[p][f].expect("active frame has a jet");
        DepthJet {
            y11: x[3 * s],
            y12: x[3 * s + 1],
            y22: x[3 * s + 2],
            ..base
        }
    };
    let blocks = edges
        .iter()
        .map(|&e| {
            let (i, j) = state.edge_frames(e);
            let (a, b) = (3 * slot(i), 3 * slot(j));
            Block {
                params: vec![a, a + 1, a + 2, b, b + 1, b + 2],
            }
        })
        .collect();
    let scales: Vec<[f64; BLOCK_LEN]> = edges
        .iter()
        .map(|&e| state_scales(state, scaling, p, e))
        .collect();
    let problem = BlockProblem {
        n_params: 3 * frames.len(),
        block_len: CONNECTION_LEN,
        blocks,
        eval: |b: usize, x: &[f64], out: &mut [f64]| {
            let e = edges[b];
            let (i, j) = state.edge_frames(e);
            let (src, dst) = (jet_at(i, x), jet_at(j, x));
            let ep = state.edge_point(p, e, &src, &dst);
            let lambda = state.lambdas[p][e].and_then(|l| ConformalScale::new(l).ok());
            match lambda.map(|l| connection_residuals(&ep, l)) {
                Some(Ok(r)) => scale_into(
                    out,
                    &r,
                    state.warps[e].omega.sqrt(),
                    &scales[b][METRIC_LEN..],
                ),
                _ => fill_nan(out),
            }
        },
    };
    let x0: Vec<f64> = frames
        .iter()
        .flat_map(|&f| {
            let j = state.jets[p][f].expect("active frame has a jet");
            [j.y11, j.y12, j.y22]
        })
        .collect();
    let x = nlls_solve(&problem, &x0, &Bounds::unbounded(x0.len()), opts)
        .ok()?
        .x;
    Some(
        frames
            .iter()
            .enumerate()
            .map(|(k, &f)| (f, [x[3 * k], x[3 * k + 1], x[3 * k + 2]]))
            .collect(),
    )
}

/// Refines the first-order terms from all 21 residuals per edge.
pub fn step2_first_order(
    state: &mut ProblemState,
    config: &SolverConfig,
) -> Result<(), SolverError> {
    config.validate()?;
    config.pool()?.install(|| step2_in_pool(state, config));
    Ok(())
}

fn step2_in_pool(state: &mut ProblemState, config: &SolverConfig) {
    let opts = config.nlls(config.inner_iterations);
    let updates: Vec<Option<Vec<(usize, [f64; 2])>>> = (0..state.n_points())
        .into_par_iter()
        .map(|p| step2_point(state, p, &opts, config.scaling))
        .collect();
    for (p, update) in updates.into_iter().enumerate() {
        for (f, [a, b]) in update.into_iter().flatten() {
            if let Some(jet) = state.jets[p][f].as_mut() {
                jet.y1 = a;
                jet.y2 = b;
            }
        }
    }
}

fn step2_point(
    state: &ProblemState,
    p: usize,
    opts: &NllsOptions,
    scaling: ResidualScaling,
) -> Option<Vec<(usize, [f64; 2])>> {
    let frames = state.point_frames(p);
    let edges = state.point_edges(p);
    if edges.is_empty() {
        return None;
    }
    let slot = |f: usize| {
        frames
            .iter()
            .position(|&g| g == f)
            .expect("edge frame is active")
    };
    let jet_at = |f: usize, x: &[f64]| {
        let s = slot(f);
        let base = state.jets[p][f].expect("active frame has a jet");
        DepthJet {
            y1: x[2 * s],
            y2: x[2 * s + 1],
            ..base
        }
    };
    let blocks = edges
        .iter()
        .map(|&e| {
            let (i, j) = state.edge_frames(e);
            let (a, b) = (2 * slot(i), 2 * slot(j));
            Block {
                params: vec![a, a + 1, b, b + 1],
            }
        })
        .collect();
    let scales: Vec<[f64; BLOCK_LEN]> = edges
        .iter()
        .map(|&e| state_scales(state, scaling, p, e))
        .collect();
    let problem = BlockProblem {
        n_params: 2 * frames.len(),
        block_len: BLOCK_LEN,
        blocks,
        eval: |b: usize, x: &[f64], out: &mut [f64]| {
            let e = edges[b];
            let (i, j) = state.edge_frames(e);
            let (src, dst) = (jet_at(i, x), jet_at(j, x));
            let ep = state.edge_point(p, e, &src, &dst);
            let lambda = state.lambdas[p][e].and_then(|l| ConformalScale::new(l).ok());
            match lambda.map(|l| residual_block(&ep, l, state.warps[e].omega)) {
                Some(Ok(r)) => scale_into(out, &r.to_array(), 1.0, &scales[b]),
                _ => fill_nan(out),
            }
        },
    };
    let x0: Vec<f64> = frames
        .iter()
        .flat_map(|&f| {
            let j = state.jets[p][f].expect("active frame has a jet");
            [j.y1, j.y2]
        })
        .collect();
    let x = nlls_solve(&problem, &x0, &Bounds::unbounded(x0.len()), opts)
        .ok()?
        .x;
    Some(
        frames
            .iter()
            .enumerate()
            .map(|(k, &f)| (f, [x[2 * k], x[2 * k + 1]]))
            .collect(),
    )
}

/// Replaces every depth by the integral of the first-order terms of its
/// frame, with mean log-depth zero per frame.
pub fn step3_depth(state: &mut ProblemState, config: &SolverConfig) -> Result<(), SolverError> {
    config.validate()?;
    config.pool()?.install(|| step3_in_pool(state, config));
    Ok(())
}

fn depth_settings(samples: &[(PixelPoint, f64, f64)], config: &SolverConfig) -> (SplineGrid, f64) {
    let n = samples.len() as f64;
    let fixed = (config.depth_grid, config.depth_smoothing * n);
    if !config.depth_cross_validate {
        return fixed;
    }
    let largest = config.depth_grid.n_u.max(config.depth_grid.n_v);
    let grids: Vec<SplineGrid> = (MIN_CV_GRID..=largest)
        .map(|g| SplineGrid::new(g, g))
        .collect();
    let smoothings: Vec<f64> = CV_SMOOTHING_CANDIDATES.iter().map(|s| s * n).collect();
    cross_validate_integration(samples, &grids, &smoothings, CV_FOLDS).unwrap_or(fixed)
}

fn step3_in_pool(state: &mut ProblemState, config: &SolverConfig) {
    let depths: Vec<Option<Vec<(usize, f64, SurfaceJet)>>> = (0..state.n_frames)
        .into_par_iter()
        .map(|f| {
            let members: Vec<(usize, PixelPoint, DepthJet)> = (0..state.n_points())
                .filter_map(|p| Some((p, state.pixels[p][f]?, state.jets[p][f]?)))
                .collect();
            let samples: Vec<_> = members.iter().map(|(_, px, j)| (*px, j.y1, j.y2)).collect();
            let (grid, smoothing) = depth_settings(&samples, config);
            let integrated = match config.depth_robust_floor {
                Some(floor) => {
                    integrate_log_depth_robust(&samples, grid, smoothing, floor).map(|(d, _)| d)
                }
                None => integrate_log_depth(&samples, grid, smoothing),
            };
            match integrated {
                Ok(out) => Some(
                    members
                        .iter()
                        .zip(out.beta)
                        .zip(out.log_depth)
                        .map(|(((p, _, _), b), l)| (*p, b, l))
                        .collect(),
                ),
                Err(e) => {
                    if !members.is_empty() {
                        warn!("depth integration of frame {f} failed: {e}");
                    }
                    None
                }
            }
        })
        .collect();
    for (f, frame) in depths.into_iter().enumerate() {
        for (p, beta, l) in frame.into_iter().flatten() {
            if let Some(jet) = state.jets[p][f].as_mut() {
                jet.beta = beta.max(config.beta_min);
                if config.depth_feedback != DepthFeedback::Depth {
                    jet.y1 = l.du;
                    jet.y2 = l.dv;
                }
                if config.depth_feedback == DepthFeedback::Full {
                    jet.y11 = l.duu + l.du * l.du;
                    jet.y12 = l.duv + l.du * l.dv;
                    jet.y22 = l.dvv + l.dv * l.dv;
                }
            }
        }
    }
}

/// Refines every conformal scale from the metric and the λ-dependent
/// connection residuals.
pub fn step4_lambda(state: &mut ProblemState, config: &SolverConfig) -> Result<(), SolverError> {
    config.validate()?;
    config.pool()?.install(|| step4_in_pool(state, config));
    Ok(())
}

fn step4_in_pool(state: &mut ProblemState, config: &SolverConfig) {
    let opts = config.nlls(config.inner_iterations);
    let updates: Vec<Vec<Option<f64>>> = (0..state.n_points())
        .into_par_iter()
        .map(|p| {
            (0..state.warps.len())
                .map(|e| step4_edge(state, p, e, &opts, config.scaling))
                .collect()
        })
        .collect();
    for (p, row) in updates.into_iter().enumerate() {
        for (e, l) in row.into_iter().enumerate() {
            if let Some(l) = l {
                state.lambdas[p][e] = Some(l);
            }
        }
    }
}

fn step4_edge(
    state: &ProblemState,
    p: usize,
    e: usize,
    opts: &NllsOptions,
    scaling: ResidualScaling,
) -> Option<f64> {
    state.warp_jets[p][e]?;
    let (i, j) = state.edge_frames(e);
    let (src, dst) = (state.jets[p][i]?, state.jets[p][j]?);
    let ep = state.edge_point(p, e, &src, &dst);
    let w = state.warps[e].omega.sqrt();
    let all = state_scales(state, scaling, p, e);
    let mut scales = [0.0; METRIC_LEN + 8];
    scales[..METRIC_LEN].copy_from_slice(&all[..METRIC_LEN]);
    for (s, i) in scales[METRIC_LEN..]
        .iter_mut()
        .zip(LAMBDA_SENSITIVE_ENTRIES)
    {
        *s = all[METRIC_LEN + i];
    }
    let problem = BlockProblem {
        n_params: 1,
        block_len: METRIC_LEN + 8,
        blocks: vec![Block { params: vec![0] }],
        eval: |_: usize, x: &[f64], out: &mut [f64]| match ConformalScale::new(x[0])
            .map(|l| lambda_sensitive_residuals(&ep, l))
        {
            Ok(Ok(r)) => scale_into(out, &r, w, &scales),
            _ => fill_nan(out),
        },
    };
    let x0 = [state.lambdas[p][e]?];
    let bounds = Bounds::unbounded(1).with_lower(0, LAMBDA_MIN);
    nlls_solve(&problem, &x0, &bounds, opts)
        .ok()
        .map(|r| r.x[0])
}

/// One row of the convergence trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceEntry {
    pub iteration: usize,
    pub terminal: f64,
    pub residual_norm: f64,
    pub wall_time: Duration,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ConvergenceTrace {
    pub entries: Vec<TraceEntry>,
    pub converged: bool,
}

fn terminal(before: &ProblemState, after: &ProblemState) -> f64 {
    let jets: f64 = before
        .jets
        .iter()
        .flatten()
        .zip(after.jets.iter().flatten())
        .filter_map(|(a, b)| {
            let (a, b) = (a.as_ref()?.to_array(), b.as_ref()?.to_array());
            Some(
                a.iter()
                    .zip(&b)
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    .sqrt(),
            )
        })
        .sum();
    let lambdas: f64 = before
        .lambdas
        .iter()
        .flatten()
        .zip(after.lambdas.iter().flatten())
        .filter_map(|(a, b)| Some((a.as_ref()? - b.as_ref()?).abs()))
        .sum();
    jets + lambdas
}

/// Runs the pre-step (if not yet done) and then steps 1 to 4 until
/// `Terminal(k) < sigma` or `max_outer` loops.
pub fn run(
    mut state: ProblemState,
    config: &SolverConfig,
) -> Result<(ProblemState, ConvergenceTrace), SolverError> {
    config.validate()?;
    if state.reconstructable_points() == 0 {
        return Err(SolverError::NothingReconstructable);
    }
    let pool = config.pool()?;
    pool.install(|| {
        if !state.initialized {
            prestep_in_pool(&mut state, config)?;
        }
        let sigma = config.sigma.unwrap_or(1e-4 * state.variable_count() as f64);
        let mut trace = ConvergenceTrace::default();
        for k in 1..=config.max_outer {
            let start = Instant::now();
            let before = state.clone();
            step1_in_pool(&mut state, config);
            step2_in_pool(&mut state, config);
            step3_in_pool(&mut state, config);
            step4_in_pool(&mut state, config);
            let t = terminal(&before, &state);
            trace.entries.push(TraceEntry {
                iteration: k,
                terminal: t,
                residual_norm: state.residual_norm(),
                wall_time: start.elapsed(),
            });
            debug!("outer iteration {k}: terminal {t:.3e}");
            if t < sigma {
                trace.converged = true;
                break;
            }
        }
        Ok((state, trace))
    })
}
