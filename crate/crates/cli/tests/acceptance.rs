//! Acceptance suite. Prints one PASS/FAIL line per criterion plus
//! informational lines, and exits non-zero if any criterion fails.

use std::time::{Duration, Instant};

use connrsfm_cli::commands;
use connrsfm_cli::config::{InitKind, RunConfig, WarpSource};
use connrsfm_cli::ground_truth::GroundTruth;
use connrsfm_cli::output::TIMING_FILE;
use connrsfm_cli::pipeline::{self, frame_metrics, mean_metrics, recovered, tracks_of};
use connrsfm_core::constraints::*;
use connrsfm_core::evaluation::absor_align;
use connrsfm_core::geometry::*;
use connrsfm_core::graph::*;
use connrsfm_core::solver::ProblemState;
use connrsfm_core::spline::*;
use connrsfm_core::synthetic::*;
use nalgebra::{Matrix2, Matrix3, Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn analytic() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.warp.source = WarpSource::Analytic;
    cfg
}

/// Reconstructs the configured sequence; returns the state, its ground
/// truth and the mean `(pct3d, shape_deg)`.
fn reconstruct(cfg: &RunConfig) -> (ProblemState, SyntheticDataset, (f64, f64)) {
    let ds = pipeline::generate(cfg).unwrap();
    let gt = GroundTruth::from_dataset(&ds, cfg.missing.rate);
    let (state, _) = pipeline::reconstruct(&tracks_of(&ds), cfg, Some(&ds.scenes)).unwrap();
    let mean = mean_metrics(&frame_metrics(&recovered(&state), &gt).unwrap());
    (state, ds, mean)
}

fn criterion1() -> Verdict {
    let start = Instant::now();
    let report = pipeline::verify_theorem(&RunConfig::default()).unwrap();
    let elapsed = start.elapsed();
    let worst2 = report.second_order.iter().cloned().fold(0.0, f64::max);
    let (lo, hi) = report
        .first_order
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(l, h), &x| (l.min(x), h.max(x)));
    let pass = report.second_order.len() == 10
        && worst2 <= 1e-8
        && lo >= 5.0
        && hi <= 13.0
        && elapsed < Duration::from_secs(10);
    verdict(
        pass,
        format!(
            "10 pairs, second-order max {worst2:.2e}%, first-order in [{lo:.2}%, {hi:.2}%], {:.2} s",
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion2() -> Verdict {
    let start = Instant::now();
    let (_, _, (pct, shape)) = reconstruct(&analytic());
    let elapsed = start.elapsed();
    let pass = pct <= 1.5 && shape <= 10.0 && elapsed < Duration::from_secs(300);
    verdict(
        pass,
        format!(
            "{pct:.3}% 3D, {shape:.3} deg, {:.1} s",
            elapsed.as_secs_f64()
        ),
    )
}

const RATES: [f64; 5] = [0.0, 0.1, 0.3, 0.5, 0.7];
const RATE_LIMITS: [f64; 5] = [1.5, 1.6, 2.5, 2.8, 3.5];

fn sweep(cfg: &RunConfig) -> Vec<f64> {
    let mut cfg = cfg.clone();
    cfg.sweep.rates = RATES.to_vec();
    pipeline::missing_rate_sweep(&cfg)
        .unwrap()
        .iter()
        .map(|r| r.pct3d)
        .collect()
}

fn criterion3() -> Verdict {
    let errors = sweep(&analytic());
    let within = errors.iter().zip(RATE_LIMITS).skip(1).all(|(e, l)| *e <= l);
    let monotone = errors.windows(2).all(|w| w[1] >= w[0] - 0.3);
    let listed: Vec<String> = RATES
        .iter()
        .zip(&errors)
        .map(|(r, e)| format!("{r}: {e:.3}%"))
        .collect();
    verdict(
        within && monotone,
        format!("{}; monotone within 0.3: {monotone}", listed.join(", ")),
    )
}

/// Ground-truth geometric-mean depth of each frame over its reconstructed
/// points; moves recovered scales into the ground-truth depth gauge.
fn depth_gauge(state: &ProblemState, ds: &SyntheticDataset) -> Vec<f64> {
    (0..ds.n_frames())
        .map(|f| {
            let logs: Vec<f64> = state
                .frame_points(f)
                .iter()
                .map(|(p, _)| ds.gt_jets[*p][f].beta.ln())
                .collect();
            (logs.iter().sum::<f64>() / logs.len() as f64).exp()
        })
        .collect()
}

fn criterion4() -> Verdict {
    let (state, ds, _) = reconstruct(&analytic());
    let g = depth_gauge(&state, &ds);
    let mut worst = 0.0f64;
    let mut count = 0;
    for row in &state.lambdas {
        for (e, l) in row.iter().enumerate() {
            let Some(l) = l else { continue };
            let (i, j) = (state.warps[e].i, state.warps[e].j);
            worst = worst.max((l * g[i] / g[j] / ds.gt_lambda(i, j) - 1.0).abs());
            count += 1;
        }
    }
    let mut closed = 0.0f64;
    for j in 1..ds.n_frames() {
        let pair = SurfacePair::balls(&ds.scenes[0], &ds.scenes[j]);
        for row in &ds.gt_pixels {
            let s = pair.sample(&row[0]).unwrap();
            let l = closed_form_lambda(&s.edge_point()).unwrap().value();
            closed = closed.max((l / ds.gt_lambda(0, j) - 1.0).abs());
        }
    }
    verdict(
        worst <= 0.01 && closed <= 1e-6,
        format!("{count} converged scales, worst relative error {worst:.2e}; closed form worst {closed:.2e}"),
    )
}

fn pair_with(linear: Matrix3<f64>) -> SurfacePair {
    let ball = BallScene::new(Vector3::new(0.0, 0.0, 4.5), 1.25).unwrap();
    SurfacePair::new(
        ball.quadric(),
        Deformation {
            linear,
            from: ball.center,
            to: Vector3::new(0.1, -0.05, 4.6),
        },
    )
    .unwrap()
}

fn pixels(rng: &mut ChaCha8Rng, n: usize) -> Vec<PixelPoint> {
    (0..n)
        .map(|_| PixelPoint::new(rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15)))
        .collect()
}

fn criterion5() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut draws, mut compared, mut worst) = (0, 0, 0.0f64);
    while draws < 128 {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        if axis.norm() < 0.1 {
            continue;
        }
        let rot =
            Rotation3::from_axis_angle(&Unit::new_normalize(axis), rng.random_range(-3.14..3.14))
                .into_inner();
        let scale = rng.random_range(0.8..1.25);
        let (plain, rotated) = (
            pair_with(Matrix3::identity() * scale),
            pair_with(rot * scale),
        );
        let lambda = ConformalScale::new(1.0 / scale).unwrap();
        let mut used = 0;
        for p in pixels(&mut rng, 64) {
            let (Ok(a), Ok(b)) = (plain.sample(&p), rotated.sample(&p)) else {
                continue;
            };
            let y = rotated
                .deformation
                .apply(&(Vector3::new(p.u, p.v, 1.0) * a.jet_src.beta));
            if rotated.dst.normal(&y).normalize().dot(&y).abs() / y.norm() < VISIBILITY_COSINE {
                continue;
            }
            let ra = residual_block(&a.edge_point(), lambda, 1.0).unwrap();
            let rb = residual_block(&b.edge_point(), lambda, 1.0).unwrap();
            worst = ra
                .to_array()
                .iter()
                .zip(rb.to_array())
                .fold(worst, |w, (x, y)| w.max((x - y).abs()));
            used += 1;
        }
        draws += 1;
        compared += (used > 0) as usize;
    }
    verdict(
        compared >= 100 && worst <= 1e-9,
        format!("{compared} of {draws} rotations with visible samples, max change {worst:.2e}"),
    )
}

fn criterion6() -> Verdict {
    let pair = pair_with(Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 2.0)));
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let samples: Vec<_> = pixels(&mut rng, 400)
        .iter()
        .filter_map(|p| pair.sample(p).ok())
        .collect();
    let violated = samples
        .iter()
        .filter(|s| {
            let ep = s.edge_point();
            let lambda = closed_form_lambda(&ep).unwrap_or(ConformalScale::ONE);
            connection_residuals(&ep, lambda)
                .unwrap()
                .iter()
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt()
                > 1e-3
        })
        .count();
    let share = violated as f64 / samples.len() as f64;
    verdict(
        share >= 0.95,
        format!(
            "{:.1}% of {} points above 1e-3",
            100.0 * share,
            samples.len()
        ),
    )
}

fn criterion7() -> Verdict {
    let scenes = ball_sequence(4, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut checked, mut identical) = (0, 0);
    for j in 1..scenes.len() {
        let pair = SurfacePair::balls(&scenes[0], &scenes[j]);
        for p in pixels(&mut rng, 50) {
            let Ok(mut s) = pair.sample(&p) else { continue };
            s.jet_dst.y11 += rng.random_range(-0.3..0.3);
            let ep = s.edge_point();
            let reference = corollary1_invariants(&ep, ConformalScale::ONE).unwrap();
            for l in [0.5, 1.0, 7.3] {
                let got = corollary1_invariants(&ep, ConformalScale::new(l).unwrap()).unwrap();
                checked += 1;
                identical += reference
                    .iter()
                    .zip(&got)
                    .all(|(a, b)| a.to_bits() == b.to_bits()) as usize;
            }
        }
    }
    verdict(
        checked > 0 && identical == checked,
        format!("{identical} of {checked} evaluations bitwise identical"),
    )
}

fn complete(n: usize, weights: &[u64]) -> Option<MatchGraph> {
    let mut rows = vec![vec![0; n]; n];
    let mut k = 0;
    for a in 0..n {
        for b in a + 1..n {
            rows[a][b] = weights[k];
            rows[b][a] = weights[k];
            k += 1;
        }
    }
    MatchGraph::from_weights(&rows).ok()
}

fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    if n < k {
        return vec![];
    }
    let mut out = subsets(n - 1, k);
    for mut s in subsets(n - 1, k - 1) {
        s.push(n - 1);
        out.push(s);
    }
    out
}

/// Whether every greedy step is the best single addition found by
/// enumeration and the final gain meets the `1 - 1/e` bound against the
/// best `k`-subset; also whether greedy hit that optimum.
fn greedy_against_enumeration(g: &MatchGraph, k: usize) -> Option<(bool, bool)> {
    let tree = max_spanning_tree(g).ok()?;
    let greedy = greedy_k_esp(g, &tree, k).ok()?;
    let n = g.n_frames();
    let free: Vec<Edge> = g
        .edges()
        .into_iter()
        .filter(|e| !tree.edges.iter().any(|t| t.id() == e.id()))
        .collect();
    let mut replay = tree.clone();
    let mut stepwise = greedy.n_edges() == n - 1 + k;
    for step in 0..k {
        let chosen = greedy.edges[n - 1 + step];
        let base = tree_connectivity(&replay);
        let gain = |e: &Edge| {
            let mut next = replay.clone();
            next.edges.push(*e);
            tree_connectivity(&next) - base
        };
        let open: Vec<&Edge> = free
            .iter()
            .filter(|e| !replay.edges.iter().any(|t| t.id() == e.id()))
            .collect();
        let best = open
            .iter()
            .map(|e| gain(e))
            .fold(f64::NEG_INFINITY, f64::max);
        stepwise &= (gain(&chosen) - best).abs() <= 1e-9;
        replay.edges.push(chosen);
    }
    let base = tree_connectivity(&tree);
    let optimum = subsets(free.len(), k)
        .into_iter()
        .map(|s| {
            let mut sel = tree.clone();
            sel.edges.extend(s.iter().map(|&i| free[i]));
            tree_connectivity(&sel) - base
        })
        .fold(f64::NEG_INFINITY, f64::max);
    let achieved = tree_connectivity(&greedy) - base;
    let bounded =
        achieved <= optimum + 1e-9 && achieved >= (1.0 - (-1.0f64).exp()) * optimum - 1e-9;
    Some((stepwise && bounded, (achieved - optimum).abs() <= 1e-9))
}

fn warp_derivative_error() -> f64 {
    let scenes = ball_sequence(2, 5);
    let pair = SurfacePair::balls(&scenes[0], &scenes[1]);
    let grid: Vec<PixelPoint> = (0..144)
        .map(|k| {
            PixelPoint::new(
                -0.18 + 0.36 * (k % 12) as f64 / 11.0,
                -0.18 + 0.36 * (k / 12) as f64 / 11.0,
            )
        })
        .collect();
    let pairs = grid
        .iter()
        .filter_map(|p| Some((*p, pair.warp_jet(p).ok()?.warped)))
        .collect();
    let c = CorrespondenceSet::new(0, 1, pairs).unwrap();
    let forward = fit_warp(&c, SplineGrid::new(7, 7), 1e-6).unwrap();
    let inverse = fit_warp(&c.swapped(), SplineGrid::new(7, 7), 1e-6).unwrap();
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1.0);
    let h = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    for p in pixels(&mut rng, 200) {
        let jet = warp_jet(&forward, &inverse, &p).unwrap();
        for k in 0..2 {
            let at = |s: f64| {
                if k == 0 {
                    PixelPoint::new(p.u + s * h, p.v)
                } else {
                    PixelPoint::new(p.u, p.v + s * h)
                }
            };
            let (a, b) = (
                forward.apply(&at(1.0)).unwrap(),
                forward.apply(&at(-1.0)).unwrap(),
            );
            worst = worst.max(rel(jet.jacobian[(0, k)], (a.u - b.u) / (2.0 * h)));
            worst = worst.max(rel(jet.jacobian[(1, k)], (a.v - b.v) / (2.0 * h)));
            let (ja, jb) = (
                forward.jacobian(&at(1.0)).unwrap(),
                forward.jacobian(&at(-1.0)).unwrap(),
            );
            let dj: Matrix2<f64> = (ja - jb) / (2.0 * h);
            for r in 0..2 {
                for c in 0..2 {
                    worst = worst.max(rel(jet.d_lifted[k][(r, c)], dj[(r, c)]));
                }
            }
            worst = worst.max(rel(
                jet.d_lifted[k][(2, 2)],
                (ja.determinant() - jb.determinant()) / (2.0 * h),
            ));
        }
    }
    worst
}

fn surface_derivative_error() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let domain =
        BoundingBox::around(&[PixelPoint::new(-0.3, -0.2), PixelPoint::new(0.25, 0.3)]).unwrap();
    let grid = SplineGrid::new(8, 8);
    let coefficients = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
    let s = SplineSurface::from_coefficients(domain, grid, coefficients).unwrap();
    let h = 1e-6;
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1.0);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let p = PixelPoint::new(rng.random_range(-0.28..0.23), rng.random_range(-0.18..0.28));
        let j = s.evaluate(&p).unwrap();
        let at = |du: f64, dv: f64| s.evaluate(&PixelPoint::new(p.u + du, p.v + dv)).unwrap();
        let (up, um, vp, vm) = (at(h, 0.0), at(-h, 0.0), at(0.0, h), at(0.0, -h));
        for (exact, fd) in [
            (j.du, (up.value - um.value) / (2.0 * h)),
            (j.dv, (vp.value - vm.value) / (2.0 * h)),
            (j.duu, (up.du - um.du) / (2.0 * h)),
            (j.duv, (vp.du - vm.du) / (2.0 * h)),
            (j.dvv, (vp.dv - vm.dv) / (2.0 * h)),
        ] {
            worst = worst.max(rel(exact, fd));
        }
    }
    worst
}

fn connection_derivative_error() -> f64 {
    let q = BallScene::new(Vector3::new(0.0, 0.0, 4.5), 1.25)
        .unwrap()
        .quadric();
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst = 0.0f64;
    for p in pixels(&mut rng, 50) {
        let jet = q.depth_jet(&p, Sheet::Near).unwrap();
        let gamma = connection(&p, &jet).unwrap();
        let e_inv = moving_frame(&p, &jet).matrix().try_inverse().unwrap();
        for k in 0..2 {
            let at = |s: f64| {
                let pk = if k == 0 {
                    PixelPoint::new(p.u + s * h, p.v)
                } else {
                    PixelPoint::new(p.u, p.v + s * h)
                };
                moving_frame(&pk, &q.depth_jet(&pk, Sheet::Near).unwrap()).matrix()
            };
            let fd = e_inv * (at(1.0) - at(-1.0)) / (2.0 * h);
            let block = gamma.block(k);
            worst = worst.max((fd - block).abs().max() / block.abs().max().max(1.0));
        }
    }
    worst
}

fn criterion8() -> Verdict {
    // every unit-weight graph up to five nodes, random weights up to six
    let (mut graphs, mut ok, mut optimal, mut runs) = (0, 0, 0, 0);
    let mut check = |g: &MatchGraph| {
        if max_spanning_tree(g).is_err() {
            return;
        }
        let available = g.edges().len() - (g.n_frames() - 1);
        graphs += 1;
        for k in 0..=available.min(3) {
            if let Some((good, best)) = greedy_against_enumeration(g, k) {
                runs += 1;
                ok += good as usize;
                optimal += best as usize;
            }
        }
    };
    for n in 2..=5usize {
        let m = n * (n - 1) / 2;
        for mask in 0u32..(1 << m) {
            let w: Vec<u64> = (0..m).map(|b| (mask >> b & 1) as u64).collect();
            if let Some(g) = complete(n, &w) {
                check(&g);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..400 {
        let n = rng.random_range(3..=6usize);
        let w: Vec<u64> = (0..n * (n - 1) / 2)
            .map(|_| rng.random_range(0..20))
            .collect();
        if let Some(g) = complete(n, &w) {
            check(&g);
        }
    }

    let mut absor_ok = 0;
    for _ in 0..1000 {
        let n = rng.random_range(4..40);
        let recon: Vec<Vector3<f64>> = (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect();
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            0.5 + rng.random_range(0.0..1.0),
        );
        let rotation =
            Rotation3::from_axis_angle(&Unit::new_normalize(axis), rng.random_range(-3.1..3.1))
                .into_inner();
        let scale = rng.random_range(0.1..10.0);
        let t = Vector3::new(
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
        );
        let gt: Vec<Vector3<f64>> = recon.iter().map(|x| scale * (rotation * x) + t).collect();
        let a = absor_align(&recon, &gt).unwrap();
        absor_ok += ((a.rotation - rotation).abs().max() <= 1e-9
            && (a.scale - scale).abs() <= 1e-9 * scale.max(1.0)
            && (a.translation - t).abs().max() <= 1e-9 * t.abs().max().max(1.0))
            as usize;
    }

    let (warp, surface, conn) = (
        warp_derivative_error(),
        surface_derivative_error(),
        connection_derivative_error(),
    );
    let pass = ok == runs && absor_ok == 1000 && warp <= 1e-5 && surface <= 1e-5 && conn <= 1e-6;
    verdict(
        pass,
        format!(
            "greedy {ok}/{runs} runs on {graphs} graphs ({optimal} reach the exhaustive optimum); \
             absor {absor_ok}/1000; derivative errors warp {warp:.1e}, spline {surface:.1e}, connection {conn:.1e}"
        ),
    )
}

fn criterion9() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let gen = dir.path().join("gen");
    let mut cfg = RunConfig::default();
    cfg.missing.rate = 0.3;
    commands::generate(&cfg, &gen).unwrap();
    let again = commands::render_generate(&cfg).unwrap();
    let generate_same = again
        .iter()
        .all(|(name, text)| std::fs::read_to_string(gen.join(name)).unwrap() == *text);
    let tracks = gen.join("tracks.csv");
    let run = |threads: usize| {
        let mut c = cfg.clone();
        c.threads = threads;
        let mut files = commands::render_reconstruct(&c, &tracks, None).unwrap();
        files.retain(|(name, _)| name != TIMING_FILE);
        files
    };
    let reference = run(1);
    let same = [run(4), run(1), run(3)].iter().all(|f| *f == reference);
    verdict(
        generate_same && same,
        format!("{} output files compared over threads 1, 4, 1, 3; generation repeatable: {generate_same}", reference.len()),
    )
}

fn criterion10() -> Verdict {
    let (_, _, (zero, _)) = reconstruct(&analytic());
    let mut worst = 0.0f64;
    let mut listed = Vec::new();
    for seed in [1, 2, 3] {
        let mut cfg = analytic();
        cfg.solver.init = InitKind::Random;
        cfg.seed = seed;
        // same dataset, other initialization draw
        let mut scene = cfg.clone();
        scene.seed = RunConfig::default().seed;
        let ds = pipeline::generate(&scene).unwrap();
        let gt = GroundTruth::from_dataset(&ds, 0.0);
        let (state, _) = pipeline::reconstruct(&tracks_of(&ds), &cfg, Some(&ds.scenes)).unwrap();
        let (random, _) = mean_metrics(&frame_metrics(&recovered(&state), &gt).unwrap());
        worst = worst.max((random - zero).abs());
        listed.push(format!("{random:.3}%"));
    }
    verdict(
        worst < 0.2,
        format!(
            "zero {zero:.3}%, random {}; max gap {worst:.3} points",
            listed.join(", ")
        ),
    )
}

fn info_fitted_warps() -> String {
    let errors = sweep(&RunConfig::default());
    let listed: Vec<String> = RATES
        .iter()
        .zip(&errors)
        .map(|(r, e)| format!("{r}: {e:.3}%"))
        .collect();
    format!("fitted spline warps, same sequence: {}", listed.join(", "))
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 10] = [
        ("identity verification index", criterion1),
        ("synthetic conformal reconstruction", criterion2),
        ("missing-data robustness", criterion3),
        ("conformal-scale recovery", criterion4),
        ("rotation invariance", criterion5),
        ("anisotropic stretch breaks scalar scale", criterion6),
        ("scale-free entries", criterion7),
        ("oracle equivalences", criterion8),
        ("determinism", criterion9),
        ("initialization robustness", criterion10),
    ];
    let mut failed = 0;
    for (k, (name, check)) in criteria.iter().enumerate() {
        let v = check();
        failed += !v.pass as usize;
        println!(
            "criterion {:>2} {}: {name}: {}",
            k + 1,
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
    }
    println!("info: {}", info_fitted_warps());
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
