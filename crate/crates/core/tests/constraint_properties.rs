use connrsfm_core::constraints::*;
use connrsfm_core::geometry::*;
use connrsfm_core::synthetic::*;
use nalgebra::{Matrix3, Rotation3, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn reference_ball() -> BallScene {
    BallScene::new(Vector3::new(0.0, 0.0, 4.5), 1.25).unwrap()
}

fn pixels(n: usize, seed: u64) -> Vec<PixelPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| PixelPoint::new(rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15)))
        .collect()
}

fn pair_with(linear: Matrix3<f64>) -> SurfacePair {
    let ball = reference_ball();
    let to = Vector3::new(0.1, -0.05, 4.6);
    SurfacePair::new(
        ball.quadric(),
        Deformation {
            linear,
            from: ball.center,
            to,
        },
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    /// Under a conformal deformation `s R`, the rotation drops out of both
    /// identities: residuals at the true scale match those with `R = I`.
    #[test]
    fn destination_rotation_leaves_residuals_unchanged(
        axis in (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0),
        angle in -std::f64::consts::PI..std::f64::consts::PI,
        scale in 0.8f64..1.25,
        seed in 0u64..1000,
    ) {
        let axis = Vector3::new(axis.0, axis.1, axis.2);
        prop_assume!(axis.norm() > 0.1);
        let rot = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle).into_inner();
        let plain = pair_with(Matrix3::identity() * scale);
        let rotated = pair_with(rot * scale);
        let lambda = ConformalScale::new(1.0 / scale).unwrap();
        let mut compared = 0;
        for p in pixels(64, seed) {
            let (Ok(a), Ok(b)) = (plain.sample(&p), rotated.sample(&p)) else { continue };
            // only points the destination camera would observe
            let y = rotated.deformation.apply(&(Vector3::new(p.u, p.v, 1.0) * a.jet_src.beta));
            let n = rotated.dst.normal(&y).normalize();
            if n.dot(&y).abs() / y.norm() < VISIBILITY_COSINE {
                continue;
            }
            let ra = residual_block(&a.edge_point(), lambda, 1.0).unwrap();
            let rb = residual_block(&b.edge_point(), lambda, 1.0).unwrap();
            for (x, y) in ra.to_array().iter().zip(rb.to_array()) {
                prop_assert!((x - y).abs() <= 1e-9, "{} vs {}", x, y);
            }
            compared += 1;
        }
        // rotations that turn every sample away from the camera carry no data
        prop_assume!(compared > 0);
    }
}

#[test]
fn anisotropic_stretch_breaks_scalar_conformal_scale() {
    let pair = pair_with(Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 2.0)));
    let samples: Vec<_> = pixels(400, 7)
        .iter()
        .filter_map(|p| pair.sample(p).ok())
        .collect();
    assert!(samples.len() >= 300);
    let violated = samples
        .iter()
        .filter(|s| {
            let ep = s.edge_point();
            let lambda = closed_form_lambda(&ep).unwrap_or(ConformalScale::ONE);
            let r = connection_residuals(&ep, lambda).unwrap();
            r.iter().map(|x| x * x).sum::<f64>().sqrt() > 1e-3
        })
        .count();
    let share = violated as f64 / samples.len() as f64;
    assert!(
        share >= 0.95,
        "only {:.1}% of points violate",
        100.0 * share
    );
}

#[test]
fn lambda_free_entries_are_bitwise_identical() {
    let scenes = ball_sequence(4, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for j in 1..scenes.len() {
        let pair = SurfacePair::balls(&scenes[0], &scenes[j]);
        for p in pixels(50, j as u64) {
            let mut s = pair.sample(&p).unwrap();
            // off the exact solution too
            s.jet_dst.y11 += rng.random_range(-0.3..0.3);
            s.jet_src.y2 += rng.random_range(-0.3..0.3);
            let ep = s.edge_point();
            let reference = corollary1_invariants(&ep, ConformalScale::ONE).unwrap();
            for l in [0.5, 1.0, 7.3] {
                let got = corollary1_invariants(&ep, ConformalScale::new(l).unwrap()).unwrap();
                assert!(reference
                    .iter()
                    .zip(&got)
                    .all(|(a, b)| a.to_bits() == b.to_bits()));
                let all = connection_residuals(&ep, ConformalScale::new(l).unwrap()).unwrap();
                for (k, &i) in LAMBDA_FREE_ENTRIES.iter().enumerate() {
                    assert_eq!(all[i].to_bits(), reference[k].to_bits());
                }
            }
        }
    }
}

#[test]
fn connection_matches_finite_differences_of_the_frame() {
    let q = reference_ball().quadric();
    let h = 1e-5;
    for p in pixels(50, 21) {
        let jet = q.depth_jet(&p, Sheet::Near).unwrap();
        let gamma = connection(&p, &jet).unwrap();
        let e = moving_frame(&p, &jet).matrix();
        let e_inv = e.try_inverse().unwrap();
        for k in 0..2 {
            let (du, dv) = if k == 0 { (h, 0.0) } else { (0.0, h) };
            let at = |s: f64| {
                let pk = PixelPoint::new(p.u + s * du, p.v + s * dv);
                moving_frame(&pk, &q.depth_jet(&pk, Sheet::Near).unwrap()).matrix()
            };
            let fd = e_inv * (at(1.0) - at(-1.0)) / (2.0 * h);
            let block = gamma.block(k);
            let scale = block.abs().max().max(1.0);
            let err = (fd - block).abs().max() / scale;
            assert!(err <= 1e-6, "block {k}: relative error {err:.2e}");
        }
    }
}
