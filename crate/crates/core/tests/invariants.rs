use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tokensplat::config::RunConfig;
use tokensplat::decoder::{gate_weights, merge_group, split_parent, GaussianParams};
use tokensplat::geometry::{canonicalize, plucker_rays, CameraPose, CameraView, Intrinsics};
use tokensplat::image::Image;
use tokensplat::io::{ply, ppm};
use tokensplat::render::{render, render_reference, Camera, RenderConfig};
use tokensplat::scene::RandomScene;
use tokensplat::training::{spread_context, stage_at, StageSchedule};

fn rotation(q: [f64; 4]) -> Matrix3<f64> {
    UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3])).to_rotation_matrix().into_inner()
}

fn quat() -> impl Strategy<Value = [f64; 4]> {
    prop::array::uniform4(-1.0..1.0f64).prop_filter("non-degenerate", |q| q.iter().map(|v| v * v).sum::<f64>() > 0.05)
}

fn view(eye: [f64; 3], side: usize) -> CameraView {
    let pose = CameraPose::look_at(Vector3::from(eye), Vector3::zeros(), Vector3::new(0.0, -1.0, 0.0)).unwrap();
    let c = side as f64 / 2.0;
    CameraView {
        pose,
        intrinsics: Intrinsics::new(1.2 * side as f64, 1.2 * side as f64, c, c, side, side).unwrap(),
        image: Image::filled(side, side, [0.5; 3]),
    }
}

fn eyes() -> impl Strategy<Value = Vec<[f64; 3]>> {
    prop::collection::vec((-1.2..1.2f64, -0.6..0.6f64, 2.0..4.0f64), 2..6)
        .prop_map(|v| v.into_iter().map(|(a, h, r)| [r * a.sin(), h, -r * a.cos()]).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gate_weights_lie_on_the_simplex(logits in prop::collection::vec(-30.0..30.0f64, 1..17), tau in 0.05..10.0f64) {
        let w = gate_weights(&logits, tau).unwrap();
        prop_assert_eq!(w.len(), logits.len());
        prop_assert!(w.iter().all(|v| *v >= 0.0 && v.is_finite()));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // order is preserved
        for i in 0..w.len() {
            for j in 0..w.len() {
                if logits[i] > logits[j] {
                    prop_assert!(w[i] >= w[j]);
                }
            }
        }
    }

    #[test]
    fn split_then_merge_recovers_the_parent(
        mean in prop::array::uniform3(-5.0..5.0f64),
        log_scale in prop::array::uniform3(-6.0..1.0f64),
        opacity in 0.001..0.999f64,
        w in 0.0..1.0f64,
    ) {
        let mut parent = GaussianParams::new(mean, 1.0, opacity);
        parent.log_scale = log_scale;
        let kids = split_parent(&parent).unwrap();
        let composite = 1.0 - (1.0 - kids[0].opacity) * (1.0 - kids[1].opacity);
        prop_assert!((composite - opacity).abs() < 1e-12);
        let back = merge_group(&kids, &[w, 1.0 - w]).unwrap();
        for k in 0..3 {
            prop_assert!((back.log_scale[k] - log_scale[k]).abs() < 1e-12);
            prop_assert!((back.mean[k] - mean[k]).abs() < 1e-12);
        }
        // merging averages log-transmittance, so two equal children merge to a child
        prop_assert!((back.opacity - kids[0].opacity).abs() < 1e-12);
    }

    #[test]
    fn equal_scale_merge_grows_by_cube_root(b_log in 0u32..5, scale in 0.01..3.0f64, seed in any::<u64>()) {
        let b = 1usize << b_log;
        let logits: Vec<f64> = (0..b).map(|i| ((seed >> (i % 60)) & 7) as f64 - 3.0).collect();
        let w = gate_weights(&logits, 1.0).unwrap();
        let items: Vec<GaussianParams> = (0..b).map(|i| GaussianParams::new([i as f64, 0.0, 1.0], scale, 0.3)).collect();
        let merged = merge_group(&items, &w).unwrap();
        let expect = scale * (b as f64).cbrt();
        prop_assert!((merged.log_scale[0].exp() - expect).abs() / expect < 1e-12);
    }

    #[test]
    fn stage_points_are_monotone(gaps in prop::collection::vec(1u64..500, 0..5), transition in 1u64..300, a in 0u64..3000, d in 0u64..3000) {
        let mut starts = vec![0];
        for g in &gaps {
            starts.push(starts.last().unwrap() + g);
        }
        let s = StageSchedule { starts, transition };
        let (p, q) = (stage_at(a, &s), stage_at(a + d, &s));
        prop_assert!((0.0..=1.0).contains(&p.lambda));
        prop_assert!(p.stage <= s.final_stage());
        prop_assert!(q.stage > p.stage || (q.stage == p.stage && q.lambda >= p.lambda));
    }

    #[test]
    fn canonical_frame_is_similarity_invariant(
        eyes in eyes(),
        q in quat(),
        t in prop::array::uniform3(-10.0..10.0f64),
        s in 0.05..20.0f64,
    ) {
        let views: Vec<CameraView> = eyes.iter().map(|e| view(*e, 4)).collect();
        let r = rotation(q);
        let moved: Vec<CameraView> = views
            .iter()
            .map(|v| CameraView { pose: CameraPose { rotation: r * v.pose.rotation, center: r * v.pose.center * s + Vector3::from(t) }, ..v.clone() })
            .collect();
        let (a, b) = (canonicalize(&views).unwrap(), canonicalize(&moved).unwrap());
        let mut diameter: f64 = 0.0;
        for (i, (x, y)) in a.views.iter().zip(&b.views).enumerate() {
            prop_assert!((x.pose.rotation - y.pose.rotation).abs().max() < 1e-9);
            prop_assert!((x.pose.center - y.pose.center).abs().max() < 1e-9);
            for z in &a.views[i + 1..] {
                diameter = diameter.max((x.pose.center - z.pose.center).norm());
            }
        }
        prop_assert!((diameter - 1.0).abs() < 1e-12);
        prop_assert!((b.scale / a.scale - s).abs() / s < 1e-9);
    }

    #[test]
    fn plucker_rays_satisfy_line_identities(q in quat(), center in prop::array::uniform3(-3.0..3.0f64), f in 2.0..40.0f64) {
        let pose = CameraPose { rotation: rotation(q), center: Vector3::from(center) };
        let k = Intrinsics::new(f, 1.3 * f, 3.0, 2.5, 6, 5).unwrap();
        let map = plucker_rays(&pose, &k).unwrap();
        for v in 0..5 {
            for u in 0..6 {
                let r = map.at(u, v);
                let d = Vector3::new(r[0], r[1], r[2]);
                let m = Vector3::new(r[3], r[4], r[5]);
                prop_assert!((d.norm() - 1.0).abs() < 1e-12);
                prop_assert!(m.dot(&d).abs() < 1e-12);
                let p = pose.center + d * 3.7;
                prop_assert!((p.cross(&d) - m).abs().max() < 1e-9);
            }
        }
    }

    #[test]
    fn tiled_render_matches_reference(seed in any::<u64>(), count in 0usize..30, tile in 1usize..20, w in 1usize..24, h in 1usize..24) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = RandomScene {
            count,
            lo: [-1.0, -1.0, 1.5],
            hi: [1.0, 1.0, 4.0],
            scale: (0.02, 0.5),
            opacity: (0.01, 0.999),
            color: (0.0, 1.0),
            sh_rest_std: 0.2,
        }
        .sample(&mut rng);
        let camera = Camera {
            pose: CameraPose::identity(),
            intrinsics: Intrinsics::new(w as f64, h as f64, w as f64 / 2.0, h as f64 / 2.0, w, h).unwrap(),
        };
        let cfg = RenderConfig { tile_size: tile, ..RenderConfig::default() };
        let a = render(scene.as_ref(), &camera, &cfg).unwrap();
        let b = render_reference(scene.as_ref(), &camera, &cfg).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.accumulation.iter().all(|o| (0.0..=1.0).contains(o)));
    }

    #[test]
    fn ply_roundtrips_within_f32(seed in any::<u64>(), count in 0usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = RandomScene {
            count,
            lo: [-3.0; 3],
            hi: [3.0; 3],
            scale: (0.001, 2.0),
            opacity: (0.01, 0.99),
            color: (0.0, 1.0),
            sh_rest_std: 0.5,
        }
        .sample(&mut rng);
        let bytes = ply::encode_ply(&scene).unwrap();
        prop_assert_eq!(bytes.len(), ply::header(count).len() + count * ply::PROPERTY_COUNT * 4);
        let back = ply::decode_ply(&bytes).unwrap();
        prop_assert_eq!(back.len(), count);
        let close = |a: &[f64], b: &[f64], tol: f64| a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * x.abs().max(1.0));
        prop_assert!(close(&scene.means, &back.means, 1e-6));
        prop_assert!(close(&scene.scales, &back.scales, 1e-5));
        prop_assert!(close(&scene.opacities, &back.opacities, 1e-5));
        prop_assert!(close(&scene.rotations, &back.rotations, 1e-5));
        prop_assert!(close(&scene.sh, &back.sh, 1e-6));
    }

    #[test]
    fn ppm_quantizes_to_the_nearest_level(w in 1usize..9, h in 1usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..w * h * 3).map(|_| rand::Rng::random_range(&mut rng, -0.2..1.2)).collect();
        let img = Image::new(w, h, data).unwrap();
        let back = ppm::decode_ppm(&ppm::encode_ppm(&img)).unwrap();
        for (x, y) in img.data.iter().zip(&back.data) {
            prop_assert!((x.clamp(0.0, 1.0) - y).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn spread_context_is_sorted_and_spans_the_sequence(frames in 2usize..500, k in 2usize..40) {
        prop_assume!(k <= frames);
        let idx = spread_context(frames, k).unwrap();
        prop_assert_eq!(idx.len(), k);
        prop_assert_eq!(idx[0], 0);
        prop_assert_eq!(idx[k - 1], frames - 1);
        prop_assert!(idx.windows(2).all(|p| p[0] < p[1]));
    }
}

#[test]
fn default_config_roundtrips_through_toml() {
    let run = RunConfig::default();
    let text = run.to_toml().unwrap();
    assert_eq!(RunConfig::from_toml(&text).unwrap(), run);
    assert!(RunConfig::from_toml("[encoder]\nlatentz = 3\n").is_err());
    assert_eq!(RunConfig::from_toml("").unwrap(), run);
}
