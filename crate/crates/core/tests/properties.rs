mod common;

use proptest::prelude::*;
use rand::Rng;

use common::*;
use s3g_core::checkpoint::Checkpoint;
use s3g_core::field::{FieldConfig, HexPlaneField, SceneBounds};
use s3g_core::render::{render, render_backward, ImageGrads, RenderOptions};
use s3g_core::scene::{DeformedGaussians, GaussianSet};

fn small_field() -> FieldConfig {
    FieldConfig {
        base_resolution: 6,
        time_resolution: 5,
        scales: vec![1, 2],
        hidden_dim: 4,
        merge_width: 8,
        feature_dim: 8,
        head_width: 8,
        ..FieldConfig::default()
    }
}

fn canonical(g: &DeformedGaussians) -> GaussianSet {
    let mut s = GaussianSet::empty(g.sh_degree);
    s.positions = g.positions.clone();
    s.log_scales = g.log_scales.clone();
    s.rotations = g.rotations.clone();
    s.opacity_logits = g.opacity_logits.clone();
    s.sh_coeffs = g.sh_coeffs.clone();
    s.active_sh_degree = g.active_sh_degree;
    s
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn tiled_render_matches_reference(seed in any::<u64>(), n in 1usize..120, w in 8usize..40, h in 8usize..40) {
        let mut r = rng(seed);
        let cam = orbit_camera(w, h, &mut r);
        let g = random_gaussians(n, &SceneRanges::default(), &mut r);
        let opts = RenderOptions::default();
        let (fast, _) = render(&g, &cam, &opts).unwrap();
        let slow = naive_render(&g, &cam, &opts);
        prop_assert!(max_abs_diff(&fast.rgb, &slow.rgb) <= 1e-9);
        prop_assert!(max_abs_diff(&fast.depth, &slow.depth) <= 1e-9);
        prop_assert!(max_abs_diff(&fast.alpha, &slow.alpha) <= 1e-9);
    }

    #[test]
    fn weights_partition_coverage(seed in any::<u64>(), n in 1usize..150) {
        let mut r = rng(seed);
        let cam = orbit_camera(24, 20, &mut r);
        let g = random_gaussians(n, &SceneRanges::default(), &mut r);
        let (img, rec) = render(&g, &cam, &RenderOptions::default()).unwrap();
        for y in 0..cam.height {
            for x in 0..cam.width {
                let w = rec.pixel_weights(x, y);
                prop_assert!(w.iter().all(|(_, v)| *v >= 0.0));
                let sum: f64 = w.iter().map(|(_, v)| v).sum();
                let p = y * cam.width + x;
                prop_assert!((sum - img.alpha[p]).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(&img.alpha[p]));
                prop_assert!(img.depth[p] >= 0.0);
                prop_assert!(img.rgb[3 * p..3 * p + 3].iter().all(|c| *c >= 0.0));
            }
        }
    }

    #[test]
    fn render_ignores_input_order(seed in any::<u64>(), n in 2usize..100) {
        let mut r = rng(seed);
        let cam = orbit_camera(20, 20, &mut r);
        let g = random_gaussians(n, &SceneRanges::default(), &mut r);
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, r.random_range(0..=i));
        }
        let opts = RenderOptions::default();
        prop_assert_eq!(render(&g, &cam, &opts).unwrap().0, render(&g.select(&order), &cam, &opts).unwrap().0);
    }

    #[test]
    fn backward_is_thread_count_invariant(seed in any::<u64>(), n in 1usize..80) {
        let mut r = rng(seed);
        let cam = orbit_camera(40, 36, &mut r);
        let g = random_gaussians(n, &SceneRanges::default(), &mut r);
        let px = cam.width * cam.height;
        let up = ImageGrads {
            rgb: random_vec(3 * px, &mut r),
            depth: random_vec(px, &mut r),
            semantic: random_vec(3 * px, &mut r),
            alpha: random_vec(px, &mut r),
        };
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let (_, rec) = render(&g, &cam, &RenderOptions::default()).unwrap();
                render_backward(&rec, &g, &up).unwrap()
            })
        };
        prop_assert_eq!(run(1), run(3));
    }

    #[test]
    fn fresh_field_deforms_to_identity(seed in any::<u64>(), n in 1usize..40, t in 0.0f64..1.0) {
        let mut r = rng(seed);
        let g = random_gaussians(n, &SceneRanges { sh_degree: 1, ..SceneRanges::default() }, &mut r);
        let scene = canonical(&g);
        let bounds = SceneBounds::around(&scene.positions, 0.0, 1.0).unwrap();
        let f = HexPlaneField::new(small_field(), &bounds, 1, &mut r).unwrap();
        let (d, tape) = f.deform(&scene, t).unwrap();
        prop_assert_eq!(&d.positions, &scene.positions);
        prop_assert_eq!(&d.sh_coeffs, &scene.sh_coeffs);
        prop_assert!(tape.offsets.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn checkpoint_roundtrip_is_lossless(seed in any::<u64>(), n in 1usize..30, with_field in any::<bool>()) {
        let mut r = rng(seed);
        let g = random_gaussians(n, &SceneRanges { sh_degree: 1, ..SceneRanges::default() }, &mut r);
        let scene = canonical(&g);
        let field = with_field.then(|| {
            let b = SceneBounds::around(&scene.positions, 0.0, 1.0).unwrap();
            let mut f = HexPlaneField::new(small_field(), &b, 1, &mut r).unwrap();
            f.params_mut().iter_mut().for_each(|v| *v += r.random_range(-0.1..0.1));
            f
        });
        let ck = Checkpoint::new(scene, field);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back.scene, &ck.scene);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }
}
