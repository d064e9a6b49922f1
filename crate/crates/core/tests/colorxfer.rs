use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatstyle::colorxfer::{
    assign_regions, compute_moments, matrix_sqrt_psd, recolor_image, recolor_regions, recolor_scene, solve_transform,
    ColorTransform, Mat3, Moments, DEFAULT_COV_EPS,
};
use splatstyle::mask::Mask;
use splatstyle::render::rasterize;
use splatstyle::scene::{Camera, Gaussian, GaussianScene};
use splatstyle::tensor::Tensor;

mod common;
use common::*;

#[test]
fn moments_match_pairwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let px = random_pixels(&mut rng, 10_000);
    let m = compute_moments(&px).unwrap();
    assert!(max_abs(&m.cov, &pairwise_cov(&px)) < 1e-10);
    let mean: Vec<f64> = (0..3).map(|c| px.iter().map(|p| p[c]).sum::<f64>() / px.len() as f64).collect();
    for c in 0..3 {
        assert!((m.mean[c] - mean[c]).abs() < 1e-12);
    }
}

#[test]
fn sqrt_reconstructs_random_psd() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let g: Mat3 = std::array::from_fn(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0)));
        let gt: Mat3 = std::array::from_fn(|i| std::array::from_fn(|j| g[j][i]));
        let psd = mat_mul(&g, &gt);
        let s = matrix_sqrt_psd(&psd).unwrap();
        assert!(max_abs(&mat_mul(&s, &s), &psd) < 1e-8);
        for i in 0..3 {
            for j in 0..3 {
                assert!((s[i][j] - s[j][i]).abs() < 1e-12);
            }
        }
    }
    let id = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    assert!(max_abs(&matrix_sqrt_psd(&id).unwrap(), &id) < 1e-12);
}

fn mapped_moments(content: &[[f64; 3]], t: &ColorTransform) -> Moments {
    let mapped: Vec<[f64; 3]> = content.iter().map(|&p| t.apply(p)).collect();
    compute_moments(&mapped).unwrap()
}

#[test]
fn unregularized_transform_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..20 {
        let content = random_pixels(&mut rng, 500);
        let ms = compute_moments(&random_pixels(&mut rng, 700)).unwrap();
        let t = solve_transform(&compute_moments(&content).unwrap(), &ms, 0.0).unwrap();
        let mr = mapped_moments(&content, &t);
        assert!(max_abs(&mr.cov, &ms.cov) < 1e-9, "{:e}", max_abs(&mr.cov, &ms.cov));
    }
}

#[test]
fn regularization_bias_is_bounded() {
    // Loading both sides with εI leaves A·Σ_c·Aᵀ = Σ_s + ε(I − A·Aᵀ).
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..20 {
        let content = random_pixels(&mut rng, 500);
        let ms = compute_moments(&random_pixels(&mut rng, 700)).unwrap();
        let t = solve_transform(&compute_moments(&content).unwrap(), &ms, DEFAULT_COV_EPS).unwrap();
        let mr = mapped_moments(&content, &t);
        let at: Mat3 = std::array::from_fn(|i| std::array::from_fn(|j| t.a[j][i]));
        let aat = mat_mul(&t.a, &at);
        let predicted: Mat3 = std::array::from_fn(|i| {
            std::array::from_fn(|j| ms.cov[i][j] + DEFAULT_COV_EPS * (if i == j { 1.0 } else { 0.0 } - aat[i][j]))
        });
        assert!(max_abs(&mr.cov, &predicted) < 1e-10);
    }
}

#[test]
fn transformed_moments_equal_style_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let content = natural_pixels(&mut rng, 500);
        let style = natural_pixels(&mut rng, 700);
        let (mc, ms) = (compute_moments(&content).unwrap(), compute_moments(&style).unwrap());
        let t = solve_transform(&mc, &ms, DEFAULT_COV_EPS).unwrap();
        let mapped: Vec<[f64; 3]> = content.iter().map(|&p| t.apply(p)).collect();
        let mr = compute_moments(&mapped).unwrap();
        assert!(max_abs(&mr.cov, &ms.cov) < 1e-6, "{:e}", max_abs(&mr.cov, &ms.cov));
        for c in 0..3 {
            assert!((mr.mean[c] - ms.mean[c]).abs() < 1e-6);
        }
    }
}

#[test]
fn equal_moments_give_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let m = compute_moments(&random_pixels(&mut rng, 300)).unwrap();
    let t = solve_transform(&m, &m, DEFAULT_COV_EPS).unwrap();
    assert!(max_abs(&t.a, &ColorTransform::IDENTITY.a) < 1e-10);
    assert!(t.b.iter().all(|v| v.abs() < 1e-10));
}

#[test]
fn scaled_and_shifted_style() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // Independent channels keep the covariance diagonal.
    let content: Vec<[f64; 3]> = (0..400).map(|_| std::array::from_fn(|_| rng.gen_range(0.0..0.4))).collect();
    let style: Vec<[f64; 3]> = content.iter().map(|p| p.map(|v| 2.0 * v + 0.1)).collect();
    let mc = compute_moments(&content).unwrap();
    let t = solve_transform(&mc, &compute_moments(&style).unwrap(), 0.0).unwrap();
    let two_i = [[2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 2.0]];
    assert!(max_abs(&t.a, &two_i) < 1e-8);
    for c in 0..3 {
        // μ_s − 2μ_c = 2μ_c + 0.1 − 2μ_c.
        assert!((t.b[c] - 0.1).abs() < 1e-8);
    }
}

#[test]
fn identity_recolor_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let img = Tensor::from_fn([3, 9, 11], |_| rng.gen::<f32>());
    assert_eq!(recolor_image(&img, &ColorTransform::IDENTITY).data(), img.data());
}

fn camera(eye: [f64; 3]) -> Camera {
    Camera::look_at(eye, [0.0, 0.0, 0.0], [0.0, -1.0, 0.0], 50.0, 32, 32).unwrap()
}

fn blob_scene(rng: &mut ChaCha8Rng, centers: &[[f32; 3]], per: usize, degree: usize) -> GaussianScene {
    let mut gs = Vec::new();
    for c in centers {
        for _ in 0..per {
            let p = c.map(|v| v + rng.gen_range(-0.15..0.15));
            let mut g = Gaussian::isotropic(p, 0.06, 0.8, [rng.gen_range(0.1..0.4); 3], degree);
            for row in g.sh.iter_mut().skip(1) {
                *row = [0.03, -0.02, 0.01];
            }
            gs.push(g);
        }
    }
    GaussianScene::new(gs, degree).unwrap()
}

#[test]
fn scene_recolor_commutes_with_rendering() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let scene = blob_scene(&mut rng, &[[0.0, 0.0, 0.0]], 80, 0);
    let cam = camera([0.0, 0.0, -2.5]);
    let a = [[0.9, 0.1, 0.0], [0.05, 0.8, 0.1], [0.0, 0.2, 0.7]];
    let t = ColorTransform { a, b: [0.05, 0.02, 0.1] };
    let before = rasterize(&scene, &cam).unwrap();
    let after = rasterize(&recolor_scene(&scene, &t), &cam).unwrap();
    let plane = 32 * 32;
    for i in 0..plane {
        let c = [0, 1, 2].map(|k| before.color.data()[k * plane + i] as f64);
        let alpha = before.alpha.data()[i] as f64;
        for k in 0..3 {
            // Compositing is linear in color, so the offset is weighted by alpha.
            let want = (0..3).map(|j| a[k][j] * c[j]).sum::<f64>() + t.b[k] * alpha;
            assert!((after.color.data()[k * plane + i] as f64 - want).abs() < 1e-5);
        }
    }
}

#[test]
fn doubling_transform_doubles_render() {
    let g = Gaussian::isotropic([0.0, 0.0, 0.0], 0.3, 0.7, [0.3, 0.2, 0.4], 0);
    let scene = GaussianScene::new(vec![g], 0).unwrap();
    let cam = camera([0.0, 0.0, -2.0]);
    let t = ColorTransform {
        a: [[2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 2.0]],
        b: [0.0; 3],
    };
    let before = rasterize(&scene, &cam).unwrap();
    let after = rasterize(&recolor_scene(&scene, &t), &cam).unwrap();
    for (x, y) in before.color.data().iter().zip(after.color.data()) {
        assert!((2.0 * x - y).abs() < 1e-5);
    }
}

#[test]
fn recolored_training_set_matches_style() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let views: Vec<Tensor<f32>> = (0..4).map(|_| Tensor::from_fn([3, 16, 16], |_| rng.gen::<f32>() * 0.5)).collect();
    let content: Vec<[f64; 3]> = views.iter().flat_map(|v| splatstyle::colorxfer::image_pixels(v, None)).collect();
    let style = random_pixels(&mut rng, 900);
    let ms = compute_moments(&style).unwrap();
    let t = solve_transform(&compute_moments(&content).unwrap(), &ms, DEFAULT_COV_EPS).unwrap();
    // At f64 precision: apply to the same pixel set rather than f32 images.
    let mapped: Vec<[f64; 3]> = content.iter().map(|&p| t.apply(p)).collect();
    let mr = compute_moments(&mapped).unwrap();
    assert!(max_abs(&mr.cov, &ms.cov) < 1e-6);
    // The f32 images agree to f32 rounding.
    let recolored: Vec<[f64; 3]> = views
        .iter()
        .flat_map(|v| splatstyle::colorxfer::image_pixels(&recolor_image(v, &t), None))
        .collect();
    let mf = compute_moments(&recolored).unwrap();
    assert!(max_abs(&mf.cov, &ms.cov) < 1e-5);
}

#[test]
fn single_full_region_equals_global_recolor() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    // A sparse grid so no Gaussian is hidden behind another.
    let gs = (0..9)
        .map(|i| {
            let p = [0.3 * (i % 3) as f32 - 0.3, 0.3 * (i / 3) as f32 - 0.3, 0.0];
            let mut g = Gaussian::isotropic(p, 0.04, 0.6, [rng.gen_range(0.1..0.4); 3], 1);
            g.sh[1] = [0.02, 0.01, -0.01];
            g
        })
        .collect();
    let scene = GaussianScene::new(gs, 1).unwrap();
    let cams = vec![camera([0.0, 0.0, -2.5]), camera([0.8, 0.0, -2.3])];
    let masks = vec![vec![Mask::full(32, 32)]; 2];
    let t = ColorTransform {
        a: [[0.5, 0.0, 0.0], [0.0, 1.5, 0.0], [0.1, 0.0, 1.0]],
        b: [0.1, 0.0, -0.05],
    };
    let labels = assign_regions(&scene, &cams, &masks).unwrap();
    assert!(labels.iter().all(|l| *l == Some(0)));
    let regional = recolor_regions(&scene, &cams, &masks, &[t]).unwrap();
    assert_eq!(regional, recolor_scene(&scene, &t));
}

#[test]
fn two_regions_recolor_two_clusters() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let scene = blob_scene(&mut rng, &[[-0.5, 0.0, 0.0], [0.5, 0.0, 0.0]], 25, 0);
    let cams = vec![camera([0.0, 0.0, -2.5]), camera([0.2, 0.1, -2.5]), camera([-0.2, -0.1, -2.5])];
    let masks: Vec<Vec<Mask>> = cams
        .iter()
        .map(|_| vec![Mask::from_fn(32, 32, |x, _| x < 16), Mask::from_fn(32, 32, |x, _| x >= 16)])
        .collect();
    let red = ColorTransform {
        a: [[0.0; 3]; 3],
        b: [0.9, 0.1, 0.1],
    };
    let blue = ColorTransform {
        a: [[0.0; 3]; 3],
        b: [0.1, 0.1, 0.9],
    };
    let out = recolor_regions(&scene, &cams, &masks, &[red, blue]).unwrap();
    let view = rasterize(&out, &cams[0]).unwrap();
    let plane = 32 * 32;
    let mean_over = |ch: usize, left: bool| {
        let px: Vec<f32> = (0..plane)
            .filter(|&i| ((i % 32) < 16) == left && view.alpha.data()[i] > 0.5)
            .map(|i| view.color.data()[ch * plane + i] / view.alpha.data()[i])
            .collect();
        px.iter().sum::<f32>() / px.len() as f32
    };
    assert!(mean_over(0, true) > 0.8 && mean_over(2, true) < 0.2);
    assert!(mean_over(2, false) > 0.8 && mean_over(0, false) < 0.2);
}

#[test]
fn invisible_gaussian_keeps_color() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut scene = blob_scene(&mut rng, &[[0.0, 0.0, 0.0]], 5, 0);
    // Behind every camera.
    scene.gaussians.push(Gaussian::isotropic([0.0, 0.0, -10.0], 0.05, 0.8, [0.3; 3], 0));
    let cams = vec![camera([0.0, 0.0, -2.5])];
    let masks = vec![vec![Mask::full(32, 32)]];
    let t = ColorTransform {
        a: [[0.0; 3]; 3],
        b: [1.0; 3],
    };
    let out = recolor_regions(&scene, &cams, &masks, &[t]).unwrap();
    assert_eq!(out.gaussians.last(), scene.gaussians.last());
}

#[test]
fn overlapping_masks_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let scene = blob_scene(&mut rng, &[[0.0, 0.0, 0.0]], 5, 0);
    let cams = vec![camera([0.0, 0.0, -2.5])];
    let masks = vec![vec![Mask::from_fn(32, 32, |x, _| x < 20), Mask::from_fn(32, 32, |x, _| x >= 10)]];
    let id = ColorTransform::IDENTITY;
    assert!(recolor_regions(&scene, &cams, &masks, &[id, id]).is_err());
}

#[test]
fn moments_type_is_plain_data() {
    let m = Moments {
        mean: [0.0; 3],
        cov: [[0.0; 3]; 3],
    };
    assert_eq!(m, m.clone());
}
