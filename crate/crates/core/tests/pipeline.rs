use std::path::Path;

use splatstyle::features::ConvNetWeights;
use splatstyle::mask::Mask;
use splatstyle::pipeline::config::{ControlMode, StylizeConfig};
use splatstyle::pipeline::fit::{fit, mean_l1, FitOptions};
use splatstyle::pipeline::io::{fit_size, load_image, save_depth_png, save_image, to_rgb8, Dataset, DepthRange};
use splatstyle::pipeline::optim::{lr_at, Schedule};
use splatstyle::pipeline::stylize::{resize_mask, stylize, Progress, RegionInput, StyleSource};
use splatstyle::pipeline::synthetic::{orbit_cameras, perturbed_init, style_image, toy_scene};
use splatstyle::pipeline::turntable::{render_turntable, trajectory_pose};
use splatstyle::pipeline::{PipelineError, Stage};
use splatstyle::render::rasterize;
use splatstyle::scene::{Camera, GaussianScene};
use splatstyle::styleloss::LossWeights;
use splatstyle::tensor::Tensor;

fn toy(count: usize, res: usize, views: usize) -> (GaussianScene, Vec<Camera>, Vec<Tensor<f32>>) {
    let scene = toy_scene(count, 1, 1);
    let cams = orbit_cameras(views, res, res, 40.0).unwrap();
    let imgs = cams.iter().map(|c| rasterize(&scene, c).unwrap().color).collect();
    (scene, cams, imgs)
}

fn quiet(_: Progress) -> bool {
    true
}

#[test]
fn schedule_endpoints_and_midpoint() {
    let s = Schedule {
        lr_start: 0.1,
        lr_end: 0.01,
        total: 800,
    };
    assert_eq!(lr_at(&s, 0), 0.1);
    assert_eq!(lr_at(&s, 800), 0.01);
    assert!((lr_at(&s, 400) - (0.1f64 * 0.01).sqrt()).abs() < 1e-15);
}

#[test]
fn dataset_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (_, cams, views) = toy(80, 24, 3);
    let path = dir.path().join("cams.json");
    Dataset::save(&path, &cams, &views).unwrap();
    let ds = Dataset::load(&path).unwrap();
    assert_eq!(ds.records.len(), 3);
    for (a, b) in ds.cameras.iter().zip(&cams) {
        assert!(a.same_intrinsics(b));
        for (x, y) in a.cam_to_world().iter().zip(b.cam_to_world()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
    for (a, b) in ds.views.iter().zip(&views) {
        // 8-bit quantization bounds the round trip.
        assert!(a.max_abs_diff(b) <= 0.5 / 255.0 + 1e-6);
    }
}

#[test]
fn cameras_file_rejects_bad_matrix_and_size() {
    let dir = tempfile::tempdir().unwrap();
    let img = Tensor::full([3, 10, 12], 0.5f32);
    save_image(&dir.path().join("a.png"), &img).unwrap();
    let path = dir.path().join("cams.json");
    let write = |body: &str| std::fs::write(&path, body).unwrap();

    write(r#"[{"file":"a.png","width":12,"height":10,"fx":10,"fy":10,"cx":6,"cy":5,"cam_to_world":[1,0,0]}]"#);
    let e = Dataset::load(&path).unwrap_err().to_string();
    assert!(e.contains("cam_to_world"), "{e}");

    let eye = "[1,0,0,0, 0,1,0,0, 0,0,1,0, 0,0,0,1]";
    write(&format!(r#"[{{"file":"a.png","width":16,"height":10,"fx":10,"fy":10,"cx":6,"cy":5,"cam_to_world":{eye}}}]"#));
    let e = Dataset::load(&path).unwrap_err().to_string();
    assert!(e.contains("12x10"), "{e}");

    write(&format!(r#"[{{"file":"a.png","width":12,"height":10,"fx":10,"fy":10,"cx":6,"cy":5,"cam_to_world":{eye}}}]"#));
    assert_eq!(Dataset::load(&path).unwrap().views[0].shape(), &[3, 10, 12]);
}

#[test]
fn image_and_depth_files() {
    let dir = tempfile::tempdir().unwrap();
    let img = Tensor::from_fn([3, 5, 7], |i| (i % 256) as f32 / 255.0);
    let p = dir.path().join("x.png");
    save_image(&p, &img).unwrap();
    assert!(load_image(&p).unwrap().max_abs_diff(&img) < 1e-6);

    let depth = Tensor::from_fn([4, 4], |i| 1.0 + i as f32);
    let alpha = Tensor::from_fn([4, 4], |i| if i == 0 { 0.0 } else { 1.0 });
    let dp = dir.path().join("d.png");
    let range = save_depth_png(&dp, &depth, &alpha).unwrap();
    assert_eq!((range.min, range.max), (2.0, 16.0));
    let side: DepthRange = serde_json::from_str(&std::fs::read_to_string(dp.with_extension("json")).unwrap()).unwrap();
    assert_eq!(side, range);
    let png = image::open(&dp).unwrap().into_luma16();
    assert_eq!(png.get_pixel(0, 0)[0], 0);
    assert_eq!(png.get_pixel(1, 0)[0], 0);
    assert_eq!(png.get_pixel(3, 3)[0], 65535);

    assert_eq!(fit_size(512, 384, 256), (256, 192));
    assert_eq!(fit_size(100, 80, 256), (100, 80));
}

#[test]
fn fit_zero_iterations_returns_init() {
    let (scene, cams, views) = toy(50, 16, 2);
    let init = perturbed_init(&scene, 0.05, 3);
    let opts = FitOptions {
        iterations: 0,
        ..FitOptions::default()
    };
    let (out, rep) = fit(&init, &views, &cams, &opts, &mut |_, _| true).unwrap();
    assert_eq!(out, init);
    assert!(rep.losses.is_empty());
    let err = fit(&init, &views[..1], &cams[..1], &opts, &mut |_, _| true).unwrap_err();
    assert!(matches!(err, PipelineError::Config(_)));
}

#[test]
fn fit_recovers_toy_scene() {
    let (scene, cams, views) = toy(300, 32, 8);
    let init = perturbed_init(&scene, 0.05, 2);
    assert!(mean_l1(&init, &views, &cams).unwrap() > 0.05);
    let opts = FitOptions {
        iterations: 2000,
        ..FitOptions::default()
    };
    let (out, rep) = fit(&init, &views, &cams, &opts, &mut |_, _| true).unwrap();
    let l1 = mean_l1(&out, &views, &cams).unwrap();
    assert!(l1 < 0.02, "final L1 {l1}");
    // Window means never rise by more than the sampling noise of one window.
    let means: Vec<f64> = rep.losses.chunks(50).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
    for pair in means.windows(2) {
        assert!(pair[1] <= pair[0] * 1.05, "{means:?}");
    }
    assert!(means.last().unwrap() < &(means[0] * 0.2));
}

fn small_config(stage1: usize, stage2: usize) -> StylizeConfig {
    StylizeConfig {
        stage1_iterations: stage1,
        stage2_iterations: stage2,
        filter: splatstyle::refine::FilterPolicy {
            period: stage1.max(1),
            ..Default::default()
        },
        layer_weights: Some(vec![("conv2_1".into(), 1.0), ("conv3_1".into(), 1.0)]),
        ..StylizeConfig::default()
    }
}

#[test]
fn zero_iterations_leave_scene_unchanged() {
    let (scene, cams, views) = toy(120, 40, 3);
    let cfg = small_config(0, 0);
    let style = StyleSource::Global(style_image(48, 48, 1));
    let (out, rep) = stylize(&scene, &views, &cams, &cfg, &style, ConvNetWeights::synthetic(0), &mut quiet).unwrap();
    assert_eq!(out, scene);
    assert_eq!(rep.checksum, scene.checksum());
    assert!(rep.stage2.is_empty());
}

#[test]
fn content_only_objective_stays_at_snapshot() {
    let (scene, cams, views) = toy(150, 40, 3);
    let cfg = StylizeConfig {
        weights: LossWeights {
            style: 0.0,
            content: 0.005,
            depth: 0.0,
            scale: 0.0,
            opacity: 0.0,
            tv: 0.0,
        },
        ..small_config(0, 50)
    };
    let style = StyleSource::Global(style_image(48, 48, 1));
    let (out, rep) = stylize(&scene, &views, &cams, &cfg, &style, ConvNetWeights::synthetic(0), &mut quiet).unwrap();
    assert_eq!(rep.stage2.len(), 50);
    for log in &rep.stage2 {
        assert!(log.total.abs() < 1e-9, "{log:?}");
    }
    let mut drift = 0.0f32;
    for (a, b) in out.gaussians.iter().zip(&scene.gaussians) {
        let pa = a.position.iter().chain(&a.raw_scale).chain(&a.rotation).chain(a.sh.iter().flatten());
        let pb = b.position.iter().chain(&b.raw_scale).chain(&b.rotation).chain(b.sh.iter().flatten());
        for (x, y) in pa.zip(pb) {
            drift = drift.max((x - y).abs());
        }
        drift = drift.max((a.raw_opacity - b.raw_opacity).abs());
    }
    assert!(drift < 1e-3, "drift {drift}");
}

#[test]
fn stylize_keeps_count_and_is_reproducible() {
    let (scene, cams, views) = toy(200, 40, 4);
    let cfg = small_config(20, 12);
    let style = StyleSource::Global(style_image(48, 48, 2));
    let mut counts = Vec::new();
    let mut observe = |p: Progress| {
        if let Progress::Iteration { scene, .. } = p {
            counts.push(scene.len());
        }
        true
    };
    let (a, ra) = stylize(&scene, &views, &cams, &cfg, &style, ConvNetWeights::synthetic(0), &mut observe).unwrap();
    assert_eq!(ra.filter_passes.len(), 1);
    assert_eq!(counts.len(), 12);
    assert!(counts.iter().all(|&c| c == ra.count_after_stage1));
    assert_eq!(a.len(), ra.count_after_stage1);
    assert_ne!(a, scene);

    let (b, rb) = stylize(&scene, &views, &cams, &cfg, &style, ConvNetWeights::synthetic(0), &mut quiet).unwrap();
    assert_eq!(ra.checksum, rb.checksum);
    assert_eq!(a, b);
    let other = StylizeConfig { seed: 9, ..cfg };
    let (_, rc) = stylize(&scene, &views, &cams, &other, &style, ConvNetWeights::synthetic(0), &mut quiet).unwrap();
    assert_ne!(rc.checksum, ra.checksum);
}

#[test]
fn color_control_keeps_scene_colors_in_stage_one() {
    let (scene, cams, views) = toy(150, 40, 3);
    let cfg = StylizeConfig {
        control: ControlMode::Color,
        ..small_config(5, 2)
    };
    let style = StyleSource::Global(style_image(48, 48, 4));
    let (_, color) = stylize(&scene, &views, &cams, &cfg, &style, ConvNetWeights::synthetic(0), &mut quiet).unwrap();
    // Stage 1 refits the original views, which the scene already matches.
    assert!(color.stage1_losses[0] < 1e-3, "{:?}", color.stage1_losses);

    let plain = small_config(5, 2);
    let (_, rep) = stylize(&scene, &views, &cams, &plain, &style, ConvNetWeights::synthetic(0), &mut quiet).unwrap();
    assert!(rep.stage1_losses[0] > 10.0 * color.stage1_losses[0], "{:?}", rep.stage1_losses);
}

#[test]
fn spatial_control_runs_with_two_regions() {
    let (scene, cams, views) = toy(200, 40, 3);
    let halves = |left: bool| -> Vec<Mask> {
        cams.iter()
            .map(|c| Mask::from_fn(c.width, c.height, |x, _| (x < c.width / 2) == left))
            .collect()
    };
    let regions = vec![
        RegionInput {
            style: style_image(48, 48, 5),
            style_mask: Mask::full(48, 48),
            view_masks: halves(true),
            weight: 1.0,
        },
        RegionInput {
            style: style_image(48, 48, 6),
            style_mask: Mask::from_fn(48, 48, |_, y| y < 24),
            view_masks: halves(false),
            weight: 0.5,
        },
    ];
    let cfg = StylizeConfig {
        control: ControlMode::Spatial,
        regions: vec![splatstyle::pipeline::config::RegionConfig {
            style: "unused".into(),
            style_mask: None,
            masks: "unused".into(),
            weight: 1.0,
        }],
        ..small_config(5, 3)
    };
    let (out, rep) = stylize(
        &scene,
        &views,
        &cams,
        &cfg,
        &StyleSource::Regions(regions.clone()),
        ConvNetWeights::synthetic(0),
        &mut quiet,
    )
    .unwrap();
    assert_eq!(rep.stage2.len(), 3);
    assert!(rep.stage2.iter().all(|l| l.style > 0.0 && l.total.is_finite()));
    assert_eq!(out.len(), rep.count_after_stage1);

    let mut short = regions;
    short[1].view_masks.pop();
    let err = stylize(&scene, &views, &cams, &cfg, &StyleSource::Regions(short), ConvNetWeights::synthetic(0), &mut quiet)
        .unwrap_err();
    assert!(err.to_string().contains("regions"), "{err}");
}

#[test]
fn non_finite_loss_aborts_with_stage_tag() {
    let (mut scene, cams, views) = toy(100, 40, 3);
    for g in &mut scene.gaussians {
        g.sh[0][0] = f32::NAN;
    }
    let cfg = small_config(0, 3);
    let style = StyleSource::Global(style_image(48, 48, 1));
    let err = stylize(&scene, &views, &cams, &cfg, &style, ConvNetWeights::synthetic(0), &mut quiet).unwrap_err();
    assert_eq!(err.stage(), Some(Stage::Stylize));
    assert_eq!(err.exit_code(), 3, "{err}");
}

#[test]
fn cancel_stops_the_run() {
    let (scene, cams, views) = toy(100, 40, 3);
    let cfg = small_config(0, 10);
    let style = StyleSource::Global(style_image(48, 48, 1));
    let mut seen = 0;
    let mut observe = |p: Progress| {
        if let Progress::Iteration { log, .. } = p {
            seen = log.iteration;
            return log.iteration < 2;
        }
        true
    };
    let err = stylize(&scene, &views, &cams, &cfg, &style, ConvNetWeights::synthetic(0), &mut observe).unwrap_err();
    assert!(matches!(err.root(), PipelineError::Cancelled(2)));
    assert_eq!(seen, 2);
}

#[test]
fn turntable_single_frame_matches_rasterize() {
    let dir = tempfile::tempdir().unwrap();
    let (scene, cams, _) = toy(150, 32, 3);
    let frames = render_turntable(&scene, &cams, 1, dir.path()).unwrap();
    let want = to_rgb8(&rasterize(&scene, &cams[0]).unwrap().color);
    let got = image::open(&frames[0].color).unwrap().into_rgb8();
    assert_eq!(got, want);
    assert!(Path::new(&frames[0].depth).exists());
    assert!(frames[0].depth.with_extension("json").exists());

    let frames = render_turntable(&scene, &cams, 5, dir.path()).unwrap();
    assert_eq!(frames.len(), 5);
    let again = render_turntable(&scene, &cams, 5, dir.path()).unwrap();
    assert_eq!(frames, again);
    for k in 0..5 {
        let cam = trajectory_pose(&cams, k as f64 / 4.0).unwrap();
        let r = rasterize(&scene, &cam).unwrap();
        assert!(r.alpha.data().iter().all(|a| (0.0..=1.0).contains(a)));
    }
    let last = trajectory_pose(&cams, 1.0).unwrap();
    assert_eq!(last.cam_to_world(), cams[2].cam_to_world());
    assert!(render_turntable(&scene, &cams, 0, dir.path()).is_err());
}

#[test]
fn mask_resize_is_nearest() {
    let m = Mask::from_fn(8, 8, |x, y| x < 4 && y >= 2);
    let r = resize_mask(&m, 4, 4);
    assert_eq!(r, Mask::from_fn(4, 4, |x, y| x < 2 && y >= 1));
}
