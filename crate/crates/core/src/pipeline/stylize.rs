//! The two-stage stylization driver.

use std::path::Path;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ControlMode, StylizeConfig};
use super::fit::camera_extent;
use super::io::{downscale, load_image};
use super::optim::{lr_at, SceneOptimizer};
use super::{PipelineError, Stage, StageExt};
use crate::colorxfer::{
    assign_regions, compute_moments, image_pixels, recolor_image, recolor_regions, recolor_scene, solve_transform,
    ColorTransform,
};
use crate::features::ConvNetWeights;
use crate::mask::Mask;
use crate::refine::{finetune, FilterPass, FinetuneOptions};
use crate::render::{pack_scene, rasterize, render_on_tape, unpack_scene, SceneVars, Trainable};
use crate::scene::{interpolate_pose, sh, Camera, GaussianScene, SceneSnapshot};
use crate::styleloss::{content_loss, depth_loss, reg_losses, total_loss, tv_loss, LossTerms, StyleObjective};
use crate::tensor::{Tape, Tensor};

/// One spatial-control region with its per-view content masks.
#[derive(Debug, Clone)]
pub struct RegionInput {
    pub style: Tensor<f32>,
    pub style_mask: Mask,
    /// One mask per training view.
    pub view_masks: Vec<Mask>,
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub enum StyleSource {
    Global(Tensor<f32>),
    Regions(Vec<RegionInput>),
}

/// Loss terms of one stage-2 iteration, unweighted, plus the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub lr: f64,
    pub total: f64,
    pub style: f64,
    pub content: f64,
    pub depth: f64,
    pub scale: f64,
    pub opacity: f64,
    pub tv: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StylizeReport {
    pub stage1_losses: Vec<f64>,
    /// `(iteration, removed, aborted)` per filter pass.
    pub filter_passes: Vec<(usize, usize, bool)>,
    pub count_after_stage1: usize,
    pub stage2: Vec<IterationLog>,
    pub checksum: u64,
}

pub enum Progress<'a> {
    Stage1Done { scene: &'a GaussianScene },
    Iteration { log: &'a IterationLog, total: usize, scene: &'a GaussianScene },
}

/// Nearest-neighbor resample of a mask.
pub fn resize_mask(mask: &Mask, width: usize, height: usize) -> Mask {
    if mask.width() == width && mask.height() == height {
        return mask.clone();
    }
    let (sx, sy) = (mask.width() as f64 / width as f64, mask.height() as f64 / height as f64);
    Mask::from_fn(width, height, |x, y| {
        let u = (((x as f64 + 0.5) * sx) as usize).min(mask.width() - 1);
        let v = (((y as f64 + 0.5) * sy) as usize).min(mask.height() - 1);
        mask.get(u, v)
    })
}

/// VGG weights from the configured file, or the deterministic synthetic set.
pub fn load_network(cfg: &StylizeConfig) -> Result<ConvNetWeights, PipelineError> {
    match &cfg.vgg_weights {
        Some(p) => Ok(ConvNetWeights::load(p).stage(Stage::Load)?),
        None => Ok(ConvNetWeights::synthetic(0)),
    }
}

/// Style images and masks named by the config; per-view masks are read
/// from each region's directory under the view file names.
pub fn load_style_source(cfg: &StylizeConfig, view_files: &[String]) -> Result<StyleSource, PipelineError> {
    cfg.check_files()?;
    if cfg.control != ControlMode::Spatial {
        let path = cfg.style.as_ref().expect("checked");
        return Ok(StyleSource::Global(load_image(path)?));
    }
    let mut regions = Vec::with_capacity(cfg.regions.len());
    for r in &cfg.regions {
        let style = load_image(&r.style)?;
        let style_mask = match &r.style_mask {
            Some(p) => load_mask(p)?,
            None => Mask::full(style.shape()[2], style.shape()[1]),
        };
        let view_masks = view_files
            .iter()
            .map(|f| {
                let name = Path::new(f).file_name().map(|n| n.to_os_string()).unwrap_or_default();
                load_mask(&r.masks.join(name).with_extension("png"))
            })
            .collect::<Result<Vec<_>, _>>()?;
        regions.push(RegionInput {
            style,
            style_mask,
            view_masks,
            weight: r.weight,
        });
    }
    Ok(StyleSource::Regions(regions))
}

pub fn load_mask(path: &Path) -> Result<Mask, PipelineError> {
    Mask::load_png(path).map_err(|e| PipelineError::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

fn moments_of(imgs: &[(&Tensor<f32>, Option<&Mask>)]) -> Result<crate::colorxfer::Moments, PipelineError> {
    let px: Vec<[f64; 3]> = imgs.iter().flat_map(|(i, m)| image_pixels(i, *m)).collect();
    compute_moments(&px).stage(Stage::ColorTransfer)
}

/// Recolors a view region by region; unmasked pixels keep their color.
fn recolor_view_regions(view: &Tensor<f32>, masks: &[&Mask], transforms: &[ColorTransform]) -> Tensor<f32> {
    let plane = view.shape()[1] * view.shape()[2];
    let w = view.shape()[2];
    let mut out = view.clone();
    for (m, t) in masks.iter().zip(transforms) {
        let re = recolor_image(view, t);
        for i in 0..plane {
            if m.get(i % w, i / w) {
                for c in 0..3 {
                    out.data_mut()[c * plane + i] = re.data()[c * plane + i];
                }
            }
        }
    }
    out
}

/// Scenes whose Gaussians are colored by region label, up to three regions
/// per scene in the color channels.
fn label_scenes(scene: &GaussianScene, labels: &[Option<usize>], regions: usize) -> Vec<GaussianScene> {
    let on = (0.5 / sh::SH_C0) as f32;
    (0..regions.div_ceil(3))
        .map(|chunk| {
            let mut s = scene.clone();
            for (g, label) in s.gaussians.iter_mut().zip(labels) {
                for row in g.sh.iter_mut() {
                    *row = [0.0; 3];
                }
                g.sh[0] = std::array::from_fn(|c| if *label == Some(3 * chunk + c) { on } else { -on });
            }
            s
        })
        .collect()
}

/// Per-region masks of a view: pixels whose coverage by the region's
/// Gaussians exceeds one half.
fn render_region_masks(label_scenes: &[GaussianScene], regions: usize, cam: &Camera) -> Result<Vec<Mask>, PipelineError> {
    let mut out = Vec::with_capacity(regions);
    let (w, h) = (cam.width, cam.height);
    for (chunk, s) in label_scenes.iter().enumerate() {
        let r = rasterize(s, cam)?;
        for c in 0..3 {
            if 3 * chunk + c >= regions {
                break;
            }
            let d = &r.color.data()[c * w * h..(c + 1) * w * h];
            out.push(Mask::from_fn(w, h, |x, y| d[y * w + x] > 0.5));
        }
    }
    Ok(out)
}

fn sample_pose(cams: &[Camera], jitter_rad: f64, rng: &mut ChaCha8Rng) -> Result<Camera, PipelineError> {
    let a = rng.gen_range(0..cams.len());
    let b = if cams.len() > 1 {
        let j = rng.gen_range(0..cams.len() - 1);
        if j >= a {
            j + 1
        } else {
            j
        }
    } else {
        a
    };
    let t: f64 = rng.gen();
    let (ca, cb) = (&cams[a], &cams[b]);
    let cb = Camera {
        fx: ca.fx,
        fy: ca.fy,
        cx: ca.cx,
        cy: ca.cy,
        width: ca.width,
        height: ca.height,
        ..cb.clone()
    };
    Ok(interpolate_pose(ca, &cb, t, jitter_rad, rng)?)
}

/// Color transfer and SH refinement with floater filtering. Returns the
/// refined scene and the Gaussian region labels for spatial control.
fn stage_one(
    scene: &GaussianScene,
    views: &[Tensor<f32>],
    cams: &[Camera],
    cfg: &StylizeConfig,
    source: &StyleSource,
    rng: &mut ChaCha8Rng,
    report: &mut StylizeReport,
) -> Result<GaussianScene, PipelineError> {
    let (recolored, targets) = match source {
        // Color control keeps the scene's own colors.
        StyleSource::Global(_) if cfg.control == ControlMode::Color => (scene.clone(), views.to_vec()),
        StyleSource::Global(style) => {
            let content: Vec<(&Tensor<f32>, Option<&Mask>)> = views.iter().map(|v| (v, None)).collect();
            let t = solve_transform(&moments_of(&content)?, &moments_of(&[(style, None)])?, cfg.cov_eps)
                .stage(Stage::ColorTransfer)?;
            (recolor_scene(scene, &t), views.iter().map(|v| recolor_image(v, &t)).collect())
        }
        StyleSource::Regions(regions) => {
            let mut transforms = Vec::with_capacity(regions.len());
            for r in regions {
                let content: Vec<(&Tensor<f32>, Option<&Mask>)> =
                    views.iter().zip(&r.view_masks).map(|(v, m)| (v, Some(m))).collect();
                let style = moments_of(&[(&r.style, Some(&r.style_mask))])?;
                transforms.push(solve_transform(&moments_of(&content)?, &style, cfg.cov_eps).stage(Stage::ColorTransfer)?);
            }
            let per_view: Vec<Vec<Mask>> = (0..views.len())
                .map(|v| regions.iter().map(|r| r.view_masks[v].clone()).collect())
                .collect();
            let s = recolor_regions(scene, cams, &per_view, &transforms).stage(Stage::ColorTransfer)?;
            let targets = views
                .iter()
                .zip(&per_view)
                .map(|(v, ms)| recolor_view_regions(v, &ms.iter().collect::<Vec<_>>(), &transforms))
                .collect();
            (s, targets)
        }
    };
    let mut refined = recolored;
    let opts = FinetuneOptions {
        iterations: cfg.stage1_iterations,
        policy: cfg.filter,
        lambda_rec: cfg.lambda_rec,
        schedule: cfg.stage1_schedule(),
    };
    let out = finetune(&mut refined, &targets, cams, &opts, rng).stage(Stage::Refine)?;
    report.stage1_losses = out.losses;
    report.filter_passes = out
        .filter_passes
        .iter()
        .map(|p: &FilterPass| (p.iteration, p.removed, p.aborted))
        .collect();
    Ok(refined)
}

/// Runs color transfer and refinement, then the joint stylization of all
/// parameters from sampled poses. Views and cameras are downscaled to
/// `cfg.max_side` first. `observer` returning false cancels the run.
pub fn stylize(
    scene: &GaussianScene,
    views: &[Tensor<f32>],
    cams: &[Camera],
    cfg: &StylizeConfig,
    source: &StyleSource,
    net: ConvNetWeights,
    observer: &mut dyn FnMut(Progress) -> bool,
) -> Result<(GaussianScene, StylizeReport), PipelineError> {
    cfg.validate()?;
    if views.len() != cams.len() || cams.is_empty() {
        return Err(PipelineError::Config(format!(
            "cams: {} cameras for {} views",
            cams.len(),
            views.len()
        )));
    }
    if scene.is_empty() {
        return Err(PipelineError::Config("scene: no Gaussians".into()));
    }
    if let StyleSource::Regions(rs) = source {
        if let Some(r) = rs.iter().find(|r| r.view_masks.len() != views.len()) {
            return Err(PipelineError::Config(format!(
                "regions: {} masks for {} views",
                r.view_masks.len(),
                views.len()
            )));
        }
    }
    let (views, cams) = downscale(views, cams, cfg.max_side);
    let source = match source {
        StyleSource::Global(s) => StyleSource::Global(s.clone()),
        StyleSource::Regions(rs) => StyleSource::Regions(
            rs.iter()
                .map(|r| RegionInput {
                    view_masks: r
                        .view_masks
                        .iter()
                        .zip(&cams)
                        .map(|(m, c)| resize_mask(m, c.width, c.height))
                        .collect(),
                    ..r.clone()
                })
                .collect(),
        ),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = StylizeReport::default();

    let mut scene = if cfg.stage1_iterations > 0 {
        stage_one(scene, &views, &cams, cfg, &source, &mut rng, &mut report)?
    } else {
        scene.clone()
    };
    report.count_after_stage1 = scene.len();
    info!("stage 1 done: {} Gaussians", scene.len());
    if !observer(Progress::Stage1Done { scene: &scene }) {
        return Err(PipelineError::Cancelled(0).at(Stage::Refine));
    }

    let luminance = cfg.control == ControlMode::Color;
    let layers = cfg.style_layers();
    let (objective, labels) = match &source {
        StyleSource::Global(style) => (
            StyleObjective::new(net, cfg.normalization, layers, luminance, style).stage(Stage::Stylize)?,
            None,
        ),
        StyleSource::Regions(rs) => {
            let targets: Vec<(Tensor<f32>, Mask, f64)> =
                rs.iter().map(|r| (r.style.clone(), r.style_mask.clone(), r.weight)).collect();
            let obj = StyleObjective::with_regions(net, cfg.normalization, layers, luminance, &targets)
                .stage(Stage::Stylize)?;
            let per_view: Vec<Vec<Mask>> = (0..views.len())
                .map(|v| rs.iter().map(|r| r.view_masks[v].clone()).collect())
                .collect();
            let labels = assign_regions(&scene, &cams, &per_view).stage(Stage::Stylize)?;
            (obj, Some(label_scenes(&scene, &labels, rs.len())))
        }
    };

    let snapshot = SceneSnapshot::new(&scene);
    let count = scene.len();
    let degree = scene.sh_degree();
    let schedule = cfg.stage2_schedule();
    let mut optim = SceneOptimizer::new(count, degree, cfg.lr_scale.as_array(camera_extent(&cams)), [true; 5]);
    let jitter = cfg.pose_jitter_deg.to_radians();
    for it in 1..=cfg.stage2_iterations {
        let log = stage_two_step(
            &mut scene,
            &snapshot,
            &cams,
            cfg,
            &objective,
            labels.as_deref(),
            &mut optim,
            lr_at(&schedule, it - 1),
            jitter,
            it,
            &mut rng,
        )
        .map_err(|e| e.at(Stage::Stylize))?;
        debug_assert_eq!(scene.len(), count);
        report.stage2.push(log);
        if !observer(Progress::Iteration {
            log: &log,
            total: cfg.stage2_iterations,
            scene: &scene,
        }) {
            return Err(PipelineError::Cancelled(it).at(Stage::Stylize));
        }
    }
    report.checksum = scene.checksum();
    Ok((scene, report))
}

#[allow(clippy::too_many_arguments)]
fn stage_two_step(
    scene: &mut GaussianScene,
    snapshot: &SceneSnapshot,
    cams: &[Camera],
    cfg: &StylizeConfig,
    objective: &StyleObjective,
    labels: Option<&[GaussianScene]>,
    optim: &mut SceneOptimizer,
    lr: f64,
    jitter: f64,
    iteration: usize,
    rng: &mut ChaCha8Rng,
) -> Result<IterationLog, PipelineError> {
    let cam = sample_pose(cams, jitter, rng)?;
    let origin = rasterize(snapshot.scene(), &cam)?;
    let content_target = objective.content_features(&origin.color)?;
    let masks = match labels {
        Some(ls) => Some(render_region_masks(ls, objective.region_count(), &cam)?),
        None => None,
    };

    let mut tape = Tape::<f32>::new();
    let vars = SceneVars::new(&mut tape, &scene.gaussians, scene.sh_degree(), Trainable::ALL);
    let r = render_on_tape(&mut tape, &vars, &cam)?;
    let eval = objective.evaluate(&mut tape, r.color, masks.as_deref())?;
    let target = tape.constant(content_target);
    let content = content_loss(&mut tape, target, eval.content_features)?;
    let depth = depth_loss(&mut tape, &origin.depth, &origin.alpha, r.depth)?;
    let (scale, opacity) = reg_losses(&mut tape, &vars, snapshot)?;
    let tv = tv_loss(&mut tape, r.color)?;
    let terms = LossTerms {
        style: eval.style,
        content,
        depth,
        scale,
        opacity,
        tv,
    };
    let total = total_loss(&mut tape, &terms, &cfg.weights)?;
    let value = |v| tape.value(v).item() as f64;
    let log = IterationLog {
        iteration,
        lr,
        total: value(total),
        style: value(terms.style),
        content: value(terms.content),
        depth: value(terms.depth),
        scale: value(terms.scale),
        opacity: value(terms.opacity),
        tv: value(terms.tv),
    };
    if !log.total.is_finite() {
        return Err(PipelineError::NonFinite {
            what: "loss".into(),
            iteration,
        });
    }
    tape.backward(total)?;
    let grads = vars.packed_grad(&tape);
    let mut packed = pack_scene::<f32>(&scene.gaussians);
    optim.step(&mut packed, &grads, lr)?;
    if packed.iter().any(|v| !v.is_finite()) {
        return Err(PipelineError::NonFinite {
            what: "parameters".into(),
            iteration,
        });
    }
    unpack_scene(&packed, &mut scene.gaussians);
    Ok(log)
}

/// Mean style term of a whole-image objective over the given cameras.
pub fn mean_style_loss(
    scene: &GaussianScene,
    cams: &[Camera],
    objective: &StyleObjective,
) -> Result<f64, PipelineError> {
    let mut total = 0.0;
    for cam in cams {
        let img = rasterize(scene, cam)?.color;
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(img);
        let e = objective.evaluate(&mut tape, x, None)?;
        total += tape.value(e.style).item() as f64;
    }
    Ok(total / cams.len().max(1) as f64)
}
