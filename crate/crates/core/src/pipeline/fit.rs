//! Fitting every raw parameter of a scene to posed views, used to build
//! reconstruction scenes for tests. No densification or pruning.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::GroupScales;
use super::optim::{lr_at, Schedule, SceneOptimizer};
use super::{PipelineError, Stage, StageExt};
use crate::refine::reconstruction_loss;
use crate::render::{pack_scene, render_on_tape, unpack_scene, SceneVars, Trainable};
use crate::scene::{Camera, GaussianScene};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub iterations: usize,
    pub lambda_rec: f64,
    pub lr_start: f64,
    pub lr_end: f64,
    pub lr_scale: GroupScales,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            iterations: 2000,
            lambda_rec: 0.2,
            lr_start: 0.1,
            lr_end: 0.01,
            lr_scale: GroupScales {
                sh: 0.05,
                ..GroupScales::default()
            },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FitReport {
    /// Reconstruction loss of the view drawn at each iteration.
    pub losses: Vec<f64>,
}

/// Longest distance from the mean camera center to any camera center,
/// floored at 1.
pub fn camera_extent(cams: &[Camera]) -> f64 {
    if cams.is_empty() {
        return 1.0;
    }
    let centers: Vec<[f64; 3]> = cams.iter().map(Camera::center).collect();
    let mean: [f64; 3] = std::array::from_fn(|k| centers.iter().map(|c| c[k]).sum::<f64>() / centers.len() as f64);
    let far = centers
        .iter()
        .map(|c| (0..3).map(|k| (c[k] - mean[k]).powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    far.max(1.0)
}

/// Mean absolute error between renders and views.
pub fn mean_l1(scene: &GaussianScene, views: &[Tensor<f32>], cams: &[Camera]) -> Result<f64, PipelineError> {
    let mut total = 0.0;
    for (v, c) in views.iter().zip(cams) {
        let r = crate::render::rasterize(scene, c)?;
        total += r.color.data().iter().zip(v.data()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / v.len() as f64;
    }
    Ok(total / views.len().max(1) as f64)
}

/// Optimizes all parameters with Adam against the reconstruction loss,
/// visiting views in a reshuffled order every epoch. `observer` sees the
/// 1-based iteration and its loss; returning false cancels.
pub fn fit(
    init: &GaussianScene,
    views: &[Tensor<f32>],
    cams: &[Camera],
    opts: &FitOptions,
    observer: &mut dyn FnMut(usize, f64) -> bool,
) -> Result<(GaussianScene, FitReport), PipelineError> {
    if views.len() < 2 || views.len() != cams.len() {
        return Err(PipelineError::Config(format!(
            "fit needs at least 2 views with one camera each, got {} views and {} cameras",
            views.len(),
            cams.len()
        )));
    }
    for (i, (v, c)) in views.iter().zip(cams).enumerate() {
        if v.shape() != [3, c.height, c.width] {
            return Err(PipelineError::Config(format!(
                "view {i} has shape {:?}, camera expects [3, {}, {}]",
                v.shape(),
                c.height,
                c.width
            )));
        }
    }
    let mut scene = init.clone();
    let mut report = FitReport::default();
    if opts.iterations == 0 || scene.is_empty() {
        return Ok((scene, report));
    }
    let degree = scene.sh_degree();
    let schedule = Schedule {
        lr_start: opts.lr_start,
        lr_end: opts.lr_end,
        total: opts.iterations,
    };
    let mut optim = SceneOptimizer::new(scene.len(), degree, opts.lr_scale.as_array(camera_extent(cams)), [true; 5]);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = Vec::new();
    for it in 1..=opts.iterations {
        if order.is_empty() {
            order = (0..views.len()).collect();
            order.shuffle(&mut rng);
        }
        let v = order.pop().expect("refilled");
        let mut tape = Tape::<f32>::new();
        let vars = SceneVars::new(&mut tape, &scene.gaussians, degree, Trainable::ALL);
        let r = render_on_tape(&mut tape, &vars, &cams[v]).stage(Stage::Fit)?;
        let target = tape.constant(views[v].clone());
        let loss = reconstruction_loss(&mut tape, r.color, target, opts.lambda_rec).stage(Stage::Fit)?;
        let value = tape.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(PipelineError::NonFinite {
                what: "reconstruction loss".into(),
                iteration: it,
            }
            .at(Stage::Fit));
        }
        tape.backward(loss).stage(Stage::Fit)?;
        let grads = vars.packed_grad(&tape);
        let mut packed = pack_scene::<f32>(&scene.gaussians);
        optim.step(&mut packed, &grads, lr_at(&schedule, it - 1)).stage(Stage::Fit)?;
        if packed.iter().any(|v| !v.is_finite()) {
            return Err(PipelineError::NonFinite {
                what: "parameters".into(),
                iteration: it,
            }
            .at(Stage::Fit));
        }
        unpack_scene(&packed, &mut scene.gaussians);
        report.losses.push(value);
        if !observer(it, value) {
            return Err(PipelineError::Cancelled(it).at(Stage::Fit));
        }
    }
    Ok((scene, report))
}
