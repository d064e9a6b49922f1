//! Color-only fine-tuning against recolored views, and removal of
//! oversized or nearly transparent Gaussians.

use log::{info, warn};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::optim::{lr_at, OptimError, SceneOptimizer, Schedule};
use crate::render::{pack_scene, render_on_tape, unpack_scene, SceneVars, Trainable};
use crate::scene::{Camera, GaussianScene};
use crate::tensor::{Real, Tape, Tensor, TensorError, Var};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Error)]
pub enum RefineError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("{views} views for {cameras} cameras")]
    ViewCount { views: usize, cameras: usize },
    #[error("invalid filter policy: {0}")]
    Policy(String),
    #[error("filtering would remove all {0} Gaussians")]
    WouldEmpty(usize),
}

/// Normalized 11×11 Gaussian window as a `[1,1,11,11]` kernel.
pub fn ssim_window<T: Real>() -> Tensor<T> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - half).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    Tensor::from_fn([1, 1, SSIM_WINDOW, SSIM_WINDOW], |k| {
        T::lit(g[k / SSIM_WINDOW] * g[k % SSIM_WINDOW] / (s * s))
    })
}

/// `(1 − SSIM)/2` averaged over channels and pixels; windows are
/// zero-padded at the border.
pub fn d_ssim<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var, TensorError> {
    let sa = tape.shape(a).to_vec();
    if sa != tape.shape(b) || sa.len() != 3 {
        return Err(TensorError::ShapeMismatch {
            op: "d_ssim",
            lhs: sa,
            rhs: tape.shape(b).to_vec(),
        });
    }
    let k = tape.constant(ssim_window());
    let mut maps = Vec::with_capacity(sa[0]);
    for c in 0..sa[0] {
        let x = tape.slice(a, 0, c, 1)?;
        let y = tape.slice(b, 0, c, 1)?;
        let xx = tape.mul(x, x)?;
        let yy = tape.mul(y, y)?;
        let xy = tape.mul(x, y)?;
        let mu_x = tape.conv2d(x, k, None)?;
        let mu_y = tape.conv2d(y, k, None)?;
        let e_xx = tape.conv2d(xx, k, None)?;
        let e_yy = tape.conv2d(yy, k, None)?;
        let e_xy = tape.conv2d(xy, k, None)?;
        let mu_xx = tape.mul(mu_x, mu_x)?;
        let mu_yy = tape.mul(mu_y, mu_y)?;
        let mu_xy = tape.mul(mu_x, mu_y)?;
        let var_x = tape.sub(e_xx, mu_xx)?;
        let var_y = tape.sub(e_yy, mu_yy)?;
        let cov = tape.sub(e_xy, mu_xy)?;

        let l_num = tape.mul_scalar(mu_xy, T::lit(2.0))?;
        let l_num = tape.add_scalar(l_num, T::lit(SSIM_C1))?;
        let c_num = tape.mul_scalar(cov, T::lit(2.0))?;
        let c_num = tape.add_scalar(c_num, T::lit(SSIM_C2))?;
        let l_den = tape.add(mu_xx, mu_yy)?;
        let l_den = tape.add_scalar(l_den, T::lit(SSIM_C1))?;
        let c_den = tape.add(var_x, var_y)?;
        let c_den = tape.add_scalar(c_den, T::lit(SSIM_C2))?;
        let num = tape.mul(l_num, c_num)?;
        let den = tape.mul(l_den, c_den)?;
        maps.push(tape.div(num, den)?);
    }
    let all = tape.concat(&maps, 0)?;
    let ssim = tape.mean(all)?;
    let one_minus = tape.mul_scalar(ssim, T::lit(-0.5))?;
    tape.add_scalar(one_minus, T::lit(0.5))
}

pub fn l1_loss<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var, TensorError> {
    let d = tape.sub(a, b)?;
    let d = tape.abs(d)?;
    tape.mean(d)
}

/// `(1 − λ)·L1 + λ·D-SSIM`.
pub fn reconstruction_loss<T: Real>(tape: &mut Tape<T>, render: Var, target: Var, lambda: f64) -> Result<Var, TensorError> {
    let l1 = l1_loss(tape, render, target)?;
    let l1 = tape.mul_scalar(l1, T::lit(1.0 - lambda))?;
    if lambda == 0.0 {
        return Ok(l1);
    }
    let ds = d_ssim(tape, render, target)?;
    let ds = tape.mul_scalar(ds, T::lit(lambda))?;
    tape.add(l1, ds)
}

/// Percentile thresholds for floater removal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterPolicy {
    /// Percent of Gaussians with the lowest opacity to drop.
    pub k_opacity: f64,
    /// Percent of Gaussians with the largest scale to drop.
    pub k_scale: f64,
    /// Iterations between filter passes.
    pub period: usize,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        Self {
            k_opacity: 5.0,
            k_scale: 8.0,
            period: 100,
        }
    }
}

impl FilterPolicy {
    pub fn validate(&self) -> Result<(), RefineError> {
        for (name, k) in [("k_opacity", self.k_opacity), ("k_scale", self.k_scale)] {
            if !(0.0..50.0).contains(&k) {
                return Err(RefineError::Policy(format!("{name} = {k} outside [0, 50)")));
            }
        }
        if self.period == 0 {
            return Err(RefineError::Policy("period must be at least 1".into()));
        }
        Ok(())
    }
}

/// Number of Gaussians covered by `k` percent of `n`, rounded up.
fn percentile_count(k: f64, n: usize) -> usize {
    ((k * n as f64 / 100.0).ceil() as usize).min(n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub scene: GaussianScene,
    /// Survivor flags against the input order.
    pub keep: Vec<bool>,
    pub removed: usize,
}

/// Removes the union of the `k_scale`% largest (by max activated scale
/// component) and the `k_opacity`% least opaque Gaussians. Ties go to the
/// lower index.
pub fn filter_floaters(scene: &GaussianScene, policy: &FilterPolicy) -> Result<FilterOutcome, RefineError> {
    policy.validate()?;
    let n = scene.len();
    let size: Vec<f32> = scene
        .gaussians
        .iter()
        .map(|g| g.scale().into_iter().fold(f32::NEG_INFINITY, f32::max))
        .collect();
    let opacity: Vec<f32> = scene.gaussians.iter().map(|g| g.opacity()).collect();

    let mut by_size: Vec<usize> = (0..n).collect();
    by_size.sort_by(|&a, &b| size[b].total_cmp(&size[a]).then(a.cmp(&b)));
    let mut by_opacity: Vec<usize> = (0..n).collect();
    by_opacity.sort_by(|&a, &b| opacity[a].total_cmp(&opacity[b]).then(a.cmp(&b)));

    let mut keep = vec![true; n];
    for &i in by_size.iter().take(percentile_count(policy.k_scale, n)) {
        keep[i] = false;
    }
    for &i in by_opacity.iter().take(percentile_count(policy.k_opacity, n)) {
        keep[i] = false;
    }
    let removed = keep.iter().filter(|&&k| !k).count();
    if removed == n && n > 0 {
        return Err(RefineError::WouldEmpty(n));
    }
    let mut out = scene.clone();
    let drop: Vec<bool> = keep.iter().map(|k| !k).collect();
    out.retain_indices(&drop);
    Ok(FilterOutcome {
        scene: out,
        keep,
        removed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneOptions {
    pub iterations: usize,
    pub policy: FilterPolicy,
    pub lambda_rec: f64,
    pub schedule: Schedule,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FilterPass {
    /// 1-based iteration after which the pass ran.
    pub iteration: usize,
    pub removed: usize,
    pub aborted: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FinetuneReport {
    pub losses: Vec<f64>,
    pub filter_passes: Vec<FilterPass>,
}

/// Reconstruction loss of `scene` rendered at `cam` against `target`.
pub fn view_loss(scene: &GaussianScene, cam: &Camera, target: &Tensor<f32>, lambda: f64) -> Result<f64, TensorError> {
    let mut tape = Tape::<f32>::new();
    let vars = SceneVars::new(&mut tape, &scene.gaussians, scene.sh_degree(), Trainable::NONE);
    let r = render_on_tape(&mut tape, &vars, cam)?;
    let t = tape.constant(target.clone());
    let loss = reconstruction_loss(&mut tape, r.color, t, lambda)?;
    Ok(tape.value(loss).item() as f64)
}

/// Optimizes SH coefficients only, on randomly drawn training views, and
/// filters floaters after every `policy.period` iterations.
pub fn finetune(
    scene: &mut GaussianScene,
    views: &[Tensor<f32>],
    cams: &[Camera],
    opts: &FinetuneOptions,
    rng: &mut impl Rng,
) -> Result<FinetuneReport, RefineError> {
    if views.len() != cams.len() || views.is_empty() {
        return Err(RefineError::ViewCount {
            views: views.len(),
            cameras: cams.len(),
        });
    }
    opts.policy.validate()?;
    let degree = scene.sh_degree();
    let mut optim = SceneOptimizer::new(scene.len(), degree, [1.0; 5], [false, false, false, false, true]);
    let mut report = FinetuneReport::default();
    for it in 1..=opts.iterations {
        let v = rng.gen_range(0..views.len());
        let mut tape = Tape::<f32>::new();
        let vars = SceneVars::new(&mut tape, &scene.gaussians, degree, Trainable::COLOR);
        let r = render_on_tape(&mut tape, &vars, &cams[v])?;
        let target = tape.constant(views[v].clone());
        let loss = reconstruction_loss(&mut tape, r.color, target, opts.lambda_rec)?;
        tape.backward(loss)?;
        report.losses.push(tape.value(loss).item() as f64);
        let grads = vars.packed_grad(&tape);
        let mut packed = pack_scene::<f32>(&scene.gaussians);
        optim.step(&mut packed, &grads, lr_at(&opts.schedule, it - 1))?;
        unpack_scene(&packed, &mut scene.gaussians);

        if it % opts.policy.period == 0 {
            let pass = match filter_floaters(scene, &opts.policy) {
                Ok(out) => {
                    optim.retain(&out.keep);
                    *scene = out.scene;
                    FilterPass {
                        iteration: it,
                        removed: out.removed,
                        aborted: false,
                    }
                }
                Err(RefineError::WouldEmpty(n)) => {
                    warn!("filter pass at iteration {it} would remove all {n} Gaussians; skipped");
                    FilterPass {
                        iteration: it,
                        removed: 0,
                        aborted: true,
                    }
                }
                Err(e) => return Err(e),
            };
            info!("filter pass at iteration {it}: removed {}", pass.removed);
            report.filter_passes.push(pass);
        }
    }
    Ok(report)
}
