//! Finite-difference checks of every loss and of the rasterizer at 64 bits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::controls::luminance_rgb;
use crate::refine::{d_ssim, reconstruction_loss};
use crate::render::{pack_scene, rasterize, render_on_tape, SceneVars};
use crate::scene::{Camera, Gaussian, GaussianScene, SceneSnapshot};
use crate::styleloss::{
    content_loss, depth_loss, nnfm_loss, nnfm_loss_masked, reg_losses, total_loss, tv_loss, LossTerms, LossWeights,
    StyleError,
};
use crate::tensor::{finite_difference_check, GradCheckReport, Tape, Tensor, TensorError, Var};

pub const EPS: f64 = 1e-4;
/// Bound for losses on plain tensors.
pub const PURE_TOLERANCE: f64 = 1e-5;
/// Bound for anything differentiated through the rasterizer.
pub const RASTER_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Serialize)]
pub struct GradEntry {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub nan_count: usize,
    pub checked: usize,
    pub tolerance: f64,
}

impl GradEntry {
    pub fn passed(&self) -> bool {
        self.nan_count == 0 && self.max_rel_err < self.tolerance
    }
}

fn entry(name: &'static str, r: GradCheckReport, tolerance: f64) -> GradEntry {
    GradEntry {
        name,
        max_rel_err: r.max_rel_err,
        nan_count: r.nan_count,
        checked: r.checked,
        tolerance,
    }
}

fn tensor_err(e: StyleError) -> TensorError {
    match e {
        StyleError::Tensor(t) => t,
        other => TensorError::Invalid {
            op: "gradcheck",
            msg: other.to_string(),
        },
    }
}

fn random(rng: &mut ChaCha8Rng, shape: [usize; 3]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor<f64> {
    Tensor::from_fn([3, h, w], |_| rng.gen_range(0.05..0.95))
}

/// Gaussians at well separated depths in front of [`check_camera`].
pub fn check_scene(rng: &mut ChaCha8Rng, n: usize, degree: usize) -> GaussianScene {
    let gs = (0..n)
        .map(|i| {
            let mut g = Gaussian::isotropic(
                [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), 2.0 + 0.08 * i as f32],
                rng.gen_range(0.05..0.2),
                rng.gen_range(0.2..0.9),
                [rng.gen(), rng.gen(), rng.gen()],
                degree,
            );
            g.raw_scale = g.raw_scale.map(|s| s + rng.gen_range(-0.4..0.4));
            g.rotation = [1.0, rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)];
            for row in g.sh.iter_mut().skip(1) {
                *row = std::array::from_fn(|_| rng.gen_range(-0.2..0.2));
            }
            g
        })
        .collect();
    GaussianScene::new(gs, degree).expect("degree")
}

pub fn check_camera() -> Camera {
    Camera::look_at([0.2, -0.1, -0.5], [0.0, 0.0, 2.5], [0.0, -1.0, 0.0], 40.0, 16, 16).expect("camera")
}

fn packed(scene: &GaussianScene) -> Tensor<f64> {
    let p = pack_scene::<f64>(&scene.gaussians);
    Tensor::new([p.len()], p).expect("flat")
}

/// Runs every check with fixtures drawn from `seed`.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradEntry>, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let target = image(&mut rng, 12, 12);
    let x = image(&mut rng, 12, 12);
    let r = finite_difference_check(
        |t: &mut Tape<f64>, l| {
            let c = t.constant(target.clone());
            d_ssim(t, l, c)
        },
        &x,
        EPS,
    )?;
    out.push(entry("d-ssim", r, PURE_TOLERANCE));

    // Residuals kept away from the |·| kink.
    let x = Tensor::from_fn([3, 12, 12], |i| {
        let s = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        target.data()[i] + s * rng.gen_range(0.01..0.3)
    });
    let r = finite_difference_check(
        |t: &mut Tape<f64>, l| {
            let c = t.constant(target.clone());
            reconstruction_loss(t, l, c, 0.2)
        },
        &x,
        EPS,
    )?;
    out.push(entry("reconstruction", r, PURE_TOLERANCE));

    let style = random(&mut rng, [8, 5, 5]);
    let x = random(&mut rng, [8, 4, 4]);
    let r = finite_difference_check(
        |t: &mut Tape<f64>, l| {
            let s = t.constant(style.clone());
            nnfm_loss(t, l, s).map_err(tensor_err)
        },
        &x,
        EPS,
    )?;
    out.push(entry("nnfm", r, PURE_TOLERANCE));

    let rmask: Vec<bool> = (0..16).map(|i| i % 3 != 0).collect();
    let smask: Vec<bool> = (0..25).map(|i| i % 2 == 0).collect();
    let r = finite_difference_check(
        |t: &mut Tape<f64>, l| {
            let s = t.constant(style.clone());
            nnfm_loss_masked(t, l, s, Some(&rmask), Some(&smask)).map_err(tensor_err)
        },
        &x,
        EPS,
    )?;
    out.push(entry("nnfm spatial", r, PURE_TOLERANCE));

    let rgb_style = image(&mut rng, 5, 5);
    let rgb = image(&mut rng, 4, 4);
    let r = finite_difference_check(
        |t: &mut Tape<f64>, l| {
            let s = t.constant(rgb_style.clone());
            let sy = luminance_rgb(t, s)?;
            let y = luminance_rgb(t, l)?;
            nnfm_loss(t, y, sy).map_err(tensor_err)
        },
        &rgb,
        EPS,
    )?;
    out.push(entry("nnfm color", r, PURE_TOLERANCE));

    let style2 = random(&mut rng, [8, 5, 5]);
    let r = finite_difference_check(
        |t: &mut Tape<f64>, l| {
            let s1 = t.constant(style.clone());
            let s2 = t.constant(style2.clone());
            let a = nnfm_loss(t, l, s1).map_err(tensor_err)?;
            let sq = t.square(l)?;
            let b = nnfm_loss(t, sq, s2).map_err(tensor_err)?;
            let a = t.mul_scalar(a, 0.3)?;
            let b = t.mul_scalar(b, 0.7)?;
            t.add(a, b)
        },
        &x,
        EPS,
    )?;
    out.push(entry("nnfm scale", r, PURE_TOLERANCE));

    let content = random(&mut rng, [4, 5, 5]);
    let x = random(&mut rng, [4, 5, 5]);
    let r = finite_difference_check(
        |t: &mut Tape<f64>, l| {
            let c = t.constant(content.clone());
            content_loss(t, c, l)
        },
        &x,
        EPS,
    )?;
    out.push(entry("content", r, PURE_TOLERANCE));

    let x = Tensor::from_fn([3, 6, 6], |k| ((k % 36) as f64) * 0.37 % 1.0 + rng.gen_range(0.0..0.001) + (k / 36) as f64);
    let r = finite_difference_check(tv_loss, &x, EPS)?;
    out.push(entry("tv", r, PURE_TOLERANCE));

    let weights = LossWeights::default();
    let x = Tensor::from_fn([6], |_| rng.gen_range(0.0..2.0));
    let r = finite_difference_check(
        |t: &mut Tape<f64>, l| {
            let parts: Vec<Var> = (0..6)
                .map(|i| {
                    let s = t.slice(l, 0, i, 1)?;
                    let s = t.square(s)?;
                    t.sum(s)
                })
                .collect::<Result<_, _>>()?;
            let terms = LossTerms {
                style: parts[0],
                content: parts[1],
                depth: parts[2],
                scale: parts[3],
                opacity: parts[4],
                tv: parts[5],
            };
            total_loss(t, &terms, &weights)
        },
        &x,
        EPS,
    )?;
    out.push(entry("total", r, PURE_TOLERANCE));

    let base = check_scene(&mut rng, 10, 0);
    let snap = SceneSnapshot::new(&base);
    let mut moved = base.clone();
    for g in &mut moved.gaussians {
        g.raw_scale = g.raw_scale.map(|s| s + rng.gen_range(-0.3..0.3));
        g.raw_opacity += rng.gen_range(-0.5..0.5);
    }
    let n = moved.len();
    let r = finite_difference_check(
        |t: &mut Tape<f64>, l| {
            let vars = SceneVars::from_packed(t, l, n, 0)?;
            let (ls, la) = reg_losses(t, &vars, &snap).map_err(tensor_err)?;
            t.add(ls, la)
        },
        &packed(&moved),
        EPS,
    )?;
    out.push(entry("scale and opacity regularizers", r, PURE_TOLERANCE));

    let cam = check_camera();
    let scene = check_scene(&mut rng, 12, 2);
    let n = scene.len();
    let r = finite_difference_check(
        |t: &mut Tape<f64>, l| {
            let vars = SceneVars::from_packed(t, l, n, 2)?;
            let r = render_on_tape(t, &vars, &cam)?;
            let c = t.sum(r.color)?;
            let d = t.sum(r.depth)?;
            let a = t.sum(r.alpha)?;
            let cd = t.add(c, d)?;
            t.add(cd, a)
        },
        &packed(&scene),
        EPS,
    )?;
    out.push(entry("rasterizer", r, RASTER_TOLERANCE));

    let origin = rasterize(&scene, &cam).map_err(|e| TensorError::Invalid {
        op: "gradcheck",
        msg: e.to_string(),
    })?;
    let (d0, a0): (Tensor<f64>, Tensor<f64>) = (origin.depth.cast(), origin.alpha.cast());
    let mut shifted = scene.clone();
    for g in &mut shifted.gaussians {
        g.position[2] += 0.1;
        g.position[0] += 0.02;
    }
    let r = finite_difference_check(
        |t: &mut Tape<f64>, l| {
            let vars = SceneVars::from_packed(t, l, n, 2)?;
            let r = render_on_tape(t, &vars, &cam)?;
            depth_loss(t, &d0, &a0, r.depth)
        },
        &packed(&shifted),
        EPS,
    )?;
    out.push(entry("depth through rasterizer", r, RASTER_TOLERANCE));

    let target: Tensor<f64> = origin.color.cast();
    let r = finite_difference_check(
        |t: &mut Tape<f64>, l| {
            let vars = SceneVars::from_packed(t, l, n, 2)?;
            let r = render_on_tape(t, &vars, &cam)?;
            let c = t.constant(target.clone());
            d_ssim(t, r.color, c)
        },
        &packed(&shifted),
        EPS,
    )?;
    out.push(entry("d-ssim through rasterizer", r, RASTER_TOLERANCE));

    Ok(out)
}
