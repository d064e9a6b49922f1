//! Differentiable Gaussian splatting renderer.

pub mod composite;
pub mod project;

pub use composite::{center_weights, composite_forward, CompositeOp, CompositeStats, MIN_ALPHA};
pub use project::{
    pack_scene, project, project_on_tape, unpack_scene, Projection, ProjectedVars, SceneVars, Trainable,
};

use crate::scene::{Camera, GaussianScene};
use crate::tensor::{Real, Result, Tape, Tensor, Var};

/// Tape handles of one rendered view.
#[derive(Debug, Clone, Copy)]
pub struct RenderVars {
    /// `[3, H, W]`
    pub color: Var,
    /// `[H, W]`, alpha-weighted camera depth.
    pub depth: Var,
    /// `[H, W]`, accumulated opacity.
    pub alpha: Var,
    pub stats: CompositeStats,
}

/// Renders `vars` from `cam` onto the tape.
pub fn render_on_tape<T: Real>(tape: &mut Tape<T>, vars: &SceneVars, cam: &Camera) -> Result<RenderVars> {
    let (w, h) = (cam.width, cam.height);
    if vars.count == 0 {
        let color = tape.constant(Tensor::zeros([3, h, w]));
        let depth = tape.constant(Tensor::zeros([h, w]));
        let alpha = tape.constant(Tensor::zeros([h, w]));
        return Ok(RenderVars {
            color,
            depth,
            alpha,
            stats: CompositeStats::default(),
        });
    }
    let p = project_on_tape(tape, vars, cam)?;
    let ins = [p.mean2d, p.cov2d, p.opacity, p.color, p.depth];
    let (out, stats) = {
        let vals: Vec<&Tensor<T>> = ins.iter().map(|&v| tape.value(v)).collect();
        composite_forward(&vals, w, h, T::lit(cam.near))
    };
    let op = CompositeOp {
        width: w,
        height: h,
        near: cam.near,
    };
    let packed = tape.custom(&ins, out, Box::new(op))?;
    let depth = tape.slice(packed, 0, composite::DEPTH_ROW, 1)?;
    let alpha = tape.slice(packed, 0, composite::ALPHA_ROW, 1)?;
    Ok(RenderVars {
        color: tape.slice(packed, 0, 0, 3)?,
        depth: tape.reshape(depth, [h, w])?,
        alpha: tape.reshape(alpha, [h, w])?,
        stats,
    })
}

/// A rendered view without gradient bookkeeping.
#[derive(Debug, Clone)]
pub struct Rendered {
    /// `[3, H, W]`
    pub color: Tensor<f32>,
    /// `[H, W]`
    pub depth: Tensor<f32>,
    /// `[H, W]`
    pub alpha: Tensor<f32>,
    pub stats: CompositeStats,
}

impl Rendered {
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let (h, w) = (self.color.shape()[1], self.color.shape()[2]);
        let i = y * w + x;
        [self.color.data()[i], self.color.data()[h * w + i], self.color.data()[2 * h * w + i]]
    }
}

pub fn rasterize(scene: &GaussianScene, cam: &Camera) -> Result<Rendered> {
    let mut tape = Tape::<f32>::new();
    let vars = SceneVars::new(&mut tape, &scene.gaussians, scene.sh_degree(), Trainable::NONE);
    let r = render_on_tape(&mut tape, &vars, cam)?;
    Ok(Rendered {
        color: tape.value(r.color).clone(),
        depth: tape.value(r.depth).clone(),
        alpha: tape.value(r.alpha).clone(),
        stats: r.stats,
    })
}

/// Screen position of each Gaussian's center when it is visible from `cam`:
/// inside the image and contributing more than `MIN_ALPHA` at that pixel.
pub fn visible_centers(scene: &GaussianScene, cam: &Camera) -> Result<Vec<Option<[f64; 2]>>> {
    if scene.is_empty() {
        return Ok(Vec::new());
    }
    let mut tape = Tape::<f64>::new();
    let vars = SceneVars::new(&mut tape, &scene.gaussians, scene.sh_degree(), Trainable::NONE);
    let p = project_on_tape(&mut tape, &vars, cam)?;
    let vals: Vec<&Tensor<f64>> =
        [p.mean2d, p.cov2d, p.opacity, p.color, p.depth].iter().map(|&v| tape.value(v)).collect();
    let weights = center_weights(&vals, cam.width, cam.height, cam.near);
    let n = scene.len();
    let mean = vals[0].data();
    Ok((0..n)
        .map(|i| (weights[i] > MIN_ALPHA).then(|| [mean[i], mean[n + i]]))
        .collect())
}
