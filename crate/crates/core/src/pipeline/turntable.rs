//! Free-viewpoint frames along the training trajectory.

use std::fs;
use std::path::{Path, PathBuf};

use super::io::{save_depth_png, save_image, DepthRange};
use super::{PipelineError, Stage, StageExt};
use crate::render::rasterize;
use crate::scene::{interpolate_pose, Camera, GaussianScene};

/// Pose at parameter `s ∈ [0,1]` along the piecewise slerp through the
/// cameras in order; intrinsics come from the first camera.
pub fn trajectory_pose(cams: &[Camera], s: f64) -> Result<Camera, PipelineError> {
    let first = cams
        .first()
        .ok_or_else(|| PipelineError::Config("cams: at least one camera is required".into()))?;
    if !(0.0..=1.0).contains(&s) {
        return Err(PipelineError::Config(format!("pose_t: {s} outside [0, 1]")));
    }
    if cams.len() == 1 {
        return Ok(first.clone());
    }
    let segs = (cams.len() - 1) as f64;
    let x = s * segs;
    let i = (x.floor() as usize).min(cams.len() - 2);
    let t = (x - i as f64).clamp(0.0, 1.0);
    let with_intrinsics = |c: &Camera| Camera {
        fx: first.fx,
        fy: first.fy,
        cx: first.cx,
        cy: first.cy,
        width: first.width,
        height: first.height,
        ..c.clone()
    };
    let (a, b) = (with_intrinsics(&cams[i]), with_intrinsics(&cams[i + 1]));
    Ok(interpolate_pose(&a, &b, t, 0.0, &mut rand::rngs::mock::StepRng::new(0, 0))?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub color: PathBuf,
    pub depth: PathBuf,
    pub range: DepthRange,
}

/// Writes `n` frames evenly spaced along the trajectory (the first camera
/// when `n` is 1) as `frame_XXX.png` and `depth_XXX.png`.
pub fn render_turntable(scene: &GaussianScene, cams: &[Camera], n: usize, outdir: &Path) -> Result<Vec<Frame>, PipelineError> {
    if n == 0 {
        return Err(PipelineError::Config("frames: must be at least 1".into()));
    }
    fs::create_dir_all(outdir).map_err(|e| PipelineError::io(outdir, e))?;
    (0..n)
        .map(|k| {
            let s = if n == 1 { 0.0 } else { k as f64 / (n - 1) as f64 };
            let cam = trajectory_pose(cams, s)?;
            let r = rasterize(scene, &cam).stage(Stage::Render)?;
            let color = outdir.join(format!("frame_{k:03}.png"));
            let depth = outdir.join(format!("depth_{k:03}.png"));
            save_image(&color, &r.color)?;
            let range = save_depth_png(&depth, &r.depth, &r.alpha)?;
            Ok(Frame { color, depth, range })
        })
        .collect()
}
