//! Operations shared by the command line and the HTTP server.

use std::fs;
use std::path::{Path, PathBuf};

use splatstyle::controls::{track_masks, ControlError, FloodFill, Point, TrackOptions};
use splatstyle::mask::Mask;
use splatstyle::pipeline::config::StylizeConfig;
use splatstyle::pipeline::io::{write_json, CameraRecord, Dataset};
use splatstyle::pipeline::stylize::{load_network, load_style_source, stylize, Progress, StylizeReport};
use splatstyle::pipeline::PipelineError;
use splatstyle::scene::ply::save_ply;
use splatstyle::scene::GaussianScene;
use splatstyle::tensor::Tensor;

/// Runs a stylization and, when `out` is given, writes `config.json`,
/// `scene.ply`, `log.json` and any checkpoints there.
pub fn run_stylize(
    scene: &GaussianScene,
    data: &Dataset,
    cfg: &StylizeConfig,
    out: Option<&Path>,
    observer: &mut dyn FnMut(&Progress) -> bool,
) -> Result<(GaussianScene, StylizeReport), PipelineError> {
    cfg.validate()?;
    let files: Vec<String> = data.records.iter().map(|r| r.file.clone()).collect();
    let source = load_style_source(cfg, &files)?;
    let net = load_network(cfg)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
        write_json(&dir.join("config.json"), cfg)?;
    }
    let mut failure = None;
    let result = stylize(scene, &data.views, &data.cameras, cfg, &source, net, &mut |p| {
        if let Progress::Iteration { log, total, scene } = &p {
            if log.iteration % 25 == 0 || log.iteration == *total {
                log::info!("iteration {}/{} loss {:.5} style {:.5}", log.iteration, total, log.total, log.style);
            }
            if let (Some(dir), true) = (out, cfg.checkpoint_every > 0 && log.iteration % cfg.checkpoint_every.max(1) == 0) {
                let path = dir.join(format!("checkpoint_{:05}.ply", log.iteration));
                if let Err(e) = save_ply(scene, &path) {
                    failure = Some(PipelineError::from(e));
                    return false;
                }
            }
        }
        observer(&p)
    });
    let (styled, report) = match (result, failure) {
        (_, Some(e)) => return Err(e),
        (r, None) => r?,
    };
    if let Some(dir) = out {
        save_ply(&styled, dir.join("scene.ply"))?;
        write_json(&dir.join("log.json"), &report)?;
    }
    Ok((styled, report))
}

/// Tracks a prompt from `view_index` forward to the last view and backward
/// to the first, returning one mask per view in dataset order.
pub fn track_from(
    views: &[Tensor<f32>],
    view_index: usize,
    points: &[Point],
    tolerance: f64,
) -> Result<Vec<Mask>, PipelineError> {
    if view_index >= views.len() {
        return Err(PipelineError::Config(format!(
            "view_index: {view_index} out of range for {} views",
            views.len()
        )));
    }
    let opts = TrackOptions {
        area_tolerance: tolerance,
        ..TrackOptions::default()
    };
    let seg = FloodFill::default();
    let remap = |e: ControlError, to_index: &dyn Fn(usize) -> usize| match e {
        ControlError::Exhausted { view } => ControlError::Exhausted { view: to_index(view) },
        other => other,
    };
    let forward = track_masks(&views[view_index..], points, &seg, &opts).map_err(|e| remap(e, &|v| view_index + v))?;
    let before: Vec<Tensor<f32>> = views[..=view_index].iter().rev().cloned().collect();
    let backward = track_masks(&before, points, &seg, &opts).map_err(|e| remap(e, &|v| view_index - v))?;
    Ok(backward.into_iter().skip(1).rev().chain(forward).collect())
}

/// Mask path for a view: the view's file name with a `.png` extension,
/// the layout region configs read masks from.
pub fn mask_path(dir: &Path, record: &CameraRecord) -> PathBuf {
    let name = Path::new(&record.file).file_name().map(|n| n.to_os_string()).unwrap_or_default();
    dir.join(name).with_extension("png")
}

pub fn save_masks(dir: &Path, records: &[CameraRecord], masks: &[Mask]) -> Result<Vec<PathBuf>, PipelineError> {
    fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    records
        .iter()
        .zip(masks)
        .map(|(r, m)| {
            let path = mask_path(dir, r);
            m.save_png(&path).map_err(|e| PipelineError::Image {
                path: path.clone(),
                source: e,
            })?;
            Ok(path)
        })
        .collect()
}
