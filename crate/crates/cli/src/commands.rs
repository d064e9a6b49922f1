//! Subcommands of the `splatstyle` binary.

use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use splatstyle::controls::Point;
use splatstyle::pipeline::config::{ControlMode, StylizeConfig};
use splatstyle::pipeline::fit::{fit, mean_l1, FitOptions};
use splatstyle::pipeline::gradcheck::gradient_suite;
use splatstyle::pipeline::io::{save_image, Dataset};
use splatstyle::pipeline::synthetic::{orbit_cameras, perturbed_init, style_image, toy_scene};
use splatstyle::pipeline::turntable::render_turntable;
use splatstyle::pipeline::PipelineError;
use splatstyle::refine::{filter_floaters, FilterPolicy};
use splatstyle::render::rasterize;
use splatstyle::scene::{load_ply, save_ply};
use thiserror::Error;

use crate::driver::{run_stylize, save_masks, track_from};
use crate::server::{serve, ServerOptions};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("gradient check failed: {0}")]
    GradCheck(String),
    #[error("server: {0}")]
    Server(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Pipeline(e) => e.exit_code(),
            CliError::GradCheck(_) => 3,
            CliError::Server(_) => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "splatstyle", version, about = "Controllable stylization of Gaussian splatting scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Stylize a scene against a style image.
    Stylize(StylizeArgs),
    /// Fit a scene to posed views (no densification).
    Fit(FitArgs),
    /// Render color and depth frames along the camera trajectory.
    Render(RenderArgs),
    /// Remove the least opaque and largest Gaussians.
    Filter(FilterArgs),
    /// Propagate a point-prompted mask through all views.
    TrackMasks(TrackArgs),
    /// Finite-difference check of every loss and the rasterizer.
    Gradcheck(GradcheckArgs),
    /// Serve the HTTP job API.
    Serve(ServeArgs),
    /// Write a synthetic toy dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct StylizeArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub cams: PathBuf,
    #[arg(long)]
    pub style: Option<PathBuf>,
    #[arg(long)]
    pub control: Option<ControlMode>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub cams: PathBuf,
    #[arg(long)]
    pub init: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output PLY path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub cams: PathBuf,
    #[arg(long, default_value_t = 30)]
    pub frames: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long, default_value_t = FilterPolicy::default().k_opacity)]
    pub k_opacity: f64,
    #[arg(long, default_value_t = FilterPolicy::default().k_scale)]
    pub k_scale: f64,
    /// Output PLY path.
    #[arg(long)]
    pub out: PathBuf,
}

/// Prompt points written as `x,y;x,y`.
#[derive(Debug, Clone, PartialEq)]
pub struct Points(pub Vec<Point>);

impl FromStr for Points {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        s.split(';')
            .filter(|p| !p.trim().is_empty())
            .map(|p| {
                let (x, y) = p.split_once(',').ok_or_else(|| format!("point `{p}` is not x,y"))?;
                let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("point `{p}`: {e}"));
                Ok([parse(x)?, parse(y)?])
            })
            .collect::<Result<Vec<_>, _>>()
            .and_then(|v| if v.is_empty() { Err("no points given".into()) } else { Ok(Points(v)) })
    }
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    #[arg(long)]
    pub cams: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub view_index: usize,
    #[arg(long)]
    pub points: Points,
    /// Allowed area deviation as a fraction of the first mask's area.
    #[arg(long, default_value_t = 0.1)]
    pub tolerance: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub cams: PathBuf,
    /// Directory for masks and job outputs.
    #[arg(long, default_value = "splatstyle-work")]
    pub workdir: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 2000)]
    pub count: usize,
    #[arg(long, default_value_t = 96)]
    pub size: usize,
    #[arg(long, default_value_t = 8)]
    pub views: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Stylize(a) => stylize_cmd(a),
        Command::Fit(a) => fit_cmd(a),
        Command::Render(a) => {
            let scene = load_ply(&a.scene).map_err(PipelineError::from)?;
            let data = Dataset::load(&a.cams)?;
            let frames = render_turntable(&scene, &data.cameras, a.frames, &a.out)?;
            println!("wrote {} frames to {}", frames.len(), a.out.display());
            Ok(())
        }
        Command::Filter(a) => {
            let scene = load_ply(&a.scene).map_err(PipelineError::from)?;
            let policy = FilterPolicy {
                k_opacity: a.k_opacity,
                k_scale: a.k_scale,
                ..FilterPolicy::default()
            };
            let out = filter_floaters(&scene, &policy).map_err(PipelineError::from)?;
            save_ply(&out.scene, &a.out).map_err(PipelineError::from)?;
            println!("removed {} of {} Gaussians", out.removed, scene.len());
            Ok(())
        }
        Command::TrackMasks(a) => {
            let data = Dataset::load(&a.cams)?;
            let masks = track_from(&data.views, a.view_index, &a.points.0, a.tolerance)?;
            let paths = save_masks(&a.out, &data.records, &masks)?;
            println!("wrote {} masks to {}", paths.len(), a.out.display());
            Ok(())
        }
        Command::Gradcheck(a) => {
            let entries = gradient_suite(a.seed).map_err(PipelineError::from)?;
            let mut failed = Vec::new();
            for e in &entries {
                let verdict = if e.passed() { "PASS" } else { "FAIL" };
                println!(
                    "{verdict} {:<32} max_rel_err {:.3e} (tol {:.0e}) nan {} checked {}",
                    e.name, e.max_rel_err, e.tolerance, e.nan_count, e.checked
                );
                if !e.passed() {
                    failed.push(e.name);
                }
            }
            if failed.is_empty() {
                Ok(())
            } else {
                Err(CliError::GradCheck(failed.join(", ")))
            }
        }
        Command::Serve(a) => serve(&ServerOptions {
            host: a.host,
            port: a.port,
            scene: a.scene,
            cams: a.cams,
            workdir: a.workdir,
        }),
        Command::Synth(a) => synth_cmd(a),
    }
}

fn stylize_cmd(a: StylizeArgs) -> Result<(), CliError> {
    let mut cfg = match &a.config {
        Some(p) => StylizeConfig::load(p)?,
        None => StylizeConfig::default(),
    };
    if let Some(s) = a.style {
        cfg.style = Some(s);
    }
    if let Some(c) = a.control {
        cfg.control = c;
    }
    let scene = load_ply(&a.scene).map_err(PipelineError::from)?;
    let data = Dataset::load(&a.cams)?;
    let (styled, report) = run_stylize(&scene, &data, &cfg, Some(&a.out), &mut |_| true)?;
    println!(
        "stylized {} Gaussians, checksum {:016x}, wrote {}",
        styled.len(),
        report.checksum,
        a.out.join("scene.ply").display()
    );
    Ok(())
}

fn fit_cmd(a: FitArgs) -> Result<(), CliError> {
    let data = Dataset::load(&a.cams)?;
    let init = load_ply(&a.init).map_err(PipelineError::from)?;
    let opts = FitOptions {
        iterations: a.iters,
        seed: a.seed,
        ..FitOptions::default()
    };
    let (scene, _) = fit(&init, &data.views, &data.cameras, &opts, &mut |it, loss| {
        if it % 100 == 0 {
            log::info!("iteration {it}/{} loss {loss:.5}", opts.iterations);
        }
        true
    })?;
    save_ply(&scene, &a.out).map_err(PipelineError::from)?;
    println!(
        "mean L1 {:.5}, wrote {}",
        mean_l1(&scene, &data.views, &data.cameras)?,
        a.out.display()
    );
    Ok(())
}

fn synth_cmd(a: SynthArgs) -> Result<(), CliError> {
    let truth = toy_scene(a.count, 1, a.seed);
    let cams = orbit_cameras(a.views, a.size, a.size, 40.0).map_err(PipelineError::from)?;
    let views = cams
        .iter()
        .map(|c| Ok(rasterize(&truth, c)?.color))
        .collect::<Result<Vec<_>, PipelineError>>()?;
    Dataset::save(&a.out.join("cams.json"), &cams, &views)?;
    save_ply(&truth, a.out.join("truth.ply")).map_err(PipelineError::from)?;
    save_ply(&perturbed_init(&truth, 0.05, a.seed + 1), a.out.join("init.ply")).map_err(PipelineError::from)?;
    save_image(&a.out.join("style.png"), &style_image(128, 128, a.seed + 2))?;
    println!("wrote {} views to {}", views.len(), a.out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn points_parse() {
        assert_eq!("3,4".parse::<Points>().unwrap(), Points(vec![[3, 4]]));
        assert_eq!("3,4; 5,6".parse::<Points>().unwrap(), Points(vec![[3, 4], [5, 6]]));
        assert!("3".parse::<Points>().is_err());
        assert!("".parse::<Points>().is_err());
        assert!("a,1".parse::<Points>().is_err());
    }

    #[test]
    fn cli_parses() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
        let cli = Cli::try_parse_from(["splatstyle", "stylize", "--scene", "s.ply", "--cams", "c.json", "--control", "scale", "--out", "o"])
            .unwrap();
        match cli.command {
            Command::Stylize(a) => assert_eq!(a.control, Some(ControlMode::Scale)),
            other => panic!("{other:?}"),
        }
    }
}
