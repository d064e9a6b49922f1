//! Color-space helpers, layer-weight presets for scale control, and
//! point-prompted mask tracking across views.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::block_layers;
use crate::mask::Mask;
use crate::tensor::{Real, Tape, Tensor, TensorError, Var};

pub const RGB_TO_YIQ: [[f64; 3]; 3] = [
    [0.299, 0.587, 0.114],
    [0.595716, -0.274453, -0.321263],
    [0.211456, -0.522591, 0.311135],
];

/// Inverse of [`RGB_TO_YIQ`].
pub fn yiq_to_rgb_matrix() -> [[f64; 3]; 3] {
    let m = nalgebra::Matrix3::from_fn(|r, c| RGB_TO_YIQ[r][c]);
    let inv = m.try_inverse().expect("YIQ matrix is invertible");
    std::array::from_fn(|r| std::array::from_fn(|c| inv[(r, c)]))
}

fn apply_matrix<T: Real>(m: &[[f64; 3]; 3], img: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(TensorError::Rank {
            op: "color_matrix",
            expected: 3,
            got: s.to_vec(),
        });
    }
    let plane = s[1] * s[2];
    let d = img.data();
    let mut out = vec![T::zero(); d.len()];
    for i in 0..plane {
        let p = [d[i].to_f64_lossy(), d[plane + i].to_f64_lossy(), d[2 * plane + i].to_f64_lossy()];
        for r in 0..3 {
            out[r * plane + i] = T::lit(m[r][0] * p[0] + m[r][1] * p[1] + m[r][2] * p[2]);
        }
    }
    Tensor::new(s.to_vec(), out)
}

pub fn rgb_to_yiq<T: Real>(img: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    apply_matrix(&RGB_TO_YIQ, img)
}

pub fn yiq_to_rgb<T: Real>(img: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    apply_matrix(&yiq_to_rgb_matrix(), img)
}

/// Luminance of a `[3,H,W]` image replicated into three channels.
pub fn luminance_rgb<T: Real>(tape: &mut Tape<T>, img: Var) -> Result<Var, TensorError> {
    let mut y: Option<Var> = None;
    for (c, &w) in RGB_TO_YIQ[0].iter().enumerate() {
        let ch = tape.slice(img, 0, c, 1)?;
        let term = tape.mul_scalar(ch, T::lit(w))?;
        y = Some(match y {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    let y = y.expect("three channels");
    tape.concat(&[y, y, y], 0)
}

/// Scalar luminance, rounded the same way as [`luminance_rgb`].
pub fn luminance<T: Real>(r: T, g: T, b: T) -> T {
    let w = RGB_TO_YIQ[0];
    r * T::lit(w[0]) + g * T::lit(w[1]) + b * T::lit(w[2])
}

/// Per-layer NNFM weights for scale control.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScalePreset {
    Fine,
    #[default]
    Default,
    Coarse,
}

impl ScalePreset {
    pub fn block_weights(self) -> &'static [(&'static str, f64)] {
        match self {
            ScalePreset::Fine => &[("conv2", 1.0), ("conv3", 0.5)],
            ScalePreset::Default => &[("conv2", 1.0), ("conv3", 1.0)],
            ScalePreset::Coarse => &[("conv3", 0.5), ("conv4", 1.0)],
        }
    }

    /// Expands block weights onto every conv layer of each block.
    pub fn layer_weights(self) -> Vec<(String, f64)> {
        expand_blocks(self.block_weights())
    }
}

pub fn expand_blocks(blocks: &[(&str, f64)]) -> Vec<(String, f64)> {
    blocks
        .iter()
        .flat_map(|&(b, w)| block_layers(b).into_iter().map(move |l| (l.to_string(), w)))
        .collect()
}

impl FromStr for ScalePreset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fine" => Ok(ScalePreset::Fine),
            "default" => Ok(ScalePreset::Default),
            "coarse" => Ok(ScalePreset::Coarse),
            other => Err(format!("unknown scale preset {other:?}")),
        }
    }
}

impl fmt::Display for ScalePreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScalePreset::Fine => "fine",
            ScalePreset::Default => "default",
            ScalePreset::Coarse => "coarse",
        })
    }
}

/// Pixel coordinate `[x, y]`.
pub type Point = [usize; 2];

/// Produces a binary mask from an image and prompt points.
pub trait Segmenter {
    fn segment(&self, image: &Tensor<f32>, points: &[Point]) -> Mask;
}

/// 4-connected region growing from each point over pixels whose every
/// channel is within `threshold` of the seed's.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FloodFill {
    pub threshold: f32,
}

impl Default for FloodFill {
    fn default() -> Self {
        Self { threshold: 0.05 }
    }
}

impl Segmenter for FloodFill {
    fn segment(&self, image: &Tensor<f32>, points: &[Point]) -> Mask {
        let s = image.shape();
        let (c, h, w) = (s[0], s[1], s[2]);
        let d = image.data();
        let px = |x: usize, y: usize, ch: usize| d[ch * h * w + y * w + x];
        let mut mask = Mask::empty(w, h);
        for &[sx, sy] in points {
            if sx >= w || sy >= h {
                continue;
            }
            let seed: Vec<f32> = (0..c).map(|ch| px(sx, sy, ch)).collect();
            let similar = |x: usize, y: usize| (0..c).all(|ch| (px(x, y, ch) - seed[ch]).abs() < self.threshold);
            let mut seen = Mask::empty(w, h);
            let mut queue = VecDeque::from([(sx, sy)]);
            seen.set(sx, sy, true);
            while let Some((x, y)) = queue.pop_front() {
                mask.set(x, y, true);
                let mut visit = |nx: usize, ny: usize| {
                    if !seen.get(nx, ny) && similar(nx, ny) {
                        seen.set(nx, ny, true);
                        queue.push_back((nx, ny));
                    }
                };
                if x > 0 {
                    visit(x - 1, y);
                }
                if x + 1 < w {
                    visit(x + 1, y);
                }
                if y > 0 {
                    visit(x, y - 1);
                }
                if y + 1 < h {
                    visit(x, y + 1);
                }
            }
        }
        mask
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackOptions {
    /// Allowed area deviation as a fraction of the first mask's area.
    pub area_tolerance: f64,
    pub radius: usize,
    pub step: usize,
}

impl Default for TrackOptions {
    fn default() -> Self {
        Self {
            area_tolerance: 0.1,
            radius: 12,
            step: 2,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ControlError {
    #[error("no views to track")]
    NoViews,
    #[error("prompt point {0:?} lies outside the first view")]
    PointOutside(Point),
    #[error("area tolerance must be positive, got {0}")]
    Tolerance(f64),
    #[error("view {view}: no mask within the area tolerance in the search neighborhood")]
    Exhausted { view: usize },
}

/// Offsets on a `step` lattice within `radius`, nearest first and by angle
/// within a ring, excluding the origin.
pub fn spiral_offsets(radius: usize, step: usize) -> Vec<[isize; 2]> {
    let r = radius as isize;
    let st = step.max(1) as isize;
    let mut out = Vec::new();
    let mut dy = -(r / st) * st;
    while dy <= r {
        let mut dx = -(r / st) * st;
        while dx <= r {
            if (dx, dy) != (0, 0) && dx * dx + dy * dy <= r * r {
                out.push([dx, dy]);
            }
            dx += st;
        }
        dy += st;
    }
    out.sort_by(|a, b| {
        let da = a[0] * a[0] + a[1] * a[1];
        let db = b[0] * b[0] + b[1] * b[1];
        let ang = |p: &[isize; 2]| (p[1] as f64).atan2(p[0] as f64);
        da.cmp(&db).then(ang(a).total_cmp(&ang(b)))
    });
    out
}

fn shift(points: &[Point], off: [isize; 2], w: usize, h: usize) -> Option<Vec<Point>> {
    points
        .iter()
        .map(|p| {
            let x = p[0] as isize + off[0];
            let y = p[1] as isize + off[1];
            (x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h).then_some([x as usize, y as usize])
        })
        .collect()
}

/// Segments the first view at `points`, then carries the prompt through the
/// remaining views, searching nearby prompts whenever the mask area strays
/// from the first mask's area by more than the tolerance.
pub fn track_masks(
    views: &[Tensor<f32>],
    points: &[Point],
    segmenter: &dyn Segmenter,
    opts: &TrackOptions,
) -> Result<Vec<Mask>, ControlError> {
    let first = views.first().ok_or(ControlError::NoViews)?;
    if opts.area_tolerance.is_nan() || opts.area_tolerance <= 0.0 {
        return Err(ControlError::Tolerance(opts.area_tolerance));
    }
    let (h, w) = (first.shape()[1], first.shape()[2]);
    if let Some(p) = points.iter().find(|p| p[0] >= w || p[1] >= h) {
        return Err(ControlError::PointOutside(*p));
    }
    let m0 = segmenter.segment(first, points);
    let a0 = m0.area() as f64;
    let tol = opts.area_tolerance * a0;
    let ok = |m: &Mask| (m.area() as f64 - a0).abs() <= tol;
    let offsets = spiral_offsets(opts.radius, opts.step);

    let mut masks = vec![m0];
    let mut prompt = points.to_vec();
    for (i, view) in views.iter().enumerate().skip(1) {
        let (vh, vw) = (view.shape()[1], view.shape()[2]);
        let candidate = segmenter.segment(view, &prompt);
        if ok(&candidate) {
            masks.push(candidate);
            continue;
        }
        let found = offsets.iter().find_map(|&off| {
            let p = shift(&prompt, off, vw, vh)?;
            let m = segmenter.segment(view, &p);
            ok(&m).then_some((p, m))
        });
        match found {
            Some((p, m)) => {
                prompt = p;
                masks.push(m);
            }
            None => return Err(ControlError::Exhausted { view: i }),
        }
    }
    Ok(masks)
}
