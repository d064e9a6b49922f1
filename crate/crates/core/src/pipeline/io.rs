//! Cameras JSON, PNG views and depth maps.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{imageops, ImageBuffer, Luma, Rgb, Rgb32FImage, RgbImage};
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::scene::Camera;
use crate::styleloss::DEPTH_ALPHA_MIN;
use crate::tensor::Tensor;

/// One entry of the cameras file; `cam_to_world` is row-major 4×4.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRecord {
    pub file: String,
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub cam_to_world: Vec<f64>,
}

impl CameraRecord {
    pub fn from_camera(file: impl Into<String>, cam: &Camera) -> Self {
        Self {
            file: file.into(),
            width: cam.width,
            height: cam.height,
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            cam_to_world: cam.cam_to_world().to_vec(),
        }
    }

    pub fn to_camera(&self) -> Result<Camera, PipelineError> {
        let m: [f64; 16] = self.cam_to_world.as_slice().try_into().map_err(|_| {
            PipelineError::Config(format!(
                "camera {}: cam_to_world has {} entries, expected 16",
                self.file,
                self.cam_to_world.len()
            ))
        })?;
        Ok(Camera::from_cam_to_world(&m, self.fx, self.fy, self.cx, self.cy, self.width, self.height)?)
    }
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text).map_err(|e| PipelineError::io(path, e))
}

pub fn read_cameras(path: &Path) -> Result<Vec<CameraRecord>, PipelineError> {
    read_json(path)
}

pub fn write_cameras(path: &Path, records: &[CameraRecord]) -> Result<(), PipelineError> {
    write_json(path, &records)
}

/// Training views and their cameras; image paths resolve against the
/// directory holding the cameras file.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub records: Vec<CameraRecord>,
    pub cameras: Vec<Camera>,
    pub views: Vec<Tensor<f32>>,
}

impl Dataset {
    pub fn load(cams_path: &Path) -> Result<Self, PipelineError> {
        let dir = cams_path.parent().map(Path::to_path_buf).unwrap_or_default();
        let records = read_cameras(cams_path)?;
        let mut cameras = Vec::with_capacity(records.len());
        let mut views = Vec::with_capacity(records.len());
        for r in &records {
            let cam = r.to_camera()?;
            let img = load_image(&dir.join(&r.file))?;
            if img.shape()[1] != r.height || img.shape()[2] != r.width {
                return Err(PipelineError::Config(format!(
                    "{}: image is {}x{}, camera says {}x{}",
                    r.file,
                    img.shape()[2],
                    img.shape()[1],
                    r.width,
                    r.height
                )));
            }
            cameras.push(cam);
            views.push(img);
        }
        Ok(Self {
            dir,
            records,
            cameras,
            views,
        })
    }

    /// Writes views as PNGs next to a cameras file at `cams_path`.
    pub fn save(cams_path: &Path, cameras: &[Camera], views: &[Tensor<f32>]) -> Result<Vec<CameraRecord>, PipelineError> {
        let dir = cams_path.parent().unwrap_or(Path::new("."));
        fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
        let records: Vec<CameraRecord> = cameras
            .iter()
            .enumerate()
            .map(|(i, c)| CameraRecord::from_camera(format!("view_{i:03}.png"), c))
            .collect();
        for (r, v) in records.iter().zip(views) {
            save_image(&dir.join(&r.file), v)?;
        }
        write_cameras(cams_path, &records)?;
        Ok(records)
    }
}

/// RGB image as `[3,H,W]` in `[0,1]`.
pub fn load_image(path: &Path) -> Result<Tensor<f32>, PipelineError> {
    let img = image::open(path)
        .map_err(|e| PipelineError::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .into_rgb32f();
    Ok(from_rgb32f(&img))
}

fn from_rgb32f(img: &Rgb32FImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn([3, h, w], |k| {
        let (c, i) = (k / (w * h), k % (w * h));
        raw[i * 3 + c]
    })
}

fn to_rgb32f(img: &Tensor<f32>) -> Rgb32FImage {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let d = img.data();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([d[i], d[w * h + i], d[2 * w * h + i]])
    })
}

/// Rounds `[0,1]` to 8 bits, clamping out-of-range values.
pub fn to_rgb8(img: &Tensor<f32>) -> RgbImage {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let d = img.data();
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([q(d[i]), q(d[w * h + i]), q(d[2 * w * h + i])])
    })
}

pub fn save_image(path: &Path, img: &Tensor<f32>) -> Result<(), PipelineError> {
    to_rgb8(img).save(path).map_err(|e| PipelineError::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn encode_png(img: &Tensor<f32>) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    to_rgb8(img)
        .write_to(&mut out, image::ImageFormat::Png)
        .expect("in-memory PNG encoding");
    out.into_inner()
}

/// Triangle-filtered resample to `width`×`height`.
pub fn resize_image(img: &Tensor<f32>, width: usize, height: usize) -> Tensor<f32> {
    if img.shape()[1] == height && img.shape()[2] == width {
        return img.clone();
    }
    let out = imageops::resize(&to_rgb32f(img), width as u32, height as u32, imageops::FilterType::Triangle);
    from_rgb32f(&out)
}

/// Size with the longer side at most `max_side`, aspect preserved.
pub fn fit_size(width: usize, height: usize, max_side: usize) -> (usize, usize) {
    let longest = width.max(height);
    if max_side == 0 || longest <= max_side {
        return (width, height);
    }
    let s = max_side as f64 / longest as f64;
    (((width as f64 * s).round() as usize).max(1), ((height as f64 * s).round() as usize).max(1))
}

/// Downscales views and cameras together.
pub fn downscale(views: &[Tensor<f32>], cams: &[Camera], max_side: usize) -> (Vec<Tensor<f32>>, Vec<Camera>) {
    views
        .iter()
        .zip(cams)
        .map(|(v, c)| {
            let (w, h) = fit_size(c.width, c.height, max_side);
            (resize_image(v, w, h), c.resized(w, h))
        })
        .unzip()
}

/// Range mapped onto the 16-bit depth image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthRange {
    pub min: f32,
    pub max: f32,
    pub alpha_threshold: f64,
}

/// Writes depth as 16-bit grayscale, min-max normalized over pixels whose
/// alpha exceeds the depth-loss threshold (others are 0), plus a JSON
/// sidecar with the range.
pub fn save_depth_png(path: &Path, depth: &Tensor<f32>, alpha: &Tensor<f32>) -> Result<DepthRange, PipelineError> {
    let (h, w) = (depth.shape()[0], depth.shape()[1]);
    let valid = |i: usize| alpha.data()[i] as f64 > DEPTH_ALPHA_MIN;
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for (i, &d) in depth.data().iter().enumerate() {
        if valid(i) {
            lo = lo.min(d);
            hi = hi.max(d);
        }
    }
    if lo > hi {
        (lo, hi) = (0.0, 0.0);
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let v = if valid(i) {
            ((depth.data()[i] - lo) / span * 65535.0).round().clamp(0.0, 65535.0) as u16
        } else {
            0
        };
        Luma([v])
    });
    img.save(path).map_err(|e| PipelineError::Image {
        path: path.to_path_buf(),
        source: e,
    })?;
    let range = DepthRange {
        min: lo,
        max: hi,
        alpha_threshold: DEPTH_ALPHA_MIN,
    };
    write_json(&path.with_extension("json"), &range)?;
    Ok(range)
}
