//! Linear color transfer that matches the mean and covariance of one color
//! distribution to another.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use thiserror::Error;

use crate::mask::Mask;
use crate::render::visible_centers;
use crate::scene::sh::{SH_C0, SH_OFFSET};
use crate::scene::{Camera, GaussianScene};
use crate::tensor::{Tensor, TensorError};

pub type Mat3 = [[f64; 3]; 3];

/// Default diagonal loading applied to both covariances.
pub const DEFAULT_COV_EPS: f64 = 1e-8;
const SYMMETRY_TOL: f64 = 1e-8;
const NEGATIVE_EIG_TOL: f64 = 1e-10;
/// Smallest eigenvalue relative to the largest before a covariance counts
/// as singular.
const CONDITION_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ColorError {
    #[error("need at least 2 pixels, got {0}")]
    TooFewPixels(usize),
    #[error("matrix is not symmetric (|m - mᵀ| = {0:e})")]
    Asymmetric(f64),
    #[error("matrix has eigenvalue {0:e} < 0")]
    NotPsd(f64),
    #[error("{which} covariance is singular (eigenvalues {eigenvalues:?}); increase cov_eps")]
    Singular { which: &'static str, eigenvalues: [f64; 3] },
    #[error("region masks {a} and {b} overlap in view {view}")]
    Overlap { view: usize, a: usize, b: usize },
    #[error("view {view}: expected {expected} region masks, got {got}")]
    RegionCount { view: usize, expected: usize, got: usize },
    #[error("{views} mask lists for {cameras} cameras")]
    ViewCount { views: usize, cameras: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub mean: [f64; 3],
    /// Population covariance (divides by N).
    pub cov: Mat3,
}

pub fn compute_moments(pixels: &[[f64; 3]]) -> Result<Moments, ColorError> {
    let n = pixels.len();
    if n < 2 {
        return Err(ColorError::TooFewPixels(n));
    }
    let mut mean = [0.0; 3];
    for p in pixels {
        for c in 0..3 {
            mean[c] += p[c];
        }
    }
    mean = mean.map(|m| m / n as f64);
    let mut cov = [[0.0; 3]; 3];
    for p in pixels {
        let d = [p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]];
        for i in 0..3 {
            for j in i..3 {
                cov[i][j] += d[i] * d[j];
            }
        }
    }
    for i in 0..3 {
        for j in i..3 {
            cov[i][j] /= n as f64;
            cov[j][i] = cov[i][j];
        }
    }
    Ok(Moments { mean, cov })
}

/// Pixels of a `[3,H,W]` image, optionally restricted to a mask.
pub fn image_pixels(img: &Tensor<f32>, mask: Option<&Mask>) -> Vec<[f64; 3]> {
    let plane = img.shape()[1] * img.shape()[2];
    let d = img.data();
    (0..plane)
        .filter(|&i| mask.is_none_or(|m| m.bits()[i]))
        .map(|i| [d[i] as f64, d[plane + i] as f64, d[2 * plane + i] as f64])
        .collect()
}

fn to_na(m: &Mat3) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| m[i][j])
}

fn from_na(m: &Matrix3<f64>) -> Mat3 {
    std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]))
}

fn checked_eigen(m: &Mat3) -> Result<SymmetricEigen<f64, nalgebra::U3>, ColorError> {
    let a = to_na(m);
    let asym = (a - a.transpose()).abs().max();
    if asym > SYMMETRY_TOL {
        return Err(ColorError::Asymmetric(asym));
    }
    let eig = SymmetricEigen::new((a + a.transpose()) * 0.5);
    let min = eig.eigenvalues.min();
    if min < -NEGATIVE_EIG_TOL {
        return Err(ColorError::NotPsd(min));
    }
    Ok(eig)
}

fn eigen_power(eig: &SymmetricEigen<f64, nalgebra::U3>, f: impl Fn(f64) -> f64) -> Matrix3<f64> {
    let d = Matrix3::from_diagonal(&eig.eigenvalues.map(|l| f(l.max(0.0))));
    eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Symmetric square root `U·Λ^{1/2}·Uᵀ` of a PSD matrix.
pub fn matrix_sqrt_psd(m: &Mat3) -> Result<Mat3, ColorError> {
    let eig = checked_eigen(m)?;
    Ok(from_na(&eigen_power(&eig, f64::sqrt)))
}

/// Affine color map `p ↦ A·p + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColorTransform {
    pub a: Mat3,
    pub b: [f64; 3],
}

impl ColorTransform {
    pub const IDENTITY: Self = Self {
        a: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        b: [0.0; 3],
    };

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|i| self.a[i][0] * p[0] + self.a[i][1] * p[1] + self.a[i][2] * p[2] + self.b[i])
    }

    fn apply_linear(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|i| self.a[i][0] * p[0] + self.a[i][1] * p[1] + self.a[i][2] * p[2])
    }
}

fn regularized(m: &Mat3, eps: f64) -> Mat3 {
    let mut r = *m;
    for (i, row) in r.iter_mut().enumerate() {
        row[i] += eps;
    }
    r
}

fn check_conditioned(eig: &SymmetricEigen<f64, nalgebra::U3>, which: &'static str) -> Result<(), ColorError> {
    let ev = eig.eigenvalues;
    let (min, max) = (ev.min(), ev.max());
    if !(max > 0.0) || min <= CONDITION_FLOOR * max {
        return Err(ColorError::Singular {
            which,
            eigenvalues: [ev[0], ev[1], ev[2]],
        });
    }
    Ok(())
}

/// The transform taking content moments onto style moments:
/// `A = Σ_s^{1/2}·Σ_c^{-1/2}`, `b = μ_s − A·μ_c`.
pub fn solve_transform(content: &Moments, style: &Moments, cov_eps: f64) -> Result<ColorTransform, ColorError> {
    let ec = checked_eigen(&regularized(&content.cov, cov_eps))?;
    let es = checked_eigen(&regularized(&style.cov, cov_eps))?;
    check_conditioned(&ec, "content")?;
    check_conditioned(&es, "style")?;
    let a = eigen_power(&es, f64::sqrt) * eigen_power(&ec, |l| 1.0 / l.sqrt());
    let b = Vector3::from(style.mean) - a * Vector3::from(content.mean);
    Ok(ColorTransform {
        a: from_na(&a),
        b: [b[0], b[1], b[2]],
    })
}

/// Applies the transform per pixel without clamping.
pub fn recolor_image(img: &Tensor<f32>, t: &ColorTransform) -> Tensor<f32> {
    let plane = img.shape()[1] * img.shape()[2];
    let d = img.data();
    let mut out = vec![0.0f32; d.len()];
    for i in 0..plane {
        let q = t.apply([d[i] as f64, d[plane + i] as f64, d[2 * plane + i] as f64]);
        for c in 0..3 {
            out[c * plane + i] = q[c] as f32;
        }
    }
    Tensor::new(img.shape().to_vec(), out).expect("same shape")
}

/// Recolors SH coefficients so every view-dependent color `c` becomes
/// `A·c + b` (before the nonnegativity clamp).
pub fn recolor_scene(scene: &GaussianScene, t: &ColorTransform) -> GaussianScene {
    let mut out = scene.clone();
    for g in &mut out.gaussians {
        recolor_gaussian(&mut g.sh, t);
    }
    out
}

fn recolor_gaussian(sh: &mut [[f32; 3]], t: &ColorTransform) {
    let dc = sh[0].map(|v| SH_OFFSET + SH_C0 * v as f64);
    let mapped = t.apply(dc);
    sh[0] = mapped.map(|v| ((v - SH_OFFSET) / SH_C0) as f32);
    for row in sh.iter_mut().skip(1) {
        *row = t.apply_linear(row.map(f64::from)).map(|v| v as f32);
    }
}

/// Majority-vote region of every Gaussian: region `r` wins when the
/// Gaussian's visible center falls inside `masks[view][r]` in more than half
/// of the views where it is visible.
pub fn assign_regions(
    scene: &GaussianScene,
    cameras: &[Camera],
    masks: &[Vec<Mask>],
) -> Result<Vec<Option<usize>>, ColorError> {
    if masks.len() != cameras.len() {
        return Err(ColorError::ViewCount {
            views: masks.len(),
            cameras: cameras.len(),
        });
    }
    let regions = masks.first().map_or(0, Vec::len);
    for (view, ms) in masks.iter().enumerate() {
        if ms.len() != regions {
            return Err(ColorError::RegionCount {
                view,
                expected: regions,
                got: ms.len(),
            });
        }
        for a in 0..regions {
            for b in a + 1..regions {
                if ms[a].intersection(&ms[b]) > 0 {
                    return Err(ColorError::Overlap { view, a, b });
                }
            }
        }
    }
    let n = scene.len();
    let mut visible = vec![0usize; n];
    let mut votes = vec![vec![0usize; regions]; n];
    for (cam, ms) in cameras.iter().zip(masks) {
        for (i, c) in visible_centers(scene, cam)?.into_iter().enumerate() {
            let Some([u, v]) = c else { continue };
            visible[i] += 1;
            if let Some(r) = ms.iter().position(|m| m.contains(u, v)) {
                votes[i][r] += 1;
            }
        }
    }
    Ok((0..n)
        .map(|i| votes[i].iter().position(|&v| 2 * v > visible[i]))
        .collect())
}

/// Per-region recoloring; Gaussians without a majority region keep their color.
pub fn recolor_regions(
    scene: &GaussianScene,
    cameras: &[Camera],
    masks: &[Vec<Mask>],
    transforms: &[ColorTransform],
) -> Result<GaussianScene, ColorError> {
    let regions = masks.first().map_or(0, Vec::len);
    if transforms.len() != regions {
        return Err(ColorError::RegionCount {
            view: 0,
            expected: regions,
            got: transforms.len(),
        });
    }
    let labels = assign_regions(scene, cameras, masks)?;
    let mut out = scene.clone();
    for (g, label) in out.gaussians.iter_mut().zip(labels) {
        if let Some(r) = label {
            recolor_gaussian(&mut g.sh, &transforms[r]);
        }
    }
    Ok(out)
}

/// Per-channel histogram matching: each value is replaced by the style value
/// at the same quantile.
pub fn histogram_match(img: &Tensor<f32>, style: &Tensor<f32>) -> Tensor<f32> {
    let plane = img.shape()[1] * img.shape()[2];
    let splane = style.shape()[1] * style.shape()[2];
    let mut out = img.data().to_vec();
    for c in 0..3 {
        let mut reference: Vec<f32> = style.data()[c * splane..(c + 1) * splane].to_vec();
        reference.sort_by(f32::total_cmp);
        let channel = &mut out[c * plane..(c + 1) * plane];
        let mut order: Vec<usize> = (0..plane).collect();
        order.sort_by(|&a, &b| channel[a].total_cmp(&channel[b]));
        for (rank, &i) in order.iter().enumerate() {
            let q = (rank as f64 + 0.5) / plane as f64;
            let j = ((q * splane as f64) as usize).min(splane - 1);
            channel[i] = reference[j];
        }
    }
    Tensor::new(img.shape().to_vec(), out).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_pixels_have_zero_covariance() {
        let m = compute_moments(&[[0.5; 3]; 7]).unwrap();
        assert_eq!(m.mean, [0.5; 3]);
        assert_eq!(m.cov, [[0.0; 3]; 3]);
    }

    #[test]
    fn two_pixel_moments() {
        let m = compute_moments(&[[0.0; 3], [1.0; 3]]).unwrap();
        assert_eq!(m.mean, [0.5; 3]);
        assert!(m.cov.iter().flatten().all(|&v| v == 0.25));
        assert!(matches!(compute_moments(&[[0.0; 3]]), Err(ColorError::TooFewPixels(1))));
    }

    #[test]
    fn sqrt_of_diagonal() {
        let s = matrix_sqrt_psd(&[[4.0, 0.0, 0.0], [0.0, 9.0, 0.0], [0.0, 0.0, 16.0]]).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { [2.0, 3.0, 4.0][i] } else { 0.0 };
                assert!((s[i][j] - want).abs() < 1e-12);
            }
        }
        assert_eq!(from_na(&to_na(&ColorTransform::IDENTITY.a)), ColorTransform::IDENTITY.a);
    }

    #[test]
    fn sqrt_rejects_asymmetric() {
        let m = [[1.0, 0.1, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(matches!(matrix_sqrt_psd(&m), Err(ColorError::Asymmetric(_))));
    }

    #[test]
    fn constant_style_without_loading_is_singular() {
        let content = compute_moments(&[[0.1, 0.2, 0.3], [0.5, 0.1, 0.9], [0.7, 0.8, 0.2], [0.3, 0.3, 0.6]]).unwrap();
        let style = compute_moments(&[[0.4; 3]; 5]).unwrap();
        assert!(matches!(
            solve_transform(&content, &style, 0.0),
            Err(ColorError::Singular { which: "style", .. })
        ));
    }

    #[test]
    fn histogram_match_copies_sorted_style_values() {
        let img = Tensor::new([3, 1, 4], vec![0.3, 0.1, 0.4, 0.2, 0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        let style = Tensor::new([3, 1, 4], vec![10.0, 30.0, 20.0, 40.0, 1.0, 1.0, 1.0, 1.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let out = histogram_match(&img, &style);
        assert_eq!(&out.data()[..4], &[30.0, 10.0, 40.0, 20.0]);
        assert_eq!(&out.data()[8..], &[5.0, 6.0, 7.0, 8.0]);
    }
}
