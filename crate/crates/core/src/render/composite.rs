//! Depth-sorted front-to-back alpha compositing of projected Gaussians.

use rayon::prelude::*;

use crate::tensor::{CustomOp, Real, Tensor};

/// Contributions below this are skipped.
pub const MIN_ALPHA: f64 = 1.0 / 255.0;
/// Per-Gaussian alpha ceiling.
pub const MAX_ALPHA: f64 = 0.99;
/// Compositing stops once transmittance would fall below this.
pub const MIN_TRANSMITTANCE: f64 = 1e-4;

/// Output rows of the packed [5,H,W] image.
pub const CHANNELS: usize = 5;
pub const DEPTH_ROW: usize = 3;
pub const ALPHA_ROW: usize = 4;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CompositeStats {
    pub culled: usize,
    pub singular: usize,
    pub drawn: usize,
}

#[derive(Debug, Clone)]
struct Splat<T> {
    index: usize,
    conic: [T; 3],
    x_range: (usize, usize),
    y_range: (usize, usize),
}

#[derive(Debug, Clone)]
struct Prepared<T> {
    /// Drawable splats in front-to-back order.
    splats: Vec<Splat<T>>,
    stats: CompositeStats,
}

/// Views into the packed per-Gaussian inputs, each `[k, N]` row-major.
struct Inputs<'a, T> {
    n: usize,
    mean: &'a [T],
    cov: &'a [T],
    opacity: &'a [T],
    color: &'a [T],
    depth: &'a [T],
}

impl<'a, T: Real> Inputs<'a, T> {
    fn new(t: &[&'a Tensor<T>]) -> Self {
        let n = t[2].len();
        Self {
            n,
            mean: t[0].data(),
            cov: t[1].data(),
            opacity: t[2].data(),
            color: t[3].data(),
            depth: t[4].data(),
        }
    }

    fn mean(&self, i: usize) -> (T, T) {
        (self.mean[i], self.mean[self.n + i])
    }

    fn cov(&self, i: usize) -> [T; 3] {
        [self.cov[i], self.cov[self.n + i], self.cov[2 * self.n + i]]
    }

    fn color(&self, i: usize) -> [T; 3] {
        [self.color[i], self.color[self.n + i], self.color[2 * self.n + i]]
    }
}

fn pixel_span(center: f64, radius: f64, extent: usize) -> Option<(usize, usize)> {
    // Pixel j samples at j + 0.5.
    let lo = (center - radius - 0.5).ceil().max(0.0);
    let hi = (center + radius - 0.5).floor().min(extent as f64 - 1.0);
    if !(lo <= hi) {
        return None;
    }
    Some((lo as usize, hi as usize))
}

fn prepare<T: Real>(inp: &Inputs<T>, width: usize, height: usize, near: T) -> Prepared<T> {
    let mut stats = CompositeStats::default();
    let mut splats = Vec::new();
    for i in 0..inp.n {
        let z = inp.depth[i];
        if !(z >= near) {
            stats.culled += 1;
            continue;
        }
        let [a, b, c] = inp.cov(i);
        let det = a * c - b * b;
        if !(det > T::zero()) || !det.is_finite() {
            stats.singular += 1;
            continue;
        }
        let op = inp.opacity[i].to_f64_lossy();
        if op < MIN_ALPHA {
            continue;
        }
        let (a64, b64, c64) = (a.to_f64_lossy(), b.to_f64_lossy(), c.to_f64_lossy());
        let mid = 0.5 * (a64 + c64);
        let lambda_max = mid + ((0.5 * (a64 - c64)).powi(2) + b64 * b64).sqrt();
        let mahalanobis = 2.0 * (op / MIN_ALPHA).ln();
        // One extra pixel absorbs rounding; the exact test happens per pixel.
        let radius = (mahalanobis * lambda_max).sqrt() + 1.0;
        let (u, v) = inp.mean(i);
        let (Some(x_range), Some(y_range)) = (
            pixel_span(u.to_f64_lossy(), radius, width),
            pixel_span(v.to_f64_lossy(), radius, height),
        ) else {
            continue;
        };
        splats.push(Splat {
            index: i,
            conic: [c / det, -b / det, a / det],
            x_range,
            y_range,
        });
    }
    splats.sort_by(|p, q| {
        inp.depth[p.index]
            .partial_cmp(&inp.depth[q.index])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(p.index.cmp(&q.index))
    });
    stats.drawn = splats.len();
    Prepared { splats, stats }
}

/// One blended contribution at a pixel.
struct Hit<T> {
    splat: usize,
    alpha: T,
    gauss: T,
    clamped: bool,
    transmittance: T,
}

/// Walks the sorted splats covering pixel (px, py); returns the final
/// transmittance.
fn walk_pixel<T: Real>(
    inp: &Inputs<T>,
    row: &[usize],
    splats: &[Splat<T>],
    px: usize,
    py: usize,
    mut visit: impl FnMut(Hit<T>),
) -> T {
    let (sx, sy) = (T::lit(px as f64 + 0.5), T::lit(py as f64 + 0.5));
    let min_alpha = T::lit(MIN_ALPHA);
    let max_alpha = T::lit(MAX_ALPHA);
    let min_t = T::lit(MIN_TRANSMITTANCE);
    let half = T::lit(0.5);
    let mut trans = T::one();
    for &s in row {
        let sp = &splats[s];
        if px < sp.x_range.0 || px > sp.x_range.1 {
            continue;
        }
        let (u, v) = inp.mean(sp.index);
        let (dx, dy) = (sx - u, sy - v);
        let [ca, cb, cc] = sp.conic;
        let power = -half * (ca * dx * dx + cc * dy * dy) - cb * dx * dy;
        if power > T::zero() {
            continue;
        }
        let gauss = power.exp();
        let raw = inp.opacity[sp.index] * gauss;
        let clamped = raw > max_alpha;
        let alpha = if clamped { max_alpha } else { raw };
        if alpha < min_alpha {
            continue;
        }
        let next = trans * (T::one() - alpha);
        if next < min_t {
            break;
        }
        visit(Hit {
            splat: s,
            alpha,
            gauss,
            clamped,
            transmittance: trans,
        });
        trans = next;
    }
    trans
}

fn row_lists<T>(splats: &[Splat<T>], height: usize) -> Vec<Vec<usize>> {
    let mut rows = vec![Vec::new(); height];
    for (s, sp) in splats.iter().enumerate() {
        for row in &mut rows[sp.y_range.0..=sp.y_range.1] {
            row.push(s);
        }
    }
    rows
}

/// Forward compositing. Inputs: mean2d [2,N], cov2d [3,N] (a, b, c of
/// `[[a,b],[b,c]]`), opacity [N], color [3,N], camera depth [N].
/// Returns the packed [5,H,W] image (rgb, depth, alpha).
pub fn composite_forward<T: Real>(
    inputs: &[&Tensor<T>],
    width: usize,
    height: usize,
    near: T,
) -> (Tensor<T>, CompositeStats) {
    let inp = Inputs::new(inputs);
    let prep = prepare(&inp, width, height, near);
    let rows = row_lists(&prep.splats, height);
    let plane = width * height;
    let mut out = vec![T::zero(); CHANNELS * plane];
    let per_row: Vec<Vec<[T; CHANNELS]>> = (0..height)
        .into_par_iter()
        .map(|py| {
            (0..width)
                .map(|px| {
                    let mut acc = [T::zero(); CHANNELS];
                    walk_pixel(&inp, &rows[py], &prep.splats, px, py, |h| {
                        let i = prep.splats[h.splat].index;
                        let w = h.alpha * h.transmittance;
                        let c = inp.color(i);
                        acc[0] += w * c[0];
                        acc[1] += w * c[1];
                        acc[2] += w * c[2];
                        acc[DEPTH_ROW] += w * inp.depth[i];
                        acc[ALPHA_ROW] += w;
                    });
                    acc
                })
                .collect()
        })
        .collect();
    for (py, row) in per_row.into_iter().enumerate() {
        for (px, acc) in row.into_iter().enumerate() {
            for (ch, v) in acc.into_iter().enumerate() {
                out[ch * plane + py * width + px] = v;
            }
        }
    }
    (
        Tensor::new([CHANNELS, height, width], out).expect("packed image"),
        prep.stats,
    )
}

/// Blend weight `T·α` of every Gaussian at the pixel containing its own
/// projected center; zero when culled, off-screen or skipped there.
pub fn center_weights<T: Real>(inputs: &[&Tensor<T>], width: usize, height: usize, near: T) -> Vec<f64> {
    let inp = Inputs::new(inputs);
    let prep = prepare(&inp, width, height, near);
    let rows = row_lists(&prep.splats, height);
    let mut out = vec![0.0; inp.n];
    for (s, sp) in prep.splats.iter().enumerate() {
        let (u, v) = inp.mean(sp.index);
        let (u, v) = (u.to_f64_lossy().floor(), v.to_f64_lossy().floor());
        if !(u >= 0.0 && v >= 0.0 && u < width as f64 && v < height as f64) {
            continue;
        }
        let (px, py) = (u as usize, v as usize);
        walk_pixel(&inp, &rows[py], &prep.splats, px, py, |h| {
            if h.splat == s {
                out[sp.index] = (h.alpha * h.transmittance).to_f64_lossy();
            }
        });
    }
    out
}

/// Tape record of [`composite_forward`].
pub struct CompositeOp {
    pub width: usize,
    pub height: usize,
    pub near: f64,
}

impl<T: Real> CustomOp<T> for CompositeOp {
    fn name(&self) -> &'static str {
        "composite"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_out: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let inp = Inputs::new(inputs);
        let n = inp.n;
        let (w, h) = (self.width, self.height);
        let prep = prepare(&inp, w, h, T::lit(self.near));
        let rows = row_lists(&prep.splats, h);
        let plane = w * h;
        // Per-Gaussian grads: mean(2) cov(3) opacity(1) color(3) depth(1).
        const G: usize = 10;
        let zero = || vec![T::zero(); G * n];
        let grads = (0..h)
            .into_par_iter()
            .fold(zero, |mut acc, py| {
                let mut hits: Vec<Hit<T>> = Vec::new();
                for px in 0..w {
                    let pix = py * w + px;
                    let up: [T; CHANNELS] = std::array::from_fn(|ch| grad_out[ch * plane + pix]);
                    if up.iter().all(|&g| g == T::zero()) {
                        continue;
                    }
                    hits.clear();
                    walk_pixel(&inp, &rows[py], &prep.splats, px, py, |hit| hits.push(hit));
                    let (sx, sy) = (T::lit(px as f64 + 0.5), T::lit(py as f64 + 0.5));
                    // suffix[k] = Σ_{j after i} w_j · value_jk
                    let mut suffix = [T::zero(); CHANNELS];
                    for hit in hits.iter().rev() {
                        let sp = &prep.splats[hit.splat];
                        let i = sp.index;
                        let c = inp.color(i);
                        let vals = [c[0], c[1], c[2], inp.depth[i], T::one()];
                        let wgt = hit.alpha * hit.transmittance;
                        let mut d_alpha = T::zero();
                        for k in 0..CHANNELS {
                            d_alpha += up[k]
                                * (hit.transmittance * vals[k] - suffix[k] / (T::one() - hit.alpha));
                        }
                        for k in 0..3 {
                            acc[(6 + k) * n + i] += up[k] * wgt;
                        }
                        acc[9 * n + i] += up[DEPTH_ROW] * wgt;
                        for k in 0..CHANNELS {
                            suffix[k] += wgt * vals[k];
                        }
                        if hit.clamped {
                            continue;
                        }
                        let op = inp.opacity[i];
                        acc[5 * n + i] += d_alpha * hit.gauss;
                        let d_power = d_alpha * op * hit.gauss;
                        let (u, v) = inp.mean(i);
                        let (dx, dy) = (sx - u, sy - v);
                        let [ca, cb, cc] = sp.conic;
                        acc[i] += d_power * (ca * dx + cb * dy);
                        acc[n + i] += d_power * (cb * dx + cc * dy);
                        let half = T::lit(0.5);
                        let g_ca = -half * dx * dx * d_power;
                        let g_cb = -dx * dy * d_power;
                        let g_cc = -half * dy * dy * d_power;
                        // conic = (c, -b, a) / det with det = ac - b²
                        let [a, b, c2] = inp.cov(i);
                        let det = a * c2 - b * b;
                        let det2 = det * det;
                        let two = T::lit(2.0);
                        let d_a = g_ca * (-c2 * c2 / det2) + g_cb * (b * c2 / det2)
                            + g_cc * (T::one() / det - a * c2 / det2);
                        let d_b = g_ca * (two * b * c2 / det2)
                            + g_cb * (-T::one() / det - two * b * b / det2)
                            + g_cc * (two * a * b / det2);
                        let d_c = g_ca * (T::one() / det - a * c2 / det2) + g_cb * (a * b / det2)
                            + g_cc * (-a * a / det2);
                        acc[2 * n + i] += d_a;
                        acc[3 * n + i] += d_b;
                        acc[4 * n + i] += d_c;
                    }
                }
                acc
            })
            .reduce(zero, |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            });
        let take = |from: usize, rows: usize, need: bool| {
            need.then(|| grads[from * n..(from + rows) * n].to_vec())
        };
        vec![
            take(0, 2, needs[0]),
            take(2, 3, needs[1]),
            take(5, 1, needs[2]),
            take(6, 3, needs[3]),
            take(9, 1, needs[4]),
        ]
    }
}
