//! Reference oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use splatstyle::colorxfer::Mat3;
use splatstyle::controls::{luminance, yiq_to_rgb_matrix};
use splatstyle::features::Normalization;
use splatstyle::mask::Mask;
use splatstyle::refine::FilterPolicy;
use splatstyle::scene::{logit, Camera, Gaussian, GaussianScene};
use splatstyle::styleloss::cosine_distance;
use splatstyle::tensor::{Real, Tensor};

pub const IMAGENET: Normalization = Normalization {
    mean: [0.485, 0.456, 0.406],
    std: [0.229, 0.224, 0.225],
};

pub fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor<f64> {
    Tensor::from_fn([c, h, w], |_| rng.gen_range(-1.0..1.0))
}

pub fn column(t: &Tensor<f64>, j: usize) -> Vec<f64> {
    let c = t.shape()[0];
    let n = t.len() / c;
    (0..c).map(|ch| t.data()[ch * n + j]).collect()
}

/// Double-loop nearest neighbor search over selected columns.
pub fn oracle(render: &Tensor<f64>, style: &Tensor<f64>, rmask: Option<&[bool]>, smask: Option<&[bool]>) -> f64 {
    let c = render.shape()[0];
    let (nr, ns) = (render.len() / c, style.len() / c);
    let mut total = 0.0;
    let mut count = 0;
    for i in 0..nr {
        if rmask.is_some_and(|m| !m[i]) {
            continue;
        }
        let a = column(render, i);
        let mut best = f64::INFINITY;
        for j in 0..ns {
            if smask.is_some_and(|m| !m[j]) {
                continue;
            }
            best = best.min(cosine_distance(&a, &column(style, j)));
        }
        total += best;
        count += 1;
    }
    total / count as f64
}

pub fn permute_columns(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let c = t.shape()[0];
    let n = t.len() / c;
    Tensor::from_fn(t.shape().to_vec(), |k| t.data()[(k / n) * n + perm[k % n]])
}

pub fn shuffled(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        p.swap(i, rng.gen_range(0..=i));
    }
    p
}

pub fn smooth_image(rng: &mut ChaCha8Rng, size: usize) -> Tensor<f64> {
    let f: Vec<[f64; 4]> = (0..3)
        .map(|_| [rng.gen_range(0.5..3.0), rng.gen_range(0.5..3.0), rng.gen_range(0.0..6.0), rng.gen_range(0.0..6.0)])
        .collect();
    Tensor::from_fn([3, size, size], |k| {
        let c = k / (size * size);
        let (y, x) = ((k / size) % size, k % size);
        let (u, v) = (x as f64 / size as f64, y as f64 / size as f64);
        0.5 + 0.3 * (f[c][0] * u * 6.0 + f[c][2]).sin() * (f[c][1] * v * 6.0 + f[c][3]).cos()
            + 0.1 * rng.gen_range(-1.0..1.0)
    })
}

/// Adds random chrominance to every pixel, then walks the red channel one
/// ulp at a time until the computed luminance is bit-identical again.
pub fn chroma_perturb<T: Real>(img: &Tensor<T>, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let plane = img.shape()[1] * img.shape()[2];
    let inv = yiq_to_rgb_matrix();
    let d = img.data();
    let mut out = d.to_vec();
    for i in 0..plane {
        let (r, g, b) = (d[i], d[plane + i], d[2 * plane + i]);
        let y = luminance(r, g, b);
        let (di, dq) = (rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05));
        let mut p: [T; 3] = std::array::from_fn(|c| {
            let v = [r, g, b][c].to_f64_lossy() + inv[c][1] * di + inv[c][2] * dq;
            T::lit(v)
        });
        let mut steps = 0;
        let up = luminance(p[0], p[1], p[2]) < y;
        while luminance(p[0], p[1], p[2]) != y && (luminance(p[0], p[1], p[2]) < y) == up {
            p[0] = next_toward(p[0], up);
            steps += 1;
            assert!(steps < 1_000_000, "luminance walk did not converge");
        }
        p = exact_luminance(p, y).expect("no ulp neighborhood reproduces the luminance");
        for c in 0..3 {
            out[c * plane + i] = p[c];
        }
    }
    Tensor::new(img.shape().to_vec(), out).unwrap()
}

/// Searches ulp offsets of up to 8 in every channel for bit-exact `y`.
pub fn exact_luminance<T: Real>(p: [T; 3], y: T) -> Option<[T; 3]> {
    let shift = |x: T, k: i32| (0..k.abs()).fold(x, |v, _| next_toward(v, k > 0));
    let mut offsets: Vec<[i32; 3]> = Vec::new();
    for a in -8..=8 {
        for b in -8..=8 {
            for c in -8..=8 {
                offsets.push([a, b, c]);
            }
        }
    }
    offsets.sort_by_key(|o| o.iter().map(|v| v.abs()).sum::<i32>());
    offsets.into_iter().find_map(|o| {
        let q: [T; 3] = std::array::from_fn(|c| shift(p[c], o[c]));
        (luminance(q[0], q[1], q[2]) == y).then_some(q)
    })
}

pub fn next_toward<T: Real>(x: T, up: bool) -> T {
    let v = x.to_f64_lossy();
    if std::mem::size_of::<T>() == 4 {
        let f = v as f32;
        let bits = f.to_bits() as i64;
        let step = if (f >= 0.0) == up { 1 } else { -1 };
        T::lit(f32::from_bits((bits + step) as u32) as f64)
    } else {
        let bits = v.to_bits() as i64;
        let step = if (v >= 0.0) == up { 1 } else { -1 };
        T::lit(f64::from_bits((bits + step) as u64))
    }
}

/// Survivor flags by counting, per Gaussian, how many others precede it in
/// each ranking.
pub fn oracle_keep(size: &[f32], opacity: &[f32], policy: &FilterPolicy) -> Vec<bool> {
    let n = size.len();
    let k_s = (policy.k_scale * n as f64 / 100.0).ceil() as usize;
    let k_o = (policy.k_opacity * n as f64 / 100.0).ceil() as usize;
    (0..n)
        .map(|i| {
            let size_rank = (0..n).filter(|&j| size[j] > size[i] || (size[j] == size[i] && j < i)).count();
            let op_rank = (0..n)
                .filter(|&j| opacity[j] < opacity[i] || (opacity[j] == opacity[i] && j < i))
                .count();
            size_rank >= k_s && op_rank >= k_o
        })
        .collect()
}

pub fn tied_scene(rng: &mut ChaCha8Rng, n: usize) -> GaussianScene {
    let gs = (0..n)
        .map(|i| {
            // Coarse quantization forces ties in both rankings.
            let scale = 0.01 * rng.gen_range(1..8) as f32;
            let opacity = 0.1 * rng.gen_range(1..9) as f32;
            let mut g = Gaussian::isotropic([i as f32, 0.0, 0.0], scale, opacity, [0.5; 3], 0);
            g.raw_scale[rng.gen_range(0..3)] -= 0.5;
            g
        })
        .collect();
    GaussianScene::new(gs, 0).unwrap()
}

pub fn image_from(w: usize, h: usize, f: impl Fn(usize, usize) -> [f32; 3]) -> Tensor<f32> {
    Tensor::from_fn([3, h, w], |k| {
        let (c, rest) = (k / (w * h), k % (w * h));
        f(rest % w, rest / w)[c]
    })
}

pub fn square_frame(size: usize, side: usize, x0: usize, y0: usize) -> (Tensor<f32>, Mask) {
    let inside = |x: usize, y: usize| x >= x0 && x < x0 + side && y >= y0 && y < y0 + side;
    let img = image_from(size, size, |x, y| if inside(x, y) { [0.9, 0.3, 0.1] } else { [0.1, 0.1, 0.4] });
    (img, Mask::from_fn(size, size, inside))
}

pub fn random_pixels(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
    // Correlated channels so the covariance is far from diagonal; the mixing
    // matrix may be arbitrarily close to singular.
    let mix: Mat3 = std::array::from_fn(|_| std::array::from_fn(|_| rng.gen_range(-0.5..0.5)));
    mixed_pixels(rng, n, mix)
}

/// Image-like colors: correlated but with every channel direction present.
pub fn natural_pixels(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
    let mix: Mat3 =
        std::array::from_fn(|i| std::array::from_fn(|j| if i == j { 0.2 } else { 0.0 } + rng.gen_range(-0.1..0.1)));
    mixed_pixels(rng, n, mix)
}

pub fn mixed_pixels(rng: &mut ChaCha8Rng, n: usize, mix: Mat3) -> Vec<[f64; 3]> {
    let shift: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.2..0.8));
    (0..n)
        .map(|_| {
            let z: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            std::array::from_fn(|i| shift[i] + mix[i][0] * z[0] + mix[i][1] * z[1] + mix[i][2] * z[2])
        })
        .collect()
}

/// Covariance as half the mean outer product of all pairwise differences.
pub fn pairwise_cov(px: &[[f64; 3]]) -> Mat3 {
    let n = px.len() as f64;
    let mut acc = [[0.0; 3]; 3];
    for a in px {
        for b in px {
            let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
            for i in 0..3 {
                for j in 0..3 {
                    acc[i][j] += d[i] * d[j];
                }
            }
        }
    }
    acc.map(|row| row.map(|v| v / (2.0 * n * n)))
}

pub fn max_abs(a: &Mat3, b: &Mat3) -> f64 {
    (0..9).map(|k| (a[k / 3][k % 3] - b[k / 3][k % 3]).abs()).fold(0.0, f64::max)
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/vgg")
}

pub fn manifest() -> serde_json::Value {
    let text = std::fs::read_to_string(fixture_dir().join("manifest.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

/// max |a − b| over max |b|, per layer.
pub fn relative_error(got: &Tensor<f32>, want: &Tensor<f32>) -> f64 {
    assert_eq!(got.shape(), want.shape());
    let scale = want.data().iter().fold(0f64, |m, &v| m.max(v.abs() as f64));
    let diff = got
        .data()
        .iter()
        .zip(want.data())
        .fold(0f64, |m, (&a, &b)| m.max((a as f64 - b as f64).abs()));
    diff / scale.max(1e-12)
}

pub fn grid_scene(rng: &mut ChaCha8Rng) -> GaussianScene {
    let mut gs = Vec::new();
    for i in 0..6 {
        for j in 0..6 {
            let mut g = Gaussian::isotropic(
                [-0.5 + 0.2 * i as f32, -0.5 + 0.2 * j as f32, 3.0 + 0.01 * (i * 6 + j) as f32],
                rng.gen_range(0.06..0.12),
                rng.gen_range(0.4..0.95),
                [rng.gen(), rng.gen(), rng.gen()],
                1,
            );
            g.raw_opacity = logit(g.opacity());
            gs.push(g);
        }
    }
    GaussianScene::new(gs, 1).unwrap()
}

pub fn views() -> Vec<Camera> {
    [[0.0, 0.0, 0.0], [0.3, 0.1, 0.0], [-0.3, -0.1, 0.0]]
        .into_iter()
        .map(|eye| Camera::look_at(eye, [0.0, 0.0, 3.0], [0.0, -1.0, 0.0], 45.0, 24, 24).unwrap())
        .collect()
}
