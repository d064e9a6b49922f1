//! Procedural toy scene and camera rigs for tests and demos.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scene::{logit, Camera, CameraError, Gaussian, GaussianScene};

/// Distance from the cameras to the origin in [`orbit_cameras`].
pub const ORBIT_RADIUS: f64 = 4.0;

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Samples of a textured back wall, a checkered floor and two spheres,
/// seen from the `-z` side. World up is `-y`.
pub fn toy_scene(count: usize, sh_degree: usize, seed: u64) -> GaussianScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Surface areas set the share of samples per part.
    let parts = [5.4f32, 7.5, 2.5, 1.2];
    let total: f32 = parts.iter().sum();
    let spacing = (total / count.max(1) as f32).sqrt();
    let mut gs = Vec::with_capacity(count);
    for _ in 0..count {
        let mut pick = rng.gen_range(0.0..total);
        let mut part = 0;
        while part + 1 < parts.len() && pick >= parts[part] {
            pick -= parts[part];
            part += 1;
        }
        let (position, rgb) = match part {
            0 => {
                let x = rng.gen_range(-1.5f32..1.5);
                let y = rng.gen_range(-1.2f32..0.6);
                let stripe = ((x * 2.0).floor() as i32).rem_euclid(3) as f32;
                ([x, y, 1.0], hsv(0.55 + 0.12 * stripe, 0.5, 0.45 + 0.4 * (-y + 0.6) / 1.8))
            }
            1 => {
                let x = rng.gen_range(-1.5f32..1.5);
                let z = rng.gen_range(-1.5f32..1.0);
                let check = ((x * 2.5).floor() as i32 + (z * 2.5).floor() as i32).rem_euclid(2) as f32;
                ([x, 0.6, z], [0.85 - 0.6 * check, 0.75 - 0.5 * check, 0.55 - 0.35 * check])
            }
            _ => {
                let (center, radius, hue) = if part == 2 {
                    ([-0.45f32, 0.15, 0.0], 0.45f32, 0.02)
                } else {
                    ([0.6, 0.3, -0.4], 0.3, 0.33)
                };
                let d = loop {
                    let v: [f32; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
                    let n = v.iter().map(|c| c * c).sum::<f32>();
                    if n > 1e-4 && n <= 1.0 {
                        break v.map(|c| c / n.sqrt());
                    }
                };
                let p = std::array::from_fn(|k| center[k] + radius * d[k]);
                // Shade by the direction towards an upper-left light.
                let shade = 0.55 + 0.45 * (-0.5 * d[0] - 0.7 * d[1] - 0.5 * d[2]).max(0.0);
                (p, hsv(hue + 0.05 * d[0], 0.75, shade))
            }
        };
        let scale = spacing * rng.gen_range(0.55..0.8);
        let opacity = rng.gen_range(0.8..0.97);
        let mut g = Gaussian::isotropic(position, scale, opacity, rgb, sh_degree);
        // Mild anisotropy and orientation variety.
        for s in &mut g.raw_scale {
            *s += rng.gen_range(-0.2..0.2);
        }
        let q: [f32; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        g.rotation = q;
        if g.rotation.iter().all(|v| v.abs() < 1e-3) {
            g.rotation = [1.0, 0.0, 0.0, 0.0];
        }
        gs.push(g);
    }
    GaussianScene::new(gs, sh_degree).expect("valid degree")
}

/// Starting point for fitting: positions jittered, colors gray, opacity
/// one half, scales enlarged.
pub fn perturbed_init(scene: &GaussianScene, jitter: f32, seed: u64) -> GaussianScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = scene.clone();
    for g in &mut out.gaussians {
        for p in &mut g.position {
            *p += rng.gen_range(-jitter..jitter);
        }
        for s in &mut g.raw_scale {
            *s += 0.25;
        }
        g.raw_opacity = logit(0.5);
        for row in &mut g.sh {
            *row = [0.0; 3];
        }
    }
    out
}

/// `n` cameras on a horizontal arc of `arc_deg` degrees around the origin,
/// slightly above the floor, all looking at the origin.
pub fn orbit_cameras(n: usize, width: usize, height: usize, arc_deg: f64) -> Result<Vec<Camera>, CameraError> {
    (0..n)
        .map(|i| {
            let t = if n == 1 { 0.5 } else { i as f64 / (n - 1) as f64 };
            let a = (t - 0.5) * arc_deg.to_radians();
            let eye = [ORBIT_RADIUS * a.sin(), -1.0, -ORBIT_RADIUS * a.cos()];
            Camera::look_at(eye, [0.0, 0.1, 0.2], [0.0, -1.0, 0.0], 50.0, width, height)
        })
        .collect()
}

/// Deterministic procedural style image: diagonal color bands with a
/// high-frequency stroke texture.
#[allow(clippy::approx_constant)]
pub fn style_image(width: usize, height: usize, seed: u64) -> crate::tensor::Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hue0: f32 = rng.gen();
    let freq: f32 = rng.gen_range(0.15..0.3);
    let phase: f32 = rng.gen_range(0.0..6.28);
    crate::tensor::Tensor::from_fn([3, height, width], |k| {
        let (c, i) = (k / (width * height), k % (width * height));
        let (x, y) = ((i % width) as f32, (i / width) as f32);
        let band = ((x + y) * 0.04).floor();
        let stroke = 0.5 + 0.5 * (freq * (x - 0.6 * y) + phase).sin() * (0.31 * (y + 0.4 * x)).cos();
        let rgb = hsv(hue0 + 0.17 * band, 0.85, 0.25 + 0.7 * stroke);
        rgb[c]
    })
}
