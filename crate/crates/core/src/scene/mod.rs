//! Gaussian scenes, cameras and PLY interchange.

pub mod camera;
pub mod ply;
pub mod sh;

pub use camera::{interpolate_pose, Camera, CameraError};
pub use ply::{load_ply, read_ply, save_ply, write_ply, PlyError};

/// One anisotropic 3D Gaussian in raw (pre-activation) parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub position: [f32; 3],
    /// Carried through PLY I/O, never used for rendering.
    pub normal: [f32; 3],
    /// Log of the per-axis standard deviation.
    pub raw_scale: [f32; 3],
    /// Quaternion (w, x, y, z); normalized before use.
    pub rotation: [f32; 4],
    /// Logit of the opacity.
    pub raw_opacity: f32,
    /// `(degree+1)²` rows of RGB coefficients; row 0 is the DC term.
    pub sh: Vec<[f32; 3]>,
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f32) -> f32 {
    (p / (1.0 - p)).ln()
}

impl Gaussian {
    /// Isotropic Gaussian with the given activated scale, opacity and DC color.
    pub fn isotropic(position: [f32; 3], scale: f32, opacity: f32, rgb: [f32; 3], degree: usize) -> Self {
        let mut sh = vec![[0.0; 3]; sh::coeff_count(degree)];
        sh[0] = rgb.map(|c| ((c as f64 - sh::SH_OFFSET) / sh::SH_C0) as f32);
        Self {
            position,
            normal: [0.0; 3],
            raw_scale: [scale.ln(); 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            raw_opacity: logit(opacity),
            sh,
        }
    }

    pub fn scale(&self) -> [f32; 3] {
        self.raw_scale.map(f32::exp)
    }

    pub fn opacity(&self) -> f32 {
        sigmoid(self.raw_opacity)
    }

    pub fn degree(&self) -> usize {
        sh::degree_for_count(self.sh.len()).expect("valid SH row count")
    }

    /// View-dependent color for a unit direction from the camera to the center.
    pub fn sh_color(&self, view_dir: [f32; 3]) -> [f32; 3] {
        let coeffs: Vec<[f64; 3]> = self.sh.iter().map(|r| r.map(f64::from)).collect();
        sh::eval_color(&coeffs, view_dir.map(f64::from)).map(|v| v as f32)
    }

    pub fn unit_rotation(&self) -> [f64; 4] {
        let q = self.rotation.map(f64::from);
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        q.map(|v| v / n)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SceneError {
    #[error("SH degree {0} outside 0..=3")]
    BadDegree(usize),
    #[error("gaussian {index} has {got} SH rows, expected {expected}")]
    ShRows {
        index: usize,
        got: usize,
        expected: usize,
    },
    #[error("scene has {scene} gaussians but the snapshot has {snapshot}")]
    LengthMismatch { scene: usize, snapshot: usize },
}

/// Ordered set of Gaussians sharing one SH degree.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianScene {
    pub gaussians: Vec<Gaussian>,
    sh_degree: usize,
}

impl GaussianScene {
    pub fn new(gaussians: Vec<Gaussian>, sh_degree: usize) -> Result<Self, SceneError> {
        if sh_degree > 3 {
            return Err(SceneError::BadDegree(sh_degree));
        }
        let expected = sh::coeff_count(sh_degree);
        if let Some((index, g)) = gaussians.iter().enumerate().find(|(_, g)| g.sh.len() != expected) {
            return Err(SceneError::ShRows {
                index,
                got: g.sh.len(),
                expected,
            });
        }
        Ok(Self {
            gaussians,
            sh_degree,
        })
    }

    pub fn empty(sh_degree: usize) -> Self {
        Self {
            gaussians: Vec::new(),
            sh_degree,
        }
    }

    pub fn sh_degree(&self) -> usize {
        self.sh_degree
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    /// Keeps Gaussians whose index is not flagged, preserving order.
    pub fn retain_indices(&mut self, remove: &[bool]) {
        let mut it = remove.iter();
        self.gaussians.retain(|_| !*it.next().unwrap_or(&false));
    }

    /// Order-sensitive FNV-1a digest over every payload float's bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |v: f32| {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for g in &self.gaussians {
            g.position.iter().chain(&g.raw_scale).chain(&g.rotation).for_each(|&v| eat(v));
            eat(g.raw_opacity);
            g.sh.iter().flatten().for_each(|&v| eat(v));
        }
        h
    }

    /// Axis-aligned bounds of the centers.
    pub fn bounds(&self) -> Option<([f32; 3], [f32; 3])> {
        let first = self.gaussians.first()?.position;
        Some(self.gaussians.iter().fold((first, first), |(lo, hi), g| {
            (
                std::array::from_fn(|i| lo[i].min(g.position[i])),
                std::array::from_fn(|i| hi[i].max(g.position[i])),
            )
        }))
    }
}

/// Frozen copy of a scene with its activated scales and opacities, the
/// reference for the regularizers and the depth-preservation target.
#[derive(Debug, Clone)]
pub struct SceneSnapshot {
    scene: GaussianScene,
    scales: Vec<[f32; 3]>,
    opacities: Vec<f32>,
}

impl SceneSnapshot {
    pub fn new(scene: &GaussianScene) -> Self {
        Self {
            scales: scene.gaussians.iter().map(Gaussian::scale).collect(),
            opacities: scene.gaussians.iter().map(Gaussian::opacity).collect(),
            scene: scene.clone(),
        }
    }

    pub fn scene(&self) -> &GaussianScene {
        &self.scene
    }

    pub fn scales(&self) -> &[[f32; 3]] {
        &self.scales
    }

    pub fn opacities(&self) -> &[f32] {
        &self.opacities
    }

    fn check_len(&self, scene: &GaussianScene) -> Result<(), SceneError> {
        if scene.len() != self.scales.len() {
            return Err(SceneError::LengthMismatch {
                scene: scene.len(),
                snapshot: self.scales.len(),
            });
        }
        Ok(())
    }

    /// Per-component activated scale change relative to the snapshot.
    pub fn delta_scale(&self, scene: &GaussianScene) -> Result<Vec<[f32; 3]>, SceneError> {
        self.check_len(scene)?;
        Ok(scene
            .gaussians
            .iter()
            .zip(&self.scales)
            .map(|(g, s0)| {
                let s = g.scale();
                std::array::from_fn(|i| s[i] - s0[i])
            })
            .collect())
    }

    pub fn delta_opacity(&self, scene: &GaussianScene) -> Result<Vec<f32>, SceneError> {
        self.check_len(scene)?;
        Ok(scene
            .gaussians
            .iter()
            .zip(&self.opacities)
            .map(|(g, a0)| g.opacity() - a0)
            .collect())
    }
}

/// Deep, immutable copy of the scene for the stylization stage.
pub fn snapshot(scene: &GaussianScene) -> SceneSnapshot {
    SceneSnapshot::new(scene)
}
