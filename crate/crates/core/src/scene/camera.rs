use rand::Rng;

type Mat3 = [[f64; 3]; 3];

/// Pinhole camera, OpenCV axes (x right, y down, z forward).
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    /// World-to-camera rotation.
    pub rotation: Mat3,
    /// World-to-camera translation.
    pub translation: [f64; 3],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CameraError {
    #[error("focal lengths must be positive (fx={fx}, fy={fy})")]
    Focal { fx: f64, fy: f64 },
    #[error("image must be at least 8x8, got {width}x{height}")]
    TooSmall { width: usize, height: usize },
    #[error("interpolation parameter {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("cameras do not share intrinsics")]
    IntrinsicsDiffer,
}

pub const DEFAULT_NEAR: f64 = 0.01;

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        rotation: Mat3,
        translation: [f64; 3],
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, CameraError> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(CameraError::Focal { fx, fy });
        }
        if width < 8 || height < 8 {
            return Err(CameraError::TooSmall { width, height });
        }
        Ok(Self {
            rotation,
            translation,
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            near: DEFAULT_NEAR,
        })
    }

    /// Builds a camera from a row-major 4×4 camera-to-world matrix.
    #[allow(clippy::too_many_arguments)]
    pub fn from_cam_to_world(
        m: &[f64; 16],
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, CameraError> {
        let r_cw: Mat3 = std::array::from_fn(|i| std::array::from_fn(|j| m[i * 4 + j]));
        let center = [m[3], m[7], m[11]];
        let r = transpose(&r_cw);
        let t = neg(mat_vec(&r, center));
        Self::new(r, t, fx, fy, cx, cy, width, height)
    }

    /// Camera at `eye` looking at `target`, with image "up" towards `up`.
    pub fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        fov_x_deg: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, CameraError> {
        let z = normalize(sub(target, eye));
        let x = normalize(cross(z, up));
        let y = cross(z, x);
        let r = [x, y, z];
        let fx = width as f64 * 0.5 / (fov_x_deg.to_radians() * 0.5).tan();
        let t = neg(mat_vec(&r, eye));
        Self::new(
            r,
            t,
            fx,
            fx,
            width as f64 * 0.5,
            height as f64 * 0.5,
            width,
            height,
        )
    }

    pub fn cam_to_world(&self) -> [f64; 16] {
        let r = transpose(&self.rotation);
        let c = self.center();
        [
            r[0][0], r[0][1], r[0][2], c[0], r[1][0], r[1][1], r[1][2], c[1], r[2][0], r[2][1],
            r[2][2], c[2], 0.0, 0.0, 0.0, 1.0,
        ]
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> [f64; 3] {
        neg(mat_vec(&transpose(&self.rotation), self.translation))
    }

    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        add(mat_vec(&self.rotation, p), self.translation)
    }

    /// Same pose with intrinsics rescaled to a new image size.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
            ..self.clone()
        }
    }

    pub fn same_intrinsics(&self, other: &Self) -> bool {
        self.fx == other.fx
            && self.fy == other.fy
            && self.cx == other.cx
            && self.cy == other.cy
            && self.width == other.width
            && self.height == other.height
    }
}

/// Pose between `a` (t=0) and `b` (t=1): slerped rotation, linearly
/// interpolated center, then a random rotation of at most `jitter` radians.
pub fn interpolate_pose<R: Rng + ?Sized>(
    a: &Camera,
    b: &Camera,
    t: f64,
    jitter: f64,
    rng: &mut R,
) -> Result<Camera, CameraError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(CameraError::OutOfRange(t));
    }
    if !a.same_intrinsics(b) {
        return Err(CameraError::IntrinsicsDiffer);
    }
    if jitter == 0.0 && t == 0.0 {
        return Ok(a.clone());
    }
    if jitter == 0.0 && t == 1.0 {
        return Ok(b.clone());
    }
    let q = slerp(mat_to_quat(&a.rotation), mat_to_quat(&b.rotation), t);
    let mut r = quat_to_mat(q);
    let (ca, cb) = (a.center(), b.center());
    let c: [f64; 3] = std::array::from_fn(|i| ca[i] + (cb[i] - ca[i]) * t);
    if jitter > 0.0 {
        let axis = loop {
            let v: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            let n = dot(v, v);
            if n > 1e-6 && n <= 1.0 {
                break normalize(v);
            }
        };
        let angle = rng.gen_range(-jitter..=jitter);
        r = mat_mul(&axis_angle(axis, angle), &r);
    }
    Ok(Camera {
        rotation: r,
        translation: neg(mat_vec(&r, c)),
        ..a.clone()
    })
}

pub(crate) fn mat_vec(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|i| dot(m[i], v))
}

pub(crate) fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

pub(crate) fn transpose(m: &Mat3) -> Mat3 {
    std::array::from_fn(|i| std::array::from_fn(|j| m[j][i]))
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|i| a[i] + b[i])
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|i| a[i] - b[i])
}

fn neg(a: [f64; 3]) -> [f64; 3] {
    a.map(|v| -v)
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = dot(a, a).sqrt();
    a.map(|v| v / n)
}

/// Unit quaternion (w, x, y, z) of a rotation matrix.
pub(crate) fn mat_to_quat(m: &Mat3) -> [f64; 4] {
    let tr = m[0][0] + m[1][1] + m[2][2];
    let q = if tr > 0.0 {
        let s = (tr + 1.0).sqrt() * 2.0;
        [
            0.25 * s,
            (m[2][1] - m[1][2]) / s,
            (m[0][2] - m[2][0]) / s,
            (m[1][0] - m[0][1]) / s,
        ]
    } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
        let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
        [
            (m[2][1] - m[1][2]) / s,
            0.25 * s,
            (m[0][1] + m[1][0]) / s,
            (m[0][2] + m[2][0]) / s,
        ]
    } else if m[1][1] > m[2][2] {
        let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
        [
            (m[0][2] - m[2][0]) / s,
            (m[0][1] + m[1][0]) / s,
            0.25 * s,
            (m[1][2] + m[2][1]) / s,
        ]
    } else {
        let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
        [
            (m[1][0] - m[0][1]) / s,
            (m[0][2] + m[2][0]) / s,
            (m[1][2] + m[2][1]) / s,
            0.25 * s,
        ]
    };
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    q.map(|v| v / n)
}

/// Rotation matrix of a (normalized here) quaternion (w, x, y, z).
pub fn quat_to_mat(q: [f64; 4]) -> Mat3 {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|v| v / n);
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

fn slerp(a: [f64; 4], mut b: [f64; 4], t: f64) -> [f64; 4] {
    let mut d: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    if d < 0.0 {
        b = b.map(|v| -v);
        d = -d;
    }
    if d > 0.9995 {
        let q: [f64; 4] = std::array::from_fn(|i| a[i] + (b[i] - a[i]) * t);
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        return q.map(|v| v / n);
    }
    let theta = d.acos();
    let s = theta.sin();
    let wa = ((1.0 - t) * theta).sin() / s;
    let wb = (t * theta).sin() / s;
    std::array::from_fn(|i| wa * a[i] + wb * b[i])
}

fn axis_angle(axis: [f64; 3], angle: f64) -> Mat3 {
    let h = angle * 0.5;
    let s = h.sin();
    quat_to_mat([h.cos(), axis[0] * s, axis[1] * s, axis[2] * s])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rot_z(deg: f64) -> Mat3 {
        let (s, c) = deg.to_radians().sin_cos();
        [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
    }

    fn cam(r: Mat3, c: [f64; 3]) -> Camera {
        Camera::new(r, neg(mat_vec(&r, c)), 50.0, 50.0, 16.0, 16.0, 32, 32).unwrap()
    }

    #[test]
    fn validates_intrinsics() {
        let id = rot_z(0.0);
        assert!(matches!(
            Camera::new(id, [0.0; 3], 0.0, 1.0, 0.0, 0.0, 16, 16),
            Err(CameraError::Focal { .. })
        ));
        assert!(matches!(
            Camera::new(id, [0.0; 3], 1.0, 1.0, 0.0, 0.0, 7, 16),
            Err(CameraError::TooSmall { .. })
        ));
    }

    #[test]
    fn cam_to_world_round_trip() {
        let c = cam(rot_z(30.0), [1.0, 2.0, -3.0]);
        let m = c.cam_to_world();
        let back = Camera::from_cam_to_world(&m, c.fx, c.fy, c.cx, c.cy, c.width, c.height).unwrap();
        for i in 0..3 {
            assert!((back.translation[i] - c.translation[i]).abs() < 1e-12);
            for j in 0..3 {
                assert!((back.rotation[i][j] - c.rotation[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn endpoints_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = cam(rot_z(0.0), [0.0, 0.0, -4.0]);
        let b = cam(rot_z(90.0), [1.0, 0.0, -4.0]);
        assert_eq!(interpolate_pose(&a, &b, 0.0, 0.0, &mut rng).unwrap(), a);
        assert_eq!(interpolate_pose(&a, &b, 1.0, 0.0, &mut rng).unwrap(), b);
    }

    #[test]
    fn midpoint_of_quarter_turn_is_eighth_turn() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = cam(rot_z(0.0), [0.0; 3]);
        let b = cam(rot_z(90.0), [0.0; 3]);
        let m = interpolate_pose(&a, &b, 0.5, 0.0, &mut rng).unwrap();
        let want = rot_z(45.0);
        for i in 0..3 {
            for j in 0..3 {
                assert!((m.rotation[i][j] - want[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn out_of_range_t_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = cam(rot_z(0.0), [0.0; 3]);
        assert_eq!(
            interpolate_pose(&a, &a, 1.5, 0.0, &mut rng).unwrap_err(),
            CameraError::OutOfRange(1.5)
        );
    }

    #[test]
    fn jittered_rotation_stays_orthonormal_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = cam(rot_z(10.0), [0.0, 0.0, -3.0]);
        let b = cam(rot_z(-50.0), [2.0, 1.0, -3.0]);
        let jitter = 2f64.to_radians();
        for k in 0..50 {
            let t = k as f64 / 49.0;
            let m = interpolate_pose(&a, &b, t, jitter, &mut rng).unwrap();
            let rrt = mat_mul(&m.rotation, &transpose(&m.rotation));
            for i in 0..3 {
                for j in 0..3 {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((rrt[i][j] - want).abs() < 1e-6);
                }
            }
            let ca = a.center();
            let cb = b.center();
            let c = m.center();
            for i in 0..3 {
                assert!((c[i] - (ca[i] + (cb[i] - ca[i]) * t)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn look_at_puts_target_on_axis() {
        let c = Camera::look_at([0.0, 0.0, -5.0], [0.0; 3], [0.0, -1.0, 0.0], 60.0, 32, 32).unwrap();
        let p = c.to_camera([0.0; 3]);
        assert!(p[0].abs() < 1e-12 && p[1].abs() < 1e-12);
        assert!((p[2] - 5.0).abs() < 1e-12);
    }
}
