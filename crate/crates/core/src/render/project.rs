//! Perspective projection of 3D Gaussians to screen-space ellipses, both as
//! a scalar reference and as differentiable tape ops vectorized over N.

use crate::scene::sh::{self, SH_C0, SH_C1, SH_C2, SH_C3, SH_OFFSET};
use crate::scene::{camera::quat_to_mat, Camera, Gaussian};
use crate::tensor::{Real, Result, Tape, Var};

/// Isotropic variance (pixels²) added to every projected covariance.
pub const COV2D_FLOOR: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub mean2d: [f64; 2],
    /// `[a, b, c]` of the symmetric matrix `[[a, b], [b, c]]`, floor included.
    pub cov2d: [f64; 3],
    pub depth: f64,
}

/// Projects one Gaussian; `None` if its center lies in front of the near plane.
pub fn project(g: &Gaussian, cam: &Camera) -> Option<Projection> {
    let p = cam.to_camera(g.position.map(f64::from));
    if p[2] < cam.near {
        return None;
    }
    let (x, y, z) = (p[0], p[1], p[2]);
    let j = [
        [cam.fx / z, 0.0, -cam.fx * x / (z * z)],
        [0.0, cam.fy / z, -cam.fy * y / (z * z)],
    ];
    let w = &cam.rotation;
    let t: [[f64; 3]; 2] =
        std::array::from_fn(|i| std::array::from_fn(|k| (0..3).map(|m| j[i][m] * w[m][k]).sum()));
    let r = quat_to_mat(g.rotation.map(f64::from));
    let s = g.raw_scale.map(|v| f64::from(v).exp());
    let m: [[f64; 3]; 3] = std::array::from_fn(|a| std::array::from_fn(|b| r[a][b] * s[b]));
    let tm: [[f64; 3]; 2] =
        std::array::from_fn(|i| std::array::from_fn(|k| (0..3).map(|q| t[i][q] * m[q][k]).sum()));
    let dot = |a: &[f64; 3], b: &[f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let a = dot(&tm[0], &tm[0]) + COV2D_FLOOR;
    let b = dot(&tm[0], &tm[1]);
    let c = dot(&tm[1], &tm[1]) + COV2D_FLOOR;
    Some(Projection {
        mean2d: [cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy],
        cov2d: [a, b, c],
        depth: z,
    })
}

/// Scene parameters recorded on a tape as `[rows, N]` tensors.
#[derive(Debug, Clone, Copy)]
pub struct SceneVars {
    pub position: Var,
    pub raw_scale: Var,
    pub rotation: Var,
    pub raw_opacity: Var,
    /// Row `3·l + c` holds SH coefficient `l`, channel `c`.
    pub sh: Var,
    pub count: usize,
    pub degree: usize,
}

/// Which parameter groups receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trainable {
    pub position: bool,
    pub scale: bool,
    pub rotation: bool,
    pub opacity: bool,
    pub sh: bool,
}

impl Trainable {
    pub const ALL: Self = Self {
        position: true,
        scale: true,
        rotation: true,
        opacity: true,
        sh: true,
    };
    pub const COLOR: Self = Self {
        position: false,
        scale: false,
        rotation: false,
        opacity: false,
        sh: true,
    };
    pub const NONE: Self = Self {
        position: false,
        scale: false,
        rotation: false,
        opacity: false,
        sh: false,
    };
}

/// Row counts of the five parameter groups, in packing order.
pub fn group_rows(degree: usize) -> [usize; 5] {
    [3, 3, 4, 1, 3 * sh::coeff_count(degree)]
}

/// Packs one group as a `[rows, N]` row-major buffer.
pub fn pack_group<T: Real>(gs: &[Gaussian], group: usize) -> Vec<T> {
    let rows = match gs.first() {
        Some(g) => group_rows(g.degree())[group],
        None => 0,
    };
    let n = gs.len();
    let mut out = vec![T::zero(); rows * n];
    for (i, g) in gs.iter().enumerate() {
        for r in 0..rows {
            let v = match group {
                0 => g.position[r],
                1 => g.raw_scale[r],
                2 => g.rotation[r],
                3 => g.raw_opacity,
                _ => g.sh[r / 3][r % 3],
            };
            out[r * n + i] = T::lit(v as f64);
        }
    }
    out
}

/// Concatenation of all five groups.
pub fn pack_scene<T: Real>(gs: &[Gaussian]) -> Vec<T> {
    (0..5).flat_map(|g| pack_group::<T>(gs, g)).collect()
}

/// Writes a packed buffer back into the Gaussians (rounding to f32).
pub fn unpack_scene<T: Real>(packed: &[T], gs: &mut [Gaussian]) {
    let n = gs.len();
    let Some(first) = gs.first() else { return };
    let rows = group_rows(first.degree());
    let mut base = 0;
    for (group, &r) in rows.iter().enumerate() {
        for (i, g) in gs.iter_mut().enumerate() {
            for row in 0..r {
                let v = packed[base + row * n + i].to_f64_lossy() as f32;
                match group {
                    0 => g.position[row] = v,
                    1 => g.raw_scale[row] = v,
                    2 => g.rotation[row] = v,
                    3 => g.raw_opacity = v,
                    _ => g.sh[row / 3][row % 3] = v,
                }
            }
        }
        base += r * n;
    }
}

impl SceneVars {
    pub fn new<T: Real>(tape: &mut Tape<T>, gs: &[Gaussian], degree: usize, train: Trainable) -> Self {
        let n = gs.len();
        let rows = group_rows(degree);
        let flags = [train.position, train.scale, train.rotation, train.opacity, train.sh];
        let mut vars = [None; 5];
        for g in 0..5 {
            let t = crate::tensor::Tensor::new([rows[g], n], pack_group::<T>(gs, g)).expect("group");
            vars[g] = Some(if flags[g] { tape.leaf(t) } else { tape.constant(t) });
        }
        let [position, raw_scale, rotation, raw_opacity, sh] = vars.map(Option::unwrap);
        Self {
            position,
            raw_scale,
            rotation,
            raw_opacity,
            sh,
            count: n,
            degree,
        }
    }

    /// Splits a flat packed vector (see [`pack_scene`]) into groups.
    pub fn from_packed<T: Real>(tape: &mut Tape<T>, packed: Var, n: usize, degree: usize) -> Result<Self> {
        let rows = group_rows(degree);
        let mut vars = [packed; 5];
        let mut start = 0;
        for g in 0..5 {
            let s = tape.slice(packed, 0, start, rows[g] * n)?;
            vars[g] = tape.reshape(s, [rows[g], n])?;
            start += rows[g] * n;
        }
        let [position, raw_scale, rotation, raw_opacity, sh] = vars;
        Ok(Self {
            position,
            raw_scale,
            rotation,
            raw_opacity,
            sh,
            count: n,
            degree,
        })
    }

    pub fn groups(&self) -> [Var; 5] {
        [self.position, self.raw_scale, self.rotation, self.raw_opacity, self.sh]
    }

    /// Flat gradient in packing order; zeros for frozen groups.
    pub fn packed_grad<T: Real>(&self, tape: &Tape<T>) -> Vec<T> {
        self.groups()
            .iter()
            .flat_map(|&v| match tape.grad(v) {
                Some(g) => g.to_vec(),
                None => vec![T::zero(); tape.value(v).len()],
            })
            .collect()
    }
}

/// Per-Gaussian screen-space quantities on the tape, each `[rows, N]`.
#[derive(Debug, Clone, Copy)]
pub struct ProjectedVars {
    pub mean2d: Var,
    pub cov2d: Var,
    pub opacity: Var,
    pub color: Var,
    pub depth: Var,
}

struct Builder<'t, T: Real> {
    t: &'t mut Tape<T>,
}

impl<T: Real> Builder<'_, T> {
    fn row(&mut self, v: Var, r: usize) -> Result<Var> {
        self.t.slice(v, 0, r, 1)
    }

    fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.t.mul(a, b)
    }

    fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.t.add(a, b)
    }

    fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.t.sub(a, b)
    }

    fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.t.mul_scalar(a, T::lit(c))
    }

    fn shift(&mut self, a: Var, c: f64) -> Result<Var> {
        self.t.add_scalar(a, T::lit(c))
    }

    /// Σ cᵢ·vᵢ, skipping zero coefficients.
    fn lin(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(v, c) in terms {
            if c == 0.0 {
                continue;
            }
            let term = if c == 1.0 { v } else { self.scale(v, c)? };
            acc = Some(match acc {
                Some(a) => self.add(a, term)?,
                None => term,
            });
        }
        match acc {
            Some(a) => Ok(a),
            None => self.scale(terms[0].0, 0.0),
        }
    }

    fn sum(&mut self, vs: &[Var]) -> Result<Var> {
        let mut acc = vs[0];
        for &v in &vs[1..] {
            acc = self.add(acc, v)?;
        }
        Ok(acc)
    }
}

/// SH basis functions as tape ops over direction rows `x, y, z`.
fn sh_basis_vars<T: Real>(b: &mut Builder<T>, degree: usize, x: Var, y: Var, z: Var) -> Result<Vec<Var>> {
    let mut out = Vec::new();
    if degree >= 1 {
        out.push(b.scale(y, -SH_C1)?);
        out.push(b.scale(z, SH_C1)?);
        out.push(b.scale(x, -SH_C1)?);
    }
    if degree >= 2 {
        let xx = b.mul(x, x)?;
        let yy = b.mul(y, y)?;
        let zz = b.mul(z, z)?;
        let xy = b.mul(x, y)?;
        let yz = b.mul(y, z)?;
        let xz = b.mul(x, z)?;
        out.push(b.scale(xy, SH_C2[0])?);
        out.push(b.scale(yz, SH_C2[1])?);
        let t = b.lin(&[(zz, 2.0), (xx, -1.0), (yy, -1.0)])?;
        out.push(b.scale(t, SH_C2[2])?);
        out.push(b.scale(xz, SH_C2[3])?);
        let t = b.sub(xx, yy)?;
        out.push(b.scale(t, SH_C2[4])?);
        if degree >= 3 {
            let t = b.lin(&[(xx, 3.0), (yy, -1.0)])?;
            let t = b.mul(y, t)?;
            out.push(b.scale(t, SH_C3[0])?);
            let t = b.mul(xy, z)?;
            out.push(b.scale(t, SH_C3[1])?);
            let f = b.lin(&[(zz, 4.0), (xx, -1.0), (yy, -1.0)])?;
            let t = b.mul(y, f)?;
            out.push(b.scale(t, SH_C3[2])?);
            let t = b.lin(&[(zz, 2.0), (xx, -3.0), (yy, -3.0)])?;
            let t = b.mul(z, t)?;
            out.push(b.scale(t, SH_C3[3])?);
            let t = b.mul(x, f)?;
            out.push(b.scale(t, SH_C3[4])?);
            let t = b.sub(xx, yy)?;
            let t = b.mul(z, t)?;
            out.push(b.scale(t, SH_C3[5])?);
            let t = b.lin(&[(xx, 1.0), (yy, -3.0)])?;
            let t = b.mul(x, t)?;
            out.push(b.scale(t, SH_C3[6])?);
        }
    }
    Ok(out)
}

/// Differentiable projection of every Gaussian for `cam`.
pub fn project_on_tape<T: Real>(tape: &mut Tape<T>, vars: &SceneVars, cam: &Camera) -> Result<ProjectedVars> {
    let mut b = Builder { t: tape };
    let w = cam.rotation;
    let tr = cam.translation;
    let p: Vec<Var> = (0..3).map(|r| b.row(vars.position, r)).collect::<Result<_>>()?;

    let cam_rows: Vec<Var> = (0..3)
        .map(|r| {
            let l = b.lin(&[(p[0], w[r][0]), (p[1], w[r][1]), (p[2], w[r][2])])?;
            b.shift(l, tr[r])
        })
        .collect::<Result<_>>()?;
    let (tx, ty, tz) = (cam_rows[0], cam_rows[1], cam_rows[2]);
    let z = b.t.clamp(tz, T::lit(cam.near), T::max_value())?;
    let inv_z = b.t.power(z, -T::one())?;
    let inv_z2 = b.mul(inv_z, inv_z)?;

    let xz = b.mul(tx, inv_z)?;
    let yz = b.mul(ty, inv_z)?;
    let u = b.scale(xz, cam.fx)?;
    let u = b.shift(u, cam.cx)?;
    let v = b.scale(yz, cam.fy)?;
    let v = b.shift(v, cam.cy)?;
    let mean2d = b.t.concat(&[u, v], 0)?;

    // Rows of J·W.
    let jx = b.scale(inv_z, cam.fx)?;
    let jy = b.scale(inv_z, cam.fy)?;
    let txz2 = b.mul(tx, inv_z2)?;
    let jxz = b.scale(txz2, -cam.fx)?;
    let tyz2 = b.mul(ty, inv_z2)?;
    let jyz = b.scale(tyz2, -cam.fy)?;
    let mut jw = [[jx; 3]; 2];
    for k in 0..3 {
        let a0 = b.scale(jx, w[0][k])?;
        let a1 = b.scale(jxz, w[2][k])?;
        jw[0][k] = b.add(a0, a1)?;
        let b0 = b.scale(jy, w[1][k])?;
        let b1 = b.scale(jyz, w[2][k])?;
        jw[1][k] = b.add(b0, b1)?;
    }

    // Unit quaternion → rotation matrix.
    let q: Vec<Var> = (0..4).map(|r| b.row(vars.rotation, r)).collect::<Result<_>>()?;
    let sq: Vec<Var> = q.iter().map(|&v| b.mul(v, v)).collect::<Result<_>>()?;
    let n2 = b.sum(&sq)?;
    let norm = b.t.sqrt(n2)?;
    let qn: Vec<Var> = q.iter().map(|&v| b.t.div(v, norm)).collect::<Result<_>>()?;
    let (qw, qx, qy, qz) = (qn[0], qn[1], qn[2], qn[3]);
    let xx = b.mul(qx, qx)?;
    let yy = b.mul(qy, qy)?;
    let zz = b.mul(qz, qz)?;
    let xy = b.mul(qx, qy)?;
    let xz_ = b.mul(qx, qz)?;
    let yz_ = b.mul(qy, qz)?;
    let wx = b.mul(qw, qx)?;
    let wy = b.mul(qw, qy)?;
    let wz = b.mul(qw, qz)?;
    let one_minus = |b: &mut Builder<T>, a: Var, c: Var| -> Result<Var> {
        let s = b.add(a, c)?;
        let s = b.scale(s, -2.0)?;
        b.shift(s, 1.0)
    };
    let r = [
        [
            one_minus(&mut b, yy, zz)?,
            b.lin(&[(xy, 2.0), (wz, -2.0)])?,
            b.lin(&[(xz_, 2.0), (wy, 2.0)])?,
        ],
        [
            b.lin(&[(xy, 2.0), (wz, 2.0)])?,
            one_minus(&mut b, xx, zz)?,
            b.lin(&[(yz_, 2.0), (wx, -2.0)])?,
        ],
        [
            b.lin(&[(xz_, 2.0), (wy, -2.0)])?,
            b.lin(&[(yz_, 2.0), (wx, 2.0)])?,
            one_minus(&mut b, xx, yy)?,
        ],
    ];
    let s: Vec<Var> = (0..3)
        .map(|k| {
            let raw = b.row(vars.raw_scale, k)?;
            b.t.exp(raw)
        })
        .collect::<Result<_>>()?;
    // A = (J·W)·R·diag(s); cov2d = A·Aᵀ.
    let mut a = [[jx; 3]; 2];
    for i in 0..2 {
        for k in 0..3 {
            let terms: Vec<Var> = (0..3).map(|j| b.mul(jw[i][j], r[j][k])).collect::<Result<_>>()?;
            let t = b.sum(&terms)?;
            a[i][k] = b.mul(t, s[k])?;
        }
    }
    let sq0: Vec<Var> = (0..3).map(|k| b.mul(a[0][k], a[0][k])).collect::<Result<_>>()?;
    let cross: Vec<Var> = (0..3).map(|k| b.mul(a[0][k], a[1][k])).collect::<Result<_>>()?;
    let sq1: Vec<Var> = (0..3).map(|k| b.mul(a[1][k], a[1][k])).collect::<Result<_>>()?;
    let ca = b.sum(&sq0)?;
    let ca = b.shift(ca, COV2D_FLOOR)?;
    let cb = b.sum(&cross)?;
    let cc = b.sum(&sq1)?;
    let cc = b.shift(cc, COV2D_FLOOR)?;
    let cov2d = b.t.concat(&[ca, cb, cc], 0)?;

    let opacity = b.t.sigmoid(vars.raw_opacity)?;

    // View direction from the camera center to each Gaussian.
    let center = cam.center();
    let d: Vec<Var> = (0..3).map(|k| b.shift(p[k], -center[k])).collect::<Result<_>>()?;
    let dsq: Vec<Var> = d.iter().map(|&v| b.mul(v, v)).collect::<Result<_>>()?;
    let dn2 = b.sum(&dsq)?;
    let dn = b.t.sqrt(dn2)?;
    let dir: Vec<Var> = d.iter().map(|&v| b.t.div(v, dn)).collect::<Result<_>>()?;
    let basis = sh_basis_vars(&mut b, vars.degree, dir[0], dir[1], dir[2])?;
    let mut channels = Vec::with_capacity(3);
    for c in 0..3 {
        let dc = b.row(vars.sh, c)?;
        let mut acc = b.scale(dc, SH_C0)?;
        for (l, &y) in basis.iter().enumerate() {
            let coeff = b.row(vars.sh, 3 * (l + 1) + c)?;
            let t = b.mul(coeff, y)?;
            acc = b.add(acc, t)?;
        }
        let acc = b.shift(acc, SH_OFFSET)?;
        channels.push(b.t.clamp(acc, T::zero(), T::max_value())?);
    }
    let color = b.t.concat(&channels, 0)?;

    Ok(ProjectedVars {
        mean2d,
        cov2d,
        opacity,
        color,
        depth: tz,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam(fx: f64) -> Camera {
        Camera::new(
            [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            [0.0; 3],
            fx,
            30.0,
            16.0,
            12.0,
            32,
            24,
        )
        .unwrap()
    }

    #[test]
    fn on_axis_isotropic() {
        let g = Gaussian::isotropic([0.0, 0.0, 4.0], 0.2, 0.5, [0.5; 3], 0);
        let p = project(&g, &cam(30.0)).unwrap();
        assert_eq!(p.mean2d, [16.0, 12.0]);
        assert!((p.cov2d[0] - p.cov2d[2]).abs() < 1e-12);
        assert!(p.cov2d[1].abs() < 1e-12);
        assert_eq!(p.depth, 4.0);
    }

    #[test]
    fn doubling_fx_doubles_x_extent() {
        let mut g = Gaussian::isotropic([0.3, -0.2, 4.0], 0.2, 0.5, [0.5; 3], 0);
        g.rotation = [0.9, 0.1, -0.3, 0.2];
        g.raw_scale = [-1.0, -2.0, -1.5];
        let p1 = project(&g, &cam(30.0)).unwrap();
        let p2 = project(&g, &cam(60.0)).unwrap();
        let a1 = p1.cov2d[0] - COV2D_FLOOR;
        let a2 = p2.cov2d[0] - COV2D_FLOOR;
        // Variance scales by 4, so the standard deviation doubles.
        assert!((a2 / a1 - 4.0).abs() < 1e-9);
        assert!((p2.cov2d[1] / p1.cov2d[1] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn behind_near_plane_culled() {
        let g = Gaussian::isotropic([0.0, 0.0, 0.001], 0.2, 0.5, [0.5; 3], 0);
        assert!(project(&g, &cam(30.0)).is_none());
    }

    #[test]
    fn tape_projection_matches_scalar() {
        let mut c = cam(40.0);
        c.rotation = quat_to_mat([0.95, 0.05, 0.2, -0.1]);
        c.translation = [0.1, -0.3, 0.5];
        let mut gs = Vec::new();
        for i in 0..5 {
            let f = i as f32;
            let mut g = Gaussian::isotropic([0.2 * f - 0.4, 0.1 * f, 3.0 + 0.3 * f], 0.1, 0.6, [0.3, 0.5, 0.7], 2);
            g.rotation = [1.0, 0.1 * f, -0.2, 0.05 * f];
            g.raw_scale = [-2.0, -1.5 - 0.1 * f, -2.5];
            for (l, row) in g.sh.iter_mut().enumerate().skip(1) {
                *row = [0.1 * l as f32, -0.05 * f, 0.02];
            }
            gs.push(g);
        }
        let mut tape = Tape::<f64>::new();
        let vars = SceneVars::new(&mut tape, &gs, 2, Trainable::ALL);
        let pv = project_on_tape(&mut tape, &vars, &c).unwrap();
        let n = gs.len();
        let center = c.center();
        for (i, g) in gs.iter().enumerate() {
            let p = project(g, &c).unwrap();
            let mean = tape.value(pv.mean2d).data();
            let cov = tape.value(pv.cov2d).data();
            assert!((mean[i] - p.mean2d[0]).abs() < 1e-9);
            assert!((mean[n + i] - p.mean2d[1]).abs() < 1e-9);
            for k in 0..3 {
                assert!((cov[k * n + i] - p.cov2d[k]).abs() < 1e-9, "cov {k}");
            }
            assert!((tape.value(pv.depth).data()[i] - p.depth).abs() < 1e-12);
            let pos = g.position.map(f64::from);
            let d: [f64; 3] = std::array::from_fn(|k| pos[k] - center[k]);
            let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            let coeffs: Vec<[f64; 3]> = g.sh.iter().map(|r| r.map(f64::from)).collect();
            let rgb = sh::eval_color(&coeffs, d.map(|v| v / len));
            for k in 0..3 {
                assert!((tape.value(pv.color).data()[k * n + i] - rgb[k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn pack_unpack_round_trip() {
        let mut gs: Vec<Gaussian> = (0..3)
            .map(|i| Gaussian::isotropic([i as f32, 1.0, 2.0], 0.3, 0.4, [0.1, 0.2, 0.3], 1))
            .collect();
        let packed = pack_scene::<f64>(&gs);
        let before = gs.clone();
        gs.iter_mut().for_each(|g| g.position = [9.0; 3]);
        unpack_scene(&packed, &mut gs);
        assert_eq!(gs, before);
    }
}
