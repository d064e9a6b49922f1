//! Real spherical-harmonic basis up to degree 3 (3DGS sign conventions).

use crate::tensor::Real;

pub const SH_C0: f64 = 0.28209479177387814;
pub const SH_C1: f64 = 0.4886025119029199;
pub const SH_C2: [f64; 5] = [
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
];
pub const SH_C3: [f64; 7] = [
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
];

/// Offset added to the SH expansion before clamping.
pub const SH_OFFSET: f64 = 0.5;

pub fn coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Degree whose coefficient count is `count`, if any.
pub fn degree_for_count(count: usize) -> Option<usize> {
    (0..=3).find(|&d| coeff_count(d) == count)
}

/// Basis values `Y_l(dir)` for the first `coeff_count(degree)` functions.
pub fn basis<T: Real>(degree: usize, dir: [T; 3]) -> Vec<T> {
    let c = T::lit;
    let [x, y, z] = dir;
    let mut out = vec![c(SH_C0)];
    if degree >= 1 {
        out.extend([-c(SH_C1) * y, c(SH_C1) * z, -c(SH_C1) * x]);
    }
    if degree >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        out.extend([
            c(SH_C2[0]) * x * y,
            c(SH_C2[1]) * y * z,
            c(SH_C2[2]) * (c(2.0) * zz - xx - yy),
            c(SH_C2[3]) * x * z,
            c(SH_C2[4]) * (xx - yy),
        ]);
    }
    if degree >= 3 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        out.extend([
            c(SH_C3[0]) * y * (c(3.0) * xx - yy),
            c(SH_C3[1]) * x * y * z,
            c(SH_C3[2]) * y * (c(4.0) * zz - xx - yy),
            c(SH_C3[3]) * z * (c(2.0) * zz - c(3.0) * xx - c(3.0) * yy),
            c(SH_C3[4]) * x * (c(4.0) * zz - xx - yy),
            c(SH_C3[5]) * z * (xx - yy),
            c(SH_C3[6]) * x * (xx - c(3.0) * yy),
        ]);
    }
    out
}

/// `max(0.5 + Σ c_l Y_l(dir), 0)` per channel.
pub fn eval_color<T: Real>(coeffs: &[[T; 3]], dir: [T; 3]) -> [T; 3] {
    let degree = degree_for_count(coeffs.len()).expect("SH coefficient count");
    let y = basis(degree, dir);
    let mut rgb = [T::lit(SH_OFFSET); 3];
    for (row, &yl) in coeffs.iter().zip(&y) {
        for ch in 0..3 {
            rgb[ch] += row[ch] * yl;
        }
    }
    rgb.map(|v| v.max(T::zero()))
}
