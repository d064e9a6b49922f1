//! Raw numeric kernels shared by the tape's forward and backward rules.

use super::Real;

/// `c = a · b + beta · c` for row-major operands; `a_t`/`b_t` mean the
/// operand is stored transposed (`a` as k×m, `b` as n×k).
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    T::gemm_raw(
        m,
        k,
        n,
        T::one(),
        a,
        rsa,
        csa,
        b,
        rsb,
        csb,
        beta,
        c,
        n as isize,
        1,
    );
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (h, w) = (g.h, g.w);
    let hw = h * w;
    let (ph, pw) = ((g.kh / 2) as isize, (g.kw / 2) as isize);
    let mut cols = vec![T::zero(); g.patch() * hw];
    for c in 0..g.cin {
        let plane = &x[c * hw..(c + 1) * hw];
        for dy in 0..g.kh {
            for dx in 0..g.kw {
                let row = (c * g.kh + dy) * g.kw + dx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let oy = dy as isize - ph;
                let ox = dx as isize - pw;
                for y in 0..h {
                    let sy = y as isize + oy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let dst_row = &mut dst[y * w..(y + 1) * w];
                    let x_lo = (-ox).max(0) as usize;
                    let x_hi = ((w as isize) - ox).min(w as isize).max(0) as usize;
                    for xx in x_lo..x_hi {
                        dst_row[xx] = src_row[(xx as isize + ox) as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx_out: &mut [T]) {
    let (h, w) = (g.h, g.w);
    let hw = h * w;
    let (ph, pw) = ((g.kh / 2) as isize, (g.kw / 2) as isize);
    for c in 0..g.cin {
        let plane = &mut dx_out[c * hw..(c + 1) * hw];
        for dy in 0..g.kh {
            for dx in 0..g.kw {
                let row = (c * g.kh + dy) * g.kw + dx;
                let src = &cols[row * hw..(row + 1) * hw];
                let oy = dy as isize - ph;
                let ox = dx as isize - pw;
                for y in 0..h {
                    let sy = y as isize + oy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x_lo = (-ox).max(0) as usize;
                    let x_hi = ((w as isize) - ox).min(w as isize).max(0) as usize;
                    for xx in x_lo..x_hi {
                        plane[sy as usize * w + (xx as isize + ox) as usize] +=
                            src[y * w + xx];
                    }
                }
            }
        }
    }
}

/// Stride-1 "same" convolution of `x` [cin,h,w] with `k` [cout,cin,kh,kw].
pub fn conv2d_forward<T: Real>(
    x: &[T],
    k: &[T],
    bias: Option<&[T]>,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
) -> Vec<T> {
    let g = ConvGeom {
        cin,
        cout,
        h,
        w,
        kh,
        kw,
    };
    conv_forward(x, k, bias, &g)
}

pub(crate) fn conv_forward<T: Real>(x: &[T], k: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let hw = g.h * g.w;
    let mut out = vec![T::zero(); g.cout * hw];
    if let Some(b) = bias {
        for (o, &bv) in b.iter().enumerate() {
            out[o * hw..(o + 1) * hw].fill(bv);
        }
    }
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    if g.is_pointwise() {
        gemm(g.cout, g.patch(), hw, k, false, x, false, beta, &mut out);
    } else {
        let cols = im2col(x, g);
        gemm(g.cout, g.patch(), hw, k, false, &cols, false, beta, &mut out);
    }
    out
}

/// Gradients of a same-padded convolution: (d input, d kernel, d bias).
pub(crate) fn conv_backward<T: Real>(
    x: &[T],
    k: &[T],
    grad_out: &[T],
    g: &ConvGeom,
    need_x: bool,
    need_k: bool,
    need_b: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let hw = g.h * g.w;
    let patch = g.patch();
    let dk = need_k.then(|| {
        let mut dk = vec![T::zero(); g.cout * patch];
        if g.is_pointwise() {
            gemm(g.cout, hw, patch, grad_out, false, x, true, T::zero(), &mut dk);
        } else {
            let cols = im2col(x, g);
            gemm(g.cout, hw, patch, grad_out, false, &cols, true, T::zero(), &mut dk);
        }
        dk
    });
    let dx = need_x.then(|| {
        let mut dcols = vec![T::zero(); patch * hw];
        gemm(patch, g.cout, hw, k, true, grad_out, false, T::zero(), &mut dcols);
        if g.is_pointwise() {
            dcols
        } else {
            let mut dx = vec![T::zero(); g.cin * hw];
            col2im(&dcols, g, &mut dx);
            dx
        }
    });
    let db = need_b.then(|| {
        grad_out
            .chunks(hw)
            .map(|row| row.iter().copied().sum())
            .collect()
    });
    (dx, dk, db)
}

/// 2×2 stride-2 max pool over [c,h,w]; returns values and flat argmax.
pub(crate) fn maxpool2_forward<T: Real>(x: &[T], c: usize, h: usize, w: usize) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = base + 2 * y * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * w + 2 * xx + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Source taps of a half-pixel bilinear resample along one axis.
pub(crate) fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of [c,h,w] to [c,oh,ow] (half-pixel centers, edge clamp).
pub fn bilinear_resize_forward<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::lit(fy);
            for (xx, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::lit(fx);
                let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                dst[y * ow + xx] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    out
}

pub(crate) fn bilinear_resize_backward<T: Real>(
    g: &[T],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut dx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let src = &g[ch * oh * ow..(ch + 1) * oh * ow];
        let dst = &mut dx[ch * h * w..(ch + 1) * h * w];
        for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::lit(fy);
            for (xx, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::lit(fx);
                let v = src[y * ow + xx];
                dst[y0 * w + x0] += v * (T::one() - fy) * (T::one() - fx);
                dst[y0 * w + x1] += v * (T::one() - fy) * fx;
                dst[y1 * w + x0] += v * fy * (T::one() - fx);
                dst[y1 * w + x1] += v * fy * fx;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn ones_kernel_counts_neighbours() {
        let x = vec![1.0f64; 16];
        let k = vec![1.0f64; 9];
        let y = conv2d_forward(&x, &k, None, 1, 1, 4, 4, 3, 3);
        assert_eq!(y[0], 4.0);
        assert_eq!(y[1], 6.0);
        assert_eq!(y[5], 9.0);
        assert_eq!(y[15], 4.0);
    }

    #[test]
    fn identity_resize_is_exact() {
        let x: Vec<f64> = (0..12).map(|v| v as f64).collect();
        assert_eq!(bilinear_resize_forward(&x, 1, 3, 4, 3, 4), x);
    }

    #[test]
    fn maxpool_picks_largest() {
        let x = [1.0f32, 5.0, 2.0, 3.0];
        let (v, a) = maxpool2_forward(&x, 1, 2, 2);
        assert_eq!(v, vec![5.0]);
        assert_eq!(a, vec![1]);
    }
}
