//! Forward and backward kernels on raw buffers. The tape in `mod.rs` owns the
//! bookkeeping; everything here is a pure function of its slices.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Scalar};

/// Static geometry of one 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize, groups: usize) -> Result<Self> {
        let (cin, h, w) = match *input {
            [c, h, w] => (c, h, w),
            _ => return Err(Error::invalid(format!("conv2d input must be [Cin,H,W], got {input:?}"))),
        };
        let (cout, cpg, kh, kw) = match *weight {
            [a, b, c, d] => (a, b, c, d),
            _ => {
                return Err(Error::invalid(format!(
                    "conv2d weight must be [Cout,Cin/groups,k,k], got {weight:?}"
                )))
            }
        };
        if groups == 0 || cin % groups != 0 || cout % groups != 0 {
            return Err(Error::invalid(format!(
                "conv2d groups={groups} must divide Cin={cin} and Cout={cout}"
            )));
        }
        if cpg * groups != cin || kh != kw {
            return Err(Error::invalid(format!(
                "conv2d weight {weight:?} does not match input {input:?} with groups={groups}"
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        let k = kh;
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        // Output size floors, as in the usual deep-learning convention, so a
        // 3x3 stride-2 pad-1 conv halves an even resolution.
        if hp < k || wp < k {
            return Err(Error::invalid(format!(
                "conv2d kernel {k} with padding {pad} does not fit input {input:?}"
            )));
        }
        Ok(ConvGeom {
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            groups,
            ho: (hp - k) / stride + 1,
            wo: (wp - k) / stride + 1,
        })
    }

    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    fn is_depthwise(&self) -> bool {
        self.cin_g() == 1 && self.cout_g() == 1
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.cin_g() * self.k * self.k
    }
}

/// Gather sliding windows of one channel group into a `[cin_g·k·k, ho·wo]` matrix.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    let plane = g.ho * g.wo;
    for c in 0..g.cin_g() {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * s + ki) as isize - p;
                    let out = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * s + kj) as isize - p;
                        *o = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add the adjoint of [`im2col`].
fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    let plane = g.ho * g.wo;
    for c in 0..g.cin_g() {
        let dxc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * s + ki) as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dxc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * s + kj) as isize - p;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let plane = g.ho * g.wo;
    let mut out = vec![T::zero(); g.cout * plane];
    if g.is_depthwise() {
        depthwise_forward(x, w, g, &mut out);
    } else {
        let rows = g.col_rows();
        let mut col = if g.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); rows * plane]
        };
        let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
        for grp in 0..g.groups {
            let xg = &x[grp * cin_g * g.h * g.w..(grp + 1) * cin_g * g.h * g.w];
            let cols: &[T] = if g.is_pointwise() {
                xg
            } else {
                im2col(xg, g, &mut col);
                &col
            };
            let wg = &w[grp * cout_g * rows..(grp + 1) * cout_g * rows];
            let og = &mut out[grp * cout_g * plane..(grp + 1) * cout_g * plane];
            gemm(cout_g, rows, plane, wg, false, cols, false, og, false);
        }
    }
    if let Some(b) = bias {
        for (co, chunk) in out.chunks_mut(plane).enumerate() {
            for v in chunk {
                *v = *v + b[co];
            }
        }
    }
    out
}

fn depthwise_forward<T: Scalar>(x: &[T], w: &[T], g: &ConvGeom, out: &mut [T]) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    for c in 0..g.cin {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        let wc = &w[c * k * k..(c + 1) * k * k];
        let oc = &mut out[c * g.ho * g.wo..(c + 1) * g.ho * g.wo];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let mut acc = T::zero();
                for ki in 0..k {
                    let iy = (oy * s + ki) as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kj in 0..k {
                        let ix = (ox * s + kj) as isize - p;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        acc = acc + wc[ki * k + kj] * xc[iy as usize * g.w + ix as usize];
                    }
                }
                oc[oy * g.wo + ox] = acc;
            }
        }
    }
}

/// Gradients of a convolution. Returns `(dx, dw, db)`, each only when requested.
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    need: [bool; 3],
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let plane = g.ho * g.wo;
    let mut dx = need[0].then(|| vec![T::zero(); x.len()]);
    let mut dw = need[1].then(|| vec![T::zero(); w.len()]);
    let db = need[2].then(|| {
        dy.chunks(plane)
            .map(|c| c.iter().copied().sum::<T>())
            .collect::<Vec<T>>()
    });

    if g.is_depthwise() {
        depthwise_backward(x, w, dy, g, dx.as_deref_mut(), dw.as_deref_mut());
        return (dx, dw, db);
    }

    let rows = g.col_rows();
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let chan = g.h * g.w;
    let mut col = vec![T::zero(); if g.is_pointwise() { 0 } else { rows * plane }];
    let mut dcol = vec![T::zero(); if g.is_pointwise() { 0 } else { rows * plane }];
    for grp in 0..g.groups {
        let xg = &x[grp * cin_g * chan..(grp + 1) * cin_g * chan];
        let wg = &w[grp * cout_g * rows..(grp + 1) * cout_g * rows];
        let dyg = &dy[grp * cout_g * plane..(grp + 1) * cout_g * plane];
        if let Some(dw) = dw.as_deref_mut() {
            let cols: &[T] = if g.is_pointwise() {
                xg
            } else {
                im2col(xg, g, &mut col);
                &col
            };
            let dwg = &mut dw[grp * cout_g * rows..(grp + 1) * cout_g * rows];
            gemm(cout_g, plane, rows, dyg, false, cols, true, dwg, false);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxg = &mut dx[grp * cin_g * chan..(grp + 1) * cin_g * chan];
            if g.is_pointwise() {
                gemm(rows, cout_g, plane, wg, true, dyg, false, dxg, false);
            } else {
                gemm(rows, cout_g, plane, wg, true, dyg, false, &mut dcol, false);
                col2im(&dcol, g, dxg);
            }
        }
    }
    (dx, dw, db)
}

fn depthwise_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    let chan = g.h * g.w;
    for c in 0..g.cin {
        let xc = &x[c * chan..(c + 1) * chan];
        let wc = &w[c * k * k..(c + 1) * k * k];
        let dyc = &dy[c * g.ho * g.wo..(c + 1) * g.ho * g.wo];
        for ki in 0..k {
            for kj in 0..k {
                let mut wacc = T::zero();
                for oy in 0..g.ho {
                    let iy = (oy * s + ki) as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * s + kj) as isize - p;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let xi = iy as usize * g.w + ix as usize;
                        let d = dyc[oy * g.wo + ox];
                        wacc = wacc + xc[xi] * d;
                        if let Some(dx) = dx.as_deref_mut() {
                            dx[c * chan + xi] = dx[c * chan + xi] + wc[ki * k + kj] * d;
                        }
                    }
                }
                if let Some(dw) = dw.as_deref_mut() {
                    dw[c * k * k + ki * k + kj] = wacc;
                }
            }
        }
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
pub fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax_forward<T: Scalar>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, n, inner) = axis_extents(shape, axis);
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let mut m = T::neg_infinity();
            for j in 0..n {
                m = m.max(x[at(j)]);
            }
            let mut z = T::zero();
            for j in 0..n {
                let e = (x[at(j)] - m).exp();
                y[at(j)] = e;
                z = z + e;
            }
            for j in 0..n {
                y[at(j)] = y[at(j)] / z;
            }
        }
    }
    y
}

pub fn softmax_backward<T: Scalar>(y: &[T], dy: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, n, inner) = axis_extents(shape, axis);
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let dot: T = (0..n).map(|j| dy[at(j)] * y[at(j)]).sum();
            for j in 0..n {
                dx[at(j)] = y[at(j)] * (dy[at(j)] - dot);
            }
        }
    }
    dx
}

/// Channel-wise layer norm of a `[C, H·W]` buffer. Returns `(y, xhat, rstd)`.
pub fn layer_norm_forward<T: Scalar>(x: &[T], c: usize, gamma: &[T], beta: &[T], eps: T) -> (Vec<T>, Vec<T>, Vec<T>) {
    let hw = x.len() / c;
    let cn = T::from_f64(c as f64);
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); hw];
    let mut y = vec![T::zero(); x.len()];
    for p in 0..hw {
        let mean = (0..c).map(|ch| x[ch * hw + p]).sum::<T>() / cn;
        let var = (0..c)
            .map(|ch| {
                let d = x[ch * hw + p] - mean;
                d * d
            })
            .sum::<T>()
            / cn;
        let r = T::one() / (var + eps).sqrt();
        rstd[p] = r;
        for ch in 0..c {
            let i = ch * hw + p;
            xhat[i] = (x[i] - mean) * r;
            y[i] = gamma[ch] * xhat[i] + beta[ch];
        }
    }
    (y, xhat, rstd)
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward<T: Scalar>(
    dy: &[T],
    xhat: &[T],
    rstd: &[T],
    gamma: &[T],
    c: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let hw = dy.len() / c;
    let cn = T::from_f64(c as f64);
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        for p in 0..hw {
            let i = ch * hw + p;
            dgamma[ch] = dgamma[ch] + dy[i] * xhat[i];
            dbeta[ch] = dbeta[ch] + dy[i];
        }
    }
    for p in 0..hw {
        let mut sum_d = T::zero();
        let mut sum_dx = T::zero();
        for ch in 0..c {
            let i = ch * hw + p;
            let d = dy[i] * gamma[ch];
            sum_d = sum_d + d;
            sum_dx = sum_dx + d * xhat[i];
        }
        for ch in 0..c {
            let i = ch * hw + p;
            let d = dy[i] * gamma[ch];
            dx[i] = rstd[p] / cn * (cn * d - sum_d - xhat[i] * sum_dx);
        }
    }
    (dx, dgamma, dbeta)
}

/// `[C,H,W] -> [C·r², H/r, W/r]`; output channel `c·r² + i·r + j` holds
/// input pixels at offset `(i, j)` of each `r×r` cell.
pub fn pixel_unshuffle<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, r: usize) -> Vec<T> {
    let (ho, wo) = (h / r, w / r);
    let mut y = vec![T::zero(); x.len()];
    for ch in 0..c {
        for i in 0..r {
            for j in 0..r {
                let oc = ch * r * r + i * r + j;
                for oy in 0..ho {
                    for ox in 0..wo {
                        y[(oc * ho + oy) * wo + ox] = x[(ch * h + oy * r + i) * w + ox * r + j];
                    }
                }
            }
        }
    }
    y
}

/// Inverse of [`pixel_unshuffle`]: `[C·r², H, W] -> [C, H·r, W·r]`.
pub fn pixel_shuffle<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, r: usize) -> Vec<T> {
    let co = c / (r * r);
    let (ho, wo) = (h * r, w * r);
    let mut y = vec![T::zero(); x.len()];
    for ch in 0..co {
        for i in 0..r {
            for j in 0..r {
                let ic = ch * r * r + i * r + j;
                for iy in 0..h {
                    for ix in 0..w {
                        y[(ch * ho + iy * r + i) * wo + ix * r + j] = x[(ic * h + iy) * w + ix];
                    }
                }
            }
        }
    }
    y
}

pub fn transpose2d<T: Scalar>(x: &[T], m: usize, n: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for i in 0..m {
        for j in 0..n {
            y[j * m + i] = x[i * n + j];
        }
    }
    y
}

/// Exact (erf-based) GELU and its derivative.
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    half * x * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let cdf = half * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-half * x * x).exp() * T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry_rejects_bad_groups_and_tiling() {
        assert!(ConvGeom::new(&[3, 4, 4], &[4, 1, 3, 3], 1, 1, 3).is_err());
        assert!(ConvGeom::new(&[4, 4, 4], &[4, 2, 3, 3], 1, 1, 3).is_err());
        let g = ConvGeom::new(&[2, 2, 2], &[4, 2, 5, 5], 1, 1, 1).unwrap_err();
        assert!(g.to_string().contains("does not fit"));
    }

    #[test]
    fn strided_conv_output_size() {
        let g = ConvGeom::new(&[2, 9, 9], &[4, 2, 3, 3], 2, 1, 1).unwrap();
        assert_eq!((g.ho, g.wo), (5, 5));
        let g = ConvGeom::new(&[2, 32, 32], &[4, 2, 3, 3], 2, 1, 1).unwrap();
        assert_eq!((g.ho, g.wo), (16, 16));
    }

    #[test]
    fn gelu_closed_form_values() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu_grad(0.0f64) - 0.5).abs() < 1e-15);
        assert!((gelu(1.0f64) - 0.841_344_746_068_542_9).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0f32), 0.5);
        assert_eq!(sigmoid(-1000.0f32), 0.0);
        assert_eq!(sigmoid(1000.0f32), 1.0);
    }
}
