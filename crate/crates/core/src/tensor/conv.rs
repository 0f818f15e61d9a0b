//! Direct 2-d cross-correlation kernels (forward and backward).

use crate::error::{shape_err, Result};

/// Stride and per-side zero padding of a convolution.
///
/// With `strict` set, `(size + padding - kernel)` must be a multiple of the
/// stride; otherwise the output size is floored like most frameworks do.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad_top: usize,
    pub pad_bottom: usize,
    pub pad_left: usize,
    pub pad_right: usize,
    pub strict: bool,
}

impl ConvGeom {
    pub fn symmetric(stride: usize, padding: usize) -> Self {
        ConvGeom {
            stride,
            pad_top: padding,
            pad_bottom: padding,
            pad_left: padding,
            pad_right: padding,
            strict: true,
        }
    }

    /// "Same"-style padding for an odd kernel at stride 1.
    pub fn same(kernel: usize) -> Self {
        Self::symmetric(1, (kernel - 1) / 2)
    }

    pub fn out_size(&self, height: usize, width: usize, kh: usize, kw: usize) -> Result<(usize, usize)> {
        if self.stride == 0 {
            return Err(shape_err!("stride must be at least 1"));
        }
        let one = |size: usize, lo: usize, hi: usize, k: usize, axis: &str| -> Result<usize> {
            let span = size + lo + hi;
            if span < k {
                return Err(shape_err!(
                    "kernel {k} larger than padded {axis} extent {span}"
                ));
            }
            if self.strict && (span - k) % self.stride != 0 {
                return Err(shape_err!(
                    "non-integer output {axis}: ({size} + {} - {k}) / {} is fractional",
                    lo + hi,
                    self.stride
                ));
            }
            Ok((span - k) / self.stride + 1)
        };
        Ok((
            one(height, self.pad_top, self.pad_bottom, kh, "height")?,
            one(width, self.pad_left, self.pad_right, kw, "width")?,
        ))
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvDims {
    pub fn new(x: &[usize], k: &[usize], geom: &ConvGeom) -> Result<Self> {
        if x.len() != 4 || k.len() != 4 {
            return Err(shape_err!(
                "conv2d expects input [N,C,H,W] and kernel [O,C,kh,kw], got {x:?} and {k:?}"
            ));
        }
        if x[1] != k[1] {
            return Err(shape_err!(
                "conv2d channel mismatch: input has {} channels, kernel expects {}",
                x[1],
                k[1]
            ));
        }
        let (ho, wo) = geom.out_size(x[2], x[3], k[2], k[3])?;
        Ok(ConvDims {
            n: x[0],
            c: x[1],
            h: x[2],
            w: x[3],
            o: k[0],
            kh: k[2],
            kw: k[3],
            ho,
            wo,
        })
    }

    pub fn macs(&self) -> u64 {
        (self.n * self.o * self.ho * self.wo * self.c * self.kh * self.kw) as u64
    }
}

/// Range of output columns whose input column `ow*stride + kj - pad` is in bounds.
#[inline]
fn col_span(kj: usize, geom: &ConvGeom, w: usize, wo: usize) -> Option<(usize, usize)> {
    let s = geom.stride as isize;
    let off = kj as isize - geom.pad_left as isize;
    // ow*s + off >= 0  and  ow*s + off <= w-1
    let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
    let hi = (w as isize - 1 - off).div_euclid(s);
    let hi = hi.min(wo as isize - 1);
    if hi < lo {
        None
    } else {
        Some((lo as usize, hi as usize))
    }
}

#[inline]
fn in_row(oh: usize, ki: usize, geom: &ConvGeom, h: usize) -> Option<usize> {
    let ih = (oh * geom.stride + ki) as isize - geom.pad_top as isize;
    (ih >= 0 && (ih as usize) < h).then_some(ih as usize)
}

/// Unrolls one image `[C, H, W]` into columns `[C*kh*kw, Ho*Wo]`; padded
/// positions are zero.
fn im2col(xin: &[f64], d: &ConvDims, geom: &ConvGeom, col: &mut [f64]) {
    let plane_in = d.h * d.w;
    let plane_out = d.ho * d.wo;
    let s = geom.stride;
    col.fill(0.0);
    for c in 0..d.c {
        let xc = &xin[c * plane_in..][..plane_in];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let r = (c * d.kh + ki) * d.kw + kj;
                let dst = &mut col[r * plane_out..][..plane_out];
                let Some((lo, hi)) = col_span(kj, geom, d.w, d.wo) else {
                    continue;
                };
                let iw0 = lo * s + kj - geom.pad_left;
                for oh in 0..d.ho {
                    let Some(ih) = in_row(oh, ki, geom, d.h) else {
                        continue;
                    };
                    let row = &mut dst[oh * d.wo + lo..=oh * d.wo + hi];
                    if s == 1 {
                        row.copy_from_slice(&xc[ih * d.w + iw0..][..row.len()]);
                    } else {
                        for (t, v) in row.iter_mut().enumerate() {
                            *v = xc[ih * d.w + iw0 + t * s];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto `[C, H, W]`.
fn col2im(col: &[f64], d: &ConvDims, geom: &ConvGeom, gx: &mut [f64]) {
    let plane_in = d.h * d.w;
    let plane_out = d.ho * d.wo;
    let s = geom.stride;
    for c in 0..d.c {
        let gc = &mut gx[c * plane_in..][..plane_in];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let r = (c * d.kh + ki) * d.kw + kj;
                let src = &col[r * plane_out..][..plane_out];
                let Some((lo, hi)) = col_span(kj, geom, d.w, d.wo) else {
                    continue;
                };
                let iw0 = lo * s + kj - geom.pad_left;
                for oh in 0..d.ho {
                    let Some(ih) = in_row(oh, ki, geom, d.h) else {
                        continue;
                    };
                    let row = &src[oh * d.wo + lo..=oh * d.wo + hi];
                    if s == 1 {
                        for (g, v) in gc[ih * d.w + iw0..][..row.len()].iter_mut().zip(row) {
                            *g += v;
                        }
                    } else {
                        for (t, v) in row.iter().enumerate() {
                            gc[ih * d.w + iw0 + t * s] += v;
                        }
                    }
                }
            }
        }
    }
}

/// A 1x1, stride-1, unpadded convolution reads its input as the column
/// matrix directly.
fn is_pointwise(d: &ConvDims, geom: &ConvGeom) -> bool {
    d.kh == 1
        && d.kw == 1
        && geom.stride == 1
        && geom.pad_top == 0
        && geom.pad_left == 0
        && d.ho == d.h
        && d.wo == d.w
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

pub(crate) fn forward(
    x: &[f64],
    k: &[f64],
    bias: Option<&[f64]>,
    d: &ConvDims,
    geom: &ConvGeom,
) -> Vec<f64> {
    let plane_in = d.h * d.w;
    let plane_out = d.ho * d.wo;
    let rows = d.c * d.kh * d.kw;
    let pointwise = is_pointwise(d, geom);
    let mut col = if pointwise { Vec::new() } else { vec![0.0; rows * plane_out] };
    let mut out = vec![0.0; d.n * d.o * plane_out];
    for n in 0..d.n {
        let xin = &x[n * d.c * plane_in..][..d.c * plane_in];
        let cols: &[f64] = if pointwise {
            xin
        } else {
            im2col(xin, d, geom, &mut col);
            &col
        };
        for o in 0..d.o {
            let y = &mut out[(n * d.o + o) * plane_out..][..plane_out];
            if let Some(b) = bias {
                y.fill(b[o]);
            }
            for (r, wv) in k[o * rows..][..rows].iter().enumerate() {
                if *wv != 0.0 {
                    axpy(y, *wv, &cols[r * plane_out..][..plane_out]);
                }
            }
        }
    }
    out
}

/// Dot product with four independent partial sums so the loop vectorises.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut lanes = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..4 {
            lanes[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

/// Gradients with respect to input, kernel and bias.
pub(crate) fn backward(
    x: &[f64],
    k: &[f64],
    gy: &[f64],
    d: &ConvDims,
    geom: &ConvGeom,
    want: (bool, bool, bool),
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let plane_in = d.h * d.w;
    let plane_out = d.ho * d.wo;
    let rows = d.c * d.kh * d.kw;
    let mut gx = want.0.then(|| vec![0.0; x.len()]);
    let mut gk = want.1.then(|| vec![0.0; k.len()]);
    let gb = want.2.then(|| {
        let mut gb = vec![0.0; d.o];
        for n in 0..d.n {
            for (o, acc) in gb.iter_mut().enumerate() {
                *acc += gy[(n * d.o + o) * plane_out..][..plane_out].iter().sum::<f64>();
            }
        }
        gb
    });
    if gx.is_none() && gk.is_none() {
        return (gx, gk, gb);
    }
    let pointwise = is_pointwise(d, geom);
    let mut col = if pointwise { Vec::new() } else { vec![0.0; rows * plane_out] };
    let mut gcol = vec![0.0; rows * plane_out];
    for n in 0..d.n {
        let g = &gy[n * d.o * plane_out..][..d.o * plane_out];
        if let Some(gk) = gk.as_mut() {
            let xin = &x[n * d.c * plane_in..][..d.c * plane_in];
            let cols: &[f64] = if pointwise {
                xin
            } else {
                im2col(xin, d, geom, &mut col);
                &col
            };
            for o in 0..d.o {
                let go = &g[o * plane_out..][..plane_out];
                for r in 0..rows {
                    gk[o * rows + r] += dot(go, &cols[r * plane_out..][..plane_out]);
                }
            }
        }
        if let Some(gx) = gx.as_mut() {
            gcol.fill(0.0);
            for o in 0..d.o {
                let go = &g[o * plane_out..][..plane_out];
                for r in 0..rows {
                    let wv = k[o * rows + r];
                    if wv != 0.0 {
                        axpy(&mut gcol[r * plane_out..][..plane_out], wv, go);
                    }
                }
            }
            let gxn = &mut gx[n * d.c * plane_in..][..d.c * plane_in];
            if pointwise {
                gxn.iter_mut().zip(&gcol).for_each(|(a, b)| *a += b);
            } else {
                col2im(&gcol, d, geom, gxn);
            }
        }
    }
    (gx, gk, gb)
}
