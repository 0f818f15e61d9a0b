//! Deformable convolution with bilinear sampling (stride 1, "same" size).
//!
//! Offsets are laid out as `[N, 2*S*S, H, W]`; for tap `t` (row-major over
//! the `S x S` kernel) channel `2t` is the column (x) displacement and
//! channel `2t + 1` the row (y) displacement. Samples that fall outside the
//! input read as zero, corner by corner.

use crate::error::{shape_err, Result};

/// Bilinear read of a single `h x w` plane at fractional `(y, x)`.
pub fn bilinear_sample(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let tap = Tap::new(y, x, h, w);
    tap.read(plane)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    idx: [Option<usize>; 4],
    wt: [f64; 4],
    dy: [f64; 4],
    dx: [f64; 4],
    pub cell: (i64, i64),
}

impl Tap {
    #[inline]
    pub fn new(y: f64, x: f64, h: usize, w: usize) -> Self {
        let y0 = y.floor();
        let x0 = x.floor();
        let ly = y - y0;
        let lx = x - x0;
        let (yi, xi) = (y0 as i64, x0 as i64);
        let at = |r: i64, c: i64| -> Option<usize> {
            (r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w)
                .then(|| r as usize * w + c as usize)
        };
        Tap {
            idx: [at(yi, xi), at(yi, xi + 1), at(yi + 1, xi), at(yi + 1, xi + 1)],
            wt: [(1.0 - ly) * (1.0 - lx), (1.0 - ly) * lx, ly * (1.0 - lx), ly * lx],
            dy: [-(1.0 - lx), -lx, 1.0 - lx, lx],
            dx: [-(1.0 - ly), 1.0 - ly, -ly, ly],
            cell: (yi, xi),
        }
    }

    #[inline]
    pub fn read(&self, plane: &[f64]) -> f64 {
        let mut v = 0.0;
        for k in 0..4 {
            if let Some(i) = self.idx[k] {
                v += self.wt[k] * plane[i];
            }
        }
        v
    }

    /// Derivatives of the sampled value with respect to `y` and `x`.
    #[inline]
    fn grads(&self, plane: &[f64]) -> (f64, f64) {
        let (mut gy, mut gx) = (0.0, 0.0);
        for k in 0..4 {
            if let Some(i) = self.idx[k] {
                gy += self.dy[k] * plane[i];
                gx += self.dx[k] * plane[i];
            }
        }
        (gy, gx)
    }

    #[inline]
    fn scatter(&self, plane: &mut [f64], g: f64) {
        for k in 0..4 {
            if let Some(i) = self.idx[k] {
                plane[i] += self.wt[k] * g;
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct DeformDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub s: usize,
}

impl DeformDims {
    pub fn new(x: &[usize], k: &[usize], off: &[usize]) -> Result<Self> {
        if x.len() != 4 || k.len() != 4 || off.len() != 4 {
            return Err(shape_err!(
                "deform_conv2d expects 4-d input, kernel and offsets, got {x:?}, {k:?}, {off:?}"
            ));
        }
        if k[2] != k[3] || k[2] % 2 == 0 {
            return Err(shape_err!(
                "deform_conv2d needs an odd square kernel, got {}x{}",
                k[2],
                k[3]
            ));
        }
        if x[1] != k[1] {
            return Err(shape_err!(
                "deform_conv2d channel mismatch: input {} vs kernel {}",
                x[1],
                k[1]
            ));
        }
        let s = k[2];
        if off[1] != 2 * s * s {
            return Err(shape_err!(
                "deform_conv2d offsets need 2*S*S = {} channels for S = {s}, got {}",
                2 * s * s,
                off[1]
            ));
        }
        if off[0] != x[0] || off[2] != x[2] || off[3] != x[3] {
            return Err(shape_err!(
                "deform_conv2d offsets {off:?} do not match input {x:?}"
            ));
        }
        Ok(DeformDims {
            n: x[0],
            c: x[1],
            h: x[2],
            w: x[3],
            o: k[0],
            s,
        })
    }

    pub fn macs(&self) -> u64 {
        let taps = self.s * self.s;
        let hw = self.h * self.w;
        // weighted sum plus four-corner interpolation per sampled value
        (self.n * hw * taps * self.c * (self.o + 4)) as u64
    }
}

fn taps_for(off: &[f64], d: &DeformDims, n: usize) -> Vec<Tap> {
    let hw = d.h * d.w;
    let ss = d.s * d.s;
    let pad = (d.s - 1) / 2;
    let mut taps = Vec::with_capacity(ss * hw);
    for t in 0..ss {
        let (ki, kj) = (t / d.s, t % d.s);
        let ox = &off[(n * 2 * ss + 2 * t) * hw..][..hw];
        let oy = &off[(n * 2 * ss + 2 * t + 1) * hw..][..hw];
        for r in 0..d.h {
            for c in 0..d.w {
                let p = r * d.w + c;
                let y = (r + ki) as f64 - pad as f64 + oy[p];
                let x = (c + kj) as f64 - pad as f64 + ox[p];
                taps.push(Tap::new(y, x, d.h, d.w));
            }
        }
    }
    taps
}

fn columns(x: &[f64], taps: &[Tap], d: &DeformDims, n: usize) -> Vec<f64> {
    let hw = d.h * d.w;
    let ss = d.s * d.s;
    let mut col = vec![0.0; d.c * ss * hw];
    for c in 0..d.c {
        let plane = &x[(n * d.c + c) * hw..][..hw];
        for t in 0..ss {
            let dst = &mut col[(c * ss + t) * hw..][..hw];
            for (v, tap) in dst.iter_mut().zip(&taps[t * hw..(t + 1) * hw]) {
                *v = tap.read(plane);
            }
        }
    }
    col
}

/// Forward pass; also returns a hash of the integer sample cells so callers
/// can detect when a perturbation crosses a bilinear kink.
pub(crate) fn forward(x: &[f64], k: &[f64], off: &[f64], d: &DeformDims) -> (Vec<f64>, u64) {
    let hw = d.h * d.w;
    let ck = d.c * d.s * d.s;
    let mut out = vec![0.0; d.n * d.o * hw];
    let mut sig = 0xcbf2_9ce4_8422_2325u64;
    for n in 0..d.n {
        let taps = taps_for(off, d, n);
        for tap in &taps {
            sig = (sig ^ (tap.cell.0 as u64).wrapping_mul(0x9e37_79b9) ^ (tap.cell.1 as u64))
                .wrapping_mul(0x0100_0000_01b3);
        }
        let col = columns(x, &taps, d, n);
        for o in 0..d.o {
            let y = &mut out[(n * d.o + o) * hw..][..hw];
            for j in 0..ck {
                let wv = k[o * ck + j];
                if wv == 0.0 {
                    continue;
                }
                for (yv, cv) in y.iter_mut().zip(&col[j * hw..(j + 1) * hw]) {
                    *yv += wv * cv;
                }
            }
        }
    }
    (out, sig)
}

pub(crate) struct DeformGrads {
    pub input: Option<Vec<f64>>,
    pub kernel: Option<Vec<f64>>,
    pub offsets: Option<Vec<f64>>,
}

pub(crate) fn backward(
    x: &[f64],
    k: &[f64],
    off: &[f64],
    gy: &[f64],
    d: &DeformDims,
    want: (bool, bool, bool),
) -> DeformGrads {
    let hw = d.h * d.w;
    let ss = d.s * d.s;
    let ck = d.c * ss;
    let mut gx = want.0.then(|| vec![0.0; x.len()]);
    let mut gk = want.1.then(|| vec![0.0; k.len()]);
    let mut goff = want.2.then(|| vec![0.0; off.len()]);
    for n in 0..d.n {
        let taps = taps_for(off, d, n);
        let g = &gy[n * d.o * hw..][..d.o * hw];
        if let Some(gk) = gk.as_mut() {
            let col = columns(x, &taps, d, n);
            for o in 0..d.o {
                let go = &g[o * hw..][..hw];
                for j in 0..ck {
                    gk[o * ck + j] += go.iter().zip(&col[j * hw..(j + 1) * hw]).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
        if gx.is_none() && goff.is_none() {
            continue;
        }
        // gradient with respect to the sampled columns
        let mut gcol = vec![0.0; ck * hw];
        for o in 0..d.o {
            let go = &g[o * hw..][..hw];
            for j in 0..ck {
                let wv = k[o * ck + j];
                if wv == 0.0 {
                    continue;
                }
                for (gc, gv) in gcol[j * hw..(j + 1) * hw].iter_mut().zip(go) {
                    *gc += wv * gv;
                }
            }
        }
        for c in 0..d.c {
            let base = (n * d.c + c) * hw;
            for t in 0..ss {
                let gc = &gcol[(c * ss + t) * hw..][..hw];
                let tp = &taps[t * hw..(t + 1) * hw];
                if let Some(goff) = goff.as_mut() {
                    let plane = &x[base..base + hw];
                    let (ox_base, oy_base) = ((n * 2 * ss + 2 * t) * hw, (n * 2 * ss + 2 * t + 1) * hw);
                    for p in 0..hw {
                        if gc[p] == 0.0 {
                            continue;
                        }
                        let (dyv, dxv) = tp[p].grads(plane);
                        goff[oy_base + p] += gc[p] * dyv;
                        goff[ox_base + p] += gc[p] * dxv;
                    }
                }
                if let Some(gx) = gx.as_mut() {
                    let plane = &mut gx[base..base + hw];
                    for p in 0..hw {
                        if gc[p] != 0.0 {
                            tp[p].scatter(plane, gc[p]);
                        }
                    }
                }
            }
        }
    }
    DeformGrads {
        input: gx,
        kernel: gk,
        offsets: goff,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_midpoint_and_out_of_bounds() {
        let plane = [0.0, 1.0, 2.0, 3.0]; // 1 x 4 ramp
        assert_eq!(bilinear_sample(&plane, 1, 4, 0.0, 1.5), 1.5);
        assert_eq!(bilinear_sample(&plane, 1, 4, 0.0, -1.0), 0.0);
        // half a cell past the edge keeps half the edge value
        assert_eq!(bilinear_sample(&plane, 1, 4, 0.0, 3.5), 1.5);
    }

    #[test]
    fn rejects_offset_channel_mismatch() {
        assert!(DeformDims::new(&[1, 2, 4, 4], &[3, 2, 3, 3], &[1, 9, 4, 4]).is_err());
        assert!(DeformDims::new(&[1, 2, 4, 4], &[3, 2, 3, 3], &[1, 18, 4, 4]).is_ok());
        assert!(DeformDims::new(&[1, 2, 4, 4], &[3, 2, 5, 5], &[1, 18, 4, 4]).is_err());
    }
}
