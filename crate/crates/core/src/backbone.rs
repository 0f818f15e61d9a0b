//! Convolutional stem, dynamic-convolution downsampling and a 3-level FPN.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, Conv2d, Linear, ParamStore};
use crate::tensor::{ConvGeom, Tape, Var};

/// Two 3x3 convolutions with ReLU, `C_in -> D -> D`.
#[derive(Clone, Copy, Debug)]
pub struct Stem {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl Stem {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, in_ch: usize, d: usize) -> Self {
        let g = ConvGeom::same(3);
        Stem {
            conv1: Conv2d::new(store, rng, "stem.conv1", in_ch, d, (3, 3), g, true),
            conv2: Conv2d::new(store, rng, "stem.conv2", d, d, (3, 3), g, true),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.conv1.forward(tape, p, x)?;
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, p, h)?;
        Ok(tape.relu(h))
    }
}

/// Kernel sizes of the parallel dynamic-convolution branches.
pub const BRANCH_KERNELS: [usize; 3] = [1, 2, 4];

/// Padding for kernel `k` at stride `s` so every branch yields `size / s`:
/// the total `k - s` is split with the extra row/column on the top/left.
/// A negative total (a 1x1 kernel at stride 2) pads nothing and floors.
pub fn branch_geom(kernel: usize, stride: usize) -> ConvGeom {
    if kernel >= stride {
        let total = kernel - stride;
        let hi = total.div_ceil(2);
        let lo = total / 2;
        ConvGeom {
            stride,
            pad_top: hi,
            pad_bottom: lo,
            pad_left: hi,
            pad_right: lo,
            strict: true,
        }
    } else {
        ConvGeom {
            strict: false,
            ..ConvGeom::symmetric(stride, 0)
        }
    }
}

/// Softmax-weighted mixture of three strided convolutions.
#[derive(Clone, Debug)]
pub struct DynamicDownsample {
    pub branches: [Conv2d; 3],
    pub attention: Linear,
    pub factor: usize,
}

impl DynamicDownsample {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, d: usize, factor: usize) -> Self {
        let branches = BRANCH_KERNELS.map(|k| {
            Conv2d::new(
                store,
                rng,
                &format!("down.k{k}"),
                d,
                d,
                (k, k),
                branch_geom(k, factor),
                true,
            )
        });
        DynamicDownsample {
            branches,
            attention: Linear::new(store, rng, "down.attention", d, 3),
            factor,
        }
    }

    fn check(&self, tape: &Tape, x: Var) -> Result<()> {
        let s = tape.shape(x);
        if s.len() != 4 || self.factor == 0 || s[2] % self.factor != 0 || s[3] % self.factor != 0 {
            return Err(Error::Shape(format!(
                "dynamic downsample by {} needs spatial dims divisible by it, got {s:?}",
                self.factor
            )));
        }
        Ok(())
    }

    /// Branch weights `[1, 3]` (softmax of a linear map of the pooled input).
    pub fn branch_weights(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let pooled = tape.global_avg_pool(x)?;
        let logits = self.attention.forward(tape, p, pooled)?;
        tape.softmax(logits)
    }

    /// The three branch outputs, each `[1, D, H/f, W/f]`.
    pub fn branch_outputs(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<[Var; 3]> {
        self.check(tape, x)?;
        let a = self.branches[0].forward(tape, p, x)?;
        let b = self.branches[1].forward(tape, p, x)?;
        let c = self.branches[2].forward(tape, p, x)?;
        Ok([a, b, c])
    }

    /// `sum_i w_i * branch_i(x)` with explicit weights `[1, 3]`.
    pub fn mix(&self, tape: &mut Tape, outs: [Var; 3], weights: Var) -> Result<Var> {
        let mut acc = tape.scale_by(outs[0], weights, 0)?;
        for (i, o) in outs.iter().enumerate().skip(1) {
            let t = tape.scale_by(*o, weights, i)?;
            acc = tape.add(acc, t)?;
        }
        Ok(acc)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let outs = self.branch_outputs(tape, p, x)?;
        let w = self.branch_weights(tape, p, x)?;
        self.mix(tape, outs, w)
    }
}

/// Three pyramid levels at strides 1, 2 and 4 of the input.
#[derive(Clone, Copy, Debug)]
pub struct PyramidFeatures {
    pub levels: [Var; 3],
}

#[derive(Clone, Debug)]
pub struct Fpn {
    pub bottom_up: [Conv2d; 3],
    pub lateral: [Conv2d; 3],
}

impl Fpn {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, d: usize) -> Self {
        let bottom_up = [0, 1, 2].map(|i| Conv2d::new(store, rng, &format!("fpn.c{i}"), d, d, (3, 3), ConvGeom::same(3), true));
        let lateral = [0, 1, 2].map(|i| Conv2d::new(store, rng, &format!("fpn.lat{i}"), d, d, (1, 1), ConvGeom::same(1), true));
        Fpn { bottom_up, lateral }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<PyramidFeatures> {
        let s = tape.shape(x);
        if s.len() != 4 || s[2] % 4 != 0 || s[3] % 4 != 0 {
            return Err(Error::Shape(format!("fpn input needs spatial dims divisible by 4, got {s:?}")));
        }
        let c0 = self.bottom_up[0].forward(tape, p, x)?;
        let c0 = tape.relu(c0);
        let d1 = tape.max_pool2(c0)?;
        let c1 = self.bottom_up[1].forward(tape, p, d1)?;
        let c1 = tape.relu(c1);
        let d2 = tape.max_pool2(c1)?;
        let c2 = self.bottom_up[2].forward(tape, p, d2)?;
        let c2 = tape.relu(c2);

        let p2 = self.lateral[2].forward(tape, p, c2)?;
        let up2 = tape.upsample2(p2)?;
        let l1 = self.lateral[1].forward(tape, p, c1)?;
        let p1 = tape.add(l1, up2)?;
        let up1 = tape.upsample2(p1)?;
        let l0 = self.lateral[0].forward(tape, p, c0)?;
        let p0 = tape.add(l0, up1)?;
        Ok(PyramidFeatures { levels: [p0, p1, p2] })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn branch_geometries_agree_on_output_size() {
        for factor in [1, 2, 4] {
            for k in BRANCH_KERNELS {
                let g = branch_geom(k, factor);
                assert_eq!(g.out_size(16, 8, k, k).unwrap(), (16 / factor, 8 / factor), "k={k} f={factor}");
            }
        }
        let g = branch_geom(4, 1);
        assert_eq!((g.pad_top, g.pad_bottom), (2, 1));
    }
}
