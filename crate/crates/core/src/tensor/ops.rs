//! Differentiable operations recorded on the [`Tape`].

use super::conv::{self, ConvDims, ConvGeom};
use super::deform::{self, DeformDims};
use super::tape::{GateGrad, Tape, Var};
use super::{dims4, expect_rank, Tensor};
use crate::error::{shape_err, Error, Result};

pub(crate) enum Op {
    Leaf,
    Conv {
        x: Var,
        k: Var,
        b: Option<Var>,
        geom: ConvGeom,
        dims: ConvDims,
    },
    Deform {
        x: Var,
        k: Var,
        off: Var,
        dims: DeformDims,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine {
        x: Var,
        scale: f64,
    },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softplus(Var),
    Concat {
        a: Var,
        b: Var,
        ca: usize,
        cb: usize,
        plane: usize,
    },
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    AddBias {
        x: Var,
        b: Var,
    },
    Reshape(Var),
    MeanBatch {
        x: Var,
        n: usize,
    },
    MeanStack(Vec<Var>),
    Gate {
        scores: Var,
        offset: Var,
        mode: GateGrad,
    },
    GateApply {
        x: Var,
        g: Var,
        m: usize,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool2(Var),
    Upsample2(Var),
    Resize {
        x: Var,
        out_h: usize,
        out_w: usize,
    },
    GlobalAvgPool(Var),
    Softmax(Var),
    ScaleBy {
        x: Var,
        s: Var,
        idx: usize,
    },
    PillarMax {
        feats: Var,
        argmax: Vec<Option<usize>>,
        channels: usize,
    },
    Sum(Var),
    Dot {
        x: Var,
        w: Vec<f64>,
    },
    Focal {
        pred: Var,
        target: Vec<f64>,
        params: FocalParams,
    },
    SmoothL1 {
        pred: Var,
        target: Vec<f64>,
        mask: Vec<bool>,
        beta: f64,
    },
    Bce {
        pred: Var,
        target: Vec<f64>,
        mask: Vec<bool>,
        eps: f64,
    },
}

/// Focal loss constants. `beta` is the exponent of the CenterNet-style
/// penalty reduction `(1 - y)^beta` for cells whose target is below one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
    pub beta: f64,
    pub eps: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams {
            alpha: 0.25,
            gamma: 2.0,
            beta: 4.0,
            eps: 1e-6,
        }
    }
}

impl Op {
    pub fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Conv { x, k, b, .. } => {
                let mut v = vec![*x, *k];
                v.extend(b);
                v
            }
            Deform { x, k, off, .. } => vec![*x, *k, *off],
            Add(a, b) | Sub(a, b) | Mul(a, b) => vec![*a, *b],
            Concat { a, b, .. } | MatMul { a, b, .. } => vec![*a, *b],
            AddBias { x, b } => vec![*x, *b],
            Affine { x, .. }
            | Sigmoid(x)
            | Tanh(x)
            | Relu(x)
            | Softplus(x)
            | Reshape(x)
            | MeanBatch { x, .. }
            | MaxPool2 { x, .. }
            | AvgPool2(x)
            | Upsample2(x)
            | Resize { x, .. }
            | GlobalAvgPool(x)
            | Softmax(x)
            | Sum(x)
            | Dot { x, .. } => vec![*x],
            MeanStack(xs) => xs.clone(),
            Gate { scores, offset, .. } => vec![*scores, *offset],
            GateApply { x, g, .. } => vec![*x, *g],
            ScaleBy { x, s, .. } => vec![*x, *s],
            PillarMax { feats, .. } => vec![*feats],
            Focal { pred, .. } | SmoothL1 { pred, .. } | Bce { pred, .. } => vec![*pred],
        }
    }

    /// Propagates `g` (gradient of the loss w.r.t. this node's output) to the inputs.
    pub fn backward(
        &self,
        tape: &Tape,
        out: &Tensor,
        g: &[f64],
        emit: &mut dyn FnMut(Var, Vec<f64>),
    ) {
        use Op::*;
        let need = |v: &Var| tape.requires_grad(*v);
        let y = out.data();
        match self {
            Leaf => {}
            Conv { x, k, b, geom, dims } => {
                let want = (need(x), need(k), b.as_ref().is_some_and(need));
                let (gx, gk, gb) = conv::backward(tape.data(*x), tape.data(*k), g, dims, geom, want);
                if let Some(gx) = gx {
                    emit(*x, gx);
                }
                if let Some(gk) = gk {
                    emit(*k, gk);
                }
                if let (Some(b), Some(gb)) = (b, gb) {
                    emit(*b, gb);
                }
            }
            Deform { x, k, off, dims } => {
                let r = deform::backward(
                    tape.data(*x),
                    tape.data(*k),
                    tape.data(*off),
                    g,
                    dims,
                    (need(x), need(k), need(off)),
                );
                if let Some(v) = r.input {
                    emit(*x, v);
                }
                if let Some(v) = r.kernel {
                    emit(*k, v);
                }
                if let Some(v) = r.offsets {
                    emit(*off, v);
                }
            }
            Add(a, b) => {
                if need(a) {
                    emit(*a, g.to_vec());
                }
                if need(b) {
                    emit(*b, g.to_vec());
                }
            }
            Sub(a, b) => {
                if need(a) {
                    emit(*a, g.to_vec());
                }
                if need(b) {
                    emit(*b, g.iter().map(|v| -v).collect());
                }
            }
            Mul(a, b) => {
                let (av, bv) = (tape.data(*a), tape.data(*b));
                if need(a) {
                    emit(*a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
                }
                if need(b) {
                    emit(*b, g.iter().zip(av).map(|(g, a)| g * a).collect());
                }
            }
            Affine { x, scale } => emit(*x, g.iter().map(|v| v * scale).collect()),
            Sigmoid(x) => emit(*x, g.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect()),
            Tanh(x) => emit(*x, g.iter().zip(y).map(|(g, t)| g * (1.0 - t * t)).collect()),
            Relu(x) => {
                let xv = tape.data(*x);
                emit(*x, g.iter().zip(xv).map(|(g, v)| if *v > 0.0 { *g } else { 0.0 }).collect())
            }
            Softplus(x) => {
                let xv = tape.data(*x);
                emit(*x, g.iter().zip(xv).map(|(g, v)| g * sigmoid(*v)).collect())
            }
            Concat { a, b, ca, cb, plane } => {
                let c = ca + cb;
                let batches = g.len() / (c * plane);
                if need(a) {
                    let mut ga = Vec::with_capacity(batches * ca * plane);
                    for n in 0..batches {
                        ga.extend_from_slice(&g[n * c * plane..][..ca * plane]);
                    }
                    emit(*a, ga);
                }
                if need(b) {
                    let mut gb = Vec::with_capacity(batches * cb * plane);
                    for n in 0..batches {
                        gb.extend_from_slice(&g[(n * c + ca) * plane..][..cb * plane]);
                    }
                    emit(*b, gb);
                }
            }
            MatMul { a, b, m, k, n } => {
                let (av, bv) = (tape.data(*a), tape.data(*b));
                if need(a) {
                    // dA = G B^T
                    let mut ga = vec![0.0; m * k];
                    for i in 0..*m {
                        let grow = &g[i * n..][..*n];
                        for p in 0..*k {
                            ga[i * k + p] = grow.iter().zip(&bv[p * n..][..*n]).map(|(x, y)| x * y).sum();
                        }
                    }
                    emit(*a, ga);
                }
                if need(b) {
                    // dB = A^T G
                    let mut gb = vec![0.0; k * n];
                    for i in 0..*m {
                        let grow = &g[i * n..][..*n];
                        for p in 0..*k {
                            let av = av[i * k + p];
                            for (d, gv) in gb[p * n..][..*n].iter_mut().zip(grow) {
                                *d += av * gv;
                            }
                        }
                    }
                    emit(*b, gb);
                }
            }
            AddBias { x, b } => {
                if need(x) {
                    emit(*x, g.to_vec());
                }
                if need(b) {
                    let c = tape.data(*b).len();
                    let mut gb = vec![0.0; c];
                    for row in g.chunks(c) {
                        for (d, v) in gb.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    emit(*b, gb);
                }
            }
            Reshape(x) => emit(*x, g.to_vec()),
            MeanBatch { x, n } => {
                let inv = 1.0 / *n as f64;
                let scaled: Vec<f64> = g.iter().map(|v| v * inv).collect();
                let mut gx = Vec::with_capacity(scaled.len() * n);
                for _ in 0..*n {
                    gx.extend_from_slice(&scaled);
                }
                emit(*x, gx);
            }
            MeanStack(xs) => {
                let inv = 1.0 / xs.len() as f64;
                for x in xs {
                    if need(x) {
                        emit(*x, g.iter().map(|v| v * inv).collect());
                    }
                }
            }
            Gate { scores, offset, mode } => {
                if *mode == GateGrad::Exact {
                    return;
                }
                if need(scores) {
                    let sv = tape.data(*scores);
                    emit(
                        *scores,
                        g.iter()
                            .zip(sv)
                            .map(|(g, s)| {
                                let p = sigmoid(*s);
                                g * p * (1.0 - p)
                            })
                            .collect(),
                    );
                }
                if need(offset) {
                    emit(*offset, vec![-g.iter().sum::<f64>()]);
                }
            }
            GateApply { x, g: gate, m } => {
                let (xv, gv) = (tape.data(*x), tape.data(*gate));
                let hw = gv.len() / m;
                let d = xv.len() / hw;
                if need(x) {
                    let mut gx = vec![0.0; xv.len()];
                    for q in 0..*m {
                        let gq = &gv[q * hw..][..hw];
                        for c in 0..d {
                            let src = &g[(q * d + c) * hw..][..hw];
                            for ((dst, s), m) in gx[c * hw..][..hw].iter_mut().zip(src).zip(gq) {
                                *dst += s * m;
                            }
                        }
                    }
                    emit(*x, gx);
                }
                if need(gate) {
                    let mut gg = vec![0.0; gv.len()];
                    for q in 0..*m {
                        for c in 0..d {
                            let src = &g[(q * d + c) * hw..][..hw];
                            for ((dst, s), xv) in gg[q * hw..][..hw].iter_mut().zip(src).zip(&xv[c * hw..][..hw]) {
                                *dst += s * xv;
                            }
                        }
                    }
                    emit(*gate, gg);
                }
            }
            MaxPool2 { x, argmax } => {
                let mut gx = vec![0.0; tape.data(*x).len()];
                for (gv, &i) in g.iter().zip(argmax) {
                    gx[i] += gv;
                }
                emit(*x, gx);
            }
            AvgPool2(x) => {
                let [n, c, h, w] = dims4(tape.shape(*x));
                let (ho, wo) = (h / 2, w / 2);
                let mut gx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    for i in 0..ho {
                        for j in 0..wo {
                            let v = 0.25 * g[(p * ho + i) * wo + j];
                            for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                gx[(p * h + 2 * i + di) * w + 2 * j + dj] += v;
                            }
                        }
                    }
                }
                emit(*x, gx);
            }
            Upsample2(x) => {
                let [n, c, h, w] = dims4(tape.shape(*x));
                let mut gx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            gx[(p * h + i / 2) * w + j / 2] += g[(p * 2 * h + i) * 2 * w + j];
                        }
                    }
                }
                emit(*x, gx);
            }
            Resize { x, out_h, out_w } => {
                let [n, c, h, w] = dims4(tape.shape(*x));
                let ys = resize_axis(h, *out_h);
                let xs = resize_axis(w, *out_w);
                let mut gx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    for (i, &(y0, y1, fy)) in ys.iter().enumerate() {
                        for (j, &(x0, x1, fx)) in xs.iter().enumerate() {
                            let v = g[(p * out_h + i) * out_w + j];
                            let base = p * h * w;
                            gx[base + y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                            gx[base + y0 * w + x1] += v * (1.0 - fy) * fx;
                            gx[base + y1 * w + x0] += v * fy * (1.0 - fx);
                            gx[base + y1 * w + x1] += v * fy * fx;
                        }
                    }
                }
                emit(*x, gx);
            }
            GlobalAvgPool(x) => {
                let [n, c, h, w] = dims4(tape.shape(*x));
                let hw = h * w;
                let mut gx = vec![0.0; n * c * hw];
                for p in 0..n * c {
                    let v = g[p] / hw as f64;
                    gx[p * hw..(p + 1) * hw].fill(v);
                }
                emit(*x, gx);
            }
            Softmax(x) => {
                let cols = *tape.shape(*x).last().unwrap();
                let mut gx = vec![0.0; y.len()];
                for ((gr, yr), dst) in g.chunks(cols).zip(y.chunks(cols)).zip(gx.chunks_mut(cols)) {
                    let dotp: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((d, gv), yv) in dst.iter_mut().zip(gr).zip(yr) {
                        *d = yv * (gv - dotp);
                    }
                }
                emit(*x, gx);
            }
            ScaleBy { x, s, idx } => {
                let sv = tape.data(*s)[*idx];
                if need(x) {
                    emit(*x, g.iter().map(|v| v * sv).collect());
                }
                if need(s) {
                    let mut gs = vec![0.0; tape.data(*s).len()];
                    gs[*idx] = g.iter().zip(tape.data(*x)).map(|(a, b)| a * b).sum();
                    emit(*s, gs);
                }
            }
            PillarMax {
                feats,
                argmax,
                channels,
            } => {
                let mut gf = vec![0.0; tape.data(*feats).len()];
                let cells = argmax.len() / channels;
                for c in 0..*channels {
                    for cell in 0..cells {
                        if let Some(p) = argmax[c * cells + cell] {
                            gf[p * channels + c] += g[c * cells + cell];
                        }
                    }
                }
                emit(*feats, gf);
            }
            Sum(x) => emit(*x, vec![g[0]; tape.data(*x).len()]),
            Dot { x, w } => emit(*x, w.iter().map(|v| v * g[0]).collect()),
            Focal { pred, target, params } => {
                let pv = tape.data(*pred);
                let inv = g[0] / pv.len() as f64;
                emit(
                    *pred,
                    pv.iter()
                        .zip(target)
                        .map(|(p, t)| inv * focal_term_grad(*p, *t, params))
                        .collect(),
                );
            }
            SmoothL1 {
                pred,
                target,
                mask,
                beta,
            } => {
                let count = mask.iter().filter(|m| **m).count();
                if count == 0 {
                    return;
                }
                let pv = tape.data(*pred);
                let inv = g[0] / count as f64;
                emit(
                    *pred,
                    pv.iter()
                        .zip(target)
                        .zip(mask)
                        .map(|((p, t), m)| {
                            if !m {
                                return 0.0;
                            }
                            let d = p - t;
                            inv * if d.abs() < *beta { d / beta } else { d.signum() }
                        })
                        .collect(),
                );
            }
            Bce { pred, target, mask, eps } => {
                let count = mask.iter().filter(|m| **m).count();
                if count == 0 {
                    return;
                }
                let inv = g[0] / count as f64;
                let pv = tape.data(*pred);
                emit(
                    *pred,
                    pv.iter()
                        .zip(target)
                        .zip(mask)
                        .map(|((p, t), m)| {
                            if !m || *p <= *eps || *p >= 1.0 - eps {
                                return 0.0;
                            }
                            inv * (p - t) / (p * (1.0 - p))
                        })
                        .collect(),
                );
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn fnv(bits: impl IntoIterator<Item = u64>) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in bits {
        h = (h ^ b).wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Source rows/cols and weight for half-pixel bilinear resizing with edge clamping.
fn resize_axis(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Per-cell focal loss. Target 1 is a positive; anything below one is a
/// (penalty-reduced) negative.
pub fn focal_term(p: f64, t: f64, fp: &FocalParams) -> f64 {
    let p = p.clamp(fp.eps, 1.0 - fp.eps);
    if t >= 1.0 {
        fp.alpha * (1.0 - p).powf(fp.gamma) * -p.ln()
    } else {
        (1.0 - fp.alpha) * (1.0 - t).powf(fp.beta) * p.powf(fp.gamma) * -(1.0 - p).ln()
    }
}

fn focal_term_grad(p_raw: f64, t: f64, fp: &FocalParams) -> f64 {
    if p_raw <= fp.eps || p_raw >= 1.0 - fp.eps {
        return 0.0;
    }
    let p = p_raw;
    let gm = fp.gamma;
    if t >= 1.0 {
        // d/dp [ (1-p)^g * -ln p ]
        fp.alpha * (gm * (1.0 - p).powf(gm - 1.0) * p.ln() - (1.0 - p).powf(gm) / p)
    } else {
        // d/dp [ p^g * -ln(1-p) ]
        let w = (1.0 - fp.alpha) * (1.0 - t).powf(fp.beta);
        w * (-gm * p.powf(gm - 1.0) * (1.0 - p).ln() + p.powf(gm) / (1.0 - p))
    }
}

fn same_shape(tape: &Tape, a: Var, b: Var, what: &str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(shape_err!(
            "{what}: shapes {:?} and {:?} differ",
            tape.shape(a),
            tape.shape(b)
        ));
    }
    Ok(())
}

impl Tape {
    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(x);
        let data: Vec<f64> = t.data().iter().map(|v| f(*v)).collect();
        let shape = t.shape().to_vec();
        let n = data.len() as u64;
        self.add_macs(n);
        self.push(Tensor::new(&shape, data).expect("unary keeps shape"), op)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        same_shape(self, a, b, what)?;
        let data: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| f(*x, *y)).collect();
        let shape = self.shape(a).to_vec();
        self.add_macs(data.len() as u64);
        Ok(self.push(Tensor::new(&shape, data)?, op))
    }

    /// Cross-correlation of `x: [N,C,H,W]` with `k: [O,C,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let dims = ConvDims::new(self.shape(x), self.shape(k), &geom)?;
        if let Some(b) = b {
            if self.shape(b) != [dims.o] {
                return Err(shape_err!(
                    "conv2d bias must have shape [{}], got {:?}",
                    dims.o,
                    self.shape(b)
                ));
            }
        }
        let out = conv::forward(self.data(x), self.data(k), b.map(|b| self.data(b)), &dims, &geom);
        self.add_macs(dims.macs());
        let t = Tensor::new(&[dims.n, dims.o, dims.ho, dims.wo], out)?;
        Ok(self.push(t, Op::Conv { x, k, b, geom, dims }))
    }

    /// Deformable convolution, stride 1 with `(S-1)/2` zero padding.
    pub fn deform_conv2d(&mut self, x: Var, k: Var, offsets: Var) -> Result<Var> {
        let dims = DeformDims::new(self.shape(x), self.shape(k), self.shape(offsets))?;
        let (out, sig) = deform::forward(self.data(x), self.data(k), self.data(offsets), &dims);
        self.mix_signature(sig);
        self.add_macs(dims.macs());
        let t = Tensor::new(&[dims.n, dims.o, dims.h, dims.w], out)?;
        Ok(self.push(t, Op::Deform { x, k, off: offsets, dims }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.unary(x, Op::Affine { x, scale }, |v| scale * v + shift)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let h = fnv(self.data(x).iter().map(|v| (*v > 0.0) as u64));
        self.mix_signature(h);
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), softplus)
    }

    /// Concatenates two `[N,C,H,W]` tensors along channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [na, ca, ha, wa] = dims4_checked(self.shape(a), "concat")?;
        let [nb, cb, hb, wb] = dims4_checked(self.shape(b), "concat")?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(shape_err!(
                "concat: incompatible shapes {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let plane = ha * wa;
        let mut data = Vec::with_capacity(na * (ca + cb) * plane);
        for n in 0..na {
            data.extend_from_slice(&self.data(a)[n * ca * plane..][..ca * plane]);
            data.extend_from_slice(&self.data(b)[n * cb * plane..][..cb * plane]);
        }
        let t = Tensor::new(&[na, ca + cb, ha, wa], data)?;
        Ok(self.push(t, Op::Concat { a, b, ca, cb, plane }))
    }

    /// `[m,k] x [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        expect_rank(self.shape(a), 2, "matmul")?;
        expect_rank(self.shape(b), 2, "matmul")?;
        let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
        let (k2, n) = (self.shape(b)[0], self.shape(b)[1]);
        if k != k2 {
            return Err(shape_err!("matmul inner dimensions differ: {k} vs {k2}"));
        }
        let (av, bv) = (self.data(a), self.data(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..][..n];
            for p in 0..k {
                let s = av[i * k + p];
                for (d, bvv) in row.iter_mut().zip(&bv[p * n..][..n]) {
                    *d += s * bvv;
                }
            }
        }
        self.add_macs((m * k * n) as u64);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b, m, k, n }))
    }

    /// Adds `b: [C]` to every row of `x: [R, C]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        expect_rank(self.shape(x), 2, "add_bias")?;
        let c = self.shape(x)[1];
        if self.shape(b) != [c] {
            return Err(shape_err!("add_bias: bias {:?} vs {c} columns", self.shape(b)));
        }
        let bv = self.data(b).to_vec();
        let data: Vec<f64> = self
            .data(x)
            .chunks(c)
            .flat_map(|row| row.iter().zip(&bv).map(|(a, b)| a + b).collect::<Vec<_>>())
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::new(&shape, data)?, Op::AddBias { x, b }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Mean over the leading (batch) axis, `[N, ...] -> [1, ...]`.
    ///
    /// Per element the `N` values are summed in sorted order, so the result
    /// is bitwise independent of the batch order.
    pub fn mean_batch(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || shape[0] == 0 {
            return Err(shape_err!("mean_batch on empty batch {shape:?}"));
        }
        let n = shape[0];
        let per = self.value(x).numel() / n;
        let xv = self.data(x);
        let mut out = vec![0.0; per];
        let mut buf = vec![0.0; n];
        for (i, o) in out.iter_mut().enumerate() {
            for (b, slot) in buf.iter_mut().enumerate() {
                *slot = xv[b * per + i];
            }
            *o = sorted_sum(&mut buf) / n as f64;
        }
        let mut oshape = shape;
        oshape[0] = 1;
        self.add_macs((n * per) as u64);
        Ok(self.push(Tensor::new(&oshape, out)?, Op::MeanBatch { x, n }))
    }

    /// Elementwise mean of equally shaped tensors (order independent).
    pub fn mean_stack(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::InvalidArgument("mean_stack of nothing".into()));
        };
        for &x in xs {
            same_shape(self, first, x, "mean_stack")?;
        }
        let per = self.value(first).numel();
        let mut out = vec![0.0; per];
        let mut buf = vec![0.0; xs.len()];
        for (i, o) in out.iter_mut().enumerate() {
            for (slot, &x) in buf.iter_mut().zip(xs) {
                *slot = self.data(x)[i];
            }
            *o = sorted_sum(&mut buf) / xs.len() as f64;
        }
        let shape = self.shape(first).to_vec();
        self.add_macs((per * xs.len()) as u64);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MeanStack(xs.to_vec())))
    }

    /// Median-threshold binary gates.
    ///
    /// For each row of `scores: [M, L]`, `s = sigmoid(scores)` and the gate is
    /// 1 where `s >= median(s) + offset`. `offset` is a one-element tensor.
    pub fn attention_gate(&mut self, scores: Var, offset: Var) -> Result<Var> {
        expect_rank(self.shape(scores), 2, "attention_gate")?;
        if self.value(offset).numel() != 1 {
            return Err(shape_err!("gate threshold offset must be a scalar"));
        }
        let (m, l) = (self.shape(scores)[0], self.shape(scores)[1]);
        let b = self.data(offset)[0];
        let gates = gate_values(self.data(scores), m, l, b);
        self.mix_signature(fnv(gates.iter().map(|g| *g as u64)));
        let mode = self.gate_grad();
        self.add_macs((m * l) as u64);
        Ok(self.push(Tensor::new(&[m, l], gates)?, Op::Gate { scores, offset, mode }))
    }

    /// Broadcasts gates `[M, H*W]` over the channels of `x: [1, D, H, W]`,
    /// producing `[M, D, H, W]`.
    pub fn gate_apply(&mut self, x: Var, gates: Var) -> Result<Var> {
        let [n, d, h, w] = dims4_checked(self.shape(x), "gate_apply")?;
        expect_rank(self.shape(gates), 2, "gate_apply")?;
        let (m, l) = (self.shape(gates)[0], self.shape(gates)[1]);
        if n != 1 || l != h * w {
            return Err(shape_err!(
                "gate_apply: input {:?} incompatible with gates {:?}",
                self.shape(x),
                self.shape(gates)
            ));
        }
        let (xv, gv) = (self.data(x), self.data(gates));
        let hw = h * w;
        let mut out = vec![0.0; m * d * hw];
        for q in 0..m {
            let gq = &gv[q * hw..][..hw];
            for c in 0..d {
                for ((o, xv), g) in out[(q * d + c) * hw..][..hw].iter_mut().zip(&xv[c * hw..][..hw]).zip(gq) {
                    *o = xv * g;
                }
            }
        }
        self.add_macs((m * d * hw) as u64);
        Ok(self.push(Tensor::new(&[m, d, h, w], out)?, Op::GateApply { x, g: gates, m }))
    }

    /// 2x2 max pooling with stride 2; ties go to the first element in
    /// row-major window order.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = dims4_checked(self.shape(x), "max_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err!("max_pool2 needs even spatial dims, got {h}x{w}"));
        }
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.data(x);
        let mut out = vec![0.0; n * c * ho * wo];
        let mut argmax = vec![0; out.len()];
        for p in 0..n * c {
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = (f64::NEG_INFINITY, 0);
                    for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let idx = (p * h + 2 * i + di) * w + 2 * j + dj;
                        if xv[idx] > best.0 {
                            best = (xv[idx], idx);
                        }
                    }
                    let o = (p * ho + i) * wo + j;
                    out[o] = best.0;
                    argmax[o] = best.1;
                }
            }
        }
        self.mix_signature(fnv(argmax.iter().map(|v| *v as u64)));
        let t = Tensor::new(&[n, c, ho, wo], out)?;
        Ok(self.push(t, Op::MaxPool2 { x, argmax }))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = dims4_checked(self.shape(x), "avg_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err!("avg_pool2 needs even spatial dims, got {h}x{w}"));
        }
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.data(x);
        let mut out = vec![0.0; n * c * ho * wo];
        for p in 0..n * c {
            for i in 0..ho {
                for j in 0..wo {
                    let at = |di: usize, dj: usize| xv[(p * h + 2 * i + di) * w + 2 * j + dj];
                    out[(p * ho + i) * wo + j] = 0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1));
                }
            }
        }
        Ok(self.push(Tensor::new(&[n, c, ho, wo], out)?, Op::AvgPool2(x)))
    }

    /// Nearest-neighbour 2x up-sampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = dims4_checked(self.shape(x), "upsample2")?;
        let xv = self.data(x);
        let mut out = vec![0.0; n * c * 4 * h * w];
        for p in 0..n * c {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    out[(p * 2 * h + i) * 2 * w + j] = xv[(p * h + i / 2) * w + j / 2];
                }
            }
        }
        Ok(self.push(Tensor::new(&[n, c, 2 * h, 2 * w], out)?, Op::Upsample2(x)))
    }

    /// Bilinear resize (half-pixel centres, clamped edges). Identity when the
    /// size is unchanged.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let [n, c, h, w] = dims4_checked(self.shape(x), "resize_bilinear")?;
        if out_h == 0 || out_w == 0 {
            return Err(shape_err!("resize to empty size {out_h}x{out_w}"));
        }
        let ys = resize_axis(h, out_h);
        let xs = resize_axis(w, out_w);
        let xv = self.data(x);
        let mut out = vec![0.0; n * c * out_h * out_w];
        for p in 0..n * c {
            let base = p * h * w;
            for (i, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (j, &(x0, x1, fx)) in xs.iter().enumerate() {
                    out[(p * out_h + i) * out_w + j] = (1.0 - fy) * ((1.0 - fx) * xv[base + y0 * w + x0] + fx * xv[base + y0 * w + x1])
                        + fy * ((1.0 - fx) * xv[base + y1 * w + x0] + fx * xv[base + y1 * w + x1]);
                }
            }
        }
        self.add_macs((4 * n * c * out_h * out_w) as u64);
        Ok(self.push(Tensor::new(&[n, c, out_h, out_w], out)?, Op::Resize { x, out_h, out_w }))
    }

    /// `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = dims4_checked(self.shape(x), "global_avg_pool")?;
        let hw = h * w;
        let out: Vec<f64> = self
            .data(x)
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        Ok(self.push(Tensor::new(&[n, c], out)?, Op::GlobalAvgPool(x)))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().ok_or_else(|| shape_err!("softmax of a rank-0 tensor"))?;
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(cols) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax(x)))
    }

    /// `x * s[idx]`.
    pub fn scale_by(&mut self, x: Var, s: Var, idx: usize) -> Result<Var> {
        let Some(&sv) = self.data(s).get(idx) else {
            return Err(shape_err!("scale_by index {idx} out of range"));
        };
        let t = self.value(x);
        let data: Vec<f64> = t.data().iter().map(|v| v * sv).collect();
        let shape = t.shape().to_vec();
        self.add_macs(data.len() as u64);
        Ok(self.push(Tensor::new(&shape, data)?, Op::ScaleBy { x, s, idx }))
    }

    /// Scatter-max of per-point features `[P, C]` into a `[1, C, H, W]` grid.
    /// `cells[p]` is the flat grid cell of point `p` (or `None` to discard).
    /// Empty cells are exactly zero; ties keep the earlier point.
    pub fn pillar_max(&mut self, feats: Var, cells: &[Option<usize>], h: usize, w: usize) -> Result<Var> {
        expect_rank(self.shape(feats), 2, "pillar_max")?;
        let (p, c) = (self.shape(feats)[0], self.shape(feats)[1]);
        if cells.len() != p {
            return Err(shape_err!("pillar_max: {} cell ids for {p} points", cells.len()));
        }
        let hw = h * w;
        let fv = self.data(feats);
        let mut out = vec![0.0; c * hw];
        let mut argmax: Vec<Option<usize>> = vec![None; c * hw];
        for (pi, cell) in cells.iter().enumerate() {
            let Some(cell) = *cell else { continue };
            if cell >= hw {
                return Err(shape_err!("pillar_max: cell {cell} outside {h}x{w} grid"));
            }
            for ch in 0..c {
                let v = fv[pi * c + ch];
                let slot = ch * hw + cell;
                match argmax[slot] {
                    Some(_) if out[slot] >= v => {}
                    _ => {
                        out[slot] = v;
                        argmax[slot] = Some(pi);
                    }
                }
            }
        }
        self.mix_signature(fnv(argmax.iter().map(|a| a.map_or(u64::MAX, |v| v as u64))));
        let t = Tensor::new(&[1, c, h, w], out)?;
        Ok(self.push(t, Op::PillarMax { feats, argmax, channels: c }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.affine(s, 1.0 / n, 0.0)
    }

    /// `sum(x * w)` for a constant weight vector.
    pub fn dot_const(&mut self, x: Var, w: &[f64]) -> Result<Var> {
        if w.len() != self.value(x).numel() {
            return Err(shape_err!(
                "dot_const: {} weights for {} values",
                w.len(),
                self.value(x).numel()
            ));
        }
        let s = self.data(x).iter().zip(w).map(|(a, b)| a * b).sum();
        Ok(self.push(Tensor::scalar(s), Op::Dot { x, w: w.to_vec() }))
    }

    /// Mean focal loss over all cells of `pred` against `target` in `[0, 1]`.
    pub fn focal_loss(&mut self, pred: Var, target: &[f64], params: FocalParams) -> Result<Var> {
        let pv = self.data(pred);
        if pv.len() != target.len() {
            return Err(shape_err!(
                "focal_loss: {} predictions vs {} targets",
                pv.len(),
                target.len()
            ));
        }
        if let Some(bad) = target.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::InvalidArgument(format!(
                "focal_loss target {bad} outside [0, 1]"
            )));
        }
        let total: f64 = pv.iter().zip(target).map(|(p, t)| focal_term(*p, *t, &params)).sum();
        let v = total / pv.len() as f64;
        Ok(self.push(
            Tensor::scalar(v),
            Op::Focal {
                pred,
                target: target.to_vec(),
                params,
            },
        ))
    }

    /// Smooth-L1 averaged over the masked elements; zero when the mask is empty.
    pub fn smooth_l1_loss(&mut self, pred: Var, target: &[f64], mask: &[bool], beta: f64) -> Result<Var> {
        let pv = self.data(pred);
        if pv.len() != target.len() || pv.len() != mask.len() {
            return Err(shape_err!(
                "smooth_l1_loss: {} predictions, {} targets, {} mask entries",
                pv.len(),
                target.len(),
                mask.len()
            ));
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for ((p, t), m) in pv.iter().zip(target).zip(mask) {
            if *m {
                total += smooth_l1(p - t, beta);
                count += 1;
            }
        }
        let v = if count == 0 { 0.0 } else { total / count as f64 };
        Ok(self.push(
            Tensor::scalar(v),
            Op::SmoothL1 {
                pred,
                target: target.to_vec(),
                mask: mask.to_vec(),
                beta,
            },
        ))
    }

    /// Binary cross-entropy averaged over the masked elements; zero when the
    /// mask is empty.
    pub fn bce_loss(&mut self, pred: Var, target: &[f64], mask: &[bool], eps: f64) -> Result<Var> {
        let pv = self.data(pred);
        if pv.len() != target.len() || pv.len() != mask.len() {
            return Err(shape_err!(
                "bce_loss: {} predictions, {} targets, {} mask entries",
                pv.len(),
                target.len(),
                mask.len()
            ));
        }
        if let Some(bad) = target.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::InvalidArgument(format!("bce_loss target {bad} outside [0, 1]")));
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for ((p, t), m) in pv.iter().zip(target).zip(mask) {
            if *m {
                total += bce(*p, *t, eps);
                count += 1;
            }
        }
        let v = if count == 0 { 0.0 } else { total / count as f64 };
        Ok(self.push(
            Tensor::scalar(v),
            Op::Bce {
                pred,
                target: target.to_vec(),
                mask: mask.to_vec(),
                eps,
            },
        ))
    }
}

/// Binary cross-entropy against a soft target, `p` clamped to `(eps, 1 - eps)`.
pub fn bce(p: f64, t: f64, eps: f64) -> f64 {
    let p = p.clamp(eps, 1.0 - eps);
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

pub fn smooth_l1(d: f64, beta: f64) -> f64 {
    if d.abs() < beta {
        0.5 * d * d / beta
    } else {
        d.abs() - 0.5 * beta
    }
}

/// Binary gates for each row of `scores: [m, l]` (see [`Tape::attention_gate`]).
pub fn gate_values(scores: &[f64], m: usize, l: usize, offset: f64) -> Vec<f64> {
    let mut out = vec![0.0; m * l];
    let mut sorted = vec![0.0; l];
    for q in 0..m {
        let row = &scores[q * l..][..l];
        let s: Vec<f64> = row.iter().map(|v| sigmoid(*v)).collect();
        sorted.copy_from_slice(&s);
        sorted.sort_by(f64::total_cmp);
        let med = if l % 2 == 1 {
            sorted[l / 2]
        } else {
            0.5 * (sorted[l / 2 - 1] + sorted[l / 2])
        };
        let thr = med + offset;
        for (o, sv) in out[q * l..][..l].iter_mut().zip(&s) {
            *o = if *sv >= thr { 1.0 } else { 0.0 };
        }
    }
    out
}

fn sorted_sum(buf: &mut [f64]) -> f64 {
    buf.sort_by(f64::total_cmp);
    buf.iter().sum()
}

fn dims4_checked(shape: &[usize], what: &str) -> Result<[usize; 4]> {
    expect_rank(shape, 4, what)?;
    Ok(dims4(shape))
}
