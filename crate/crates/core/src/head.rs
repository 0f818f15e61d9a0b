//! Center-point detection head, target rendering, decoding and losses.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::bev::GridSpec;
use crate::error::{Error, Result};
use crate::params::{Bound, Conv2d, ParamStore};
use crate::sim::{GtBox, ObjectClass};
use crate::tensor::{ConvGeom, FocalParams, Tape, Tensor, Var};

/// `(dx, dy, log w, log l, sin yaw, cos yaw)`.
pub const BOX_PARAMS: usize = 6;

#[derive(Clone, Copy, Debug)]
pub struct Head {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub heatmap: Conv2d,
    pub centerness: Conv2d,
    pub boxes: Conv2d,
}

/// Head outputs recorded on a tape, each `[1, ., H, W]`.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub heatmap: Var,
    pub centerness: Var,
    pub boxes: Var,
}

impl Head {
    /// `prior` sets the initial heatmap probability through the bias.
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, d: usize, classes: usize, prior: f64) -> Self {
        let g3 = ConvGeom::same(3);
        let g1 = ConvGeom::same(1);
        let conv1 = Conv2d::new(store, rng, "head.conv1", d, d, (3, 3), g3, true);
        let conv2 = Conv2d::new(store, rng, "head.conv2", d, d, (3, 3), g3, true);
        let heatmap = Conv2d::new(store, rng, "head.heatmap", d, classes, (1, 1), g1, true);
        let logit = -((1.0 - prior) / prior).ln();
        store.get_mut(heatmap.bias.unwrap()).data_mut().fill(logit);
        let centerness = Conv2d::new(store, rng, "head.centerness", d, 1, (1, 1), g1, true);
        let boxes = Conv2d::new(store, rng, "head.boxes", d, BOX_PARAMS, (1, 1), g1, true);
        Head {
            conv1,
            conv2,
            heatmap,
            centerness,
            boxes,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<HeadVars> {
        let h = self.conv1.forward(tape, p, x)?;
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, p, h)?;
        let h = tape.relu(h);
        let heat = self.heatmap.forward(tape, p, h)?;
        let cent = self.centerness.forward(tape, p, h)?;
        Ok(HeadVars {
            heatmap: tape.sigmoid(heat),
            centerness: tape.sigmoid(cent),
            boxes: self.boxes.forward(tape, p, h)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput {
    /// `[K, H, W]`.
    pub heatmap: Tensor,
    /// `[1, H, W]`.
    pub centerness: Tensor,
    /// `[6, H, W]`.
    pub box_params: Tensor,
}

impl HeadOutput {
    pub fn from_tape(tape: &Tape, v: &HeadVars) -> Result<Self> {
        let drop_batch = |t: &Tensor| {
            let s = t.shape();
            t.clone().reshape(&s[1..])
        };
        Ok(HeadOutput {
            heatmap: drop_batch(tape.value(v.heatmap))?,
            centerness: drop_batch(tape.value(v.centerness))?,
            box_params: drop_batch(tape.value(v.boxes))?,
        })
    }
}

/// Training targets on a head grid. All maps are channel-major, flat.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetMaps {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    /// `[K, H, W]` Gaussian heatmaps, peak exactly 1 at each centre cell.
    pub heatmap: Vec<f64>,
    /// `[H, W]`; `exp(-d)` with `d` the centre distance in cells, positives only.
    pub centerness: Vec<f64>,
    /// `[6, H, W]`.
    pub boxes: Vec<f64>,
    /// `[H, W]` cells carrying box targets.
    pub positive: Vec<bool>,
    /// Boxes whose centre lies outside the grid.
    pub skipped: usize,
}

impl TargetMaps {
    pub fn num_positive(&self) -> usize {
        self.positive.iter().filter(|p| **p).count()
    }

    /// Positive mask repeated over the six box channels.
    pub fn box_mask(&self) -> Vec<bool> {
        let mut m = Vec::with_capacity(BOX_PARAMS * self.positive.len());
        for _ in 0..BOX_PARAMS {
            m.extend_from_slice(&self.positive);
        }
        m
    }
}

/// Gaussian width in cells for a box of the given size.
pub fn gaussian_sigma(width: f64, length: f64, spec: &GridSpec) -> f64 {
    (width.min(length) / (6.0 * spec.range_step())).max(1.0)
}

/// Renders targets for `boxes` (ego frame) on `spec`'s grid.
pub fn assign_targets(boxes: &[GtBox], spec: &GridSpec, classes: usize) -> TargetMaps {
    let (h, w) = (spec.range_bins, spec.azimuth_bins);
    let hw = h * w;
    let mut t = TargetMaps {
        classes,
        height: h,
        width: w,
        heatmap: vec![0.0; classes * hw],
        centerness: vec![0.0; hw],
        boxes: vec![0.0; BOX_PARAMS * hw],
        positive: vec![false; hw],
        skipped: 0,
    };
    let mut owner_dist = vec![f64::INFINITY; hw];
    for b in boxes {
        let (range, az) = (b.center[0].hypot(b.center[1]), b.center[1].atan2(b.center[0]));
        let Some((ci, cj)) = spec.cell_of(range, az) else {
            t.skipped += 1;
            continue;
        };
        let k = b.class.id();
        if k >= classes {
            t.skipped += 1;
            continue;
        }
        let sigma = gaussian_sigma(b.width, b.length, spec);
        let reach = (3.0 * sigma).ceil() as isize;
        for di in -reach..=reach {
            for dj in -reach..=reach {
                let (a, c) = (ci as isize + di, cj as isize + dj);
                if a < 0 || c < 0 || a >= h as isize || c >= w as isize {
                    continue;
                }
                let v = (-((di * di + dj * dj) as f64) / (2.0 * sigma * sigma)).exp();
                let slot = &mut t.heatmap[k * hw + a as usize * w + c as usize];
                *slot = slot.max(v);
            }
        }
        let (gi, gj) = spec.grid_coords(range, az);
        for a in ci.saturating_sub(1)..=(ci + 1).min(h - 1) {
            for c in cj.saturating_sub(1)..=(cj + 1).min(w - 1) {
                let cell = a * w + c;
                let dist = (gi - (a as f64 + 0.5)).hypot(gj - (c as f64 + 0.5));
                if dist >= owner_dist[cell] {
                    continue;
                }
                owner_dist[cell] = dist;
                t.positive[cell] = true;
                t.centerness[cell] = (-dist).exp();
                let cc = spec.cell_center_xy(a, c);
                let vals = [
                    b.center[0] - cc[0],
                    b.center[1] - cc[1],
                    b.width.ln(),
                    b.length.ln(),
                    b.yaw.sin(),
                    b.yaw.cos(),
                ];
                for (ch, v) in vals.iter().enumerate() {
                    t.boxes[ch * hw + cell] = *v;
                }
            }
        }
    }
    t
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub center: [f64; 2],
    /// `(width, length)`.
    pub size: [f64; 2],
    pub yaw: f64,
    pub class: ObjectClass,
    pub score: f64,
}

/// Peak picking and box decoding.
///
/// A cell is a peak when it equals the maximum of its 3x3 neighbourhood in
/// its class map. Candidates are ranked by `heatmap * centerness`; ties keep
/// row-major cell order, then class order.
pub fn decode_topk(out: &HeadOutput, spec: &GridSpec, k: usize, score_threshold: f64) -> Result<Vec<Detection>> {
    if k == 0 {
        return Err(Error::InvalidArgument("decode_topk needs k >= 1".into()));
    }
    let hs = out.heatmap.shape();
    let (classes, h, w) = (hs[0], hs[1], hs[2]);
    if (h, w) != (spec.range_bins, spec.azimuth_bins) {
        return Err(Error::Shape(format!(
            "head output {h}x{w} does not match grid {}x{}",
            spec.range_bins, spec.azimuth_bins
        )));
    }
    let hw = h * w;
    let heat = out.heatmap.data();
    let cent = out.centerness.data();
    let bx = out.box_params.data();
    let mut cands: Vec<(f64, usize, usize)> = Vec::new();
    for c in 0..classes {
        let plane = &heat[c * hw..][..hw];
        for i in 0..h {
            for j in 0..w {
                let v = plane[i * w + j];
                let mut peak = true;
                'nb: for a in i.saturating_sub(1)..=(i + 1).min(h - 1) {
                    for b in j.saturating_sub(1)..=(j + 1).min(w - 1) {
                        if plane[a * w + b] > v {
                            peak = false;
                            break 'nb;
                        }
                    }
                }
                if !peak {
                    continue;
                }
                let score = v * cent[i * w + j];
                if score >= score_threshold {
                    cands.push((score, i * w + j, c));
                }
            }
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    cands.truncate(k);
    Ok(cands
        .into_iter()
        .map(|(score, cell, c)| {
            let (i, j) = (cell / w, cell % w);
            let cc = spec.cell_center_xy(i, j);
            let v = |ch: usize| bx[ch * hw + cell];
            Detection {
                center: [cc[0] + v(0), cc[1] + v(1)],
                size: [v(2).exp(), v(3).exp()],
                yaw: v(4).atan2(v(5)),
                class: ObjectClass::from_id(c).unwrap_or(ObjectClass::Vehicle),
                score,
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub focal: FocalParams,
    /// Weight of the box and centerness terms.
    pub lambda: f64,
    pub smooth_l1_beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            focal: FocalParams::default(),
            lambda: 1.0,
            smooth_l1_beta: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub heatmap: Var,
    pub boxes: Var,
    pub centerness: Var,
}

/// `focal(heatmap) + lambda * (smooth_l1(boxes) + bce(centerness))`, the
/// last two over positive cells only.
pub fn head_loss(tape: &mut Tape, v: &HeadVars, t: &TargetMaps, w: &LossWeights) -> Result<LossParts> {
    let heatmap = tape.focal_loss(v.heatmap, &t.heatmap, w.focal)?;
    let boxes = tape.smooth_l1_loss(v.boxes, &t.boxes, &t.box_mask(), w.smooth_l1_beta)?;
    let centerness = tape.bce_loss(v.centerness, &t.centerness, &t.positive, w.focal.eps)?;
    let aux = tape.add(boxes, centerness)?;
    let aux = tape.affine(aux, w.lambda, 0.0);
    let total = tape.add(heatmap, aux)?;
    Ok(LossParts {
        total,
        heatmap,
        boxes,
        centerness,
    })
}

/// One detection per line: `cx cy w l yaw class score`.
pub fn format_detections(dets: &[Detection]) -> String {
    let mut s = String::new();
    for d in dets {
        writeln!(
            s,
            "{:.16e} {:.16e} {:.16e} {:.16e} {:.16e} {} {:.16e}",
            d.center[0],
            d.center[1],
            d.size[0],
            d.size[1],
            d.yaw,
            d.class.id(),
            d.score
        )
        .unwrap();
    }
    s
}

pub fn parse_detections(path: &Path, text: &str) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 7 {
            return Err(Error::parse(path, i + 1, format!("expected 7 fields, got {}", toks.len())));
        }
        let num = |k: usize| -> Result<f64> {
            toks[k]
                .parse::<f64>()
                .map_err(|_| Error::parse(path, i + 1, format!("bad number `{}`", toks[k])))
        };
        let class = toks[5]
            .parse::<usize>()
            .ok()
            .and_then(ObjectClass::from_id)
            .ok_or_else(|| Error::parse(path, i + 1, format!("bad class `{}`", toks[5])))?;
        out.push(Detection {
            center: [num(0)?, num(1)?],
            size: [num(2)?, num(3)?],
            yaw: num(4)?,
            class,
            score: num(6)?,
        });
    }
    Ok(out)
}
