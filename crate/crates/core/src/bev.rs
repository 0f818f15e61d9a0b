//! Polar BEV grid and the pillar feature encoder.
//!
//! Rows index range bins (row 0 nearest the sensor), columns index azimuth
//! bins from `-fov/2` (column 0) to `+fov/2`.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, Linear, ParamStore};
use crate::sim::{GtBox, PointCloudFrame, RadarPoint};
use crate::tensor::{Tape, Tensor, Var};

/// Number of per-point input features.
pub const POINT_FEATURES: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub range_bins: usize,
    pub azimuth_bins: usize,
    pub max_range: f64,
    pub fov: f64,
    /// Encoded feature width per cell.
    pub channels: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            range_bins: 32,
            azimuth_bins: 32,
            max_range: 64.0,
            fov: PI / 2.0,
            channels: 16,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.range_bins == 0 || self.azimuth_bins == 0 || self.channels == 0 {
            return Err(Error::Config("grid bins and channels must be positive".into()));
        }
        if !(self.max_range > 0.0) || !(self.fov > 0.0) {
            return Err(Error::Config("grid max_range and fov must be positive".into()));
        }
        Ok(())
    }

    pub fn range_step(&self) -> f64 {
        self.max_range / self.range_bins as f64
    }

    pub fn azimuth_step(&self) -> f64 {
        self.fov / self.azimuth_bins as f64
    }

    pub fn cells(&self) -> usize {
        self.range_bins * self.azimuth_bins
    }

    /// Fractional `(row, col)` grid coordinates of a polar position; cell
    /// `(i, j)` spans `[i, i+1) x [j, j+1)`.
    pub fn grid_coords(&self, range: f64, azimuth: f64) -> (f64, f64) {
        (
            range / self.range_step(),
            (azimuth + self.fov / 2.0) / self.azimuth_step(),
        )
    }

    /// Cell containing a polar position, `None` outside the grid.
    pub fn cell_of(&self, range: f64, azimuth: f64) -> Option<(usize, usize)> {
        if !(range >= 0.0 && range <= self.max_range && azimuth.abs() <= self.fov / 2.0) {
            return None;
        }
        let (r, a) = self.grid_coords(range, azimuth);
        Some((
            (r.floor() as usize).min(self.range_bins - 1),
            (a.floor() as usize).min(self.azimuth_bins - 1),
        ))
    }

    /// Cell containing a Cartesian ego-frame position.
    pub fn cell_of_xy(&self, xy: [f64; 2]) -> Option<(usize, usize)> {
        self.cell_of(xy[0].hypot(xy[1]), xy[1].atan2(xy[0]))
    }

    /// `(range, azimuth)` of a cell centre.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            (row as f64 + 0.5) * self.range_step(),
            (col as f64 + 0.5) * self.azimuth_step() - self.fov / 2.0,
        )
    }

    pub fn cell_center_xy(&self, row: usize, col: usize) -> [f64; 2] {
        let (r, a) = self.cell_center(row, col);
        [r * a.cos(), r * a.sin()]
    }

    /// The same field of view at `1/factor` the resolution.
    pub fn downsampled(&self, factor: usize) -> Result<GridSpec> {
        if factor == 0 || self.range_bins % factor != 0 || self.azimuth_bins % factor != 0 {
            return Err(Error::Config(format!(
                "grid {}x{} is not divisible by {factor}",
                self.range_bins, self.azimuth_bins
            )));
        }
        Ok(GridSpec {
            range_bins: self.range_bins / factor,
            azimuth_bins: self.azimuth_bins / factor,
            ..*self
        })
    }
}

/// Normalised features of one reflection and its flat cell index.
pub fn point_features(p: &RadarPoint, spec: &GridSpec) -> Option<(usize, [f64; POINT_FEATURES])> {
    let (i, j) = spec.cell_of(p.range, p.azimuth)?;
    let (rc, ac) = spec.cell_center(i, j);
    Some((
        i * spec.azimuth_bins + j,
        [
            p.range / spec.max_range,
            p.azimuth / (spec.fov / 2.0),
            p.doppler / 10.0,
            p.amplitude.ln() / 4.0,
            (p.range - rc) / spec.range_step(),
            (p.azimuth - ac) / spec.azimuth_step(),
        ],
    ))
}

/// Per-point encoder input prepared from one frame. Points outside the grid
/// are dropped here.
#[derive(Clone, Debug, PartialEq)]
pub struct PillarInput {
    pub timestamp: f64,
    /// `[P, POINT_FEATURES]`.
    pub features: Tensor,
    pub cells: Vec<Option<usize>>,
}

impl PillarInput {
    pub fn from_frame(frame: &PointCloudFrame, spec: &GridSpec) -> Self {
        let mut data = Vec::new();
        let mut cells = Vec::new();
        for p in &frame.points {
            if let Some((cell, f)) = point_features(p, spec) {
                data.extend_from_slice(&f);
                cells.push(Some(cell));
            }
        }
        PillarInput {
            timestamp: frame.timestamp,
            features: Tensor::new(&[cells.len(), POINT_FEATURES], data).expect("feature rows"),
            cells,
        }
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

/// Shared pointwise linear layer followed by softplus, max-pooled per cell.
/// Softplus is strictly positive, so a cell is nonzero exactly when it
/// received at least one point.
#[derive(Clone, Copy, Debug)]
pub struct PillarEncoder {
    pub linear: Linear,
}

impl PillarEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, spec: &GridSpec) -> Self {
        PillarEncoder {
            linear: Linear::new(store, rng, "pillar", POINT_FEATURES, spec.channels),
        }
    }

    /// Per-point encodings `[P, C]` (no pooling).
    pub fn encode_points(&self, tape: &mut Tape, p: &Bound, input: &PillarInput) -> Result<Var> {
        let x = tape.constant(input.features.clone());
        let y = self.linear.forward(tape, p, x)?;
        Ok(tape.softplus(y))
    }

    /// `[1, C, H, W]` BEV map of one frame.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, input: &PillarInput, spec: &GridSpec) -> Result<Var> {
        if input.is_empty() {
            return Ok(tape.constant(Tensor::zeros(&[1, spec.channels, spec.range_bins, spec.azimuth_bins])));
        }
        let enc = self.encode_points(tape, p, input)?;
        tape.pillar_max(enc, &input.cells, spec.range_bins, spec.azimuth_bins)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BevFeatureMap {
    /// `[C, H, W]`.
    pub values: Tensor,
    pub grid: GridSpec,
}

/// Projects a frame onto the grid with frozen encoder parameters.
pub fn pillar_project(
    frame: &PointCloudFrame,
    spec: &GridSpec,
    encoder: &PillarEncoder,
    store: &ParamStore,
) -> Result<BevFeatureMap> {
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let input = PillarInput::from_frame(frame, spec);
    let v = encoder.forward(&mut tape, &p, &input, spec)?;
    let values = tape
        .value(v)
        .clone()
        .reshape(&[spec.channels, spec.range_bins, spec.azimuth_bins])?;
    Ok(BevFeatureMap { values, grid: *spec })
}

pub fn check_time_order(frames: &[PointCloudFrame]) -> Result<()> {
    for (i, w) in frames.windows(2).enumerate() {
        if !(w[1].timestamp > w[0].timestamp) {
            return Err(Error::InvalidArgument(format!(
                "frame {} timestamp {} does not follow {}",
                i + 1,
                w[1].timestamp,
                w[0].timestamp
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    pub maps: Vec<BevFeatureMap>,
    /// Ground truth of the final frame, the only one the loss sees.
    pub targets: Vec<GtBox>,
}

/// Projects a time-ordered sequence.
pub fn batch_sequence(
    frames: &[PointCloudFrame],
    spec: &GridSpec,
    encoder: &PillarEncoder,
    store: &ParamStore,
) -> Result<SequenceBatch> {
    check_time_order(frames)?;
    let maps = frames
        .iter()
        .map(|f| pillar_project(f, spec, encoder, store))
        .collect::<Result<Vec<_>>>()?;
    let targets = frames.last().map(|f| f.gt_boxes.clone()).unwrap_or_default();
    Ok(SequenceBatch { maps, targets })
}

/// Encoder inputs for a time-ordered sequence.
pub fn prepare_inputs(frames: &[PointCloudFrame], spec: &GridSpec) -> Result<Vec<PillarInput>> {
    check_time_order(frames)?;
    Ok(frames.iter().map(|f| PillarInput::from_frame(f, spec)).collect())
}
