//! The full detector: pillar encoder, stem, dynamic downsampling, temporal
//! fusion, FPN and head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{DynamicDownsample, Fpn, Stem};
use crate::bev::{prepare_inputs, GridSpec, PillarEncoder, PillarInput};
use crate::dataset::Sequence;
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionLayer, FusionMode};
use crate::head::{assign_targets, decode_topk, Detection, Head, HeadOutput, HeadVars, TargetMaps};
use crate::params::{Bound, ParamStore};
use crate::sim::{GtBox, ObjectClass};
use crate::tensor::{Tape, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Temporal fusion over the last `frames` frames.
    #[default]
    AttentiveGru,
    /// Identity fusion: only the last frame reaches the FPN.
    Baseline,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::AttentiveGru => "attentivegru",
            ModelKind::Baseline => "baseline",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attentivegru" => Ok(ModelKind::AttentiveGru),
            "baseline" => Ok(ModelKind::Baseline),
            other => Err(Error::Config(format!("unknown model mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub grid: GridSpec,
    pub kind: ModelKind,
    /// Sequence length `T` fed to the fusion layer.
    pub frames: usize,
    pub downsample: usize,
    pub fusion: FusionConfig,
    /// Initial heatmap probability.
    pub head_prior: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            grid: GridSpec::default(),
            kind: ModelKind::AttentiveGru,
            frames: 2,
            downsample: 2,
            fusion: FusionConfig::default(),
            head_prior: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.fusion.validate()?;
        if self.frames == 0 {
            return Err(Error::Config("model.frames must be positive".into()));
        }
        if !(self.head_prior > 0.0 && self.head_prior < 1.0) {
            return Err(Error::Config("model.head_prior must lie in (0, 1)".into()));
        }
        let head = self.head_grid()?;
        if head.range_bins % 4 != 0 || head.azimuth_bins % 4 != 0 {
            return Err(Error::Config(format!(
                "fused map {}x{} must be divisible by 4 for the pyramid",
                head.range_bins, head.azimuth_bins
            )));
        }
        if self.fusion.block_strides.contains(&2) && (head.range_bins % 2 != 0 || head.azimuth_bins % 2 != 0) {
            return Err(Error::Config("strided fusion blocks need an even fused map".into()));
        }
        Ok(())
    }

    /// Grid of the fused map and of the head outputs.
    pub fn head_grid(&self) -> Result<GridSpec> {
        self.grid.downsampled(self.downsample)
    }

    pub fn channels(&self) -> usize {
        self.fusion.channels
    }
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: PillarEncoder,
    pub stem: Stem,
    pub down: DynamicDownsample,
    pub fusion: Option<FusionLayer>,
    pub fpn: Fpn,
    pub head: Head,
}

impl Detector {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.channels();
        let encoder = PillarEncoder::new(&mut store, &mut rng, &config.grid);
        let stem = Stem::new(&mut store, &mut rng, config.grid.channels, d);
        let down = DynamicDownsample::new(&mut store, &mut rng, d, config.downsample);
        let fusion = match config.kind {
            ModelKind::AttentiveGru => Some(FusionLayer::new(&mut store, &mut rng, &config.fusion)),
            ModelKind::Baseline => None,
        };
        let fpn = Fpn::new(&mut store, &mut rng, d);
        let head = Head::new(&mut store, &mut rng, d, ObjectClass::COUNT, config.head_prior);
        Ok(Detector {
            config: config.clone(),
            store,
            encoder,
            stem,
            down,
            fusion,
            fpn,
            head,
        })
    }

    pub fn head_grid(&self) -> GridSpec {
        self.config.head_grid().expect("validated at construction")
    }

    /// Per-frame features `[1, D, H/f, W/f]` entering the fusion layer.
    pub fn frame_features(&self, tape: &mut Tape, p: &Bound, input: &PillarInput) -> Result<Var> {
        let bev = self.encoder.forward(tape, p, input, &self.config.grid)?;
        let x = self.stem.forward(tape, p, bev)?;
        self.down.forward(tape, p, x)
    }

    /// Head outputs for a time-ordered frame sequence.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, inputs: &[PillarInput]) -> Result<HeadVars> {
        let Some(last) = inputs.last() else {
            return Err(Error::InvalidArgument("detector needs at least one frame".into()));
        };
        let fused = match &self.fusion {
            None => self.frame_features(tape, p, last)?,
            Some(layer) => {
                let feats = inputs
                    .iter()
                    .map(|i| self.frame_features(tape, p, i))
                    .collect::<Result<Vec<_>>>()?;
                layer.forward(tape, p, &feats)?
            }
        };
        let pyramid = self.fpn.forward(tape, p, fused)?;
        self.head.forward(tape, p, pyramid.levels[0])
    }

    pub fn predict(&self, inputs: &[PillarInput]) -> Result<HeadOutput> {
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let v = self.forward(&mut tape, &p, inputs)?;
        HeadOutput::from_tape(&tape, &v)
    }

    pub fn detect(&self, inputs: &[PillarInput], k: usize, score_threshold: f64) -> Result<Vec<Detection>> {
        let out = self.predict(inputs)?;
        decode_topk(&out, &self.head_grid(), k, score_threshold)
    }
}

/// One training/evaluation example: the last `T` frames of a sequence and
/// the targets of its final frame.
#[derive(Clone, Debug)]
pub struct Sample {
    pub inputs: Vec<PillarInput>,
    pub targets: TargetMaps,
    pub gt: Vec<GtBox>,
}

pub fn prepare_sample(seq: &Sequence, config: &ModelConfig) -> Result<Sample> {
    if seq.frames.is_empty() {
        return Err(Error::InvalidArgument(format!("sequence {} has no frames", seq.seed)));
    }
    let start = seq.frames.len().saturating_sub(config.frames);
    let frames = &seq.frames[start..];
    let inputs = prepare_inputs(frames, &config.grid)?;
    let gt = frames.last().unwrap().gt_boxes.clone();
    let targets = assign_targets(&gt, &config.head_grid()?, ObjectClass::COUNT);
    Ok(Sample { inputs, targets, gt })
}

impl FusionMode {
    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Default => "default",
            FusionMode::SparseFast => "sparse_fast",
        }
    }
}
