//! Recurrent attention-gated temporal fusion.
//!
//! Each block owns `M` latent queries. Every query attends the present
//! frame and the shared memory, the resulting score maps are thresholded at
//! their median into binary gates, and the gated states are merged by a
//! GRU-style update followed by a deformable convolution. Block outputs are
//! averaged into the layer output, which also becomes the next memory.
//!
//! The layer consumes feature maps only: there is no pose, odometry or
//! timestamp input anywhere in this module.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{uniform, Bound, Conv2d, ParamId, ParamStore};
use crate::tensor::{ConvGeom, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Deformable convolution per query, then the mean over queries.
    #[default]
    Default,
    /// Mean over queries first, one deformable convolution per block.
    SparseFast,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(FusionMode::Default),
            "sparse_fast" => Ok(FusionMode::SparseFast),
            other => Err(Error::Config(format!("unknown fusion mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    /// Feature width `D`.
    pub channels: usize,
    /// Latent queries per block, `M`.
    pub queries: usize,
    /// Spatial stride of each block (1 or 2); its length is the block count `N`.
    pub block_strides: Vec<usize>,
    /// Deformable kernel size `S`.
    pub kernel: usize,
    pub mode: FusionMode,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            channels: 64,
            queries: 32,
            block_strides: vec![1; 3],
            kernel: 3,
            mode: FusionMode::Default,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.queries == 0 || self.block_strides.is_empty() {
            return Err(Error::Config("fusion needs positive channels, queries and blocks".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("deformable kernel must be odd, got {}", self.kernel)));
        }
        if self.block_strides.iter().any(|s| !matches!(s, 1 | 2)) {
            return Err(Error::Config("block strides must be 1 or 2".into()));
        }
        Ok(())
    }
}

/// Intermediate values of the gated state update for one set of queries.
#[derive(Clone, Copy, Debug)]
pub struct Integration {
    pub l1: Var,
    pub l2: Var,
    pub candidate: Var,
    /// Pre-deformable fused state.
    pub fused: Var,
}

#[derive(Clone, Debug)]
pub struct FusionBlock {
    /// `[M, D]`.
    pub queries: ParamId,
    pub key_present: Conv2d,
    pub key_memory: Conv2d,
    pub gate_l1: Conv2d,
    pub gate_l2: Conv2d,
    pub candidate: Conv2d,
    /// Predicts `2 S^2` offsets per cell; zero-initialised.
    pub offset: Conv2d,
    /// `[D, D, S, S]`.
    pub deform: ParamId,
    /// Gate threshold offset added to the median, `[1]`.
    pub threshold: ParamId,
    pub stride: usize,
    pub channels: usize,
    pub kernel: usize,
}

impl FusionBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cfg: &FusionConfig,
        stride: usize,
    ) -> Self {
        let (d, s) = (cfg.channels, cfg.kernel);
        let one = ConvGeom::same(1);
        let mut conv = |what: &str, i: usize, o: usize| Conv2d::new(store, rng, &format!("{name}.{what}"), i, o, (1, 1), one, true);
        let key_present = conv("key_present", d, d);
        let key_memory = conv("key_memory", d, d);
        let gate_l1 = conv("gate_l1", 2 * d, d);
        let gate_l2 = conv("gate_l2", 2 * d, d);
        let candidate = conv("candidate", 2 * d, d);
        let offset = Conv2d {
            weight: store.add(format!("{name}.offset.weight"), Tensor::zeros(&[2 * s * s, d, 3, 3])),
            bias: Some(store.add(format!("{name}.offset.bias"), Tensor::zeros(&[2 * s * s]))),
            geom: ConvGeom::same(3),
        };
        let deform = store.add(
            format!("{name}.deform"),
            uniform(rng, &[d, d, s, s], (3.0 / (d * s * s) as f64).sqrt()),
        );
        let queries = store.add(format!("{name}.queries"), uniform(rng, &[cfg.queries, d], 1.0));
        let threshold = store.add(format!("{name}.threshold"), Tensor::zeros(&[1]));
        FusionBlock {
            queries,
            key_present,
            key_memory,
            gate_l1,
            gate_l2,
            candidate,
            offset,
            deform,
            threshold,
            stride,
            channels: d,
            kernel: s,
        }
    }

    fn check_state(&self, tape: &Tape, v: Var, what: &str) -> Result<()> {
        let s = tape.shape(v);
        if s.len() != 4 || s[0] != 1 || s[1] != self.channels {
            return Err(Error::Shape(format!(
                "{what} must be [1, {}, H, W], got {s:?}",
                self.channels
            )));
        }
        Ok(())
    }

    /// Scaled dot-product scores of every query against the present and the
    /// memory keys, each `[M, H*W]`. No softmax is applied.
    pub fn cross_attention(&self, tape: &mut Tape, p: &Bound, present: Var, memory: Var) -> Result<(Var, Var)> {
        self.check_state(tape, present, "present")?;
        self.check_state(tape, memory, "memory")?;
        if tape.shape(present) != tape.shape(memory) {
            return Err(Error::Shape(format!(
                "present {:?} and memory {:?} differ",
                tape.shape(present),
                tape.shape(memory)
            )));
        }
        let [_, d, h, w] = <[usize; 4]>::try_from(tape.shape(present)).unwrap();
        let scale = 1.0 / (d as f64).sqrt();
        let q = p.var(self.queries);
        let mut score = |conv: &Conv2d, x: Var| -> Result<Var> {
            let k = conv.forward(tape, p, x)?;
            let k = tape.reshape(k, &[d, h * w])?;
            let s = tape.matmul(q, k)?;
            Ok(tape.affine(s, scale, 0.0))
        };
        let sp = score(&self.key_present, present)?;
        let sm = score(&self.key_memory, memory)?;
        Ok((sp, sm))
    }

    /// Binary median-threshold gates `(g_present, g_memory)`, each `[M, H*W]`.
    pub fn gates(&self, tape: &mut Tape, p: &Bound, scores_present: Var, scores_memory: Var) -> Result<(Var, Var)> {
        let b = p.var(self.threshold);
        let gp = tape.attention_gate(scores_present, b)?;
        let gm = tape.attention_gate(scores_memory, b)?;
        Ok((gp, gm))
    }

    /// Integrates gated memory `h: [M, D, H, W]` with gated present
    /// `x: [M, D, H, W]` (pre-deformable part).
    pub fn integrate(&self, tape: &mut Tape, p: &Bound, h_prev: Var, x: Var) -> Result<Integration> {
        if tape.shape(h_prev) != tape.shape(x) {
            return Err(Error::Shape(format!(
                "state integration inputs differ: {:?} vs {:?}",
                tape.shape(h_prev),
                tape.shape(x)
            )));
        }
        let c = tape.concat_channels(h_prev, x)?;
        let a = self.gate_l1.forward(tape, p, c)?;
        let l1 = tape.sigmoid(a);
        let b = self.gate_l2.forward(tape, p, c)?;
        let l2 = tape.sigmoid(b);
        let reset = tape.mul(l1, h_prev)?;
        let rc = tape.concat_channels(reset, x)?;
        let cc = self.candidate.forward(tape, p, rc)?;
        let candidate = tape.tanh(cc);
        let keep = tape.affine(l2, -1.0, 1.0);
        let kept = tape.mul(keep, h_prev)?;
        let fresh = tape.mul(l2, candidate)?;
        let fused = tape.add(kept, fresh)?;
        Ok(Integration {
            l1,
            l2,
            candidate,
            fused,
        })
    }

    /// Deformable convolution with offsets predicted from `h` itself.
    pub fn deform(&self, tape: &mut Tape, p: &Bound, h: Var) -> Result<Var> {
        let off = self.offset.forward(tape, p, h)?;
        tape.deform_conv2d(h, p.var(self.deform), off)
    }

    /// Full per-query state update, `[M, D, H, W] -> [M, D, H, W]`.
    pub fn state_integration(&self, tape: &mut Tape, p: &Bound, h_prev: Var, x: Var) -> Result<Var> {
        let it = self.integrate(tape, p, h_prev, x)?;
        self.deform(tape, p, it.fused)
    }

    /// One block at its own resolution: `[1, D, H, W]` inputs and output.
    pub fn forward_native(&self, tape: &mut Tape, p: &Bound, present: Var, memory: Var, mode: FusionMode) -> Result<Var> {
        let (sp, sm) = self.cross_attention(tape, p, present, memory)?;
        let (gp, gm) = self.gates(tape, p, sp, sm)?;
        let x = tape.gate_apply(present, gp)?;
        let h = tape.gate_apply(memory, gm)?;
        let it = self.integrate(tape, p, h, x)?;
        match mode {
            FusionMode::Default => {
                let out = self.deform(tape, p, it.fused)?;
                tape.mean_batch(out)
            }
            FusionMode::SparseFast => {
                let mean = tape.mean_batch(it.fused)?;
                self.deform(tape, p, mean)
            }
        }
    }

    /// Block output at the input resolution; strided blocks work on
    /// average-pooled inputs and are resized back bilinearly.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, present: Var, memory: Var, mode: FusionMode) -> Result<Var> {
        if self.stride == 1 {
            return self.forward_native(tape, p, present, memory, mode);
        }
        let [_, _, h, w] = <[usize; 4]>::try_from(tape.shape(present))
            .map_err(|_| Error::Shape(format!("present must be 4-d, got {:?}", tape.shape(present))))?;
        let ps = tape.avg_pool2(present)?;
        let ms = tape.avg_pool2(memory)?;
        let o = self.forward_native(tape, p, ps, ms, mode)?;
        tape.resize_bilinear(o, h, w)
    }
}

#[derive(Clone, Debug)]
pub struct FusionLayer {
    pub blocks: Vec<FusionBlock>,
    pub mode: FusionMode,
    pub channels: usize,
}

impl FusionLayer {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &FusionConfig) -> Self {
        let blocks = cfg
            .block_strides
            .iter()
            .enumerate()
            .map(|(i, s)| FusionBlock::new(store, rng, &format!("fusion.block{i}"), cfg, *s))
            .collect();
        FusionLayer {
            blocks,
            mode: cfg.mode,
            channels: cfg.channels,
        }
    }

    /// One recurrence step: the new memory (equal to the step output).
    pub fn step(&self, tape: &mut Tape, p: &Bound, present: Var, memory: Var) -> Result<Var> {
        let outs = self
            .blocks
            .iter()
            .map(|b| b.forward(tape, p, present, memory, self.mode))
            .collect::<Result<Vec<_>>>()?;
        tape.mean_stack(&outs)
    }

    /// Runs the recurrence over `frames` (each `[1, D, H, W]`) from a zero
    /// memory and returns the final output.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, frames: &[Var]) -> Result<Var> {
        let Some(&first) = frames.first() else {
            return Err(Error::InvalidArgument("fusion layer needs at least one frame".into()));
        };
        let shape = tape.shape(first).to_vec();
        let mut memory = tape.constant(Tensor::zeros(&shape));
        for &f in frames {
            if tape.shape(f) != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "frame shape {:?} differs from {:?}",
                    tape.shape(f),
                    shape
                )));
            }
            memory = self.step(tape, p, f, memory)?;
        }
        Ok(memory)
    }

    /// Bytes held by the recurrent state for an `h x w` map (f64 storage).
    pub fn state_bytes(&self, h: usize, w: usize) -> usize {
        self.channels * h * w * std::mem::size_of::<f64>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(m: usize, strides: Vec<usize>, mode: FusionMode) -> (ParamStore, FusionLayer) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = FusionConfig {
            channels: 4,
            queries: m,
            block_strides: strides,
            kernel: 3,
            mode,
        };
        let l = FusionLayer::new(&mut store, &mut rng, &cfg);
        (store, l)
    }

    #[test]
    fn empty_frame_list_is_rejected() {
        let (store, l) = layer(2, vec![1], FusionMode::Default);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        assert!(l.forward(&mut tape, &p, &[]).is_err());
    }

    #[test]
    fn strided_block_keeps_resolution() {
        let (store, l) = layer(2, vec![1, 2], FusionMode::SparseFast);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = tape.constant(uniform(&mut rng, &[1, 4, 8, 8], 1.0));
        let out = l.forward(&mut tape, &p, &[x, x]).unwrap();
        assert_eq!(tape.shape(out), &[1, 4, 8, 8]);
    }

    #[test]
    fn memory_scores_vanish_at_start() {
        let (store, l) = layer(3, vec![1], FusionMode::Default);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = tape.constant(uniform(&mut rng, &[1, 4, 4, 4], 1.0));
        let m = tape.constant(Tensor::zeros(&[1, 4, 4, 4]));
        let (_, sm) = l.blocks[0].cross_attention(&mut tape, &p, x, m).unwrap();
        assert!(tape.value(sm).data().iter().all(|v| *v == 0.0));
    }
}
