//! End-to-end commands: simulate, train, evaluate, benchmark and gradient
//! checking. The `attgru` binary and the examples are thin wrappers around
//! these functions.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{EvalConfig, RunConfig};
use crate::dataset::{write_dataset, Sequence};
use crate::error::{Error, Result};
use crate::fusion::{FusionBlock, FusionConfig, FusionLayer};
use crate::metrics::{EvalReport, Evaluator};
use crate::model::{prepare_sample, Detector, ModelConfig, ModelKind, Sample};
use crate::params::{uniform, ParamStore};
use crate::sim::{generate_scene, render_scene, splitmix64, Scene};
use crate::tensor::{grad_check, ConvGeom, FocalParams, GradCheckReport, Tape, Tensor, Var};
use crate::train::{self, load_split, TrainOutcome};

/// Seed of sequence `index` in a dataset with base seed `seed`.
pub fn sequence_seed(seed: u64, index: usize) -> u64 {
    splitmix64(seed ^ splitmix64(index as u64))
}

/// Generates `config.data.sequences` scenes.
pub fn simulate_scenes(config: &RunConfig) -> Result<Vec<Scene>> {
    config.sim.validate()?;
    (0..config.data.sequences)
        .map(|i| generate_scene(&config.sim, sequence_seed(config.data.seed, i)))
        .collect()
}

/// Rendered sequences without touching the filesystem.
pub fn simulate_sequences(config: &RunConfig) -> Result<Vec<Sequence>> {
    simulate_scenes(config)?.iter().map(Sequence::from_scene).collect()
}

fn dir_is_nonempty(dir: &Path) -> Result<bool> {
    if !dir.exists() {
        return Ok(false);
    }
    let mut it = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    Ok(it.next().is_some())
}

fn prepare_out(out: &Path, force: bool) -> Result<()> {
    if dir_is_nonempty(out)? && !force {
        return Err(Error::InvalidArgument(format!(
            "output directory {} is not empty (use --force to overwrite)",
            out.display()
        )));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

/// Writes a dataset of `config.data.sequences` sequences to `out`.
pub fn simulate(config: &RunConfig, out: &Path, force: bool) -> Result<Vec<PathBuf>> {
    config.validate()?;
    prepare_out(out, force)?;
    if force {
        for entry in fs::read_dir(out).map_err(|e| Error::io(out, e))? {
            let path = entry.map_err(|e| Error::io(out, e))?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if name == "manifest.txt" || (name.starts_with("seq_") && name.ends_with(".txt")) {
                fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
            }
        }
    }
    let scenes = simulate_scenes(config)?;
    let files = write_dataset(&scenes, out, &config.sim.digest())?;
    config.echo(out)?;
    Ok(files)
}

/// Trains on the dataset at `data` and writes the run to `out`.
pub fn train_command(
    config: &RunConfig,
    data: &Path,
    validation: Option<&Path>,
    out: &Path,
    force: bool,
    resume: bool,
) -> Result<TrainOutcome> {
    config.validate()?;
    if !resume {
        prepare_out(out, force)?;
    }
    let (tr, val) = load_split(config, data, validation)?;
    train::train(config, &tr, &val, out, resume)
}

/// Runs the detector on every sample and pools the matches.
pub fn evaluate(detector: &Detector, samples: &[Sample], eval: &EvalConfig) -> Result<EvalReport> {
    let mut ev = Evaluator::new();
    for s in samples {
        let dets = detector.detect(&s.inputs, eval.k, eval.score_threshold)?;
        ev.add_frame(&dets, &s.gt);
    }
    Ok(ev.report())
}

/// Train, validation and test samples for one ablation seed.
#[derive(Clone, Debug)]
pub struct AblationData {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Largest ego speed over the training scenes.
    pub max_ego_speed: f64,
    /// Largest absolute ego yaw rate over the training scenes.
    pub max_ego_yaw_rate: f64,
}

/// Simulates `train` training sequences (plus a tenth as many for
/// validation) and `test` held-out sequences. Each split has its own data
/// seed derived from `seed`.
pub fn ablation_data(config: &RunConfig, train: usize, test: usize, seed: u64) -> Result<AblationData> {
    let split = |k: u64, n: usize| -> Result<(Vec<Sample>, Vec<Scene>)> {
        let mut c = config.clone();
        c.data.seed = 3 * seed + k;
        c.data.sequences = n;
        let scenes = simulate_scenes(&c)?;
        let samples = scenes
            .iter()
            .map(|s| prepare_sample(&Sequence::from_scene(s)?, &c.model))
            .collect::<Result<Vec<_>>>()?;
        Ok((samples, scenes))
    };
    let (train, scenes) = split(1, train)?;
    let (val, _) = split(2, train.len() / 10)?;
    let (test, _) = split(3, test)?;
    let poses = scenes.iter().flat_map(|s| (0..s.frames()).map(move |t| *s.ego_pose(t)));
    let (speed, yaw) = poses.fold((0.0f64, 0.0f64), |(v, w), e| (v.max(e.speed.abs()), w.max(e.yaw_rate.abs())));
    Ok(AblationData {
        train,
        val,
        test,
        max_ego_speed: speed,
        max_ego_yaw_rate: yaw,
    })
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub seed: u64,
    pub kind: ModelKind,
    pub report: EvalReport,
    pub epochs: usize,
    pub seconds: f64,
}

impl AblationRow {
    pub fn csv(&self) -> String {
        let ap = self.report.overall.as_ref().map(|o| o.ap).unwrap_or_default();
        format!(
            "{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{},{:.0}",
            self.seed,
            self.kind.name(),
            self.report.map(),
            ap[0],
            ap[1],
            ap[2],
            ap[3],
            self.epochs,
            self.seconds
        )
    }
}

pub const ABLATION_HEADER: &str = "seed,model,mAP,AP@0.5,AP@1,AP@2,AP@4,epochs,seconds";

/// Trains the fusion model and the single-frame baseline with training seed
/// `seed` and evaluates both on the test split. Runs go to `out/<model>`.
pub fn ablation_seed(config: &RunConfig, data: &AblationData, seed: u64, out: &Path) -> Result<[AblationRow; 2]> {
    let run = |kind: ModelKind| -> Result<AblationRow> {
        let mut c = config.clone();
        c.model.kind = kind;
        c.train.seed = seed;
        let start = Instant::now();
        let outcome = train::train(&c, &data.train, &data.val, &out.join(kind.name()), false)?;
        let report = evaluate(&outcome.detector, &data.test, &c.eval)?;
        Ok(AblationRow {
            seed,
            kind,
            report,
            epochs: outcome.history.len(),
            seconds: start.elapsed().as_secs_f64(),
        })
    };
    Ok([run(ModelKind::AttentiveGru)?, run(ModelKind::Baseline)?])
}

/// Evaluates the model at `checkpoint` on `data` and writes `metrics.csv`,
/// the PR curves and the config echo to `out`.
pub fn eval_command(config: &RunConfig, checkpoint: &Path, data: &Path, out: &Path) -> Result<EvalReport> {
    config.validate()?;
    let detector = train::load_model(config, checkpoint)?;
    let samples = train::load_samples(config, data)?;
    let report = evaluate(&detector, &samples, &config.eval)?;
    report.write(out)?;
    config.echo(out)?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchRow {
    pub frames: usize,
    /// Median wall time of the fusion-layer forward pass.
    pub wall_ms: f64,
    pub mac_count: u64,
    pub state_bytes: usize,
}

pub const BENCH_HEADER: &str = "T,wall_ms,mac_count,state_bytes";

impl BenchRow {
    pub fn csv(&self) -> String {
        format!("{},{:.3},{},{}", self.frames, self.wall_ms, self.mac_count, self.state_bytes)
    }
}

/// Times the fusion layer on random feature maps of the fused-map size for
/// each sequence length in `lengths`, taking the median of `repeats` runs.
pub fn bench(model: &ModelConfig, lengths: &[usize], repeats: usize, seed: u64) -> Result<Vec<BenchRow>> {
    model.validate()?;
    let grid = model.head_grid()?;
    let (h, w, d) = (grid.range_bins, grid.azimuth_bins, model.channels());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let layer = FusionLayer::new(&mut store, &mut rng, &model.fusion);
    let mut rows = Vec::new();
    for &t in lengths {
        if t == 0 {
            return Err(Error::InvalidArgument("sequence length must be positive".into()));
        }
        let frames: Vec<Tensor> = (0..t).map(|_| uniform(&mut rng, &[1, d, h, w], 1.0)).collect();
        let mut times = Vec::new();
        let mut macs = 0;
        for _ in 0..repeats.max(1) {
            let mut tape = Tape::new();
            let p = store.bind_frozen(&mut tape);
            let vars: Vec<Var> = frames.iter().map(|f| tape.constant(f.clone())).collect();
            tape.reset_macs();
            let start = Instant::now();
            layer.forward(&mut tape, &p, &vars)?;
            times.push(start.elapsed().as_secs_f64() * 1e3);
            macs = tape.macs();
        }
        times.sort_by(f64::total_cmp);
        let n = times.len();
        let wall_ms = if n % 2 == 1 { times[n / 2] } else { 0.5 * (times[n / 2 - 1] + times[n / 2]) };
        rows.push(BenchRow {
            frames: t,
            wall_ms,
            mac_count: macs,
            state_bytes: layer.state_bytes(h, w),
        });
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = format!("{BENCH_HEADER}\n");
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckSettings {
    pub epsilon: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings {
            epsilon: 1e-5,
            tolerance: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ComponentCheck {
    pub component: &'static str,
    /// What was perturbed, e.g. `input` or `weight`.
    pub wrt: String,
    pub report: GradCheckReport,
}

#[derive(Clone, Debug)]
pub struct GradCheckSummary {
    pub checks: Vec<ComponentCheck>,
    /// `[block][query]` gradient norm of every latent query on one training
    /// sample.
    pub query_grad_norms: Vec<Vec<f64>>,
    pub tolerance: f64,
}

impl GradCheckSummary {
    /// Names of the components that failed the tolerance.
    pub fn failures(&self) -> Vec<&'static str> {
        let mut out: Vec<&'static str> = Vec::new();
        for c in &self.checks {
            if !c.report.passes(self.tolerance) && !out.contains(&c.component) {
                out.push(c.component);
            }
        }
        out
    }

    pub fn dead_queries(&self) -> usize {
        self.query_grad_norms.iter().flatten().filter(|n| !(**n > 0.0)).count()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty() && self.dead_queries() == 0
    }

    /// `Err` naming every failed component.
    pub fn ensure_passed(&self) -> Result<()> {
        let mut failed: Vec<String> = self.failures().iter().map(|c| c.to_string()).collect();
        if self.dead_queries() > 0 {
            failed.push(format!("latent queries ({} without gradient)", self.dead_queries()));
        }
        if failed.is_empty() {
            Ok(())
        } else {
            Err(Error::GradCheck(failed.join(", ")))
        }
    }

    pub fn table(&self) -> String {
        let mut s = String::from("component,wrt,checked,skipped,max_rel_error,status\n");
        for c in &self.checks {
            let status = if c.report.passes(self.tolerance) { "ok" } else { "FAIL" };
            s.push_str(&format!(
                "{},{},{},{},{:.3e},{}\n",
                c.component, c.wrt, c.report.checked, c.report.skipped, c.report.max_rel_error, status
            ));
        }
        for (b, row) in self.query_grad_norms.iter().enumerate() {
            let norms: Vec<String> = row.iter().map(|n| format!("{n:.3e}")).collect();
            s.push_str(&format!("query_grad_norm,block{b},{}\n", norms.join(" ")));
        }
        s
    }
}

/// Fixed random weights used to turn a tensor output into a scalar.
fn projection(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches")
}

/// Tiny fusion block with every parameter randomised, including the
/// otherwise zero-initialised offset predictor.
fn tiny_block(rng: &mut ChaCha8Rng, cfg: &FusionConfig, stride: usize) -> (ParamStore, FusionBlock) {
    let mut store = ParamStore::new();
    let block = FusionBlock::new(&mut store, rng, "block", cfg, stride);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let t = store.get_mut(id);
        for v in t.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    (store, block)
}

fn check(
    out: &mut Vec<ComponentCheck>,
    component: &'static str,
    wrt: &str,
    report: Result<GradCheckReport>,
) -> Result<()> {
    out.push(ComponentCheck {
        component,
        wrt: wrt.to_string(),
        report: report?,
    });
    Ok(())
}

/// Finite-difference checks of every differentiable component on tiny
/// shapes, plus the latent-query gradient norms of a small detector.
pub fn gradcheck(settings: &GradCheckSettings) -> Result<GradCheckSummary> {
    let eps = settings.epsilon;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut checks = Vec::new();

    // conv2d
    {
        let x = rand_tensor(&mut rng, &[2, 2, 6, 5], -1.0, 1.0);
        let k = rand_tensor(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[3], -1.0, 1.0);
        let geom = ConvGeom::symmetric(1, 1);
        let w = projection(&mut rng, 2 * 3 * 6 * 5);
        let (kc, bc, wc) = (k.clone(), b.clone(), w.clone());
        let r = grad_check(
            move |t, x| {
                let k = t.constant(kc.clone());
                let b = t.constant(bc.clone());
                let y = t.conv2d(x, k, Some(b), geom)?;
                t.dot_const(y, &wc)
            },
            &x,
            eps,
        );
        check(&mut checks, "conv2d", "input", r)?;
        let (xc, bc) = (x.clone(), b.clone());
        let r = grad_check(
            move |t, k| {
                let x = t.constant(xc.clone());
                let b = t.constant(bc.clone());
                let y = t.conv2d(x, k, Some(b), geom)?;
                t.dot_const(y, &w)
            },
            &k,
            eps,
        );
        check(&mut checks, "conv2d", "weight", r)?;
    }

    // deform_conv2d
    {
        let (c, h, w, s) = (2, 5, 5, 3);
        let x = rand_tensor(&mut rng, &[1, c, h, w], -1.0, 1.0);
        let k = rand_tensor(&mut rng, &[2, c, s, s], -1.0, 1.0);
        let off = rand_tensor(&mut rng, &[1, 2 * s * s, h, w], -0.9, 0.9);
        let proj = projection(&mut rng, 2 * h * w);
        let inputs = [("input", x.clone()), ("weight", k.clone()), ("offsets", off.clone())];
        for (i, (name, point)) in inputs.iter().enumerate() {
            let (xc, kc, oc, pc) = (x.clone(), k.clone(), off.clone(), proj.clone());
            let r = grad_check(
                move |t, v| {
                    let xv = if i == 0 { v } else { t.constant(xc.clone()) };
                    let kv = if i == 1 { v } else { t.constant(kc.clone()) };
                    let ov = if i == 2 { v } else { t.constant(oc.clone()) };
                    let y = t.deform_conv2d(xv, kv, ov)?;
                    t.dot_const(y, &pc)
                },
                point,
                eps,
            );
            check(&mut checks, "deform_conv2d", name, r)?;
        }
    }

    let cfg = FusionConfig {
        channels: 3,
        queries: 4,
        block_strides: vec![1, 1],
        kernel: 3,
        ..FusionConfig::default()
    };
    let (h, w) = (4, 4);
    let state_shape = [1, cfg.channels, h, w];
    let n_state = cfg.channels * h * w;

    // state_integration
    {
        let (store, block) = tiny_block(&mut rng, &cfg, 1);
        let hp = rand_tensor(&mut rng, &state_shape, -1.0, 1.0);
        let xp = rand_tensor(&mut rng, &state_shape, -1.0, 1.0);
        let proj = projection(&mut rng, n_state);
        for (i, name) in ["h_prev", "x"].into_iter().enumerate() {
            let point = if i == 0 { &hp } else { &xp };
            let (st, bl, hc, xc, pc) = (&store, &block, hp.clone(), xp.clone(), proj.clone());
            let r = grad_check(
                move |t, v| {
                    let p = st.bind_frozen(t);
                    let hv = if i == 0 { v } else { t.constant(hc.clone()) };
                    let xv = if i == 1 { v } else { t.constant(xc.clone()) };
                    let y = bl.state_integration(t, &p, hv, xv)?;
                    t.dot_const(y, &pc)
                },
                point,
                eps,
            );
            check(&mut checks, "state_integration", name, r)?;
        }
        for pname in ["gate_l1.weight", "candidate.weight", "deform", "offset.weight"] {
            let id = store.id(&format!("block.{pname}")).expect("block parameter");
            let (st, bl, hc, xc, pc) = (&store, &block, hp.clone(), xp.clone(), proj.clone());
            let r = grad_check(
                move |t, v| {
                    let mut p = st.bind_frozen(t);
                    p.replace(id, v);
                    let hv = t.constant(hc.clone());
                    let xv = t.constant(xc.clone());
                    let y = bl.state_integration(t, &p, hv, xv)?;
                    t.dot_const(y, &pc)
                },
                store.get(id),
                eps,
            );
            check(&mut checks, "state_integration", pname, r)?;
        }
    }

    // fusion_block_forward, both strides
    for stride in [1, 2] {
        let (store, block) = tiny_block(&mut rng, &cfg, stride);
        let present = rand_tensor(&mut rng, &state_shape, -1.0, 1.0);
        let memory = rand_tensor(&mut rng, &state_shape, -1.0, 1.0);
        let proj = projection(&mut rng, n_state);
        let qid = block.queries;
        let points = [("present", present.clone()), ("memory", memory.clone()), ("queries", store.get(qid).clone())];
        for (i, (name, point)) in points.iter().enumerate() {
            let (st, bl, pr, me, pc) = (&store, &block, present.clone(), memory.clone(), proj.clone());
            let mode = cfg.mode;
            let r = grad_check(
                move |t, v| {
                    let mut p = st.bind_frozen(t);
                    let pv = if i == 0 { v } else { t.constant(pr.clone()) };
                    let mv = if i == 1 { v } else { t.constant(me.clone()) };
                    if i == 2 {
                        p.replace(qid, v);
                    }
                    let y = bl.forward(t, &p, pv, mv, mode)?;
                    t.dot_const(y, &pc)
                },
                point,
                eps,
            );
            let wrt = format!("{name}@stride{stride}");
            check(&mut checks, "fusion_block_forward", &wrt, r)?;
        }
    }

    // fusion_layer_forward at T = 2
    {
        let mut store = ParamStore::new();
        let layer = FusionLayer::new(&mut store, &mut rng, &cfg);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            for v in store.get_mut(id).data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
        let frames = [
            rand_tensor(&mut rng, &state_shape, -1.0, 1.0),
            rand_tensor(&mut rng, &state_shape, -1.0, 1.0),
        ];
        let proj = projection(&mut rng, n_state);
        for i in 0..2 {
            let (st, ly, fr, pc) = (&store, &layer, frames.clone(), proj.clone());
            let r = grad_check(
                move |t, v| {
                    let p = st.bind_frozen(t);
                    let vars: Vec<Var> = (0..2).map(|j| if j == i { v } else { t.constant(fr[j].clone()) }).collect();
                    let y = ly.forward(t, &p, &vars)?;
                    t.dot_const(y, &pc)
                },
                &frames[i],
                eps,
            );
            check(&mut checks, "fusion_layer_forward", &format!("frame{i}"), r)?;
        }
        let id = store.id("fusion.block0.deform").expect("layer parameter");
        let (st, ly, fr, pc) = (&store, &layer, frames.clone(), proj.clone());
        let r = grad_check(
            move |t, v| {
                let mut p = st.bind_frozen(t);
                p.replace(id, v);
                let vars: Vec<Var> = fr.iter().map(|f| t.constant(f.clone())).collect();
                let y = ly.forward(t, &p, &vars)?;
                t.dot_const(y, &pc)
            },
            store.get(id),
            eps,
        );
        check(&mut checks, "fusion_layer_forward", "block0.deform", r)?;
    }

    // focal loss
    {
        let n = 40;
        let pred = rand_tensor(&mut rng, &[n], 0.05, 0.95);
        let target: Vec<f64> = (0..n)
            .map(|i| if i % 7 == 0 { 1.0 } else { rng.random_range(0.0..0.9) })
            .collect();
        let r = grad_check(move |t, p| t.focal_loss(p, &target, FocalParams::default()), &pred, eps);
        check(&mut checks, "focal_loss", "pred", r)?;
    }

    // smooth-L1 loss, away from the |d| = beta kink
    {
        let n = 40;
        let target = rand_tensor(&mut rng, &[n], -2.0, 2.0);
        let pred = Tensor::from_fn(&[n], |i| {
            let mag = if i % 2 == 0 { rng.random_range(0.05..0.9) } else { rng.random_range(1.1..3.0) };
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            target.data()[i] + sign * mag
        });
        let mask: Vec<bool> = (0..n).map(|i| i % 5 != 0).collect();
        let td = target.data().to_vec();
        let r = grad_check(move |t, p| t.smooth_l1_loss(p, &td, &mask, 1.0), &pred, eps);
        check(&mut checks, "smooth_l1_loss", "pred", r)?;
    }

    let query_grad_norms = query_gradient_norms(settings.seed)?;
    Ok(GradCheckSummary {
        checks,
        query_grad_norms,
        tolerance: settings.tolerance,
    })
}

/// Small detector configuration used for the query-gradient probe.
pub fn probe_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.model.grid.range_bins = 16;
    c.model.grid.azimuth_bins = 16;
    c.model.grid.channels = 4;
    c.model.frames = 2;
    c.model.fusion.channels = 4;
    c.model.fusion.queries = 4;
    c.model.fusion.block_strides = vec![1, 1];
    c.sim.frames = 2;
    c.sim.min_objects = 2;
    c
}

/// Gradient norm of every latent query for one T = 2 training sample that
/// contains at least one object.
pub fn query_gradient_norms(seed: u64) -> Result<Vec<Vec<f64>>> {
    let config = probe_config();
    let mut i = 0;
    let sample = loop {
        let scene = generate_scene(&config.sim, sequence_seed(seed, i))?;
        let seq = Sequence {
            seed: scene.seed,
            digest: config.sim.digest(),
            max_range: config.sim.max_range,
            fov: config.sim.fov,
            frames: render_scene(&scene)?,
        };
        let s = prepare_sample(&seq, &config.model)?;
        if !s.gt.is_empty() {
            break s;
        }
        i += 1;
    };
    let detector = Detector::new(&config.model, seed)?;
    let mut tape = Tape::new();
    let p = detector.store.bind(&mut tape);
    let vars = detector.forward(&mut tape, &p, &sample.inputs)?;
    let loss = crate::head::head_loss(&mut tape, &vars, &sample.targets, &config.train.loss_weights())?;
    let grads = tape.backward(loss.total)?;
    let layer = detector.fusion.as_ref().expect("probe uses the fusion model");
    Ok(layer
        .blocks
        .iter()
        .map(|b| {
            let g = grads.get_or_zeros(p.var(b.queries), config.model.fusion.queries * config.model.fusion.channels);
            g.chunks(config.model.fusion.channels)
                .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect()
        })
        .collect())
}
