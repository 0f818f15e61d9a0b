//! Synthetic multi-frame radar scenes.
//!
//! Scenes are generated in a world frame; frames are rendered in the ego
//! frame at their own timestamp (x forward along boresight, y to the left,
//! azimuth measured counter-clockwise from boresight). Reflections are
//! resampled independently every frame from the sensor-facing edges of each
//! box, so the same object never produces the same point pattern twice.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ObjectClass {
    Vehicle = 0,
    LargeVehicle = 1,
    Bike = 2,
    Pedestrian = 3,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 4] = [
        ObjectClass::Vehicle,
        ObjectClass::LargeVehicle,
        ObjectClass::Bike,
        ObjectClass::Pedestrian,
    ];
    pub const COUNT: usize = 4;

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ObjectClass::Vehicle => "vehicle",
            ObjectClass::LargeVehicle => "large_vehicle",
            ObjectClass::Bike => "bike",
            ObjectClass::Pedestrian => "pedestrian",
        }
    }

    /// `((width_min, width_max), (length_min, length_max))` in meters.
    pub fn size_bounds(self) -> ((f64, f64), (f64, f64)) {
        match self {
            ObjectClass::Vehicle => ((1.6, 2.2), (3.5, 5.5)),
            ObjectClass::LargeVehicle => ((2.2, 3.0), (6.0, 14.0)),
            ObjectClass::Bike => ((0.5, 1.0), (1.5, 2.5)),
            ObjectClass::Pedestrian => ((0.4, 0.8), (0.4, 0.8)),
        }
    }

    /// Speed range of moving instances, m/s.
    pub fn speed_bounds(self) -> (f64, f64) {
        match self {
            ObjectClass::Vehicle => (3.0, 15.0),
            ObjectClass::LargeVehicle => (3.0, 12.0),
            ObjectClass::Bike => (2.0, 7.0),
            ObjectClass::Pedestrian => (0.5, 2.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dynamics {
    Stationary,
    Moving,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneObject {
    pub class: ObjectClass,
    pub center: [f64; 2],
    /// `(width, length)`; length runs along `yaw`.
    pub size: [f64; 2],
    pub yaw: f64,
    pub velocity: [f64; 2],
    pub dynamics: Dynamics,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EgoState {
    pub position: [f64; 2],
    pub heading: f64,
    pub speed: f64,
    pub yaw_rate: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadarPoint {
    pub range: f64,
    pub azimuth: f64,
    /// Radial relative velocity, positive when receding.
    pub doppler: f64,
    pub amplitude: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GtBox {
    pub center: [f64; 2],
    pub width: f64,
    pub length: f64,
    pub yaw: f64,
    pub class: ObjectClass,
    pub velocity: [f64; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloudFrame {
    pub timestamp: f64,
    pub points: Vec<RadarPoint>,
    pub gt_boxes: Vec<GtBox>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub frames: usize,
    pub frame_period: f64,
    pub fov: f64,
    pub max_range: f64,
    pub min_object_range: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    pub moving_fraction: f64,
    pub accel_noise: f64,
    pub ego_speed: [f64; 2],
    pub ego_yaw_rate: [f64; 2],
    pub doppler_noise: f64,
    pub amplitude_noise: f64,
    pub amplitude_exponent: f64,
    pub amplitude_ref: f64,
    pub reference_range: f64,
    /// Expected reflections at `reference_range`, per class
    /// (vehicle, large vehicle, bike, pedestrian).
    pub point_rates: [f64; 4],
    pub dropout_base: f64,
    pub dropout_azimuth: f64,
    pub dropout_range: f64,
    pub clutter_rate: f64,
    pub clutter_amplitude: f64,
    pub placement_retries: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            frames: 4,
            frame_period: 0.1,
            fov: PI / 2.0,
            max_range: 64.0,
            min_object_range: 4.0,
            min_objects: 2,
            max_objects: 6,
            moving_fraction: 0.5,
            accel_noise: 0.5,
            ego_speed: [0.0, 12.0],
            ego_yaw_rate: [-0.15, 0.15],
            doppler_noise: 0.1,
            amplitude_noise: 0.25,
            amplitude_exponent: 2.0,
            amplitude_ref: 1.0,
            reference_range: 20.0,
            point_rates: [4.0, 8.0, 1.5, 1.0],
            dropout_base: 0.05,
            dropout_azimuth: 0.3,
            dropout_range: 0.2,
            clutter_rate: 10.0,
            clutter_amplitude: 0.3,
            placement_retries: 200,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("sim: {m}")));
        if self.frames == 0 {
            return bad("frames must be positive");
        }
        if !(self.frame_period > 0.0) || !(self.max_range > 0.0) {
            return bad("frame_period and max_range must be positive");
        }
        if !(self.fov > 0.0 && self.fov < 2.0 * PI) {
            return bad("fov must lie in (0, 2*pi)");
        }
        if self.min_objects > self.max_objects {
            return bad("min_objects exceeds max_objects");
        }
        if self.min_object_range >= self.max_range {
            return bad("min_object_range must be below max_range");
        }
        if self.ego_speed[0] < 0.0 || self.ego_speed[0] > self.ego_speed[1] {
            return bad("ego_speed must be a non-negative [min, max] range");
        }
        if self.ego_yaw_rate[0] > self.ego_yaw_rate[1] {
            return bad("ego_yaw_rate must be a [min, max] range");
        }
        let nonneg = [
            self.accel_noise,
            self.doppler_noise,
            self.amplitude_noise,
            self.clutter_rate,
            self.dropout_base,
            self.dropout_azimuth,
            self.dropout_range,
        ];
        if nonneg.iter().any(|v| !(*v >= 0.0)) || self.point_rates.iter().any(|v| !(*v >= 0.0)) {
            return bad("noise levels, rates and dropout terms must be non-negative");
        }
        Ok(())
    }

    /// SHA-256 over the canonical TOML rendering, hex encoded.
    pub fn digest(&self) -> String {
        let text = toml::to_string(self).expect("sim config serialises");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    /// Deterministic amplitude law `A0 cos^p(az) (r0 / r)^2` without noise.
    pub fn amplitude_law(&self, range: f64, azimuth: f64) -> f64 {
        self.amplitude_ref
            * azimuth.cos().powf(self.amplitude_exponent)
            * (self.reference_range / range).powi(2)
    }

    pub fn dropout_probability(&self, range: f64, azimuth: f64) -> f64 {
        let half = self.fov / 2.0;
        (self.dropout_base + self.dropout_azimuth * (azimuth.abs() / half) + self.dropout_range * (range / self.max_range))
            .clamp(0.0, 0.95)
    }
}

/// Objects and ego trajectory over every frame of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub config: SimConfig,
    pub seed: u64,
    /// `objects[t][i]` is object `i` at frame `t`.
    pub objects: Vec<Vec<SceneObject>>,
    ego: Vec<EgoState>,
}

impl Scene {
    pub fn frames(&self) -> usize {
        self.objects.len()
    }

    /// Ego pose at frame `t`. Only the simulator and its tests use this;
    /// nothing downstream of the point clouds ever sees it.
    pub fn ego_pose(&self, t: usize) -> &EgoState {
        &self.ego[t]
    }
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn wrap_angle(a: f64) -> f64 {
    let mut a = a % (2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    } else if a < -PI {
        a += 2.0 * PI;
    }
    a
}

fn ego_at(speed: f64, yaw_rate: f64, t: f64) -> EgoState {
    let heading = yaw_rate * t;
    let position = if yaw_rate.abs() < 1e-12 {
        [speed * t, 0.0]
    } else {
        let r = speed / yaw_rate;
        [r * heading.sin(), r * (1.0 - heading.cos())]
    };
    EgoState {
        position,
        heading,
        speed,
        yaw_rate,
    }
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

pub fn generate_scene(config: &SimConfig, seed: u64) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let speed = uniform(&mut rng, config.ego_speed[0], config.ego_speed[1]);
    let yaw_rate = uniform(&mut rng, config.ego_yaw_rate[0], config.ego_yaw_rate[1]);
    let ego: Vec<EgoState> = (0..config.frames)
        .map(|t| ego_at(speed, yaw_rate, t as f64 * config.frame_period))
        .collect();

    let count = rng.random_range(config.min_objects..=config.max_objects);
    let mut placed: Vec<SceneObject> = Vec::with_capacity(count);
    let half = config.fov / 2.0;
    for _ in 0..count {
        let class = ObjectClass::ALL[rng.random_range(0..ObjectClass::COUNT)];
        let ((wl, wh), (ll, lh)) = class.size_bounds();
        let size = [uniform(&mut rng, wl, wh), uniform(&mut rng, ll, lh)];
        let moving = rng.random::<f64>() < config.moving_fraction;
        let heading = rng.random_range(-PI..PI);
        let (velocity, dynamics) = if moving {
            let (sl, sh) = class.speed_bounds();
            let s = uniform(&mut rng, sl, sh);
            ([s * heading.cos(), s * heading.sin()], Dynamics::Moving)
        } else {
            ([0.0, 0.0], Dynamics::Stationary)
        };
        let radius = 0.5 * size[0].hypot(size[1]);
        let mut spot = None;
        for _ in 0..config.placement_retries {
            let r = uniform(&mut rng, config.min_object_range, config.max_range - 2.0);
            let az = uniform(&mut rng, -0.9 * half, 0.9 * half);
            let c = [r * az.cos(), r * az.sin()];
            let clear = placed.iter().all(|o| {
                let other = 0.5 * o.size[0].hypot(o.size[1]);
                (o.center[0] - c[0]).hypot(o.center[1] - c[1]) > radius + other + 0.5
            });
            if clear {
                spot = Some(c);
                break;
            }
        }
        let Some(center) = spot else {
            return Err(Error::Capacity(format!(
                "could not place object {} of {count} without overlap after {} tries",
                placed.len() + 1,
                config.placement_retries
            )));
        };
        placed.push(SceneObject {
            class,
            center,
            size,
            yaw: heading,
            velocity,
            dynamics,
        });
    }

    let mut objects = Vec::with_capacity(config.frames);
    objects.push(placed);
    let dt = config.frame_period;
    for _ in 1..config.frames {
        let prev = objects.last().unwrap();
        let next: Vec<SceneObject> = prev
            .iter()
            .map(|o| {
                // draw for every object so the stream does not depend on dynamics
                let ax: f64 = rng.sample(StandardNormal);
                let ay: f64 = rng.sample(StandardNormal);
                if o.dynamics == Dynamics::Stationary {
                    return *o;
                }
                let mut n = *o;
                n.center = [o.center[0] + o.velocity[0] * dt, o.center[1] + o.velocity[1] * dt];
                n.velocity = [
                    o.velocity[0] + config.accel_noise * ax * dt,
                    o.velocity[1] + config.accel_noise * ay * dt,
                ];
                if n.velocity[0] != 0.0 || n.velocity[1] != 0.0 {
                    n.yaw = n.velocity[1].atan2(n.velocity[0]);
                }
                n
            })
            .collect();
        objects.push(next);
    }
    Ok(Scene {
        config: config.clone(),
        seed,
        objects,
        ego,
    })
}

/// World point to ego frame at `ego`.
pub fn to_ego_frame(ego: &EgoState, p: [f64; 2]) -> [f64; 2] {
    let (s, c) = ego.heading.sin_cos();
    let dx = p[0] - ego.position[0];
    let dy = p[1] - ego.position[1];
    [c * dx + s * dy, -s * dx + c * dy]
}

fn rotate_into(ego: &EgoState, v: [f64; 2]) -> [f64; 2] {
    let (s, c) = ego.heading.sin_cos();
    [c * v[0] + s * v[1], -s * v[0] + c * v[1]]
}

/// Ground-truth box of `o` in the ego frame.
pub fn gt_box(ego: &EgoState, o: &SceneObject) -> GtBox {
    GtBox {
        center: to_ego_frame(ego, o.center),
        width: o.size[0],
        length: o.size[1],
        yaw: wrap_angle(o.yaw - ego.heading),
        class: o.class,
        velocity: rotate_into(ego, o.velocity),
    }
}

/// Radial velocity of a point at ego-frame position `p` moving with
/// world-frame-aligned ego-frame velocity `v`, relative to the sensor.
pub fn radial_velocity(ego: &EgoState, p: [f64; 2], v_ego_frame: [f64; 2]) -> f64 {
    let r = p[0].hypot(p[1]);
    // rotation of the sensor adds only a tangential component at p
    let rel = [v_ego_frame[0] - ego.speed, v_ego_frame[1]];
    (rel[0] * p[0] + rel[1] * p[1]) / r
}

/// Sensor-facing edges of a box as `(start, end)` segments in the ego frame.
fn facing_edges(b: &GtBox) -> Vec<([f64; 2], [f64; 2])> {
    let (s, c) = b.yaw.sin_cos();
    let (hl, hw) = (0.5 * b.length, 0.5 * b.width);
    let corner = |u: f64, v: f64| [b.center[0] + c * u - s * v, b.center[1] + s * u + c * v];
    // (outward normal in box coords, edge end points)
    let edges = [
        ([1.0, 0.0], corner(hl, -hw), corner(hl, hw)),
        ([-1.0, 0.0], corner(-hl, hw), corner(-hl, -hw)),
        ([0.0, 1.0], corner(hl, hw), corner(-hl, hw)),
        ([0.0, -1.0], corner(-hl, -hw), corner(hl, -hw)),
    ];
    let mut out = Vec::with_capacity(2);
    for (n, a, e) in edges {
        let nw = [c * n[0] - s * n[1], s * n[0] + c * n[1]];
        let mid = [0.5 * (a[0] + e[0]), 0.5 * (a[1] + e[1])];
        if nw[0] * -mid[0] + nw[1] * -mid[1] > 0.0 {
            out.push((a, e));
        }
    }
    out
}

/// Renders frame `frame_index` of `scene` as a radar point cloud.
pub fn render_frame(scene: &Scene, frame_index: usize, seed: u64) -> Result<PointCloudFrame> {
    let cfg = &scene.config;
    if frame_index >= scene.frames() {
        return Err(Error::InvalidArgument(format!(
            "frame index {frame_index} out of range for {} frames",
            scene.frames()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(frame_index as u64)));
    let ego = scene.ego[frame_index];
    let half = cfg.fov / 2.0;
    let mut points = Vec::new();
    let mut gt_boxes = Vec::new();

    let emit = |rng: &mut ChaCha8Rng, p: [f64; 2], v: [f64; 2], a0: f64, points: &mut Vec<RadarPoint>| {
        let range = p[0].hypot(p[1]);
        let azimuth = p[1].atan2(p[0]);
        let keep: f64 = rng.random();
        let zn: f64 = rng.sample(StandardNormal);
        let zd: f64 = rng.sample(StandardNormal);
        if range <= 0.0 || range > cfg.max_range || azimuth.abs() > half {
            return;
        }
        if keep < cfg.dropout_probability(range, azimuth) {
            return;
        }
        let amplitude = a0 * cfg.amplitude_law(range, azimuth) * (cfg.amplitude_noise * zn).exp();
        let doppler = radial_velocity(&ego, p, v) + cfg.doppler_noise * zd;
        points.push(RadarPoint {
            range,
            azimuth,
            doppler,
            amplitude,
        });
    };

    for o in &scene.objects[frame_index] {
        let b = gt_box(&ego, o);
        let range = b.center[0].hypot(b.center[1]);
        let az = b.center[1].atan2(b.center[0]);
        if range > cfg.max_range || az.abs() > half || range < 0.5 {
            continue;
        }
        gt_boxes.push(b);
        let lambda = cfg.point_rates[o.class.id()] * cfg.reference_range / range;
        let k = if lambda > 0.0 {
            Poisson::new(lambda).expect("positive rate").sample(&mut rng) as usize
        } else {
            0
        };
        let edges = facing_edges(&b);
        // the sensor sits inside the box: nothing faces it
        let k = if edges.is_empty() { 0 } else { k };
        let lengths: Vec<f64> = edges.iter().map(|(a, e)| (e[0] - a[0]).hypot(e[1] - a[1])).collect();
        let total: f64 = lengths.iter().sum();
        for _ in 0..k {
            let mut u: f64 = rng.random::<f64>() * total;
            let t: f64 = rng.random();
            let mut chosen = edges.len() - 1;
            for (i, l) in lengths.iter().enumerate() {
                if u < *l {
                    chosen = i;
                    break;
                }
                u -= l;
            }
            let (a, e) = edges[chosen];
            let p = [a[0] + t * (e[0] - a[0]), a[1] + t * (e[1] - a[1])];
            emit(&mut rng, p, b.velocity, 1.0, &mut points);
        }
    }

    let clutter = if cfg.clutter_rate > 0.0 {
        Poisson::new(cfg.clutter_rate).expect("positive rate").sample(&mut rng) as usize
    } else {
        0
    };
    for _ in 0..clutter {
        let r = uniform(&mut rng, 1.0, cfg.max_range);
        let az = uniform(&mut rng, -half, half);
        let p = [r * az.cos(), r * az.sin()];
        // static world reflector: zero world velocity seen from the ego frame
        emit(&mut rng, p, [0.0, 0.0], cfg.clutter_amplitude, &mut points);
    }

    Ok(PointCloudFrame {
        timestamp: frame_index as f64 * cfg.frame_period,
        points,
        gt_boxes,
    })
}

/// Renders every frame with a render seed derived from the scene seed.
pub fn render_scene(scene: &Scene) -> Result<Vec<PointCloudFrame>> {
    let seed = splitmix64(scene.seed ^ 0x5eed_0f_f00d);
    (0..scene.frames()).map(|t| render_frame(scene, t, seed)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> SimConfig {
        SimConfig {
            doppler_noise: 0.0,
            amplitude_noise: 0.0,
            accel_noise: 0.0,
            clutter_rate: 0.0,
            dropout_base: 0.0,
            dropout_azimuth: 0.0,
            dropout_range: 0.0,
            ..SimConfig::default()
        }
    }

    fn single(cfg: &SimConfig, obj: SceneObject, speed: f64) -> Scene {
        Scene {
            config: cfg.clone(),
            seed: 1,
            objects: vec![vec![obj]; cfg.frames],
            ego: (0..cfg.frames).map(|t| ego_at(speed, 0.0, t as f64 * cfg.frame_period)).collect(),
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let cfg = SimConfig::default();
        let a = generate_scene(&cfg, 7).unwrap();
        let b = generate_scene(&cfg, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(render_scene(&a).unwrap(), render_scene(&b).unwrap());
        let c = generate_scene(&cfg, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_objects_yields_only_clutter() {
        let cfg = SimConfig {
            min_objects: 0,
            max_objects: 0,
            ..SimConfig::default()
        };
        let scene = generate_scene(&cfg, 3).unwrap();
        for f in render_scene(&scene).unwrap() {
            assert!(f.gt_boxes.is_empty());
            for p in &f.points {
                // clutter is static: doppler within noise of the ego-induced value
                assert!(p.range <= cfg.max_range);
            }
        }
    }

    #[test]
    fn constant_velocity_without_accel_noise() {
        let cfg = SimConfig {
            accel_noise: 0.0,
            moving_fraction: 1.0,
            ..SimConfig::default()
        };
        let scene = generate_scene(&cfg, 11).unwrap();
        for t in 1..scene.frames() {
            for (a, b) in scene.objects[t - 1].iter().zip(&scene.objects[t]) {
                for k in 0..2 {
                    let disp = b.center[k] - a.center[k];
                    let expect = a.velocity[k] * cfg.frame_period;
                    assert!((disp - expect).abs() <= 1e-12 * (1.0 + a.center[k].abs()));
                    assert_eq!(a.velocity[k], b.velocity[k]);
                }
            }
        }
    }

    #[test]
    fn placement_capacity_error() {
        let cfg = SimConfig {
            min_objects: 400,
            max_objects: 400,
            placement_retries: 20,
            ..SimConfig::default()
        };
        assert!(matches!(generate_scene(&cfg, 1), Err(Error::Capacity(_))));
    }

    #[test]
    fn stationary_object_stationary_ego_has_zero_doppler() {
        let cfg = quiet();
        let obj = SceneObject {
            class: ObjectClass::LargeVehicle,
            center: [15.0, 3.0],
            size: [2.5, 10.0],
            yaw: 0.3,
            velocity: [0.0, 0.0],
            dynamics: Dynamics::Stationary,
        };
        let scene = single(&cfg, obj, 0.0);
        let mut seen = 0;
        for t in 0..cfg.frames {
            let f = render_frame(&scene, t, 5).unwrap();
            for p in &f.points {
                assert_eq!(p.doppler, 0.0);
                seen += 1;
            }
        }
        assert!(seen > 0);
    }

    #[test]
    fn head_on_approach_is_negative_doppler() {
        let cfg = quiet();
        let obj = SceneObject {
            class: ObjectClass::Vehicle,
            center: [30.0, 0.0],
            size: [2.0, 4.0],
            yaw: PI,
            velocity: [-10.0, 0.0],
            dynamics: Dynamics::Moving,
        };
        let scene = single(&cfg, obj, 0.0);
        let ego = scene.ego_pose(0);
        // on boresight the radial direction is exactly +x
        assert_eq!(radial_velocity(ego, [28.0, 0.0], [-10.0, 0.0]), -10.0);
        let f = render_frame(&scene, 0, 9).unwrap();
        assert!(!f.points.is_empty());
        for p in &f.points {
            let pos = [p.range * p.azimuth.cos(), p.range * p.azimuth.sin()];
            assert!((p.doppler - (-10.0 * pos[0] / p.range)).abs() < 1e-9);
            assert!(p.doppler < -9.0);
        }
    }

    #[test]
    fn amplitude_ratio_follows_boresight_law() {
        let cfg = quiet();
        for a in [0.1, 0.4, 0.7] {
            let ratio = cfg.amplitude_law(25.0, a) / cfg.amplitude_law(25.0, 0.0);
            assert!((ratio - a.cos().powf(cfg.amplitude_exponent)).abs() < 1e-15);
        }
        // rendered points carry exactly the law when noise is off
        let obj = SceneObject {
            class: ObjectClass::LargeVehicle,
            center: [20.0, 8.0],
            size: [2.5, 8.0],
            yaw: 1.0,
            velocity: [0.0, 0.0],
            dynamics: Dynamics::Stationary,
        };
        let scene = single(&cfg, obj, 0.0);
        let f = render_frame(&scene, 0, 2).unwrap();
        for p in &f.points {
            assert_eq!(p.amplitude, cfg.amplitude_law(p.range, p.azimuth));
        }
    }

    #[test]
    fn facing_edges_face_the_sensor() {
        let b = GtBox {
            center: [20.0, 0.0],
            width: 2.0,
            length: 4.0,
            yaw: 0.0,
            class: ObjectClass::Vehicle,
            velocity: [0.0, 0.0],
        };
        let edges = facing_edges(&b);
        // the rear edge (x = 18) faces the sensor, the sides are edge-on
        assert_eq!(edges.len(), 1);
        assert!(edges[0].0[0] == 18.0 && edges[0].1[0] == 18.0);
    }
}
