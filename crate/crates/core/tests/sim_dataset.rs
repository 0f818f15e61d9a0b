use attentive_gru::dataset::{format_sequence, parse_sequences, read_dataset, write_dataset, Sequence};
use attentive_gru::sim::{generate_scene, render_scene, EgoState, GtBox, SimConfig};
use std::path::Path;

fn single_object_config() -> SimConfig {
    SimConfig {
        min_objects: 1,
        max_objects: 1,
        clutter_rate: 0.0,
        doppler_noise: 0.0,
        dropout_base: 0.0,
        dropout_azimuth: 0.0,
        dropout_range: 0.0,
        frames: 8,
        ego_speed: [5.0, 10.0],
        ego_yaw_rate: [0.05, 0.1],
        ..SimConfig::default()
    }
}

fn wrap(a: f64) -> f64 {
    let mut a = a % (2.0 * std::f64::consts::PI);
    if a > std::f64::consts::PI {
        a -= 2.0 * std::f64::consts::PI;
    } else if a < -std::f64::consts::PI {
        a += 2.0 * std::f64::consts::PI;
    }
    a
}

/// Ego frame `a` to ego frame `b`, written out from the poses.
fn transfer(p: [f64; 2], a: &EgoState, b: &EgoState) -> [f64; 2] {
    let world = [
        a.position[0] + a.heading.cos() * p[0] - a.heading.sin() * p[1],
        a.position[1] + a.heading.sin() * p[0] + a.heading.cos() * p[1],
    ];
    let d = [world[0] - b.position[0], world[1] - b.position[1]];
    [
        b.heading.cos() * d[0] + b.heading.sin() * d[1],
        -b.heading.sin() * d[0] + b.heading.cos() * d[1],
    ]
}

fn point_xy(r: f64, az: f64) -> [f64; 2] {
    [r * az.cos(), r * az.sin()]
}

/// Distance from `p` to the outline of `b`.
fn outline_distance(b: &GtBox, p: [f64; 2]) -> f64 {
    let (s, c) = b.yaw.sin_cos();
    let d = [p[0] - b.center[0], p[1] - b.center[1]];
    let u = (c * d[0] + s * d[1]).abs();
    let v = (-s * d[0] + c * d[1]).abs();
    let (hl, hw) = (b.length / 2.0, b.width / 2.0);
    if u <= hl && v <= hw {
        (hl - u).min(hw - v)
    } else {
        (u - hl).max(0.0).hypot((v - hw).max(0.0))
    }
}

#[test]
fn reflections_lie_on_the_outline_and_move_between_frames() {
    let cfg = single_object_config();
    let mut spread = 0;
    for seed in 0..10 {
        let scene = generate_scene(&cfg, seed).unwrap();
        let frames = render_scene(&scene).unwrap();
        let mut offsets = Vec::new();
        for f in &frames {
            let Some(b) = f.gt_boxes.first() else { continue };
            if f.points.is_empty() {
                continue;
            }
            let mut mean = [0.0; 2];
            for p in &f.points {
                let xy = point_xy(p.range, p.azimuth);
                assert!(outline_distance(b, xy) < 1e-9);
                mean[0] += (xy[0] - b.center[0]) / f.points.len() as f64;
                mean[1] += (xy[1] - b.center[1]) / f.points.len() as f64;
            }
            offsets.push(mean);
        }
        if offsets.len() >= 2 {
            let m = offsets.iter().fold([0.0; 2], |a, o| [a[0] + o[0], a[1] + o[1]]);
            let n = offsets.len() as f64;
            let var: f64 = offsets
                .iter()
                .map(|o| (o[0] - m[0] / n).powi(2) + (o[1] - m[1] / n).powi(2))
                .sum::<f64>()
                / n;
            assert!(var > 0.0, "seed {seed}: reflection origin is fixed");
            spread += 1;
        }
    }
    assert!(spread >= 5);
}

#[test]
fn doppler_is_radial_relative_velocity() {
    let cfg = single_object_config();
    let mut checked = 0;
    for seed in 0..10 {
        let scene = generate_scene(&cfg, seed).unwrap();
        let frames = render_scene(&scene).unwrap();
        for (t, f) in frames.iter().enumerate() {
            let Some(b) = f.gt_boxes.first() else { continue };
            let ego = scene.ego_pose(t);
            for p in &f.points {
                let [x, y] = point_xy(p.range, p.azimuth);
                let want = ((b.velocity[0] - ego.speed) * x + b.velocity[1] * y) / p.range;
                assert!((p.doppler - want).abs() < 1e-9, "{} vs {want}", p.doppler);
                checked += 1;
            }
        }
    }
    assert!(checked > 100);
}

#[test]
fn stationary_boxes_follow_ego_motion() {
    let cfg = SimConfig {
        frames: 6,
        moving_fraction: 0.3,
        ego_speed: [4.0, 12.0],
        ego_yaw_rate: [-0.15, 0.15],
        ..SimConfig::default()
    };
    let mut matched = 0;
    for seed in 0..20 {
        let scene = generate_scene(&cfg, seed).unwrap();
        let frames = render_scene(&scene).unwrap();
        for t in 0..frames.len() - 1 {
            let (a, b) = (scene.ego_pose(t), scene.ego_pose(t + 1));
            for bx in frames[t].gt_boxes.iter().filter(|g| g.velocity == [0.0, 0.0]) {
                let c = transfer(bx.center, a, b);
                let Some(next) = frames[t + 1]
                    .gt_boxes
                    .iter()
                    .find(|g| (g.center[0] - c[0]).hypot(g.center[1] - c[1]) < 1e-6)
                else {
                    continue;
                };
                assert!((next.center[0] - c[0]).abs() < 1e-9 && (next.center[1] - c[1]).abs() < 1e-9);
                assert!(wrap(next.yaw - (bx.yaw + a.heading - b.heading)).abs() < 1e-9);
                assert_eq!((next.width, next.length, next.class), (bx.width, bx.length, bx.class));
                matched += 1;
            }
        }
    }
    assert!(matched > 20, "only {matched} stationary boxes tracked");
}

#[test]
fn timestamps_increase_and_points_stay_in_the_field_of_view() {
    let cfg = SimConfig::default();
    for seed in 0..5 {
        let scene = generate_scene(&cfg, seed).unwrap();
        let frames = render_scene(&scene).unwrap();
        assert_eq!(frames.len(), cfg.frames);
        for w in frames.windows(2) {
            assert!(w[1].timestamp > w[0].timestamp);
        }
        for p in frames.iter().flat_map(|f| &f.points) {
            assert!(p.range > 0.0 && p.range <= cfg.max_range);
            assert!(p.azimuth.abs() <= cfg.fov / 2.0);
            assert!(p.amplitude > 0.0);
        }
    }
}

#[test]
fn rendering_is_deterministic_per_seed() {
    let cfg = SimConfig::default();
    let a = render_scene(&generate_scene(&cfg, 9).unwrap()).unwrap();
    let b = render_scene(&generate_scene(&cfg, 9).unwrap()).unwrap();
    let c = render_scene(&generate_scene(&cfg, 10).unwrap()).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn dataset_directory_round_trip() {
    let cfg = SimConfig::default();
    let scenes: Vec<_> = (0..3).map(|s| generate_scene(&cfg, s).unwrap()).collect();
    let dir = tempfile::tempdir().unwrap();
    let files = write_dataset(&scenes, dir.path(), &cfg.digest()).unwrap();
    assert_eq!(files.len(), 3);
    let back = read_dataset(dir.path()).unwrap();
    let want: Vec<Sequence> = scenes.iter().map(|s| Sequence::from_scene(s).unwrap()).collect();
    assert_eq!(back, want);
}

#[test]
fn malformed_records_name_the_line() {
    let scene = generate_scene(&SimConfig::default(), 4).unwrap();
    let text = format_sequence(&Sequence::from_scene(&scene).unwrap());
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let idx = lines.iter().position(|l| l.starts_with("p ")).expect("a point record");
    lines[idx] = "p 1.0 nonsense 0 1".into();
    let err = parse_sequences(Path::new("bad.txt"), &lines.join("\n")).unwrap_err();
    assert!(err.to_string().contains(&format!("record {}", idx + 1)), "{err}");
}
