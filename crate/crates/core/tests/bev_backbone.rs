use attentive_gru::backbone::{branch_geom, DynamicDownsample, Fpn, Stem, BRANCH_KERNELS};
use attentive_gru::bev::{batch_sequence, pillar_project, point_features, GridSpec, PillarEncoder};
use attentive_gru::params::ParamStore;
use attentive_gru::sim::{GtBox, ObjectClass, PointCloudFrame, RadarPoint};
use attentive_gru::tensor::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::{add, conv_oracle, max_pool2, param, random, relu, scale, upsample2};

fn pt(range: f64, azimuth: f64, doppler: f64, amplitude: f64) -> RadarPoint {
    RadarPoint { range, azimuth, doppler, amplitude }
}

fn frame(points: Vec<RadarPoint>, timestamp: f64) -> PointCloudFrame {
    PointCloudFrame { timestamp, points, gt_boxes: vec![] }
}

fn encoder(seed: u64) -> (ParamStore, PillarEncoder, GridSpec) {
    let spec = GridSpec::default();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let enc = PillarEncoder::new(&mut store, &mut rng, &spec);
    // nonzero bias so the oracle exercises it
    let b = store.id("pillar.bias").unwrap();
    *store.get_mut(b) = Tensor::from_fn(&[spec.channels], |i| 0.1 * i as f64 - 0.7);
    (store, enc, spec)
}

/// softplus(W^T f + b) for one point, written out by hand.
fn encode_oracle(store: &ParamStore, f: &[f64]) -> Vec<f64> {
    let w = param(store, "pillar.weight");
    let b = param(store, "pillar.bias");
    let (fin, c) = (w.shape()[0], w.shape()[1]);
    (0..c)
        .map(|o| {
            let z: f64 = (0..fin).map(|i| w.data()[i * c + o] * f[i]).sum::<f64>() + b.data()[o];
            z.max(0.0) + (-z.abs()).exp().ln_1p()
        })
        .collect()
}

fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<RadarPoint> {
    (0..n)
        .map(|_| {
            pt(
                rng.random_range(0.5..63.0),
                rng.random_range(-0.7..0.7),
                rng.random_range(-10.0..10.0),
                rng.random_range(0.1..5.0),
            )
        })
        .collect()
}

#[test]
fn point_at_ten_metres_straight_ahead_lands_in_bin_five_sixteen() {
    let spec = GridSpec::default();
    assert_eq!(spec.cell_of(10.0, 0.0), Some((5, 16)));
    let (idx, _) = point_features(&pt(10.0, 0.0, 0.0, 1.0), &spec).unwrap();
    assert_eq!(idx, 5 * 32 + 16);
}

#[test]
fn shared_cell_takes_elementwise_max_of_encodings() {
    let (store, enc, spec) = encoder(1);
    let a = pt(10.2, 0.01, 3.0, 0.8);
    let b = pt(11.7, 0.03, -4.0, 2.5);
    let (ia, fa) = point_features(&a, &spec).unwrap();
    let (ib, fb) = point_features(&b, &spec).unwrap();
    assert_eq!(ia, ib);
    let (ea, eb) = (encode_oracle(&store, &fa), encode_oracle(&store, &fb));
    let m = pillar_project(&frame(vec![a, b], 0.0), &spec, &enc, &store).unwrap();
    let hw = spec.cells();
    for c in 0..spec.channels {
        let want = ea[c].max(eb[c]);
        assert!((m.values.data()[c * hw + ia] - want).abs() < 1e-12);
    }
}

#[test]
fn projection_matches_per_point_oracle_everywhere() {
    let (store, enc, spec) = encoder(2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pts = random_points(&mut rng, 60);
    let hw = spec.cells();
    let mut want = vec![0.0f64; spec.channels * hw];
    let mut hit = vec![false; hw];
    for p in &pts {
        let (cell, f) = point_features(p, &spec).unwrap();
        let e = encode_oracle(&store, &f);
        for c in 0..spec.channels {
            let slot = &mut want[c * hw + cell];
            *slot = if hit[cell] { (*slot).max(e[c]) } else { e[c] };
        }
        hit[cell] = true;
    }
    let m = pillar_project(&frame(pts, 0.0), &spec, &enc, &store).unwrap();
    assert_eq!(m.values.shape(), &[spec.channels, 32, 32]);
    let err = m.values.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-12);
}

#[test]
fn perturbing_one_point_moves_at_most_one_cell() {
    let (store, enc, spec) = encoder(4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let hw = spec.cells();
    for _ in 0..20 {
        let mut pts = random_points(&mut rng, 30);
        let before = pillar_project(&frame(pts.clone(), 0.0), &spec, &enc, &store).unwrap();
        let k = rng.random_range(0..pts.len());
        // small move inside its own cell: doppler and amplitude only
        pts[k].doppler += 1.5;
        pts[k].amplitude *= 1.3;
        let after = pillar_project(&frame(pts, 0.0), &spec, &enc, &store).unwrap();
        let changed: Vec<usize> = (0..hw)
            .filter(|&cell| (0..spec.channels).any(|c| before.values.data()[c * hw + cell] != after.values.data()[c * hw + cell]))
            .collect();
        assert!(changed.len() <= 1, "{changed:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn projection_is_invariant_to_point_order(seed in any::<u64>(), n in 1usize..80) {
        let (store, enc, spec) = encoder(6);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = random_points(&mut rng, n);
        let mut shuffled = pts.clone();
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);
        let a = pillar_project(&frame(pts, 0.0), &spec, &enc, &store).unwrap();
        let b = pillar_project(&frame(shuffled, 0.0), &spec, &enc, &store).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn empty_cells_stay_zero(seed in any::<u64>(), n in 0usize..40) {
        let (store, enc, spec) = encoder(7);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = random_points(&mut rng, n);
        let hw = spec.cells();
        let mut occupied = vec![false; hw];
        for p in &pts {
            occupied[point_features(p, &spec).unwrap().0] = true;
        }
        let m = pillar_project(&frame(pts, 0.0), &spec, &enc, &store).unwrap();
        for cell in 0..hw {
            let zero = (0..spec.channels).all(|c| m.values.data()[c * hw + cell] == 0.0);
            prop_assert_eq!(zero, !occupied[cell]);
        }
    }
}

#[test]
fn single_frame_batch_equals_direct_projection() {
    let (store, enc, spec) = encoder(8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let f = frame(random_points(&mut rng, 25), 0.0);
    let batch = batch_sequence(std::slice::from_ref(&f), &spec, &enc, &store).unwrap();
    assert_eq!(batch.maps.len(), 1);
    assert_eq!(batch.maps[0], pillar_project(&f, &spec, &enc, &store).unwrap());
}

#[test]
fn empty_second_frame_is_zero_and_targets_come_from_it() {
    let (store, enc, spec) = encoder(10);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let gt = |x: f64| GtBox { center: [x, 0.0], width: 1.8, length: 4.5, yaw: 0.0, class: ObjectClass::Vehicle, velocity: [0.0, 0.0] };
    let mut a = frame(random_points(&mut rng, 25), 0.0);
    a.gt_boxes = vec![gt(10.0)];
    let mut b = frame(vec![], 0.1);
    b.gt_boxes = vec![gt(20.0), gt(30.0)];
    let batch = batch_sequence(&[a, b.clone()], &spec, &enc, &store).unwrap();
    assert!(batch.maps[1].values.data().iter().all(|v| *v == 0.0));
    assert_eq!(batch.targets, b.gt_boxes);
}

#[test]
fn shuffled_timestamps_are_rejected() {
    let (store, enc, spec) = encoder(12);
    let frames = vec![frame(vec![], 0.0), frame(vec![], 0.2), frame(vec![], 0.1)];
    assert!(batch_sequence(&frames, &spec, &enc, &store).is_err());
    let dup = vec![frame(vec![], 0.0), frame(vec![], 0.0)];
    assert!(batch_sequence(&dup, &spec, &enc, &store).is_err());
}

fn run<F: FnOnce(&mut Tape, &attentive_gru::params::Bound, attentive_gru::tensor::Var) -> attentive_gru::Result<attentive_gru::tensor::Var>>(
    store: &ParamStore,
    x: &Tensor,
    f: F,
) -> attentive_gru::Result<Tensor> {
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let xv = tape.constant(x.clone());
    let y = f(&mut tape, &p, xv)?;
    Ok(tape.value(y).clone())
}

fn randomize_biases(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().filter(|id| store.name(*id).ends_with(".bias")).collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = random(rng, &shape);
    }
}

#[test]
fn stem_shape_zero_and_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParamStore::new();
    let stem = Stem::new(&mut store, &mut rng, 5, 7);
    let zero = run(&store, &Tensor::zeros(&[1, 5, 8, 12]), |t, p, x| stem.forward(t, p, x)).unwrap();
    assert_eq!(zero.shape(), &[1, 7, 8, 12]);
    assert!(zero.data().iter().all(|v| *v == 0.0));

    randomize_biases(&mut store, &mut rng);
    let x = random(&mut rng, &[1, 5, 8, 12]);
    let got = run(&store, &x, |t, p, x| stem.forward(t, p, x)).unwrap();
    let g = attentive_gru::tensor::ConvGeom::same(3);
    let h = relu(&conv_oracle(&x, &param(&store, "stem.conv1.weight"), Some(&param(&store, "stem.conv1.bias")), g));
    let want = relu(&conv_oracle(&h, &param(&store, "stem.conv2.weight"), Some(&param(&store, "stem.conv2.bias")), g));
    assert!(got.max_abs_diff(&want) < 1e-12);
}

fn downsample(d: usize, factor: usize, seed: u64) -> (ParamStore, DynamicDownsample) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let dd = DynamicDownsample::new(&mut store, &mut rng, d, factor);
    randomize_biases(&mut store, &mut rng);
    (store, dd)
}

fn mix_with(store: &ParamStore, dd: &DynamicDownsample, x: &Tensor, w: [f64; 3]) -> Tensor {
    run(store, x, |t, p, x| {
        let outs = dd.branch_outputs(t, p, x)?;
        let wv = t.constant(Tensor::new(&[1, 3], w.to_vec()).unwrap());
        dd.mix(t, outs, wv)
    })
    .unwrap()
}

fn branch_oracle(store: &ParamStore, x: &Tensor, k: usize, factor: usize) -> Tensor {
    conv_oracle(
        x,
        &param(store, &format!("down.k{k}.weight")),
        Some(&param(store, &format!("down.k{k}.bias"))),
        branch_geom(k, factor),
    )
}

#[test]
fn one_hot_weights_select_a_branch() {
    let (store, dd) = downsample(4, 2, 14);
    let x = random(&mut ChaCha8Rng::seed_from_u64(15), &[1, 4, 8, 8]);
    for (i, w) in [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]].into_iter().enumerate() {
        let got = mix_with(&store, &dd, &x, w);
        assert_eq!(got.shape(), &[1, 4, 4, 4]);
        assert!(got.max_abs_diff(&branch_oracle(&store, &x, BRANCH_KERNELS[i], 2)) < 1e-12, "branch {i}");
    }
}

#[test]
fn identical_branches_mix_to_that_output() {
    let (mut store, dd) = downsample(3, 2, 16);
    // make every branch a 1x1 at the same weights by zeroing all but one tap
    let w1 = param(&store, "down.k1.weight");
    let b1 = param(&store, "down.k1.bias");
    for k in [2usize, 4] {
        let id = store.id(&format!("down.k{k}.weight")).unwrap();
        // the top-left-padded kernel's centre-aligned tap is (k-s)/2 rounded up
        let c = (k - 2).div_ceil(2);
        *store.get_mut(id) = Tensor::from_fn(&[3, 3, k, k], |i| {
            let (oc, r, col) = (i / (k * k), (i / k) % k, i % k);
            if r == c && col == c { w1.data()[oc] } else { 0.0 }
        });
        let bid = store.id(&format!("down.k{k}.bias")).unwrap();
        *store.get_mut(bid) = b1.clone();
    }
    let x = random(&mut ChaCha8Rng::seed_from_u64(17), &[1, 3, 8, 8]);
    let one = branch_oracle(&store, &x, 1, 2);
    for k in [2usize, 4] {
        assert!(branch_oracle(&store, &x, k, 2).max_abs_diff(&one) < 1e-12);
    }
    let full = run(&store, &x, |t, p, x| dd.forward(t, p, x)).unwrap();
    assert!(full.max_abs_diff(&one) < 1e-12);
}

#[test]
fn forward_matches_softmax_mixture_oracle() {
    for factor in [1usize, 2, 4] {
        let (store, dd) = downsample(4, factor, 18 + factor as u64);
        let x = random(&mut ChaCha8Rng::seed_from_u64(30 + factor as u64), &[1, 4, 8, 16]);
        // pooled -> linear -> softmax
        let (aw, ab) = (param(&store, "down.attention.weight"), param(&store, "down.attention.bias"));
        let hw = 8.0 * 16.0;
        let pooled: Vec<f64> = (0..4).map(|c| x.data()[c * 128..(c + 1) * 128].iter().sum::<f64>() / hw).collect();
        let logits: Vec<f64> = (0..3).map(|o| (0..4).map(|c| pooled[c] * aw.data()[c * 3 + o]).sum::<f64>() + ab.data()[o]).collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let w: Vec<f64> = logits.iter().map(|l| l.exp() / z).collect();
        let mut want = scale(&branch_oracle(&store, &x, 1, factor), w[0]);
        want = add(&want, &scale(&branch_oracle(&store, &x, 2, factor), w[1]));
        want = add(&want, &scale(&branch_oracle(&store, &x, 4, factor), w[2]));
        let got = run(&store, &x, |t, p, x| dd.forward(t, p, x)).unwrap();
        assert_eq!(got.shape(), &[1, 4, 8 / factor, 16 / factor]);
        assert!(got.max_abs_diff(&want) < 1e-12, "factor {factor}");

        let weights = run(&store, &x, |t, p, x| dd.branch_weights(t, p, x)).unwrap();
        assert!((weights.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(weights.data().iter().all(|v| (0.0..=1.0).contains(v)));
        for (a, b) in weights.data().iter().zip(&w) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn mixing_is_homogeneous() {
    let (store, dd) = downsample(3, 2, 40);
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let x = random(&mut rng, &[1, 3, 8, 8]);
    let c = 2.75;
    let w = [0.2, 0.5, 0.3];
    let scaled = run(&store, &x, |t, p, x| {
        let outs = dd.branch_outputs(t, p, x)?;
        let outs = outs.map(|o| t.affine(o, c, 0.0));
        let wv = t.constant(Tensor::new(&[1, 3], w.to_vec()).unwrap());
        dd.mix(t, outs, wv)
    })
    .unwrap();
    let plain = mix_with(&store, &dd, &x, w);
    assert!(scaled.max_abs_diff(&scale(&plain, c)) < 1e-12);
}

#[test]
fn downsample_rejects_indivisible_dims() {
    let (store, dd) = downsample(2, 2, 42);
    assert!(run(&store, &Tensor::zeros(&[1, 2, 7, 8]), |t, p, x| dd.forward(t, p, x)).is_err());
    let (store4, dd4) = downsample(2, 4, 43);
    assert!(run(&store4, &Tensor::zeros(&[1, 2, 8, 6]), |t, p, x| dd4.forward(t, p, x)).is_err());
}

#[test]
fn fpn_levels_zero_map_and_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut store = ParamStore::new();
    let fpn = Fpn::new(&mut store, &mut rng, 3);
    let levels = |store: &ParamStore, x: &Tensor| {
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let pyr = fpn.forward(&mut tape, &p, xv).unwrap();
        pyr.levels.map(|v| tape.value(v).clone())
    };

    let zero = levels(&store, &Tensor::zeros(&[1, 3, 64, 64]));
    for (l, side) in zero.iter().zip([64, 32, 16]) {
        assert_eq!(l.shape(), &[1, 3, side, side]);
        assert!(l.data().iter().all(|v| *v == 0.0));
    }

    randomize_biases(&mut store, &mut rng);
    let x = random(&mut rng, &[1, 3, 16, 24]);
    let got = levels(&store, &x);
    let conv = |name: &str, x: &Tensor, k: usize| {
        conv_oracle(
            x,
            &param(&store, &format!("{name}.weight")),
            Some(&param(&store, &format!("{name}.bias"))),
            attentive_gru::tensor::ConvGeom::same(k),
        )
    };
    let c0 = relu(&conv("fpn.c0", &x, 3));
    let c1 = relu(&conv("fpn.c1", &max_pool2(&c0), 3));
    let c2 = relu(&conv("fpn.c2", &max_pool2(&c1), 3));
    let p2 = conv("fpn.lat2", &c2, 1);
    let p1 = add(&conv("fpn.lat1", &c1, 1), &upsample2(&p2));
    let p0 = add(&conv("fpn.lat0", &c0, 1), &upsample2(&p1));
    for (g, w) in got.iter().zip([p0, p1, p2]) {
        assert!(g.max_abs_diff(&w) < 1e-12);
    }
}

#[test]
fn fpn_rejects_indivisible_dims() {
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    let mut store = ParamStore::new();
    let fpn = Fpn::new(&mut store, &mut rng, 2);
    let r = run(&store, &Tensor::zeros(&[1, 2, 12, 10]), |t, p, x| Ok(fpn.forward(t, p, x)?.levels[0]));
    assert!(r.is_err());
}
