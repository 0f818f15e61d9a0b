//! Runs stem, dynamic downsampling and the feature pyramid on one projected
//! frame and prints the shapes and branch mixture.

use attentive_gru::backbone::{DynamicDownsample, Fpn, Stem};
use attentive_gru::bev::{GridSpec, PillarEncoder, PillarInput};
use attentive_gru::params::ParamStore;
use attentive_gru::sim::{generate_scene, render_frame, SimConfig};
use attentive_gru::tensor::Tape;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> attentive_gru::Result<()> {
    let spec = GridSpec::default();
    let d = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let encoder = PillarEncoder::new(&mut store, &mut rng, &spec);
    let stem = Stem::new(&mut store, &mut rng, spec.channels, d);
    let down = DynamicDownsample::new(&mut store, &mut rng, d, 2);
    let fpn = Fpn::new(&mut store, &mut rng, d);

    let scene = generate_scene(&SimConfig::default(), 5)?;
    let frame = render_frame(&scene, 0, 5)?;
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let bev = encoder.forward(&mut tape, &p, &PillarInput::from_frame(&frame, &spec), &spec)?;
    let x = stem.forward(&mut tape, &p, bev)?;
    let weights = down.branch_weights(&mut tape, &p, x)?;
    let y = down.forward(&mut tape, &p, x)?;
    let pyramid = fpn.forward(&mut tape, &p, y)?;

    println!("bev      {:?}", tape.value(bev).shape());
    println!("stem     {:?}", tape.value(x).shape());
    println!("branch weights (kernels 1, 2, 4): {:.4?}", tape.value(weights).data());
    println!("downsampled {:?}", tape.value(y).shape());
    for (i, l) in pyramid.levels.iter().enumerate() {
        println!("pyramid level {i} {:?}", tape.value(*l).shape());
    }
    println!("{} parameters", store.num_scalars());
    Ok(())
}
