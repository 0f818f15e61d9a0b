//! Fuses a sequence of feature maps with the attentive GRU layer and reports
//! how the gates split each map.

use attentive_gru::fusion::{FusionConfig, FusionLayer, FusionMode};
use attentive_gru::params::ParamStore;
use attentive_gru::tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> attentive_gru::Result<()> {
    let cfg = FusionConfig {
        channels: 8,
        queries: 4,
        block_strides: vec![1, 1],
        kernel: 3,
        mode: FusionMode::Default,
    };
    let (t_len, h, w) = (4, 16, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let layer = FusionLayer::new(&mut store, &mut rng, &cfg);

    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let frames: Vec<_> = (0..t_len)
        .map(|_| {
            let t = Tensor::from_fn(&[1, cfg.channels, h, w], |_| rng.random_range(-1.0..1.0));
            tape.constant(t)
        })
        .collect();

    let block = &layer.blocks[0];
    let (sp, sm) = block.cross_attention(&mut tape, &p, frames[1], frames[0])?;
    let (gp, gm) = block.gates(&mut tape, &p, sp, sm)?;
    let share = |v| {
        let d = tape.value(v).data();
        d.iter().sum::<f64>() / d.len() as f64
    };
    println!("gated-on share: present {:.3}, memory {:.3}", share(gp), share(gm));

    let out = layer.forward(&mut tape, &p, &frames)?;
    let o = tape.value(out);
    println!("fused {:?}, mean |h| {:.4}", o.shape(), o.data().iter().map(|v| v.abs()).sum::<f64>() / o.data().len() as f64);
    println!("recurrent state {} bytes, {} parameters", layer.state_bytes(h, w), store.num_scalars());
    Ok(())
}
