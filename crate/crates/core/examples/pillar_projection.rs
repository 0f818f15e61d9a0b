//! Projects a radar frame onto the range-azimuth grid with a fresh pillar
//! encoder.

use attentive_gru::bev::{pillar_project, GridSpec, PillarEncoder, PillarInput};
use attentive_gru::params::ParamStore;
use attentive_gru::sim::{generate_scene, render_frame, SimConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> attentive_gru::Result<()> {
    let scene = generate_scene(&SimConfig::default(), 3)?;
    let frame = render_frame(&scene, 0, 3)?;
    let spec = GridSpec::default();
    let mut store = ParamStore::new();
    let encoder = PillarEncoder::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), &spec);

    let input = PillarInput::from_frame(&frame, &spec);
    let map = pillar_project(&frame, &spec, &encoder, &store)?;
    let (c, h, w) = (spec.channels, spec.range_bins, spec.azimuth_bins);
    let occupied = (0..h * w)
        .filter(|cell| (0..c).any(|ch| map.values.data()[ch * h * w + cell] != 0.0))
        .count();
    println!("{} points, {} inside the grid", frame.points.len(), input.len());
    println!("map [{c}, {h}, {w}], {occupied} occupied cells");

    // range rows top to bottom, azimuth columns left to right
    for r in (0..h).rev() {
        let row: String = (0..w)
            .map(|a| if map.values.data()[r * w + a] != 0.0 { '#' } else { '.' })
            .collect();
        println!("{row}");
    }
    Ok(())
}
