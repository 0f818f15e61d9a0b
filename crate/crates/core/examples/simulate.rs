//! Renders one synthetic radar scene and optionally writes a dataset.
//!
//! ```text
//! cargo run --release --example simulate -- [seed] [out_dir]
//! ```

use attentive_gru::config::RunConfig;
use attentive_gru::harness::simulate;
use attentive_gru::sim::{generate_scene, render_scene, SimConfig};

fn main() -> attentive_gru::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map(|s| s.parse().expect("seed")).unwrap_or(0);
    let cfg = SimConfig::default();
    let scene = generate_scene(&cfg, seed)?;
    let frames = render_scene(&scene)?;
    println!("seed {seed}: {} objects", scene.objects.len());
    println!("{:>5} {:>8} {:>7} {:>7} {:>8} {:>6}", "frame", "time", "speed", "yaw", "points", "boxes");
    for (t, f) in frames.iter().enumerate() {
        let ego = scene.ego_pose(t);
        println!(
            "{t:>5} {:>8.3} {:>7.2} {:>7.3} {:>8} {:>6}",
            f.timestamp,
            ego.speed,
            ego.yaw_rate,
            f.points.len(),
            f.gt_boxes.len()
        );
    }
    if let Some(out) = args.next() {
        let mut run = RunConfig::default();
        run.data.seed = seed;
        run.data.sequences = 10;
        let files = simulate(&run, out.as_ref(), true)?;
        println!("wrote {} sequences to {out}", files.len());
    }
    Ok(())
}
