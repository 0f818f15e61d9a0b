//! Fusion-layer cost against sequence length for the desk configuration.

use attentive_gru::config::RunConfig;
use attentive_gru::harness::{bench, bench_csv};

fn main() -> attentive_gru::Result<()> {
    let c = RunConfig::desk();
    let rows = bench(&c.model, &[2, 4, 8, 16], 3, 0)?;
    print!("{}", bench_csv(&rows));
    let per_frame: Vec<f64> = rows.iter().map(|r| r.mac_count as f64 / r.frames as f64).collect();
    println!("MACs per frame: {per_frame:.0?}");
    Ok(())
}
