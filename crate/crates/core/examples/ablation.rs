//! Temporal fusion against the single-frame baseline on the desk
//! configuration.
//!
//! ```text
//! cargo run --release --example ablation -- [train_sequences] [test_sequences] [seeds]
//! ```

use attentive_gru::config::RunConfig;
use attentive_gru::harness::{ablation_data, ablation_seed, ABLATION_HEADER};

fn main() -> attentive_gru::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("integer argument")).collect();
    let n_train = args.first().copied().unwrap_or(500);
    let n_test = args.get(1).copied().unwrap_or(100);
    let seeds = args.get(2).copied().unwrap_or(3) as u64;

    let config = RunConfig::desk();
    let dir = std::env::temp_dir().join(format!("attgru-ablation-{}", std::process::id()));
    println!("{ABLATION_HEADER}");
    let mut means = [0.0; 2];
    for seed in 0..seeds {
        let data = ablation_data(&config, n_train, n_test, seed)?;
        let rows = ablation_seed(&config, &data, seed, &dir.join(seed.to_string()))?;
        for (j, row) in rows.iter().enumerate() {
            println!("{}", row.csv());
            means[j] += row.report.map() / seeds as f64;
        }
    }
    println!("mean mAP: fusion {:.4}, baseline {:.4}, ratio {:.3}", means[0], means[1], means[0] / means[1]);
    let _ = std::fs::remove_dir_all(&dir);
    Ok(())
}
