//! Simulates a small dataset and trains a detector on it.
//!
//! ```text
//! cargo run --release --example train -- [out_dir]
//! ```

use attentive_gru::harness::{probe_config, simulate, train_command};

fn main() -> attentive_gru::Result<()> {
    let out = std::env::args().nth(1).map(Into::into).unwrap_or_else(|| std::env::temp_dir().join("attgru-train"));
    let mut c = probe_config();
    c.data.sequences = 16;
    c.train.epochs = 10;
    c.train.learning_rate = 5e-3;
    c.train.final_learning_rate = 5e-4;
    c.train.grad_clip = 5.0;

    let data = out.join("data");
    simulate(&c, &data, true)?;
    let r = train_command(&c, &data, None, &out.join("run"), true, false)?;
    for e in &r.history {
        println!("epoch {:>2}  lr {:.1e}  train {:.5}  val {:.5}", e.epoch, e.lr, e.train_loss, e.val_loss);
    }
    println!("{} steps, run in {}", r.global_step, out.join("run").display());
    Ok(())
}
