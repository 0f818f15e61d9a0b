//! Interrupts training after a few steps, resumes it, and checks the result
//! against an uninterrupted run.

use attentive_gru::harness::{probe_config, simulate, train_command};

fn main() -> attentive_gru::Result<()> {
    let dir = std::env::temp_dir().join("attgru-resume");
    let mut c = probe_config();
    c.data.sequences = 6;
    c.train.epochs = 3;
    c.train.learning_rate = 2e-3;
    simulate(&c, &dir.join("data"), true)?;

    let full = train_command(&c, &dir.join("data"), None, &dir.join("full"), true, false)?;

    let mut cut = c.clone();
    cut.train.max_steps = 4;
    let first = train_command(&cut, &dir.join("data"), None, &dir.join("split"), true, false)?;
    println!("stopped after {} steps", first.global_step);
    let rest = train_command(&c, &dir.join("data"), None, &dir.join("split"), false, true)?;
    println!("resumed to {} steps, uninterrupted run took {}", rest.global_step, full.global_step);

    let a = std::fs::read(dir.join("full/model.bin")).expect("full model");
    let b = std::fs::read(dir.join("split/model.bin")).expect("resumed model");
    println!("model.bin identical: {}", a == b);
    Ok(())
}
