//! Trains briefly, then evaluates on fresh sequences and prints per-class AP
//! at every distance threshold.

use attentive_gru::harness::{eval_command, probe_config, simulate, train_command};

fn main() -> attentive_gru::Result<()> {
    let dir = std::env::temp_dir().join("attgru-evaluate");
    let mut c = probe_config();
    c.data.sequences = 24;
    c.train.epochs = 80;
    c.train.learning_rate = 5e-3;
    c.train.final_learning_rate = 5e-3;
    c.train.grad_clip = 5.0;
    c.train.validation_fraction = 0.0;
    simulate(&c, &dir.join("train"), true)?;
    train_command(&c, &dir.join("train"), None, &dir.join("run"), true, false)?;

    let mut test = c.clone();
    test.data.seed = 1000;
    test.data.sequences = 6;
    simulate(&test, &dir.join("test"), true)?;
    let report = eval_command(&c, &dir.join("run"), &dir.join("test"), &dir.join("eval"))?;
    print!("{}", report.to_csv());
    println!("mAP {:.4}", report.map());
    Ok(())
}
