//! Finite-difference gradient checks of every differentiable component.
//!
//! ```text
//! cargo run --release --example gradcheck
//! ```

use attentive_gru::harness::{gradcheck, GradCheckSettings};

fn main() -> attentive_gru::Result<()> {
    let summary = gradcheck(&GradCheckSettings::default())?;
    print!("{}", summary.table());
    println!("passed: {}", summary.passed());
    Ok(())
}
