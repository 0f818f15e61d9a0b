//! Deformable convolution: zero offsets reduce to a plain convolution and a
//! half-cell offset interpolates between neighbours.

use attentive_gru::tensor::{ConvGeom, Tape, Tensor};

fn main() -> attentive_gru::Result<()> {
    let (h, w) = (4, 6);
    // value = column index
    let x = Tensor::from_fn(&[1, 1, h, w], |i| (i % w) as f64);
    let k = Tensor::from_fn(&[1, 1, 3, 3], |i| if i == 4 { 1.0 } else { 0.0 });

    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let kv = tape.constant(k);
    let conv = tape.conv2d(xv, kv, None, ConvGeom::same(3))?;
    let zero = tape.constant(Tensor::zeros(&[1, 18, h, w]));
    let same = tape.deform_conv2d(xv, kv, zero)?;
    println!("zero offsets == conv: {}", tape.value(conv) == tape.value(same));

    // x offset of the centre tap (channel 8) set to 0.5
    let half = tape.constant(Tensor::from_fn(&[1, 18, h, w], |i| if i / (h * w) == 8 { 0.5 } else { 0.0 }));
    let y = tape.deform_conv2d(xv, kv, half)?;
    for r in 0..h {
        let row: Vec<String> = (0..w).map(|c| format!("{:.2}", tape.value(y).at4(0, 0, r, c))).collect();
        println!("{}", row.join(" "));
    }
    Ok(())
}
