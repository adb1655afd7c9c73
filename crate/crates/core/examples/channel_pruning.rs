//! Ranks channels by `ω_C + α·σ(ω_S)` and keeps the top 70%, scaled by their
//! weights. Ties go to the lower channel index.

use upfusion::autodiff::sigmoid;
use upfusion::scpm::{fuse_weights, prune_channels};
use upfusion::{Shape, Tape, Tensor};

fn main() -> upfusion::Result<()> {
    let c = 10;
    let omega_c = vec![0.9, 0.2, 0.5, 0.5, 0.1, 0.7, 0.3, 0.5, 0.8, 0.4];
    let omega_s = vec![-2.0, 3.0, 0.0, 0.0, -1.0, 0.5, 1.0, 0.0, -3.0, 2.0];
    let alpha = 0.5f32;

    let mut tape = Tape::<f32>::new();
    let wc = tape.constant(Tensor::new(Shape::new(1, c, 1, 1), omega_c.clone())?);
    let ws = tape.constant(Tensor::new(Shape::new(1, c, 1, 1), omega_s.clone())?);
    let a = tape.constant(Tensor::scalar(alpha));
    let omega_f = fuse_weights(&mut tape, wc, ws, a)?;

    for (i, w) in tape.value(omega_f).data().iter().enumerate() {
        assert_eq!(*w, omega_c[i] + sigmoid(omega_s[i]) * alpha);
        println!("channel {i}: ω_F = {w:.4}");
    }

    let x = tape.constant(Tensor::from_fn(Shape::new(1, c, 2, 2), |_, ch, _, _| ch as f32));
    let (kept, sel) = prune_channels(&mut tape, x, omega_f, 0.7)?;
    println!("kept {} of {c}: {:?}", sel[0].kept.len(), sel[0].kept);
    println!("pruned features {}", tape.shape(kept));
    Ok(())
}
