//! Per-channel scale and shift predicted from one modality's shallow
//! features, applied to the fused features as `F·(1+γ) + β`.

use upfusion::gam::{global_descriptor, modulate, AffineParams, Gam};
use upfusion::nn::Init;
use upfusion::{ParamStore, Shape, Tape, Tensor};

fn main() -> upfusion::Result<()> {
    let mut tape = Tape::<f64>::new();
    let fuse = tape.constant(Tensor::full(Shape::new(1, 1, 2, 2), 2.0));
    let gamma = tape.constant(Tensor::full(Shape::new(1, 1, 1, 1), 0.5));
    let beta = tape.constant(Tensor::full(Shape::new(1, 1, 1, 1), 0.1));
    let out = modulate(&mut tape, fuse, AffineParams { gamma, beta })?;
    println!("2·(1 + 0.5) + 0.1 = {}", tape.value(out).data()[0]);

    let mut store = ParamStore::new();
    let gam = Gam::new(&mut Init::new(&mut store, 7), "gam", 4)?;
    let feats = Tensor::from_fn(Shape::new(1, 4, 8, 8), |_, c, y, x| ((c + y * x) % 9) as f32 / 8.0);
    let source = Tensor::from_fn(Shape::new(1, 4, 8, 8), |_, c, y, _| (c * y) as f32 / 28.0);

    let mut tape = Tape::with_params(&store);
    let (f, s) = (tape.constant(feats.clone()), tape.constant(source));
    let g = global_descriptor(&mut tape, s)?;
    println!("source descriptor {:?}", tape.value(g).data());
    let out = gam.forward(&mut tape, f, s)?;
    // The output head starts at zero, so a fresh module passes features through.
    println!("fresh module changes features by {:e}", tape.value(out).max_abs_diff(&feats)?);
    Ok(())
}
