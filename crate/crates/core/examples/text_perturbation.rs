//! A prompt embedding is mapped to one weight per channel; sorting those
//! weights gives the channel permutation that cross-attention then queries
//! against the unperturbed channels.

use upfusion::nn::Init;
use upfusion::tcpm::{PerturbationIndex, Tcpm};
use upfusion::{ParamStore, Providers, Shape, Tape, Tensor};

fn main() -> upfusion::Result<()> {
    let idx = PerturbationIndex::from_weights(&[0.1f32, 0.9, 0.4, 0.9, 0.0]);
    println!("argsort of [0.1, 0.9, 0.4, 0.9, 0.0] -> {:?}, inverse {:?}", idx.perm(), idx.inverse());

    let mut store = ParamStore::new();
    let tcpm = Tcpm::new(&mut Init::new(&mut store, 3), "tcpm", 8, 2, 0.5, true)?;
    let providers = Providers::stub(0);
    let a = Tensor::from_fn(Shape::new(1, 8, 8, 8), |_, c, y, x| ((c * 5 + y + 2 * x) % 11) as f32 / 10.0);
    let b = Tensor::from_fn(Shape::new(1, 8, 8, 8), |_, c, y, x| ((c + 3 * y * x) % 13) as f32 / 12.0);

    for prompt in ["multi-modality image fusion", "highlight pedestrians in the dark"] {
        let text = providers.text().text_embed(prompt)?;
        let mut tape = Tape::with_params(&store);
        let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let out = tcpm.forward(&mut tape, av, bv, &text)?;
        println!(
            "{prompt:?}: kept {:?} of 16, perm {:?}, output {}",
            out.selections[0].kept,
            out.perm.perm(),
            tape.shape(out.out)
        );
    }
    Ok(())
}
