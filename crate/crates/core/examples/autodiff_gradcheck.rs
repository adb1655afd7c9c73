//! Builds a small conv → relu → attention graph, checks its gradients
//! against central differences, then shows the checker rejecting a broken
//! backward rule.

use upfusion::autodiff::{grad_check, set_backward_fault, GradCheckOptions, OpKind};
use upfusion::{ParamStore, Shape, Tensor};

fn main() -> upfusion::Result<()> {
    let mut params = ParamStore::<f64>::new();
    let x = Tensor::from_fn(Shape::new(1, 2, 6, 6), |_, c, y, x| ((c * 7 + y * 3 + x) % 5) as f64 * 0.3 - 0.6);
    let w = Tensor::from_fn(Shape::new(4, 2, 3, 3), |o, i, y, x| ((o + 2 * i + y * x) % 7) as f64 * 0.1 - 0.3);
    params.add("x", x)?;
    params.add("w", w)?;
    params.add("b", Tensor::full(Shape::new(1, 4, 1, 1), 0.05))?;

    let graph = |tape: &mut upfusion::Tape<f64>| {
        let (x, w, b) = (tape.param_named("x")?, tape.param_named("w")?, tape.param_named("b")?);
        let h = tape.conv2d(x, w, Some(b), 1, 1)?;
        let h = tape.tanh(h)?;
        let q = tape.l2_normalize(h)?;
        let attn = tape.channel_gram(q, q, 2)?;
        let attn = tape.softmax(attn)?;
        tape.channel_attend(attn, h, 2)
    };

    let opts = GradCheckOptions { max_coords_per_param: usize::MAX, ..GradCheckOptions::default() };
    let report = grad_check(&params, &opts, graph)?;
    println!(
        "healthy graph: max rel err {:.2e} over {} coords (worst {}[{}])",
        report.max_rel_err, report.coords_checked, report.worst_param, report.worst_index
    );

    set_backward_fault(Some(OpKind::Softmax));
    let broken = grad_check(&params, &opts, graph);
    set_backward_fault(None);
    let broken = broken?;
    println!("softmax backward scaled by 1.5: max rel err {:.2e}", broken.max_rel_err);
    Ok(())
}
