//! Trains the desk model on a single synthetic pair and prints the loss
//! curve. `cargo run --release --example overfit_training -- 300`

use upfusion::synthetic::synthetic_pair;
use upfusion::training::{ImagePair, PairDataset, TrainSchedule, Trainer};
use upfusion::{FusionConfig, FusionModel, Providers};

fn main() -> upfusion::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(100);
    let (a, b) = synthetic_pair(64, 64, 1);
    let data = PairDataset::new(vec![ImagePair { key: "pair".into(), a, b }])?;
    let schedule = TrainSchedule {
        steps: Some(steps),
        batch: 1,
        crop: 64,
        lr0: 2e-3,
        lr_end: 2e-4,
        ..TrainSchedule::default()
    };
    let mut trainer = Trainer::new(FusionModel::build(&FusionConfig::desk())?, schedule)?;
    let log = trainer.run(&data, &Providers::stub(0), |r| {
        if r.step == 1 || r.step % 20 == 0 {
            println!("step {:>4}  lr {:.2e}  l_grad {:.4}  l_l1 {:.4}  total {:.4}", r.step, r.lr, r.loss.l_grad, r.loss.l_l1, r.loss.l_total);
        }
    })?;
    let (first, last) = (log[0].loss.l_total, log[log.len() - 1].loss.l_total);
    println!("total loss {first:.4} -> {last:.4} ({:.1}% lower)", 100.0 * (1.0 - last / first));
    Ok(())
}
