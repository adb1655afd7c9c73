//! Scores three candidate fusions of one synthetic pair with the five
//! reference-free metrics.

use upfusion::metrics::{GrayImage, MetricReport, MetricValues};
use upfusion::synthetic::{noise_image, synthetic_pair};
use upfusion::Tensor;

fn main() -> upfusion::Result<()> {
    let (a, b) = synthetic_pair(64, 64, 2);
    let average = Tensor::from_fn(a.shape(), |n, c, y, x| 0.5 * (a.at(n, c, y, x) + b.at(n, c, y, x)));
    let maximum = Tensor::from_fn(a.shape(), |n, c, y, x| a.at(n, c, y, x).max(b.at(n, c, y, x)));
    let noise = noise_image(64, 64, 9);

    let (ga, gb) = (GrayImage::from_tensor(&a)?, GrayImage::from_tensor(&b)?);
    let mut rows = Vec::new();
    for (name, f) in [("average", &average), ("maximum", &maximum), ("noise", &noise), ("copy of A", &a)] {
        rows.push((name.to_string(), MetricValues::compute(&ga, &gb, &GrayImage::from_tensor(f)?)?));
    }
    println!("{}", MetricReport::from_rows(rows)?.to_table());

    let same = MetricValues::compute(&ga, &ga, &ga)?;
    println!("F = A = B: {same:?}");
    Ok(())
}
