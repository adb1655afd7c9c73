//! Fuses a synthetic infrared/visible pair with a fresh desk-scale model and
//! writes the sources and result as PGM files.

use std::time::Instant;

use upfusion::io::save_image;
use upfusion::synthetic::synthetic_pair;
use upfusion::{FuseContext, FusionConfig, FusionModel, Providers};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out_dir = std::env::temp_dir().join("upfusion-fuse-example");
    std::fs::create_dir_all(&out_dir)?;

    let cfg = FusionConfig::desk();
    let model = FusionModel::build(&cfg)?;
    println!("desk model with {} parameters", model.num_parameters());

    // Odd sizes are mirrored out to a multiple of 8 and cropped back.
    let (a, b) = synthetic_pair(60, 90, 5);
    let providers = Providers::stub(cfg.seed);
    let ctx = FuseContext::new(&providers, &cfg.prompt, None)?;
    let start = Instant::now();
    let f = model.fuse_padded(&a, &b, &ctx)?;
    println!("fused {} in {:.2}s", f.shape(), start.elapsed().as_secs_f64());

    for (name, img) in [("a.pgm", &a), ("b.pgm", &b), ("fused.pgm", &f)] {
        save_image(&out_dir.join(name), img)?;
    }
    println!("wrote a.pgm, b.pgm and fused.pgm to {}", out_dir.display());
    Ok(())
}
