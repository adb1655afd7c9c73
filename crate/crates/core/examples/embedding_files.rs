//! Writes a small embedding file, reads it back, and fuses with it in place
//! of the seeded stub providers.

use upfusion::providers::{load_embedding_file, save_embedding_file, EmbeddingTable, EMBED_DIM};
use upfusion::synthetic::synthetic_pair;
use upfusion::{FuseContext, FusionConfig, FusionModel, Providers};

fn main() -> upfusion::Result<()> {
    let path = std::env::temp_dir().join("upfusion-example.upemb");
    let cfg = FusionConfig::desk();
    let vector = |phase: f32| (0..EMBED_DIM).map(|i| (i as f32 * 0.37 + phase).sin() * 0.1).collect::<Vec<_>>();

    let mut table = EmbeddingTable::new(EMBED_DIM);
    table.insert("street_0001", &vector(0.0))?;
    table.insert(cfg.prompt.clone(), &vector(1.0))?;
    save_embedding_file(&path, &table)?;

    let back = load_embedding_file(&path)?;
    println!("{} entries of dim {}: {:?}", back.len(), back.dim(), back.keys());

    let providers = Providers::from_file(&path)?;
    let keys = vec!["street_0001".to_string()];
    let ctx = FuseContext::new(&providers, &cfg.prompt, Some(&keys))?;
    let (a, b) = synthetic_pair(32, 32, 0);
    let f = FusionModel::build(&cfg)?.fuse(&a, &b, &ctx)?;
    println!("fused {} with file embeddings", f.shape());

    match FuseContext::new(&providers, "a prompt with no entry", Some(&keys)) {
        Ok(_) => println!("unexpected: missing prompt accepted"),
        Err(e) => println!("missing prompt: {e}"),
    }
    Ok(())
}
