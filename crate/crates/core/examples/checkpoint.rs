//! Writes a generator to an SMG1 file, reads it back and lists its
//! contents.
//!
//! cargo run --release --example checkpoint -- [path]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shapematch::backbone::{load_checkpoint, save_checkpoint, Generator, GeneratorConfig, Metadata, Network};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "generator.smg1".into());
    let cfg = GeneratorConfig {
        base_width: 8,
        n_resblocks: 2,
        controllable: true,
        ..GeneratorConfig::new(1, 1)
    };
    let g = Generator::<f32>::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut meta = Metadata::new();
    meta.insert("net".into(), "example".into());
    cfg.write_meta("gen.", &mut meta);
    save_checkpoint(g.params(), &meta, &path)?;

    let (store, meta) = load_checkpoint(&path)?;
    for (k, v) in &meta {
        println!("{k} = {v}");
    }
    for (name, t) in store.iter() {
        println!("{name:<24} {:?}", t.shape());
    }
    let restored = Generator::from_params(GeneratorConfig::read_meta("gen.", &meta)?, store)?;
    assert_eq!(restored.params(), g.params());
    println!("{} values round-tripped through {path}", g.params().num_values());
    Ok(())
}
