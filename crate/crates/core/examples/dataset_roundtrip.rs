//! Writes a dataset to disk, reads it back and checks that nothing changed.
//!
//! ```text
//! cargo run --example dataset_roundtrip -- [dir]
//! ```

use analysparse::datagen::{gen_dataset, load, save, sidecar_path, AmpMode, DataConfig};

fn main() -> analysparse::Result<()> {
    let dir = std::env::args().nth(1).map_or_else(std::env::temp_dir, Into::into);
    let cfg = DataConfig {
        amp_mode: AmpMode::Fixed,
        n_jumps: 3,
        ..DataConfig::new(32, 100, 0.5, 9)
    };
    let ds = gen_dataset(&cfg)?;
    let path = dir.join("roundtrip.adsl");
    save(&ds, &path)?;
    let back = load(&path)?;

    println!("wrote {} pairs to {}", ds.len(), path.display());
    println!("config sidecar {}", sidecar_path(&path).display());
    println!("bytes {}", std::fs::metadata(&path).map_or(0, |m| m.len()));
    println!("identical after reload: {}", back.pairs == ds.pairs && back.config == ds.config);
    Ok(())
}
