//! Save weights to the container format, inspect the manifest, load them
//! back and confirm nothing changed.
//!
//! cargo run --release --example container_roundtrip

use scap::io::{encode_model, load_model, save_model, split_container};
use scap::model::{init_weights, BlockConfig};

fn main() -> scap::Result<()> {
    let model = init_weights(&BlockConfig::gelu(16, 64, 2, 1.0), 42)?;
    let dir = std::env::temp_dir().join("scap-container-example");
    std::fs::create_dir_all(&dir).map_err(|e| scap::Error::Io { path: dir.clone(), source: e })?;
    let path = dir.join("model.scap");
    save_model(&model, &path)?;

    let bytes = encode_model(&model)?;
    let (manifest, blob) = split_container(&bytes)?;
    println!("{} tensors, {} blob bytes", manifest.tensors.len(), blob.len());
    for (name, t) in &manifest.tensors {
        println!("  {name:<18} {:?} @ {}+{}", t.shape, t.byte_offset, t.byte_len);
    }

    let loaded = load_model(&path)?;
    assert!(loaded == model && encode_model(&loaded)? == bytes);
    println!("round trip exact: {}", path.display());
    Ok(())
}
