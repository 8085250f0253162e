//! Regenerates the bundled LIBSVM fixture files under `data/`.
//!
//! The fixtures are deterministic synthetic stand-ins with the shape of the
//! adult a1a/a2a datasets (123 binary one-hot features, 1605 and 2265
//! examples). Run from anywhere in the workspace:
//!
//!     cargo run -p l2gd-core --example make_fixtures

use std::fs;
use std::path::PathBuf;

use l2gd_core::data::{fixtures, serialize_libsvm};

fn main() -> std::io::Result<()> {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..");
    let dir = root.join("data");
    fs::create_dir_all(&dir)?;
    for (name, (count, seed)) in [
        ("a1a.libsvm", fixtures::A1A_LIKE),
        ("a2a.libsvm", fixtures::A2A_LIKE),
    ] {
        let examples = fixtures::adult_like(count, seed);
        let path = dir.join(name);
        fs::write(&path, serialize_libsvm(&examples))?;
        println!("wrote {} ({} examples)", path.display(), examples.len());
    }
    Ok(())
}
