//! Regenerates the committed fixtures: `cargo run --example make_fixtures [DIR]`.

use std::path::PathBuf;

fn main() {
    let dir = std::env::args_os()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures"));
    if let Err(e) = faultsim::cnn::zoo::write_fixtures(&dir) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
    println!("fixtures written to {}", dir.display());
}
