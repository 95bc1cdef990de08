//! Regenerate `fixtures/e2e` from the first two shipped seeds.
//!
//!     cargo run -p hdldbg-cli --example record_e2e_fixtures

use std::path::Path;

fn main() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let out = root.join("fixtures/e2e");
    match hdldbg_cli::scripted::record_e2e(&out.join("seeds"), &out) {
        Ok(n) => println!("recorded {n} responses under {}", out.display()),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
