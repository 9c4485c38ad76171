//! Print the fully-resolved default run configuration as TOML, or validate
//! a config file and print what it resolves to.
//!
//! ```text
//! cargo run --example run_config -- my.toml
//! ```

use lightst::config::RunConfig;

fn main() -> lightst::Result<()> {
    let cfg = match std::env::args().nth(1) {
        Some(p) => RunConfig::load(p.as_ref())?,
        None => RunConfig::default(),
    };
    print!("{}", cfg.to_toml()?);
    Ok(())
}
