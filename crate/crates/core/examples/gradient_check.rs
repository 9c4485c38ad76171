//! Central finite-difference checks of every differentiable operation and
//! both models.
//!
//! ```text
//! cargo run --release --example gradient_check -- 5
//! ```

use lightst::gradcheck::{model_suite, op_suite, REL_TOLERANCE};

fn main() -> lightst::Result<()> {
    let seeds: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(3);
    let mut worst = 0.0f64;
    let mut failed = 0;
    for seed in 0..seeds {
        for c in op_suite(seed)?.into_iter().chain(model_suite(seed)?) {
            worst = worst.max(c.max_rel_error);
            if !c.passed {
                failed += 1;
                println!("FAIL {} seed {}: {:.3e}", c.name, c.seed, c.max_rel_error);
            } else if seed == 0 {
                println!("ok   {:<20} {:.3e}", c.name, c.max_rel_error);
            }
        }
    }
    println!("{seeds} seeds, worst relative error {worst:.3e} (tolerance {REL_TOLERANCE:e}), {failed} failures");
    Ok(())
}
