//! Verify the engine's analytic gradients against central differences in
//! double precision, from single primitives up to the whole network.
//!
//! cargo run --release --example gradient_check -- [seed]

use gridhaze::gradient_suite::run_gradient_suite;

fn main() -> gridhaze::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let checks = run_gradient_suite(seed)?;
    for c in &checks {
        println!(
            "{:4}  {:<40} {:.2e} <= {:.0e}  ({} probes, {} across a kink)",
            if c.passed() { "ok" } else { "FAIL" },
            c.name,
            c.max_rel_err,
            c.tolerance,
            c.checked,
            c.skipped
        );
    }
    let failed = checks.iter().filter(|c| !c.passed()).count();
    println!("{failed} of {} checks failed", checks.len());
    std::process::exit(i32::from(failed > 0));
}
