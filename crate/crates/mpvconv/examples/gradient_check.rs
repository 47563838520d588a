//! Verify every op's vector-Jacobian product against central differences,
//! then do the same for the full point-voxel layer in all eight combination
//! modes.
//!
//! ```bash
//! cargo run --release --example gradient_check
//! ```

use mpvconv::gradcheck::{gradient_suite, DEFAULT_SEEDS, DEFAULT_STEP, DEFAULT_TOL};

fn main() -> mpvconv::Result<()> {
    let start = std::time::Instant::now();
    let rows = gradient_suite(&DEFAULT_SEEDS, DEFAULT_STEP, DEFAULT_TOL)?;
    println!(
        "{:<28} {:>14} {:>8}   (tol {DEFAULT_TOL:.0e}, step {DEFAULT_STEP:.0e}, {} seeds)",
        "op",
        "max rel err",
        "status",
        DEFAULT_SEEDS.len()
    );
    let mut all_ok = true;
    for row in &rows {
        println!(
            "{:<28} {:>14.3e} {:>8}",
            row.name,
            row.max_relative_error,
            if row.passed { "ok" } else { "FAIL" }
        );
        all_ok &= row.passed;
    }
    println!("elapsed: {:.2?}", start.elapsed());
    if !all_ok {
        std::process::exit(2);
    }
    Ok(())
}
