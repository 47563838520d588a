//! Time the individual kernels at desk-scale sizes.
//!
//! ```bash
//! cargo run --release --example op_benchmarks
//! ```

use mpvconv::commands::{format_bench_table, run_bench};

fn main() -> mpvconv::Result<()> {
    let rows = run_bench(512, 32, 16, 5)?;
    print!("{}", format_bench_table(&rows));
    Ok(())
}
