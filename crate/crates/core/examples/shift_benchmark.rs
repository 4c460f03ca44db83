//! Runs the synthetic distribution-shift benchmark and prints its tables.

use vocab_bridge::eval::{convergence_table, probe_table, run_benchmark, BenchmarkConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = BenchmarkConfig::default();
    let report = run_benchmark(&config, &mut |msg| eprintln!("{msg}"))?;
    print!("{}", report.summary_table().to_tsv());
    println!();
    print!("{}", probe_table(&report.probes).to_tsv());
    println!();
    print!("{}", convergence_table(&report.convergence).to_tsv());
    Ok(())
}
