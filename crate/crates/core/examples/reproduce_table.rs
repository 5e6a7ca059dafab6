//! Runs one of the built-in table grids and prints it as CSV.
//!
//!     cargo run --release --example reproduce_table -- table4 line_search 4
use std::io;

use shooting_sqp::bench::{grid, run_suite, write_csv};
use shooting_sqp::{Method, SolverConfig};

fn main() -> shooting_sqp::Result<()> {
    let mut args = std::env::args().skip(1);
    let name = args.next().unwrap_or_else(|| "table1".into());
    let method: Method = args.next().as_deref().unwrap_or("line_search").parse()?;
    let jobs = args.next().and_then(|j| j.parse().ok()).unwrap_or(1);
    let filter: Option<usize> = args.next().and_then(|s| s.parse().ok());

    let mut cells = grid(&name, method)?;
    if let Some(max_n) = filter {
        cells.retain(|c| c.segments <= max_n);
    }
    let start = std::time::Instant::now();
    let rows = run_suite(&cells, &SolverConfig::default(), jobs)?;
    write_csv(&rows, io::stdout())?;
    let verified = rows.iter().filter(|r| r.verified).count();
    eprintln!("{verified}/{} verified in {:.1?}", rows.len(), start.elapsed());
    Ok(())
}
