//! Compares the taped gradient of the unrolled solver with central
//! differences on random instances.
//!
//! ```text
//! cargo run --release --example gradcheck -- [seeds] [iterations]
//! ```

use analysparse::cli::{cmd_gradcheck, render_gradcheck, GRADCHECK_TOL};

fn main() -> analysparse::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seeds: u64 = args.first().map_or(5, |s| s.parse().expect("seeds"));
    let iterations: usize = args.get(1).map_or(50, |s| s.parse().expect("iterations"));

    let rows = cmd_gradcheck(8, 8, iterations, 0, seeds, GRADCHECK_TOL)?;
    print!("{}", render_gradcheck(&rows));
    let worst = rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    println!("worst relative error {worst:.2e}");
    Ok(())
}
