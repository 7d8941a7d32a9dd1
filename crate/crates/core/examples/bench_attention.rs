//! Times local against global attention and fits log-log slopes.
//!
//! ```text
//! cargo run --release --example bench_attention -- [N...]
//! ```

use stela::bench::{bench_attention, loglog_slope};
use stela::sparse_grid::GridConfig;

fn main() -> stela::Result<()> {
    let mut ns: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    if ns.is_empty() {
        ns = vec![1000, 2000, 4000, 8000];
    }
    let (rows, timings) = bench_attention(&ns, &[16], 32, 8, 3, u64::MAX, &GridConfig::default(), 17)?;
    println!(
        "{:>6} {:>4} {:>14} {:>16} {:>10} {:>10}",
        "N", "k", "local FLOPs", "global FLOPs", "local s", "global s"
    );
    for (r, t) in rows.iter().zip(&timings) {
        println!(
            "{:>6} {:>4} {:>14} {:>16} {:>10.5} {:>10.5}",
            r.n, r.k, r.local_flops, r.global_flops, t.local_seconds, t.global_seconds
        );
    }
    if timings.len() >= 2 {
        let x: Vec<f64> = timings.iter().map(|t| t.n as f64).collect();
        let l: Vec<f64> = timings.iter().map(|t| t.local_seconds).collect();
        let g: Vec<f64> = timings.iter().map(|t| t.global_seconds).collect();
        println!(
            "log-log slope: local {:.2}, global {:.2}",
            loglog_slope(&x, &l),
            loglog_slope(&x, &g)
        );
    }
    Ok(())
}
