//! Expands a config grid and trains every entry, printing one line per run.
//!
//! ```text
//! cargo run --release --example ablation_sweep -- [config]
//! ```
//!
//! The default grid is the small toy config swept over `k` and `mode`.

use stela::experiment::{expand_grid, load_config_map, run_ablation, ExperimentConfig};
use stela::report::RunStatus;

fn main() -> stela::Result<()> {
    let mut map = match std::env::args().nth(1) {
        Some(path) => load_config_map(path)?,
        None => {
            let mut m = load_config_map(concat!(env!("CARGO_MANIFEST_DIR"), "/config/toy.conf"))?;
            m.insert("k".into(), "1,4,16".into());
            m.insert("mode".into(), "baseline,stela".into());
            m
        }
    };
    map.entry("seed".into()).or_insert_with(|| "1".into());
    let grid = expand_grid(&map)
        .iter()
        .map(ExperimentConfig::from_map)
        .collect::<stela::Result<Vec<_>>>()?;
    let (reports, timings) = run_ablation(&grid);
    println!(
        "{:<10} {:<9} {:>3} {:>6} {:>10} {:>10} {:>14}",
        "run", "mode", "k", "n_past", "train mIoU", "eval mIoU", "attn FLOPs"
    );
    for r in &reports {
        if r.status == RunStatus::Failed {
            println!("{:<10} failed: {}", r.name, r.error.as_deref().unwrap_or(""));
            continue;
        }
        println!(
            "{:<10} {:<9} {:>3} {:>6} {:>10.3} {:>10.3} {:>14}",
            r.name,
            r.config["mode"],
            r.config["k"],
            r.config["n_past"],
            r.train_miou.unwrap_or(0.0),
            r.eval_miou.unwrap_or(0.0),
            r.attention_flops
        );
    }
    let secs: f64 = timings.entries.iter().map(|(_, s)| s).sum();
    println!("total {secs:.1} s");
    Ok(())
}
