//! Trains the segmentation network with and without the temporal attention
//! block on motion-ambiguous synthetic scenes, then reloads the checkpoint
//! and re-evaluates it.
//!
//! ```text
//! cargo run --release --example train_toy -- [config]
//! ```

use stela::checkpoint::Checkpoint;
use stela::experiment::{class_table, load_config_map, load_dataset, model_config, run_train, ExperimentConfig, Mode};
use stela::model::SegmentationModel;
use stela::train::evaluate;

fn main() -> stela::Result<()> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/config/toy.conf").into());
    let mut cfg = ExperimentConfig::from_map(&load_config_map(&path)?)?;

    for mode in [Mode::Baseline, Mode::Stela] {
        cfg.mode = mode;
        let r = run_train(&cfg, &format!("{mode:?}"))?;
        let losses: Vec<String> = r.report.epochs.iter().map(|e| format!("{:.3}", e.loss)).collect();
        println!("{mode:?}: epoch losses [{}]", losses.join(", "));
        println!(
            "{mode:?}: train mIoU {:.3}, eval mIoU {:.3}, {} parameters",
            r.report.train_miou.unwrap_or(0.0),
            r.report.eval_miou.unwrap_or(0.0),
            r.report.param_count
        );
        if mode == Mode::Stela {
            let dir = tempfile::tempdir().expect("temporary directory");
            let ckpt = dir.path().join("model.ckpt");
            r.model.to_checkpoint().save(&ckpt)?;
            let ds = load_dataset(&cfg)?;
            let loaded = SegmentationModel::from_checkpoint(
                Checkpoint::load(&ckpt)?,
                &model_config(&cfg, ds.class_names.len()),
            )?;
            let (_, iou) = evaluate(&loaded, &ds.eval, &class_table(&ds)?)?;
            println!("reloaded checkpoint: eval mIoU {:.3}", iou.mean);
        }
    }
    Ok(())
}
