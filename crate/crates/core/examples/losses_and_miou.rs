//! Cross-entropy and Lovász-softmax on a handful of points, then a
//! confusion matrix and per-class IoU.

use ndarray::array;
use stela::kitti_io::IGNORE_ID;
use stela::losses::{combined_loss, lovasz_softmax, softmax_rows, weighted_cross_entropy, ClassTable};
use stela::metrics::{accumulate_confusion, miou, write_metrics_csv, ConfusionMatrix};

fn main() -> stela::Result<()> {
    let logits = array![
        [2.0, 0.5, -1.0],
        [0.1, 1.5, 0.3],
        [-0.5, 0.2, 2.2],
        [1.0, 1.1, 0.9],
        [0.0, 0.0, 3.0]
    ];
    let targets = [0, 1, 2, 1, IGNORE_ID];
    let labels = [0u16, 0, 1, 1, 1, 1, 2, 2];
    let table =
        ClassTable::inverse_log_frequency(vec!["road".into(), "car".into(), "person".into()], &labels, IGNORE_ID)?;
    println!("class weights {:?}", table.weights);

    let (ce, _) = weighted_cross_entropy(logits.view(), &targets, &table)?;
    let (lv, _) = lovasz_softmax(softmax_rows(logits.view()).view(), &targets, &table)?;
    let (total, grad) = combined_loss(logits.view(), &targets, &table)?;
    println!("cross-entropy {ce:.4}, Lovász {lv:.4}, combined {total:.4}");
    println!("gradient row of the ignored point: {}", grad.row(4));

    let truth = [0, 0, 0, 1, 1, 1, 2, 2, IGNORE_ID];
    let pred = [0, 0, 1, 1, 1, 0, 2, 1, 2];
    let cm = accumulate_confusion(&pred, &truth, &table, ConfusionMatrix::new(3))?;
    let report = miou(&cm)?;
    write_metrics_csv(std::io::stdout(), &table.names, &report).expect("stdout");
    Ok(())
}
