//! Weighted cross-entropy and Lovász-softmax, with exact gradients.
//!
//! Both losses skip points whose target is the ignore id.

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::kitti_io::IGNORE_ID;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassTable {
    pub names: Vec<String>,
    pub weights: Vec<f64>,
    pub ignore_id: u16,
}

impl ClassTable {
    pub fn new(names: Vec<String>, weights: Vec<f64>, ignore_id: u16) -> Result<Self> {
        if names.is_empty() || names.len() != weights.len() {
            return Err(Error::Config(format!(
                "{} class names but {} weights",
                names.len(),
                weights.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::Config(format!("class weight {w} must be finite and positive")));
        }
        if (ignore_id as usize) < names.len() {
            return Err(Error::Config(format!("ignore id {ignore_id} collides with a class id")));
        }
        Ok(Self {
            names,
            weights,
            ignore_id,
        })
    }

    /// Unit weights, ignore id 255.
    pub fn uniform(names: &[&str]) -> Self {
        Self::new(
            names.iter().map(|s| s.to_string()).collect(),
            vec![1.0; names.len()],
            IGNORE_ID,
        )
        .expect("valid class table")
    }

    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    /// `w_c = 1 / ln(1.02 + f_c)` where `f_c` is the class frequency among
    /// the non-ignored labels.
    pub fn inverse_log_frequency(names: Vec<String>, labels: &[u16], ignore_id: u16) -> Result<Self> {
        let mut counts = vec![0u64; names.len()];
        for &l in labels {
            if l == ignore_id {
                continue;
            }
            *counts
                .get_mut(l as usize)
                .ok_or_else(|| Error::Data(format!("label {l} outside the class table")))? += 1;
        }
        let total = counts.iter().sum::<u64>().max(1) as f64;
        let weights = counts.iter().map(|&c| 1.0 / (1.02 + c as f64 / total).ln()).collect();
        Self::new(names, weights, ignore_id)
    }

    fn check_targets(&self, targets: &[u16], rows: usize, cols: usize) -> Result<()> {
        if cols != self.num_classes() || rows != targets.len() {
            return Err(Error::Config(format!(
                "scores are {rows}×{cols}, expected {}×{}",
                targets.len(),
                self.num_classes()
            )));
        }
        match targets
            .iter()
            .find(|&&t| t != self.ignore_id && t as usize >= self.num_classes())
        {
            Some(t) => Err(Error::Data(format!("target {t} is neither a class nor ignore"))),
            None => Ok(()),
        }
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut p = logits.to_owned();
    for mut row in p.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    p
}

/// Pulls a gradient with respect to softmax outputs back to the logits.
pub fn softmax_backward(probs: ArrayView2<f64>, grad_probs: ArrayView2<f64>) -> Array2<f64> {
    let dot = (&probs * &grad_probs).sum_axis(Axis(1)).insert_axis(Axis(1));
    &probs * &(&grad_probs - &dot)
}

/// `(1/N_valid) Σ_valid w_y · -log softmax(logits)_y` and its gradient.
pub fn weighted_cross_entropy(
    logits: ArrayView2<f64>,
    targets: &[u16],
    table: &ClassTable,
) -> Result<(f64, Array2<f64>)> {
    table.check_targets(targets, logits.nrows(), logits.ncols())?;
    let mut grad = Array2::zeros(logits.raw_dim());
    let valid = targets.iter().filter(|&&t| t != table.ignore_id).count();
    if valid == 0 {
        return Ok((0.0, grad));
    }
    let inv_n = 1.0 / valid as f64;
    let mut loss = 0.0;
    for ((row, &t), mut g) in logits.rows().into_iter().zip(targets).zip(grad.rows_mut()) {
        if t == table.ignore_id {
            continue;
        }
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let log_z = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let w = table.weights[t as usize];
        loss += w * (log_z - row[t as usize]);
        for (c, gc) in g.iter_mut().enumerate() {
            *gc = w * inv_n * (row[c] - log_z).exp();
        }
        g[t as usize] -= w * inv_n;
    }
    Ok((loss * inv_n, grad))
}

/// Gradient of the Lovász extension of the Jaccard loss with respect to the
/// sorted errors, given ground-truth membership in sorted order.
pub fn lovasz_grad(gt_sorted: &[bool]) -> Vec<f64> {
    let gts = gt_sorted.iter().filter(|&&g| g).count() as f64;
    let mut grad = Vec::with_capacity(gt_sorted.len());
    let (mut cum_gt, mut cum_neg) = (0.0, 0.0);
    let mut prev = 0.0;
    for &g in gt_sorted {
        if g {
            cum_gt += 1.0;
        } else {
            cum_neg += 1.0;
        }
        let jaccard = 1.0 - (gts - cum_gt) / (gts + cum_neg);
        grad.push(jaccard - prev);
        prev = jaccard;
    }
    grad
}

/// Lovász-softmax averaged over the classes present in `targets`.
pub fn lovasz_softmax(probs: ArrayView2<f64>, targets: &[u16], table: &ClassTable) -> Result<(f64, Array2<f64>)> {
    table.check_targets(targets, probs.nrows(), probs.ncols())?;
    let mut grad = Array2::zeros(probs.raw_dim());
    let valid: Vec<usize> = (0..targets.len()).filter(|&i| targets[i] != table.ignore_id).collect();
    let present: Vec<usize> = (0..table.num_classes())
        .filter(|&c| valid.iter().any(|&i| targets[i] as usize == c))
        .collect();
    if present.is_empty() {
        return Ok((0.0, grad));
    }
    let inv_c = 1.0 / present.len() as f64;
    let mut loss = 0.0;
    for &c in &present {
        let errors: Vec<(f64, usize, bool)> = valid
            .iter()
            .map(|&i| {
                let fg = targets[i] as usize == c;
                let p = probs[[i, c]];
                (if fg { 1.0 - p } else { p }, i, fg)
            })
            .collect();
        let mut order: Vec<usize> = (0..errors.len()).collect();
        // descending error, ties by original index
        order.sort_by(|&a, &b| errors[b].0.total_cmp(&errors[a].0).then(errors[a].1.cmp(&errors[b].1)));
        let gt_sorted: Vec<bool> = order.iter().map(|&o| errors[o].2).collect();
        let g = lovasz_grad(&gt_sorted);
        for (rank, &o) in order.iter().enumerate() {
            let (e, i, fg) = errors[o];
            loss += e * g[rank];
            grad[[i, c]] += inv_c * g[rank] * if fg { -1.0 } else { 1.0 };
        }
    }
    Ok((loss * inv_c, grad))
}

/// Cross-entropy plus Lovász-softmax (unit weights), gradient w.r.t. logits.
pub fn combined_loss(logits: ArrayView2<f64>, targets: &[u16], table: &ClassTable) -> Result<(f64, Array2<f64>)> {
    let (ce, g_ce) = weighted_cross_entropy(logits, targets, table)?;
    let probs = softmax_rows(logits);
    let (lv, g_probs) = lovasz_softmax(probs.view(), targets, table)?;
    let g_lv = softmax_backward(probs.view(), g_probs.view());
    Ok((ce + lv, g_ce + g_lv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn table(c: usize) -> ClassTable {
        let names: Vec<String> = (0..c).map(|i| format!("c{i}")).collect();
        ClassTable::new(names, vec![1.0; c], IGNORE_ID).unwrap()
    }

    #[test]
    fn ce_uniform_logits() {
        let (loss, _) = weighted_cross_entropy(array![[0.3, 0.3, 0.3, 0.3]].view(), &[2], &table(4)).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!((loss - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn ce_saturates() {
        let (loss, grad) = weighted_cross_entropy(array![[60.0, 0.0, 0.0]].view(), &[0], &table(3)).unwrap();
        assert!(loss < 1e-20);
        assert!(grad.iter().all(|g| g.abs() < 1e-20));
    }

    #[test]
    fn ce_ignore_rows() {
        let t = table(2);
        let (loss, grad) =
            weighted_cross_entropy(array![[1.0, 2.0], [5.0, -1.0]].view(), &[IGNORE_ID, IGNORE_ID], &t).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|g| *g == 0.0));
        let (l1, g1) = weighted_cross_entropy(array![[1.0, 2.0], [5.0, -1.0]].view(), &[1, IGNORE_ID], &t).unwrap();
        let (l2, _) = weighted_cross_entropy(array![[1.0, 2.0]].view(), &[1], &t).unwrap();
        assert_eq!(l1, l2);
        assert!(g1.row(1).iter().all(|g| *g == 0.0));
    }

    #[test]
    fn bad_targets() {
        assert!(matches!(
            weighted_cross_entropy(array![[1.0, 2.0]].view(), &[2], &table(2)),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            lovasz_softmax(array![[0.5, 0.5]].view(), &[0, 1], &table(2)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn lovasz_perfect_and_single_point() {
        let (loss, _) = lovasz_softmax(array![[1.0, 0.0], [0.0, 1.0]].view(), &[0, 1], &table(2)).unwrap();
        assert_eq!(loss, 0.0);
        let (loss, _) = lovasz_softmax(array![[0.3, 0.7]].view(), &[0], &table(2)).unwrap();
        assert!((loss - 0.7).abs() < 1e-15);
        let (loss, _) = lovasz_softmax(array![[0.3, 0.7]].view(), &[IGNORE_ID], &table(2)).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn lovasz_grad_sums_to_jaccard() {
        // all errors equal to one give loss 1 - 0 = 1 for the full set
        let g = lovasz_grad(&[true, false, true, false]);
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn weight_table_checks() {
        assert!(ClassTable::new(vec!["a".into()], vec![0.0], 255).is_err());
        assert!(ClassTable::new(vec!["a".into()], vec![1.0, 2.0], 255).is_err());
        assert!(ClassTable::new(vec!["a".into(), "b".into()], vec![1.0, 1.0], 1).is_err());
        let t = ClassTable::inverse_log_frequency(vec!["a".into(), "b".into()], &[0, 0, 0, 1, 255], 255).unwrap();
        assert!(t.weights[1] > t.weights[0]);
        assert!((t.weights[0] - 1.0 / (1.02f64 + 0.75).ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_backward_matches_jacobian() {
        let p = softmax_rows(array![[0.1, -0.4, 1.2]].view());
        let gp = array![[0.3, -1.0, 0.5]];
        let g = softmax_backward(p.view(), gp.view());
        for j in 0..3 {
            let mut expect = 0.0;
            for i in 0..3 {
                let jac = p[[0, i]] * (if i == j { 1.0 } else { 0.0 } - p[[0, j]]);
                expect += gp[[0, i]] * jac;
            }
            assert!((g[[0, j]] - expect).abs() < 1e-15);
        }
    }
}
