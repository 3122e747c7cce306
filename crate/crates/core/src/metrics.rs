//! Classification metrics: softmax, cross-entropy, top-k accuracy.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Element>(scores: &[T], classes: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(scores.len());
    for row in scores.chunks(classes) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / total));
    }
    out
}

/// `log softmax(row)[class]`, stable for extreme logits.
pub fn log_softmax_at<T: Element>(row: &[T], class: usize) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let total: T = row.iter().map(|&v| (v - max).exp()).sum();
    row[class] - max - total.ln()
}

fn check_scores<T: Element>(scores: &Tensor<T>, labels: &[usize]) -> Result<(usize, usize)> {
    let (n, m) = match scores.shape()[..] {
        [n, m] => (n, m),
        _ => return Err(Error::Shape(format!("scores must be [N, M], got {:?}", scores.shape()))),
    };
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} score rows", labels.len())));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= m) {
        return Err(Error::Shape(format!("label {y} outside [0, {m})")));
    }
    Ok((n, m))
}

/// Mean cross-entropy without building a tape.
pub fn cross_entropy<T: Element>(scores: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let (n, m) = check_scores(scores, labels)?;
    let total: f64 = scores.data().chunks(m).zip(labels).map(|(row, &y)| log_softmax_at(row, y).as_f64()).sum();
    Ok(-total / n as f64)
}

/// Whether `label` is among the `k` best entries of `row`. Ties rank the
/// lower class index first.
pub fn in_top_k<T: Element>(row: &[T], label: usize, k: usize) -> bool {
    let target = row[label];
    let ahead = row
        .iter()
        .enumerate()
        .filter(|&(c, &v)| v > target || (v == target && c < label))
        .count();
    ahead < k
}

/// Number of samples whose label is in the top `k` scores.
pub fn topk_correct<T: Element>(scores: &Tensor<T>, labels: &[usize], k: usize) -> Result<usize> {
    let (_, m) = check_scores(scores, labels)?;
    if k == 0 || k > m {
        return Err(Error::Config(format!("top-k with k = {k} for {m} classes")));
    }
    Ok(scores.data().chunks(m).zip(labels).filter(|(row, &y)| in_top_k(row, y, k)).count())
}

/// Fraction of samples whose label is in the top `k` scores. With `k = 1`
/// this is correct predictions over total samples.
pub fn topk_accuracy<T: Element>(scores: &Tensor<T>, labels: &[usize], k: usize) -> Result<f64> {
    let correct = topk_correct(scores, labels, k)?;
    Ok(if labels.is_empty() { 0.0 } else { correct as f64 / labels.len() as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(rows: &[&[f64]]) -> Tensor<f64> {
        let m = rows[0].len();
        Tensor::new(&[rows.len(), m], rows.concat()).unwrap()
    }

    #[test]
    fn uniform_scores_give_log_m() {
        let s = Tensor::<f64>::zeros(&[3, 4]);
        let loss = cross_entropy(&s, &[0, 1, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_prediction_has_near_zero_loss() {
        let s = scores(&[&[50.0, 0.0, 0.0]]);
        assert!(cross_entropy(&s, &[0]).unwrap() < 1e-20);
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let s = scores(&[&[1e4, -1e4], &[-1e4, 1e4]]);
        let loss = cross_entropy(&s, &[1, 1]).unwrap();
        assert!(loss.is_finite());
        assert!((loss - 1e4).abs() < 1e-9);
    }

    #[test]
    fn ties_resolve_to_lowest_class() {
        let s = Tensor::<f64>::zeros(&[4, 3]);
        assert_eq!(topk_correct(&s, &[0, 1, 2, 0], 1).unwrap(), 2);
        assert_eq!(topk_correct(&s, &[0, 1, 2, 0], 2).unwrap(), 3);
    }

    #[test]
    fn k_larger_than_classes_is_rejected() {
        let s = Tensor::<f64>::zeros(&[1, 3]);
        assert!(topk_accuracy(&s, &[0], 4).is_err());
        assert!(topk_accuracy(&s, &[0], 0).is_err());
        assert_eq!(topk_accuracy(&s, &[2], 3).unwrap(), 1.0);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let s = Tensor::<f64>::zeros(&[1, 3]);
        assert!(topk_accuracy(&s, &[3], 1).is_err());
        assert!(cross_entropy(&s, &[3]).is_err());
    }
}
