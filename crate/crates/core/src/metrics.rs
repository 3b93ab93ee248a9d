//! Classification metrics.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

fn rows<T: Element>(scores: &Tensor<T>, n: usize, what: &str) -> Result<usize> {
    match scores.shape() {
        [b, c] if *b == n => Ok(*c),
        s => Err(Error::Metric(format!(
            "{what}: scores {s:?} do not match {n} label rows"
        ))),
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Element>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax equals the single label.
pub fn accuracy<T: Element>(logits: &Tensor<T>, labels: &[Vec<u32>]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Metric("accuracy of an empty batch".into()));
    }
    let c = rows(logits, labels.len(), "accuracy")?;
    let mut hits = 0usize;
    for (i, l) in labels.iter().enumerate() {
        let [label] = l.as_slice() else {
            return Err(Error::Metric(format!(
                "accuracy needs exactly one label per example, row {i} has {}",
                l.len()
            )));
        };
        if *label as usize >= c {
            return Err(Error::Metric(format!("label {label} out of range for {c} classes")));
        }
        if argmax(&logits.data()[i * c..(i + 1) * c]) == *label as usize {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}

/// Average precision of one class: precision at each positive's rank,
/// averaged. Examples are ranked by descending score, ties by input order.
/// `None` when the class has no positives.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut found = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if positive[i] {
            found += 1;
            sum += found as f64 / (rank + 1) as f64;
        }
    }
    (found > 0).then(|| sum / found as f64)
}

/// Unweighted mean of per-class average precision over classes that have at
/// least one positive.
pub fn mean_average_precision<T: Element>(scores: &Tensor<T>, labels: &[Vec<u32>]) -> Result<f64> {
    let c = rows(scores, labels.len(), "mAP")?;
    let n = labels.len();
    let mut positive = vec![false; n * c];
    for (i, l) in labels.iter().enumerate() {
        for &k in l {
            if k as usize >= c {
                return Err(Error::Metric(format!("label {k} out of range for {c} classes")));
            }
            positive[k as usize * n + i] = true;
        }
    }
    let mut total = 0.0;
    let mut eligible = 0usize;
    let mut column = vec![0.0; n];
    for k in 0..c {
        for (i, v) in column.iter_mut().enumerate() {
            *v = scores.data()[i * c + k].to_f64_lossy();
        }
        if let Some(ap) = average_precision(&column, &positive[k * n..(k + 1) * n]) {
            total += ap;
            eligible += 1;
        }
    }
    if eligible == 0 {
        return Err(Error::Metric("mAP needs at least one positive label".into()));
    }
    Ok(total / eligible as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: [usize; 2], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn one_hot_logits_are_fully_accurate() {
        let labels = vec![vec![2], vec![0], vec![1]];
        let l = t([3, 3], &[0., 0., 1., 1., 0., 0., 0., 1., 0.]);
        assert_eq!(accuracy(&l, &labels).unwrap(), 1.0);
    }

    #[test]
    fn ties_pick_the_lowest_class() {
        let labels = vec![vec![0], vec![1], vec![0], vec![1]];
        assert_eq!(accuracy(&Tensor::<f64>::zeros([4, 2]), &labels).unwrap(), 0.5);
        let labels = vec![vec![0], vec![0], vec![0], vec![1]];
        assert_eq!(accuracy(&Tensor::<f64>::zeros([4, 2]), &labels).unwrap(), 0.75);
    }

    #[test]
    fn multilabel_rows_are_rejected_by_accuracy() {
        let labels = vec![vec![0, 1]];
        assert!(accuracy(&Tensor::<f64>::zeros([1, 2]), &labels).is_err());
        assert!(accuracy(&Tensor::<f64>::zeros([2, 2]), &[vec![0]]).is_err());
    }

    #[test]
    fn worked_average_precision() {
        let ap = average_precision(&[0.9, 0.8, 0.1], &[true, false, true]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert!((ap - 0.8333).abs() < 1e-4);
    }

    #[test]
    fn perfect_ranking_and_eligibility() {
        let s = t([3, 3], &[0.9, 0.1, 0.5, 0.2, 0.8, 0.5, 0.1, 0.7, 0.5]);
        let labels = vec![vec![0], vec![1], vec![1]];
        assert_eq!(mean_average_precision(&s, &labels).unwrap(), 1.0);
        assert!(mean_average_precision(&s, &[vec![], vec![], vec![]]).is_err());
    }
}
