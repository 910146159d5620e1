use super::layers::softmax;
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn check_rows(logits: &Tensor, n: usize) -> Result<usize> {
    if logits.shape().len() != 2 || logits.batch() != n {
        return Err(Error::Shape(format!("expected [{n}, classes] logits, got {:?}", logits.shape())));
    }
    Ok(logits.shape()[1])
}

/// Mean categorical cross-entropy of `softmax(logits)` against integer
/// targets, with the gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<(f64, Tensor)> {
    let width = check_rows(logits, targets.len())?;
    if targets.is_empty() {
        return Err(Error::EmptyDataset("cross-entropy over an empty batch".into()));
    }
    let n = targets.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (row, &t) in logits.data().chunks_exact(width).zip(targets) {
        if t >= width {
            return Err(Error::InvalidInput(format!("target {t} outside {width} classes")));
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[t];
        let p = softmax(row);
        grad.extend(p.iter().enumerate().map(|(j, pj)| (pj - f64::from(j == t)) / n));
    }
    Ok((loss / n, Tensor::new(logits.shape().to_vec(), grad)?))
}

/// Mean squared error over every element, with its gradient.
pub fn mse(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    same_shape(pred, target)?;
    let n = pred.len() as f64;
    let diff: Vec<f64> = pred.data().iter().zip(target.data()).map(|(p, t)| p - t).collect();
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    let grad = diff.into_iter().map(|d| 2.0 * d / n).collect();
    Ok((loss, Tensor::new(pred.shape().to_vec(), grad)?))
}

/// Mean squared error against an all-zero target.
pub fn mse_to_zero(pred: &Tensor) -> Result<(f64, Tensor)> {
    mse(pred, &Tensor::zeros(pred.shape().to_vec()))
}

/// Mean absolute error of each batch element.
pub fn mae_per_example(pred: &Tensor, target: &Tensor) -> Result<Vec<f64>> {
    same_shape(pred, target)?;
    let m = pred.example_len();
    Ok(pred
        .data()
        .chunks_exact(m)
        .zip(target.data().chunks_exact(m))
        .map(|(p, t)| p.iter().zip(t).map(|(a, b)| (a - b).abs()).sum::<f64>() / m as f64)
        .collect())
}

/// Mean absolute error over every element, with a subgradient (sign / N).
pub fn mae(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    same_shape(pred, target)?;
    let n = pred.len() as f64;
    let diff: Vec<f64> = pred.data().iter().zip(target.data()).map(|(p, t)| p - t).collect();
    let loss = diff.iter().map(|d| d.abs()).sum::<f64>() / n;
    let grad = diff.into_iter().map(|d| if d == 0.0 { 0.0 } else { d.signum() / n }).collect();
    Ok((loss, Tensor::new(pred.shape().to_vec(), grad)?))
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.is_empty() {
        return Err(Error::EmptyDataset("loss over an empty tensor".into()));
    }
    Ok(())
}
