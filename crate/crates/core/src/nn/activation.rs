use super::Tensor;
use crate::error::{Error, Result};
use crate::rng::CounterRng;

/// ELU with α = 1.
pub fn elu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { v.exp_m1() })
}

/// Uses the forward output: for x ≤ 0, d/dx (eˣ − 1) = y + 1.
pub fn elu_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&yv, &g)| if yv > 0.0 { g } else { g * (yv + 1.0) })
        .collect();
    Tensor::from_vec(y.dims(), data).expect("same dims")
}

/// Per-element scale of an inverted-dropout draw: 0 or 1/(1 − p).
#[derive(Debug, Clone)]
pub struct DropoutMask(Vec<f64>);

/// Inverted dropout; element `i` is dropped when draw `i` of `rng` is below `p`.
/// `rng == None` means eval mode (identity).
pub fn dropout(x: &Tensor, p: f64, rng: Option<&CounterRng>) -> Result<(Tensor, Option<DropoutMask>)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("dropout probability {p} not in [0, 1)")));
    }
    let rng = match rng {
        Some(r) if p > 0.0 => r,
        _ => return Ok((x.clone(), None)),
    };
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..x.len() as u64)
        .map(|i| if rng.uniform_at(i) < p { 0.0 } else { keep })
        .collect();
    let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
    Ok((Tensor::from_vec(x.dims(), data)?, Some(DropoutMask(mask))))
}

pub fn dropout_backward(mask: Option<&DropoutMask>, dy: &Tensor) -> Tensor {
    match mask {
        None => dy.clone(),
        Some(DropoutMask(m)) => {
            let data = dy.data().iter().zip(m).map(|(g, k)| g * k).collect();
            Tensor::from_vec(dy.dims(), data).expect("same dims")
        }
    }
}

/// Row-wise softmax of a `[rows, cols]` buffer, max-shifted.
pub fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = x.to_vec();
    for row in out.chunks_mut(cols) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Mean categorical cross-entropy over rows and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &[f64], n_classes: usize, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    if logits.len() != labels.len() * n_classes {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} logits for {} labels x {n_classes} classes", logits.len(), labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range 0..{n_classes}")));
    }
    let n = labels.len() as f64;
    let mut loss = 0.0;
    let mut grad = softmax_rows(logits, n_classes);
    for (i, (row, &label)) in logits.chunks(n_classes).zip(labels).enumerate() {
        loss -= log_softmax(row)[label];
        let g = &mut grad[i * n_classes..(i + 1) * n_classes];
        g[label] -= 1.0;
        for v in g.iter_mut() {
            *v /= n;
        }
    }
    Ok((loss / n, grad))
}
