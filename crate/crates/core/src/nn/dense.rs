use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct DenseGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

fn check(x: &Tensor, weight: &Tensor) -> Result<(usize, usize, usize)> {
    let (&[b, n], &[m, wn]) = (x.dims(), weight.dims()) else {
        return Err(Error::shape(
            "dense",
            format!("expected [B, n] input and [m, n] weight, got {:?} and {:?}", x.dims(), weight.dims()),
        ));
    };
    if n != wn {
        return Err(Error::shape("dense", format!("input width {n} vs weight width {wn}")));
    }
    Ok((b, n, m))
}

/// `y = x·Wᵀ + b` with `x: [B, n]`, `W: [m, n]`.
pub fn dense(x: &Tensor, weight: &Tensor, bias: &[f64]) -> Result<Tensor> {
    let (b_n, n, m) = check(x, weight)?;
    if bias.len() != m {
        return Err(Error::shape("dense", format!("{} biases for {m} outputs", bias.len())));
    }
    let mut y = Vec::with_capacity(b_n * m);
    for row in x.data().chunks(n) {
        for (wrow, &bj) in weight.data().chunks(n).zip(bias) {
            y.push(bj + row.iter().zip(wrow).map(|(a, w)| a * w).sum::<f64>());
        }
    }
    Tensor::from_vec(&[b_n, m], y)
}

pub fn dense_backward(x: &Tensor, weight: &Tensor, dy: &Tensor) -> Result<DenseGrads> {
    let (b_n, n, m) = check(x, weight)?;
    if dy.dims() != [b_n, m] {
        return Err(Error::shape("dense backward", format!("gradient dims {:?}", dy.dims())));
    }
    let mut dx = vec![0.0; b_n * n];
    let mut dw = vec![0.0; m * n];
    let mut db = vec![0.0; m];
    for (i, (g_row, x_row)) in dy.data().chunks(m).zip(x.data().chunks(n)).enumerate() {
        let dx_row = &mut dx[i * n..(i + 1) * n];
        for (j, &g) in g_row.iter().enumerate() {
            db[j] += g;
            let w_row = &weight.data()[j * n..(j + 1) * n];
            let dw_row = &mut dw[j * n..(j + 1) * n];
            for k in 0..n {
                dx_row[k] += g * w_row[k];
                dw_row[k] += g * x_row[k];
            }
        }
    }
    Ok(DenseGrads {
        input: Tensor::from_vec(&[b_n, n], dx)?,
        weight: Tensor::from_vec(&[m, n], dw)?,
        bias: db,
    })
}
