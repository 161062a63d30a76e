use super::Tensor;
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
/// Weight of the current batch in the running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-feature parameters and running statistics, borrowed from the model.
pub struct BatchNormParams<'a> {
    pub gamma: &'a [f64],
    pub beta: &'a [f64],
    pub running_mean: &'a mut [f64],
    pub running_var: &'a mut [f64],
}

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    x_hat: Vec<f64>,
    inv_std: Vec<f64>,
    dims: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct BatchNormGrads {
    pub input: Tensor,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

fn layout(x: &Tensor, n_features: usize) -> Result<(usize, usize)> {
    let dims = x.dims();
    if dims.len() < 2 || dims[1] != n_features {
        return Err(Error::shape(
            "batchnorm",
            format!("input {dims:?} does not have {n_features} features on axis 1"),
        ));
    }
    Ok((dims[0], dims[2..].iter().product()))
}

/// Normalize with batch statistics over (batch, depth, height, width) and
/// fold them into the running estimates (unbiased variance).
pub fn batchnorm_train(x: &Tensor, p: BatchNormParams<'_>) -> Result<(Tensor, BatchNormCache)> {
    let f = p.gamma.len();
    let (batch, spatial) = layout(x, f)?;
    if batch < 2 {
        return Err(Error::InvalidArgument(
            "batchnorm in train mode needs a batch of at least 2".into(),
        ));
    }
    let n = (batch * spatial) as f64;
    let xd = x.data();
    let mut y = vec![0.0; xd.len()];
    let mut x_hat = vec![0.0; xd.len()];
    let mut inv_std = vec![0.0; f];
    for c in 0..f {
        let blocks = || (0..batch).map(move |b| (b * f + c) * spatial);
        let mut sum = 0.0;
        for off in blocks() {
            sum += xd[off..off + spatial].iter().sum::<f64>();
        }
        let mean = sum / n;
        let mut ss = 0.0;
        for off in blocks() {
            ss += xd[off..off + spatial].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
        }
        let var = ss / n;
        let is = 1.0 / (var + BN_EPS).sqrt();
        inv_std[c] = is;
        for off in blocks() {
            for i in off..off + spatial {
                let h = (xd[i] - mean) * is;
                x_hat[i] = h;
                y[i] = p.gamma[c] * h + p.beta[c];
            }
        }
        let unbiased = if n > 1.0 { ss / (n - 1.0) } else { 0.0 };
        p.running_mean[c] = (1.0 - BN_MOMENTUM) * p.running_mean[c] + BN_MOMENTUM * mean;
        p.running_var[c] = (1.0 - BN_MOMENTUM) * p.running_var[c] + BN_MOMENTUM * unbiased;
    }
    Ok((
        Tensor::from_vec(x.dims(), y)?,
        BatchNormCache {
            x_hat,
            inv_std,
            dims: x.dims().to_vec(),
        },
    ))
}

pub fn batchnorm_eval(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
) -> Result<Tensor> {
    let f = gamma.len();
    let (batch, spatial) = layout(x, f)?;
    let mut y = x.data().to_vec();
    for b in 0..batch {
        for c in 0..f {
            let scale = gamma[c] / (running_var[c] + BN_EPS).sqrt();
            let shift = beta[c] - running_mean[c] * scale;
            for v in &mut y[(b * f + c) * spatial..][..spatial] {
                *v = *v * scale + shift;
            }
        }
    }
    Tensor::from_vec(x.dims(), y)
}

/// Backward of [`batchnorm_train`] (batch statistics are functions of the input).
pub fn batchnorm_backward(cache: &BatchNormCache, dy: &Tensor, gamma: &[f64]) -> Result<BatchNormGrads> {
    if dy.dims() != cache.dims.as_slice() {
        return Err(Error::shape("batchnorm backward", format!("gradient dims {:?}", dy.dims())));
    }
    let f = gamma.len();
    let batch = cache.dims[0];
    let spatial: usize = cache.dims[2..].iter().product();
    let n = (batch * spatial) as f64;
    let dyd = dy.data();
    let mut dx = vec![0.0; dyd.len()];
    let mut dgamma = vec![0.0; f];
    let mut dbeta = vec![0.0; f];
    for c in 0..f {
        let mut sum_dy = 0.0;
        let mut sum_dy_xh = 0.0;
        for b in 0..batch {
            let off = (b * f + c) * spatial;
            for i in off..off + spatial {
                sum_dy += dyd[i];
                sum_dy_xh += dyd[i] * cache.x_hat[i];
            }
        }
        dgamma[c] = sum_dy_xh;
        dbeta[c] = sum_dy;
        let k = gamma[c] * cache.inv_std[c] / n;
        for b in 0..batch {
            let off = (b * f + c) * spatial;
            for i in off..off + spatial {
                dx[i] = k * (n * dyd[i] - sum_dy - cache.x_hat[i] * sum_dy_xh);
            }
        }
    }
    Ok(BatchNormGrads {
        input: Tensor::from_vec(&cache.dims, dx)?,
        gamma: dgamma,
        beta: dbeta,
    })
}
