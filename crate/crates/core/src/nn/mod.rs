//! Minimal layer substrate with hand-written backward passes.
//!
//! Every layer is a pair of free functions: a forward pass that returns
//! whatever the backward pass needs, and a backward pass that maps the
//! upstream gradient to input and parameter gradients. Tensors are dense,
//! row-major, 64-bit. Five-dimensional tensors use the axis order
//! `[batch, feature, depth, height, width]`.

mod activation;
mod conv;
mod dense;
mod gradcheck;
mod norm;
mod pool;

pub use activation::{
    cross_entropy, dropout, dropout_backward, elu, elu_backward, log_softmax, softmax_rows,
    DropoutMask,
};
pub use conv::{conv3d_backward, conv3d_output_dims, conv3d_valid, Conv3dGrads};
pub use dense::{dense, dense_backward, DenseGrads};
pub use gradcheck::{grad_check, GradCheck, REL_FLOOR};
pub use norm::{batchnorm_backward, batchnorm_eval, batchnorm_train, BatchNormCache, BatchNormGrads, BatchNormParams, BN_EPS, BN_MOMENTUM};
pub use pool::{pool3d, pool3d_backward, pool_output_dims, PoolCache, PoolKind};

use crate::error::{Error, Result};
use crate::rng::CounterRng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(dims: &[usize]) -> Self {
        Self {
            dims: dims.to_vec(),
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "dims {dims:?} hold {n} values, got {}",
                data.len()
            )));
        }
        if dims.contains(&0) {
            return Err(Error::Dimension(format!("dims {dims:?} contain a zero axis")));
        }
        Ok(Self {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn filled(dims: &[usize], value: f64) -> Self {
        Self {
            dims: dims.to_vec(),
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        if dims.iter().product::<usize>() != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {dims:?}",
                self.dims
            )));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    /// Dims of a rank-5 tensor.
    pub fn dim5(&self, layer: &str) -> Result<[usize; 5]> {
        <[usize; 5]>::try_from(self.dims.as_slice())
            .map_err(|_| Error::shape(layer, format!("expected rank 5, got {:?}", self.dims)))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Uniform values in `[-bound, bound)`.
    pub fn uniform(dims: &[usize], bound: f64, rng: &mut CounterRng) -> Self {
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: (0..n).map(|_| rng.uniform_range(-bound, bound)).collect(),
        }
    }
}

/// Concatenate rank-5 tensors along `axis`.
pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat", "no inputs"))?
        .dim5("concat")?;
    let mut out_dims = first;
    out_dims[axis] = 0;
    for p in parts {
        let d = p.dim5("concat")?;
        for a in 0..5 {
            if a != axis && d[a] != first[a] {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?} differ off axis {axis}", p.dims(), first),
                ));
            }
        }
        out_dims[axis] += d[axis];
    }
    let outer: usize = out_dims[..axis].iter().product();
    let mut data = Vec::with_capacity(out_dims.iter().product());
    for o in 0..outer {
        for p in parts {
            let chunk: usize = p.dims()[axis..].iter().product();
            data.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Tensor::from_vec(&out_dims, data)
}

/// Split the gradient of [`concat`] back into parts with the given sizes along `axis`.
pub fn split(grad: &Tensor, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor>> {
    let dims = grad.dim5("split")?;
    if sizes.iter().sum::<usize>() != dims[axis] {
        return Err(Error::shape("split", format!("sizes {sizes:?} vs axis of {}", dims[axis])));
    }
    let outer: usize = dims[..axis].iter().product();
    let inner: usize = dims[axis + 1..].iter().product();
    let mut parts: Vec<Vec<f64>> = sizes
        .iter()
        .map(|s| Vec::with_capacity(outer * s * inner))
        .collect();
    let row: usize = dims[axis] * inner;
    for o in 0..outer {
        let mut off = o * row;
        for (p, &s) in parts.iter_mut().zip(sizes) {
            p.extend_from_slice(&grad.data()[off..off + s * inner]);
            off += s * inner;
        }
    }
    parts
        .into_iter()
        .zip(sizes)
        .map(|(data, &s)| {
            let mut d = dims;
            d[axis] = s;
            Tensor::from_vec(&d, data)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_then_split() {
        let a = Tensor::from_vec(&[2, 1, 1, 1, 3], (0..6).map(f64::from).collect()).unwrap();
        let b = Tensor::from_vec(&[2, 1, 1, 1, 3], (6..12).map(f64::from).collect()).unwrap();
        let c = concat(&[&a, &b], 3).unwrap();
        assert_eq!(c.dims(), &[2, 1, 1, 2, 3]);
        assert_eq!(&c.data()[..6], &[0.0, 1.0, 2.0, 6.0, 7.0, 8.0]);
        let parts = split(&c, 3, &[1, 1]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn zero_axis_rejected() {
        assert!(Tensor::from_vec(&[2, 0], vec![]).is_err());
    }
}
