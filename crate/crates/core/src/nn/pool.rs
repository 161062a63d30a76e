use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

/// `⌊(in − k)/s⌋ + 1` per axis; a trailing remainder is dropped.
pub fn pool_output_dims(input: [usize; 3], kernel: [usize; 3], stride: [usize; 3]) -> Option<[usize; 3]> {
    super::conv3d_output_dims(input, kernel, stride)
}

#[derive(Debug, Clone)]
pub struct PoolCache {
    kind: PoolKind,
    input_dims: Vec<usize>,
    kernel: [usize; 3],
    stride: [usize; 3],
    /// Flat input index of each window's maximum (max pooling only).
    argmax: Vec<usize>,
}

pub fn pool3d(x: &Tensor, kind: PoolKind, kernel: [usize; 3], stride: [usize; 3]) -> Result<(Tensor, PoolCache)> {
    let [b_n, f_n, d, h, w] = x.dim5("pool input")?;
    let [od, oh, ow] = pool_output_dims([d, h, w], kernel, stride).ok_or_else(|| {
        Error::shape("pool", format!("kernel {kernel:?} stride {stride:?} does not fit {:?}", [d, h, w]))
    })?;
    let xd = x.data();
    let mut y = Vec::with_capacity(b_n * f_n * od * oh * ow);
    let mut argmax = Vec::new();
    let norm = 1.0 / (kernel.iter().product::<usize>() as f64);
    for bf in 0..b_n * f_n {
        let vol = bf * d * h * w;
        for p in 0..od {
            for q in 0..oh {
                for r in 0..ow {
                    let mut sum = 0.0;
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for a in 0..kernel[0] {
                        for c in 0..kernel[1] {
                            let row = vol + ((p * stride[0] + a) * h + q * stride[1] + c) * w + r * stride[2];
                            for (k, &v) in xd[row..row + kernel[2]].iter().enumerate() {
                                sum += v;
                                // first maximum wins on ties
                                if v > best {
                                    best = v;
                                    best_i = row + k;
                                }
                            }
                        }
                    }
                    match kind {
                        PoolKind::Avg => y.push(sum * norm),
                        PoolKind::Max => {
                            y.push(best);
                            argmax.push(best_i);
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(&[b_n, f_n, od, oh, ow], y)?,
        PoolCache {
            kind,
            input_dims: x.dims().to_vec(),
            kernel,
            stride,
            argmax,
        },
    ))
}

pub fn pool3d_backward(cache: &PoolCache, dy: &Tensor) -> Result<Tensor> {
    let mut dx = vec![0.0; cache.input_dims.iter().product()];
    match cache.kind {
        PoolKind::Max => {
            if dy.len() != cache.argmax.len() {
                return Err(Error::shape("maxpool backward", format!("gradient dims {:?}", dy.dims())));
            }
            for (&i, &g) in cache.argmax.iter().zip(dy.data()) {
                dx[i] += g;
            }
        }
        PoolKind::Avg => {
            let [_, _, d, h, w] = <[usize; 5]>::try_from(cache.input_dims.as_slice()).unwrap();
            let [_, _, od, oh, ow] = dy.dim5("avgpool backward")?;
            let (k, s) = (cache.kernel, cache.stride);
            let norm = 1.0 / (k.iter().product::<usize>() as f64);
            for (o, &g) in dy.data().iter().enumerate() {
                let r = o % ow;
                let q = (o / ow) % oh;
                let p = (o / (ow * oh)) % od;
                let bf = o / (ow * oh * od);
                let vol = bf * d * h * w;
                for a in 0..k[0] {
                    for c in 0..k[1] {
                        let row = vol + ((p * s[0] + a) * h + q * s[1] + c) * w + r * s[2];
                        for v in &mut dx[row..row + k[2]] {
                            *v += g * norm;
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&cache.input_dims, dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check;
    use crate::rng::CounterRng;

    #[test]
    fn table_shapes() {
        assert_eq!(pool_output_dims([3, 3, 862], [1, 1, 4], [1, 1, 4]), Some([3, 3, 215]));
        assert_eq!(pool_output_dims([4, 4, 931], [1, 1, 2], [1, 1, 2]), Some([4, 4, 465]));
        assert_eq!(pool_output_dims([1, 1, 3], [1, 1, 4], [1, 1, 4]), None);
    }

    #[test]
    fn constant_input_gives_constant_output() {
        let x = Tensor::filled(&[2, 3, 2, 2, 9], -1.5);
        for kind in [PoolKind::Avg, PoolKind::Max] {
            let (y, _) = pool3d(&x, kind, [1, 1, 4], [1, 1, 4]).unwrap();
            assert_eq!(y.dims(), &[2, 3, 2, 2, 2]);
            assert!(y.data().iter().all(|&v| v == -1.5));
        }
    }

    #[test]
    fn windows() {
        let x = Tensor::from_vec(&[1, 1, 1, 1, 5], vec![1.0, 4.0, 2.0, 8.0, 100.0]).unwrap();
        let (avg, _) = pool3d(&x, PoolKind::Avg, [1, 1, 2], [1, 1, 2]).unwrap();
        let (max, _) = pool3d(&x, PoolKind::Max, [1, 1, 2], [1, 1, 2]).unwrap();
        assert_eq!(avg.data(), &[2.5, 5.0]);
        assert_eq!(max.data(), &[4.0, 8.0]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = CounterRng::new(8, &[]);
        // distinct values keep max pooling away from ties
        let x = Tensor::uniform(&[2, 2, 2, 3, 9], 1.0, &mut rng);
        for (kind, k, s) in [
            (PoolKind::Avg, [1, 1, 4], [1, 1, 4]),
            (PoolKind::Max, [1, 1, 2], [1, 1, 2]),
            (PoolKind::Avg, [2, 2, 2], [1, 1, 2]),
            (PoolKind::Max, [1, 2, 3], [1, 1, 2]),
        ] {
            let (y, cache) = pool3d(&x, kind, k, s).unwrap();
            let up = Tensor::uniform(y.dims(), 1.0, &mut rng);
            let dx = pool3d_backward(&cache, &up).unwrap();
            let r = grad_check(x.data(), dx.data(), 1e-6, |v| {
                let xv = Tensor::from_vec(x.dims(), v.to_vec()).unwrap();
                let (y, _) = pool3d(&xv, kind, k, s).unwrap();
                y.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
            });
            assert!(r.max_rel_error < 1e-6, "{kind:?}: {r:?}");
        }
    }
}
