//! Single-head scaled dot-product attention across EEG channels.
//!
//! An epoch `X` is `[C × T]`: one row per channel. The projections act on the
//! time axis, so every channel becomes a query, key and value vector and the
//! attention matrix is `[C × C]`.

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::rng::CounterRng;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
}

impl AttentionParams {
    pub fn new(wq: Array2<f64>, wk: Array2<f64>, wv: Array2<f64>) -> Result<Self> {
        let t = wq.nrows();
        if wk.nrows() != t || wv.nrows() != t {
            return Err(Error::shape("attention", "W_q, W_k, W_v differ in input width"));
        }
        if wq.ncols() != wk.ncols() {
            return Err(Error::shape(
                "attention",
                format!("W_q has d_k = {}, W_k has d_k = {}", wq.ncols(), wk.ncols()),
            ));
        }
        if t == 0 || wq.ncols() == 0 || wv.ncols() == 0 {
            return Err(Error::shape("attention", "empty projection"));
        }
        Ok(Self { wq, wk, wv })
    }

    /// Uniform initialization in ±√(1/T).
    pub fn init(t: usize, d_k: usize, d_v: usize, rng: &mut CounterRng) -> Self {
        let bound = (1.0 / t as f64).sqrt();
        let mut draw = |cols| Array2::from_shape_simple_fn((t, cols), || rng.uniform_range(-bound, bound));
        let wq = draw(d_k);
        let wk = draw(d_k);
        let wv = draw(d_v);
        Self { wq, wk, wv }
    }

    pub fn t(&self) -> usize {
        self.wq.nrows()
    }

    pub fn d_k(&self) -> usize {
        self.wq.ncols()
    }

    pub fn d_v(&self) -> usize {
        self.wv.ncols()
    }
}

pub fn project_qkv(
    x: ArrayView2<'_, f64>,
    p: &AttentionParams,
) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
    if x.ncols() != p.t() {
        return Err(Error::shape(
            "attention",
            format!("input has {} samples, projections expect {}", x.ncols(), p.t()),
        ));
    }
    Ok((x.dot(&p.wq), x.dot(&p.wk), x.dot(&p.wv)))
}

fn softmax_rows(mut s: Array2<f64>) -> Array2<f64> {
    for mut row in s.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row /= z;
    }
    s
}

/// Row-softmax of `QKᵀ/√d_k`.
pub fn attention_weights(q: ArrayView2<'_, f64>, k: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if q.ncols() != k.ncols() || q.nrows() != k.nrows() {
        return Err(Error::shape(
            "attention",
            format!("Q {:?} and K {:?} disagree", q.dim(), k.dim()),
        ));
    }
    if q.iter().chain(k.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("attention scores".into()));
    }
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    Ok(softmax_rows(q.dot(&k.t()) * scale))
}

pub fn scaled_dot_attention(
    q: ArrayView2<'_, f64>,
    k: ArrayView2<'_, f64>,
    v: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    if v.nrows() != q.nrows() {
        return Err(Error::shape("attention", format!("V has {} rows, Q has {}", v.nrows(), q.nrows())));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("attention values".into()));
    }
    Ok(attention_weights(q, k)?.dot(&v))
}

/// Everything the backward pass needs from one forward call.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    a: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct AttentionGrads {
    pub input: Array2<f64>,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
}

pub fn channel_attention(x: ArrayView2<'_, f64>, p: &AttentionParams) -> Result<Array2<f64>> {
    Ok(channel_attention_cached(x, p)?.0)
}

pub fn channel_attention_cached(
    x: ArrayView2<'_, f64>,
    p: &AttentionParams,
) -> Result<(Array2<f64>, AttentionCache)> {
    if p.d_v() != p.t() {
        return Err(Error::shape(
            "attention",
            format!("d_v = {} must equal T = {}", p.d_v(), p.t()),
        ));
    }
    let (q, k, v) = project_qkv(x, p)?;
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("attention values".into()));
    }
    let a = attention_weights(q.view(), k.view())?;
    let out = a.dot(&v);
    Ok((
        out,
        AttentionCache {
            x: x.to_owned(),
            q,
            k,
            v,
            a,
        },
    ))
}

pub fn channel_attention_backward(
    cache: &AttentionCache,
    p: &AttentionParams,
    dy: ArrayView2<'_, f64>,
) -> Result<AttentionGrads> {
    if dy.dim() != (cache.a.nrows(), cache.v.ncols()) {
        return Err(Error::shape("attention backward", format!("gradient dims {:?}", dy.dim())));
    }
    let scale = 1.0 / (cache.q.ncols() as f64).sqrt();
    let dv = cache.a.t().dot(&dy);
    let da = dy.dot(&cache.v.t());
    let row_dot = (&da * &cache.a).sum_axis(Axis(1)).insert_axis(Axis(1));
    let ds = &cache.a * &(da - &row_dot) * scale;
    let dq = ds.dot(&cache.k);
    let dk = ds.t().dot(&cache.q);
    let xt = cache.x.t();
    let input = dq.dot(&p.wq.t()) + dk.dot(&p.wk.t()) + dv.dot(&p.wv.t());
    Ok(AttentionGrads {
        input,
        wq: xt.dot(&dq),
        wk: xt.dot(&dk),
        wv: xt.dot(&dv),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check;
    use ndarray::{arr2, Array2};

    fn random(rows: usize, cols: usize, rng: &mut CounterRng) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || rng.uniform_range(-1.0, 1.0))
    }

    fn random_params(t: usize, d_k: usize, rng: &mut CounterRng) -> AttentionParams {
        AttentionParams::new(random(t, d_k, rng), random(t, d_k, rng), random(t, t, rng)).unwrap()
    }

    #[test]
    fn zero_input_projects_to_zero() {
        let mut rng = CounterRng::new(1, &[]);
        let p = random_params(5, 3, &mut rng);
        let (q, k, v) = project_qkv(Array2::zeros((4, 5)).view(), &p).unwrap();
        assert!(q.iter().chain(&k).chain(&v).all(|&x| x == 0.0));
        let y = channel_attention(Array2::zeros((4, 5)).view(), &p).unwrap();
        assert!(y.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn identity_query_projection() {
        let mut rng = CounterRng::new(2, &[]);
        let x = random(3, 4, &mut rng);
        let p = AttentionParams::new(Array2::eye(4), random(4, 4, &mut rng), random(4, 4, &mut rng)).unwrap();
        assert_eq!(project_qkv(x.view(), &p).unwrap().0, x);
    }

    #[test]
    fn hand_projection() {
        let x = arr2(&[[1.0, 2.0, 3.0], [-1.0, 0.5, 2.0]]);
        let w = arr2(&[[1.0, 0.0], [2.0, -1.0], [0.5, 3.0]]);
        let p = AttentionParams::new(w.clone(), w.clone(), Array2::eye(3)).unwrap();
        let (q, _, _) = project_qkv(x.view(), &p).unwrap();
        // row 0: [1 + 4 + 1.5, −2 + 9], row 1: [−1 + 1 + 1, −0.5 + 6]
        assert_eq!(q, arr2(&[[6.5, 7.0], [1.0, 5.5]]));
    }

    #[test]
    fn single_channel_returns_values() {
        let mut rng = CounterRng::new(3, &[]);
        let q = random(1, 3, &mut rng);
        let k = random(1, 3, &mut rng);
        let v = random(1, 6, &mut rng);
        assert_eq!(scaled_dot_attention(q.view(), k.view(), v.view()).unwrap(), v);
    }

    #[test]
    fn uniform_scores_average_values() {
        let mut rng = CounterRng::new(4, &[]);
        let k = random(5, 3, &mut rng);
        let v = random(5, 4, &mut rng);
        let y = scaled_dot_attention(Array2::zeros((5, 3)).view(), k.view(), v.view()).unwrap();
        let mean = v.mean_axis(Axis(0)).unwrap();
        for row in y.rows() {
            for (a, b) in row.iter().zip(&mean) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_channel_identity_case() {
        let i2: Array2<f64> = Array2::eye(2);
        let y = scaled_dot_attention(i2.view(), i2.view(), i2.view()).unwrap();
        let e = (1.0 / 2f64.sqrt()).exp();
        let w0 = e / (e + 1.0);
        assert!((y[[0, 0]] - w0).abs() < 1e-12);
        assert!((y[[0, 1]] - (1.0 - w0)).abs() < 1e-12);
        assert!((y[[0, 0]] - 0.6698).abs() < 5e-5);
        assert!((y[[0, 1]] - 0.3302).abs() < 5e-5);
    }

    #[test]
    fn matches_scalar_loops() {
        let mut rng = CounterRng::new(5, &[]);
        let (c, t, d) = (2, 3, 2);
        let x = random(c, t, &mut rng);
        let p = random_params(t, d, &mut rng);
        let y = channel_attention(x.view(), &p).unwrap();
        let proj = |w: &Array2<f64>, i: usize, j: usize| (0..t).map(|s| x[[i, s]] * w[[s, j]]).sum::<f64>();
        for i in 0..c {
            let scores: Vec<f64> = (0..c)
                .map(|j| (0..d).map(|m| proj(&p.wq, i, m) * proj(&p.wk, j, m)).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            for col in 0..t {
                let want: f64 = (0..c).map(|j| scores[j].exp() / z * proj(&p.wv, j, col)).sum();
                assert!((y[[i, col]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rows_sum_to_one_and_shift_invariant() {
        let mut rng = CounterRng::new(6, &[]);
        let q = random(6, 4, &mut rng) * 5.0;
        let k = random(6, 4, &mut rng) * 5.0;
        let a = attention_weights(q.view(), k.view()).unwrap();
        for row in a.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&w| w > 0.0));
        }
        let s = q.dot(&k.t()) / 2.0;
        let shifted = softmax_rows(s.clone() + 17.0);
        for (a, b) in softmax_rows(s).iter().zip(&shifted) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_input_is_an_error() {
        let mut q = Array2::zeros((2, 2));
        q[[0, 1]] = f64::NAN;
        let k = Array2::zeros((2, 2));
        assert!(scaled_dot_attention(q.view(), k.view(), k.view()).is_err());
    }

    #[test]
    fn value_width_must_match_time() {
        let mut rng = CounterRng::new(7, &[]);
        let p = AttentionParams::new(random(4, 2, &mut rng), random(4, 2, &mut rng), random(4, 3, &mut rng)).unwrap();
        assert!(channel_attention(random(3, 4, &mut rng).view(), &p).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = CounterRng::new(8, &[]);
        let (c, t, d) = (4, 8, 3);
        let x = random(c, t, &mut rng);
        let p = random_params(t, d, &mut rng);
        let up = random(c, t, &mut rng);
        let loss = |x: &Array2<f64>, p: &AttentionParams| (channel_attention(x.view(), p).unwrap() * &up).sum();
        let (_, cache) = channel_attention_cached(x.view(), &p).unwrap();
        let g = channel_attention_backward(&cache, &p, up.view()).unwrap();

        let flat = |a: &Array2<f64>| a.iter().copied().collect::<Vec<_>>();
        let rebuild = |v: &[f64], shape: (usize, usize)| Array2::from_shape_vec(shape, v.to_vec()).unwrap();
        let rx = grad_check(&flat(&x), &flat(&g.input), 1e-5, |v| loss(&rebuild(v, (c, t)), &p));
        let rq = grad_check(&flat(&p.wq), &flat(&g.wq), 1e-5, |v| {
            loss(&x, &AttentionParams { wq: rebuild(v, (t, d)), ..p.clone() })
        });
        let rk = grad_check(&flat(&p.wk), &flat(&g.wk), 1e-5, |v| {
            loss(&x, &AttentionParams { wk: rebuild(v, (t, d)), ..p.clone() })
        });
        let rv = grad_check(&flat(&p.wv), &flat(&g.wv), 1e-5, |v| {
            loss(&x, &AttentionParams { wv: rebuild(v, (t, t)), ..p.clone() })
        });
        for r in [rx, rq, rk, rv] {
            assert!(r.max_rel_error < 1e-6, "{r:?}");
        }
    }
}
