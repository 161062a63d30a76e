use super::Tensor;
use crate::error::{Error, Result};

/// Valid-padding output extents: `⌊(in − k)/s⌋ + 1` per spatial axis.
pub fn conv3d_output_dims(input: [usize; 3], kernel: [usize; 3], stride: [usize; 3]) -> Option<[usize; 3]> {
    let mut out = [0; 3];
    for a in 0..3 {
        if kernel[a] == 0 || stride[a] == 0 || kernel[a] > input[a] {
            return None;
        }
        out[a] = (input[a] - kernel[a]) / stride[a] + 1;
    }
    Some(out)
}

struct Geometry {
    batch: usize,
    f_in: usize,
    f_out: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    out: [usize; 3],
    stride: [usize; 3],
}

fn geometry(x: &Tensor, weight: &Tensor, stride: [usize; 3]) -> Result<Geometry> {
    let [batch, f_in, d, h, w] = x.dim5("conv3d input")?;
    let [f_out, wf_in, kd, kh, kw] = weight.dim5("conv3d weight")?;
    if wf_in != f_in {
        return Err(Error::shape(
            "conv3d",
            format!("weight expects {wf_in} input features, input has {f_in}"),
        ));
    }
    let out = conv3d_output_dims([d, h, w], [kd, kh, kw], stride).ok_or_else(|| {
        Error::shape(
            "conv3d",
            format!("kernel {:?} stride {stride:?} does not fit input {:?}", [kd, kh, kw], [d, h, w]),
        )
    })?;
    Ok(Geometry {
        batch,
        f_in,
        f_out,
        input: [d, h, w],
        kernel: [kd, kh, kw],
        out,
        stride,
    })
}

/// Valid 3D cross-correlation plus bias.
pub fn conv3d_valid(x: &Tensor, weight: &Tensor, bias: &[f64], stride: [usize; 3]) -> Result<Tensor> {
    let g = geometry(x, weight, stride)?;
    if bias.len() != g.f_out {
        return Err(Error::shape("conv3d", format!("bias has {} values for {} outputs", bias.len(), g.f_out)));
    }
    let [d, h, w] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [od_n, oh_n, ow_n] = g.out;
    let [sd, sh, sw] = g.stride;
    let plane = od_n * oh_n * ow_n;
    let mut y = vec![0.0; g.batch * g.f_out * plane];
    let xd = x.data();
    let wd = weight.data();

    for b in 0..g.batch {
        for fo in 0..g.f_out {
            let out = &mut y[(b * g.f_out + fo) * plane..][..plane];
            out.fill(bias[fo]);
            for fi in 0..g.f_in {
                let x_vol = &xd[(b * g.f_in + fi) * d * h * w..][..d * h * w];
                for a in 0..kd {
                    for c in 0..kh {
                        let w_row = &wd[(((fo * g.f_in + fi) * kd + a) * kh + c) * kw..][..kw];
                        for od in 0..od_n {
                            for oh in 0..oh_n {
                                let in_row = &x_vol[((od * sd + a) * h + oh * sh + c) * w..][..w];
                                let out_row = &mut out[(od * oh_n + oh) * ow_n..][..ow_n];
                                for (k, &wv) in w_row.iter().enumerate() {
                                    if sw == 1 {
                                        for (o, &s) in out_row.iter_mut().zip(&in_row[k..k + ow_n]) {
                                            *o += wv * s;
                                        }
                                    } else {
                                        for (ow, o) in out_row.iter_mut().enumerate() {
                                            *o += wv * in_row[ow * sw + k];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[g.batch, g.f_out, od_n, oh_n, ow_n], y)
}

#[derive(Debug, Clone)]
pub struct Conv3dGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

pub fn conv3d_backward(x: &Tensor, weight: &Tensor, dy: &Tensor, stride: [usize; 3]) -> Result<Conv3dGrads> {
    let g = geometry(x, weight, stride)?;
    let [d, h, w] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [od_n, oh_n, ow_n] = g.out;
    let [sd, sh, sw] = g.stride;
    if dy.dims() != [g.batch, g.f_out, od_n, oh_n, ow_n] {
        return Err(Error::shape("conv3d backward", format!("gradient dims {:?}", dy.dims())));
    }
    let plane = od_n * oh_n * ow_n;
    let xd = x.data();
    let wd = weight.data();
    let dyd = dy.data();
    let mut dx = vec![0.0; xd.len()];
    let mut dw = vec![0.0; wd.len()];
    let mut db = vec![0.0; g.f_out];

    for b in 0..g.batch {
        for fo in 0..g.f_out {
            let grad = &dyd[(b * g.f_out + fo) * plane..][..plane];
            db[fo] += grad.iter().sum::<f64>();
            for fi in 0..g.f_in {
                let vol = (b * g.f_in + fi) * d * h * w;
                for a in 0..kd {
                    for c in 0..kh {
                        let w_off = (((fo * g.f_in + fi) * kd + a) * kh + c) * kw;
                        for od in 0..od_n {
                            for oh in 0..oh_n {
                                let row = vol + ((od * sd + a) * h + oh * sh + c) * w;
                                let g_row = &grad[(od * oh_n + oh) * ow_n..][..ow_n];
                                for k in 0..kw {
                                    let wv = wd[w_off + k];
                                    let mut acc = 0.0;
                                    if sw == 1 {
                                        let in_row = &xd[row + k..][..ow_n];
                                        let dx_row = &mut dx[row + k..][..ow_n];
                                        for ((dxv, &gv), &xv) in dx_row.iter_mut().zip(g_row).zip(in_row) {
                                            *dxv += wv * gv;
                                            acc += gv * xv;
                                        }
                                    } else {
                                        for (ow, &gv) in g_row.iter().enumerate() {
                                            let i = row + ow * sw + k;
                                            dx[i] += wv * gv;
                                            acc += gv * xd[i];
                                        }
                                    }
                                    dw[w_off + k] += acc;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Conv3dGrads {
        input: Tensor::from_vec(x.dims(), dx)?,
        weight: Tensor::from_vec(weight.dims(), dw)?,
        bias: db,
    })
}
