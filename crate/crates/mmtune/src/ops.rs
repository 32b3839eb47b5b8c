//! Pure forward/backward kernels for the layers used by small Conv-BN-ReLU
//! classifiers. The autodiff tape (`tape`) records these; nothing here
//! mutates state, so the kernels are safe to evaluate batch-parallel.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Output spatial extent of a conv/cross-correlation along one axis.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// 2D cross-correlation, NCHW input against OIKK weights.
pub fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    if input.shape().len() != 4 || weight.shape().len() != 4 {
        return Err(Error::Shape {
            context: "conv2d_forward",
            expected: "rank-4 input and weight".into(),
            found: format!("input {:?}, weight {:?}", input.shape(), weight.shape()),
        });
    }
    if stride == 0 {
        return Err(Error::contract("conv2d_forward: stride must be positive"));
    }
    let (n, c_in, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let (c_out, wc_in, kh, kw) = (weight.dim(0), weight.dim(1), weight.dim(2), weight.dim(3));
    if c_in != wc_in {
        return Err(Error::Shape {
            context: "conv2d_forward",
            expected: format!("weight input channels = {c_in} (input axis 1)"),
            found: format!("{wc_in} (weight axis 1)"),
        });
    }
    if bias.shape() != [c_out] {
        return Err(Error::Shape {
            context: "conv2d_forward",
            expected: format!("bias of shape [{c_out}]"),
            found: format!("{:?}", bias.shape()),
        });
    }
    let (out_h, out_w) = match (
        conv_out_dim(h, kh, stride, padding),
        conv_out_dim(w, kw, stride, padding),
    ) {
        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => (oh, ow),
        _ => {
            return Err(Error::Shape {
                context: "conv2d_forward",
                expected: "positive output spatial dims".into(),
                found: format!("input {h}x{w}, kernel {kh}x{kw}, stride {stride}, padding {padding}"),
            })
        }
    };

    let mut out = Tensor::zeros(&[n, c_out, out_h, out_w]);
    let x = input.data();
    let wt = weight.data();
    let b = bias.data();
    let o = out.data_mut();
    for ni in 0..n {
        for co in 0..c_out {
            for oh in 0..out_h {
                for ow in 0..out_w {
                    let mut acc = b[co];
                    for ci in 0..c_in {
                        let x_base = ((ni * c_in + ci) * h) * w;
                        let w_base = ((co * c_in + ci) * kh) * kw;
                        for ky in 0..kh {
                            let iy = (oh * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ow * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += x[x_base + iy as usize * w + ix as usize]
                                    * wt[w_base + ky * kw + kx];
                            }
                        }
                    }
                    o[((ni * c_out + co) * out_h + oh) * out_w + ow] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Backward pass of [`conv2d_forward`]. Returns `(dx, dweight, dbias)`.
pub fn conv2d_backward(
    dy: &Tensor,
    input: &Tensor,
    weight: &Tensor,
    stride: usize,
    padding: usize,
) -> (Tensor, Tensor, Tensor) {
    let (n, c_in, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let (c_out, _, kh, kw) = (weight.dim(0), weight.dim(1), weight.dim(2), weight.dim(3));
    let (out_h, out_w) = (dy.dim(2), dy.dim(3));

    let mut dx = Tensor::zeros(input.shape());
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = Tensor::zeros(&[c_out]);
    let x = input.data();
    let wt = weight.data();
    let g = dy.data();
    let dxd = dx.data_mut();
    let dwd = dw.data_mut();
    let dbd = db.data_mut();
    for ni in 0..n {
        for co in 0..c_out {
            for oh in 0..out_h {
                for ow in 0..out_w {
                    let gv = g[((ni * c_out + co) * out_h + oh) * out_w + ow];
                    if gv == 0.0 {
                        continue;
                    }
                    dbd[co] += gv;
                    for ci in 0..c_in {
                        let x_base = ((ni * c_in + ci) * h) * w;
                        let w_base = ((co * c_in + ci) * kh) * kw;
                        for ky in 0..kh {
                            let iy = (oh * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ow * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xi = x_base + iy as usize * w + ix as usize;
                                let wi = w_base + ky * kw + kx;
                                dwd[wi] += gv * x[xi];
                                dxd[xi] += gv * wt[wi];
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    input.map(|x| if x > 0.0 { x } else { 0.0 })
}

/// d/dx relu: passes gradient where the input was strictly positive.
pub fn relu_backward(dy: &Tensor, input: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(input.shape());
    let xd = input.data();
    let gd = dy.data();
    let dd = dx.data_mut();
    for i in 0..xd.len() {
        if xd[i] > 0.0 {
            dd[i] = gd[i];
        }
    }
    dx
}

/// Fully connected layer: `y[n,k] = sum_d x[n,d] * w[k,d] + b[k]`.
pub fn linear_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, d) = (input.dim(0), input.dim(1));
    let (k, wd) = (weight.dim(0), weight.dim(1));
    if d != wd || bias.shape() != [k] {
        return Err(Error::Shape {
            context: "linear_forward",
            expected: format!("weight [K,{d}] and bias [K]"),
            found: format!("weight {:?}, bias {:?}", weight.shape(), bias.shape()),
        });
    }
    let mut out = Tensor::zeros(&[n, k]);
    let x = input.data();
    let wt = weight.data();
    let b = bias.data();
    let o = out.data_mut();
    for ni in 0..n {
        for ki in 0..k {
            let mut acc = b[ki];
            for di in 0..d {
                acc += x[ni * d + di] * wt[ki * d + di];
            }
            o[ni * k + ki] = acc;
        }
    }
    Ok(out)
}

pub fn linear_backward(dy: &Tensor, input: &Tensor, weight: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (n, d) = (input.dim(0), input.dim(1));
    let k = weight.dim(0);
    let mut dx = Tensor::zeros(input.shape());
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = Tensor::zeros(&[k]);
    let x = input.data();
    let wt = weight.data();
    let g = dy.data();
    let dxd = dx.data_mut();
    let dwd = dw.data_mut();
    let dbd = db.data_mut();
    for ni in 0..n {
        for ki in 0..k {
            let gv = g[ni * k + ki];
            dbd[ki] += gv;
            for di in 0..d {
                dwd[ki * d + di] += gv * x[ni * d + di];
                dxd[ni * d + di] += gv * wt[ki * d + di];
            }
        }
    }
    (dx, dw, db)
}

/// NCHW -> NC mean over the spatial dims.
pub fn global_avg_pool_forward(input: &Tensor) -> Result<Tensor> {
    if input.shape().len() != 4 {
        return Err(Error::Shape {
            context: "global_avg_pool_forward",
            expected: "rank-4 NCHW input".into(),
            found: format!("{:?}", input.shape()),
        });
    }
    let (n, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let area = (h * w) as f64;
    let mut out = Tensor::zeros(&[n, c]);
    let x = input.data();
    let o = out.data_mut();
    for ni in 0..n {
        for ci in 0..c {
            let base = ((ni * c + ci) * h) * w;
            let mut acc = 0.0;
            for i in 0..h * w {
                acc += x[base + i];
            }
            o[ni * c + ci] = acc / area;
        }
    }
    Ok(out)
}

pub fn global_avg_pool_backward(dy: &Tensor, input_shape: &[usize]) -> Tensor {
    let (n, c, h, w) = (
        input_shape[0],
        input_shape[1],
        input_shape[2],
        input_shape[3],
    );
    let area = (h * w) as f64;
    let mut dx = Tensor::zeros(input_shape);
    let g = dy.data();
    let dd = dx.data_mut();
    for ni in 0..n {
        for ci in 0..c {
            let gv = g[ni * c + ci] / area;
            let base = ((ni * c + ci) * h) * w;
            for i in 0..h * w {
                dd[base + i] = gv;
            }
        }
    }
    dx
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let (n, k) = (logits.dim(0), logits.dim(1));
    let mut out = Tensor::zeros(&[n, k]);
    let z = logits.data();
    let p = out.data_mut();
    for ni in 0..n {
        let row = &z[ni * k..(ni + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for ki in 0..k {
            let e = (row[ki] - m).exp();
            p[ni * k + ki] = e;
            denom += e;
        }
        for ki in 0..k {
            p[ni * k + ki] /= denom;
        }
    }
    out
}

/// Mean cross-entropy over the batch plus the per-sample true-class softmax
/// probability ("confidence").
pub fn softmax_cross_entropy_forward(
    logits: &Tensor,
    labels: &[usize],
) -> Result<(f64, Vec<f64>, Tensor)> {
    let (n, k) = (logits.dim(0), logits.dim(1));
    if labels.len() != n {
        return Err(Error::Shape {
            context: "softmax_cross_entropy",
            expected: format!("{n} labels"),
            found: format!("{}", labels.len()),
        });
    }
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Index {
                context: "softmax_cross_entropy label",
                index: y,
                bound: k,
            });
        }
        let _ = i;
    }
    let probs = softmax_rows(logits);
    let p = probs.data();
    let mut loss = 0.0;
    let mut confidence = Vec::with_capacity(n);
    for (ni, &y) in labels.iter().enumerate() {
        let py = p[ni * k + y];
        confidence.push(py);
        loss -= py.ln();
    }
    loss /= n as f64;
    Ok((loss, confidence, probs))
}

/// Gradient of the mean cross-entropy w.r.t. the logits: `(softmax - onehot)/N`.
pub fn softmax_cross_entropy_backward(probs: &Tensor, labels: &[usize], upstream: f64) -> Tensor {
    let (n, k) = (probs.dim(0), probs.dim(1));
    let mut dz = probs.clone();
    let d = dz.data_mut();
    let scale = upstream / n as f64;
    for (ni, &y) in labels.iter().enumerate() {
        d[ni * k + y] -= 1.0;
    }
    for v in d.iter_mut() {
        *v *= scale;
    }
    dz
}

/// Concatenate two N x D tensors along the feature axis.
pub fn concat_cols(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, da) = (a.dim(0), a.dim(1));
    let (nb, db) = (b.dim(0), b.dim(1));
    if n != nb {
        return Err(Error::Shape {
            context: "concat_cols",
            expected: format!("matching batch dim {n}"),
            found: format!("{nb}"),
        });
    }
    let mut out = Tensor::zeros(&[n, da + db]);
    let o = out.data_mut();
    for ni in 0..n {
        o[ni * (da + db)..ni * (da + db) + da].copy_from_slice(&a.data()[ni * da..(ni + 1) * da]);
        o[ni * (da + db) + da..(ni + 1) * (da + db)]
            .copy_from_slice(&b.data()[ni * db..(ni + 1) * db]);
    }
    Ok(out)
}

pub fn concat_cols_backward(dy: &Tensor, da: usize, db: usize) -> (Tensor, Tensor) {
    let n = dy.dim(0);
    let mut ga = Tensor::zeros(&[n, da]);
    let mut gb = Tensor::zeros(&[n, db]);
    let g = dy.data();
    for ni in 0..n {
        ga.data_mut()[ni * da..(ni + 1) * da]
            .copy_from_slice(&g[ni * (da + db)..ni * (da + db) + da]);
        gb.data_mut()[ni * db..(ni + 1) * db]
            .copy_from_slice(&g[ni * (da + db) + da..(ni + 1) * (da + db)]);
    }
    (ga, gb)
}
