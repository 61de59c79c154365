//! Forward kernels and their vector-Jacobian products.
//!
//! Layouts: images are `NCHW`, convolution kernels `OIHW`, dense weights
//! `C x K`. Dense inputs may be a single vector `[K]` or a batch `[N, K]`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn dims4(op: &'static str, what: &str, t: &Tensor) -> Result<[usize; 4]> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::shape(
            op,
            format!("{what} rank"),
            format!("expected 4 axes, got shape {:?}", t.shape()),
        )),
    }
}

fn conv_out_extent(extent: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = extent + 2 * pad;
    (padded >= k).then(|| (padded - k) / stride + 1)
}

/// Shape bookkeeping shared by the convolution forward and backward passes.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        const OP: &str = "conv2d";
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        let [n, cin, h, w] = dims4(OP, "input", input)?;
        let [cout, kcin, kh, kw] = dims4(OP, "kernel", kernel)?;
        if kcin != cin {
            return Err(Error::shape(
                OP,
                "input channels",
                format!("input has {cin}, kernel expects {kcin}"),
            ));
        }
        let oh = conv_out_extent(h, kh, stride, pad).ok_or_else(|| {
            Error::shape(OP, "height", format!("kernel {kh} exceeds padded input {}", h + 2 * pad))
        })?;
        let ow = conv_out_extent(w, kw, stride, pad).ok_or_else(|| {
            Error::shape(OP, "width", format!("kernel {kw} exceeds padded input {}", w + 2 * pad))
        })?;
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            oh,
            ow,
            stride,
            pad,
        })
    }

    /// Output positions `o` (out of `out`) whose input position
    /// `o * stride + k - pad` lies inside `0..extent`.
    #[inline]
    fn valid(&self, k: usize, extent: usize, out: usize) -> std::ops::Range<usize> {
        let lo = if self.pad > k {
            (self.pad - k).div_ceil(self.stride)
        } else {
            0
        };
        let hi = if extent + self.pad > k {
            ((extent - 1 + self.pad - k) / self.stride + 1).min(out)
        } else {
            0
        };
        lo..hi.max(lo)
    }
}

fn check_bias(op: &'static str, bias: Option<&Tensor>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [channels] {
            return Err(Error::shape(
                op,
                "bias",
                format!("expected [{channels}], got {:?}", b.shape()),
            ));
        }
    }
    Ok(())
}

/// 2-D cross-correlation with zero padding.
pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = ConvGeom::new(input, kernel, stride, padding)?;
    check_bias("conv2d", bias, g.cout)?;
    let x = input.data();
    let k = kernel.data();
    // im2col over the whole batch, then one kernel-by-columns product
    let p = g.oh * g.ow;
    let np = g.n * p;
    let q = g.cin * g.kh * g.kw;
    let mut cols = vec![0.0; q * np];
    for ci in 0..g.cin {
        for ky in 0..g.kh {
            let rows = g.valid(ky, g.h, g.oh);
            for kx in 0..g.kw {
                let span = g.valid(kx, g.w, g.ow);
                if span.is_empty() {
                    continue;
                }
                let row = &mut cols[((ci * g.kh + ky) * g.kw + kx) * np..][..np];
                let ix0 = span.start * g.stride + kx - g.pad;
                for n in 0..g.n {
                    let xbase = (n * g.cin + ci) * g.h * g.w;
                    for oy in rows.clone() {
                        let iy = oy * g.stride + ky - g.pad;
                        let dst = &mut row[n * p + oy * g.ow + span.start..n * p + oy * g.ow + span.end];
                        let src = x[xbase + iy * g.w + ix0..].iter().step_by(g.stride);
                        for (d, v) in dst.iter_mut().zip(src) {
                            *d = *v;
                        }
                    }
                }
            }
        }
    }
    let mut prod = vec![0.0; g.cout * np];
    for co in 0..g.cout {
        let acc = &mut prod[co * np..(co + 1) * np];
        for (qi, &kv) in k[co * q..(co + 1) * q].iter().enumerate() {
            if kv == 0.0 {
                continue;
            }
            for (a, c) in acc.iter_mut().zip(&cols[qi * np..(qi + 1) * np]) {
                *a += kv * c;
            }
        }
    }
    let mut out = vec![0.0; g.n * g.cout * p];
    for n in 0..g.n {
        for co in 0..g.cout {
            let b = bias.map_or(0.0, |b| b.data()[co]);
            let src = &prod[co * np + n * p..co * np + (n + 1) * p];
            for (o, v) in out[(n * g.cout + co) * p..][..p].iter_mut().zip(src) {
                *o = v + b;
            }
        }
    }
    Tensor::new(vec![g.n, g.cout, g.oh, g.ow], out)
}

/// Gradients of [`conv2d`] with respect to input, kernel and bias.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let g = ConvGeom::new(input, kernel, stride, padding)?;
    if grad_out.shape() != [g.n, g.cout, g.oh, g.ow] {
        return Err(Error::shape(
            "conv2d_backward",
            "grad_out",
            format!("expected {:?}, got {:?}", [g.n, g.cout, g.oh, g.ow], grad_out.shape()),
        ));
    }
    let x = input.data();
    let k = kernel.data();
    let go = grad_out.data();
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; k.len()];
    let mut gb = vec![0.0; g.cout];
    for n in 0..g.n {
        for co in 0..g.cout {
            let obase = (n * g.cout + co) * g.oh * g.ow;
            gb[co] += go[obase..obase + g.oh * g.ow].iter().sum::<f64>();
            for ci in 0..g.cin {
                let xbase = (n * g.cin + ci) * g.h * g.w;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let kidx = ((co * g.cin + ci) * g.kh + ky) * g.kw + kx;
                        let kv = k[kidx];
                        let mut acc = 0.0;
                        let cols = g.valid(kx, g.w, g.ow);
                        if !cols.is_empty() {
                            let ix0 = cols.start * g.stride + kx - g.pad;
                            for oy in g.valid(ky, g.h, g.oh) {
                                let iy = oy * g.stride + ky - g.pad;
                                let orow = &go[obase + oy * g.ow + cols.start..obase + oy * g.ow + cols.end];
                                let xstart = xbase + iy * g.w + ix0;
                                for (j, &gv) in orow.iter().enumerate() {
                                    let ix = xstart + j * g.stride;
                                    acc += gv * x[ix];
                                    gx[ix] += gv * kv;
                                }
                            }
                        }
                        gk[kidx] += acc;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), gx)?,
        Tensor::new(kernel.shape().to_vec(), gk)?,
        Tensor::new(vec![g.cout], gb)?,
    ))
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Passes the upstream gradient only where the forward input was positive.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    input.zip_with(grad_out, |x, g| if x > 0.0 { g } else { 0.0 })
}

/// Max pooling over square windows. Also returns, for every output element,
/// the flat input index it was taken from (first maximum in row-major scan).
pub fn maxpool2d(input: &Tensor, window: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    const OP: &str = "maxpool2d";
    if window == 0 || stride == 0 {
        return Err(Error::invalid("maxpool2d window and stride must be positive"));
    }
    let [n, c, h, w] = dims4(OP, "input", input)?;
    if window > h || window > w {
        return Err(Error::shape(
            OP,
            if window > h { "height" } else { "width" },
            format!("window {window} larger than input {h}x{w}"),
        ));
    }
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for dy in 0..window {
                    for dx in 0..window {
                        let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, arg))
}

pub fn maxpool2d_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    if argmax.len() != grad_out.len() {
        return Err(Error::shape(
            "maxpool2d_backward",
            "grad_out",
            format!("{} routes for {} gradients", argmax.len(), grad_out.len()),
        ));
    }
    let mut gx = Tensor::zeros(input_shape);
    let d = gx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        d[i] += g;
    }
    Ok(gx)
}

fn dense_dims(input: &Tensor, weights: &Tensor) -> Result<(usize, usize, usize)> {
    const OP: &str = "dense";
    let (c, k) = match *weights.shape() {
        [c, k] => (c, k),
        _ => {
            return Err(Error::shape(
                OP,
                "weights rank",
                format!("expected C x K, got {:?}", weights.shape()),
            ))
        }
    };
    let (n, ik) = match *input.shape() {
        [ik] => (1, ik),
        [n, ik] => (n, ik),
        _ => {
            return Err(Error::shape(
                OP,
                "input rank",
                format!("expected [K] or [N, K], got {:?}", input.shape()),
            ))
        }
    };
    if ik != k {
        return Err(Error::shape(
            OP,
            "inner dimension",
            format!("input has {ik} features, weights expect {k}"),
        ));
    }
    Ok((n, c, k))
}

/// Affine map `W x + b`, applied row-wise for batched input.
pub fn dense(input: &Tensor, weights: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (n, c, k) = dense_dims(input, weights)?;
    check_bias("dense", bias, c)?;
    let x = input.data();
    let w = weights.data();
    let mut out = Vec::with_capacity(n * c);
    for row in 0..n {
        let xr = &x[row * k..(row + 1) * k];
        for ci in 0..c {
            let wr = &w[ci * k..(ci + 1) * k];
            let dot: f64 = wr.iter().zip(xr).map(|(a, b)| a * b).sum();
            out.push(dot + bias.map_or(0.0, |b| b.data()[ci]));
        }
    }
    let shape = if input.rank() == 1 { vec![c] } else { vec![n, c] };
    Tensor::new(shape, out)
}

pub fn dense_backward(input: &Tensor, weights: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c, k) = dense_dims(input, weights)?;
    if grad_out.len() != n * c {
        return Err(Error::shape(
            "dense_backward",
            "grad_out",
            format!("expected {} values, got {}", n * c, grad_out.len()),
        ));
    }
    let x = input.data();
    let w = weights.data();
    let go = grad_out.data();
    let mut gx = vec![0.0; n * k];
    let mut gw = vec![0.0; c * k];
    let mut gb = vec![0.0; c];
    for row in 0..n {
        for ci in 0..c {
            let g = go[row * c + ci];
            if g == 0.0 {
                continue;
            }
            gb[ci] += g;
            for j in 0..k {
                gx[row * k + j] += g * w[ci * k + j];
                gw[ci * k + j] += g * x[row * k + j];
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), gx)?,
        Tensor::new(weights.shape().to_vec(), gw)?,
        Tensor::new(vec![c], gb)?,
    ))
}

/// Frozen batch-normalization statistics for one layer.
#[derive(Clone, Copy, Debug)]
pub struct BatchNormParams<'a> {
    pub gamma: &'a Tensor,
    pub beta: &'a Tensor,
    pub mean: &'a Tensor,
    pub var: &'a Tensor,
    pub epsilon: f64,
}

/// (outer, channels, inner) decomposition around the channel axis
/// (axis 1, or axis 0 for rank-1 input).
fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    match shape {
        [c] => (1, *c, 1),
        [n, c, rest @ ..] => (*n, *c, rest.iter().product()),
        [] => unreachable!("tensors have rank >= 1"),
    }
}

impl BatchNormParams<'_> {
    fn check(&self, channels: usize) -> Result<Vec<f64>> {
        for (name, t) in [
            ("gamma", self.gamma),
            ("beta", self.beta),
            ("mean", self.mean),
            ("var", self.var),
        ] {
            if t.shape() != [channels] {
                return Err(Error::shape(
                    "batchnorm_frozen",
                    name,
                    format!("expected [{channels}], got {:?}", t.shape()),
                ));
            }
        }
        self.var
            .data()
            .iter()
            .enumerate()
            .map(|(c, &v)| {
                let d = v + self.epsilon;
                if d > 0.0 {
                    Ok(d.sqrt())
                } else {
                    Err(Error::invalid(format!(
                        "batchnorm channel {c}: var + epsilon = {d} is not positive"
                    )))
                }
            })
            .collect()
    }

    /// Per-channel bias the layer adds after scaling: `beta - gamma * mean / sqrt(var + eps)`.
    pub fn effective_bias(&self) -> Result<Tensor> {
        let c = self.gamma.len();
        let sd = self.check(c)?;
        let data = (0..c)
            .map(|i| self.beta.data()[i] - self.gamma.data()[i] * self.mean.data()[i] / sd[i])
            .collect();
        Tensor::new(vec![c], data)
    }

    /// Per-channel multiplicative factor `gamma / sqrt(var + eps)`.
    pub fn effective_scale(&self) -> Result<Tensor> {
        let c = self.gamma.len();
        let sd = self.check(c)?;
        Tensor::new(vec![c], (0..c).map(|i| self.gamma.data()[i] / sd[i]).collect())
    }
}

pub fn batchnorm_frozen(input: &Tensor, p: BatchNormParams<'_>) -> Result<Tensor> {
    let (outer, c, inner) = channel_layout(input.shape());
    let sd = p.check(c)?;
    let x = input.data();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for ch in 0..c {
            let (g, b, m) = (p.gamma.data()[ch], p.beta.data()[ch], p.mean.data()[ch]);
            let base = (o * c + ch) * inner;
            for i in base..base + inner {
                out[i] = g * (x[i] - m) / sd[ch] + b;
            }
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

/// Gradients of [`batchnorm_frozen`] with respect to input, gamma, beta, mean and var.
pub struct BatchNormGrads {
    pub input: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub mean: Tensor,
    pub var: Tensor,
}

pub fn batchnorm_frozen_backward(input: &Tensor, p: BatchNormParams<'_>, grad_out: &Tensor) -> Result<BatchNormGrads> {
    let (outer, c, inner) = channel_layout(input.shape());
    let sd = p.check(c)?;
    if grad_out.shape() != input.shape() {
        return Err(Error::shape(
            "batchnorm_frozen_backward",
            "grad_out",
            format!("expected {:?}, got {:?}", input.shape(), grad_out.shape()),
        ));
    }
    let x = input.data();
    let go = grad_out.data();
    let mut gx = vec![0.0; x.len()];
    let (mut gg, mut gb, mut gm, mut gv) = (vec![0.0; c], vec![0.0; c], vec![0.0; c], vec![0.0; c]);
    for o in 0..outer {
        for ch in 0..c {
            let (g, m, s) = (p.gamma.data()[ch], p.mean.data()[ch], sd[ch]);
            let base = (o * c + ch) * inner;
            for i in base..base + inner {
                let up = go[i];
                let centered = x[i] - m;
                gx[i] = up * g / s;
                gg[ch] += up * centered / s;
                gb[ch] += up;
                gm[ch] -= up * g / s;
                gv[ch] -= 0.5 * up * g * centered / (s * s * s);
            }
        }
    }
    let ch = |v| Tensor::new(vec![c], v);
    Ok(BatchNormGrads {
        input: Tensor::new(input.shape().to_vec(), gx)?,
        gamma: ch(gg)?,
        beta: ch(gb)?,
        mean: ch(gm)?,
        var: ch(gv)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_scalar_kernel_scales_input() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let k = t(&[1, 1, 1, 1], &[2.0]);
        let y = conv2d(&x, &k, None, 1, 0).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn conv_full_window_sum() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let k = Tensor::full(&[1, 1, 2, 2], 1.0);
        let y = conv2d(&x, &k, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[10.0]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::zeros(&[1, 2, 3, 3]);
        let k = Tensor::zeros(&[1, 3, 1, 1]);
        let err = conv2d(&x, &k, None, 1, 0).unwrap_err().to_string();
        assert!(err.contains("input channels"), "{err}");
        let k = Tensor::zeros(&[1, 2, 5, 5]);
        let err = conv2d(&x, &k, None, 1, 0).unwrap_err().to_string();
        assert!(err.contains("height"), "{err}");
    }

    #[test]
    fn relu_examples() {
        assert_eq!(relu(&Tensor::from_vec(vec![-1.0, 0.0, 2.0])).data(), &[0.0, 0.0, 2.0]);
        let neg = Tensor::from_vec(vec![-1.0, -2.0]);
        assert_eq!(relu(&neg).data(), &[0.0, 0.0]);
        let g = relu_backward(&neg, &Tensor::from_vec(vec![1.0, 1.0])).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0]);
    }

    #[test]
    fn maxpool_examples() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let (y, _) = maxpool2d(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[4.0]);

        let c = Tensor::full(&[1, 1, 4, 4], 7.0);
        let (y, arg) = maxpool2d(&c, 2, 2).unwrap();
        assert!(y.data().iter().all(|&v| v == 7.0));
        let g = maxpool2d_backward(c.shape(), &arg, &Tensor::full(y.shape(), 1.0)).unwrap();
        let hot: Vec<usize> = g.data().iter().enumerate().filter(|(_, &v)| v != 0.0).map(|(i, _)| i).collect();
        assert_eq!(hot, vec![0, 2, 8, 10]);

        assert!(maxpool2d(&x, 3, 1).is_err());
    }

    #[test]
    fn dense_examples() {
        let w = t(&[1, 2], &[1.0, 2.0]);
        let x = Tensor::from_vec(vec![3.0, 4.0]);
        assert_eq!(dense(&x, &w, None).unwrap().data(), &[11.0]);

        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let zero = Tensor::zeros(&[2]);
        assert_eq!(dense(&x, &eye, Some(&zero)).unwrap(), x);

        let w = t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, -1.0]);
        let x = Tensor::from_vec(vec![0.1, 0.2, 0.3]);
        for c in 0..2 {
            let mut seed = Tensor::zeros(&[2]);
            seed.data_mut()[c] = 1.0;
            let (gx, _, _) = dense_backward(&x, &w, &seed).unwrap();
            assert_eq!(gx.data(), &w.data()[c * 3..c * 3 + 3]);
        }
        assert!(dense(&Tensor::zeros(&[4]), &w, None).is_err());
    }

    #[test]
    fn batchnorm_examples() {
        let one = Tensor::scalar(1.0);
        let zero = Tensor::scalar(0.0);
        let p = BatchNormParams {
            gamma: &one,
            beta: &zero,
            mean: &zero,
            var: &one,
            epsilon: 0.0,
        };
        let x = t(&[2, 1], &[-3.0, 5.0]);
        assert_eq!(batchnorm_frozen(&x, p).unwrap(), x);

        let (g, b, m, v) = (Tensor::scalar(2.0), Tensor::scalar(3.0), Tensor::scalar(1.0), Tensor::scalar(4.0));
        let p = BatchNormParams {
            gamma: &g,
            beta: &b,
            mean: &m,
            var: &v,
            epsilon: 0.0,
        };
        let y = batchnorm_frozen(&t(&[1, 1], &[5.0]), p).unwrap();
        assert_eq!(y.data(), &[7.0]);
        assert_eq!(p.effective_bias().unwrap().data(), &[2.0]);

        let bad = Tensor::scalar(-1.0);
        let p = BatchNormParams { var: &bad, ..p };
        assert!(batchnorm_frozen(&t(&[1, 1], &[5.0]), p).is_err());
    }
}
