//! Layer kernels: dense, 2-D convolution, 2-D transposed convolution and the
//! leaky rectifier, each with a forward pass and an explicit backward pass.
//!
//! Backward functions *accumulate* parameter gradients into a [`LayerGrads`]
//! and return the gradient with respect to the layer input.

use rand::Rng;

use super::Tensor;
use crate::error::{shape, Result};

/// Weights, bias and their gradient accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
    pub grad_weight: Tensor,
    pub grad_bias: Tensor,
}

/// Gradient buffers for one layer, detached from the parameters so that
/// independent samples can be differentiated concurrently.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LayerParams {
    pub fn new(weight: Tensor, bias: Tensor) -> Self {
        let grad_weight = Tensor::zeros(weight.shape());
        let grad_bias = Tensor::zeros(bias.shape());
        Self {
            weight,
            bias,
            grad_weight,
            grad_bias,
        }
    }

    /// Uniform ±sqrt(6 / (fan_in + fan_out)) weights, zero bias.
    pub fn glorot<R: Rng + ?Sized>(weight_shape: &[usize], fan_in: usize, fan_out: usize, bias_len: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = weight_shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
        let weight = Tensor::new(weight_shape.to_vec(), data).expect("glorot shape");
        Self::new(weight, Tensor::zeros(&[bias_len]))
    }

    pub fn zero_grad(&mut self) {
        self.grad_weight.fill(0.0);
        self.grad_bias.fill(0.0);
    }

    pub fn empty_grads(&self) -> LayerGrads {
        LayerGrads {
            weight: Tensor::zeros(self.weight.shape()),
            bias: Tensor::zeros(self.bias.shape()),
        }
    }

    pub fn accumulate(&mut self, grads: &LayerGrads) -> Result<()> {
        self.grad_weight.add_assign(&grads.weight)?;
        self.grad_bias.add_assign(&grads.bias)
    }
}

impl LayerGrads {
    pub fn add_assign(&mut self, other: &LayerGrads) -> Result<()> {
        self.weight.add_assign(&other.weight)?;
        self.bias.add_assign(&other.bias)
    }
}

/// Kernel, stride, padding and (for transposed convolutions) output padding,
/// each as `(rows, cols)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub output_padding: (usize, usize),
}

impl ConvGeometry {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel: (kernel, kernel),
            stride: (stride, stride),
            padding: (padding, padding),
            output_padding: (0, 0),
        }
    }

    pub fn with_output_padding(mut self, rows: usize, cols: usize) -> Self {
        self.output_padding = (rows, cols);
        self
    }

    /// `floor((H + 2p - k) / s) + 1` per axis.
    pub fn conv_output(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let axis = |n: usize, k: usize, s: usize, p: usize, what: &str| {
            if n + 2 * p < k || s == 0 {
                Err(shape(format!("conv2d: {what} {n} with padding {p} is smaller than kernel {k}")))
            } else {
                Ok((n + 2 * p - k) / s + 1)
            }
        };
        Ok((
            axis(h, self.kernel.0, self.stride.0, self.padding.0, "height")?,
            axis(w, self.kernel.1, self.stride.1, self.padding.1, "width")?,
        ))
    }

    /// `(in - 1) * s - 2p + k + output_padding` per axis.
    pub fn transpose_output(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let axis = |n: usize, k: usize, s: usize, p: usize, op: usize, what: &str| {
            if n == 0 || op >= s.max(1) {
                return Err(shape(format!("conv_transpose2d: {what} {n} with output padding {op} >= stride {s}")));
            }
            let full = (n - 1) * s + k + op;
            if full <= 2 * p {
                return Err(shape(format!("conv_transpose2d: {what} padding {p} removes the whole output")));
            }
            Ok(full - 2 * p)
        };
        Ok((
            axis(h, self.kernel.0, self.stride.0, self.padding.0, self.output_padding.0, "height")?,
            axis(w, self.kernel.1, self.stride.1, self.padding.1, self.output_padding.1, "width")?,
        ))
    }
}

/// Range of `o` in `0..n_out` with `o * stride + offset` inside `0..n_in`.
#[inline]
fn valid_range(n_out: usize, stride: usize, offset: isize, n_in: usize) -> std::ops::Range<usize> {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
    let room = n_in as isize - offset;
    let hi = if room <= 0 { 0 } else { (room + s - 1) / s };
    let hi = (hi as usize).min(n_out);
    let lo = (lo as usize).min(hi);
    lo..hi
}

fn dims3(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(shape(format!("{what}: expected [C, H, W] input, got {s:?}"))),
    }
}

fn dims4(t: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [a, b, c, d] => Ok((a, b, c, d)),
        ref s => Err(shape(format!("{what}: expected rank-4 weight, got {s:?}"))),
    }
}

fn check_geometry(geom: &ConvGeometry, kh: usize, kw: usize, what: &str) -> Result<()> {
    if geom.kernel != (kh, kw) {
        return Err(shape(format!("{what}: weight kernel {kh}x{kw} disagrees with geometry {:?}", geom.kernel)));
    }
    Ok(())
}

/// `out[co] = b[co] + Σ_ci w[co, ci] ⋆ in[ci]` with weight `[C_out, C_in, kh, kw]`.
pub fn conv2d_forward(input: &Tensor, params: &LayerParams, geom: &ConvGeometry) -> Result<Tensor> {
    let (cin, h, w) = dims3(input, "conv2d")?;
    let (cout, wcin, kh, kw) = dims4(&params.weight, "conv2d")?;
    if wcin != cin {
        return Err(shape(format!("conv2d: input has {cin} channels, weight expects {wcin}")));
    }
    if params.bias.len() != cout {
        return Err(shape(format!("conv2d: bias length {} != {cout} output channels", params.bias.len())));
    }
    check_geometry(geom, kh, kw, "conv2d")?;
    let (oh, ow) = geom.conv_output(h, w)?;
    let (sy, sx) = geom.stride;
    let (py, px) = (geom.padding.0 as isize, geom.padding.1 as isize);
    let x = input.data();
    let wt = params.weight.data();
    let mut out = vec![0.0; cout * oh * ow];
    for co in 0..cout {
        let plane = &mut out[co * oh * ow..(co + 1) * oh * ow];
        plane.fill(params.bias.data()[co]);
        for ci in 0..cin {
            let in_plane = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..kh {
                let oys = valid_range(oh, sy, ky as isize - py, h);
                for kx in 0..kw {
                    let wv = wt[((co * cin + ci) * kh + ky) * kw + kx];
                    let oxs = valid_range(ow, sx, kx as isize - px, w);
                    for oy in oys.clone() {
                        let iy = (oy * sy) as isize + ky as isize - py;
                        let row = &in_plane[iy as usize * w..(iy as usize + 1) * w];
                        let orow = &mut plane[oy * ow..(oy + 1) * ow];
                        for ox in oxs.clone() {
                            let ix = ((ox * sx) as isize + kx as isize - px) as usize;
                            orow[ox] += wv * row[ix];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![cout, oh, ow], out)
}

pub fn conv2d_backward(
    input: &Tensor,
    params: &LayerParams,
    geom: &ConvGeometry,
    grad_out: &Tensor,
    grads: &mut LayerGrads,
) -> Result<Tensor> {
    let (cin, h, w) = dims3(input, "conv2d backward")?;
    let (cout, _, kh, kw) = dims4(&params.weight, "conv2d backward")?;
    let (oh, ow) = geom.conv_output(h, w)?;
    if grad_out.shape() != [cout, oh, ow] {
        return Err(shape(format!("conv2d backward: grad shape {:?} != [{cout}, {oh}, {ow}]", grad_out.shape())));
    }
    let (sy, sx) = geom.stride;
    let (py, px) = (geom.padding.0 as isize, geom.padding.1 as isize);
    let x = input.data();
    let g = grad_out.data();
    let wt = params.weight.data();
    let gw = grads.weight.data_mut();
    let mut gin = vec![0.0; cin * h * w];
    for co in 0..cout {
        let gplane = &g[co * oh * ow..(co + 1) * oh * ow];
        grads.bias.data_mut()[co] += gplane.iter().sum::<f64>();
        for ci in 0..cin {
            let in_plane = &x[ci * h * w..(ci + 1) * h * w];
            let gin_plane = &mut gin[ci * h * w..(ci + 1) * h * w];
            for ky in 0..kh {
                let oys = valid_range(oh, sy, ky as isize - py, h);
                for kx in 0..kw {
                    let widx = ((co * cin + ci) * kh + ky) * kw + kx;
                    let wv = wt[widx];
                    let oxs = valid_range(ow, sx, kx as isize - px, w);
                    let mut acc = 0.0;
                    for oy in oys.clone() {
                        let iy = ((oy * sy) as isize + ky as isize - py) as usize;
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        for ox in oxs.clone() {
                            let ix = ((ox * sx) as isize + kx as isize - px) as usize;
                            acc += grow[ox] * in_plane[iy * w + ix];
                            gin_plane[iy * w + ix] += wv * grow[ox];
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    Tensor::new(vec![cin, h, w], gin)
}

/// Transposed convolution with weight `[C_in, C_out, kh, kw]`: every input
/// pixel scatters a weighted kernel into the (strided) output.
pub fn conv_transpose2d_forward(input: &Tensor, params: &LayerParams, geom: &ConvGeometry) -> Result<Tensor> {
    let (cin, h, w) = dims3(input, "conv_transpose2d")?;
    let (wcin, cout, kh, kw) = dims4(&params.weight, "conv_transpose2d")?;
    if wcin != cin {
        return Err(shape(format!("conv_transpose2d: input has {cin} channels, weight expects {wcin}")));
    }
    if params.bias.len() != cout {
        return Err(shape(format!("conv_transpose2d: bias length {} != {cout}", params.bias.len())));
    }
    check_geometry(geom, kh, kw, "conv_transpose2d")?;
    let (oh, ow) = geom.transpose_output(h, w)?;
    let (sy, sx) = geom.stride;
    let (py, px) = (geom.padding.0 as isize, geom.padding.1 as isize);
    let x = input.data();
    let wt = params.weight.data();
    let mut out = vec![0.0; cout * oh * ow];
    for co in 0..cout {
        out[co * oh * ow..(co + 1) * oh * ow].fill(params.bias.data()[co]);
    }
    for ci in 0..cin {
        let in_plane = &x[ci * h * w..(ci + 1) * h * w];
        for co in 0..cout {
            let plane = &mut out[co * oh * ow..(co + 1) * oh * ow];
            for ky in 0..kh {
                // output row oy = iy * sy + ky - py must lie in 0..oh
                let iys = valid_range(h, sy, ky as isize - py, oh);
                for kx in 0..kw {
                    let wv = wt[((ci * cout + co) * kh + ky) * kw + kx];
                    let ixs = valid_range(w, sx, kx as isize - px, ow);
                    for iy in iys.clone() {
                        let oy = ((iy * sy) as isize + ky as isize - py) as usize;
                        let row = &in_plane[iy * w..(iy + 1) * w];
                        let orow = &mut plane[oy * ow..(oy + 1) * ow];
                        for ix in ixs.clone() {
                            let ox = ((ix * sx) as isize + kx as isize - px) as usize;
                            orow[ox] += wv * row[ix];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![cout, oh, ow], out)
}

pub fn conv_transpose2d_backward(
    input: &Tensor,
    params: &LayerParams,
    geom: &ConvGeometry,
    grad_out: &Tensor,
    grads: &mut LayerGrads,
) -> Result<Tensor> {
    let (cin, h, w) = dims3(input, "conv_transpose2d backward")?;
    let (_, cout, kh, kw) = dims4(&params.weight, "conv_transpose2d backward")?;
    let (oh, ow) = geom.transpose_output(h, w)?;
    if grad_out.shape() != [cout, oh, ow] {
        return Err(shape(format!(
            "conv_transpose2d backward: grad shape {:?} != [{cout}, {oh}, {ow}]",
            grad_out.shape()
        )));
    }
    let (sy, sx) = geom.stride;
    let (py, px) = (geom.padding.0 as isize, geom.padding.1 as isize);
    let x = input.data();
    let g = grad_out.data();
    let wt = params.weight.data();
    for co in 0..cout {
        grads.bias.data_mut()[co] += g[co * oh * ow..(co + 1) * oh * ow].iter().sum::<f64>();
    }
    let gw = grads.weight.data_mut();
    let mut gin = vec![0.0; cin * h * w];
    for ci in 0..cin {
        let in_plane = &x[ci * h * w..(ci + 1) * h * w];
        let gin_plane = &mut gin[ci * h * w..(ci + 1) * h * w];
        for co in 0..cout {
            let gplane = &g[co * oh * ow..(co + 1) * oh * ow];
            for ky in 0..kh {
                let iys = valid_range(h, sy, ky as isize - py, oh);
                for kx in 0..kw {
                    let widx = ((ci * cout + co) * kh + ky) * kw + kx;
                    let wv = wt[widx];
                    let ixs = valid_range(w, sx, kx as isize - px, ow);
                    let mut acc = 0.0;
                    for iy in iys.clone() {
                        let oy = ((iy * sy) as isize + ky as isize - py) as usize;
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        for ix in ixs.clone() {
                            let ox = ((ix * sx) as isize + kx as isize - px) as usize;
                            acc += in_plane[iy * w + ix] * grow[ox];
                            gin_plane[iy * w + ix] += wv * grow[ox];
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    Tensor::new(vec![cin, h, w], gin)
}

/// `y = W x + b` with weight `[m, n]`; any input holding `n` values is accepted.
pub fn dense_forward(input: &Tensor, params: &LayerParams) -> Result<Tensor> {
    let (m, n) = match *params.weight.shape() {
        [m, n] => (m, n),
        ref s => return Err(shape(format!("dense: weight must be rank 2, got {s:?}"))),
    };
    if input.len() != n {
        return Err(shape(format!("dense: input length {} != weight columns {n}", input.len())));
    }
    if params.bias.len() != m {
        return Err(shape(format!("dense: bias length {} != weight rows {m}", params.bias.len())));
    }
    let x = input.data();
    let out = params
        .weight
        .data()
        .chunks_exact(n)
        .zip(params.bias.data())
        .map(|(row, b)| b + row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>())
        .collect();
    Ok(Tensor::from_vec(out))
}

pub fn dense_backward(input: &Tensor, params: &LayerParams, grad_out: &Tensor, grads: &mut LayerGrads) -> Result<Tensor> {
    let (m, n) = match *params.weight.shape() {
        [m, n] => (m, n),
        ref s => return Err(shape(format!("dense backward: weight must be rank 2, got {s:?}"))),
    };
    if grad_out.len() != m || input.len() != n {
        return Err(shape(format!(
            "dense backward: grad length {} / input length {} vs weight [{m}, {n}]",
            grad_out.len(),
            input.len()
        )));
    }
    let x = input.data();
    let g = grad_out.data();
    let mut gin = vec![0.0; n];
    for (i, (&gi, (wrow, gwrow))) in g
        .iter()
        .zip(params.weight.data().chunks_exact(n).zip(grads.weight.data_mut().chunks_exact_mut(n)))
        .enumerate()
    {
        grads.bias.data_mut()[i] += gi;
        for j in 0..n {
            gwrow[j] += gi * x[j];
            gin[j] += wrow[j] * gi;
        }
    }
    Tensor::new(input.shape().to_vec(), gin)
}

pub fn leaky_relu_forward(input: &Tensor, slope: f64) -> Tensor {
    let data = input.data().iter().map(|&x| if x > 0.0 { x } else { slope * x }).collect();
    Tensor::new(input.shape().to_vec(), data).expect("same shape")
}

pub fn leaky_relu_backward(input: &Tensor, slope: f64, grad_out: &Tensor) -> Result<Tensor> {
    if input.shape() != grad_out.shape() {
        return Err(shape(format!("leaky_relu backward: {:?} vs {:?}", input.shape(), grad_out.shape())));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { slope * g })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}
