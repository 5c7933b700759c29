//! Three-layer 5×5 convolutional heatmap network with hand-written forward
//! and reverse passes.
//!
//! Activations are `[channel][row][col]`, stored with a 2-pixel zero border
//! ("same" padding) wherever they feed a convolution. Parameters are kept at
//! 32-bit and widened to 64-bit for every sum.

use crate::bodymodel::NUM_KEYPOINTS;

pub const KERNEL: usize = 5;
pub const PAD: usize = KERNEL / 2;
/// Channel widths: input, two hidden layers, one output map per keypoint.
pub const CHANNELS: [usize; 4] = [1, 8, 16, NUM_KEYPOINTS];

/// One convolution layer's parameters, `weights[out][in][ky][kx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ConvLayer {
    pub fn zeros(in_channels: usize, out_channels: usize) -> Self {
        ConvLayer {
            in_channels,
            out_channels,
            weights: vec![0.0; out_channels * in_channels * KERNEL * KERNEL],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub(crate) fn widened(&self) -> WideLayer {
        WideLayer {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            weights: self.weights.iter().map(|&w| f64::from(w)).collect(),
            bias: self.bias.iter().map(|&b| f64::from(b)).collect(),
        }
    }
}

/// Layer parameters at working precision.
#[derive(Debug, Clone)]
pub(crate) struct WideLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl WideLayer {
    fn kernel(&self, o: usize, i: usize) -> &[f64] {
        let k2 = KERNEL * KERNEL;
        let start = (o * self.in_channels + i) * k2;
        &self.weights[start..start + k2]
    }
}

/// Geometry of one spatial plane with and without its border.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Plane {
    pub width: usize,
    pub height: usize,
}

impl Plane {
    pub fn area(self) -> usize {
        self.width * self.height
    }

    pub fn padded_width(self) -> usize {
        self.width + 2 * PAD
    }

    pub fn padded_area(self) -> usize {
        (self.width + 2 * PAD) * (self.height + 2 * PAD)
    }
}

/// Writes `src` (`channels` unpadded planes) into the interior of a zeroed padded buffer.
pub(crate) fn pad_into(plane: Plane, channels: usize, src: &[f64], dst: &mut Vec<f64>) {
    dst.clear();
    dst.resize(channels * plane.padded_area(), 0.0);
    let pw = plane.padded_width();
    for c in 0..channels {
        for y in 0..plane.height {
            let s = &src[c * plane.area() + y * plane.width..][..plane.width];
            let d = &mut dst[c * plane.padded_area() + (y + PAD) * pw + PAD..][..plane.width];
            d.copy_from_slice(s);
        }
    }
}

/// `out[o] = bias[o] + Σ_i kernel[o][i] ⋆ input[i]`, input padded, output unpadded.
pub(crate) fn conv_forward(layer: &WideLayer, plane: Plane, input_padded: &[f64], out: &mut Vec<f64>) {
    let (w, h) = (plane.width, plane.height);
    let pw = plane.padded_width();
    out.clear();
    out.resize(layer.out_channels * plane.area(), 0.0);
    for o in 0..layer.out_channels {
        let b = layer.bias[o];
        for y in 0..h {
            let row = &mut out[o * plane.area() + y * w..][..w];
            row.fill(b);
            for i in 0..layer.in_channels {
                let kernel = layer.kernel(o, i);
                let src = &input_padded[i * plane.padded_area()..][..plane.padded_area()];
                for ky in 0..KERNEL {
                    let src_row = &src[(y + ky) * pw..][..pw];
                    for kx in 0..KERNEL {
                        let k = kernel[ky * KERNEL + kx];
                        for (acc, &v) in row.iter_mut().zip(&src_row[kx..kx + w]) {
                            *acc = k.mul_add(v, *acc);
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates `∂L/∂input` (padded layout) from `∂L/∂out` (unpadded).
pub(crate) fn conv_backward_input(layer: &WideLayer, plane: Plane, grad_out: &[f64], grad_in_padded: &mut Vec<f64>) {
    let (w, h) = (plane.width, plane.height);
    let pw = plane.padded_width();
    grad_in_padded.clear();
    grad_in_padded.resize(layer.in_channels * plane.padded_area(), 0.0);
    for i in 0..layer.in_channels {
        let dst = &mut grad_in_padded[i * plane.padded_area()..][..plane.padded_area()];
        for o in 0..layer.out_channels {
            let kernel = layer.kernel(o, i);
            let g = &grad_out[o * plane.area()..][..plane.area()];
            for y in 0..h {
                let g_row = &g[y * w..][..w];
                for ky in 0..KERNEL {
                    let dst_row = &mut dst[(y + ky) * pw..][..pw];
                    for kx in 0..KERNEL {
                        let k = kernel[ky * KERNEL + kx];
                        for (acc, &v) in dst_row[kx..kx + w].iter_mut().zip(g_row) {
                            *acc = k.mul_add(v, *acc);
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates `∂L/∂weights` and `∂L/∂bias` into `grad_w` / `grad_b`.
pub(crate) fn conv_backward_params(
    layer: &WideLayer,
    plane: Plane,
    input_padded: &[f64],
    grad_out: &[f64],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    scratch: &mut Vec<f64>,
) {
    let (w, h) = (plane.width, plane.height);
    let pw = plane.padded_width();
    let k2 = KERNEL * KERNEL;
    scratch.clear();
    scratch.resize(w, 0.0);
    for o in 0..layer.out_channels {
        let g = &grad_out[o * plane.area()..][..plane.area()];
        grad_b[o] += g.iter().sum::<f64>();
        for i in 0..layer.in_channels {
            let src = &input_padded[i * plane.padded_area()..][..plane.padded_area()];
            for ky in 0..KERNEL {
                for kx in 0..KERNEL {
                    // lane-wise partial sums keep the reduction order fixed
                    scratch.fill(0.0);
                    for y in 0..h {
                        let g_row = &g[y * w..][..w];
                        let s_row = &src[(y + ky) * pw + kx..][..w];
                        for ((acc, &a), &b) in scratch.iter_mut().zip(g_row).zip(s_row) {
                            *acc = a.mul_add(b, *acc);
                        }
                    }
                    grad_w[(o * layer.in_channels + i) * k2 + ky * KERNEL + kx] += scratch.iter().sum::<f64>();
                }
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}
