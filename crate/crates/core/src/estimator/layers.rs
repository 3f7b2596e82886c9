//! Forward and backward kernels for the regressor's layer types.
//!
//! Activations are single-sample tensors laid out `(c, d, h, w)`, row-major.
//! Convolutions run on a zero-padded copy of the input and write into an
//! output buffer with the same padded layout, which turns every kernel tap
//! into one long contiguous axpy/dot over the flattened volume; values that
//! land on padding positions are discarded.

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: [usize; 4],
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[1], self.shape[2], self.shape[3]]
    }

    fn voxels(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four accumulators so the reduction vectorizes
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for k in 0..4 {
            acc[k] += a[4 * i + k] * b[4 * i + k];
        }
    }
    let mut s = acc[0] + acc[1] + acc[2] + acc[3];
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Geometry shared by forward and backward passes of one convolution.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeometry {
    pub cin: usize,
    pub cout: usize,
    pub kernel: [usize; 3],
    pub spatial: [usize; 3],
}

impl ConvGeometry {
    fn pad(&self) -> [usize; 3] {
        self.kernel.map(|k| k / 2)
    }

    fn padded(&self) -> [usize; 3] {
        let p = self.pad();
        [
            self.spatial[0] + 2 * p[0],
            self.spatial[1] + 2 * p[1],
            self.spatial[2] + 2 * p[2],
        ]
    }

    fn padded_len(&self) -> usize {
        self.padded().iter().product()
    }

    /// First and one-past-last padded indices of interior voxels.
    fn span(&self) -> (usize, usize) {
        let [_, ph, pw] = self.padded();
        let p = self.pad();
        let [d, h, w] = self.spatial;
        let first = p[0] * ph * pw + p[1] * pw + p[2];
        let last = (d - 1 + p[0]) * ph * pw + (h - 1 + p[1]) * pw + (w - 1 + p[2]);
        (first, last + 1)
    }

    /// Signed padded-index offset of each kernel tap, in weight order.
    fn tap_offsets(&self) -> Vec<isize> {
        let [_, ph, pw] = self.padded();
        let p = self.pad();
        let [kd, kh, kw] = self.kernel;
        let mut out = Vec::with_capacity(kd * kh * kw);
        for a in 0..kd {
            for b in 0..kh {
                for c in 0..kw {
                    out.push(
                        (a as isize - p[0] as isize) * (ph * pw) as isize
                            + (b as isize - p[1] as isize) * pw as isize
                            + (c as isize - p[2] as isize),
                    );
                }
            }
        }
        out
    }

    pub fn weight_count(&self) -> usize {
        self.cout * self.cin * self.kernel.iter().product::<usize>()
    }

    fn pad_input(&self, input: &Tensor) -> Vec<f64> {
        let [pd, ph, pw] = self.padded();
        let p = self.pad();
        let [d, h, w] = self.spatial;
        let mut out = vec![0.0; self.cin * pd * ph * pw];
        for c in 0..self.cin {
            for z in 0..d {
                for y in 0..h {
                    let src = ((c * d + z) * h + y) * w;
                    let dst = ((c * pd + z + p[0]) * ph + y + p[1]) * pw + p[2];
                    out[dst..dst + w].copy_from_slice(&input.data[src..src + w]);
                }
            }
        }
        out
    }

    fn extract(&self, padded: &[f64], channels: usize) -> Vec<f64> {
        let [pd, ph, pw] = self.padded();
        let p = self.pad();
        let [d, h, w] = self.spatial;
        let mut out = vec![0.0; channels * d * h * w];
        for c in 0..channels {
            for z in 0..d {
                for y in 0..h {
                    let dst = ((c * d + z) * h + y) * w;
                    let src = ((c * pd + z + p[0]) * ph + y + p[1]) * pw + p[2];
                    out[dst..dst + w].copy_from_slice(&padded[src..src + w]);
                }
            }
        }
        out
    }
}

/// `relu(conv(input, weights) + bias)` with "same" zero padding.
/// Weights are `[cout][cin][kd][kh][kw]`.
pub fn conv3d_relu_forward(
    geo: &ConvGeometry,
    input: &Tensor,
    weights: &[f64],
    bias: &[f64],
) -> Tensor {
    let plen = geo.padded_len();
    let pin = geo.pad_input(input);
    let (first, end) = geo.span();
    let taps = geo.tap_offsets();
    let ntap = taps.len();
    let mut pout = vec![0.0; geo.cout * plen];
    for co in 0..geo.cout {
        let out = &mut pout[co * plen + first..co * plen + end];
        for ci in 0..geo.cin {
            let chan = &pin[ci * plen..(ci + 1) * plen];
            let wbase = (co * geo.cin + ci) * ntap;
            for (t, &off) in taps.iter().enumerate() {
                let start = (first as isize + off) as usize;
                axpy(out, weights[wbase + t], &chan[start..start + (end - first)]);
            }
        }
    }
    let mut data = geo.extract(&pout, geo.cout);
    let vox = input.voxels();
    for co in 0..geo.cout {
        for v in &mut data[co * vox..(co + 1) * vox] {
            *v = (*v + bias[co]).max(0.0);
        }
    }
    let [d, h, w] = geo.spatial;
    Tensor::from_vec([geo.cout, d, h, w], data)
}

/// Backward pass of [`conv3d_relu_forward`]. `output` is the forward result,
/// used for the ReLU mask. Accumulates into `grad_w`/`grad_b` and returns
/// the gradient with respect to `input`.
pub fn conv3d_relu_backward(
    geo: &ConvGeometry,
    input: &Tensor,
    output: &Tensor,
    grad_out: &Tensor,
    weights: &[f64],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    need_input_grad: bool,
) -> Option<Tensor> {
    let plen = geo.padded_len();
    let [pd, ph, pw] = geo.padded();
    let p = geo.pad();
    let [d, h, w] = geo.spatial;
    let vox = d * h * w;

    // masked output gradient in padded layout, zero on padding
    let mut gpad = vec![0.0; geo.cout * plen];
    for co in 0..geo.cout {
        let mut sum = 0.0;
        for z in 0..d {
            for y in 0..h {
                let src = ((co * d + z) * h + y) * w;
                let dst = ((co * pd + z + p[0]) * ph + y + p[1]) * pw + p[2];
                for x in 0..w {
                    let g = if output.data[src + x] > 0.0 {
                        grad_out.data[src + x]
                    } else {
                        0.0
                    };
                    gpad[dst + x] = g;
                    sum += g;
                }
            }
        }
        grad_b[co] += sum;
    }
    debug_assert_eq!(grad_out.data.len(), geo.cout * vox);

    let pin = geo.pad_input(input);
    let (first, end) = geo.span();
    let n = end - first;
    let taps = geo.tap_offsets();
    let ntap = taps.len();
    let mut gin = if need_input_grad {
        vec![0.0; geo.cin * plen]
    } else {
        Vec::new()
    };
    for co in 0..geo.cout {
        let g = &gpad[co * plen + first..co * plen + end];
        for ci in 0..geo.cin {
            let chan = &pin[ci * plen..(ci + 1) * plen];
            let wbase = (co * geo.cin + ci) * ntap;
            for (t, &off) in taps.iter().enumerate() {
                let start = (first as isize + off) as usize;
                grad_w[wbase + t] += dot(g, &chan[start..start + n]);
                if need_input_grad {
                    let dst = &mut gin[ci * plen + start..ci * plen + start + n];
                    axpy(dst, weights[wbase + t], g);
                }
            }
        }
    }
    if need_input_grad {
        Some(Tensor::from_vec(
            [geo.cin, d, h, w],
            geo.extract(&gin, geo.cin),
        ))
    } else {
        None
    }
}

/// Max pooling with window and stride `(1, 2, 2)`. Returns the pooled
/// tensor and, per output voxel, the flat input index that won.
pub fn max_pool_122_forward(input: &Tensor) -> (Tensor, Vec<usize>) {
    let [c, d, h, w] = input.shape;
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros([c, d, ho, wo]);
    let mut arg = vec![0usize; out.data.len()];
    let mut k = 0;
    for ch in 0..c {
        for z in 0..d {
            for y in 0..ho {
                for x in 0..wo {
                    let base = ((ch * d + z) * h + 2 * y) * w + 2 * x;
                    let cands = [base, base + 1, base + w, base + w + 1];
                    let mut best = cands[0];
                    for &i in &cands[1..] {
                        if input.data[i] > input.data[best] {
                            best = i;
                        }
                    }
                    out.data[k] = input.data[best];
                    arg[k] = best;
                    k += 1;
                }
            }
        }
    }
    (out, arg)
}

pub fn max_pool_backward(input_shape: [usize; 4], arg: &[usize], grad_out: &Tensor) -> Tensor {
    let mut g = Tensor::zeros(input_shape);
    for (&i, &v) in arg.iter().zip(&grad_out.data) {
        g.data[i] += v;
    }
    g
}

pub fn global_avg_pool_forward(input: &Tensor) -> Vec<f64> {
    let vox = input.voxels();
    input
        .data
        .chunks(vox)
        .map(|c| c.iter().sum::<f64>() / vox as f64)
        .collect()
}

pub fn global_avg_pool_backward(input_shape: [usize; 4], grad_out: &[f64]) -> Tensor {
    let vox: usize = input_shape[1..].iter().product();
    let mut g = Tensor::zeros(input_shape);
    for (c, &v) in grad_out.iter().enumerate() {
        g.data[c * vox..(c + 1) * vox].fill(v / vox as f64);
    }
    g
}

/// `y = W x + b`, optionally followed by ReLU. `W` is `[out][in]`.
pub fn dense_forward(x: &[f64], weights: &[f64], bias: &[f64], relu: bool) -> Vec<f64> {
    let nin = x.len();
    bias.iter()
        .enumerate()
        .map(|(o, b)| {
            let v = b + dot(&weights[o * nin..(o + 1) * nin], x);
            if relu {
                v.max(0.0)
            } else {
                v
            }
        })
        .collect()
}

pub fn dense_backward(
    x: &[f64],
    y: &[f64],
    grad_y: &[f64],
    weights: &[f64],
    relu: bool,
    grad_w: &mut [f64],
    grad_b: &mut [f64],
) -> Vec<f64> {
    let nin = x.len();
    let mut gx = vec![0.0; nin];
    for (o, (&g, &yo)) in grad_y.iter().zip(y).enumerate() {
        let g = if relu && yo <= 0.0 { 0.0 } else { g };
        if g == 0.0 {
            continue;
        }
        grad_b[o] += g;
        axpy(&mut grad_w[o * nin..(o + 1) * nin], g, x);
        axpy(&mut gx, g, &weights[o * nin..(o + 1) * nin]);
    }
    gx
}

/// Per-sample standardization statistics.
#[derive(Debug, Clone, Copy)]
pub struct NormStats {
    pub mean: f64,
    /// Population standard deviation; zero means a constant input.
    pub std: f64,
}

pub fn normalize_forward(input: &Tensor) -> (Tensor, NormStats) {
    let n = input.data.len() as f64;
    let mean = input.data.iter().sum::<f64>() / n;
    let var = input
        .data
        .iter()
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    let data = if std > 0.0 {
        input.data.iter().map(|v| (v - mean) / std).collect()
    } else {
        vec![0.0; input.data.len()]
    };
    (Tensor::from_vec(input.shape, data), NormStats { mean, std })
}

pub fn normalize_backward(output: &Tensor, stats: NormStats, grad_out: &Tensor) -> Tensor {
    let n = output.data.len() as f64;
    if stats.std == 0.0 {
        return Tensor::zeros(output.shape);
    }
    let g_mean = grad_out.data.iter().sum::<f64>() / n;
    let gx_mean = grad_out
        .data
        .iter()
        .zip(&output.data)
        .map(|(g, x)| g * x)
        .sum::<f64>()
        / n;
    let data = grad_out
        .data
        .iter()
        .zip(&output.data)
        .map(|(g, x)| (g - g_mean - x * gx_mean) / stats.std)
        .collect();
    Tensor::from_vec(output.shape, data)
}
