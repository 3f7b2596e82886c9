//! The convolutional regressor: per-sample standardization, `n_blocks`
//! blocks of `convs_per_block` 3×3×3 convolutions (ReLU) followed by a
//! (1, 2, 2) max-pool, global average pooling, ReLU dense layers and a
//! linear output layer.
//!
//! Parameters live in one flat vector, layer by layer in forward order; each
//! convolution stores weights `[cout][cin][kd][kh][kw]` then biases `[cout]`,
//! each dense layer stores weights `[out][in]` then biases `[out]`.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{self, ConvGeometry, NormStats, Tensor};
use crate::error::{Error, Result};
use crate::volume::Volume;

fn default_true() -> bool {
    true
}
fn default_output_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    pub n_blocks: usize,
    pub convs_per_block: usize,
    pub base_channels: usize,
    pub kernel: [usize; 3],
    pub pool: [usize; 3],
    pub dense_widths: Vec<usize>,
    pub n_outputs: usize,
    /// Expected `(nz, ny, nx)` of input volumes.
    pub input_shape: [usize; 3],
    #[serde(default = "default_true")]
    pub normalize_input: bool,
    /// Constant multiplier on the linear output layer.
    #[serde(default = "default_output_scale")]
    pub output_scale: f64,
}

impl ArchitectureSpec {
    /// Five blocks of two convolutions, 8 base channels, dense [64, 64].
    pub fn standard(n_outputs: usize, input_shape: [usize; 3]) -> Self {
        ArchitectureSpec {
            n_blocks: 5,
            convs_per_block: 2,
            base_channels: 8,
            kernel: [3, 3, 3],
            pool: [1, 2, 2],
            dense_widths: vec![64, 64],
            n_outputs,
            input_shape,
            normalize_input: true,
            output_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 || self.convs_per_block == 0 || self.base_channels == 0 {
            return Err(Error::validation("architecture counts must be positive"));
        }
        if self.kernel.iter().any(|k| k % 2 == 0) {
            return Err(Error::validation(format!(
                "kernel {:?} must be odd",
                self.kernel
            )));
        }
        if self.pool != [1, 2, 2] {
            return Err(Error::validation(format!(
                "only (1, 2, 2) pooling is supported, got {:?}",
                self.pool
            )));
        }
        if self.n_outputs == 0 || self.dense_widths.contains(&0) {
            return Err(Error::validation("layer widths must be positive"));
        }
        let factor = 1usize << self.n_blocks;
        let [nz, ny, nx] = self.input_shape;
        if nz == 0 || ny % factor != 0 || nx % factor != 0 || ny == 0 || nx == 0 {
            return Err(Error::validation(format!(
                "input lateral extent {ny}x{nx} must be divisible by 2^{} = {factor}",
                self.n_blocks
            )));
        }
        if !(self.output_scale.is_finite() && self.output_scale > 0.0) {
            return Err(Error::validation("output_scale must be positive"));
        }
        Ok(())
    }

    /// Spatial extent after all pooling blocks.
    pub fn final_spatial(&self) -> [usize; 3] {
        let f = 1usize << self.n_blocks;
        [
            self.input_shape[0],
            self.input_shape[1] / f,
            self.input_shape[2] / f,
        ]
    }

    pub fn channels_of_block(&self, block: usize) -> usize {
        self.base_channels << block
    }
}

#[derive(Debug, Clone)]
enum Op {
    Normalize,
    Conv {
        geo: ConvGeometry,
        w: usize,
        b: usize,
    },
    Pool,
    GlobalAvg,
    Dense {
        nin: usize,
        nout: usize,
        w: usize,
        b: usize,
        relu: bool,
    },
}

enum Cache {
    Normalize {
        output: Tensor,
        stats: NormStats,
    },
    Conv {
        input: Tensor,
        output: Tensor,
    },
    Pool {
        input_shape: [usize; 4],
        arg: Vec<usize>,
    },
    GlobalAvg {
        input_shape: [usize; 4],
    },
    Dense {
        x: Vec<f64>,
        y: Vec<f64>,
    },
}

/// Which parameter group a flat index belongs to, for gradient probing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Conv,
    Dense,
}

#[derive(Debug, Clone)]
pub struct Network {
    spec: ArchitectureSpec,
    ops: Vec<Op>,
    params: Vec<f64>,
}

/// Per-batch gradients of the mean squared error.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Vec<f64>,
    /// d(mse)/d(prediction) per sample.
    pub outputs: Vec<Vec<f64>>,
    /// d(mse)/d(input voxel) per sample, when requested.
    pub inputs: Option<Vec<Vec<f64>>>,
}

fn plan(spec: &ArchitectureSpec) -> (Vec<Op>, usize) {
    let mut ops = Vec::new();
    let mut offset = 0;
    if spec.normalize_input {
        ops.push(Op::Normalize);
    }
    let mut spatial = spec.input_shape;
    let mut cin = 1;
    for block in 0..spec.n_blocks {
        let cout = spec.channels_of_block(block);
        for _ in 0..spec.convs_per_block {
            let geo = ConvGeometry {
                cin,
                cout,
                kernel: spec.kernel,
                spatial,
            };
            let w = offset;
            offset += geo.weight_count();
            let b = offset;
            offset += cout;
            ops.push(Op::Conv { geo, w, b });
            cin = cout;
        }
        ops.push(Op::Pool);
        spatial = [spatial[0], spatial[1] / 2, spatial[2] / 2];
    }
    ops.push(Op::GlobalAvg);
    let mut nin = cin;
    let widths = spec
        .dense_widths
        .iter()
        .map(|&w| (w, true))
        .chain(std::iter::once((spec.n_outputs, false)));
    for (nout, relu) in widths {
        let w = offset;
        offset += nin * nout;
        let b = offset;
        offset += nout;
        ops.push(Op::Dense {
            nin,
            nout,
            w,
            b,
            relu,
        });
        nin = nout;
    }
    (ops, offset)
}

impl Network {
    /// Fan-in scaled uniform initialization; values are rounded to `f32`
    /// so the network survives a checkpoint round trip bit for bit.
    pub fn new(spec: ArchitectureSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let (ops, count) = plan(&spec);
        let mut params = vec![0.0; count];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = ops.len() - 1;
        for (i, op) in ops.iter().enumerate() {
            let (start, len, fan_in) = match op {
                Op::Conv { geo, w, .. } => (
                    *w,
                    geo.weight_count(),
                    geo.cin * spec.kernel.iter().product::<usize>(),
                ),
                Op::Dense { nin, nout, w, .. } => (*w, nin * nout, *nin),
                _ => continue,
            };
            let limit = if i == last {
                0.1 * (3.0 / fan_in as f64).sqrt()
            } else {
                (6.0 / fan_in as f64).sqrt()
            };
            for p in &mut params[start..start + len] {
                *p = rng.gen_range(-limit..limit) as f32 as f64;
            }
        }
        Ok(Network { spec, ops, params })
    }

    pub fn from_params(spec: ArchitectureSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        let (ops, count) = plan(&spec);
        if params.len() != count {
            return Err(Error::Checkpoint(format!(
                "architecture needs {count} weights, got {}",
                params.len()
            )));
        }
        Ok(Network { spec, ops, params })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn param_kind(&self, index: usize) -> Option<ParamKind> {
        self.ops.iter().find_map(|op| match op {
            Op::Conv { geo, w, .. }
                if (*w..*w + geo.weight_count() + geo.cout).contains(&index) =>
            {
                Some(ParamKind::Conv)
            }
            Op::Dense { nin, nout, w, .. } if (*w..*w + nin * nout + nout).contains(&index) => {
                Some(ParamKind::Dense)
            }
            _ => None,
        })
    }

    /// Shape of the activation entering the global pooling layer.
    pub fn feature_shape(&self) -> [usize; 4] {
        let [d, h, w] = self.spec.final_spatial();
        [self.spec.channels_of_block(self.spec.n_blocks - 1), d, h, w]
    }

    fn to_tensor(&self, volume: &Volume) -> Result<Tensor> {
        let shape = volume.shape();
        if shape != self.spec.input_shape {
            return Err(Error::validation(format!(
                "input shape {shape:?} does not match the model's {:?}",
                self.spec.input_shape
            )));
        }
        let [d, h, w] = shape;
        Ok(Tensor::from_vec(
            [1, d, h, w],
            volume.data.iter().copied().collect(),
        ))
    }

    fn forward_tensor(&self, input: Tensor, caches: Option<&mut Vec<Cache>>) -> Vec<f64> {
        let mut cache_store = caches;
        let mut x = input;
        let mut vec_x: Vec<f64> = Vec::new();
        for op in &self.ops {
            match op {
                Op::Normalize => {
                    let (out, stats) = layers::normalize_forward(&x);
                    if let Some(c) = cache_store.as_deref_mut() {
                        c.push(Cache::Normalize {
                            output: out.clone(),
                            stats,
                        });
                    }
                    x = out;
                }
                Op::Conv { geo, w, b } => {
                    let out = layers::conv3d_relu_forward(
                        geo,
                        &x,
                        &self.params[*w..*w + geo.weight_count()],
                        &self.params[*b..*b + geo.cout],
                    );
                    if let Some(c) = cache_store.as_deref_mut() {
                        c.push(Cache::Conv {
                            input: std::mem::replace(&mut x, Tensor::zeros([0, 0, 0, 0])),
                            output: out.clone(),
                        });
                    }
                    x = out;
                }
                Op::Pool => {
                    let (out, arg) = layers::max_pool_122_forward(&x);
                    if let Some(c) = cache_store.as_deref_mut() {
                        c.push(Cache::Pool {
                            input_shape: x.shape,
                            arg,
                        });
                    }
                    x = out;
                }
                Op::GlobalAvg => {
                    vec_x = layers::global_avg_pool_forward(&x);
                    if let Some(c) = cache_store.as_deref_mut() {
                        c.push(Cache::GlobalAvg {
                            input_shape: x.shape,
                        });
                    }
                }
                Op::Dense {
                    nin,
                    nout,
                    w,
                    b,
                    relu,
                } => {
                    let y = layers::dense_forward(
                        &vec_x,
                        &self.params[*w..*w + nin * nout],
                        &self.params[*b..*b + nout],
                        *relu,
                    );
                    if let Some(c) = cache_store.as_deref_mut() {
                        c.push(Cache::Dense {
                            x: vec_x.clone(),
                            y: y.clone(),
                        });
                    }
                    vec_x = y;
                }
            }
        }
        vec_x.iter().map(|v| v * self.spec.output_scale).collect()
    }

    fn backward_tensor(
        &self,
        caches: Vec<Cache>,
        grad_output: &[f64],
        grads: &mut [f64],
        need_input: bool,
    ) -> Option<Vec<f64>> {
        let mut g_vec: Vec<f64> = grad_output
            .iter()
            .map(|g| g * self.spec.output_scale)
            .collect();
        let mut g_t: Option<Tensor> = None;
        let first_param_op = self
            .ops
            .iter()
            .position(|op| matches!(op, Op::Conv { .. }))
            .unwrap_or(0);
        for (idx, (op, cache)) in self.ops.iter().zip(caches).enumerate().rev() {
            let need_below = need_input || idx > first_param_op;
            match (op, cache) {
                (
                    Op::Dense {
                        nin,
                        nout,
                        w,
                        b,
                        relu,
                    },
                    Cache::Dense { x, y },
                ) => {
                    let (gw, rest) = grads[*w..].split_at_mut(nin * nout);
                    let gb = &mut rest[*b - *w - nin * nout..][..*nout];
                    g_vec = layers::dense_backward(
                        &x,
                        &y,
                        &g_vec,
                        &self.params[*w..*w + nin * nout],
                        *relu,
                        gw,
                        gb,
                    );
                }
                (Op::GlobalAvg, Cache::GlobalAvg { input_shape }) => {
                    g_t = Some(layers::global_avg_pool_backward(input_shape, &g_vec));
                }
                (Op::Pool, Cache::Pool { input_shape, arg }) => {
                    let g = g_t.take().expect("gradient tensor");
                    g_t = Some(layers::max_pool_backward(input_shape, &arg, &g));
                }
                (Op::Conv { geo, w, b }, Cache::Conv { input, output }) => {
                    let g = g_t.take().expect("gradient tensor");
                    let nw = geo.weight_count();
                    let (gw, rest) = grads[*w..].split_at_mut(nw);
                    let gb = &mut rest[*b - *w - nw..][..geo.cout];
                    g_t = layers::conv3d_relu_backward(
                        geo,
                        &input,
                        &output,
                        &g,
                        &self.params[*w..*w + nw],
                        gw,
                        gb,
                        need_below,
                    );
                    if !need_below {
                        return None;
                    }
                }
                (Op::Normalize, Cache::Normalize { output, stats }) => {
                    let g = g_t.take().expect("gradient tensor");
                    g_t = Some(layers::normalize_backward(&output, stats, &g));
                }
                _ => unreachable!("cache does not match op"),
            }
        }
        g_t.map(|t| t.data)
    }

    /// Predicted amplitudes (µm) for each volume.
    pub fn forward(&self, batch: &[Volume]) -> Result<Vec<Vec<f64>>> {
        batch
            .iter()
            .map(|v| Ok(self.forward_tensor(self.to_tensor(v)?, None)))
            .collect()
    }

    /// Mean squared error over samples × outputs and its gradients.
    pub fn loss_and_gradients(
        &self,
        batch: &[Volume],
        truths: &[Vec<f64>],
        with_input_grads: bool,
    ) -> Result<(f64, Gradients)> {
        if batch.len() != truths.len() || batch.is_empty() {
            return Err(Error::validation(format!(
                "batch of {} volumes with {} truths",
                batch.len(),
                truths.len()
            )));
        }
        let n_out = self.spec.n_outputs;
        if truths.iter().any(|t| t.len() != n_out) {
            return Err(Error::validation("truth length differs from model outputs"));
        }
        let denom = (batch.len() * n_out) as f64;
        let mut grads = vec![0.0; self.params.len()];
        let mut sse = 0.0;
        let mut out_grads = Vec::with_capacity(batch.len());
        let mut in_grads = Vec::new();
        for (v, t) in batch.iter().zip(truths) {
            let mut caches = Vec::with_capacity(self.ops.len());
            let pred = self.forward_tensor(self.to_tensor(v)?, Some(&mut caches));
            let g: Vec<f64> = pred
                .iter()
                .zip(t)
                .map(|(p, t)| {
                    sse += (p - t) * (p - t);
                    2.0 * (p - t) / denom
                })
                .collect();
            let gi = self.backward_tensor(caches, &g, &mut grads, with_input_grads);
            if let Some(gi) = gi {
                in_grads.push(gi);
            }
            out_grads.push(g);
        }
        let mse = sse / denom;
        if !mse.is_finite() {
            return Err(Error::Divergence {
                step: 0,
                loss: mse,
                last_good: None,
            });
        }
        Ok((
            mse,
            Gradients {
                params: grads,
                outputs: out_grads,
                inputs: with_input_grads.then_some(in_grads),
            },
        ))
    }

    /// Loss only, for finite-difference probes.
    pub fn loss(&self, batch: &[Volume], truths: &[Vec<f64>]) -> Result<f64> {
        let preds = self.forward(batch)?;
        let n = (preds.len() * self.spec.n_outputs) as f64;
        Ok(preds
            .iter()
            .zip(truths)
            .flat_map(|(p, t)| p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)))
            .sum::<f64>()
            / n)
    }
}
