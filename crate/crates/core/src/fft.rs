//! 3D FFTs over `(z, y, x)` arrays and the convolutions built on them.

use std::sync::Arc;

use ndarray::{s, Array3, Axis};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Cached forward/inverse plans for one array shape.
pub struct Fft3 {
    shape: [usize; 3],
    forward: [Arc<dyn Fft<f64>>; 3],
    inverse: [Arc<dyn Fft<f64>>; 3],
}

impl Fft3 {
    pub fn new(shape: [usize; 3]) -> Self {
        let mut planner = FftPlanner::new();
        let forward = shape.map(|n| planner.plan_fft_forward(n));
        let inverse = shape.map(|n| planner.plan_fft_inverse(n));
        Fft3 {
            shape,
            forward,
            inverse,
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn forward(&self, data: &mut Array3<Complex64>) {
        self.run(data, &self.forward);
    }

    /// Inverse transform including the `1/N` normalization.
    pub fn inverse(&self, data: &mut Array3<Complex64>) {
        self.run(data, &self.inverse);
        let scale = 1.0 / data.len() as f64;
        data.mapv_inplace(|v| v * scale);
    }

    fn run(&self, data: &mut Array3<Complex64>, plans: &[Arc<dyn Fft<f64>>; 3]) {
        let d = data.dim();
        assert_eq!([d.0, d.1, d.2], self.shape, "FFT shape mismatch");
        let mut buf = Vec::new();
        let mut scratch = Vec::new();
        for axis in (0..3).rev() {
            let plan = &plans[axis];
            let n = self.shape[axis];
            if n == 1 {
                continue;
            }
            scratch.resize(plan.get_inplace_scratch_len(), Complex64::default());
            for mut lane in data.lanes_mut(Axis(axis)) {
                if let Some(slice) = lane.as_slice_mut() {
                    plan.process_with_scratch(slice, &mut scratch);
                } else {
                    buf.clear();
                    buf.extend(lane.iter().copied());
                    plan.process_with_scratch(&mut buf, &mut scratch);
                    for (dst, src) in lane.iter_mut().zip(&buf) {
                        *dst = *src;
                    }
                }
            }
        }
    }
}

pub fn to_complex(a: &Array3<f64>) -> Array3<Complex64> {
    a.mapv(|v| Complex64::new(v, 0.0))
}

/// Smallest size `>= n` whose only prime factors are 2, 3 and 5.
pub fn good_size(n: usize) -> usize {
    let mut m = n.max(1);
    loop {
        let mut r = m;
        for p in [2, 3, 5] {
            while r.is_multiple_of(p) {
                r /= p;
            }
        }
        if r == 1 {
            return m;
        }
        m += 1;
    }
}

/// Places `kernel` on a grid of `shape` with its centre voxel
/// (`k / 2` per axis) at the origin, wrapping indices periodically.
pub fn embed_centered(kernel: &Array3<f64>, shape: [usize; 3]) -> Array3<f64> {
    let (kz, ky, kx) = kernel.dim();
    let c = [kz / 2, ky / 2, kx / 2];
    let mut out = Array3::zeros(shape);
    for ((z, y, x), &v) in kernel.indexed_iter() {
        let iz = (z + shape[0] * (1 + kz / shape[0]) - c[0]) % shape[0];
        let iy = (y + shape[1] * (1 + ky / shape[1]) - c[1]) % shape[1];
        let ix = (x + shape[2] * (1 + kx / shape[2]) - c[2]) % shape[2];
        out[[iz, iy, ix]] += v;
    }
    out
}

/// Linear (zero padded) convolution cropped to the extent of `signal`.
///
/// The kernel's centre voxel is `k / 2` per axis, so a kernel with a single
/// unit voxel there reproduces `signal`.
pub fn convolve_same(signal: &Array3<f64>, kernel: &Array3<f64>) -> Array3<f64> {
    let (nz, ny, nx) = signal.dim();
    let (kz, ky, kx) = kernel.dim();
    let shape = [
        good_size(nz + kz - 1),
        good_size(ny + ky - 1),
        good_size(nx + kx - 1),
    ];
    let fft = Fft3::new(shape);

    let mut a = Array3::<Complex64>::zeros(shape);
    a.slice_mut(s![..nz, ..ny, ..nx])
        .zip_mut_with(signal, |d, &v| d.re = v);
    let mut b = Array3::<Complex64>::zeros(shape);
    b.slice_mut(s![..kz, ..ky, ..kx])
        .zip_mut_with(kernel, |d, &v| d.re = v);
    fft.forward(&mut a);
    fft.forward(&mut b);
    a.zip_mut_with(&b, |x, y| *x *= y);
    fft.inverse(&mut a);

    let (cz, cy, cx) = (kz / 2, ky / 2, kx / 2);
    a.slice(s![cz..cz + nz, cy..cy + ny, cx..cx + nx])
        .mapv(|v| v.re)
}

/// Direct-sum version of [`convolve_same`], for small arrays and tests.
pub fn convolve_same_direct(signal: &Array3<f64>, kernel: &Array3<f64>) -> Array3<f64> {
    let (nz, ny, nx) = signal.dim();
    let (kz, ky, kx) = kernel.dim();
    let c = [kz / 2, ky / 2, kx / 2];
    let mut out = Array3::zeros((nz, ny, nx));
    for ((jz, jy, jx), &s) in signal.indexed_iter() {
        if s == 0.0 {
            continue;
        }
        for ((qz, qy, qx), &k) in kernel.indexed_iter() {
            let iz = jz as isize + qz as isize - c[0] as isize;
            let iy = jy as isize + qy as isize - c[1] as isize;
            let ix = jx as isize + qx as isize - c[2] as isize;
            if iz >= 0
                && iy >= 0
                && ix >= 0
                && (iz as usize) < nz
                && (iy as usize) < ny
                && (ix as usize) < nx
            {
                out[[iz as usize, iy as usize, ix as usize]] += s * k;
            }
        }
    }
    out
}
