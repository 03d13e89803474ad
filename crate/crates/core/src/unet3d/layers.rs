//! Forward and backward kernels for the network's layer types.
//!
//! Every backward function receives the gradient of the loss with respect
//! to the layer output and returns the gradient with respect to its input,
//! accumulating parameter gradients into caller-provided buffers.

use super::tensor::Tensor;

/// Upper bound on im2col scratch size, in floats.
const COLS_BUDGET: usize = 1 << 22;

pub const GN_EPS: f32 = 1e-5;

/// `C = A·B + beta·C` on strided row/column layouts.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rs: usize, cs: usize, rows: usize, cols: usize| (rows - 1) * rs + (cols - 1) * cs;
    if k > 0 {
        assert!(last(rsa, csa, m, k) < a.len());
        assert!(last(rsb, csb, k, n) < b.len());
    }
    assert!(last(rsc, csc, m, n) < c.len());
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Same-padded 3D convolution with a cubic odd kernel.
#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl Conv {
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.k.pow(3)
    }

    pub fn fan_in(&self) -> usize {
        self.cin * self.k.pow(3)
    }

    fn rows(&self) -> usize {
        self.cin * self.k.pow(3)
    }

    fn chunk_planes(&self, dims: [usize; 3]) -> usize {
        let plane = dims[1] * dims[2];
        (COLS_BUDGET / (self.rows() * plane).max(1)).clamp(1, dims[0])
    }

    /// Fill `cols` (rows × chunk voxels) for x planes `x0..x1`.
    fn im2col(&self, input: &Tensor, x0: usize, x1: usize, cols: &mut [f32]) {
        let [_, ny, nz] = input.dims;
        let k = self.k;
        let p = (k / 2) as isize;
        let cn = (x1 - x0) * ny * nz;
        for ci in 0..self.cin {
            let src = input.channel(ci);
            for a in 0..k {
                for b in 0..k {
                    for c in 0..k {
                        let row = ((ci * k + a) * k + b) * k + c;
                        let dst = &mut cols[row * cn..(row + 1) * cn];
                        let dz = c as isize - p;
                        let z_lo = (-dz).max(0) as usize;
                        let z_hi = (nz as isize - dz).min(nz as isize).max(0) as usize;
                        for x in x0..x1 {
                            let sx = x as isize + a as isize - p;
                            for y in 0..ny {
                                let off = ((x - x0) * ny + y) * nz;
                                let run = &mut dst[off..off + nz];
                                let sy = y as isize + b as isize - p;
                                if sx < 0 || sx >= input.dims[0] as isize || sy < 0 || sy >= ny as isize || z_lo >= z_hi {
                                    run.fill(0.0);
                                    continue;
                                }
                                let base = (sx as usize * ny + sy as usize) * nz;
                                run[..z_lo].fill(0.0);
                                let s0 = (base as isize + z_lo as isize + dz) as usize;
                                run[z_lo..z_hi].copy_from_slice(&src[s0..s0 + (z_hi - z_lo)]);
                                run[z_hi..].fill(0.0);
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add `cols` back into `grad_in` (inverse of `im2col`).
    fn col2im(&self, cols: &[f32], x0: usize, x1: usize, grad_in: &mut Tensor) {
        let [nx, ny, nz] = grad_in.dims;
        let n = grad_in.spatial();
        let k = self.k;
        let p = (k / 2) as isize;
        let cn = (x1 - x0) * ny * nz;
        for ci in 0..self.cin {
            let dst = &mut grad_in.data[ci * n..(ci + 1) * n];
            for a in 0..k {
                for b in 0..k {
                    for c in 0..k {
                        let row = ((ci * k + a) * k + b) * k + c;
                        let src = &cols[row * cn..(row + 1) * cn];
                        let dz = c as isize - p;
                        let z_lo = (-dz).max(0) as usize;
                        let z_hi = (nz as isize - dz).min(nz as isize).max(0) as usize;
                        if z_lo >= z_hi {
                            continue;
                        }
                        for x in x0..x1 {
                            let sx = x as isize + a as isize - p;
                            if sx < 0 || sx >= nx as isize {
                                continue;
                            }
                            for y in 0..ny {
                                let sy = y as isize + b as isize - p;
                                if sy < 0 || sy >= ny as isize {
                                    continue;
                                }
                                let off = ((x - x0) * ny + y) * nz;
                                let base = ((sx as usize * ny + sy as usize) * nz) as isize + dz;
                                let d = &mut dst[(base + z_lo as isize) as usize..(base + z_hi as isize) as usize];
                                d.iter_mut().zip(&src[off + z_lo..off + z_hi]).for_each(|(o, g)| *o += g);
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, input: &Tensor, weight: &[f32], bias: &[f32]) -> Tensor {
        debug_assert_eq!(input.channels, self.cin);
        debug_assert_eq!(weight.len(), self.weight_len());
        let dims = input.dims;
        let n = input.spatial();
        let plane = dims[1] * dims[2];
        let rows = self.rows();
        let mut out = Tensor::zeros(self.cout, dims);
        for co in 0..self.cout {
            out.data[co * n..(co + 1) * n].fill(bias[co]);
        }
        let step = self.chunk_planes(dims);
        let mut cols = vec![0.0f32; rows * step * plane];
        let mut x0 = 0;
        while x0 < dims[0] {
            let x1 = (x0 + step).min(dims[0]);
            let cn = (x1 - x0) * plane;
            self.im2col(input, x0, x1, &mut cols[..rows * cn]);
            gemm(
                self.cout,
                rows,
                cn,
                weight,
                (rows, 1),
                &cols[..rows * cn],
                (cn, 1),
                1.0,
                &mut out.data[x0 * plane..],
                (n, 1),
            );
            x0 = x1;
        }
        out
    }

    /// Returns the input gradient; adds into `grad_w` and `grad_b`.
    pub fn backward(
        &self,
        input: &Tensor,
        weight: &[f32],
        grad_out: &Tensor,
        grad_w: &mut [f32],
        grad_b: &mut [f32],
    ) -> Tensor {
        let dims = input.dims;
        let n = input.spatial();
        let plane = dims[1] * dims[2];
        let rows = self.rows();
        for co in 0..self.cout {
            grad_b[co] += grad_out.channel(co).iter().sum::<f32>();
        }
        let mut grad_in = Tensor::zeros(self.cin, dims);
        let step = self.chunk_planes(dims);
        let mut cols = vec![0.0f32; rows * step * plane];
        let mut dcols = vec![0.0f32; rows * step * plane];
        let mut x0 = 0;
        while x0 < dims[0] {
            let x1 = (x0 + step).min(dims[0]);
            let cn = (x1 - x0) * plane;
            self.im2col(input, x0, x1, &mut cols[..rows * cn]);
            let g = &grad_out.data[x0 * plane..];
            // dW += dOut · colsᵀ
            gemm(self.cout, cn, rows, g, (n, 1), &cols[..rows * cn], (1, cn), 1.0, grad_w, (rows, 1));
            // dCols = Wᵀ · dOut
            gemm(rows, self.cout, cn, weight, (1, rows), g, (n, 1), 0.0, &mut dcols[..rows * cn], (cn, 1));
            self.col2im(&dcols[..rows * cn], x0, x1, &mut grad_in);
            x0 = x1;
        }
        grad_in
    }
}

/// Group normalisation with a per-channel affine transform.
#[derive(Debug, Clone, Copy)]
pub struct GroupNorm {
    pub channels: usize,
    pub groups: usize,
}

#[derive(Debug, Clone)]
pub struct GroupNormCache {
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
}

impl GroupNorm {
    pub fn forward(&self, input: &Tensor, gamma: &[f32], beta: &[f32]) -> (Tensor, GroupNormCache) {
        let n = input.spatial();
        let per_group = self.channels / self.groups;
        let len = per_group * n;
        let mut xhat = vec![0.0f32; input.data.len()];
        let mut inv_std = vec![0.0f32; self.groups];
        let mut out = Tensor::zeros(self.channels, input.dims);
        for g in 0..self.groups {
            let range = g * len..(g + 1) * len;
            let x = &input.data[range.clone()];
            let mean = x.iter().map(|&v| v as f64).sum::<f64>() / len as f64;
            let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / len as f64;
            let istd = 1.0 / (var + GN_EPS as f64).sqrt();
            inv_std[g] = istd as f32;
            let (mean, istd) = (mean as f32, istd as f32);
            for (dst, &v) in xhat[range.clone()].iter_mut().zip(x) {
                *dst = (v - mean) * istd;
            }
            for cl in 0..per_group {
                let c = g * per_group + cl;
                let span = c * n..(c + 1) * n;
                for (o, &h) in out.data[span.clone()].iter_mut().zip(&xhat[span]) {
                    *o = gamma[c] * h + beta[c];
                }
            }
        }
        (out, GroupNormCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        cache: &GroupNormCache,
        gamma: &[f32],
        grad_out: &Tensor,
        grad_gamma: &mut [f32],
        grad_beta: &mut [f32],
    ) -> Tensor {
        let n = grad_out.spatial();
        let per_group = self.channels / self.groups;
        let len = (per_group * n) as f64;
        let mut grad_in = Tensor::zeros(self.channels, grad_out.dims);
        for g in 0..self.groups {
            let (mut sum_d, mut sum_dx) = (0.0f64, 0.0f64);
            for cl in 0..per_group {
                let c = g * per_group + cl;
                let span = c * n..(c + 1) * n;
                let (mut gg, mut gb) = (0.0f64, 0.0f64);
                for (&dy, &h) in grad_out.data[span.clone()].iter().zip(&cache.xhat[span]) {
                    gg += (dy * h) as f64;
                    gb += dy as f64;
                }
                grad_gamma[c] += gg as f32;
                grad_beta[c] += gb as f32;
                sum_d += gamma[c] as f64 * gb;
                sum_dx += gamma[c] as f64 * gg;
            }
            let (mean_d, mean_dx) = ((sum_d / len) as f32, (sum_dx / len) as f32);
            let istd = cache.inv_std[g];
            for cl in 0..per_group {
                let c = g * per_group + cl;
                let span = c * n..(c + 1) * n;
                let gam = gamma[c];
                for ((dst, &dy), &h) in grad_in.data[span.clone()]
                    .iter_mut()
                    .zip(&grad_out.data[span.clone()])
                    .zip(&cache.xhat[span])
                {
                    *dst = istd * (gam * dy - mean_d - h * mean_dx);
                }
            }
        }
        grad_in
    }
}

pub fn relu_inplace(t: &mut Tensor) {
    t.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zero gradient where the ReLU output was not positive.
pub fn relu_backward(output: &Tensor, grad: &mut Tensor) {
    grad.data
        .iter_mut()
        .zip(&output.data)
        .for_each(|(g, &o)| {
            if o <= 0.0 {
                *g = 0.0
            }
        });
}

/// Non-overlapping max pooling.
pub fn max_pool(input: &Tensor, f: [usize; 3]) -> (Tensor, Vec<u32>) {
    let [nx, ny, nz] = input.dims;
    let od = [nx / f[0], ny / f[1], nz / f[2]];
    let on = od.iter().product::<usize>();
    let n = input.spatial();
    let mut out = Tensor::zeros(input.channels, od);
    let mut arg = vec![0u32; input.channels * on];
    for c in 0..input.channels {
        let src = input.channel(c);
        for ox in 0..od[0] {
            for oy in 0..od[1] {
                for oz in 0..od[2] {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_i = 0usize;
                    for a in 0..f[0] {
                        for b in 0..f[1] {
                            for cc in 0..f[2] {
                                let i = ((ox * f[0] + a) * ny + oy * f[1] + b) * nz + oz * f[2] + cc;
                                if src[i] > best {
                                    best = src[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    let o = (ox * od[1] + oy) * od[2] + oz;
                    out.data[c * on + o] = best;
                    arg[c * on + o] = best_i as u32;
                }
            }
        }
        debug_assert!(n <= u32::MAX as usize);
    }
    (out, arg)
}

pub fn max_pool_backward(grad_out: &Tensor, arg: &[u32], input_dims: [usize; 3]) -> Tensor {
    let mut grad_in = Tensor::zeros(grad_out.channels, input_dims);
    let n = grad_in.spatial();
    let on = grad_out.spatial();
    for c in 0..grad_out.channels {
        for o in 0..on {
            grad_in.data[c * n + arg[c * on + o] as usize] += grad_out.data[c * on + o];
        }
    }
    grad_in
}

/// Transposed convolution whose kernel equals its stride: each input voxel
/// expands into one non-overlapping `f` block of the output.
///
/// Weight layout is `[block offset][cout][cin]`.
#[derive(Debug, Clone, Copy)]
pub struct UpConv {
    pub cin: usize,
    pub cout: usize,
    pub f: [usize; 3],
}

impl UpConv {
    fn block(&self) -> usize {
        self.f.iter().product()
    }

    pub fn weight_len(&self) -> usize {
        self.block() * self.cout * self.cin
    }

    /// Each output voxel sums `cin` products.
    pub fn fan_in(&self) -> usize {
        self.cin
    }

    fn out_dims(&self, d: [usize; 3]) -> [usize; 3] {
        [d[0] * self.f[0], d[1] * self.f[1], d[2] * self.f[2]]
    }

    /// Visit (block row in the expanded matrix, output voxel index) pairs.
    fn for_each_target(&self, low: [usize; 3], mut visit: impl FnMut(usize, usize, usize)) {
        let od = self.out_dims(low);
        let f = self.f;
        for x in 0..low[0] {
            for y in 0..low[1] {
                for z in 0..low[2] {
                    let v = (x * low[1] + y) * low[2] + z;
                    for a in 0..f[0] {
                        for b in 0..f[1] {
                            for c in 0..f[2] {
                                let o = (a * f[1] + b) * f[2] + c;
                                let t = ((x * f[0] + a) * od[1] + y * f[1] + b) * od[2] + z * f[2] + c;
                                visit(o, v, t);
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, input: &Tensor, weight: &[f32], bias: &[f32]) -> Tensor {
        let m = self.block() * self.cout;
        let nl = input.spatial();
        let mut tmp = vec![0.0f32; m * nl];
        gemm(m, self.cin, nl, weight, (self.cin, 1), &input.data, (nl, 1), 0.0, &mut tmp, (nl, 1));
        let mut out = Tensor::zeros(self.cout, self.out_dims(input.dims));
        let n = out.spatial();
        let cout = self.cout;
        self.for_each_target(input.dims, |o, v, t| {
            for co in 0..cout {
                out.data[co * n + t] = tmp[(o * cout + co) * nl + v] + bias[co];
            }
        });
        out
    }

    pub fn backward(
        &self,
        input: &Tensor,
        weight: &[f32],
        grad_out: &Tensor,
        grad_w: &mut [f32],
        grad_b: &mut [f32],
    ) -> Tensor {
        let m = self.block() * self.cout;
        let nl = input.spatial();
        let n = grad_out.spatial();
        let cout = self.cout;
        for co in 0..cout {
            grad_b[co] += grad_out.channel(co).iter().sum::<f32>();
        }
        let mut dtmp = vec![0.0f32; m * nl];
        self.for_each_target(input.dims, |o, v, t| {
            for co in 0..cout {
                dtmp[(o * cout + co) * nl + v] = grad_out.data[co * n + t];
            }
        });
        gemm(m, nl, self.cin, &dtmp, (nl, 1), &input.data, (1, nl), 1.0, grad_w, (self.cin, 1));
        let mut grad_in = Tensor::zeros(self.cin, input.dims);
        gemm(self.cin, m, nl, weight, (1, self.cin), &dtmp, (nl, 1), 0.0, &mut grad_in.data, (nl, 1));
        grad_in
    }
}
