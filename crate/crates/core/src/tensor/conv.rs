use rayon::prelude::*;

use super::gemm::{gemm, gemm_nt_accumulate, PackedA};
use super::{Real, Tensor, AXIS_NAMES};
use crate::error::{Error, Result};

/// Geometry of a 3D convolution. Extents are ordered `(depth, height, width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvParams {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvParams {
    /// Stride 1, no padding.
    pub fn new(in_channels: usize, out_channels: usize, kernel: [usize; 3]) -> Self {
        ConvParams {
            kernel,
            stride: [1; 3],
            padding: [0; 3],
            in_channels,
            out_channels,
        }
    }

    pub fn with_stride(mut self, stride: [usize; 3]) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: [usize; 3]) -> Self {
        self.padding = padding;
        self
    }

    /// Kernel `k` with padding `k / 2` on every axis, which preserves extents at stride 1.
    pub fn same(in_channels: usize, out_channels: usize, kernel: [usize; 3]) -> Self {
        Self::new(in_channels, out_channels, kernel).with_padding(kernel.map(|k| k / 2))
    }

    pub fn weight_shape(&self) -> [usize; 5] {
        [self.out_channels, self.in_channels, self.kernel[0], self.kernel[1], self.kernel[2]]
    }

    /// Length of one im2col column: `in_channels * kd * kh * kw`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel.iter().product::<usize>()
    }

    pub fn weight_count(&self) -> usize {
        self.out_channels * self.patch_len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Geometry("convolution channel counts must be >= 1".into()));
        }
        if self.kernel.contains(&0) || self.stride.contains(&0) {
            return Err(Error::Geometry(format!(
                "kernel {:?} and stride {:?} must be >= 1",
                self.kernel, self.stride
            )));
        }
        Ok(())
    }

    /// Output extents `floor((in + 2p - k) / s) + 1` per axis.
    pub fn output_extent(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        self.validate()?;
        let mut out = [0; 3];
        for axis in 0..3 {
            let padded = input[axis] + 2 * self.padding[axis];
            if padded < self.kernel[axis] {
                return Err(Error::Geometry(format!(
                    "{} extent {} (padded {}) is smaller than kernel {}",
                    AXIS_NAMES[axis + 2],
                    input[axis],
                    padded,
                    self.kernel[axis]
                )));
            }
            out[axis] = (padded - self.kernel[axis]) / self.stride[axis] + 1;
        }
        Ok(out)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1; 3] && self.stride == [1; 3] && self.padding == [0; 3]
    }
}

/// Forward convolution implementation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ConvAlgorithm {
    /// Seven nested loops; the reference implementation.
    Direct,
    /// Patch unfolding followed by a blocked matrix multiply.
    #[default]
    Im2col,
}

struct Geometry {
    batch: usize,
    input: [usize; 3],
    output: [usize; 3],
}

impl Geometry {
    fn in_vox(&self) -> usize {
        self.input.iter().product()
    }

    fn out_vox(&self) -> usize {
        self.output.iter().product()
    }
}

fn check<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: Option<&[T]>, p: &ConvParams) -> Result<Geometry> {
    p.validate()?;
    let [n, c, d, h, w] = input.dims5()?;
    if c != p.in_channels {
        return Err(Error::dim("input channel", p.in_channels, c));
    }
    let wdims = weight.dims5()?;
    for (axis, (&want, &got)) in p.weight_shape().iter().zip(&wdims).enumerate() {
        if want != got {
            let name = ["weight out-channel", "weight in-channel", "kernel depth", "kernel height", "kernel width"];
            return Err(Error::dim(name[axis], want, got));
        }
    }
    if let Some(b) = bias {
        if b.len() != p.out_channels {
            return Err(Error::dim("bias", p.out_channels, b.len()));
        }
    }
    let output = p.output_extent([d, h, w])?;
    Ok(Geometry {
        batch: n,
        input: [d, h, w],
        output,
    })
}

/// 3D convolution with zero padding using the default algorithm.
pub fn conv3d<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: Option<&[T]>, params: &ConvParams) -> Result<Tensor<T>> {
    conv3d_with(ConvAlgorithm::default(), input, weight, bias, params)
}

pub fn conv3d_with<T: Real>(
    algorithm: ConvAlgorithm,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&[T]>,
    params: &ConvParams,
) -> Result<Tensor<T>> {
    match algorithm {
        ConvAlgorithm::Direct => conv3d_direct(input, weight, bias, params),
        ConvAlgorithm::Im2col => conv3d_im2col(input, weight, bias, params),
    }
}

/// Reference convolution: for every output voxel, accumulate the window in
/// `(in_channel, kd, kh, kw)` order, then add the bias.
pub fn conv3d_direct<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: Option<&[T]>, p: &ConvParams) -> Result<Tensor<T>> {
    let g = check(input, weight, bias, p)?;
    let [id, ih, iw] = g.input;
    let [od, oh, ow] = g.output;
    let (x, w) = (input.data(), weight.data());
    let mut out = Vec::with_capacity(g.batch * p.out_channels * g.out_vox());
    for b in 0..g.batch {
        for co in 0..p.out_channels {
            for z in 0..od {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut acc = T::zero();
                        for ci in 0..p.in_channels {
                            for a in 0..p.kernel[0] {
                                let zi = (z * p.stride[0] + a) as isize - p.padding[0] as isize;
                                if zi < 0 || zi >= id as isize {
                                    continue;
                                }
                                for bb in 0..p.kernel[1] {
                                    let yi = (y * p.stride[1] + bb) as isize - p.padding[1] as isize;
                                    if yi < 0 || yi >= ih as isize {
                                        continue;
                                    }
                                    for c in 0..p.kernel[2] {
                                        let xi = (xo * p.stride[2] + c) as isize - p.padding[2] as isize;
                                        if xi < 0 || xi >= iw as isize {
                                            continue;
                                        }
                                        let xv = x[(((b * p.in_channels + ci) * id + zi as usize) * ih + yi as usize) * iw
                                            + xi as usize];
                                        let wv = w[(((co * p.in_channels + ci) * p.kernel[0] + a) * p.kernel[1] + bb)
                                            * p.kernel[2]
                                            + c];
                                        acc = acc + xv * wv;
                                    }
                                }
                            }
                        }
                        out.push(match bias {
                            Some(bias) => acc + bias[co],
                            None => acc,
                        });
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.batch, p.out_channels, od, oh, ow], out)
}

/// Number of output voxels per work tile. Depends only on the patch length so the
/// partition (and therefore every reduction order) is independent of thread count.
fn tile_width(patch_len: usize) -> usize {
    let budget = (1usize << 18) / patch_len.max(1);
    (budget.clamp(16, 1024) / 16) * 16
}

/// A horizontal run of output voxels sharing `(z, y)` inside a tile.
struct Run {
    start: usize,
    len: usize,
    z: usize,
    y: usize,
    x0: usize,
}

fn tile_runs(output: [usize; 3], t0: usize, nt: usize) -> Vec<Run> {
    let [_, oh, ow] = output;
    let mut runs = Vec::new();
    let mut j = 0;
    while j < nt {
        let o = t0 + j;
        let x0 = o % ow;
        let y = (o / ow) % oh;
        let z = o / (ow * oh);
        let len = (ow - x0).min(nt - j);
        runs.push(Run { start: j, len, z, y, x0 });
        j += len;
    }
    runs
}

/// Valid output-x range `[lo, hi)` within a run for kernel column `c`.
#[inline]
fn valid_span(run: &Run, c: usize, stride: usize, pad: usize, iw: usize) -> (usize, usize) {
    // x_in = ox * stride + c - pad must lie in [0, iw)
    let first_ok = if c >= pad { 0 } else { (pad - c).div_ceil(stride) };
    let end_ok = if iw + pad > c { (iw + pad - c).div_ceil(stride) } else { 0 };
    let lo = first_ok.clamp(run.x0, run.x0 + run.len);
    let hi = end_ok.clamp(lo, run.x0 + run.len);
    (lo - run.x0, hi - run.x0)
}

/// Patch matrix for output voxels `[t0, t0 + nt)` of one sample, row-major `patch_len x nt`.
fn im2col_tile<T: Real>(x: &[T], g: &Geometry, p: &ConvParams, runs: &[Run], nt: usize, col: &mut [T]) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = p.kernel;
    let in_vox = g.in_vox();
    let mut row = 0;
    for ci in 0..p.in_channels {
        let xc = &x[ci * in_vox..(ci + 1) * in_vox];
        for a in 0..kd {
            for bb in 0..kh {
                for c in 0..kw {
                    let dst = &mut col[row * nt..(row + 1) * nt];
                    for run in runs {
                        let seg = &mut dst[run.start..run.start + run.len];
                        let zi = (run.z * p.stride[0] + a) as isize - p.padding[0] as isize;
                        let yi = (run.y * p.stride[1] + bb) as isize - p.padding[1] as isize;
                        if zi < 0 || zi >= id as isize || yi < 0 || yi >= ih as isize {
                            seg.fill(T::zero());
                            continue;
                        }
                        let line = &xc[(zi as usize * ih + yi as usize) * iw..][..iw];
                        let (lo, hi) = valid_span(run, c, p.stride[2], p.padding[2], iw);
                        seg[..lo].fill(T::zero());
                        seg[hi..].fill(T::zero());
                        let base = (run.x0 + lo) * p.stride[2] + c - p.padding[2];
                        if p.stride[2] == 1 {
                            seg[lo..hi].copy_from_slice(&line[base..base + hi - lo]);
                        } else {
                            for (t, v) in seg[lo..hi].iter_mut().enumerate() {
                                *v = line[base + t * p.stride[2]];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col_tile`]: scatter-adds a patch matrix back into one sample.
fn col2im_tile<T: Real>(col: &[T], g: &Geometry, p: &ConvParams, runs: &[Run], nt: usize, dx: &mut [T]) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = p.kernel;
    let in_vox = g.in_vox();
    let mut row = 0;
    for ci in 0..p.in_channels {
        let dxc = &mut dx[ci * in_vox..(ci + 1) * in_vox];
        for a in 0..kd {
            for bb in 0..kh {
                for c in 0..kw {
                    let src = &col[row * nt..(row + 1) * nt];
                    row += 1;
                    for run in runs {
                        let zi = (run.z * p.stride[0] + a) as isize - p.padding[0] as isize;
                        let yi = (run.y * p.stride[1] + bb) as isize - p.padding[1] as isize;
                        if zi < 0 || zi >= id as isize || yi < 0 || yi >= ih as isize {
                            continue;
                        }
                        let line = &mut dxc[(zi as usize * ih + yi as usize) * iw..][..iw];
                        let (lo, hi) = valid_span(run, c, p.stride[2], p.padding[2], iw);
                        let base = (run.x0 + lo) * p.stride[2] + c - p.padding[2];
                        let seg = &src[run.start + lo..run.start + hi];
                        if p.stride[2] == 1 {
                            for (d, &v) in line[base..base + seg.len()].iter_mut().zip(seg) {
                                *d += v;
                            }
                        } else {
                            for (t, &v) in seg.iter().enumerate() {
                                line[base + t * p.stride[2]] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn tasks(batch: usize, out_vox: usize, tile: usize) -> Vec<(usize, usize, usize)> {
    let mut v = Vec::new();
    for b in 0..batch {
        let mut t0 = 0;
        while t0 < out_vox {
            let nt = tile.min(out_vox - t0);
            v.push((b, t0, nt));
            t0 += nt;
        }
    }
    v
}

/// Convolution by patch unfolding and a blocked matrix multiply. Bit-identical to
/// [`conv3d_direct`].
pub fn conv3d_im2col<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: Option<&[T]>, p: &ConvParams) -> Result<Tensor<T>> {
    let g = check(input, weight, bias, p)?;
    let (in_vox, out_vox) = (g.in_vox(), g.out_vox());
    let patch = p.patch_len();
    let packed = PackedA::from_row_major(weight.data(), p.out_channels, patch);
    let pointwise = p.is_pointwise();
    let tile = tile_width(patch);
    let x = input.data();
    let cout = p.out_channels;

    let mut out = vec![T::zero(); g.batch * cout * out_vox];
    let work = tasks(g.batch, out_vox, tile);
    let tiles: Vec<Vec<T>> = work
        .par_iter()
        .map_init(Vec::new, |col, &(b, t0, nt)| {
            let xb = &x[b * p.in_channels * in_vox..(b + 1) * p.in_channels * in_vox];
            let mut acc = vec![T::zero(); cout * nt];
            if pointwise {
                gemm(&packed, &xb[t0..], in_vox, nt, &mut acc, nt);
            } else {
                let runs = tile_runs(g.output, t0, nt);
                col.resize(patch * nt, T::zero());
                im2col_tile(xb, &g, p, &runs, nt, col);
                gemm(&packed, col, nt, nt, &mut acc, nt);
            }
            if let Some(bias) = bias {
                for (co, row) in acc.chunks_mut(nt).enumerate() {
                    row.iter_mut().for_each(|v| *v = *v + bias[co]);
                }
            }
            acc
        })
        .collect();
    for (&(b, t0, nt), acc) in work.iter().zip(tiles) {
        for co in 0..cout {
            let dst = (b * cout + co) * out_vox + t0;
            out[dst..dst + nt].copy_from_slice(&acc[co * nt..(co + 1) * nt]);
        }
    }
    let [od, oh, ow] = g.output;
    Tensor::new(vec![g.batch, cout, od, oh, ow], out)
}

/// Strided 3x3x3 convolution with unit padding, the learnable downsampling arm.
pub fn conv3d_stride2_downsample<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&[T]>,
    stride: [usize; 3],
) -> Result<Tensor<T>> {
    let [cout, cin, kd, kh, kw] = weight.dims5()?;
    if [kd, kh, kw] != [3, 3, 3] {
        return Err(Error::dim("kernel extent", 3, if kd != 3 { kd } else if kh != 3 { kh } else { kw }));
    }
    let params = ConvParams::same(cin, cout, [3, 3, 3]).with_stride(stride);
    conv3d(input, weight, bias, &params)
}

#[derive(Default)]
struct Scratch<T> {
    col: Vec<T>,
    dw: Vec<T>,
    dcol: Vec<T>,
}

pub(crate) struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

/// Gradients of [`conv3d`] with respect to input, weight and bias.
pub(crate) fn conv3d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    p: &ConvParams,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let g = check(input, weight, None, p)?;
    let [od, oh, ow] = g.output;
    let expected = [g.batch, p.out_channels, od, oh, ow];
    let got = grad_out.dims5()?;
    for axis in 0..5 {
        if expected[axis] != got[axis] {
            return Err(Error::dim(format!("output-gradient {}", AXIS_NAMES[axis]), expected[axis], got[axis]));
        }
    }
    let (in_vox, out_vox) = (g.in_vox(), g.out_vox());
    let patch = p.patch_len();
    let cout = p.out_channels;
    let cin = p.in_channels;
    let packed_t = PackedA::from_transposed(weight.data(), patch, cout);
    let pointwise = p.is_pointwise();
    let tile = tile_width(patch.max(cout));
    let x = input.data();
    let dy = grad_out.data();

    let mut dbias = vec![T::zero(); cout];
    for b in 0..g.batch {
        for (co, db) in dbias.iter_mut().enumerate() {
            let base = (b * cout + co) * out_vox;
            *db += dy[base..base + out_vox].iter().copied().sum::<T>();
        }
    }

    let mut dweight = vec![T::zero(); cout * patch];
    let mut dx = vec![T::zero(); g.batch * cin * in_vox];
    let work = tasks(g.batch, out_vox, tile);
    let group = rayon::current_num_threads().max(1) * 4;
    let mut scratch: Vec<Scratch<T>> = (0..group.min(work.len())).map(|_| Scratch::default()).collect();
    for chunk in work.chunks(group) {
        chunk
            .par_iter()
            .zip(scratch.par_iter_mut())
            .for_each(|(&(b, t0, nt), s)| {
                let xb = &x[b * cin * in_vox..(b + 1) * cin * in_vox];
                let dyb = &dy[b * cout * out_vox + t0..];
                s.dw.clear();
                s.dw.resize(cout * patch, T::zero());
                s.dcol.resize(patch * nt, T::zero());
                if pointwise {
                    gemm_nt_accumulate(dyb, out_vox, cout, &xb[t0..], in_vox, patch, nt, &mut s.dw);
                } else {
                    let runs = tile_runs(g.output, t0, nt);
                    s.col.resize(patch * nt, T::zero());
                    im2col_tile(xb, &g, p, &runs, nt, &mut s.col);
                    gemm_nt_accumulate(dyb, out_vox, cout, &s.col, nt, patch, nt, &mut s.dw);
                }
                gemm(&packed_t, dyb, out_vox, nt, &mut s.dcol, nt);
            });
        for (s, &(b, t0, nt)) in scratch.iter().zip(chunk) {
            for (acc, &v) in dweight.iter_mut().zip(&s.dw) {
                *acc += v;
            }
            let dxb = &mut dx[b * cin * in_vox..(b + 1) * cin * in_vox];
            if pointwise {
                for ci in 0..cin {
                    let dst = &mut dxb[ci * in_vox + t0..ci * in_vox + t0 + nt];
                    for (d, &v) in dst.iter_mut().zip(&s.dcol[ci * nt..(ci + 1) * nt]) {
                        *d += v;
                    }
                }
            } else {
                let runs = tile_runs(g.output, t0, nt);
                col2im_tile(&s.dcol[..patch * nt], &g, p, &runs, nt, dxb);
            }
        }
    }

    Ok(ConvGrads {
        input: Tensor::new(input.shape().to_vec(), dx)?,
        weight: Tensor::new(weight.shape().to_vec(), dweight)?,
        bias: dbias,
    })
}
