//! Layers with explicit forward/backward passes over the flat parameter vector.

use super::{gemm, Geometry, Init, Mat, ParamBuilder, Scalar, Slot, Tensor};

/// "Same"-padded convolution, stride 1, zero padding.
#[derive(Debug, Clone)]
pub struct Conv {
    pub cin: usize,
    pub cout: usize,
    pub kernel: [usize; 3],
    pub weight: Slot,
    pub bias: Slot,
}

/// 3x3 kernel for 2D data, 3x3x3 for 3D.
pub fn kernel3(rank: usize) -> [usize; 3] {
    if rank == 3 {
        [3, 3, 3]
    } else {
        [1, 3, 3]
    }
}

pub const KERNEL1: [usize; 3] = [1, 1, 1];

impl Conv {
    pub fn new(
        b: &mut ParamBuilder,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
        zero_init: bool,
    ) -> Self {
        let kvol: usize = kernel.iter().product();
        let bound = 1.0 / ((cin * kvol) as f64).sqrt();
        let init = if zero_init {
            Init::Zeros
        } else {
            Init::Uniform(bound)
        };
        let weight = b.add(format!("{name}.weight"), &[cout, cin, kernel[0], kernel[1], kernel[2]], init);
        let bias = b.add(format!("{name}.bias"), &[cout], Init::Zeros);
        Self {
            cin,
            cout,
            kernel,
            weight,
            bias,
        }
    }

    fn taps(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == KERNEL1
    }

    pub fn forward<T: Scalar>(&self, params: &[T], x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.c, self.cin, "conv input channels");
        let p = x.plane();
        let k = self.taps();
        let w = self.weight.of(params);
        let bias = self.bias.of(params);
        let mut out = Tensor::zeros(x.n, self.cout, x.geom);
        let tiles = RowTiles::new(x.geom);
        let mut cols = vec![T::zero(); if self.is_pointwise() { 0 } else { k * tiles.max_px() }];
        for i in 0..x.n {
            let src = x.sample(i);
            let dst = out.sample_mut(i);
            for (o, row) in dst.chunks_mut(p).enumerate() {
                row.fill(bias[o]);
            }
            for (r0, r1) in tiles.iter() {
                let (off, tp) = tiles.span(r0, r1);
                let b = if self.is_pointwise() {
                    Mat { data: &src[off..], rs: p, cs: 1 }
                } else {
                    im2col(src, self.cin, x.geom, self.kernel, r0, r1, &mut cols);
                    Mat::rows(&cols[..k * tp], tp)
                };
                gemm(self.cout, k, tp, T::one(), Mat::rows(w, k), b, T::one(), &mut dst[off..], p);
            }
        }
        out
    }

    /// Accumulates parameter gradients and returns the input gradient if requested.
    pub fn backward<T: Scalar>(
        &self,
        params: &[T],
        x: &Tensor<T>,
        dy: &Tensor<T>,
        grads: &mut [T],
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        let p = x.plane();
        let k = self.taps();
        let w = self.weight.of(params);
        let tiles = RowTiles::new(x.geom);
        let buf = if self.is_pointwise() { 0 } else { k * tiles.max_px() };
        let mut cols = vec![T::zero(); buf];
        let mut dcols = vec![T::zero(); buf];
        let mut dx = need_dx.then(|| Tensor::zeros(x.n, self.cin, x.geom));
        for i in 0..x.n {
            let src = x.sample(i);
            let g = dy.sample(i);
            {
                let db = self.bias.of_mut(grads);
                for (o, row) in g.chunks(p).enumerate() {
                    db[o] = db[o] + row.iter().copied().sum::<T>();
                }
            }
            for (r0, r1) in tiles.iter() {
                let (off, tp) = tiles.span(r0, r1);
                let gt = Mat { data: &g[off..], rs: p, cs: 1 };
                let bt = if self.is_pointwise() {
                    Mat { data: &src[off..], rs: 1, cs: p }
                } else {
                    im2col(src, self.cin, x.geom, self.kernel, r0, r1, &mut cols);
                    Mat::transposed(&cols[..k * tp], tp)
                };
                gemm(self.cout, tp, k, T::one(), gt, bt, T::one(), self.weight.of_mut(grads), k);
                if let Some(dx) = dx.as_mut() {
                    let gt = Mat { data: &g[off..], rs: p, cs: 1 };
                    let dst = dx.sample_mut(i);
                    if self.is_pointwise() {
                        gemm(k, self.cout, tp, T::one(), Mat::transposed(w, k), gt, T::zero(), &mut dst[off..], p);
                    } else {
                        gemm(k, self.cout, tp, T::one(), Mat::transposed(w, k), gt, T::zero(), &mut dcols, tp);
                        col2im(&dcols[..k * tp], self.cin, x.geom, self.kernel, r0, r1, dst);
                    }
                }
            }
        }
        dx
    }
}

/// Splits the `D * H` spatial rows of a sample into blocks small enough that
/// the unfolded columns of one block stay cache resident.
struct RowTiles {
    rows: usize,
    width: usize,
    per_tile: usize,
}

const TILE_PIXELS: usize = 512;

impl RowTiles {
    fn new(geom: Geometry) -> Self {
        let [d, h, w] = geom.dims;
        Self {
            rows: d * h,
            width: w,
            per_tile: (TILE_PIXELS / w).clamp(1, d * h),
        }
    }

    fn max_px(&self) -> usize {
        self.per_tile * self.width
    }

    fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.rows)
            .step_by(self.per_tile)
            .map(|r0| (r0, (r0 + self.per_tile).min(self.rows)))
    }

    /// Flat offset and pixel count of a row block.
    fn span(&self, r0: usize, r1: usize) -> (usize, usize) {
        (r0 * self.width, (r1 - r0) * self.width)
    }
}

/// Unfolds spatial rows `r0..r1` of one sample `[cin, D, H, W]` into a
/// `[(cin * kd * kh * kw), (r1 - r0) * W]` matrix.
fn im2col<T: Scalar>(
    x: &[T],
    cin: usize,
    geom: Geometry,
    kernel: [usize; 3],
    r0: usize,
    r1: usize,
    cols: &mut [T],
) {
    let [d, h, w] = geom.dims;
    let p = d * h * w;
    let tp = (r1 - r0) * w;
    let pad = [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2];
    let mut row = 0;
    for ci in 0..cin {
        let plane = &x[ci * p..(ci + 1) * p];
        for a in 0..kernel[0] {
            for b in 0..kernel[1] {
                for c in 0..kernel[2] {
                    let dst = &mut cols[row * tp..(row + 1) * tp];
                    row += 1;
                    let shift = c as isize - pad[2] as isize;
                    let lo = (-shift).max(0) as usize;
                    let hi = (w as isize - shift).min(w as isize).max(0) as usize;
                    for (zy, out) in (r0..r1).zip(dst.chunks_mut(w)) {
                        let sz = (zy / h) as isize + a as isize - pad[0] as isize;
                        let sy = (zy % h) as isize + b as isize - pad[1] as isize;
                        if sz < 0 || sz >= d as isize || sy < 0 || sy >= h as isize || lo >= hi {
                            out.fill(T::zero());
                            continue;
                        }
                        let base = (sz as usize * h + sy as usize) * w;
                        out[..lo].fill(T::zero());
                        out[hi..].fill(T::zero());
                        let s0 = (base as isize + lo as isize + shift) as usize;
                        out[lo..hi].copy_from_slice(&plane[s0..s0 + (hi - lo)]);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients of rows `r0..r1` back onto the sample.
fn col2im<T: Scalar>(
    cols: &[T],
    cin: usize,
    geom: Geometry,
    kernel: [usize; 3],
    r0: usize,
    r1: usize,
    dx: &mut [T],
) {
    let [d, h, w] = geom.dims;
    let p = d * h * w;
    let tp = (r1 - r0) * w;
    let pad = [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2];
    let mut row = 0;
    for ci in 0..cin {
        let plane = &mut dx[ci * p..(ci + 1) * p];
        for a in 0..kernel[0] {
            for b in 0..kernel[1] {
                for c in 0..kernel[2] {
                    let src = &cols[row * tp..(row + 1) * tp];
                    row += 1;
                    let shift = c as isize - pad[2] as isize;
                    let lo = (-shift).max(0) as usize;
                    let hi = (w as isize - shift).min(w as isize).max(0) as usize;
                    if lo >= hi {
                        continue;
                    }
                    for (zy, inp) in (r0..r1).zip(src.chunks(w)) {
                        let sz = (zy / h) as isize + a as isize - pad[0] as isize;
                        let sy = (zy % h) as isize + b as isize - pad[1] as isize;
                        if sz < 0 || sz >= d as isize || sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let base = (sz as usize * h + sy as usize) * w;
                        let s0 = (base as isize + lo as isize + shift) as usize;
                        for (o, &v) in plane[s0..s0 + (hi - lo)].iter_mut().zip(&inp[lo..hi]) {
                            *o = *o + v;
                        }
                    }
                }
            }
        }
    }
}

/// Largest group count `<= 8` that divides `channels`.
pub fn group_count(channels: usize) -> usize {
    (1..=8.min(channels)).rev().find(|g| channels.is_multiple_of(*g)).unwrap_or(1)
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub channels: usize,
    pub groups: usize,
    pub gamma: Slot,
    pub beta: Slot,
}

pub struct GroupNormCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

const GN_EPS: f64 = 1e-5;

impl GroupNorm {
    pub fn new(b: &mut ParamBuilder, name: &str, channels: usize) -> Self {
        let gamma = b.add(format!("{name}.gamma"), &[channels], Init::Ones);
        let beta = b.add(format!("{name}.beta"), &[channels], Init::Zeros);
        Self {
            channels,
            groups: group_count(channels),
            gamma,
            beta,
        }
    }

    pub fn forward<T: Scalar>(&self, params: &[T], x: &Tensor<T>) -> (Tensor<T>, GroupNormCache<T>) {
        assert_eq!(x.c, self.channels, "group norm channels");
        let p = x.plane();
        let cpg = self.channels / self.groups;
        let m = cpg * p;
        let gamma = self.gamma.of(params);
        let beta = self.beta.of(params);
        let mut y = Tensor::zeros(x.n, x.c, x.geom);
        let mut xhat = vec![T::zero(); x.data.len()];
        let mut inv_std = Vec::with_capacity(x.n * self.groups);
        for (gi, chunk) in x.data.chunks(m).enumerate() {
            // Per-plane partial sums in T, combined in f64.
            let mean = chunk
                .chunks(p)
                .map(|c| c.iter().copied().sum::<T>().to_f64().unwrap())
                .sum::<f64>()
                / m as f64;
            let mean_t = T::lit(mean);
            let var = chunk
                .chunks(p)
                .map(|c| {
                    c.iter()
                        .map(|&v| (v - mean_t) * (v - mean_t))
                        .sum::<T>()
                        .to_f64()
                        .unwrap()
                })
                .sum::<f64>()
                / m as f64;
            let inv = 1.0 / (var + GN_EPS).sqrt();
            inv_std.push(T::lit(inv));
            let inv_t = T::lit(inv);
            let g = gi % self.groups;
            let base = gi * m;
            for (j, src) in chunk.chunks(p).enumerate() {
                let c = g * cpg + j;
                let (ga, be) = (gamma[c], beta[c]);
                let range = base + j * p..base + (j + 1) * p;
                for ((xh, yv), &v) in xhat[range.clone()].iter_mut().zip(&mut y.data[range]).zip(src) {
                    *xh = (v - mean_t) * inv_t;
                    *yv = *xh * ga + be;
                }
            }
        }
        (y, GroupNormCache { xhat, inv_std })
    }

    pub fn backward<T: Scalar>(
        &self,
        params: &[T],
        cache: &GroupNormCache<T>,
        dy: &Tensor<T>,
        grads: &mut [T],
    ) -> Tensor<T> {
        let p = dy.plane();
        let cpg = self.channels / self.groups;
        let m = cpg * p;
        let inv_m = T::lit(1.0 / m as f64);
        let gamma = self.gamma.of(params);
        let mut dgamma = vec![T::zero(); self.channels];
        let mut dbeta = vec![T::zero(); self.channels];
        let mut dx = Tensor::zeros(dy.n, dy.c, dy.geom);
        for gi in 0..dy.n * self.groups {
            let g = gi % self.groups;
            let mut sum1 = T::zero();
            let mut sum2 = T::zero();
            for j in 0..cpg {
                let c = g * cpg + j;
                let range = gi * m + j * p..gi * m + (j + 1) * p;
                let (dyc, xh) = (&dy.data[range.clone()], &cache.xhat[range]);
                let s_dy: T = dyc.iter().copied().sum();
                let s_dyx: T = dyc.iter().zip(xh).map(|(&a, &b)| a * b).sum();
                dgamma[c] = dgamma[c] + s_dyx;
                dbeta[c] = dbeta[c] + s_dy;
                sum1 = sum1 + gamma[c] * s_dy;
                sum2 = sum2 + gamma[c] * s_dyx;
            }
            let inv = cache.inv_std[gi];
            let (mean1, mean2) = (sum1 * inv_m, sum2 * inv_m);
            for j in 0..cpg {
                let c = g * cpg + j;
                let range = gi * m + j * p..gi * m + (j + 1) * p;
                let ga = gamma[c];
                let (dyc, xh) = (&dy.data[range.clone()], &cache.xhat[range.clone()]);
                for ((o, &d), &x) in dx.data[range].iter_mut().zip(dyc).zip(xh) {
                    *o = inv * (d * ga - mean1 - x * mean2);
                }
            }
        }
        for (a, b) in self.gamma.of_mut(grads).iter_mut().zip(&dgamma) {
            *a = *a + *b;
        }
        for (a, b) in self.beta.of_mut(grads).iter_mut().zip(&dbeta) {
            *a = *a + *b;
        }
        dx
    }
}

/// Dense layer applied row-wise to an `n x fin` matrix.
#[derive(Debug, Clone)]
pub struct Linear {
    pub fin: usize,
    pub fout: usize,
    pub weight: Slot,
    pub bias: Slot,
}

impl Linear {
    pub fn new(b: &mut ParamBuilder, name: &str, fin: usize, fout: usize) -> Self {
        let bound = 1.0 / (fin as f64).sqrt();
        let weight = b.add(format!("{name}.weight"), &[fout, fin], Init::Uniform(bound));
        let bias = b.add(format!("{name}.bias"), &[fout], Init::Zeros);
        Self {
            fin,
            fout,
            weight,
            bias,
        }
    }

    pub fn forward<T: Scalar>(&self, params: &[T], x: &[T]) -> Vec<T> {
        let w = self.weight.of(params);
        let bias = self.bias.of(params);
        x.chunks(self.fin)
            .flat_map(|row| {
                (0..self.fout).map(move |o| {
                    bias[o]
                        + w[o * self.fin..(o + 1) * self.fin]
                            .iter()
                            .zip(row)
                            .map(|(&a, &b)| a * b)
                            .sum::<T>()
                })
            })
            .collect()
    }

    pub fn backward<T: Scalar>(&self, params: &[T], x: &[T], dy: &[T], grads: &mut [T]) -> Vec<T> {
        let w = self.weight.of(params);
        let mut dx = vec![T::zero(); x.len()];
        for (r, (row, g)) in x.chunks(self.fin).zip(dy.chunks(self.fout)).enumerate() {
            for o in 0..self.fout {
                let go = g[o];
                {
                    let db = self.bias.of_mut(grads);
                    db[o] = db[o] + go;
                }
                let dw = &mut self.weight.of_mut(grads)[o * self.fin..(o + 1) * self.fin];
                for ((dwi, &xi), (dxi, &wi)) in dw
                    .iter_mut()
                    .zip(row)
                    .zip(dx[r * self.fin..(r + 1) * self.fin].iter_mut().zip(&w[o * self.fin..]))
                {
                    *dwi = *dwi + go * xi;
                    *dxi = *dxi + go * wi;
                }
            }
        }
        dx
    }
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

pub fn silu<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

pub fn silu_backward<T: Scalar>(pre: &[T], dy: &[T]) -> Vec<T> {
    pre.iter()
        .zip(dy)
        .map(|(&v, &g)| {
            let s = sigmoid(v);
            g * s * (T::one() + v * (T::one() - s))
        })
        .collect()
}

pub fn silu_tensor<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::from_vec(x.n, x.c, x.geom, silu(&x.data))
}

pub fn silu_tensor_backward<T: Scalar>(pre: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    Tensor::from_vec(pre.n, pre.c, pre.geom, silu_backward(&pre.data, &dy.data))
}

/// Visits every (fine index, coarse index) pair of a 2x pooling relation.
fn for_each_pool_pair(fine: Geometry, mut f: impl FnMut(usize, usize)) {
    let fac = fine.pool_factor();
    let coarse = fine.downsampled();
    let [d, h, w] = fine.dims;
    let [_, ch, cw] = coarse.dims;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let ci = ((z / fac[0]) * ch + y / fac[1]) * cw + x / fac[2];
                f((z * h + y) * w + x, ci);
            }
        }
    }
}

/// 2x average pooling along every spatial axis.
pub fn avg_pool<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let coarse = x.geom.downsampled();
    let scale = T::lit(1.0 / x.geom.pool_factor().iter().product::<usize>() as f64);
    let mut out = Tensor::zeros(x.n, x.c, coarse);
    let (fp, cp) = (x.plane(), coarse.volume());
    for plane in 0..x.n * x.c {
        let src = &x.data[plane * fp..(plane + 1) * fp];
        let dst = &mut out.data[plane * cp..(plane + 1) * cp];
        for_each_pool_pair(x.geom, |fi, ci| dst[ci] = dst[ci] + src[fi] * scale);
    }
    out
}

pub fn avg_pool_backward<T: Scalar>(dy: &Tensor<T>, fine: Geometry) -> Tensor<T> {
    let scale = T::lit(1.0 / fine.pool_factor().iter().product::<usize>() as f64);
    let mut dx = Tensor::zeros(dy.n, dy.c, fine);
    let (fp, cp) = (fine.volume(), dy.plane());
    for plane in 0..dy.n * dy.c {
        let src = &dy.data[plane * cp..(plane + 1) * cp];
        let dst = &mut dx.data[plane * fp..(plane + 1) * fp];
        for_each_pool_pair(fine, |fi, ci| dst[fi] = src[ci] * scale);
    }
    dx
}

/// 2x nearest-neighbour upsampling.
pub fn upsample<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let fine = x.geom.upsampled();
    let mut out = Tensor::zeros(x.n, x.c, fine);
    let (fp, cp) = (fine.volume(), x.plane());
    for plane in 0..x.n * x.c {
        let src = &x.data[plane * cp..(plane + 1) * cp];
        let dst = &mut out.data[plane * fp..(plane + 1) * fp];
        for_each_pool_pair(fine, |fi, ci| dst[fi] = src[ci]);
    }
    out
}

pub fn upsample_backward<T: Scalar>(dy: &Tensor<T>, coarse: Geometry) -> Tensor<T> {
    let mut dx = Tensor::zeros(dy.n, dy.c, coarse);
    let (fp, cp) = (dy.plane(), coarse.volume());
    for plane in 0..dy.n * dy.c {
        let src = &dy.data[plane * fp..(plane + 1) * fp];
        let dst = &mut dx.data[plane * cp..(plane + 1) * cp];
        for_each_pool_pair(dy.geom, |fi, ci| dst[ci] = dst[ci] + src[fi]);
    }
    dx
}

/// Channel concatenation `[a, b]`.
pub fn concat<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!((a.n, a.geom), (b.n, b.geom), "concat operands");
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    for i in 0..a.n {
        data.extend_from_slice(a.sample(i));
        data.extend_from_slice(b.sample(i));
    }
    Tensor::from_vec(a.n, a.c + b.c, a.geom, data)
}

/// Inverse of [`concat`] for gradients: splits off the first `ca` channels.
pub fn split<T: Scalar>(x: &Tensor<T>, ca: usize) -> (Tensor<T>, Tensor<T>) {
    let p = x.plane();
    let cb = x.c - ca;
    let mut a = Vec::with_capacity(x.n * ca * p);
    let mut b = Vec::with_capacity(x.n * cb * p);
    for i in 0..x.n {
        let s = x.sample(i);
        a.extend_from_slice(&s[..ca * p]);
        b.extend_from_slice(&s[ca * p..]);
    }
    (
        Tensor::from_vec(x.n, ca, x.geom, a),
        Tensor::from_vec(x.n, cb, x.geom, b),
    )
}

/// Adds a per-(sample, channel) offset `bias[n * c + ch]` to every voxel.
pub fn add_channel_bias<T: Scalar>(x: &mut Tensor<T>, bias: &[T]) {
    let p = x.plane();
    for (plane, chunk) in x.data.chunks_mut(p).enumerate() {
        let b = bias[plane];
        for v in chunk {
            *v = *v + b;
        }
    }
}

/// Gradient of [`add_channel_bias`] with respect to the offsets.
pub fn channel_sums<T: Scalar>(dy: &Tensor<T>) -> Vec<T> {
    dy.data
        .chunks(dy.plane())
        .map(|c| c.iter().copied().sum())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn geom2(h: usize, w: usize) -> Geometry {
        Geometry::from_shape(&[h, w])
    }

    /// Direct-loop convolution used to check the im2col path.
    fn conv_reference(x: &Tensor<f64>, w: &[f64], bias: &[f64], cout: usize, k: [usize; 3]) -> Vec<f64> {
        let [d, h, wd] = x.geom.dims;
        let pad = [k[0] / 2, k[1] / 2, k[2] / 2];
        let mut out = vec![0.0; x.n * cout * d * h * wd];
        for n in 0..x.n {
            for o in 0..cout {
                for z in 0..d {
                    for y in 0..h {
                        for xx in 0..wd {
                            let mut acc = bias[o];
                            for ci in 0..x.c {
                                for a in 0..k[0] {
                                    for b in 0..k[1] {
                                        for c in 0..k[2] {
                                            let sz = z as isize + a as isize - pad[0] as isize;
                                            let sy = y as isize + b as isize - pad[1] as isize;
                                            let sx = xx as isize + c as isize - pad[2] as isize;
                                            if sz < 0 || sy < 0 || sx < 0 || sz >= d as isize || sy >= h as isize || sx >= wd as isize {
                                                continue;
                                            }
                                            let xi = (((n * x.c + ci) * d + sz as usize) * h + sy as usize) * wd + sx as usize;
                                            let wi = (((o * x.c + ci) * k[0] + a) * k[1] + b) * k[2] + c;
                                            acc += x.data[xi] * w[wi];
                                        }
                                    }
                                }
                            }
                            out[(((n * cout + o) * d + z) * h + y) * wd + xx] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops_2d_and_3d() {
        let mut r = rng::seeded(3);
        // The tall shapes span several row tiles.
        for (shape, kernel) in [
            (vec![5, 7], kernel3(2)),
            (vec![3, 4, 5], kernel3(3)),
            (vec![4, 4], KERNEL1),
            (vec![300, 4], kernel3(2)),
            (vec![3, 50, 4], kernel3(3)),
            (vec![300, 4], KERNEL1),
        ] {
            let geom = Geometry::from_shape(&shape);
            let mut b = ParamBuilder::default();
            let conv = Conv::new(&mut b, "c", 2, 3, kernel, false);
            let mut params: Vec<f64> = b.materialize(&mut r);
            for v in conv.bias.of_mut(&mut params) {
                *v = 0.25;
            }
            let x = Tensor::from_vec(
                2,
                2,
                geom,
                (0..2 * 2 * geom.volume()).map(|i| ((i * 37) % 11) as f64 / 7.0 - 0.6).collect(),
            );
            let got = conv.forward(&params, &x);
            let want = conv_reference(&x, conv.weight.of(&params), conv.bias.of(&params), 3, kernel);
            for (g, w) in got.data.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // <dy, conv(x)> - <dy, bias> must equal <conv^T dy, x>.
        let mut r = rng::seeded(9);
        for (shape, kernel) in [
            (vec![6, 5], kernel3(2)),
            (vec![260, 3], kernel3(2)),
            (vec![4, 70, 3], kernel3(3)),
            (vec![260, 3], KERNEL1),
        ] {
            let geom = Geometry::from_shape(&shape);
            let v = geom.volume();
            let mut b = ParamBuilder::default();
            let conv = Conv::new(&mut b, "c", 3, 2, kernel, false);
            let params: Vec<f64> = b.materialize(&mut r);
            let x = Tensor::from_vec(1, 3, geom, (0..3 * v).map(|i| (i as f64 * 0.37).sin()).collect());
            let dy = Tensor::from_vec(1, 2, geom, (0..2 * v).map(|i| (i as f64 * 0.11).cos()).collect());
            let y = conv.forward(&params, &x);
            let mut grads = vec![0.0; params.len()];
            let dx = conv.backward(&params, &x, &dy, &mut grads, true).unwrap();
            let lhs: f64 = y.data.iter().zip(&dy.data).map(|(a, b)| a * b).sum();
            let rhs: f64 = dx.data.iter().zip(&x.data).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
            // Weight gradient: <dy, conv_w(x)> is linear in w, so dW . w = lhs.
            let dw: f64 = conv.weight.of(&grads).iter().zip(conv.weight.of(&params)).map(|(a, b)| a * b).sum();
            assert!((lhs - dw).abs() < 1e-9, "{lhs} vs {dw}");
        }
    }

    #[test]
    fn pool_and_upsample_are_adjoint_up_to_scale() {
        let geom = geom2(4, 6);
        let x = Tensor::from_vec(1, 1, geom, (0..24).map(|i| i as f64).collect::<Vec<f64>>());
        let pooled = avg_pool(&x);
        assert_eq!(pooled.geom.dims, [1, 2, 3]);
        assert_eq!(pooled.data[0], (0.0 + 1.0 + 6.0 + 7.0) / 4.0);
        let up = upsample(&pooled);
        assert_eq!(up.geom, geom);
        assert_eq!(up.data[7], pooled.data[0]);
        let back = upsample_backward(&up, pooled.geom);
        for (a, b) in back.data.iter().zip(&pooled.data) {
            assert!((a - 4.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn group_counts() {
        assert_eq!(group_count(4), 4);
        assert_eq!(group_count(16), 8);
        assert_eq!(group_count(48), 8);
        assert_eq!(group_count(6), 6);
        assert_eq!(group_count(1), 1);
    }

    #[test]
    fn concat_split_round_trip() {
        let g = geom2(2, 2);
        let a = Tensor::from_vec(2, 1, g, (0..8).map(|v| v as f64).collect());
        let b = Tensor::from_vec(2, 2, g, (0..16).map(|v| -(v as f64)).collect());
        let (a2, b2) = split(&concat(&a, &b), 1);
        assert_eq!(a, a2);
        assert_eq!(b, b2);
    }
}
