//! Forward and backward kernels for the layer primitives. All are pure
//! functions; shape algebra is validated before any data is touched.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{matmul, Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }

    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output extent of a convolution along one axis; `None` if the kernel does
/// not fit or the stride does not divide the span exactly.
pub fn conv_extent(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let span = (input + 2 * pad).checked_sub(k)?;
    if stride == 0 || span % stride != 0 {
        return None;
    }
    Some(span / stride + 1)
}

pub fn conv_geom(
    x_shape: &[usize],
    w_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Result<ConvGeom> {
    let [n, cin, h, w] = x_shape[..] else {
        return Err(Error::shape("conv2d", format!("input must be rank 4, got {x_shape:?}")));
    };
    let [cout, wcin, kh, kw] = w_shape[..] else {
        return Err(Error::shape("conv2d", format!("weights must be rank 4, got {w_shape:?}")));
    };
    if kh != kw {
        return Err(Error::shape("conv2d", format!("non-square kernel {kh}x{kw}")));
    }
    if wcin != cin {
        return Err(Error::shape(
            "conv2d",
            format!("input has {cin} channels, weights expect {wcin}"),
        ));
    }
    let ho = conv_extent(h, kh, stride, pad);
    let wo = conv_extent(w, kw, stride, pad);
    match (ho, wo) {
        (Some(ho), Some(wo)) => Ok(ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            k: kh,
            stride,
            pad,
            ho,
            wo,
        }),
        _ => Err(Error::shape(
            "conv2d",
            format!("{h}x{w} input, kernel {kh}, stride {stride}, padding {pad} has no exact output extent"),
        )),
    }
}

/// Output columns `ox` whose input column `ox·stride + kx − pad` lies in `[0, w)`.
fn valid_cols(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kx).div_ceil(g.stride);
    let hi = if g.w + g.pad > kx {
        ((g.w + g.pad - kx - 1) / g.stride + 1).min(g.wo)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let p = g.out_pixels();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    let x0 = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[x0..x0 + hi - lo]);
                    } else {
                        for (j, v) in line[lo..hi].iter_mut().enumerate() {
                            *v = src[x0 + j * g.stride];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(g: &ConvGeom, col: &[T], dx: &mut [T]) {
    let p = g.out_pixels();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &col[row * p..(row + 1) * p];
                let (lo, hi) = valid_cols(g, kx);
                if lo >= hi {
                    continue;
                }
                let x0 = lo * g.stride + kx - g.pad;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let s = &src[oy * g.wo + lo..oy * g.wo + hi];
                    if g.stride == 1 {
                        for (d, &v) in line[x0..x0 + hi - lo].iter_mut().zip(s) {
                            *d += v;
                        }
                    } else {
                        for (j, &v) in s.iter().enumerate() {
                            line[x0 + j * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `x [N,C,H,W]` with `w [C',C,k,k]`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = conv_geom(x.shape(), w.shape(), stride, pad)?;
    if let Some(b) = bias {
        if b.shape() != [g.cout] {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {:?}, expected [{}]", b.shape(), g.cout),
            ));
        }
    }
    let p = g.out_pixels();
    let in_sz = g.cin * g.h * g.w;
    let mut out = vec![T::zero(); g.n * g.cout * p];
    let xd = x.data();
    let wd = w.data();
    out.par_chunks_mut(g.cout * p)
        .enumerate()
        .for_each(|(n, dst)| {
            let xs = &xd[n * in_sz..(n + 1) * in_sz];
            if g.pointwise() {
                matmul(g.cout, g.cin, p, wd, false, xs, false, dst, T::zero());
            } else {
                let mut col = vec![T::zero(); g.patch() * p];
                im2col(&g, xs, &mut col);
                matmul(g.cout, g.patch(), p, wd, false, &col, false, dst, T::zero());
            }
            if let Some(b) = bias {
                for (o, &bv) in b.data().iter().enumerate() {
                    for v in &mut dst[o * p..(o + 1) * p] {
                        *v += bv;
                    }
                }
            }
        });
    Tensor::new(&[g.n, g.cout, g.ho, g.wo], out)
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_dx: bool,
) -> Result<ConvGrads<T>> {
    let g = conv_geom(x.shape(), w.shape(), stride, pad)?;
    if dy.shape() != [g.n, g.cout, g.ho, g.wo] {
        return Err(Error::shape("conv2d_backward", format!("gradient shape {:?}", dy.shape())));
    }
    let p = g.out_pixels();
    let kk = g.patch();
    let in_sz = g.cin * g.h * g.w;
    let xd = x.data();
    let wd = w.data();
    let dyd = dy.data();

    let partials: Vec<(Vec<T>, Vec<T>, Option<Vec<T>>)> = (0..g.n)
        .into_par_iter()
        .map(|n| {
            let xs = &xd[n * in_sz..(n + 1) * in_sz];
            let dys = &dyd[n * g.cout * p..(n + 1) * g.cout * p];
            let mut dw = vec![T::zero(); g.cout * kk];
            let db: Vec<T> = dys.chunks_exact(p).map(|r| r.iter().copied().sum()).collect();
            let dx = if g.pointwise() {
                matmul(g.cout, p, kk, dys, false, xs, true, &mut dw, T::zero());
                need_dx.then(|| {
                    let mut dx = vec![T::zero(); in_sz];
                    matmul(kk, g.cout, p, wd, true, dys, false, &mut dx, T::zero());
                    dx
                })
            } else {
                let mut col = vec![T::zero(); kk * p];
                im2col(&g, xs, &mut col);
                matmul(g.cout, p, kk, dys, false, &col, true, &mut dw, T::zero());
                need_dx.then(|| {
                    matmul(kk, g.cout, p, wd, true, dys, false, &mut col, T::zero());
                    let mut dx = vec![T::zero(); in_sz];
                    col2im_add(&g, &col, &mut dx);
                    dx
                })
            };
            (dw, db, dx)
        })
        .collect();

    // Fixed-order reduction keeps results independent of thread scheduling.
    let mut dw = vec![T::zero(); g.cout * kk];
    let mut db = vec![T::zero(); g.cout];
    let mut dx = need_dx.then(|| Vec::with_capacity(g.n * in_sz));
    for (pw, pb, px) in partials {
        for (a, b) in dw.iter_mut().zip(pw) {
            *a += b;
        }
        for (a, b) in db.iter_mut().zip(pb) {
            *a += b;
        }
        if let (Some(dx), Some(px)) = (dx.as_mut(), px) {
            dx.extend(px);
        }
    }
    Ok(ConvGrads {
        dx: dx.map(|d| Tensor::new(x.shape(), d)).transpose()?,
        dw: Tensor::new(w.shape(), dw)?,
        db: Tensor::new(&[g.cout], db)?,
    })
}

/// Saved state of a batch-norm forward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub train: bool,
}

/// Batch statistics observed in train mode (mean, unbiased variance).
#[derive(Debug, Clone)]
pub struct BnBatchStats<T> {
    pub mean: Vec<T>,
    pub var_unbiased: Vec<T>,
}

fn bn_check<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<[usize; 4]> {
    let [n, c, h, w] = x.dims4("batchnorm2d")?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            "batchnorm2d",
            format!("{c} channels, gamma {:?}, beta {:?}", gamma.shape(), beta.shape()),
        ));
    }
    Ok([n, c, h, w])
}

/// Batch normalization. In train mode batch statistics are used and
/// returned; in eval mode the supplied running statistics are used.
#[allow(clippy::type_complexity)]
pub fn batchnorm2d<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &[T],
    running_var: &[T],
    train: bool,
) -> Result<(Tensor<T>, BnCache<T>, Option<BnBatchStats<T>>)> {
    let [n, c, h, w] = bn_check(x, gamma, beta)?;
    let hw = h * w;
    let m = n * hw;
    if train && m < 2 {
        return Err(Error::shape(
            "batchnorm2d",
            format!("train mode needs at least 2 values per channel, got {m}"),
        ));
    }
    if running_mean.len() != c || running_var.len() != c {
        return Err(Error::shape("batchnorm2d", "running statistics length"));
    }
    let eps = T::from_f(BN_EPS);
    let xd = x.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    let mut stats = None;
    if train {
        let mf = T::from_usize(m).expect("count");
        for ch in 0..c {
            let mut s = T::zero();
            for b in 0..n {
                s += xd[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().copied().sum();
            }
            mean[ch] = s / mf;
            let mut v = T::zero();
            for b in 0..n {
                for &val in &xd[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                    let d = val - mean[ch];
                    v += d * d;
                }
            }
            var[ch] = v / mf;
        }
        let unbiased = T::from_usize(m).expect("count") / T::from_usize(m - 1).expect("count");
        stats = Some(BnBatchStats {
            mean: mean.clone(),
            var_unbiased: var.iter().map(|&v| v * unbiased).collect(),
        });
    } else {
        mean.copy_from_slice(running_mean);
        var.copy_from_slice(running_var);
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); xd.len()];
    let mut y = vec![T::zero(); xd.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            let (g, bt, mu, is) = (gamma.data()[ch], beta.data()[ch], mean[ch], inv_std[ch]);
            for i in base..base + hw {
                let xh = (xd[i] - mu) * is;
                xhat[i] = xh;
                y[i] = g * xh + bt;
            }
        }
    }
    let cache = BnCache {
        xhat: Tensor::new(x.shape(), xhat)?,
        inv_std,
        train,
    };
    Ok((Tensor::new(x.shape(), y)?, cache, stats))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm2d_backward<T: Scalar>(
    cache: &BnCache<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let [n, c, h, w] = dy.dims4("batchnorm2d_backward")?;
    if cache.xhat.shape() != dy.shape() {
        return Err(Error::shape("batchnorm2d_backward", "gradient shape"));
    }
    let hw = h * w;
    let m = T::from_usize(n * hw).expect("count");
    let xh = cache.xhat.data();
    let dyd = dy.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                dgamma[ch] += dyd[i] * xh[i];
                dbeta[ch] += dyd[i];
            }
        }
    }
    let mut dx = vec![T::zero(); dyd.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            let scale = gamma.data()[ch] * cache.inv_std[ch];
            if cache.train {
                let k = scale / m;
                for i in base..base + hw {
                    dx[i] = k * (m * dyd[i] - dbeta[ch] - xh[i] * dgamma[ch]);
                }
            } else {
                for i in base..base + hw {
                    dx[i] = scale * dyd[i];
                }
            }
        }
    }
    Ok((
        Tensor::new(dy.shape(), dx)?,
        Tensor::new(&[c], dgamma)?,
        Tensor::new(&[c], dbeta)?,
    ))
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(x.shape(), data).expect("same shape")
}

/// Nearest-neighbour ×2 upsampling on both spatial axes.
pub fn upsample2x<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4("upsample2x")?;
    let (h2, w2) = (2 * h, 2 * w);
    let xd = x.data();
    let mut out = vec![T::zero(); n * c * h2 * w2];
    for p in 0..n * c {
        let src = &xd[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[y * w2 + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    Tensor::new(&[n, c, h2, w2], out)
}

pub fn upsample2x_backward<T: Scalar>(dy: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h2, w2] = dy.dims4("upsample2x_backward")?;
    let (h, w) = (h2 / 2, w2 / 2);
    let dyd = dy.data();
    let mut dx = vec![T::zero(); n * c * h * w];
    for p in 0..n * c {
        let src = &dyd[p * h2 * w2..(p + 1) * h2 * w2];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[(y / 2) * w + xx / 2] += src[y * w2 + xx];
            }
        }
    }
    Tensor::new(&[n, c, h, w], dx)
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape("add", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let mut out = a.clone();
    out.add_assign(b);
    Ok(out)
}

/// Concatenates `[N,Ci,H,W]` tensors along the channel axis.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat", "no inputs"))?
        .dims4("concat")?;
    let [n, _, h, w] = first;
    let mut total_c = 0;
    for p in parts {
        let [pn, pc, ph, pw] = p.dims4("concat")?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::shape(
                "concat",
                format!("{:?} vs {:?}", p.shape(), parts[0].shape()),
            ));
        }
        total_c += pc;
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(n * total_c * hw);
    for b in 0..n {
        for p in parts {
            let pc = p.shape()[1];
            out.extend_from_slice(&p.data()[b * pc * hw..(b + 1) * pc * hw]);
        }
    }
    Tensor::new(&[n, total_c, h, w], out)
}

pub fn concat_channels_backward<T: Scalar>(
    dy: &Tensor<T>,
    channels: &[usize],
) -> Result<Vec<Tensor<T>>> {
    let [n, c, h, w] = dy.dims4("concat_backward")?;
    if channels.iter().sum::<usize>() != c {
        return Err(Error::shape("concat_backward", "channel split"));
    }
    let hw = h * w;
    let mut outs: Vec<Vec<T>> = channels.iter().map(|&pc| Vec::with_capacity(n * pc * hw)).collect();
    for b in 0..n {
        let mut off = (b * c) * hw;
        for (o, &pc) in outs.iter_mut().zip(channels) {
            o.extend_from_slice(&dy.data()[off..off + pc * hw]);
            off += pc * hw;
        }
    }
    outs.into_iter()
        .zip(channels)
        .map(|(d, &pc)| Tensor::new(&[n, pc, h, w], d))
        .collect()
}
