//! 2-D convolution kernels.
//!
//! Cross-correlation convention (no kernel flip), zero padding. Two forward
//! routes exist: [`conv2d_reference`], a direct nested-loop evaluation kept as
//! the oracle, and [`conv2d_forward`], which lowers each group to im2col + GEMM
//! (or a direct loop for depth-wise groups). Tests hold the two routes together.

use serde::{Deserialize, Serialize};

use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dOptions {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub groups: usize,
}

impl Default for Conv2dOptions {
    fn default() -> Self {
        Self {
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
            groups: 1,
        }
    }
}

impl Conv2dOptions {
    pub fn stride(mut self, s: usize) -> Self {
        self.stride = (s, s);
        self
    }

    pub fn padding(mut self, ph: usize, pw: usize) -> Self {
        self.padding = (ph, pw);
        self
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = (d, d);
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }
}

/// `floor((size + 2·pad − dil·(k−1) − 1) / stride) + 1`, or `None` when the
/// dilated kernel does not fit.
pub fn output_extent(
    size: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dil: usize,
) -> Option<usize> {
    let span = dil * (k - 1) + 1;
    let padded = size + 2 * pad;
    (padded >= span && stride > 0).then(|| (padded - span) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeometry {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub cin_g: usize,
    pub cout_g: usize,
    pub opts: Conv2dOptions,
}

impl ConvGeometry {
    pub fn new(
        input: &[usize],
        weight: &[usize],
        bias: Option<&[usize]>,
        opts: Conv2dOptions,
    ) -> Result<Self> {
        const OP: &str = "conv2d";
        let [n, cin, h, w] = *input else {
            return Err(Error::dim(
                OP,
                "rank",
                format!("input must be N×C×H×W, got {input:?}"),
            ));
        };
        let [cout, cin_g, kh, kw] = *weight else {
            return Err(Error::dim(
                OP,
                "rank",
                format!("weight must be Cout×Cin/g×kh×kw, got {weight:?}"),
            ));
        };
        let g = opts.groups;
        if g == 0 || cin % g != 0 {
            return Err(Error::Config(format!(
                "conv2d: groups {g} must divide input channels {cin}"
            )));
        }
        if cout % g != 0 {
            return Err(Error::Config(format!(
                "conv2d: groups {g} must divide output channels {cout}"
            )));
        }
        if cin_g != cin / g {
            return Err(Error::dim(
                OP,
                "channel",
                format!(
                    "weight expects {cin_g} channels per group, input provides {}",
                    cin / g
                ),
            ));
        }
        if let Some(b) = bias {
            if b != [cout] {
                return Err(Error::dim(
                    OP,
                    "channel",
                    format!("bias shape {b:?} != [{cout}]"),
                ));
            }
        }
        let (sh, sw) = opts.stride;
        let (ph, pw) = opts.padding;
        let (dh, dw) = opts.dilation;
        if sh == 0 || sw == 0 || dh == 0 || dw == 0 {
            return Err(Error::Config(
                "conv2d: stride and dilation must be >= 1".into(),
            ));
        }
        let oh = output_extent(h, kh, sh, ph, dh).ok_or_else(|| {
            Error::dim(
                OP,
                "height",
                format!(
                    "kernel {kh} (dilation {dh}) exceeds padded height {}",
                    h + 2 * ph
                ),
            )
        })?;
        let ow = output_extent(w, kw, sw, pw, dw).ok_or_else(|| {
            Error::dim(
                OP,
                "width",
                format!(
                    "kernel {kw} (dilation {dw}) exceeds padded width {}",
                    w + 2 * pw
                ),
            )
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
            cin_g,
            cout_g: cout / g,
            opts,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.n, self.cout, self.oh, self.ow]
    }

    /// Multiply-accumulates of one forward pass, padding taps included.
    pub fn macs(&self) -> u64 {
        (self.n * self.cout * self.cin_g * self.kh * self.kw * self.oh * self.ow) as u64
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.opts.stride == (1, 1) && self.opts.padding == (0, 0)
    }

    fn is_depthwise(&self) -> bool {
        self.cin_g == 1
    }
}

/// Range `lo..hi` of output positions `o` whose input index `o·stride + offset` lies in `0..in_len`.
fn valid_range(out_len: usize, in_len: usize, stride: usize, offset: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset) + s - 1) / s
    };
    let last = in_len as isize - 1 - offset;
    let hi = if last < 0 { 0 } else { last / s + 1 };
    let lo = (lo as usize).min(out_len);
    let hi = (hi as usize).min(out_len).max(lo);
    (lo, hi)
}

fn check_operands<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    opts: Conv2dOptions,
) -> Result<ConvGeometry> {
    ConvGeometry::new(x.shape(), w.shape(), b.map(|b| b.shape()), opts)
}

/// Direct evaluation of the convolution sum; the oracle for [`conv2d_forward`].
pub fn conv2d_reference<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    opts: Conv2dOptions,
) -> Result<Tensor<T>> {
    conv2d_reference_counted(x, w, b, opts).map(|(y, _)| y)
}

/// [`conv2d_reference`] that also counts every multiply-add it performs,
/// padding taps included.
pub fn conv2d_reference_counted<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    opts: Conv2dOptions,
) -> Result<(Tensor<T>, u64)> {
    let g = check_operands(x, w, b, opts)?;
    let mut out = Tensor::zeros(&g.output_shape());
    let mut macs = 0u64;
    let (sh, sw) = opts.stride;
    let (ph, pw) = opts.padding;
    let (dh, dw) = opts.dilation;
    for n in 0..g.n {
        for oc in 0..g.cout {
            let group = oc / g.cout_g;
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut acc = b.map_or(T::zero(), |b| b.data()[oc]);
                    for c in 0..g.cin_g {
                        let ic = group * g.cin_g + c;
                        for i in 0..g.kh {
                            for j in 0..g.kw {
                                macs += 1;
                                let iy = (oy * sh + i * dh) as isize - ph as isize;
                                let ix = (ox * sw + j * dw) as isize - pw as isize;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                acc += w.get(&[oc, c, i, j])
                                    * x.get(&[n, ic, iy as usize, ix as usize]);
                            }
                        }
                    }
                    out.set(&[n, oc, oy, ox], acc);
                }
            }
        }
    }
    Ok((out, macs))
}

/// Fills `cols` (K × P, K = cin_g·kh·kw, P = oh·ow) from one group of one sample.
fn im2col<T: Scalar>(g: &ConvGeometry, x: &[T], cols: &mut [T]) {
    let (sh, sw) = g.opts.stride;
    let (ph, pw) = g.opts.padding;
    let (dh, dw) = g.opts.dilation;
    let p = g.oh * g.ow;
    for c in 0..g.cin_g {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            let (ylo, yhi) = valid_range(g.oh, g.h, sh, (i * dh) as isize - ph as isize);
            for j in 0..g.kw {
                let row = &mut cols[((c * g.kh + i) * g.kw + j) * p..][..p];
                let xoff = (j * dw) as isize - pw as isize;
                let (xlo, xhi) = valid_range(g.ow, g.w, sw, xoff);
                for oy in 0..g.oh {
                    let dst = &mut row[oy * g.ow..(oy + 1) * g.ow];
                    if oy < ylo || oy >= yhi {
                        dst.fill(T::zero());
                        continue;
                    }
                    let iy = oy * sh + i * dh - ph;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    dst[..xlo].fill(T::zero());
                    dst[xhi..].fill(T::zero());
                    for ox in xlo..xhi {
                        dst[ox] = src[(ox as isize * sw as isize + xoff) as usize];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `cols` back into the input gradient.
fn col2im<T: Scalar>(g: &ConvGeometry, cols: &[T], dx: &mut [T]) {
    let (sh, sw) = g.opts.stride;
    let (ph, pw) = g.opts.padding;
    let (dh, dw) = g.opts.dilation;
    let p = g.oh * g.ow;
    for c in 0..g.cin_g {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            let (ylo, yhi) = valid_range(g.oh, g.h, sh, (i * dh) as isize - ph as isize);
            for j in 0..g.kw {
                let row = &cols[((c * g.kh + i) * g.kw + j) * p..][..p];
                let xoff = (j * dw) as isize - pw as isize;
                let (xlo, xhi) = valid_range(g.ow, g.w, sw, xoff);
                for oy in ylo..yhi {
                    let iy = oy * sh + i * dh - ph;
                    let src = &row[oy * g.ow..(oy + 1) * g.ow];
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    for ox in xlo..xhi {
                        dst[(ox as isize * sw as isize + xoff) as usize] += src[ox];
                    }
                }
            }
        }
    }
}

/// Depth-wise style group (one input channel): out[oc] += w[oc] ⋆ x[ic].
fn depthwise_forward<T: Scalar>(g: &ConvGeometry, x: &[T], w: &[T], out: &mut [T]) {
    let (sh, sw) = g.opts.stride;
    let (ph, pw) = g.opts.padding;
    let (dh, dw) = g.opts.dilation;
    for i in 0..g.kh {
        let (ylo, yhi) = valid_range(g.oh, g.h, sh, (i * dh) as isize - ph as isize);
        for j in 0..g.kw {
            let wv = w[i * g.kw + j];
            let xoff = (j * dw) as isize - pw as isize;
            let (xlo, xhi) = valid_range(g.ow, g.w, sw, xoff);
            if xlo == xhi {
                continue;
            }
            for oy in ylo..yhi {
                let iy = oy * sh + i * dh - ph;
                let src = &x[iy * g.w..(iy + 1) * g.w];
                let dst = &mut out[oy * g.ow..(oy + 1) * g.ow];
                if sw == 1 {
                    let start = (xlo as isize + xoff) as usize;
                    for (d, &s) in dst[xlo..xhi]
                        .iter_mut()
                        .zip(&src[start..start + (xhi - xlo)])
                    {
                        *d += wv * s;
                    }
                } else {
                    for ox in xlo..xhi {
                        dst[ox] += wv * src[(ox as isize * sw as isize + xoff) as usize];
                    }
                }
            }
        }
    }
}

fn depthwise_backward<T: Scalar>(
    g: &ConvGeometry,
    x: &[T],
    w: &[T],
    dy: &[T],
    dx: Option<&mut [T]>,
    dwt: &mut [T],
) {
    let (sh, sw) = g.opts.stride;
    let (ph, pw) = g.opts.padding;
    let (dh, dw) = g.opts.dilation;
    let mut dx = dx;
    for i in 0..g.kh {
        let (ylo, yhi) = valid_range(g.oh, g.h, sh, (i * dh) as isize - ph as isize);
        for j in 0..g.kw {
            let wv = w[i * g.kw + j];
            let xoff = (j * dw) as isize - pw as isize;
            let (xlo, xhi) = valid_range(g.ow, g.w, sw, xoff);
            let mut acc = T::zero();
            for oy in ylo..yhi {
                let iy = oy * sh + i * dh - ph;
                let grow = &dy[oy * g.ow..(oy + 1) * g.ow];
                let xrow = &x[iy * g.w..(iy + 1) * g.w];
                for ox in xlo..xhi {
                    acc += grow[ox] * xrow[(ox as isize * sw as isize + xoff) as usize];
                }
                if let Some(dx) = dx.as_deref_mut() {
                    let drow = &mut dx[iy * g.w..(iy + 1) * g.w];
                    for ox in xlo..xhi {
                        drow[(ox as isize * sw as isize + xoff) as usize] += wv * grow[ox];
                    }
                }
            }
            dwt[i * g.kw + j] += acc;
        }
    }
}

/// Fast forward convolution: im2col + GEMM per group, direct loops for
/// single-input-channel groups.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    opts: Conv2dOptions,
) -> Result<Tensor<T>> {
    let g = check_operands(x, w, b, opts)?;
    let groups = opts.groups;
    let p = g.oh * g.ow;
    let k = g.cin_g * g.kh * g.kw;
    let mut out = vec![T::zero(); g.n * g.cout * p];
    let mut cols = if g.is_pointwise() || g.is_depthwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * p]
    };
    let xd = x.data();
    let wd = w.data();
    let in_plane = g.h * g.w;
    for n in 0..g.n {
        for grp in 0..groups {
            let xs = &xd[(n * g.cin + grp * g.cin_g) * in_plane..][..g.cin_g * in_plane];
            let ws = &wd[grp * g.cout_g * k..][..g.cout_g * k];
            let os = &mut out[(n * g.cout + grp * g.cout_g) * p..][..g.cout_g * p];
            if g.is_depthwise() {
                for oc in 0..g.cout_g {
                    depthwise_forward(
                        &g,
                        xs,
                        &ws[oc * k..(oc + 1) * k],
                        &mut os[oc * p..(oc + 1) * p],
                    );
                }
                continue;
            }
            let rhs: &[T] = if g.is_pointwise() {
                xs
            } else {
                im2col(&g, xs, &mut cols);
                &cols
            };
            T::gemm(
                g.cout_g,
                k,
                p,
                T::one(),
                ws,
                k,
                1,
                rhs,
                p,
                1,
                T::zero(),
                os,
                p,
                1,
            );
        }
    }
    if let Some(b) = b {
        for chunk in out.chunks_mut(p).enumerate() {
            let bias = b.data()[chunk.0 % g.cout];
            chunk.1.iter_mut().for_each(|v| *v += bias);
        }
    }
    Ok(Tensor::from_parts(g.output_shape().to_vec(), out))
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

/// Gradients of [`conv2d_forward`] with respect to input, weight and (optionally) bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    opts: Conv2dOptions,
    dy: &Tensor<T>,
    need_input: bool,
    need_bias: bool,
) -> Result<ConvGrads<T>> {
    let g = check_operands(x, w, None, opts)?;
    if dy.shape() != g.output_shape() {
        return Err(Error::dim(
            "conv2d_backward",
            "all",
            format!("gradient {:?} != output {:?}", dy.shape(), g.output_shape()),
        ));
    }
    let p = g.oh * g.ow;
    let k = g.cin_g * g.kh * g.kw;
    let in_plane = g.h * g.w;
    let mut dx = need_input.then(|| vec![T::zero(); x.numel()]);
    let mut dw = vec![T::zero(); w.numel()];
    let mut cols = if g.is_pointwise() || g.is_depthwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * p]
    };
    let mut dcols = if g.is_pointwise() || g.is_depthwise() || !need_input {
        Vec::new()
    } else {
        vec![T::zero(); k * p]
    };
    let (xd, wd, gd) = (x.data(), w.data(), dy.data());
    for n in 0..g.n {
        for grp in 0..opts.groups {
            let xoff = (n * g.cin + grp * g.cin_g) * in_plane;
            let xs = &xd[xoff..][..g.cin_g * in_plane];
            let ws = &wd[grp * g.cout_g * k..][..g.cout_g * k];
            let dws = &mut dw[grp * g.cout_g * k..][..g.cout_g * k];
            let gs = &gd[(n * g.cout + grp * g.cout_g) * p..][..g.cout_g * p];
            if g.is_depthwise() {
                for oc in 0..g.cout_g {
                    let dxs = dx.as_mut().map(|d| &mut d[xoff..xoff + in_plane]);
                    depthwise_backward(
                        &g,
                        xs,
                        &ws[oc * k..(oc + 1) * k],
                        &gs[oc * p..(oc + 1) * p],
                        dxs,
                        &mut dws[oc * k..(oc + 1) * k],
                    );
                }
                continue;
            }
            let rhs: &[T] = if g.is_pointwise() {
                xs
            } else {
                im2col(&g, xs, &mut cols);
                &cols
            };
            // dW_g += dY_g · colsᵀ
            T::gemm(
                g.cout_g,
                p,
                k,
                T::one(),
                gs,
                p,
                1,
                rhs,
                1,
                p,
                T::one(),
                dws,
                k,
                1,
            );
            if let Some(dx) = dx.as_mut() {
                let dxs = &mut dx[xoff..][..g.cin_g * in_plane];
                if g.is_pointwise() {
                    T::gemm(
                        k,
                        g.cout_g,
                        p,
                        T::one(),
                        ws,
                        1,
                        k,
                        gs,
                        p,
                        1,
                        T::one(),
                        dxs,
                        p,
                        1,
                    );
                } else {
                    T::gemm(
                        k,
                        g.cout_g,
                        p,
                        T::one(),
                        ws,
                        1,
                        k,
                        gs,
                        p,
                        1,
                        T::zero(),
                        &mut dcols,
                        p,
                        1,
                    );
                    col2im(&g, &dcols, dxs);
                }
            }
        }
    }
    let bias = need_bias.then(|| {
        let mut db = vec![T::zero(); g.cout];
        for (i, chunk) in gd.chunks(p).enumerate() {
            db[i % g.cout] += chunk.iter().copied().sum::<T>();
        }
        Tensor::from_parts(vec![g.cout], db)
    });
    Ok(ConvGrads {
        input: dx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
        weight: Tensor::from_parts(w.shape().to_vec(), dw),
        bias,
    })
}
