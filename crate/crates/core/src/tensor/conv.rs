//! Direct convolution and pooling kernels.
//!
//! Plain gather/scatter loops over row-major buffers. Parallel work is split
//! over disjoint output (or gradient) slices only, so results are bit-stable
//! regardless of thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};

use super::Element;

/// Geometry of one 2-D convolution: kernel, stride, zero padding, groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(kernel: (usize, usize), stride: (usize, usize), pad: (usize, usize)) -> Self {
        ConvSpec {
            kernel_h: kernel.0,
            kernel_w: kernel.1,
            stride_h: stride.0,
            stride_w: stride.1,
            pad_h: pad.0,
            pad_w: pad.1,
            groups: 1,
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    /// Pointwise 1x1, stride 1 unless given, no padding.
    pub fn pointwise(stride: usize) -> Self {
        ConvSpec::new((1, 1), (stride, stride), (0, 0))
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(Error::invalid("conv kernel extent must be positive"));
        }
        if self.stride_h == 0 || self.stride_w == 0 {
            return Err(Error::invalid("conv stride must be positive"));
        }
        if self.groups == 0 {
            return Err(Error::invalid("conv groups must be positive"));
        }
        Ok(())
    }

    /// Output spatial extents, or an invalid-argument error when one collapses.
    pub fn out_hw(&self, in_h: usize, in_w: usize) -> Result<(usize, usize)> {
        let oh = out_extent("height", in_h, self.kernel_h, self.stride_h, self.pad_h)?;
        let ow = out_extent("width", in_w, self.kernel_w, self.stride_w, self.pad_w)?;
        Ok((oh, ow))
    }
}

pub(crate) fn out_extent(
    name: &str,
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(Error::invalid(format!(
            "output {name} collapses to zero: input {input} + 2*pad {pad} < kernel {kernel}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Resolved shapes shared by the conv forward/backward kernels.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub oh: usize,
    pub ow: usize,
    pub cin_g: usize,
    pub cout_g: usize,
}

pub(crate) fn resolve_conv(
    x_shape: &[usize],
    w_shape: &[usize],
    bias_len: Option<usize>,
    spec: &ConvSpec,
) -> Result<ConvDims> {
    spec.validate()?;
    let [n, cin, h, w] = shape4("conv2d input", x_shape)?;
    let [cout, w_cin, kh, kw] = shape4("conv2d weight", w_shape)?;
    if kh != spec.kernel_h || kw != spec.kernel_w {
        return Err(Error::invalid(format!(
            "conv2d weight kernel dims {kh}x{kw} do not match spec {}x{}",
            spec.kernel_h, spec.kernel_w
        )));
    }
    if cin % spec.groups != 0 {
        return Err(Error::invalid(format!(
            "conv2d input channels {cin} not divisible by groups {}",
            spec.groups
        )));
    }
    if cout % spec.groups != 0 {
        return Err(Error::invalid(format!(
            "conv2d output channels {cout} not divisible by groups {}",
            spec.groups
        )));
    }
    let cin_g = cin / spec.groups;
    if w_cin != cin_g {
        return Err(Error::invalid(format!(
            "conv2d weight channel dim {w_cin} != in_channels/groups = {cin_g}"
        )));
    }
    if let Some(bl) = bias_len {
        if bl != cout {
            return Err(Error::invalid(format!(
                "conv2d bias length {bl} != out_channels {cout}"
            )));
        }
    }
    let (oh, ow) = spec.out_hw(h, w)?;
    Ok(ConvDims {
        n,
        cin,
        h,
        w,
        cout,
        oh,
        ow,
        cin_g,
        cout_g: cout / spec.groups,
    })
}

fn shape4(what: &str, shape: &[usize]) -> Result<[usize; 4]> {
    match shape {
        &[a, b, c, d] => Ok([a, b, c, d]),
        other => Err(Error::invalid(format!(
            "{what} must be 4-D, got shape {other:?}"
        ))),
    }
}

/// Valid output index range `[lo, hi)` for one kernel tap: all `o` in the
/// range satisfy `0 <= o*stride + k - pad < input`.
#[inline]
fn valid_out_range(input: usize, output: usize, stride: usize, pad: usize, k: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo_num = pad as isize - k as isize;
    let lo = if lo_num <= 0 {
        0
    } else {
        ((lo_num + s - 1) / s) as usize
    };
    let hi_num = input as isize - 1 + pad as isize - k as isize;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = (hi_num / s) as usize + 1;
    (lo.min(output), hi.min(output))
}

// Below this many multiply-adds the rayon dispatch overhead dominates.
const PAR_THRESHOLD: usize = 1 << 14;

fn maybe_par<T: Send>(data: &mut [T], chunk: usize, work: usize, f: impl Fn(usize, &mut [T]) + Sync) {
    if work >= PAR_THRESHOLD {
        data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    } else {
        data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

pub(crate) fn conv2d_forward<E: Element>(
    x: &[E],
    wt: &[E],
    bias: Option<&[E]>,
    d: &ConvDims,
    spec: &ConvSpec,
) -> Vec<E> {
    let ConvDims { n, cin, h, w, cout, oh, ow, cin_g, cout_g } = *d;
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);
    let (sh, sw) = (spec.stride_h, spec.stride_w);
    let (ph, pw) = (spec.pad_h, spec.pad_w);
    let mut out = vec![E::zero(); n * cout * oh * ow];
    let work = out.len() * cin_g * kh * kw;
    maybe_par(&mut out, oh * ow, work, |idx, o| {
        let n_i = idx / cout;
        let co = idx % cout;
        if let Some(b) = bias {
            o.fill(b[co]);
        }
        let g = co / cout_g;
        for cig in 0..cin_g {
            let ci = g * cin_g + cig;
            let xbase = (n_i * cin + ci) * h * w;
            let wbase = (co * cin_g + cig) * kh * kw;
            for kh_i in 0..kh {
                let (oh_lo, oh_hi) = valid_out_range(h, oh, sh, ph, kh_i);
                for kw_i in 0..kw {
                    let wv = wt[wbase + kh_i * kw + kw_i];
                    let (ow_lo, ow_hi) = valid_out_range(w, ow, sw, pw, kw_i);
                    if ow_lo >= ow_hi {
                        continue;
                    }
                    for oh_i in oh_lo..oh_hi {
                        let ih = oh_i * sh + kh_i - ph;
                        let xrow = &x[xbase + ih * w..][..w];
                        let orow = &mut o[oh_i * ow..][..ow];
                        if sw == 1 {
                            let iw0 = ow_lo + kw_i - pw;
                            let len = ow_hi - ow_lo;
                            let xs = &xrow[iw0..][..len];
                            for (ov, xv) in orow[ow_lo..][..len].iter_mut().zip(xs) {
                                *ov += wv * *xv;
                            }
                        } else {
                            for ow_i in ow_lo..ow_hi {
                                orow[ow_i] += wv * xrow[ow_i * sw + kw_i - pw];
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

pub(crate) fn conv2d_backward_input<E: Element>(
    gout: &[E],
    wt: &[E],
    d: &ConvDims,
    spec: &ConvSpec,
) -> Vec<E> {
    let ConvDims { n, cin, h, w, cout, oh, ow, cin_g, cout_g } = *d;
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);
    let (sh, sw) = (spec.stride_h, spec.stride_w);
    let (ph, pw) = (spec.pad_h, spec.pad_w);
    let mut gin = vec![E::zero(); n * cin * h * w];
    let work = gout.len() * cin_g * kh * kw;
    maybe_par(&mut gin, h * w, work, |idx, gi| {
        let n_i = idx / cin;
        let ci = idx % cin;
        let g = ci / cin_g;
        let cig = ci % cin_g;
        for cog in 0..cout_g {
            let co = g * cout_g + cog;
            let gobase = (n_i * cout + co) * oh * ow;
            let wbase = (co * cin_g + cig) * kh * kw;
            for kh_i in 0..kh {
                let (oh_lo, oh_hi) = valid_out_range(h, oh, sh, ph, kh_i);
                for kw_i in 0..kw {
                    let wv = wt[wbase + kh_i * kw + kw_i];
                    let (ow_lo, ow_hi) = valid_out_range(w, ow, sw, pw, kw_i);
                    if ow_lo >= ow_hi {
                        continue;
                    }
                    for oh_i in oh_lo..oh_hi {
                        let ih = oh_i * sh + kh_i - ph;
                        let gorow = &gout[gobase + oh_i * ow..][..ow];
                        let girow = &mut gi[ih * w..][..w];
                        if sw == 1 {
                            let iw0 = ow_lo + kw_i - pw;
                            let len = ow_hi - ow_lo;
                            for (gv, go) in girow[iw0..][..len].iter_mut().zip(&gorow[ow_lo..][..len]) {
                                *gv += wv * *go;
                            }
                        } else {
                            for ow_i in ow_lo..ow_hi {
                                girow[ow_i * sw + kw_i - pw] += wv * gorow[ow_i];
                            }
                        }
                    }
                }
            }
        }
    });
    gin
}

pub(crate) fn conv2d_backward_weight<E: Element>(
    gout: &[E],
    x: &[E],
    d: &ConvDims,
    spec: &ConvSpec,
) -> Vec<E> {
    let ConvDims { n, cin, h, w, cout, oh, ow, cin_g, cout_g } = *d;
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);
    let (sh, sw) = (spec.stride_h, spec.stride_w);
    let (ph, pw) = (spec.pad_h, spec.pad_w);
    let mut gw = vec![E::zero(); cout * cin_g * kh * kw];
    let work = gout.len() * cin_g * kh * kw;
    maybe_par(&mut gw, cin_g * kh * kw, work, |co, gwc| {
        let g = co / cout_g;
        for n_i in 0..n {
            let gobase = (n_i * cout + co) * oh * ow;
            for cig in 0..cin_g {
                let ci = g * cin_g + cig;
                let xbase = (n_i * cin + ci) * h * w;
                for kh_i in 0..kh {
                    let (oh_lo, oh_hi) = valid_out_range(h, oh, sh, ph, kh_i);
                    for kw_i in 0..kw {
                        let (ow_lo, ow_hi) = valid_out_range(w, ow, sw, pw, kw_i);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        let mut acc = E::zero();
                        for oh_i in oh_lo..oh_hi {
                            let ih = oh_i * sh + kh_i - ph;
                            let xrow = &x[xbase + ih * w..][..w];
                            let gorow = &gout[gobase + oh_i * ow..][..ow];
                            if sw == 1 {
                                let iw0 = ow_lo + kw_i - pw;
                                let len = ow_hi - ow_lo;
                                for (xv, go) in xrow[iw0..][..len].iter().zip(&gorow[ow_lo..][..len]) {
                                    acc += *xv * *go;
                                }
                            } else {
                                for ow_i in ow_lo..ow_hi {
                                    acc += xrow[ow_i * sw + kw_i - pw] * gorow[ow_i];
                                }
                            }
                        }
                        gwc[(cig * kh + kh_i) * kw + kw_i] += acc;
                    }
                }
            }
        }
    });
    gw
}

pub(crate) fn conv2d_backward_bias<E: Element>(gout: &[E], d: &ConvDims) -> Vec<E> {
    let ConvDims { n, cout, oh, ow, .. } = *d;
    let plane = oh * ow;
    let mut gb = vec![E::zero(); cout];
    for n_i in 0..n {
        for co in 0..cout {
            let s: E = gout[(n_i * cout + co) * plane..][..plane].iter().copied().sum();
            gb[co] += s;
        }
    }
    gb
}

/// Windowed max with argmax recording; ties go to the first element in
/// row-major window scan order so backward routing is deterministic.
pub(crate) fn max_pool2d_forward<E: Element>(
    x: &[E],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kernel: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<(Vec<E>, Vec<usize>, usize, usize)> {
    let (kh, kw) = kernel;
    let (sh, sw) = stride;
    let (ph, pw) = pad;
    if kh == 0 || kw == 0 || sh == 0 || sw == 0 {
        return Err(Error::invalid("max_pool2d kernel and stride must be positive"));
    }
    if 2 * ph > kh || 2 * pw > kw {
        return Err(Error::invalid(format!(
            "max_pool2d padding ({ph},{pw}) must be at most half the kernel ({kh},{kw})"
        )));
    }
    let oh = out_extent("height", h, kh, sh, ph)?;
    let ow = out_extent("width", w, kw, sw, pw)?;
    let mut out = vec![E::zero(); n * c * oh * ow];
    let mut argmax = vec![0usize; out.len()];
    for nc in 0..n * c {
        let xplane = &x[nc * h * w..][..h * w];
        let obase = nc * oh * ow;
        for oh_i in 0..oh {
            for ow_i in 0..ow {
                let mut best: Option<(E, usize)> = None;
                for kh_i in 0..kh {
                    let ih = oh_i * sh + kh_i;
                    if ih < ph || ih - ph >= h {
                        continue;
                    }
                    let ih = ih - ph;
                    for kw_i in 0..kw {
                        let iw = ow_i * sw + kw_i;
                        if iw < pw || iw - pw >= w {
                            continue;
                        }
                        let iw = iw - pw;
                        let v = xplane[ih * w + iw];
                        if best.map_or(true, |(bv, _)| v > bv) {
                            best = Some((v, nc * h * w + ih * w + iw));
                        }
                    }
                }
                let (v, idx) = best.expect("pool window never empty with pad <= kernel/2");
                out[obase + oh_i * ow + ow_i] = v;
                argmax[obase + oh_i * ow + ow_i] = idx;
            }
        }
    }
    Ok((out, argmax, oh, ow))
}
