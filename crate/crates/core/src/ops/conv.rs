//! Convolutions: standard and grouped (im2col + gemm), depthwise (direct
//! loops), pointwise (gemm) and the masked 1×1 learned group convolution.
//!
//! Index convention is zero-based cross-correlation with explicit zero
//! padding: `y[n, o, r, c] = Σ w[o, i, u, v] · x[n, i, r·s + u − p, c·s + v − p]`.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tape::{Backward, BackwardCtx, Tape, Var};
use crate::tensor::{matmul, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConvMode {
    Standard,
    Grouped,
    Depthwise,
    Pointwise,
}

/// Square-kernel convolution hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvConfig {
    pub kernel_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
    pub stride: usize,
    pub padding: usize,
    pub mode: ConvMode,
}

impl ConvConfig {
    pub fn standard(in_channels: usize, out_channels: usize, kernel_size: usize, padding: usize) -> Self {
        ConvConfig {
            kernel_size,
            in_channels,
            out_channels,
            groups: 1,
            stride: 1,
            padding,
            mode: ConvMode::Standard,
        }
    }

    pub fn grouped(
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        groups: usize,
        padding: usize,
    ) -> Self {
        ConvConfig {
            groups,
            mode: ConvMode::Grouped,
            ..Self::standard(in_channels, out_channels, kernel_size, padding)
        }
    }

    pub fn depthwise(channels: usize, kernel_size: usize, padding: usize) -> Self {
        ConvConfig {
            groups: channels,
            mode: ConvMode::Depthwise,
            ..Self::standard(channels, channels, kernel_size, padding)
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        ConvConfig {
            mode: ConvMode::Pointwise,
            ..Self::standard(in_channels, out_channels, 1, 0)
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ConvConfig {
            kernel_size: h,
            in_channels: i,
            out_channels: o,
            groups: g,
            stride,
            ..
        } = *self;
        if h == 0 || i == 0 || o == 0 || g == 0 || stride == 0 {
            return Err(Error::shape(format!("{self:?}: extents must be positive")));
        }
        match self.mode {
            ConvMode::Standard if g != 1 => Err(Error::shape("standard convolution needs groups = 1")),
            ConvMode::Depthwise if g != i || o != i => Err(Error::shape(format!(
                "depthwise convolution needs groups = in = out, got G={g} I={i} O={o}"
            ))),
            ConvMode::Pointwise if h != 1 || g != 1 || self.padding != 0 || stride != 1 => Err(Error::shape(
                "pointwise convolution needs a 1×1 kernel, groups = 1, stride 1 and no padding",
            )),
            _ if i % g != 0 || o % g != 0 => Err(Error::shape(format!(
                "channels I={i}, O={o} not divisible by groups G={g}"
            ))),
            _ => Ok(()),
        }
    }

    /// `floor((d + 2·padding − kernel) / stride) + 1`.
    pub fn output_extent(&self, input: usize) -> Result<usize> {
        let padded = input + 2 * self.padding;
        if padded < self.kernel_size {
            return Err(Error::shape(format!(
                "kernel {} larger than padded input {padded}",
                self.kernel_size
            )));
        }
        Ok((padded - self.kernel_size) / self.stride + 1)
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        let h = self.kernel_size;
        match self.mode {
            ConvMode::Depthwise => vec![self.in_channels, h, h],
            ConvMode::Pointwise => vec![self.out_channels, self.in_channels],
            _ => vec![self.out_channels, self.in_channels / self.groups, h, h],
        }
    }

    pub fn weight_len(&self) -> usize {
        self.weight_shape().iter().product()
    }
}

/// Batch, channels, height, width of an image tensor.
pub(crate) fn image_dims(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::shape(format!("expected (batch, channels, height, width), got {shape:?}"))),
    }
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    batch: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn new(cfg: &ConvConfig, x_shape: &[usize]) -> Result<Self> {
        cfg.validate()?;
        let (batch, c, in_h, in_w) = image_dims(x_shape)?;
        if c != cfg.in_channels {
            return Err(Error::shape(format!(
                "input has {c} channels, convolution expects {}",
                cfg.in_channels
            )));
        }
        Ok(Geometry {
            batch,
            in_h,
            in_w,
            out_h: cfg.output_extent(in_h)?,
            out_w: cfg.output_extent(in_w)?,
        })
    }

    fn in_plane(&self) -> usize {
        self.in_h * self.in_w
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }
}

fn check_weight<T: Real>(cfg: &ConvConfig, w: &Tensor<T>) -> Result<()> {
    let expected = cfg.weight_shape();
    if w.shape() != expected.as_slice() {
        return Err(Error::shape(format!(
            "{:?} convolution weight must be {expected:?}, got {:?}",
            cfg.mode,
            w.shape()
        )));
    }
    Ok(())
}

/// Valid output range `[lo, hi)` along one axis for kernel offset `k`.
fn valid_range(k: usize, stride: usize, pad: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    // need 0 <= o*s + k - p < in_len
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if in_len + pad > k {
        ((in_len + pad - k - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col<T: Real>(x: &[T], channels: usize, cfg: &ConvConfig, geo: &Geometry, col: &mut [T]) {
    let (h, s, p) = (cfg.kernel_size, cfg.stride, cfg.padding);
    let plane = geo.out_plane();
    col.iter_mut().for_each(|v| *v = T::zero());
    for c in 0..channels {
        let xc = &x[c * geo.in_plane()..(c + 1) * geo.in_plane()];
        for u in 0..h {
            let (r0, r1) = valid_range(u, s, p, geo.in_h, geo.out_h);
            for v in 0..h {
                let (c0, c1) = valid_range(v, s, p, geo.in_w, geo.out_w);
                let row = &mut col[((c * h + u) * h + v) * plane..][..plane];
                for r in r0..r1 {
                    let iy = r * s + u - p;
                    let dst = &mut row[r * geo.out_w..(r + 1) * geo.out_w];
                    let src = &xc[iy * geo.in_w..(iy + 1) * geo.in_w];
                    for cc in c0..c1 {
                        dst[cc] = src[cc * s + v - p];
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], channels: usize, cfg: &ConvConfig, geo: &Geometry, dx: &mut [T]) {
    let (h, s, p) = (cfg.kernel_size, cfg.stride, cfg.padding);
    let plane = geo.out_plane();
    for c in 0..channels {
        let dxc = &mut dx[c * geo.in_plane()..(c + 1) * geo.in_plane()];
        for u in 0..h {
            let (r0, r1) = valid_range(u, s, p, geo.in_h, geo.out_h);
            for v in 0..h {
                let (c0, c1) = valid_range(v, s, p, geo.in_w, geo.out_w);
                let row = &col[((c * h + u) * h + v) * plane..][..plane];
                for r in r0..r1 {
                    let iy = r * s + u - p;
                    let src = &row[r * geo.out_w..(r + 1) * geo.out_w];
                    let dst = &mut dxc[iy * geo.in_w..(iy + 1) * geo.in_w];
                    for cc in c0..c1 {
                        dst[cc * s + v - p] += src[cc];
                    }
                }
            }
        }
    }
}

fn is_unit_kernel(cfg: &ConvConfig) -> bool {
    cfg.kernel_size == 1 && cfg.stride == 1 && cfg.padding == 0
}

/// Standard or grouped convolution; weight `(O, I/G, H, H)`.
fn grouped_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, cfg: &ConvConfig) -> Result<Tensor<T>> {
    let geo = Geometry::new(cfg, x.shape())?;
    check_weight(cfg, w)?;
    let g = cfg.groups;
    let (ci, co) = (cfg.in_channels / g, cfg.out_channels / g);
    let kk = ci * cfg.kernel_size * cfg.kernel_size;
    let plane = geo.out_plane();
    let mut out = vec![T::zero(); geo.batch * cfg.out_channels * plane];
    let mut col = if is_unit_kernel(cfg) { Vec::new() } else { vec![T::zero(); kk * plane] };
    for n in 0..geo.batch {
        let xn = &x.data()[n * cfg.in_channels * geo.in_plane()..][..cfg.in_channels * geo.in_plane()];
        for gi in 0..g {
            let xg = &xn[gi * ci * geo.in_plane()..(gi + 1) * ci * geo.in_plane()];
            let b: &[T] = if is_unit_kernel(cfg) {
                xg
            } else {
                im2col(xg, ci, cfg, &geo, &mut col);
                &col
            };
            let wg = &w.data()[gi * co * kk..(gi + 1) * co * kk];
            let yg = &mut out[(n * cfg.out_channels + gi * co) * plane..][..co * plane];
            matmul(co, kk, plane, wg, false, b, false, yg, false);
        }
    }
    Tensor::from_vec(&[geo.batch, cfg.out_channels, geo.out_h, geo.out_w], out)
}

fn grouped_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    cfg: &ConvConfig,
    dy: &[T],
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let geo = Geometry::new(cfg, x.shape()).expect("validated in forward");
    let g = cfg.groups;
    let (ci, co) = (cfg.in_channels / g, cfg.out_channels / g);
    let kk = ci * cfg.kernel_size * cfg.kernel_size;
    let plane = geo.out_plane();
    let unit = is_unit_kernel(cfg);
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.len()]);
    let mut col = if unit { Vec::new() } else { vec![T::zero(); kk * plane] };
    let mut dcol = if unit || !need_dx { Vec::new() } else { vec![T::zero(); kk * plane] };
    for n in 0..geo.batch {
        let x_off = n * cfg.in_channels * geo.in_plane();
        for gi in 0..g {
            let g_off = x_off + gi * ci * geo.in_plane();
            let xg = &x.data()[g_off..g_off + ci * geo.in_plane()];
            let dyg = &dy[(n * cfg.out_channels + gi * co) * plane..][..co * plane];
            let wg = &w.data()[gi * co * kk..(gi + 1) * co * kk];
            if let Some(dw) = dw.as_mut() {
                let b: &[T] = if unit {
                    xg
                } else {
                    im2col(xg, ci, cfg, &geo, &mut col);
                    &col
                };
                let dwg = &mut dw[gi * co * kk..(gi + 1) * co * kk];
                matmul(co, plane, kk, dyg, false, b, true, dwg, true);
            }
            if let Some(dx) = dx.as_mut() {
                let dxg = &mut dx[g_off..g_off + ci * geo.in_plane()];
                if unit {
                    matmul(kk, co, plane, wg, true, dyg, false, dxg, true);
                } else {
                    matmul(kk, co, plane, wg, true, dyg, false, &mut dcol, false);
                    col2im(&dcol, ci, cfg, &geo, dxg);
                }
            }
        }
    }
    (dx, dw)
}

fn depthwise_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, cfg: &ConvConfig) -> Result<Tensor<T>> {
    let geo = Geometry::new(cfg, x.shape())?;
    check_weight(cfg, w)?;
    let (h, s, p) = (cfg.kernel_size, cfg.stride, cfg.padding);
    let c = cfg.in_channels;
    let mut out = vec![T::zero(); geo.batch * c * geo.out_plane()];
    for n in 0..geo.batch {
        for ch in 0..c {
            let xc = &x.data()[(n * c + ch) * geo.in_plane()..][..geo.in_plane()];
            let yc = &mut out[(n * c + ch) * geo.out_plane()..][..geo.out_plane()];
            let wc = &w.data()[ch * h * h..(ch + 1) * h * h];
            for u in 0..h {
                let (r0, r1) = valid_range(u, s, p, geo.in_h, geo.out_h);
                for v in 0..h {
                    let (c0, c1) = valid_range(v, s, p, geo.in_w, geo.out_w);
                    let k = wc[u * h + v];
                    for r in r0..r1 {
                        let iy = r * s + u - p;
                        let dst = &mut yc[r * geo.out_w..(r + 1) * geo.out_w];
                        let src = &xc[iy * geo.in_w..(iy + 1) * geo.in_w];
                        if s == 1 {
                            let src = &src[c0 + v - p..c1 + v - p];
                            for (d, xv) in dst[c0..c1].iter_mut().zip(src) {
                                *d += k * *xv;
                            }
                        } else {
                            for cc in c0..c1 {
                                dst[cc] += k * src[cc * s + v - p];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[geo.batch, c, geo.out_h, geo.out_w], out)
}

fn depthwise_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    cfg: &ConvConfig,
    dy: &[T],
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let geo = Geometry::new(cfg, x.shape()).expect("validated in forward");
    let (h, s, p) = (cfg.kernel_size, cfg.stride, cfg.padding);
    let c = cfg.in_channels;
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.len()]);
    for n in 0..geo.batch {
        for ch in 0..c {
            let x_off = (n * c + ch) * geo.in_plane();
            let xc = &x.data()[x_off..x_off + geo.in_plane()];
            let dyc = &dy[(n * c + ch) * geo.out_plane()..][..geo.out_plane()];
            for u in 0..h {
                let (r0, r1) = valid_range(u, s, p, geo.in_h, geo.out_h);
                for v in 0..h {
                    let (c0, c1) = valid_range(v, s, p, geo.in_w, geo.out_w);
                    let widx = ch * h * h + u * h + v;
                    let k = w.data()[widx];
                    let mut acc = T::zero();
                    for r in r0..r1 {
                        let iy = r * s + u - p;
                        let g_row = &dyc[r * geo.out_w..(r + 1) * geo.out_w];
                        let x_row = &xc[iy * geo.in_w..(iy + 1) * geo.in_w];
                        if s == 1 {
                            let (g_seg, lo) = (&g_row[c0..c1], c0 + v - p);
                            if need_dw {
                                acc += g_seg.iter().zip(&x_row[lo..lo + g_seg.len()]).fold(T::zero(), |a, (&g, &xv)| a + g * xv);
                            }
                            if let Some(dx) = dx.as_mut() {
                                let dx_seg = &mut dx[x_off + iy * geo.in_w + lo..][..g_seg.len()];
                                for (d, &g) in dx_seg.iter_mut().zip(g_seg) {
                                    *d += k * g;
                                }
                            }
                            continue;
                        }
                        for cc in c0..c1 {
                            acc += g_row[cc] * x_row[cc * s + v - p];
                        }
                        if let Some(dx) = dx.as_mut() {
                            let dx_row = &mut dx[x_off + iy * geo.in_w..][..geo.in_w];
                            for cc in c0..c1 {
                                dx_row[cc * s + v - p] += k * g_row[cc];
                            }
                        }
                    }
                    if let Some(dw) = dw.as_mut() {
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
    (dx, dw)
}

fn pointwise_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, i, hh, ww) = image_dims(x.shape())?;
    let [o, wi] = *w.shape() else {
        return Err(Error::shape(format!("pointwise weight must be (O, I), got {:?}", w.shape())));
    };
    if wi != i {
        return Err(Error::shape(format!(
            "pointwise weight expects {wi} input channels, input has {i}"
        )));
    }
    let plane = hh * ww;
    let mut out = vec![T::zero(); batch * o * plane];
    for n in 0..batch {
        matmul(
            o,
            i,
            plane,
            w.data(),
            false,
            &x.data()[n * i * plane..(n + 1) * i * plane],
            false,
            &mut out[n * o * plane..(n + 1) * o * plane],
            false,
        );
    }
    Tensor::from_vec(&[batch, o, hh, ww], out)
}

fn pointwise_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &[T],
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (batch, i, hh, ww) = image_dims(x.shape()).expect("validated in forward");
    let o = w.shape()[0];
    let plane = hh * ww;
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.len()]);
    for n in 0..batch {
        let xn = &x.data()[n * i * plane..(n + 1) * i * plane];
        let dyn_ = &dy[n * o * plane..(n + 1) * o * plane];
        if let Some(dw) = dw.as_mut() {
            matmul(o, plane, i, dyn_, false, xn, true, dw, true);
        }
        if let Some(dx) = dx.as_mut() {
            matmul(i, o, plane, w.data(), true, dyn_, false, &mut dx[n * i * plane..(n + 1) * i * plane], false);
        }
    }
    (dx, dw)
}

/// Standard convolution (groups = 1); weight `(O, I, H, H)`.
pub fn conv2d_standard<T: Real>(x: &Tensor<T>, k: &Tensor<T>, cfg: &ConvConfig) -> Result<Tensor<T>> {
    if cfg.groups != 1 {
        return Err(Error::shape("conv2d_standard needs groups = 1"));
    }
    grouped_forward(x, k, cfg)
}

/// Grouped convolution; weight `(O, I/G, H, H)`, group `g` maps input
/// channels `[g·I/G, (g+1)·I/G)` to output channels `[g·O/G, (g+1)·O/G)`.
pub fn conv2d_grouped<T: Real>(x: &Tensor<T>, k: &Tensor<T>, cfg: &ConvConfig) -> Result<Tensor<T>> {
    grouped_forward(x, k, cfg)
}

/// One `H×H` filter per channel; weight `(I, H, H)`.
pub fn conv2d_depthwise<T: Real>(x: &Tensor<T>, k_hat: &Tensor<T>, cfg: &ConvConfig) -> Result<Tensor<T>> {
    if cfg.mode != ConvMode::Depthwise {
        return Err(Error::shape("conv2d_depthwise needs a depthwise config"));
    }
    if k_hat.dim(0) != cfg.in_channels {
        return Err(Error::shape(format!(
            "depthwise kernel has {} filters for {} channels",
            k_hat.dim(0),
            cfg.in_channels
        )));
    }
    depthwise_forward(x, k_hat, cfg)
}

/// Per-pixel channel mixing; weight `(O, I)`.
pub fn conv2d_pointwise<T: Real>(x: &Tensor<T>, k_tilde: &Tensor<T>) -> Result<Tensor<T>> {
    pointwise_forward(x, k_tilde)
}

/// Dispatches on `cfg.mode`.
pub fn conv2d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, cfg: &ConvConfig) -> Result<Tensor<T>> {
    match cfg.mode {
        ConvMode::Standard | ConvMode::Grouped => grouped_forward(x, w, cfg),
        ConvMode::Depthwise => depthwise_forward(x, w, cfg),
        ConvMode::Pointwise => {
            cfg.validate()?;
            check_weight(cfg, w)?;
            pointwise_forward(x, w)
        }
    }
}

struct ConvRule {
    cfg: ConvConfig,
}

impl<T: Real> Backward<T> for ConvRule {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let (x, w) = (ctx.inputs[0], ctx.inputs[1]);
        let (nx, nw) = (ctx.needs[0], ctx.needs[1]);
        let (dx, dw) = match self.cfg.mode {
            ConvMode::Standard | ConvMode::Grouped => grouped_backward(x, w, &self.cfg, ctx.grad, nx, nw),
            ConvMode::Depthwise => depthwise_backward(x, w, &self.cfg, ctx.grad, nx, nw),
            ConvMode::Pointwise => pointwise_backward(x, w, ctx.grad, nx, nw),
        };
        vec![dx, dw]
    }
}

/// Input connections kept by each group of a learned group convolution.
///
/// Output channel `o` belongs to group `o % groups`; this is the order a
/// condensed layer produces after its channel shuffle, so downstream grouped
/// layers see one channel from every group in each of their own groups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupMask {
    pub groups: usize,
    pub in_channels: usize,
    /// Sorted kept input indices per group.
    pub kept: Vec<Vec<usize>>,
}

impl GroupMask {
    pub fn full(groups: usize, in_channels: usize) -> Self {
        GroupMask {
            groups,
            in_channels,
            kept: vec![(0..in_channels).collect(); groups],
        }
    }

    pub fn is_full(&self) -> bool {
        self.kept.iter().all(|k| k.len() == self.in_channels)
    }

    pub fn kept_count(&self) -> usize {
        self.kept.iter().map(Vec::len).sum()
    }
}

fn check_lgc<T: Real>(x_shape: &[usize], w: &Tensor<T>, mask: &GroupMask) -> Result<(usize, usize, usize, usize)> {
    let (batch, i, _, _) = image_dims(x_shape)?;
    let [o, wi] = *w.shape() else {
        return Err(Error::shape(format!("learned group conv weight must be (O, I), got {:?}", w.shape())));
    };
    if wi != i || mask.in_channels != i || mask.kept.len() != mask.groups {
        return Err(Error::shape(format!(
            "learned group conv: input has {i} channels, weight {wi}, mask {}",
            mask.in_channels
        )));
    }
    if mask.groups == 0 || o % mask.groups != 0 {
        return Err(Error::shape(format!("{o} outputs not divisible into {} groups", mask.groups)));
    }
    Ok((batch, i, o, o / mask.groups))
}

fn gather_rows<T: Real>(src: &[T], rows: &[usize], plane: usize, dst: &mut Vec<T>) {
    dst.clear();
    for &r in rows {
        dst.extend_from_slice(&src[r * plane..(r + 1) * plane]);
    }
}

/// Group `g`'s weights restricted to its kept inputs: `(O/G, K)`.
fn group_weight<T: Real>(w: &[T], in_ch: usize, g: usize, groups: usize, co: usize, kept: &[usize]) -> Vec<T> {
    let mut wg = Vec::with_capacity(co * kept.len());
    for r in 0..co {
        let row = &w[(g + r * groups) * in_ch..][..in_ch];
        wg.extend(kept.iter().map(|&i| row[i]));
    }
    wg
}

/// 1×1 grouped convolution whose group memberships are given by `mask`.
/// Pruned weights are never read, so their stored values cannot affect the output.
pub fn learned_group_conv<T: Real>(x: &Tensor<T>, w: &Tensor<T>, mask: &GroupMask) -> Result<Tensor<T>> {
    let (batch, i, o, co) = check_lgc(x.shape(), w, mask)?;
    if mask.is_full() {
        return pointwise_forward(x, w);
    }
    let (hh, ww) = (x.dim(2), x.dim(3));
    let plane = hh * ww;
    let g_count = mask.groups;
    let mut out = vec![T::zero(); batch * o * plane];
    let mut xg = Vec::new();
    let weights: Vec<Vec<T>> = (0..g_count)
        .map(|g| group_weight(w.data(), i, g, g_count, co, &mask.kept[g]))
        .collect();
    for n in 0..batch {
        let xn = &x.data()[n * i * plane..(n + 1) * i * plane];
        let yn = &mut out[n * o * plane..(n + 1) * o * plane];
        for g in 0..g_count {
            let kept = &mask.kept[g];
            if kept.is_empty() {
                continue;
            }
            gather_rows(xn, kept, plane, &mut xg);
            // SAFETY: rows g, g+G, … of yn are in bounds; row stride G·plane.
            unsafe {
                T::gemm(
                    co,
                    kept.len(),
                    plane,
                    T::one(),
                    weights[g].as_ptr(),
                    kept.len() as isize,
                    1,
                    xg.as_ptr(),
                    plane as isize,
                    1,
                    T::zero(),
                    yn.as_mut_ptr().add(g * plane),
                    (g_count * plane) as isize,
                    1,
                );
            }
        }
    }
    Tensor::from_vec(&[batch, o, hh, ww], out)
}

struct LgcRule {
    mask: Arc<GroupMask>,
}

impl<T: Real> Backward<T> for LgcRule {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let (x, w) = (ctx.inputs[0], ctx.inputs[1]);
        let (need_dx, need_dw) = (ctx.needs[0], ctx.needs[1]);
        if self.mask.is_full() {
            let (dx, dw) = pointwise_backward(x, w, ctx.grad, need_dx, need_dw);
            return vec![dx, dw];
        }
        let (batch, i, o, co) = check_lgc(x.shape(), w, &self.mask).expect("validated in forward");
        let plane = x.dim(2) * x.dim(3);
        let g_count = self.mask.groups;
        let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
        let mut dw = need_dw.then(|| vec![T::zero(); w.len()]);
        let mut xg = Vec::new();
        let mut dwg = Vec::new();
        let mut dxg = Vec::new();
        for g in 0..g_count {
            let kept = &self.mask.kept[g];
            let k = kept.len();
            if k == 0 {
                continue;
            }
            let wg = group_weight(w.data(), i, g, g_count, co, kept);
            dwg.clear();
            dwg.resize(co * k, T::zero());
            for n in 0..batch {
                let xn = &x.data()[n * i * plane..(n + 1) * i * plane];
                let dy = &ctx.grad[(n * o + g) * plane..];
                if need_dw {
                    gather_rows(xn, kept, plane, &mut xg);
                    // SAFETY: dy rows g, g+G, … (stride G·plane) lie within this image.
                    unsafe {
                        T::gemm(
                            co,
                            plane,
                            k,
                            T::one(),
                            dy.as_ptr(),
                            (g_count * plane) as isize,
                            1,
                            xg.as_ptr(),
                            1,
                            plane as isize,
                            T::one(),
                            dwg.as_mut_ptr(),
                            k as isize,
                            1,
                        );
                    }
                }
                if let Some(dx) = dx.as_mut() {
                    dxg.clear();
                    dxg.resize(k * plane, T::zero());
                    // SAFETY: as above; wg is (co × k) row-major, read transposed.
                    unsafe {
                        T::gemm(
                            k,
                            co,
                            plane,
                            T::one(),
                            wg.as_ptr(),
                            1,
                            k as isize,
                            dy.as_ptr(),
                            (g_count * plane) as isize,
                            1,
                            T::zero(),
                            dxg.as_mut_ptr(),
                            plane as isize,
                            1,
                        );
                    }
                    let dxn = &mut dx[n * i * plane..(n + 1) * i * plane];
                    for (row, &src) in kept.iter().enumerate() {
                        let dst = &mut dxn[src * plane..(src + 1) * plane];
                        for (d, s) in dst.iter_mut().zip(&dxg[row * plane..(row + 1) * plane]) {
                            *d += *s;
                        }
                    }
                }
            }
            if let Some(dw) = dw.as_mut() {
                for r in 0..co {
                    let row = &mut dw[(g + r * g_count) * i..][..i];
                    for (kk, &src) in kept.iter().enumerate() {
                        row[src] = dwg[r * k + kk];
                    }
                }
            }
        }
        vec![dx, dw]
    }
}

impl<T: Real> Tape<T> {
    /// Any [`ConvMode`]; weight layout per [`ConvConfig::weight_shape`].
    pub fn conv2d(&mut self, x: Var, w: Var, cfg: &ConvConfig) -> Result<Var> {
        let out = conv2d(self.value(x), self.value(w), cfg)?;
        Ok(self.record(out, vec![x, w], Box::new(ConvRule { cfg: *cfg })))
    }

    pub fn learned_group_conv(&mut self, x: Var, w: Var, mask: Arc<GroupMask>) -> Result<Var> {
        let out = learned_group_conv(self.value(x), self.value(w), &mask)?;
        Ok(self.record(out, vec![x, w], Box::new(LgcRule { mask })))
    }
}
