//! Convolution and transposed-convolution kernels.
//!
//! Both directions lower to one GEMM per call over a batched im2col matrix of
//! shape `[cin·kh·kw, n·oh·ow]`. Kernels use the `[out, in, kh, kw]` layout for
//! both ordinary and transposed convolutions.

use crate::error::{Error, Result};
use crate::tensor::{Array4, Shape4};

/// Static description of a convolution: kernel shape, stride and padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(out_channels: usize, in_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        ConvGeometry {
            out_channels,
            in_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            padding,
        }
    }

    pub fn kernel_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn kernel_shape(&self) -> Shape4 {
        Shape4::new(self.out_channels, self.in_channels, self.kernel_h, self.kernel_w)
    }

    fn taps(&self) -> usize {
        self.kernel_h * self.kernel_w
    }

    /// Output spatial size of a forward convolution over an `h×w` input.
    pub fn conv_output(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.stride == 0 {
            return Err(Error::dim("conv_forward", "stride must be positive"));
        }
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < self.kernel_h || pw < self.kernel_w {
            return Err(Error::dim(
                "conv_forward",
                format!(
                    "padded input {ph}×{pw} smaller than kernel {}×{}",
                    self.kernel_h, self.kernel_w
                ),
            ));
        }
        Ok(((ph - self.kernel_h) / self.stride + 1, (pw - self.kernel_w) / self.stride + 1))
    }

    /// Output spatial size of a transposed convolution; must equal `input × stride`.
    pub fn transposed_output(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.stride == 0 {
            return Err(Error::dim("transposed_conv_forward", "stride must be positive"));
        }
        let out = |i: usize, k: usize| ((i.max(1) - 1) * self.stride + k).checked_sub(2 * self.padding);
        let (oh, ow) = match (out(h, self.kernel_h), out(w, self.kernel_w)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::dim("transposed_conv_forward", "padding exceeds kernel support")),
        };
        if oh != h * self.stride || ow != w * self.stride {
            return Err(Error::dim(
                "transposed_conv_forward",
                format!(
                    "kernel {}×{} stride {} padding {} maps {h}×{w} to {oh}×{ow}, not input×stride",
                    self.kernel_h, self.kernel_w, self.stride, self.padding
                ),
            ));
        }
        Ok((oh, ow))
    }

    fn check_input(&self, op: &'static str, x: Shape4, expect_c: usize) -> Result<()> {
        if x.c != expect_c {
            return Err(Error::dim(
                op,
                format!("input channels {} (axis 1 of {x}) != kernel in-channels {expect_c}", x.c),
            ));
        }
        Ok(())
    }
}

/// `c = a·b (+ c if accumulate)` with arbitrary row/column strides.
#[allow(clippy::too_many_arguments)]
#[inline]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    rsb: usize,
    csb: usize,
    c: &mut [f32],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    debug_assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the debug assertions above describe the extents touched by sgemm;
    // all callers pass buffers sized from the same geometry.
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
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct Im2Col {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Im2Col {
    fn cols(&self) -> usize {
        self.n * self.oh * self.ow
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    /// Gather image patches into `[c·kh·kw, n·oh·ow]`.
    fn gather(&self, x: &[f32]) -> Vec<f32> {
        let nl = self.cols();
        let plane = self.oh * self.ow;
        let mut col = vec![0.0f32; self.rows() * nl];
        for ci in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut col[row * nl..(row + 1) * nl];
                    for b in 0..self.n {
                        let src = &x[(b * self.c + ci) * self.h * self.w..][..self.h * self.w];
                        for oy in 0..self.oh {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            let srow = &src[iy as usize * self.w..][..self.w];
                            let drow = &mut dst[b * plane + oy * self.ow..][..self.ow];
                            for (ox, d) in drow.iter_mut().enumerate() {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix >= 0 && ix < self.w as isize {
                                    *d = srow[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        col
    }

    /// Adjoint of [`Im2Col::gather`]: accumulate patches back into an image buffer.
    fn scatter(&self, col: &[f32], x: &mut [f32]) {
        let nl = self.cols();
        let plane = self.oh * self.ow;
        for ci in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &col[row * nl..(row + 1) * nl];
                    for b in 0..self.n {
                        let dst = &mut x[(b * self.c + ci) * self.h * self.w..][..self.h * self.w];
                        for oy in 0..self.oh {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            let drow = &mut dst[iy as usize * self.w..][..self.w];
                            let srow = &src[b * plane + oy * self.ow..][..self.ow];
                            for (ox, &s) in srow.iter().enumerate() {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix >= 0 && ix < self.w as isize {
                                    drow[ix as usize] += s;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[n, c, l]` → `[c, n·l]`
fn to_channel_major(x: &[f32], n: usize, c: usize, l: usize) -> Vec<f32> {
    let mut out = vec![0.0; n * c * l];
    for b in 0..n {
        for ch in 0..c {
            out[ch * n * l + b * l..][..l].copy_from_slice(&x[(b * c + ch) * l..][..l]);
        }
    }
    out
}

/// `[c, n·l]` → `[n, c, l]`, adding `bias[c]` when given.
fn from_channel_major(m: &[f32], n: usize, c: usize, l: usize, bias: Option<&[f32]>) -> Vec<f32> {
    let mut out = vec![0.0; n * c * l];
    for b in 0..n {
        for ch in 0..c {
            let dst = &mut out[(b * c + ch) * l..][..l];
            dst.copy_from_slice(&m[ch * n * l + b * l..][..l]);
            if let Some(bias) = bias {
                let bv = bias[ch];
                dst.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

fn bias_grad(gout: &Array4) -> Vec<f32> {
    let s = gout.shape();
    let mut gb = vec![0.0f64; s.c];
    for b in 0..s.n {
        for (ch, acc) in gb.iter_mut().enumerate() {
            *acc += gout.data()[(b * s.c + ch) * s.plane()..][..s.plane()]
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>();
        }
    }
    gb.into_iter().map(|v| v as f32).collect()
}

fn effective_kernel<'a>(kernel: &'a [f32], mask: Option<&[f32]>, buf: &'a mut Vec<f32>) -> &'a [f32] {
    match mask {
        Some(m) => {
            *buf = kernel.iter().zip(m).map(|(k, m)| k * m).collect();
            buf
        }
        None => kernel,
    }
}

fn check_kernel(op: &'static str, g: &ConvGeometry, kernel: &[f32], bias: Option<&[f32]>, mask: Option<&[f32]>) -> Result<()> {
    if kernel.len() != g.kernel_len() {
        return Err(Error::dim(op, format!("kernel has {} values, geometry needs {}", kernel.len(), g.kernel_len())));
    }
    if let Some(b) = bias {
        if b.len() != g.out_channels {
            return Err(Error::dim(op, format!("bias has {} values for {} out-channels", b.len(), g.out_channels)));
        }
    }
    if let Some(m) = mask {
        if m.len() != kernel.len() {
            return Err(Error::dim(op, "mask shape differs from kernel shape"));
        }
    }
    Ok(())
}

/// Cross-correlation `y = (kernel ⊙ mask) ⋆ x + bias`.
pub fn conv2d_forward(
    x: &Array4,
    g: &ConvGeometry,
    kernel: &[f32],
    bias: Option<&[f32]>,
    mask: Option<&[f32]>,
) -> Result<Array4> {
    check_kernel("conv_forward", g, kernel, bias, mask)?;
    let s = x.shape();
    g.check_input("conv_forward", s, g.in_channels)?;
    let (oh, ow) = g.conv_output(s.h, s.w)?;
    let geo = Im2Col {
        n: s.n,
        c: s.c,
        h: s.h,
        w: s.w,
        kh: g.kernel_h,
        kw: g.kernel_w,
        stride: g.stride,
        pad: g.padding,
        oh,
        ow,
    };
    let col = geo.gather(x.data());
    let mut kbuf = Vec::new();
    let k = effective_kernel(kernel, mask, &mut kbuf);
    let (m, kk, nl) = (g.out_channels, geo.rows(), geo.cols());
    let mut out = vec![0.0; m * nl];
    gemm(m, kk, nl, k, kk, 1, &col, nl, 1, &mut out, false);
    let data = from_channel_major(&out, s.n, m, oh * ow, bias);
    Array4::from_vec(Shape4::new(s.n, m, oh, ow), data)
}

/// Gradients of [`conv2d_forward`] with respect to input, kernel and bias.
/// Masked kernel positions receive exactly zero gradient.
pub fn conv2d_backward(
    x: &Array4,
    g: &ConvGeometry,
    kernel: &[f32],
    mask: Option<&[f32]>,
    gout: &Array4,
) -> Result<(Array4, Vec<f32>, Vec<f32>)> {
    let s = x.shape();
    let (oh, ow) = g.conv_output(s.h, s.w)?;
    let geo = Im2Col {
        n: s.n,
        c: s.c,
        h: s.h,
        w: s.w,
        kh: g.kernel_h,
        kw: g.kernel_w,
        stride: g.stride,
        pad: g.padding,
        oh,
        ow,
    };
    let (m, kk, nl) = (g.out_channels, geo.rows(), geo.cols());
    let gmat = to_channel_major(gout.data(), s.n, m, oh * ow);
    let col = geo.gather(x.data());

    let mut gk = vec![0.0; m * kk];
    gemm(m, nl, kk, &gmat, nl, 1, &col, 1, nl, &mut gk, false);
    if let Some(mask) = mask {
        gk.iter_mut().zip(mask).for_each(|(g, m)| *g *= m);
    }

    let mut kbuf = Vec::new();
    let k = effective_kernel(kernel, mask, &mut kbuf);
    let mut gcol = vec![0.0; kk * nl];
    gemm(kk, m, nl, k, 1, kk, &gmat, nl, 1, &mut gcol, false);
    let mut gx = vec![0.0; s.len()];
    geo.scatter(&gcol, &mut gx);

    Ok((Array4::from_vec(s, gx)?, gk, bias_grad(gout)))
}

/// `[o, i, taps]` → `[i, o·taps]`
fn transpose_kernel(g: &ConvGeometry, kernel: &[f32]) -> Vec<f32> {
    let (o, i, t) = (g.out_channels, g.in_channels, g.taps());
    let mut out = vec![0.0; kernel.len()];
    for oc in 0..o {
        for ic in 0..i {
            out[ic * o * t + oc * t..][..t].copy_from_slice(&kernel[(oc * i + ic) * t..][..t]);
        }
    }
    out
}

fn untranspose_kernel(g: &ConvGeometry, kt: &[f32]) -> Vec<f32> {
    let (o, i, t) = (g.out_channels, g.in_channels, g.taps());
    let mut out = vec![0.0; kt.len()];
    for oc in 0..o {
        for ic in 0..i {
            out[(oc * i + ic) * t..][..t].copy_from_slice(&kt[ic * o * t + oc * t..][..t]);
        }
    }
    out
}

fn transposed_geometry(g: &ConvGeometry, s: Shape4) -> Result<(Im2Col, usize, usize)> {
    let (oh, ow) = g.transposed_output(s.h, s.w)?;
    // Patches are taken from the (large) output image at the (small) input positions.
    let geo = Im2Col {
        n: s.n,
        c: g.out_channels,
        h: oh,
        w: ow,
        kh: g.kernel_h,
        kw: g.kernel_w,
        stride: g.stride,
        pad: g.padding,
        oh: s.h,
        ow: s.w,
    };
    Ok((geo, oh, ow))
}

/// Transposed convolution (the adjoint of a strided convolution), upsampling by `stride`.
pub fn transposed_conv2d_forward(
    x: &Array4,
    g: &ConvGeometry,
    kernel: &[f32],
    bias: Option<&[f32]>,
    mask: Option<&[f32]>,
) -> Result<Array4> {
    check_kernel("transposed_conv_forward", g, kernel, bias, mask)?;
    let s = x.shape();
    g.check_input("transposed_conv_forward", s, g.in_channels)?;
    let (geo, oh, ow) = transposed_geometry(g, s)?;
    let mut kbuf = Vec::new();
    let kt = transpose_kernel(g, effective_kernel(kernel, mask, &mut kbuf));
    let xm = to_channel_major(x.data(), s.n, s.c, s.plane());
    let (rows, i, nl) = (geo.rows(), g.in_channels, geo.cols());
    let mut col = vec![0.0; rows * nl];
    gemm(rows, i, nl, &kt, 1, rows, &xm, nl, 1, &mut col, false);
    let shape = Shape4::new(s.n, g.out_channels, oh, ow);
    let mut out = vec![0.0; shape.len()];
    geo.scatter(&col, &mut out);
    if let Some(b) = bias {
        for (idx, chunk) in out.chunks_mut(oh * ow).enumerate() {
            let bv = b[idx % g.out_channels];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
    Array4::from_vec(shape, out)
}

/// Gradients of [`transposed_conv2d_forward`] with respect to input, kernel and bias.
pub fn transposed_conv2d_backward(
    x: &Array4,
    g: &ConvGeometry,
    kernel: &[f32],
    mask: Option<&[f32]>,
    gout: &Array4,
) -> Result<(Array4, Vec<f32>, Vec<f32>)> {
    let s = x.shape();
    let (geo, _, _) = transposed_geometry(g, s)?;
    let (rows, i, nl) = (geo.rows(), g.in_channels, geo.cols());
    let gcol = geo.gather(gout.data());
    let xm = to_channel_major(x.data(), s.n, s.c, s.plane());

    let mut gkt = vec![0.0; i * rows];
    gemm(i, nl, rows, &xm, nl, 1, &gcol, 1, nl, &mut gkt, false);
    let mut gk = untranspose_kernel(g, &gkt);
    if let Some(mask) = mask {
        gk.iter_mut().zip(mask).for_each(|(g, m)| *g *= m);
    }

    let mut kbuf = Vec::new();
    let kt = transpose_kernel(g, effective_kernel(kernel, mask, &mut kbuf));
    let mut gxm = vec![0.0; i * nl];
    gemm(i, rows, nl, &kt, rows, 1, &gcol, nl, 1, &mut gxm, false);
    let gx = from_channel_major(&gxm, s.n, i, s.plane(), None);
    Ok((Array4::from_vec(s, gx)?, gk, bias_grad(gout)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop cross-correlation used as an oracle.
    fn naive_conv(x: &Array4, g: &ConvGeometry, k: &[f32], b: &[f32]) -> Array4 {
        let s = x.shape();
        let (oh, ow) = g.conv_output(s.h, s.w).unwrap();
        Array4::from_fn(Shape4::new(s.n, g.out_channels, oh, ow), |n, o, oy, ox| {
            let mut acc = b[o] as f64;
            for i in 0..g.in_channels {
                for ky in 0..g.kernel_h {
                    for kx in 0..g.kernel_w {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < s.h && (ix as usize) < s.w {
                            let kv = k[((o * g.in_channels + i) * g.kernel_h + ky) * g.kernel_w + kx];
                            acc += kv as f64 * x.get(n, i, iy as usize, ix as usize) as f64;
                        }
                    }
                }
            }
            acc as f32
        })
    }

    /// Scatter-accumulate transposed convolution oracle.
    fn naive_transposed(x: &Array4, g: &ConvGeometry, k: &[f32], b: &[f32]) -> Array4 {
        let s = x.shape();
        let (oh, ow) = (s.h * g.stride, s.w * g.stride);
        let mut out = Array4::from_fn(Shape4::new(s.n, g.out_channels, oh, ow), |_, o, _, _| b[o]);
        for n in 0..s.n {
            for i in 0..s.c {
                for iy in 0..s.h {
                    for ix in 0..s.w {
                        for o in 0..g.out_channels {
                            for ky in 0..g.kernel_h {
                                for kx in 0..g.kernel_w {
                                    let y = (iy * g.stride + ky) as isize - g.padding as isize;
                                    let xx = (ix * g.stride + kx) as isize - g.padding as isize;
                                    if y >= 0 && xx >= 0 && (y as usize) < oh && (xx as usize) < ow {
                                        let kv = k[((o * g.in_channels + i) * g.kernel_h + ky) * g.kernel_w + kx];
                                        let cur = out.get(n, o, y as usize, xx as usize);
                                        out.set(n, o, y as usize, xx as usize, cur + kv * x.get(n, i, iy, ix));
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn random(shape: Shape4, rng: &mut ChaCha8Rng) -> Array4 {
        Array4::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn identity_and_dot_product_cases() {
        let g = ConvGeometry::new(1, 1, 1, 1, 0);
        let y = conv2d_forward(&Array4::scalar(5.0), &g, &[1.0], Some(&[0.0]), None).unwrap();
        assert_eq!(y.data(), &[5.0]);

        let x = Array4::from_vec(Shape4::new(1, 1, 3, 3), (1..=9).map(|v| v as f32).collect()).unwrap();
        let g = ConvGeometry::new(1, 1, 3, 1, 0);
        let y = conv2d_forward(&x, &g, &[1.0; 9], None, None).unwrap();
        assert_eq!(y.shape(), Shape4::scalar());
        assert_eq!(y.data(), &[45.0]);
    }

    #[test]
    fn zero_mask_gives_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(Shape4::new(2, 3, 5, 5), &mut rng);
        let g = ConvGeometry::new(2, 3, 3, 1, 1);
        let k: Vec<f32> = (0..g.kernel_len()).map(|_| rng.gen()).collect();
        let y = conv2d_forward(&x, &g, &k, Some(&[0.25, -1.5]), Some(&vec![0.0; g.kernel_len()])).unwrap();
        for n in 0..2 {
            for yy in 0..5 {
                for xx in 0..5 {
                    assert_eq!(y.get(n, 0, yy, xx), 0.25);
                    assert_eq!(y.get(n, 1, yy, xx), -1.5);
                }
            }
        }
    }

    #[test]
    fn transposed_examples() {
        let g = ConvGeometry::new(1, 1, 2, 2, 0);
        let y = transposed_conv2d_forward(&Array4::scalar(1.0), &g, &[0.5; 4], None, None).unwrap();
        assert_eq!(y.shape(), Shape4::new(1, 1, 2, 2));
        assert_eq!(y.data(), &[0.5; 4]);

        let g = ConvGeometry::new(2, 1, 4, 2, 1);
        let y = transposed_conv2d_forward(
            &Array4::zeros(Shape4::new(1, 1, 3, 3)),
            &g,
            &[0.3; 32],
            Some(&[1.0, -2.0]),
            None,
        )
        .unwrap();
        assert_eq!(y.shape(), Shape4::new(1, 2, 6, 6));
        assert!(y.data()[..36].iter().all(|&v| v == 1.0));
        assert!(y.data()[36..].iter().all(|&v| v == -2.0));

        let g = ConvGeometry::new(1, 1, 1, 1, 0);
        let x = Array4::from_fn(Shape4::new(1, 1, 3, 2), |_, _, y, x| (y * 2 + x) as f32);
        assert_eq!(transposed_conv2d_forward(&x, &g, &[1.0], None, None).unwrap(), x);
    }

    #[test]
    fn matches_naive_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(o, i, k, s, p, h) in &[(3, 2, 3, 1, 1, 5), (4, 3, 5, 2, 2, 8), (2, 5, 1, 1, 0, 4), (3, 2, 4, 2, 1, 6)] {
            let g = ConvGeometry::new(o, i, k, s, p);
            let x = random(Shape4::new(2, i, h, h), &mut rng);
            let kern: Vec<f32> = (0..g.kernel_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f32> = (0..o).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let fast = conv2d_forward(&x, &g, &kern, Some(&b), None).unwrap();
            assert!(fast.max_abs_diff(&naive_conv(&x, &g, &kern, &b)) < 1e-5);
        }
        for &(o, i, k, s, p) in &[(3, 2, 4, 2, 1), (2, 4, 3, 1, 1), (1, 3, 8, 4, 2)] {
            let g = ConvGeometry::new(o, i, k, s, p);
            let x = random(Shape4::new(2, i, 3, 4), &mut rng);
            let kern: Vec<f32> = (0..g.kernel_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f32> = (0..o).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let fast = transposed_conv2d_forward(&x, &g, &kern, Some(&b), None).unwrap();
            assert!(fast.max_abs_diff(&naive_transposed(&x, &g, &kern, &b)) < 1e-5);
        }
    }

    #[test]
    fn shape_errors_name_axes() {
        let g = ConvGeometry::new(1, 2, 3, 1, 1);
        let err = conv2d_forward(&Array4::zeros(Shape4::new(1, 3, 4, 4)), &g, &[0.0; 18], None, None).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
        assert!(err.to_string().contains("channels"));

        let g = ConvGeometry::new(1, 1, 3, 2, 0);
        assert!(transposed_conv2d_forward(&Array4::zeros(Shape4::new(1, 1, 2, 2)), &g, &[0.0; 9], None, None).is_err());
    }

    #[test]
    fn linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = ConvGeometry::new(3, 2, 3, 1, 1);
        let kern: Vec<f32> = (0..g.kernel_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bias = vec![0.3, -0.2, 0.1];
        let x = random(Shape4::new(1, 2, 4, 4), &mut rng);
        let y = random(Shape4::new(1, 2, 4, 4), &mut rng);
        let (a, b) = (0.7f32, -1.3f32);
        let mix = Array4::from_vec(x.shape(), x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect()).unwrap();
        let lhs = conv2d_forward(&mix, &g, &kern, Some(&bias), None).unwrap();
        let cx = conv2d_forward(&x, &g, &kern, Some(&bias), None).unwrap();
        let cy = conv2d_forward(&y, &g, &kern, Some(&bias), None).unwrap();
        let shape = lhs.shape();
        for (idx, v) in lhs.data().iter().enumerate() {
            let ch = (idx / shape.plane()) % shape.c;
            let rhs = a * cx.data()[idx] + b * cy.data()[idx] - (a + b - 1.0) * bias[ch];
            assert!((v - rhs).abs() < 1e-5, "{v} vs {rhs}");
        }
    }
}
