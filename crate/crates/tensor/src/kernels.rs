//! Raw slice kernels behind the tape ops: GEMM, im2col/col2im and the
//! batched convolution / transposed-convolution passes.

/// `c = a·b + beta·c` for row-major operands; `ta`/`tb` read the stored
/// matrix transposed. Shapes are those of the (possibly transposed) operands:
/// `a` is m×k, `b` is k×n, `c` is m×n.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    ta: bool,
    b: &[f32],
    tb: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Spatial geometry of one convolution: input side → output side.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Geom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Geom {
    /// Output size of a strided cross-correlation, if integral and positive.
    pub fn conv_out(side: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = side + 2 * pad;
        if stride == 0 || padded < k || !(padded - k).is_multiple_of(stride) {
            return None;
        }
        Some((padded - k) / stride + 1)
    }

    /// Output size of the transposed convolution with the same parameters.
    pub fn deconv_out(side: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
        if stride == 0 || side == 0 {
            return None;
        }
        let full = (side - 1) * stride + k;
        (full > 2 * pad).then(|| full - 2 * pad)
    }

    pub fn patch(&self) -> usize {
        self.channels * self.k * self.k
    }

    pub fn out_pixels(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds one `C×H×W` image into a `(C·k·k) × (oh·ow)` column matrix.
/// Unfolds one `C×H×W` image into columns `off..off+P` of a `patch×ld`
/// matrix, one column per output pixel.
pub(crate) fn im2col(x: &[f32], g: &Geom, cols: &mut [f32], ld: usize, off: usize) {
    let p = g.out_pixels();
    for c in 0..g.channels {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * ld + off..row * ld + off + p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns `off..off+P` back into `x`.
pub(crate) fn col2im(cols: &[f32], g: &Geom, x: &mut [f32], ld: usize, off: usize) {
    let p = g.out_pixels();
    for c in 0..g.channels {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * ld + off..row * ld + off + p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `N×C×P` → `C×(N·P)`
fn channel_major(x: &[f32], batch: usize, ch: usize, p: usize) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    for n in 0..batch {
        for c in 0..ch {
            out[c * batch * p + n * p..c * batch * p + (n + 1) * p].copy_from_slice(&x[(n * ch + c) * p..(n * ch + c + 1) * p]);
        }
    }
    out
}

/// Adds a `C×(N·P)` matrix into an `N×C×P` tensor.
fn add_batch_major(src: &[f32], batch: usize, ch: usize, p: usize, dst: &mut [f32]) {
    for n in 0..batch {
        for c in 0..ch {
            let s = &src[c * batch * p + n * p..c * batch * p + (n + 1) * p];
            let d = &mut dst[(n * ch + c) * p..(n * ch + c + 1) * p];
            d.iter_mut().zip(s).for_each(|(a, b)| *a += b);
        }
    }
}

pub(crate) fn conv_forward(x: &[f32], w: &[f32], batch: usize, out_ch: usize, g: &Geom) -> Vec<f32> {
    let in_len = g.channels * g.h * g.w;
    let p = g.out_pixels();
    let ld = batch * p;
    let mut cols = vec![0.0; g.patch() * ld];
    for n in 0..batch {
        im2col(&x[n * in_len..(n + 1) * in_len], g, &mut cols, ld, n * p);
    }
    let mut tmp = vec![0.0; out_ch * ld];
    gemm(out_ch, g.patch(), ld, w, false, &cols, false, 0.0, &mut tmp);
    let mut out = vec![0.0; batch * out_ch * p];
    add_batch_major(&tmp, batch, out_ch, p, &mut out);
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    x: &[f32],
    w: &[f32],
    gout: &[f32],
    batch: usize,
    out_ch: usize,
    g: &Geom,
    gx: Option<&mut [f32]>,
    gw: Option<&mut [f32]>,
) {
    let in_len = g.channels * g.h * g.w;
    let p = g.out_pixels();
    let ld = batch * p;
    let go = channel_major(gout, batch, out_ch, p);
    let mut cols = vec![0.0; g.patch() * ld];
    if let Some(gw) = gw {
        for n in 0..batch {
            im2col(&x[n * in_len..(n + 1) * in_len], g, &mut cols, ld, n * p);
        }
        gemm(out_ch, ld, g.patch(), &go, false, &cols, true, 1.0, gw);
    }
    if let Some(gx) = gx {
        gemm(g.patch(), out_ch, ld, w, true, &go, false, 0.0, &mut cols);
        for n in 0..batch {
            col2im(&cols, g, &mut gx[n * in_len..(n + 1) * in_len], ld, n * p);
        }
    }
}

pub(crate) fn deconv_forward(x: &[f32], w: &[f32], batch: usize, in_ch: usize, g: &Geom) -> Vec<f32> {
    let small = g.out_pixels();
    let ld = batch * small;
    let out_len = g.channels * g.h * g.w;
    let xr = channel_major(x, batch, in_ch, small);
    let mut cols = vec![0.0; g.patch() * ld];
    gemm(g.patch(), in_ch, ld, w, true, &xr, false, 0.0, &mut cols);
    let mut out = vec![0.0; batch * out_len];
    for n in 0..batch {
        col2im(&cols, g, &mut out[n * out_len..(n + 1) * out_len], ld, n * small);
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn deconv_backward(
    x: &[f32],
    w: &[f32],
    gout: &[f32],
    batch: usize,
    in_ch: usize,
    g: &Geom,
    gx: Option<&mut [f32]>,
    gw: Option<&mut [f32]>,
) {
    let small = g.out_pixels();
    let ld = batch * small;
    let out_len = g.channels * g.h * g.w;
    let mut cols = vec![0.0; g.patch() * ld];
    for n in 0..batch {
        im2col(&gout[n * out_len..(n + 1) * out_len], g, &mut cols, ld, n * small);
    }
    if let Some(gx) = gx {
        let mut tmp = vec![0.0; in_ch * ld];
        gemm(in_ch, g.patch(), ld, w, false, &cols, false, 0.0, &mut tmp);
        add_batch_major(&tmp, batch, in_ch, small, gx);
    }
    if let Some(gw) = gw {
        let xr = channel_major(x, batch, in_ch, small);
        gemm(in_ch, ld, g.patch(), &xr, false, &cols, true, 1.0, gw);
    }
}
