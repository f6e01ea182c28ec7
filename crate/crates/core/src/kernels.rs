//! Raw numeric kernels on flat `f64` buffers. No shape checking happens here;
//! callers in `tape` and `tensor` validate before dispatching.

use alloc::vec;
use alloc::vec::Vec;

/// `c[m×n] += op(a) · op(b)` where `op` optionally transposes.
///
/// Layouts: `a` is `[m,k]` (or `[k,m]` when `ta`), `b` is `[k,n]` (or `[n,k]` when `tb`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(ta: bool, tb: bool, m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                let c_row = &mut c[i * n..(i + 1) * n];
                let a_row = &a[i * k..(i + 1) * k];
                for (p, &av) in a_row.iter().enumerate() {
                    if av == 0.0 {
                        continue;
                    }
                    let b_row = &b[p * n..(p + 1) * n];
                    for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                        *cv += av * bv;
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let a_row = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    let b_row = &b[j * k..(j + 1) * k];
                    c[i * n + j] += dot(a_row, b_row);
                }
            }
        }
        (true, false) => {
            for p in 0..k {
                let a_row = &a[p * m..(p + 1) * m];
                let b_row = &b[p * n..(p + 1) * n];
                for (i, &av) in a_row.iter().enumerate() {
                    if av == 0.0 {
                        continue;
                    }
                    let c_row = &mut c[i * n..(i + 1) * n];
                    for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                        *cv += av * bv;
                    }
                }
            }
        }
        (true, true) => {
            let mut at = vec![0.0; m * k];
            for p in 0..k {
                for i in 0..m {
                    at[i * k + p] = a[p * m + i];
                }
            }
            gemm(false, true, m, n, k, &at, b, c);
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four accumulators so the loop vectorizes
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * i + l] * b[4 * i + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    fn cin_g(&self) -> usize {
        self.in_channels / self.groups
    }

    fn cout_g(&self) -> usize {
        self.out_channels / self.groups
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Unfolds the channels `[c0, c0+cin)` of one image into `[cin·kh·kw, oh·ow]`.
fn im2col(geo: &ConvGeometry, image: &[f64], c0: usize, cols: &mut [f64]) {
    let (oh, ow) = (geo.out_h(), geo.out_w());
    let (h, w) = (geo.height, geo.width);
    let p = geo.padding as isize;
    let mut row = 0;
    for c in c0..c0 + geo.cin_g() {
        let plane = &image[c * h * w..(c + 1) * h * w];
        for ky in 0..geo.kernel_h {
            for kx in 0..geo.kernel_w {
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * geo.stride + ky) as isize - p;
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        out_row.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * geo.stride + kx) as isize - p;
                        *v = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im_add(geo: &ConvGeometry, cols: &[f64], c0: usize, image: &mut [f64]) {
    let (oh, ow) = (geo.out_h(), geo.out_w());
    let (h, w) = (geo.height, geo.width);
    let p = geo.padding as isize;
    let mut row = 0;
    for c in c0..c0 + geo.cin_g() {
        for ky in 0..geo.kernel_h {
            for kx in 0..geo.kernel_w {
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * geo.stride + ky) as isize - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = c * h * w + iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * geo.stride + kx) as isize - p;
                        if ix >= 0 && ix < w as isize {
                            image[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub fn conv2d_forward(geo: &ConvGeometry, input: &[f64], weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (oh, ow) = (geo.out_h(), geo.out_w());
    let plane = oh * ow;
    let (cin_g, cout_g) = (geo.cin_g(), geo.cout_g());
    let kk = cin_g * geo.kernel_h * geo.kernel_w;
    let img = geo.in_channels * geo.height * geo.width;
    let mut out = vec![0.0; geo.batch * geo.out_channels * plane];
    let mut cols = vec![0.0; if geo.is_pointwise() { 0 } else { kk * plane }];
    for b in 0..geo.batch {
        let image = &input[b * img..(b + 1) * img];
        for g in 0..geo.groups {
            let w_g = &weight[g * cout_g * kk..(g + 1) * cout_g * kk];
            let o0 = (b * geo.out_channels + g * cout_g) * plane;
            let out_g = &mut out[o0..o0 + cout_g * plane];
            if geo.is_pointwise() {
                let src = &image[g * cin_g * plane..(g + 1) * cin_g * plane];
                gemm(false, false, cout_g, plane, kk, w_g, src, out_g);
            } else {
                im2col(geo, image, g * cin_g, &mut cols);
                gemm(false, false, cout_g, plane, kk, w_g, &cols, out_g);
            }
        }
        if let Some(bias) = bias {
            for o in 0..geo.out_channels {
                let row = &mut out[(b * geo.out_channels + o) * plane..(b * geo.out_channels + o + 1) * plane];
                row.iter_mut().for_each(|v| *v += bias[o]);
            }
        }
    }
    out
}

/// Accumulates input and weight gradients of a convolution.
pub fn conv2d_backward(
    geo: &ConvGeometry,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    grad_input: Option<&mut [f64]>,
    grad_weight: Option<&mut [f64]>,
) {
    let (oh, ow) = (geo.out_h(), geo.out_w());
    let plane = oh * ow;
    let (cin_g, cout_g) = (geo.cin_g(), geo.cout_g());
    let kk = cin_g * geo.kernel_h * geo.kernel_w;
    let img = geo.in_channels * geo.height * geo.width;
    let mut cols = vec![0.0; kk * plane];
    let mut grad_input = grad_input;
    let mut grad_weight = grad_weight;
    for b in 0..geo.batch {
        let image = &input[b * img..(b + 1) * img];
        for g in 0..geo.groups {
            let o0 = (b * geo.out_channels + g * cout_g) * plane;
            let dout = &grad_out[o0..o0 + cout_g * plane];
            let w_g = &weight[g * cout_g * kk..(g + 1) * cout_g * kk];
            if let Some(gw) = grad_weight.as_deref_mut() {
                let gw_g = &mut gw[g * cout_g * kk..(g + 1) * cout_g * kk];
                if geo.is_pointwise() {
                    let src = &image[g * cin_g * plane..(g + 1) * cin_g * plane];
                    gemm(false, true, cout_g, kk, plane, dout, src, gw_g);
                } else {
                    im2col(geo, image, g * cin_g, &mut cols);
                    gemm(false, true, cout_g, kk, plane, dout, &cols, gw_g);
                }
            }
            if let Some(gi) = grad_input.as_deref_mut() {
                let gi_img = &mut gi[b * img..(b + 1) * img];
                if geo.is_pointwise() {
                    let dst = &mut gi_img[g * cin_g * plane..(g + 1) * cin_g * plane];
                    gemm(true, false, kk, plane, cout_g, w_g, dout, dst);
                } else {
                    cols.iter_mut().for_each(|v| *v = 0.0);
                    gemm(true, false, kk, plane, cout_g, w_g, dout, &mut cols);
                    col2im_add(geo, &cols, g * cin_g, gi_img);
                }
            }
        }
    }
}

/// Source coordinate and blend weight for align-corners-false bilinear sampling.
#[inline]
pub fn bilinear_source(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (libm::floor(src) as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    let frac = if i0 == in_len - 1 { 0.0 } else { src - i0 as f64 };
    (i0, i1, frac)
}

/// Bilinear resize of `planes` images of size `h×w` to `oh×ow`.
pub fn bilinear_resize(data: &[f64], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = vec![0.0; planes * oh * ow];
    let ys: Vec<_> = (0..oh).map(|y| bilinear_source(y, h, oh)).collect();
    let xs: Vec<_> = (0..ow).map(|x| bilinear_source(x, w, ow)).collect();
    for p in 0..planes {
        let src = &data[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[oy * ow + ox] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}
