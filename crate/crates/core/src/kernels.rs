//! Raw forward/backward loops over row-major buffers. Shapes are validated
//! by the caller; accumulation order is fixed so results are bitwise
//! reproducible.

use crate::tensor::Real;

/// Geometry of a 2-D convolution over NCHW input with OIHW weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.k_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.k_w) / self.stride + 1
    }

    /// Output positions `o` along one axis for which `o*stride + k - pad`
    /// lands inside `[0, extent)`.
    fn valid_range(&self, k: usize, extent: usize, out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.pad as isize;
        // smallest o with o*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest o with o*s + off <= extent-1, exclusive bound
        let last = extent as isize - 1 - off;
        let hi = if last < 0 { 0 } else { last / s + 1 };
        let lo = lo.max(0) as usize;
        let hi = (hi.max(0) as usize).min(out);
        (lo, hi.max(lo))
    }
}

pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// Returns (dA, dB) for C = A·B given dC.
pub fn matmul_backward<T: Real>(
    a: &[T],
    b: &[T],
    grad: &[T],
    m: usize,
    k: usize,
    n: usize,
    need_a: bool,
    need_b: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let da = need_a.then(|| {
        let mut da = vec![T::zero(); m * k];
        for i in 0..m {
            let g = &grad[i * n..(i + 1) * n];
            for p in 0..k {
                let brow = &b[p * n..(p + 1) * n];
                let mut acc = T::zero();
                for (&gv, &bv) in g.iter().zip(brow) {
                    acc = acc + gv * bv;
                }
                da[i * k + p] = acc;
            }
        }
        da
    });
    let db = need_b.then(|| {
        let mut db = vec![T::zero(); k * n];
        for i in 0..m {
            let g = &grad[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                let row = &mut db[p * n..(p + 1) * n];
                for (d, &gv) in row.iter_mut().zip(g) {
                    *d = *d + av * gv;
                }
            }
        }
        db
    });
    (da, db)
}

/// Unfolds one image into a `[in_ch*k_h*k_w, out_h*out_w]` column matrix.
fn im2col<T: Real>(img: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    cols.iter_mut().for_each(|c| *c = T::zero());
    for ic in 0..g.in_ch {
        let ibase = ic * g.in_h * g.in_w;
        for kh in 0..g.k_h {
            let (y0, y1) = g.valid_range(kh, g.in_h, oh);
            for kw in 0..g.k_w {
                let (x0, x1) = g.valid_range(kw, g.in_w, ow);
                let row = ((ic * g.k_h + kh) * g.k_w + kw) * plane;
                for oy in y0..y1 {
                    let irow = ibase + (oy * g.stride + kh - g.pad) * g.in_w;
                    let crow = row + oy * ow;
                    for ox in x0..x1 {
                        cols[crow + ox] = img[irow + ox * g.stride + kw - g.pad];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
fn col2im<T: Real>(cols: &[T], g: &ConvGeom, img: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for ic in 0..g.in_ch {
        let ibase = ic * g.in_h * g.in_w;
        for kh in 0..g.k_h {
            let (y0, y1) = g.valid_range(kh, g.in_h, oh);
            for kw in 0..g.k_w {
                let (x0, x1) = g.valid_range(kw, g.in_w, ow);
                let row = ((ic * g.k_h + kh) * g.k_w + kw) * plane;
                for oy in y0..y1 {
                    let irow = ibase + (oy * g.stride + kh - g.pad) * g.in_w;
                    let crow = row + oy * ow;
                    for ox in x0..x1 {
                        let i = irow + ox * g.stride + kw - g.pad;
                        img[i] = img[i] + cols[crow + ox];
                    }
                }
            }
        }
    }
}

pub fn conv2d<T: Real>(input: &[T], weight: &[T], g: &ConvGeom) -> Vec<T> {
    let plane = g.out_h() * g.out_w();
    let patch = g.in_ch * g.k_h * g.k_w;
    let img_len = g.in_ch * g.in_h * g.in_w;
    let mut cols = vec![T::zero(); patch * plane];
    let mut out = Vec::with_capacity(g.batch * g.out_ch * plane);
    for n in 0..g.batch {
        im2col(&input[n * img_len..(n + 1) * img_len], g, &mut cols);
        out.extend(matmul(weight, &cols, g.out_ch, patch, plane));
    }
    out
}

/// Returns (dInput, dWeight) given dOutput.
pub fn conv2d_backward<T: Real>(
    input: &[T],
    weight: &[T],
    grad: &[T],
    g: &ConvGeom,
    need_input: bool,
    need_weight: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let plane = g.out_h() * g.out_w();
    let patch = g.in_ch * g.k_h * g.k_w;
    let img_len = g.in_ch * g.in_h * g.in_w;
    let out_len = g.out_ch * plane;
    let mut dx = need_input.then(|| vec![T::zero(); input.len()]);
    let mut dw = need_weight.then(|| vec![T::zero(); weight.len()]);
    let mut cols = vec![T::zero(); patch * plane];
    for n in 0..g.batch {
        let gout = &grad[n * out_len..(n + 1) * out_len];
        if need_weight {
            im2col(&input[n * img_len..(n + 1) * img_len], g, &mut cols);
        }
        let (dwn, dcols) = matmul_backward(weight, &cols, gout, g.out_ch, patch, plane, need_weight, need_input);
        if let (Some(dx), Some(dcols)) = (dx.as_mut(), dcols) {
            col2im(&dcols, g, &mut dx[n * img_len..(n + 1) * img_len]);
        }
        if let (Some(dw), Some(dwn)) = (dw.as_mut(), dwn) {
            for (d, v) in dw.iter_mut().zip(dwn) {
                *d = *d + v;
            }
        }
    }
    (dx, dw)
}

pub fn upsample2x<T: Real>(input: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        for y in 0..oh {
            for x in 0..ow {
                out[p * oh * ow + y * ow + x] = input[p * h * w + (y / 2) * w + x / 2];
            }
        }
    }
    out
}

pub fn upsample2x_backward<T: Real>(grad: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for y in 0..oh {
            for x in 0..ow {
                let i = p * h * w + (y / 2) * w + x / 2;
                dx[i] = dx[i] + grad[p * oh * ow + y * ow + x];
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(input: &[f64], weight: &[f64], g: &ConvGeom) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; g.batch * g.out_ch * oh * ow];
        for n in 0..g.batch {
            for oc in 0..g.out_ch {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = 0.0;
                        for ic in 0..g.in_ch {
                            for kh in 0..g.k_h {
                                for kw in 0..g.k_w {
                                    let iy = (oy * g.stride + kh) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kw) as isize - g.pad as isize;
                                    if iy < 0
                                        || ix < 0
                                        || iy >= g.in_h as isize
                                        || ix >= g.in_w as isize
                                    {
                                        continue;
                                    }
                                    s += weight[((oc * g.in_ch + ic) * g.k_h + kh) * g.k_w + kw]
                                        * input[((n * g.in_ch + ic) * g.in_h + iy as usize)
                                            * g.in_w
                                            + ix as usize];
                                }
                            }
                        }
                        out[((n * g.out_ch + oc) * oh + oy) * ow + ox] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_for_strides_and_padding() {
        for &(stride, pad, k) in &[(1, 0, 2), (1, 1, 3), (2, 1, 3), (2, 0, 3), (3, 2, 4)] {
            let g = ConvGeom {
                batch: 2,
                in_ch: 3,
                in_h: 7,
                in_w: 6,
                out_ch: 2,
                k_h: k,
                k_w: k,
                stride,
                pad,
            };
            let input: Vec<f64> = (0..2 * 3 * 7 * 6).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
            let weight: Vec<f64> = (0..2 * 3 * k * k).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
            assert_eq!(conv2d(&input, &weight, &g), naive_conv(&input, &weight, &g));
        }
    }

    #[test]
    fn conv_backward_is_the_adjoint_of_forward() {
        for &(stride, pad, k) in &[(1, 0, 2), (1, 1, 3), (2, 1, 3), (2, 0, 3), (3, 2, 4)] {
            let g = ConvGeom {
                batch: 2,
                in_ch: 3,
                in_h: 7,
                in_w: 6,
                out_ch: 2,
                k_h: k,
                k_w: k,
                stride,
                pad,
            };
            let x: Vec<f64> = (0..2 * 3 * 7 * 6).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
            let w: Vec<f64> = (0..2 * 3 * k * k).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
            let n_out = 2 * 2 * g.out_h() * g.out_w();
            let gy: Vec<f64> = (0..n_out).map(|i| ((i * 5) % 9) as f64 - 4.0).collect();
            let (dx, dw) = conv2d_backward(&x, &w, &gy, &g, true, true);
            let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
            let y = conv2d(&x, &w, &g);
            // the conv is bilinear, so <y, gy> = <x, dx> = <w, dw>
            assert_eq!(dot(&y, &gy), dot(&x, &dx.unwrap()));
            assert_eq!(dot(&y, &gy), dot(&w, &dw.unwrap()));
        }
    }

    #[test]
    fn upsample_copies_each_pixel_into_a_2x2_block() {
        let out = upsample2x(&[1.0f64, 2.0, 3.0, 4.0], 1, 2, 2);
        assert_eq!(
            out,
            vec![1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
        let back = upsample2x_backward(&out, 1, 2, 2);
        assert_eq!(back, vec![4., 8., 12., 16.]);
    }
}
