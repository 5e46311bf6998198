//! Raw NCHW image kernels shared by the autodiff ops and by plain
//! (non-differentiable) image processing.

use crate::float::Float;
use crate::par;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }
}

fn im2col<T: Float>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    for c in 0..g.c {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        drow.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Float>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    for c in 0..g.c {
        let xc = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let xrow = &mut xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            xrow[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `x: [N,C,H,W]`, `w: [O,C,k,k]`, `b: [O]` → `[N,O,Ho,Wo]`.
pub fn conv2d_forward<T: Float>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, stride: usize, pad: usize) -> Tensor<T> {
    let (n, c, h, wd) = dims4(x.shape());
    let o = w.shape()[0];
    let k = w.shape()[2];
    let g = ConvGeom { c, h, w: wd, k, stride, pad };
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    let mut out = Tensor::zeros(&[n, o, ho, wo]);
    let xs = x.data();
    let ws = w.data();
    let bs = b.map(|b| b.data());
    let rows = g.rows();
    par::for_each_chunk_mut(out.data_mut(), o * plane, |i, dst| {
        let mut cols = vec![T::zero(); rows * plane];
        im2col(&xs[i * c * h * wd..(i + 1) * c * h * wd], &g, &mut cols);
        if let Some(bs) = bs {
            for (oc, chunk) in dst.chunks_mut(plane).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bs[oc]);
            }
        }
        let beta = if bs.is_some() { T::one() } else { T::zero() };
        unsafe {
            T::gemm(
                o, rows, plane, T::one(),
                ws.as_ptr(), rows as isize, 1,
                cols.as_ptr(), plane as isize, 1,
                beta, dst.as_mut_ptr(), plane as isize, 1,
            );
        }
    });
    out
}

/// Gradients of [`conv2d_forward`] for `(x, w, b)`.
pub fn conv2d_backward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_x: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let (n, c, h, wd) = dims4(x.shape());
    let o = w.shape()[0];
    let k = w.shape()[2];
    let g = ConvGeom { c, h, w: wd, k, stride, pad };
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    let rows = g.rows();
    let xs = x.data();
    let ws = w.data();
    let gs = gout.data();

    // per-item (dW, dx) then a fixed-order reduction for dW
    let per: Vec<(Vec<T>, Option<Vec<T>>)> = par::map_indexed(n, |i| {
        let mut cols = vec![T::zero(); rows * plane];
        im2col(&xs[i * c * h * wd..(i + 1) * c * h * wd], &g, &mut cols);
        let go = &gs[i * o * plane..(i + 1) * o * plane];
        let mut dw = vec![T::zero(); o * rows];
        unsafe {
            T::gemm(
                o, plane, rows, T::one(),
                go.as_ptr(), plane as isize, 1,
                cols.as_ptr(), 1, plane as isize,
                T::zero(), dw.as_mut_ptr(), rows as isize, 1,
            );
        }
        let dx = need_x.then(|| {
            let mut dcols = vec![T::zero(); rows * plane];
            unsafe {
                T::gemm(
                    rows, o, plane, T::one(),
                    ws.as_ptr(), 1, rows as isize,
                    go.as_ptr(), plane as isize, 1,
                    T::zero(), dcols.as_mut_ptr(), plane as isize, 1,
                );
            }
            let mut dx = vec![T::zero(); c * h * wd];
            col2im(&dcols, &g, &mut dx);
            dx
        });
        (dw, dx)
    });

    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[o]);
    let mut dx = need_x.then(|| Tensor::zeros(x.shape()));
    for (i, (pdw, pdx)) in per.into_iter().enumerate() {
        for (a, b) in dw.data_mut().iter_mut().zip(pdw) {
            *a += b;
        }
        if let (Some(dx), Some(pdx)) = (dx.as_mut(), pdx) {
            dx.data_mut()[i * c * h * wd..(i + 1) * c * h * wd].copy_from_slice(&pdx);
        }
        let go = &gs[i * o * plane..(i + 1) * o * plane];
        for (oc, d) in db.data_mut().iter_mut().enumerate() {
            *d += go[oc * plane..(oc + 1) * plane].iter().copied().sum::<T>();
        }
    }
    (dx, dw, db)
}

pub fn dims4(s: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(s.len(), 4, "expected NCHW tensor, got {s:?}");
    (s[0], s[1], s[2], s[3])
}

pub fn upsample2x<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = dims4(x.shape());
    let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
    let xs = x.data();
    let os = out.data_mut();
    for p in 0..n * c {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                os[(p * 2 * h + y) * 2 * w + xx] = xs[(p * h + y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2x_backward<T: Float>(g: &Tensor<T>) -> Tensor<T> {
    let (n, c, h2, w2) = dims4(g.shape());
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = Tensor::zeros(&[n, c, h, w]);
    let gs = g.data();
    let os = out.data_mut();
    for p in 0..n * c {
        for y in 0..h2 {
            for x in 0..w2 {
                os[(p * h + y / 2) * w + x / 2] += gs[(p * h2 + y) * w2 + x];
            }
        }
    }
    out
}

/// 2×2 average pooling with stride 2; `H` and `W` must be even.
pub fn avgpool2<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = dims4(x.shape());
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let q = T::from_f64(0.25);
    let xs = x.data();
    let os = out.data_mut();
    for p in 0..n * c {
        for y in 0..ho {
            for xx in 0..wo {
                let base = (p * h + 2 * y) * w + 2 * xx;
                os[(p * ho + y) * wo + xx] = (xs[base] + xs[base + 1] + xs[base + w] + xs[base + w + 1]) * q;
            }
        }
    }
    out
}

pub fn avgpool2_backward<T: Float>(g: &Tensor<T>) -> Tensor<T> {
    let (n, c, ho, wo) = dims4(g.shape());
    let (h, w) = (ho * 2, wo * 2);
    let mut out = Tensor::zeros(&[n, c, h, w]);
    let q = T::from_f64(0.25);
    let gs = g.data();
    let os = out.data_mut();
    for p in 0..n * c {
        for y in 0..h {
            for x in 0..w {
                os[(p * h + y) * w + x] = gs[(p * ho + y / 2) * wo + x / 2] * q;
            }
        }
    }
    out
}

/// `[N, C·r², H, W]` → `[N, C, H·r, W·r]`.
pub fn pixel_shuffle<T: Float>(x: &Tensor<T>, r: usize) -> Tensor<T> {
    let (n, cr, h, w) = dims4(x.shape());
    let c = cr / (r * r);
    let mut out = Tensor::zeros(&[n, c, h * r, w * r]);
    let xs = x.data();
    let os = out.data_mut();
    for b in 0..n {
        for ch in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let src = ((b * cr + ch * r * r + i * r + j) * h) * w;
                    for y in 0..h {
                        for xx in 0..w {
                            os[((b * c + ch) * h * r + y * r + i) * w * r + xx * r + j] = xs[src + y * w + xx];
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn pixel_shuffle_backward<T: Float>(g: &Tensor<T>, r: usize) -> Tensor<T> {
    let (n, c, hr, wr) = dims4(g.shape());
    let (h, w) = (hr / r, wr / r);
    let cr = c * r * r;
    let mut out = Tensor::zeros(&[n, cr, h, w]);
    let gs = g.data();
    let os = out.data_mut();
    for b in 0..n {
        for ch in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let dst = ((b * cr + ch * r * r + i * r + j) * h) * w;
                    for y in 0..h {
                        for xx in 0..w {
                            os[dst + y * w + xx] = gs[((b * c + ch) * hr + y * r + i) * wr + xx * r + j];
                        }
                    }
                }
            }
        }
    }
    out
}

/// `out[n,c,y,x] = x[n,c,y0+y,x0+x]`.
pub fn crop2d<T: Float>(x: &Tensor<T>, y0: usize, x0: usize, h: usize, w: usize) -> Tensor<T> {
    let (n, c, hi, wi) = dims4(x.shape());
    assert!(y0 + h <= hi && x0 + w <= wi, "crop window out of bounds");
    let mut out = Tensor::zeros(&[n, c, h, w]);
    let xs = x.data();
    let os = out.data_mut();
    for p in 0..n * c {
        for y in 0..h {
            let s = (p * hi + y0 + y) * wi + x0;
            os[(p * h + y) * w..(p * h + y + 1) * w].copy_from_slice(&xs[s..s + w]);
        }
    }
    out
}

pub fn crop2d_backward<T: Float>(g: &Tensor<T>, in_shape: &[usize], y0: usize, x0: usize) -> Tensor<T> {
    let (n, c, hi, wi) = dims4(in_shape);
    let (_, _, h, w) = dims4(g.shape());
    let mut out = Tensor::zeros(in_shape);
    let gs = g.data();
    let os = out.data_mut();
    for p in 0..n * c {
        for y in 0..h {
            let d = (p * hi + y0 + y) * wi + x0;
            os[d..d + w].copy_from_slice(&gs[(p * h + y) * w..(p * h + y + 1) * w]);
        }
    }
    out
}

/// Interpolation taps for one axis (half-pixel centres, edge clamped).
fn bilinear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of the two spatial axes.
pub fn resize_bilinear<T: Float>(x: &Tensor<T>, ho: usize, wo: usize) -> Tensor<T> {
    let (n, c, h, w) = dims4(x.shape());
    if (h, w) == (ho, wo) {
        return x.clone();
    }
    let ty = bilinear_taps(h, ho);
    let tx = bilinear_taps(w, wo);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let xs = x.data();
    let os = out.data_mut();
    let mut row = vec![T::zero(); wo];
    for p in 0..n * c {
        let plane = &xs[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let (a, b) = (T::from_f64(1.0 - ly), T::from_f64(ly));
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let (cx, dx) = (T::from_f64(1.0 - lx), T::from_f64(lx));
                let top = plane[y0 * w + x0] * cx + plane[y0 * w + x1] * dx;
                let bot = plane[y1 * w + x0] * cx + plane[y1 * w + x1] * dx;
                row[ox] = top * a + bot * b;
            }
            os[(p * ho + oy) * wo..(p * ho + oy + 1) * wo].copy_from_slice(&row);
        }
    }
    out
}

pub fn resize_bilinear_backward<T: Float>(g: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let (n, c, ho, wo) = dims4(g.shape());
    if (h, w) == (ho, wo) {
        return g.clone();
    }
    let ty = bilinear_taps(h, ho);
    let tx = bilinear_taps(w, wo);
    let mut out = Tensor::zeros(&[n, c, h, w]);
    let gs = g.data();
    let os = out.data_mut();
    for p in 0..n * c {
        let plane = &mut os[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let (a, b) = (T::from_f64(1.0 - ly), T::from_f64(ly));
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let (cx, dx) = (T::from_f64(1.0 - lx), T::from_f64(lx));
                let v = gs[(p * ho + oy) * wo + ox];
                plane[y0 * w + x0] += v * a * cx;
                plane[y0 * w + x1] += v * a * dx;
                plane[y1 * w + x0] += v * b * cx;
                plane[y1 * w + x1] += v * b * dx;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution used as the reference.
    fn conv_ref(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, s: usize, p: usize) -> Tensor<f64> {
        let (n, c, h, wd) = dims4(x.shape());
        let (o, _, k, _) = dims4(w.shape());
        let ho = (h + 2 * p - k) / s + 1;
        let wo = (wd + 2 * p - k) / s + 1;
        let mut out = Tensor::zeros(&[n, o, ho, wo]);
        for bi in 0..n {
            for oc in 0..o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b.data()[oc];
                        for ic in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * s + ki) as isize - p as isize;
                                    let ix = (ox * s + kj) as isize - p as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.data()[((bi * c + ic) * h + iy as usize) * wd + ix as usize]
                                            * w.data()[((oc * c + ic) * k + ki) * k + kj];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((bi * o + oc) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let x = Tensor::from_fn(&[2, 3, 7, 6], |i| ((i * 37 % 11) as f64 - 5.0) / 7.0);
        let w = Tensor::from_fn(&[4, 3, 3, 3], |i| ((i * 13 % 7) as f64 - 3.0) / 5.0);
        let b = Tensor::from_fn(&[4], |i| i as f64 * 0.1);
        for (s, p) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
            let got = conv2d_forward(&x, &w, Some(&b), s, p);
            let want = conv_ref(&x, &w, &b, s, p);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pixel_shuffle_roundtrip() {
        let x = Tensor::from_fn(&[1, 8, 3, 3], |i| i as f64);
        let y = pixel_shuffle(&x, 2);
        assert_eq!(y.shape(), &[1, 2, 6, 6]);
        // top-left 2x2 block of channel 0 comes from channels 0..4 at (0,0)
        assert_eq!(y.data()[0], 0.0);
        assert_eq!(y.data()[1], 9.0);
        assert_eq!(y.data()[6], 18.0);
        assert_eq!(y.data()[7], 27.0);
        assert_eq!(pixel_shuffle_backward(&y, 2), x);
    }

    #[test]
    fn resize_identity_and_constant() {
        let x = Tensor::from_fn(&[1, 1, 5, 5], |i| i as f64);
        assert_eq!(resize_bilinear(&x, 5, 5), x);
        let c = Tensor::<f64>::full(&[1, 2, 7, 9], 0.3);
        let r = resize_bilinear(&c, 4, 13);
        assert!(r.data().iter().all(|v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn resize_backward_is_adjoint() {
        let x = Tensor::from_fn(&[1, 2, 6, 5], |i| ((i * 7 % 5) as f64) - 2.0);
        let g = Tensor::from_fn(&[1, 2, 9, 4], |i| ((i * 3 % 7) as f64) - 3.0);
        let y = resize_bilinear(&x, 9, 4);
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let gx = resize_bilinear_backward(&g, 6, 5);
        let rhs: f64 = x.data().iter().zip(gx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
