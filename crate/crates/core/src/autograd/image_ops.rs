//! NCHW image operators: convolution, pooling, resampling, box filtering and
//! bilinear grid sampling.

use super::graph::Var;
use super::tensor::{gemm, Tensor};

fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 4, "expected NCHW tensor, got {:?}", s);
    (s[0], s[1], s[2], s[3])
}

struct ConvGeom {
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

impl ConvGeom {
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let l = self.oh * self.ow;
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * l..(row + 1) * l];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let drow = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            drow.fill(0.0);
                            continue;
                        }
                        let src = &x[(c * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], x: &mut [f64]) {
        let l = self.oh * self.ow;
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * l..(row + 1) * l];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut x[(c * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<'g> Var<'g> {
    /// 2-D cross-correlation, `x: (N,C,H,W)`, `weight: (O,C,kh,kw)`, zero padding.
    pub fn conv2d(self, weight: Var<'g>, bias: Option<Var<'g>>, stride: usize, pad: usize) -> Var<'g> {
        let (x, w) = (self.value(), weight.value());
        let (n, c, h, wd) = dims4(&x);
        let ws = w.shape();
        assert!(ws.len() == 4 && ws[1] == c, "conv2d input {:?} weight {:?}", x.shape(), ws);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        assert!(h + 2 * pad >= kh && wd + 2 * pad >= kw, "conv2d kernel larger than padded input");
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (wd + 2 * pad - kw) / stride + 1,
        };
        let l = geom.oh * geom.ow;
        let ckk = c * kh * kw;
        let mut out = vec![0.0; n * o * l];
        let mut cols = vec![0.0; ckk * l];
        for i in 0..n {
            geom.im2col(&x.data()[i * c * h * wd..(i + 1) * c * h * wd], &mut cols);
            let dst = &mut out[i * o * l..(i + 1) * o * l];
            if let Some(b) = &bias {
                let b = b.value();
                for (oc, row) in dst.chunks_mut(l).enumerate() {
                    row.fill(b.data()[oc]);
                }
            }
            gemm(o, ckk, l, 1.0, w.data(), ckk as isize, 1, &cols, l as isize, 1, 1.0, dst);
        }
        let out_shape = vec![n, o, geom.oh, geom.ow];
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        self.graph().custom(
            Tensor::from_parts(out_shape, out),
            &inputs,
            Box::new(move |ctx| {
                let (x, w, g) = (&ctx.inputs[0], &ctx.inputs[1], ctx.grad);
                let mut gx = ctx.needs[0].then(|| vec![0.0; x.numel()]);
                let mut gw = ctx.needs[1].then(|| vec![0.0; w.numel()]);
                let mut cols = vec![0.0; ckk * l];
                let mut gcols = vec![0.0; ckk * l];
                for i in 0..n {
                    let gi = &g.data()[i * o * l..(i + 1) * o * l];
                    if let Some(gw) = gw.as_mut() {
                        geom.im2col(&x.data()[i * c * h * wd..(i + 1) * c * h * wd], &mut cols);
                        // g (o,l) · colsᵀ (l,ckk)
                        gemm(o, l, ckk, 1.0, gi, l as isize, 1, &cols, 1, l as isize, 1.0, gw);
                    }
                    if let Some(gx) = gx.as_mut() {
                        // wᵀ (ckk,o) · g (o,l)
                        gemm(ckk, o, l, 1.0, w.data(), 1, ckk as isize, gi, l as isize, 1, 0.0, &mut gcols);
                        geom.col2im(&gcols, &mut gx[i * c * h * wd..(i + 1) * c * h * wd]);
                    }
                }
                let mut res = vec![
                    gx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
                    gw.map(|d| Tensor::from_parts(w.shape().to_vec(), d)),
                ];
                if ctx.inputs.len() == 3 {
                    res.push(ctx.needs[2].then(|| {
                        let mut gb = vec![0.0; o];
                        for i in 0..n {
                            for (oc, row) in g.data()[i * o * l..(i + 1) * o * l].chunks(l).enumerate() {
                                gb[oc] += row.iter().sum::<f64>();
                            }
                        }
                        Tensor::from_parts(vec![o], gb)
                    }));
                }
                res
            }),
        )
    }

    /// 2×2 average pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn avg_pool2(self) -> Var<'g> {
        let x = self.value();
        let (n, c, h, w) = dims4(&x);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            let src = &x.data()[p * h * w..];
            let dst = &mut out[p * oh * ow..];
            for y in 0..oh {
                for xx in 0..ow {
                    let a = src[(2 * y) * w + 2 * xx];
                    let b = src[(2 * y) * w + 2 * xx + 1];
                    let cc = src[(2 * y + 1) * w + 2 * xx];
                    let d = src[(2 * y + 1) * w + 2 * xx + 1];
                    dst[y * ow + xx] = 0.25 * (a + b + cc + d);
                }
            }
        }
        self.graph().custom(
            Tensor::from_parts(vec![n, c, oh, ow], out),
            &[self],
            Box::new(move |ctx| {
                let mut gx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    let g = &ctx.grad.data()[p * oh * ow..];
                    let dst = &mut gx[p * h * w..];
                    for y in 0..oh {
                        for xx in 0..ow {
                            let v = 0.25 * g[y * ow + xx];
                            dst[(2 * y) * w + 2 * xx] += v;
                            dst[(2 * y) * w + 2 * xx + 1] += v;
                            dst[(2 * y + 1) * w + 2 * xx] += v;
                            dst[(2 * y + 1) * w + 2 * xx + 1] += v;
                        }
                    }
                }
                vec![Some(Tensor::from_parts(vec![n, c, h, w], gx))]
            }),
        )
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(self, factor: usize) -> Var<'g> {
        let x = self.value();
        let (n, c, h, w) = dims4(&x);
        let (oh, ow) = (h * factor, w * factor);
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            let src = &x.data()[p * h * w..];
            for y in 0..oh {
                for xx in 0..ow {
                    out[(p * oh + y) * ow + xx] = src[(y / factor) * w + xx / factor];
                }
            }
        }
        self.graph().custom(
            Tensor::from_parts(vec![n, c, oh, ow], out),
            &[self],
            Box::new(move |ctx| {
                let mut gx = vec![0.0; n * c * h * w];
                let g = ctx.grad.data();
                for p in 0..n * c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            gx[(p * h + y / factor) * w + xx / factor] += g[(p * oh + y) * ow + xx];
                        }
                    }
                }
                vec![Some(Tensor::from_parts(vec![n, c, h, w], gx))]
            }),
        )
    }

    /// Bilinear resize with half-pixel centres (`align_corners = false`).
    pub fn resize_bilinear(self, out_h: usize, out_w: usize) -> Var<'g> {
        let x = self.value();
        let (n, c, h, w) = dims4(&x);
        let ry = resize_taps(h, out_h);
        let rx = resize_taps(w, out_w);
        let mut out = vec![0.0; n * c * out_h * out_w];
        for p in 0..n * c {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            for (y, &(y0, y1, wy)) in ry.iter().enumerate() {
                for (xx, &(x0, x1, wx)) in rx.iter().enumerate() {
                    let top = src[y0 * w + x0] * (1.0 - wx) + src[y0 * w + x1] * wx;
                    let bot = src[y1 * w + x0] * (1.0 - wx) + src[y1 * w + x1] * wx;
                    out[(p * out_h + y) * out_w + xx] = top * (1.0 - wy) + bot * wy;
                }
            }
        }
        self.graph().custom(
            Tensor::from_parts(vec![n, c, out_h, out_w], out),
            &[self],
            Box::new(move |ctx| {
                let mut gx = vec![0.0; n * c * h * w];
                let g = ctx.grad.data();
                for p in 0..n * c {
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    for (y, &(y0, y1, wy)) in ry.iter().enumerate() {
                        for (xx, &(x0, x1, wx)) in rx.iter().enumerate() {
                            let gv = g[(p * out_h + y) * out_w + xx];
                            dst[y0 * w + x0] += gv * (1.0 - wy) * (1.0 - wx);
                            dst[y0 * w + x1] += gv * (1.0 - wy) * wx;
                            dst[y1 * w + x0] += gv * wy * (1.0 - wx);
                            dst[y1 * w + x1] += gv * wy * wx;
                        }
                    }
                }
                vec![Some(Tensor::from_parts(vec![n, c, h, w], gx))]
            }),
        )
    }

    /// Mean over every `k×k` window that fits entirely inside the image
    /// ("valid" filtering): `(N,C,H,W) -> (N,C,H-k+1,W-k+1)`.
    pub fn box_filter(self, k: usize) -> Var<'g> {
        let x = self.value();
        let (n, c, h, w) = dims4(&x);
        assert!(h >= k && w >= k, "box filter {k} larger than image {h}x{w}");
        let (oh, ow) = (h - k + 1, w - k + 1);
        let norm = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; n * c * oh * ow];
        let mut rows = vec![0.0; h * ow];
        for p in 0..n * c {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            for y in 0..h {
                window_sum(&src[y * w..(y + 1) * w], k, &mut rows[y * ow..(y + 1) * ow]);
            }
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for xx in 0..ow {
                let mut acc: f64 = (0..k).map(|y| rows[y * ow + xx]).sum();
                dst[xx] = acc * norm;
                for y in 1..oh {
                    acc += rows[(y + k - 1) * ow + xx] - rows[(y - 1) * ow + xx];
                    dst[y * ow + xx] = acc * norm;
                }
            }
        }
        self.graph().custom(
            Tensor::from_parts(vec![n, c, oh, ow], out),
            &[self],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut gx = vec![0.0; n * c * h * w];
                let mut cols = vec![0.0; h * ow];
                for p in 0..n * c {
                    let gp = &g[p * oh * ow..(p + 1) * oh * ow];
                    // Adjoint of the vertical pass: spread each output over its k rows.
                    for xx in 0..ow {
                        let mut acc = 0.0;
                        for y in 0..h {
                            if y < oh {
                                acc += gp[y * ow + xx];
                            }
                            if y >= k {
                                acc -= gp[(y - k) * ow + xx];
                            }
                            cols[y * ow + xx] = acc;
                        }
                    }
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    for y in 0..h {
                        let src = &cols[y * ow..(y + 1) * ow];
                        let mut acc = 0.0;
                        for xx in 0..w {
                            if xx < ow {
                                acc += src[xx];
                            }
                            if xx >= k {
                                acc -= src[xx - k];
                            }
                            dst[y * w + xx] = acc * norm;
                        }
                    }
                }
                vec![Some(Tensor::from_parts(vec![n, c, h, w], gx))]
            }),
        )
    }

    /// Bilinearly sample `self: (N,C,H,W)` at pixel coordinates `coords: (N,Ho,Wo,2)`
    /// (`x` then `y`), clamping coordinates to the image border.
    pub fn grid_sample(self, coords: Var<'g>) -> Var<'g> {
        let (src, grid) = (self.value(), coords.value());
        let (n, c, h, w) = dims4(&src);
        let gs = grid.shape();
        assert!(gs.len() == 4 && gs[0] == n && gs[3] == 2, "grid {:?} for source {:?}", gs, src.shape());
        let (oh, ow) = (gs[1], gs[2]);
        let taps: Vec<Tap> = grid.data().chunks(2).map(|p| Tap::new(p[0], p[1], w, h)).collect();
        let mut out = vec![0.0; n * c * oh * ow];
        for b in 0..n {
            for ch in 0..c {
                let s = &src.data()[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                let dst = &mut out[(b * c + ch) * oh * ow..(b * c + ch + 1) * oh * ow];
                for (i, d) in dst.iter_mut().enumerate() {
                    *d = taps[b * oh * ow + i].sample(s, w);
                }
            }
        }
        let (src_shape, grid_shape) = (src.shape().to_vec(), gs.to_vec());
        self.graph().custom(
            Tensor::from_parts(vec![n, c, oh, ow], out),
            &[self, coords],
            Box::new(move |ctx| {
                let src = &ctx.inputs[0];
                let g = ctx.grad.data();
                let mut gsrc = ctx.needs[0].then(|| vec![0.0; src.numel()]);
                let mut ggrid = ctx.needs[1].then(|| vec![0.0; n * oh * ow * 2]);
                for b in 0..n {
                    for ch in 0..c {
                        let plane = (b * c + ch) * h * w;
                        let s = &src.data()[plane..plane + h * w];
                        for i in 0..oh * ow {
                            let gv = g[(b * c + ch) * oh * ow + i];
                            let t = &taps[b * oh * ow + i];
                            if let Some(gs) = gsrc.as_mut() {
                                t.scatter(gv, &mut gs[plane..plane + h * w], w);
                            }
                            if let Some(gg) = ggrid.as_mut() {
                                let (dx, dy) = t.coord_grad(s, w);
                                gg[(b * oh * ow + i) * 2] += gv * dx;
                                gg[(b * oh * ow + i) * 2 + 1] += gv * dy;
                            }
                        }
                    }
                }
                vec![
                    gsrc.map(|d| Tensor::from_parts(src_shape.clone(), d)),
                    ggrid.map(|d| Tensor::from_parts(grid_shape.clone(), d)),
                ]
            }),
        )
    }
}

/// Sliding sums of width `k` over `src`, written to `dst` (length `src.len() - k + 1`).
fn window_sum(src: &[f64], k: usize, dst: &mut [f64]) {
    let mut acc: f64 = src[..k].iter().sum();
    dst[0] = acc;
    for i in 1..dst.len() {
        acc += src[i + k - 1] - src[i - 1];
        dst[i] = acc;
    }
}

fn resize_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, if i1 == i0 { 0.0 } else { s - i0 as f64 })
        })
        .collect()
}

/// One bilinear lookup with border clamping.
struct Tap {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    wx: f64,
    wy: f64,
    // Derivative of the clamped coordinate w.r.t. the raw one.
    in_x: bool,
    in_y: bool,
}

impl Tap {
    fn axis(v: f64, size: usize) -> (usize, usize, f64, bool) {
        let hi = (size - 1) as f64;
        let inside = v >= 0.0 && v <= hi;
        let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, hi) };
        if size == 1 {
            return (0, 0, 0.0, false);
        }
        let i0 = (v.floor() as usize).min(size - 2);
        (i0, i0 + 1, v - i0 as f64, inside)
    }

    fn new(x: f64, y: f64, w: usize, h: usize) -> Self {
        let (x0, x1, wx, in_x) = Self::axis(x, w);
        let (y0, y1, wy, in_y) = Self::axis(y, h);
        Self { x0, x1, y0, y1, wx, wy, in_x, in_y }
    }

    fn sample(&self, s: &[f64], w: usize) -> f64 {
        let top = s[self.y0 * w + self.x0] * (1.0 - self.wx) + s[self.y0 * w + self.x1] * self.wx;
        let bot = s[self.y1 * w + self.x0] * (1.0 - self.wx) + s[self.y1 * w + self.x1] * self.wx;
        top * (1.0 - self.wy) + bot * self.wy
    }

    fn scatter(&self, g: f64, dst: &mut [f64], w: usize) {
        dst[self.y0 * w + self.x0] += g * (1.0 - self.wy) * (1.0 - self.wx);
        dst[self.y0 * w + self.x1] += g * (1.0 - self.wy) * self.wx;
        dst[self.y1 * w + self.x0] += g * self.wy * (1.0 - self.wx);
        dst[self.y1 * w + self.x1] += g * self.wy * self.wx;
    }

    fn coord_grad(&self, s: &[f64], w: usize) -> (f64, f64) {
        let v00 = s[self.y0 * w + self.x0];
        let v01 = s[self.y0 * w + self.x1];
        let v10 = s[self.y1 * w + self.x0];
        let v11 = s[self.y1 * w + self.x1];
        let dx = if self.in_x { (1.0 - self.wy) * (v01 - v00) + self.wy * (v11 - v10) } else { 0.0 };
        let dy = if self.in_y { (1.0 - self.wx) * (v10 - v00) + self.wx * (v11 - v01) } else { 0.0 };
        (dx, dy)
    }
}
