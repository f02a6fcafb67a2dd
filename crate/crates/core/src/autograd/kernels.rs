//! Forward/backward numerics behind the tape ops.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, IxDyn};

use super::{Padding, RowStat, Tensor};

fn view2(t: &Tensor) -> ArrayView2<'_, f64> {
    t.view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("expected a 2-D tensor")
}

pub(super) fn matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
    let a = view2(a);
    let b = view2(b);
    let a = if ta { a.reversed_axes() } else { a };
    let b = if tb { b.reversed_axes() } else { b };
    a.dot(&b).into_dyn()
}

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
    ho: usize,
    wo: usize,
    pad: Padding,
}

impl ConvGeom {
    fn new(x: &Tensor, w: &Tensor, pad: Padding) -> Self {
        let (_, c, h, wd) = dims4(x);
        let (_, wc, kh, kw) = dims4(w);
        assert_eq!(c, wc, "conv channel mismatch: input {c}, kernel {wc}");
        let ho = (h + pad.top + pad.bottom + 1)
            .checked_sub(kh)
            .expect("kernel taller than padded input");
        let wo = (wd + pad.left + pad.right + 1)
            .checked_sub(kw)
            .expect("kernel wider than padded input");
        Self {
            c,
            h,
            w: wd,
            kh,
            kw,
            ho,
            wo,
            pad,
        }
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    /// For kernel offset (i, j): valid output ranges and source offsets.
    fn ranges(&self, i: usize, j: usize) -> ((usize, usize), (usize, usize)) {
        let h0 = self.pad.top.saturating_sub(i);
        let h1 = (self.h + self.pad.top).saturating_sub(i).min(self.ho);
        let w0 = self.pad.left.saturating_sub(j);
        let w1 = (self.w + self.pad.left).saturating_sub(j).min(self.wo);
        ((h0, h1.max(h0)), (w0, w1.max(w0)))
    }

    fn im2col(&self, x: &[f64]) -> Array2<f64> {
        let plane = self.h * self.w;
        let cols_n = self.ho * self.wo;
        let mut cols = Array2::<f64>::zeros((self.rows(), cols_n));
        let dst = cols.as_slice_mut().unwrap();
        for c in 0..self.c {
            let src = &x[c * plane..(c + 1) * plane];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let ((h0, h1), (w0, w1)) = self.ranges(i, j);
                    let row = (c * self.kh + i) * self.kw + j;
                    let out = &mut dst[row * cols_n..(row + 1) * cols_n];
                    for ho in h0..h1 {
                        let hi = ho + i - self.pad.top;
                        let wi0 = w0 + j - self.pad.left;
                        let n = w1 - w0;
                        out[ho * self.wo + w0..ho * self.wo + w1]
                            .copy_from_slice(&src[hi * self.w + wi0..hi * self.w + wi0 + n]);
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &Array2<f64>, gx: &mut [f64]) {
        let plane = self.h * self.w;
        let cols_n = self.ho * self.wo;
        let src = cols.as_slice().unwrap();
        for c in 0..self.c {
            let dst = &mut gx[c * plane..(c + 1) * plane];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let ((h0, h1), (w0, w1)) = self.ranges(i, j);
                    let row = (c * self.kh + i) * self.kw + j;
                    let r = &src[row * cols_n..(row + 1) * cols_n];
                    for ho in h0..h1 {
                        let hi = ho + i - self.pad.top;
                        let wi0 = w0 + j - self.pad.left;
                        let d = &mut dst[hi * self.w + wi0..hi * self.w + wi0 + (w1 - w0)];
                        for (d, s) in d.iter_mut().zip(&r[ho * self.wo + w0..ho * self.wo + w1]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

pub(super) fn conv2d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, pad: Padding) -> Tensor {
    let geom = ConvGeom::new(x, w, pad);
    let (n, _, _, _) = dims4(x);
    let o = w.shape()[0];
    let x = x.as_standard_layout();
    let xs = x.as_slice().unwrap();
    let w = w.as_standard_layout();
    let wm = ArrayView2::from_shape((o, geom.rows()), w.as_slice().unwrap()).unwrap();
    let per_in = geom.c * geom.h * geom.w;
    let per_out = o * geom.ho * geom.wo;
    let mut out = vec![0.0; n * per_out];
    for s in 0..n {
        let cols = geom.im2col(&xs[s * per_in..(s + 1) * per_in]);
        let mut y = Array2::<f64>::zeros((o, geom.ho * geom.wo));
        general_mat_mul(1.0, &wm, &cols, 0.0, &mut y);
        if let Some(b) = b {
            for (mut row, bv) in y.rows_mut().into_iter().zip(b.iter()) {
                row += *bv;
            }
        }
        out[s * per_out..(s + 1) * per_out].copy_from_slice(y.as_slice().unwrap());
    }
    Tensor::from_shape_vec(IxDyn(&[n, o, geom.ho, geom.wo]), out).unwrap()
}

#[allow(clippy::type_complexity)]
pub(super) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    pad: Padding,
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let geom = ConvGeom::new(x, w, pad);
    let (n, _, _, _) = dims4(x);
    let o = w.shape()[0];
    let x = x.as_standard_layout();
    let xs = x.as_slice().unwrap();
    let wstd = w.as_standard_layout();
    let wm = ArrayView2::from_shape((o, geom.rows()), wstd.as_slice().unwrap()).unwrap();
    let g = g.as_standard_layout();
    let gs = g.as_slice().unwrap();
    let per_in = geom.c * geom.h * geom.w;
    let per_out = o * geom.ho * geom.wo;
    let mut gx = need_x.then(|| vec![0.0; n * per_in]);
    let mut gw = need_w.then(|| Array2::<f64>::zeros((o, geom.rows())));
    let mut gb = need_b.then(|| vec![0.0; o]);
    for s in 0..n {
        let gn = ArrayView2::from_shape((o, geom.ho * geom.wo), &gs[s * per_out..(s + 1) * per_out])
            .unwrap();
        if let Some(gb) = gb.as_mut() {
            for (acc, row) in gb.iter_mut().zip(gn.rows()) {
                *acc += row.sum();
            }
        }
        if let Some(gw) = gw.as_mut() {
            let cols = geom.im2col(&xs[s * per_in..(s + 1) * per_in]);
            general_mat_mul(1.0, &gn, &cols.t(), 1.0, gw);
        }
        if let Some(gx) = gx.as_mut() {
            let mut dcols = Array2::<f64>::zeros((geom.rows(), geom.ho * geom.wo));
            general_mat_mul(1.0, &wm.t(), &gn, 0.0, &mut dcols);
            geom.col2im(&dcols, &mut gx[s * per_in..(s + 1) * per_in]);
        }
    }
    (
        gx.map(|v| Tensor::from_shape_vec(IxDyn(&[n, geom.c, geom.h, geom.w]), v).unwrap()),
        gw.map(|m| {
            m.into_shape_with_order(IxDyn(w.shape()))
                .unwrap()
                .into_dyn()
        }),
        gb.map(|v| Tensor::from_shape_vec(IxDyn(&[o]), v).unwrap()),
    )
}

pub(super) fn max_pool_forward(x: &Tensor, kh: usize, kw: usize) -> (Tensor, Vec<usize>) {
    let (n, c, h, w) = dims4(x);
    let (ho, wo) = (h / kh, w / kw);
    let x = x.as_standard_layout();
    let xs = x.as_slice().unwrap();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = base;
                for di in 0..kh {
                    for dj in 0..kw {
                        let idx = base + (i * kh + di) * w + j * kw + dj;
                        if xs[idx] > best {
                            best = xs[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (
        Tensor::from_shape_vec(IxDyn(&[n, c, ho, wo]), out).unwrap(),
        arg,
    )
}

/// Adds each gradient element to the source position recorded in `arg`.
pub(super) fn scatter(dim: IxDyn, g: &Tensor, arg: &[usize]) -> Tensor {
    let mut gx = Tensor::zeros(dim);
    let gxs = gx.as_slice_mut().unwrap();
    let g = g.as_standard_layout();
    for (v, &idx) in g.iter().zip(arg) {
        gxs[idx] += v;
    }
    gx
}

pub(super) fn upsample_forward(x: &Tensor, fh: usize, fw: usize) -> Tensor {
    let (n, c, h, w) = dims4(x);
    let x = x.as_standard_layout();
    let xs = x.as_slice().unwrap();
    let (ho, wo) = (h * fh, w * fw);
    let mut out = vec![0.0; n * c * ho * wo];
    for plane in 0..n * c {
        for i in 0..ho {
            for j in 0..wo {
                out[plane * ho * wo + i * wo + j] = xs[plane * h * w + (i / fh) * w + j / fw];
            }
        }
    }
    Tensor::from_shape_vec(IxDyn(&[n, c, ho, wo]), out).unwrap()
}

pub(super) fn upsample_backward(dim: IxDyn, g: &Tensor, fh: usize, fw: usize) -> Tensor {
    let mut gx = Tensor::zeros(dim);
    let (n, c, h, w) = dims4(&gx);
    let (ho, wo) = (h * fh, w * fw);
    let g = g.as_standard_layout();
    let gs = g.as_slice().unwrap();
    let gxs = gx.as_slice_mut().unwrap();
    for plane in 0..n * c {
        for i in 0..ho {
            for j in 0..wo {
                gxs[plane * h * w + (i / fh) * w + j / fw] += gs[plane * ho * wo + i * wo + j];
            }
        }
    }
    gx
}

pub(super) fn masked_max_last(x: &Tensor, valid: &[usize]) -> (Tensor, Vec<usize>) {
    let shape = x.shape();
    let n = shape[0];
    let t = *shape.last().unwrap();
    let m = x.len() / (n * t);
    assert_eq!(valid.len(), n, "one valid length per row required");
    let x = x.as_standard_layout();
    let xs = x.as_slice().unwrap();
    let mut out = Vec::with_capacity(n * m);
    let mut arg = Vec::with_capacity(n * m);
    for (s, &v) in valid.iter().enumerate() {
        let v = v.clamp(1, t);
        for k in 0..m {
            let base = (s * m + k) * t;
            let (mut best, mut best_idx) = (f64::NEG_INFINITY, base);
            for (idx, &val) in xs[base..base + v].iter().enumerate() {
                if val > best {
                    best = val;
                    best_idx = base + idx;
                }
            }
            out.push(best);
            arg.push(best_idx);
        }
    }
    (Tensor::from_shape_vec(IxDyn(&[n, m]), out).unwrap(), arg)
}

pub(super) fn row_stat(x: &Tensor, stat: RowStat) -> (Tensor, Vec<usize>) {
    let xv = view2(x);
    let (b, d) = xv.dim();
    let mut out = Vec::with_capacity(d);
    let mut arg = Vec::new();
    for col in xv.columns() {
        match stat {
            RowStat::Mean => out.push(col.sum() / b as f64),
            RowStat::Std => {
                let mu = col.sum() / b as f64;
                let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / b as f64;
                out.push(var.sqrt());
            }
            RowStat::Min | RowStat::Max => {
                let mut best = col[0];
                let mut best_i = 0;
                for (i, &v) in col.iter().enumerate() {
                    let better = match stat {
                        RowStat::Min => v < best,
                        _ => v > best,
                    };
                    if better {
                        best = v;
                        best_i = i;
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (Tensor::from_shape_vec(IxDyn(&[1, d]), out).unwrap(), arg)
}

pub(super) fn row_stat_backward(
    x: &Tensor,
    out: &Tensor,
    g: &Tensor,
    stat: RowStat,
    arg: &[usize],
) -> Tensor {
    let xv = view2(x);
    let (b, d) = xv.dim();
    let gv = view2(g);
    let ov = view2(out);
    let mut gx = Array2::<f64>::zeros((b, d));
    for j in 0..d {
        let gj = gv[[0, j]];
        match stat {
            RowStat::Mean => gx.column_mut(j).fill(gj / b as f64),
            RowStat::Std => {
                let sd = ov[[0, j]];
                if sd > 0.0 {
                    let mu = xv.column(j).sum() / b as f64;
                    for i in 0..b {
                        gx[[i, j]] = gj * (xv[[i, j]] - mu) / (b as f64 * sd);
                    }
                }
            }
            RowStat::Min | RowStat::Max => gx[[arg[j], j]] = gj,
        }
    }
    gx.into_dyn()
}

/// `f(r) = tanh(r) / r` and `f'(r) / r`, with series expansions near 0.
fn bound_factors(r: f64) -> (f64, f64) {
    if r < 1e-4 {
        let r2 = r * r;
        (1.0 - r2 / 3.0 + 2.0 * r2 * r2 / 15.0, -2.0 / 3.0 + 8.0 * r2 / 15.0)
    } else {
        let t = r.tanh();
        let f = t / r;
        let df = (r * (1.0 - t * t) - t) / (r * r);
        (f, df / r)
    }
}

fn complex_planes(x: &Tensor) -> (usize, usize) {
    let (n, c, h, w) = dims4(x);
    assert_eq!(c, 2, "complex tensors carry real/imag in 2 channels");
    (n, h * w)
}

pub(super) fn bound_complex_forward(x: &Tensor) -> Tensor {
    let (n, p) = complex_planes(x);
    let x = x.as_standard_layout();
    let xs = x.as_slice().unwrap();
    let mut out = vec![0.0; xs.len()];
    for s in 0..n {
        let (re, im) = (s * 2 * p, s * 2 * p + p);
        for k in 0..p {
            let (a, b) = (xs[re + k], xs[im + k]);
            let (f, _) = bound_factors(a.hypot(b));
            out[re + k] = f * a;
            out[im + k] = f * b;
        }
    }
    Tensor::from_shape_vec(x.raw_dim(), out).unwrap()
}

pub(super) fn bound_complex_backward(x: &Tensor, g: &Tensor) -> Tensor {
    let (n, p) = complex_planes(x);
    let x = x.as_standard_layout();
    let xs = x.as_slice().unwrap();
    let g = g.as_standard_layout();
    let gs = g.as_slice().unwrap();
    let mut gx = vec![0.0; xs.len()];
    for s in 0..n {
        let (re, im) = (s * 2 * p, s * 2 * p + p);
        for k in 0..p {
            let (a, b) = (xs[re + k], xs[im + k]);
            let (ga, gb) = (gs[re + k], gs[im + k]);
            let (f, q) = bound_factors(a.hypot(b));
            let dot = a * ga + b * gb;
            gx[re + k] = f * ga + q * dot * a;
            gx[im + k] = f * gb + q * dot * b;
        }
    }
    Tensor::from_shape_vec(x.raw_dim(), gx).unwrap()
}

pub(super) fn complex_abs_forward(x: &Tensor) -> Tensor {
    let (n, p) = complex_planes(x);
    let (_, _, h, w) = dims4(x);
    let x = x.as_standard_layout();
    let xs = x.as_slice().unwrap();
    let mut out = vec![0.0; n * p];
    for s in 0..n {
        for k in 0..p {
            out[s * p + k] = xs[s * 2 * p + k].hypot(xs[s * 2 * p + p + k]);
        }
    }
    Tensor::from_shape_vec(IxDyn(&[n, 1, h, w]), out).unwrap()
}

pub(super) fn complex_abs_backward(x: &Tensor, out: &Tensor, g: &Tensor) -> Tensor {
    let (n, p) = complex_planes(x);
    let x = x.as_standard_layout();
    let xs = x.as_slice().unwrap();
    let out = out.as_standard_layout();
    let os = out.as_slice().unwrap();
    let g = g.as_standard_layout();
    let gs = g.as_slice().unwrap();
    let mut gx = vec![0.0; xs.len()];
    for s in 0..n {
        for k in 0..p {
            let r = os[s * p + k];
            if r > 0.0 {
                let scale = gs[s * p + k] / r;
                gx[s * 2 * p + k] = scale * xs[s * 2 * p + k];
                gx[s * 2 * p + p + k] = scale * xs[s * 2 * p + p + k];
            }
        }
    }
    Tensor::from_shape_vec(x.raw_dim(), gx).unwrap()
}

pub(super) fn complex_mul(x: &Tensor, c: &Tensor) -> Tensor {
    assert_eq!(x.shape(), c.shape(), "complex product shape mismatch");
    let (n, p) = complex_planes(x);
    let x = x.as_standard_layout();
    let xs = x.as_slice().unwrap();
    let c = c.as_standard_layout();
    let cs = c.as_slice().unwrap();
    let mut out = vec![0.0; xs.len()];
    for s in 0..n {
        let (re, im) = (s * 2 * p, s * 2 * p + p);
        for k in 0..p {
            let (a, b) = (xs[re + k], xs[im + k]);
            let (cr, ci) = (cs[re + k], cs[im + k]);
            out[re + k] = a * cr - b * ci;
            out[im + k] = a * ci + b * cr;
        }
    }
    Tensor::from_shape_vec(x.raw_dim(), out).unwrap()
}

pub(super) fn complex_mul_backward(c: &Tensor, g: &Tensor) -> Tensor {
    let (n, p) = complex_planes(c);
    let c = c.as_standard_layout();
    let cs = c.as_slice().unwrap();
    let g = g.as_standard_layout();
    let gs = g.as_slice().unwrap();
    let mut gx = vec![0.0; cs.len()];
    for s in 0..n {
        let (re, im) = (s * 2 * p, s * 2 * p + p);
        for k in 0..p {
            let (gr, gi) = (gs[re + k], gs[im + k]);
            let (cr, ci) = (cs[re + k], cs[im + k]);
            gx[re + k] = gr * cr + gi * ci;
            gx[im + k] = -gr * ci + gi * cr;
        }
    }
    Tensor::from_shape_vec(c.raw_dim(), gx).unwrap()
}
