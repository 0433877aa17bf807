//! 1-D and 2-D cross-correlation via im2col + GEMM.

use super::tape::{Tape, Var};
use super::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1dOpts {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for Conv1dOpts {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

impl Conv1dOpts {
    /// Stride-1 zero padding that preserves the time length for odd kernels.
    pub fn same(kernel: usize) -> Self {
        Self {
            padding: (kernel - 1) / 2,
            ..Self::default()
        }
    }

    pub fn depthwise(kernel: usize, channels: usize) -> Self {
        Self {
            groups: channels,
            ..Self::same(kernel)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dOpts {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Default for Conv2dOpts {
    fn default() -> Self {
        Self {
            stride: (1, 1),
            padding: (0, 0),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Geom1d {
    c_in: usize,
    t_in: usize,
    c_out: usize,
    k: usize,
    t_out: usize,
    o: Conv1dOpts,
}

impl Geom1d {
    fn cin_g(&self) -> usize {
        self.c_in / self.o.groups
    }
    fn cout_g(&self) -> usize {
        self.c_out / self.o.groups
    }
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.o.stride == 1 && self.o.padding == 0
    }
}

fn im2col_1d<R: Real>(x: &[R], g: &Geom1d, group: usize, cols: &mut [R]) {
    let cin_g = g.cin_g();
    let base = group * cin_g;
    for c in 0..cin_g {
        let row_in = &x[(base + c) * g.t_in..(base + c + 1) * g.t_in];
        for k in 0..g.k {
            let row = &mut cols[(c * g.k + k) * g.t_out..(c * g.k + k + 1) * g.t_out];
            let off = (k * g.o.dilation) as isize - g.o.padding as isize;
            for (t, slot) in row.iter_mut().enumerate() {
                let i = (t * g.o.stride) as isize + off;
                *slot = if i >= 0 && (i as usize) < g.t_in {
                    row_in[i as usize]
                } else {
                    R::zero()
                };
            }
        }
    }
}

fn col2im_1d<R: Real>(cols: &[R], g: &Geom1d, group: usize, dx: &mut [R]) {
    let cin_g = g.cin_g();
    let base = group * cin_g;
    for c in 0..cin_g {
        let row_out = &mut dx[(base + c) * g.t_in..(base + c + 1) * g.t_in];
        for k in 0..g.k {
            let row = &cols[(c * g.k + k) * g.t_out..(c * g.k + k + 1) * g.t_out];
            let off = (k * g.o.dilation) as isize - g.o.padding as isize;
            for (t, &v) in row.iter().enumerate() {
                let i = (t * g.o.stride) as isize + off;
                if i >= 0 && (i as usize) < g.t_in {
                    row_out[i as usize] = row_out[i as usize] + v;
                }
            }
        }
    }
}

fn conv1d_forward<R: Real>(x: &[R], w: &[R], b: Option<&[R]>, g: &Geom1d) -> Vec<R> {
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let kk = cin_g * g.k;
    let mut out = vec![R::zero(); g.c_out * g.t_out];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![R::zero(); kk * g.t_out]
    };
    for group in 0..g.o.groups {
        let col_slice: &[R] = if g.is_pointwise() {
            &x[group * cin_g * g.t_in..(group + 1) * cin_g * g.t_in]
        } else {
            im2col_1d(x, g, group, &mut cols);
            &cols
        };
        let w_g = &w[group * cout_g * kk..(group + 1) * cout_g * kk];
        let out_g = &mut out[group * cout_g * g.t_out..(group + 1) * cout_g * g.t_out];
        R::gemm(
            cout_g, kk, g.t_out, R::one(), w_g, kk, 1, col_slice, g.t_out, 1, R::zero(), out_g,
            g.t_out, 1,
        );
    }
    if let Some(b) = b {
        for (co, row) in out.chunks_mut(g.t_out).enumerate() {
            row.iter_mut().for_each(|v| *v = *v + b[co]);
        }
    }
    out
}

impl<R: Real> Tape<R> {
    /// `input [C_in, T]`, `weight [C_out, C_in/groups, K]`, `bias [C_out]`.
    pub fn conv1d(&mut self, input: Var, weight: Var, bias: Option<Var>, opts: Conv1dOpts) -> Var {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        assert_eq!(xs.len(), 2, "conv1d input must be [C, T], got {xs:?}");
        assert_eq!(ws.len(), 3, "conv1d weight must be [C_out, C_in/g, K], got {ws:?}");
        let (c_in, t_in) = (xs[0], xs[1]);
        let (c_out, k) = (ws[0], ws[2]);
        assert!(opts.groups >= 1 && opts.stride >= 1 && opts.dilation >= 1);
        assert_eq!(c_in % opts.groups, 0, "conv1d: C_in not divisible by groups");
        assert_eq!(c_out % opts.groups, 0, "conv1d: C_out not divisible by groups");
        assert_eq!(ws[1], c_in / opts.groups, "conv1d: weight/input channel mismatch");
        if let Some(b) = bias {
            assert_eq!(self.shape(b), &[c_out], "conv1d: bias shape");
        }
        let span = opts.dilation * (k - 1) + 1;
        assert!(
            t_in + 2 * opts.padding >= span,
            "conv1d: input length {t_in} too short for kernel span {span}"
        );
        let t_out = (t_in + 2 * opts.padding - span) / opts.stride + 1;
        let g = Geom1d {
            c_in,
            t_in,
            c_out,
            k,
            t_out,
            o: opts,
        };
        let value = conv1d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            &g,
        );
        let mut parents = vec![input, weight];
        parents.extend(bias);
        self.custom(
            &parents,
            vec![c_out, t_out],
            value,
            Box::new(move |ctx| {
                let (x, w, gout) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
                let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
                let kk = cin_g * g.k;
                let mut dx = ctx.needs[0].then(|| vec![R::zero(); x.len()]);
                let mut dw = ctx.needs[1].then(|| vec![R::zero(); w.len()]);
                let mut cols = vec![R::zero(); kk * g.t_out];
                for group in 0..g.o.groups {
                    let g_out = &gout[group * cout_g * g.t_out..(group + 1) * cout_g * g.t_out];
                    if let Some(dw) = dw.as_mut() {
                        let col_slice: &[R] = if g.is_pointwise() {
                            &x[group * cin_g * g.t_in..(group + 1) * cin_g * g.t_in]
                        } else {
                            im2col_1d(x, &g, group, &mut cols);
                            &cols
                        };
                        let dw_g = &mut dw[group * cout_g * kk..(group + 1) * cout_g * kk];
                        // dW = gout · colsᵀ
                        R::gemm(
                            cout_g, g.t_out, kk, R::one(), g_out, g.t_out, 1, col_slice, 1,
                            g.t_out, R::zero(), dw_g, kk, 1,
                        );
                    }
                    if let Some(dx) = dx.as_mut() {
                        let w_g = &w[group * cout_g * kk..(group + 1) * cout_g * kk];
                        if g.is_pointwise() {
                            let dx_g = &mut dx[group * cin_g * g.t_in..(group + 1) * cin_g * g.t_in];
                            R::gemm(
                                kk, cout_g, g.t_out, R::one(), w_g, 1, kk, g_out, g.t_out, 1,
                                R::zero(), dx_g, g.t_out, 1,
                            );
                        } else {
                            R::gemm(
                                kk, cout_g, g.t_out, R::one(), w_g, 1, kk, g_out, g.t_out, 1,
                                R::zero(), &mut cols, g.t_out, 1,
                            );
                            col2im_1d(&cols, &g, group, dx);
                        }
                    }
                }
                let mut grads = vec![dx, dw];
                if ctx.inputs.len() == 3 {
                    grads.push(ctx.needs[2].then(|| {
                        gout.chunks(g.t_out)
                            .map(|row| row.iter().copied().sum::<R>())
                            .collect()
                    }));
                }
                grads
            }),
        )
    }
}

#[derive(Debug, Clone, Copy)]
struct Geom2d {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    h_out: usize,
    w_out: usize,
    o: Conv2dOpts,
}

impl Geom2d {
    fn kk(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
    fn n_out(&self) -> usize {
        self.h_out * self.w_out
    }
}

fn im2col_2d<R: Real>(x: &[R], g: &Geom2d, cols: &mut [R]) {
    let n = g.n_out();
    let (sh, sw) = g.o.stride;
    let (ph, pw) = g.o.padding;
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = &mut cols[((c * g.kh + ki) * g.kw + kj) * n..][..n];
                for oi in 0..g.h_out {
                    let i = (oi * sh + ki) as isize - ph as isize;
                    let dst = &mut row[oi * g.w_out..(oi + 1) * g.w_out];
                    if i < 0 || i as usize >= g.h {
                        dst.iter_mut().for_each(|v| *v = R::zero());
                        continue;
                    }
                    let src = &plane[i as usize * g.w..(i as usize + 1) * g.w];
                    for (oj, slot) in dst.iter_mut().enumerate() {
                        let j = (oj * sw + kj) as isize - pw as isize;
                        *slot = if j >= 0 && (j as usize) < g.w {
                            src[j as usize]
                        } else {
                            R::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im_2d<R: Real>(cols: &[R], g: &Geom2d, dx: &mut [R]) {
    let n = g.n_out();
    let (sh, sw) = g.o.stride;
    let (ph, pw) = g.o.padding;
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = &cols[((c * g.kh + ki) * g.kw + kj) * n..][..n];
                for oi in 0..g.h_out {
                    let i = (oi * sh + ki) as isize - ph as isize;
                    if i < 0 || i as usize >= g.h {
                        continue;
                    }
                    let dst = &mut plane[i as usize * g.w..(i as usize + 1) * g.w];
                    let src = &row[oi * g.w_out..(oi + 1) * g.w_out];
                    for (oj, &v) in src.iter().enumerate() {
                        let j = (oj * sw + kj) as isize - pw as isize;
                        if j >= 0 && (j as usize) < g.w {
                            dst[j as usize] = dst[j as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

impl<R: Real> Tape<R> {
    /// `input [C_in, H, W]`, `weight [C_out, C_in, KH, KW]`, `bias [C_out]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, opts: Conv2dOpts) -> Var {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        assert_eq!(xs.len(), 3, "conv2d input must be [C, H, W], got {xs:?}");
        assert_eq!(ws.len(), 4, "conv2d weight must be [C_out, C_in, KH, KW], got {ws:?}");
        assert_eq!(ws[1], xs[0], "conv2d: weight/input channel mismatch");
        if let Some(b) = bias {
            assert_eq!(self.shape(b), &[ws[0]], "conv2d: bias shape");
        }
        let (sh, sw) = opts.stride;
        let (ph, pw) = opts.padding;
        assert!(sh >= 1 && sw >= 1);
        assert!(
            xs[1] + 2 * ph >= ws[2] && xs[2] + 2 * pw >= ws[3],
            "conv2d: input {xs:?} smaller than kernel {ws:?}"
        );
        let g = Geom2d {
            c_in: xs[0],
            h: xs[1],
            w: xs[2],
            c_out: ws[0],
            kh: ws[2],
            kw: ws[3],
            h_out: (xs[1] + 2 * ph - ws[2]) / sh + 1,
            w_out: (xs[2] + 2 * pw - ws[3]) / sw + 1,
            o: opts,
        };
        let (kk, n) = (g.kk(), g.n_out());
        let mut cols = vec![R::zero(); kk * n];
        im2col_2d(self.value(input), &g, &mut cols);
        let mut out = vec![R::zero(); g.c_out * n];
        R::gemm(
            g.c_out, kk, n, R::one(), self.value(weight), kk, 1, &cols, n, 1, R::zero(), &mut out,
            n, 1,
        );
        if let Some(b) = bias {
            let b = self.value(b);
            for (co, row) in out.chunks_mut(n).enumerate() {
                row.iter_mut().for_each(|v| *v = *v + b[co]);
            }
        }
        let mut parents = vec![input, weight];
        parents.extend(bias);
        self.custom(
            &parents,
            vec![g.c_out, g.h_out, g.w_out],
            out,
            Box::new(move |ctx| {
                let (x, w, gout) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
                let (kk, n) = (g.kk(), g.n_out());
                let mut cols = vec![R::zero(); kk * n];
                let dw = ctx.needs[1].then(|| {
                    im2col_2d(x, &g, &mut cols);
                    let mut dw = vec![R::zero(); w.len()];
                    R::gemm(
                        g.c_out, n, kk, R::one(), gout, n, 1, &cols, 1, n, R::zero(), &mut dw, kk,
                        1,
                    );
                    dw
                });
                let dx = ctx.needs[0].then(|| {
                    R::gemm(
                        kk, g.c_out, n, R::one(), w, 1, kk, gout, n, 1, R::zero(), &mut cols, n, 1,
                    );
                    let mut dx = vec![R::zero(); x.len()];
                    col2im_2d(&cols, &g, &mut dx);
                    dx
                });
                let mut grads = vec![dx, dw];
                if ctx.inputs.len() == 3 {
                    grads.push(ctx.needs[2].then(|| {
                        gout.chunks(n).map(|row| row.iter().copied().sum::<R>()).collect()
                    }));
                }
                grads
            }),
        )
    }
}
