//! Slice-level kernels shared by the value API and the adjoint rules.
//!
//! Every reduction sums in ascending index order so results are bit-stable
//! from run to run.

use crate::error::{Error, Result};

pub const NORM_EPS: f64 = 1e-5;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// `[m,k] x [k,n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `[k,m]^T x [k,n]`.
pub fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            let row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `[m,k] x [n,k]^T`.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            c[i * n + j] = acc;
        }
    }
    c
}

pub fn softmax_inplace(row: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Zero-mean / unit-variance rows. Returns the normalized values and each
/// row's `1 / sqrt(var + eps)`.
pub fn normalize_rows(x: &[f64], n: usize, c: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; n * c];
    let mut inv_std = vec![0.0; n];
    for r in 0..n {
        let row = &x[r * c..(r + 1) * c];
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std[r] = inv;
        for (o, &v) in out[r * c..(r + 1) * c].iter_mut().zip(row) {
            *o = (v - mean) * inv;
        }
    }
    (out, inv_std)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s + x * s * (1.0 - s)
}

/// GELU, tanh approximation.
#[inline]
pub fn gelu(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvMode {
    /// 1x1 dense convolution.
    Pointwise,
    /// One filter per channel; kernel `[C, 1, kh, kw]`.
    Depthwise,
    /// Full cross-correlation; kernel `[C_out, C_in, kh, kw]`.
    Dense,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub mode: ConvMode,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn pointwise() -> Self {
        ConvSpec {
            mode: ConvMode::Pointwise,
            stride: 1,
            padding: 0,
        }
    }

    pub fn depthwise(padding: usize) -> Self {
        ConvSpec {
            mode: ConvMode::Depthwise,
            stride: 1,
            padding,
        }
    }

    pub fn dense(padding: usize) -> Self {
        ConvSpec {
            mode: ConvMode::Dense,
            stride: 1,
            padding,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeometry {
    pub spec: ConvSpec,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], spec: ConvSpec) -> Result<Self> {
        let (c_in, h, w) = match input {
            &[c, h, w] => (c, h, w),
            _ => return Err(Error::invalid("conv2d", format!("input must be [C,H,W], got {input:?}"))),
        };
        let (c_out, k_in, kh, kw) = match kernel {
            &[a, b, c, d] => (a, b, c, d),
            _ => return Err(Error::invalid("conv2d", format!("kernel must be rank 4, got {kernel:?}"))),
        };
        if spec.stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        let consistent = match spec.mode {
            ConvMode::Pointwise => k_in == c_in && kh == 1 && kw == 1,
            ConvMode::Depthwise => k_in == 1 && c_out == c_in,
            ConvMode::Dense => k_in == c_in,
        };
        if !consistent {
            return Err(Error::shape("conv2d", input, kernel));
        }
        if h + 2 * spec.padding < kh || w + 2 * spec.padding < kw {
            return Err(Error::shape("conv2d", input, kernel));
        }
        Ok(ConvGeometry {
            spec,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            h_out: (h + 2 * spec.padding - kh) / spec.stride + 1,
            w_out: (w + 2 * spec.padding - kw) / spec.stride + 1,
        })
    }

    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.spec.stride + k) as isize - self.spec.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let p = self.h_out * self.w_out;
        let rows = self.c_in * self.kh * self.kw;
        let mut cols = vec![0.0; rows * p];
        for ci in 0..self.c_in {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let r = (ci * self.kh + ky) * self.kw + kx;
                    for oy in 0..self.h_out {
                        let Some(iy) = self.source(oy, ky, self.h) else { continue };
                        for ox in 0..self.w_out {
                            if let Some(ix) = self.source(ox, kx, self.w) {
                                cols[r * p + oy * self.w_out + ox] = x[(ci * self.h + iy) * self.w + ix];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let p = self.h_out * self.w_out;
        let mut gx = vec![0.0; self.c_in * self.h * self.w];
        for ci in 0..self.c_in {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let r = (ci * self.kh + ky) * self.kw + kx;
                    for oy in 0..self.h_out {
                        let Some(iy) = self.source(oy, ky, self.h) else { continue };
                        for ox in 0..self.w_out {
                            if let Some(ix) = self.source(ox, kx, self.w) {
                                gx[(ci * self.h + iy) * self.w + ix] += cols[r * p + oy * self.w_out + ox];
                            }
                        }
                    }
                }
            }
        }
        gx
    }
}

pub fn conv2d(x: &[f64], kernel: &[f64], bias: Option<&[f64]>, g: &ConvGeometry) -> Vec<f64> {
    let p = g.h_out * g.w_out;
    let mut out = match g.spec.mode {
        ConvMode::Depthwise => {
            let mut out = vec![0.0; g.c_out * p];
            for c in 0..g.c_in {
                for oy in 0..g.h_out {
                    for ox in 0..g.w_out {
                        let mut acc = 0.0;
                        for ky in 0..g.kh {
                            let Some(iy) = g.source(oy, ky, g.h) else { continue };
                            for kx in 0..g.kw {
                                if let Some(ix) = g.source(ox, kx, g.w) {
                                    acc += kernel[(c * g.kh + ky) * g.kw + kx] * x[(c * g.h + iy) * g.w + ix];
                                }
                            }
                        }
                        out[c * p + oy * g.w_out + ox] = acc;
                    }
                }
            }
            out
        }
        ConvMode::Pointwise | ConvMode::Dense => {
            let cols = g.im2col(x);
            matmul(kernel, &cols, g.c_out, g.c_in * g.kh * g.kw, p)
        }
    };
    if let Some(b) = bias {
        for (co, row) in out.chunks_mut(p).enumerate() {
            row.iter_mut().for_each(|v| *v += b[co]);
        }
    }
    out
}

/// Adjoints of [`conv2d`]: `(d input, d kernel, d bias)`.
pub fn conv2d_backward(
    x: &[f64],
    kernel: &[f64],
    gout: &[f64],
    g: &ConvGeometry,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let p = g.h_out * g.w_out;
    let gbias: Vec<f64> = gout.chunks(p).map(|row| row.iter().sum()).collect();
    match g.spec.mode {
        ConvMode::Depthwise => {
            let mut gx = vec![0.0; x.len()];
            let mut gk = vec![0.0; kernel.len()];
            for c in 0..g.c_in {
                for oy in 0..g.h_out {
                    for ox in 0..g.w_out {
                        let go = gout[c * p + oy * g.w_out + ox];
                        for ky in 0..g.kh {
                            let Some(iy) = g.source(oy, ky, g.h) else { continue };
                            for kx in 0..g.kw {
                                if let Some(ix) = g.source(ox, kx, g.w) {
                                    let xi = (c * g.h + iy) * g.w + ix;
                                    let ki = (c * g.kh + ky) * g.kw + kx;
                                    gk[ki] += go * x[xi];
                                    gx[xi] += go * kernel[ki];
                                }
                            }
                        }
                    }
                }
            }
            (gx, gk, gbias)
        }
        ConvMode::Pointwise | ConvMode::Dense => {
            let rows = g.c_in * g.kh * g.kw;
            let cols = g.im2col(x);
            let gk = matmul_nt(gout, &cols, g.c_out, p, rows);
            let gcols = matmul_tn(kernel, gout, g.c_out, rows, p);
            (g.col2im(&gcols), gk, gbias)
        }
    }
}

pub fn conv1d_causal(x: &[f64], kernel: &[f64], bias: Option<&[f64]>, l: usize, d: usize, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; l * d];
    for t in 0..l {
        for ch in 0..d {
            let mut acc = 0.0;
            for j in 0..width {
                // tap j reads token t - (width - 1) + j
                if let Some(src) = (t + j).checked_sub(width - 1) {
                    acc += kernel[ch * width + j] * x[src * d + ch];
                }
            }
            out[t * d + ch] = acc + bias.map_or(0.0, |b| b[ch]);
        }
    }
    out
}

pub fn conv1d_causal_backward(
    x: &[f64],
    kernel: &[f64],
    gout: &[f64],
    l: usize,
    d: usize,
    width: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; l * d];
    let mut gk = vec![0.0; d * width];
    let mut gb = vec![0.0; d];
    for t in 0..l {
        for ch in 0..d {
            let go = gout[t * d + ch];
            gb[ch] += go;
            for j in 0..width {
                if let Some(src) = (t + j).checked_sub(width - 1) {
                    gk[ch * width + j] += go * x[src * d + ch];
                    gx[src * d + ch] += go * kernel[ch * width + j];
                }
            }
        }
    }
    (gx, gk, gb)
}

/// Corner indices and weights of one clamped bilinear lookup.
#[derive(Clone, Copy, Debug)]
pub struct BilinearTap {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
    pub fx: f64,
    pub fy: f64,
    /// Whether the coordinate lay strictly inside the grid (non-zero slope).
    pub x_free: bool,
    pub y_free: bool,
}

impl BilinearTap {
    pub fn new(x: f64, y: f64, h: usize, w: usize) -> Self {
        let xmax = (w - 1) as f64;
        let ymax = (h - 1) as f64;
        let xc = x.clamp(0.0, xmax);
        let yc = y.clamp(0.0, ymax);
        let x0 = xc.floor() as usize;
        let y0 = yc.floor() as usize;
        BilinearTap {
            x0,
            x1: (x0 + 1).min(w - 1),
            y0,
            y1: (y0 + 1).min(h - 1),
            fx: xc - x0 as f64,
            fy: yc - y0 as f64,
            x_free: x > 0.0 && x < xmax,
            y_free: y > 0.0 && y < ymax,
        }
    }

    pub fn weights(&self) -> [f64; 4] {
        let (fx, fy) = (self.fx, self.fy);
        [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy]
    }

    pub fn cells(&self) -> [(usize, usize); 4] {
        [(self.y0, self.x0), (self.y0, self.x1), (self.y1, self.x0), (self.y1, self.x1)]
    }
}

pub fn bilinear_sample(f: &[f64], h: usize, w: usize, c: usize, points: &[f64]) -> Vec<f64> {
    let n = points.len() / 2;
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        let tap = BilinearTap::new(points[2 * i], points[2 * i + 1], h, w);
        let wts = tap.weights();
        let cells = tap.cells();
        let dst = &mut out[i * c..(i + 1) * c];
        for (&(y, x), &wt) in cells.iter().zip(&wts) {
            let src = &f[(y * w + x) * c..(y * w + x + 1) * c];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += wt * s;
            }
        }
    }
    out
}

/// Adjoints of [`bilinear_sample`]: `(d grid, d points)`. Slopes are zero
/// along a coordinate that was clamped.
pub fn bilinear_sample_backward(
    f: &[f64],
    h: usize,
    w: usize,
    c: usize,
    points: &[f64],
    gout: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let n = points.len() / 2;
    let mut gf = vec![0.0; f.len()];
    let mut gp = vec![0.0; points.len()];
    for i in 0..n {
        let tap = BilinearTap::new(points[2 * i], points[2 * i + 1], h, w);
        let wts = tap.weights();
        let cells = tap.cells();
        let go = &gout[i * c..(i + 1) * c];
        for (&(y, x), &wt) in cells.iter().zip(&wts) {
            let dst = &mut gf[(y * w + x) * c..(y * w + x + 1) * c];
            for (d, &g) in dst.iter_mut().zip(go) {
                *d += wt * g;
            }
        }
        let cell = |y: usize, x: usize| &f[(y * w + x) * c..(y * w + x + 1) * c];
        let (v00, v01, v10, v11) = (cell(tap.y0, tap.x0), cell(tap.y0, tap.x1), cell(tap.y1, tap.x0), cell(tap.y1, tap.x1));
        let (mut dx, mut dy) = (0.0, 0.0);
        for ch in 0..c {
            dx += go[ch] * ((1.0 - tap.fy) * (v01[ch] - v00[ch]) + tap.fy * (v11[ch] - v10[ch]));
            dy += go[ch] * ((1.0 - tap.fx) * (v10[ch] - v00[ch]) + tap.fx * (v11[ch] - v01[ch]));
        }
        gp[2 * i] = if tap.x_free { dx } else { 0.0 };
        gp[2 * i + 1] = if tap.y_free { dy } else { 0.0 };
    }
    (gf, gp)
}

/// Dimensions of one selective scan: sequence length, channels, state size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanDims {
    pub len: usize,
    pub channels: usize,
    pub state: usize,
}

/// Inputs of the discretized selective recurrence, all row-major:
/// `x, delta: [L, D]`, `a: [D, S]`, `b, c: [L, S]`, `skip: [D]`.
#[derive(Clone, Copy)]
pub struct ScanInputs<'a> {
    pub x: &'a [f64],
    pub delta: &'a [f64],
    pub a: &'a [f64],
    pub b: &'a [f64],
    pub c: &'a [f64],
    pub skip: &'a [f64],
}

/// One linear pass of `h_t = exp(delta_t a) h_{t-1} + delta_t b_t x_t`,
/// `y_t = <c_t, h_t> + skip x_t`, with `h_0 = 0`. When `keep_states` is set the
/// post-update state of every step is returned as `[L, D, S]`.
pub fn selective_scan(inp: ScanInputs<'_>, dims: ScanDims, keep_states: bool) -> (Vec<f64>, Vec<f64>) {
    let ScanDims { len, channels: d, state: s } = dims;
    let mut y = vec![0.0; len * d];
    let mut h = vec![0.0; d * s];
    let mut states = if keep_states { Vec::with_capacity(len * d * s) } else { Vec::new() };
    for t in 0..len {
        let b_t = &inp.b[t * s..(t + 1) * s];
        let c_t = &inp.c[t * s..(t + 1) * s];
        for ch in 0..d {
            let dt = inp.delta[t * d + ch];
            let xv = inp.x[t * d + ch];
            let a_row = &inp.a[ch * s..(ch + 1) * s];
            let h_row = &mut h[ch * s..(ch + 1) * s];
            let mut acc = 0.0;
            for st in 0..s {
                let decay = (dt * a_row[st]).exp();
                h_row[st] = decay * h_row[st] + dt * b_t[st] * xv;
                acc += c_t[st] * h_row[st];
            }
            y[t * d + ch] = acc + inp.skip[ch] * xv;
        }
        if keep_states {
            states.extend_from_slice(&h);
        }
    }
    (y, states)
}

/// Adjoints of [`selective_scan`] in the order `(x, delta, a, b, c, skip)`.
pub fn selective_scan_backward(inp: ScanInputs<'_>, dims: ScanDims, gy: &[f64]) -> [Vec<f64>; 6] {
    let ScanDims { len, channels: d, state: s } = dims;
    let (_, states) = selective_scan(inp, dims, true);
    let mut gx = vec![0.0; len * d];
    let mut gdelta = vec![0.0; len * d];
    let mut ga = vec![0.0; d * s];
    let mut gb = vec![0.0; len * s];
    let mut gc = vec![0.0; len * s];
    let mut gskip = vec![0.0; d];
    // adjoint flowing from step t+1 into h_t
    let mut carry = vec![0.0; d * s];
    for t in (0..len).rev() {
        let h_t = &states[t * d * s..(t + 1) * d * s];
        for ch in 0..d {
            let dt = inp.delta[t * d + ch];
            let xv = inp.x[t * d + ch];
            let g = gy[t * d + ch];
            gskip[ch] += g * xv;
            let mut gxv = g * inp.skip[ch];
            let mut gdt = 0.0;
            for st in 0..s {
                let idx = ch * s + st;
                let a = inp.a[idx];
                let b = inp.b[t * s + st];
                let h_prev = if t > 0 { states[(t - 1) * d * s + idx] } else { 0.0 };
                let decay = (dt * a).exp();
                gc[t * s + st] += g * h_t[idx];
                let gh = g * inp.c[t * s + st] + carry[idx];
                gxv += gh * dt * b;
                gdt += gh * (b * xv + a * decay * h_prev);
                gb[t * s + st] += gh * dt * xv;
                ga[idx] += gh * dt * decay * h_prev;
                carry[idx] = decay * gh;
            }
            gx[t * d + ch] = gxv;
            gdelta[t * d + ch] = gdt;
        }
    }
    [gx, gdelta, ga, gb, gc, gskip]
}
