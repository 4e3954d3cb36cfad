//! Numeric kernels behind the tape: matrix products, NHWC convolution and
//! 2x2 max pooling.
//!
//! Parallel loops only split work whose outputs are independent, and every
//! cross-item reduction runs over fixed-size chunks summed in order, so the
//! results do not depend on the thread count.

use mvweak_core::Real;
use rayon::prelude::*;

/// Rows per parallel task; below this everything runs serially.
const PAR_ROWS: usize = 64;
/// Frames per partial weight-gradient buffer.
const GRAD_CHUNK: usize = 8;

/// `c[m,n] = a[m,k] * b[k,n]`.
pub fn matmul<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * n];
    let row = |(i, out): (usize, &mut [F])| {
        let ar = &a[i * k..(i + 1) * k];
        for (p, &av) in ar.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            for (o, &bv) in out.iter_mut().zip(br) {
                *o = *o + av * bv;
            }
        }
    };
    if m * k * n > 1 << 16 && m >= PAR_ROWS {
        c.par_chunks_mut(n.max(1)).enumerate().for_each(row);
    } else {
        c.chunks_mut(n.max(1)).enumerate().for_each(row);
    }
    c
}

/// `c[m,n] = a[m,k] * b[n,k]^T`.
pub fn matmul_nt<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * n];
    let row = |(i, out): (usize, &mut [F])| {
        let ar = &a[i * k..(i + 1) * k];
        for (j, o) in out.iter_mut().enumerate() {
            let br = &b[j * k..(j + 1) * k];
            let mut s = F::zero();
            for (&x, &y) in ar.iter().zip(br) {
                s = s + x * y;
            }
            *o = s;
        }
    };
    if m * k * n > 1 << 16 && m >= PAR_ROWS {
        c.par_chunks_mut(n.max(1)).enumerate().for_each(row);
    } else {
        c.chunks_mut(n.max(1)).enumerate().for_each(row);
    }
    c
}

/// `c[k,n] = a[m,k]^T * g[m,n]`, summing over `m` in order.
pub fn matmul_tn<F: Real>(a: &[F], g: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); k * n];
    let row = |(p, out): (usize, &mut [F])| {
        for i in 0..m {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let gr = &g[i * n..(i + 1) * n];
            for (o, &gv) in out.iter_mut().zip(gr) {
                *o = *o + av * gv;
            }
        }
    };
    if m * k * n > 1 << 16 && k >= 16 {
        c.par_chunks_mut(n.max(1)).enumerate().for_each(row);
    } else {
        c.chunks_mut(n.max(1)).enumerate().for_each(row);
    }
    c
}

/// Geometry of a same-padded, stride-1 square convolution over NHWC frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
}

impl ConvGeom {
    fn pad(&self) -> isize {
        (self.kernel / 2) as isize
    }

    fn in_frame(&self) -> usize {
        self.height * self.width * self.cin
    }

    fn out_frame(&self) -> usize {
        self.height * self.width * self.cout
    }

    fn taps(&self, y: usize, x: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let (h, w, pad, k) = (self.height as isize, self.width as isize, self.pad(), self.kernel);
        (0..k * k).filter_map(move |tap| {
            let yy = y as isize + (tap / k) as isize - pad;
            let xx = x as isize + (tap % k) as isize - pad;
            (yy >= 0 && yy < h && xx >= 0 && xx < w).then(|| (tap, (yy * w + xx) as usize))
        })
    }
}

/// Weights are `[k, k, cin, cout]`, bias `[cout]`.
pub fn conv2d<F: Real>(input: &[F], weight: &[F], bias: &[F], g: ConvGeom) -> Vec<F> {
    let mut out = vec![F::zero(); g.frames * g.out_frame()];
    out.par_chunks_mut(g.out_frame())
        .enumerate()
        .for_each(|(f, of)| {
            let inf = &input[f * g.in_frame()..(f + 1) * g.in_frame()];
            for y in 0..g.height {
                for x in 0..g.width {
                    let o = &mut of[(y * g.width + x) * g.cout..(y * g.width + x + 1) * g.cout];
                    o.copy_from_slice(bias);
                    for (tap, pix) in g.taps(y, x) {
                        let px = &inf[pix * g.cin..(pix + 1) * g.cin];
                        let wt = &weight[tap * g.cin * g.cout..(tap + 1) * g.cin * g.cout];
                        for (ci, &v) in px.iter().enumerate() {
                            if v == F::zero() {
                                continue;
                            }
                            for (ov, &wv) in o.iter_mut().zip(&wt[ci * g.cout..(ci + 1) * g.cout]) {
                                *ov = *ov + v * wv;
                            }
                        }
                    }
                }
            }
        });
    out
}

pub fn conv2d_grad_input<F: Real>(grad_out: &[F], weight: &[F], g: ConvGeom) -> Vec<F> {
    let mut din = vec![F::zero(); g.frames * g.in_frame()];
    din.par_chunks_mut(g.in_frame())
        .enumerate()
        .for_each(|(f, dif)| {
            let gof = &grad_out[f * g.out_frame()..(f + 1) * g.out_frame()];
            for y in 0..g.height {
                for x in 0..g.width {
                    let go = &gof[(y * g.width + x) * g.cout..(y * g.width + x + 1) * g.cout];
                    for (tap, pix) in g.taps(y, x) {
                        let wt = &weight[tap * g.cin * g.cout..(tap + 1) * g.cin * g.cout];
                        let di = &mut dif[pix * g.cin..(pix + 1) * g.cin];
                        for (ci, d) in di.iter_mut().enumerate() {
                            let mut s = F::zero();
                            for (&gv, &wv) in go.iter().zip(&wt[ci * g.cout..(ci + 1) * g.cout]) {
                                s = s + gv * wv;
                            }
                            *d = *d + s;
                        }
                    }
                }
            }
        });
    din
}

/// Returns `(d weight, d bias)`.
pub fn conv2d_grad_params<F: Real>(input: &[F], grad_out: &[F], g: ConvGeom) -> (Vec<F>, Vec<F>) {
    let wlen = g.kernel * g.kernel * g.cin * g.cout;
    let chunks: Vec<usize> = (0..g.frames).step_by(GRAD_CHUNK).collect();
    let partials: Vec<(Vec<F>, Vec<F>)> = chunks
        .par_iter()
        .map(|&start| {
            let mut dw = vec![F::zero(); wlen];
            let mut db = vec![F::zero(); g.cout];
            for f in start..(start + GRAD_CHUNK).min(g.frames) {
                let inf = &input[f * g.in_frame()..(f + 1) * g.in_frame()];
                let gof = &grad_out[f * g.out_frame()..(f + 1) * g.out_frame()];
                for y in 0..g.height {
                    for x in 0..g.width {
                        let go = &gof[(y * g.width + x) * g.cout..(y * g.width + x + 1) * g.cout];
                        for (d, &gv) in db.iter_mut().zip(go) {
                            *d = *d + gv;
                        }
                        for (tap, pix) in g.taps(y, x) {
                            let px = &inf[pix * g.cin..(pix + 1) * g.cin];
                            let dwt = &mut dw[tap * g.cin * g.cout..(tap + 1) * g.cin * g.cout];
                            for (ci, &v) in px.iter().enumerate() {
                                if v == F::zero() {
                                    continue;
                                }
                                for (d, &gv) in dwt[ci * g.cout..(ci + 1) * g.cout].iter_mut().zip(go) {
                                    *d = *d + v * gv;
                                }
                            }
                        }
                    }
                }
            }
            (dw, db)
        })
        .collect();
    let mut dw = vec![F::zero(); wlen];
    let mut db = vec![F::zero(); g.cout];
    for (pw, pb) in partials {
        for (a, b) in dw.iter_mut().zip(pw) {
            *a = *a + b;
        }
        for (a, b) in db.iter_mut().zip(pb) {
            *a = *a + b;
        }
    }
    (dw, db)
}

/// 2x2 stride-2 max pooling over NHWC frames with even sides. Returns the
/// pooled values, the flat input index of each winner, and the smallest gap
/// between a positive winner and the runner-up in its window.
pub fn maxpool2<F: Real>(
    input: &[F],
    frames: usize,
    height: usize,
    width: usize,
    channels: usize,
) -> (Vec<F>, Vec<u32>, f64) {
    let (oh, ow) = (height / 2, width / 2);
    let mut out = Vec::with_capacity(frames * oh * ow * channels);
    let mut arg = Vec::with_capacity(out.capacity());
    let mut gap = f64::INFINITY;
    for f in 0..frames {
        for y in 0..oh {
            for x in 0..ow {
                for c in 0..channels {
                    let mut best = (F::neg_infinity(), 0usize);
                    let mut second = F::neg_infinity();
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let i = ((f * height + 2 * y + dy) * width + 2 * x + dx) * channels + c;
                            let v = input[i];
                            if v > best.0 {
                                second = best.0;
                                best = (v, i);
                            } else if v > second {
                                second = v;
                            }
                        }
                    }
                    if best.0 > F::zero() {
                        gap = gap.min((best.0 - second).as_f64());
                    }
                    out.push(best.0);
                    arg.push(best.1 as u32);
                }
            }
        }
    }
    (out, arg, gap)
}
