//! Raw NCHW kernels used by the graph ops. Convolutions are stride 1 with
//! symmetric zero padding, lowered to a single batched GEMM via im2col.

use crate::scalar::{matmul, Real};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub pad: usize,
}

impl ConvGeom {
    fn hw(&self) -> usize {
        self.h * self.w
    }

    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }
}

/// `col[(ci*k + ky)*k + kx, n*HW + y*W + x] = x[n, ci, y+ky-pad, x+kx-pad]`
fn im2col<T: Real>(g: &ConvGeom, x: &[T]) -> Vec<T> {
    let hw = g.hw();
    let cols = g.n * hw;
    let mut col = vec![T::zero(); g.patch() * cols];
    for ci in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst_row = &mut col[row * cols..(row + 1) * cols];
                for n in 0..g.n {
                    let src = &x[(n * g.c_in + ci) * hw..(n * g.c_in + ci + 1) * hw];
                    let dst = &mut dst_row[n * hw..(n + 1) * hw];
                    for y in 0..g.h {
                        let sy = y as isize + ky as isize - g.pad as isize;
                        if sy < 0 || sy >= g.h as isize {
                            continue;
                        }
                        let sy = sy as usize;
                        for xx in 0..g.w {
                            let sx = xx as isize + kx as isize - g.pad as isize;
                            if sx < 0 || sx >= g.w as isize {
                                continue;
                            }
                            dst[y * g.w + xx] = src[sy * g.w + sx as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im_add<T: Real>(g: &ConvGeom, col: &[T], dx: &mut [T]) {
    let hw = g.hw();
    let cols = g.n * hw;
    for ci in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src_row = &col[row * cols..(row + 1) * cols];
                for n in 0..g.n {
                    let src = &src_row[n * hw..(n + 1) * hw];
                    let dst = &mut dx[(n * g.c_in + ci) * hw..(n * g.c_in + ci + 1) * hw];
                    for y in 0..g.h {
                        let sy = y as isize + ky as isize - g.pad as isize;
                        if sy < 0 || sy >= g.h as isize {
                            continue;
                        }
                        let sy = sy as usize;
                        for xx in 0..g.w {
                            let sx = xx as isize + kx as isize - g.pad as isize;
                            if sx < 0 || sx >= g.w as isize {
                                continue;
                            }
                            let d = &mut dst[sy * g.w + sx as usize];
                            *d = *d + src[y * g.w + xx];
                        }
                    }
                }
            }
        }
    }
}

/// `[Co, N*HW]` matrix to NCHW, or back.
fn cm_to_nchw<T: Real>(g: &ConvGeom, m: &[T], out: &mut [T]) {
    let hw = g.hw();
    for co in 0..g.c_out {
        for n in 0..g.n {
            out[(n * g.c_out + co) * hw..(n * g.c_out + co + 1) * hw]
                .copy_from_slice(&m[co * g.n * hw + n * hw..co * g.n * hw + (n + 1) * hw]);
        }
    }
}

fn nchw_to_cm<T: Real>(g: &ConvGeom, x: &[T]) -> Vec<T> {
    let hw = g.hw();
    let mut m = vec![T::zero(); g.c_out * g.n * hw];
    for co in 0..g.c_out {
        for n in 0..g.n {
            m[co * g.n * hw + n * hw..co * g.n * hw + (n + 1) * hw]
                .copy_from_slice(&x[(n * g.c_out + co) * hw..(n * g.c_out + co + 1) * hw]);
        }
    }
    m
}

pub(crate) fn conv2d_forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], b: Option<&[T]>) -> Vec<T> {
    let hw = g.hw();
    let cols = g.n * hw;
    let mut m = vec![T::zero(); g.c_out * cols];
    if g.k == 1 && g.n == 1 {
        matmul(g.c_out, g.c_in, cols, w, false, x, false, &mut m, false);
    } else {
        let col = im2col(g, x);
        matmul(g.c_out, g.patch(), cols, w, false, &col, false, &mut m, false);
    }
    if let Some(b) = b {
        for co in 0..g.c_out {
            for v in &mut m[co * cols..(co + 1) * cols] {
                *v = *v + b[co];
            }
        }
    }
    let mut out = vec![T::zero(); g.n * g.c_out * hw];
    cm_to_nchw(g, &m, &mut out);
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dout: &[T],
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let cols = g.n * g.hw();
    let dm = nchw_to_cm(g, dout);
    let col = if need.1 { Some(im2col(g, x)) } else { None };

    let dw = col.as_ref().map(|col| {
        let mut dw = vec![T::zero(); g.c_out * g.patch()];
        matmul(g.c_out, cols, g.patch(), &dm, false, col, true, &mut dw, false);
        dw
    });
    let db = need.2.then(|| {
        (0..g.c_out)
            .map(|co| {
                dm[co * cols..(co + 1) * cols]
                    .iter()
                    .fold(T::zero(), |a, &v| a + v)
            })
            .collect()
    });
    let dx = need.0.then(|| {
        let mut dcol = vec![T::zero(); g.patch() * cols];
        matmul(g.patch(), g.c_out, cols, w, true, &dm, false, &mut dcol, false);
        let mut dx = vec![T::zero(); g.n * g.c_in * g.hw()];
        col2im_add(g, &dcol, &mut dx);
        dx
    });
    ConvGrads { dx, dw, db }
}

pub(crate) fn avg_pool2<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut out = vec![T::zero(); planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..ho {
            for xx in 0..wo {
                let s = src[2 * y * w + 2 * xx]
                    + src[2 * y * w + 2 * xx + 1]
                    + src[(2 * y + 1) * w + 2 * xx]
                    + src[(2 * y + 1) * w + 2 * xx + 1];
                dst[y * wo + xx] = s * quarter;
            }
        }
    }
    out
}

pub(crate) fn avg_pool2_backward<T: Real>(dy: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for y in 0..h {
            for xx in 0..w {
                dx[p * h * w + y * w + xx] = dy[p * ho * wo + (y / 2) * wo + xx / 2] * quarter;
            }
        }
    }
    dx
}

/// Nearest-neighbour upsampling by an integer factor.
pub(crate) fn upsample<T: Real>(x: &[T], planes: usize, h: usize, w: usize, f: usize) -> Vec<T> {
    let (ho, wo) = (h * f, w * f);
    let mut out = vec![T::zero(); planes * ho * wo];
    for p in 0..planes {
        for y in 0..ho {
            for xx in 0..wo {
                out[p * ho * wo + y * wo + xx] = x[p * h * w + (y / f) * w + xx / f];
            }
        }
    }
    out
}

pub(crate) fn upsample_backward<T: Real>(
    dy: &[T],
    planes: usize,
    h: usize,
    w: usize,
    f: usize,
) -> Vec<T> {
    let (ho, wo) = (h * f, w * f);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for y in 0..ho {
            for xx in 0..wo {
                let d = &mut dx[p * h * w + (y / f) * w + xx / f];
                *d = *d + dy[p * ho * wo + y * wo + xx];
            }
        }
    }
    dx
}
