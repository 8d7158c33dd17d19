//! im2col convolution kernels on NCHW buffers.

use rayon::prelude::*;

use super::{gemm, MatRef, Real};

/// Samples per work unit. Partial weight gradients are reduced in unit
/// order, so results do not depend on the rayon thread count.
const CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_c: usize,
    pub h: usize,
    pub w: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        x: &[usize],
        w: &[usize],
        stride: usize,
        pad: usize,
    ) -> Option<ConvGeom> {
        if x.len() != 4 || w.len() != 4 || x[1] != w[1] || w[2] != w[3] || stride == 0 {
            return None;
        }
        let k = w[2];
        if x[2] + 2 * pad < k || x[3] + 2 * pad < k {
            return None;
        }
        Some(ConvGeom {
            batch: x[0],
            in_c: x[1],
            h: x[2],
            w: x[3],
            out_c: w[0],
            k,
            stride,
            pad,
            out_h: (x[2] + 2 * pad - k) / stride + 1,
            out_w: (x[3] + 2 * pad - k) / stride + 1,
        })
    }

    fn patch(&self) -> usize {
        self.in_c * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_sample(&self) -> usize {
        self.in_c * self.h * self.w
    }

    fn out_sample(&self) -> usize {
        self.out_c * self.positions()
    }
}

fn im2col<T: Real>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let p = g.positions();
    for c in 0..g.in_c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst[oy * g.out_w + ox] = if iy >= 0
                            && (iy as usize) < g.h
                            && ix >= 0
                            && (ix as usize) < g.w
                        {
                            x[(c * g.h + iy as usize) * g.w + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let p = g.positions();
    for c in 0..g.in_c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix as usize >= g.w {
                            continue;
                        }
                        dx[(c * g.h + iy as usize) * g.w + ix as usize] += src[oy * g.out_w + ox];
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (patch, p) = (g.patch(), g.positions());
    let mut out = vec![T::zero(); g.batch * g.out_sample()];
    out.par_chunks_mut(CHUNK * g.out_sample())
        .zip(x.par_chunks(CHUNK * g.in_sample()))
        .for_each(|(out_chunk, x_chunk)| {
            let mut cols = vec![T::zero(); patch * p];
            for (o, xs) in out_chunk
                .chunks_mut(g.out_sample())
                .zip(x_chunk.chunks(g.in_sample()))
            {
                im2col(g, xs, &mut cols);
                gemm(
                    MatRef::new(w, g.out_c, patch, false),
                    MatRef::new(&cols, patch, p, false),
                    o,
                    false,
                );
                if let Some(b) = bias {
                    for (oc, row) in o.chunks_mut(p).enumerate() {
                        row.iter_mut().for_each(|v| *v += b[oc]);
                    }
                }
            }
        });
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    gout: &[T],
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<T> {
    let (patch, p) = (g.patch(), g.positions());
    let mut dx = if need_dx {
        vec![T::zero(); x.len()]
    } else {
        Vec::new()
    };
    let dx_chunk_len = if need_dx { CHUNK * g.in_sample() } else { 0 };

    let work = |x_chunk: &[T], g_chunk: &[T], dx_chunk: &mut [T]| -> (Vec<T>, Vec<T>) {
        let mut cols = vec![T::zero(); patch * p];
        let mut dw = if need_dw {
            vec![T::zero(); g.out_c * patch]
        } else {
            Vec::new()
        };
        let mut db = if need_db {
            vec![T::zero(); g.out_c]
        } else {
            Vec::new()
        };
        for (s, (xs, gs)) in x_chunk
            .chunks(g.in_sample())
            .zip(g_chunk.chunks(g.out_sample()))
            .enumerate()
        {
            if need_dw {
                im2col(g, xs, &mut cols);
                gemm(
                    MatRef::new(gs, g.out_c, p, false),
                    MatRef::new(&cols, patch, p, true),
                    &mut dw,
                    true,
                );
            }
            if need_db {
                for (oc, row) in gs.chunks(p).enumerate() {
                    db[oc] += row.iter().copied().sum::<T>();
                }
            }
            if need_dx {
                gemm(
                    MatRef::new(w, g.out_c, patch, true),
                    MatRef::new(gs, g.out_c, p, false),
                    &mut cols,
                    false,
                );
                let dxs = &mut dx_chunk[s * g.in_sample()..(s + 1) * g.in_sample()];
                col2im(g, &cols, dxs);
            }
        }
        (dw, db)
    };

    let partials: Vec<(Vec<T>, Vec<T>)> = if need_dx {
        x.par_chunks(CHUNK * g.in_sample())
            .zip(gout.par_chunks(CHUNK * g.out_sample()))
            .zip(dx.par_chunks_mut(dx_chunk_len))
            .map(|((xc, gc), dxc)| work(xc, gc, dxc))
            .collect()
    } else {
        x.par_chunks(CHUNK * g.in_sample())
            .zip(gout.par_chunks(CHUNK * g.out_sample()))
            .map(|(xc, gc)| work(xc, gc, &mut []))
            .collect()
    };

    let reduce = |select: fn(&(Vec<T>, Vec<T>)) -> &Vec<T>, len: usize| {
        let mut acc = vec![T::zero(); len];
        for part in &partials {
            for (a, v) in acc.iter_mut().zip(select(part)) {
                *a += *v;
            }
        }
        acc
    };
    ConvGrads {
        dx: need_dx.then_some(dx),
        dw: need_dw.then(|| reduce(|p| &p.0, g.out_c * patch)),
        db: need_db.then(|| reduce(|p| &p.1, g.out_c)),
    }
}
