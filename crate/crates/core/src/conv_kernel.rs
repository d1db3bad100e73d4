//! Blocked im2col / register-tiled kernels behind the convolution entry
//! points. Every destination voxel accumulates bias, then source channels,
//! then taps in order, so results do not depend on chunking or threads.

use std::cell::RefCell;

use rayon::prelude::*;

use crate::tensor::{voxel_count, Dims};

/// Filters per register block.
const FB: usize = 4;
/// Destination voxels per register block.
const VB: usize = 8;
/// Approximate destination voxels per im2col chunk.
const CHUNK: usize = 256;

fn round_up(n: usize, m: usize) -> usize {
    n.div_ceil(m) * m
}

/// Source coordinate = destination coordinate + `offsets[t]` for tap `t`.
pub(crate) struct Geometry<'a> {
    pub src_dims: Dims,
    pub dst_dims: Dims,
    pub offsets: &'a [[isize; 3]],
}

impl Geometry<'_> {
    fn rows(&self) -> usize {
        self.dst_dims[0] * self.dst_dims[1]
    }

    fn rows_per_chunk(&self) -> usize {
        (CHUNK / self.dst_dims[2].max(1)).max(1)
    }

    fn chunks(&self) -> Vec<(usize, usize)> {
        let rpc = self.rows_per_chunk();
        (0..self.rows())
            .step_by(rpc)
            .map(|r0| (r0, (r0 + rpc).min(self.rows())))
            .collect()
    }
}

/// Runs `f` on this thread's im2col buffer, grown to at least `len`. The
/// contents are stale; callers overwrite every entry they read.
fn with_col<R>(len: usize, f: impl FnOnce(&mut [f64]) -> R) -> R {
    thread_local! {
        static COL: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
    }
    COL.with(|cell| {
        let mut col = cell.borrow_mut();
        if col.len() < len {
            col.resize(len, 0.0);
        }
        f(&mut col[..len])
    })
}

/// Fills `col` (`src_ch · taps` rows of stride `nb`) for destination rows
/// `r0..r1`, zero where the tap reads outside the source.
fn im2col(
    src: &[f64],
    src_ch: usize,
    g: &Geometry,
    r0: usize,
    r1: usize,
    nb: usize,
    col: &mut [f64],
) {
    let taps = g.offsets.len();
    let [_, dy_len, zl] = g.dst_dims;
    let [sxl, syl, szl] = g.src_dims.map(|v| v as isize);
    let sn = voxel_count(g.src_dims);
    for c in 0..src_ch {
        let h = &src[c * sn..(c + 1) * sn];
        for (t, off) in g.offsets.iter().enumerate() {
            let row = &mut col[(c * taps + t) * nb..(c * taps + t + 1) * nb];
            row.fill(0.0);
            let z0 = (-off[2]).clamp(0, zl as isize) as usize;
            let z1 = (szl - off[2]).clamp(0, zl as isize) as usize;
            if z0 >= z1 {
                continue;
            }
            for (ri, r) in (r0..r1).enumerate() {
                let sx = (r / dy_len) as isize + off[0];
                let sy = (r % dy_len) as isize + off[1];
                if sx < 0 || sx >= sxl || sy < 0 || sy >= syl {
                    continue;
                }
                let start = ((sx * syl + sy) * szl + off[2] + z0 as isize) as usize;
                row[ri * zl + z0..ri * zl + z1].copy_from_slice(&h[start..start + (z1 - z0)]);
            }
        }
    }
}

/// `out[f][j] = bias[f] + Σ_k wt[k][f] · col[k][j]`, `k` ascending.
fn gemm_block(
    wt: &[f64],
    bias: &[f64],
    col: &[f64],
    k: usize,
    nb: usize,
    f_pad: usize,
    out: &mut [f64],
) {
    for fb in (0..f_pad).step_by(FB) {
        for jb in (0..nb).step_by(VB) {
            let mut a = [[0f64; VB]; FB];
            for (r, row) in a.iter_mut().enumerate() {
                *row = [bias[fb + r]; VB];
            }
            for kk in 0..k {
                let x: &[f64; VB] = col[kk * nb + jb..kk * nb + jb + VB].try_into().unwrap();
                let w: &[f64; FB] = wt[kk * f_pad + fb..kk * f_pad + fb + FB]
                    .try_into()
                    .unwrap();
                for r in 0..FB {
                    for q in 0..VB {
                        a[r][q] += w[r] * x[q];
                    }
                }
            }
            for (r, row) in a.iter().enumerate() {
                out[(fb + r) * nb + jb..(fb + r) * nb + jb + VB].copy_from_slice(row);
            }
        }
    }
}

struct Prepared {
    wt: Vec<f64>,
    bias: Vec<f64>,
    k: usize,
    f_pad: usize,
}

fn prepare(weights: &[f64], bias: Option<&[f64]>, filters: usize, k: usize) -> Prepared {
    let f_pad = round_up(filters, FB);
    let mut wt = vec![0f64; k * f_pad];
    for f in 0..filters {
        for kk in 0..k {
            wt[kk * f_pad + f] = weights[f * k + kk];
        }
    }
    let mut b = vec![0f64; f_pad];
    if let Some(bias) = bias {
        b[..filters].copy_from_slice(bias);
    }
    Prepared {
        wt,
        bias: b,
        k,
        f_pad,
    }
}

/// One chunk of destination rows; returns `f_pad × nb` accumulators.
fn gather_chunk(
    src: &[f64],
    src_ch: usize,
    g: &Geometry,
    p: &Prepared,
    r0: usize,
    r1: usize,
) -> (Vec<f64>, usize) {
    let nb = round_up((r1 - r0) * g.dst_dims[2], VB);
    let mut acc = vec![0f64; p.f_pad * nb];
    with_col(p.k * nb, |col| {
        im2col(src, src_ch, g, r0, r1, nb, col);
        gemm_block(&p.wt, &p.bias, col, p.k, nb, p.f_pad, &mut acc);
    });
    (acc, nb)
}

fn scatter_chunk(
    out: &mut [f64],
    filters: usize,
    dst_n: usize,
    start: usize,
    len: usize,
    acc: &[f64],
    nb: usize,
) {
    for f in 0..filters {
        out[f * dst_n + start..f * dst_n + start + len].copy_from_slice(&acc[f * nb..f * nb + len]);
    }
}

/// `dst[f][v] = bias[f] + Σ_c Σ_t w[f][c·T + t] · src[c][v + offsets[t]]`.
pub(crate) fn gather_conv(
    src: &[f64],
    src_ch: usize,
    weights: &[f64],
    bias: Option<&[f64]>,
    filters: usize,
    g: &Geometry,
    parallel: bool,
) -> Vec<f64> {
    let p = prepare(weights, bias, filters, src_ch * g.offsets.len());
    let dst_n = voxel_count(g.dst_dims);
    let zl = g.dst_dims[2];
    let mut out = vec![0f64; filters * dst_n];
    let chunks = g.chunks();
    if parallel {
        let parts: Vec<(Vec<f64>, usize)> = chunks
            .par_iter()
            .map(|&(r0, r1)| gather_chunk(src, src_ch, g, &p, r0, r1))
            .collect();
        for (&(r0, r1), (acc, nb)) in chunks.iter().zip(&parts) {
            scatter_chunk(&mut out, filters, dst_n, r0 * zl, (r1 - r0) * zl, acc, *nb);
        }
    } else {
        for &(r0, r1) in &chunks {
            let (acc, nb) = gather_chunk(src, src_ch, g, &p, r0, r1);
            scatter_chunk(&mut out, filters, dst_n, r0 * zl, (r1 - r0) * zl, &acc, nb);
        }
    }
    out
}

/// `dw[f][c·T + t] = Σ_v dy[f][v] · src[c][v + offsets[t]]`.
///
/// Each sum runs over four interleaved lanes combined as
/// `(l0 + l1) + (l2 + l3)`, with chunks added in order.
pub(crate) fn weight_grad(
    dy: &[f64],
    filters: usize,
    src: &[f64],
    src_ch: usize,
    g: &Geometry,
) -> Vec<f64> {
    const KB: usize = 2;
    let k = src_ch * g.offsets.len();
    let k_pad = round_up(k, KB);
    let f_pad = round_up(filters, FB);
    let dst_n = voxel_count(g.dst_dims);
    let zl = g.dst_dims[2];
    let mut lanes = vec![[0f64; 4]; f_pad * k_pad];
    for (r0, r1) in g.chunks() {
        let len = (r1 - r0) * zl;
        let nb = round_up(len, VB);
        with_col(k_pad * nb, |col| {
            im2col(src, src_ch, g, r0, r1, nb, col);
            col[k * nb..].fill(0.0);
            let mut d = vec![0f64; f_pad * nb];
            for f in 0..filters {
                d[f * nb..f * nb + len]
                    .copy_from_slice(&dy[f * dst_n + r0 * zl..f * dst_n + r0 * zl + len]);
            }
            for fb in (0..f_pad).step_by(FB) {
                for kb in (0..k_pad).step_by(KB) {
                    let mut a = [[[0f64; 4]; KB]; FB];
                    for r in 0..FB {
                        for s in 0..KB {
                            a[r][s] = lanes[(fb + r) * k_pad + kb + s];
                        }
                    }
                    for jq in (0..nb).step_by(4) {
                        let x0: &[f64; 4] = col[kb * nb + jq..kb * nb + jq + 4].try_into().unwrap();
                        let x1: &[f64; 4] = col[(kb + 1) * nb + jq..(kb + 1) * nb + jq + 4]
                            .try_into()
                            .unwrap();
                        for r in 0..FB {
                            let y: &[f64; 4] = d[(fb + r) * nb + jq..(fb + r) * nb + jq + 4]
                                .try_into()
                                .unwrap();
                            for q in 0..4 {
                                a[r][0][q] += y[q] * x0[q];
                                a[r][1][q] += y[q] * x1[q];
                            }
                        }
                    }
                    for r in 0..FB {
                        for s in 0..KB {
                            lanes[(fb + r) * k_pad + kb + s] = a[r][s];
                        }
                    }
                }
            }
        });
    }
    let mut grad = vec![0f64; filters * k];
    for f in 0..filters {
        for kk in 0..k {
            let l = lanes[f * k_pad + kk];
            grad[f * k + kk] = (l[0] + l[1]) + (l[2] + l[3]);
        }
    }
    grad
}
