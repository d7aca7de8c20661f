//! Inner numeric loops shared by the tape operations.
//!
//! Parallelism is only ever over disjoint output regions (row blocks,
//! channels, column blocks); each output element is accumulated serially in
//! a fixed order, so results are bit-identical no matter how many threads
//! run. Loops are ordered to pass over large operands as few times as
//! possible; this crate's workloads are memory-bound before they are
//! compute-bound.

use rayon::prelude::*;

/// Rayon kicks in above this element count; below it the overhead dominates.
const PAR_THRESHOLD: usize = 16384;

/// Rows per parallel task in the matmul paths; keeps task grain coarse.
const ROW_BLOCK: usize = 128;

/// C[m,n] = A[m,k] * B[k,n], row-major, C assumed zeroed.
pub fn matmul(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m * k * n > PAR_THRESHOLD * 8 && m > ROW_BLOCK {
        c.par_chunks_mut(ROW_BLOCK * n)
            .zip(a.par_chunks(ROW_BLOCK * k))
            .for_each(|(cb, ab)| {
                for (crow, arow) in cb.chunks_mut(n).zip(ab.chunks(k)) {
                    matmul_row(arow, b, crow, k, n);
                }
            });
    } else {
        for i in 0..m {
            matmul_row(&a[i * k..(i + 1) * k], b, &mut c[i * n..(i + 1) * n], k, n);
        }
    }
}

#[inline]
fn matmul_row(arow: &[f64], b: &[f64], crow: &mut [f64], k: usize, n: usize) {
    // axpy formulation: stream rows of B, contiguous and autovectorizable.
    for kk in 0..k {
        let aik = arow[kk];
        if aik == 0.0 {
            continue;
        }
        let brow = &b[kk * n..kk * n + n];
        for (cv, bv) in crow.iter_mut().zip(brow.iter()) {
            *cv += aik * *bv;
        }
    }
}

/// C[m,n] += A^T * B where A is stored [p,m], B is [p,n].
///
/// Streams A and B exactly once in row blocks; the [m,n] accumulator is
/// small in every caller (weight gradients), so it stays cached.
pub fn matmul_at_b(a: &[f64], b: &[f64], c: &mut [f64], p: usize, m: usize, n: usize) {
    debug_assert_eq!(a.len(), p * m);
    debug_assert_eq!(b.len(), p * n);
    debug_assert_eq!(c.len(), m * n);
    const PBLOCK: usize = 256;
    let nblocks = p.div_ceil(PBLOCK);
    if p * m * n > PAR_THRESHOLD * 8 && nblocks > 1 {
        // Per-block partial products combined in fixed block order.
        let partials: Vec<Vec<f64>> = (0..nblocks)
            .into_par_iter()
            .map(|bi| {
                let lo = bi * PBLOCK;
                let hi = ((bi + 1) * PBLOCK).min(p);
                let mut part = vec![0.0; m * n];
                at_b_block(&a[lo * m..hi * m], &b[lo * n..hi * n], &mut part, hi - lo, m, n);
                part
            })
            .collect();
        for part in partials {
            for (cv, pv) in c.iter_mut().zip(part.iter()) {
                *cv += *pv;
            }
        }
    } else {
        at_b_block(a, b, c, p, m, n);
    }
}

#[inline]
fn at_b_block(a: &[f64], b: &[f64], c: &mut [f64], p: usize, m: usize, n: usize) {
    for pp in 0..p {
        let arow = &a[pp * m..pp * m + m];
        let brow = &b[pp * n..pp * n + n];
        for i in 0..m {
            let av = arow[i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..i * n + n];
            for (cv, bv) in crow.iter_mut().zip(brow.iter()) {
                *cv += av * *bv;
            }
        }
    }
}

/// C[m,k] += A[m,n] * B^T where B is stored [k,n].
/// Used by matmul backward for the input gradient.
pub fn matmul_a_bt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * k);
    if m * n * k > PAR_THRESHOLD * 8 && m > ROW_BLOCK {
        c.par_chunks_mut(ROW_BLOCK * k)
            .zip(a.par_chunks(ROW_BLOCK * n))
            .for_each(|(cb, ab)| {
                for (crow, arow) in cb.chunks_mut(k).zip(ab.chunks(n)) {
                    dot_rows(arow, b, crow, n, k);
                }
            });
    } else {
        for i in 0..m {
            dot_rows(&a[i * n..(i + 1) * n], b, &mut c[i * k..(i + 1) * k], n, k);
        }
    }
}

#[inline]
fn dot_rows(arow: &[f64], b: &[f64], crow: &mut [f64], n: usize, k: usize) {
    for kk in 0..k {
        let brow = &b[kk * n..kk * n + n];
        let mut acc = 0.0;
        for (av, bv) in arow.iter().zip(brow.iter()) {
            acc += *av * *bv;
        }
        crow[kk] += acc;
    }
}

// ---- conv3x3, direct form ----
//
// Input-channel-outer ordering: each input channel is streamed once while
// all output channels accumulate in place, so the per-conv RAM traffic is
// one read of the input plus one write of the output.

/// 3x3 convolution with padding 1, layout [C,H,W]. Output assumed zeroed.
pub fn conv3x3(
    input: &[f64],
    weight: &[f64], // [cout, cin, 3, 3]
    bias: &[f64],   // [cout]
    out: &mut [f64],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
) {
    let hw = h * w;
    let run = |co_lo: usize, oslab: &mut [f64]| {
        let co_n = oslab.len() / hw;
        for (j, ochan) in oslab.chunks_mut(hw).enumerate() {
            ochan.fill(bias[co_lo + j]);
        }
        for ci in 0..cin {
            let ichan = &input[ci * hw..(ci + 1) * hw];
            for (j, ochan) in oslab.chunks_mut(hw).enumerate() {
                let co = co_lo + j;
                let wtaps = &weight[(co * cin + ci) * 9..(co * cin + ci) * 9 + 9];
                conv_taps(ichan, ochan, wtaps, h, w);
            }
        }
        let _ = co_n;
    };
    if cout > 1 && cin * hw * 9 > PAR_THRESHOLD * 4 {
        // Split output channels in two; each half streams the input once.
        let half = cout / 2;
        let (lo, hi) = out.split_at_mut(half * hw);
        rayon::join(|| run(0, lo), || run(half, hi));
    } else {
        run(0, out);
    }
}

/// Accumulate all nine taps of one (input channel, output channel) pair.
/// Each output row is touched once per vertical shift with the three
/// horizontal taps fused.
#[inline]
fn conv_taps(ichan: &[f64], ochan: &mut [f64], wtaps: &[f64], h: usize, w: usize) {
    if w < 4 {
        for ky in 0..3usize {
            for kx in 0..3usize {
                let wv = wtaps[ky * 3 + kx];
                if wv != 0.0 {
                    accumulate_shifted(ichan, ochan, wv, h, w, ky as isize - 1, kx as isize - 1);
                }
            }
        }
        return;
    }
    for ky in 0..3usize {
        let dy = ky as isize - 1;
        let (wl, wc, wr) = (wtaps[ky * 3], wtaps[ky * 3 + 1], wtaps[ky * 3 + 2]);
        if wl == 0.0 && wc == 0.0 && wr == 0.0 {
            continue;
        }
        let y_lo = (-dy).max(0) as usize;
        let y_hi = (h as isize - dy).min(h as isize) as usize;
        for y in y_lo..y_hi {
            let iy = (y as isize + dy) as usize;
            let irow = &ichan[iy * w..iy * w + w];
            let orow = &mut ochan[y * w..y * w + w];
            orow[0] += wc * irow[0] + wr * irow[1];
            for x in 1..w - 1 {
                orow[x] += wl * irow[x - 1] + wc * irow[x] + wr * irow[x + 1];
            }
            orow[w - 1] += wl * irow[w - 2] + wc * irow[w - 1];
        }
    }
}

/// ochan[y, x] += wv * ichan[y + dy, x + dx] over valid indices.
#[inline]
fn accumulate_shifted(
    ichan: &[f64],
    ochan: &mut [f64],
    wv: f64,
    h: usize,
    w: usize,
    dy: isize,
    dx: isize,
) {
    let y_lo = (-dy).max(0) as usize;
    let y_hi = (h as isize - dy).min(h as isize) as usize;
    let x_lo = (-dx).max(0) as usize;
    let x_hi = (w as isize - dx).min(w as isize) as usize;
    if x_lo >= x_hi {
        return;
    }
    for y in y_lo..y_hi {
        let iy = (y as isize + dy) as usize;
        let irow = &ichan[iy * w + ((x_lo as isize + dx) as usize)..];
        let orow = &mut ochan[y * w + x_lo..y * w + x_hi];
        for (ov, iv) in orow.iter_mut().zip(irow.iter()) {
            *ov += wv * *iv;
        }
    }
}

/// Backward of [`conv3x3`] with respect to the input. `gin` accumulated.
pub fn conv3x3_grad_input(
    gout: &[f64],
    weight: &[f64],
    gin: &mut [f64],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
) {
    let hw = h * w;
    let run = |ci_lo: usize, gslab: &mut [f64]| {
        for co in 0..cout {
            let ochan = &gout[co * hw..(co + 1) * hw];
            for (j, gchan) in gslab.chunks_mut(hw).enumerate() {
                let ci = ci_lo + j;
                let wbase = (co * cin + ci) * 9;
                // input[y+dy, x+dx] feeds out[y, x]: the transposed pass is
                // a conv with the tap array reversed.
                let mut flipped = [0.0; 9];
                for t in 0..9 {
                    flipped[t] = weight[wbase + 8 - t];
                }
                conv_taps(ochan, gchan, &flipped, h, w);
            }
        }
    };
    if cin > 1 && cout * hw * 9 > PAR_THRESHOLD * 4 {
        let half = cin / 2;
        let (lo, hi) = gin.split_at_mut(half * hw);
        rayon::join(|| run(0, lo), || run(half, hi));
    } else {
        run(0, gin);
    }
}

/// Backward of [`conv3x3`] with respect to the weights. `gw` accumulated.
pub fn conv3x3_grad_weight(
    gout: &[f64],
    input: &[f64],
    gw: &mut [f64],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
) {
    let hw = h * w;
    let run = |co_lo: usize, gwslab: &mut [f64]| {
        let co_n = gwslab.len() / (cin * 9);
        for ci in 0..cin {
            let ichan = &input[ci * hw..(ci + 1) * hw];
            for j in 0..co_n {
                let co = co_lo + j;
                let ochan = &gout[co * hw..(co + 1) * hw];
                let taps = &mut gwslab[j * cin * 9 + ci * 9..j * cin * 9 + ci * 9 + 9];
                corr_taps(ichan, ochan, taps, h, w);
            }
        }
    };
    if cout > 1 && cin * hw * 9 > PAR_THRESHOLD * 4 {
        let half = cout / 2;
        let (lo, hi) = gw.split_at_mut(half * cin * 9);
        rayon::join(|| run(0, lo), || run(half, hi));
    } else {
        run(0, gw);
    }
}

/// taps[ky*3+kx] += sum_{y,x} gout[y,x] * input[y+ky-1, x+kx-1], with the
/// three horizontal taps of each vertical shift fused into one row pass.
#[inline]
fn corr_taps(ichan: &[f64], ochan: &[f64], taps: &mut [f64], h: usize, w: usize) {
    if w < 4 {
        for ky in 0..3usize {
            for kx in 0..3usize {
                let dy = ky as isize - 1;
                let dx = kx as isize - 1;
                let y_lo = (-dy).max(0) as usize;
                let y_hi = (h as isize - dy).min(h as isize) as usize;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize) as usize;
                let mut acc = 0.0;
                for y in y_lo..y_hi {
                    let iy = (y as isize + dy) as usize;
                    for x in x_lo..x_hi {
                        acc += ochan[y * w + x] * ichan[iy * w + (x as isize + dx) as usize];
                    }
                }
                taps[ky * 3 + kx] += acc;
            }
        }
        return;
    }
    for ky in 0..3usize {
        let dy = ky as isize - 1;
        let y_lo = (-dy).max(0) as usize;
        let y_hi = (h as isize - dy).min(h as isize) as usize;
        let (mut acc_l, mut acc_c, mut acc_r) = (0.0, 0.0, 0.0);
        for y in y_lo..y_hi {
            let iy = (y as isize + dy) as usize;
            let irow = &ichan[iy * w..iy * w + w];
            let orow = &ochan[y * w..y * w + w];
            let (mut al, mut ac, mut ar) = (0.0, 0.0, 0.0);
            for x in 1..w - 1 {
                al += orow[x] * irow[x - 1];
                ac += orow[x] * irow[x];
                ar += orow[x] * irow[x + 1];
            }
            acc_l += al + orow[w - 1] * irow[w - 2];
            acc_c += ac + orow[0] * irow[0] + orow[w - 1] * irow[w - 1];
            acc_r += ar + orow[0] * irow[1];
        }
        taps[ky * 3] += acc_l;
        taps[ky * 3 + 1] += acc_c;
        taps[ky * 3 + 2] += acc_r;
    }
}

pub fn map_unary(input: &[f64], out: &mut [f64], f: impl Fn(f64) -> f64 + Sync) {
    if input.len() > PAR_THRESHOLD {
        out.par_chunks_mut(8192)
            .zip(input.par_chunks(8192))
            .for_each(|(oc, ic)| {
                for (o, i) in oc.iter_mut().zip(ic.iter()) {
                    *o = f(*i);
                }
            });
    } else {
        for (o, i) in out.iter_mut().zip(input.iter()) {
            *o = f(*i);
        }
    }
}

pub fn map_binary(a: &[f64], b: &[f64], out: &mut [f64], f: impl Fn(f64, f64) -> f64 + Sync) {
    if a.len() > PAR_THRESHOLD {
        out.par_chunks_mut(8192)
            .zip(a.par_chunks(8192).zip(b.par_chunks(8192)))
            .for_each(|(oc, (ac, bc))| {
                for (o, (x, y)) in oc.iter_mut().zip(ac.iter().zip(bc.iter())) {
                    *o = f(*x, *y);
                }
            });
    } else {
        for (o, (x, y)) in out.iter_mut().zip(a.iter().zip(b.iter())) {
            *o = f(*x, *y);
        }
    }
}

/// acc[i] += f(a[i], b[i]); the accumulation form used in backward passes.
pub fn acc_binary(a: &[f64], b: &[f64], acc: &mut [f64], f: impl Fn(f64, f64) -> f64 + Sync) {
    if a.len() > PAR_THRESHOLD {
        acc.par_chunks_mut(8192)
            .zip(a.par_chunks(8192).zip(b.par_chunks(8192)))
            .for_each(|(oc, (ac, bc))| {
                for (o, (x, y)) in oc.iter_mut().zip(ac.iter().zip(bc.iter())) {
                    *o += f(*x, *y);
                }
            });
    } else {
        for (o, (x, y)) in acc.iter_mut().zip(a.iter().zip(b.iter())) {
            *o += f(*x, *y);
        }
    }
}

pub fn acc_unary(a: &[f64], acc: &mut [f64], f: impl Fn(f64) -> f64 + Sync) {
    if a.len() > PAR_THRESHOLD {
        acc.par_chunks_mut(8192)
            .zip(a.par_chunks(8192))
            .for_each(|(oc, ac)| {
                for (o, x) in oc.iter_mut().zip(ac.iter()) {
                    *o += f(*x);
                }
            });
    } else {
        for (o, x) in acc.iter_mut().zip(a.iter()) {
            *o += f(*x);
        }
    }
}
