//! Raw numeric kernels behind the ops. All kernels are gathers: every output
//! element is computed by exactly one task in a fixed accumulation order, so
//! parallel and sequential execution produce identical bits.

use rayon::prelude::*;

use super::Scalar;

/// Below this many multiply-accumulates the rayon dispatch overhead wins;
/// run sequentially.
const PAR_THRESHOLD: usize = 1 << 16;

pub struct ConvShapes {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub kz: usize,
    pub ky: usize,
    pub kx: usize,
}

impl ConvShapes {
    pub fn plane(&self) -> usize {
        self.d * self.h * self.w
    }

    fn kernel_len(&self) -> usize {
        self.kz * self.ky * self.kx
    }

    fn work(&self) -> usize {
        self.batch * self.c_out * self.c_in * self.plane() * self.kernel_len()
    }
}

/// Stride-1 cross-correlation with symmetric zero padding (odd kernels), one
/// output plane per `(batch, c_out)` pair. `out` must be `batch * c_out *
/// plane` long.
pub fn conv3d_forward<E: Scalar>(x: &[E], w: &[E], bias: &[E], s: &ConvShapes, out: &mut [E]) {
    let plane = s.plane();
    let run = |bc: usize, out_plane: &mut [E]| {
        let bb = bc / s.c_out;
        let oc = bc % s.c_out;
        conv_plane(x, w, bias[oc], s, bb, oc, out_plane);
    };
    if s.work() >= PAR_THRESHOLD {
        out.par_chunks_mut(plane)
            .enumerate()
            .for_each(|(bc, out_plane)| run(bc, out_plane));
    } else {
        for (bc, out_plane) in out.chunks_mut(plane).enumerate() {
            run(bc, out_plane);
        }
    }
}

fn conv_plane<E: Scalar>(
    x: &[E],
    w: &[E],
    bias: E,
    s: &ConvShapes,
    bb: usize,
    oc: usize,
    out_plane: &mut [E],
) {
    let plane = s.plane();
    let (pz, py, px) = (s.kz / 2, s.ky / 2, s.kx / 2);
    let x_batch = &x[bb * s.c_in * plane..(bb + 1) * s.c_in * plane];
    let w_oc = &w[oc * s.c_in * s.kernel_len()..(oc + 1) * s.c_in * s.kernel_len()];

    out_plane.fill(bias);
    for c in 0..s.c_in {
        let xc = &x_batch[c * plane..(c + 1) * plane];
        let wc = &w_oc[c * s.kernel_len()..(c + 1) * s.kernel_len()];
        for z in 0..s.d {
            for dz in 0..s.kz {
                let iz = z + dz;
                if iz < pz || iz >= s.d + pz {
                    continue;
                }
                let iz = iz - pz;
                for y in 0..s.h {
                    let orow_base = (z * s.h + y) * s.w;
                    for dy in 0..s.ky {
                        let iy = y + dy;
                        if iy < py || iy >= s.h + py {
                            continue;
                        }
                        let iy = iy - py;
                        let xrow = &xc[(iz * s.h + iy) * s.w..(iz * s.h + iy + 1) * s.w];
                        let orow = &mut out_plane[orow_base..orow_base + s.w];
                        for dx in 0..s.kx {
                            let wv = wc[(dz * s.ky + dy) * s.kx + dx];
                            let lo = px.saturating_sub(dx);
                            let hi = (s.w + px).saturating_sub(dx).min(s.w);
                            if lo >= hi {
                                continue;
                            }
                            let src = &xrow[lo + dx - px..hi + dx - px];
                            for (o, &v) in orow[lo..hi].iter_mut().zip(src) {
                                *o = *o + wv * v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient w.r.t. the convolution input: a forward convolution of the
/// output gradient with the spatially flipped, channel-transposed weights.
pub fn conv3d_backward_input<E: Scalar>(go: &[E], w: &[E], s: &ConvShapes) -> Vec<E> {
    let klen = s.kernel_len();
    let mut w_flip = vec![E::zero(); w.len()];
    for oc in 0..s.c_out {
        for c in 0..s.c_in {
            for dz in 0..s.kz {
                for dy in 0..s.ky {
                    for dx in 0..s.kx {
                        let srcd = (dz * s.ky + dy) * s.kx + dx;
                        let dstd =
                            ((s.kz - 1 - dz) * s.ky + (s.ky - 1 - dy)) * s.kx + (s.kx - 1 - dx);
                        w_flip[(c * s.c_out + oc) * klen + dstd] =
                            w[(oc * s.c_in + c) * klen + srcd];
                    }
                }
            }
        }
    }
    let shapes = ConvShapes {
        c_in: s.c_out,
        c_out: s.c_in,
        ..*s
    };
    let zero_bias = vec![E::zero(); s.c_in];
    let mut gx = vec![E::zero(); s.batch * s.c_in * s.plane()];
    conv3d_forward(go, &w_flip, &zero_bias, &shapes, &mut gx);
    gx
}

/// Gradient w.r.t. the convolution weights, one weight element per gather.
pub fn conv3d_backward_weight<E: Scalar>(go: &[E], x: &[E], s: &ConvShapes) -> Vec<E> {
    let plane = s.plane();
    let klen = s.kernel_len();
    let (pz, py, px) = (s.kz / 2, s.ky / 2, s.kx / 2);

    let run = |ocx: usize, gw_c: &mut [E]| {
        let oc = ocx / s.c_in;
        let c = ocx % s.c_in;
        for dz in 0..s.kz {
            for dy in 0..s.ky {
                for dx in 0..s.kx {
                    let mut acc = E::zero();
                    let z_lo = pz.saturating_sub(dz);
                    let z_hi = (s.d + pz).saturating_sub(dz).min(s.d);
                    let y_lo = py.saturating_sub(dy);
                    let y_hi = (s.h + py).saturating_sub(dy).min(s.h);
                    let x_lo = px.saturating_sub(dx);
                    let x_hi = (s.w + px).saturating_sub(dx).min(s.w);
                    for bb in 0..s.batch {
                        let go_p = &go[(bb * s.c_out + oc) * plane..][..plane];
                        let x_p = &x[(bb * s.c_in + c) * plane..][..plane];
                        for z in z_lo..z_hi {
                            let iz = z + dz - pz;
                            for y in y_lo..y_hi {
                                let iy = y + dy - py;
                                let go_row = &go_p[(z * s.h + y) * s.w..][x_lo..x_hi];
                                let x_row = &x_p[(iz * s.h + iy) * s.w..]
                                    [x_lo + dx - px..x_hi + dx - px];
                                for (&g, &v) in go_row.iter().zip(x_row) {
                                    acc = acc + g * v;
                                }
                            }
                        }
                    }
                    gw_c[(dz * s.ky + dy) * s.kx + dx] = acc;
                }
            }
        }
    };

    let mut gw = vec![E::zero(); s.c_out * s.c_in * klen];
    if s.work() >= PAR_THRESHOLD {
        gw.par_chunks_mut(klen)
            .enumerate()
            .for_each(|(ocx, gw_c)| run(ocx, gw_c));
    } else {
        for (ocx, gw_c) in gw.chunks_mut(klen).enumerate() {
            run(ocx, gw_c);
        }
    }
    gw
}

pub fn conv3d_backward_bias<E: Scalar>(go: &[E], s: &ConvShapes) -> Vec<E> {
    let plane = s.plane();
    let mut gb = vec![E::zero(); s.c_out];
    for bb in 0..s.batch {
        for oc in 0..s.c_out {
            let p = &go[(bb * s.c_out + oc) * plane..][..plane];
            let mut acc = E::zero();
            for &v in p {
                acc = acc + v;
            }
            gb[oc] = gb[oc] + acc;
        }
    }
    gb
}

/// Batched matmul `out = scale * a @ b` with `a: [n_batch, m, k]`,
/// `b: [n_batch, k, n]`.
pub fn bmm_forward<E: Scalar>(
    a: &[E],
    b: &[E],
    n_batch: usize,
    m: usize,
    k: usize,
    n: usize,
    scale: E,
) -> Vec<E> {
    let mut out = vec![E::zero(); n_batch * m * n];
    let run = |row: usize, out_row: &mut [E]| {
        let bb = row / m;
        let i = row % m;
        let a_row = &a[(bb * m + i) * k..][..k];
        let b_mat = &b[bb * k * n..][..k * n];
        for (l, &av) in a_row.iter().enumerate() {
            let av = av * scale;
            let b_row = &b_mat[l * n..l * n + n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    };
    if n_batch * m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(row, out_row)| run(row, out_row));
    } else {
        for (row, out_row) in out.chunks_mut(n).enumerate() {
            run(row, out_row);
        }
    }
    out
}

/// `ga = scale * go @ b^T`: row `i` of `ga` is dot products of `go[i, :]`
/// with rows of `b`.
pub fn bmm_backward_a<E: Scalar>(
    go: &[E],
    b: &[E],
    n_batch: usize,
    m: usize,
    k: usize,
    n: usize,
    scale: E,
) -> Vec<E> {
    let mut ga = vec![E::zero(); n_batch * m * k];
    let run = |row: usize, ga_row: &mut [E]| {
        let bb = row / m;
        let i = row % m;
        let go_row = &go[(bb * m + i) * n..][..n];
        let b_mat = &b[bb * k * n..][..k * n];
        for (l, slot) in ga_row.iter_mut().enumerate() {
            let b_row = &b_mat[l * n..l * n + n];
            let mut acc = E::zero();
            for (&g, &bv) in go_row.iter().zip(b_row) {
                acc = acc + g * bv;
            }
            *slot = scale * acc;
        }
    };
    if n_batch * m * k * n >= PAR_THRESHOLD {
        ga.par_chunks_mut(k)
            .enumerate()
            .for_each(|(row, ga_row)| run(row, ga_row));
    } else {
        for (row, ga_row) in ga.chunks_mut(k).enumerate() {
            run(row, ga_row);
        }
    }
    ga
}

/// `gb = scale * a^T @ go`. `a` is transposed into a scratch buffer first so
/// the inner loops stay contiguous.
pub fn bmm_backward_b<E: Scalar>(
    a: &[E],
    go: &[E],
    n_batch: usize,
    m: usize,
    k: usize,
    n: usize,
    scale: E,
) -> Vec<E> {
    let mut at = vec![E::zero(); n_batch * k * m];
    for bb in 0..n_batch {
        let a_mat = &a[bb * m * k..][..m * k];
        let at_mat = &mut at[bb * k * m..][..k * m];
        for i in 0..m {
            for l in 0..k {
                at_mat[l * m + i] = a_mat[i * k + l];
            }
        }
    }
    let mut gb = vec![E::zero(); n_batch * k * n];
    let run = |row: usize, gb_row: &mut [E]| {
        let bb = row / k;
        let l = row % k;
        let at_row = &at[(bb * k + l) * m..][..m];
        let go_mat = &go[bb * m * n..][..m * n];
        for (i, &av) in at_row.iter().enumerate() {
            let av = av * scale;
            let go_row = &go_mat[i * n..i * n + n];
            for (o, &g) in gb_row.iter_mut().zip(go_row) {
                *o = *o + av * g;
            }
        }
    };
    if n_batch * m * k * n >= PAR_THRESHOLD {
        gb.par_chunks_mut(n)
            .enumerate()
            .for_each(|(row, gb_row)| run(row, gb_row));
    } else {
        for (row, gb_row) in gb.chunks_mut(n).enumerate() {
            run(row, gb_row);
        }
    }
    gb
}

/// Numerically stable softmax over the last dimension.
pub fn softmax_rows<E: Scalar>(x: &[E], n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); x.len()];
    let run = |row: usize, out_row: &mut [E]| {
        let x_row = &x[row * n..row * n + n];
        let mut mx = x_row[0];
        for &v in x_row {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = E::zero();
        for (o, &v) in out_row.iter_mut().zip(x_row) {
            let e = (v - mx).exp();
            *o = e;
            sum = sum + e;
        }
        for o in out_row.iter_mut() {
            *o = *o / sum;
        }
    };
    if x.len() >= PAR_THRESHOLD {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(row, out_row)| run(row, out_row));
    } else {
        for (row, out_row) in out.chunks_mut(n).enumerate() {
            run(row, out_row);
        }
    }
    out
}

/// Softmax backward: `gx = y * (go - <go, y>)` per row.
pub fn softmax_rows_backward<E: Scalar>(y: &[E], go: &[E], n: usize) -> Vec<E> {
    let mut gx = vec![E::zero(); y.len()];
    let run = |row: usize, gx_row: &mut [E]| {
        let y_row = &y[row * n..row * n + n];
        let go_row = &go[row * n..row * n + n];
        let mut dot = E::zero();
        for (&yv, &gv) in y_row.iter().zip(go_row) {
            dot = dot + yv * gv;
        }
        for ((o, &yv), &gv) in gx_row.iter_mut().zip(y_row).zip(go_row) {
            *o = yv * (gv - dot);
        }
    };
    if y.len() >= PAR_THRESHOLD {
        gx.par_chunks_mut(n)
            .enumerate()
            .for_each(|(row, gx_row)| run(row, gx_row));
    } else {
        for (row, gx_row) in gx.chunks_mut(n).enumerate() {
            run(row, gx_row);
        }
    }
    gx
}

/// Per-axis interpolation table for align-corners-false trilinear scaling.
/// Entry `i` holds the two source indices and the weight of the second one.
pub fn upsample_axis_table(n_out: usize, n_src: usize, r: usize) -> Vec<(usize, usize, f64)> {
    let mut table = Vec::with_capacity(n_out);
    for i in 0..n_out {
        let q = ((i as f64 + 0.5) / r as f64 - 0.5).clamp(0.0, (n_src - 1) as f64);
        let i0 = q.floor() as usize;
        let i1 = (i0 + 1).min(n_src - 1);
        table.push((i0, i1, q - i0 as f64));
    }
    table
}

/// Forward cross-correlation with clamp-to-edge (replicate) padding. Used
/// for constant edge-extraction kernels; plain scalar loops, the kernels are
/// tiny.
pub fn conv3d_forward_replicate<E: Scalar>(
    x: &[E],
    w: &[E],
    bias: &[E],
    s: &ConvShapes,
    out: &mut [E],
) {
    let plane = s.plane();
    let (pz, py, px) = (s.kz / 2, s.ky / 2, s.kx / 2);
    let klen = s.kz * s.ky * s.kx;
    let run = |bc: usize, out_plane: &mut [E]| {
        let bb = bc / s.c_out;
        let oc = bc % s.c_out;
        let x_batch = &x[bb * s.c_in * plane..][..s.c_in * plane];
        let w_oc = &w[oc * s.c_in * klen..][..s.c_in * klen];
        let mut idx = 0usize;
        for z in 0..s.d {
            for y in 0..s.h {
                for xx in 0..s.w {
                    let mut acc = bias[oc];
                    for c in 0..s.c_in {
                        let xc = &x_batch[c * plane..][..plane];
                        let wc = &w_oc[c * klen..][..klen];
                        for dz in 0..s.kz {
                            let iz = (z + dz).saturating_sub(pz).min(s.d - 1);
                            for dy in 0..s.ky {
                                let iy = (y + dy).saturating_sub(py).min(s.h - 1);
                                for dx in 0..s.kx {
                                    let ix = (xx + dx).saturating_sub(px).min(s.w - 1);
                                    acc = acc
                                        + wc[(dz * s.ky + dy) * s.kx + dx]
                                            * xc[(iz * s.h + iy) * s.w + ix];
                                }
                            }
                        }
                    }
                    out_plane[idx] = acc;
                    idx += 1;
                }
            }
        }
    };
    if s.work() >= PAR_THRESHOLD {
        out.par_chunks_mut(plane)
            .enumerate()
            .for_each(|(bc, out_plane)| run(bc, out_plane));
    } else {
        for (bc, out_plane) in out.chunks_mut(plane).enumerate() {
            run(bc, out_plane);
        }
    }
}

/// Input gradient of the replicate-padding convolution: the transpose
/// scatters each tap's contribution onto the clamped source voxel.
pub fn conv3d_backward_input_replicate<E: Scalar>(go: &[E], w: &[E], s: &ConvShapes) -> Vec<E> {
    let plane = s.plane();
    let (pz, py, px) = (s.kz / 2, s.ky / 2, s.kx / 2);
    let klen = s.kz * s.ky * s.kx;
    let mut gx = vec![E::zero(); s.batch * s.c_in * plane];
    let run = |bc: usize, gx_plane: &mut [E]| {
        let bb = bc / s.c_in;
        let c = bc % s.c_in;
        for oc in 0..s.c_out {
            let go_p = &go[(bb * s.c_out + oc) * plane..][..plane];
            let wc = &w[(oc * s.c_in + c) * klen..][..klen];
            let mut idx = 0usize;
            for z in 0..s.d {
                for y in 0..s.h {
                    for xx in 0..s.w {
                        let g = go_p[idx];
                        idx += 1;
                        for dz in 0..s.kz {
                            let iz = (z + dz).saturating_sub(pz).min(s.d - 1);
                            for dy in 0..s.ky {
                                let iy = (y + dy).saturating_sub(py).min(s.h - 1);
                                for dx in 0..s.kx {
                                    let ix = (xx + dx).saturating_sub(px).min(s.w - 1);
                                    let pos = (iz * s.h + iy) * s.w + ix;
                                    gx_plane[pos] =
                                        gx_plane[pos] + g * wc[(dz * s.ky + dy) * s.kx + dx];
                                }
                            }
                        }
                    }
                }
            }
        }
    };
    if s.work() >= PAR_THRESHOLD {
        gx.par_chunks_mut(plane)
            .enumerate()
            .for_each(|(bc, gx_plane)| run(bc, gx_plane));
    } else {
        for (bc, gx_plane) in gx.chunks_mut(plane).enumerate() {
            run(bc, gx_plane);
        }
    }
    gx
}
