//! The closed op set: forward builders plus one hand-written backward rule
//! per op. Shapes use the canonical `[batch, channels, d, h, w]` layout for
//! volumetric tensors.

use crate::error::{Error, Result};

use super::kernels::{self, ConvShapes};
use super::{lit, numel_of, Scalar, Tensor};

pub(crate) enum Op<E: Scalar> {
    Conv3d {
        x: Tensor<E>,
        w: Tensor<E>,
        b: Tensor<E>,
    },
    /// Clamp-to-edge padding variant restricted to constant kernels (only
    /// the input gradient is implemented).
    Conv3dReplicate {
        x: Tensor<E>,
        w: Tensor<E>,
    },
    LeakyRelu {
        x: Tensor<E>,
        slope: E,
    },
    Concat {
        xs: Vec<Tensor<E>>,
    },
    SliceChannels {
        x: Tensor<E>,
        lo: usize,
        hi: usize,
    },
    VoxelShuffle {
        x: Tensor<E>,
        r: usize,
    },
    VoxelUnshuffle {
        x: Tensor<E>,
        r: usize,
    },
    TrilinearUp {
        x: Tensor<E>,
        r: usize,
    },
    CropSpatial {
        x: Tensor<E>,
    },
    StrideSample {
        x: Tensor<E>,
        s: usize,
    },
    L1 {
        a: Tensor<E>,
        b: Tensor<E>,
    },
    Add {
        a: Tensor<E>,
        b: Tensor<E>,
    },
    Mul {
        a: Tensor<E>,
        b: Tensor<E>,
    },
    MulScalar {
        x: Tensor<E>,
        c: E,
    },
    Reshape {
        x: Tensor<E>,
    },
    TransposeLast2 {
        x: Tensor<E>,
    },
    Bmm {
        a: Tensor<E>,
        b: Tensor<E>,
        scale: E,
    },
    SoftmaxLast {
        x: Tensor<E>,
    },
    SumAll {
        x: Tensor<E>,
    },
    /// Identity forward with a deliberately wrong backward; negative control
    /// for the gradient checker.
    BadIdentity {
        x: Tensor<E>,
    },
}

impl<E: Scalar> Op<E> {
    pub(crate) fn inputs(&self) -> Vec<Tensor<E>> {
        match self {
            Op::Conv3d { x, w, b } => vec![x.clone(), w.clone(), b.clone()],
            Op::LeakyRelu { x, .. }
            | Op::SliceChannels { x, .. }
            | Op::VoxelShuffle { x, .. }
            | Op::VoxelUnshuffle { x, .. }
            | Op::TrilinearUp { x, .. }
            | Op::CropSpatial { x }
            | Op::StrideSample { x, .. }
            | Op::MulScalar { x, .. }
            | Op::Reshape { x }
            | Op::TransposeLast2 { x }
            | Op::SoftmaxLast { x }
            | Op::SumAll { x }
            | Op::BadIdentity { x } => vec![x.clone()],
            Op::Concat { xs } => xs.clone(),
            Op::L1 { a, b } | Op::Add { a, b } | Op::Mul { a, b } | Op::Bmm { a, b, .. } => {
                vec![a.clone(), b.clone()]
            }
        }
    }

    pub(crate) fn backward(
        &self,
        out_shape: &[usize],
        out_data: &[E],
        go: &[E],
    ) -> Result<()> {
        match self {
            Op::Conv3d { x, w, b } => {
                let s = conv_shapes(x.shape(), w.shape());
                if x.wants_grad() {
                    let gx = kernels::conv3d_backward_input(go, &w.data(), &s);
                    x.accumulate_grad(&gx);
                }
                if w.wants_grad() {
                    let gw = kernels::conv3d_backward_weight(go, &x.data(), &s);
                    w.accumulate_grad(&gw);
                }
                if b.wants_grad() {
                    let gb = kernels::conv3d_backward_bias(go, &s);
                    b.accumulate_grad(&gb);
                }
            }
            Op::LeakyRelu { x, slope } => {
                if x.wants_grad() {
                    let xd = x.data();
                    let gx: Vec<E> = xd
                        .iter()
                        .zip(go)
                        .map(|(&v, &g)| if v >= E::zero() { g } else { *slope * g })
                        .collect();
                    drop(xd);
                    x.accumulate_grad(&gx);
                }
            }
            Op::Concat { xs } => {
                let spatial: usize = xs[0].shape()[2..].iter().product();
                let batch = xs[0].shape()[0];
                let c_total: usize = xs.iter().map(|t| t.shape()[1]).sum();
                let mut c_off = 0usize;
                for t in xs {
                    let c = t.shape()[1];
                    if t.wants_grad() {
                        let mut gx = vec![E::zero(); t.numel()];
                        for bb in 0..batch {
                            let src =
                                &go[(bb * c_total + c_off) * spatial..][..c * spatial];
                            gx[bb * c * spatial..(bb + 1) * c * spatial]
                                .copy_from_slice(src);
                        }
                        t.accumulate_grad(&gx);
                    }
                    c_off += c;
                }
            }
            Op::SliceChannels { x, lo, hi } => {
                if x.wants_grad() {
                    let shape = x.shape();
                    let (batch, c) = (shape[0], shape[1]);
                    let spatial: usize = shape[2..].iter().product();
                    let c_out = hi - lo;
                    let mut gx = vec![E::zero(); x.numel()];
                    for bb in 0..batch {
                        let dst = &mut gx[(bb * c + lo) * spatial..][..c_out * spatial];
                        dst.copy_from_slice(&go[bb * c_out * spatial..][..c_out * spatial]);
                    }
                    x.accumulate_grad(&gx);
                }
            }
            Op::VoxelShuffle { x, r } => {
                if x.wants_grad() {
                    let gx = unshuffle_map(go, out_shape, *r);
                    x.accumulate_grad(&gx);
                }
            }
            Op::VoxelUnshuffle { x, r } => {
                if x.wants_grad() {
                    let gx = shuffle_map(go, out_shape, *r);
                    x.accumulate_grad(&gx);
                }
            }
            Op::TrilinearUp { x, r } => {
                if x.wants_grad() {
                    let gx = upsample_backward(go, x.shape(), *r);
                    x.accumulate_grad(&gx);
                }
            }
            Op::CropSpatial { x } => {
                if x.wants_grad() {
                    let gx = crop_backward(go, x.shape(), out_shape);
                    x.accumulate_grad(&gx);
                }
            }
            Op::StrideSample { x, s } => {
                if x.wants_grad() {
                    let gx = stride_backward(go, x.shape(), out_shape, *s);
                    x.accumulate_grad(&gx);
                }
            }
            Op::L1 { a, b } => {
                let n = lit::<E>(a.numel() as f64);
                let g = go[0] / n;
                let ad = a.data();
                let bd = b.data();
                let signed: Vec<E> = ad
                    .iter()
                    .zip(bd.iter())
                    .map(|(&av, &bv)| {
                        if av > bv {
                            g
                        } else if av < bv {
                            -g
                        } else {
                            E::zero()
                        }
                    })
                    .collect();
                drop(ad);
                drop(bd);
                if a.wants_grad() {
                    a.accumulate_grad(&signed);
                }
                if b.wants_grad() {
                    let neg: Vec<E> = signed.iter().map(|&v| -v).collect();
                    b.accumulate_grad(&neg);
                }
            }
            Op::Add { a, b } => {
                if a.wants_grad() {
                    a.accumulate_grad(go);
                }
                if b.wants_grad() {
                    b.accumulate_grad(go);
                }
            }
            Op::Mul { a, b } => {
                if a.wants_grad() {
                    let bd = b.data();
                    let ga: Vec<E> = go.iter().zip(bd.iter()).map(|(&g, &v)| g * v).collect();
                    drop(bd);
                    a.accumulate_grad(&ga);
                }
                if b.wants_grad() {
                    let ad = a.data();
                    let gb: Vec<E> = go.iter().zip(ad.iter()).map(|(&g, &v)| g * v).collect();
                    drop(ad);
                    b.accumulate_grad(&gb);
                }
            }
            Op::MulScalar { x, c } => {
                if x.wants_grad() {
                    let gx: Vec<E> = go.iter().map(|&g| *c * g).collect();
                    x.accumulate_grad(&gx);
                }
            }
            Op::Reshape { x } => {
                if x.wants_grad() {
                    x.accumulate_grad(go);
                }
            }
            Op::TransposeLast2 { x } => {
                if x.wants_grad() {
                    // out is [..., n, m]; transposing the gradient back gives [..., m, n]
                    let nd = out_shape.len();
                    let (n, m) = (out_shape[nd - 2], out_shape[nd - 1]);
                    let gx = transpose_mat(go, go.len() / (m * n), n, m);
                    x.accumulate_grad(&gx);
                }
            }
            Op::Bmm { a, b, scale } => {
                let (nb, m, k) = {
                    let s = a.shape();
                    (s[0], s[1], s[2])
                };
                let n = b.shape()[2];
                if a.wants_grad() {
                    let ga = kernels::bmm_backward_a(go, &b.data(), nb, m, k, n, *scale);
                    a.accumulate_grad(&ga);
                }
                if b.wants_grad() {
                    let gb = kernels::bmm_backward_b(&a.data(), go, nb, m, k, n, *scale);
                    b.accumulate_grad(&gb);
                }
            }
            Op::SoftmaxLast { x } => {
                if x.wants_grad() {
                    let n = *out_shape.last().unwrap();
                    let gx = kernels::softmax_rows_backward(out_data, go, n);
                    x.accumulate_grad(&gx);
                }
            }
            Op::SumAll { x } => {
                if x.wants_grad() {
                    let gx = vec![go[0]; x.numel()];
                    x.accumulate_grad(&gx);
                }
            }
            Op::BadIdentity { x } => {
                if x.wants_grad() {
                    // Wrong on purpose: doubles the gradient and adds a bias.
                    let gx: Vec<E> =
                        go.iter().map(|&g| g + g + lit::<E>(0.5)).collect();
                    x.accumulate_grad(&gx);
                }
            }
        }
        Ok(())
    }
}

fn conv_shapes(xs: &[usize], ws: &[usize]) -> ConvShapes {
    ConvShapes {
        batch: xs[0],
        c_in: xs[1],
        d: xs[2],
        h: xs[3],
        w: xs[4],
        c_out: ws[0],
        kz: ws[2],
        ky: ws[3],
        kx: ws[4],
    }
}

/// Stride-1, same-padding 3D cross-correlation plus bias.
///
/// `x: [b, c_in, d, h, w]`, `weight: [c_out, c_in, kz, ky, kx]` with odd
/// kernel extents, `bias: [c_out]`; output is `[b, c_out, d, h, w]`.
pub fn conv3d<E: Scalar>(x: &Tensor<E>, weight: &Tensor<E>, bias: &Tensor<E>) -> Result<Tensor<E>> {
    let xs = x.shape();
    let ws = weight.shape();
    if xs.len() != 5 || ws.len() != 5 {
        return Err(Error::ShapeMismatch(format!(
            "conv3d expects 5-d input and weight, got {xs:?} and {ws:?}"
        )));
    }
    if ws[1] != xs[1] {
        return Err(Error::ShapeMismatch(format!(
            "conv3d channel mismatch: input {} vs weight {}",
            xs[1], ws[1]
        )));
    }
    if ws[2] % 2 == 0 || ws[3] % 2 == 0 || ws[4] % 2 == 0 {
        return Err(Error::ShapeMismatch(format!(
            "conv3d kernel extents must be odd, got {:?}",
            &ws[2..]
        )));
    }
    if bias.shape() != [ws[0]] {
        return Err(Error::ShapeMismatch(format!(
            "conv3d bias shape {:?} vs c_out {}",
            bias.shape(),
            ws[0]
        )));
    }
    let s = conv_shapes(xs, ws);
    let out_shape = vec![s.batch, s.c_out, s.d, s.h, s.w];
    let mut out = vec![E::zero(); numel_of(&out_shape)];
    kernels::conv3d_forward(&x.data(), &weight.data(), &bias.data(), &s, &mut out);
    Tensor::output(
        out_shape,
        out,
        Op::Conv3d {
            x: x.clone(),
            w: weight.clone(),
            b: bias.clone(),
        },
        "conv3d",
    )
}

/// `y = x` for `x >= 0`, else `slope * x`. The derivative at exactly 0 is
/// taken as 1.
pub fn leaky_relu<E: Scalar>(x: &Tensor<E>, slope: f64) -> Result<Tensor<E>> {
    let s = lit::<E>(slope);
    let out: Vec<E> = x
        .data()
        .iter()
        .map(|&v| if v >= E::zero() { v } else { s * v })
        .collect();
    Tensor::output(
        x.shape().to_vec(),
        out,
        Op::LeakyRelu {
            x: x.clone(),
            slope: s,
        },
        "leaky_relu",
    )
}

/// Stacks tensors along the channel axis; batch and spatial dims must match.
pub fn concat_channels<E: Scalar>(xs: &[Tensor<E>]) -> Result<Tensor<E>> {
    if xs.is_empty() {
        return Err(Error::ShapeMismatch("concat of zero tensors".into()));
    }
    let first = xs[0].shape();
    if first.len() < 2 {
        return Err(Error::ShapeMismatch(format!(
            "concat needs [batch, channels, ...] tensors, got {first:?}"
        )));
    }
    for t in xs {
        let s = t.shape();
        if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
            return Err(Error::ShapeMismatch(format!(
                "concat non-channel dims differ: {first:?} vs {s:?}"
            )));
        }
    }
    let batch = first[0];
    let spatial: usize = first[2..].iter().product();
    let c_total: usize = xs.iter().map(|t| t.shape()[1]).sum();
    let mut shape = first.to_vec();
    shape[1] = c_total;
    let mut out = vec![E::zero(); batch * c_total * spatial];
    for bb in 0..batch {
        let mut c_off = 0usize;
        for t in xs {
            let c = t.shape()[1];
            let src = t.data();
            out[(bb * c_total + c_off) * spatial..][..c * spatial]
                .copy_from_slice(&src[bb * c * spatial..][..c * spatial]);
            c_off += c;
        }
    }
    Tensor::output(shape, out, Op::Concat { xs: xs.to_vec() }, "concat_channels")
}

/// Channel range `[lo, hi)` of a `[b, c, ...]` tensor.
pub fn slice_channels<E: Scalar>(x: &Tensor<E>, lo: usize, hi: usize) -> Result<Tensor<E>> {
    let s = x.shape();
    if s.len() < 2 || lo >= hi || hi > s[1] {
        return Err(Error::ShapeMismatch(format!(
            "slice_channels [{lo}, {hi}) invalid for shape {s:?}"
        )));
    }
    let batch = s[0];
    let c = s[1];
    let spatial: usize = s[2..].iter().product();
    let c_out = hi - lo;
    let mut shape = s.to_vec();
    shape[1] = c_out;
    let mut out = vec![E::zero(); batch * c_out * spatial];
    let data = x.data();
    for bb in 0..batch {
        out[bb * c_out * spatial..][..c_out * spatial]
            .copy_from_slice(&data[(bb * c + lo) * spatial..][..c_out * spatial]);
    }
    drop(data);
    Tensor::output(
        shape,
        out,
        Op::SliceChannels {
            x: x.clone(),
            lo,
            hi,
        },
        "slice_channels",
    )
}

/// out[b, c, z, y, x] = in[b, c*r^3 + (z%r)*r^2 + (y%r)*r + (x%r), z/r, y/r, x/r]
fn shuffle_map<E: Scalar>(src: &[E], out_shape: &[usize], r: usize) -> Vec<E> {
    let [b, c, od, oh, ow] = [
        out_shape[0],
        out_shape[1],
        out_shape[2],
        out_shape[3],
        out_shape[4],
    ];
    let (id, ih, iw) = (od / r, oh / r, ow / r);
    let in_c = c * r * r * r;
    let mut out = vec![E::zero(); b * c * od * oh * ow];
    let mut idx = 0usize;
    for bb in 0..b {
        for oc in 0..c {
            for z in 0..od {
                let (iz, rz) = (z / r, z % r);
                for y in 0..oh {
                    let (iy, ry) = (y / r, y % r);
                    for x in 0..ow {
                        let (ix, rx) = (x / r, x % r);
                        let ic = ((oc * r + rz) * r + ry) * r + rx;
                        out[idx] =
                            src[(((bb * in_c + ic) * id + iz) * ih + iy) * iw + ix];
                        idx += 1;
                    }
                }
            }
        }
    }
    out
}

/// Inverse of [`shuffle_map`]; `in_shape` is the shuffled (fine) side.
fn unshuffle_map<E: Scalar>(src: &[E], in_shape: &[usize], r: usize) -> Vec<E> {
    let [b, c, od, oh, ow] = [
        in_shape[0],
        in_shape[1],
        in_shape[2],
        in_shape[3],
        in_shape[4],
    ];
    let (id, ih, iw) = (od / r, oh / r, ow / r);
    let out_c = c * r * r * r;
    let mut out = vec![E::zero(); b * out_c * id * ih * iw];
    let mut idx = 0usize;
    for bb in 0..b {
        for oc in 0..out_c {
            let cc = oc / (r * r * r);
            let rem = oc % (r * r * r);
            let rz = rem / (r * r);
            let ry = (rem / r) % r;
            let rx = rem % r;
            for z in 0..id {
                for y in 0..ih {
                    for x in 0..iw {
                        out[idx] = src[(((bb * c + cc) * od + z * r + rz) * oh + y * r + ry)
                            * ow
                            + x * r
                            + rx];
                        idx += 1;
                    }
                }
            }
        }
    }
    out
}

/// Sub-pixel rearrangement `[b, c*r^3, d, h, w] -> [b, c, rd, rh, rw]`.
pub fn voxel_shuffle<E: Scalar>(x: &Tensor<E>, r: usize) -> Result<Tensor<E>> {
    let s = x.shape();
    if s.len() != 5 {
        return Err(Error::ShapeMismatch(format!(
            "voxel_shuffle expects 5-d input, got {s:?}"
        )));
    }
    if r == 0 || s[1] % (r * r * r) != 0 {
        return Err(Error::ShapeMismatch(format!(
            "voxel_shuffle channels {} not divisible by r^3 = {}",
            s[1],
            r * r * r
        )));
    }
    let shape = vec![s[0], s[1] / (r * r * r), s[2] * r, s[3] * r, s[4] * r];
    let out = shuffle_map(&x.data(), &shape, r);
    Tensor::output(
        shape,
        out,
        Op::VoxelShuffle { x: x.clone(), r },
        "voxel_shuffle",
    )
}

/// Inverse of [`voxel_shuffle`]: `[b, c, rd, rh, rw] -> [b, c*r^3, d, h, w]`.
pub fn voxel_unshuffle<E: Scalar>(x: &Tensor<E>, r: usize) -> Result<Tensor<E>> {
    let s = x.shape();
    if s.len() != 5 {
        return Err(Error::ShapeMismatch(format!(
            "voxel_unshuffle expects 5-d input, got {s:?}"
        )));
    }
    if r == 0 || s[2] % r != 0 || s[3] % r != 0 || s[4] % r != 0 {
        return Err(Error::ShapeMismatch(format!(
            "voxel_unshuffle spatial dims {:?} not divisible by r = {r}",
            &s[2..]
        )));
    }
    let shape = vec![s[0], s[1] * r * r * r, s[2] / r, s[3] / r, s[4] / r];
    let out = unshuffle_map(&x.data(), s, r);
    Tensor::output(
        shape,
        out,
        Op::VoxelUnshuffle { x: x.clone(), r },
        "voxel_unshuffle",
    )
}

fn upsample_forward<E: Scalar>(src: &[E], in_shape: &[usize], r: usize) -> (Vec<usize>, Vec<E>) {
    let [b, c, d, h, w] = [
        in_shape[0],
        in_shape[1],
        in_shape[2],
        in_shape[3],
        in_shape[4],
    ];
    let (od, oh, ow) = (d * r, h * r, w * r);
    let tz = kernels::upsample_axis_table(od, d, r);
    let ty = kernels::upsample_axis_table(oh, h, r);
    let tx = kernels::upsample_axis_table(ow, w, r);
    let mut out = vec![E::zero(); b * c * od * oh * ow];
    let mut idx = 0usize;
    for bc in 0..b * c {
        let plane = &src[bc * d * h * w..][..d * h * w];
        for &(z0, z1, fz) in &tz {
            for &(y0, y1, fy) in &ty {
                let p00 = (z0 * h + y0) * w;
                let p01 = (z0 * h + y1) * w;
                let p10 = (z1 * h + y0) * w;
                let p11 = (z1 * h + y1) * w;
                for &(x0, x1, fx) in &tx {
                    let fz = lit::<E>(fz);
                    let fy = lit::<E>(fy);
                    let fx = lit::<E>(fx);
                    let one = E::one();
                    let lerp = |a: E, b: E, f: E| a * (one - f) + b * f;
                    let c00 = lerp(plane[p00 + x0], plane[p00 + x1], fx);
                    let c01 = lerp(plane[p01 + x0], plane[p01 + x1], fx);
                    let c10 = lerp(plane[p10 + x0], plane[p10 + x1], fx);
                    let c11 = lerp(plane[p11 + x0], plane[p11 + x1], fx);
                    out[idx] = lerp(lerp(c00, c01, fy), lerp(c10, c11, fy), fz);
                    idx += 1;
                }
            }
        }
    }
    (vec![b, c, od, oh, ow], out)
}

fn upsample_backward<E: Scalar>(go: &[E], in_shape: &[usize], r: usize) -> Vec<E> {
    let [b, c, d, h, w] = [
        in_shape[0],
        in_shape[1],
        in_shape[2],
        in_shape[3],
        in_shape[4],
    ];
    let (od, oh, ow) = (d * r, h * r, w * r);
    let tz = kernels::upsample_axis_table(od, d, r);
    let ty = kernels::upsample_axis_table(oh, h, r);
    let tx = kernels::upsample_axis_table(ow, w, r);
    let mut gx = vec![E::zero(); b * c * d * h * w];
    let mut idx = 0usize;
    // Transpose of the interpolation: scatter each output gradient onto its
    // eight source corners. Sequential by design (deterministic ordering).
    for bc in 0..b * c {
        let plane = &mut gx[bc * d * h * w..][..d * h * w];
        for &(z0, z1, fz) in &tz {
            for &(y0, y1, fy) in &ty {
                for &(x0, x1, fx) in &tx {
                    let g = go[idx];
                    idx += 1;
                    let (fz, fy, fx) = (lit::<E>(fz), lit::<E>(fy), lit::<E>(fx));
                    let one = E::one();
                    let wz = [one - fz, fz];
                    let wy = [one - fy, fy];
                    let wx = [one - fx, fx];
                    let zs = [z0, z1];
                    let ys = [y0, y1];
                    let xs = [x0, x1];
                    for iz in 0..2 {
                        for iy in 0..2 {
                            for ix in 0..2 {
                                let pos = (zs[iz] * h + ys[iy]) * w + xs[ix];
                                plane[pos] =
                                    plane[pos] + g * wz[iz] * wy[iy] * wx[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Align-corners-false trilinear interpolation scaling spatial dims by `r`.
pub fn trilinear_upsample<E: Scalar>(x: &Tensor<E>, r: usize) -> Result<Tensor<E>> {
    let s = x.shape();
    if s.len() != 5 {
        return Err(Error::ShapeMismatch(format!(
            "trilinear_upsample expects 5-d input, got {s:?}"
        )));
    }
    if r == 0 {
        return Err(Error::InvalidParameter("upsample factor must be >= 1".into()));
    }
    let (shape, out) = upsample_forward(&x.data(), s, r);
    Tensor::output(
        shape,
        out,
        Op::TrilinearUp { x: x.clone(), r },
        "trilinear_upsample",
    )
}

fn crop_backward<E: Scalar>(go: &[E], in_shape: &[usize], out_shape: &[usize]) -> Vec<E> {
    let [b, c, d, h, w] = [
        in_shape[0],
        in_shape[1],
        in_shape[2],
        in_shape[3],
        in_shape[4],
    ];
    let (od, oh, ow) = (out_shape[2], out_shape[3], out_shape[4]);
    let mut gx = vec![E::zero(); b * c * d * h * w];
    for bc in 0..b * c {
        for z in 0..od {
            for y in 0..oh {
                let src = &go[((bc * od + z) * oh + y) * ow..][..ow];
                let dst = &mut gx[((bc * d + z) * h + y) * w..][..ow];
                dst.copy_from_slice(src);
            }
        }
    }
    gx
}

/// Keeps the leading `dims` spatial corner of a `[b, c, d, h, w]` tensor.
pub fn crop_spatial<E: Scalar>(x: &Tensor<E>, dims: [usize; 3]) -> Result<Tensor<E>> {
    let s = x.shape();
    if s.len() != 5 {
        return Err(Error::ShapeMismatch(format!(
            "crop_spatial expects 5-d input, got {s:?}"
        )));
    }
    if dims[0] > s[2] || dims[1] > s[3] || dims[2] > s[4] || dims.contains(&0) {
        return Err(Error::ShapeMismatch(format!(
            "crop_spatial target {dims:?} invalid for {:?}",
            &s[2..]
        )));
    }
    let shape = vec![s[0], s[1], dims[0], dims[1], dims[2]];
    let data = x.data();
    let mut out = Vec::with_capacity(numel_of(&shape));
    for bc in 0..s[0] * s[1] {
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                let row = &data[((bc * s[2] + z) * s[3] + y) * s[4]..][..dims[2]];
                out.extend_from_slice(row);
            }
        }
    }
    drop(data);
    Tensor::output(shape, out, Op::CropSpatial { x: x.clone() }, "crop_spatial")
}

fn stride_backward<E: Scalar>(
    go: &[E],
    in_shape: &[usize],
    out_shape: &[usize],
    s: usize,
) -> Vec<E> {
    let [b, c, d, h, w] = [
        in_shape[0],
        in_shape[1],
        in_shape[2],
        in_shape[3],
        in_shape[4],
    ];
    let (od, oh, ow) = (out_shape[2], out_shape[3], out_shape[4]);
    let mut gx = vec![E::zero(); b * c * d * h * w];
    for bc in 0..b * c {
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    gx[((bc * d + z * s) * h + y * s) * w + x * s] =
                        go[((bc * od + z) * oh + y) * ow + x];
                }
            }
        }
    }
    gx
}

/// Every `s`-th voxel per axis: `[b, c, d, h, w] -> [b, c, ceil(d/s), ...]`.
pub fn stride_sample<E: Scalar>(x: &Tensor<E>, s: usize) -> Result<Tensor<E>> {
    let sh = x.shape();
    if sh.len() != 5 {
        return Err(Error::ShapeMismatch(format!(
            "stride_sample expects 5-d input, got {sh:?}"
        )));
    }
    if s == 0 {
        return Err(Error::InvalidParameter("stride must be >= 1".into()));
    }
    let (d, h, w) = (sh[2], sh[3], sh[4]);
    let (od, oh, ow) = (d.div_ceil(s), h.div_ceil(s), w.div_ceil(s));
    let shape = vec![sh[0], sh[1], od, oh, ow];
    let data = x.data();
    let mut out = Vec::with_capacity(numel_of(&shape));
    for bc in 0..sh[0] * sh[1] {
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    out.push(data[((bc * d + z * s) * h + y * s) * w + xx * s]);
                }
            }
        }
    }
    drop(data);
    Tensor::output(
        shape,
        out,
        Op::StrideSample { x: x.clone(), s },
        "stride_sample",
    )
}

/// Mean absolute difference; the subgradient at exact ties is 0.
pub fn l1_loss<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "l1_loss shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let ad = a.data();
    let bd = b.data();
    let mut acc = E::zero();
    for (&x, &y) in ad.iter().zip(bd.iter()) {
        acc = acc + (x - y).abs();
    }
    let mean = acc / lit::<E>(ad.len() as f64);
    drop(ad);
    drop(bd);
    Tensor::output(
        Vec::new(),
        vec![mean],
        Op::L1 {
            a: a.clone(),
            b: b.clone(),
        },
        "l1_loss",
    )
}

/// Elementwise sum of two same-shape tensors.
pub fn add<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "add shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let out: Vec<E> = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| x + y)
        .collect();
    Tensor::output(
        a.shape().to_vec(),
        out,
        Op::Add {
            a: a.clone(),
            b: b.clone(),
        },
        "add",
    )
}

/// Elementwise product of two same-shape tensors.
pub fn mul<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "mul shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let out: Vec<E> = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| x * y)
        .collect();
    Tensor::output(
        a.shape().to_vec(),
        out,
        Op::Mul {
            a: a.clone(),
            b: b.clone(),
        },
        "mul",
    )
}

/// Multiplication by a constant.
pub fn mul_scalar<E: Scalar>(x: &Tensor<E>, c: f64) -> Result<Tensor<E>> {
    let cv = lit::<E>(c);
    let out: Vec<E> = x.data().iter().map(|&v| cv * v).collect();
    Tensor::output(
        x.shape().to_vec(),
        out,
        Op::MulScalar {
            x: x.clone(),
            c: cv,
        },
        "mul_scalar",
    )
}

/// Same data, new shape (sizes must agree).
pub fn reshape<E: Scalar>(x: &Tensor<E>, shape: &[usize]) -> Result<Tensor<E>> {
    if numel_of(shape) != x.numel() {
        return Err(Error::ShapeMismatch(format!(
            "reshape {:?} -> {shape:?} changes element count",
            x.shape()
        )));
    }
    Tensor::output(
        shape.to_vec(),
        x.to_vec(),
        Op::Reshape { x: x.clone() },
        "reshape",
    )
}

fn transpose_mat<E: Scalar>(src: &[E], n_batch: usize, m: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); src.len()];
    for bb in 0..n_batch {
        let s = &src[bb * m * n..][..m * n];
        let o = &mut out[bb * m * n..][..m * n];
        for i in 0..m {
            for j in 0..n {
                o[j * m + i] = s[i * n + j];
            }
        }
    }
    out
}

/// Swaps the last two axes.
pub fn transpose_last2<E: Scalar>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let s = x.shape();
    if s.len() < 2 {
        return Err(Error::ShapeMismatch(format!(
            "transpose_last2 needs >= 2 dims, got {s:?}"
        )));
    }
    let nd = s.len();
    let (m, n) = (s[nd - 2], s[nd - 1]);
    let n_batch = x.numel() / (m * n);
    let out = transpose_mat(&x.data(), n_batch, m, n);
    let mut shape = s.to_vec();
    shape.swap(nd - 2, nd - 1);
    Tensor::output(
        shape,
        out,
        Op::TransposeLast2 { x: x.clone() },
        "transpose_last2",
    )
}

/// Batched matrix product `scale * a @ b` with `a: [nb, m, k]`, `b: [nb, k, n]`.
pub fn bmm<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>, scale: f64) -> Result<Tensor<E>> {
    let sa = a.shape();
    let sb = b.shape();
    if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
        return Err(Error::ShapeMismatch(format!(
            "bmm shapes {sa:?} and {sb:?} do not conform"
        )));
    }
    let (nb, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
    let sc = lit::<E>(scale);
    let out = kernels::bmm_forward(&a.data(), &b.data(), nb, m, k, n, sc);
    Tensor::output(
        vec![nb, m, n],
        out,
        Op::Bmm {
            a: a.clone(),
            b: b.clone(),
            scale: sc,
        },
        "bmm",
    )
}

/// Softmax over the last axis.
pub fn softmax_last<E: Scalar>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let s = x.shape();
    if s.is_empty() {
        return Err(Error::ShapeMismatch("softmax_last on scalar".into()));
    }
    let n = *s.last().unwrap();
    let out = kernels::softmax_rows(&x.data(), n);
    Tensor::output(s.to_vec(), out, Op::SoftmaxLast { x: x.clone() }, "softmax_last")
}

/// Sum of all elements as a scalar tensor.
pub fn sum_all<E: Scalar>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let mut acc = E::zero();
    for &v in x.data().iter() {
        acc = acc + v;
    }
    Tensor::output(Vec::new(), vec![acc], Op::SumAll { x: x.clone() }, "sum_all")
}

/// Identity with a deliberately broken backward rule. Exists so the gradient
/// checker's failure detection can itself be tested.
pub fn bad_identity<E: Scalar>(x: &Tensor<E>) -> Result<Tensor<E>> {
    Tensor::output(
        x.shape().to_vec(),
        x.to_vec(),
        Op::BadIdentity { x: x.clone() },
        "bad_identity",
    )
}

/// Weights of the four 1x1x1 convolutions inside the non-local block.
#[derive(Clone)]
pub struct NonlocalParams<E: Scalar> {
    pub theta_w: Tensor<E>,
    pub theta_b: Tensor<E>,
    pub phi_w: Tensor<E>,
    pub phi_b: Tensor<E>,
    pub g_w: Tensor<E>,
    pub g_b: Tensor<E>,
    pub out_w: Tensor<E>,
    pub out_b: Tensor<E>,
}

impl<E: Scalar> NonlocalParams<E> {
    pub fn tensors(&self) -> [&Tensor<E>; 8] {
        [
            &self.theta_w,
            &self.theta_b,
            &self.phi_w,
            &self.phi_b,
            &self.g_w,
            &self.g_b,
            &self.out_w,
            &self.out_b,
        ]
    }
}

fn nonlocal_context<E: Scalar>(
    x: &Tensor<E>,
    params: &NonlocalParams<E>,
    max_positions: usize,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let s = x.shape();
    if s.len() != 5 {
        return Err(Error::ShapeMismatch(format!(
            "nonlocal_attention expects 5-d input, got {s:?}"
        )));
    }
    let (b, d, h, w) = (s[0], s[2], s[3], s[4]);
    let p = d * h * w;
    if p > max_positions {
        return Err(Error::PositionBudget {
            positions: p,
            budget: max_positions,
        });
    }
    let inner = params.theta_w.shape()[0];

    let q = conv3d(x, &params.theta_w, &params.theta_b)?;
    let k = conv3d(x, &params.phi_w, &params.phi_b)?;
    let v = conv3d(x, &params.g_w, &params.g_b)?;

    let qm = reshape(&q, &[b, inner, p])?;
    let km = reshape(&k, &[b, inner, p])?;
    let vm = reshape(&v, &[b, inner, p])?;

    let qt = transpose_last2(&qm)?; // [b, p, inner]
    let logits = bmm(&qt, &km, 1.0 / (inner as f64).sqrt())?; // [b, p, p]
    let attn = softmax_last(&logits)?;

    let vt = transpose_last2(&vm)?; // [b, p, inner]
    let ctx = bmm(&attn, &vt, 1.0)?; // [b, p, inner]
    let ctx = transpose_last2(&ctx)?; // [b, inner, p]
    let ctx = reshape(&ctx, &[b, inner, d, h, w])?;
    let delta = conv3d(&ctx, &params.out_w, &params.out_b)?;
    Ok((delta, attn))
}

/// Non-local self-attention over all spatial positions with a residual
/// connection: `y = x + W_out(softmax(theta(x)^T phi(x) / sqrt(c)) g(x))`.
/// Fails if `d*h*w` exceeds `max_positions` (the attention matrix scales
/// with positions squared).
pub fn nonlocal_attention<E: Scalar>(
    x: &Tensor<E>,
    params: &NonlocalParams<E>,
    max_positions: usize,
) -> Result<Tensor<E>> {
    let (delta, _) = nonlocal_context(x, params, max_positions)?;
    add(x, &delta)
}

/// As [`nonlocal_attention`] but also returns the `[b, p, p]` attention
/// matrix (rows sum to 1) for diagnostics.
pub fn nonlocal_attention_with_weights<E: Scalar>(
    x: &Tensor<E>,
    params: &NonlocalParams<E>,
    max_positions: usize,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let (delta, attn) = nonlocal_context(x, params, max_positions)?;
    Ok((add(x, &delta)?, attn))
}

/// Residual-free non-local context, used by the model when attention runs on
/// a strided copy and the residual add happens at full resolution.
pub fn nonlocal_delta<E: Scalar>(
    x: &Tensor<E>,
    params: &NonlocalParams<E>,
    max_positions: usize,
) -> Result<Tensor<E>> {
    Ok(nonlocal_context(x, params, max_positions)?.0)
}
