//! 3D Sobel edge responses and the combined reconstruction objective:
//! `L(y, yhat) = L1(y, yhat) + lambda * L1(S(y), S(yhat))`.
//!
//! The edge term compares per-axis responses (three channels) with L1 rather
//! than a gradient magnitude, keeping the loss piecewise linear. Sobel
//! kernels are constants; no gradient flows into them.

use crate::autograd::{add, conv3d, l1_loss, mul_scalar, lit, Scalar, Tensor};
use crate::error::{Error, Result};

/// Derivative stencil `[-1, 0, 1]` along one axis, smoothing `[1, 2, 1]`
/// along the other two. Axis order of the output channels: x, y, z.
fn sobel_kernel_data<E: Scalar>() -> Vec<E> {
    let deriv = [-1.0, 0.0, 1.0];
    let smooth = [1.0, 2.0, 1.0];
    let mut data = Vec::with_capacity(3 * 27);
    // channel 0: d/dx, channel 1: d/dy, channel 2: d/dz
    for axis in [2usize, 1, 0] {
        for dz in 0..3 {
            for dy in 0..3 {
                for dx in 0..3 {
                    let idx = [dz, dy, dx];
                    let mut v = 1.0;
                    for (a, &i) in idx.iter().enumerate() {
                        v *= if a == axis { deriv[i] } else { smooth[i] };
                    }
                    data.push(lit::<E>(v));
                }
            }
        }
    }
    data
}

/// The three constant 3x3x3 Sobel kernels as a `[3, 1, 3, 3, 3]` weight
/// tensor (no gradient).
pub fn sobel_kernels<E: Scalar>() -> Tensor<E> {
    Tensor::from_data(&[3, 1, 3, 3, 3], sobel_kernel_data()).unwrap()
}

/// Per-axis edge responses of a single-channel volume via convolution with
/// the Sobel kernels (zero padding). Output channels are the x-, y- and
/// z-derivative responses; differentiable with respect to `x`.
pub fn sobel3d<E: Scalar>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let s = x.shape();
    if s.len() != 5 || s[1] != 1 {
        return Err(Error::ShapeMismatch(format!(
            "sobel3d expects [b, 1, d, h, w], got {s:?}"
        )));
    }
    let zero_bias = Tensor::from_data(&[3], vec![E::zero(); 3]).unwrap();
    conv3d(x, &sobel_kernels(), &zero_bias)
}

/// `L1(y, yhat) + lambda * L1(S(y), S(yhat))` as a scalar graph node.
pub fn combined_loss<E: Scalar>(
    target: &Tensor<E>,
    prediction: &Tensor<E>,
    lambda: f64,
) -> Result<Tensor<E>> {
    Ok(combined_loss_parts(target, prediction, lambda)?.0)
}

/// As [`combined_loss`], additionally returning the plain intensity L1 and
/// the raw (unweighted) edge L1 values for logging.
pub fn combined_loss_parts<E: Scalar>(
    target: &Tensor<E>,
    prediction: &Tensor<E>,
    lambda: f64,
) -> Result<(Tensor<E>, f64, f64)> {
    if target.shape() != prediction.shape() {
        return Err(Error::ShapeMismatch(format!(
            "combined_loss shapes {:?} vs {:?}",
            target.shape(),
            prediction.shape()
        )));
    }
    if lambda < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "lambda_edge must be non-negative, got {lambda}"
        )));
    }
    let intensity = l1_loss(target, prediction)?;
    let edge = l1_loss(&sobel3d(target)?, &sobel3d(prediction)?)?;
    let intensity_value = intensity.item().to_f64().unwrap();
    let edge_value = edge.item().to_f64().unwrap();
    let total = add(&intensity, &mul_scalar(&edge, lambda)?)?;
    Ok((total, intensity_value, edge_value))
}

/// Default edge-term weight.
pub const DEFAULT_LAMBDA_EDGE: f64 = 0.7;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{grad_check, sum_all, mul};
    use num_traits::ToPrimitive;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kernels_sum_to_zero_and_antisymmetric() {
        let k = sobel_kernels::<f64>();
        let d = k.to_vec();
        for ch in 0..3 {
            let kd = &d[ch * 27..(ch + 1) * 27];
            let sum: f64 = kd.iter().sum();
            assert_eq!(sum, 0.0, "channel {ch} must sum to zero");
        }
        // flipping the derivative axis negates the kernel; channel 0 is d/dx
        let k0 = &d[0..27];
        for dz in 0..3 {
            for dy in 0..3 {
                for dx in 0..3 {
                    let a = k0[(dz * 3 + dy) * 3 + dx];
                    let b = k0[(dz * 3 + dy) * 3 + (2 - dx)];
                    assert_eq!(a, -b);
                }
            }
        }
    }

    #[test]
    fn constant_volume_zero_response() {
        let x = Tensor::<f32>::from_data(&[1, 1, 5, 5, 5], vec![0.42; 125]).unwrap();
        let e = sobel3d(&x).unwrap();
        // interior responses are exactly zero; borders see zero padding
        let d = e.to_vec();
        for ch in 0..3 {
            for z in 1..4 {
                for y in 1..4 {
                    for xx in 1..4 {
                        let idx = ((ch * 5 + z) * 5 + y) * 5 + xx;
                        assert_eq!(d[idx], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn x_ramp_interior_response() {
        // f = x coordinate: interior d/dx response is 2 * 16 = 32, d/dy and
        // d/dz vanish.
        let mut data = Vec::with_capacity(125);
        for _z in 0..5 {
            for _y in 0..5 {
                for x in 0..5 {
                    data.push(x as f32);
                }
            }
        }
        let x = Tensor::<f32>::from_data(&[1, 1, 5, 5, 5], data).unwrap();
        let e = sobel3d(&x).unwrap();
        let d = e.to_vec();
        let at = |ch: usize, z: usize, y: usize, xx: usize| d[((ch * 5 + z) * 5 + y) * 5 + xx];
        for z in 1..4 {
            for y in 1..4 {
                for xx in 1..4 {
                    assert_eq!(at(0, z, y, xx), 32.0, "x-channel at ({z},{y},{xx})");
                    assert_eq!(at(1, z, y, xx), 0.0);
                    assert_eq!(at(2, z, y, xx), 0.0);
                }
            }
        }
    }

    #[test]
    fn mirror_flip_negates_x_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let data: Vec<f64> = (0..125).map(|_| rng.gen()).collect();
        let mut flipped = vec![0.0f64; 125];
        for z in 0..5 {
            for y in 0..5 {
                for x in 0..5 {
                    flipped[(z * 5 + y) * 5 + (4 - x)] = data[(z * 5 + y) * 5 + x];
                }
            }
        }
        let a = Tensor::<f64>::from_data(&[1, 1, 5, 5, 5], data).unwrap();
        let b = Tensor::<f64>::from_data(&[1, 1, 5, 5, 5], flipped).unwrap();
        let ea = sobel3d(&a).unwrap().to_vec();
        let eb = sobel3d(&b).unwrap().to_vec();
        for z in 1..4 {
            for y in 1..4 {
                for x in 1..4usize {
                    let orig = ea[((z) * 5 + y) * 5 + x]; // x-channel is channel 0
                    let mirr = eb[((z) * 5 + y) * 5 + (4 - x)];
                    assert!(
                        (orig + mirr).abs() < 1e-12,
                        "interior x-response must negate under mirror"
                    );
                }
            }
        }
    }

    #[test]
    fn combined_loss_basic_values() {
        let y = Tensor::<f32>::from_data(&[1, 1, 4, 4, 4], vec![0.3; 64]).unwrap();
        assert_eq!(combined_loss(&y, &y, 0.7).unwrap().item(), 0.0);

        // constants: edge term vanishes, intensity term is |0.3 - 0.5| = 0.2
        let yhat = Tensor::<f32>::from_data(&[1, 1, 4, 4, 4], vec![0.5; 64]).unwrap();
        for lambda in [0.0, 0.7, 3.0] {
            let l = combined_loss(&y, &yhat, lambda).unwrap().item();
            assert!((l - 0.2).abs() < 1e-6, "lambda {lambda}: loss {l}");
        }
    }

    #[test]
    fn lambda_zero_equals_plain_l1_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a: Vec<f32> = (0..64).map(|_| rng.gen()).collect();
        let b: Vec<f32> = (0..64).map(|_| rng.gen()).collect();
        let y = Tensor::<f32>::from_data(&[1, 1, 4, 4, 4], a).unwrap();
        let yhat = Tensor::<f32>::from_data(&[1, 1, 4, 4, 4], b).unwrap();
        let combined = combined_loss(&y, &yhat, 0.0).unwrap().item();
        let plain = l1_loss(&y, &yhat).unwrap().item();
        assert_eq!(combined, plain);
    }

    #[test]
    fn combined_loss_monotone_in_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let a: Vec<f32> = (0..64).map(|_| rng.gen()).collect();
        let b: Vec<f32> = (0..64).map(|_| rng.gen()).collect();
        let y = Tensor::<f32>::from_data(&[1, 1, 4, 4, 4], a).unwrap();
        let yhat = Tensor::<f32>::from_data(&[1, 1, 4, 4, 4], b).unwrap();
        let mut prev = -1.0f64;
        for lambda in [0.0, 0.3, 0.7, 1.5] {
            let l = combined_loss(&y, &yhat, lambda).unwrap().item() as f64;
            assert!(l > prev);
            prev = l;
        }
    }

    #[test]
    fn combined_loss_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let target: Vec<f64> = (0..27).map(|_| rng.gen()).collect();
        // keep |target - pred| away from zero so no L1 tie is crossed
        let pred: Vec<f64> = target
            .iter()
            .map(|v| v + 0.1 + 0.3 * rng.gen::<f64>())
            .collect();
        let y = Tensor::<f64>::from_data(&[1, 1, 3, 3, 3], target).unwrap();
        let p = Tensor::<f64>::param(&[1, 1, 3, 3, 3], pred).unwrap();
        let report = grad_check(
            |inputs| combined_loss(&y, &inputs[0], 0.7),
            &[p],
            1e-4,
            1e-3,
        )
        .unwrap();
        assert!(report.passed(), "combined_loss gradcheck: {report:?}");
    }

    #[test]
    fn sobel_differentiable_wrt_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let data: Vec<f64> = (0..64).map(|_| rng.gen()).collect();
        let x = Tensor::<f64>::param(&[1, 1, 4, 4, 4], data).unwrap();
        let u = Tensor::from_data(
            &[1, 3, 4, 4, 4],
            (0..192).map(|_| rng.gen::<f64>()).collect(),
        )
        .unwrap();
        let report = grad_check(
            |inputs| sum_all(&mul(&sobel3d(&inputs[0])?, &u)?),
            &[x],
            1e-3,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "sobel gradcheck: {report:?}");
        // kernels themselves receive no gradient (constants)
        assert!(sobel_kernels::<f64>().grad().is_none());
    }

    #[test]
    fn combined_loss_parts_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let a: Vec<f32> = (0..64).map(|_| rng.gen()).collect();
        let b: Vec<f32> = (0..64).map(|_| rng.gen()).collect();
        let y = Tensor::<f32>::from_data(&[1, 1, 4, 4, 4], a).unwrap();
        let yhat = Tensor::<f32>::from_data(&[1, 1, 4, 4, 4], b).unwrap();
        let (total, intensity, edge) = combined_loss_parts(&y, &yhat, 0.7).unwrap();
        let t = total.item().to_f64().unwrap();
        assert!((t - (intensity + 0.7 * edge)).abs() < 1e-6);
    }
}
