//! Image-quality and segmentation-overlap metrics, plus the paired Wilcoxon
//! signed-rank test.
//!
//! All computations run in f64 regardless of the stored voxel type. Surface
//! distances for NSD are exact spacing-aware Euclidean distances between
//! 6-connectivity boundary voxels; no approximate distance transform is used.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::volume::{Mask, Volume};

/// Peak signal-to-noise ratio in dB: `10 * log10(range^2 / MSE)`.
/// Identical volumes report the `+inf` sentinel.
pub fn psnr(reference: &Volume, test: &Volume, data_range: f64) -> Result<f64> {
    if reference.dims() != test.dims() {
        return Err(Error::ShapeMismatch(format!(
            "psnr dims {:?} vs {:?}",
            reference.dims(),
            test.dims()
        )));
    }
    let mse = reference
        .data()
        .iter()
        .zip(test.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        / reference.data().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn ssim_window_1d() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut w = Vec::with_capacity(SSIM_WINDOW);
    for i in -r..=r {
        let t = i as f64 / SSIM_SIGMA;
        w.push((-0.5 * t * t).exp());
    }
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Separable windowed sum with zero padding. Only values at positions where
/// the window fits entirely inside the volume are meaningful to callers.
fn filter_separable(src: &[f64], dims: [usize; 3], window: &[f64]) -> Vec<f64> {
    let [d, h, w] = dims;
    let r = (window.len() / 2) as isize;
    let mut cur = src.to_vec();
    for axis in 0..3 {
        let n = dims[axis] as isize;
        let (stride, n_lines): (usize, usize) = match axis {
            0 => (h * w, h * w),
            1 => (w, d * w),
            2 => (1, d * h),
            _ => unreachable!(),
        };
        let line_base = |l: usize| -> usize {
            match axis {
                0 => l,
                1 => (l / w) * h * w + (l % w),
                2 => l * w,
                _ => unreachable!(),
            }
        };
        let mut out = vec![0.0f64; cur.len()];
        for l in 0..n_lines {
            let base = line_base(l);
            for j in 0..n {
                let mut acc = 0.0;
                for (wi, &wv) in window.iter().enumerate() {
                    let jj = j + wi as isize - r;
                    if jj >= 0 && jj < n {
                        acc += wv * cur[base + jj as usize * stride];
                    }
                }
                out[base + j as usize * stride] = acc;
            }
        }
        cur = out;
    }
    cur
}

/// Mean local SSIM with a 3D Gaussian window (11^3, sigma 1.5) over all
/// positions where the window fits inside the volume. Stabilizers are
/// `C1 = (0.01 * range)^2` and `C2 = (0.03 * range)^2`.
pub fn ssim3d(reference: &Volume, test: &Volume, data_range: f64) -> Result<f64> {
    if reference.dims() != test.dims() {
        return Err(Error::ShapeMismatch(format!(
            "ssim dims {:?} vs {:?}",
            reference.dims(),
            test.dims()
        )));
    }
    let dims = reference.dims();
    if dims.iter().any(|&d| d < SSIM_WINDOW) {
        return Err(Error::InvalidParameter(format!(
            "ssim requires dims >= {SSIM_WINDOW} per axis, got {dims:?}"
        )));
    }

    let x: Vec<f64> = reference.data().iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = test.data().iter().map(|&v| v as f64).collect();
    let xx: Vec<f64> = x.iter().map(|&v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|&v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(&a, &b)| a * b).collect();

    let window = ssim_window_1d();
    let mu_x = filter_separable(&x, dims, &window);
    let mu_y = filter_separable(&y, dims, &window);
    let e_xx = filter_separable(&xx, dims, &window);
    let e_yy = filter_separable(&yy, dims, &window);
    let e_xy = filter_separable(&xy, dims, &window);

    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    let r = SSIM_WINDOW / 2;
    let [d, h, w] = dims;

    let mut sum = 0.0;
    let mut count = 0usize;
    for z in r..d - r {
        for yv in r..h - r {
            for xv in r..w - r {
                let i = (z * h + yv) * w + xv;
                let mx = mu_x[i];
                let my = mu_y[i];
                let vx = e_xx[i] - mx * mx;
                let vy = e_yy[i] - my * my;
                let cxy = e_xy[i] - mx * my;
                let s = ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                sum += s;
                count += 1;
            }
        }
    }
    Ok(sum / count as f64)
}

/// Dice overlap `2|A n B| / (|A| + |B|)`; two empty masks count as 1.0.
pub fn dice(a: &Mask, b: &Mask) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(format!(
            "dice dims {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += (x & y) as usize;
        total += (x + y) as usize;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Foreground voxels with at least one 6-neighbour background voxel, or
/// sitting on the volume edge. Returned as physical `(z, y, x)` positions in
/// mm (voxel centers) relative to the volume origin.
fn boundary_voxels(m: &Mask) -> Vec<[f64; 3]> {
    let [d, h, w] = m.dims();
    let [sz, sy, sx] = m.spacing();
    let data = m.data();
    let at = |z: usize, y: usize, x: usize| data[(z * h + y) * w + x];
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if at(z, y, x) == 0 {
                    continue;
                }
                let edge = z == 0
                    || z == d - 1
                    || y == 0
                    || y == h - 1
                    || x == 0
                    || x == w - 1;
                let exposed = edge
                    || at(z - 1, y, x) == 0
                    || at(z + 1, y, x) == 0
                    || at(z, y - 1, x) == 0
                    || at(z, y + 1, x) == 0
                    || at(z, y, x - 1) == 0
                    || at(z, y, x + 1) == 0;
                if exposed {
                    out.push([z as f64 * sz, y as f64 * sy, x as f64 * sx]);
                }
            }
        }
    }
    out
}

fn within_tau_count(from: &[[f64; 3]], to: &[[f64; 3]], tau: f64) -> usize {
    let tau2 = tau * tau;
    from.iter()
        .filter(|p| {
            to.iter().any(|q| {
                let dz = p[0] - q[0];
                let dy = p[1] - q[1];
                let dx = p[2] - q[2];
                dz * dz + dy * dy + dx * dx <= tau2
            })
        })
        .count()
}

/// Normalized surface distance at tolerance `tau` (mm): the fraction of
/// boundary voxels of each mask lying within `tau` of the other mask's
/// boundary. Both masks empty gives 1.0, exactly one empty gives 0.0.
pub fn nsd(a: &Mask, b: &Mask, tau: f64) -> Result<f64> {
    if a.geometry() != b.geometry() {
        return Err(Error::ShapeMismatch(
            "nsd requires identical geometry".into(),
        ));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "nsd tolerance must be positive, got {tau}"
        )));
    }
    let a_empty = a.foreground_count() == 0;
    let b_empty = b.foreground_count() == 0;
    if a_empty && b_empty {
        return Ok(1.0);
    }
    if a_empty || b_empty {
        return Ok(0.0);
    }
    let sa = boundary_voxels(a);
    let sb = boundary_voxels(b);
    let hits = within_tau_count(&sa, &sb, tau) + within_tau_count(&sb, &sa, tau);
    Ok(hits as f64 / (sa.len() + sb.len()) as f64)
}

/// How the Wilcoxon p-value was computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WilcoxonMethod {
    Exact,
    NormalApprox,
}

/// Result of the paired Wilcoxon signed-rank test.
#[derive(Debug, Clone)]
pub struct WilcoxonResult {
    /// Pairs remaining after zero differences are dropped.
    pub n_effective: usize,
    /// `min(w_plus, w_minus)`.
    pub w: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    pub p_two_sided: f64,
    pub method: WilcoxonMethod,
}

/// Mid-ranks of `|d|` in ascending order, ties averaged.
fn signed_ranks(diffs: &[f64]) -> Vec<(f64, f64)> {
    // (rank, diff) pairs
    let mut order: Vec<usize> = (0..diffs.len()).collect();
    order.sort_by(|&i, &j| diffs[i].abs().partial_cmp(&diffs[j].abs()).unwrap());
    let mut ranks = vec![0.0f64; diffs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len()
            && diffs[order[j + 1]].abs() == diffs[order[i]].abs()
        {
            j += 1;
        }
        // positions i..=j share the average of ranks i+1..=j+1
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks.into_iter().zip(diffs.iter().cloned()).collect()
}

/// Distribution of `2 * W+` over all sign assignments of the realized rank
/// multiset. `counts[s]` is the number of assignments with doubled positive
/// rank sum `s`. Equivalent to full enumeration of the `2^n` sign vectors.
fn w_plus_distribution(doubled_ranks: &[u64]) -> Vec<u64> {
    let total: u64 = doubled_ranks.iter().sum();
    let mut counts = vec![0u64; total as usize + 1];
    counts[0] = 1;
    let mut reach = 0usize;
    for &r in doubled_ranks {
        let r = r as usize;
        for s in (0..=reach).rev() {
            if counts[s] > 0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    counts
}

/// Paired Wilcoxon signed-rank test with a two-sided p-value.
///
/// Zero differences are dropped; ranks of `|d|` use mid-ranks for ties. For
/// `n_effective <= 25` the p-value is exact over all `2^n` sign assignments
/// of the realized rank multiset; beyond that a normal approximation with
/// continuity and tie correction is used.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64]) -> Result<WilcoxonResult> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::InvalidParameter(format!(
            "wilcoxon requires equal-length non-empty samples, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let diffs: Vec<f64> = x
        .iter()
        .zip(y)
        .map(|(&a, &b)| a - b)
        .filter(|&d| d != 0.0)
        .collect();
    if diffs.is_empty() {
        return Err(Error::Undefined(
            "wilcoxon: all paired differences are zero".into(),
        ));
    }
    let n = diffs.len();
    let ranked = signed_ranks(&diffs);
    let w_plus: f64 = ranked.iter().filter(|(_, d)| *d > 0.0).map(|(r, _)| r).sum();
    let w_minus: f64 = ranked.iter().filter(|(_, d)| *d < 0.0).map(|(r, _)| r).sum();
    let w = w_plus.min(w_minus);

    if n <= 25 {
        // Mid-ranks are multiples of 0.5, so doubled ranks are exact integers.
        let doubled: Vec<u64> = ranked.iter().map(|(r, _)| (2.0 * r).round() as u64).collect();
        let counts = w_plus_distribution(&doubled);
        let total: u64 = doubled.iter().sum();
        let w2 = (2.0 * w).round() as u64;
        let mut favorable = 0u64;
        for (s, &c) in counts.iter().enumerate() {
            let s = s as u64;
            if s.min(total - s) <= w2 {
                favorable += c;
            }
        }
        let p = favorable as f64 / (1u64 << n) as f64;
        Ok(WilcoxonResult {
            n_effective: n,
            w,
            w_plus,
            w_minus,
            p_two_sided: p.min(1.0),
            method: WilcoxonMethod::Exact,
        })
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        // Tie correction: sum of (t^3 - t) over tie groups of |d|.
        let mut tie_term = 0.0;
        let mut sorted: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut i = 0;
        while i < sorted.len() {
            let mut j = i;
            while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
                j += 1;
            }
            let t = (j - i + 1) as f64;
            tie_term += t * t * t - t;
            i = j + 1;
        }
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
        let z = (w - mean + 0.5) / var.sqrt();
        let normal = Normal::new(0.0, 1.0).unwrap();
        let p = (2.0 * normal.cdf(z)).min(1.0);
        Ok(WilcoxonResult {
            n_effective: n,
            w,
            w_plus,
            w_minus,
            p_two_sided: p,
            method: WilcoxonMethod::NormalApprox,
        })
    }
}

/// Per-case metric values; absent metrics stay empty in the CSV.
#[derive(Debug, Clone, Default)]
pub struct CaseMetrics {
    pub id: String,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub dice: Option<f64>,
    pub nsd: Option<f64>,
}

/// Mean and standard deviation of one metric column.
#[derive(Debug, Clone, Copy)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Some(Summary { mean, sd, n })
}

/// Collection of per-case rows plus recomputable summary statistics.
#[derive(Debug, Clone, Default)]
pub struct MetricReport {
    pub rows: Vec<CaseMetrics>,
    /// Echoed NSD tolerance, when surface metrics are present.
    pub tau: Option<f64>,
}

impl MetricReport {
    pub fn summary(&self, metric: &str) -> Option<Summary> {
        let pick = |row: &CaseMetrics| match metric {
            "psnr" => row.psnr,
            "ssim" => row.ssim,
            "dice" => row.dice,
            "nsd" => row.nsd,
            _ => None,
        };
        let values: Vec<f64> = self.rows.iter().filter_map(pick).collect();
        summarize(&values)
    }

    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = String::from("case,psnr,ssim,dice,nsd\n");
        for row in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                row.id,
                fmt(row.psnr),
                fmt(row.ssim),
                fmt(row.dice),
                fmt(row.nsd)
            ));
        }
        for metric in ["psnr", "ssim", "dice", "nsd"] {
            if let Some(sum) = self.summary(metric) {
                s.push_str(&format!(
                    "# {metric}: mean={} sd={} n={}\n",
                    sum.mean, sum.sd, sum.n
                ));
            }
        }
        if let Some(tau) = self.tau {
            s.push_str(&format!("# tau_mm={tau}\n"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vol(dims: [usize; 3], data: Vec<f32>) -> Volume {
        Volume::new(dims, [1.0; 3], [0.0; 3], data).unwrap()
    }

    fn mask(dims: [usize; 3], data: Vec<u8>) -> Mask {
        Mask::new(dims, [1.0; 3], [0.0; 3], data).unwrap()
    }

    #[test]
    fn psnr_closed_forms() {
        // Constant volumes: MSE is exactly d^2 of the stored f32 values
        // (0.6f32 is not exactly 0.6, so derive d from what is stored).
        let a = vol([4, 4, 4], vec![0.5; 64]);
        let b = vol([4, 4, 4], vec![0.6; 64]);
        let d = 0.5f32 as f64 - 0.6f32 as f64;
        let want = 10.0 * (1.0 / (d * d)).log10();
        let p = psnr(&a, &b, 1.0).unwrap();
        assert!((p - want).abs() < 1e-6, "psnr {p} vs {want}");
        assert!((p - 20.0).abs() < 1e-5, "psnr {p} should be ~20 dB");
        assert!(psnr(&a, &a, 1.0).unwrap().is_infinite());

        // Doubling a constant offset lowers PSNR by exactly 20*log10(2);
        // 0.125 and 0.25 are exactly representable so the identity is sharp.
        let b1 = vol([4, 4, 4], vec![0.625; 64]);
        let b2 = vol([4, 4, 4], vec![0.75; 64]);
        let p1 = psnr(&a, &b1, 1.0).unwrap();
        let p2 = psnr(&a, &b2, 1.0).unwrap();
        assert!((p1 - p2 - 20.0 * 2.0f64.log10()).abs() < 1e-6);
    }

    #[test]
    fn psnr_decreases_with_noise_magnitude() {
        let a = vol([4, 4, 4], vec![0.5; 64]);
        let mut prev = f64::INFINITY;
        for k in 1..6 {
            let off = 0.02 * k as f32;
            let b = vol([4, 4, 4], vec![0.5 + off; 64]);
            let p = psnr(&a, &b, 1.0).unwrap();
            assert!(p < prev);
            prev = p;
        }
    }

    #[test]
    fn ssim_self_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f32> = (0..16 * 16 * 16).map(|_| rng.gen::<f32>()).collect();
        let v = vol([16, 16, 16], data);
        let s = ssim3d(&v, &v, 1.0).unwrap();
        assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_inverted_binary_pattern_is_low() {
        let mut data = Vec::with_capacity(16 * 16 * 16);
        for z in 0..16 {
            for y in 0..16 {
                for x in 0..16 {
                    data.push(((z + y + x) % 2) as f32);
                }
            }
        }
        let a = vol([16, 16, 16], data.clone());
        let inv: Vec<f32> = data.iter().map(|&v| 1.0 - v).collect();
        let b = vol([16, 16, 16], inv);
        let s = ssim3d(&a, &b, 1.0).unwrap();
        assert!(s < 0.2, "ssim {s}");
    }

    /// Literal sliding-window SSIM used as the independent oracle.
    pub(crate) fn ssim3d_reference(a: &Volume, b: &Volume, data_range: f64) -> f64 {
        let dims = a.dims();
        let [d, h, w] = dims;
        let win = ssim_window_1d();
        let r = SSIM_WINDOW / 2;
        let c1 = (0.01 * data_range).powi(2);
        let c2 = (0.03 * data_range).powi(2);
        let mut sum = 0.0;
        let mut count = 0usize;
        for cz in r..d - r {
            for cy in r..h - r {
                for cx in r..w - r {
                    let mut mx = 0.0;
                    let mut my = 0.0;
                    let mut exx = 0.0;
                    let mut eyy = 0.0;
                    let mut exy = 0.0;
                    for dz in 0..SSIM_WINDOW {
                        for dy in 0..SSIM_WINDOW {
                            for dx in 0..SSIM_WINDOW {
                                let wv = win[dz] * win[dy] * win[dx];
                                let xv =
                                    a.voxel(cz + dz - r, cy + dy - r, cx + dx - r) as f64;
                                let yv =
                                    b.voxel(cz + dz - r, cy + dy - r, cx + dx - r) as f64;
                                mx += wv * xv;
                                my += wv * yv;
                                exx += wv * xv * xv;
                                eyy += wv * yv * yv;
                                exy += wv * xv * yv;
                            }
                        }
                    }
                    let vx = exx - mx * mx;
                    let vy = eyy - my * my;
                    let cxy = exy - mx * my;
                    sum += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                        / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    count += 1;
                }
            }
        }
        sum / count as f64
    }

    #[test]
    fn ssim_matches_literal_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..2 {
            let a: Vec<f32> = (0..16 * 16 * 16).map(|_| rng.gen::<f32>()).collect();
            let b: Vec<f32> = (0..16 * 16 * 16).map(|_| rng.gen::<f32>()).collect();
            let va = vol([16, 16, 16], a);
            let vb = vol([16, 16, 16], b);
            let fast = ssim3d(&va, &vb, 1.0).unwrap();
            let slow = ssim3d_reference(&va, &vb, 1.0);
            assert!((fast - slow).abs() < 1e-6, "{fast} vs {slow}");
        }
    }

    #[test]
    fn dice_basic_cases() {
        let a = mask([2, 2, 2], vec![1, 1, 0, 0, 1, 0, 0, 0]);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        let disjoint = mask([2, 2, 2], vec![0, 0, 1, 1, 0, 0, 0, 0]);
        assert_eq!(dice(&a, &disjoint).unwrap(), 0.0);
        let empty = mask([2, 2, 2], vec![0; 8]);
        assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
    }

    #[test]
    fn dice_matches_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let a: Vec<u8> = (0..512).map(|_| rng.gen_bool(0.3) as u8).collect();
            let b: Vec<u8> = (0..512).map(|_| rng.gen_bool(0.3) as u8).collect();
            let ma = mask([8, 8, 8], a.clone());
            let mb = mask([8, 8, 8], b.clone());
            let inter = a.iter().zip(&b).filter(|(&x, &y)| x == 1 && y == 1).count();
            let na = a.iter().filter(|&&x| x == 1).count();
            let nb = b.iter().filter(|&&x| x == 1).count();
            let want = if na + nb == 0 {
                1.0
            } else {
                2.0 * inter as f64 / (na + nb) as f64
            };
            assert_eq!(dice(&ma, &mb).unwrap(), want);
        }
    }

    fn cube_mask(dims: [usize; 3], lo: [usize; 3], hi: [usize; 3]) -> Mask {
        let [d, h, w] = dims;
        let mut data = vec![0u8; d * h * w];
        for z in lo[0]..hi[0] {
            for y in lo[1]..hi[1] {
                for x in lo[2]..hi[2] {
                    data[(z * h + y) * w + x] = 1;
                }
            }
        }
        mask(dims, data)
    }

    #[test]
    fn nsd_identity_and_shifted_cube() {
        let a = cube_mask([8, 8, 8], [2, 2, 2], [6, 6, 6]);
        assert_eq!(nsd(&a, &a, 2.0).unwrap(), 1.0);

        let b = cube_mask([8, 8, 8], [2, 2, 3], [6, 6, 7]);
        assert_eq!(nsd(&a, &b, 2.0).unwrap(), 1.0);
        let tight = nsd(&a, &b, 0.5).unwrap();
        assert!(tight < 1.0, "nsd {tight}");
    }

    #[test]
    fn nsd_empty_conventions() {
        let empty = mask([4, 4, 4], vec![0; 64]);
        let something = cube_mask([4, 4, 4], [1, 1, 1], [3, 3, 3]);
        assert_eq!(nsd(&empty, &empty, 1.0).unwrap(), 1.0);
        assert_eq!(nsd(&empty, &something, 1.0).unwrap(), 0.0);
        assert_eq!(nsd(&something, &empty, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn nsd_symmetric_and_monotone_in_tau() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..5 {
            let a: Vec<u8> = (0..512).map(|_| rng.gen_bool(0.4) as u8).collect();
            let b: Vec<u8> = (0..512).map(|_| rng.gen_bool(0.4) as u8).collect();
            let ma = mask([8, 8, 8], a);
            let mb = mask([8, 8, 8], b);
            let mut prev = -1.0;
            for tau in [0.5, 1.0, 1.5, 2.5, 4.0] {
                let v = nsd(&ma, &mb, tau).unwrap();
                let sym = nsd(&mb, &ma, tau).unwrap();
                assert_eq!(v, sym);
                assert!((0.0..=1.0).contains(&v));
                assert!(v >= prev, "nsd must grow with tau");
                prev = v;
            }
        }
    }

    #[test]
    fn wilcoxon_n6_all_positive_closed_form() {
        let x = [2.0, 3.0, 1.5, 4.0, 2.5, 3.5];
        let y = [1.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        let r = wilcoxon_signed_rank(&x, &y).unwrap();
        assert_eq!(r.n_effective, 6);
        assert_eq!(r.method, WilcoxonMethod::Exact);
        assert_eq!(r.w_minus, 0.0);
        assert_eq!(r.p_two_sided, 2.0 / 64.0);
    }

    #[test]
    fn wilcoxon_identical_samples_undefined() {
        let x = [1.0, 2.0, 3.0];
        assert!(matches!(
            wilcoxon_signed_rank(&x, &x),
            Err(Error::Undefined(_))
        ));
    }

    #[test]
    fn wilcoxon_antisymmetry() {
        let x = [1.0, 4.0, 2.0, 5.0, 9.0, 2.5, 7.0];
        let y = [2.0, 3.0, 2.5, 5.5, 4.0, 2.0, 6.0];
        let a = wilcoxon_signed_rank(&x, &y).unwrap();
        let b = wilcoxon_signed_rank(&y, &x).unwrap();
        assert_eq!(a.p_two_sided, b.p_two_sided);
        assert_eq!(a.w_plus, b.w_minus);
        assert_eq!(a.w_minus, b.w_plus);
    }

    /// Brute-force enumeration oracle over all 2^n sign vectors.
    pub(crate) fn wilcoxon_exact_oracle(x: &[f64], y: &[f64]) -> f64 {
        let diffs: Vec<f64> = x
            .iter()
            .zip(y)
            .map(|(&a, &b)| a - b)
            .filter(|&d| d != 0.0)
            .collect();
        let ranked = signed_ranks(&diffs);
        let w_plus: f64 = ranked.iter().filter(|(_, d)| *d > 0.0).map(|(r, _)| r).sum();
        let w_minus: f64 = ranked.iter().filter(|(_, d)| *d < 0.0).map(|(r, _)| r).sum();
        let w_obs = w_plus.min(w_minus);
        let ranks: Vec<f64> = ranked.iter().map(|(r, _)| *r).collect();
        let n = ranks.len();
        let total: f64 = ranks.iter().sum();
        let mut favorable = 0u64;
        for bits in 0u64..(1 << n) {
            let wp: f64 = (0..n)
                .filter(|&i| bits & (1 << i) != 0)
                .map(|i| ranks[i])
                .sum();
            if wp.min(total - wp) <= w_obs + 1e-12 {
                favorable += 1;
            }
        }
        favorable as f64 / (1u64 << n) as f64
    }

    #[test]
    fn wilcoxon_matches_enumeration_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in 1..=10usize {
            for _ in 0..5 {
                // Tie-free by construction (continuous draws).
                let x: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 10.0).collect();
                let y: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 10.0).collect();
                let got = wilcoxon_signed_rank(&x, &y);
                let got = match got {
                    Ok(r) => r.p_two_sided,
                    Err(_) => continue,
                };
                let want = wilcoxon_exact_oracle(&x, &y);
                assert!(
                    (got - want).abs() < 1e-12,
                    "n={n}: exact {got} vs oracle {want}"
                );
            }
        }
    }

    #[test]
    fn wilcoxon_normal_branch_close_to_exact_distribution() {
        // n=30 forces the approximation; the DP distribution is still exact,
        // so compare against it with an approximation-sized tolerance.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x: Vec<f64> = (0..30).map(|_| rng.gen::<f64>()).collect();
        let y: Vec<f64> = (0..30).map(|_| rng.gen::<f64>() * 1.3).collect();
        let r = wilcoxon_signed_rank(&x, &y).unwrap();
        assert_eq!(r.method, WilcoxonMethod::NormalApprox);

        let diffs: Vec<f64> = x.iter().zip(&y).map(|(&a, &b)| a - b).collect();
        let ranked = signed_ranks(&diffs);
        let doubled: Vec<u64> = ranked.iter().map(|(rk, _)| (2.0 * rk).round() as u64).collect();
        let counts = w_plus_distribution(&doubled);
        let total: u64 = doubled.iter().sum();
        let w2 = (2.0 * r.w).round() as u64;
        let favorable: u64 = counts
            .iter()
            .enumerate()
            .filter(|(s, _)| (*s as u64).min(total - *s as u64) <= w2)
            .map(|(_, &c)| c)
            .sum();
        let exact = favorable as f64 / 2f64.powi(30);
        assert!(
            (r.p_two_sided - exact).abs() < 0.01,
            "approx {} vs exact {exact}",
            r.p_two_sided
        );
    }

    #[test]
    fn report_summary_recomputable() {
        let report = MetricReport {
            rows: vec![
                CaseMetrics {
                    id: "a".into(),
                    psnr: Some(20.0),
                    dice: Some(0.8),
                    ..Default::default()
                },
                CaseMetrics {
                    id: "b".into(),
                    psnr: Some(30.0),
                    dice: Some(0.6),
                    ..Default::default()
                },
            ],
            tau: Some(2.0),
        };
        let s = report.summary("psnr").unwrap();
        assert_eq!(s.mean, 25.0);
        assert_eq!(s.n, 2);
        let csv = report.to_csv();
        assert!(csv.contains("case,psnr,ssim,dice,nsd"));
        assert!(csv.contains("# tau_mm=2"));
    }
}
