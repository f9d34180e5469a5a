//! Volume and mask representation plus the image-space geometry operations:
//! HU windowing, trilinear resampling and cropping.
//!
//! A [`Volume`] is a dense 3D scalar grid with physical spacing and origin.
//! Axis order throughout is `(z, y, x)` for dims/spacing/origin, and voxel
//! data is stored row-major with x fastest, matching the NIfTI on-disk
//! layout. Orientation beyond spacing and origin (qform/sform rotations) is
//! deliberately not modeled.
//!
//! All operations are pure; volumes are never mutated after construction.

use crate::error::{Error, Result};

/// Physical grid description shared by [`Volume`] and [`Mask`].
#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    /// Voxel counts `(d, h, w)` = `(z, y, x)`.
    pub dims: [usize; 3],
    /// Voxel size in mm per axis `(sz, sy, sx)`, each strictly positive.
    pub spacing: [f64; 3],
    /// Physical position of the center of voxel `(0, 0, 0)` in mm, `(z, y, x)`.
    pub origin: [f64; 3],
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidGeometry(format!(
                "voxel counts must be positive, got {dims:?}"
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidGeometry(format!(
                "spacing must be strictly positive and finite, got {spacing:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidGeometry(format!(
                "origin must be finite, got {origin:?}"
            )));
        }
        Ok(Geometry {
            dims,
            spacing,
            origin,
        })
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }
}

/// A 3D scalar grid with physical geometry. Intensities are HU for raw CT
/// data or `[0, 1]` after windowing.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    geometry: Geometry,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        data: Vec<f32>,
    ) -> Result<Self> {
        let geometry = Geometry::new(dims, spacing, origin)?;
        if data.len() != geometry.voxel_count() {
            return Err(Error::InvalidGeometry(format!(
                "data length {} does not match dims {:?} ({} voxels)",
                data.len(),
                dims,
                geometry.voxel_count()
            )));
        }
        if let Some(idx) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidGeometry(format!(
                "non-finite intensity at voxel {idx}"
            )));
        }
        Ok(Volume { geometry, data })
    }

    pub fn from_geometry(geometry: Geometry, data: Vec<f32>) -> Result<Self> {
        Self::new(geometry.dims, geometry.spacing, geometry.origin, data)
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.geometry.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.geometry.origin
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn voxel(&self, z: usize, y: usize, x: usize) -> f32 {
        let [_, h, w] = self.geometry.dims;
        self.data[(z * h + y) * w + x]
    }

    pub fn min_max(&self) -> (f32, f32) {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in &self.data {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

/// A binary segmentation on the same kind of grid as [`Volume`].
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    geometry: Geometry,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        data: Vec<u8>,
    ) -> Result<Self> {
        let geometry = Geometry::new(dims, spacing, origin)?;
        if data.len() != geometry.voxel_count() {
            return Err(Error::InvalidGeometry(format!(
                "mask data length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        if let Some(idx) = data.iter().position(|&v| v > 1) {
            return Err(Error::NonBinaryMask {
                index: idx,
                value: data[idx] as f32,
            });
        }
        Ok(Mask { geometry, data })
    }

    /// Reinterprets a volume as a binary mask. Every voxel must be exactly
    /// 0.0 or 1.0.
    pub fn from_volume(v: &Volume) -> Result<Self> {
        let mut data = Vec::with_capacity(v.data.len());
        for (idx, &x) in v.data.iter().enumerate() {
            if x == 0.0 {
                data.push(0u8);
            } else if x == 1.0 {
                data.push(1u8);
            } else {
                return Err(Error::NonBinaryMask { index: idx, value: x });
            }
        }
        Mask::new(v.dims(), v.spacing(), v.origin(), data)
    }

    pub fn to_volume(&self) -> Volume {
        Volume {
            geometry: self.geometry.clone(),
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.geometry.spacing
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }
}

/// Display/processing window over the HU scale: `level` is the center,
/// `width` the full range mapped onto `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowSpec {
    pub level: f32,
    pub width: f32,
}

impl WindowSpec {
    pub fn new(level: f32, width: f32) -> Result<Self> {
        if !(width > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "window width must be positive, got {width}"
            )));
        }
        Ok(WindowSpec { level, width })
    }

    /// Abdominal soft-tissue window: level 50 HU, width 450 HU.
    pub fn abdomen() -> Self {
        WindowSpec {
            level: 50.0,
            width: 450.0,
        }
    }
}

/// Affine clamp of HU intensities onto `[0, 1]`:
/// `clamp((x - (level - width/2)) / width, 0, 1)`. Geometry is unchanged.
pub fn window_hu(v: &Volume, w: WindowSpec) -> Volume {
    let lo = w.level - w.width / 2.0;
    let data = v
        .data
        .iter()
        .map(|&x| ((x - lo) / w.width).clamp(0.0, 1.0))
        .collect();
    Volume {
        geometry: v.geometry.clone(),
        data,
    }
}

#[derive(Clone, Copy)]
enum SampleMethod {
    Trilinear,
    Nearest,
}

/// Resamples `v` onto the grid of `target`. Each output voxel takes the
/// interpolated value of `v` at the physical position of its center; points
/// outside `v`'s extent clamp to the nearest edge voxel.
pub fn resample_trilinear(v: &Volume, target: &Geometry) -> Volume {
    resample_impl(v, target, SampleMethod::Trilinear)
}

/// Nearest-neighbour variant of [`resample_trilinear`]; used for masks and
/// the `nearest` resize method.
pub fn resample_nearest(v: &Volume, target: &Geometry) -> Volume {
    resample_impl(v, target, SampleMethod::Nearest)
}

fn resample_impl(v: &Volume, target: &Geometry, method: SampleMethod) -> Volume {
    let [sd, sh, sw] = v.geometry.dims;
    let [td, th, tw] = target.dims;

    // Per-axis affine map from target voxel index to source voxel coordinate:
    // q = offset + i * ratio. When geometries are identical this yields
    // offset = 0 and ratio = 1 exactly, so identity resampling is bit-exact.
    let axis_map = |axis: usize| -> (f64, f64) {
        let offset =
            (target.origin[axis] - v.geometry.origin[axis]) / v.geometry.spacing[axis];
        let ratio = target.spacing[axis] / v.geometry.spacing[axis];
        (offset, ratio)
    };
    let (oz, rz) = axis_map(0);
    let (oy, ry) = axis_map(1);
    let (ox, rx) = axis_map(2);

    // Precomputed per-axis neighbour indices and weights (clamp-to-edge).
    let axis_table = |n_out: usize, n_src: usize, off: f64, ratio: f64| {
        let mut table = Vec::with_capacity(n_out);
        for i in 0..n_out {
            let q = (off + i as f64 * ratio).clamp(0.0, (n_src - 1) as f64);
            match method {
                SampleMethod::Trilinear => {
                    let i0 = q.floor() as usize;
                    let i1 = (i0 + 1).min(n_src - 1);
                    let f = q - i0 as f64;
                    table.push((i0, i1, f));
                }
                SampleMethod::Nearest => {
                    let i0 = (q + 0.5).floor() as usize;
                    let i0 = i0.min(n_src - 1);
                    table.push((i0, i0, 0.0));
                }
            }
        }
        table
    };
    let tz = axis_table(td, sd, oz, rz);
    let ty = axis_table(th, sh, oy, ry);
    let tx = axis_table(tw, sw, ox, rx);

    let src = &v.data;
    let mut out = Vec::with_capacity(target.voxel_count());
    for &(z0, z1, fz) in &tz {
        for &(y0, y1, fy) in &ty {
            let p00 = (z0 * sh + y0) * sw;
            let p01 = (z0 * sh + y1) * sw;
            let p10 = (z1 * sh + y0) * sw;
            let p11 = (z1 * sh + y1) * sw;
            for &(x0, x1, fx) in &tx {
                let lerp = |a: f64, b: f64, f: f64| a * (1.0 - f) + b * f;
                let c00 = lerp(src[p00 + x0] as f64, src[p00 + x1] as f64, fx);
                let c01 = lerp(src[p01 + x0] as f64, src[p01 + x1] as f64, fx);
                let c10 = lerp(src[p10 + x0] as f64, src[p10 + x1] as f64, fx);
                let c11 = lerp(src[p11 + x0] as f64, src[p11 + x1] as f64, fx);
                let c0 = lerp(c00, c01, fy);
                let c1 = lerp(c10, c11, fy);
                out.push(lerp(c0, c1, fz) as f32);
            }
        }
    }

    Volume {
        geometry: target.clone(),
        data: out,
    }
}

/// Extracts the sub-volume `[lo, hi)` (exclusive upper bound, per axis).
/// The origin shifts by `lo * spacing` so physical positions are preserved.
pub fn crop(v: &Volume, lo: [usize; 3], hi: [usize; 3]) -> Result<Volume> {
    let dims = v.geometry.dims;
    for a in 0..3 {
        if lo[a] >= hi[a] || hi[a] > dims[a] {
            return Err(Error::Bounds(format!(
                "crop bounds lo={lo:?} hi={hi:?} invalid for dims {dims:?}"
            )));
        }
    }
    let [_, h, w] = dims;
    let out_dims = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
    let mut data = Vec::with_capacity(out_dims[0] * out_dims[1] * out_dims[2]);
    for z in lo[0]..hi[0] {
        for y in lo[1]..hi[1] {
            let row = (z * h + y) * w;
            data.extend_from_slice(&v.data[row + lo[2]..row + hi[2]]);
        }
    }
    let origin = [
        v.geometry.origin[0] + lo[0] as f64 * v.geometry.spacing[0],
        v.geometry.origin[1] + lo[1] as f64 * v.geometry.spacing[1],
        v.geometry.origin[2] + lo[2] as f64 * v.geometry.spacing[2],
    ];
    Volume::new(out_dims, v.geometry.spacing, origin, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_volume(dims: [usize; 3], spacing: [f64; 3]) -> Volume {
        let [d, h, w] = dims;
        let mut data = Vec::with_capacity(d * h * w);
        for _z in 0..d {
            for _y in 0..h {
                for x in 0..w {
                    data.push(x as f32);
                }
            }
        }
        Volume::new(dims, spacing, [0.0; 3], data).unwrap()
    }

    #[test]
    fn window_center_maps_to_half() {
        let v = Volume::new([1, 1, 3], [1.0; 3], [0.0; 3], vec![50.0, -175.0, 275.0]).unwrap();
        let w = window_hu(&v, WindowSpec::abdomen());
        assert_eq!(w.data(), &[0.5, 0.0, 1.0]);
    }

    #[test]
    fn window_direct_formula() {
        let v = Volume::new([1, 1, 1], [1.0; 3], [0.0; 3], vec![162.5]).unwrap();
        let w = window_hu(&v, WindowSpec::abdomen());
        assert_eq!(w.data()[0], 0.75);
    }

    #[test]
    fn window_monotone_and_idempotent_on_endpoints() {
        let spec = WindowSpec::abdomen();
        let mut prev = -1.0f32;
        for i in 0..200 {
            let hu = -400.0 + i as f32 * 5.0;
            let v = Volume::new([1, 1, 1], [1.0; 3], [0.0; 3], vec![hu]).unwrap();
            let out = window_hu(&v, spec).data()[0];
            assert!(out >= prev, "window must be monotone");
            prev = out;
        }
    }

    #[test]
    fn resample_identity_is_exact() {
        let v = ramp_volume([4, 5, 6], [0.7, 1.3, 2.5]);
        let out = resample_trilinear(&v, v.geometry());
        assert_eq!(out.data(), v.data());
        assert_eq!(out.geometry(), v.geometry());
    }

    #[test]
    fn resample_constant_stays_constant() {
        let v = Volume::new([4, 4, 4], [1.0; 3], [0.0; 3], vec![0.37; 64]).unwrap();
        let target = Geometry::new([7, 3, 9], [0.5, 1.5, 0.4], [0.2, -0.3, 0.9]).unwrap();
        let out = resample_trilinear(&v, &target);
        for &x in out.data() {
            assert!((x - 0.37).abs() < 1e-6);
        }
    }

    #[test]
    fn resample_linear_ramp_halved_spacing() {
        // f(x) = x sampled at half spacing: value at output voxel i is i/2.
        let v = ramp_volume([4, 4, 8], [1.0, 1.0, 1.0]);
        let target = Geometry::new([4, 4, 15], [1.0, 1.0, 0.5], [0.0; 3]).unwrap();
        let out = resample_trilinear(&v, &target);
        for z in 0..4 {
            for y in 0..4 {
                for x in 0..15 {
                    let got = out.voxel(z, y, x);
                    let want = x as f32 * 0.5;
                    assert!(
                        (got - want).abs() < 1e-5,
                        "ramp mismatch at x={x}: {got} vs {want}"
                    );
                }
            }
        }
    }

    #[test]
    fn resample_preserves_bounds() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f32> = (0..6 * 6 * 6).map(|_| rng.gen::<f32>()).collect();
        let v = Volume::new([6, 6, 6], [1.0; 3], [0.0; 3], data).unwrap();
        let (lo, hi) = v.min_max();
        let target = Geometry::new([9, 4, 13], [0.6, 1.4, 0.5], [-1.0, 0.3, 2.0]).unwrap();
        let out = resample_trilinear(&v, &target);
        for &x in out.data() {
            assert!(x >= lo - 1e-6 && x <= hi + 1e-6);
        }
    }

    #[test]
    fn crop_identity_and_shift() {
        let v = ramp_volume([16, 16, 16], [1.0, 2.0, 3.0]);
        let full = crop(&v, [0, 0, 0], [16, 16, 16]).unwrap();
        assert_eq!(full, v);

        let sub = crop(&v, [4, 4, 4], [12, 12, 12]).unwrap();
        assert_eq!(sub.dims(), [8, 8, 8]);
        assert_eq!(sub.voxel(0, 0, 0), v.voxel(4, 4, 4));
        // origin of output = origin + lo * spacing
        assert_eq!(sub.origin(), [4.0, 8.0, 12.0]);
    }

    #[test]
    fn crop_composes() {
        let v = ramp_volume([10, 10, 10], [1.0; 3]);
        let a = crop(&v, [1, 2, 3], [9, 9, 9]).unwrap();
        let b = crop(&a, [2, 1, 0], [5, 4, 3]).unwrap();
        let direct = crop(&v, [3, 3, 3], [6, 6, 6]).unwrap();
        assert_eq!(b, direct);
    }

    #[test]
    fn crop_bounds_checked() {
        let v = ramp_volume([4, 4, 4], [1.0; 3]);
        assert!(crop(&v, [0, 0, 0], [5, 4, 4]).is_err());
        assert!(crop(&v, [2, 0, 0], [2, 4, 4]).is_err());
    }
}
