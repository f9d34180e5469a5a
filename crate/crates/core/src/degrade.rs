//! Seeded second-order degradation pipeline.
//!
//! A degradation run applies two stages, each a randomly sampled combination
//! of Gaussian blur, resizing and noise (in that fixed order), then brings
//! the result to exactly `ceil(dims / final_scale)` voxels per axis. Every
//! sampled decision is recorded in a [`DegradationRecipe`]; replaying a
//! recipe on the same input reproduces the degraded volume bit-exactly.
//!
//! Randomness comes from the ChaCha8 counter-based stream cipher seeded with
//! the run seed. The draw order per stage is fixed and documented in
//! [`degrade_with_params`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;

use crate::error::{Error, Result};
use crate::volume::{resample_nearest, resample_trilinear, Geometry, Volume};

/// Blur kernel family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlurKind {
    Isotropic,
    Anisotropic,
}

/// Separable sampled Gaussian, normalized to sum 1.
#[derive(Debug, Clone)]
pub struct BlurKernel {
    pub kind: BlurKind,
    pub sigmas: [f64; 3],
    pub radius: usize,
    weights: [Vec<f64>; 3], // per axis (z, y, x), each normalized
}

impl BlurKernel {
    pub fn axis_weights(&self, axis: usize) -> &[f64] {
        &self.weights[axis]
    }

    /// Dense 3D weight at offset `(dz, dy, dx)` in `[-radius, radius]^3`.
    pub fn weight(&self, dz: isize, dy: isize, dx: isize) -> f64 {
        let r = self.radius as isize;
        self.weights[0][(dz + r) as usize]
            * self.weights[1][(dy + r) as usize]
            * self.weights[2][(dx + r) as usize]
    }
}

/// Samples a separable Gaussian kernel. `radius` is the half-extent along
/// every axis; `ceil(3 * max(sigma))` is the usual choice.
pub fn gaussian_kernel_3d(sigmas: [f64; 3], radius: usize) -> Result<BlurKernel> {
    if sigmas.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::InvalidParameter(format!(
            "blur sigmas must be positive, got {sigmas:?}"
        )));
    }
    if radius == 0 {
        return Err(Error::InvalidParameter("blur radius must be >= 1".into()));
    }
    let axis = |sigma: f64| {
        let mut w = Vec::with_capacity(2 * radius + 1);
        for i in -(radius as isize)..=(radius as isize) {
            let t = i as f64 / sigma;
            w.push((-0.5 * t * t).exp());
        }
        let sum: f64 = w.iter().sum();
        for v in &mut w {
            *v /= sum;
        }
        w
    };
    let kind = if sigmas[0] == sigmas[1] && sigmas[1] == sigmas[2] {
        BlurKind::Isotropic
    } else {
        BlurKind::Anisotropic
    };
    Ok(BlurKernel {
        kind,
        sigmas,
        radius,
        weights: [axis(sigmas[0]), axis(sigmas[1]), axis(sigmas[2])],
    })
}

/// One separable filtering pass along `axis` with clamp-to-edge ends.
fn blur_pass(src: &[f64], dims: [usize; 3], axis: usize, weights: &[f64], radius: isize) -> Vec<f64> {
    let [d, h, w] = dims;
    let n = dims[axis] as isize;
    let mut out = vec![0.0f64; src.len()];
    // Each line runs along the filtered axis; `line_base(l)` gives the index
    // of its first element and `stride` the step between elements.
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
    for l in 0..n_lines {
        let base = line_base(l);
        for j in 0..n {
            let mut acc = 0.0;
            for (wi, &wv) in weights.iter().enumerate() {
                let jj = (j + wi as isize - radius).clamp(0, n - 1) as usize;
                acc += wv * src[base + jj * stride];
            }
            out[base + j as usize * stride] = acc;
        }
    }
    out
}

/// Separable convolution with clamp-to-edge boundary handling. Geometry is
/// unchanged. The kernel extent must fit in the volume along every axis.
pub fn apply_blur(v: &Volume, k: &BlurKernel) -> Result<Volume> {
    let dims = v.dims();
    let extent = 2 * k.radius + 1;
    if dims.iter().any(|&d| extent > d) {
        return Err(Error::InvalidParameter(format!(
            "kernel extent {extent} exceeds volume dims {dims:?}"
        )));
    }

    let r = k.radius as isize;
    let mut cur: Vec<f64> = v.data().iter().map(|&x| x as f64).collect();
    for axis in 0..3 {
        cur = blur_pass(&cur, dims, axis, &k.weights[axis], r);
    }

    let data: Vec<f32> = cur.iter().map(|&x| x as f32).collect();
    Volume::new(dims, v.spacing(), v.origin(), data)
}

/// Noise family applied to windowed `[0, 1]` intensities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    Gaussian,
    Poisson,
}

/// Adds seeded noise and clamps back to `[0, 1]`.
///
/// * `Gaussian`: `strength` is the additive standard deviation.
/// * `Poisson`: `strength` is the photon-count scale `lambda_max`; each voxel
///   becomes `Poisson(x * lambda_max) / lambda_max`.
pub fn add_noise(v: &Volume, kind: NoiseKind, strength: f64, seed: u64) -> Result<Volume> {
    if !(strength > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "noise strength must be positive, got {strength}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(v.data().len());
    match kind {
        NoiseKind::Gaussian => {
            let normal = rand_distr::Normal::new(0.0f64, strength).unwrap();
            for &x in v.data() {
                let y = x as f64 + normal.sample(&mut rng);
                data.push(y.clamp(0.0, 1.0) as f32);
            }
        }
        NoiseKind::Poisson => {
            for &x in v.data() {
                let lambda = x as f64 * strength;
                let y = if lambda > 0.0 {
                    let pois = rand_distr::Poisson::new(lambda).map_err(|e| {
                        Error::InvalidParameter(format!("poisson lambda {lambda}: {e}"))
                    })?;
                    pois.sample(&mut rng) / strength
                } else {
                    0.0
                };
                data.push(y.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Volume::new(v.dims(), v.spacing(), v.origin(), data)
}

/// Resize method for [`resize_volume`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResizeMethod {
    Trilinear,
    Nearest,
}

/// Scales the voxel grid by `scale`: output dims are `floor(dims * scale)`
/// (at least 1 required) and spacing is divided by `scale`.
pub fn resize_volume(v: &Volume, scale: f64, method: ResizeMethod) -> Result<Volume> {
    if !(scale > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "resize scale must be positive, got {scale}"
        )));
    }
    let dims = v.dims();
    let mut out_dims = [0usize; 3];
    for a in 0..3 {
        out_dims[a] = (dims[a] as f64 * scale).floor() as usize;
        if out_dims[a] < 1 {
            return Err(Error::InvalidParameter(format!(
                "resize scale {scale} degenerates axis {a} of dims {dims:?}"
            )));
        }
    }
    if out_dims == dims {
        return Ok(v.clone());
    }
    let spacing = v.spacing().map(|s| s / scale);
    let target = Geometry::new(out_dims, spacing, v.origin())?;
    Ok(match method {
        ResizeMethod::Trilinear => resample_trilinear(v, &target),
        ResizeMethod::Nearest => resample_nearest(v, &target),
    })
}

/// Parameter ranges and per-op apply probabilities for one degradation run.
#[derive(Debug, Clone)]
pub struct DegradeParams {
    pub p_blur: f64,
    pub p_resize: f64,
    pub p_noise: f64,
    /// Blur sigma range in voxels (both isotropic and per-axis anisotropic).
    pub sigma_range: (f64, f64),
    /// Additive Gaussian noise sigma range.
    pub gauss_sigma_range: (f64, f64),
    /// Poisson photon-count scale range.
    pub poisson_lambda_range: (f64, f64),
    /// Intermediate per-stage resize scale range.
    pub resize_range: (f64, f64),
}

impl Default for DegradeParams {
    fn default() -> Self {
        DegradeParams {
            p_blur: 0.8,
            p_resize: 0.7,
            p_noise: 0.9,
            sigma_range: (0.2, 2.0),
            gauss_sigma_range: (0.005, 0.05),
            poisson_lambda_range: (200.0, 4000.0),
            resize_range: (0.5, 1.5),
        }
    }
}

/// Sampled blur decision of one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct BlurStep {
    pub kind: BlurKind,
    pub sigmas: [f64; 3],
}

/// Sampled noise decision of one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseStep {
    pub kind: NoiseKind,
    pub strength: f64,
    pub seed: u64,
}

/// Ordered op selection of one stage (applied blur -> resize -> noise).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageRecipe {
    pub blur: Option<BlurStep>,
    pub resize: Option<f64>,
    pub noise: Option<NoiseStep>,
}

/// Replayable description of a full second-order degradation.
#[derive(Debug, Clone, PartialEq)]
pub struct DegradationRecipe {
    pub seed: u64,
    pub final_scale: u32,
    pub stages: [StageRecipe; 2],
}

fn blur_radius_for(sigmas: [f64; 3], dims: [usize; 3]) -> usize {
    let max_sigma = sigmas.iter().cloned().fold(0.0f64, f64::max);
    let wanted = (3.0 * max_sigma).ceil() as usize;
    let cap = (dims.iter().cloned().min().unwrap() - 1) / 2;
    wanted.clamp(1, cap.max(1))
}

fn apply_stage(v: &Volume, stage: &StageRecipe) -> Result<Volume> {
    let mut cur = v.clone();
    if let Some(blur) = &stage.blur {
        let radius = blur_radius_for(blur.sigmas, cur.dims());
        let kernel = gaussian_kernel_3d(blur.sigmas, radius)?;
        cur = apply_blur(&cur, &kernel)?;
    }
    if let Some(scale) = stage.resize {
        cur = resize_volume(&cur, scale, ResizeMethod::Trilinear)?;
    }
    if let Some(noise) = &stage.noise {
        cur = add_noise(&cur, noise.kind, noise.strength, noise.seed)?;
    }
    Ok(cur)
}

fn final_target(orig: &Geometry, final_scale: u32) -> Geometry {
    let fs = final_scale as f64;
    let mut dims = [0usize; 3];
    let mut spacing = [0f64; 3];
    for a in 0..3 {
        dims[a] = (orig.dims[a] as f64 / fs).ceil() as usize;
        spacing[a] = orig.spacing[a] * orig.dims[a] as f64 / dims[a] as f64;
    }
    Geometry {
        dims,
        spacing,
        origin: orig.origin,
    }
}

/// Applies a previously sampled recipe. Bit-exact with respect to the run
/// that produced it.
pub fn apply_recipe(v: &Volume, recipe: &DegradationRecipe) -> Result<Volume> {
    let orig_geometry = v.geometry().clone();
    let mut cur = v.clone();
    for stage in &recipe.stages {
        cur = apply_stage(&cur, stage)?;
    }
    let target = final_target(&orig_geometry, recipe.final_scale);
    if target.dims != cur.dims() || target != *cur.geometry() {
        cur = resample_trilinear(&cur, &target);
    }
    Ok(cur)
}

/// Samples and applies a two-stage degradation with default parameters.
pub fn degrade_second_order(
    v: &Volume,
    seed: u64,
    final_scale: u32,
) -> Result<(Volume, DegradationRecipe)> {
    degrade_with_params(v, seed, final_scale, &DegradeParams::default())
}

/// Samples and applies a two-stage degradation.
///
/// Draw order per stage (one ChaCha8 stream for the whole run, draws consumed
/// only when the corresponding op is selected):
///
/// 1. `u ~ U[0,1)`: apply blur iff `u < p_blur`
/// 2. if blur: `u < 0.5` selects isotropic; then 1 (isotropic) or 3
///    (anisotropic, z/y/x order) sigma draws from `sigma_range`
/// 3. `u ~ U[0,1)`: apply resize iff `u < p_resize`
/// 4. if resize: scale draw from `resize_range`
/// 5. `u ~ U[0,1)`: apply noise iff `u < p_noise`
/// 6. if noise: `u < 0.5` selects Gaussian; strength draw from the matching
///    range; one `u64` draw seeds the noise stream
pub fn degrade_with_params(
    v: &Volume,
    seed: u64,
    final_scale: u32,
    params: &DegradeParams,
) -> Result<(Volume, DegradationRecipe)> {
    if !matches!(final_scale, 1 | 2 | 4) {
        return Err(Error::InvalidParameter(format!(
            "final_scale must be 1, 2 or 4, got {final_scale}"
        )));
    }
    let dims = v.dims();
    if dims.iter().any(|&d| d < 4 * final_scale as usize) {
        return Err(Error::InvalidParameter(format!(
            "volume dims {dims:?} too small for final_scale {final_scale}"
        )));
    }
    let (lo, hi) = v.min_max();
    if lo < 0.0 || hi > 1.0 {
        return Err(Error::InvalidParameter(format!(
            "input must be windowed to [0, 1], found range [{lo}, {hi}]"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let uniform = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| lo + (hi - lo) * rng.gen::<f64>();

    let mut stages: [StageRecipe; 2] = [StageRecipe::default(), StageRecipe::default()];
    for stage in stages.iter_mut() {
        if rng.gen::<f64>() < params.p_blur {
            let kind = if rng.gen::<f64>() < 0.5 {
                BlurKind::Isotropic
            } else {
                BlurKind::Anisotropic
            };
            let sigmas = match kind {
                BlurKind::Isotropic => {
                    let s = uniform(&mut rng, params.sigma_range);
                    [s, s, s]
                }
                BlurKind::Anisotropic => [
                    uniform(&mut rng, params.sigma_range),
                    uniform(&mut rng, params.sigma_range),
                    uniform(&mut rng, params.sigma_range),
                ],
            };
            stage.blur = Some(BlurStep { kind, sigmas });
        }
        if rng.gen::<f64>() < params.p_resize {
            stage.resize = Some(uniform(&mut rng, params.resize_range));
        }
        if rng.gen::<f64>() < params.p_noise {
            let kind = if rng.gen::<f64>() < 0.5 {
                NoiseKind::Gaussian
            } else {
                NoiseKind::Poisson
            };
            let strength = match kind {
                NoiseKind::Gaussian => uniform(&mut rng, params.gauss_sigma_range),
                NoiseKind::Poisson => uniform(&mut rng, params.poisson_lambda_range),
            };
            stage.noise = Some(NoiseStep {
                kind,
                strength,
                seed: rng.gen::<u64>(),
            });
        }
    }

    let recipe = DegradationRecipe {
        seed,
        final_scale,
        stages,
    };
    let out = apply_recipe(v, &recipe)?;
    Ok((out, recipe))
}

impl DegradationRecipe {
    /// Line-oriented `key=value` serialization for the CLI sidecar. Floats
    /// use Rust's shortest round-trip formatting.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("seed={}\n", self.seed));
        s.push_str(&format!("final_scale={}\n", self.final_scale));
        for (i, stage) in self.stages.iter().enumerate() {
            let p = format!("stage{}", i + 1);
            if let Some(blur) = &stage.blur {
                let kind = match blur.kind {
                    BlurKind::Isotropic => "isotropic",
                    BlurKind::Anisotropic => "anisotropic",
                };
                s.push_str(&format!("{p}.blur.kind={kind}\n"));
                s.push_str(&format!("{p}.blur.sigma_z={}\n", blur.sigmas[0]));
                s.push_str(&format!("{p}.blur.sigma_y={}\n", blur.sigmas[1]));
                s.push_str(&format!("{p}.blur.sigma_x={}\n", blur.sigmas[2]));
            }
            if let Some(scale) = stage.resize {
                s.push_str(&format!("{p}.resize.scale={scale}\n"));
            }
            if let Some(noise) = &stage.noise {
                let kind = match noise.kind {
                    NoiseKind::Gaussian => "gaussian",
                    NoiseKind::Poisson => "poisson",
                };
                s.push_str(&format!("{p}.noise.kind={kind}\n"));
                s.push_str(&format!("{p}.noise.strength={}\n", noise.strength));
                s.push_str(&format!("{p}.noise.seed={}\n", noise.seed));
            }
        }
        s
    }

    /// Parses the sidecar format written by [`DegradationRecipe::to_text`].
    pub fn from_text(text: &str) -> Result<Self> {
        let mut map = std::collections::BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, val) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("recipe line {}: missing '='", lineno + 1))
            })?;
            map.insert(k.trim().to_string(), val.trim().to_string());
        }
        let get = |k: &str| map.get(k).cloned();
        let parse_f64 = |k: &str, v: &str| {
            v.parse::<f64>()
                .map_err(|_| Error::Config(format!("recipe key {k}: bad float '{v}'")))
        };

        let seed = get("seed")
            .ok_or_else(|| Error::Config("recipe missing seed".into()))?
            .parse::<u64>()
            .map_err(|_| Error::Config("recipe seed: bad integer".into()))?;
        let final_scale = get("final_scale")
            .ok_or_else(|| Error::Config("recipe missing final_scale".into()))?
            .parse::<u32>()
            .map_err(|_| Error::Config("recipe final_scale: bad integer".into()))?;

        let mut stages: [StageRecipe; 2] = [StageRecipe::default(), StageRecipe::default()];
        for (i, stage) in stages.iter_mut().enumerate() {
            let p = format!("stage{}", i + 1);
            if let Some(kind) = get(&format!("{p}.blur.kind")) {
                let kind = match kind.as_str() {
                    "isotropic" => BlurKind::Isotropic,
                    "anisotropic" => BlurKind::Anisotropic,
                    other => {
                        return Err(Error::Config(format!("recipe blur kind '{other}'")))
                    }
                };
                let sig = |axis: &str| -> Result<f64> {
                    let k = format!("{p}.blur.sigma_{axis}");
                    let v = get(&k).ok_or_else(|| Error::Config(format!("missing {k}")))?;
                    parse_f64(&k, &v)
                };
                stage.blur = Some(BlurStep {
                    kind,
                    sigmas: [sig("z")?, sig("y")?, sig("x")?],
                });
            }
            if let Some(v) = get(&format!("{p}.resize.scale")) {
                stage.resize = Some(parse_f64("resize.scale", &v)?);
            }
            if let Some(kind) = get(&format!("{p}.noise.kind")) {
                let kind = match kind.as_str() {
                    "gaussian" => NoiseKind::Gaussian,
                    "poisson" => NoiseKind::Poisson,
                    other => {
                        return Err(Error::Config(format!("recipe noise kind '{other}'")))
                    }
                };
                let strength_key = format!("{p}.noise.strength");
                let strength = parse_f64(
                    &strength_key,
                    &get(&strength_key)
                        .ok_or_else(|| Error::Config(format!("missing {strength_key}")))?,
                )?;
                let seed_key = format!("{p}.noise.seed");
                let seed = get(&seed_key)
                    .ok_or_else(|| Error::Config(format!("missing {seed_key}")))?
                    .parse::<u64>()
                    .map_err(|_| Error::Config(format!("{seed_key}: bad integer")))?;
                stage.noise = Some(NoiseStep {
                    kind,
                    strength,
                    seed,
                });
            }
        }
        Ok(DegradationRecipe {
            seed,
            final_scale,
            stages,
        })
    }
}
