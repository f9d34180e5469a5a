//! Seeded synthetic abdomen-like phantoms.
//!
//! A phantom is a smooth background plus a large body ellipsoid containing a
//! handful of soft-edged ellipsoidal "organs". The same seed produces the
//! same geometry for every phase; only the organ contrast offsets differ per
//! phase, mimicking a registered multiphase acquisition. Values lie in
//! `[0, 1]` as if already windowed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::volume::Volume;

/// Contrast phase of a synthetic acquisition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Noncontrast,
    Arterial,
    PortalVenous,
}

impl Phase {
    /// Organ enhancement scale. Arterial is strictly the largest so that the
    /// arterial phantom mean always exceeds the noncontrast mean.
    fn organ_scale(self) -> f64 {
        match self {
            Phase::Noncontrast => 0.06,
            Phase::Arterial => 0.26,
            Phase::PortalVenous => 0.18,
        }
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "noncontrast" | "nc" => Ok(Phase::Noncontrast),
            "arterial" | "art" => Ok(Phase::Arterial),
            "portal_venous" | "pv" => Ok(Phase::PortalVenous),
            other => Err(Error::InvalidParameter(format!(
                "unknown phase '{other}' (expected nc, art or pv)"
            ))),
        }
    }
}

struct Ellipsoid {
    center: [f64; 3],    // normalized [0,1] coordinates
    semi_axes: [f64; 3], // normalized
    contrast: f64,
}

impl Ellipsoid {
    /// Soft membership in [0, 1]: 1 well inside, 0 well outside, with a
    /// smoothstep falloff across the boundary shell.
    fn weight(&self, p: [f64; 3]) -> f64 {
        let mut q = 0.0;
        for a in 0..3 {
            let t = (p[a] - self.center[a]) / self.semi_axes[a];
            q += t * t;
        }
        let rho = q.sqrt();
        // full inside rho <= 0.85, zero outside rho >= 1.1
        let t = ((1.1 - rho) / 0.25).clamp(0.0, 1.0);
        t * t * (3.0 - 2.0 * t)
    }
}

/// Generates a deterministic synthetic volume. `dims` must be at least 16
/// per axis. Spacing is fixed at 1 mm and the origin at 0.
pub fn make_phantom(seed: u64, dims: [usize; 3], phase: Phase) -> Result<Volume> {
    if dims.iter().any(|&d| d < 16) {
        return Err(Error::InvalidParameter(format!(
            "phantom dims must be >= 16 per axis, got {dims:?}"
        )));
    }

    // All geometry draws happen before any phase-dependent value is used, so
    // every phase of one seed shares identical structures.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let body = Ellipsoid {
        center: [0.5, 0.5, 0.5],
        semi_axes: [
            0.42 + 0.05 * rng.gen::<f64>(),
            0.40 + 0.05 * rng.gen::<f64>(),
            0.44 + 0.05 * rng.gen::<f64>(),
        ],
        contrast: 1.0,
    };

    let n_organs = rng.gen_range(4..=6);
    let mut organs = Vec::with_capacity(n_organs);
    for _ in 0..n_organs {
        let center = [
            0.3 + 0.4 * rng.gen::<f64>(),
            0.3 + 0.4 * rng.gen::<f64>(),
            0.3 + 0.4 * rng.gen::<f64>(),
        ];
        let semi_axes = [
            0.06 + 0.10 * rng.gen::<f64>(),
            0.06 + 0.10 * rng.gen::<f64>(),
            0.06 + 0.10 * rng.gen::<f64>(),
        ];
        let contrast = 0.5 + 0.5 * rng.gen::<f64>();
        organs.push(Ellipsoid {
            center,
            semi_axes,
            contrast,
        });
    }

    // Low-frequency background modulation.
    let mut waves = Vec::with_capacity(3);
    for _ in 0..3 {
        let freq = [
            1.0 + 2.0 * rng.gen::<f64>(),
            1.0 + 2.0 * rng.gen::<f64>(),
            1.0 + 2.0 * rng.gen::<f64>(),
        ];
        let phase_shift = std::f64::consts::TAU * rng.gen::<f64>();
        let amp = 0.015 + 0.015 * rng.gen::<f64>();
        waves.push((freq, phase_shift, amp));
    }

    let organ_scale = phase.organ_scale();
    let [d, h, w] = dims;
    let mut data = Vec::with_capacity(d * h * w);
    for z in 0..d {
        let pz = (z as f64 + 0.5) / d as f64;
        for y in 0..h {
            let py = (y as f64 + 0.5) / h as f64;
            for x in 0..w {
                let px = (x as f64 + 0.5) / w as f64;
                let p = [pz, py, px];

                let body_w = body.weight(p);
                let mut v = 0.04 + body_w * 0.38;
                for (freq, shift, amp) in &waves {
                    let arg = std::f64::consts::TAU
                        * (freq[0] * pz + freq[1] * py + freq[2] * px)
                        + shift;
                    v += body_w * amp * arg.cos();
                }
                for organ in &organs {
                    v += body_w * organ.weight(p) * organ.contrast * organ_scale;
                }
                data.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }

    Volume::new(dims, [1.0; 3], [0.0; 3], data)
}
