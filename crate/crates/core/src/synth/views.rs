//! Camera rig, depth rendering and radar-style corruption of depth views.

use nalgebra::{Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::pointcloud::{project_cloud, DepthImage, Intrinsics, PointCloud, Pose, ViewSet};

/// `k` cameras spaced evenly on a horizontal circle, all aimed at one point
/// above the arena center. With `k = 4` they sit at the midpoints of the four
/// edges of a square of half-size `arena_half`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraRig {
    pub k: usize,
    pub width: usize,
    pub height: usize,
    /// Horizontal field of view in degrees.
    pub fov_deg: f64,
    pub arena_half: f64,
    /// Camera height above the ground plane.
    pub elevation: f64,
    /// Height of the aim point above the arena center.
    pub target_height: f64,
}

impl Default for CameraRig {
    fn default() -> Self {
        Self {
            k: 4,
            width: 128,
            height: 128,
            fov_deg: 60.0,
            arena_half: 1.5,
            elevation: 0.87,
            target_height: 0.35,
        }
    }
}

impl CameraRig {
    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics::from_fov(self.width, self.height, self.fov_deg)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.k >= 1
            && self.width > 0
            && self.height > 0
            && self.fov_deg > 0.0
            && self.fov_deg < 180.0
            && self.arena_half > 0.0
            && self.elevation.is_finite()
            && self.target_height.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::usage(format!("invalid camera rig {self:?}")))
        }
    }

    pub fn poses(&self) -> Result<Vec<Pose>> {
        self.validate()?;
        let target = Vector3::new(0.0, 0.0, self.target_height);
        (0..self.k)
            .map(|i| {
                let a = std::f64::consts::TAU * i as f64 / self.k as f64;
                let eye = Vector3::new(self.arena_half * a.cos(), self.arena_half * a.sin(), self.elevation);
                Pose::look_at(eye, target, Vector3::z())
            })
            .collect()
    }
}

/// Z-buffered depth image of `pc` from every camera of the rig.
pub fn render_views(pc: &PointCloud, rig: &CameraRig) -> Result<ViewSet> {
    if pc.is_empty() {
        return Err(Error::EmptyInput("render_views"));
    }
    let intr = rig.intrinsics();
    let views = rig
        .poses()?
        .into_iter()
        .map(|pose| project_cloud(pc, intr, pose, rig.width, rig.height))
        .collect();
    ViewSet::new(views)
}

/// Imperfections applied independently to each view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorruptionSpec {
    /// Probability that a valid pixel loses its return.
    pub dropout_rate: f64,
    /// Spurious returns added, as a fraction of the valid pixels left after dropout.
    pub ghost_rate: f64,
    /// Standard deviation of per-pixel depth noise, meters.
    pub jitter_sigma: f64,
    /// Standard deviation of the per-view rotation error, degrees.
    pub orientation_sigma_deg: f64,
    /// Amplitude of a smooth low-frequency depth deformation, meters.
    pub warp_amplitude: f64,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        Self {
            dropout_rate: 0.2,
            ghost_rate: 0.05,
            jitter_sigma: 0.005,
            orientation_sigma_deg: 2.0,
            warp_amplitude: 0.03,
        }
    }
}

impl CorruptionSpec {
    pub const NONE: CorruptionSpec = CorruptionSpec {
        dropout_rate: 0.0,
        ghost_rate: 0.0,
        jitter_sigma: 0.0,
        orientation_sigma_deg: 0.0,
        warp_amplitude: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        let rate = |r: f64| (0.0..=1.0).contains(&r);
        let sigma = |s: f64| s >= 0.0 && s.is_finite();
        if rate(self.dropout_rate)
            && rate(self.ghost_rate)
            && sigma(self.jitter_sigma)
            && sigma(self.orientation_sigma_deg)
            && sigma(self.warp_amplitude)
        {
            Ok(())
        } else {
            Err(Error::usage(format!(
                "corruption rates must lie in [0, 1] and sigmas be >= 0: {self:?}"
            )))
        }
    }

    /// `key=value` lines.
    pub fn to_kv(&self) -> String {
        format!(
            "dropout_rate={}\nghost_rate={}\njitter_sigma={}\norientation_sigma_deg={}\nwarp_amplitude={}\n",
            self.dropout_rate, self.ghost_rate, self.jitter_sigma, self.orientation_sigma_deg, self.warp_amplitude
        )
    }

    /// Applies one `key=value` setting; returns false for unknown keys.
    pub(crate) fn set(&mut self, key: &str, value: f64) -> bool {
        match key {
            "dropout_rate" => self.dropout_rate = value,
            "ghost_rate" => self.ghost_rate = value,
            "jitter_sigma" => self.jitter_sigma = value,
            "orientation_sigma_deg" => self.orientation_sigma_deg = value,
            "warp_amplitude" => self.warp_amplitude = value,
            _ => return false,
        }
        true
    }
}

fn corrupt_view(img: &DepthImage, c: &CorruptionSpec, rng: &mut ChaCha8Rng) -> DepthImage {
    let mut out = img.clone();
    let (w, h) = (img.width, img.height);

    if c.dropout_rate > 0.0 {
        for d in out.depth.iter_mut().filter(|d| **d > 0.0) {
            if rng.random_bool(c.dropout_rate) {
                *d = 0.0;
            }
        }
    }

    if c.ghost_rate > 0.0 {
        let valid: Vec<f64> = out.depth.iter().copied().filter(|d| *d > 0.0).collect();
        if let (Some(lo), Some(hi)) = (
            valid.iter().copied().reduce(f64::min),
            valid.iter().copied().reduce(f64::max),
        ) {
            let ghosts = (c.ghost_rate * valid.len() as f64).round() as usize;
            // Multi-path returns appear at ranges similar to the real object, at random pixels.
            let span = (hi - lo).max(0.05);
            for _ in 0..ghosts {
                let idx = rng.random_range(0..w * h);
                out.depth[idx] = rng.random_range(lo..lo + span);
            }
        }
    }

    if c.jitter_sigma > 0.0 {
        let noise = Normal::new(0.0, c.jitter_sigma).expect("sigma validated");
        for d in out.depth.iter_mut().filter(|d| **d > 0.0) {
            *d = (*d + noise.sample(rng)).max(1e-3);
        }
    }

    if c.warp_amplitude > 0.0 {
        let fu = rng.random_range(0.5..1.5);
        let fv = rng.random_range(0.5..1.5);
        let pu = rng.random_range(0.0..std::f64::consts::TAU);
        let pv = rng.random_range(0.0..std::f64::consts::TAU);
        for v in 0..h {
            for u in 0..w {
                let d = &mut out.depth[v * w + u];
                if *d > 0.0 {
                    let su = (std::f64::consts::TAU * fu * u as f64 / w as f64 + pu).sin();
                    let sv = (std::f64::consts::TAU * fv * v as f64 / h as f64 + pv).sin();
                    *d = (*d + c.warp_amplitude * su * sv).max(1e-3);
                }
            }
        }
    }

    if c.orientation_sigma_deg > 0.0 {
        let angle = Normal::new(0.0, c.orientation_sigma_deg.to_radians())
            .expect("sigma validated")
            .sample(rng);
        let axis = loop {
            let a = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let n = a.norm();
            if n > 1e-3 && n <= 1.0 {
                break Unit::new_normalize(a);
            }
        };
        // Error expressed in the camera frame: the believed orientation is off by `delta`.
        let delta = Rotation3::from_axis_angle(&axis, angle);
        out.pose.rotation = img.pose.rotation * delta.matrix();
    }
    out
}

/// Corrupts every view independently. Each view draws from its own random
/// stream, so the result depends only on `seed` and the view index.
pub fn corrupt_views(vs: &ViewSet, c: &CorruptionSpec, seed: u64) -> Result<ViewSet> {
    c.validate()?;
    let views = vs
        .views
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            corrupt_view(img, c, &mut rng)
        })
        .collect();
    Ok(ViewSet { views })
}
