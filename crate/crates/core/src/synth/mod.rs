//! Synthetic (coarse input, ground truth) pairs.
//!
//! Per sample: draw a parametric object, sample its surface densely, render
//! depth views from a ring of cameras, corrupt the views, back-project and
//! merge them, then resample and normalize. Ground truth is taken from the
//! clean dense surface, so corruption only ever touches the input.

mod shapes;
mod views;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::metrics::nearest_neighbors;
use crate::pointcloud::{
    normalize, pixel_footprint, resample, union_views, write_dataset, Dataset, Normalization, PointCloud, Sample,
    Source, ViewSet,
};

pub use shapes::{sample_dense, sample_object, Category, Cuboid, Face, ObjectSpec};
pub use views::{corrupt_views, render_views, CameraRig, CorruptionSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// Sample `i` uses `categories[i % len]`.
    pub categories: Vec<Category>,
    pub count: usize,
    pub n: usize,
    pub m: usize,
    pub seed: u64,
    /// Surface points per square meter used for rendering.
    pub density: f64,
    pub rig: CameraRig,
    pub corruption: CorruptionSpec,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            categories: vec![Category::Box],
            count: 150,
            n: 256,
            m: 1024,
            seed: 0,
            density: 50_000.0,
            rig: CameraRig::default(),
            corruption: CorruptionSpec::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 || self.n == 0 || self.m == 0 {
            return Err(Error::usage("count, n and m must be positive"));
        }
        if self.categories.is_empty() {
            return Err(Error::usage("at least one category is required"));
        }
        if !(self.density > 0.0 && self.density.is_finite()) {
            return Err(Error::usage(format!("density must be positive, got {}", self.density)));
        }
        self.rig.validate()?;
        self.corruption.validate()
    }

    pub fn to_kv(&self) -> String {
        let cats: Vec<&str> = self.categories.iter().map(|c| c.name()).collect();
        let r = &self.rig;
        let mut s = String::new();
        writeln!(s, "categories={}", cats.join(",")).unwrap();
        for (k, v) in [("count", self.count), ("n", self.n), ("m", self.m)] {
            writeln!(s, "{k}={v}").unwrap();
        }
        writeln!(s, "seed={}", self.seed).unwrap();
        writeln!(s, "density={}", self.density).unwrap();
        writeln!(s, "views={}\nwidth={}\nheight={}", r.k, r.width, r.height).unwrap();
        writeln!(
            s,
            "fov_deg={}\narena_half={}\nelevation={}\ntarget_height={}",
            r.fov_deg, r.arena_half, r.elevation, r.target_height
        )
        .unwrap();
        s.push_str(&self.corruption.to_kv());
        s
    }

    /// Parses `key=value` lines over the defaults. Corruption keys are accepted too.
    pub fn from_kv(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = SynthConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                msg,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            let int = || v.parse::<usize>().map_err(|e| err(format!("{k}: {e}")));
            let float = || v.parse::<f64>().map_err(|e| err(format!("{k}: {e}")));
            match k {
                "categories" | "category" => {
                    cfg.categories = v
                        .split(',')
                        .map(|c| c.parse::<Category>())
                        .collect::<Result<_>>()
                        .map_err(|e| err(e.to_string()))?
                }
                "count" => cfg.count = int()?,
                "n" => cfg.n = int()?,
                "m" => cfg.m = int()?,
                "seed" => cfg.seed = v.parse().map_err(|e| err(format!("seed: {e}")))?,
                "density" => cfg.density = float()?,
                "views" => cfg.rig.k = int()?,
                "width" => cfg.rig.width = int()?,
                "height" => cfg.rig.height = int()?,
                "fov_deg" => cfg.rig.fov_deg = float()?,
                "arena_half" => cfg.rig.arena_half = float()?,
                "elevation" => cfg.rig.elevation = float()?,
                "target_height" => cfg.rig.target_height = float()?,
                _ => {
                    if !cfg.corruption.set(k, float()?) {
                        return Err(err(format!("unknown key {k:?}")));
                    }
                }
            }
        }
        Ok(cfg)
    }
}

/// Parses a corruption-only `key=value` file.
pub fn corruption_from_kv(text: &str, origin: &Path) -> Result<CorruptionSpec> {
    let mut c = CorruptionSpec::default();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parsed = line
            .split_once('=')
            .and_then(|(k, v)| v.trim().parse::<f64>().ok().map(|v| (k.trim(), v)));
        match parsed {
            Some((k, v)) if c.set(k, v) => {}
            _ => {
                return Err(Error::Parse {
                    path: origin.to_path_buf(),
                    line: i + 1,
                    msg: format!("expected <corruption key>=<number>, got {line:?}"),
                })
            }
        }
    }
    c.validate()?;
    Ok(c)
}

/// Independent seed for a named sub-step of sample `index`.
fn sub_seed(seed: u64, index: usize, step: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng.set_word_pos(u128::from(step) * 16);
    rng.next_u64()
}

/// Every intermediate product of one synthesized sample.
#[derive(Debug, Clone)]
pub struct Synthesized {
    pub spec: ObjectSpec,
    /// Clean dense surface in world coordinates.
    pub dense: PointCloud,
    pub views: ViewSet,
    pub corrupted: ViewSet,
    /// Union of the corrupted views in world coordinates.
    pub union: PointCloud,
    /// Maps world coordinates into the sample's normalized frame.
    pub normalization: Normalization,
    pub sample: Sample,
}

pub fn synthesize(cfg: &SynthConfig, index: usize) -> Result<Synthesized> {
    let category = cfg.categories[index % cfg.categories.len()];
    let spec = ObjectSpec::random(category, sub_seed(cfg.seed, index, 0));
    spec.validate(cfg.rig.arena_half)?;
    let dense = sample_dense(&spec, cfg.density, sub_seed(cfg.seed, index, 1))?;
    let views = render_views(&dense, &cfg.rig)?;
    let corrupted = corrupt_views(&views, &cfg.corruption, sub_seed(cfg.seed, index, 2))?;
    let union = union_views(&corrupted)?;
    let input = resample(&union, cfg.n, sub_seed(cfg.seed, index, 3))?;
    let (input, normalization) = normalize(&input)?;
    // The target shares the input's frame: at inference time only the input is known.
    let target = normalization
        .apply(&resample(&dense, cfg.m, sub_seed(cfg.seed, index, 4))?)
        .with_source(Source::GroundTruth);
    Ok(Synthesized {
        spec,
        dense,
        views,
        corrupted,
        union,
        normalization,
        sample: Sample {
            input: input.with_source(Source::UnionInput),
            target,
        },
    })
}

pub fn build_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let samples = (0..cfg.count)
        .into_par_iter()
        .map(|i| synthesize(cfg, i).map(|s| s.sample))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::new(samples))
}

/// Builds the dataset and writes it to `path`, with the generator settings in
/// `<path>.cfg` next to it.
pub fn write_synthetic_dataset(cfg: &SynthConfig, path: &Path) -> Result<Dataset> {
    let ds = build_dataset(cfg)?;
    write_dataset(path, &ds)?;
    let mut cfg_path = path.as_os_str().to_owned();
    cfg_path.push(".cfg");
    fs::write(cfg_path, cfg.to_kv())?;
    Ok(ds)
}

/// Fraction of `reference` points with a point of `cloud` within `eps`.
pub fn coverage(reference: &PointCloud, cloud: &PointCloud, eps: f64) -> f64 {
    if reference.is_empty() || cloud.is_empty() {
        return 0.0;
    }
    let nn = nearest_neighbors(reference.points(), cloud.points());
    nn.iter().filter(|(_, d2)| d2.sqrt() <= eps).count() as f64 / nn.len() as f64
}

/// Twice the lateral size of a pixel at the largest camera-to-point distance.
pub fn quantization_tolerance(rig: &CameraRig, pc: &PointCloud) -> Result<f64> {
    let poses = rig.poses()?;
    let far = pc
        .points()
        .iter()
        .flat_map(|p| {
            poses.iter().map(move |pose| {
                let t = pose.translation;
                ((p[0] - t.x).powi(2) + (p[1] - t.y).powi(2) + (p[2] - t.z).powi(2)).sqrt()
            })
        })
        .fold(0.0, f64::max);
    Ok(2.0 * pixel_footprint(&rig.intrinsics(), far))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::chamfer;

    fn small(categories: Vec<Category>, corruption: CorruptionSpec) -> SynthConfig {
        SynthConfig {
            categories,
            count: 4,
            n: 128,
            m: 256,
            seed: 11,
            density: 20_000.0,
            corruption,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn sizes_and_determinism() {
        let cfg = small(vec![Category::Box, Category::ChairLike], CorruptionSpec::default());
        let a = build_dataset(&cfg).unwrap();
        assert_eq!(a.len(), 4);
        assert!(a.samples.iter().all(|s| s.input.len() == 128 && s.target.len() == 256));
        assert_eq!(a, build_dataset(&cfg).unwrap());
        let other = SynthConfig { seed: 12, ..cfg };
        assert_ne!(a, build_dataset(&other).unwrap());
    }

    #[test]
    fn corruption_never_touches_ground_truth() {
        let clean = small(vec![Category::CarLike], CorruptionSpec::NONE);
        let noisy = small(vec![Category::CarLike], CorruptionSpec::default());
        for i in 0..2 {
            let a = synthesize(&clean, i).unwrap();
            let b = synthesize(&noisy, i).unwrap();
            assert_eq!(a.dense, b.dense);
            assert_ne!(a.union, b.union);
            for p in a.dense.points() {
                assert!(a.spec.signed_distance(p).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn clean_union_covers_ground_truth() {
        for cat in Category::ALL {
            let cfg = small(vec![cat], CorruptionSpec::NONE);
            for i in 0..3 {
                let s = synthesize(&cfg, i).unwrap();
                let gt = resample(&s.dense, 2048, 1).unwrap();
                let eps = quantization_tolerance(&cfg.rig, &gt).unwrap();
                let cov = coverage(&gt, &s.union, eps);
                assert!(cov >= 0.9, "{cat} sample {i}: coverage {cov:.3} at eps {eps:.4}");
            }
        }
    }

    #[test]
    fn corruption_degrades_inputs() {
        // Compared in meters: each sample is normalized by its own input, so
        // normalized distances of different inputs are not on a common scale.
        let clean = small(vec![Category::Box, Category::LShape], CorruptionSpec::NONE);
        let noisy = small(vec![Category::Box, Category::LShape], CorruptionSpec::default());
        let cd = |cfg: &SynthConfig, i: usize| -> f64 {
            let s = synthesize(cfg, i).unwrap();
            let input = s.normalization.invert(&resample(&s.sample.input, cfg.m, 0).unwrap());
            chamfer(&input, &s.normalization.invert(&s.sample.target)).unwrap()
        };
        for i in 0..4 {
            let (a, b) = (cd(&clean, i), cd(&noisy, i));
            assert!(a < b, "sample {i}: clean {a} noisy {b}");
        }
    }

    #[test]
    fn each_view_sees_at_most_three_box_faces() {
        let rig = CameraRig::default();
        for seed in 0..5 {
            let spec = ObjectSpec::random(Category::Box, seed);
            let dense = sample_dense(&spec, 30_000.0, seed).unwrap();
            let part = spec.parts[0];
            for view in &render_views(&dense, &rig).unwrap().views {
                let pts = crate::pointcloud::depth_to_cloud(view).unwrap();
                let mut counts = [0usize; 6];
                for p in pts.points() {
                    let q = spec.to_object(p);
                    let (mut best, mut slot) = (f64::INFINITY, 0);
                    for axis in 0..3 {
                        for (k, sign) in [-1.0, 1.0].into_iter().enumerate() {
                            let d = (q[axis] - part.center[axis] - sign * part.half[axis]).abs();
                            if d < best {
                                (best, slot) = (d, axis * 2 + k);
                            }
                        }
                    }
                    counts[slot] += 1;
                }
                let seen = counts.iter().filter(|c| **c * 50 > pts.len()).count();
                assert!((1..=3).contains(&seen), "seed {seed}: {counts:?}");
            }
        }
    }

    #[test]
    fn opposite_views_of_symmetric_box_agree() {
        let dense = ObjectSpec::cube(0.6).sample_surface(60_000, 2).unwrap();
        let vs = render_views(&dense, &CameraRig::default()).unwrap();
        let depths = |i: usize| -> Vec<f64> { vs.views[i].depth.iter().copied().filter(|d| *d > 0.0).collect() };
        let (a, b) = (depths(0), depths(2));
        let lo = a.iter().chain(&b).copied().fold(f64::INFINITY, f64::min);
        let hi = a.iter().chain(&b).copied().fold(0.0, f64::max);
        let hist = |v: &[f64]| {
            let mut h = [0.0; 20];
            for d in v {
                let k = (((d - lo) / (hi - lo)) * 20.0).min(19.0) as usize;
                h[k] += 1.0 / v.len() as f64;
            }
            h
        };
        let (ha, hb) = (hist(&a), hist(&b));
        let l1: f64 = ha.iter().zip(&hb).map(|(x, y)| (x - y).abs()).sum();
        assert!(l1 < 0.05, "histogram L1 distance {l1}");
    }

    #[test]
    fn kv_round_trips() {
        let mut cfg = small(vec![Category::DeskLike, Category::Box], CorruptionSpec::default());
        cfg.rig.k = 3;
        let back = SynthConfig::from_kv(&cfg.to_kv(), Path::new("s")).unwrap();
        assert_eq!(back, cfg);
        assert!(SynthConfig::from_kv("what=1", Path::new("s")).is_err());
        let c = corruption_from_kv("dropout_rate=0.5\n# note\nghost_rate=0", Path::new("c")).unwrap();
        assert_eq!(c.dropout_rate, 0.5);
        assert_eq!(c.ghost_rate, 0.0);
        assert!(corruption_from_kv("dropout_rate=2", Path::new("c")).is_err());
        assert!(matches!(
            corruption_from_kv("x\n", Path::new("c")),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn empty_views_are_a_data_error() {
        let cfg = small(
            vec![Category::Box],
            CorruptionSpec {
                dropout_rate: 1.0,
                ..CorruptionSpec::NONE
            },
        );
        assert!(matches!(build_dataset(&cfg), Err(Error::EmptyInput(_))));
    }
}
