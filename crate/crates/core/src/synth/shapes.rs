//! Parametric objects built from axis-aligned cuboids, and uniform surface sampling.
//!
//! Object frame: z up, the object rests on the ground plane `z = 0`. The
//! world pose is a yaw about z followed by a horizontal translation.

use std::fmt;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pointcloud::{Point, PointCloud, Source};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Category {
    Box,
    LShape,
    ChairLike,
    DeskLike,
    CarLike,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::Box,
        Category::LShape,
        Category::ChairLike,
        Category::DeskLike,
        Category::CarLike,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Box => "box",
            Category::LShape => "l_shape",
            Category::ChairLike => "chair_like",
            Category::DeskLike => "desk_like",
            Category::CarLike => "car_like",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        Category::ALL
            .into_iter()
            .find(|c| c.name() == key)
            .ok_or_else(|| {
                Error::usage(format!(
                    "unknown category {s:?}, expected one of box, l_shape, chair_like, desk_like, car_like"
                ))
            })
    }
}

/// Axis-aligned box in the object frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cuboid {
    pub center: Point,
    pub half: Point,
}

impl Cuboid {
    /// Box spanning `[x0,x1] x [y0,y1] x [z0,z1]`.
    pub fn span(x: (f64, f64), y: (f64, f64), z: (f64, f64)) -> Self {
        Self {
            center: [(x.0 + x.1) / 2.0, (y.0 + y.1) / 2.0, (z.0 + z.1) / 2.0],
            half: [(x.1 - x.0) / 2.0, (y.1 - y.0) / 2.0, (z.1 - z.0) / 2.0],
        }
    }

    fn contains(&self, p: &Point) -> bool {
        (0..3).all(|k| (p[k] - self.center[k]).abs() < self.half[k])
    }

    fn signed_distance(&self, p: &Point) -> f64 {
        let q: Vec<f64> = (0..3).map(|k| (p[k] - self.center[k]).abs() - self.half[k]).collect();
        let outside = q.iter().map(|v| v.max(0.0).powi(2)).sum::<f64>().sqrt();
        let inside = q[0].max(q[1]).max(q[2]).min(0.0);
        outside + inside
    }

    fn face_area(&self, axis: usize) -> f64 {
        let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
        4.0 * self.half[a] * self.half[b]
    }
}

/// A face of one part: `axis` is the normal axis, `sign` its direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Face {
    pub part: usize,
    pub axis: usize,
    pub sign: i8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectSpec {
    pub category: Category,
    pub parts: Vec<Cuboid>,
    /// Rotation about the vertical axis, radians.
    pub yaw: f64,
    /// Horizontal offset of the object frame in the world.
    pub translation: [f64; 2],
    /// Skip faces whose outward normal points down. Elevated cameras never see them.
    pub skip_downward: bool,
}

fn pick(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

impl ObjectSpec {
    /// A `side`-meter cube resting on the ground at the origin, no yaw.
    pub fn cube(side: f64) -> Self {
        let h = side / 2.0;
        Self {
            category: Category::Box,
            parts: vec![Cuboid::span((-h, h), (-h, h), (0.0, side))],
            yaw: 0.0,
            translation: [0.0, 0.0],
            skip_downward: true,
        }
    }

    /// Random instance of `category` with random yaw and a small random offset.
    pub fn random(category: Category, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = &mut rng;
        let parts = match category {
            Category::Box => {
                let (x, y, z) = (pick(r, 0.3, 0.8), pick(r, 0.3, 0.8), pick(r, 0.3, 0.8));
                vec![Cuboid::span((-x / 2.0, x / 2.0), (-y / 2.0, y / 2.0), (0.0, z))]
            }
            Category::LShape => {
                let (a, b) = (pick(r, 0.6, 0.9), pick(r, 0.5, 0.8));
                let t = pick(r, 0.2, 0.3);
                let h = pick(r, 0.25, 0.5);
                vec![
                    Cuboid::span((-a / 2.0, a / 2.0), (-b / 2.0, -b / 2.0 + t), (0.0, h)),
                    Cuboid::span((-a / 2.0, -a / 2.0 + t), (-b / 2.0 + t, b / 2.0), (0.0, h)),
                ]
            }
            Category::ChairLike => {
                let (w, d) = (pick(r, 0.4, 0.55), pick(r, 0.4, 0.55));
                let seat = pick(r, 0.4, 0.5);
                let t = pick(r, 0.04, 0.07);
                let leg = pick(r, 0.04, 0.06);
                let back = pick(r, 0.35, 0.5);
                let mut parts = legs(w, d, leg, seat - t);
                parts.push(Cuboid::span((-w / 2.0, w / 2.0), (-d / 2.0, d / 2.0), (seat - t, seat)));
                parts.push(Cuboid::span((-w / 2.0, w / 2.0), (d / 2.0 - t, d / 2.0), (seat, seat + back)));
                parts
            }
            Category::DeskLike => {
                let (w, d) = (pick(r, 0.8, 1.1), pick(r, 0.5, 0.7));
                let height = pick(r, 0.65, 0.75);
                let t = pick(r, 0.03, 0.05);
                let leg = pick(r, 0.04, 0.06);
                let mut parts = legs(w, d, leg, height - t);
                parts.push(Cuboid::span((-w / 2.0, w / 2.0), (-d / 2.0, d / 2.0), (height - t, height)));
                parts
            }
            Category::CarLike => {
                let (l, w) = (pick(r, 0.9, 1.2), pick(r, 0.4, 0.5));
                let clearance = pick(r, 0.06, 0.1);
                let body = pick(r, 0.2, 0.28);
                let cabin_l = l * pick(r, 0.45, 0.6);
                let cabin_h = pick(r, 0.15, 0.22);
                let wheel = clearance + 0.04;
                let wx = l / 2.0 - 0.15;
                let mut parts = vec![
                    Cuboid::span((-l / 2.0, l / 2.0), (-w / 2.0, w / 2.0), (clearance, clearance + body)),
                    Cuboid::span(
                        (-cabin_l / 2.0 - 0.05, cabin_l / 2.0 - 0.05),
                        (-w / 2.0 + 0.03, w / 2.0 - 0.03),
                        (clearance + body, clearance + body + cabin_h),
                    ),
                ];
                for sx in [-1.0, 1.0] {
                    for sy in [-1.0, 1.0] {
                        let cx = sx * wx;
                        let y_in = sy * (w / 2.0 - 0.02);
                        let y_out = sy * (w / 2.0 + 0.03);
                        parts.push(Cuboid::span(
                            (cx - 0.08, cx + 0.08),
                            (y_in.min(y_out), y_in.max(y_out)),
                            (0.0, wheel),
                        ));
                    }
                }
                parts
            }
        };
        let yaw = pick(r, 0.0, std::f64::consts::TAU);
        let translation = [pick(r, -0.1, 0.1), pick(r, -0.1, 0.1)];
        Self {
            category,
            parts,
            yaw,
            translation,
            skip_downward: true,
        }
    }

    /// Rejects non-positive dimensions and objects reaching beyond `arena_half`.
    pub fn validate(&self, arena_half: f64) -> Result<()> {
        if self.parts.is_empty() {
            return Err(Error::usage("object has no parts"));
        }
        for p in &self.parts {
            if p.half.iter().any(|h| !(*h > 0.0 && h.is_finite())) || p.center.iter().any(|c| !c.is_finite()) {
                return Err(Error::usage(format!("invalid cuboid {p:?}")));
            }
        }
        let reach = self
            .parts
            .iter()
            .map(|p| (p.center[0].abs() + p.half[0]).hypot(p.center[1].abs() + p.half[1]))
            .fold(0.0, f64::max);
        let offset = self.translation[0].hypot(self.translation[1]);
        if reach + offset >= arena_half {
            return Err(Error::usage(format!(
                "object reaches {:.3} m from the center, beyond the {arena_half} m arena",
                reach + offset
            )));
        }
        Ok(())
    }

    pub fn to_world(&self, p: &Point) -> Point {
        let (s, c) = self.yaw.sin_cos();
        [
            c * p[0] - s * p[1] + self.translation[0],
            s * p[0] + c * p[1] + self.translation[1],
            p[2],
        ]
    }

    pub fn to_object(&self, p: &Point) -> Point {
        let (s, c) = self.yaw.sin_cos();
        let x = p[0] - self.translation[0];
        let y = p[1] - self.translation[1];
        [c * x + s * y, -s * x + c * y, p[2]]
    }

    /// Signed distance from a world point to the union of the parts.
    pub fn signed_distance(&self, p: &Point) -> f64 {
        let q = self.to_object(p);
        self.parts
            .iter()
            .map(|c| c.signed_distance(&q))
            .fold(f64::INFINITY, f64::min)
    }

    /// Faces eligible for sampling, with their areas.
    pub fn faces(&self) -> Vec<(Face, f64)> {
        let mut out = Vec::new();
        for (i, part) in self.parts.iter().enumerate() {
            for axis in 0..3 {
                for sign in [-1i8, 1] {
                    if self.skip_downward && axis == 2 && sign < 0 {
                        continue;
                    }
                    out.push((Face { part: i, axis, sign }, part.face_area(axis)));
                }
            }
        }
        out
    }

    /// Total area of the exposed surface, estimated from the face areas (overlaps counted).
    pub fn face_area_total(&self) -> f64 {
        self.faces().iter().map(|f| f.1).sum()
    }

    fn exposed(&self, face: &Face, q: &Point) -> bool {
        // Step off the face along its outward normal; if that lands inside any
        // part, the point is interior to the union or on a contact patch.
        const STEP: f64 = 1e-7;
        let mut probe = *q;
        probe[face.axis] += STEP * face.sign as f64;
        !self.parts.iter().any(|c| c.contains(&probe))
    }

    /// `count` points uniformly distributed over the exposed union surface, in
    /// world coordinates, each tagged with the face it came from.
    pub fn sample_surface_labeled(&self, count: usize, seed: u64) -> Result<Vec<(Point, Face)>> {
        let faces = self.faces();
        let weights = WeightedIndex::new(faces.iter().map(|f| f.1))
            .map_err(|e| Error::usage(format!("object has no sampleable surface: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(count);
        let mut attempts = 0usize;
        while out.len() < count {
            attempts += 1;
            if attempts > 100 * count + 1000 {
                return Err(Error::usage("object surface is almost entirely hidden inside other parts"));
            }
            let face = faces[weights.sample(&mut rng)].0;
            let part = &self.parts[face.part];
            let mut q = part.center;
            for k in 0..3 {
                q[k] += if k == face.axis {
                    face.sign as f64 * part.half[k]
                } else {
                    rng.random_range(-part.half[k]..part.half[k])
                };
            }
            if self.exposed(&face, &q) {
                out.push((self.to_world(&q), face));
            }
        }
        Ok(out)
    }

    pub fn sample_surface(&self, count: usize, seed: u64) -> Result<PointCloud> {
        let pts = self.sample_surface_labeled(count, seed)?.into_iter().map(|(p, _)| p).collect();
        PointCloud::new(pts, Source::GroundTruth)
    }
}

fn legs(w: f64, d: f64, leg: f64, height: f64) -> Vec<Cuboid> {
    let mut out = Vec::new();
    for sx in [-1.0, 1.0] {
        for sy in [-1.0, 1.0] {
            let x = sx * (w / 2.0 - leg / 2.0);
            let y = sy * (d / 2.0 - leg / 2.0);
            out.push(Cuboid::span(
                (x - leg / 2.0, x + leg / 2.0),
                (y - leg / 2.0, y + leg / 2.0),
                (0.0, height),
            ));
        }
    }
    out
}

/// Ground-truth cloud: `density` points per square meter on the exposed
/// surface, then uniformly resampled to `m` points.
pub fn sample_object(spec: &ObjectSpec, density: f64, m: usize, seed: u64) -> Result<PointCloud> {
    let dense = sample_dense(spec, density, seed)?;
    crate::pointcloud::resample(&dense, m, seed ^ 0x5eed)
}

/// Dense surface sample at `density` points per square meter.
pub fn sample_dense(spec: &ObjectSpec, density: f64, seed: u64) -> Result<PointCloud> {
    if !(density > 0.0 && density.is_finite()) {
        return Err(Error::usage(format!("surface density must be positive, got {density}")));
    }
    spec.validate(f64::INFINITY)?;
    let count = (spec.face_area_total() * density).ceil().max(1.0) as usize;
    spec.sample_surface(count, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_box_faces_are_area_proportional() {
        let mut spec = ObjectSpec::cube(1.0);
        for skip in [false, true] {
            spec.skip_downward = skip;
            let pts = spec.sample_surface_labeled(4096, 1).unwrap();
            let faces = if skip { 5 } else { 6 };
            let mut counts = vec![0usize; 6];
            for (_, f) in &pts {
                counts[f.axis * 2 + (f.sign > 0) as usize] += 1;
            }
            let used: Vec<_> = counts.iter().filter(|c| **c > 0).collect();
            assert_eq!(used.len(), faces);
            for c in used {
                let frac = *c as f64 / 4096.0;
                assert!((0.1..=0.25).contains(&frac), "face fraction {frac}");
            }
            assert_eq!(skip, counts[4] == 0);
        }
    }

    #[test]
    fn samples_lie_on_the_surface() {
        for (i, cat) in Category::ALL.into_iter().enumerate() {
            let spec = ObjectSpec::random(cat, 40 + i as u64);
            spec.validate(1.5).unwrap();
            let pc = spec.sample_surface(3000, 2).unwrap();
            for p in pc.points() {
                assert!(spec.signed_distance(p).abs() < 1e-9, "{cat}: {}", spec.signed_distance(p));
            }
        }
    }

    #[test]
    fn exposed_surface_excludes_contact_patches() {
        // Two boxes stacked: the shared patch at z = 1 must not be sampled.
        let spec = ObjectSpec {
            category: Category::Box,
            parts: vec![
                Cuboid::span((-1.0, 1.0), (-1.0, 1.0), (0.0, 1.0)),
                Cuboid::span((-0.5, 0.5), (-0.5, 0.5), (1.0, 2.0)),
            ],
            yaw: 0.3,
            translation: [0.0, 0.0],
            skip_downward: false,
        };
        for (p, _) in spec.sample_surface_labeled(5000, 3).unwrap() {
            let q = spec.to_object(&p);
            let on_patch = (q[2] - 1.0).abs() < 1e-12 && q[0].abs() < 0.5 && q[1].abs() < 0.5;
            assert!(!on_patch, "{q:?}");
        }
    }

    #[test]
    fn deterministic_and_validated() {
        let a = ObjectSpec::random(Category::ChairLike, 5);
        assert_eq!(a, ObjectSpec::random(Category::ChairLike, 5));
        assert_eq!(
            sample_object(&a, 2000.0, 256, 9).unwrap(),
            sample_object(&a, 2000.0, 256, 9).unwrap()
        );
        assert!(sample_object(&a, 0.0, 256, 9).is_err());
        let mut bad = ObjectSpec::cube(1.0);
        bad.parts[0].half[1] = 0.0;
        assert!(bad.validate(1.5).is_err());
        assert!(ObjectSpec::cube(3.0).validate(1.5).is_err());
        assert_eq!("Chair-Like".parse::<Category>().unwrap(), Category::ChairLike);
        assert!("robot_arm".parse::<Category>().is_err());
    }
}
