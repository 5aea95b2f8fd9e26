//! Point clouds, depth views and the multi-view union pipeline.

mod camera;
mod dataset;
mod io;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use camera::{
    depth_to_cloud, pixel_footprint, project_cloud, union_views, DepthImage, Intrinsics, Pose,
    ViewSet,
};
pub use dataset::{read_dataset, write_dataset, Dataset, Sample, DATASET_MAGIC};
pub use io::{read_cloud, write_cloud, CloudFormat, PLY_HEADER_TEMPLATE};

pub type Point = [f64; 3];

/// Where a cloud came from in the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Source {
    GroundTruth,
    ViewConverted,
    UnionInput,
    Intermediate,
    Output,
    #[default]
    Unknown,
}

/// Ordered list of 3D points in meters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    points: Vec<Point>,
    pub source: Source,
}

impl PointCloud {
    pub fn new(points: Vec<Point>, source: Source) -> Result<Self> {
        if points.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("point cloud"));
        }
        Ok(Self { points, source })
    }

    pub(crate) fn from_points_unchecked(points: Vec<Point>, source: Source) -> Self {
        Self { points, source }
    }

    pub fn empty(source: Source) -> Self {
        Self {
            points: Vec::new(),
            source,
        }
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn with_source(mut self, source: Source) -> Self {
        self.source = source;
        self
    }

    pub fn centroid(&self) -> Option<Point> {
        if self.is_empty() {
            return None;
        }
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        let n = self.len() as f64;
        Some([c[0] / n, c[1] / n, c[2] / n])
    }

    /// Flattened `[1, n, 3]` tensor.
    pub fn to_tensor(&self) -> Result<Tensor> {
        if self.is_empty() {
            return Err(Error::EmptyInput("point cloud to tensor"));
        }
        Tensor::new(vec![1, self.len(), 3], self.points.iter().flatten().copied().collect())
    }

    /// Stacks equally sized clouds into a `[B, n, 3]` tensor.
    pub fn batch_tensor(clouds: &[&PointCloud]) -> Result<Tensor> {
        let first = clouds.first().ok_or(Error::EmptyInput("batch of clouds"))?;
        let n = first.len();
        if n == 0 {
            return Err(Error::EmptyInput("batch of clouds"));
        }
        let mut data = Vec::with_capacity(clouds.len() * n * 3);
        for c in clouds {
            if c.len() != n {
                return Err(Error::dim("batch_tensor", &[n, 3], &[c.len(), 3]));
            }
            data.extend(c.points.iter().flatten());
        }
        Tensor::new(vec![clouds.len(), n, 3], data)
    }

    /// Splits a `[B, n, 3]` tensor back into clouds.
    pub fn from_batch_tensor(t: &Tensor, source: Source) -> Result<Vec<PointCloud>> {
        let s = t.shape();
        if s.len() != 3 || s[2] != 3 {
            return Err(Error::dim("from_batch_tensor", s, &[0, 0, 3]));
        }
        Ok(t.data()
            .chunks_exact(s[1] * 3)
            .map(|chunk| {
                let pts = chunk.chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect();
                PointCloud::from_points_unchecked(pts, source)
            })
            .collect())
    }

    /// Applies `p -> p + t` to every point.
    pub fn translated(&self, t: Point) -> PointCloud {
        let pts = self
            .points
            .iter()
            .map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]])
            .collect();
        PointCloud::from_points_unchecked(pts, self.source)
    }

    pub fn extend(&mut self, other: &PointCloud) {
        self.points.extend_from_slice(&other.points);
    }
}

/// Exactly `n` points: a uniform subsample without replacement when the cloud
/// is large enough, otherwise a shuffled copy padded by sampling with replacement.
pub fn resample(pc: &PointCloud, n: usize, seed: u64) -> Result<PointCloud> {
    if pc.is_empty() {
        return Err(Error::EmptyInput("resample"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = pc.len();
    let indices: Vec<usize> = if len >= n {
        rand::seq::index::sample(&mut rng, len, n).into_vec()
    } else {
        let mut idx: Vec<usize> = (0..len).collect();
        idx.shuffle(&mut rng);
        idx.extend((len..n).map(|_| rng.random_range(0..len)));
        idx
    };
    let pts = indices.into_iter().map(|i| pc.points[i]).collect();
    Ok(PointCloud::from_points_unchecked(pts, pc.source))
}

/// Parameters that map a normalized cloud back to its original frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub centroid: Point,
    pub scale: f64,
}

impl Normalization {
    pub const IDENTITY: Normalization = Normalization {
        centroid: [0.0; 3],
        scale: 1.0,
    };

    pub fn apply(&self, pc: &PointCloud) -> PointCloud {
        let c = self.centroid;
        let pts = pc
            .points
            .iter()
            .map(|p| {
                [
                    (p[0] - c[0]) / self.scale,
                    (p[1] - c[1]) / self.scale,
                    (p[2] - c[2]) / self.scale,
                ]
            })
            .collect();
        PointCloud::from_points_unchecked(pts, pc.source)
    }

    pub fn invert(&self, pc: &PointCloud) -> PointCloud {
        let c = self.centroid;
        let pts = pc
            .points
            .iter()
            .map(|p| {
                [
                    p[0] * self.scale + c[0],
                    p[1] * self.scale + c[1],
                    p[2] * self.scale + c[2],
                ]
            })
            .collect();
        PointCloud::from_points_unchecked(pts, pc.source)
    }
}

/// Centers the cloud on its centroid and scales it into the unit ball.
/// A cloud with zero extent keeps scale 1.
pub fn normalize(pc: &PointCloud) -> Result<(PointCloud, Normalization)> {
    let centroid = pc.centroid().ok_or(Error::EmptyInput("normalize"))?;
    let radius = pc
        .points
        .iter()
        .map(|p| {
            let d = [p[0] - centroid[0], p[1] - centroid[1], p[2] - centroid[2]];
            (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
        })
        .fold(0.0, f64::max);
    let scale = if radius > 0.0 { radius } else { 1.0 };
    let params = Normalization { centroid, scale };
    Ok((params.apply(pc), params))
}

pub fn denormalize(pc: &PointCloud, params: &Normalization) -> PointCloud {
    params.invert(pc)
}

pub(crate) fn dist(a: &Point, b: &Point) -> f64 {
    dist2(a, b).sqrt()
}

pub(crate) fn dist2(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}
