//! Pinhole depth views: back-projection, z-buffered projection and view unions.
//!
//! Camera frame: x right, y down, z along the optical axis. A pixel `(u, v)`
//! with depth `d > 0` lies at `((u - cx) d / fx, (v - cy) d / fy, d)`; depth 0
//! means no return.

use nalgebra::{Matrix3, Vector3};

use super::{PointCloud, Source};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    /// Square pixels with the principal point at the image center and the
    /// given horizontal field of view.
    pub fn from_fov(width: usize, height: usize, fov_deg: f64) -> Self {
        let f = (width as f64 / 2.0) / (fov_deg.to_radians() / 2.0).tan();
        Self {
            fx: f,
            fy: f,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite())
            && self.fx > 0.0
            && self.fy > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::usage(format!("invalid intrinsics {self:?}")))
        }
    }
}

/// Rigid camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Camera at `eye` looking at `target`, image "down" roughly opposite to `up`.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::usage("look_at with eye == target"))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::usage("look_at with forward parallel to up"))?;
        let down = forward.cross(&right);
        Ok(Self {
            rotation: Matrix3::from_columns(&[right, down, forward]),
            translation: eye,
        })
    }

    pub fn is_rigid(&self) -> bool {
        let r = &self.rotation;
        (r.transpose() * r - Matrix3::identity()).amax() < 1e-9 && (r.determinant() - 1.0).abs() < 1e-9
    }

    pub fn to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }
}

/// Range image plus the camera that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    /// Row-major, `height * width` values in meters.
    pub depth: Vec<f64>,
    pub intrinsics: Intrinsics,
    pub pose: Pose,
}

impl DepthImage {
    pub fn blank(width: usize, height: usize, intrinsics: Intrinsics, pose: Pose) -> Self {
        Self {
            width,
            height,
            depth: vec![0.0; width * height],
            intrinsics,
            pose,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        if self.depth.len() != self.width * self.height {
            return Err(Error::dim(
                "depth image",
                &[self.height, self.width],
                &[self.depth.len()],
            ));
        }
        if self.depth.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::usage("depth values must be finite and >= 0"));
        }
        if !self.pose.is_rigid() {
            return Err(Error::usage("camera pose rotation is not orthonormal"));
        }
        Ok(())
    }

    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.depth[v * self.width + u]
    }

    pub fn valid_pixels(&self) -> usize {
        self.depth.iter().filter(|d| **d > 0.0).count()
    }
}

/// Depth views of one object from distinct viewpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    pub views: Vec<DepthImage>,
}

impl ViewSet {
    pub fn new(views: Vec<DepthImage>) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::usage("a view set needs at least one view"));
        }
        for (i, a) in views.iter().enumerate() {
            for b in &views[i + 1..] {
                if a.pose == b.pose {
                    return Err(Error::usage("view set poses must be distinct"));
                }
            }
        }
        Ok(Self { views })
    }

    pub fn k(&self) -> usize {
        self.views.len()
    }
}

/// Back-projects every pixel with positive depth into the world frame.
pub fn depth_to_cloud(img: &DepthImage) -> Result<PointCloud> {
    img.validate()?;
    let Intrinsics { fx, fy, cx, cy } = img.intrinsics;
    let mut pts = Vec::with_capacity(img.valid_pixels());
    for v in 0..img.height {
        for u in 0..img.width {
            let d = img.at(u, v);
            if d > 0.0 {
                let cam = Vector3::new((u as f64 - cx) * d / fx, (v as f64 - cy) * d / fy, d);
                let w = img.pose.to_world(&cam);
                pts.push([w.x, w.y, w.z]);
            }
        }
    }
    Ok(PointCloud::from_points_unchecked(pts, Source::ViewConverted))
}

/// Z-buffered pinhole projection. Each point lands on its nearest pixel; the
/// closest point per pixel wins; points behind the camera or outside the
/// image are dropped.
pub fn project_cloud(
    pc: &PointCloud,
    intrinsics: Intrinsics,
    pose: Pose,
    width: usize,
    height: usize,
) -> DepthImage {
    let mut img = DepthImage::blank(width, height, intrinsics, pose);
    let Intrinsics { fx, fy, cx, cy } = intrinsics;
    let rt = pose.rotation.transpose();
    for p in pc.points() {
        let c = rt * (Vector3::new(p[0], p[1], p[2]) - pose.translation);
        if c.z <= 0.0 {
            continue;
        }
        let u = (fx * c.x / c.z + cx).round();
        let v = (fy * c.y / c.z + cy).round();
        if u < 0.0 || v < 0.0 || u >= width as f64 || v >= height as f64 {
            continue;
        }
        let slot = &mut img.depth[v as usize * width + u as usize];
        if *slot == 0.0 || c.z < *slot {
            *slot = c.z;
        }
    }
    img
}

/// Concatenation of the back-projected clouds of every view.
pub fn union_views(vs: &ViewSet) -> Result<PointCloud> {
    let mut out = PointCloud::empty(Source::UnionInput);
    for view in &vs.views {
        out.extend(&depth_to_cloud(view)?);
    }
    if out.is_empty() {
        return Err(Error::EmptyInput("union_views (every view is empty)"));
    }
    Ok(out)
}

/// Largest lateral error of back-projecting a pixel-quantized point at `depth`.
pub fn pixel_footprint(intrinsics: &Intrinsics, depth: f64) -> f64 {
    depth / intrinsics.fx.min(intrinsics.fy)
}
