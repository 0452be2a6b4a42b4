//! Pinhole back-projection of depth pixels into world space, and its inverse.

use crate::error::{Error, Result};
use crate::model::{FeatureTable, Point3, PointCloud, RgbdFrame, NO_LABEL};

/// Camera points with `z` at or below this are treated as behind the camera.
pub const MIN_CAMERA_DEPTH: f64 = 1e-9;

/// Dense per-pixel features, row-major `height × width × dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(width: usize, height: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 || values.len() != width * height * dim {
            return Err(Error::invalid(format!(
                "feature map of {} values does not match {width}x{height}x{dim}",
                values.len()
            )));
        }
        Ok(Self {
            width,
            height,
            dim,
            values,
        })
    }

    pub fn at(&self, u: usize, v: usize) -> &[f64] {
        let start = (v * self.width + u) * self.dim;
        &self.values[start..start + self.dim]
    }
}

/// Pixel a back-projected point came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelSource {
    pub frame_id: u32,
    pub u: u32,
    pub v: u32,
}

/// Points lifted from image pixels, each carrying that pixel's feature vector.
///
/// Labels are present when the source frame had a label image; unlabeled
/// pixels carry [`NO_LABEL`].
#[derive(Clone, Debug, PartialEq)]
pub struct BackprojectedCloud {
    pub cloud: PointCloud,
    pub sources: Vec<PixelSource>,
}

impl BackprojectedCloud {
    pub fn len(&self) -> usize {
        self.cloud.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cloud.is_empty()
    }

    /// Concatenates clouds in order. All inputs must share feature dimension.
    pub fn concat(parts: &[BackprojectedCloud]) -> Result<BackprojectedCloud> {
        let dim = parts
            .iter()
            .filter_map(|p| p.cloud.features().map(FeatureTable::dim))
            .next()
            .unwrap_or(1);
        let labeled = parts.iter().any(|p| p.cloud.labels().is_some());
        let total: usize = parts.iter().map(BackprojectedCloud::len).sum();
        let mut points = Vec::with_capacity(total);
        let mut labels = Vec::with_capacity(if labeled { total } else { 0 });
        let mut features = FeatureTable::with_capacity(dim, total);
        let mut sources = Vec::with_capacity(total);
        for part in parts {
            let part_dim = part.cloud.features().map_or(dim, FeatureTable::dim);
            if part_dim != dim {
                return Err(Error::invalid("feature dimensions differ between clouds"));
            }
            points.extend_from_slice(part.cloud.points());
            if labeled {
                match part.cloud.labels() {
                    Some(l) => labels.extend_from_slice(l),
                    None => labels.extend(std::iter::repeat(NO_LABEL).take(part.len())),
                }
            }
            if let Some(f) = part.cloud.features() {
                for i in 0..f.len() {
                    features.push(f.row(i));
                }
            }
            sources.extend_from_slice(&part.sources);
        }
        let cloud = PointCloud::new(points, labeled.then_some(labels), Some(features))?;
        Ok(BackprojectedCloud { cloud, sources })
    }
}

/// Lifts every pixel with positive depth to world space, in row-major order.
pub fn backproject_frame(frame: &RgbdFrame, features: &FeatureMap) -> Result<BackprojectedCloud> {
    let k = &frame.intrinsics;
    if features.width != k.width || features.height != k.height {
        return Err(Error::invalid(format!(
            "feature map {}x{} does not match frame {}x{}",
            features.width, features.height, k.width, k.height
        )));
    }
    let valid = frame.depth.iter().filter(|&&z| z > 0.0).count();
    let mut points = Vec::with_capacity(valid);
    let mut table = FeatureTable::with_capacity(features.dim, valid);
    let mut sources = Vec::with_capacity(valid);
    let mut labels = frame.labels.as_ref().map(|_| Vec::with_capacity(valid));
    for v in 0..k.height {
        for u in 0..k.width {
            let z = frame.depth_at(u, v);
            if z <= 0.0 {
                continue;
            }
            let camera = Point3::new((u as f64 - k.cx) * z / k.fx, (v as f64 - k.cy) * z / k.fy, z);
            points.push(frame.pose.camera_to_world(&camera));
            table.push(features.at(u, v));
            sources.push(PixelSource {
                frame_id: frame.frame_id,
                u: u as u32,
                v: v as u32,
            });
            if let (Some(out), Some(src)) = (labels.as_mut(), frame.labels.as_ref()) {
                out.push(src[v * k.width + u]);
            }
        }
    }
    Ok(BackprojectedCloud {
        cloud: PointCloud::new(points, labels, Some(table))?,
        sources,
    })
}

/// Continuous pixel coordinates and camera depth of a projected point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelProjection {
    pub u: f64,
    pub v: f64,
    pub z: f64,
}

impl PixelProjection {
    /// Nearest integer pixel if it lies inside the image.
    pub fn pixel(&self, width: usize, height: usize) -> Option<(usize, usize)> {
        let (u, v) = (self.u.round(), self.v.round());
        (u >= 0.0 && v >= 0.0 && u < width as f64 && v < height as f64)
            .then_some((u as usize, v as usize))
    }
}

/// Projects a world point into `frame`; `None` when it is behind the camera.
pub fn project_point(p_world: &Point3, frame: &RgbdFrame) -> Option<PixelProjection> {
    let k = &frame.intrinsics;
    let p = frame.pose.world_to_camera(p_world);
    if p.z <= MIN_CAMERA_DEPTH {
        return None;
    }
    Some(PixelProjection {
        u: k.fx * p.x / p.z + k.cx,
        v: k.fy * p.y / p.z + k.cy,
        z: p.z,
    })
}
