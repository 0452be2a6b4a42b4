//! Domain types shared by every stage of the pipeline.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// A position in world or camera space, meters.
pub type Point3 = nalgebra::Point3<f64>;

/// Class id used for pixels that carry no ground-truth label.
pub const NO_LABEL: u32 = u32::MAX;

/// Tolerance on `RᵀR − I` accepted when constructing a [`RigidPose`].
pub const ORTHONORMAL_TOLERANCE: f64 = 1e-6;

/// Per-point feature vectors of uniform dimension, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    dim: usize,
    values: Vec<f64>,
}

impl FeatureTable {
    pub fn new(dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("feature dimension must be positive"));
        }
        if values.len() % dim != 0 {
            return Err(Error::invalid(format!(
                "feature buffer of length {} is not a multiple of dimension {dim}",
                values.len()
            )));
        }
        Ok(Self { dim, values })
    }

    pub fn with_capacity(dim: usize, rows: usize) -> Self {
        Self {
            dim,
            values: Vec::with_capacity(dim * rows),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.dim, "feature row dimension mismatch");
        self.values.extend_from_slice(row);
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// An ordered point set with optional per-point labels and features.
///
/// Used both for the scanned cloud and for clouds lifted out of depth images.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
    labels: Option<Vec<u32>>,
    features: Option<FeatureTable>,
}

impl PointCloud {
    pub fn new(
        points: Vec<Point3>,
        labels: Option<Vec<u32>>,
        features: Option<FeatureTable>,
    ) -> Result<Self> {
        if let Some(bad) = points.iter().position(|p| !p.coords.iter().all(|c| c.is_finite())) {
            return Err(Error::invalid(format!("point {bad} has a non-finite coordinate")));
        }
        if let Some(labels) = &labels {
            if labels.len() != points.len() {
                return Err(Error::invalid(format!(
                    "{} labels for {} points",
                    labels.len(),
                    points.len()
                )));
            }
        }
        if let Some(features) = &features {
            if features.len() != points.len() {
                return Err(Error::invalid(format!(
                    "{} feature rows for {} points",
                    features.len(),
                    points.len()
                )));
            }
            if features.values().iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("non-finite feature value"));
            }
        }
        Ok(Self {
            points,
            labels,
            features,
        })
    }

    pub fn from_points(points: Vec<Point3>) -> Result<Self> {
        Self::new(points, None, None)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn features(&self) -> Option<&FeatureTable> {
        self.features.as_ref()
    }

    /// Replaces the label column.
    pub fn with_labels(mut self, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != self.points.len() {
            return Err(Error::invalid(format!(
                "{} labels for {} points",
                labels.len(),
                self.points.len()
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    /// Copies the points at `indices` (with their attributes) into a new cloud.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        let points = indices.iter().map(|&i| self.points[i]).collect();
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        let features = self.features.as_ref().map(|f| {
            let mut out = FeatureTable::with_capacity(f.dim(), indices.len());
            for &i in indices {
                out.push(f.row(i));
            }
            out
        });
        PointCloud {
            points,
            labels,
            features,
        }
    }

    /// Axis-aligned bounds `(min, max)`, or `None` for an empty cloud.
    pub fn bounds(&self) -> Option<(Point3, Point3)> {
        let first = *self.points.first()?;
        Some(self.points.iter().fold((first, first), |(lo, hi), p| {
            (lo.inf(p), hi.sup(p))
        }))
    }
}

/// Pinhole intrinsics in pixel units; pixel centers sit at integer coordinates.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let all_finite = [fx, fy, cx, cy].iter().all(|v| v.is_finite());
        if !all_finite || fx <= 0.0 || fy <= 0.0 {
            return Err(Error::invalid(format!(
                "focal lengths must be finite and positive (fx={fx}, fy={fy})"
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return Err(Error::invalid(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// Camera-to-world rigid transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidPose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl RigidPose {
    /// Validates `rotation` as a proper rotation within [`ORTHONORMAL_TOLERANCE`].
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::invalid("pose contains a non-finite entry"));
        }
        let deviation = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        if deviation > ORTHONORMAL_TOLERANCE {
            return Err(Error::NotOrthonormal { deviation });
        }
        if rotation.determinant() <= 0.0 {
            return Err(Error::invalid("pose rotation has negative determinant"));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn camera_to_world(&self, p: &Point3) -> Point3 {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn world_to_camera(&self, p: &Point3) -> Point3 {
        Point3::from(self.rotation.transpose() * (p.coords - self.translation))
    }

    /// `other ∘ self`: applies `self` first, then `other`.
    pub fn then(&self, other: &RigidPose) -> RigidPose {
        RigidPose {
            rotation: other.rotation * self.rotation,
            translation: other.rotation * self.translation + other.translation,
        }
    }
}

/// An aligned depth + color image with its camera.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbdFrame {
    pub frame_id: u32,
    pub intrinsics: CameraIntrinsics,
    pub pose: RigidPose,
    /// Row-major depth in meters; 0 marks an invalid pixel.
    pub depth: Vec<f64>,
    /// Row-major RGB in [0, 1].
    pub color: Vec<[f64; 3]>,
    /// Optional per-pixel class ids ([`NO_LABEL`] where unlabeled).
    pub labels: Option<Vec<u32>>,
}

impl RgbdFrame {
    pub fn new(
        frame_id: u32,
        intrinsics: CameraIntrinsics,
        pose: RigidPose,
        depth: Vec<f64>,
        color: Vec<[f64; 3]>,
    ) -> Result<Self> {
        let n = intrinsics.pixel_count();
        if depth.len() != n || color.len() != n {
            return Err(Error::invalid(format!(
                "frame {frame_id}: depth has {} and color {} pixels, intrinsics expect {n}",
                depth.len(),
                color.len()
            )));
        }
        if let Some(i) = depth.iter().position(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::invalid(format!(
                "frame {frame_id}: invalid depth {} at pixel {i}",
                depth[i]
            )));
        }
        Ok(Self {
            frame_id,
            intrinsics,
            pose,
            depth,
            color,
            labels: None,
        })
    }

    pub fn with_labels(mut self, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != self.intrinsics.pixel_count() {
            return Err(Error::invalid("label image size does not match frame"));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    pub fn depth_at(&self, u: usize, v: usize) -> f64 {
        self.depth[v * self.intrinsics.width + u]
    }
}

/// A labeled scene cloud together with the RGB-D frames observing it.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneBundle {
    pub cloud: PointCloud,
    pub frames: Vec<RgbdFrame>,
    pub class_count: usize,
}

impl SceneBundle {
    pub fn new(cloud: PointCloud, frames: Vec<RgbdFrame>, class_count: usize) -> Result<Self> {
        let labels = cloud
            .labels()
            .ok_or_else(|| Error::invalid("scene cloud must carry labels"))?;
        if let Some(&max) = labels.iter().max() {
            if max as usize >= class_count {
                return Err(Error::invalid(format!(
                    "label {max} out of range for {class_count} classes"
                )));
            }
        }
        if class_count == 0 {
            return Err(Error::invalid("class_count must be positive"));
        }
        let mut ids: Vec<u32> = frames.iter().map(|f| f.frame_id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("duplicate frame ids in scene"));
        }
        Ok(Self {
            cloud,
            frames,
            class_count,
        })
    }

    pub fn labels(&self) -> &[u32] {
        self.cloud.labels().expect("validated at construction")
    }
}
