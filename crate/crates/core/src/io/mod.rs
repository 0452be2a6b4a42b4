//! On-disk formats: PLY clouds, Netpbm depth/color/label images, and the
//! plain-text intrinsics and pose files that make up a scene directory.
//!
//! Scene directory layout:
//!
//! ```text
//! scene/
//!   cloud.ply              x y z label
//!   scene.json             {"class_count": N}
//!   frames/NNN.pgm         depth, uint16 millimeters, 0 = invalid
//!   frames/NNN.ppm         color
//!   frames/NNN.intr.txt    "fx fy cx cy width height"
//!   frames/NNN.pose.txt    4x4 camera-to-world, row-major, one row per line
//!   frames/NNN.label.pgm   optional per-pixel class ids, 65535 = unlabeled
//! ```

pub mod ply;
pub mod pnm;

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::model::{CameraIntrinsics, RgbdFrame, RigidPose, SceneBundle, NO_LABEL};

pub use ply::{read_point_cloud, write_point_cloud};
pub use pnm::PnmImage;

const LABEL_NONE_ON_DISK: u16 = u16::MAX;

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_numbers(line: &str, path: &Path, line_no: usize) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|tok| {
            let v: f64 = tok
                .parse()
                .map_err(|_| Error::parse(path.display(), line_no, format!("invalid number '{tok}'")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::parse(path.display(), line_no, format!("non-finite value '{tok}'")))
            }
        })
        .collect()
}

pub fn read_intrinsics(path: impl AsRef<Path>) -> Result<CameraIntrinsics> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let (n, line) = text
        .lines()
        .enumerate()
        .find(|(_, l)| !l.trim().is_empty())
        .ok_or_else(|| Error::parse(path.display(), 1, "empty intrinsics file"))?;
    let v = parse_numbers(line, path, n + 1)?;
    if v.len() != 6 {
        return Err(Error::parse(
            path.display(),
            n + 1,
            format!("expected 'fx fy cx cy width height', found {} values", v.len()),
        ));
    }
    let dim = |x: f64| -> Result<usize> {
        if x.fract() == 0.0 && x > 0.0 {
            Ok(x as usize)
        } else {
            Err(Error::parse(path.display(), n + 1, format!("image size {x} is not a positive integer")))
        }
    };
    CameraIntrinsics::new(v[0], v[1], v[2], v[3], dim(v[4])?, dim(v[5])?)
}

pub fn write_intrinsics(k: &CameraIntrinsics, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = format!("{} {} {} {} {} {}\n", k.fx, k.fy, k.cx, k.cy, k.width, k.height);
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_pose(path: impl AsRef<Path>) -> Result<RigidPose> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let mut rows = Vec::with_capacity(4);
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v = parse_numbers(line, path, n + 1)?;
        if v.len() != 4 {
            return Err(Error::parse(path.display(), n + 1, format!("expected 4 values, found {}", v.len())));
        }
        rows.push((n + 1, v));
    }
    if rows.len() != 4 {
        return Err(Error::parse(path.display(), text.lines().count().max(1), format!("expected 4 rows, found {}", rows.len())));
    }
    let (last_line, last) = &rows[3];
    if last.iter().zip([0.0, 0.0, 0.0, 1.0]).any(|(a, b)| (a - b).abs() > 1e-9) {
        return Err(Error::parse(path.display(), *last_line, "last row must be 0 0 0 1"));
    }
    let rotation = Matrix3::from_fn(|r, c| rows[r].1[c]);
    let translation = Vector3::new(rows[0].1[3], rows[1].1[3], rows[2].1[3]);
    RigidPose::new(rotation, translation)
}

pub fn write_pose(pose: &RigidPose, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let r = pose.rotation();
    let t = pose.translation();
    let mut text = String::new();
    for i in 0..3 {
        text.push_str(&format!("{} {} {} {}\n", r[(i, 0)], r[(i, 1)], r[(i, 2)], t[i]));
    }
    text.push_str("0 0 0 1\n");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Frame id from a file stem's leading digits (`"012.pgm"` → 12), else 0.
fn frame_id_from_path(path: &Path) -> u32 {
    path.file_name()
        .and_then(|s| s.to_str())
        .map(|s| s.chars().take_while(char::is_ascii_digit).collect::<String>())
        .and_then(|digits| digits.parse().ok())
        .unwrap_or(0)
}

/// Loads one RGB-D frame. Depth is read as millimeters and returned in meters.
pub fn read_frame(
    depth_path: impl AsRef<Path>,
    color_path: impl AsRef<Path>,
    intrinsics_path: impl AsRef<Path>,
    pose_path: impl AsRef<Path>,
) -> Result<RgbdFrame> {
    let depth_path = depth_path.as_ref();
    let intrinsics = read_intrinsics(intrinsics_path)?;
    let pose = read_pose(pose_path)?;
    let depth_img = pnm::read_pnm(depth_path)?;
    let color_img = pnm::read_pnm(color_path.as_ref())?;
    if depth_img.channels != 1 || color_img.channels != 3 {
        return Err(Error::invalid("depth must be PGM and color must be PPM"));
    }
    for (img, what) in [(&depth_img, "depth"), (&color_img, "color")] {
        if img.width != intrinsics.width || img.height != intrinsics.height {
            return Err(Error::invalid(format!(
                "{what} image is {}x{} but intrinsics say {}x{}",
                img.width, img.height, intrinsics.width, intrinsics.height
            )));
        }
    }
    let depth = depth_img.samples.iter().map(|&mm| f64::from(mm) / 1000.0).collect();
    let scale = f64::from(color_img.maxval);
    let color = color_img
        .samples
        .chunks_exact(3)
        .map(|c| [f64::from(c[0]) / scale, f64::from(c[1]) / scale, f64::from(c[2]) / scale])
        .collect();
    RgbdFrame::new(frame_id_from_path(depth_path), intrinsics, pose, depth, color)
}

/// Depth in meters → uint16 millimeters. Out-of-range depths become invalid (0).
pub fn depth_to_millimeters(depth: f64) -> u16 {
    let mm = (depth * 1000.0).round();
    if mm > 0.0 && mm < 65535.5 {
        mm as u16
    } else {
        0
    }
}

fn frame_paths(dir: &Path, id: u32) -> [PathBuf; 5] {
    let stem = format!("{id:03}");
    [
        dir.join(format!("{stem}.pgm")),
        dir.join(format!("{stem}.ppm")),
        dir.join(format!("{stem}.intr.txt")),
        dir.join(format!("{stem}.pose.txt")),
        dir.join(format!("{stem}.label.pgm")),
    ]
}

pub fn write_frame(frame: &RgbdFrame, dir: impl AsRef<Path>) -> Result<()> {
    let [depth_p, color_p, intr_p, pose_p, label_p] = frame_paths(dir.as_ref(), frame.frame_id);
    let (w, h) = (frame.width(), frame.height());
    pnm::write_pnm(
        &PnmImage {
            width: w,
            height: h,
            maxval: 65535,
            channels: 1,
            samples: frame.depth.iter().map(|&d| depth_to_millimeters(d)).collect(),
        },
        depth_p,
    )?;
    pnm::write_pnm(
        &PnmImage {
            width: w,
            height: h,
            maxval: 255,
            channels: 3,
            samples: frame
                .color
                .iter()
                .flat_map(|c| c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u16))
                .collect(),
        },
        color_p,
    )?;
    write_intrinsics(&frame.intrinsics, intr_p)?;
    write_pose(&frame.pose, pose_p)?;
    if let Some(labels) = &frame.labels {
        pnm::write_pnm(
            &PnmImage {
                width: w,
                height: h,
                maxval: 65535,
                channels: 1,
                samples: labels
                    .iter()
                    .map(|&l| if l == NO_LABEL { LABEL_NONE_ON_DISK } else { l.min(65534) as u16 })
                    .collect(),
            },
            label_p,
        )?;
    }
    Ok(())
}

#[derive(serde::Serialize, serde::Deserialize)]
struct SceneMeta {
    class_count: usize,
}

pub fn write_scene(scene: &SceneBundle, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    write_point_cloud(&scene.cloud, dir.join("cloud.ply"))?;
    let meta = serde_json::to_string_pretty(&SceneMeta {
        class_count: scene.class_count,
    })?;
    let meta_path = dir.join("scene.json");
    fs::write(&meta_path, meta + "\n").map_err(|e| Error::io(&meta_path, e))?;
    for frame in &scene.frames {
        write_frame(frame, &frames_dir)?;
    }
    Ok(())
}

pub fn read_scene(dir: impl AsRef<Path>) -> Result<SceneBundle> {
    let dir = dir.as_ref();
    let cloud = read_point_cloud(dir.join("cloud.ply"))?;
    let frames_dir = dir.join("frames");
    let entries = fs::read_dir(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(&frames_dir, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(stem) = name.strip_suffix(".pose.txt") {
            let id: u32 = stem
                .parse()
                .map_err(|_| Error::invalid(format!("unexpected frame file '{name}'")))?;
            ids.push(id);
        }
    }
    ids.sort_unstable();
    let mut frames = Vec::with_capacity(ids.len());
    for id in ids {
        let [depth_p, color_p, intr_p, pose_p, label_p] = frame_paths(&frames_dir, id);
        let mut frame = read_frame(&depth_p, color_p, intr_p, pose_p)?;
        frame.frame_id = id;
        if label_p.exists() {
            let img = pnm::read_pnm(&label_p)?;
            if img.channels != 1 || img.width != frame.width() || img.height != frame.height() {
                return Err(Error::invalid(format!("{}: label image does not match frame", label_p.display())));
            }
            let labels = img
                .samples
                .iter()
                .map(|&l| if l == LABEL_NONE_ON_DISK { NO_LABEL } else { u32::from(l) })
                .collect();
            frame = frame.with_labels(labels)?;
        }
        frames.push(frame);
    }
    let meta_path = dir.join("scene.json");
    let class_count = if meta_path.exists() {
        serde_json::from_str::<SceneMeta>(&read_text(&meta_path)?)?.class_count
    } else {
        cloud.labels().and_then(|l| l.iter().max()).map_or(1, |&m| m as usize + 1)
    };
    SceneBundle::new(cloud, frames, class_count)
}
