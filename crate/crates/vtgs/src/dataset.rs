//! Dataset loading: TUM-RGBD layout (rgb.txt / depth.txt / groundtruth.txt)
//! and the Replica-style results/ + traj.txt layout.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix4, Quaternion, Rotation3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose};
use crate::image_buf::{GrayImage, RgbImage};
use crate::types::Frame;

/// Maximum rgb/depth timestamp difference for association, in seconds.
pub const ASSOCIATION_WINDOW: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    Tum,
    ReplicaLike,
}

impl std::str::FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tum" | "synthetic" => Ok(Layout::Tum),
            "replica" | "replica_like" => Ok(Layout::ReplicaLike),
            other => Err(Error::Config(format!("unknown dataset layout '{other}'"))),
        }
    }
}

/// An associated rgb/depth pair, loaded lazily.
#[derive(Debug, Clone)]
pub struct FrameEntry {
    pub timestamp: f64,
    pub rgb_path: PathBuf,
    pub depth_path: PathBuf,
}

#[derive(Debug)]
pub struct Dataset {
    pub entries: Vec<FrameEntry>,
    pub ground_truth: Option<Vec<Pose>>,
    pub intr: CameraIntrinsics,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn load_frame(&self, index: usize) -> Result<Frame> {
        let entry = self.entries.get(index).ok_or_else(|| {
            Error::InvalidInput(format!("frame index {index} out of range"))
        })?;
        let rgb = load_rgb(&entry.rgb_path, &self.intr)?;
        let depth = load_depth(&entry.depth_path, &self.intr)?;
        Frame::new(index, entry.timestamp, rgb, depth)
    }
}

fn load_rgb(path: &Path, intr: &CameraIntrinsics) -> Result<RgbImage> {
    let img = image::open(path)
        .map_err(|e| Error::DataFile {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?
        .to_rgb8();
    if (img.width() as usize, img.height() as usize) != (intr.width, intr.height) {
        return Err(Error::DataFile {
            path: path.to_path_buf(),
            msg: format!(
                "rgb size {}x{} does not match intrinsics {}x{}",
                img.width(),
                img.height(),
                intr.width,
                intr.height
            ),
        });
    }
    let mut out = RgbImage::new(intr.width, intr.height, [0.0; 3]);
    for (x, y, p) in img.enumerate_pixels() {
        out.set(
            x as usize,
            y as usize,
            [
                p[0] as f64 / 255.0,
                p[1] as f64 / 255.0,
                p[2] as f64 / 255.0,
            ],
        );
    }
    Ok(out)
}

fn load_depth(path: &Path, intr: &CameraIntrinsics) -> Result<GrayImage> {
    let img = image::open(path).map_err(|e| Error::DataFile {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let img = img.to_luma16();
    if (img.width() as usize, img.height() as usize) != (intr.width, intr.height) {
        return Err(Error::DataFile {
            path: path.to_path_buf(),
            msg: "depth size does not match intrinsics".into(),
        });
    }
    let mut out = GrayImage::new(intr.width, intr.height, 0.0);
    for (x, y, p) in img.enumerate_pixels() {
        out.set(x as usize, y as usize, p[0] as f64 / intr.depth_scale);
    }
    Ok(out)
}

/// Parses a TUM image-list file: "timestamp path" per line, '#' comments.
fn parse_list(path: &Path) -> Result<Vec<(f64, PathBuf)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::DataFile {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let root = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(ts), Some(rel)) = (parts.next(), parts.next()) else {
            return Err(Error::DataFile {
                path: path.to_path_buf(),
                msg: format!("line {}: expected 'timestamp path'", ln + 1),
            });
        };
        let ts: f64 = ts.parse().map_err(|_| Error::DataFile {
            path: path.to_path_buf(),
            msg: format!("line {}: bad timestamp '{ts}'", ln + 1),
        })?;
        out.push((ts, root.join(rel)));
    }
    Ok(out)
}

/// Parses groundtruth.txt: "timestamp tx ty tz qx qy qz qw" per line.
fn parse_groundtruth(path: &Path) -> Result<Vec<(f64, Pose)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::DataFile {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: std::result::Result<Vec<f64>, _> =
            line.split_whitespace().map(str::parse).collect();
        let vals = vals.map_err(|_| Error::DataFile {
            path: path.to_path_buf(),
            msg: format!("line {}: non-numeric field", ln + 1),
        })?;
        if vals.len() != 8 {
            return Err(Error::DataFile {
                path: path.to_path_buf(),
                msg: format!("line {}: expected 8 fields, got {}", ln + 1, vals.len()),
            });
        }
        let pose = Pose::new(
            UnitQuaternion::from_quaternion(Quaternion::new(
                vals[7], vals[4], vals[5], vals[6],
            )),
            Vector3::new(vals[1], vals[2], vals[3]),
        );
        out.push((vals[0], pose));
    }
    Ok(out)
}

/// Nearest-timestamp association within the window; unmatched rgb frames are
/// skipped with a warning.
fn associate(
    rgb: &[(f64, PathBuf)],
    depth: &[(f64, PathBuf)],
) -> Vec<FrameEntry> {
    let mut out = Vec::new();
    for (ts, rgb_path) in rgb {
        let best = depth
            .iter()
            .min_by(|a, b| {
                (a.0 - ts).abs().partial_cmp(&(b.0 - ts).abs()).unwrap()
            })
            .filter(|(dts, _)| (dts - ts).abs() <= ASSOCIATION_WINDOW);
        match best {
            Some((_, depth_path)) => out.push(FrameEntry {
                timestamp: *ts,
                rgb_path: rgb_path.clone(),
                depth_path: depth_path.clone(),
            }),
            None => log::warn!("rgb frame at {ts} has no depth within {ASSOCIATION_WINDOW} s"),
        }
    }
    out
}

/// Loads a TUM-layout dataset rooted at `root`. Ground-truth poses, when
/// present, are associated to frames by nearest timestamp.
pub fn load_tum(root: &Path, intr: CameraIntrinsics) -> Result<Dataset> {
    let rgb = parse_list(&root.join("rgb.txt"))?;
    let depth = parse_list(&root.join("depth.txt"))?;
    let entries = associate(&rgb, &depth);
    if entries.is_empty() {
        return Err(Error::Data(format!(
            "no associable frames under {}",
            root.display()
        )));
    }
    let gt_path = root.join("groundtruth.txt");
    let ground_truth = if gt_path.exists() {
        let gt = parse_groundtruth(&gt_path)?;
        if gt.is_empty() {
            None
        } else {
            Some(
                entries
                    .iter()
                    .map(|e| {
                        gt.iter()
                            .min_by(|a, b| {
                                (a.0 - e.timestamp)
                                    .abs()
                                    .partial_cmp(&(b.0 - e.timestamp).abs())
                                    .unwrap()
                            })
                            .map(|(_, p)| *p)
                            .unwrap()
                    })
                    .collect(),
            )
        }
    } else {
        None
    };
    Ok(Dataset {
        entries,
        ground_truth,
        intr,
    })
}

/// Loads a Replica-style dataset: results/frame%06d.jpg (or .png),
/// results/depth%06d.png, and traj.txt with one row-major 4x4 camera-to-world
/// matrix per line.
pub fn load_replica_like(root: &Path, intr: CameraIntrinsics) -> Result<Dataset> {
    let results = root.join("results");
    let mut entries = Vec::new();
    for i in 0.. {
        let jpg = results.join(format!("frame{i:06}.jpg"));
        let png = results.join(format!("frame{i:06}.png"));
        let rgb_path = if jpg.exists() {
            jpg
        } else if png.exists() {
            png
        } else {
            break;
        };
        let depth_path = results.join(format!("depth{i:06}.png"));
        if !depth_path.exists() {
            return Err(Error::DataFile {
                path: depth_path,
                msg: "missing depth image".into(),
            });
        }
        entries.push(FrameEntry {
            timestamp: i as f64,
            rgb_path,
            depth_path,
        });
    }
    if entries.is_empty() {
        return Err(Error::Data(format!(
            "no frames under {}",
            results.display()
        )));
    }
    let traj_path = root.join("traj.txt");
    let ground_truth = if traj_path.exists() {
        let text = std::fs::read_to_string(&traj_path)?;
        let mut poses = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let vals: std::result::Result<Vec<f64>, _> =
                line.split_whitespace().map(str::parse).collect();
            let vals = vals.map_err(|_| Error::DataFile {
                path: traj_path.clone(),
                msg: format!("line {}: non-numeric field", ln + 1),
            })?;
            if vals.len() != 16 {
                return Err(Error::DataFile {
                    path: traj_path.clone(),
                    msg: format!("line {}: expected 16 fields", ln + 1),
                });
            }
            let m = Matrix4::from_row_slice(&vals);
            let rot = Matrix3::from(m.fixed_view::<3, 3>(0, 0));
            let rotation = UnitQuaternion::from_rotation_matrix(
                &Rotation3::from_matrix_unchecked(rot),
            );
            poses.push(Pose::new(rotation, Vector3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)])));
        }
        Some(poses)
    } else {
        None
    };
    if let Some(gt) = &ground_truth {
        if gt.len() < entries.len() {
            return Err(Error::Data(format!(
                "traj.txt has {} poses for {} frames",
                gt.len(),
                entries.len()
            )));
        }
    }
    Ok(Dataset {
        entries,
        ground_truth,
        intr,
    })
}

/// Writes camera intrinsics as a `key = value` sidecar file.
pub fn write_intrinsics(intr: &CameraIntrinsics, path: &Path) -> Result<()> {
    let text = format!(
        "fx = {}\nfy = {}\ncx = {}\ncy = {}\nwidth = {}\nheight = {}\ndepth_scale = {}\n",
        intr.fx, intr.fy, intr.cx, intr.cy, intr.width, intr.height, intr.depth_scale
    );
    std::fs::write(path, text)?;
    Ok(())
}

/// Reads a `key = value` intrinsics sidecar written by [`write_intrinsics`].
pub fn read_intrinsics(path: &Path) -> Result<CameraIntrinsics> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::DataFile {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let mut vals: std::collections::BTreeMap<&str, f64> = Default::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |msg: String| Error::DataFile {
            path: path.to_path_buf(),
            msg: format!("line {}: {msg}", lineno + 1),
        };
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad("expected 'key = value'".into()))?;
        let v: f64 = v
            .trim()
            .parse()
            .map_err(|_| bad(format!("bad number '{}'", v.trim())))?;
        vals.insert(k.trim(), v);
    }
    let get = |k: &str| {
        vals.get(k).copied().ok_or_else(|| Error::DataFile {
            path: path.to_path_buf(),
            msg: format!("missing key '{k}'"),
        })
    };
    CameraIntrinsics::new(
        get("fx")?,
        get("fy")?,
        get("cx")?,
        get("cy")?,
        get("width")? as usize,
        get("height")? as usize,
        get("depth_scale")?,
    )
}

pub fn load(layout: Layout, root: &Path, intr: CameraIntrinsics) -> Result<Dataset> {
    match layout {
        Layout::Tum => load_tum(root, intr),
        Layout::ReplicaLike => load_replica_like(root, intr),
    }
}
