//! Synthetic RGBD generation: a ray-traced textured box interior observed
//! along analytic trajectories, emitted in the TUM dataset layout so runs
//! exercise the real loader path.

use std::path::Path;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose};
use crate::image_buf::{GrayImage, RgbImage};
use crate::types::Frame;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trajectory {
    /// Partial orbit inside the room, always facing the room center.
    Orbit,
    /// Gentle forward sweep with a slow yaw.
    Corridor,
    /// Full orbit that returns exactly to the starting pose.
    Loop,
}

impl std::str::FromStr for Trajectory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "orbit" => Ok(Self::Orbit),
            "corridor" => Ok(Self::Corridor),
            "loop" => Ok(Self::Loop),
            other => Err(Error::Config(format!("unknown trajectory '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthSpec {
    /// Half-extent of the cubic room in meters.
    pub room_half: f64,
    pub texture_seed: u64,
    pub trajectory: Trajectory,
    pub frames: usize,
    pub intr: CameraIntrinsics,
    /// Fraction of pixels given depth noise, and its sigma in meters.
    pub noise_fraction: f64,
    pub noise_sigma: f64,
    pub noise_seed: u64,
    /// Fraction of the full trajectory covered by the sequence (loop
    /// trajectories always close and ignore this).
    pub span: f64,
    /// Add a full-height square pillar at the room center (half-extent
    /// 0.12 * room_half) so near geometry occludes the far walls.
    pub pillar: bool,
    /// Fixed rotation (radians, applied as roll about z then pitch about x)
    /// of the whole trajectory relative to the axis-aligned room. A zero
    /// tilt leaves views exactly perpendicular to a wall at some frames;
    /// there every Gaussian on that wall shares one camera-space depth, the
    /// compositing order of the exact ties is arbitrary, and the photometric
    /// loss is discontinuous in the pose. Any nonzero tilt removes the
    /// degeneracy.
    pub tilt: f64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::Config("synthetic spec needs frames >= 1".into()));
        }
        if self.room_half <= 0.5 {
            return Err(Error::Config("room half-extent must exceed 0.5 m".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_fraction) || self.noise_sigma < 0.0 {
            return Err(Error::Config("bad depth-noise parameters".into()));
        }
        if !(self.span > 0.0 && self.span <= 1.0) {
            return Err(Error::Config("trajectory span must be in (0, 1]".into()));
        }
        Ok(())
    }
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            room_half: 2.0,
            texture_seed: 7,
            trajectory: Trajectory::Orbit,
            frames: 200,
            intr: CameraIntrinsics::new(80.0, 80.0, 32.0, 32.0, 64, 64, 5000.0).unwrap(),
            noise_fraction: 0.0,
            noise_sigma: 0.0,
            noise_seed: 0,
            span: 1.0,
            pillar: false,
            tilt: 0.0,
        }
    }
}

fn hash2(seed: u64, x: i64, y: i64) -> f64 {
    let mut h = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((x as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add((y as u64).wrapping_mul(0x94D0_49BB_1331_11EB));
    h ^= h >> 31;
    h = h.wrapping_mul(0xD6E8_FEB8_6659_FD93);
    h ^= h >> 27;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Two-octave value noise on a lattice, smooth in (x, y).
fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let mut total = 0.0;
    let mut amp = 0.65;
    let mut freq = 1.0;
    for octave in 0..2 {
        let (sx, sy) = (x * freq, y * freq);
        let (x0, y0) = (sx.floor() as i64, sy.floor() as i64);
        let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
        let sm = |t: f64| t * t * (3.0 - 2.0 * t);
        let (wx, wy) = (sm(fx), sm(fy));
        let s = seed.wrapping_add(octave);
        let v = hash2(s, x0, y0) * (1.0 - wx) * (1.0 - wy)
            + hash2(s, x0 + 1, y0) * wx * (1.0 - wy)
            + hash2(s, x0, y0 + 1) * (1.0 - wx) * wy
            + hash2(s, x0 + 1, y0 + 1) * wx * wy;
        total += amp * v;
        amp *= 0.5;
        freq *= 3.1;
    }
    total
}

/// Wall color at a hit point. Each wall gets its own seed stream and hue so
/// the six faces are visually distinct and richly textured.
fn wall_color(seed: u64, wall: usize, a: f64, b: f64) -> [f64; 3] {
    let base = [
        [0.85, 0.45, 0.40],
        [0.40, 0.75, 0.45],
        [0.40, 0.50, 0.85],
        [0.80, 0.75, 0.35],
        [0.70, 0.40, 0.75],
        [0.40, 0.75, 0.75],
    ][wall % 6];
    let n1 = value_noise(seed.wrapping_add(wall as u64 * 101), a * 2.0, b * 2.0);
    let n2 = value_noise(seed.wrapping_add(wall as u64 * 101 + 50), a * 5.0, b * 5.0);
    let m = 0.55 + 0.45 * n1;
    [
        (base[0] * m + 0.25 * (n2 - 0.5)).clamp(0.0, 1.0),
        (base[1] * m + 0.25 * (0.5 - n2)).clamp(0.0, 1.0),
        (base[2] * m + 0.20 * (n1 - 0.5)).clamp(0.0, 1.0),
    ]
}

/// Exit intersection of a ray starting inside the axis-aligned box
/// [-h, h]^3: returns (t, wall id). Wall ids: 0/1 = -x/+x, 2/3 = -y/+y,
/// 4/5 = -z/+z.
pub fn ray_box_exit(origin: &Vector3<f64>, dir: &Vector3<f64>, h: f64) -> (f64, usize) {
    let mut t_exit = f64::INFINITY;
    let mut wall = 0;
    for axis in 0..3 {
        let d = dir[axis];
        if d.abs() < 1e-15 {
            continue;
        }
        let bound = if d > 0.0 { h } else { -h };
        let t = (bound - origin[axis]) / d;
        if t < t_exit {
            t_exit = t;
            wall = 2 * axis + usize::from(d > 0.0);
        }
    }
    (t_exit, wall)
}

/// Entry intersection of a ray with the pillar's x/z slab volume: returns
/// (t, wall id 6..10) when the ray enters it in front of the camera.
pub fn ray_pillar_entry(origin: &Vector3<f64>, dir: &Vector3<f64>, ph: f64) -> Option<(f64, usize)> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut wall = 0;
    for (k, axis) in [0usize, 2].into_iter().enumerate() {
        let d = dir[axis];
        if d.abs() < 1e-15 {
            if origin[axis].abs() > ph {
                return None;
            }
            continue;
        }
        let t0 = (-ph - origin[axis]) / d;
        let t1 = (ph - origin[axis]) / d;
        let (lo, hi) = if t0 < t1 { (t0, t1) } else { (t1, t0) };
        if lo > t_near {
            t_near = lo;
            wall = 6 + 2 * k + usize::from(d < 0.0);
        }
        t_far = t_far.min(hi);
    }
    (t_near > 1e-12 && t_near < t_far).then_some((t_near, wall))
}

/// In-plane texture coordinates of a hit point on a wall.
fn wall_uv(p: &Vector3<f64>, wall: usize) -> (f64, f64) {
    match wall {
        0 | 1 | 6 | 7 => (p.y, p.z),
        2 | 3 => (p.x, p.z),
        _ => (p.x, p.y),
    }
}

/// Camera-to-world pose looking from `pos` toward `target`, world +y up,
/// camera convention +z forward / +y down.
pub fn look_at(pos: Vector3<f64>, target: Vector3<f64>) -> Pose {
    let f = (target - pos).normalize();
    let up = if f.y.abs() > 0.99 {
        Vector3::new(0.0, 0.0, 1.0)
    } else {
        Vector3::new(0.0, 1.0, 0.0)
    };
    let right = up.cross(&f).normalize();
    let down = f.cross(&right);
    let m = Matrix3::from_columns(&[right, down, f]);
    Pose::new(
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(m)),
        pos,
    )
}

/// Analytic ground-truth pose of frame i.
pub fn trajectory_pose(spec: &SynthSpec, i: usize) -> Pose {
    let n = spec.frames.max(2);
    let h = spec.room_half;
    let base = match spec.trajectory {
        Trajectory::Orbit => {
            // Three-quarter arc, looking through the center at the far walls.
            let theta = spec.span * 1.5 * std::f64::consts::PI * i as f64 / (n - 1) as f64;
            let r = 0.45 * h;
            let pos = Vector3::new(r * theta.cos(), 0.1 * h * (theta * 0.9).sin(), r * theta.sin());
            look_at(pos, -pos * 0.2)
        }
        Trajectory::Corridor => {
            let s = spec.span * i as f64 / (n - 1) as f64;
            let pos = Vector3::new(-0.5 * h + s * h, 0.0, -0.3 * h + 0.2 * h * s);
            let yaw = 0.3 * (s * std::f64::consts::PI).sin();
            let target = pos + Vector3::new(yaw.sin(), 0.0, yaw.cos());
            look_at(pos, target)
        }
        Trajectory::Loop => {
            // Closed circle: frame n-1 coincides with frame 0.
            let theta = 2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64;
            let r = 0.45 * h;
            let pos = Vector3::new(r * theta.cos(), 0.0, r * theta.sin());
            look_at(pos, -pos * 0.2)
        }
    };
    if spec.tilt == 0.0 {
        return base;
    }
    let tilt = UnitQuaternion::from_euler_angles(spec.tilt, 0.0, spec.tilt * 0.6);
    Pose::new(tilt, Vector3::zeros()).compose(&base)
}

/// Ray-traces one frame (exact, noise-free).
pub fn render_frame(spec: &SynthSpec, pose: &Pose, index: usize) -> Frame {
    let intr = &spec.intr;
    let mut rgb = RgbImage::new(intr.width, intr.height, [0.0; 3]);
    let mut depth = GrayImage::new(intr.width, intr.height, 0.0);
    for v in 0..intr.height {
        for u in 0..intr.width {
            let dir_cam = Vector3::new(
                (u as f64 - intr.cx) / intr.fx,
                (v as f64 - intr.cy) / intr.fy,
                1.0,
            );
            let dir = pose.rotation * dir_cam;
            let (mut t, mut wall) = ray_box_exit(&pose.translation, &dir, spec.room_half);
            if spec.pillar {
                if let Some((tp, wp)) = ray_pillar_entry(&pose.translation, &dir, 0.12 * spec.room_half) {
                    if tp < t {
                        (t, wall) = (tp, wp);
                    }
                }
            }
            let hit = pose.translation + dir * t;
            rgb.set(u, v, wall_color(spec.texture_seed, wall, wall_uv(&hit, wall).0, wall_uv(&hit, wall).1));
            // Depth is camera-space z, not ray length.
            depth.set(u, v, t * dir_cam.z);
        }
    }
    Frame::new(index, index as f64 / 30.0, rgb, depth).expect("synthetic frame is valid")
}

fn apply_noise(frame: &mut Frame, spec: &SynthSpec, rng: &mut ChaCha8Rng) {
    if spec.noise_fraction <= 0.0 || spec.noise_sigma <= 0.0 {
        return;
    }
    for i in 0..frame.depth.len() {
        if rng.gen_bool(spec.noise_fraction) {
            // Box-Muller; depth stays positive.
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let g = (-2.0 * u1.ln()).sqrt() * u2.cos();
            let d = frame.depth.as_mut_slice()[i];
            frame.depth.as_mut_slice()[i] = (d + g * spec.noise_sigma).max(0.01);
        }
    }
}

/// Generates the dataset on disk in TUM layout (rgb/, depth/, rgb.txt,
/// depth.txt, groundtruth.txt) and returns the ground-truth trajectory.
pub fn generate_synthetic(spec: &SynthSpec, root: &Path) -> Result<Vec<Pose>> {
    spec.validate()?;
    std::fs::create_dir_all(root.join("rgb"))?;
    std::fs::create_dir_all(root.join("depth"))?;
    let mut rgb_txt = String::from("# synthetic rgb\n");
    let mut depth_txt = String::from("# synthetic depth\n");
    let mut gt_txt = String::from("# synthetic ground truth\n");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.noise_seed);
    let mut poses = Vec::with_capacity(spec.frames);
    for i in 0..spec.frames {
        let pose = trajectory_pose(spec, i);
        let mut frame = render_frame(spec, &pose, i);
        apply_noise(&mut frame, spec, &mut rng);
        let ts = frame.timestamp;
        let mut rgb8 = image::RgbImage::new(spec.intr.width as u32, spec.intr.height as u32);
        for (x, y, p) in rgb8.enumerate_pixels_mut() {
            let c = frame.rgb.get(x as usize, y as usize);
            *p = image::Rgb([
                (c[0] * 255.0).round() as u8,
                (c[1] * 255.0).round() as u8,
                (c[2] * 255.0).round() as u8,
            ]);
        }
        let rgb_rel = format!("rgb/{i:06}.png");
        rgb8.save(root.join(&rgb_rel))?;
        let mut d16 = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(
            spec.intr.width as u32,
            spec.intr.height as u32,
        );
        for (x, y, p) in d16.enumerate_pixels_mut() {
            let d = frame.depth.get(x as usize, y as usize) * spec.intr.depth_scale;
            *p = image::Luma([d.round().clamp(0.0, u16::MAX as f64) as u16]);
        }
        let depth_rel = format!("depth/{i:06}.png");
        d16.save(root.join(&depth_rel))?;
        rgb_txt.push_str(&format!("{ts:.6} {rgb_rel}\n"));
        depth_txt.push_str(&format!("{ts:.6} {depth_rel}\n"));
        let q = pose.rotation.quaternion();
        let t = pose.translation;
        gt_txt.push_str(&format!(
            "{ts:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6}\n",
            t.x, t.y, t.z, q.i, q.j, q.k, q.w
        ));
        poses.push(pose);
    }
    crate::dataset::write_intrinsics(&spec.intr, &root.join("intrinsics.txt"))?;
    std::fs::write(root.join("rgb.txt"), rgb_txt)?;
    std::fs::write(root.join("depth.txt"), depth_txt)?;
    std::fs::write(root.join("groundtruth.txt"), gt_txt)?;
    Ok(poses)
}
