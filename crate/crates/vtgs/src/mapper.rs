//! Mapping: Gaussian initialization on head frames, densification on regular
//! frames, attribute optimization of the mapping objective with neighbor
//! context and random-view replay, and head-frame bundle adjustment.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose};
use crate::grad::backward_tiled;
use crate::loss::{mapping_loss, MappingWeights};
use crate::optim::{LearningRates, PoseOptimizer, SectionOptimizer};
use crate::render::{render_view, GaussianSet, PositionSource};
use crate::types::{Frame, Gaussian, Section};

pub const INITIAL_OPACITY: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct MapperConfig {
    pub weights: MappingWeights,
    pub head_iterations: usize,
    pub regular_iterations: usize,
    /// Silhouette threshold below which a pixel counts as uncovered.
    pub densify_threshold: f64,
    /// Section length N.
    pub section_length: usize,
    /// Bundle-adjust the head-frame pose while mapping the head frame.
    pub ba_enabled: bool,
    pub lr: LearningRates,
}

impl Default for MapperConfig {
    fn default() -> Self {
        Self {
            weights: MappingWeights::default(),
            head_iterations: 60,
            regular_iterations: 15,
            densify_threshold: 0.5,
            section_length: 40,
            ba_enabled: true,
            lr: LearningRates::default(),
        }
    }
}

impl MapperConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.densify_threshold) || self.densify_threshold == 0.0 {
            return Err(Error::Config(
                "densify threshold must lie strictly in (0,1)".into(),
            ));
        }
        if self.section_length == 0 {
            return Err(Error::Config("section length must be >= 1".into()));
        }
        Ok(())
    }
}

/// Deterministic per-pixel dither in (-0.5, 0.5), used to spread anchor
/// depths apart. Depth maps decoded from 16-bit PNGs are quantized, so whole
/// swaths of a frame share one bitwise depth; viewed from the owner pose
/// those Gaussians tie exactly in camera depth and the compositing order —
/// hence the rendered color — flips discontinuously under an infinitesimal
/// pose change, which stalls tracking. A relative dither of a few parts per
/// million is far below any depth sensor's precision while making camera
/// depths distinct.
fn depth_dither(frame: usize, u: usize, v: usize) -> f64 {
    let mut h = (frame as u64)
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((u as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add((v as u64).wrapping_mul(0x94D0_49BB_1331_11EB));
    h ^= h >> 31;
    h = h.wrapping_mul(0xD6E8_FEB8_6659_FD93);
    h ^= h >> 32;
    (h >> 11) as f64 / (1u64 << 53) as f64 - 0.5
}

fn anchor_depth(frame: &Frame, u: usize, v: usize, d: f64) -> f64 {
    d * (1.0 + 1e-5 * depth_dither(frame.index, u, v))
}

/// One Gaussian per valid-depth pixel: color from the image, radius
/// depth/f_mean, initial opacity 0.5, anchored to the frame's pixel grid.
pub fn init_gaussians(frame: &Frame, intr: &CameraIntrinsics) -> Vec<Gaussian> {
    let mut out = Vec::new();
    for v in 0..frame.height() {
        for u in 0..frame.width() {
            let d = *frame.depth.get(u, v);
            if d <= 0.0 {
                continue;
            }
            out.push(Gaussian {
                color: *frame.rgb.get(u, v),
                radius: d / intr.f_mean(),
                opacity: INITIAL_OPACITY,
                owner_frame: frame.index,
                pixel: (u as u16, v as u16),
                anchor_depth: anchor_depth(frame, u, v, d),
            });
        }
    }
    if out.is_empty() {
        log::warn!("frame {}: no valid depth, no Gaussians initialized", frame.index);
    }
    out
}

/// New Gaussians for every valid-depth pixel the section's silhouette leaves
/// uncovered (silhouette < threshold) when rendered from `pose`.
pub fn densify(
    frame: &Frame,
    pose: &Pose,
    section: &Section,
    poses: &[Pose],
    intr: &CameraIntrinsics,
    threshold: f64,
) -> Result<Vec<Gaussian>> {
    let set = GaussianSet {
        gaussians: &section.gaussians,
        positions: PositionSource::Poses(poses),
    };
    let (_, render) = render_view(std::slice::from_ref(&set), pose, intr)?;
    let mut out = Vec::new();
    for v in 0..frame.height() {
        for u in 0..frame.width() {
            let d = *frame.depth.get(u, v);
            if d > 0.0 && *render.silhouette.get(u, v) < threshold {
                out.push(Gaussian {
                    color: *frame.rgb.get(u, v),
                    radius: d / intr.f_mean(),
                    opacity: INITIAL_OPACITY,
                    owner_frame: frame.index,
                    pixel: (u as u16, v as u16),
                    anchor_depth: anchor_depth(frame, u, v, d),
                });
            }
        }
    }
    Ok(out)
}

fn frozen_set(section: &Section) -> Result<GaussianSet<'_>> {
    let baked = section.baked_positions.as_deref().ok_or_else(|| {
        Error::InvalidState(format!("section {} is not frozen with baked positions", section.id))
    })?;
    Ok(GaussianSet {
        gaussians: &section.gaussians,
        positions: PositionSource::Baked(baked),
    })
}

/// One mapping iteration: render the learnable Gaussians together with the
/// frozen context from `view`, apply the mapping loss against `target`, and
/// step the learnable attributes. Returns the loss and the view-pose
/// gradient (view term plus the view frame's owner term, for BA).
fn mapping_step(
    target: &Frame,
    learnable: &mut [Gaussian],
    frozen: &[&Section],
    poses: &[Pose],
    view: &Pose,
    optim: &mut SectionOptimizer,
    intr: &CameraIntrinsics,
    weights: &MappingWeights,
    lr: &LearningRates,
) -> Result<(f64, [f64; 7])> {
    let n = learnable.len();
    let mut sets = vec![GaussianSet {
        gaussians: learnable,
        positions: PositionSource::Poses(poses),
    }];
    for s in frozen {
        sets.push(frozen_set(s)?);
    }
    let (scene, render) = render_view(&sets, view, intr)?;
    let (loss, upstream) = mapping_loss(target, &render, weights)?;
    let grads = backward_tiled(&scene, &upstream)?;
    drop(sets);
    optim.step_gaussians(
        learnable,
        &grads.d_color[..n],
        &grads.d_radius[..n],
        &grads.d_opacity[..n],
        lr,
    );
    // Anchors of the view frame's own Gaussians move with the pose under BA,
    // so fold their owner term into the view-pose derivative.
    let mut d_pose = grads.d_view;
    if let Some(own) = grads.d_owner.get(&target.index) {
        for k in 0..7 {
            d_pose[k] += own[k];
        }
    }
    Ok((loss, d_pose))
}

/// Optimizes a freshly initialized head section against its head frame,
/// rendering together with the previous and overlapping frozen sections.
/// Only the new section's attributes (and, with BA, the head pose) change.
/// Returns the final loss.
pub fn map_head_frame(
    frame: &Frame,
    poses: &mut [Pose],
    new_section: &mut Section,
    prev: Option<&Section>,
    overlap: Option<&Section>,
    intr: &CameraIntrinsics,
    cfg: &MapperConfig,
) -> Result<f64> {
    cfg.validate()?;
    let mut optim = SectionOptimizer::new(new_section.gaussians.len());
    let mut pose_optim = PoseOptimizer::new();
    let frozen: Vec<&Section> = [prev, overlap].into_iter().flatten().collect();
    let mut last = 0.0;
    for _ in 0..cfg.head_iterations {
        let view = poses[frame.index];
        let (loss, d_pose) = mapping_step(
            frame,
            &mut new_section.gaussians,
            &frozen,
            poses,
            &view,
            &mut optim,
            intr,
            &cfg.weights,
            &cfg.lr,
        )?;
        last = loss;
        if cfg.ba_enabled {
            let mut pose = poses[frame.index];
            pose_optim.step(&mut pose, &d_pose, &cfg.lr);
            poses[frame.index] = pose;
        }
    }
    Ok(last)
}

/// Densifies the active section at the new frame, then optimizes it with
/// random-view replay: each iteration renders from a uniformly sampled frame
/// j <= i of the section and applies the mapping loss against frame j.
/// `frames` is parallel to `section.frame_indices`. Returns the final loss.
pub fn map_regular_frame(
    frame: &Frame,
    frames: &[&Frame],
    poses: &[Pose],
    section: &mut Section,
    intr: &CameraIntrinsics,
    cfg: &MapperConfig,
    rng: &mut impl Rng,
) -> Result<f64> {
    cfg.validate()?;
    if frames.len() != section.frame_indices.len() {
        return Err(Error::InvalidInput(
            "frame slice must be parallel to the section's frame list".into(),
        ));
    }
    let new = densify(
        frame,
        &poses[frame.index],
        section,
        poses,
        intr,
        cfg.densify_threshold,
    )?;
    section.push_gaussians(new)?;
    let mut optim = SectionOptimizer::new(section.gaussians.len());
    let mut last = 0.0;
    for _ in 0..cfg.regular_iterations {
        let j = rng.gen_range(0..frames.len());
        let target = frames[j];
        let view = poses[target.index];
        // The pose gradient is discarded: regular views are never
        // bundle-adjusted.
        let (loss, _) = mapping_step(
            target,
            &mut section.gaussians,
            &[],
            poses,
            &view,
            &mut optim,
            intr,
            &cfg.weights,
            &cfg.lr,
        )?;
        last = loss;
    }
    Ok(last)
}

/// Bakes world positions from the final poses and freezes the section.
pub fn freeze_section(
    section: &mut Section,
    poses: &[Pose],
    intr: &CameraIntrinsics,
) -> Result<()> {
    section.freeze(poses, intr)
}
