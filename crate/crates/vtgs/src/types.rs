//! Frames, view-tied Gaussians and sections.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::{pixel_to_cam, CameraIntrinsics, Pose};
use crate::image_buf::{GrayImage, MaskImage, RgbImage};

/// One RGBD observation. Depth 0 encodes an invalid measurement.
#[derive(Debug, Clone)]
pub struct Frame {
    pub index: usize,
    pub timestamp: f64,
    pub rgb: RgbImage,
    pub depth: GrayImage,
    pub valid_mask: MaskImage,
}

impl Frame {
    pub fn new(index: usize, timestamp: f64, rgb: RgbImage, depth: GrayImage) -> Result<Self> {
        if !rgb.same_shape(&depth) {
            return Err(Error::InvalidInput("rgb/depth shape mismatch".into()));
        }
        if rgb.as_slice().iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::InvalidInput("rgb values outside [0,1]".into()));
        }
        if depth.as_slice().iter().any(|&d| d < 0.0 || !d.is_finite()) {
            return Err(Error::InvalidInput("negative or non-finite depth".into()));
        }
        let valid_mask = depth.map(|&d| d > 0.0);
        Ok(Self {
            index,
            timestamp,
            rgb,
            depth,
            valid_mask,
        })
    }

    pub fn width(&self) -> usize {
        self.rgb.width()
    }

    pub fn height(&self) -> usize {
        self.rgb.height()
    }
}

/// A spherical Gaussian tied to a depth pixel of its owner frame.
///
/// Only color, radius and opacity are learnable (5 scalars). The world
/// position is derived from the owner frame's pose and the anchored pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub color: [f64; 3],
    pub radius: f64,
    pub opacity: f64,
    pub owner_frame: usize,
    pub pixel: (u16, u16),
    pub anchor_depth: f64,
}

/// Number of stored learnable scalars per Gaussian.
pub const LEARNABLE_SCALARS_PER_GAUSSIAN: usize = 5;
/// Scalars per Gaussian in a conventional anisotropic splat
/// (3 position + 4 rotation + 3 scale + 3 color + 1 opacity).
pub const ANISOTROPIC_SCALARS_PER_GAUSSIAN: usize = 14;

impl Gaussian {
    /// Camera-space anchor point in the owner frame.
    #[inline]
    pub fn anchor_cam(&self, intr: &CameraIntrinsics) -> Vector3<f64> {
        pixel_to_cam(
            self.pixel.0 as f64,
            self.pixel.1 as f64,
            self.anchor_depth,
            intr,
        )
    }

    /// World position derived from the owner frame's pose.
    #[inline]
    pub fn world_position(&self, owner_pose: &Pose, intr: &CameraIntrinsics) -> Vector3<f64> {
        owner_pose.transform(self.anchor_cam(intr))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SectionState {
    Active,
    Frozen,
}

/// A group of consecutive frames and all Gaussians tied to them.
#[derive(Debug, Clone)]
pub struct Section {
    pub id: usize,
    pub frame_indices: Vec<usize>,
    pub gaussians: Vec<Gaussian>,
    pub state: SectionState,
    /// World positions cached when the section freezes; positions of a frozen
    /// section never move again even if the in-memory pose table does.
    pub baked_positions: Option<Vec<Vector3<f64>>>,
}

impl Section {
    pub fn new(id: usize, head_index: usize) -> Self {
        Self {
            id,
            frame_indices: vec![head_index],
            gaussians: Vec::new(),
            state: SectionState::Active,
            baked_positions: None,
        }
    }

    pub fn head_index(&self) -> usize {
        self.frame_indices[0]
    }

    pub fn is_frozen(&self) -> bool {
        self.state == SectionState::Frozen
    }

    pub fn push_frame(&mut self, index: usize) -> Result<()> {
        if self.is_frozen() {
            return Err(Error::InvalidState(format!(
                "section {} is frozen, cannot add frame {index}",
                self.id
            )));
        }
        if let Some(&last) = self.frame_indices.last() {
            if index != last + 1 {
                return Err(Error::InvalidInput(format!(
                    "non-consecutive frame {index} after {last}"
                )));
            }
        }
        self.frame_indices.push(index);
        Ok(())
    }

    pub fn push_gaussians(&mut self, gaussians: impl IntoIterator<Item = Gaussian>) -> Result<()> {
        if self.is_frozen() {
            return Err(Error::InvalidState(format!(
                "section {} is frozen, cannot add Gaussians",
                self.id
            )));
        }
        self.gaussians.extend(gaussians);
        Ok(())
    }

    /// Bakes world positions from the given pose table and freezes.
    pub fn freeze(&mut self, poses: &[Pose], intr: &CameraIntrinsics) -> Result<()> {
        if self.is_frozen() {
            return Err(Error::InvalidState(format!(
                "section {} is already frozen",
                self.id
            )));
        }
        let baked = self
            .gaussians
            .iter()
            .map(|g| {
                poses
                    .get(g.owner_frame)
                    .map(|p| g.world_position(p, intr))
                    .ok_or_else(|| {
                        Error::InvalidState(format!("no pose for frame {}", g.owner_frame))
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        self.baked_positions = Some(baked);
        self.state = SectionState::Frozen;
        Ok(())
    }

    /// Cheap content checksum used by freeze-contract assertions.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut mix = |bits: u64| {
            h ^= bits;
            h = h.wrapping_mul(0x100000001b3);
        };
        for g in &self.gaussians {
            for c in g.color {
                mix(c.to_bits());
            }
            mix(g.radius.to_bits());
            mix(g.opacity.to_bits());
            mix(g.owner_frame as u64);
            mix(((g.pixel.0 as u64) << 16) | g.pixel.1 as u64);
            mix(g.anchor_depth.to_bits());
        }
        h
    }
}
