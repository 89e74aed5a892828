//! Point-to-view visibility tests and the tracking mask W_i.
//!
//! A world point is visible from a view when it projects inside the image
//! and its camera-space depth agrees with the stored depth map within 1%.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::geometry::{back_project, project, CameraIntrinsics, Pose};
use crate::image_buf::{GrayImage, MaskImage};
use crate::render::RenderOutput;
use crate::types::{Frame, Section};

/// Relative depth band of the visibility check.
pub const DEPTH_TOLERANCE: f64 = 0.01;
/// Minimum silhouette value for a pixel to count as covered in W_i. Kept
/// well below saturation: a section optimized for only a handful of
/// iterations renders silhouettes that hover around 0.9 between splat
/// centers, and a near-1.0 cutoff makes the mask flicker (or empty out)
/// under sub-pixel view shifts.
pub const COVERAGE_THRESHOLD: f64 = 0.5;
/// Pixel count above which visibility is sampled on a stride-2 grid.
const EXACT_AREA_LIMIT: usize = 640 * 480;

/// Bilinear depth lookup; invalid (non-positive) neighbors poison the sample.
fn interp_depth(depth: &GrayImage, u: f64, v: f64) -> Option<f64> {
    if u < 0.0 || v < 0.0 {
        return None;
    }
    let u0 = u.floor() as usize;
    let v0 = v.floor() as usize;
    if u0 + 1 >= depth.width() || v0 + 1 >= depth.height() {
        return None;
    }
    let fu = u - u0 as f64;
    let fv = v - v0 as f64;
    let d00 = *depth.get(u0, v0);
    let d10 = *depth.get(u0 + 1, v0);
    let d01 = *depth.get(u0, v0 + 1);
    let d11 = *depth.get(u0 + 1, v0 + 1);
    if d00 <= 0.0 || d10 <= 0.0 || d01 <= 0.0 || d11 <= 0.0 {
        return None;
    }
    Some(
        d00 * (1.0 - fu) * (1.0 - fv)
            + d10 * fu * (1.0 - fv)
            + d01 * (1.0 - fu) * fv
            + d11 * fu * fv,
    )
}

/// True iff `point` projects into `view` and its depth lies within 1% of the
/// bilinearly interpolated stored depth.
pub fn visible(
    point: &Vector3<f64>,
    view: &Pose,
    view_depth: &GrayImage,
    intr: &CameraIntrinsics,
) -> bool {
    visible_with_tolerance(point, view, view_depth, intr, DEPTH_TOLERANCE)
}

pub fn visible_with_tolerance(
    point: &Vector3<f64>,
    view: &Pose,
    view_depth: &GrayImage,
    intr: &CameraIntrinsics,
    tolerance: f64,
) -> bool {
    let proj = project(*point, intr, view);
    if !proj.in_bounds(intr) {
        return false;
    }
    match interp_depth(view_depth, proj.u, proj.v) {
        Some(d) => (proj.z_cam - d).abs() <= tolerance * d,
        None => false,
    }
}

/// Pose and depth of a reference frame used for visibility testing.
pub struct RefView<'a> {
    pub pose: &'a Pose,
    pub depth: &'a GrayImage,
}

/// Indices of the head, middle, and last frame of a section.
pub fn reference_frames(section: &Section) -> [usize; 3] {
    let n = section.frame_indices.len();
    [
        section.frame_indices[0],
        section.frame_indices[n / 2],
        section.frame_indices[n - 1],
    ]
}

/// Union of the per-pixel visibility of `frame`'s back-projected points
/// against the section's head, middle, and last frames. `lookup` resolves a
/// frame index to its pose and depth map.
pub fn section_visibility_mask<'a>(
    frame: &Frame,
    pose: &Pose,
    section: &Section,
    intr: &CameraIntrinsics,
    lookup: impl Fn(usize) -> Option<RefView<'a>>,
) -> MaskImage {
    let refs: Vec<RefView> = reference_frames(section)
        .into_iter()
        .filter_map(&lookup)
        .collect();
    let (w, h) = (frame.width(), frame.height());
    let stride = if w * h > EXACT_AREA_LIMIT { 2 } else { 1 };
    let mut mask = MaskImage::new(w, h, false);
    let rows: Vec<Vec<bool>> = (0..h)
        .into_par_iter()
        .step_by(stride)
        .map(|v| {
            let mut row = vec![false; w];
            for u in (0..w).step_by(stride) {
                let d = *frame.depth.get(u, v);
                if d <= 0.0 {
                    continue;
                }
                let Ok(p) = back_project((u as f64, v as f64), d, intr, pose) else {
                    continue;
                };
                row[u] = refs.iter().any(|r| visible(&p, r.pose, r.depth, intr));
            }
            row
        })
        .collect();
    for (ri, row) in rows.into_iter().enumerate() {
        let v = ri * stride;
        for u in 0..w {
            let src = row[(u / stride) * stride];
            for dv in 0..stride {
                if v + dv < h {
                    mask.set(u, v + dv, src);
                }
            }
        }
    }
    mask
}

/// W_i = valid depth ∧ silhouette coverage ∧ section visibility.
pub fn tracking_mask(frame: &Frame, render: &RenderOutput, vis_mask: &MaskImage) -> MaskImage {
    let mut out = MaskImage::new(frame.width(), frame.height(), false);
    for i in 0..out.len() {
        out.as_mut_slice()[i] = frame.valid_mask.as_slice()[i]
            && render.silhouette.as_slice()[i] > COVERAGE_THRESHOLD
            && vis_mask.as_slice()[i];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image_buf::RgbImage;
    use nalgebra::{UnitQuaternion, Vector3};

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::new(30.0, 30.0, 16.0, 16.0, 32, 32, 1.0).unwrap()
    }

    fn flat_frame(intr: &CameraIntrinsics, depth: f64) -> Frame {
        Frame::new(
            0,
            0.0,
            RgbImage::new(intr.width, intr.height, [0.5; 3]),
            GrayImage::new(intr.width, intr.height, depth),
        )
        .unwrap()
    }

    #[test]
    fn self_backprojection_is_visible() {
        let intr = intr();
        let pose = Pose::identity();
        let depth = GrayImage::new(32, 32, 2.0);
        let p = back_project((10.0, 12.0), 2.0, &intr, &pose).unwrap();
        assert!(visible(&p, &pose, &depth, &intr));
    }

    #[test]
    fn depth_band_is_one_percent() {
        let intr = intr();
        let pose = Pose::identity();
        let depth = GrayImage::new(32, 32, 2.0);
        // z = 1.02 * d exceeds the band; z = 1.005 * d is inside.
        let inside = back_project((16.0, 16.0), 2.0 * 1.005, &intr, &pose).unwrap();
        let outside = back_project((16.0, 16.0), 2.0 * 1.02, &intr, &pose).unwrap();
        assert!(visible(&inside, &pose, &depth, &intr));
        assert!(!visible(&outside, &pose, &depth, &intr));
    }

    #[test]
    fn out_of_bounds_is_invisible() {
        let intr = intr();
        let pose = Pose::identity();
        let depth = GrayImage::new(32, 32, 2.0);
        let p = Vector3::new(100.0, 0.0, 2.0);
        assert!(!visible(&p, &pose, &depth, &intr));
        assert!(!visible(&Vector3::new(0.0, 0.0, -1.0), &pose, &depth, &intr));
    }

    #[test]
    fn invalid_neighbor_poisons_lookup() {
        let intr = intr();
        let pose = Pose::identity();
        let mut depth = GrayImage::new(32, 32, 2.0);
        depth.set(16, 16, 0.0);
        // Projects to (16.5, 16.5): one of the four neighbors is invalid.
        let p = back_project((16.5, 16.5), 2.0, &intr, &pose).unwrap();
        assert!(!visible(&p, &pose, &depth, &intr));
    }

    #[test]
    fn tolerance_is_monotone() {
        let intr = intr();
        let pose = Pose::identity();
        let depth = GrayImage::new(32, 32, 2.0);
        for k in 0..20 {
            let z = 2.0 * (1.0 + 0.0015 * k as f64);
            let p = back_project((16.0, 16.0), z, &intr, &pose).unwrap();
            let tight = visible_with_tolerance(&p, &pose, &depth, &intr, 0.01);
            let loose = visible_with_tolerance(&p, &pose, &depth, &intr, 0.02);
            assert!(!tight || loose, "relaxing the band lost a visible point");
        }
    }

    #[test]
    fn self_section_mask_covers_interior() {
        let intr = intr();
        let pose = Pose::identity();
        let frame = flat_frame(&intr, 2.0);
        let mut section = Section::new(0, 0);
        section.push_frame(1).unwrap();
        section.push_frame(2).unwrap();
        let mask = section_visibility_mask(&frame, &pose, &section, &intr, |_| {
            Some(RefView {
                pose: &pose,
                depth: &frame.depth,
            })
        });
        // Interior pixels must all be visible; only the interpolation border
        // (last row/column) may drop out.
        for v in 0..31 {
            for u in 0..31 {
                assert!(*mask.get(u, v), "interior pixel ({u},{v}) not visible");
            }
        }
    }

    #[test]
    fn disjoint_section_mask_is_empty() {
        let intr = intr();
        let pose = Pose::identity();
        let frame = flat_frame(&intr, 2.0);
        let section = Section::new(0, 0);
        // Reference view looks the opposite way.
        let away = Pose::new(
            UnitQuaternion::from_scaled_axis(Vector3::new(0.0, std::f64::consts::PI, 0.0)),
            Vector3::zeros(),
        );
        let depth = GrayImage::new(32, 32, 2.0);
        let mask = section_visibility_mask(&frame, &pose, &section, &intr, |_| {
            Some(RefView {
                pose: &away,
                depth: &depth,
            })
        });
        assert_eq!(mask.count_true(), 0);
    }

    #[test]
    fn union_matches_per_frame_recomputation() {
        // [DERIVED] union oracle: mask == m_head | m_mid | m_last, where each
        // m_k is recomputed with single-frame sections.
        let intr = intr();
        let pose = Pose::identity();
        let frame = flat_frame(&intr, 2.0);
        let mut section = Section::new(0, 10);
        section.push_frame(11).unwrap();
        section.push_frame(12).unwrap();
        let poses = [
            Pose::new(
                UnitQuaternion::from_scaled_axis(Vector3::new(0.0, 0.3, 0.0)),
                Vector3::new(0.5, 0.0, 0.0),
            ),
            Pose::identity(),
            Pose::new(
                UnitQuaternion::from_scaled_axis(Vector3::new(0.2, 0.0, 0.0)),
                Vector3::new(0.0, 0.4, -0.3),
            ),
        ];
        let mut depths = [
            GrayImage::new(32, 32, 2.0),
            GrayImage::new(32, 32, 2.0),
            GrayImage::new(32, 32, 2.0),
        ];
        // Two-box structure: carve different depths into each reference view.
        for (k, d) in depths.iter_mut().enumerate() {
            for v in 8..20 {
                for u in (4 + 6 * k)..(12 + 6 * k) {
                    d.set(u, v, 1.0 + 0.3 * k as f64);
                }
            }
        }
        let lookup = |idx: usize| {
            let k = idx - 10;
            Some(RefView {
                pose: &poses[k],
                depth: &depths[k],
            })
        };
        let mask = section_visibility_mask(&frame, &pose, &section, &intr, lookup);
        let mut expected = MaskImage::new(32, 32, false);
        for k in 0..3 {
            let single = Section::new(0, 10 + k);
            let m = section_visibility_mask(&frame, &pose, &single, &intr, &lookup);
            for i in 0..expected.len() {
                let v = expected.as_slice()[i] || m.as_slice()[i];
                expected.as_mut_slice()[i] = v;
            }
        }
        assert_eq!(mask.as_slice(), expected.as_slice());
    }

    #[test]
    fn tracking_mask_empty_render() {
        let intr = intr();
        let frame = flat_frame(&intr, 2.0);
        let render = RenderOutput::background(32, 32);
        let vis = MaskImage::new(32, 32, true);
        assert_eq!(tracking_mask(&frame, &render, &vis).count_true(), 0);
    }

    #[test]
    fn tracking_mask_full_coverage_is_valid_mask() {
        let intr = intr();
        let mut frame = flat_frame(&intr, 2.0);
        frame.depth.set(3, 3, 0.0);
        frame.valid_mask.set(3, 3, false);
        let render = RenderOutput {
            color: RgbImage::new(32, 32, [0.5; 3]),
            depth: GrayImage::new(32, 32, 2.0),
            silhouette: GrayImage::new(32, 32, 1.0),
        };
        let vis = MaskImage::new(32, 32, true);
        let w = tracking_mask(&frame, &render, &vis);
        assert_eq!(w.as_slice(), frame.valid_mask.as_slice());
    }

    #[test]
    fn tracking_mask_is_intersection() {
        // [DERIVED] boolean oracle on pseudo-random masks.
        let intr = intr();
        let mut frame = flat_frame(&intr, 2.0);
        let mut render = RenderOutput::background(32, 32);
        let mut vis = MaskImage::new(32, 32, false);
        for i in 0..frame.valid_mask.len() {
            let a = (i * 7) % 3 != 0;
            let b = (i * 11) % 4 != 0;
            let c = (i * 13) % 5 != 0;
            if !a {
                frame.depth.as_mut_slice()[i] = 0.0;
                frame.valid_mask.as_mut_slice()[i] = false;
            }
            render.silhouette.as_mut_slice()[i] = if b { 1.0 } else { 0.5 };
            vis.as_mut_slice()[i] = c;
        }
        let w = tracking_mask(&frame, &render, &vis);
        for i in 0..w.len() {
            let expect = frame.valid_mask.as_slice()[i]
                && render.silhouette.as_slice()[i] > COVERAGE_THRESHOLD
                && vis.as_slice()[i];
            assert_eq!(w.as_slice()[i], expect);
        }
        // W_i ⊆ valid_mask.
        for i in 0..w.len() {
            assert!(!w.as_slice()[i] || frame.valid_mask.as_slice()[i]);
        }
    }
}
