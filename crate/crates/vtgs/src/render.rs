//! Forward splatting of view-tied Gaussians.
//!
//! Gaussians are projected to isotropic screen-space footprints and
//! alpha-composited front to back. Two paths produce the same image: a naive
//! per-pixel reference that walks every primitive, and a tile-binned path that
//! composites 16x16 tiles in parallel.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose};
use crate::image_buf::{GrayImage, RgbImage};
use crate::types::Gaussian;

pub const NEAR_CLIP: f64 = 0.01;
/// Low-pass clamp on the screen footprint, in pixels.
pub const MIN_SIGMA_PX: f64 = 0.3;
pub const ALPHA_MAX: f64 = 0.999;
/// Transmittance below which compositing terminates. Kept far below any
/// visible contribution so the render stays numerically continuous in every
/// parameter (a larger guard makes finite differences straddle the cut).
pub const T_MIN: f64 = 1e-12;
/// Per-primitive evaluation is truncated at this many sigmas.
pub const CUTOFF_SIGMAS: f64 = 3.0;
pub const TILE_SIZE: usize = 16;

/// Floor of the footprint kernel. The weight is the squared shifted
/// half-width Gaussian w = ((exp(-q / 4s^2) - C) / (1 - C))^2 with
/// C = exp(-CUTOFF_SIGMAS^2 / 4): it is 1 at the center and reaches zero with
/// zero slope at the cutoff, so the render is C1 in every parameter and
/// finite-difference checks converge across the truncation boundary.
pub const KERNEL_FLOOR: f64 = 0.10539922456186433; // exp(-2.25)

/// Where Gaussian world positions come from.
///
/// Active sections derive positions from the owner frame's current pose so
/// that pose gradients can flow to the anchor; frozen sections use positions
/// baked at freeze time.
pub enum PositionSource<'a> {
    /// Pose table indexed by `owner_frame`.
    Poses(&'a [Pose]),
    /// Cached world positions, parallel to the Gaussian list.
    Baked(&'a [Vector3<f64>]),
}

pub struct GaussianSet<'a> {
    pub gaussians: &'a [Gaussian],
    pub positions: PositionSource<'a>,
}

/// A Gaussian projected into the render view.
#[derive(Debug, Clone)]
pub struct SplatPrimitive {
    pub screen_center: (f64, f64),
    pub screen_sigma: f64,
    pub z_cam: f64,
    pub color: [f64; 3],
    pub opacity: f64,
    /// Index into the concatenated input Gaussian order.
    pub gaussian_index: usize,
    pub owner_frame: usize,
    /// v * width + u of the anchor pixel; part of the deterministic sort key.
    pub pixel_index: u32,
    pub sigma_clamped: bool,
    /// View-camera-space position.
    pub cam_point: Vector3<f64>,
    /// Owner-camera-space anchor, present when the position is pose-derived
    /// (i.e. differentiable w.r.t. the owner pose).
    pub anchor_cam: Option<Vector3<f64>>,
}

impl SplatPrimitive {
    #[inline]
    pub fn cutoff_radius(&self) -> f64 {
        CUTOFF_SIGMAS * self.screen_sigma
    }
}

/// Primitives plus everything the backward pass needs to chain gradients.
pub struct PreparedScene {
    pub primitives: Vec<SplatPrimitive>,
    pub n_gaussians: usize,
    pub view: Pose,
    /// Poses of owner frames whose primitives are pose-derived.
    pub owner_poses: BTreeMap<usize, Pose>,
    pub intr: CameraIntrinsics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub color: RgbImage,
    pub depth: GrayImage,
    pub silhouette: GrayImage,
}

impl RenderOutput {
    pub fn background(width: usize, height: usize) -> Self {
        Self {
            color: RgbImage::new(width, height, [0.0; 3]),
            depth: GrayImage::new(width, height, 0.0),
            silhouette: GrayImage::new(width, height, 0.0),
        }
    }
}

/// Projects every Gaussian into the view, culls, and depth-sorts.
///
/// The sort key is (z_cam, owner_frame, pixel index), which is unique per
/// Gaussian within a run, making the order independent of input permutation.
pub fn prepare_primitives(
    sets: &[GaussianSet<'_>],
    view: &Pose,
    intr: &CameraIntrinsics,
) -> Result<PreparedScene> {
    let mut primitives = Vec::new();
    let mut owner_poses = BTreeMap::new();
    let f_mean = intr.f_mean();
    let mut base = 0usize;
    for set in sets {
        for (i, g) in set.gaussians.iter().enumerate() {
            let (world, anchor_cam) = match &set.positions {
                PositionSource::Poses(poses) => {
                    let pose = poses.get(g.owner_frame).ok_or_else(|| {
                        Error::Config(format!("missing owner pose for frame {}", g.owner_frame))
                    })?;
                    owner_poses.entry(g.owner_frame).or_insert(*pose);
                    let anchor = g.anchor_cam(intr);
                    (pose.transform(anchor), Some(anchor))
                }
                PositionSource::Baked(positions) => (positions[i], None),
            };
            let cam = view.inverse_transform(world);
            if cam.z <= NEAR_CLIP {
                continue;
            }
            let u0 = intr.fx * cam.x / cam.z + intr.cx;
            let v0 = intr.fy * cam.y / cam.z + intr.cy;
            let sigma_raw = f_mean * g.radius / cam.z;
            let (sigma, clamped) = if sigma_raw < MIN_SIGMA_PX {
                (MIN_SIGMA_PX, true)
            } else {
                (sigma_raw, false)
            };
            let rad = CUTOFF_SIGMAS * sigma;
            if u0 + rad < 0.0
                || v0 + rad < 0.0
                || u0 - rad > (intr.width - 1) as f64
                || v0 - rad > (intr.height - 1) as f64
            {
                continue;
            }
            primitives.push(SplatPrimitive {
                screen_center: (u0, v0),
                screen_sigma: sigma,
                z_cam: cam.z,
                color: g.color,
                opacity: g.opacity,
                gaussian_index: base + i,
                owner_frame: g.owner_frame,
                pixel_index: g.pixel.1 as u32 * intr.width as u32 + g.pixel.0 as u32,
                sigma_clamped: clamped,
                cam_point: cam,
                anchor_cam,
            });
        }
        base += set.gaussians.len();
    }
    primitives.sort_by(|a, b| {
        a.z_cam
            .partial_cmp(&b.z_cam)
            .unwrap()
            .then(a.owner_frame.cmp(&b.owner_frame))
            .then(a.pixel_index.cmp(&b.pixel_index))
    });
    Ok(PreparedScene {
        primitives,
        n_gaussians: base,
        view: *view,
        owner_poses,
        intr: *intr,
    })
}

/// One compositing step: (primitive index within `prims`, gaussian weight,
/// alpha, transmittance before the step). Returns the terminal transmittance.
#[inline]
pub(crate) fn for_each_contribution(
    u: f64,
    v: f64,
    prims: &[SplatPrimitive],
    indices: impl Iterator<Item = usize>,
    mut visit: impl FnMut(usize, f64, f64, f64),
) -> f64 {
    let mut t = 1.0;
    for i in indices {
        let p = &prims[i];
        let du = u - p.screen_center.0;
        let dv = v - p.screen_center.1;
        let q = du * du + dv * dv;
        let cutoff = p.cutoff_radius();
        if q > cutoff * cutoff {
            continue;
        }
        let e = (-q / (4.0 * p.screen_sigma * p.screen_sigma)).exp();
        let s = (e - KERNEL_FLOOR) / (1.0 - KERNEL_FLOOR);
        let w = s * s;
        let a = (p.opacity * w).clamp(0.0, ALPHA_MAX);
        if a <= 0.0 {
            continue;
        }
        visit(i, w, a, t);
        t *= 1.0 - a;
        if t < T_MIN {
            break;
        }
    }
    t
}

fn composite_pixel(
    u: usize,
    v: usize,
    prims: &[SplatPrimitive],
    indices: impl Iterator<Item = usize>,
) -> ([f64; 3], f64, f64) {
    let mut color = [0.0; 3];
    let mut depth = 0.0;
    let mut sil = 0.0;
    for_each_contribution(u as f64, v as f64, prims, indices, |i, _w, a, t| {
        let p = &prims[i];
        let at = a * t;
        color[0] += at * p.color[0];
        color[1] += at * p.color[1];
        color[2] += at * p.color[2];
        depth += at * p.z_cam;
        sil += at;
    });
    (color, depth, sil)
}

/// Reference renderer: every pixel walks the full sorted primitive list.
pub fn splat_naive(primitives: &[SplatPrimitive], intr: &CameraIntrinsics) -> RenderOutput {
    let mut out = RenderOutput::background(intr.width, intr.height);
    for v in 0..intr.height {
        for u in 0..intr.width {
            let (c, d, s) = composite_pixel(u, v, primitives, 0..primitives.len());
            out.color.set(u, v, c);
            out.depth.set(u, v, d);
            out.silhouette.set(u, v, s);
        }
    }
    out
}

pub(crate) struct TileGrid {
    pub tiles_x: usize,
    /// Sorted primitive indices per tile.
    pub bins: Vec<Vec<usize>>,
}

pub(crate) fn bin_primitives(prims: &[SplatPrimitive], intr: &CameraIntrinsics) -> TileGrid {
    let tiles_x = intr.width.div_ceil(TILE_SIZE);
    let mut bins = vec![Vec::new(); tiles_x * intr.height.div_ceil(TILE_SIZE)];
    for (i, p) in prims.iter().enumerate() {
        let rad = p.cutoff_radius();
        let u_min = ((p.screen_center.0 - rad).floor().max(0.0)) as usize;
        let v_min = ((p.screen_center.1 - rad).floor().max(0.0)) as usize;
        let u_max = (p.screen_center.0 + rad).ceil().min((intr.width - 1) as f64) as usize;
        let v_max = (p.screen_center.1 + rad).ceil().min((intr.height - 1) as f64) as usize;
        if u_min > u_max || v_min > v_max {
            continue;
        }
        for ty in v_min / TILE_SIZE..=v_max / TILE_SIZE {
            for tx in u_min / TILE_SIZE..=u_max / TILE_SIZE {
                bins[ty * tiles_x + tx].push(i);
            }
        }
    }
    TileGrid { tiles_x, bins }
}

/// Tile-parallel renderer. Tiles are independent; each owns its pixel block.
pub fn splat_tiled(primitives: &[SplatPrimitive], intr: &CameraIntrinsics) -> RenderOutput {
    let grid = bin_primitives(primitives, intr);
    let tile_results: Vec<Vec<(usize, usize, [f64; 3], f64, f64)>> = (0..grid.bins.len())
        .into_par_iter()
        .map(|tile| {
            let tx = tile % grid.tiles_x;
            let ty = tile / grid.tiles_x;
            let bin = &grid.bins[tile];
            let mut pixels = Vec::new();
            if bin.is_empty() {
                return pixels;
            }
            for v in ty * TILE_SIZE..((ty + 1) * TILE_SIZE).min(intr.height) {
                for u in tx * TILE_SIZE..((tx + 1) * TILE_SIZE).min(intr.width) {
                    let (c, d, s) = composite_pixel(u, v, primitives, bin.iter().copied());
                    if s > 0.0 {
                        pixels.push((u, v, c, d, s));
                    }
                }
            }
            pixels
        })
        .collect();
    let mut out = RenderOutput::background(intr.width, intr.height);
    for pixels in tile_results {
        for (u, v, c, d, s) in pixels {
            out.color.set(u, v, c);
            out.depth.set(u, v, d);
            out.silhouette.set(u, v, s);
        }
    }
    out
}

/// Renders the union of several Gaussian sets from a view.
pub fn render_view(
    sets: &[GaussianSet<'_>],
    view: &Pose,
    intr: &CameraIntrinsics,
) -> Result<(PreparedScene, RenderOutput)> {
    let prepared = prepare_primitives(sets, view, intr)?;
    let out = splat_tiled(&prepared.primitives, intr);
    Ok((prepared, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pose;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn intr(w: usize, h: usize) -> CameraIntrinsics {
        CameraIntrinsics::new(50.0, 50.0, w as f64 / 2.0, h as f64 / 2.0, w, h, 5000.0).unwrap()
    }

    fn gaussian(pixel: (u16, u16), depth: f64, color: [f64; 3], opacity: f64) -> Gaussian {
        Gaussian {
            color,
            radius: 0.05,
            opacity,
            owner_frame: 0,
            pixel,
            anchor_depth: depth,
        }
    }

    pub(crate) fn random_gaussians(rng: &mut impl Rng, n: usize, w: u16, h: u16) -> Vec<Gaussian> {
        (0..n)
            .map(|_| Gaussian {
                color: [rng.gen(), rng.gen(), rng.gen()],
                radius: rng.gen_range(0.005..0.08),
                opacity: rng.gen_range(0.05..1.0),
                owner_frame: 0,
                pixel: (rng.gen_range(0..w), rng.gen_range(0..h)),
                anchor_depth: rng.gen_range(0.5..3.0),
            })
            .collect()
    }

    #[test]
    fn identity_view_keeps_anchor_geometry() {
        let k = intr(16, 16);
        let g = gaussian((8, 8), 1.5, [1.0, 0.0, 0.0], 1.0);
        let poses = [Pose::identity()];
        let scene = prepare_primitives(
            &[GaussianSet {
                gaussians: std::slice::from_ref(&g),
                positions: PositionSource::Poses(&poses),
            }],
            &Pose::identity(),
            &k,
        )
        .unwrap();
        let p = &scene.primitives[0];
        assert!((p.screen_center.0 - 8.0).abs() < 1e-9);
        assert!((p.screen_center.1 - 8.0).abs() < 1e-9);
        assert!((p.z_cam - 1.5).abs() < 1e-9);
    }

    #[test]
    fn behind_camera_culled() {
        let k = intr(16, 16);
        let g = gaussian((8, 8), 1.0, [1.0, 0.0, 0.0], 1.0);
        let poses = [Pose::identity()];
        // View translated 2m forward along +z: the anchor at z=1 is behind it.
        let view = Pose::from_parts(1.0, 0.0, 0.0, 0.0, Vector3::new(0.0, 0.0, 2.0));
        let scene = prepare_primitives(
            &[GaussianSet {
                gaussians: std::slice::from_ref(&g),
                positions: PositionSource::Poses(&poses),
            }],
            &view,
            &k,
        )
        .unwrap();
        assert!(scene.primitives.is_empty());
    }

    #[test]
    fn footprint_arithmetic() {
        // r = 0.004 m at z = 2 m with f = 500 gives a 1 px footprint.
        let k = CameraIntrinsics::new(500.0, 500.0, 8.0, 8.0, 16, 16, 5000.0).unwrap();
        let g = Gaussian {
            color: [0.5; 3],
            radius: 0.004,
            opacity: 1.0,
            owner_frame: 0,
            pixel: (8, 8),
            anchor_depth: 2.0,
        };
        let poses = [Pose::identity()];
        let scene = prepare_primitives(
            &[GaussianSet {
                gaussians: std::slice::from_ref(&g),
                positions: PositionSource::Poses(&poses),
            }],
            &Pose::identity(),
            &k,
        )
        .unwrap();
        assert!((scene.primitives[0].screen_sigma - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_opaque_splat() {
        let k = intr(16, 16);
        let g = gaussian((8, 8), 1.5, [0.2, 0.4, 0.8], 1.0);
        let poses = [Pose::identity()];
        let scene = prepare_primitives(
            &[GaussianSet {
                gaussians: std::slice::from_ref(&g),
                positions: PositionSource::Poses(&poses),
            }],
            &Pose::identity(),
            &k,
        )
        .unwrap();
        let out = splat_naive(&scene.primitives, &k);
        let c = out.color.get(8, 8);
        let s = *out.silhouette.get(8, 8);
        // At the exact center w = 1, alpha = 0.999.
        assert!(s >= 0.999 * (1.0 - 1e-9));
        for ch in 0..3 {
            assert!((c[ch] - 0.999 * g.color[ch]).abs() < 1e-9);
        }
        assert!((out.depth.get(8, 8) - 0.999 * 1.5).abs() < 1e-9);
    }

    #[test]
    fn nearer_opaque_splat_occludes() {
        let k = intr(16, 16);
        let near = gaussian((8, 8), 1.0, [1.0, 0.0, 0.0], 1.0);
        let mut far = gaussian((8, 8), 1.0, [0.0, 1.0, 0.0], 1.0);
        far.anchor_depth = 2.0;
        far.owner_frame = 0;
        let poses = [Pose::identity()];
        let gs = [near.clone(), far];
        let scene = prepare_primitives(
            &[GaussianSet {
                gaussians: &gs,
                positions: PositionSource::Poses(&poses),
            }],
            &Pose::identity(),
            &k,
        )
        .unwrap();
        let out = splat_naive(&scene.primitives, &k);
        let c = out.color.get(8, 8);
        assert!((c[0] - near.color[0] * 0.999).abs() < 1e-3);
        assert!(c[1] < 1e-2);
    }

    #[test]
    fn empty_scene_renders_background() {
        let k = intr(16, 16);
        let out = splat_tiled(&[], &k);
        assert_eq!(out, RenderOutput::background(16, 16));
    }

    #[test]
    fn zero_opacity_renders_background() {
        let k = intr(16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut gs = random_gaussians(&mut rng, 50, 16, 16);
        for g in &mut gs {
            g.opacity = 0.0;
        }
        let poses = [Pose::identity()];
        let scene = prepare_primitives(
            &[GaussianSet {
                gaussians: &gs,
                positions: PositionSource::Poses(&poses),
            }],
            &Pose::identity(),
            &k,
        )
        .unwrap();
        let out = splat_tiled(&scene.primitives, &k);
        assert_eq!(out, RenderOutput::background(16, 16));
    }

    #[test]
    fn tiled_matches_naive_on_random_scenes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..50 {
            let size = 16 + (trial % 3) * 8;
            let k = intr(size, size);
            let gs = random_gaussians(&mut rng, 200, size as u16, size as u16);
            let poses = [Pose::identity()];
            let scene = prepare_primitives(
                &[GaussianSet {
                    gaussians: &gs,
                    positions: PositionSource::Poses(&poses),
                }],
                &Pose::identity(),
                &k,
            )
            .unwrap();
            let naive = splat_naive(&scene.primitives, &k);
            let tiled = splat_tiled(&scene.primitives, &k);
            for i in 0..naive.depth.len() {
                for ch in 0..3 {
                    assert!(
                        (naive.color.as_slice()[i][ch] - tiled.color.as_slice()[i][ch]).abs()
                            < 1e-5
                    );
                }
                assert!((naive.depth.as_slice()[i] - tiled.depth.as_slice()[i]).abs() < 1e-5);
                assert!(
                    (naive.silhouette.as_slice()[i] - tiled.silhouette.as_slice()[i]).abs() < 1e-5
                );
            }
        }
    }

    #[test]
    fn input_permutation_is_normalized_by_sort() {
        let k = intr(16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut gs = random_gaussians(&mut rng, 60, 16, 16);
        let poses = [Pose::identity()];
        let render = |gs: &[Gaussian]| {
            let scene = prepare_primitives(
                &[GaussianSet {
                    gaussians: gs,
                    positions: PositionSource::Poses(&poses),
                }],
                &Pose::identity(),
                &k,
            )
            .unwrap();
            splat_tiled(&scene.primitives, &k)
        };
        let before = render(&gs);
        gs.shuffle(&mut rng);
        let after = render(&gs);
        assert_eq!(before, after);
    }

    #[test]
    fn raising_opacity_never_lowers_silhouette() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let k = intr(16, 16);
        let mut gs = random_gaussians(&mut rng, 30, 16, 16);
        let poses = [Pose::identity()];
        let render = |gs: &[Gaussian]| {
            let scene = prepare_primitives(
                &[GaussianSet {
                    gaussians: gs,
                    positions: PositionSource::Poses(&poses),
                }],
                &Pose::identity(),
                &k,
            )
            .unwrap();
            splat_naive(&scene.primitives, &k)
        };
        for trial in 0..10 {
            let before = render(&gs);
            let idx = trial * 3 % gs.len();
            let bumped = (gs[idx].opacity + 0.2).min(1.0);
            gs[idx].opacity = bumped;
            let after = render(&gs);
            for i in 0..before.silhouette.len() {
                assert!(
                    after.silhouette.as_slice()[i] >= before.silhouette.as_slice()[i] - 1e-12,
                    "silhouette dropped at pixel {i}"
                );
            }
        }
    }

    #[test]
    fn render_view_union_equals_single_set() {
        let k = intr(16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let gs = random_gaussians(&mut rng, 40, 16, 16);
        let poses = [Pose::identity()];
        let (a, b) = gs.split_at(20);
        let (_, split) = render_view(
            &[
                GaussianSet {
                    gaussians: a,
                    positions: PositionSource::Poses(&poses),
                },
                GaussianSet {
                    gaussians: b,
                    positions: PositionSource::Poses(&poses),
                },
            ],
            &Pose::identity(),
            &k,
        )
        .unwrap();
        let (_, whole) = render_view(
            &[GaussianSet {
                gaussians: &gs,
                positions: PositionSource::Poses(&poses),
            }],
            &Pose::identity(),
            &k,
        )
        .unwrap();
        assert_eq!(split, whole);
    }
}
