//! Analytic backward pass of the splatting renderer.
//!
//! Gradients flow through the alpha-compositing recurrence, the isotropic
//! screen footprint sigma = f * r / z, the pinhole projection, and (for
//! pose-derived positions) the owner frame's anchor transform. Quaternions are
//! differentiated on their ambient four parameters; the gradient of the
//! normalized map is obtained by projecting with (I - q q^T).

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3, Vector4};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::CameraIntrinsics;
use crate::image_buf::{GrayImage, RgbImage};
use crate::render::{bin_primitives, for_each_contribution, PreparedScene, SplatPrimitive};

/// Per-pixel loss gradients w.r.t. the three render channels.
pub struct UpstreamGrads {
    pub d_color: RgbImage,
    pub d_depth: GrayImage,
    pub d_silhouette: GrayImage,
}

impl UpstreamGrads {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            d_color: RgbImage::new(width, height, [0.0; 3]),
            d_depth: GrayImage::new(width, height, 0.0),
            d_silhouette: GrayImage::new(width, height, 0.0),
        }
    }
}

/// Gradients w.r.t. every learnable quantity of a render call.
///
/// Per-Gaussian vectors are indexed by the concatenated input order of
/// `prepare_primitives`; culled Gaussians keep exact zeros. Pose gradients are
/// 7-vectors [qw, qx, qy, qz, tx, ty, tz].
#[derive(Debug, Clone)]
pub struct GradientBundle {
    pub d_color: Vec<[f64; 3]>,
    pub d_radius: Vec<f64>,
    pub d_opacity: Vec<f64>,
    pub d_view: [f64; 7],
    pub d_owner: BTreeMap<usize, [f64; 7]>,
}

impl GradientBundle {
    fn zeros(n: usize) -> Self {
        Self {
            d_color: vec![[0.0; 3]; n],
            d_radius: vec![0.0; n],
            d_opacity: vec![0.0; n],
            d_view: [0.0; 7],
            d_owner: BTreeMap::new(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.d_color.iter().flatten().all(|g| g.is_finite())
            && self.d_radius.iter().all(|g| g.is_finite())
            && self.d_opacity.iter().all(|g| g.is_finite())
            && self.d_view.iter().all(|g| g.is_finite())
            && self
                .d_owner
                .values()
                .flat_map(|g| g.iter())
                .all(|g| g.is_finite())
    }
}

/// Pixel-level gradients accumulated per primitive before chaining through
/// projection and poses.
#[derive(Debug, Clone, Copy, Default)]
struct PrimGrad {
    color: [f64; 3],
    opacity: f64,
    u0: f64,
    v0: f64,
    sigma: f64,
    z: f64,
}

impl PrimGrad {
    fn add(&mut self, other: &PrimGrad) {
        for ch in 0..3 {
            self.color[ch] += other.color[ch];
        }
        self.opacity += other.opacity;
        self.u0 += other.u0;
        self.v0 += other.v0;
        self.sigma += other.sigma;
        self.z += other.z;
    }
}

/// Partials of the unit-quaternion rotation matrix w.r.t. (w, x, y, z).
pub fn rotation_partials(q: &Vector4<f64>) -> [Matrix3<f64>; 4] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    [
        Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0,
        Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0,
        Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0,
        Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0,
    ]
}

/// Projects an ambient quaternion gradient onto the normalized map:
/// grad(q/|q|) = (I - q q^T) grad at |q| = 1.
fn project_quaternion_grad(q: &Vector4<f64>, grad: Vector4<f64>) -> Vector4<f64> {
    grad - q * q.dot(&grad)
}

fn pixel_backward(
    u: usize,
    v: usize,
    prims: &[SplatPrimitive],
    indices: impl Iterator<Item = usize> + Clone,
    upstream: &UpstreamGrads,
    contribs: &mut Vec<(usize, f64, f64, f64)>,
    out: &mut [PrimGrad],
    local_index: &dyn Fn(usize) -> usize,
) {
    let gc = upstream.d_color.get(u, v);
    let gd = *upstream.d_depth.get(u, v);
    let gs = *upstream.d_silhouette.get(u, v);
    if gc[0] == 0.0 && gc[1] == 0.0 && gc[2] == 0.0 && gd == 0.0 && gs == 0.0 {
        return;
    }
    contribs.clear();
    for_each_contribution(u as f64, v as f64, prims, indices, |i, w, a, t| {
        contribs.push((i, w, a, t));
    });
    // Suffix sums over later contributions, needed for d alpha.
    let mut sc = [0.0; 3];
    let mut sd = 0.0;
    let mut ss = 0.0;
    for &(i, w, a, t) in contribs.iter().rev() {
        let p = &prims[i];
        let at = a * t;
        let one_minus_a = 1.0 - a;
        let mut da = 0.0;
        for ch in 0..3 {
            da += gc[ch] * (t * p.color[ch] - sc[ch] / one_minus_a);
        }
        da += gd * (t * p.z_cam - sd / one_minus_a);
        da += gs * (t - ss / one_minus_a);
        sc[0] += at * p.color[0];
        sc[1] += at * p.color[1];
        sc[2] += at * p.color[2];
        sd += at * p.z_cam;
        ss += at;

        let g = &mut out[local_index(i)];
        for ch in 0..3 {
            g.color[ch] += gc[ch] * at;
        }
        g.z += gd * at;
        // alpha = clamp(opacity * w, 0, ALPHA_MAX); saturated alphas pass no
        // gradient to opacity or footprint.
        if p.opacity * w < crate::render::ALPHA_MAX {
            g.opacity += da * w;
            // w = s^2 with s = (e - C) / (1 - C), e = exp(-q / 4 sigma^2).
            let floor = crate::render::KERNEL_FLOOR;
            let s = w.sqrt();
            let e = s * (1.0 - floor) + floor;
            let dw = da * p.opacity;
            let factor = dw * s * e / (1.0 - floor);
            let sigma2 = p.screen_sigma * p.screen_sigma;
            let du = u as f64 - p.screen_center.0;
            let dv = v as f64 - p.screen_center.1;
            g.u0 += factor * du / sigma2;
            g.v0 += factor * dv / sigma2;
            g.sigma += factor * (du * du + dv * dv) / (sigma2 * p.screen_sigma);
        }
    }
}

fn chain_prim_grads(scene: &PreparedScene, prim_grads: &[PrimGrad]) -> GradientBundle {
    let intr = &scene.intr;
    let f_mean = intr.f_mean();
    let mut bundle = GradientBundle::zeros(scene.n_gaussians);
    let view_q = scene.view.rotation.quaternion();
    let view_q = Vector4::new(view_q.w, view_q.i, view_q.j, view_q.k);
    let view_rot = scene.view.rotation_matrix();
    let view_partials = rotation_partials(&view_q);
    let mut d_view_q = Vector4::zeros();
    let mut d_view_t = Vector3::zeros();
    let mut d_owner_raw: BTreeMap<usize, (Vector4<f64>, Vector3<f64>)> = BTreeMap::new();

    for (p, g) in scene.primitives.iter().zip(prim_grads) {
        bundle.d_color[p.gaussian_index] = g.color;
        bundle.d_opacity[p.gaussian_index] = g.opacity;
        // sigma = f_mean * r / z, clamped below.
        let (d_sigma_dr, d_sigma_dz) = if p.sigma_clamped {
            (0.0, 0.0)
        } else {
            (
                f_mean / p.z_cam,
                -f_mean * (p.screen_sigma * p.z_cam / f_mean) / (p.z_cam * p.z_cam),
            )
        };
        bundle.d_radius[p.gaussian_index] = g.sigma * d_sigma_dr;
        let g_z_total = g.z + g.sigma * d_sigma_dz;
        // Projection u0 = fx px/pz + cx, v0 = fy py/pz + cy, z = pz.
        let pc = p.cam_point;
        let g_pc = Vector3::new(
            g.u0 * intr.fx / pc.z,
            g.v0 * intr.fy / pc.z,
            -g.u0 * intr.fx * pc.x / (pc.z * pc.z) - g.v0 * intr.fy * pc.y / (pc.z * pc.z)
                + g_z_total,
        );
        if g_pc == Vector3::zeros() {
            continue;
        }
        // View pose: pc = R_v^T (x_w - t_v).
        let world_offset = view_rot * pc; // = x_w - t_v
        d_view_t -= view_rot * g_pc;
        for k in 0..4 {
            d_view_q[k] += g_pc.dot(&(view_partials[k].transpose() * world_offset));
        }
        // Owner pose: x_w = R_o a + t_o (only for pose-derived positions).
        if let Some(anchor) = p.anchor_cam {
            let g_xw = view_rot * g_pc;
            let entry = d_owner_raw
                .entry(p.owner_frame)
                .or_insert((Vector4::zeros(), Vector3::zeros()));
            entry.1 += g_xw;
            let oq = scene.owner_poses[&p.owner_frame].rotation.quaternion();
            let oq = Vector4::new(oq.w, oq.i, oq.j, oq.k);
            let partials = rotation_partials(&oq);
            for k in 0..4 {
                entry.0[k] += g_xw.dot(&(partials[k] * anchor));
            }
        }
    }

    let qv = project_quaternion_grad(&view_q, d_view_q);
    bundle.d_view = [qv[0], qv[1], qv[2], qv[3], d_view_t[0], d_view_t[1], d_view_t[2]];
    for (frame, (dq, dt)) in d_owner_raw {
        let oq = scene.owner_poses[&frame].rotation.quaternion();
        let oq = Vector4::new(oq.w, oq.i, oq.j, oq.k);
        let dq = project_quaternion_grad(&oq, dq);
        bundle
            .d_owner
            .insert(frame, [dq[0], dq[1], dq[2], dq[3], dt[0], dt[1], dt[2]]);
    }
    bundle
}

fn check_shapes(scene: &PreparedScene, upstream: &UpstreamGrads) -> Result<()> {
    if upstream.d_color.width() != scene.intr.width
        || upstream.d_color.height() != scene.intr.height
        || !upstream.d_color.same_shape(&upstream.d_depth)
        || !upstream.d_color.same_shape(&upstream.d_silhouette)
    {
        return Err(Error::InvalidInput(
            "upstream gradient shape does not match render output".into(),
        ));
    }
    Ok(())
}

/// Reference backward: single pass over all pixels against the full list.
pub fn backward_naive(scene: &PreparedScene, upstream: &UpstreamGrads) -> Result<GradientBundle> {
    check_shapes(scene, upstream)?;
    let prims = &scene.primitives;
    let mut grads = vec![PrimGrad::default(); prims.len()];
    let mut contribs = Vec::new();
    for v in 0..scene.intr.height {
        for u in 0..scene.intr.width {
            pixel_backward(
                u,
                v,
                prims,
                0..prims.len(),
                upstream,
                &mut contribs,
                &mut grads,
                &|i| i,
            );
        }
    }
    Ok(chain_prim_grads(scene, &grads))
}

/// Tile-parallel backward. Each tile accumulates into a private buffer over
/// its binned primitives; buffers are merged in fixed tile order so results
/// are reproducible run-to-run.
pub fn backward_tiled(scene: &PreparedScene, upstream: &UpstreamGrads) -> Result<GradientBundle> {
    check_shapes(scene, upstream)?;
    let intr = &scene.intr;
    let prims = &scene.primitives;
    let grid = bin_primitives(prims, intr);
    let tile_grads: Vec<Vec<PrimGrad>> = (0..grid.bins.len())
        .into_par_iter()
        .map(|tile| {
            let bin = &grid.bins[tile];
            let mut grads = vec![PrimGrad::default(); bin.len()];
            if bin.is_empty() {
                return grads;
            }
            // Map global primitive index to position within this bin.
            let lookup: std::collections::HashMap<usize, usize> =
                bin.iter().enumerate().map(|(j, &i)| (i, j)).collect();
            let tx = tile % grid.tiles_x;
            let ty = tile / grid.tiles_x;
            let mut contribs = Vec::new();
            for v in ty * crate::render::TILE_SIZE
                ..((ty + 1) * crate::render::TILE_SIZE).min(intr.height)
            {
                for u in tx * crate::render::TILE_SIZE
                    ..((tx + 1) * crate::render::TILE_SIZE).min(intr.width)
                {
                    pixel_backward(
                        u,
                        v,
                        prims,
                        bin.iter().copied(),
                        upstream,
                        &mut contribs,
                        &mut grads,
                        &|i| lookup[&i],
                    );
                }
            }
            grads
        })
        .collect();
    let mut merged = vec![PrimGrad::default(); prims.len()];
    for (tile, grads) in tile_grads.iter().enumerate() {
        for (&prim_idx, g) in grid.bins[tile].iter().zip(grads) {
            merged[prim_idx].add(g);
        }
    }
    Ok(chain_prim_grads(scene, &merged))
}

pub mod fd {
    //! Central finite-difference oracle over the full render-plus-loss path.
    //! Used by the `gradcheck` command and the gradient test suites.

    use super::*;
    use crate::geometry::Pose;
    use crate::render::{prepare_primitives, splat_naive, GaussianSet, PositionSource, RenderOutput};
    use crate::types::Gaussian;

    /// A micro-scene: Gaussians owned by pose-indexed frames, rendered from a
    /// view pose.
    pub struct MicroScene {
        pub gaussians: Vec<Gaussian>,
        pub owner_poses: Vec<Pose>,
        pub view: Pose,
        pub intr: CameraIntrinsics,
    }

    impl MicroScene {
        pub fn render(&self) -> Result<(PreparedScene, RenderOutput)> {
            let scene = prepare_primitives(
                &[GaussianSet {
                    gaussians: &self.gaussians,
                    positions: PositionSource::Poses(&self.owner_poses),
                }],
                &self.view,
                &self.intr,
            )?;
            let out = splat_naive(&scene.primitives, &self.intr);
            Ok((scene, out))
        }
    }

    /// Scalar loss with fixed per-pixel weights; linear in the render output,
    /// so its per-pixel gradient is the weight image itself.
    pub fn weighted_loss(out: &RenderOutput, weights: &UpstreamGrads) -> f64 {
        let mut total = 0.0;
        for (i, c) in out.color.as_slice().iter().enumerate() {
            let wc = weights.d_color.as_slice()[i];
            total += c[0] * wc[0] + c[1] * wc[1] + c[2] * wc[2];
            total += out.depth.as_slice()[i] * weights.d_depth.as_slice()[i];
            total += out.silhouette.as_slice()[i] * weights.d_silhouette.as_slice()[i];
        }
        total
    }

    fn loss_of(scene: &MicroScene, weights: &UpstreamGrads) -> f64 {
        let (_, out) = scene.render().expect("render failed in finite differences");
        weighted_loss(&out, weights)
    }

    fn central_diff(mut eval: impl FnMut(f64) -> f64, x: f64, eps: f64) -> f64 {
        (eval(x + eps) - eval(x - eps)) / (2.0 * eps)
    }

    /// Finite-difference gradients for every learnable parameter of the scene.
    /// Pose parameters are perturbed in ambient coordinates; the render path
    /// renormalizes, matching the analytic projected gradient.
    pub struct FdBundle {
        pub d_color: Vec<[f64; 3]>,
        pub d_radius: Vec<f64>,
        pub d_opacity: Vec<f64>,
        pub d_view: [f64; 7],
        pub d_owner: Vec<[f64; 7]>,
    }

    pub fn finite_difference(
        scene: &MicroScene,
        weights: &UpstreamGrads,
        eps: f64,
    ) -> FdBundle {
        let n = scene.gaussians.len();
        let mut d_color = vec![[0.0; 3]; n];
        let mut d_radius = vec![0.0; n];
        let mut d_opacity = vec![0.0; n];
        let mut work = MicroScene {
            gaussians: scene.gaussians.clone(),
            owner_poses: scene.owner_poses.clone(),
            view: scene.view,
            intr: scene.intr,
        };
        for i in 0..n {
            for ch in 0..3 {
                let x0 = scene.gaussians[i].color[ch];
                d_color[i][ch] = central_diff(
                    |x| {
                        work.gaussians[i].color[ch] = x;
                        let l = loss_of(&work, weights);
                        work.gaussians[i].color[ch] = x0;
                        l
                    },
                    x0,
                    eps,
                );
            }
            let r0 = scene.gaussians[i].radius;
            d_radius[i] = central_diff(
                |x| {
                    work.gaussians[i].radius = x;
                    let l = loss_of(&work, weights);
                    work.gaussians[i].radius = r0;
                    l
                },
                r0,
                eps,
            );
            let o0 = scene.gaussians[i].opacity;
            d_opacity[i] = central_diff(
                |x| {
                    work.gaussians[i].opacity = x;
                    let l = loss_of(&work, weights);
                    work.gaussians[i].opacity = o0;
                    l
                },
                o0,
                eps,
            );
        }
        let mut d_view = [0.0; 7];
        let view0 = scene.view.to_params();
        for k in 0..7 {
            d_view[k] = central_diff(
                |x| {
                    let mut p = view0;
                    p[k] = x;
                    work.view = Pose::from_params(&p);
                    let l = loss_of(&work, weights);
                    work.view = scene.view;
                    l
                },
                view0[k],
                eps,
            );
        }
        let mut d_owner = Vec::with_capacity(scene.owner_poses.len());
        for (oi, pose) in scene.owner_poses.iter().enumerate() {
            let p0 = pose.to_params();
            let mut grad = [0.0; 7];
            for k in 0..7 {
                grad[k] = central_diff(
                    |x| {
                        let mut p = p0;
                        p[k] = x;
                        work.owner_poses[oi] = Pose::from_params(&p);
                        let l = loss_of(&work, weights);
                        work.owner_poses[oi] = *pose;
                        l
                    },
                    p0[k],
                    eps,
                );
            }
            d_owner.push(grad);
        }
        FdBundle {
            d_color,
            d_radius,
            d_opacity,
            d_view,
            d_owner,
        }
    }

    /// Random micro-scene for gradient checking. Footprints are kept at or
    /// above a pixel so central differences at eps = 1e-4 converge.
    pub fn random_micro_scene(rng: &mut impl rand::Rng, n: usize) -> MicroScene {
        use rand::{Rng, RngCore};
        let intr = CameraIntrinsics::new(25.0, 26.0, 8.0, 8.0, 16, 16, 5000.0).unwrap();
        // Depths sit on a jittered grid with clear separation: compositing
        // order is discrete, so near-ties in depth would flip it under the
        // finite-difference perturbation.
        let gaussians = (0..n)
            .map(|i| Gaussian {
                color: [
                    rng.gen_range(0.1..0.9),
                    rng.gen_range(0.1..0.9),
                    rng.gen_range(0.1..0.9),
                ],
                radius: rng.gen_range(0.2..0.4),
                opacity: rng.gen_range(0.1..0.8),
                owner_frame: rng.gen_range(0..2),
                pixel: (rng.gen_range(1..15), rng.gen_range(1..15)),
                anchor_depth: 1.0 + i as f64 * 0.08 + rng.gen_range(0.0..0.03),
            })
            .collect();
        let small_pose = |rng: &mut dyn RngCore| {
            let axis = nalgebra::Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                1.0,
            );
            Pose::new(
                nalgebra::UnitQuaternion::from_scaled_axis(axis * 0.005),
                nalgebra::Vector3::new(
                    rng.gen_range(-0.005..0.005),
                    rng.gen_range(-0.005..0.005),
                    rng.gen_range(-0.005..0.005),
                ),
            )
        };
        MicroScene {
            gaussians,
            owner_poses: vec![small_pose(rng), small_pose(rng)],
            view: small_pose(rng),
            intr,
        }
    }

    /// Random per-pixel upstream weights in [-1, 1].
    pub fn random_upstream(rng: &mut impl rand::Rng, w: usize, h: usize) -> UpstreamGrads {
        let mut up = UpstreamGrads::zeros(w, h);
        for c in up.d_color.as_mut_slice() {
            *c = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
        }
        for d in up.d_depth.as_mut_slice() {
            *d = rng.gen_range(-1.0..1.0);
        }
        for s in up.d_silhouette.as_mut_slice() {
            *s = rng.gen_range(-1.0..1.0);
        }
        up
    }

    /// Runs one seeded gradient check; returns the max relative error across
    /// all parameter families.
    pub fn check_random_scene(seed: u64, n_gaussians: usize, eps: f64) -> Result<f64> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let scene = random_micro_scene(&mut rng, n_gaussians);
        let up = random_upstream(&mut rng, scene.intr.width, scene.intr.height);
        let (prepared, _) = scene.render()?;
        let analytic = super::backward_naive(&prepared, &up)?;
        if !analytic.is_finite() {
            return Err(Error::InvalidState("non-finite analytic gradient".into()));
        }
        let numeric = finite_difference(&scene, &up, eps);
        // Floor for near-zero components, sized to the bundle: central
        // differences carry O(eps^2 * f''') truncation noise, so components
        // far below the dominant gradient magnitude are judged on a
        // magnitude-scaled absolute tolerance instead of a pure ratio.
        let mut scale = 0.0f64;
        for i in 0..n_gaussians {
            for ch in 0..3 {
                scale = scale.max(analytic.d_color[i][ch].abs());
            }
            scale = scale.max(analytic.d_radius[i].abs());
            scale = scale.max(analytic.d_opacity[i].abs());
        }
        for k in 0..7 {
            scale = scale.max(analytic.d_view[k].abs());
        }
        let floor = (1e-2 * scale).max(1e-8);
        let mut max_err = 0.0f64;
        for i in 0..n_gaussians {
            for ch in 0..3 {
                max_err =
                    max_err.max(rel_err(analytic.d_color[i][ch], numeric.d_color[i][ch], floor));
            }
            max_err = max_err.max(rel_err(analytic.d_radius[i], numeric.d_radius[i], floor));
            max_err = max_err.max(rel_err(analytic.d_opacity[i], numeric.d_opacity[i], floor));
        }
        for k in 0..7 {
            max_err = max_err.max(rel_err(analytic.d_view[k], numeric.d_view[k], floor));
        }
        for (frame, grad) in &analytic.d_owner {
            for k in 0..7 {
                max_err = max_err.max(rel_err(grad[k], numeric.d_owner[*frame][k], floor));
            }
        }
        Ok(max_err)
    }

    /// Error metric compared against the 1e-3 gate: relative error with the
    /// denominator floored at `floor` so negligible components are held to a
    /// scaled absolute tolerance rather than a pure ratio.
    pub fn rel_err(analytic: f64, fd: f64, floor: f64) -> f64 {
        (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(floor)
    }
}
