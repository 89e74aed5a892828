//! Adam with per-group learning rates and the post-step constraints the
//! representation needs (opacity clamp, radius floor, quaternion renorm).

use crate::geometry::Pose;
use crate::types::{Gaussian, Section};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;
pub const RADIUS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One Adam update over a flat parameter group.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * grads[i];
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * grads[i] * grads[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
    }
}

/// Learning rates for Gaussian attributes and poses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearningRates {
    pub color: f64,
    pub radius: f64,
    pub opacity: f64,
    pub rotation: f64,
    pub translation: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            color: 0.0025,
            radius: 0.005,
            opacity: 0.05,
            rotation: 0.0004,
            translation: 0.002,
        }
    }
}

/// Adam moments for the three attribute groups of one section.
#[derive(Debug)]
pub struct SectionOptimizer {
    color: AdamState,
    radius: AdamState,
    opacity: AdamState,
}

impl SectionOptimizer {
    pub fn new(n_gaussians: usize) -> Self {
        Self {
            color: AdamState::new(3 * n_gaussians),
            radius: AdamState::new(n_gaussians),
            opacity: AdamState::new(n_gaussians),
        }
    }

    /// Steps section attributes in place and applies the post-step clamps.
    pub fn step(
        &mut self,
        section: &mut Section,
        d_color: &[[f64; 3]],
        d_radius: &[f64],
        d_opacity: &[f64],
        lr: &LearningRates,
    ) {
        self.step_gaussians(&mut section.gaussians, d_color, d_radius, d_opacity, lr);
    }

    /// Slice form of `step` for callers that hold the Gaussians directly.
    pub fn step_gaussians(
        &mut self,
        gaussians: &mut [Gaussian],
        d_color: &[[f64; 3]],
        d_radius: &[f64],
        d_opacity: &[f64],
        lr: &LearningRates,
    ) {
        let n = gaussians.len();
        assert_eq!(d_radius.len(), n);
        let mut colors: Vec<f64> = gaussians.iter().flat_map(|g| g.color).collect();
        let color_grads: Vec<f64> = d_color.iter().flatten().copied().collect();
        self.color.step(&mut colors, &color_grads, lr.color);
        let mut radii: Vec<f64> = gaussians.iter().map(|g| g.radius).collect();
        self.radius.step(&mut radii, d_radius, lr.radius);
        let mut opacities: Vec<f64> = gaussians.iter().map(|g| g.opacity).collect();
        self.opacity.step(&mut opacities, d_opacity, lr.opacity);
        for (i, g) in gaussians.iter_mut().enumerate() {
            g.color = [
                colors[3 * i].clamp(0.0, 1.0),
                colors[3 * i + 1].clamp(0.0, 1.0),
                colors[3 * i + 2].clamp(0.0, 1.0),
            ];
            g.radius = radii[i].max(RADIUS_FLOOR);
            g.opacity = opacities[i].clamp(0.0, 1.0);
        }
    }
}

/// Adam moments for one pose: rotation (ambient quaternion) and translation
/// stepped with separate learning rates, then renormalized.
#[derive(Debug)]
pub struct PoseOptimizer {
    rotation: AdamState,
    translation: AdamState,
}

impl PoseOptimizer {
    pub fn new() -> Self {
        Self {
            rotation: AdamState::new(4),
            translation: AdamState::new(3),
        }
    }

    pub fn step(&mut self, pose: &mut Pose, grad: &[f64; 7], lr: &LearningRates) {
        let mut p = pose.to_params();
        let (q, t) = p.split_at_mut(4);
        self.rotation.step(q, &grad[..4], lr.rotation);
        self.translation.step(t, &grad[4..], lr.translation);
        *pose = Pose::from_params(&p);
        debug_assert!((pose.rotation.quaternion().norm() - 1.0).abs() < 1e-9);
    }
}

impl Default for PoseOptimizer {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut state = AdamState::new(3);
        let mut params = [1.0, -2.0, 0.5];
        state.step(&mut params, &[0.0; 3], 0.1);
        assert_eq!(params, [1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_is_lr_sized() {
        // With constant gradient g, the bias-corrected first step is
        // -lr * g / (|g| + eps) = -lr * sign(g) up to eps.
        let mut state = AdamState::new(2);
        let mut params = [0.0, 0.0];
        state.step(&mut params, &[3.0, -0.25], 0.01);
        assert!((params[0] + 0.01).abs() < 1e-6);
        assert!((params[1] - 0.01).abs() < 1e-6);
    }

    #[test]
    fn paper_learning_rate_table() {
        let lr = LearningRates::default();
        assert_eq!(lr.color, 0.0025);
        assert_eq!(lr.radius, 0.005);
        assert_eq!(lr.opacity, 0.05);
    }

    #[test]
    fn pose_step_keeps_quaternion_unit() {
        let mut pose = Pose::identity();
        let mut opt = PoseOptimizer::new();
        let lr = LearningRates::default();
        for _ in 0..50 {
            opt.step(&mut pose, &[0.3, -0.2, 0.1, 0.4, 1.0, -1.0, 0.5], &lr);
            assert!((pose.rotation.quaternion().norm() - 1.0).abs() < 1e-9);
        }
        assert!(pose.translation.norm() > 0.0);
    }

    #[test]
    fn section_step_applies_constraints() {
        let mut section = Section::new(0, 0);
        section.gaussians.push(crate::types::Gaussian {
            color: [0.999, 0.001, 0.5],
            radius: 2e-6,
            opacity: 0.999,
            owner_frame: 0,
            pixel: (0, 0),
            anchor_depth: 1.0,
        });
        let mut opt = SectionOptimizer::new(1);
        let lr = LearningRates {
            color: 0.5,
            radius: 0.5,
            opacity: 0.5,
            ..LearningRates::default()
        };
        opt.step(
            &mut section,
            &[[-(1.0), 1.0, 0.0]],
            &[1.0],
            &[-1.0],
            &lr,
        );
        let g = &section.gaussians[0];
        assert_eq!(g.color[0], 1.0); // clamped up
        assert_eq!(g.color[1], 0.0); // clamped down
        assert_eq!(g.radius, RADIUS_FLOOR);
        assert_eq!(g.opacity, 1.0);
    }
}
