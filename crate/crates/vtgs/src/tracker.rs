//! Camera tracking: constant-speed initialization, overlapping-section
//! selection with pre-tracking, and iterative pose optimization of the
//! tracking objective.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::{back_project, CameraIntrinsics, Pose};
use crate::grad::backward_tiled;
use crate::loss::{tracking_loss, TrackingWeights};
use crate::optim::{LearningRates, PoseOptimizer};
use crate::render::{render_view, GaussianSet, PositionSource};
use crate::types::{Frame, Section};
use crate::visibility::{section_visibility_mask, tracking_mask, visible, RefView};

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerConfig {
    pub weights: TrackingWeights,
    pub iterations: usize,
    pub pretrack_iterations: usize,
    /// Candidate view spacing N1.
    pub candidate_interval: usize,
    /// Minimum visible fraction gamma for a candidate view.
    pub overlap_threshold: f64,
    pub max_candidate_sections: usize,
    /// Include the visibility term in the tracking mask W_i; disabling it
    /// is the paper's ablation, kept for directional tests.
    pub use_visibility: bool,
    pub lr: LearningRates,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            weights: TrackingWeights::replica(),
            iterations: 40,
            pretrack_iterations: 10,
            candidate_interval: 5,
            overlap_threshold: 0.26,
            max_candidate_sections: 3,
            use_visibility: true,
            lr: LearningRates::default(),
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.candidate_interval == 0 {
            return Err(Error::Config(
                "tracker iterations and candidate interval must be >= 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.overlap_threshold) {
            return Err(Error::Config("overlap threshold must lie in [0,1]".into()));
        }
        Ok(())
    }
}

/// Constant-speed pose prediction: p_{i-1} composed with the last relative
/// motion p_{i-2}^{-1} p_{i-1}. A single prior pose is returned unchanged.
pub fn init_pose(history: &[Pose]) -> Result<Pose> {
    match history {
        [] => Err(Error::InvalidState(
            "constant-speed init requires at least one prior pose".into(),
        )),
        [p] => Ok(*p),
        [.., a, b] => Ok(b.compose(&a.inverse().compose(b))),
    }
}

/// Outcome of one tracking run; `loss_curve` holds the loss before each step.
#[derive(Debug, Clone)]
pub struct TrackResult {
    pub pose: Pose,
    pub best_loss: f64,
    pub loss_curve: Vec<f64>,
    /// Fraction of frame pixels inside W_i at the best iterate.
    pub mask_fraction: f64,
    /// True when the visibility term had to be dropped to obtain a mask.
    pub vis_fallback: bool,
}

/// Optimizes the view pose against a fixed Gaussian set, recomputing W_i each
/// iteration. Returns the best iterate, not the last.
pub fn optimize_pose<'a>(
    frame: &Frame,
    init: &Pose,
    set: &GaussianSet<'_>,
    section: &Section,
    intr: &CameraIntrinsics,
    lookup: &(dyn Fn(usize) -> Option<RefView<'a>> + Sync),
    iterations: usize,
    weights: &TrackingWeights,
    lr: &LearningRates,
    use_visibility: bool,
) -> Result<TrackResult> {
    let mut pose = *init;
    let mut optim = PoseOptimizer::new();
    let mut best = TrackResult {
        pose,
        best_loss: f64::INFINITY,
        loss_curve: Vec::with_capacity(iterations),
        mask_fraction: 0.0,
        vis_fallback: false,
    };
    let total_px = (frame.width() * frame.height()) as f64;
    for it in 0..iterations {
        let (scene, render) = render_view(std::slice::from_ref(set), &pose, intr)?;
        let vis = if use_visibility {
            section_visibility_mask(frame, &pose, section, intr, |i| lookup(i))
        } else {
            crate::image_buf::MaskImage::new(frame.width(), frame.height(), true)
        };
        let mut mask = tracking_mask(frame, &render, &vis);
        let mut fallback = false;
        if mask.count_true() == 0 {
            // Degenerate-view fallback: retry without the visibility term.
            let full = crate::image_buf::MaskImage::new(frame.width(), frame.height(), true);
            mask = tracking_mask(frame, &render, &full);
            fallback = true;
            if mask.count_true() == 0 {
                if it == 0 {
                    return Err(Error::DegenerateView {
                        frame: frame.index,
                        msg: "tracking mask empty even without visibility term".into(),
                    });
                }
                break;
            }
        }
        let (loss, upstream) = tracking_loss(frame, &render, &mask, weights)?;
        best.loss_curve.push(loss);
        if loss < best.best_loss {
            best.best_loss = loss;
            best.pose = pose;
            best.mask_fraction = mask.count_true() as f64 / total_px;
            best.vis_fallback = fallback;
        }
        let grads = backward_tiled(&scene, &upstream)?;
        optim.step(&mut pose, &grads.d_view, lr);
    }
    Ok(best)
}

/// The section chosen for head-frame tracking plus selection diagnostics.
#[derive(Debug, Clone)]
pub struct OverlapChoice {
    /// Index into the frozen-section slice passed in.
    pub section_idx: usize,
    pub pretrack_loss: f64,
    /// True when no candidate passed the gamma filter and the most recent
    /// frozen section was used instead.
    pub gamma_fallback: bool,
}

/// Visible fraction of `frame`'s valid depth (sampled on a stride-4 grid)
/// when back-projected from `pose` into the candidate view.
fn visible_fraction(
    points: &[Vector3<f64>],
    candidate: &RefView<'_>,
    intr: &CameraIntrinsics,
) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let n = points
        .iter()
        .filter(|p| visible(p, candidate.pose, candidate.depth, intr))
        .count();
    n as f64 / points.len() as f64
}

/// Back-projects the frame on a stride-4 grid and returns the fraction of
/// points visible in each candidate view, in the order given. Lets callers
/// run the gamma filter without materializing whole sections.
pub fn overlap_fractions(
    frame: &Frame,
    pose: &Pose,
    candidates: &[RefView<'_>],
    intr: &CameraIntrinsics,
) -> Vec<f64> {
    let points = sample_points(frame, pose, intr);
    candidates
        .iter()
        .map(|rv| visible_fraction(&points, rv, intr))
        .collect()
}

fn sample_points(frame: &Frame, pose: &Pose, intr: &CameraIntrinsics) -> Vec<Vector3<f64>> {
    let mut pts = Vec::new();
    for v in (0..frame.height()).step_by(4) {
        for u in (0..frame.width()).step_by(4) {
            let d = *frame.depth.get(u, v);
            if d > 0.0 {
                if let Ok(p) = back_project((u as f64, v as f64), d, intr, pose) {
                    pts.push(p);
                }
            }
        }
    }
    pts
}

/// Selects the overlapping section S^o for a head frame: gamma-filter the
/// candidate views, keep the most-front `max_candidate_sections` sections,
/// pre-track against each, and return the argmin of the final loss.
pub fn select_overlap_section<'a>(
    head: &Frame,
    init: &Pose,
    frozen: &[&Section],
    intr: &CameraIntrinsics,
    lookup: &(dyn Fn(usize) -> Option<RefView<'a>> + Sync),
    cfg: &TrackerConfig,
) -> Result<OverlapChoice> {
    if frozen.is_empty() {
        return Err(Error::InvalidState(
            "overlap selection requires at least one frozen section".into(),
        ));
    }
    let points = sample_points(head, init, intr);
    // Candidate views: every N1-th frame before the head.
    let mut passing_sections: Vec<usize> = Vec::new();
    let mut j = 0;
    while j < head.index {
        if let Some(rv) = lookup(j) {
            if visible_fraction(&points, &rv, intr) > cfg.overlap_threshold {
                if let Some(si) = frozen.iter().position(|s| s.frame_indices.contains(&j)) {
                    if !passing_sections.contains(&si) {
                        passing_sections.push(si);
                    }
                }
            }
        }
        j += cfg.candidate_interval;
    }
    passing_sections.sort_unstable();
    let mut gamma_fallback = false;
    if passing_sections.is_empty() {
        log::warn!(
            "frame {}: no candidate view passed gamma={}, falling back to most recent frozen section",
            head.index,
            cfg.overlap_threshold
        );
        passing_sections.push(frozen.len() - 1);
        gamma_fallback = true;
    }
    passing_sections.truncate(cfg.max_candidate_sections);
    let mut best: Option<(usize, f64)> = None;
    for &si in &passing_sections {
        let section = frozen[si];
        let baked = section.baked_positions.as_deref().ok_or_else(|| {
            Error::InvalidState(format!("frozen section {} has no baked positions", section.id))
        })?;
        let set = GaussianSet {
            gaussians: &section.gaussians,
            positions: PositionSource::Baked(baked),
        };
        let result = optimize_pose(
            head,
            init,
            &set,
            section,
            intr,
            lookup,
            cfg.pretrack_iterations,
            &cfg.weights,
            &cfg.lr,
            cfg.use_visibility,
        );
        let loss = match result {
            Ok(r) => r.best_loss,
            Err(Error::DegenerateView { .. }) => f64::INFINITY,
            Err(e) => return Err(e),
        };
        if best.map_or(true, |(_, l)| loss < l) {
            best = Some((si, loss));
        }
    }
    let (section_idx, pretrack_loss) = best.expect("at least one candidate evaluated");
    Ok(OverlapChoice {
        section_idx,
        pretrack_loss,
        gamma_fallback,
    })
}

/// Tracks one frame against the given target section (S^o for head frames,
/// the active section S_k for regular frames).
pub fn track_frame<'a>(
    frame: &Frame,
    init: &Pose,
    set: &GaussianSet<'_>,
    section: &Section,
    intr: &CameraIntrinsics,
    lookup: &(dyn Fn(usize) -> Option<RefView<'a>> + Sync),
    cfg: &TrackerConfig,
) -> Result<TrackResult> {
    cfg.validate()?;
    optimize_pose(
        frame,
        init,
        set,
        section,
        intr,
        lookup,
        cfg.iterations,
        &cfg.weights,
        &cfg.lr,
        cfg.use_visibility,
    )
}
