//! SLAM orchestration: section lifecycle, per-frame tracking and mapping,
//! frozen-section offload under a residency budget, trajectory output, and
//! run evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::eval::{ate_rmse, depth_l1, psnr, Report};
use crate::geometry::{CameraIntrinsics, Pose};
use crate::image_buf::{GrayImage, RgbImage};
use crate::loss::ssim;
use crate::mapper::{freeze_section, init_gaussians, map_head_frame, map_regular_frame};
use crate::render::{render_view, GaussianSet, PositionSource};
use crate::section_io::{quantize, read_section, write_section};
use crate::tracker::{init_pose, optimize_pose, overlap_fractions, track_frame};
use crate::types::{Frame, Section};
use crate::visibility::{reference_frames, RefView};

/// One section's registry entry. The section body may be evicted to disk;
/// the lightweight metadata always stays resident.
#[derive(Debug)]
struct Slot {
    head: usize,
    /// Last frame index covered (inclusive).
    last: usize,
    /// Section id of the overlap section S^o used when mapping this
    /// section's head frame.
    overlap: Option<usize>,
    n_gaussians: usize,
    section: Option<Section>,
    path: Option<PathBuf>,
}

const DIAGNOSTICS_HEADER: &str =
    "frame\tkind\ttrack_loss\tmask_frac\tvis_fallback\tmap_loss\tgaussians\tresident_gaussians";

pub struct SlamState {
    pub cfg: RunConfig,
    pub intr: CameraIntrinsics,
    pub poses: Vec<Pose>,
    pub timestamps: Vec<f64>,
    slots: Vec<Slot>,
    /// Frames of the active section, parallel to its frame list.
    active_frames: Vec<Frame>,
    /// Retained depth maps: all active-section frames plus, for frozen
    /// sections, the candidate views (every N1-th frame) and the
    /// head/middle/last reference frames.
    depths: BTreeMap<usize, GrayImage>,
    /// Resident frozen section ids, least recently used first.
    lru: Vec<usize>,
    offload_dir: Option<PathBuf>,
    rng: ChaCha8Rng,
    /// Set when tracking failed on some frame and the constant-speed pose
    /// was kept; processing continues.
    pub diverged: bool,
    pub diagnostics: Vec<String>,
    pub max_resident_gaussians: usize,
    pub max_resident_sections: usize,
    track_seconds: f64,
    map_seconds: f64,
    tracked_frames: usize,
    mapped_frames: usize,
}

fn baked_set(section: &Section) -> Result<GaussianSet<'_>> {
    let baked = section.baked_positions.as_deref().ok_or_else(|| {
        Error::InvalidState(format!("section {} has no baked positions", section.id))
    })?;
    Ok(GaussianSet {
        gaussians: &section.gaussians,
        positions: PositionSource::Baked(baked),
    })
}

fn luminance(img: &RgbImage) -> GrayImage {
    let mut out = GrayImage::new(img.width(), img.height(), 0.0);
    for (dst, src) in out.as_mut_slice().iter_mut().zip(img.as_slice()) {
        *dst = (src[0] + src[1] + src[2]) / 3.0;
    }
    out
}

impl SlamState {
    pub fn new(
        cfg: RunConfig,
        intr: CameraIntrinsics,
        offload_dir: Option<PathBuf>,
    ) -> Result<Self> {
        cfg.validate()?;
        if let Some(dir) = &offload_dir {
            std::fs::create_dir_all(dir)?;
        }
        let seed = cfg.seed;
        Ok(Self {
            cfg,
            intr,
            poses: Vec::new(),
            timestamps: Vec::new(),
            slots: Vec::new(),
            active_frames: Vec::new(),
            depths: BTreeMap::new(),
            lru: Vec::new(),
            offload_dir: None.or(offload_dir),
            rng: ChaCha8Rng::seed_from_u64(seed),
            diverged: false,
            diagnostics: vec![DIAGNOSTICS_HEADER.to_string()],
            max_resident_gaussians: 0,
            max_resident_sections: 0,
            track_seconds: 0.0,
            map_seconds: 0.0,
            tracked_frames: 0,
            mapped_frames: 0,
        })
    }

    pub fn n_sections(&self) -> usize {
        self.slots.len()
    }

    pub fn total_gaussians(&self) -> usize {
        self.slots.iter().map(|s| s.n_gaussians).sum()
    }

    pub fn section_gaussian_counts(&self) -> Vec<usize> {
        self.slots.iter().map(|s| s.n_gaussians).collect()
    }

    pub fn section_of_frame(&self, frame: usize) -> Option<usize> {
        self.slots.iter().position(|s| (s.head..=s.last).contains(&frame))
    }

    /// The S^o section id recorded for the given section's head mapping.
    pub fn overlap_of_section(&self, section: usize) -> Option<usize> {
        self.slots.get(section).and_then(|s| s.overlap)
    }

    pub fn track_seconds_per_frame(&self) -> f64 {
        if self.tracked_frames == 0 {
            0.0
        } else {
            self.track_seconds / self.tracked_frames as f64
        }
    }

    pub fn map_seconds_per_frame(&self) -> f64 {
        if self.mapped_frames == 0 {
            0.0
        } else {
            self.map_seconds / self.mapped_frames as f64
        }
    }

    fn note_residency(&mut self) {
        let mut gaussians = 0;
        let mut sections = 0;
        for slot in &self.slots {
            if let Some(sec) = &slot.section {
                gaussians += sec.gaussians.len();
                sections += 1;
            }
        }
        self.max_resident_gaussians = self.max_resident_gaussians.max(gaussians);
        self.max_resident_sections = self.max_resident_sections.max(sections);
    }

    /// Evicts least-recently-used frozen sections beyond the residency
    /// budget, skipping pinned ids. Sections are written to the offload
    /// directory on first eviction; without one, everything stays resident.
    fn evict_excess(&mut self, pinned: &[usize]) -> Result<()> {
        if self.offload_dir.is_none() {
            return Ok(());
        }
        loop {
            let resident = self
                .slots
                .iter()
                .filter(|s| s.section.as_ref().is_some_and(|sec| sec.is_frozen()))
                .count();
            if resident <= self.cfg.residency_budget {
                return Ok(());
            }
            let Some(victim) = self
                .lru
                .iter()
                .copied()
                .find(|id| !pinned.contains(id) && self.slots[*id].section.is_some())
            else {
                return Ok(());
            };
            if self.slots[victim].path.is_none() {
                let dir = self.offload_dir.as_ref().expect("checked above");
                let path = dir.join(format!("section_{victim:04}.vtgs"));
                write_section(self.slots[victim].section.as_ref().unwrap(), &path)?;
                self.slots[victim].path = Some(path);
            }
            self.slots[victim].section = None;
            self.lru.retain(|&x| x != victim);
        }
    }

    /// Makes a frozen section resident, marking it most recently used.
    fn fetch(&mut self, id: usize, pinned: &[usize]) -> Result<()> {
        if self.slots[id].section.is_none() {
            let path = self.slots[id].path.clone().ok_or_else(|| {
                Error::InvalidState(format!("section {id} evicted without an offload file"))
            })?;
            self.slots[id].section = Some(read_section(&path)?);
        }
        self.lru.retain(|&x| x != id);
        self.lru.push(id);
        self.evict_excess(pinned)?;
        self.note_residency();
        Ok(())
    }

    fn freeze_active(&mut self) -> Result<()> {
        let id = self.slots.len() - 1;
        {
            let (slots, poses) = (&mut self.slots, &self.poses);
            let sec = slots[id]
                .section
                .as_mut()
                .ok_or_else(|| Error::InvalidState("active section not resident".into()))?;
            freeze_section(sec, poses, &self.intr)?;
            quantize(sec);
            slots[id].n_gaussians = sec.gaussians.len();
        }
        let keep = reference_frames(self.slots[id].section.as_ref().unwrap());
        let (head, last) = (self.slots[id].head, self.slots[id].last);
        let n1 = self.cfg.tracker.candidate_interval;
        self.depths
            .retain(|&j, _| !(head..=last).contains(&j) || j % n1 == 0 || keep.contains(&j));
        self.lru.push(id);
        self.evict_excess(&[id])?;
        self.active_frames.clear();
        self.note_residency();
        Ok(())
    }

    /// Ingests the next frame. Frames must arrive in index order; frame 0
    /// gets the identity pose as the gauge.
    pub fn process_frame(&mut self, frame: Frame) -> Result<()> {
        if frame.index != self.poses.len() {
            return Err(Error::InvalidInput(format!(
                "out-of-order frame: got {}, expected {}",
                frame.index,
                self.poses.len()
            )));
        }
        if frame.index % self.cfg.mapper.section_length == 0 {
            self.head_frame(frame)
        } else {
            self.regular_frame(frame)
        }
    }

    fn head_frame(&mut self, frame: Frame) -> Result<()> {
        let i = frame.index;
        let first = self.slots.is_empty();
        let mut track_loss = f64::NAN;
        let mut mask_frac = f64::NAN;
        let mut vis_fallback = false;
        let mut overlap_id = None;
        let prev_id = if first {
            self.poses.push(Pose::identity());
            self.timestamps.push(frame.timestamp);
            None
        } else {
            self.freeze_active()?;
            let prev = self.slots.len() - 1;
            let t0 = Instant::now();
            let init = init_pose(&self.poses)?;
            let so_id = self.select_overlap(&frame, &init, prev)?;
            overlap_id = Some(so_id);
            self.fetch(so_id, &[so_id, prev])?;
            let result = {
                let (slots, poses, depths) = (&self.slots, &self.poses, &self.depths);
                let lookup =
                    |j: usize| depths.get(&j).map(|d| RefView { pose: &poses[j], depth: d });
                let sec = slots[so_id].section.as_ref().expect("just fetched");
                track_frame(
                    &frame,
                    &init,
                    &baked_set(sec)?,
                    sec,
                    &self.intr,
                    &lookup,
                    &self.cfg.tracker,
                )
            };
            let pose = self.resolve_track(result, &init, &mut track_loss, &mut mask_frac, &mut vis_fallback, i)?;
            self.poses.push(pose);
            self.timestamps.push(frame.timestamp);
            self.track_seconds += t0.elapsed().as_secs_f64();
            self.tracked_frames += 1;
            Some(prev)
        };
        let t0 = Instant::now();
        let mut section = Section::new(self.slots.len(), i);
        section.push_gaussians(init_gaussians(&frame, &self.intr))?;
        let map_loss = {
            let (slots, poses) = (&self.slots, &mut self.poses);
            let prev = prev_id.and_then(|id| slots[id].section.as_ref());
            let overlap = overlap_id
                .filter(|&o| Some(o) != prev_id)
                .and_then(|o| slots[o].section.as_ref());
            let mut cfg = self.cfg.mapper.clone();
            // Frame 0's identity pose is the gauge and is never adjusted.
            cfg.ba_enabled = cfg.ba_enabled && !first;
            map_head_frame(&frame, poses, &mut section, prev, overlap, &self.intr, &cfg)?
        };
        self.map_seconds += t0.elapsed().as_secs_f64();
        self.mapped_frames += 1;
        self.depths.insert(i, frame.depth.clone());
        let n_gaussians = section.gaussians.len();
        self.slots.push(Slot {
            head: i,
            last: i,
            overlap: overlap_id,
            n_gaussians,
            section: Some(section),
            path: None,
        });
        self.active_frames = vec![frame];
        self.note_residency();
        self.log_frame(i, "head", track_loss, mask_frac, vis_fallback, map_loss);
        Ok(())
    }

    /// Gamma-filters candidate views (every N1-th frame), keeps the
    /// most-front sections, pre-tracks against each, and returns the section
    /// id with the lowest pretrack loss. Falls back to the most recent
    /// frozen section when nothing passes the filter.
    fn select_overlap(&mut self, frame: &Frame, init: &Pose, prev_id: usize) -> Result<usize> {
        if self.cfg.head_track_previous_section {
            return Ok(prev_id);
        }
        let n1 = self.cfg.tracker.candidate_interval;
        let candidates: Vec<usize> = (0..frame.index)
            .step_by(n1)
            .filter(|j| self.depths.contains_key(j))
            .collect();
        let fractions = {
            let (poses, depths) = (&self.poses, &self.depths);
            let views: Vec<RefView<'_>> = candidates
                .iter()
                .map(|&j| RefView {
                    pose: &poses[j],
                    depth: &depths[&j],
                })
                .collect();
            overlap_fractions(frame, init, &views, &self.intr)
        };
        let mut passing: Vec<usize> = Vec::new();
        let mut best_fraction: BTreeMap<usize, f64> = BTreeMap::new();
        for (&j, &f) in candidates.iter().zip(&fractions) {
            if f > self.cfg.tracker.overlap_threshold {
                if let Some(sid) = self.section_of_frame(j) {
                    if self.slots[sid].section.as_ref().map_or(true, |s| s.is_frozen()) {
                        let e = best_fraction.entry(sid).or_insert(0.0);
                        *e = e.max(f);
                        if !passing.contains(&sid) {
                            passing.push(sid);
                        }
                    }
                }
            }
        }
        passing.sort_unstable();
        if passing.is_empty() {
            log::warn!(
                "frame {}: no candidate view passed gamma={}, using most recent frozen section",
                frame.index,
                self.cfg.tracker.overlap_threshold
            );
            return Ok(prev_id);
        }
        passing.truncate(self.cfg.tracker.max_candidate_sections);
        if self.cfg.overlap_reselect_by_fraction {
            return Ok(passing
                .iter()
                .copied()
                .max_by(|a, b| best_fraction[a].total_cmp(&best_fraction[b]))
                .expect("passing is non-empty"));
        }
        if passing.len() == 1 {
            return Ok(passing[0]);
        }
        for &sid in &passing {
            self.fetch(sid, &passing)?;
        }
        let (slots, poses, depths) = (&self.slots, &self.poses, &self.depths);
        let lookup = |j: usize| depths.get(&j).map(|d| RefView { pose: &poses[j], depth: d });
        let mut best = (passing[0], f64::INFINITY);
        for &sid in &passing {
            let sec = slots[sid].section.as_ref().expect("pinned resident");
            let result = optimize_pose(
                frame,
                init,
                &baked_set(sec)?,
                sec,
                &self.intr,
                &lookup,
                self.cfg.tracker.pretrack_iterations,
                &self.cfg.tracker.weights,
                &self.cfg.tracker.lr,
                self.cfg.tracker.use_visibility,
            );
            let loss = match result {
                Ok(r) => r.best_loss,
                Err(Error::DegenerateView { .. }) => f64::INFINITY,
                Err(e) => return Err(e),
            };
            if loss < best.1 {
                best = (sid, loss);
            }
        }
        Ok(best.0)
    }

    /// Applies the divergence policy: a degenerate or non-finite tracking
    /// result keeps the constant-speed pose and flags the run.
    fn resolve_track(
        &mut self,
        result: Result<crate::tracker::TrackResult>,
        init: &Pose,
        track_loss: &mut f64,
        mask_frac: &mut f64,
        vis_fallback: &mut bool,
        frame: usize,
    ) -> Result<Pose> {
        match result {
            Ok(r) if r.best_loss.is_finite() && r.pose.translation.iter().all(|v| v.is_finite()) => {
                *track_loss = r.best_loss;
                *mask_frac = r.mask_fraction;
                *vis_fallback = r.vis_fallback;
                Ok(r.pose)
            }
            Ok(_) => {
                log::warn!("frame {frame}: non-finite tracking result, keeping motion prior");
                self.diverged = true;
                Ok(*init)
            }
            Err(Error::DegenerateView { .. }) => {
                log::warn!("frame {frame}: degenerate view, keeping motion prior");
                self.diverged = true;
                Ok(*init)
            }
            Err(e) => Err(e),
        }
    }

    fn regular_frame(&mut self, frame: Frame) -> Result<()> {
        let i = frame.index;
        let active_id = self.slots.len().checked_sub(1).ok_or_else(|| {
            Error::InvalidState("regular frame before any section exists".into())
        })?;
        let t0 = Instant::now();
        let init = init_pose(&self.poses)?;
        let result = {
            let (slots, poses, depths) = (&self.slots, &self.poses, &self.depths);
            let lookup = |j: usize| depths.get(&j).map(|d| RefView { pose: &poses[j], depth: d });
            let sec = slots[active_id]
                .section
                .as_ref()
                .ok_or_else(|| Error::InvalidState("active section not resident".into()))?;
            let set = GaussianSet {
                gaussians: &sec.gaussians,
                positions: PositionSource::Poses(poses),
            };
            track_frame(&frame, &init, &set, sec, &self.intr, &lookup, &self.cfg.tracker)
        };
        let mut track_loss = f64::NAN;
        let mut mask_frac = f64::NAN;
        let mut vis_fallback = false;
        let pose =
            self.resolve_track(result, &init, &mut track_loss, &mut mask_frac, &mut vis_fallback, i)?;
        self.poses.push(pose);
        self.timestamps.push(frame.timestamp);
        self.track_seconds += t0.elapsed().as_secs_f64();
        self.tracked_frames += 1;
        self.depths.insert(i, frame.depth.clone());
        self.slots[active_id]
            .section
            .as_mut()
            .unwrap()
            .push_frame(i)?;
        self.slots[active_id].last = i;
        self.active_frames.push(frame);
        let t1 = Instant::now();
        let map_loss = {
            let (slots, poses, frames) = (&mut self.slots, &self.poses, &self.active_frames);
            let sec = slots[active_id].section.as_mut().unwrap();
            let refs: Vec<&Frame> = frames.iter().collect();
            map_regular_frame(
                frames.last().expect("just pushed"),
                &refs,
                poses,
                sec,
                &self.intr,
                &self.cfg.mapper,
                &mut self.rng,
            )?
        };
        self.map_seconds += t1.elapsed().as_secs_f64();
        self.mapped_frames += 1;
        self.slots[active_id].n_gaussians =
            self.slots[active_id].section.as_ref().unwrap().gaussians.len();
        self.note_residency();
        self.log_frame(i, "regular", track_loss, mask_frac, vis_fallback, map_loss);
        Ok(())
    }

    fn log_frame(
        &mut self,
        index: usize,
        kind: &str,
        track_loss: f64,
        mask_frac: f64,
        vis_fallback: bool,
        map_loss: f64,
    ) {
        let resident: usize = self
            .slots
            .iter()
            .filter_map(|s| s.section.as_ref().map(|sec| sec.gaussians.len()))
            .sum();
        self.diagnostics.push(format!(
            "{index}\t{kind}\t{track_loss:.6}\t{mask_frac:.6}\t{vis_fallback}\t{map_loss:.6}\t{}\t{resident}",
            self.total_gaussians()
        ));
    }

    /// Freezes the trailing (possibly partial) section. Call once after the
    /// last frame and before evaluation or serialization.
    pub fn finalize(&mut self) -> Result<()> {
        if self.slots.is_empty() {
            return Err(Error::InvalidState("no frames processed".into()));
        }
        let last = self.slots.len() - 1;
        let frozen = self.slots[last]
            .section
            .as_ref()
            .map_or(true, |s| s.is_frozen());
        if !frozen {
            self.freeze_active()?;
        }
        Ok(())
    }

    /// Estimated trajectory in TUM format: per line
    /// "timestamp tx ty tz qx qy qz qw" with six decimals.
    pub fn trajectory_text(&self) -> String {
        let mut s = String::new();
        for (ts, pose) in self.timestamps.iter().zip(&self.poses) {
            let q = pose.rotation.quaternion();
            let t = pose.translation;
            let _ = writeln!(
                s,
                "{ts:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6}",
                t.x, t.y, t.z, q.i, q.j, q.k, q.w
            );
        }
        s
    }

    pub fn write_trajectory(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.trajectory_text())?;
        Ok(())
    }

    /// Persists every frozen section to the offload directory so a finished
    /// run's map is fully on disk regardless of the residency budget.
    pub fn write_all_sections(&mut self) -> Result<()> {
        let Some(dir) = self.offload_dir.clone() else {
            return Err(Error::InvalidState("run has no offload directory".into()));
        };
        for id in 0..self.slots.len() {
            if self.slots[id].path.is_some() {
                continue;
            }
            let path = dir.join(format!("section_{id:04}.vtgs"));
            let section = self.slots[id]
                .section
                .as_ref()
                .ok_or_else(|| Error::InvalidState(format!("section {id} missing")))?;
            write_section(section, &path)?;
            self.slots[id].path = Some(path);
        }
        Ok(())
    }

    pub fn diagnostics_text(&self) -> String {
        let mut s = self.diagnostics.join("\n");
        s.push('\n');
        s
    }
}

/// Runs the full sequence through a fresh state: process every frame,
/// freeze the trailing section.
pub fn run_sequence(
    cfg: RunConfig,
    dataset: &Dataset,
    offload_dir: Option<PathBuf>,
) -> Result<SlamState> {
    let mut state = SlamState::new(cfg, dataset.intr.clone(), offload_dir)?;
    for i in 0..dataset.len() {
        state.process_frame(dataset.load_frame(i)?)?;
    }
    state.finalize()?;
    Ok(state)
}

/// Renders every `eval_every`-th frame from its section plus the recorded
/// overlap section and reports image metrics, ATE, Gaussian counters, and
/// the resolved configuration.
pub fn evaluate_run(state: &mut SlamState, dataset: &Dataset) -> Result<Report> {
    if state.slots.iter().any(|s| s.section.as_ref().is_some_and(|sec| !sec.is_frozen())) {
        return Err(Error::InvalidState("finalize the run before evaluation".into()));
    }
    let every = state.cfg.eval_every;
    let (mut psnr_sum, mut ssim_sum, mut n) = (0.0, 0.0, 0usize);
    let (mut depth_sum, mut depth_n) = (0.0, 0usize);
    for i in (0..state.poses.len()).step_by(every) {
        let sid = state
            .section_of_frame(i)
            .ok_or_else(|| Error::InvalidState(format!("frame {i} not covered by a section")))?;
        let mut ids = vec![sid];
        if let Some(o) = state.slots[sid].overlap {
            if !ids.contains(&o) {
                ids.push(o);
            }
        }
        for &id in &ids {
            state.fetch(id, &ids)?;
        }
        let out = {
            let slots = &state.slots;
            let sets: Vec<GaussianSet<'_>> = ids
                .iter()
                .map(|&id| baked_set(slots[id].section.as_ref().expect("pinned resident")))
                .collect::<Result<_>>()?;
            render_view(&sets, &state.poses[i], &state.intr)?.1
        };
        let gt = dataset.load_frame(i)?;
        psnr_sum += psnr(&out.color, &gt.rgb)?;
        ssim_sum += ssim(&luminance(&out.color), &luminance(&gt.rgb))?.0;
        if let Some(d) = depth_l1(&out.depth, &out.silhouette, &gt.depth, &gt.valid_mask)? {
            depth_sum += d;
            depth_n += 1;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidState("nothing to evaluate".into()));
    }
    let mut report = Report::default();
    if let Some(gt) = &dataset.ground_truth {
        let m = state.poses.len().min(gt.len());
        if m >= 2 {
            report.set("ate_rmse_cm", format!("{:.6}", ate_rmse(&state.poses[..m], &gt[..m])?));
        }
    }
    report.set("psnr_db", format!("{:.6}", psnr_sum / n as f64));
    report.set("ssim", format!("{:.6}", ssim_sum / n as f64));
    if depth_n > 0 {
        report.set("depth_l1_cm", format!("{:.6}", depth_sum / depth_n as f64));
    }
    report.set("total_gaussians", state.total_gaussians());
    report.set("max_resident_gaussians", state.max_resident_gaussians);
    report.set("max_resident_sections", state.max_resident_sections);
    report.set("n_sections", state.n_sections());
    report.set("diverged", state.diverged);
    report.set(
        "runtime_track_s_per_frame",
        format!("{:.6}", state.track_seconds_per_frame()),
    );
    report.set(
        "runtime_map_s_per_frame",
        format!("{:.6}", state.map_seconds_per_frame()),
    );
    for (k, v) in state.cfg.report_entries() {
        report.set(&k, v);
    }
    Ok(report)
}
