//! Run configuration: every tunable hyperparameter as a plain-text
//! `key = value` file with `[section]` headers, plus per-dataset presets.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::loss::TrackingWeights;
use crate::mapper::MapperConfig;
use crate::tracker::TrackerConfig;

/// Per-dataset preset for the tracking loss weights and camera assumptions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Replica,
    Tum,
    ScanNet,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "replica" => Ok(Self::Replica),
            "tum" => Ok(Self::Tum),
            "scannet" => Ok(Self::ScanNet),
            other => Err(Error::Config(format!("unknown preset '{other}'"))),
        }
    }
}

/// Fully resolved run configuration. All fields have working defaults; a
/// config file overrides individual keys.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub tracker: TrackerConfig,
    pub mapper: MapperConfig,
    /// Maximum number of frozen sections resident in memory at once.
    pub residency_budget: usize,
    /// RNG seed for mapping replay and any stochastic choices.
    pub seed: u64,
    /// Evaluate rendering metrics on every k-th frame.
    pub eval_every: usize,
    /// Re-select the head-mapping overlap section by largest visible
    /// fraction instead of reusing the tracker's pretrack argmin.
    pub overlap_reselect_by_fraction: bool,
    /// Ablation: track head frames against the previous section instead of
    /// the selected overlap section.
    pub head_track_previous_section: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            tracker: TrackerConfig::default(),
            mapper: MapperConfig::default(),
            residency_budget: 4,
            seed: 0,
            eval_every: 5,
            overlap_reselect_by_fraction: false,
            head_track_previous_section: false,
        }
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let mut cfg = Self::default();
        cfg.tracker.weights = match preset {
            Preset::Replica => TrackingWeights::replica(),
            Preset::Tum => TrackingWeights::tum(),
            Preset::ScanNet => TrackingWeights::scannet(),
        };
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.tracker.validate()?;
        self.mapper.validate()?;
        if self.residency_budget == 0 {
            return Err(Error::Config("residency_budget must be >= 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        Ok(())
    }

    /// Serializes the full resolved configuration; `parse` inverts this.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let t = &self.tracker;
        let m = &self.mapper;
        let _ = writeln!(s, "[run]");
        let _ = writeln!(s, "residency_budget = {}", self.residency_budget);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "eval_every = {}", self.eval_every);
        let _ = writeln!(
            s,
            "overlap_reselect_by_fraction = {}",
            self.overlap_reselect_by_fraction
        );
        let _ = writeln!(
            s,
            "head_track_previous_section = {}",
            self.head_track_previous_section
        );
        let _ = writeln!(s, "\n[tracking]");
        let _ = writeln!(s, "color_weight = {}", t.weights.alpha);
        let _ = writeln!(s, "depth_weight = {}", t.weights.beta);
        let _ = writeln!(s, "iterations = {}", t.iterations);
        let _ = writeln!(s, "pretrack_iterations = {}", t.pretrack_iterations);
        let _ = writeln!(s, "candidate_interval = {}", t.candidate_interval);
        let _ = writeln!(s, "overlap_threshold = {}", t.overlap_threshold);
        let _ = writeln!(s, "max_candidate_sections = {}", t.max_candidate_sections);
        let _ = writeln!(s, "use_visibility = {}", t.use_visibility);
        let _ = writeln!(s, "\n[mapping]");
        let _ = writeln!(s, "color_l1_weight = {}", m.weights.rho);
        let _ = writeln!(s, "ssim_weight = {}", m.weights.tau);
        let _ = writeln!(s, "depth_weight = {}", m.weights.sigma);
        let _ = writeln!(s, "head_iterations = {}", m.head_iterations);
        let _ = writeln!(s, "regular_iterations = {}", m.regular_iterations);
        let _ = writeln!(s, "densify_threshold = {}", m.densify_threshold);
        let _ = writeln!(s, "section_length = {}", m.section_length);
        let _ = writeln!(s, "ba_enabled = {}", m.ba_enabled);
        let _ = writeln!(s, "\n[learning_rates]");
        let _ = writeln!(s, "color = {}", t.lr.color);
        let _ = writeln!(s, "radius = {}", t.lr.radius);
        let _ = writeln!(s, "opacity = {}", t.lr.opacity);
        let _ = writeln!(s, "rotation = {}", t.lr.rotation);
        let _ = writeln!(s, "translation = {}", t.lr.translation);
        s
    }

    /// Parses `key = value` text with `[section]` headers and `#` comments,
    /// overriding fields of `base`. Unknown keys are errors.
    pub fn parse(text: &str, base: Self) -> Result<Self> {
        let mut cfg = base;
        let mut section = String::new();
        let mut lr = cfg.tracker.lr;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad_key = || {
                Error::Config(format!("line {}: unknown key [{section}] {key}", lineno + 1))
            };
            let f = || -> Result<f64> {
                value.parse().map_err(|_| {
                    Error::Config(format!("line {}: bad number '{value}'", lineno + 1))
                })
            };
            let u = || -> Result<usize> {
                value.parse().map_err(|_| {
                    Error::Config(format!("line {}: bad integer '{value}'", lineno + 1))
                })
            };
            match (section.as_str(), key) {
                ("run", "residency_budget") => cfg.residency_budget = u()?,
                ("run", "seed") => {
                    cfg.seed = value.parse().map_err(|_| {
                        Error::Config(format!("line {}: bad integer '{value}'", lineno + 1))
                    })?
                }
                ("run", "eval_every") => cfg.eval_every = u()?,
                ("run", "overlap_reselect_by_fraction") => {
                    cfg.overlap_reselect_by_fraction = value.parse().map_err(|_| {
                        Error::Config(format!("line {}: bad bool '{value}'", lineno + 1))
                    })?
                }
                ("run", "head_track_previous_section") => {
                    cfg.head_track_previous_section = value.parse().map_err(|_| {
                        Error::Config(format!("line {}: bad bool '{value}'", lineno + 1))
                    })?
                }
                ("tracking", "color_weight") => cfg.tracker.weights.alpha = f()?,
                ("tracking", "depth_weight") => cfg.tracker.weights.beta = f()?,
                ("tracking", "iterations") => cfg.tracker.iterations = u()?,
                ("tracking", "pretrack_iterations") => cfg.tracker.pretrack_iterations = u()?,
                ("tracking", "candidate_interval") => cfg.tracker.candidate_interval = u()?,
                ("tracking", "overlap_threshold") => cfg.tracker.overlap_threshold = f()?,
                ("tracking", "max_candidate_sections") => {
                    cfg.tracker.max_candidate_sections = u()?
                }
                ("tracking", "use_visibility") => {
                    cfg.tracker.use_visibility = value.parse().map_err(|_| {
                        Error::Config(format!("line {}: bad bool '{value}'", lineno + 1))
                    })?
                }
                ("mapping", "color_l1_weight") => cfg.mapper.weights.rho = f()?,
                ("mapping", "ssim_weight") => cfg.mapper.weights.tau = f()?,
                ("mapping", "depth_weight") => cfg.mapper.weights.sigma = f()?,
                ("mapping", "head_iterations") => cfg.mapper.head_iterations = u()?,
                ("mapping", "regular_iterations") => cfg.mapper.regular_iterations = u()?,
                ("mapping", "densify_threshold") => cfg.mapper.densify_threshold = f()?,
                ("mapping", "section_length") => cfg.mapper.section_length = u()?,
                ("mapping", "ba_enabled") => {
                    cfg.mapper.ba_enabled = value.parse().map_err(|_| {
                        Error::Config(format!("line {}: bad bool '{value}'", lineno + 1))
                    })?
                }
                ("learning_rates", "color") => lr.color = f()?,
                ("learning_rates", "radius") => lr.radius = f()?,
                ("learning_rates", "opacity") => lr.opacity = f()?,
                ("learning_rates", "rotation") => lr.rotation = f()?,
                ("learning_rates", "translation") => lr.translation = f()?,
                _ => return Err(bad_key()),
            }
        }
        cfg.tracker.lr = lr;
        cfg.mapper.lr = lr;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, base: Self) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::DataFile {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        Self::parse(&text, base)
    }

    /// Flat key list for embedding into evaluation reports.
    pub fn report_entries(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut section = String::new();
        for line in self.to_text().lines() {
            let line = line.trim();
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.to_string();
            } else if let Some((k, v)) = line.split_once('=') {
                out.push((format!("config.{section}.{}", k.trim()), v.trim().to_string()));
            }
        }
        out
    }
}

/// Returns defaults as a sorted key map, mainly for docs and tests.
pub fn default_key_map() -> BTreeMap<String, String> {
    RunConfig::default().report_entries().into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trips() {
        let mut cfg = RunConfig::preset(Preset::Tum);
        cfg.seed = 42;
        cfg.mapper.section_length = 20;
        cfg.tracker.lr.translation = 0.004;
        cfg.mapper.lr = cfg.tracker.lr;
        let parsed = RunConfig::parse(&cfg.to_text(), RunConfig::default()).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn presets_set_tracking_weights() {
        assert_eq!(RunConfig::preset(Preset::Replica).tracker.weights.beta, 0.025);
        assert_eq!(RunConfig::preset(Preset::Tum).tracker.weights.beta, 1.0);
        assert_eq!(RunConfig::preset(Preset::ScanNet).tracker.weights.beta, 0.9);
        for p in [Preset::Replica, Preset::Tum, Preset::ScanNet] {
            assert_eq!(RunConfig::preset(p).tracker.weights.alpha, 0.5);
        }
    }

    #[test]
    fn overrides_apply_and_comments_are_ignored() {
        let text = "# comment\n[mapping]\nsection_length = 10 # inline\n\n[run]\nseed = 9\n";
        let cfg = RunConfig::parse(text, RunConfig::default()).unwrap();
        assert_eq!(cfg.mapper.section_length, 10);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.tracker.iterations, RunConfig::default().tracker.iterations);
    }

    #[test]
    fn lr_overrides_reach_both_tracker_and_mapper() {
        let cfg =
            RunConfig::parse("[learning_rates]\ncolor = 0.01\n", RunConfig::default()).unwrap();
        assert_eq!(cfg.tracker.lr.color, 0.01);
        assert_eq!(cfg.mapper.lr.color, 0.01);
    }

    #[test]
    fn errors_name_the_line() {
        for text in ["[run]\nnope = 1\n", "[run]\nseed\n", "[run]\nseed = x\n"] {
            let err = RunConfig::parse(text, RunConfig::default()).unwrap_err();
            assert!(err.to_string().contains("line 2"), "{err}");
        }
    }

    #[test]
    fn defaults_validate_and_cover_all_sections() {
        assert!(RunConfig::default().validate().is_ok());
        let keys = default_key_map();
        for want in [
            "config.tracking.overlap_threshold",
            "config.mapping.ssim_weight",
            "config.learning_rates.rotation",
            "config.run.residency_budget",
        ] {
            assert!(keys.contains_key(want), "missing {want}");
        }
    }
}
