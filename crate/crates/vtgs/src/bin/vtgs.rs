//! Command-line entry point: run SLAM on a dataset, evaluate a finished
//! run, generate synthetic datasets, render stored sections, and check
//! analytic gradients against finite differences.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vtgs::config::{Preset, RunConfig};
use vtgs::dataset::{self, Dataset, Layout};
use vtgs::error::Error;
use vtgs::eval::{ate_rmse, Report};
use vtgs::geometry::{CameraIntrinsics, Pose};
use vtgs::pipeline::{evaluate_run, run_sequence};
use vtgs::render::{render_view, GaussianSet, PositionSource};
use vtgs::section_io::read_section;
use vtgs::synth::{generate_synthetic, SynthSpec, Trajectory};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "vtgs", about = "RGBD SLAM with view-tied Gaussian splatting")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct DatasetArgs {
    /// Dataset root directory.
    #[arg(long)]
    dataset: PathBuf,
    /// Dataset layout: tum | replica_like.
    #[arg(long, default_value = "tum")]
    layout: String,
    /// Intrinsics sidecar file; defaults to <dataset>/intrinsics.txt.
    #[arg(long)]
    intrinsics: Option<PathBuf>,
}

impl DatasetArgs {
    fn load(&self) -> vtgs::error::Result<Dataset> {
        let layout: Layout = self.layout.parse()?;
        let intr_path = self
            .intrinsics
            .clone()
            .unwrap_or_else(|| self.dataset.join("intrinsics.txt"));
        let intr = dataset::read_intrinsics(&intr_path)?;
        dataset::load(layout, &self.dataset, intr)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Run SLAM over a dataset and write trajectory, report, diagnostics.
    Run {
        #[command(flatten)]
        data: DatasetArgs,
        /// Optional key=value config file overriding the preset defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Per-dataset tracking-weight preset: replica | tum | scannet.
        #[arg(long, default_value = "tum")]
        preset: String,
        #[arg(long)]
        output_dir: PathBuf,
        /// Overrides the config seed when given.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Recompute ATE of a trajectory file against dataset ground truth.
    Eval {
        #[command(flatten)]
        data: DatasetArgs,
        /// Trajectory in TUM format, as written by `run`.
        #[arg(long)]
        trajectory: PathBuf,
        /// Optional report file to update in place.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Generate a synthetic box-room dataset in TUM layout.
    Synth {
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 200)]
        frames: usize,
        /// orbit | corridor | loop.
        #[arg(long, default_value = "orbit")]
        trajectory: String,
        /// Square image resolution in pixels.
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        #[arg(long, default_value_t = 7)]
        texture_seed: u64,
        /// Fraction of the full trajectory covered by the sequence.
        #[arg(long, default_value_t = 1.0)]
        span: f64,
        /// Fraction of depth pixels receiving Gaussian noise.
        #[arg(long, default_value_t = 0.0)]
        noise_fraction: f64,
        /// Depth noise sigma in meters.
        #[arg(long, default_value_t = 0.0)]
        noise_sigma: f64,
        /// Trajectory tilt (radians) relative to the axis-aligned room. Zero
        /// makes some views exactly wall-perpendicular, which is a degenerate
        /// configuration for photometric tracking.
        #[arg(long, default_value_t = 0.2)]
        tilt: f64,
    },
    /// Render stored frozen sections from a pose and emit PNGs.
    Render {
        /// Frozen-section files; later files composite behind earlier ones.
        #[arg(long, required = true)]
        section: Vec<PathBuf>,
        #[arg(long)]
        intrinsics: PathBuf,
        /// Camera pose "tx ty tz qx qy qz qw"; identity when omitted.
        #[arg(long)]
        pose: Option<String>,
        /// Output prefix; writes <prefix>_color.png etc.
        #[arg(long)]
        output: PathBuf,
    },
    /// Check analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        scenes: u64,
        #[arg(long, default_value_t = 24)]
        gaussians: usize,
        #[arg(long, default_value_t = 1e-4)]
        epsilon: f64,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
    },
}

fn parse_pose(text: &str) -> vtgs::error::Result<Pose> {
    let vals: Vec<f64> = text
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::InvalidInput(format!("bad pose field '{t}'"))))
        .collect::<vtgs::error::Result<_>>()?;
    if vals.len() != 7 {
        return Err(Error::InvalidInput("pose needs 7 fields: tx ty tz qx qy qz qw".into()));
    }
    let q = nalgebra::Quaternion::new(vals[6], vals[3], vals[4], vals[5]);
    Ok(Pose::new(
        nalgebra::UnitQuaternion::from_quaternion(q),
        nalgebra::Vector3::new(vals[0], vals[1], vals[2]),
    ))
}

fn parse_trajectory_file(path: &PathBuf) -> vtgs::error::Result<Vec<Pose>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::DataFile {
        path: path.clone(),
        msg: e.to_string(),
    })?;
    let mut poses = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(Error::DataFile {
                path: path.clone(),
                msg: format!("line {}: expected 8 fields", lineno + 1),
            });
        }
        poses.push(parse_pose(&fields[1..].join(" ")).map_err(|e| Error::DataFile {
            path: path.clone(),
            msg: format!("line {}: {e}", lineno + 1),
        })?);
    }
    Ok(poses)
}

fn save_gray_png(img: &vtgs::image_buf::GrayImage, scale: f64, path: &PathBuf) -> vtgs::error::Result<()> {
    let mut out = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(
        img.width() as u32,
        img.height() as u32,
    );
    for (x, y, p) in out.enumerate_pixels_mut() {
        let v = img.get(x as usize, y as usize) * scale;
        *p = image::Luma([v.round().clamp(0.0, u16::MAX as f64) as u16]);
    }
    out.save(path)?;
    Ok(())
}

fn save_rgb_png(img: &vtgs::image_buf::RgbImage, path: &PathBuf) -> vtgs::error::Result<()> {
    let mut out = image::RgbImage::new(img.width() as u32, img.height() as u32);
    for (x, y, p) in out.enumerate_pixels_mut() {
        let c = img.get(x as usize, y as usize);
        *p = image::Rgb([
            (c[0] * 255.0).round() as u8,
            (c[1] * 255.0).round() as u8,
            (c[2] * 255.0).round() as u8,
        ]);
    }
    out.save(path)?;
    Ok(())
}

fn exec(cmd: Cmd) -> vtgs::error::Result<u8> {
    match cmd {
        Cmd::Run {
            data,
            config,
            preset,
            output_dir,
            seed,
        } => {
            let ds = data.load()?;
            let preset: Preset = preset.parse()?;
            let mut cfg = RunConfig::preset(preset);
            if let Some(path) = &config {
                cfg = RunConfig::load(path, cfg)?;
            }
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            std::fs::create_dir_all(&output_dir)?;
            let sections_dir = output_dir.join("sections");
            let mut state = run_sequence(cfg.clone(), &ds, Some(sections_dir))?;
            state.write_trajectory(&output_dir.join("trajectory.txt"))?;
            std::fs::write(output_dir.join("diagnostics.tsv"), state.diagnostics_text())?;
            std::fs::write(output_dir.join("config.txt"), cfg.to_text())?;
            let report = evaluate_run(&mut state, &ds)?;
            report.write(&output_dir.join("report.txt"))?;
            state.write_all_sections()?;
            println!("{}", report.to_string_lines());
            if state.diverged {
                eprintln!("tracking diverged on at least one frame");
                return Ok(EXIT_DIVERGED);
            }
            Ok(0)
        }
        Cmd::Eval {
            data,
            trajectory,
            report,
        } => {
            let ds = data.load()?;
            let gt = ds.ground_truth.as_ref().ok_or_else(|| {
                Error::Data("dataset has no ground-truth trajectory".into())
            })?;
            let est = parse_trajectory_file(&trajectory)?;
            let m = est.len().min(gt.len());
            let ate = ate_rmse(&est[..m], &gt[..m])?;
            let mut rep = match &report {
                Some(path) if path.exists() => Report::read(path)?,
                _ => Report::default(),
            };
            rep.set("ate_rmse_cm", format!("{ate:.6}"));
            if let Some(path) = &report {
                rep.write(path)?;
            }
            println!("{}", rep.to_string_lines());
            Ok(0)
        }
        Cmd::Synth {
            output,
            frames,
            trajectory,
            resolution,
            texture_seed,
            span,
            noise_fraction,
            noise_sigma,
            tilt,
        } => {
            let trajectory: Trajectory = trajectory.parse()?;
            let r = resolution as f64;
            let spec = SynthSpec {
                frames,
                trajectory,
                texture_seed,
                span,
                noise_fraction,
                noise_sigma,
                tilt,
                intr: CameraIntrinsics::new(
                    r * 1.25,
                    r * 1.25,
                    r / 2.0,
                    r / 2.0,
                    resolution,
                    resolution,
                    5000.0,
                )?,
                ..SynthSpec::default()
            };
            generate_synthetic(&spec, &output)?;
            println!("wrote {frames} frames to {}", output.display());
            Ok(0)
        }
        Cmd::Render {
            section,
            intrinsics,
            pose,
            output,
        } => {
            let intr = dataset::read_intrinsics(&intrinsics)?;
            let pose = match &pose {
                Some(text) => parse_pose(text)?,
                None => Pose::identity(),
            };
            let sections: Vec<_> = section
                .iter()
                .map(|p| read_section(p))
                .collect::<vtgs::error::Result<_>>()?;
            let sets: Vec<GaussianSet<'_>> = sections
                .iter()
                .map(|s| {
                    let baked = s.baked_positions.as_deref().ok_or_else(|| {
                        Error::InvalidState(format!("section {} has no baked positions", s.id))
                    })?;
                    Ok(GaussianSet {
                        gaussians: &s.gaussians,
                        positions: PositionSource::Baked(baked),
                    })
                })
                .collect::<vtgs::error::Result<_>>()?;
            let (_, out) = render_view(&sets, &pose, &intr)?;
            let stem = output.display();
            save_rgb_png(&out.color, &PathBuf::from(format!("{stem}_color.png")))?;
            save_gray_png(&out.depth, intr.depth_scale, &PathBuf::from(format!("{stem}_depth.png")))?;
            save_gray_png(&out.silhouette, u16::MAX as f64, &PathBuf::from(format!("{stem}_silhouette.png")))?;
            Ok(0)
        }
        Cmd::Gradcheck {
            scenes,
            gaussians,
            epsilon,
            tolerance,
        } => {
            let mut worst = 0.0f64;
            for seed in 0..scenes {
                let err = vtgs::grad::fd::check_random_scene(seed, gaussians, epsilon)?;
                worst = worst.max(err);
            }
            println!("gradcheck: {scenes} scenes, max relative error {worst:.3e} (tolerance {tolerance:.1e})");
            if worst < tolerance {
                Ok(0)
            } else {
                eprintln!("gradcheck failed");
                Ok(EXIT_USAGE)
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version through this path too; those are not
            // usage errors.
            let benign = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if benign { ExitCode::SUCCESS } else { ExitCode::from(EXIT_USAGE) };
        }
    };
    match exec(cli.cmd) {
        Ok(code) => ExitCode::from(code),
        Err(e @ (Error::Data(_) | Error::DataFile { .. } | Error::Io(_) | Error::Image(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_DATA)
        }
        Err(e @ Error::DegenerateView { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_DIVERGED)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}
