//! One function per pipeline stage. Each reads its inputs from the dataset or
//! from earlier stages' artifacts under the output directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use hullsplat::camera::CameraRig;
use hullsplat::carve::{carve_dual, carve_frame, truncate_volume, GridSpec, UsageCounts, VoxelGrid};
use hullsplat::dataset::{frame_path, load_frame, mask_path, FrameSet};
use hullsplat::embed::{embed_frame, embed_sequence, frame_power_features, HandcraftedExtractor, ImportedFeatures};
use hullsplat::metrics::metric_suite;
use hullsplat::poseframe::{format_track, moment_gaussian, read_track, track_sequence, BodyFrame};
use hullsplat::refine::refine_frame;
use hullsplat::splat::{rasterize, voxels_to_gaussians};
use hullsplat::synth::{build_rig, posed_particles, render_frame_set};
use nalgebra::{DMatrix, Vector3};

use crate::config::{Extractor, ParticleSource, PipelineConfig};
use crate::error::CliError;
use crate::output::{frame_file, load_particles, load_volume, write_atomically, write_bytes, write_particles, write_volume};

pub const TRACK_FILE: &str = "track.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_HEADER: &str = "frame,cam,iou,l1,psnr,ssim";
pub const TRACE_FILE: &str = "fit_trace.csv";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";

fn progress(stage: &str, frame: usize, start: Instant) {
    eprintln!("progress stage={stage} frame={frame} ms={}", start.elapsed().as_millis());
}

fn load_rig(cfg: &PipelineConfig) -> Result<CameraRig, CliError> {
    if !cfg.rig.is_file() {
        return Err(CliError::ConfigPathMissing {
            what: "rig file",
            path: cfg.rig.clone(),
        });
    }
    Ok(CameraRig::load(&cfg.rig)?)
}

fn check_dataset(cfg: &PipelineConfig) -> Result<(), CliError> {
    if !cfg.dataset.is_dir() {
        return Err(CliError::ConfigPathMissing {
            what: "dataset directory",
            path: cfg.dataset.clone(),
        });
    }
    Ok(())
}

fn dir(cfg: &PipelineConfig, name: &str) -> PathBuf {
    cfg.output.join(name)
}

fn write_frame_set(root: &Path, frame: &FrameSet, rig: &CameraRig) -> Result<(), CliError> {
    for ((name, image), mask) in rig.names().iter().zip(&frame.images).zip(&frame.masks) {
        write_atomically(&frame_path(root, name, frame.index), |p| image.save_png(p))?;
        write_atomically(&mask_path(root, name, frame.index), |p| mask.save_png(p))?;
    }
    Ok(())
}

/// Renders the configured synthetic scene into a dataset, a rig file and
/// ground-truth particles.
pub fn synth(cfg: &PipelineConfig) -> Result<(), CliError> {
    let spec = cfg
        .synth
        .as_ref()
        .ok_or_else(|| CliError::InvalidConfig("`synth` needs a [synth] section".into()))?;
    spec.validate()?;
    let rig = build_rig(spec)?;
    write_bytes(&cfg.rig, rig.to_toml().as_bytes())?;
    let truth = dir(cfg, "truth");
    for index in cfg.frames.indices() {
        let start = Instant::now();
        let particles = posed_particles(spec, index)?;
        let frame = render_frame_set(&particles, &rig, index);
        write_frame_set(&cfg.dataset, &frame, &rig)?;
        write_particles(&frame_file(&truth, index, "bin"), &particles)?;
        progress("synth", index, start);
    }
    Ok(())
}

fn coarse_gaussian(frame: &FrameSet, rig: &CameraRig, spec: &GridSpec) -> Result<(Vector3<f64>, nalgebra::Matrix3<f64>), CliError> {
    let mut grid = VoxelGrid::empty(spec.clone());
    grid.occupancy = carve_dual(&frame.masks, rig, spec)?;
    Ok(moment_gaussian(&grid)?)
}

/// Coarse carve per frame, moment Gaussians, and the sign-consistent heading track.
pub fn frame(cfg: &PipelineConfig) -> Result<Vec<BodyFrame>, CliError> {
    check_dataset(cfg)?;
    let rig = load_rig(cfg)?;
    let spec = cfg.grid.coarse_spec();
    let mut gaussians = Vec::new();
    for index in cfg.frames.indices() {
        let start = Instant::now();
        let frame = load_frame(&cfg.dataset, index, &rig)?;
        let (mu, sigma) = coarse_gaussian(&frame, &rig, &spec)?;
        gaussians.push((index, mu, sigma));
        progress("frame", index, start);
    }
    let track = if gaussians.is_empty() { Vec::new() } else { track_sequence(&gaussians)? };
    write_bytes(&dir(cfg, "").join(TRACK_FILE), format_track(&track).as_bytes())?;
    Ok(track)
}

fn load_track(cfg: &PipelineConfig) -> Result<Vec<BodyFrame>, CliError> {
    let path = cfg.output.join(TRACK_FILE);
    if !path.is_file() {
        return Err(CliError::MissingArtifact { path, producer: "frame" });
    }
    Ok(read_track(&path)?)
}

fn track_entry(track: &[BodyFrame], index: usize) -> Result<&BodyFrame, CliError> {
    track.iter().find(|f| f.index == index).ok_or_else(|| {
        CliError::InvalidConfig(format!("frame {index} is not in {TRACK_FILE}; rerun `frame` over this range"))
    })
}

/// Visual hulls, optionally egocentric and optionally truncated to the
/// usage-based crop window shared by all frames.
pub fn carve(cfg: &PipelineConfig) -> Result<(), CliError> {
    check_dataset(cfg)?;
    let rig = load_rig(cfg)?;
    let track = if cfg.grid.egocentric { load_track(cfg)? } else { Vec::new() };
    let volumes = dir(cfg, "volumes");
    let mut usage = UsageCounts::new(cfg.grid.resolution);
    let indices = cfg.frames.indices();
    for &index in &indices {
        let start = Instant::now();
        let spec = if cfg.grid.egocentric {
            let body = track_entry(&track, index)?;
            cfg.grid.spec(body.center, body.azimuth)
        } else {
            cfg.grid.fixed_spec()
        };
        let frame = load_frame(&cfg.dataset, index, &rig)?;
        let grid = carve_frame(&frame, &rig, &spec)?;
        usage.add(&grid);
        write_volume(&frame_file(&volumes, index, "bin"), &grid)?;
        progress("carve", index, start);
    }
    if cfg.truncation.enabled && !indices.is_empty() {
        let ranges = truncate_volume(&usage, &cfg.truncation.config())?;
        for &index in &indices {
            let path = frame_file(&volumes, index, "bin");
            let cropped = load_volume(&path)?.crop(&ranges)?;
            write_volume(&path, &cropped)?;
        }
    }
    Ok(())
}

/// Splats each carved volume into particles and renders every camera.
pub fn render(cfg: &PipelineConfig) -> Result<(), CliError> {
    let rig = load_rig(cfg)?;
    let splat = cfg.splat.config();
    for index in cfg.frames.indices() {
        let start = Instant::now();
        let grid = load_volume(&frame_file(&dir(cfg, "volumes"), index, "bin"))?;
        let particles = voxels_to_gaussians(&grid, &splat);
        write_particles(&frame_file(&dir(cfg, "particles"), index, "bin"), &particles)?;
        for (name, cam) in rig.names().iter().zip(rig.cameras()) {
            let image = rasterize(&particles, cam, cfg.refine_config().background);
            let path = frame_file(&dir(cfg, "renders").join(name), index, "png");
            write_atomically(&path, |p| image.save_png(p))?;
        }
        progress("render", index, start);
    }
    Ok(())
}

/// Per-frame color and opacity refinement of the rendered particles.
pub fn fit(cfg: &PipelineConfig) -> Result<(), CliError> {
    check_dataset(cfg)?;
    let rig = load_rig(cfg)?;
    let refine = cfg.refine_config();
    let mut trace = String::from("frame,step,loss\n");
    for index in cfg.frames.indices() {
        let start = Instant::now();
        let particles = load_particles(&frame_file(&dir(cfg, "particles"), index, "bin"), "render")?;
        let frame = load_frame(&cfg.dataset, index, &rig)?;
        let report = refine_frame(&particles, &frame, &rig, &refine)?;
        for (step, loss) in report.trace.iter().enumerate() {
            let _ = writeln!(trace, "{index},{step},{loss}");
        }
        write_particles(&frame_file(&dir(cfg, "fitted"), index, "bin"), &report.particles)?;
        progress("fit", index, start);
    }
    write_bytes(&cfg.output.join(TRACE_FILE), trace.as_bytes())
}

fn producer(source: ParticleSource) -> &'static str {
    match source {
        ParticleSource::Particles => "render",
        ParticleSource::Fitted => "fit",
    }
}

/// IoU, L1, PSNR and SSIM per frame and camera against the dataset.
pub fn metrics(cfg: &PipelineConfig) -> Result<(), CliError> {
    let source = cfg.metrics.source;
    let mut csv = format!("{METRICS_HEADER}\n");
    let indices = cfg.frames.indices();
    if !indices.is_empty() {
        check_dataset(cfg)?;
        let rig = load_rig(cfg)?;
        let background = cfg.refine_config().background;
        for index in indices {
            let start = Instant::now();
            let particles = load_particles(&frame_file(&dir(cfg, source.dir()), index, "bin"), producer(source))?;
            let frame = load_frame(&cfg.dataset, index, &rig)?;
            for (c, (name, cam)) in rig.names().iter().zip(rig.cameras()).enumerate() {
                let rendered = rasterize(&particles, cam, background);
                let m = metric_suite(&rendered, &frame.images[c], &frame.masks[c])?;
                let _ = writeln!(csv, "{index},{name},{},{},{},{}", m.iou, m.l1, m.psnr, m.ssim);
            }
            progress("metrics", index, start);
        }
    }
    write_bytes(&cfg.output.join(METRICS_FILE), csv.as_bytes())
}

/// Rotation-invariant frame features, then PCA and adversarial PCA against
/// the tracked heading.
pub fn embed(cfg: &PipelineConfig) -> Result<(), CliError> {
    let ecfg = cfg.embed.config();
    let grid = ecfg.grid()?;
    let track = load_track(cfg)?;
    let indices = cfg.frames.indices();
    let imported = match cfg.embed.extractor {
        Extractor::Imported => {
            let path = cfg
                .embed
                .features
                .as_ref()
                .ok_or_else(|| CliError::InvalidConfig("imported extractor needs `embed.features`".into()))?;
            if !path.is_file() {
                return Err(CliError::ConfigPathMissing {
                    what: "feature file",
                    path: path.clone(),
                });
            }
            let features = ImportedFeatures::read(path)?;
            if let Some(&last) = indices.last() {
                if last >= features.frames {
                    return Err(CliError::InvalidConfig(format!(
                        "feature file has {} frames, range needs {}",
                        features.frames,
                        last + 1
                    )));
                }
            }
            Some(features)
        }
        Extractor::Handcrafted => None,
    };
    let mut rows = Vec::with_capacity(indices.len());
    let mut azimuths = Vec::with_capacity(indices.len());
    for &index in &indices {
        let start = Instant::now();
        let body = track_entry(&track, index)?;
        let power = match &imported {
            Some(features) => frame_power_features(&features.frame_samples(index), &grid)?,
            None => {
                let source = cfg.embed.source;
                let particles = load_particles(&frame_file(&dir(cfg, source.dir()), index, "bin"), producer(source))?;
                let radius = load_volume(&frame_file(&dir(cfg, "volumes"), index, "bin"))?.spec.bounding_radius();
                embed_frame(&particles, body.center, radius, &ecfg, &HandcraftedExtractor)?
            }
        };
        rows.push(power);
        azimuths.push(body.azimuth);
        progress("embed", index, start);
    }
    let ncols = rows.first().map_or(0, Vec::len);
    let power = DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]);
    let result = embed_sequence(&power, &azimuths, &ecfg)?;
    let e = &result.apca.embeddings;
    let mut csv = String::from("index");
    for d in 0..e.ncols() {
        let _ = write!(csv, ",e{d}");
    }
    csv.push('\n');
    for (r, index) in indices.iter().enumerate() {
        let _ = write!(csv, "{index}");
        for d in 0..e.ncols() {
            let _ = write!(csv, ",{}", e[(r, d)]);
        }
        csv.push('\n');
    }
    log::info!("adversarial strength {:e}", result.apca.mu);
    write_bytes(&cfg.output.join(EMBEDDINGS_FILE), csv.as_bytes())
}

/// The per-frame stages in order: tracking when the grid is egocentric,
/// then carving, splatting, refinement and scoring.
pub fn run(cfg: &PipelineConfig) -> Result<(), CliError> {
    if cfg.grid.egocentric {
        frame(cfg)?;
    }
    carve(cfg)?;
    render(cfg)?;
    fit(cfg)?;
    metrics(cfg)
}
