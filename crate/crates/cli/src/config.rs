//! Pipeline configuration: one TOML file, overridden by command-line flags.

use std::path::{Path, PathBuf};

use hullsplat::carve::{GridSpec, TruncationConfig, DEFAULT_RESOLUTION};
use hullsplat::embed::{EmbedConfig, VIEW_SIZE};
use hullsplat::metrics::LossConfig;
use hullsplat::refine::{ColorMode, RefineConfig};
use hullsplat::splat::SplatConfig;
use hullsplat::synth::SceneSpec;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Root of the per-camera frame and mask directories.
    pub dataset: PathBuf,
    pub rig: PathBuf,
    pub output: PathBuf,
    pub frames: FrameRange,
    pub grid: GridSection,
    pub truncation: TruncationSection,
    pub splat: SplatSection,
    pub loss: LossSection,
    pub refine: RefineSection,
    pub embed: EmbedSection,
    pub metrics: MetricsSection,
    pub synth: Option<SceneSpec>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("dataset"),
            rig: PathBuf::from("rig.toml"),
            output: PathBuf::from("out"),
            frames: FrameRange::default(),
            grid: GridSection::default(),
            truncation: TruncationSection::default(),
            splat: SplatSection::default(),
            loss: LossSection::default(),
            refine: RefineSection::default(),
            embed: EmbedSection::default(),
            metrics: MetricsSection::default(),
            synth: None,
        }
    }
}

/// Half-open frame range `start..end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrameRange {
    pub start: usize,
    pub end: usize,
}

impl Default for FrameRange {
    fn default() -> Self {
        Self { start: 0, end: 1 }
    }
}

impl FrameRange {
    /// `START:END`, end exclusive.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let bad = || CliError::InvalidConfig(format!("frame range `{text}` is not START:END"));
        let (a, b) = text.split_once(':').ok_or_else(bad)?;
        let start = a.trim().parse().map_err(|_| bad())?;
        let end = b.trim().parse().map_err(|_| bad())?;
        Ok(Self { start, end })
    }

    pub fn indices(&self) -> Vec<usize> {
        (self.start..self.end.max(self.start)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub resolution: usize,
    /// Side length of the cube in world units.
    pub extent: f64,
    pub center: [f64; 3],
    pub azimuth: f64,
    /// Center and rotate each frame's grid on the tracked body frame.
    pub egocentric: bool,
    /// Resolution of the coarse carve used for body-frame tracking.
    pub frame_resolution: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            resolution: DEFAULT_RESOLUTION,
            extent: 2.6,
            center: [0.0; 3],
            azimuth: 0.0,
            egocentric: false,
            frame_resolution: 64,
        }
    }
}

impl GridSection {
    pub fn spec(&self, center: Vector3<f64>, azimuth: f64) -> GridSpec {
        GridSpec::cube(self.resolution, self.extent / self.resolution as f64, center, azimuth)
    }

    pub fn fixed_spec(&self) -> GridSpec {
        self.spec(Vector3::from(self.center), self.azimuth)
    }

    pub fn coarse_spec(&self) -> GridSpec {
        GridSpec::cube(
            self.frame_resolution,
            self.extent / self.frame_resolution as f64,
            Vector3::from(self.center),
            0.0,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TruncationSection {
    pub enabled: bool,
    pub threshold: u32,
    pub multiple: usize,
    pub max_voxels: Option<usize>,
}

impl Default for TruncationSection {
    fn default() -> Self {
        let d = TruncationConfig::default();
        Self {
            enabled: false,
            threshold: d.threshold,
            multiple: d.multiple,
            max_voxels: d.max_voxels,
        }
    }
}

impl TruncationSection {
    pub fn config(&self) -> TruncationConfig {
        TruncationConfig {
            threshold: self.threshold,
            multiple: self.multiple,
            max_voxels: self.max_voxels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplatSection {
    pub render_threshold: f32,
    pub size_factor: f64,
    pub opacity: f64,
}

impl Default for SplatSection {
    fn default() -> Self {
        let d = SplatConfig::default();
        Self {
            render_threshold: d.render_threshold,
            size_factor: d.size_factor,
            opacity: d.opacity,
        }
    }
}

impl SplatSection {
    pub fn config(&self) -> SplatConfig {
        SplatConfig {
            render_threshold: self.render_threshold,
            size_factor: self.size_factor,
            opacity: self.opacity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub lambda_color: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        Self {
            lambda_color: LossConfig::default().lambda_color,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineSection {
    pub color_mode: ColorMode,
    pub opacity_steps: usize,
    pub learning_rate: f64,
    /// Camera indices used for fitting; empty means all.
    pub views: Vec<usize>,
}

impl Default for RefineSection {
    fn default() -> Self {
        let d = RefineConfig::default();
        Self {
            color_mode: d.color_mode,
            opacity_steps: d.opacity_steps,
            learning_rate: d.learning_rate,
            views: d.views,
        }
    }
}

/// Which particle set later stages read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParticleSource {
    /// Straight from the carved volumes (`render`).
    Particles,
    /// After per-frame refinement (`fit`).
    Fitted,
}

impl ParticleSource {
    pub fn dir(self) -> &'static str {
        match self {
            ParticleSource::Particles => "particles",
            ParticleSource::Fitted => "fitted",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Extractor {
    Handcrafted,
    /// Per-view features from an external network, read from `features`.
    Imported,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedSection {
    pub bandwidth: usize,
    pub n_theta: usize,
    pub n_phi: usize,
    pub radius_factor: f64,
    pub view_size: usize,
    pub pca_dims: Option<usize>,
    pub apca_dims: usize,
    pub extractor: Extractor,
    pub features: Option<PathBuf>,
    pub source: ParticleSource,
}

impl Default for EmbedSection {
    fn default() -> Self {
        let d = EmbedConfig::default();
        Self {
            bandwidth: d.bandwidth,
            n_theta: d.n_theta,
            n_phi: d.n_phi,
            radius_factor: d.radius_factor,
            view_size: VIEW_SIZE,
            pca_dims: d.pca_dims,
            apca_dims: d.apca_dims,
            extractor: Extractor::Handcrafted,
            features: None,
            source: ParticleSource::Fitted,
        }
    }
}

impl EmbedSection {
    pub fn config(&self) -> EmbedConfig {
        EmbedConfig {
            bandwidth: self.bandwidth,
            n_theta: self.n_theta,
            n_phi: self.n_phi,
            radius_factor: self.radius_factor,
            view_size: self.view_size,
            pca_dims: self.pca_dims,
            apca_dims: self.apca_dims,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub source: ParticleSource,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            source: ParticleSource::Fitted,
        }
    }
}

/// Flag values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub dataset: Option<PathBuf>,
    pub rig: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub frames: Option<FrameRange>,
    pub resolution: Option<usize>,
    pub lambda_color: Option<f64>,
    pub opacity_steps: Option<usize>,
    pub learning_rate: Option<f64>,
    pub color_mode: Option<ColorMode>,
    pub source: Option<ParticleSource>,
}

impl PipelineConfig {
    /// Reads `path`, resolving relative paths inside it against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        if !path.is_file() {
            return Err(CliError::ConfigPathMissing {
                what: "config file",
                path: path.to_path_buf(),
            });
        }
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: PipelineConfig = toml::from_str(&text).map_err(|e| CliError::ConfigParse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.dataset = base.join(&cfg.dataset);
        cfg.rig = base.join(&cfg.rig);
        cfg.output = base.join(&cfg.output);
        if let Some(f) = &cfg.embed.features {
            cfg.embed.features = Some(base.join(f));
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(p) = &o.dataset {
            self.dataset.clone_from(p);
        }
        if let Some(p) = &o.rig {
            self.rig.clone_from(p);
        }
        if let Some(p) = &o.output {
            self.output.clone_from(p);
        }
        if let Some(f) = o.frames {
            self.frames = f;
        }
        if let Some(r) = o.resolution {
            self.grid.resolution = r;
        }
        if let Some(l) = o.lambda_color {
            self.loss.lambda_color = l;
        }
        if let Some(s) = o.opacity_steps {
            self.refine.opacity_steps = s;
        }
        if let Some(l) = o.learning_rate {
            self.refine.learning_rate = l;
        }
        if let Some(m) = o.color_mode {
            self.refine.color_mode = m;
        }
        if let Some(s) = o.source {
            self.metrics.source = s;
            self.embed.source = s;
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let invalid = |m: String| Err(CliError::InvalidConfig(m));
        if self.grid.resolution == 0 || self.grid.frame_resolution == 0 {
            return invalid("grid resolutions must be positive".into());
        }
        if !(self.grid.extent > 0.0) {
            return invalid(format!("grid extent {} must be positive", self.grid.extent));
        }
        let s = &self.splat;
        if !(s.render_threshold > 0.0 && s.render_threshold <= 1.0) {
            return invalid(format!("render_threshold {} outside (0, 1]", s.render_threshold));
        }
        if !(s.size_factor > 0.0) {
            return invalid(format!("size_factor {} must be positive", s.size_factor));
        }
        if !(s.opacity > 0.0 && s.opacity <= 1.0) {
            return invalid(format!("opacity {} outside (0, 1]", s.opacity));
        }
        self.refine_config()
            .validate()
            .map_err(|e| CliError::InvalidConfig(e.to_string()))?;
        self.embed
            .config()
            .grid()
            .map_err(|e| CliError::InvalidConfig(e.to_string()))?;
        if self.embed.extractor == Extractor::Handcrafted && self.embed.view_size != VIEW_SIZE {
            return invalid(format!("the handcrafted extractor needs view_size {VIEW_SIZE}"));
        }
        if self.embed.apca_dims == 0 {
            return invalid("apca_dims must be positive".into());
        }
        Ok(())
    }

    pub fn refine_config(&self) -> RefineConfig {
        RefineConfig {
            color_mode: self.refine.color_mode,
            opacity_steps: self.refine.opacity_steps,
            learning_rate: self.refine.learning_rate,
            views: self.refine.views.clone(),
            loss: LossConfig {
                lambda_color: self.loss.lambda_color,
            },
            ..RefineConfig::default()
        }
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::InvalidConfig(format!("cannot serialize config: {e}")))
    }
}
