//! Run configuration: one TOML file, every key optional.
//!
//! ```toml
//! seed = 0
//! out_dir = "runs/default"
//!
//! [geometry]
//! image_size = 64
//! n_angles = 360
//!
//! [dataset]
//! kind = "dental-like"
//! angle_ranges = [[0.0, 90.0], [0.0, 120.0]]
//! n_train = 64
//! n_test = 8
//! noise_sigma = 0.0
//!
//! [train]
//! learning_rate = 1e-4
//! batch_size = 8
//! steps = 200
//! checkpoint_every = 0
//! base_width = 32
//! wtconv = true
//! schedule = { steps = 1000, beta_min = 1e-4, beta_max = 0.02 }
//!
//! [sample]
//! n_steps = 50
//! guidance_weight = 0.05
//! eta = 0.0
//!
//! [eval]
//! methods = ["fbp", "tv", "ddim", "pwd"]
//! parallel = false
//! tv = { lambda = 0.02, n_iters = 100 }
//! guidance_grid = [0.0, 0.01, 0.05, 0.1, 0.5, 1.0]
//! step_grid = [10, 25, 50, 100]
//! wtconv_grid = [50, 200]
//! ```
//!
//! `seed` is the only seed: the dataset, training and sampling seeds are
//! derived from it.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use pwd_lact::data::{DatasetSpec, PhantomKind};
use pwd_lact::diffusion::{ScheduleParams, TrainConfig, UNetConfig};
use pwd_lact::eval::TvSettings;
use pwd_lact::sampler::SampleConfig;
use pwd_lact::tomo::{AngleRange, Geometry};
use serde::{Deserialize, Serialize};

pub const CONFIG_ECHO: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub geometry: GeometrySection,
    pub dataset: DatasetSection,
    pub train: TrainSection,
    pub sample: SampleSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometrySection {
    pub image_size: usize,
    /// Views over the full 360° turn.
    pub n_angles: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub kind: PhantomKind,
    /// `[start, end]` in degrees; every phantom is paired with every range.
    pub angle_ranges: Vec<[f64; 2]>,
    pub n_train: usize,
    pub n_test: usize,
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub checkpoint_every: usize,
    pub base_width: usize,
    pub wtconv: bool,
    pub schedule: ScheduleParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSection {
    pub n_steps: usize,
    pub guidance_weight: f64,
    pub eta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodName {
    Fbp,
    Tv,
    /// Unguided sampling (`w = 0`).
    Ddim,
    Pwd,
}

impl MethodName {
    pub fn as_str(&self) -> &'static str {
        match self {
            MethodName::Fbp => "fbp",
            MethodName::Tv => "tv",
            MethodName::Ddim => "ddim",
            MethodName::Pwd => "pwd",
        }
    }

    pub fn needs_model(&self) -> bool {
        matches!(self, MethodName::Ddim | MethodName::Pwd)
    }
}

impl fmt::Display for MethodName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodName {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fbp" => Ok(MethodName::Fbp),
            "tv" => Ok(MethodName::Tv),
            "ddim" => Ok(MethodName::Ddim),
            "pwd" => Ok(MethodName::Pwd),
            _ => bail!("unknown method {s:?} (expected fbp, tv, ddim or pwd)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub methods: Vec<MethodName>,
    /// Reconstruct test images concurrently; per-image timings are then omitted.
    pub parallel: bool,
    pub tv: TvSettings,
    pub guidance_grid: Vec<f64>,
    pub step_grid: Vec<usize>,
    pub wtconv_grid: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            geometry: GeometrySection::default(),
            dataset: DatasetSection::default(),
            train: TrainSection::default(),
            sample: SampleSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl Default for GeometrySection {
    fn default() -> Self {
        Self {
            image_size: 64,
            n_angles: 360,
        }
    }
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            kind: PhantomKind::DentalLike,
            angle_ranges: vec![[0.0, 90.0], [0.0, 120.0]],
            n_train: 64,
            n_test: 8,
            noise_sigma: 0.0,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let unet = UNetConfig::default();
        Self {
            learning_rate: 1e-4,
            batch_size: 8,
            steps: 200,
            checkpoint_every: 0,
            base_width: unet.base_width,
            wtconv: unet.wtconv,
            schedule: ScheduleParams::default(),
        }
    }
}

impl Default for SampleSection {
    fn default() -> Self {
        let s = SampleConfig::default();
        Self {
            n_steps: s.n_steps,
            guidance_weight: s.guidance_weight,
            eta: s.eta,
        }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            methods: vec![MethodName::Fbp, MethodName::Tv, MethodName::Ddim, MethodName::Pwd],
            parallel: false,
            tv: TvSettings::default(),
            guidance_grid: vec![0.0, 0.01, 0.05, 0.1, 0.5, 1.0],
            step_grid: vec![10, 25, 50, 100],
            wtconv_grid: vec![50, 200],
        }
    }
}

fn ensure(ok: bool, key: &str, msg: impl fmt::Display) -> Result<()> {
    if !ok {
        bail!("{key}: {msg}");
    }
    Ok(())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    /// The fully resolved config as TOML.
    pub fn echo(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.geometry;
        ensure(
            g.image_size >= 32 && g.image_size.is_multiple_of(8),
            "geometry.image_size",
            format!("must be a multiple of 8 and at least 32, got {}", g.image_size),
        )?;
        ensure(g.n_angles > 0, "geometry.n_angles", "must be positive")?;
        self.geometry()?;

        let d = &self.dataset;
        ensure(!d.angle_ranges.is_empty(), "dataset.angle_ranges", "needs at least one range")?;
        for &[a, b] in &d.angle_ranges {
            AngleRange::new(a, b).map_err(|e| anyhow::anyhow!("dataset.angle_ranges: {e}"))?;
        }
        ensure(d.n_train > 0, "dataset.n_train", "must be positive")?;
        ensure(d.n_test > 0, "dataset.n_test", "must be positive")?;
        ensure(
            d.noise_sigma >= 0.0 && d.noise_sigma.is_finite(),
            "dataset.noise_sigma",
            format!("must be >= 0, got {}", d.noise_sigma),
        )?;

        let t = &self.train;
        ensure(
            t.learning_rate > 0.0 && t.learning_rate.is_finite(),
            "train.learning_rate",
            format!("must be positive, got {}", t.learning_rate),
        )?;
        ensure(t.batch_size > 0, "train.batch_size", "must be positive")?;
        ensure(
            t.base_width > 0 && t.base_width.is_multiple_of(8),
            "train.base_width",
            format!("must be a positive multiple of 8, got {}", t.base_width),
        )?;
        let schedule = pwd_lact::diffusion::NoiseSchedule::from_params(t.schedule)
            .map_err(|e| anyhow::anyhow!("train.schedule: {e}"))?;

        let s = &self.sample;
        ensure(
            (0.0..=1.0).contains(&s.guidance_weight),
            "sample.guidance_weight",
            format!("must be in [0, 1], got {}", s.guidance_weight),
        )?;
        ensure(
            s.n_steps >= 1 && s.n_steps <= schedule.len(),
            "sample.n_steps",
            format!("must be in [1, {}], got {}", schedule.len(), s.n_steps),
        )?;
        ensure(s.eta >= 0.0 && s.eta.is_finite(), "sample.eta", format!("must be >= 0, got {}", s.eta))?;

        let e = &self.eval;
        ensure(!e.methods.is_empty(), "eval.methods", "needs at least one method")?;
        ensure(
            e.tv.lambda >= 0.0 && e.tv.lambda.is_finite(),
            "eval.tv.lambda",
            format!("must be >= 0, got {}", e.tv.lambda),
        )?;
        for &w in &e.guidance_grid {
            ensure((0.0..=1.0).contains(&w), "eval.guidance_grid", format!("guidance_weight {w} outside [0, 1]"))?;
        }
        for (key, grid) in [("eval.step_grid", &e.step_grid), ("eval.wtconv_grid", &e.wtconv_grid)] {
            for &k in grid {
                ensure(
                    k >= 1 && k <= schedule.len(),
                    key,
                    format!("step count {k} outside [1, {}]", schedule.len()),
                )?;
            }
        }
        Ok(())
    }

    pub fn geometry(&self) -> Result<Geometry> {
        Ok(Geometry::uniform(self.geometry.image_size, self.geometry.n_angles)?)
    }

    pub fn angle_ranges(&self) -> Result<Vec<AngleRange>> {
        Ok(self
            .dataset
            .angle_ranges
            .iter()
            .map(|&[a, b]| AngleRange::new(a, b))
            .collect::<pwd_lact::Result<_>>()?)
    }

    pub fn dataset_seed(&self) -> u64 {
        self.seed
    }

    pub fn train_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }

    pub fn sample_seed(&self) -> u64 {
        self.seed.wrapping_add(2)
    }

    pub fn dataset_spec(&self) -> Result<DatasetSpec> {
        Ok(DatasetSpec {
            kind: self.dataset.kind,
            image_size: self.geometry.image_size,
            n_angles: self.geometry.n_angles,
            angle_ranges: self.angle_ranges()?,
            n_train: self.dataset.n_train,
            n_test: self.dataset.n_test,
            noise_sigma: self.dataset.noise_sigma,
            seed: self.dataset_seed(),
        })
    }

    pub fn train_config(&self, wtconv: bool) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            steps: t.steps,
            schedule: t.schedule,
            model: UNetConfig {
                base_width: t.base_width,
                wtconv,
            },
            seed: self.train_seed(),
            checkpoint_every: t.checkpoint_every,
        }
    }

    pub fn sample_config(&self) -> SampleConfig {
        SampleConfig {
            n_steps: self.sample.n_steps,
            guidance_weight: self.sample.guidance_weight,
            seed: self.sample_seed(),
            eta: self.sample.eta,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn out_of_range_weight_names_key() {
        let err = RunConfig::parse("[sample]\nguidance_weight = 1.5\n").unwrap_err();
        assert!(format!("{err:#}").contains("guidance_weight"), "{err:#}");
    }

    #[test]
    fn unknown_key_is_rejected_with_its_name() {
        let err = RunConfig::parse("[train]\nlearning_rte = 0.1\n").unwrap_err();
        let msg = format!("{err:#}");
        assert!(msg.contains("learning_rte") && msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn type_error_names_key() {
        let err = RunConfig::parse("seed = \"zero\"\n").unwrap_err();
        assert!(format!("{err:#}").contains("seed"), "{err:#}");
    }

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.seed = 7;
        cfg.sample.guidance_weight = 0.1;
        cfg.dataset.angle_ranges = vec![[10.0, 100.0]];
        cfg.eval.methods = vec![MethodName::Pwd];
        assert_eq!(RunConfig::parse(&cfg.echo()).unwrap(), cfg);
        assert_eq!(RunConfig::parse(&RunConfig::default().echo()).unwrap(), RunConfig::default());
    }

    #[test]
    fn bad_sizes_and_ranges_are_rejected() {
        assert!(RunConfig::parse("[geometry]\nimage_size = 36\n").is_err());
        let err = RunConfig::parse("[dataset]\nangle_ranges = [[90.0, 10.0]]\n").unwrap_err();
        assert!(format!("{err:#}").contains("dataset.angle_ranges"));
        assert!(RunConfig::parse("[eval]\nstep_grid = [0]\n").is_err());
    }
}
