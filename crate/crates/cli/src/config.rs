use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use oblix_core::accel::{AccelConfig, RefreshOrigin, DEFAULT_REFRESH_PERIOD};
use oblix_core::denoiser::{ModelConfig, ModelWeights};
use oblix_core::oblivious::AttributeLexicon;
use oblix_core::protocol::{ChannelModel, ClientConfig, ScheduleParams};
use oblix_core::schedule::{Spacing, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STEPS};

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub model_id: String,
    pub latent_channels: usize,
    pub res: usize,
    pub d_text: usize,
    pub hidden: usize,
    pub token_capacity: usize,
    pub heads: usize,
    /// Weight files; when absent, weights are generated from the seeds.
    pub cloud_weights: Option<PathBuf>,
    pub device_weights: Option<PathBuf>,
    pub cloud_seed: u64,
    /// When neither this nor `device_weights` is set the device reuses the
    /// cloud weights.
    pub device_seed: Option<u64>,
    pub lexicon: Option<PathBuf>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            model_id: "toy".into(),
            latent_channels: m.latent_channels,
            res: m.res,
            d_text: m.d_text,
            hidden: m.hidden,
            token_capacity: m.token_capacity,
            heads: m.heads,
            cloud_weights: None,
            device_weights: None,
            cloud_seed: 1,
            device_seed: None,
            lexicon: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub spacing: Spacing,
    pub device_steps: Option<usize>,
    pub timestep_shift: i64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            spacing: Spacing::ScaledLinear,
            device_steps: None,
            timestep_shift: 0,
        }
    }
}

/// Gate keys; cache and skip points default to "never".
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AccelSection {
    pub switch_point: Option<usize>,
    pub cache_point: Option<usize>,
    pub skip_point: Option<usize>,
    pub reuse: bool,
    pub refresh_period: Option<usize>,
    pub pivot_index: usize,
    pub refresh_origin: RefreshOrigin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    #[default]
    Simulated,
    Tcp,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerSection {
    pub address: String,
    pub transport: TransportKind,
    pub retries: usize,
}

impl Default for ServerSection {
    fn default() -> Self {
        Self {
            address: "127.0.0.1:7878".into(),
            transport: TransportKind::Simulated,
            retries: 2,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub image: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: u64,
    pub prompt: Option<String>,
    pub model: ModelSection,
    pub schedule: ScheduleSection,
    pub accel: AccelSection,
    pub channel: ChannelModel,
    pub server: ServerSection,
    pub output: OutputSection,
}

impl Default for FileConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            prompt: None,
            model: ModelSection::default(),
            schedule: ScheduleSection::default(),
            accel: AccelSection::default(),
            channel: ChannelModel::default(),
            server: ServerSection::default(),
            output: OutputSection::default(),
        }
    }
}

/// Fully resolved run configuration: every referenced file has been read.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub file: FileConfig,
    pub client: ClientConfig,
    pub cloud: Arc<ModelWeights>,
    pub device: Arc<ModelWeights>,
    pub lexicon: AttributeLexicon,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn load_weights(path: &Path, expected: &ModelConfig) -> Result<ModelWeights> {
    let f = fs::File::open(path).with_context(|| format!("opening weights {}", path.display()))?;
    let w = ModelWeights::read_from(std::io::BufReader::new(f))
        .with_context(|| format!("reading weights {}", path.display()))?;
    if w.config() != expected {
        bail!(
            "weights {} were built for {:?}, config asks for {:?}",
            path.display(),
            w.config(),
            expected
        );
    }
    Ok(w)
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let (file, base) = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                let file: FileConfig =
                    toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?;
                let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
                (file, base)
            }
            None => (FileConfig::default(), PathBuf::new()),
        };
        Self::from_file(file, &base)
    }

    pub fn from_file(file: FileConfig, base: &Path) -> Result<Self> {
        let m = &file.model;
        let model_cfg = ModelConfig {
            latent_channels: m.latent_channels,
            res: m.res,
            d_text: m.d_text,
            hidden: m.hidden,
            token_capacity: m.token_capacity,
            heads: m.heads,
        };
        model_cfg.validate().context("[model]")?;
        file.channel.validate().context("[channel]")?;

        let lexicon = match &m.lexicon {
            Some(p) => {
                let p = resolve(base, p);
                let text = fs::read_to_string(&p)
                    .with_context(|| format!("reading lexicon {}", p.display()))?;
                AttributeLexicon::parse(&text)
                    .with_context(|| format!("parsing lexicon {}", p.display()))?
            }
            None => AttributeLexicon::default(),
        };

        let cloud = match &m.cloud_weights {
            Some(p) => load_weights(&resolve(base, p), &model_cfg)?,
            None => ModelWeights::generate(model_cfg, m.cloud_seed)?,
        };
        let device = match (&m.device_weights, m.device_seed) {
            (Some(p), _) => load_weights(&resolve(base, p), &model_cfg)?,
            (None, Some(seed)) => ModelWeights::generate(model_cfg, seed)?,
            (None, None) => cloud.clone(),
        };

        let s = &file.schedule;
        let schedule = ScheduleParams {
            steps: s.steps,
            beta_start: s.beta_start,
            beta_end: s.beta_end,
            spacing: s.spacing,
        };
        let device_schedule = ScheduleParams {
            steps: s.device_steps.unwrap_or(s.steps),
            ..schedule
        };
        let a = &file.accel;
        let never = s.steps + 1;
        let accel = AccelConfig {
            switch_point: a.switch_point.unwrap_or(10.min(s.steps)),
            cache_point: a.cache_point.unwrap_or(never),
            skip_point: a.skip_point.unwrap_or(never),
            reuse: a.reuse,
            refresh_period: a.refresh_period.unwrap_or(DEFAULT_REFRESH_PERIOD),
            pivot_index: a.pivot_index,
            refresh_origin: a.refresh_origin,
        };
        let client = ClientConfig {
            model_id: m.model_id.clone(),
            seed: file.seed,
            schedule,
            accel,
            device_schedule,
            timestep_shift: s.timestep_shift,
            retries: file.server.retries,
        };
        client.validate().context("[schedule]/[accel]")?;
        Ok(Self {
            file,
            client,
            cloud: Arc::new(cloud),
            device: Arc::new(device),
            lexicon,
        })
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.client.seed = s;
            self.file.seed = s;
        }
        self
    }
}
