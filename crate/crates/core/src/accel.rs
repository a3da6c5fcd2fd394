//! Server-side accelerations: temporal attention cache, down/mid block skip and
//! batch attention-map reuse.
//!
//! All three are gated on the 1-based sampling iteration `t`. When several
//! fire at one step, block skip is applied first (down and mid sites do not
//! run at all), then the cache gate for each surviving site, then reuse.

use serde::{Deserialize, Serialize};

use crate::denoiser::{attention_map, AttnWeights, Site};
use crate::error::{Error, Result};
use crate::tensor::{FlopCounter, FlopKind, Tensor};

pub const DEFAULT_REFRESH_PERIOD: usize = 5;

/// How the periodic cache refresh counts steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RefreshOrigin {
    /// Refresh when `t mod period == 0`.
    #[default]
    Absolute,
    /// Refresh when `(t - r) mod period == 0`.
    CachePoint,
}

impl RefreshOrigin {
    pub fn to_byte(self) -> u8 {
        match self {
            RefreshOrigin::Absolute => 0,
            RefreshOrigin::CachePoint => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(RefreshOrigin::Absolute),
            1 => Some(RefreshOrigin::CachePoint),
            _ => None,
        }
    }
}

/// Gate parameters. A cache or skip point of `T + 1` means "never".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccelConfig {
    /// Denoising steps run on the cloud.
    pub switch_point: usize,
    pub cache_point: usize,
    pub skip_point: usize,
    pub reuse: bool,
    pub refresh_period: usize,
    pub pivot_index: usize,
    #[serde(default)]
    pub refresh_origin: RefreshOrigin,
}

impl AccelConfig {
    /// Every gate off; the cloud runs `switch_point` plain steps.
    pub fn disabled(steps: usize, switch_point: usize) -> Self {
        Self {
            switch_point,
            cache_point: steps + 1,
            skip_point: steps + 1,
            reuse: false,
            refresh_period: DEFAULT_REFRESH_PERIOD,
            pivot_index: 0,
            refresh_origin: RefreshOrigin::Absolute,
        }
    }

    /// `k = 5, r = 3, s = 3` with reuse.
    pub fn fast_preset() -> Self {
        Self {
            switch_point: 5,
            cache_point: 3,
            skip_point: 3,
            reuse: true,
            refresh_period: DEFAULT_REFRESH_PERIOD,
            pivot_index: 0,
            refresh_origin: RefreshOrigin::Absolute,
        }
    }

    /// `k = 10, r = 4, s = 6` with reuse.
    pub fn quality_preset() -> Self {
        Self {
            switch_point: 10,
            cache_point: 4,
            skip_point: 6,
            ..Self::fast_preset()
        }
    }

    pub fn validate(&self, steps: usize) -> Result<()> {
        if self.switch_point > steps {
            return Err(Error::Config(format!(
                "switch point {} exceeds {steps} steps",
                self.switch_point
            )));
        }
        for (name, v) in [("cache", self.cache_point), ("skip", self.skip_point)] {
            if v == 0 || v > steps + 1 {
                return Err(Error::Config(format!(
                    "{name} point {v} outside [1, {}]",
                    steps + 1
                )));
            }
        }
        if self.refresh_period == 0 {
            return Err(Error::Config("refresh period must be at least 1".into()));
        }
        Ok(())
    }

    pub fn is_disabled(&self, steps: usize) -> bool {
        self.cache_point > steps && self.skip_point > steps && !self.reuse
    }
}

fn refresh_due(t: usize, cfg: &AccelConfig) -> bool {
    match cfg.refresh_origin {
        RefreshOrigin::Absolute => t % cfg.refresh_period == 0,
        RefreshOrigin::CachePoint => {
            t > cfg.cache_point && (t - cfg.cache_point) % cfg.refresh_period == 0
        }
    }
}

/// Attention cache gate: recompute when `t <= r` or a refresh is due;
/// otherwise the site returns its cached output.
pub fn should_recompute_attention(t: usize, cfg: &AccelConfig) -> bool {
    t <= cfg.cache_point || refresh_due(t, cfg)
}

/// Block-skip gate: `t >= s`. Refuses on the first step, where no mid-block
/// features can have been cached yet.
pub fn should_skip_blocks(t: usize, cfg: &AccelConfig) -> bool {
    if t < cfg.skip_point {
        return false;
    }
    if t <= 1 {
        log::warn!("skip point {} fires before any mid features exist; not skipping", cfg.skip_point);
        return false;
    }
    true
}

/// Batch reuse applies while attention is still computed fresh, i.e. up to
/// the cache point.
pub fn reuse_active(t: usize, cfg: &AccelConfig) -> bool {
    cfg.reuse && t <= cfg.cache_point
}

/// Batch-reused attention: the map `m* = softmax(q*·k*ᵀ/√d)` is built from the
/// pivot row only and applied to every row's own values.
///
/// `to_q`, `to_k`, the scores and the softmax are charged once; `to_v` and
/// `M·V` once per row.
pub fn reuse_attention_batch(
    q_batch: &[Tensor],
    kv_batch: &[&Tensor],
    w: &AttnWeights,
    pivot: usize,
    flops: &mut FlopCounter,
) -> Result<Vec<Tensor>> {
    let n = q_batch.len();
    if pivot >= n {
        return Err(Error::Config(format!(
            "pivot index {pivot} outside batch of {n}"
        )));
    }
    if kv_batch.len() != n {
        return Err(Error::Input(format!(
            "{} key/value rows for {n} query rows",
            kv_batch.len()
        )));
    }
    let q = flops.matmul(FlopKind::ToQ, &q_batch[pivot], &w.to_q)?;
    let k = flops.matmul(FlopKind::ToK, kv_batch[pivot], &w.to_k)?;
    let map = attention_map(&q, &k, flops)?;
    kv_batch
        .iter()
        .map(|kv| {
            let v = flops.matmul(FlopKind::ToV, kv, &w.to_v)?;
            flops.matmul(FlopKind::Mix, &map, &v)
        })
        .collect()
}

/// Which gates fired during one denoising step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StepGates {
    pub iteration: usize,
    pub skipped_blocks: bool,
    /// Bit `site.index()` set when the site served its cached output.
    pub cached_sites: u8,
    /// Bit `site.index()` set when the site ran with a broadcast pivot map.
    pub reused_sites: u8,
}

impl StepGates {
    pub fn new(iteration: usize) -> Self {
        Self {
            iteration,
            ..Self::default()
        }
    }

    pub(crate) fn mark_cached(&mut self, site: Site) {
        self.cached_sites |= 1 << site.index();
    }

    pub(crate) fn mark_reused(&mut self, site: Site) {
        self.reused_sites |= 1 << site.index();
    }

    pub fn cached(&self, site: Site) -> bool {
        self.cached_sites & (1 << site.index()) != 0
    }

    pub fn reused(&self, site: Site) -> bool {
        self.reused_sites & (1 << site.index()) != 0
    }

    pub fn any(&self) -> bool {
        self.skipped_blocks || self.cached_sites != 0 || self.reused_sites != 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheEvent {
    Write { site: Site, iteration: usize },
    Hit { site: Site, iteration: usize },
}

/// Per-session cache of attention outputs and mid-block features.
#[derive(Debug, Clone)]
pub struct AccelState {
    config: AccelConfig,
    session: u64,
    binding: Option<(u64, usize)>,
    outputs: [Option<Vec<Tensor>>; 6],
    last_write: [Option<usize>; 6],
    mid_features: Option<Vec<Tensor>>,
    events: Vec<CacheEvent>,
}

impl AccelState {
    pub fn new(config: AccelConfig, session: u64) -> Self {
        Self {
            config,
            session,
            binding: None,
            outputs: Default::default(),
            last_write: [None; 6],
            mid_features: None,
            events: Vec::new(),
        }
    }

    pub fn config(&self) -> &AccelConfig {
        &self.config
    }

    pub fn session(&self) -> u64 {
        self.session
    }

    /// Ties the state to one model and batch size on first use.
    pub fn bind(&mut self, model: u64, batch: usize) -> Result<()> {
        match self.binding {
            None => {
                if self.config.reuse && self.config.pivot_index >= batch {
                    return Err(Error::Config(format!(
                        "pivot index {} outside batch of {batch}",
                        self.config.pivot_index
                    )));
                }
                self.binding = Some((model, batch));
                Ok(())
            }
            Some(b) if b == (model, batch) => Ok(()),
            Some((m, n)) => Err(Error::Session(format!(
                "accel state of session {} belongs to model {m:016x} with batch {n}, \
                 used with model {model:016x} and batch {batch}",
                self.session
            ))),
        }
    }

    pub fn cached_output(&self, site: Site, batch: usize) -> Option<&[Tensor]> {
        self.outputs[site.index()]
            .as_deref()
            .filter(|o| o.len() == batch)
    }

    pub(crate) fn store_output(&mut self, site: Site, iteration: usize, out: Vec<Tensor>) {
        self.outputs[site.index()] = Some(out);
        self.last_write[site.index()] = Some(iteration);
        self.events.push(CacheEvent::Write { site, iteration });
    }

    pub(crate) fn note_hit(&mut self, site: Site, iteration: usize) {
        self.events.push(CacheEvent::Hit { site, iteration });
    }

    pub fn last_write(&self, site: Site) -> Option<usize> {
        self.last_write[site.index()]
    }

    pub fn has_mid_features(&self, batch: usize) -> bool {
        self.mid_features.as_ref().is_some_and(|f| f.len() == batch)
    }

    pub fn mid_features(&self) -> Option<&[Tensor]> {
        self.mid_features.as_deref()
    }

    pub(crate) fn store_mid_features(&mut self, f: Vec<Tensor>) {
        self.mid_features = Some(f);
    }

    pub fn events(&self) -> &[CacheEvent] {
        &self.events
    }
}
