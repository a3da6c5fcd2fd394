//! Cost accounting: full-scale estimators, exact closed-form counts for the
//! toy U-Net, and per-session reports.

use serde::Serialize;

use crate::accel::StepGates;
use crate::denoiser::{ModelConfig, Site};
use crate::pipeline::Side;
use crate::protocol::client::SessionOutput;
use crate::protocol::transport::{simulate_transfer, ChannelModel};
use crate::security::Direction;
use crate::tensor::{FlopCounter, FlopKind, SOFTMAX_FLOPS_PER_ELEMENT};

/// Channels of a latent-diffusion latent.
pub const LATENT_CHANNELS: usize = 4;
pub const FP16_BYTES: usize = 2;

/// Cloud cost of `k` of `T` steps for `N` candidates, in the unit of `full`.
pub fn estimate_server_flops(full_per_image: f64, k: usize, steps: usize, n: usize) -> f64 {
    full_per_image * k as f64 / steps as f64 * n as f64
}

/// Device cost of the remaining `T − k` steps for one image.
pub fn estimate_device_flops(device_full_per_image: f64, k: usize, steps: usize) -> f64 {
    device_full_per_image * (steps - k.min(steps)) as f64 / steps as f64
}

/// Latent hand-off size: `4 · res · res · N · elem_bytes`.
pub fn transmission_bytes(res: usize, n: usize, elem_bytes: usize) -> usize {
    LATENT_CHANNELS * res * res * n * elem_bytes
}

fn mm(m: usize, n: usize, p: usize) -> u64 {
    2 * (m * n * p) as u64
}

/// One image's FLOPs at an attention site, by kind.
pub fn site_flops(cfg: &ModelConfig, site: Site) -> FlopCounter {
    let d = cfg.hidden;
    let t = match site {
        Site::MidSelf | Site::MidCross => cfg.mid_tokens(),
        _ => cfg.outer_tokens(),
    };
    let (kv_tokens, kv_width) = if site.is_cross() {
        (cfg.token_capacity, cfg.d_text)
    } else {
        (t, d)
    };
    let mut f = FlopCounter::new();
    f.record(FlopKind::ToQ, mm(t, d, d));
    f.record(FlopKind::ToK, mm(kv_tokens, kv_width, d));
    f.record(FlopKind::ToV, mm(kv_tokens, kv_width, d));
    f.record(FlopKind::Scores, mm(t, d, kv_tokens));
    f.record(FlopKind::Softmax, SOFTMAX_FLOPS_PER_ELEMENT * (t * kv_tokens) as u64);
    f.record(FlopKind::Mix, mm(t, kv_tokens, d));
    f.record(FlopKind::ToOut, mm(t, d, d));
    f
}

/// Non-attention FLOPs of one image: `(down + mid, up)`.
pub fn conv_flops(cfg: &ModelConfig) -> (u64, u64) {
    let (p, q, d) = (cfg.outer_tokens(), cfg.mid_tokens(), cfg.hidden);
    let patch = 4 * cfg.latent_channels;
    let down = mm(p, patch, d) + mm(q, 4 * d, d);
    let up = mm(q, d, 4 * d) + mm(p, patch, d) + mm(p, d, patch);
    (down, up)
}

/// Exact count of one denoising step for a batch of `n` given which gates fired.
pub fn closed_form_step(cfg: &ModelConfig, n: usize, gates: &StepGates) -> FlopCounter {
    let n64 = n as u64;
    let mut f = FlopCounter::new();
    let (down, up) = conv_flops(cfg);
    if !gates.skipped_blocks {
        f.record(FlopKind::Conv, down * n64);
    }
    f.record(FlopKind::Conv, up * n64);
    for site in Site::ALL {
        if gates.skipped_blocks && site.in_skipped_blocks() {
            continue;
        }
        let s = site_flops(cfg, site);
        f.record(FlopKind::ToOut, s.get(FlopKind::ToOut) * n64);
        if gates.cached(site) {
            continue;
        }
        let shared = if gates.reused(site) { 1 } else { n64 };
        for kind in [FlopKind::ToQ, FlopKind::ToK, FlopKind::Scores, FlopKind::Softmax] {
            f.record(kind, s.get(kind) * shared);
        }
        for kind in [FlopKind::ToV, FlopKind::Mix] {
            f.record(kind, s.get(kind) * n64);
        }
    }
    f
}

/// Full single-image step with every gate off.
pub fn closed_form_plain_step(cfg: &ModelConfig) -> FlopCounter {
    closed_form_step(cfg, 1, &StepGates::new(1))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepCost {
    pub side: Side,
    pub iteration: usize,
    pub flops: u64,
    pub skipped_blocks: bool,
    pub cached_sites: u8,
    pub reused_sites: u8,
}

/// Per-session accounting.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub candidates: usize,
    pub device_only: bool,
    pub server_flops: u64,
    pub device_flops: u64,
    pub steps: Vec<StepCost>,
    pub bytes_sent: usize,
    pub bytes_received: usize,
    pub transfer_seconds: f64,
}

impl CostReport {
    pub fn from_session(out: &SessionOutput, channel: &ChannelModel) -> Self {
        let mut steps: Vec<StepCost> = out
            .cloud_steps
            .iter()
            .map(|s| StepCost {
                side: Side::Cloud,
                iteration: s.iteration,
                flops: s.flops,
                skipped_blocks: s.skipped_blocks,
                cached_sites: s.cached_sites,
                reused_sites: s.reused_sites,
            })
            .collect();
        steps.extend(out.device_steps.iter().map(|s| StepCost {
            side: Side::Device,
            iteration: s.iteration,
            flops: s.flops.total(),
            skipped_blocks: s.gates.skipped_blocks,
            cached_sites: s.gates.cached_sites,
            reused_sites: s.gates.reused_sites,
        }));
        let bytes_sent = out.transcript.bytes(Direction::ToServer);
        let bytes_received = out.transcript.bytes(Direction::ToClient);
        let exchanges = out
            .transcript
            .entries()
            .iter()
            .filter(|(d, _)| *d == Direction::ToServer)
            .count();
        let transfer_seconds = if exchanges == 0 {
            0.0
        } else {
            simulate_transfer(bytes_sent + bytes_received, channel)
                + channel.rtt_s * (exchanges - 1) as f64
        };
        Self {
            candidates: out.candidates,
            device_only: out.device_only,
            server_flops: out.cloud_flops.total(),
            device_flops: out.device_flops.total(),
            steps,
            bytes_sent,
            bytes_received,
            transfer_seconds,
        }
    }

    pub fn total_flops(&self) -> u64 {
        self.server_flops + self.device_flops
    }

    /// True when the per-step series sums to the counted totals.
    pub fn is_consistent(&self) -> bool {
        let sum = |side| {
            self.steps
                .iter()
                .filter(|s| s.side == side)
                .map(|s| s.flops)
                .sum::<u64>()
        };
        sum(Side::Cloud) == self.server_flops && sum(Side::Device) == self.device_flops
    }

    /// One JSON object per step followed by a summary object.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&serde_json::to_string(s).expect("serialisable"));
            out.push('\n');
        }
        let summary = serde_json::json!({
            "summary": {
                "candidates": self.candidates,
                "device_only": self.device_only,
                "server_flops": self.server_flops,
                "device_flops": self.device_flops,
                "bytes_sent": self.bytes_sent,
                "bytes_received": self.bytes_received,
                "transfer_seconds": self.transfer_seconds,
            }
        });
        out.push_str(&summary.to_string());
        out.push('\n');
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        if self.device_only {
            out.push_str("device-only run (k = 0): no network exchange\n");
        }
        out.push_str(&format!("candidates N      {}\n", self.candidates));
        out.push_str(&format!("server FLOPs      {}\n", self.server_flops));
        out.push_str(&format!("device FLOPs      {}\n", self.device_flops));
        out.push_str(&format!("bytes sent        {}\n", self.bytes_sent));
        out.push_str(&format!("bytes received    {}\n", self.bytes_received));
        out.push_str(&format!("transfer (model)  {:.6} s\n", self.transfer_seconds));
        out.push_str("side    step        flops  skip  cached  reused\n");
        for s in &self.steps {
            out.push_str(&format!(
                "{:<6} {:>5} {:>12}  {:<4}  {:06b}  {:06b}\n",
                match s.side {
                    Side::Cloud => "cloud",
                    Side::Device => "device",
                },
                s.iteration,
                s.flops,
                if s.skipped_blocks { "yes" } else { "no" },
                s.cached_sites,
                s.reused_sites,
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::accel::{AccelConfig, AccelState};
    use crate::denoiser::{embed_prompt, ModelWeights};
    use crate::pipeline::{cloud_denoise, initial_latent, replicate};
    use crate::schedule::NoiseSchedule;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 0.01
    }

    #[test]
    fn full_scale_estimates() {
        assert!(close(estimate_server_flops(18.53, 10, 25, 2), 14.82));
        // The table's 44.46 is 7.41 × 6 with the per-image figure rounded first.
        assert!((estimate_server_flops(18.53, 10, 25, 6) - 44.472).abs() < 1e-9);
        assert_eq!(estimate_server_flops(18.53, 0, 25, 6), 0.0);
        assert!(close(estimate_device_flops(10.90, 10, 25), 6.54));
        assert!(close(estimate_device_flops(10.90, 5, 25), 8.72));
        assert!(close(estimate_device_flops(11.20, 5, 25), 8.96));
        assert_eq!(estimate_device_flops(10.90, 25, 25), 0.0);
        assert_eq!(estimate_server_flops(18.53, 25, 25, 1), 18.53);
        assert!(close(estimate_server_flops(18.53, 25, 25, 6), 111.18));
    }

    #[test]
    fn transmission() {
        assert_eq!(transmission_bytes(64, 1, 2), 32768);
        assert_eq!(transmission_bytes(64, 30, 2), 983040);
        assert_eq!(transmission_bytes(16, 6, 2), 12288);
    }

    #[test]
    fn plain_step_matches_hand_count() {
        // Default toy config: 64 outer tokens, 16 mid tokens, d = 32,
        // 16 text tokens of width 32, patch width 16.
        let cfg = ModelConfig::default();
        let d = 32u64;
        let self_site = |t: u64| 2 * t * d * d * 4 + 2 * t * d * t * 2 + 5 * t * t;
        let cross_site = |t: u64| 2 * t * d * d * 2 + 2 * 16 * 32 * d * 2 + 2 * t * d * 16 * 2 + 5 * t * 16;
        let conv = 2 * 64 * 16 * d + 2 * 16 * 128 * d + 2 * 16 * d * 128 + 2 * 64 * 16 * d + 2 * 64 * d * 16;
        let expected = conv
            + 2 * self_site(64)
            + 2 * cross_site(64)
            + self_site(16)
            + cross_site(16);
        assert_eq!(closed_form_plain_step(&cfg).total(), expected);
    }

    #[test]
    fn counted_matches_closed_form_under_every_gate() {
        let cfg = ModelConfig {
            res: 8,
            ..ModelConfig::default()
        };
        let w = ModelWeights::generate(cfg, 1).unwrap();
        let sched = NoiseSchedule::default_latent();
        for (accel, n) in [
            (AccelConfig::disabled(25, 25), 1),
            (AccelConfig::disabled(25, 25), 3),
            (AccelConfig { switch_point: 25, ..AccelConfig::fast_preset() }, 3),
            (AccelConfig { switch_point: 25, ..AccelConfig::quality_preset() }, 2),
        ] {
            let texts: Vec<_> = (0..n)
                .map(|i| embed_prompt(&format!("p{i} q"), &cfg).unwrap())
                .collect();
            let batch = replicate(&initial_latent(0, &w), n).unwrap();
            let mut state = AccelState::new(accel, 0);
            let mut flops = FlopCounter::new();
            let (_, recs) =
                cloud_denoise(&w, &sched, batch, &texts, 25, Some(&mut state), &mut flops).unwrap();
            for r in &recs {
                assert_eq!(r.flops, closed_form_step(&cfg, n, &r.gates), "step {}", r.iteration);
            }
        }
    }

    #[test]
    fn reuse_divides_map_flops_by_n() {
        let cfg = ModelConfig::default();
        let n = 6;
        let plain = closed_form_step(&cfg, n, &StepGates::new(1));
        let mut reused = StepGates::new(1);
        reused.reused_sites = 0b11_1111;
        let r = closed_form_step(&cfg, n, &reused);
        assert_eq!(plain.attention_map(), r.attention_map() * n as u64);
        assert_eq!(plain.get(FlopKind::ToV), r.get(FlopKind::ToV));
        assert_eq!(plain.get(FlopKind::Mix), r.get(FlopKind::Mix));
    }

    #[test]
    fn gates_are_monotone() {
        let cfg = ModelConfig::default();
        let full = closed_form_step(&cfg, 2, &StepGates::new(7)).total();
        let mut cache = StepGates::new(7);
        cache.cached_sites = 0b11_1111;
        let cached = closed_form_step(&cfg, 2, &cache).total();
        let mut skip = cache;
        skip.skipped_blocks = true;
        let skipped = closed_form_step(&cfg, 2, &skip).total();
        assert!(skipped < cached && cached < full);
    }
}
