use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use oblix_core::accel::AccelConfig;
use oblix_core::costmodel::CostReport;
use oblix_core::oblivious::AttributeLexicon;
use oblix_core::protocol::{run_session, ClientConfig, Server, SimulatedTransport};

use crate::config::RunConfig;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grid {
    pub k: Vec<usize>,
    pub r: Vec<Option<usize>>,
    pub s: Vec<Option<usize>>,
    pub reuse: Vec<bool>,
    pub n: Vec<usize>,
}

fn parse_list<T>(v: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    v.split(',').map(|x| f(x.trim())).collect()
}

/// `never` (or `none`) disables a cache or skip point.
fn parse_point(x: &str) -> Result<Option<usize>> {
    match x {
        "never" | "none" | "off" => Ok(None),
        _ => Ok(Some(x.parse().with_context(|| format!("bad step {x:?}"))?)),
    }
}

impl Grid {
    /// `key=v1,v2;key=...` with keys `k`, `r`, `s`, `reuse`, `n`. Missing
    /// keys default to `r=never`, `s=never`, `reuse=0`, `n=1`.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut g = Grid {
            k: Vec::new(),
            r: vec![None],
            s: vec![None],
            reuse: vec![false],
            n: vec![1],
        };
        for part in spec.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, vals) = part
                .split_once('=')
                .with_context(|| format!("grid entry {part:?} is not key=values"))?;
            match key.trim() {
                "k" => g.k = parse_list(vals, |x| Ok(x.parse()?))?,
                "r" => g.r = parse_list(vals, parse_point)?,
                "s" => g.s = parse_list(vals, parse_point)?,
                "reuse" => {
                    g.reuse = parse_list(vals, |x| match x {
                        "1" | "on" | "true" => Ok(true),
                        "0" | "off" | "false" => Ok(false),
                        _ => bail!("bad reuse flag {x:?}"),
                    })?
                }
                "n" => g.n = parse_list(vals, |x| Ok(x.parse()?))?,
                other => bail!("unknown grid key {other:?}"),
            }
        }
        if g.k.is_empty() {
            bail!("grid needs at least one switch point (k=...)");
        }
        Ok(g)
    }
}

/// A prompt whose detections expand to exactly `n` candidates, built from a
/// subset of lexicon classes in lexicon order.
pub fn probe_prompt(lex: &AttributeLexicon, n: usize) -> Result<String> {
    let classes = lex.classes();
    for mask in 0u32..(1 << classes.len().min(16)) {
        let picked: Vec<_> = (0..classes.len()).filter(|i| mask & (1 << i) != 0).collect();
        let size: usize = picked.iter().map(|&i| classes[i].values.len()).product();
        if size == n {
            let words: Vec<&str> = picked
                .iter()
                .map(|&i| classes[i].values[0].canonical.as_str())
                .collect();
            return Ok(if words.is_empty() {
                "portrait photo of a lighthouse".to_string()
            } else {
                format!("portrait photo of a {} person", words.join(" "))
            });
        }
    }
    bail!("no combination of attribute classes yields {n} candidates")
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRecord {
    pub k: usize,
    pub r: usize,
    pub s: usize,
    pub reuse: bool,
    pub n: usize,
    pub server_flops: u64,
    pub server_attention_map_flops: u64,
    pub device_flops: u64,
    pub total_flops: u64,
    pub request_bytes: usize,
    pub response_bytes: usize,
    pub transfer_seconds: f64,
}

pub fn run_grid(rc: &RunConfig, g: &Grid) -> Result<Vec<BenchRecord>> {
    let steps = rc.client.schedule.steps;
    let never = steps + 1;
    let server = Arc::new(Server::new().with_model(rc.client.model_id.clone(), Arc::clone(&rc.cloud)));
    let mut out = Vec::new();
    for &n in &g.n {
        let prompt = probe_prompt(&rc.lexicon, n)?;
        for &k in &g.k {
            for &r in &g.r {
                for &s in &g.s {
                    for &reuse in &g.reuse {
                        let accel = AccelConfig {
                            switch_point: k,
                            cache_point: r.unwrap_or(never),
                            skip_point: s.unwrap_or(never),
                            reuse,
                            ..rc.client.accel
                        };
                        let cfg = ClientConfig {
                            accel,
                            ..rc.client.clone()
                        };
                        let mut t = SimulatedTransport::new(Arc::clone(&server), rc.file.channel);
                        let session = run_session(&prompt, &cfg, &rc.lexicon, &rc.device, &mut t)
                            .with_context(|| format!("grid point k={k} r={r:?} s={s:?} reuse={reuse} n={n}"))?;
                        let rep = CostReport::from_session(&session, &rc.file.channel);
                        out.push(BenchRecord {
                            k,
                            r: accel.cache_point,
                            s: accel.skip_point,
                            reuse,
                            n: session.candidates,
                            server_flops: rep.server_flops,
                            server_attention_map_flops: session.cloud_flops.attention_map(),
                            device_flops: rep.device_flops,
                            total_flops: rep.total_flops(),
                            request_bytes: rep.bytes_sent,
                            response_bytes: rep.bytes_received,
                            transfer_seconds: rep.transfer_seconds,
                        });
                    }
                }
            }
        }
    }
    Ok(out)
}
