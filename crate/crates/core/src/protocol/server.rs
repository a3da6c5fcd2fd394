use std::collections::BTreeMap;
use std::io::Write;
use std::net::{TcpListener, TcpStream};
use std::sync::Arc;

use crate::accel::AccelState;
use crate::denoiser::ModelWeights;
use crate::error::{Error, Result};
use crate::pipeline::{cloud_denoise, embed_all, initial_latent, replicate};
use crate::tensor::{FlopCounter, FlopKind};

use super::wire::{
    decode_frame, encode_frame, read_frame, ErrorReply, GenerateRequest, GenerateResponse,
    Message, StepReport,
};

pub(crate) fn flops_by_kind(f: &FlopCounter) -> [u64; 8] {
    FlopKind::ALL.map(|k| f.get(k))
}

pub(crate) fn counter_from_kinds(by_kind: &[u64; 8]) -> FlopCounter {
    let mut f = FlopCounter::new();
    for (k, v) in FlopKind::ALL.iter().zip(by_kind) {
        f.record(*k, *v);
    }
    f
}

/// Stateless cloud endpoint: every request carries everything needed to
/// reproduce its response.
#[derive(Debug, Clone, Default)]
pub struct Server {
    models: BTreeMap<String, Arc<ModelWeights>>,
}

impl Server {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_model(mut self, id: impl Into<String>, w: Arc<ModelWeights>) -> Self {
        self.register(id, w);
        self
    }

    pub fn register(&mut self, id: impl Into<String>, w: Arc<ModelWeights>) {
        self.models.insert(id.into(), w);
    }

    pub fn model(&self, id: &str) -> Option<&Arc<ModelWeights>> {
        self.models.get(id)
    }

    /// Runs the first `k` denoising steps for every candidate and returns the
    /// batch quantised to binary16.
    pub fn handle_request(&self, req: &GenerateRequest) -> Result<GenerateResponse> {
        let w = self
            .models
            .get(&req.model_id)
            .ok_or_else(|| Error::protocol(0, format!("unknown model id {:?}", req.model_id)))?;
        let steps = req.schedule.steps;
        let k = req.cloud_steps();
        if k > steps {
            return Err(Error::protocol(
                0,
                format!("switch point {k} exceeds {steps} schedule steps"),
            ));
        }
        if req.candidates.is_empty() {
            return Err(Error::protocol(0, "request has no candidates"));
        }
        req.accel
            .validate(steps)
            .map_err(|e| Error::protocol(0, e.to_string()))?;
        let schedule = req.schedule.build()?;
        let n = req.candidates.len();
        let texts = embed_all(&req.candidates, w)?;
        let batch = replicate(&initial_latent(req.seed, w), n)?;
        let mut state = AccelState::new(req.accel, req.seed);
        let mut flops = FlopCounter::new();
        let (z, records) =
            cloud_denoise(w, &schedule, batch, &texts, k, Some(&mut state), &mut flops)?;
        let latents = z.fp16_roundtrip()?;
        Ok(GenerateResponse {
            step_reached: steps - k,
            latents,
            flops_by_kind: flops_by_kind(&flops),
            steps: records
                .iter()
                .map(|r| StepReport {
                    iteration: r.iteration,
                    flops: r.flops.total(),
                    skipped_blocks: r.gates.skipped_blocks,
                    cached_sites: r.gates.cached_sites,
                    reused_sites: r.gates.reused_sites,
                })
                .collect(),
        })
    }

    /// Decodes one frame and produces the reply frame. Failures become error
    /// frames; only an encoding failure of the reply itself is returned as `Err`.
    pub fn handle_frame(&self, frame: &[u8]) -> Result<Vec<u8>> {
        let reply = match decode_frame(frame) {
            Ok(Message::Request(req)) => match self.handle_request(&req) {
                Ok(resp) => Message::Response(resp),
                Err(e) => Message::Error(ErrorReply {
                    message: e.to_string(),
                }),
            },
            Ok(_) => Message::Error(ErrorReply {
                message: "expected a request frame".into(),
            }),
            Err(e) => Message::Error(ErrorReply {
                message: e.to_string(),
            }),
        };
        encode_frame(&reply)
    }

    /// Serves one connection until the peer closes it or sends a malformed
    /// frame.
    pub fn serve_connection(&self, mut stream: TcpStream) -> Result<()> {
        loop {
            let frame = match read_frame(&mut stream) {
                Ok(Some(f)) => f,
                Ok(None) => return Ok(()),
                Err(e) => {
                    log::warn!("dropping connection: {e}");
                    return Err(e);
                }
            };
            if let Err(e) = decode_frame(&frame) {
                log::warn!("dropping connection after malformed frame: {e}");
                return Err(e);
            }
            let reply = self.handle_frame(&frame)?;
            stream.write_all(&reply)?;
            stream.flush()?;
        }
    }

    /// Accept loop; one thread per connection. Returns only if accepting fails.
    pub fn serve(self: Arc<Self>, listener: TcpListener) -> Result<()> {
        for conn in listener.incoming() {
            let stream = match conn {
                Ok(s) => s,
                Err(e) => {
                    log::warn!("accept failed: {e}");
                    continue;
                }
            };
            let server = Arc::clone(&self);
            std::thread::spawn(move || {
                let peer = stream.peer_addr().ok();
                log::debug!("connection from {peer:?}");
                let _ = server.serve_connection(stream);
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::accel::AccelConfig;
    use crate::denoiser::ModelConfig;
    use crate::pipeline::generate_local;
    use crate::protocol::wire::ScheduleParams;

    fn server() -> Server {
        let cfg = ModelConfig {
            res: 8,
            ..ModelConfig::default()
        };
        Server::new().with_model("toy", Arc::new(ModelWeights::generate(cfg, 11).unwrap()))
    }

    fn request(k: usize, cands: &[&str]) -> GenerateRequest {
        GenerateRequest {
            candidates: cands.iter().map(|s| s.to_string()).collect(),
            seed: 42,
            accel: AccelConfig::disabled(25, k),
            schedule: ScheduleParams::default(),
            model_id: "toy".into(),
        }
    }

    #[test]
    fn zero_steps_returns_quantised_seed_latent() {
        let s = server();
        let resp = s.handle_request(&request(0, &["a", "b", "c"])).unwrap();
        let w = s.model("toy").unwrap();
        let z = initial_latent(42, w).fp16_roundtrip().unwrap();
        assert_eq!(resp.step_reached, 25);
        for row in resp.latents.unstack() {
            assert_eq!(row.data(), z.data());
        }
        assert_eq!(resp.total_flops(), 0);
    }

    #[test]
    fn full_steps_match_local_generation_per_row() {
        let s = server();
        let cands = ["an old male", "an old female"];
        let resp = s.handle_request(&request(25, &cands)).unwrap();
        let w = s.model("toy").unwrap();
        let sched = ScheduleParams::default().build().unwrap();
        for (j, c) in cands.iter().enumerate() {
            let local = generate_local(c, 42, w, &sched, None).unwrap();
            assert_eq!(
                resp.latents.row(j).unwrap().data(),
                local.latent.fp16_roundtrip().unwrap().data()
            );
        }
        assert_ne!(resp.latents.row(0).unwrap(), resp.latents.row(1).unwrap());
        assert_eq!(resp.steps.len(), 25);
        assert_eq!(resp.steps.iter().map(|s| s.flops).sum::<u64>(), resp.total_flops());
    }

    #[test]
    fn stateless() {
        let s = server();
        let mut req = request(6, &["x y", "x z"]);
        req.accel = AccelConfig {
            switch_point: 6,
            ..AccelConfig::fast_preset()
        };
        let f = encode_frame(&Message::Request(req)).unwrap();
        let a = s.handle_frame(&f).unwrap();
        let b = s.handle_frame(&f).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn errors() {
        let s = server();
        assert!(matches!(s.handle_request(&request(26, &["a"])), Err(Error::Protocol { .. })));
        let mut req = request(1, &["a"]);
        req.model_id = "missing".into();
        assert!(matches!(s.handle_request(&req), Err(Error::Protocol { .. })));
        let reply = s.handle_frame(b"garbage!!!!!").unwrap();
        assert!(matches!(decode_frame(&reply).unwrap(), Message::Error(_)));
    }
}
