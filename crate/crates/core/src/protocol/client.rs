use serde::{Deserialize, Serialize};

use crate::accel::AccelConfig;
use crate::denoiser::{decode_latent, embed_prompt, Image, ModelWeights};
use crate::error::{Error, Result};
use crate::oblivious::{extract_latent, transform, AttributeLexicon, CandidateSet};
use crate::pipeline::{device_denoise, initial_latent, StepRecord};
use crate::schedule::StepIndexMap;
use crate::security::{Direction, Transcript};
use crate::tensor::{FlopCounter, Tensor};

use super::server::counter_from_kinds;
use super::transport::Transport;
use super::wire::{
    decode_frame, encode_frame, GenerateRequest, GenerateResponse, Message, ScheduleParams,
    StepReport,
};

/// Everything the client needs besides the prompt and the device model.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientConfig {
    pub model_id: String,
    pub seed: u64,
    /// Cloud schedule; also defines the sampling iterations.
    pub schedule: ScheduleParams,
    /// Gates and switch point `k`.
    pub accel: AccelConfig,
    pub device_schedule: ScheduleParams,
    /// `Δt` added to cloud timesteps to index the device schedule.
    pub timestep_shift: i64,
    /// Extra attempts after a transport failure.
    pub retries: usize,
}

impl Default for ClientConfig {
    fn default() -> Self {
        let schedule = ScheduleParams::default();
        Self {
            model_id: "toy".into(),
            seed: 0,
            schedule,
            accel: AccelConfig::disabled(schedule.steps, 10),
            device_schedule: schedule,
            timestep_shift: 0,
            retries: 2,
        }
    }
}

impl ClientConfig {
    pub fn step_map(&self) -> StepIndexMap {
        StepIndexMap {
            cloud_steps: self.schedule.steps,
            device_steps: self.device_schedule.steps,
            shift: self.timestep_shift,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.accel.validate(self.schedule.steps)?;
        self.schedule.build()?;
        self.device_schedule.build()?;
        Ok(())
    }
}

/// Detection and expansion followed by request assembly. The candidate set
/// (with the private real index) stays with the caller.
pub fn build_request(
    prompt: &str,
    cfg: &ClientConfig,
    lex: &AttributeLexicon,
) -> Result<(CandidateSet, GenerateRequest)> {
    let cset = transform(prompt, lex)?;
    let req = GenerateRequest {
        candidates: cset.prompts().to_vec(),
        seed: cfg.seed,
        accel: cfg.accel,
        schedule: cfg.schedule,
        model_id: cfg.model_id.clone(),
    };
    Ok((cset, req))
}

/// Result of one hybrid session.
#[derive(Debug, Clone)]
pub struct SessionOutput {
    pub image: Image,
    pub latent: Tensor,
    pub candidates: usize,
    /// Latent received at the switch point, after dequantisation.
    pub handoff: Option<Tensor>,
    pub cloud_steps: Vec<StepReport>,
    pub cloud_flops: FlopCounter,
    pub device_steps: Vec<StepRecord>,
    pub device_flops: FlopCounter,
    pub transcript: Transcript,
    /// True when `k = 0` and the network was never used.
    pub device_only: bool,
}

fn exchange_with_retry(
    transport: &mut dyn Transport,
    frame: &[u8],
    retries: usize,
    transcript: &mut Transcript,
) -> Result<Vec<u8>> {
    let mut last = None;
    for attempt in 0..=retries {
        transcript.push(Direction::ToServer, frame.to_vec());
        match transport.exchange(frame) {
            Ok(reply) => {
                transcript.push(Direction::ToClient, reply.clone());
                return Ok(reply);
            }
            Err(e @ Error::Transport(_)) => {
                log::warn!("transport failure on attempt {}: {e}", attempt + 1);
                last = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    Err(Error::Session(format!(
        "transport failed after {} attempts: {}",
        retries + 1,
        last.map(|e| e.to_string()).unwrap_or_default()
    )))
}

fn expect_response(reply: &[u8]) -> Result<GenerateResponse> {
    match decode_frame(reply)? {
        Message::Response(r) => Ok(r),
        Message::Error(e) => Err(Error::Session(format!("server rejected request: {}", e.message))),
        Message::Request(_) => Err(Error::protocol(4, "server answered with a request frame")),
    }
}

/// The oblivious hybrid session: the cloud denoises every candidate for `k`
/// steps, the device keeps the real row and finishes conditioned on the
/// prompt as typed.
pub fn run_session(
    prompt: &str,
    cfg: &ClientConfig,
    lex: &AttributeLexicon,
    device: &ModelWeights,
    transport: &mut dyn Transport,
) -> Result<SessionOutput> {
    cfg.validate()?;
    let (cset, req) = build_request(prompt, cfg, lex)?;
    let text = embed_prompt(prompt, device.config())?;
    let k = cfg.accel.switch_point;
    let mut transcript = Transcript::default();

    let (start, handoff, cloud_steps, cloud_flops) = if k == 0 {
        (initial_latent(cfg.seed, device), None, Vec::new(), FlopCounter::new())
    } else {
        let frame = encode_frame(&Message::Request(req))?;
        let reply = exchange_with_retry(transport, &frame, cfg.retries, &mut transcript)?;
        let resp = expect_response(&reply)?;
        let expected_step = cfg.schedule.steps - k;
        if resp.step_reached != expected_step {
            return Err(Error::protocol(
                super::wire::HEADER_LEN,
                format!("server stopped at step {}, expected {expected_step}", resp.step_reached),
            ));
        }
        let latent = extract_latent(&resp.latents, &cset)?;
        if latent.shape() != device.config().latent_shape().as_slice() {
            return Err(Error::protocol(
                super::wire::HEADER_LEN,
                format!("latent shape {:?} does not fit the device model", latent.shape()),
            ));
        }
        let flops = counter_from_kinds(&resp.flops_by_kind);
        (latent.clone(), Some(latent), resp.steps, flops)
    };

    let device_schedule = cfg.device_schedule.build()?;
    let mut device_flops = FlopCounter::new();
    let (latent, device_steps) = device_denoise(
        device,
        &device_schedule,
        &cfg.step_map(),
        start,
        &text,
        cfg.schedule.steps,
        k,
        &mut device_flops,
    )?;
    let image = decode_latent(&latent, device)?;
    Ok(SessionOutput {
        image,
        latent,
        candidates: cset.len(),
        handoff,
        cloud_steps,
        cloud_flops,
        device_steps,
        device_flops,
        transcript,
        device_only: k == 0,
    })
}

/// Serialisable summary of a session's shape, for reports.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SessionSummary {
    pub candidates: usize,
    pub switch_point: usize,
    pub steps: usize,
    pub device_only: bool,
}

impl SessionOutput {
    pub fn summary(&self, cfg: &ClientConfig) -> SessionSummary {
        SessionSummary {
            candidates: self.candidates,
            switch_point: cfg.accel.switch_point,
            steps: cfg.schedule.steps,
            device_only: self.device_only,
        }
    }
}
