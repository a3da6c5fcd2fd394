//! Sampling loops shared by the server, the device and the local references.

use crate::accel::{AccelConfig, AccelState, StepGates};
use crate::denoiser::{decode_latent, embed_prompt, Image, ModelWeights, StepIndex, TextEmbedding};
use crate::error::{Error, Result};
use crate::schedule::{NoiseSchedule, StepIndexMap};
use crate::tensor::{FlopCounter, Rng, Tensor};

/// Which party executed a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Cloud,
    Device,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub side: Side,
    pub iteration: usize,
    pub timestep: usize,
    pub flops: FlopCounter,
    pub gates: StepGates,
}

/// `z_T` for one image, drawn from the shared seed.
pub fn initial_latent(seed: u64, w: &ModelWeights) -> Tensor {
    Tensor::randn(w.config().latent_shape(), &mut Rng::new(seed))
}

/// Stacks `n` copies of a latent into a batch.
pub fn replicate(latent: &Tensor, n: usize) -> Result<Tensor> {
    Tensor::stack(&vec![latent.clone(); n])
}

pub fn embed_all(prompts: &[String], w: &ModelWeights) -> Result<Vec<TextEmbedding>> {
    prompts.iter().map(|p| embed_prompt(p, w.config())).collect()
}

/// Runs sampling iterations `1..=k` on a batch `[N, C, res, res]`, one text
/// embedding per row. Iteration `i` denoises timestep `T − i + 1` with a DDIM
/// update. With `accel = None` no acceleration code runs.
pub fn cloud_denoise(
    w: &ModelWeights,
    schedule: &NoiseSchedule,
    batch: Tensor,
    texts: &[TextEmbedding],
    k: usize,
    mut accel: Option<&mut AccelState>,
    flops: &mut FlopCounter,
) -> Result<(Tensor, Vec<StepRecord>)> {
    if k > schedule.steps() {
        return Err(Error::Step(format!(
            "{k} cloud steps exceed a {}-step schedule",
            schedule.steps()
        )));
    }
    let mut z = batch;
    let mut records = Vec::with_capacity(k);
    for iteration in 1..=k {
        let t = schedule.timestep_for_iteration(iteration)?;
        let before = flops.clone();
        let step = StepIndex {
            iteration,
            timestep: t,
        };
        let (eps, gates) = w.unet_forward(&z, texts, step, accel.as_deref_mut(), flops)?;
        z = schedule.ddim_step(&z, &eps, t, t - 1)?;
        records.push(StepRecord {
            side: Side::Cloud,
            iteration,
            timestep: t,
            flops: flops.since(&before),
            gates,
        });
    }
    Ok((z, records))
}

/// Device continuation for one latent: cloud timesteps `T − k, …, 1` are mapped
/// onto the device schedule through `map` and denoised without acceleration.
pub fn device_denoise(
    w: &ModelWeights,
    schedule: &NoiseSchedule,
    map: &StepIndexMap,
    latent: Tensor,
    text: &TextEmbedding,
    cloud_steps: usize,
    k: usize,
    flops: &mut FlopCounter,
) -> Result<(Tensor, Vec<StepRecord>)> {
    if k > cloud_steps {
        return Err(Error::Step(format!("switch point {k} exceeds {cloud_steps} steps")));
    }
    if map.device_steps != schedule.steps() {
        return Err(Error::Config(format!(
            "step map targets {} device steps, schedule has {}",
            map.device_steps,
            schedule.steps()
        )));
    }
    let batch = latent.reshape({
        let mut s = vec![1];
        s.extend(w.config().latent_shape());
        s
    })?;
    let texts = std::slice::from_ref(text);
    let mut z = batch;
    let mut records = Vec::new();
    for iteration in k + 1..=cloud_steps {
        let t_cloud = cloud_steps - iteration + 1;
        let t = map.map_timestep(t_cloud).step;
        let t_prev = if t_cloud == 1 {
            0
        } else {
            map.map_timestep(t_cloud - 1).step
        };
        if t_prev >= t {
            log::warn!("device step {iteration} collapses to timestep {t}; skipped");
            continue;
        }
        let before = flops.clone();
        let step = StepIndex {
            iteration,
            timestep: t,
        };
        let (eps, gates) = w.unet_forward(&z, texts, step, None, flops)?;
        z = schedule.ddim_step(&z, &eps, t, t_prev)?;
        records.push(StepRecord {
            side: Side::Device,
            iteration,
            timestep: t,
            flops: flops.since(&before),
            gates,
        });
    }
    Ok((z.reshape(w.config().latent_shape())?, records))
}

/// Single-party generation of one prompt over the full schedule.
#[derive(Debug, Clone)]
pub struct LocalGeneration {
    pub latent: Tensor,
    pub image: Image,
    pub steps: Vec<StepRecord>,
    pub flops: FlopCounter,
}

/// Full-schedule generation on one machine. `accel = None` runs the plain
/// pipeline; otherwise the gates of the given config apply (batch of one).
pub fn generate_local(
    prompt: &str,
    seed: u64,
    w: &ModelWeights,
    schedule: &NoiseSchedule,
    accel: Option<&AccelConfig>,
) -> Result<LocalGeneration> {
    let text = embed_prompt(prompt, w.config())?;
    let batch = replicate(&initial_latent(seed, w), 1)?;
    let mut flops = FlopCounter::new();
    let mut state = accel.map(|c| AccelState::new(*c, seed));
    let (z, steps) = cloud_denoise(
        w,
        schedule,
        batch,
        std::slice::from_ref(&text),
        schedule.steps(),
        state.as_mut(),
        &mut flops,
    )?;
    let latent = z.row(0)?;
    let image = decode_latent(&latent, w)?;
    Ok(LocalGeneration {
        latent,
        image,
        steps,
        flops,
    })
}
