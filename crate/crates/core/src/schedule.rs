//! Noise schedules, the forward process and the reverse-step samplers.
//!
//! Timestep `t` indexes the schedule (`1..=T`, noisiest at `T`, with
//! `ᾱ_0 = 1`). Sampling iterations are counted separately from 1 at the noisiest
//! step; [`NoiseSchedule::timestep_for_iteration`] converts between the two.
//! Per-element arithmetic is carried out in `f64` and rounded once to `f32`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Spacing {
    Linear,
    ScaledLinear,
}

impl Spacing {
    pub fn to_byte(self) -> u8 {
        match self {
            Spacing::Linear => 0,
            Spacing::ScaledLinear => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Spacing::Linear),
            1 => Some(Spacing::ScaledLinear),
            _ => None,
        }
    }
}

pub const DEFAULT_STEPS: usize = 25;
pub const DEFAULT_BETA_START: f64 = 0.00085;
pub const DEFAULT_BETA_END: f64 = 0.012;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub fn build_schedule(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    spacing: Spacing,
) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "beta range must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let lerp = |a: f64, b: f64, i: usize| {
        if steps == 1 {
            a
        } else {
            a + (b - a) * i as f64 / (steps - 1) as f64
        }
    };
    let betas = (0..steps)
        .map(|i| match spacing {
            Spacing::Linear => lerp(beta_start, beta_end, i),
            Spacing::ScaledLinear => lerp(beta_start.sqrt(), beta_end.sqrt(), i).powi(2),
        })
        .collect();
    NoiseSchedule::from_betas(betas)
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("empty beta sequence".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Config(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn default_latent() -> Self {
        build_schedule(
            DEFAULT_STEPS,
            DEFAULT_BETA_START,
            DEFAULT_BETA_END,
            Spacing::ScaledLinear,
        )
        .expect("default schedule is valid")
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(Error::Step(format!(
                "timestep {t} outside [1, {}]",
                self.steps()
            )))
        } else {
            Ok(())
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Schedule timestep handled by sampling iteration `iteration` (1-based).
    pub fn timestep_for_iteration(&self, iteration: usize) -> Result<usize> {
        if iteration == 0 || iteration > self.steps() {
            return Err(Error::Step(format!(
                "iteration {iteration} outside [1, {}]",
                self.steps()
            )));
        }
        Ok(self.steps() - iteration + 1)
    }

    /// Closed-form forward sample `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
    pub fn forward_diffuse(&self, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check(t)?;
        let ab = self.alpha_bar(t);
        combine(x0, ab.sqrt(), eps, (1.0 - ab).sqrt(), "forward_diffuse")
    }

    /// One step of `q(x_t | x_{t−1})`: `√(1−β_t)·x_{t−1} + √β_t·noise`.
    pub fn forward_step(&self, x_prev: &Tensor, t: usize, noise: &Tensor) -> Result<Tensor> {
        self.check(t)?;
        let b = self.beta(t);
        combine(x_prev, (1.0 - b).sqrt(), noise, b.sqrt(), "forward_step")
    }

    /// Stochastic reverse step with caller-supplied noise `z`:
    /// `x_{t−1} = (x_t − β_t/√(1−ᾱ_t)·ε̂)/√α_t + √β_t·z`.
    pub fn reverse_step_eq1(
        &self,
        x_t: &Tensor,
        eps_pred: &Tensor,
        t: usize,
        z: &Tensor,
    ) -> Result<Tensor> {
        self.check(t)?;
        same_shape(x_t, eps_pred, "reverse_step")?;
        same_shape(x_t, z, "reverse_step")?;
        let beta = self.beta(t);
        let inv_sqrt_alpha = 1.0 / self.alpha(t).sqrt();
        let eps_coeff = beta / (1.0 - self.alpha_bar(t)).sqrt();
        let sigma = beta.sqrt();
        let data = x_t
            .data()
            .iter()
            .zip(eps_pred.data())
            .zip(z.data())
            .map(|((&x, &e), &n)| {
                ((x as f64 - eps_coeff * e as f64) * inv_sqrt_alpha + sigma * n as f64) as f32
            })
            .collect();
        Tensor::new(x_t.shape().to_vec(), data)
    }

    /// Deterministic DDIM update from `t` to `t_prev < t`.
    pub fn ddim_step(
        &self,
        x_t: &Tensor,
        eps_pred: &Tensor,
        t: usize,
        t_prev: usize,
    ) -> Result<Tensor> {
        self.check(t)?;
        if t_prev >= t {
            return Err(Error::Step(format!(
                "ddim step needs t > t_prev, got {t} -> {t_prev}"
            )));
        }
        same_shape(x_t, eps_pred, "ddim_step")?;
        let ab = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t_prev);
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (sa_prev, sn_prev) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
        let data = x_t
            .data()
            .iter()
            .zip(eps_pred.data())
            .map(|(&x, &e)| {
                let (x, e) = (x as f64, e as f64);
                let x0 = (x - sn * e) / sa;
                (sa_prev * x0 + sn_prev * e) as f32
            })
            .collect();
        Tensor::new(x_t.shape().to_vec(), data)
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn combine(a: &Tensor, ca: f64, b: &Tensor, cb: f64, op: &'static str) -> Result<Tensor> {
    same_shape(a, b, op)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (ca * x as f64 + cb * y as f64) as f32)
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Alignment between a cloud scheduler and a (possibly longer) device one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepIndexMap {
    pub cloud_steps: usize,
    pub device_steps: usize,
    pub shift: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MappedStep {
    pub step: usize,
    pub clamped: bool,
}

impl StepIndexMap {
    pub fn identity(steps: usize) -> Self {
        Self {
            cloud_steps: steps,
            device_steps: steps,
            shift: 0,
        }
    }

    /// `t_device = t_cloud + Δt`, clamped into `[1, T_device]`.
    pub fn map_timestep(&self, t_cloud: usize) -> MappedStep {
        let raw = t_cloud as i64 + self.shift;
        let step = raw.clamp(1, self.device_steps.max(1) as i64) as usize;
        let clamped = step as i64 != raw;
        if clamped {
            log::warn!(
                "timestep shift clamped: {t_cloud} + {} -> {step} (device has {} steps)",
                self.shift,
                self.device_steps
            );
        }
        MappedStep { step, clamped }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn single_step_product() {
        let s = build_schedule(1, 0.5, 0.5, Spacing::Linear).unwrap();
        assert_eq!(s.alpha_bars(), &[0.5]);
    }

    #[test]
    fn two_step_product() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2]).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
        let lin = build_schedule(2, 0.1, 0.2, Spacing::Linear).unwrap();
        assert!((lin.alpha_bar(2) - 0.72).abs() < 1e-15);
    }

    #[test]
    fn default_schedule_invariants() {
        let s = NoiseSchedule::default_latent();
        assert_eq!(s.steps(), 25);
        assert!(s.alpha_bar(25) < s.alpha_bar(1));
        // Independent product in extended precision via log-sum.
        let sqrt_lo = DEFAULT_BETA_START.sqrt();
        let sqrt_hi = DEFAULT_BETA_END.sqrt();
        let mut log_acc = 0.0f64;
        for i in 0..25 {
            let b = (sqrt_lo + (sqrt_hi - sqrt_lo) * i as f64 / 24.0).powi(2);
            assert!(b > 0.0 && b < 1.0);
            log_acc += (-b).ln_1p();
            assert!((s.alpha_bar(i + 1) - log_acc.exp()).abs() < 1e-12);
        }
        for t in 2..=25 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(matches!(build_schedule(0, 0.1, 0.2, Spacing::Linear), Err(Error::Config(_))));
        assert!(build_schedule(5, 0.2, 0.1, Spacing::Linear).is_err());
        assert!(build_schedule(5, 0.0, 0.1, Spacing::Linear).is_err());
        assert!(build_schedule(5, 0.1, 1.0, Spacing::Linear).is_err());
    }

    #[test]
    fn forward_degenerate_and_zero_signal() {
        let s = NoiseSchedule::from_betas(vec![1e-300]).unwrap();
        assert_eq!(s.alpha_bar(1), 1.0);
        let mut rng = Rng::new(1);
        let x0 = Tensor::randn(vec![8], &mut rng);
        let eps = Tensor::randn(vec![8], &mut rng);
        assert_eq!(s.forward_diffuse(&x0, 1, &eps).unwrap(), x0);

        let s = NoiseSchedule::default_latent();
        let zero = Tensor::zeros(vec![8]);
        let got = s.forward_diffuse(&zero, 10, &eps).unwrap();
        let c = (1.0 - s.alpha_bar(10)).sqrt();
        for (g, e) in got.data().iter().zip(eps.data()) {
            assert_eq!(*g, (c * *e as f64) as f32);
        }
        assert!(matches!(s.forward_diffuse(&zero, 26, &eps), Err(Error::Step(_))));
        assert!(matches!(s.forward_diffuse(&zero, 0, &eps), Err(Error::Step(_))));
    }

    #[test]
    fn reverse_formula_collapse() {
        let s = NoiseSchedule::default_latent();
        let mut rng = Rng::new(2);
        let x = Tensor::randn(vec![16], &mut rng);
        let zero = Tensor::zeros(vec![16]);
        let got = s.reverse_step_eq1(&x, &zero, 7, &zero).unwrap();
        let inv = 1.0 / s.alpha(7).sqrt();
        for (g, v) in got.data().iter().zip(x.data()) {
            assert_eq!(*g, (*v as f64 * inv) as f32);
        }
    }

    #[test]
    fn reverse_no_noise_limit() {
        let s = NoiseSchedule::from_betas(vec![1e-12; 4]).unwrap();
        let mut rng = Rng::new(3);
        let x = Tensor::randn(vec![32], &mut rng);
        let eps = Tensor::randn(vec![32], &mut rng);
        let z = Tensor::randn(vec![32], &mut rng);
        let got = s.reverse_step_eq1(&x, &eps, 3, &z).unwrap();
        assert!(got.max_abs_diff(&x) < 1e-5);
    }

    #[test]
    fn ddim_final_step_exact() {
        let s = NoiseSchedule::default_latent();
        let mut rng = Rng::new(4);
        let x0 = Tensor::randn(vec![32], &mut rng);
        let eps = Tensor::randn(vec![32], &mut rng);
        let x1 = s.forward_diffuse(&x0, 1, &eps).unwrap();
        let back = s.ddim_step(&x1, &eps, 1, 0).unwrap();
        assert!(back.max_abs_diff(&x0) < 1e-6);
    }

    #[test]
    fn ddim_without_noise_prediction_rescales() {
        let s = NoiseSchedule::default_latent();
        let c = 0.75f64;
        let x = Tensor::filled(vec![4], (s.alpha_bar(9).sqrt() * c) as f32);
        let got = s.ddim_step(&x, &Tensor::zeros(vec![4]), 9, 5).unwrap();
        let want = s.alpha_bar(5).sqrt() * c;
        for g in got.data() {
            assert!((*g as f64 - want).abs() < 1e-7);
        }
    }

    #[test]
    fn ddim_rejects_non_monotone() {
        let s = NoiseSchedule::default_latent();
        let x = Tensor::zeros(vec![2]);
        assert!(matches!(s.ddim_step(&x, &x, 5, 5), Err(Error::Step(_))));
        assert!(matches!(s.ddim_step(&x, &x, 5, 7), Err(Error::Step(_))));
    }

    #[test]
    fn iteration_to_timestep() {
        let s = NoiseSchedule::default_latent();
        assert_eq!(s.timestep_for_iteration(1).unwrap(), 25);
        assert_eq!(s.timestep_for_iteration(25).unwrap(), 1);
        assert!(s.timestep_for_iteration(26).is_err());
    }

    #[test]
    fn timestep_shift() {
        let id = StepIndexMap::identity(25);
        for t in 1..=25 {
            assert_eq!(id.map_timestep(t), MappedStep { step: t, clamped: false });
        }
        let lcm = StepIndexMap {
            cloud_steps: 8,
            device_steps: 25,
            shift: 8,
        };
        assert_eq!(lcm.map_timestep(2).step, 10);
        assert!(!lcm.map_timestep(8).clamped);
        let tight = StepIndexMap {
            cloud_steps: 8,
            device_steps: 10,
            shift: 8,
        };
        assert_eq!(tight.map_timestep(5), MappedStep { step: 10, clamped: true });
    }

    #[test]
    fn stepwise_and_closed_form_agree_in_moments() {
        let s = NoiseSchedule::default_latent();
        let t = 10;
        let n = 10_000;
        let mut rng = Rng::new(99);
        let x0 = Tensor::filled(vec![n], 1.5);
        let closed = s
            .forward_diffuse(&x0, t, &Tensor::randn(vec![n], &mut rng))
            .unwrap();
        let mut x = x0.clone();
        for step in 1..=t {
            x = s.forward_step(&x, step, &Tensor::randn(vec![n], &mut rng)).unwrap();
        }
        let moments = |v: &Tensor| {
            let m = v.data().iter().map(|&a| a as f64).sum::<f64>() / n as f64;
            let var = v.data().iter().map(|&a| (a as f64 - m).powi(2)).sum::<f64>() / n as f64;
            (m, var)
        };
        let (m1, v1) = moments(&closed);
        let (m2, v2) = moments(&x);
        let var = 1.0 - s.alpha_bar(t);
        let mean_sigma = (var / n as f64).sqrt();
        // Var of a sample variance ≈ 2σ⁴/n.
        let var_sigma = (2.0 * var * var / n as f64).sqrt();
        let expected_mean = 1.5 * s.alpha_bar(t).sqrt();
        for (m, v) in [(m1, v1), (m2, v2)] {
            assert!((m - expected_mean).abs() < 3.0 * mean_sigma, "mean {m}");
            assert!((v - var).abs() < 3.0 * var_sigma, "var {v}");
        }
    }

    #[test]
    fn reverse_step_with_true_noise_shrinks_residual() {
        let s = NoiseSchedule::default_latent();
        let t = 12;
        let zero = Tensor::zeros(vec![64]);
        let (mut before, mut after) = (0.0f64, 0.0f64);
        for seed in 0..1000u64 {
            let mut rng = Rng::new(seed);
            let x0 = Tensor::randn(vec![64], &mut rng);
            let eps = Tensor::randn(vec![64], &mut rng);
            let xt = s.forward_diffuse(&x0, t, &eps).unwrap();
            let prev = s.reverse_step_eq1(&xt, &eps, t, &zero).unwrap();
            let (c_t, c_prev) = (s.alpha_bar(t).sqrt(), s.alpha_bar(t - 1).sqrt());
            for i in 0..64 {
                let x = x0.data()[i] as f64;
                before += (xt.data()[i] as f64 - c_t * x).powi(2);
                after += (prev.data()[i] as f64 - c_prev * x).powi(2);
            }
        }
        assert!(after < before, "{after} !< {before}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn alpha_bar_strictly_decreasing(
                steps in 1usize..60,
                start in 1e-5f64..0.2,
                span in 0.0f64..0.5,
                scaled in any::<bool>(),
            ) {
                let end = (start + span).min(0.9);
                let spacing = if scaled { Spacing::ScaledLinear } else { Spacing::Linear };
                let s = build_schedule(steps, start, end, spacing).unwrap();
                for t in 1..=steps {
                    prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
                    prop_assert!((s.alpha_bar(t) - s.alpha_bar(t - 1) * s.alpha(t)).abs() < 1e-15);
                }
            }

            #[test]
            fn map_timestep_monotone(shift in -30i64..30, cloud in 1usize..30, device in 1usize..40) {
                let m = StepIndexMap { cloud_steps: cloud, device_steps: device, shift };
                let mut last = 0;
                for t in 1..=cloud {
                    let got = m.map_timestep(t).step;
                    prop_assert!(got >= last);
                    prop_assert!((1..=device).contains(&got));
                    last = got;
                }
            }
        }
    }
}
