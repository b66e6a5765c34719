//! Diffusion time discretization, forward corruption, v-prediction algebra
//! and the DDIM reverse update.
//!
//! `alpha_bar[t]` is the cumulative signal coefficient at step `t`, with
//! `alpha_bar[0] = 1` at the data end and `alpha_bar[T]` close to zero.
//! `sigma[t - 1]` is the stochastic scale used when stepping away from `t`.

use guidnoise_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleKind {
    /// `cos²(((t/T) + s)/(1 + s) · π/2)`, normalized to 1 at `t = 0`.
    Cosine { s: f64 },
    /// DDPM linear betas.
    Linear { beta_start: f64, beta_end: f64 },
}

impl Default for ScheduleKind {
    fn default() -> Self {
        ScheduleKind::Cosine { s: 0.008 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    steps: usize,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

/// A corrupted latent together with its step index.
#[derive(Clone, Debug)]
pub struct DiffusionState {
    pub x_t: Tensor,
    pub t: usize,
}

pub fn cosine_alpha_bar(t: usize, steps: usize, s: f64) -> f64 {
    let f = |t: f64| (((t / steps as f64) + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
    f(t as f64) / f(0.0)
}

impl DiffusionSchedule {
    /// Deterministic (all `sigma = 0`) schedule with `steps` steps.
    pub fn build(steps: usize, kind: ScheduleKind) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidConfig(format!("schedule needs T >= 2, got {steps}")));
        }
        let alpha_bar: Vec<f64> = match kind {
            ScheduleKind::Cosine { s } => {
                if !(s > 0.0) {
                    return Err(Error::InvalidConfig(format!("cosine offset must be > 0, got {s}")));
                }
                (0..=steps).map(|t| cosine_alpha_bar(t, steps, s)).collect()
            }
            ScheduleKind::Linear {
                beta_start,
                beta_end,
            } => {
                let mut acc = 1.0;
                let mut out = vec![1.0];
                for i in 0..steps {
                    let beta = beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64;
                    acc *= 1.0 - beta;
                    out.push(acc);
                }
                out
            }
        };
        Self::from_parts(alpha_bar, vec![0.0; steps])
    }

    /// Validates a hand-built schedule.
    pub fn from_parts(alpha_bar: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        let steps = sigma.len();
        if steps < 2 || alpha_bar.len() != steps + 1 {
            return Err(Error::InvalidConfig(format!(
                "schedule needs T >= 2 and T + 1 alpha_bar values, got T = {steps}, {} values",
                alpha_bar.len()
            )));
        }
        if alpha_bar[0] < 1.0 - 1e-5 {
            return Err(Error::InvalidConfig(format!("alpha_bar[0] = {} < 1 - 1e-5", alpha_bar[0])));
        }
        if alpha_bar[steps] > 1e-3 {
            return Err(Error::InvalidConfig(format!(
                "alpha_bar[T] = {} > 1e-3; the chain does not reach noise",
                alpha_bar[steps]
            )));
        }
        for (t, w) in alpha_bar.windows(2).enumerate() {
            if !(w[1] < w[0]) {
                return Err(Error::InvalidConfig(format!("alpha_bar not strictly decreasing at t = {}", t + 1)));
            }
        }
        if alpha_bar.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(Error::InvalidConfig("alpha_bar values must lie in (0, 1]".into()));
        }
        for (i, &s) in sigma.iter().enumerate() {
            let max = (1.0 - alpha_bar[i]).sqrt();
            if !(s >= 0.0 && s <= max + 1e-12) {
                return Err(Error::InvalidConfig(format!(
                    "sigma[{i}] = {s} outside [0, {max}]"
                )));
            }
        }
        Ok(Self {
            steps,
            alpha_bar,
            sigma,
        })
    }

    /// Replaces sigma with the DDIM interpolation `eta · sqrt((1-ᾱ_{t-1})/(1-ᾱ_t) · (1 - ᾱ_t/ᾱ_{t-1}))`.
    pub fn with_eta(self, eta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::InvalidConfig(format!("eta must lie in [0, 1], got {eta}")));
        }
        let sigma = (1..=self.steps)
            .map(|t| ddim_sigma(eta, self.alpha_bar[t], self.alpha_bar[t - 1]))
            .collect();
        Self::from_parts(self.alpha_bar, sigma)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Stochastic scale of the update leaving step `t` (`1 ≤ t ≤ T`).
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    pub fn is_deterministic(&self) -> bool {
        self.sigma.iter().all(|&s| s == 0.0)
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps {
            return Err(Error::IndexOutOfRange {
                index: t,
                max: self.steps,
            });
        }
        Ok(())
    }

    pub fn forward_diffuse(&self, x0: &Tensor, eps: &Tensor, t: usize) -> Result<Tensor> {
        self.check_t(t)?;
        forward_diffuse_at(x0, eps, self.alpha_bar[t])
    }

    pub fn v_target(&self, x0: &Tensor, eps: &Tensor, t: usize) -> Result<Tensor> {
        self.check_t(t)?;
        v_target_at(x0, eps, self.alpha_bar[t])
    }

    pub fn eps_from_v(&self, x_t: &Tensor, v: &Tensor, t: usize) -> Result<Tensor> {
        self.check_t(t)?;
        eps_from_v_at(x_t, v, self.alpha_bar[t])
    }

    pub fn x0_from_v(&self, x_t: &Tensor, v: &Tensor, t: usize) -> Result<Tensor> {
        self.check_t(t)?;
        x0_from_v_at(x_t, v, self.alpha_bar[t])
    }

    /// The DDIM update from `t` to `t_prev` given a noise estimate.
    pub fn ddim_step(
        &self,
        x_t: &Tensor,
        eps_hat: &Tensor,
        t: usize,
        t_prev: usize,
        noise: Option<&Tensor>,
    ) -> Result<Tensor> {
        self.check_step(t, t_prev)?;
        ddim_step_at(
            x_t,
            eps_hat,
            self.alpha_bar[t],
            self.alpha_bar[t_prev],
            self.sigma(t),
            noise,
        )
    }

    /// The same update driven by a v estimate.
    ///
    /// Routes through `x̂0 = x0_from_v` instead of dividing by `sqrt(ᾱ_t)`,
    /// which stays well conditioned where `ᾱ_t` underflows toward zero.
    pub fn ddim_step_v(
        &self,
        x_t: &Tensor,
        v_hat: &Tensor,
        t: usize,
        t_prev: usize,
        noise: Option<&Tensor>,
    ) -> Result<Tensor> {
        self.check_step(t, t_prev)?;
        ddim_step_v_at(x_t, v_hat, self.alpha_bar[t], self.alpha_bar[t_prev], self.sigma(t), noise)
    }

    fn check_step(&self, t: usize, t_prev: usize) -> Result<()> {
        self.check_t(t)?;
        if t == 0 || t_prev >= t {
            return Err(Error::InvalidConfig(format!("ddim step needs t_prev < t, got {t_prev} -> {t}")));
        }
        Ok(())
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(a.shape(), b.shape()));
    }
    Ok(())
}

/// `a·x + b·y`
fn lincomb(x: &Tensor, a: f64, y: &Tensor, b: f64) -> Result<Tensor> {
    same_shape(x, y)?;
    Ok(guidnoise_tensor::lincomb(a as f32, x, b as f32, y)?)
}

pub fn forward_diffuse_at(x0: &Tensor, eps: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    lincomb(x0, alpha_bar.sqrt(), eps, (1.0 - alpha_bar).sqrt())
}

pub fn v_target_at(x0: &Tensor, eps: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    lincomb(eps, alpha_bar.sqrt(), x0, -(1.0 - alpha_bar).sqrt())
}

pub fn eps_from_v_at(x_t: &Tensor, v: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    lincomb(v, alpha_bar.sqrt(), x_t, (1.0 - alpha_bar).sqrt())
}

pub fn x0_from_v_at(x_t: &Tensor, v: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    lincomb(x_t, alpha_bar.sqrt(), v, -(1.0 - alpha_bar).sqrt())
}

pub fn ddim_step_at(
    x_t: &Tensor,
    eps_hat: &Tensor,
    alpha_bar: f64,
    alpha_bar_prev: f64,
    sigma: f64,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    let rest = 1.0 - alpha_bar_prev - sigma * sigma;
    if rest < 0.0 {
        return Err(Error::InvalidSigma(rest));
    }
    // x̂0 is folded into a single combination of x_t and ε̂; forming it
    // explicitly amplifies the rounding of x_t by 1/sqrt(ᾱ_t).
    let a = (alpha_bar_prev / alpha_bar).sqrt();
    let b = rest.sqrt() - a * (1.0 - alpha_bar).sqrt();
    let out = lincomb(x_t, a, eps_hat, b)?;
    add_noise(out, sigma, noise)
}

pub fn ddim_step_v_at(
    x_t: &Tensor,
    v_hat: &Tensor,
    alpha_bar: f64,
    alpha_bar_prev: f64,
    sigma: f64,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    let x0 = x0_from_v_at(x_t, v_hat, alpha_bar)?;
    let eps = eps_from_v_at(x_t, v_hat, alpha_bar)?;
    recombine(&x0, &eps, alpha_bar_prev, sigma, noise)
}

/// DDIM stochastic scale for a jump from `ᾱ` to `ᾱ_prev`.
pub fn ddim_sigma(eta: f64, alpha_bar: f64, alpha_bar_prev: f64) -> f64 {
    eta * ((1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * (1.0 - alpha_bar / alpha_bar_prev)).max(0.0).sqrt()
}

fn recombine(
    x0: &Tensor,
    eps: &Tensor,
    alpha_bar_prev: f64,
    sigma: f64,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    let rest = 1.0 - alpha_bar_prev - sigma * sigma;
    if rest < 0.0 {
        return Err(Error::InvalidSigma(rest));
    }
    let out = lincomb(x0, alpha_bar_prev.sqrt(), eps, rest.sqrt())?;
    add_noise(out, sigma, noise)
}

fn add_noise(out: Tensor, sigma: f64, noise: Option<&Tensor>) -> Result<Tensor> {
    match (sigma > 0.0, noise) {
        (true, Some(n)) => {
            lincomb(&out, 1.0, n, sigma)
        }
        (false, None) => Ok(out),
        (true, None) => Err(Error::InvalidConfig("sigma > 0 requires a noise tensor".into())),
        (false, Some(_)) => Err(Error::InvalidConfig("noise given for a deterministic step".into())),
    }
}
