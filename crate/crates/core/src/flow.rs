//! Rectified-flow interpolation, loss, and the Euler ODE / SDE samplers.
//!
//! Time runs from noise (t = 1) to data (t = 0). The sampler takes
//! `num_steps` equal steps of size 1/n and evaluates the velocity at each
//! step's midpoint, so evaluation times live in [δ, 1 − δ] with δ = 1/(2n)
//! and σ_t never hits its singularity at t = 1.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub fn interpolate(z0: &Tensor, eps: &Tensor, t: f64) -> Result<Tensor> {
    z0.same_shape(eps, "interpolate")?;
    let data = z0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(a, b)| (1.0 - t) * a + t * b)
        .collect();
    Tensor::new(z0.shape().to_vec(), data)
}

pub fn velocity_target(z0: &Tensor, eps: &Tensor) -> Result<Tensor> {
    eps.axpy(-1.0, z0)
}

/// `w(t) · mean((pred − (eps − z0))²)`.
pub fn rf_loss(pred_v: &Tensor, z0: &Tensor, eps: &Tensor, t: f64, w: impl Fn(f64) -> f64) -> Result<f64> {
    let target = velocity_target(z0, eps)?;
    pred_v.same_shape(&target, "rf_loss")?;
    let mse = pred_v
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<f64>()
        / target.numel() as f64;
    Ok(w(t) * mse)
}

/// Tape version of [`rf_loss`] against a precomputed target velocity.
pub fn rf_loss_tape(tape: &mut Tape, pred_v: Var, target: &Tensor, weight: f64) -> Result<Var> {
    let target = tape.leaf(target.clone());
    let diff = tape.sub(pred_v, target)?;
    let sq = tape.mul(diff, diff)?;
    let mse = tape.mean(sq);
    Ok(tape.scale(mse, weight))
}

/// σ_t = a·sqrt(t / (1 − t)).
pub fn sigma(t: f64, a: f64) -> Result<f64> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::Domain(format!("σ_t needs 0 < t < 1, got t = {t}")));
    }
    if a < 0.0 {
        return Err(Error::Domain(format!("noise level a must be ≥ 0, got {a}")));
    }
    Ok(a * (t / (1.0 - t)).sqrt())
}

pub fn ode_euler_step(x: &Tensor, v: &Tensor, dt: f64) -> Result<Tensor> {
    x.axpy(dt, v)
}

/// Drift coefficients of the SDE mean: `mean = cx·x + cv·v`.
///
/// `dt` is signed (negative when integrating toward data); the noise scale
/// uses |dt|.
pub fn sde_coeffs(t: f64, dt: f64, a: f64) -> Result<(f64, f64, f64)> {
    let s = sigma(t, a)?;
    let c = s * s / (2.0 * t);
    let std = s * dt.abs().sqrt();
    Ok((1.0 + c * dt, dt * (1.0 + c * (1.0 - t)), std))
}

/// One stochastic step: returns (x_next, mean, std).
pub fn sde_step(x: &Tensor, v: &Tensor, t: f64, dt: f64, a: f64, noise: &Tensor) -> Result<(Tensor, Tensor, f64)> {
    x.same_shape(v, "sde_step velocity")?;
    x.same_shape(noise, "sde_step noise")?;
    let (cx, cv, std) = sde_coeffs(t, dt, a)?;
    // Same operation order as `sde_mean_tape`, so recomputed means match bitwise.
    let mean_data: Vec<f64> = x
        .data()
        .iter()
        .zip(v.data())
        .map(|(&xi, &vi)| xi * cx + vi * cv)
        .collect();
    let mean = Tensor::new(x.shape().to_vec(), mean_data)?;
    let next = mean.axpy(std, noise)?;
    Ok((next, mean, std))
}

/// Builds the SDE transition mean on a tape from a differentiable velocity.
pub fn sde_mean_tape(tape: &mut Tape, x: &Tensor, v: Var, t: f64, dt: f64, a: f64) -> Result<Var> {
    let (cx, cv, _) = sde_coeffs(t, dt, a)?;
    let xs = tape.leaf(x.scale(cx));
    let vs = tape.scale(v, cv);
    tape.add(xs, vs)
}

/// log N(x_next; mean, std²·I), summed over elements.
pub fn transition_log_prob(x_next: &Tensor, mean: &Tensor, std: f64) -> Result<f64> {
    if !(std > 0.0) {
        return Err(Error::Domain(format!("transition std must be > 0, got {std}")));
    }
    x_next.same_shape(mean, "transition_log_prob")?;
    let ss: f64 = x_next
        .data()
        .iter()
        .zip(mean.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let d = x_next.numel() as f64;
    Ok(ss * (-1.0 / (2.0 * std * std)) + (-0.5 * d * (2.0 * PI * std * std).ln()))
}

pub fn transition_log_prob_tape(tape: &mut Tape, x_next: &Tensor, mean: Var, std: f64) -> Result<Var> {
    if !(std > 0.0) {
        return Err(Error::Domain(format!("transition std must be > 0, got {std}")));
    }
    let xn = tape.leaf(x_next.clone());
    let diff = tape.sub(xn, mean)?;
    let ss = tape.sum_squares(diff);
    let d = x_next.numel() as f64;
    let scaled = tape.scale(ss, -1.0 / (2.0 * std * std));
    Ok(tape.add_scalar(scaled, -0.5 * d * (2.0 * PI * std * std).ln()))
}

pub fn cfg_velocity(v_cond: &Tensor, v_uncond: &Tensor, scale: f64) -> Result<Tensor> {
    v_cond.same_shape(v_uncond, "cfg_velocity")?;
    let data = v_uncond
        .data()
        .iter()
        .zip(v_cond.data())
        .map(|(u, c)| u + scale * (c - u))
        .collect();
    Tensor::new(v_cond.shape().to_vec(), data)
}

/// Uniform integration grid: evaluation times and the signed step.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub a: f64,
    pub num_steps: usize,
}

impl NoiseSchedule {
    pub fn new(a: f64, num_steps: usize) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::Config("num_steps must be ≥ 1".into()));
        }
        if !(a >= 0.0) {
            return Err(Error::Config(format!("noise level a must be ≥ 0, got {a}")));
        }
        Ok(Self { a, num_steps })
    }

    /// Step midpoints 1 − δ, 1 − 3δ, …, δ with δ = 1/(2n).
    pub fn t_grid(&self) -> Vec<f64> {
        let n = self.num_steps as f64;
        (0..self.num_steps)
            .map(|k| 1.0 - (2 * k + 1) as f64 / (2.0 * n))
            .collect()
    }

    pub fn dt(&self) -> f64 {
        -1.0 / self.num_steps as f64
    }

    pub fn sigmas(&self) -> Vec<f64> {
        self.t_grid()
            .into_iter()
            .map(|t| sigma(t, self.a).expect("grid excludes endpoints"))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerMode {
    Ode,
    Sde,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub cfg_scale: f64,
    pub mode: SamplerMode,
    pub seed: u64,
    /// Noise level `a` used in SDE mode.
    pub noise_a: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            num_steps: 50,
            cfg_scale: 2.5,
            mode: SamplerMode::Ode,
            seed: 0,
            noise_a: 1.0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_steps == 0 {
            return Err(Error::Config("sampler num_steps must be ≥ 1".into()));
        }
        if !(self.cfg_scale >= 0.0) {
            return Err(Error::Config(format!("cfg_scale must be ≥ 0, got {}", self.cfg_scale)));
        }
        if !(self.noise_a >= 0.0) {
            return Err(Error::Config(format!("noise_a must be ≥ 0, got {}", self.noise_a)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Tensor>,
    pub times: Vec<f64>,
    pub dt: f64,
    pub noise_a: f64,
    pub step_means: Vec<Tensor>,
    pub step_std: Vec<f64>,
    /// Empty for ODE trajectories and for degenerate a = 0 SDE runs.
    pub log_probs: Vec<f64>,
    pub video: Tensor,
}

impl Trajectory {
    pub fn num_steps(&self) -> usize {
        self.times.len()
    }

    pub fn is_stochastic(&self) -> bool {
        !self.log_probs.is_empty()
    }

    pub fn total_log_prob(&self) -> f64 {
        self.log_probs.iter().sum()
    }
}

/// Which conditioning branch a velocity query refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Cond,
    Uncond,
}

/// A conditioned velocity field v(x, t).
pub trait VelocityField {
    fn velocity(&self, x: &Tensor, t: f64, branch: Branch) -> Result<Tensor>;
}

impl<F> VelocityField for F
where
    F: Fn(&Tensor, f64, Branch) -> Result<Tensor>,
{
    fn velocity(&self, x: &Tensor, t: f64, branch: Branch) -> Result<Tensor> {
        self(x, t, branch)
    }
}

/// Classifier-free guided velocity; skips the branch a scale of 0 or 1 ignores.
pub fn guided_velocity<M: VelocityField + ?Sized>(model: &M, x: &Tensor, t: f64, scale: f64) -> Result<Tensor> {
    if scale == 1.0 {
        return model.velocity(x, t, Branch::Cond);
    }
    if scale == 0.0 {
        return model.velocity(x, t, Branch::Uncond);
    }
    let vc = model.velocity(x, t, Branch::Cond)?;
    let vu = model.velocity(x, t, Branch::Uncond)?;
    cfg_velocity(&vc, &vu, scale)
}

/// Independent RNG stream for (seed, trajectory, step).
pub fn stream_rng(seed: u64, traj: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(traj.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ step.rotate_left(32) ^ step);
    rng
}

pub(crate) const INIT_NOISE_STEP: u64 = u64::MAX;

pub fn gaussian(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Integrates from noise at t = 1 to t = 0.
pub fn sample<M: VelocityField + ?Sized>(
    model: &M,
    shape: &[usize],
    cfg: &SamplerConfig,
    traj_index: u64,
) -> Result<Trajectory> {
    cfg.validate()?;
    let a = match cfg.mode {
        SamplerMode::Ode => 0.0,
        SamplerMode::Sde => cfg.noise_a,
    };
    let sched = NoiseSchedule::new(a, cfg.num_steps)?;
    let dt = sched.dt();
    let x0 = gaussian(shape, &mut stream_rng(cfg.seed, traj_index, INIT_NOISE_STEP));

    let mut states = vec![x0];
    let mut means = Vec::with_capacity(cfg.num_steps);
    let mut stds = Vec::with_capacity(cfg.num_steps);
    let mut log_probs = Vec::new();
    let times = sched.t_grid();
    for (k, &t) in times.iter().enumerate() {
        let x = states.last().unwrap();
        let v = guided_velocity(model, x, t, cfg.cfg_scale)?;
        let (next, mean, std) = match cfg.mode {
            SamplerMode::Ode => {
                let next = ode_euler_step(x, &v, dt)?;
                (next.clone(), next, 0.0)
            }
            SamplerMode::Sde => {
                let noise = gaussian(shape, &mut stream_rng(cfg.seed, traj_index, k as u64));
                let (next, mean, std) = sde_step(x, &v, t, dt, a, &noise)?;
                if std > 0.0 {
                    log_probs.push(transition_log_prob(&next, &mean, std)?);
                }
                (next, mean, std)
            }
        };
        if !next.is_finite() {
            return Err(Error::Numeric(format!("sampler diverged at step {k} (t = {t})")));
        }
        means.push(mean);
        stds.push(std);
        states.push(next);
    }
    Ok(Trajectory {
        video: states.last().unwrap().clone(),
        states,
        times,
        dt,
        noise_a: a,
        step_means: means,
        step_std: stds,
        log_probs,
    })
}
