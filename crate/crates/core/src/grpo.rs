//! Group-relative policy optimisation of the SDE sampler, and an offline
//! DPO baseline.
//!
//! A policy is anything that can roll out a stochastic trajectory and
//! rebuild each step's Gaussian transition mean on a tape. The per-step
//! likelihood ratio is exp(log N(x_{k+1}; μ_θ(x_k), s_k²) − log p_old).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conditioner::Condition;
use crate::error::{Error, Result};
use crate::flow::{
    sample, sde_mean_tape, stream_rng, transition_log_prob_tape, SamplerConfig, SamplerMode,
    Trajectory,
};
use crate::hia::VideoModel;
use crate::params::{clip_grad_norm, global_norm, AdamW, AdamWConfig, Bound, ParamId, ParamSet};
use crate::reward::{face_reward, total_reward, RewardModel, RewardWeights};
use crate::sprite::SceneSample;
use crate::tensor::{Tape, Tensor, Var, DIV_EPS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_eps: f64,
    /// Weight of the per-element transition KL toward the reference.
    pub kl_coeff: f64,
    pub optimizer: AdamWConfig,
    pub max_grad_norm: f64,
    pub batch_size: usize,
    pub noise_a: f64,
    /// SDE steps per rollout.
    pub num_steps: usize,
    /// Guidance scale used inside rollouts.
    pub cfg_scale: f64,
    /// DPO temperature.
    pub dpo_eta: f64,
    pub seed: u64,
    /// Outer steps for a post-training run.
    pub steps: u64,
    /// Offline groups pre-generated for DPO pairs.
    pub dpo_groups: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            clip_eps: 0.2,
            kl_coeff: 0.01,
            optimizer: AdamWConfig::default(),
            max_grad_norm: 1.0,
            batch_size: 32,
            noise_a: 1.0,
            num_steps: 10,
            cfg_scale: 2.5,
            dpo_eta: 1.0,
            seed: 0,
            steps: 300,
            dpo_groups: 64,
        }
    }
}

impl GrpoConfig {
    /// Settings that make progress on one CPU core within a few hundred
    /// steps: small groups and batches, and a learning rate sized for a
    /// freshly trained toy model rather than a pretrained giant.
    pub fn desk() -> Self {
        Self {
            group_size: 4,
            batch_size: 2,
            optimizer: AdamWConfig {
                lr: 2e-4,
                ..AdamWConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Config(format!("grpo.group_size must be ≥ 2, got {}", self.group_size)));
        }
        if !(self.clip_eps > 0.0) {
            return Err(Error::Config(format!("grpo.clip_eps must be > 0, got {}", self.clip_eps)));
        }
        if !(self.kl_coeff >= 0.0) {
            return Err(Error::Config(format!("grpo.kl_coeff must be ≥ 0, got {}", self.kl_coeff)));
        }
        if !(self.max_grad_norm > 0.0) {
            return Err(Error::Config("grpo.max_grad_norm must be > 0".into()));
        }
        if self.batch_size == 0 || self.num_steps == 0 {
            return Err(Error::Config("grpo.batch_size and grpo.num_steps must be ≥ 1".into()));
        }
        if !(self.noise_a > 0.0) {
            return Err(Error::Config(format!(
                "grpo.noise_a must be > 0 (a = {} gives deterministic rollouts)",
                self.noise_a
            )));
        }
        if !(self.cfg_scale >= 0.0) || !(self.dpo_eta > 0.0) {
            return Err(Error::Config("grpo.cfg_scale must be ≥ 0 and grpo.dpo_eta > 0".into()));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::Config("grpo.optimizer.lr must be > 0".into()));
        }
        Ok(())
    }
}

// ---- scalar pieces ---------------------------------------------------------

/// (r − mean) / (population std + 1e-8).
pub fn normalize_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::Contract(format!("advantages need a group of ≥ 2, got {}", rewards.len())));
    }
    // Exactly constant groups carry no signal; the rounded mean would leave
    // ~1e-8 residues that Adam's normalisation turns into full-size steps.
    if rewards.iter().all(|&r| r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    Ok(rewards.iter().map(|r| (r - mean) / (std + DIV_EPS)).collect())
}

pub fn clipped_objective(ratio: f64, advantage: f64, clip_eps: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * advantage)
}

/// KL between isotropic Gaussians sharing `std`.
pub fn kl_penalty(new_mean: &Tensor, ref_mean: &Tensor, std: f64) -> Result<f64> {
    if !(std > 0.0) {
        return Err(Error::Domain(format!("kl std must be > 0, got {std}")));
    }
    new_mean.same_shape(ref_mean, "kl_penalty")?;
    let ss: f64 = new_mean
        .data()
        .iter()
        .zip(ref_mean.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(ss / (2.0 * std * std))
}

/// −log σ(η·[(lpw − lpw_ref) − (lpl − lpl_ref)]).
pub fn dpo_loss(lpw: f64, lpw_ref: f64, lpl: f64, lpl_ref: f64, eta: f64) -> f64 {
    let m = eta * ((lpw - lpw_ref) - (lpl - lpl_ref));
    softplus(-m)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ---- policies ----------------------------------------------------------------

/// Reward of one rollout: the configured training reward plus two fixed
/// reporting quantities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scored {
    pub reward: f64,
    pub r_face: f64,
    /// Total under the default weights, comparable across reward ablations.
    pub r_total: f64,
}

pub trait Policy {
    type Cond: Sync;

    fn rollout(&self, params: &ParamSet, cond: &Self::Cond, seed: u64, traj_index: u64) -> Result<Trajectory>;

    /// Transition mean of step `k`, recomputed at the recorded state.
    fn transition_mean(&self, tape: &mut Tape, p: &Bound, cond: &Self::Cond, traj: &Trajectory, k: usize)
        -> Result<Var>;

    fn score(&self, cond: &Self::Cond, traj: &Trajectory) -> Result<Scored>;
}

fn require_stochastic(traj: &Trajectory) -> Result<()> {
    if traj.log_probs.len() != traj.num_steps() || traj.num_steps() == 0 {
        return Err(Error::Contract("trajectory has no recorded log-probabilities (ODE rollout?)".into()));
    }
    Ok(())
}

fn step_log_prob_tape<P: Policy>(
    policy: &P,
    tape: &mut Tape,
    p: &Bound,
    cond: &P::Cond,
    traj: &Trajectory,
    k: usize,
) -> Result<(Var, Var)> {
    let mean = policy.transition_mean(tape, p, cond, traj, k)?;
    let lp = transition_log_prob_tape(tape, &traj.states[k + 1], mean, traj.step_std[k])?;
    Ok((mean, lp))
}

/// Current-policy log-density of step `k` and its transition mean.
pub fn step_log_prob<P: Policy>(
    policy: &P,
    params: &ParamSet,
    cond: &P::Cond,
    traj: &Trajectory,
    k: usize,
) -> Result<(f64, Tensor)> {
    require_stochastic(traj)?;
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let (mean, lp) = step_log_prob_tape(policy, &mut tape, &p, cond, traj, k)?;
    Ok((tape.value(lp).item()?, tape.value(mean).clone()))
}

/// exp(log π_θ(x_{k+1} | x_k) − old_log_prob).
pub fn step_ratio<P: Policy>(
    policy: &P,
    params: &ParamSet,
    cond: &P::Cond,
    traj: &Trajectory,
    k: usize,
    old_log_prob: f64,
) -> Result<f64> {
    let (lp, _) = step_log_prob(policy, params, cond, traj, k)?;
    Ok((lp - old_log_prob).exp())
}

pub fn trajectory_log_prob<P: Policy>(policy: &P, params: &ParamSet, cond: &P::Cond, traj: &Trajectory) -> Result<f64> {
    (0..traj.num_steps())
        .map(|k| step_log_prob(policy, params, cond, traj, k).map(|(lp, _)| lp))
        .sum()
}

/// Conditioning plus the ground-truth masks the reward scorers read.
#[derive(Clone, Debug)]
pub struct VideoTask {
    pub cond: Condition,
    pub masks: Tensor,
}

impl VideoTask {
    pub fn from_scene(s: &SceneSample) -> Self {
        Self {
            cond: Condition::from_scene(s),
            masks: s.masks.clone(),
        }
    }
}

/// The velocity model viewed as a stochastic sampling policy.
pub struct VideoPolicy<'a> {
    pub model: &'a VideoModel,
    pub rewards: &'a RewardModel,
    pub sampler: SamplerConfig,
}

impl<'a> VideoPolicy<'a> {
    pub fn new(model: &'a VideoModel, rewards: &'a RewardModel, cfg: &GrpoConfig) -> Self {
        Self {
            model,
            rewards,
            sampler: SamplerConfig {
                num_steps: cfg.num_steps,
                cfg_scale: cfg.cfg_scale,
                mode: SamplerMode::Sde,
                seed: cfg.seed,
                noise_a: cfg.noise_a,
            },
        }
    }
}

impl Policy for VideoPolicy<'_> {
    type Cond = VideoTask;

    fn rollout(&self, params: &ParamSet, task: &VideoTask, seed: u64, traj_index: u64) -> Result<Trajectory> {
        let cfg = SamplerConfig {
            seed,
            ..self.sampler.clone()
        };
        sample(&self.model.field(params, &task.cond), &self.model.cfg.video_shape(), &cfg, traj_index)
    }

    fn transition_mean(&self, tape: &mut Tape, p: &Bound, task: &VideoTask, traj: &Trajectory, k: usize) -> Result<Var> {
        let x = &traj.states[k];
        let t = traj.times[k];
        let s = self.sampler.cfg_scale;
        let branch = |tape: &mut Tape, cond: Option<&Condition>| -> Result<Var> {
            let ctx = self.model.context(tape, p, cond)?;
            let z = tape.leaf(x.clone());
            self.model.predict_velocity(tape, p, z, t, &ctx)
        };
        // Same operation order as `cfg_velocity`, so recomputed means match bitwise.
        let v = if s == 1.0 {
            branch(tape, Some(&task.cond))?
        } else if s == 0.0 {
            branch(tape, None)?
        } else {
            let vc = branch(tape, Some(&task.cond))?;
            let vu = branch(tape, None)?;
            let d = tape.sub(vc, vu)?;
            let d = tape.scale(d, s);
            tape.add(vu, d)?
        };
        sde_mean_tape(tape, x, v, t, traj.dt, traj.noise_a)
    }

    fn score(&self, task: &VideoTask, traj: &Trajectory) -> Result<Scored> {
        let inputs = self.rewards.inputs(&traj.video, &task.cond.references, &task.masks)?;
        let trained = total_reward(&inputs, &self.rewards.weights)?;
        let reported = total_reward(&inputs, &RewardWeights::default())?;
        Ok(Scored {
            reward: trained.r_total,
            r_face: reported.r_face,
            r_total: reported.r_total,
        })
    }
}

/// A one-step Gaussian policy over a scalar action with learnable mean.
pub struct Bandit {
    pub sigma: f64,
    pub mu: ParamId,
    reward: Box<dyn Fn(f64) -> Result<Scored> + Send + Sync>,
}

impl Bandit {
    pub fn new(sigma: f64, mu0: f64, reward: impl Fn(f64) -> Result<Scored> + Send + Sync + 'static) -> (Self, ParamSet) {
        let mut ps = ParamSet::new();
        let mu = ps.add("mu", Tensor::scalar(mu0));
        (
            Self {
                sigma,
                mu,
                reward: Box::new(reward),
            },
            ps,
        )
    }

    /// Reward σ(a): increasing in the action.
    pub fn increasing(sigma: f64, mu0: f64) -> (Self, ParamSet) {
        Self::new(sigma, mu0, |a| {
            let r = sigmoid(a);
            Ok(Scored {
                reward: r,
                r_face: r,
                r_total: r,
            })
        })
    }

    /// Two subjects whose identity scores peak at opposite actions; the
    /// trained reward is the face reward at `gamma`.
    pub fn two_subject(sigma: f64, mu0: f64, gamma: f64) -> (Self, ParamSet) {
        Self::new(sigma, mu0, move |a| {
            let ids = two_subject_scores(a);
            let r = face_reward(&ids, gamma)?;
            Ok(Scored {
                reward: r,
                r_face: r,
                r_total: r,
            })
        })
    }

    pub fn mean(&self, params: &ParamSet) -> f64 {
        params.get(self.mu).data()[0]
    }

    pub fn reward_at(&self, a: f64) -> Result<Scored> {
        (self.reward)(a)
    }
}

/// Per-subject identity of the trade-off bandit at action `a`.
pub fn two_subject_scores(a: f64) -> [f64; 2] {
    [(-(a - 1.0).powi(2) / 2.0).exp(), 0.8 * (-(a + 1.0).powi(2) / 2.0).exp()]
}

impl Policy for Bandit {
    type Cond = ();

    fn rollout(&self, params: &ParamSet, _: &(), seed: u64, traj_index: u64) -> Result<Trajectory> {
        use rand_distr::{Distribution, StandardNormal};
        let mu = self.mean(params);
        let eps: f64 = StandardNormal.sample(&mut stream_rng(seed, traj_index, 0));
        let action = Tensor::scalar(mu + self.sigma * eps);
        let mean = Tensor::scalar(mu);
        let lp = crate::flow::transition_log_prob(&action, &mean, self.sigma)?;
        Ok(Trajectory {
            states: vec![Tensor::scalar(0.0), action.clone()],
            times: vec![0.5],
            dt: -1.0,
            noise_a: 1.0,
            step_means: vec![mean],
            step_std: vec![self.sigma],
            log_probs: vec![lp],
            video: action,
        })
    }

    fn transition_mean(&self, _: &mut Tape, p: &Bound, _: &(), _: &Trajectory, _: usize) -> Result<Var> {
        Ok(p.var(self.mu))
    }

    fn score(&self, _: &(), traj: &Trajectory) -> Result<Scored> {
        self.reward_at(traj.video.data()[0])
    }
}

// ---- GRPO ------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Group {
    pub cond: usize,
    pub members: Vec<Trajectory>,
    pub scores: Vec<Scored>,
    pub advantages: Vec<f64>,
}

/// Index of the first trajectory of group `b` at outer step `step`; all
/// (step, group, member) triples get distinct noise streams.
pub fn traj_index(step: u64, batch: usize, group: usize, b: usize, i: usize) -> u64 {
    (step * batch as u64 + b as u64) * group as u64 + i as u64
}

/// Rolls out `cfg.group_size` trajectories for one condition from the
/// frozen `old` parameters.
pub fn rollout_group<P: Policy + Sync>(
    policy: &P,
    conds: &[P::Cond],
    cond: usize,
    old: &ParamSet,
    cfg: &GrpoConfig,
    first_index: u64,
) -> Result<Group> {
    cfg.validate()?;
    // Members may run concurrently; ordered collection keeps results fixed.
    let scored = (0..cfg.group_size)
        .into_par_iter()
        .map(|i| {
            let traj = policy.rollout(old, &conds[cond], cfg.seed, first_index + i as u64)?;
            if !traj.is_stochastic() {
                return Err(Error::Config("rollouts must be stochastic (SDE with a > 0)".into()));
            }
            Ok((policy.score(&conds[cond], &traj)?, traj))
        })
        .collect::<Result<Vec<_>>>()?;
    let (scores, members): (Vec<Scored>, Vec<Trajectory>) = scored.into_iter().unzip();
    let rewards: Vec<f64> = scores.iter().map(|s| s.reward).collect();
    Ok(Group {
        cond,
        advantages: normalize_advantages(&rewards)?,
        members,
        scores,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: u64,
    pub mean_reward: f64,
    pub r_face_mean: f64,
    pub r_total_mean: f64,
    pub kl: f64,
    pub clip_frac: f64,
    pub grad_norm: f64,
    pub mean_ratio: f64,
    pub skipped: bool,
}

fn accumulate(acc: &mut [Tensor], grads: Vec<Tensor>, scale: f64) -> Result<()> {
    for (a, g) in acc.iter_mut().zip(grads) {
        *a = a.axpy(scale, &g)?;
    }
    Ok(())
}

/// One gradient ascent step on the clipped group-relative objective minus
/// the KL penalty toward `reference`. The old-policy log-probs are the ones
/// recorded in the groups' trajectories.
///
/// Gradients are accumulated per (trajectory, step) tape in a fixed order,
/// so the update is a deterministic function of its inputs.
pub fn grpo_update<P: Policy>(
    policy: &P,
    conds: &[P::Cond],
    groups: &[Group],
    params: &mut ParamSet,
    opt: &mut AdamW,
    reference: &ParamSet,
    cfg: &GrpoConfig,
) -> Result<StepMetrics> {
    cfg.validate()?;
    let n_traj: usize = groups.iter().map(|g| g.members.len()).sum();
    if n_traj == 0 {
        return Err(Error::Contract("grpo_update needs at least one trajectory".into()));
    }
    let mut grads: Vec<Tensor> = params.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let (mut ratio_sum, mut clipped, mut kl_sum, mut n_steps) = (0.0, 0usize, 0.0, 0usize);
    for g in groups {
        let cond = &conds[g.cond];
        for (traj, &adv) in g.members.iter().zip(&g.advantages) {
            require_stochastic(traj)?;
            let t_len = traj.num_steps() as f64;
            let w = 1.0 / (n_traj as f64 * t_len);
            let mut kl_traj = 0.0;
            for k in 0..traj.num_steps() {
                let std = traj.step_std[k];
                let mut tape = Tape::new();
                let p = params.bind(&mut tape);
                let (mean, lp) = step_log_prob_tape(policy, &mut tape, &p, cond, traj, k)?;
                let shifted = tape.add_scalar(lp, -traj.log_probs[k]);
                let ratio = tape.exp(shifted);
                let r = tape.value(ratio).item()?;
                ratio_sum += r;
                if (r - 1.0).abs() > cfg.clip_eps {
                    clipped += 1;
                }
                let unclipped = tape.scale(ratio, adv);
                let c = tape.clamp(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
                let c = tape.scale(c, adv);
                let mut obj = tape.minimum(unclipped, c)?;
                if cfg.kl_coeff > 0.0 {
                    let ref_mean = {
                        let mut rt = Tape::new();
                        let rp = reference.bind(&mut rt);
                        let m = policy.transition_mean(&mut rt, &rp, cond, traj, k)?;
                        rt.value(m).clone()
                    };
                    let rm = tape.leaf(ref_mean);
                    let d = tape.sub(mean, rm)?;
                    let ss = tape.sum_squares(d);
                    // Per latent element, so kl_coeff does not scale with video size.
                    let numel = traj.states[k].numel() as f64;
                    let kl = tape.scale(ss, 1.0 / (2.0 * std * std * numel));
                    kl_traj += tape.value(kl).item()?;
                    let pen = tape.scale(kl, -cfg.kl_coeff);
                    obj = tape.add(obj, pen)?;
                }
                let loss = tape.scale(obj, -w);
                let gr = tape.backward(loss)?;
                accumulate(&mut grads, p.grads(&gr), 1.0)?;
                n_steps += 1;
            }
            kl_sum += kl_traj / t_len;
        }
    }
    let scores: Vec<&Scored> = groups.iter().flat_map(|g| &g.scores).collect();
    let mean_of = |f: fn(&Scored) -> f64| scores.iter().map(|s| f(s)).sum::<f64>() / scores.len() as f64;
    let mut metrics = StepMetrics {
        step: opt.steps_taken(),
        mean_reward: mean_of(|s| s.reward),
        r_face_mean: mean_of(|s| s.r_face),
        r_total_mean: mean_of(|s| s.r_total),
        kl: kl_sum / n_traj as f64,
        clip_frac: clipped as f64 / n_steps as f64,
        grad_norm: global_norm(&grads),
        mean_ratio: ratio_sum / n_steps as f64,
        skipped: false,
    };
    if !grads.iter().all(Tensor::is_finite) || !metrics.grad_norm.is_finite() {
        metrics.skipped = true;
        return Ok(metrics);
    }
    clip_grad_norm(&mut grads, cfg.max_grad_norm);
    opt.step(params, &grads);
    Ok(metrics)
}

/// Snapshot → rollouts → update for the conditions `batch` (indices into
/// `conds`) at outer step `step`.
pub fn grpo_step<P: Policy + Sync>(
    policy: &P,
    conds: &[P::Cond],
    batch: &[usize],
    params: &mut ParamSet,
    opt: &mut AdamW,
    reference: &ParamSet,
    cfg: &GrpoConfig,
    step: u64,
) -> Result<StepMetrics> {
    let old = params.clone();
    let groups = batch
        .iter()
        .enumerate()
        .map(|(b, &c)| rollout_group(policy, conds, c, &old, cfg, traj_index(step, batch.len(), cfg.group_size, b, 0)))
        .collect::<Result<Vec<_>>>()?;
    let mut m = grpo_update(policy, conds, &groups, params, opt, reference, cfg)?;
    m.step = step;
    Ok(m)
}

pub fn new_optimizer(cfg: &GrpoConfig, params: &ParamSet) -> AdamW {
    AdamW::new(cfg.optimizer, params)
}

// ---- DPO ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct PreferencePair {
    pub cond: usize,
    pub winner: Trajectory,
    pub loser: Trajectory,
    /// Reference-policy trajectory log-probs, fixed offline.
    pub winner_ref: f64,
    pub loser_ref: f64,
}

/// Best-vs-worst pair per group (by default-weight total); groups whose
/// extremes tie are skipped.
pub fn build_preference_pairs<P: Policy>(
    policy: &P,
    conds: &[P::Cond],
    groups: &[Group],
    reference: &ParamSet,
) -> Result<Vec<PreferencePair>> {
    let mut out = Vec::new();
    for g in groups {
        let best = (0..g.members.len()).max_by(|&a, &b| g.scores[a].r_total.total_cmp(&g.scores[b].r_total));
        let worst = (0..g.members.len()).min_by(|&a, &b| g.scores[a].r_total.total_cmp(&g.scores[b].r_total));
        let (Some(w), Some(l)) = (best, worst) else { continue };
        if g.scores[w].r_total == g.scores[l].r_total {
            continue;
        }
        let cond = &conds[g.cond];
        out.push(PreferencePair {
            cond: g.cond,
            winner_ref: trajectory_log_prob(policy, reference, cond, &g.members[w])?,
            loser_ref: trajectory_log_prob(policy, reference, cond, &g.members[l])?,
            winner: g.members[w].clone(),
            loser: g.members[l].clone(),
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct DpoMetrics {
    pub step: u64,
    pub loss: f64,
    pub accuracy: f64,
    pub grad_norm: f64,
    pub skipped: bool,
}

/// Value and parameter gradient of a trajectory's summed log-prob.
fn trajectory_log_prob_grad<P: Policy>(
    policy: &P,
    params: &ParamSet,
    cond: &P::Cond,
    traj: &Trajectory,
) -> Result<(f64, Vec<Tensor>)> {
    require_stochastic(traj)?;
    let mut grads: Vec<Tensor> = params.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut total = 0.0;
    for k in 0..traj.num_steps() {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        let (_, lp) = step_log_prob_tape(policy, &mut tape, &p, cond, traj, k)?;
        total += tape.value(lp).item()?;
        let g = tape.backward(lp)?;
        accumulate(&mut grads, p.grads(&g), 1.0)?;
    }
    Ok((total, grads))
}

/// One step on the mean preference loss over `pairs`.
pub fn dpo_update<P: Policy>(
    policy: &P,
    conds: &[P::Cond],
    pairs: &[PreferencePair],
    params: &mut ParamSet,
    opt: &mut AdamW,
    cfg: &GrpoConfig,
) -> Result<DpoMetrics> {
    if pairs.is_empty() {
        return Err(Error::Contract("dpo_update needs at least one preference pair".into()));
    }
    let eta = cfg.dpo_eta;
    let mut grads: Vec<Tensor> = params.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let (mut loss, mut correct) = (0.0, 0usize);
    let n = pairs.len() as f64;
    for pair in pairs {
        let cond = &conds[pair.cond];
        let (lpw, gw) = trajectory_log_prob_grad(policy, params, cond, &pair.winner)?;
        let (lpl, gl) = trajectory_log_prob_grad(policy, params, cond, &pair.loser)?;
        let margin = (lpw - pair.winner_ref) - (lpl - pair.loser_ref);
        loss += dpo_loss(lpw, pair.winner_ref, lpl, pair.loser_ref, eta) / n;
        correct += (margin > 0.0) as usize;
        // d/dθ softplus(−η m) = −η σ(−η m) ∂m/∂θ
        let c = -eta * sigmoid(-eta * margin) / n;
        accumulate(&mut grads, gw, c)?;
        accumulate(&mut grads, gl, -c)?;
    }
    let mut m = DpoMetrics {
        step: opt.steps_taken(),
        loss,
        accuracy: correct as f64 / n,
        grad_norm: global_norm(&grads),
        skipped: false,
    };
    if !grads.iter().all(Tensor::is_finite) || !m.grad_norm.is_finite() {
        m.skipped = true;
        return Ok(m);
    }
    clip_grad_norm(&mut grads, cfg.max_grad_norm);
    opt.step(params, &grads);
    Ok(m)
}

/// Mean preference loss at `params` (no update).
pub fn dpo_eval_loss<P: Policy>(policy: &P, conds: &[P::Cond], pairs: &[PreferencePair], params: &ParamSet, eta: f64) -> Result<f64> {
    let mut s = 0.0;
    for pair in pairs {
        let cond = &conds[pair.cond];
        let lpw = trajectory_log_prob(policy, params, cond, &pair.winner)?;
        let lpl = trajectory_log_prob(policy, params, cond, &pair.loser)?;
        s += dpo_loss(lpw, pair.winner_ref, lpl, pair.loser_ref, eta);
    }
    Ok(s / pairs.len() as f64)
}

/// Fraction of pairs whose implicit reward margin favours the winner.
pub fn preference_accuracy<P: Policy>(policy: &P, conds: &[P::Cond], pairs: &[PreferencePair], params: &ParamSet) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Contract("no preference pairs".into()));
    }
    let mut correct = 0usize;
    for pair in pairs {
        let cond = &conds[pair.cond];
        let lpw = trajectory_log_prob(policy, params, cond, &pair.winner)?;
        let lpl = trajectory_log_prob(policy, params, cond, &pair.loser)?;
        correct += ((lpw - pair.winner_ref) - (lpl - pair.loser_ref) > 0.0) as usize;
    }
    Ok(correct as f64 / pairs.len() as f64)
}
