//! End-to-end runs: flow pretraining, post-training, sampling, evaluation
//! and the ablation suites. The CLI is a thin shell over these.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::conditioner::Condition;
use crate::config::RunConfig;
use crate::container::Container;
use crate::error::{Error, Result};
use crate::eval::{evaluate_videos, EvalInput, EvalReport};
use crate::flow::{gaussian, interpolate, rf_loss_tape, sample, velocity_target, SamplerConfig, Trajectory};
use crate::grpo::{
    build_preference_pairs, dpo_update, grpo_step, new_optimizer, rollout_group, traj_index, two_subject_scores,
    Bandit, DpoMetrics, GrpoConfig, StepMetrics, VideoPolicy, VideoTask,
};
use crate::hia::{BackboneConfig, VideoModel};
use crate::params::{clip_grad_norm, global_norm, AdamW, ParamSet};
use crate::reward::{face_reward, RewardModel, RewardWeights};
use crate::sprite::{gen_dataset, SceneSample, Vocabulary};
use crate::tensor::{Tape, Tensor};

// ---- checkpoints -----------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub kind: String,
    /// Optimiser steps taken to produce these weights.
    pub step: u64,
    pub model: BackboneConfig,
    pub vocabulary: Vocabulary,
    pub has_optimizer: bool,
}

pub struct Checkpoint {
    pub model: VideoModel,
    pub params: ParamSet,
    pub meta: CheckpointMeta,
    pub optimizer: Option<(u64, Vec<Vec<f64>>, Vec<Vec<f64>>)>,
}

pub fn save_checkpoint(
    path: &Path,
    kind: &str,
    model: &VideoModel,
    params: &ParamSet,
    step: u64,
    opt: Option<&AdamW>,
) -> Result<()> {
    let meta = CheckpointMeta {
        kind: kind.into(),
        step,
        model: model.cfg.clone(),
        vocabulary: model.cond.vocab.clone(),
        has_optimizer: opt.is_some(),
    };
    let mut c = params.to_container(serde_json::to_value(&meta)?);
    if let Some(opt) = opt {
        let (t, m, v) = opt.state();
        c.meta["optimizer_steps"] = json!(t);
        for (i, p) in params.values().iter().enumerate() {
            c.push(format!("opt.m.{i}"), Tensor::new(p.shape().to_vec(), m[i].clone())?);
            c.push(format!("opt.v.{i}"), Tensor::new(p.shape().to_vec(), v[i].clone())?);
        }
    }
    c.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let c = Container::load(path)?;
    let mut meta_v = c.meta.clone();
    let opt_steps = meta_v.as_object_mut().and_then(|m| m.remove("optimizer_steps"));
    let meta: CheckpointMeta =
        serde_json::from_value(meta_v).map_err(|e| Error::Corrupt(format!("checkpoint header: {e}")))?;
    let (model, mut params) = VideoModel::skeleton(meta.model.clone(), meta.vocabulary.clone())?;
    params.load_from(&c)?;
    let optimizer = if meta.has_optimizer {
        let t = opt_steps
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Corrupt("optimizer_steps missing".into()))?;
        let grab = |k: &str| -> Result<Vec<Vec<f64>>> {
            (0..params.len())
                .map(|i| c.require(&format!("opt.{k}.{i}")).map(|t| t.data().to_vec()))
                .collect()
        };
        Some((t, grab("m")?, grab("v")?))
    } else {
        None
    };
    Ok(Checkpoint {
        model,
        params,
        meta,
        optimizer,
    })
}

/// Loads a checkpoint and checks it against the run's model and vocabulary.
pub fn load_compatible(path: &Path, cfg: &RunConfig, vocab: &Vocabulary) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    if &ck.meta.vocabulary != vocab {
        return Err(Error::Config(format!(
            "{}: checkpoint vocabulary differs from the dataset's",
            path.display()
        )));
    }
    let mut want = cfg.model.clone();
    want.force_gate_zero = false;
    if ck.meta.model != want {
        return Err(Error::Config(format!(
            "{}: checkpoint model config differs from the run config",
            path.display()
        )));
    }
    Ok(ck)
}

fn progress(cfg: &RunConfig, what: &str, step: u64, total: u64, msg: impl FnOnce() -> String) {
    let every = cfg.io.log_every;
    if every > 0 && (step.is_multiple_of(every) || step + 1 == total) {
        eprintln!("[{what} {step}/{total}] {}", msg());
    }
}

// ---- flow pretraining --------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FlowLogRow {
    pub step: u64,
    pub rf_loss: f64,
}

pub struct FlowRun {
    pub model: VideoModel,
    pub params: ParamSet,
    pub opt: AdamW,
    pub log: Vec<FlowLogRow>,
}

impl FlowRun {
    /// Fresh initialisation from the run config.
    pub fn init(cfg: &RunConfig, vocab: Vocabulary) -> Result<Self> {
        let (model, params) = VideoModel::new(cfg.model.clone(), vocab, cfg.flow.seed)?;
        let opt = AdamW::new(cfg.flow.optimizer, &params);
        Ok(Self {
            model,
            params,
            opt,
            log: Vec::new(),
        })
    }

    /// Continues from a checkpoint, including optimiser state when stored.
    pub fn resume(cfg: &RunConfig, ck: Checkpoint) -> Result<Self> {
        let mut opt = AdamW::new(cfg.flow.optimizer, &ck.params);
        if let Some((t, m, v)) = ck.optimizer {
            opt.restore(t, m, v)?;
        }
        Ok(Self {
            model: ck.model,
            params: ck.params,
            opt,
            log: Vec::new(),
        })
    }

    pub fn step(&self) -> u64 {
        self.opt.steps_taken()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, "flow", &self.model, &self.params, self.step(), Some(&self.opt))
    }
}

/// Flow-matching loss of one (sample, t, ε) triple, with its gradient
/// accumulated into `grads` at weight `w` when given.
fn flow_sample_loss(
    model: &VideoModel,
    params: &ParamSet,
    s: &SceneSample,
    t: f64,
    eps: &Tensor,
    drop_cond: bool,
    w: f64,
    grads: Option<&mut [Tensor]>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let cond = Condition::from_scene(s);
    let ctx = model.context(&mut tape, &p, (!drop_cond).then_some(&cond))?;
    let zt = tape.leaf(interpolate(&s.video, eps, t)?);
    let v = model.predict_velocity(&mut tape, &p, zt, t, &ctx)?;
    let loss = rf_loss_tape(&mut tape, v, &velocity_target(&s.video, eps)?, w)?;
    let value = tape.value(loss).item()?;
    if let Some(grads) = grads {
        let g = tape.backward(loss)?;
        for (acc, gi) in grads.iter_mut().zip(p.grads(&g)) {
            *acc = acc.axpy(1.0, &gi)?;
        }
    }
    Ok(value)
}

struct FlowDraw {
    index: usize,
    t: f64,
    eps: Tensor,
    drop: bool,
}

fn flow_batch(cfg: &RunConfig, n: usize, step: u64, shape: &[usize]) -> Vec<FlowDraw> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.flow.seed);
    rng.set_stream(step + 1);
    (0..cfg.flow.batch_size)
        .map(|_| FlowDraw {
            index: rng.random_range(0..n),
            t: rng.random::<f64>(),
            eps: gaussian(shape, &mut rng),
            drop: rng.random::<f64>() < cfg.flow.cond_dropout,
        })
        .collect()
}

/// Runs `steps` more optimiser steps of rectified-flow regression.
pub fn train_flow(cfg: &RunConfig, samples: &[SceneSample], run: &mut FlowRun, steps: u64) -> Result<()> {
    if steps > 0 && samples.is_empty() {
        return Err(Error::Contract("cannot train on an empty dataset".into()));
    }
    let shape = run.model.cfg.video_shape();
    let end = run.step() + steps;
    while run.step() < end {
        let step = run.step();
        let draws = flow_batch(cfg, samples.len(), step, &shape);
        let w = 1.0 / draws.len() as f64;
        let mut grads: Vec<Tensor> = run.params.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut loss = 0.0;
        for d in &draws {
            loss += flow_sample_loss(
                &run.model,
                &run.params,
                &samples[d.index],
                d.t,
                &d.eps,
                d.drop,
                w,
                Some(&mut grads),
            )?;
        }
        if !loss.is_finite() || !global_norm(&grads).is_finite() {
            return Err(Error::Numeric(format!("flow training diverged at step {step} (loss {loss})")));
        }
        clip_grad_norm(&mut grads, cfg.flow.max_grad_norm);
        run.opt.step(&mut run.params, &grads);
        run.log.push(FlowLogRow { step, rf_loss: loss });
        progress(cfg, "train-flow", step, end, || format!("rf_loss {loss:.5}"));
    }
    Ok(())
}

/// Mean flow loss on a fixed probe set of (sample, t, ε) draws: a
/// low-variance yardstick for comparing checkpoints.
pub fn probe_rf_loss(model: &VideoModel, params: &ParamSet, samples: &[SceneSample], draws: usize, seed: u64) -> Result<f64> {
    if samples.is_empty() || draws == 0 {
        return Err(Error::Contract("probe needs samples and draws".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = model.cfg.video_shape();
    let mut total = 0.0;
    for i in 0..draws {
        let s = &samples[i % samples.len()];
        let t = (i as f64 + rng.random::<f64>()) / draws as f64;
        let eps = gaussian(&shape, &mut rng);
        total += flow_sample_loss(model, params, s, t, &eps, false, 1.0, None)?;
    }
    Ok(total / draws as f64)
}

// ---- post-training -----------------------------------------------------------

pub fn tasks(samples: &[SceneSample]) -> Vec<VideoTask> {
    samples.iter().map(VideoTask::from_scene).collect()
}

fn batch_indices(seed: u64, step: u64, n: usize, k: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_BA7C);
    rng.set_stream(step + 1);
    (0..k).map(|_| rng.random_range(0..n)).collect()
}

/// Online GRPO from `params` with `reference` frozen; returns per-step metrics.
pub fn post_train_grpo(
    cfg: &RunConfig,
    model: &VideoModel,
    params: &mut ParamSet,
    reference: &ParamSet,
    train: &[VideoTask],
    steps: u64,
) -> Result<Vec<StepMetrics>> {
    if steps > 0 && train.is_empty() {
        return Err(Error::Contract("no training conditions".into()));
    }
    let rewards = RewardModel::proxies(cfg.reward);
    let policy = VideoPolicy::new(model, &rewards, &cfg.grpo);
    let mut opt = new_optimizer(&cfg.grpo, params);
    let mut out = Vec::with_capacity(steps as usize);
    for step in 0..steps {
        let batch = batch_indices(cfg.grpo.seed, step, train.len(), cfg.grpo.batch_size);
        let m = grpo_step(&policy, train, &batch, params, &mut opt, reference, &cfg.grpo, step)?;
        progress(cfg, "grpo", step, steps, || {
            format!(
                "reward {:.4} face {:.4} kl {:.2e} |g| {:.3e}{}",
                m.mean_reward,
                m.r_face_mean,
                m.kl,
                m.grad_norm,
                if m.skipped { " (skipped)" } else { "" }
            )
        });
        out.push(m);
    }
    Ok(out)
}

/// Offline DPO: pairs come from groups pre-sampled by the reference policy.
pub fn post_train_dpo(
    cfg: &RunConfig,
    model: &VideoModel,
    params: &mut ParamSet,
    reference: &ParamSet,
    train: &[VideoTask],
    steps: u64,
) -> Result<Vec<DpoMetrics>> {
    if steps == 0 {
        return Ok(Vec::new());
    }
    if train.is_empty() {
        return Err(Error::Contract("no training conditions".into()));
    }
    let rewards = RewardModel::proxies(cfg.reward);
    let policy = VideoPolicy::new(model, &rewards, &cfg.grpo);
    let g = &cfg.grpo;
    let conds = batch_indices(g.seed ^ 0xD90, 0, train.len(), g.dpo_groups.max(1));
    let groups = conds
        .iter()
        .enumerate()
        .map(|(b, &c)| rollout_group(&policy, train, c, reference, g, traj_index(u32::MAX as u64, conds.len(), g.group_size, b, 0)))
        .collect::<Result<Vec<_>>>()?;
    let pairs = build_preference_pairs(&policy, train, &groups, reference)?;
    if pairs.is_empty() {
        return Err(Error::Numeric("every offline group had tied rewards; no preference pairs".into()));
    }
    let mut opt = new_optimizer(g, params);
    let mut out = Vec::with_capacity(steps as usize);
    for step in 0..steps {
        let idx = batch_indices(g.seed ^ 0xD9, step, pairs.len(), g.batch_size.min(pairs.len()));
        let batch: Vec<_> = idx.iter().map(|&i| pairs[i].clone()).collect();
        let mut m = dpo_update(&policy, train, &batch, params, &mut opt, g)?;
        m.step = step;
        progress(cfg, "dpo", step, steps, || format!("loss {:.4} acc {:.2}", m.loss, m.accuracy));
        out.push(m);
    }
    Ok(out)
}

// ---- sampling & evaluation ---------------------------------------------------

pub fn sample_videos(
    model: &VideoModel,
    params: &ParamSet,
    samples: &[SceneSample],
    sampler: &SamplerConfig,
) -> Result<Vec<Trajectory>> {
    samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let cond = Condition::from_scene(s);
            sample(&model.field(params, &cond), &model.cfg.video_shape(), sampler, i as u64)
        })
        .collect()
}

/// Container with each generated video next to its references and prompt.
pub fn samples_container(samples: &[SceneSample], videos: &[Tensor], sampler: &SamplerConfig) -> Result<Container> {
    let mut c = Container::new(json!({"kind": "samples", "sampler": sampler, "count": videos.len()}));
    for (i, (s, v)) in samples.iter().zip(videos).enumerate() {
        c.push(format!("s{i}/video"), v.clone());
        for (k, r) in s.references.iter().enumerate() {
            c.push(format!("s{i}/ref{k}"), r.clone());
        }
        let rows: Vec<f64> = s
            .prompt
            .iter()
            .flat_map(|p| [p.shape.index() as f64, p.color as f64, p.x0 as f64, p.y0 as f64, p.dx as f64, p.dy as f64])
            .collect();
        c.push(format!("s{i}/prompt"), Tensor::new(vec![s.prompt.len(), 6], rows)?);
    }
    Ok(c)
}

/// The held-out evaluation scenes of a run.
pub fn eval_set(cfg: &RunConfig) -> Result<Vec<SceneSample>> {
    gen_dataset(cfg.eval.count, cfg.data.eval_seed, &cfg.data.dims())
}

/// Scores videos (model samples, or the scenes' own videos when `videos`
/// is `None`) against their scenes.
pub fn evaluate(cfg: &RunConfig, samples: &[SceneSample], videos: Option<&[Tensor]>) -> Result<EvalReport> {
    if let Some(v) = videos {
        if v.len() != samples.len() {
            return Err(Error::Contract(format!("{} videos for {} samples", v.len(), samples.len())));
        }
    }
    let inputs: Vec<EvalInput> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| EvalInput {
            sample_id: i,
            video: videos.map_or(&s.video, |v| &v[i]),
            references: &s.references,
            masks: &s.masks,
            prompt: &s.prompt,
        })
        .collect();
    evaluate_videos(&inputs, &cfg.eval.weights, &cfg.fingerprint())
}

pub fn evaluate_model(cfg: &RunConfig, model: &VideoModel, params: &ParamSet, samples: &[SceneSample]) -> Result<EvalReport> {
    let videos: Vec<Tensor> = sample_videos(model, params, samples, &cfg.eval.sampler)?
        .into_iter()
        .map(|t| t.video)
        .collect();
    evaluate(cfg, samples, Some(&videos))
}

// ---- ablations -----------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GammaRow {
    pub gamma: f64,
    pub avg_facesim: f64,
    pub min_facesim: f64,
    pub total: f64,
}

/// Bandit settings for the γ sweep: exploration noise, start, and a GRPO
/// config sized for a one-parameter policy.
pub fn bandit_grpo_config(base: &GrpoConfig) -> GrpoConfig {
    let mut g = base.clone();
    g.group_size = 8;
    g.batch_size = 4;
    g.kl_coeff = 0.0;
    g.optimizer.lr = 0.05;
    g
}

pub const BANDIT_SIGMA: f64 = 0.5;

/// GRPO on the two-subject bandit for each γ; scores are read at the
/// learned mean action.
pub fn gamma_sweep(cfg: &RunConfig) -> Result<Vec<GammaRow>> {
    let g = bandit_grpo_config(&cfg.grpo);
    cfg.eval
        .gammas
        .iter()
        .map(|&gamma| {
            let (bandit, mut params) = Bandit::two_subject(BANDIT_SIGMA, 0.0, gamma);
            let reference = params.clone();
            let mut opt = new_optimizer(&g, &params);
            let conds = [()];
            for step in 0..cfg.eval.bandit_steps {
                let batch = vec![0; g.batch_size];
                grpo_step(&bandit, &conds, &batch, &mut params, &mut opt, &reference, &g, step)?;
            }
            let ids = two_subject_scores(bandit.mean(&params));
            Ok(GammaRow {
                gamma,
                avg_facesim: (ids[0] + ids[1]) / 2.0,
                min_facesim: ids[0].min(ids[1]),
                total: face_reward(&ids, RewardWeights::default().gamma)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub facesim_mean: f64,
    pub facesim_min: f64,
    pub nexus: f64,
    pub gme: f64,
    pub natural: f64,
    pub aesthetic: f64,
    pub total: f64,
}

impl AblationRow {
    pub fn from_report(variant: &str, r: &EvalReport) -> Self {
        let m = &r.means;
        Self {
            variant: variant.into(),
            facesim_mean: m.facesim_mean,
            facesim_min: m.facesim_min,
            nexus: m.nexus,
            gme: m.gme,
            natural: m.natural,
            aesthetic: m.aesthetic,
            total: m.total,
        }
    }
}

/// The reward-component knockouts, each with its weights.
pub fn reward_variants(base: RewardWeights) -> Vec<(&'static str, RewardWeights)> {
    vec![
        ("full", base),
        (
            "w/o R_fid",
            RewardWeights {
                w_fid: 0.0,
                w_qual: 1.0,
                ..base
            },
        ),
        (
            "w/o R_qual",
            RewardWeights {
                w_fid: 1.0,
                w_qual: 0.0,
                ..base
            },
        ),
        ("w/o R_nat", RewardWeights { beta_q: 1.0, ..base }),
    ]
}

/// Post-trains one copy of `init` per reward variant and evaluates each on
/// the held-out set (the SFT row is the untouched `init`).
pub fn reward_ablation(
    cfg: &RunConfig,
    model: &VideoModel,
    init: &ParamSet,
    train: &[VideoTask],
    eval: &[SceneSample],
) -> Result<Vec<AblationRow>> {
    let mut rows = vec![AblationRow::from_report("sft", &evaluate_model(cfg, model, init, eval)?)];
    for (name, w) in reward_variants(cfg.reward) {
        let mut c = cfg.clone();
        c.reward = w;
        let mut params = init.clone();
        post_train_grpo(&c, model, &mut params, init, train, cfg.grpo.steps)?;
        rows.push(AblationRow::from_report(name, &evaluate_model(cfg, model, &params, eval)?));
    }
    Ok(rows)
}

/// Trains a fresh flow model per attention-stage knockout under the same
/// budget and evaluates each.
pub fn stage_ablation(cfg: &RunConfig, train: &[SceneSample], eval: &[SceneSample], vocab: &Vocabulary) -> Result<Vec<AblationRow>> {
    let variants = [
        ("full", [true, true, true]),
        ("w/o Stage 1", [false, true, true]),
        ("w/o Stage 2", [true, false, true]),
        ("w/o Stage 3", [true, true, false]),
    ];
    let mut rows = Vec::new();
    for (name, [s1, s2, s3]) in variants {
        let mut c = cfg.clone();
        c.model.stages.stage1 = s1;
        c.model.stages.stage2 = s2;
        c.model.stages.stage3 = s3;
        let mut run = FlowRun::init(&c, vocab.clone())?;
        train_flow(&c, train, &mut run, c.flow.steps)?;
        rows.push(AblationRow::from_report(name, &evaluate_model(&c, &run.model, &run.params, eval)?));
    }
    Ok(rows)
}
