//! Composite reward: fidelity (per-subject identity + holistic subject
//! consistency) mixed with quality (aesthetics + temporal naturalness).
//!
//! All scorers here are exact, deterministic proxies computed from pixels
//! and ground-truth masks.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::eval::{nexus_score, HistogramEmbedder};
use crate::sprite::BACKGROUND;
use crate::tensor::Tensor;

const WEIGHT_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardWeights {
    pub w_fid: f64,
    pub w_qual: f64,
    pub alpha: f64,
    pub beta_q: f64,
    pub gamma: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            w_fid: 0.6,
            w_qual: 0.4,
            alpha: 0.5,
            beta_q: 0.4,
            gamma: 0.5,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("w_fid", self.w_fid),
            ("w_qual", self.w_qual),
            ("alpha", self.alpha),
            ("beta_q", self.beta_q),
            ("gamma", self.gamma),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("reward.{name} = {v} outside [0, 1]")));
            }
        }
        if (self.w_fid + self.w_qual - 1.0).abs() > WEIGHT_TOL {
            return Err(Error::Config(format!(
                "reward.w_fid + reward.w_qual must be 1, got {}",
                self.w_fid + self.w_qual
            )));
        }
        Ok(())
    }
}

fn unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Contract(format!("{name} = {v} outside [0, 1]")))
    }
}

/// (1 − γ)·mean + γ·min over per-subject identity scores.
pub fn face_reward(per_subject: &[f64], gamma: f64) -> Result<f64> {
    if per_subject.is_empty() {
        return Err(Error::Contract("face reward over zero subjects".into()));
    }
    for &r in per_subject {
        unit("identity score", r)?;
    }
    let mean = per_subject.iter().sum::<f64>() / per_subject.len() as f64;
    let min = per_subject.iter().copied().fold(f64::INFINITY, f64::min);
    Ok((1.0 - gamma) * mean + gamma * min)
}

pub fn fidelity_reward(r_face: f64, r_subject: f64, alpha: f64) -> Result<f64> {
    unit("r_face", r_face)?;
    unit("r_subject", r_subject)?;
    Ok((1.0 - alpha) * r_face + alpha * r_subject)
}

pub fn quality_reward(r_aes: f64, r_nat: f64, beta_q: f64) -> Result<f64> {
    unit("r_aes", r_aes)?;
    unit("r_nat", r_nat)?;
    Ok((1.0 - beta_q) * r_aes + beta_q * r_nat)
}

pub fn frame_average(frame_rewards: &[f64]) -> Result<f64> {
    if frame_rewards.is_empty() {
        return Err(Error::Contract("frame average over zero frames".into()));
    }
    Ok(frame_rewards.iter().sum::<f64>() / frame_rewards.len() as f64)
}

/// Raw scorer outputs feeding the aggregates.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardInputs {
    pub per_subject_id: Vec<f64>,
    pub r_subject: f64,
    pub r_aes: f64,
    pub r_nat: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RewardBreakdown {
    pub per_subject_id: Vec<f64>,
    pub r_face: f64,
    pub r_subject: f64,
    pub r_fid: f64,
    pub r_aes: f64,
    pub r_nat: f64,
    pub r_qual: f64,
    pub r_total: f64,
}

pub fn total_reward(inputs: &RewardInputs, w: &RewardWeights) -> Result<RewardBreakdown> {
    let r_face = face_reward(&inputs.per_subject_id, w.gamma)?;
    let r_fid = fidelity_reward(r_face, inputs.r_subject, w.alpha)?;
    let r_qual = quality_reward(inputs.r_aes, inputs.r_nat, w.beta_q)?;
    Ok(RewardBreakdown {
        per_subject_id: inputs.per_subject_id.clone(),
        r_face,
        r_subject: inputs.r_subject,
        r_fid,
        r_aes: inputs.r_aes,
        r_nat: inputs.r_nat,
        r_qual,
        r_total: w.w_fid * r_fid + w.w_qual * r_qual,
    })
}

// ---- pixel helpers -------------------------------------------------------

pub(crate) fn video_dims(video: &Tensor) -> Result<[usize; 4]> {
    match video.shape() {
        &[f, h, w, 3] => Ok([f, h, w, 3]),
        s => Err(shape_err!("video must be [f, h, w, 3], got {s:?}")),
    }
}

pub(crate) fn mask_dims(masks: &Tensor, video: [usize; 4]) -> Result<usize> {
    match masks.shape() {
        &[f, n, h, w] if f == video[0] && h == video[1] && w == video[2] => Ok(n),
        s => Err(shape_err!("masks {s:?} do not align with video {video:?}")),
    }
}

/// Joint RGB histogram with `bins` per channel over weighted pixels,
/// L1-normalised; `None` when the total weight is zero.
pub fn rgb_histogram(pixels: &[f64], weights: &[f64], bins: usize) -> Option<Vec<f64>> {
    let mut h = vec![0.0; bins * bins * bins];
    let mut total = 0.0;
    for (px, &w) in pixels.chunks(3).zip(weights) {
        if w == 0.0 {
            continue;
        }
        let b = |v: f64| ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        h[(b(px[0]) * bins + b(px[1])) * bins + b(px[2])] += w;
        total += w;
    }
    (total > 0.0).then(|| h.into_iter().map(|v| v / total).collect())
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Foreground weights of a reference image: pixels that are not background.
pub fn reference_weights(reference: &Tensor) -> Vec<f64> {
    reference
        .data()
        .chunks(3)
        .map(|p| (p.iter().any(|&v| v != BACKGROUND)) as u8 as f64)
        .collect()
}

pub const IDENTITY_BINS: usize = 4;

/// Per-subject identity scores plus the subjects whose masks were empty in
/// every frame (scored 0).
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityScores {
    pub per_subject: Vec<f64>,
    pub absent: Vec<usize>,
}

/// Masked color-histogram cosine against each reference, averaged over the
/// frames where the subject is visible.
pub fn identity_proxy(video: &Tensor, references: &[Tensor], masks: &Tensor) -> Result<IdentityScores> {
    let vd = video_dims(video)?;
    let n = mask_dims(masks, vd)?;
    if references.len() != n {
        return Err(shape_err!("{} references for {n} mask channels", references.len()));
    }
    let [f, h, w, _] = vd;
    let hw = h * w;
    let mut per_subject = Vec::with_capacity(n);
    let mut absent = Vec::new();
    for (k, r) in references.iter().enumerate() {
        let rh = rgb_histogram(r.data(), &reference_weights(r), IDENTITY_BINS)
            .ok_or_else(|| Error::Domain(format!("reference {k} has no foreground pixels")))?;
        let mut sims = Vec::new();
        for fr in 0..f {
            let pixels = &video.data()[fr * hw * 3..(fr + 1) * hw * 3];
            let m = &masks.data()[(fr * n + k) * hw..(fr * n + k + 1) * hw];
            if let Some(vh) = rgb_histogram(pixels, m, IDENTITY_BINS) {
                sims.push(cosine(&vh, &rh).max(0.0));
            }
        }
        if sims.is_empty() {
            absent.push(k);
            per_subject.push(0.0);
        } else {
            per_subject.push(frame_average(&sims)?.min(1.0));
        }
    }
    Ok(IdentityScores { per_subject, absent })
}

/// Contrast/saturation statistic: 1 − exp(−k·(luma std + mean saturation)),
/// averaged over frames.
pub fn aesthetic_proxy(video: &Tensor) -> Result<f64> {
    const K: f64 = 3.0;
    let [f, h, w, _] = video_dims(video)?;
    let hw = (h * w) as f64;
    let frames: Vec<f64> = video
        .data()
        .chunks(h * w * 3)
        .take(f)
        .map(|fr| {
            let (mut s, mut s2, mut sat) = (0.0, 0.0, 0.0);
            for p in fr.chunks(3) {
                let c = [p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0), p[2].clamp(0.0, 1.0)];
                let y = 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
                s += y;
                s2 += y * y;
                sat += c.iter().copied().fold(0.0, f64::max) - c.iter().copied().fold(1.0, f64::min);
            }
            let mean = s / hw;
            let std = (s2 / hw - mean * mean).max(0.0).sqrt();
            1.0 - (-K * (std + sat / hw)).exp()
        })
        .collect();
    frame_average(&frames)
}

/// Residual that counts as fully implausible motion.
const NAT_RESIDUAL_SCALE: f64 = 0.25;

/// 1 − normalised constant-velocity residual. For each pixel of each inner
/// frame, the best one-pixel displacement `s` minimises
/// |x₊(p+s) − x(p)| + |x(p) − x₋(p−s)| (mean over channels); the mean
/// residual is mapped linearly to [0, 1].
pub fn natural_proxy(video: &Tensor) -> Result<f64> {
    let [f, h, w, _] = video_dims(video)?;
    if f < 3 {
        return Ok(1.0);
    }
    let px = |fr: usize, y: i64, x: i64| -> Option<[f64; 3]> {
        if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
            return None;
        }
        let i = ((fr * h + y as usize) * w + x as usize) * 3;
        let d = &video.data()[i..i + 3];
        Some([d[0].clamp(0.0, 1.0), d[1].clamp(0.0, 1.0), d[2].clamp(0.0, 1.0)])
    };
    let diff = |a: [f64; 3], b: [f64; 3]| ((a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs()) / 3.0;
    let mut total = 0.0;
    let mut count = 0usize;
    for fr in 1..f - 1 {
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let c = px(fr, y, x).unwrap();
                let mut best = f64::INFINITY;
                for sy in -1..=1 {
                    for sx in -1..=1 {
                        if let (Some(n), Some(p)) = (px(fr + 1, y + sy, x + sx), px(fr - 1, y - sy, x - sx)) {
                            best = best.min(diff(n, c) + diff(c, p));
                        }
                    }
                }
                total += best;
                count += 1;
            }
        }
    }
    Ok((1.0 - total / count as f64 / NAT_RESIDUAL_SCALE).clamp(0.0, 1.0))
}

/// A named, pure scorer of one video against its references and masks.
pub trait Scorer: Send + Sync {
    fn name(&self) -> &str;
    fn score(&self, video: &Tensor, references: &[Tensor], masks: &Tensor) -> Result<f64>;
}

/// A scorer producing one value per subject.
pub trait SubjectScorer: Send + Sync {
    fn name(&self) -> &str;
    fn score(&self, video: &Tensor, references: &[Tensor], masks: &Tensor) -> Result<Vec<f64>>;
}

pub struct HistogramIdentity;

impl SubjectScorer for HistogramIdentity {
    fn name(&self) -> &str {
        "identity_histogram"
    }

    fn score(&self, video: &Tensor, references: &[Tensor], masks: &Tensor) -> Result<Vec<f64>> {
        Ok(identity_proxy(video, references, masks)?.per_subject)
    }
}

/// Mean masked-subject consistency across subjects.
pub struct NexusSubject;

impl Scorer for NexusSubject {
    fn name(&self) -> &str {
        "nexus_histogram"
    }

    fn score(&self, video: &Tensor, references: &[Tensor], masks: &Tensor) -> Result<f64> {
        let emb = HistogramEmbedder::nexus();
        let n = references.len();
        let mut s = 0.0;
        for (k, r) in references.iter().enumerate() {
            s += nexus_score(video, r, masks, k, &emb)?.score.max(0.0);
        }
        Ok(if n == 0 { 0.0 } else { s / n as f64 })
    }
}

pub struct Aesthetic;

impl Scorer for Aesthetic {
    fn name(&self) -> &str {
        "aesthetic_contrast"
    }

    fn score(&self, video: &Tensor, _: &[Tensor], _: &Tensor) -> Result<f64> {
        aesthetic_proxy(video)
    }
}

pub struct Natural;

impl Scorer for Natural {
    fn name(&self) -> &str {
        "natural_constant_velocity"
    }

    fn score(&self, video: &Tensor, _: &[Tensor], _: &Tensor) -> Result<f64> {
        natural_proxy(video)
    }
}

/// The scorer registry used by training and evaluation.
pub struct RewardModel {
    pub identity: Box<dyn SubjectScorer>,
    pub subject: Box<dyn Scorer>,
    pub aesthetic: Box<dyn Scorer>,
    pub natural: Box<dyn Scorer>,
    pub weights: RewardWeights,
}

impl RewardModel {
    pub fn proxies(weights: RewardWeights) -> Self {
        Self {
            identity: Box::new(HistogramIdentity),
            subject: Box::new(NexusSubject),
            aesthetic: Box::new(Aesthetic),
            natural: Box::new(Natural),
            weights,
        }
    }

    pub fn inputs(&self, video: &Tensor, references: &[Tensor], masks: &Tensor) -> Result<RewardInputs> {
        Ok(RewardInputs {
            per_subject_id: self.identity.score(video, references, masks)?,
            r_subject: self.subject.score(video, references, masks)?,
            r_aes: self.aesthetic.score(video, references, masks)?,
            r_nat: self.natural.score(video, references, masks)?,
        })
    }

    pub fn score(&self, video: &Tensor, references: &[Tensor], masks: &Tensor) -> Result<RewardBreakdown> {
        total_reward(&self.inputs(video, references, masks)?, &self.weights)
    }
}
