//! Evaluation metrics and report assembly.
//!
//! Embedders are plug-in boundaries; the defaults are color-histogram and
//! color-layout proxies that are exact on sprite scenes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::reward::{cosine, identity_proxy, mask_dims, reference_weights, rgb_histogram, video_dims};
use crate::sprite::{render_video, Dims, PromptSymbol, BACKGROUND, PALETTE};
use crate::tensor::Tensor;

/// Pixels (`[n·3]`) with per-pixel weights; zero weight means masked out.
pub struct MaskedImage<'a> {
    pub pixels: &'a [f64],
    pub weights: &'a [f64],
}

/// Maps a masked image to a unit vector (`None` when nothing is visible).
pub trait Embedder {
    fn name(&self) -> &str;
    fn embed(&self, image: &MaskedImage) -> Option<Vec<f64>>;
}

fn normalise(mut v: Vec<f64>) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= n);
    Some(v)
}

/// Joint RGB histogram embedder.
pub struct HistogramEmbedder {
    pub bins: usize,
}

impl HistogramEmbedder {
    pub fn nexus() -> Self {
        Self { bins: 8 }
    }
}

impl Embedder for HistogramEmbedder {
    fn name(&self) -> &str {
        "rgb_histogram"
    }

    fn embed(&self, image: &MaskedImage) -> Option<Vec<f64>> {
        rgb_histogram(image.pixels, image.weights, self.bins).and_then(normalise)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameAverage {
    pub score: f64,
    pub frames_used: usize,
    /// Subject invisible in every frame; score is 0.
    pub absent: bool,
}

/// Mean over frames of cos(E(reference), E(frame ⊙ mask_k)), skipping frames
/// where subject `k` is not visible.
pub fn nexus_score(video: &Tensor, reference: &Tensor, masks: &Tensor, k: usize, embedder: &dyn Embedder) -> Result<FrameAverage> {
    let vd = video_dims(video)?;
    let n = mask_dims(masks, vd)?;
    if k >= n {
        return Err(shape_err!("subject {k} out of {n} mask channels"));
    }
    let [f, h, w, _] = vd;
    let hw = h * w;
    let rw = reference_weights(reference);
    let re = embedder
        .embed(&MaskedImage {
            pixels: reference.data(),
            weights: &rw,
        })
        .ok_or_else(|| Error::Domain("reference has no foreground".into()))?;
    let mut sims = Vec::new();
    for fr in 0..f {
        let m = &masks.data()[(fr * n + k) * hw..(fr * n + k + 1) * hw];
        let img = MaskedImage {
            pixels: &video.data()[fr * hw * 3..(fr + 1) * hw * 3],
            weights: m,
        };
        if let Some(e) = embedder.embed(&img) {
            sims.push(cosine(&e, &re));
        }
    }
    Ok(if sims.is_empty() {
        FrameAverage {
            score: 0.0,
            frames_used: 0,
            absent: true,
        }
    } else {
        FrameAverage {
            score: sims.iter().sum::<f64>() / sims.len() as f64,
            frames_used: sims.len(),
            absent: false,
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FaceSim {
    pub mean: f64,
    pub min: f64,
    pub per_subject: Vec<f64>,
}

pub fn facesim_analogue(video: &Tensor, references: &[Tensor], masks: &Tensor) -> Result<FaceSim> {
    let s = identity_proxy(video, references, masks)?;
    if s.per_subject.is_empty() {
        return Err(Error::Contract("identity metric over zero subjects".into()));
    }
    let mean = s.per_subject.iter().sum::<f64>() / s.per_subject.len() as f64;
    let min = s.per_subject.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(FaceSim {
        mean,
        min,
        per_subject: s.per_subject,
    })
}

/// Whole-video embedding: for every frame and every palette color (plus the
/// background), the soft pixel mass and its centred centroid, with masses
/// square-rooted so small sprites are not drowned by the background.
pub struct LayoutEmbedder {
    pub tau: f64,
    pub background_weight: f64,
}

impl Default for LayoutEmbedder {
    fn default() -> Self {
        Self {
            tau: 0.15,
            background_weight: 0.1,
        }
    }
}

impl LayoutEmbedder {
    pub fn embed_video(&self, video: &Tensor) -> Result<Vec<f64>> {
        let [f, h, w, _] = video_dims(video)?;
        let mut colors: Vec<([f64; 3], f64)> = PALETTE.iter().map(|(_, c)| (*c, 1.0)).collect();
        colors.push(([BACKGROUND; 3], self.background_weight));
        let mut feats = Vec::with_capacity(f * colors.len() * 3);
        let inv = 1.0 / (2.0 * self.tau * self.tau);
        let hw = (h * w) as f64;
        for fr in video.data().chunks(h * w * 3) {
            for (c, cw) in &colors {
                let (mut m, mut mx, mut my) = (0.0, 0.0, 0.0);
                for (i, p) in fr.chunks(3).enumerate() {
                    let d2: f64 = p.iter().zip(c).map(|(a, b)| (a.clamp(0.0, 1.0) - b).powi(2)).sum();
                    let wgt = (-d2 * inv).exp();
                    let (y, x) = ((i / w) as f64, (i % w) as f64);
                    m += wgt;
                    mx += wgt * (2.0 * x / (w - 1) as f64 - 1.0);
                    my += wgt * (2.0 * y / (h - 1) as f64 - 1.0);
                }
                let mass = (m / hw).sqrt() * cw;
                let (cx, cy) = if m > 0.0 { (mx / m, my / m) } else { (0.0, 0.0) };
                feats.extend([mass, mass * cx, mass * cy]);
            }
        }
        let d = feats.len();
        Ok(normalise(feats).unwrap_or_else(|| vec![1.0 / (d as f64).sqrt(); d]))
    }

    /// The embedding of the video the prompt's codes describe.
    pub fn embed_prompt(&self, prompt: &[PromptSymbol], dims: &Dims) -> Result<Vec<f64>> {
        let specs: Vec<_> = prompt.iter().map(PromptSymbol::spec).collect();
        let (video, _) = render_video(&specs, dims)?;
        self.embed_video(&video)
    }
}

/// Cosine between the whole-video and prompt embeddings, in [−1, 1].
pub fn gme_analogue(video: &Tensor, prompt: &[PromptSymbol], embedder: &LayoutEmbedder) -> Result<f64> {
    let [f, h, w, _] = video_dims(video)?;
    let dims = Dims {
        frames: f,
        height: h,
        width: w,
    };
    let a = embedder.embed_video(video)?;
    let b = embedder.embed_prompt(prompt, &dims)?;
    Ok(cosine(&a, &b).clamp(-1.0, 1.0))
}

pub const METRIC_NAMES: [&str; 6] = ["facesim_mean", "facesim_min", "nexus", "gme", "natural", "aesthetic"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub sample_id: usize,
    pub facesim_mean: f64,
    pub facesim_min: f64,
    pub nexus: f64,
    pub gme: f64,
    pub natural: f64,
    pub aesthetic: f64,
    pub total: f64,
}

impl EvalRow {
    pub fn metrics(&self) -> [f64; 6] {
        [self.facesim_mean, self.facesim_min, self.nexus, self.gme, self.natural, self.aesthetic]
    }
}

/// Min-max normalises each metric over the batch (constant columns → 0.5)
/// and returns the weighted sum per row.
pub fn total_eval_scores(rows: &[[f64; 6]], weights: &[f64]) -> Result<Vec<f64>> {
    if weights.len() != METRIC_NAMES.len() {
        return Err(Error::Config(format!(
            "{} total-score weights for {} metrics",
            weights.len(),
            METRIC_NAMES.len()
        )));
    }
    if let Some((i, _)) = rows
        .iter()
        .flat_map(|r| r.iter().enumerate())
        .find(|(_, v)| !v.is_finite())
    {
        return Err(Error::Numeric(format!("metric `{}` is not finite", METRIC_NAMES[i])));
    }
    let mut totals = vec![0.0; rows.len()];
    for (j, &wj) in weights.iter().enumerate() {
        let lo = rows.iter().map(|r| r[j]).fold(f64::INFINITY, f64::min);
        let hi = rows.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max);
        for (t, r) in totals.iter_mut().zip(rows) {
            let norm = if hi > lo { (r[j] - lo) / (hi - lo) } else { 0.5 };
            *t += wj * norm;
        }
    }
    Ok(totals)
}

/// Sample-level inputs for one evaluated video.
pub struct EvalInput<'a> {
    pub sample_id: usize,
    pub video: &'a Tensor,
    pub references: &'a [Tensor],
    pub masks: &'a Tensor,
    pub prompt: &'a [PromptSymbol],
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub means: EvalRow,
    pub fingerprint: String,
    /// (sample, subject) pairs never visible in the scored video's masks.
    pub warnings: Vec<String>,
}

pub fn equal_weights() -> Vec<f64> {
    vec![1.0 / METRIC_NAMES.len() as f64; METRIC_NAMES.len()]
}

pub fn evaluate_videos(inputs: &[EvalInput], weights: &[f64], fingerprint: &str) -> Result<EvalReport> {
    let nexus_emb = HistogramEmbedder::nexus();
    let layout = LayoutEmbedder::default();
    let mut rows = Vec::with_capacity(inputs.len());
    let mut warnings = Vec::new();
    for inp in inputs {
        let fs = facesim_analogue(inp.video, inp.references, inp.masks)?;
        let mut nexus = 0.0;
        for (k, r) in inp.references.iter().enumerate() {
            let s = nexus_score(inp.video, r, inp.masks, k, &nexus_emb)?;
            if s.absent {
                warnings.push(format!("sample {} subject {k}: empty mask in every frame", inp.sample_id));
            }
            nexus += s.score;
        }
        nexus /= inp.references.len() as f64;
        rows.push(EvalRow {
            sample_id: inp.sample_id,
            facesim_mean: fs.mean,
            facesim_min: fs.min,
            nexus,
            gme: gme_analogue(inp.video, inp.prompt, &layout)?,
            natural: crate::reward::natural_proxy(inp.video)?,
            aesthetic: crate::reward::aesthetic_proxy(inp.video)?,
            total: 0.0,
        });
    }
    let metrics: Vec<[f64; 6]> = rows.iter().map(EvalRow::metrics).collect();
    for (r, t) in rows.iter_mut().zip(total_eval_scores(&metrics, weights)?) {
        r.total = t;
    }
    let means = mean_row(&rows);
    Ok(EvalReport {
        rows,
        means,
        fingerprint: fingerprint.to_string(),
        warnings,
    })
}

pub fn mean_row(rows: &[EvalRow]) -> EvalRow {
    let n = rows.len().max(1) as f64;
    let avg = |f: fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    EvalRow {
        sample_id: rows.len(),
        facesim_mean: avg(|r| r.facesim_mean),
        facesim_min: avg(|r| r.facesim_min),
        nexus: avg(|r| r.nexus),
        gme: avg(|r| r.gme),
        natural: avg(|r| r.natural),
        aesthetic: avg(|r| r.aesthetic),
        total: avg(|r| r.total),
    }
}

impl EvalReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_rows(path, &self.rows)
    }
}

/// Serialises rows with a header derived from the row type.
pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Stable 64-bit FNV-1a fingerprint of a byte string, as hex.
pub fn fingerprint(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}
