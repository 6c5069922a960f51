//! The velocity network: a small transformer over patchified video latents.
//!
//! The first `hia_depth` blocks condition on subjects in three stages:
//!
//! 1. intra-subject self-attention, `f′ᵢ = fᵢ + SA(norm fᵢ)`;
//! 2. gated inter-subject attention,
//!    `f″ᵢ = f′ᵢ + σ(f′ᵢ W_g) ⊙ CA(f′ᵢ, {f′ⱼ}ⱼ≠ᵢ)`;
//! 3. cross-modal attention, `Z′ = Z + CA(norm Z, [F″; text])`.
//!
//! Every block then runs video self-attention and an MLP. Stages 1–2 start
//! from the encoder's subject tokens in each HIA block.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioner::{Condition, Conditioner, ContextTokens};
use crate::error::{shape_err, Error, Result};
use crate::flow::{Branch, VelocityField};
use crate::nn::{Attention, Init, Linear, Mlp, Norm};
use crate::params::{Bound, ParamId, ParamSet};
use crate::sprite::Vocabulary;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stages {
    pub stage1: bool,
    pub stage2: bool,
    pub stage3: bool,
}

impl Default for Stages {
    fn default() -> Self {
        Self {
            stage1: true,
            stage2: true,
            stage3: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub depth: usize,
    /// Defaults to ⌈2/3 · depth⌉.
    pub hia_depth: Option<usize>,
    pub hidden: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Video patch (frames, rows, cols).
    pub patch: [usize; 3],
    pub ref_size: usize,
    pub ref_patch: usize,
    pub null_len: usize,
    pub init_std: f64,
    /// Zero the output projection of every residual branch and the head.
    pub zero_init_outputs: bool,
    pub stages: Stages,
    /// Test hook: skip Stage 2 as if its gate were identically zero.
    #[serde(skip)]
    pub force_gate_zero: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            depth: 6,
            hia_depth: None,
            hidden: 32,
            heads: 4,
            mlp_ratio: 2,
            frames: 8,
            height: 16,
            width: 16,
            channels: 3,
            patch: [2, 4, 4],
            ref_size: 8,
            ref_patch: 2,
            null_len: 2,
            init_std: 0.02,
            zero_init_outputs: true,
            stages: Stages::default(),
            force_gate_zero: false,
        }
    }
}

impl BackboneConfig {
    pub fn hia_depth(&self) -> usize {
        self.hia_depth.unwrap_or((2 * self.depth).div_ceil(3))
    }

    pub fn video_shape(&self) -> [usize; 4] {
        [self.frames, self.height, self.width, self.channels]
    }

    pub fn grid(&self) -> [usize; 3] {
        [
            self.frames / self.patch[0],
            self.height / self.patch[1],
            self.width / self.patch[2],
        ]
    }

    pub fn num_tokens(&self) -> usize {
        self.grid().iter().product()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch.iter().product::<usize>() * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depth == 0 {
            return bad("depth must be ≥ 1".into());
        }
        let k = self.hia_depth();
        if k == 0 || k > self.depth {
            return bad(format!("hia_depth {k} must lie in 1..={}", self.depth));
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return bad(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if !self.hidden.is_multiple_of(2) {
            return bad("hidden must be even for the time embedding".into());
        }
        let dims = [self.frames, self.height, self.width];
        if dims.iter().zip(&self.patch).any(|(&d, &p)| p == 0 || d % p != 0) {
            return bad(format!("video {dims:?} not divisible by patch {:?}", self.patch));
        }
        if self.ref_patch == 0 || !self.ref_size.is_multiple_of(self.ref_patch) {
            return bad(format!("reference {} not divisible by patch {}", self.ref_size, self.ref_patch));
        }
        if self.null_len == 0 || self.mlp_ratio == 0 {
            return bad("null_len and mlp_ratio must be ≥ 1".into());
        }
        Ok(())
    }
}

/// Sinusoidal embedding, interleaved `[sin(t·ω₀), cos(t·ω₀), sin(t·ω₁), …]`
/// with ωᵢ = 10000^(−2i/dim).
pub fn timestep_embedding(t: f64, dim: usize) -> Result<Tensor> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(shape_err!("timestep embedding needs an even width, got {dim}"));
    }
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let w = 10000f64.powf(-((2 * i) as f64) / dim as f64);
        out.push((t * w).sin());
        out.push((t * w).cos());
    }
    Tensor::vector(out)
}

/// Scale applied to t ∈ [0, 1] before the sinusoidal embedding.
const TIME_SCALE: f64 = 1000.0;

#[derive(Clone, Debug)]
struct HiaParams {
    s1_norm: Norm,
    s1_attn: Attention,
    s2_norm: Norm,
    s2_attn: Attention,
    gate: ParamId,
    s3_norm_q: Norm,
    s3_norm_kv: Norm,
    s3_attn: Attention,
}

#[derive(Clone, Debug)]
struct Block {
    hia: Option<HiaParams>,
    attn_norm: Norm,
    attn: Attention,
    mlp_norm: Norm,
    mlp: Mlp,
    /// Time → (shift, scale) for the attention and MLP norms.
    modulation: Linear,
}

/// Per-HIA-block subject tokens after Stage 2, for isolation checks.
#[derive(Clone, Debug, Default)]
pub struct ForwardTrace {
    pub stage2: Vec<Vec<Tensor>>,
}

#[derive(Clone, Debug)]
pub struct VideoModel {
    pub cfg: BackboneConfig,
    pub cond: Conditioner,
    patch_in: Linear,
    pos: ParamId,
    time1: Linear,
    time2: Linear,
    blocks: Vec<Block>,
    out_norm: Norm,
    out_modulation: Linear,
    head: Linear,
    /// Time → per-element gain of a direct input-to-output path; the hidden
    /// width is narrower than a patch, so noise cannot pass through it alone.
    skip: Linear,
    patch_index: Arc<[usize]>,
    unpatch_index: Arc<[usize]>,
}

fn patch_indices(cfg: &BackboneConfig) -> (Vec<usize>, Vec<usize>) {
    let [gt, gh, gw] = cfg.grid();
    let [pt, ph, pw] = cfg.patch;
    let (h, w, ch) = (cfg.height, cfg.width, cfg.channels);
    let mut fwd = Vec::with_capacity(cfg.frames * h * w * ch);
    for ti in 0..gt {
        for yi in 0..gh {
            for xi in 0..gw {
                for dt in 0..pt {
                    for dy in 0..ph {
                        for dx in 0..pw {
                            for c in 0..ch {
                                let (f, y, x) = (ti * pt + dt, yi * ph + dy, xi * pw + dx);
                                fwd.push(((f * h + y) * w + x) * ch + c);
                            }
                        }
                    }
                }
            }
        }
    }
    let mut inv = vec![0; fwd.len()];
    for (n, &src) in fwd.iter().enumerate() {
        inv[src] = n;
    }
    (fwd, inv)
}

fn sinusoid_table(n: usize, dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(n * dim);
    for i in 0..n {
        data.extend(timestep_embedding(i as f64, dim).expect("even width").into_data());
    }
    Tensor::new(vec![n, dim], data).expect("finite")
}

/// `h ⊙ (1 + scale) + shift`, with (shift, scale) the `pair`-th pair of
/// c-wide column blocks of the `[1, k·c]` row `m`.
fn modulate(tape: &mut Tape, h: Var, m: Var, pair: usize) -> Result<Var> {
    let [n, c] = [tape.shape(h)[0], tape.shape(h)[1]];
    let shift = tape.slice_cols(m, pair * c, (pair + 1) * c)?;
    let scale = tape.slice_cols(m, (pair + 1) * c, (pair + 2) * c)?;
    let scale = tape.add_scalar(scale, 1.0);
    let rows: Arc<[usize]> = (0..n * c).map(|i| i % c).collect();
    let scale = tape.gather(scale, rows, &[n, c])?;
    let y = tape.mul(h, scale)?;
    let shift = tape.reshape(shift, &[c])?;
    tape.add_row(y, shift)
}

impl VideoModel {
    pub fn new(cfg: BackboneConfig, vocab: Vocabulary, seed: u64) -> Result<(Self, ParamSet)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let (c, std) = (cfg.hidden, cfg.init_std);
        let out_init = if cfg.zero_init_outputs { Init::Zeros } else { Init::Normal(std) };
        let gate_init = if cfg.zero_init_outputs { Init::Zeros } else { Init::Normal(std * 10.0) };

        let cond = Conditioner::new(&mut ps, vocab, cfg.ref_patch, cfg.channels, c, cfg.null_len, std, &mut rng);
        let patch_in = Linear::new(&mut ps, "patch_in", cfg.patch_dim(), c, Init::Normal(std), Some(Init::Zeros), &mut rng);
        let pos = ps.add("pos", sinusoid_table(cfg.num_tokens(), c));
        let time1 = Linear::new(&mut ps, "time.1", c, c, Init::Normal(std), Some(Init::Zeros), &mut rng);
        let time2 = Linear::new(&mut ps, "time.2", c, c, Init::Normal(std), Some(Init::Zeros), &mut rng);
        let mut blocks = Vec::with_capacity(cfg.depth);
        for b in 0..cfg.depth {
            let n = |s: &str| format!("block{b}.{s}");
            let hia = (b < cfg.hia_depth()).then(|| HiaParams {
                s1_norm: Norm::new(&mut ps, &n("s1.norm"), c),
                s1_attn: Attention::new(&mut ps, &n("s1.attn"), c, cfg.heads, std, out_init, &mut rng),
                s2_norm: Norm::new(&mut ps, &n("s2.norm"), c),
                s2_attn: Attention::new(&mut ps, &n("s2.attn"), c, cfg.heads, std, out_init, &mut rng),
                gate: ps.add(n("s2.gate"), gate_init.tensor(&[c, c], &mut rng)),
                s3_norm_q: Norm::new(&mut ps, &n("s3.norm_q"), c),
                s3_norm_kv: Norm::new(&mut ps, &n("s3.norm_kv"), c),
                s3_attn: Attention::new(&mut ps, &n("s3.attn"), c, cfg.heads, std, out_init, &mut rng),
            });
            blocks.push(Block {
                hia,
                attn_norm: Norm::new(&mut ps, &n("attn.norm"), c),
                attn: Attention::new(&mut ps, &n("attn"), c, cfg.heads, std, out_init, &mut rng),
                mlp_norm: Norm::new(&mut ps, &n("mlp.norm"), c),
                mlp: Mlp::new(&mut ps, &n("mlp"), c, c * cfg.mlp_ratio, std, out_init, &mut rng),
                modulation: Linear::new(&mut ps, &n("mod"), c, 4 * c, Init::Zeros, Some(Init::Zeros), &mut rng),
            });
        }
        let out_norm = Norm::new(&mut ps, "out.norm", c);
        let out_modulation = Linear::new(&mut ps, "out.mod", c, 2 * c, Init::Zeros, Some(Init::Zeros), &mut rng);
        let head = Linear::new(&mut ps, "head", c, cfg.patch_dim(), out_init, Some(Init::Zeros), &mut rng);
        let skip = Linear::new(&mut ps, "skip", c, cfg.patch_dim(), Init::Zeros, Some(Init::Zeros), &mut rng);
        let (fwd, inv) = patch_indices(&cfg);
        let model = Self {
            cfg,
            cond,
            patch_in,
            pos,
            time1,
            time2,
            blocks,
            out_norm,
            out_modulation,
            head,
            skip,
            patch_index: fwd.into(),
            unpatch_index: inv.into(),
        };
        Ok((model, ps))
    }

    /// Rebuilds the model skeleton for a parameter set (values are overwritten
    /// by the caller, e.g. from a checkpoint).
    pub fn skeleton(cfg: BackboneConfig, vocab: Vocabulary) -> Result<(Self, ParamSet)> {
        Self::new(cfg, vocab, 0)
    }

    /// Stage 1 on every subject independently.
    pub fn intra_subject_attention(&self, tape: &mut Tape, p: &Bound, block: usize, subjects: &[Var]) -> Result<Vec<Var>> {
        let h = self.hia(block)?;
        if !self.cfg.stages.stage1 {
            return Ok(subjects.to_vec());
        }
        subjects
            .iter()
            .map(|&f| {
                let x = h.s1_norm.apply(tape, p, f)?;
                let a = h.s1_attn.apply(tape, p, x, x)?;
                tape.add(f, a)
            })
            .collect()
    }

    /// Stage 2: each subject attends to all other subjects through a gate.
    pub fn gated_inter_subject_attention(&self, tape: &mut Tape, p: &Bound, block: usize, refined: &[Var]) -> Result<Vec<Var>> {
        let h = self.hia(block)?;
        if refined.len() < 2 || !self.cfg.stages.stage2 || self.cfg.force_gate_zero {
            return Ok(refined.to_vec());
        }
        let normed = refined
            .iter()
            .map(|&f| h.s2_norm.apply(tape, p, f))
            .collect::<Result<Vec<_>>>()?;
        let mut out = Vec::with_capacity(refined.len());
        for (i, &fi) in refined.iter().enumerate() {
            let peers: Vec<Var> = normed
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, &v)| v)
                .collect();
            let kv = tape.concat_rows(&peers)?;
            let ca = h.s2_attn.apply(tape, p, normed[i], kv)?;
            let g = tape.matmul(fi, p.var(h.gate))?;
            let g = tape.sigmoid(g);
            let gated = tape.mul(g, ca)?;
            out.push(tape.add(fi, gated)?);
        }
        Ok(out)
    }

    /// Stage 3: video tokens attend to `[subjects; text]`.
    pub fn cross_modal_attention(&self, tape: &mut Tape, p: &Bound, block: usize, z: Var, subjects: &[Var], text: Var) -> Result<Var> {
        let h = self.hia(block)?;
        let mut kv_parts = if self.cfg.stages.stage3 { subjects.to_vec() } else { Vec::new() };
        kv_parts.push(text);
        let kv = tape.concat_rows(&kv_parts)?;
        let kv = h.s3_norm_kv.apply(tape, p, kv)?;
        let q = h.s3_norm_q.apply(tape, p, z)?;
        let a = h.s3_attn.apply(tape, p, q, kv)?;
        tape.add(z, a)
    }

    fn hia(&self, block: usize) -> Result<&HiaParams> {
        self.blocks
            .get(block)
            .and_then(|b| b.hia.as_ref())
            .ok_or_else(|| Error::Contract(format!("block {block} carries no hierarchical attention")))
    }

    /// `v_θ(z_t, t, ctx)` with the output in `z_t`'s shape.
    pub fn predict_velocity(&self, tape: &mut Tape, p: &Bound, z: Var, t: f64, ctx: &ContextTokens) -> Result<Var> {
        self.forward(tape, p, z, t, ctx, None)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        z: Var,
        t: f64,
        ctx: &ContextTokens,
        mut trace: Option<&mut ForwardTrace>,
    ) -> Result<Var> {
        let shape = self.cfg.video_shape();
        if tape.shape(z) != shape {
            return Err(shape_err!(
                "latent shape {:?} does not match model video shape {shape:?}",
                tape.shape(z)
            ));
        }
        let c = self.cfg.hidden;
        let (n, pd) = (self.cfg.num_tokens(), self.cfg.patch_dim());
        let tokens = tape.gather(z, self.patch_index.clone(), &[n, pd])?;
        let x = self.patch_in.apply(tape, p, tokens)?;
        let mut x = tape.add(x, p.var(self.pos))?;

        let te = tape.leaf(timestep_embedding(t * TIME_SCALE, c)?.reshape(vec![1, c])?);
        let te = self.time1.apply(tape, p, te)?;
        let te = tape.silu(te);
        let te = self.time2.apply(tape, p, te)?;
        let te_act = tape.silu(te);
        let te = tape.reshape(te, &[c])?;
        x = tape.add_row(x, te)?;

        let text = ctx.text(tape)?;
        let base = ctx.subjects(tape)?;
        for (b, block) in self.blocks.iter().enumerate() {
            if block.hia.is_some() {
                let f1 = self.intra_subject_attention(tape, p, b, &base)?;
                let f2 = self.gated_inter_subject_attention(tape, p, b, &f1)?;
                if let Some(tr) = trace.as_deref_mut() {
                    tr.stage2.push(f2.iter().map(|&v| tape.value(v).clone()).collect());
                }
                x = self.cross_modal_attention(tape, p, b, x, &f2, text)?;
            }
            let m = block.modulation.apply(tape, p, te_act)?;
            let hn = block.attn_norm.apply(tape, p, x)?;
            let hn = modulate(tape, hn, m, 0)?;
            let a = block.attn.apply(tape, p, hn, hn)?;
            x = tape.add(x, a)?;
            let hn = block.mlp_norm.apply(tape, p, x)?;
            let hn = modulate(tape, hn, m, 2)?;
            let m = block.mlp.apply(tape, p, hn)?;
            x = tape.add(x, m)?;
        }
        let m = self.out_modulation.apply(tape, p, te_act)?;
        let x = self.out_norm.apply(tape, p, x)?;
        let x = modulate(tape, x, m, 0)?;
        let out = self.head.apply(tape, p, x)?;
        let gain = self.skip.apply(tape, p, te_act)?;
        let gain = tape.gather(gain, (0..n * pd).map(|i| i % pd).collect(), &[n, pd])?;
        let direct = tape.mul(tokens, gain)?;
        let out = tape.add(out, direct)?;
        tape.gather(out, self.unpatch_index.clone(), &shape)
    }

    /// Context for a condition, or the null context when `cond` is `None`.
    pub fn context(&self, tape: &mut Tape, p: &Bound, cond: Option<&Condition>) -> Result<ContextTokens> {
        match cond {
            Some(c) => self.cond.encode(tape, p, c),
            None => self.cond.null_context(tape, p),
        }
    }

    /// Plain forward evaluation outside any training graph.
    pub fn velocity(&self, params: &ParamSet, z: &Tensor, t: f64, cond: Option<&Condition>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        let ctx = self.context(&mut tape, &p, cond)?;
        let zv = tape.leaf(z.clone());
        let v = self.predict_velocity(&mut tape, &p, zv, t, &ctx)?;
        Ok(tape.value(v).clone())
    }

    pub fn field<'a>(&'a self, params: &'a ParamSet, cond: &'a Condition) -> ModelField<'a> {
        ModelField {
            model: self,
            params,
            cond,
        }
    }
}

/// A model, its parameters, and one condition, viewed as a velocity field.
pub struct ModelField<'a> {
    pub model: &'a VideoModel,
    pub params: &'a ParamSet,
    pub cond: &'a Condition,
}

impl VelocityField for ModelField<'_> {
    fn velocity(&self, x: &Tensor, t: f64, branch: Branch) -> Result<Tensor> {
        let cond = match branch {
            Branch::Cond => Some(self.cond),
            Branch::Uncond => None,
        };
        self.model.velocity(self.params, x, t, cond)
    }
}
