//! Condition encoders: reference images → subject tokens, prompt codes →
//! text tokens, and their packing into one context sequence.
//!
//! The text encoder is a closed-vocabulary embedding table: each prompt
//! symbol becomes the sum of its factor embeddings (shape, color, start x,
//! start y, dx, dy), and each reference image contributes one pooled token.

use std::ops::Range;
use std::sync::Arc;

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::nn::{Init, Linear};
use crate::params::{Bound, ParamId, ParamSet};
use crate::sprite::{PromptSymbol, SceneSample, Vocabulary};
use crate::tensor::{Tape, Tensor, Var};

/// What a sample is conditioned on.
#[derive(Clone, Debug, PartialEq)]
pub struct Condition {
    pub prompt: Vec<PromptSymbol>,
    /// `[H, W, ch]` per subject.
    pub references: Vec<Tensor>,
}

impl Condition {
    pub fn from_scene(s: &SceneSample) -> Self {
        Self {
            prompt: s.prompt.clone(),
            references: s.references.clone(),
        }
    }

    pub fn n_subjects(&self) -> usize {
        self.references.len()
    }

    /// Reorders subjects (and their prompt symbols) by `perm`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            prompt: perm.iter().map(|&i| self.prompt[i]).collect(),
            references: perm.iter().map(|&i| self.references[i].clone()).collect(),
        }
    }
}

/// Context sequence `[text; subject 1; …; subject N]` with its segment map.
#[derive(Clone, Debug)]
pub struct ContextTokens {
    pub tokens: Var,
    /// Row ranges: text first, then one per subject.
    pub segments: Vec<Range<usize>>,
    pub n_subjects: usize,
}

impl ContextTokens {
    pub fn text(&self, tape: &mut Tape) -> Result<Var> {
        self.segment(tape, 0)
    }

    pub fn subject(&self, tape: &mut Tape, k: usize) -> Result<Var> {
        self.segment(tape, k + 1)
    }

    pub fn subjects(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        (0..self.n_subjects).map(|k| self.subject(tape, k)).collect()
    }

    fn segment(&self, tape: &mut Tape, i: usize) -> Result<Var> {
        let r = &self.segments[i];
        if r.start == 0 && r.end == tape.shape(self.tokens)[0] {
            return Ok(self.tokens);
        }
        tape.slice_rows(self.tokens, r.start, r.end)
    }

    pub fn len(&self) -> usize {
        self.segments.last().map_or(0, |r| r.end)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Non-overlapping `p×p` patches of an `[H, W, ch]` image, row-major over
/// the patch grid, each flattened as (dy, dx, ch).
pub fn patchify_image(image: &Tensor, p: usize) -> Result<Tensor> {
    let [h, w, ch] = match image.shape() {
        &[h, w, ch] => [h, w, ch],
        s => return Err(shape_err!("reference image must be [H, W, ch], got {s:?}")),
    };
    if h % p != 0 || w % p != 0 {
        return Err(shape_err!("image {h}×{w} not divisible by patch size {p}"));
    }
    let (gh, gw) = (h / p, w / p);
    let mut out = Vec::with_capacity(h * w * ch);
    for gy in 0..gh {
        for gx in 0..gw {
            for dy in 0..p {
                for dx in 0..p {
                    let base = ((gy * p + dy) * w + gx * p + dx) * ch;
                    out.extend_from_slice(&image.data()[base..base + ch]);
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, p * p * ch], out)
}

#[derive(Clone, Debug)]
pub struct Conditioner {
    pub vocab: Vocabulary,
    pub patch: usize,
    pub channels: usize,
    pub hidden: usize,
    pub subject_proj: Linear,
    pub tables: [ParamId; 6],
    pub pool: Linear,
    pub null: ParamId,
}

impl Conditioner {
    pub fn new(
        ps: &mut ParamSet,
        vocab: Vocabulary,
        patch: usize,
        channels: usize,
        hidden: usize,
        null_len: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let pdim = patch * patch * channels;
        let subject_proj = Linear::new(ps, "cond.subject", pdim, hidden, Init::Normal(std), Some(Init::Zeros), rng);
        let names = ["shape", "color", "x0", "y0", "dx", "dy"];
        let sizes = vocab.factor_sizes();
        let tables = std::array::from_fn(|i| {
            ps.add(format!("cond.embed.{}", names[i]), Tensor::randn(&[sizes[i], hidden], std, rng))
        });
        let pool = Linear::new(ps, "cond.pool", pdim, hidden, Init::Normal(std), Some(Init::Zeros), rng);
        let null = ps.add("cond.null", Tensor::randn(&[null_len, hidden], std, rng));
        Self {
            vocab,
            patch,
            channels,
            hidden,
            subject_proj,
            tables,
            pool,
            null,
        }
    }

    /// Linear patch embedding of one reference image → `[hw, c]`.
    pub fn encode_subject(&self, tape: &mut Tape, p: &Bound, image: &Tensor) -> Result<Var> {
        let patches = patchify_image(image, self.patch)?;
        let x = tape.leaf(patches);
        self.subject_proj.apply(tape, p, x)
    }

    /// One token per prompt symbol, then one pooled token per reference.
    pub fn encode_prompt(&self, tape: &mut Tape, p: &Bound, prompt: &[PromptSymbol], references: &[Tensor]) -> Result<Var> {
        if prompt.is_empty() && references.is_empty() {
            return Err(Error::Contract("text encoder needs at least one token".into()));
        }
        let mut parts = Vec::new();
        if !prompt.is_empty() {
            let codes = prompt
                .iter()
                .map(|s| self.vocab.encode(s))
                .collect::<Result<Vec<_>>>()?;
            let mut sum: Option<Var> = None;
            for (f, &table) in self.tables.iter().enumerate() {
                let c = self.hidden;
                let index: Arc<[usize]> = codes
                    .iter()
                    .flat_map(|code| (0..c).map(move |j| code[f] * c + j))
                    .collect();
                let rows = tape.gather(p.var(table), index, &[codes.len(), c])?;
                sum = Some(match sum {
                    None => rows,
                    Some(s) => tape.add(s, rows)?,
                });
            }
            parts.push(sum.expect("six factors"));
        }
        if !references.is_empty() {
            let pdim = self.patch * self.patch * self.channels;
            let mut pooled = Vec::with_capacity(references.len() * pdim);
            for r in references {
                let patches = patchify_image(r, self.patch)?;
                let n = patches.shape()[0] as f64;
                let mut mean = vec![0.0; pdim];
                for row in patches.data().chunks(pdim) {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += v / n;
                    }
                }
                pooled.extend(mean);
            }
            let x = tape.leaf(Tensor::new(vec![references.len(), pdim], pooled)?);
            parts.push(self.pool.apply(tape, p, x)?);
        }
        tape.concat_rows(&parts)
    }

    pub fn encode(&self, tape: &mut Tape, p: &Bound, cond: &Condition) -> Result<ContextTokens> {
        let text = self.encode_prompt(tape, p, &cond.prompt, &cond.references)?;
        let subjects = cond
            .references
            .iter()
            .map(|r| self.encode_subject(tape, p, r))
            .collect::<Result<Vec<_>>>()?;
        build_context(tape, text, &subjects)
    }

    /// The learned unconditional sequence (text only, no subjects).
    pub fn null_context(&self, tape: &mut Tape, p: &Bound) -> Result<ContextTokens> {
        let v = p.var(self.null);
        build_context(tape, v, &[])
    }
}

/// Concatenates `[text; subjects…]` and records the segment boundaries.
pub fn build_context(tape: &mut Tape, text: Var, subjects: &[Var]) -> Result<ContextTokens> {
    let c = tape.shape(text)[1];
    let mut segments = vec![0..tape.shape(text)[0]];
    for s in subjects {
        let [n, sc] = [tape.shape(*s)[0], tape.shape(*s)[1]];
        if sc != c {
            return Err(shape_err!("subject width {sc} differs from text width {c}"));
        }
        let start = segments.last().unwrap().end;
        segments.push(start..start + n);
    }
    let mut parts = vec![text];
    parts.extend_from_slice(subjects);
    let tokens = tape.concat_rows(&parts)?;
    Ok(ContextTokens {
        tokens,
        segments,
        n_subjects: subjects.len(),
    })
}
