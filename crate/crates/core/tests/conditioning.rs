mod common;

use common::*;
use msgen_core::conditioner::{build_context, patchify_image};
use msgen_core::hia::{timestep_embedding, BackboneConfig, VideoModel};
use msgen_core::params::ParamSet;
use msgen_core::sprite::{gen_scene, Dims, Vocabulary};
use msgen_core::tensor::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn default_model(seed: u64) -> (VideoModel, ParamSet) {
    VideoModel::new(BackboneConfig::default(), Vocabulary::for_dims(&Dims::default()), seed).unwrap()
}

fn rand_image(seed: u64) -> Tensor {
    Tensor::randn(&[8, 8, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn subject_tokens_count_and_determinism() {
    let (model, params) = default_model(1);
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let img = rand_image(2);
    let a = model.cond.encode_subject(&mut tape, &p, &img).unwrap();
    let b = model.cond.encode_subject(&mut tape, &p, &img).unwrap();
    assert_eq!(tape.shape(a), &[16, 32]);
    assert_eq!(tape.value(a), tape.value(b));
    // Zero-initialised bias: a blank image embeds to exactly zero.
    let z = model.cond.encode_subject(&mut tape, &p, &Tensor::zeros(&[8, 8, 3])).unwrap();
    assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
}

#[test]
fn shifting_by_one_patch_permutes_tokens() {
    let img = rand_image(3);
    let d = img.data();
    // Circular shift right by one 2-pixel patch column.
    let shifted: Vec<f64> = (0..8 * 8 * 3)
        .map(|i| {
            let (r, c, ch) = (i / 24, (i / 3) % 8, i % 3);
            d[(r * 8 + (c + 6) % 8) * 3 + ch]
        })
        .collect();
    let shifted = Tensor::new(vec![8, 8, 3], shifted).unwrap();
    let (a, b) = (patchify_image(&img, 2).unwrap(), patchify_image(&shifted, 2).unwrap());
    let pd = 12;
    for r in 0..4 {
        for c in 0..4 {
            let src = r * 4 + (c + 3) % 4;
            assert_eq!(&b.data()[(r * 4 + c) * pd..][..pd], &a.data()[src * pd..][..pd]);
        }
    }
}

#[test]
fn prompt_tokens_and_pooled_reference_order() {
    let (model, params) = default_model(4);
    let scene = gen_scene(5, 2, &Dims::default()).unwrap();
    let prompt = vec![scene.prompt[0], scene.prompt[1], scene.prompt[0]];
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let t = model.cond.encode_prompt(&mut tape, &p, &prompt, &scene.references).unwrap();
    assert_eq!(tape.shape(t), &[5, 32]);
    let swapped: Vec<Tensor> = scene.references.iter().rev().cloned().collect();
    let s = model.cond.encode_prompt(&mut tape, &p, &prompt, &swapped).unwrap();
    let (a, b) = (tape.value(t).data().to_vec(), tape.value(s).data().to_vec());
    let row = |v: &[f64], i: usize| v[i * 32..(i + 1) * 32].to_vec();
    for i in 0..3 {
        assert_eq!(row(&a, i), row(&b, i));
    }
    assert_eq!(row(&a, 3), row(&b, 4));
    assert_eq!(row(&a, 4), row(&b, 3));
    assert!(model.cond.encode_prompt(&mut tape, &p, &[], &[]).is_err());
}

#[test]
fn context_packs_text_then_subjects() {
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let text = tape.leaf(Tensor::randn(&[5, 32], 1.0, &mut rng));
    let s1 = tape.leaf(Tensor::randn(&[16, 32], 1.0, &mut rng));
    let s2 = tape.leaf(Tensor::randn(&[16, 32], 1.0, &mut rng));
    let ctx = build_context(&mut tape, text, &[s1, s2]).unwrap();
    assert_eq!(ctx.len(), 37);
    assert_eq!(ctx.segments, vec![0..5, 5..21, 21..37]);
    let back = [ctx.text(&mut tape).unwrap(), ctx.subject(&mut tape, 0).unwrap(), ctx.subject(&mut tape, 1).unwrap()];
    for (got, want) in back.iter().zip([text, s1, s2]) {
        assert_eq!(tape.value(*got), tape.value(want));
    }
    let alone = build_context(&mut tape, text, &[]).unwrap();
    assert_eq!(tape.value(alone.tokens), tape.value(text));
    let narrow = tape.leaf(Tensor::zeros(&[4, 8]));
    assert!(build_context(&mut tape, text, &[narrow]).is_err());
}

#[test]
fn null_context_receives_gradient_when_dropped() {
    let (model, params) = tiny_model(2, 7);
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let ctx = model.context(&mut tape, &p, None).unwrap();
    let z = tape.leaf(latent(8));
    let v = model.predict_velocity(&mut tape, &p, z, 0.5, &ctx).unwrap();
    let loss = tape.sum_squares(v);
    let g = tape.backward(loss).unwrap();
    let grads = p.grads(&g);
    let i = params.names().iter().position(|n| n.contains("null")).expect("null parameter");
    assert!(grads[i].data().iter().any(|&x| x != 0.0));
    // Stable across calls.
    let again = model.context(&mut tape, &p, None).unwrap();
    assert_eq!(tape.value(again.tokens), tape.value(ctx.tokens));
}

#[test]
fn stage1_keeps_subjects_apart() {
    let (model, params) = tiny_model(2, 9);
    let cond = condition(10, 3);
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let ctx = model.context(&mut tape, &p, Some(&cond)).unwrap();
    let mut subjects = ctx.subjects(&mut tape).unwrap();
    let base = model.intra_subject_attention(&mut tape, &p, 0, &subjects).unwrap();
    let shape = tape.shape(subjects[1]).to_vec();
    subjects[1] = tape.leaf(Tensor::zeros(&shape));
    let edited = model.intra_subject_attention(&mut tape, &p, 0, &subjects).unwrap();
    assert_eq!(tape.value(base[0]), tape.value(edited[0]));
    assert_eq!(tape.value(base[2]), tape.value(edited[2]));
    assert_ne!(tape.value(base[1]), tape.value(edited[1]));

    let twins = [subjects[0], subjects[0]];
    let out = model.intra_subject_attention(&mut tape, &p, 0, &twins).unwrap();
    assert_eq!(tape.value(out[0]), tape.value(out[1]));
}

/// Stage-2 residual f″ − f′ for each subject, with the block-0 gate set to `w`.
fn stage2_delta(model: &VideoModel, params: &ParamSet, w: &Tensor) -> Vec<Tensor> {
    let mut params = params.clone();
    let i = params.names().iter().position(|n| n.ends_with("s2.gate")).unwrap();
    params.values_mut()[i] = w.clone();
    let cond = condition(12, 3);
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let ctx = model.context(&mut tape, &p, Some(&cond)).unwrap();
    let s = ctx.subjects(&mut tape).unwrap();
    let f1 = model.intra_subject_attention(&mut tape, &p, 0, &s).unwrap();
    let f2 = model.gated_inter_subject_attention(&mut tape, &p, 0, &f1).unwrap();
    f1.iter().zip(&f2).map(|(a, b)| tape.value(*b).axpy(-1.0, tape.value(*a)).unwrap()).collect()
}

#[test]
fn zero_gate_weights_pass_half_the_cross_attention() {
    // σ(x) + σ(−x) = 1, so Δ(W) + Δ(−W) is the ungated cross-attention.
    let (model, params) = tiny_model(1, 11);
    let w = Tensor::randn(&[8, 8], 0.7, &mut ChaCha8Rng::seed_from_u64(13));
    let plus = stage2_delta(&model, &params, &w);
    let minus = stage2_delta(&model, &params, &w.scale(-1.0));
    let zero = stage2_delta(&model, &params, &Tensor::zeros(&[8, 8]));
    for ((z, a), b) in zero.iter().zip(&plus).zip(&minus) {
        let half = a.axpy(1.0, b).unwrap().scale(0.5);
        assert!(z.max_abs_diff(&half) < 1e-12);
        assert!(z.data().iter().any(|&v| v.abs() > 1e-6));
    }
}

#[test]
fn timestep_embeddings_are_distinct_and_bounded() {
    let dim = 32;
    let grid: Vec<Tensor> = (0..50).map(|i| timestep_embedding(i as f64 / 49.0, dim).unwrap()).collect();
    for (i, a) in grid.iter().enumerate() {
        assert!(a.data().iter().map(|v| v * v).sum::<f64>().sqrt() <= (dim as f64).sqrt() + 1e-12);
        for b in &grid[i + 1..] {
            assert!(a.max_abs_diff(b) > 1e-6);
        }
    }
    assert!(timestep_embedding(0.3, 7).is_err());
}
