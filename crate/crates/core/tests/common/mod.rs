#![allow(dead_code)]

pub mod grad;

use msgen_core::conditioner::Condition;
use msgen_core::hia::{BackboneConfig, VideoModel};
use msgen_core::params::ParamSet;
use msgen_core::sprite::{gen_scene, Dims, SceneSample, Vocabulary};
use msgen_core::tensor::Tensor;

pub fn tiny_dims() -> Dims {
    Dims {
        frames: 2,
        height: 8,
        width: 8,
    }
}

/// A backbone small enough for exhaustive finite differences. Output
/// projections start random so no gradient is structurally zero.
pub fn tiny_backbone(depth: usize) -> BackboneConfig {
    let d = tiny_dims();
    BackboneConfig {
        depth,
        hia_depth: Some(depth),
        hidden: 8,
        heads: 2,
        mlp_ratio: 2,
        frames: d.frames,
        height: d.height,
        width: d.width,
        patch: [1, 4, 4],
        ref_patch: 4,
        null_len: 1,
        init_std: 0.3,
        zero_init_outputs: false,
        ..BackboneConfig::default()
    }
}

/// Gates are shrunk so their sigmoids sit in the responsive range instead of
/// saturating (a saturated gate has gradients near round-off).
pub fn tiny_model(depth: usize, seed: u64) -> (VideoModel, ParamSet) {
    let (m, mut p) = VideoModel::new(tiny_backbone(depth), Vocabulary::for_dims(&tiny_dims()), seed).unwrap();
    for i in 0..p.len() {
        if p.names()[i].ends_with("s2.gate") {
            p.values_mut()[i] = p.values()[i].scale(0.02);
        }
    }
    (m, p)
}

pub fn scene(seed: u64, n: usize) -> SceneSample {
    gen_scene(seed, n, &tiny_dims()).unwrap()
}

pub fn condition(seed: u64, n: usize) -> Condition {
    Condition::from_scene(&scene(seed, n))
}

pub fn latent(seed: u64) -> Tensor {
    use rand::SeedableRng;
    let d = tiny_dims();
    Tensor::randn(&d.video_shape(), 1.0, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed))
}
