#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use vtqa_core::model::{ModelConfig, ModelParams, PreparedSample, Variant};
use vtqa_core::Tensor;

pub const VOCAB: usize = 12;
pub const ANSWERS: usize = 5;

/// Widths small enough to finite-difference every coordinate.
pub fn tiny_config(variant: Variant, seed: u64) -> ModelConfig {
    ModelConfig {
        variant,
        early_fusion: true,
        late_fusion: true,
        answer_recommendation: false,
        object_properties: true,
        share_question_embeddings: true,
        credit_in_training: false,
        d: 4,
        d_v: 4,
        d_q: 3,
        h_a: 3,
        h_g: 3,
        d_emb: 3,
        credit: 1.0,
        seed,
        vocab_size: VOCAB,
        n_answers: ANSWERS,
    }
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], r: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-r..=r)).collect()).unwrap()
}

fn sentence(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let len = rng.random_range(2..=4);
    (0..len).map(|_| rng.random_range(1..VOCAB)).collect()
}

pub fn random_sample(rng: &mut ChaCha8Rng, d_v: usize) -> PreparedSample {
    let objects = rng.random_range(2..=3);
    let sentences = rng.random_range(2..=3);
    PreparedSample {
        id: format!("rand-{}", rng.random::<u32>()),
        visual: uniform(rng, &[objects, d_v], 1.0),
        properties: (0..objects).map(|_| sentence(rng)).collect(),
        paragraph: (0..sentences).map(|_| sentence(rng)).collect(),
        question: sentence(rng),
        target: Some(rng.random_range(0..ANSWERS)),
        recommended: (0..ANSWERS).filter(|_| rng.random_bool(0.3)).collect::<BTreeSet<_>>(),
    }
}

/// Parameters with every entry drawn from `U[-scale/√cols, scale/√cols]`,
/// biases included, so no unit sits at a kink or a tie.
pub fn random_params(config: &ModelConfig, rng: &mut ChaCha8Rng, scale: f64) -> ModelParams {
    let mut params = ModelParams::init(config).unwrap();
    for (_, t) in params.iter_mut() {
        let r = scale / (t.cols() as f64).sqrt();
        t.data_mut()
            .iter_mut()
            .for_each(|x| *x = rng.random_range(-r..=r));
    }
    params
}
