//! A short PromptKD run on tiny models, checking which parameters moved.

#![allow(dead_code)]

use promptkd_core::data::{encode_example, gen_synthetic, SyntheticTask, Vocab};
use promptkd_core::distill::{Method, TrainConfig, Trainer};
use promptkd_core::model::{init_prompt, ModelConfig, ModelParams, PromptInit};
use promptkd_core::sampler::DecodeConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct SmokeResult {
    pub teacher_identical: bool,
    pub prompt_changed: bool,
    pub student_changed: bool,
    pub steps: usize,
}

fn model(d: usize, seed: u64, vocab: &Vocab) -> ModelParams {
    ModelParams::init(&ModelConfig {
        vocab_size: vocab.len(),
        d_model: d,
        n_layers: 1,
        n_heads: 2,
        d_ff: 0,
        max_seq_len: 256,
        tie_embeddings: true,
        seed,
    })
    .unwrap()
}

/// Fresh models zero their residual projections; the teacher needs context
/// sensitivity for the prompt to matter.
fn perturbed(mut p: ModelParams, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for a in &mut p.arrays {
        for v in &mut a.data {
            *v += rng.gen_range(-0.2..0.2);
        }
    }
    p
}

fn bits(p: &ModelParams) -> Vec<u64> {
    p.arrays.iter().flat_map(|a| a.data.iter().map(|x| x.to_bits())).collect()
}

pub fn promptkd_smoke(steps: usize) -> SmokeResult {
    let vocab = Vocab::ascii();
    let data: Vec<_> = gen_synthetic(SyntheticTask::Copy, 16, 3, 4)
        .unwrap()
        .iter()
        .map(|x| encode_example(x, &vocab, true).unwrap())
        .collect();
    let teacher = perturbed(model(16, 1, &vocab), 5);
    let student = model(8, 2, &vocab);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let prompt = init_prompt(PromptInit::Random, 4, "", &vocab, &teacher, &mut rng).unwrap();
    let (t0, s0, p0) = (bits(&teacher), bits(&student), prompt.data.clone());
    let cfg = TrainConfig {
        total_steps: steps,
        batch_size: 2,
        method: Method::PromptKd,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    let decode = DecodeConfig {
        max_new_tokens: 6,
        ..DecodeConfig::default()
    };
    let mut tr = Trainer::new(cfg, decode, student, Some(teacher), Some(prompt), data).unwrap();
    for k in 0..steps {
        tr.step(k).unwrap();
    }
    SmokeResult {
        teacher_identical: bits(tr.teacher().unwrap()) == t0,
        prompt_changed: tr.prompt.as_ref().unwrap().data != p0,
        student_changed: bits(&tr.student) != s0,
        steps,
    }
}
