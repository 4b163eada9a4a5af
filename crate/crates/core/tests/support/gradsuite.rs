//! Finite-difference gradient checks for every differentiable op and for the
//! distillation losses, over random shapes and values.

#![allow(dead_code)]

use promptkd_core::distill::{loss_kd, loss_reg, loss_student, KlDirection};
use promptkd_core::gradcheck::{check, STEP};
use promptkd_core::model::{ModelConfig, ModelParams, ModelVars};
use promptkd_core::tensor::Tensor;
use promptkd_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const INSTANCES: usize = 20;

pub struct SuiteResult {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
}

type Input = (Vec<f64>, Vec<usize>);

fn rand_input(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Input {
    let n = shape.iter().product();
    ((0..n).map(|_| rng.gen_range(lo..hi)).collect(), shape.to_vec())
}

/// Projects `t` onto fixed random weights so every output entry influences
/// the scalar.
fn project(t: &Tensor, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..t.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Ok(t.mul(&Tensor::new(w, t.shape())?)?.sum())
}

fn run<F>(name: &'static str, seed: u64, mut make: F) -> SuiteResult
where
    F: FnMut(&mut ChaCha8Rng) -> (Vec<Input>, Box<dyn Fn(&[Tensor]) -> Result<Tensor>>),
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let (inputs, f) = make(&mut rng);
        let r = check(f, &inputs, STEP).unwrap_or_else(|e| panic!("{name}: {e}"));
        worst = worst.max(r.max_rel_err);
    }
    SuiteResult {
        name,
        instances: INSTANCES,
        max_rel_err: worst,
    }
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(1..5), rng.gen_range(1..6))
}

pub fn op_suites() -> Vec<SuiteResult> {
    let mut out = Vec::new();
    out.push(run("matmul", 1, |rng| {
        let (m, k) = dims(rng);
        let n = rng.gen_range(1..5);
        let s = rng.gen();
        (
            vec![rand_input(rng, &[m, k], -1.0, 1.0), rand_input(rng, &[k, n], -1.0, 1.0)],
            Box::new(move |x| project(&x[0].matmul(&x[1])?, s)),
        )
    }));
    out.push(run("transpose", 2, |rng| {
        let (m, k) = dims(rng);
        let s = rng.gen();
        (vec![rand_input(rng, &[m, k], -1.0, 1.0)], Box::new(move |x| project(&x[0].transpose()?, s)))
    }));
    for (name, which) in [("add", 0), ("sub", 1), ("mul", 2)] {
        out.push(run(name, 3 + which, move |rng| {
            let (m, k) = dims(rng);
            let s = rng.gen();
            (
                vec![rand_input(rng, &[m, k], -1.0, 1.0), rand_input(rng, &[m, k], -1.0, 1.0)],
                Box::new(move |x| {
                    let y = match which {
                        0 => x[0].add(&x[1])?,
                        1 => x[0].sub(&x[1])?,
                        _ => x[0].mul(&x[1])?,
                    };
                    project(&y, s)
                }),
            )
        }));
    }
    out.push(run("scale", 6, |rng| {
        let (m, k) = dims(rng);
        let (s, c) = (rng.gen(), rng.gen_range(-2.0..2.0));
        (vec![rand_input(rng, &[m, k], -1.0, 1.0)], Box::new(move |x| project(&x[0].scale(c), s)))
    }));
    out.push(run("add_row", 7, |rng| {
        let (m, k) = dims(rng);
        let s = rng.gen();
        (
            vec![rand_input(rng, &[m, k], -1.0, 1.0), rand_input(rng, &[k], -1.0, 1.0)],
            Box::new(move |x| project(&x[0].add_row(&x[1])?, s)),
        )
    }));
    out.push(run("exp", 8, |rng| {
        let (m, k) = dims(rng);
        let s = rng.gen();
        (vec![rand_input(rng, &[m, k], -2.0, 2.0)], Box::new(move |x| project(&x[0].exp(), s)))
    }));
    out.push(run("log", 9, |rng| {
        let (m, k) = dims(rng);
        let s = rng.gen();
        (vec![rand_input(rng, &[m, k], 0.2, 3.0)], Box::new(move |x| project(&x[0].log()?, s)))
    }));
    out.push(run("gelu", 10, |rng| {
        let (m, k) = dims(rng);
        let s = rng.gen();
        (vec![rand_input(rng, &[m, k], -3.0, 3.0)], Box::new(move |x| project(&x[0].gelu(), s)))
    }));
    out.push(run("layer_norm", 11, |rng| {
        let m = rng.gen_range(1..4);
        let k = rng.gen_range(2..7);
        let s = rng.gen();
        (
            vec![
                rand_input(rng, &[m, k], -2.0, 2.0),
                rand_input(rng, &[k], 0.5, 1.5),
                rand_input(rng, &[k], -0.5, 0.5),
            ],
            Box::new(move |x| project(&x[0].layer_norm(&x[1], &x[2])?, s)),
        )
    }));
    out.push(run("log_softmax", 12, |rng| {
        let (m, k) = dims(rng);
        let s = rng.gen();
        (vec![rand_input(rng, &[m, k + 1], -3.0, 3.0)], Box::new(move |x| project(&x[0].log_softmax()?, s)))
    }));
    out.push(run("causal_attention", 13, |rng| {
        let heads = rng.gen_range(1..3);
        let d = heads * rng.gen_range(1..4);
        let nq = rng.gen_range(1..5);
        let nk = nq + rng.gen_range(0..3);
        let s = rng.gen();
        (
            vec![
                rand_input(rng, &[nq, d], -1.0, 1.0),
                rand_input(rng, &[nk, d], -1.0, 1.0),
                rand_input(rng, &[nk, d], -1.0, 1.0),
            ],
            Box::new(move |x| project(&Tensor::causal_attention(&x[0], &x[1], &x[2], heads)?, s)),
        )
    }));
    out.push(run("embedding", 14, |rng| {
        let (v, d) = dims(rng);
        let ids: Vec<usize> = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(0..v)).collect();
        let s = rng.gen();
        (
            vec![rand_input(rng, &[v, d], -1.0, 1.0)],
            Box::new(move |x| project(&Tensor::embedding(&x[0], &ids)?, s)),
        )
    }));
    out.push(run("concat_rows", 15, |rng| {
        let (m, k) = dims(rng);
        let m2 = rng.gen_range(1..4);
        let s = rng.gen();
        (
            vec![rand_input(rng, &[m, k], -1.0, 1.0), rand_input(rng, &[m2, k], -1.0, 1.0)],
            Box::new(move |x| project(&Tensor::concat_rows(x)?, s)),
        )
    }));
    out.push(run("slice_rows", 16, |rng| {
        let (m, k) = dims(rng);
        let start = rng.gen_range(0..m);
        let len = rng.gen_range(1..=m - start);
        let s = rng.gen();
        (
            vec![rand_input(rng, &[m, k], -1.0, 1.0)],
            Box::new(move |x| project(&x[0].slice_rows(start, len)?, s)),
        )
    }));
    out.push(run("gather_rows", 17, |rng| {
        let (m, k) = dims(rng);
        let rows: Vec<usize> = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(0..m)).collect();
        let s = rng.gen();
        (
            vec![rand_input(rng, &[m, k], -1.0, 1.0)],
            Box::new(move |x| project(&x[0].gather_rows(&rows)?, s)),
        )
    }));
    out.push(run("pick", 18, |rng| {
        let (m, k) = dims(rng);
        let cols: Vec<usize> = (0..m).map(|_| rng.gen_range(0..k)).collect();
        let s = rng.gen();
        (
            vec![rand_input(rng, &[m, k], -1.0, 1.0)],
            Box::new(move |x| project(&x[0].pick(&cols)?, s)),
        )
    }));
    out.push(run("sum_mean_sum_last", 19, |rng| {
        let (m, k) = dims(rng);
        let s = rng.gen();
        (
            vec![rand_input(rng, &[m, k], -1.0, 1.0)],
            Box::new(move |x| {
                let a = project(&x[0].sum_last()?, s)?;
                Tensor::sum_all(&[a, x[0].mean().scale(3.0), x[0].sum().scale(-0.5)])
            }),
        )
    }));
    out
}

pub fn toy_config(seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: 7,
        d_model: 4,
        n_layers: 2,
        n_heads: 2,
        d_ff: 8,
        max_seq_len: 16,
        tie_embeddings: false,
        seed,
    }
}

/// A toy model with every weight perturbed so all paths carry signal.
pub fn active_params(seed: u64, frozen: bool) -> ModelParams {
    let mut p = ModelParams::init(&toy_config(seed)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for a in &mut p.arrays {
        for v in &mut a.data {
            *v += rng.gen_range(-0.5..0.5);
        }
    }
    p.frozen = frozen;
    p
}

type Batch = Vec<(Vec<usize>, Vec<usize>)>;

fn toy_batch(rng: &mut ChaCha8Rng) -> Batch {
    (0..rng.gen_range(1..3))
        .map(|_| {
            let req = (0..rng.gen_range(1..4)).map(|_| rng.gen_range(0..7)).collect();
            let resp = (0..rng.gen_range(1..4)).map(|_| rng.gen_range(0..7)).collect();
            (req, resp)
        })
        .collect()
}

fn pairs(b: &Batch) -> Vec<(&[usize], &[usize])> {
    b.iter().map(|(r, y)| (r.as_slice(), y.as_slice())).collect()
}

fn direction(rng: &mut ChaCha8Rng) -> KlDirection {
    if rng.gen() {
        KlDirection::Reverse
    } else {
        KlDirection::Forward
    }
}

pub fn loss_suites() -> Vec<SuiteResult> {
    let mut out = Vec::new();
    out.push(run("loss_kd wrt prompt", 21, |rng| {
        let teacher = active_params(rng.gen(), true).bind().unwrap();
        let student = active_params(rng.gen(), false).bind().unwrap();
        let batch = toy_batch(rng);
        let dir = direction(rng);
        let m = rng.gen_range(1..4);
        (
            vec![rand_input(rng, &[m, 4], -1.0, 1.0)],
            Box::new(move |x| loss_kd(&teacher, Some(&x[0]), &student, &pairs(&batch), dir)),
        )
    }));
    out.push(run("loss_reg wrt prompt", 22, |rng| {
        let teacher = active_params(rng.gen(), true).bind().unwrap();
        let batch = toy_batch(rng);
        let dir = direction(rng);
        let m = rng.gen_range(1..4);
        (
            vec![rand_input(rng, &[m, 4], -1.0, 1.0)],
            Box::new(move |x| loss_reg(&teacher, Some(&x[0]), &pairs(&batch), dir)),
        )
    }));
    out.push(run("loss_student wrt student", 23, |rng| {
        let teacher = active_params(rng.gen(), true).bind().unwrap();
        let student = active_params(rng.gen(), false);
        let config = student.config.clone();
        let prompt = Tensor::new((0..8).map(|_| rng.gen_range(-1.0..1.0)).collect(), &[2, 4]).unwrap();
        let batch = toy_batch(rng);
        let dir = direction(rng);
        let inputs = student
            .arrays
            .iter()
            .map(|a| (a.data.clone(), a.shape.clone()))
            .collect();
        (
            inputs,
            Box::new(move |x| {
                let vars = ModelVars::from_tensors(config.clone(), x.to_vec())?;
                loss_student(&teacher, Some(&prompt), &vars, &pairs(&batch), dir)
            }),
        )
    }));
    out
}
