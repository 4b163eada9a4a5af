//! ROUGE-L, the exposure-bias meter, and the prompted-teacher KL probe.

use rand::distributions::{Distribution, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::data::{EncodedExample, TokenId, Vocab};
use crate::distill::batch_kl;
use crate::error::{Error, Result};
use crate::model::{ModelParams, SoftPrompt};
use crate::sampler::{greedy_decode, sample_batch, DecodeConfig, NextTokenModel, Prompted};
use crate::tensor::no_grad;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F1 between token sequences.
pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T]) -> Result<RougeScore> {
    if reference.is_empty() {
        return Err(Error::contract("ROUGE-L reference is empty"));
    }
    let lcs = lcs_len(candidate, reference);
    if lcs == 0 {
        return Ok(RougeScore {
            precision: 0.0,
            recall: 0.0,
            f_measure: 0.0,
        });
    }
    let precision = lcs as f64 / candidate.len() as f64;
    let recall = lcs as f64 / reference.len() as f64;
    Ok(RougeScore {
        precision,
        recall,
        f_measure: 2.0 * precision * recall / (precision + recall),
    })
}

/// ROUGE-L on whitespace-split words.
pub fn rouge_l_text(candidate: &str, reference: &str) -> Result<RougeScore> {
    let c: Vec<&str> = candidate.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    rouge_l(&c, &r)
}

/// Mean ROUGE-L F over `data`, each request scored on `n_samples` sampled
/// responses (distinct streams) and averaged.
pub fn sampled_rouge<M: NextTokenModel>(
    model: &M,
    data: &[EncodedExample],
    vocab: &Vocab,
    decode: &DecodeConfig,
    n_samples: usize,
) -> Result<f64> {
    if data.is_empty() || n_samples == 0 {
        return Err(Error::contract("ROUGE-L needs data and at least one sample"));
    }
    let mut total = 0.0;
    for (i, ex) in data.iter().enumerate() {
        let reference = vocab.decode_response(&ex.response_ids);
        let reqs: Vec<&[TokenId]> = vec![ex.request_ids.as_slice(); n_samples];
        let streams: Vec<u64> = (0..n_samples).map(|s| ((i as u64) << 16) | s as u64).collect();
        for y in sample_batch(model, &reqs, decode, &streams)? {
            total += rouge_l_text(&vocab.decode_response(&y), &reference)?.f_measure;
        }
    }
    Ok(total / (data.len() * n_samples) as f64)
}

pub fn greedy_rouge<M: NextTokenModel>(
    model: &M,
    data: &[EncodedExample],
    vocab: &Vocab,
    max_new_tokens: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::contract("ROUGE-L needs data"));
    }
    let mut total = 0.0;
    for ex in data {
        let y = greedy_decode(model, &ex.request_ids, max_new_tokens)?;
        let reference = vocab.decode_response(&ex.response_ids);
        total += rouge_l_text(&vocab.decode_response(&y), &reference)?.f_measure;
    }
    Ok(total / data.len() as f64)
}

// ---------------------------------------------------------------------------
// Exposure bias
// ---------------------------------------------------------------------------

pub const EXACCERR_EPS: f64 = 1e-8;

/// `(R − E) / E · 100`, guarded for vanishing `E`. `None` marks an undefined
/// step.
pub fn exaccerr_value(r: f64, e: f64) -> Option<f64> {
    if e.abs() >= EXACCERR_EPS {
        Some((r - e) / e * 100.0)
    } else if r.abs() < EXACCERR_EPS {
        Some(0.0)
    } else {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposureBiasReport {
    pub horizon: usize,
    pub n_requests: usize,
    pub n_samples: usize,
    pub seed: u64,
    /// `r[l-1]` = R(l).
    pub r: Vec<f64>,
    pub e: Vec<f64>,
    /// Standard errors of `r` and `e` across chains.
    pub r_se: Vec<f64>,
    pub e_se: Vec<f64>,
    pub exaccerr: Vec<Option<f64>>,
}

/// Exact `Σ_v p(v) log(p(v)/q(v))` from log-probabilities.
pub fn row_kl(p_log: &[f64], q_log: &[f64]) -> f64 {
    p_log
        .iter()
        .zip(q_log)
        .map(|(&lp, &lq)| {
            let p = lp.exp();
            if p == 0.0 {
                0.0
            } else {
                p * (lp - lq)
            }
        })
        .sum()
}

/// Per-step KLs along one chain whose prefix tokens are drawn from the
/// teacher (`from_teacher`) or the student. Steps after `<eos>`, or past
/// either model's capacity, contribute 0.
#[allow(clippy::too_many_arguments)]
fn chain<P: NextTokenModel, Q: NextTokenModel, R: rand::Rng>(
    teacher: &P,
    student: &Q,
    mut ps: P::State,
    mut qs: Q::State,
    request_len: usize,
    horizon: usize,
    from_teacher: bool,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let cap = match (teacher.capacity(), student.capacity()) {
        (Some(a), Some(b)) => a.min(b),
        (a, b) => a.or(b).unwrap_or(usize::MAX),
    };
    let mut out = vec![0.0; horizon];
    let mut len = request_len;
    for (t, slot) in out.iter_mut().enumerate() {
        let (p, q) = (teacher.log_probs(&ps), student.log_probs(&qs));
        *slot = row_kl(p, q);
        if t + 1 == horizon || len >= cap {
            break;
        }
        let src = if from_teacher { p } else { q };
        let weights: Vec<f64> = src.iter().map(|l| l.exp()).collect();
        let tok = WeightedIndex::new(&weights)
            .map_err(|e| Error::contract(format!("cannot sample prefix: {e}")))?
            .sample(rng);
        if tok == teacher.eos() {
            break;
        }
        teacher.advance(&mut ps, tok)?;
        student.advance(&mut qs, tok)?;
        len += 1;
    }
    Ok(out)
}

fn mean_se(chains: &[Vec<f64>], horizon: usize) -> (Vec<f64>, Vec<f64>) {
    let n = chains.len() as f64;
    let cums: Vec<Vec<f64>> = chains
        .iter()
        .map(|c| {
            c.iter()
                .scan(0.0, |acc, x| {
                    *acc += x;
                    Some(*acc)
                })
                .collect()
        })
        .collect();
    (0..horizon)
        .map(|l| {
            let mean = cums.iter().map(|c| c[l]).sum::<f64>() / n;
            let var = if chains.len() > 1 {
                cums.iter().map(|c| (c[l] - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            (mean, (var / n).sqrt())
        })
        .unzip()
}

/// Monte Carlo R(l), E(l) and ExAccErr(l) for `l = 1..=horizon`. The inner
/// expectation over the next token is summed exactly; prefixes are sampled
/// at temperature 1 without filtering.
pub fn exaccerr<P: NextTokenModel, Q: NextTokenModel>(
    teacher: &P,
    student: &Q,
    requests: &[&[TokenId]],
    horizon: usize,
    n_samples: usize,
    seed: u64,
) -> Result<ExposureBiasReport> {
    if horizon == 0 || n_samples == 0 || requests.is_empty() {
        return Err(Error::contract("exaccerr needs L ≥ 1, n_samples ≥ 1 and requests"));
    }
    let mut r_chains = Vec::with_capacity(requests.len() * n_samples);
    let mut e_chains = Vec::with_capacity(requests.len() * n_samples);
    for (i, req) in requests.iter().enumerate() {
        let ps = teacher.start(req)?;
        let qs = student.start(req)?;
        for s in 0..n_samples {
            let stream = ((i as u64) << 24) | ((s as u64) << 1);
            for (from_teacher, chains) in [(false, &mut r_chains), (true, &mut e_chains)] {
                let mut rng = crate::rng_stream(seed, stream | from_teacher as u64);
                chains.push(chain(
                    teacher,
                    student,
                    ps.clone(),
                    qs.clone(),
                    req.len(),
                    horizon,
                    from_teacher,
                    &mut rng,
                )?);
            }
        }
    }
    let (r, r_se) = mean_se(&r_chains, horizon);
    let (e, e_se) = mean_se(&e_chains, horizon);
    let exaccerr = r.iter().zip(&e).map(|(&r, &e)| exaccerr_value(r, e)).collect();
    Ok(ExposureBiasReport {
        horizon,
        n_requests: requests.len(),
        n_samples,
        seed,
        r,
        e,
        r_se,
        e_se,
        exaccerr,
    })
}

// ---------------------------------------------------------------------------
// Prompted-teacher probe
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub split: String,
    pub prompted: bool,
    /// Forward KL from the teacher variant to the initial student.
    pub kl_initial: f64,
    pub kl_final: f64,
    pub rouge_greedy: f64,
    pub rouge_sampled: f64,
}

/// Mean response-part `D(teacher ‖ student)` under teacher forcing on the
/// ground-truth responses.
pub fn teacher_forced_kl(
    teacher: &ModelParams,
    prompt: Option<&SoftPrompt>,
    student: &ModelParams,
    data: &[EncodedExample],
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::contract("probe needs data"));
    }
    const CHUNK: usize = 8;
    no_grad(|| {
        let tv = teacher.bind_with(false)?;
        let sv = student.bind_with(false)?;
        let pt = match prompt {
            Some(p) => p.bind(false)?,
            None => None,
        };
        let mut total = 0.0;
        for chunk in data.chunks(CHUNK) {
            let items: Vec<(&[TokenId], &[TokenId])> = chunk
                .iter()
                .map(|e| (e.request_ids.as_slice(), e.response_ids.as_slice()))
                .collect();
            let t = tv.response_log_probs_batch(pt.as_ref(), &items)?;
            let s = sv.response_log_probs_batch(None, &items)?;
            total += batch_kl(&t, &s)?.item() * chunk.len() as f64;
        }
        Ok(total / data.len() as f64)
    })
}

pub struct ProbeInputs<'a> {
    pub teacher: &'a ModelParams,
    pub prompt: Option<&'a SoftPrompt>,
    pub student_initial: &'a ModelParams,
    pub student_final: &'a ModelParams,
    pub vocab: &'a Vocab,
    pub decode: &'a DecodeConfig,
    pub n_samples: usize,
}

/// One row per teacher variant (without, then with the prompt).
pub fn prompted_kl_probe(inp: &ProbeInputs<'_>, split: &str, data: &[EncodedExample]) -> Result<Vec<ProbeRow>> {
    let mut rows = Vec::new();
    let variants: Vec<(bool, Option<&SoftPrompt>)> = match inp.prompt {
        Some(p) => vec![(false, None), (true, Some(p))],
        None => vec![(false, None)],
    };
    for (prompted, prompt) in variants {
        let model = Prompted::new(inp.teacher, prompt);
        rows.push(ProbeRow {
            split: split.to_string(),
            prompted,
            kl_initial: teacher_forced_kl(inp.teacher, prompt, inp.student_initial, data)?,
            kl_final: teacher_forced_kl(inp.teacher, prompt, inp.student_final, data)?,
            rouge_greedy: greedy_rouge(&model, data, inp.vocab, inp.decode.max_new_tokens)?,
            rouge_sampled: sampled_rouge(&model, data, inp.vocab, inp.decode, inp.n_samples)?,
        });
    }
    Ok(rows)
}
