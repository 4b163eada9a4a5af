//! Self-contained checks with independent oracles, shared by the core
//! integration tests and the acceptance runner.

#![allow(dead_code)]

use promptkd_core::data::TokenId;
use promptkd_core::distill::{masked_kl, reg_coefficient};
use promptkd_core::eval::{exaccerr, rouge_l};
use promptkd_core::sampler::{filter_distribution, sample_token, DecodeConfig, NextTokenModel};
use promptkd_core::tensor::Tensor;
use promptkd_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: String) -> Self {
        Self { pass, detail }
    }
}

fn log_rows(rows: &[Vec<f64>]) -> Tensor {
    let v = rows[0].len();
    let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().map(|p| p.ln())).collect();
    Tensor::new(data, &[rows.len(), v]).unwrap()
}

fn random_dist(rng: &mut ChaCha8Rng, v: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..v).map(|_| rng.gen_range(0.01..1.0f64).powi(3)).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

pub fn kl_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut min_kl = f64::INFINITY;
    let mut max_self = 0.0f64;
    for _ in 0..1000 {
        let n = rng.gen_range(1..5);
        let v = rng.gen_range(2..9);
        let p: Vec<Vec<f64>> = (0..n).map(|_| random_dist(&mut rng, v)).collect();
        let q: Vec<Vec<f64>> = (0..n).map(|_| random_dist(&mut rng, v)).collect();
        let mask: Vec<bool> = (0..n).map(|i| i == 0 || rng.gen()).collect();
        let kl = masked_kl(&log_rows(&p), &log_rows(&q), &mask).unwrap().item();
        let same = masked_kl(&log_rows(&p), &log_rows(&p), &mask).unwrap().item();
        min_kl = min_kl.min(kl);
        max_self = max_self.max(same.abs());
    }
    let hand = masked_kl(&log_rows(&[vec![0.5, 0.5]]), &log_rows(&[vec![0.25, 0.75]]), &[true])
        .unwrap()
        .item();
    // 0.5 ln 2 + 0.5 ln(2/3)
    let hand_oracle = 0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln();
    let pass = min_kl >= 0.0
        && max_self <= 1e-9
        && (hand - 0.143841).abs() <= 1e-6
        && (hand - hand_oracle).abs() <= 1e-12;
    Outcome::new(
        pass,
        format!("min KL over 1000 pairs {min_kl:.3e}, max |KL(P,P)| {max_self:.1e}, hand case {hand:.7}"),
    )
}

pub fn schedule_exactness() -> Outcome {
    let mut max_dev = 0.0f64;
    let mut endpoints = true;
    for total in [1usize, 2, 3, 7, 100, 1000, 4096] {
        endpoints &= reg_coefficient(0, total).unwrap() == 1.0 && reg_coefficient(total, total).unwrap() == 0.0;
        for k in 0..=total {
            let line = 1.0 - k as f64 / total as f64;
            max_dev = max_dev.max((reg_coefficient(k, total).unwrap() - line).abs());
        }
    }
    Outcome::new(
        endpoints && max_dev <= 1e-12,
        format!("endpoints exact: {endpoints}, max deviation from line {max_dev:.1e}"),
    )
}

/// Full-table LCS followed by the F1 definition, written independently of the
/// library.
fn oracle_rouge(c: &[u8], r: &[u8]) -> f64 {
    let mut t = vec![vec![0usize; r.len() + 1]; c.len() + 1];
    for i in 1..=c.len() {
        for j in 1..=r.len() {
            t[i][j] = if c[i - 1] == r[j - 1] {
                t[i - 1][j - 1] + 1
            } else {
                t[i - 1][j].max(t[i][j - 1])
            };
        }
    }
    let lcs = t[c.len()][r.len()] as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let (p, rc) = (lcs / c.len() as f64, lcs / r.len() as f64);
    2.0 * p * rc / (p + rc)
}

pub fn rouge_oracle() -> Outcome {
    let start = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let alphabet = rng.gen_range(2..6u8);
        let c: Vec<u8> = (0..rng.gen_range(0..=20)).map(|_| rng.gen_range(0..alphabet)).collect();
        let r: Vec<u8> = (0..rng.gen_range(1..=20)).map(|_| rng.gen_range(0..alphabet)).collect();
        let got = rouge_l(&c, &r).unwrap().f_measure;
        if got != oracle_rouge(&c, &r) {
            mismatches += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        mismatches == 0 && secs < 10.0,
        format!("{mismatches} mismatches in 1000 pairs, {secs:.3}s"),
    )
}

pub fn sampling_statistics() -> Outcome {
    let target = [0.1, 0.2, 0.3, 0.4];
    let logs: Vec<f64> = target.iter().map(|p: &f64| p.ln()).collect();
    let cfg = DecodeConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut counts = [0usize; 4];
    for _ in 0..10_000 {
        counts[sample_token(&logs, &cfg, &mut rng)] += 1;
    }
    let max_dev = counts
        .iter()
        .zip(target)
        .map(|(&c, t)| (c as f64 / 10_000.0 - t).abs())
        .fold(0.0, f64::max);

    let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
    let l3: Vec<f64> = [0.5f64, 0.3, 0.2].iter().map(|p| p.ln()).collect();
    let nucleus = close(&filter_distribution(&l3, 1.0, 0, 0.7), &[0.625, 0.375, 0.0]);
    let full = close(&filter_distribution(&l3, 1.0, 0, 1.0), &[0.5, 0.3, 0.2]);
    let top1 = close(&filter_distribution(&l3, 1.0, 1, 1.0), &[1.0, 0.0, 0.0]);
    let top2 = close(&filter_distribution(&l3, 1.0, 2, 1.0), &[0.625, 0.375, 0.0]);
    let tie = close(&filter_distribution(&[0.0, 0.0], 1.0, 1, 1.0), &[1.0, 0.0]);
    let units = nucleus && full && top1 && top2 && tie;
    Outcome::new(
        max_dev <= 0.02 && units,
        format!("max frequency deviation {max_dev:.4} over 10000 draws, unit cases pass: {units}"),
    )
}

/// A two-symbol model whose next-token distribution is a fixed table indexed
/// by position and the previous symbol.
pub struct TableModel {
    /// `p1[t][prev]` = probability of symbol 1 at step `t` (prev = 2 at t = 0).
    pub p1: Vec<[f64; 3]>,
}

impl TableModel {
    fn dist(&self, t: usize, prev: usize) -> [f64; 2] {
        let p = self.p1[t.min(self.p1.len() - 1)][prev];
        [1.0 - p, p]
    }
}

impl NextTokenModel for TableModel {
    type State = (usize, usize, Vec<f64>);

    fn start(&self, _request: &[TokenId]) -> Result<Self::State> {
        let d = self.dist(0, 2);
        Ok((0, 2, d.iter().map(|p| p.ln()).collect()))
    }

    fn log_probs<'s>(&self, state: &'s Self::State) -> &'s [f64] {
        &state.2
    }

    fn advance(&self, state: &mut Self::State, token: TokenId) -> Result<()> {
        let t = state.0 + 1;
        state.0 = t;
        state.1 = token;
        state.2 = self.dist(t, token).iter().map(|p| p.ln()).collect();
        Ok(())
    }

    fn eos(&self) -> TokenId {
        usize::MAX
    }
}

fn kl2(p: [f64; 2], q: [f64; 2]) -> f64 {
    p[0] * (p[0] / q[0]).ln() + p[1] * (p[1] / q[1]).ln()
}

/// Exact cumulative sums over all prefixes: `R[l-1]` with prefixes drawn from
/// `q`, `E[l-1]` with prefixes drawn from `p`.
pub fn enumerate_exact(p: &TableModel, q: &TableModel, horizon: usize) -> (Vec<f64>, Vec<f64>) {
    let mut out = (Vec::new(), Vec::new());
    for from_p in [false, true] {
        let mut cum = 0.0;
        let mut res = Vec::new();
        for t in 0..horizon {
            let mut step = 0.0;
            for bits in 0..(1usize << t) {
                let prefix: Vec<usize> = (0..t).map(|i| (bits >> i) & 1).collect();
                let mut weight = 1.0;
                let mut prev = 2;
                for (i, &y) in prefix.iter().enumerate() {
                    let src = if from_p { p.dist(i, prev) } else { q.dist(i, prev) };
                    weight *= src[y];
                    prev = y;
                }
                step += weight * kl2(p.dist(t, prev), q.dist(t, prev));
            }
            cum += step;
            res.push(cum);
        }
        if from_p {
            out.1 = res;
        } else {
            out.0 = res;
        }
    }
    out
}

pub fn two_token_models() -> (TableModel, TableModel) {
    let teacher = TableModel {
        p1: vec![[0.0, 0.0, 0.3], [0.8, 0.35, 0.0], [0.6, 0.1, 0.0], [0.25, 0.7, 0.0]],
    };
    let student = TableModel {
        p1: vec![[0.0, 0.0, 0.55], [0.4, 0.6, 0.0], [0.2, 0.45, 0.0], [0.5, 0.3, 0.0]],
    };
    (teacher, student)
}

pub const ESTIMATOR_RUNS: usize = 50;

pub fn estimator_validation() -> Outcome {
    let (p, q) = two_token_models();
    let horizon = 4;
    let (r_exact, e_exact) = enumerate_exact(&p, &q, horizon);
    let req: &[TokenId] = &[];
    let runs: Vec<_> = (0..ESTIMATOR_RUNS as u64)
        .map(|seed| exaccerr(&p, &q, &[req], horizon, 40, 1000 + seed).unwrap())
        .collect();
    let n = runs.len() as f64;
    let mut worst_z = 0.0f64;
    for l in 0..horizon {
        for (exact, get) in [
            (r_exact[l], &(|r: &promptkd_core::eval::ExposureBiasReport| r.r[l]) as &dyn Fn(&_) -> f64),
            (e_exact[l], &|r: &promptkd_core::eval::ExposureBiasReport| r.e[l]),
        ] {
            let xs: Vec<f64> = runs.iter().map(get).collect();
            let mean = xs.iter().sum::<f64>() / n;
            let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            let se = sd / n.sqrt();
            let z = if se == 0.0 {
                if (mean - exact).abs() < 1e-12 {
                    0.0
                } else {
                    f64::INFINITY
                }
            } else {
                (mean - exact).abs() / se
            };
            worst_z = worst_z.max(z);
        }
    }
    Outcome::new(
        worst_z <= 3.0,
        format!("worst |mean − exact| / SE over R(l), E(l), l ≤ {horizon}: {worst_z:.2} ({ESTIMATOR_RUNS} runs)"),
    )
}
