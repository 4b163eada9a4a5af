//! Autoregressive decoding: temperature, top-k, top-p and greedy.
//!
//! Decoding runs on [`NextTokenModel`] states (key/value caches for the
//! transformer), so it never records autodiff graph nodes.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{TokenId, EOS_ID};
use crate::error::{Error, Result};
use crate::model::{InferenceSession, ModelParams, SoftPrompt};

/// Anything that yields next-token log-probabilities for a growing prefix.
pub trait NextTokenModel {
    type State: Clone;

    /// State after consuming `request`.
    fn start(&self, request: &[TokenId]) -> Result<Self::State>;

    fn log_probs<'s>(&self, state: &'s Self::State) -> &'s [f64];

    fn advance(&self, state: &mut Self::State, token: TokenId) -> Result<()>;

    /// Positions available to request plus response, if bounded.
    fn capacity(&self) -> Option<usize> {
        None
    }

    fn eos(&self) -> TokenId {
        EOS_ID
    }
}

/// A transformer optionally conditioned on a soft prompt.
#[derive(Clone, Copy)]
pub struct Prompted<'a> {
    pub params: &'a ModelParams,
    pub prompt: Option<&'a SoftPrompt>,
}

impl<'a> Prompted<'a> {
    pub fn new(params: &'a ModelParams, prompt: Option<&'a SoftPrompt>) -> Self {
        Self { params, prompt }
    }

    pub fn plain(params: &'a ModelParams) -> Self {
        Self { params, prompt: None }
    }
}

impl<'a> NextTokenModel for Prompted<'a> {
    type State = InferenceSession<'a>;

    fn start(&self, request: &[TokenId]) -> Result<Self::State> {
        if request.is_empty() {
            return Err(Error::contract("empty request"));
        }
        let mut s = InferenceSession::new(self.params, self.prompt)?;
        s.push_all(request)?;
        Ok(s)
    }

    fn log_probs<'s>(&self, state: &'s Self::State) -> &'s [f64] {
        state.log_probs()
    }

    fn advance(&self, state: &mut Self::State, token: TokenId) -> Result<()> {
        state.push(token)
    }

    fn capacity(&self) -> Option<usize> {
        let m = self.prompt.map_or(0, |p| p.rows);
        Some(self.params.config.max_seq_len.saturating_sub(m))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub temperature: f64,
    /// 0 disables top-k filtering.
    pub top_k: usize,
    pub top_p: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_k: 0,
            top_p: 1.0,
            max_new_tokens: 32,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::config("temperature must be > 0"));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::config("top_p must lie in (0, 1]"));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::config("max_new_tokens must be positive"));
        }
        Ok(())
    }
}

/// Applies temperature, then top-k, then top-p to a log-distribution and
/// returns renormalized probabilities (zero for filtered tokens).
///
/// Ranking is by descending probability with ties broken by lower id; the
/// nucleus is the shortest ranked prefix whose mass reaches `top_p`.
pub fn filter_distribution(log_probs: &[f64], temperature: f64, top_k: usize, top_p: f64) -> Vec<f64> {
    let scaled: Vec<f64> = log_probs.iter().map(|l| l / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = scaled.iter().map(|l| (l - max).exp()).collect();
    normalize(&mut probs);

    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));

    let mut keep = probs.len();
    if top_k > 0 {
        keep = keep.min(top_k);
    }
    if top_p < 1.0 {
        let kept_mass: f64 = order[..keep].iter().map(|&i| probs[i]).sum();
        let mut cum = 0.0;
        for (rank, &i) in order[..keep].iter().enumerate() {
            cum += probs[i] / kept_mass;
            if cum >= top_p {
                keep = rank + 1;
                break;
            }
        }
    }
    for &i in &order[keep.max(1)..] {
        probs[i] = 0.0;
    }
    normalize(&mut probs);
    probs
}

fn normalize(p: &mut [f64]) {
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= z);
}

/// Lowest id among the maximal entries.
pub fn argmax(values: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn sample_token<R: Rng>(log_probs: &[f64], cfg: &DecodeConfig, rng: &mut R) -> TokenId {
    let probs = filter_distribution(log_probs, cfg.temperature, cfg.top_k, cfg.top_p);
    WeightedIndex::new(&probs)
        .expect("filtered distribution keeps at least one token")
        .sample(rng)
}

fn check_room<M: NextTokenModel>(model: &M, request: &[TokenId], new_tokens: usize) -> Result<()> {
    if let Some(cap) = model.capacity() {
        if request.len() + new_tokens > cap {
            return Err(Error::Length {
                len: request.len() + new_tokens,
                max: cap,
            });
        }
    }
    Ok(())
}

/// Continues from `state` until `<eos>` (included) or the token budget.
fn continue_from<M: NextTokenModel, R: Rng>(
    model: &M,
    mut state: M::State,
    cfg: &DecodeConfig,
    rng: &mut R,
) -> Result<Vec<TokenId>> {
    let mut out = Vec::new();
    for i in 0..cfg.max_new_tokens {
        let tok = sample_token(model.log_probs(&state), cfg, rng);
        out.push(tok);
        if tok == model.eos() || i + 1 == cfg.max_new_tokens {
            break;
        }
        model.advance(&mut state, tok)?;
    }
    Ok(out)
}

pub fn sample_with_rng<M: NextTokenModel, R: Rng>(
    model: &M,
    request: &[TokenId],
    cfg: &DecodeConfig,
    rng: &mut R,
) -> Result<Vec<TokenId>> {
    cfg.validate()?;
    check_room(model, request, cfg.max_new_tokens)?;
    continue_from(model, model.start(request)?, cfg, rng)
}

/// Samples one response using the random stream `(cfg.seed, stream)`.
pub fn sample_response<M: NextTokenModel>(
    model: &M,
    request: &[TokenId],
    cfg: &DecodeConfig,
    stream: u64,
) -> Result<Vec<TokenId>> {
    sample_with_rng(model, request, cfg, &mut crate::rng_stream(cfg.seed, stream))
}

/// Samples one response per request, request `i` using stream `streams[i]`.
/// The longest shared request prefix is consumed once and its state cloned.
pub fn sample_batch<M: NextTokenModel>(
    model: &M,
    requests: &[&[TokenId]],
    cfg: &DecodeConfig,
    streams: &[u64],
) -> Result<Vec<Vec<TokenId>>> {
    cfg.validate()?;
    if requests.len() != streams.len() {
        return Err(Error::contract("one stream per request required"));
    }
    if requests.is_empty() {
        return Ok(Vec::new());
    }
    for r in requests {
        if r.is_empty() {
            return Err(Error::contract("empty request"));
        }
        check_room(model, r, cfg.max_new_tokens)?;
    }
    let first = requests[0];
    let shared = requests
        .iter()
        .map(|r| first.iter().zip(r.iter()).take_while(|(a, b)| a == b).count())
        .min()
        .unwrap();
    let base = model.start(&first[..shared])?;
    requests
        .iter()
        .zip(streams)
        .map(|(r, &s)| {
            let mut state = base.clone();
            for &t in &r[shared..] {
                model.advance(&mut state, t)?;
            }
            continue_from(model, state, cfg, &mut crate::rng_stream(cfg.seed, s))
        })
        .collect()
}

/// Argmax decoding; stops at `<eos>` (included) or after `max_new_tokens`.
pub fn greedy_decode<M: NextTokenModel>(
    model: &M,
    request: &[TokenId],
    max_new_tokens: usize,
) -> Result<Vec<TokenId>> {
    check_room(model, request, max_new_tokens)?;
    let mut state = model.start(request)?;
    let mut out = Vec::new();
    for i in 0..max_new_tokens {
        let tok = argmax(model.log_probs(&state));
        out.push(tok);
        if tok == model.eos() || i + 1 == max_new_tokens {
            break;
        }
        model.advance(&mut state, tok)?;
    }
    Ok(out)
}
