//! Decoder-only transformer language model with optional soft-prompt
//! prepending at the embedding layer.
//!
//! Two evaluation paths share one set of weights: [`ModelVars`] builds a
//! differentiable graph over whole sequences, and [`InferenceSession`] runs
//! one position at a time over plain arrays with a key/value cache for
//! sampling and analysis.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{TokenId, Vocab};
use crate::error::{Error, Result};
use crate::optim::{adamw_step, AdamState, AdamWConfig};
use crate::tensor::{axpy, gelu, log_softmax_row, norm_stats, Tensor};

/// Standard deviation of gaussian weight and random prompt initialization.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Hidden width of the feed-forward block; 0 means `4 · d_model`.
    #[serde(default)]
    pub d_ff: usize,
    pub max_seq_len: usize,
    #[serde(default)]
    pub tie_embeddings: bool,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn ff_width(&self) -> usize {
        if self.d_ff == 0 {
            4 * self.d_model
        } else {
            self.d_ff
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

const PER_LAYER: usize = 16;

// Offsets within a layer's parameter group.
const LN1_G: usize = 0;
const LN1_B: usize = 1;
const WQ: usize = 2;
const BQ: usize = 3;
const WK: usize = 4;
const BK: usize = 5;
const WV: usize = 6;
const BV: usize = 7;
const WO: usize = 8;
const BO: usize = 9;
const LN2_G: usize = 10;
const LN2_B: usize = 11;
const W1: usize = 12;
const B1: usize = 13;
const W2: usize = 14;
const B2: usize = 15;

fn layer_index(layer: usize, offset: usize) -> usize {
    2 + layer * PER_LAYER + offset
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (v, d, f) = (cfg.vocab_size, cfg.d_model, cfg.ff_width());
    let mut out = vec![
        ("tok_emb".to_string(), vec![v, d], Init::Normal),
        ("pos_emb".to_string(), vec![cfg.max_seq_len, d], Init::Normal),
    ];
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        out.extend([
            (p("ln1.gain"), vec![d], Init::Ones),
            (p("ln1.bias"), vec![d], Init::Zeros),
            (p("attn.wq"), vec![d, d], Init::Normal),
            (p("attn.bq"), vec![d], Init::Zeros),
            (p("attn.wk"), vec![d, d], Init::Normal),
            (p("attn.bk"), vec![d], Init::Zeros),
            (p("attn.wv"), vec![d, d], Init::Normal),
            (p("attn.bv"), vec![d], Init::Zeros),
            (p("attn.wo"), vec![d, d], Init::Zeros),
            (p("attn.bo"), vec![d], Init::Zeros),
            (p("ln2.gain"), vec![d], Init::Ones),
            (p("ln2.bias"), vec![d], Init::Zeros),
            (p("mlp.w1"), vec![d, f], Init::Normal),
            (p("mlp.b1"), vec![f], Init::Zeros),
            (p("mlp.w2"), vec![f, d], Init::Zeros),
            (p("mlp.b2"), vec![d], Init::Zeros),
        ]);
    }
    out.push(("ln_f.gain".to_string(), vec![d], Init::Ones));
    out.push(("ln_f.bias".to_string(), vec![d], Init::Zeros));
    if !cfg.tie_embeddings {
        out.push(("lm_head".to_string(), vec![d, v], Init::Normal));
    }
    out
}

/// All weights of one model, in declared order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub arrays: Vec<ParamArray>,
    pub frozen: bool,
}

impl ModelParams {
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = crate::rng_stream(config.seed, 0);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let arrays = layout(config)
            .into_iter()
            .map(|(name, shape, init)| {
                let n = shape.iter().product();
                let data = match init {
                    Init::Normal => (0..n).map(|_| normal.sample(&mut rng)).collect(),
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                };
                ParamArray { name, shape, data }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            arrays,
            frozen: false,
        })
    }

    /// Rebuilds parameters from named arrays, checking them against the
    /// layout implied by `config`.
    pub fn from_arrays(config: ModelConfig, arrays: Vec<ParamArray>, frozen: bool) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != arrays.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter arrays, found {}",
                expected.len(),
                arrays.len()
            )));
        }
        for ((name, shape, _), a) in expected.iter().zip(&arrays) {
            if *name != a.name || *shape != a.shape || a.data.len() != shape.iter().product::<usize>() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} does not match expected {name} {shape:?}",
                    a.name
                )));
            }
        }
        Ok(Self {
            config,
            arrays,
            frozen,
        })
    }

    pub fn num_params(&self) -> usize {
        self.arrays.iter().map(|a| a.data.len()).sum()
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn get(&self, name: &str) -> Option<&ParamArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamArray> {
        self.arrays.iter_mut().find(|a| a.name == name)
    }

    /// Differentiable view; leaves require gradients unless the parameters are
    /// frozen.
    pub fn bind(&self) -> Result<ModelVars> {
        self.bind_with(!self.frozen)
    }

    pub fn bind_with(&self, requires_grad: bool) -> Result<ModelVars> {
        let tensors = self
            .arrays
            .iter()
            .map(|a| Tensor::leaf(a.data.clone(), &a.shape, requires_grad))
            .collect::<Result<Vec<_>>>()?;
        ModelVars::from_tensors(self.config.clone(), tensors)
    }

    pub fn optimizer_state(&self) -> Vec<AdamState> {
        self.arrays.iter().map(|a| AdamState::new(a.data.len())).collect()
    }

    /// Applies one AdamW step with gradients listed in declared order.
    pub fn apply_grads(
        &mut self,
        grads: &[Vec<f64>],
        states: &mut [AdamState],
        cfg: &AdamWConfig,
    ) -> Result<()> {
        if self.frozen {
            return Err(Error::contract("attempted to update frozen parameters"));
        }
        if grads.len() != self.arrays.len() || states.len() != self.arrays.len() {
            return Err(Error::contract("gradient/state count does not match parameters"));
        }
        for ((a, g), s) in self.arrays.iter_mut().zip(grads).zip(states.iter_mut()) {
            adamw_step(&mut a.data, g, s, cfg)?;
        }
        Ok(())
    }

    fn array(&self, idx: usize) -> &[f64] {
        &self.arrays[idx].data
    }

    fn output_weight(&self) -> (&[f64], bool) {
        if self.config.tie_embeddings {
            (self.array(0), true)
        } else {
            (&self.arrays.last().expect("lm_head").data, false)
        }
    }
}

/// A soft prompt: `m` trainable rows of token-embedding width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftPrompt {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl SoftPrompt {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * dim || dim == 0 {
            return Err(Error::Shape {
                op: "soft_prompt",
                lhs: vec![rows, dim],
                rhs: vec![data.len()],
            });
        }
        Ok(Self { rows, dim, data })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            rows: 0,
            dim,
            data: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// `None` for an empty prompt.
    pub fn bind(&self, requires_grad: bool) -> Result<Option<Tensor>> {
        if self.rows == 0 {
            return Ok(None);
        }
        Tensor::leaf(self.data.clone(), &[self.rows, self.dim], requires_grad).map(Some)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptInit {
    Random,
    Padding,
    Text,
}

impl FromStr for PromptInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "random" => Ok(Self::Random),
            "padding" => Ok(Self::Padding),
            "text" => Ok(Self::Text),
            other => Err(Error::config(format!("unknown prompt init method {other:?}"))),
        }
    }
}

impl fmt::Display for PromptInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Random => "random",
            Self::Padding => "padding",
            Self::Text => "text",
        })
    }
}

pub const DEFAULT_PROMPT_TEXT: &str = "Suppose you are a student.";
pub const DEFAULT_PROMPT_LEN: usize = 7;

/// Builds an `m`-row prompt from the model's token embeddings.
///
/// Text initialization assigns the embedding of text token `i mod n`, so a
/// short prompt truncates the text and a long one cycles through it again.
pub fn init_prompt<R: Rng>(
    method: PromptInit,
    m: usize,
    init_text: &str,
    vocab: &Vocab,
    params: &ModelParams,
    rng: &mut R,
) -> Result<SoftPrompt> {
    let d = params.d_model();
    let table = params.array(0);
    let rows_of = |ids: &[TokenId]| -> Vec<f64> {
        (0..m)
            .flat_map(|i| {
                let id = ids[i % ids.len()];
                table[id * d..(id + 1) * d].iter().copied()
            })
            .collect()
    };
    let data = match method {
        PromptInit::Random => {
            let normal = Normal::new(0.0, INIT_STD).expect("valid std");
            (0..m * d).map(|_| normal.sample(rng)).collect()
        }
        PromptInit::Padding => rows_of(&[vocab.pad()]),
        PromptInit::Text => {
            let ids = vocab.encode(init_text, false)?;
            if ids.is_empty() {
                return Err(Error::config("prompt init text has no tokens"));
            }
            rows_of(&ids)
        }
    };
    SoftPrompt::new(m, d, data)
}

// ---------------------------------------------------------------------------
// Differentiable forward
// ---------------------------------------------------------------------------

/// Parameters bound as graph leaves.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub config: ModelConfig,
    pub tensors: Vec<Tensor>,
}

impl ModelVars {
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let expected = layout(&config);
        if expected.len() != tensors.len()
            || expected.iter().zip(&tensors).any(|((_, s, _), t)| s != t.shape())
        {
            return Err(Error::contract("tensors do not match the model layout"));
        }
        Ok(Self { config, tensors })
    }

    /// Gradients in declared order (zeros where none reached a leaf).
    pub fn grads(&self) -> Vec<Vec<f64>> {
        self.tensors
            .iter()
            .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect()
    }

    pub fn has_any_grad(&self) -> bool {
        self.tensors.iter().any(|t| t.grad().is_some())
    }

    fn layer(&self, l: usize, offset: usize) -> &Tensor {
        &self.tensors[layer_index(l, offset)]
    }

    fn check_prompt(&self, prompt: Option<&Tensor>) -> Result<usize> {
        match prompt {
            None => Ok(0),
            Some(p) if p.shape().len() == 2 && p.shape()[1] == self.config.d_model => Ok(p.shape()[0]),
            Some(p) => Err(Error::Shape {
                op: "prompt",
                lhs: p.shape().to_vec(),
                rhs: vec![self.config.d_model],
            }),
        }
    }

    /// Embeds `prompt ‖ ids`. Prompt rows carry no positional embedding;
    /// token `i` of `ids` takes position `start + i`.
    fn embed(&self, prompt: Option<&Tensor>, ids: &[TokenId], start: usize) -> Result<Option<Tensor>> {
        let m = self.check_prompt(prompt)?;
        if m + ids.len() == 0 {
            return Ok(None);
        }
        if m + start + ids.len() > self.config.max_seq_len {
            return Err(Error::Length {
                len: m + start + ids.len(),
                max: self.config.max_seq_len,
            });
        }
        let tokens = if ids.is_empty() {
            None
        } else {
            let positions: Vec<usize> = (start..start + ids.len()).collect();
            let pos = Tensor::embedding(&self.tensors[1], &positions)?;
            Some(Tensor::embedding(&self.tensors[0], ids)?.add(&pos)?)
        };
        match (prompt, tokens) {
            (Some(p), Some(t)) => Tensor::concat_rows(&[p.clone(), t]).map(Some),
            (Some(p), None) => Ok(Some(p.clone())),
            (None, t) => Ok(t),
        }
    }

    /// One pre-norm transformer block. `past` holds keys and values of earlier
    /// positions; the block's own keys and values are returned alongside.
    fn block(&self, l: usize, x: &Tensor, past: Option<(&Tensor, &Tensor)>) -> Result<(Tensor, Tensor, Tensor)> {
        let h = x.layer_norm(self.layer(l, LN1_G), self.layer(l, LN1_B))?;
        let q = h.matmul(self.layer(l, WQ))?.add_row(self.layer(l, BQ))?;
        let k = h.matmul(self.layer(l, WK))?.add_row(self.layer(l, BK))?;
        let v = h.matmul(self.layer(l, WV))?.add_row(self.layer(l, BV))?;
        let att = match past {
            Some((pk, pv)) => {
                let kf = Tensor::concat_rows(&[pk.clone(), k.clone()])?;
                let vf = Tensor::concat_rows(&[pv.clone(), v.clone()])?;
                Tensor::causal_attention(&q, &kf, &vf, self.config.n_heads)?
            }
            None => Tensor::causal_attention(&q, &k, &v, self.config.n_heads)?,
        };
        let x = x.add(&att.matmul(self.layer(l, WO))?.add_row(self.layer(l, BO))?)?;
        let h = x.layer_norm(self.layer(l, LN2_G), self.layer(l, LN2_B))?;
        let f = h
            .matmul(self.layer(l, W1))?
            .add_row(self.layer(l, B1))?
            .gelu()
            .matmul(self.layer(l, W2))?
            .add_row(self.layer(l, B2))?;
        Ok((x.add(&f)?, k, v))
    }

    fn head(&self, h: &Tensor) -> Result<Tensor> {
        let n = self.tensors.len();
        let (g, b) = if self.config.tie_embeddings {
            (&self.tensors[n - 2], &self.tensors[n - 1])
        } else {
            (&self.tensors[n - 3], &self.tensors[n - 2])
        };
        let h = h.layer_norm(g, b)?;
        let logits = if self.config.tie_embeddings {
            h.matmul(&self.tensors[0].transpose()?)?
        } else {
            h.matmul(&self.tensors[n - 1])?
        };
        logits.log_softmax()
    }

    /// Runs a shared prefix once and every suffix on top of it. Returns the
    /// final hidden states of each suffix.
    fn run(&self, prefix: Option<Tensor>, suffixes: Vec<Tensor>) -> Result<Vec<Tensor>> {
        let mut prefix = prefix;
        let mut xs = suffixes;
        for l in 0..self.config.n_layers {
            let past = match &prefix {
                Some(p) => {
                    let (out, k, v) = self.block(l, p, None)?;
                    prefix = Some(out);
                    Some((k, v))
                }
                None => None,
            };
            xs = xs
                .iter()
                .map(|x| {
                    self.block(l, x, past.as_ref().map(|(k, v)| (k, v)))
                        .map(|(out, _, _)| out)
                })
                .collect::<Result<Vec<_>>>()?;
        }
        Ok(xs)
    }

    /// Log-probabilities for every position of `prompt ‖ ids`: row `t` is the
    /// distribution of the token following position `t`.
    pub fn forward(&self, ids: &[TokenId], prompt: Option<&Tensor>) -> Result<Tensor> {
        let x = self
            .embed(prompt, ids, 0)?
            .ok_or_else(|| Error::contract("forward of an empty sequence"))?;
        let h = self.run(None, vec![x])?.pop().unwrap();
        self.head(&h)
    }

    /// The `T` rows that predict `response` under teacher forcing on
    /// `prompt ‖ request ‖ response`.
    pub fn response_log_probs(
        &self,
        prompt: Option<&Tensor>,
        request: &[TokenId],
        response: &[TokenId],
    ) -> Result<Tensor> {
        self.response_log_probs_batch(prompt, &[(request, response)])
            .map(|mut v| v.pop().unwrap())
    }

    /// Batched [`ModelVars::response_log_probs`]. Requests sharing a common
    /// token prefix have that prefix (and the prompt) computed once.
    pub fn response_log_probs_batch(
        &self,
        prompt: Option<&Tensor>,
        items: &[(&[TokenId], &[TokenId])],
    ) -> Result<Vec<Tensor>> {
        let m = self.check_prompt(prompt)?;
        for (req, resp) in items {
            if resp.is_empty() {
                return Err(Error::contract("response must contain at least one token"));
            }
            if req.is_empty() {
                return Err(Error::contract("request must contain at least one token"));
            }
            let len = m + req.len() + resp.len();
            if len > self.config.max_seq_len {
                return Err(Error::Length {
                    len,
                    max: self.config.max_seq_len,
                });
            }
        }
        if items.is_empty() {
            return Ok(Vec::new());
        }
        // The row predicting the first response token sits on the last
        // request token, so that token always stays in the suffix.
        let shared = if items.len() > 1 {
            common_prefix_len(items.iter().map(|(r, _)| *r))
                .min(items.iter().map(|(r, _)| r.len() - 1).min().unwrap())
        } else {
            0
        };
        let first_req = items[0].0;
        let (prefix, start) = if items.len() > 1 {
            (self.embed(prompt, &first_req[..shared], 0)?, shared)
        } else {
            (None, 0)
        };
        let mut suffixes = Vec::with_capacity(items.len());
        let mut offsets = Vec::with_capacity(items.len());
        for (req, resp) in items {
            let mut ids: Vec<TokenId> = req[shared..].to_vec();
            ids.extend_from_slice(&resp[..resp.len() - 1]);
            let seg_prompt = if items.len() > 1 { None } else { prompt };
            let local_m = if items.len() > 1 { 0 } else { m };
            suffixes.push(self.embed(seg_prompt, &ids, start)?.expect("nonempty suffix"));
            offsets.push((local_m + req.len() - shared - 1, resp.len()));
        }
        let hs = self.run(prefix, suffixes)?;
        hs.iter()
            .zip(offsets)
            .map(|(h, (off, t))| self.head(&h.slice_rows(off, t)?))
            .collect()
    }
}

fn common_prefix_len<'a>(mut seqs: impl Iterator<Item = &'a [TokenId]>) -> usize {
    let Some(first) = seqs.next() else { return 0 };
    seqs.fold(first.len(), |n, s| {
        first[..n].iter().zip(s).take_while(|(a, b)| a == b).count()
    })
}

// ---------------------------------------------------------------------------
// Incremental inference
// ---------------------------------------------------------------------------

/// One-position-at-a-time evaluation with a key/value cache. Builds no graph.
#[derive(Clone)]
pub struct InferenceSession<'a> {
    params: &'a ModelParams,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
    prompt_rows: usize,
    last: Vec<f64>,
}

impl<'a> InferenceSession<'a> {
    /// Starts a session and feeds the prompt rows, if any.
    pub fn new(params: &'a ModelParams, prompt: Option<&SoftPrompt>) -> Result<Self> {
        let layers = params.config.n_layers;
        let mut s = Self {
            params,
            keys: vec![Vec::new(); layers],
            values: vec![Vec::new(); layers],
            len: 0,
            prompt_rows: 0,
            last: Vec::new(),
        };
        if let Some(p) = prompt {
            if p.dim != params.d_model() {
                return Err(Error::Shape {
                    op: "prompt",
                    lhs: vec![p.rows, p.dim],
                    rhs: vec![params.d_model()],
                });
            }
            for i in 0..p.rows {
                s.push_embedding(p.row(i), None)?;
            }
            s.prompt_rows = p.rows;
        }
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Next-token log-probabilities after the last fed position.
    pub fn log_probs(&self) -> &[f64] {
        &self.last
    }

    pub fn push(&mut self, token: TokenId) -> Result<()> {
        let cfg = &self.params.config;
        if token >= cfg.vocab_size {
            return Err(Error::Index {
                op: "embedding",
                index: token,
                size: cfg.vocab_size,
            });
        }
        let d = cfg.d_model;
        let row = self.params.array(0)[token * d..(token + 1) * d].to_vec();
        self.push_embedding(&row, Some(self.len - self.prompt_rows))
    }

    pub fn push_all(&mut self, tokens: &[TokenId]) -> Result<()> {
        tokens.iter().try_for_each(|&t| self.push(t))
    }

    fn push_embedding(&mut self, emb: &[f64], position: Option<usize>) -> Result<()> {
        let p = self.params;
        let cfg = &p.config;
        if self.len >= cfg.max_seq_len {
            return Err(Error::Length {
                len: self.len + 1,
                max: cfg.max_seq_len,
            });
        }
        let d = cfg.d_model;
        let heads = cfg.n_heads;
        let dh = d / heads;
        let mut x = emb.to_vec();
        if let Some(i) = position {
            let pos = &p.array(1)[i * d..(i + 1) * d];
            x.iter_mut().zip(pos).for_each(|(a, b)| *a += b);
        }
        let scale = 1.0 / (dh as f64).sqrt();
        let n = self.len + 1;
        for l in 0..cfg.n_layers {
            let w = |o| p.array(layer_index(l, o));
            let h = layer_norm_vec(&x, w(LN1_G), w(LN1_B));
            let q = affine(&h, w(WQ), w(BQ));
            let k = affine(&h, w(WK), w(BK));
            let v = affine(&h, w(WV), w(BV));
            self.keys[l].extend_from_slice(&k);
            self.values[l].extend_from_slice(&v);
            let (kc, vc) = (&self.keys[l], &self.values[l]);
            let mut att = vec![0.0; d];
            let mut scores = vec![0.0; n];
            for hd in 0..heads {
                let c = hd * dh;
                let qh = &q[c..c + dh];
                let mut max = f64::NEG_INFINITY;
                for (j, s) in scores.iter_mut().enumerate() {
                    *s = crate::tensor::dot(qh, &kc[j * d + c..j * d + c + dh]) * scale;
                    max = max.max(*s);
                }
                let mut z = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    z += *s;
                }
                for (j, s) in scores.iter().enumerate() {
                    axpy(s / z, &vc[j * d + c..j * d + c + dh], &mut att[c..c + dh]);
                }
            }
            let o = affine(&att, w(WO), w(BO));
            x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);
            let h = layer_norm_vec(&x, w(LN2_G), w(LN2_B));
            let mut f = affine(&h, w(W1), w(B1));
            f.iter_mut().for_each(|v| *v = gelu(*v));
            let f = affine(&f, w(W2), w(B2));
            x.iter_mut().zip(&f).for_each(|(a, b)| *a += b);
        }
        let nparams = p.arrays.len();
        let (g, b) = if cfg.tie_embeddings {
            (p.array(nparams - 2), p.array(nparams - 1))
        } else {
            (p.array(nparams - 3), p.array(nparams - 2))
        };
        let h = layer_norm_vec(&x, g, b);
        let (wout, tied) = p.output_weight();
        let v = cfg.vocab_size;
        let logits: Vec<f64> = if tied {
            (0..v).map(|t| crate::tensor::dot(&h, &wout[t * d..(t + 1) * d])).collect()
        } else {
            let mut out = vec![0.0; v];
            for (i, hi) in h.iter().enumerate() {
                axpy(*hi, &wout[i * v..(i + 1) * v], &mut out);
            }
            out
        };
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: "log_softmax" });
        }
        self.last = log_softmax_row(&logits).collect();
        self.len += 1;
        Ok(())
    }
}

fn layer_norm_vec(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let (mean, inv) = norm_stats(x);
    x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(v, (g, b))| (v - mean) * inv * g + b)
        .collect()
}

/// `x · W + b` for a row vector `x` and row-major `W`.
fn affine(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let cols = b.len();
    let mut out = b.to_vec();
    for (i, xi) in x.iter().enumerate() {
        axpy(*xi, &w[i * cols..(i + 1) * cols], &mut out);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny(seed: u64) -> ModelParams {
        ModelParams::init(&ModelConfig {
            vocab_size: 11,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 32,
            tie_embeddings: false,
            seed,
        })
        .unwrap()
    }

    /// Weights perturbed away from the zero-initialized projections so every
    /// path carries signal.
    pub(crate) fn tiny_active(seed: u64) -> ModelParams {
        let mut p = tiny(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
        let normal = Normal::new(0.0, 0.3).unwrap();
        for a in &mut p.arrays {
            for v in &mut a.data {
                *v += normal.sample(&mut rng);
            }
        }
        p
    }

    #[test]
    fn config_rejects_indivisible_heads() {
        let mut c = tiny(0).config;
        c.n_heads = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn zero_output_projection_gives_uniform_rows() {
        let mut p = tiny(1);
        p.get_mut("lm_head").unwrap().data.iter_mut().for_each(|v| *v = 0.0);
        let out = p.bind().unwrap().forward(&[1, 2, 3], None).unwrap();
        let u = (1.0f64 / 11.0).ln();
        assert!(out.data().iter().all(|v| (v - u).abs() < 1e-12));
    }

    #[test]
    fn rows_are_normalized() {
        let p = tiny_active(2);
        let out = p.bind().unwrap().forward(&[4, 5, 6, 7], None).unwrap();
        for row in out.data().chunks(11) {
            let s: f64 = row.iter().map(|x| x.exp()).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn causal_rows_bit_identical() {
        let p = tiny_active(3);
        let vars = p.bind().unwrap();
        let a = vars.forward(&[1, 2, 3, 4, 5], None).unwrap();
        let b = vars.forward(&[1, 2, 3, 9, 5], None).unwrap();
        assert_eq!(&a.data()[..3 * 11], &b.data()[..3 * 11]);
        assert_ne!(&a.data()[3 * 11..], &b.data()[3 * 11..]);
    }

    #[test]
    fn empty_prompt_matches_no_prompt() {
        let p = tiny_active(4);
        let vars = p.bind().unwrap();
        let empty = SoftPrompt::empty(8).bind(false).unwrap();
        let a = vars.forward(&[1, 2, 3], empty.as_ref()).unwrap();
        let b = vars.forward(&[1, 2, 3], None).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn too_long_sequence_is_a_length_error() {
        let p = tiny(5);
        let ids = vec![1; 33];
        assert!(matches!(
            p.bind().unwrap().forward(&ids, None),
            Err(Error::Length { len: 33, max: 32 })
        ));
    }

    #[test]
    fn response_rows_slice_forward() {
        let p = tiny_active(6);
        let vars = p.bind().unwrap();
        let req = [1, 4, 5, 6];
        let resp = [7, 8, 2];
        let rows = vars.response_log_probs(None, &req, &resp).unwrap();
        let full = vars.forward(&[1, 4, 5, 6, 7, 8], None).unwrap();
        assert_eq!(rows.shape(), &[3, 11]);
        assert_eq!(rows.data(), &full.data()[3 * 11..6 * 11]);

        let one = vars.response_log_probs(None, &req, &[7]).unwrap();
        assert_eq!(one.data(), &full.data()[3 * 11..4 * 11]);
        assert!(matches!(
            vars.response_log_probs(None, &req, &[]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn prompt_shifts_response_rows_by_m() {
        let p = tiny_active(7);
        let vars = p.bind().unwrap();
        let prompt = SoftPrompt::new(3, 8, (0..24).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let pt = prompt.bind(false).unwrap();
        let req = [1, 4, 5];
        let resp = [6, 2];
        let rows = vars.response_log_probs(pt.as_ref(), &req, &resp).unwrap();
        let full = vars.forward(&[1, 4, 5, 6], pt.as_ref()).unwrap();
        // prompt rows 0..3, request rows 3..6; first response row at m + n - 1
        assert_eq!(rows.data(), &full.data()[5 * 11..7 * 11]);
    }

    #[test]
    fn batched_prefix_sharing_matches_individual() {
        let p = tiny_active(8);
        let vars = p.bind().unwrap();
        let prompt = SoftPrompt::new(2, 8, (0..16).map(|i| (i as f64).cos() * 0.5).collect()).unwrap();
        let pt = prompt.bind(false).unwrap();
        let reqs: [&[TokenId]; 3] = [&[1, 4, 5, 6, 7], &[1, 4, 5, 9], &[1, 4, 5, 6, 7, 3]];
        let resps: [&[TokenId]; 3] = [&[8, 2], &[10, 10, 2], &[2]];
        for prompt in [None, pt.as_ref()] {
            let items: Vec<_> = reqs.iter().copied().zip(resps.iter().copied()).collect();
            let batch = vars.response_log_probs_batch(prompt, &items).unwrap();
            for ((req, resp), b) in items.iter().zip(&batch) {
                let single = vars.response_log_probs(prompt, req, resp).unwrap();
                assert_eq!(single.shape(), b.shape());
                for (x, y) in single.data().iter().zip(b.data()) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn inference_session_matches_graph_forward() {
        for tied in [false, true] {
            let mut cfg = tiny(9).config;
            cfg.tie_embeddings = tied;
            let mut p = ModelParams::init(&cfg).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let normal = Normal::new(0.0, 0.3).unwrap();
            p.arrays.iter_mut().flat_map(|a| a.data.iter_mut()).for_each(|v| *v += normal.sample(&mut rng));
            let prompt = SoftPrompt::new(2, 8, (0..16).map(|i| (i as f64).sin()).collect()).unwrap();
            let ids = [1, 3, 5, 7, 9, 2];
            let full = p.bind().unwrap().forward(&ids, prompt.bind(false).unwrap().as_ref()).unwrap();
            let mut s = InferenceSession::new(&p, Some(&prompt)).unwrap();
            for (t, &id) in ids.iter().enumerate() {
                s.push(id).unwrap();
                let row = &full.data()[(t + 2) * 11..(t + 3) * 11];
                for (a, b) in s.log_probs().iter().zip(row) {
                    assert!((a - b).abs() < 1e-10, "tied={tied} t={t}");
                }
            }
        }
    }

    #[test]
    fn text_prompt_cycles_and_truncates() {
        let p = tiny(10);
        let vocab = Vocab::ascii();
        // The tiny model only has 11 ids; use a vocab-sized model instead.
        let big = ModelParams::init(&ModelConfig {
            vocab_size: vocab.len(),
            ..p.config.clone()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pr = init_prompt(PromptInit::Text, 5, "ab", &vocab, &big, &mut rng).unwrap();
        let e = |c: &str| {
            let id = vocab.encode(c, true).unwrap()[0];
            big.arrays[0].data[id * 8..(id + 1) * 8].to_vec()
        };
        let expect: Vec<f64> = ["a", "b", "a", "b", "a"].iter().flat_map(|c| e(c)).collect();
        assert_eq!(pr.data, expect);

        let pr = init_prompt(PromptInit::Text, DEFAULT_PROMPT_LEN, DEFAULT_PROMPT_TEXT, &vocab, &big, &mut rng).unwrap();
        let expect: Vec<f64> = "Suppose".chars().flat_map(|c| e(&c.to_string())).collect();
        assert_eq!(pr.data, expect);

        let pad = init_prompt(PromptInit::Padding, 3, "", &vocab, &big, &mut rng).unwrap();
        let e_pad = big.arrays[0].data[..8].to_vec();
        assert!((0..3).all(|i| pad.row(i) == e_pad.as_slice()));

        let rnd = init_prompt(PromptInit::Random, 4, "", &vocab, &big, &mut rng).unwrap();
        assert_eq!((rnd.rows, rnd.dim), (4, 8));
        assert!(init_prompt(PromptInit::Text, 4, "", &vocab, &big, &mut rng).is_err());
        assert!("learned".parse::<PromptInit>().is_err());
    }

    #[test]
    fn frozen_params_refuse_updates() {
        let mut p = tiny(11);
        p.frozen = true;
        let vars = p.bind().unwrap();
        assert!(vars.tensors.iter().all(|t| !t.requires_grad()));
        let grads: Vec<Vec<f64>> = p.arrays.iter().map(|a| vec![1.0; a.data.len()]).collect();
        let mut st = p.optimizer_state();
        assert!(p.apply_grads(&grads, &mut st, &AdamWConfig::default()).is_err());
    }
}
