//! Distillation objectives, the prompt/student training step, and the
//! baseline trainers.
//!
//! Divergences are computed on teacher-forced response rows. Each loss
//! decides which side carries gradient: the other side is evaluated under
//! [`no_grad`] and enters the graph as a constant.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{EncodedExample, TokenId};
use crate::error::{Error, Result};
use crate::model::{ModelParams, ModelVars, SoftPrompt};
use crate::optim::{adamw_step, clip_grad_norm, AdamState, AdamWConfig};
use crate::sampler::{sample_batch, DecodeConfig, Prompted};
use crate::tensor::{no_grad, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    PromptKd,
    Sft,
    Kd,
    SeqKd,
    Gkd,
}

impl Method {
    pub const ALL: [Method; 5] = [Self::PromptKd, Self::Sft, Self::Kd, Self::SeqKd, Self::Gkd];

    pub fn needs_teacher(self) -> bool {
        self != Self::Sft
    }

    /// Methods that start from the warm-started student.
    pub fn uses_student_samples(self) -> bool {
        matches!(self, Self::PromptKd | Self::Gkd)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PromptKd => "promptkd",
            Self::Sft => "sft",
            Self::Kd => "kd",
            Self::SeqKd => "seqkd",
            Self::Gkd => "gkd",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "promptkd" => Ok(Self::PromptKd),
            "sft" => Ok(Self::Sft),
            "kd" => Ok(Self::Kd),
            "seqkd" => Ok(Self::SeqKd),
            "gkd" => Ok(Self::Gkd),
            other => Err(Error::config(format!("unknown method {other:?}"))),
        }
    }
}

/// Which argument of the divergence holds the distribution being trained.
/// `Reverse` puts it first, `Forward` second.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KlDirection {
    Reverse,
    Forward,
}

impl FromStr for KlDirection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "reverse" => Ok(Self::Reverse),
            "forward" => Ok(Self::Forward),
            other => Err(Error::config(format!("unknown KL direction {other:?}"))),
        }
    }
}

impl fmt::Display for KlDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Reverse => "reverse",
            Self::Forward => "forward",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// K
    pub total_steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub method: Method,
    pub kd_direction: KlDirection,
    pub reg_direction: KlDirection,
    pub student_direction: KlDirection,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Whether the prompt objective includes the regularizer.
    pub use_reg: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 1000,
            learning_rate: 1e-3,
            batch_size: 8,
            seed: 0,
            method: Method::PromptKd,
            kd_direction: KlDirection::Reverse,
            reg_direction: KlDirection::Reverse,
            student_direction: KlDirection::Reverse,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            grad_clip: 1.0,
            use_reg: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::config("total_steps must be ≥ 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be ≥ 1"));
        }
        self.adamw().validate()
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss_kd: Option<f64>,
    pub loss_reg: Option<f64>,
    pub coefficient: Option<f64>,
    pub loss_prompt: Option<f64>,
    pub loss_student: f64,
    pub wall_time: f64,
}

// ---------------------------------------------------------------------------
// Objectives
// ---------------------------------------------------------------------------

/// `D_KL(P ‖ Q)` summed over the vocabulary at each masked row, averaged over
/// masked rows.
pub fn masked_kl(p_log: &Tensor, q_log: &Tensor, mask: &[bool]) -> Result<Tensor> {
    if p_log.shape() != q_log.shape() || p_log.shape().len() != 2 {
        return Err(Error::Shape {
            op: "masked_kl",
            lhs: p_log.shape().to_vec(),
            rhs: q_log.shape().to_vec(),
        });
    }
    if mask.len() != p_log.shape()[0] {
        return Err(Error::Shape {
            op: "masked_kl",
            lhs: p_log.shape().to_vec(),
            rhs: vec![mask.len()],
        });
    }
    let rows: Vec<usize> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
    if rows.is_empty() {
        return Err(Error::contract("masked_kl needs at least one masked position"));
    }
    let (p, q) = if rows.len() == mask.len() {
        (p_log.clone(), q_log.clone())
    } else {
        (p_log.gather_rows(&rows)?, q_log.gather_rows(&rows)?)
    };
    Ok(p.exp().mul(&p.sub(&q)?)?.sum_last()?.mean())
}

/// Mean of per-example `masked_kl` over all response rows.
pub fn batch_kl(p_rows: &[Tensor], q_rows: &[Tensor]) -> Result<Tensor> {
    if p_rows.len() != q_rows.len() || p_rows.is_empty() {
        return Err(Error::contract("batch_kl needs equal, nonempty batches"));
    }
    let per: Vec<Tensor> = p_rows
        .iter()
        .zip(q_rows)
        .map(|(p, q)| masked_kl(p, q, &vec![true; p.shape()[0]]))
        .collect::<Result<_>>()?;
    Ok(Tensor::sum_all(&per)?.scale(1.0 / per.len() as f64))
}

/// Divergence with the trained distribution `trained` placed per `dir`.
fn directed_kl(trained: &[Tensor], other: &[Tensor], dir: KlDirection) -> Result<Tensor> {
    match dir {
        KlDirection::Reverse => batch_kl(trained, other),
        KlDirection::Forward => batch_kl(other, trained),
    }
}

/// Token-averaged negative log-likelihood of the responses.
pub fn cross_entropy(rows: &[Tensor], batch: &[Pair<'_>]) -> Result<Tensor> {
    let per: Vec<Tensor> = rows
        .iter()
        .zip(batch)
        .map(|(r, (_, resp))| Ok(r.pick(resp)?.mean().scale(-1.0)))
        .collect::<Result<_>>()?;
    Ok(Tensor::sum_all(&per)?.scale(1.0 / per.len() as f64))
}

pub type Pair<'a> = (&'a [TokenId], &'a [TokenId]);

pub fn pairs(batch: &[EncodedExample]) -> Vec<Pair<'_>> {
    batch
        .iter()
        .map(|e| (e.request_ids.as_slice(), e.response_ids.as_slice()))
        .collect()
}

fn rows(vars: &ModelVars, prompt: Option<&Tensor>, batch: &[Pair<'_>]) -> Result<Vec<Tensor>> {
    vars.response_log_probs_batch(prompt, batch)
}

fn const_rows(vars: &ModelVars, prompt: Option<&Tensor>, batch: &[Pair<'_>]) -> Result<Vec<Tensor>> {
    no_grad(|| rows(vars, prompt, batch))
}

fn detached(prompt: Option<&Tensor>) -> Option<Tensor> {
    prompt.map(Tensor::detach)
}

/// `D(p(y|P,x) ‖ q_θ(y|x))` for reverse direction; gradient reaches only the
/// prompt.
pub fn loss_kd(
    teacher: &ModelVars,
    prompt: Option<&Tensor>,
    student: &ModelVars,
    batch: &[Pair<'_>],
    dir: KlDirection,
) -> Result<Tensor> {
    let t = rows(teacher, prompt, batch)?;
    let s = const_rows(student, None, batch)?;
    directed_kl(&t, &s, dir)
}

/// `D(p(y|P,x) ‖ p(y|x))` for reverse direction; the promptless pass is
/// a constant.
pub fn loss_reg(
    teacher: &ModelVars,
    prompt: Option<&Tensor>,
    batch: &[Pair<'_>],
    dir: KlDirection,
) -> Result<Tensor> {
    let t = rows(teacher, prompt, batch)?;
    let t0 = const_rows(teacher, None, batch)?;
    directed_kl(&t, &t0, dir)
}

/// `(K − k) / K`, with `k` counted from 0.
pub fn reg_coefficient(k: usize, total: usize) -> Result<f64> {
    if total == 0 {
        return Err(Error::contract("total steps must be ≥ 1"));
    }
    if k > total {
        return Err(Error::contract(format!("step {k} exceeds total {total}")));
    }
    Ok((total - k) as f64 / total as f64)
}

#[derive(Debug)]
pub struct PromptLoss {
    pub total: Tensor,
    pub kd: f64,
    pub reg: f64,
    pub coefficient: f64,
}

/// `L_kd + (K − k)/K · L_reg`.
#[allow(clippy::too_many_arguments)]
pub fn loss_prompt(
    teacher: &ModelVars,
    prompt: Option<&Tensor>,
    student: &ModelVars,
    batch: &[Pair<'_>],
    k: usize,
    total: usize,
    kd_dir: KlDirection,
    reg_dir: KlDirection,
) -> Result<PromptLoss> {
    let s = const_rows(student, None, batch)?;
    prompt_loss_from(teacher, prompt, &s, batch, k, total, kd_dir, reg_dir, true)
}

#[allow(clippy::too_many_arguments)]
fn prompt_loss_from(
    teacher: &ModelVars,
    prompt: Option<&Tensor>,
    student_rows: &[Tensor],
    batch: &[Pair<'_>],
    k: usize,
    total: usize,
    kd_dir: KlDirection,
    reg_dir: KlDirection,
    use_reg: bool,
) -> Result<PromptLoss> {
    let coefficient = reg_coefficient(k, total)?;
    let t = rows(teacher, prompt, batch)?;
    let t0 = const_rows(teacher, None, batch)?;
    let kd = directed_kl(&t, student_rows, kd_dir)?;
    let reg = directed_kl(&t, &t0, reg_dir)?;
    let (kd_v, reg_v) = (kd.item(), reg.item());
    let weight = if use_reg { coefficient } else { 0.0 };
    Ok(PromptLoss {
        total: kd.add(&reg.scale(weight))?,
        kd: kd_v,
        reg: reg_v,
        coefficient,
    })
}

/// `D(q_θ(y|x) ‖ p(y|P,x))` for reverse direction; gradient reaches only the
/// student.
pub fn loss_student(
    teacher: &ModelVars,
    prompt: Option<&Tensor>,
    student: &ModelVars,
    batch: &[Pair<'_>],
    dir: KlDirection,
) -> Result<Tensor> {
    let p = detached(prompt);
    let t = const_rows(teacher, p.as_ref(), batch)?;
    let s = rows(student, None, batch)?;
    directed_kl(&s, &t, dir)
}

// ---------------------------------------------------------------------------
// Training state
// ---------------------------------------------------------------------------

/// Deterministic epoch-wise shuffled batches: the batch for step `k` depends
/// only on `(seed, k)`.
#[derive(Debug, Clone)]
pub struct BatchSchedule {
    len: usize,
    batch_size: usize,
    seed: u64,
    perms: HashMap<usize, Vec<usize>>,
}

impl BatchSchedule {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if len == 0 {
            return Err(Error::contract("empty training set"));
        }
        Ok(Self {
            len,
            batch_size,
            seed,
            perms: HashMap::new(),
        })
    }

    /// `(epoch, example index)` for each slot of step `k`'s batch.
    pub fn batch(&mut self, k: usize) -> Vec<(usize, usize)> {
        (k * self.batch_size..(k + 1) * self.batch_size)
            .map(|g| {
                let epoch = g / self.len;
                let (len, seed) = (self.len, self.seed);
                let perm = self.perms.entry(epoch).or_insert_with(|| {
                    let mut p: Vec<usize> = (0..len).collect();
                    p.shuffle(&mut crate::rng_stream(seed, stream_id(Stream::Shuffle, epoch, 0)));
                    p
                });
                (epoch, perm[g % len])
            })
            .collect()
    }
}

#[derive(Clone, Copy)]
enum Stream {
    Shuffle = 1,
    StudentSample = 2,
    TeacherSample = 3,
}

fn stream_id(kind: Stream, a: usize, b: usize) -> u64 {
    ((kind as u64) << 56) ^ ((a as u64) << 20) ^ b as u64
}

/// Everything one training run mutates. Teacher parameters are frozen and
/// bound once.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub decode: DecodeConfig,
    pub student: ModelParams,
    pub student_opt: Vec<AdamState>,
    pub prompt: Option<SoftPrompt>,
    pub prompt_opt: Option<AdamState>,
    teacher: Option<(ModelParams, ModelVars)>,
    data: Vec<EncodedExample>,
    schedule: BatchSchedule,
    seqkd_cache: HashMap<usize, (usize, Vec<TokenId>)>,
}

impl Trainer {
    pub fn new(
        cfg: TrainConfig,
        decode: DecodeConfig,
        student: ModelParams,
        teacher: Option<ModelParams>,
        prompt: Option<SoftPrompt>,
        data: Vec<EncodedExample>,
    ) -> Result<Self> {
        cfg.validate()?;
        decode.validate()?;
        if cfg.method.needs_teacher() && teacher.is_none() {
            return Err(Error::config(format!("method {} needs a teacher", cfg.method)));
        }
        if student.frozen {
            return Err(Error::contract("student parameters are frozen"));
        }
        if let (Some(t), Some(p)) = (&teacher, &prompt) {
            if p.dim != t.d_model() {
                return Err(Error::Shape {
                    op: "prompt",
                    lhs: vec![p.rows, p.dim],
                    rhs: vec![t.d_model()],
                });
            }
        }
        let teacher = teacher
            .map(|mut t| {
                t.frozen = true;
                let vars = t.bind()?;
                Ok::<_, Error>((t, vars))
            })
            .transpose()?;
        let schedule = BatchSchedule::new(data.len(), cfg.batch_size, cfg.seed)?;
        let decode = DecodeConfig {
            seed: cfg.seed,
            ..decode
        };
        let prompt_opt = prompt.as_ref().map(|p| AdamState::new(p.data.len()));
        Ok(Self {
            student_opt: student.optimizer_state(),
            cfg,
            decode,
            student,
            prompt,
            prompt_opt,
            teacher,
            data,
            schedule,
            seqkd_cache: HashMap::new(),
        })
    }

    pub fn teacher(&self) -> Option<&ModelParams> {
        self.teacher.as_ref().map(|(p, _)| p)
    }

    fn teacher_vars(&self) -> Result<&ModelVars> {
        self.teacher
            .as_ref()
            .map(|(_, v)| v)
            .ok_or_else(|| Error::config("no teacher loaded"))
    }

    /// One step of the configured method at 0-based step `k`.
    pub fn step(&mut self, k: usize) -> Result<StepRecord> {
        let start = Instant::now();
        let mut rec = match self.cfg.method {
            Method::PromptKd => self.promptkd_step(k)?,
            m => self.baseline_step(m, k)?,
        };
        rec.wall_time = start.elapsed().as_secs_f64();
        Ok(rec)
    }

    fn requests(&mut self, k: usize) -> Vec<(usize, usize)> {
        self.schedule.batch(k)
    }

    fn sample_student(&self, k: usize, slots: &[(usize, usize)]) -> Result<Vec<Vec<TokenId>>> {
        let reqs: Vec<&[TokenId]> = slots.iter().map(|&(_, i)| self.data[i].request_ids.as_slice()).collect();
        let streams: Vec<u64> = (0..slots.len())
            .map(|i| stream_id(Stream::StudentSample, k, i))
            .collect();
        sample_batch(&Prompted::plain(&self.student), &reqs, &self.decode, &streams)
    }

    fn update_student(&mut self, vars: &ModelVars) -> Result<()> {
        let mut grads = vars.grads();
        clip_grad_norm(&mut grads, self.cfg.grad_clip);
        let adamw = self.cfg.adamw();
        self.student.apply_grads(&grads, &mut self.student_opt, &adamw)
    }

    /// Pseudo-target sampling, prompt update, then student update against the
    /// freshly updated prompt, all on the same sampled batch.
    pub fn promptkd_step(&mut self, k: usize) -> Result<StepRecord> {
        let total = self.cfg.total_steps;
        let slots = self.requests(k);
        let responses = self.sample_student(k, &slots)?;
        let batch: Vec<Pair<'_>> = slots
            .iter()
            .zip(&responses)
            .map(|(&(_, i), r)| (self.data[i].request_ids.as_slice(), r.as_slice()))
            .collect();
        let teacher = &self
            .teacher
            .as_ref()
            .ok_or_else(|| Error::config("no teacher loaded"))?
            .1;

        // Student rows on the pre-update parameters serve both updates.
        let svars = self.student.bind()?;
        let s_rows = rows(&svars, None, &batch)?;
        let s_const: Vec<Tensor> = s_rows.iter().map(Tensor::detach).collect();

        let mut loss_kd_v = None;
        let mut loss_reg_v = None;
        let mut loss_prompt_v = None;
        let coefficient = reg_coefficient(k, total)?;
        let mut new_prompt = self.prompt.clone();
        if let Some(prompt) = self.prompt.as_ref().filter(|p| !p.is_empty()) {
            let pt = prompt.bind(true)?.expect("nonempty prompt");
            let pl = prompt_loss_from(
                teacher,
                Some(&pt),
                &s_const,
                &batch,
                k,
                total,
                self.cfg.kd_direction,
                self.cfg.reg_direction,
                self.cfg.use_reg,
            )?;
            pl.total.backward()?;
            let mut grads = vec![pt.grad().unwrap_or_else(|| vec![0.0; pt.numel()])];
            clip_grad_norm(&mut grads, self.cfg.grad_clip);
            let mut updated = prompt.clone();
            adamw_step(
                &mut updated.data,
                &grads[0],
                self.prompt_opt.as_mut().expect("prompt optimizer"),
                &self.cfg.adamw(),
            )?;
            loss_kd_v = Some(pl.kd);
            loss_reg_v = Some(pl.reg);
            loss_prompt_v = Some(pl.total.item());
            new_prompt = Some(updated);
        }

        let pt = match &new_prompt {
            Some(p) => p.bind(false)?,
            None => None,
        };
        let t_rows = const_rows(teacher, pt.as_ref(), &batch)?;
        let ls = directed_kl(&s_rows, &t_rows, self.cfg.student_direction)?;
        ls.backward()?;
        let loss_student = ls.item();
        drop(batch);
        self.prompt = new_prompt;
        self.update_student(&svars)?;
        Ok(StepRecord {
            step: k,
            loss_kd: loss_kd_v,
            loss_reg: loss_reg_v,
            coefficient: Some(coefficient),
            loss_prompt: loss_prompt_v,
            loss_student,
            wall_time: 0.0,
        })
    }

    /// SFT, supervised KD, SeqKD or GKD; all update the student only.
    pub fn baseline_step(&mut self, method: Method, k: usize) -> Result<StepRecord> {
        let slots = self.requests(k);
        let generated: Vec<Vec<TokenId>> = match method {
            Method::Gkd => self.sample_student(k, &slots)?,
            Method::SeqKd => self.teacher_targets(&slots)?,
            Method::Sft | Method::Kd => Vec::new(),
            Method::PromptKd => return Err(Error::config("promptkd is not a baseline")),
        };
        let batch: Vec<Pair<'_>> = slots
            .iter()
            .enumerate()
            .map(|(j, &(_, i))| {
                let req = self.data[i].request_ids.as_slice();
                match generated.get(j) {
                    Some(r) => (req, r.as_slice()),
                    None => (req, self.data[i].response_ids.as_slice()),
                }
            })
            .collect();
        let svars = self.student.bind()?;
        let s_rows = rows(&svars, None, &batch)?;
        let loss = match method {
            Method::Sft | Method::SeqKd => cross_entropy(&s_rows, &batch)?,
            Method::Kd => {
                let t = const_rows(self.teacher_vars()?, None, &batch)?;
                batch_kl(&t, &s_rows)?
            }
            Method::Gkd => {
                let t = const_rows(self.teacher_vars()?, None, &batch)?;
                batch_kl(&s_rows, &t)?
            }
            Method::PromptKd => unreachable!(),
        };
        loss.backward()?;
        let value = loss.item();
        drop(batch);
        self.update_student(&svars)?;
        Ok(StepRecord {
            step: k,
            loss_kd: None,
            loss_reg: None,
            coefficient: None,
            loss_prompt: None,
            loss_student: value,
            wall_time: 0.0,
        })
    }

    /// Teacher pseudo-targets, drawn once per epoch for each example.
    fn teacher_targets(&mut self, slots: &[(usize, usize)]) -> Result<Vec<Vec<TokenId>>> {
        let (tparams, _) = self.teacher.as_ref().ok_or_else(|| Error::config("no teacher loaded"))?;
        let model = Prompted::plain(tparams);
        let mut out = Vec::with_capacity(slots.len());
        for &(epoch, i) in slots {
            let fresh = matches!(self.seqkd_cache.get(&i), Some((e, _)) if *e == epoch);
            if !fresh {
                let y = sample_batch(
                    &model,
                    &[self.data[i].request_ids.as_slice()],
                    &self.decode,
                    &[stream_id(Stream::TeacherSample, epoch, i)],
                )?
                .pop()
                .unwrap();
                self.seqkd_cache.insert(i, (epoch, y));
            }
            out.push(self.seqkd_cache[&i].1.clone());
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lp(p: &[f64]) -> Tensor {
        Tensor::new(p.iter().map(|x| x.ln()).collect(), &[1, p.len()]).unwrap()
    }

    #[test]
    fn kl_hand_case() {
        let v = masked_kl(&lp(&[0.5, 0.5]), &lp(&[0.25, 0.75]), &[true]).unwrap().item();
        let expect = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((v - expect).abs() < 1e-12);
        assert!((v - 0.143841).abs() < 1e-6);
    }

    #[test]
    fn kl_identity_and_mask_errors() {
        let p = lp(&[0.2, 0.3, 0.5]);
        assert!(masked_kl(&p, &p, &[true]).unwrap().item().abs() < 1e-12);
        assert!(matches!(masked_kl(&p, &p, &[false]), Err(Error::Contract(_))));
    }

    #[test]
    fn mask_selects_rows() {
        let p = Tensor::new(
            [0.5, 0.5, 0.9, 0.1].iter().map(|x: &f64| x.ln()).collect(),
            &[2, 2],
        )
        .unwrap();
        let q = Tensor::new(
            [0.5, 0.5, 0.5, 0.5].iter().map(|x: &f64| x.ln()).collect(),
            &[2, 2],
        )
        .unwrap();
        assert!(masked_kl(&p, &q, &[true, false]).unwrap().item().abs() < 1e-15);
        let both = masked_kl(&p, &q, &[true, true]).unwrap().item();
        let second = masked_kl(&p, &q, &[false, true]).unwrap().item();
        assert!((both - second / 2.0).abs() < 1e-15);
    }

    #[test]
    fn coefficient_schedule() {
        assert_eq!(reg_coefficient(0, 1000).unwrap(), 1.0);
        assert_eq!(reg_coefficient(1000, 1000).unwrap(), 0.0);
        assert_eq!(reg_coefficient(250, 1000).unwrap(), 0.75);
        assert!(reg_coefficient(1001, 1000).is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        }
        assert!("minillm".parse::<Method>().is_err());
    }

    #[test]
    fn batch_schedule_is_stateless_in_step() {
        let mut a = BatchSchedule::new(10, 4, 3).unwrap();
        let mut b = BatchSchedule::new(10, 4, 3).unwrap();
        let first: Vec<_> = (0..6).map(|k| a.batch(k)).collect();
        assert_eq!(b.batch(5), first[5]);
        // Every epoch visits each example once.
        let epoch0: Vec<usize> = first.concat().iter().filter(|(e, _)| *e == 0).map(|(_, i)| *i).collect();
        let mut sorted = epoch0.clone();
        sorted.sort();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
    }
}
