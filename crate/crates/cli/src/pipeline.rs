//! Experiment stages: teacher SFT, student warm start, distillation,
//! evaluation, exposure bias and the prompted-teacher probe.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use promptkd_core::checkpoint::Checkpoint;
use promptkd_core::data::{encode_example, gen_synthetic, load_jsonl, EncodedExample, TokenId, Vocab};
use promptkd_core::distill::{Method, StepRecord, Trainer};
use promptkd_core::eval::{exaccerr, prompted_kl_probe, sampled_rouge, ExposureBiasReport, ProbeInputs};
use promptkd_core::model::{init_prompt, ModelParams, SoftPrompt};
use promptkd_core::sampler::{DecodeConfig, Prompted};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::manifest::RunManifest;

pub const TEACHER_CKPT: &str = "teacher.ckpt";
pub const STUDENT_INIT_CKPT: &str = "student_init.ckpt";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<EncodedExample>,
    pub val: Vec<EncodedExample>,
}

pub fn build_dataset(cfg: &ExperimentConfig, vocab: &Vocab) -> Result<Dataset> {
    let encode = |xs: Vec<_>| -> Result<Vec<EncodedExample>> {
        xs.iter()
            .map(|x| encode_example(x, vocab, false).map_err(Into::into))
            .collect()
    };
    if !cfg.data.train_jsonl.is_empty() {
        let train = load_jsonl(&cfg.data.train_jsonl, false)?;
        let val = load_jsonl(&cfg.data.val_jsonl, false)?;
        let skipped = train.skipped.len() + val.skipped.len();
        if skipped > 0 {
            log::warn!("skipped {skipped} malformed JSONL records");
        }
        return Ok(Dataset {
            train: encode(train.examples)?,
            val: encode(val.examples)?,
        });
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (i, task) in cfg.tasks()?.into_iter().enumerate() {
        let n = cfg.data.train_per_task + cfg.data.val_per_task;
        let mut xs = gen_synthetic(task, n, cfg.data.data_seed.wrapping_add(i as u64), cfg.data.max_input_len)?;
        let v = xs.split_off(cfg.data.train_per_task);
        train.extend(encode(xs)?);
        val.extend(encode(v)?);
    }
    Ok(Dataset { train, val })
}

/// Evenly strided subset of at most `max` items; `max == 0` keeps all.
pub fn subset<T: Clone>(items: &[T], max: usize) -> Vec<T> {
    if max == 0 || max >= items.len() {
        return items.to_vec();
    }
    (0..max).map(|i| items[i * items.len() / max].clone()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub loss_kd: Option<f64>,
    pub loss_reg: Option<f64>,
    pub coefficient: Option<f64>,
    pub loss_prompt: Option<f64>,
    pub loss_student: f64,
}

impl From<&StepRecord> for MetricRow {
    fn from(r: &StepRecord) -> Self {
        Self {
            step: r.step,
            loss_kd: r.loss_kd,
            loss_reg: r.loss_reg,
            coefficient: r.coefficient,
            loss_prompt: r.loss_prompt,
            loss_student: r.loss_student,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValRow {
    pub step: usize,
    pub rouge_f: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub method: String,
    pub dataset: String,
    pub seed: u64,
    pub rouge_f: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposureRow {
    pub l: usize,
    pub r: f64,
    pub e: f64,
    pub r_se: f64,
    pub e_se: f64,
    pub exaccerr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressRow {
    pub fraction: f64,
    pub step: usize,
    pub exaccerr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeCsvRow {
    pub split: String,
    pub teacher: String,
    pub kld_s_i: f64,
    pub kld_s_f: f64,
    pub rouge_greedy: f64,
    pub rouge_sampled: f64,
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// Steps after which the progress snapshots are taken.
pub fn snapshot_steps(total: usize, count: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (1..=count)
        .map(|i| ((total * i) as f64 / count as f64).round() as usize)
        .filter(|&s| s >= 1)
        .collect();
    v.dedup();
    v
}

/// One seed's run directory.
pub struct Run {
    pub cfg: ExperimentConfig,
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub vocab: Vocab,
    data: Option<Dataset>,
}

impl Run {
    /// Opens (or creates) the run directory; `dir` defaults to
    /// `<out root>/seed-<seed>`. A directory created under another config is
    /// refused unless `force` resets it.
    pub fn open(cfg: ExperimentConfig, dir: Option<PathBuf>, force: bool) -> Result<Self> {
        let dir = dir.unwrap_or_else(|| cfg.out_root().join(format!("seed-{}", cfg.run.seed)));
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let hash = cfg.hash();
        let manifest = match RunManifest::load(&dir)? {
            Some(m) if m.config_hash == hash && m.seed == cfg.run.seed => m,
            Some(m) if !force => {
                m.check_hash(&hash)?;
                bail!("run directory belongs to seed {}, not {}", m.seed, cfg.run.seed);
            }
            _ => RunManifest::new(hash, cfg.run.seed),
        };
        let mut run = Self {
            cfg,
            dir,
            manifest,
            vocab: Vocab::ascii(),
            data: None,
        };
        if !run.manifest.is_done("init") {
            fs::write(run.dir.join(CONFIG_FILE), run.cfg.to_text())?;
            run.manifest.complete("init", vec![CONFIG_FILE.into()]);
            run.manifest.save(&run.dir)?;
        }
        Ok(run)
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn data(&mut self) -> Result<&Dataset> {
        if self.data.is_none() {
            self.data = Some(build_dataset(&self.cfg, &self.vocab)?);
        }
        Ok(self.data.as_ref().unwrap())
    }

    fn decode(&self) -> DecodeConfig {
        self.cfg.decode_config()
    }

    /// Runs `body` unless `name` already completed (and `force` is off), then
    /// records its files.
    fn stage(
        &mut self,
        name: &str,
        force: bool,
        body: impl FnOnce(&mut Self) -> Result<Vec<String>>,
    ) -> Result<bool> {
        if self.manifest.is_done(name) && !force {
            log::info!("{name}: already complete");
            return Ok(false);
        }
        let start = Instant::now();
        let files = body(self).with_context(|| format!("stage {name}"))?;
        self.manifest.complete(name, files);
        self.manifest.save(&self.dir)?;
        log::info!("{name}: done in {:.1}s", start.elapsed().as_secs_f64());
        Ok(true)
    }

    fn teacher_path(&self) -> PathBuf {
        if self.cfg.teacher_train.checkpoint.is_empty() {
            self.path(TEACHER_CKPT)
        } else {
            PathBuf::from(&self.cfg.teacher_train.checkpoint)
        }
    }

    pub fn load_teacher(&self) -> Result<ModelParams> {
        let p = self.teacher_path();
        if !p.exists() {
            bail!("teacher checkpoint {} is missing; run train-teacher first", p.display());
        }
        let mut t = Checkpoint::load(&p)?.params;
        t.frozen = true;
        Ok(t)
    }

    /// Supervised training of the teacher from scratch. An interrupted run
    /// resumes from the last saved step.
    pub fn train_teacher(&mut self, force: bool) -> Result<bool> {
        if !self.cfg.teacher_train.checkpoint.is_empty() {
            let p = self.teacher_path();
            if !p.exists() {
                bail!("configured teacher checkpoint {} does not exist", p.display());
            }
            return self.stage("train-teacher", force, |_| Ok(Vec::new()));
        }
        self.stage("train-teacher", force, |run| {
            let tt = run.cfg.teacher_train.clone();
            let mcfg = run.cfg.model_config(&run.cfg.teacher, tt.seed)?;
            let sft = run.cfg.sft_config(
                &crate::config::StageSection {
                    steps: tt.steps,
                    learning_rate: tt.learning_rate,
                    batch_size: tt.batch_size,
                },
                tt.seed,
            );
            let ckpt_path = run.path(TEACHER_CKPT);
            let metrics_path = run.path("teacher_metrics.csv");
            let resume = match Checkpoint::load(&ckpt_path) {
                Ok(c) if !force && c.params.config == mcfg && c.step < tt.steps => Some(c),
                _ => None,
            };
            let (params, start, mut rows) = match resume {
                Some(c) => {
                    log::info!("train-teacher: resuming at step {}", c.step);
                    let rows: Vec<MetricRow> = read_csv(&metrics_path)
                        .unwrap_or_default()
                        .into_iter()
                        .filter(|r: &MetricRow| r.step < c.step)
                        .collect();
                    let step = c.step;
                    (c, step, rows)
                }
                None => (Checkpoint::new(ModelParams::init(&mcfg)?), 0, Vec::new()),
            };
            let data = run.data()?.train.clone();
            let mut tr = Trainer::new(sft, run.decode(), params.params, None, None, data)?;
            if let Some(o) = params.optimizer {
                tr.student_opt = o;
            }
            let every = (tt.steps / 10).max(1);
            for k in start..tt.steps {
                rows.push(MetricRow::from(&tr.step(k)?));
                if (k + 1) % every == 0 || k + 1 == tt.steps {
                    let mut c = Checkpoint::new(tr.student.clone());
                    c.optimizer = Some(tr.student_opt.clone());
                    c.step = k + 1;
                    c.meta.insert("role".into(), "teacher".into());
                    c.save(&ckpt_path)?;
                    write_csv(&metrics_path, &rows)?;
                }
            }
            Ok(vec![TEACHER_CKPT.into(), "teacher_metrics.csv".into()])
        })
    }

    /// Supervised warm start of the student, shared by every method.
    pub fn warm_start(&mut self, force: bool) -> Result<bool> {
        self.stage("warm-start", force, |run| {
            let seed = run.cfg.run.seed;
            let mcfg = run.cfg.model_config(&run.cfg.student, seed)?;
            let student = ModelParams::init(&mcfg)?;
            let ws = run.cfg.warm_start.clone();
            let data = run.data()?.train.clone();
            let mut rows = Vec::new();
            let mut tr = Trainer::new(run.cfg.sft_config(&ws, seed), run.decode(), student, None, None, data)?;
            for k in 0..ws.steps {
                rows.push(MetricRow::from(&tr.step(k)?));
            }
            let mut c = Checkpoint::new(tr.student);
            c.step = ws.steps;
            c.meta.insert("role".into(), "student-init".into());
            c.save(run.path(STUDENT_INIT_CKPT))?;
            write_csv(&run.path("warm_start_metrics.csv"), &rows)?;
            Ok(vec![STUDENT_INIT_CKPT.into(), "warm_start_metrics.csv".into()])
        })
    }

    pub fn load_student_init(&self) -> Result<ModelParams> {
        let p = self.path(STUDENT_INIT_CKPT);
        Ok(Checkpoint::load(&p)
            .with_context(|| format!("loading {}", p.display()))?
            .params)
    }

    fn val_rouge(&mut self, student: &ModelParams) -> Result<f64> {
        let decode = self.decode();
        let (n, max) = (self.cfg.eval.n_samples, self.cfg.eval.max_examples);
        let val = subset(&self.data()?.val, max);
        Ok(sampled_rouge(&Prompted::plain(student), &val, &Vocab::ascii(), &decode, n)?)
    }

    pub fn method_dir(method: Method) -> String {
        format!("distill/{method}")
    }

    /// Trains one method from the warm start, keeping the best-validation and
    /// final checkpoints plus evenly spaced progress snapshots.
    pub fn distill(&mut self, method: Method, force: bool) -> Result<bool> {
        let teacher = if method.needs_teacher() {
            Some(self.load_teacher()?)
        } else {
            None
        };
        self.warm_start(false)?;
        self.stage(&format!("distill:{method}"), force, move |run| {
            let mdir = Self::method_dir(method);
            let student = run.load_student_init()?;
            let prompt = match (&teacher, method) {
                (Some(t), Method::PromptKd) => {
                    let mut rng = promptkd_core::rng_stream(run.cfg.run.seed, u64::MAX);
                    Some(init_prompt(
                        run.cfg.prompt_init()?,
                        run.cfg.prompt.length,
                        &run.cfg.prompt.text,
                        &run.vocab,
                        t,
                        &mut rng,
                    )?)
                }
                _ => None,
            };
            let tcfg = run.cfg.distill_config(method)?;
            let total = tcfg.total_steps;
            let data = run.data()?.train.clone();
            let mut tr = Trainer::new(tcfg, run.decode(), student, teacher, prompt, data)?;
            let snaps = snapshot_steps(total, run.cfg.eval.progress_snapshots);
            let mut files = Vec::new();
            let (mut rows, mut val_rows) = (Vec::new(), Vec::new());
            let mut best = f64::NEG_INFINITY;
            let save = |tr: &Trainer, step: usize, kind: &str, rel: &str, run: &Run| -> Result<()> {
                let mut c = Checkpoint::new(tr.student.clone());
                c.prompt = tr.prompt.clone();
                c.step = step;
                c.meta.insert("method".into(), method.to_string());
                c.meta.insert("kind".into(), kind.into());
                c.save(run.path(rel))?;
                Ok(())
            };
            for k in 0..total {
                rows.push(MetricRow::from(&tr.step(k)?));
                let done = k + 1;
                if done % run.cfg.distill.eval_every == 0 || done == total {
                    let rouge = run.val_rouge(&tr.student)?;
                    log::info!("distill:{method}: step {done} val ROUGE-L {rouge:.4}");
                    val_rows.push(ValRow { step: done, rouge_f: rouge });
                    if rouge > best {
                        best = rouge;
                        save(&tr, done, "best", &format!("{mdir}/best.ckpt"), run)?;
                    }
                }
                if snaps.contains(&done) {
                    let rel = format!("{mdir}/snapshots/step-{done:07}.ckpt");
                    save(&tr, done, "snapshot", &rel, run)?;
                    files.push(rel);
                }
            }
            save(&tr, total, "final", &format!("{mdir}/final.ckpt"), run)?;
            write_csv(&run.path(&format!("{mdir}/metrics.csv")), &rows)?;
            write_csv(&run.path(&format!("{mdir}/val.csv")), &val_rows)?;
            for f in ["best.ckpt", "final.ckpt", "metrics.csv", "val.csv"] {
                files.push(format!("{mdir}/{f}"));
            }
            Ok(files)
        })
    }

    pub fn load_method(&self, method: Method, kind: &str) -> Result<Checkpoint> {
        let p = self.path(&format!("{}/{kind}.ckpt", Self::method_dir(method)));
        if !p.exists() {
            bail!("{} is missing; run distill --method {method} first", p.display());
        }
        Ok(Checkpoint::load(p)?)
    }

    /// Seen (strided training subset) and unseen (validation) splits as scored
    /// by evaluation.
    pub fn eval_splits(&mut self) -> Result<Vec<(&'static str, Vec<EncodedExample>)>> {
        let max = self.cfg.eval.max_examples;
        let data = self.data()?;
        let unseen = subset(&data.val, max);
        let seen = subset(&data.train, unseen.len());
        Ok(vec![("seen", seen), ("unseen", unseen)])
    }

    /// Sampled ROUGE-L of `target` (a method's best checkpoint, or `teacher`).
    pub fn evaluate(&mut self, target: &str, force: bool) -> Result<bool> {
        let model = if target == "teacher" {
            self.load_teacher()?
        } else {
            self.load_method(target.parse()?, "best")?.params
        };
        self.stage(&format!("eval:{target}"), force, |run| {
            let decode = run.decode();
            let mut rows = Vec::new();
            for (split, data) in run.eval_splits()? {
                let r = sampled_rouge(&Prompted::plain(&model), &data, &run.vocab, &decode, run.cfg.eval.n_samples)?;
                rows.push(EvalRow {
                    method: target.to_string(),
                    dataset: split.to_string(),
                    seed: run.cfg.run.seed,
                    rouge_f: r,
                });
            }
            let rel = format!("eval/{target}.csv");
            write_csv(&run.path(&rel), &rows)?;
            Ok(vec![rel])
        })
    }

    fn exposure_requests(&mut self) -> Result<Vec<Vec<TokenId>>> {
        let n = self.cfg.eval.exposure_requests;
        Ok(subset(&self.data()?.val, n)
            .into_iter()
            .map(|e| e.request_ids)
            .collect())
    }

    pub fn exposure_report(&mut self, student: &ModelParams) -> Result<ExposureBiasReport> {
        let teacher = self.load_teacher()?;
        let reqs = self.exposure_requests()?;
        let refs: Vec<&[TokenId]> = reqs.iter().map(Vec::as_slice).collect();
        let e = &self.cfg.eval;
        Ok(exaccerr(
            &Prompted::plain(&teacher),
            &Prompted::plain(student),
            &refs,
            e.exposure_horizon,
            e.exposure_samples,
            self.cfg.run.seed,
        )?)
    }

    /// ExAccErr against generation steps for the best checkpoint, and at the
    /// final horizon for each progress snapshot.
    pub fn exposure_bias(&mut self, method: Method, force: bool) -> Result<bool> {
        let best = self.load_method(method, "best")?;
        self.stage(&format!("exposure-bias:{method}"), force, |run| {
            let report = run.exposure_report(&best.params)?;
            let rows: Vec<ExposureRow> = (0..report.horizon)
                .map(|i| ExposureRow {
                    l: i + 1,
                    r: report.r[i],
                    e: report.e[i],
                    r_se: report.r_se[i],
                    e_se: report.e_se[i],
                    exaccerr: report.exaccerr[i],
                })
                .collect();
            let steps_rel = format!("exposure/{method}_steps.csv");
            write_csv(&run.path(&steps_rel), &rows)?;

            let total = run.cfg.distill.steps;
            let mut progress = Vec::new();
            for step in snapshot_steps(total, run.cfg.eval.progress_snapshots) {
                let p = run.path(&format!("{}/snapshots/step-{step:07}.ckpt", Self::method_dir(method)));
                let snap = Checkpoint::load(&p).with_context(|| format!("loading {}", p.display()))?;
                let rep = run.exposure_report(&snap.params)?;
                progress.push(ProgressRow {
                    fraction: step as f64 / total as f64,
                    step,
                    exaccerr: *rep.exaccerr.last().unwrap(),
                });
            }
            let prog_rel = format!("exposure/{method}_progress.csv");
            write_csv(&run.path(&prog_rel), &progress)?;
            Ok(vec![steps_rel, prog_rel])
        })
    }

    /// Teacher-forced KL from the teacher, with and without the final
    /// distilled prompt, to the warm-started and final students.
    pub fn probe(&mut self, force: bool) -> Result<bool> {
        let teacher = self.load_teacher()?;
        let fin = self.load_method(Method::PromptKd, "final")?;
        let s_i = self.load_student_init()?;
        let prompt: Option<SoftPrompt> = fin.prompt.clone();
        self.stage("probe", force, |run| {
            let decode = run.decode();
            let vocab = run.vocab.clone();
            let inp = ProbeInputs {
                teacher: &teacher,
                prompt: prompt.as_ref(),
                student_initial: &s_i,
                student_final: &fin.params,
                vocab: &vocab,
                decode: &decode,
                n_samples: run.cfg.eval.n_samples,
            };
            let mut rows = Vec::new();
            for (split, data) in run.eval_splits()? {
                for r in prompted_kl_probe(&inp, split, &data)? {
                    rows.push(ProbeCsvRow {
                        split: r.split,
                        teacher: if r.prompted { "prompted" } else { "plain" }.into(),
                        kld_s_i: r.kl_initial,
                        kld_s_f: r.kl_final,
                        rouge_greedy: r.rouge_greedy,
                        rouge_sampled: r.rouge_sampled,
                    });
                }
            }
            write_csv(&run.path("probe.csv"), &rows)?;
            Ok(vec!["probe.csv".into()])
        })
    }
}
