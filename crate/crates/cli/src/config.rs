//! Experiment configuration: a flat file of dotted `section.key = value`
//! lines (valid TOML), with every key defaulted and overridable.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use promptkd_core::data::{SyntheticTask, Vocab};
use promptkd_core::distill::{KlDirection, Method, TrainConfig};
use promptkd_core::model::{ModelConfig, PromptInit, DEFAULT_PROMPT_LEN, DEFAULT_PROMPT_TEXT};
use promptkd_core::sampler::DecodeConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const OUT_ROOT_ENV: &str = "PROMPTKD_OUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// 0 means 4 × d_model.
    pub d_ff: usize,
    pub tie_embeddings: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 0,
            tie_embeddings: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub tasks: Vec<String>,
    pub train_per_task: usize,
    pub val_per_task: usize,
    pub max_input_len: usize,
    /// JSONL sources replace the synthetic tasks when both are set.
    pub train_jsonl: String,
    pub val_jsonl: String,
    pub data_seed: u64,
    pub max_seq_len: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            tasks: SyntheticTask::ALL.iter().map(|t| t.to_string()).collect(),
            train_per_task: 2000,
            val_per_task: 200,
            max_input_len: 8,
            train_jsonl: String::new(),
            val_jsonl: String::new(),
            data_seed: 0,
            max_seq_len: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageSection {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherTrain {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Reuse an existing teacher checkpoint instead of training one.
    pub checkpoint: String,
    pub seed: u64,
}

impl Default for TeacherTrain {
    fn default() -> Self {
        Self {
            steps: 20_000,
            learning_rate: 1e-3,
            batch_size: 8,
            checkpoint: String::new(),
            seed: 1,
        }
    }
}

impl Default for StageSection {
    fn default() -> Self {
        Self {
            steps: 1000,
            learning_rate: 1e-3,
            batch_size: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillSection {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub kd_direction: String,
    pub reg_direction: String,
    pub student_direction: String,
    pub use_reg: bool,
    pub eval_every: usize,
}

impl Default for DistillSection {
    fn default() -> Self {
        Self {
            steps: 5000,
            learning_rate: 1e-3,
            batch_size: 8,
            weight_decay: 0.0,
            grad_clip: 1.0,
            kd_direction: "reverse".into(),
            reg_direction: "reverse".into(),
            student_direction: "reverse".into(),
            use_reg: true,
            eval_every: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSection {
    pub init: String,
    pub length: usize,
    pub text: String,
}

impl Default for PromptSection {
    fn default() -> Self {
        Self {
            init: "text".into(),
            length: DEFAULT_PROMPT_LEN,
            text: DEFAULT_PROMPT_TEXT.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSection {
    pub temperature: f64,
    pub top_k: usize,
    pub top_p: f64,
    pub max_new_tokens: usize,
}

impl Default for DecodeSection {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_k: 0,
            top_p: 1.0,
            max_new_tokens: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub n_samples: usize,
    /// Caps the examples scored per split; 0 scores all.
    pub max_examples: usize,
    pub exposure_horizon: usize,
    pub exposure_requests: usize,
    pub exposure_samples: usize,
    pub progress_snapshots: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            n_samples: 5,
            max_examples: 0,
            exposure_horizon: 50,
            exposure_requests: 50,
            exposure_samples: 10,
            progress_snapshots: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub out_dir: String,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 10,
            out_dir: "runs".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub teacher: ModelSection,
    pub student: ModelSection,
    pub data: DataSection,
    pub teacher_train: TeacherTrain,
    pub warm_start: StageSection,
    pub distill: DistillSection,
    pub prompt: PromptSection,
    pub decode: DecodeSection,
    pub eval: EvalSection,
    pub run: RunSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            teacher: ModelSection::default(),
            student: ModelSection {
                d_model: 64,
                n_layers: 2,
                n_heads: 2,
                ..ModelSection::default()
            },
            data: DataSection::default(),
            teacher_train: TeacherTrain::default(),
            warm_start: StageSection::default(),
            distill: DistillSection::default(),
            prompt: PromptSection::default(),
            decode: DecodeSection::default(),
            eval: EvalSection::default(),
            run: RunSection::default(),
        }
    }
}

/// Sets `a.b.c = value` in a TOML table, parsing `value` as a TOML literal and
/// falling back to a bare string.
fn set_path(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let value: toml::Value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).context("empty override key")?;
    let mut cur = table;
    for p in parts {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .with_context(|| format!("{key}: {p} is not a section"))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Parses config text and applies `key=value` overrides in order.
    pub fn from_text(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().context("config is not valid key = value text")?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .with_context(|| format!("override {o:?} is not key=value"))?;
            set_path(&mut table, k.trim(), v.trim())?;
        }
        let cfg: Self = table.try_into().context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            None => String::new(),
        };
        Self::from_text(&text, overrides)
    }

    pub fn to_text(&self) -> String {
        let table = toml::Table::try_from(self).expect("config serializes");
        let mut out = String::new();
        flatten(&table, "", &mut out);
        out
    }

    /// Digest of everything except the run seed and output location, so runs
    /// differing only in seed aggregate together.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.run = RunSection {
            seed: 0,
            out_dir: String::new(),
        };
        hex(&Sha256::digest(c.to_text().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config(&self.teacher, 0)?.validate()?;
        self.model_config(&self.student, 0)?.validate()?;
        self.methods_check()?;
        self.decode_config().validate()?;
        self.prompt_init()?;
        if self.data.train_jsonl.is_empty() != self.data.val_jsonl.is_empty() {
            bail!("data.train_jsonl and data.val_jsonl must be set together");
        }
        if self.data.train_jsonl.is_empty() {
            self.tasks()?;
            if self.data.train_per_task == 0 || self.data.val_per_task == 0 {
                bail!("data.train_per_task and data.val_per_task must be ≥ 1");
            }
        }
        if self.eval.n_samples == 0 || self.eval.exposure_horizon == 0 || self.eval.exposure_samples == 0 {
            bail!("eval sample counts and horizon must be ≥ 1");
        }
        if self.distill.eval_every == 0 {
            bail!("distill.eval_every must be ≥ 1");
        }
        Ok(())
    }

    fn methods_check(&self) -> Result<()> {
        for d in [
            &self.distill.kd_direction,
            &self.distill.reg_direction,
            &self.distill.student_direction,
        ] {
            d.parse::<KlDirection>()?;
        }
        Ok(())
    }

    pub fn tasks(&self) -> Result<Vec<SyntheticTask>> {
        if self.data.tasks.is_empty() {
            bail!("data.tasks is empty");
        }
        Ok(self
            .data
            .tasks
            .iter()
            .map(|t| t.parse())
            .collect::<promptkd_core::Result<_>>()?)
    }

    pub fn prompt_init(&self) -> Result<PromptInit> {
        Ok(self.prompt.init.parse()?)
    }

    pub fn model_config(&self, s: &ModelSection, seed: u64) -> Result<ModelConfig> {
        Ok(ModelConfig {
            vocab_size: Vocab::ascii().len(),
            d_model: s.d_model,
            n_layers: s.n_layers,
            n_heads: s.n_heads,
            d_ff: s.d_ff,
            max_seq_len: self.data.max_seq_len,
            tie_embeddings: s.tie_embeddings,
            seed,
        })
    }

    pub fn decode_config(&self) -> DecodeConfig {
        DecodeConfig {
            temperature: self.decode.temperature,
            top_k: self.decode.top_k,
            top_p: self.decode.top_p,
            max_new_tokens: self.decode.max_new_tokens,
            seed: self.run.seed,
        }
    }

    pub fn sft_config(&self, stage: &StageSection, seed: u64) -> TrainConfig {
        TrainConfig {
            total_steps: stage.steps.max(1),
            learning_rate: stage.learning_rate,
            batch_size: stage.batch_size,
            seed,
            method: Method::Sft,
            grad_clip: self.distill.grad_clip,
            ..TrainConfig::default()
        }
    }

    pub fn distill_config(&self, method: Method) -> Result<TrainConfig> {
        let d = &self.distill;
        Ok(TrainConfig {
            total_steps: d.steps,
            learning_rate: d.learning_rate,
            batch_size: d.batch_size,
            seed: self.run.seed,
            method,
            kd_direction: d.kd_direction.parse()?,
            reg_direction: d.reg_direction.parse()?,
            student_direction: d.student_direction.parse()?,
            weight_decay: d.weight_decay,
            grad_clip: d.grad_clip,
            use_reg: d.use_reg,
            ..TrainConfig::default()
        })
    }

    /// Output root: `PROMPTKD_OUT_ROOT` overrides `run.out_dir`.
    pub fn out_root(&self) -> PathBuf {
        std::env::var_os(OUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(&self.run.out_dir))
    }
}

fn flatten(table: &toml::Table, prefix: &str, out: &mut String) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            toml::Value::Table(t) => flatten(t, &key, out),
            other => out.push_str(&format!("{key} = {other}\n")),
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let c = ExperimentConfig::default();
        let back = ExperimentConfig::from_text(&c.to_text(), &[]).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_apply_in_order() {
        let c = ExperimentConfig::from_text(
            "teacher.d_model = 32\nprompt.init = \"padding\"\n",
            &["teacher.d_model=64".into(), "distill.kd_direction=forward".into()],
        )
        .unwrap();
        assert_eq!(c.teacher.d_model, 64);
        assert_eq!(c.prompt.init, "padding");
        assert_eq!(c.distill.kd_direction, "forward");
    }

    #[test]
    fn unknown_keys_and_bad_values_fail() {
        assert!(ExperimentConfig::from_text("teacher.width = 3", &[]).is_err());
        assert!(ExperimentConfig::from_text("teacher.n_heads = 3", &[]).is_err());
        assert!(ExperimentConfig::from_text("prompt.init = \"zeros\"", &[]).is_err());
    }

    #[test]
    fn hash_ignores_seed_and_location() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.run.seed = 99;
        b.run.out_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.distill.steps += 1;
        assert_ne!(a.hash(), b.hash());
    }
}
