//! Run configuration: a flat `key = value` file merged with flag
//! overrides (flags win). Paths are validated before long-running work.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use desktune_core::corpus::VOCAB_SIZE;
use desktune_core::lora::LoraConfig;
use desktune_core::model::ModelConfig;
use desktune_core::trainkit::TrainConfig;

/// Which dataset drives split/train/rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    QGen,
    Eval,
}

impl Task {
    pub fn stem(self) -> &'static str {
        match self {
            Task::QGen => "qgen",
            Task::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClientKind {
    Stub,
    Http,
}

/// Merged view of model + train + pipeline settings.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub registry: PathBuf,
    pub task: Task,
    pub client: ClientKind,
    pub gen_triples: Option<usize>,
    pub eval_seeds: usize,

    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub window: Option<usize>,
    pub max_seq: usize,
    pub d_ff: usize,

    pub learning_rate: f64,
    pub batch_size: usize,
    pub micro_batch: usize,
    /// Required: no default (its published value is ambiguous).
    pub max_iters: Option<usize>,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub eval_interval: usize,
    pub eval_iters: usize,
    pub sample_max_new: usize,

    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_dropout: f64,

    pub rank_prompts: usize,
    pub rank_max_new: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            out_dir: PathBuf::from("out"),
            registry: PathBuf::from("assets/registry.json"),
            task: Task::QGen,
            client: ClientKind::Stub,
            gen_triples: None,
            eval_seeds: 4,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            n_kv_heads: 2,
            window: Some(32),
            max_seq: 384,
            d_ff: 256,
            learning_rate: 1e-3,
            batch_size: 4,
            micro_batch: 1,
            max_iters: None,
            weight_decay: 0.01,
            warmup_steps: 20,
            eval_interval: 100,
            eval_iters: 8,
            sample_max_new: 0,
            lora_rank: 8,
            lora_alpha: 16.0,
            lora_dropout: 0.1,
            rank_prompts: 8,
            rank_max_new: 64,
        }
    }
}

fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("config line {}: expected `key = value`", idx + 1))?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg = RunConfig::default();
        cfg.apply_kv(&parse_kv(&text)?)?;
        Ok(cfg)
    }

    fn apply_kv(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        for (key, value) in kv {
            self.set(key, value)
                .with_context(|| format!("config key {key:?}"))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let parse_usize =
            |v: &str| -> Result<usize> { v.parse().map_err(|_| anyhow!("expected integer, got {v:?}")) };
        let parse_f64 =
            |v: &str| -> Result<f64> { v.parse().map_err(|_| anyhow!("expected number, got {v:?}")) };
        match key {
            "seed" => self.seed = value.parse().map_err(|_| anyhow!("bad seed {value:?}"))?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "registry" => self.registry = PathBuf::from(value),
            "task" => {
                self.task = match value {
                    "qgen" => Task::QGen,
                    "eval" => Task::Eval,
                    other => bail!("task must be qgen or eval, got {other:?}"),
                }
            }
            "client" => {
                self.client = match value {
                    "stub" => ClientKind::Stub,
                    "http" => ClientKind::Http,
                    other => bail!("client must be stub or http, got {other:?}"),
                }
            }
            "gen_triples" => self.gen_triples = Some(parse_usize(value)?),
            "eval_seeds" => self.eval_seeds = parse_usize(value)?,
            "d_model" => self.d_model = parse_usize(value)?,
            "n_layers" => self.n_layers = parse_usize(value)?,
            "n_heads" => self.n_heads = parse_usize(value)?,
            "n_kv_heads" => self.n_kv_heads = parse_usize(value)?,
            "window" => {
                self.window = match value {
                    "none" | "full" => None,
                    v => Some(parse_usize(v)?),
                }
            }
            "max_seq" => self.max_seq = parse_usize(value)?,
            "d_ff" => self.d_ff = parse_usize(value)?,
            "learning_rate" => self.learning_rate = parse_f64(value)?,
            "batch_size" => self.batch_size = parse_usize(value)?,
            "micro_batch" => self.micro_batch = parse_usize(value)?,
            "max_iters" => self.max_iters = Some(parse_usize(value)?),
            "weight_decay" => self.weight_decay = parse_f64(value)?,
            "warmup_steps" => self.warmup_steps = parse_usize(value)?,
            "eval_interval" => self.eval_interval = parse_usize(value)?,
            "eval_iters" => self.eval_iters = parse_usize(value)?,
            "sample_max_new" => self.sample_max_new = parse_usize(value)?,
            "lora_rank" => self.lora_rank = parse_usize(value)?,
            "lora_alpha" => self.lora_alpha = parse_f64(value)?,
            "lora_dropout" => self.lora_dropout = parse_f64(value)?,
            "rank_prompts" => self.rank_prompts = parse_usize(value)?,
            "rank_max_new" => self.rank_max_new = parse_usize(value)?,
            other => bail!("unknown config key {other:?}"),
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: VOCAB_SIZE,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            n_kv_heads: self.n_kv_heads,
            window: self.window,
            max_seq: self.max_seq,
            d_ff: self.d_ff,
        }
    }

    pub fn lora_config(&self) -> LoraConfig {
        LoraConfig {
            rank: self.lora_rank,
            alpha: self.lora_alpha,
            dropout_p: self.lora_dropout,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let max_iters = self.max_iters.ok_or_else(|| {
            anyhow!("max_iters is required: set it in the config file or pass --iters")
        })?;
        let cfg = TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            micro_batch: self.micro_batch,
            max_seq: self.max_seq,
            max_iters,
            weight_decay: self.weight_decay,
            warmup_steps: self.warmup_steps,
            eval_interval: self.eval_interval,
            eval_iters: self.eval_iters,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    // Artifact paths under out_dir.
    pub fn dataset_path(&self, task: Task) -> PathBuf {
        self.out_dir.join(format!("{}.jsonl", task.stem()))
    }

    pub fn split_path(&self, task: Task, split: &str) -> PathBuf {
        self.out_dir.join(format!("{}.{split}.jsonl", task.stem()))
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.out_dir.join("checkpoints")
    }

    pub fn loss_curve_path(&self) -> PathBuf {
        self.out_dir.join("loss_curve.csv")
    }

    pub fn sheets_path(&self) -> PathBuf {
        self.out_dir.join("sheets.jsonl")
    }

    pub fn mapping_path(&self) -> PathBuf {
        self.out_dir.join("mapping.jsonl")
    }

    pub fn report_text_path(&self) -> PathBuf {
        self.out_dir.join("report.txt")
    }

    pub fn report_json_path(&self) -> PathBuf {
        self.out_dir.join("report.json")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_flat_key_values_with_comments() {
        let text = "# comment\nseed = 7\ntask = eval\nwindow = none\nmax_iters = 50\n";
        let kv = parse_kv(text).unwrap();
        let mut cfg = RunConfig::default();
        cfg.apply_kv(&kv).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.task, Task::Eval);
        assert_eq!(cfg.window, None);
        assert_eq!(cfg.max_iters, Some(50));
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("learning_rat", "0.1").is_err());
        assert!(cfg.set("batch_size", "four").is_err());
        assert!(cfg.set("task", "both").is_err());
        assert!(parse_kv("novalue\n").is_err());
    }

    #[test]
    fn train_config_requires_max_iters() {
        let cfg = RunConfig::default();
        let err = cfg.train_config().unwrap_err();
        assert!(err.to_string().contains("max_iters"));
        let mut cfg = RunConfig::default();
        cfg.max_iters = Some(100);
        assert!(cfg.train_config().is_ok());
    }
}
