use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use miktst_core::data::{ColumnMap, SynthConfig, WindowConfig, DEFAULT_GRANULARITY, NUM_CHANNELS};
use miktst_core::eval::{SweepParam, TransferSetup};
use miktst_core::model::ModelConfig;
use miktst_core::train::{FinetuneStrategy, TrainPlan};
use miktst_core::Error;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Where the load series come from. With neither path set, the seeded
/// synthetic generator is used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Raw charging sessions, aggregated into load buckets.
    pub sessions: Option<PathBuf>,
    /// Already aggregated `station,timestamp,load` CSV.
    pub series: Option<PathBuf>,
    pub columns: ColumnMap,
    /// Bucket width in seconds for file inputs.
    pub granularity: i64,
    pub synth: SynthConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            sessions: None,
            series: None,
            columns: ColumnMap::default(),
            granularity: DEFAULT_GRANULARITY,
            synth: SynthConfig::default(),
        }
    }
}

impl DataSection {
    pub fn granularity(&self) -> i64 {
        if self.sessions.is_none() && self.series.is_none() {
            self.synth.granularity
        } else {
            self.granularity
        }
    }
}

/// Fine-tune strategy plus optional overrides of the derived plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub strategy: FinetuneStrategy,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub patience: Option<usize>,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self {
            strategy: FinetuneStrategy::Full,
            epochs: None,
            batch_size: None,
            lr: None,
            patience: None,
        }
    }
}

impl FinetuneSection {
    pub fn plan(&self, strategy: FinetuneStrategy, pretrain: &TrainPlan) -> TrainPlan {
        let mut plan = strategy.plan(pretrain);
        if let Some(e) = self.epochs {
            plan.epochs = e;
        }
        if let Some(b) = self.batch_size {
            plan.batch_size = b;
        }
        if let Some(lr) = self.lr {
            plan.lr = lr;
        }
        if let Some(p) = self.patience {
            plan.patience = Some(p);
        }
        plan
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Seeds for ablation and sweep cells.
    pub seeds: Vec<u64>,
    /// Also report errors in kWh.
    pub physical_units: bool,
    /// Period of the seasonal persistence baseline, in steps.
    pub season: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            physical_units: false,
            season: 24,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub d: Vec<usize>,
    pub n_heads: Vec<usize>,
    pub r: Vec<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            d: vec![8, 16, 32],
            n_heads: vec![1, 2, 4],
            r: vec![1, 2],
        }
    }
}

impl SweepSection {
    pub fn values(&self, param: SweepParam) -> &[usize] {
        match param {
            SweepParam::Width => &self.d,
            SweepParam::Heads => &self.n_heads,
            SweepParam::Layers => &self.r,
        }
    }
}

/// Complete run description. `model.input_len`, `model.horizon` and
/// `model.channels` always follow the window settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataSection,
    pub windows: WindowConfig,
    pub model: ModelConfig,
    pub pretrain: TrainPlan,
    pub finetune: FinetuneSection,
    /// Plan for target-only training; defaults to the pre-training plan.
    pub scratch: Option<TrainPlan>,
    pub eval: EvalSection,
    pub sweep: SweepSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("miktst-out"),
            data: DataSection::default(),
            windows: WindowConfig::default(),
            model: ModelConfig::default(),
            pretrain: TrainPlan::default(),
            finetune: FinetuneSection::default(),
            scratch: None,
            eval: EvalSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

fn problems(r: miktst_core::Result<()>, section: &str, out: &mut Vec<String>) {
    match r {
        Ok(()) => {}
        Err(Error::Config(list)) => out.extend(list.into_iter().map(|p| format!("[{section}] {p}"))),
        Err(e) => out.push(format!("[{section}] {e}")),
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    /// Copies the window geometry into the model section.
    pub fn sync(&mut self) {
        self.model.input_len = self.windows.input_len;
        self.model.horizon = self.windows.horizon;
        self.model.channels = NUM_CHANNELS;
    }

    /// Checks every section and reports all problems at once.
    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        if self.data.sessions.is_some() && self.data.series.is_some() {
            p.push("[data] set either sessions or series, not both".to_string());
        }
        if self.data.granularity <= 0 {
            p.push("[data] granularity must be positive".to_string());
        }
        problems(self.data.synth.validate(), "data.synth", &mut p);
        problems(self.windows.validate(), "windows", &mut p);
        problems(self.model.validate(), "model", &mut p);
        problems(self.pretrain.validate(), "pretrain", &mut p);
        problems(
            self.finetune.plan(self.finetune.strategy, &self.pretrain).validate(),
            "finetune",
            &mut p,
        );
        if let Some(s) = &self.scratch {
            problems(s.validate(), "scratch", &mut p);
        }
        if self.eval.seeds.is_empty() {
            p.push("[eval] seeds must not be empty".to_string());
        }
        if self.eval.season == 0 {
            p.push("[eval] season must be at least 1".to_string());
        }
        if p.is_empty() {
            Ok(())
        } else {
            bail!("invalid configuration: {}", p.join("; "))
        }
    }

    pub fn setup(&self, strategy: FinetuneStrategy) -> TransferSetup {
        TransferSetup {
            model: self.model.clone(),
            pretrain: self.pretrain.clone(),
            finetune: self.finetune.plan(strategy, &self.pretrain),
            scratch: self.scratch_plan(),
        }
    }

    pub fn scratch_plan(&self) -> TrainPlan {
        self.scratch.clone().unwrap_or_else(|| self.pretrain.clone())
    }

    /// SHA-256 of the resolved config, as hex.
    pub fn hash(&self) -> String {
        hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    /// Hash of the settings that determine the prepared dataset.
    pub fn data_hash(&self) -> String {
        hex(&serde_json::to_vec(&(&self.data, &self.windows, self.seed)).expect("config serializes"))
    }
}

fn hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
