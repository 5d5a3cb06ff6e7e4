//! Full forecaster: Mixer feature fusion, Informer temporal model and a KAN
//! output head, all registered in one named parameter store.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mode, ParamStore, Tensor, Var};
use crate::data::NUM_CHANNELS;
use crate::error::{Error, Result, StageExt};
use crate::informer::{InformerCore, InformerShape};
use crate::kan::{grid_buffers, KanHead, SplineGrid};
use crate::mixer::{MixerShape, MixerStack};
use crate::nn::Linear;
use crate::rng;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    Mixer,
    /// Single linear map `C → d` in place of the Mixer.
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Kan,
    /// Single linear map `d → 1` in place of the KAN head.
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(alias = "d")]
    pub d_model: usize,
    pub n_heads: usize,
    /// Encoder and decoder depth.
    #[serde(alias = "r")]
    pub layers: usize,
    /// Feedforward width inside attention blocks; `None` means `8 · d`.
    pub ff_hidden: Option<usize>,
    pub dropout: f64,
    pub input_len: usize,
    pub horizon: usize,
    /// Decoder warm-start length; `None` means `input_len / 2`.
    pub label_len: Option<usize>,
    pub channels: usize,
    pub mixer_blocks: usize,
    /// `None` means `2 · input_len`.
    pub mixer_time_hidden: Option<usize>,
    /// `None` means `2 · channels`.
    pub mixer_channel_hidden: Option<usize>,
    pub mixer_prenorm: bool,
    pub kan_grid_size: usize,
    pub kan_degree: usize,
    pub kan_hidden: usize,
    pub kan_range: [f64; 2],
    pub probsparse_factor: f64,
    pub conv_kernel: usize,
    pub precision: Precision,
    pub embedding: EmbeddingKind,
    pub head: HeadKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 256,
            n_heads: 8,
            layers: 2,
            ff_hidden: None,
            dropout: 0.1,
            input_len: 96,
            horizon: 24,
            label_len: None,
            channels: NUM_CHANNELS,
            mixer_blocks: 2,
            mixer_time_hidden: None,
            mixer_channel_hidden: None,
            mixer_prenorm: false,
            kan_grid_size: 8,
            kan_degree: 3,
            kan_hidden: 16,
            kan_range: [-3.0, 3.0],
            probsparse_factor: 5.0,
            conv_kernel: 1,
            precision: Precision::F64,
            embedding: EmbeddingKind::Mixer,
            head: HeadKind::Kan,
        }
    }
}

impl ModelConfig {
    pub fn ff_hidden(&self) -> usize {
        self.ff_hidden.unwrap_or(8 * self.d_model)
    }

    pub fn label_len(&self) -> usize {
        self.label_len.unwrap_or(self.input_len / 2)
    }

    /// Checks every constraint and reports all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("layers", self.layers),
            ("ff_hidden", self.ff_hidden()),
            ("input_len", self.input_len),
            ("horizon", self.horizon),
            ("channels", self.channels),
            ("mixer_blocks", self.mixer_blocks),
            ("mixer_time_hidden", self.mixer_time_hidden.unwrap_or(1)),
            ("mixer_channel_hidden", self.mixer_channel_hidden.unwrap_or(1)),
            ("kan_grid_size", self.kan_grid_size),
            ("kan_hidden", self.kan_hidden),
            ("conv_kernel", self.conv_kernel),
        ];
        for (name, v) in positive {
            if v == 0 {
                p.push(format!("{name} must be at least 1"));
            }
        }
        if self.n_heads > 0 && self.d_model % self.n_heads != 0 {
            p.push(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            p.push(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.label_len() > self.input_len {
            p.push(format!(
                "label_len {} exceeds input_len {}",
                self.label_len(),
                self.input_len
            ));
        }
        if self.conv_kernel % 2 == 0 {
            p.push(format!("conv_kernel {} must be odd", self.conv_kernel));
        }
        let [lo, hi] = self.kan_range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            p.push(format!("kan_range [{lo}, {hi}] must be increasing"));
        }
        if !(self.probsparse_factor.is_finite() && self.probsparse_factor > 0.0) {
            p.push(format!("probsparse_factor {} must be positive", self.probsparse_factor));
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    /// Field names whose values differ, for checkpoint compatibility errors.
    pub fn diff(&self, other: &ModelConfig) -> Vec<String> {
        let (a, b) = (
            serde_json::to_value(self).expect("config serializes"),
            serde_json::to_value(other).expect("config serializes"),
        );
        let (Some(a), Some(b)) = (a.as_object(), b.as_object()) else {
            return Vec::new();
        };
        a.iter()
            .filter(|(k, v)| b.get(*k) != Some(v))
            .map(|(k, v)| format!("{k}: {v} vs {}", b.get(k).unwrap_or(&serde_json::Value::Null)))
            .collect()
    }
}

/// Component removed in an ablation run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Ablation {
    Mixer,
    Kan,
    Transfer,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::Mixer, Ablation::Kan, Ablation::Transfer];

    pub fn label(self) -> &'static str {
        match self {
            Ablation::Mixer => "w/o-Mcl",
            Ablation::Kan => "w/o-Kcl",
            Ablation::Transfer => "w/o-Dcl",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mixer" | "w/o-mcl" => Ok(Ablation::Mixer),
            "kan" | "w/o-kcl" => Ok(Ablation::Kan),
            "transfer" | "w/o-dcl" => Ok(Ablation::Transfer),
            _ => Err(Error::invalid(format!(
                "unknown ablation component {s:?} (expected mixer, kan or transfer)"
            ))),
        }
    }
}

/// Model config plus whether the variant skips pre-training.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationPlan {
    pub config: ModelConfig,
    pub from_scratch: bool,
}

pub fn ablation_variant(config: &ModelConfig, drop: Ablation) -> AblationPlan {
    let mut config = config.clone();
    let mut from_scratch = false;
    match drop {
        Ablation::Mixer => config.embedding = EmbeddingKind::Linear,
        Ablation::Kan => config.head = HeadKind::Linear,
        Ablation::Transfer => from_scratch = true,
    }
    AblationPlan { config, from_scratch }
}

#[derive(Clone, Debug)]
pub enum Embedding {
    Mixer(MixerStack),
    Linear(Linear),
}

#[derive(Clone, Debug)]
pub enum Head {
    Kan(KanHead),
    Linear(Linear),
}

/// Parameter-name prefixes of the top-level modules, in registration order.
pub const MODULE_PREFIXES: [&str; 4] = ["mixer.", "informer.", "kan.", "head."];

#[derive(Clone, Debug)]
pub struct MikModel<T: Scalar> {
    config: ModelConfig,
    params: ParamStore<T>,
    embedding: Embedding,
    informer: InformerCore,
    head: Head,
}

impl<T: Scalar> MikModel<T> {
    /// Builds and initializes a model; identical seeds give identical weights.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = rng::stream(seed, &[0x1417]);
        let (l, ch, d) = (config.input_len, config.channels, config.d_model);
        let embedding = match config.embedding {
            EmbeddingKind::Mixer => {
                let shape = MixerShape {
                    seq_len: l,
                    channels: ch,
                    time_hidden: config.mixer_time_hidden.unwrap_or(2 * l),
                    channel_hidden: config.mixer_channel_hidden.unwrap_or(2 * ch),
                    d_model: d,
                    blocks: config.mixer_blocks,
                    dropout: config.dropout,
                    prenorm: config.mixer_prenorm,
                };
                Embedding::Mixer(MixerStack::new(&mut params, &shape, &mut rng)?)
            }
            EmbeddingKind::Linear => Embedding::Linear(Linear::new(&mut params, "mixer.embed", ch, d, &mut rng)?),
        };
        let shape = InformerShape {
            d_model: d,
            n_heads: config.n_heads,
            layers: config.layers,
            ff_hidden: config.ff_hidden(),
            conv_kernel: config.conv_kernel,
            dropout: config.dropout,
            input_len: l,
            label_len: config.label_len(),
            horizon: config.horizon,
            factor: config.probsparse_factor,
        };
        let informer = InformerCore::new(&mut params, &shape, &mut rng)?;
        let head = match config.head {
            HeadKind::Kan => {
                let [lo, hi] = config.kan_range;
                let grid = SplineGrid::new(lo, hi, config.kan_grid_size, config.kan_degree)?;
                Head::Kan(KanHead::new(&mut params, &[d, config.kan_hidden, 1], &grid, &mut rng)?)
            }
            HeadKind::Linear => Head::Linear(Linear::new(&mut params, "head.linear", d, 1, &mut rng)?),
        };
        Ok(Self {
            config: config.clone(),
            params,
            embedding,
            informer,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn kan_head(&self) -> Option<&KanHead> {
        match &self.head {
            Head::Kan(k) => Some(k),
            Head::Linear(_) => None,
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.num_scalars()
    }

    /// Scalar parameter count per top-level module prefix.
    pub fn module_counts(&self) -> Vec<(&'static str, usize)> {
        MODULE_PREFIXES
            .iter()
            .map(|&p| {
                let n = self
                    .params
                    .iter()
                    .filter(|(_, q)| q.name.starts_with(p))
                    .map(|(_, q)| q.value.len())
                    .sum();
                (p, n)
            })
            .collect()
    }

    /// Non-trainable tensors stored alongside parameters in checkpoints.
    pub fn buffers(&self) -> Vec<(String, Tensor<T>)> {
        self.kan_head().map(grid_buffers).unwrap_or_default()
    }

    /// `[L_x, C]` standardized input → `[H]` standardized forecast, using
    /// parameter values from `params` (which must share this model's layout).
    pub fn forward_with(&self, g: &mut Graph<T>, params: &ParamStore<T>, x: Var) -> Result<Var> {
        let c = &self.config;
        if g.shape(x) != [c.input_len, c.channels] {
            return Err(Error::Shape {
                op: "model input",
                lhs: g.shape(x).to_vec(),
                rhs: vec![c.input_len, c.channels],
            });
        }
        let emb = match &self.embedding {
            Embedding::Mixer(m) => m.forward(g, params, x),
            Embedding::Linear(l) => l.forward(g, params, x),
        }
        .stage("mixer")?;
        let z = self.informer.forward(g, params, emb).stage("informer")?;
        let y = match &self.head {
            Head::Kan(k) => k.forward(g, params, z),
            Head::Linear(l) => l.forward(g, params, z),
        }
        .stage("head")?;
        g.reshape(y, vec![c.horizon]).stage("head")
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        self.forward_with(g, &self.params, x)
    }

    /// KAN coefficient penalty, or `None` for a linear head.
    pub fn sparsity_penalty(&self, g: &mut Graph<T>, lambda: f64) -> Result<Option<Var>> {
        match &self.head {
            Head::Kan(k) => k.sparsity_penalty(g, &self.params, lambda).map(Some),
            Head::Linear(_) => Ok(None),
        }
    }

    /// Eval-mode forecast for one flattened `[L_x · C]` window.
    pub fn predict(&self, input: &[T]) -> Result<Vec<T>> {
        let c = &self.config;
        let x = Tensor::new(vec![c.input_len, c.channels], input.to_vec())?;
        let mut g = Graph::new(Mode::Eval);
        let xv = g.constant(x);
        let y = self.forward(&mut g, xv)?;
        Ok(g.value(y).data().to_vec())
    }
}
