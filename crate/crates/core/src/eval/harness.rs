use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use log::info;
use serde::{Deserialize, Serialize};

use super::metrics::{evaluate_per_station, format_table, Forecaster, MetricReport};
use crate::data::PreparedData;
use crate::error::{Error, Result};
use crate::model::{ablation_variant, Ablation, MikModel, ModelConfig, Precision};
use crate::scalar::Scalar;
use crate::train::{finetune, pretrain, TrainPlan};

/// Everything needed to run the two-stage transfer protocol once.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferSetup {
    pub model: ModelConfig,
    pub pretrain: TrainPlan,
    pub finetune: TrainPlan,
    /// Plan for models trained on the target slice alone.
    pub scratch: TrainPlan,
}

/// Fine-tuned models for each target station.
pub struct TransferModels<T: Scalar> {
    /// The shared pre-trained model, absent for from-scratch runs.
    pub pretrained: Option<MikModel<T>>,
    pub per_station: BTreeMap<String, MikModel<T>>,
}

/// Pre-trains on the source windows (unless the variant drops transfer),
/// then adapts one copy of the model to each target station's fine-tune
/// slice. From-scratch variants train a fresh model per station with the
/// `scratch` plan.
pub fn train_transfer<T: Scalar>(
    setup: &TransferSetup,
    data: &PreparedData,
    drop: Option<Ablation>,
    seed: u64,
) -> Result<TransferModels<T>> {
    let (config, from_scratch) = match drop {
        Some(d) => {
            let p = ablation_variant(&setup.model, d);
            (p.config, p.from_scratch)
        }
        None => (setup.model.clone(), false),
    };
    let pretrained = if from_scratch {
        None
    } else {
        let mut m = MikModel::<T>::build(&config, seed)?;
        pretrain(&mut m, &data.source, &setup.pretrain, seed)?;
        Some(m)
    };
    let mut per_station = BTreeMap::new();
    for id in &data.split.target_ids {
        let slice = data.target_finetune.station(id);
        let model = match &pretrained {
            Some(base) => {
                let mut m = base.clone();
                finetune(&mut m, &slice, &setup.finetune, seed)?;
                m
            }
            None => {
                let mut m = MikModel::<T>::build(&config, seed)?;
                finetune(&mut m, &slice, &setup.scratch, seed)?;
                m
            }
        };
        per_station.insert(id.clone(), model);
    }
    Ok(TransferModels { pretrained, per_station })
}

fn transfer_report<T: Scalar>(
    setup: &TransferSetup,
    data: &PreparedData,
    drop: Option<Ablation>,
    seed: u64,
) -> Result<MetricReport> {
    let models = train_transfer::<T>(setup, data, drop, seed)?;
    let refs: BTreeMap<String, &dyn Forecaster> = models
        .per_station
        .iter()
        .map(|(k, m)| (k.clone(), m as &dyn Forecaster))
        .collect();
    evaluate_per_station(&refs, &data.target_eval, None)
}

/// Runs the transfer protocol in the configured precision and evaluates
/// every target station in standardized units.
pub fn run_transfer(setup: &TransferSetup, data: &PreparedData, drop: Option<Ablation>, seed: u64) -> Result<MetricReport> {
    match setup.model.precision {
        Precision::F64 => transfer_report::<f64>(setup, data, drop, seed),
        Precision::F32 => transfer_report::<f32>(setup, data, drop, seed),
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    /// `(seed, mae, mse)` per run.
    pub runs: Vec<(u64, f64, f64)>,
}

impl AblationRow {
    pub fn mae(&self) -> (f64, f64) {
        mean_std(&self.runs.iter().map(|r| r.1).collect::<Vec<_>>())
    }

    pub fn mse(&self) -> (f64, f64) {
        mean_std(&self.runs.iter().map(|r| r.2).collect::<Vec<_>>())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

pub const FULL_MODEL_LABEL: &str = "MIK-TST";

/// Full model plus one row per removed component, each averaged over seeds.
pub fn run_ablations(setup: &TransferSetup, data: &PreparedData, seeds: &[u64]) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::invalid("ablations need at least one seed"));
    }
    let variants = std::iter::once(None).chain(Ablation::ALL.into_iter().map(Some));
    let mut rows = Vec::new();
    for drop in variants {
        let variant = drop.map_or(FULL_MODEL_LABEL.to_string(), |d| d.label().to_string());
        let mut runs = Vec::new();
        for &seed in seeds {
            let r = run_transfer(setup, data, drop, seed)?;
            info!("ablation {variant} seed {seed}: mae {:.4} mse {:.4}", r.mae, r.mse);
            runs.push((seed, r.mae, r.mse));
        }
        rows.push(AblationRow { variant, runs });
    }
    Ok(AblationTable { rows })
}

impl AblationTable {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["variant", "mae_mean", "mae_std", "mse_mean", "mse_std", "n_seeds"])?;
        for r in &self.rows {
            let ((am, asd), (sm, ssd)) = (r.mae(), r.mse());
            w.write_record([
                r.variant.clone(),
                am.to_string(),
                asd.to_string(),
                sm.to_string(),
                ssd.to_string(),
                r.runs.len().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let ((am, asd), (sm, ssd)) = (r.mae(), r.mse());
                vec![r.variant.clone(), format!("{am:.4} ± {asd:.4}"), format!("{sm:.4} ± {ssd:.4}")]
            })
            .collect();
        format_table(&["variant", "MAE", "MSE"], &rows)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepParam {
    #[serde(rename = "d")]
    Width,
    #[serde(rename = "n_heads")]
    Heads,
    #[serde(rename = "r")]
    Layers,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Width => "d",
            SweepParam::Heads => "n_heads",
            SweepParam::Layers => "r",
        }
    }

    fn apply(self, cfg: &mut ModelConfig, value: usize) {
        match self {
            SweepParam::Width => cfg.d_model = value,
            SweepParam::Heads => cfg.n_heads = value,
            SweepParam::Layers => cfg.layers = value,
        }
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "d" | "d_model" => Ok(SweepParam::Width),
            "n_heads" | "N_heads" | "heads" => Ok(SweepParam::Heads),
            "r" | "layers" => Ok(SweepParam::Layers),
            _ => Err(Error::invalid(format!("cannot sweep {s:?} (expected d, n_heads or r)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub param: SweepParam,
    pub values: Vec<usize>,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub param: SweepParam,
    pub value: usize,
    pub seed: u64,
    /// Metrics, or the reason the cell was skipped.
    pub outcome: std::result::Result<(f64, f64), String>,
}

/// Trains and evaluates one full model per value and seed. Values that make
/// the model config invalid become skipped rows.
pub fn run_sweep(spec: &SweepSpec, setup: &TransferSetup, data: &PreparedData) -> Result<Vec<SweepRow>> {
    if spec.values.is_empty() || spec.seeds.is_empty() {
        return Err(Error::invalid("sweep needs at least one value and one seed"));
    }
    let mut rows = Vec::new();
    for &value in &spec.values {
        let mut s = setup.clone();
        spec.param.apply(&mut s.model, value);
        let invalid = s.model.validate().err();
        for &seed in &spec.seeds {
            let outcome = match &invalid {
                Some(Error::Config(p)) => Err(p.join("; ")),
                Some(e) => Err(e.to_string()),
                None => {
                    let r = run_transfer(&s, data, None, seed)?;
                    info!("sweep {}={value} seed {seed}: mae {:.4} mse {:.4}", spec.param, r.mae, r.mse);
                    Ok((r.mae, r.mse))
                }
            };
            rows.push(SweepRow {
                param: spec.param,
                value,
                seed,
                outcome,
            });
        }
    }
    Ok(rows)
}

/// `param,value,seed,mae,mse,status`; skipped rows leave the metrics empty.
pub fn write_sweep_csv(rows: &[SweepRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["param", "value", "seed", "mae", "mse", "status"])?;
    for r in rows {
        let (mae, mse, status) = match &r.outcome {
            Ok((a, s)) => (a.to_string(), s.to_string(), "ok".to_string()),
            Err(reason) => (String::new(), String::new(), format!("skipped: {reason}")),
        };
        w.write_record([r.param.name().to_string(), r.value.to_string(), r.seed.to_string(), mae, mse, status])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sweep_csv(input: impl Read) -> Result<Vec<SweepRow>> {
    let mut rd = csv::Reader::from_reader(input);
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let num = |i: usize| -> Result<f64> {
            field(i)
                .parse()
                .map_err(|_| Error::invalid(format!("bad number {:?} in sweep csv", field(i))))
        };
        let status = field(5);
        let outcome = match status.strip_prefix("skipped: ") {
            Some(reason) => Err(reason.to_string()),
            None => Ok((num(3)?, num(4)?)),
        };
        rows.push(SweepRow {
            param: field(0).parse()?,
            value: field(1).parse().map_err(|_| Error::invalid("bad sweep value"))?,
            seed: field(2).parse().map_err(|_| Error::invalid("bad sweep seed"))?,
            outcome,
        });
    }
    Ok(rows)
}
