use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use log::{info, warn};
use miktst_core::data::time::format_timestamp;
use miktst_core::data::{
    aggregate_load, parse_sessions, prepare_windows, read_series_csv, synth_generate, write_series_csv, LoadSeries,
    PreparedData, Scaler, WindowConfig, LOAD_CHANNEL,
};
use miktst_core::eval::{
    evaluate, evaluate_per_station, format_table, run_ablations, run_sweep, write_sweep_csv, Forecaster, MeanForecaster,
    MetricReport, Persistence, PersistenceKind, SweepParam, SweepSpec, Units,
};
use miktst_core::model::{MikModel, Precision};
use miktst_core::scalar::Scalar;
use miktst_core::train::{
    finetune, load_checkpoint, pretrain, save_checkpoint, write_loss_history, FinetuneStrategy, TrainMeta, TrainReport,
};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::output::Outputs;

pub const PRETRAIN_CKPT: &str = "pretrain.mikt";
pub const FINETUNE_DIR: &str = "finetune";
const SERIES_FILE: &str = "series.csv";
const SPLIT_FILE: &str = "split.json";

/// Console output, silenced by `--quiet`.
pub struct Console {
    pub quiet: bool,
}

impl Console {
    pub fn print(&self, text: &str) {
        if !self.quiet {
            println!("{text}");
        }
    }
}

#[derive(Serialize, Deserialize)]
struct SplitFile {
    data_hash: String,
    granularity: i64,
    target_cutoff: String,
    source_ids: Vec<String>,
    target_ids: Vec<String>,
    windows: WindowConfig,
    scaler: Scaler,
}

fn load_raw(cfg: &RunConfig) -> Result<BTreeMap<String, LoadSeries>> {
    let d = &cfg.data;
    if let Some(path) = &d.series {
        let f = File::open(path).with_context(|| format!("cannot open series file {}", path.display()))?;
        return read_series_csv(BufReader::new(f), d.granularity)
            .with_context(|| format!("cannot read series file {}", path.display()));
    }
    if let Some(path) = &d.sessions {
        let f = File::open(path).with_context(|| format!("cannot open sessions file {}", path.display()))?;
        let parsed = parse_sessions(BufReader::new(f), &d.columns)
            .with_context(|| format!("cannot read sessions file {}", path.display()))?;
        for w in &parsed.warnings {
            warn!("{}: line {}: {}", path.display(), w.line, w.message);
        }
        return Ok(aggregate_load(&parsed.records, d.granularity)?);
    }
    Ok(synth_generate(&d.synth, cfg.seed)?)
}

/// Rebuilds the windows from the series cached by `prepare`.
fn load_prepared(cfg: &RunConfig) -> Result<PreparedData> {
    let split_path = cfg.out.join(SPLIT_FILE);
    let series_path = cfg.out.join(SERIES_FILE);
    if !split_path.exists() || !series_path.exists() {
        bail!(
            "no prepared data in {} (run `miktst prepare` first)",
            cfg.out.display()
        );
    }
    let split: SplitFile = serde_json::from_reader(BufReader::new(File::open(&split_path)?))
        .with_context(|| format!("cannot read {}", split_path.display()))?;
    if split.data_hash != cfg.data_hash() {
        bail!(
            "prepared data in {} was made with different data settings (rerun `miktst prepare`)",
            cfg.out.display()
        );
    }
    let series = read_series_csv(BufReader::new(File::open(&series_path)?), split.granularity)
        .with_context(|| format!("cannot read {}", series_path.display()))?;
    Ok(prepare_windows(&series, &cfg.windows)?)
}

pub fn prepare(cfg: &RunConfig, console: &Console) -> Result<()> {
    let series = load_raw(cfg)?;
    let data = prepare_windows(&series, &cfg.windows)?;
    for w in &data.warnings {
        warn!("{w}");
    }
    let mut out = Outputs::new(&cfg.out)?;

    let mut f = out.create(SERIES_FILE)?;
    write_series_csv(&mut f, &series)?;
    f.flush()?;

    let split = SplitFile {
        data_hash: cfg.data_hash(),
        granularity: cfg.data.granularity(),
        target_cutoff: format_timestamp(data.split.target_cutoff),
        source_ids: data.split.source_ids.clone(),
        target_ids: data.split.target_ids.clone(),
        windows: cfg.windows.clone(),
        scaler: data.scaler.clone(),
    };
    out.write_json(SPLIT_FILE, &split)?;

    let mut f = out.create("windows.csv")?;
    writeln!(f, "set,station,input_start,target_start")?;
    for (set, ds) in [
        ("source", &data.source),
        ("target_finetune", &data.target_finetune),
        ("target_eval", &data.target_eval),
    ] {
        for w in &ds.windows {
            writeln!(
                f,
                "{set},{},{},{}",
                w.station_id,
                format_timestamp(w.input_start),
                format_timestamp(w.target_start)
            )?;
        }
    }
    f.flush()?;

    let counts = data.window_counts();
    let mut rows = Vec::new();
    for id in data.split.source_ids.iter().chain(&data.split.target_ids) {
        let (train, eval) = counts[id];
        rows.push(vec![
            id.clone(),
            format_timestamp(data.split.first_activity[id]),
            data.split.role(id).unwrap_or("-").to_string(),
            train.to_string(),
            eval.to_string(),
        ]);
    }
    let headers = ["station", "first_activity", "split", "train_windows", "eval_windows"];
    let mut f = out.create("stations.csv")?;
    writeln!(f, "{}", headers.join(","))?;
    for r in &rows {
        writeln!(f, "{}", r.join(","))?;
    }
    f.flush()?;
    out.commit("prepare", cfg)?;

    console.print(&format_table(&headers, &rows));
    console.print(&format!(
        "{} source / {} target stations; {} source, {} fine-tune, {} eval windows",
        data.split.source_ids.len(),
        data.split.target_ids.len(),
        data.source.len(),
        data.target_finetune.len(),
        data.target_eval.len()
    ));
    Ok(())
}

fn loss_rows(station: &str, report: &TrainReport, out: &mut impl Write) -> Result<()> {
    let mut buf = Vec::new();
    write_loss_history(&report.history, &mut buf)?;
    for line in String::from_utf8(buf)?.lines().skip(1) {
        writeln!(out, "{station},{line}")?;
    }
    Ok(())
}

fn pretrain_t<T: Scalar>(cfg: &RunConfig, data: &PreparedData, console: &Console) -> Result<()> {
    let mut model = MikModel::<T>::build(&cfg.model, cfg.seed)?;
    info!("model has {} parameters", model.num_scalars());
    let report = pretrain(&mut model, &data.source, &cfg.pretrain, cfg.seed)?;
    let mut out = Outputs::new(&cfg.out)?;
    let meta = TrainMeta {
        phase: "pretrain".into(),
        epoch: report.best_epoch,
        seed: cfg.seed,
    };
    save_checkpoint(&out.path(PRETRAIN_CKPT)?, &model, Some(&data.scaler), meta)?;
    let mut f = out.create("pretrain_loss.csv")?;
    writeln!(f, "station,phase,epoch,train_loss,val_loss")?;
    loss_rows("all", &report, &mut f)?;
    f.flush()?;
    out.commit("pretrain", cfg)?;
    let last = report.history.last().ok_or_else(|| anyhow!("no epochs ran"))?;
    console.print(&format!(
        "pre-trained {} epochs (best {}), train loss {:.4}, val loss {}",
        report.history.len(),
        report.best_epoch,
        last.train_loss,
        last.val_loss.map_or("-".into(), |v| format!("{v:.4}"))
    ));
    Ok(())
}

fn load_model<T: Scalar>(cfg: &RunConfig, path: &Path, hint: &str) -> Result<MikModel<T>> {
    if !path.exists() {
        bail!("checkpoint {} not found ({hint})", path.display());
    }
    let ckpt = load_checkpoint::<T>(path).with_context(|| format!("cannot load {}", path.display()))?;
    let mut model = MikModel::<T>::build(&cfg.model, cfg.seed)?;
    ckpt.load_into(&mut model)
        .with_context(|| format!("checkpoint {} does not fit the configured model", path.display()))?;
    Ok(model)
}

fn station_ckpt(id: &str) -> PathBuf {
    Path::new(FINETUNE_DIR).join(format!("{id}.mikt"))
}

fn finetune_t<T: Scalar>(
    cfg: &RunConfig,
    data: &PreparedData,
    strategy: FinetuneStrategy,
    from_scratch: bool,
    console: &Console,
) -> Result<()> {
    let (base, plan) = if from_scratch {
        (MikModel::<T>::build(&cfg.model, cfg.seed)?, cfg.scratch_plan())
    } else {
        let path = cfg.out.join(PRETRAIN_CKPT);
        let base = load_model::<T>(cfg, &path, "run `miktst pretrain` first or pass --from-scratch")?;
        (base, cfg.finetune.plan(strategy, &cfg.pretrain))
    };
    let mut out = Outputs::new(&cfg.out)?;
    let mut losses = Vec::new();
    writeln!(losses, "station,phase,epoch,train_loss,val_loss")?;
    let mut rows = Vec::new();
    for id in &data.split.target_ids {
        let slice = data.target_finetune.station(id);
        let mut model = base.clone();
        let report = finetune(&mut model, &slice, &plan, cfg.seed).with_context(|| format!("station {id}"))?;
        loss_rows(id, &report, &mut losses)?;
        let meta = TrainMeta {
            phase: if from_scratch { "scratch" } else { "finetune" }.into(),
            epoch: report.best_epoch,
            seed: cfg.seed,
        };
        save_checkpoint(&out.path(station_ckpt(id))?, &model, Some(&data.scaler), meta)?;
        rows.push(vec![id.clone(), slice.len().to_string(), report.best_epoch.to_string()]);
    }
    let mut f = out.create("finetune_loss.csv")?;
    f.write_all(&losses)?;
    f.flush()?;
    drop(f);
    out.commit("finetune", cfg)?;
    console.print(&format_table(&["station", "windows", "best_epoch"], &rows));
    Ok(())
}

fn station_models<T: Scalar>(cfg: &RunConfig, data: &PreparedData) -> Result<BTreeMap<String, MikModel<T>>> {
    let mut models = BTreeMap::new();
    for id in &data.split.target_ids {
        let path = cfg.out.join(station_ckpt(id));
        models.insert(id.clone(), load_model::<T>(cfg, &path, "run `miktst finetune` first")?);
    }
    Ok(models)
}

fn predict_t<T: Scalar>(cfg: &RunConfig, data: &PreparedData, station: Option<&str>, console: &Console) -> Result<()> {
    let models = station_models::<T>(cfg, data)?;
    if let Some(s) = station {
        if !models.contains_key(s) {
            bail!("{s} is not a target station");
        }
    }
    let mut out = Outputs::new(&cfg.out)?;
    let mut f = out.create("predictions.csv")?;
    writeln!(f, "station,timestamp,forecast_kwh")?;
    let mut n = 0;
    for w in &data.target_eval.windows {
        if station.is_some_and(|s| s != w.station_id) {
            continue;
        }
        let pred = models[&w.station_id].forecast(&w.input)?;
        for (i, v) in pred.iter().enumerate() {
            let t = w.target_start + i as i64 * w.granularity;
            let kwh = data.scaler.inverse_value(LOAD_CHANNEL, *v);
            writeln!(f, "{},{},{}", w.station_id, format_timestamp(t), kwh)?;
        }
        n += 1;
    }
    f.flush()?;
    drop(f);
    out.commit("predict", cfg)?;
    console.print(&format!("wrote {n} forecasts of {} steps", cfg.windows.horizon));
    Ok(())
}

fn metric_rows(name: &str, r: &MetricReport, rows: &mut Vec<Vec<String>>) {
    let units = match r.units {
        Units::Standardized => "standardized",
        Units::Kwh => "kwh",
    };
    rows.push(vec![
        name.into(),
        "all".into(),
        r.mae.to_string(),
        r.mse.to_string(),
        r.n_samples.to_string(),
        units.into(),
    ]);
    for (id, m) in &r.per_station {
        rows.push(vec![
            name.into(),
            id.clone(),
            m.mae.to_string(),
            m.mse.to_string(),
            m.n_samples.to_string(),
            units.into(),
        ]);
    }
}

fn evaluate_t<T: Scalar>(cfg: &RunConfig, data: &PreparedData, console: &Console) -> Result<()> {
    let models = station_models::<T>(cfg, data)?;
    let refs: BTreeMap<String, &dyn Forecaster> =
        models.iter().map(|(k, m)| (k.clone(), m as &dyn Forecaster)).collect();
    let ds = &data.target_eval;

    let mut baselines: Vec<(String, Box<dyn Forecaster>)> = vec![(
        "naive".into(),
        Box::new(Persistence::for_dataset(PersistenceKind::Naive, ds)?),
    )];
    match Persistence::for_dataset(PersistenceKind::Seasonal(cfg.eval.season), ds) {
        Ok(p) => baselines.push((format!("seasonal{}", cfg.eval.season), Box::new(p))),
        Err(e) => warn!("seasonal baseline skipped: {e}"),
    }
    baselines.push((
        "mean".into(),
        Box::new(MeanForecaster {
            channels: ds.channels,
            horizon: ds.horizon,
        }),
    ));

    let mut scalers: Vec<Option<&Scaler>> = vec![None];
    if cfg.eval.physical_units {
        scalers.push(Some(&data.scaler));
    }
    let mut rows = Vec::new();
    let mut reports = BTreeMap::new();
    for scaler in scalers {
        let suffix = if scaler.is_some() { "_kwh" } else { "" };
        let r = evaluate_per_station(&refs, ds, scaler)?;
        metric_rows("mik-tst", &r, &mut rows);
        reports.insert(format!("mik-tst{suffix}"), r);
        for (name, b) in &baselines {
            let r = evaluate(b.as_ref(), ds, scaler)?;
            metric_rows(name, &r, &mut rows);
            reports.insert(format!("{name}{suffix}"), r);
        }
    }

    let headers = ["model", "station", "mae", "mse", "n_samples", "units"];
    let mut out = Outputs::new(&cfg.out)?;
    let mut f = out.create("metrics.csv")?;
    writeln!(f, "{}", headers.join(","))?;
    for r in &rows {
        writeln!(f, "{}", r.join(","))?;
    }
    f.flush()?;
    drop(f);
    out.write_json("metrics.json", &reports)?;
    out.commit("evaluate", cfg)?;

    let summary: Vec<Vec<String>> = rows
        .iter()
        .filter(|r| r[1] == "all")
        .map(|r| {
            let v = |s: &str| format!("{:.4}", s.parse::<f64>().unwrap_or(f64::NAN));
            vec![r[0].clone(), v(&r[2]), v(&r[3]), r[4].clone(), r[5].clone()]
        })
        .collect();
    console.print(&format_table(&["model", "mae", "mse", "windows", "units"], &summary));
    Ok(())
}

macro_rules! with_precision {
    ($cfg:expr, $f:ident ( $($arg:expr),* )) => {
        match $cfg.model.precision {
            Precision::F64 => $f::<f64>($($arg),*),
            Precision::F32 => $f::<f32>($($arg),*),
        }
    };
}

pub fn pretrain_cmd(cfg: &RunConfig, console: &Console) -> Result<()> {
    let data = load_prepared(cfg)?;
    with_precision!(cfg, pretrain_t(cfg, &data, console))
}

pub fn finetune_cmd(cfg: &RunConfig, strategy: FinetuneStrategy, from_scratch: bool, console: &Console) -> Result<()> {
    let data = load_prepared(cfg)?;
    with_precision!(cfg, finetune_t(cfg, &data, strategy, from_scratch, console))
}

pub fn predict_cmd(cfg: &RunConfig, station: Option<&str>, console: &Console) -> Result<()> {
    let data = load_prepared(cfg)?;
    with_precision!(cfg, predict_t(cfg, &data, station, console))
}

pub fn evaluate_cmd(cfg: &RunConfig, console: &Console) -> Result<()> {
    let data = load_prepared(cfg)?;
    with_precision!(cfg, evaluate_t(cfg, &data, console))
}

pub fn ablate_cmd(cfg: &RunConfig, strategy: FinetuneStrategy, console: &Console) -> Result<()> {
    let data = load_prepared(cfg)?;
    let table = run_ablations(&cfg.setup(strategy), &data, &cfg.eval.seeds)?;
    let mut out = Outputs::new(&cfg.out)?;
    let mut f = out.create("ablation.csv")?;
    table.write_csv(&mut f)?;
    f.flush()?;
    drop(f);
    out.commit("ablate", cfg)?;
    console.print(&table.to_text());
    Ok(())
}

pub fn sweep_cmd(cfg: &RunConfig, params: &[SweepParam], strategy: FinetuneStrategy, console: &Console) -> Result<()> {
    let data = load_prepared(cfg)?;
    let setup = cfg.setup(strategy);
    let mut out = Outputs::new(&cfg.out)?;
    for &param in params {
        let spec = SweepSpec {
            param,
            values: cfg.sweep.values(param).to_vec(),
            seeds: cfg.eval.seeds.clone(),
        };
        let rows = run_sweep(&spec, &setup, &data)?;
        let mut f = out.create(format!("sweep_{}.csv", param.name()))?;
        write_sweep_csv(&rows, &mut f)?;
        f.flush()?;
        let table: Vec<Vec<String>> = rows
            .iter()
            .map(|r| {
                let (mae, mse) = match &r.outcome {
                    Ok((a, s)) => (format!("{a:.4}"), format!("{s:.4}")),
                    Err(why) => ("-".into(), format!("skipped: {why}")),
                };
                vec![r.value.to_string(), r.seed.to_string(), mae, mse]
            })
            .collect();
        console.print(&format_table(&[param.name(), "seed", "mae", "mse"], &table));
    }
    out.commit("sweep", cfg)?;
    Ok(())
}

/// Refuses output dirs that would overwrite an input file.
pub fn check_out_dir(cfg: &RunConfig) -> Result<()> {
    if cfg.out.is_file() {
        bail!("output path {} is a file", cfg.out.display());
    }
    let cached = cfg.out.join(SERIES_FILE);
    for input in [&cfg.data.series, &cfg.data.sessions].into_iter().flatten() {
        if let (Ok(a), Ok(b)) = (fs::canonicalize(input), fs::canonicalize(&cached)) {
            if a == b {
                bail!("input {} would be overwritten by prepare", input.display());
            }
        }
    }
    Ok(())
}
