use std::collections::HashMap;

use super::*;
use crate::data::synth::{synth_generate, SynthConfig};
use crate::data::{prepare_windows, LoadSeries, PreparedData, Scaler, Window, WindowConfig, WindowDataset};
use crate::error::Error;
use crate::model::ModelConfig;
use crate::rng;
use crate::train::TrainPlan;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng as _;

#[test]
fn metric_examples() {
    let t = [1.0, -3.0, 2.5];
    assert_eq!(mae(&t, &t).unwrap(), 0.0);
    assert_eq!(mse(&t, &t).unwrap(), 0.0);
    assert_eq!(mae(&[0.0, 0.0], &[1.0, -3.0]).unwrap(), 2.0);
    assert_eq!(mse(&[0.0, 0.0], &[1.0, -3.0]).unwrap(), 5.0);
    assert_eq!(mae(&[0.0, 0.0], &[-3.0, 1.0]).unwrap(), 2.0);
    assert!(mae(&[1.0], &[1.0, 2.0]).is_err());
    assert!(mse(&[], &[]).is_err());
}

proptest! {
    #[test]
    fn metric_invariances(
        pairs in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 1..40),
        shift in -50.0f64..50.0,
        scale in 0.1f64..10.0,
    ) {
        let (p, t): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let base_mae = mae(&p, &t).unwrap();
        let base_mse = mse(&p, &t).unwrap();
        prop_assert!(base_mse >= 0.0);
        let ps: Vec<f64> = p.iter().map(|v| v + shift).collect();
        let ts: Vec<f64> = t.iter().map(|v| v + shift).collect();
        prop_assert!((mae(&ps, &ts).unwrap() - base_mae).abs() < 1e-9 * (1.0 + base_mae));
        let pk: Vec<f64> = p.iter().map(|v| v * scale).collect();
        let tk: Vec<f64> = t.iter().map(|v| v * scale).collect();
        let scaled = mse(&pk, &tk).unwrap();
        prop_assert!((scaled - scale * scale * base_mse).abs() < 1e-9 * (1.0 + scaled));
    }
}

fn dataset_from(values: &[f64], input_len: usize, horizon: usize) -> WindowDataset {
    let series = LoadSeries::new("s", 0, 3600, values.to_vec());
    // identity scaler on every channel so windows hold raw loads
    let scaler = Scaler {
        mean: vec![0.0; 10],
        std: vec![1.0; 10],
    };
    crate::data::make_windows(&series, &scaler, input_len, horizon, 1).unwrap()
}

#[test]
fn persistence_on_constant_and_periodic_series() {
    let flat = dataset_from(&[3.0; 100], 24, 6);
    let naive = Persistence::for_dataset(PersistenceKind::Naive, &flat).unwrap();
    assert_eq!(evaluate(&naive, &flat, None).unwrap().mse, 0.0);

    let periodic: Vec<f64> = (0..200).map(|h| ((h % 24) as f64 * 0.7).sin()).collect();
    let ds = dataset_from(&periodic, 48, 24);
    let seasonal = Persistence::for_dataset(PersistenceKind::Seasonal(24), &ds).unwrap();
    let r = evaluate(&seasonal, &ds, None).unwrap();
    assert_eq!((r.mae, r.mse), (0.0, 0.0));
    assert!(Persistence::for_dataset(PersistenceKind::Seasonal(24), &dataset_from(&periodic, 12, 6)).is_err());
}

#[test]
fn naive_beats_mean_on_random_walk() {
    let mut r = rng::seeded(3);
    let mut x = 0.0;
    let walk: Vec<f64> = (0..2000)
        .map(|_| {
            x += r.gen_range(-1.0..1.0);
            x
        })
        .collect();
    let ds = dataset_from(&walk, 48, 6);
    let naive = evaluate(&Persistence::for_dataset(PersistenceKind::Naive, &ds).unwrap(), &ds, None).unwrap();
    let mean = evaluate(&MeanForecaster { channels: 10, horizon: 6 }, &ds, None).unwrap();
    assert!(naive.mse < mean.mse, "{} vs {}", naive.mse, mean.mse);
}

struct Oracle(HashMap<Vec<u64>, Vec<f64>>);

impl Forecaster for Oracle {
    fn forecast(&self, input: &[f64]) -> crate::Result<Vec<f64>> {
        let key: Vec<u64> = input.iter().map(|v| v.to_bits()).collect();
        Ok(self.0[&key].clone())
    }
}

fn small_data() -> PreparedData {
    let synth = SynthConfig {
        stations: 6,
        ..SynthConfig::default()
    };
    let cfg = WindowConfig {
        input_len: 12,
        horizon: 4,
        source_stride: 24,
        target_stride: 12,
        n_source: 4,
        ..WindowConfig::default()
    };
    prepare_windows(&synth_generate(&synth, 2).unwrap(), &cfg).unwrap()
}

#[test]
fn evaluate_oracle_counts_and_order() {
    let data = small_data();
    let ds = &data.target_eval;
    let oracle = Oracle(
        ds.windows
            .iter()
            .map(|w: &Window| (w.input.iter().map(|v| v.to_bits()).collect(), w.target.clone()))
            .collect(),
    );
    let r = evaluate(&oracle, ds, None).unwrap();
    assert_eq!((r.mae, r.mse), (0.0, 0.0));
    assert_eq!(r.n_samples, ds.len());
    assert_eq!(r.per_station.values().map(|s| s.n_samples).sum::<usize>(), ds.len());

    let naive = Persistence::for_dataset(PersistenceKind::Naive, ds).unwrap();
    let a = evaluate(&naive, ds, None).unwrap();
    let mut shuffled = ds.clone();
    shuffled.windows.shuffle(&mut rng::seeded(1));
    assert_eq!(a, evaluate(&naive, &shuffled, None).unwrap());

    let phys = evaluate(&naive, ds, Some(&data.scaler)).unwrap();
    assert_eq!(phys.units, Units::Kwh);
    let s = data.scaler.std[0];
    assert!((phys.mse - a.mse * s * s).abs() < 1e-9 * phys.mse);
    assert!(matches!(
        evaluate(&naive, &WindowDataset::empty(12, 4), None),
        Err(Error::EmptyDataset(_))
    ));
}

fn tiny_setup() -> TransferSetup {
    let model = ModelConfig {
        d_model: 8,
        n_heads: 2,
        layers: 1,
        ff_hidden: Some(16),
        dropout: 0.0,
        input_len: 12,
        horizon: 4,
        kan_hidden: 4,
        ..ModelConfig::default()
    };
    let plan = TrainPlan {
        epochs: 1,
        batch_size: 16,
        lr: 1e-3,
        ..TrainPlan::default()
    };
    TransferSetup {
        model,
        pretrain: plan.clone(),
        finetune: plan.clone(),
        scratch: plan,
    }
}

#[test]
fn ablation_table_shape_and_reproducibility() {
    let data = small_data();
    let setup = tiny_setup();
    let a = run_ablations(&setup, &data, &[1]).unwrap();
    assert_eq!(a.rows.len(), 4);
    let labels: Vec<&str> = a.rows.iter().map(|r| r.variant.as_str()).collect();
    assert_eq!(labels, ["MIK-TST", "w/o-Mcl", "w/o-Kcl", "w/o-Dcl"]);
    let b = run_ablations(&setup, &data, &[1]).unwrap();
    let (mut ca, mut cb) = (Vec::new(), Vec::new());
    a.write_csv(&mut ca).unwrap();
    b.write_csv(&mut cb).unwrap();
    assert_eq!(ca, cb);
    assert_eq!(String::from_utf8(ca).unwrap().lines().count(), 5);
    assert!(a.to_text().contains("w/o-Dcl"));
    assert!(run_ablations(&setup, &data, &[]).is_err());
}

#[test]
fn heads_sweep_with_skips_round_trips() {
    let data = small_data();
    let spec = SweepSpec {
        param: SweepParam::Heads,
        values: vec![1, 2, 3, 4],
        seeds: vec![5],
    };
    let rows = run_sweep(&spec, &tiny_setup(), &data).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().filter(|r| r.value != 3).all(|r| r.outcome.is_ok()));
    let skipped = rows.iter().find(|r| r.value == 3).unwrap();
    assert!(skipped.outcome.as_ref().unwrap_err().contains("divisible"));
    let mut buf = Vec::new();
    write_sweep_csv(&rows, &mut buf).unwrap();
    assert!(String::from_utf8(buf.clone()).unwrap().starts_with("param,value,seed,mae,mse,status\n"));
    assert_eq!(read_sweep_csv(buf.as_slice()).unwrap(), rows);
    assert_eq!("r".parse::<SweepParam>().unwrap(), SweepParam::Layers);
    assert!("dropout".parse::<SweepParam>().is_err());
}

#[test]
fn aligned_table() {
    let t = format_table(&["a", "long"], &[vec!["xyz".into(), "1".into()]]);
    assert_eq!(t, "a    long\n---  ----\nxyz  1\n");
}
