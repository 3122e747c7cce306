//! Ablation drivers: train a list of model variants with shared seeds and
//! tabulate their validation accuracy.

use std::fmt::Write as _;

use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::Result;
use crate::network::NetworkConfig;
use crate::shift::ShiftMode;
use crate::train::{EpochMetrics, Trainer};

#[derive(Clone, Debug)]
pub struct Variant {
    pub id: String,
    pub model: NetworkConfig,
}

/// Module combinations: neither, CMEM only, CLIM only, both.
pub fn module_matrix(base: &NetworkConfig) -> Vec<Variant> {
    [("baseline", false, false), ("cmem", true, false), ("clim", false, true), ("cmem+clim", true, true)]
        .into_iter()
        .map(|(id, cmem, clim)| Variant {
            id: id.into(),
            model: NetworkConfig { cmem_enabled: cmem, clim_enabled: clim, ..base.clone() },
        })
        .collect()
}

/// Shift structures: channel-mixing convolution, random, frozen TSM and
/// TSM-initialized kernels.
pub fn shift_matrix(base: &NetworkConfig) -> Vec<Variant> {
    [ShiftMode::Conv1d, ShiftMode::Random, ShiftMode::Frozen, ShiftMode::Pretrained]
        .into_iter()
        .map(|mode| shift_variant(base, mode))
        .collect()
}

pub fn shift_variant(base: &NetworkConfig, mode: ShiftMode) -> Variant {
    Variant {
        id: mode.as_str().into(),
        model: NetworkConfig { shift_mode: mode, slice_shift_modes: None, clim_enabled: true, ..base.clone() },
    }
}

/// Outcome of one variant trained under one seed.
#[derive(Clone, Debug)]
pub struct Run {
    pub seed: u64,
    pub metrics: Vec<EpochMetrics>,
    /// Largest change of any shift kernel entry during training.
    pub kernel_drift: f32,
}

impl Run {
    fn val(&self) -> impl Iterator<Item = &EpochMetrics> {
        self.metrics.iter().filter(|m| m.split == "val")
    }

    pub fn final_val(&self) -> Option<&EpochMetrics> {
        self.val().last()
    }

    pub fn best_val_top1(&self) -> f64 {
        self.val().map(|m| m.top1).fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug)]
pub struct Row {
    pub id: String,
    pub params: usize,
    pub epochs: usize,
    pub runs: Vec<Run>,
}

impl Row {
    fn mean(&self, f: impl Fn(&EpochMetrics) -> f64) -> f64 {
        let vals: Vec<f64> = self.runs.iter().filter_map(|r| r.final_val().map(&f)).collect();
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    }

    /// Final-epoch validation top-1, averaged over seeds.
    pub fn top1(&self) -> f64 {
        self.mean(|m| m.top1)
    }

    pub fn top5(&self) -> f64 {
        self.mean(|m| m.top5)
    }
}

fn shift_kernels(trainer: &Trainer) -> Vec<Vec<f32>> {
    trainer
        .network
        .blocks
        .iter()
        .filter_map(|b| b.clim.as_ref())
        .flat_map(|c| c.shifts.iter().map(|s| trainer.store.value(s.weight).data().to_vec()))
        .collect()
}

/// Trains one variant under one seed.
pub fn train_variant(base: &RunConfig, variant: &Variant, seed: u64, data: &Dataset) -> Result<(Run, usize)> {
    let config = RunConfig { seed, model: variant.model.clone(), ..base.clone() };
    let mut trainer = Trainer::new(config)?;
    let initial = shift_kernels(&trainer);
    let metrics = trainer.run(data)?;
    let drift = initial
        .iter()
        .zip(shift_kernels(&trainer))
        .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()).collect::<Vec<_>>())
        .fold(0.0, f32::max);
    Ok((Run { seed, metrics, kernel_drift: drift }, trainer.parameter_count()))
}

/// Trains every variant under every seed.
pub fn run_ablation(base: &RunConfig, variants: &[Variant], seeds: &[u64], data: &Dataset) -> Result<Vec<Row>> {
    variants
        .iter()
        .map(|v| {
            let mut runs = Vec::new();
            let mut params = 0;
            for &seed in seeds {
                let (run, p) = train_variant(base, v, seed, data)?;
                params = p;
                runs.push(run);
            }
            Ok(Row { id: v.id.clone(), params, epochs: base.trainer.epochs, runs })
        })
        .collect()
}

pub const CSV_HEADER: &str = "config_id,top1,top5,params,epochs";

pub fn to_csv(rows: &[Row]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(out, "{},{:.4},{:.4},{},{}", r.id, r.top1(), r.top5(), r.params, r.epochs).expect("write to string");
    }
    out
}
