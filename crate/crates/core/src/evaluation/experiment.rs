use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{with_stages, GaitPT, GaitPTConfig};
use crate::skeleton::{GaitSequence, PartitionScheme};
use crate::synth::derive_seed;
use crate::tensor::Element;
use crate::training::{train, TrainConfig};

use super::retrieval::{embed_sequences, rank_k_accuracy};
use super::stats::{welch_t_test, WelchResult};

/// A model configuration to be trained and scored under a label.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub label: String,
    pub config: GaitPTConfig,
}

#[derive(Clone, Copy, Debug)]
pub struct Splits<'a> {
    pub train: &'a [GaitSequence],
    pub gallery: &'a [GaitSequence],
    pub probe: &'a [GaitSequence],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub label: String,
    /// Rank-1 accuracy of each run, in run order.
    pub accuracies: Vec<f64>,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairwiseTest {
    pub a: String,
    pub b: String,
    pub welch: Option<WelchResult>,
    /// Why no test was run, when `welch` is absent.
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentTable {
    pub runs: usize,
    pub seed: u64,
    pub rows: Vec<VariantResult>,
    pub pairwise: Vec<PairwiseTest>,
}

/// Seeds for model initialization and training in run `run`. Every variant
/// of a run shares them.
pub fn run_seeds(master: u64, run: usize) -> (u64, u64) {
    let base = derive_seed(master, &[run as u64]);
    (derive_seed(base, &[0]), derive_seed(base, &[1]))
}

/// Trains one model and returns its rank-1 probe accuracy.
pub fn train_and_score<T: Element>(
    config: &GaitPTConfig,
    data: Splits<'_>,
    train_cfg: &TrainConfig,
    init_seed: u64,
    embed_batch: usize,
) -> Result<f64> {
    let mut model: GaitPT<T> = GaitPT::new(config.clone(), init_seed)?;
    train(&mut model, data.train, train_cfg, |_, _| Ok(()))?;
    let gallery = embed_sequences(&model, data.gallery, embed_batch)?;
    let probe = embed_sequences(&model, data.probe, embed_batch)?;
    Ok(rank_k_accuracy(&gallery, &probe, &[1])?[&1])
}

/// Trains every variant `runs` times and compares them pairwise with
/// Welch's t-test. `progress` is told about each finished run.
pub fn run_variants<T: Element>(
    variants: &[Variant],
    data: Splits<'_>,
    train_cfg: &TrainConfig,
    runs: usize,
    seed: u64,
    embed_batch: usize,
    mut progress: impl FnMut(&str, usize, f64),
) -> Result<ExperimentTable> {
    if variants.is_empty() {
        return Err(Error::Usage("no variants to run".into()));
    }
    if runs == 0 {
        return Err(Error::Usage("runs must be at least 1".into()));
    }
    let mut rows: Vec<VariantResult> = variants
        .iter()
        .map(|v| VariantResult {
            label: v.label.clone(),
            accuracies: Vec::with_capacity(runs),
            mean: 0.0,
        })
        .collect();
    for run in 0..runs {
        let (init_seed, train_seed) = run_seeds(seed, run);
        let cfg = TrainConfig {
            seed: train_seed,
            ..train_cfg.clone()
        };
        for (v, row) in variants.iter().zip(&mut rows) {
            let acc = train_and_score::<T>(&v.config, data, &cfg, init_seed, embed_batch)?;
            progress(&v.label, run, acc);
            row.accuracies.push(acc);
        }
    }
    for row in &mut rows {
        row.mean = row.accuracies.iter().sum::<f64>() / runs as f64;
    }
    let mut pairwise = Vec::new();
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let (welch, note) = match welch_t_test(&rows[j].accuracies, &rows[i].accuracies) {
                Ok(w) => (Some(w), None),
                Err(e) => (None, Some(e.to_string())),
            };
            pairwise.push(PairwiseTest {
                a: rows[j].label.clone(),
                b: rows[i].label.clone(),
                welch,
                note,
            });
        }
    }
    Ok(ExperimentTable {
        runs,
        seed,
        rows,
        pairwise,
    })
}

pub fn stage_label(stages: &[usize]) -> String {
    let s: Vec<String> = stages.iter().map(usize::to_string).collect();
    format!("stages {}", s.join(","))
}

/// One variant per stage subset of `base`.
pub fn ablation_variants(base: &GaitPTConfig, subsets: &[Vec<usize>]) -> Result<Vec<Variant>> {
    subsets
        .iter()
        .map(|s| {
            Ok(Variant {
                label: stage_label(s),
                config: with_stages(base, s)?,
            })
        })
        .collect()
}

/// Trains `with_stages(base, subset)` for every subset, `runs` times each.
pub fn ablation_run<T: Element>(
    base: &GaitPTConfig,
    subsets: &[Vec<usize>],
    data: Splits<'_>,
    train_cfg: &TrainConfig,
    runs: usize,
    seed: u64,
    embed_batch: usize,
    progress: impl FnMut(&str, usize, f64),
) -> Result<ExperimentTable> {
    let variants = ablation_variants(base, subsets)?;
    run_variants::<T>(
        &variants,
        data,
        train_cfg,
        runs,
        seed,
        embed_batch,
        progress,
    )
}

/// The same model under each limb-grouping scheme.
pub fn partition_variants(base: &GaitPTConfig, schemes: &[PartitionScheme]) -> Vec<Variant> {
    schemes
        .iter()
        .map(|&scheme| Variant {
            label: scheme.name().to_string(),
            config: GaitPTConfig {
                scheme,
                ..base.clone()
            },
        })
        .collect()
}

impl ExperimentTable {
    pub fn render_table(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.label.len())
            .max()
            .unwrap_or(0)
            .max(7);
        let mut out = String::new();
        let _ = write!(out, "{:<width$}", "variant");
        for i in 0..self.runs {
            let _ = write!(out, "{:>8}", format!("run{}", i + 1));
        }
        let _ = writeln!(out, "{:>8}", "mean");
        for r in &self.rows {
            let _ = write!(out, "{:<width$}", r.label);
            for a in &r.accuracies {
                let _ = write!(out, "{:>8.1}", a * 100.0);
            }
            let _ = writeln!(out, "{:>8.1}", r.mean * 100.0);
        }
        for p in &self.pairwise {
            match (&p.welch, &p.note) {
                (Some(w), _) => {
                    let _ = writeln!(
                        out,
                        "{} vs {}: t = {:.3}, df = {:.2}, p = {:.4}",
                        p.a, p.b, w.t, w.df, w.p
                    );
                }
                (None, note) => {
                    let _ = writeln!(
                        out,
                        "{} vs {}: {}",
                        p.a,
                        p.b,
                        note.as_deref().unwrap_or("no test")
                    );
                }
            }
        }
        out
    }
}
