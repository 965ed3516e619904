//! Expert-diversity and routing diagnostics, and the (experts, lambda)
//! hyper-parameter sweep driver. All outputs are plain data; the companion
//! crate serializes them to CSV.

use alloc::vec::Vec;

use crate::bench::ShiftStream;
use crate::error::Result;
use crate::rng;
use crate::tensor::cosine;
use crate::tta::{adapt_stream, AdaptationConfig, Metrics, Strategy};
use crate::vit::{moefy, Model, NormSlot, ReplacementPlan};

/// Pairwise expert-parameter similarity of one MoE slot at one batch index.
/// Zero-vector experts make an entry undefined; that is surfaced as `None`,
/// never as a fabricated 0 or 1.
#[derive(Debug, Clone)]
pub struct ExpertSimilaritySnapshot {
    pub batch_index: usize,
    pub slot: usize,
    pub expert_count: usize,
    /// Upper-triangle entries (i < j): (i, j, cos of weight deltas, cos of
    /// bias deltas).
    pub pairs: Vec<(usize, usize, Option<f64>, Option<f64>)>,
}

impl ExpertSimilaritySnapshot {
    /// Mean off-diagonal weight-delta similarity, skipping undefined pairs.
    pub fn mean_weight_similarity(&self) -> Option<f64> {
        let defined: Vec<f64> = self.pairs.iter().filter_map(|p| p.2).collect();
        if defined.is_empty() {
            None
        } else {
            Some(defined.iter().sum::<f64>() / defined.len() as f64)
        }
    }
}

/// Snapshot every MoE slot's pairwise expert cosines (weight and bias
/// deltas) at batch `t`.
pub fn expert_cosine_snapshot(model: &Model, batch_index: usize) -> Vec<ExpertSimilaritySnapshot> {
    let mut out = Vec::new();
    for (slot, norm) in model.params.norm_slots.iter().enumerate() {
        let NormSlot::Moe(layer) = norm else {
            continue;
        };
        let e = layer.expert_count;
        let d = layer.dim();
        let mut pairs = Vec::with_capacity(e * (e - 1) / 2);
        for i in 0..e {
            for j in (i + 1)..e {
                let wi = &layer.expert_weight.data()[i * d..(i + 1) * d];
                let wj = &layer.expert_weight.data()[j * d..(j + 1) * d];
                let bi = &layer.expert_bias.data()[i * d..(i + 1) * d];
                let bj = &layer.expert_bias.data()[j * d..(j + 1) * d];
                pairs.push((i, j, cosine(wi, wj), cosine(bi, bj)));
            }
        }
        out.push(ExpertSimilaritySnapshot {
            batch_index,
            slot,
            expert_count: e,
            pairs,
        });
    }
    out
}

/// One sweep cell: a fresh MoE-fication of the pretrained checkpoint adapted
/// over the stream with the cell's (experts, lambda).
#[derive(Debug, Clone)]
pub struct SweepCell {
    pub experts: usize,
    pub lambda: f64,
    pub seed: u64,
    pub accuracy: f64,
}

/// Run one sweep cell. The router init seed and the adaptation both derive
/// from `seed`, so cells are independent and reproducible.
pub fn run_sweep_cell(
    pretrained: &Model,
    stream: &ShiftStream,
    base: &AdaptationConfig,
    plan: &ReplacementPlan,
    experts: usize,
    k: usize,
    lambda: f64,
    seed: u64,
) -> Result<SweepCell> {
    let mut model = moefy(pretrained, plan, experts, k, rng::derive(seed, &[7]))?;
    let config = AdaptationConfig {
        strategy: Strategy::Moetta,
        lambda,
        ..base.clone()
    };
    let metrics = adapt_stream(stream, &mut model, &config)?;
    Ok(SweepCell {
        experts,
        lambda,
        seed,
        accuracy: metrics.overall_accuracy,
    })
}

/// Mean and unbiased standard deviation of per-seed accuracies for one
/// (experts, lambda) grid point.
#[derive(Debug, Clone)]
pub struct SweepSummary {
    pub experts: usize,
    pub lambda: f64,
    pub mean_accuracy: f64,
    pub sd_accuracy: f64,
    pub cells: Vec<SweepCell>,
}

pub fn summarize_cells(experts: usize, lambda: f64, cells: Vec<SweepCell>) -> SweepSummary {
    let n = cells.len() as f64;
    let mean = cells.iter().map(|c| c.accuracy).sum::<f64>() / n;
    let sd = if cells.len() > 1 {
        let var = cells
            .iter()
            .map(|c| (c.accuracy - mean) * (c.accuracy - mean))
            .sum::<f64>()
            / (n - 1.0);
        crate::math::sqrt(var)
    } else {
        0.0
    };
    SweepSummary {
        experts,
        lambda,
        mean_accuracy: mean,
        sd_accuracy: sd,
        cells,
    }
}

/// Time-averaged assignment fractions per (slot, expert) from a routing
/// trace, for comparing load balance across runs.
pub fn time_averaged_fractions(metrics: &Metrics) -> Vec<(usize, usize, f64)> {
    use alloc::collections::BTreeMap;
    let mut acc: BTreeMap<(usize, usize), (f64, usize)> = BTreeMap::new();
    for row in &metrics.routing {
        let entry = acc.entry((row.slot, row.expert)).or_insert((0.0, 0));
        entry.0 += row.fraction;
        entry.1 += 1;
    }
    acc.into_iter()
        .map(|((slot, expert), (sum, n))| (slot, expert, sum / n as f64))
        .collect()
}

/// Max deviation of time-averaged fractions from the uniform share 1/E,
/// per slot; the headline "how balanced was routing" number.
pub fn max_fraction_deviation(metrics: &Metrics, experts: usize) -> f64 {
    let uniform = 1.0 / experts as f64;
    time_averaged_fractions(metrics)
        .iter()
        .map(|(_, _, f)| crate::math::abs(f - uniform))
        .fold(0.0, crate::math::max)
}
