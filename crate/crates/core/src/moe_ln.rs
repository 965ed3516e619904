//! MoE-LayerNorm: per-sample routing over expert affine deltas added to a
//! frozen shared expert, with the load-balancing auxiliary loss.
//!
//! Each layer owns a router (a linear map from the token-mean embedding to
//! expert logits) and `E` expert affine deltas, zero-initialized so that the
//! layer starts out exactly equal to the pre-trained LayerNorm. The selected
//! expert's parameters are scaled by `p / detach(p)` — forward value exactly
//! one — so the task loss can reach the router through the selection.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::math;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct MoeLayerNorm {
    /// Shared (frozen) affine parameters, copied from the pre-trained layer.
    pub shared_weight: Tensor,
    pub shared_bias: Tensor,
    /// Expert affine deltas, `[E, D]`, zero at construction.
    pub expert_weight: Tensor,
    pub expert_bias: Tensor,
    /// Router projection `[E, D]` and bias `[E]` (bias zero-initialized).
    pub router_weight: Tensor,
    pub router_bias: Tensor,
    pub expert_count: usize,
    /// Number of activated experts per sample (top-k), default 1.
    pub activated: usize,
}

/// Router matrix drawn Glorot-uniform with bound `sqrt(6 / (D + E))`; expert
/// deltas and router bias exactly zero; shared parameters copied and frozen.
pub fn init_moe_layer(
    dim: usize,
    experts: usize,
    shared: (&Tensor, &Tensor),
    seed: u64,
) -> MoeLayerNorm {
    assert!(dim >= 1 && experts >= 1);
    let bound = math::sqrt(6.0 / (dim + experts) as f64);
    let mut r = rng::rng(seed, &[]);
    let router: Vec<f64> = (0..experts * dim)
        .map(|_| r.gen_range(-bound..=bound))
        .collect();
    MoeLayerNorm {
        shared_weight: shared.0.clone(),
        shared_bias: shared.1.clone(),
        expert_weight: Tensor::zeros(&[experts, dim]),
        expert_bias: Tensor::zeros(&[experts, dim]),
        router_weight: Tensor::new(vec![experts, dim], router).expect("sized"),
        router_bias: Tensor::zeros(&[experts]),
        expert_count: experts,
        activated: 1,
    }
}

impl MoeLayerNorm {
    pub fn with_activated(mut self, k: usize) -> Self {
        assert!(k >= 1 && k <= self.expert_count);
        self.activated = k;
        self
    }

    pub fn dim(&self) -> usize {
        self.shared_weight.numel()
    }
}

/// Batch-level routing statistics.
#[derive(Debug, Clone)]
pub struct RoutingResult {
    /// Router probabilities, `[B, E]`; rows sum to 1.
    pub probabilities: Tensor,
    /// Selected expert indices per sample, `B x k`.
    pub selected: Vec<Vec<usize>>,
    /// The corresponding probabilities, `B x k`.
    pub selected_probs: Vec<Vec<f64>>,
    /// Assignment fractions `F`, `[E]`; sums to 1.
    pub fraction: Tensor,
    /// Mean router probability `P`, `[E]`; sums to 1.
    pub mean_prob: Tensor,
    /// `E x sum_i F_i P_i`.
    pub loss: f64,
}

/// Top-k indices by probability, exact ties broken by lowest index.
pub fn top_k_select(probs: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| {
        probs[b]
            .partial_cmp(&probs[a])
            .expect("finite probabilities")
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

/// F, P, selections, and the loss value from a probability matrix `[B, E]`.
pub fn routing_stats(probabilities: &Tensor, k: usize) -> Result<RoutingResult> {
    let shape = probabilities.shape();
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "routing_stats",
            lhs: shape.to_vec(),
            rhs: vec![0, 0],
        });
    }
    let (b, e) = (shape[0], shape[1]);
    if b == 0 || k == 0 || k > e {
        return Err(Error::Contract(alloc::format!(
            "routing_stats needs B >= 1 and 1 <= k <= E, got B={b}, k={k}, E={e}"
        )));
    }
    let mut selected = Vec::with_capacity(b);
    let mut selected_probs = Vec::with_capacity(b);
    let mut counts = vec![0usize; e];
    let mut mean_prob = vec![0.0; e];
    for s in 0..b {
        let row = &probabilities.data()[s * e..(s + 1) * e];
        for (j, &p) in row.iter().enumerate() {
            mean_prob[j] += p;
        }
        let sel = top_k_select(row, k);
        for &j in &sel {
            counts[j] += 1;
        }
        selected_probs.push(sel.iter().map(|&j| row[j]).collect());
        selected.push(sel);
    }
    for m in mean_prob.iter_mut() {
        *m /= b as f64;
    }
    let total = (b * k) as f64;
    let fraction: Vec<f64> = counts.iter().map(|&c| c as f64 / total).collect();
    let loss = load_balancing_from(&fraction, &mean_prob, e);
    Ok(RoutingResult {
        probabilities: probabilities.clone(),
        selected,
        selected_probs,
        fraction: Tensor::new(vec![e], fraction).expect("sized"),
        mean_prob: Tensor::new(vec![e], mean_prob).expect("sized"),
        loss,
    })
}

fn load_balancing_from(fraction: &[f64], mean_prob: &[f64], experts: usize) -> f64 {
    let dot: f64 = fraction.iter().zip(mean_prob).map(|(f, p)| f * p).sum();
    experts as f64 * dot
}

/// `E x sum_i F_i P_i` from an existing routing result.
pub fn load_balancing_loss(result: &RoutingResult, experts: usize) -> f64 {
    load_balancing_from(result.fraction.data(), result.mean_prob.data(), experts)
}

/// Route a whole batch `[B, T, D]` through a layer's router (values only).
pub fn route(z: &Tensor, layer: &MoeLayerNorm) -> Result<RoutingResult> {
    let shape = z.shape();
    if shape.len() != 3 || shape[2] != layer.dim() {
        return Err(Error::ShapeMismatch {
            op: "route",
            lhs: shape.to_vec(),
            rhs: vec![0, 0, layer.dim()],
        });
    }
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    let e = layer.expert_count;
    let mut probs = vec![0.0; b * e];
    for s in 0..b {
        // Token-mean embedding of the layer input.
        let mut mean = vec![0.0; d];
        for row in 0..t {
            let base = (s * t + row) * d;
            for j in 0..d {
                mean[j] += z.data()[base + j];
            }
        }
        for m in mean.iter_mut() {
            *m /= t as f64;
        }
        let logits: Vec<f64> = (0..e)
            .map(|i| {
                let wrow = &layer.router_weight.data()[i * d..(i + 1) * d];
                let mut acc = layer.router_bias.data()[i];
                for j in 0..d {
                    acc += wrow[j] * mean[j];
                }
                acc
            })
            .collect();
        let m = logits
            .iter()
            .fold(f64::NEG_INFINITY, |a, &v| math::max(a, v));
        let exps: Vec<f64> = logits.iter().map(|&v| math::exp(v - m)).collect();
        let zsum: f64 = exps.iter().sum();
        for (j, ex) in exps.iter().enumerate() {
            probs[s * e + j] = ex / zsum;
        }
    }
    routing_stats(
        &Tensor::new(vec![b, e], probs).expect("sized"),
        layer.activated,
    )
}

// ── tape-level forward ───────────────────────────────────────────────

/// Leaf handles for one layer's parameters on the active tape.
#[derive(Debug, Clone, Copy)]
pub struct MoeLeafVars {
    pub shared_weight: Var,
    pub shared_bias: Var,
    pub expert_weight: Var,
    pub expert_bias: Var,
    pub router_weight: Var,
    pub router_bias: Var,
}

/// Routing record of one sample through one layer.
#[derive(Debug, Clone)]
pub struct SampleRouting {
    pub prob_row: Var,
    pub selection: Vec<usize>,
    pub selected_probs: Vec<f64>,
}

/// Per-batch routing accumulation for one MoE slot; the auxiliary loss is
/// collected from it after the whole batch has been processed.
#[derive(Debug, Clone)]
pub struct LayerRouting {
    pub slot: usize,
    pub expert_count: usize,
    pub activated: usize,
    pub prob_rows: Vec<Var>,
    pub selections: Vec<Vec<usize>>,
    pub selected_probs: Vec<Vec<f64>>,
}

impl LayerRouting {
    pub fn new(slot: usize, layer: &MoeLayerNorm) -> Self {
        LayerRouting {
            slot,
            expert_count: layer.expert_count,
            activated: layer.activated,
            prob_rows: Vec::new(),
            selections: Vec::new(),
            selected_probs: Vec::new(),
        }
    }

    pub fn record(&mut self, s: SampleRouting) {
        self.prob_rows.push(s.prob_row);
        self.selections.push(s.selection);
        self.selected_probs.push(s.selected_probs);
    }
}

/// Routing decisions pinned from a base run, for finite-difference oracles:
/// the surrogate function differentiated by backprop treats expert selection
/// and the detached scale denominators as constants.
#[derive(Debug, Clone)]
pub struct PinnedSample {
    pub selection: Vec<usize>,
    pub denominators: Vec<f64>,
}

/// Normalize one sample `[T, D]` with routed expert parameters.
///
/// When `pinned` is given, the selection and the detach-scale denominators
/// are taken from it instead of being derived from the current probabilities.
/// With `use_detach_scale = false` the selected expert parameters enter
/// unscaled (forward-identical, but the router receives no task gradient).
pub fn forward_sample(
    tape: &mut Tape,
    z: Var,
    layer: &MoeLayerNorm,
    leaves: &MoeLeafVars,
    eps: f64,
    use_detach_scale: bool,
    pinned: Option<&PinnedSample>,
) -> Result<(Var, SampleRouting)> {
    let e = layer.expert_count;
    let token_mean = tape.mean_rows(z)?;
    let row = tape.reshape(token_mean, vec![1, layer.dim()])?;
    let logits = tape.linear(row, leaves.router_weight, Some(leaves.router_bias))?;
    let prob_row = tape.softmax(logits)?;

    let probs = tape.value(prob_row).to_vec();
    debug_assert_eq!(probs.len(), e);
    let selection = match pinned {
        Some(p) => p.selection.clone(),
        None => top_k_select(&probs, layer.activated),
    };
    let selected_probs: Vec<f64> = selection.iter().map(|&j| probs[j]).collect();

    let mut fused_w: Option<Var> = None;
    let mut fused_b: Option<Var> = None;
    for (rank, &idx) in selection.iter().enumerate() {
        let p_j = tape.pick(prob_row, idx)?;
        let scale = if use_detach_scale {
            let c = match pinned {
                Some(pin) => {
                    let denom = tape.scalar_const(pin.denominators[rank]);
                    tape.div(p_j, denom)?
                }
                None => tape.detach_scale(p_j)?,
            };
            Some(c)
        } else {
            None
        };
        let w_row = tape.select_row(leaves.expert_weight, idx)?;
        let b_row = tape.select_row(leaves.expert_bias, idx)?;
        let (w_term, b_term) = match scale {
            Some(c) => (
                tape.mul_scalar_var(w_row, c)?,
                tape.mul_scalar_var(b_row, c)?,
            ),
            None => (w_row, b_row),
        };
        fused_w = Some(match fused_w {
            Some(acc) => tape.add(acc, w_term)?,
            None => w_term,
        });
        fused_b = Some(match fused_b {
            Some(acc) => tape.add(acc, b_term)?,
            None => b_term,
        });
    }
    let fused_w = tape.add(fused_w.expect("k >= 1"), leaves.shared_weight)?;
    let fused_b = tape.add(fused_b.expect("k >= 1"), leaves.shared_bias)?;

    let normalized = tape.normalize(z, eps)?;
    let scaled = tape.mul_rowvec(normalized, fused_w)?;
    let out = tape.add_rowvec(scaled, fused_b)?;
    Ok((
        out,
        SampleRouting {
            prob_row,
            selection,
            selected_probs,
        },
    ))
}

/// Build the differentiable auxiliary loss for one layer after a full batch:
/// `F` enters as a constant, `P` carries gradient to the router.
pub fn collect_lb_loss(tape: &mut Tape, acc: &LayerRouting) -> Result<(Var, RoutingResult)> {
    if acc.prob_rows.is_empty() {
        return Err(Error::Contract(
            "collect_lb_loss on a layer with no recorded samples".into(),
        ));
    }
    let e = acc.expert_count;
    let b = acc.prob_rows.len();
    let prob_matrix = tape.concat_rows(&acc.prob_rows)?;
    let mean_prob = tape.mean_rows(prob_matrix)?;

    let mut counts = vec![0usize; e];
    for sel in &acc.selections {
        for &j in sel {
            counts[j] += 1;
        }
    }
    let total = (b * acc.activated) as f64;
    let fraction: Vec<f64> = counts.iter().map(|&c| c as f64 / total).collect();
    let f_const = tape.constant(&Tensor::new(vec![e], fraction.clone()).expect("sized"));

    let prod = tape.mul(mean_prob, f_const)?;
    let dot = tape.sum(prod);
    let loss = tape.scale(dot, e as f64);

    let result = RoutingResult {
        probabilities: tape.tensor(prob_matrix),
        selected: acc.selections.clone(),
        selected_probs: acc.selected_probs.clone(),
        fraction: Tensor::new(vec![e], fraction).expect("sized"),
        mean_prob: tape.tensor(mean_prob),
        loss: tape.scalar_value(loss),
    };
    Ok((loss, result))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::testutil::randn;

    fn probs(rows: &[&[f64]]) -> Tensor {
        let e = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::new(vec![rows.len(), e], data).unwrap()
    }

    #[test]
    fn ties_select_lowest_index() {
        assert_eq!(top_k_select(&[0.25, 0.25, 0.25, 0.25], 1), vec![0]);
        assert_eq!(top_k_select(&[0.25, 0.25, 0.25, 0.25], 2), vec![0, 1]);
        assert_eq!(top_k_select(&[0.1, 0.4, 0.4, 0.1], 1), vec![1]);
    }

    #[test]
    fn hand_computed_stats() {
        // B=2, E=2, rows (0.6,0.4) and (0.7,0.3).
        let r = routing_stats(&probs(&[&[0.6, 0.4], &[0.7, 0.3]]), 1).unwrap();
        assert_eq!(r.selected, vec![vec![0], vec![0]]);
        assert_eq!(r.fraction.data(), &[1.0, 0.0]);
        assert!((r.mean_prob.data()[0] - 0.65).abs() < 1e-15);
        assert!((r.mean_prob.data()[1] - 0.35).abs() < 1e-15);
        // loss = 2 x (1 x 0.65) = 1.3
        assert!((r.loss - 1.3).abs() < 1e-15);
        assert!((load_balancing_loss(&r, 2) - 1.3).abs() < 1e-15);
    }

    #[test]
    fn uniform_rows_reach_the_lower_bound() {
        for e in [2usize, 3, 5, 9] {
            let row: Vec<f64> = vec![1.0 / e as f64; e];
            let rows: Vec<&[f64]> = (0..4).map(|_| row.as_slice()).collect();
            let r = routing_stats(&probs(&rows), 1).unwrap();
            assert!((r.loss - 1.0).abs() <= 1e-12, "E={e}: loss {}", r.loss);
        }
    }

    #[test]
    fn hard_routing_to_one_expert_costs_e() {
        let r = routing_stats(&probs(&[&[1.0, 0.0], &[1.0, 0.0]]), 1).unwrap();
        assert!((r.loss - 2.0).abs() < 1e-15);
    }

    #[test]
    fn single_sample_batch_is_well_defined() {
        let r = routing_stats(&probs(&[&[0.2, 0.5, 0.3]]), 1).unwrap();
        assert_eq!(r.selected, vec![vec![1]]);
        assert_eq!(r.fraction.data(), &[0.0, 1.0, 0.0]);
        assert!((r.loss - 3.0 * 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_router_routes_everything_to_expert_zero() {
        let d = 6;
        let shared_w = Tensor::full(&[d], 1.0);
        let shared_b = Tensor::zeros(&[d]);
        let mut layer = init_moe_layer(d, 4, (&shared_w, &shared_b), 3);
        layer.router_weight = Tensor::zeros(&[4, d]);

        let z = Tensor::new(
            vec![2, 3, d],
            (0..2 * 3 * d).map(|i| (i as f64) * 0.1 - 1.0).collect(),
        )
        .unwrap();
        let r = route(&z, &layer).unwrap();
        for s in 0..2 {
            for j in 0..4 {
                assert!((r.probabilities.at2(s, j) - 0.25).abs() < 1e-15);
            }
            assert_eq!(r.selected[s], vec![0]);
        }
        assert_eq!(r.fraction.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn rows_and_fractions_are_normalized() {
        for seed in 0..20u64 {
            let d = 5;
            let shared_w = Tensor::full(&[d], 1.0);
            let shared_b = Tensor::zeros(&[d]);
            let layer = init_moe_layer(d, 7, (&shared_w, &shared_b), seed);
            let z = randn(&[3, 4, d], 500 + seed);
            let r = route(&z, &layer).unwrap();
            for s in 0..3 {
                let sum: f64 = (0..7).map(|j| r.probabilities.at2(s, j)).sum();
                assert!((sum - 1.0).abs() <= 1e-12);
            }
            let fsum: f64 = r.fraction.data().iter().sum();
            let psum: f64 = r.mean_prob.data().iter().sum();
            assert!((fsum - 1.0).abs() <= 1e-12);
            assert!((psum - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn init_is_seeded_bounded_and_zero_deltas() {
        let d = 8;
        let e = 5;
        let shared_w = Tensor::full(&[d], 1.0);
        let shared_b = Tensor::zeros(&[d]);
        let a = init_moe_layer(d, e, (&shared_w, &shared_b), 42);
        let b = init_moe_layer(d, e, (&shared_w, &shared_b), 42);
        assert_eq!(a.router_weight, b.router_weight);

        let bound = math::sqrt(6.0 / (d + e) as f64);
        assert!(a.router_weight.data().iter().all(|v| v.abs() <= bound));
        assert!(a.expert_weight.data().iter().all(|&v| v == 0.0));
        assert!(a.expert_bias.data().iter().all(|&v| v == 0.0));
        assert!(a.router_bias.data().iter().all(|&v| v == 0.0));
    }

    fn leaf_layer(tape: &mut Tape, layer: &MoeLayerNorm, trainable: bool) -> MoeLeafVars {
        MoeLeafVars {
            shared_weight: tape.leaf(&layer.shared_weight, false),
            shared_bias: tape.leaf(&layer.shared_bias, false),
            expert_weight: tape.leaf(&layer.expert_weight, trainable),
            expert_bias: tape.leaf(&layer.expert_bias, trainable),
            router_weight: tape.leaf(&layer.router_weight, trainable),
            router_bias: tape.leaf(&layer.router_bias, trainable),
        }
    }

    fn plain_layernorm(tape: &mut Tape, z: Var, w: &Tensor, b: &Tensor, eps: f64) -> Var {
        let wv = tape.constant(w);
        let bv = tape.constant(b);
        let n = tape.normalize(z, eps).unwrap();
        let s = tape.mul_rowvec(n, wv).unwrap();
        tape.add_rowvec(s, bv).unwrap()
    }

    #[test]
    fn zero_expert_deltas_reduce_to_plain_layernorm() {
        let d = 6;
        let shared_w = randn(&[d], 91);
        let shared_b = randn(&[d], 92);
        for seed in 0..5u64 {
            let layer = init_moe_layer(d, 4, (&shared_w, &shared_b), seed);
            let z = randn(&[5, d], 600 + seed);
            let mut tape = Tape::new();
            let zv = tape.constant(&z);
            let leaves = leaf_layer(&mut tape, &layer, false);
            let (out, _) =
                forward_sample(&mut tape, zv, &layer, &leaves, 1e-5, true, None).unwrap();
            let plain = plain_layernorm(&mut tape, zv, &shared_w, &shared_b, 1e-5);
            for (a, b) in tape.value(out).iter().zip(tape.value(plain)) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn forward_is_independent_of_selected_probability_magnitude() {
        // The detach-scale factor is exactly 1 in the forward pass, so two
        // routers with very different confidence produce identical outputs
        // (same selection, nonzero deltas).
        let d = 4;
        let shared_w = Tensor::full(&[d], 1.0);
        let shared_b = Tensor::zeros(&[d]);
        let mut layer = init_moe_layer(d, 2, (&shared_w, &shared_b), 1);
        layer.expert_weight = randn(&[2, d], 77);
        layer.expert_bias = randn(&[2, d], 78);

        let z = randn(&[3, d], 79);
        let mut outs = Vec::new();
        for conf in [0.2f64, 5.0] {
            // Bias steers expert 0 with varying confidence.
            let mut l = layer.clone();
            l.router_weight = Tensor::zeros(&[2, d]);
            l.router_bias = Tensor::new(vec![2], vec![conf, 0.0]).unwrap();
            let mut tape = Tape::new();
            let zv = tape.constant(&z);
            let leaves = leaf_layer(&mut tape, &l, false);
            let (out, routing) =
                forward_sample(&mut tape, zv, &l, &leaves, 1e-5, true, None).unwrap();
            assert_eq!(routing.selection, vec![0]);
            outs.push(tape.value(out).to_vec());
        }
        for (a, b) in outs[0].iter().zip(&outs[1]) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn router_task_gradient_requires_nonzero_deltas() {
        let d = 5;
        let shared_w = Tensor::full(&[d], 1.0);
        let shared_b = Tensor::zeros(&[d]);
        let proj = randn(&[3, d], 55);
        let z = randn(&[3, d], 56);

        let run = |layer: &MoeLayerNorm| {
            let mut tape = Tape::new();
            let zv = tape.constant(&z);
            let leaves = leaf_layer(&mut tape, layer, true);
            let (out, _) =
                forward_sample(&mut tape, zv, layer, &leaves, 1e-5, true, None).unwrap();
            let pv = tape.constant(&proj);
            let prod = tape.mul(out, pv).unwrap();
            let loss = tape.sum(prod);
            let grads = tape.backward(loss).unwrap();
            grads.get_or_zeros(&tape, leaves.router_weight)
        };

        let zero_deltas = init_moe_layer(d, 3, (&shared_w, &shared_b), 9);
        let g0 = run(&zero_deltas);
        assert!(g0.data().iter().all(|&v| v == 0.0));

        let mut warm = zero_deltas.clone();
        warm.expert_weight = randn(&[3, d], 57);
        let g1 = run(&warm);
        assert!(g1.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn collected_loss_matches_plain_route() {
        let d = 6;
        let shared_w = Tensor::full(&[d], 1.0);
        let shared_b = Tensor::zeros(&[d]);
        let layer = init_moe_layer(d, 4, (&shared_w, &shared_b), 21);
        let z = randn(&[5, 3, d], 22);

        // Tape route, one sample at a time.
        let mut tape = Tape::new();
        let leaves = leaf_layer(&mut tape, &layer, true);
        let mut acc = LayerRouting::new(0, &layer);
        for s in 0..5 {
            let start = s * 3 * d;
            let sample =
                Tensor::new(vec![3, d], z.data()[start..start + 3 * d].to_vec()).unwrap();
            let zv = tape.constant(&sample);
            let (_, routing) =
                forward_sample(&mut tape, zv, &layer, &leaves, 1e-5, true, None).unwrap();
            acc.record(routing);
        }
        let (loss_var, result) = collect_lb_loss(&mut tape, &acc).unwrap();

        let plain = route(&z, &layer).unwrap();
        assert!((tape.scalar_value(loss_var) - plain.loss).abs() <= 1e-12);
        assert_eq!(result.selected, plain.selected);
        for (a, b) in result
            .probabilities
            .data()
            .iter()
            .zip(plain.probabilities.data())
        {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn lb_gradient_reaches_router_through_mean_prob_only() {
        // F is constant; P is differentiable. The router must receive a
        // gradient from the collected loss even with zero expert deltas.
        let d = 4;
        let shared_w = Tensor::full(&[d], 1.0);
        let shared_b = Tensor::zeros(&[d]);
        let layer = init_moe_layer(d, 3, (&shared_w, &shared_b), 31);
        let z = randn(&[4, 2, d], 32);

        let mut tape = Tape::new();
        let leaves = leaf_layer(&mut tape, &layer, true);
        let mut acc = LayerRouting::new(0, &layer);
        for s in 0..4 {
            let start = s * 2 * d;
            let sample =
                Tensor::new(vec![2, d], z.data()[start..start + 2 * d].to_vec()).unwrap();
            let zv = tape.constant(&sample);
            let (_, routing) =
                forward_sample(&mut tape, zv, &layer, &leaves, 1e-5, true, None).unwrap();
            acc.record(routing);
        }
        let (loss_var, _) = collect_lb_loss(&mut tape, &acc).unwrap();
        let grads = tape.backward(loss_var).unwrap();
        let g = grads.get_or_zeros(&tape, leaves.router_weight);
        assert!(g.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn general_top_k_path_fuses_multiple_experts() {
        let d = 4;
        let shared_w = Tensor::full(&[d], 1.0);
        let shared_b = Tensor::zeros(&[d]);
        let mut layer = init_moe_layer(d, 3, (&shared_w, &shared_b), 62).with_activated(2);
        layer.expert_weight = randn(&[3, d], 63);
        layer.expert_bias = randn(&[3, d], 64);

        let z = randn(&[2, d], 65);
        let mut tape = Tape::new();
        let zv = tape.constant(&z);
        let leaves = leaf_layer(&mut tape, &layer, false);
        let (out, routing) =
            forward_sample(&mut tape, zv, &layer, &leaves, 1e-5, true, None).unwrap();
        assert_eq!(routing.selection.len(), 2);

        // Expected: plain layernorm scaled/shifted by shared + both deltas.
        let mut w = shared_w.clone();
        let mut b = shared_b.clone();
        for &idx in &routing.selection {
            for j in 0..d {
                w.data_mut()[j] += layer.expert_weight.at2(idx, j);
                b.data_mut()[j] += layer.expert_bias.at2(idx, j);
            }
        }
        let expected = plain_layernorm(&mut tape, zv, &w, &b, 1e-5);
        for (a, e) in tape.value(out).iter().zip(tape.value(expected)) {
            assert!((a - e).abs() <= 1e-12);
        }
    }
}
