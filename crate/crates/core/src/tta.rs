//! Streaming test-time adaptation: entropy minimization with sample selection
//! and re-weighting, a dynamic threshold and load-balance weight, and SGD
//! momentum updates restricted to the strategy's trainable parameters.
//!
//! Three strategies share the loop: `moetta` (routers + expert deltas, full
//! multi-term loss), `tent` (plain LayerNorm affine pairs, unweighted mean
//! entropy), and `noadapt` (predictions only).

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::analysis::{self, ExpertSimilaritySnapshot};
use crate::autodiff::Var;
use crate::bench::ShiftStream;
use crate::error::{Error, Result};
use crate::math;
use crate::moe_ln::RoutingResult;
use crate::tensor::Tensor;
use crate::vit::{ForwardOptions, Model, TrainScope};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Noadapt,
    Tent,
    Moetta,
}

impl Strategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Noadapt => "noadapt",
            Strategy::Tent => "tent",
            Strategy::Moetta => "moetta",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "noadapt" => Ok(Strategy::Noadapt),
            "tent" => Ok(Strategy::Tent),
            "moetta" => Ok(Strategy::Moetta),
            other => Err(Error::Config(format!(
                "unknown strategy '{other}' (expected noadapt, tent, or moetta)"
            ))),
        }
    }

    pub fn scope(&self) -> TrainScope {
        match self {
            Strategy::Noadapt => TrainScope::Frozen,
            Strategy::Tent => TrainScope::NormAffine,
            Strategy::Moetta => TrainScope::MoeAdapters,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdaptationConfig {
    pub strategy: Strategy,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Load-balance trade-off in the dynamic weight.
    pub lambda: f64,
    /// Entropy re-weight constant; `None` resolves to `0.4 * ln(K)`.
    pub e0: Option<f64>,
    pub batch_size: usize,
    /// Gradient-preserving trick on the expert scaling (ablation switch).
    pub detach_scale: bool,
    /// Capture per-batch expert-similarity snapshots and embeddings.
    pub record_diagnostics: bool,
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        // Zero learning rate is permitted as a degenerate control.
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Config("learning_rate must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn resolved_e0(&self, classes: usize) -> f64 {
        self.e0.unwrap_or(0.4 * math::ln(classes as f64))
    }
}

/// Running statistics of the adaptation loop.
#[derive(Debug, Clone, Default)]
pub struct AdaptationState {
    /// Batches processed so far.
    pub step: usize,
    /// Per-batch mean entropies, in order (the loop's `entropys` list).
    pub batch_mean_entropies: Vec<f64>,
    /// Running average before the current batch was appended.
    prev_average: f64,
    /// Sample-selection threshold E_max.
    pub threshold: f64,
    /// Dynamic load-balance weight alpha.
    pub alpha: f64,
    /// Momentum buffers keyed by trainable parameter path.
    pub momentum_buffers: BTreeMap<String, Tensor>,
}

impl AdaptationState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Running mean of per-batch mean entropies.
    pub fn entropy_average(&self) -> f64 {
        if self.batch_mean_entropies.is_empty() {
            0.0
        } else {
            self.batch_mean_entropies.iter().sum::<f64>() / self.batch_mean_entropies.len() as f64
        }
    }
}

/// Shannon entropy per posterior row, `0 ln 0 := 0`.
pub fn entropy(posteriors: &Tensor) -> Result<Tensor> {
    let shape = posteriors.shape();
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "entropy",
            lhs: shape.to_vec(),
            rhs: alloc::vec![0, 0],
        });
    }
    let (b, k) = (shape[0], shape[1]);
    let mut out = Vec::with_capacity(b);
    for r in 0..b {
        let row = &posteriors.data()[r * k..(r + 1) * k];
        let mut ent = 0.0;
        for &p in row {
            if p < 0.0 {
                return Err(Error::Contract(format!(
                    "entropy of a negative probability {p}"
                )));
            }
            if p > 0.0 {
                ent -= p * math::ln(p);
            }
        }
        out.push(ent);
    }
    Tensor::new(alloc::vec![b], out)
}

/// Threshold recurrence: `E_max^0 = E_avg^0`, then
/// `E_max^t = E_max^{t-1} * E_avg^t / E_avg^{t-1}` with E_avg the running
/// mean of per-batch mean entropies. Returns the updated threshold; the
/// batch mean is appended to the state's history.
pub fn update_threshold(state: &mut AdaptationState, batch_mean_entropy: f64) -> Result<f64> {
    if batch_mean_entropy < 0.0 {
        return Err(Error::Contract(format!(
            "negative batch mean entropy {batch_mean_entropy}"
        )));
    }
    let old_avg = state.entropy_average();
    if !state.batch_mean_entropies.is_empty() && old_avg == 0.0 {
        return Err(Error::DegenerateStream(
            "running entropy average is zero; threshold recurrence undefined".into(),
        ));
    }
    state.prev_average = old_avg;
    state.batch_mean_entropies.push(batch_mean_entropy);
    let new_avg = state.entropy_average();
    if state.batch_mean_entropies.len() == 1 {
        state.threshold = new_avg;
    } else {
        state.threshold *= new_avg / old_avg;
    }
    Ok(state.threshold)
}

/// Dynamic weight recurrence: `alpha_0 = lambda * E_avg^0`, then
/// `alpha_t = alpha_{t-1} * E_avg^t / E_avg^{t-1}`. Must be called after
/// [`update_threshold`] appended the current batch mean.
pub fn update_alpha(state: &mut AdaptationState, lambda: f64) -> f64 {
    let n = state.batch_mean_entropies.len();
    debug_assert!(n >= 1, "update_alpha before any batch");
    if n == 1 {
        state.alpha = lambda * state.entropy_average();
    } else {
        state.alpha *= state.entropy_average() / state.prev_average;
    }
    state.alpha
}

/// Per-batch outcome (predictions are computed before any update).
#[derive(Debug, Clone)]
pub struct BatchResult {
    pub predictions: Vec<usize>,
    pub entropies: Vec<f64>,
    /// Reliable mask: entropy strictly below the current threshold.
    pub reliable: Vec<bool>,
    pub mean_entropy: f64,
    pub threshold: f64,
    pub alpha: f64,
    /// Value of the selected re-weighted entropy term (0 if none reliable).
    pub entropy_term: f64,
    /// Sum of per-layer load-balancing losses (0 for tent/noadapt).
    pub lb_loss: f64,
    pub parameters_updated: bool,
    /// Per-slot routing statistics of this batch, keyed by norm-slot index.
    pub routing: Vec<(usize, RoutingResult)>,
    /// Final class-token embeddings when diagnostics are recorded.
    pub embeddings: Option<Tensor>,
}

/// SGD with momentum: `v <- mu v + g`, `theta <- theta - eta v`. Buffers are
/// created lazily per trainable path; frozen parameters are never touched.
pub fn sgd_momentum_step(
    model: &mut Model,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdaptationState,
    learning_rate: f64,
    momentum: f64,
) {
    model.visit_params_mut(&mut |name, t| {
        let Some(g) = grads.get(name) else {
            return;
        };
        let buf = state
            .momentum_buffers
            .entry(String::from(name))
            .or_insert_with(|| Tensor::zeros(t.shape()));
        for ((v, gi), ti) in buf
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(t.data_mut().iter_mut())
        {
            *v = momentum * *v + gi;
            *ti -= learning_rate * *v;
        }
    });
}

/// One adaptation step on one batch. Predictions are emitted from the
/// forward pass that precedes the update (predict-then-adapt).
pub fn adapt_batch(
    images: &Tensor,
    model: &mut Model,
    state: &mut AdaptationState,
    config: &AdaptationConfig,
) -> Result<BatchResult> {
    config.validate()?;
    let scope = config.strategy.scope();
    let opts = ForwardOptions {
        scope,
        detach_scale: config.detach_scale,
        capture_embeddings: config.record_diagnostics,
    };
    let mut fwd = model.forward_batch(images, &opts)?;
    let predictions = fwd.predictions.clone();

    // Per-sample prediction entropies (stable logit form on the tape for the
    // loss; plain values for selection and reporting).
    let ent_tensor = entropy(&fwd.posteriors)?;
    let entropies = ent_tensor.data().to_vec();
    let batch = entropies.len();
    let mean_entropy = entropies.iter().sum::<f64>() / batch as f64;

    match config.strategy {
        Strategy::Noadapt => {
            state.step += 1;
            Ok(BatchResult {
                predictions,
                entropies,
                reliable: alloc::vec![false; batch],
                mean_entropy,
                threshold: 0.0,
                alpha: 0.0,
                entropy_term: 0.0,
                lb_loss: 0.0,
                parameters_updated: false,
                routing: Vec::new(),
                embeddings: fwd.embeddings.take(),
            })
        }
        Strategy::Tent => {
            // Unweighted mean entropy over the full batch.
            let mut ent_vars: Vec<Var> = Vec::with_capacity(batch);
            for (logits, posterior) in fwd.sample_logits.iter().zip(&fwd.sample_posteriors) {
                ent_vars.push(entropy_var(&mut fwd.tape, *logits, *posterior)?);
            }
            let coeffs = alloc::vec![1.0 / batch as f64; batch];
            let loss = fwd.tape.lincomb(&ent_vars, &coeffs)?;
            let loss_value = fwd.tape.scalar_value(loss);
            let grads = fwd.tape.backward(loss)?;
            let mut grad_map = BTreeMap::new();
            for path in model.trainable_paths(scope) {
                let var = fwd.leaves[&path];
                grad_map.insert(path, grads.get_or_zeros(&fwd.tape, var));
            }
            sgd_momentum_step(model, &grad_map, state, config.learning_rate, config.momentum);
            state.step += 1;
            state.batch_mean_entropies.push(mean_entropy);
            Ok(BatchResult {
                predictions,
                entropies,
                reliable: alloc::vec![true; batch],
                mean_entropy,
                threshold: 0.0,
                alpha: 0.0,
                entropy_term: loss_value,
                lb_loss: 0.0,
                parameters_updated: true,
                routing: Vec::new(),
                embeddings: fwd.embeddings.take(),
            })
        }
        Strategy::Moetta => {
            // Threshold and weight are updated with this batch's mean before
            // the reliable set is formed.
            update_threshold(state, mean_entropy)?;
            update_alpha(state, config.lambda);
            let threshold = state.threshold;
            let alpha = state.alpha;

            let reliable: Vec<bool> = entropies.iter().map(|&e| e < threshold).collect();
            let e0 = config.resolved_e0(model.config.classes);

            let mut ent_vars: Vec<Var> = Vec::with_capacity(batch);
            for (logits, posterior) in fwd.sample_logits.iter().zip(&fwd.sample_posteriors) {
                ent_vars.push(entropy_var(&mut fwd.tape, *logits, *posterior)?);
            }

            // Auxiliary losses, one per MoE slot, collected and cleared.
            let mut routing_results = Vec::with_capacity(fwd.routing.len());
            let mut lb_vars = Vec::with_capacity(fwd.routing.len());
            for layer in core::mem::take(&mut fwd.routing) {
                let (lb_var, result) = crate::moe_ln::collect_lb_loss(&mut fwd.tape, &layer)?;
                lb_vars.push(lb_var);
                routing_results.push((layer.slot, result));
            }

            let loss = total_loss(
                &mut fwd.tape,
                &ent_vars,
                &entropies,
                &reliable,
                &lb_vars,
                alpha,
                e0,
            )?;
            let grads = fwd.tape.backward(loss.var)?;
            let mut grad_map = BTreeMap::new();
            for path in model.trainable_paths(scope) {
                let var = fwd.leaves[&path];
                grad_map.insert(path, grads.get_or_zeros(&fwd.tape, var));
            }
            sgd_momentum_step(model, &grad_map, state, config.learning_rate, config.momentum);
            state.step += 1;
            Ok(BatchResult {
                predictions,
                entropies,
                reliable,
                mean_entropy,
                threshold,
                alpha,
                entropy_term: loss.entropy_term,
                lb_loss: loss.lb_term,
                parameters_updated: true,
                routing: routing_results,
                embeddings: fwd.embeddings.take(),
            })
        }
    }
}

/// Differentiable per-sample entropy from logits `[1, K]` and the matching
/// softmax var: `Ent = logsumexp(z) - sum_k p_k z_k` (stable for any logits).
pub fn entropy_var(
    tape: &mut crate::autodiff::Tape,
    logits: Var,
    posterior: Var,
) -> Result<Var> {
    let lse = tape.logsumexp(logits)?;
    let lse_s = tape.reshape(lse, Vec::new())?;
    let pz = tape.mul(posterior, logits)?;
    let s = tape.sum(pz);
    tape.lincomb(&[lse_s, s], &[1.0, -1.0])
}

/// Assembled multi-term objective and its reported components.
#[derive(Debug, Clone, Copy)]
pub struct TotalLoss {
    pub var: Var,
    pub value: f64,
    /// Selected re-weighted entropy term (0 when no sample is reliable).
    pub entropy_term: f64,
    /// Sum of the per-layer load-balancing losses.
    pub lb_term: f64,
}

/// `(1/|S|) sum_{x in S} exp(E0 - detach(Ent x)) Ent(x) + alpha sum_i lb_i`.
///
/// The re-weights and the selection both use the detached entropy values;
/// only `Ent` inside the product and `P` inside each lb term carry gradient.
/// An empty reliable set contributes 0 and leaves the load-balancing term.
pub fn total_loss(
    tape: &mut crate::autodiff::Tape,
    ent_vars: &[Var],
    detached_entropies: &[f64],
    reliable: &[bool],
    lb_vars: &[Var],
    alpha: f64,
    e0: f64,
) -> Result<TotalLoss> {
    debug_assert_eq!(ent_vars.len(), detached_entropies.len());
    debug_assert_eq!(ent_vars.len(), reliable.len());
    let selected: Vec<usize> = (0..ent_vars.len()).filter(|&i| reliable[i]).collect();

    // The constant-zero part keeps the combination non-empty even when both
    // the reliable set and the layer list are empty.
    let zero = tape.scalar_const(0.0);
    let mut parts = alloc::vec![zero];
    let mut coeffs = alloc::vec![1.0];
    if !selected.is_empty() {
        let inv = 1.0 / selected.len() as f64;
        for &i in &selected {
            parts.push(ent_vars[i]);
            coeffs.push(inv * math::exp(e0 - detached_entropies[i]));
        }
    }
    for &lb in lb_vars {
        parts.push(lb);
        coeffs.push(alpha);
    }
    let var = tape.lincomb(&parts, &coeffs)?;

    let entropy_term = if selected.is_empty() {
        0.0
    } else {
        selected
            .iter()
            .map(|&i| math::exp(e0 - detached_entropies[i]) * detached_entropies[i])
            .sum::<f64>()
            / selected.len() as f64
    };
    let lb_term = lb_vars.iter().map(|&v| tape.scalar_value(v)).sum();
    Ok(TotalLoss {
        var,
        value: tape.scalar_value(var),
        entropy_term,
        lb_term,
    })
}

/// Tent control: one SGD step minimizing unweighted mean entropy on the
/// normalization affine parameters.
pub fn tent_step(
    images: &Tensor,
    model: &mut Model,
    state: &mut AdaptationState,
    config: &AdaptationConfig,
) -> Result<BatchResult> {
    let cfg = AdaptationConfig {
        strategy: Strategy::Tent,
        ..config.clone()
    };
    adapt_batch(images, model, state, &cfg)
}

/// Per-batch metrics row exported to CSV by the adapt command.
#[derive(Debug, Clone)]
pub struct BatchRow {
    pub batch_index: usize,
    /// The batch's single domain tag, or "mixed".
    pub domain_tag: String,
    pub batch_accuracy: f64,
    pub mean_entropy: f64,
    pub threshold: f64,
    pub alpha: f64,
    pub lb_loss: f64,
    pub entropy_term: f64,
}

#[derive(Debug, Clone)]
pub struct RoutingRow {
    pub batch_index: usize,
    pub slot: usize,
    pub expert: usize,
    pub fraction: f64,
    pub mean_prob: f64,
}

#[derive(Debug, Clone)]
pub struct EmbeddingRow {
    pub sample_id: usize,
    pub domain_tag: String,
    pub values: Vec<f64>,
}

/// Stream-level results: overall and per-domain accuracy, per-batch traces,
/// routing statistics, and optional diagnostics.
#[derive(Debug, Clone)]
pub struct Metrics {
    pub overall_accuracy: f64,
    pub per_domain: BTreeMap<String, (usize, usize)>,
    pub batches: Vec<BatchRow>,
    pub routing: Vec<RoutingRow>,
    pub expert_similarity: Vec<ExpertSimilaritySnapshot>,
    pub embeddings: Vec<EmbeddingRow>,
}

impl Metrics {
    pub fn domain_accuracy(&self, tag: &str) -> Option<f64> {
        self.per_domain
            .get(tag)
            .map(|(correct, total)| *correct as f64 / *total as f64)
    }
}

/// Run the adaptation loop over a full stream, in order. State carries
/// across batches; parameters mutate only between batches.
pub fn adapt_stream(
    stream: &ShiftStream,
    model: &mut Model,
    config: &AdaptationConfig,
) -> Result<Metrics> {
    if stream.batches.is_empty() {
        return Err(Error::Contract("adapt_stream on an empty stream".into()));
    }
    let mut state = AdaptationState::new();
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut per_domain: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut batches = Vec::with_capacity(stream.batches.len());
    let mut routing_rows = Vec::new();
    let mut similarity = Vec::new();
    let mut embeddings = Vec::new();
    let mut sample_counter = 0usize;

    for (t, batch) in stream.batches.iter().enumerate() {
        let result = adapt_batch(&batch.images, model, &mut state, config)
            .map_err(|e| Error::Contract(format!("batch {t}: {e}")))?;

        let mut batch_correct = 0usize;
        for (i, (&pred, &label)) in result
            .predictions
            .iter()
            .zip(&batch.labels)
            .enumerate()
        {
            let hit = pred == label;
            batch_correct += hit as usize;
            let entry = per_domain
                .entry(batch.domain_tags[i].clone())
                .or_insert((0, 0));
            entry.0 += hit as usize;
            entry.1 += 1;
        }
        correct += batch_correct;
        total += result.predictions.len();

        let tag = if batch.domain_tags.windows(2).all(|w| w[0] == w[1]) {
            batch.domain_tags[0].clone()
        } else {
            String::from("mixed")
        };
        batches.push(BatchRow {
            batch_index: t,
            domain_tag: tag,
            batch_accuracy: batch_correct as f64 / result.predictions.len() as f64,
            mean_entropy: result.mean_entropy,
            threshold: result.threshold,
            alpha: result.alpha,
            lb_loss: result.lb_loss,
            entropy_term: result.entropy_term,
        });

        for (slot, routing) in &result.routing {
            for e in 0..routing.fraction.numel() {
                routing_rows.push(RoutingRow {
                    batch_index: t,
                    slot: *slot,
                    expert: e,
                    fraction: routing.fraction.data()[e],
                    mean_prob: routing.mean_prob.data()[e],
                });
            }
        }
        if config.record_diagnostics {
            similarity.extend(analysis::expert_cosine_snapshot(model, t));
            if let Some(embs) = &result.embeddings {
                let d = embs.shape()[1];
                for i in 0..embs.shape()[0] {
                    embeddings.push(EmbeddingRow {
                        sample_id: sample_counter + i,
                        domain_tag: batch.domain_tags[i].clone(),
                        values: embs.data()[i * d..(i + 1) * d].to_vec(),
                    });
                }
            }
        }
        sample_counter += result.predictions.len();
    }

    Ok(Metrics {
        overall_accuracy: correct as f64 / total as f64,
        per_domain,
        batches,
        routing: routing_rows,
        expert_similarity: similarity,
        embeddings,
    })
}
