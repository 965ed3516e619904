//! Monte Carlo verifiers for two analytic claims, plus the accumulated
//! gradient-direction analysis on synthetic domains.
//!
//! 1. For theta_1, theta_2, theta drawn i.i.d. from N(0, sigma^2 I_d), the
//!    expected cosine between u = theta_1 - theta and v = theta_2 - theta
//!    converges to 1/2 as d grows, independently of sigma; per coordinate,
//!    Var(u_i) = 2 sigma^2 and Cov(u_i, v_i) = sigma^2.
//! 2. The top-1 load-balancing loss E x sum_i F_i P_i is bounded below by 1
//!    for every batch, with equality exactly at uniform routing rows.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::bench::{self, Dataset, DomainSpec, SeverityGrids};
use crate::error::{Error, Result};
use crate::math;
use crate::moe_ln;
use crate::rng;
use crate::tensor::{cosine, Tensor};
use crate::tta::{adapt_stream, AdaptationConfig, Strategy};
use crate::vit::Model;

#[derive(Debug, Clone)]
pub struct CosineExperiment {
    pub dimension: usize,
    pub sigma: f64,
    pub trials: usize,
    pub seed: u64,
    /// Sample mean of cos(u, v) over the trials.
    pub mean_cosine: f64,
    /// Standard error of that mean.
    pub standard_error: f64,
    /// Pooled per-coordinate estimates, each normalized by sigma^2.
    pub var_u_over_sigma2: f64,
    pub var_v_over_sigma2: f64,
    pub cov_uv_over_sigma2: f64,
    /// Per-coordinate correlation estimate.
    pub rho_hat: f64,
}

/// Estimate E[cos(u, v)] for u = theta_1 - theta, v = theta_2 - theta with
/// i.i.d. N(0, sigma^2 I_d) draws, plus pooled per-coordinate moments.
pub fn mc_cosine_expectation(
    dimension: usize,
    sigma: f64,
    trials: usize,
    seed: u64,
) -> Result<CosineExperiment> {
    if dimension < 2 {
        return Err(Error::Config("cosine experiment needs d >= 2".into()));
    }
    if !(sigma > 0.0) {
        return Err(Error::Config("sigma must be positive".into()));
    }
    if trials < 100 {
        return Err(Error::Config("cosine experiment needs >= 100 trials".into()));
    }
    let mut cosines = Vec::with_capacity(trials);
    // Pooled per-coordinate moments over all trials and coordinates.
    let (mut su, mut sv, mut suu, mut svv, mut suv) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let count = (trials * dimension) as f64;
    for trial in 0..trials {
        let mut r = rng::rng(seed, &[trial as u64]);
        let mut dot = 0.0;
        let mut nu = 0.0;
        let mut nv = 0.0;
        for _ in 0..dimension {
            let t1: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut r);
            let t2: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut r);
            let t0: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut r);
            let u = sigma * (t1 - t0);
            let v = sigma * (t2 - t0);
            dot += u * v;
            nu += u * u;
            nv += v * v;
            su += u;
            sv += v;
            suu += u * u;
            svv += v * v;
            suv += u * v;
        }
        cosines.push(dot / (math::sqrt(nu) * math::sqrt(nv)));
    }
    let mean = cosines.iter().sum::<f64>() / trials as f64;
    let var = cosines.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>()
        / (trials as f64 - 1.0);
    let se = math::sqrt(var / trials as f64);

    let mu = su / count;
    let mv = sv / count;
    let var_u = suu / count - mu * mu;
    let var_v = svv / count - mv * mv;
    let cov = suv / count - mu * mv;
    let s2 = sigma * sigma;
    Ok(CosineExperiment {
        dimension,
        sigma,
        trials,
        seed,
        mean_cosine: mean,
        standard_error: se,
        var_u_over_sigma2: var_u / s2,
        var_v_over_sigma2: var_v / s2,
        cov_uv_over_sigma2: cov / s2,
        rho_hat: cov / math::sqrt(var_u * var_v),
    })
}

#[derive(Debug, Clone)]
pub struct LbBoundCheck {
    pub experts: usize,
    pub batch: usize,
    pub trials: usize,
    /// Minimum observed top-1 loss over all random matrices.
    pub min_loss: f64,
    /// Loss of the exact-uniform probability matrix.
    pub uniform_loss: f64,
}

/// Stress the top-1 lower bound with routing matrices whose rows are drawn
/// from Dirichlet(1, ..., 1) (uniform on the simplex, via normalized
/// exponentials).
pub fn lb_bound_check(experts: usize, batch: usize, trials: usize, seed: u64) -> Result<LbBoundCheck> {
    if experts < 2 || batch < 1 || trials < 1 {
        return Err(Error::Config(
            "lb_bound_check needs E >= 2, B >= 1, trials >= 1".into(),
        ));
    }
    let mut min_loss = f64::INFINITY;
    for trial in 0..trials {
        let mut r = rng::rng(seed, &[experts as u64, batch as u64, trial as u64]);
        let mut probs = vec![0.0; batch * experts];
        for row in probs.chunks_mut(experts) {
            let mut total = 0.0;
            for v in row.iter_mut() {
                // Exp(1) draw; guard the log against a zero uniform.
                let u: f64 = r.gen_range(f64::MIN_POSITIVE..1.0);
                *v = -math::ln(u);
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let matrix = Tensor::new(vec![batch, experts], probs).expect("sized");
        let result = moe_ln::routing_stats(&matrix, 1)?;
        min_loss = math::min(min_loss, result.loss);
    }

    let uniform = Tensor::full(&[batch, experts], 1.0 / experts as f64);
    let uniform_loss = moe_ln::routing_stats(&uniform, 1)?.loss;
    Ok(LbBoundCheck {
        experts,
        batch,
        trials,
        min_loss,
        uniform_loss,
    })
}

#[derive(Debug, Clone)]
pub struct GradientCosineMatrix {
    pub domain_tags: Vec<String>,
    /// Pairwise cosine of accumulated update directions, `[n, n]`; `None`
    /// marks a degenerate (zero-displacement) entry.
    pub entries: Vec<Vec<Option<f64>>>,
    pub lower_triangle_mean: f64,
    pub degenerate: bool,
}

/// Adapt one single-domain stream per domain from the same frozen checkpoint
/// (Tent-style: normalization affine parameters only) and compare the
/// flattened displacements `theta_domain - theta_pre` pairwise.
#[allow(clippy::too_many_arguments)]
pub fn accumulated_gradient_cosines(
    pretrained: &Model,
    test_set: &Dataset,
    domains: &[DomainSpec],
    grids: &SeverityGrids,
    config: &AdaptationConfig,
    batches_per_domain: usize,
    seed: u64,
) -> Result<GradientCosineMatrix> {
    if domains.len() < 2 {
        return Err(Error::Config(
            "gradient-cosine analysis needs at least 2 domains".into(),
        ));
    }
    let paths = pretrained.trainable_paths(Strategy::Tent.scope());
    let mut displacements = Vec::with_capacity(domains.len());
    for (i, domain) in domains.iter().enumerate() {
        let stream = bench::compose_stream(
            bench::Protocol::Single,
            test_set,
            core::slice::from_ref(domain),
            grids,
            config.batch_size,
            batches_per_domain,
            rng::derive(seed, &[i as u64]),
        )?;
        let mut model = pretrained.clone();
        let cfg = AdaptationConfig {
            strategy: Strategy::Tent,
            ..config.clone()
        };
        adapt_stream(&stream, &mut model, &cfg)?;
        displacements.push(model.displacement(pretrained, &paths));
    }

    let n = domains.len();
    let mut entries = vec![vec![None; n]; n];
    let mut sum = 0.0;
    let mut pairs = 0usize;
    let mut degenerate = false;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                entries[i][j] = Some(1.0);
                continue;
            }
            match cosine(&displacements[i], &displacements[j]) {
                Some(c) => {
                    entries[i][j] = Some(c);
                    if i > j {
                        sum += c;
                        pairs += 1;
                    }
                }
                None => degenerate = true,
            }
        }
    }
    Ok(GradientCosineMatrix {
        domain_tags: domains.iter().map(|d| d.tag.clone()).collect(),
        entries,
        lower_triangle_mean: if pairs > 0 { sum / pairs as f64 } else { f64::NAN },
        degenerate,
    })
}
