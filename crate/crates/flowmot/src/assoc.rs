//! Probabilistic data association for one sensor update.
//!
//! Three stages per potential object and sensor:
//!
//! 1. [`evaluate_legacy`] builds, per association hypothesis `a` (either
//!    "undetected" `a = 0` or "generated measurement m"), measurement-
//!    conditioned particle blocks and the association evidence `beta(a)`.
//! 2. [`spa_da`] runs sum-product message passing over the bipartite
//!    object/measurement association graph, yielding correction factors
//!    `kappa(a)` for the objects and `iota(m)` for the measurements.
//! 3. [`update_legacy`] combines blocks, evidence, and corrections into the
//!    posterior existence probability and mixture belief.
//!
//! The blocks are stratified importance samples: block `a` holds particles
//! from the hypothesis-`a` proposal with ratios `prior/q`. The update mixes
//! the blocks with the convex weights `p(a|z)` so each block contributes an
//! unbiased estimate of the same posterior integral.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::SVector;
use rand::Rng;

use crate::error::{Error, Result};
use crate::flow::{gaussian_representation_pooled, LambdaSchedule};
use crate::gmm::{resample_kernels, KernelGroup, WeightedKernelSet};
use crate::measurement::MeasurementModel;
use crate::model::{GmmBelief, KernelChol, StateVector};
use crate::proposal::{propose, ProposalMethod, UtParams};

/// Scalar Gaussian likelihood evaluated from a cached predicted measurement.
/// Exponents large enough to underflow `exp` are short-circuited to zero.
pub(crate) struct ScalarLik {
    inv_var: f64,
    norm: f64,
}

impl ScalarLik {
    pub(crate) fn new<M: MeasurementModel<1>>(model: &M) -> Self {
        let var = model.noise_cov()[(0, 0)];
        Self {
            inv_var: 1.0 / var,
            norm: 1.0 / (2.0 * std::f64::consts::PI * var).sqrt(),
        }
    }

    #[inline]
    pub(crate) fn eval(&self, innovation: f64) -> f64 {
        let t = 0.5 * innovation * innovation * self.inv_var;
        if t > 746.0 {
            0.0
        } else {
            self.norm * (-t).exp()
        }
    }
}

/// Fixed-point tolerance (max-norm on messages) for [`spa_da`].
pub const SPA_TOLERANCE: f64 = 1e-6;
/// Iteration cap for [`spa_da`].
pub const SPA_MAX_ITERS: usize = 200;

/// Tuning shared by [`evaluate_legacy`] and [`update_legacy`].
#[derive(Debug, Clone)]
pub struct AssocParams<'a> {
    /// Detection probability.
    pub p_d: f64,
    /// Mean number of false positives per sensor scan.
    pub mu_fp: f64,
    /// False-positive density at any feasible measurement (uniform clutter).
    pub fp_density: f64,
    /// Particles per kernel and hypothesis.
    pub n_particles: usize,
    pub schedule: &'a LambdaSchedule,
    pub method: ProposalMethod,
    pub ut: UtParams,
    /// Rectangular gate factor `g`: hypotheses with
    /// `|z - h(mean)| > g * sqrt(H P H' + R)` for every kernel are skipped
    /// (`beta(m) = 0`). `None` disables gating.
    pub gate: Option<f64>,
    /// Whether the final particle weights include the association
    /// corrections `kappa` in the measurement factor (the marginalization-
    /// consistent choice) or omit them.
    pub weight_with_kappa: bool,
}

/// One kernel's particles and importance weights under one hypothesis.
/// `omega` carries the `existence / n_particles` prior factor; `preds`
/// caches each particle's predicted measurement so later reweighting never
/// re-evaluates the measurement function. Both are shared: the prior
/// proposal hands the same unmoved set to every hypothesis.
#[derive(Debug, Clone)]
pub struct KernelBlock {
    pub particles: Arc<Vec<StateVector>>,
    pub preds: Arc<Vec<f64>>,
    pub omega: Arc<Vec<f64>>,
}

/// Output of [`evaluate_legacy`]: association evidence and the per-hypothesis
/// particle blocks. `blocks[a]` is `None` for gated-out measurements.
#[derive(Debug)]
pub struct EvaluationBlocks {
    /// `beta(a)`, `a = 0 ..= M`. `beta(0)` already includes the
    /// nonexistence mass: `(1 - p_d) p + (1 - p)`.
    pub beta: Vec<f64>,
    /// Per hypothesis, per kernel: particles and weights.
    pub blocks: Vec<Option<Vec<KernelBlock>>>,
    /// Prior existence this evaluation was run with.
    pub existence: f64,
}

/// Evaluate one legacy potential object against all measurements of a scan.
pub fn evaluate_legacy<M: MeasurementModel<1>, R: Rng + ?Sized>(
    belief: &GmmBelief,
    existence: f64,
    zs: &[f64],
    model: &M,
    params: &AssocParams<'_>,
    rng: &mut R,
) -> Result<EvaluationBlocks> {
    let n_k = belief.kernels.len();
    if n_k == 0 {
        return Err(Error::InvalidArgument("belief has no kernels".into()));
    }
    let p = existence;
    let n_p = params.n_particles;
    let m_count = zs.len();

    let chols: Vec<KernelChol> = belief
        .kernels
        .iter()
        .map(KernelChol::new)
        .collect::<Result<_>>()?;
    let x0: Vec<Arc<Vec<StateVector>>> = chols
        .iter()
        .map(|c| Arc::new((0..n_p).map(|_| c.sample(rng)).collect()))
        .collect();
    let lik = ScalarLik::new(model);
    let x0_preds: Vec<Arc<Vec<f64>>> = x0
        .iter()
        .map(|particles| {
            Ok(Arc::new(
                particles
                    .iter()
                    .map(|x| Ok(model.predict(x)?[0]))
                    .collect::<Result<Vec<f64>>>()?,
            ))
        })
        .collect::<Result<_>>()?;

    // Gate: a measurement survives if at least one kernel predicts it within
    // g innovation standard deviations; kernels failing their own check are
    // skipped for that measurement (empty block, zero evidence).
    let kernel_windows: Option<Vec<(f64, f64)>> = match params.gate {
        None => None,
        Some(g) => Some(
            belief
                .kernels
                .iter()
                .map(|kernel| {
                    let pred = model.predict(&kernel.mean)?[0];
                    let h = model.jacobian(&kernel.mean)?;
                    let s = (h * kernel.cov * h.transpose())[(0, 0)]
                        + model.noise_cov()[(0, 0)];
                    Ok((pred, g * s.max(0.0).sqrt()))
                })
                .collect::<Result<_>>()?,
        ),
    };
    let kernel_in_gate = |z: f64, h_idx: usize| -> bool {
        match &kernel_windows {
            None => true,
            Some(w) => {
                let (pred, half) = w[h_idx];
                (z - pred).abs() <= half
            }
        }
    };

    let mut beta = vec![0.0; m_count + 1];
    beta[0] = (1.0 - params.p_d) * p + (1.0 - p);
    let mut blocks: Vec<Option<Vec<KernelBlock>>> = Vec::with_capacity(m_count + 1);

    // Hypothesis a = 0: unmoved particles, uniform weights. Proposals that
    // return the particles unmoved with unit ratios (the prior proposal and
    // numeric fallbacks) produce this exact block, so it is shared.
    let uniform_omega = Arc::new(vec![p / n_p as f64; n_p]);
    let unmoved_blocks: Vec<KernelBlock> = x0
        .iter()
        .zip(&x0_preds)
        .map(|(particles, preds)| KernelBlock {
            particles: Arc::clone(particles),
            preds: Arc::clone(preds),
            omega: Arc::clone(&uniform_omega),
        })
        .collect();
    blocks.push(Some(unmoved_blocks.clone()));

    let empty_block = || KernelBlock {
        particles: Arc::new(Vec::new()),
        preds: Arc::new(Vec::new()),
        omega: Arc::new(Vec::new()),
    };
    for (m_idx, &z) in zs.iter().enumerate() {
        if !(0..n_k).any(|h| kernel_in_gate(z, h)) {
            blocks.push(None);
            continue;
        }
        let zv = SVector::<f64, 1>::new(z);
        let mut kernel_blocks = Vec::with_capacity(n_k);
        let mut evidence = 0.0;
        for (h_idx, kernel) in belief.kernels.iter().enumerate() {
            if !kernel_in_gate(z, h_idx) {
                kernel_blocks.push(empty_block());
                continue;
            }
            let hyp = propose(
                kernel,
                &chols[h_idx],
                &x0[h_idx],
                &zv,
                model,
                params.schedule,
                params.method,
                &params.ut,
                rng,
            )?;
            if Arc::ptr_eq(&hyp.particles, &x0[h_idx])
                && hyp.prior_ratio.iter().all(|r| *r == 1.0)
            {
                let w = p / n_p as f64;
                for pred in x0_preds[h_idx].iter() {
                    evidence += w * lik.eval(z - pred);
                }
                kernel_blocks.push(unmoved_blocks[h_idx].clone());
                continue;
            }
            let preds = Arc::new(
                hyp.particles
                    .iter()
                    .map(|x| Ok(model.predict(x)?[0]))
                    .collect::<Result<Vec<f64>>>()?,
            );
            let mut omega = Vec::with_capacity(n_p);
            for (pred, ratio) in preds.iter().zip(&hyp.prior_ratio) {
                let w = ratio * p / n_p as f64;
                evidence += w * lik.eval(z - pred);
                omega.push(w);
            }
            kernel_blocks.push(KernelBlock {
                particles: hyp.particles,
                preds,
                omega: Arc::new(omega),
            });
        }
        beta[m_idx + 1] =
            params.p_d / (params.mu_fp * params.fp_density * n_k as f64) * evidence;
        blocks.push(Some(kernel_blocks));
    }

    Ok(EvaluationBlocks {
        beta,
        blocks,
        existence: p,
    })
}

/// Converged (or last-iterate) association messages.
#[derive(Debug, Clone)]
pub struct AssocMessages {
    /// `kappa[j][a]`: correction for object `j`, hypothesis `a = 0 ..= M`.
    /// `kappa[j][0] = 1`.
    pub kappa: Vec<Vec<f64>>,
    /// `iota[m]`: correction for the new potential object seeded by
    /// measurement `m`.
    pub iota: Vec<f64>,
    /// Whether the fixed point converged within the iteration cap. When
    /// false, the fields hold the last iterate and the caller proceeds with
    /// it.
    pub converged: bool,
    pub iterations: usize,
}

/// Sum-product message passing on the association graph.
///
/// * `betas[j]` is object `j`'s evidence vector `beta_j(0 ..= M)`.
/// * `xis[m]` is measurement `m`'s new-object-or-clutter evidence `xi_m`.
///
/// Messages `nu_{m->j}` start at 1; each sweep recomputes
/// `phi_{j->m} = beta_j(m) / (beta_j(0) + sum_{m' != m} beta_j(m') nu_{m'->j})`
/// and `nu_{m->j} = 1 / (xi_m + sum_{j' != j} phi_{j'->m})` until the
/// messages move less than `tol` in max-norm.
pub fn spa_da(betas: &[Vec<f64>], xis: &[f64], tol: f64, max_iters: usize) -> AssocMessages {
    let n_obj = betas.len();
    let m_count = xis.len();

    let mut nu = vec![vec![1.0; n_obj]; m_count];
    let mut phi = vec![vec![0.0; m_count]; n_obj];
    let mut converged = false;
    let mut iterations = 0;

    for it in 0..max_iters {
        iterations = it + 1;
        for (j, beta) in betas.iter().enumerate() {
            // Total of beta(m') nu_{m'->j} so each exclusion is O(1).
            let mut total = beta[0];
            for m in 0..m_count {
                total += beta[m + 1] * nu[m][j];
            }
            for m in 0..m_count {
                let denom = total - beta[m + 1] * nu[m][j];
                phi[j][m] = if denom > 0.0 { beta[m + 1] / denom } else { 0.0 };
            }
        }
        let mut delta: f64 = 0.0;
        for m in 0..m_count {
            let mut total = xis[m];
            for j in 0..n_obj {
                total += phi[j][m];
            }
            for j in 0..n_obj {
                let denom = total - phi[j][m];
                let new = if denom > 0.0 { 1.0 / denom } else { 0.0 };
                delta = delta.max((new - nu[m][j]).abs());
                nu[m][j] = new;
            }
        }
        if delta < tol {
            converged = true;
            break;
        }
    }
    if max_iters == 0 {
        iterations = 0;
    }

    let kappa = (0..n_obj)
        .map(|j| {
            let mut k = Vec::with_capacity(m_count + 1);
            k.push(1.0);
            for m in 0..m_count {
                k.push(nu[m][j]);
            }
            k
        })
        .collect();
    let iota = (0..m_count)
        .map(|m| {
            let mut total = 1.0;
            for j in 0..n_obj {
                total += phi[j][m];
            }
            1.0 / total
        })
        .collect();

    AssocMessages {
        kappa,
        iota,
        converged,
        iterations,
    }
}

/// Exact association marginals by enumerating all joint association events.
///
/// Exponential in the number of objects; this is the reference oracle the
/// message passing is validated against, not something to run in a tracker.
/// Returns, per object, the normalized marginal over `a = 0 ..= M`, plus per
/// measurement the probability that no object claims it.
pub fn enumerate_association_marginals(
    betas: &[Vec<f64>],
    xis: &[f64],
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let n_obj = betas.len();
    let m_count = xis.len();
    assert!(m_count < 64, "enumeration oracle limited to < 64 measurements");

    let mut marginals = vec![vec![0.0; m_count + 1]; n_obj];
    let mut unclaimed = vec![0.0; m_count];
    let mut total = 0.0;

    // Depth-first over objects; `used` is a bitmask of claimed measurements.
    fn recurse(
        j: usize,
        used: u64,
        weight: f64,
        betas: &[Vec<f64>],
        xis: &[f64],
        assignment: &mut Vec<usize>,
        total: &mut f64,
        marginals: &mut [Vec<f64>],
        unclaimed: &mut [f64],
    ) {
        if j == betas.len() {
            // Unclaimed measurements contribute their own evidence factor.
            let mut w = weight;
            for (m, xi) in xis.iter().enumerate() {
                if used & (1 << m) == 0 {
                    w *= xi;
                }
            }
            *total += w;
            for (jj, &a) in assignment.iter().enumerate() {
                marginals[jj][a] += w;
            }
            for m in 0..xis.len() {
                if used & (1 << m) == 0 {
                    unclaimed[m] += w;
                }
            }
            return;
        }
        for a in 0..=xis.len() {
            if a > 0 && used & (1 << (a - 1)) != 0 {
                continue;
            }
            let mask = if a > 0 { used | (1 << (a - 1)) } else { used };
            assignment.push(a);
            recurse(
                j + 1,
                mask,
                weight * betas[j][a],
                betas,
                xis,
                assignment,
                total,
                marginals,
                unclaimed,
            );
            assignment.pop();
        }
    }

    let mut assignment = Vec::new();
    recurse(
        0,
        0,
        1.0,
        betas,
        xis,
        &mut assignment,
        &mut total,
        &mut marginals,
        &mut unclaimed,
    );

    for row in &mut marginals {
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    for v in &mut unclaimed {
        *v /= total;
    }
    (marginals, unclaimed)
}

/// Combine evaluation blocks and association corrections into the posterior
/// existence and belief of one legacy potential object.
///
/// `prior_belief` is returned unchanged (with existence 0) if every weight
/// degenerates to zero.
pub fn update_legacy<M: MeasurementModel<1>, R: Rng + ?Sized>(
    eval: &EvaluationBlocks,
    kappa: &[f64],
    zs: &[f64],
    model: &M,
    params: &AssocParams<'_>,
    prior_belief: &GmmBelief,
    n_kernels_out: usize,
    rng: &mut R,
) -> Result<(GmmBelief, f64)> {
    let m_count = zs.len();
    if eval.beta.len() != m_count + 1 || kappa.len() != m_count + 1 {
        return Err(Error::InvalidArgument(
            "beta/kappa must have M + 1 entries".into(),
        ));
    }
    let n_k = prior_belief.kernels.len();
    let p = eval.existence;

    // Hypothesis posteriors p(a | z) from corrected evidence.
    let mut bk: Vec<f64> = eval
        .beta
        .iter()
        .zip(kappa)
        .map(|(b, k)| b * k)
        .collect();
    let bk_total: f64 = bk.iter().sum();
    if !(bk_total > 0.0) || !bk_total.is_finite() {
        return Ok((prior_belief.clone(), 0.0));
    }
    for v in &mut bk {
        *v /= bk_total;
    }

    let lik = ScalarLik::new(model);
    // Measurement values for in-gate hypotheses; gated-out measurements are
    // treated as unexplainable by this object.
    let z_in: Vec<Option<f64>> = (0..m_count)
        .map(|m| eval.blocks[m + 1].as_ref().map(|_| zs[m]))
        .collect();
    let fp_term = params.mu_fp * params.fp_density;
    let coef0 = if params.weight_with_kappa { kappa[0] } else { 1.0 };
    // The measurement factor gamma depends only on the particle, not on the
    // kernel or hypothesis it sits in, so shared particle sets (the prior
    // proposal reuses one set for every hypothesis) are evaluated once.
    let mut gamma_cache: HashMap<usize, Arc<Vec<f64>>> = HashMap::new();
    let gamma_for = |block: &KernelBlock, cache: &mut HashMap<usize, Arc<Vec<f64>>>| {
        let key = Arc::as_ptr(&block.particles) as usize;
        if let Some(v) = cache.get(&key) {
            return Arc::clone(v);
        }
        let v: Vec<f64> = block
            .preds
            .iter()
            .map(|&pred| {
                let mut g = (1.0 - params.p_d) * coef0;
                for (m, z) in z_in.iter().enumerate() {
                    if let Some(z) = z {
                        let coef = if params.weight_with_kappa {
                            kappa[m + 1]
                        } else {
                            1.0
                        };
                        if coef > 0.0 {
                            g += coef * params.p_d * lik.eval(z - pred) / fp_term;
                        }
                    }
                }
                g
            })
            .collect();
        let v = Arc::new(v);
        cache.insert(key, Arc::clone(&v));
        v
    };

    // Per kernel: reweight all block particles and moment-match.
    let mut reps = Vec::with_capacity(n_k);
    let mut groups: Vec<KernelGroup> = Vec::new();
    let mut grand_total = 0.0;
    for h in 0..n_k {
        let mut kernel_groups: Vec<KernelGroup> = Vec::new();
        let mut total = 0.0;
        for (a, block) in eval.blocks.iter().enumerate() {
            let Some(kernels) = block else { continue };
            if bk[a] == 0.0 {
                continue;
            }
            let kb = &kernels[h];
            if kb.omega.is_empty() {
                continue;
            }
            let gamma = gamma_for(kb, &mut gamma_cache);
            let mut weights = Vec::with_capacity(kb.omega.len());
            for (g, omega) in gamma.iter().zip(kb.omega.iter()) {
                let w = g * omega * bk[a];
                total += w;
                weights.push(w);
            }
            // Hypotheses sharing one particle set (the prior proposal
            // reuses the unmoved set) fold into a single group by summing
            // weights, so moment matching and resampling see each particle
            // once.
            if let Some(g) = kernel_groups
                .iter_mut()
                .find(|g| Arc::ptr_eq(&g.particles, &kb.particles))
            {
                for (dst, w) in g.weights.iter_mut().zip(&weights) {
                    *dst += *w;
                }
            } else {
                kernel_groups.push(KernelGroup {
                    kernel: h,
                    particles: Arc::clone(&kb.particles),
                    weights,
                });
            }
        }
        grand_total += total;
        if total > 0.0 && total.is_finite() {
            let pooled: Vec<(&[StateVector], &[f64])> = kernel_groups
                .iter()
                .map(|g| (g.particles.as_slice(), g.weights.as_slice()))
                .collect();
            reps.push(gaussian_representation_pooled(&pooled)?);
            groups.extend(kernel_groups);
        } else {
            // A kernel with no surviving mass keeps its prior shape but
            // contributes nothing to the resampling pool.
            reps.push(prior_belief.kernels[h].clone());
            groups.push(KernelGroup {
                kernel: h,
                particles: Arc::new(vec![prior_belief.kernels[h].mean]),
                weights: vec![0.0],
            });
        }
    }

    if !(grand_total > 0.0) || !grand_total.is_finite() {
        return Ok((prior_belief.clone(), 0.0));
    }

    // Existence: normalized detected/undetected mass against the
    // nonexistence alternative.
    let s = grand_total / n_k as f64;
    let existence = s / (s + (1.0 - p) * kappa[0]);

    let belief = resample_kernels(
        &WeightedKernelSet {
            kernels: reps,
            groups,
        },
        n_kernels_out,
        rng,
    )?;
    Ok((belief, existence))
}

/// Single-object convenience wrapper: evaluate against all measurements and
/// update with no association competition (`kappa = 1`), as in a Bernoulli
/// filter with clutter.
pub fn single_object_update<M: MeasurementModel<1>, R: Rng + ?Sized>(
    belief: &GmmBelief,
    existence: f64,
    zs: &[f64],
    model: &M,
    params: &AssocParams<'_>,
    n_kernels_out: usize,
    rng: &mut R,
) -> Result<(GmmBelief, f64)> {
    let eval = evaluate_legacy(belief, existence, zs, model, params, rng)?;
    let kappa = vec![1.0; zs.len() + 1];
    update_legacy(&eval, &kappa, zs, model, params, belief, n_kernels_out, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::LambdaSchedule;
    use crate::measurement::LinearModel;
    use crate::model::{Covariance, GaussianKernel};
    use approx::assert_relative_eq;
    use nalgebra::SMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn scalar_model(r: f64) -> LinearModel<1> {
        LinearModel {
            h: SMatrix::<f64, 1, 6>::new(1.0, 0.0, 0.0, 0.0, 0.0, 0.0),
            r: SMatrix::<f64, 1, 1>::new(r),
        }
    }

    fn unit_belief() -> GmmBelief {
        GmmBelief {
            kernels: vec![GaussianKernel {
                mean: StateVector::zeros(),
                cov: Covariance::identity(),
            }],
        }
    }

    fn params<'a>(schedule: &'a LambdaSchedule, n_particles: usize) -> AssocParams<'a> {
        AssocParams {
            p_d: 0.85,
            mu_fp: 2.0,
            fp_density: 0.25,
            n_particles,
            schedule,
            method: ProposalMethod::Flow,
            ut: UtParams::default(),
            gate: None,
            weight_with_kappa: true,
        }
    }

    #[test]
    fn beta_zero_reference_value() {
        // p = 1, p_d = 0.85: beta(0) = 0.15.
        let schedule = LambdaSchedule::geometric(20, 1.2).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let model = scalar_model(1.0);
        let eval = evaluate_legacy(
            &unit_belief(),
            1.0,
            &[],
            &model,
            &params(&schedule, 10),
            &mut rng,
        )
        .unwrap();
        assert_relative_eq!(eval.beta[0], 0.15, epsilon = 1e-12);
    }

    #[test]
    fn missed_detection_existence_is_exact() {
        // With no measurements the update is deterministic:
        // p' = p (1 - p_d) / (p (1 - p_d) + (1 - p)).
        let schedule = LambdaSchedule::geometric(20, 1.2).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let model = scalar_model(1.0);
        let belief = unit_belief();
        let pars = params(&schedule, 50);
        let p = 0.6;
        let (post_belief, existence) =
            single_object_update(&belief, p, &[], &model, &pars, 1, &mut rng).unwrap();
        let expected = p * 0.15 / (p * 0.15 + (1.0 - p));
        assert_relative_eq!(existence, expected, epsilon = 1e-12);
        assert_eq!(post_belief.kernels.len(), 1);
    }

    #[test]
    fn bernoulli_consistency_single_measurement() {
        // One object, one measurement, scalar linear model: the pipeline
        // must reproduce the analytic Bernoulli-filter posterior existence
        // and the mixture posterior mean.
        let schedule = LambdaSchedule::geometric(20, 1.2).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let model = scalar_model(1.0);
        let belief = unit_belief();
        let pars = params(&schedule, 20_000);
        let p = 0.6;
        let z = 1.0;

        // Many output kernels: each kernel mean is one posterior draw, so
        // their average estimates the posterior mean.
        let (post, existence) =
            single_object_update(&belief, p, &[z], &model, &pars, 1000, &mut rng).unwrap();

        // Analytic: evidence Z = N(1; 0, 2); detected mass c1 =
        // p_d Z / (mu_fp f_fp); undetected c0 = 1 - p_d.
        let zev = (-0.25f64).exp() / (4.0 * std::f64::consts::PI).sqrt();
        let c0 = 0.15;
        let c1 = 0.85 * zev / (2.0 * 0.25);
        let expected_existence = p * (c0 + c1) / (p * (c0 + c1) + (1.0 - p));
        assert!(
            (existence - expected_existence).abs() / expected_existence < 0.02,
            "existence {existence} vs {expected_existence}"
        );

        // Posterior mean in the measured coordinate: mixture of prior mean 0
        // (weight c0) and Kalman mean 0.5 (weight c1).
        let expected_mean = (c0 * 0.0 + c1 * 0.5) / (c0 + c1);
        let got =
            post.kernels.iter().map(|k| k.mean[0]).sum::<f64>() / post.kernels.len() as f64;
        assert!(
            (got - expected_mean).abs() < 0.1,
            "mean {got} vs {expected_mean}"
        );
    }

    #[test]
    fn spa_matches_enumeration_on_single_object_tree() {
        let betas = vec![vec![0.5, 0.3, 0.8, 0.1]];
        let xis = vec![1.4, 2.0, 1.1];
        let msg = spa_da(&betas, &xis, 1e-12, 500);
        assert!(msg.converged);
        let (exact, unclaimed) = enumerate_association_marginals(&betas, &xis);
        // p(a) from beta(a) kappa(a), normalized.
        let mut approx: Vec<f64> = betas[0]
            .iter()
            .zip(&msg.kappa[0])
            .map(|(b, k)| b * k)
            .collect();
        let total: f64 = approx.iter().sum();
        for v in &mut approx {
            *v /= total;
        }
        for (a, e) in approx.iter().zip(&exact[0]) {
            assert_relative_eq!(a, e, epsilon = 1e-10);
        }
        // New-object message: (xi - 1) iota / ((xi - 1) iota + 1) should
        // match the exact unclaimed-and-new probability on trees.
        for m in 0..3 {
            let spa_new = (xis[m] - 1.0) * msg.iota[m] / ((xis[m] - 1.0) * msg.iota[m] + 1.0);
            let exact_new = unclaimed[m] * (xis[m] - 1.0) / xis[m];
            assert_relative_eq!(spa_new, exact_new, epsilon = 1e-9);
        }
    }

    #[test]
    fn spa_matches_enumeration_on_single_measurement_tree() {
        let betas = vec![
            vec![0.7, 0.4],
            vec![0.2, 0.9],
            vec![1.1, 0.3],
        ];
        let xis = vec![1.7];
        let msg = spa_da(&betas, &xis, 1e-13, 1000);
        assert!(msg.converged);
        let (exact, _) = enumerate_association_marginals(&betas, &xis);
        for j in 0..3 {
            let mut approx: Vec<f64> = betas[j]
                .iter()
                .zip(&msg.kappa[j])
                .map(|(b, k)| b * k)
                .collect();
            let total: f64 = approx.iter().sum();
            for v in &mut approx {
                *v /= total;
            }
            for (a, e) in approx.iter().zip(&exact[j]) {
                assert_relative_eq!(a, e, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn spa_loopy_close_to_enumeration() {
        let betas = vec![vec![0.5, 0.6, 0.2], vec![0.4, 0.3, 0.7]];
        let xis = vec![1.3, 1.6];
        let msg = spa_da(&betas, &xis, 1e-10, 500);
        assert!(msg.converged);
        let (exact, _) = enumerate_association_marginals(&betas, &xis);
        for j in 0..2 {
            let mut approx: Vec<f64> = betas[j]
                .iter()
                .zip(&msg.kappa[j])
                .map(|(b, k)| b * k)
                .collect();
            let total: f64 = approx.iter().sum();
            for v in &mut approx {
                *v /= total;
            }
            for (a, e) in approx.iter().zip(&exact[j]) {
                assert!((a - e).abs() / e.max(1e-12) < 0.15, "{a} vs {e}");
            }
        }
    }

    #[test]
    fn spa_reports_nonconvergence() {
        let betas = vec![vec![0.5, 0.6, 0.2], vec![0.4, 0.3, 0.7]];
        let xis = vec![1.3, 1.6];
        let msg = spa_da(&betas, &xis, 0.0, 2);
        assert!(!msg.converged);
        assert_eq!(msg.iterations, 2);
        // Last iterate is still usable.
        assert!(msg.kappa[0].iter().all(|k| k.is_finite()));
    }

    #[test]
    fn gating_zeroes_far_measurements() {
        let schedule = LambdaSchedule::geometric(10, 1.2).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let model = scalar_model(1.0);
        let mut pars = params(&schedule, 20);
        pars.gate = Some(5.0);
        // Innovation std is sqrt(2); 100 is far outside the gate.
        let eval = evaluate_legacy(&unit_belief(), 0.9, &[100.0, 0.5], &model, &pars, &mut rng)
            .unwrap();
        assert_eq!(eval.beta[1], 0.0);
        assert!(eval.blocks[1].is_none());
        assert!(eval.beta[2] > 0.0);
    }
}
