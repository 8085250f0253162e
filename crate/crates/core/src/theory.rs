//! Derived convergence constants, optimal-probability closed forms, and the
//! brute-force oracles that validate them.
//!
//! The expected-smoothness constants (gamma, delta) bound the second moment
//! of the step estimator: E||G(x)||^2 <= 4*gamma*(F(x) - F(x*)) + delta.
//! They drive the strongly convex rate (contraction 1 - eta*mu/n down to a
//! delta-neighborhood) and the nonconvex iteration budget. The closed-form
//! minimizers of gamma (iteration count) and C = p(1-p)*gamma (communication
//! rounds) are cross-checked against dense grid searches.

use ndarray::Array1;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::compressors::{joint_variance_factor, variance_factor, CompressorKind};
use crate::engine::compressed_round;
use crate::error::{Error, Result};
use crate::objective::{Objective, SmoothnessConstants, StackedModel};
use crate::rng::{client_stream, StreamFactory, MASTER_STREAM};

/// alpha = 4 (4 omega + 4 omega_M (1 + omega)) / mu.
pub fn alpha(omega: f64, omega_m: f64, mu: f64) -> f64 {
    let numerator = 4.0 * (4.0 * omega + 4.0 * omega_m * (1.0 + omega));
    if numerator == 0.0 {
        0.0
    } else {
        numerator / mu
    }
}

fn check_p(p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("p must lie in (0, 1); got {p}")))
    }
}

/// Expected-smoothness gamma:
/// alpha lambda^2 (1-p) / (2 n^2 p) + max{ L_f/(1-p), (lambda/n)(1 + 4(1-p)/p) }.
pub fn gamma(p: f64, lambda: f64, n: usize, l_f: f64, alpha: f64) -> Result<f64> {
    check_p(p)?;
    let nf = n as f64;
    let first = alpha * lambda * lambda * (1.0 - p) / (2.0 * nf * nf * p);
    let smooth = l_f / (1.0 - p);
    let penalty = lambda / nf * (1.0 + 4.0 * (1.0 - p) / p);
    Ok(first + smooth.max(penalty))
}

/// Upper relaxation gamma_u with the penalty branch simplified to 4 lambda/(np).
pub fn gamma_upper(p: f64, lambda: f64, n: usize, l_f: f64, alpha: f64) -> Result<f64> {
    check_p(p)?;
    let nf = n as f64;
    let first = alpha * lambda * lambda * (1.0 - p) / (2.0 * nf * nf * p);
    Ok(first + (l_f / (1.0 - p)).max(4.0 * lambda / (nf * p)))
}

/// Without compression the factor 4 drops and gamma reduces to
/// max{ L/(n(1-p)), lambda/(np) }.
pub fn gamma_no_compression(p: f64, lambda: f64, n: usize, l_f: f64) -> Result<f64> {
    check_p(p)?;
    let nf = n as f64;
    Ok((l_f / (1.0 - p)).max(lambda / (nf * p)))
}

/// delta = 2 beta lambda^2 (1-p) / (n^2 p) + 2 E||G(x*)||^2.
pub fn delta(beta: f64, lambda: f64, n: usize, p: f64, e_g_star_sq: f64) -> f64 {
    let nf = n as f64;
    2.0 * beta * lambda * lambda * (1.0 - p) / (nf * nf * p) + 2.0 * e_g_star_sq
}

/// A Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MonteCarloEstimate {
    pub value: f64,
    pub std_error: f64,
    pub samples: usize,
}

impl MonteCarloEstimate {
    fn exact(value: f64) -> Self {
        MonteCarloEstimate {
            value,
            std_error: 0.0,
            samples: 0,
        }
    }
}

fn mean_and_se(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    if samples.len() < 2 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|&v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// beta = 2 (4 omega + 4 omega_M (1+omega)) ||x*||^2
///        + 4 E|| Q C_M(ybar*) - Q xbar* ||^2.
/// The first term is exact from the certificates; the second is Monte-Carlo
/// (it equals 4 n E||C_M(ybar*) - xbar*||^2 since Q stacks n copies).
pub fn beta_estimate(
    x_star: &StackedModel,
    clients: &[CompressorKind],
    master: &CompressorKind,
    samples: usize,
    seed: u64,
) -> Result<MonteCarloEstimate> {
    let d = x_star.d();
    let n = x_star.n();
    let omega = joint_variance_factor(clients, d)?;
    let omega_m = variance_factor(master, d)?;
    let exact_term = 2.0 * (4.0 * omega + 4.0 * omega_m * (1.0 + omega)) * x_star.sq_norm();
    if omega == 0.0 && omega_m == 0.0 {
        // Identity everywhere: C_M(ybar*) = xbar* deterministically.
        return Ok(MonteCarloEstimate::exact(exact_term));
    }
    let factory = StreamFactory::new(seed);
    let mut client_rngs: Vec<ChaCha8Rng> =
        (0..n).map(|i| factory.stream(client_stream(i))).collect();
    let mut master_rng = factory.stream(MASTER_STREAM);
    let avg = x_star.average();
    let mut draws = Vec::with_capacity(samples);
    for _ in 0..samples {
        let (target, _, _) =
            compressed_round(x_star, clients, master, &mut client_rngs, &mut master_rng)?;
        let diff = &target - &avg;
        draws.push(4.0 * n as f64 * diff.dot(&diff));
    }
    let (mean, se) = mean_and_se(&draws);
    Ok(MonteCarloEstimate {
        value: exact_term + mean,
        std_error: se,
        samples,
    })
}

/// E||G(x*)||^2 over the stationary two-step coin distribution
/// (xi_k, xi_{k-1} independent Bernoulli(p)) and the compressor randomness.
/// The xi=0 and (1,1) branches are deterministic and computed exactly; only
/// the communicating branch is sampled.
pub fn grad_norm_sq_at_optimum(
    obj: &impl Objective,
    x_star: &StackedModel,
    p: f64,
    clients: &[CompressorKind],
    master: &CompressorKind,
    samples: usize,
    seed: u64,
) -> Result<MonteCarloEstimate> {
    check_p(p)?;
    let n = x_star.n();
    let nf = n as f64;
    let local_branch: f64 = (0..n)
        .map(|i| {
            let g = obj.local_gradient(i, x_star.block(i));
            g.dot(&g)
        })
        .sum::<f64>()
        / (nf * nf * (1.0 - p) * (1.0 - p));
    let coeff = obj.lambda() / (nf * p);
    let avg = x_star.average();
    let stay_branch: f64 = (0..n)
        .map(|i| {
            let diff = &x_star.block(i) - &avg;
            coeff * coeff * diff.dot(&diff)
        })
        .sum();

    let factory = StreamFactory::new(seed);
    let mut client_rngs: Vec<ChaCha8Rng> =
        (0..n).map(|i| factory.stream(client_stream(i))).collect();
    let mut master_rng = factory.stream(MASTER_STREAM);
    let mut draws = Vec::with_capacity(samples);
    for _ in 0..samples {
        let (target, _, _) =
            compressed_round(x_star, clients, master, &mut client_rngs, &mut master_rng)?;
        let mut norm_sq = 0.0;
        for i in 0..n {
            let diff = &x_star.block(i) - &target;
            norm_sq += coeff * coeff * diff.dot(&diff);
        }
        draws.push(norm_sq);
    }
    let (comm_mean, comm_se) = mean_and_se(&draws);
    Ok(MonteCarloEstimate {
        value: (1.0 - p) * local_branch + p * (1.0 - p) * comm_mean + p * p * stay_branch,
        std_error: p * (1.0 - p) * comm_se,
        samples,
    })
}

/// Right-hand side of the strongly convex rate at iteration k:
/// (1 - eta mu / n)^k ||x0 - x*||^2 + n eta delta / mu.
pub fn strongly_convex_bound(
    k: usize,
    dist0_sq: f64,
    eta: f64,
    mu: f64,
    n: usize,
    delta: f64,
) -> f64 {
    let nf = n as f64;
    (1.0 - eta * mu / nf).powi(k as i32) * dist0_sq + nf * eta * delta / mu
}

/// Stepsize and iteration budget reaching min_k E||grad F(x^k)|| <= epsilon
/// on an L-smooth nonconvex objective:
/// K = ceil((6 L / eps^4) max{12 gamma gap^2, delta}),
/// eta = min{ 1/sqrt(2 L gamma K), eps^2/(L delta) }.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct NonconvexBudget {
    pub eta: f64,
    pub k: usize,
    /// The pre-ceiling budget, exact in the eps^-4 scaling.
    pub k_real: f64,
}

pub fn nonconvex_budget(
    epsilon: f64,
    l: f64,
    gamma: f64,
    delta: f64,
    gap: f64,
) -> NonconvexBudget {
    assert!(epsilon > 0.0 && l > 0.0 && gamma > 0.0);
    let k_real = 6.0 * l / epsilon.powi(4) * (12.0 * gamma * gap * gap).max(delta);
    let k = k_real.ceil().max(1.0) as usize;
    let eta_curvature = 1.0 / (2.0 * l * gamma * k as f64).sqrt();
    let eta = if delta > 0.0 {
        eta_curvature.min(epsilon * epsilon / (l * delta))
    } else {
        eta_curvature
    };
    NonconvexBudget { eta, k, k_real }
}

/// Crossing point of the two gamma branches:
/// p_e = (7 lambda + L - sqrt(lambda^2 + 14 lambda L + L^2)) / (6 lambda),
/// evaluated in the rationalized form 8 lambda / (7 lambda + L + sqrt(...))
/// which is stable for lambda << L. lambda = 0 maps to 0 (no communication).
pub fn p_e_exact(lambda: f64, l: f64) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    let root = (lambda * lambda + 14.0 * lambda * l + l * l).sqrt();
    8.0 * lambda / (7.0 * lambda + l + root)
}

/// Crossing point under the gamma_u relaxation: 4 lambda / (L + 4 lambda).
pub fn p_e_upper(lambda: f64, l: f64) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    4.0 * lambda / (l + 4.0 * lambda)
}

/// An optimal-probability result with the crossing point, the interior
/// branch minimizer when one exists, and any anomalies hit on the way.
#[derive(Debug, Clone, Serialize)]
pub struct OptimalP {
    pub p_star: f64,
    pub p_e: f64,
    pub p_a: Option<f64>,
    pub flags: Vec<String>,
}

const GRID_LO: f64 = 1e-6;
const GRID_HI: f64 = 1.0 - 1e-6;

/// Dense grid minimizer of `f` over (1e-6, 1 - 1e-6).
pub fn grid_minimize(f: impl Fn(f64) -> f64, points: usize) -> (f64, f64) {
    assert!(points >= 2);
    let mut best_p = GRID_LO;
    let mut best_val = f64::INFINITY;
    for i in 0..points {
        let p = GRID_LO + (GRID_HI - GRID_LO) * i as f64 / (points - 1) as f64;
        let val = f(p);
        if val < best_val {
            best_val = val;
            best_p = p;
        }
    }
    (best_p, best_val)
}

pub fn grid_min_gamma(lambda: f64, n: usize, l_f: f64, alpha: f64, points: usize) -> (f64, f64) {
    grid_minimize(|p| gamma(p, lambda, n, l_f, alpha).unwrap(), points)
}

pub fn grid_min_communication(
    lambda: f64,
    n: usize,
    l_f: f64,
    alpha: f64,
    points: usize,
) -> (f64, f64) {
    grid_minimize(
        |p| p * (1.0 - p) * gamma(p, lambda, n, l_f, alpha).unwrap(),
        points,
    )
}

/// Interior minimizer of A(p) = alpha lambda^2/(2 n^2 p) + L/(n(1-p)).
/// Both closed-form roots are evaluated and the one inside (0,1) kept; if
/// neither or both land inside, the grid oracle takes over and the case is
/// flagged.
fn p_a_rate(lambda: f64, l: f64, n: usize, alpha: f64, flags: &mut Vec<String>) -> Option<f64> {
    if alpha <= 0.0 {
        flags.push("alpha = 0: A(p) has no interior minimizer; p* falls back to p_e".into());
        return None;
    }
    let nf = n as f64;
    let discriminant = 2.0 * nf * l - alpha * lambda * lambda;
    if discriminant.abs() <= 1e-12 * (2.0 * nf * l + alpha * lambda * lambda) {
        return Some(0.5);
    }
    let sqrt_term = 2.0 * lambda * (2.0 * alpha * nf * l).sqrt();
    let candidates = [
        (-2.0 * alpha * lambda * lambda + sqrt_term) / (2.0 * discriminant),
        (-2.0 * alpha * lambda * lambda - sqrt_term) / (2.0 * discriminant),
    ];
    let inside: Vec<f64> = candidates
        .into_iter()
        .filter(|p| *p > 0.0 && *p < 1.0)
        .collect();
    match inside.len() {
        1 => Some(inside[0]),
        count => {
            flags.push(format!(
                "{count} closed-form roots of A'(p) inside (0,1); using the grid oracle"
            ));
            let (p, _) = grid_minimize(
                |p| alpha * lambda * lambda / (2.0 * nf * nf * p) + l / (nf * (1.0 - p)),
                100_000,
            );
            Some(p)
        }
    }
}

/// Probability minimizing gamma (iteration count): max{p_e, p_A}.
pub fn optimal_p_rate(lambda: f64, l: f64, n: usize, alpha: f64) -> OptimalP {
    let mut flags = Vec::new();
    let p_e = p_e_exact(lambda, l);
    if lambda == 0.0 {
        flags.push("lambda = 0: optimal strategy is no communication at all".into());
    }
    let p_a = p_a_rate(lambda, l, n, alpha, &mut flags);
    let p_star = p_a.map_or(p_e, |pa| p_e.max(pa));
    if !(p_star > 0.0 && p_star < 1.0) {
        flags.push(format!("p* = {p_star} lies outside (0,1)"));
    }
    OptimalP {
        p_star,
        p_e,
        p_a,
        flags,
    }
}

/// Probability minimizing C = p(1-p) gamma (communication rounds):
/// max{p_e, p_A} with p_A = 1 - L n / (alpha lambda^2).
pub fn optimal_p_communication(lambda: f64, l: f64, n: usize, alpha: f64) -> OptimalP {
    let mut flags = Vec::new();
    let p_e = p_e_exact(lambda, l);
    if lambda == 0.0 {
        flags.push("lambda = 0: optimal strategy is no communication at all".into());
    }
    let p_a = if alpha <= 0.0 || lambda == 0.0 {
        flags.push("alpha = 0: communication p_A undefined; p* falls back to p_e".into());
        None
    } else {
        let pa = 1.0 - l * n as f64 / (alpha * lambda * lambda);
        if pa <= 0.0 {
            flags.push(format!(
                "p_A = {pa:.6} <= 0 (Ln >= alpha lambda^2): communication optimum sits at p_e"
            ));
        }
        Some(pa)
    };
    let p_star = p_a.map_or(p_e, |pa| p_e.max(pa));
    if !(p_star > 0.0 && p_star < 1.0) {
        flags.push(format!("p* = {p_star} lies outside (0,1)"));
    }
    OptimalP {
        p_star,
        p_e,
        p_a,
        flags,
    }
}

/// Checks the recursion bound: given non-negative sequences with
/// p_{k+1} <= (1+a) p_k - b q_k + c for all k, the minimum of q must satisfy
/// min_k q_k <= (1+a)^K/(b K) p_0 + c/b with K = len(q).
pub fn recursion_bound_check(p_seq: &[f64], q_seq: &[f64], a: f64, b: f64, c: f64) -> Result<bool> {
    if !(a >= 0.0 && b > 0.0 && c >= 0.0) {
        return Err(Error::config(format!(
            "recursion needs a >= 0, b > 0, c >= 0; got a={a}, b={b}, c={c}"
        )));
    }
    if q_seq.is_empty() || p_seq.len() != q_seq.len() + 1 {
        return Err(Error::config(
            "recursion needs len(p) = len(q) + 1 with len(q) >= 1",
        ));
    }
    if p_seq.iter().chain(q_seq).any(|&v| v.is_nan() || v < 0.0) {
        return Err(Error::config("recursion sequences must be non-negative"));
    }
    for k in 0..q_seq.len() {
        let rhs = (1.0 + a) * p_seq[k] - b * q_seq[k] + c;
        let scale = 1.0 + p_seq[k].abs() + q_seq[k].abs() + c;
        if p_seq[k + 1] > rhs + 1e-9 * scale {
            return Err(Error::config(format!(
                "recursion precondition violated at k={k}: {} > {rhs}",
                p_seq[k + 1]
            )));
        }
    }
    let k = q_seq.len();
    let bound = (1.0 + a).powi(k as i32) / (b * k as f64) * p_seq[0] + c / b;
    let min_q = q_seq.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(min_q <= bound + 1e-9 * (1.0 + bound.abs()))
}

/// A randomly generated instance that satisfies the recursion precondition
/// by construction.
#[derive(Debug, Clone)]
pub struct RecursionInstance {
    pub p_seq: Vec<f64>,
    pub q_seq: Vec<f64>,
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

pub fn random_recursion_instance(rng: &mut impl Rng, max_len: usize) -> RecursionInstance {
    let a = rng.random::<f64>() * 0.4;
    let b = 0.1 + rng.random::<f64>() * 2.0;
    let c = rng.random::<f64>();
    let len = 1 + rng.random_range(0..max_len);
    let mut p_seq = vec![rng.random::<f64>() * 5.0];
    let mut q_seq = Vec::with_capacity(len);
    for k in 0..len {
        let headroom = (1.0 + a) * p_seq[k] + c;
        let q = rng.random::<f64>() * headroom / b;
        let next_max = (1.0 + a) * p_seq[k] - b * q + c;
        p_seq.push(rng.random::<f64>() * next_max.max(0.0));
        q_seq.push(q);
    }
    RecursionInstance {
        p_seq,
        q_seq,
        a,
        b,
        c,
    }
}

/// Every constant the analysis derives for one configuration, emitted
/// alongside run traces.
#[derive(Debug, Clone, Serialize)]
pub struct TheoryConstants {
    pub n: usize,
    pub d: usize,
    pub p: f64,
    pub lambda: f64,
    pub l_f: f64,
    pub l: f64,
    pub mu: f64,
    pub strongly_convex: bool,
    pub omega: f64,
    pub omega_m: f64,
    pub alpha: f64,
    pub beta: MonteCarloEstimate,
    pub e_g_star_sq: MonteCarloEstimate,
    pub gamma: f64,
    pub gamma_upper: f64,
    /// True when all compressors are identity and the tighter
    /// no-compression gamma applies.
    pub no_compression_form: bool,
    pub delta: f64,
    pub delta_std_error: f64,
    pub eta: f64,
    pub stepsize_bound: f64,
    pub eta_within_bound: bool,
    pub contraction: f64,
    pub neighborhood: f64,
    pub p_e: f64,
    pub p_e_upper: f64,
    pub rate: OptimalP,
    pub communication: OptimalP,
    pub minimizer_gradient_norm: f64,
    pub flags: Vec<String>,
}

/// Sampling parameters for the Monte-Carlo constants.
#[derive(Debug, Clone, Copy)]
pub struct ConstantsRequest {
    pub p: f64,
    /// None means the default stepsize 1/(2 gamma).
    pub eta: Option<f64>,
    pub samples: usize,
    pub seed: u64,
}

/// Assembles the full constants report for one problem/compressor setup.
/// Needs the minimizer, so this runs the full-gradient oracle internally.
pub fn compute_constants(
    obj: &impl Objective,
    smoothness: SmoothnessConstants,
    clients: &[CompressorKind],
    master: &CompressorKind,
    req: &ConstantsRequest,
) -> Result<(TheoryConstants, StackedModel)> {
    check_p(req.p)?;
    let n = obj.n();
    let d = obj.d();
    let lambda = obj.lambda();
    let mut flags = Vec::new();

    let omega = joint_variance_factor(clients, d)?;
    let omega_m = variance_factor(master, d)?;
    let no_compression_form = omega == 0.0 && omega_m == 0.0;
    if !smoothness.strongly_convex {
        flags.push("not strongly convex (l2 = 0): mu = 0".into());
    }
    let alpha_val = if smoothness.mu > 0.0 || no_compression_form {
        alpha(omega, omega_m, smoothness.mu)
    } else {
        flags.push("alpha undefined without strong convexity; reported as infinite".into());
        f64::INFINITY
    };

    let oracle = crate::objective::minimize(obj, smoothness.l_f, 1e-10, 2_000_000);
    if !oracle.converged {
        flags.push(format!(
            "minimizer oracle stopped at gradient norm {:.3e}",
            oracle.gradient_norm
        ));
    }
    let x_star = oracle.x;

    let beta = beta_estimate(&x_star, clients, master, req.samples, req.seed)?;
    let e_g_star_sq = grad_norm_sq_at_optimum(
        obj,
        &x_star,
        req.p,
        clients,
        master,
        req.samples,
        req.seed.wrapping_add(1),
    )?;
    let delta_val = delta(beta.value, lambda, n, req.p, e_g_star_sq.value);
    let delta_se = {
        let nf = n as f64;
        let beta_part = 2.0 * lambda * lambda * (1.0 - req.p) / (nf * nf * req.p) * beta.std_error;
        let g_part = 2.0 * e_g_star_sq.std_error;
        (beta_part * beta_part + g_part * g_part).sqrt()
    };

    let gamma_val = if no_compression_form {
        gamma_no_compression(req.p, lambda, n, smoothness.l_f)?
    } else {
        gamma(req.p, lambda, n, smoothness.l_f, alpha_val)?
    };
    let gamma_u = gamma_upper(req.p, lambda, n, smoothness.l_f, alpha_val)?;
    let stepsize_bound = 1.0 / (2.0 * gamma_val);
    let eta = req.eta.unwrap_or(stepsize_bound);
    let eta_within_bound = eta <= stepsize_bound * (1.0 + 1e-12);
    if !eta_within_bound {
        flags.push(format!(
            "eta = {eta:.3e} exceeds the rate precondition 1/(2 gamma) = {stepsize_bound:.3e}"
        ));
    }

    let rate = optimal_p_rate(lambda, smoothness.l, n, alpha_val);
    let communication = optimal_p_communication(lambda, smoothness.l, n, alpha_val);
    let neighborhood = if smoothness.mu > 0.0 {
        n as f64 * eta * delta_val / smoothness.mu
    } else {
        f64::INFINITY
    };

    let constants = TheoryConstants {
        n,
        d,
        p: req.p,
        lambda,
        l_f: smoothness.l_f,
        l: smoothness.l,
        mu: smoothness.mu,
        strongly_convex: smoothness.strongly_convex,
        omega,
        omega_m,
        alpha: alpha_val,
        beta,
        e_g_star_sq,
        gamma: gamma_val,
        gamma_upper: gamma_u,
        no_compression_form,
        delta: delta_val,
        delta_std_error: delta_se,
        eta,
        stepsize_bound,
        eta_within_bound,
        contraction: 1.0 - eta * smoothness.mu / n as f64,
        neighborhood,
        p_e: p_e_exact(lambda, smoothness.l),
        p_e_upper: p_e_upper(lambda, smoothness.l),
        rate,
        communication,
        minimizer_gradient_norm: oracle.gradient_norm,
        flags,
    };
    Ok((constants, x_star))
}

/// Exact enumeration of E||C_M(ybar) - xbar||^2 for Bernoulli compressors on
/// tiny instances; the brute-force oracle behind the beta estimator tests.
pub fn enumerate_bernoulli_broadcast_variance(
    x: &StackedModel,
    client_q: f64,
    master_q: f64,
) -> f64 {
    let n = x.n();
    let d = x.d();
    let bits = n * d + d;
    assert!(bits <= 24, "enumeration only for tiny instances");
    let avg = x.average();
    let mut expectation = 0.0;
    for client_mask in 0u64..(1 << (n * d)) {
        let mut weight = 1.0;
        let mut ybar = Array1::<f64>::zeros(d);
        for i in 0..n {
            for j in 0..d {
                let kept = client_mask >> (i * d + j) & 1 == 1;
                weight *= if kept { client_q } else { 1.0 - client_q };
                if kept {
                    ybar[j] += x.block(i)[j] / client_q;
                }
            }
        }
        ybar /= n as f64;
        for master_mask in 0u64..(1 << d) {
            let mut w = weight;
            let mut err = 0.0;
            for j in 0..d {
                let kept = master_mask >> j & 1 == 1;
                w *= if kept { master_q } else { 1.0 - master_q };
                let broadcast = if kept { ybar[j] / master_q } else { 0.0 };
                err += (broadcast - avg[j]).powi(2);
            }
            expectation += w * err;
        }
    }
    expectation
}

/// Monte-Carlo check of the expected-smoothness inequality at one iterate:
/// E||G(x)||^2 estimated over `samples` draws of (coin pair, compressions).
pub fn estimate_grad_norm_sq(
    obj: &impl Objective,
    x: &StackedModel,
    p: f64,
    clients: &[CompressorKind],
    master: &CompressorKind,
    samples: usize,
    seed: u64,
) -> Result<MonteCarloEstimate> {
    check_p(p)?;
    let n = x.n();
    let nf = n as f64;
    let local_branch: f64 = (0..n)
        .map(|i| {
            let g = obj.local_gradient(i, x.block(i));
            g.dot(&g)
        })
        .sum::<f64>()
        / (nf * nf * (1.0 - p) * (1.0 - p));
    let coeff = obj.lambda() / (nf * p);
    let avg = x.average();
    let stay_branch: f64 = (0..n)
        .map(|i| {
            let diff = &x.block(i) - &avg;
            coeff * coeff * diff.dot(&diff)
        })
        .sum();
    let factory = StreamFactory::new(seed);
    let mut client_rngs: Vec<ChaCha8Rng> =
        (0..n).map(|i| factory.stream(client_stream(i))).collect();
    let mut master_rng = factory.stream(MASTER_STREAM);
    let mut draws = Vec::with_capacity(samples);
    for _ in 0..samples {
        let (target, _, _) =
            compressed_round(x, clients, master, &mut client_rngs, &mut master_rng)?;
        let mut norm_sq = 0.0;
        for i in 0..n {
            let diff = &x.block(i) - &target;
            norm_sq += coeff * coeff * diff.dot(&diff);
        }
        draws.push(norm_sq);
    }
    let (comm_mean, comm_se) = mean_and_se(&draws);
    Ok(MonteCarloEstimate {
        value: (1.0 - p) * local_branch + p * (1.0 - p) * comm_mean + p * p * stay_branch,
        std_error: p * (1.0 - p) * comm_se,
        samples,
    })
}
