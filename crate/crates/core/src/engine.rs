//! Deterministic seeded execution of compressed L2GD and the FedAvg baseline.
//!
//! One run is a Markov chain over a [`StackedModel`]: at each step a coin
//! xi_k decides between a local gradient step (xi=0) and an aggregation step
//! (xi=1). Communication happens only on 0 -> 1 transitions: clients upload
//! compressed blocks, the master averages, compresses, and broadcasts. After
//! consecutive aggregation steps the stored broadcast value is reused, since
//! the block average does not change.
//!
//! Every run owns separate RNG streams for the coin, each client compressor,
//! and the master compressor, so changing a compressor never changes the
//! step-type sequence at a fixed seed.

use ndarray::Array1;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::compressors::{bit_cost, compress, CompressorKind};
use crate::error::{Error, Result};
use crate::objective::{
    f_value, h_value, Objective, StackedModel,
};
use crate::rng::{client_stream, StreamFactory, COIN_STREAM, MASTER_STREAM};

/// Parameters of one L2GD run.
#[derive(Debug, Clone)]
pub struct L2gdConfig {
    /// Aggregation probability, strictly inside (0, 1).
    pub p: f64,
    pub eta: f64,
    /// Number of steps K.
    pub steps: usize,
    /// Per-client uplink compressors (length n).
    pub clients: Vec<CompressorKind>,
    /// Downlink compressor used by the master.
    pub master: CompressorKind,
    pub seed: u64,
}

impl L2gdConfig {
    /// All clients share one compressor kind.
    pub fn uniform(
        n: usize,
        p: f64,
        eta: f64,
        steps: usize,
        client: CompressorKind,
        master: CompressorKind,
        seed: u64,
    ) -> Self {
        L2gdConfig {
            p,
            eta,
            steps,
            clients: vec![client; n],
            master,
            seed,
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(Error::config(format!(
                "p must lie strictly in (0, 1); got {}",
                self.p
            )));
        }
        if self.eta.is_nan() || self.eta <= 0.0 {
            return Err(Error::config(format!("eta must be positive; got {}", self.eta)));
        }
        if self.clients.len() != n {
            return Err(Error::config(format!(
                "{} client compressors for {} clients",
                self.clients.len(),
                n
            )));
        }
        Ok(())
    }
}

/// Mutable run state: the iterate, the previous coin, and the master value
/// stored for consecutive aggregation steps.
#[derive(Debug, Clone)]
pub struct L2gdState {
    pub x: StackedModel,
    pub prev_xi: bool,
    pub stored_average: Array1<f64>,
    pub k: usize,
    coin: ChaCha8Rng,
    client_rngs: Vec<ChaCha8Rng>,
    master_rng: ChaCha8Rng,
}

/// What one step did, for metrics accounting.
#[derive(Debug, Clone, Copy)]
pub struct StepOutcome {
    pub xi: bool,
    pub communicated: bool,
    pub uplink_bits: u64,
    pub downlink_bits: u64,
}

/// Initializes the chain: xi_{-1} = 1 and the stored value is the exact
/// initial block average.
pub fn init(x0: StackedModel, cfg: &L2gdConfig) -> Result<L2gdState> {
    cfg.validate(x0.n())?;
    for kind in cfg.clients.iter().chain([&cfg.master]) {
        kind.validate(x0.d())?;
    }
    let factory = StreamFactory::new(cfg.seed);
    let stored_average = x0.average();
    Ok(L2gdState {
        prev_xi: true,
        stored_average,
        k: 0,
        coin: factory.stream(COIN_STREAM),
        client_rngs: (0..x0.n())
            .map(|i| factory.stream(client_stream(i)))
            .collect(),
        master_rng: factory.stream(MASTER_STREAM),
        x: x0,
    })
}

/// One communication round: clients compress their blocks, the master
/// averages the payloads and broadcasts a compressed average.
pub(crate) fn compressed_round(
    x: &StackedModel,
    clients: &[CompressorKind],
    master: &CompressorKind,
    client_rngs: &mut [ChaCha8Rng],
    master_rng: &mut ChaCha8Rng,
) -> Result<(Array1<f64>, u64, u64)> {
    let n = x.n();
    let mut uplink = 0u64;
    let mut mean = Array1::zeros(x.d());
    for i in 0..n {
        let msg = compress(&clients[i], x.block(i), &mut client_rngs[i])?;
        uplink += msg.bit_cost;
        mean += &msg.payload;
    }
    mean /= n as f64;
    let broadcast = compress(master, mean.view(), master_rng)?;
    Ok((broadcast.payload, uplink, broadcast.bit_cost))
}

/// Pulls every block toward `target` with coefficient c = eta*lambda/(n*p).
/// Written as (1-c)*x_i + c*target so c = 1 lands on the target bit-exactly.
fn aggregation_update(x: &mut StackedModel, target: &Array1<f64>, c: f64) {
    for i in 0..x.n() {
        let mut block = x.block_mut(i);
        block.zip_mut_with(target, |xi, &t| *xi = (1.0 - c) * *xi + c * t);
    }
}

/// Advances the chain one step with a forced coin value. Exposed so analyses
/// can drive specific step types; [`step`] draws the coin from the stream.
pub fn step_with_coin(
    state: &mut L2gdState,
    obj: &impl Objective,
    cfg: &L2gdConfig,
    xi: bool,
) -> Result<StepOutcome> {
    let n = state.x.n();
    let mut outcome = StepOutcome {
        xi,
        communicated: false,
        uplink_bits: 0,
        downlink_bits: 0,
    };
    if !xi {
        let scale = cfg.eta / (n as f64 * (1.0 - cfg.p));
        for i in 0..n {
            let grad = obj.local_gradient(i, state.x.block(i));
            let mut block = state.x.block_mut(i);
            block.scaled_add(-scale, &grad);
        }
    } else {
        let c = cfg.eta * obj.lambda() / (n as f64 * cfg.p);
        if !state.prev_xi {
            let (target, up, down) = compressed_round(
                &state.x,
                &cfg.clients,
                &cfg.master,
                &mut state.client_rngs,
                &mut state.master_rng,
            )?;
            aggregation_update(&mut state.x, &target, c);
            state.stored_average = target;
            outcome.communicated = true;
            outcome.uplink_bits = up;
            outcome.downlink_bits = down;
        } else {
            let target = state.stored_average.clone();
            aggregation_update(&mut state.x, &target, c);
        }
    }
    state.prev_xi = xi;
    state.k += 1;
    Ok(outcome)
}

/// Draws xi_k from the coin stream and advances one step.
pub fn step(state: &mut L2gdState, obj: &impl Objective, cfg: &L2gdConfig) -> Result<StepOutcome> {
    let xi = state.coin.random::<f64>() < cfg.p;
    step_with_coin(state, obj, cfg, xi)
}

/// The three-case gradient estimator G(x): conditioned on (xi_k, xi_{k-1}),
/// block i is
///   grad f_i(x_i) / (n(1-p))                 if xi_k = 0,
///   (lambda/(np)) (x_i - C_M(ybar))          if xi_k = 1, xi_{k-1} = 0,
///   (lambda/(np)) (x_i - xbar)               if xi_k = 1, xi_{k-1} = 1.
/// One step of the chain is exactly x - eta * G(x).
#[allow(clippy::too_many_arguments)]
pub fn stochastic_gradient(
    obj: &impl Objective,
    x: &StackedModel,
    xi: bool,
    prev_xi: bool,
    p: f64,
    clients: &[CompressorKind],
    master: &CompressorKind,
    client_rngs: &mut [ChaCha8Rng],
    master_rng: &mut ChaCha8Rng,
) -> Result<StackedModel> {
    let n = x.n();
    if !xi {
        let scale = 1.0 / (n as f64 * (1.0 - p));
        return Ok(StackedModel::from_blocks(
            (0..n)
                .map(|i| obj.local_gradient(i, x.block(i)) * scale)
                .collect(),
        ));
    }
    let coeff = obj.lambda() / (n as f64 * p);
    let target = if !prev_xi {
        compressed_round(x, clients, master, client_rngs, master_rng)?.0
    } else {
        x.average()
    };
    Ok(StackedModel::from_blocks(
        (0..n)
            .map(|i| {
                let mut g = x.block(i).to_owned();
                g -= &target;
                g * coeff
            })
            .collect(),
    ))
}

/// Schema version stamped on every trace record.
pub const TRACE_SCHEMA_VERSION: u32 = 1;

/// One per-iteration metrics record. `xi` is the coin that produced this
/// state (absent on the initial record). Bit counters are cumulative;
/// `down_bits` counts each broadcast once.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct TraceRecord {
    pub v: u32,
    pub k: usize,
    pub xi: Option<u8>,
    pub objective: f64,
    pub f: f64,
    pub h: f64,
    pub dist_sq: Option<f64>,
    pub up_bits: u64,
    pub down_bits: u64,
    pub rounds: u64,
}

/// Per-iteration records of one run, including the initial state.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTrace {
    pub records: Vec<TraceRecord>,
}

/// A finished L2GD run: the metrics and the final iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct L2gdRun {
    pub trace: MetricsTrace,
    pub final_state: StackedModel,
}

/// A finished FedAvg run: the metrics and the final shared model.
#[derive(Debug, Clone, PartialEq)]
pub struct FedAvgRun {
    pub trace: MetricsTrace,
    pub shared_model: Array1<f64>,
}

impl MetricsTrace {
    pub fn last(&self) -> &TraceRecord {
        self.records.last().expect("trace never empty")
    }

    /// Uplink plus one broadcast per round, normalized by the client count.
    pub fn bits_per_client(&self, n: usize) -> f64 {
        let rec = self.last();
        (rec.up_bits + rec.down_bits) as f64 / n as f64
    }

    /// Unnormalized volume: the broadcast reaches each of the n clients.
    pub fn total_bits(&self, n: usize) -> u64 {
        let rec = self.last();
        rec.up_bits + n as u64 * rec.down_bits
    }
}

#[allow(clippy::too_many_arguments)]
fn record(
    obj: &impl Objective,
    x: &StackedModel,
    k: usize,
    xi: Option<u8>,
    x_star: Option<&StackedModel>,
    up: u64,
    down: u64,
    rounds: u64,
) -> TraceRecord {
    let f = f_value(obj, x);
    let h = h_value(obj, x);
    TraceRecord {
        v: TRACE_SCHEMA_VERSION,
        k,
        xi,
        objective: f + h,
        f,
        h,
        dist_sq: x_star.map(|s| x.sq_distance(s)),
        up_bits: up,
        down_bits: down,
        rounds,
    }
}

/// Runs K steps of compressed L2GD from `x0` (zeros when absent), recording
/// metrics before the first step and after each step. Identical seeds yield
/// byte-identical traces.
pub fn run_l2gd(
    obj: &impl Objective,
    cfg: &L2gdConfig,
    x0: Option<StackedModel>,
    x_star: Option<&StackedModel>,
) -> Result<L2gdRun> {
    if cfg.steps == 0 {
        return Err(Error::config("K must be at least 1"));
    }
    let x0 = x0.unwrap_or_else(|| StackedModel::zeros(obj.n(), obj.d()));
    let mut state = init(x0, cfg)?;
    let mut records = Vec::with_capacity(cfg.steps + 1);
    let (mut up, mut down, mut rounds) = (0u64, 0u64, 0u64);
    records.push(record(obj, &state.x, 0, None, x_star, up, down, rounds));
    for k in 0..cfg.steps {
        let outcome = step(&mut state, obj, cfg)?;
        up += outcome.uplink_bits;
        down += outcome.downlink_bits;
        rounds += u64::from(outcome.communicated);
        records.push(record(
            obj,
            &state.x,
            k + 1,
            Some(u8::from(outcome.xi)),
            x_star,
            up,
            down,
            rounds,
        ));
    }
    Ok(L2gdRun {
        trace: MetricsTrace { records },
        final_state: state.x,
    })
}

/// Parameters of the FedAvg baseline with compressed-difference uploads.
#[derive(Debug, Clone)]
pub struct FedAvgConfig {
    /// Local gradient steps per round (T).
    pub local_steps: usize,
    pub eta_local: f64,
    pub rounds: usize,
    pub compressor: CompressorKind,
    pub seed: u64,
}

/// FedAvg with a per-round local-step schedule. Each round every client runs
/// its local steps from the shared model, forms the direction
/// g_computed = shared - result, and uploads the compressed difference from
/// its previous direction estimate; master and client keep those estimates in
/// sync, the master averages them and moves the shared model. The broadcast
/// of the shared model is accounted at the dense encoding.
pub fn run_fedavg_schedule(
    obj: &impl Objective,
    schedule: &[usize],
    eta_local: f64,
    compressor: CompressorKind,
    seed: u64,
    w0: Option<Array1<f64>>,
) -> Result<FedAvgRun> {
    if schedule.is_empty() {
        return Err(Error::config("fedavg needs at least one round"));
    }
    if schedule.contains(&0) {
        return Err(Error::config("fedavg local step counts must be >= 1"));
    }
    let n = obj.n();
    let d = obj.d();
    compressor.validate(d)?;
    let factory = StreamFactory::new(seed);
    let mut client_rngs: Vec<ChaCha8Rng> =
        (0..n).map(|i| factory.stream(client_stream(i))).collect();

    let mut w = w0.unwrap_or_else(|| Array1::zeros(d));
    let mut g_prev: Vec<Array1<f64>> = vec![Array1::zeros(d); n];
    let (mut up, mut down) = (0u64, 0u64);
    let broadcast_bits = bit_cost(&CompressorKind::Identity, d, d);

    let mut records = Vec::with_capacity(schedule.len() + 1);
    let snapshot = StackedModel::replicated(w.clone(), n);
    records.push(record(obj, &snapshot, 0, None, None, up, down, 0));

    for (round, &local_steps) in schedule.iter().enumerate() {
        let mut sum_g = Array1::zeros(d);
        for i in 0..n {
            let mut z = w.clone();
            for _ in 0..local_steps {
                let grad = obj.local_gradient(i, z.view());
                z.scaled_add(-eta_local, &grad);
            }
            let g_computed = &w - &z;
            let diff = &g_computed - &g_prev[i];
            let msg = compress(&compressor, diff.view(), &mut client_rngs[i])?;
            up += msg.bit_cost;
            g_prev[i] += &msg.payload;
            sum_g += &g_prev[i];
        }
        w.scaled_add(-1.0 / n as f64, &sum_g);
        down += broadcast_bits;
        let snapshot = StackedModel::replicated(w.clone(), n);
        records.push(record(
            obj,
            &snapshot,
            round + 1,
            None,
            None,
            up,
            down,
            round as u64 + 1,
        ));
    }
    Ok(FedAvgRun {
        trace: MetricsTrace { records },
        shared_model: w,
    })
}

/// FedAvg with a fixed number of local steps per round.
pub fn run_fedavg(obj: &impl Objective, cfg: &FedAvgConfig) -> Result<FedAvgRun> {
    if cfg.local_steps == 0 {
        return Err(Error::config("T must be at least 1"));
    }
    run_fedavg_schedule(
        obj,
        &vec![cfg.local_steps; cfg.rounds],
        cfg.eta_local,
        cfg.compressor,
        cfg.seed,
        None,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_instance;
    use crate::objective::{full_gradient, LogisticProblem};
    use approx::assert_relative_eq;

    fn toy_problem(lambda: f64) -> LogisticProblem {
        let data = synth_instance(4, 6, 12, 1.0, 77);
        LogisticProblem::new(&data, 0.05, lambda)
    }

    fn identity_cfg(n: usize, p: f64, eta: f64, steps: usize, seed: u64) -> L2gdConfig {
        L2gdConfig::uniform(
            n,
            p,
            eta,
            steps,
            CompressorKind::Identity,
            CompressorKind::Identity,
            seed,
        )
    }

    fn random_start(problem: &LogisticProblem, seed: u64) -> StackedModel {
        use rand::Rng;
        use rand_distr::StandardNormal;
        let mut rng = StreamFactory::new(seed).stream(9);
        StackedModel::from_blocks(
            (0..problem.n())
                .map(|_| {
                    Array1::from_iter(
                        (0..problem.d()).map(|_| rng.sample::<f64, _>(StandardNormal)),
                    )
                })
                .collect(),
        )
    }

    #[test]
    fn rejects_degenerate_p_and_eta() {
        let problem = toy_problem(1.0);
        let x0 = StackedModel::zeros(4, 6);
        for p in [0.0, 1.0, -0.5, 1.5] {
            let cfg = identity_cfg(4, p, 0.1, 5, 1);
            assert!(init(x0.clone(), &cfg).is_err(), "p = {p}");
        }
        let cfg = identity_cfg(4, 0.5, 0.0, 5, 1);
        assert!(init(x0, &cfg).is_err());
        let cfg = identity_cfg(4, 0.5, 0.1, 0, 1);
        assert!(run_l2gd(&problem, &cfg, None, None).is_err());
    }

    /// With eta*lambda/(n*p) = 1 and identity compressors, a communicating
    /// aggregation step lands every block exactly on the block average.
    #[test]
    fn unit_coefficient_aggregation_hits_average_exactly() {
        let problem = toy_problem(2.0);
        let n = 4;
        let p = 0.5;
        let eta = n as f64 * p / problem.lambda;
        let cfg = identity_cfg(n, p, eta, 10, 3);
        let x0 = random_start(&problem, 11);
        let expected_avg = x0.average();
        let mut state = init(x0, &cfg).unwrap();
        state.prev_xi = false; // force a communicating aggregation
        let outcome = step_with_coin(&mut state, &problem, &cfg, true).unwrap();
        assert!(outcome.communicated);
        for i in 0..n {
            assert_eq!(state.x.block(i), expected_avg.view(), "block {i}");
        }
    }

    #[test]
    fn consecutive_aggregations_preserve_average() {
        let problem = toy_problem(3.0);
        let cfg = identity_cfg(4, 0.4, 0.05, 10, 5);
        let mut state = init(random_start(&problem, 13), &cfg).unwrap();
        state.prev_xi = false;
        step_with_coin(&mut state, &problem, &cfg, true).unwrap();
        let avg_before = state.x.average();
        step_with_coin(&mut state, &problem, &cfg, true).unwrap();
        let outcome = step_with_coin(&mut state, &problem, &cfg, true).unwrap();
        assert!(!outcome.communicated);
        assert_eq!(outcome.uplink_bits, 0);
        let avg_after = state.x.average();
        let drift = (&avg_after - &avg_before).mapv(f64::abs).sum();
        assert!(drift <= 1e-12 * (1.0 + avg_before.mapv(f64::abs).sum()));
    }

    /// lambda = 0 makes aggregation steps no-ops: the trajectory equals
    /// independent local gradient descent executed only on xi = 0 steps.
    #[test]
    fn lambda_zero_reduces_to_local_descent() {
        let problem = toy_problem(0.0);
        let p = 0.3;
        let eta = 0.2;
        let cfg = identity_cfg(4, p, eta, 60, 17);
        let x0 = random_start(&problem, 19);
        let run = run_l2gd(&problem, &cfg, Some(x0.clone()), None).unwrap();
        let trace = run.trace;

        // Replay: local step on xi=0, nothing otherwise.
        let mut manual = x0;
        let scale = eta / (4.0 * (1.0 - p));
        for rec in &trace.records[1..] {
            if rec.xi == Some(0) {
                for i in 0..manual.n() {
                    let g = problem.local_gradient(i, manual.block(i));
                    manual.block_mut(i).scaled_add(-scale, &g);
                }
            }
        }
        let final_f = trace.last().f;
        assert_relative_eq!(
            final_f,
            f_value(&problem, &manual),
            epsilon = 1e-12,
            max_relative = 1e-12
        );
        assert_relative_eq!(trace.last().h, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn replayed_seeds_give_identical_traces() {
        let problem = toy_problem(1.5);
        let cfg = L2gdConfig::uniform(
            4,
            0.4,
            0.05,
            40,
            CompressorKind::Bernoulli { keep_prob: 0.5 },
            CompressorKind::Natural,
            23,
        );
        let a = run_l2gd(&problem, &cfg, None, None).unwrap();
        let b = run_l2gd(&problem, &cfg, None, None).unwrap();
        assert_eq!(a, b);
        let json_a = serde_json::to_string(&a.trace.records).unwrap();
        let json_b = serde_json::to_string(&b.trace.records).unwrap();
        assert_eq!(json_a, json_b);
    }

    /// The coin stream is separate from compressor streams: swapping
    /// compressors leaves the xi sequence untouched.
    #[test]
    fn compressor_choice_does_not_move_the_coin() {
        let problem = toy_problem(1.5);
        let mut kinds = Vec::new();
        for kind in [
            CompressorKind::Identity,
            CompressorKind::TernGrad,
            CompressorKind::Bernoulli { keep_prob: 0.25 },
        ] {
            let cfg = L2gdConfig::uniform(4, 0.4, 0.05, 50, kind, kind, 29);
            let run = run_l2gd(&problem, &cfg, None, None).unwrap();
            kinds.push(
                run.trace.records[1..]
                    .iter()
                    .map(|r| r.xi.unwrap())
                    .collect::<Vec<_>>(),
            );
        }
        assert_eq!(kinds[0], kinds[1]);
        assert_eq!(kinds[0], kinds[2]);
    }

    #[test]
    fn step_is_x_minus_eta_g() {
        let problem = toy_problem(2.5);
        let cfg = L2gdConfig::uniform(
            4,
            0.35,
            0.07,
            10,
            CompressorKind::Bernoulli { keep_prob: 0.6 },
            CompressorKind::Natural,
            31,
        );
        let x0 = random_start(&problem, 37);
        for (xi, prev_xi) in [(false, true), (true, false), (true, true)] {
            let mut state = init(x0.clone(), &cfg).unwrap();
            state.prev_xi = prev_xi;
            // stored_average is the exact initial average, matching the
            // estimator's use of xbar in the (1,1) case.
            let mut g_client_rngs = state.client_rngs.clone();
            let mut g_master_rng = state.master_rng.clone();
            let g = stochastic_gradient(
                &problem,
                &x0,
                xi,
                prev_xi,
                cfg.p,
                &cfg.clients,
                &cfg.master,
                &mut g_client_rngs,
                &mut g_master_rng,
            )
            .unwrap();
            step_with_coin(&mut state, &problem, &cfg, xi).unwrap();
            let mut expected = x0.clone();
            expected.add_scaled(-cfg.eta, &g);
            let diff = expected.sq_distance(&state.x).sqrt();
            assert!(
                diff <= 1e-12 * (1.0 + x0.sq_norm().sqrt()),
                "xi=({xi},{prev_xi}) diff {diff}"
            );
        }
    }

    #[test]
    fn estimator_is_deterministic_in_double_aggregation_case() {
        let problem = toy_problem(2.0);
        let x = random_start(&problem, 41);
        let avg = x.average();
        let factory = StreamFactory::new(43);
        let mut client_rngs: Vec<_> = (0..4).map(|i| factory.stream(client_stream(i))).collect();
        let mut master_rng = factory.stream(MASTER_STREAM);
        let clients = vec![CompressorKind::Identity; 4];
        let g = stochastic_gradient(
            &problem,
            &x,
            true,
            true,
            0.4,
            &clients,
            &CompressorKind::Identity,
            &mut client_rngs,
            &mut master_rng,
        )
        .unwrap();
        let coeff = problem.lambda / (4.0 * 0.4);
        for i in 0..4 {
            let expected = (&x.block(i) - &avg) * coeff;
            let diff = (&g.block(i) - &expected).mapv(f64::abs).sum();
            assert!(diff <= 1e-12);
        }
    }

    /// Monte-Carlo means: E[C_M(ybar)] = xbar and E[G(x)] = grad F(x), both
    /// under the stationary two-step coin distribution.
    #[test]
    fn estimator_means_are_unbiased() {
        let problem = toy_problem(1.2);
        let x = random_start(&problem, 47);
        let p = 0.45;
        let clients = vec![CompressorKind::Bernoulli { keep_prob: 0.5 }; 4];
        let master = CompressorKind::Natural;
        let factory = StreamFactory::new(53);
        let mut client_rngs: Vec<_> = (0..4).map(|i| factory.stream(client_stream(i))).collect();
        let mut master_rng = factory.stream(MASTER_STREAM);
        let mut coin = factory.stream(COIN_STREAM);

        let draws = 60_000;
        let mut mean_broadcast = Array1::<f64>::zeros(problem.d());
        let mut mean_g = StackedModel::zeros(4, problem.d());
        for _ in 0..draws {
            let (target, _, _) = compressed_round(
                &x,
                &clients,
                &master,
                &mut client_rngs,
                &mut master_rng,
            )
            .unwrap();
            mean_broadcast += &target;
            let xi = coin.random::<f64>() < p;
            let prev = coin.random::<f64>() < p;
            let g = stochastic_gradient(
                &problem,
                &x,
                xi,
                prev,
                p,
                &clients,
                &master,
                &mut client_rngs,
                &mut master_rng,
            )
            .unwrap();
            mean_g.add_scaled(1.0, &g);
        }
        mean_broadcast /= draws as f64;
        let avg = x.average();
        let broadcast_err = (&mean_broadcast - &avg).mapv(f64::abs).sum() / problem.d() as f64;
        assert!(broadcast_err < 0.01, "broadcast bias {broadcast_err}");

        for i in 0..4 {
            mean_g.block_mut(i).mapv_inplace(|v| v / draws as f64);
        }
        let grad = full_gradient(&problem, &x);
        let err = mean_g.sq_distance(&grad).sqrt() / (1.0 + grad.sq_norm().sqrt());
        assert!(err < 0.02, "estimator bias {err}");
    }

    #[test]
    fn bits_move_only_on_communication_rounds() {
        let problem = toy_problem(1.0);
        let cfg = L2gdConfig::uniform(
            4,
            0.3,
            0.05,
            300,
            CompressorKind::TernGrad,
            CompressorKind::TernGrad,
            59,
        );
        let trace = run_l2gd(&problem, &cfg, None, None).unwrap().trace;
        let mut prev_xi = 1u8; // xi_{-1} = 1
        for pair in trace.records.windows(2) {
            let (before, after) = (&pair[0], &pair[1]);
            let xi = after.xi.unwrap();
            let transferred = after.up_bits != before.up_bits
                || after.down_bits != before.down_bits;
            let round = after.rounds != before.rounds;
            let is_transition = xi == 1 && prev_xi == 0;
            assert_eq!(transferred, is_transition, "k={}", after.k);
            assert_eq!(round, is_transition);
            prev_xi = xi;
        }
    }

    #[test]
    fn fedavg_identity_collapses_to_plain_averaging() {
        let problem = toy_problem(0.0);
        let cfg = FedAvgConfig {
            local_steps: 3,
            eta_local: 0.1,
            rounds: 5,
            compressor: CompressorKind::Identity,
            seed: 61,
        };
        let run = run_fedavg(&problem, &cfg).unwrap();

        // Manual plain FedAvg: w <- mean_i of (T local steps from w).
        let mut w = Array1::<f64>::zeros(problem.d());
        for _ in 0..cfg.rounds {
            let mut acc = Array1::<f64>::zeros(problem.d());
            for i in 0..problem.n() {
                let mut z = w.clone();
                for _ in 0..cfg.local_steps {
                    let g = problem.local_gradient(i, z.view());
                    z.scaled_add(-cfg.eta_local, &g);
                }
                acc += &z;
            }
            w = acc / problem.n() as f64;
        }
        let expected = StackedModel::replicated(w.clone(), problem.n());
        assert_relative_eq!(
            run.trace.last().f,
            f_value(&problem, &expected),
            epsilon = 1e-12,
            max_relative = 1e-12
        );
        let model_gap = (&run.shared_model - &w).mapv(f64::abs).sum();
        assert!(model_gap <= 1e-12);
    }

    #[test]
    fn fedavg_single_client_one_step_is_gradient_descent() {
        let data = synth_instance(1, 4, 10, 0.0, 67);
        let problem = LogisticProblem::new(&data, 0.1, 0.0);
        let cfg = FedAvgConfig {
            local_steps: 1,
            eta_local: 0.3,
            rounds: 8,
            compressor: CompressorKind::Identity,
            seed: 71,
        };
        let run = run_fedavg(&problem, &cfg).unwrap();
        let mut w = Array1::<f64>::zeros(4);
        for _ in 0..8 {
            let g = problem.local_gradient(0, w.view());
            w.scaled_add(-0.3, &g);
        }
        let expected = StackedModel::replicated(w, 1);
        assert_relative_eq!(run.trace.last().f, f_value(&problem, &expected), epsilon = 1e-12);
    }
}
