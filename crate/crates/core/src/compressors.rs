//! Compression operators for uplink/downlink messages.
//!
//! Five unbiased operators (identity, norm-scaled random dithering, natural
//! stochastic power-of-two rounding, ternary, Bernoulli masking) plus the
//! biased top-k sparsifier. Each kind carries an analytic variance
//! certificate `omega` with `E||C(x) - x||^2 <= omega * ||x||^2`, and a
//! deterministic bit-accounting rule used by the communication metrics.
//!
//! Bit accounting is a documented convention, not a wire format:
//! - identity: 32 bits per coordinate
//! - dithering(s): 32 (norm) + d * (1 sign + ceil(log2(s+1)) level) bits
//! - natural: 9 bits per coordinate (sign + 8-bit exponent)
//! - ternary: 32 (scale) + 2d bits
//! - bernoulli / top-k: survivors * (32 + ceil(log2 d)) index/value pairs

use ndarray::{Array1, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which compression operator to apply, with its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CompressorKind {
    Identity,
    /// Norm-scaled stochastic rounding to `levels` levels per coordinate.
    #[serde(rename = "dithering")]
    RandomDithering { levels: u32 },
    /// Stochastic rounding of each coordinate to a power of two.
    Natural,
    /// Entries in {-m, 0, +m} with m = max |x_i|.
    TernGrad,
    /// Keep each coordinate independently with probability `keep_prob`,
    /// scale survivors by 1/keep_prob.
    Bernoulli { keep_prob: f64 },
    /// Keep the k largest-magnitude coordinates (ties to the lower index).
    /// Biased: carries no unbiased variance certificate.
    TopK { k: usize },
}

impl CompressorKind {
    pub fn is_unbiased(&self) -> bool {
        !matches!(self, CompressorKind::TopK { .. })
    }

    pub fn label(&self) -> &'static str {
        match self {
            CompressorKind::Identity => "identity",
            CompressorKind::RandomDithering { .. } => "dithering",
            CompressorKind::Natural => "natural",
            CompressorKind::TernGrad => "terngrad",
            CompressorKind::Bernoulli { .. } => "bernoulli",
            CompressorKind::TopK { .. } => "top-k",
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        match *self {
            CompressorKind::RandomDithering { levels } if levels < 1 => {
                Err(Error::config("dithering needs levels >= 1"))
            }
            CompressorKind::Bernoulli { keep_prob } if !(keep_prob > 0.0 && keep_prob <= 1.0) => {
                Err(Error::config("bernoulli needs keep_prob in (0, 1]"))
            }
            CompressorKind::TopK { k } if k < 1 || k > d => Err(Error::config(format!(
                "top-k needs 1 <= k <= d; got k={k}, d={d}"
            ))),
            _ => Ok(()),
        }
    }
}

/// A compressor bound to one RNG stream id: the unit of randomness
/// ownership. Distinct stream ids give statistically independent
/// compressions; replaying the same seed and id reproduces payloads
/// byte-identically.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompressorSpec {
    pub kind: CompressorKind,
    pub stream_id: u64,
}

impl CompressorSpec {
    pub fn new(kind: CompressorKind, stream_id: u64) -> Self {
        CompressorSpec { kind, stream_id }
    }

    /// The dedicated stream for this spec under a run's seed.
    pub fn stream(&self, factory: &crate::rng::StreamFactory) -> rand_chacha::ChaCha8Rng {
        factory.stream(self.stream_id)
    }
}

/// The decoded payload of one compressed message plus its transmission cost
/// under the documented encodings.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedMessage {
    pub payload: Array1<f64>,
    pub bit_cost: u64,
}

fn ceil_log2(values: u64) -> u64 {
    debug_assert!(values >= 1);
    64 - (values - 1).leading_zeros() as u64
}

/// Bits needed to transmit one message of the given kind. `survivors` is the
/// realized sparsity pattern size; it only matters for bernoulli and top-k.
pub fn bit_cost(kind: &CompressorKind, d: usize, survivors: usize) -> u64 {
    let d64 = d as u64;
    match kind {
        CompressorKind::Identity => 32 * d64,
        CompressorKind::RandomDithering { levels } => {
            32 + d64 * (1 + ceil_log2(*levels as u64 + 1))
        }
        CompressorKind::Natural => 9 * d64,
        CompressorKind::TernGrad => 32 + 2 * d64,
        CompressorKind::Bernoulli { .. } | CompressorKind::TopK { .. } => {
            survivors as u64 * (32 + ceil_log2(d64.max(1)))
        }
    }
}

/// Largest power of two <= v, exact for normal floats.
fn pow2_floor(v: f64) -> f64 {
    debug_assert!(v > 0.0 && v.is_finite());
    let exponent_bits = v.to_bits() & 0x7ff0_0000_0000_0000;
    if exponent_bits == 0 {
        // Subnormal input; fall back to the slow path.
        v.log2().floor().exp2()
    } else {
        f64::from_bits(exponent_bits)
    }
}

/// Applies the operator to `x`, consuming randomness from `rng`.
///
/// Unbiased kinds satisfy `E[payload] = x` over the stream. Zero input maps
/// to zero for every kind; dithering and ternary skip the stream entirely in
/// that case so the 0/0 scale never arises.
pub fn compress(
    kind: &CompressorKind,
    x: ArrayView1<f64>,
    rng: &mut impl Rng,
) -> Result<CompressedMessage> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("compressor input"));
    }
    let d = x.len();
    kind.validate(d)?;
    let (payload, survivors) = match *kind {
        CompressorKind::Identity => (x.to_owned(), d),
        CompressorKind::RandomDithering { levels } => {
            let norm = x.dot(&x).sqrt();
            if norm == 0.0 {
                (Array1::zeros(d), d)
            } else {
                let s = levels as f64;
                let payload = x.mapv(|v| {
                    let scaled = v.abs() / norm * s;
                    let floor = scaled.floor();
                    let level = if rng.random::<f64>() < scaled - floor {
                        floor + 1.0
                    } else {
                        floor
                    };
                    v.signum() * norm * level / s
                });
                (payload, d)
            }
        }
        CompressorKind::Natural => {
            let payload = x.mapv(|v| {
                if v == 0.0 {
                    return 0.0;
                }
                let lo = pow2_floor(v.abs());
                let p_up = (v.abs() / lo - 1.0).clamp(0.0, 1.0);
                let magnitude = if rng.random::<f64>() < p_up { 2.0 * lo } else { lo };
                v.signum() * magnitude
            });
            (payload, d)
        }
        CompressorKind::TernGrad => {
            let scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if scale == 0.0 {
                (Array1::zeros(d), d)
            } else {
                let payload = x.mapv(|v| {
                    if rng.random::<f64>() < v.abs() / scale {
                        v.signum() * scale
                    } else {
                        0.0
                    }
                });
                (payload, d)
            }
        }
        CompressorKind::Bernoulli { keep_prob } => {
            let mut survivors = 0usize;
            let payload = x.mapv(|v| {
                if rng.random::<f64>() < keep_prob {
                    survivors += 1;
                    v / keep_prob
                } else {
                    0.0
                }
            });
            (payload, survivors)
        }
        CompressorKind::TopK { k } => {
            let mut order: Vec<usize> = (0..d).collect();
            order.sort_by(|&a, &b| {
                x[b].abs()
                    .partial_cmp(&x[a].abs())
                    .expect("finite values")
                    .then(a.cmp(&b))
            });
            let mut payload = Array1::zeros(d);
            for &idx in order.iter().take(k) {
                payload[idx] = x[idx];
            }
            (payload, k)
        }
    };
    Ok(CompressedMessage {
        bit_cost: bit_cost(kind, d, survivors),
        payload,
    })
}

/// Analytic variance certificate `omega` for an unbiased kind at dimension
/// `d`: `E||C(x) - x||^2 <= omega * ||x||^2` for all x.
pub fn variance_factor(kind: &CompressorKind, d: usize) -> Result<f64> {
    kind.validate(d)?;
    let df = d as f64;
    match *kind {
        CompressorKind::Identity => Ok(0.0),
        CompressorKind::RandomDithering { levels } => {
            let s = levels as f64;
            Ok((df / (s * s)).min(df.sqrt() / s))
        }
        CompressorKind::Natural => Ok(0.125),
        // Tight bound: sup over x of (||x||_inf * ||x||_1 - ||x||^2) / ||x||^2,
        // attained by one large coordinate plus d-1 at 1/(sqrt(d)+1) scale.
        CompressorKind::TernGrad => Ok((df.sqrt() - 1.0) / 2.0),
        CompressorKind::Bernoulli { keep_prob } => Ok((1.0 - keep_prob) / keep_prob),
        CompressorKind::TopK { .. } => Err(Error::Biased("top-k")),
    }
}

/// Variance factor of the joint operator applying `kinds[i]` to block `i`:
/// the maximum of the per-block factors.
pub fn joint_variance_factor(kinds: &[CompressorKind], d: usize) -> Result<f64> {
    if kinds.is_empty() {
        return Err(Error::config("joint variance factor of an empty list"));
    }
    let mut omega = 0.0f64;
    for kind in kinds {
        omega = omega.max(variance_factor(kind, d)?);
    }
    Ok(omega)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamFactory;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn rng_for(stream: u64) -> rand_chacha::ChaCha8Rng {
        StreamFactory::new(2024).stream(stream)
    }

    fn gaussian(d: usize, stream: u64) -> Array1<f64> {
        use rand_distr::StandardNormal;
        let mut rng = rng_for(stream);
        Array1::from_iter((0..d).map(|_| rand::Rng::sample::<f64, _>(&mut rng, StandardNormal)))
    }

    #[test]
    fn identity_is_exact_with_dense_bits() {
        let x = gaussian(124, 0);
        let msg = compress(&CompressorKind::Identity, x.view(), &mut rng_for(1)).unwrap();
        assert_eq!(msg.payload, x);
        assert_eq!(msg.bit_cost, 32 * 124);
    }

    #[test]
    fn every_kind_maps_zero_to_zero() {
        let zero = Array1::zeros(16);
        for kind in [
            CompressorKind::Identity,
            CompressorKind::RandomDithering { levels: 4 },
            CompressorKind::Natural,
            CompressorKind::TernGrad,
            CompressorKind::Bernoulli { keep_prob: 0.3 },
            CompressorKind::TopK { k: 3 },
        ] {
            let msg = compress(&kind, zero.view(), &mut rng_for(2)).unwrap();
            assert!(msg.payload.iter().all(|&v| v == 0.0), "{}", kind.label());
        }
    }

    #[test]
    fn zero_norm_skips_randomness_for_scaled_kinds() {
        let zero = Array1::zeros(8);
        for kind in [
            CompressorKind::RandomDithering { levels: 2 },
            CompressorKind::TernGrad,
        ] {
            let mut rng = rng_for(3);
            let before: f64 = rng.clone().random();
            compress(&kind, zero.view(), &mut rng).unwrap();
            let after: f64 = rng.random();
            assert_eq!(before, after, "{} consumed randomness", kind.label());
        }
    }

    #[test]
    fn rejects_non_finite_input() {
        let x = array![1.0, f64::NAN];
        assert!(compress(&CompressorKind::Identity, x.view(), &mut rng_for(4)).is_err());
    }

    #[test]
    fn rejects_bad_parameters() {
        let x = gaussian(4, 5);
        assert!(compress(&CompressorKind::TopK { k: 5 }, x.view(), &mut rng_for(5)).is_err());
        assert!(compress(&CompressorKind::TopK { k: 0 }, x.view(), &mut rng_for(5)).is_err());
        assert!(
            compress(&CompressorKind::Bernoulli { keep_prob: 0.0 }, x.view(), &mut rng_for(5))
                .is_err()
        );
        assert!(
            compress(&CompressorKind::RandomDithering { levels: 0 }, x.view(), &mut rng_for(5))
                .is_err()
        );
    }

    #[test]
    fn terngrad_structure() {
        let x = gaussian(50, 6);
        let m = x.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        let msg = compress(&CompressorKind::TernGrad, x.view(), &mut rng_for(7)).unwrap();
        for (&v, &orig) in msg.payload.iter().zip(x.iter()) {
            assert!(
                v == 0.0 || (v.abs() == m && v.signum() == orig.signum()),
                "entry {v} not in {{-m, 0, m}} for m={m}"
            );
        }
        assert_eq!(msg.bit_cost, 32 + 2 * 50);
    }

    #[test]
    fn dithering_structure() {
        let x = gaussian(30, 8);
        let norm = x.dot(&x).sqrt();
        let s = 4u32;
        let msg =
            compress(&CompressorKind::RandomDithering { levels: s }, x.view(), &mut rng_for(9))
                .unwrap();
        for (&v, &orig) in msg.payload.iter().zip(x.iter()) {
            let level = v.abs() * s as f64 / norm;
            assert_abs_diff_eq!(level, level.round(), epsilon = 1e-9);
            assert!(level.round() <= s as f64 + 0.1);
            assert!(v == 0.0 || v.signum() == orig.signum());
        }
    }

    #[test]
    fn natural_brackets_each_coordinate() {
        let x = gaussian(40, 10);
        let msg = compress(&CompressorKind::Natural, x.view(), &mut rng_for(11)).unwrap();
        for (&v, &orig) in msg.payload.iter().zip(x.iter()) {
            assert_eq!(v.signum(), orig.signum());
            let ratio = v.abs() / orig.abs();
            assert!((0.5..=2.0).contains(&ratio), "ratio {ratio}");
            // Power of two: mantissa bits all zero.
            assert_eq!(v.abs().to_bits() & ((1u64 << 52) - 1), 0);
        }
        assert_eq!(msg.bit_cost, 9 * 40);
    }

    #[test]
    fn natural_keeps_exact_powers_of_two() {
        let x = array![1.0, -2.0, 0.25, 8.0];
        let msg = compress(&CompressorKind::Natural, x.view(), &mut rng_for(12)).unwrap();
        assert_eq!(msg.payload, x);
    }

    #[test]
    fn bernoulli_support_is_scaled_passthrough() {
        let x = gaussian(60, 13);
        let q = 0.4;
        let msg =
            compress(&CompressorKind::Bernoulli { keep_prob: q }, x.view(), &mut rng_for(14))
                .unwrap();
        let mut survivors = 0;
        for (&v, &orig) in msg.payload.iter().zip(x.iter()) {
            if v != 0.0 {
                assert_eq!(v, orig / q);
                survivors += 1;
            }
        }
        assert_eq!(msg.bit_cost, survivors * (32 + 6));
    }

    #[test]
    fn topk_keeps_largest_with_lower_index_ties() {
        let x = array![1.0, -3.0, 2.0, 2.0, 0.1];
        let msg = compress(&CompressorKind::TopK { k: 2 }, x.view(), &mut rng_for(15)).unwrap();
        assert_eq!(msg.payload, array![0.0, -3.0, 2.0, 0.0, 0.0]);
        let ties = array![2.0, 2.0, 2.0];
        let msg = compress(&CompressorKind::TopK { k: 2 }, ties.view(), &mut rng_for(15)).unwrap();
        assert_eq!(msg.payload, array![2.0, 2.0, 0.0]);
    }

    #[test]
    fn pinned_bit_costs() {
        assert_eq!(bit_cost(&CompressorKind::Identity, 124, 124), 3968);
        assert_eq!(bit_cost(&CompressorKind::TopK { k: 10 }, 124, 10), 390);
        assert_eq!(bit_cost(&CompressorKind::TernGrad, 124, 124), 280);
        assert_eq!(
            bit_cost(&CompressorKind::RandomDithering { levels: 8 }, 124, 124),
            32 + 124 * 5
        );
        assert_eq!(bit_cost(&CompressorKind::Natural, 124, 124), 1116);
    }

    #[test]
    fn variance_factor_values() {
        let bern = CompressorKind::Bernoulli { keep_prob: 0.5 };
        assert_eq!(variance_factor(&CompressorKind::Identity, 10).unwrap(), 0.0);
        assert_eq!(variance_factor(&bern, 10).unwrap(), 1.0);
        assert_eq!(
            variance_factor(&CompressorKind::RandomDithering { levels: 1 }, 4).unwrap(),
            2.0
        );
        assert_eq!(variance_factor(&CompressorKind::Natural, 77).unwrap(), 0.125);
        assert_eq!(variance_factor(&CompressorKind::TernGrad, 1).unwrap(), 0.0);
        assert!(variance_factor(&CompressorKind::TopK { k: 1 }, 4).is_err());
    }

    /// Exact expectation over all 2^d Bernoulli masks matches the analytic
    /// (1-q)/q certificate with equality.
    #[test]
    fn bernoulli_variance_by_enumeration() {
        let d = 8;
        let x = gaussian(d, 16);
        let x_norm_sq = x.dot(&x);
        for q in [0.25, 0.5, 0.9] {
            let mut expected = 0.0;
            for mask in 0u32..(1 << d) {
                let mut weight = 1.0;
                let mut err_sq = 0.0;
                for i in 0..d {
                    let kept = mask >> i & 1 == 1;
                    weight *= if kept { q } else { 1.0 - q };
                    let compressed = if kept { x[i] / q } else { 0.0 };
                    err_sq += (compressed - x[i]).powi(2);
                }
                expected += weight * err_sq;
            }
            let omega =
                variance_factor(&CompressorKind::Bernoulli { keep_prob: q }, d).unwrap();
            assert_abs_diff_eq!(expected / x_norm_sq, omega, epsilon = 1e-10);
        }
    }

    /// Monte-Carlo variance of dithering(s=1) at d=4 stays under the
    /// min(d/s^2, sqrt(d)/s) = 2 certificate.
    #[test]
    fn dithering_variance_monte_carlo() {
        let kind = CompressorKind::RandomDithering { levels: 1 };
        let x = gaussian(4, 17);
        let x_norm_sq = x.dot(&x);
        let mut rng = rng_for(18);
        let draws = 40_000;
        let mut acc = 0.0;
        for _ in 0..draws {
            let msg = compress(&kind, x.view(), &mut rng).unwrap();
            let diff = &msg.payload - &x;
            acc += diff.dot(&diff);
        }
        let ratio = acc / draws as f64 / x_norm_sq;
        let omega = variance_factor(&kind, 4).unwrap();
        assert!(ratio <= omega * 1.05, "ratio {ratio} vs omega {omega}");
    }

    #[test]
    fn joint_variance_factor_is_max() {
        let kinds = [
            CompressorKind::Bernoulli { keep_prob: 0.5 },
            CompressorKind::RandomDithering { levels: 1 },
        ];
        assert_eq!(joint_variance_factor(&kinds, 4).unwrap(), 2.0);
        assert_eq!(
            joint_variance_factor(&[CompressorKind::Identity; 7], 4).unwrap(),
            0.0
        );
        let with_biased = [CompressorKind::Identity, CompressorKind::TopK { k: 1 }];
        assert!(joint_variance_factor(&with_biased, 4).is_err());
    }

    #[test]
    fn replay_is_byte_identical_and_streams_are_distinct() {
        let factory = StreamFactory::new(2024);
        let x = gaussian(32, 19);
        let spec = CompressorSpec::new(CompressorKind::Bernoulli { keep_prob: 0.5 }, 20);
        let a = compress(&spec.kind, x.view(), &mut spec.stream(&factory)).unwrap();
        let b = compress(&spec.kind, x.view(), &mut spec.stream(&factory)).unwrap();
        assert_eq!(a, b);
        let other = CompressorSpec::new(spec.kind, 21);
        let c = compress(&other.kind, x.view(), &mut other.stream(&factory)).unwrap();
        assert_ne!(a.payload, c.payload);
    }

    /// Masks drawn from distinct streams show no correlation beyond
    /// Monte-Carlo noise.
    #[test]
    fn distinct_streams_are_uncorrelated() {
        let factory = StreamFactory::new(99);
        let q = 0.5;
        let kind = CompressorKind::Bernoulli { keep_prob: q };
        let x = Array1::ones(1);
        let mut s1 = CompressorSpec::new(kind, 5).stream(&factory);
        let mut s2 = CompressorSpec::new(kind, 6).stream(&factory);
        let draws = 40_000;
        let (mut m1, mut m2, mut m12) = (0.0, 0.0, 0.0);
        for _ in 0..draws {
            let a = compress(&kind, x.view(), &mut s1).unwrap().payload[0];
            let b = compress(&kind, x.view(), &mut s2).unwrap().payload[0];
            let (a, b) = (f64::from(a != 0.0), f64::from(b != 0.0));
            m1 += a;
            m2 += b;
            m12 += a * b;
        }
        let nf = draws as f64;
        let cov = m12 / nf - (m1 / nf) * (m2 / nf);
        // se of the covariance estimate is ~ q(1-q)/sqrt(draws) = 1/(4*200).
        assert!(cov.abs() < 4.0 * q * (1.0 - q) / nf.sqrt(), "cov {cov}");
    }
}
